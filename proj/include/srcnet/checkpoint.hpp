/*
 * Copyright (c) 2026 The srcnet Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Checkpoint file layout (all integers little-endian):
//
//   magic      8 bytes  "SRCNETCK"
//   version    u32      currently 1
//   kind       u32      0 = model, 1 = training state
//   cfg_len    u64      length of the configuration text
//   cfg        cfg_len bytes of `key = value` lines
//   count      u64      number of tensor records
//   record*:
//     name_len u32, name bytes (UTF-8)
//     dtype    u8       1 = float32, 2 = float64
//     role     u8       0 = parameter, 1 = buffer
//     rank     u32, then rank x u64 extents
//     data     product(extents) IEEE-754 values, little-endian

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "srcnet/model.hpp"

namespace srcnet {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline constexpr char kCheckpointMagic[8] = {'S', 'R', 'C', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint32_t { model = 0, training_state = 1 };

struct CheckpointRecord {
  std::string name;
  DType dtype = DType::f64;
  TensorRole role = TensorRole::parameter;
  Shape shape;
  std::vector<double> values;  // widened; exact for both dtypes
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  CheckpointKind kind = CheckpointKind::model;
  std::string config_text;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return &r;
    return nullptr;
  }
};

namespace detail {

class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& out) : out_(out) {}
  template <typename U>
  void uint(U v) {
    unsigned char b[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out_.write(reinterpret_cast<const char*>(b), sizeof(U));
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

 private:
  std::ostream& out_;
};

class ByteReader {
 public:
  ByteReader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <typename U>
  U uint() {
    unsigned char b[sizeof(U)];
    read(b, sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
    return v;
  }
  void read(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw CheckpointError("checkpoint " + path_ + ": truncated file");
    }
  }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace detail

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  detail::ByteWriter w(out);
  w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.uint<std::uint32_t>(ck.version);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ck.kind));
  w.uint<std::uint64_t>(ck.config_text.size());
  w.bytes(ck.config_text.data(), ck.config_text.size());
  w.uint<std::uint64_t>(ck.records.size());
  for (const auto& r : ck.records) {
    if (shape_numel(r.shape) != r.values.size()) {
      throw CheckpointError("record " + r.name + ": shape/data mismatch");
    }
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(r.dtype));
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(r.role));
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) w.uint<std::uint64_t>(e);
    for (double v : r.values) {
      if (r.dtype == DType::f32) {
        w.uint<std::uint32_t>(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        w.uint<std::uint64_t>(std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  if (!out) throw CheckpointError("write to " + path + " failed");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  detail::ByteReader r(in, path);
  char magic[8];
  r.read(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw CheckpointError(path + " is not a checkpoint (bad magic)");
  }
  Checkpoint ck;
  ck.version = r.uint<std::uint32_t>();
  if (ck.version != kCheckpointVersion) {
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(ck.version));
  }
  ck.kind = static_cast<CheckpointKind>(r.uint<std::uint32_t>());
  const auto cfg_len = r.uint<std::uint64_t>();
  ck.config_text.resize(cfg_len);
  r.read(ck.config_text.data(), cfg_len);
  const auto count = r.uint<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointRecord rec;
    rec.name.resize(r.uint<std::uint32_t>());
    r.read(rec.name.data(), rec.name.size());
    const auto dtype = r.uint<std::uint8_t>();
    if (dtype != 1 && dtype != 2) {
      throw CheckpointError(path + ": record " + rec.name + " has unknown dtype " + std::to_string(dtype));
    }
    rec.dtype = static_cast<DType>(dtype);
    rec.role = static_cast<TensorRole>(r.uint<std::uint8_t>());
    rec.shape.resize(r.uint<std::uint32_t>());
    for (auto& e : rec.shape) e = r.uint<std::uint64_t>();
    rec.values.resize(shape_numel(rec.shape));
    for (auto& v : rec.values) {
      v = rec.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(r.uint<std::uint32_t>()))
                                  : std::bit_cast<double>(r.uint<std::uint64_t>());
    }
    ck.records.push_back(std::move(rec));
  }
  return ck;
}

template <typename T>
CheckpointRecord make_record(const std::string& name, const Tensor<T>& t,
                             TensorRole role = TensorRole::parameter) {
  return {name, dtype_of<T>(), role, t.shape(),
          std::vector<double>(t.data().begin(), t.data().end())};
}

/// Copies a record into an existing tensor of the same shape.
template <typename T>
void assign_record(const CheckpointRecord& rec, Tensor<T>& t) {
  if (rec.shape != t.shape()) {
    throw CheckpointError("record " + rec.name + " has shape " + shape_str(rec.shape) +
                          ", model expects " + shape_str(t.shape()));
  }
  auto dst = t.mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(rec.values[i]);
}

template <typename T>
void save_model(const std::string& path, const SrcNet<T>& model) {
  Checkpoint ck;
  ck.kind = CheckpointKind::model;
  ck.config_text = model.config().to_kv().to_text();
  for (const auto& p : model.named_tensors()) ck.records.push_back(make_record(p.name, p.tensor, p.role));
  write_checkpoint(path, ck);
}

inline ModelConfig checkpoint_config(const Checkpoint& ck) {
  return ModelConfig::from_kv(KeyValueConfig::parse(ck.config_text));
}

/// Loads weights into `model`. A configuration mismatch raises a
/// CheckpointError listing every differing field.
template <typename T>
void load_weights(const Checkpoint& ck, SrcNet<T>& model) {
  const auto stored = checkpoint_config(ck);
  if (const auto d = ModelConfig::diff(stored, model.config()); !d.empty()) {
    std::string msg = "checkpoint configuration is incompatible with the model:";
    for (const auto& line : d) msg += "\n  " + line;
    throw CheckpointError(msg);
  }
  for (auto& p : model.named_tensors()) {
    const auto* rec = ck.find(p.name);
    if (!rec) throw CheckpointError("checkpoint lacks tensor " + p.name);
    assign_record(*rec, p.tensor);
  }
}

template <typename T>
SrcNet<T> load_model(const std::string& path) {
  const auto ck = read_checkpoint(path);
  if (ck.kind != CheckpointKind::model) throw CheckpointError(path + " is not a model checkpoint");
  SrcNet<T> model(checkpoint_config(ck), 0);
  load_weights(ck, model);
  return model;
}

}  // namespace srcnet
