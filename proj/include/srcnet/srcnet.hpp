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

#pragma once

#include "srcnet/tensor.hpp"
#include "srcnet/ops.hpp"
#include "srcnet/random.hpp"
#include "srcnet/gradcheck.hpp"
#include "srcnet/nn.hpp"
#include "srcnet/pim.hpp"
#include "srcnet/pmffm.hpp"
#include "srcnet/config.hpp"
#include "srcnet/losses.hpp"
#include "srcnet/model.hpp"
#include "srcnet/checkpoint.hpp"
#include "srcnet/metrics.hpp"
#include "srcnet/data.hpp"
#include "srcnet/train.hpp"
