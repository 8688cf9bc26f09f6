// Copyright 2026 The cfdp Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

#include "cfdp/error.hpp"
#include "cfdp/frequency.hpp"
#include "cfdp/micronet.hpp"
#include "cfdp/pipeline.hpp"
#include "cfdp/planner.hpp"
#include "cfdp/random.hpp"
#include "cfdp/saliency.hpp"
#include "cfdp/tensors.hpp"
