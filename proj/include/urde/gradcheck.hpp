/*
 * Copyright (c) 2026 The urde Authors
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

#include <cstdint>
#include <string>
#include <vector>

namespace urde {

struct KernelCheck {
  std::string kernel;
  std::size_t trials = 0;
  double max_rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<KernelCheck> kernels;
  double max_rel_error = 0.0;
  double seconds = 0.0;

  bool passed(double tolerance = 1e-4) const { return max_rel_error < tolerance; }
};

/// Compares every analytic loss gradient with central finite differences on
/// randomized inputs. Relative error is |a - n| / max(|a|, |n|, 1e-8) over
/// the flattened gradient.
GradcheckReport run_gradcheck(std::uint64_t seed = 0, std::size_t trials = 100);

std::string gradcheck_to_json(const GradcheckReport& report);

}  // namespace urde
