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

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace urde {

/// Dense row-major double matrix used for all numerical work.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

/// Random engine used everywhere a seed is accepted. Outputs are
/// reproducible for a given seed on a given standard library.
using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a stream tag.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

enum class ErrorKind {
  Config,      // invalid configuration or argument
  Format,      // malformed file or payload
  Shape,       // dimension mismatch between inputs
  Numeric,     // non-finite value or degenerate numeric input
  Mining,      // batch cannot supply positives/negatives
  Degenerate,  // structure has no usable content
  Divergence,  // training produced a non-finite loss
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  Error(ErrorKind kind, const std::string& what, std::uint64_t byte_offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(byte_offset) + ")"),
        kind_(kind),
        offset_(byte_offset) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// Byte offset into the offending payload, for format errors.
  std::optional<std::uint64_t> offset() const noexcept { return offset_; }

 private:
  ErrorKind kind_;
  std::optional<std::uint64_t> offset_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

// Worker cap for row-parallel kernels. 0 means "all available cores".
void set_max_threads(unsigned n);
unsigned max_threads();

/// Splits [0, n) into contiguous chunks and runs body(begin, end) on each,
/// possibly concurrently. Chunks write disjoint outputs, so results do not
/// depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

/// L2-normalizes every row in place. Throws Numeric on a zero-norm row.
void normalize_rows(Mat& m, const char* what);

}  // namespace urde
