#pragma once

// Self-checks behind `qgn verify`: sparse convolution against a dense
// convolution with a multiplicative zero mask, central finite differences
// for every backward op and for the full model, and codec round trips.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "qgn/model.hpp"
#include "qgn/tensor.hpp"

namespace qgn {

// Sparse forward used by the oracle suite; replaceable so that deliberately
// broken kernels can be shown to fail.
template <typename T>
using SparseConvFn = std::function<SparseActivation<T>(const SparseActivation<T>&, const ConvParams<T>&)>;

enum class KernelFault { None, TransposeKernel };

KernelFault parse_fault(const std::string& name);  // throws ConfigError

// Swaps the ky/kx axes of the kernel before convolving.
template <typename T>
SparseConvFn<T> faulty_sparse_conv(KernelFault fault);

struct OracleCase {
  std::int32_t width = 0;
  std::int32_t height = 0;
  std::int32_t c_in = 0;
  std::int32_t c_out = 0;
  std::int32_t kernel = 3;
  double density = 0.0;
};

OracleCase oracle_case_from_seed(std::uint64_t seed);

struct OracleError {
  double forward = 0.0;
  double grad_input = 0.0;
  double grad_weight = 0.0;
  double grad_bias = 0.0;
  std::size_t active_sites = 0;

  double max() const;
};

/// Max |sparse - dense| / max(1, |dense|) over one random instance.
template <typename T>
OracleError sparse_vs_masked_dense(std::uint64_t seed, const SparseConvFn<T>& sparse = {});

// |analytic - numeric| / max(|analytic|, |numeric|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-3);

/// Largest FD relative error over all inputs and parameters of the named op
/// ("sparse_conv", "dense_conv", "dense_conv_s2", "upsample", "gather_skip",
/// "relu", "add") on a random instance.
template <typename T>
double op_gradient_error(const std::string& op, std::uint64_t seed);

std::vector<std::string> gradient_ops();

struct ModelGradCheck {
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  std::vector<std::string> worst;  // "param[index]: analytic vs numeric"
};

/// Central differences of the total loss w.r.t. `samples` parameters drawn
/// among those whose analytic gradient is at least 1e-3 of the largest.
template <typename T>
ModelGradCheck model_gradient_check(const QgnConfig& cfg, std::int32_t size, PropagationScheme scheme,
                                    std::size_t samples, std::uint64_t seed);

struct SuiteFailure {
  std::string suite;
  std::uint64_t case_seed = 0;
  std::string detail;
};

struct SuiteResult {
  std::string name;
  std::size_t cases = 0;
  std::size_t failures = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::optional<SuiteFailure> first_failure;
};

struct VerifyOptions {
  bool f64 = false;
  std::size_t cases = 100;
  std::uint64_t seed = 0;
  KernelFault fault = KernelFault::None;
  std::optional<std::string> only_suite;   // "oracle", "gradient", "model-gradient", "codec"
  std::optional<std::uint64_t> case_seed;  // replay a single case
  bool parallel = true;
};

struct VerifyReport {
  std::vector<SuiteResult> suites;
  bool passed() const;
};

VerifyReport run_verify(const VerifyOptions& options);

}  // namespace qgn
