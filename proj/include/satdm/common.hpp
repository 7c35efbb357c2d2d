#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif
#include <Eigen/Core>

namespace satdm {

/// Configuration errors: a caller asked for something structurally impossible
/// (indivisible channel counts, odd embedding dims, bad schedule parameters).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Contract errors: an operation was called outside its stated preconditions
/// (timestep out of range, shape mismatch, non-scalar loss).
class ContractError : public std::runtime_error {
 public:
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dimension errors: tensor shapes do not line up for the requested op.
class DimensionError : public ContractError {
 public:
  explicit DimensionError(const std::string& msg) : ContractError(msg) {}
};

/// Data errors: files missing, unparsable, or holding out-of-domain values.
class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failures: NaN/Inf detected, non-positive variance, non-PSD
/// covariance after regularization.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

/// When enabled, every primitive scans its forward output for NaN/Inf and
/// throws NumericalError instead of letting the value propagate.
inline bool& finite_check_mode() {
  static bool enabled = [] {
    const char* env = std::getenv("SATDM_CHECK_FINITE");
    return env != nullptr && env[0] == '1';
  }();
  return enabled;
}

struct FiniteCheckGuard {
  bool prev;
  explicit FiniteCheckGuard(bool on) : prev(finite_check_mode()) { finite_check_mode() = on; }
  ~FiniteCheckGuard() { finite_check_mode() = prev; }
};

/// Caps worker threads for Eigen and OpenMP. 0 = leave library defaults.
inline void set_num_threads(int n) {
  if (n <= 0) return;
  Eigen::setNbThreads(n);
#ifdef _OPENMP
  omp_set_num_threads(n);
#endif
}

/// Resolves thread count: explicit argument wins, then SATDM_THREADS, then 0.
inline int resolve_threads(int cli_value) {
  if (cli_value > 0) return cli_value;
  if (const char* env = std::getenv("SATDM_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 0;
}

}  // namespace satdm
