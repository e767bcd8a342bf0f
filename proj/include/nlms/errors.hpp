#pragma once

#include <stdexcept>
#include <string>

namespace nlms {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : Error { using Error::Error; };
struct ParameterError : Error { using Error::Error; };
struct TrappedGeodesicError : Error { using Error::Error; };
struct OutOfTubeError : Error { using Error::Error; };
struct ChartError : Error { using Error::Error; };
struct MeshError : Error { using Error::Error; };
struct ConvergenceError : Error { using Error::Error; };
struct SmallnessError : Error { using Error::Error; };
struct ResolutionError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
// Zero is (numerically) a Dirichlet eigenvalue of the linearized operator.
struct AssumptionError : Error { using Error::Error; };
struct ConditioningError : Error { using Error::Error; };

}  // namespace nlms
