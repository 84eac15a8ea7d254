#pragma once

#include <stdexcept>
#include <string>

namespace rsm {

// Argument outside the domain of a schedule or operator (t outside [0,1], alpha <= 0, ...).
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

// Quantity diverges at the requested point (RF delta at t=0, drift at t=1, a_t = 0).
struct SingularityError : std::domain_error {
  using std::domain_error::domain_error;
};

// Requested step noise exceeds what the kernel can absorb (sigma^2 > 1 - alpha_bar_{i-1}).
struct InvalidNoiseError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Sampler weight w = Omega*delta/sigma queried at a deterministic step.
struct UndefinedWeightError : std::domain_error {
  using std::domain_error::domain_error;
};

// Caller violated an operation contract (noise on a deterministic edge, missing records, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Experiment configuration failed schema validation.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Optimisation diverged.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace rsm
