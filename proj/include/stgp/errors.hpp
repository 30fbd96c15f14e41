#pragma once

#include <stdexcept>
#include <string>

namespace stgp {

// Exit-code taxonomy shared by the library and the CLI:
//   2 = validation (bad input, bad config, schema violation)
//   3 = convergence (chains finished but failed the R-hat gate)
//   4 = numerical (factorization failure, non-finite state, sampler collapse)
enum class errc { validation = 2, convergence = 3, numerical = 4 };

class error : public std::runtime_error {
public:
  error(errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  errc code() const noexcept { return code_; }
  int exit_code() const noexcept { return static_cast<int>(code_); }

private:
  errc code_;
};

struct validation_error : error {
  explicit validation_error(const std::string& what) : error(errc::validation, what) {}
};

struct convergence_error : error {
  explicit convergence_error(const std::string& what) : error(errc::convergence, what) {}
};

struct numerical_error : error {
  explicit numerical_error(const std::string& what) : error(errc::numerical, what) {}
};

} // namespace stgp
