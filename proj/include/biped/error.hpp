#pragma once

#include <stdexcept>
#include <string>

namespace biped {

// Thrown for every recoverable failure in the library. `code()` carries a
// stable short identifier ("zmp-undefined", "riccati-diverged", ...) that
// tests and the CLI match on; `what()` carries the human-readable detail.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& detail)
      : std::runtime_error(code + ": " + detail), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace biped
