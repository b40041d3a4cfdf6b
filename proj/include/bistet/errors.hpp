#pragma once

// Typed errors shared by all modules; the CLI maps kinds to exit codes.

#include <stdexcept>
#include <string>

namespace bistet {

enum class ErrorKind {
  Shape,       // tensor dimension mismatch
  Config,      // invalid or inconsistent configuration
  Codec,       // character/token codec failure
  Contract,    // precondition or invariant violation
  Numeric,     // non-finite values where finite required
  Io,          // file system / parse failure
  Checkpoint,  // checkpoint format violation
  Render,      // image rendering failure
  Optimizer,   // optimizer contract failure
  Length,      // sequence length limit exceeded
  Train,       // training loop failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

  // Errors caused by user-supplied inputs (files, configs, flags) vs internal
  // invariant breaks; drives the CLI's 1-vs-2 exit code.
  bool user_facing() const {
    switch (kind_) {
      case ErrorKind::Config:
      case ErrorKind::Codec:
      case ErrorKind::Io:
      case ErrorKind::Checkpoint:
      case ErrorKind::Render:
      case ErrorKind::Length:
        return true;
      default:
        return false;
    }
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) raise(kind, msg);
}

}  // namespace bistet
