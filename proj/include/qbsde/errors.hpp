#pragma once

#include <stdexcept>
#include <string>

namespace qbsde {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration, detected before any computation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A generator, conjugate, or terminal returned a non-finite value.
class EvaluationFault : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

// Raised when a function assumed convex is observed to violate convexity.
class NonConvexity : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Conjugate search kept hitting the search boundary (f1 = +inf or not coercive).
class SearchDivergence : public Error {
 public:
  using Error::Error;
};

class RankDeficient : public Error {
 public:
  using Error::Error;
};

class PicardFailure : public Error {
 public:
  PicardFailure(const std::string& what, double gap) : Error(what), gap_(gap) {}
  double gap() const noexcept { return gap_; }

 private:
  double gap_;
};

class DegenerateWeights : public Error {
 public:
  using Error::Error;
};

}  // namespace qbsde
