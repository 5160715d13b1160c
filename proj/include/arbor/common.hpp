#pragma once

#include <compare>
#include <cstddef>
#include <stdexcept>
#include <string>

namespace arbor {

// Undirected edge with normalized endpoint order (u < v).
struct Edge {
  int u;
  int v;
  Edge(int a, int b) : u(a < b ? a : b), v(a < b ? b : a) {}
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

inline std::string to_string(Edge e) {
  return std::to_string(e.u) + "-" + std::to_string(e.v);
}

// Invalid or inconsistent input: bad files, bad labels, shape mismatches.
// The CLI maps this to exit code 3.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failure: singular matrix, degenerate marginal, parameter out of
// the reachable range. The CLI maps this to exit code 4.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed text input; carries the byte offset of the offending character.
class ParseError : public DataError {
 public:
  ParseError(std::size_t pos, const std::string& message)
      : DataError("parse error at position " + std::to_string(pos) + ": " + message),
        position(pos) {}
  std::size_t position;
};

}  // namespace arbor
