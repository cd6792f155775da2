#pragma once

#include <stdexcept>
#include <string>

namespace adaprec {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Byte-count or index arithmetic would not fit in 64 bits.
class OverflowError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Structural graph problems: cycles, unknown operands, bad parameters.
class GraphError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class MapFormatError : public Error {
 public:
  using Error::Error;
};

class FileNotFoundError : public Error {
 public:
  using Error::Error;
};

// A persisted precision map was produced for a different graph.
class StaleMapError : public Error {
 public:
  using Error::Error;
};

}  // namespace adaprec
