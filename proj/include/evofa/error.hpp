#pragma once

#include <exception>
#include <stdexcept>
#include <string>

namespace evofa {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };

// data ingestion
class IngestError : public Error { using Error::Error; };
class SchemaError : public Error { using Error::Error; };
class DataError : public Error { using Error::Error; };

class ProtocolError : public Error { using Error::Error; };
class SamplingError : public Error { using Error::Error; };

// checkpoints
class CorruptCheckpointError : public Error { using Error::Error; };
class VersionError : public Error { using Error::Error; };

/// Rethrows the in-flight evofa::Error as the same class with `prefix`
/// prepended to its message. Call only inside a catch block.
[[noreturn]] inline void rethrow_with_context(const std::string& prefix) {
  try {
    throw;
  }
#define EVOFA_RETHROW_AS(T) \
  catch (const T& e) { throw T(prefix + e.what()); }
  EVOFA_RETHROW_AS(DimensionError)
  EVOFA_RETHROW_AS(ConfigError)
  EVOFA_RETHROW_AS(ContractError)
  EVOFA_RETHROW_AS(ArgumentError)
  EVOFA_RETHROW_AS(IngestError)
  EVOFA_RETHROW_AS(SchemaError)
  EVOFA_RETHROW_AS(DataError)
  EVOFA_RETHROW_AS(ProtocolError)
  EVOFA_RETHROW_AS(SamplingError)
  EVOFA_RETHROW_AS(CorruptCheckpointError)
  EVOFA_RETHROW_AS(VersionError)
  EVOFA_RETHROW_AS(Error)
#undef EVOFA_RETHROW_AS
}

}  // namespace evofa
