#pragma once

#include <stdexcept>
#include <string>

namespace apo {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// evaluation budget cap reached while an uncached evaluation was requested
struct BudgetExhausted : Error {
  using Error::Error;
};

// bad run configuration (missing files, inconsistent budgets, ...)
struct ConfigError : Error {
  using Error::Error;
};

// file read/write problems
struct IoError : Error {
  using Error::Error;
};

// input file did not match the expected schema
struct SchemaError : Error {
  using Error::Error;
};

// split would leave validation or test empty
struct DegenerateSplit : Error {
  using Error::Error;
};

// network-level failure talking to an endpoint (retriable)
struct TransportError : Error {
  using Error::Error;
};

// rate limit / quota response (retriable, longer backoff)
struct QuotaError : Error {
  using Error::Error;
};

// endpoint replied with something we cannot parse (not retriable)
struct MalformedResponse : Error {
  using Error::Error;
};

// all retry attempts failed; message carries the last cause
struct ExhaustedRetries : Error {
  using Error::Error;
};

}  // namespace apo
