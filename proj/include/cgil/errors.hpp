#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cgil {

// Every error the engine raises carries a category; the CLI maps it to an exit code.
enum class ErrorCategory {
  kShape = 10,
  kDomain,
  kIndex,
  kState,
  kInsufficientData,
  kLookup,
  kFormat,
  kProtocol,
  kSpec,
  kNumeric,
  kIo,
  kUndefinedMetric,
  kSequence,
  kCompleteness,
};

inline std::string_view category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::kShape: return "shape";
    case ErrorCategory::kDomain: return "domain";
    case ErrorCategory::kIndex: return "index";
    case ErrorCategory::kState: return "state";
    case ErrorCategory::kInsufficientData: return "insufficient-data";
    case ErrorCategory::kLookup: return "lookup";
    case ErrorCategory::kFormat: return "format";
    case ErrorCategory::kProtocol: return "protocol";
    case ErrorCategory::kSpec: return "spec";
    case ErrorCategory::kNumeric: return "numeric";
    case ErrorCategory::kIo: return "io";
    case ErrorCategory::kUndefinedMetric: return "undefined-metric";
    case ErrorCategory::kSequence: return "sequence";
    case ErrorCategory::kCompleteness: return "completeness";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(std::string(category_name(category)) + " error: " + what),
        category_(category),
        detail_(what) {}

  ErrorCategory category() const noexcept { return category_; }
  const std::string& detail() const noexcept { return detail_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
  std::string detail_;
};

#define CGIL_DEFINE_ERROR(Name, Cat)                                        \
  class Name : public Error {                                               \
   public:                                                                  \
    explicit Name(const std::string& what) : Error(ErrorCategory::Cat, what) {} \
  };

CGIL_DEFINE_ERROR(ShapeError, kShape)
CGIL_DEFINE_ERROR(DomainError, kDomain)
CGIL_DEFINE_ERROR(IndexError, kIndex)
CGIL_DEFINE_ERROR(StateError, kState)
CGIL_DEFINE_ERROR(InsufficientDataError, kInsufficientData)
CGIL_DEFINE_ERROR(LookupError, kLookup)
CGIL_DEFINE_ERROR(ProtocolError, kProtocol)
CGIL_DEFINE_ERROR(SpecError, kSpec)
CGIL_DEFINE_ERROR(NumericError, kNumeric)
CGIL_DEFINE_ERROR(IoError, kIo)
CGIL_DEFINE_ERROR(UndefinedMetricError, kUndefinedMetric)
CGIL_DEFINE_ERROR(SequenceError, kSequence)
CGIL_DEFINE_ERROR(CompletenessError, kCompleteness)

#undef CGIL_DEFINE_ERROR

/// Malformed binary input. `offset()` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(std::size_t offset, const std::string& what)
      : Error(ErrorCategory::kFormat, "at offset " + std::to_string(offset) + ": " + what),
        offset_(offset),
        reason_(what) {}

  std::size_t offset() const noexcept { return offset_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::size_t offset_;
  std::string reason_;
};

// Rethrows `e` as the same concrete type with `context` prepended to its message.
[[noreturn]] inline void rethrow_in_context(const Error& e, const std::string& context) {
  const std::string msg = context + ": " + e.detail();
  switch (e.category()) {
    case ErrorCategory::kShape: throw ShapeError(msg);
    case ErrorCategory::kDomain: throw DomainError(msg);
    case ErrorCategory::kIndex: throw IndexError(msg);
    case ErrorCategory::kState: throw StateError(msg);
    case ErrorCategory::kInsufficientData: throw InsufficientDataError(msg);
    case ErrorCategory::kLookup: throw LookupError(msg);
    case ErrorCategory::kFormat: {
      auto& fe = static_cast<const FormatError&>(e);
      throw FormatError(fe.offset(), context + ": " + fe.reason());
    }
    case ErrorCategory::kProtocol: throw ProtocolError(msg);
    case ErrorCategory::kSpec: throw SpecError(msg);
    case ErrorCategory::kNumeric: throw NumericError(msg);
    case ErrorCategory::kIo: throw IoError(msg);
    case ErrorCategory::kUndefinedMetric: throw UndefinedMetricError(msg);
    case ErrorCategory::kSequence: throw SequenceError(msg);
    case ErrorCategory::kCompleteness: throw CompletenessError(msg);
  }
  throw Error(e.category(), msg);
}

}  // namespace cgil
