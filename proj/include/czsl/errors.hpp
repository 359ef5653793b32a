#pragma once

#include <stdexcept>
#include <string>

namespace czsl {

/// Base of every error raised by the library. The `kind()` string is stable
/// and used by the CLI when reporting failures.
class Error : public std::runtime_error {
 public:
  Error(const char* kind, const std::string& what)
      : std::runtime_error(std::string(kind) + ": " + what), kind_(kind) {}
  const char* kind() const noexcept { return kind_; }

 private:
  const char* kind_;
};

#define CZSL_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(tag, what) {}       \
  };

CZSL_DEFINE_ERROR(ShapeError, "shape error")
CZSL_DEFINE_ERROR(DomainError, "domain error")
CZSL_DEFINE_ERROR(IndexError, "index error")
CZSL_DEFINE_ERROR(NumericError, "numeric error")
CZSL_DEFINE_ERROR(ConfigError, "config error")
CZSL_DEFINE_ERROR(StateError, "state error")
CZSL_DEFINE_ERROR(LengthError, "length error")
CZSL_DEFINE_ERROR(DataError, "data error")
CZSL_DEFINE_ERROR(ValidationError, "validation error")
CZSL_DEFINE_ERROR(LookupError, "lookup error")
CZSL_DEFINE_ERROR(ProtocolError, "protocol error")
CZSL_DEFINE_ERROR(EmptyCandidateError, "empty-candidate error")
CZSL_DEFINE_ERROR(PreconditionError, "precondition error")

#undef CZSL_DEFINE_ERROR

/// Raised by checkpoint decoding; carries the byte offset of the failure.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error("format error", what + " at byte offset " + std::to_string(offset)),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace czsl
