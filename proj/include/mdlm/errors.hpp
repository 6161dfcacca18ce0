#pragma once

#include <stdexcept>
#include <string>

namespace mdlm {

// Error categories. Each maps to a distinct CLI exit code (see tools/mdlm.cpp).
enum class ErrorKind : int {
  kConfig = 2,
  kIngestion = 3,
  kShape = 4,
  kContract = 5,
  kInput = 6,
  kCheckpoint = 7,
  kNumeric = 8,
  kMismatch = 9,
  kIo = 10,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define MDLM_DEFINE_ERROR(Name, Kind)                         \
  class Name : public Error {                                 \
   public:                                                    \
    explicit Name(const std::string& what) : Error(Kind, what) {} \
  }

MDLM_DEFINE_ERROR(ConfigError, ErrorKind::kConfig);
MDLM_DEFINE_ERROR(IngestionError, ErrorKind::kIngestion);
MDLM_DEFINE_ERROR(ShapeError, ErrorKind::kShape);
MDLM_DEFINE_ERROR(ContractError, ErrorKind::kContract);
MDLM_DEFINE_ERROR(InputError, ErrorKind::kInput);
MDLM_DEFINE_ERROR(CheckpointError, ErrorKind::kCheckpoint);
MDLM_DEFINE_ERROR(NumericError, ErrorKind::kNumeric);
MDLM_DEFINE_ERROR(MismatchError, ErrorKind::kMismatch);
MDLM_DEFINE_ERROR(IoError, ErrorKind::kIo);

#undef MDLM_DEFINE_ERROR

inline const char* error_kind_name(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kIngestion: return "ingestion";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kContract: return "contract";
    case ErrorKind::kInput: return "input";
    case ErrorKind::kCheckpoint: return "checkpoint";
    case ErrorKind::kNumeric: return "numeric";
    case ErrorKind::kMismatch: return "mismatch";
    case ErrorKind::kIo: return "io";
  }
  return "unknown";
}

}  // namespace mdlm
