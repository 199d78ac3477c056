#pragma once

#include <stdexcept>
#include <string>

namespace docnmt {

// Base class for every error raised by the library. Subclasses name the
// failure kind so callers can react to unusable input separately from I/O.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define DOCNMT_DEFINE_ERROR(Name)       \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  }

DOCNMT_DEFINE_ERROR(IoError);
DOCNMT_DEFINE_ERROR(UnknownOrigin);
DOCNMT_DEFINE_ERROR(VocabTooSmall);
DOCNMT_DEFINE_ERROR(IdOutOfRange);
DOCNMT_DEFINE_ERROR(MalformedMarkup);
DOCNMT_DEFINE_ERROR(EmptyCorpus);
DOCNMT_DEFINE_ERROR(LengthMismatch);
DOCNMT_DEFINE_ERROR(EmptySentence);
DOCNMT_DEFINE_ERROR(SequenceTooLong);
DOCNMT_DEFINE_ERROR(InvalidConfig);
DOCNMT_DEFINE_ERROR(ConfigError);

#undef DOCNMT_DEFINE_ERROR

class MalformedCorpus : public Error {
 public:
  MalformedCorpus(const std::string& what, long document_index)
      : Error(what + " (document " + std::to_string(document_index) + ")"),
        document_index_(document_index) {}

  long document_index() const { return document_index_; }

 private:
  long document_index_;
};

class DivergedLoss : public Error {
 public:
  DivergedLoss(const std::string& what, long update)
      : Error(what + " at update " + std::to_string(update)), update_(update) {}

  long update() const { return update_; }

 private:
  long update_;
};

class StageFailure : public Error {
 public:
  StageFailure(std::string stage, const std::string& log)
      : Error("stage '" + stage + "' failed: " + log), stage_(std::move(stage)) {}

  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace docnmt
