#pragma once

#include <stdexcept>
#include <string>

namespace step {

/// Base of every error raised by the library. `kind()` is the stable tag the
/// CLI prints in its structured error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define STEP_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(tag, what) {}      \
  }

STEP_DEFINE_ERROR(ConfigError, "configuration");
STEP_DEFINE_ERROR(InputError, "input");
STEP_DEFINE_ERROR(MetricError, "metric");
STEP_DEFINE_ERROR(FormatError, "format");
STEP_DEFINE_ERROR(ListingError, "listing");
STEP_DEFINE_ERROR(IntegrityError, "integrity");
STEP_DEFINE_ERROR(MigrationError, "migration");
STEP_DEFINE_ERROR(ShapeError, "shape");

#undef STEP_DEFINE_ERROR

/// A pipeline stage was invoked before the artifact it depends on exists.
class PrerequisiteError : public Error {
 public:
  PrerequisiteError(const std::string& what, std::string missing)
      : Error("prerequisite", what), missing_(std::move(missing)) {}
  const std::string& missing() const noexcept { return missing_; }

 private:
  std::string missing_;
};

template <class E = InputError>
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw E(msg);
}

}  // namespace step
