#pragma once

#include <stdexcept>
#include <string>

namespace astra {

// Every failure raised by the library derives from Error; the CLI maps the
// concrete type to an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define ASTRA_DEFINE_ERROR(Name)         \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  };

ASTRA_DEFINE_ERROR(DimensionError)
ASTRA_DEFINE_ERROR(InvalidMaskError)
ASTRA_DEFINE_ERROR(ContractError)
ASTRA_DEFINE_ERROR(InsufficientDataError)
ASTRA_DEFINE_ERROR(CorruptIndexError)
ASTRA_DEFINE_ERROR(ModeError)
ASTRA_DEFINE_ERROR(PlanError)
ASTRA_DEFINE_ERROR(ProtocolError)
ASTRA_DEFINE_ERROR(DomainError)
ASTRA_DEFINE_ERROR(LifecycleError)
ASTRA_DEFINE_ERROR(FormatError)
ASTRA_DEFINE_ERROR(ConfigError)

#undef ASTRA_DEFINE_ERROR

}  // namespace astra
