#pragma once

#include <stdexcept>
#include <string>

namespace kmig {

// Base for every failure raised by the simulator. Syscall-level failures are
// not exceptions; they come back as an Errno inside SyscallResult.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define KMIG_DEFINE_ERROR(Name)                  \
    class Name : public Error {                  \
    public:                                      \
        using Error::Error;                      \
    }

KMIG_DEFINE_ERROR(RangeError);
KMIG_DEFINE_ERROR(AlignmentError);
KMIG_DEFINE_ERROR(OverlapError);
KMIG_DEFINE_ERROR(NotFoundError);
KMIG_DEFINE_ERROR(StateError);
KMIG_DEFINE_ERROR(CapacityError);
KMIG_DEFINE_ERROR(PlacementError);
KMIG_DEFINE_ERROR(TimeoutError);
KMIG_DEFINE_ERROR(InjectionError);
KMIG_DEFINE_ERROR(ConfigError);

#undef KMIG_DEFINE_ERROR

} // namespace kmig
