#ifndef PEPNET_ERRORS_HPP
#define PEPNET_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace pepnet {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define PEPNET_DEFINE_ERROR(NAME)                                  \
  struct NAME : Error {                                            \
    explicit NAME(const std::string& msg) : Error(#NAME ": " + msg) {} \
  }

PEPNET_DEFINE_ERROR(DuplicateTag);
PEPNET_DEFINE_ERROR(UnknownTag);
PEPNET_DEFINE_ERROR(EmptyBasis);
PEPNET_DEFINE_ERROR(RegistryMismatch);
PEPNET_DEFINE_ERROR(ShapeError);
PEPNET_DEFINE_ERROR(InvalidClass);
PEPNET_DEFINE_ERROR(EmptyInterpolationSet);
PEPNET_DEFINE_ERROR(InvalidSpectralBound);
PEPNET_DEFINE_ERROR(EmptyConsensusSet);
PEPNET_DEFINE_ERROR(DegenerateFixture);
PEPNET_DEFINE_ERROR(NotInClass);
PEPNET_DEFINE_ERROR(NotInMcl);
PEPNET_DEFINE_ERROR(InvalidStepSize);
PEPNET_DEFINE_ERROR(DanglingReference);
PEPNET_DEFINE_ERROR(InvalidPartition);
PEPNET_DEFINE_ERROR(PartitionMetricMismatch);
PEPNET_DEFINE_ERROR(NoFiniteLimit);
PEPNET_DEFINE_ERROR(InternalSymmetryError);
PEPNET_DEFINE_ERROR(NumericalRankError);
PEPNET_DEFINE_ERROR(InvalidLogFit);
PEPNET_DEFINE_ERROR(ConfigError);

#undef PEPNET_DEFINE_ERROR

}  // namespace pepnet

#endif
