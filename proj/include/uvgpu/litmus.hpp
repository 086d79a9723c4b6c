#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "uvgpu/machcfg.hpp"
#include "uvgpu/vm.hpp"

namespace uvgpu {

/// Message passing between two single-thread workgroups: the producer
/// stores data and raises a flag with an atomic, the consumer spins on the
/// flag and then reads the data. The fenced form adds a device-scope
/// release before the flag store and a matching acquire after the spin.
std::string message_passing_source(bool fenced);

struct LitmusOutcome {
  std::vector<RaceReport> races;
  std::uint32_t observed = 0;  // data value the consumer read
  std::optional<Trap> trap;
};

inline constexpr std::uint32_t kLitmusData = 42;

LitmusOutcome run_message_passing(const MachineDescriptor& m, std::uint64_t seed, bool fenced);

}  // namespace uvgpu
