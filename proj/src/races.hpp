#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "uvgpu/vm.hpp"

namespace uvgpu::detail {

/// Sparse vector clock: (agent, clock) pairs sorted by agent.
class VectorClock {
 public:
  std::uint64_t get(std::uint32_t agent) const;
  void set(std::uint32_t agent, std::uint64_t clock);
  void join(const VectorClock& other);

 private:
  std::vector<std::pair<std::uint32_t, std::uint64_t>> entries_;
};

/// Happens-before race detector. One agent per wave; lanes of a wave share
/// the agent because they execute in lockstep.
class RaceDetector {
 public:
  struct Agent {
    std::uint32_t workgroup = 0;
    VectorClock clock;
    bool has_release = false;
    VectorClock released;
    Scope release_scope = Scope::wave;
    struct Source {
      std::uint32_t agent;
      std::uint32_t workgroup;
      Scope scope;
      VectorClock clock;
    };
    std::vector<Source> observed;  // collected by atomics since the last acquire
  };

  /// Registers an agent and returns its id.
  std::uint32_t add_agent(std::uint32_t workgroup);

  void access(MemSpace space, std::uint32_t workgroup, std::uint32_t word_addr, std::uint32_t agent,
              const AccessSite& site);
  void atomic_sync(MemSpace space, std::uint32_t workgroup, std::uint32_t word_addr, std::uint32_t agent);
  void fence(std::uint32_t agent, MemOrder order, Scope scope);
  void barrier(const std::vector<std::uint32_t>& agents);

  void async_issue(std::uint32_t workgroup, std::uint32_t agent, std::uint32_t lo, std::uint32_t hi,
                   const AccessSite& site);
  /// Drops one pending region (matched exactly) when its copy completes.
  void async_complete(std::uint32_t workgroup, std::uint32_t agent, std::uint32_t lo, std::uint32_t hi);

  /// Forgets scratch shadow state of a finished workgroup.
  void retire_workgroup(std::uint32_t workgroup);

  std::vector<RaceReport> take_reports() { return std::move(reports_); }

  static constexpr std::size_t kMaxReports = 1000;

 private:
  struct Stamp {
    std::uint32_t agent = 0;
    std::uint64_t clock = 0;
    AccessSite site;
  };
  struct Shadow {
    bool has_write = false;
    Stamp write;
    std::vector<Stamp> reads;  // at most one per agent
    std::vector<Agent::Source> sync;
  };
  struct Pending {
    std::uint32_t agent;
    std::uint32_t lo;
    std::uint32_t hi;
    AccessSite site;
  };

  static std::uint64_t key(MemSpace space, std::uint32_t workgroup, std::uint32_t word_addr);
  bool ordered(const Stamp& earlier, std::uint32_t agent) const;
  void report(MemSpace space, std::uint32_t word_addr, const AccessSite& earlier, const AccessSite& later,
              std::string note);

  std::vector<Agent> agents_;
  std::unordered_map<std::uint64_t, Shadow> shadow_;
  std::unordered_map<std::uint32_t, std::vector<Pending>> pending_;
  std::vector<RaceReport> reports_;
  std::set<std::tuple<int, std::string, std::uint32_t, std::string, std::uint32_t>> seen_;
};

}  // namespace uvgpu::detail
