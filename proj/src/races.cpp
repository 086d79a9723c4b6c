#include "races.hpp"

#include <algorithm>

namespace uvgpu::detail {

std::uint64_t VectorClock::get(std::uint32_t agent) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), agent,
                             [](const auto& e, std::uint32_t a) { return e.first < a; });
  return it != entries_.end() && it->first == agent ? it->second : 0;
}

void VectorClock::set(std::uint32_t agent, std::uint64_t clock) {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), agent,
                             [](const auto& e, std::uint32_t a) { return e.first < a; });
  if (it != entries_.end() && it->first == agent) it->second = clock;
  else entries_.insert(it, {agent, clock});
}

void VectorClock::join(const VectorClock& other) {
  std::vector<std::pair<std::uint32_t, std::uint64_t>> out;
  out.reserve(entries_.size() + other.entries_.size());
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  while (a != entries_.end() || b != other.entries_.end()) {
    if (b == other.entries_.end() || (a != entries_.end() && a->first < b->first)) {
      out.push_back(*a++);
    } else if (a == entries_.end() || b->first < a->first) {
      out.push_back(*b++);
    } else {
      out.emplace_back(a->first, std::max(a->second, b->second));
      ++a;
      ++b;
    }
  }
  entries_ = std::move(out);
}

namespace {

bool covers(Scope s, std::uint32_t a, std::uint32_t wg_a, std::uint32_t b, std::uint32_t wg_b) {
  switch (s) {
    case Scope::wave: return a == b;
    case Scope::workgroup: return wg_a == wg_b;
    case Scope::device:
    case Scope::system: return true;
  }
  return false;
}

}  // namespace

std::uint32_t RaceDetector::add_agent(std::uint32_t workgroup) {
  const auto id = static_cast<std::uint32_t>(agents_.size());
  Agent a;
  a.workgroup = workgroup;
  a.clock.set(id, 1);
  agents_.push_back(std::move(a));
  return id;
}

std::uint64_t RaceDetector::key(MemSpace space, std::uint32_t workgroup, std::uint32_t word_addr) {
  const std::uint64_t wg = space == MemSpace::scratch ? workgroup & 0x3fffffffu : 0;
  return (std::uint64_t{static_cast<std::uint8_t>(space)} << 62) | (wg << 32) | word_addr;
}

bool RaceDetector::ordered(const Stamp& earlier, std::uint32_t agent) const {
  return earlier.agent == agent || earlier.clock <= agents_[agent].clock.get(earlier.agent);
}

void RaceDetector::report(MemSpace space, std::uint32_t word_addr, const AccessSite& earlier,
                          const AccessSite& later, std::string note) {
  if (reports_.size() >= kMaxReports) return;
  if (!seen_.emplace(static_cast<int>(space), earlier.function, earlier.pc, later.function, later.pc).second) return;
  RaceReport r;
  r.space = space;
  r.address = word_addr * 4;
  r.earlier = earlier;
  r.later = later;
  r.fix_scope = earlier.workgroup == later.workgroup ? Scope::workgroup : Scope::device;
  r.note = std::move(note);
  reports_.push_back(std::move(r));
}

void RaceDetector::access(MemSpace space, std::uint32_t workgroup, std::uint32_t word_addr, std::uint32_t agent,
                          const AccessSite& site) {
  if (space == MemSpace::arg) return;
  if (space == MemSpace::scratch) {
    if (auto it = pending_.find(workgroup); it != pending_.end())
      for (const auto& p : it->second)
        if (word_addr * 4 >= p.lo && word_addr * 4 < p.hi)
          report(space, word_addr, p.site, site, "access overlaps an outstanding async copy");
  }
  Shadow& s = shadow_[key(space, workgroup, word_addr)];
  if (s.has_write && !(s.write.site.atomic && site.atomic) && !ordered(s.write, agent))
    report(space, word_addr, s.write.site, site, {});
  const std::uint64_t now = agents_[agent].clock.get(agent);
  if (site.write) {
    for (const auto& r : s.reads)
      if (!(r.site.atomic && site.atomic) && !ordered(r, agent)) report(space, word_addr, r.site, site, {});
    s.reads.clear();
    s.has_write = true;
    s.write = {agent, now, site};
  } else {
    auto it = std::find_if(s.reads.begin(), s.reads.end(), [&](const Stamp& r) { return r.agent == agent; });
    if (it != s.reads.end()) *it = {agent, now, site};
    else s.reads.push_back({agent, now, site});
  }
}

void RaceDetector::atomic_sync(MemSpace space, std::uint32_t workgroup, std::uint32_t word_addr,
                               std::uint32_t agent) {
  Shadow& s = shadow_[key(space, workgroup, word_addr)];
  Agent& a = agents_[agent];
  for (const auto& src : s.sync)
    if (src.agent != agent) a.observed.push_back(src);
  if (a.has_release) {
    auto it = std::find_if(s.sync.begin(), s.sync.end(), [&](const auto& src) { return src.agent == agent; });
    Agent::Source src{agent, a.workgroup, a.release_scope, a.released};
    if (it != s.sync.end()) *it = std::move(src);
    else s.sync.push_back(std::move(src));
  }
}

void RaceDetector::fence(std::uint32_t agent, MemOrder order, Scope scope) {
  Agent& a = agents_[agent];
  if (order == MemOrder::acquire || order == MemOrder::acqrel) {
    for (const auto& src : a.observed)
      if (covers(src.scope, src.agent, src.workgroup, agent, a.workgroup) &&
          covers(scope, src.agent, src.workgroup, agent, a.workgroup))
        a.clock.join(src.clock);
    a.observed.clear();
  }
  if (order == MemOrder::release || order == MemOrder::acqrel) {
    a.released = a.clock;
    a.has_release = true;
    a.release_scope = scope;
    a.clock.set(agent, a.clock.get(agent) + 1);
  }
}

void RaceDetector::barrier(const std::vector<std::uint32_t>& agents) {
  VectorClock joined;
  for (auto id : agents) joined.join(agents_[id].clock);
  for (auto id : agents) {
    agents_[id].clock = joined;
    agents_[id].clock.set(id, joined.get(id) + 1);
  }
}

void RaceDetector::async_issue(std::uint32_t workgroup, std::uint32_t agent, std::uint32_t lo, std::uint32_t hi,
                               const AccessSite& site) {
  pending_[workgroup].push_back({agent, lo, hi, site});
}

void RaceDetector::async_complete(std::uint32_t workgroup, std::uint32_t agent, std::uint32_t lo,
                                  std::uint32_t hi) {
  auto& list = pending_[workgroup];
  auto it = std::find_if(list.begin(), list.end(),
                         [&](const Pending& p) { return p.agent == agent && p.lo == lo && p.hi == hi; });
  if (it != list.end()) list.erase(it);
}

void RaceDetector::retire_workgroup(std::uint32_t workgroup) {
  pending_.erase(workgroup);
  const std::uint64_t wg = workgroup & 0x3fffffffu;
  std::erase_if(shadow_, [&](const auto& kv) {
    return (kv.first >> 62) == static_cast<std::uint8_t>(MemSpace::scratch) && ((kv.first >> 32) & 0x3fffffffu) == wg;
  });
}

}  // namespace uvgpu::detail
