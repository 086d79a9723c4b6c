#include <algorithm>
#include <cstring>

#include "uvgpu/numeric.hpp"
#include "uvgpu/vm.hpp"

namespace uvgpu {

DeviceMemory::DeviceMemory(std::uint64_t bytes)
    : size_(bytes), pages_((bytes + kPageBytes - 1) / kPageBytes) {}

std::uint8_t* DeviceMemory::page_for_write(std::uint64_t addr) {
  auto& page = pages_[addr / kPageBytes];
  if (page.empty()) page.assign(kPageBytes, 0);
  return page.data();
}

std::uint32_t DeviceMemory::load(std::uint32_t addr, unsigned bytes) const {
  const auto& page = pages_[addr / kPageBytes];
  if (page.empty()) return 0;
  const std::uint8_t* p = page.data() + addr % kPageBytes;
  std::uint32_t v = 0;
  for (unsigned i = 0; i < bytes; ++i) v |= std::uint32_t{p[i]} << (8 * i);
  return v;
}

void DeviceMemory::store(std::uint32_t addr, std::uint32_t value, unsigned bytes) {
  std::uint8_t* p = page_for_write(addr) + addr % kPageBytes;
  for (unsigned i = 0; i < bytes; ++i) p[i] = static_cast<std::uint8_t>(value >> (8 * i));
  high_water_ = std::max<std::uint64_t>(high_water_, std::uint64_t{addr} + bytes);
}

void DeviceMemory::write(std::uint64_t addr, std::span<const std::uint8_t> data) {
  std::uint64_t done = 0;
  while (done < data.size()) {
    const std::uint64_t a = addr + done;
    const std::uint64_t chunk = std::min<std::uint64_t>(data.size() - done, kPageBytes - a % kPageBytes);
    std::memcpy(page_for_write(a) + a % kPageBytes, data.data() + done, chunk);
    done += chunk;
  }
  if (!data.empty()) high_water_ = std::max(high_water_, addr + data.size());
}

std::vector<std::uint8_t> DeviceMemory::read(std::uint64_t addr, std::uint64_t n) const {
  std::vector<std::uint8_t> out(n, 0);
  std::uint64_t done = 0;
  while (done < n) {
    const std::uint64_t a = addr + done;
    const std::uint64_t chunk = std::min<std::uint64_t>(n - done, kPageBytes - a % kPageBytes);
    const auto& page = pages_[a / kPageBytes];
    if (!page.empty()) std::memcpy(out.data() + done, page.data() + a % kPageBytes, chunk);
    done += chunk;
  }
  return out;
}

void DeviceMemory::write_words(std::uint64_t addr, std::span<const std::uint32_t> words) {
  std::vector<std::uint8_t> bytes(words.size() * 4);
  for (std::size_t i = 0; i < words.size(); ++i)
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>(words[i] >> (8 * b));
  write(addr, bytes);
}

std::vector<std::uint32_t> DeviceMemory::read_words(std::uint64_t addr, std::uint64_t count) const {
  const auto bytes = read(addr, count * 4);
  std::vector<std::uint32_t> out(count);
  for (std::size_t i = 0; i < count; ++i)
    for (int b = 0; b < 4; ++b) out[i] |= std::uint32_t{bytes[i * 4 + b]} << (8 * b);
  return out;
}

std::uint64_t DeviceMemory::digest() const {
  // Hash (page index, page bytes) for pages holding any nonzero byte, so the
  // digest depends only on content.
  Fnv1a h;
  h.add(&size_, sizeof size_);
  for (std::size_t i = 0; i < pages_.size(); ++i) {
    const auto& page = pages_[i];
    if (page.empty() || std::all_of(page.begin(), page.end(), [](std::uint8_t b) { return b == 0; })) continue;
    const std::uint64_t index = i;
    h.add(&index, sizeof index);
    h.add(page.data(), page.size());
  }
  return h.value();
}

bool DeviceMemory::operator==(const DeviceMemory& other) const {
  if (size_ != other.size_) return false;
  auto zero = [](const std::vector<std::uint8_t>& p) {
    return p.empty() || std::all_of(p.begin(), p.end(), [](std::uint8_t b) { return b == 0; });
  };
  for (std::size_t i = 0; i < pages_.size(); ++i) {
    const auto& a = pages_[i];
    const auto& b = other.pages_[i];
    if (a.empty() || b.empty()) {
      if (!zero(a) || !zero(b)) return false;
    } else if (a != b) {
      return false;
    }
  }
  return true;
}

}  // namespace uvgpu
