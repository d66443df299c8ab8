#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace dnet {

/// Per-pixel class ids, row-major.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), values(h * w, fill) {}

  std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }

  /// Number of distinct class ids present.
  std::size_t distinct_classes() const {
    bool seen[256] = {};
    std::size_t n = 0;
    for (auto v : values)
      if (!seen[v]) {
        seen[v] = true;
        ++n;
      }
    return n;
  }

  bool operator==(const LabelMap&) const = default;
};

}  // namespace dnet
