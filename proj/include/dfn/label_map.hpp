#ifndef DFN_LABEL_MAP_HPP_
#define DFN_LABEL_MAP_HPP_

#include <cstdint>
#include <vector>

#include "dfn/errors.hpp"

namespace dfn {

// Per-pixel integer class assignment, row-major.
struct LabelMap {
  int height = 0;
  int width = 0;
  int num_classes = 0;
  std::vector<std::uint8_t> values;

  LabelMap() = default;
  LabelMap(int h, int w, int k, std::uint8_t fill = 0)
      : height(h), width(w), num_classes(k),
        values(std::size_t(h) * std::size_t(w), fill) {}

  std::uint8_t& at(int y, int x) { return values[std::size_t(y) * width + x]; }
  std::uint8_t at(int y, int x) const {
    return values[std::size_t(y) * width + x];
  }

  bool operator==(const LabelMap& o) const = default;
};

// Binary semantic-boundary mask (ground truth), row-major {0,1}.
struct BoundaryMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> mask;

  BoundaryMap() = default;
  BoundaryMap(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), mask(std::size_t(h) * std::size_t(w), fill) {}

  std::uint8_t& at(int y, int x) { return mask[std::size_t(y) * width + x]; }
  std::uint8_t at(int y, int x) const {
    return mask[std::size_t(y) * width + x];
  }

  std::int64_t count_set() const {
    std::int64_t n = 0;
    for (auto v : mask) n += (v != 0);
    return n;
  }

  bool operator==(const BoundaryMap& o) const = default;
};

// Batched variants used by the loss functions; values laid out [N, H, W].
struct LabelBatch {
  int n = 0, h = 0, w = 0;
  std::vector<std::uint8_t> values;

  LabelBatch() = default;
  explicit LabelBatch(const LabelMap& m) : n(1), h(m.height), w(m.width), values(m.values) {}
  explicit LabelBatch(const std::vector<LabelMap>& maps) {
    if (maps.empty()) return;
    n = int(maps.size());
    h = maps[0].height;
    w = maps[0].width;
    values.reserve(std::size_t(n) * h * w);
    for (const auto& m : maps) {
      if (m.height != h || m.width != w)
        throw DimensionError("label batch members disagree on size");
      values.insert(values.end(), m.values.begin(), m.values.end());
    }
  }
};

struct BoundaryBatch {
  int n = 0, h = 0, w = 0;
  std::vector<std::uint8_t> mask;

  BoundaryBatch() = default;
  explicit BoundaryBatch(const BoundaryMap& m) : n(1), h(m.height), w(m.width), mask(m.mask) {}
  explicit BoundaryBatch(const std::vector<BoundaryMap>& maps) {
    if (maps.empty()) return;
    n = int(maps.size());
    h = maps[0].height;
    w = maps[0].width;
    mask.reserve(std::size_t(n) * h * w);
    for (const auto& m : maps) {
      if (m.height != h || m.width != w)
        throw DimensionError("boundary batch members disagree on size");
      mask.insert(mask.end(), m.mask.begin(), m.mask.end());
    }
  }
};

}  // namespace dfn

#endif  // DFN_LABEL_MAP_HPP_
