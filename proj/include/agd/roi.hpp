#pragma once

#include <cstddef>
#include <utility>
#include <variant>
#include <vector>

namespace agd {

/// Half-open token-position range [begin, end).
struct PositionRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool operator==(const PositionRange&) const = default;
};

struct HeadRef {
  std::size_t layer = 0;
  std::size_t head = 0;
  auto operator<=>(const HeadRef&) const = default;
};

/// Region of interest over which candidate attributions are summed.
struct RoiSpec {
  struct InputSpan {
    std::vector<PositionRange> ranges;
  };
  struct HeadSet {
    std::vector<HeadRef> heads;
  };
  struct AllInputs {};

  std::variant<InputSpan, HeadSet, AllInputs> region = AllInputs{};

  static RoiSpec input_span(std::vector<PositionRange> ranges) { return {InputSpan{std::move(ranges)}}; }
  static RoiSpec head_set(std::vector<HeadRef> heads) { return {HeadSet{std::move(heads)}}; }
  static RoiSpec all_inputs() { return {AllInputs{}}; }
};

}  // namespace agd
