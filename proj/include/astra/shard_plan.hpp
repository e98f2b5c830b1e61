#pragma once

#include <cstddef>
#include <vector>

namespace astra {

struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool contains(std::size_t t) const { return t >= begin && t < end; }
  friend bool operator==(const TokenRange&, const TokenRange&) = default;
};

// Contiguous token-to-device assignment.
struct ShardPlan {
  std::size_t total_tokens = 0;
  std::vector<TokenRange> ranges;
  bool replicate_class_token = true;

  std::size_t devices() const { return ranges.size(); }
  std::size_t device_of(std::size_t token) const;
  // Throws PlanError unless ranges are ordered, disjoint and cover [0, T).
  void validate() const;
};

// Near-even contiguous split; when N does not divide T the trailing devices
// take one extra token each, so T=5, N=2 gives sizes {2, 3}.
ShardPlan partition_tokens(std::size_t tokens, std::size_t devices);

}  // namespace astra
