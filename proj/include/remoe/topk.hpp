#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace remoe {

/// Expert ids are 0-based everywhere in this library.
using ExpertId = std::int32_t;
using ExpertList = std::vector<ExpertId>;

/// Indices of the k largest entries, ordered by descending value.
///
/// Ties are broken by the lower index. This rule is used for every Top-K
/// decision in the project (trace validation, routing, rerouting), so that
/// traces and tests are reproducible bit for bit.
template <typename Scalar>
ExpertList topk(std::span<const Scalar> values, int k) {
  if (k < 0 || static_cast<std::size_t>(k) > values.size()) {
    throw std::invalid_argument("topk: k must be in [0, n]");
  }
  ExpertList idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto before = [&](ExpertId a, ExpertId b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), before);
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

template <typename Scalar>
ExpertList topk(const std::vector<Scalar>& values, int k) {
  return topk(std::span<const Scalar>(values), k);
}

/// True when both lists hold the same experts, ignoring order.
inline bool same_expert_set(std::span<const ExpertId> a, std::span<const ExpertId> b) {
  if (a.size() != b.size()) return false;
  ExpertList sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  return sa == sb;
}

}  // namespace remoe
