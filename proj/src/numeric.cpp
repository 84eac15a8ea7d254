#include "rsm/types.hpp"

namespace rsm {

namespace {

template <class T>
T cascade(std::span<const T> v, T zero) {
  if (v.empty()) return zero;
  if (v.size() <= 8) {
    T acc = v[0];
    for (std::size_t k = 1; k < v.size(); ++k) acc = acc + v[k];
    return acc;
  }
  const std::size_t half = v.size() / 2;
  return cascade(v.subspan(0, half), zero) + cascade(v.subspan(half), zero);
}

}  // namespace

double pairwise_sum(std::span<const double> values) { return cascade(values, 0.0); }

Vec2 pairwise_sum(std::span<const Vec2> values) {
  return cascade<Vec2>(values, Vec2::Zero());
}

}  // namespace rsm
