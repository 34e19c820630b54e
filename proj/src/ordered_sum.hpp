#pragma once

#include <algorithm>
#include <vector>

namespace dain::detail {

/// Sums the buffer after sorting it, so the result does not depend on the
/// order the terms were produced in. Reorders buf.
template <class T>
T order_independent_sum(std::vector<T>& buf) {
  std::sort(buf.begin(), buf.end());
  T acc = 0;
  for (T v : buf) acc += v;
  return acc;
}

}  // namespace dain::detail
