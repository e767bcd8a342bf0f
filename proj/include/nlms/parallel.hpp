#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

namespace nlms {

// Every OpenMP kernel takes an Exec so the serial path stays available as a
// reference for tests and benchmarks.
enum class Exec { Serial, Parallel };

void set_thread_count(int n);
int thread_count();

template <class F>
void for_each_index(Exec ex, std::ptrdiff_t n, F&& f) {
  if (ex == Exec::Parallel) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) f(i);
  } else {
    for (std::ptrdiff_t i = 0; i < n; ++i) f(i);
  }
}

// Sum over fixed-size blocks combined in block order: the result does not
// depend on the thread count, so parallel and serial runs agree bitwise.
template <class T, class F>
T blocked_sum(Exec ex, std::ptrdiff_t n, T zero, F&& f) {
  constexpr std::ptrdiff_t block = 2048;
  const std::ptrdiff_t nb = (n + block - 1) / block;
  std::vector<T> partial(static_cast<std::size_t>(nb), zero);
  for_each_index(ex, nb, [&](std::ptrdiff_t b) {
    T acc = zero;
    const std::ptrdiff_t end = std::min(n, (b + 1) * block);
    for (std::ptrdiff_t i = b * block; i < end; ++i) acc += f(i);
    partial[static_cast<std::size_t>(b)] = acc;
  });
  T total = zero;
  for (const T& p : partial) total += p;
  return total;
}

}  // namespace nlms
