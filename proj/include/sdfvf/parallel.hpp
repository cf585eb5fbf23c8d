#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace sdfvf {

/// 0 means "use every hardware thread".
inline unsigned resolve_workers(unsigned requested) {
  if (requested != 0) return requested;
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs body(begin, end) over static contiguous chunks of [0, count).
/// Chunk boundaries depend only on (count, workers), so any body that writes
/// disjoint outputs per index produces identical results for every worker count.
template <class Body>
void parallel_for(std::size_t count, unsigned workers, Body&& body) {
  workers = std::max(1u, workers);
  if (workers == 1 || count < 2) {
    body(std::size_t{0}, count);
    return;
  }
  const std::size_t chunks = std::min<std::size_t>(workers, count);
  std::vector<std::jthread> pool;
  pool.reserve(chunks - 1);
  const std::size_t base = count / chunks;
  const std::size_t extra = count % chunks;
  std::size_t begin = 0;
  std::size_t first_end = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t end = begin + base + (c < extra ? 1 : 0);
    if (c == 0) {
      first_end = end;
    } else {
      pool.emplace_back([&body, begin, end] { body(begin, end); });
    }
    begin = end;
  }
  body(std::size_t{0}, first_end);
}

}  // namespace sdfvf
