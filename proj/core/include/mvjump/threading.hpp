#pragma once

#include <cstddef>
#include <functional>

namespace mvj {

// Global worker count used by all parallel loops. 0 means "hardware".
void set_thread_count(unsigned n);
unsigned thread_count();

// Deterministic chunked parallel loop. The index range [0, n) is cut into
// fixed-size chunks (independent of the worker count); workers grab chunks
// dynamically; the caller merges per-chunk results in chunk order. Numeric
// output therefore never depends on the number of threads — the contract the
// reproducibility tests assert.
//
// body(chunk_index, begin, end) runs on some worker thread; chunk state must
// be owned by the chunk (index into a preallocated per-chunk slot).
void parallel_chunks(std::size_t n, std::size_t chunk_size,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& body);

std::size_t n_chunks(std::size_t n, std::size_t chunk_size);

} // namespace mvj
