#pragma once

namespace tsrm {

// Training allocates and frees many short-lived multi-megabyte buffers. With
// glibc's default thresholds each of them becomes an mmap/munmap pair, which
// costs more than the arithmetic; raising the thresholds keeps them on the
// heap. No-op elsewhere.
void tune_allocator();

}  // namespace tsrm
