#pragma once

// Keeps large activation buffers on the heap between steps instead of
// returning them to the kernel; every training step reallocates them.

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace ctnas {

inline void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 * 1024 * 1024);
#endif
}

}  // namespace ctnas
