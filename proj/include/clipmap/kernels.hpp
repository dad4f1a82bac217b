#pragma once

// Compute kernels behind the autodiff ops. Every kernel here has a plain
// serial counterpart in `kernels::reference` that the tests and the benchmark
// compare against.
//
// Threading: kernels run on the calling thread unless set_num_threads(n > 1).
// Work is split over independent output rows (or batch/head pairs), so each
// output element is produced by a single thread in a fixed order. Bitwise
// determinism is only guaranteed in the default single-thread mode.

#include <cstddef>

#include "clipmap/tensor.hpp"

namespace clipmap::kernels {

void set_num_threads(int n);
int num_threads();

// Keeps freed activation buffers in the heap instead of handing them back to
// the OS, so every training step does not re-fault its working set. No-op
// outside glibc.
void keep_freed_buffers();

enum class Trans { No, Yes };

// C[M×N] (+)= op(A)[M×K] · op(B)[K×N]. With Trans::Yes the operand is stored
// transposed (A as K×M, B as N×K). Row-major, contiguous.
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
          bool accumulate);

// Fused multi-head attention over `batch` sequences of `seq` tokens.
// q, k, v, out: [batch·seq × width]; probs: [batch·heads·seq × seq] (saved for
// backward). Causal masking hides keys after the query position.
void attention_forward(const Real* q, const Real* k, const Real* v, Real* out, Real* probs, std::size_t batch,
                       std::size_t seq, std::size_t width, std::size_t heads, bool causal);

// Accumulates into dq/dk/dv (any may be null).
void attention_backward(const Real* q, const Real* k, const Real* v, const Real* probs, const Real* dout, Real* dq,
                        Real* dk, Real* dv, std::size_t batch, std::size_t seq, std::size_t width,
                        std::size_t heads);

namespace reference {

// c = a[M×K] · b[K×N], triple loop.
void gemm(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c);

void attention_forward(const Real* q, const Real* k, const Real* v, Real* out, std::size_t batch, std::size_t seq,
                       std::size_t width, std::size_t heads, bool causal);

}  // namespace reference

}  // namespace clipmap::kernels
