#include "clipmap/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#ifdef CLIPMAP_HAVE_OPENMP
#include <omp.h>
#endif
#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace clipmap::kernels {

namespace {

int g_threads = 1;

// 64-byte SIMD lane group; GCC/Clang lower it to whatever the target has.
using Vec = Real __attribute__((vector_size(64)));
constexpr std::size_t kLanes = sizeof(Vec) / sizeof(Real);
constexpr std::size_t kNr = 2 * kLanes;  // columns per micro-tile
constexpr std::size_t kMr = 6;           // rows per micro-tile

inline Vec load(const Real* p) {
  Vec v;
  std::memcpy(&v, p, sizeof(Vec));
  return v;
}

inline void store(Real* p, Vec v) { std::memcpy(p, &v, sizeof(Vec)); }

template <std::size_t Rows>
inline void micro_tile(const Real* a, std::size_t lda, const Real* b, std::size_t ldb, Real* c, std::size_t ldc,
                       std::size_t k) {
  Vec acc0[Rows] = {};
  Vec acc1[Rows] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const Vec b0 = load(b + p * ldb);
    const Vec b1 = load(b + p * ldb + kLanes);
    for (std::size_t r = 0; r < Rows; ++r) {
      const Real av = a[r * lda + p];
      acc0[r] += av * b0;
      acc1[r] += av * b1;
    }
  }
  for (std::size_t r = 0; r < Rows; ++r) {
    store(c + r * ldc, load(c + r * ldc) + acc0[r]);
    store(c + r * ldc + kLanes, load(c + r * ldc + kLanes) + acc1[r]);
  }
}

// c[rows×n] += a[rows×k] · b[k×n] for one horizontal strip of C.
void gemm_strip(std::size_t rows, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c) {
  std::size_t j = 0;
  for (; j + kNr <= n; j += kNr) {
    std::size_t i = 0;
    for (; i + kMr <= rows; i += kMr) micro_tile<kMr>(a + i * k, k, b + j, n, c + i * n + j, n, k);
    for (; i < rows; ++i) micro_tile<1>(a + i * k, k, b + j, n, c + i * n + j, n, k);
  }
  if (j == n) return;
  for (std::size_t i = 0; i < rows; ++i) {
    Real* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[i * k + p];
      const Real* brow = b + p * n;
      for (std::size_t jj = j; jj < n; ++jj) crow[jj] += av * brow[jj];
    }
  }
}

std::vector<Real> transpose_copy(const Real* src, std::size_t rows, std::size_t cols) {
  std::vector<Real> dst(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
  return dst;
}

}  // namespace

void set_num_threads(int n) { g_threads = std::max(1, n); }
int num_threads() { return g_threads; }

void keep_freed_buffers() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c,
          bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, Real(0));
  if (m == 0 || n == 0 || k == 0) return;
  std::vector<Real> at, bt;
  if (ta == Trans::Yes) {
    at = transpose_copy(a, k, m);
    a = at.data();
  }
  if (tb == Trans::Yes) {
    bt = transpose_copy(b, n, k);
    b = bt.data();
  }
  constexpr std::size_t kStrip = 8 * kMr;
  const std::size_t strips = (m + kStrip - 1) / kStrip;
  const int threads = g_threads;
#ifdef CLIPMAP_HAVE_OPENMP
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1 && strips > 1)
#endif
  for (std::size_t s = 0; s < strips; ++s) {
    const std::size_t r0 = s * kStrip;
    const std::size_t rows = std::min(kStrip, m - r0);
    gemm_strip(rows, n, k, a + r0 * k, b, c + r0 * n);
  }
  (void)threads;
}

void attention_forward(const Real* q, const Real* k, const Real* v, Real* out, Real* probs, std::size_t batch,
                       std::size_t seq, std::size_t width, std::size_t heads, bool causal) {
  const std::size_t hd = width / heads;
  const Real scale = Real(1) / std::sqrt(Real(hd));
  const std::size_t pairs = batch * heads;
  const int threads = g_threads;
#ifdef CLIPMAP_HAVE_OPENMP
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1)
#endif
  for (std::size_t bh = 0; bh < pairs; ++bh) {
    const std::size_t b = bh / heads, h = bh % heads;
    const std::size_t base = b * seq * width + h * hd;
    Real* p = probs + bh * seq * seq;
    for (std::size_t i = 0; i < seq; ++i) {
      const Real* qi = q + base + i * width;
      const std::size_t visible = causal ? i + 1 : seq;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < visible; ++j) {
        const Real* kj = k + base + j * width;
        Real s = 0;
        for (std::size_t d = 0; d < hd; ++d) s += qi[d] * kj[d];
        s *= scale;
        p[i * seq + j] = s;
        mx = std::max(mx, s);
      }
      Real z = 0;
      for (std::size_t j = 0; j < visible; ++j) {
        const Real e = std::exp(p[i * seq + j] - mx);
        p[i * seq + j] = e;
        z += e;
      }
      for (std::size_t j = 0; j < visible; ++j) p[i * seq + j] /= z;
      for (std::size_t j = visible; j < seq; ++j) p[i * seq + j] = 0;
      Real* oi = out + base + i * width;
      for (std::size_t d = 0; d < hd; ++d) oi[d] = 0;
      for (std::size_t j = 0; j < visible; ++j) {
        const Real pij = p[i * seq + j];
        const Real* vj = v + base + j * width;
        for (std::size_t d = 0; d < hd; ++d) oi[d] += pij * vj[d];
      }
    }
  }
  (void)threads;
}

void attention_backward(const Real* q, const Real* k, const Real* v, const Real* probs, const Real* dout, Real* dq,
                        Real* dk, Real* dv, std::size_t batch, std::size_t seq, std::size_t width,
                        std::size_t heads) {
  const std::size_t hd = width / heads;
  const Real scale = Real(1) / std::sqrt(Real(hd));
  const std::size_t pairs = batch * heads;
  const int threads = g_threads;
#ifdef CLIPMAP_HAVE_OPENMP
#pragma omp parallel for schedule(static) num_threads(threads) if (threads > 1)
#endif
  for (std::size_t bh = 0; bh < pairs; ++bh) {
    const std::size_t b = bh / heads, h = bh % heads;
    const std::size_t base = b * seq * width + h * hd;
    const Real* p = probs + bh * seq * seq;
    std::vector<Real> ds(seq * seq);
    for (std::size_t i = 0; i < seq; ++i) {
      const Real* doi = dout + base + i * width;
      Real dot = 0;
      for (std::size_t j = 0; j < seq; ++j) {
        const Real pij = p[i * seq + j];
        if (pij == 0) {
          ds[i * seq + j] = 0;
          continue;
        }
        const Real* vj = v + base + j * width;
        Real dp = 0;
        for (std::size_t d = 0; d < hd; ++d) dp += doi[d] * vj[d];
        ds[i * seq + j] = dp;
        dot += pij * dp;
      }
      for (std::size_t j = 0; j < seq; ++j) ds[i * seq + j] = p[i * seq + j] * (ds[i * seq + j] - dot) * scale;
    }
    for (std::size_t i = 0; i < seq; ++i) {
      if (dq) {
        Real* dqi = dq + base + i * width;
        for (std::size_t j = 0; j < seq; ++j) {
          const Real s = ds[i * seq + j];
          if (s == 0) continue;
          const Real* kj = k + base + j * width;
          for (std::size_t d = 0; d < hd; ++d) dqi[d] += s * kj[d];
        }
      }
      if (dk || dv) {
        const Real* qi = q + base + i * width;
        const Real* doi = dout + base + i * width;
        for (std::size_t j = 0; j < seq; ++j) {
          if (dk) {
            const Real s = ds[i * seq + j];
            Real* dkj = dk + base + j * width;
            if (s != 0)
              for (std::size_t d = 0; d < hd; ++d) dkj[d] += s * qi[d];
          }
          if (dv) {
            const Real pij = p[i * seq + j];
            Real* dvj = dv + base + j * width;
            if (pij != 0)
              for (std::size_t d = 0; d < hd; ++d) dvj[d] += pij * doi[d];
          }
        }
      }
    }
  }
  (void)threads;
}

namespace reference {

void gemm(std::size_t m, std::size_t n, std::size_t k, const Real* a, const Real* b, Real* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
}

void attention_forward(const Real* q, const Real* k, const Real* v, Real* out, std::size_t batch, std::size_t seq,
                       std::size_t width, std::size_t heads, bool causal) {
  const std::size_t hd = width / heads;
  const Real scale = Real(1) / std::sqrt(Real(hd));
  std::vector<Real> row(seq);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < seq; ++i) {
        const std::size_t visible = causal ? i + 1 : seq;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t j = 0; j < visible; ++j) {
          Real s = 0;
          for (std::size_t d = 0; d < hd; ++d)
            s += q[(b * seq + i) * width + h * hd + d] * k[(b * seq + j) * width + h * hd + d];
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        Real z = 0;
        for (std::size_t j = 0; j < visible; ++j) z += (row[j] = std::exp(row[j] - mx));
        for (std::size_t d = 0; d < hd; ++d) {
          Real acc = 0;
          for (std::size_t j = 0; j < visible; ++j) acc += row[j] / z * v[(b * seq + j) * width + h * hd + d];
          out[(b * seq + i) * width + h * hd + d] = acc;
        }
      }
}

}  // namespace reference

}  // namespace clipmap::kernels
