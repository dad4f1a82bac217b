#pragma once

// Straight-line reimplementation of the encoder forward pass using plain
// loops, sharing no code with the library's kernels or tape.

#include <cmath>
#include <vector>

#include "clipmap/model.hpp"

namespace oracle {

using clipmap::Real;
using Mat = std::vector<std::vector<double>>;

inline Mat from(const clipmap::Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

inline std::vector<double> vec(const clipmap::Tensor& t) { return {t.data().begin(), t.data().end()}; }

// y = W x + b for W [out × in].
inline std::vector<double> affine(const std::vector<double>& x, const clipmap::Tensor& w, const clipmap::Tensor& b) {
  std::vector<double> y(w.rows(), 0.0);
  for (std::size_t o = 0; o < w.rows(); ++o) {
    double s = b.numel() ? double(b[o]) : 0.0;
    for (std::size_t i = 0; i < w.cols(); ++i) s += double(w.at(o, i)) * x[i];
    y[o] = s;
  }
  return y;
}

inline std::vector<double> layer_norm(const std::vector<double>& x, const clipmap::Tensor& g,
                                      const clipmap::Tensor& b) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= double(x.size());
  for (double v : x) var += (v - mu) * (v - mu);
  var /= double(x.size());
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
  return y;
}

inline double gelu(double v) {
  return 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
}

inline Mat block(const Mat& x, const clipmap::BlockParams<clipmap::Tensor>& p, std::size_t heads, bool causal) {
  const std::size_t n = x.size(), d = x[0].size(), hd = d / heads;
  Mat q(n), k(n), v(n);
  for (std::size_t t = 0; t < n; ++t) {
    auto h = layer_norm(x[t], p.ln1_g, p.ln1_b);
    q[t] = affine(h, p.wq, p.bq);
    k[t] = affine(h, p.wk, p.bk);
    v[t] = affine(h, p.wv, p.bv);
  }
  Mat out = x;
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> att(d, 0.0);
    for (std::size_t hh = 0; hh < heads; ++hh) {
      const std::size_t lim = causal ? t + 1 : n;
      std::vector<double> s(lim);
      double mx = -1e300;
      for (std::size_t u = 0; u < lim; ++u) {
        double dot = 0;
        for (std::size_t j = 0; j < hd; ++j) dot += q[t][hh * hd + j] * k[u][hh * hd + j];
        s[u] = dot / std::sqrt(double(hd));
        mx = std::max(mx, s[u]);
      }
      double z = 0;
      for (auto& e : s) z += (e = std::exp(e - mx));
      for (std::size_t u = 0; u < lim; ++u)
        for (std::size_t j = 0; j < hd; ++j) att[hh * hd + j] += s[u] / z * v[u][hh * hd + j];
    }
    auto o = affine(att, p.wo, p.bo);
    for (std::size_t j = 0; j < d; ++j) out[t][j] += o[j];
  }
  for (std::size_t t = 0; t < n; ++t) {
    auto h = affine(layer_norm(out[t], p.ln2_g, p.ln2_b), p.fc1_w, p.fc1_b);
    for (double& e : h) e = gelu(e);
    auto o = affine(h, p.fc2_w, p.fc2_b);
    for (std::size_t j = 0; j < d; ++j) out[t][j] += o[j];
  }
  return out;
}

inline std::vector<double> head(const std::vector<double>& pooled, const clipmap::EncoderParams<clipmap::Tensor>& p) {
  auto y = affine(layer_norm(pooled, p.lnf_g, p.lnf_b), p.proj, clipmap::Tensor());
  double s = 0;
  for (double v : y) s += v * v;
  for (double& v : y) v /= std::sqrt(s);
  return y;
}

// One caption: embed, add positions, causal blocks, pool at the first EOS.
inline std::vector<double> encode_text(const clipmap::EncoderWeights& w, const std::vector<std::uint32_t>& ids) {
  std::size_t pool = 0;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] == clipmap::tokens::kEos) {
      pool = t;
      break;
    }
    if (ids[t] != clipmap::tokens::kPad) pool = t;
  }
  Mat x(ids.size(), std::vector<double>(w.config.width));
  for (std::size_t t = 0; t < ids.size(); ++t)
    for (std::size_t j = 0; j < w.config.width; ++j)
      x[t][j] = w.params.embed.at(ids[t], j) + w.params.pos.at(t, j);
  for (const auto& b : w.params.blocks) x = block(x, b, w.config.heads, true);
  return head(x[pool], w.params);
}

// One image [patches × patch_dim]: CLS first, positions, full attention, pool at CLS.
inline std::vector<double> encode_image(const clipmap::EncoderWeights& w, const Mat& patches) {
  const std::size_t d = w.config.width;
  Mat x(patches.size() + 1, std::vector<double>(d));
  for (std::size_t j = 0; j < d; ++j) x[0][j] = w.params.cls.at(0, j) + w.params.pos.at(0, j);
  for (std::size_t t = 0; t < patches.size(); ++t) {
    auto e = affine(patches[t], w.params.embed, clipmap::Tensor());
    for (std::size_t j = 0; j < d; ++j) x[t + 1][j] = e[j] + w.params.pos.at(t + 1, j);
  }
  for (const auto& b : w.params.blocks) x = block(x, b, w.config.heads, false);
  return head(x[0], w.params);
}

}  // namespace oracle
