#pragma once

// Plain-loop reimplementation of the decoder forward pass on row-major
// buffers. Shares no code with the tape ops; used as an independent oracle.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "uxw/transformer.hpp"

namespace uxw::testing::dense {

struct Mat {
  std::size_t r = 0, c = 0;
  std::vector<double> v;

  double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

inline Mat of(const ad::Parameter& p) {
  const auto& s = p.shape();
  Mat m;
  m.r = s.size() == 2 ? s[0] : 1;
  m.c = s.size() == 2 ? s[1] : s[0];
  m.v.assign(p.value().begin(), p.value().end());
  return m;
}

inline Mat mm(const Mat& a, const Mat& b) {
  Mat o{a.r, b.c, std::vector<double>(a.r * b.c, 0.0)};
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t k = 0; k < a.c; ++k)
      for (std::size_t j = 0; j < b.c; ++j) o(i, j) += a(i, k) * b(k, j);
  return o;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

inline Mat rmsnorm(const Mat& x, const Mat& w) {
  Mat o = x;
  for (std::size_t i = 0; i < x.r; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < x.c; ++j) ms += x(i, j) * x(i, j);
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(x.c) + 1e-6);
    for (std::size_t j = 0; j < x.c; ++j) o(i, j) = x(i, j) * inv * w.v[j];
  }
  return o;
}

// Rotate-half rotary encoding: pair (i, i + hd/2) of each head at position p
// is rotated by p · base^(-2i/hd).
inline Mat rope(const Mat& x, int heads, double base) {
  Mat o = x;
  const std::size_t hd = x.c / static_cast<std::size_t>(heads), half = hd / 2;
  for (std::size_t p = 0; p < x.r; ++p) {
    for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
      for (std::size_t i = 0; i < half; ++i) {
        const double theta = static_cast<double>(p) /
                             std::pow(base, static_cast<double>(2 * i) / static_cast<double>(hd));
        const double a = x(p, h * hd + i), b = x(p, h * hd + i + half);
        o(p, h * hd + i) = a * std::cos(theta) - b * std::sin(theta);
        o(p, h * hd + i + half) = a * std::sin(theta) + b * std::cos(theta);
      }
    }
  }
  return o;
}

// probs[h][i][j]
using Probs = std::vector<std::vector<std::vector<double>>>;

inline Mat attend(const Mat& q, const Mat& k, const Mat& v, std::span<const std::uint8_t> allowed,
                  int heads, Probs* probs = nullptr) {
  const std::size_t T = q.r, hd = q.c / static_cast<std::size_t>(heads);
  Mat o{T, q.c, std::vector<double>(T * q.c, 0.0)};
  if (probs) probs->assign(static_cast<std::size_t>(heads), std::vector<std::vector<double>>(T, std::vector<double>(T, 0.0)));
  for (std::size_t h = 0; h < static_cast<std::size_t>(heads); ++h) {
    for (std::size_t i = 0; i < T; ++i) {
      std::vector<double> s(T, -INFINITY);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < T; ++j) {
        if (!allowed[i * T + j]) continue;
        double dot = 0.0;
        for (std::size_t e = 0; e < hd; ++e) dot += q(i, h * hd + e) * k(j, h * hd + e);
        s[j] = dot / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        s[j] = allowed[i * T + j] ? std::exp(s[j] - mx) : 0.0;
        z += s[j];
      }
      for (std::size_t j = 0; j < T; ++j) {
        const double p = s[j] / z;
        if (probs) (*probs)[h][i][j] = p;
        for (std::size_t e = 0; e < hd; ++e) o(i, h * hd + e) += p * v(j, h * hd + e);
      }
    }
  }
  return o;
}

inline Mat attention_block(const Mat& x, const core::AttentionWeights& w, std::span<const std::uint8_t> allowed,
                           const core::ModelConfig& cfg) {
  const Mat n = rmsnorm(x, of(w.norm));
  const Mat q = rope(mm(n, of(w.q)), cfg.n_heads, cfg.rope_base);
  const Mat k = rope(mm(n, of(w.k)), cfg.n_heads, cfg.rope_base);
  return mm(attend(q, k, mm(n, of(w.v)), allowed, cfg.n_heads), of(w.o));
}

inline Mat ffn_block(const Mat& x, const core::FfnWeights& w) {
  const Mat n = rmsnorm(x, of(w.norm));
  Mat g = mm(n, of(w.gate));
  const Mat u = mm(n, of(w.up));
  for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] = g.v[i] / (1.0 + std::exp(-g.v[i])) * u.v[i];
  return mm(g, of(w.down));
}

inline Mat layer(const Mat& h, const core::LayerWeights& w, std::span<const std::uint8_t> allowed,
                 const core::ModelConfig& cfg) {
  const Mat a = add(h, attention_block(h, w.attn, allowed, cfg));
  return add(a, ffn_block(a, w.ffn));
}

inline std::vector<std::uint8_t> causal(std::size_t T) {
  std::vector<std::uint8_t> m(T * T, 0);
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = 0; j <= i; ++j) m[i * T + j] = 1;
  return m;
}

inline Mat embed(std::span<const int> tokens, const core::EmbeddingWeights& e) {
  const Mat table = of(e.embed);
  Mat o{tokens.size(), table.c, {}};
  for (int t : tokens) {
    for (std::size_t j = 0; j < table.c; ++j) o.v.push_back(table(static_cast<std::size_t>(t), j));
  }
  return o;
}

inline Mat head(const Mat& h, const core::EmbeddingWeights& e) {
  return mm(rmsnorm(h, of(e.norm)), of(e.unembed));
}

inline Mat to_mat(const ad::Tensor& t) {
  return {t.rows(), t.cols(), std::vector<double>(t.value().begin(), t.value().end())};
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

}  // namespace uxw::testing::dense
