#include "uxw/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "uxw/errors.hpp"

namespace uxw::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

CMapMat cmap(std::span<const double> s, std::size_t r, std::size_t c) {
  return CMapMat(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MapMat map(std::span<double> s, std::size_t r, std::size_t c) {
  return MapMat(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_same_tape(const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw StateError("operands recorded on different tapes");
  }
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_str(t.shape()));
  }
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Broadcast geometry for trailing-dimension broadcasting: out has the larger
// shape; the smaller operand repeats every `period` elements.
struct Broadcast {
  Shape out;
  bool a_small = false;
  bool b_small = false;
  std::size_t period = 0;
};

Broadcast broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast bc;
  if (a.shape() == b.shape()) {
    bc.out = a.shape();
    bc.period = a.size();
  } else if (is_suffix(b.shape(), a.shape())) {
    bc.out = a.shape();
    bc.b_small = true;
    bc.period = b.size();
  } else if (is_suffix(a.shape(), b.shape())) {
    bc.out = b.shape();
    bc.a_small = true;
    bc.period = a.size();
  } else {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " do not broadcast");
  }
  return bc;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---- Parameter ---------------------------------------------------------------

Parameter::Parameter(Shape shape, std::vector<double> value)
    : shape_(std::move(shape)), value_(std::move(value)), grad_(value_.size(), 0.0) {
  if (numel(shape_) != value_.size()) {
    throw DimensionError("parameter shape " + shape_str(shape_) + " holds " +
                         std::to_string(numel(shape_)) + " values, got " +
                         std::to_string(value_.size()));
  }
}

Parameter Parameter::zeros(Shape shape) {
  const std::size_t n = numel(shape);
  return Parameter(std::move(shape), std::vector<double>(n, 0.0));
}

void Parameter::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

// ---- Tensor ------------------------------------------------------------------

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
std::size_t Tensor::size() const { return tape_->node(id_).value.size(); }
std::size_t Tensor::rows() const { return shape().empty() ? 1 : shape().front(); }
std::size_t Tensor::cols() const { return shape().empty() ? 1 : shape().back(); }
std::span<const double> Tensor::value() const { return tape_->node(id_).value; }
std::span<const double> Tensor::grad() const { return tape_->node(id_).grad; }
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
  }
  return value()[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2 || r >= rows() || c >= cols()) {
    throw IndexError("at(" + std::to_string(r) + "," + std::to_string(c) +
                     ") outside " + shape_str(shape()));
  }
  return value()[r * cols() + c];
}

// ---- Tape --------------------------------------------------------------------

Tape::Tape(GradMode mode) : mode_(mode) { nodes_.reserve(256); }

Tensor Tape::constant(Shape shape, std::vector<double> value) {
  if (numel(shape) != value.size()) {
    throw DimensionError("constant: shape " + shape_str(shape) + " vs " +
                         std::to_string(value.size()) + " values");
  }
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Tape::variable(Shape shape, std::vector<double> value) {
  Tensor t = constant(std::move(shape), std::move(value));
  nodes_.back().requires_grad = recording();
  return t;
}

Tensor Tape::bind(Parameter& param) {
  const auto v = param.value();
  Tensor t = variable(param.shape(), std::vector<double>(v.begin(), v.end()));
  if (recording()) nodes_.back().param = &param;
  return t;
}

Tensor Tape::record(Shape shape, std::vector<double> value,
                    std::vector<std::size_t> inputs, BackwardFn backward) {
  if (swept_) throw StateError("cannot record onto a tape after backward()");
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  if (recording()) {
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) {
      return nodes_[i].requires_grad;
    });
    if (n.requires_grad) {
      n.inputs = std::move(inputs);
      n.backward = std::move(backward);
    }
  }
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

std::span<double> Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::backward(const Tensor& loss) {
  if (!recording()) throw StateError("backward() on an inference tape");
  if (swept_) throw StateError("backward() already ran on this tape");
  if (&loss.tape() != this) throw StateError("loss belongs to another tape");
  if (loss.size() != 1) {
    throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  if (nodes_.empty()) throw StateError("backward() on an empty tape");
  swept_ = true;
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())[0] += 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.requires_grad) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      auto pg = n.param->grad();
      for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
    }
  }
}

// ---- operations ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  map(out, m, n).noalias() = cmap(a.value(), m, k) * cmap(b.value(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record({m, n}, std::move(out), {ia, ib},
                         [ia, ib, m, k, n](Tape& t, std::size_t self) {
                           const auto dc = cmap(t.node(self).grad, m, n);
                           if (t.node(ia).requires_grad) {
                             map(t.grad_buffer(ia), m, k).noalias() +=
                                 dc * cmap(t.node(ib).value, k, n).transpose();
                           }
                           if (t.node(ib).requires_grad) {
                             map(t.grad_buffer(ib), k, n).noalias() +=
                                 cmap(t.node(ia).value, m, k).transpose() * dc;
                           }
                         });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  map(out, m, n).noalias() = cmap(a.value(), m, k) * cmap(b.value(), n, k).transpose();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record({m, n}, std::move(out), {ia, ib},
                         [ia, ib, m, k, n](Tape& t, std::size_t self) {
                           const auto dc = cmap(t.node(self).grad, m, n);
                           if (t.node(ia).requires_grad) {
                             map(t.grad_buffer(ia), m, k).noalias() +=
                                 dc * cmap(t.node(ib).value, n, k);
                           }
                           if (t.node(ib).requires_grad) {
                             map(t.grad_buffer(ib), n, k).noalias() +=
                                 dc.transpose() * cmap(t.node(ia).value, m, k);
                           }
                         });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  const Broadcast bc = broadcast(a, b, "add");
  const auto av = a.value(), bv = b.value();
  const std::size_t n = numel(bc.out);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = av[bc.a_small ? i % bc.period : i] + bv[bc.b_small ? i % bc.period : i];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(bc.out, std::move(out), {ia, ib},
                         [ia, ib, bc, n](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           for (std::size_t which : {ia, ib}) {
                             if (!t.node(which).requires_grad) continue;
                             const bool small = which == ia ? bc.a_small : bc.b_small;
                             auto dst = t.grad_buffer(which);
                             for (std::size_t i = 0; i < n; ++i) {
                               dst[small ? i % bc.period : i] += g[i];
                             }
                           }
                         });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_tape(a, b);
  const Broadcast bc = broadcast(a, b, "mul");
  const auto av = a.value(), bv = b.value();
  const std::size_t n = numel(bc.out);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = av[bc.a_small ? i % bc.period : i] * bv[bc.b_small ? i % bc.period : i];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(bc.out, std::move(out), {ia, ib},
                         [ia, ib, bc, n](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           const auto& av = t.node(ia).value;
                           const auto& bv = t.node(ib).value;
                           const auto ai = [&](std::size_t i) { return bc.a_small ? i % bc.period : i; };
                           const auto bi = [&](std::size_t i) { return bc.b_small ? i % bc.period : i; };
                           if (t.node(ia).requires_grad) {
                             auto da = t.grad_buffer(ia);
                             for (std::size_t i = 0; i < n; ++i) da[ai(i)] += g[i] * bv[bi(i)];
                           }
                           if (t.node(ib).requires_grad) {
                             auto db = t.grad_buffer(ib);
                             for (std::size_t i = 0; i < n; ++i) db[bi(i)] += g[i] * av[ai(i)];
                           }
                         });
}

Tensor scale(const Tensor& a, double s) {
  const auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = s * av[i];
  const std::size_t ia = a.id();
  return a.tape().record(a.shape(), std::move(out), {ia},
                         [ia, s](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           auto da = t.grad_buffer(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) da[i] += s * g[i];
                         });
}

Tensor silu(const Tensor& a) {
  const auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / (1.0 + std::exp(-av[i]));
  const std::size_t ia = a.id();
  return a.tape().record(a.shape(), std::move(out), {ia},
                         [ia](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           const auto& x = t.node(ia).value;
                           auto da = t.grad_buffer(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             const double s = 1.0 / (1.0 + std::exp(-x[i]));
                             da[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                           }
                         });
}

Tensor sum(const Tensor& a) {
  const auto av = a.value();
  double acc = 0.0;
  for (double x : av) acc += x;
  const std::size_t ia = a.id();
  return a.tape().record({}, {acc}, {ia}, [ia](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0];
    for (double& d : t.grad_buffer(ia)) d += g;
  });
}

Tensor softmax_lastdim(const Tensor& a) {
  if (a.rank() == 0 || a.cols() == 0) {
    throw DimensionError("softmax_lastdim: empty last dimension");
  }
  const std::size_t c = a.cols(), r = a.size() / c;
  const auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* x = av.data() + i * c;
    double* y = out.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) {
      if (!std::isfinite(x[j])) throw NumericError("softmax_lastdim: non-finite input");
      mx = std::max(mx, x[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < c; ++j) y[j] /= z;
  }
  const std::size_t ia = a.id();
  return a.tape().record(a.shape(), std::move(out), {ia},
                         [ia, r, c](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           const auto& y = t.node(self).value;
                           auto da = t.grad_buffer(ia);
                           for (std::size_t i = 0; i < r; ++i) {
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                             for (std::size_t j = 0; j < c; ++j) {
                               da[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                             }
                           }
                         });
}

Tensor rmsnorm(const Tensor& a, const Tensor& weight, double eps) {
  require_same_tape(a, weight);
  if (a.rank() == 0 || weight.size() != a.cols()) {
    throw DimensionError("rmsnorm: weight " + shape_str(weight.shape()) +
                         " does not match last dimension of " + shape_str(a.shape()));
  }
  const std::size_t c = a.cols(), r = a.size() / c;
  const auto x = a.value();
  const auto w = weight.value();
  std::vector<double> out(x.size());
  std::vector<double> inv(r);
  for (std::size_t i = 0; i < r; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < c; ++j) ms += x[i * c + j] * x[i * c + j];
    inv[i] = 1.0 / std::sqrt(ms / static_cast<double>(c) + eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * inv[i] * w[j];
  }
  const std::size_t ia = a.id(), iw = weight.id();
  return a.tape().record(
      a.shape(), std::move(out), {ia, iw},
      [ia, iw, r, c, inv = std::move(inv)](Tape& t, std::size_t self) {
        const auto& g = t.node(self).grad;
        const auto& x = t.node(ia).value;
        const auto& w = t.node(iw).value;
        const bool need_x = t.node(ia).requires_grad;
        const bool need_w = t.node(iw).requires_grad;
        std::span<double> dx, dw;
        if (need_x) dx = t.grad_buffer(ia);
        if (need_w) dw = t.grad_buffer(iw);
        for (std::size_t i = 0; i < r; ++i) {
          const double s = inv[i];
          if (need_x) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * w[j] * x[i * c + j];
            const double k = s * s * s * dot / static_cast<double>(c);
            for (std::size_t j = 0; j < c; ++j) {
              dx[i * c + j] += s * w[j] * g[i * c + j] - k * x[i * c + j];
            }
          }
          if (need_w) {
            for (std::size_t j = 0; j < c; ++j) dw[j] += g[i * c + j] * x[i * c + j] * s;
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask) {
  require_matrix(logits, "cross_entropy");
  const std::size_t T = logits.rows(), V = logits.cols();
  if (targets.size() != T || mask.size() != T) {
    throw DimensionError("cross_entropy: " + std::to_string(T) + " rows but " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < T; ++i) {
    if (!mask[i]) continue;
    ++count;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[i]) +
                       " at position " + std::to_string(i) + " outside vocabulary of " +
                       std::to_string(V));
    }
  }
  if (count == 0) throw EmptyLossError("cross_entropy: every position is masked");

  const auto lv = logits.value();
  std::vector<double> probs(T * V, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < T; ++i) {
    if (!mask[i]) continue;
    const double* x = lv.data() + i * V;
    double* p = probs.data() + i * V;
    const double mx = *std::max_element(x, x + V);
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) z += (p[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < V; ++j) p[j] /= z;
    total -= x[targets[i]] - mx - std::log(z);
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  std::vector<int> tgt(targets.begin(), targets.end());
  std::vector<std::uint8_t> msk(mask.begin(), mask.end());
  const std::size_t il = logits.id();
  return logits.tape().record(
      {}, {total * inv_count}, {il},
      [il, T, V, inv_count, probs = std::move(probs), tgt = std::move(tgt),
       msk = std::move(msk)](Tape& t, std::size_t self) {
        const double g = t.node(self).grad[0] * inv_count;
        auto dl = t.grad_buffer(il);
        for (std::size_t i = 0; i < T; ++i) {
          if (!msk[i]) continue;
          for (std::size_t j = 0; j < V; ++j) dl[i * V + j] += g * probs[i * V + j];
          dl[i * V + tgt[i]] -= g;
        }
      });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const std::size_t V = table.rows(), d = table.cols(), T = ids.size();
  const auto tv = table.value();
  std::vector<double> out(T * d);
  for (std::size_t i = 0; i < T; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw IndexError("embedding: token id " + std::to_string(ids[i]) +
                       " outside table of " + std::to_string(V) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return table.tape().record({T, d}, std::move(out), {it},
                             [it, d, idv = std::move(idv)](Tape& t, std::size_t self) {
                               const auto& g = t.node(self).grad;
                               auto dt = t.grad_buffer(it);
                               for (std::size_t i = 0; i < idv.size(); ++i) {
                                 const std::size_t row = static_cast<std::size_t>(idv[i]) * d;
                                 for (std::size_t j = 0; j < d; ++j) dt[row + j] += g[i * d + j];
                               }
                             });
}

namespace {

// cos/sin tables [T × half] for rotate-half rotary encoding.
struct RopeTable {
  std::size_t half = 0;
  std::vector<double> cos, sin;
};

RopeTable rope_table(std::size_t T, std::size_t head_dim, double base,
                     std::span<const std::size_t> positions) {
  RopeTable tab;
  tab.half = head_dim / 2;
  tab.cos.resize(T * tab.half);
  tab.sin.resize(T * tab.half);
  for (std::size_t p = 0; p < T; ++p) {
    const std::size_t pos = positions.empty() ? p : positions[p];
    for (std::size_t i = 0; i < tab.half; ++i) {
      const double freq =
          std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(pos) * freq;
      tab.cos[p * tab.half + i] = std::cos(angle);
      tab.sin[p * tab.half + i] = std::sin(angle);
    }
  }
  return tab;
}

// sign = +1 applies the rotation, -1 its transpose.
void rope_apply(const double* x, double* y, const RopeTable& tab, std::size_t T,
                std::size_t d, std::size_t n_heads, double sign, bool accumulate) {
  const std::size_t hd = d / n_heads, half = tab.half;
  for (std::size_t p = 0; p < T; ++p) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const double* xr = x + p * d + h * hd;
      double* yr = y + p * d + h * hd;
      for (std::size_t i = 0; i < half; ++i) {
        const double c = tab.cos[p * half + i], s = sign * tab.sin[p * half + i];
        const double lo = xr[i] * c - xr[i + half] * s;
        const double hi = xr[i] * s + xr[i + half] * c;
        if (accumulate) {
          yr[i] += lo;
          yr[i + half] += hi;
        } else {
          yr[i] = lo;
          yr[i + half] = hi;
        }
      }
    }
  }
}

}  // namespace

Tensor rope(const Tensor& x, std::size_t n_heads, double base,
            std::span<const std::size_t> positions) {
  require_matrix(x, "rope");
  const std::size_t T = x.rows(), d = x.cols();
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw DimensionError("rope: width " + std::to_string(d) + " with " +
                         std::to_string(n_heads) + " heads needs an even head dimension");
  }
  if (!positions.empty() && positions.size() != T) {
    throw DimensionError("rope: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(T) + " rows");
  }
  RopeTable tab = rope_table(T, d / n_heads, base, positions);
  std::vector<double> out(T * d);
  rope_apply(x.value().data(), out.data(), tab, T, d, n_heads, 1.0, false);
  const std::size_t ix = x.id();
  return x.tape().record({T, d}, std::move(out), {ix},
                         [ix, T, d, n_heads, tab = std::move(tab)](Tape& t, std::size_t self) {
                           rope_apply(t.node(self).grad.data(), t.grad_buffer(ix).data(), tab,
                                      T, d, n_heads, -1.0, true);
                         });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const std::uint8_t> allowed, std::size_t n_heads) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  require_matrix(q, "attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const std::size_t T = q.rows(), d = q.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  if (allowed.size() != T * T) {
    throw DimensionError("attention: mask has " + std::to_string(allowed.size()) +
                         " entries for " + std::to_string(T) + " positions");
  }
  for (std::size_t i = 0; i < T; ++i) {
    if (std::none_of(allowed.begin() + i * T, allowed.begin() + (i + 1) * T,
                     [](std::uint8_t m) { return m != 0; })) {
      throw StateError("attention: position " + std::to_string(i) + " may attend nowhere");
    }
  }
  const std::size_t hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto qv = q.value(), kv = k.value(), vv = v.value();
  // probs[h][i][j]
  std::vector<double> probs(n_heads * T * T, 0.0);
  std::vector<double> out(T * d, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t i = 0; i < T; ++i) {
      double* p = probs.data() + (h * T + i) * T;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < T; ++j) {
        if (!allowed[i * T + j]) continue;
        double s = 0.0;
        for (std::size_t e = 0; e < hd; ++e) s += qv[i * d + h * hd + e] * kv[j * d + h * hd + e];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        if (allowed[i * T + j]) z += (p[j] = std::exp(p[j] - mx));
      }
      for (std::size_t j = 0; j < T; ++j) {
        if (!allowed[i * T + j]) continue;
        p[j] /= z;
        for (std::size_t e = 0; e < hd; ++e) out[i * d + h * hd + e] += p[j] * vv[j * d + h * hd + e];
      }
    }
  }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record(
      {T, d}, std::move(out), {iq, ik, iv},
      [iq, ik, iv, T, d, n_heads, hd, inv_sqrt, probs = std::move(probs)](Tape& t,
                                                                          std::size_t self) {
        const auto& g = t.node(self).grad;
        const auto& qv = t.node(iq).value;
        const auto& kv = t.node(ik).value;
        const auto& vv = t.node(iv).value;
        auto dq = t.grad_buffer(iq);
        auto dk = t.grad_buffer(ik);
        auto dv = t.grad_buffer(iv);
        std::vector<double> ds(T);
        for (std::size_t h = 0; h < n_heads; ++h) {
          for (std::size_t i = 0; i < T; ++i) {
            const double* p = probs.data() + (h * T + i) * T;
            double dot = 0.0;
            for (std::size_t j = 0; j < T; ++j) {
              if (p[j] == 0.0) {
                ds[j] = 0.0;
                continue;
              }
              double dp = 0.0;
              for (std::size_t e = 0; e < hd; ++e) {
                dp += g[i * d + h * hd + e] * vv[j * d + h * hd + e];
                dv[j * d + h * hd + e] += p[j] * g[i * d + h * hd + e];
              }
              ds[j] = dp;
              dot += dp * p[j];
            }
            for (std::size_t j = 0; j < T; ++j) {
              if (p[j] == 0.0) continue;
              const double dsj = p[j] * (ds[j] - dot) * inv_sqrt;
              for (std::size_t e = 0; e < hd; ++e) {
                dq[i * d + h * hd + e] += dsj * kv[j * d + h * hd + e];
                dk[j * d + h * hd + e] += dsj * qv[i * d + h * hd + e];
              }
            }
          }
        }
      });
}

Tensor merge_rows(const Tensor& a, const Tensor& b, std::span<const std::uint8_t> take_b) {
  require_same_tape(a, b);
  require_matrix(a, "merge_rows");
  if (a.shape() != b.shape() || take_b.size() != a.rows()) {
    throw DimensionError("merge_rows: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()) + " with " + std::to_string(take_b.size()) +
                         " selectors");
  }
  const std::size_t T = a.rows(), d = a.cols();
  const auto av = a.value(), bv = b.value();
  std::vector<double> out(T * d);
  for (std::size_t i = 0; i < T; ++i) {
    std::copy_n((take_b[i] ? bv : av).data() + i * d, d, out.data() + i * d);
  }
  std::vector<std::uint8_t> sel(take_b.begin(), take_b.end());
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record({T, d}, std::move(out), {ia, ib},
                         [ia, ib, T, d, sel = std::move(sel)](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           for (std::size_t i = 0; i < T; ++i) {
                             const std::size_t src = sel[i] ? ib : ia;
                             if (!t.node(src).requires_grad) continue;
                             auto dst = t.grad_buffer(src);
                             for (std::size_t j = 0; j < d; ++j) dst[i * d + j] += g[i * d + j];
                           }
                           // Unselected operands still get a (zero) buffer so every
                           // reachable tensor carries a gradient after the sweep.
                           if (t.node(ia).requires_grad) t.grad_buffer(ia);
                           if (t.node(ib).requires_grad) t.grad_buffer(ib);
                         });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  const std::size_t T = x.rows(), d = x.cols(), n = rows.size();
  for (std::size_t r : rows) {
    if (r >= T) throw DimensionError("gather_rows: row " + std::to_string(r) + " of " + std::to_string(T));
  }
  const auto xv = x.value();
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(xv.data() + rows[i] * d, d, out.data() + i * d);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t ix = x.id();
  return x.tape().record({n, d}, std::move(out), {ix}, [ix, d, idx = std::move(idx)](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    auto dst = t.grad_buffer(ix);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) dst[idx[i] * d + j] += g[i * d + j];
    }
  });
}

Tensor interleave_rows(const Tensor& a, const Tensor& b, std::span<const std::uint8_t> take_b) {
  require_same_tape(a, b);
  require_matrix(a, "interleave_rows");
  require_matrix(b, "interleave_rows");
  const std::size_t nb = static_cast<std::size_t>(std::count_if(take_b.begin(), take_b.end(), [](std::uint8_t m) { return m != 0; }));
  const std::size_t T = take_b.size(), d = a.cols();
  if (b.cols() != d || b.rows() != nb || a.rows() != T - nb) {
    throw DimensionError("interleave_rows: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " for " +
                         std::to_string(T - nb) + "+" + std::to_string(nb) + " rows");
  }
  const auto av = a.value(), bv = b.value();
  std::vector<double> out(T * d);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < T; ++i) {
    const double* src = take_b[i] ? bv.data() + (ib++) * d : av.data() + (ia++) * d;
    std::copy_n(src, d, out.data() + i * d);
  }
  std::vector<std::uint8_t> sel(take_b.begin(), take_b.end());
  const std::size_t id_a = a.id(), id_b = b.id();
  return a.tape().record({T, d}, std::move(out), {id_a, id_b},
                         [id_a, id_b, d, sel = std::move(sel)](Tape& t, std::size_t self) {
                           const auto& g = t.node(self).grad;
                           const bool ga = t.node(id_a).requires_grad, gb = t.node(id_b).requires_grad;
                           std::span<double> da, db;
                           if (ga) da = t.grad_buffer(id_a);
                           if (gb) db = t.grad_buffer(id_b);
                           std::size_t ra = 0, rb = 0;
                           for (std::size_t i = 0; i < sel.size(); ++i) {
                             const bool to_b = sel[i] != 0;
                             const std::size_t r = to_b ? rb++ : ra++;
                             if (to_b ? !gb : !ga) continue;
                             double* dst = (to_b ? db : da).data() + r * d;
                             for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                           }
                         });
}

}  // namespace uxw::ad
