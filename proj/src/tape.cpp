#include "ipr/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace ipr {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap map_of(const Tensor& t, std::int64_t r, std::int64_t c) { return ConstMap(t.data(), r, c); }

ConstMap map2d(const Tensor& t) {
  if (t.rank() != 2) throw std::invalid_argument("expected a rank-2 tensor, got shape " + shape_str(t.shape()));
  return ConstMap(t.data(), t.shape()[0], t.shape()[1]);
}

Eigen::Map<const RowMat> map_raw(const std::vector<double>& v, std::int64_t r, std::int64_t c) {
  return Eigen::Map<const RowMat>(v.data(), r, c);
}

Eigen::Map<RowMat> map_raw_mut(std::vector<double>& v, std::int64_t r, std::int64_t c) {
  return Eigen::Map<RowMat>(v.data(), r, c);
}

// Resolve which tape (if any) the result of an op lives on, and reject
// operands bound to two different tapes.
Tape* result_tape(std::initializer_list<const Tensor*> operands) {
  Tape* tape = nullptr;
  for (const Tensor* t : operands) {
    if (!t->on_tape()) continue;
    if (tape != nullptr && tape != t->tape) {
      throw std::invalid_argument("operands are bound to different tapes");
    }
    tape = t->tape;
  }
  return tape;
}

void bind_result(Tensor& out, Tape* tape, std::vector<std::int64_t> parents, Tape::BackFn back) {
  if (tape == nullptr) return;
  out.tape = tape;
  out.node = tape->add_node(std::move(parents), std::move(back), out.numel());
}

void add_into(std::vector<double>& buf, const std::vector<double>& g) {
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

bool scalar_like(const Tensor& t) { return t.numel() == 1; }

void check_elementwise(const Tensor& a, const Tensor& b, const char* op) {
  if (!same_shape(a.shape(), b.shape()) && !scalar_like(a) && !scalar_like(b)) {
    throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()) +
                                " do not match and neither is a one-element tensor");
  }
}

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

// Generic elementwise binary with scalar broadcast.  fwd(x, y) -> value,
// bwd(x, y, out, g) -> {dx, dy} contributions for one element.
template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  check_elementwise(a, b, name);
  const bool a_scalar = scalar_like(a) && !same_shape(a.shape(), b.shape());
  const bool b_scalar = scalar_like(b) && !same_shape(a.shape(), b.shape());
  const Tensor& big = a_scalar ? b : a;
  Tensor out(big.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    double x = a.at(a_scalar ? 0 : i);
    double y = b.at(b_scalar ? 0 : i);
    out.mutable_data()[i] = fwd(x, y);
  }
  Tape* tape = result_tape({&a, &b});
  if (tape != nullptr) {
    std::vector<std::int64_t> parents;
    if (a.on_tape()) parents.push_back(a.node);
    if (b.on_tape()) parents.push_back(b.node);
    Tensor av = a, bv = b, ov = out;
    bind_result(out, tape, parents, [av, bv, ov, a_scalar, b_scalar, bwd](Tape& tp, std::int64_t self) {
      const std::vector<double>& g = tp.grad_buffer(self);
      std::vector<double>* ga = av.on_tape() ? &tp.grad_buffer(av.node) : nullptr;
      std::vector<double>* gb = bv.on_tape() ? &tp.grad_buffer(bv.node) : nullptr;
      const std::int64_t n = ov.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        double x = av.at(a_scalar ? 0 : i);
        double y = bv.at(b_scalar ? 0 : i);
        auto [dx, dy] = bwd(x, y, ov.at(i), g[static_cast<std::size_t>(i)]);
        if (ga) (*ga)[a_scalar ? 0 : static_cast<std::size_t>(i)] += dx;
        if (gb) (*gb)[b_scalar ? 0 : static_cast<std::size_t>(i)] += dy;
      }
    });
  }
  return out;
}

// Generic elementwise unary.  bwd(x, out, g) -> dx.
template <typename Fwd, typename Bwd>
Tensor elementwise_unary(const Tensor& t, Fwd fwd, Bwd bwd) {
  Tensor out(t.shape());
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out.mutable_data()[i] = fwd(t.at(i));
  Tape* tape = result_tape({&t});
  if (tape != nullptr) {
    Tensor tv = t, ov = out;
    bind_result(out, tape, {t.node}, [tv, ov, bwd](Tape& tp, std::int64_t self) {
      const std::vector<double>& g = tp.grad_buffer(self);
      std::vector<double>& gt = tp.grad_buffer(tv.node);
      const std::int64_t n = ov.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        gt[static_cast<std::size_t>(i)] += bwd(tv.at(i), ov.at(i), g[static_cast<std::size_t>(i)]);
      }
    });
  }
  return out;
}

}  // namespace

RowGroups RowGroups::from_lists(const std::vector<std::vector<std::int32_t>>& lists) {
  RowGroups g;
  g.offsets.reserve(lists.size() + 1);
  g.offsets.push_back(0);
  for (const auto& l : lists) {
    g.rows.insert(g.rows.end(), l.begin(), l.end());
    g.offsets.push_back(static_cast<std::int64_t>(g.rows.size()));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& t) {
  Tensor out = t;
  out.tape = this;
  out.node = add_node({}, nullptr, t.numel());
  return out;
}

Tensor Tape::leaf_param(const Tensor& t, const std::string& name) {
  Tensor out = leaf(t);
  params_.emplace_back(name, out.node);
  return out;
}

std::int64_t Tape::add_node(std::vector<std::int64_t> parents, BackFn back, std::int64_t grad_size) {
  nodes_.push_back(Node{std::move(parents), std::move(back), grad_size});
  return static_cast<std::int64_t>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad_buffer(std::int64_t node) {
  if (grads_.size() != nodes_.size()) grads_.resize(nodes_.size());
  auto& buf = grads_[static_cast<std::size_t>(node)];
  if (buf.empty() && nodes_[static_cast<std::size_t>(node)].grad_size > 0) {
    buf.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].grad_size), 0.0);
  }
  return buf;
}

bool Tape::grad_touched(std::int64_t node) const {
  return static_cast<std::size_t>(node) < grads_.size() && !grads_[static_cast<std::size_t>(node)].empty();
}

void Tape::backward(const Tensor& loss) {
  if (!loss.on_tape() || loss.tape != this) {
    throw std::invalid_argument("backward target is not bound to this tape");
  }
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward target must have exactly one element, got shape " +
                                shape_str(loss.shape()));
  }
  backward_from(loss, {1.0});
}

void Tape::backward_from(const Tensor& t, const std::vector<double>& seed) {
  if (!t.on_tape() || t.tape != this) {
    throw std::invalid_argument("backward seed tensor is not bound to this tape");
  }
  if (static_cast<std::int64_t>(seed.size()) != t.numel()) {
    throw std::invalid_argument("backward seed has " + std::to_string(seed.size()) +
                                " entries for a tensor of " + std::to_string(t.numel()));
  }
  clear_grads();
  grad_buffer(t.node) = seed;
  for (std::int64_t i = static_cast<std::int64_t>(nodes_.size()) - 1; i >= 0; --i) {
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (node.back && grad_touched(i)) node.back(*this, i);
  }
}

std::vector<double> Tape::grad(const Tensor& t) const {
  if (!t.on_tape() || t.tape != this) {
    throw std::invalid_argument("gradient requested for a tensor not bound to this tape");
  }
  if (grad_touched(t.node)) return grads_[static_cast<std::size_t>(t.node)];
  return std::vector<double>(static_cast<std::size_t>(t.numel()), 0.0);
}

void Tape::clear_grads() { grads_.assign(nodes_.size(), {}); }

const std::vector<double>& Tape::node_grad(std::int64_t node) const {
  static const std::vector<double> empty;
  if (static_cast<std::size_t>(node) >= grads_.size()) return empty;
  return grads_[static_cast<std::size_t>(node)];
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument("matmul needs rank-2 operands, got " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  }
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  Tensor out({a.rows(), b.cols()});
  MutMap(out.mutable_data(), a.rows(), b.cols()).noalias() = map2d(a) * map2d(b);
  Tape* tape = result_tape({&a, &b});
  if (tape != nullptr) {
    std::vector<std::int64_t> parents;
    if (a.on_tape()) parents.push_back(a.node);
    if (b.on_tape()) parents.push_back(b.node);
    Tensor av = a, bv = b;
    bind_result(out, tape, parents, [av, bv](Tape& tp, std::int64_t self) {
      const std::vector<double>& g = tp.grad_buffer(self);
      auto gmap = map_raw(g, av.rows(), bv.cols());
      if (av.on_tape()) {
        map_raw_mut(tp.grad_buffer(av.node), av.rows(), av.cols()).noalias() +=
            gmap * map2d(bv).transpose();
      }
      if (bv.on_tape()) {
        map_raw_mut(tp.grad_buffer(bv.node), bv.rows(), bv.cols()).noalias() +=
            map2d(av).transpose() * gmap;
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(a, b, "add", [](double x, double y) { return x + y; },
                            [](double, double, double, double g) { return std::pair<double, double>(g, g); });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(a, b, "sub", [](double x, double y) { return x - y; },
                            [](double, double, double, double g) { return std::pair<double, double>(g, -g); });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(a, b, "mul", [](double x, double y) { return x * y; },
                            [](double x, double y, double, double g) { return std::pair<double, double>(g * y, g * x); });
}

Tensor logaddexp(const Tensor& a, const Tensor& b) {
  auto fwd = [](double x, double y) {
    if (x == kNegInf) return y;
    if (y == kNegInf) return x;
    double m = std::max(x, y);
    return m + std::log1p(std::exp(-std::fabs(x - y)));
  };
  auto bwd = [](double x, double y, double out, double g) {
    if (out == kNegInf) return std::pair<double, double>(0.0, 0.0);
    double dx = (x == kNegInf) ? 0.0 : g * std::exp(x - out);
    double dy = (y == kNegInf) ? 0.0 : g * std::exp(y - out);
    return std::pair<double, double>(dx, dy);
  };
  return elementwise_binary(a, b, "logaddexp", fwd, bwd);
}

Tensor neg(const Tensor& t) {
  return elementwise_unary(t, [](double x) { return -x; },
                           [](double, double, double g) { return -g; });
}

Tensor relu(const Tensor& t) {
  return elementwise_unary(t, [](double x) { return x > 0.0 ? x : 0.0; },
                           [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

Tensor clamp(const Tensor& t, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp bounds are inverted");
  return elementwise_unary(t, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
                           [lo, hi](double x, double, double g) { return (x > lo && x < hi) ? g : 0.0; });
}

Tensor sigmoid(const Tensor& t) {
  return elementwise_unary(t, [](double x) { return stable_sigmoid(x); },
                           [](double, double s, double g) { return g * s * (1.0 - s); });
}

Tensor tlog(const Tensor& t) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if (!(t.at(i) > 0.0)) {
      throw std::domain_error("log of non-positive entry " + std::to_string(t.at(i)) +
                              " at flat index " + std::to_string(i));
    }
  }
  return elementwise_unary(t, [](double x) { return std::log(x); },
                           [](double x, double, double g) { return g / x; });
}

Tensor texp(const Tensor& t) {
  return elementwise_unary(t, [](double x) { return std::exp(x); },
                           [](double, double e, double g) { return g * e; });
}

Tensor add_scalar(const Tensor& t, double c) {
  return elementwise_unary(t, [c](double x) { return x + c; },
                           [](double, double, double g) { return g; });
}

Tensor scale(const Tensor& t, double c) {
  return elementwise_unary(t, [c](double x) { return x * c; },
                           [c](double, double, double g) { return g * c; });
}

Tensor add_bias(const Tensor& mat, const Tensor& bias) {
  if (mat.rank() != 2) throw std::invalid_argument("add_bias matrix must be rank-2, got " + shape_str(mat.shape()));
  const std::int64_t n = mat.rows(), d = mat.cols();
  if (bias.numel() != d) {
    throw std::invalid_argument("add_bias length mismatch: matrix " + shape_str(mat.shape()) +
                                " vs bias " + shape_str(bias.shape()));
  }
  Tensor out(mat.shape());
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t c = 0; c < d; ++c) {
      out.mutable_data()[r * d + c] = mat.at(r * d + c) + bias.at(c);
    }
  }
  Tape* tape = result_tape({&mat, &bias});
  if (tape != nullptr) {
    std::vector<std::int64_t> parents;
    if (mat.on_tape()) parents.push_back(mat.node);
    if (bias.on_tape()) parents.push_back(bias.node);
    Tensor mv = mat, bv = bias;
    bind_result(out, tape, parents, [mv, bv, n, d](Tape& tp, std::int64_t self) {
      const std::vector<double>& g = tp.grad_buffer(self);
      if (mv.on_tape()) add_into(tp.grad_buffer(mv.node), g);
      if (bv.on_tape()) {
        std::vector<double>& gb = tp.grad_buffer(bv.node);
        for (std::int64_t r = 0; r < n; ++r) {
          for (std::int64_t c = 0; c < d; ++c) gb[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r * d + c)];
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  if (x.rank() != 2) {
    throw std::invalid_argument("layer_norm input must be rank-2, got " + shape_str(x.shape()));
  }
  const std::int64_t n = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw std::invalid_argument("layer_norm gain/bias length mismatch: input " +
                                shape_str(x.shape()) + " vs " + shape_str(gain.shape()) +
                                " and " + shape_str(bias.shape()));
  }
  constexpr double kEps = 1e-5;
  Tensor out(x.shape());
  Tensor xhat(x.shape());  // normalized rows, saved for backward
  std::vector<double> inv_sigma(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < n; ++r) {
    const double* row = x.data() + r * d;
    double mu = 0.0;
    for (std::int64_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kEps);
    inv_sigma[static_cast<std::size_t>(r)] = is;
    for (std::int64_t c = 0; c < d; ++c) {
      const double xh = (row[c] - mu) * is;
      xhat.mutable_data()[r * d + c] = xh;
      out.mutable_data()[r * d + c] = gain.at(c) * xh + bias.at(c);
    }
  }
  Tape* tape = result_tape({&x, &gain, &bias});
  if (tape != nullptr) {
    std::vector<std::int64_t> parents;
    if (x.on_tape()) parents.push_back(x.node);
    if (gain.on_tape()) parents.push_back(gain.node);
    if (bias.on_tape()) parents.push_back(bias.node);
    Tensor xv = x, gv = gain, bv = bias;
    bind_result(out, tape, parents,
                [xv, gv, bv, xhat, inv_sigma, n, d](Tape& tp, std::int64_t self) {
      const std::vector<double>& g = tp.grad_buffer(self);
      std::vector<double>* gx = xv.on_tape() ? &tp.grad_buffer(xv.node) : nullptr;
      std::vector<double>* gg = gv.on_tape() ? &tp.grad_buffer(gv.node) : nullptr;
      std::vector<double>* gb = bv.on_tape() ? &tp.grad_buffer(bv.node) : nullptr;
      for (std::int64_t r = 0; r < n; ++r) {
        const double* xh = xhat.data() + r * d;
        const double* gy = g.data() + r * d;
        // d x = (ghat - mean(ghat) - xhat * mean(ghat * xhat)) / sigma,
        // ghat = gain * upstream, means taken over the row.
        double m1 = 0.0, m2 = 0.0;
        for (std::int64_t c = 0; c < d; ++c) {
          const double gh = gv.at(c) * gy[c];
          m1 += gh;
          m2 += gh * xh[c];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        for (std::int64_t c = 0; c < d; ++c) {
          if (gx) {
            const double gh = gv.at(c) * gy[c];
            (*gx)[static_cast<std::size_t>(r * d + c)] +=
                (gh - m1 - xh[c] * m2) * inv_sigma[static_cast<std::size_t>(r)];
          }
          if (gg) (*gg)[static_cast<std::size_t>(c)] += gy[c] * xh[c];
          if (gb) (*gb)[static_cast<std::size_t>(c)] += gy[c];
        }
      }
    });
  }
  return out;
}

namespace {

Tensor reduce_impl(const Tensor& t, Reduce op, int axis, bool full) {
  if (!full && t.rank() != 2) {
    throw std::invalid_argument("axis reduction needs a rank-2 tensor, got " + shape_str(t.shape()));
  }
  if (!full && axis != 0 && axis != 1) {
    throw std::invalid_argument("reduction axis must be 0 or 1, got " + std::to_string(axis));
  }
  const std::int64_t n = full ? t.numel() : t.shape()[axis];
  if (op == Reduce::max && n == 0) {
    throw std::invalid_argument("max reduction over an empty extent is undefined");
  }
  if (op == Reduce::mean && n == 0) {
    throw std::invalid_argument("mean reduction over an empty extent is undefined");
  }

  Shape out_shape;
  std::int64_t out_n = 1;
  std::int64_t stride_out = 0, stride_red = 0;
  if (full) {
    out_shape = {};
  } else {
    out_shape = {t.shape()[1 - axis]};
    out_n = t.shape()[1 - axis];
    // reduce over `axis`: element (o, j) sits at o*stride_out + j*stride_red
    if (axis == 0) { stride_out = 1; stride_red = t.shape()[1]; }
    else { stride_out = t.shape()[1]; stride_red = 1; }
  }

  Tensor out(out_shape);
  std::vector<std::int64_t> arg(static_cast<std::size_t>(out_n), 0);
  for (std::int64_t o = 0; o < out_n; ++o) {
    double acc = (op == Reduce::max) ? kNegInf : 0.0;
    std::int64_t best = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      double v = full ? t.at(j) : t.at(o * stride_out + j * stride_red);
      if (op == Reduce::max) {
        if (v > acc) { acc = v; best = j; }  // strict: ties keep the lowest index
      } else {
        acc += v;
      }
    }
    if (op == Reduce::mean) acc /= static_cast<double>(n);
    out.mutable_data()[o] = acc;
    arg[static_cast<std::size_t>(o)] = best;
  }

  Tape* tape = result_tape({&t});
  if (tape != nullptr) {
    Tensor tv = t;
    bind_result(out, tape, {t.node},
                [tv, op, n, out_n, stride_out, stride_red, full, arg](Tape& tp, std::int64_t self) {
      const std::vector<double>& g = tp.grad_buffer(self);
      std::vector<double>& gt = tp.grad_buffer(tv.node);
      for (std::int64_t o = 0; o < out_n; ++o) {
        double go = g[static_cast<std::size_t>(o)];
        if (op == Reduce::max) {
          std::int64_t j = arg[static_cast<std::size_t>(o)];
          std::int64_t idx = full ? j : o * stride_out + j * stride_red;
          gt[static_cast<std::size_t>(idx)] += go;
        } else {
          double w = (op == Reduce::mean) ? go / static_cast<double>(n) : go;
          for (std::int64_t j = 0; j < n; ++j) {
            std::int64_t idx = full ? j : o * stride_out + j * stride_red;
            gt[static_cast<std::size_t>(idx)] += w;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor reduce(const Tensor& t, Reduce op) { return reduce_impl(t, op, 0, true); }
Tensor reduce_axis(const Tensor& t, Reduce op, int axis) { return reduce_impl(t, op, axis, false); }

Tensor reshape(const Tensor& t, Shape new_shape) {
  if (shape_numel(new_shape) != t.numel()) {
    throw std::invalid_argument("reshape from " + shape_str(t.shape()) + " to " +
                                shape_str(new_shape) + " changes the element count");
  }
  Tensor out(new_shape, std::vector<double>(t.data(), t.data() + t.numel()));
  Tape* tape = result_tape({&t});
  if (tape != nullptr) {
    Tensor tv = t;
    bind_result(out, tape, {t.node}, [tv](Tape& tp, std::int64_t self) {
      add_into(tp.grad_buffer(tv.node), tp.grad_buffer(self));
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of zero tensors");
  const std::int64_t d = parts[0].rank() == 2 ? parts[0].cols() : -1;
  std::int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.cols() != d) {
      throw std::invalid_argument("concat_rows needs rank-2 parts with equal column counts");
    }
    total += p.rows();
  }
  Tensor out({total, d});
  std::int64_t row = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data(), p.data() + p.numel(), out.mutable_data() + row * d);
    row += p.rows();
  }
  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  Tape* tape = nullptr;
  for (const Tensor* p : ptrs) {
    if (p->on_tape()) {
      if (tape && tape != p->tape) throw std::invalid_argument("operands are bound to different tapes");
      tape = p->tape;
    }
  }
  if (tape != nullptr) {
    std::vector<Tensor> pv(parts);
    std::vector<std::int64_t> parents;
    for (const Tensor& p : pv) if (p.on_tape()) parents.push_back(p.node);
    bind_result(out, tape, parents, [pv, d](Tape& tp, std::int64_t self) {
      const std::vector<double>& g = tp.grad_buffer(self);
      std::int64_t row = 0;
      for (const Tensor& p : pv) {
        if (p.on_tape()) {
          std::vector<double>& gp = tp.grad_buffer(p.node);
          for (std::int64_t i = 0; i < p.numel(); ++i) gp[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(row * d + i)];
        }
        row += p.rows();
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols of zero tensors");
  const std::int64_t n = parts[0].rank() == 2 ? parts[0].rows() : -1;
  std::int64_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 2 || p.rows() != n) {
      throw std::invalid_argument("concat_cols needs rank-2 parts with equal row counts");
    }
    total += p.cols();
  }
  Tensor out({n, total});
  std::int64_t col = 0;
  for (const Tensor& p : parts) {
    for (std::int64_t r = 0; r < n; ++r) {
      std::copy(p.data() + r * p.cols(), p.data() + (r + 1) * p.cols(),
                out.mutable_data() + r * total + col);
    }
    col += p.cols();
  }
  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    if (p.on_tape()) {
      if (tape && tape != p.tape) throw std::invalid_argument("operands are bound to different tapes");
      tape = p.tape;
    }
  }
  if (tape != nullptr) {
    std::vector<Tensor> pv(parts);
    std::vector<std::int64_t> parents;
    for (const Tensor& p : pv) if (p.on_tape()) parents.push_back(p.node);
    bind_result(out, tape, parents, [pv, n, total](Tape& tp, std::int64_t self) {
      const std::vector<double>& g = tp.grad_buffer(self);
      std::int64_t col = 0;
      for (const Tensor& p : pv) {
        if (p.on_tape()) {
          std::vector<double>& gp = tp.grad_buffer(p.node);
          for (std::int64_t r = 0; r < n; ++r) {
            for (std::int64_t c = 0; c < p.cols(); ++c) {
              gp[static_cast<std::size_t>(r * p.cols() + c)] += g[static_cast<std::size_t>(r * total + col + c)];
            }
          }
        }
        col += p.cols();
      }
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& t, const std::vector<std::int64_t>& idx) {
  if (t.rank() != 2) throw std::invalid_argument("gather_rows needs a rank-2 tensor, got " + shape_str(t.shape()));
  const std::int64_t n = t.rows(), d = t.cols();
  for (std::int64_t i : idx) {
    if (i < 0 || i >= n) {
      throw std::invalid_argument("gather_rows index " + std::to_string(i) + " out of range [0, " +
                                  std::to_string(n) + ")");
    }
  }
  Tensor out({static_cast<std::int64_t>(idx.size()), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy(t.data() + idx[r] * d, t.data() + (idx[r] + 1) * d,
              out.mutable_data() + static_cast<std::int64_t>(r) * d);
  }
  Tape* tape = result_tape({&t});
  if (tape != nullptr) {
    Tensor tv = t;
    std::vector<std::int64_t> iv = idx;
    bind_result(out, tape, {t.node}, [tv, iv, d](Tape& tp, std::int64_t self) {
      const std::vector<double>& g = tp.grad_buffer(self);
      std::vector<double>& gt = tp.grad_buffer(tv.node);
      for (std::size_t r = 0; r < iv.size(); ++r) {
        for (std::int64_t c = 0; c < d; ++c) {
          gt[static_cast<std::size_t>(iv[r] * d + c)] += g[r * static_cast<std::size_t>(d) + static_cast<std::size_t>(c)];
        }
      }
    });
  }
  return out;
}

Tensor group_reduce(const Tensor& t, const RowGroups& groups, Reduce op) {
  if (t.rank() != 2) throw std::invalid_argument("group_reduce needs a rank-2 tensor, got " + shape_str(t.shape()));
  const std::int64_t n = t.rows(), d = t.cols(), G = groups.group_count();
  if (groups.offsets.empty() || groups.offsets[0] != 0 ||
      groups.offsets.back() != static_cast<std::int64_t>(groups.rows.size())) {
    throw std::invalid_argument("group_reduce offsets are inconsistent with the row list");
  }
  for (std::int32_t r : groups.rows) {
    if (r < 0 || r >= n) {
      throw std::invalid_argument("group_reduce row " + std::to_string(r) + " out of range [0, " +
                                  std::to_string(n) + ")");
    }
  }
  Tensor out({G, d});
  // Empty groups reduce to the zero vector under every op.
  std::vector<std::int32_t> argrow;
  if (op == Reduce::max) argrow.assign(static_cast<std::size_t>(G * d), -1);
  for (std::int64_t g = 0; g < G; ++g) {
    const std::int64_t lo = groups.offsets[static_cast<std::size_t>(g)];
    const std::int64_t hi = groups.offsets[static_cast<std::size_t>(g) + 1];
    double* dst = out.mutable_data() + g * d;
    if (op == Reduce::max) {
      for (std::int64_t c = 0; c < d; ++c) {
        double best = 0.0;
        std::int32_t bi = -1;
        for (std::int64_t j = lo; j < hi; ++j) {
          double v = t.at(groups.rows[static_cast<std::size_t>(j)], c);
          if (bi < 0 || v > best) { best = v; bi = groups.rows[static_cast<std::size_t>(j)]; }
        }
        dst[c] = bi < 0 ? 0.0 : best;
        argrow[static_cast<std::size_t>(g * d + c)] = bi;
      }
    } else {
      for (std::int64_t j = lo; j < hi; ++j) {
        const double* src = t.data() + groups.rows[static_cast<std::size_t>(j)] * d;
        for (std::int64_t c = 0; c < d; ++c) dst[c] += src[c];
      }
      if (op == Reduce::mean && hi > lo) {
        for (std::int64_t c = 0; c < d; ++c) dst[c] /= static_cast<double>(hi - lo);
      }
    }
  }
  Tape* tape = result_tape({&t});
  if (tape != nullptr) {
    Tensor tv = t;
    RowGroups gv = groups;
    bind_result(out, tape, {t.node}, [tv, gv, op, d, G, argrow](Tape& tp, std::int64_t self) {
      const std::vector<double>& g = tp.grad_buffer(self);
      std::vector<double>& gt = tp.grad_buffer(tv.node);
      for (std::int64_t gi = 0; gi < G; ++gi) {
        const std::int64_t lo = gv.offsets[static_cast<std::size_t>(gi)];
        const std::int64_t hi = gv.offsets[static_cast<std::size_t>(gi) + 1];
        if (op == Reduce::max) {
          for (std::int64_t c = 0; c < d; ++c) {
            std::int32_t r = argrow[static_cast<std::size_t>(gi * d + c)];
            if (r >= 0) gt[static_cast<std::size_t>(r) * d + static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(gi * d + c)];
          }
        } else {
          double w = (op == Reduce::mean && hi > lo) ? 1.0 / static_cast<double>(hi - lo) : 1.0;
          for (std::int64_t j = lo; j < hi; ++j) {
            std::int32_t r = gv.rows[static_cast<std::size_t>(j)];
            for (std::int64_t c = 0; c < d; ++c) {
              gt[static_cast<std::size_t>(r) * d + static_cast<std::size_t>(c)] += w * g[static_cast<std::size_t>(gi * d + c)];
            }
          }
        }
      }
    });
  }
  return out;
}

namespace {

void check_blocks(const std::vector<Tensor>& blocks, const char* op) {
  if (blocks.empty()) throw std::invalid_argument(std::string(op) + ": no weight blocks given");
  for (const Tensor& b : blocks) {
    if (b.rank() != 2) throw std::invalid_argument(std::string(op) + ": weight blocks must be rank-2");
  }
}

Tape* blocks_tape(const std::vector<Tensor>& blocks, const Tensor& other) {
  Tape* tape = other.on_tape() ? other.tape : nullptr;
  for (const Tensor& b : blocks) {
    if (!b.on_tape()) continue;
    if (tape && tape != b.tape) throw std::invalid_argument("operands are bound to different tapes");
    tape = b.tape;
  }
  return tape;
}

}  // namespace

Tensor assign_aggregate(const std::vector<Tensor>& h_blocks_weights, const Tensor& h) {
  check_blocks(h_blocks_weights, "assign_aggregate");
  const std::int64_t d = h.cols();
  std::int64_t rows_in = 0, rows_out = 0;
  for (const Tensor& b : h_blocks_weights) { rows_in += b.rows(); rows_out += b.cols(); }
  if (rows_in != h.rows()) {
    throw std::invalid_argument("assign_aggregate: weight blocks cover " + std::to_string(rows_in) +
                                " rows but the state has " + std::to_string(h.rows()));
  }
  Tensor out({rows_out, d});
  std::int64_t ri = 0, ro = 0;
  for (const Tensor& b : h_blocks_weights) {
    MutMap(out.mutable_data() + ro * d, b.cols(), d).noalias() =
        map2d(b).transpose() * ConstMap(h.data() + ri * d, b.rows(), d);
    ri += b.rows();
    ro += b.cols();
  }
  Tape* tape = blocks_tape(h_blocks_weights, h);
  if (tape != nullptr) {
    std::vector<Tensor> bv(h_blocks_weights);
    Tensor hv = h;
    std::vector<std::int64_t> parents;
    for (const Tensor& b : bv) if (b.on_tape()) parents.push_back(b.node);
    if (h.on_tape()) parents.push_back(h.node);
    bind_result(out, tape, parents, [bv, hv, d](Tape& tp, std::int64_t self) {
      const std::vector<double>& g = tp.grad_buffer(self);
      std::int64_t ri = 0, ro = 0;
      for (const Tensor& b : bv) {
        auto gmap = Eigen::Map<const RowMat>(g.data() + ro * d, b.cols(), d);
        auto hmap = ConstMap(hv.data() + ri * d, b.rows(), d);
        if (b.on_tape()) {
          map_raw_mut(tp.grad_buffer(b.node), b.rows(), b.cols()).noalias() += hmap * gmap.transpose();
        }
        if (hv.on_tape()) {
          std::vector<double>& gh = tp.grad_buffer(hv.node);
          Eigen::Map<RowMat>(gh.data() + ri * d, b.rows(), d).noalias() += map2d(b) * gmap;
        }
        ri += b.rows();
        ro += b.cols();
      }
    });
  }
  return out;
}

Tensor assign_distribute(const std::vector<Tensor>& h_blocks_weights, const Tensor& g) {
  check_blocks(h_blocks_weights, "assign_distribute");
  const std::int64_t d = g.cols();
  std::int64_t rows_in = 0, rows_out = 0;
  for (const Tensor& b : h_blocks_weights) { rows_out += b.rows(); rows_in += b.cols(); }
  if (rows_in != g.rows()) {
    throw std::invalid_argument("assign_distribute: weight blocks cover " + std::to_string(rows_in) +
                                " rows but the state has " + std::to_string(g.rows()));
  }
  Tensor out({rows_out, d});
  std::int64_t ri = 0, ro = 0;
  for (const Tensor& b : h_blocks_weights) {
    MutMap(out.mutable_data() + ro * d, b.rows(), d).noalias() =
        map2d(b) * ConstMap(g.data() + ri * d, b.cols(), d);
    ri += b.cols();
    ro += b.rows();
  }
  Tape* tape = blocks_tape(h_blocks_weights, g);
  if (tape != nullptr) {
    std::vector<Tensor> bv(h_blocks_weights);
    Tensor gv = g;
    std::vector<std::int64_t> parents;
    for (const Tensor& b : bv) if (b.on_tape()) parents.push_back(b.node);
    if (g.on_tape()) parents.push_back(g.node);
    bind_result(out, tape, parents, [bv, gv, d](Tape& tp, std::int64_t self) {
      const std::vector<double>& up = tp.grad_buffer(self);
      std::int64_t ri = 0, ro = 0;
      for (const Tensor& b : bv) {
        auto umap = Eigen::Map<const RowMat>(up.data() + ro * d, b.rows(), d);
        auto gmap = ConstMap(gv.data() + ri * d, b.cols(), d);
        if (b.on_tape()) {
          map_raw_mut(tp.grad_buffer(b.node), b.rows(), b.cols()).noalias() += umap * gmap.transpose();
        }
        if (gv.on_tape()) {
          std::vector<double>& gg = tp.grad_buffer(gv.node);
          Eigen::Map<RowMat>(gg.data() + ri * d, b.cols(), d).noalias() += map2d(b).transpose() * umap;
        }
        ri += b.cols();
        ro += b.rows();
      }
    });
  }
  return out;
}

Tensor custom_grad(Tape& tape, const Tensor& value, const std::vector<Tensor>& parents,
                   std::function<std::vector<std::vector<double>>(const std::vector<double>&)> back) {
  for (const Tensor& p : parents) {
    if (p.on_tape() && p.tape != &tape) {
      throw std::invalid_argument("custom_grad parent bound to a different tape");
    }
  }
  Tensor out = value;
  std::vector<Tensor> pv(parents);
  std::vector<std::int64_t> pids;
  for (const Tensor& p : pv) if (p.on_tape()) pids.push_back(p.node);
  bind_result(out, &tape, pids, [pv, back](Tape& tp, std::int64_t self) {
    const std::vector<double>& g = tp.grad_buffer(self);
    std::vector<std::vector<double>> contribs = back(g);
    if (contribs.size() != pv.size()) {
      throw std::runtime_error("custom_grad backward returned " + std::to_string(contribs.size()) +
                               " gradients for " + std::to_string(pv.size()) + " parents");
    }
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if (!pv[i].on_tape()) continue;
      if (static_cast<std::int64_t>(contribs[i].size()) != pv[i].numel()) {
        throw std::runtime_error("custom_grad backward gradient " + std::to_string(i) + " has " +
                                 std::to_string(contribs[i].size()) + " entries, parent has " +
                                 std::to_string(pv[i].numel()));
      }
      add_into(tp.grad_buffer(pv[i].node), contribs[i]);
    }
  });
  return out;
}

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<std::int64_t>& targets) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy_logits needs rank-2 logits");
  const std::int64_t B = logits.rows(), C = logits.cols();
  if (static_cast<std::int64_t>(targets.size()) != B) {
    throw std::invalid_argument("cross_entropy_logits got " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(B) + " rows");
  }
  if (B == 0) throw std::invalid_argument("cross_entropy_logits on an empty batch");
  for (std::int64_t y : targets) {
    if (y < 0 || y >= C) throw std::invalid_argument("class target " + std::to_string(y) + " out of range [0, " + std::to_string(C) + ")");
  }
  double total = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    double mx = kNegInf;
    for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, logits.at(b, c));
    double lse = 0.0;
    for (std::int64_t c = 0; c < C; ++c) lse += std::exp(logits.at(b, c) - mx);
    lse = mx + std::log(lse);
    total += lse - logits.at(b, targets[static_cast<std::size_t>(b)]);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(B));
  Tape* tape = result_tape({&logits});
  if (tape != nullptr) {
    Tensor lv = logits;
    std::vector<std::int64_t> tv = targets;
    bind_result(out, tape, {logits.node}, [lv, tv, B, C](Tape& tp, std::int64_t self) {
      double g = tp.grad_buffer(self)[0] / static_cast<double>(B);
      std::vector<double>& gl = tp.grad_buffer(lv.node);
      for (std::int64_t b = 0; b < B; ++b) {
        double mx = kNegInf;
        for (std::int64_t c = 0; c < C; ++c) mx = std::max(mx, lv.at(b, c));
        double z = 0.0;
        for (std::int64_t c = 0; c < C; ++c) z += std::exp(lv.at(b, c) - mx);
        for (std::int64_t c = 0; c < C; ++c) {
          double soft = std::exp(lv.at(b, c) - mx) / z;
          gl[static_cast<std::size_t>(b * C + c)] += g * (soft - (tv[static_cast<std::size_t>(b)] == c ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor bce_logits(const Tensor& logits, const std::vector<double>& targets) {
  const std::int64_t B = logits.numel();
  if (B == 0) throw std::invalid_argument("bce_logits on an empty batch");
  if (static_cast<std::int64_t>(targets.size()) != B) {
    throw std::invalid_argument("bce_logits got " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(B) + " logits");
  }
  for (double y : targets) {
    if (y < 0.0 || y > 1.0) throw std::invalid_argument("binary target " + std::to_string(y) + " outside [0, 1]");
  }
  double total = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    double x = logits.at(b), y = targets[static_cast<std::size_t>(b)];
    total += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::fabs(x)));
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(B));
  Tape* tape = result_tape({&logits});
  if (tape != nullptr) {
    Tensor lv = logits;
    std::vector<double> tv = targets;
    bind_result(out, tape, {logits.node}, [lv, tv, B](Tape& tp, std::int64_t self) {
      double g = tp.grad_buffer(self)[0] / static_cast<double>(B);
      std::vector<double>& gl = tp.grad_buffer(lv.node);
      for (std::int64_t b = 0; b < B; ++b) {
        gl[static_cast<std::size_t>(b)] += g * (stable_sigmoid(lv.at(b)) - tv[static_cast<std::size_t>(b)]);
      }
    });
  }
  return out;
}

namespace {

Tensor pointwise_loss(const Tensor& pred, const Tensor& target, bool absolute) {
  if (!same_shape(pred.shape(), target.shape())) {
    throw std::invalid_argument("loss shapes differ: " + shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()));
  }
  const std::int64_t n = pred.numel();
  if (n == 0) throw std::invalid_argument("loss on an empty tensor");
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double d = pred.at(i) - target.at(i);
    total += absolute ? std::fabs(d) : d * d;
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n));
  Tape* tape = result_tape({&pred, &target});
  if (tape != nullptr) {
    Tensor pv = pred, tv = target;
    std::vector<std::int64_t> parents;
    if (pred.on_tape()) parents.push_back(pred.node);
    if (target.on_tape()) parents.push_back(target.node);
    bind_result(out, tape, parents, [pv, tv, n, absolute](Tape& tp, std::int64_t self) {
      double g = tp.grad_buffer(self)[0] / static_cast<double>(n);
      for (std::int64_t i = 0; i < n; ++i) {
        double d = pv.at(i) - tv.at(i);
        double gd = absolute ? (d > 0.0 ? g : (d < 0.0 ? -g : 0.0)) : 2.0 * g * d;
        if (pv.on_tape()) tp.grad_buffer(pv.node)[static_cast<std::size_t>(i)] += gd;
        if (tv.on_tape()) tp.grad_buffer(tv.node)[static_cast<std::size_t>(i)] -= gd;
      }
    });
  }
  return out;
}

}  // namespace

Tensor l1_loss(const Tensor& pred, const Tensor& target) { return pointwise_loss(pred, target, true); }
Tensor l2_loss(const Tensor& pred, const Tensor& target) { return pointwise_loss(pred, target, false); }

double grad_check(const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
                  double eps) {
  if (!(eps > 0.0) || eps > 1e-2) {
    throw std::invalid_argument("grad_check eps must lie in (0, 1e-2], got " + std::to_string(eps));
  }
  Tape tape;
  Tensor xl = tape.leaf(x);
  Tensor y = f(tape, xl);
  if (y.numel() != 1) {
    throw std::invalid_argument("grad_check target must be scalar-valued, got shape " +
                                shape_str(y.shape()));
  }
  // A result that never touched the tape is constant in x: gradient is zero.
  std::vector<double> analytic(static_cast<std::size_t>(x.numel()), 0.0);
  if (y.on_tape()) {
    tape.backward(y);
    analytic = tape.grad(xl);
  }

  double worst = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    Tensor xp_copy(x.shape(), std::vector<double>(x.data(), x.data() + x.numel()));
    Tensor xm_copy(x.shape(), std::vector<double>(x.data(), x.data() + x.numel()));
    xp_copy.mutable_data()[i] += eps;
    xm_copy.mutable_data()[i] -= eps;
    Tape tp, tm;
    double fp = f(tp, tp.leaf(xp_copy)).scalar_value();
    double fm = f(tm, tm.leaf(xm_copy)).scalar_value();
    double fd = (fp - fm) / (2.0 * eps);
    double err = std::fabs(analytic[static_cast<std::size_t>(i)] - fd) / (std::fabs(fd) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace ipr
