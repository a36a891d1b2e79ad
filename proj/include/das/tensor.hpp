#pragma once

// Reverse-mode differentiation on a per-forward-pass tape.
//
// A Tensor is a handle to shape + row-major double storage. Leaves are
// created directly (parameters request gradients); every op goes through a
// Tape, which records one backward closure per produced node. Creation order
// is a topological order, so backward() is a single reverse sweep. A tape is
// consumed by backward() and then discarded.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "das/rng.hpp"

namespace das {

using Shape = std::vector<int>;
using Mask = std::vector<std::uint8_t>;  // 1 = keep, 0 = masked out

inline long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

struct TensorData {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily; same length as value when present
  bool needs_grad = false;   // leaves: requested; nodes: any input needs grad

  void accumulate(const double* g, std::size_t n) {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    for (std::size_t i = 0; i < n; ++i) grad[i] += g[i];
  }
};

class Tape;

class Tensor {
 public:
  Tensor() = default;
  Tensor(std::shared_ptr<TensorData> d, Tape* tape, int node)
      : data_(std::move(d)), tape_(tape), node_(node) {}

  bool valid() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  int rank() const { return static_cast<int>(data_->shape.size()); }
  long long numel() const { return static_cast<long long>(data_->value.size()); }
  bool is_scalar() const { return numel() == 1; }

  std::vector<double>& value() { return data_->value; }
  const std::vector<double>& value() const { return data_->value; }
  double scalar() const { return data_->value[0]; }

  bool has_grad() const { return !data_->grad.empty(); }
  std::vector<double>& grad() { return data_->grad; }
  const std::vector<double>& grad() const { return data_->grad; }
  void zero_grad() { data_->grad.assign(data_->value.size(), 0.0); }
  bool requires_grad() const { return data_->needs_grad; }

  double at(int i) const { return data_->value[static_cast<std::size_t>(i)]; }
  double at(int r, int c) const {
    return data_->value[static_cast<std::size_t>(r) * data_->shape[1] + c];
  }

  std::shared_ptr<TensorData> data_;
  Tape* tape_ = nullptr;  // null for leaves
  int node_ = -1;         // position in the tape
};

inline Tensor make_leaf(Shape shape, std::vector<double> value, bool requires_grad = false) {
  if (shape_numel(shape) != static_cast<long long>(value.size()))
    throw std::invalid_argument("make_leaf: shape " + shape_str(shape) + " does not match " +
                                std::to_string(value.size()) + " values");
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->value = std::move(value);
  d->needs_grad = requires_grad;
  if (requires_grad) d->grad.assign(d->value.size(), 0.0);
  return Tensor(std::move(d), nullptr, -1);
}

inline Tensor zeros(Shape shape, bool requires_grad = false) {
  auto n = shape_numel(shape);
  return make_leaf(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0),
                   requires_grad);
}

inline Tensor scalar_leaf(double v) { return make_leaf({1}, {v}); }

inline Tensor uniform_leaf(Rng& rng, Shape shape, double lo, double hi,
                           bool requires_grad = true) {
  auto n = shape_numel(shape);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return make_leaf(std::move(shape), std::move(v), requires_grad);
}

class Tape {
 public:
  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }
  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  int add_node(std::shared_ptr<TensorData> out, std::function<void()> back) {
    nodes_.push_back(Node{std::move(out), std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse creation order.
  // Gradients accumulate into every leaf that requested them; intermediate
  // buffers are freshly zeroed here. A tape can be consumed only once.
  void backward(const Tensor& loss) {
    if (!loss.is_scalar())
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(loss.shape()));
    if (loss.tape_ != this || loss.node_ < 0)
      throw std::invalid_argument("backward: loss is not a node of this tape");
    if (consumed_) throw std::logic_error("backward: tape already consumed");
    consumed_ = true;
    for (auto& n : nodes_) n.out->grad.assign(n.out->value.size(), 0.0);
    nodes_[static_cast<std::size_t>(loss.node_)].out->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
    nodes_.clear();
  }

 private:
  struct Node {
    std::shared_ptr<TensorData> out;
    std::function<void()> back;
  };
  std::vector<Node> nodes_;
  bool recording_ = true;
  bool consumed_ = false;
};

namespace detail {

inline Tensor emit(Tape& tape, Shape shape, std::vector<double> value, bool any_input_grad,
                   const std::function<std::function<void()>(std::shared_ptr<TensorData>)>&
                       make_back) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->value = std::move(value);
  if (!tape.recording() || !any_input_grad) return Tensor(std::move(d), nullptr, -1);
  d->needs_grad = true;
  int id = tape.add_node(d, make_back(d));
  return Tensor(d, &tape, id);
}

inline bool wants(const Tensor& t) { return t.data_->needs_grad; }

}  // namespace detail

// ---- matrix ops ------------------------------------------------------------

// [m x k] * [k x n] -> [m x n]; a rank-1 right operand is treated as a column,
// giving [m].
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2)
    throw std::invalid_argument("matmul: left operand must be rank 2, got " +
                                shape_str(a.shape()));
  const int m = a.shape()[0], k = a.shape()[1];
  const bool vec = b.rank() == 1;
  const int kb = vec ? b.shape()[0] : (b.rank() == 2 ? b.shape()[0] : -1);
  const int n = vec ? 1 : (b.rank() == 2 ? b.shape()[1] : -1);
  if (n < 0 || kb != k)
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double aip = av[static_cast<std::size_t>(i) * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[static_cast<std::size_t>(p) * n];
      double* orow = &out[static_cast<std::size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  Shape os = vec ? Shape{m} : Shape{m, n};
  auto ad = a.data_, bd = b.data_;
  return detail::emit(tape, std::move(os), std::move(out),
                      detail::wants(a) || detail::wants(b),
                      [ad, bd, m, k, n](std::shared_ptr<TensorData> od) {
                        return [ad, bd, od, m, k, n]() {
                          const auto& g = od->grad;
                          if (ad->needs_grad) {
                            if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
                            for (int i = 0; i < m; ++i)
                              for (int p = 0; p < k; ++p) {
                                double acc = 0.0;
                                for (int j = 0; j < n; ++j)
                                  acc += g[static_cast<std::size_t>(i) * n + j] *
                                         bd->value[static_cast<std::size_t>(p) * n + j];
                                ad->grad[static_cast<std::size_t>(i) * k + p] += acc;
                              }
                          }
                          if (bd->needs_grad) {
                            if (bd->grad.empty()) bd->grad.assign(bd->value.size(), 0.0);
                            for (int p = 0; p < k; ++p)
                              for (int j = 0; j < n; ++j) {
                                double acc = 0.0;
                                for (int i = 0; i < m; ++i)
                                  acc += ad->value[static_cast<std::size_t>(i) * k + p] *
                                         g[static_cast<std::size_t>(i) * n + j];
                                bd->grad[static_cast<std::size_t>(p) * n + j] += acc;
                              }
                          }
                        };
                      });
}

// A * B^T for row-batched scoring: [m x k] * [n x k] -> [m x n].
inline Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1])
    throw std::invalid_argument("matmul_nt: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      const double* ar = &a.value()[static_cast<std::size_t>(i) * k];
      const double* br = &b.value()[static_cast<std::size_t>(j) * k];
      for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
      out[static_cast<std::size_t>(i) * n + j] = acc;
    }
  auto ad = a.data_, bd = b.data_;
  return detail::emit(tape, {m, n}, std::move(out), detail::wants(a) || detail::wants(b),
                      [ad, bd, m, k, n](std::shared_ptr<TensorData> od) {
                        return [ad, bd, od, m, k, n]() {
                          const auto& g = od->grad;
                          if (ad->needs_grad) {
                            if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
                            // dA = G * B
                            for (int i = 0; i < m; ++i)
                              for (int j = 0; j < n; ++j) {
                                const double gij = g[static_cast<std::size_t>(i) * n + j];
                                if (gij == 0.0) continue;
                                for (int p = 0; p < k; ++p)
                                  ad->grad[static_cast<std::size_t>(i) * k + p] +=
                                      gij * bd->value[static_cast<std::size_t>(j) * k + p];
                              }
                          }
                          if (bd->needs_grad) {
                            if (bd->grad.empty()) bd->grad.assign(bd->value.size(), 0.0);
                            // dB = G^T * A
                            for (int j = 0; j < n; ++j)
                              for (int i = 0; i < m; ++i) {
                                const double gij = g[static_cast<std::size_t>(i) * n + j];
                                if (gij == 0.0) continue;
                                for (int p = 0; p < k; ++p)
                                  bd->grad[static_cast<std::size_t>(j) * k + p] +=
                                      gij * ad->value[static_cast<std::size_t>(i) * k + p];
                              }
                          }
                        };
                      });
}

// X^T * w: [n x d], [n] -> [d]. This is the attention-weighted feature sum.
inline Tensor matvec_t(Tape& tape, const Tensor& x, const Tensor& w) {
  if (x.rank() != 2 || w.rank() != 1 || x.shape()[0] != w.shape()[0])
    throw std::invalid_argument("matvec_t: shape mismatch " + shape_str(x.shape()) + " vs " +
                                shape_str(w.shape()));
  const int n = x.shape()[0], d = x.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < n; ++i) {
    const double wi = w.value()[static_cast<std::size_t>(i)];
    if (wi == 0.0) continue;
    const double* xr = &x.value()[static_cast<std::size_t>(i) * d];
    for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(j)] += wi * xr[j];
  }
  auto xd = x.data_, wd = w.data_;
  return detail::emit(tape, {d}, std::move(out), detail::wants(x) || detail::wants(w),
                      [xd, wd, n, d](std::shared_ptr<TensorData> od) {
                        return [xd, wd, od, n, d]() {
                          const auto& g = od->grad;
                          if (xd->needs_grad) {
                            if (xd->grad.empty()) xd->grad.assign(xd->value.size(), 0.0);
                            for (int i = 0; i < n; ++i) {
                              const double wi = wd->value[static_cast<std::size_t>(i)];
                              if (wi == 0.0) continue;
                              for (int j = 0; j < d; ++j)
                                xd->grad[static_cast<std::size_t>(i) * d + j] +=
                                    wi * g[static_cast<std::size_t>(j)];
                            }
                          }
                          if (wd->needs_grad) {
                            if (wd->grad.empty()) wd->grad.assign(wd->value.size(), 0.0);
                            for (int i = 0; i < n; ++i) {
                              double acc = 0.0;
                              for (int j = 0; j < d; ++j)
                                acc += xd->value[static_cast<std::size_t>(i) * d + j] *
                                       g[static_cast<std::size_t>(j)];
                              wd->grad[static_cast<std::size_t>(i)] += acc;
                            }
                          }
                        };
                      });
}

// ---- elementwise -----------------------------------------------------------

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto ad = a.data_, bd = b.data_;
  return detail::emit(tape, a.shape(), std::move(out), detail::wants(a) || detail::wants(b),
                      [ad, bd](std::shared_ptr<TensorData> od) {
                        return [ad, bd, od]() {
                          if (ad->needs_grad) ad->accumulate(od->grad.data(), od->grad.size());
                          if (bd->needs_grad) bd->accumulate(od->grad.data(), od->grad.size());
                        };
                      });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto ad = a.data_, bd = b.data_;
  return detail::emit(tape, a.shape(), std::move(out), detail::wants(a) || detail::wants(b),
                      [ad, bd](std::shared_ptr<TensorData> od) {
                        return [ad, bd, od]() {
                          const auto& g = od->grad;
                          if (ad->needs_grad) {
                            if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              ad->grad[i] += g[i] * bd->value[i];
                          }
                          if (bd->needs_grad) {
                            if (bd->grad.empty()) bd->grad.assign(bd->value.size(), 0.0);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              bd->grad[i] += g[i] * ad->value[i];
                          }
                        };
                      });
}

inline Tensor scale(Tape& tape, const Tensor& a, double c) {
  std::vector<double> out(a.value());
  for (auto& x : out) x *= c;
  auto ad = a.data_;
  return detail::emit(tape, a.shape(), std::move(out), detail::wants(a),
                      [ad, c](std::shared_ptr<TensorData> od) {
                        return [ad, od, c]() {
                          if (!ad->needs_grad) return;
                          if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
                          for (std::size_t i = 0; i < od->grad.size(); ++i)
                            ad->grad[i] += c * od->grad[i];
                        };
                      });
}

inline Tensor sigmoid(Tape& tape, const Tensor& a) {
  std::vector<double> out(a.value());
  for (auto& x : out) x = 1.0 / (1.0 + std::exp(-x));
  auto ad = a.data_;
  return detail::emit(tape, a.shape(), std::move(out), detail::wants(a),
                      [ad](std::shared_ptr<TensorData> od) {
                        return [ad, od]() {
                          if (!ad->needs_grad) return;
                          if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
                          for (std::size_t i = 0; i < od->grad.size(); ++i) {
                            const double y = od->value[i];
                            ad->grad[i] += od->grad[i] * y * (1.0 - y);
                          }
                        };
                      });
}

inline Tensor tanh_op(Tape& tape, const Tensor& a) {
  std::vector<double> out(a.value());
  for (auto& x : out) x = std::tanh(x);
  auto ad = a.data_;
  return detail::emit(tape, a.shape(), std::move(out), detail::wants(a),
                      [ad](std::shared_ptr<TensorData> od) {
                        return [ad, od]() {
                          if (!ad->needs_grad) return;
                          if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
                          for (std::size_t i = 0; i < od->grad.size(); ++i) {
                            const double y = od->value[i];
                            ad->grad[i] += od->grad[i] * (1.0 - y * y);
                          }
                        };
                      });
}

// ---- shape ops -------------------------------------------------------------

// Concatenates rank-1 tensors (axis 0), or rank-2 tensors along axis 0 when
// column counts agree.
inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, int axis = 0) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  if (axis != 0) throw std::invalid_argument("concat: only axis 0 is supported");
  const int r = parts[0].rank();
  std::size_t total = 0;
  int rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != r)
      throw std::invalid_argument("concat: rank mismatch " + shape_str(parts[0].shape()) +
                                  " vs " + shape_str(p.shape()));
    if (r == 2 && p.shape()[1] != parts[0].shape()[1])
      throw std::invalid_argument("concat: column mismatch " + shape_str(parts[0].shape()) +
                                  " vs " + shape_str(p.shape()));
    total += p.value().size();
    rows += p.shape()[0];
  }
  std::vector<double> out;
  out.reserve(total);
  for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
  Shape os = r == 1 ? Shape{static_cast<int>(total)} : Shape{rows, parts[0].shape()[1]};
  bool any = false;
  std::vector<std::shared_ptr<TensorData>> ds;
  ds.reserve(parts.size());
  for (const auto& p : parts) {
    ds.push_back(p.data_);
    any = any || detail::wants(p);
  }
  return detail::emit(tape, std::move(os), std::move(out), any,
                      [ds](std::shared_ptr<TensorData> od) {
                        return [ds, od]() {
                          std::size_t off = 0;
                          for (auto& d : ds) {
                            if (d->needs_grad) d->accumulate(od->grad.data() + off, d->value.size());
                            off += d->value.size();
                          }
                        };
                      });
}

inline Tensor slice(Tape& tape, const Tensor& a, int begin, int end) {
  if (a.rank() != 1) throw std::invalid_argument("slice: rank-1 input required");
  if (begin < 0 || end > a.shape()[0] || begin >= end)
    throw std::invalid_argument("slice: bad range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") for " + shape_str(a.shape()));
  std::vector<double> out(a.value().begin() + begin, a.value().begin() + end);
  auto ad = a.data_;
  return detail::emit(tape, {end - begin}, std::move(out), detail::wants(a),
                      [ad, begin](std::shared_ptr<TensorData> od) {
                        return [ad, od, begin]() {
                          if (!ad->needs_grad) return;
                          if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
                          for (std::size_t i = 0; i < od->grad.size(); ++i)
                            ad->grad[static_cast<std::size_t>(begin) + i] += od->grad[i];
                        };
                      });
}

// Stacks rank-1 tensors of equal length into an [n x w] matrix.
inline Tensor stack_rows(Tape& tape, const std::vector<Tensor>& rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no inputs");
  const int w = rows[0].shape()[0];
  for (const auto& r : rows) {
    if (r.rank() != 1 || r.shape()[0] != w)
      throw std::invalid_argument("stack_rows: shape mismatch " + shape_str(rows[0].shape()) +
                                  " vs " + shape_str(r.shape()));
  }
  std::vector<double> out;
  out.reserve(rows.size() * static_cast<std::size_t>(w));
  bool any = false;
  std::vector<std::shared_ptr<TensorData>> ds;
  ds.reserve(rows.size());
  for (const auto& r : rows) {
    out.insert(out.end(), r.value().begin(), r.value().end());
    ds.push_back(r.data_);
    any = any || detail::wants(r);
  }
  return detail::emit(tape, {static_cast<int>(rows.size()), w}, std::move(out), any,
                      [ds, w](std::shared_ptr<TensorData> od) {
                        return [ds, od, w]() {
                          for (std::size_t i = 0; i < ds.size(); ++i)
                            if (ds[i]->needs_grad)
                              ds[i]->accumulate(od->grad.data() + i * static_cast<std::size_t>(w),
                                                static_cast<std::size_t>(w));
                        };
                      });
}

inline Tensor repeat_rows(Tape& tape, const Tensor& v, int n) {
  if (v.rank() != 1) throw std::invalid_argument("repeat_rows: rank-1 input required");
  const int w = v.shape()[0];
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n) * w);
  for (int i = 0; i < n; ++i) out.insert(out.end(), v.value().begin(), v.value().end());
  auto vd = v.data_;
  return detail::emit(tape, {n, w}, std::move(out), detail::wants(v),
                      [vd, n, w](std::shared_ptr<TensorData> od) {
                        return [vd, od, n, w]() {
                          if (!vd->needs_grad) return;
                          if (vd->grad.empty()) vd->grad.assign(vd->value.size(), 0.0);
                          for (int i = 0; i < n; ++i)
                            for (int j = 0; j < w; ++j)
                              vd->grad[static_cast<std::size_t>(j)] +=
                                  od->grad[static_cast<std::size_t>(i) * w + j];
                        };
                      });
}

inline Tensor reshape(Tape& tape, const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  std::vector<double> out(a.value());
  auto ad = a.data_;
  return detail::emit(tape, std::move(shape), std::move(out), detail::wants(a),
                      [ad](std::shared_ptr<TensorData> od) {
                        return [ad, od]() {
                          if (ad->needs_grad) ad->accumulate(od->grad.data(), od->grad.size());
                        };
                      });
}

// Adds a row vector to every row of a matrix: [n x w] + [w].
inline Tensor add_rows(Tape& tape, const Tensor& m, const Tensor& b) {
  if (m.rank() != 2 || b.rank() != 1 || m.shape()[1] != b.shape()[0])
    throw std::invalid_argument("add_rows: shape mismatch " + shape_str(m.shape()) + " vs " +
                                shape_str(b.shape()));
  const int n = m.shape()[0], w = m.shape()[1];
  std::vector<double> out(m.value());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < w; ++j) out[static_cast<std::size_t>(i) * w + j] += b.value()[static_cast<std::size_t>(j)];
  auto md = m.data_, bd = b.data_;
  return detail::emit(tape, m.shape(), std::move(out), detail::wants(m) || detail::wants(b),
                      [md, bd, n, w](std::shared_ptr<TensorData> od) {
                        return [md, bd, od, n, w]() {
                          if (md->needs_grad) md->accumulate(od->grad.data(), od->grad.size());
                          if (bd->needs_grad) {
                            if (bd->grad.empty()) bd->grad.assign(bd->value.size(), 0.0);
                            for (int i = 0; i < n; ++i)
                              for (int j = 0; j < w; ++j)
                                bd->grad[static_cast<std::size_t>(j)] +=
                                    od->grad[static_cast<std::size_t>(i) * w + j];
                          }
                        };
                      });
}

// ---- reductions ------------------------------------------------------------

inline Tensor sum(Tape& tape, const Tensor& a) {
  double s = std::accumulate(a.value().begin(), a.value().end(), 0.0);
  auto ad = a.data_;
  return detail::emit(tape, {1}, {s}, detail::wants(a),
                      [ad](std::shared_ptr<TensorData> od) {
                        return [ad, od]() {
                          if (!ad->needs_grad) return;
                          if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
                          for (auto& g : ad->grad) g += od->grad[0];
                        };
                      });
}

// Elementwise sum of a list of same-shaped tensors.
inline Tensor add_n(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("add_n: no inputs");
  for (const auto& p : parts) detail::require_same_shape("add_n", parts[0], p);
  std::vector<double> out(parts[0].value().size(), 0.0);
  bool any = false;
  std::vector<std::shared_ptr<TensorData>> ds;
  ds.reserve(parts.size());
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.value()[i];
    ds.push_back(p.data_);
    any = any || detail::wants(p);
  }
  return detail::emit(tape, parts[0].shape(), std::move(out), any,
                      [ds](std::shared_ptr<TensorData> od) {
                        return [ds, od]() {
                          for (auto& d : ds)
                            if (d->needs_grad) d->accumulate(od->grad.data(), od->grad.size());
                        };
                      });
}

// ---- softmax family --------------------------------------------------------

// Max-stabilized softmax over a rank-1 tensor. Masked positions are exactly 0
// in the output and receive no gradient.
inline Tensor softmax(Tape& tape, const Tensor& x, const Mask* mask = nullptr) {
  if (x.rank() != 1) throw std::invalid_argument("softmax: rank-1 input required");
  const int n = x.shape()[0];
  if (mask && static_cast<int>(mask->size()) != n)
    throw std::invalid_argument("softmax: mask length mismatch");
  double mx = -std::numeric_limits<double>::infinity();
  int live = 0;
  for (int i = 0; i < n; ++i) {
    if (mask && !(*mask)[static_cast<std::size_t>(i)]) continue;
    mx = std::max(mx, x.value()[static_cast<std::size_t>(i)]);
    ++live;
  }
  if (live == 0) throw std::invalid_argument("softmax: all positions masked");
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    if (mask && !(*mask)[static_cast<std::size_t>(i)]) continue;
    out[static_cast<std::size_t>(i)] = std::exp(x.value()[static_cast<std::size_t>(i)] - mx);
    z += out[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] /= z;
  auto xd = x.data_;
  Mask mcopy = mask ? *mask : Mask();
  return detail::emit(tape, {n}, std::move(out), detail::wants(x),
                      [xd, mcopy](std::shared_ptr<TensorData> od) {
                        return [xd, od, mcopy]() {
                          if (!xd->needs_grad) return;
                          if (xd->grad.empty()) xd->grad.assign(xd->value.size(), 0.0);
                          double dot = 0.0;
                          for (std::size_t i = 0; i < od->grad.size(); ++i)
                            dot += od->grad[i] * od->value[i];
                          for (std::size_t i = 0; i < od->grad.size(); ++i) {
                            if (!mcopy.empty() && !mcopy[i]) continue;
                            xd->grad[i] += od->value[i] * (od->grad[i] - dot);
                          }
                        };
                      });
}

inline Tensor log_softmax(Tape& tape, const Tensor& x) {
  if (x.rank() != 1) throw std::invalid_argument("log_softmax: rank-1 input required");
  const int n = x.shape()[0];
  double mx = *std::max_element(x.value().begin(), x.value().end());
  double z = 0.0;
  for (double v : x.value()) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(x.value());
  for (auto& v : out) v -= lse;
  auto xd = x.data_;
  return detail::emit(tape, {n}, std::move(out), detail::wants(x),
                      [xd](std::shared_ptr<TensorData> od) {
                        return [xd, od]() {
                          if (!xd->needs_grad) return;
                          if (xd->grad.empty()) xd->grad.assign(xd->value.size(), 0.0);
                          double gsum = 0.0;
                          for (double g : od->grad) gsum += g;
                          for (std::size_t i = 0; i < od->grad.size(); ++i)
                            xd->grad[i] += od->grad[i] - std::exp(od->value[i]) * gsum;
                        };
                      });
}

// ---- misc fused ops --------------------------------------------------------

// Row lookup into an embedding matrix; the gradient lands only in that row.
inline Tensor embed(Tape& tape, const Tensor& table, int id) {
  if (table.rank() != 2)
    throw std::invalid_argument("embed: table must be rank 2, got " + shape_str(table.shape()));
  const int nv = table.shape()[0], e = table.shape()[1];
  if (id < 0 || id >= nv)
    throw std::out_of_range("embed: id " + std::to_string(id) + " out of range [0, " +
                            std::to_string(nv) + ")");
  std::vector<double> out(table.value().begin() + static_cast<std::size_t>(id) * e,
                          table.value().begin() + static_cast<std::size_t>(id + 1) * e);
  auto td = table.data_;
  return detail::emit(tape, {e}, std::move(out), detail::wants(table),
                      [td, id, e](std::shared_ptr<TensorData> od) {
                        return [td, od, id, e]() {
                          if (!td->needs_grad) return;
                          if (td->grad.empty()) td->grad.assign(td->value.size(), 0.0);
                          for (int j = 0; j < e; ++j)
                            td->grad[static_cast<std::size_t>(id) * e + j] += od->grad[static_cast<std::size_t>(j)];
                        };
                      });
}

// Inverted dropout: kept entries are scaled by 1/keep so the expectation is
// unchanged; the sampled mask is reused in the backward pass.
inline Tensor dropout(Tape& tape, const Tensor& a, double keep, Rng& rng) {
  if (keep <= 0.0 || keep > 1.0) throw std::invalid_argument("dropout: keep must be in (0, 1]");
  std::vector<double> mask(a.value().size());
  for (auto& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
  std::vector<double> out(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  auto ad = a.data_;
  return detail::emit(tape, a.shape(), std::move(out), detail::wants(a),
                      [ad, mask](std::shared_ptr<TensorData> od) {
                        return [ad, od, mask]() {
                          if (!ad->needs_grad) return;
                          if (ad->grad.empty()) ad->grad.assign(ad->value.size(), 0.0);
                          for (std::size_t i = 0; i < od->grad.size(); ++i)
                            ad->grad[i] += od->grad[i] * mask[i];
                        };
                      });
}

// Mean binary cross-entropy between sigmoid(logits) and 0/1 targets,
// numerically stable form; targets are constants.
inline Tensor bce_with_logits_mean(Tape& tape, const Tensor& logits,
                                   const std::vector<double>& targets) {
  if (logits.rank() != 1 || logits.value().size() != targets.size())
    throw std::invalid_argument("bce_with_logits_mean: logits " + shape_str(logits.shape()) +
                                " vs " + std::to_string(targets.size()) + " targets");
  const std::size_t n = targets.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = logits.value()[i];
    loss += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(n);
  auto ld = logits.data_;
  return detail::emit(tape, {1}, {loss}, detail::wants(logits),
                      [ld, targets, n](std::shared_ptr<TensorData> od) {
                        return [ld, od, targets, n]() {
                          if (!ld->needs_grad) return;
                          if (ld->grad.empty()) ld->grad.assign(ld->value.size(), 0.0);
                          const double g = od->grad[0] / static_cast<double>(n);
                          for (std::size_t i = 0; i < n; ++i) {
                            const double s = 1.0 / (1.0 + std::exp(-ld->value[i]));
                            ld->grad[i] += g * (s - targets[i]);
                          }
                        };
                      });
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.value())
    if (!std::isfinite(v)) return false;
  return true;
}

// ---- gradient checking -------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tol = 0.0;
  bool pass = true;

  std::string summary() const {
    std::ostringstream os;
    for (const auto& e : entries)
      os << (e.pass ? "  ok   " : "  FAIL ") << e.name << "  max_rel_err=" << e.max_rel_err
         << "\n";
    os << (pass ? "gradcheck passed" : "gradcheck FAILED") << " (tol=" << tol << ")\n";
    return os.str();
  }
};

// Compares backprop gradients of a deterministic scalar function against
// central finite differences, parameter tensor by parameter tensor.
// Relative error: |g_bp - g_fd| / max(|g_bp|, |g_fd|, 1e-8).
template <typename F>
GradCheckReport gradcheck(F&& f, const std::vector<std::pair<std::string, Tensor>>& params,
                          double h = 1e-5, double tol = 1e-6) {
  for (const auto& [name, p] : params) {
    (void)name;
    const_cast<Tensor&>(p).zero_grad();
  }
  std::vector<std::vector<double>> bp;
  {
    Tape tape;
    Tensor loss = f(tape);
    tape.backward(loss);
  }
  bp.reserve(params.size());
  for (const auto& [name, p] : params) {
    (void)name;
    bp.push_back(p.grad().empty() ? std::vector<double>(p.value().size(), 0.0) : p.grad());
  }

  GradCheckReport report;
  report.tol = tol;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& entry = report.entries.emplace_back();
    entry.name = params[pi].first;
    auto& vals = const_cast<Tensor&>(params[pi].second).value();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      Tape tp;
      tp.set_recording(false);
      const double fp = f(tp).scalar();
      vals[i] = orig - h;
      Tape tm;
      tm.set_recording(false);
      const double fm = f(tm).scalar();
      vals[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double g = bp[pi][i];
      const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-8});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    entry.pass = entry.max_rel_err <= tol;
    report.pass = report.pass && entry.pass;
  }
  return report;
}

}  // namespace das
