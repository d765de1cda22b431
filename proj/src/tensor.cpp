#include "pfem/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace pfem::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MutMap as_matrix(Tensor& t) {
  return MutMap(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void shape_fail(const std::string& op, const Tensor& a, const Tensor* b = nullptr,
                             const std::string& detail = {}) {
  std::ostringstream os;
  os << op << ": incompatible shapes " << shape_string(a.shape());
  if (b != nullptr) os << " and " << shape_string(b->shape());
  if (!detail.empty()) os << " (" << detail << ")";
  throw ShapeError(os.str());
}

enum class Broadcast { Same, Row, Col, Scalar };

Broadcast broadcast_kind(const std::string& op, const Tensor& a, const Tensor& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::Same;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::Scalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::Row;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::Col;
  shape_fail(op, a, &b);
}

inline std::size_t bindex(Broadcast k, std::size_t r, std::size_t c, std::size_t cols_b) {
  switch (k) {
    case Broadcast::Same: return r * cols_b + c;
    case Broadcast::Row: return c;
    case Broadcast::Col: return r;
    case Broadcast::Scalar: return 0;
  }
  return 0;
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw std::logic_error("variable is not attached to a tape");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("variables belong to different tapes");
  return tape_of(a);
}

// Accumulates `g` (shaped like the broadcast result) into the gradient of `id`.
void accumulate_broadcast(Tape& t, std::size_t id, Broadcast k, const Tensor& g) {
  Tensor& gb = t.grad(id);
  const std::size_t rows = g.rows(), cols = g.cols();
  if (k == Broadcast::Same) {
    for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] += g.data()[i];
    return;
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) gb.data()[bindex(k, r, c, gb.cols())] += g(r, c);
}

const double kInvSqrt2 = 1.0 / std::numbers::sqrt2;
const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.empty() || shape_.size() > 2) throw ShapeError("tensor rank must be 1 or 2, got " + shape_string(shape_));
  std::size_t n = 1;
  for (auto e : shape_) {
    if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_string(shape_));
    n *= e;
  }
  if (n != data_.size())
    throw ShapeError("tensor " + shape_string(shape_) + " needs " + std::to_string(n) + " values, got " +
                     std::to_string(data_.size()));
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) { return filled(rows, cols, 0.0); }

Tensor Tensor::filled(std::size_t rows, std::size_t cols, double value) {
  return Tensor({rows, cols}, std::vector<double>(rows * cols, value));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(shape_));
  return data_[0];
}

// ---------------------------------------------------------------------------
// ParamStore

ParamStore::ParamStore(std::uint64_t seed) : seed_(seed) {}

std::size_t ParamStore::add(const std::string& name, Shape shape, Init init, std::size_t fan_in) {
  if (by_name_.contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  if (shape.empty() || n == 0) throw ShapeError("parameter " + name + " has empty shape");

  ParamInfo info{name, std::move(shape), flat_.size(), n};
  flat_.resize(flat_.size() + n, 0.0);
  auto values = std::span<double>(flat_).subspan(info.offset, n);
  switch (init) {
    case Init::Ones: std::fill(values.begin(), values.end(), 1.0); break;
    case Init::Zeros: break;
    case Init::FanInUniform: {
      // One engine per parameter keeps values independent of insertion of later params.
      std::mt19937_64 rng(seed_ * 0x9E3779B97F4A7C15ULL + (++draws_));
      const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : values) v = dist(rng);
      break;
    }
  }
  by_name_[info.name] = params_.size();
  params_.push_back(std::move(info));
  return params_.size() - 1;
}

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const std::string& ParamStore::owner_of(std::size_t flat_index) const {
  for (const auto& p : params_)
    if (flat_index >= p.offset && flat_index < p.offset + p.size) return p.name;
  throw std::out_of_range("flat index outside parameter store");
}

Tensor ParamStore::tensor(std::size_t index) const {
  const auto& p = params_.at(index);
  Shape shape = p.shape.size() == 1 ? Shape{1, p.shape[0]} : p.shape;
  return Tensor(shape, std::vector<double>(flat_.begin() + static_cast<std::ptrdiff_t>(p.offset),
                                           flat_.begin() + static_cast<std::ptrdiff_t>(p.offset + p.size)));
}

std::span<double> ParamStore::values(std::size_t index) {
  const auto& p = params_.at(index);
  return std::span<double>(flat_).subspan(p.offset, p.size);
}

std::span<const double> ParamStore::values(std::size_t index) const {
  const auto& p = params_.at(index);
  return std::span<const double>(flat_).subspan(p.offset, p.size);
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{"constant", std::move(value), {}, nullptr, false, std::nullopt});
  grads_.emplace_back();
  return Var{this, nodes_.size() - 1};
}

Var Tape::parameter(const ParamStore& store, std::size_t index) {
  nodes_.push_back(Node{"parameter:" + store.info(index).name, store.tensor(index), {}, nullptr, true,
                        store.info(index).offset});
  grads_.emplace_back();
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(std::string op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  bool needs = false;
  for (auto in : inputs) {
    if (in >= nodes_.size()) throw std::logic_error(op + ": input recorded after output");
    needs = needs || nodes_[in].requires_grad;
  }
  nodes_.push_back(Node{std::move(op), std::move(value), std::move(inputs), std::move(backward), needs, std::nullopt});
  grads_.emplace_back();
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad(std::size_t id) {
  Tensor& g = grads_.at(id);
  if (g.empty()) g = Tensor::zeros(nodes_[id].value.rows(), nodes_[id].value.cols());
  return g;
}

std::vector<double> Tape::backward(Var loss, std::size_t flat_size) {
  const Tensor& v = value(loss.id);
  if (v.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_string(v.shape()));
  return backward(loss, Tensor::scalar(1.0), flat_size);
}

std::vector<double> Tape::backward(Var output, const Tensor& seed, std::size_t flat_size) {
  if (output.tape != this) throw std::logic_error("backward: variable from another tape");
  const Tensor& v = value(output.id);
  if (seed.rows() != v.rows() || seed.cols() != v.cols())
    throw ShapeError("backward: seed " + shape_string(seed.shape()) + " does not match output " +
                     shape_string(v.shape()));
  for (auto& g : grads_) g = Tensor();
  Tensor& g = grad(output.id);
  g.data() = seed.data();
  return sweep(output.id, flat_size);
}

std::vector<double> Tape::sweep(std::size_t output, std::size_t flat_size) {
  std::vector<double> flat(flat_size, 0.0);
  for (std::size_t i = output + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || grads_[i].empty()) continue;
    if (n.param_offset) {
      const Tensor& g = grads_[i];
      if (*n.param_offset + g.size() > flat_size) throw std::out_of_range("backward: parameter outside flat range");
      for (std::size_t k = 0; k < g.size(); ++k) flat[*n.param_offset + k] += g.data()[k];
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
  return flat;
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) shape_fail("matmul", A, &B, "inner dimensions differ");
  Tensor C = Tensor::zeros(A.rows(), B.cols());
  as_matrix(C).noalias() = as_matrix(A) * as_matrix(B);
  const std::size_t ia = a.id, ib = b.id;
  return t.record("matmul", std::move(C), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    if (tp.requires_grad(ia)) as_matrix(tp.grad(ia)).noalias() += as_matrix(G) * as_matrix(tp.value(ib)).transpose();
    if (tp.requires_grad(ib)) as_matrix(tp.grad(ib)).noalias() += as_matrix(tp.value(ia)).transpose() * as_matrix(G);
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const Broadcast k = broadcast_kind("add", A, B);
  Tensor C = A;
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) C(r, c) += B.data()[bindex(k, r, c, B.cols())];
  const std::size_t ia = a.id, ib = b.id;
  return t.record("add", std::move(C), {ia, ib}, [ia, ib, k](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    if (tp.requires_grad(ia)) accumulate_broadcast(tp, ia, Broadcast::Same, G);
    if (tp.requires_grad(ib)) accumulate_broadcast(tp, ib, k, G);
  });
}

Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const Broadcast k = broadcast_kind("mul", A, B);
  Tensor C = A;
  for (std::size_t r = 0; r < A.rows(); ++r)
    for (std::size_t c = 0; c < A.cols(); ++c) C(r, c) *= B.data()[bindex(k, r, c, B.cols())];
  const std::size_t ia = a.id, ib = b.id;
  return t.record("mul", std::move(C), {ia, ib}, [ia, ib, k](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    const Tensor& A = tp.value(ia);
    const Tensor& B = tp.value(ib);
    if (tp.requires_grad(ia)) {
      Tensor& GA = tp.grad(ia);
      for (std::size_t r = 0; r < G.rows(); ++r)
        for (std::size_t c = 0; c < G.cols(); ++c) GA(r, c) += G(r, c) * B.data()[bindex(k, r, c, B.cols())];
    }
    if (tp.requires_grad(ib)) {
      Tensor GB = G;
      for (std::size_t i = 0; i < GB.size(); ++i) GB.data()[i] *= A.data()[i];
      accumulate_broadcast(tp, ib, k, GB);
    }
  });
}

Var gelu(Var x) {
  Tape& t = tape_of(x);
  Tensor Y = x.value();
  for (auto& v : Y.data()) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  const std::size_t ix = x.id;
  return t.record("gelu", std::move(Y), {ix}, [ix](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    const Tensor& X = tp.value(ix);
    Tensor& GX = tp.grad(ix);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double v = X.data()[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      GX.data()[i] += G.data()[i] * (cdf + v * pdf);
    }
  });
}

Var relu(Var x) {
  Tape& t = tape_of(x);
  Tensor Y = x.value();
  for (auto& v : Y.data()) v = v > 0.0 ? v : 0.0;
  const std::size_t ix = x.id;
  return t.record("relu", std::move(Y), {ix}, [ix](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    const Tensor& X = tp.value(ix);
    Tensor& GX = tp.grad(ix);
    for (std::size_t i = 0; i < X.size(); ++i)
      if (X.data()[i] > 0.0) GX.data()[i] += G.data()[i];
  });
}

Var softmax_lastdim(Var x) {
  Tape& t = tape_of(x);
  Tensor Y = x.value();
  const std::size_t rows = Y.rows(), cols = Y.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = Y.ptr() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) row[c] /= s;
  }
  const std::size_t ix = x.id;
  return t.record("softmax_lastdim", std::move(Y), {ix}, [ix](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    const Tensor& Y = tp.value(self);
    Tensor& GX = tp.grad(ix);
    const std::size_t cols = Y.cols();
    for (std::size_t r = 0; r < Y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += G(r, c) * Y(r, c);
      for (std::size_t c = 0; c < cols; ++c) GX(r, c) += Y(r, c) * (G(r, c) - dot);
    }
  });
}

Var layernorm_lastdim(Var x, double eps) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  const std::size_t rows = X.rows(), cols = X.cols();
  Tensor Y = X;
  Tensor inv_std = Tensor::zeros(rows, 1);
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += X(r, c);
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (X(r, c) - mu) * (X(r, c) - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(r, 0) = is;
    for (std::size_t c = 0; c < cols; ++c) Y(r, c) = (X(r, c) - mu) * is;
  }
  const std::size_t ix = x.id;
  return t.record("layernorm_lastdim", std::move(Y), {ix},
                  [ix, inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
                    const Tensor& G = tp.grad(self);
                    const Tensor& Y = tp.value(self);
                    Tensor& GX = tp.grad(ix);
                    const std::size_t cols = Y.cols();
                    const double n = static_cast<double>(cols);
                    for (std::size_t r = 0; r < Y.rows(); ++r) {
                      double gm = 0.0, gy = 0.0;
                      for (std::size_t c = 0; c < cols; ++c) {
                        gm += G(r, c);
                        gy += G(r, c) * Y(r, c);
                      }
                      gm /= n;
                      gy /= n;
                      for (std::size_t c = 0; c < cols; ++c)
                        GX(r, c) += inv_std(r, 0) * (G(r, c) - gm - Y(r, c) * gy);
                    }
                  });
}

Var transpose(Var x) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  Tensor Y = Tensor::zeros(X.cols(), X.rows());
  as_matrix(Y) = as_matrix(X).transpose();
  const std::size_t ix = x.id;
  return t.record("transpose", std::move(Y), {ix}, [ix](Tape& tp, std::size_t self) {
    as_matrix(tp.grad(ix)) += as_matrix(tp.grad(self)).transpose();
  });
}

Var scale(Var x, double factor) {
  Tape& t = tape_of(x);
  Tensor Y = x.value();
  for (auto& v : Y.data()) v *= factor;
  const std::size_t ix = x.id;
  return t.record("scale", std::move(Y), {ix}, [ix, factor](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    Tensor& GX = tp.grad(ix);
    for (std::size_t i = 0; i < G.size(); ++i) GX.data()[i] += factor * G.data()[i];
  });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const std::size_t ix = x.id;
  return t.record("sum", Tensor::scalar(s), {ix}, [ix](Tape& tp, std::size_t self) {
    const double g = tp.grad(self).item();
    for (auto& v : tp.grad(ix).data()) v += g;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  if (begin >= end || end > X.rows()) shape_fail("slice_rows", X, nullptr, "rows [" + std::to_string(begin) + "," + std::to_string(end) + ")");
  const std::size_t cols = X.cols();
  Tensor Y({end - begin, cols}, std::vector<double>(X.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                                                    X.data().begin() + static_cast<std::ptrdiff_t>(end * cols)));
  const std::size_t ix = x.id;
  return t.record("slice_rows", std::move(Y), {ix}, [ix, begin, cols](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    Tensor& GX = tp.grad(ix);
    for (std::size_t i = 0; i < G.size(); ++i) GX.data()[begin * cols + i] += G.data()[i];
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  if (begin >= end || end > X.cols()) shape_fail("slice_cols", X, nullptr, "cols [" + std::to_string(begin) + "," + std::to_string(end) + ")");
  Tensor Y = Tensor::zeros(X.rows(), end - begin);
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t c = begin; c < end; ++c) Y(r, c - begin) = X(r, c);
  const std::size_t ix = x.id;
  return t.record("slice_cols", std::move(Y), {ix}, [ix, begin](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    Tensor& GX = tp.grad(ix);
    for (std::size_t r = 0; r < G.rows(); ++r)
      for (std::size_t c = 0; c < G.cols(); ++c) GX(r, begin + c) += G(r, c);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids, offsets;
  for (const Var& p : parts) {
    tape_of(parts[0], p);
    if (p.value().rows() != rows) shape_fail("concat_cols", parts[0].value(), &p.value(), "row counts differ");
    ids.push_back(p.id);
    offsets.push_back(cols);
    cols += p.value().cols();
  }
  Tensor Y = Tensor::zeros(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < P.cols(); ++c) Y(r, offsets[k] + c) = P(r, c);
  }
  return t.record("concat_cols", std::move(Y), ids, [ids, offsets](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      Tensor& GP = tp.grad(ids[k]);
      for (std::size_t r = 0; r < GP.rows(); ++r)
        for (std::size_t c = 0; c < GP.cols(); ++c) GP(r, c) += G(r, offsets[k] + c);
    }
  });
}

Var sum_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  Tensor Y = Tensor::zeros(1, X.cols());
  for (std::size_t r = 0; r < X.rows(); ++r)
    for (std::size_t c = 0; c < X.cols(); ++c) Y(0, c) += X(r, c);
  const std::size_t ix = x.id;
  return t.record("sum_rows", std::move(Y), {ix}, [ix](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    Tensor& GX = tp.grad(ix);
    for (std::size_t r = 0; r < GX.rows(); ++r)
      for (std::size_t c = 0; c < GX.cols(); ++c) GX(r, c) += G(0, c);
  });
}

Var reciprocal(Var x) {
  Tape& t = tape_of(x);
  Tensor Y = x.value();
  for (auto& v : Y.data()) v = 1.0 / v;
  const std::size_t ix = x.id;
  return t.record("reciprocal", std::move(Y), {ix}, [ix](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    const Tensor& Y = tp.value(self);
    Tensor& GX = tp.grad(ix);
    for (std::size_t i = 0; i < G.size(); ++i) GX.data()[i] -= G.data()[i] * Y.data()[i] * Y.data()[i];
  });
}

Var permute_rows(Var x, std::vector<std::size_t> perm) {
  Tape& t = tape_of(x);
  const Tensor& X = x.value();
  if (perm.size() != X.rows()) shape_fail("permute_rows", X, nullptr, "permutation of length " + std::to_string(perm.size()));
  const std::size_t cols = X.cols();
  Tensor Y = Tensor::zeros(X.rows(), cols);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= X.rows()) throw std::out_of_range("permute_rows: index out of range");
    std::copy_n(X.ptr() + perm[i] * cols, cols, Y.ptr() + i * cols);
  }
  const std::size_t ix = x.id;
  return t.record("permute_rows", std::move(Y), {ix}, [ix, perm = std::move(perm)](Tape& tp, std::size_t self) {
    const Tensor& G = tp.grad(self);
    Tensor& GX = tp.grad(ix);
    const std::size_t cols = G.cols();
    for (std::size_t i = 0; i < perm.size(); ++i)
      for (std::size_t c = 0; c < cols; ++c) GX(perm[i], c) += G(i, c);
  });
}

Var linear(Var x, Var weight, Var bias) { return add(matmul(x, weight), bias); }

Var primitive_forward(OpKind kind, std::span<const Var> inputs, const OpArgs& args) {
  auto need = [&](std::size_t n, const char* name) {
    if (inputs.size() != n)
      throw ShapeError(std::string(name) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
  };
  switch (kind) {
    case OpKind::Matmul: need(2, "matmul"); return matmul(inputs[0], inputs[1]);
    case OpKind::Add: need(2, "add"); return add(inputs[0], inputs[1]);
    case OpKind::Mul: need(2, "mul"); return mul(inputs[0], inputs[1]);
    case OpKind::Gelu: need(1, "gelu"); return gelu(inputs[0]);
    case OpKind::Relu: need(1, "relu"); return relu(inputs[0]);
    case OpKind::SoftmaxLastdim: need(1, "softmax_lastdim"); return softmax_lastdim(inputs[0]);
    case OpKind::LayernormLastdim: need(1, "layernorm_lastdim"); return layernorm_lastdim(inputs[0], args.eps);
    case OpKind::Transpose: need(1, "transpose"); return transpose(inputs[0]);
    case OpKind::Scale: need(1, "scale"); return scale(inputs[0], args.factor);
    case OpKind::Sum: need(1, "sum"); return sum(inputs[0]);
    case OpKind::Mean: need(1, "mean"); return mean(inputs[0]);
    case OpKind::SliceRows: need(1, "slice_rows"); return slice_rows(inputs[0], args.begin, args.end);
  }
  throw std::invalid_argument("unknown op kind");
}

// ---------------------------------------------------------------------------
// Adam

AdamState AdamState::fresh(std::size_t n, double lr) {
  AdamState s;
  s.m.assign(n, 0.0);
  s.v.assign(n, 0.0);
  s.lr = lr;
  return s;
}

void adam_step(ParamStore& params, std::span<const double> grads, AdamState& state,
               std::optional<double> lr_override) {
  auto& theta = params.flat();
  if (grads.size() != theta.size())
    throw ShapeError("adam_step: gradient length " + std::to_string(grads.size()) + " != parameter length " +
                     std::to_string(theta.size()));
  if (state.m.size() != theta.size() || state.v.size() != theta.size())
    throw ShapeError("adam_step: optimizer state does not match parameters");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!std::isfinite(grads[i]))
      throw std::domain_error("adam_step: non-finite gradient in parameter " + params.owner_of(i));

  const std::uint64_t t = ++state.step;
  const double lr = lr_override.value_or(state.lr);
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    theta[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

}  // namespace pfem::ad
