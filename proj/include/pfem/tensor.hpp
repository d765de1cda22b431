#pragma once

// Dense float64 tensors with a define-by-run reverse-mode tape, a flat
// parameter store and the Adam optimizer.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pfem::ad {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

// Row-major tensor of rank 1 or 2. Rank-1 tensors behave as a single row.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor filled(std::size_t rows, std::size_t cols, double value);
  static Tensor scalar(double value) { return filled(1, 1, value); }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Parameters

enum class Init { FanInUniform, Ones, Zeros };

struct ParamInfo {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Named parameter tensors backed by one contiguous vector.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0);

  // Adds a parameter; FanInUniform draws from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  std::size_t add(const std::string& name, Shape shape, Init init, std::size_t fan_in = 1);

  std::size_t count() const { return params_.size(); }
  std::size_t flat_size() const { return flat_.size(); }
  const ParamInfo& info(std::size_t index) const { return params_.at(index); }
  const std::vector<ParamInfo>& infos() const { return params_; }
  std::size_t index_of(const std::string& name) const;
  // Name of the parameter owning a flat index.
  const std::string& owner_of(std::size_t flat_index) const;

  Tensor tensor(std::size_t index) const;
  std::span<double> values(std::size_t index);
  std::span<const double> values(std::size_t index) const;

  std::vector<double>& flat() { return flat_; }
  const std::vector<double>& flat() const { return flat_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::vector<ParamInfo> params_;
  std::map<std::string, std::size_t> by_name_;
  std::vector<double> flat_;
  std::uint64_t seed_;
  std::uint64_t draws_ = 0;
};

// ---------------------------------------------------------------------------
// Tape

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf bound to a parameter tensor; its gradient lands in the flat gradient vector.
  Var parameter(const ParamStore& store, std::size_t index);

  // Records an op output. `backward` reads grad(self) and accumulates into inputs.
  Var record(std::string op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node during the backward pass (allocated on demand).
  Tensor& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return !grads_.at(id).empty(); }

  // Reverse sweep from a scalar loss. Returns gradients in flat-parameter layout;
  // parameters not reachable from the loss get zero.
  std::vector<double> backward(Var loss, std::size_t flat_size);
  // Reverse sweep with an explicit output cotangent (same shape as `output`).
  std::vector<double> backward(Var output, const Tensor& seed, std::size_t flat_size);

 private:
  struct Node {
    std::string op;
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::optional<std::size_t> param_offset;
  };

  std::vector<double> sweep(std::size_t output, std::size_t flat_size);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// ---------------------------------------------------------------------------
// Primitive ops. Binary ops broadcast `b` when it is 1xC, Nx1 or 1x1.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var gelu(Var x);
Var relu(Var x);
Var softmax_lastdim(Var x);
Var layernorm_lastdim(Var x, double eps = 1e-12);
Var transpose(Var x);
Var scale(Var x, double factor);
Var sum(Var x);
Var mean(Var x);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var sum_rows(Var x);  // column sums, 1xC
Var reciprocal(Var x);
// out[i] = x[perm[i]]
Var permute_rows(Var x, std::vector<std::size_t> perm);

// x * W + b with W (in x out) and b (1 x out).
Var linear(Var x, Var weight, Var bias);

enum class OpKind {
  Matmul, Add, Mul, Gelu, Relu, SoftmaxLastdim, LayernormLastdim, Transpose, Scale, Sum, Mean, SliceRows
};

struct OpArgs {
  double factor = 1.0;  // Scale
  double eps = 1e-12;   // LayernormLastdim
  std::size_t begin = 0, end = 0;  // SliceRows
};

// Dispatch by op kind; validates arity and shapes.
Var primitive_forward(OpKind kind, std::span<const Var> inputs, const OpArgs& args = {});

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;
  double lr = 0.002;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState fresh(std::size_t n, double lr = 0.002);
};

// One bias-corrected Adam update. Throws on non-finite gradient entries,
// naming the offending parameter.
void adam_step(ParamStore& params, std::span<const double> grads, AdamState& state,
               std::optional<double> lr_override = std::nullopt);

}  // namespace pfem::ad
