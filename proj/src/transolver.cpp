#include "pfem/transolver.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pfem::op {

void TransolverConfig::validate() const {
  if (num_layers < 0) throw std::invalid_argument("transolver: num_layers must be >= 0");
  if (num_tokens < 1) throw std::invalid_argument("transolver: num_tokens must be >= 1");
  if (channels < 1 || heads < 1 || channels % heads != 0)
    throw std::invalid_argument("transolver: channels (" + std::to_string(channels) + ") must be divisible by heads (" +
                                std::to_string(heads) + ")");
  if (mlp_ratio < 1) throw std::invalid_argument("transolver: mlp_ratio must be >= 1");
  if (in_features < 1 || out_features < 1) throw std::invalid_argument("transolver: feature widths must be >= 1");
}

nlohmann::json to_json(const TransolverConfig& c) {
  return {{"num_layers", c.num_layers}, {"num_tokens", c.num_tokens},   {"channels", c.channels},
          {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio},     {"in_features", c.in_features},
          {"out_features", c.out_features}, {"ln_eps", c.ln_eps}};
}

TransolverConfig config_from_json(const nlohmann::json& j) {
  TransolverConfig c;
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_tokens = j.value("num_tokens", c.num_tokens);
  c.channels = j.value("channels", c.channels);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.in_features = j.value("in_features", c.in_features);
  c.out_features = j.value("out_features", c.out_features);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  c.validate();
  return c;
}

Var slice_tokens(Var U, Var M) {
  // colsum is 1 x S; transpose to S x 1 so it broadcasts over the token rows
  return ad::mul(ad::matmul(ad::transpose(M), U), ad::transpose(ad::reciprocal(ad::sum_rows(M))));
}

Var deslice(Var Zt, Var M) { return ad::matmul(M, Zt); }

std::vector<std::size_t> canonical_order(const Tensor& x) {
  std::vector<std::size_t> order(x.rows());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t cols = x.cols();
  const double* d = x.ptr();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::lexicographical_compare(d + a * cols, d + (a + 1) * cols, d + b * cols, d + (b + 1) * cols);
  });
  return order;
}

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& p) {
  std::vector<std::size_t> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
  return inv;
}

Transolver::Transolver(const TransolverConfig& config, std::uint64_t seed) : config_(config), params_(seed) {
  config_.validate();
  build(seed);
}

Transolver::Transolver(const TransolverConfig& config, ad::ParamStore params) : config_(config), params_(params.seed()) {
  config_.validate();
  build(params.seed());
  if (params.count() != params_.count())
    throw std::invalid_argument("transolver: checkpoint has " + std::to_string(params.count()) + " parameters, config needs " +
                                std::to_string(params_.count()));
  for (std::size_t i = 0; i < params_.count(); ++i) {
    const auto& a = params_.info(i);
    const auto& b = params.info(i);
    if (a.name != b.name || a.shape != b.shape)
      throw std::invalid_argument("transolver: parameter '" + b.name + "' " + ad::shape_string(b.shape) +
                                  " does not match expected '" + a.name + "' " + ad::shape_string(a.shape));
  }
  params_.flat() = params.flat();
}

void Transolver::build(std::uint64_t) {
  const auto C = static_cast<std::size_t>(config_.channels);
  const auto S = static_cast<std::size_t>(config_.num_tokens);
  const auto d = static_cast<std::size_t>(config_.head_dim());
  const auto hidden = C * static_cast<std::size_t>(config_.mlp_ratio);
  const auto in = static_cast<std::size_t>(config_.in_features);
  const auto out = static_cast<std::size_t>(config_.out_features);
  using ad::Init;

  auto dense_params = [&](const std::string& prefix, std::size_t fan_in, std::size_t fan_out, bool bias = true) {
    params_.add(prefix + ".W", {fan_in, fan_out}, Init::FanInUniform, fan_in);
    if (bias) params_.add(prefix + ".b", {1, fan_out}, Init::FanInUniform, fan_in);
  };
  auto ln_params = [&](const std::string& prefix) {
    params_.add(prefix + ".gain", {1, C}, Init::Ones);
    params_.add(prefix + ".bias", {1, C}, Init::Zeros);
  };

  dense_params("embed.fc1", in, 2 * C);
  dense_params("embed.fc2", 2 * C, C);
  ln_params("embed.ln");
  for (int l = 0; l < config_.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    ln_params(p + ".ln1");
    dense_params(p + ".attn.fx", C, C);
    dense_params(p + ".attn.x", C, C);
    dense_params(p + ".attn.slice", d, S);
    dense_params(p + ".attn.q", d, d, false);
    dense_params(p + ".attn.k", d, d, false);
    dense_params(p + ".attn.v", d, d, false);
    dense_params(p + ".attn.out", C, C);
    ln_params(p + ".ln2");
    dense_params(p + ".mlp.fc1", C, hidden);
    dense_params(p + ".mlp.fc2", hidden, C);
  }
  ln_params("decoder.ln");
  dense_params("decoder.fc1", C, C);
  dense_params("decoder.fc2", C, out);
}

std::vector<Var> Transolver::bind(Tape& tape) const {
  std::vector<Var> p;
  p.reserve(params_.count());
  for (std::size_t i = 0; i < params_.count(); ++i) p.push_back(tape.parameter(params_, i));
  return p;
}

Var Transolver::layer_norm(const std::vector<Var>& p, const std::string& prefix, Var x) const {
  const Var y = ad::layernorm_lastdim(x, config_.ln_eps);
  return ad::add(ad::mul(y, p[index(prefix + ".gain")]), p[index(prefix + ".bias")]);
}

Var Transolver::dense(const std::vector<Var>& p, const std::string& prefix, Var x) const {
  return ad::linear(x, p[index(prefix + ".W")], p[index(prefix + ".b")]);
}

Var Transolver::embed(const std::vector<Var>& p, Var x) const {
  if (x.value().cols() != static_cast<std::size_t>(config_.in_features))
    throw ad::ShapeError("embed: sample has " + std::to_string(x.value().cols()) + " features, config expects " +
                         std::to_string(config_.in_features));
  Var h = ad::gelu(dense(p, "embed.fc1", x));
  h = dense(p, "embed.fc2", h);
  return layer_norm(p, "embed.ln", h);
}

Var Transolver::physics_attention(const std::vector<Var>& p, int layer, Var x, AttentionTrace* trace) const {
  const std::string pre = "layer" + std::to_string(layer) + ".attn";
  const auto order = canonical_order(x.value());
  const auto inv = inverse_permutation(order);
  const Var xs = ad::permute_rows(x, order);

  const Var fx = dense(p, pre + ".fx", xs);
  const Var xm = dense(p, pre + ".x", xs);
  const auto d = static_cast<std::size_t>(config_.head_dim());
  const double temperature = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<Var> heads;
  for (int h = 0; h < config_.heads; ++h) {
    const std::size_t b = static_cast<std::size_t>(h) * d;
    const Var U = ad::slice_cols(fx, b, b + d);
    const Var M = ad::softmax_lastdim(dense(p, pre + ".slice", ad::slice_cols(xm, b, b + d)));
    const Var Z = slice_tokens(U, M);
    const Var Q = ad::matmul(Z, p[index(pre + ".q.W")]);
    const Var K = ad::matmul(Z, p[index(pre + ".k.W")]);
    const Var V = ad::matmul(Z, p[index(pre + ".v.W")]);
    const Var A = ad::softmax_lastdim(ad::scale(ad::matmul(Q, ad::transpose(K)), temperature));
    heads.push_back(deslice(ad::matmul(A, V), M));
    if (trace) {
      const Tensor& Ms = M.value();
      Tensor Mo = Tensor::zeros(Ms.rows(), Ms.cols());
      for (std::size_t r = 0; r < Ms.rows(); ++r)
        for (std::size_t c = 0; c < Ms.cols(); ++c) Mo(r, c) = Ms(inv[r], c);
      trace->slice_weights.push_back(std::move(Mo));
      trace->tokens.push_back(Z.value());
    }
  }
  const Var y = dense(p, pre + ".out", ad::concat_cols(heads));
  return ad::permute_rows(y, inv);
}

Var Transolver::block(const std::vector<Var>& p, int layer, Var x, AttentionTrace* trace) const {
  const std::string pre = "layer" + std::to_string(layer);
  x = ad::add(x, physics_attention(p, layer, layer_norm(p, pre + ".ln1", x), trace));
  const Var h = ad::gelu(dense(p, pre + ".mlp.fc1", layer_norm(p, pre + ".ln2", x)));
  return ad::add(x, dense(p, pre + ".mlp.fc2", h));
}

namespace {

void check_finite(const Tensor& t, const std::string& where) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw std::runtime_error("transolver: non-finite activations " + where);
}

}  // namespace

Var Transolver::forward(Tape& tape, const Tensor& features, AttentionTrace* trace) const {
  if (features.rows() < 1) throw ad::ShapeError("forward: empty point cloud");
  const auto p = bind(tape);
  const auto order = canonical_order(features);
  Var x = ad::permute_rows(tape.constant(features), order);
  x = embed(p, x);
  check_finite(x.value(), "after embedding");
  AttentionTrace local;
  for (int l = 0; l < config_.num_layers; ++l) {
    x = block(p, l, x, trace ? &local : nullptr);
    check_finite(x.value(), "after layer " + std::to_string(l));
  }
  Var y = layer_norm(p, "decoder.ln", x);
  y = dense(p, "decoder.fc2", ad::gelu(dense(p, "decoder.fc1", y)));
  check_finite(y.value(), "in decoder");
  if (trace) {
    // traced slice weights are in sorted order here; map back to the caller's rows
    const auto inv = inverse_permutation(order);
    for (auto& M : local.slice_weights) {
      Tensor Mo = Tensor::zeros(M.rows(), M.cols());
      for (std::size_t r = 0; r < M.rows(); ++r)
        for (std::size_t c = 0; c < M.cols(); ++c) Mo(r, c) = M(inv[r], c);
      trace->slice_weights.push_back(std::move(Mo));
    }
    for (auto& Z : local.tokens) trace->tokens.push_back(std::move(Z));
  }
  return ad::permute_rows(y, inverse_permutation(order));
}

Tensor Transolver::predict(const Tensor& features) const {
  Tape tape;
  return forward(tape, features).value();
}

}  // namespace pfem::op
