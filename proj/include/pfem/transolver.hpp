#pragma once

// Transolver-style operator on point clouds: pointwise MLP embedding, stacked
// pre-LN blocks of physics attention (slice -> token attention -> deslice) and
// an MLP decoder.
//
// Rows are processed in a canonical (lexicographic) order internally so the
// forward pass is permutation-equivariant bit for bit.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfem/tensor.hpp"

namespace pfem::op {

using ad::Tape;
using ad::Tensor;
using ad::Var;

struct TransolverConfig {
  int num_layers = 3;
  int num_tokens = 16;
  int channels = 64;
  int heads = 4;
  int mlp_ratio = 2;
  int in_features = 7;
  int out_features = 2;
  double ln_eps = 1e-5;

  void validate() const;
  int head_dim() const { return channels / heads; }
  bool operator==(const TransolverConfig&) const = default;
};

nlohmann::json to_json(const TransolverConfig& c);
TransolverConfig config_from_json(const nlohmann::json& j);

struct PointCloudSample {
  int id = 0;
  std::string problem;
  Tensor features;  // N x in_features, coordinates already normalized
  std::size_t num_points() const { return features.rows(); }
};

// Per-layer, per-head slice weights M (N x S), in the caller's row order.
struct AttentionTrace {
  std::vector<Tensor> slice_weights;
  std::vector<Tensor> tokens;  // Z, S x d
};

// Z = diag(1 / colsum(M)) M^T U
Var slice_tokens(Var U, Var M);
// X^t = M Z^t
Var deslice(Var Zt, Var M);

// Stable lexicographic row order: rows[order[0]] <= rows[order[1]] <= ...
std::vector<std::size_t> canonical_order(const Tensor& x);
std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& p);

class Transolver {
 public:
  Transolver(const TransolverConfig& config, std::uint64_t seed);
  // Adopts existing parameters; names and shapes must match the config.
  Transolver(const TransolverConfig& config, ad::ParamStore params);

  const TransolverConfig& config() const { return config_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  // Parameter leaves for one tape.
  std::vector<Var> bind(Tape& tape) const;

  Var embed(const std::vector<Var>& p, Var x) const;
  Var physics_attention(const std::vector<Var>& p, int layer, Var x, AttentionTrace* trace = nullptr) const;
  // Raw output H (N x out_features) in the input row order.
  Var forward(Tape& tape, const Tensor& features, AttentionTrace* trace = nullptr) const;
  Tensor predict(const Tensor& features) const;

 private:
  void build(std::uint64_t seed);
  std::size_t index(const std::string& name) const { return params_.index_of(name); }
  Var block(const std::vector<Var>& p, int layer, Var x, AttentionTrace* trace) const;
  Var layer_norm(const std::vector<Var>& p, const std::string& prefix, Var x) const;
  Var dense(const std::vector<Var>& p, const std::string& prefix, Var x) const;

  TransolverConfig config_;
  ad::ParamStore params_;
};

}  // namespace pfem::op
