#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmc/rng.hpp"
#include "mmc/tensor.hpp"

namespace mmc {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

// Linear layer with an optional spectral-norm bound on the weight. The
// effective weight is W * min(1, c / sigma_hat), where sigma_hat is the
// power-iteration estimate; sigma_hat is treated as a constant during
// backward. u and v advance once per training forward and stay frozen in
// eval mode.
class SpectralLinear {
 public:
  SpectralLinear() = default;
  SpectralLinear(std::int64_t in, std::int64_t out, double bound, bool use_sn, Rng& rng);

  Tensor forward(const Tensor& x, bool training);

  // Rayleigh estimate u^T W v from the persistent vectors.
  double sigma_estimate() const;
  // Converged estimate of the *effective* weight's spectral norm, computed
  // on scratch vectors; does not advance u/v.
  double effective_sigma(int iters = 50) const;
  void warmup(int iters);

  void collect(const std::string& prefix, NamedParams* params, NamedParams* buffers);
  std::int64_t in_dim() const { return W.dim(0); }
  std::int64_t out_dim() const { return W.dim(1); }
  double bound() const { return c_; }
  bool spectral() const { return use_sn_; }

  Tensor W;  // {in, out}
  Tensor b;  // {1, out}

 private:
  void advance_power_iteration();

  Tensor u_;  // {in}, left singular direction of W viewed as in x out
  Tensor v_;  // {out}
  double c_ = 3.0;
  bool use_sn_ = true;
};

// y = x + lin2(relu(lin1(x))); shape-preserving.
struct ResidualBlock {
  SpectralLinear lin1, lin2;
  ResidualBlock() = default;
  ResidualBlock(std::int64_t dim, std::int64_t hidden, double bound, bool use_sn, Rng& rng);
  Tensor forward(const Tensor& x, bool training);
};

struct ExtractorConfig {
  std::int64_t input_dim = 2;
  std::int64_t feature_dim = 16;
  std::int64_t block_hidden = 64;  // width of the residual branch
  int depth = 3;          // residual blocks
  double spectral_c = 3;  // per-layer norm bound
  bool spectral = true;
};

// f_theta: input projection followed by residual spectral blocks.
class Extractor {
 public:
  Extractor() = default;
  Extractor(const ExtractorConfig& cfg, Rng& rng);
  Tensor forward(const Tensor& x, bool training);  // {n, in} -> {n, d}
  void collect(const std::string& prefix, NamedParams* params, NamedParams* buffers);
  void warmup(int iters);
  std::vector<const SpectralLinear*> spectral_layers() const;
  const ExtractorConfig& config() const { return cfg_; }

 private:
  ExtractorConfig cfg_;
  SpectralLinear input_proj_;
  std::vector<ResidualBlock> blocks_;
};

struct SetEncoderConfig {
  std::int64_t feature_dim = 16;  // d of the incoming features
  std::int64_t model_dim = 32;    // attention width
  std::int64_t heads = 4;
  int blocks = 2;
  std::int64_t rank = 0;      // factor columns r
  double factor_gain = 0.1;   // constant multiplier on the factor head
};

// Attentive set encoder g_phi: self-attention blocks, a seed-query pooling
// layer with no query residual, and output heads for the raw diagonal
// logits and the factor matrix. Output is invariant to permutations of the
// input set.
class SetEncoder {
 public:
  SetEncoder() = default;
  SetEncoder(const SetEncoderConfig& cfg, Rng& rng);

  struct Output {
    Tensor diag_logits;  // {d}
    Tensor factors;      // {d, r}; undefined when r == 0
  };
  Output forward(const Tensor& set) const;  // {n, d}, n >= 1

  void collect(const std::string& prefix, NamedParams* params, NamedParams* buffers);
  const SetEncoderConfig& config() const { return cfg_; }

  // test hook: zeroing the pooling query projection must erase any seed
  // dependence, since the pooling attention has no additive seed term
  Tensor& pooling_query_weight() { return pma_wq_; }
  Tensor& seeds() { return seeds_; }

 private:
  struct Attention {
    Tensor wq, wk, wv, wo;  // all {dm, dm}
  };
  Tensor attend(const Attention& at, const Tensor& queries, const Tensor& keys,
                bool add_query_residual) const;

  SetEncoderConfig cfg_;
  Tensor in_w_, in_b_;
  struct Block {
    Attention att;
    Tensor ff1_w, ff1_b, ff2_w, ff2_b;
  };
  std::vector<Block> blocks_;
  Tensor seeds_;  // {1, dm}
  Tensor pma_wq_, pma_wk_, pma_wv_, pma_wo_;
  Tensor diag_w_, diag_b_;
  Tensor fac_w_, fac_b_;
};

// Glorot-uniform weight init used across the nets.
Tensor glorot(std::int64_t in, std::int64_t out, Rng& rng);

}  // namespace mmc
