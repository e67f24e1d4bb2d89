#include "mmc/nets.hpp"

#include <cmath>
#include <stdexcept>

namespace mmc {

Tensor glorot(std::int64_t in, std::int64_t out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> w(static_cast<std::size_t>(in * out));
  for (auto& x : w) x = rng.uniform(-a, a);
  return Tensor::from_data({in, out}, std::move(w), /*requires_grad=*/true);
}

namespace {

Tensor zeros_param(Shape shape) { return Tensor::zeros(std::move(shape), true); }

double normalize(std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 1e-30) {
    for (double& x : v) x /= n;
  }
  return n;
}

}  // namespace

SpectralLinear::SpectralLinear(std::int64_t in, std::int64_t out, double bound,
                               bool use_sn, Rng& rng)
    : W(glorot(in, out, rng)), b(zeros_param({1, out})), c_(bound), use_sn_(use_sn) {
  std::vector<double> u(static_cast<std::size_t>(in)), v(static_cast<std::size_t>(out));
  for (auto& x : u) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  normalize(u);
  normalize(v);
  u_ = Tensor::from_data({in}, std::move(u));
  v_ = Tensor::from_data({out}, std::move(v));
  warmup(50);
}

void SpectralLinear::advance_power_iteration() {
  const std::int64_t in = W.dim(0), out = W.dim(1);
  const auto& w = W.data();
  auto& u = u_.mutable_data();
  auto& v = v_.mutable_data();
  std::vector<double> nv(static_cast<std::size_t>(out), 0.0);
  for (std::int64_t i = 0; i < in; ++i) {
    const double ui = u[static_cast<std::size_t>(i)];
    for (std::int64_t j = 0; j < out; ++j) {
      nv[static_cast<std::size_t>(j)] += w[static_cast<std::size_t>(i * out + j)] * ui;
    }
  }
  if (normalize(nv) > 1e-30) v = nv;
  std::vector<double> nu(static_cast<std::size_t>(in), 0.0);
  for (std::int64_t i = 0; i < in; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < out; ++j) {
      acc += w[static_cast<std::size_t>(i * out + j)] * v[static_cast<std::size_t>(j)];
    }
    nu[static_cast<std::size_t>(i)] = acc;
  }
  if (normalize(nu) > 1e-30) u = nu;
}

double SpectralLinear::sigma_estimate() const {
  const std::int64_t in = W.dim(0), out = W.dim(1);
  const auto& w = W.data();
  const auto& u = u_.data();
  const auto& v = v_.data();
  double sigma = 0.0;
  for (std::int64_t i = 0; i < in; ++i) {
    double acc = 0.0;
    for (std::int64_t j = 0; j < out; ++j) {
      acc += w[static_cast<std::size_t>(i * out + j)] * v[static_cast<std::size_t>(j)];
    }
    sigma += u[static_cast<std::size_t>(i)] * acc;
  }
  return sigma;
}

double SpectralLinear::effective_sigma(int iters) const {
  SpectralLinear scratch = *this;
  scratch.u_ = Tensor::from_data({W.dim(0)}, u_.data());
  scratch.v_ = Tensor::from_data({W.dim(1)}, v_.data());
  for (int i = 0; i < iters; ++i) scratch.advance_power_iteration();
  const double sigma_w = scratch.sigma_estimate();
  double scale = 1.0;
  if (use_sn_) {
    const double est = sigma_estimate();
    if (est > c_) scale = c_ / est;
  }
  return sigma_w * scale;
}

void SpectralLinear::warmup(int iters) {
  for (int i = 0; i < iters; ++i) advance_power_iteration();
}

Tensor SpectralLinear::forward(const Tensor& x, bool training) {
  if (x.rank() != 2 || x.dim(1) != W.dim(0)) {
    throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                " does not match weight " + shape_str(W.shape()));
  }
  if (training) advance_power_iteration();
  double scale = 1.0;
  if (use_sn_) {
    const double sigma = sigma_estimate();
    if (sigma > c_) scale = c_ / sigma;
  }
  Tensor y = matmul(x, W);
  if (scale != 1.0) y = y * scale;  // scale is a constant: no grad into sigma
  return y + b;
}

void SpectralLinear::collect(const std::string& prefix, NamedParams* params,
                             NamedParams* buffers) {
  params->emplace_back(prefix + ".weight", W);
  params->emplace_back(prefix + ".bias", b);
  if (buffers) {
    buffers->emplace_back(prefix + ".u", u_);
    buffers->emplace_back(prefix + ".v", v_);
  }
}

ResidualBlock::ResidualBlock(std::int64_t dim, std::int64_t hidden, double bound,
                             bool use_sn, Rng& rng)
    : lin1(dim, hidden, bound, use_sn, rng), lin2(hidden, dim, bound, use_sn, rng) {}

Tensor ResidualBlock::forward(const Tensor& x, bool training) {
  return x + lin2.forward(relu(lin1.forward(x, training)), training);
}

Extractor::Extractor(const ExtractorConfig& cfg, Rng& rng) : cfg_(cfg) {
  input_proj_ = SpectralLinear(cfg.input_dim, cfg.feature_dim, cfg.spectral_c,
                               cfg.spectral, rng);
  blocks_.reserve(static_cast<std::size_t>(cfg.depth));
  for (int i = 0; i < cfg.depth; ++i) {
    blocks_.emplace_back(cfg.feature_dim, cfg.block_hidden, cfg.spectral_c, cfg.spectral, rng);
  }
}

Tensor Extractor::forward(const Tensor& x, bool training) {
  Tensor h = input_proj_.forward(x, training);
  for (auto& blk : blocks_) h = blk.forward(h, training);
  return h;
}

void Extractor::collect(const std::string& prefix, NamedParams* params,
                        NamedParams* buffers) {
  input_proj_.collect(prefix + ".proj", params, buffers);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].lin1.collect(prefix + ".block" + std::to_string(i) + ".fc1", params, buffers);
    blocks_[i].lin2.collect(prefix + ".block" + std::to_string(i) + ".fc2", params, buffers);
  }
}

void Extractor::warmup(int iters) {
  input_proj_.warmup(iters);
  for (auto& blk : blocks_) {
    blk.lin1.warmup(iters);
    blk.lin2.warmup(iters);
  }
}

std::vector<const SpectralLinear*> Extractor::spectral_layers() const {
  std::vector<const SpectralLinear*> out;
  out.push_back(&input_proj_);
  for (const auto& blk : blocks_) {
    out.push_back(&blk.lin1);
    out.push_back(&blk.lin2);
  }
  return out;
}

SetEncoder::SetEncoder(const SetEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  const std::int64_t d = cfg.feature_dim, dm = cfg.model_dim;
  if (dm % cfg.heads != 0) {
    throw std::invalid_argument("set encoder: model_dim must be divisible by heads");
  }
  in_w_ = glorot(d, dm, rng);
  in_b_ = zeros_param({1, dm});
  blocks_.resize(static_cast<std::size_t>(cfg.blocks));
  for (auto& blk : blocks_) {
    blk.att = {glorot(dm, dm, rng), glorot(dm, dm, rng), glorot(dm, dm, rng),
               glorot(dm, dm, rng)};
    blk.ff1_w = glorot(dm, dm, rng);
    blk.ff1_b = zeros_param({1, dm});
    blk.ff2_w = glorot(dm, dm, rng);
    blk.ff2_b = zeros_param({1, dm});
  }
  // one pooling seed per class set, drawn from a standard normal
  std::vector<double> seed(static_cast<std::size_t>(dm));
  for (auto& x : seed) x = rng.normal();
  seeds_ = Tensor::from_data({1, dm}, std::move(seed), true);
  pma_wq_ = glorot(dm, dm, rng);
  pma_wk_ = glorot(dm, dm, rng);
  pma_wv_ = glorot(dm, dm, rng);
  pma_wo_ = glorot(dm, dm, rng);
  diag_w_ = glorot(dm, d, rng);
  diag_b_ = zeros_param({1, d});
  if (cfg.rank > 0) {
    fac_w_ = glorot(dm, d * cfg.rank, rng);
    fac_b_ = zeros_param({1, d * cfg.rank});
  }
}

Tensor SetEncoder::attend(const Attention& at, const Tensor& queries, const Tensor& keys,
                          bool add_query_residual) const {
  const std::int64_t dm = cfg_.model_dim;
  const std::int64_t hd = dm / cfg_.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor q = matmul(queries, at.wq);
  Tensor k = matmul(keys, at.wk);
  Tensor v = matmul(keys, at.wv);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(cfg_.heads));
  for (std::int64_t h = 0; h < cfg_.heads; ++h) {
    Tensor qh = slice(q, 1, h * hd, hd);
    Tensor kh = slice(k, 1, h * hd, hd);
    Tensor vh = slice(v, 1, h * hd, hd);
    Tensor scores = matmul(qh, transpose(kh)) * inv_sqrt;
    heads.push_back(matmul(softmax(scores, 1), vh));
  }
  Tensor out = matmul(concat(heads, 1), at.wo);
  if (add_query_residual) out = queries + out;
  return out;
}

SetEncoder::Output SetEncoder::forward(const Tensor& set) const {
  if (set.rank() != 2 || set.dim(1) != cfg_.feature_dim) {
    throw std::invalid_argument("set encoder: expected {n, " +
                                std::to_string(cfg_.feature_dim) + "}, got " +
                                shape_str(set.shape()));
  }
  if (set.dim(0) == 0) {
    throw std::invalid_argument("set encoder: empty input set");
  }
  Tensor x = matmul(set, in_w_) + in_b_;
  for (const auto& blk : blocks_) {
    Tensor h = attend(blk.att, x, x, /*add_query_residual=*/true);
    Tensor ff = matmul(relu(matmul(h, blk.ff1_w) + blk.ff1_b), blk.ff2_w) + blk.ff2_b;
    x = h + ff;
  }
  // pooling by a learned seed query; no additive seed term in the output
  Attention pma{pma_wq_, pma_wk_, pma_wv_, pma_wo_};
  Tensor pooled = attend(pma, seeds_, x, /*add_query_residual=*/false);  // {1, dm}

  Output out;
  out.diag_logits = reshape(matmul(pooled, diag_w_) + diag_b_, {cfg_.feature_dim});
  if (cfg_.rank > 0) {
    Tensor raw = matmul(pooled, fac_w_) + fac_b_;
    out.factors = reshape(raw, {cfg_.feature_dim, cfg_.rank}) * cfg_.factor_gain;
  }
  return out;
}

void SetEncoder::collect(const std::string& prefix, NamedParams* params,
                         NamedParams* buffers) {
  (void)buffers;  // no persistent state beyond the parameters
  params->emplace_back(prefix + ".in.weight", in_w_);
  params->emplace_back(prefix + ".in.bias", in_b_);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string bp = prefix + ".block" + std::to_string(i);
    params->emplace_back(bp + ".att.wq", blocks_[i].att.wq);
    params->emplace_back(bp + ".att.wk", blocks_[i].att.wk);
    params->emplace_back(bp + ".att.wv", blocks_[i].att.wv);
    params->emplace_back(bp + ".att.wo", blocks_[i].att.wo);
    params->emplace_back(bp + ".ff1.weight", blocks_[i].ff1_w);
    params->emplace_back(bp + ".ff1.bias", blocks_[i].ff1_b);
    params->emplace_back(bp + ".ff2.weight", blocks_[i].ff2_w);
    params->emplace_back(bp + ".ff2.bias", blocks_[i].ff2_b);
  }
  params->emplace_back(prefix + ".pma.seed", seeds_);
  params->emplace_back(prefix + ".pma.wq", pma_wq_);
  params->emplace_back(prefix + ".pma.wk", pma_wk_);
  params->emplace_back(prefix + ".pma.wv", pma_wv_);
  params->emplace_back(prefix + ".pma.wo", pma_wo_);
  params->emplace_back(prefix + ".diag.weight", diag_w_);
  params->emplace_back(prefix + ".diag.bias", diag_b_);
  if (cfg_.rank > 0) {
    params->emplace_back(prefix + ".factors.weight", fac_w_);
    params->emplace_back(prefix + ".factors.bias", fac_b_);
  }
}

}  // namespace mmc
