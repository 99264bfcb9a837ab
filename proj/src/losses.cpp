// Copyright (c) 2026, the rsd authors
// SPDX-License-Identifier: Apache-2.0

#include "rsd/losses.hpp"

#include <cmath>

namespace rsd {

namespace {

constexpr double kNormEps = 1e-12;

}  // namespace

Tensor standardize_columns(const Tensor& x, StandardizeReport* report) {
  if (x.rank() != 2)
    throw ShapeError("standardize_columns: expected [B,D], got " +
                     shape_str(x.shape()));
  if (x.dim(0) < 2)
    throw DomainError("standardize_columns: batch of " +
                      std::to_string(x.dim(0)) + " is too small (need >= 2)");
  Tensor mu = x.mean(0);
  Tensor xc = add_rowvec(x, neg(mu));
  Tensor sq = mul(xc, xc).sum(0);
  // The epsilon floor leaves non-degenerate columns exact while mapping
  // constant columns to ~zero instead of dividing by zero.
  int degenerate = 0;
  for (int j = 0; j < x.dim(1); ++j)
    if (sq.at(j) <= kNormEps) ++degenerate;
  if (degenerate > 0) {
    warn("standardize_columns: " + std::to_string(degenerate) +
         " degenerate (constant) column(s)");
    if (report) report->degenerate_columns += degenerate;
  }
  Tensor norm = sqrt(clamp_min(sq, kNormEps));
  return mul_rowvec(xc, 1.0 / norm);
}

Tensor pearson_matrix(const Tensor& zt, const Tensor& zs) {
  if (zt.rank() != 2 || zs.rank() != 2)
    throw ShapeError("pearson_matrix: expected rank-2 batches");
  if (zt.dim(0) != zs.dim(0))
    throw ShapeError("pearson_matrix: batch sizes differ, " +
                     std::to_string(zt.dim(0)) + " vs " +
                     std::to_string(zs.dim(0)));
  if (zt.dim(1) != zs.dim(1))
    throw ShapeError(
        "pearson_matrix: dimensions differ, teacher D_t=" +
        std::to_string(zt.dim(1)) + " vs student D_s=" +
        std::to_string(zs.dim(1)) + "; adapt the student first");
  return matmul(standardize_columns(zt).transpose(), standardize_columns(zs));
}

Tensor rsd_loss(const Tensor& p, double kappa) {
  if (p.rank() != 2 || p.dim(0) != p.dim(1))
    throw ShapeError("rsd_loss: correlation matrix must be square, got " +
                     shape_str(p.shape()));
  int d = p.dim(0);
  Tensor weights = Tensor::full({d, d}, kappa);
  for (int i = 0; i < d; ++i)
    weights.mutable_values()[static_cast<size_t>(i) * d + i] = 1.0;
  Tensor dev = sub(p, Tensor::eye(d));
  return mul(weights, mul(dev, dev)).mean();
}

RsdParts rsd_loss_parts(const Tensor& p, double kappa) {
  int d = p.dim(0);
  RsdParts parts;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double v = p.at(static_cast<int64_t>(i) * d + j);
      if (i == j) {
        parts.diag += (v - 1.0) * (v - 1.0);
      } else {
        parts.offdiag += kappa * v * v;
      }
    }
  double inv = 1.0 / (static_cast<double>(d) * d);
  parts.diag *= inv;
  parts.offdiag *= inv;
  return parts;
}

AadModule::AadModule(int d_s, int d_t, double expansion, std::mt19937_64& rng) {
  if (d_s < 1 || d_t < 1)
    throw ConfigError("AAD: dimensions must be positive");
  if (expansion <= 0.0)
    throw ConfigError("AAD: expansion factor must be positive");
  int d_e = std::max(1, static_cast<int>(std::lround(expansion * d_s)));
  expander_ = Affine(d_s, d_e, rng);
  norm_ = BatchNorm1d(d_e);
  adaptor_ = Affine(d_e, d_t, rng);
}

Tensor AadModule::forward(const Tensor& zs_raw, Mode mode) {
  if (zs_raw.rank() != 2 || zs_raw.dim(1) != in_dim())
    throw ShapeError("AAD: expected [B," + std::to_string(in_dim()) +
                     "], got " + shape_str(zs_raw.shape()));
  return adaptor_.forward(gelu(norm_.forward(expander_.forward(zs_raw), mode)));
}

std::vector<std::pair<std::string, Tensor>> AadModule::named_parameters() {
  return {{"aad.expander.w", expander_.w}, {"aad.expander.b", expander_.b},
          {"aad.norm.gamma", norm_.gamma}, {"aad.norm.beta", norm_.beta},
          {"aad.adaptor.w", adaptor_.w},   {"aad.adaptor.b", adaptor_.b}};
}

std::vector<Tensor> AadModule::parameters() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

int64_t AadModule::parameter_count() const {
  return expander_.parameter_count() + 2 * expanded_dim() +
         adaptor_.parameter_count();
}

void RsdConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw ConfigError("rsd: lambda must be finite and non-negative");
  if (!(kappa >= 0.0) || !std::isfinite(kappa))
    throw ConfigError("rsd: kappa must be finite and non-negative");
  if (!(expansion_factor > 0.0) || !std::isfinite(expansion_factor))
    throw ConfigError("rsd: expansion factor must be positive");
  if (!(tau > 0.0) || !std::isfinite(tau))
    throw ConfigError("rsd: tau must be positive");
}

Tensor ce_loss(const Tensor& logits, const std::vector<int>& labels) {
  return nll_loss(log_softmax(logits), labels);
}

Tensor kd_kld_loss(const Tensor& zs_logits, const Tensor& zt_logits,
                   double tau) {
  if (zs_logits.shape() != zt_logits.shape())
    throw ShapeError("kd_kld_loss: logit shapes differ, " +
                     shape_str(zs_logits.shape()) + " vs " +
                     shape_str(zt_logits.shape()));
  if (tau <= 0.0) throw ConfigError("kd_kld_loss: tau must be positive");
  Tensor zt = zt_logits.detach();
  Tensor p = softmax(zt / tau).detach();
  Tensor logp = log_softmax(zt / tau).detach();
  Tensor logq = log_softmax(zs_logits / tau);
  Tensor kl_rows = mul(p, sub(logp, logq)).sum(1);
  return kl_rows.mean() * (tau * tau);
}

Tensor feature_mse_loss(const Tensor& fs, const Tensor& ft,
                        const Affine& psi) {
  Tensor mapped = psi.forward(fs);
  if (mapped.shape() != ft.shape())
    throw ShapeError("feature_mse_loss: adapted student " +
                     shape_str(mapped.shape()) + " vs teacher " +
                     shape_str(ft.shape()));
  Tensor d = sub(mapped, ft.detach());
  return mul(d, d).mean();
}

Tensor rsd_on_logits(const Tensor& zt_logits, const Tensor& zs_logits,
                     double kappa) {
  if (zt_logits.rank() != 2 || zs_logits.rank() != 2 ||
      zt_logits.dim(1) != zs_logits.dim(1))
    throw ShapeError("rsd_on_logits: class counts differ, " +
                     shape_str(zt_logits.shape()) + " vs " +
                     shape_str(zs_logits.shape()));
  return rsd_loss(pearson_matrix(zt_logits.detach(), zs_logits), kappa);
}

ObjectiveResult full_objective(const Tensor& logits_s,
                               const std::vector<int>& labels,
                               const Tensor& zt, const Tensor& zs_raw,
                               AadModule* aad, const RsdConfig& cfg,
                               Mode mode) {
  cfg.validate();
  Tensor ce = ce_loss(logits_s, labels);
  LossBreakdown bd;
  bd.ce = ce.item();
  Tensor total = ce;
  if (cfg.lambda > 0.0) {
    Tensor zs = aad ? aad->forward(zs_raw, mode) : zs_raw;
    Tensor p = pearson_matrix(zt.detach(), zs);
    Tensor loss = rsd_loss(p, cfg.kappa);
    RsdParts parts = rsd_loss_parts(p, cfg.kappa);
    bd.rsd_diag = parts.diag;
    bd.rsd_offdiag = parts.offdiag;
    total = add(ce, mul(Tensor::scalar(cfg.lambda), loss));
  }
  bd.total = total.item();
  return {total, bd};
}

}  // namespace rsd
