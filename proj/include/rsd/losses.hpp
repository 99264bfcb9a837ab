// Copyright (c) 2026, the rsd authors
// SPDX-License-Identifier: Apache-2.0
//
// Redundancy-suppression distillation objective and the classic baselines.
// The Pearson cross-correlation matrix between per-unit teacher/student
// activations is computed as standardize(t)^T standardize(s), which is the
// per-pair Pearson correlation over the batch.
#pragma once

#include <random>
#include <string>
#include <vector>

#include "rsd/nn.hpp"
#include "rsd/tensor.hpp"

namespace rsd {

struct StandardizeReport {
  int degenerate_columns = 0;
};

// Per-column zero mean and unit L2 norm. Constant columns fall back to an
// epsilon denominator (yielding a ~zero column) and are counted in the
// report plus a recorded warning.
Tensor standardize_columns(const Tensor& x, StandardizeReport* report = nullptr);

// P[i,j] = Pearson correlation of teacher unit i and student unit j across
// the batch. Requires equal batch size and equal dimension; run the student
// through the decoupler first when dimensions differ.
Tensor pearson_matrix(const Tensor& zt, const Tensor& zs);

// Mean over all D^2 entries of w_ij (P_ij - I_ij)^2 with w=1 on the
// diagonal and w=kappa off it.
Tensor rsd_loss(const Tensor& p, double kappa);

struct RsdParts {
  double diag = 0.0;     // invariance term contribution
  double offdiag = 0.0;  // kappa-weighted decorrelation contribution
};
RsdParts rsd_loss_parts(const Tensor& p, double kappa);

// Expander -> BatchNorm -> GELU -> adaptor, mapping student dimension d_s
// to teacher dimension d_t through d_e = round(expansion * d_s). Trained
// jointly with the student and discarded at inference.
class AadModule {
 public:
  AadModule(int d_s, int d_t, double expansion, std::mt19937_64& rng);

  Tensor forward(const Tensor& zs_raw, Mode mode);
  std::vector<std::pair<std::string, Tensor>> named_parameters();
  std::vector<Tensor> parameters();
  int64_t parameter_count() const;
  int in_dim() const { return expander_.in_dim(); }
  int expanded_dim() const { return expander_.out_dim(); }
  int out_dim() const { return adaptor_.out_dim(); }

 private:
  Affine expander_;
  BatchNorm1d norm_;
  Affine adaptor_;
};

enum class ApplyTo { penultimate, logits };

struct RsdConfig {
  double lambda = 2.0;
  double kappa = 5e-3;
  double expansion_factor = 4.0;
  double tau = 4.0;  // baseline KLD temperature
  ApplyTo apply_to = ApplyTo::penultimate;
  bool use_aad = true;

  void validate() const;
};

struct LossBreakdown {
  double ce = 0.0;
  double rsd_diag = 0.0;
  double rsd_offdiag = 0.0;
  double distill = 0.0;  // kd / feature_mse term
  double total = 0.0;
};

Tensor ce_loss(const Tensor& logits, const std::vector<int>& labels);
// tau^2-scaled mean KL(softmax(zt/tau) || softmax(zs/tau)); zt is treated
// as a constant.
Tensor kd_kld_loss(const Tensor& zs_logits, const Tensor& zt_logits,
                   double tau);
Tensor feature_mse_loss(const Tensor& fs, const Tensor& ft,
                        const Affine& psi);
// RSD applied directly over logits; identical math, no decoupler.
Tensor rsd_on_logits(const Tensor& zt_logits, const Tensor& zs_logits,
                     double kappa);

struct ObjectiveResult {
  Tensor total;
  LossBreakdown breakdown;
};

// CE(logits_s, labels) + lambda * rsd(P(zt, aad(zs_raw)), kappa). Pass a
// null aad to expose the raw student embedding (equal-dimension pairs).
ObjectiveResult full_objective(const Tensor& logits_s,
                               const std::vector<int>& labels,
                               const Tensor& zt, const Tensor& zs_raw,
                               AadModule* aad, const RsdConfig& cfg,
                               Mode mode);

}  // namespace rsd
