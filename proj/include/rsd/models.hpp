// Copyright (c) 2026, the rsd authors
// SPDX-License-Identifier: Apache-2.0
//
// Three deliberately tiny heterogeneous families exposing logits plus the
// penultimate embedding (the input of the final affine classifier) from the
// same pass. Initialization is fully deterministic from the spec seed.
#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "rsd/nn.hpp"
#include "rsd/tensor.hpp"

namespace rsd {

enum class Family { cnn, transformer, mixer };

const char* family_name(Family f);
Family family_from_string(const std::string& s);

struct ModelSpec {
  Family family = Family::cnn;
  int depth = 0;  // 0 picks the family default (cnn 3, transformer/mixer 2)
  int width = 8;  // cnn base channel count
  int patch_size = 4;
  int embed_dim = 32;  // penultimate dimension D
  int num_classes = 3;
  int in_channels = 1;
  int in_size = 16;
  uint64_t seed = 0;

  int resolved_depth() const;
  void validate() const;
};

struct ForwardOutput {
  Tensor logits;       // [B,C], exactly head(penultimate)
  Tensor penultimate;  // [B,D]
};

class Model {
 public:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}
  virtual ~Model() = default;

  const ModelSpec& spec() const { return spec_; }
  virtual ForwardOutput forward(const Tensor& x, Mode mode) = 0;
  virtual std::vector<std::pair<std::string, Tensor>> named_parameters() = 0;
  // Per-block activations plus the penultimate embedding, flattened to
  // [B, D_tap], captured without a graph. Used by the CKA analysis.
  virtual std::vector<std::pair<std::string, Tensor>> forward_taps(
      const Tensor& x) = 0;

  std::vector<Tensor> parameters();
  int64_t parameter_count();
  void save(const std::string& path);

 protected:
  ModelSpec spec_;
};

std::unique_ptr<Model> build_model(const ModelSpec& spec);
std::unique_ptr<Model> load_model(const std::string& path);

// FNV-1a over parameter names and values, in declaration order.
uint64_t parameter_checksum(Model& m);

// Op kinds in a training-mode forward graph; the family census asserts
// structural heterogeneity on this.
std::vector<Op> model_op_census(Model& m, const Tensor& x);

// Frozen wrapper: parameters stop requiring gradients and every forward
// runs in eval mode without recording a graph.
class FrozenModel {
 public:
  explicit FrozenModel(std::unique_ptr<Model> model);

  ForwardOutput forward(const Tensor& x) const;
  const ModelSpec& spec() const { return model_->spec(); }
  Model& model() const { return *model_; }
  uint64_t checksum() const;

 private:
  std::unique_ptr<Model> model_;
};

}  // namespace rsd
