// Copyright (c) 2026, the rsd authors
// SPDX-License-Identifier: Apache-2.0

#include "rsd/models.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "rsd/serialize.hpp"

namespace rsd {

namespace {

using nlohmann::json;

// [B,C,H,W] -> [B, T, C*p*p] with T = (H/p)*(W/p).
Tensor patchify(const Tensor& x, int p) {
  int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int gh = h / p, gw = w / p;
  return x.reshape({b, c, gh, p, gw, p})
      .permute({0, 2, 4, 1, 3, 5})
      .reshape({b, gh * gw, c * p * p});
}

// y[B,T,D] + z[B,D] broadcast across tokens, via an explicit permutation.
Tensor add_per_token(const Tensor& y, const Tensor& z) {
  int b = y.dim(0), t = y.dim(1), d = y.dim(2);
  Tensor yp = y.permute({1, 0, 2}).reshape({t, b * d});
  return add_rowvec(yp, z.reshape({b * d}))
      .reshape({t, b, d})
      .permute({1, 0, 2});
}

Tensor conv_init(const Shape& shape, int fan_in, std::mt19937_64& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(shape, -bound, bound, rng).set_requires_grad(true);
}

class CnnModel : public Model {
 public:
  explicit CnnModel(const ModelSpec& spec) : Model(spec) {
    std::mt19937_64 rng(spec.seed);
    int depth = spec.resolved_depth();
    int c_in = spec.in_channels;
    for (int i = 0; i < depth; ++i) {
      int c_out = (i == depth - 1) ? spec.embed_dim : spec.width << i;
      int fan_in = c_in * 9;
      conv_w_.push_back(conv_init({c_out, c_in, 3, 3}, fan_in, rng));
      conv_b_.push_back(conv_init({c_out}, fan_in, rng));
      c_in = c_out;
    }
    head_ = Affine(spec.embed_dim, spec.num_classes, rng);
  }

  ForwardOutput forward(const Tensor& x, Mode) override {
    Tensor h = features(x);
    Tensor penult = pool(h);
    return {head_.forward(penult), penult};
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() override {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < conv_w_.size(); ++i) {
      out.emplace_back("conv" + std::to_string(i + 1) + ".w", conv_w_[i]);
      out.emplace_back("conv" + std::to_string(i + 1) + ".b", conv_b_[i]);
    }
    out.emplace_back("head.w", head_.w);
    out.emplace_back("head.b", head_.b);
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> forward_taps(
      const Tensor& x) override {
    NoGradGuard guard;
    std::vector<std::pair<std::string, Tensor>> taps;
    Tensor h = x;
    for (size_t i = 0; i < conv_w_.size(); ++i) {
      h = relu(conv2d(h, conv_w_[i], conv_b_[i], 2, 1));
      taps.emplace_back("block" + std::to_string(i + 1),
                        h.reshape({h.dim(0), static_cast<int>(h.numel() / h.dim(0))}));
    }
    taps.emplace_back("penultimate", pool(h));
    return taps;
  }

 private:
  Tensor features(const Tensor& x) {
    Tensor h = x;
    for (size_t i = 0; i < conv_w_.size(); ++i)
      h = relu(conv2d(h, conv_w_[i], conv_b_[i], 2, 1));
    return h;
  }

  static Tensor pool(const Tensor& h) {  // global average over space
    int b = h.dim(0), c = h.dim(1);
    return h.reshape({b, c, h.dim(2) * h.dim(3)}).mean(2);
  }

  std::vector<Tensor> conv_w_, conv_b_;
  Affine head_;
};

struct TransformerBlock {
  LayerNorm ln1, ln2;
  Affine wq, wk, wv, wo, fc1, fc2;
};

class TransformerModel : public Model {
 public:
  explicit TransformerModel(const ModelSpec& spec) : Model(spec) {
    std::mt19937_64 rng(spec.seed);
    int d = spec.embed_dim;
    int grid = spec.in_size / spec.patch_size;
    tokens_ = grid * grid;
    int patch_dim = spec.in_channels * spec.patch_size * spec.patch_size;
    patch_embed_ = Affine(patch_dim, d, rng);
    double bound = 1.0 / std::sqrt(static_cast<double>(d));
    pos_ = Tensor::uniform({tokens_, d}, -bound, bound, rng)
               .set_requires_grad(true);
    for (int i = 0; i < spec.resolved_depth(); ++i) {
      TransformerBlock blk;
      blk.ln1 = LayerNorm(d);
      blk.wq = Affine(d, d, rng);
      blk.wk = Affine(d, d, rng);
      blk.wv = Affine(d, d, rng);
      blk.wo = Affine(d, d, rng);
      blk.ln2 = LayerNorm(d);
      blk.fc1 = Affine(d, 2 * d, rng);
      blk.fc2 = Affine(2 * d, d, rng);
      blocks_.push_back(std::move(blk));
    }
    ln_f_ = LayerNorm(d);
    head_ = Affine(d, spec.num_classes, rng);
  }

  ForwardOutput forward(const Tensor& x, Mode) override {
    Tensor penult = embed(x);
    return {head_.forward(penult), penult};
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() override {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("patch.w", patch_embed_.w);
    out.emplace_back("patch.b", patch_embed_.b);
    out.emplace_back("pos", pos_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
      std::string p = "block" + std::to_string(i + 1) + ".";
      auto& b = blocks_[i];
      out.emplace_back(p + "ln1.gamma", b.ln1.gamma);
      out.emplace_back(p + "ln1.beta", b.ln1.beta);
      out.emplace_back(p + "wq.w", b.wq.w);
      out.emplace_back(p + "wq.b", b.wq.b);
      out.emplace_back(p + "wk.w", b.wk.w);
      out.emplace_back(p + "wk.b", b.wk.b);
      out.emplace_back(p + "wv.w", b.wv.w);
      out.emplace_back(p + "wv.b", b.wv.b);
      out.emplace_back(p + "wo.w", b.wo.w);
      out.emplace_back(p + "wo.b", b.wo.b);
      out.emplace_back(p + "ln2.gamma", b.ln2.gamma);
      out.emplace_back(p + "ln2.beta", b.ln2.beta);
      out.emplace_back(p + "fc1.w", b.fc1.w);
      out.emplace_back(p + "fc1.b", b.fc1.b);
      out.emplace_back(p + "fc2.w", b.fc2.w);
      out.emplace_back(p + "fc2.b", b.fc2.b);
    }
    out.emplace_back("ln_f.gamma", ln_f_.gamma);
    out.emplace_back("ln_f.beta", ln_f_.beta);
    out.emplace_back("head.w", head_.w);
    out.emplace_back("head.b", head_.b);
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> forward_taps(
      const Tensor& x) override {
    NoGradGuard guard;
    std::vector<std::pair<std::string, Tensor>> taps;
    int b = x.dim(0);
    Tensor e = tokens_in(x);
    for (size_t i = 0; i < blocks_.size(); ++i) {
      e = run_block(blocks_[i], e);
      taps.emplace_back("block" + std::to_string(i + 1),
                        e.reshape({b, tokens_ * spec_.embed_dim}));
    }
    taps.emplace_back("penultimate", pool_final(e));
    return taps;
  }

 private:
  Tensor tokens_in(const Tensor& x) {
    int b = x.dim(0);
    int d = spec_.embed_dim;
    Tensor e = patch_embed_.forward(patchify(x, spec_.patch_size));
    // Positional embedding, added via an explicit flatten.
    return add_rowvec(e.reshape({b, tokens_ * d}), pos_.reshape({tokens_ * d}))
        .reshape({b, tokens_, d});
  }

  Tensor run_block(TransformerBlock& blk, const Tensor& e) {
    int b = e.dim(0), t = e.dim(1), d = e.dim(2);
    Tensor u = blk.ln1.forward(e.reshape({b * t, d}));
    Tensor q = blk.wq.forward(u).reshape({b, t, d});
    Tensor k = blk.wk.forward(u).reshape({b, t, d});
    Tensor v = blk.wv.forward(u).reshape({b, t, d});
    Tensor scores = bmm(q, k.permute({0, 2, 1})) *
                    (1.0 / std::sqrt(static_cast<double>(d)));
    Tensor ctx = bmm(softmax(scores), v);
    Tensor x1 = add(e, blk.wo.forward(ctx.reshape({b * t, d})).reshape({b, t, d}));
    Tensor m = blk.fc2.forward(gelu(blk.fc1.forward(
        blk.ln2.forward(x1.reshape({b * t, d})))));
    return add(x1, m.reshape({b, t, d}));
  }

  Tensor pool_final(const Tensor& e) {
    int b = e.dim(0), t = e.dim(1), d = e.dim(2);
    return ln_f_.forward(e.reshape({b * t, d})).reshape({b, t, d}).mean(1);
  }

  Tensor embed(const Tensor& x) {
    Tensor e = tokens_in(x);
    for (auto& blk : blocks_) e = run_block(blk, e);
    return pool_final(e);
  }

  Affine patch_embed_;
  Tensor pos_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm ln_f_;
  Affine head_;
  int tokens_ = 0;
};

// Token mixing is a pooled, permutation-equivariant map: each token is
// gated per channel and coupled to the mean token. Positional information
// enters only through the learned positional embedding, so zeroing it
// makes the whole family equivariant to patch order.
struct MixerBlock {
  LayerNorm ln1, ln2;
  Tensor mix_a, mix_b, mix_c, mix_d;  // per-channel gates, [D]
  Affine fc1, fc2;
};

class MixerModel : public Model {
 public:
  explicit MixerModel(const ModelSpec& spec) : Model(spec) {
    std::mt19937_64 rng(spec.seed);
    int d = spec.embed_dim;
    int grid = spec.in_size / spec.patch_size;
    tokens_ = grid * grid;
    int patch_dim = spec.in_channels * spec.patch_size * spec.patch_size;
    patch_embed_ = Affine(patch_dim, d, rng);
    double bound = 1.0 / std::sqrt(static_cast<double>(d));
    pos_ = Tensor::uniform({tokens_, d}, -bound, bound, rng)
               .set_requires_grad(true);
    for (int i = 0; i < spec.resolved_depth(); ++i) {
      MixerBlock blk;
      blk.ln1 = LayerNorm(d);
      blk.mix_a = Tensor::ones({d}).set_requires_grad(true);
      blk.mix_b = Tensor::uniform({d}, -bound, bound, rng).set_requires_grad(true);
      blk.mix_c = Tensor::ones({d}).set_requires_grad(true);
      blk.mix_d = Tensor::uniform({d}, -bound, bound, rng).set_requires_grad(true);
      blk.ln2 = LayerNorm(d);
      blk.fc1 = Affine(d, 2 * d, rng);
      blk.fc2 = Affine(2 * d, d, rng);
      blocks_.push_back(std::move(blk));
    }
    ln_f_ = LayerNorm(d);
    head_ = Affine(d, spec.num_classes, rng);
  }

  ForwardOutput forward(const Tensor& x, Mode) override {
    Tensor penult = embed(x);
    return {head_.forward(penult), penult};
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() override {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("patch.w", patch_embed_.w);
    out.emplace_back("patch.b", patch_embed_.b);
    out.emplace_back("pos", pos_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
      std::string p = "block" + std::to_string(i + 1) + ".";
      auto& b = blocks_[i];
      out.emplace_back(p + "ln1.gamma", b.ln1.gamma);
      out.emplace_back(p + "ln1.beta", b.ln1.beta);
      out.emplace_back(p + "mix.a", b.mix_a);
      out.emplace_back(p + "mix.b", b.mix_b);
      out.emplace_back(p + "mix.c", b.mix_c);
      out.emplace_back(p + "mix.d", b.mix_d);
      out.emplace_back(p + "ln2.gamma", b.ln2.gamma);
      out.emplace_back(p + "ln2.beta", b.ln2.beta);
      out.emplace_back(p + "fc1.w", b.fc1.w);
      out.emplace_back(p + "fc1.b", b.fc1.b);
      out.emplace_back(p + "fc2.w", b.fc2.w);
      out.emplace_back(p + "fc2.b", b.fc2.b);
    }
    out.emplace_back("ln_f.gamma", ln_f_.gamma);
    out.emplace_back("ln_f.beta", ln_f_.beta);
    out.emplace_back("head.w", head_.w);
    out.emplace_back("head.b", head_.b);
    return out;
  }

  std::vector<std::pair<std::string, Tensor>> forward_taps(
      const Tensor& x) override {
    NoGradGuard guard;
    std::vector<std::pair<std::string, Tensor>> taps;
    int b = x.dim(0);
    Tensor e = tokens_in(x);
    for (size_t i = 0; i < blocks_.size(); ++i) {
      e = run_block(blocks_[i], e);
      taps.emplace_back("block" + std::to_string(i + 1),
                        e.reshape({b, tokens_ * spec_.embed_dim}));
    }
    taps.emplace_back("penultimate", pool_final(e));
    return taps;
  }

 private:
  Tensor tokens_in(const Tensor& x) {
    int b = x.dim(0);
    int d = spec_.embed_dim;
    Tensor e = patch_embed_.forward(patchify(x, spec_.patch_size));
    return add_rowvec(e.reshape({b, tokens_ * d}), pos_.reshape({tokens_ * d}))
        .reshape({b, tokens_, d});
  }

  Tensor run_block(MixerBlock& blk, const Tensor& e) {
    int b = e.dim(0), t = e.dim(1), d = e.dim(2);
    Tensor u = blk.ln1.forward(e.reshape({b * t, d})).reshape({b, t, d});
    Tensor v = gelu(add_per_token(mul_rowvec(u, blk.mix_a),
                                  mul_rowvec(u.mean(1), blk.mix_b)));
    Tensor mixed = add_per_token(mul_rowvec(v, blk.mix_c),
                                 mul_rowvec(v.mean(1), blk.mix_d));
    Tensor x1 = add(e, mixed);
    Tensor m = blk.fc2.forward(gelu(blk.fc1.forward(
        blk.ln2.forward(x1.reshape({b * t, d})))));
    return add(x1, m.reshape({b, t, d}));
  }

  Tensor pool_final(const Tensor& e) {
    int b = e.dim(0), t = e.dim(1), d = e.dim(2);
    return ln_f_.forward(e.reshape({b * t, d})).reshape({b, t, d}).mean(1);
  }

  Tensor embed(const Tensor& x) {
    Tensor e = tokens_in(x);
    for (auto& blk : blocks_) e = run_block(blk, e);
    return pool_final(e);
  }

  Affine patch_embed_;
  Tensor pos_;
  std::vector<MixerBlock> blocks_;
  LayerNorm ln_f_;
  Affine head_;
  int tokens_ = 0;
};

}  // namespace

const char* family_name(Family f) {
  switch (f) {
    case Family::cnn: return "cnn";
    case Family::transformer: return "transformer";
    case Family::mixer: return "mixer";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  if (s == "cnn") return Family::cnn;
  if (s == "transformer") return Family::transformer;
  if (s == "mixer") return Family::mixer;
  throw ConfigError("unknown model family '" + s +
                    "' (expected cnn, transformer or mixer)");
}

int ModelSpec::resolved_depth() const {
  if (depth > 0) return depth;
  return family == Family::cnn ? 3 : 2;
}

void ModelSpec::validate() const {
  if (embed_dim < 2) throw ConfigError("model: embed_dim must be >= 2");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (in_channels < 1 || in_size < 2)
    throw ConfigError("model: invalid input geometry");
  int d = resolved_depth();
  if (family == Family::cnn) {
    if (width < 1) throw ConfigError("model: cnn width must be >= 1");
    if (in_size % (1 << d) != 0)
      throw ConfigError("model: input size " + std::to_string(in_size) +
                        " is not divisible by 2^depth = " +
                        std::to_string(1 << d));
  } else {
    if (patch_size < 1 || in_size % patch_size != 0)
      throw ConfigError("model: input size " + std::to_string(in_size) +
                        " is not divisible by patch size " +
                        std::to_string(patch_size));
  }
}

std::vector<Tensor> Model::parameters() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

int64_t Model::parameter_count() {
  int64_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

void Model::save(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  json header = {
      {"family", family_name(spec_.family)},
      {"depth", spec_.resolved_depth()},
      {"width", spec_.width},
      {"patch_size", spec_.patch_size},
      {"embed_dim", spec_.embed_dim},
      {"num_classes", spec_.num_classes},
      {"in_channels", spec_.in_channels},
      {"in_size", spec_.in_size},
      {"seed", spec_.seed},
  };
  io::write_string(out, header.dump());
  for (auto& [name, t] : named_parameters())
    io::write_tensor_record(out, name, t);
  if (!out) throw IoError("write failed for " + path);
}

std::unique_ptr<Model> build_model(const ModelSpec& spec) {
  spec.validate();
  switch (spec.family) {
    case Family::cnn: return std::make_unique<CnnModel>(spec);
    case Family::transformer: return std::make_unique<TransformerModel>(spec);
    case Family::mixer: return std::make_unique<MixerModel>(spec);
  }
  throw ConfigError("model: unknown family");
}

std::unique_ptr<Model> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  json header;
  try {
    header = json::parse(io::read_string(in, "checkpoint header"));
  } catch (const json::exception& e) {
    throw FormatError("checkpoint " + path + ": bad header: " + e.what());
  }
  ModelSpec spec;
  spec.family = family_from_string(header.at("family").get<std::string>());
  spec.depth = header.at("depth").get<int>();
  spec.width = header.at("width").get<int>();
  spec.patch_size = header.at("patch_size").get<int>();
  spec.embed_dim = header.at("embed_dim").get<int>();
  spec.num_classes = header.at("num_classes").get<int>();
  spec.in_channels = header.at("in_channels").get<int>();
  spec.in_size = header.at("in_size").get<int>();
  spec.seed = header.at("seed").get<uint64_t>();
  auto model = build_model(spec);

  std::map<std::string, Tensor> loaded;
  std::string name;
  Tensor t;
  while (io::read_tensor_record(in, &name, &t)) loaded.emplace(name, t);
  for (auto& [pname, param] : model->named_parameters()) {
    auto it = loaded.find(pname);
    if (it == loaded.end())
      throw FormatError("checkpoint " + path + ": missing tensor " + pname);
    if (it->second.shape() != param.shape())
      throw FormatError("checkpoint " + path + ": tensor " + pname +
                        " has shape " + shape_str(it->second.shape()) +
                        ", expected " + shape_str(param.shape()));
    param.mutable_values() = it->second.values();
    loaded.erase(it);
  }
  if (!loaded.empty())
    throw FormatError("checkpoint " + path + ": unexpected tensor " +
                      loaded.begin()->first);
  return model;
}

uint64_t parameter_checksum(Model& m) {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (auto& [name, t] : m.named_parameters()) {
    mix(name.data(), name.size());
    for (double v : t.values()) {
      uint64_t u;
      static_assert(sizeof(u) == sizeof(v));
      __builtin_memcpy(&u, &v, sizeof(u));
      mix(&u, sizeof(u));
    }
  }
  return h;
}

std::vector<Op> model_op_census(Model& m, const Tensor& x) {
  ForwardOutput out = m.forward(x, Mode::train);
  return graph_ops(out.logits);
}

FrozenModel::FrozenModel(std::unique_ptr<Model> model)
    : model_(std::move(model)) {
  for (auto& [name, t] : model_->named_parameters())
    t.set_requires_grad(false);
}

ForwardOutput FrozenModel::forward(const Tensor& x) const {
  NoGradGuard guard;
  return model_->forward(x, Mode::eval);
}

uint64_t FrozenModel::checksum() const { return parameter_checksum(*model_); }

}  // namespace rsd
