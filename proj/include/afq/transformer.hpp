#pragma once

// OPT-style pre-LayerNorm transformer block (causal multi-head attention, ReLU
// MLP) evaluated on the tape, in full precision or with affine transforms and
// fake quantization applied at the qkv, out-projection and fc1 inputs.

#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "afq/affine.hpp"
#include "afq/errors.hpp"
#include "afq/quantizer.hpp"
#include "afq/random.hpp"
#include "afq/tape.hpp"
#include "afq/tape_quant.hpp"

namespace afq {

template <typename Scalar>
struct BlockParams {
  Index n_heads = 1;
  Mat<Scalar> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // 1 x d
  Mat<Scalar> w_q, b_q, w_k, b_k, w_v, b_v, w_out, b_out;  // d x d, 1 x d
  Mat<Scalar> w_fc1, b_fc1;  // d x 4d, 1 x 4d
  Mat<Scalar> w_fc2, b_fc2;  // 4d x d, 1 x d

  Index dim() const { return w_q.rows(); }
  Index head_dim() const { return dim() / n_heads; }
};

/// Calls f(name, tensor) for every tensor of the block, in a fixed order.
template <typename Params, typename F>
void visit_tensors(Params& p, F&& f) {
  f("ln1_gamma", p.ln1_gamma);
  f("ln1_beta", p.ln1_beta);
  f("w_q", p.w_q);
  f("b_q", p.b_q);
  f("w_k", p.w_k);
  f("b_k", p.b_k);
  f("w_v", p.w_v);
  f("b_v", p.b_v);
  f("w_out", p.w_out);
  f("b_out", p.b_out);
  f("ln2_gamma", p.ln2_gamma);
  f("ln2_beta", p.ln2_beta);
  f("w_fc1", p.w_fc1);
  f("b_fc1", p.b_fc1);
  f("w_fc2", p.w_fc2);
  f("b_fc2", p.b_fc2);
}

template <typename To, typename From>
BlockParams<To> cast_block(const BlockParams<From>& p) {
  BlockParams<To> out;
  out.n_heads = p.n_heads;
  visit_tensors(out, [&](const char* name, Mat<To>& dst) {
    visit_tensors(p, [&](const char* src_name, const Mat<From>& src) {
      if (std::string(src_name) == name) dst = src.template cast<To>();
    });
  });
  return out;
}

template <typename Scalar>
Index parameter_count(const BlockParams<Scalar>& p) {
  Index n = 0;
  visit_tensors(p, [&](const char*, const Mat<Scalar>& m) { n += m.size(); });
  return n;
}

template <typename Scalar>
void validate(const BlockParams<Scalar>& p) {
  const Index d = p.dim();
  if (d < 1) throw ShapeError("block: empty hidden dimension");
  if (p.n_heads < 1 || d % p.n_heads != 0) {
    throw ConfigError("block: n_heads " + std::to_string(p.n_heads) + " does not divide d=" + std::to_string(d));
  }
  auto expect = [](const Mat<Scalar>& m, Index r, Index c, const char* name) {
    if (m.rows() != r || m.cols() != c) {
      throw ShapeError(std::string("block: ") + name + " is " + shape_string(m.rows(), m.cols()) + ", expected " +
                       shape_string(r, c));
    }
  };
  const Index f = p.w_fc1.cols();
  expect(p.ln1_gamma, 1, d, "ln1_gamma");
  expect(p.ln1_beta, 1, d, "ln1_beta");
  expect(p.ln2_gamma, 1, d, "ln2_gamma");
  expect(p.ln2_beta, 1, d, "ln2_beta");
  expect(p.w_q, d, d, "w_q");
  expect(p.w_k, d, d, "w_k");
  expect(p.w_v, d, d, "w_v");
  expect(p.w_out, d, d, "w_out");
  expect(p.b_q, 1, d, "b_q");
  expect(p.b_k, 1, d, "b_k");
  expect(p.b_v, 1, d, "b_v");
  expect(p.b_out, 1, d, "b_out");
  expect(p.w_fc1, d, f, "w_fc1");
  expect(p.b_fc1, 1, f, "b_fc1");
  expect(p.w_fc2, f, d, "w_fc2");
  expect(p.b_fc2, 1, d, "b_fc2");
}

/// Seeded random block. A handful of LayerNorm gamma channels are scaled up so
/// the activations show the channel outliers that motivate the transforms.
template <typename Scalar>
BlockParams<Scalar> random_block(Rng& rng, Index d, Index n_heads, Index outlier_channels = 2,
                                 double outlier_scale = 8.0) {
  BlockParams<Scalar> p;
  p.n_heads = n_heads;
  const double ws = 1.0 / std::sqrt(static_cast<double>(d));
  auto ln_gamma = [&] {
    Mat<Scalar> g = Mat<Scalar>::Ones(1, d) + normal_matrix<Scalar>(1, d, rng, 0.1);
    std::uniform_int_distribution<Index> pick(0, d - 1);
    for (Index k = 0; k < outlier_channels; ++k) g(0, pick(rng)) *= static_cast<Scalar>(outlier_scale);
    return g;
  };
  p.ln1_gamma = ln_gamma();
  p.ln1_beta = normal_matrix<Scalar>(1, d, rng, 0.1);
  p.w_q = normal_matrix<Scalar>(d, d, rng, ws);
  p.b_q = normal_matrix<Scalar>(1, d, rng, 0.02);
  p.w_k = normal_matrix<Scalar>(d, d, rng, ws);
  p.b_k = normal_matrix<Scalar>(1, d, rng, 0.02);
  p.w_v = normal_matrix<Scalar>(d, d, rng, ws);
  p.b_v = normal_matrix<Scalar>(1, d, rng, 0.02);
  p.w_out = normal_matrix<Scalar>(d, d, rng, ws);
  p.b_out = normal_matrix<Scalar>(1, d, rng, 0.02);
  p.ln2_gamma = ln_gamma();
  p.ln2_beta = normal_matrix<Scalar>(1, d, rng, 0.1);
  p.w_fc1 = normal_matrix<Scalar>(d, 4 * d, rng, ws);
  p.b_fc1 = normal_matrix<Scalar>(1, 4 * d, rng, 0.02);
  p.w_fc2 = normal_matrix<Scalar>(4 * d, d, rng, 0.5 * ws);
  p.b_fc2 = normal_matrix<Scalar>(1, d, rng, 0.02);
  validate(p);
  return p;
}

template <typename Scalar>
struct Model {
  std::vector<BlockParams<Scalar>> blocks;
};

/// Blocks drawn in order from one stream, so block 0 equals random_block(Rng(seed)).
template <typename Scalar>
Model<Scalar> random_model(std::uint64_t seed, Index d, Index n_heads, Index n_blocks) {
  Model<Scalar> m;
  Rng rng(seed);
  for (Index b = 0; b < n_blocks; ++b) m.blocks.push_back(random_block<Scalar>(rng, d, n_heads));
  return m;
}

template <typename To, typename From>
Model<To> cast_model(const Model<From>& m) {
  Model<To> out;
  for (const auto& b : m.blocks) out.blocks.push_back(cast_block<To>(b));
  return out;
}

// ---------------------------------------------------------------------------
// Placement configuration

struct PlacementConfig {
  std::optional<TransformKind> pre_qkv = TransformKind::DiagonalOnly;
  std::optional<TransformKind> pre_out_proj = TransformKind::PerHead;
  std::optional<TransformKind> pre_fc1 = TransformKind::DiagonalOnly;
  bool shift_qkv = true;
  bool shift_fc1 = true;
  std::optional<QuantConfig> weight_quant = QuantConfig{};
  std::optional<QuantConfig> act_quant;

  std::optional<TransformKind> kind(Placement p) const {
    switch (p) {
      case Placement::PreQkv: return pre_qkv;
      case Placement::PreOutProj: return pre_out_proj;
      case Placement::PreFc1: return pre_fc1;
    }
    return std::nullopt;
  }
  bool shift(Placement p) const {
    return (p == Placement::PreQkv && shift_qkv) || (p == Placement::PreFc1 && shift_fc1);
  }
};

/// With activation quantization only the diagonal of the LayerNorm-adjacent
/// transforms is optimized; full kinds there are lowered to diagonal-only.
inline PlacementConfig normalized(PlacementConfig c, std::ostream* log = nullptr) {
  if (!c.act_quant) return c;
  for (auto* slot : {&c.pre_qkv, &c.pre_fc1}) {
    if (*slot == TransformKind::Full) {
      if (log) *log << "note: activation quantization lowers full LayerNorm-side transforms to diagonal-only\n";
      *slot = TransformKind::DiagonalOnly;
    }
  }
  return c;
}

inline void validate(const PlacementConfig& c, Index d, Index head_dim) {
  if (c.pre_qkv == TransformKind::PerHead) throw ConfigError("placements.pre_qkv: per-head is not allowed");
  if (c.pre_fc1 == TransformKind::PerHead) throw ConfigError("placements.pre_fc1: per-head is not allowed");
  if (c.pre_out_proj == TransformKind::Full) {
    throw ConfigError("placements.pre_out_proj: full transforms would mix heads; use per-head or diagonal-only");
  }
  if (c.act_quant && (c.pre_qkv == TransformKind::Full || c.pre_fc1 == TransformKind::Full)) {
    throw ConfigError("placements: activation quantization requires diagonal-only LayerNorm-side transforms");
  }
  if (c.weight_quant) validate(*c.weight_quant);
  if (c.act_quant) {
    validate(*c.act_quant);
    if (c.act_quant->learnable_clip) throw ConfigError("act_quant.learnable_clip is not supported");
    if (c.act_quant->granularity != Granularity::PerTensor) throw ConfigError("act_quant must be per-tensor");
  }
  if (head_dim < 1 || d % head_dim != 0) throw ConfigError("placements: head_dim must divide the hidden size");
}

// ---------------------------------------------------------------------------
// Trainable state of a block

template <typename Scalar>
struct BlockTransforms {
  std::vector<AffineTransform<Scalar>> transforms;
  /// Raw learnable clip scalars, keyed "<weight>.hi" / "<weight>.lo".
  std::map<std::string, Mat<Scalar>> clip_raw;

  const AffineTransform<Scalar>* find(Placement p) const {
    for (const auto& t : transforms)
      if (t.placement == p) return &t;
    return nullptr;
  }
  AffineTransform<Scalar>* find(Placement p) {
    for (auto& t : transforms)
      if (t.placement == p) return &t;
    return nullptr;
  }
};

inline const char* const kLinearNames[] = {"q", "k", "v", "out", "fc1", "fc2"};

template <typename Scalar>
const Mat<Scalar>& linear_weight(const BlockParams<Scalar>& p, const std::string& name) {
  if (name == "q") return p.w_q;
  if (name == "k") return p.w_k;
  if (name == "v") return p.w_v;
  if (name == "out") return p.w_out;
  if (name == "fc1") return p.w_fc1;
  if (name == "fc2") return p.w_fc2;
  throw ConfigError("unknown linear '" + name + "'");
}

/// Placement whose transform feeds a linear layer, if any.
inline std::optional<Placement> placement_of(const std::string& linear) {
  if (linear == "q" || linear == "k" || linear == "v") return Placement::PreQkv;
  if (linear == "out") return Placement::PreOutProj;
  if (linear == "fc1") return Placement::PreFc1;
  return std::nullopt;
}

/// Learnable-clip leaves start at sigmoid^-1(1 - 1e-4), i.e. practically the full range.
template <typename Scalar>
std::map<std::string, Mat<Scalar>> init_clips(const BlockParams<Scalar>& p, const QuantConfig& wq) {
  std::map<std::string, Mat<Scalar>> out;
  if (!wq.learnable_clip) return out;
  for (const char* name : kLinearNames) {
    const Mat<Scalar>& w = linear_weight(p, name);
    const GroupLayout layout = group_layout(wq, w.rows(), w.cols());
    const Mat<Scalar> raw =
        Mat<Scalar>::Constant(layout.group_rows(w.rows()), layout.group_cols(w.cols()), static_cast<Scalar>(kClipInitRaw));
    out[std::string(name) + ".hi"] = raw;
    if (!wq.symmetric) out[std::string(name) + ".lo"] = raw;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activation statistics

template <typename Scalar>
struct ChannelStats {
  Mat<Scalar> max, min, absmax;  // 1 x d

  void merge(const Mat<Scalar>& x) {
    const Mat<Scalar> mx = x.colwise().maxCoeff();
    const Mat<Scalar> mn = x.colwise().minCoeff();
    const Mat<Scalar> ab = x.cwiseAbs().colwise().maxCoeff();
    if (max.size() == 0) {
      max = mx;
      min = mn;
      absmax = ab;
    } else {
      max = max.cwiseMax(mx);
      min = min.cwiseMin(mn);
      absmax = absmax.cwiseMax(ab);
    }
  }
};

template <typename Scalar>
struct BlockStats {
  ChannelStats<Scalar> input;
  std::map<Placement, ChannelStats<Scalar>> act;
  /// Per input channel: max |W_jk| over the consuming weights' row j.
  std::map<Placement, Mat<Scalar>> w_absmax;
};

// ---------------------------------------------------------------------------
// Tape evaluation

template <typename Scalar>
struct PreparedBlock {
  struct Linear {
    Var<Scalar> w, b;
  };
  struct Input {
    std::optional<Var<Scalar>> inv;
    std::optional<Var<Scalar>> shift;
  };
  Index n_heads = 1;
  Var<Scalar> ln1_g, ln1_b, ln2_g, ln2_b;
  Linear q, k, v, out, fc1, fc2;
  Input qkv_in, out_in, fc1_in;
  std::optional<QuantConfig> act_quant;
  std::map<Placement, InversionDiagnostics> diagnostics;
};

/// Trainable leaves created by prepare_transformed.
template <typename Scalar>
struct BlockLeaves {
  std::map<Placement, Var<Scalar>> a_star;
  std::map<Placement, Var<Scalar>> shift;
  std::map<std::string, Var<Scalar>> clips;
};

/// Leaf names used on the tape.
inline std::string a_leaf_name(Placement p) { return "A." + to_string(p); }
inline std::string shift_leaf_name(Placement p) { return "delta." + to_string(p); }
inline std::string clip_leaf_name(const std::string& key) { return "clip." + key; }

/// Parameters as constants; activation quantization at linear inputs when act_quant is set.
template <typename Scalar>
PreparedBlock<Scalar> prepare_plain(Tape<Scalar>& t, const BlockParams<Scalar>& p,
                                    const std::optional<QuantConfig>& act_quant = std::nullopt) {
  PreparedBlock<Scalar> pb;
  pb.n_heads = p.n_heads;
  pb.ln1_g = t.constant(p.ln1_gamma);
  pb.ln1_b = t.constant(p.ln1_beta);
  pb.ln2_g = t.constant(p.ln2_gamma);
  pb.ln2_b = t.constant(p.ln2_beta);
  pb.q = {t.constant(p.w_q), t.constant(p.b_q)};
  pb.k = {t.constant(p.w_k), t.constant(p.b_k)};
  pb.v = {t.constant(p.w_v), t.constant(p.b_v)};
  pb.out = {t.constant(p.w_out), t.constant(p.b_out)};
  pb.fc1 = {t.constant(p.w_fc1), t.constant(p.b_fc1)};
  pb.fc2 = {t.constant(p.w_fc2), t.constant(p.b_fc2)};
  pb.act_quant = act_quant;
  return pb;
}

/// Transformed-quantized parameters: per placement, A* = A o GM and its inverse,
/// weights Q(A* W) and biases b + delta W. With `trainable`, A*, delta and the clip
/// scalars are tape leaves (recorded in `leaves`); otherwise constants.
template <typename Scalar>
PreparedBlock<Scalar> prepare_transformed(Tape<Scalar>& t, const BlockParams<Scalar>& p, const PlacementConfig& cfg,
                                          const BlockTransforms<Scalar>& state, bool trainable,
                                          BlockLeaves<Scalar>* leaves = nullptr) {
  PreparedBlock<Scalar> pb = prepare_plain(t, p, cfg.act_quant);
  std::map<Placement, Var<Scalar>> a_star;
  std::map<Placement, Var<Scalar>> shift;
  for (Placement pl : kPlacements) {
    const AffineTransform<Scalar>* tr = state.find(pl);
    if (!tr) continue;
    const Mat<Scalar> eff = tr->effective();
    Var<Scalar> a = trainable ? t.leaf(a_leaf_name(pl), eff) : t.constant(eff);
    a_star.emplace(pl, a);
    InversionDiagnostics diag;
    Var<Scalar> inv;
    try {
      inv = inverse(a, &diag);
    } catch (const SingularMatrixError& e) {
      throw SingularMatrixError(to_string(pl) + ": " + e.what(), e.pivot());
    }
    pb.diagnostics[pl] = diag;
    auto& in = pl == Placement::PreQkv ? pb.qkv_in : pl == Placement::PreOutProj ? pb.out_in : pb.fc1_in;
    in.inv = inv;
    if (tr->has_shift()) {
      Var<Scalar> s = trainable ? t.leaf(shift_leaf_name(pl), tr->shift) : t.constant(tr->shift);
      shift.emplace(pl, s);
      in.shift = s;
    }
  }
  if (leaves) {
    leaves->a_star = a_star;
    leaves->shift = shift;
  }

  auto build = [&](const std::string& name, typename PreparedBlock<Scalar>::Linear& slot) {
    const Var<Scalar> w = slot.w;
    Var<Scalar> wt = w;
    const auto pl = placement_of(name);
    if (pl && a_star.count(*pl)) wt = transform_matmul(a_star.at(*pl), w);
    if (cfg.weight_quant) {
      std::optional<Var<Scalar>> hi, lo;
      auto clip = [&](const std::string& key) -> std::optional<Var<Scalar>> {
        auto it = state.clip_raw.find(key);
        if (it == state.clip_raw.end()) return std::nullopt;
        Var<Scalar> v = trainable ? t.leaf(clip_leaf_name(key), it->second) : t.constant(it->second);
        if (leaves) leaves->clips.emplace(key, v);
        return v;
      };
      if (cfg.weight_quant->learnable_clip) {
        hi = clip(name + ".hi");
        lo = clip(name + ".lo");
      }
      wt = fake_quant_learnable(wt, *cfg.weight_quant, hi, lo);
    }
    if (pl && shift.count(*pl)) slot.b = slot.b + matmul(shift.at(*pl), w);
    slot.w = wt;
  };
  build("q", pb.q);
  build("k", pb.k);
  build("v", pb.v);
  build("out", pb.out);
  build("fc1", pb.fc1);
  build("fc2", pb.fc2);
  return pb;
}

/// Values captured at the placement inputs during a forward pass.
template <typename Scalar>
struct BlockTaps {
  Mat<Scalar> qkv_input, out_input, fc1_input;
};

template <typename Scalar>
Var<Scalar> linear_input(Var<Scalar> x, const typename PreparedBlock<Scalar>::Input& in,
                         const std::optional<QuantConfig>& act_quant) {
  if (in.inv) {
    if (in.shift) x = sub_row(x, *in.shift);
    x = transform_matmul(x, *in.inv);
  }
  if (act_quant) x = fake_quant_learnable(x, *act_quant);
  return x;
}

template <typename Scalar>
Var<Scalar> block_apply(const PreparedBlock<Scalar>& pb, Var<Scalar> x, BlockTaps<Scalar>* taps = nullptr) {
  const Var<Scalar> h = layer_norm(x, pb.ln1_g, pb.ln1_b);
  if (taps) taps->qkv_input = h.value();
  const Var<Scalar> hin = linear_input(h, pb.qkv_in, pb.act_quant);
  const Var<Scalar> q = add_row(matmul(hin, pb.q.w), pb.q.b);
  const Var<Scalar> k = add_row(matmul(hin, pb.k.w), pb.k.b);
  const Var<Scalar> v = add_row(matmul(hin, pb.v.w), pb.v.b);
  const Index hd = q.cols() / pb.n_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
  std::vector<Var<Scalar>> heads;
  for (Index head = 0; head < pb.n_heads; ++head) {
    const Var<Scalar> qh = slice_cols(q, head * hd, hd);
    const Var<Scalar> kh = slice_cols(k, head * hd, hd);
    const Var<Scalar> vh = slice_cols(v, head * hd, hd);
    const Var<Scalar> probs = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt), true);
    heads.push_back(matmul(probs, vh));
  }
  const Var<Scalar> o = heads.size() == 1 ? heads.front() : concat_cols(heads);
  if (taps) taps->out_input = o.value();
  const Var<Scalar> attn = add_row(matmul(linear_input(o, pb.out_in, pb.act_quant), pb.out.w), pb.out.b);
  const Var<Scalar> x1 = x + attn;
  const Var<Scalar> h2 = layer_norm(x1, pb.ln2_g, pb.ln2_b);
  if (taps) taps->fc1_input = h2.value();
  const Var<Scalar> f = relu(add_row(matmul(linear_input(h2, pb.fc1_in, pb.act_quant), pb.fc1.w), pb.fc1.b));
  const Var<Scalar> fin = pb.act_quant ? fake_quant_learnable(f, *pb.act_quant) : f;
  return x1 + add_row(matmul(fin, pb.fc2.w), pb.fc2.b);
}

/// How a block is evaluated.
template <typename Scalar>
struct BlockMode {
  bool transformed = false;
  PlacementConfig placement;
  BlockTransforms<Scalar> state;

  static BlockMode full_precision() { return {}; }
  static BlockMode transformed_quantized(PlacementConfig placement, BlockTransforms<Scalar> state) {
    return {true, std::move(placement), std::move(state)};
  }
};

template <typename Scalar>
PreparedBlock<Scalar> prepare(Tape<Scalar>& t, const BlockParams<Scalar>& p, const BlockMode<Scalar>& mode) {
  if (!mode.transformed) return prepare_plain(t, p);
  return prepare_transformed(t, p, mode.placement, mode.state, false);
}

template <typename Scalar>
Mat<Scalar> block_forward(const BlockParams<Scalar>& p, const Mat<Scalar>& x, const BlockMode<Scalar>& mode,
                          PrecisionScheme scheme = default_scheme<Scalar>()) {
  validate(p);
  if (x.cols() != p.dim()) throw ShapeError("block_forward: input has " + std::to_string(x.cols()) + " channels, block has " + std::to_string(p.dim()));
  Tape<Scalar> t(scheme);
  const auto pb = prepare(t, p, mode);
  return block_apply(pb, t.constant(x)).value();
}

/// Mean over batches of ||f_a(x) - f_b(x)||_F^2, accumulated in batch order.
template <typename Scalar>
double block_loss(const BlockParams<Scalar>& p, const std::vector<Mat<Scalar>>& calib, const BlockMode<Scalar>& a,
                  const BlockMode<Scalar>& b, PrecisionScheme scheme = default_scheme<Scalar>()) {
  if (calib.empty()) throw ConfigError("block_loss: calibration set is empty");
  double total = 0.0;
  for (const auto& x : calib) {
    total += static_cast<double>((block_forward(p, x, a, scheme) - block_forward(p, x, b, scheme)).squaredNorm());
  }
  return total / static_cast<double>(calib.size());
}

template <typename Scalar>
double block_loss(const BlockParams<Scalar>& p, const std::vector<Mat<Scalar>>& calib, const BlockMode<Scalar>& mode,
                  PrecisionScheme scheme = default_scheme<Scalar>()) {
  return block_loss(p, calib, BlockMode<Scalar>::full_precision(), mode, scheme);
}

template <typename Scalar>
BlockStats<Scalar> collect_stats(const BlockParams<Scalar>& p, const std::vector<Mat<Scalar>>& calib) {
  if (calib.empty()) throw ConfigError("collect_stats: calibration set is empty");
  validate(p);
  BlockStats<Scalar> s;
  for (const auto& x : calib) {
    Tape<Scalar> t;
    const auto pb = prepare_plain(t, p);
    BlockTaps<Scalar> taps;
    block_apply(pb, t.constant(x), &taps);
    s.input.merge(x);
    s.act[Placement::PreQkv].merge(taps.qkv_input);
    s.act[Placement::PreOutProj].merge(taps.out_input);
    s.act[Placement::PreFc1].merge(taps.fc1_input);
  }
  Mat<Scalar> qkv(p.dim(), 3 * p.dim());
  qkv << p.w_q, p.w_k, p.w_v;
  s.w_absmax[Placement::PreQkv] = qkv.cwiseAbs().rowwise().maxCoeff().transpose();
  s.w_absmax[Placement::PreOutProj] = p.w_out.cwiseAbs().rowwise().maxCoeff().transpose();
  s.w_absmax[Placement::PreFc1] = p.w_fc1.cwiseAbs().rowwise().maxCoeff().transpose();
  return s;
}

/// Initial transforms: diagonal SmoothQuant-style scales (on the shifted range
/// when a shift is active) and midpoint shifts.
template <typename Scalar>
BlockTransforms<Scalar> init_transforms(const BlockParams<Scalar>& p, const BlockStats<Scalar>& stats,
                                        const PlacementConfig& cfg, int epochs, double alpha,
                                        double smooth_exponent = 0.5) {
  validate(cfg, p.dim(), p.head_dim());
  BlockTransforms<Scalar> out;
  for (Placement pl : kPlacements) {
    const auto kind = cfg.kind(pl);
    if (!kind) continue;
    const auto& act = stats.act.at(pl);
    AffineTransform<Scalar> tr;
    tr.placement = pl;
    tr.kind = *kind;
    tr.schedule.target_epochs = epochs;
    tr.schedule.alpha = alpha;
    tr.schedule.hidden_size = *kind == TransformKind::PerHead ? p.head_dim() : p.dim();
    Mat<Scalar> act_abs = act.absmax;
    if (cfg.shift(pl)) {
      tr.shift = init_shift(act.max, act.min);
      act_abs = (act.max - act.min) / Scalar(2);
    }
    tr.a = init_diagonal(act_abs, stats.w_absmax.at(pl), smooth_exponent);
    out.transforms.push_back(std::move(tr));
  }
  if (cfg.weight_quant) out.clip_raw = init_clips(p, *cfg.weight_quant);
  return out;
}

}  // namespace afq
