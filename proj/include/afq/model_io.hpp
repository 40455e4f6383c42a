#pragma once

// Blocks, learned transforms and fused exports as named container tensors.
// Float payloads keep the scalar type of the pipeline (f64 or f32).

#include <string>
#include <vector>

#include "afq/container.hpp"
#include "afq/fusion.hpp"
#include "afq/transformer.hpp"

namespace afq {

inline std::string block_prefix(std::size_t b) { return "block" + std::to_string(b) + "."; }

namespace detail {

template <typename T>
Tensor scalar_row(std::string name, std::vector<double> values) {
  std::vector<T> v(values.begin(), values.end());
  return make_tensor<T>(std::move(name), {static_cast<std::uint64_t>(v.size())}, v.data());
}

inline std::vector<double> row_values(const std::vector<Tensor>& ts, const std::string& name) {
  return tensor_values<double>(find_tensor(ts, name));
}

inline Index block_count(const std::vector<Tensor>& ts) {
  Index n = 0;
  while (try_find_tensor(ts, block_prefix(static_cast<std::size_t>(n)) + "n_heads")) ++n;
  return n;
}

template <typename Scalar>
void append_block(std::vector<Tensor>& out, const std::string& prefix, const BlockParams<Scalar>& p) {
  out.push_back(scalar_row<std::uint16_t>(prefix + "n_heads", {static_cast<double>(p.n_heads)}));
  visit_tensors(p, [&](const char* name, const Mat<Scalar>& m) { out.push_back(matrix_tensor(prefix + name, m)); });
}

template <typename Scalar>
BlockParams<Scalar> read_block(const std::vector<Tensor>& ts, const std::string& prefix) {
  BlockParams<Scalar> p;
  p.n_heads = static_cast<Index>(row_values(ts, prefix + "n_heads").at(0));
  visit_tensors(p, [&](const char* name, Mat<Scalar>& m) { m = tensor_matrix<Scalar>(find_tensor(ts, prefix + name)); });
  validate(p);
  return p;
}

}  // namespace detail

template <typename Scalar>
std::vector<Tensor> model_tensors(const Model<Scalar>& model) {
  std::vector<Tensor> out;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) detail::append_block(out, block_prefix(b), model.blocks[b]);
  return out;
}

template <typename Scalar>
Model<Scalar> model_from_tensors(const std::vector<Tensor>& ts) {
  Model<Scalar> m;
  const Index n = detail::block_count(ts);
  if (n == 0) throw ManifestError("container holds no blocks");
  for (Index b = 0; b < n; ++b) m.blocks.push_back(detail::read_block<Scalar>(ts, block_prefix(static_cast<std::size_t>(b))));
  return m;
}

/// Per placement: raw A, the final mask, the shift, and a meta row
/// [kind, target_epochs, alpha, hidden_size, epoch]; plus raw clip scalars.
template <typename Scalar>
std::vector<Tensor> transforms_tensors(const std::vector<BlockTransforms<Scalar>>& blocks) {
  std::vector<Tensor> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string prefix = block_prefix(b);
    out.push_back(detail::scalar_row<std::uint16_t>(prefix + "n_transforms", {double(blocks[b].transforms.size())}));
    for (const auto& t : blocks[b].transforms) {
      const std::string p = prefix + to_string(t.placement) + ".";
      out.push_back(detail::scalar_row<double>(
          p + "meta", {double(static_cast<int>(t.kind)), double(t.schedule.target_epochs), t.schedule.alpha,
                       double(t.schedule.hidden_size), double(t.epoch)}));
      out.push_back(matrix_tensor(p + "A", t.a));
      out.push_back(matrix_tensor(p + "mask", t.mask()));
      if (t.has_shift()) out.push_back(matrix_tensor(p + "delta", t.shift));
    }
    for (const auto& [key, raw] : blocks[b].clip_raw) out.push_back(matrix_tensor(prefix + "clip." + key, raw));
  }
  return out;
}

template <typename Scalar>
std::vector<BlockTransforms<Scalar>> transforms_from_tensors(const std::vector<Tensor>& ts) {
  std::vector<BlockTransforms<Scalar>> out;
  for (std::size_t b = 0; try_find_tensor(ts, block_prefix(b) + "n_transforms"); ++b) {
    const std::string prefix = block_prefix(b);
    BlockTransforms<Scalar> bt;
    for (Placement pl : kPlacements) {
      const std::string p = prefix + to_string(pl) + ".";
      if (!try_find_tensor(ts, p + "meta")) continue;
      const auto meta = detail::row_values(ts, p + "meta");
      if (meta.size() != 5) throw ManifestError(p + "meta: expected 5 entries");
      AffineTransform<Scalar> t;
      t.placement = pl;
      t.kind = static_cast<TransformKind>(static_cast<int>(meta[0]));
      t.schedule.target_epochs = static_cast<int>(meta[1]);
      t.schedule.alpha = meta[2];
      t.schedule.hidden_size = static_cast<Index>(meta[3]);
      t.epoch = static_cast<int>(meta[4]);
      t.a = tensor_matrix<Scalar>(find_tensor(ts, p + "A"));
      if (const Tensor* d = try_find_tensor(ts, p + "delta")) t.shift = tensor_matrix<Scalar>(*d);
      bt.transforms.push_back(std::move(t));
    }
    const std::string clip_prefix = prefix + "clip.";
    for (const auto& t : ts) {
      if (t.name.rfind(clip_prefix, 0) == 0) bt.clip_raw[t.name.substr(clip_prefix.size())] = tensor_matrix<Scalar>(t);
    }
    out.push_back(std::move(bt));
  }
  return out;
}

/// Fused model: dense LayerNorm parameters and biases, integer codes with step
/// size / zero point / layout for every exported weight, dense for the rest.
/// Codes use u8 up to 8 bits and u16 beyond.
template <typename Scalar>
std::vector<Tensor> fused_tensors(const std::vector<FusedBlock<Scalar>>& blocks) {
  std::vector<Tensor> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string prefix = block_prefix(b);
    const auto& fb = blocks[b];
    out.push_back(detail::scalar_row<std::uint16_t>(prefix + "n_heads", {double(fb.params.n_heads)}));
    if (fb.act_quant) {
      out.push_back(detail::scalar_row<double>(prefix + "act_quant", {double(fb.act_quant->bits), fb.act_quant->symmetric ? 1.0 : 0.0}));
    }
    visit_tensors(fb.params, [&](const char* name, const Mat<Scalar>& m) {
      const std::string n = name;
      const auto it = n.rfind("w_", 0) == 0 ? fb.exports.find(n.substr(2)) : fb.exports.end();
      if (it == fb.exports.end()) {
        out.push_back(matrix_tensor(prefix + n, m));
        return;
      }
      const auto& q = it->second;
      const auto& qp = q.qparams;
      const std::string p = prefix + n + ".";
      if (qp.bits <= 8) {
        const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> c = q.codes.template cast<std::uint8_t>();
        out.push_back(matrix_tensor(p + "codes", c));
      } else {
        out.push_back(matrix_tensor(p + "codes", q.codes));
      }
      out.push_back(matrix_tensor(p + "delta", qp.delta));
      out.push_back(matrix_tensor(p + "zero_point", qp.zero_point));
      out.push_back(detail::scalar_row<double>(p + "qmeta", {double(qp.bits), qp.symmetric ? 1.0 : 0.0,
                                                              double(qp.layout.rows_per_group), double(qp.layout.cols_per_group)}));
    });
  }
  return out;
}

template <typename Scalar>
std::vector<FusedBlock<Scalar>> fused_from_tensors(const std::vector<Tensor>& ts) {
  std::vector<FusedBlock<Scalar>> out;
  const Index n = detail::block_count(ts);
  for (Index b = 0; b < n; ++b) {
    const std::string prefix = block_prefix(static_cast<std::size_t>(b));
    FusedBlock<Scalar> fb;
    fb.params.n_heads = static_cast<Index>(detail::row_values(ts, prefix + "n_heads").at(0));
    if (try_find_tensor(ts, prefix + "act_quant")) {
      const auto a = detail::row_values(ts, prefix + "act_quant");
      QuantConfig q;
      q.bits = static_cast<int>(a.at(0));
      q.symmetric = a.at(1) != 0.0;
      q.granularity = Granularity::PerTensor;
      fb.act_quant = q;
    }
    visit_tensors(fb.params, [&](const char* name, Mat<Scalar>& m) {
      const std::string p = prefix + name;
      if (const Tensor* dense = try_find_tensor(ts, p)) {
        m = tensor_matrix<Scalar>(*dense);
        return;
      }
      QuantizedTensor<Scalar> q;
      q.codes = tensor_matrix<std::uint16_t>(find_tensor(ts, p + ".codes"));
      auto& qp = q.qparams;
      qp.delta = tensor_matrix<Scalar>(find_tensor(ts, p + ".delta"));
      qp.zero_point = tensor_matrix<Scalar>(find_tensor(ts, p + ".zero_point"));
      const auto meta = detail::row_values(ts, p + ".qmeta");
      qp.bits = static_cast<int>(meta.at(0));
      qp.symmetric = meta.at(1) != 0.0;
      qp.layout.rows_per_group = static_cast<Index>(meta.at(2));
      qp.layout.cols_per_group = static_cast<Index>(meta.at(3));
      m = dequantize(q);
      fb.exports.emplace(std::string(name).substr(2), std::move(q));
    });
    validate(fb.params);
    out.push_back(std::move(fb));
  }
  if (out.empty()) throw ManifestError("container holds no fused blocks");
  return out;
}

}  // namespace afq
