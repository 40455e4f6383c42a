#include "afq/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "afq/container.hpp"
#include "afq/random.hpp"

namespace afq {

namespace {

using nlohmann::json;

/// Walks one JSON object, remembering which keys were read so leftovers can be
/// reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    const json* v = get(key);
    if (!v) return;
    out = convert<T>(*v, field(key));
  }

  template <typename T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
        throw ConfigError(path + ": expected a non-negative integer");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path + ": expected a number");
      return v.get<T>();
    } else {
      if (!v.is_string()) throw ConfigError(path + ": expected a string");
      return v.get<std::string>();
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown key");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
void with_path(const std::string& path, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(path, 0) == 0) throw;
    throw ConfigError(path + ": " + msg);
  }
}

std::optional<QuantConfig> parse_quant(const json* v, const std::string& path, std::optional<QuantConfig> fallback) {
  if (!v) return fallback;
  if (v->is_null()) return std::nullopt;
  ObjectReader r(*v, path);
  QuantConfig q;
  r.read("bits", q.bits);
  std::string gran(to_string(q.granularity));
  r.read("granularity", gran);
  with_path(r.field("granularity"), [&] { q.granularity = parse_granularity(gran); });
  r.read("group_size", q.group_size);
  r.read("symmetric", q.symmetric);
  r.read("learnable_clip", q.learnable_clip);
  r.finish();
  with_path(path, [&] { validate(q); });
  return q;
}

std::optional<TransformKind> parse_kind(const std::string& s, const std::string& path) {
  if (s == "none") return std::nullopt;
  std::optional<TransformKind> k;
  with_path(path, [&] { k = parse_transform_kind(s); });
  return k;
}

json quant_json(const std::optional<QuantConfig>& q) {
  if (!q) return nullptr;
  return {{"bits", q->bits},
          {"granularity", std::string(to_string(q->granularity))},
          {"group_size", q->group_size},
          {"symmetric", q->symmetric},
          {"learnable_clip", q->learnable_clip}};
}

std::string kind_name(const std::optional<TransformKind>& k) { return k ? to_string(*k) : "none"; }

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  RunConfig cfg;
  ObjectReader root(doc, "");

  if (const json* m = root.get("model")) {
    ObjectReader r(*m, "model");
    r.read("hidden", cfg.model.hidden);
    r.read("heads", cfg.model.heads);
    r.read("blocks", cfg.model.blocks);
    r.read("seed", cfg.model.seed);
    r.finish();
  }

  if (const json* c = root.get("calibration")) {
    ObjectReader r(*c, "calibration");
    const json* syn = r.get("synthetic");
    const json* file = r.get("file");
    r.finish();
    if ((syn != nullptr) == (file != nullptr)) {
      throw ConfigError("calibration: exactly one of 'synthetic' or 'file' is required");
    }
    if (syn) {
      SyntheticCalibration s;
      ObjectReader sr(*syn, "calibration.synthetic");
      sr.read("seed", s.seed);
      sr.read("batches", s.batches);
      sr.read("tokens", s.tokens);
      sr.finish();
      cfg.calibration = s;
    } else {
      FileCalibration f;
      ObjectReader fr(*file, "calibration.file");
      std::string path;
      fr.read("path", path);
      if (path.empty()) throw ConfigError("calibration.file.path: required");
      f.path = path;
      fr.read("embedding_seed", f.embedding_seed);
      fr.read("vocab", f.vocab);
      fr.finish();
      cfg.calibration = f;
    }
  }

  if (const json* q = root.get("quantization")) {
    ObjectReader r(*q, "quantization");
    cfg.placement.weight_quant = parse_quant(r.get("weight"), "quantization.weight", cfg.placement.weight_quant);
    cfg.placement.act_quant = parse_quant(r.get("activation"), "quantization.activation", cfg.placement.act_quant);
    r.finish();
  }

  if (const json* p = root.get("placements")) {
    ObjectReader r(*p, "placements");
    for (auto [key, slot] : {std::pair{"pre_qkv", &cfg.placement.pre_qkv},
                             std::pair{"pre_out_proj", &cfg.placement.pre_out_proj},
                             std::pair{"pre_fc1", &cfg.placement.pre_fc1}}) {
      std::string s = kind_name(*slot);
      r.read(key, s);
      *slot = parse_kind(s, r.field(key));
    }
    r.read("shift_qkv", cfg.placement.shift_qkv);
    r.read("shift_fc1", cfg.placement.shift_fc1);
    r.finish();
  }

  if (const json* m = root.get("mask")) {
    ObjectReader r(*m, "mask");
    if (const json* a = r.get("alpha")) {
      if (a->is_string() && a->get<std::string>() == "auto") {
        cfg.optimizer.alpha.reset();
      } else {
        cfg.optimizer.alpha = ObjectReader::convert<double>(*a, "mask.alpha");
      }
    }
    r.finish();
  }

  if (const json* o = root.get("optimizer")) {
    ObjectReader r(*o, "optimizer");
    auto& oc = cfg.optimizer;
    r.read("epochs", oc.epochs);
    if (const json* lb = r.get("last_block_epochs")) {
      if (lb->is_null()) oc.last_block_epochs.reset();
      else oc.last_block_epochs = ObjectReader::convert<int>(*lb, "optimizer.last_block_epochs");
    }
    r.read("lr_affine", oc.lr_affine);
    r.read("lr_clip", oc.lr_clip);
    r.read("beta1", oc.adam.beta1);
    r.read("beta2", oc.adam.beta2);
    r.read("eps", oc.adam.eps);
    r.read("seed", oc.seed);
    r.read("smooth_exponent", oc.smooth_exponent);
    std::string chaining = to_string(oc.next_block_input);
    r.read("chaining", chaining);
    with_path("optimizer.chaining", [&] { oc.next_block_input = parse_chaining(chaining); });
    r.finish();
  }

  if (root.get("precision")) {
    std::string s;
    root.read("precision", s);
    with_path("precision", [&] { cfg.precision = parse_scheme(s); });
  }
  root.finish();
  validate(cfg);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

void validate(const RunConfig& cfg) {
  const auto& m = cfg.model;
  if (m.hidden < 1) throw ConfigError("model.hidden: must be positive");
  if (m.heads < 1 || m.hidden % m.heads != 0) throw ConfigError("model.heads: must divide model.hidden");
  if (m.blocks < 1) throw ConfigError("model.blocks: must be positive");
  if (const auto* s = std::get_if<SyntheticCalibration>(&cfg.calibration)) {
    if (s->batches < 1) throw ConfigError("calibration.synthetic.batches: must be positive");
    if (s->tokens < 1) throw ConfigError("calibration.synthetic.tokens: must be positive");
  } else {
    const auto& f = std::get<FileCalibration>(cfg.calibration);
    if (f.vocab < 1 || f.vocab > 65536) throw ConfigError("calibration.file.vocab: must lie in [1, 65536]");
  }
  with_path("placements", [&] { validate(normalized(cfg.placement), m.hidden, m.hidden / m.heads); });
  with_path("optimizer", [&] { validate(cfg.optimizer); });
}

std::string dump_run_config(const RunConfig& cfg) {
  json j;
  j["model"] = {{"hidden", cfg.model.hidden}, {"heads", cfg.model.heads}, {"blocks", cfg.model.blocks},
                {"seed", cfg.model.seed}};
  if (const auto* s = std::get_if<SyntheticCalibration>(&cfg.calibration)) {
    j["calibration"] = {{"synthetic", {{"seed", s->seed}, {"batches", s->batches}, {"tokens", s->tokens}}}};
  } else {
    const auto& f = std::get<FileCalibration>(cfg.calibration);
    j["calibration"] = {
        {"file", {{"path", f.path.string()}, {"embedding_seed", f.embedding_seed}, {"vocab", f.vocab}}}};
  }
  j["quantization"] = {{"weight", quant_json(cfg.placement.weight_quant)},
                       {"activation", quant_json(cfg.placement.act_quant)}};
  j["placements"] = {{"pre_qkv", kind_name(cfg.placement.pre_qkv)},
                     {"pre_out_proj", kind_name(cfg.placement.pre_out_proj)},
                     {"pre_fc1", kind_name(cfg.placement.pre_fc1)},
                     {"shift_qkv", cfg.placement.shift_qkv},
                     {"shift_fc1", cfg.placement.shift_fc1}};
  j["mask"] = {{"alpha", cfg.optimizer.alpha ? json(*cfg.optimizer.alpha) : json("auto")}};
  const auto& o = cfg.optimizer;
  j["optimizer"] = {{"epochs", o.epochs},
                    {"last_block_epochs", o.last_block_epochs ? json(*o.last_block_epochs) : json(nullptr)},
                    {"lr_affine", o.lr_affine},
                    {"lr_clip", o.lr_clip},
                    {"beta1", o.adam.beta1},
                    {"beta2", o.adam.beta2},
                    {"eps", o.adam.eps},
                    {"seed", o.seed},
                    {"smooth_exponent", o.smooth_exponent},
                    {"chaining", to_string(o.next_block_input)}};
  j["precision"] = std::string(to_string(cfg.precision));
  return j.dump(2) + "\n";
}

Mat<double> embedding_row(std::uint64_t seed, std::uint64_t id, Index width) {
  Rng rng(derive_seed(seed, id));
  return normal_matrix<double>(1, width, rng);
}

std::vector<Mat<double>> synthetic_calibration(const SyntheticCalibration& src, Index hidden) {
  if (src.batches < 1 || src.tokens < 1) throw ConfigError("calibration: batch and token counts must be positive");
  Rng rng(src.seed);
  std::vector<Mat<double>> out;
  for (Index b = 0; b < src.batches; ++b) out.push_back(normal_matrix<double>(src.tokens, hidden, rng));
  return out;
}

std::vector<Mat<double>> load_calibration(const CalibrationSource& src, Index hidden) {
  if (const auto* s = std::get_if<SyntheticCalibration>(&src)) return synthetic_calibration(*s, hidden);
  const auto& f = std::get<FileCalibration>(src);
  const auto tensors = load_container(f.path);
  const Tensor& ids = find_tensor(tensors, "ids");
  if (ids.dtype != DType::U16) throw ConfigError("calibration file: 'ids' must be u16");
  if (ids.shape.size() != 2 && ids.shape.size() != 1) throw ConfigError("calibration file: 'ids' must be [batches, tokens]");
  const auto values = tensor_values<std::uint16_t>(ids);
  const Index batches = ids.shape.size() == 2 ? static_cast<Index>(ids.shape[0]) : 1;
  const Index tokens = static_cast<Index>(ids.shape.back());
  if (batches < 1 || tokens < 1) throw ConfigError("calibration file: 'ids' is empty");
  std::vector<Mat<double>> out;
  for (Index b = 0; b < batches; ++b) {
    Mat<double> x(tokens, hidden);
    for (Index t = 0; t < tokens; ++t) {
      const std::uint16_t id = values[static_cast<std::size_t>(b * tokens + t)];
      if (id >= f.vocab) {
        throw ConfigError("calibration file: id " + std::to_string(id) + " out of vocab range " + std::to_string(f.vocab));
      }
      x.row(t) = embedding_row(f.embedding_seed, id, hidden);
    }
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace afq
