// afq: command-line front end. Machine output goes to files and stdout,
// progress and timing to stderr. Exit codes: 0 ok, 1 usage/validation, 2 divergence.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "afq/checks.hpp"
#include "afq/config.hpp"
#include "afq/container.hpp"
#include "afq/fusion.hpp"
#include "afq/model_io.hpp"
#include "afq/pipeline.hpp"
#include "afq/report.hpp"

namespace fs = std::filesystem;
using namespace afq;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kDiverged = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

RunConfig config_from(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

std::vector<double> parse_alpha_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size() || !(v >= 0.0)) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("--alpha-sweep: '" + item + "' is not a non-negative number");
    }
  }
  if (out.empty()) throw UsageError("--alpha-sweep: no values");
  return out;
}

void emit(const std::string& text, const std::string& out_path) {
  std::cout << text;
  if (!out_path.empty()) write_text(out_path, text);
}

// ---------------------------------------------------------------------------

struct QuantizeArgs {
  std::string config, model, out;
  bool synthetic = false;
};

int cmd_quantize(const QuantizeArgs& a) {
  if (a.synthetic == !a.model.empty()) throw UsageError("quantize: pass exactly one of --model or --synthetic");
  const RunConfig cfg = config_from(a.config);
  const std::optional<fs::path> model = a.model.empty() ? std::nullopt : std::optional<fs::path>(a.model);
  Stopwatch clock;
  with_scalar(cfg.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto run = run_pipeline<S>(cfg, model, &std::cerr);
    write_run_dir(a.out, cfg, run);
    for (std::size_t b = 0; b < run.blocks.size(); ++b) {
      const auto& r = run.blocks[b].report;
      std::cerr << "block " << b << ": " << r.label << " loss " << r.initial_loss << " -> " << r.final_loss << " ("
                << r.wall_seconds << " s)\n";
    }
    if (run.fuse_error) std::cerr << "warning: fused.afqt not written: " << *run.fuse_error << "\n";
    return 0;
  });
  std::cerr << "wall time " << clock.seconds() << " s\n";
  return kOk;
}

struct MergeArgs {
  Index dims = 512, dim_out = 0, tokens = 256;
  int trials = 50;
  std::string scheme = "double", out;
  bool all = false;
  std::uint64_t seed = 7;
};

int cmd_merge_error(const MergeArgs& a) {
  MergeErrorConfig cfg;
  cfg.dim_in = a.dims;
  cfg.dim_out = a.dim_out > 0 ? a.dim_out : a.dims;
  cfg.tokens = a.tokens;
  cfg.trials = a.trials;
  cfg.seed = a.seed;
  validate(cfg);
  std::vector<PrecisionScheme> schemes;
  if (a.all) schemes = {PrecisionScheme::Double, PrecisionScheme::FloatDouble, PrecisionScheme::Float};
  else schemes = {parse_scheme(a.scheme)};
  Stopwatch clock;
  std::vector<MergeErrorResult> rows;
  for (auto s : schemes) {
    rows.push_back(merge_error_experiment(cfg, s));
    std::cerr << to_string(s) << " done (" << clock.seconds() << " s)\n";
  }
  emit(merge_error_csv(rows), a.out);
  return kOk;
}

struct MaskArgs {
  Index hidden = 0, head_dim = 0;
  int epochs = 0, epoch = 0;
  double alpha = 0.0;
  std::string out;
};

int cmd_mask_dump(const MaskArgs& a) {
  if (a.epoch < 1 || a.epoch > a.epochs) throw UsageError("mask-dump: --epoch must lie in [1, --epochs]");
  MaskSchedule s;
  s.target_epochs = a.epochs;
  s.alpha = a.alpha;
  Mat<double> gm;
  if (a.head_dim > 0) {
    s.hidden_size = a.head_dim;
    gm = transform_mask<double>(TransformKind::PerHead, a.epoch, s, a.hidden);
  } else {
    s.hidden_size = a.hidden;
    gm = gradual_mask<double>(a.epoch, s);
  }
  emit(matrix_csv(gm), a.out);
  return kOk;
}

int cmd_check(const std::string& suite) {
  SuiteResult r;
  try {
    r = run_suite(suite);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  std::cout << "suite " << r.name << ": " << (r.passed ? "pass" : "FAIL") << "\n";
  for (const auto& l : r.lines) std::cout << "  " << l << "\n";
  for (const auto& f : r.failures) std::cout << "  failure: " << f << "\n";
  return r.passed ? kOk : kUsage;
}

struct ExportArgs {
  std::string config, model, transforms, out;
  bool synthetic = false, no_quant = false;
};

int cmd_export(const ExportArgs& a) {
  if (a.synthetic == !a.model.empty()) throw UsageError("export: pass exactly one of --model or --synthetic");
  const RunConfig cfg = config_from(a.config);
  const std::optional<fs::path> model = a.model.empty() ? std::nullopt : std::optional<fs::path>(a.model);
  with_scalar(cfg.precision, [&](auto tag) {
    using S = decltype(tag);
    const auto m = load_or_make_model<S>(cfg, model);
    const auto transforms = transforms_from_tensors<S>(load_container(a.transforms));
    if (transforms.size() != m.blocks.size()) {
      throw ConfigError("export: transforms cover " + std::to_string(transforms.size()) + " blocks, model has " +
                        std::to_string(m.blocks.size()));
    }
    PlacementConfig placement = normalized(cfg.placement);
    if (a.no_quant) {
      placement.weight_quant.reset();
      placement.act_quant.reset();
    }
    std::vector<FusedBlock<S>> fused;
    for (std::size_t b = 0; b < m.blocks.size(); ++b) fused.push_back(fuse_block(m.blocks[b], placement, transforms[b], cfg.precision));
    save_container(a.out, fused_tensors(fused));
    return 0;
  });
  return kOk;
}

struct ReportArgs {
  std::string run, sweep, out, config;
  bool normalize = false;
};

template <typename S>
void write_heatmaps(const fs::path& dir, const std::string& stem, const BlockTransforms<S>& t, bool normalize) {
  for (const auto& tr : t.transforms) {
    write_text(dir / (stem + "_" + to_string(tr.placement) + ".csv"), matrix_csv(heatmap(tr, normalize)));
  }
}

int cmd_report(const ReportArgs& a) {
  if (a.run.empty() && a.sweep.empty()) throw UsageError("report: pass --run, --alpha-sweep or both");
  fs::path out_dir = a.out.empty() ? (a.run.empty() ? fs::path(".") : fs::path(a.run)) : fs::path(a.out);
  std::string config_path = a.config;
  if (!a.run.empty()) {
    if (!fs::exists(fs::path(a.run) / "transforms.afqt")) {
      throw UsageError("report: " + a.run + " has no transforms.afqt (run quantize first)");
    }
    if (config_path.empty() && fs::exists(fs::path(a.run) / "config.json")) config_path = (fs::path(a.run) / "config.json").string();
  }
  const RunConfig cfg = config_from(config_path);
  fs::create_directories(out_dir);
  with_scalar(cfg.precision, [&](auto tag) {
    using S = decltype(tag);
    if (!a.run.empty()) {
      const auto blocks = transforms_from_tensors<S>(load_container(fs::path(a.run) / "transforms.afqt"));
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        write_heatmaps(out_dir, "heatmap_block" + std::to_string(b), blocks[b], a.normalize);
      }
    }
    if (!a.sweep.empty()) {
      const auto alphas = parse_alpha_list(a.sweep);
      const auto model = load_or_make_model<S>(cfg, std::nullopt);
      const auto& block = model.blocks.front();
      const auto calib = calibration_for<S>(cfg, block.dim());
      const Index tokens = calib.front().rows();
      std::vector<Mat<S>> heldout;
      for (const auto& x : synthetic_calibration({derive_seed(cfg.optimizer.seed, 0x4e1dULL), 2, tokens}, block.dim())) {
        heldout.push_back(x.template cast<S>());
      }
      const auto sweep = alpha_sweep(block, calib, heldout, normalized(cfg.placement), cfg.optimizer, alphas,
                                     cfg.precision, 256, &std::cerr);
      std::string csv = sweep_csv(sweep);
      write_text(out_dir / "sweep.csv", csv);
      std::cout << csv;
      if (sweep.pearson) std::cout << "pearson_loss_ce_gap," << format_double(*sweep.pearson) << "\n";
      for (const auto& row : sweep.rows) {
        if (!row.diverged) write_heatmaps(out_dir, "heatmap_alpha" + format_double(row.alpha), row.transforms, a.normalize);
      }
    }
    return 0;
  });
  return kOk;
}

template <typename F>
int guarded(F&& f) {
  try {
    return f();
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const SingularMatrixError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"afq: affine-transform post-training quantization for toy transformer blocks"};
  app.require_subcommand(1, 1);

  QuantizeArgs qa;
  auto* quantize = app.add_subcommand("quantize", "optimize transforms block by block, then fuse and export");
  quantize->add_option("--config", qa.config, "run config JSON (defaults apply when omitted)");
  auto* model_opt = quantize->add_option("--model", qa.model, "model container");
  quantize->add_flag("--synthetic", qa.synthetic, "use a seeded random model from the config")->excludes(model_opt);
  quantize->add_option("--out", qa.out, "output directory")->required();

  MergeArgs ma;
  auto* merge = app.add_subcommand("merge-error", "finite-precision error of X A^-1 (A W) against X W");
  merge->add_option("--dims", ma.dims, "input channels (and output channels unless --dim-out)");
  merge->add_option("--dim-out", ma.dim_out, "output channels");
  merge->add_option("--tokens", ma.tokens, "rows of X");
  merge->add_option("--trials", ma.trials, "independent samples");
  merge->add_option("--scheme", ma.scheme, "double, float or float-double");
  merge->add_flag("--all-schemes", ma.all, "one row per precision scheme");
  merge->add_option("--seed", ma.seed, "master seed");
  merge->add_option("--out", ma.out, "also write the CSV here");

  MaskArgs ka;
  auto* mask = app.add_subcommand("mask-dump", "print the gradual mask as CSV");
  mask->add_option("--hidden", ka.hidden, "matrix size")->required()->check(CLI::PositiveNumber);
  mask->add_option("--epochs", ka.epochs, "target epochs t")->required()->check(CLI::PositiveNumber);
  mask->add_option("--epoch", ka.epoch, "epoch e")->required();
  mask->add_option("--alpha", ka.alpha, "stability factor")->required()->check(CLI::NonNegativeNumber);
  mask->add_option("--head-dim", ka.head_dim, "per-head mask with this block size");
  mask->add_option("--out", ka.out, "also write the CSV here");

  std::string suite;
  auto* check = app.add_subcommand("check", "run an invariant suite");
  check->add_option("--suite", suite, "grad, sdd, equiv or quant")->required();

  ExportArgs ea;
  auto* exp = app.add_subcommand("export", "fuse learned transforms and write the quantized model");
  exp->add_option("--config", ea.config, "run config JSON");
  auto* exp_model = exp->add_option("--model", ea.model, "model container");
  exp->add_flag("--synthetic", ea.synthetic, "use a seeded random model from the config")->excludes(exp_model);
  exp->add_option("--transforms", ea.transforms, "transforms container")->required();
  exp->add_option("--out", ea.out, "output container")->required();
  exp->add_flag("--no-quant", ea.no_quant, "fuse without quantizing");

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "alpha sweeps and transform heatmaps");
  report->add_option("--run", ra.run, "quantize output directory");
  report->add_option("--alpha-sweep", ra.sweep, "comma-separated alphas, e.g. 0,1e-4,1e-2");
  report->add_option("--config", ra.config, "run config JSON for the sweep");
  report->add_option("--out", ra.out, "output directory");
  report->add_flag("--normalize", ra.normalize, "divide heatmaps by the largest diagonal entry");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  return guarded([&] {
    if (*quantize) return cmd_quantize(qa);
    if (*merge) return cmd_merge_error(ma);
    if (*mask) return cmd_mask_dump(ka);
    if (*check) return cmd_check(suite);
    if (*exp) return cmd_export(ea);
    return cmd_report(ra);
  });
}
