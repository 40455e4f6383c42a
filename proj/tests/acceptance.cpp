// Acceptance suite: one PASS/FAIL line per criterion. The CLI binary path is
// the first argument; criteria 1 and 10 drive it as a subprocess.

#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "afq/checks.hpp"
#include "afq/container.hpp"
#include "afq/report.hpp"

#include "json.hpp"

namespace fs = std::filesystem;
using namespace afq;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

/// Runs a shell command, returning (exit status, stdout).
std::pair<int, std::string> run(const std::string& cmd) {
  std::string out;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return {-1, out};
  char buf[4096];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) out.append(buf, n);
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

// ---------------------------------------------------------------------------

Outcome merge_error_ordering(const fs::path& cli, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path csv = dir / "merge.csv";
  const auto [status, out] = run(quoted(cli) + " merge-error --all-schemes --dims 512 --tokens 256 --trials 50 --seed 7 --out " +
                                 quoted(csv) + " 2>/dev/null");
  const double secs = seconds_since(t0);
  if (status != 0) return {false, "merge-error exited with status " + std::to_string(status)};
  std::map<std::string, double> mse;
  std::stringstream ss(out);
  std::string line;
  std::getline(ss, line);
  while (std::getline(ss, line)) {
    const auto comma = line.rfind(',');
    mse[line.substr(0, line.find(','))] = std::stod(line.substr(comma + 1));
  }
  if (mse.size() != 3) return {false, "expected three scheme rows, got " + std::to_string(mse.size())};
  const double d = mse["double"], fd = mse["float-double"], f = mse["float"];
  const bool in_band = fd >= 1e-7 && fd <= 1e-1 && f >= 1e-7 && f <= 1e-1;
  const bool ok = d < 1e-12 && in_band && d < fd && fd < f && secs < 300.0 && fs::exists(csv);
  return {ok, "double " + fmt(d) + " float-double " + fmt(fd) + " float " + fmt(f) + " (" + fmt(secs) + " s)"};
}

Outcome from_suite(const SuiteResult& r, double secs, double limit) {
  std::string detail;
  for (const auto& l : r.lines) detail += (detail.empty() ? "" : "; ") + l;
  for (const auto& f : r.failures) detail += "; failure: " + f;
  detail += " (" + fmt(secs) + " s)";
  return {r.passed && secs < limit, detail};
}

Outcome equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = equiv_suite(100, 5, 1e-8);
  return from_suite(r, seconds_since(t0), 120.0);
}

Outcome sdd_preservation() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = sdd_suite(10, true);
  return from_suite(r, seconds_since(t0), 1e9);
}

Outcome alpha_zero_reduction() {
  const ToyFixture f;
  const auto p = fixture_block(f);
  const auto calib = fixture_calibration(f);
  OptimizerConfig cfg;
  cfg.alpha = 0.0;
  PlacementConfig affine = full_affine_placement();
  PlacementConfig diag;
  diag.pre_qkv = diag.pre_out_proj = diag.pre_fc1 = TransformKind::DiagonalOnly;
  const auto a = optimize_block(p, calib, affine, cfg);
  const auto b = optimize_block(p, calib, diag, cfg);
  int nonzero = 0;
  for (const auto& t : a.transforms.transforms) {
    const Mat<double> eff = t.effective();
    for (Index i = 0; i < eff.rows(); ++i)
      for (Index j = 0; j < eff.cols(); ++j)
        if (i != j && (eff(i, j) != 0.0 || t.a(i, j) != 0.0)) ++nonzero;
  }
  bool identical = a.report.epochs.size() == b.report.epochs.size() && a.report.final_loss == b.report.final_loss;
  for (std::size_t e = 0; identical && e < a.report.epochs.size(); ++e) {
    identical = a.report.epochs[e].loss == b.report.epochs[e].loss;
  }
  return {nonzero == 0 && identical, "nonzero off-diagonals " + std::to_string(nonzero) + ", trajectories " +
                                         (identical ? "bit-identical" : "differ") + " over " +
                                         std::to_string(a.report.epochs.size()) + " epochs"};
}

/// Width 256, four heads, 64 tokens x 4 batches, learning rate 1e-2, t = 20,
/// 4-bit per-channel weights, full transforms at every placement. Seeds vary
/// the calibration draw; the block is fixed at seed 42.
Outcome affine_beats_diagonal() {
  const auto t0 = std::chrono::steady_clock::now();
  ToyFixture f;
  f.hidden = 256;
  f.heads = 4;
  f.tokens = 64;
  f.batches = 4;
  const auto p = fixture_block(f);
  OptimizerConfig cfg;
  cfg.epochs = 20;
  cfg.lr_affine = 1e-2;
  const PlacementConfig pl = full_affine_placement();
  int wins = 0, decreases = 0;
  std::string detail;
  for (std::uint64_t s = 0; s < 5; ++s) {
    f.calib_seed = derive_seed(42, s);
    const auto calib = fixture_calibration(f);
    cfg.alpha = 1e-2;
    const auto affine = optimize_block(p, calib, pl, cfg);
    cfg.alpha = 0.0;
    const auto diag = optimize_block(p, calib, pl, cfg);
    wins += affine.report.final_loss <= diag.report.final_loss ? 1 : 0;
    const double init = affine.report.initial_loss;
    decreases += (affine.report.final_loss < init && diag.report.final_loss < init) ? 1 : 0;
    detail += (s ? ", " : "") + fmt(affine.report.final_loss) + "/" + fmt(diag.report.final_loss);
  }
  const double secs = seconds_since(t0);
  return {wins >= 4 && decreases == 5 && secs < 300.0,
          "wins " + std::to_string(wins) + "/5, both below initial " + std::to_string(decreases) + "/5, affine/diag [" +
              detail + "] (" + fmt(secs) + " s)"};
}

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = grad_suite(100, 2024);
  return from_suite(r, seconds_since(t0), 1e9);
}

Outcome quantizer_properties() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = quant_suite(100000, 11);
  return from_suite(r, seconds_since(t0), 1e9);
}

/// Exact rational band test: |i - j| * t <= e * d.
double brute_mask(Index i, Index j, int e, int t, Index d, double alpha) {
  if (i == j) return 1.0;
  const Index off = i > j ? i - j : j - i;
  return off * t <= static_cast<Index>(e) * d ? alpha : 0.0;
}

Outcome gradual_mask_exactness() {
  long cases = 0, mismatches = 0, head_mismatches = 0;
  for (Index d : {4, 8, 64}) {
    for (int t : {1, 4, 20}) {
      for (double alpha : {0.0, 0.25, 1.0}) {
        MaskSchedule s;
        s.target_epochs = t;
        s.alpha = alpha;
        s.hidden_size = d;
        for (int e = 1; e <= t; ++e) {
          ++cases;
          const Mat<double> gm = gradual_mask(e, s);
          for (Index i = 0; i < d; ++i)
            for (Index j = 0; j < d; ++j) mismatches += gm(i, j) != brute_mask(i, j, e, t, d, alpha) ? 1 : 0;

          if (d < 8) continue;
          MaskSchedule hs = s;
          hs.hidden_size = d / 4;
          const Mat<double> ph = transform_mask<double>(TransformKind::PerHead, e, hs, d);
          for (Index i = 0; i < d; ++i)
            for (Index j = 0; j < d; ++j) {
              const bool same_head = i / hs.hidden_size == j / hs.hidden_size;
              const double expect =
                  same_head ? brute_mask(i % hs.hidden_size, j % hs.hidden_size, e, t, hs.hidden_size, alpha) : 0.0;
              head_mismatches += ph(i, j) != expect ? 1 : 0;
            }
        }
      }
    }
  }
  return {mismatches == 0 && head_mismatches == 0,
          std::to_string(cases) + " (d, t, e, alpha) cases, mask mismatches " + std::to_string(mismatches) +
              ", per-head mismatches " + std::to_string(head_mismatches)};
}

Tensor random_tensor(Rng& rng, std::size_t k) {
  auto below = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  Tensor t;
  t.name = "t" + std::to_string(k);
  t.dtype = static_cast<DType>(below(4));
  const std::size_t rank = below(4);
  for (std::size_t r = 0; r < rank; ++r) t.shape.push_back(below(6));
  t.data.resize(static_cast<std::size_t>(t.numel()) * dtype_size(t.dtype));
  for (auto& b : t.data) b = static_cast<std::uint8_t>(below(256));
  return t;
}

/// Re-encodes bytes with an edited manifest.
std::vector<std::uint8_t> with_manifest(const std::vector<std::uint8_t>& bytes, const std::function<void(nlohmann::json&)>& edit) {
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= std::uint64_t(bytes[8 + i]) << (8 * i);
  auto manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  edit(manifest);
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(bytes.begin(), bytes.begin() + 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(std::uint64_t(text.size()) >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len), bytes.end());
  return out;
}

template <typename E>
bool raises(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_container(bytes);
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

Outcome io_round_trip(const fs::path& dir) {
  Rng rng(99);
  std::vector<Tensor> ts;
  for (std::size_t k = 0; k < 1000; ++k) ts.push_back(random_tensor(rng, k));
  const fs::path path = dir / "random.afqt";
  save_container(path, ts);
  const bool exact = load_container(path) == ts;

  const auto bytes = read_file(path);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  auto bad_version = bytes;
  bad_version[4] = 2;
  auto truncated = bytes;
  truncated.resize(bytes.size() - 1);
  const auto overlap = with_manifest(bytes, [](nlohmann::json& m) {
    for (std::size_t i = 1; i < m.size(); ++i) {
      if (m[i - 1]["byte_len"].get<std::uint64_t>() > 0 && m[i]["byte_len"].get<std::uint64_t>() > 0) {
        m[i]["byte_offset"] = m[i - 1]["byte_offset"];
        return;
      }
    }
  });
  const auto duplicate = with_manifest(bytes, [](nlohmann::json& m) { m[1]["name"] = m[0]["name"]; });
  const auto malformed = with_manifest(bytes, [](nlohmann::json& m) { m[0].erase("dtype"); });

  int distinct = 0;
  distinct += raises<BadMagicError>(bad_magic);
  distinct += raises<VersionMismatchError>(bad_version);
  distinct += raises<TruncatedError>(truncated);
  distinct += raises<OverlappingOffsetsError>(overlap);
  distinct += raises<DuplicateNameError>(duplicate);
  distinct += raises<ManifestError>(malformed);
  return {exact && distinct == 6, std::string("1000 tensors ") + (exact ? "bit-exact" : "MISMATCH") + ", corrupted files " +
                                      std::to_string(distinct) + "/6 raised their distinct error"};
}

Outcome determinism(const fs::path& cli, const fs::path& dir) {
  const fs::path a = dir / "run_a", b = dir / "run_b";
  for (const auto& out : {a, b}) {
    const auto [status, text] = run(quoted(cli) + " quantize --synthetic --out " + quoted(out) + " 2>/dev/null");
    if (status != 0) return {false, "quantize exited with status " + std::to_string(status)};
  }
  int files = 0, differ = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    ++files;
    const fs::path other = b / entry.path().filename();
    if (!fs::exists(other) || read_file(entry.path()) != read_file(other)) ++differ;
  }
  for (const auto& entry : fs::directory_iterator(b)) differ += fs::exists(a / entry.path().filename()) ? 0 : 1;
  return {files >= 5 && differ == 0, std::to_string(files) + " artifacts compared, " + std::to_string(differ) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <path-to-afq>\n";
    return 2;
  }
  const fs::path cli = fs::absolute(argv[1]);
  const fs::path dir = fs::temp_directory_path() / ("afq_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"merge-error ordering", [&] { return merge_error_ordering(cli, dir); }},
      {"equivalence invariant", equivalence},
      {"SDD preservation", sdd_preservation},
      {"alpha 0 reduces to diagonal-only", alpha_zero_reduction},
      {"affine beats diagonal-only", affine_beats_diagonal},
      {"gradient correctness", gradient_correctness},
      {"quantizer properties", quantizer_properties},
      {"gradual-mask exactness", gradual_mask_exactness},
      {"I/O round trip", [&] { return io_round_trip(dir); }},
      {"determinism", [&] { return determinism(cli, dir); }},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += o.passed ? 0 : 1;
    std::cout << (o.passed ? "PASS" : "FAIL") << " criterion " << (i + 1) << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  std::error_code ec;
  fs::remove_all(dir, ec);
  std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
