// Prints one PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "comet/cli.hpp"
#include "comet/metrics.hpp"
#include "comet/tracker.hpp"
#include "comet/training.hpp"
#include "comet/verify.hpp"

using namespace comet;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeed = 20240501;

// Tolerances and budgets.
constexpr double kGeometryRealTol = 1e-9;
constexpr double kGeometrySeconds = 10.0;
constexpr double kRefExhaustMax = 0.01;
constexpr double kTestExhaustMax = 0.05;
constexpr double kPrroiRelTol = 1e-4;
constexpr double kNetworkRelTol = 1e-3;
constexpr double kNetworkSeconds = 300.0;
constexpr double kGroupTol = 1e-6;
constexpr double kContinuityTol = 1e-12;
constexpr double kOverfitRatio = 0.1;
constexpr int kOverfitSteps = 300;
constexpr double kOverfitSeconds = 600.0;
constexpr int kTrainSteps = 2000;
constexpr int kRefineFrames = 200;
constexpr double kRefineGain = 0.05;
constexpr double kSuccessMin = 0.6;
constexpr double kPrecisionMin = 0.8;
constexpr double kTrackSeconds = 900.0;
constexpr double kAucTol = 1e-12;
constexpr double kStepTol = 1e-12;

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Line {
  bool pass;
  std::string text;
};

int failures = 0;

void report(int id, const std::string& name, const Line& l) {
  if (!l.pass) ++failures;
  std::printf("[%s] %2d %-26s %s\n", l.pass ? "PASS" : "FAIL", id, name.c_str(), l.text.c_str());
  std::fflush(stdout);
}

void guarded(int id, const std::string& name, const std::function<Line()>& fn) {
  try {
    report(id, name, fn());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("exception: ") + e.what()});
  }
}

std::string fmt(const char* f, auto... v) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, v...);
  return buf;
}

const verify::Check& find(const std::vector<verify::Check>& cs, const std::string& name) {
  for (const auto& c : cs)
    if (c.name == name) return c;
  throw std::runtime_error("missing check " + name);
}

bool all_pass(const std::vector<verify::Check>& cs) {
  for (const auto& c : cs)
    if (!c.pass) return false;
  return !cs.empty();
}

std::string summary(const std::vector<verify::Check>& cs) {
  std::string s;
  for (const auto& c : cs) s += fmt("%s=%.3g ", c.name.c_str(), c.value);
  return s;
}

double loss_of(const std::vector<double>& ip, const std::vector<double>& it, const std::vector<double>& cp,
               const std::vector<double>& ct, double lambda) {
  const int n = static_cast<int>(ip.size());
  Tensor<double> a({1, n}), b({1, n}), c({1, n, 2}), d({1, n, 2});
  for (int i = 0; i < n; ++i) {
    a[i] = ip[i];
    b[i] = it[i];
  }
  for (int i = 0; i < 2 * n; ++i) {
    c[i] = cp[i];
    d[i] = ct[i];
  }
  ad::Graph<double> g;
  const LossTerms t = multitask_loss(g, net::GroupedOutput{g.leaf(a), g.leaf(c)}, b, d, LossConfig{lambda});
  return g.value(t.total)[0];
}

std::vector<SequenceRecord> training_data() {
  std::vector<SequenceRecord> data;
  for (int i = 0; i < 20; ++i) {
    data.push_back(synth_sequence(SynthConfig::preset(i % 3 == 0 ? "drift" : "easy"), 1000 + i,
                                  "train_" + std::to_string(i)));
  }
  return data;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int quiet(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = cli::run(args, o, e);
  if (out) *out = o.str();
  return code;
}

}  // namespace

int main() {
  guarded(1, "geometry oracle", [] {
    const auto t0 = Clock::now();
    const auto cs = verify::geometry(kSeed, 100000, 100000);
    const double t = seconds_since(t0);
    const auto& integer = find(cs, "iou_integer_exact");
    const auto& real = find(cs, "iou_real_max_abs_diff");
    const bool ok = integer.value == 0 && real.value <= kGeometryRealTol && t < kGeometrySeconds;
    return Line{ok, fmt("integer mismatches %g, real max diff %.2e (<= %.0e), %.1f s (< %.0f s)", integer.value,
                        real.value, kGeometryRealTol, t, kGeometrySeconds)};
  });

  guarded(2, "proposal contract", [] {
    const auto cs = verify::proposal_contract(kSeed, 10000);
    const auto& ref = find(cs, "reference_t0.8_exhaustion_rate");
    const auto& test = find(cs, "test_t0.1_exhaustion_rate");
    const auto& iou = find(cs, "reference_t0.8_threshold_violations");
    const bool ok = iou.value == 0 && ref.value < kRefExhaustMax && test.value < kTestExhaustMax;
    return Line{ok, fmt("IoU<0.8 violations %g, exhaustion ref %.4f (< %.2f) test %.4f (< %.2f)", iou.value,
                        ref.value, kRefExhaustMax, test.value, kTestExhaustMax)};
  });

  guarded(3, "prroi gradcheck", [] {
    const auto cs = verify::prroi_gradcheck(kSeed, 100);
    double worst = 0;
    for (const auto& c : cs) worst = std::max(worst, c.value);
    return Line{all_pass(cs) && worst < kPrroiRelTol, fmt("max rel err %.2e (< %.0e) %s", worst, kPrroiRelTol,
                                                          summary(cs).c_str())};
  });

  guarded(4, "network gradcheck", [] {
    const auto t0 = Clock::now();
    const auto cs = verify::network_gradcheck(kSeed);
    const double t = seconds_since(t0);
    double worst = 0;
    for (const auto& c : cs) worst = std::max(worst, c.value);
    return Line{all_pass(cs) && worst < kNetworkRelTol && t < kNetworkSeconds,
                fmt("max rel err %.2e (< %.0e), %.0f s (< %.0f s)", worst, kNetworkRelTol, t, kNetworkSeconds)};
  });

  guarded(5, "grouped equivalence", [] {
    const auto cs = verify::group_equivalence(kSeed);
    double worst = 0;
    for (const auto& c : cs) worst = std::max(worst, c.value);
    return Line{all_pass(cs) && worst < kGroupTol, fmt("max abs diff %.2e (< %.0e)", worst, kGroupTol)};
  });

  guarded(6, "loss correctness", [] {
    const std::vector<double> t1{0.25}, c2{-0.125, 0.375};
    const double zero = loss_of({0.25, -0.5}, {0.25, -0.5}, {0.1, 0.2, -0.3, 0.4}, {0.1, 0.2, -0.3, 0.4}, 4.0);
    const double iou_case = loss_of({0.75}, t1, c2, c2, 4.0);
    const double cle_small = loss_of(t1, t1, {0.375, -0.125}, c2, 1.0);
    const double cle_large = loss_of(t1, t1, {1.875, -1.625}, c2, 1.0);
    const double left = smooth_l1_value(std::nextafter(1.0, 0.0)), at = smooth_l1_value(1.0),
                 right = smooth_l1_value(std::nextafter(1.0, 2.0));
    const double gap = std::max(std::abs(left - at), std::abs(right - at));
    const std::vector<double> ip{0.5, -0.25, 0.125, 0.0}, z4(4, 0.0), z8(8, 0.0);
    const std::vector<double> cp{0.5, -2.0, 0.25, 1.5, -0.75, 0.0, 3.0, -0.5};
    const double l0 = loss_of(ip, z4, cp, z8, 0), l4 = loss_of(ip, z4, cp, z8, 4), l8 = loss_of(ip, z4, cp, z8, 8);
    const bool ok = zero == 0.0 && iou_case == 0.25 && cle_small == 0.125 && cle_large == 1.5 &&
                    gap <= kContinuityTol && (l8 - l0) == 2 * (l4 - l0);
    return Line{ok, fmt("zero %g, iou 0.5 -> %g, cle 0.5 -> %g, cle 2 -> %g, continuity gap %.1e, lambda residual %g",
                        zero, iou_case, cle_small, cle_large, gap, (l8 - l0) - 2 * (l4 - l0))};
  });

  guarded(7, "overfit sanity", [] {
    TrainConfig tc = TrainConfig::desk();
    tc.overfit = true;
    tc.steps = kOverfitSteps;
    tc.steps_per_epoch = 100;
    const auto t0 = Clock::now();
    const TrainResult r = train(training_data(), NetConfig::desk(), tc);
    const double t = seconds_since(t0);
    const double ratio = r.log.back().loss / r.log.front().loss;
    return Line{ratio <= kOverfitRatio && t < kOverfitSeconds,
                fmt("batch %d lr %g: loss %.4f -> %.2e, ratio %.2e (<= %.1f) in %d steps, %.0f s", tc.batch_size,
                    tc.lr, r.log.front().loss, r.log.back().loss, ratio, kOverfitRatio, kOverfitSteps, t)};
  });

  // Criteria 8 and 9 share one trained model.
  std::optional<ParamStore<float>> trained;
  std::string train_note;
  try {
    TrainConfig tc = TrainConfig::desk();
    tc.steps = kTrainSteps;
    const auto t0 = Clock::now();
    TrainResult r = train(training_data(), NetConfig::desk(), tc);
    train_note = fmt("trained %d steps in %.0f s, loss %.3f -> %.3f; ", kTrainSteps, seconds_since(t0),
                     r.log.front().loss, r.log.back().loss);
    trained = std::move(r.params);
  } catch (const std::exception& e) {
    train_note = std::string("training failed: ") + e.what();
  }
  const NetConfig net_cfg = NetConfig::desk();

  guarded(8, "refinement efficacy", [&] {
    if (!trained) return Line{false, train_note};
    const RefineConfig rc;
    Rng rng(99);
    double before = 0, after = 0;
    int count = 0;
    for (int s = 0; count < kRefineFrames; ++s) {
      const SequenceRecord seq = synth_sequence(SynthConfig::preset("easy"), 50000 + s, "held_out");
      Tracker tr(net_cfg, *trained, rc);
      tr.init(seq.frame(0), seq.gt[0], std::make_unique<GtJitterEstimator>(seq.gt));
      for (int f = 5; f < seq.length() && count < kRefineFrames; f += 5) {
        const BoxXYWH g = seq.gt[f];
        const Image img = seq.frame(f);
        const BoxXYWH est =
            clamp_to_frame(gaussian_jitter(g, {0.1 * g.w, 0.1 * g.h, 0.1 * g.w, 0.1 * g.h}, rng), img.width, img.height);
        BoxXYWH p;
        double v;
        do {
          p = gaussian_jitter(g, {0.35 * g.w, 0.35 * g.h, 0.35 * g.w, 0.35 * g.h}, rng);
          v = iou(p, g);
        } while (v < 0.1 || v > 0.5);
        const CropSpec crop(est, rc.area_factor, net_cfg.input_size);
        const auto feat = tr.test_features(crop_patch(img, crop));
        const auto res = tr.refine_boxes(feat, {crop.to_crop(p)});
        before += v;
        after += iou(crop.to_source(res.boxes[0]), g);
        ++count;
      }
    }
    const double gain = (after - before) / count;
    return Line{gain >= kRefineGain, train_note + fmt("%d frames, mean IoU %.3f -> %.3f, gain %.3f (>= %.2f)", count,
                                                      before / count, after / count, gain, kRefineGain)};
  });

  guarded(9, "end-to-end tracking", [&] {
    if (!trained) return Line{false, train_note};
    const auto t0 = Clock::now();
    std::map<std::string, EvalResult> res;
    for (int s = 0; s < 10; ++s) {
      const SequenceRecord seq = synth_sequence(SynthConfig::preset("easy"), 70000 + s, "easy_" + std::to_string(s));
      Tracker tr(net_cfg, *trained, RefineConfig{});
      tr.init(seq.frame(0), seq.gt[0], make_estimator("gt_jitter", seq.gt, 11 + static_cast<std::uint64_t>(s)));
      std::vector<BoxXYWH> pred{seq.gt[0]};
      for (int f = 1; f < seq.length(); ++f) pred.push_back(tr.track_frame(seq.frame(f)));
      res[seq.name] = ope_metrics(pred, seq.gt);
    }
    const double t = seconds_since(t0);
    const EvalResult avg = average_results(res);
    return Line{avg.success_at_0_5 >= kSuccessMin && avg.precision_at_20 >= kPrecisionMin && t < kTrackSeconds,
                fmt("10 x 100 frames: success_at_0_5 %.3f (>= %.1f), precision_at_20 %.3f (>= %.1f), %.0f s",
                    avg.success_at_0_5, kSuccessMin, avg.precision_at_20, kPrecisionMin, t)};
  });

  guarded(10, "metric fidelity", [] {
    const std::vector<BoxXYWH> gt(3, {100, 100, 40, 40});
    std::vector<BoxXYWH> pred = gt;
    pred[0].x += 5;
    pred[1].x += 25;
    pred[2].x += 10;
    const EvalResult a = ope_metrics(pred, gt);
    const std::vector<BoxXYWH> gt2(4, {0, 0, 12, 10});
    std::vector<BoxXYWH> half = gt2;
    for (auto& b : half) b.x += 4;
    const EvalResult b = ope_metrics(half, gt2);
    bool exact = a.precision_at_20 == 2.0 / 3.0 && a.precision[4] == 0.0 && a.precision[5] == 1.0 / 3.0 &&
                 a.precision[25] == 1.0 && b.overlaps[0] == 0.5 && b.success_at_0_5 == 1.0 && b.success[26] == 0.0;
    // Monotonicity and auc on random tracks.
    Rng rng(5);
    std::normal_distribution<double> n(0, 15);
    double auc_err = 0;
    bool monotone = true;
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<BoxXYWH> g, p;
      for (int i = 0; i < 40; ++i) {
        g.push_back({100, 100, 30, 20});
        p.push_back({100 + n(rng), 100 + n(rng), 30 + std::abs(n(rng)), 20 + std::abs(n(rng))});
      }
      const EvalResult r = ope_metrics(p, g);
      for (std::size_t k = 1; k < r.precision.size(); ++k) {
        monotone = monotone && r.precision[k] >= r.precision[k - 1] && r.success[k] <= r.success[k - 1];
      }
      double mean = 0;
      for (double v : r.success) mean += v;
      auc_err = std::max(auc_err, std::abs(r.auc - mean / static_cast<double>(r.success.size())));
    }
    return Line{exact && monotone && auc_err <= kAucTol,
                fmt("crafted cases %s, curves monotone %s, auc error %.1e (<= %.0e)", exact ? "exact" : "MISMATCH",
                    monotone ? "yes" : "no", auc_err, kAucTol)};
  });

  guarded(11, "cli determinism", [] {
    const fs::path root = fs::temp_directory_path() / "comet_acceptance_cli";
    fs::remove_all(root);
    fs::create_directories(root);
    {
      std::ofstream(root / "synth.json") << R"({"schema_version": 1, "count": 2, "overrides": {"length": 30}})";
      std::ofstream(root / "train.json")
          << R"({"schema_version": 1, "train": {"steps": 20, "batch_size": 2, "steps_per_epoch": 10}})";
    }
    std::vector<std::string> diffs;
    std::map<std::string, std::string> verify_out[2];
    for (int run = 0; run < 2; ++run) {
      const fs::path d = root / std::to_string(run);
      const std::string s = d.string();
      auto must = [&](const std::vector<std::string>& args, std::string* out = nullptr) {
        const int code = quiet(args, out);
        if (code != cli::kExitOk) throw std::runtime_error(args[0] + " exited with " + std::to_string(code));
      };
      must({"synth", "--out", s + "/data", "--config", (root / "synth.json").string(), "--seed", "3"});
      must({"train", "--data", s + "/data", "--config", (root / "train.json").string(), "--out", s + "/m.ckpt",
            "--seed", "3"});
      must({"track", "--ckpt", s + "/m.ckpt", "--seq", s + "/data/easy_000", "--estimator", "gt_jitter", "--out",
            s + "/gt_jitter.txt", "--seed", "3"});
      must({"track", "--ckpt", s + "/m.ckpt", "--seq", s + "/data/easy_001", "--estimator", "ncc", "--out",
            s + "/ncc.txt", "--seed", "3"});
      must({"eval", "--pred", s + "/gt_jitter.txt", s + "/ncc.txt", "--seq", s + "/data/easy_000",
            s + "/data/easy_001", "--report", s + "/report"});
      for (const char* suite : {"geometry", "group-equiv"}) {
        must({"verify", "--suite", suite, "--seed", "3"}, &verify_out[run][suite]);
      }
    }
    int files = 0;
    for (const auto& e : fs::recursive_directory_iterator(root / "0")) {
      if (!e.is_regular_file()) continue;
      const fs::path rel = fs::relative(e.path(), root / "0");
      ++files;
      if (rel.filename() == "report.json") {
        // The echoed config records the run directory; compare everything else.
        auto a = nlohmann::json::parse(read_file(e.path())), b = nlohmann::json::parse(read_file(root / "1" / rel));
        a.erase("config");
        b.erase("config");
        if (a != b) diffs.push_back(rel.string());
      } else if (read_file(e.path()) != read_file(root / "1" / rel)) {
        diffs.push_back(rel.string());
      }
    }
    for (const auto& [suite, text] : verify_out[0]) {
      if (text != verify_out[1].at(suite)) diffs.push_back("verify " + suite + " stdout");
    }
    std::string list;
    for (const auto& d : diffs) list += d + " ";
    return Line{diffs.empty() && files > 0, fmt("%d files + verify output compared across two runs, %zu differ %s",
                                                files, diffs.size(), list.c_str())};
  });

  guarded(12, "refinement scaling rules", [] {
    const BoxXYWH b{0, 0, 10, 20};
    const Vec4 grad{0.1, 0.2, 0.05, 0.05};
    const BoxXYWH a = apply_iou_step(b, grad, 1.0), c = apply_cle_step(b, grad, 1.0);
    const double da[4] = {a.x - b.x - 1, a.y - b.y - 4, a.w - b.w - 0.5, a.h - b.h - 1};
    const double dc[4] = {b.x - c.x - 1, b.y - c.y - 4, b.w - c.w - 0.05, b.h - c.h - 0.05};
    double worst = 0;
    for (int i = 0; i < 4; ++i) worst = std::max({worst, std::abs(da[i]), std::abs(dc[i])});
    return Line{worst <= kStepTol, fmt("iou update (%g, %g, %g, %g), cle update (%g, %g, %g, %g), max err %.1e",
                                       a.x - b.x, a.y - b.y, a.w - b.w, a.h - b.h, b.x - c.x, b.y - c.y, b.w - c.w,
                                       b.h - c.h, worst)};
  });

  std::printf("%s: %d of 12 criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
