#include "comet/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "comet/dataset.hpp"
#include "comet/metrics.hpp"
#include "comet/tracker.hpp"
#include "comet/training.hpp"
#include "comet/verify.hpp"

namespace comet::cli {

namespace fs = std::filesystem;

namespace {

// Bad flags, configs, paths or inputs; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(path + ": " + e.what());
  }
}

void require_schema(const nlohmann::json& j, const std::string& path, const std::vector<std::string>& keys) {
  if (!j.is_object()) throw UsageError(path + ": expected a JSON object");
  if (!j.contains("schema_version")) throw UsageError(path + ": missing schema_version");
  if (j.at("schema_version") != 1) throw UsageError(path + ": unsupported schema_version");
  for (const auto& [k, v] : j.items()) {
    if (k != "schema_version" && std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw UsageError(path + ": unknown key '" + k + "'");
    }
  }
}

void echo_config(std::ostream& out, const nlohmann::json& cfg) { out << "config " << cfg.dump() << "\n"; }

std::uint64_t mix(std::uint64_t seed, std::uint64_t i) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(i)};
  std::uint32_t w[2];
  seq.generate(w, w + 2);
  return (static_cast<std::uint64_t>(w[0]) << 32) | w[1];
}

struct Options {
  std::uint64_t seed = kDefaultSeed;
  std::string out, config, data, ckpt, seq, estimator = "gt_jitter", report, suite = "all";
  std::vector<std::string> preds, seqs;
  bool overfit = false;
};

int cmd_synth(const Options& o, std::ostream& out) {
  int count = 10;
  std::string preset = "easy";
  nlohmann::json overrides = nlohmann::json::object();
  if (!o.config.empty()) {
    const nlohmann::json j = read_json(o.config);
    require_schema(j, o.config, {"count", "preset", "overrides"});
    count = j.value("count", count);
    preset = j.value("preset", preset);
    overrides = j.value("overrides", overrides);
  }
  if (count < 1) throw UsageError("synth: count must be >= 1");
  SynthConfig cfg;
  try {
    nlohmann::json merged = SynthConfig::preset(preset).to_json();
    for (const auto& [k, v] : overrides.items()) {
      if (!merged.contains(k)) throw std::invalid_argument("synth config: unknown key '" + k + "'");
      merged[k] = v;
    }
    cfg = SynthConfig::from_json(merged);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  echo_config(out, {{"command", "synth"}, {"seed", o.seed}, {"count", count}, {"preset", preset},
                    {"synth", cfg.to_json()}});
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw UsageError("cannot create " + o.out + ": " + ec.message());
  for (int i = 0; i < count; ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_%03d", preset.c_str(), i);
    const SequenceRecord rec = synth_sequence(cfg, mix(o.seed, static_cast<std::uint64_t>(i)), name);
    write_sequence(rec, fs::path(o.out) / name);
    out << "wrote " << name << " (" << rec.length() << " frames)\n";
  }
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  if (!fs::is_directory(o.data)) throw UsageError("data directory not found: " + o.data);
  NetConfig net_cfg = NetConfig::desk();
  TrainConfig tc = TrainConfig::desk();
  bool steps_given = false, out_size_given = false;
  if (!o.config.empty()) {
    const nlohmann::json j = read_json(o.config);
    require_schema(j, o.config, {"net", "train"});
    try {
      if (j.contains("net")) net_cfg = NetConfig::from_json(j.at("net"));
      if (j.contains("train")) {
        nlohmann::json t = j.at("train");
        steps_given = t.contains("steps");
        out_size_given = t.contains("pairs") && t.at("pairs").contains("out_size");
        t["schema_version"] = 1;
        tc = TrainConfig::from_json(t);
      }
    } catch (const std::invalid_argument& e) {
      throw UsageError(o.config + ": " + e.what());
    }
  }
  if (!out_size_given) tc.pairs.out_size = net_cfg.input_size;
  tc.seed = o.seed;
  if (o.overfit) {
    tc.overfit = true;
    if (!steps_given) tc.steps = 300;
  }
  try {
    tc.validate();
    net_cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  echo_config(out, {{"command", "train"}, {"net", net_cfg.to_json()}, {"train", tc.to_json()}});
  const std::vector<SequenceRecord> data = load_dataset(o.data);
  const TrainResult r = train(data, net_cfg, tc, &out);

  const fs::path ckpt(o.out);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_checkpoint(ckpt, r.params,
                  {{"net", net_cfg.to_json()}, {"train", tc.to_json()}, {"final_loss", r.log.back().loss}});
  fs::path log = ckpt;
  log += ".log.csv";
  write_train_log(log, r.log);
  out << "checkpoint " << ckpt.string() << "\nlog " << log.string() << "\n";
  const double ratio = r.log.back().loss / r.log.front().loss;
  out << "initial_loss " << r.log.front().loss << " final_loss " << r.log.back().loss << " ratio " << ratio << "\n";
  if (o.overfit) {
    const bool ok = ratio <= 0.1;
    out << (ok ? "PASS" : "FAIL") << " overfit ratio " << ratio << " <= 0.1\n";
    return ok ? kExitOk : kExitVerifyFailed;
  }
  return kExitOk;
}

int cmd_track(const Options& o, std::ostream& out) {
  if (!fs::exists(o.ckpt)) throw UsageError("checkpoint not found: " + o.ckpt);
  const Checkpoint ck = load_checkpoint(o.ckpt);
  if (!ck.metadata.contains("net")) throw UsageError(o.ckpt + ": checkpoint carries no network config");
  const NetConfig net_cfg = NetConfig::from_json(ck.metadata.at("net"));
  const SequenceRecord seq = load_sequence(o.seq);
  if (seq.length() < 1) throw UsageError(o.seq + ": empty sequence");
  RefineConfig rc;
  rc.seed = o.seed;
  std::unique_ptr<RoughEstimator> est;
  try {
    est = make_estimator(o.estimator, seq.gt, mix(o.seed, 1));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  echo_config(out, {{"command", "track"},
                    {"seed", o.seed},
                    {"estimator", o.estimator},
                    {"sequence", seq.name},
                    {"refine", rc.to_json()},
                    {"net", net_cfg.to_json()}});
  Tracker tracker(net_cfg, ck.params, rc);
  tracker.init(seq.frame(0), seq.gt[0], std::move(est));
  std::vector<BoxXYWH> boxes{seq.gt[0]};
  for (int i = 1; i < seq.length(); ++i) boxes.push_back(tracker.track_frame(seq.frame(i)));

  const fs::path path(o.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_boxes(path, boxes);
  fs::path side = path;
  side += ".log";
  std::ofstream log(side, std::ios::binary);
  if (!log) throw UsageError("cannot write " + side.string());
  log << "frame,message\n";
  for (std::size_t i = 0; i < tracker.flagged_frames().size(); ++i) {
    log << tracker.flagged_frames()[i] << ',' << tracker.flag_messages()[i] << '\n';
  }
  out << "frames " << boxes.size() << " flagged " << tracker.flagged_frames().size() << "\nwrote " << path.string()
      << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.preds.size() != o.seqs.size()) {
    throw UsageError("eval: " + std::to_string(o.preds.size()) + " prediction files for " +
                     std::to_string(o.seqs.size()) + " sequences");
  }
  echo_config(out, {{"command", "eval"}, {"pred", o.preds}, {"seq", o.seqs}});
  std::vector<SequenceRecord> records;
  std::map<std::string, EvalResult> results;
  for (std::size_t i = 0; i < o.preds.size(); ++i) {
    SequenceRecord rec = load_sequence(o.seqs[i]);
    if (results.count(rec.name)) throw UsageError("eval: sequence '" + rec.name + "' given twice");
    const std::vector<BoxXYWH> pred = read_boxes(o.preds[i]);
    if (pred.size() != rec.gt.size()) {
      throw UsageError("eval: " + o.preds[i] + " has " + std::to_string(pred.size()) + " boxes but " + rec.name +
                       " has " + std::to_string(rec.gt.size()) + " frames");
    }
    results[rec.name] = ope_metrics(pred, rec.gt);
    records.push_back(std::move(rec));
  }
  const auto rows = attribute_breakdown(results, records);
  emit_report(results, rows, {{"command", "eval"}, {"pred", o.preds}, {"seq", o.seqs}}, o.report);
  const EvalResult overall = average_results(results);
  char line[128];
  std::snprintf(line, sizeof line, "precision_at_20 %.4f success_at_0_5 %.4f auc %.4f\n", overall.precision_at_20,
                overall.success_at_0_5, overall.auc);
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-10s n=%d precision_at_20 %.4f auc %.4f\n", r.attribute.c_str(), r.sequences,
                  r.precision_at_20, r.auc);
    out << line;
  }
  out << "report " << o.report << "\n";
  return kExitOk;
}

int cmd_verify(const Options& o, std::ostream& out) {
  echo_config(out, {{"command", "verify"}, {"suite", o.suite}, {"seed", o.seed}});
  std::vector<verify::Check> checks;
  auto append = [&](std::vector<verify::Check> c) { checks.insert(checks.end(), c.begin(), c.end()); };
  const bool all = o.suite == "all";
  if (all || o.suite == "geometry") {
    append(verify::geometry(o.seed));
    append(verify::proposal_contract(o.seed));
  }
  if (all || o.suite == "gradcheck") {
    append(verify::prroi_gradcheck(o.seed));
    append(verify::network_gradcheck(o.seed));
  }
  if (all || o.suite == "group-equiv") append(verify::group_equivalence(o.seed));
  bool ok = true;
  for (const auto& c : checks) {
    char line[256];
    std::snprintf(line, sizeof line, "%s %-28s value %.3e threshold %.1e", c.pass ? "PASS" : "FAIL", c.name.c_str(),
                  c.value, c.threshold);
    out << line << (c.detail.empty() ? "" : "  " + c.detail) << "\n";
    ok = ok && c.pass;
  }
  out << (ok ? "all checks passed" : "verification failed") << "\n";
  return ok ? kExitOk : kExitVerifyFailed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Small-object tracking with IoU and center-offset refinement"};
  app.require_subcommand(1);
  Options o;
  auto seed_opt = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Random seed")->capture_default_str(); };

  CLI::App* synth = app.add_subcommand("synth", "Write synthetic sequences");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--config", o.config, "JSON config (count, preset, overrides)");
  seed_opt(synth);

  CLI::App* trn = app.add_subcommand("train", "Train the network");
  trn->add_option("--data", o.data, "Directory of sequences")->required();
  trn->add_option("--config", o.config, "JSON config (net, train)");
  trn->add_option("--out", o.out, "Checkpoint path")->required();
  trn->add_flag("--overfit", o.overfit, "Fixed-batch sanity mode");
  seed_opt(trn);

  CLI::App* trk = app.add_subcommand("track", "Track one sequence");
  trk->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  trk->add_option("--seq", o.seq, "Sequence directory")->required();
  trk->add_option("--estimator", o.estimator, "Rough estimator")
      ->check(CLI::IsMember({"gt_jitter", "ncc"}))
      ->capture_default_str();
  trk->add_option("--out", o.out, "Output box file")->required();
  seed_opt(trk);

  CLI::App* ev = app.add_subcommand("eval", "Score predictions");
  ev->add_option("--pred", o.preds, "Prediction files")->required();
  ev->add_option("--seq", o.seqs, "Sequence directories, same order as --pred")->required();
  ev->add_option("--report", o.report, "Report directory")->required();

  CLI::App* ver = app.add_subcommand("verify", "Run property suites");
  ver->add_option("--suite", o.suite, "Suite")
      ->check(CLI::IsMember({"gradcheck", "geometry", "group-equiv", "all"}))
      ->capture_default_str();
  seed_opt(ver);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(o, out);
    if (trn->parsed()) return cmd_train(o, out);
    if (trk->parsed()) return cmd_track(o, out);
    if (ev->parsed()) return cmd_eval(o, out);
    return cmd_verify(o, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace comet::cli
