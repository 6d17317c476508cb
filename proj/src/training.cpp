#include "comet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <ostream>

#include "comet/image.hpp"

namespace comet {

using ad::Graph;
using ad::Var;

void SamplePairConfig::validate() const {
  if (max_frame_gap < 0) throw std::invalid_argument("sample pairs: max_frame_gap must be >= 0");
  if (!(area_factor > 0)) throw std::invalid_argument("sample pairs: area_factor must be > 0");
  if (out_size < 16) throw std::invalid_argument("sample pairs: out_size must be >= 16");
  if (n_test < 1 || n_ref < 1) throw std::invalid_argument("sample pairs: proposal counts must be >= 1");
  if (n_ref * 2 != n_test) throw std::invalid_argument("sample pairs: n_ref must equal n_test / 2");
  if (center_jitter < 0 || scale_jitter < 0) throw std::invalid_argument("sample pairs: jitter must be >= 0");
  ref_jitter.validate();
  test_jitter.validate();
}

SamplePair make_sample_pair(const Image& ref_frame, const BoxXYWH& ref_gt, const Image& test_frame,
                            const BoxXYWH& test_gt, Rng& rng, const SamplePairConfig& cfg) {
  require_valid(ref_gt, "sample pair reference");
  require_valid(test_gt, "sample pair test");
  SamplePair p;
  const CropSpec ref_crop(ref_gt, cfg.area_factor, cfg.out_size);
  p.ref_patch = crop_patch(ref_frame, ref_crop);
  const BoxXYWH rgt = ref_crop.to_crop(ref_gt);
  p.ref_boxes.push_back(rgt);
  p.ref_exhausted.push_back(false);
  JitterConfig rj = cfg.ref_jitter;
  rj.count = cfg.n_ref - 1;
  if (rj.count > 0) {
    const ProposalSet ps = generate_proposals(rgt, rj, rng);
    p.ref_boxes.insert(p.ref_boxes.end(), ps.boxes.begin(), ps.boxes.end());
    p.ref_exhausted.insert(p.ref_exhausted.end(), ps.exhausted.begin(), ps.exhausted.end());
  }

  std::normal_distribution<double> normal(0.0, 1.0);
  const double base = std::sqrt(test_gt.w * test_gt.h);
  const double cx = test_gt.cx() + cfg.center_jitter * base * normal(rng);
  const double cy = test_gt.cy() + cfg.center_jitter * base * normal(rng);
  const double side = cfg.area_factor * base * std::exp(cfg.scale_jitter * normal(rng));
  const CropSpec test_crop(cx, cy, side, cfg.out_size);
  p.test_patch = crop_patch(test_frame, test_crop);
  p.test_gt = test_crop.to_crop(test_gt);
  JitterConfig tj = cfg.test_jitter;
  tj.count = cfg.n_test;
  p.test_boxes = generate_proposals(p.test_gt, tj, rng).boxes;
  for (const auto& b : p.test_boxes) {
    p.iou_targets.push_back(normalize_iou(iou(p.test_gt, b)));
    const CenterOffset c = cle_normalized(p.test_gt, b);
    p.cle_targets.push_back({std::clamp(c.dx, -1.0, 1.0), std::clamp(c.dy, -1.0, 1.0)});
  }
  return p;
}

SamplePair build_sample_pair(const SequenceRecord& seq, Rng& rng, const SamplePairConfig& cfg) {
  const int n = seq.length();
  if (n < 2) throw DataError(seq.name + ": need at least 2 annotated frames for a training pair");
  std::uniform_int_distribution<int> pick_ref(0, n - 1);
  const int r = pick_ref(rng);
  std::uniform_int_distribution<int> pick_test(std::max(0, r - cfg.max_frame_gap),
                                               std::min(n - 1, r + cfg.max_frame_gap));
  const int t = pick_test(rng);
  const BoxXYWH& rg = seq.gt[static_cast<std::size_t>(r)];
  const BoxXYWH& tg = seq.gt[static_cast<std::size_t>(t)];
  if (!rg.valid() || !tg.valid()) throw DataError(seq.name + ": missing annotation in sampled frames");
  SamplePair p = make_sample_pair(seq.frame(r), rg, seq.frame(t), tg, rng, cfg);
  p.ref_frame = r;
  p.test_frame = t;
  return p;
}

void apply_reference_augmentation(Tensor<float>& patch, std::vector<BoxXYWH>& boxes, bool flip,
                                  const std::array<double, 3>& brightness) {
  if (patch.rank() != 3 || patch.dim(0) != 3 || patch.dim(1) != patch.dim(2)) {
    throw ShapeError("augment_reference: expected a [3,S,S] patch, got " + shape_str(patch.shape()));
  }
  const int s = patch.dim(1);
  float* d = patch.data();
  for (int c = 0; c < 3; ++c) {
    const float k = static_cast<float>(brightness[static_cast<std::size_t>(c)]);
    for (int y = 0; y < s; ++y) {
      float* row = d + (static_cast<std::size_t>(c) * s + y) * s;
      if (flip) std::reverse(row, row + s);
      if (k != 1.0f) {
        for (int x = 0; x < s; ++x) row[x] = std::clamp(row[x] * k, 0.0f, 1.0f);
      }
    }
  }
  if (flip) {
    for (auto& b : boxes) b.x = s - b.x - b.w;
  }
}

void augment_reference(Tensor<float>& patch, std::vector<BoxXYWH>& boxes, Rng& rng) {
  std::uniform_real_distribution<double> coin(0.0, 1.0), bright(0.9, 1.1);
  const bool flip = coin(rng) < 0.5;
  const std::array<double, 3> k{bright(rng), bright(rng), bright(rng)};
  apply_reference_augmentation(patch, boxes, flip, k);
}

void LossConfig::validate() const {
  if (!(lambda >= 0)) throw std::invalid_argument("loss: lambda must be >= 0");
}

double smooth_l1_value(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

template <typename T>
LossTerms multitask_loss(Graph<T>& g, const net::GroupedOutput& pred, const Tensor<T>& iou_targets,
                         const Tensor<T>& cle_targets, const LossConfig& cfg) {
  cfg.validate();
  if (g.shape(pred.iou) != iou_targets.shape()) {
    throw ShapeError("multitask_loss: IoU prediction " + shape_str(g.shape(pred.iou)) + " vs target " +
                     shape_str(iou_targets.shape()));
  }
  if (g.shape(pred.cle) != cle_targets.shape()) {
    throw ShapeError("multitask_loss: CLE prediction " + shape_str(g.shape(pred.cle)) + " vs target " +
                     shape_str(cle_targets.shape()));
  }
  LossTerms out;
  out.l_iou = ad::mean(g, ad::square(g, ad::sub(g, pred.iou, g.constant(iou_targets))));
  out.l_cle = ad::mean(g, ad::smooth_l1(g, ad::sub(g, pred.cle, g.constant(cle_targets))));
  out.total = ad::add(g, out.l_iou, ad::affine(g, out.l_cle, cfg.lambda, 0.0));
  return out;
}

template LossTerms multitask_loss<float>(Graph<float>&, const net::GroupedOutput&, const Tensor<float>&,
                                         const Tensor<float>&, const LossConfig&);
template LossTerms multitask_loss<double>(Graph<double>&, const net::GroupedOutput&, const Tensor<double>&,
                                          const Tensor<double>&, const LossConfig&);

Batch collate(const std::vector<SamplePair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("collate: empty batch");
  const int b = static_cast<int>(pairs.size());
  const int s = pairs[0].ref_patch.dim(1);
  const int nr = static_cast<int>(pairs[0].ref_boxes.size());
  const int nt = static_cast<int>(pairs[0].test_boxes.size());
  Batch out;
  out.ref_images = Tensor<float>({b, 3, s, s});
  out.test_images = Tensor<float>({b, 3, s, s});
  out.iou_targets = Tensor<float>({b * nr, nt});
  out.cle_targets = Tensor<float>({b * nr, nt, 2});
  out.layout.boxes_per_map = nt;
  std::vector<BoxXYWH> rb, tb;
  const std::size_t img = static_cast<std::size_t>(3) * s * s;
  for (int i = 0; i < b; ++i) {
    const SamplePair& p = pairs[static_cast<std::size_t>(i)];
    if (p.ref_patch.dim(1) != s || static_cast<int>(p.ref_boxes.size()) != nr ||
        static_cast<int>(p.test_boxes.size()) != nt) {
      throw ShapeError("collate: pairs disagree in patch size or proposal counts");
    }
    std::memcpy(out.ref_images.data() + i * img, p.ref_patch.data(), img * sizeof(float));
    std::memcpy(out.test_images.data() + i * img, p.test_patch.data(), img * sizeof(float));
    rb.insert(rb.end(), p.ref_boxes.begin(), p.ref_boxes.end());
    tb.insert(tb.end(), p.test_boxes.begin(), p.test_boxes.end());
    for (int r = 0; r < nr; ++r) {
      out.ref_batch.push_back(i);
      out.layout.map_of_group.push_back(i);
      const std::size_t row = static_cast<std::size_t>(i * nr + r);
      for (int k = 0; k < nt; ++k) {
        out.iou_targets[row * nt + k] = static_cast<float>(p.iou_targets[static_cast<std::size_t>(k)]);
        out.cle_targets[(row * nt + k) * 2] = static_cast<float>(p.cle_targets[static_cast<std::size_t>(k)][0]);
        out.cle_targets[(row * nt + k) * 2 + 1] = static_cast<float>(p.cle_targets[static_cast<std::size_t>(k)][1]);
      }
    }
  }
  out.ref_boxes = net::box_tensor<float>(rb);
  out.test_boxes = net::box_tensor<float>(tb);
  return out;
}

net::GroupedOutput forward_batch(Graph<float>& g, const net::CometNet<float>& net, const Batch& batch) {
  const Var rf = net.features(g, g.constant(batch.ref_images));
  const Var tf = net.features(g, g.constant(batch.test_images));
  const Var mods = net.reference_modulation(g, rf, g.constant(batch.ref_boxes), batch.ref_batch);
  return net.grouped_heads(g, tf, mods, g.constant(batch.test_boxes), batch.layout);
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.steps = 2000;
  c.batch_size = 8;
  c.steps_per_epoch = 100;
  c.lr = 1e-3;
  c.pairs.out_size = NetConfig::desk().input_size;
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (steps < 1) fail("steps must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (steps_per_epoch < 1) fail("steps_per_epoch must be >= 1");
  if (!(lr > 0)) fail("lr must be > 0");
  if (!(weight_decay >= 0)) fail("weight_decay must be >= 0");
  if (!(lr_decay > 0 && lr_decay <= 1)) fail("lr_decay must be in (0, 1]");
  if (decay_every_epochs < 1) fail("decay_every_epochs must be >= 1");
  if (!(lambda >= 0)) fail("lambda must be >= 0");
  pairs.validate();
}

double TrainConfig::lr_at(int step) const {
  return scheduled_lr(lr, step / steps_per_epoch, lr_decay, decay_every_epochs);
}

namespace {

nlohmann::json jitter_json(const JitterConfig& j) {
  nlohmann::json pool = nlohmann::json::array();
  for (const auto& s : j.sigma_pool) pool.push_back(s);
  return {{"threshold", j.threshold}, {"max_iter", j.max_iter}, {"sigma_pool", pool}};
}

JitterConfig jitter_from_json(const nlohmann::json& j, JitterConfig base, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (k != "threshold" && k != "max_iter" && k != "sigma_pool") {
      throw std::invalid_argument("train config: unknown key '" + where + "." + k + "'");
    }
  }
  base.threshold = j.value("threshold", base.threshold);
  base.max_iter = j.value("max_iter", base.max_iter);
  if (j.contains("sigma_pool")) base.sigma_pool = j.at("sigma_pool").get<std::vector<Vec4>>();
  return base;
}

}  // namespace

nlohmann::json TrainConfig::to_json() const {
  return {{"schema_version", 1},
          {"steps", steps},
          {"batch_size", batch_size},
          {"steps_per_epoch", steps_per_epoch},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"lr_decay", lr_decay},
          {"decay_every_epochs", decay_every_epochs},
          {"lambda", lambda},
          {"seed", seed},
          {"augment", augment},
          {"overfit", overfit},
          {"pairs",
           {{"max_frame_gap", pairs.max_frame_gap},
            {"area_factor", pairs.area_factor},
            {"out_size", pairs.out_size},
            {"n_test", pairs.n_test},
            {"n_ref", pairs.n_ref},
            {"center_jitter", pairs.center_jitter},
            {"scale_jitter", pairs.scale_jitter},
            {"ref_jitter", jitter_json(pairs.ref_jitter)},
            {"test_jitter", jitter_json(pairs.test_jitter)}}}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("train config: expected a JSON object");
  if (!j.contains("schema_version")) throw std::invalid_argument("train config: missing schema_version");
  if (j.at("schema_version") != 1) throw std::invalid_argument("train config: unsupported schema_version");
  TrainConfig c = desk();
  const nlohmann::json keys = c.to_json();
  for (const auto& [k, v] : j.items()) {
    if (!keys.contains(k)) throw std::invalid_argument("train config: unknown key '" + k + "'");
  }
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps_per_epoch = j.value("steps_per_epoch", c.steps_per_epoch);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr_decay = j.value("lr_decay", c.lr_decay);
    c.decay_every_epochs = j.value("decay_every_epochs", c.decay_every_epochs);
    c.lambda = j.value("lambda", c.lambda);
    c.seed = j.value("seed", c.seed);
    c.augment = j.value("augment", c.augment);
    c.overfit = j.value("overfit", c.overfit);
    if (j.contains("pairs")) {
      const auto& p = j.at("pairs");
      const auto& pk = keys.at("pairs");
      for (const auto& [k, v] : p.items()) {
        if (!pk.contains(k)) throw std::invalid_argument("train config: unknown key 'pairs." + k + "'");
      }
      c.pairs.max_frame_gap = p.value("max_frame_gap", c.pairs.max_frame_gap);
      c.pairs.area_factor = p.value("area_factor", c.pairs.area_factor);
      c.pairs.out_size = p.value("out_size", c.pairs.out_size);
      c.pairs.n_test = p.value("n_test", c.pairs.n_test);
      c.pairs.n_ref = p.value("n_ref", c.pairs.n_ref);
      c.pairs.center_jitter = p.value("center_jitter", c.pairs.center_jitter);
      c.pairs.scale_jitter = p.value("scale_jitter", c.pairs.scale_jitter);
      if (p.contains("ref_jitter")) c.pairs.ref_jitter = jitter_from_json(p.at("ref_jitter"), c.pairs.ref_jitter, "pairs.ref_jitter");
      if (p.contains("test_jitter")) c.pairs.test_jitter = jitter_from_json(p.at("test_jitter"), c.pairs.test_jitter, "pairs.test_jitter");
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

std::vector<SamplePair> draw_pairs(const std::vector<SequenceRecord>& data, int count, Rng& rng,
                                   const TrainConfig& cfg) {
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<SamplePair> out;
  for (int i = 0; i < count; ++i) {
    SamplePair p = build_sample_pair(data[pick(rng)], rng, cfg.pairs);
    if (cfg.augment && !cfg.overfit) augment_reference(p.ref_patch, p.ref_boxes, rng);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TrainResult train(const std::vector<SequenceRecord>& data, const NetConfig& net_cfg, const TrainConfig& cfg,
                  std::ostream* progress) {
  net_cfg.validate();
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (cfg.pairs.out_size != net_cfg.input_size) {
    throw std::invalid_argument("train: pair out_size " + std::to_string(cfg.pairs.out_size) +
                                " differs from network input_size " + std::to_string(net_cfg.input_size));
  }
  Rng rng(cfg.seed);
  TrainResult res{net::init_params<float>(net_cfg, cfg.seed), {}};
  const net::CometNet<float> net(net_cfg, res.params);
  Adam<float> opt(AdamConfig{cfg.lr, cfg.weight_decay});
  const LossConfig loss_cfg{cfg.lambda};

  Batch fixed;
  if (cfg.overfit) fixed = collate(draw_pairs(data, cfg.batch_size, rng, cfg));
  double epoch_sum = 0.0;
  for (int step = 0; step < cfg.steps; ++step) {
    const Batch batch = cfg.overfit ? Batch{} : collate(draw_pairs(data, cfg.batch_size, rng, cfg));
    const Batch& b = cfg.overfit ? fixed : batch;
    Graph<float> g(true);
    const net::GroupedOutput out = forward_batch(g, net, b);
    const LossTerms loss = multitask_loss(g, out, b.iou_targets, b.cle_targets, loss_cfg);
    const double total = g.value(loss.total)[0];
    if (!std::isfinite(total)) {
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) + " (l_iou " +
                               std::to_string(g.value(loss.l_iou)[0]) + ", l_cle " +
                               std::to_string(g.value(loss.l_cle)[0]) + ")");
    }
    res.params.zero_grad();
    g.backward(loss.total);
    const double lr = cfg.lr_at(step);
    opt.step(res.params, lr);
    res.log.push_back({step, total, g.value(loss.l_iou)[0], g.value(loss.l_cle)[0], lr});

    epoch_sum += total;
    const bool epoch_end = (step + 1) % cfg.steps_per_epoch == 0 || step + 1 == cfg.steps;
    if (epoch_end) {
      const int in_epoch = step % cfg.steps_per_epoch + 1;
      if (progress) {
        *progress << "epoch " << step / cfg.steps_per_epoch << " steps " << step + 1 << " mean_loss "
                  << epoch_sum / in_epoch << " lr " << lr << std::endl;
      }
      epoch_sum = 0.0;
    }
  }
  return res;
}

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,loss,l_iou,l_cle,lr\n";
  char buf[160];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g\n", r.step, r.loss, r.l_iou, r.l_cle, r.lr);
    out << buf;
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace comet
