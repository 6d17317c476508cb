#include "comet/dataset.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace comet {

Image SequenceRecord::frame(int i) const {
  if (i < 0 || i >= length()) {
    throw DataError(name + ": frame " + std::to_string(i) + " out of range [0, " + std::to_string(length()) + ")");
  }
  if (!source) throw DataError(name + ": sequence has no frame source");
  return source(i);
}

namespace {

std::string trim(std::string s) {
  const auto keep = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), keep));
  s.erase(std::find_if(s.rbegin(), s.rend(), keep).base(), s.end());
  return s;
}

double parse_number(const std::string& field, const std::string& where) {
  const std::string t = trim(field);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size() || !std::isfinite(v)) {
    throw DataError(where + ": cannot parse number '" + t + "'");
  }
  return v;
}

}  // namespace

std::vector<BoxXYWH> parse_boxes(std::istream& in, const std::string& origin) {
  std::vector<BoxXYWH> out;
  std::string line;
  int lineno = 0;
  int pending_blank = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) {
      ++pending_blank;
      continue;
    }
    const std::string where = origin + ":" + std::to_string(lineno);
    if (pending_blank > 0) throw DataError(where + ": blank line inside annotation list");
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    if (fields.size() != 4) {
      throw DataError(where + ": expected 4 comma-separated fields, got " + std::to_string(fields.size()));
    }
    BoxXYWH b{parse_number(fields[0], where), parse_number(fields[1], where), parse_number(fields[2], where),
              parse_number(fields[3], where)};
    if (!b.valid()) throw DataError(where + ": box " + to_string(b) + " has non-positive size");
    out.push_back(b);
  }
  return out;
}

std::vector<BoxXYWH> read_boxes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return parse_boxes(in, path.string());
}

std::string format_box(const BoxXYWH& b) {
  std::string out;
  char buf[64];
  for (double v : {b.x, b.y, b.w, b.h}) {
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    if (!out.empty()) out.push_back(',');
    out.append(buf, r.ptr);
  }
  return out;
}

void write_boxes(const std::filesystem::path& path, const std::vector<BoxXYWH>& boxes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& b : boxes) out << format_box(b) << '\n';
  if (!out) throw DataError("write failed for " + path.string());
}

SequenceRecord load_sequence(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("not a sequence directory: " + dir.string());
  const fs::path frames_dir = dir / "frames";
  if (!fs::is_directory(frames_dir)) throw DataError(dir.string() + ": missing frames/ subfolder");
  SequenceRecord rec;
  rec.name = dir.filename().string();
  if (rec.name.empty()) rec.name = dir.parent_path().filename().string();
  rec.gt = read_boxes(dir / "groundtruth.txt");

  auto paths = std::make_shared<std::vector<fs::path>>();
  for (const auto& e : fs::directory_iterator(frames_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") paths->push_back(e.path());
  }
  std::sort(paths->begin(), paths->end());
  if (paths->size() != rec.gt.size()) {
    throw DataError(dir.string() + ": " + std::to_string(paths->size()) + " frames but " +
                    std::to_string(rec.gt.size()) + " groundtruth lines");
  }
  const fs::path attr = dir / "attributes.json";
  if (fs::exists(attr)) {
    std::ifstream in(attr);
    nlohmann::json j;
    try {
      in >> j;
      rec.attributes = j.at("attributes").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(attr.string() + ": " + e.what());
    }
  }
  rec.source = [paths](int i) { return read_ppm((*paths)[static_cast<std::size_t>(i)]); };
  return rec;
}

std::vector<SequenceRecord> load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("data directory not found: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory() && fs::exists(e.path() / "groundtruth.txt")) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<SequenceRecord> out;
  for (const auto& d : dirs) out.push_back(load_sequence(d));
  if (out.empty()) throw DataError("no sequences under " + root.string());
  return out;
}

void write_sequence(const SequenceRecord& seq, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "frames", ec);
  if (ec) throw DataError("cannot create " + (dir / "frames").string() + ": " + ec.message());
  for (int i = 0; i < seq.length(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%06d.ppm", i + 1);
    write_ppm(dir / "frames" / name, seq.frame(i));
  }
  write_boxes(dir / "groundtruth.txt", seq.gt);
  std::ofstream out(dir / "attributes.json");
  out << nlohmann::json{{"attributes", seq.attributes}}.dump() << '\n';
}

SynthConfig SynthConfig::preset(const std::string& name) {
  SynthConfig c;
  if (name == "easy") return c;
  if (name == "occlusion") {
    c.random_occlusions = 1;
    c.attributes = {"SO", "LO"};
    return c;
  }
  if (name == "drift") {
    c.scale_drift = 0.02;
    c.aspect_drift = 0.015;
    c.attributes = {"SO", "SV", "VC"};
    return c;
  }
  throw std::invalid_argument("unknown synth preset '" + name + "' (easy, occlusion, drift)");
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("synth config: " + m); };
  if (width < 16 || height < 16) fail("frame must be at least 16x16");
  if (length < 1) fail("length must be >= 1");
  if (!(min_size >= 1.0 && max_size >= min_size)) fail("need 1 <= min_size <= max_size");
  if (max_size > width || max_size > height) fail("target size exceeds frame");
  if (speed < 0 || accel_sigma < 0 || scale_drift < 0 || aspect_drift < 0) fail("noise levels must be >= 0");
  if (clutter < 0 || random_occlusions < 0 || occlusion_span < 1) fail("counts must be non-negative");
  if (random_occlusions > 0 && occlusion_span + 2 > length) fail("occlusion span does not fit the sequence");
  for (const auto& e : occlusions) {
    if (e.start < 0 || e.end < e.start || e.end >= length) fail("occlusion event outside the sequence");
    if (!(e.coverage >= 0.5 && e.coverage <= 1.0)) fail("occlusion coverage must be in [0.5, 1]");
  }
}

nlohmann::json SynthConfig::to_json() const {
  nlohmann::json occ = nlohmann::json::array();
  for (const auto& e : occlusions) occ.push_back({{"start", e.start}, {"end", e.end}, {"coverage", e.coverage}});
  return {{"width", width},
          {"height", height},
          {"length", length},
          {"min_size", min_size},
          {"max_size", max_size},
          {"speed", speed},
          {"accel_sigma", accel_sigma},
          {"clutter", clutter},
          {"scale_drift", scale_drift},
          {"aspect_drift", aspect_drift},
          {"random_occlusions", random_occlusions},
          {"occlusion_span", occlusion_span},
          {"occlusions", occ},
          {"attributes", attributes}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  const nlohmann::json keys = c.to_json();
  for (const auto& [k, v] : j.items()) {
    if (!keys.contains(k)) throw std::invalid_argument("synth config: unknown key '" + k + "'");
  }
  auto get = [&](const char* k, auto& field) {
    if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
  };
  get("width", c.width);
  get("height", c.height);
  get("length", c.length);
  get("min_size", c.min_size);
  get("max_size", c.max_size);
  get("speed", c.speed);
  get("accel_sigma", c.accel_sigma);
  get("clutter", c.clutter);
  get("scale_drift", c.scale_drift);
  get("aspect_drift", c.aspect_drift);
  get("random_occlusions", c.random_occlusions);
  get("occlusion_span", c.occlusion_span);
  get("attributes", c.attributes);
  if (j.contains("occlusions")) {
    c.occlusions.clear();
    for (const auto& e : j.at("occlusions")) {
      c.occlusions.push_back({e.at("start").get<int>(), e.at("end").get<int>(), e.value("coverage", 0.75)});
    }
  }
  c.validate();
  return c;
}

namespace {

using Rgb = std::array<std::uint8_t, 3>;

struct Script {
  Image background;
  Rgb target{};
  Rgb occluder{};
  std::vector<BoxXYWH> boxes;
  std::vector<BoxXYWH> occluders;  // w == 0 when inactive
};

// Blends color into the image weighted by exact pixel coverage of the box.
void paint(Image& img, const BoxXYWH& b, const Rgb& color) {
  if (!(b.w > 0 && b.h > 0)) return;
  const int x0 = std::max(0, static_cast<int>(std::floor(b.x)));
  const int x1 = std::min(img.width, static_cast<int>(std::ceil(b.x + b.w)));
  const int y0 = std::max(0, static_cast<int>(std::floor(b.y)));
  const int y1 = std::min(img.height, static_cast<int>(std::ceil(b.y + b.h)));
  for (int y = y0; y < y1; ++y) {
    const double cy = std::min<double>(y + 1, b.y + b.h) - std::max<double>(y, b.y);
    for (int x = x0; x < x1; ++x) {
      const double cx = std::min<double>(x + 1, b.x + b.w) - std::max<double>(x, b.x);
      const double cov = std::clamp(cx * cy, 0.0, 1.0);
      std::uint8_t* p = img.px(x, y);
      for (int c = 0; c < 3; ++c) p[c] = static_cast<std::uint8_t>(std::lround(p[c] + cov * (color[c] - p[c])));
    }
  }
}

Rgb random_color(Rng& rng) {
  std::uniform_int_distribution<int> u(0, 255);
  return {static_cast<std::uint8_t>(u(rng)), static_cast<std::uint8_t>(u(rng)), static_cast<std::uint8_t>(u(rng))};
}

// Reflects v into [lo, hi], flipping the direction of d on each bounce.
void reflect(double& v, double& d, double lo, double hi) {
  if (hi <= lo) {
    v = lo;
    d = 0;
    return;
  }
  for (int k = 0; k < 8 && (v < lo || v > hi); ++k) {
    if (v < lo) v = 2 * lo - v;
    if (v > hi) v = 2 * hi - v;
    d = -d;
  }
  v = std::clamp(v, lo, hi);
}

Script make_script(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Script s;

  const Rgb base = {static_cast<std::uint8_t>(60 + 120 * unit(rng)), static_cast<std::uint8_t>(60 + 120 * unit(rng)),
                    static_cast<std::uint8_t>(60 + 120 * unit(rng))};
  s.background = Image(cfg.width, cfg.height);
  for (std::size_t i = 0; i < s.background.rgb.size(); i += 3) {
    std::copy(base.begin(), base.end(), s.background.rgb.begin() + static_cast<std::ptrdiff_t>(i));
  }
  for (int k = 0; k < cfg.clutter; ++k) {
    const double w = 4 + 36 * unit(rng), h = 4 + 36 * unit(rng);
    paint(s.background, {unit(rng) * (cfg.width - w), unit(rng) * (cfg.height - h), w, h}, random_color(rng));
  }
  // Target color kept away from mid-gray so it rarely vanishes into the base.
  do {
    s.target = random_color(rng);
  } while (std::abs(s.target[0] - base[0]) + std::abs(s.target[1] - base[1]) + std::abs(s.target[2] - base[2]) < 150);
  s.occluder = random_color(rng);

  double size = std::exp(std::log(cfg.min_size) + unit(rng) * (std::log(cfg.max_size) - std::log(cfg.min_size)));
  double log_aspect = (unit(rng) - 0.5) * 0.6;
  auto dims = [&] {
    const double a = std::exp(log_aspect / 2);
    return std::make_pair(std::clamp(size * a, cfg.min_size, cfg.max_size),
                          std::clamp(size / a, cfg.min_size, cfg.max_size));
  };
  auto [w, h] = dims();
  double cx = w / 2 + unit(rng) * (cfg.width - w), cy = h / 2 + unit(rng) * (cfg.height - h);
  const double heading = 2 * M_PI * unit(rng);
  const double speed = cfg.speed * unit(rng);
  double vx = speed * std::cos(heading), vy = speed * std::sin(heading);
  const double vmax = 2 * std::max(cfg.speed, 0.5);
  double dsize = 0, daspect = 0;

  for (int t = 0; t < cfg.length; ++t) {
    if (t > 0) {
      vx += cfg.accel_sigma * normal(rng);
      vy += cfg.accel_sigma * normal(rng);
      const double sp = std::hypot(vx, vy);
      if (sp > vmax) {
        vx *= vmax / sp;
        vy *= vmax / sp;
      }
      if (cfg.scale_drift > 0) {
        double ls = std::log(size) + cfg.scale_drift * normal(rng);
        reflect(ls, dsize, std::log(cfg.min_size), std::log(cfg.max_size));
        size = std::exp(ls);
      }
      if (cfg.aspect_drift > 0) {
        log_aspect += cfg.aspect_drift * normal(rng);
        reflect(log_aspect, daspect, -0.7, 0.7);
      }
      std::tie(w, h) = dims();
      cx += vx;
      cy += vy;
    }
    reflect(cx, vx, w / 2, cfg.width - w / 2);
    reflect(cy, vy, h / 2, cfg.height - h / 2);
    s.boxes.push_back({cx - w / 2, cy - h / 2, w, h});
  }

  std::vector<OcclusionEvent> events = cfg.occlusions;
  for (int k = 0; k < cfg.random_occlusions; ++k) {
    const int lo = 1, hi = cfg.length - cfg.occlusion_span - 1;
    const int start = lo + static_cast<int>(unit(rng) * (hi - lo + 1));
    events.push_back({start, start + cfg.occlusion_span - 1, 0.6 + 0.4 * unit(rng)});
  }
  s.occluders.assign(static_cast<std::size_t>(cfg.length), BoxXYWH{0, 0, 0, 0});
  for (const auto& e : events) {
    const bool from_left = unit(rng) < 0.5;
    for (int t = e.start; t <= e.end; ++t) {
      const BoxXYWH& b = s.boxes[static_cast<std::size_t>(t)];
      // Covers the full target height plus a margin; width fraction from the event.
      const double ow = e.coverage * b.w;
      s.occluders[static_cast<std::size_t>(t)] = {from_left ? b.x - 2 : b.x + b.w - ow, b.y - 2, ow + 2, b.h + 4};
    }
  }
  return s;
}

}  // namespace

SequenceRecord synth_sequence(const SynthConfig& cfg, std::uint64_t seed, const std::string& name) {
  auto script = std::make_shared<Script>(make_script(cfg, seed));
  SequenceRecord rec;
  rec.name = name;
  rec.gt = script->boxes;
  rec.attributes = cfg.attributes;
  rec.source = [script](int i) {
    Image img = script->background;
    paint(img, script->boxes[static_cast<std::size_t>(i)], script->target);
    paint(img, script->occluders[static_cast<std::size_t>(i)], script->occluder);
    return img;
  };
  return rec;
}

std::vector<BoxXYWH> synth_occluders(const SynthConfig& cfg, std::uint64_t seed) {
  return make_script(cfg, seed).occluders;
}

}  // namespace comet
