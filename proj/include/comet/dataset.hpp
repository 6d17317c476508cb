#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "comet/boxgeom.hpp"
#include "comet/image.hpp"

namespace comet {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One annotated sequence. Frames are produced on demand so long sequences
/// never have to be resident at once.
struct SequenceRecord {
  std::string name;
  std::vector<BoxXYWH> gt;
  std::vector<std::string> attributes;
  std::function<Image(int)> source;

  int length() const { return static_cast<int>(gt.size()); }
  Image frame(int i) const;
};

/// Parses "x,y,w,h" lines (LF or CRLF). Blank trailing lines are ignored.
std::vector<BoxXYWH> parse_boxes(std::istream& in, const std::string& origin);
std::vector<BoxXYWH> read_boxes(const std::filesystem::path& path);
/// Shortest round-trip decimal form, e.g. "12.5,3,40,17.25".
std::string format_box(const BoxXYWH& b);
void write_boxes(const std::filesystem::path& path, const std::vector<BoxXYWH>& boxes);

/// Reads <dir>/groundtruth.txt, <dir>/frames/*.ppm and optional attributes.json.
SequenceRecord load_sequence(const std::filesystem::path& dir);
/// Every immediate subdirectory holding a groundtruth.txt, in name order.
std::vector<SequenceRecord> load_dataset(const std::filesystem::path& root);
void write_sequence(const SequenceRecord& seq, const std::filesystem::path& dir);

struct OcclusionEvent {
  int start = 0;  // inclusive
  int end = 0;    // inclusive
  double coverage = 0.75;  // fraction of the target width hidden, >= 0.5
};

struct SynthConfig {
  int width = 256;
  int height = 256;
  int length = 100;
  double min_size = 8.0;
  double max_size = 32.0;
  double speed = 1.5;         // initial speed bound, px/frame
  double accel_sigma = 0.15;  // per-frame velocity noise
  int clutter = 16;           // static background rectangles
  double scale_drift = 0.0;   // std of per-frame log-size change
  double aspect_drift = 0.0;  // std of per-frame log-aspect change
  int random_occlusions = 0;  // events drawn per sequence
  int occlusion_span = 10;
  std::vector<OcclusionEvent> occlusions;  // explicit events, in addition
  std::vector<std::string> attributes{"SO"};

  /// easy | occlusion | drift
  static SynthConfig preset(const std::string& name);
  void validate() const;
  nlohmann::json to_json() const;
  static SynthConfig from_json(const nlohmann::json& j);
};

/// Deterministic per (cfg, seed): a filled colored rectangle moving over a
/// static cluttered background, rendered with exact area coverage.
SequenceRecord synth_sequence(const SynthConfig& cfg, std::uint64_t seed, const std::string& name);

/// Per-frame occluder rectangles of a synthetic sequence (empty box when none).
std::vector<BoxXYWH> synth_occluders(const SynthConfig& cfg, std::uint64_t seed);

}  // namespace comet
