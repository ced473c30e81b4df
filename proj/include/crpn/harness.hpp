#pragma once
// Sequence I/O, OPE metrics, checkpoints, overlays and the ablation runner.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "crpn/geometry.hpp"
#include "crpn/image.hpp"
#include "crpn/model.hpp"
#include "crpn/synth.hpp"
#include "crpn/tracker.hpp"
#include "crpn/training.hpp"

namespace crpn::harness {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

/// Flat `key = value` text with `#` comments. Getters mark keys as used so
/// callers can reject typos.
class ConfigMap {
 public:
  static ConfigMap parse(const std::string& text);
  static ConfigMap load(const fs::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  double get_double(const std::string& key, double fallback) const;
  long get_int(const std::string& key, long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  std::vector<std::string> unused() const;
  std::string str() const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
  mutable std::map<std::string, bool> used_;
  std::string raw(const std::string& key) const;
};

void apply(const ConfigMap& cfg, training::TrainConfig& train);
void apply(const ConfigMap& cfg, tracking::TrackerConfig& tracker);
void apply(const ConfigMap& cfg, synth::SequenceSpec& spec);

// ---------------------------------------------------------------- sequences

struct Sequence {
  std::string name;
  std::vector<fs::path> frames;
  std::vector<geometry::BBox> groundtruth;  // center form
};

class SequenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads `<dir>/img/*.ppm` (sorted by name) and `<dir>/groundtruth.txt`.
Sequence load_sequence(const fs::path& dir);

/// One corner-form `x,y,w,h` per line (comma or tab separated).
std::vector<geometry::BBox> parse_boxes(const std::string& text, const std::string& source);
std::vector<geometry::BBox> read_boxes(const fs::path& path);
void write_boxes(const std::vector<geometry::BBox>& boxes, const fs::path& path);

/// Writes a generated sequence in the layout load_sequence reads.
void write_sequence(const synth::SyntheticSequence& seq, const fs::path& dir);

// ---------------------------------------------------------------- metrics

inline constexpr int kSuccessBins = 51;
inline constexpr double kPrecisionRadius = 20.0;

/// i / 50 for i in 0..50.
double success_threshold(int i);

struct SequenceReport {
  std::string name;
  std::size_t frames = 0;  // scored frames, frame 1 excluded
  double precision = 0;    // center error <= 20 px
  std::array<double, kSuccessBins> success{};
  double auc = 0;
  double mean_iou = 0;
  double fps = 0;
};

struct EvalReport {
  std::vector<SequenceReport> sequences;
  SequenceReport aggregate;  // unweighted mean over sequences
};

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

SequenceReport evaluate_ope(const std::vector<geometry::BBox>& predicted, const std::vector<geometry::BBox>& gt,
                            const std::string& name = "", double fps = 0);

/// Sorts by name first so the result does not depend on input order.
EvalReport aggregate(std::vector<SequenceReport> sequences);

std::string format_report(const EvalReport& report);
std::string report_csv(const EvalReport& report);

// ---------------------------------------------------------------- tracking runs

struct TrackRun {
  std::vector<geometry::BBox> boxes;  // boxes[0] is the initial ground truth
  std::vector<std::vector<std::size_t>> survivors;  // per frame; empty for frame 1
  double seconds = 0;  // time spent in track_frame
  double fps() const;
};

TrackRun track_frames(const std::vector<imaging::Image>& frames, const geometry::BBox& init_box,
                      const model::ModelParams<float>& params, const tracking::TrackerConfig& cfg);

TrackRun track_sequence(const Sequence& seq, const model::ModelParams<float>& params,
                        const tracking::TrackerConfig& cfg);

// ---------------------------------------------------------------- checkpoints

enum class CheckpointFault { BadMagic, UnsupportedVersion, Truncated, Corrupt, Io };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointFault fault, const std::string& what) : std::runtime_error(what), fault_(fault) {}
  CheckpointFault fault() const { return fault_; }

 private:
  CheckpointFault fault_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

/// Parameters plus a `meta.config` tensor carrying the model, cascade and
/// training configuration as key=value text (one byte per element).
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<NamedTensor> tensors;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path);

Checkpoint make_checkpoint(const model::ModelParams<float>& params, const training::TrainConfig& train);
model::ModelParams<float> params_from(const Checkpoint& ckpt);
training::TrainConfig train_config_from(const Checkpoint& ckpt);

std::string describe_model(const model::ModelConfig& cfg);
model::ModelConfig parse_model(const ConfigMap& cfg);

// ---------------------------------------------------------------- overlays

/// Writes `<out_dir>/NNNN.ppm` with the ground truth in green and the
/// prediction in red, plus a survivor banner when available.
void render_overlay(const Sequence& seq, const std::vector<geometry::BBox>& predicted, const fs::path& out_dir,
                    const std::vector<std::vector<std::size_t>>& survivors = {});

/// In-memory variant used by render_overlay.
imaging::Image overlay_frame(const imaging::Image& frame, const geometry::BBox& gt, const geometry::BBox& predicted,
                             const std::vector<std::size_t>& survivors);

// ---------------------------------------------------------------- ablation

struct AblationVariant {
  std::string name;
  int stages = 3;
  bool naf = true;  // off trains and tracks with theta = 1
  bool ftb = true;

  training::TrainConfig train_config(const training::TrainConfig& base, std::uint64_t seed) const;
  tracking::TrackerConfig tracker_config(const tracking::TrackerConfig& base) const;
};

/// stages-1, stages-2, stages-3, naf-off, ftb-off.
std::vector<AblationVariant> default_variants();

struct AblationConfig {
  fs::path checkpoint_dir;
  std::vector<AblationVariant> variants = default_variants();
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int sequences = 200;
  std::uint64_t eval_seed = 7777;
  synth::SequenceSpec spec;
  tracking::TrackerConfig tracker;
};

fs::path variant_checkpoint(const fs::path& dir, const AblationVariant& v, std::uint64_t seed);

struct AblationRow {
  std::string variant;
  int stages = 0;
  bool naf = true, ftb = true;
  std::vector<double> seed_mean_iou;  // one per training seed
  double mean_iou = 0;
  double precision = 0;
  double auc = 0;
  double fps = 0;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  const AblationRow& row(const std::string& variant) const;
};

/// Sequence i of the held-out suite; independent of how many are requested.
synth::SyntheticSequence eval_sequence(std::uint64_t eval_seed, int index, const synth::SequenceSpec& spec);

/// Tracks every held-out sequence with every (variant, seed) checkpoint.
/// Throws SequenceError naming the first missing checkpoint.
AblationTable ablate(const AblationConfig& cfg, const std::function<void(const std::string&)>& progress = {});

std::string ablation_csv(const AblationTable& table);

}  // namespace crpn::harness
