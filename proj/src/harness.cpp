#include "crpn/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace crpn::harness {

using geometry::BBox;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SequenceError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------- config

ConfigMap ConfigMap::parse(const std::string& text) {
  ConfigMap cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    cfg.values_[key] = trim(line.substr(eq + 1));
    cfg.lines_[key] = lineno;
  }
  return cfg;
}

ConfigMap ConfigMap::load(const fs::path& path) { return parse(read_text(path)); }

std::string ConfigMap::raw(const std::string& key) const {
  used_[key] = true;
  return values_.at(key);
}

double ConfigMap::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  double v = 0;
  if (!parse_double(raw(key), v)) {
    const auto it = lines_.find(key);
    throw std::invalid_argument("config key '" + key + "'" +
                                (it != lines_.end() ? " (line " + std::to_string(it->second) + ")" : "") +
                                ": not a number");
  }
  return v;
}

long ConfigMap::get_int(const std::string& key, long fallback) const {
  if (!has(key)) return fallback;
  const std::string s = raw(key);
  long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw std::invalid_argument("config key '" + key + "': not an integer");
  }
  return v;
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const std::string s = raw(key);
  if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "off" || s == "no") return false;
  throw std::invalid_argument("config key '" + key + "': not a boolean");
}

std::string ConfigMap::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? raw(key) : fallback;
}

std::vector<std::string> ConfigMap::unused() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_) {
    if (!used_.count(k)) out.push_back(k);
  }
  return out;
}

std::string ConfigMap::str() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

void apply(const ConfigMap& cfg, training::TrainConfig& t) {
  t.lambda = cfg.get_double("lambda", t.lambda);
  t.tau_pos = cfg.get_double("tau_pos", t.tau_pos);
  t.tau_neg = cfg.get_double("tau_neg", t.tau_neg);
  t.theta = cfg.get_double("theta", t.theta);
  t.epochs = static_cast<int>(cfg.get_int("epochs", t.epochs));
  t.pairs_per_epoch = static_cast<int>(cfg.get_int("pairs_per_epoch", t.pairs_per_epoch));
  t.lr_start = cfg.get_double("lr_start", t.lr_start);
  t.lr_end = cfg.get_double("lr_end", t.lr_end);
  t.max_samples = static_cast<int>(cfg.get_int("max_samples", t.max_samples));
  t.pos_cap = static_cast<int>(cfg.get_int("pos_cap", t.pos_cap));
  t.fallback_k = static_cast<int>(cfg.get_int("fallback_k", t.fallback_k));
  t.stages = static_cast<int>(cfg.get_int("stages", t.stages));
  t.feature_transfer = cfg.get_bool("feature_transfer", t.feature_transfer);
  t.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<long>(t.seed)));
}

void apply(const ConfigMap& cfg, tracking::TrackerConfig& t) {
  t.w_win = cfg.get_double("w_win", t.w_win);
  t.w_sc = cfg.get_double("w_sc", t.w_sc);
  t.gamma = cfg.get_double("gamma", t.gamma);
  t.context = cfg.get_double("context", t.context);
  t.search_factor = cfg.get_double("search_factor", t.search_factor);
  t.cascade.stages = static_cast<int>(cfg.get_int("track.stages", t.cascade.stages));
  t.cascade.theta = cfg.get_double("track.theta", t.cascade.theta);
  t.cascade.fallback_k = static_cast<int>(cfg.get_int("track.fallback_k", t.cascade.fallback_k));
}

void apply(const ConfigMap& cfg, synth::SequenceSpec& s) {
  s.frames = static_cast<int>(cfg.get_int("seq.frames", s.frames));
  s.width = static_cast<int>(cfg.get_int("seq.width", s.width));
  s.height = static_cast<int>(cfg.get_int("seq.height", s.height));
  s.crossing_distractors = static_cast<int>(cfg.get_int("seq.crossing", s.crossing_distractors));
  s.static_distractors = static_cast<int>(cfg.get_int("seq.static", s.static_distractors));
}

// ---------------------------------------------------------------- sequences

std::vector<BBox> parse_boxes(const std::string& text, const std::string& source) {
  std::vector<BBox> boxes;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), '\t', ',');
    const auto fields = split(line, ',');
    double v[4];
    bool ok = fields.size() == 4;
    for (std::size_t i = 0; ok && i < 4; ++i) ok = parse_double(fields[i], v[i]) && std::isfinite(v[i]);
    if (!ok) {
      throw SequenceError(source + " line " + std::to_string(lineno) + ": expected four numbers x,y,w,h");
    }
    if (!(v[2] > 0 && v[3] > 0)) {
      throw SequenceError(source + " line " + std::to_string(lineno) + ": width and height must be positive");
    }
    boxes.push_back(BBox::from_corner(v[0], v[1], v[2], v[3]));
  }
  return boxes;
}

std::vector<BBox> read_boxes(const fs::path& path) { return parse_boxes(read_text(path), path.string()); }

void write_boxes(const std::vector<BBox>& boxes, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw SequenceError("cannot write " + path.string());
  char buf[128];
  for (const auto& b : boxes) {
    std::snprintf(buf, sizeof buf, "%.4f,%.4f,%.4f,%.4f\n", b.left(), b.top(), b.w, b.h);
    out << buf;
  }
  if (!out) throw SequenceError("write failed for " + path.string());
}

Sequence load_sequence(const fs::path& dir) {
  Sequence seq;
  seq.name = dir.filename().string();
  if (seq.name.empty()) seq.name = dir.parent_path().filename().string();
  const fs::path img = dir / "img";
  if (!fs::is_directory(img)) throw SequenceError("missing frame directory " + img.string());
  for (const auto& entry : fs::directory_iterator(img)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") seq.frames.push_back(entry.path());
  }
  std::sort(seq.frames.begin(), seq.frames.end());
  seq.groundtruth = read_boxes(dir / "groundtruth.txt");
  if (seq.frames.size() != seq.groundtruth.size()) {
    throw SequenceError(seq.name + ": " + std::to_string(seq.frames.size()) + " frames but " +
                        std::to_string(seq.groundtruth.size()) + " ground-truth boxes");
  }
  if (seq.frames.size() < 2) throw SequenceError(seq.name + ": a sequence needs at least two frames");
  return seq;
}

void write_sequence(const synth::SyntheticSequence& seq, const fs::path& dir) {
  fs::create_directories(dir / "img");
  char name[32];
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    std::snprintf(name, sizeof name, "%04zu.ppm", i + 1);
    imaging::write_ppm(seq.frames[i], dir / "img" / name);
  }
  write_boxes(seq.groundtruth, dir / "groundtruth.txt");
}

// ---------------------------------------------------------------- metrics

double success_threshold(int i) { return static_cast<double>(i) / (kSuccessBins - 1); }

SequenceReport evaluate_ope(const std::vector<BBox>& predicted, const std::vector<BBox>& gt, const std::string& name,
                            double fps) {
  if (predicted.size() != gt.size()) {
    throw EvalError(name + ": " + std::to_string(predicted.size()) + " predictions for " + std::to_string(gt.size()) +
                    " ground-truth frames");
  }
  if (gt.size() < 2) throw EvalError(name + ": need at least two frames");
  SequenceReport r;
  r.name = name;
  r.fps = fps;
  r.frames = gt.size() - 1;
  std::array<std::size_t, kSuccessBins> above{};
  std::size_t close = 0;
  double iou_sum = 0;
  for (std::size_t i = 1; i < gt.size(); ++i) {
    const double o = geometry::iou(predicted[i], gt[i]);
    iou_sum += o;
    for (int t = 0; t < kSuccessBins; ++t) {
      if (o > success_threshold(t)) ++above[static_cast<std::size_t>(t)];
    }
    if (std::hypot(predicted[i].cx - gt[i].cx, predicted[i].cy - gt[i].cy) <= kPrecisionRadius) ++close;
  }
  const double n = static_cast<double>(r.frames);
  r.precision = close / n;
  r.mean_iou = iou_sum / n;
  double auc = 0;
  for (int t = 0; t < kSuccessBins; ++t) {
    r.success[static_cast<std::size_t>(t)] = above[static_cast<std::size_t>(t)] / n;
    auc += r.success[static_cast<std::size_t>(t)];
  }
  r.auc = auc / kSuccessBins;
  return r;
}

EvalReport aggregate(std::vector<SequenceReport> sequences) {
  std::stable_sort(sequences.begin(), sequences.end(),
                   [](const SequenceReport& a, const SequenceReport& b) { return a.name < b.name; });
  EvalReport rep;
  rep.aggregate.name = "ALL";
  if (sequences.empty()) return rep;
  const double n = static_cast<double>(sequences.size());
  double seconds = 0;
  bool timed = true;
  for (const auto& s : sequences) {
    rep.aggregate.frames += s.frames;
    rep.aggregate.precision += s.precision / n;
    rep.aggregate.auc += s.auc / n;
    rep.aggregate.mean_iou += s.mean_iou / n;
    for (int t = 0; t < kSuccessBins; ++t) rep.aggregate.success[static_cast<std::size_t>(t)] += s.success[static_cast<std::size_t>(t)] / n;
    if (s.fps > 0) {
      seconds += s.frames / s.fps;
    } else {
      timed = false;
    }
  }
  rep.aggregate.fps = timed && seconds > 0 ? rep.aggregate.frames / seconds : 0;
  rep.sequences = std::move(sequences);
  return rep;
}

std::string format_report(const EvalReport& report) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-20s %7s %9s %7s %8s %8s\n", "sequence", "frames", "prec@20", "auc", "mean_iou",
                "fps");
  os << buf;
  auto line = [&](const SequenceReport& s) {
    std::snprintf(buf, sizeof buf, "%-20s %7zu %9.4f %7.4f %8.4f %8.2f\n", s.name.c_str(), s.frames, s.precision,
                  s.auc, s.mean_iou, s.fps);
    os << buf;
  };
  for (const auto& s : report.sequences) line(s);
  line(report.aggregate);
  return os.str();
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "sequence,frames,precision,auc,mean_iou,fps";
  char buf[32];
  for (int t = 0; t < kSuccessBins; ++t) {
    std::snprintf(buf, sizeof buf, ",succ_%.2f", success_threshold(t));
    os << buf;
  }
  os << "\n";
  auto line = [&](const SequenceReport& s) {
    os << s.name << "," << s.frames << "," << fmt_double(s.precision) << "," << fmt_double(s.auc) << ","
       << fmt_double(s.mean_iou) << "," << fmt_double(s.fps);
    for (double v : s.success) os << "," << fmt_double(v);
    os << "\n";
  };
  for (const auto& s : report.sequences) line(s);
  line(report.aggregate);
  return os.str();
}

// ---------------------------------------------------------------- tracking runs

double TrackRun::fps() const {
  return seconds > 0 && boxes.size() > 1 ? static_cast<double>(boxes.size() - 1) / seconds : 0;
}

namespace {

template <typename FrameAt>
TrackRun run_tracker(std::size_t count, const FrameAt& frame_at, const BBox& init_box,
                     const model::ModelParams<float>& params, const tracking::TrackerConfig& cfg) {
  using clock = std::chrono::steady_clock;
  TrackRun run;
  const imaging::Image first = frame_at(0);
  tracking::TrackState state = tracking::init(first, init_box, params, cfg);
  run.boxes.push_back(init_box);
  run.survivors.emplace_back();
  for (std::size_t i = 1; i < count; ++i) {
    const imaging::Image frame = frame_at(i);
    const auto t0 = clock::now();
    tracking::FrameResult fr = tracking::track_frame(state, frame, params);
    run.seconds += std::chrono::duration<double>(clock::now() - t0).count();
    run.boxes.push_back(fr.box);
    run.survivors.push_back(std::move(fr.diag.survivors));
  }
  return run;
}

}  // namespace

TrackRun track_frames(const std::vector<imaging::Image>& frames, const BBox& init_box,
                      const model::ModelParams<float>& params, const tracking::TrackerConfig& cfg) {
  if (frames.size() < 2) throw SequenceError("tracking needs at least two frames");
  return run_tracker(frames.size(), [&frames](std::size_t i) -> const imaging::Image& { return frames[i]; }, init_box,
                     params, cfg);
}

TrackRun track_sequence(const Sequence& seq, const model::ModelParams<float>& params,
                        const tracking::TrackerConfig& cfg) {
  return run_tracker(
      seq.frames.size(), [&seq](std::size_t i) { return imaging::read_ppm(seq.frames[i]); }, seq.groundtruth.at(0),
      params, cfg);
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[4] = {'C', 'R', 'P', 'N'};
const char* const kMetaName = "meta.config";

class Writer {
 public:
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  std::vector<std::uint8_t> bytes;

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t limit) : b_(b), limit_(limit) {}
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  float f32() {
    const auto bits = static_cast<std::uint32_t>(get(4));
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos_ + n > limit_) {
      throw CheckpointError(CheckpointFault::Truncated, "truncated checkpoint: needed " + std::to_string(n) +
                                                            " bytes at offset " + std::to_string(pos_));
    }
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(ckpt.version);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.name.size() > 0xFFFF) throw CheckpointError(CheckpointFault::Corrupt, "tensor name too long");
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    for (char c : t.name) w.u8(static_cast<std::uint8_t>(c));
    const Shape& s = t.value.shape();
    w.u8(static_cast<std::uint8_t>(s.rank()));
    for (int d = 0; d < s.rank(); ++d) w.u32(static_cast<std::uint32_t>(s[d]));
    for (float v : t.value.values()) w.f32(v);
  }
  w.u64(w.bytes.size());
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4) throw CheckpointError(CheckpointFault::Truncated, "truncated checkpoint: no magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError(CheckpointFault::BadMagic, "bad magic");
  if (bytes.size() < 8) throw CheckpointError(CheckpointFault::Truncated, "truncated checkpoint: no version");
  Reader r(bytes, bytes.size() >= 8 ? bytes.size() - 8 : 0);
  Checkpoint ckpt;
  Reader head(bytes, bytes.size());
  head.get(4);
  ckpt.version = static_cast<std::uint32_t>(head.get(4));
  if (ckpt.version != kCheckpointVersion) {
    throw CheckpointError(CheckpointFault::UnsupportedVersion,
                          "unsupported version " + std::to_string(ckpt.version) + " (expected " +
                              std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < 20) throw CheckpointError(CheckpointFault::Truncated, "truncated checkpoint: no trailer");
  r.get(8);
  const auto count = static_cast<std::uint32_t>(r.get(4));
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(static_cast<std::size_t>(r.get(2)));
    const int rank = static_cast<int>(r.get(1));
    if (rank < 1 || rank > Shape::kMaxRank) {
      throw CheckpointError(CheckpointFault::Corrupt, "tensor " + t.name + " has rank " + std::to_string(rank));
    }
    std::vector<int> dims;
    std::size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const auto v = static_cast<std::uint32_t>(r.get(4));
      if (v == 0 || v > (1u << 28)) throw CheckpointError(CheckpointFault::Corrupt, "tensor " + t.name + " has a bad extent");
      dims.push_back(static_cast<int>(v));
      numel *= v;
    }
    r.need(numel * 4);
    std::vector<float> data(numel);
    for (auto& v : data) v = r.f32();
    t.value = Tensor<float>(Shape(std::span<const int>(dims)), std::move(data));
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.pos() != bytes.size() - 8) {
    throw CheckpointError(CheckpointFault::Corrupt, "trailing bytes after the last tensor");
  }
  Reader tail(bytes, bytes.size());
  tail.str(bytes.size() - 8);
  const std::uint64_t recorded = tail.get(8);
  if (recorded != bytes.size() - 8) {
    throw CheckpointError(CheckpointFault::Truncated, "byte count mismatch: trailer says " + std::to_string(recorded) +
                                                          ", found " + std::to_string(bytes.size() - 8));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointFault::Io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointFault::Io, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointFault::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

std::string describe_model(const model::ModelConfig& m) {
  std::ostringstream os;
  os << "model.template_size = " << m.template_size << "\n"
     << "model.search_size = " << m.search_size << "\n"
     << "model.in_channels = " << m.in_channels << "\n"
     << "model.input_mean = " << fmt_double(m.input_mean) << "\n"
     << "model.input_std = " << fmt_double(m.input_std) << "\n"
     << "model.kernel = " << m.kernel << "\n"
     << "model.frozen_layers = " << m.frozen_layers << "\n"
     << "model.stages = " << m.stages << "\n"
     << "model.adjust_kernel = " << m.adjust_kernel << "\n"
     << "model.feature_transfer = " << (m.feature_transfer ? 1 : 0) << "\n"
     << "model.anchor_base = " << fmt_double(m.anchor_base) << "\n"
     << "model.reg_init_gain = " << fmt_double(m.reg_init_gain) << "\n";
  os << "model.ratios = ";
  for (std::size_t i = 0; i < m.ratios.size(); ++i) os << (i ? "," : "") << fmt_double(m.ratios[i]);
  os << "\nmodel.backbone = ";
  for (std::size_t i = 0; i < m.backbone.size(); ++i) {
    const auto& l = m.backbone[i];
    os << (i ? ";" : "") << l.out_channels << ":" << l.stride << ":" << (l.relu ? 1 : 0) << ":" << l.emit_level;
  }
  os << "\n";
  return os.str();
}

model::ModelConfig parse_model(const ConfigMap& cfg) {
  model::ModelConfig m = model::ModelConfig::reference();
  m.template_size = static_cast<int>(cfg.get_int("model.template_size", m.template_size));
  m.search_size = static_cast<int>(cfg.get_int("model.search_size", m.search_size));
  m.in_channels = static_cast<int>(cfg.get_int("model.in_channels", m.in_channels));
  m.input_mean = cfg.get_double("model.input_mean", m.input_mean);
  m.input_std = cfg.get_double("model.input_std", m.input_std);
  m.kernel = static_cast<int>(cfg.get_int("model.kernel", m.kernel));
  m.frozen_layers = static_cast<int>(cfg.get_int("model.frozen_layers", m.frozen_layers));
  m.stages = static_cast<int>(cfg.get_int("model.stages", m.stages));
  m.adjust_kernel = static_cast<int>(cfg.get_int("model.adjust_kernel", m.adjust_kernel));
  m.feature_transfer = cfg.get_bool("model.feature_transfer", m.feature_transfer);
  m.anchor_base = cfg.get_double("model.anchor_base", m.anchor_base);
  m.reg_init_gain = cfg.get_double("model.reg_init_gain", m.reg_init_gain);
  if (cfg.has("model.ratios")) {
    m.ratios.clear();
    for (const auto& f : split(cfg.get_string("model.ratios", ""), ',')) {
      double v = 0;
      if (!parse_double(f, v)) throw std::invalid_argument("model.ratios: '" + f + "' is not a number");
      m.ratios.push_back(v);
    }
  }
  if (cfg.has("model.backbone")) {
    m.backbone.clear();
    for (const auto& layer : split(cfg.get_string("model.backbone", ""), ';')) {
      const auto f = split(layer, ':');
      int v[4];
      bool ok = f.size() == 4;
      for (std::size_t i = 0; ok && i < 4; ++i) {
        auto [p, ec] = std::from_chars(f[i].data(), f[i].data() + f[i].size(), v[i]);
        ok = ec == std::errc() && p == f[i].data() + f[i].size();
      }
      if (!ok) throw std::invalid_argument("model.backbone: bad layer '" + layer + "'");
      m.backbone.push_back({v[0], v[1], v[2] != 0, v[3]});
    }
  }
  return m;
}

namespace {

std::string describe_train(const training::TrainConfig& t) {
  std::ostringstream os;
  os << "lambda = " << fmt_double(t.lambda) << "\n"
     << "tau_pos = " << fmt_double(t.tau_pos) << "\n"
     << "tau_neg = " << fmt_double(t.tau_neg) << "\n"
     << "theta = " << fmt_double(t.theta) << "\n"
     << "epochs = " << t.epochs << "\n"
     << "pairs_per_epoch = " << t.pairs_per_epoch << "\n"
     << "lr_start = " << fmt_double(t.lr_start) << "\n"
     << "lr_end = " << fmt_double(t.lr_end) << "\n"
     << "max_samples = " << t.max_samples << "\n"
     << "pos_cap = " << t.pos_cap << "\n"
     << "fallback_k = " << t.fallback_k << "\n"
     << "stages = " << t.stages << "\n"
     << "feature_transfer = " << (t.feature_transfer ? 1 : 0) << "\n"
     << "seed = " << t.seed << "\n";
  return os.str();
}

ConfigMap meta_of(const Checkpoint& ckpt) {
  for (const auto& t : ckpt.tensors) {
    if (t.name != kMetaName) continue;
    std::string text;
    text.reserve(t.value.size());
    for (float v : t.value.values()) {
      if (!(v >= 0 && v <= 255 && v == std::floor(v))) {
        throw CheckpointError(CheckpointFault::Corrupt, "meta.config holds a non-byte value");
      }
      text.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    }
    return ConfigMap::parse(text);
  }
  throw CheckpointError(CheckpointFault::Corrupt, "checkpoint has no meta.config tensor");
}

}  // namespace

Checkpoint make_checkpoint(const model::ModelParams<float>& params, const training::TrainConfig& train) {
  Checkpoint ckpt;
  const std::string meta = describe_model(params.config) + describe_train(train);
  std::vector<float> bytes;
  for (unsigned char c : meta) bytes.push_back(static_cast<float>(c));
  const Shape shape{static_cast<int>(bytes.size())};
  ckpt.tensors.push_back({kMetaName, Tensor<float>(shape, std::move(bytes))});
  params.for_each([&](const std::string& name, const ParamTensor<float>& p, bool) {
    ckpt.tensors.push_back({name, p.value});
  });
  return ckpt;
}

training::TrainConfig train_config_from(const Checkpoint& ckpt) {
  training::TrainConfig t;
  apply(meta_of(ckpt), t);
  return t;
}

model::ModelParams<float> params_from(const Checkpoint& ckpt) {
  const model::ModelConfig cfg = parse_model(meta_of(ckpt));
  model::ModelParams<float> params = model::ModelParams<float>::init(cfg, 0);
  std::map<std::string, const Tensor<float>*> stored;
  for (const auto& t : ckpt.tensors) {
    if (t.name == kMetaName) continue;
    if (!stored.emplace(t.name, &t.value).second) {
      throw CheckpointError(CheckpointFault::Corrupt, "duplicate tensor " + t.name);
    }
  }
  std::size_t matched = 0;
  params.for_each([&](const std::string& name, ParamTensor<float>& p, bool) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw CheckpointError(CheckpointFault::Corrupt, "checkpoint lacks tensor " + name);
    if (!(it->second->shape() == p.value.shape())) {
      throw CheckpointError(CheckpointFault::Corrupt, "tensor " + name + " has shape " + it->second->shape().str() +
                                                          ", model expects " + p.value.shape().str());
    }
    p.value = *it->second;
    ++matched;
  });
  if (matched != stored.size()) throw CheckpointError(CheckpointFault::Corrupt, "checkpoint has unknown tensors");
  return params;
}

// ---------------------------------------------------------------- overlays

imaging::Image overlay_frame(const imaging::Image& frame, const BBox& gt, const BBox& predicted,
                             const std::vector<std::size_t>& survivors) {
  imaging::Image out = frame;
  imaging::draw_box(out, gt, {0.1f, 0.9f, 0.2f}, 2);
  imaging::draw_box(out, predicted, {0.95f, 0.1f, 0.1f}, 2);
  if (!survivors.empty()) {
    std::string text;
    for (std::size_t i = 0; i < survivors.size(); ++i) {
      if (i) text += " ";
      text += (i + 1 < survivors.size() ? "A" + std::to_string(i + 1) : std::string("P")) + ":" +
              std::to_string(survivors[i]);
    }
    imaging::fill_rect(out, 0, 0, imaging::width(out), 10, {0, 0, 0});
    imaging::draw_text(out, 2, 2, text, {1, 1, 1});
  }
  return out;
}

void render_overlay(const Sequence& seq, const std::vector<BBox>& predicted, const fs::path& out_dir,
                    const std::vector<std::vector<std::size_t>>& survivors) {
  if (predicted.size() != seq.frames.size()) {
    throw SequenceError("overlay needs one prediction per frame (" + std::to_string(predicted.size()) + " for " +
                        std::to_string(seq.frames.size()) + ")");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw SequenceError("cannot create output directory " + out_dir.string());
  char name[32];
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const imaging::Image frame = imaging::read_ppm(seq.frames[i]);
    static const std::vector<std::size_t> kNone;
    const auto& surv = i < survivors.size() ? survivors[i] : kNone;
    std::snprintf(name, sizeof name, "%04zu.ppm", i + 1);
    imaging::write_ppm(overlay_frame(frame, seq.groundtruth[i], predicted[i], surv), out_dir / name);
  }
}

// ---------------------------------------------------------------- ablation

training::TrainConfig AblationVariant::train_config(const training::TrainConfig& base, std::uint64_t seed) const {
  training::TrainConfig t = base;
  t.stages = stages;
  t.feature_transfer = ftb;
  if (!naf) t.theta = 1.0;
  t.seed = seed;
  return t;
}

tracking::TrackerConfig AblationVariant::tracker_config(const tracking::TrackerConfig& base) const {
  tracking::TrackerConfig t = base;
  t.cascade.stages = stages;
  if (!naf) t.cascade.theta = 1.0;
  return t;
}

std::vector<AblationVariant> default_variants() {
  return {
      {"stages-1", 1, true, true},
      {"stages-2", 2, true, true},
      {"stages-3", 3, true, true},
      {"naf-off", 3, false, true},
      {"ftb-off", 3, true, false},
  };
}

fs::path variant_checkpoint(const fs::path& dir, const AblationVariant& v, std::uint64_t seed) {
  return dir / (v.name + "_seed" + std::to_string(seed) + ".ckpt");
}

const AblationRow& AblationTable::row(const std::string& variant) const {
  for (const auto& r : rows) {
    if (r.variant == variant) return r;
  }
  throw std::out_of_range("no ablation row for " + variant);
}

synth::SyntheticSequence eval_sequence(std::uint64_t eval_seed, int index, const synth::SequenceSpec& spec) {
  Rng rng(eval_seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(index) * 0xD1B54A32D192ED03ull + 17);
  synth::SyntheticSequence seq = synth::synth_sequence(rng, spec);
  char name[32];
  std::snprintf(name, sizeof name, "heldout_%04d", index);
  seq.name = name;
  return seq;
}

AblationTable ablate(const AblationConfig& cfg, const std::function<void(const std::string&)>& progress) {
  if (cfg.variants.empty() || cfg.seeds.empty() || cfg.sequences < 1) {
    throw std::invalid_argument("ablation needs at least one variant, seed and sequence");
  }
  struct Model {
    std::size_t variant;
    model::ModelParams<float> params;
    tracking::TrackerConfig tracker;
    std::vector<SequenceReport> reports;
  };
  std::vector<Model> models;
  for (std::size_t v = 0; v < cfg.variants.size(); ++v) {
    for (std::uint64_t seed : cfg.seeds) {
      const fs::path path = variant_checkpoint(cfg.checkpoint_dir, cfg.variants[v], seed);
      if (!fs::exists(path)) {
        throw SequenceError("missing checkpoint for variant " + cfg.variants[v].name + " seed " +
                            std::to_string(seed) + ": " + path.string());
      }
      models.push_back({v, params_from(load_checkpoint(path)), cfg.variants[v].tracker_config(cfg.tracker), {}});
    }
  }
  for (int i = 0; i < cfg.sequences; ++i) {
    const synth::SyntheticSequence seq = eval_sequence(cfg.eval_seed, i, cfg.spec);
    for (auto& m : models) {
      const TrackRun run = track_frames(seq.frames, seq.groundtruth.front(), m.params, m.tracker);
      m.reports.push_back(evaluate_ope(run.boxes, seq.groundtruth, seq.name, run.fps()));
    }
    if (progress) progress("sequence " + std::to_string(i + 1) + "/" + std::to_string(cfg.sequences));
  }
  AblationTable table;
  for (std::size_t v = 0; v < cfg.variants.size(); ++v) {
    const AblationVariant& var = cfg.variants[v];
    AblationRow row{var.name, var.stages, var.naf, var.ftb, {}, 0, 0, 0, 0};
    std::size_t frames = 0;
    double seconds = 0;
    for (auto& m : models) {
      if (m.variant != v) continue;
      const EvalReport rep = aggregate(m.reports);
      row.seed_mean_iou.push_back(rep.aggregate.mean_iou);
      row.mean_iou += rep.aggregate.mean_iou;
      row.precision += rep.aggregate.precision;
      row.auc += rep.aggregate.auc;
      for (const auto& s : rep.sequences) {
        frames += s.frames;
        if (s.fps > 0) seconds += s.frames / s.fps;
      }
    }
    const double n = static_cast<double>(row.seed_mean_iou.size());
    row.mean_iou /= n;
    row.precision /= n;
    row.auc /= n;
    row.fps = seconds > 0 ? frames / seconds : 0;
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string ablation_csv(const AblationTable& table) {
  std::ostringstream os;
  os << "variant,stages,naf,ftb,seeds,mean_iou,precision,auc,fps,seed_mean_iou\n";
  for (const auto& r : table.rows) {
    os << r.variant << "," << r.stages << "," << (r.naf ? 1 : 0) << "," << (r.ftb ? 1 : 0) << ","
       << r.seed_mean_iou.size() << "," << fmt_double(r.mean_iou) << "," << fmt_double(r.precision) << ","
       << fmt_double(r.auc) << "," << fmt_double(r.fps) << ",";
    for (std::size_t i = 0; i < r.seed_mean_iou.size(); ++i) os << (i ? ";" : "") << fmt_double(r.seed_mean_iou[i]);
    os << "\n";
  }
  return os.str();
}

}  // namespace crpn::harness
