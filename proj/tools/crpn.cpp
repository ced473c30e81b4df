// Command line front end: data generation, training, tracking, evaluation,
// gradient checks and the ablation runner.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "crpn/grad_suite.hpp"
#include "crpn/harness.hpp"
#include "crpn/simd/kernels.hpp"

namespace fs = std::filesystem;
using namespace crpn;

namespace {

struct Globals {
  std::uint64_t seed = 1;
  bool seed_set = false;
  std::string config;
  std::string out = "out";
};

harness::ConfigMap load_config(const Globals& g) {
  return g.config.empty() ? harness::ConfigMap{} : harness::ConfigMap::load(g.config);
}

// One file may carry training, tracking and sequence keys; only keys no
// section knows are reported.
void warn_unused(const harness::ConfigMap& cfg) {
  training::TrainConfig t;
  tracking::TrackerConfig k;
  synth::SequenceSpec s;
  harness::apply(cfg, t);
  harness::apply(cfg, k);
  harness::apply(cfg, s);
  for (const auto& key : cfg.unused()) std::cerr << "warning: unknown config key '" << key << "'\n";
}

fs::path out_dir(const Globals& g) {
  fs::create_directories(g.out);
  return g.out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!(out << text)) throw std::runtime_error("cannot write " + path.string());
}

training::TrainConfig train_config(const Globals& g, const harness::ConfigMap& cfg) {
  training::TrainConfig t;
  harness::apply(cfg, t);
  if (g.seed_set) t.seed = g.seed;
  t.validate();
  return t;
}

// Trains and saves; the log goes to `log_path` in full and to stdout every
// `print_every` steps.
harness::Checkpoint train_to(const training::TrainConfig& t, const fs::path& ckpt_path, const fs::path& log_path,
                             long print_every) {
  std::ofstream log(log_path);
  log << "step, epoch, lr, loss_total";
  for (int s = 1; s <= t.stages; ++s) log << ", loss_stage" << s;
  log << ", pos_count, neg_count\n";
  const auto start = std::chrono::steady_clock::now();
  auto result = training::train(t, [&](const training::StepStats& s) {
    const std::string line = training::format_log_line(s);
    log << line << '\n';
    if (print_every > 0 && s.step % print_every == 0) std::cout << line << std::endl;
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  auto ckpt = harness::make_checkpoint(result.params, t);
  harness::save_checkpoint(ckpt, ckpt_path);
  std::cout << "trained " << result.log.size() << " steps in " << secs << " s -> " << ckpt_path.string() << "\n";
  return ckpt;
}

tracking::TrackerConfig tracker_for(const harness::Checkpoint& ckpt, const harness::ConfigMap& cfg) {
  tracking::TrackerConfig tc;
  tc.cascade = harness::train_config_from(ckpt).cascade();
  harness::apply(cfg, tc);
  tc.validate();
  return tc;
}

int cmd_gen_data(const Globals& g, int count) {
  const auto cfg = load_config(g);
  synth::SequenceSpec spec;
  harness::apply(cfg, spec);
  warn_unused(cfg);
  const fs::path dir = out_dir(g);
  for (int i = 0; i < count; ++i) {
    auto seq = harness::eval_sequence(g.seed, i, spec);
    harness::write_sequence(seq, dir / seq.name);
  }
  std::cout << "wrote " << count << " sequences of " << spec.frames << " frames to " << dir.string() << "\n";
  return 0;
}

int cmd_train(const Globals& g, long print_every) {
  const auto cfg = load_config(g);
  const auto t = train_config(g, cfg);
  warn_unused(cfg);
  const fs::path dir = out_dir(g);
  train_to(t, dir / "model.ckpt", dir / "train.log", print_every);
  return 0;
}

int cmd_track(const Globals& g, const std::string& ckpt_path, const std::string& seq_dir, bool overlay) {
  const auto cfg = load_config(g);
  const auto ckpt = harness::load_checkpoint(ckpt_path);
  const auto tc = tracker_for(ckpt, cfg);
  warn_unused(cfg);
  const auto params = harness::params_from(ckpt);
  const auto seq = harness::load_sequence(seq_dir);
  const auto run = harness::track_sequence(seq, params, tc);
  const fs::path dir = out_dir(g);
  harness::write_boxes(run.boxes, dir / (seq.name + ".txt"));
  if (overlay) harness::render_overlay(seq, run.boxes, dir / (seq.name + "_overlay"), run.survivors);
  const auto report = harness::evaluate_ope(run.boxes, seq.groundtruth, seq.name, run.fps());
  std::printf("%s: %zu frames, %.1f fps, mean IoU %.3f, precision %.3f, AUC %.3f\n", seq.name.c_str(),
              run.boxes.size(), run.fps(), report.mean_iou, report.precision, report.auc);
  return 0;
}

int cmd_eval(const Globals& g, const std::string& results, const std::string& seq_dir) {
  const auto seq = harness::load_sequence(seq_dir);
  const auto report = harness::aggregate({harness::evaluate_ope(harness::read_boxes(results), seq.groundtruth,
                                                                seq.name)});
  std::cout << harness::format_report(report);
  write_text(out_dir(g) / (seq.name + "_report.csv"), harness::report_csv(report));
  return 0;
}

int cmd_grad_check(int seeds) {
  const auto start = std::chrono::steady_clock::now();
  bool all = true;
  run_grad_suite(seeds, [&](const SuiteCase& c) {
    all = all && c.passed();
    std::printf("%-4s %-32s worst %.3e  tol %.0e  %s\n", c.passed() ? "ok" : "FAIL", c.name.c_str(), c.worst,
                c.tolerance, c.detail.c_str());
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::printf("%s in %.1f s\n", all ? "all gradients match" : "gradient mismatch", secs);
  return all ? 0 : 1;
}

int cmd_ablate(const Globals& g, const std::vector<std::uint64_t>& seeds, int sequences, bool train_missing,
               long print_every) {
  const auto cfg = load_config(g);
  training::TrainConfig base;
  harness::apply(cfg, base);
  harness::AblationConfig ac;
  harness::apply(cfg, ac.spec);
  harness::apply(cfg, ac.tracker);
  warn_unused(cfg);
  const fs::path dir = out_dir(g);
  ac.checkpoint_dir = dir / "checkpoints";
  ac.seeds = seeds;
  ac.sequences = sequences;
  ac.eval_seed = g.seed_set ? g.seed : ac.eval_seed;
  fs::create_directories(ac.checkpoint_dir);
  if (train_missing) {
    for (const auto& v : ac.variants) {
      for (auto seed : ac.seeds) {
        const fs::path path = harness::variant_checkpoint(ac.checkpoint_dir, v, seed);
        if (fs::exists(path)) continue;
        std::cout << "training " << path.filename().string() << "\n";
        train_to(v.train_config(base, seed), path, fs::path(path).replace_extension(".log"), print_every);
      }
    }
  }
  const auto table = harness::ablate(ac, [](const std::string& msg) { std::cout << msg << std::endl; });
  const std::string csv = harness::ablation_csv(table);
  write_text(dir / "ablation.csv", csv);
  std::cout << csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Siamese cascaded region proposal tracker"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "seed for training and data generation")
      ->each([&](const std::string&) { g.seed_set = true; });
  app.add_option("--config", g.config, "key=value configuration file")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "output directory")->capture_default_str();
  bool show_kernels = false;
  app.add_flag("--kernels", show_kernels, "print the selected SIMD kernel level");

  int count = 10;
  auto* gen = app.add_subcommand("gen-data", "write synthetic sequences to disk");
  gen->add_option("--count", count, "number of sequences")->capture_default_str()->check(CLI::PositiveNumber);

  long print_every = 100;
  auto* train = app.add_subcommand("train", "train a model and save <out>/model.ckpt");
  train->add_option("--print-every", print_every, "log interval on stdout (0 for silent)")->capture_default_str();

  std::string ckpt, seq_dir, results;
  bool overlay = false;
  auto* track = app.add_subcommand("track", "track one sequence and write <out>/<name>.txt");
  track->add_option("checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  track->add_option("sequence", seq_dir)->required()->check(CLI::ExistingDirectory);
  track->add_flag("--overlay", overlay, "render annotated frames");

  auto* eval = app.add_subcommand("eval", "score a results file against a sequence");
  eval->add_option("results", results)->required()->check(CLI::ExistingFile);
  eval->add_option("sequence", seq_dir)->required()->check(CLI::ExistingDirectory);

  int grad_seeds = 5;
  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every gradient");
  grad->add_option("--seeds", grad_seeds)->capture_default_str()->check(CLI::PositiveNumber);

  std::vector<std::uint64_t> seeds{1, 2, 3};
  int sequences = 200;
  bool train_missing = false;
  auto* abl = app.add_subcommand("ablate", "compare stage count, NAF and FTB variants");
  abl->add_option("--train-seeds", seeds, "training seeds per variant")->capture_default_str();
  abl->add_option("--sequences", sequences, "held-out sequences")->capture_default_str()->check(CLI::PositiveNumber);
  abl->add_flag("--train", train_missing, "train variants whose checkpoint is missing");
  abl->add_option("--print-every", print_every, "training log interval on stdout")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  if (show_kernels) std::cerr << "kernels: " << simd::level_name(simd::active_level()) << "\n";

  try {
    if (*gen) return cmd_gen_data(g, count);
    if (*train) return cmd_train(g, print_every);
    if (*track) return cmd_track(g, ckpt, seq_dir, overlay);
    if (*eval) return cmd_eval(g, results, seq_dir);
    if (*grad) return cmd_grad_check(grad_seeds);
    if (*abl) return cmd_ablate(g, seeds, sequences, train_missing, print_every);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
