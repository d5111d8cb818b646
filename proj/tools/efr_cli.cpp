// efr_cli: pretraining, adaptation, evaluation, gradient checks and the
// rotation-recovery demo on synthetic 2D data.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>

#include "efr/efr.hpp"
#include "efr/gradcheck_suites.hpp"
#include "efr/io.hpp"

#ifndef EFR_BUILD_ID
#define EFR_BUILD_ID "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitGate = 2;
constexpr const char* kOutputEnv = "EFR_OUTPUT_DIR";
constexpr efr::Index kHeldOutSamples = 5000;

/// Reported for argument, config and input-file problems (exit 1).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

fs::path default_output_dir() {
  if (const char* env = std::getenv(kOutputEnv); env && *env) return env;
  return "efr_out";
}

class Manifest {
 public:
  Manifest(std::string command, fs::path dir, std::uint64_t seed, json config)
      : dir_(std::move(dir)) {
    doc_["command"] = std::move(command);
    doc_["seed"] = seed;
    doc_["build"] = EFR_BUILD_ID;
    doc_["output_dir"] = fs::absolute(dir_).string();
    doc_["config"] = std::move(config);
    doc_["started_at"] = utc_now();
    doc_["finished_at"] = nullptr;
    doc_["status"] = "running";
    write();
  }

  void finish(const std::string& status) {
    doc_["finished_at"] = utc_now();
    doc_["status"] = status;
    write();
  }

 private:
  void write() const { efr::write_file_atomic(dir_ / "manifest.json", doc_.dump(2) + "\n"); }
  fs::path dir_;
  json doc_;
};

json config_json(const efr::LossConfig& cfg) {
  json j;
  for (const auto& [k, v] : efr::config_snapshot(cfg)) j[k] = v;
  return j;
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir.string());
}

efr::Preset require_preset(const std::string& name) {
  if (auto p = efr::find_preset(name)) return *p;
  throw UsageError("unknown preset '" + name + "'; available presets: " + efr::preset_names());
}

/// Config file first, then explicit flags.
efr::LossConfig resolve_config(const std::string& config_path, const std::optional<std::uint64_t>& seed,
                               const std::optional<std::string>& preset, const std::optional<int>& iterations) {
  efr::LossConfig cfg;
  if (!config_path.empty()) {
    if (!fs::exists(config_path)) throw UsageError("config file not found: " + config_path);
    cfg = efr::load_config(config_path);
  }
  if (seed) cfg.seed = *seed;
  if (preset) cfg.preset = *preset;
  if (iterations) cfg.iterations = *iterations;
  require_preset(cfg.preset);
  cfg.validate();
  return cfg;
}

/// Held-out reference drawn from a stream no training draw uses.
efr::Matrix held_out(const efr::Preset& preset, std::uint64_t seed) {
  efr::Rng rng(seed, 0x484f4c44ULL);
  return preset.sample(kHeldOutSamples, rng);
}

struct PretrainArgs {
  std::optional<std::string> preset;
  std::string config;
  std::optional<std::uint64_t> seed;
  fs::path out;
  int max_steps = efr::PretrainConfig{}.max_steps;
};

int cmd_pretrain(const PretrainArgs& a) {
  const efr::LossConfig cfg = resolve_config(a.config, a.seed, a.preset ? a.preset : std::optional<std::string>("gauss2d-ring"), std::nullopt);
  const efr::Preset preset = require_preset(cfg.preset);
  prepare_dir(a.out);
  json snapshot = config_json(cfg);
  snapshot["max_steps"] = a.max_steps;
  Manifest manifest("pretrain", a.out, cfg.seed, snapshot);

  efr::PretrainConfig pc;
  pc.seed = cfg.seed;
  pc.max_steps = a.max_steps;
  pc.min_steps = std::min(pc.min_steps, a.max_steps);
  const efr::PretrainResult r = efr::run_pretrain(preset, pc);
  efr::save_checkpoint(a.out / "checkpoint.efr", r.checkpoint);
  efr::write_file_atomic(a.out / "metrics.csv", efr::metrics_csv(r.log));

  std::cout << "preset " << preset.name << ": frechet distance " << efr::format_g17(r.frechet) << " after "
            << r.checkpoint.step << " steps (gate " << preset.quality_gate << ")\n";
  if (!r.gate_met) {
    std::cerr << "warning: quality gate missed; checkpoint written anyway\n";
    manifest.finish("gate_missed");
    return kExitGate;
  }
  manifest.finish("ok");
  return kExitOk;
}

struct AdaptArgs {
  fs::path source;
  fs::path shots;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> iterations;
  std::optional<std::string> preset;
  fs::path out;
};

int cmd_adapt(const AdaptArgs& a) {
  const efr::LossConfig cfg = resolve_config(a.config, a.seed, a.preset, a.iterations);
  if (!fs::exists(a.source)) throw UsageError("source checkpoint not found: " + a.source.string());
  if (!fs::exists(a.shots)) throw UsageError("shots file not found: " + a.shots.string());
  efr::TrainState source;
  efr::Matrix shots;
  try {
    source = efr::load_checkpoint(a.source);
    shots = efr::load_csv_matrix(a.shots);
  } catch (const efr::FormatError& e) {
    throw UsageError(e.what());
  }
  prepare_dir(a.out);
  json snapshot = config_json(cfg);
  snapshot["source_checkpoint"] = fs::absolute(a.source).string();
  snapshot["shots_file"] = fs::absolute(a.shots).string();
  Manifest manifest("adapt", a.out, cfg.seed, snapshot);

  const efr::AdaptationResult r = efr::run_adaptation(source, shots, cfg);
  efr::save_checkpoint(a.out / "checkpoint.efr", r.final_state);
  efr::write_file_atomic(a.out / "metrics.csv", efr::metrics_csv(r.log));

  const efr::Preset preset = require_preset(cfg.preset);
  const efr::Matrix reference = held_out(preset, cfg.seed);
  efr::EvalConfig ec;
  ec.seed = cfg.seed;
  efr::Rng gen_rng(cfg.seed, 0x46474400ULL);
  json summary;
  summary["iterations"] = cfg.iterations;
  if (!r.log.empty()) {
    const auto& last = r.log.back();
    summary["final_loss_g"] = last.loss_g;
    summary["final_loss_d"] = last.loss_d;
    summary["final_loss_ins"] = last.loss_ins;
    summary["final_loss_dis"] = last.loss_dis;
  } else {
    for (const char* k : {"final_loss_g", "final_loss_d", "final_loss_ins", "final_loss_dis"}) summary[k] = nullptr;
  }
  summary["eval_sliced_gw"] = efr::eval_sliced_gw(r.final_state.gen, reference, ec);
  summary["frechet_gaussian_distance"] =
      efr::frechet_gaussian_distance(efr::generate(r.final_state.gen, kHeldOutSamples, gen_rng), reference);
  summary["held_out_preset"] = preset.name;
  summary["held_out_samples"] = kHeldOutSamples;
  efr::write_file_atomic(a.out / "summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  manifest.finish("ok");
  return kExitOk;
}

struct EvaluateArgs {
  fs::path checkpoint;
  std::string preset = "rotated-mixture";
  std::uint64_t seed = 0;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const efr::Preset preset = require_preset(a.preset);
  efr::TrainState state;
  try {
    state = efr::load_checkpoint(a.checkpoint);
  } catch (const efr::FormatError& e) {
    throw UsageError(e.what());
  }
  const efr::Matrix reference = held_out(preset, a.seed);
  efr::EvalConfig ec;
  ec.seed = a.seed;
  efr::Rng gen_rng(a.seed, 0x46474400ULL);
  json out;
  out["preset"] = preset.name;
  out["eval_sliced_gw"] = efr::eval_sliced_gw(state.gen, reference, ec);
  out["frechet_gaussian_distance"] =
      efr::frechet_gaussian_distance(efr::generate(state.gen, kHeldOutSamples, gen_rng), reference);
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

struct MakeShotsArgs {
  std::string preset = "rotated-mixture";
  int n = 10;
  std::uint64_t seed = 0;
  fs::path out;
};

int cmd_make_shots(const MakeShotsArgs& a) {
  const efr::Preset preset = require_preset(a.preset);
  efr::Rng rng(a.seed, 0x53484f54ULL);
  if (a.out.has_parent_path()) prepare_dir(a.out.parent_path());
  efr::write_file_atomic(a.out, efr::csv_matrix(preset.sample(a.n, rng)));
  std::cout << "wrote " << a.n << " samples of " << preset.name << " to " << a.out.string() << "\n";
  return kExitOk;
}

struct GradcheckArgs {
  std::string target = "all";
  std::uint64_t seed = 0;
  double rtol = efr::gradcheck::kDefaultRtol;
  int instances = 100;
  bool flip_sign = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  efr::gradcheck::SuiteOptions o;
  o.seed = a.seed;
  o.rtol = a.rtol;
  o.instances = a.instances;
  o.flip_sign = a.flip_sign;
  const auto reports = efr::gradcheck::run_suites(a.target, o);
  std::cout << std::left << std::setw(10) << "target" << std::setw(11) << "instances" << std::setw(10) << "failures"
            << std::setw(26) << "max_relative_error" << "result\n";
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << std::setw(10) << r.target << std::setw(11) << r.instances << std::setw(10) << r.failures
              << std::setw(26) << efr::format_g17(r.max_relative_error) << (r.passed() ? "PASS" : "FAIL") << "\n";
    ok = ok && r.passed();
  }
  std::cout << "step " << o.step << ", rtol " << o.rtol << (a.flip_sign ? ", analytic signs flipped" : "") << "\n";
  return ok ? kExitOk : kExitUsage;
}

struct DemoArgs {
  int dim = 2;
  double angle_deg = 45.0;
  int n = 64;
  int restarts = 4;
  int steps = 2000;
  bool random_rotation = false;
  std::uint64_t seed = 0;
  fs::path out;
};

int cmd_demo_rotation(const DemoArgs& a) {
  if (a.dim < 2) throw UsageError("--dim must be >= 2");
  if (a.n < 2) throw UsageError("--n must be >= 2");
  prepare_dir(a.out);
  json snapshot{{"dim", a.dim},         {"angle_deg", a.angle_deg}, {"n", a.n},
                {"restarts", a.restarts}, {"steps", a.steps},       {"random_rotation", a.random_rotation}};
  Manifest manifest("demo-rotation", a.out, a.seed, snapshot);

  efr::Rng rng(a.seed, 0x44454d4fULL);
  efr::Rng feature_rng = rng.split(1);
  const efr::FeatureBatch src(efr::standard_normal(a.n, a.dim, feature_rng));
  efr::RotationMatrix planted = efr::plane_rotation(a.dim, 0, 1, a.angle_deg * std::numbers::pi / 180.0);
  if (a.random_rotation) {
    efr::Rng q_rng = rng.split(2);
    planted = efr::rotation_from_param(efr::SkewParamMatrix(efr::standard_normal(a.dim, a.dim, q_rng)));
  }
  efr::RecoveryConfig rc;
  rc.restarts = a.restarts;
  rc.steps = a.steps;
  rc.seed = a.seed;
  const efr::RecoveryResult r = efr::rotation_recovery_eval(src, planted, rc);

  std::string csv = "restart,step,loss\n";
  for (std::size_t k = 0; k < r.loss_curves.size(); ++k)
    for (std::size_t s = 0; s < r.loss_curves[k].size(); ++s)
      csv += std::to_string(k) + "," + std::to_string(s) + "," + efr::format_g17(r.loss_curves[k][s]) + "\n";
  efr::write_file_atomic(a.out / "recovery_loss.csv", csv);

  for (std::size_t k = 0; k < r.restart_errors.size(); ++k)
    std::cout << "restart " << k << ": final loss " << efr::format_g17(r.final_losses[k]) << ", error "
              << efr::format_g17(r.restart_errors[k]) << "\n";
  std::cout << "selected restart " << r.best_restart << " (lowest final loss)\n";
  std::cout << "||R Q - I||_F = " << efr::format_g17(r.error) << "\n";
  manifest.finish("ok");
  return kExitOk;
}

std::string help_footer() {
  const efr::LossConfig d;
  std::ostringstream os;
  os << "\nPresets:\n";
  for (const auto& p : efr::presets()) os << "  " << std::left << std::setw(18) << p.name << p.description << "\n";
  os << "\nDefaults (config keys, override with --config FILE of `key = value` lines):\n";
  for (const auto& [k, v] : efr::config_snapshot(d)) os << "  " << std::setw(20) << k << v << "\n";
  os << "\nThe adaptation defaults follow the reference setup: lambda1 = 0.6, lambda2 = 0.4,\n"
        "lr = 0.002, beta1 = 0, beta2 = 0.99, batch 8, 1000 iterations, 10 shots.\n"
     << "\nEnvironment:\n  " << kOutputEnv
     << "  default for --out when the flag is absent (otherwise ./efr_out)\n"
     << "\nExit codes: 0 success, 1 usage/config/input error or failed check, 2 quality gate missed.\n";
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot generator adaptation with a learned feature rotation (toy scale)"};
  app.footer(help_footer());
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string("efr_cli ") + EFR_BUILD_ID);

  auto add_out = [](CLI::App* sub, fs::path& target) {
    target = default_output_dir();
    sub->add_option("--out", target, "Output directory (default: $" + std::string(kOutputEnv) + " or ./efr_out)");
  };

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Train the source generator on abundant samples of a preset");
  p->add_option("--preset", pre.preset, "Source preset (default gauss2d-ring)");
  p->add_option("--config", pre.config, "Config file");
  p->add_option("--seed", pre.seed, "Run seed");
  p->add_option("--max-steps", pre.max_steps, "Step limit")->capture_default_str()->check(CLI::PositiveNumber);
  add_out(p, pre.out);

  AdaptArgs ad;
  auto* d = app.add_subcommand("adapt", "Adapt a source checkpoint to a few target shots");
  d->add_option("--source-checkpoint", ad.source, "Checkpoint written by pretrain")->required();
  d->add_option("--shots-file", ad.shots, "CSV of target samples, one per row, no header")->required();
  d->add_option("--config", ad.config, "Config file");
  d->add_option("--seed", ad.seed, "Run seed");
  d->add_option("--iterations", ad.iterations, "Override the iteration count");
  d->add_option("--preset", ad.preset, "Target preset used for the held-out evaluation");
  add_out(d, ad.out);

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "Score a checkpoint's generator against a preset");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint to score")->required();
  e->add_option("--preset", ev.preset, "Reference preset")->capture_default_str();
  e->add_option("--seed", ev.seed, "Evaluation seed")->capture_default_str();

  MakeShotsArgs ms;
  auto* m = app.add_subcommand("make-shots", "Write a few-shot target set as CSV");
  m->add_option("--preset", ms.preset, "Target preset")->capture_default_str();
  m->add_option("--n", ms.n, "Number of shots")->capture_default_str()->check(CLI::PositiveNumber);
  m->add_option("--seed", ms.seed, "Seed")->capture_default_str();
  m->add_option("--out", ms.out, "Output CSV path")->required();

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "Compare analytic gradients with central differences");
  g->add_option("--target", gc.target, "ins, dis, gan, rotation or all")
      ->capture_default_str()
      ->check(CLI::IsMember({"ins", "dis", "gan", "rotation", "all"}));
  g->add_option("--seed", gc.seed, "Seed")->capture_default_str();
  g->add_option("--rtol", gc.rtol, "Relative tolerance")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_option("--instances", gc.instances, "Random instances per target")->capture_default_str()->check(CLI::PositiveNumber);
  g->add_flag("--inject-sign-flip", gc.flip_sign, "Negate the analytic gradients (the run must then fail)");

  DemoArgs dm;
  auto* r = app.add_subcommand("demo-rotation", "Recover a planted rotation by minimizing the alignment loss");
  r->add_option("--dim", dm.dim, "Feature dimension")->capture_default_str();
  r->add_option("--angle-deg", dm.angle_deg, "Planted angle in the first coordinate plane")->capture_default_str();
  r->add_flag("--random-rotation", dm.random_rotation, "Plant a random rotation instead of a plane rotation");
  r->add_option("--n", dm.n, "Number of features")->capture_default_str();
  r->add_option("--restarts", dm.restarts, "Optimization restarts")->capture_default_str()->check(CLI::PositiveNumber);
  r->add_option("--steps", dm.steps, "Steps per restart")->capture_default_str()->check(CLI::NonNegativeNumber);
  r->add_option("--seed", dm.seed, "Seed")->capture_default_str();
  add_out(r, dm.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*p) return cmd_pretrain(pre);
    if (*d) return cmd_adapt(ad);
    if (*e) return cmd_evaluate(ev);
    if (*m) return cmd_make_shots(ms);
    if (*g) return cmd_gradcheck(gc);
    if (*r) return cmd_demo_rotation(dm);
  } catch (const efr::ConfigError& err) {
    std::cerr << "config error: " << err.what() << " (key: " << err.key() << ")\n";
    return kExitUsage;
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const efr::FormatError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const efr::NonFiniteLossError& err) {
    std::cerr << "training aborted: " << err.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
