// milforge command-line interface.
//
//   milforge train  --data bags.milcsv --model dsmil --out run/
//   milforge cv     --data bags.milcsv --model dsmil --folds 10 --runs 5 --out cv/
//   milforge synth  --pos-bags 50 --neg-bags 50 --ratio 0.1 --out bags.milcsv
//   milforge export-attention --model-file run/model.json --data bags.milcsv --out attention.csv
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "cli_io.hpp"
#include "milforge/milforge.hpp"

namespace fs = std::filesystem;
using namespace milforge;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CommonFlags {
  std::string data;
  std::string model = "dsmil";
  std::optional<std::uint64_t> seed;
  int epochs = 40;
  double lr = 1e-4;
  std::string out;
  bool no_standardize = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--data", f.data, "MILCSV input")->required();
  cmd->add_option("--model", f.model, "aggregator: mean, max, abmil or dsmil")
      ->check(CLI::IsMember({"mean", "max", "abmil", "dsmil"}));
  cmd->add_option("--seed", f.seed, "master seed (falls back to $MILFORGE_SEED, then 0)");
  cmd->add_option("--epochs", f.epochs, "training epochs")->check(CLI::PositiveNumber);
  cmd->add_option("--lr", f.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  cmd->add_flag("--no-standardize", f.no_standardize, "use raw features instead of training-set z-scores");
}

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("MILFORGE_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("MILFORGE_SEED is not an unsigned integer: ") + env);
  }
  return 0;
}

TrainConfig train_config(const CommonFlags& f) {
  TrainConfig cfg;
  cfg.seed = resolve_seed(f.seed);
  cfg.epochs = f.epochs;
  cfg.learning_rate = f.lr;
  cfg.standardize = !f.no_standardize;
  return cfg;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int run_train(const CommonFlags& f) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig cfg = train_config(f);
  const ModelKind kind = *parse_model_kind(f.model);
  const MilDataset ds = load_dataset(f.data);
  const FitResult fitted = fit(ds, cfg, kind);

  fs::create_directories(f.out);
  cli::save_model(fitted.model, fs::path(f.out) / "model.json");

  auto report = cli::report_envelope("train");
  report["config"] = cli::config_json(cfg, kind);
  report["dataset"] = cli::dataset_json(ds, f.data);
  report["train_metrics"] = cli::metrics_json(evaluate(fitted.model, ds));
  report["epoch_loss"] = fitted.epoch_loss;
  report["wall_clock_seconds"] = seconds_since(t0);
  cli::write_json(report, fs::path(f.out) / "report.json");
  std::cout << "trained " << f.model << " on " << ds.bags.size() << " bags; final loss "
            << fitted.epoch_loss.back() << "\n";
  return 0;
}

int run_cv(const CommonFlags& f, const CvConfig& cv_in) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig cfg = train_config(f);
  CvConfig cv = cv_in;
  cv.seed = cfg.seed;
  const ModelKind kind = *parse_model_kind(f.model);
  const MilDataset ds = load_dataset(f.data);
  const CvReport r = cross_validate(ds, cfg, kind, cv);

  auto report = cli::report_envelope("cv");
  report["config"] = cli::config_json(cfg, kind);
  report["config"]["jobs"] = cv.jobs;
  report["dataset"] = cli::dataset_json(ds, f.data);
  report["cv"] = cli::cv_json(r, cv);
  report["wall_clock_seconds"] = seconds_since(t0);
  fs::create_directories(f.out);
  cli::write_json(report, fs::path(f.out) / "report.json");
  std::printf("%s %s: accuracy %.3f +- %.3f, auc %.3f (%zu runs x %zu folds)\n", ds.name.c_str(), f.model.c_str(),
              r.mean_accuracy, r.std_accuracy, r.mean_auc, cv.runs, cv.folds);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"milforge: dual-stream multiple instance learning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  CommonFlags train_flags;
  auto* train = app.add_subcommand("train", "train one aggregator; writes model.json and report.json");
  add_common(train, train_flags);
  train->add_option("--out", train_flags.out, "output directory")->required();

  CommonFlags cv_flags;
  CvConfig cv;
  auto* cvcmd = app.add_subcommand("cv", "repeated stratified k-fold cross-validation; writes report.json");
  add_common(cvcmd, cv_flags);
  cvcmd->add_option("--folds", cv.folds, "folds per run")->check(CLI::Range(2, 1000000));
  cvcmd->add_option("--runs", cv.runs, "independent runs")->check(CLI::Range(1, 1000000));
  cvcmd->add_option("--jobs", cv.jobs, "worker threads")->check(CLI::Range(1, 1024));
  bool unstratified = false;
  cvcmd->add_flag("--unstratified", unstratified, "draw folds without class stratification");
  cvcmd->add_option("--out", cv_flags.out, "output directory")->required();

  SyntheticSpec spec;
  std::optional<std::uint64_t> synth_seed;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "generate synthetic unbalanced bags as MILCSV");
  synth->add_option("--pos-bags", spec.num_pos_bags, "positive bags");
  synth->add_option("--neg-bags", spec.num_neg_bags, "negative bags");
  synth->add_option("--ratio", spec.positive_ratio, "positive-instance fraction in positive bags")
      ->check(CLI::Range(0.0, 1.0));
  synth->add_option("--instances", spec.instances_per_bag, "instances per bag");
  synth->add_option("--dim", spec.feature_dim, "feature dimension");
  synth->add_option("--separation", spec.class_separation, "distance between class means along axis 0");
  synth->add_option("--noise", spec.noise_sigma, "isotropic noise sigma");
  synth->add_option("--seed", synth_seed, "seed (falls back to $MILFORGE_SEED, then 0)");
  synth->add_option("--out", synth_out, "output MILCSV path")->required();

  std::string model_file, export_data, export_out;
  auto* exp = app.add_subcommand("export-attention", "write per-instance attention of a trained model as CSV");
  exp->add_option("--model-file", model_file, "model.json from `train`")->required();
  exp->add_option("--data", export_data, "MILCSV input")->required();
  exp->add_option("--out", export_out, "output CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (train->parsed()) return run_train(train_flags);
    if (cvcmd->parsed()) {
      cv.stratified = !unstratified;
      return run_cv(cv_flags, cv);
    }
    if (synth->parsed()) {
      spec.seed = resolve_seed(synth_seed);
      const MilDataset ds = generate_synthetic(spec);
      save_dataset(ds, synth_out);
      std::cout << "wrote " << ds.bags.size() << " bags to " << synth_out << "\n";
      return 0;
    }
    if (exp->parsed()) {
      const Model model = cli::load_model(model_file);
      const MilDataset ds = load_dataset(export_data);
      std::ofstream out(export_out, std::ios::binary);
      if (!out) throw Error("cannot write " + export_out);
      cli::write_attention_csv(out, model, ds);
      return 0;
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
