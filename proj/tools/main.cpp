#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ordalign/config.hpp"
#include "ordalign/gradcheck.hpp"
#include "ordalign/heatmap.hpp"
#include "ordalign/losses.hpp"
#include "ordalign/metrics.hpp"
#include "ordalign/model.hpp"
#include "ordalign/synth.hpp"
#include "ordalign/train.hpp"

namespace {

namespace fs = std::filesystem;
using namespace ordalign;

struct AblationCli {
  bool stp = false, no_align = false, no_mv = false, no_poe = false, no_ml = false;

  void attach(CLI::App* cmd) {
    cmd->add_flag("--stp", stp, "single-time-point baseline (prior branch zeroed)");
    cmd->add_flag("--disable-align", no_align, "pin the deformation field to zero");
    cmd->add_flag("--disable-mv", no_mv, "drop the mean-variance term");
    cmd->add_flag("--disable-poe", no_poe, "drop the ordinal embedding term");
    cmd->add_flag("--disable-ml", no_ml, "drop the per-time-point heads");
  }
  AblationFlags flags() const {
    AblationFlags a;
    a.stp_mode = stp;
    a.disable_align = no_align;
    a.disable_mv = no_mv;
    a.disable_poe = no_poe;
    a.disable_ml = no_ml;
    return a;
  }
  bool any_set() const { return stp || no_align || no_mv || no_poe || no_ml; }
};

int cmd_generate(const std::string& out_dir, const std::string& config_path,
                 std::uint64_t seed, const GenConfig& overrides, bool have_cfg_file) {
  GenConfig cfg = overrides;
  if (have_cfg_file) {
    FileConfig fc = load_config_file(config_path);
    cfg = fc.gen;
  }
  cfg.validate();
  auto pairs = generate_cohort(cfg, seed);
  split_cohort(pairs, cfg.split_ratios, seed);
  write_dataset(out_dir, pairs, cfg);
  std::size_t events = 0, train_n = 0, val_n = 0, test_n = 0, lesions = 0;
  for (const auto& p : pairs) {
    if (p.label_current.event) ++events;
    if (p.lesion_area > 0.0) ++lesions;
    if (p.split == "train") ++train_n;
    else if (p.split == "val") ++val_n;
    else ++test_n;
  }
  std::printf("wrote %zu pairs to %s (train %zu / val %zu / test %zu, %zu events, %zu with lesions)\n",
              pairs.size(), out_dir.c_str(), train_n, val_n, test_n, events, lesions);
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir, TrainConfig cfg) {
  Dataset data = load_dataset(data_dir);
  cfg.model.in_h = data.cfg.height;
  cfg.model.in_w = data.cfg.width;
  cfg.model.horizon = data.cfg.horizon;
  TrainResult res = train(cfg, data, out_dir);
  std::printf("trained %d epochs; best epoch %d with validation C %.6f\n",
              static_cast<int>(res.epochs.size()), res.best_epoch, res.best_val_c);
  std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
  return 0;
}

int cmd_eval(const std::string& data_dir, const std::string& ckpt, const std::string& split,
             int bootstrap_iters, std::uint64_t seed, const std::string& csv_path,
             const std::string& json_path, const AblationFlags& ablations) {
  Dataset data = load_dataset(data_dir);
  MetricReport rep = evaluate(ckpt, data, split, bootstrap_iters, seed, ablations);
  const std::string csv = metric_report_csv(rep);
  if (csv_path.empty()) {
    std::fputs(csv.c_str(), stdout);
  } else {
    std::ofstream os(csv_path);
    if (!os) throw IoError("eval: cannot write " + csv_path);
    os << csv;
  }
  if (!json_path.empty()) {
    std::ofstream os(json_path);
    if (!os) throw IoError("eval: cannot write " + json_path);
    os << metric_report_json(rep);
  }
  return 0;
}

int cmd_heatmap(const std::string& data_dir, const std::string& ckpt, const std::string& out_dir,
                int patient, const AblationFlags& ablations) {
  Dataset data = load_dataset(data_dir);
  RiskModelT<float> model = load_model(ckpt);
  const ExamPair* chosen = nullptr;
  if (patient >= 0) {
    for (const auto& p : data.pairs)
      if (p.patient_id == patient) chosen = &p;
    if (!chosen) throw UsageError("heatmap: no pair for patient " + std::to_string(patient));
  } else {
    for (const auto& p : data.pairs)
      if (p.split == "test" && p.lesion_area > 0.0) {
        chosen = &p;
        break;
      }
    if (!chosen)
      for (const auto& p : data.pairs)
        if (p.split == "test") {
          chosen = &p;
          break;
        }
    if (!chosen) throw UsageError("heatmap: dataset has no test pairs");
  }
  export_heatmaps(model, *chosen, out_dir, ablations);
  std::printf("wrote heatmaps for patient %d to %s\n", chosen->patient_id, out_dir.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed, int trials, double eps,
                  double tol) {
  int total_trials = 0;
  double worst = 0.0;
  auto run_registry = [&](const std::vector<OpCheckSpec>& reg) {
    const GradSuiteReport rep = run_gradcheck_suite(reg, seed, trials, eps);
    for (const auto& r : rep.ops) {
      std::printf("%-28s trials %3d  max rel err %.3e\n", r.name.c_str(), r.trials,
                  r.max_rel_err);
      total_trials += r.trials;
    }
    worst = std::max(worst, rep.max_rel_err);
  };
  if (scope == "ops" || scope == "all") run_registry(gradcheck_registry());
  if (scope == "losses" || scope == "all") run_registry(loss_gradcheck_registry());
  if (scope == "model" || scope == "all") {
    const double err = model_end_to_end_gradcheck(seed, eps);
    std::printf("%-28s trials %3d  max rel err %.3e\n", "model.end_to_end", 1, err);
    total_trials += 1;
    worst = std::max(worst, err);
  }
  std::printf("%d trials, worst relative error %.3e (tolerance %.1e)\n", total_trials, worst, tol);
  if (worst > tol) {
    std::fprintf(stderr, "gradient check failed tolerance\n");
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Longitudinal ordinal risk pipeline on synthetic exam pairs"};
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "synthesize a paired-exam cohort");
  std::string gen_out, gen_config;
  std::uint64_t gen_seed = 1;
  GenConfig gcfg;
  gen->add_option("--out", gen_out, "dataset directory")->required();
  gen->add_option("--config", gen_config, "JSON config file with a generate block");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--patients", gcfg.n_patients, "cohort size");
  gen->add_option("--height", gcfg.height, "image height");
  gen->add_option("--width", gcfg.width, "image width");
  gen->add_option("--signal", gcfg.signal_strength, "lesion contrast multiplier");
  gen->add_option("--event-fraction", gcfg.event_fraction, "fraction of event-bound patients");
  gen->add_option("--censor-fraction", gcfg.censor_fraction, "fraction with early censoring");
  gen->add_option("--noise", gcfg.noise_sigma, "additive noise level");
  gen->add_option("--horizon", gcfg.horizon, "risk horizon in years");

  // train
  auto* tr = app.add_subcommand("train", "train the risk model on a dataset");
  std::string tr_data, tr_out, tr_config;
  TrainConfig tcfg;
  AblationCli tr_ab;
  bool tr_no_augment = false;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "run output directory")->required();
  tr->add_option("--config", tr_config, "JSON config file with a train block");
  tr->add_option("--seed", tcfg.seed, "training seed");
  tr->add_option("--epochs", tcfg.max_epochs, "maximum epochs");
  tr->add_option("--batch", tcfg.batch_size, "batch size");
  tr->add_option("--lr", tcfg.lr, "initial learning rate");
  tr->add_option("--bootstrap", tcfg.bootstrap_iters, "bootstrap iterations for later eval");
  tr->add_flag("--no-augment", tr_no_augment, "disable train-time augmentation");
  tr_ab.attach(tr);

  // eval
  auto* ev = app.add_subcommand("eval", "bootstrap metric report for a checkpoint");
  std::string ev_data, ev_ckpt, ev_split = "test", ev_csv, ev_json, ev_config;
  int ev_bootstrap = 1000;
  std::uint64_t ev_seed = 1;
  AblationCli ev_ab;
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--config", ev_config, "JSON config file; its train block supplies defaults");
  ev->add_option("--split", ev_split, "train/val/test");
  auto* ev_bs_opt = ev->add_option("--bootstrap", ev_bootstrap, "bootstrap iterations");
  auto* ev_seed_opt = ev->add_option("--seed", ev_seed, "bootstrap seed");
  ev->add_option("--csv", ev_csv, "write the report CSV here instead of stdout");
  ev->add_option("--json", ev_json, "also write a JSON report");
  ev_ab.attach(ev);

  // heatmap
  auto* hm = app.add_subcommand("heatmap", "export attention and field maps for one pair");
  std::string hm_data, hm_ckpt, hm_out, hm_config;
  int hm_patient = -1;
  AblationCli hm_ab;
  hm->add_option("--data", hm_data, "dataset directory")->required();
  hm->add_option("--checkpoint", hm_ckpt, "checkpoint file")->required();
  hm->add_option("--out", hm_out, "output directory")->required();
  hm->add_option("--config", hm_config, "JSON config file; its ablation flags apply");
  hm->add_option("--patient", hm_patient, "patient id (default: first test pair with a lesion)");
  hm_ab.attach(hm);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::string gc_scope = "all", gc_config;
  // Default chosen away from ReLU/bilinear kinks, where central differences
  // report spurious error for an otherwise correct gradient.
  std::uint64_t gc_seed = 2;
  int gc_trials = 3;
  double gc_eps = 3e-5, gc_tol = 1e-4;
  gc->add_option("--scope", gc_scope, "ops, losses, model, or all")
      ->check(CLI::IsMember({"ops", "losses", "model", "all"}));
  gc->add_option("--config", gc_config, "JSON config file; its train seed is the default");
  auto* gc_seed_opt = gc->add_option("--seed", gc_seed, "trial seed");
  gc->add_option("--trials", gc_trials, "trials per op");
  gc->add_option("--eps", gc_eps, "finite-difference step");
  gc->add_option("--tol", gc_tol, "max relative error tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed())
      return cmd_generate(gen_out, gen_config, gen_seed, gcfg, !gen_config.empty());
    if (tr->parsed()) {
      if (!tr_config.empty()) {
        FileConfig fc = load_config_file(tr_config);
        TrainConfig file_cfg = fc.train;
        // Command-line values override the file where given.
        for (const auto* opt : tr->get_options())
          if (opt->count() > 0) {
            const std::string n = opt->get_name();
            if (n == "--seed") file_cfg.seed = tcfg.seed;
            else if (n == "--epochs") file_cfg.max_epochs = tcfg.max_epochs;
            else if (n == "--batch") file_cfg.batch_size = tcfg.batch_size;
            else if (n == "--lr") file_cfg.lr = tcfg.lr;
            else if (n == "--bootstrap") file_cfg.bootstrap_iters = tcfg.bootstrap_iters;
          }
        tcfg = file_cfg;
      }
      tcfg.augment = !tr_no_augment;
      tcfg.ablations = tr_ab.flags();
      return cmd_train(tr_data, tr_out, tcfg);
    }
    if (ev->parsed()) {
      AblationFlags ev_flags = ev_ab.flags();
      if (!ev_config.empty()) {
        const FileConfig fc = load_config_file(ev_config);
        if (ev_bs_opt->count() == 0) ev_bootstrap = fc.train.bootstrap_iters;
        if (ev_seed_opt->count() == 0) ev_seed = fc.train.seed;
        if (!ev_ab.any_set()) ev_flags = fc.train.ablations;
      }
      return cmd_eval(ev_data, ev_ckpt, ev_split, ev_bootstrap, ev_seed, ev_csv, ev_json,
                      ev_flags);
    }
    if (hm->parsed()) {
      AblationFlags hm_flags = hm_ab.flags();
      if (!hm_config.empty() && !hm_ab.any_set())
        hm_flags = load_config_file(hm_config).train.ablations;
      return cmd_heatmap(hm_data, hm_ckpt, hm_out, hm_patient, hm_flags);
    }
    if (gc->parsed()) {
      if (!gc_config.empty() && gc_seed_opt->count() == 0)
        gc_seed = load_config_file(gc_config).train.seed;
      return cmd_gradcheck(gc_scope, gc_seed, gc_trials, gc_eps, gc_tol);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
