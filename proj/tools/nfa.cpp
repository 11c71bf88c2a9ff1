// nfa: corpus generation, training, evaluation, top-k sweeps and self-check.

#include <malloc.h>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "nfa/config.hpp"
#include "nfa/metrics.hpp"
#include "nfa/train.hpp"
#include "nfa/verify.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailure = 1;
constexpr int kUsage = 2;

struct Common {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  int threads = 1;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "key = value config file");
  cmd->add_option("--data", c.data_dir, "dataset directory (overrides data_dir)");
  cmd->add_option("--out", c.out_dir, "output directory (overrides out_dir)");
  cmd->add_option("--seed", c.seed, "seed (overrides the config and NFA_SEED)");
  cmd->add_option("--threads", c.threads, "worker threads for evaluation")->check(CLI::PositiveNumber);
}

nfa::RunConfig resolve(const Common& c) {
  nfa::RunConfig cfg;
  if (!c.config_path.empty()) cfg = nfa::load_run_config(c.config_path);
  std::uint64_t seed = 0;
  if (nfa::seed_from_env(seed)) cfg.seed = seed;
  if (c.seed) cfg.seed = *c.seed;
  if (!c.data_dir.empty()) cfg.data_dir = c.data_dir;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  return cfg;
}

void print_progress(const nfa::EpochLog& e) {
  std::printf("epoch %3d  loss %.4f  val iou %.4f  f1 %.4f  auc %.4f  gen %.3f  real %.3f\n",
              e.epoch, e.train_loss, e.val_iou, e.val_f1, e.val_auc, e.val_gen_r50,
              e.val_real_r50);
  std::fflush(stdout);
}

void print_report(const nfa::MetricsReport& r) {
  std::printf("n %d  gen_r50 %.4f  real_r50 %.4f  image_f1 %.4f  auc %.4f  iou %.4f  pixel_f1 %.4f\n",
              r.n, r.gen_recall_50, r.real_recall_50, r.image_f1, r.auc, r.mean_iou, r.pixel_f1);
}

int cmd_gen_data(const Common& c) {
  nfa::RunConfig cfg = resolve(c);
  cfg.corpus.master_seed = cfg.seed;
  cfg.corpus.validate();
  const auto rows = nfa::build_corpus(cfg.corpus, cfg.data_dir);
  nfa::write_resolved_config(cfg.data_dir / "config.txt", cfg);
  int per_split[3] = {0, 0, 0}, forged[3] = {0, 0, 0};
  for (const auto& r : rows) {
    for (int s = 0; s < 3; ++s)
      if (r.split == nfa::kSplits[s]) {
        ++per_split[s];
        forged[s] += r.label;
      }
  }
  std::printf("wrote %zu samples to %s\n", rows.size(), cfg.data_dir.string().c_str());
  for (int s = 0; s < 3; ++s) {
    std::printf("  %-5s %5d (%d forged)\n", nfa::kSplits[s].c_str(), per_split[s], forged[s]);
  }
  return kOk;
}

int cmd_train(const Common& c, const std::string& ablate, bool dry_run) {
  nfa::RunConfig cfg = resolve(c);
  if (!ablate.empty()) nfa::apply_ablation(cfg.model, ablate);
  cfg.validate();
  if (dry_run) {
    std::cout << nfa::format_run_config(cfg);
    return kOk;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const nfa::TrainResult r = nfa::run_training(cfg, c.threads, print_progress);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("best epoch %d, checkpoint %s (%.1f s)\n", r.best_epoch,
              (cfg.out_dir / "checkpoint").string().c_str(), secs);
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& split, bool robust,
             bool by_area, bool by_kind) {
  nfa::RunConfig cfg = resolve(c);
  nfa::Checkpoint ck;
  try {
    ck = nfa::load_checkpoint(checkpoint);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
  if (ck.model) cfg.model = ck.model->config();
  const auto samples = nfa::load_split(cfg.data_dir, split);
  const nfa::Predictor predict = ck.predictor();
  const nfa::EvalOptions opt{cfg.train.eval_batch_size, c.threads};
  const nfa::MetricsReport rep = nfa::evaluate(predict, samples, opt);
  std::filesystem::create_directories(cfg.out_dir);
  nfa::write_resolved_config(cfg.out_dir / "config.txt", cfg);
  nfa::write_metrics_csv(cfg.out_dir / "metrics.csv", rep, {by_kind, by_area});
  print_report(rep);
  if (by_area) {
    for (const auto& s : rep.by_area) {
      std::printf("  %-10s n %3d  iou %.4f  gen_r50 %.4f\n", s.name.c_str(), s.n, s.mean_iou,
                  s.gen_recall_50);
    }
  }
  if (by_kind) {
    for (const auto& s : rep.by_kind) {
      std::printf("  %-16s n %3d  iou %.4f  gen_r50 %.4f\n", s.name.c_str(), s.n, s.mean_iou,
                  s.gen_recall_50);
    }
  }
  if (robust) {
    const nfa::RobustnessReport rr = nfa::robustness_report(predict, samples, cfg.seed, opt);
    nfa::write_robustness_csv(cfg.out_dir / "robustness.csv", rr);
    std::cout << nfa::robustness_csv(rr);
  }
  return kOk;
}

int cmd_sweep_topk(const Common& c, const std::vector<double>& ratios) {
  if (ratios.empty()) {
    std::fprintf(stderr, "error: empty ratio list\n");
    return kUsage;
  }
  const nfa::RunConfig base = resolve(c);
  for (double r : ratios) {
    if (!(r > 0.0 && r <= 1.0)) {
      std::fprintf(stderr, "error: ratio %g outside (0, 1]\n", r);
      return kUsage;
    }
  }
  base.validate();
  std::vector<nfa::AblationRow> rows;
  for (double r : ratios) {
    nfa::RunConfig cfg = base;
    cfg.model.top_k_ratio = r;
    char name[32];
    std::snprintf(name, sizeof name, "topk_%.2f", r);
    cfg.out_dir = base.out_dir / name;
    std::printf("== top_k_ratio %.2f\n", r);
    rows.push_back(nfa::run_variant(cfg, c.threads, print_progress));
    print_report(rows.back().test);
  }
  std::filesystem::create_directories(base.out_dir);
  nfa::write_resolved_config(base.out_dir / "config.txt", base);
  nfa::write_text_file(base.out_dir / "ablation.csv", nfa::ablation_csv(rows));
  std::cout << nfa::ablation_csv(rows);
  return kOk;
}

int cmd_selfcheck(const std::string& inject_fault) {
  if (!inject_fault.empty()) nfa::testing::set_backward_sign_flip(inject_fault);
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = nfa::verify::selfcheck(0);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  int failures = 0;
  for (const auto& r : results) {
    std::printf("%s %-36s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    failures += !r.pass;
  }
  std::printf("%zu checks, %d failed, %.1f s\n", results.size(), failures, secs);
  if (failures) {
    std::printf("failed:");
    for (const auto& r : results)
      if (!r.pass) std::printf(" %s", r.name.c_str());
    std::printf("\n");
  }
  return failures ? kCheckFailure : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Training allocates and frees the same multi-megabyte buffers every step;
  // keeping them on the heap avoids mmap/munmap page-fault churn.
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"NFA-ViT localized forgery detection toolkit"};
  app.require_subcommand(1);

  Common gen, train, eval, sweep;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate the synthetic corpus");
  add_common(gen_cmd, gen);

  std::string ablate;
  bool dry_run = false;
  auto* train_cmd = app.add_subcommand("train", "train a model on the corpus");
  add_common(train_cmd, train);
  train_cmd->add_option("--ablate", ablate, "component preset")
      ->check(CLI::IsMember(nfa::ablation_presets()));
  train_cmd->add_flag("--dry-run", dry_run, "print the resolved config and exit");

  std::string checkpoint, split = "test";
  bool robust = false, by_area = false, by_kind = false;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, eval);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--split", split, "split to evaluate")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_flag("--robust", robust, "also run the perturbation grid");
  eval_cmd->add_flag("--by-area", by_area, "report the five area bins");
  eval_cmd->add_flag("--by-kind", by_kind, "report region-kind slices");

  std::vector<double> ratios{0.10, 0.25, 0.50};
  auto* sweep_cmd = app.add_subcommand("sweep-topk", "train one model per top-k ratio");
  add_common(sweep_cmd, sweep);
  sweep_cmd->add_option("--ratios", ratios, "comma-separated ratios")->delimiter(',');

  std::string inject;
  auto* self_cmd = app.add_subcommand("selfcheck", "gradient and invariant checks");
  self_cmd->add_option("--inject-fault", inject)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train, ablate, dry_run);
    if (*eval_cmd) return cmd_eval(eval, checkpoint, split, robust, by_area, by_kind);
    if (*sweep_cmd) return cmd_sweep_topk(sweep, ratios);
    if (*self_cmd) return cmd_selfcheck(inject);
  } catch (const nfa::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const nfa::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
  return kUsage;
}
