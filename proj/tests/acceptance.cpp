// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//
//   acceptance --work DIR
//
// Trains the desk-scale model on the default 1000-sample corpus, so a full
// run takes roughly half an hour on one core.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nfa/config.hpp"
#include "nfa/metrics.hpp"
#include "nfa/synth.hpp"
#include "nfa/train.hpp"
#include "nfa/verify.hpp"

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("%s %2d %-28s %s\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = "'" NFA_BIN "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

double to_double(const std::string& s) { return s.empty() ? NAN : std::strtod(s.c_str(), nullptr); }

}  // namespace

int main(int argc, char** argv) {
  fs::path work = "acceptance_work";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance --work DIR\n");
      return 2;
    }
  }
  fs::remove_all(work);
  fs::create_directories(work);
  const fs::path desk = NFA_DESK_CONFIG;

  // 1-4: gradient and invariant suites.
  {
    const auto t0 = Clock::now();
    const auto grads = nfa::verify::gradient_suite(0);
    const double secs = seconds_since(t0);
    std::string failed;
    for (const auto& r : grads)
      if (!r.pass) failed += " " + r.name;
    report(1, "gradient fidelity", failed.empty() && secs < 60.0,
           std::to_string(grads.size()) + " checks in " + fmt("%.1f s", secs) +
               (failed.empty() ? "" : ", failed:" + failed));
  }
  {
    const auto r = nfa::verify::mask_cardinality_suite(0);
    const double ratio = nfa::ModelConfig{}.top_k_ratio;
    report(2, "mask cardinality", r.pass && ratio == 0.25,
           r.detail + fmt(", default ratio %.2f", ratio));
  }
  {
    const auto r = nfa::verify::naa_oracle_suite(0);
    report(3, "noise-aware attention oracle", r.pass, r.detail);
  }
  {
    const auto r = nfa::verify::diffusion_contraction_suite(0);
    report(4, "diffusion contraction", r.pass, r.detail);
  }

  // Default corpus with the desk model.
  const nfa::RunConfig base = nfa::load_run_config(desk);
  const fs::path data = work / "data";
  if (run("gen-data -c " + q(desk) + " --data " + q(data), work / "gen-data.log") != 0) {
    std::printf("FAIL gen-data did not run, see %s\n", (work / "gen-data.log").c_str());
    return 1;
  }
  const auto test = nfa::load_split(data, "test");
  const double trivial_auc = nfa::trivial_detector_auc(test);

  // 5: component ablation, three seeds each.
  const std::vector<std::string> variants{"none", "+noise", "+noise+naa", "full"};
  std::map<std::string, std::vector<nfa::AblationRow>> rows;
  std::vector<nfa::AblationRow> all_rows;
  const auto t_ablation = Clock::now();
  for (const std::string& v : variants) {
    for (std::uint64_t seed : {0, 1, 2}) {
      nfa::RunConfig cfg = base;
      nfa::apply_ablation(cfg.model, v);
      cfg.seed = seed;
      cfg.data_dir = data;
      cfg.out_dir = work / "ablation" / (v + "_s" + std::to_string(seed));
      const auto t0 = Clock::now();
      rows[v].push_back(nfa::run_variant(cfg, 1));
      all_rows.push_back(rows[v].back());
      std::printf("  %-11s seed %llu  iou %.4f  auc %.4f  gen %.3f  real %.3f  (%.0f s)\n",
                  v.c_str(), static_cast<unsigned long long>(seed), rows[v].back().test.mean_iou,
                  rows[v].back().test.auc, rows[v].back().test.gen_recall_50,
                  rows[v].back().test.real_recall_50, seconds_since(t0));
      std::fflush(stdout);
    }
  }
  const double ablation_secs = seconds_since(t_ablation);
  nfa::write_text_file(work / "ablation.csv", nfa::ablation_csv(all_rows));
  auto med = [&](const std::string& v, double nfa::MetricsReport::*field) {
    std::vector<double> xs;
    for (const auto& r : rows[v]) xs.push_back(r.test.*field);
    return median(xs);
  };
  {
    std::vector<double> iou;
    for (const auto& v : variants) iou.push_back(med(v, &nfa::MetricsReport::mean_iou));
    bool ordered = true;
    for (std::size_t i = 1; i < iou.size(); ++i) ordered &= iou[i] - iou[i - 1] >= -0.01;
    char detail[160];
    std::snprintf(detail, sizeof detail,
                  "median iou none %.4f, +noise %.4f, +noise+naa %.4f, full %.4f; %.0f s",
                  iou[0], iou[1], iou[2], iou[3], ablation_secs);
    report(5, "component ablation ordering", ordered && ablation_secs <= 1800.0, detail);
  }

  // 6: learnability of the full model.
  {
    const double iou = med("full", &nfa::MetricsReport::mean_iou);
    const double gen = med("full", &nfa::MetricsReport::gen_recall_50);
    const double real = med("full", &nfa::MetricsReport::real_recall_50);
    const double a = med("full", &nfa::MetricsReport::auc);
    char detail[160];
    std::snprintf(detail, sizeof detail,
                  "iou %.4f, gen_r50 %.4f, real_r50 %.4f, auc %.4f vs trivial %.4f", iou, gen,
                  real, a, trivial_auc);
    report(6, "learnability floor",
           iou >= 0.70 && gen >= 0.90 && real >= 0.90 && a >= trivial_auc + 0.1, detail);
  }

  // 7: top-k sweep through the CLI.
  {
    const fs::path out = work / "sweep";
    const int code = run("sweep-topk -c " + q(desk) + " --data " + q(data) + " --out " + q(out) +
                             " --ratios 0.1,0.25,0.5",
                         work / "sweep.log");
    const auto csv = read_csv(out / "ablation.csv");
    bool pass = code == 0 && csv.size() == 4;
    std::string detail = "exit " + std::to_string(code) + ",";
    for (std::size_t i = 1; i < csv.size(); ++i) {
      const double iou = to_double(csv[i].at(5));
      pass &= iou >= 0.6;
      detail += " " + csv[i].at(1).substr(0, 4) + ":" + fmt("%.4f", iou);
    }
    report(7, "top-k sweep", pass, detail);
  }

  // 8 and 10: robustness grid and area bins on the seed-0 full model.
  const fs::path full_ck = work / "ablation" / "full_s0" / "checkpoint";
  {
    const fs::path out = work / "robust";
    const int code = run("eval --data " + q(data) + " --out " + q(out) + " --checkpoint " +
                             q(full_ck) + " --robust",
                         work / "robust.log");
    const auto csv = read_csv(out / "robustness.csv");
    bool pass = code == 0 && csv.size() == 4 && csv[0].size() == 8 && csv[1].size() == 8;
    std::string detail = "exit " + std::to_string(code);
    if (pass) {
      std::vector<double> g;
      for (int i = 1; i < 8; ++i) g.push_back(to_double(csv[1][i]));
      // Columns: original, noise 1, noise 3, blur 1, blur 3, jpeg 95, jpeg 75.
      const bool mono = g[2] <= g[1] + 0.02 && g[4] <= g[3] + 0.02 && g[6] <= g[5] + 0.02;
      const bool flags = csv[3][3] == "1" && csv[3][5] == "1" && csv[3][7] == "1";
      pass = mono && flags;
      detail += ", gen_r50";
      for (std::size_t i = 0; i < g.size(); ++i) detail += " " + csv[0][i + 1] + "=" + fmt("%.3f", g[i]);
    }
    report(8, "robustness protocol", pass, detail);
  }

  // 9: determinism of gen-data -> train -> eval.
  {
    const fs::path cfg = work / "det.cfg";
    nfa::write_text_file(cfg, slurp(desk) + "epochs = 2\n");
    std::string metrics[2];
    int codes = 0;
    for (int i = 0; i < 2; ++i) {
      const fs::path d = work / ("det" + std::to_string(i));
      const std::string common = " -c " + q(cfg) + " --seed 7 --threads 1 --data " + q(d / "data");
      codes |= run("gen-data" + common, d.string() + ".gen.log");
      codes |= run("train" + common + " --out " + q(d / "run"), d.string() + ".train.log");
      codes |= run("eval" + common + " --out " + q(d / "eval") + " --checkpoint " +
                       q(d / "run" / "checkpoint") + " --by-area --by-kind",
                   d.string() + ".eval.log");
      metrics[i] = slurp(d / "eval" / "metrics.csv");
    }
    const bool pass = codes == 0 && !metrics[0].empty() && metrics[0] == metrics[1];
    report(9, "determinism", pass,
           "metrics.csv " + std::to_string(metrics[0].size()) + " bytes, " +
               (metrics[0] == metrics[1] ? "identical" : "different"));
  }

  {
    const fs::path out = work / "by_area";
    const int code = run("eval --data " + q(data) + " --out " + q(out) + " --checkpoint " +
                             q(full_ck) + " --by-area",
                         work / "by_area.log");
    std::map<std::string, int> counts;
    for (const auto& row : read_csv(out / "metrics.csv"))
      if (row.size() == 3 && row[0].rfind("area:", 0) == 0 && row[1] == "n")
        counts[row[0]] = std::atoi(row[2].c_str());
    bool pass = code == 0 && counts.size() == 5;
    std::string detail = "forged per bin";
    for (int b = 0; b < nfa::kAreaBins; ++b) {
      const int n = counts.count("area:" + nfa::area_bin_name(b)) ? counts["area:" + nfa::area_bin_name(b)] : 0;
      pass &= n >= 10;
      detail += " " + std::to_string(n);
    }
    // Every ablation row carries a finite IoU for every bin.
    const auto csv = read_csv(work / "ablation.csv");
    pass &= csv.size() == all_rows.size() + 1;
    for (std::size_t i = 1; i < csv.size(); ++i)
      for (std::size_t c = 8; c < 13; ++c) pass &= c < csv[i].size() && std::isfinite(to_double(csv[i][c]));
    detail += "; ablation.csv bin columns " + std::string(pass ? "complete" : "incomplete");
    report(10, "area-bin protocol", pass, detail);
  }

  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
