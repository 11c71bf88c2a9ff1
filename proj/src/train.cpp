#include "nfa/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "nfa/rng.hpp"

namespace nfa {

namespace {

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

std::string fmt6(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, 0x5EED0000ull + static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * double(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  return order;
}

}  // namespace

double clip_grad_norm(ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    for (float g : params[i].grad.values()) sq += double(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (std::size_t i = 0; i < params.size(); ++i)
      for (float& g : params[i].grad.values()) g *= s;
  }
  return norm;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

Batch make_batch(std::span<const ForgerySample> samples) {
  if (samples.empty()) throw ValueError("make_batch: empty batch");
  const int b = static_cast<int>(samples.size());
  const int h = samples[0].image.dim(1), w = samples[0].image.dim(2);
  const std::size_t img = 3 * std::size_t(h) * w, plane = std::size_t(h) * w;
  Batch out{Tensor(Shape{b, 3, h, w}), Tensor(Shape{b}), Tensor(Shape{b, h, w})};
  for (int n = 0; n < b; ++n) {
    const ForgerySample& s = samples[n];
    if (s.image.shape() != Shape{3, h, w} || s.mask.shape() != Shape{h, w}) {
      throw DimensionError("make_batch: sample " + std::to_string(s.id) + " has image " +
                           shape_str(s.image.shape()) + ", expected " + shape_str({3, h, w}));
    }
    std::copy(s.image.values().begin(), s.image.values().end(), out.images.data() + n * img);
    std::copy(s.mask.values().begin(), s.mask.values().end(), out.masks.data() + n * plane);
    out.labels[n] = static_cast<float>(s.label);
  }
  return out;
}

Predictor model_predictor(const NfaVit& model) {
  return [&model](std::span<const ForgerySample> batch) {
    const Batch b = make_batch(batch);
    std::vector<ModelOutput> outs = model.predict(b.images);
    std::vector<Prediction> preds;
    preds.reserve(outs.size());
    for (ModelOutput& o : outs) {
      Prediction p;
      p.mask_prob = o.mask_logits.reshaped({o.mask_logits.dim(1), o.mask_logits.dim(2)});
      for (float& v : p.mask_prob.values()) v = sigmoid(v);
      p.cls_prob = model.config().loss_mode == LossMode::kSegOnly
                       ? static_cast<float>(seg_only_classification(p.mask_prob))
                       : sigmoid(o.cls_logit);
      preds.push_back(std::move(p));
    }
    return preds;
  };
}

TrainResult train_model(NfaVit& model, const RunConfig& config,
                        std::span<const ForgerySample> train, std::span<const ForgerySample> val,
                        int eval_threads, const ProgressFn& progress) {
  config.train.validate();
  if (train.empty() || val.empty()) throw ValueError("train_model: empty train or val split");
  const TrainOptions& opt = config.train;
  const std::size_t bs = static_cast<std::size_t>(opt.batch_size);
  const std::int64_t steps_per_epoch = static_cast<std::int64_t>((train.size() + bs - 1) / bs);
  const std::int64_t total = steps_per_epoch * opt.epochs;
  const auto warmup = static_cast<std::int64_t>(std::floor(opt.warmup_fraction * double(total)));

  AdamOptions adam;
  adam.lr_base = static_cast<float>(opt.lr);
  adam.weight_decay = static_cast<float>(opt.weight_decay);
  AdamState state = make_adam_state(model.params(), adam);
  const Predictor predict = model_predictor(model);
  EvalOptions eval_opt{opt.eval_batch_size, eval_threads};

  TrainResult result;
  double best_iou = -1.0;
  std::int64_t step = 0;
  std::vector<ForgerySample> batch_samples;
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    const auto order = epoch_order(train.size(), config.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < order.size(); lo += bs) {
      batch_samples.clear();
      for (std::size_t i = lo; i < std::min(order.size(), lo + bs); ++i) {
        batch_samples.push_back(train[order[i]]);
      }
      const Batch b = make_batch(batch_samples);
      model.params().zero_grad();
      Tape tape;
      const ForwardResult r = model.forward(tape, b.images, true);
      const Var loss = nfa_loss(r.mask_logits, r.cls_logits, b.labels, b.masks,
                                model.config().loss_mode);
      tape.backward(loss);
      if (opt.grad_clip > 0) clip_grad_norm(model.params(), opt.grad_clip);
      const double lr = lr_schedule(step, total, warmup, opt.lr);
      adam_step(model.params(), state, static_cast<float>(lr));
      ++step;
      loss_sum += loss.value().item() * double(batch_samples.size());
    }
    const MetricsReport rep = evaluate(predict, val, eval_opt);
    EpochLog row{epoch,           loss_sum / double(train.size()), rep.mean_iou, rep.pixel_f1,
                 rep.auc,         rep.gen_recall_50,               rep.real_recall_50};
    result.log.push_back(row);
    if (rep.mean_iou > best_iou) {
      best_iou = rep.mean_iou;
      result.best_epoch = epoch;
      result.best_params = model.params().snapshot();
    }
    if (progress) progress(row);
  }
  model.params().restore(result.best_params);
  return result;
}

std::string epoch_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out << "epoch,train_loss,val_iou,val_f1,val_auc,val_gen_r50,val_real_r50\n";
  for (const EpochLog& r : log) {
    out << r.epoch << "," << fmt6(r.train_loss) << "," << fmt6(r.val_iou) << ","
        << fmt6(r.val_f1) << "," << fmt6(r.val_auc) << "," << fmt6(r.val_gen_r50) << ","
        << fmt6(r.val_real_r50) << "\n";
  }
  return out.str();
}

// --- checkpoints ---------------------------------------------------------------

Predictor Checkpoint::predictor() const {
  if (kind == "oracle") return oracle_predictor();
  if (!model) throw ValueError("checkpoint has no model");
  return model_predictor(*model);
}

namespace {

constexpr const char* kManifest = "manifest.txt";

std::string param_file(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "p%03zu.nfat", index);
  return buf;
}

std::string dims_str(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const NfaVit& model) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "model = nfa_vit\n";
  manifest << "init_seed = " << model.config().init_seed << "\n";
  write_model_keys(manifest, model.config());
  const ParameterStore& ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const std::string file = param_file(i);
    save_nfat(dir / file, ps[i].value);
    manifest << "param " << ps[i].name << " " << dims_str(ps[i].value.shape()) << " " << file
             << "\n";
  }
  write_text_file(dir / kManifest, manifest.str());
}

void save_oracle_checkpoint(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / kManifest, "model = oracle\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const std::filesystem::path path = dir / kManifest;
  std::ifstream in(path);
  if (!in) throw IoError("cannot read checkpoint manifest " + path.string());
  auto corrupt = [&](const std::string& why) {
    return IoError("corrupt checkpoint " + dir.string() + ": " + why);
  };

  Checkpoint ck;
  ModelConfig cfg;
  struct ParamLine {
    std::string name, dims, file;
  };
  std::vector<ParamLine> params;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("param ", 0) == 0) {
      std::istringstream ls(line.substr(6));
      ParamLine p;
      if (!(ls >> p.name >> p.dims >> p.file)) throw corrupt("bad line '" + line + "'");
      params.push_back(std::move(p));
      continue;
    }
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw corrupt("bad line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 3);
    if (key == "model") {
      ck.kind = value;
    } else {
      try {
        if (!set_model_key(cfg, key, value)) throw corrupt("unknown key " + key);
      } catch (const ConfigError& e) {
        throw corrupt(e.what());
      }
    }
  }
  if (ck.kind == "oracle") return ck;
  if (ck.kind != "nfa_vit") throw corrupt("unknown model kind '" + ck.kind + "'");
  try {
    ck.model = std::make_unique<NfaVit>(cfg);
  } catch (const ConfigError& e) {
    throw corrupt(e.what());
  }
  ParameterStore& ps = ck.model->params();
  if (params.size() != ps.size()) {
    throw corrupt("expected " + std::to_string(ps.size()) + " parameters, manifest lists " +
                  std::to_string(params.size()));
  }
  for (const ParamLine& p : params) {
    Parameter* target = ps.find(p.name);
    if (target == nullptr) throw corrupt("unknown parameter " + p.name);
    Tensor value;
    try {
      value = load_nfat(dir / p.file);
    } catch (const std::exception& e) {
      throw corrupt(e.what());
    }
    if (value.shape() != target->value.shape() || dims_str(value.shape()) != p.dims) {
      throw corrupt("parameter " + p.name + " has shape " + shape_str(value.shape()) +
                    ", model expects " + shape_str(target->value.shape()));
    }
    target->value = std::move(value);
  }
  return ck;
}

// --- experiment drivers ----------------------------------------------------------

namespace {

struct Splits {
  std::vector<ForgerySample> train, val, test;
};

Splits load_corpus(const RunConfig& config, bool need_test) {
  if (!std::filesystem::exists(config.data_dir / "manifest.csv")) {
    throw IoError("no dataset at " + config.data_dir.string() + " (run gen-data first)");
  }
  Splits s;
  s.train = load_split(config.data_dir, "train");
  s.val = load_split(config.data_dir, "val");
  if (need_test) s.test = load_split(config.data_dir, "test");
  return s;
}

ModelConfig seeded_model(const RunConfig& config) {
  ModelConfig m = config.model;
  m.init_seed = derive_seed(config.seed, 0x1A17ull);
  return m;
}

TrainResult train_and_save(const RunConfig& config, const Splits& data, NfaVit& model, int threads,
                           const ProgressFn& progress) {
  std::filesystem::create_directories(config.out_dir);
  write_resolved_config(config.out_dir / "config.txt", config);
  TrainResult r = train_model(model, config, data.train, data.val, threads, progress);
  write_text_file(config.out_dir / "train_log.csv", epoch_log_csv(r.log));
  save_checkpoint(config.out_dir / "checkpoint", model);
  return r;
}

}  // namespace

TrainResult run_training(const RunConfig& config, int threads, const ProgressFn& progress) {
  config.validate();
  const Splits data = load_corpus(config, false);
  NfaVit model(seeded_model(config));
  return train_and_save(config, data, model, threads, progress);
}

AblationRow run_variant(const RunConfig& config, int threads, const ProgressFn& progress) {
  config.validate();
  const Splits data = load_corpus(config, true);
  NfaVit model(seeded_model(config));
  train_and_save(config, data, model, threads, progress);
  AblationRow row;
  row.config = ablation_name(config.model);
  row.top_k_ratio = config.model.top_k_ratio;
  row.seed = config.seed;
  row.test = evaluate(model_predictor(model), data.test, {config.train.eval_batch_size, threads});
  write_metrics_csv(config.out_dir / "metrics.csv", row.test, {true, true});
  return row;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "config,top_k_ratio,seed,gen_r50,real_r50,iou,auc,image_f1";
  for (int b = 0; b < kAreaBins; ++b) out << ",iou_lt" << (b + 1) * 20;
  out << "\n";
  for (const AblationRow& r : rows) {
    out << r.config << "," << fmt6(r.top_k_ratio) << "," << r.seed << ","
        << fmt6(r.test.gen_recall_50) << "," << fmt6(r.test.real_recall_50) << ","
        << fmt6(r.test.mean_iou) << "," << fmt6(r.test.auc) << "," << fmt6(r.test.image_f1);
    for (int b = 0; b < kAreaBins; ++b) {
      out << "," << fmt6(b < int(r.test.by_area.size()) ? r.test.by_area[b].mean_iou : NAN);
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace nfa
