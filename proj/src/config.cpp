#include "nfa/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace nfa {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* want) {
  throw ConfigError("bad value '" + value + "' for " + key + " (expected " + want + ")");
}

template <typename T>
T parse_integer(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty()) bad_value(key, value, "an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  const char* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty()) bad_value(key, value, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value, "true or false");
}

StageInts parse_stage_ints(const std::string& key, const std::string& value) {
  StageInts out{};
  std::stringstream in(value);
  std::string item;
  int i = 0;
  while (std::getline(in, item, ',')) {
    if (i == kStages) bad_value(key, value, "4 comma-separated integers");
    out[i++] = parse_integer<int>(key, trim(item));
  }
  if (i != kStages) bad_value(key, value, "4 comma-separated integers");
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string fmt_ints(const StageInts& v) {
  std::string s;
  for (int i = 0; i < kStages; ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string mask_mode_name(MaskMode m) {
  return m == MaskMode::kRenormalized ? "renormalized" : "post_softmax";
}

std::string loss_mode_name(LossMode m) { return m == LossMode::kJoint ? "joint" : "seg_only"; }

}  // namespace

void TrainOptions::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1 || eval_batch_size < 1) throw ConfigError("batch sizes must be >= 1");
  if (!(lr >= 0)) throw ConfigError("lr must be >= 0");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (!(grad_clip >= 0)) throw ConfigError("grad_clip must be >= 0");
  if (!(warmup_fraction >= 0 && warmup_fraction < 1)) {
    throw ConfigError("warmup_fraction must lie in [0, 1)");
  }
}

void RunConfig::validate() const {
  corpus.validate();
  model.validate();
  train.validate();
  const int s = model.total_stride();
  if (corpus.height % s != 0 || corpus.width % s != 0) {
    throw ConfigError("image size " + std::to_string(corpus.height) + "x" +
                      std::to_string(corpus.width) + " is not divisible by the encoder stride " +
                      std::to_string(s));
  }
}

bool set_model_key(ModelConfig& m, const std::string& key, const std::string& value) {
  if (key == "image_dims") m.image.dims = parse_stage_ints(key, value);
  else if (key == "image_depths") m.image.depths = parse_stage_ints(key, value);
  else if (key == "noise_dims") m.noise.dims = parse_stage_ints(key, value);
  else if (key == "noise_depths") m.noise.depths = parse_stage_ints(key, value);
  else if (key == "heads") m.heads = parse_stage_ints(key, value);
  else if (key == "patch_strides") m.patch_strides = parse_stage_ints(key, value);
  else if (key == "sparse_strides") m.sparse_strides = parse_stage_ints(key, value);
  else if (key == "top_k_ratio") m.top_k_ratio = parse_double(key, value);
  else if (key == "mask_mode") {
    if (value == "renormalized") m.mask_mode = MaskMode::kRenormalized;
    else if (value == "post_softmax") m.mask_mode = MaskMode::kPostSoftmax;
    else bad_value(key, value, "renormalized or post_softmax");
  } else if (key == "mlp_ratio") m.mlp_ratio = parse_integer<int>(key, value);
  else if (key == "decoder_width") m.decoder_width = parse_integer<int>(key, value);
  else if (key == "cls_width") m.cls_width = parse_integer<int>(key, value);
  else if (key == "use_noise") m.use_noise = parse_bool(key, value);
  else if (key == "use_naa") m.use_naa = parse_bool(key, value);
  else if (key == "use_weighted_decoder") m.use_weighted_decoder = parse_bool(key, value);
  else if (key == "loss_mode") {
    if (value == "joint") m.loss_mode = LossMode::kJoint;
    else if (value == "seg_only") m.loss_mode = LossMode::kSegOnly;
    else bad_value(key, value, "joint or seg_only");
  } else if (key == "init_seed") m.init_seed = parse_integer<std::uint64_t>(key, value);
  else return false;
  return true;
}

void write_model_keys(std::ostream& out, const ModelConfig& m) {
  out << "image_dims = " << fmt_ints(m.image.dims) << "\n";
  out << "image_depths = " << fmt_ints(m.image.depths) << "\n";
  out << "noise_dims = " << fmt_ints(m.noise.dims) << "\n";
  out << "noise_depths = " << fmt_ints(m.noise.depths) << "\n";
  out << "heads = " << fmt_ints(m.heads) << "\n";
  out << "patch_strides = " << fmt_ints(m.patch_strides) << "\n";
  out << "sparse_strides = " << fmt_ints(m.sparse_strides) << "\n";
  out << "top_k_ratio = " << fmt_double(m.top_k_ratio) << "\n";
  out << "mask_mode = " << mask_mode_name(m.mask_mode) << "\n";
  out << "mlp_ratio = " << m.mlp_ratio << "\n";
  out << "decoder_width = " << m.decoder_width << "\n";
  out << "cls_width = " << m.cls_width << "\n";
  out << "use_noise = " << fmt_bool(m.use_noise) << "\n";
  out << "use_naa = " << fmt_bool(m.use_naa) << "\n";
  out << "use_weighted_decoder = " << fmt_bool(m.use_weighted_decoder) << "\n";
  out << "loss_mode = " << loss_mode_name(m.loss_mode) << "\n";
}

void set_config_key(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "init_seed") {
    // Derived from `seed` at train time; not settable from a run config.
    throw ConfigError("unknown key: init_seed");
  }
  if (set_model_key(c.model, key, value)) return;
  if (key == "seed") c.seed = parse_integer<std::uint64_t>(key, value);
  else if (key == "data_dir") c.data_dir = value;
  else if (key == "out_dir") c.out_dir = value;
  else if (key == "train_count") c.corpus.counts[0] = parse_integer<int>(key, value);
  else if (key == "val_count") c.corpus.counts[1] = parse_integer<int>(key, value);
  else if (key == "test_count") c.corpus.counts[2] = parse_integer<int>(key, value);
  else if (key == "height") c.corpus.height = parse_integer<int>(key, value);
  else if (key == "width") c.corpus.width = parse_integer<int>(key, value);
  else if (key == "mix_object") c.corpus.mix.object = parse_double(key, value);
  else if (key == "mix_stuff") c.corpus.mix.stuff = parse_double(key, value);
  else if (key == "mix_background") c.corpus.mix.background = parse_double(key, value);
  else if (key == "epochs") c.train.epochs = parse_integer<int>(key, value);
  else if (key == "batch_size") c.train.batch_size = parse_integer<int>(key, value);
  else if (key == "eval_batch_size") c.train.eval_batch_size = parse_integer<int>(key, value);
  else if (key == "lr") c.train.lr = parse_double(key, value);
  else if (key == "weight_decay") c.train.weight_decay = parse_double(key, value);
  else if (key == "warmup_fraction") c.train.warmup_fraction = parse_double(key, value);
  else if (key == "grad_clip") c.train.grad_clip = parse_double(key, value);
  else throw ConfigError("unknown key: " + key);
}

RunConfig parse_run_config(const std::string& text, const std::string& origin, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    try {
      set_config_key(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), path.string(), std::move(base));
}

std::string format_run_config(const RunConfig& c) {
  std::ostringstream out;
  out << "seed = " << c.seed << "\n";
  out << "data_dir = " << c.data_dir.string() << "\n";
  out << "out_dir = " << c.out_dir.string() << "\n";
  out << "train_count = " << c.corpus.counts[0] << "\n";
  out << "val_count = " << c.corpus.counts[1] << "\n";
  out << "test_count = " << c.corpus.counts[2] << "\n";
  out << "height = " << c.corpus.height << "\n";
  out << "width = " << c.corpus.width << "\n";
  out << "mix_object = " << fmt_double(c.corpus.mix.object) << "\n";
  out << "mix_stuff = " << fmt_double(c.corpus.mix.stuff) << "\n";
  out << "mix_background = " << fmt_double(c.corpus.mix.background) << "\n";
  write_model_keys(out, c.model);
  out << "epochs = " << c.train.epochs << "\n";
  out << "batch_size = " << c.train.batch_size << "\n";
  out << "eval_batch_size = " << c.train.eval_batch_size << "\n";
  out << "lr = " << fmt_double(c.train.lr) << "\n";
  out << "weight_decay = " << fmt_double(c.train.weight_decay) << "\n";
  out << "warmup_fraction = " << fmt_double(c.train.warmup_fraction) << "\n";
  out << "grad_clip = " << fmt_double(c.train.grad_clip) << "\n";
  return out.str();
}

void write_resolved_config(const std::filesystem::path& path, const RunConfig& config) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << format_run_config(config);
}

const std::vector<std::string>& ablation_presets() {
  static const std::vector<std::string> names{"none", "+noise", "+noise+naa", "+noise+wd", "full"};
  return names;
}

void apply_ablation(ModelConfig& m, const std::string& preset) {
  if (preset == "none") {
    m.use_noise = m.use_naa = m.use_weighted_decoder = false;
  } else if (preset == "+noise") {
    m.use_noise = true;
    m.use_naa = m.use_weighted_decoder = false;
  } else if (preset == "+noise+naa") {
    m.use_noise = m.use_naa = true;
    m.use_weighted_decoder = false;
  } else if (preset == "+noise+wd") {
    m.use_noise = m.use_weighted_decoder = true;
    m.use_naa = false;
  } else if (preset == "full") {
    m.use_noise = m.use_naa = m.use_weighted_decoder = true;
  } else {
    throw ConfigError("unknown ablation preset '" + preset +
                      "' (none, +noise, +noise+naa, +noise+wd, full)");
  }
}

std::string ablation_name(const ModelConfig& m) {
  for (const std::string& name : ablation_presets()) {
    ModelConfig probe = m;
    apply_ablation(probe, name);
    if (probe.use_noise == m.use_noise && probe.use_naa == m.use_naa &&
        probe.use_weighted_decoder == m.use_weighted_decoder) {
      return name;
    }
  }
  return "custom";
}

bool seed_from_env(std::uint64_t& seed) {
  const char* env = std::getenv("NFA_SEED");
  if (env == nullptr) return false;
  seed = parse_integer<std::uint64_t>("NFA_SEED", env);
  return true;
}

}  // namespace nfa
