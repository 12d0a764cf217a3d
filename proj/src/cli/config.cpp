#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "odis/cli.hpp"

namespace odis {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

bool parse_size(const std::string& s, std::size_t& out) {
  if (s.empty()) return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

bool parse_real(const std::string& s, double& out) {
  if (s.empty()) return false;
  std::istringstream in(s);
  in >> out;
  return in && in.peek() == std::char_traits<char>::eof();
}

bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "on") return out = true, true;
  if (s == "false" || s == "0" || s == "off") return out = false, true;
  return false;
}

bool valid(ValueKind kind, const std::string& v) {
  std::size_t z;
  double r;
  bool b;
  switch (kind) {
    case ValueKind::Size: return parse_size(v, z);
    case ValueKind::Real: return parse_real(v, r);
    case ValueKind::Bool: return parse_bool(v, b);
    case ValueKind::Text: return true;
    case ValueKind::SizeList: {
      const auto items = split_list(v);
      return !items.empty() && std::all_of(items.begin(), items.end(),
                                           [&](const std::string& s) { return parse_size(s, z); });
    }
    case ValueKind::RealList: {
      const auto items = split_list(v);
      return !items.empty() && std::all_of(items.begin(), items.end(),
                                           [&](const std::string& s) { return parse_real(s, r); });
    }
  }
  return false;
}

const char* kind_name(ValueKind kind) {
  switch (kind) {
    case ValueKind::Size: return "a nonnegative integer";
    case ValueKind::Real: return "a number";
    case ValueKind::Bool: return "true or false";
    case ValueKind::Text: return "text";
    case ValueKind::SizeList: return "a comma-separated list of integers";
    case ValueKind::RealList: return "a comma-separated list of numbers";
  }
  return "?";
}

}  // namespace

FlatConfig::FlatConfig(const std::vector<KeySpec>* schema) : schema_(schema) {
  for (const KeySpec& k : *schema_) values_[k.key] = k.default_value;
}

const KeySpec& FlatConfig::spec(const std::string& key) const {
  for (const KeySpec& k : *schema_)
    if (k.key == key) return k;
  throw ConfigError("unknown config key '" + key + "'");
}

void FlatConfig::set(const std::string& key, const std::string& value) {
  const KeySpec& k = spec(key);
  if (!valid(k.kind, value)) {
    throw ConfigError("config key '" + key + "' expects " + kind_name(k.kind) + ", got '" +
                      value + "'");
  }
  values_[key] = value;
}

FlatConfig FlatConfig::parse(const std::vector<KeySpec>* schema, const std::string& text,
                             const std::string& origin) {
  FlatConfig cfg(schema);
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  std::map<std::string, std::size_t> seen;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (auto it = seen.find(key); it != seen.end()) {
      throw ConfigError(where + "key '" + key + "' already set on line " +
                        std::to_string(it->second));
    }
    seen[key] = lineno;
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return cfg;
}

FlatConfig FlatConfig::load(const std::vector<KeySpec>* schema,
                            const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(schema, ss.str(), path.string());
}

const std::string& FlatConfig::text(const std::string& key) const {
  spec(key);
  return values_.at(key);
}

std::size_t FlatConfig::size_value(const std::string& key) const {
  std::size_t v = 0;
  parse_size(text(key), v);
  return v;
}

double FlatConfig::real(const std::string& key) const {
  double v = 0;
  parse_real(text(key), v);
  return v;
}

bool FlatConfig::flag(const std::string& key) const {
  bool v = false;
  parse_bool(text(key), v);
  return v;
}

std::vector<std::size_t> FlatConfig::sizes(const std::string& key) const {
  std::vector<std::size_t> out;
  for (const auto& s : split_list(text(key))) {
    std::size_t v = 0;
    parse_size(s, v);
    out.push_back(v);
  }
  return out;
}

std::vector<double> FlatConfig::reals(const std::string& key) const {
  std::vector<double> out;
  for (const auto& s : split_list(text(key))) {
    double v = 0;
    parse_real(s, v);
    out.push_back(v);
  }
  return out;
}

std::string FlatConfig::resolved() const {
  std::ostringstream os;
  for (const KeySpec& k : *schema_) {
    os << "# " << k.doc << '\n' << k.key << " = " << values_.at(k.key) << '\n';
  }
  return os.str();
}

const std::vector<KeySpec>& run_schema() {
  using K = ValueKind;
  static const std::vector<KeySpec> schema = {
      {"seed", "0", K::Size, "seed of initialization, batching and augmentation"},
      {"objective", "odis", K::Text, "odis or ibot (image-level baseline without object masks)"},
      {"L_i", "false", K::Bool, "add the image-level loss on unmasked forwards"},
      {"PMLC", "false", K::Bool, "patch masking on local crops"},
      {"OALC", "false", K::Bool, "object-aware local cropping"},
      {"MALC", "false", K::Bool, "masked attention on local crops"},
      {"sampling", "area", K::Text, "target object sampling: area or uniform"},
      {"data.dir", "data", K::Text, "dataset directory written by gen-data"},
      {"data.train_fraction", "0.875", K::Real, "share of samples in the training split"},
      {"data.split_seed", "0", K::Size, "seed of the train/val split"},
      {"data.num_classes", "8", K::Size, "number of object classes"},
      {"data.missing_mask_fraction", "0", K::Real,
       "share of samples treated as having no segmentation map"},
      {"model.image_side", "32", K::Size, "input side in pixels (global crop side)"},
      {"model.patch_size", "4", K::Size, "patch side in pixels"},
      {"model.depth", "4", K::Size, "transformer blocks"},
      {"model.embed_dim", "64", K::Size, "token width"},
      {"model.heads", "4", K::Size, "attention heads"},
      {"model.mlp_ratio", "4", K::Size, "MLP hidden width over token width"},
      {"model.head_hidden", "256", K::Size, "projection head hidden width"},
      {"model.head_bottleneck", "64", K::Size, "projection head bottleneck width"},
      {"model.head_output_dim", "256", K::Size, "number of prototypes K"},
      {"model.student_temp", "0.1", K::Real, "student softmax temperature"},
      {"augment.local_side", "16", K::Size, "local crop side in pixels"},
      {"augment.local_crops", "10", K::Size, "local crops per sample"},
      {"augment.global_scale_min", "0.32", K::Real, "global crop area fraction, lower bound"},
      {"augment.global_scale_max", "1.0", K::Real, "global crop area fraction, upper bound"},
      {"augment.local_scale_min", "0.05", K::Real, "local crop area fraction, lower bound"},
      {"augment.local_scale_max", "0.32", K::Real, "local crop area fraction, upper bound"},
      {"augment.max_retries", "20", K::Size, "object-aware crop attempts before the fallback"},
      {"augment.block_mask_prob", "0.5", K::Real, "chance that a global crop is block-masked"},
      {"augment.mask_ratio_min", "0.1", K::Real, "block mask ratio, lower bound"},
      {"augment.mask_ratio_max", "0.5", K::Real, "block mask ratio, upper bound"},
      {"augment.flip", "true", K::Bool, "random horizontal flips"},
      {"train.batch_size", "16", K::Size, "samples per step"},
      {"train.steps", "3000", K::Size, "optimization steps"},
      {"train.lr", "0.0005", K::Real, "peak learning rate"},
      {"train.warmup_fraction", "0.1", K::Real, "share of steps with linear lr warmup"},
      {"train.weight_decay", "0.04", K::Real, "AdamW weight decay on weight matrices"},
      {"train.beta1", "0.9", K::Real, "AdamW first moment decay"},
      {"train.beta2", "0.999", K::Real, "AdamW second moment decay"},
      {"train.clip_grad", "3.0", K::Real, "max global gradient norm, 0 disables"},
      {"train.ema_start", "0.996", K::Real, "teacher momentum at step 0"},
      {"train.ema_end", "1.0", K::Real, "teacher momentum at the last step"},
      {"train.ema_per_epoch", "false", K::Bool, "update the teacher once per epoch"},
      {"train.teacher_temp_start", "0.04", K::Real, "teacher temperature at step 0"},
      {"train.teacher_temp_end", "0.04", K::Real, "teacher temperature after warmup"},
      {"train.teacher_temp_warmup_fraction", "0", K::Real, "share of steps of temperature warmup"},
      {"train.center_momentum", "0.9", K::Real, "teacher centering momentum"},
      {"train.patch_loss", "true", K::Bool, "patch-level loss on block-masked globals"},
      {"train.checkpoint_every", "0", K::Size, "steps between checkpoints, 0 only final"},
      {"eval.knn_k", "1,5,10,20", K::SizeList, "k values of the k-NN sweep"},
      {"eval.knn_tau", "0.07", K::Real, "k-NN vote temperature"},
      {"eval.probe_lrs", "0.001,0.01,0.1", K::RealList, "linear probe learning rates"},
      {"eval.probe_epochs", "100", K::Size, "linear probe epochs"},
      {"eval.dense_k", "5,10,30", K::SizeList, "neighbors of dense retrieval"},
      {"eval.dense_temperature", "0.07", K::Real, "dense retrieval softmax temperature"},
      {"eval.bank_factors", "1,8,64,128", K::SizeList, "memory bank subsampling factors"},
      {"eval.bank_cap", "0", K::Size, "memory bank row cap, 0 unbounded"},
  };
  return schema;
}

const std::vector<KeySpec>& scene_schema() {
  using K = ValueKind;
  static const std::vector<KeySpec> schema = {
      {"canvas_side", "32", K::Size, "image side in pixels"},
      {"min_objects", "2", K::Size, "fewest objects per scene"},
      {"max_objects", "4", K::Size, "most objects per scene"},
      {"num_classes", "8", K::Size, "object classes (shape x color variants)"},
      {"size_min", "0.25", K::Real, "smallest object diameter over canvas side"},
      {"size_max", "0.5", K::Real, "largest object diameter over canvas side"},
      {"occlusion", "false", K::Bool, "allow objects to overlap"},
      {"background", "mixed", K::Text, "flat, gradient, noise or mixed"},
      {"min_visible_pixels", "16", K::Size, "visible pixels every object keeps"},
      {"max_place_attempts", "50", K::Size, "placement attempts before dropping an object"},
  };
  return schema;
}

FlatConfig default_run_config() { return FlatConfig(&run_schema()); }

TrainConfig to_train_config(const FlatConfig& run) {
  TrainConfig c;
  ViTConfig& m = c.model;
  m.image_side = run.size_value("model.image_side");
  m.patch_size = run.size_value("model.patch_size");
  m.depth = run.size_value("model.depth");
  m.embed_dim = run.size_value("model.embed_dim");
  m.heads = run.size_value("model.heads");
  m.mlp_ratio = run.size_value("model.mlp_ratio");
  m.head_hidden = run.size_value("model.head_hidden");
  m.head_bottleneck = run.size_value("model.head_bottleneck");
  m.head_output_dim = run.size_value("model.head_output_dim");
  m.student_temp = run.real("model.student_temp");
  m.teacher_temp = run.real("train.teacher_temp_end");

  AugmentConfig& a = c.augment;
  a.global_side = m.image_side;
  a.patch_size = m.patch_size;
  a.local_side = run.size_value("augment.local_side");
  a.local_crops = run.size_value("augment.local_crops");
  a.global_scale_min = run.real("augment.global_scale_min");
  a.global_scale_max = run.real("augment.global_scale_max");
  a.local_scale_min = run.real("augment.local_scale_min");
  a.local_scale_max = run.real("augment.local_scale_max");
  a.max_retries = run.size_value("augment.max_retries");
  a.block_mask_prob = run.real("augment.block_mask_prob");
  a.mask_ratio_min = run.real("augment.mask_ratio_min");
  a.mask_ratio_max = run.real("augment.mask_ratio_max");
  a.flip = run.flag("augment.flip");
  const std::string& sampling = run.text("sampling");
  if (sampling == "area") {
    a.sampling = SamplingStrategy::Area;
  } else if (sampling == "uniform") {
    a.sampling = SamplingStrategy::Uniform;
  } else {
    throw ConfigError("sampling must be area or uniform, got '" + sampling + "'");
  }
  a.pmlc = run.flag("PMLC");
  a.oalc = run.flag("OALC");
  a.malc = run.flag("MALC");

  c.use_image_loss = run.flag("L_i");
  c.use_patch_loss = run.flag("train.patch_loss");
  c.batch_size = run.size_value("train.batch_size");
  c.total_steps = run.size_value("train.steps");
  c.lr = run.real("train.lr");
  c.warmup_fraction = run.real("train.warmup_fraction");
  c.weight_decay = run.real("train.weight_decay");
  c.beta1 = run.real("train.beta1");
  c.beta2 = run.real("train.beta2");
  c.clip_grad = run.real("train.clip_grad");
  c.ema_start = run.real("train.ema_start");
  c.ema_end = run.real("train.ema_end");
  c.ema_per_epoch = run.flag("train.ema_per_epoch");
  c.teacher_temp_start = run.real("train.teacher_temp_start");
  c.teacher_temp_end = run.real("train.teacher_temp_end");
  c.teacher_temp_warmup_fraction = run.real("train.teacher_temp_warmup_fraction");
  c.center_momentum = run.real("train.center_momentum");
  c.seed = run.size_value("seed");

  const std::string& objective = run.text("objective");
  if (objective == "ibot") {
    if (a.oalc || a.malc) throw ConfigError("OALC and MALC need objective = odis");
    c = ibot_preset(c);
  } else if (objective != "odis") {
    throw ConfigError("objective must be odis or ibot, got '" + objective + "'");
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

SceneSpec to_scene_spec(const FlatConfig& spec) {
  SceneSpec s;
  s.canvas_side = spec.size_value("canvas_side");
  s.min_objects = spec.size_value("min_objects");
  s.max_objects = spec.size_value("max_objects");
  s.num_classes = spec.size_value("num_classes");
  s.size_min = spec.real("size_min");
  s.size_max = spec.real("size_max");
  s.occlusion = spec.flag("occlusion");
  const std::string& bg = spec.text("background");
  if (bg == "flat") {
    s.background = Background::Flat;
  } else if (bg == "gradient") {
    s.background = Background::Gradient;
  } else if (bg == "noise") {
    s.background = Background::Noise;
  } else if (bg == "mixed") {
    s.background = Background::Mixed;
  } else {
    throw ConfigError("background must be flat, gradient, noise or mixed, got '" + bg + "'");
  }
  s.min_visible_pixels = spec.size_value("min_visible_pixels");
  s.max_place_attempts = spec.size_value("max_place_attempts");
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return s;
}

RunData load_run_data(const FlatConfig& run, const std::filesystem::path& dataset_dir) {
  RunData d;
  d.samples = read_dataset(dataset_dir, run.size_value("data.num_classes"));
  const double missing = run.real("data.missing_mask_fraction");
  if (missing < 0.0 || missing > 1.0) {
    throw ConfigError("data.missing_mask_fraction outside [0, 1]");
  }
  const std::uint64_t split_seed = run.size_value("data.split_seed");
  std::vector<int> labels;
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    const double u =
        double(derive_seed({split_seed, 0x4d495353ULL, i}) >> 11) * 0x1.0p-53;
    if (u < missing) d.samples[i].has_mask = false;
    labels.push_back(d.samples[i].primary_class());
  }
  const double frac = run.real("data.train_fraction");
  if (!(frac > 0.0 && frac < 1.0)) throw ConfigError("data.train_fraction outside (0, 1)");
  d.split = split_indices(labels, frac, split_seed);
  return d;
}

}  // namespace odis
