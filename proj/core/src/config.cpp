#include "miclab/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "miclab/errors.hpp"

namespace miclab::harness {
namespace {

using Json = nlohmann::ordered_json;

const char* const kTextureKeys[synth::kNumSegClasses] = {"background", "region_a", "region_b",
                                                         "stripe",     "blob",     "distractor"};

// Strict object reader: typed lookups, path-qualified errors, unknown-key check.
class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
  }

  [[noreturn]] static void fail(const std::string& field, const std::string& what) {
    throw ConfigError("config field '" + field + "': " + what);
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const Json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, bool& out) {
    if (const Json* v = find(key)) {
      if (!v->is_boolean()) fail(field(key), "expected a boolean");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number()) fail(field(key), "expected a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, int& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_integer()) fail(field(key), "expected an integer");
      const auto x = v->get<std::int64_t>();
      if (x < INT32_MIN || x > INT32_MAX) fail(field(key), "integer out of range");
      out = static_cast<int>(x);
    }
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(field(key), "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const Json* v = find(key)) {
      if (!v->is_string()) fail(field(key), "expected a string");
      out = v->get<std::string>();
    }
  }
  void get_size(const std::string& key, std::size_t& out) {
    std::uint64_t v = out;
    get(key, v);
    out = static_cast<std::size_t>(v);
  }
  void get(const std::string& key, std::vector<int>& out) {
    if (const Json* v = find(key)) {
      if (!v->is_array()) fail(field(key), "expected an array of integers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer()) fail(field(key), "expected an array of integers");
        out.push_back(e.get<int>());
      }
    }
  }
  void get(const std::string& key, std::array<double, 3>& out) {
    if (const Json* v = find(key)) {
      if (!v->is_array() || v->size() != 3) fail(field(key), "expected an array of 3 numbers");
      for (std::size_t i = 0; i < 3; ++i) {
        if (!(*v)[i].is_number()) fail(field(key), "expected an array of 3 numbers");
        out[i] = (*v)[i].get<double>();
      }
    }
  }
  void get(const std::string& key, aug::Range& out) {
    if (const Json* v = find(key)) {
      if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number() || !(*v)[1].is_number()) {
        fail(field(key), "expected [lo, hi]");
      }
      out.lo = (*v)[0].get<double>();
      out.hi = (*v)[1].get<double>();
    }
  }
  template <class Fn>
  void enum_field(const std::string& key, Fn&& apply) {
    std::string s;
    get(key, s);
    if (j_.contains(key)) {
      try {
        apply(s);
      } catch (const ConfigError& e) {
        fail(field(key), e.what());
      }
    }
  }
  template <class Fn>
  void child(const std::string& key, Fn&& fn) {
    if (const Json* v = find(key)) {
      Reader r(*v, field(key));
      fn(r);
      r.finish();
    }
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) fail(field(it.key()), "unknown field");
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Json range_json(const aug::Range& r) { return Json::array({r.lo, r.hi}); }

Json spec_json(const synth::SceneSpec& s) {
  Json tex = Json::object();
  for (int c = 0; c < synth::kNumSegClasses; ++c) {
    const synth::Texture& t = s.textures[static_cast<std::size_t>(c)];
    tex[kTextureKeys[c]] = {{"color", t.color},
                            {"pattern", synth::to_string(t.pattern)},
                            {"amplitude", t.amplitude},
                            {"period", t.period},
                            {"grain", t.grain}};
  }
  return {{"resolution", s.resolution},
          {"textures", tex},
          {"sensor_noise", s.sensor_noise},
          {"source_ambiguity", s.source_ambiguity},
          {"target_shift",
           {{"tint", s.target_shift.tint},
            {"noise_sigma", s.target_shift.noise_sigma},
            {"merge_ab", s.target_shift.merge_ab},
            {"merge_blend", s.target_shift.merge_blend}}},
          {"layout",
           {{"min_region", s.min_region},
            {"max_region", s.max_region},
            {"stripe_thickness", s.stripe_thickness},
            {"a_regions", s.a_regions},
            {"b_regions", s.b_regions},
            {"max_blobs", s.max_blobs},
            {"max_distractors", s.max_distractors},
            {"margin", s.margin}}}};
}

void read_spec(Reader& r, synth::SceneSpec& s) {
  r.get("resolution", s.resolution);
  r.child("textures", [&](Reader& tr) {
    for (int c = 0; c < synth::kNumSegClasses; ++c) {
      tr.child(kTextureKeys[c], [&](Reader& t) {
        synth::Texture& tex = s.textures[static_cast<std::size_t>(c)];
        t.get("color", tex.color);
        t.enum_field("pattern", [&](const std::string& v) { tex.pattern = synth::pattern_from_string(v); });
        t.get("amplitude", tex.amplitude);
        t.get("period", tex.period);
        t.get("grain", tex.grain);
      });
    }
  });
  r.get("sensor_noise", s.sensor_noise);
  r.get("source_ambiguity", s.source_ambiguity);
  r.child("target_shift", [&](Reader& t) {
    t.get("tint", s.target_shift.tint);
    t.get("noise_sigma", s.target_shift.noise_sigma);
    t.get("merge_ab", s.target_shift.merge_ab);
    t.get("merge_blend", s.target_shift.merge_blend);
  });
  r.child("layout", [&](Reader& l) {
    l.get("min_region", s.min_region);
    l.get("max_region", s.max_region);
    l.get("stripe_thickness", s.stripe_thickness);
    l.get("a_regions", s.a_regions);
    l.get("b_regions", s.b_regions);
    l.get("max_blobs", s.max_blobs);
    l.get("max_distractors", s.max_distractors);
    l.get("margin", s.margin);
  });
}

Json dataset_json(const DatasetConfig& d) {
  return {{"kind", to_string(d.kind)},
          {"source_train", d.source_train},
          {"target_train", d.target_train},
          {"target_val", d.target_val},
          {"source_val", d.source_val},
          {"source_seed", d.source_seed},
          {"target_seed", d.target_seed},
          {"path", d.path},
          {"spec", spec_json(d.spec)}};
}

void read_dataset(Reader& r, DatasetConfig& d) {
  r.enum_field("kind", [&](const std::string& v) { d.kind = task_kind_from_string(v); });
  r.get_size("source_train", d.source_train);
  r.get_size("target_train", d.target_train);
  r.get_size("target_val", d.target_val);
  r.get_size("source_val", d.source_val);
  r.get("source_seed", d.source_seed);
  r.get("target_seed", d.target_seed);
  r.get("path", d.path);
  r.child("spec", [&](Reader& s) { read_spec(s, d.spec); });
}

Json config_json(const ExperimentConfig& c) {
  const uda::TrainConfig& t = c.train;
  Json domains = Json::array();
  if (t.mic.mask_source) domains.push_back("source");
  if (t.mic.mask_target) domains.push_back("target");
  return {{"name", c.name},
          {"seed", t.seed},
          {"output_dir", c.output_dir},
          {"dataset", dataset_json(c.data)},
          {"model",
           {{"kind", nn::to_string(t.arch.kind)},
            {"in_channels", t.arch.in_channels},
            {"num_classes", t.arch.num_classes},
            {"encoder_widths", t.arch.encoder_widths},
            {"decoder_widths", t.arch.decoder_widths},
            {"kernel", t.arch.kernel}}},
          {"host",
           {{"method", uda::to_string(t.host)},
            {"tau", t.host_cfg.tau},
            {"mix_color_aug", t.host_cfg.mix_color_aug},
            {"pl_noise", t.host_cfg.pl_noise},
            {"disc_width", t.host_cfg.disc_width},
            {"grl_lambda", t.host_cfg.grl_lambda},
            {"disc_lr", t.host_cfg.disc_lr}}},
          {"mic",
           {{"enabled", t.mic.enabled},
            {"patch_size", t.mic.patch_size},
            {"mask_ratio", t.mic.mask_ratio},
            {"mask_domains", domains},
            {"loss_region", uda::to_string(t.mic.loss_region)},
            {"use_color_aug", t.mic.use_color_aug},
            {"ema_alpha", t.mic.ema_alpha},
            {"tau", t.mic.tau},
            {"use_ema_teacher", t.mic.use_ema_teacher},
            {"use_quality_weight", t.mic.use_quality_weight}}},
          {"weights", {{"target", t.weights.target}, {"mic", t.weights.mic}}},
          {"augment",
           {{"enable", t.aug.enable},
            {"brightness", range_json(t.aug.brightness_delta)},
            {"contrast", range_json(t.aug.contrast_factor)},
            {"saturation", range_json(t.aug.saturation_factor)},
            {"hue", range_json(t.aug.hue_shift)},
            {"blur_sigma", range_json(t.aug.blur_sigma)},
            {"blur_probability", t.aug.blur_probability}}},
          {"optimizer", {{"lr", t.lr}, {"momentum", t.momentum}}},
          {"train",
           {{"steps", t.steps},
            {"warmup_steps", t.warmup_steps},
            {"batch_size", t.batch_size},
            {"eval_interval", t.eval_interval},
            {"checkpoint_interval", c.checkpoint_interval}}},
          {"probe", {{"enabled", c.probe}, {"patch", c.probe_patch}}}};
}

ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c = default_experiment();
  uda::TrainConfig& t = c.train;
  Reader r(j, "");
  r.get("name", c.name);
  r.get("seed", t.seed);
  r.get("output_dir", c.output_dir);
  r.child("dataset", [&](Reader& d) { read_dataset(d, c.data); });
  r.child("model", [&](Reader& m) {
    m.enum_field("kind", [&](const std::string& v) { t.arch.kind = nn::model_kind_from_string(v); });
    m.get("in_channels", t.arch.in_channels);
    m.get("num_classes", t.arch.num_classes);
    m.get("encoder_widths", t.arch.encoder_widths);
    m.get("decoder_widths", t.arch.decoder_widths);
    m.get("kernel", t.arch.kernel);
  });
  r.child("host", [&](Reader& h) {
    h.enum_field("method", [&](const std::string& v) { t.host = uda::host_method_from_string(v); });
    h.get("tau", t.host_cfg.tau);
    h.get("mix_color_aug", t.host_cfg.mix_color_aug);
    h.get("pl_noise", t.host_cfg.pl_noise);
    h.get("disc_width", t.host_cfg.disc_width);
    h.get("grl_lambda", t.host_cfg.grl_lambda);
    h.get("disc_lr", t.host_cfg.disc_lr);
  });
  r.child("mic", [&](Reader& m) {
    m.get("enabled", t.mic.enabled);
    m.get("patch_size", t.mic.patch_size);
    m.get("mask_ratio", t.mic.mask_ratio);
    if (const Json* d = m.find("mask_domains")) {
      if (!d->is_array()) Reader::fail(m.field("mask_domains"), "expected an array of domain names");
      t.mic.mask_source = t.mic.mask_target = false;
      for (const auto& e : *d) {
        const std::string v = e.is_string() ? e.get<std::string>() : "";
        if (v == "source") {
          t.mic.mask_source = true;
        } else if (v == "target") {
          t.mic.mask_target = true;
        } else {
          Reader::fail(m.field("mask_domains"), "entries must be \"source\" or \"target\"");
        }
      }
    }
    m.enum_field("loss_region", [&](const std::string& v) { t.mic.loss_region = uda::loss_region_from_string(v); });
    m.get("use_color_aug", t.mic.use_color_aug);
    m.get("ema_alpha", t.mic.ema_alpha);
    m.get("tau", t.mic.tau);
    m.get("use_ema_teacher", t.mic.use_ema_teacher);
    m.get("use_quality_weight", t.mic.use_quality_weight);
  });
  r.child("weights", [&](Reader& w) {
    w.get("target", t.weights.target);
    w.get("mic", t.weights.mic);
  });
  r.child("augment", [&](Reader& a) {
    a.get("enable", t.aug.enable);
    a.get("brightness", t.aug.brightness_delta);
    a.get("contrast", t.aug.contrast_factor);
    a.get("saturation", t.aug.saturation_factor);
    a.get("hue", t.aug.hue_shift);
    a.get("blur_sigma", t.aug.blur_sigma);
    a.get("blur_probability", t.aug.blur_probability);
  });
  r.child("optimizer", [&](Reader& o) {
    o.get("lr", t.lr);
    o.get("momentum", t.momentum);
  });
  r.child("train", [&](Reader& tr) {
    tr.get("steps", t.steps);
    tr.get("warmup_steps", t.warmup_steps);
    tr.get("batch_size", t.batch_size);
    tr.get("eval_interval", t.eval_interval);
    tr.get("checkpoint_interval", c.checkpoint_interval);
  });
  r.child("probe", [&](Reader& p) {
    p.get("enabled", c.probe);
    p.get("patch", c.probe_patch);
  });
  r.finish();
  return c;
}

Json parse_json(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

}  // namespace

std::string to_string(TaskKind k) { return k == TaskKind::kSegmentation ? "segmentation" : "classification"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "segmentation") return TaskKind::kSegmentation;
  if (s == "classification") return TaskKind::kClassification;
  throw ConfigError("unknown task kind '" + s + "'");
}

ExperimentConfig default_experiment() {
  ExperimentConfig c;
  c.train.host = uda::HostMethod::kSelfTraining;
  c.train.mic.mask_ratio = 0.3;
  c.train.steps = 3000;
  c.train.warmup_steps = 1000;
  c.train.eval_interval = 500;
  return c;
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return serialize_config(a) == serialize_config(b);
}

void ExperimentConfig::validate() const {
  try {
    train.validate();
    data.spec.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  if (data.path.empty() && (data.source_train == 0 || data.target_train == 0 || data.target_val == 0)) {
    throw ConfigError("config field 'dataset': split sizes must be positive");
  }
  const bool seg = data.kind == TaskKind::kSegmentation;
  if (seg != (train.arch.kind == nn::ModelKind::kSegmenter)) {
    throw ConfigError("config field 'model.kind': does not match dataset.kind");
  }
  const int classes = seg ? synth::kNumSegClasses : synth::kNumClsClasses;
  if (train.arch.num_classes != classes) {
    throw ConfigError("config field 'model.num_classes': dataset has " + std::to_string(classes) + " classes");
  }
  const int res = data.spec.resolution;
  if (res % train.mic.patch_size != 0) {
    throw ConfigError("config field 'mic.patch_size': must divide the resolution " + std::to_string(res));
  }
  if (probe_patch < 0 || (probe_patch > 0 && res % probe_patch != 0)) {
    throw ConfigError("config field 'probe.patch': must divide the resolution " + std::to_string(res));
  }
  if (checkpoint_interval < 0) throw ConfigError("config field 'train.checkpoint_interval': must be non-negative");
  if (output_dir.empty()) throw ConfigError("config field 'output_dir': must not be empty");
}

std::string serialize_config(const ExperimentConfig& cfg) { return config_json(cfg).dump(2) + "\n"; }

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c = config_from_json(parse_json(text));
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) { return parse_config(read_file(path)); }

std::string serialize_dataset_config(const DatasetConfig& d) { return dataset_json(d).dump(2) + "\n"; }

DatasetConfig parse_dataset_config(const std::string& text) {
  DatasetConfig d;
  const Json j = parse_json(text);
  Reader r(j, "");
  read_dataset(r, d);
  r.finish();
  d.spec.validate();
  return d;
}

ExperimentConfig with_field(const ExperimentConfig& cfg, const std::string& field, const std::string& json_value) {
  Json j = config_json(cfg);
  Json* node = &j;
  std::stringstream ss(field);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config field '" + field + "'");
    node = &(*node)[part];
  }
  *node = parse_json(json_value);
  ExperimentConfig out = config_from_json(j);
  out.validate();
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IOError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IOError("cannot write '" + path + "'");
  out << content;
  if (!out) throw IOError("write failed for '" + path + "'");
}

}  // namespace miclab::harness
