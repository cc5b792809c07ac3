#include "miclab/persist.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <sstream>

#include "json.hpp"
#include "miclab/errors.hpp"

namespace miclab::harness {
namespace {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

constexpr char kArrayMagic[8] = {'M', 'L', 'A', 'R', 'R', 'A', 'Y', '1'};
constexpr char kCkptMagic[8] = {'M', 'I', 'C', 'L', 'A', 'B', '0', '1'};
constexpr std::uint32_t kDtypeF64 = 1;
constexpr std::uint32_t kDtypeI32 = 2;

class Writer {
 public:
  template <class T>
  void pod(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(T));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_.append(s);
  }
  void f64s(std::span<const double> v) {
    pod<std::uint64_t>(v.size());
    bytes(v.data(), v.size() * sizeof(double));
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string path) : buf_(std::move(data)), path_(std::move(path)) {}
  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) throw IOError("'" + path_ + "' is truncated");
  }
  template <class T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> f64s() {
    const auto n = pod<std::uint64_t>();
    need(n * sizeof(double));
    std::vector<double> v(n);
    bytes(v.data(), n * sizeof(double));
    return v;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  std::string buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

void write_array(const std::string& path, std::uint32_t dtype, const std::vector<std::uint64_t>& shape,
                 const void* data, std::size_t bytes) {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  if (n * (dtype == kDtypeF64 ? 8 : 4) != bytes) throw ShapeError("array payload does not match its shape");
  Writer w;
  w.bytes(kArrayMagic, 8);
  w.pod(kArrayVersion);
  w.pod(dtype);
  w.pod(static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) w.pod(d);
  w.bytes(data, bytes);
  write_file(path, w.data());
}

template <class T>
std::vector<T> read_array(const std::string& path, std::uint32_t dtype, std::vector<std::uint64_t>* shape) {
  Reader r(read_file(path), path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kArrayMagic, 8) != 0) throw IOError("'" + path + "' is not an array file");
  if (r.pod<std::uint32_t>() != kArrayVersion) throw IOError("'" + path + "' has an unsupported version");
  if (r.pod<std::uint32_t>() != dtype) throw IOError("'" + path + "' has an unexpected dtype");
  const auto rank = r.pod<std::uint32_t>();
  std::vector<std::uint64_t> dims(rank);
  std::uint64_t n = 1;
  for (auto& d : dims) {
    d = r.pod<std::uint64_t>();
    n *= d;
  }
  std::vector<T> out(n);
  r.bytes(out.data(), n * sizeof(T));
  if (!r.done()) throw IOError("'" + path + "' has trailing bytes");
  if (shape) *shape = dims;
  return out;
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char b[17];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(v));
  return b;
}

void write_split(const synth::Dataset& ds, const std::string& name, const DatasetConfig& cfg, const std::string& dir) {
  const std::string sd = (fs::path(dir) / name).string();
  fs::create_directories(sd);
  const auto n = static_cast<std::uint64_t>(ds.samples.size());
  const auto& img0 = ds.samples.front().image;
  std::vector<double> images;
  images.reserve(n * img0.numel());
  std::vector<int> labels;
  Json samples = Json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    images.insert(images.end(), s.image.values().begin(), s.image.values().end());
    const auto& l = ds.sealed() ? ds.sealed_labels[i] : s.label;
    labels.insert(labels.end(), l.begin(), l.end());
    samples.push_back({{"index", i}, {"seed", s.seed}});
  }
  write_array_f64(sd + "/images.bin", {n, img0.dim(0), img0.dim(1), img0.dim(2)}, images);
  const std::uint64_t per = labels.size() / n;
  const std::vector<std::uint64_t> lshape =
      cfg.kind == TaskKind::kSegmentation ? std::vector<std::uint64_t>{n, img0.dim(1), img0.dim(2)}
                                          : std::vector<std::uint64_t>{n, per};
  write_array_i32(sd + (ds.sealed() ? "/labels.sealed.bin" : "/labels.bin"), lshape, labels);
  const synth::Domain domain = ds.samples.front().domain;
  Json m = {{"format", "miclab-dataset"},
            {"version", 1},
            {"split", name},
            {"domain", synth::to_string(domain)},
            {"kind", to_string(cfg.kind)},
            {"num_classes", cfg.kind == TaskKind::kSegmentation ? synth::kNumSegClasses : synth::kNumClsClasses},
            {"count", n},
            {"sealed", ds.sealed()},
            {"samples", samples}};
  write_file(sd + "/manifest.json", m.dump(2) + "\n");
}

synth::Dataset read_split_dir(const std::string& sd) {
  const Json m = Json::parse(read_file(sd + "/manifest.json"));
  const bool sealed = m.at("sealed").get<bool>();
  const auto domain = synth::domain_from_string(m.at("domain").get<std::string>());
  std::vector<std::uint64_t> ishape, lshape;
  const auto images = read_array_f64(sd + "/images.bin", &ishape);
  const auto labels = read_array_i32(sd + (sealed ? "/labels.sealed.bin" : "/labels.bin"), &lshape);
  if (ishape.size() != 4 || lshape.empty() || ishape[0] != lshape[0]) throw IOError("'" + sd + "' has inconsistent arrays");
  const std::size_t n = ishape[0], per_img = ishape[1] * ishape[2] * ishape[3], per_lab = labels.size() / n;
  synth::Dataset ds;
  const auto& samples = m.at("samples");
  for (std::size_t i = 0; i < n; ++i) {
    synth::Sample s;
    s.image = ag::Tensor({ishape[1], ishape[2], ishape[3]},
                         std::vector<double>(images.begin() + static_cast<long>(i * per_img),
                                             images.begin() + static_cast<long>((i + 1) * per_img)));
    std::vector<int> l(labels.begin() + static_cast<long>(i * per_lab), labels.begin() + static_cast<long>((i + 1) * per_lab));
    if (sealed) {
      ds.sealed_labels.push_back(std::move(l));
    } else {
      s.label = std::move(l);
    }
    s.domain = domain;
    s.seed = samples.at(i).at("seed").get<std::uint64_t>();
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

void write_arch(Writer& w, const nn::ArchDescriptor& a) {
  w.pod<std::int32_t>(static_cast<std::int32_t>(a.kind));
  w.pod<std::int32_t>(a.in_channels);
  w.pod<std::int32_t>(a.num_classes);
  w.pod<std::int32_t>(a.kernel);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(a.encoder_widths.size()));
  for (int v : a.encoder_widths) w.pod<std::int32_t>(v);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(a.decoder_widths.size()));
  for (int v : a.decoder_widths) w.pod<std::int32_t>(v);
}

nn::ArchDescriptor read_arch(Reader& r) {
  nn::ArchDescriptor a;
  const auto kind = r.pod<std::int32_t>();
  if (kind != 0 && kind != 1) throw CheckpointError("checkpoint has an unknown model kind");
  a.kind = static_cast<nn::ModelKind>(kind);
  a.in_channels = r.pod<std::int32_t>();
  a.num_classes = r.pod<std::int32_t>();
  a.kernel = r.pod<std::int32_t>();
  a.encoder_widths.resize(r.pod<std::uint32_t>());
  for (int& v : a.encoder_widths) v = r.pod<std::int32_t>();
  a.decoder_widths.resize(r.pod<std::uint32_t>());
  for (int& v : a.decoder_widths) v = r.pod<std::int32_t>();
  return a;
}

void write_params(Writer& w, const std::string& prefix, const nn::ModelParams& p) {
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(p.size()));
  for (const auto& [name, t] : p) {
    w.str(prefix + name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.pod<std::uint64_t>(d);
    w.f64s(t.values());
  }
}

nn::ModelParams read_params(Reader& r, const std::string& prefix, const nn::ArchDescriptor& desc, bool requires_grad) {
  nn::ModelParams p(desc);
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    if (name.rfind(prefix, 0) != 0) throw CheckpointError("unexpected parameter block '" + name + "'");
    ag::Shape shape(r.pod<std::uint32_t>());
    for (auto& d : shape) d = r.pod<std::uint64_t>();
    std::vector<double> v = r.f64s();
    if (v.size() != ag::shape_numel(shape)) throw CheckpointError("parameter block '" + name + "' has a bad size");
    p.add(name.substr(prefix.size()), ag::Tensor(shape, std::move(v), requires_grad));
  }
  return p;
}

void write_buffers(Writer& w, const std::string& prefix, const nn::ModelParams& layout,
                   const std::vector<std::vector<double>>& bufs) {
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(bufs.size()));
  for (std::size_t i = 0; i < bufs.size(); ++i) {
    w.str(prefix + layout.at(i).first);
    w.f64s(bufs[i]);
  }
}

std::vector<std::vector<double>> read_buffers(Reader& r, const std::string& prefix, const nn::ModelParams& layout) {
  const auto n = r.pod<std::uint32_t>();
  if (n != layout.size()) throw CheckpointError("optimizer state does not match the parameters");
  std::vector<std::vector<double>> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    if (r.str() != prefix + layout.at(i).first) throw CheckpointError("optimizer block order mismatch");
    out.push_back(r.f64s());
    if (out.back().size() != layout.at(i).second.numel()) throw CheckpointError("optimizer block has a bad size");
  }
  return out;
}

}  // namespace

void write_array_f64(const std::string& path, const std::vector<std::uint64_t>& shape, const std::vector<double>& data) {
  write_array(path, kDtypeF64, shape, data.data(), data.size() * sizeof(double));
}

void write_array_i32(const std::string& path, const std::vector<std::uint64_t>& shape, const std::vector<int>& data) {
  static_assert(sizeof(int) == 4);
  write_array(path, kDtypeI32, shape, data.data(), data.size() * sizeof(int));
}

std::vector<double> read_array_f64(const std::string& path, std::vector<std::uint64_t>* shape) {
  return read_array<double>(path, kDtypeF64, shape);
}

std::vector<int> read_array_i32(const std::string& path, std::vector<std::uint64_t>* shape) {
  return read_array<int>(path, kDtypeI32, shape);
}

DatasetSplits generate_splits(const DatasetConfig& cfg) {
  if (cfg.source_train == 0 || cfg.target_train == 0 || cfg.target_val == 0) {
    throw ConfigError("dataset split sizes must be positive");
  }
  const bool seg = cfg.kind == TaskKind::kSegmentation;
  auto gen = [&](synth::Domain d, std::size_t n, std::uint64_t seed, synth::Split s) {
    return seg ? synth::generate_dataset(cfg.spec, d, n, seed, s) : synth::generate_cls_dataset(cfg.spec, d, n, seed, s);
  };
  DatasetSplits out;
  out.source_train = gen(synth::Domain::kSource, cfg.source_train, cfg.source_seed, synth::Split::kTrain);
  out.target_train = gen(synth::Domain::kTarget, cfg.target_train, cfg.target_seed, synth::Split::kTrain);
  out.target_val = gen(synth::Domain::kTarget, cfg.target_val, cfg.target_seed, synth::Split::kVal);
  if (cfg.source_val > 0) {
    out.source_val = gen(synth::Domain::kSource, cfg.source_val, cfg.source_seed, synth::Split::kVal);
  }
  return out;
}

std::string dataset_hash(const DatasetSplits& d) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const synth::Dataset* ds : {&d.source_train, &d.target_train, &d.target_val, &d.source_val}) {
    for (std::size_t i = 0; i < ds->samples.size(); ++i) {
      const auto& s = ds->samples[i];
      h = fnv1a(h, s.image.data(), s.image.numel() * sizeof(double));
      const auto& l = ds->sealed() ? ds->sealed_labels[i] : s.label;
      h = fnv1a(h, l.data(), l.size() * sizeof(int));
    }
  }
  return hex(h);
}

void write_splits(const DatasetSplits& d, const DatasetConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  write_split(d.source_train, "source_train", cfg, dir);
  write_split(d.target_train, "target_train", cfg, dir);
  write_split(d.target_val, "target_val", cfg, dir);
  Json splits = {{"source_train", d.source_train.samples.size()},
                 {"target_train", d.target_train.samples.size()},
                 {"target_val", d.target_val.samples.size()}};
  if (!d.source_val.samples.empty()) {
    write_split(d.source_val, "source_val", cfg, dir);
    splits["source_val"] = d.source_val.samples.size();
  }
  Json m = {{"format", "miclab-dataset"},
            {"version", 1},
            {"hash", dataset_hash(d)},
            {"splits", splits},
            {"config", Json::parse(serialize_dataset_config(cfg))}};
  write_file((fs::path(dir) / "manifest.json").string(), m.dump(2) + "\n");
}

synth::Dataset read_split(const std::string& split_dir) {
  try {
    return read_split_dir(split_dir);
  } catch (const nlohmann::json::exception& e) {
    throw IOError("bad manifest in '" + split_dir + "': " + e.what());
  }
}

DatasetSplits read_splits(const std::string& dir) {
  DatasetSplits d;
  d.source_train = read_split(dir + "/source_train");
  d.target_train = read_split(dir + "/target_train");
  d.target_val = read_split(dir + "/target_val");
  if (fs::exists(dir + "/source_val")) d.source_val = read_split(dir + "/source_val");
  return d;
}

void save_checkpoint(const std::string& path, const uda::TrainState& s, const std::string& config_json) {
  Writer w;
  w.bytes(kCkptMagic, 8);
  w.pod(kCheckpointVersion);
  write_arch(w, s.student.descriptor());
  w.pod<std::int64_t>(s.step);
  w.pod<std::int64_t>(s.teacher.step());
  w.pod<double>(s.teacher.alpha());
  for (const Rng* r : {&s.rng.data, &s.rng.mask, &s.rng.aug, &s.rng.mix, &s.rng.noise}) w.str(r->state());
  const auto& a = s.accum;
  for (double v : {a.source, a.target, a.mic, a.quality}) w.pod(v);
  w.pod<std::int64_t>(a.steps);
  w.pod<std::int64_t>(a.quality_count);
  write_params(w, "theta/", s.student);
  write_params(w, "phi/", s.teacher.params());
  w.pod(s.optimizer.lr());
  w.pod(s.optimizer.momentum());
  write_buffers(w, "opt/", s.student, s.optimizer.buffers());
  w.pod<std::uint8_t>(s.disc ? 1 : 0);
  if (s.disc) {
    write_arch(w, s.disc->params.descriptor());
    w.pod(s.disc->grl_lambda);
    write_params(w, "disc/", s.disc->params);
    w.pod(s.disc_optimizer.lr());
    w.pod(s.disc_optimizer.momentum());
    write_buffers(w, "disc_opt/", s.disc->params, s.disc_optimizer.buffers());
  }
  w.pod<std::uint64_t>(s.history.size());
  for (const auto& m : s.history) {
    w.pod<std::int32_t>(m.step);
    w.str(m.split);
    w.str(m.metric);
    w.pod<std::int32_t>(m.cls);
    w.pod(m.value);
  }
  w.str(config_json);
  write_file(path, w.data());
}

uda::TrainState load_checkpoint(const std::string& path, std::string* config_json,
                                const nn::ArchDescriptor* expected_arch) {
  Reader r(read_file(path), path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCkptMagic, 8) != 0) throw CheckpointError("'" + path + "' is not a miclab checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  uda::TrainState s;
  const nn::ArchDescriptor arch = read_arch(r);
  if (expected_arch && !(arch == *expected_arch)) {
    throw CheckpointError("checkpoint architecture does not match the requested model");
  }
  s.step = static_cast<int>(r.pod<std::int64_t>());
  const auto teacher_step = r.pod<std::int64_t>();
  const auto alpha = r.pod<double>();
  for (Rng* g : {&s.rng.data, &s.rng.mask, &s.rng.aug, &s.rng.mix, &s.rng.noise}) {
    try {
      g->set_state(r.str());
    } catch (const Error&) {
      throw CheckpointError("checkpoint has a corrupt rng state");
    }
  }
  auto& a = s.accum;
  for (double* v : {&a.source, &a.target, &a.mic, &a.quality}) *v = r.pod<double>();
  a.steps = r.pod<std::int64_t>();
  a.quality_count = r.pod<std::int64_t>();
  s.student = read_params(r, "theta/", arch, true);
  nn::ModelParams phi = read_params(r, "phi/", arch, false);
  if (!phi.same_layout(s.student)) throw CheckpointError("teacher layout differs from the student");
  s.teacher = uda::EmaTeacher(s.student, alpha);
  s.teacher.params() = std::move(phi);
  s.teacher.set_step(teacher_step);
  const double lr = r.pod<double>(), mom = r.pod<double>();
  s.optimizer = nn::SgdMomentum(s.student, lr, mom);
  s.optimizer.buffers() = read_buffers(r, "opt/", s.student);
  if (r.pod<std::uint8_t>()) {
    const nn::ArchDescriptor darch = read_arch(r);
    const double grl = r.pod<double>();
    s.disc = nn::DiscriminatorParams{read_params(r, "disc/", darch, true), grl};
    const double dlr = r.pod<double>(), dmom = r.pod<double>();
    s.disc_optimizer = nn::SgdMomentum(s.disc->params, dlr, dmom);
    s.disc_optimizer.buffers() = read_buffers(r, "disc_opt/", s.disc->params);
  }
  const auto n = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    uda::MetricPoint m;
    m.step = r.pod<std::int32_t>();
    m.split = r.str();
    m.metric = r.str();
    m.cls = r.pod<std::int32_t>();
    m.value = r.pod<double>();
    s.history.push_back(std::move(m));
  }
  std::string cfg = r.str();
  if (!r.done()) throw CheckpointError("'" + path + "' has trailing bytes");
  if (config_json) *config_json = std::move(cfg);
  return s;
}

std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  char b[32];
  std::snprintf(b, sizeof b, "%.10g", v);
  return b;
}

std::string metrics_csv(const std::vector<uda::MetricPoint>& history) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& m : history) {
    out += std::to_string(m.step) + "," + m.split + "," + m.metric + "," + (m.cls >= 0 ? std::to_string(m.cls) : "") +
           "," + format_value(m.value) + "\n";
  }
  return out;
}

std::vector<uda::MetricPoint> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw IOError("metrics CSV has an unexpected header");
  std::vector<uda::MetricPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() != 5) throw IOError("malformed metrics row: " + line);
    try {
      out.push_back({std::stoi(f[0]), f[1], f[2], f[3].empty() ? -1 : std::stoi(f[3]), std::stod(f[4])});
    } catch (const std::exception&) {
      throw IOError("malformed metrics row: " + line);
    }
  }
  return out;
}

}  // namespace miclab::harness
