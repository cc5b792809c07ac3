#include "miclab/nn.hpp"

#include <cmath>

#include "miclab/errors.hpp"

namespace miclab::nn {
namespace {

ag::Tensor he_kernel(int cout, int cin, int k, Rng& rng) {
  const auto fan_in = static_cast<double>(cin * k * k);
  const double std = std::sqrt(2.0 / fan_in);
  ag::Tensor w({static_cast<std::size_t>(cout), static_cast<std::size_t>(cin),
                static_cast<std::size_t>(k), static_cast<std::size_t>(k)},
               true);
  for (double& v : w.values()) v = std * rng.normal();
  return w;
}

ag::Tensor zero_bias(int cout) { return ag::Tensor({static_cast<std::size_t>(cout)}, true); }

void add_conv(ModelParams& p, const std::string& name, int cout, int cin, int k, Rng& rng) {
  p.add(name + ".weight", he_kernel(cout, cin, k, rng));
  p.add(name + ".bias", zero_bias(cout));
}

std::size_t conv_count(int cout, int cin, int k) {
  return static_cast<std::size_t>(cout) * static_cast<std::size_t>(cin * k * k) +
         static_cast<std::size_t>(cout);
}

// k x k stride-2 conv covering input rows 2o-k/2 .. 2o+k/2; output is H/2.
ag::Tensor down_conv(ag::Graph& g, const ModelParams& p, const std::string& name,
                     const ag::Tensor& x, int k) {
  const int half = k / 2;
  ag::Tensor y = ag::conv2d_padded(g, x, p.get(name + ".weight"), 2, half, half - 1);
  return ag::bias_add(g, y, p.get(name + ".bias"));
}

ag::Tensor same_conv(ag::Graph& g, const ModelParams& p, const std::string& name,
                     const ag::Tensor& x, int k) {
  ag::Tensor y = ag::conv2d(g, x, p.get(name + ".weight"), 1, k / 2);
  return ag::bias_add(g, y, p.get(name + ".bias"));
}

void check_input(const ArchDescriptor& d, const ag::Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != static_cast<std::size_t>(d.in_channels)) {
    throw ShapeError("model input must be [N," + std::to_string(d.in_channels) + ",H,W], got " +
                     ag::shape_str(x.shape()));
  }
  const auto f = static_cast<std::size_t>(d.downsample_factor());
  if (x.dim(2) % f != 0 || x.dim(3) % f != 0) {
    throw ShapeError("model input H and W must be divisible by " + std::to_string(f) + ", got " +
                     ag::shape_str(x.shape()));
  }
}

}  // namespace

std::string to_string(ModelKind kind) {
  return kind == ModelKind::kSegmenter ? "segmenter" : "classifier";
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "segmenter") return ModelKind::kSegmenter;
  if (s == "classifier") return ModelKind::kClassifier;
  throw ConfigError("unknown model kind '" + s + "'");
}

int ArchDescriptor::encoder_receptive_field() const {
  int rf = 1, jump = 1;
  for (std::size_t i = 0; i < encoder_widths.size(); ++i) {
    rf += (kernel - 1) * jump;
    jump *= 2;
  }
  return rf;
}

void ArchDescriptor::validate() const {
  if (in_channels <= 0 || num_classes < 2) throw ConfigError("model: invalid channel/class count");
  if (kernel <= 0 || kernel % 2 == 0) throw ConfigError("model: kernel must be odd");
  if (encoder_widths.empty()) throw ConfigError("model: encoder needs at least one stage");
  for (int w : encoder_widths)
    if (w <= 0) throw ConfigError("model: encoder widths must be positive");
  if (kind == ModelKind::kSegmenter) {
    if (decoder_widths.size() + 1 != encoder_widths.size()) {
      throw ConfigError("model: segmenter needs one decoder stage per encoder skip (" +
                        std::to_string(encoder_widths.size() - 1) + ")");
    }
    for (int w : decoder_widths)
      if (w <= 0) throw ConfigError("model: decoder widths must be positive");
  }
}

void ModelParams::add(std::string name, ag::Tensor t) {
  for (const auto& [n, _] : params_)
    if (n == name) throw ConfigError("duplicate parameter name '" + name + "'");
  params_.emplace_back(std::move(name), std::move(t));
}

const ag::Tensor& ModelParams::get(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw ConfigError("no parameter named '" + name + "'");
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams out(desc_);
  for (const auto& [n, t] : params_) out.params_.emplace_back(n, t.clone());
  return out;
}

void ModelParams::set_requires_grad(bool on) {
  for (auto& [_, t] : params_) {
    t.set_requires_grad(on);
    if (!on) t.clear_grad();
  }
}

void ModelParams::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

void ModelParams::clear_grad() {
  for (auto& [_, t] : params_) t.clear_grad();
}

bool ModelParams::same_layout(const ModelParams& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].first != other.params_[i].first) return false;
    if (params_[i].second.shape() != other.params_[i].second.shape()) return false;
  }
  return true;
}

ModelParams build_segmenter(const ArchDescriptor& desc, Rng& rng) {
  if (desc.kind != ModelKind::kSegmenter) throw ConfigError("build_segmenter: wrong model kind");
  desc.validate();
  ModelParams p(desc);
  int cin = desc.in_channels;
  for (std::size_t i = 0; i < desc.encoder_widths.size(); ++i) {
    add_conv(p, "enc" + std::to_string(i), desc.encoder_widths[i], cin, desc.kernel, rng);
    cin = desc.encoder_widths[i];
  }
  const std::size_t stages = desc.decoder_widths.size();
  for (std::size_t i = 0; i < stages; ++i) {
    const int skip = desc.encoder_widths[stages - 1 - i];
    add_conv(p, "dec" + std::to_string(i), desc.decoder_widths[i], cin + skip, desc.kernel, rng);
    cin = desc.decoder_widths[i];
  }
  add_conv(p, "head", desc.num_classes, cin, 1, rng);
  return p;
}

ModelParams build_classifier(const ArchDescriptor& desc, Rng& rng) {
  if (desc.kind != ModelKind::kClassifier) throw ConfigError("build_classifier: wrong model kind");
  desc.validate();
  ModelParams p(desc);
  int cin = desc.in_channels;
  for (std::size_t i = 0; i < desc.encoder_widths.size(); ++i) {
    add_conv(p, "enc" + std::to_string(i), desc.encoder_widths[i], cin, desc.kernel, rng);
    cin = desc.encoder_widths[i];
  }
  add_conv(p, "head", desc.num_classes, cin, 1, rng);
  return p;
}

ModelParams build_model(const ArchDescriptor& desc, Rng& rng) {
  return desc.kind == ModelKind::kSegmenter ? build_segmenter(desc, rng) : build_classifier(desc, rng);
}

std::size_t expected_parameter_count(const ArchDescriptor& d) {
  std::size_t n = 0;
  int cin = d.in_channels;
  for (int w : d.encoder_widths) {
    n += conv_count(w, cin, d.kernel);
    cin = w;
  }
  if (d.kind == ModelKind::kSegmenter) {
    const std::size_t stages = d.decoder_widths.size();
    for (std::size_t i = 0; i < stages; ++i) {
      n += conv_count(d.decoder_widths[i], cin + d.encoder_widths[stages - 1 - i], d.kernel);
      cin = d.decoder_widths[i];
    }
  }
  return n + conv_count(d.num_classes, cin, 1);
}

ag::Tensor forward(ag::Graph& g, const ModelParams& params, const ag::Tensor& x) {
  const ArchDescriptor& d = params.descriptor();
  check_input(d, x);
  std::vector<ag::Tensor> skips;
  ag::Tensor h = x;
  for (std::size_t i = 0; i < d.encoder_widths.size(); ++i) {
    h = ag::relu(g, down_conv(g, params, "enc" + std::to_string(i), h, d.kernel));
    skips.push_back(h);
  }
  if (d.kind == ModelKind::kClassifier) {
    h = ag::global_avg_pool(g, h);
    return same_conv(g, params, "head", h, 1);
  }
  const std::size_t stages = d.decoder_widths.size();
  for (std::size_t i = 0; i < stages; ++i) {
    h = ag::upsample_bilinear2x(g, h);
    h = ag::concat_channels(g, h, skips[stages - 1 - i]);
    h = ag::relu(g, same_conv(g, params, "dec" + std::to_string(i), h, d.kernel));
  }
  h = ag::upsample_bilinear2x(g, h);
  return same_conv(g, params, "head", h, 1);
}

ag::Tensor predict_probs(const ModelParams& params, const ag::Tensor& x) {
  ag::Graph g(false);
  return ag::softmax(g, forward(g, params, x), 1);
}

std::vector<std::vector<int>> predict_labels(const ModelParams& params, const ag::Tensor& x) {
  const ag::Tensor probs = predict_probs(params, x);
  const std::size_t n = probs.dim(0), ch = probs.dim(1), plane = probs.numel() / (n * ch);
  std::vector<std::vector<int>> out(n, std::vector<int>(plane, 0));
  const double* pd = probs.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < plane; ++p) {
      int best = 0;
      double bv = pd[i * ch * plane + p];
      for (std::size_t c = 1; c < ch; ++c) {
        const double v = pd[(i * ch + c) * plane + p];
        if (v > bv) {
          bv = v;
          best = static_cast<int>(c);
        }
      }
      out[i][p] = best;
    }
  return out;
}

DiscriminatorParams build_discriminator(int num_classes, int width, double grl_lambda, Rng& rng) {
  ArchDescriptor desc;
  desc.kind = ModelKind::kClassifier;
  desc.in_channels = num_classes;
  desc.num_classes = 2;
  desc.encoder_widths = {width, width, 1};
  desc.decoder_widths = {};
  DiscriminatorParams d{ModelParams(desc), grl_lambda};
  add_conv(d.params, "disc0", width, num_classes, 3, rng);
  add_conv(d.params, "disc1", width, width, 3, rng);
  add_conv(d.params, "disc2", 1, width, 3, rng);
  return d;
}

ag::Tensor discriminator_forward(ag::Graph& g, const DiscriminatorParams& d, const ag::Tensor& probs,
                                 bool reverse_gradient) {
  if (probs.rank() != 4 || probs.dim(2) % 8 != 0 || probs.dim(3) % 8 != 0) {
    throw ShapeError("discriminator input must be [N,C,H,W] with H, W divisible by 8");
  }
  ag::Tensor h = reverse_gradient ? ag::grad_reverse(g, probs, d.grl_lambda) : probs;
  h = ag::relu(g, down_conv(g, d.params, "disc0", h, 3));
  h = ag::relu(g, down_conv(g, d.params, "disc1", h, 3));
  h = down_conv(g, d.params, "disc2", h, 3);
  return ag::global_avg_pool(g, h);
}

SgdMomentum::SgdMomentum(const ModelParams& params, double lr, double momentum)
    : lr_(lr), momentum_(momentum) {
  for (const auto& [_, t] : params) buffers_.emplace_back(t.numel(), 0.0);
}

void SgdMomentum::step(ModelParams& params) {
  if (buffers_.size() != params.size()) throw ShapeError("optimizer/parameter layout mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    ag::Tensor& t = params.at(i).second;
    if (!t.has_grad()) continue;
    auto& v = buffers_[i];
    const auto gr = t.grad();
    auto w = t.values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = momentum_ * v[j] + gr[j];
      w[j] -= lr_ * v[j];
    }
  }
}

}  // namespace miclab::nn
