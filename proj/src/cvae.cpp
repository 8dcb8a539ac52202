#include "pdlatent/cvae.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>

#include "json.hpp"
#include "pdlatent/error.hpp"

namespace pdlatent {

using nn::LayerKind;
using nn::LayerSpec;
using nn::Shape;
using nn::Size3;
using nn::Tensor;
using nn::Var;

void CvaeConfig::validate() const {
  if (latent_dim < 1) throw ConfigError("cvae latent_dim must be >= 1");
  if (!(beta >= 0.0)) throw ConfigError("cvae beta must be >= 0");
  if (epochs < 1) throw ConfigError("cvae epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("cvae lr must be > 0");
  if (batch_size < 1) throw ConfigError("cvae batch_size must be >= 1");
  if (!input_dims.valid()) throw ConfigError("cvae input_dims must be positive");
  if (channels.size() != 4) throw ConfigError("cvae needs exactly 4 encoder channel widths");
  for (int c : channels)
    if (c < 1) throw ConfigError("cvae channel widths must be >= 1");
  if (hidden < 1) throw ConfigError("cvae hidden width must be >= 1");
}

namespace {

constexpr int kKernel = 3;
constexpr int kStride = 2;
constexpr int kPadding = 1;

LayerSpec conv_spec(LayerKind kind, int in, int out) {
  LayerSpec s;
  s.kind = kind;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel = kKernel;
  s.stride = kStride;
  s.padding = kPadding;
  return s;
}

LayerSpec linear_spec(int in, int out) {
  LayerSpec s;
  s.kind = LayerKind::Linear;
  s.in_channels = in;
  s.out_channels = out;
  return s;
}

template <typename T>
Tensor<T> init_uniform(const Shape& shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace

template <typename T>
const char* Cvae<T>::layer_name(int index) {
  static const char* names[kLayerCount] = {"enc_conv1", "enc_conv2", "enc_conv3",  "enc_conv4",
                                           "enc_hidden", "mu_head",  "logvar_head", "dec_linear",
                                           "dec_conv1", "dec_conv2", "dec_conv3",  "dec_conv4"};
  return (index >= 0 && index < kLayerCount) ? names[index] : "?";
}

template <typename T>
Cvae<T>::Cvae(CvaeConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& ch = config_.channels;
  input_shape_ = {config_.input_dims.nz, config_.input_dims.ny, config_.input_dims.nx};

  // Encoder spatial sizes s0 (input) .. s4 (deepest feature map).
  std::vector<Size3> sizes{input_shape_};
  int in_c = 1;
  for (int i = 0; i < 4; ++i) {
    specs_.push_back(conv_spec(LayerKind::Conv3d, in_c, ch[i]));
    sizes.push_back(specs_.back().output_size(sizes.back()));
    in_c = ch[i];
  }
  feature_shape_ = sizes[4];
  const int flat = flatten_size();
  specs_.push_back(linear_spec(flat, config_.hidden));
  specs_.push_back(linear_spec(config_.hidden, config_.latent_dim));
  specs_.push_back(linear_spec(config_.hidden, config_.latent_dim));
  specs_.push_back(linear_spec(config_.latent_dim, flat));

  // Each transposed conv maps s_{k+1} back to s_k; output_padding absorbs the floor
  // in the encoder so the decoder reproduces the input shape exactly.
  const int out_channels[4] = {ch[2], ch[1], ch[0], 1};
  in_c = ch[3];
  for (int j = 0; j < 4; ++j) {
    LayerSpec s = conv_spec(LayerKind::ConvTranspose3d, in_c, out_channels[j]);
    const Size3& from = sizes[4 - j];
    const Size3& to = sizes[3 - j];
    for (int a = 0; a < 3; ++a) {
      s.output_padding[a] = to[a] - nn::conv_transpose_output_size(from[a], kKernel, kStride, kPadding, 0);
    }
    s.validate();
    specs_.push_back(s);
    in_c = out_channels[j];
  }

  for (int i = 0; i < kLayerCount; ++i) {
    const auto& spec = specs_[i];
    std::seed_seq seq{static_cast<std::uint32_t>(config_.seed), static_cast<std::uint32_t>(config_.seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    const double bound = std::sqrt(1.0 / spec.fan_in());
    params_.push_back(Var<T>::parameter(init_uniform<T>(spec.weight_shape(), bound, rng)));
    params_.push_back(Var<T>::parameter(init_uniform<T>({spec.out_channels}, bound, rng)));
  }
}

template <typename T>
int Cvae<T>::flatten_size() const noexcept {
  return config_.channels[3] * feature_shape_[0] * feature_shape_[1] * feature_shape_[2];
}

namespace {

template <typename T>
Var<T> traced_relu(const Var<T>& x, ReluTrace* trace) {
  Var<T> y = nn::relu(x);
  if (trace) {
    std::vector<std::uint8_t> mask(y.value().size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = y.value()[i] > T{0} ? 1 : 0;
    trace->masks.push_back(std::move(mask));
  }
  return y;
}

}  // namespace

template <typename T>
typename Cvae<T>::Posterior Cvae<T>::encode(const Var<T>& x, ReluTrace* trace) const {
  const Shape& s = x.shape();
  if (s.size() != 5 || s[1] != 1 || s[2] != input_shape_[0] || s[3] != input_shape_[1] || s[4] != input_shape_[2]) {
    throw ShapeError("encoder input " + nn::shape_string(s) + " does not match configured dims");
  }
  const int n = s[0];
  Var<T> h = x;
  for (int l = kEncConv1; l <= kEncConv4; ++l) h = traced_relu(nn::conv3d(h, weight(l), bias(l), specs_[l]), trace);
  h = nn::reshape(h, {n, flatten_size()});
  h = traced_relu(nn::linear(h, weight(kEncHidden), bias(kEncHidden)), trace);
  return {nn::linear(h, weight(kMuHead), bias(kMuHead)), nn::linear(h, weight(kLogvarHead), bias(kLogvarHead))};
}

template <typename T>
Var<T> Cvae<T>::decode(const Var<T>& z, ReluTrace* trace) const {
  if (z.shape().size() != 2 || z.shape()[1] != config_.latent_dim) {
    throw ShapeError("decoder input " + nn::shape_string(z.shape()) + " is not (N, " +
                     std::to_string(config_.latent_dim) + ")");
  }
  const int n = z.shape()[0];
  Var<T> h = traced_relu(nn::linear(z, weight(kDecLinear), bias(kDecLinear)), trace);
  h = nn::reshape(h, {n, config_.channels[3], feature_shape_[0], feature_shape_[1], feature_shape_[2]});
  for (int l = kDecConv1; l <= kDecConv3; ++l) {
    h = traced_relu(nn::conv_transpose3d(h, weight(l), bias(l), specs_[l]), trace);
  }
  return nn::conv_transpose3d(h, weight(kDecConv4), bias(kDecConv4), specs_[kDecConv4]);
}

template <typename T>
typename Cvae<T>::LossTerms Cvae<T>::loss(const Tensor<T>& batch, const Tensor<T>& eps, ReluTrace* trace) const {
  const Var<T> x(batch);
  auto post = encode(x, trace);
  if (eps.shape() != post.mu.shape()) throw ShapeError("eps must be shaped (N, D)");
  const Var<T> z = nn::add(post.mu, nn::mul(nn::exp(nn::scale(post.logvar, T{0.5})), Var<T>(eps)));
  const Var<T> xhat = decode(z, trace);
  const Var<T> recon = recon_loss(x, xhat);
  const Var<T> kld = kld_loss(post.mu, post.logvar);
  LossTerms out;
  out.total = nn::add(recon, nn::scale(kld, static_cast<T>(config_.beta)));
  out.recon = recon.value()[0];
  out.kld = kld.value()[0];
  return out;
}

template <typename T>
void Cvae<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
template <typename U>
Cvae<U> Cvae<T>::cast() const {
  Cvae<U> out(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.params_[i].mutable_value() = params_[i].value().template cast<U>();
  }
  return out;
}

template class Cvae<float>;
template class Cvae<double>;
template Cvae<double> Cvae<float>::cast<double>() const;
template Cvae<float> Cvae<double>::cast<float>() const;
template Cvae<float> Cvae<float>::cast<float>() const;
template Cvae<double> Cvae<double>::cast<double>() const;

template <typename T>
Var<T> recon_loss(const Var<T>& x, const Var<T>& xhat) {
  return nn::sum(nn::square(nn::sub(x, xhat)));
}

template <typename T>
Var<T> kld_loss(const Var<T>& mu, const Var<T>& logvar) {
  const Var<T> inner = nn::add_scalar(nn::sub(logvar, nn::add(nn::square(mu), nn::exp(logvar))), T{1});
  return nn::scale(nn::sum(inner), T{-0.5});
}

template Var<float> recon_loss(const Var<float>&, const Var<float>&);
template Var<double> recon_loss(const Var<double>&, const Var<double>&);
template Var<float> kld_loss(const Var<float>&, const Var<float>&);
template Var<double> kld_loss(const Var<double>&, const Var<double>&);

double loss_recon(std::span<const float> x, std::span<const float> xhat) {
  if (x.size() != xhat.size()) throw ShapeError("loss_recon: input sizes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - xhat[i];
    acc += d * d;
  }
  return acc;
}

double loss_kld(std::span<const LatentCode> codes) {
  double acc = 0.0;
  for (const auto& c : codes) {
    if (c.mu.size() != c.logvar.size()) throw ShapeError("latent code mu/logvar lengths differ");
    for (std::size_t i = 0; i < c.mu.size(); ++i) {
      acc += c.mu[i] * c.mu[i] + std::exp(c.logvar[i]) - 1.0 - c.logvar[i];
    }
  }
  return 0.5 * acc;
}

double loss_total(double recon, double kld, double beta) { return recon + beta * kld; }

std::vector<double> reparameterize(const LatentCode& code, std::span<const double> eps) {
  if (code.mu.size() != eps.size() || code.logvar.size() != eps.size()) {
    throw ShapeError("reparameterize: eps length differs from latent dim");
  }
  std::vector<double> z(eps.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = code.mu[i] + std::exp(code.logvar[i] / 2.0) * eps[i];
  return z;
}

nn::Tensor<float> to_batch(std::span<const Volume> volumes) {
  if (volumes.empty()) throw ShapeError("empty volume batch");
  const Dims d = volumes[0].dims();
  std::vector<float> data;
  data.reserve(volumes.size() * d.voxels());
  for (const auto& v : volumes) {
    if (!(v.dims() == d)) throw ShapeError("volumes in a batch must share dims");
    data.insert(data.end(), v.data().begin(), v.data().end());
  }
  return Tensor<float>({static_cast<int>(volumes.size()), 1, d.nz, d.ny, d.nx}, std::move(data));
}

namespace {

void require_model_dims(const Cvae<float>& model, const Volume& v) {
  if (!(v.dims() == model.config().input_dims)) {
    const Dims& d = v.dims();
    throw ShapeError("volume dims (" + std::to_string(d.nx) + "," + std::to_string(d.ny) + "," +
                     std::to_string(d.nz) + ") do not match the model input dims");
  }
}

}  // namespace

std::vector<LatentCode> encode(const Cvae<float>& model, std::span<const Volume> volumes, int batch_size) {
  const int dlat = model.config().latent_dim;
  std::vector<LatentCode> codes;
  codes.reserve(volumes.size());
  for (std::size_t start = 0; start < volumes.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto count = std::min<std::size_t>(static_cast<std::size_t>(batch_size), volumes.size() - start);
    auto chunk = volumes.subspan(start, count);
    for (const auto& v : chunk) require_model_dims(model, v);
    const auto post = model.encode(Var<float>(to_batch(chunk)));
    for (std::size_t i = 0; i < count; ++i) {
      LatentCode c;
      for (int k = 0; k < dlat; ++k) {
        c.mu.push_back(post.mu.value()[i * dlat + k]);
        c.logvar.push_back(post.logvar.value()[i * dlat + k]);
      }
      codes.push_back(std::move(c));
    }
  }
  return codes;
}

std::vector<Volume> decode_batch(const Cvae<float>& model, const std::vector<std::vector<double>>& zs,
                                 Spacing spacing, int batch_size) {
  const int dlat = model.config().latent_dim;
  const Dims dims = model.config().input_dims;
  std::vector<Volume> out;
  out.reserve(zs.size());
  for (std::size_t start = 0; start < zs.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto count = std::min<std::size_t>(static_cast<std::size_t>(batch_size), zs.size() - start);
    std::vector<float> flat;
    for (std::size_t i = 0; i < count; ++i) {
      const auto& z = zs[start + i];
      if (z.size() != static_cast<std::size_t>(dlat)) throw ShapeError("latent vector length != latent_dim");
      for (double v : z) flat.push_back(static_cast<float>(v));
    }
    const auto xhat = model.decode(Var<float>(Tensor<float>({static_cast<int>(count), dlat}, std::move(flat))));
    const auto& t = xhat.value();
    for (std::size_t i = 0; i < count; ++i) {
      const float* p = t.ptr() + i * dims.voxels();
      out.emplace_back(dims, spacing, std::vector<float>(p, p + dims.voxels()));
    }
  }
  return out;
}

Volume decode(const Cvae<float>& model, std::span<const double> z, Spacing spacing) {
  return decode_batch(model, {std::vector<double>(z.begin(), z.end())}, spacing, 1).front();
}

TrainResult train(const CvaeConfig& config, std::span<const Volume> dataset, const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.empty()) throw ConfigError("training set is empty");
  Cvae<float> model(config);
  for (const auto& v : dataset) require_model_dims(model, v);

  nn::AdamState<float> adam;
  adam.options.lr = config.lr;

  std::mt19937_64 shuffle_rng(config.seed ^ 0x5ca1ab1e5eedULL);
  std::mt19937_64 eps_rng(config.seed ^ 0x0e95110e95110eULL);
  std::normal_distribution<double> normal(0.0, 1.0);

  const int n = static_cast<int>(dataset.size());
  const int dlat = config.latent_dim;
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochLog> log;
  std::vector<Volume> batch_volumes;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double recon_sum = 0.0;
    double kld_sum = 0.0;
    int batch_index = 0;
    for (int start = 0; start < n; start += config.batch_size, ++batch_index) {
      const int count = std::min(config.batch_size, n - start);
      batch_volumes.clear();
      for (int i = 0; i < count; ++i) batch_volumes.push_back(dataset[order[start + i]]);
      Tensor<float> eps({count, dlat});
      for (auto& e : eps.data()) e = static_cast<float>(normal(eps_rng));

      auto terms = model.loss(to_batch(batch_volumes), eps);
      const double total = loss_total(terms.recon, terms.kld, config.beta);
      if (!std::isfinite(total)) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_index) + " (recon " + std::to_string(terms.recon) + ", kld " +
                           std::to_string(terms.kld) + ")");
      }
      nn::backward(terms.total);
      adam_step(adam, model.parameters());
      model.zero_grad();
      recon_sum += terms.recon;
      kld_sum += terms.kld;
    }
    EpochLog entry;
    entry.epoch = epoch;
    entry.recon = recon_sum / n;
    entry.kld = kld_sum / n;
    entry.total = loss_total(entry.recon, entry.kld, config.beta);
    entry.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  return {std::move(model), std::move(log)};
}

void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,recon,kld,total,wall_ms\n" << std::setprecision(10);
  for (const auto& e : log) {
    out << e.epoch << ',' << e.recon << ',' << e.kld << ',' << e.total << ',' << std::fixed << std::setprecision(1)
        << e.wall_ms << std::defaultfloat << std::setprecision(10) << '\n';
  }
}

namespace {

std::string blob_name(int layer, bool is_weight) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "layer%02d_%s.f32", layer, is_weight ? "weight" : "bias");
  return buf;
}

void write_blob(const Tensor<float>& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!out) throw IoError("short write to " + path.string());
}

Tensor<float> read_blob(const std::filesystem::path& path, const Shape& shape) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != nn::numel(shape) * sizeof(float)) {
    throw CorruptFileError(path.string() + " size does not match shape " + nn::shape_string(shape));
  }
  in.seekg(0);
  Tensor<float> t(shape);
  in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(bytes));
  return t;
}

}  // namespace

void save_checkpoint(const Cvae<float>& model, int epoch, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& c = model.config();
  nlohmann::json manifest;
  manifest["format"] = "pdlatent-cvae";
  manifest["version"] = 1;
  manifest["epoch"] = epoch;
  manifest["seed"] = c.seed;
  manifest["config"] = {{"latent_dim", c.latent_dim},
                        {"beta", c.beta},
                        {"epochs", c.epochs},
                        {"lr", c.lr},
                        {"batch_size", c.batch_size},
                        {"input_dims", {c.input_dims.nx, c.input_dims.ny, c.input_dims.nz}},
                        {"channels", c.channels},
                        {"hidden", c.hidden}};
  nlohmann::json layers = nlohmann::json::array();
  for (int i = 0; i < Cvae<float>::kLayerCount; ++i) {
    const auto& s = model.layers()[i];
    const auto& w = model.weight(i).value();
    const auto& b = model.bias(i).value();
    write_blob(w, dir / blob_name(i, true));
    write_blob(b, dir / blob_name(i, false));
    layers.push_back({{"index", i},
                      {"name", Cvae<float>::layer_name(i)},
                      {"kind", nn::to_string(s.kind)},
                      {"in_channels", s.in_channels},
                      {"out_channels", s.out_channels},
                      {"kernel", s.kernel},
                      {"stride", s.stride},
                      {"padding", s.padding},
                      {"output_padding", s.output_padding},
                      {"weight", {{"file", blob_name(i, true)}, {"shape", w.shape()}}},
                      {"bias", {{"file", blob_name(i, false)}, {"shape", b.shape()}}}});
  }
  manifest["layers"] = layers;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write checkpoint manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

Cvae<float> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("no checkpoint manifest in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
    if (m.at("format") != "pdlatent-cvae") throw FormatError("not a pdlatent checkpoint: " + dir.string());
    const auto& jc = m.at("config");
    CvaeConfig c;
    c.latent_dim = jc.at("latent_dim");
    c.beta = jc.at("beta");
    c.epochs = jc.at("epochs");
    c.lr = jc.at("lr");
    c.batch_size = jc.at("batch_size");
    const auto dims = jc.at("input_dims").get<std::vector<int>>();
    if (dims.size() != 3) throw FormatError("checkpoint input_dims must have 3 entries");
    c.input_dims = {dims[0], dims[1], dims[2]};
    c.channels = jc.at("channels").get<std::vector<int>>();
    c.hidden = jc.at("hidden");
    c.seed = m.at("seed");
    Cvae<float> model(c);
    const auto& layers = m.at("layers");
    if (layers.size() != static_cast<std::size_t>(Cvae<float>::kLayerCount)) {
      throw FormatError("checkpoint has " + std::to_string(layers.size()) + " layers");
    }
    for (int i = 0; i < Cvae<float>::kLayerCount; ++i) {
      const auto& jl = layers[static_cast<std::size_t>(i)];
      auto& w = model.parameters()[2 * i];
      auto& b = model.parameters()[2 * i + 1];
      if (jl.at("weight").at("shape").get<Shape>() != w.shape() || jl.at("bias").at("shape").get<Shape>() != b.shape()) {
        throw CorruptFileError("checkpoint layer " + std::to_string(i) + " shape does not match the architecture");
      }
      w.mutable_value() = read_blob(dir / jl.at("weight").at("file").get<std::string>(), w.shape());
      b.mutable_value() = read_blob(dir / jl.at("bias").at("file").get<std::string>(), b.shape());
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint manifest: " + std::string(e.what()));
  }
}

}  // namespace pdlatent
