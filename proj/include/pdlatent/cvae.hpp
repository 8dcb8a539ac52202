#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pdlatent/nn/adam.hpp"
#include "pdlatent/nn/autograd.hpp"
#include "pdlatent/volume.hpp"

namespace pdlatent {

struct CvaeConfig {
  int latent_dim = 8;
  double beta = 1.0;
  int epochs = 400;
  double lr = 1e-3;
  int batch_size = 16;
  Dims input_dims{96, 112, 96};
  std::uint64_t seed = 0;
  // Encoder conv widths; the decoder mirrors them. Shrunk only for tests.
  std::vector<int> channels{32, 64, 128, 256};
  int hidden = 512;

  void validate() const;
};

// Posterior parameters for one subject.
struct LatentCode {
  std::vector<double> mu;
  std::vector<double> logvar;
};

// Records the on/off pattern of every ReLU in a forward pass.
struct ReluTrace {
  std::vector<std::vector<std::uint8_t>> masks;
};

// Encoder: 4 stride-2 conv3d -> flatten -> linear(hidden) -> {mu, logvar} heads.
// Decoder: linear(D -> flatten) -> reshape -> 4 stride-2 transposed convs.
// ReLU follows every hidden layer; the heads and the final transposed conv are linear.
template <typename T>
class Cvae {
 public:
  enum Layer : int {
    kEncConv1 = 0,
    kEncConv2,
    kEncConv3,
    kEncConv4,
    kEncHidden,
    kMuHead,
    kLogvarHead,
    kDecLinear,
    kDecConv1,
    kDecConv2,
    kDecConv3,
    kDecConv4,
    kLayerCount
  };

  explicit Cvae(CvaeConfig config);

  const CvaeConfig& config() const noexcept { return config_; }
  const std::vector<nn::LayerSpec>& layers() const noexcept { return specs_; }
  static const char* layer_name(int index);

  // Weights and biases interleaved: parameters()[2i] is layer i's weight, [2i+1] its bias.
  std::vector<nn::Var<T>>& parameters() noexcept { return params_; }
  const std::vector<nn::Var<T>>& parameters() const noexcept { return params_; }
  const nn::Var<T>& weight(int layer) const { return params_[2 * layer]; }
  const nn::Var<T>& bias(int layer) const { return params_[2 * layer + 1]; }

  // Spatial shape (D,H,W) of the deepest feature map and its flattened size.
  nn::Size3 feature_shape() const noexcept { return feature_shape_; }
  int flatten_size() const noexcept;

  struct Posterior {
    nn::Var<T> mu;
    nn::Var<T> logvar;
  };
  // x is (N, 1, nz, ny, nx).
  Posterior encode(const nn::Var<T>& x, ReluTrace* trace = nullptr) const;
  // z is (N, D); returns (N, 1, nz, ny, nx).
  nn::Var<T> decode(const nn::Var<T>& z, ReluTrace* trace = nullptr) const;

  struct LossTerms {
    nn::Var<T> total;
    double recon = 0.0;
    double kld = 0.0;
  };
  // Full beta-VAE loss with z = mu + exp(logvar / 2) * eps, eps shaped (N, D).
  LossTerms loss(const nn::Tensor<T>& batch, const nn::Tensor<T>& eps, ReluTrace* trace = nullptr) const;

  void zero_grad();
  template <typename U>
  Cvae<U> cast() const;

 private:
  template <typename U>
  friend class Cvae;

  CvaeConfig config_;
  std::vector<nn::LayerSpec> specs_;
  std::vector<nn::Var<T>> params_;
  nn::Size3 input_shape_{};
  nn::Size3 feature_shape_{};
};

extern template class Cvae<float>;
extern template class Cvae<double>;

// sum_items sum_j (x_j - xhat_j)^2
template <typename T>
nn::Var<T> recon_loss(const nn::Var<T>& x, const nn::Var<T>& xhat);
// -1/2 sum_items sum_i (1 + logvar_i - mu_i^2 - exp(logvar_i))
template <typename T>
nn::Var<T> kld_loss(const nn::Var<T>& mu, const nn::Var<T>& logvar);

double loss_recon(std::span<const float> x, std::span<const float> xhat);
double loss_kld(std::span<const LatentCode> codes);
double loss_total(double recon, double kld, double beta);

std::vector<double> reparameterize(const LatentCode& code, std::span<const double> eps);

// Stacks volumes into an (N, 1, nz, ny, nx) tensor.
nn::Tensor<float> to_batch(std::span<const Volume> volumes);

// Posterior parameters for each volume (no sampling).
std::vector<LatentCode> encode(const Cvae<float>& model, std::span<const Volume> volumes, int batch_size = 16);
Volume decode(const Cvae<float>& model, std::span<const double> z, Spacing spacing = {});
std::vector<Volume> decode_batch(const Cvae<float>& model, const std::vector<std::vector<double>>& zs,
                                 Spacing spacing = {}, int batch_size = 16);

struct EpochLog {
  int epoch = 0;
  double recon = 0.0;  // per-subject mean over the epoch
  double kld = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  Cvae<float> model;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Seeded mini-batch Adam on the beta-VAE loss. Throws NumericError on a non-finite loss.
TrainResult train(const CvaeConfig& config, std::span<const Volume> dataset, const EpochCallback& on_epoch = {});

void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

// Directory with manifest.json plus one little-endian f32 blob per parameter tensor.
void save_checkpoint(const Cvae<float>& model, int epoch, const std::filesystem::path& dir);
Cvae<float> load_checkpoint(const std::filesystem::path& dir);

}  // namespace pdlatent
