#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pdlatent/cvae.hpp"
#include "pdlatent/evalpipe.hpp"
#include "pdlatent/manifold.hpp"
#include "pdlatent/phantom.hpp"

namespace pdlatent {

enum class FitMode { All, TrainFolds };
enum class SplitMode { Subject, Row };

// Every key of the INI file. Sections: run, phantom, preprocess, cvae, features, trees,
// cv, shap, manifold. Keys documented as "auto" accept that literal.
struct PipelineConfig {
  // [run]
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "runs/default";
  int threads = 1;
  VolumeFormat format = VolumeFormat::RawF32;

  // [phantom]
  std::filesystem::path input_manifest;  // non-empty: ingest this cohort instead of generating one
  int n = 64;
  Dims dims{32, 40, 32};
  Spacing spacing{4.0, 4.0, 4.0};
  double noise_sigma = 0.05;
  FactorRanges ranges;
  ScoreModel scores;

  // [preprocess]
  std::optional<Dims> target_dims;  // auto: keep the input dims
  int downsample = 1;
  bool compress = true;
  double compress_percentile = 97.5;
  std::optional<double> tau;  // auto: percentile of the normalised volume
  std::optional<double> w;    // auto: tau / 2

  // [cvae]
  int latent_dim = 8;
  double beta = 1.0;
  double lr = 1e-3;
  int epochs = 400;
  int batch_size = 16;
  std::vector<int> channels{32, 64, 128, 256};
  int hidden = 512;

  // [features]
  int kmeans_k = 0;  // 0 = auto
  int kmeans_max_iter = 300;
  double kmeans_tol = 1e-6;

  // [trees]
  CartParams cart;
  GbtParams gbt;

  // [cv]
  int folds = 10;
  std::vector<std::string> targets{"updrs1", "updrs2", "updrs3", "updrs4", "updrs_total"};
  std::vector<ModelLabel> models{kAllLabels[0], kAllLabels[1], kAllLabels[2], kAllLabels[3]};
  FitMode fit_mode = FitMode::All;
  SplitMode split = SplitMode::Subject;

  // [shap]
  std::string shap_target = "updrs_total";
  ModelLabel shap_model = ModelLabel::XGB_KMF;
  int shap_feature = -1;  // -1 = auto (top-ranked)
  int shap_color = -1;    // -1 = auto (next-ranked)

  // [manifold]
  int grid = 7;
  double grid_lo = -3.0;
  double grid_hi = 3.0;
  int feat_a = -1;  // -1 = auto (latent most correlated with amplitude)
  int feat_b = -1;  // -1 = auto (second most correlated)
  SliceAxis axis = SliceAxis::Axial;
  int slice = -1;  // -1 = auto (striatal centroid)

  // Throws ConfigError on out-of-range values.
  void validate() const;

  Dims model_dims() const;
  CvaeConfig cvae_config(std::uint64_t seed) const;
  CvOptions cv_options(std::uint64_t seed) const;
};

// Unknown sections or keys are a ConfigError.
PipelineConfig parse_config(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);

// Canonical INI text listing every key; equal configs give equal text.
std::string config_to_ini(const PipelineConfig& config);
// FNV-1a 64 of the canonical text, as 16 hex digits.
std::string config_hash(const PipelineConfig& config);

}  // namespace pdlatent
