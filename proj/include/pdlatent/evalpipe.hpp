#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pdlatent/features.hpp"
#include "pdlatent/trees.hpp"

namespace pdlatent {

struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  double r2 = 0.0;  // NaN when the targets are constant

  bool has_r2() const noexcept { return r2 == r2; }
  // Throws NumericError when R² is undefined.
  double require_r2() const;
};

Metrics metrics(std::span<const double> y, std::span<const double> yhat);

using Folds = std::vector<std::vector<int>>;

// Seeded shuffle, then contiguous chunks; the first n % k folds get one extra index.
// Indices inside each fold are sorted.
Folds kfold_split(int n, int k, std::uint64_t seed);

// Folds over distinct group labels (sorted), expanded back to row indices, so every
// row of a subject lands in the same fold.
Folds group_kfold_split(const std::vector<std::string>& groups, int k, std::uint64_t seed);

enum class ModelLabel { DT, DT_KMF, XGB, XGB_KMF };
inline constexpr ModelLabel kAllLabels[] = {ModelLabel::DT, ModelLabel::DT_KMF, ModelLabel::XGB, ModelLabel::XGB_KMF};

std::string label_name(ModelLabel label);
ModelLabel parse_label(const std::string& name);
bool uses_kmf(ModelLabel label) noexcept;
bool uses_gbt(ModelLabel label) noexcept;

struct CvOptions {
  int folds = 10;
  std::uint64_t seed = 0;
  CartParams cart;
  GbtParams gbt;
  int kmeans_k = 0;  // 0 = cluster_count(D)
  KMeansOptions kmeans;
  // When non-empty, folds split these labels instead of rows.
  std::vector<std::string> groups;
  int threads = 1;  // folds evaluated concurrently when no provider is given
};

// Latent features for one fold: (train rows, test rows). The default slices the
// matrix passed to run_cv; a provider can instead fit an encoder on the train split.
using FoldFeatureProvider =
    std::function<std::pair<Matrix, Matrix>(std::span<const int> train, std::span<const int> test, int fold)>;

struct FoldResult {
  int fold = 0;
  int n_train = 0;
  int n_test = 0;
  Metrics metrics;
};

struct CvReport {
  std::string target;
  int d = 0;
  ModelLabel label = ModelLabel::DT;
  double mae = 0.0;
  double rmse = 0.0;
  double r2 = 0.0;
  std::vector<FoldResult> folds;
  std::vector<double> predictions;  // pooled held-out predictions, row order
};

Folds make_folds(int n, const CvOptions& options);

CvReport run_cv(const Matrix& mu, std::span<const double> y, const std::string& target, ModelLabel label,
                const CvOptions& options, const FoldFeatureProvider& provider = {});

// Fits the requested model on (X, y). KMF variants also return the k-means model.
struct FittedRegressor {
  ModelLabel label = ModelLabel::DT;
  TreeEnsemble ensemble;
  KMeansModel kmeans;  // empty unless uses_kmf(label)
};

FittedRegressor fit_regressor(const Matrix& mu, std::span<const double> y, ModelLabel label, const CvOptions& options,
                              std::uint64_t kmeans_seed);
// Design-matrix rows the regressor consumes (mu, plus KMF columns when applicable).
Matrix regressor_inputs(const FittedRegressor& model, const Matrix& mu);

// Best report per (target, d) by R², then lower RMSE, then label order.
std::vector<CvReport> best_of(std::span<const CvReport> reports);

void write_report_csv(std::span<const CvReport> reports, const std::filesystem::path& path);
void write_fold_csv(std::span<const CvReport> reports, const std::filesystem::path& path);

}  // namespace pdlatent
