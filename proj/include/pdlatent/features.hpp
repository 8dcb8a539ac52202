#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace pdlatent {

using Point = std::vector<double>;

// max(8, ceil(8 ln D))
int cluster_count(int latent_dim);

struct KMeansOptions {
  int max_iter = 300;
  double tol = 1e-6;  // stop when no center moves further than this
};

struct KMeansModel {
  std::vector<Point> centers;
  double inertia = 0.0;
  // Inertia after each assignment step, ending with the final inertia.
  std::vector<double> inertia_history;
  int iterations = 0;

  int k() const noexcept { return static_cast<int>(centers.size()); }
  int dim() const noexcept { return centers.empty() ? 0 : static_cast<int>(centers.front().size()); }
};

// k-means++ seeding followed by Lloyd iterations. Assignment ties go to the lower
// center index; an empty cluster is re-seeded at the point farthest from its center.
KMeansModel fit_kmeans(std::span<const Point> points, int k, std::uint64_t seed, const KMeansOptions& options = {});

// Euclidean distance to every center.
std::vector<double> kmf_transform(const KMeansModel& model, std::span<const double> point);

// Rows are subjects; columns are named features.
struct FeatureTable {
  std::vector<std::string> subject_ids;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t size() const noexcept { return rows.size(); }
  std::size_t width() const noexcept { return columns.size(); }
};

// mu_0..mu_{D-1}, followed by kmf_0..kmf_{K-1} when a model is given.
FeatureTable make_feature_table(const std::vector<std::string>& ids, const std::vector<Point>& mu,
                                const KMeansModel* kmf = nullptr);
// Appends the KMF distances of each row's first model.dim() columns.
std::vector<std::vector<double>> augment_with_kmf(const std::vector<std::vector<double>>& mu_rows,
                                                  const KMeansModel& model);

void write_feature_csv(const FeatureTable& table, const std::filesystem::path& path);
FeatureTable read_feature_csv(const std::filesystem::path& path);

}  // namespace pdlatent
