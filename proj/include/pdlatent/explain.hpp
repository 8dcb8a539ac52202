#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pdlatent/trees.hpp"

namespace pdlatent {

struct Attribution {
  double base_value = 0.0;
  std::vector<double> phi;
  double prediction = 0.0;
};

// Exact Shapley values under path-dependent conditioning: features outside S are
// marginalised by descending both children weighted by cover.
Attribution tree_shap(const TreeEnsemble& ens, std::span<const double> x);
std::vector<Attribution> tree_shap(const TreeEnsemble& ens, const Matrix& X);

// Same value function, evaluated by enumerating all 2^F subsets. Test oracle; refuses F > 12.
Attribution brute_shap_oracle(const TreeEnsemble& ens, std::span<const double> x);

struct ImportanceEntry {
  int feature = 0;
  double mean_abs_shap = 0.0;
};

// Descending mean |phi|, ties by feature index.
std::vector<ImportanceEntry> importance(std::span<const Attribution> attributions);

struct DependenceRow {
  double x_f = 0.0;
  double phi_f = 0.0;
  double x_c = 0.0;
};

// One row per sample, sorted by x_f (stable).
std::vector<DependenceRow> dependence_export(std::span<const Attribution> attributions, const Matrix& X, int f, int c);

// Highest-ranked feature other than f; f itself when it is the only feature.
int default_color_feature(std::span<const ImportanceEntry> ranked, int f);

void write_attribution_csv(std::span<const Attribution> attributions, const std::vector<std::string>& subject_ids,
                           const std::filesystem::path& path);
void write_importance_csv(std::span<const ImportanceEntry> ranked, const std::vector<std::string>& feature_names,
                          const std::filesystem::path& path);
void write_dependence_csv(std::span<const DependenceRow> rows, const std::filesystem::path& path);

}  // namespace pdlatent
