#include "pdlatent/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "pdlatent/error.hpp"

namespace pdlatent {

namespace {

void check_tree(const Tree& tree, std::size_t n_features) {
  if (tree.nodes.empty()) throw ModelIntegrityError("tree has no nodes");
  for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
    const auto& n = tree.nodes[i];
    if (n.is_leaf()) continue;
    if (!(n.cover > 0.0)) throw ModelIntegrityError("internal node " + std::to_string(i) + " has zero cover");
    if (static_cast<std::size_t>(n.feature) >= n_features) {
      throw ShapeError("tree splits on feature " + std::to_string(n.feature) + " but x has " +
                       std::to_string(n_features) + " features");
    }
    if (n.left <= static_cast<int>(i) || n.right <= static_cast<int>(i) ||
        static_cast<std::size_t>(std::max(n.left, n.right)) >= tree.nodes.size()) {
      throw ModelIntegrityError("node " + std::to_string(i) + " has invalid child links");
    }
  }
}

// Each leaf's contribution to v(S) is value * prod_u (u in S ? hit_u : frac_u) over the
// distinct features u on its path, so its Shapley values only involve those features.
struct PathFeature {
  int feature;
  double hit;   // 1 if x follows the path at every node on this feature, else 0
  double frac;  // product of cover ratios along the path at those nodes
};

void leaf_shapley(double value, const std::vector<PathFeature>& path, std::vector<double>& phi) {
  const int m = static_cast<int>(path.size());
  if (m == 0) return;
  // weights[s] = s!(m-s-1)!/m!
  std::vector<double> w(static_cast<std::size_t>(m));
  for (int s = 0; s < m; ++s) {
    double v = 1.0 / m;
    for (int k = 1; k <= s; ++k) v *= static_cast<double>(k) / static_cast<double>(m - k);
    w[static_cast<std::size_t>(s)] = v;
  }
  const unsigned full = 1u << m;
  std::vector<double> g(full);
  for (unsigned mask = 0; mask < full; ++mask) {
    double p = value;
    for (int j = 0; j < m; ++j) p *= (mask >> j) & 1u ? path[static_cast<std::size_t>(j)].hit : path[static_cast<std::size_t>(j)].frac;
    g[mask] = p;
  }
  for (int j = 0; j < m; ++j) {
    const unsigned bit = 1u << j;
    double acc = 0.0;
    for (unsigned mask = 0; mask < full; ++mask) {
      if (mask & bit) continue;
      acc += w[static_cast<std::size_t>(__builtin_popcount(mask))] * (g[mask | bit] - g[mask]);
    }
    phi[static_cast<std::size_t>(path[static_cast<std::size_t>(j)].feature)] += acc;
  }
}

void walk(const Tree& tree, int node, std::span<const double> x, std::vector<PathFeature>& path, double& base,
          std::vector<double>& phi) {
  const auto& n = tree.nodes[static_cast<std::size_t>(node)];
  if (n.is_leaf()) {
    double b = n.value;
    for (const auto& p : path) b *= p.frac;
    base += b;
    leaf_shapley(n.value, path, phi);
    return;
  }
  const bool goes_left = x[static_cast<std::size_t>(n.feature)] < n.threshold;
  for (int side = 0; side < 2; ++side) {
    const int child = side == 0 ? n.left : n.right;
    const double ratio = tree.nodes[static_cast<std::size_t>(child)].cover / n.cover;
    const double hit = (side == 0) == goes_left ? 1.0 : 0.0;
    auto it = std::find_if(path.begin(), path.end(), [&](const PathFeature& p) { return p.feature == n.feature; });
    if (it != path.end()) {
      const PathFeature saved = *it;
      it->hit *= hit;
      it->frac *= ratio;
      walk(tree, child, x, path, base, phi);
      *std::find_if(path.begin(), path.end(), [&](const PathFeature& p) { return p.feature == n.feature; }) = saved;
    } else {
      path.push_back({n.feature, hit, ratio});
      walk(tree, child, x, path, base, phi);
      path.pop_back();
    }
  }
}

// v(S) for one tree: follow x on features in S, split by cover elsewhere.
double expected_value(const Tree& tree, int node, std::span<const double> x, const std::vector<bool>& in_s) {
  const auto& n = tree.nodes[static_cast<std::size_t>(node)];
  if (n.is_leaf()) return n.value;
  if (in_s[static_cast<std::size_t>(n.feature)]) {
    return expected_value(tree, x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right, x, in_s);
  }
  const auto& l = tree.nodes[static_cast<std::size_t>(n.left)];
  const auto& r = tree.nodes[static_cast<std::size_t>(n.right)];
  return (l.cover * expected_value(tree, n.left, x, in_s) + r.cover * expected_value(tree, n.right, x, in_s)) /
         n.cover;
}

}  // namespace

Attribution tree_shap(const TreeEnsemble& ens, std::span<const double> x) {
  Attribution a;
  a.phi.assign(x.size(), 0.0);
  double base = 0.0;
  std::vector<PathFeature> path;
  for (const auto& t : ens.trees) {
    check_tree(t, x.size());
    walk(t, 0, x, path, base, a.phi);
  }
  for (double& p : a.phi) p *= ens.learning_rate;
  a.base_value = ens.base_score + ens.learning_rate * base;
  a.prediction = predict_gbt(ens, x);
  return a;
}

std::vector<Attribution> tree_shap(const TreeEnsemble& ens, const Matrix& X) {
  std::vector<Attribution> out;
  out.reserve(X.size());
  for (const auto& row : X) out.push_back(tree_shap(ens, row));
  return out;
}

Attribution brute_shap_oracle(const TreeEnsemble& ens, std::span<const double> x) {
  const std::size_t F = x.size();
  if (F > 12) throw ConfigError("brute-force Shapley oracle refuses F=" + std::to_string(F) + " (limit 12)");
  for (const auto& t : ens.trees) check_tree(t, F);
  const unsigned full = 1u << F;
  std::vector<double> v(full, 0.0);
  std::vector<bool> in_s(F);
  for (unsigned mask = 0; mask < full; ++mask) {
    for (std::size_t f = 0; f < F; ++f) in_s[f] = (mask >> f) & 1u;
    double acc = 0.0;
    for (const auto& t : ens.trees) acc += expected_value(t, 0, x, in_s);
    v[mask] = ens.base_score + ens.learning_rate * acc;
  }
  std::vector<double> fact(F + 1, 1.0);
  for (std::size_t k = 1; k <= F; ++k) fact[k] = fact[k - 1] * static_cast<double>(k);
  Attribution a;
  a.phi.assign(F, 0.0);
  for (std::size_t f = 0; f < F; ++f) {
    for (unsigned mask = 0; mask < full; ++mask) {
      if ((mask >> f) & 1u) continue;
      const auto s = static_cast<std::size_t>(__builtin_popcount(mask));
      a.phi[f] += fact[s] * fact[F - s - 1] / fact[F] * (v[mask | (1u << f)] - v[mask]);
    }
  }
  a.base_value = v[0];
  a.prediction = v[full - 1];
  return a;
}

std::vector<ImportanceEntry> importance(std::span<const Attribution> attributions) {
  if (attributions.empty()) throw DataError("importance needs at least one attribution");
  const std::size_t F = attributions.front().phi.size();
  std::vector<ImportanceEntry> out(F);
  for (std::size_t f = 0; f < F; ++f) out[f].feature = static_cast<int>(f);
  for (const auto& a : attributions) {
    if (a.phi.size() != F) throw ShapeError("attributions have mixed feature counts");
    for (std::size_t f = 0; f < F; ++f) out[f].mean_abs_shap += std::abs(a.phi[f]);
  }
  for (auto& e : out) e.mean_abs_shap /= static_cast<double>(attributions.size());
  std::stable_sort(out.begin(), out.end(),
                   [](const ImportanceEntry& a, const ImportanceEntry& b) { return a.mean_abs_shap > b.mean_abs_shap; });
  return out;
}

std::vector<DependenceRow> dependence_export(std::span<const Attribution> attributions, const Matrix& X, int f,
                                             int c) {
  if (attributions.size() != X.size()) throw ShapeError("attribution count differs from sample count");
  std::vector<DependenceRow> rows;
  rows.reserve(X.size());
  for (std::size_t i = 0; i < X.size(); ++i) {
    const auto& a = attributions[i];
    if (f < 0 || c < 0 || static_cast<std::size_t>(std::max(f, c)) >= std::min(X[i].size(), a.phi.size())) {
      throw ShapeError("dependence feature index out of range");
    }
    rows.push_back({X[i][static_cast<std::size_t>(f)], a.phi[static_cast<std::size_t>(f)], X[i][static_cast<std::size_t>(c)]});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const DependenceRow& a, const DependenceRow& b) { return a.x_f < b.x_f; });
  return rows;
}

int default_color_feature(std::span<const ImportanceEntry> ranked, int f) {
  for (const auto& e : ranked)
    if (e.feature != f) return e.feature;
  return f;
}

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

}  // namespace

void write_attribution_csv(std::span<const Attribution> attributions, const std::vector<std::string>& subject_ids,
                           const std::filesystem::path& path) {
  if (subject_ids.size() != attributions.size()) throw ShapeError("subject id count differs from attribution count");
  auto out = open_out(path);
  const std::size_t F = attributions.empty() ? 0 : attributions.front().phi.size();
  out << "subject_id,base_value";
  for (std::size_t f = 0; f < F; ++f) out << ",phi_" << f;
  out << ",prediction\n";
  for (std::size_t i = 0; i < attributions.size(); ++i) {
    out << subject_ids[i] << ',' << num(attributions[i].base_value);
    for (double p : attributions[i].phi) out << ',' << num(p);
    out << ',' << num(attributions[i].prediction) << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

void write_importance_csv(std::span<const ImportanceEntry> ranked, const std::vector<std::string>& feature_names,
                          const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "rank,feature,mean_abs_shap\n";
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const auto f = static_cast<std::size_t>(ranked[r].feature);
    out << r + 1 << ',' << (f < feature_names.size() ? feature_names[f] : std::to_string(f)) << ','
        << num(ranked[r].mean_abs_shap) << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

void write_dependence_csv(std::span<const DependenceRow> rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "x_f,phi_f,x_c\n";
  for (const auto& r : rows) out << num(r.x_f) << ',' << num(r.phi_f) << ',' << num(r.x_c) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace pdlatent
