#include "pdlatent/trees.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "pdlatent/error.hpp"

namespace pdlatent {

int Tree::depth() const {
  if (nodes.empty()) return 0;
  std::vector<int> d(nodes.size(), 0);
  int best = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].is_leaf()) continue;
    d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
    d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
    best = std::max(best, d[i] + 1);
  }
  return best;
}

int Tree::leaf_count() const {
  return static_cast<int>(std::count_if(nodes.begin(), nodes.end(), [](const TreeNode& n) { return n.is_leaf(); }));
}

double predict_tree(const Tree& tree, std::span<const double> x) {
  if (tree.nodes.empty()) throw ModelIntegrityError("empty tree");
  std::size_t i = 0;
  while (!tree.nodes[i].is_leaf()) {
    const auto& n = tree.nodes[i];
    if (static_cast<std::size_t>(n.feature) >= x.size()) {
      throw ShapeError("tree uses feature " + std::to_string(n.feature) + " but the sample has " +
                       std::to_string(x.size()));
    }
    i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right);
  }
  return tree.nodes[i].value;
}

void validate_tree(const Tree& tree, int n_features) {
  const int n = static_cast<int>(tree.nodes.size());
  if (n == 0) throw ModelIntegrityError("tree has no nodes");
  std::vector<int> parents(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    const auto& node = tree.nodes[static_cast<std::size_t>(i)];
    if (!std::isfinite(node.value) || !std::isfinite(node.cover) || node.cover < 0.0) {
      throw ModelIntegrityError("node " + std::to_string(i) + " has a non-finite value or bad cover");
    }
    if (node.is_leaf()) continue;
    if (n_features >= 0 && node.feature >= n_features) {
      throw ModelIntegrityError("node " + std::to_string(i) + " splits on feature " + std::to_string(node.feature));
    }
    if (node.left <= i || node.right <= i || node.left >= n || node.right >= n || node.left == node.right) {
      throw ModelIntegrityError("node " + std::to_string(i) + " has invalid child links");
    }
    if (!std::isfinite(node.threshold)) throw ModelIntegrityError("node " + std::to_string(i) + " threshold");
    ++parents[static_cast<std::size_t>(node.left)];
    ++parents[static_cast<std::size_t>(node.right)];
    const double sum = tree.nodes[static_cast<std::size_t>(node.left)].cover +
                       tree.nodes[static_cast<std::size_t>(node.right)].cover;
    if (std::abs(sum - node.cover) > 1e-9 * std::max(1.0, node.cover)) {
      throw ModelIntegrityError("node " + std::to_string(i) + " cover differs from its children's sum");
    }
  }
  for (int i = 1; i < n; ++i) {
    if (parents[static_cast<std::size_t>(i)] != 1) {
      throw ModelIntegrityError("node " + std::to_string(i) + " is unreachable or shared");
    }
  }
}

void CartParams::validate() const {
  if (max_depth < 0) throw ConfigError("tree max_depth must be >= 0");
  if (min_samples_leaf < 1) throw ConfigError("tree min_samples_leaf must be >= 1");
}

void GbtParams::validate() const {
  if (n_rounds < 0) throw ConfigError("gbt n_rounds must be >= 0");
  if (!(eta > 0.0 && eta <= 1.0)) throw ConfigError("gbt eta must be in (0, 1]");
  if (max_depth < 0) throw ConfigError("gbt max_depth must be >= 0");
  if (!(lambda >= 0.0)) throw ConfigError("gbt lambda must be >= 0");
  if (!(gamma >= 0.0)) throw ConfigError("gbt gamma must be >= 0");
  if (!(min_child_weight >= 0.0)) throw ConfigError("gbt min_child_weight must be >= 0");
}

namespace {

void check_data(const Matrix& X, std::span<const double> y) {
  if (X.empty()) throw ConfigError("cannot fit a tree on empty data");
  if (X.size() != y.size()) throw ShapeError("X has " + std::to_string(X.size()) + " rows but y has " +
                                             std::to_string(y.size()));
  const std::size_t f = X[0].size();
  for (std::size_t i = 0; i < X.size(); ++i) {
    if (X[i].size() != f) throw ShapeError("design matrix rows have mixed widths");
    for (double v : X[i])
      if (!std::isfinite(v)) throw DataError("design matrix contains a non-finite value");
    if (!std::isfinite(y[i])) throw DataError("targets contain a non-finite value");
  }
}

// Shared exact greedy builder. Targets t are the labels (CART) or the gradients (GBT);
// every hessian is 1, so sample counts double as hessian sums.
//   score(S, n) = S^2 / (n + lambda)
//   gain        = scale * (score_L + score_R - score_parent) - gamma
// A split must beat a small multiple of sum(t^2) in the node, which keeps rounding
// noise from splitting pure nodes.
struct Builder {
  const Matrix& X;
  std::vector<double> t;
  int max_depth = 0;
  int min_leaf = 1;
  double min_child_weight = 0.0;
  double lambda = 0.0;
  double gamma = 0.0;
  double scale = 1.0;
  // leaf value from (sum of t, count)
  double (*leaf)(double, double, double, double) = nullptr;
  double leaf_param = 0.0;
  std::vector<TreeNode> nodes;

  Builder(const Matrix& x, std::vector<double> targets) : X(x), t(std::move(targets)) {}

  double score(double s, double n) const { return s * s / (n + lambda); }

  int build(std::vector<std::vector<int>>& sorted, int depth) {
    const auto& rows = sorted[0];
    const double n = static_cast<double>(rows.size());
    double S = 0.0, Q = 0.0;
    for (int r : rows) {
      S += t[static_cast<std::size_t>(r)];
      Q += t[static_cast<std::size_t>(r)] * t[static_cast<std::size_t>(r)];
    }
    const int id = static_cast<int>(nodes.size());
    TreeNode node;
    node.value = leaf(S, n, lambda, leaf_param);
    node.cover = n;
    nodes.push_back(node);
    if (depth >= max_depth || rows.size() < static_cast<std::size_t>(2 * min_leaf)) return id;

    const double parent = score(S, n);
    const double tol = 1e-12 * Q;
    int best_f = -1;
    double best_thr = 0.0, best_gain = tol;
    const std::size_t F = sorted.size();
    for (std::size_t f = 0; f < F; ++f) {
      const auto& order = sorted[f];
      double SL = 0.0;
      for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        const auto r = static_cast<std::size_t>(order[k]);
        SL += t[r];
        const double a = X[r][f];
        const double b = X[static_cast<std::size_t>(order[k + 1])][f];
        if (!(a < b)) continue;
        const double nl = static_cast<double>(k + 1), nr = n - nl;
        if (nl < min_leaf || nr < min_leaf || nl < min_child_weight || nr < min_child_weight) continue;
        const double gain = scale * (score(SL, nl) + score(S - SL, nr) - parent) - gamma;
        // Strict improvement beyond the tolerance keeps the lowest feature / threshold on ties.
        if (gain > best_gain + (best_f < 0 ? 0.0 : tol)) {
          best_gain = gain;
          best_f = static_cast<int>(f);
          best_thr = a + (b - a) / 2.0;
          if (!(best_thr > a)) best_thr = b;
        }
      }
    }
    if (best_f < 0) return id;

    std::vector<std::vector<int>> left(F), right(F);
    for (std::size_t f = 0; f < F; ++f) {
      for (int r : sorted[f]) {
        (X[static_cast<std::size_t>(r)][static_cast<std::size_t>(best_f)] < best_thr ? left[f] : right[f]).push_back(r);
      }
    }
    sorted.clear();
    sorted.shrink_to_fit();
    const int l = build(left, depth + 1);
    const int r = build(right, depth + 1);
    nodes[static_cast<std::size_t>(id)].feature = best_f;
    nodes[static_cast<std::size_t>(id)].threshold = best_thr;
    nodes[static_cast<std::size_t>(id)].left = l;
    nodes[static_cast<std::size_t>(id)].right = r;
    return id;
  }
};

std::vector<std::vector<int>> presort(const Matrix& X) {
  const std::size_t F = X[0].size();
  std::vector<std::vector<int>> sorted(std::max<std::size_t>(F, 1));
  for (std::size_t f = 0; f < sorted.size(); ++f) {
    auto& idx = sorted[f];
    idx.resize(X.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (f < F) {
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return X[static_cast<std::size_t>(a)][f] < X[static_cast<std::size_t>(b)][f];
      });
    }
  }
  return sorted;
}

double mean_leaf(double s, double n, double, double) { return s / n; }
double newton_leaf(double g, double h, double lambda, double eta) {
  const double denom = h + lambda;
  return denom > 0.0 ? -eta * g / denom : 0.0;
}

}  // namespace

Tree fit_cart(const Matrix& X, std::span<const double> y, const CartParams& params) {
  params.validate();
  check_data(X, y);
  Builder b(X, std::vector<double>(y.begin(), y.end()));
  b.max_depth = X[0].empty() ? 0 : params.max_depth;
  b.min_leaf = params.min_samples_leaf;
  b.leaf = mean_leaf;
  auto sorted = presort(X);
  b.build(sorted, 0);
  return Tree{std::move(b.nodes)};
}

TreeEnsemble fit_gbt(const Matrix& X, std::span<const double> y, const GbtParams& params) {
  params.validate();
  check_data(X, y);
  if (X.size() < 2) throw ConfigError("gradient boosting needs at least 2 samples");
  TreeEnsemble ens;
  ens.base_score = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  ens.learning_rate = 1.0;
  std::vector<double> pred(y.size(), ens.base_score);
  const auto sorted0 = presort(X);
  for (int round = 0; round < params.n_rounds; ++round) {
    Builder b(X, std::vector<double>(y.size()));
    for (std::size_t i = 0; i < y.size(); ++i) b.t[i] = pred[i] - y[i];
    b.max_depth = X[0].empty() ? 0 : params.max_depth;
    b.min_leaf = 1;
    b.min_child_weight = params.min_child_weight;
    b.lambda = params.lambda;
    b.gamma = params.gamma;
    b.scale = 0.5;
    b.leaf = newton_leaf;
    b.leaf_param = params.eta;
    auto sorted = sorted0;
    b.build(sorted, 0);
    Tree tree{std::move(b.nodes)};
    for (std::size_t i = 0; i < y.size(); ++i) pred[i] += predict_tree(tree, X[i]);
    ens.trees.push_back(std::move(tree));
  }
  return ens;
}

double predict_gbt(const TreeEnsemble& ens, std::span<const double> x) {
  double acc = 0.0;
  for (const auto& t : ens.trees) acc += predict_tree(t, x);
  return ens.base_score + ens.learning_rate * acc;
}

std::vector<double> predict_gbt(const TreeEnsemble& ens, const Matrix& X) {
  std::vector<double> out;
  out.reserve(X.size());
  for (const auto& row : X) out.push_back(predict_gbt(ens, row));
  return out;
}

TreeEnsemble as_ensemble(Tree tree) {
  TreeEnsemble e;
  e.trees.push_back(std::move(tree));
  return e;
}

std::string ensemble_to_json(const TreeEnsemble& ens) {
  nlohmann::json j;
  j["base_score"] = ens.base_score;
  j["learning_rate"] = ens.learning_rate;
  j["trees"] = nlohmann::json::array();
  for (const auto& t : ens.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : t.nodes) {
      nodes.push_back({{"feature", n.feature},
                       {"threshold", n.threshold},
                       {"left", n.left},
                       {"right", n.right},
                       {"value", n.value},
                       {"cover", n.cover}});
    }
    j["trees"].push_back({{"nodes", nodes}});
  }
  return j.dump(1);
}

TreeEnsemble ensemble_from_json(const std::string& text) {
  TreeEnsemble ens;
  try {
    const auto j = nlohmann::json::parse(text);
    ens.base_score = j.at("base_score").get<double>();
    ens.learning_rate = j.at("learning_rate").get<double>();
    for (const auto& jt : j.at("trees")) {
      Tree t;
      for (const auto& jn : jt.at("nodes")) {
        TreeNode n;
        n.feature = jn.at("feature").get<int>();
        n.threshold = jn.at("threshold").get<double>();
        n.left = jn.at("left").get<int>();
        n.right = jn.at("right").get<int>();
        n.value = jn.at("value").get<double>();
        n.cover = jn.at("cover").get<double>();
        t.nodes.push_back(n);
      }
      ens.trees.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad tree ensemble json: ") + e.what());
  }
  for (const auto& t : ens.trees) validate_tree(t);
  return ens;
}

void save_ensemble(const TreeEnsemble& ens, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << ensemble_to_json(ens) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

TreeEnsemble load_ensemble(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ensemble_from_json(ss.str());
}

}  // namespace pdlatent
