#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace pdlatent {

// Row-major design matrix: X[i] is sample i.
using Matrix = std::vector<std::vector<double>>;

// Leaves have feature == -1. Children always come after their parent in the node array.
struct TreeNode {
  int feature = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
  double cover = 0.0;

  bool is_leaf() const noexcept { return feature < 0; }
};

struct Tree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  int depth() const;
  int leaf_count() const;
};

// Routes left when x[feature] < threshold.
double predict_tree(const Tree& tree, std::span<const double> x);

// Checks child links, ordering and cover additivity; throws ModelIntegrityError.
void validate_tree(const Tree& tree, int n_features = -1);

struct CartParams {
  int max_depth = 4;
  int min_samples_leaf = 1;

  void validate() const;
};

// Exact greedy variance-reduction splits; ties go to the lowest feature, then the
// lowest threshold.
Tree fit_cart(const Matrix& X, std::span<const double> y, const CartParams& params = {});

struct GbtParams {
  int n_rounds = 100;
  double eta = 0.1;
  int max_depth = 3;
  double lambda = 1.0;
  double gamma = 0.0;
  double min_child_weight = 1.0;

  void validate() const;
};

// prediction = base_score + learning_rate * sum of tree outputs.
struct TreeEnsemble {
  double base_score = 0.0;
  double learning_rate = 1.0;
  std::vector<Tree> trees;
};

// Squared-error boosting with the regularised leaf weight -G/(H+lambda). eta is folded
// into the stored leaf values, so the returned ensemble has learning_rate 1.
TreeEnsemble fit_gbt(const Matrix& X, std::span<const double> y, const GbtParams& params = {});

double predict_gbt(const TreeEnsemble& ens, std::span<const double> x);
std::vector<double> predict_gbt(const TreeEnsemble& ens, const Matrix& X);

// A single tree as an ensemble (base 0, rate 1).
TreeEnsemble as_ensemble(Tree tree);

std::string ensemble_to_json(const TreeEnsemble& ens);
TreeEnsemble ensemble_from_json(const std::string& text);
void save_ensemble(const TreeEnsemble& ens, const std::filesystem::path& path);
TreeEnsemble load_ensemble(const std::filesystem::path& path);

}  // namespace pdlatent
