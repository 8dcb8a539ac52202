#include "pdlatent/evalpipe.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <thread>
#include <tuple>

#include "pdlatent/error.hpp"

namespace pdlatent {

double Metrics::require_r2() const {
  if (!has_r2()) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "R^2 undefined for constant targets (mae=%.6g rmse=%.6g)", mae, rmse);
    throw NumericError(buf);
  }
  return r2;
}

Metrics metrics(std::span<const double> y, std::span<const double> yhat) {
  if (y.size() != yhat.size()) throw ShapeError("metrics: y and yhat lengths differ");
  if (y.size() < 2) throw ConfigError("metrics need at least 2 samples");
  const double n = static_cast<double>(y.size());
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double abs_sum = 0.0, sq_sum = 0.0, tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = y[i] - yhat[i];
    abs_sum += std::abs(r);
    sq_sum += r * r;
    tot += (y[i] - mean) * (y[i] - mean);
  }
  Metrics m;
  m.mae = abs_sum / n;
  m.rmse = std::sqrt(sq_sum / n);
  m.r2 = tot > 0.0 ? 1.0 - sq_sum / tot : std::numeric_limits<double>::quiet_NaN();
  return m;
}

Folds kfold_split(int n, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("cross-validation needs k >= 2 folds");
  if (n < k) throw ConfigError("cannot split " + std::to_string(n) + " samples into " + std::to_string(k) + " folds");
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  Folds folds(static_cast<std::size_t>(k));
  std::size_t pos = 0;
  for (int f = 0; f < k; ++f) {
    const int size = n / k + (f < n % k ? 1 : 0);
    auto& fold = folds[static_cast<std::size_t>(f)];
    fold.assign(idx.begin() + static_cast<std::ptrdiff_t>(pos), idx.begin() + static_cast<std::ptrdiff_t>(pos) + size);
    std::sort(fold.begin(), fold.end());
    pos += static_cast<std::size_t>(size);
  }
  return folds;
}

Folds group_kfold_split(const std::vector<std::string>& groups, int k, std::uint64_t seed) {
  const std::set<std::string> unique(groups.begin(), groups.end());
  const std::vector<std::string> labels(unique.begin(), unique.end());
  if (static_cast<int>(labels.size()) < k) {
    throw ConfigError("cannot split " + std::to_string(labels.size()) + " subjects into " + std::to_string(k) +
                      " folds");
  }
  const auto gfolds = kfold_split(static_cast<int>(labels.size()), k, seed);
  std::map<std::string, int> fold_of;
  for (std::size_t f = 0; f < gfolds.size(); ++f)
    for (int g : gfolds[f]) fold_of[labels[static_cast<std::size_t>(g)]] = static_cast<int>(f);
  Folds folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < groups.size(); ++i)
    folds[static_cast<std::size_t>(fold_of[groups[i]])].push_back(static_cast<int>(i));
  return folds;
}

std::string label_name(ModelLabel label) {
  switch (label) {
    case ModelLabel::DT: return "DT";
    case ModelLabel::DT_KMF: return "DT(KMF)";
    case ModelLabel::XGB: return "XGB";
    case ModelLabel::XGB_KMF: return "XGB(KMF)";
  }
  return "?";
}

ModelLabel parse_label(const std::string& name) {
  for (auto l : kAllLabels)
    if (label_name(l) == name) return l;
  throw ConfigError("unknown model label '" + name + "' (expected DT, DT(KMF), XGB or XGB(KMF))");
}

bool uses_kmf(ModelLabel label) noexcept { return label == ModelLabel::DT_KMF || label == ModelLabel::XGB_KMF; }
bool uses_gbt(ModelLabel label) noexcept { return label == ModelLabel::XGB || label == ModelLabel::XGB_KMF; }

Folds make_folds(int n, const CvOptions& options) {
  if (!options.groups.empty()) {
    if (static_cast<int>(options.groups.size()) != n) throw ShapeError("group labels do not match the sample count");
    return group_kfold_split(options.groups, options.folds, options.seed);
  }
  return kfold_split(n, options.folds, options.seed);
}

FittedRegressor fit_regressor(const Matrix& mu, std::span<const double> y, ModelLabel label, const CvOptions& options,
                              std::uint64_t kmeans_seed) {
  FittedRegressor m;
  m.label = label;
  if (mu.empty()) throw ConfigError("cannot fit a regressor on zero samples");
  const Matrix* X = &mu;
  Matrix augmented;
  if (uses_kmf(label)) {
    const int d = static_cast<int>(mu.front().size());
    const int k = options.kmeans_k > 0 ? options.kmeans_k : cluster_count(d);
    m.kmeans = fit_kmeans(mu, k, kmeans_seed, options.kmeans);
    augmented = augment_with_kmf(mu, m.kmeans);
    X = &augmented;
  }
  m.ensemble = uses_gbt(label) ? fit_gbt(*X, y, options.gbt) : as_ensemble(fit_cart(*X, y, options.cart));
  return m;
}

Matrix regressor_inputs(const FittedRegressor& model, const Matrix& mu) {
  return uses_kmf(model.label) ? augment_with_kmf(mu, model.kmeans) : mu;
}

namespace {

Matrix take_rows(const Matrix& m, std::span<const int> idx) {
  Matrix out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(m[static_cast<std::size_t>(i)]);
  return out;
}

}  // namespace

CvReport run_cv(const Matrix& mu, std::span<const double> y, const std::string& target, ModelLabel label,
                const CvOptions& options, const FoldFeatureProvider& provider) {
  const int n = static_cast<int>(y.size());
  if (!provider && static_cast<int>(mu.size()) != n) throw ShapeError("feature rows do not match the target count");
  const auto folds = make_folds(n, options);

  CvReport rep;
  rep.target = target;
  rep.label = label;
  rep.predictions.assign(static_cast<std::size_t>(n), 0.0);
  rep.folds.resize(folds.size());
  std::vector<int> dims(folds.size(), 0);

  auto run_fold = [&](std::size_t f) {
    const auto& test = folds[f];
    std::vector<int> train;
    {
      std::vector<char> in_test(static_cast<std::size_t>(n), 0);
      for (int i : test) in_test[static_cast<std::size_t>(i)] = 1;
      for (int i = 0; i < n; ++i)
        if (!in_test[static_cast<std::size_t>(i)]) train.push_back(i);
    }
    Matrix mu_train, mu_test;
    if (provider) {
      std::tie(mu_train, mu_test) = provider(train, test, static_cast<int>(f));
      if (mu_train.size() != train.size() || mu_test.size() != test.size()) {
        throw ShapeError("fold feature provider returned the wrong number of rows");
      }
    } else {
      mu_train = take_rows(mu, train);
      mu_test = take_rows(mu, test);
    }
    if (!mu_train.empty()) dims[f] = static_cast<int>(mu_train.front().size());
    std::vector<double> y_train;
    for (int i : train) y_train.push_back(y[static_cast<std::size_t>(i)]);

    const auto model = fit_regressor(mu_train, y_train, label, options, options.seed + 1000 + f);
    const auto pred = predict_gbt(model.ensemble, regressor_inputs(model, mu_test));
    std::vector<double> y_test;
    for (std::size_t j = 0; j < test.size(); ++j) {
      rep.predictions[static_cast<std::size_t>(test[j])] = pred[j];
      y_test.push_back(y[static_cast<std::size_t>(test[j])]);
    }
    FoldResult& fr = rep.folds[f];
    fr.fold = static_cast<int>(f);
    fr.n_train = static_cast<int>(train.size());
    fr.n_test = static_cast<int>(test.size());
    if (test.size() >= 2) {
      fr.metrics = metrics(y_test, pred);
    } else {
      fr.metrics.mae = fr.metrics.rmse = std::abs(y_test[0] - pred[0]);
      fr.metrics.r2 = std::numeric_limits<double>::quiet_NaN();
    }
  };

  // Folds write disjoint slots, so the result does not depend on the thread count.
  // A provider may hold shared state and always runs on the calling thread.
  const int workers = provider ? 1 : std::clamp(options.threads, 1, static_cast<int>(folds.size()));
  if (workers == 1) {
    for (std::size_t f = 0; f < folds.size(); ++f) run_fold(f);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(folds.size());
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t f; (f = next.fetch_add(1)) < folds.size();) {
          try {
            run_fold(f);
          } catch (...) {
            errors[f] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  for (int d : dims)
    if (d > 0) rep.d = d;
  const auto pooled = metrics(y, rep.predictions);
  rep.mae = pooled.mae;
  rep.rmse = pooled.rmse;
  rep.r2 = pooled.require_r2();
  return rep;
}

std::vector<CvReport> best_of(std::span<const CvReport> reports) {
  if (reports.empty()) throw ConfigError("best_of needs at least one report");
  std::vector<CvReport> best;
  for (const auto& r : reports) {
    auto it = std::find_if(best.begin(), best.end(), [&](const CvReport& b) { return b.target == r.target && b.d == r.d; });
    if (it == best.end()) {
      best.push_back(r);
      continue;
    }
    const bool better = r.r2 > it->r2 || (r.r2 == it->r2 && (r.rmse < it->rmse ||
                                                             (r.rmse == it->rmse && r.label < it->label)));
    if (better) *it = r;
  }
  return best;
}

namespace {

std::string fixed3(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

void write_report_csv(std::span<const CvReport> reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "target,d,model,MAE,RMSE,R2\n";
  for (const auto& r : reports) {
    out << r.target << ',' << r.d << ',' << label_name(r.label) << ',' << fixed3(r.mae) << ',' << fixed3(r.rmse)
        << ',' << fixed3(r.r2) << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

void write_fold_csv(std::span<const CvReport> reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "target,d,model,fold,n_train,n_test,MAE,RMSE,R2\n";
  for (const auto& r : reports) {
    for (const auto& f : r.folds) {
      out << r.target << ',' << r.d << ',' << label_name(r.label) << ',' << f.fold << ',' << f.n_train << ','
          << f.n_test << ',' << fixed3(f.metrics.mae) << ',' << fixed3(f.metrics.rmse) << ','
          << (f.metrics.has_r2() ? fixed3(f.metrics.r2) : std::string("nan")) << '\n';
    }
  }
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace pdlatent
