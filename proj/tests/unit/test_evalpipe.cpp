#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "pdlatent/error.hpp"
#include "pdlatent/evalpipe.hpp"
#include "test_util.hpp"

using namespace pdlatent;

namespace {

struct Dataset {
  Matrix mu;
  std::vector<double> y;
  std::vector<std::string> ids;
};

Dataset make_dataset(std::mt19937_64& rng, int n, int d) {
  std::normal_distribution<double> g;
  Dataset ds;
  for (int i = 0; i < n; ++i) {
    std::vector<double> row(static_cast<std::size_t>(d));
    for (auto& v : row) v = g(rng);
    ds.y.push_back(2.0 * row[0] - row[1 % d] + 0.2 * g(rng));
    ds.mu.push_back(row);
    char buf[16];
    std::snprintf(buf, sizeof buf, "sub-%04d", i);
    ds.ids.push_back(buf);
  }
  return ds;
}

CvOptions fast_options(std::uint64_t seed) {
  CvOptions o;
  o.seed = seed;
  o.gbt.n_rounds = 20;
  return o;
}

}  // namespace

TEST_CASE("metrics examples") {
  const std::vector<double> y{1, 2, 3};
  const auto perfect = metrics(y, y);
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.rmse == 0.0);
  CHECK(perfect.r2 == 1.0);

  const auto m = metrics(y, std::vector<double>{2, 2, 2});
  CHECK(m.mae == doctest::Approx(2.0 / 3.0));
  CHECK(m.rmse == doctest::Approx(std::sqrt(2.0 / 3.0)));
  CHECK(m.rmse == doctest::Approx(0.8165).epsilon(1e-4));
  CHECK(m.r2 == doctest::Approx(0.0));

  const auto m2 = metrics(std::vector<double>{0, 2}, std::vector<double>{1, 1});
  CHECK(m2.mae == 1.0);
  CHECK(m2.rmse == 1.0);
  CHECK(m2.r2 == 0.0);

  const auto c = metrics(std::vector<double>{5, 5, 5}, std::vector<double>{4, 5, 6});
  CHECK_FALSE(c.has_r2());
  CHECK(c.mae == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(c.require_r2(), NumericError);
  CHECK_THROWS_AS(metrics(std::vector<double>{1}, std::vector<double>{1}), ConfigError);
  CHECK_THROWS_AS(metrics(y, std::vector<double>{1, 2}), ShapeError);
}

TEST_CASE("rmse is at least mae") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> g;
  for (int t = 0; t < 500; ++t) {
    const int n = 2 + t % 30;
    std::vector<double> y(n), p(n);
    for (int i = 0; i < n; ++i) {
      y[i] = g(rng);
      p[i] = t % 5 == 0 ? y[i] + 0.5 : g(rng);
    }
    const auto m = metrics(y, p);
    REQUIRE(m.rmse >= m.mae * (1 - 1e-15));
    REQUIRE(m.mae >= 0.0);
  }
}

TEST_CASE("kfold split examples") {
  const auto f20 = kfold_split(20, 10, 1);
  for (const auto& f : f20) CHECK(f.size() == 2);
  const auto f23 = kfold_split(23, 10, 1);
  int threes = 0, twos = 0;
  for (const auto& f : f23) (f.size() == 3 ? threes : twos) += 1;
  CHECK(threes == 3);
  CHECK(twos == 7);
  CHECK(kfold_split(23, 10, 7) == kfold_split(23, 10, 7));
  CHECK(kfold_split(23, 10, 7) != kfold_split(23, 10, 8));
  CHECK_THROWS_AS(kfold_split(5, 10, 0), ConfigError);
  CHECK_THROWS_AS(kfold_split(5, 1, 0), ConfigError);
}

TEST_CASE("folds are disjoint and complete") {
  std::mt19937_64 rng(32);
  std::uniform_int_distribution<int> un(2, 300);
  for (int t = 0; t < 200; ++t) {
    const int n = un(rng);
    const int k = std::min(n, 2 + t % 12);
    const auto folds = kfold_split(n, k, static_cast<std::uint64_t>(t));
    std::vector<int> seen(n, 0);
    for (const auto& f : folds) {
      REQUIRE((f.size() == static_cast<std::size_t>(n / k) || f.size() == static_cast<std::size_t>((n + k - 1) / k)));
      for (int i : f) ++seen[i];
    }
    for (int s : seen) REQUIRE(s == 1);
  }
}

TEST_CASE("group folds keep a subject together") {
  std::vector<std::string> groups;
  for (int s = 0; s < 15; ++s)
    for (int v = 0; v < 1 + s % 3; ++v) groups.push_back("sub-" + std::to_string(s));
  const auto folds = group_kfold_split(groups, 5, 3);
  std::size_t total = 0;
  std::set<std::string> all;
  for (const auto& f : folds) {
    std::set<std::string> mine;
    for (int i : f) mine.insert(groups[i]);
    for (const auto& g : mine) CHECK(all.insert(g).second);
    total += f.size();
  }
  CHECK(total == groups.size());
  CHECK_THROWS_AS(group_kfold_split(groups, 16, 0), ConfigError);
}

TEST_CASE("labels") {
  for (auto l : kAllLabels) CHECK(parse_label(label_name(l)) == l);
  CHECK(label_name(ModelLabel::XGB_KMF) == "XGB(KMF)");
  CHECK(uses_kmf(ModelLabel::DT_KMF));
  CHECK_FALSE(uses_kmf(ModelLabel::XGB));
  CHECK(uses_gbt(ModelLabel::XGB));
  CHECK_THROWS_AS(parse_label("RF"), ConfigError);
}

TEST_CASE("cv recovers a target equal to a feature") {
  std::mt19937_64 rng(33);
  auto ds = make_dataset(rng, 200, 3);
  for (std::size_t i = 0; i < ds.y.size(); ++i) ds.y[i] = ds.mu[i][0];
  CvOptions o = fast_options(1);
  o.cart.max_depth = 8;
  const auto rep = run_cv(ds.mu, ds.y, "x0", ModelLabel::DT, o);
  CHECK(rep.r2 >= 0.99);
  CHECK(rep.rmse >= rep.mae);
  CHECK(rep.d == 3);
  int total = 0;
  for (const auto& f : rep.folds) total += f.n_test;
  CHECK(total == 200);
  CHECK(rep.folds.size() == 10);
}

TEST_CASE("every label runs and kmf adds columns") {
  std::mt19937_64 rng(34);
  const auto ds = make_dataset(rng, 120, 3);
  const auto o = fast_options(2);
  for (auto l : kAllLabels) {
    const auto rep = run_cv(ds.mu, ds.y, "t", l, o);
    CHECK(rep.label == l);
    CHECK(rep.r2 > 0.3);
    CHECK(rep.rmse >= rep.mae);
    int total = 0;
    for (const auto& f : rep.folds) total += f.n_test;
    CHECK(total == 120);
  }
  const auto m = fit_regressor(ds.mu, ds.y, ModelLabel::XGB_KMF, o, 5);
  CHECK(m.kmeans.k() == cluster_count(3));
  CHECK(regressor_inputs(m, ds.mu)[0].size() == 3 + 9);
}

TEST_CASE("pooled metrics are invariant to subject order") {
  std::mt19937_64 rng(35);
  const auto ds = make_dataset(rng, 100, 4);
  std::vector<int> perm(100);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Dataset sh;
  for (int i : perm) {
    sh.mu.push_back(ds.mu[i]);
    sh.y.push_back(ds.y[i]);
    sh.ids.push_back(ds.ids[i]);
  }
  for (auto l : {ModelLabel::DT, ModelLabel::XGB}) {
    auto o = fast_options(9);
    o.groups = ds.ids;
    const auto a = run_cv(ds.mu, ds.y, "t", l, o);
    o.groups = sh.ids;
    const auto b = run_cv(sh.mu, sh.y, "t", l, o);
    CHECK(a.mae == doctest::Approx(b.mae).epsilon(1e-9));
    CHECK(a.rmse == doctest::Approx(b.rmse).epsilon(1e-9));
    CHECK(a.r2 == doctest::Approx(b.r2).epsilon(1e-9));
  }
}

TEST_CASE("in-sample memorisation gives r2 of one") {
  std::mt19937_64 rng(36);
  const auto ds = make_dataset(rng, 80, 2);
  const auto tree = fit_cart(ds.mu, ds.y, {30, 1});
  const auto pred = predict_gbt(as_ensemble(tree), ds.mu);
  CHECK(metrics(ds.y, pred).r2 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("fold feature provider sees train and test splits") {
  std::mt19937_64 rng(37);
  const auto ds = make_dataset(rng, 60, 2);
  int calls = 0;
  const FoldFeatureProvider provider = [&](std::span<const int> train, std::span<const int> test, int fold) {
    CHECK(fold == calls++);
    CHECK(train.size() + test.size() == 60);
    for (int i : test) CHECK(std::find(train.begin(), train.end(), i) == train.end());
    Matrix a, b;
    for (int i : train) a.push_back(ds.mu[i]);
    for (int i : test) b.push_back(ds.mu[i]);
    return std::make_pair(a, b);
  };
  const auto o = fast_options(4);
  const auto with = run_cv({}, ds.y, "t", ModelLabel::XGB, o, provider);
  const auto without = run_cv(ds.mu, ds.y, "t", ModelLabel::XGB, o);
  CHECK(calls == 10);
  CHECK(with.predictions == without.predictions);
}

TEST_CASE("thread count does not change results") {
  std::mt19937_64 rng(38);
  const auto ds = make_dataset(rng, 70, 3);
  auto o = fast_options(6);
  for (auto l : kAllLabels) {
    o.threads = 1;
    const auto a = run_cv(ds.mu, ds.y, "t", l, o);
    o.threads = 4;
    const auto b = run_cv(ds.mu, ds.y, "t", l, o);
    CHECK(a.predictions == b.predictions);
    CHECK(a.r2 == b.r2);
    REQUIRE(a.folds.size() == b.folds.size());
    for (std::size_t f = 0; f < a.folds.size(); ++f) CHECK(a.folds[f].metrics.rmse == b.folds[f].metrics.rmse);
  }
}

TEST_CASE("best_of tie rules") {
  CvReport a, b, c;
  a.target = b.target = c.target = "updrs_total";
  a.d = b.d = c.d = 20;
  a.r2 = 0.1;
  b.r2 = 0.26;
  b.rmse = 15.6;
  b.label = ModelLabel::DT;
  CHECK(best_of(std::vector<CvReport>{a})[0].r2 == 0.1);
  CHECK(best_of(std::vector<CvReport>{a, b})[0].r2 == 0.26);
  c = b;
  c.rmse = 15.51;
  c.label = ModelLabel::XGB;
  auto best = best_of(std::vector<CvReport>{b, c});
  CHECK(best[0].rmse == 15.51);
  c.rmse = 15.6;
  best = best_of(std::vector<CvReport>{c, b});
  CHECK(best[0].label == ModelLabel::DT);
  CvReport other = a;
  other.d = 3;
  CHECK(best_of(std::vector<CvReport>{a, b, other}).size() == 2);
  CHECK_THROWS_AS(best_of(std::vector<CvReport>{}), ConfigError);
}

TEST_CASE("report csv has the table shape") {
  TempDir dir;
  CvReport r;
  r.target = "updrs_total";
  r.d = 20;
  r.label = ModelLabel::XGB;
  r.mae = 12.2104;
  r.rmse = 15.5149;
  r.r2 = 0.2649;
  r.folds.push_back({0, 9, 1, {1.0, 1.0, std::nan("")}});
  const std::vector<CvReport> reps{r};
  write_report_csv(reps, dir.path / "r.csv");
  write_fold_csv(reps, dir.path / "f.csv");
  std::ifstream in(dir.path / "r.csv"), fin(dir.path / "f.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "target,d,model,MAE,RMSE,R2");
  std::getline(in, line);
  CHECK(line == "updrs_total,20,XGB,12.210,15.515,0.265");
  std::getline(fin, line);
  std::getline(fin, line);
  CHECK(line == "updrs_total,20,XGB,0,9,1,1.000,1.000,nan");
}
