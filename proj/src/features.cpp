#include "pdlatent/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "pdlatent/error.hpp"

namespace pdlatent {

int cluster_count(int latent_dim) {
  if (latent_dim < 1) throw ConfigError("latent dimension must be >= 1");
  return std::max(8, static_cast<int>(std::ceil(8.0 * std::log(static_cast<double>(latent_dim)))));
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc;
}

std::vector<Point> plus_plus_seed(std::span<const Point> pts, int k, std::mt19937_64& rng) {
  const std::size_t n = pts.size();
  std::vector<Point> centers;
  centers.push_back(pts[std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)]);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(pts[i], centers[0]);
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    if (total > 0.0) {
      const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      double run = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        run += d2[i];
        if (u < run && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    }
    centers.push_back(pts[pick]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(pts[i], centers.back()));
  }
  return centers;
}

// Nearest center, lowest index on ties.
int nearest(const std::vector<Point>& centers, std::span<const double> p, double* dist2) {
  int best = 0;
  double bd = sq_dist(p, centers[0]);
  for (std::size_t c = 1; c < centers.size(); ++c) {
    const double d = sq_dist(p, centers[c]);
    if (d < bd) {
      bd = d;
      best = static_cast<int>(c);
    }
  }
  if (dist2) *dist2 = bd;
  return best;
}

}  // namespace

KMeansModel fit_kmeans(std::span<const Point> points, int k, std::uint64_t seed, const KMeansOptions& options) {
  if (k < 1) throw ConfigError("k-means needs k >= 1");
  if (points.size() < static_cast<std::size_t>(k)) {
    throw ConfigError("k-means needs at least k=" + std::to_string(k) + " points, got " +
                      std::to_string(points.size()));
  }
  const std::size_t dim = points[0].size();
  for (const auto& p : points) {
    if (p.size() != dim) throw ShapeError("k-means points have mixed dimensions");
    for (double v : p)
      if (!std::isfinite(v)) throw DataError("k-means input contains a non-finite value");
  }
  if (options.max_iter < 1) throw ConfigError("k-means max_iter must be >= 1");

  std::mt19937_64 rng(seed);
  KMeansModel m;
  m.centers = plus_plus_seed(points, k, rng);
  const std::size_t n = points.size();
  std::vector<int> assign(n);
  std::vector<double> d2(n);

  for (int it = 0; it < options.max_iter; ++it) {
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = nearest(m.centers, points[i], &d2[i]);
      ++counts[static_cast<std::size_t>(assign[i])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      // Farthest point among clusters that can spare one; lowest index on ties.
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[static_cast<std::size_t>(assign[i])] < 2) continue;
        if (far == n || d2[i] > d2[far]) far = i;
      }
      if (far == n) break;
      --counts[static_cast<std::size_t>(assign[far])];
      m.centers[static_cast<std::size_t>(c)] = points[far];
      assign[far] = c;
      d2[far] = 0.0;
      ++counts[static_cast<std::size_t>(c)];
    }
    double inertia = 0.0;
    for (double v : d2) inertia += v;
    m.inertia_history.push_back(inertia);

    std::vector<Point> next(static_cast<std::size_t>(k), Point(dim, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dim; ++j) next[static_cast<std::size_t>(assign[i])][j] += points[i][j];
    double shift = 0.0;
    for (int c = 0; c < k; ++c) {
      auto& ctr = next[static_cast<std::size_t>(c)];
      const int cnt = counts[static_cast<std::size_t>(c)];
      if (cnt == 0) {
        ctr = m.centers[static_cast<std::size_t>(c)];
        continue;
      }
      for (double& v : ctr) v /= cnt;
      shift = std::max(shift, std::sqrt(sq_dist(ctr, m.centers[static_cast<std::size_t>(c)])));
    }
    m.centers = std::move(next);
    m.iterations = it + 1;
    if (shift < options.tol) break;
  }

  m.inertia = 0.0;
  for (const auto& p : points) {
    double d = 0.0;
    nearest(m.centers, p, &d);
    m.inertia += d;
  }
  m.inertia_history.push_back(m.inertia);
  return m;
}

std::vector<double> kmf_transform(const KMeansModel& model, std::span<const double> point) {
  if (point.size() != static_cast<std::size_t>(model.dim())) {
    throw ShapeError("kmf_transform: point has " + std::to_string(point.size()) + " dims, centers have " +
                     std::to_string(model.dim()));
  }
  std::vector<double> out;
  out.reserve(model.centers.size());
  for (const auto& c : model.centers) out.push_back(std::sqrt(sq_dist(point, c)));
  return out;
}

std::vector<std::vector<double>> augment_with_kmf(const std::vector<std::vector<double>>& mu_rows,
                                                  const KMeansModel& model) {
  std::vector<std::vector<double>> out;
  out.reserve(mu_rows.size());
  const auto d = static_cast<std::size_t>(model.dim());
  for (const auto& row : mu_rows) {
    if (row.size() < d) throw ShapeError("feature row shorter than the k-means dimension");
    auto r = row;
    const auto f = kmf_transform(model, std::span<const double>(row.data(), d));
    r.insert(r.end(), f.begin(), f.end());
    out.push_back(std::move(r));
  }
  return out;
}

FeatureTable make_feature_table(const std::vector<std::string>& ids, const std::vector<Point>& mu,
                                const KMeansModel* kmf) {
  if (ids.size() != mu.size()) throw ShapeError("subject id count differs from latent code count");
  FeatureTable t;
  t.subject_ids = ids;
  const std::size_t d = mu.empty() ? 0 : mu.front().size();
  for (std::size_t j = 0; j < d; ++j) t.columns.push_back("mu_" + std::to_string(j));
  if (kmf) {
    for (int j = 0; j < kmf->k(); ++j) t.columns.push_back("kmf_" + std::to_string(j));
    t.rows = augment_with_kmf(mu, *kmf);
  } else {
    t.rows = mu;
  }
  for (const auto& r : t.rows)
    if (r.size() != t.columns.size()) throw ShapeError("latent codes have mixed dimensions");
  return t;
}

void write_feature_csv(const FeatureTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "subject_id";
  for (const auto& c : table.columns) out << ',' << c;
  out << '\n';
  char buf[40];
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    out << table.subject_ids[i];
    for (double v : table.rows[i]) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("short write to " + path.string());
}

FeatureTable read_feature_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + " is empty");
  auto header = split(line);
  if (header.empty() || header[0] != "subject_id") throw FormatError(path.string() + ": first column must be subject_id");
  FeatureTable t;
  t.columns.assign(header.begin() + 1, header.end());
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != header.size()) {
      throw FormatError(path.string() + " row " + std::to_string(row) + ": expected " +
                        std::to_string(header.size()) + " columns");
    }
    t.subject_ids.push_back(cells[0]);
    std::vector<double> r;
    for (std::size_t j = 1; j < cells.size(); ++j) {
      try {
        std::size_t used = 0;
        r.push_back(std::stod(cells[j], &used));
        if (used != cells[j].size()) throw std::invalid_argument(cells[j]);
      } catch (const std::exception&) {
        throw FormatError(path.string() + " row " + std::to_string(row) + ": bad number '" + cells[j] + "'");
      }
    }
    t.rows.push_back(std::move(r));
  }
  return t;
}

}  // namespace pdlatent
