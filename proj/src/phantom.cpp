#include "pdlatent/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "pdlatent/error.hpp"

namespace pdlatent {

namespace {

struct Ellipsoid {
  std::array<double, 3> c{};
  std::array<double, 3> r{};

  double rho(const std::array<double, 3>& p) const {
    double acc = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double d = (p[a] - c[a]) / r[a];
      acc += d * d;
    }
    return std::sqrt(acc);
  }
  bool contains(const std::array<double, 3>& p) const { return rho(p) <= 1.0; }
};

struct Body {
  Ellipsoid shape;
  double value = 0.0;
  bool anterior = false;
};

struct Layout {
  Ellipsoid brain;
  std::vector<Body> bodies;
  double reference_y = 0.0;
};

Layout build_layout(const PhantomParams& p) {
  const auto& g = p.geometry;
  Layout L;
  for (int a = 0; a < 3; ++a) {
    const double extent = p.dims[a] * p.spacing[a];
    L.brain.c[a] = extent / 2.0;
    L.brain.r[a] = g.brain_fraction[a] * extent;
  }
  L.reference_y = L.brain.c[1] - g.reference_fraction * L.brain.r[1];

  const auto& R = g.body_semi_mm;
  if (p.separation / 2.0 <= R[0]) {
    throw GeometryError("separation " + std::to_string(p.separation) + " mm makes the striata overlap at the midline");
  }
  // Whole-voxel offset keeps the anterior and posterior footprints identical on the grid.
  const double dy = std::round(g.ap_offset_mm / p.spacing.sy) * p.spacing.sy;
  if (dy <= R[1]) throw GeometryError("anterior and posterior striatal bodies overlap");

  const double half = (p.ap_ratio + 1.0) / 2.0;
  const double v_ant = p.amplitude * p.ap_ratio / half;
  const double v_post = p.amplitude / half;
  for (int side : {-1, 1}) {
    for (bool ant : {true, false}) {
      Body b;
      b.shape.c = {L.brain.c[0] + side * p.separation / 2.0, L.brain.c[1] + (ant ? dy : -dy), L.brain.c[2]};
      b.shape.r = R;
      b.value = ant ? v_ant : v_post;
      b.anterior = ant;
      for (int a = 0; a < 3; ++a) {
        const double lo = b.shape.c[a] - R[a], hi = b.shape.c[a] + R[a];
        if (lo < 0.0 || hi > p.dims[a] * p.spacing[a]) {
          throw GeometryError("striata exceed the volume bounds at separation " + std::to_string(p.separation) +
                              " mm");
        }
        for (double tip : {lo, hi}) {
          auto q = b.shape.c;
          q[a] = tip;
          if (!L.brain.contains(q)) throw GeometryError("striata extend outside the brain");
        }
      }
      L.bodies.push_back(b);
    }
  }
  return L;
}

}  // namespace

void PhantomParams::validate() const {
  if (!(amplitude >= 0.0)) throw ParameterError("amplitude must be >= 0");
  if (!(separation > 0.0)) throw ParameterError("separation must be > 0");
  if (!(ap_ratio > 0.0)) throw ParameterError("ap_ratio must be > 0");
  if (!(noise_sigma >= 0.0)) throw ParameterError("noise_sigma must be >= 0");
  if (!dims.valid()) throw ParameterError("phantom dims must be positive");
  if (!(spacing.sx > 0.0 && spacing.sy > 0.0 && spacing.sz > 0.0)) throw ParameterError("spacing must be > 0");
  if (geometry.supersample < 1) throw ParameterError("supersample must be >= 1");
  for (int a = 0; a < 3; ++a) {
    if (!(geometry.brain_fraction[a] > 0.0 && geometry.body_semi_mm[a] > 0.0)) {
      throw ParameterError("phantom geometry constants must be > 0");
    }
  }
}

PhantomParams desk_scale_params() { return PhantomParams{}; }

PhantomParams full_scale_params() {
  PhantomParams p;
  p.dims = {91, 109, 91};
  p.spacing = {2.0, 2.0, 2.0};
  return p;
}

double Scores::get(const std::string& name) const {
  if (name == "updrs1") return updrs1;
  if (name == "updrs2") return updrs2;
  if (name == "updrs3") return updrs3;
  if (name == "updrs4") return updrs4;
  if (name == "updrs_total") return updrs_total;
  throw ConfigError("unknown score '" + name + "'");
}

SyntheticSubject generate_phantom(const PhantomParams& p) {
  p.validate();
  const Layout L = build_layout(p);
  const Dims d = p.dims;
  const std::array<double, 3> s{p.spacing.sx, p.spacing.sy, p.spacing.sz};
  const int S = p.geometry.supersample;

  // Bound on how far the normalised radius can move from a voxel centre to its corners.
  auto corner_reach = [&](const Ellipsoid& e) {
    double acc = 0.0;
    for (int a = 0; a < 3; ++a) acc += (0.5 * s[a] / e.r[a]) * (0.5 * s[a] / e.r[a]);
    return std::sqrt(acc);
  };
  const double brain_reach = corner_reach(L.brain);
  const double body_reach = corner_reach(L.bodies.front().shape);

  auto field = [&](const std::array<double, 3>& q) {
    for (const auto& b : L.bodies)
      if (b.shape.contains(q)) return b.value;
    return L.brain.contains(q) ? 1.0 : 0.0;
  };
  auto all_corners_in = [&](const Ellipsoid& e, const std::array<double, 3>& c) {
    for (int k = 0; k < 8; ++k) {
      std::array<double, 3> q{};
      for (int a = 0; a < 3; ++a) q[a] = c[a] + ((k >> a) & 1 ? 0.5 : -0.5) * s[a];
      if (!e.contains(q)) return false;
    }
    return true;
  };

  std::vector<float> values(d.voxels());
  std::vector<std::uint8_t> bg(d.voxels()), ref(d.voxels()), str(d.voxels()), ant(d.voxels());
  std::size_t idx = 0;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x, ++idx) {
        const std::array<double, 3> c{(x + 0.5) * s[0], (y + 0.5) * s[1], (z + 0.5) * s[2]};
        const Body* inside = nullptr;
        bool clear_of_bodies = true;
        for (const auto& b : L.bodies) {
          if (b.shape.rho(c) - body_reach <= 1.0) clear_of_bodies = false;
          if (all_corners_in(b.shape, c)) inside = &b;
        }
        const double brho = L.brain.rho(c);
        const bool in_brain = all_corners_in(L.brain, c);

        double v = 0.0;
        if (inside) {
          v = inside->value;
        } else if (clear_of_bodies && in_brain) {
          v = 1.0;
        } else if (clear_of_bodies && brho - brain_reach > 1.0) {
          v = 0.0;
        } else {
          double acc = 0.0;
          for (int k = 0; k < S; ++k)
            for (int j = 0; j < S; ++j)
              for (int i = 0; i < S; ++i) {
                const std::array<double, 3> q{c[0] + ((i + 0.5) / S - 0.5) * s[0],
                                              c[1] + ((j + 0.5) / S - 0.5) * s[1],
                                              c[2] + ((k + 0.5) / S - 0.5) * s[2]};
                acc += field(q);
              }
          v = acc / (S * S * S);
        }
        values[idx] = static_cast<float>(v);
        bg[idx] = brho - brain_reach > p.geometry.background_scale;
        ref[idx] = in_brain && clear_of_bodies && c[1] < L.reference_y;
        str[idx] = inside != nullptr;
        ant[idx] = inside != nullptr && inside->anterior;
      }

  if (p.noise_sigma > 0.0) {
    std::mt19937_64 rng(p.seed);
    std::normal_distribution<double> noise(0.0, p.noise_sigma);
    for (auto& v : values) v = static_cast<float>(v + noise(rng));
  }

  SyntheticSubject out;
  out.volume = Volume(d, p.spacing, std::move(values));
  out.background = Mask(d, std::move(bg));
  out.reference = Mask(d, std::move(ref));
  out.striatum = Mask(d, std::move(str));
  out.anterior = Mask(d, std::move(ant));
  out.params = p;
  if (out.background.count() == 0 || out.reference.count() == 0 || out.striatum.count() == 0) {
    throw GeometryError("phantom grid too coarse: an empty background, reference or striatal mask");
  }
  return out;
}

void FactorRanges::validate() const {
  for (const auto* r : {&amplitude, &ap_ratio, &separation}) {
    if (!((*r)[0] <= (*r)[1])) throw ParameterError("factor range lower bound exceeds upper bound");
  }
  if (amplitude[0] < 0.0) throw ParameterError("amplitude range must be >= 0");
  if (ap_ratio[0] <= 0.0 || separation[0] <= 0.0) throw ParameterError("ap_ratio and separation ranges must be > 0");
}

Scores score_subject(const ScoreModel& model, double a, double r, double s, std::array<double, 4> noise) {
  std::array<double, 4> v{};
  for (int k = 0; k < 4; ++k) {
    const auto& c = model.parts[k];
    v[k] = c.c0 - c.c1 * a - c.c2 * r + c.c3 * s + noise[k];
  }
  return {v[0], v[1], v[2], v[3], v[0] + v[1] + v[2] + v[3]};
}

std::vector<SyntheticSubject> generate_cohort(const CohortConfig& config) {
  if (config.n < 1) throw ConfigError("cohort size must be >= 1");
  config.ranges.validate();
  std::mt19937_64 rng(config.seed);
  auto uniform = [&](const std::array<double, 2>& r) {
    return std::uniform_real_distribution<double>(r[0], r[1])(rng);
  };
  std::normal_distribution<double> n01(0.0, 1.0);

  std::vector<SyntheticSubject> cohort;
  cohort.reserve(static_cast<std::size_t>(config.n));
  for (int i = 0; i < config.n; ++i) {
    PhantomParams p = config.base;
    p.amplitude = uniform(config.ranges.amplitude);
    p.separation = uniform(config.ranges.separation);
    p.ap_ratio = uniform(config.ranges.ap_ratio);
    p.seed = config.seed + static_cast<std::uint64_t>(i);
    std::array<double, 4> noise{};
    for (int k = 0; k < 4; ++k) noise[k] = config.scores.parts[k].sigma * n01(rng);

    SyntheticSubject subj = generate_phantom(p);
    char id[32];
    std::snprintf(id, sizeof id, "sub-%04d", i);
    subj.subject_id = id;
    subj.scores = score_subject(config.scores, p.amplitude, p.ap_ratio, p.separation, noise);
    cohort.push_back(std::move(subj));
  }
  return cohort;
}

namespace {

constexpr const char* kManifestHeader =
    "subject_id,volume,background_mask,reference_mask,striatal_mask,a,s,r,updrs1,updrs2,updrs3,updrs4,updrs_total";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("cohort manifest: bad number '" + s + "' in " + what);
  }
}

}  // namespace

void write_cohort_manifest(const std::vector<CohortRecord>& records, const std::filesystem::path& manifest) {
  std::ofstream out(manifest);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << kManifestHeader << '\n';
  const auto base = manifest.parent_path();
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  auto rel = [&](const std::filesystem::path& p) {
    if (p.empty()) return std::string();
    const auto r = p.lexically_relative(base);
    return (r.empty() || *r.begin() == "..") ? p.string() : r.string();
  };
  for (const auto& r : records) {
    out << r.subject_id << ',' << rel(r.volume) << ',' << rel(r.background_mask) << ',' << rel(r.reference_mask) << ','
        << rel(r.striatal_mask) << ',' << num(r.amplitude) << ',' << num(r.separation) << ',' << num(r.ap_ratio)
        << ',' << num(r.scores.updrs1) << ',' << num(r.scores.updrs2) << ',' << num(r.scores.updrs3) << ','
        << num(r.scores.updrs4) << ',' << num(r.scores.updrs_total) << '\n';
  }
  if (!out) throw IoError("short write to " + manifest.string());
}

std::filesystem::path write_cohort(const std::vector<SyntheticSubject>& cohort, const std::filesystem::path& dir,
                                   VolumeFormat format) {
  std::filesystem::create_directories(dir);
  const std::string ext = format == VolumeFormat::Nifti1 ? ".nii" : ".rawf32";
  std::vector<CohortRecord> records;
  for (const auto& s : cohort) {
    CohortRecord r;
    r.subject_id = s.subject_id;
    r.volume = dir / (s.subject_id + ext);
    r.background_mask = dir / (s.subject_id + "_bg" + ext);
    r.reference_mask = dir / (s.subject_id + "_ref" + ext);
    r.striatal_mask = dir / (s.subject_id + "_striatum" + ext);
    save_volume(s.volume, r.volume, format);
    save_mask(s.background, r.background_mask, format, s.volume.spacing());
    save_mask(s.reference, r.reference_mask, format, s.volume.spacing());
    save_mask(s.striatum, r.striatal_mask, format, s.volume.spacing());
    r.amplitude = s.params.amplitude;
    r.separation = s.params.separation;
    r.ap_ratio = s.params.ap_ratio;
    r.scores = s.scores;
    records.push_back(std::move(r));
  }
  const auto manifest = dir / "manifest.csv";
  write_cohort_manifest(records, manifest);
  return manifest;
}

std::vector<CohortRecord> read_cohort_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open " + manifest.string());
  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader) {
    throw FormatError(manifest.string() + ": unexpected cohort manifest header");
  }
  const auto base = manifest.parent_path();
  auto resolve = [&](const std::string& p) {
    if (p.empty()) return std::filesystem::path();
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base / path;
  };
  std::vector<CohortRecord> out;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    const std::string where = manifest.string() + " row " + std::to_string(row);
    if (cells.size() != 13) throw FormatError(where + ": expected 13 columns");
    CohortRecord r;
    r.subject_id = cells[0];
    r.volume = resolve(cells[1]);
    r.background_mask = resolve(cells[2]);
    r.reference_mask = resolve(cells[3]);
    r.striatal_mask = resolve(cells[4]);
    r.amplitude = parse_number(cells[5], where);
    r.separation = parse_number(cells[6], where);
    r.ap_ratio = parse_number(cells[7], where);
    r.scores = {parse_number(cells[8], where), parse_number(cells[9], where), parse_number(cells[10], where),
                parse_number(cells[11], where), parse_number(cells[12], where)};
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace pdlatent
