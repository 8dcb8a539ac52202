#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pdlatent/volume.hpp"

namespace pdlatent {

// Fixed shape constants. Brain semi-axes are fractions of the field of view; striatal
// body semi-axes and the anterior/posterior centre offset are in mm.
struct PhantomGeometry {
  std::array<double, 3> brain_fraction{0.42, 0.44, 0.40};
  std::array<double, 3> body_semi_mm{7.0, 10.0, 9.0};
  double ap_offset_mm = 12.0;
  // Background is everything beyond this multiple of the brain radius.
  double background_scale = 1.15;
  // Reference region: brain voxels posterior to centre - this fraction of the y semi-axis.
  double reference_fraction = 0.55;
  int supersample = 4;
};

struct PhantomParams {
  double amplitude = 2.0;     // a: mean striatal uptake relative to reference
  double separation = 34.0;   // s: mm between left and right body centres
  double ap_ratio = 1.0;      // r: anterior / posterior uptake
  double noise_sigma = 0.05;
  std::uint64_t seed = 0;
  Dims dims{32, 40, 32};
  Spacing spacing{4.0, 4.0, 4.0};
  PhantomGeometry geometry{};

  void validate() const;
};

PhantomParams desk_scale_params();
PhantomParams full_scale_params();

struct Scores {
  double updrs1 = 0.0;
  double updrs2 = 0.0;
  double updrs3 = 0.0;
  double updrs4 = 0.0;
  double updrs_total = 0.0;

  // Lookup by name: updrs1..updrs4, updrs_total.
  double get(const std::string& name) const;
};

inline constexpr std::array<const char*, 5> kScoreNames{"updrs1", "updrs2", "updrs3", "updrs4", "updrs_total"};

struct SyntheticSubject {
  std::string subject_id;
  Volume volume;
  Mask background;
  Mask reference;
  Mask striatum;
  // Fully-inside voxels of the anterior bodies; posterior = striatum minus anterior.
  Mask anterior;
  PhantomParams params;
  Scores scores;
};

// Volume and masks only; scores are left at zero.
SyntheticSubject generate_phantom(const PhantomParams& p);

struct FactorRanges {
  std::array<double, 2> amplitude{0.5, 3.0};
  std::array<double, 2> ap_ratio{0.6, 1.4};
  std::array<double, 2> separation{28.0, 40.0};

  void validate() const;
};

// score = c0 - c1 a - c2 r + c3 s + N(0, sigma)
struct ScoreCoefficients {
  double c0 = 0.0, c1 = 0.0, c2 = 0.0, c3 = 0.0, sigma = 0.0;
};

struct ScoreModel {
  // updrs1..updrs4; the total is their sum.
  std::array<ScoreCoefficients, 4> parts{{
      {14.0, 2.0, 4.0, 0.10, 1.5},
      {16.0, 3.0, 5.0, 0.10, 1.5},
      {50.0, 10.0, 12.0, 0.30, 5.5},
      {4.0, 0.6, 1.0, 0.02, 0.5},
  }};
};

struct CohortConfig {
  int n = 64;
  FactorRanges ranges{};
  ScoreModel scores{};
  std::uint64_t seed = 0;
  // Dims, spacing, noise and geometry for every subject; factors and seed are overwritten.
  PhantomParams base = desk_scale_params();
};

// Factors are drawn uniformly per subject from one seeded stream; subject i's noise
// uses seed + i.
std::vector<SyntheticSubject> generate_cohort(const CohortConfig& config);

Scores score_subject(const ScoreModel& model, double a, double r, double s, std::array<double, 4> noise);

// Mask paths may be empty for ingested scans without masks.
struct CohortRecord {
  std::string subject_id;
  std::filesystem::path volume;
  std::filesystem::path background_mask;
  std::filesystem::path reference_mask;
  std::filesystem::path striatal_mask;
  double amplitude = 0.0;
  double separation = 0.0;
  double ap_ratio = 0.0;
  Scores scores;
};

// Writes one volume plus masks per subject and manifest.csv; returns the manifest path.
std::filesystem::path write_cohort(const std::vector<SyntheticSubject>& cohort, const std::filesystem::path& dir,
                                   VolumeFormat format = VolumeFormat::RawF32);
// Paths under the manifest's directory are written relative to it.
void write_cohort_manifest(const std::vector<CohortRecord>& records, const std::filesystem::path& manifest);
// Relative paths in the manifest are resolved against its directory.
std::vector<CohortRecord> read_cohort_manifest(const std::filesystem::path& manifest);

}  // namespace pdlatent
