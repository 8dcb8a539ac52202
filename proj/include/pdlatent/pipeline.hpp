#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pdlatent/config.hpp"
#include "pdlatent/error.hpp"

namespace pdlatent {

// Stage order; a stage's seed is the root seed plus its index here.
inline constexpr std::array<const char*, 9> kStageNames{"phantom-gen", "preprocess", "train",  "encode",  "features",
                                                        "regress",     "cv",         "shap",   "manifold"};

int stage_index(const std::string& name);

// A failure inside a stage, tagged with the stage name. Keeps the cause's error kind.
class StageError : public Error {
 public:
  StageError(const std::string& stage, ErrorKind kind, const std::string& cause)
      : Error(kind, "stage '" + stage + "' failed: " + cause), stage_(stage) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

// Artifact locations under the output directory.
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path cohort_dir() const { return root / "cohort"; }
  std::filesystem::path cohort_manifest() const { return cohort_dir() / "manifest.csv"; }
  std::filesystem::path preprocessed_dir() const { return root / "preprocessed"; }
  std::filesystem::path preprocessed_manifest() const { return preprocessed_dir() / "manifest.csv"; }
  std::filesystem::path model_dir() const { return root / "model"; }
  std::filesystem::path checkpoint() const { return model_dir() / "checkpoint"; }
  std::filesystem::path training_log() const { return model_dir() / "training_log.csv"; }
  std::filesystem::path latents() const { return root / "latents.csv"; }
  std::filesystem::path features() const { return root / "features.csv"; }
  std::filesystem::path regress_dir() const { return root / "regress"; }
  std::filesystem::path cv_dir() const { return root / "cv"; }
  std::filesystem::path cv_report() const { return cv_dir() / "report.csv"; }
  std::filesystem::path cv_folds() const { return cv_dir() / "folds.csv"; }
  std::filesystem::path cv_best() const { return cv_dir() / "best.csv"; }
  std::filesystem::path cv_predictions() const { return cv_dir() / "predictions.csv"; }
  std::filesystem::path shap_dir() const { return root / "shap"; }
  std::filesystem::path manifold_dir() const { return root / "manifold"; }
  std::filesystem::path run_manifest() const { return root / "run_manifest.json"; }
};

struct StageRecord {
  std::string name;
  std::uint64_t seed = 0;
  double wall_ms = 0.0;
  std::vector<std::filesystem::path> outputs;
  std::string summary;  // short human-readable result line
};

using StageLogger = std::function<void(const std::string&)>;

class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config, StageLogger log = {});

  const PipelineConfig& config() const noexcept { return config_; }
  const RunPaths& paths() const noexcept { return paths_; }

  // Runs one stage and records it in the run manifest. Failures become StageError.
  StageRecord run_stage(const std::string& name);
  // Every stage in order; stops at the first failure.
  std::vector<StageRecord> run_all();

 private:
  std::uint64_t stage_seed(const std::string& name) const;
  void record(const StageRecord& r);

  void phantom_gen(StageRecord& r);
  void preprocess(StageRecord& r);
  void train(StageRecord& r);
  void encode(StageRecord& r);
  void features(StageRecord& r);
  void regress(StageRecord& r);
  void cv(StageRecord& r);
  void shap(StageRecord& r);
  void manifold(StageRecord& r);

  PipelineConfig config_;
  RunPaths paths_;
  StageLogger log_;
};

}  // namespace pdlatent
