#include "pdlatent/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "pdlatent/explain.hpp"
#include "pdlatent/features.hpp"

namespace pdlatent {

namespace fs = std::filesystem;

int stage_index(const std::string& name) {
  for (std::size_t i = 0; i < kStageNames.size(); ++i)
    if (name == kStageNames[i]) return static_cast<int>(i);
  std::string known;
  for (const char* s : kStageNames) known += std::string(known.empty() ? "" : ", ") + s;
  throw ConfigError("unknown stage '" + name + "' (expected one of: " + known + ")");
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string file_label(ModelLabel l) {
  std::string s = label_name(l);
  std::replace(s.begin(), s.end(), '(', '_');
  s.erase(std::remove(s.begin(), s.end(), ')'), s.end());
  return s;
}

std::vector<Volume> load_volumes(const std::vector<CohortRecord>& records) {
  std::vector<Volume> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(load_volume(r.volume, format_from_path(r.volume)));
  return out;
}

Matrix mu_columns(const FeatureTable& t) {
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < t.columns.size(); ++j)
    if (t.columns[j].rfind("mu_", 0) == 0) cols.push_back(j);
  if (cols.empty()) throw FormatError("latents table has no mu_ columns");
  Matrix out;
  for (const auto& row : t.rows) {
    std::vector<double> r;
    for (auto j : cols) r.push_back(row[j]);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<double> target_values(const std::vector<CohortRecord>& records, const std::string& name) {
  std::vector<double> y;
  for (const auto& r : records) y.push_back(r.scores.get(name));
  return y;
}

std::vector<std::string> design_names(const FittedRegressor& m, int d) {
  std::vector<std::string> names;
  for (int j = 0; j < d; ++j) names.push_back("mu_" + std::to_string(j));
  for (int j = 0; j < m.kmeans.k(); ++j) names.push_back("kmf_" + std::to_string(j));
  return names;
}

void save_kmeans(const KMeansModel& m, const fs::path& path) {
  nlohmann::json j;
  j["centers"] = m.centers;
  j["inertia"] = m.inertia;
  j["iterations"] = m.iterations;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

}  // namespace

Pipeline::Pipeline(PipelineConfig config, StageLogger log)
    : config_(std::move(config)), paths_{config_.out_dir}, log_(std::move(log)) {
  config_.validate();
}

std::uint64_t Pipeline::stage_seed(const std::string& name) const {
  return config_.seed + static_cast<std::uint64_t>(stage_index(name));
}

StageRecord Pipeline::run_stage(const std::string& name) {
  const int idx = stage_index(name);
  StageRecord r;
  r.name = name;
  r.seed = stage_seed(name);
  if (log_) log_("[" + name + "] start (seed " + std::to_string(r.seed) + ")");
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fs::create_directories(paths_.root);
    switch (idx) {
      case 0: phantom_gen(r); break;
      case 1: preprocess(r); break;
      case 2: train(r); break;
      case 3: encode(r); break;
      case 4: features(r); break;
      case 5: regress(r); break;
      case 6: cv(r); break;
      case 7: shap(r); break;
      default: manifold(r); break;
    }
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, e.kind(), e.what());
  } catch (const std::exception& e) {
    throw StageError(name, ErrorKind::Data, e.what());
  }
  r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  record(r);
  if (log_) log_("[" + name + "] done in " + fmt("%.0f", r.wall_ms) + " ms: " + r.summary);
  return r;
}

std::vector<StageRecord> Pipeline::run_all() {
  std::vector<StageRecord> out;
  for (const char* s : kStageNames) out.push_back(run_stage(s));
  return out;
}

void Pipeline::record(const StageRecord& r) {
  const auto hash = config_hash(config_);
  nlohmann::json j;
  if (fs::exists(paths_.run_manifest())) {
    try {
      std::ifstream in(paths_.run_manifest());
      j = nlohmann::json::parse(in);
      if (j.value("config_hash", std::string()) != hash) j = nlohmann::json();
    } catch (const nlohmann::json::exception&) {
      j = nlohmann::json();
    }
  }
  j["format_version"] = 1;
  j["config_hash"] = hash;
  j["seed"] = config_.seed;
  j["config"] = config_to_ini(config_);
  std::vector<std::string> outs;
  for (const auto& p : r.outputs) outs.push_back(p.lexically_relative(paths_.root).string());
  j["stages"][r.name] = {{"index", stage_index(r.name)},
                         {"seed", r.seed},
                         {"wall_ms", r.wall_ms},
                         {"outputs", outs},
                         {"summary", r.summary}};
  std::ofstream out(paths_.run_manifest());
  if (!out) throw IoError("cannot write " + paths_.run_manifest().string());
  out << j.dump(2) << '\n';
}

void Pipeline::phantom_gen(StageRecord& r) {
  if (!config_.input_manifest.empty()) {
    const auto records = read_cohort_manifest(config_.input_manifest);
    for (const auto& rec : records)
      if (!fs::exists(rec.volume)) throw IoError("missing input volume " + rec.volume.string());
    r.outputs.push_back(config_.input_manifest);
    r.summary = "ingested " + std::to_string(records.size()) + " scans from " + config_.input_manifest.string();
    return;
  }
  CohortConfig cc;
  cc.n = config_.n;
  cc.ranges = config_.ranges;
  cc.scores = config_.scores;
  cc.seed = r.seed;
  cc.base.dims = config_.dims;
  cc.base.spacing = config_.spacing;
  cc.base.noise_sigma = config_.noise_sigma;
  const auto cohort = generate_cohort(cc);
  r.outputs.push_back(write_cohort(cohort, paths_.cohort_dir(), config_.format));
  r.summary = std::to_string(cohort.size()) + " phantoms at " + std::to_string(config_.dims.nx) + "x" +
              std::to_string(config_.dims.ny) + "x" + std::to_string(config_.dims.nz);
}

void Pipeline::preprocess(StageRecord& r) {
  const fs::path source = config_.input_manifest.empty() ? paths_.cohort_manifest() : config_.input_manifest;
  auto records = read_cohort_manifest(source);
  if (records.empty()) throw DataError("cohort manifest " + source.string() + " lists no scans");
  fs::create_directories(paths_.preprocessed_dir());
  const std::string ext = config_.format == VolumeFormat::Nifti1 ? ".nii" : ".rawf32";
  int heuristic = 0;
  for (auto& rec : records) {
    const Volume v = load_volume(rec.volume, format_from_path(rec.volume));
    Mask bg, ref;
    if (rec.background_mask.empty() || rec.reference_mask.empty()) {
      auto pair = heuristic_masks(v);
      bg = std::move(pair.background);
      ref = std::move(pair.reference);
      ++heuristic;
    } else {
      bg = load_mask(rec.background_mask, format_from_path(rec.background_mask));
      ref = load_mask(rec.reference_mask, format_from_path(rec.reference_mask));
    }
    Volume out = normalize_intensity(v, bg, ref);
    if (config_.compress) {
      auto cp = default_compression(out, config_.compress_percentile);
      if (config_.tau) cp.tau = *config_.tau;
      cp.w = config_.w ? *config_.w : cp.tau / 2.0;
      if (!(cp.w > 0.0)) throw NumericError("compression width must be positive for " + rec.subject_id);
      out = compress_upper_tail(out, cp.tau, cp.w);
    }
    Mask striatum;
    if (!rec.striatal_mask.empty()) striatum = load_mask(rec.striatal_mask, format_from_path(rec.striatal_mask));
    if (config_.downsample > 1) {
      out = downsample(out, config_.downsample);
      if (!rec.striatal_mask.empty()) striatum = downsample(striatum, config_.downsample);
    }
    if (config_.target_dims) {
      out = crop_pad(out, *config_.target_dims);
      if (!rec.striatal_mask.empty()) striatum = crop_pad(striatum, *config_.target_dims);
    }
    rec.volume = paths_.preprocessed_dir() / (rec.subject_id + ext);
    save_volume(out, rec.volume, config_.format);
    if (!rec.striatal_mask.empty()) {
      rec.striatal_mask = paths_.preprocessed_dir() / (rec.subject_id + "_striatum" + ext);
      save_mask(striatum, rec.striatal_mask, config_.format, out.spacing());
    }
    rec.background_mask.clear();
    rec.reference_mask.clear();
  }
  write_cohort_manifest(records, paths_.preprocessed_manifest());
  r.outputs.push_back(paths_.preprocessed_manifest());
  r.summary = std::to_string(records.size()) + " volumes normalised" + (config_.compress ? " and compressed" : "") +
              (heuristic ? ", " + std::to_string(heuristic) + " with heuristic masks" : "");
}

void Pipeline::train(StageRecord& r) {
  const auto records = read_cohort_manifest(paths_.preprocessed_manifest());
  const auto volumes = load_volumes(records);
  const auto cfg = config_.cvae_config(r.seed);
  auto on_epoch = [&](const EpochLog& e) {
    if (log_ && (e.epoch == 1 || e.epoch % 10 == 0 || e.epoch == cfg.epochs)) {
      log_("[train] epoch " + std::to_string(e.epoch) + " total " + fmt("%.4f", e.total) + " recon " +
           fmt("%.4f", e.recon) + " kld " + fmt("%.4f", e.kld));
    }
  };
  const auto result = pdlatent::train(cfg, volumes, on_epoch);
  fs::create_directories(paths_.model_dir());
  save_checkpoint(result.model, cfg.epochs, paths_.checkpoint());
  write_training_log(result.log, paths_.training_log());
  r.outputs = {paths_.checkpoint(), paths_.training_log()};
  r.summary = "total loss " + fmt("%.4f", result.log.front().total) + " -> " + fmt("%.4f", result.log.back().total);
}

void Pipeline::encode(StageRecord& r) {
  const auto records = read_cohort_manifest(paths_.preprocessed_manifest());
  const auto model = load_checkpoint(paths_.checkpoint());
  const auto volumes = load_volumes(records);
  const auto codes = pdlatent::encode(model, volumes, config_.batch_size);
  FeatureTable t;
  const int d = model.config().latent_dim;
  for (int j = 0; j < d; ++j) t.columns.push_back("mu_" + std::to_string(j));
  for (int j = 0; j < d; ++j) t.columns.push_back("logvar_" + std::to_string(j));
  for (std::size_t i = 0; i < records.size(); ++i) {
    t.subject_ids.push_back(records[i].subject_id);
    auto row = codes[i].mu;
    row.insert(row.end(), codes[i].logvar.begin(), codes[i].logvar.end());
    t.rows.push_back(std::move(row));
  }
  write_feature_csv(t, paths_.latents());
  r.outputs.push_back(paths_.latents());
  r.summary = std::to_string(records.size()) + " codes of dimension " + std::to_string(d);
}

void Pipeline::features(StageRecord& r) {
  const auto latents = read_feature_csv(paths_.latents());
  const auto mu = mu_columns(latents);
  const int d = static_cast<int>(mu.front().size());
  const int k = config_.kmeans_k > 0 ? config_.kmeans_k : cluster_count(d);
  KMeansOptions ko;
  ko.max_iter = config_.kmeans_max_iter;
  ko.tol = config_.kmeans_tol;
  const auto km = fit_kmeans(mu, k, r.seed, ko);
  write_feature_csv(make_feature_table(latents.subject_ids, mu, &km), paths_.features());
  save_kmeans(km, paths_.root / "kmeans.json");
  r.outputs = {paths_.features(), paths_.root / "kmeans.json"};
  r.summary = "K=" + std::to_string(k) + ", inertia " + fmt("%.4g", km.inertia);
}

void Pipeline::regress(StageRecord& r) {
  const auto records = read_cohort_manifest(paths_.preprocessed_manifest());
  const auto mu = mu_columns(read_feature_csv(paths_.latents()));
  if (mu.size() != records.size()) throw ShapeError("latents do not match the preprocessed cohort");
  fs::create_directories(paths_.regress_dir());
  const auto opts = config_.cv_options(r.seed);
  for (const auto& target : config_.targets) {
    const auto y = target_values(records, target);
    for (auto label : config_.models) {
      const auto m = fit_regressor(mu, y, label, opts, r.seed);
      const auto stem = target + "_" + file_label(label);
      save_ensemble(m.ensemble, paths_.regress_dir() / (stem + ".json"));
      r.outputs.push_back(paths_.regress_dir() / (stem + ".json"));
      if (uses_kmf(label)) {
        save_kmeans(m.kmeans, paths_.regress_dir() / (stem + "_kmeans.json"));
        r.outputs.push_back(paths_.regress_dir() / (stem + "_kmeans.json"));
      }
    }
  }
  r.summary = std::to_string(config_.targets.size() * config_.models.size()) + " models fitted on all subjects";
}

void Pipeline::cv(StageRecord& r) {
  const auto records = read_cohort_manifest(paths_.preprocessed_manifest());
  auto opts = config_.cv_options(r.seed);
  std::vector<std::string> ids;
  for (const auto& rec : records) ids.push_back(rec.subject_id);
  if (config_.split == SplitMode::Subject) opts.groups = ids;

  Matrix mu;
  FoldFeatureProvider provider;
  std::vector<Volume> volumes;
  std::map<int, std::pair<Matrix, Matrix>> cache;
  if (config_.fit_mode == FitMode::All) {
    mu = mu_columns(read_feature_csv(paths_.latents()));
    if (mu.size() != records.size()) throw ShapeError("latents do not match the preprocessed cohort");
  } else {
    volumes = load_volumes(records);
    // Folds depend only on (n, seed, groups), so each fold's encoder is trained once.
    provider = [&](std::span<const int> train, std::span<const int> test, int fold) {
      auto it = cache.find(fold);
      if (it != cache.end()) return it->second;
      std::vector<Volume> tv;
      for (int i : train) tv.push_back(volumes[static_cast<std::size_t>(i)]);
      if (log_) log_("[cv] training fold " + std::to_string(fold) + " encoder on " + std::to_string(tv.size()));
      const auto model = pdlatent::train(config_.cvae_config(r.seed + 100 + static_cast<std::uint64_t>(fold)), tv).model;
      auto to_mu = [&](std::span<const int> idx) {
        std::vector<Volume> vs;
        for (int i : idx) vs.push_back(volumes[static_cast<std::size_t>(i)]);
        Matrix m;
        for (auto& c : pdlatent::encode(model, vs, config_.batch_size)) m.push_back(std::move(c.mu));
        return m;
      };
      auto res = std::make_pair(to_mu(train), to_mu(test));
      cache[fold] = res;
      return res;
    };
  }

  std::vector<CvReport> reports;
  for (const auto& target : config_.targets) {
    const auto y = target_values(records, target);
    for (auto label : config_.models) {
      reports.push_back(run_cv(mu, y, target, label, opts, provider));
      if (log_) {
        const auto& rep = reports.back();
        log_("[cv] " + target + " " + label_name(label) + " MAE " + fmt("%.3f", rep.mae) + " RMSE " +
             fmt("%.3f", rep.rmse) + " R2 " + fmt("%.3f", rep.r2));
      }
    }
  }
  fs::create_directories(paths_.cv_dir());
  write_report_csv(reports, paths_.cv_report());
  write_fold_csv(reports, paths_.cv_folds());
  const auto best = best_of(reports);
  write_report_csv(best, paths_.cv_best());
  {
    std::ofstream out(paths_.cv_predictions());
    if (!out) throw IoError("cannot write " + paths_.cv_predictions().string());
    out << "subject_id,target,model,y,prediction\n";
    char buf[96];
    for (const auto& rep : reports) {
      const auto y = target_values(records, rep.target);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g", y[i], rep.predictions[i]);
        out << ids[i] << ',' << rep.target << ',' << label_name(rep.label) << ',' << buf << '\n';
      }
    }
  }
  r.outputs = {paths_.cv_report(), paths_.cv_folds(), paths_.cv_best(), paths_.cv_predictions()};
  std::string s;
  for (const auto& b : best) s += (s.empty() ? "" : "; ") + b.target + " " + label_name(b.label) + " R2 " + fmt("%.3f", b.r2);
  r.summary = "best: " + s;
}

void Pipeline::shap(StageRecord& r) {
  const auto records = read_cohort_manifest(paths_.preprocessed_manifest());
  const auto latents = read_feature_csv(paths_.latents());
  const auto mu = mu_columns(latents);
  if (mu.size() != records.size()) throw ShapeError("latents do not match the preprocessed cohort");
  const auto y = target_values(records, config_.shap_target);
  const auto model = fit_regressor(mu, y, config_.shap_model, config_.cv_options(r.seed), r.seed);
  const auto X = regressor_inputs(model, mu);
  const auto attrs = tree_shap(model.ensemble, X);
  double worst = 0.0;
  for (const auto& a : attrs) {
    double s = a.base_value;
    for (double p : a.phi) s += p;
    worst = std::max(worst, std::abs(s - a.prediction));
  }
  const auto names = design_names(model, static_cast<int>(mu.front().size()));
  const auto ranked = importance(attrs);
  const int f = config_.shap_feature >= 0 ? config_.shap_feature : ranked.front().feature;
  const int c = config_.shap_color >= 0 ? config_.shap_color : default_color_feature(ranked, f);
  if (f >= static_cast<int>(names.size()) || c >= static_cast<int>(names.size())) {
    throw ConfigError("shap feature index out of range for " + std::to_string(names.size()) + " features");
  }
  fs::create_directories(paths_.shap_dir());
  const auto attr_path = paths_.shap_dir() / "attributions.csv";
  const auto imp_path = paths_.shap_dir() / "importance.csv";
  const auto dep_path = paths_.shap_dir() / "dependence.csv";
  write_attribution_csv(attrs, latents.subject_ids, attr_path);
  write_importance_csv(ranked, names, imp_path);
  write_dependence_csv(dependence_export(attrs, X, f, c), dep_path);
  {
    std::ofstream out(paths_.shap_dir() / "dependence_features.txt");
    out << "feature=" << names[static_cast<std::size_t>(f)] << "\ncolor=" << names[static_cast<std::size_t>(c)] << '\n';
  }
  r.outputs = {attr_path, imp_path, dep_path, paths_.shap_dir() / "dependence_features.txt"};
  std::string top;
  for (std::size_t i = 0; i < std::min<std::size_t>(3, ranked.size()); ++i)
    top += (i ? "," : "") + names[static_cast<std::size_t>(ranked[i].feature)];
  r.summary = config_.shap_target + " " + label_name(config_.shap_model) + ", top features " + top +
              ", max local-accuracy error " + fmt("%.2e", worst);
}

void Pipeline::manifold(StageRecord& r) {
  const auto records = read_cohort_manifest(paths_.preprocessed_manifest());
  const auto model = load_checkpoint(paths_.checkpoint());
  const int d = model.config().latent_dim;
  if (d < 2) throw ConfigError("the manifold needs a latent dimension of at least 2");
  GridSpec spec;
  spec.g = config_.grid;
  spec.lo = config_.grid_lo;
  spec.hi = config_.grid_hi;
  spec.feat_a = config_.feat_a;
  spec.feat_b = config_.feat_b;
  if (spec.feat_a < 0 || spec.feat_b < 0) {
    const auto mu = mu_columns(read_feature_csv(paths_.latents()));
    std::vector<double> amp;
    for (const auto& rec : records) amp.push_back(rec.amplitude);
    const bool varies = std::any_of(amp.begin(), amp.end(), [&](double a) { return a != amp.front(); });
    std::vector<int> order(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) order[static_cast<std::size_t>(j)] = j;
    if (varies) order = rank_by_correlation(mu, amp);
    auto next = [&](int avoid) {
      for (int j : order)
        if (j != avoid) return j;
      return avoid;
    };
    if (spec.feat_a < 0) spec.feat_a = next(spec.feat_b);
    if (spec.feat_b < 0) spec.feat_b = next(spec.feat_a);
  }
  spec.validate(d);

  const Dims dims = model.config().input_dims;
  std::vector<std::uint8_t> uni(dims.voxels(), 0);
  Spacing spacing{};
  bool have_mask = false;
  for (const auto& rec : records) {
    if (rec.striatal_mask.empty()) continue;
    const auto m = load_mask(rec.striatal_mask, format_from_path(rec.striatal_mask));
    if (!(m.dims() == dims)) throw ShapeError("striatal mask dims differ from the model input");
    for (std::size_t i = 0; i < uni.size(); ++i) uni[i] |= m[i] ? 1 : 0;
    have_mask = true;
  }
  if (!records.empty()) spacing = load_volume(records.front().volume, format_from_path(records.front().volume)).spacing();
  const Mask striatum(dims, uni);
  const int axis_len = dims[config_.axis == SliceAxis::Axial ? 2 : (config_.axis == SliceAxis::Coronal ? 1 : 0)];
  const int slice = config_.slice >= 0 ? config_.slice : (have_mask && striatum.count() > 0 ? centroid_slice(striatum, config_.axis) : axis_len / 2);

  const auto vols = decode_grid(model, spec, spacing);
  fs::create_directories(paths_.manifold_dir());
  const auto png = paths_.manifold_dir() / "montage.png";
  write_png(montage(vols, spec.g, config_.axis, slice), png);
  r.outputs.push_back(png);
  r.summary = "grid " + std::to_string(spec.g) + "x" + std::to_string(spec.g) + " over mu_" +
              std::to_string(spec.feat_a) + " (columns) and mu_" + std::to_string(spec.feat_b) + " (rows), slice " +
              std::to_string(slice);
  if (have_mask && striatum.count() > 0) {
    const auto means = tile_means(vols, striatum);
    const auto tiles = paths_.manifold_dir() / "tiles.csv";
    write_tile_csv(spec, means, tiles);
    r.outputs.push_back(tiles);
    const auto mono = monotone_fraction(means, spec.g);
    r.summary += ", monotone lines " + fmt("%.2f", mono.fraction) + " along " + (mono.axis == 0 ? "columns" : "rows");
  }
}

}  // namespace pdlatent
