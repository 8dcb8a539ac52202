#include "pdlatent/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "pdlatent/error.hpp"

namespace pdlatent {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  if (!s.empty() && s.back() == ',') out.emplace_back();
  return out;
}

struct Key {
  const char* section;
  const char* name;
  std::function<void(PipelineConfig&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

[[noreturn]] void bad(const std::string& what, const std::string& value) {
  throw ConfigError("invalid value '" + value + "' for " + what);
}

double to_double(const std::string& v, const std::string& what) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) bad(what, v);
    return d;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad(what, v);
  }
}

long long to_int(const std::string& v, const std::string& what) {
  try {
    std::size_t used = 0;
    const long long d = std::stoll(v, &used);
    if (used != v.size()) bad(what, v);
    return d;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad(what, v);
  }
}

std::uint64_t to_u64(const std::string& v, const std::string& what) {
  if (v.empty() || v[0] == '-') bad(what, v);
  try {
    std::size_t used = 0;
    const auto d = std::stoull(v, &used);
    if (used != v.size()) bad(what, v);
    return d;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    bad(what, v);
  }
}

bool to_bool(const std::string& v, const std::string& what) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad(what, v);
}

std::vector<double> to_doubles(const std::string& v, std::size_t n, const std::string& what) {
  const auto parts = split_list(v);
  if (parts.size() != n) bad(what, v);
  std::vector<double> out;
  for (const auto& p : parts) out.push_back(to_double(p, what));
  return out;
}

// Shortest %g form that parses back to the same double.
std::string num(double v) {
  char buf[40];
  for (int prec = 6; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "," : "") + parts[i];
  return out;
}

std::string dims_str(const Dims& d) {
  return std::to_string(d.nx) + "," + std::to_string(d.ny) + "," + std::to_string(d.nz);
}

Dims to_dims(const std::string& v, const std::string& what) {
  const auto p = split_list(v);
  if (p.size() != 3) bad(what, v);
  return {static_cast<int>(to_int(p[0], what)), static_cast<int>(to_int(p[1], what)), static_cast<int>(to_int(p[2], what))};
}

std::string auto_int(int v) { return v < 0 ? "auto" : std::to_string(v); }
int to_auto_int(const std::string& v, const std::string& what) {
  if (v == "auto") return -1;
  const auto i = to_int(v, what);
  if (i < 0) bad(what, v);
  return static_cast<int>(i);
}

#define FIELD_INT(sec, key, member)                                                                  \
  Key { sec, key, [](PipelineConfig& c, const std::string& v) { c.member = static_cast<int>(to_int(v, sec "." key)); }, \
        [](const PipelineConfig& c) { return std::to_string(c.member); } }
#define FIELD_DOUBLE(sec, key, member)                                                               \
  Key { sec, key, [](PipelineConfig& c, const std::string& v) { c.member = to_double(v, sec "." key); }, \
        [](const PipelineConfig& c) { return num(c.member); } }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    // [run]
    k.push_back({"run", "seed", [](PipelineConfig& c, const std::string& v) { c.seed = to_u64(v, "run.seed"); },
                 [](const PipelineConfig& c) { return std::to_string(c.seed); }});
    k.push_back({"run", "out_dir", [](PipelineConfig& c, const std::string& v) { c.out_dir = v; },
                 [](const PipelineConfig& c) { return c.out_dir.string(); }});
    k.push_back(FIELD_INT("run", "threads", threads));
    k.push_back({"run", "format",
                 [](PipelineConfig& c, const std::string& v) {
                   if (v == "rawf32") c.format = VolumeFormat::RawF32;
                   else if (v == "nifti") c.format = VolumeFormat::Nifti1;
                   else bad("run.format", v);
                 },
                 [](const PipelineConfig& c) { return std::string(c.format == VolumeFormat::Nifti1 ? "nifti" : "rawf32"); }});
    // [phantom]
    k.push_back({"phantom", "input_manifest", [](PipelineConfig& c, const std::string& v) { c.input_manifest = v; },
                 [](const PipelineConfig& c) { return c.input_manifest.string(); }});
    k.push_back(FIELD_INT("phantom", "n", n));
    k.push_back({"phantom", "dims", [](PipelineConfig& c, const std::string& v) { c.dims = to_dims(v, "phantom.dims"); },
                 [](const PipelineConfig& c) { return dims_str(c.dims); }});
    k.push_back({"phantom", "spacing",
                 [](PipelineConfig& c, const std::string& v) {
                   const auto s = to_doubles(v, 3, "phantom.spacing");
                   c.spacing = {s[0], s[1], s[2]};
                 },
                 [](const PipelineConfig& c) { return num(c.spacing.sx) + "," + num(c.spacing.sy) + "," + num(c.spacing.sz); }});
    k.push_back(FIELD_DOUBLE("phantom", "noise_sigma", noise_sigma));
    auto range_key = [](const char* name, std::array<double, 2> FactorRanges::*member) {
      return Key{"phantom", name,
                 [=](PipelineConfig& c, const std::string& v) {
                   const auto r = to_doubles(v, 2, std::string("phantom.") + name);
                   (c.ranges.*member) = {r[0], r[1]};
                 },
                 [=](const PipelineConfig& c) { return num((c.ranges.*member)[0]) + "," + num((c.ranges.*member)[1]); }};
    };
    k.push_back(range_key("amplitude_range", &FactorRanges::amplitude));
    k.push_back(range_key("ap_ratio_range", &FactorRanges::ap_ratio));
    k.push_back(range_key("separation_range", &FactorRanges::separation));
    for (std::size_t part = 0; part < 4; ++part) {
      static const char* names[] = {"score_updrs1", "score_updrs2", "score_updrs3", "score_updrs4"};
      k.push_back({"phantom", names[part],
                   [=](PipelineConfig& c, const std::string& v) {
                     const auto s = to_doubles(v, 5, std::string("phantom.") + names[part]);
                     c.scores.parts[part] = {s[0], s[1], s[2], s[3], s[4]};
                   },
                   [=](const PipelineConfig& c) {
                     const auto& p = c.scores.parts[part];
                     return join({num(p.c0), num(p.c1), num(p.c2), num(p.c3), num(p.sigma)});
                   }});
    }
    // [preprocess]
    k.push_back({"preprocess", "target_dims",
                 [](PipelineConfig& c, const std::string& v) {
                   if (v == "auto") c.target_dims.reset();
                   else c.target_dims = to_dims(v, "preprocess.target_dims");
                 },
                 [](const PipelineConfig& c) { return c.target_dims ? dims_str(*c.target_dims) : std::string("auto"); }});
    k.push_back(FIELD_INT("preprocess", "downsample", downsample));
    k.push_back({"preprocess", "compress", [](PipelineConfig& c, const std::string& v) { c.compress = to_bool(v, "preprocess.compress"); },
                 [](const PipelineConfig& c) { return std::string(c.compress ? "true" : "false"); }});
    k.push_back(FIELD_DOUBLE("preprocess", "compress_percentile", compress_percentile));
    auto opt_key = [](const char* name, std::optional<double> PipelineConfig::*member) {
      return Key{"preprocess", name,
                 [=](PipelineConfig& c, const std::string& v) {
                   if (v == "auto") (c.*member).reset();
                   else c.*member = to_double(v, std::string("preprocess.") + name);
                 },
                 [=](const PipelineConfig& c) { return (c.*member) ? num(*(c.*member)) : std::string("auto"); }};
    };
    k.push_back(opt_key("tau", &PipelineConfig::tau));
    k.push_back(opt_key("w", &PipelineConfig::w));
    // [cvae]
    k.push_back(FIELD_INT("cvae", "latent_dim", latent_dim));
    k.push_back(FIELD_DOUBLE("cvae", "beta", beta));
    k.push_back(FIELD_DOUBLE("cvae", "lr", lr));
    k.push_back(FIELD_INT("cvae", "epochs", epochs));
    k.push_back(FIELD_INT("cvae", "batch_size", batch_size));
    k.push_back({"cvae", "channels",
                 [](PipelineConfig& c, const std::string& v) {
                   const auto p = split_list(v);
                   if (p.size() != 4) bad("cvae.channels", v);
                   c.channels.clear();
                   for (const auto& s : p) c.channels.push_back(static_cast<int>(to_int(s, "cvae.channels")));
                 },
                 [](const PipelineConfig& c) {
                   std::vector<std::string> p;
                   for (int ch : c.channels) p.push_back(std::to_string(ch));
                   return join(p);
                 }});
    k.push_back(FIELD_INT("cvae", "hidden", hidden));
    // [features]
    k.push_back({"features", "kmeans_k",
                 [](PipelineConfig& c, const std::string& v) {
                   c.kmeans_k = v == "auto" ? 0 : static_cast<int>(to_int(v, "features.kmeans_k"));
                   if (v != "auto" && c.kmeans_k < 1) bad("features.kmeans_k", v);
                 },
                 [](const PipelineConfig& c) { return c.kmeans_k == 0 ? std::string("auto") : std::to_string(c.kmeans_k); }});
    k.push_back(FIELD_INT("features", "kmeans_max_iter", kmeans_max_iter));
    k.push_back(FIELD_DOUBLE("features", "kmeans_tol", kmeans_tol));
    // [trees]
    k.push_back(FIELD_INT("trees", "dt_max_depth", cart.max_depth));
    k.push_back(FIELD_INT("trees", "dt_min_samples_leaf", cart.min_samples_leaf));
    k.push_back(FIELD_INT("trees", "gbt_rounds", gbt.n_rounds));
    k.push_back(FIELD_DOUBLE("trees", "gbt_eta", gbt.eta));
    k.push_back(FIELD_INT("trees", "gbt_max_depth", gbt.max_depth));
    k.push_back(FIELD_DOUBLE("trees", "gbt_lambda", gbt.lambda));
    k.push_back(FIELD_DOUBLE("trees", "gbt_gamma", gbt.gamma));
    k.push_back(FIELD_DOUBLE("trees", "gbt_min_child_weight", gbt.min_child_weight));
    // [cv]
    k.push_back(FIELD_INT("cv", "folds", folds));
    k.push_back({"cv", "targets", [](PipelineConfig& c, const std::string& v) { c.targets = split_list(v); },
                 [](const PipelineConfig& c) { return join(c.targets); }});
    k.push_back({"cv", "models",
                 [](PipelineConfig& c, const std::string& v) {
                   c.models.clear();
                   for (const auto& s : split_list(v)) c.models.push_back(parse_label(s));
                 },
                 [](const PipelineConfig& c) {
                   std::vector<std::string> p;
                   for (auto m : c.models) p.push_back(label_name(m));
                   return join(p);
                 }});
    k.push_back({"cv", "fit_mode",
                 [](PipelineConfig& c, const std::string& v) {
                   if (v == "all") c.fit_mode = FitMode::All;
                   else if (v == "train_folds") c.fit_mode = FitMode::TrainFolds;
                   else bad("cv.fit_mode", v);
                 },
                 [](const PipelineConfig& c) { return std::string(c.fit_mode == FitMode::All ? "all" : "train_folds"); }});
    k.push_back({"cv", "split",
                 [](PipelineConfig& c, const std::string& v) {
                   if (v == "subject") c.split = SplitMode::Subject;
                   else if (v == "row") c.split = SplitMode::Row;
                   else bad("cv.split", v);
                 },
                 [](const PipelineConfig& c) { return std::string(c.split == SplitMode::Subject ? "subject" : "row"); }});
    // [shap]
    k.push_back({"shap", "target", [](PipelineConfig& c, const std::string& v) { c.shap_target = v; },
                 [](const PipelineConfig& c) { return c.shap_target; }});
    k.push_back({"shap", "model", [](PipelineConfig& c, const std::string& v) { c.shap_model = parse_label(v); },
                 [](const PipelineConfig& c) { return label_name(c.shap_model); }});
    k.push_back({"shap", "feature", [](PipelineConfig& c, const std::string& v) { c.shap_feature = to_auto_int(v, "shap.feature"); },
                 [](const PipelineConfig& c) { return auto_int(c.shap_feature); }});
    k.push_back({"shap", "color", [](PipelineConfig& c, const std::string& v) { c.shap_color = to_auto_int(v, "shap.color"); },
                 [](const PipelineConfig& c) { return auto_int(c.shap_color); }});
    // [manifold]
    k.push_back(FIELD_INT("manifold", "grid", grid));
    k.push_back(FIELD_DOUBLE("manifold", "lo", grid_lo));
    k.push_back(FIELD_DOUBLE("manifold", "hi", grid_hi));
    k.push_back({"manifold", "feat_a", [](PipelineConfig& c, const std::string& v) { c.feat_a = to_auto_int(v, "manifold.feat_a"); },
                 [](const PipelineConfig& c) { return auto_int(c.feat_a); }});
    k.push_back({"manifold", "feat_b", [](PipelineConfig& c, const std::string& v) { c.feat_b = to_auto_int(v, "manifold.feat_b"); },
                 [](const PipelineConfig& c) { return auto_int(c.feat_b); }});
    k.push_back({"manifold", "axis",
                 [](PipelineConfig& c, const std::string& v) {
                   if (v == "axial") c.axis = SliceAxis::Axial;
                   else if (v == "coronal") c.axis = SliceAxis::Coronal;
                   else if (v == "sagittal") c.axis = SliceAxis::Sagittal;
                   else bad("manifold.axis", v);
                 },
                 [](const PipelineConfig& c) {
                   return std::string(c.axis == SliceAxis::Axial ? "axial" : (c.axis == SliceAxis::Coronal ? "coronal" : "sagittal"));
                 }});
    k.push_back({"manifold", "slice", [](PipelineConfig& c, const std::string& v) { c.slice = to_auto_int(v, "manifold.slice"); },
                 [](const PipelineConfig& c) { return auto_int(c.slice); }});
    return k;
  }();
  return table;
}

#undef FIELD_INT
#undef FIELD_DOUBLE

}  // namespace

void PipelineConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  auto nested = [](auto&& check) {
    try {
      check();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  };
  require(threads >= 1, "run.threads must be >= 1");
  require(n >= 1, "phantom.n must be >= 1");
  require(dims.valid(), "phantom.dims must be positive");
  require(spacing.sx > 0 && spacing.sy > 0 && spacing.sz > 0, "phantom.spacing must be positive");
  require(noise_sigma >= 0, "phantom.noise_sigma must be >= 0");
  nested([&] { ranges.validate(); });
  require(!target_dims || target_dims->valid(), "preprocess.target_dims must be positive");
  require(downsample >= 1, "preprocess.downsample must be >= 1");
  require(compress_percentile > 0 && compress_percentile < 100, "preprocess.compress_percentile must be in (0, 100)");
  require(!w || *w > 0, "preprocess.w must be > 0");
  nested([&] { cvae_config(0).validate(); });
  require(kmeans_k >= 0, "features.kmeans_k must be auto or >= 1");
  require(kmeans_max_iter >= 1, "features.kmeans_max_iter must be >= 1");
  require(kmeans_tol >= 0, "features.kmeans_tol must be >= 0");
  nested([&] { cart.validate(); });
  nested([&] { gbt.validate(); });
  require(folds >= 2, "cv.folds must be >= 2");
  require(!targets.empty(), "cv.targets must not be empty");
  for (const auto& t : targets) {
    require(std::find(kScoreNames.begin(), kScoreNames.end(), t) != kScoreNames.end(), "unknown cv target '" + t + "'");
  }
  require(!models.empty(), "cv.models must not be empty");
  require(std::find(kScoreNames.begin(), kScoreNames.end(), shap_target) != kScoreNames.end(),
          "unknown shap.target '" + shap_target + "'");
  require(grid >= 2, "manifold.grid must be >= 2");
  require(grid_hi > grid_lo, "manifold.lo must be below manifold.hi");
  require(feat_a < latent_dim && feat_b < latent_dim, "manifold features must be < cvae.latent_dim");
  require(feat_a < 0 || feat_a != feat_b, "manifold.feat_a and feat_b must differ");
}

Dims PipelineConfig::model_dims() const {
  if (target_dims) return *target_dims;
  return {(dims.nx + downsample - 1) / downsample, (dims.ny + downsample - 1) / downsample,
          (dims.nz + downsample - 1) / downsample};
}

CvaeConfig PipelineConfig::cvae_config(std::uint64_t s) const {
  CvaeConfig c;
  c.latent_dim = latent_dim;
  c.beta = beta;
  c.epochs = epochs;
  c.lr = lr;
  c.batch_size = batch_size;
  c.input_dims = model_dims();
  c.seed = s;
  c.channels = channels;
  c.hidden = hidden;
  return c;
}

CvOptions PipelineConfig::cv_options(std::uint64_t s) const {
  CvOptions o;
  o.folds = folds;
  o.seed = s;
  o.cart = cart;
  o.gbt = gbt;
  o.kmeans_k = kmeans_k;
  o.kmeans.max_iter = kmeans_max_iter;
  o.kmeans.tol = kmeans_tol;
  o.threads = threads;
  return o;
}

PipelineConfig parse_config(const std::string& text) {
  boost::property_tree::ptree tree;
  try {
    std::istringstream in(text);
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  PipelineConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config key '" + section + "' must be inside a section");
    }
    const auto& table = keys();
    if (std::none_of(table.begin(), table.end(), [&](const Key& k) { return section == k.section; })) {
      throw ConfigError("unknown config section [" + section + "]");
    }
    for (const auto& [name, value] : body) {
      auto it = std::find_if(table.begin(), table.end(),
                             [&](const Key& k) { return section == k.section && name == k.name; });
      if (it == table.end()) throw ConfigError("unknown config key [" + section + "] " + name);
      it->set(c, trim(value.data()));
    }
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_ini(const PipelineConfig& config) {
  std::string out;
  std::string section;
  for (const auto& k : keys()) {
    if (section != k.section) {
      if (!section.empty()) out += '\n';
      section = k.section;
      out += "[" + section + "]\n";
    }
    out += std::string(k.name) + " = " + k.get(config) + "\n";
  }
  return out;
}

std::string config_hash(const PipelineConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : config_to_ini(config)) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace pdlatent
