#include "jaf/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

namespace jaf::data {

namespace fs = std::filesystem;
using nlohmann::json;

// Token layout: pad, mask, one token per field name, then each field's value
// tokens in field order.
std::int64_t field_token(std::size_t field) {
  if (field >= kReportFields) throw DataError("report field index out of range");
  return 2 + static_cast<std::int64_t>(field);
}

std::int64_t value_token(std::size_t field, std::size_t bin) {
  if (field >= kReportFields) throw DataError("report field index out of range");
  if (bin >= kFieldBins[field]) {
    throw DataError(std::string("report field ") + kFieldNames[field] + " bin " +
                    std::to_string(bin) + " outside [0, " + std::to_string(kFieldBins[field]) +
                    ")");
  }
  std::size_t base = 2 + kReportFields;
  for (std::size_t f = 0; f < field; ++f) base += kFieldBins[f];
  return static_cast<std::int64_t>(base + bin);
}

std::size_t vocab_size() {
  return 2 + kReportFields + std::accumulate(kFieldBins.begin(), kFieldBins.end(), std::size_t{0});
}

enc::TextSequence render_report(const ReportMeta& meta) {
  enc::TextSequence seq;
  seq.vocab_size = vocab_size();
  for (std::size_t f = 0; f < kReportFields; ++f) {
    seq.token_ids.push_back(field_token(f));
    seq.token_ids.push_back(value_token(f, meta.bins[f]));
  }
  seq.pad_mask.assign(seq.token_ids.size(), false);
  while (seq.token_ids.size() < kReportLength) {
    seq.token_ids.push_back(kPadToken);
    seq.pad_mask.push_back(true);
  }
  return seq;
}

// ---------------------------------------------------------------------------

void validate(const GenConfig& c) {
  if (c.n < 2) throw ConfigError("dataset needs at least two cases");
  if (!(c.bad_fraction > 0.0 && c.bad_fraction < 1.0)) {
    throw ConfigError("bad_fraction must lie in (0, 1)");
  }
  if (c.extent < 8) throw ConfigError("volume extent must be at least 8");
  if (c.vision_signal < 0 || c.text_signal < 0 || c.text_background_signal < 0 ||
      c.age_signal < 0) {
    throw ConfigError("signal strengths must be non-negative");
  }
  if (c.complementarity < 0.0 || c.complementarity > 1.0) {
    throw ConfigError("complementarity must lie in [0, 1]");
  }
  if (!(c.radius_min > 0.0) || c.radius_max < c.radius_min) {
    throw ConfigError("lesion radius range is empty");
  }
  if (c.anisotropy < 0.0 || c.anisotropy >= 1.0) throw ConfigError("anisotropy must be in [0, 1)");
  if (c.contrast_max_hu < c.contrast_min_hu) throw ConfigError("lesion contrast range is empty");
  if (c.noise_hu < 0.0 || c.depth_jitter < 0.0 || c.plane_jitter < 0.0) {
    throw ConfigError("noise and jitter must be non-negative");
  }
  if (c.folds < 2) throw ConfigError("need at least two folds");

  const double reach = c.radius_max * (1.0 + c.anisotropy);
  const double last = static_cast<double>(c.extent - 1);
  if (c.depth_center - c.depth_jitter - reach < 0.0 ||
      c.depth_center + c.depth_jitter + reach > last) {
    throw DataError("lesion depth range leaves the volume");
  }
  if (std::sqrt(2.0) * c.plane_jitter + reach >= c.skull_radius) {
    throw DataError("lesion in-plane range reaches the skull");
  }
  if (c.skull_radius + 1.5 > last / 2.0 + 0.5) {
    throw DataError("skull radius does not fit the volume");
  }
}

std::array<int, 6> LesionMeta::bounding_box() const {
  std::array<int, 6> box{};
  for (int a = 0; a < 3; ++a) {
    box[a] = static_cast<int>(std::ceil(center[a] - radii[a]));
    box[a + 3] = static_cast<int>(std::floor(center[a] + radii[a]));
  }
  return box;
}

double LesionMeta::volume() const {
  return 4.0 / 3.0 * std::numbers::pi * radii[0] * radii[1] * radii[2];
}

namespace {

std::mt19937_64 case_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eedu};
  return std::mt19937_64(seq);
}

// Bin a standard-ish latent with unit-spaced edges centred on zero.
std::size_t bin_latent(double x, std::size_t bins) {
  const double lowest = -0.5 * static_cast<double>(bins - 2);
  std::size_t b = 0;
  while (b + 1 < bins && x >= lowest + static_cast<double>(b)) ++b;
  return b;
}

Tensor render_volume(const GenConfig& c, const LesionMeta& lesion, std::mt19937_64& rng) {
  const std::size_t n = c.extent, plane = n * n;
  std::normal_distribution<double> noise(0.0, c.noise_hu);
  std::vector<double> v(n * plane), tmp(n * plane);
  for (auto& x : v) x = noise(rng);
  // Separable [1 2 1]/4 smoothing along each axis, edges clamped.
  const std::array<std::size_t, 3> stride{plane, n, 1};
  for (int axis = 0; axis < 3; ++axis) {
    for (std::size_t d = 0; d < n; ++d)
      for (std::size_t h = 0; h < n; ++h)
        for (std::size_t w = 0; w < n; ++w) {
          const std::size_t i = d * plane + h * n + w;
          const std::size_t coord = axis == 0 ? d : axis == 1 ? h : w;
          const std::size_t lo = coord == 0 ? i : i - stride[axis];
          const std::size_t hi = coord + 1 == n ? i : i + stride[axis];
          tmp[i] = 0.25 * v[lo] + 0.5 * v[i] + 0.25 * v[hi];
        }
    v.swap(tmp);
  }
  const double mid = 0.5 * static_cast<double>(n - 1);
  for (std::size_t d = 0; d < n; ++d)
    for (std::size_t h = 0; h < n; ++h)
      for (std::size_t w = 0; w < n; ++w) {
        double& x = v[d * plane + h * n + w];
        const double r = std::hypot(double(h) - mid, double(w) - mid);
        if (r > c.skull_radius + 1.5) {
          x = -1000.0 + x;
        } else if (r > c.skull_radius) {
          x = 1000.0 + x;
        } else {
          x += c.brain_hu;
          double e = 0.0;
          const std::array<double, 3> p{double(d), double(h), double(w)};
          for (int a = 0; a < 3; ++a) {
            const double q = (p[a] - lesion.center[a]) / lesion.radii[a];
            e += q * q;
          }
          if (e <= 1.0) x += lesion.contrast_hu;
        }
      }
  return Tensor({n, n, n}, std::move(v));
}

}  // namespace

std::vector<SyntheticCase> generate_dataset(const GenConfig& cfg) {
  validate(cfg);
  std::mt19937_64 master(cfg.seed);
  const auto n_bad = static_cast<std::size_t>(std::llround(cfg.bad_fraction * double(cfg.n)));
  if (n_bad == 0 || n_bad == cfg.n) throw ConfigError("class balance leaves a class empty");
  std::vector<int> labels(cfg.n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_bad), 1);
  std::shuffle(labels.begin(), labels.end(), master);
  const auto n_comp = static_cast<std::size_t>(std::llround(cfg.complementarity * double(cfg.n)));
  std::vector<std::size_t> order(cfg.n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), master);
  std::vector<bool> comp(cfg.n, false);
  for (std::size_t k = 0; k < n_comp; ++k) comp[order[k]] = true;

  const double mid = 0.5 * static_cast<double>(cfg.extent - 1);
  std::vector<SyntheticCase> cases(cfg.n);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    auto rng = case_rng(cfg.seed, i);
    std::normal_distribution<double> std_normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    auto& c = cases[i];
    char id[32];
    std::snprintf(id, sizeof id, "case_%03zu", i);
    c.id = id;
    c.label = labels[i];
    c.text_only_signal = comp[i];
    const double sign = c.label == 1 ? 1.0 : -1.0;

    auto& les = c.lesion;
    les.severity = std_normal(rng) + (comp[i] ? 0.0 : sign * cfg.vision_signal);
    const double u = 0.5 * std::erfc(-les.severity / std::numbers::sqrt2);
    const double radius = cfg.radius_min + u * (cfg.radius_max - cfg.radius_min);
    les.contrast_hu = cfg.contrast_min_hu + u * (cfg.contrast_max_hu - cfg.contrast_min_hu);
    for (auto& r : les.radii) r = radius * (1.0 + cfg.anisotropy * unit(rng));
    les.center = {cfg.depth_center + cfg.depth_jitter * unit(rng), mid + cfg.plane_jitter * unit(rng),
                  mid + cfg.plane_jitter * unit(rng)};

    auto& bins = c.report_meta.bins;
    bins[0] = std::uniform_int_distribution<std::size_t>(0, kFieldBins[0] - 1)(rng);
    bins[1] = bin_latent(std_normal(rng) + sign * cfg.age_signal, kFieldBins[1]);
    bins[2] = std::uniform_int_distribution<std::size_t>(0, kFieldBins[2] - 1)(rng);
    bins[3] = std::uniform_int_distribution<std::size_t>(0, kFieldBins[3] - 1)(rng);
    const double gcs_shift = comp[i] ? cfg.text_signal : cfg.text_background_signal;
    bins[4] = bin_latent(std_normal(rng) - sign * gcs_shift, kFieldBins[4]);
    c.report = render_report(c.report_meta);

    c.volume.values = render_volume(cfg, les, rng);
  }
  return cases;
}

// ---------------------------------------------------------------------------

enc::Volume preprocess_volume(const enc::Volume& vol, Window window) {
  if (!(window.hi > window.lo)) throw ConfigError("window upper bound must exceed lower bound");
  const auto in = vol.values.data();
  if (in.empty()) throw DataError("empty volume");
  std::vector<double> v(in.begin(), in.end());
  for (auto& x : v) x = std::clamp(x, window.lo, window.hi);
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n);
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
    throw DataError("volume is constant after windowing; cannot standardize");
  }
  for (auto& x : v) x = (x - mean) / sd;
  return {Tensor(vol.values.shape(), std::move(v)), vol.spacing_mm};
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> FoldPlan::validation(std::size_t fold) const {
  if (fold >= k) throw ConfigError("fold " + std::to_string(fold) + " outside [0, " +
                                   std::to_string(k) + ")");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i)
    if (fold_of[i] == fold) out.push_back(i);
  return out;
}

std::vector<std::size_t> FoldPlan::training(std::size_t fold) const {
  if (fold >= k) throw ConfigError("fold " + std::to_string(fold) + " outside [0, " +
                                   std::to_string(k) + ")");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i)
    if (fold_of[i] != fold) out.push_back(i);
  return out;
}

FoldPlan make_folds(const std::vector<int>& labels, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("need at least two folds");
  if (labels.size() < k) {
    throw DataError(std::to_string(labels.size()) + " samples cannot fill " + std::to_string(k) +
                    " folds");
  }
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DataError("labels must be 0 or 1");
    by_class[labels[i]].push_back(i);
  }
  if (by_class[0].empty() || by_class[1].empty()) {
    throw DataError("fold planning needs both classes present");
  }
  FoldPlan plan{k, seed, std::vector<std::size_t>(labels.size(), 0)};
  std::mt19937_64 rng(seed);
  std::size_t deal = 0;
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    for (auto i : members) plan.fold_of[i] = deal++ % k;
  }
  return plan;
}

// ---------------------------------------------------------------------------

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  for (const auto& c : cases) out.push_back(c.label);
  return out;
}

std::size_t Dataset::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < cases.size(); ++i)
    if (cases[i].id == id) return i;
  throw DataError("no case with id " + id);
}

Dataset build_dataset(const GenConfig& cfg) {
  Dataset ds;
  ds.config = cfg;
  ds.cases = generate_dataset(cfg);
  ds.folds = make_folds(ds.labels(), cfg.folds, cfg.seed);
  return ds;
}

namespace {

// Every GenConfig field with its key, shared by JSON and key=value parsing.
template <typename F>
void for_each_gen_field(GenConfig& c, F&& f) {
  f("n", c.n);
  f("bad_fraction", c.bad_fraction);
  f("extent", c.extent);
  f("radius_min", c.radius_min);
  f("radius_max", c.radius_max);
  f("anisotropy", c.anisotropy);
  f("contrast_min_hu", c.contrast_min_hu);
  f("contrast_max_hu", c.contrast_max_hu);
  f("depth_center", c.depth_center);
  f("depth_jitter", c.depth_jitter);
  f("plane_jitter", c.plane_jitter);
  f("brain_hu", c.brain_hu);
  f("noise_hu", c.noise_hu);
  f("skull_radius", c.skull_radius);
  f("vision_signal", c.vision_signal);
  f("text_signal", c.text_signal);
  f("text_background_signal", c.text_background_signal);
  f("age_signal", c.age_signal);
  f("complementarity", c.complementarity);
  f("seed", c.seed);
  f("folds", c.folds);
}

json config_to_json(GenConfig c) {
  json j;
  for_each_gen_field(c, [&](const char* key, auto& v) { j[key] = v; });
  return j;
}

GenConfig config_from_json(const json& j) {
  GenConfig c;
  for_each_gen_field(c, [&](const char* key, auto& v) {
    if (!j.contains(key)) throw DataError(std::string("genconfig.json lacks key ") + key);
    j.at(key).get_to(v);
  });
  return c;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  const fs::path root(dir);
  fs::create_directories(root);
  write_json(root / "genconfig.json", config_to_json(ds.config));
  write_json(root / "folds.json",
             json{{"k", ds.folds.k}, {"seed", ds.folds.seed}, {"fold_of", ds.folds.fold_of}});
  for (const auto& c : ds.cases) {
    const fs::path cdir = root / c.id;
    fs::create_directories(cdir);
    save_tensor((cdir / "volume.bin").string(), c.volume.values);
    json fields;
    for (std::size_t f = 0; f < kReportFields; ++f) fields[kFieldNames[f]] = c.report_meta.bins[f];
    json report{{"id", c.id},
                {"label", c.label},
                {"text_only_signal", c.text_only_signal},
                {"vocab_size", c.report.vocab_size},
                {"token_ids", c.report.token_ids},
                {"pad_mask", c.report.pad_mask},
                {"fields", fields},
                {"spacing_mm", c.volume.spacing_mm},
                {"lesion",
                 {{"center", c.lesion.center},
                  {"radii", c.lesion.radii},
                  {"contrast_hu", c.lesion.contrast_hu},
                  {"severity", c.lesion.severity}}}};
    write_json(cdir / "report.json", report);
  }
}

Dataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  Dataset ds;
  ds.config = config_from_json(read_json(root / "genconfig.json"));
  const auto folds = read_json(root / "folds.json");
  try {
    folds.at("k").get_to(ds.folds.k);
    folds.at("seed").get_to(ds.folds.seed);
    folds.at("fold_of").get_to(ds.folds.fold_of);
    for (std::size_t i = 0; i < ds.folds.fold_of.size(); ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "case_%03zu", i);
      const fs::path cdir = root / id;
      const auto r = read_json(cdir / "report.json");
      SyntheticCase c;
      r.at("id").get_to(c.id);
      r.at("label").get_to(c.label);
      r.at("text_only_signal").get_to(c.text_only_signal);
      r.at("vocab_size").get_to(c.report.vocab_size);
      r.at("token_ids").get_to(c.report.token_ids);
      r.at("pad_mask").get_to(c.report.pad_mask);
      r.at("spacing_mm").get_to(c.volume.spacing_mm);
      for (std::size_t f = 0; f < kReportFields; ++f)
        r.at("fields").at(kFieldNames[f]).get_to(c.report_meta.bins[f]);
      const auto& les = r.at("lesion");
      les.at("center").get_to(c.lesion.center);
      les.at("radii").get_to(c.lesion.radii);
      les.at("contrast_hu").get_to(c.lesion.contrast_hu);
      les.at("severity").get_to(c.lesion.severity);
      enc::validate(c.report);
      c.volume.values = load_tensor((cdir / "volume.bin").string());
      ds.cases.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw DataError(dir + ": malformed dataset metadata: " + e.what());
  }
  if (ds.cases.size() != ds.config.n) {
    throw DataError(dir + ": fold plan covers " + std::to_string(ds.cases.size()) +
                    " cases, config says " + std::to_string(ds.config.n));
  }
  return ds;
}

// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    }
    auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (kv.count(key)) throw ConfigError("config key '" + key + "' given twice");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

void apply_gen_config(KeyValues& kv, GenConfig& cfg) {
  for_each_gen_field(cfg, [&](const char* key, auto& v) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    std::istringstream in(it->second);
    in >> v;
    if (!in || !(in >> std::ws).eof()) {
      throw ConfigError(std::string("config key ") + key + ": cannot parse '" + it->second + "'");
    }
    kv.erase(it);
  });
}

}  // namespace jaf::data
