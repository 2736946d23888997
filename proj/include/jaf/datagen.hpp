#pragma once

// Synthetic bimodal prognosis cohort: scan volumes with a planted lesion,
// templated clinical reports, preprocessing and stratified fold plans.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "jaf/encoders.hpp"

namespace jaf::data {

class DataError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Report vocabulary. A report is five (field, value) token pairs followed by
// padding to kReportLength.

inline constexpr std::int64_t kPadToken = 0;
inline constexpr std::int64_t kMaskToken = 1;
inline constexpr std::size_t kReportFields = 5;
inline constexpr std::size_t kReportLength = 12;
// Bin counts for sex, age, onset-to-scan time, hospital stay, coma score.
inline constexpr std::array<std::size_t, kReportFields> kFieldBins{2, 6, 4, 4, 5};
inline constexpr std::array<const char*, kReportFields> kFieldNames{"sex", "age_band",
                                                                    "onset_band", "stay_band",
                                                                    "gcs_band"};
std::int64_t field_token(std::size_t field);
std::int64_t value_token(std::size_t field, std::size_t bin);
std::size_t vocab_size();

/// Binned clinical fields, indexed like kFieldNames. Lower coma-score bins are
/// more severe.
struct ReportMeta {
  std::array<std::size_t, kReportFields> bins{};
};

/// Fixed template: field token, value token per field, then padding.
/// Throws DataError when a bin is outside its field's range.
enc::TextSequence render_report(const ReportMeta& meta);

// ---------------------------------------------------------------------------

struct GenConfig {
  std::size_t n = 300;
  double bad_fraction = 0.5;
  std::size_t extent = 32;  // cubic volume side
  // Lesion geometry. Radius and contrast grow monotonically with a latent
  // severity; the centre is jittered around (depth_center, mid, mid) and each
  // semi-axis is the radius times a factor in [1 - anisotropy, 1 + anisotropy].
  double radius_min = 2.0, radius_max = 5.0, anisotropy = 0.15;
  double contrast_min_hu = 20.0, contrast_max_hu = 45.0;
  double depth_center = 12.0, depth_jitter = 1.5;
  double plane_jitter = 6.0;
  double brain_hu = 30.0, noise_hu = 4.0;
  double skull_radius = 14.5;  // in-plane; bone outside, air in the corners
  // Label signal strengths (separation of the latent class means).
  double vision_signal = 1.5;
  double text_signal = 3.0;             // coma score on text-only cases
  double text_background_signal = 0.2;  // coma score elsewhere
  double age_signal = 0.3;
  double complementarity = 0.3;  // share of cases whose lesion ignores the label
  std::uint64_t seed = 1;
  std::size_t folds = 5;
};

/// Throws ConfigError on invalid values and DataError when the lesion ranges
/// can leave the volume or cross the skull.
void validate(const GenConfig& cfg);

struct LesionMeta {
  std::array<double, 3> center{};  // voxel coordinates (d, h, w)
  std::array<double, 3> radii{};   // ellipsoid semi-axes, same order
  double contrast_hu = 0.0;
  double severity = 0.0;  // latent driving radius and contrast

  /// Inclusive voxel bounding box {d0, h0, w0, d1, h1, w1}.
  std::array<int, 6> bounding_box() const;
  double volume() const;
};

struct SyntheticCase {
  std::string id;
  enc::Volume volume;  // raw Hounsfield units, [D x H x W]
  enc::TextSequence report;
  ReportMeta report_meta;
  LesionMeta lesion;
  int label = 0;  // 1 = bad prognosis
  bool text_only_signal = false;
};

std::vector<SyntheticCase> generate_dataset(const GenConfig& cfg);

// ---------------------------------------------------------------------------

struct Window {
  double lo = 0.0, hi = 80.0;
};

/// Clamp to the window, then z-score over the whole volume (population std).
/// Throws DataError when the clamped volume is constant.
enc::Volume preprocess_volume(const enc::Volume& vol, Window window = {});

// ---------------------------------------------------------------------------

struct FoldPlan {
  std::size_t k = 5;
  std::uint64_t seed = 0;
  std::vector<std::size_t> fold_of;  // per sample

  std::vector<std::size_t> validation(std::size_t fold) const;
  std::vector<std::size_t> training(std::size_t fold) const;
};

/// Stratified shuffle split: each class is shuffled and dealt round-robin,
/// continuing the deal position across classes so fold sizes stay within one.
FoldPlan make_folds(const std::vector<int>& labels, std::size_t k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// On-disk layout:
//   <dir>/genconfig.json, <dir>/folds.json,
//   <dir>/<case id>/volume.bin, <dir>/<case id>/report.json

struct Dataset {
  GenConfig config;
  std::vector<SyntheticCase> cases;
  FoldPlan folds;

  std::vector<int> labels() const;
  std::size_t index_of(const std::string& id) const;
};

Dataset build_dataset(const GenConfig& cfg);
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// ---------------------------------------------------------------------------
// Flat key=value configuration files. '#' starts a comment; blank lines are
// ignored. Unknown keys are reported by the consumers.

using KeyValues = std::map<std::string, std::string>;
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::string& path);

/// Applies recognized keys to `cfg`, erasing them from `kv`.
void apply_gen_config(KeyValues& kv, GenConfig& cfg);

}  // namespace jaf::data
