#pragma once

// Prognosis model assembly, training loop, metrics, ablation grids and
// Score-CAM heatmaps.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "jaf/datagen.hpp"
#include "jaf/encoders.hpp"
#include "jaf/fusion.hpp"
#include "jaf/losses.hpp"

namespace jaf::train {

enum class Mode { Text, Vision, Fused };
enum class Topology { Self, Cross, SelfSelf, CrossCross, SelfCross, CrossSelf };

std::string to_string(Mode m);
std::string to_string(Topology t);
Mode parse_mode(const std::string& s);
Topology parse_topology(const std::string& s);
const std::vector<Topology>& all_topologies();

/// Which joint-objective components are active. The classification
/// cross-entropy is always on.
struct LossSwitches {
  bool imima = true, sdm = true, mlm = true;

  std::string name() const;  // "imima", "imima+sdm", "vtmf", "ce", ...
  bool any() const { return imima || sdm || mlm; }
  bool operator==(const LossSwitches&) const = default;
};
LossSwitches parse_loss(const std::string& s);
const std::vector<LossSwitches>& loss_grid();

struct ModelConfig {
  Mode mode = Mode::Fused;
  Topology topology = Topology::CrossSelf;
  std::size_t vocab = 0;
  std::size_t seq_len = 0;
  std::size_t extent = 32;
  std::size_t text_dim = 16;
  std::vector<std::size_t> vision_channels{1, 4, 8, 16};  // input channel first
  enc::UnifiedShape unified{};
  std::size_t heads = 4;
  std::size_t head_width = 64;
};

struct TrainConfig {
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch = 16;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<std::size_t> folds;  // empty = every fold of the plan
  LossSwitches losses{};
  loss::LossWeights weights{};
  bool train_loss_weights = false;  // alpha/beta frozen unless set
  double mask_rate = 0.15;
  data::Window window{};
  ModelConfig model{};
  std::size_t threads = 1;  // 0 = hardware concurrency
  std::string data_dir;
  std::string out_dir;
};

void validate(const TrainConfig& cfg);

/// Applies recognized keys (documented in the README) and erases them;
/// leftover keys are an error.
void apply_train_config(data::KeyValues& kv, TrainConfig& cfg);
std::string train_config_text(const TrainConfig& cfg);

// ---------------------------------------------------------------------------

/// Dense classifier head: two width-w stages, each fed the concatenation of
/// the input and all earlier stage outputs, then a 2-way linear layer.
struct ClassifierHead {
  Linear stage1, stage2, logits;
  ParamSet params() const;
};
ClassifierHead make_head(std::size_t in, std::size_t width, std::mt19937_64& rng);
Tensor head_forward(const Tensor& x, const ClassifierHead& h);

struct FusionBlock {
  bool cross = false;
  fusion::MhsafParams self;
  fusion::CmafParams cmaf;
};

struct Model {
  ModelConfig cfg;
  enc::TextEncoderParams text;
  enc::VisionEncoderParams vision;
  enc::TrtParams trt;
  enc::VrtParams vrt;
  std::vector<FusionBlock> blocks;
  ClassifierHead head;
  Linear mlm_head;  // text features -> vocabulary logits
  Tensor alpha, beta;

  bool uses_text() const { return cfg.mode != Mode::Vision; }
  bool uses_vision() const { return cfg.mode != Mode::Text; }
  /// Every parameter block, including alpha and beta.
  ParamSet params() const;
};

Model make_model(const ModelConfig& cfg, const loss::LossWeights& weights, std::mt19937_64& rng);

struct ForwardResult {
  Tensor logits;           // [1 x 2]
  Tensor vision_rep;       // f^v [1 x D], undefined in text mode
  Tensor text_rep;         // mean-pooled f^t [1 x D], undefined in vision mode
  Tensor last_activation;  // last conv stage output, undefined in text mode
};

/// `volume` is preprocessed [D x H x W].
ForwardResult forward(const Model& m, const Tensor& volume, const enc::TextSequence& report);

/// Probability of the bad-prognosis class.
double predict(const Model& m, const Tensor& volume, const enc::TextSequence& report);

// ---------------------------------------------------------------------------

struct Adam {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t t = 0;
  std::vector<std::vector<double>> m, v;

  /// Updates every tensor in `params` from its accumulated gradient (absent
  /// gradients count as zero).
  void step(const ParamSet& params);
};

// ---------------------------------------------------------------------------

struct HistoryRow {
  std::size_t step = 0;
  double ce = 0, imima = 0, sdm = 0, mlm = 0, vtmf = 0, total = 0, alpha = 0, beta = 0;
};

/// Preprocessed volumes plus the labels and reports the trainer reads.
struct PreparedData {
  std::vector<Tensor> volumes;
  const data::Dataset* dataset = nullptr;
};
PreparedData prepare(const data::Dataset& ds, data::Window window);

struct FoldRun {
  Model model;
  std::vector<HistoryRow> history;
  std::vector<std::size_t> trained_indices;  // every index drawn into a minibatch
};

/// Trains one (fold, seed) cell. Throws Error when a training index lands in
/// the validation fold and NumericError when the loss stops being finite.
FoldRun train_fold(const TrainConfig& cfg, const PreparedData& data, std::size_t fold,
                   std::uint64_t seed);

// ---------------------------------------------------------------------------

struct RocPoint {
  double fpr, tpr, threshold;
};
struct RocResult {
  double auc = 0.0;
  std::vector<RocPoint> curve;  // starts at (0,0), ends at (1,1)
};

/// Descending-score sweep with tied scores grouped into one step; trapezoidal
/// area. Throws Error unless both classes are present.
RocResult roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct MetricsReport {
  double accuracy = 0, recall = 0, precision = 0, f1 = 0;
  std::optional<double> auc;  // absent for single-class splits
  Confusion confusion;
  std::vector<RocPoint> roc;
};

/// Positive class = 1. Hard predictions are score >= threshold. Undefined
/// precision (no positive predictions) is reported as 0.
MetricsReport compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                              double threshold = 0.5);

std::vector<double> predict_all(const Model& m, const PreparedData& data,
                                const std::vector<std::size_t>& indices);
MetricsReport evaluate(const Model& m, const PreparedData& data,
                       const std::vector<std::size_t>& indices);

// ---------------------------------------------------------------------------

struct CellKey {
  Mode mode;
  Topology topology;
  LossSwitches losses;

  std::string name() const;  // "fused_cross-self_vtmf"
  bool operator==(const CellKey&) const = default;
};

struct CellRun {
  CellKey key;
  std::size_t fold = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricsReport metrics;
  std::vector<double> scores;  // validation predictions, fold order
  std::vector<int> labels;
  std::vector<HistoryRow> history;
  std::optional<Model> model;
};

/// Trains and evaluates every (key, seed, fold) combination, spread over
/// cfg.threads workers. Output order is deterministic: keys, then seeds, then
/// folds. Failed cells carry the exception text.
std::vector<CellRun> run_cells(const TrainConfig& cfg, const PreparedData& data,
                               const std::vector<CellKey>& keys, bool keep_models = false);

struct AblationGrids {
  std::vector<CellKey> modality, topology, loss;
  std::vector<CellKey> unique() const;
};
AblationGrids ablation_grids();

/// Writes metrics.csv and confusion.csv (one row per cell), pooled.csv (one
/// row per key and seed, metrics over the concatenated validation folds),
/// roc_<cell>.csv, history_<cell>.csv and failures.txt.
void write_cell_outputs(const std::vector<CellRun>& runs, const std::string& dir);

/// One row per key: mean and sample std of every metric across its cells.
void write_summary_table(const std::vector<CellRun>& runs, const std::vector<CellKey>& rows,
                         const std::string& path);

struct KeySummary {
  std::size_t cells = 0, failed = 0;
  double mean_auc = 0.0;
};
KeySummary summarize(const std::vector<CellRun>& runs, const CellKey& key);

/// Runs the three grids (shared cells trained once) and writes metrics.csv,
/// per-cell files and table_modality.csv, table_topology.csv, table_loss.csv.
std::vector<CellRun> run_ablations(const TrainConfig& cfg, const PreparedData& data,
                                   const std::string& out_dir, bool keep_models = false);

// ---------------------------------------------------------------------------

/// floor(depth * 25 / 64).
std::size_t default_cam_slice(std::size_t depth);

struct CamResult {
  Tensor heatmap;  // [H x W], values in [0, 1]
  std::vector<double> channel_weights;
  bool degenerate = false;  // all activations zero; heatmap is uniform
};

/// Score-CAM on one slice of the last vision-encoder activation. Channel maps
/// are upsampled bilinearly with samples aligned to receptive-field centres.
CamResult score_cam(const Model& m, const Tensor& volume, const enc::TextSequence& report,
                    std::size_t slice, int target_class = 1);

/// Heatmap centre of mass as (row, col).
std::array<double, 2> center_of_mass(const Tensor& heatmap);

void write_pgm(const Tensor& heatmap, const std::string& path);
void write_heatmap_csv(const Tensor& heatmap, const std::string& path);

// ---------------------------------------------------------------------------

/// Checkpoint directory: config.txt plus the parameter manifest.
void save_model(const Model& m, const TrainConfig& cfg, const std::string& dir);
std::pair<Model, TrainConfig> load_model(const std::string& dir);

}  // namespace jaf::train
