#include "jaf/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#include "jaf/ops.hpp"

namespace jaf::train {

namespace fs = std::filesystem;

std::string to_string(Mode m) {
  switch (m) {
    case Mode::Text: return "text";
    case Mode::Vision: return "vision";
    case Mode::Fused: return "fused";
  }
  return "?";
}

std::string to_string(Topology t) {
  switch (t) {
    case Topology::Self: return "self";
    case Topology::Cross: return "cross";
    case Topology::SelfSelf: return "self-self";
    case Topology::CrossCross: return "cross-cross";
    case Topology::SelfCross: return "self-cross";
    case Topology::CrossSelf: return "cross-self";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  for (auto m : {Mode::Text, Mode::Vision, Mode::Fused})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown mode '" + s + "' (text, vision, fused)");
}

const std::vector<Topology>& all_topologies() {
  static const std::vector<Topology> t{Topology::Self,       Topology::Cross,
                                       Topology::SelfSelf,   Topology::CrossCross,
                                       Topology::SelfCross,  Topology::CrossSelf};
  return t;
}

Topology parse_topology(const std::string& s) {
  for (auto t : all_topologies())
    if (to_string(t) == s) return t;
  throw ConfigError("unknown topology '" + s + "'");
}

std::string LossSwitches::name() const {
  if (imima && sdm && mlm) return "vtmf";
  if (!any()) return "ce";
  std::string out;
  for (auto [on, n] : {std::pair{imima, "imima"}, {sdm, "sdm"}, {mlm, "mlm"}}) {
    if (!on) continue;
    if (!out.empty()) out += "+";
    out += n;
  }
  return out;
}

LossSwitches parse_loss(const std::string& s) {
  if (s == "vtmf") return {true, true, true};
  if (s == "ce") return {false, false, false};
  LossSwitches l{false, false, false};
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, '+');) {
    if (part == "imima") l.imima = true;
    else if (part == "sdm") l.sdm = true;
    else if (part == "mlm") l.mlm = true;
    else throw ConfigError("unknown loss component '" + part + "' in '" + s + "'");
  }
  return l;
}

const std::vector<LossSwitches>& loss_grid() {
  static const std::vector<LossSwitches> g{{true, false, false}, {false, true, false},
                                           {false, false, true}, {true, true, false},
                                           {true, false, true},  {true, true, true}};
  return g;
}

// ---------------------------------------------------------------------------
// Configuration

void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) throw ConfigError("learning rate must be >= 0");
  if (c.batch < 2) throw ConfigError("batch must be at least 2 (pair losses need negatives)");
  if (c.seeds.empty()) throw ConfigError("at least one seed is required");
  if (!(c.mask_rate > 0.0) || c.mask_rate > 1.0) throw ConfigError("mask_rate must be in (0, 1]");
  if (!(c.window.hi > c.window.lo)) throw ConfigError("window_hi must exceed window_lo");
  loss::validate(c.weights);
  enc::validate_unified(c.model.unified);
  if (c.model.unified.channels % 2 != 0) throw ConfigError("unified channels must be even");
  if (c.model.vision_channels.size() < 2) throw ConfigError("vision encoder needs a stage");
  if (c.model.head_width == 0 || c.model.heads == 0) throw ConfigError("empty head");
}

namespace {

std::string join(const auto& values) {
  std::ostringstream out;
  for (std::size_t i = 0; i < values.size(); ++i) out << (i ? "," : "") << values[i];
  return out.str();
}

template <typename T>
std::vector<T> split_list(const std::string& key, const std::string& s) {
  std::vector<T> out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, ',');) {
    std::istringstream p(part);
    T v{};
    p >> v;
    if (!p || !(p >> std::ws).eof()) throw ConfigError("config key " + key + ": bad list item '" + part + "'");
    out.push_back(v);
  }
  return out;
}

template <typename T>
T parse_value(const std::string& key, const std::string& s) {
  std::istringstream in(s);
  T v{};
  in >> v;
  if (!in || !(in >> std::ws).eof()) throw ConfigError("config key " + key + ": cannot parse '" + s + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "1" || s == "true" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "no") return false;
  throw ConfigError("config key " + key + ": expected a boolean, got '" + s + "'");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void apply_train_config(data::KeyValues& kv, TrainConfig& c) {
  for (auto it = kv.begin(); it != kv.end();) {
    const auto& k = it->first;
    const auto& v = it->second;
    auto& m = c.model;
    if (k == "epochs") c.epochs = parse_value<std::size_t>(k, v);
    else if (k == "lr") c.lr = parse_value<double>(k, v);
    else if (k == "batch") c.batch = parse_value<std::size_t>(k, v);
    else if (k == "seeds") c.seeds = split_list<std::uint64_t>(k, v);
    else if (k == "folds") c.folds = v.empty() ? std::vector<std::size_t>{} : split_list<std::size_t>(k, v);
    else if (k == "loss") c.losses = parse_loss(v);
    else if (k == "alpha") c.weights.alpha = parse_value<double>(k, v);
    else if (k == "beta") c.weights.beta = parse_value<double>(k, v);
    else if (k == "tau") c.weights.tau = parse_value<double>(k, v);
    else if (k == "epsilon") c.weights.epsilon = parse_value<double>(k, v);
    else if (k == "train_loss_weights") c.train_loss_weights = parse_bool(k, v);
    else if (k == "mask_rate") c.mask_rate = parse_value<double>(k, v);
    else if (k == "window_lo") c.window.lo = parse_value<double>(k, v);
    else if (k == "window_hi") c.window.hi = parse_value<double>(k, v);
    else if (k == "mode") m.mode = parse_mode(v);
    else if (k == "topology") m.topology = parse_topology(v);
    else if (k == "vocab") m.vocab = parse_value<std::size_t>(k, v);
    else if (k == "seq_len") m.seq_len = parse_value<std::size_t>(k, v);
    else if (k == "extent") m.extent = parse_value<std::size_t>(k, v);
    else if (k == "text_dim") m.text_dim = parse_value<std::size_t>(k, v);
    else if (k == "vision_channels") m.vision_channels = split_list<std::size_t>(k, v);
    else if (k == "channels") m.unified.channels = parse_value<std::size_t>(k, v);
    else if (k == "height") m.unified.height = parse_value<std::size_t>(k, v);
    else if (k == "width") m.unified.width = parse_value<std::size_t>(k, v);
    else if (k == "heads") m.heads = parse_value<std::size_t>(k, v);
    else if (k == "head_width") m.head_width = parse_value<std::size_t>(k, v);
    else if (k == "threads") c.threads = parse_value<std::size_t>(k, v);
    else if (k == "data") c.data_dir = v;
    else if (k == "out") c.out_dir = v;
    else {
      ++it;
      continue;
    }
    it = kv.erase(it);
  }
  if (!kv.empty()) throw ConfigError("unknown config key '" + kv.begin()->first + "'");
}

std::string train_config_text(const TrainConfig& c) {
  const auto& m = c.model;
  std::ostringstream o;
  o << "epochs = " << c.epochs << "\nlr = " << fmt(c.lr) << "\nbatch = " << c.batch
    << "\nseeds = " << join(c.seeds) << "\nfolds = " << join(c.folds)
    << "\nloss = " << c.losses.name() << "\nalpha = " << fmt(c.weights.alpha)
    << "\nbeta = " << fmt(c.weights.beta) << "\ntau = " << fmt(c.weights.tau)
    << "\nepsilon = " << fmt(c.weights.epsilon)
    << "\ntrain_loss_weights = " << (c.train_loss_weights ? "true" : "false")
    << "\nmask_rate = " << fmt(c.mask_rate) << "\nwindow_lo = " << fmt(c.window.lo)
    << "\nwindow_hi = " << fmt(c.window.hi) << "\nmode = " << to_string(m.mode)
    << "\ntopology = " << to_string(m.topology) << "\nvocab = " << m.vocab
    << "\nseq_len = " << m.seq_len << "\nextent = " << m.extent << "\ntext_dim = " << m.text_dim
    << "\nvision_channels = " << join(m.vision_channels) << "\nchannels = " << m.unified.channels
    << "\nheight = " << m.unified.height << "\nwidth = " << m.unified.width
    << "\nheads = " << m.heads << "\nhead_width = " << m.head_width
    << "\nthreads = " << c.threads << "\n";
  if (!c.data_dir.empty()) o << "data = " << c.data_dir << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Model

ParamSet ClassifierHead::params() const {
  ParamSet ps;
  ps.add("stage1", stage1);
  ps.add("stage2", stage2);
  ps.add("logits", logits);
  return ps;
}

ClassifierHead make_head(std::size_t in, std::size_t width, std::mt19937_64& rng) {
  return {make_linear(in, width, rng), make_linear(in + width, width, rng),
          make_linear(in + 2 * width, 2, rng)};
}

Tensor head_forward(const Tensor& x, const ClassifierHead& h) {
  auto h1 = relu(h.stage1(x));
  auto x1 = concat({x, h1}, 1);
  auto h2 = relu(h.stage2(x1));
  return h.logits(concat({x1, h2}, 1));
}

ParamSet Model::params() const {
  ParamSet ps;
  if (uses_text()) ps.append("text", text.params());
  if (uses_vision()) ps.append("vision", vision.params());
  ps.add("trt.fc", trt.fc);
  ps.add("vrt.fc", vrt.fc);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto prefix = "block" + std::to_string(i);
    ps.append(prefix, blocks[i].cross ? blocks[i].cmaf.params() : blocks[i].self.params());
  }
  ps.append("head", head.params());
  ps.add("mlm_head", mlm_head);
  ps.add("alpha", alpha);
  ps.add("beta", beta);
  return ps;
}

Model make_model(const ModelConfig& cfg, const loss::LossWeights& weights, std::mt19937_64& rng) {
  if (cfg.vocab == 0 || cfg.seq_len == 0) throw ConfigError("model needs vocab and seq_len");
  Model m;
  m.cfg = cfg;
  const std::size_t vision_dim = cfg.vision_channels.back();
  if (m.uses_text()) m.text = enc::make_text_encoder(cfg.vocab, cfg.seq_len, cfg.text_dim, rng);
  if (m.uses_vision()) {
    m.vision = enc::make_vision_encoder({cfg.extent, cfg.extent, cfg.extent}, cfg.vision_channels, rng);
  }
  std::size_t head_in = 0;
  if (cfg.mode == Mode::Fused) {
    if (vision_dim != cfg.text_dim) {
      throw ConfigError("fused mode needs equal vision and text dims for the alignment losses");
    }
    m.trt = enc::make_trt(cfg.seq_len, cfg.unified, rng);
    m.vrt = enc::make_vrt(vision_dim, cfg.unified, rng);
    std::vector<bool> kinds;
    switch (cfg.topology) {
      case Topology::Self: kinds = {false}; break;
      case Topology::Cross: kinds = {true}; break;
      case Topology::SelfSelf: kinds = {false, false}; break;
      case Topology::CrossCross: kinds = {true, true}; break;
      case Topology::SelfCross: kinds = {false, true}; break;
      case Topology::CrossSelf: kinds = {true, false}; break;
    }
    std::size_t channels = 2 * cfg.unified.channels;
    fusion::Grid grid{cfg.unified.height, cfg.unified.width};
    for (bool cross : kinds) {
      FusionBlock b;
      b.cross = cross;
      if (cross) {
        b.cmaf = fusion::make_cmaf(channels / 2, rng);
        channels /= 2;
        grid = fusion::pooled_grid(grid, 2, 2);
      } else {
        b.self = fusion::make_mhsaf(channels, cfg.heads, rng);
      }
      m.blocks.push_back(std::move(b));
    }
    head_in = grid.positions() * channels;
    m.mlm_head = make_linear(cfg.text_dim, cfg.vocab, rng);
  } else {
    const std::size_t width = cfg.mode == Mode::Text ? cfg.text_dim : vision_dim;
    FusionBlock b;
    b.self = fusion::make_mhsaf(width, cfg.heads, rng);
    m.blocks.push_back(std::move(b));
    head_in = cfg.mode == Mode::Text ? cfg.seq_len * width : width;
  }
  m.head = make_head(head_in, cfg.head_width, rng);
  m.alpha = Tensor::scalar(weights.alpha);
  m.beta = Tensor::scalar(weights.beta);
  return m;
}

ForwardResult forward(const Model& m, const Tensor& volume, const enc::TextSequence& report) {
  ForwardResult r;
  Tensor f_t;
  if (m.uses_vision()) {
    auto vf = enc::encode_vision(volume, m.vision);
    r.vision_rep = vf.representation;
    r.last_activation = vf.last_activation;
  }
  if (m.uses_text()) {
    f_t = enc::encode_text(report, m.text);
    r.text_rep = enc::pool_text(f_t, report);
  }
  Tensor stream;
  fusion::Grid grid{};
  switch (m.cfg.mode) {
    case Mode::Text: stream = f_t; break;
    case Mode::Vision: stream = r.vision_rep; break;
    case Mode::Fused: {
      const auto& u = m.cfg.unified;
      auto t_tilde = enc::trt_transform(f_t, m.trt, u);
      auto v_tilde = enc::vrt_transform(r.vision_rep, m.vrt, u);
      stream = concat({fusion::to_positions(v_tilde), fusion::to_positions(t_tilde)}, 1);
      grid = {u.height, u.width};
      break;
    }
  }
  for (const auto& b : m.blocks) {
    if (b.cross) {
      const std::size_t half = stream.dim(1) / 2;
      auto out = fusion::cmaf_forward(slice(stream, 1, 0, half), slice(stream, 1, half, 2 * half),
                                      grid, b.cmaf);
      stream = out.fused;
      grid = out.grid;
    } else {
      stream = fusion::mhsaf_forward(stream, b.self).output;
    }
  }
  r.logits = head_forward(reshape(stream, {1, stream.numel()}), m.head);
  return r;
}

double predict(const Model& m, const Tensor& volume, const enc::TextSequence& report) {
  auto p = softmax(forward(m, volume, report).logits, 1);
  return p[1];
}

// ---------------------------------------------------------------------------

void Adam::step(const ParamSet& params) {
  const auto& entries = params.entries();
  if (m.empty()) {
    for (const auto& e : entries) {
      m.emplace_back(e.second.numel(), 0.0);
      v.emplace_back(e.second.numel(), 0.0);
    }
  }
  if (m.size() != entries.size()) throw Error("optimizer state does not match parameter set");
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, double(t));
  const double bc2 = 1.0 - std::pow(beta2, double(t));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& p = entries[k].second;
    if (!p.has_grad()) {
      // Zero gradient: moments decay, and with fresh state nothing moves.
      for (std::size_t i = 0; i < m[k].size(); ++i) {
        m[k][i] *= beta1;
        v[k][i] *= beta2;
      }
    }
    auto g = p.grad();
    auto x = p.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (p.has_grad()) {
        m[k][i] = beta1 * m[k][i] + (1.0 - beta1) * g[i];
        v[k][i] = beta2 * v[k][i] + (1.0 - beta2) * g[i] * g[i];
      }
      x[i] -= lr * (m[k][i] / bc1) / (std::sqrt(v[k][i] / bc2) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training

PreparedData prepare(const data::Dataset& ds, data::Window window) {
  PreparedData p;
  p.dataset = &ds;
  for (const auto& c : ds.cases) p.volumes.push_back(data::preprocess_volume(c.volume, window).values);
  return p;
}

namespace {

std::mt19937_64 stream_rng(std::uint64_t seed, std::size_t fold, std::uint32_t purpose) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fold), purpose};
  return std::mt19937_64(seq);
}

ModelConfig resolve_model(const TrainConfig& cfg, const data::Dataset& ds) {
  if (ds.cases.empty()) throw data::DataError("dataset has no cases");
  ModelConfig mc = cfg.model;
  mc.vocab = ds.cases.front().report.vocab_size;
  mc.seq_len = ds.cases.front().report.length();
  mc.extent = ds.cases.front().volume.values.dim(0);
  return mc;
}

Tensor zero_scalar() { return Tensor::scalar(0.0); }

}  // namespace

FoldRun train_fold(const TrainConfig& cfg, const PreparedData& prepared, std::size_t fold,
                   std::uint64_t seed) {
  validate(cfg);
  const auto& ds = *prepared.dataset;
  const auto val = ds.folds.validation(fold);
  auto train = ds.folds.training(fold);
  std::vector<bool> in_val(ds.cases.size(), false);
  for (auto i : val) in_val[i] = true;

  auto init_rng = stream_rng(seed, fold, 1);
  auto order_rng = stream_rng(seed, fold, 2);
  auto mask_rng = stream_rng(seed, fold, 3);

  FoldRun run;
  run.model = make_model(resolve_model(cfg, ds), cfg.weights, init_rng);
  auto& model = run.model;
  const bool fused = model.cfg.mode == Mode::Fused;
  const LossSwitches sw = fused ? cfg.losses : LossSwitches{false, false, false};

  const ParamSet all_params = model.params();
  ParamSet trainable;
  for (const auto& [name, t] : all_params.entries()) {
    if ((name == "alpha" || name == "beta") && !cfg.train_loss_weights) continue;
    if (name.rfind("mlm_head", 0) == 0 && !sw.mlm) continue;
    t.set_requires_grad(true);
    trainable.add(name, t);
  }
  Adam opt;
  opt.lr = cfg.lr;

  auto token_model = [&](const enc::TextSequence& s) {
    return model.mlm_head(enc::encode_text(s, model.text));
  };

  std::vector<bool> touched(ds.cases.size(), false);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), order_rng);
    for (std::size_t start = 0; start + 2 <= train.size(); start += cfg.batch) {
      std::vector<std::size_t> batch(
          train.begin() + static_cast<std::ptrdiff_t>(start),
          train.begin() + static_cast<std::ptrdiff_t>(std::min(train.size(), start + cfg.batch)));
      std::sort(batch.begin(), batch.end());
      for (auto i : batch) {
        if (in_val[i]) {
          throw Error("fold isolation violated: validation case " + ds.cases[i].id +
                      " drawn for training in fold " + std::to_string(fold));
        }
        touched[i] = true;
      }

      HistoryRow row;
      row.step = step;
      Tape tape;
      Tensor total;
      try {
        TapeScope scope(tape);
        std::vector<Tensor> logits, vreps, treps;
        std::vector<std::int64_t> labels;
        for (auto i : batch) {
          auto f = forward(model, prepared.volumes[i], ds.cases[i].report);
          logits.push_back(f.logits);
          if (fused) {
            vreps.push_back(f.vision_rep);
            treps.push_back(f.text_rep);
          }
          labels.push_back(ds.cases[i].label);
        }
        auto ce = cross_entropy(concat(logits, 0), labels);
        total = ce;
        row.ce = ce.item();
        if (sw.any()) {
          loss::PairBatch pairs{concat(vreps, 0), concat(treps, 0), labels};
          const bool both = std::find(labels.begin(), labels.end(), 0) != labels.end() &&
                            std::find(labels.begin(), labels.end(), 1) != labels.end();
          Tensor l_imima = sw.imima && both ? loss::imima_loss(pairs) : zero_scalar();
          Tensor l_sdm = sw.sdm ? loss::sdm_loss(pairs, cfg.weights) : zero_scalar();
          Tensor l_mlm = zero_scalar();
          if (sw.mlm) {
            std::vector<Tensor> parts;
            for (auto i : batch) {
              parts.push_back(loss::mlm_loss(ds.cases[i].report, cfg.mask_rate, token_model,
                                             mask_rng, data::kMaskToken)
                                  .loss);
            }
            l_mlm = scale(sum(concat(parts, 0)), 1.0 / double(parts.size()));
          }
          auto vtmf = loss::vtmf_loss(l_imima, l_sdm, l_mlm, model.alpha, model.beta);
          total = add(ce, vtmf);
          row.imima = l_imima.item();
          row.sdm = l_sdm.item();
          row.mlm = l_mlm.item();
          row.vtmf = vtmf.item();
        }
      } catch (const NumericError& e) {
        throw NumericError("training diverged (fold " + std::to_string(fold) + ", seed " +
                           std::to_string(seed) + ", step " + std::to_string(step) + "): " +
                           e.what());
      }
      row.total = total.item();
      if (!std::isfinite(row.total)) {
        throw NumericError("non-finite loss at step " + std::to_string(step));
      }
      row.alpha = model.alpha.item();
      row.beta = model.beta.item();
      backward(tape, total);
      opt.step(trainable);
      all_params.zero_grad();
      run.history.push_back(row);
      ++step;
    }
  }
  for (std::size_t i = 0; i < touched.size(); ++i)
    if (touched[i]) run.trained_indices.push_back(i);
  for (const auto& [name, t] : all_params.entries()) t.set_requires_grad(false);
  return run;
}

// ---------------------------------------------------------------------------
// Metrics

RocResult roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
  const auto pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const auto neg = static_cast<double>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw Error("ROC needs both classes present");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return scores[a] > scores[b]; });
  RocResult r;
  r.curve.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  double tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size();) {
    const double s = scores[order[k]];
    for (; k < order.size() && scores[order[k]] == s; ++k) (labels[order[k]] == 1 ? tp : fp) += 1;
    const RocPoint prev = r.curve.back();
    RocPoint p{fp / neg, tp / pos, s};
    r.auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
    r.curve.push_back(p);
  }
  return r;
}

MetricsReport compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                              double threshold) {
  if (scores.size() != labels.size() || scores.empty()) {
    throw DimensionError("metrics need equal, non-empty score and label lists");
  }
  MetricsReport r;
  auto& c = r.confusion;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) (pred ? c.tp : c.fn) += 1;
    else (pred ? c.fp : c.tn) += 1;
  }
  const double n = static_cast<double>(scores.size());
  r.accuracy = double(c.tp + c.tn) / n;
  r.recall = c.tp + c.fn ? double(c.tp) / double(c.tp + c.fn) : 0.0;
  r.precision = c.tp + c.fp ? double(c.tp) / double(c.tp + c.fp) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  if (c.tp + c.fn > 0 && c.tn + c.fp > 0) {
    auto roc = roc_auc(scores, labels);
    r.auc = roc.auc;
    r.roc = std::move(roc.curve);
  }
  return r;
}

std::vector<double> predict_all(const Model& m, const PreparedData& data,
                                const std::vector<std::size_t>& indices) {
  std::vector<double> scores;
  for (auto i : indices) scores.push_back(predict(m, data.volumes[i], data.dataset->cases[i].report));
  return scores;
}

namespace {

std::vector<int> labels_of(const PreparedData& data, const std::vector<std::size_t>& indices) {
  std::vector<int> labels;
  for (auto i : indices) labels.push_back(data.dataset->cases[i].label);
  return labels;
}

}  // namespace

MetricsReport evaluate(const Model& m, const PreparedData& data,
                       const std::vector<std::size_t>& indices) {
  return compute_metrics(predict_all(m, data, indices), labels_of(data, indices));
}

// ---------------------------------------------------------------------------
// Grids

std::string CellKey::name() const {
  if (mode != Mode::Fused) return to_string(mode) + "_none_ce";
  return to_string(mode) + "_" + to_string(topology) + "_" + losses.name();
}

std::vector<CellRun> run_cells(const TrainConfig& cfg, const PreparedData& data,
                               const std::vector<CellKey>& keys, bool keep_models) {
  const auto& plan = data.dataset->folds;
  std::vector<std::size_t> folds = cfg.folds;
  if (folds.empty())
    for (std::size_t f = 0; f < plan.k; ++f) folds.push_back(f);
  std::vector<CellRun> runs;
  for (const auto& key : keys)
    for (auto seed : cfg.seeds)
      for (auto fold : folds) {
        CellRun r;
        r.key = key;
        r.seed = seed;
        r.fold = fold;
        runs.push_back(std::move(r));
      }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < runs.size();) {
      auto& r = runs[k];
      try {
        TrainConfig c = cfg;
        c.model.mode = r.key.mode;
        c.model.topology = r.key.topology;
        c.losses = r.key.losses;
        auto fr = train_fold(c, data, r.fold, r.seed);
        const auto val = plan.validation(r.fold);
        r.scores = predict_all(fr.model, data, val);
        r.labels = labels_of(data, val);
        r.metrics = compute_metrics(r.scores, r.labels);
        r.history = std::move(fr.history);
        if (keep_models) r.model = std::move(fr.model);
        r.ok = true;
      } catch (const std::exception& e) {
        r.ok = false;
        r.error = e.what();
      }
    }
  };
  std::size_t threads = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, runs.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  return runs;
}

std::vector<CellKey> AblationGrids::unique() const {
  std::vector<CellKey> out;
  for (const auto* grid : {&modality, &topology, &loss})
    for (const auto& k : *grid)
      if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(k);
  return out;
}

AblationGrids ablation_grids() {
  const LossSwitches ce{false, false, false}, vtmf{};
  AblationGrids g;
  g.modality = {{Mode::Text, Topology::Self, ce},
                {Mode::Vision, Topology::Self, ce},
                {Mode::Fused, Topology::CrossSelf, vtmf}};
  for (auto t : all_topologies()) g.topology.push_back({Mode::Fused, t, vtmf});
  for (const auto& l : loss_grid()) g.loss.push_back({Mode::Fused, Topology::CrossSelf, l});
  return g;
}

namespace {

std::string cell_file_stem(const CellRun& r) {
  return r.key.name() + "_f" + std::to_string(r.fold) + "_s" + std::to_string(r.seed);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  return out;
}

std::string fmt_metric(double v) { return std::isfinite(v) ? fmt(v) : "nan"; }

// "mode,topology,loss" as written in every per-cell table.
std::string cell_columns(const CellKey& k) {
  const bool fused = k.mode == Mode::Fused;
  return to_string(k.mode) + ',' + (fused ? to_string(k.topology) : "none") + ',' +
         (fused ? k.losses.name() : "ce");
}

}  // namespace

void write_cell_outputs(const std::vector<CellRun>& runs, const std::string& dir) {
  fs::create_directories(dir);
  auto metrics = open_out((fs::path(dir) / "metrics.csv").string());
  metrics << "mode,topology,loss,fold,seed,acc,recall,prec,f1,auc\n";
  for (const auto& r : runs) {
    metrics << cell_columns(r.key) << ',' << r.fold << ',' << r.seed << ',';
    if (!r.ok) {
      metrics << "nan,nan,nan,nan,nan\n";
      continue;
    }
    const auto& m = r.metrics;
    metrics << fmt(m.accuracy) << ',' << fmt(m.recall) << ',' << fmt(m.precision) << ','
            << fmt(m.f1) << ',' << (m.auc ? fmt(*m.auc) : "nan") << '\n';

    auto roc = open_out((fs::path(dir) / ("roc_" + cell_file_stem(r) + ".csv")).string());
    roc << "fpr,tpr,threshold\n";
    for (const auto& p : m.roc) roc << fmt(p.fpr) << ',' << fmt(p.tpr) << ',' << fmt_metric(p.threshold) << '\n';

    auto hist = open_out((fs::path(dir) / ("history_" + cell_file_stem(r) + ".csv")).string());
    hist << "step,ce,imima,sdm,mlm,vtmf,total,alpha,beta\n";
    for (const auto& h : r.history) {
      hist << h.step << ',' << fmt(h.ce) << ',' << fmt(h.imima) << ',' << fmt(h.sdm) << ','
           << fmt(h.mlm) << ',' << fmt(h.vtmf) << ',' << fmt(h.total) << ',' << fmt(h.alpha)
           << ',' << fmt(h.beta) << '\n';
    }
  }
  auto confusion = open_out((fs::path(dir) / "confusion.csv").string());
  confusion << "mode,topology,loss,fold,seed,tp,fp,tn,fn\n";
  for (const auto& r : runs) {
    if (!r.ok) continue;
    const auto& c = r.metrics.confusion;
    confusion << cell_columns(r.key) << ',' << r.fold << ',' << r.seed << ',' << c.tp << ','
              << c.fp << ',' << c.tn << ',' << c.fn << '\n';
  }

  // Pooled: one row per (key, seed) over every successful fold's predictions.
  auto pooled = open_out((fs::path(dir) / "pooled.csv").string());
  pooled << "mode,topology,loss,seed,folds,acc,recall,prec,f1,auc\n";
  std::vector<std::pair<std::size_t, std::uint64_t>> groups;  // first run index, seed
  for (std::size_t i = 0; i < runs.size(); ++i) {
    bool seen = false;
    for (auto [j, seed] : groups) seen |= runs[j].key == runs[i].key && seed == runs[i].seed;
    if (!seen) groups.emplace_back(i, runs[i].seed);
  }
  for (auto [first, seed] : groups) {
    std::vector<double> scores;
    std::vector<int> labels;
    std::size_t folds = 0;
    for (const auto& r : runs) {
      if (!(r.key == runs[first].key) || r.seed != seed || !r.ok) continue;
      ++folds;
      scores.insert(scores.end(), r.scores.begin(), r.scores.end());
      labels.insert(labels.end(), r.labels.begin(), r.labels.end());
    }
    pooled << cell_columns(runs[first].key) << ',' << seed << ',' << folds;
    if (scores.empty()) {
      pooled << ",nan,nan,nan,nan,nan\n";
      continue;
    }
    const auto m = compute_metrics(scores, labels);
    pooled << ',' << fmt(m.accuracy) << ',' << fmt(m.recall) << ',' << fmt(m.precision) << ','
           << fmt(m.f1) << ',' << (m.auc ? fmt(*m.auc) : "nan") << '\n';
  }

  std::ofstream failures((fs::path(dir) / "failures.txt").string());
  for (const auto& r : runs)
    if (!r.ok) failures << cell_file_stem(r) << ": " << r.error << '\n';
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {std::nan(""), std::nan("")};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / double(v.size() - 1))};
}

}  // namespace

KeySummary summarize(const std::vector<CellRun>& runs, const CellKey& key) {
  KeySummary s;
  std::vector<double> aucs;
  for (const auto& r : runs) {
    if (!(r.key == key)) continue;
    ++s.cells;
    if (!r.ok) {
      ++s.failed;
      continue;
    }
    if (r.metrics.auc) aucs.push_back(*r.metrics.auc);
  }
  s.mean_auc = mean_std(aucs).first;
  return s;
}

void write_summary_table(const std::vector<CellRun>& runs, const std::vector<CellKey>& rows,
                         const std::string& path) {
  auto out = open_out(path);
  out << "row,mode,topology,loss,cells,failed,acc_mean,acc_std,recall_mean,recall_std,prec_mean,"
         "prec_std,f1_mean,f1_std,auc_mean,auc_std\n";
  for (const auto& key : rows) {
    std::vector<double> acc, rec, prec, f1, auc;
    std::size_t cells = 0, failed = 0;
    for (const auto& r : runs) {
      if (!(r.key == key)) continue;
      ++cells;
      if (!r.ok) {
        ++failed;
        continue;
      }
      acc.push_back(r.metrics.accuracy);
      rec.push_back(r.metrics.recall);
      prec.push_back(r.metrics.precision);
      f1.push_back(r.metrics.f1);
      if (r.metrics.auc) auc.push_back(*r.metrics.auc);
    }
    out << key.name() << ',' << cell_columns(key) << ',' << cells << ',' << failed;
    for (const auto* v : {&acc, &rec, &prec, &f1, &auc}) {
      auto [m, s] = mean_std(*v);
      out << ',' << fmt_metric(m) << ',' << fmt_metric(s);
    }
    out << '\n';
  }
}

std::vector<CellRun> run_ablations(const TrainConfig& cfg, const PreparedData& data,
                                   const std::string& out_dir, bool keep_models) {
  const auto grids = ablation_grids();
  auto runs = run_cells(cfg, data, grids.unique(), keep_models);
  write_cell_outputs(runs, out_dir);
  write_summary_table(runs, grids.modality, (fs::path(out_dir) / "table_modality.csv").string());
  write_summary_table(runs, grids.topology, (fs::path(out_dir) / "table_topology.csv").string());
  write_summary_table(runs, grids.loss, (fs::path(out_dir) / "table_loss.csv").string());
  return runs;
}

// ---------------------------------------------------------------------------
// Score-CAM

std::size_t default_cam_slice(std::size_t depth) { return depth * 25 / 64; }

namespace {

void min_max_normalize(std::vector<double>& v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, b = *hi;
  if (b > a) {
    for (auto& x : v) x = (x - a) / (b - a);
  } else {
    std::fill(v.begin(), v.end(), 0.0);
  }
}

}  // namespace

CamResult score_cam(const Model& m, const Tensor& volume, const enc::TextSequence& report,
                    std::size_t slice, int target_class) {
  if (!m.uses_vision()) throw ConfigError("Score-CAM needs a model with a vision encoder");
  if (volume.rank() != 3 || slice >= volume.dim(0)) {
    throw ConfigError("slice " + std::to_string(slice) + " outside a volume of shape " +
                      shape_str(volume.shape()));
  }
  if (target_class != 0 && target_class != 1) throw ConfigError("target class must be 0 or 1");
  const auto act = forward(m, volume, report).last_activation;
  const std::size_t channels = act.dim(0), d = act.dim(1), h = act.dim(2), w = act.dim(3);
  const std::size_t H = volume.dim(1), W = volume.dim(2);

  // Receptive-field centre of activation index i is i * step + offset.
  const std::size_t k = m.vision.kernels.front().dim(2);
  double step = 1.0, offset = 0.0;
  for (std::size_t l = 0; l < m.vision.kernels.size(); ++l) {
    offset += step * double(k - 1) / 2.0;
    step *= double(m.vision.stride);
  }
  auto to_act = [&](double pixel, std::size_t n) {
    return std::clamp((pixel - offset) / step, 0.0, double(n - 1));
  };
  const auto depth_index = static_cast<std::size_t>(std::lround(to_act(double(slice), d)));

  CamResult r;
  const auto a = act.data();
  if (std::all_of(a.begin(), a.end(), [](double x) { return x == 0.0; })) {
    std::fprintf(stderr, "warning: Score-CAM activations are all zero; heatmap is uniform\n");
    r.degenerate = true;
    r.heatmap = Tensor::full({H, W}, 1.0);
    r.channel_weights.assign(channels, 1.0 / double(channels));
    return r;
  }

  std::vector<std::vector<double>> maps(channels, std::vector<double>(H * W));
  for (std::size_t c = 0; c < channels; ++c) {
    const double* plane = a.data() + (c * d + depth_index) * h * w;
    for (std::size_t y = 0; y < H; ++y) {
      const double u = to_act(double(y), h);
      const auto y0 = static_cast<std::size_t>(u);
      const std::size_t y1 = std::min(y0 + 1, h - 1);
      const double fy = u - double(y0);
      for (std::size_t x = 0; x < W; ++x) {
        const double v = to_act(double(x), w);
        const auto x0 = static_cast<std::size_t>(v);
        const std::size_t x1 = std::min(x0 + 1, w - 1);
        const double fx = v - double(x0);
        maps[c][y * W + x] = (1 - fy) * ((1 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1]) +
                             fy * ((1 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1]);
      }
    }
  }

  std::vector<double> scores(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    auto mask = maps[c];
    min_max_normalize(mask);
    Tensor masked = volume.clone();
    auto mv = masked.mutable_data();
    for (std::size_t i = 0; i < H * W; ++i) mv[slice * H * W + i] *= mask[i];
    scores[c] = forward(m, masked, report).logits[static_cast<std::size_t>(target_class)];
  }
  const double top = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  r.channel_weights.resize(channels);
  for (std::size_t c = 0; c < channels; ++c) z += r.channel_weights[c] = std::exp(scores[c] - top);
  for (auto& wgt : r.channel_weights) wgt /= z;

  std::vector<double> heat(H * W, 0.0);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < H * W; ++i) heat[i] += r.channel_weights[c] * maps[c][i];
  for (auto& x : heat) x = std::max(0.0, x);
  const auto [lo, hi] = std::minmax_element(heat.begin(), heat.end());
  if (!(*hi > *lo)) {
    std::fprintf(stderr, "warning: Score-CAM heatmap is flat; reporting a uniform map\n");
    r.degenerate = true;
    std::fill(heat.begin(), heat.end(), 1.0);
  } else {
    min_max_normalize(heat);
  }
  r.heatmap = Tensor({H, W}, std::move(heat));
  return r;
}

std::array<double, 2> center_of_mass(const Tensor& heatmap) {
  const std::size_t H = heatmap.dim(0), W = heatmap.dim(1);
  double total = 0.0, row = 0.0, col = 0.0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double v = heatmap[y * W + x];
      total += v;
      row += v * double(y);
      col += v * double(x);
    }
  if (total <= 0.0) return {double(H - 1) / 2.0, double(W - 1) / 2.0};
  return {row / total, col / total};
}

void write_pgm(const Tensor& heatmap, const std::string& path) {
  auto out = open_out(path);
  const std::size_t H = heatmap.dim(0), W = heatmap.dim(1);
  out << "P2\n" << W << ' ' << H << "\n255\n";
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      out << (x ? " " : "") << std::lround(std::clamp(heatmap[y * W + x], 0.0, 1.0) * 255.0);
    }
    out << '\n';
  }
}

void write_heatmap_csv(const Tensor& heatmap, const std::string& path) {
  auto out = open_out(path);
  const std::size_t H = heatmap.dim(0), W = heatmap.dim(1);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) out << (x ? "," : "") << fmt(heatmap[y * W + x]);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

void save_model(const Model& m, const TrainConfig& cfg, const std::string& dir) {
  fs::create_directories(dir);
  TrainConfig c = cfg;
  c.model = m.cfg;
  auto out = open_out((fs::path(dir) / "config.txt").string());
  out << train_config_text(c);
  out.close();
  m.params().save((fs::path(dir) / "params").string());
}

std::pair<Model, TrainConfig> load_model(const std::string& dir) {
  auto kv = data::read_key_values((fs::path(dir) / "config.txt").string());
  TrainConfig cfg;
  apply_train_config(kv, cfg);
  std::mt19937_64 rng(0);
  Model m = make_model(cfg.model, cfg.weights, rng);
  m.params().load((fs::path(dir) / "params").string());
  return {std::move(m), cfg};
}

}  // namespace jaf::train
