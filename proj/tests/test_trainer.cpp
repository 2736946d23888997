#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "jaf/ops.hpp"
#include "jaf/trainer.hpp"
#include "test_util.hpp"

using namespace jaf;
using jaf::testing::pair_auc;
using namespace jaf::train;

namespace fs = std::filesystem;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

const data::Dataset& small_dataset() {
  static const data::Dataset ds = [] {
    data::GenConfig g;
    g.n = 30;
    g.seed = 4;
    return data::build_dataset(g);
  }();
  return ds;
}

const PreparedData& small_prepared() {
  static const PreparedData p = prepare(small_dataset(), {});
  return p;
}

TrainConfig quick_config(Mode mode) {
  TrainConfig c;
  c.epochs = 2;
  c.batch = 8;
  c.seeds = {1};
  c.model.mode = mode;
  return c;
}

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("jaf_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::size_t line_count(const fs::path& p) {
  auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST_CASE("metrics: hand-counted example") {
  const std::vector<double> s{0.9, 0.8, 0.3, 0.6, 0.2, 0.55};
  const std::vector<int> y{1, 1, 1, 0, 0, 0};
  auto m = compute_metrics(s, y);
  CHECK(m.confusion.tp == 2);
  CHECK(m.confusion.fn == 1);
  CHECK(m.confusion.fp == 2);
  CHECK(m.confusion.tn == 1);
  CHECK(m.accuracy == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(m.recall == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.precision == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(m.f1 == doctest::Approx(4.0 / 7.0).epsilon(1e-15));
  REQUIRE(m.auc);
  CHECK(*m.auc == doctest::Approx(7.0 / 9.0).epsilon(1e-15));
}

TEST_CASE("metrics: separable and minimal cases") {
  auto m = compute_metrics({0.9, 0.8, 0.3, 0.2}, {1, 1, 0, 0});
  CHECK(m.accuracy == 1.0);
  CHECK(*m.auc == 1.0);
  CHECK(roc_auc({0.9, 0.1}, {1, 0}).auc == 1.0);
  CHECK(roc_auc({0.4, 0.4, 0.4}, {1, 0, 1}).auc == 0.5);
}

TEST_CASE("metrics: degenerate predictions and single-class splits") {
  const std::vector<int> y{1, 0, 1, 0};
  auto none = compute_metrics({0.1, 0.1, 0.1, 0.1}, y);
  CHECK(none.precision == 0.0);
  CHECK(none.recall == 0.0);
  CHECK(none.f1 == 0.0);
  CHECK(none.accuracy == 0.5);
  CHECK(*none.auc == 0.5);

  auto all = compute_metrics({0.7, 0.7, 0.7, 0.7}, y);
  CHECK(all.recall == 1.0);
  CHECK(all.precision == 0.5);

  auto one_class = compute_metrics({0.2, 0.9}, {1, 1});
  CHECK_FALSE(one_class.auc);
  CHECK(one_class.roc.empty());
  CHECK_THROWS_AS(roc_auc({0.2, 0.9}, {0, 0}), Error);
  CHECK_THROWS_AS(compute_metrics({0.2}, {0, 1}), DimensionError);
  CHECK_THROWS_AS(compute_metrics({}, {}), DimensionError);
}

TEST_CASE("metrics: trapezoidal AUC equals pair counting on tied scores") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> len(4, 60), grid(0, 9);
  double worst = 0.0;
  for (int draw = 0; draw < 50; ++draw) {
    const int n = len(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = grid(rng) / 10.0;  // coarse grid forces ties
      y[i] = int(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    worst = std::max(worst, std::abs(roc_auc(s, y).auc - pair_auc(s, y)));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("metrics: ROC curve is monotone from (0,0) to (1,1)") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  for (int draw = 0; draw < 30; ++draw) {
    std::vector<double> s(40);
    std::vector<int> y(40);
    for (int i = 0; i < 40; ++i) {
      y[i] = i % 3 == 0;
      s[i] = std::round((g(rng) + y[i]) * 4) / 4;
    }
    auto r = roc_auc(s, y);
    CHECK(r.curve.front().fpr == 0.0);
    CHECK(r.curve.front().tpr == 0.0);
    CHECK(std::isinf(r.curve.front().threshold));
    CHECK(r.curve.back().fpr == 1.0);
    CHECK(r.curve.back().tpr == 1.0);
    for (std::size_t k = 1; k < r.curve.size(); ++k) {
      CHECK(r.curve[k].fpr >= r.curve[k - 1].fpr);
      CHECK(r.curve[k].tpr >= r.curve[k - 1].tpr);
      CHECK(r.curve[k].threshold < r.curve[k - 1].threshold);
    }
  }
}

TEST_CASE("metrics: F1 matches 2TP / (2TP + FP + FN)") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u;
  for (int draw = 0; draw < 100; ++draw) {
    std::vector<double> s(25);
    std::vector<int> y(25);
    for (int i = 0; i < 25; ++i) {
      s[i] = u(rng);
      y[i] = u(rng) < 0.4;
    }
    auto m = compute_metrics(s, y);
    const auto& c = m.confusion;
    CHECK(c.tp + c.fp + c.tn + c.fn == 25);
    const double denom = 2.0 * double(c.tp) + double(c.fp + c.fn);
    CHECK(m.f1 == doctest::Approx(denom > 0 ? 2.0 * double(c.tp) / denom : 0.0).epsilon(1e-12));
  }
}

TEST_CASE("adam: zero gradient leaves fresh parameters in place") {
  Tensor a({3}, {1.0, -2.0, 0.5});
  Tensor b({2}, {0.25, 4.0});
  b.set_requires_grad(true);
  b.grad_buffer()[0] = 0.0;
  b.grad_buffer()[1] = 0.0;
  ParamSet ps;
  ps.add("a", a);
  ps.add("b", b);
  Adam opt;
  opt.lr = 0.1;
  for (int i = 0; i < 3; ++i) opt.step(ps);
  CHECK(values(a) == std::vector<double>{1.0, -2.0, 0.5});
  CHECK(values(b) == std::vector<double>{0.25, 4.0});
}

TEST_CASE("adam: first step moves by lr * g / (|g| + eps)") {
  Tensor p({3}, {1.0, 1.0, 1.0});
  p.set_requires_grad(true);
  const std::vector<double> g{0.3, -2.0, 1e-9};
  for (std::size_t i = 0; i < 3; ++i) p.grad_buffer()[i] = g[i];
  ParamSet ps;
  ps.add("p", p);
  Adam opt;
  opt.lr = 0.01;
  opt.step(ps);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(p[i] == doctest::Approx(1.0 - 0.01 * g[i] / (std::abs(g[i]) + 1e-8)).epsilon(1e-12));
  }
}

TEST_CASE("training: zero learning rate keeps parameters and a full-batch loss fixed") {
  auto cfg = quick_config(Mode::Fused);
  cfg.lr = 0.0;
  cfg.epochs = 3;
  cfg.batch = 64;  // whole training split in one step
  cfg.losses = {true, true, false};
  auto run = train_fold(cfg, small_prepared(), 0, 1);

  // The same seed and fold give the same initial weights.
  auto again = cfg;
  again.epochs = 1;
  auto fresh = train_fold(again, small_prepared(), 0, 1);
  const auto trained = run.model.params();
  const auto initial = fresh.model.params();
  REQUIRE(trained.size() == initial.size());
  for (std::size_t k = 0; k < trained.size(); ++k) {
    CHECK(values(trained.entries()[k].second) == values(initial.entries()[k].second));
  }
  REQUIRE(run.history.size() == 3);
  for (const auto& h : run.history) {
    CHECK(h.total == run.history.front().total);
    CHECK(h.imima > 0.0);
    CHECK(h.mlm == 0.0);
  }
}

TEST_CASE("training: identical config and seed reproduce bit for bit") {
  for (auto mode : {Mode::Vision, Mode::Fused}) {
    auto cfg = quick_config(mode);
    auto a = train_fold(cfg, small_prepared(), 2, 7);
    auto b = train_fold(cfg, small_prepared(), 2, 7);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      CHECK(a.history[i].total == b.history[i].total);
      CHECK(a.history[i].mlm == b.history[i].mlm);
    }
    const auto pa = a.model.params(), pb = b.model.params();
    for (std::size_t k = 0; k < pa.size(); ++k)
      CHECK(values(pa.entries()[k].second) == values(pb.entries()[k].second));
    auto c = train_fold(cfg, small_prepared(), 2, 8);
    CHECK(c.history.front().total != a.history.front().total);
  }
}

TEST_CASE("training: loss falls on the training split") {
  auto cfg = quick_config(Mode::Vision);
  cfg.epochs = 12;
  cfg.lr = 3e-3;
  auto run = train_fold(cfg, small_prepared(), 0, 3);
  const std::size_t per_epoch = run.history.size() / cfg.epochs;
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < per_epoch; ++i) {
    first += run.history[i].ce;
    last += run.history[run.history.size() - 1 - i].ce;
  }
  CHECK(last < first);
}

TEST_CASE("training: total loss falls on the default synthetic data") {
  static const data::Dataset ds = data::build_dataset(data::GenConfig{});
  const auto prep = prepare(ds, {});
  int falling = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    TrainConfig cfg;
    cfg.epochs = 3;
    auto run = train_fold(cfg, prep, 0, seed);
    const std::size_t tenth = std::max<std::size_t>(1, run.history.size() / 10);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < tenth; ++i) {
      first += run.history[i].total;
      last += run.history[run.history.size() - 1 - i].total;
    }
    falling += last < first;
  }
  CHECK(falling >= 3);
}

TEST_CASE("training: folds never train on their validation cases") {
  const auto& ds = small_dataset();
  auto cfg = quick_config(Mode::Text);
  cfg.epochs = 1;
  for (std::size_t f = 0; f < ds.folds.k; ++f) {
    auto run = train_fold(cfg, small_prepared(), f, 1);
    auto expected = ds.folds.training(f);
    std::sort(expected.begin(), expected.end());
    CHECK(run.trained_indices == expected);
    for (auto v : ds.folds.validation(f))
      CHECK_FALSE(std::binary_search(run.trained_indices.begin(), run.trained_indices.end(), v));
  }
}

TEST_CASE("training: alpha and beta stay fixed unless marked trainable") {
  auto cfg = quick_config(Mode::Fused);
  cfg.epochs = 1;
  auto frozen = train_fold(cfg, small_prepared(), 1, 1);
  CHECK(frozen.model.alpha.item() == cfg.weights.alpha);
  CHECK(frozen.model.beta.item() == cfg.weights.beta);
  cfg.train_loss_weights = true;
  auto learned = train_fold(cfg, small_prepared(), 1, 1);
  CHECK(learned.model.alpha.item() != cfg.weights.alpha);
  CHECK(learned.model.beta.item() != cfg.weights.beta);
}

TEST_CASE("training: label-free volumes give chance-level vision AUC") {
  data::GenConfig g;
  g.n = 100;
  g.vision_signal = 0.0;
  g.complementarity = 0.0;
  double total = 0.0;
  int cells = 0;
  for (std::uint64_t seed : {11, 12, 13}) {
    g.seed = seed;
    const auto ds = data::build_dataset(g);
    const auto prep = prepare(ds, {});
    auto cfg = quick_config(Mode::Vision);
    cfg.epochs = 3;
    for (const auto& r : run_cells(cfg, prep, {{Mode::Vision, Topology::Self, {false, false, false}}})) {
      REQUIRE(r.ok);
      total += *r.metrics.auc;
      ++cells;
    }
  }
  CHECK(cells == 15);
  CHECK(std::abs(total / cells - 0.5) < 0.08);
}

TEST_CASE("model: full fused loss gradients match finite differences") {
  const auto& ds = small_dataset();
  const auto& prep = small_prepared();
  const std::vector<std::size_t> batch{0, 3};  // one case of each label
  REQUIRE(ds.cases[0].label != ds.cases[3].label);
  std::mt19937_64 rng(31);
  double worst = 0.0;
  std::size_t checked = 0, skipped = 0;
  for (int point = 0; point < 10; ++point) {
    ModelConfig mc;
    mc.vocab = data::vocab_size();
    mc.seq_len = data::kReportLength;
    loss::LossWeights w;
    w.tau = 0.1;
    auto model = make_model(mc, w, rng);
    const std::uint64_t mask_seed = rng();
    auto loss_fn = [&] {
      std::vector<Tensor> logits, vreps, treps;
      std::vector<std::int64_t> labels;
      for (auto i : batch) {
        auto f = forward(model, prep.volumes[i], ds.cases[i].report);
        logits.push_back(f.logits);
        vreps.push_back(f.vision_rep);
        treps.push_back(f.text_rep);
        labels.push_back(ds.cases[i].label);
      }
      loss::PairBatch pairs{concat(vreps, 0), concat(treps, 0), labels};
      std::mt19937_64 mask_rng(mask_seed);
      auto tokens = [&](const enc::TextSequence& s) {
        return model.mlm_head(enc::encode_text(s, model.text));
      };
      auto mlm = loss::mlm_loss(ds.cases[0].report, 0.3, tokens, mask_rng, data::kMaskToken).loss;
      auto vtmf = loss::vtmf_loss(loss::imima_loss(pairs), loss::sdm_loss(pairs, w), mlm,
                                  model.alpha, model.beta);
      return add(cross_entropy(concat(logits, 0), labels), vtmf);
    };
    std::vector<Tensor> params;
    const auto ps = model.params();
    for (const auto& e : ps.entries()) params.push_back(e.second);
    jaf::testing::jitter(params, rng, 0.02);
    auto r = jaf::testing::check_gradient_piecewise(params, loss_fn, 2);
    worst = std::max(worst, r.worst);
    checked += r.checked;
    skipped += r.skipped;
  }
  CHECK(worst < 1e-4);
  CHECK(skipped * 10 <= checked);
}

TEST_CASE("score-cam: one channel reproduces its activation at receptive-field centres") {
  const auto& ds = small_dataset();
  const auto& prep = small_prepared();
  ModelConfig mc;
  mc.mode = Mode::Vision;
  mc.vocab = data::vocab_size();
  mc.seq_len = data::kReportLength;
  mc.vision_channels = {1, 4, 8, 1};
  mc.heads = 1;
  std::mt19937_64 rng(3);
  auto model = make_model(mc, {}, rng);
  model.vision.biases.back().mutable_data()[0] = 0.5;  // keep the single map alive

  const auto& vol = prep.volumes[1];
  const auto& rep = ds.cases[1].report;
  const std::size_t slice = default_cam_slice(vol.dim(0));
  CHECK(slice == 12);
  auto cam = score_cam(model, vol, rep, slice);
  REQUIRE_FALSE(cam.degenerate);
  REQUIRE(cam.channel_weights.size() == 1);
  CHECK(cam.channel_weights[0] == 1.0);

  // Last stage is 3x3x3 with centres at 7, 15, 23; slice 12 maps to depth 1.
  auto act = forward(model, vol, rep).last_activation;
  REQUIRE(act.shape() == Shape{1, 3, 3, 3});
  std::vector<double> plane;
  for (std::size_t i = 0; i < 9; ++i) plane.push_back(act[9 + i]);
  const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
  REQUIRE(*hi > *lo);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) {
      const double expected = (plane[a * 3 + b] - *lo) / (*hi - *lo);
      CHECK(cam.heatmap.at(7 + 8 * a, 7 + 8 * b) == doctest::Approx(expected).epsilon(1e-12));
    }
}

TEST_CASE("score-cam: heatmap range, weights, degenerate activations, errors") {
  const auto& ds = small_dataset();
  const auto& prep = small_prepared();
  ModelConfig mc;
  mc.vocab = data::vocab_size();
  mc.seq_len = data::kReportLength;
  std::mt19937_64 rng(4);
  auto model = make_model(mc, {}, rng);
  const auto& vol = prep.volumes[2];
  const auto& rep = ds.cases[2].report;
  auto cam = score_cam(model, vol, rep, 12);
  CHECK(cam.heatmap.shape() == Shape{32, 32});
  const auto h = values(cam.heatmap);
  CHECK(*std::min_element(h.begin(), h.end()) == 0.0);
  CHECK(*std::max_element(h.begin(), h.end()) == 1.0);
  double z = 0.0;
  for (double w : cam.channel_weights) {
    CHECK(w > 0.0);
    z += w;
  }
  CHECK(z == doctest::Approx(1.0).epsilon(1e-12));
  auto com = center_of_mass(cam.heatmap);
  CHECK(com[0] >= 0.0);
  CHECK(com[0] <= 31.0);

  // A dead last stage: negative bias and zero kernel.
  auto dead = model;
  dead.vision.kernels.back() = Tensor::zeros(model.vision.kernels.back().shape());
  dead.vision.biases.back() = Tensor::full(model.vision.biases.back().shape(), -1.0);
  auto flat = score_cam(dead, vol, rep, 12);
  CHECK(flat.degenerate);
  const auto fh = values(flat.heatmap);
  CHECK(std::all_of(fh.begin(), fh.end(), [](double x) { return x == 1.0; }));

  CHECK_THROWS_AS(score_cam(model, vol, rep, 32), ConfigError);
  CHECK_THROWS_AS(score_cam(model, vol, rep, 12, 2), ConfigError);
  auto text = model;
  text.cfg.mode = Mode::Text;
  CHECK_THROWS_AS(score_cam(text, vol, rep, 12), ConfigError);
}

TEST_CASE("score-cam: centre of mass of simple maps") {
  auto h = Tensor::zeros({4, 6});
  h.mutable_data()[1 * 6 + 4] = 1.0;
  auto c = center_of_mass(h);
  CHECK(c[0] == 1.0);
  CHECK(c[1] == 4.0);
  auto u = center_of_mass(Tensor::full({5, 7}, 1.0));
  CHECK(u[0] == doctest::Approx(2.0));
  CHECK(u[1] == doctest::Approx(3.0));
}

TEST_CASE("config: text round trip and rejected keys") {
  TrainConfig c;
  c.epochs = 3;
  c.lr = 0.0025;
  c.seeds = {4, 9};
  c.folds = {0, 2};
  c.losses = {true, false, true};
  c.weights.tau = 0.07;
  c.train_loss_weights = true;
  c.model.mode = Mode::Vision;
  c.model.topology = Topology::SelfCross;
  c.model.vision_channels = {1, 2, 4};
  c.data_dir = "some/dir";
  const auto text = train_config_text(c);
  auto kv = data::parse_key_values(text);
  TrainConfig back;
  apply_train_config(kv, back);
  CHECK(train_config_text(back) == text);
  CHECK(back.losses == c.losses);
  CHECK(back.model.topology == Topology::SelfCross);

  auto bad = data::parse_key_values("epochs = 2\nlearning_rate = 1\n");
  TrainConfig t;
  CHECK_THROWS_AS(apply_train_config(bad, t), ConfigError);
  auto junk = data::parse_key_values("epochs = two\n");
  CHECK_THROWS_AS(apply_train_config(junk, t), ConfigError);
  CHECK_THROWS_AS(parse_loss("imima+foo"), ConfigError);
  CHECK_THROWS_AS(parse_mode("audio"), ConfigError);
  CHECK_THROWS_AS(parse_topology("self-self-self"), ConfigError);

  TrainConfig v;
  v.batch = 1;
  CHECK_THROWS_AS(validate(v), ConfigError);
  v = TrainConfig{};
  v.seeds.clear();
  CHECK_THROWS_AS(validate(v), ConfigError);
  v = TrainConfig{};
  v.mask_rate = 0.0;
  CHECK_THROWS_AS(validate(v), ConfigError);
}

TEST_CASE("config: loss names") {
  CHECK(LossSwitches{}.name() == "vtmf");
  CHECK(LossSwitches{false, false, false}.name() == "ce");
  CHECK(LossSwitches{true, true, false}.name() == "imima+sdm");
  for (const auto& l : loss_grid()) CHECK(parse_loss(l.name()) == l);
  CHECK(parse_loss("vtmf") == LossSwitches{});
}

TEST_CASE("checkpoint: save and load reproduce predictions") {
  const auto& ds = small_dataset();
  const auto& prep = small_prepared();
  auto cfg = quick_config(Mode::Fused);
  cfg.epochs = 1;
  auto run = train_fold(cfg, prep, 0, 2);
  const auto dir = scratch_dir("ckpt");
  save_model(run.model, cfg, dir.string());
  auto [loaded, lcfg] = load_model(dir.string());
  CHECK(lcfg.model.mode == Mode::Fused);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(predict(loaded, prep.volumes[i], ds.cases[i].report) ==
          predict(run.model, prep.volumes[i], ds.cases[i].report));
  }
  fs::remove_all(dir);
}

TEST_CASE("grids: shapes, deduplication and names") {
  auto g = ablation_grids();
  CHECK(g.modality.size() == 3);
  CHECK(g.topology.size() == 6);
  CHECK(g.loss.size() == 6);
  CHECK(g.unique().size() == 13);
  CHECK(g.modality[0].name() == "text_none_ce");
  CHECK(g.modality[1].name() == "vision_none_ce");
  CHECK(g.modality[2].name() == "fused_cross-self_vtmf");
  std::set<std::string> names;
  for (const auto& k : g.unique()) names.insert(k.name());
  CHECK(names.size() == 13);
}

TEST_CASE("grids: outputs have one row per cell and per key") {
  auto cfg = quick_config(Mode::Text);
  cfg.epochs = 1;
  cfg.folds = {0, 1};
  const std::vector<CellKey> keys{{Mode::Text, Topology::Self, {false, false, false}},
                                  {Mode::Vision, Topology::Self, {false, false, false}}};
  auto runs = run_cells(cfg, small_prepared(), keys);
  REQUIRE(runs.size() == 4);
  CHECK(runs[0].key == keys[0]);
  CHECK(runs[1].fold == 1);
  CHECK(runs[2].key == keys[1]);

  // A broken cell: recorded, not thrown.
  CellRun broken = runs.back();
  broken.ok = false;
  broken.error = "diverged";
  broken.fold = 4;
  runs.push_back(broken);

  const auto dir = scratch_dir("grid");
  write_cell_outputs(runs, dir.string());
  CHECK(line_count(dir / "metrics.csv") == 6);
  const auto metrics = slurp(dir / "metrics.csv");
  CHECK(metrics.rfind("mode,topology,loss,fold,seed,acc,recall,prec,f1,auc\n", 0) == 0);
  CHECK(metrics.find("vision,none,ce,4,1,nan,nan,nan,nan,nan\n") != std::string::npos);
  CHECK(fs::exists(dir / "roc_text_none_ce_f0_s1.csv"));
  CHECK(fs::exists(dir / "history_vision_none_ce_f1_s1.csv"));
  CHECK(slurp(dir / "failures.txt") == "vision_none_ce_f4_s1: diverged\n");
  CHECK(line_count(dir / "confusion.csv") == 5);

  // Pooled rows concatenate the two good folds of each key.
  CHECK(line_count(dir / "pooled.csv") == 3);
  std::vector<double> scores = runs[2].scores;
  std::vector<int> labels = runs[2].labels;
  scores.insert(scores.end(), runs[3].scores.begin(), runs[3].scores.end());
  labels.insert(labels.end(), runs[3].labels.begin(), runs[3].labels.end());
  CHECK(runs[2].scores.size() == small_dataset().folds.validation(0).size());
  const auto pooled = slurp(dir / "pooled.csv");
  char expected[64];
  std::snprintf(expected, sizeof expected, "vision,none,ce,1,2,%.17g,", compute_metrics(scores, labels).accuracy);
  CHECK(pooled.find(expected) != std::string::npos);

  write_summary_table(runs, keys, (dir / "table.csv").string());
  CHECK(line_count(dir / "table.csv") == 3);
  auto s = summarize(runs, keys[1]);
  CHECK(s.cells == 3);
  CHECK(s.failed == 1);
  CHECK(s.mean_auc == doctest::Approx((*runs[2].metrics.auc + *runs[3].metrics.auc) / 2));

  auto threaded = cfg;
  threaded.threads = 3;
  auto again = run_cells(threaded, small_prepared(), keys);
  for (std::size_t i = 0; i < again.size(); ++i) {
    CHECK(again[i].fold == runs[i].fold);
    CHECK(*again[i].metrics.auc == *runs[i].metrics.auc);
  }
  fs::remove_all(dir);
}
