#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "cardiff/sampling.hpp"

using namespace cardiff;
using namespace cardiff::pipe;

namespace {

template <class F>
Errc error_code(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return Errc::invalid_argument;
}

struct Fixture {
  geo::RoadNetwork net = geo::generate_grid_network(3, 3, 100.0, 5);
  data::Dataset ds;
  TrainConfig cfg;

  explicit Fixture(std::size_t trips = 40) {
    data::DatasetParams p;
    p.max_segments = 14;
    ds = data::build_dataset(net, trips, p, 16, 9);
    cfg.epochs = 1;
    cfg.batch = 8;
    cfg.seed = 3;
    cfg.T = 40;
    cfg.codec.vocab = data::vocab_size(net.size());
    cfg.codec.max_len = 16;
    cfg.codec.d_model = 16;
    cfg.codec.enc_layers = 1;
    cfg.codec.dec_layers = 1;
    cfg.codec.heads = 2;
    cfg.codec.latent_len = 2;
    cfg.codec.latent_dim = 4;
    cfg.codec.ff_mult = 2;
    cfg.seg.depth = 1;
    cfg.seg.hidden = 16;
    cfg.seg.heads = 2;
    cfg.seg.cond_dim = 8;
    cfg.seg.mlp_ratio = 2;
    cfg.gps.channels = {8, 8};
    cfg.gps.heads = 2;
    cfg.gps.length = 16;
    cfg.gps.cond_dim = 8;
    cfg.gps.groups = 4;
    for (auto* d : {&cfg.seg.latent_len, &cfg.gps.latent_len}) *d = cfg.codec.latent_len;
    for (auto* d : {&cfg.seg.latent_dim, &cfg.gps.latent_dim}) *d = cfg.codec.latent_dim;
    cfg.seg.T = cfg.gps.T = cfg.T;
    cfg.t_phy = 10;
    cfg.validate();
  }
};

const ckpt::Checkpoint& trained_codec() {
  static const ckpt::Checkpoint c = [] {
    Fixture f;
    return train_autoencoder(f.ds, f.net, f.cfg);
  }();
  return c;
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cardiff_test_pipeline";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoint container

TEST(Checkpoint, RoundTripPreservesEveryBlob) {
  ckpt::Checkpoint c;
  Rng rng(1);
  init_normal(c.params, "seg.a", {3, 4}, 1.0f, rng);
  init_normal(c.params, "seg.b", {1, 5}, 1.0f, rng);
  c.params.at("seg.a").grad.fill(0.5f);
  AdamConfig adam;
  adam_step(c.params, adam);
  c.meta = {{"stage", "seg"}, {"x", 1.5}};
  const auto path = temp_file("roundtrip.ckpt").string();
  ckpt::save_checkpoint(c, path);
  const auto back = ckpt::load_checkpoint(path);
  EXPECT_EQ(back.meta, c.meta);
  ASSERT_EQ(back.params.entries().size(), c.params.entries().size());
  for (const auto& [name, e] : c.params.entries()) {
    const auto& b = back.params.at(name);
    EXPECT_EQ(b.value, e.value) << name;
    EXPECT_EQ(b.m, e.m) << name;
    EXPECT_EQ(b.v, e.v) << name;
    EXPECT_EQ(b.step, e.step) << name;
  }
  EXPECT_TRUE(ckpt::serialize(back) == ckpt::serialize(c));
}

TEST(Checkpoint, HeaderLayout) {
  ckpt::Checkpoint c;
  c.params.add("gps.w", Tensor<float>(Shape{1, 2}, {1.0f, -2.0f}));
  const auto bytes = ckpt::serialize(c);
  EXPECT_EQ(bytes.substr(0, 4), "CDFK");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= std::uint64_t(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  EXPECT_EQ(bytes.size(), 16 + hlen + 8);
  const auto header = nlohmann::json::parse(bytes.substr(16, hlen));
  EXPECT_EQ(header["tensors"][0]["name"], "gps.w");
  EXPECT_EQ(header["tensors"][0]["dtype"], "f32");
  // 1.0f little endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[16 + hlen + 3]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16 + hlen + 2]), 0x80);
}

TEST(Checkpoint, TruncatedFileIsCorruption) {
  ckpt::Checkpoint c;
  c.params.add("ae.w", Tensor<float>::filled(Shape{4, 4}, 1.0f));
  const auto bytes = ckpt::serialize(c);
  for (std::size_t cut : {std::size_t(3), std::size_t(12), std::size_t(20), bytes.size() - 1})
    EXPECT_EQ(error_code([&] { ckpt::deserialize(bytes.substr(0, cut)); }), Errc::corruption) << cut;
  EXPECT_EQ(error_code([&] { ckpt::deserialize(bytes + "x"); }), Errc::corruption);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(error_code([&] { ckpt::deserialize(bad); }), Errc::corruption);
  const auto path = temp_file("truncated.ckpt").string();
  {
    std::ofstream f(path, std::ios::binary);
    f << bytes.substr(0, bytes.size() / 2);
  }
  EXPECT_EQ(error_code([&] { ckpt::load_checkpoint(path); }), Errc::corruption);
  EXPECT_EQ(error_code([&] { ckpt::load_checkpoint(temp_file("absent.ckpt").string()); }), Errc::io);
}

TEST(Checkpoint, RefusesOtherFormatVersion) {
  ckpt::Checkpoint c;
  c.params.add("ae.w", Tensor<float>::filled(Shape{1, 1}, 1.0f));
  auto bytes = ckpt::serialize(c);
  bytes[4] = 2;
  EXPECT_EQ(error_code([&] { ckpt::deserialize(bytes); }), Errc::version_mismatch);
}

TEST(Checkpoint, MissingGroup) {
  ckpt::Checkpoint c;
  c.params.add("seg.w", Tensor<float>::filled(Shape{1, 1}, 1.0f));
  EXPECT_NO_THROW(c.require_group("seg."));
  EXPECT_EQ(error_code([&] { c.require_group("gps."); }), Errc::missing_group);
}

// ---------------------------------------------------------------------------
// Configuration

TEST(TrainConfig, JsonRoundTrip) {
  Fixture f;
  f.cfg.dp.mode = "stage2";
  f.cfg.dp.clip = std::numeric_limits<double>::infinity();
  f.cfg.dp.sigma = 0;
  f.cfg.stage = Stage::gps;
  const auto j = f.cfg.to_json();
  EXPECT_EQ(j["dp"]["clip"], "inf");
  const auto back = TrainConfig::from_json(j);
  EXPECT_EQ(back.to_json(), j);
  EXPECT_TRUE(std::isinf(back.dp.clip));
}

TEST(TrainConfig, DefaultsFollowCodec) {
  const auto c = TrainConfig::from_json({{"codec", {{"latent_len", 4}, {"latent_dim", 16}}}, {"schedule", {{"T", 200}}}});
  EXPECT_EQ(c.seg.latent_len, 4u);
  EXPECT_EQ(c.gps.latent_dim, 16u);
  EXPECT_EQ(c.seg.T, 200);
  EXPECT_EQ(c.schedule().T, 200);
}

TEST(TrainConfig, Errors) {
  EXPECT_EQ(error_code([] { TrainConfig::from_json({{"epochs", "many"}}); }), Errc::parse);
  EXPECT_EQ(error_code([] { TrainConfig::from_json({{"dp", {{"mode", "stage3"}}}}); }), Errc::invalid_argument);
  EXPECT_EQ(error_code([] { TrainConfig::from_json({{"seg", {{"latent_dim", 3}}}}); }), Errc::invalid_argument);
  EXPECT_EQ(error_code([] { parse_stage("joint"); }), Errc::invalid_argument);
  EXPECT_EQ(error_code([] { TrainConfig::from_json({{"lr_schedule", "step"}}); }), Errc::invalid_argument);
  EXPECT_EQ(error_code([] { TrainConfig::from_json({{"subpath_prob", 1.5}}); }), Errc::invalid_argument);
}

TEST(TrainConfig, CosineScheduleEndpoints) {
  TrainConfig c;
  c.lr = 2e-3;
  EXPECT_DOUBLE_EQ(detail::scheduled_lr(c, 0, 100), 2e-3);
  EXPECT_NEAR(detail::scheduled_lr(c, 50, 100), 1e-3, 1e-15);
  EXPECT_NEAR(detail::scheduled_lr(c, 100, 100), 0.0, 1e-15);
  for (std::uint64_t k = 1; k <= 100; ++k)
    EXPECT_LT(detail::scheduled_lr(c, k, 100), detail::scheduled_lr(c, k - 1, 100));
  c.lr_schedule = "constant";
  EXPECT_DOUBLE_EQ(detail::scheduled_lr(c, 70, 100), 2e-3);
}

TEST(TrainAutoencoder, SubpathsAreContiguousAndLongEnough) {
  const std::vector<int> seq{4, 8, 15, 16, 23, 42};
  Rng rng(12);
  std::size_t cut = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const auto s = detail::maybe_subpath(seq, 0.5, rng);
    ASSERT_GE(s.size(), 2u);
    const auto at = std::search(seq.begin(), seq.end(), s.begin(), s.end());
    ASSERT_NE(at, seq.end());
    cut += s != seq;
  }
  EXPECT_GT(cut, 150u);
  EXPECT_LT(cut, 260u);
  EXPECT_EQ(detail::maybe_subpath(seq, 0.0, rng), seq);
  EXPECT_EQ(detail::maybe_subpath({1, 2}, 1.0, rng), (std::vector<int>{1, 2}));
}

TEST(DpConfig, Coverage) {
  DpConfig d;
  d.mode = "stage1";
  EXPECT_TRUE(d.covers(Stage::seg));
  EXPECT_FALSE(d.covers(Stage::gps));
  d.mode = "both";
  EXPECT_TRUE(d.covers(Stage::gps));
  EXPECT_FALSE(d.covers(Stage::ae));
}

TEST(TrainLog, Csv) {
  TrainLog log;
  int seen = 0;
  log.on_row = [&](const MetricRow&) { ++seen; };
  log.add(1, "train", 0.5);
  log.add(1, "val", 0.25);
  EXPECT_EQ(log.csv(), "epoch,split,loss\n1,train,0.5\n1,val,0.25\n");
  EXPECT_EQ(seen, 2);
  EXPECT_EQ(log.at(1, "val"), 0.25);
  EXPECT_TRUE(std::isnan(log.at(2, "val")));
}

// ---------------------------------------------------------------------------
// Autoencoder training

TEST(TrainAutoencoder, ReloadReproducesValLoss) {
  Fixture f(10);
  TrainLog log;
  const auto c = train_autoencoder(f.ds, f.net, f.cfg, &log);
  ASSERT_FALSE(f.ds.indices(data::Split::val).empty());
  const double logged = log.at(1, "val");
  const auto path = temp_file("ae.ckpt").string();
  ckpt::save_checkpoint(c, path);
  const auto loaded = ckpt::load_checkpoint(path);
  const auto cb = CodecBundle::from_checkpoint(&loaded);
  const auto m = evaluate_codec(cb.params, cb.cfg, f.ds, f.ds.indices(data::Split::val), codec::normalized_centers(f.net));
  EXPECT_EQ(m.loss, logged);
  EXPECT_TRUE(std::isfinite(logged));
}

TEST(TrainAutoencoder, HeaderEchoesConfigAndStoresStats) {
  const auto& c = trained_codec();
  Fixture f;
  EXPECT_EQ(c.meta["config"], f.cfg.to_json());
  EXPECT_EQ(c.meta["stage"], "ae");
  EXPECT_EQ(c.meta["schedule"], f.cfg.schedule().to_json());
  const auto& sg = c.params.value("ae.latent_sigma");
  EXPECT_EQ(sg.size(), f.cfg.codec.latent_size());
  for (float v : sg.values()) EXPECT_GT(v, 0.0f);
  c.require_group("ae.");
}

TEST(TrainAutoencoder, Deterministic) {
  Fixture f;
  TrainLog a, b;
  const auto c1 = train_autoencoder(f.ds, f.net, f.cfg, &a);
  const auto c2 = train_autoencoder(f.ds, f.net, f.cfg, &b);
  EXPECT_EQ(a.csv(), b.csv());
  EXPECT_TRUE(ckpt::serialize(c1) == ckpt::serialize(c2));
  EXPECT_TRUE(ckpt::serialize(c1) == ckpt::serialize(trained_codec()));
}

TEST(TrainAutoencoder, VocabularyMismatch) {
  Fixture f;
  f.cfg.codec.vocab += 1;
  EXPECT_EQ(error_code([&] { train_autoencoder(f.ds, f.net, f.cfg); }), Errc::invalid_argument);
}

// ---------------------------------------------------------------------------
// Denoiser stages

TEST(TrainStage, MissingCodec) {
  Fixture f;
  EXPECT_EQ(error_code([&] { train_stage(f.ds, f.net, nullptr, Stage::seg, f.cfg); }), Errc::missing_codec);
  ckpt::Checkpoint not_codec;
  not_codec.params.add("seg.w", Tensor<float>::filled(Shape{1, 1}, 0.0f));
  not_codec.meta = {{"stage", "seg"}};
  EXPECT_EQ(error_code([&] { train_stage(f.ds, f.net, &not_codec, Stage::gps, f.cfg); }), Errc::missing_codec);
}

TEST(TrainStage, CheckpointsCarryOnlyTheirGroup) {
  Fixture f;
  TrainLog log;
  const auto seg = train_stage(f.ds, f.net, &trained_codec(), Stage::seg, f.cfg, &log);
  for (const auto& [name, _] : seg.params.entries()) EXPECT_EQ(name.rfind("seg.", 0), 0u) << name;
  EXPECT_EQ(seg.meta["stage"], "seg");
  EXPECT_TRUE(std::isfinite(log.at(1, "train")));
  EXPECT_TRUE(std::isfinite(log.at(1, "val")));
  const auto gps = train_stage(f.ds, f.net, &trained_codec(), Stage::gps, f.cfg);
  for (const auto& [name, _] : gps.params.entries()) EXPECT_EQ(name.rfind("gps.", 0), 0u) << name;
}

TEST(TrainStage, StagesAreIndependent) {
  Fixture f;
  const auto seg1 = ckpt::serialize(train_stage(f.ds, f.net, &trained_codec(), Stage::seg, f.cfg));
  const auto gps1 = ckpt::serialize(train_stage(f.ds, f.net, &trained_codec(), Stage::gps, f.cfg));
  const auto seg2 = ckpt::serialize(train_stage(f.ds, f.net, &trained_codec(), Stage::seg, f.cfg));
  EXPECT_TRUE(seg1 == seg2);
  f.cfg.lr *= 2;
  const auto gps2 = ckpt::serialize(train_stage(f.ds, f.net, &trained_codec(), Stage::gps, f.cfg));
  EXPECT_FALSE(gps1 == gps2);
  EXPECT_TRUE(seg1 == ckpt::serialize(train_stage(f.ds, f.net, &trained_codec(), Stage::seg, Fixture().cfg)));
}

TEST(TrainStage, PhysicsTermChangesSegmentTraining) {
  Fixture f;
  f.cfg.t_phy = f.cfg.T;
  f.cfg.lambda_p = 0.5;
  const auto with = train_stage(f.ds, f.net, &trained_codec(), Stage::seg, f.cfg);
  f.cfg.lambda_p = 0;
  const auto without = train_stage(f.ds, f.net, &trained_codec(), Stage::seg, f.cfg);
  EXPECT_FALSE(ckpt::serialize(with) == ckpt::serialize(without));
}

// Clip +inf and sigma 0 reduce the sanitizer to the batch mean, so the update
// gradient equals the plain batch gradient up to f32 summation order.
TEST(TrainStage, DegenerateDpMatchesPlainGradient) {
  Fixture f;
  f.cfg.lambda_p = 0;
  const auto cb = CodecBundle::from_checkpoint(&trained_codec());
  const auto z0 = standardized_latents(cb, f.ds, f.net);
  const auto train = f.ds.indices(data::Split::train);
  const std::vector<std::size_t> idx(train.begin(), train.begin() + 8);
  for (Stage st : {Stage::gps, Stage::seg}) {
    TrainConfig dp_cfg = f.cfg;
    dp_cfg.dp.mode = st == Stage::gps ? "stage2" : "stage1";
    dp_cfg.dp.sigma = 0;
    dp_cfg.dp.clip = std::numeric_limits<double>::infinity();
    StageTrainer plain(f.ds, f.net, cb, st, f.cfg, z0), dp(f.ds, f.net, cb, st, dp_cfg, z0);
    for (std::uint64_t step = 0; step < 3; ++step) {
      const double l1 = plain.batch_gradient(idx, step), l2 = dp.batch_gradient(idx, step);
      EXPECT_NEAR(l1, l2, 1e-5 * std::abs(l1));
      const auto g1 = plain.params().flat_grads(), g2 = dp.params().flat_grads();
      double diff = 0, norm = 0;
      for (std::size_t i = 0; i < g1.size(); ++i) {
        diff += double(g1[i] - g2[i]) * double(g1[i] - g2[i]);
        norm += double(g1[i]) * double(g1[i]);
      }
      EXPECT_LE(std::sqrt(diff), 1e-5 * std::sqrt(norm)) << stage_name(st) << " step " << step;
      EXPECT_GT(norm, 0.0);
    }
  }
}

TEST(TrainStage, DegenerateDpTracksPlainTraining) {
  for (Stage st : {Stage::gps, Stage::seg}) {
    Fixture f;
    f.cfg.lambda_p = 0;
    const auto plain = train_stage(f.ds, f.net, &trained_codec(), st, f.cfg);
    f.cfg.dp.mode = st == Stage::gps ? "stage2" : "stage1";
    f.cfg.dp.sigma = 0;
    f.cfg.dp.clip = std::numeric_limits<double>::infinity();
    const auto dp = train_stage(f.ds, f.net, &trained_codec(), st, f.cfg);
    double worst = 0;
    for (const auto& [name, e] : plain.params.entries()) {
      const auto& o = dp.params.at(name).value;
      for (std::size_t i = 0; i < o.size(); ++i) worst = std::max(worst, double(std::abs(o[i] - e.value[i])));
    }
    // Adam normalizes near-zero gradient coordinates, so rounding can move a
    // parameter by up to about lr per step; five steps bound the drift.
    EXPECT_LE(worst, 5 * f.cfg.lr) << stage_name(st);
  }
}

TEST(TrainStage, DpNoiseChangesTrajectory) {
  Fixture f;
  const auto plain = train_stage(f.ds, f.net, &trained_codec(), Stage::gps, f.cfg);
  f.cfg.dp.mode = "stage2";
  const auto dp = train_stage(f.ds, f.net, &trained_codec(), Stage::gps, f.cfg);
  EXPECT_FALSE(plain.params == dp.params);
  f.cfg.dp.mode = "stage1";
  EXPECT_TRUE(plain.params == train_stage(f.ds, f.net, &trained_codec(), Stage::gps, f.cfg).params);
}

TEST(TrainStage, JointLoopProducesBothStages) {
  Fixture f;
  TrainLog a, b;
  const auto [seg, gps] = train_joint(f.ds, f.net, &trained_codec(), f.cfg, &a, &b);
  seg.require_group("seg.");
  gps.require_group("gps.");
  EXPECT_TRUE(std::isfinite(a.at(1, "train")));
  EXPECT_TRUE(std::isfinite(b.at(1, "train")));
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

struct Trained {
  Fixture f;
  ckpt::Checkpoint seg, gps;
  CascadeModels models;
  Trained() {
    seg = train_stage(f.ds, f.net, &trained_codec(), Stage::seg, f.cfg);
    gps = train_stage(f.ds, f.net, &trained_codec(), Stage::gps, f.cfg);
    models = CascadeModels::from_checkpoints(trained_codec(), seg, gps);
  }
};

const Trained& trained() {
  static const Trained t;
  return t;
}

}  // namespace

TEST(Sampling, StridedEvaluationCount) {
  const auto& t = trained();
  SampleCounters n;
  SampleOptions opt;
  opt.interval = 5;
  const auto out = sample_cascaded(t.models, auto_conditions(t.f.ds, 1, 2), t.f.ds.bbox, 7, opt, &n);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(n.seg_evals, 8u);  // 40, 35, ..., 5
  EXPECT_EQ(n.gps_evals, 8u);
  EXPECT_EQ(n.seg_steps, (std::vector<int>{40, 35, 30, 25, 20, 15, 10, 5}));
  EXPECT_EQ(out[0].gps.size(), 16u);
}

TEST(Sampling, DeskScheduleEvaluationCount) {
  Fixture f;
  f.cfg.T = f.cfg.seg.T = f.cfg.gps.T = 1000;
  f.cfg.t_phy = 100;
  ckpt::Checkpoint ae = trained_codec();
  ae.meta["schedule"] = f.cfg.schedule().to_json();
  const auto cb = CodecBundle::from_checkpoint(&ae);
  const auto z0 = standardized_latents(cb, f.ds, f.net);
  const auto seg = StageTrainer(f.ds, f.net, cb, Stage::seg, f.cfg, z0).checkpoint();
  const auto gps = StageTrainer(f.ds, f.net, cb, Stage::gps, f.cfg, z0).checkpoint();
  const auto m = CascadeModels::from_checkpoints(ae, seg, gps);
  SampleCounters n;
  sample_cascaded(m, auto_conditions(f.ds, 1, 0), f.ds.bbox, 1, {}, &n);
  EXPECT_EQ(n.seg_evals, 20u);
  EXPECT_EQ(n.gps_evals, 20u);
  EXPECT_EQ(n.seg_steps.front(), 1000);
  EXPECT_EQ(n.seg_steps.back(), 50);
}

TEST(Sampling, ReplayIsBitIdentical) {
  const auto& t = trained();
  const auto conds = auto_conditions(t.f.ds, 5, 3);
  for (int interval : {1, 10}) {
    SampleOptions opt;
    opt.interval = interval;
    opt.batch = 2;
    const auto a = sample_cascaded(t.models, conds, t.f.ds.bbox, 11, opt);
    const auto b = sample_cascaded(t.models, conds, t.f.ds.bbox, 11, opt);
    EXPECT_EQ(samples_json(a, t.f.ds.bbox).dump(), samples_json(b, t.f.ds.bbox).dump()) << interval;
    const auto c = sample_cascaded(t.models, conds, t.f.ds.bbox, 12, opt);
    EXPECT_NE(samples_json(a, t.f.ds.bbox).dump(), samples_json(c, t.f.ds.bbox).dump());
  }
}

TEST(Sampling, PerSampleStreamsIgnoreBatching) {
  const auto& t = trained();
  const auto conds = auto_conditions(t.f.ds, 4, 3);
  SampleOptions one, all;
  one.interval = all.interval = 5;
  one.batch = 1;
  all.batch = 4;
  const auto a = sample_cascaded(t.models, conds, t.f.ds.bbox, 5, one);
  const auto b = sample_cascaded(t.models, conds, t.f.ds.bbox, 5, all);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < a[i].gps.size(); ++k) {
      EXPECT_NEAR(a[i].gps[k].x, b[i].gps[k].x, 1e-2);
      EXPECT_NEAR(a[i].gps[k].y, b[i].gps[k].y, 1e-2);
    }
}

TEST(Sampling, UnitIntervalDelegatesToDdpmStep) {
  const auto& t = trained();
  const auto& m = t.models;
  const auto conds = auto_conditions(t.f.ds, 1, 4);
  SampleOptions opt;
  opt.interval = 1;
  const auto got = sample_cascaded(m, conds, t.f.ds.bbox, 21, opt);

  const auto cond = den::condition_matrix<float>(conds);
  Rng rng = Rng::substream(21, 0);
  Tensor<float> z = diff::randn<float>(Shape{m.codec.cfg.latent_len, m.codec.cfg.latent_dim}, rng);
  for (int s = m.schedule.T; s >= 1; --s) {
    nn::Graph<float> g(false);
    const auto eps = g.value(den::seg_eps_forward(g, m.seg, m.seg_cfg, g.constant(z), {s}, cond));
    z = diff::ddpm_step(z, eps, s, m.schedule, rng);
  }
  Tensor<float> x = diff::randn<float>(Shape{m.gps_cfg.length, 2}, rng);
  for (int s = m.schedule.T; s >= 1; --s) {
    nn::Graph<float> g(false);
    const auto eps =
        g.value(den::gps_eps_forward(g, m.gps, m.gps_cfg, g.constant(x), {s}, cond, g.constant(z), {0}));
    x = diff::ddpm_step(x, eps, s, m.schedule, rng);
  }
  const auto hyp = codec::beam_decode(m.codec.params, m.codec.cfg, codec::destandardize(z, m.codec.stats), 1, 4);
  EXPECT_EQ(got[0].segments, codec::hypothesis_segments(hyp[0]));
  for (std::size_t k = 0; k < x.rows(); ++k) {
    const auto p = data::denormalize_point({double(x(k, 0)), double(x(k, 1))}, t.f.ds.bbox);
    EXPECT_EQ(got[0].gps[k], p) << k;
  }
}

TEST(Sampling, Errors) {
  const auto& t = trained();
  const auto conds = auto_conditions(t.f.ds, 1, 0);
  SampleOptions opt;
  opt.interval = 0;
  EXPECT_EQ(error_code([&] { sample_cascaded(t.models, conds, t.f.ds.bbox, 0, opt); }), Errc::invalid_interval);
  opt.interval = 41;
  EXPECT_EQ(error_code([&] { sample_cascaded(t.models, conds, t.f.ds.bbox, 0, opt); }), Errc::invalid_interval);

  auto gps = t.gps;
  gps.meta["schedule"]["T"] = 50;
  EXPECT_EQ(error_code([&] { CascadeModels::from_checkpoints(trained_codec(), t.seg, gps); }),
            Errc::incompatible_checkpoint);
  gps = t.gps;
  gps.meta["codec"]["d_model"] = 32;
  EXPECT_EQ(error_code([&] { CascadeModels::from_checkpoints(trained_codec(), t.seg, gps); }),
            Errc::incompatible_checkpoint);
  EXPECT_EQ(error_code([&] { CascadeModels::from_checkpoints(trained_codec(), t.gps, t.seg); }),
            Errc::incompatible_checkpoint);
  ckpt::Checkpoint empty_seg;
  empty_seg.meta = t.seg.meta;
  EXPECT_EQ(error_code([&] { CascadeModels::from_checkpoints(trained_codec(), empty_seg, t.gps); }),
            Errc::missing_group);
  EXPECT_EQ(error_code([&] { CascadeModels::from_checkpoints(t.seg, t.seg, t.gps); }), Errc::missing_codec);
}

TEST(Sampling, SamplesFileRoundTrip) {
  const auto& t = trained();
  SampleOptions opt;
  opt.interval = 4;
  const auto out = sample_cascaded(t.models, auto_conditions(t.f.ds, 3, 0), t.f.ds.bbox, 2, opt);
  const auto path = temp_file("samples.json").string();
  save_samples(out, t.f.ds.bbox, path);
  const auto back = load_samples(path);
  ASSERT_EQ(back.size(), out.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_EQ(back[i].segments, out[i].segments);
    EXPECT_EQ(back[i].gps, out[i].gps);
    EXPECT_EQ(back[i].cond, out[i].cond);
  }
  for (const auto& tr : out)
    for (int s : tr.segments) EXPECT_LT(std::size_t(s), t.f.net.size());
}

TEST(Sampling, AutoConditionsComeFromTrainingRecords) {
  Fixture f;
  const auto conds = auto_conditions(f.ds, 50, 1);
  for (const auto& c : conds) {
    bool found = false;
    for (auto i : f.ds.indices(data::Split::train)) found |= f.ds.records[i].cond == c;
    EXPECT_TRUE(found);
  }
  EXPECT_EQ(conds, auto_conditions(f.ds, 50, 1));
}
