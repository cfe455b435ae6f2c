#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cardiff/checkpoint.hpp"
#include "cardiff/config.hpp"
#include "cardiff/optim.hpp"

// Sequential per-stage training: autoencoder first, then the segment and GPS
// denoisers independently on latents of the frozen codec.

namespace cardiff::pipe {

using nn::Var;

struct MetricRow {
  int epoch = 0;
  std::string split;
  double loss = 0;
};

struct TrainLog {
  std::vector<MetricRow> rows;
  std::function<void(const MetricRow&)> on_row;  ///< optional progress hook

  void add(int epoch, std::string split, double loss) {
    rows.push_back({epoch, std::move(split), loss});
    if (on_row) on_row(rows.back());
  }
  /// Loss of `split` at `epoch`; NaN when absent.
  double at(int epoch, const std::string& split) const {
    for (const auto& r : rows)
      if (r.epoch == epoch && r.split == split) return r.loss;
    return std::numeric_limits<double>::quiet_NaN();
  }
  std::string csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,split,loss\n";
    for (const auto& r : rows) os << r.epoch << ',' << r.split << ',' << r.loss << '\n';
    return os.str();
  }
};

/// Frozen codec loaded from an autoencoder checkpoint.
struct CodecBundle {
  codec::CodecConfig cfg;
  ParamStore<float> params;
  codec::LatentStats stats;

  static CodecBundle from_checkpoint(const ckpt::Checkpoint* c) {
    require(c != nullptr, Errc::missing_codec, "an autoencoder checkpoint is required");
    require(c->meta.value("stage", std::string()) == "ae" && c->meta.contains("codec") &&
                c->params.contains("ae.latent_mu") && c->params.contains("ae.latent_sigma"),
            Errc::missing_codec, "checkpoint is not a trained autoencoder (stage/latent statistics missing)");
    CodecBundle b;
    b.cfg = codec::CodecConfig::from_json(c->meta.at("codec"));
    for (const auto& [name, e] : c->params.entries())
      if (name != "ae.latent_mu" && name != "ae.latent_sigma") b.params.add(name, e.value);
    const auto& mu = c->params.value("ae.latent_mu");
    const auto& sg = c->params.value("ae.latent_sigma");
    require(mu.size() == b.cfg.latent_size() && sg.size() == mu.size(), Errc::incompatible_checkpoint,
            "latent statistics do not match the codec shape");
    b.stats.mu.assign(mu.values().begin(), mu.values().end());
    b.stats.sigma.assign(sg.values().begin(), sg.values().end());
    return b;
  }
};

namespace detail {

inline constexpr std::uint64_t kShuffleSalt = 0x5348554646ULL;
inline constexpr std::uint64_t kBatchSalt = 0xBA7C4ULL;
inline constexpr std::uint64_t kDpSalt = 0xD9D9ULL;
inline constexpr std::uint64_t kValSalt = 0x7A1ULL;
inline constexpr std::uint64_t kInitSalt = 0x1417ULL;
inline constexpr std::uint64_t kAugSalt = 0xA06ULL;

inline std::uint64_t stage_key(std::uint64_t seed, Stage s) { return splitmix64(seed ^ (0x57A6EULL + std::uint64_t(s))); }

inline std::vector<std::size_t> shuffled(std::vector<std::size_t> idx, std::uint64_t key, int epoch) {
  Rng rng = Rng::substream(key ^ kShuffleSalt, std::uint64_t(epoch));
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  return idx;
}

/// Learning rate for optimizer step `step` (0-based) of `total`.
inline double scheduled_lr(const TrainConfig& cfg, std::uint64_t step, std::uint64_t total) {
  if (cfg.lr_schedule == "constant" || total == 0) return cfg.lr;
  return 0.5 * cfg.lr * (1 + std::cos(std::numbers::pi * double(step) / double(total)));
}

/// With probability p, a random contiguous sub-path of at least two segments.
inline std::vector<int> maybe_subpath(const std::vector<int>& seq, double p, Rng& rng) {
  if (seq.size() < 3 || !(rng.uniform() < p)) return seq;
  const int a = rng.uniform_int(0, int(seq.size()) - 2);
  const int b = rng.uniform_int(a + 1, int(seq.size()) - 1);
  return {seq.begin() + a, seq.begin() + b + 1};
}

inline std::vector<std::vector<std::size_t>> batches(const std::vector<std::size_t>& idx, std::size_t b) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < idx.size(); i += b)
    out.emplace_back(idx.begin() + std::ptrdiff_t(i), idx.begin() + std::ptrdiff_t(std::min(idx.size(), i + b)));
  return out;
}

inline Tensor<float> gps_tensor(const geo::Polyline& pts) {
  Tensor<float> t = Tensor<float>::zeros(pts.size(), 2);
  for (std::size_t i = 0; i < pts.size(); ++i) t(i, 0) = float(pts[i].x), t(i, 1) = float(pts[i].y);
  return t;
}

inline Tensor<float> stack(const std::vector<const Tensor<float>*>& parts) {
  const std::size_t cols = parts.front()->cols();
  std::size_t rows = 0;
  for (auto* p : parts) rows += p->rows();
  Tensor<float> out = Tensor<float>::zeros(rows, cols);
  std::size_t off = 0;
  for (auto* p : parts) {
    std::copy_n(p->data(), p->size(), out.data() + off);
    off += p->size();
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Autoencoder

struct CodecMetrics {
  double loss = 0;            ///< mean NLL per non-PAD target
  double token_accuracy = 0;  ///< teacher-forced argmax accuracy
  double exact_match = 0;     ///< beam-decoded sequence equals the input (NaN if not computed)
};

/// Teacher-forced loss/accuracy over records `idx`; exact match with beam
/// width `beam` when beam > 0.
inline CodecMetrics evaluate_codec(const ParamStore<float>& s, const codec::CodecConfig& c, const data::Dataset& ds,
                                   const std::vector<std::size_t>& idx, const std::vector<geo::Point>& centers,
                                   std::size_t beam = 0, std::size_t batch = 64) {
  require(!idx.empty(), Errc::empty_set, "evaluate_codec: no records");
  double nll = 0;
  codec::TokenAccuracy acc;
  std::size_t exact = 0;
  for (const auto& part : detail::batches(idx, batch)) {
    std::vector<std::vector<int>> seqs;
    for (auto i : part) seqs.push_back(ds.records[i].seg);
    auto b = codec::make_token_batch<float>(seqs, centers, c);
    nn::Graph<float> g(false);
    Var z = codec::encode_to_latent(g, s, c, b);
    const auto t = codec::teacher_tokens(b.tokens, b.batch);
    Var logits = codec::decode_logits(g, s, c, z, b.batch, t.inputs);
    const auto a = codec::token_accuracy(g.value(logits), t);
    nll += double(g.value(codec::recon_loss(g, logits, t))[0]) * double(a.total);
    acc.correct += a.correct;
    acc.total += a.total;
    if (beam > 0) {
      const auto hyps = codec::beam_decode(s, c, g.value(z), b.batch, beam);
      for (std::size_t k = 0; k < hyps.size(); ++k) exact += codec::hypothesis_segments(hyps[k]) == seqs[k];
    }
  }
  CodecMetrics m;
  m.loss = nll / double(acc.total);
  m.token_accuracy = acc.rate();
  m.exact_match = beam > 0 ? double(exact) / double(idx.size()) : std::numeric_limits<double>::quiet_NaN();
  return m;
}

/// Raw latents [L_z, d_z] for records `idx`.
inline std::vector<Tensor<float>> encode_records(const ParamStore<float>& s, const codec::CodecConfig& c,
                                                 const data::Dataset& ds, const std::vector<std::size_t>& idx,
                                                 const std::vector<geo::Point>& centers, std::size_t batch = 64) {
  std::vector<Tensor<float>> out;
  const std::size_t per = c.latent_size();
  for (const auto& part : detail::batches(idx, batch)) {
    std::vector<std::vector<int>> seqs;
    for (auto i : part) seqs.push_back(ds.records[i].seg);
    auto b = codec::make_token_batch<float>(seqs, centers, c);
    nn::Graph<float> g(false);
    const auto& z = g.value(codec::encode_to_latent(g, s, c, b));
    for (std::size_t k = 0; k < part.size(); ++k)
      out.emplace_back(Shape{c.latent_len, c.latent_dim},
                       std::vector<float>(z.data() + k * per, z.data() + (k + 1) * per));
  }
  return out;
}

inline ckpt::Checkpoint train_autoencoder(const data::Dataset& ds, const geo::RoadNetwork& net, const TrainConfig& cfg,
                                          TrainLog* log = nullptr) {
  cfg.validate();
  const auto& c = cfg.codec;
  require(c.vocab == data::vocab_size(net.size()), Errc::invalid_argument,
          "codec vocab " + std::to_string(c.vocab) + " does not match " + std::to_string(net.size()) +
              " segments + 3 specials");
  const auto train = ds.indices(data::Split::train), val = ds.indices(data::Split::val);
  require(train.size() >= 2, Errc::empty_set, "autoencoder training needs at least two training records");
  const auto centers = codec::normalized_centers(net);
  const auto key = detail::stage_key(cfg.seed, Stage::ae);
  ParamStore<float> s;
  {
    Rng rng = Rng::substream(key, detail::kInitSalt);
    codec::init_codec(s, c, rng);
  }
  AdamConfig adam;
  adam.lr = cfg.lr;
  TrainLog local;
  TrainLog& lg = log ? *log : local;
  const std::uint64_t total = std::uint64_t(cfg.epochs) * detail::batches(train, cfg.batch).size();
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double sum = 0;
    std::size_t nb = 0;
    for (const auto& part : detail::batches(detail::shuffled(train, key, epoch), cfg.batch)) {
      Rng aug = Rng::substream(key ^ detail::kAugSalt, step);
      std::vector<std::vector<int>> seqs;
      for (auto i : part) seqs.push_back(detail::maybe_subpath(ds.records[i].seg, cfg.subpath_prob, aug));
      auto b = codec::make_token_batch<float>(seqs, centers, c);
      nn::Graph<float> g;
      Var loss = codec::autoencoder_loss(g, s, c, b);
      g.backward(loss);
      g.accumulate_param_grads(s);
      adam.lr = detail::scheduled_lr(cfg, step++, total);
      adam_step(s, adam);
      sum += g.value(loss)[0];
      ++nb;
    }
    lg.add(epoch, "train", sum / double(nb));
    if (!val.empty()) lg.add(epoch, "val", evaluate_codec(s, c, ds, val, centers).loss);
  }
  std::vector<std::vector<double>> flat;
  for (const auto& z : encode_records(s, c, ds, train, centers)) flat.emplace_back(z.values().begin(), z.values().end());
  auto stats = codec::fit_latent_stats(flat);
  ckpt::Checkpoint out;
  out.params = s;
  Tensor<float> mu(Shape{1, stats.mu.size()}), sg(Shape{1, stats.sigma.size()});
  for (std::size_t i = 0; i < stats.mu.size(); ++i) mu[i] = float(stats.mu[i]), sg[i] = float(stats.sigma[i]);
  out.params.add("ae.latent_mu", mu);
  out.params.add("ae.latent_sigma", sg);
  out.meta = {{"stage", "ae"},
              {"config", cfg.to_json()},
              {"codec", c.to_json()},
              {"schedule", cfg.schedule().to_json()},
              {"network_segments", net.size()},
              {"N", ds.N}};
  return out;
}

// ---------------------------------------------------------------------------
// Denoiser stages

/// Owns one denoiser store and performs the per-batch procedure: sample t and
/// noise, form the noisy input in closed form, evaluate the stage loss and
/// update (per-example clipped and noised when DP covers the stage). The
/// dataset, network, codec and latents are held by reference.
class StageTrainer {
 public:
  StageTrainer(const data::Dataset& ds, const geo::RoadNetwork& net, const CodecBundle& cb, Stage stage,
               const TrainConfig& cfg, const std::vector<Tensor<float>>& z0_std)
      : ds_(ds), net_(net), cb_(cb), stage_(stage), cfg_(cfg), z0_(z0_std), sched_(cfg.schedule()),
        key_(detail::stage_key(cfg.seed, stage)) {
    require(stage == Stage::seg || stage == Stage::gps, Errc::invalid_argument, "StageTrainer handles seg or gps");
    require(z0_.size() == ds.records.size(), Errc::shape_mismatch, "one latent per record required");
    Rng rng = Rng::substream(key_, detail::kInitSalt);
    if (stage == Stage::seg) {
      require(cfg.seg.latent_len == cb.cfg.latent_len && cfg.seg.latent_dim == cb.cfg.latent_dim,
              Errc::incompatible_checkpoint, "segment denoiser latent shape differs from the codec");
      den::init_seg_denoiser(params_, cfg.seg, rng);
    } else {
      require(cfg.gps.latent_len == cb.cfg.latent_len && cfg.gps.latent_dim == cb.cfg.latent_dim,
              Errc::incompatible_checkpoint, "GPS denoiser latent shape differs from the codec");
      require(cfg.gps.length == ds.N, Errc::shape_mismatch, "GPS denoiser length differs from the dataset N");
      den::init_gps_denoiser(params_, cfg.gps, rng);
    }
    adam_.lr = cfg.lr;
    phy_ = {&cb_.params, &cb_.cfg, &cb_.stats, &net_.successor_lists(), cfg.lambda_p, cfg.t_phy};
  }

  ParamStore<float>& params() { return params_; }
  const ParamStore<float>& params() const { return params_; }
  std::uint64_t key() const { return key_; }

  /// Accumulates the update gradient of one batch into the store (per-example
  /// clipped and noised when DP covers the stage); returns the batch loss.
  double batch_gradient(const std::vector<std::size_t>& idx, std::uint64_t batch_no) {
    Rng rng = Rng::substream(key_ ^ detail::kBatchSalt, batch_no);
    const auto draws = make_draws(idx, rng);
    params_.zero_grad();
    if (!cfg_.dp.covers(stage_)) {
      nn::Graph<float> g;
      Var loss = build_loss(g, idx, draws);
      g.backward(loss);
      g.accumulate_param_grads(params_);
      return g.value(loss)[0];
    }
    double value = 0;
    std::vector<std::vector<float>> per;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      params_.zero_grad();
      nn::Graph<float> g;
      Var loss = build_loss(g, {idx[k]}, slice(draws, k));
      g.backward(loss);
      g.accumulate_param_grads(params_);
      per.push_back(params_.flat_grads());
      value += g.value(loss)[0] / double(idx.size());
    }
    Rng noise = Rng::substream(key_ ^ detail::kDpSalt, batch_no);
    params_.set_flat_grads(dp_sanitize<float>(per, cfg_.dp.clip, cfg_.dp.sigma, noise));
    return value;
  }

  void set_lr(double lr) { adam_.lr = lr; }

  /// One optimizer step on records `idx`; returns the batch loss.
  double train_batch(const std::vector<std::size_t>& idx, std::uint64_t batch_no) {
    const double value = batch_gradient(idx, batch_no);
    adam_step(params_, adam_);
    return value;
  }

  /// Loss on records `idx` with fixed per-record draws.
  double eval_loss(const std::vector<std::size_t>& idx, std::size_t batch = 64) const {
    require(!idx.empty(), Errc::empty_set, "eval_loss: no records");
    double sum = 0;
    for (const auto& part : detail::batches(idx, batch)) {
      Draws d;
      for (auto i : part) {
        Rng rng = Rng::substream(key_ ^ detail::kValSalt, i);
        append(d, make_draws({i}, rng));
      }
      nn::Graph<float> g(false);
      sum += double(g.value(build_loss(g, part, d))[0]) * double(part.size());
    }
    return sum / double(idx.size());
  }

  ckpt::Checkpoint checkpoint() const {
    ckpt::Checkpoint c;
    c.params = params_;
    c.meta = {{"stage", stage_name(stage_)},
              {"config", cfg_.to_json()},
              {"schedule", sched_.to_json()},
              {"codec", cb_.cfg.to_json()},
              {"N", ds_.N}};
    if (stage_ == Stage::seg) c.meta["seg"] = cfg_.seg.to_json();
    if (stage_ == Stage::gps) c.meta["gps"] = cfg_.gps.to_json();
    return c;
  }

 private:
  struct Draws {
    std::vector<den::Draw<float>> seg;
    std::vector<den::GpsDraw<float>> gps;
  };

  Draws make_draws(const std::vector<std::size_t>& idx, Rng& rng) const {
    Draws d;
    for (auto i : idx) {
      if (stage_ == Stage::seg)
        d.seg.push_back(den::draw_noise<float>(z0_[i].shape(), sched_.T, rng));
      else
        d.gps.push_back(den::draw_gps<float>(Shape{ds_.N, 2}, z0_[i], sched_, rng));
    }
    return d;
  }

  static void append(Draws& a, Draws b) {
    for (auto& x : b.seg) a.seg.push_back(std::move(x));
    for (auto& x : b.gps) a.gps.push_back(std::move(x));
  }

  static Draws slice(const Draws& d, std::size_t k) {
    Draws out;
    if (!d.seg.empty()) out.seg.push_back(d.seg[k]);
    if (!d.gps.empty()) out.gps.push_back(d.gps[k]);
    return out;
  }

  Var build_loss(nn::Graph<float>& g, const std::vector<std::size_t>& idx, const Draws& d) const {
    std::vector<data::Condition> conds;
    std::vector<const Tensor<float>*> zs;
    for (auto i : idx) {
      conds.push_back(ds_.records[i].cond);
      zs.push_back(&z0_[i]);
    }
    const auto cond = den::condition_matrix<float>(conds);
    if (stage_ == Stage::seg) {
      const auto* phy = cfg_.lambda_p > 0 ? &phy_ : nullptr;
      return den::seg_train_loss(g, params_, cfg_.seg, sched_, detail::stack(zs), cond, d.seg, phy).total;
    }
    std::vector<Tensor<float>> xs;
    for (auto i : idx) xs.push_back(detail::gps_tensor(ds_.records[i].gps));
    std::vector<const Tensor<float>*> xp;
    for (const auto& x : xs) xp.push_back(&x);
    return den::gps_train_loss(g, params_, cfg_.gps, sched_, detail::stack(xp), cond, d.gps);
  }

  const data::Dataset& ds_;
  const geo::RoadNetwork& net_;
  const CodecBundle& cb_;
  Stage stage_;
  TrainConfig cfg_;
  const std::vector<Tensor<float>>& z0_;
  diff::NoiseSchedule sched_;
  std::uint64_t key_;
  ParamStore<float> params_;
  AdamConfig adam_;
  den::PhyContext<float> phy_;
};

/// Standardized latents of every record under the frozen codec.
inline std::vector<Tensor<float>> standardized_latents(const CodecBundle& cb, const data::Dataset& ds,
                                                       const geo::RoadNetwork& net) {
  std::vector<std::size_t> all(ds.records.size());
  std::iota(all.begin(), all.end(), std::size_t(0));
  auto raw = encode_records(cb.params, cb.cfg, ds, all, codec::normalized_centers(net));
  for (auto& z : raw) z = codec::standardize(z, cb.stats);
  return raw;
}

inline void check_codec_matches(const CodecBundle& cb, const geo::RoadNetwork& net) {
  require(cb.cfg.vocab == data::vocab_size(net.size()), Errc::incompatible_checkpoint,
          "codec vocabulary does not match the network");
}

/// Trains one denoiser stage on the frozen codec's latents.
inline ckpt::Checkpoint train_stage(const data::Dataset& ds, const geo::RoadNetwork& net,
                                    const ckpt::Checkpoint* codec_ckpt, Stage stage, TrainConfig cfg,
                                    TrainLog* log = nullptr) {
  const auto cb = CodecBundle::from_checkpoint(codec_ckpt);
  cfg.codec = cb.cfg;
  cfg.validate();
  check_codec_matches(cb, net);
  const auto z0 = standardized_latents(cb, ds, net);
  StageTrainer tr(ds, net, cb, stage, cfg, z0);
  const auto train = ds.indices(data::Split::train), val = ds.indices(data::Split::val);
  require(!train.empty(), Errc::empty_set, "no training records");
  TrainLog local;
  TrainLog& lg = log ? *log : local;
  const std::uint64_t total = std::uint64_t(cfg.epochs) * detail::batches(train, cfg.batch).size();
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double sum = 0;
    std::size_t nb = 0;
    for (const auto& part : detail::batches(detail::shuffled(train, tr.key(), epoch), cfg.batch)) {
      tr.set_lr(detail::scheduled_lr(cfg, step, total));
      sum += tr.train_batch(part, step++);
      ++nb;
    }
    lg.add(epoch, "train", sum / double(nb));
    if (!val.empty()) lg.add(epoch, "val", tr.eval_loss(val));
  }
  return tr.checkpoint();
}

/// Both denoisers in one interleaved loop over the same batches (one segment
/// step, then one GPS step). Each stage keeps its own seeds.
inline std::pair<ckpt::Checkpoint, ckpt::Checkpoint> train_joint(const data::Dataset& ds, const geo::RoadNetwork& net,
                                                                 const ckpt::Checkpoint* codec_ckpt,
                                                                 TrainConfig cfg, TrainLog* seg_log = nullptr,
                                                                 TrainLog* gps_log = nullptr) {
  const auto cb = CodecBundle::from_checkpoint(codec_ckpt);
  cfg.codec = cb.cfg;
  cfg.validate();
  check_codec_matches(cb, net);
  const auto z0 = standardized_latents(cb, ds, net);
  StageTrainer seg(ds, net, cb, Stage::seg, cfg, z0), gps(ds, net, cb, Stage::gps, cfg, z0);
  const auto train = ds.indices(data::Split::train), val = ds.indices(data::Split::val);
  require(!train.empty(), Errc::empty_set, "no training records");
  TrainLog l1, l2;
  TrainLog& a = seg_log ? *seg_log : l1;
  TrainLog& b = gps_log ? *gps_log : l2;
  const std::uint64_t total = std::uint64_t(cfg.epochs) * detail::batches(train, cfg.batch).size();
  std::uint64_t step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double s1 = 0, s2 = 0;
    std::size_t nb = 0;
    for (const auto& part : detail::batches(detail::shuffled(train, seg.key(), epoch), cfg.batch)) {
      const double lr = detail::scheduled_lr(cfg, step, total);
      seg.set_lr(lr);
      gps.set_lr(lr);
      s1 += seg.train_batch(part, step);
      s2 += gps.train_batch(part, step);
      ++step;
      ++nb;
    }
    a.add(epoch, "train", s1 / double(nb));
    b.add(epoch, "train", s2 / double(nb));
    if (!val.empty()) {
      a.add(epoch, "val", seg.eval_loss(val));
      b.add(epoch, "val", gps.eval_loss(val));
    }
  }
  return {seg.checkpoint(), gps.checkpoint()};
}

}  // namespace cardiff::pipe
