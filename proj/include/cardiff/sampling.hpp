#pragma once

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include "cardiff/train.hpp"

// Cascaded sampling: reverse-denoise the segment latent, decode it with beam
// search, then reverse-denoise the GPS trajectory conditioned on the clean
// latent (no noise augmentation at sampling time).

namespace cardiff::pipe {

/// Codec, segment denoiser and GPS denoiser checked for compatibility.
struct CascadeModels {
  CodecBundle codec;
  ParamStore<float> seg;
  ParamStore<float> gps;
  den::SegDenoiserConfig seg_cfg;
  den::GpsDenoiserConfig gps_cfg;
  diff::NoiseSchedule schedule;

  static CascadeModels from_checkpoints(const ckpt::Checkpoint& ae, const ckpt::Checkpoint& seg,
                                        const ckpt::Checkpoint& gps) {
    CascadeModels m;
    m.codec = CodecBundle::from_checkpoint(&ae);
    auto stage_of = [](const ckpt::Checkpoint& c) { return c.meta.value("stage", std::string()); };
    require(stage_of(seg) == "seg" && seg.meta.contains("seg"), Errc::incompatible_checkpoint,
            "second checkpoint is not a segment-stage checkpoint");
    require(stage_of(gps) == "gps" && gps.meta.contains("gps"), Errc::incompatible_checkpoint,
            "third checkpoint is not a GPS-stage checkpoint");
    seg.require_group("seg.");
    gps.require_group("gps.");
    try {
      m.seg_cfg = den::SegDenoiserConfig::from_json(seg.meta.at("seg"));
      m.gps_cfg = den::GpsDenoiserConfig::from_json(gps.meta.at("gps"));
      m.schedule = diff::schedule_from_json(seg.meta.at("schedule"));
      const auto gs = diff::schedule_from_json(gps.meta.at("schedule"));
      require(gs == m.schedule, Errc::incompatible_checkpoint, "segment and GPS stages use different schedules");
      for (const auto* c : {&seg, &gps})
        require(codec::CodecConfig::from_json(c->meta.at("codec")) == m.codec.cfg, Errc::incompatible_checkpoint,
                "denoiser was trained against a different codec configuration");
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::incompatible_checkpoint, std::string("checkpoint metadata: ") + e.what());
    }
    require(m.seg_cfg.T == m.schedule.T && m.gps_cfg.T == m.schedule.T, Errc::incompatible_checkpoint,
            "denoiser step count differs from the schedule");
    for (const auto& [name, e] : seg.params.entries())
      if (name.rfind("seg.", 0) == 0) m.seg.add(name, e.value);
    for (const auto& [name, e] : gps.params.entries())
      if (name.rfind("gps.", 0) == 0) m.gps.add(name, e.value);
    return m;
  }
};

struct GeneratedTrajectory {
  std::vector<int> segments;  ///< beam-decoded segment ids
  geo::Polyline gps;          ///< meters
  data::Condition cond;
};

struct SampleCounters {
  std::size_t seg_evals = 0;  ///< batched segment-denoiser forward passes
  std::size_t gps_evals = 0;
  std::vector<int> seg_steps;  ///< step index of every segment evaluation
};

struct SampleOptions {
  int interval = 50;
  std::size_t batch = 64;
  std::size_t beam = 4;
  double gps_clip = 1.0;  ///< clamp predicted normalized GPS x0 to [-gps_clip, gps_clip] in strided steps; 0 disables
};

namespace detail {

template <class F>
Tensor<float> reverse_process(std::vector<Tensor<float>>& x, std::vector<Rng>& rngs, const diff::NoiseSchedule& sched,
                              int interval, F&& eps_fn, double clip = 0.0) {
  const auto steps = diff::stride_schedule(sched.T, interval);
  std::vector<const Tensor<float>*> ptr;
  for (std::size_t h = 0; h + 1 < steps.size(); ++h) {
    const int t = steps[h], t_prev = steps[h + 1];
    ptr.clear();
    for (const auto& xi : x) ptr.push_back(&xi);
    const Tensor<float> eps = eps_fn(stack(ptr), t);
    const std::size_t per = x.front().size();
    for (std::size_t i = 0; i < x.size(); ++i) {
      Tensor<float> e(x[i].shape(), std::vector<float>(eps.data() + i * per, eps.data() + (i + 1) * per));
      x[i] = interval == 1 ? diff::ddpm_step(x[i], e, t, sched, rngs[i])
                           : diff::strided_deterministic_step(x[i], e, t, t_prev, sched, clip);
    }
  }
  ptr.clear();
  for (const auto& xi : x) ptr.push_back(&xi);
  return stack(ptr);
}

}  // namespace detail

/// Generates one trajectory per condition. Sample i draws all of its noise
/// from Rng::substream(seed, i), so outputs do not depend on batching.
inline std::vector<GeneratedTrajectory> sample_cascaded(const CascadeModels& m, const std::vector<data::Condition>& conds,
                                                        const geo::BBox& bbox, std::uint64_t seed,
                                                        const SampleOptions& opt = {},
                                                        SampleCounters* counters = nullptr) {
  diff::stride_schedule(m.schedule.T, opt.interval);
  require(opt.batch >= 1 && opt.beam >= 1, Errc::invalid_argument, "sampling batch and beam width must be positive");
  const auto& cc = m.codec.cfg;
  const std::size_t Lz = cc.latent_len, Dz = cc.latent_dim, N = m.gps_cfg.length;
  std::vector<GeneratedTrajectory> out;
  out.reserve(conds.size());
  for (std::size_t b0 = 0; b0 < conds.size(); b0 += opt.batch) {
    const std::size_t b1 = std::min(conds.size(), b0 + opt.batch), B = b1 - b0;
    const std::vector<data::Condition> part(conds.begin() + std::ptrdiff_t(b0), conds.begin() + std::ptrdiff_t(b1));
    const auto cond = den::condition_matrix<float>(part);
    std::vector<Rng> rngs;
    std::vector<Tensor<float>> z;
    for (std::size_t i = b0; i < b1; ++i) {
      rngs.push_back(Rng::substream(seed, i));
      z.push_back(diff::randn<float>(Shape{Lz, Dz}, rngs.back()));
    }
    const Tensor<float> z0 = detail::reverse_process(z, rngs, m.schedule, opt.interval, [&](const Tensor<float>& zt, int t) {
      nn::Graph<float> g(false);
      if (counters) ++counters->seg_evals, counters->seg_steps.push_back(t);
      return g.value(den::seg_eps_forward(g, m.seg, m.seg_cfg, g.constant(zt), std::vector<int>(B, t), cond));
    });
    const auto hyps = codec::beam_decode(m.codec.params, cc, codec::destandardize(z0, m.codec.stats), B, opt.beam);
    std::vector<Tensor<float>> x;
    for (auto& r : rngs) x.push_back(diff::randn<float>(Shape{N, 2}, r));
    const std::vector<int> aug(B, 0);
    const Tensor<float> x0 = detail::reverse_process(x, rngs, m.schedule, opt.interval, [&](const Tensor<float>& xt, int t) {
      nn::Graph<float> g(false);
      if (counters) ++counters->gps_evals;
      return g.value(den::gps_eps_forward(g, m.gps, m.gps_cfg, g.constant(xt), std::vector<int>(B, t), cond,
                                          g.constant(z0), aug));
    }, opt.gps_clip);
    for (std::size_t i = 0; i < B; ++i) {
      GeneratedTrajectory tr;
      tr.segments = codec::hypothesis_segments(hyps[i]);
      tr.cond = part[i];
      tr.gps.resize(N);
      for (std::size_t k = 0; k < N; ++k)
        tr.gps[k] = data::denormalize_point({double(x0(i * N + k, 0)), double(x0(i * N + k, 1))}, bbox);
      out.push_back(std::move(tr));
    }
  }
  return out;
}

/// n conditions drawn uniformly from the training records.
inline std::vector<data::Condition> auto_conditions(const data::Dataset& ds, std::size_t n, std::uint64_t seed) {
  const auto train = ds.indices(data::Split::train);
  require(!train.empty(), Errc::empty_set, "auto conditions need training records");
  Rng rng = Rng::substream(seed, 0xC0D1ULL);
  std::vector<data::Condition> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(ds.records[train[std::size_t(rng.uniform_int(0, int(train.size()) - 1))]].cond);
  return out;
}

// ---------------------------------------------------------------------------
// Sample files

inline nlohmann::json samples_json(const std::vector<GeneratedTrajectory>& v, const geo::BBox& bbox) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& t : v) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : t.gps) pts.push_back({p.x, p.y});
    arr.push_back({{"segments", t.segments}, {"gps", pts}, {"cond", data::condition_json(t.cond)}});
  }
  return {{"format", "cardiff-samples"},
          {"version", 1},
          {"bbox", {bbox.min_x, bbox.min_y, bbox.max_x, bbox.max_y}},
          {"samples", arr}};
}

inline std::vector<GeneratedTrajectory> samples_from_json(const nlohmann::json& j) {
  std::vector<GeneratedTrajectory> out;
  try {
    require(j.value("format", std::string()) == "cardiff-samples", Errc::parse, "not a samples file");
    const auto& arr = j.at("samples");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      GeneratedTrajectory t;
      t.segments = arr[i].at("segments").get<std::vector<int>>();
      for (const auto& p : arr[i].at("gps")) t.gps.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      t.cond = data::condition_from_json(arr[i].at("cond"), "samples[" + std::to_string(i) + "].cond");
      out.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse, std::string("samples file: ") + e.what());
  }
  return out;
}

inline void save_samples(const std::vector<GeneratedTrajectory>& v, const geo::BBox& bbox, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  require(bool(f), Errc::io, "cannot open " + path + " for writing");
  f << samples_json(v, bbox).dump() << '\n';
  require(bool(f), Errc::io, "write failed for " + path);
}

inline std::vector<GeneratedTrajectory> load_samples(const std::string& path) {
  std::ifstream f(path);
  require(bool(f), Errc::io, "cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse, path + ": " + e.what());
  }
  return samples_from_json(j);
}

}  // namespace cardiff::pipe
