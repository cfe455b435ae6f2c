#pragma once

#include <cmath>
#include <limits>
#include <string>

#include <json.hpp>

#include "cardiff/denoisers.hpp"

namespace cardiff::pipe {

enum class Stage { ae, seg, gps };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::ae: return "ae";
    case Stage::seg: return "seg";
    case Stage::gps: return "gps";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  if (s == "ae") return Stage::ae;
  if (s == "seg") return Stage::seg;
  if (s == "gps") return Stage::gps;
  throw Error(Errc::invalid_argument, "unknown stage '" + s + "' (expected ae, seg or gps)");
}

/// Differential privacy per stage: stage1 = segment stage, stage2 = GPS stage.
struct DpConfig {
  std::string mode = "none";
  double clip = 1.0;  ///< C; +inf disables clipping
  double sigma = 1.0;

  bool covers(Stage s) const {
    if (s == Stage::seg) return mode == "stage1" || mode == "both";
    if (s == Stage::gps) return mode == "stage2" || mode == "both";
    return false;
  }
  void validate() const {
    require(mode == "none" || mode == "stage1" || mode == "stage2" || mode == "both", Errc::invalid_argument,
            "dp.mode must be none, stage1, stage2 or both");
    require(clip > 0 && sigma >= 0, Errc::invalid_argument, "dp needs clip > 0 and sigma >= 0");
  }
};

struct TrainConfig {
  Stage stage = Stage::ae;
  int epochs = 10;
  std::size_t batch = 64;
  double lr = 1e-3;
  double lambda_p = 0.05;
  int t_phy = 100;
  DpConfig dp;
  std::uint64_t seed = 0;
  int T = 1000;
  double beta_1 = 1e-4;
  double beta_T = 0.02;
  codec::CodecConfig codec;
  den::SegDenoiserConfig seg;
  den::GpsDenoiserConfig gps;
  bool joint = false;  ///< train seg and gps in one interleaved loop
  std::string lr_schedule = "cosine";  ///< "constant" or "cosine" (decays to 0 over all steps)
  double subpath_prob = 0.5;           ///< AE: chance a training sequence is cut to a random sub-path

  diff::NoiseSchedule schedule() const { return diff::linear_schedule(T, beta_1, beta_T); }

  void validate() const {
    require(epochs >= 1 && batch >= 1 && lr > 0, Errc::invalid_argument, "epochs, batch and lr must be positive");
    require(lr_schedule == "constant" || lr_schedule == "cosine", Errc::invalid_argument,
            "lr_schedule must be constant or cosine");
    require(subpath_prob >= 0 && subpath_prob <= 1, Errc::invalid_argument, "subpath_prob must lie in [0, 1]");
    require(lambda_p >= 0 && t_phy >= 0 && t_phy <= T, Errc::invalid_argument, "need lambda_p >= 0 and 0 <= t_phy <= T");
    dp.validate();
    codec.validate();
    seg.validate();
    gps.validate();
    require(seg.latent_len == codec.latent_len && seg.latent_dim == codec.latent_dim &&
                gps.latent_len == codec.latent_len && gps.latent_dim == codec.latent_dim,
            Errc::invalid_argument, "denoiser latent shapes must match the codec");
    require(seg.T == T && gps.T == T, Errc::invalid_argument, "denoiser step count must match the schedule");
  }

  nlohmann::json to_json() const {
    nlohmann::json dpj{{"mode", dp.mode}, {"sigma", dp.sigma}};
    dpj["clip"] = std::isinf(dp.clip) ? nlohmann::json("inf") : nlohmann::json(dp.clip);
    return {{"stage", stage_name(stage)}, {"epochs", epochs},     {"batch", batch},   {"lr", lr},
            {"lambda_p", lambda_p},       {"t_phy", t_phy},       {"dp", dpj},        {"seed", seed},
            {"schedule", schedule().to_json()}, {"codec", codec.to_json()}, {"seg", seg.to_json()},
            {"gps", gps.to_json()},       {"joint", joint},       {"lr_schedule", lr_schedule},
            {"subpath_prob", subpath_prob}};
  }

  /// Missing fields keep their defaults; the denoiser shapes follow the codec
  /// and schedule unless given explicitly.
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
      if (j.contains("stage")) c.stage = parse_stage(j.at("stage").get<std::string>());
      c.epochs = j.value("epochs", c.epochs);
      c.batch = j.value("batch", c.batch);
      c.lr = j.value("lr", c.lr);
      c.lambda_p = j.value("lambda_p", c.lambda_p);
      c.t_phy = j.value("t_phy", c.t_phy);
      c.seed = j.value("seed", c.seed);
      c.joint = j.value("joint", c.joint);
      c.lr_schedule = j.value("lr_schedule", c.lr_schedule);
      c.subpath_prob = j.value("subpath_prob", c.subpath_prob);
      if (j.contains("dp")) {
        const auto& d = j.at("dp");
        c.dp.mode = d.value("mode", c.dp.mode);
        c.dp.sigma = d.value("sigma", c.dp.sigma);
        if (d.contains("clip"))
          c.dp.clip = d.at("clip").is_string() && d.at("clip") == "inf" ? std::numeric_limits<double>::infinity()
                                                                        : d.at("clip").get<double>();
      }
      if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        c.T = s.value("T", c.T);
        c.beta_1 = s.value("beta_1", c.beta_1);
        c.beta_T = s.value("beta_T", c.beta_T);
      }
      if (j.contains("codec")) c.codec = codec::CodecConfig::from_json(j.at("codec"));
      nlohmann::json seg = j.value("seg", nlohmann::json::object());
      nlohmann::json gps = j.value("gps", nlohmann::json::object());
      for (auto* m : {&seg, &gps}) {
        if (!m->contains("latent_len")) (*m)["latent_len"] = c.codec.latent_len;
        if (!m->contains("latent_dim")) (*m)["latent_dim"] = c.codec.latent_dim;
        if (!m->contains("T")) (*m)["T"] = c.T;
      }
      c.seg = den::SegDenoiserConfig::from_json(seg);
      c.gps = den::GpsDenoiserConfig::from_json(gps);
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::parse, std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

}  // namespace cardiff::pipe
