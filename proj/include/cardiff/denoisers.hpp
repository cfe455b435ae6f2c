#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "cardiff/codec.hpp"
#include "cardiff/diffusion.hpp"

// Noise predictors of the two stages and their training losses.
//   segment stage: DiT over the standardized latent, adaLN-Zero conditioning
//   GPS stage:     1-D U-Net over [N, 2] coordinates, cross-attending to the latent

namespace cardiff::den {

using nn::Graph;
using nn::Var;

inline constexpr std::size_t kConditionFeatures = 7;

/// [batch, 7] condition feature rows.
template <class T>
Tensor<T> condition_matrix(const std::vector<data::Condition>& conds) {
  Tensor<T> out = Tensor<T>::zeros(conds.size(), kConditionFeatures);
  for (std::size_t i = 0; i < conds.size(); ++i) {
    const auto f = conds[i].features();
    for (std::size_t k = 0; k < kConditionFeatures; ++k) out(i, k) = T(f[k]);
  }
  return out;
}

template <class T>
void init_condition_mlp(ParamStore<T>& s, const std::string& prefix, std::size_t cond_dim, Rng& rng) {
  nn::init_mlp(s, prefix + ".cond", kConditionFeatures, cond_dim, cond_dim, rng);
}

/// Two-layer MLP over the raw condition fields, [batch, cond_dim].
template <class T>
Var condition_embedding(Graph<T>& g, const ParamStore<T>& s, const std::string& prefix, const Tensor<T>& cond) {
  require(cond.cols() == kConditionFeatures, Errc::shape_mismatch, "condition rows must hold 7 features");
  return nn::mlp_silu(g, s, prefix + ".cond", g.constant(cond));
}

template <class T>
void init_time_mlp(ParamStore<T>& s, const std::string& name, std::size_t dim, Rng& rng) {
  nn::init_mlp(s, name, dim, dim, dim, rng);
}

/// Sinusoidal embedding of each step followed by a SiLU MLP, [batch, dim].
template <class T>
Var time_embedding(Graph<T>& g, const ParamStore<T>& s, const std::string& name, const std::vector<int>& steps,
                   std::size_t dim, int t_max) {
  return nn::mlp_silu(g, s, name, g.constant(nn::timestep_embeddings<T>(steps, dim, double(t_max))));
}

// ---------------------------------------------------------------------------
// Segment-level DiT

struct SegDenoiserConfig {
  std::size_t depth = 4;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t latent_len = 8;
  std::size_t latent_dim = 32;
  std::size_t cond_dim = 64;
  std::size_t mlp_ratio = 4;
  int T = 1000;

  void validate() const {
    require(depth >= 1 && hidden >= 1 && heads >= 1 && hidden % heads == 0, Errc::invalid_argument,
            "seg denoiser: hidden must be divisible by heads");
    require(latent_len >= 1 && latent_dim >= 1 && cond_dim >= 2 && cond_dim % 2 == 0 && mlp_ratio >= 1,
            Errc::invalid_argument, "seg denoiser: invalid dimensions (cond_dim must be even)");
  }
  nlohmann::json to_json() const {
    return {{"depth", depth},         {"hidden", hidden},     {"heads", heads},         {"latent_len", latent_len},
            {"latent_dim", latent_dim}, {"cond_dim", cond_dim}, {"mlp_ratio", mlp_ratio}, {"T", T}};
  }
  static SegDenoiserConfig from_json(const nlohmann::json& j) {
    SegDenoiserConfig c;
    c.depth = j.value("depth", c.depth);
    c.hidden = j.value("hidden", c.hidden);
    c.heads = j.value("heads", c.heads);
    c.latent_len = j.value("latent_len", c.latent_len);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.cond_dim = j.value("cond_dim", c.cond_dim);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.T = j.value("T", c.T);
    c.validate();
    return c;
  }
  friend bool operator==(const SegDenoiserConfig&, const SegDenoiserConfig&) = default;
};

template <class T>
void init_seg_denoiser(ParamStore<T>& s, const SegDenoiserConfig& c, Rng& rng) {
  c.validate();
  const std::size_t h = c.hidden;
  init_condition_mlp(s, "seg", c.cond_dim, rng);
  init_time_mlp(s, "seg.temb", c.cond_dim, rng);
  init_linear(s, "seg.in", c.latent_dim, h, rng);
  init_normal(s, "seg.pos", {c.latent_len, h}, 0.02, rng);
  for (std::size_t i = 0; i < c.depth; ++i) {
    const auto n = codec::layer_name("seg.b", i);
    init_const(s, n + ".ada.w", {c.cond_dim, 6 * h});
    init_const(s, n + ".ada.b", {1, 6 * h});
    nn::init_mha(s, n + ".attn", h, h, h, h, rng);
    nn::init_mlp(s, n + ".mlp", h, c.mlp_ratio * h, h, rng);
  }
  init_linear(s, "seg.head", h, c.latent_dim, rng);
}

/// eps-hat for z_t [batch * L_z, d_z]; steps and cond hold one entry per sample.
template <class T>
Var seg_eps_forward(Graph<T>& g, const ParamStore<T>& s, const SegDenoiserConfig& c, Var z_t,
                    const std::vector<int>& steps, const Tensor<T>& cond) {
  const std::size_t B = steps.size(), h = c.hidden;
  const auto& Z = g.value(z_t);
  require(B > 0 && Z.rows() == B * c.latent_len && Z.cols() == c.latent_dim && cond.rows() == B,
          Errc::shape_mismatch, "seg_eps_forward: latent " + shape_str(Z.shape()) + " for batch " + std::to_string(B));
  Var e = nn::silu(g, nn::add(g, time_embedding(g, s, "seg.temb", steps, c.cond_dim, c.T),
                              condition_embedding(g, s, "seg", cond)));
  Var x = nn::add_tiled(g, nn::linear(g, s, "seg.in", z_t), g.param(s, "seg.pos"));
  const T one = T(1);
  for (std::size_t i = 0; i < c.depth; ++i) {
    const auto n = codec::layer_name("seg.b", i);
    Var m = nn::linear(g, s, n + ".ada", e);
    auto chunk = [&](std::size_t k) { return nn::slice_cols(g, m, k * h, (k + 1) * h); };
    Var a = nn::ada_layer_norm(g, x, nn::scale(g, chunk(1), one, one), chunk(0));
    x = nn::add(g, x, nn::mul_grouped(g, nn::multihead_attention(g, s, n + ".attn", a, a, {B, c.heads}), chunk(2)));
    a = nn::ada_layer_norm(g, x, nn::scale(g, chunk(4), one, one), chunk(3));
    x = nn::add(g, x, nn::mul_grouped(g, nn::mlp_gelu(g, s, n + ".mlp", a), chunk(5)));
  }
  return nn::linear(g, s, "seg.head", nn::layer_norm(g, x));
}

// ---------------------------------------------------------------------------
// Physical-validity loss

/// 1 - mean_l sum_{a,b} P[l, a] P[l+1, b] A[a, b] over the rows of a
/// probability matrix whose columns are tokens (segments start at TOKEN_OFFSET).
template <class T>
Var phy_from_probs(Graph<T>& g, Var probs, const std::vector<std::vector<int>>& succ) {
  Var agree = nn::adjacency_agreement(g, probs, &succ, std::size_t(data::TOKEN_OFFSET));
  return nn::scale(g, nn::mean_all(g, agree), T(-1), T(1));
}

/// Per-sample phy loss of raw (destandardized) latents [batch * L_z, d_z].
/// Each sample is greedily decoded without gradient; the decoder is then run
/// teacher-forced on that prefix and the softmax rows that produced the L
/// segment tokens are scored. Samples decoding to fewer than two segments
/// contribute nothing (entry invalid).
template <class T>
std::vector<Var> phy_loss(Graph<T>& g, const ParamStore<T>& codec_params, const codec::CodecConfig& cc, Var z_raw,
                          std::size_t batch, const std::vector<std::vector<int>>& succ) {
  const auto greedy = codec::greedy_decode(codec_params, cc, g.value(z_raw), batch);
  std::vector<std::vector<int>> segs(batch);
  std::size_t len = 1;
  for (std::size_t i = 0; i < batch; ++i) {
    segs[i] = codec::hypothesis_segments(greedy[i]);
    len = std::max(len, segs[i].size() + 1);
  }
  std::vector<int> inputs(batch * len, data::PAD);
  for (std::size_t i = 0; i < batch; ++i) {
    inputs[i * len] = data::BOS;
    for (std::size_t p = 0; p < segs[i].size(); ++p) inputs[i * len + p + 1] = segs[i][p] + data::TOKEN_OFFSET;
  }
  std::vector<Var> out(batch);
  bool any = false;
  for (const auto& s : segs) any = any || s.size() >= 2;
  if (!any) return out;
  Var probs = nn::softmax_rows(g, codec::decode_logits(g, codec_params, cc, z_raw, batch, inputs));
  for (std::size_t i = 0; i < batch; ++i)
    if (segs[i].size() >= 2) out[i] = phy_from_probs(g, nn::slice_rows(g, probs, i * len, i * len + segs[i].size()), succ);
  return out;
}

/// Frozen codec pieces the segment loss needs.
template <class T>
struct PhyContext {
  const ParamStore<T>* codec_params = nullptr;
  const codec::CodecConfig* codec = nullptr;
  const codec::LatentStats* stats = nullptr;
  const std::vector<std::vector<int>>* succ = nullptr;
  double lambda = 0.05;
  int t_phy = 100;
};

/// Noise and step of one training example.
template <class T>
struct Draw {
  int t = 0;
  Tensor<T> eps;
};

template <class T>
Draw<T> draw_noise(const Shape& shape, int T_max, Rng& rng) {
  Draw<T> d;
  d.t = rng.uniform_int(1, T_max);
  d.eps = diff::randn<T>(shape, rng);
  return d;
}

template <class T>
struct SegLoss {
  Var total;
  Var segment;
  double phy_mean = 0;      ///< mean phy over gated samples
  std::size_t phy_count = 0;  ///< samples with t <= t_phy and a decodable length
};

namespace detail {

template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), Errc::empty_batch, "empty batch");
  const std::size_t cols = parts.front().cols();
  std::vector<T> v;
  for (const auto& p : parts) {
    require(p.cols() == cols, Errc::shape_mismatch, "stack_rows: column mismatch");
    v.insert(v.end(), p.values().begin(), p.values().end());
  }
  const std::size_t rows = v.size() / cols;
  return Tensor<T>(Shape{rows, cols}, std::move(v));
}

}  // namespace detail

/// Composes the segment loss from a noise prediction: MSE against eps plus
/// lambda * (1/B) * sum of phy over samples with t <= t_phy, evaluated on the
/// destandardized x0 prediction.
template <class T>
SegLoss<T> seg_loss_from_prediction(Graph<T>& g, Var eps_hat, const Tensor<T>& eps, const Tensor<T>& z_t,
                                    const std::vector<int>& steps, const diff::NoiseSchedule& sched,
                                    const PhyContext<T>* phy) {
  const std::size_t B = steps.size();
  SegLoss<T> out;
  out.segment = nn::mse(g, eps_hat, eps);
  out.total = out.segment;
  if (!phy || phy->lambda == 0) return out;
  std::vector<int> rows, gated_steps;
  const std::size_t L = phy->codec->latent_len, D = z_t.cols();
  for (std::size_t i = 0; i < B; ++i) {
    if (steps[i] > phy->t_phy) continue;
    gated_steps.push_back(steps[i]);
    for (std::size_t r = 0; r < L; ++r) rows.push_back(int(i * L + r));
  }
  if (gated_steps.empty()) return out;
  Tensor<T> zt_g(Shape{rows.size(), D});
  for (std::size_t k = 0; k < rows.size(); ++k)
    std::copy_n(z_t.data() + std::size_t(rows[k]) * D, D, zt_g.data() + k * D);
  Var x0 = diff::predict_x0(g, zt_g, nn::gather_rows(g, eps_hat, rows), gated_steps, sched);
  Var raw = codec::destandardize(g, x0, *phy->stats, *phy->codec);
  Var sum;
  double acc = 0;
  for (Var v : phy_loss(g, *phy->codec_params, *phy->codec, raw, gated_steps.size(), *phy->succ)) {
    if (!v.valid()) continue;
    sum = sum.valid() ? nn::add(g, sum, v) : v;
    acc += double(g.value(v)[0]);
    ++out.phy_count;
  }
  if (!sum.valid()) return out;
  out.phy_mean = acc / double(out.phy_count);
  out.total = nn::add(g, out.segment, nn::scale(g, sum, T(phy->lambda / double(B))));
  return out;
}

/// Segment-stage training loss. z0 stacks draws.size() standardized latents;
/// the codec is frozen inside the graph.
template <class T>
SegLoss<T> seg_train_loss(Graph<T>& g, const ParamStore<T>& s, const SegDenoiserConfig& c,
                          const diff::NoiseSchedule& sched, const Tensor<T>& z0, const Tensor<T>& cond,
                          const std::vector<Draw<T>>& draws, const PhyContext<T>* phy = nullptr) {
  require(!draws.empty(), Errc::empty_batch, "seg_train_loss: empty batch");
  g.freeze_prefix("ae.");
  std::vector<int> steps;
  std::vector<Tensor<T>> eps;
  for (const auto& d : draws) steps.push_back(d.t), eps.push_back(d.eps);
  const Tensor<T> E = detail::stack_rows(eps);
  const Tensor<T> zt = diff::q_sample_batch(z0, steps, E, sched);
  Var eps_hat = seg_eps_forward(g, s, c, g.constant(zt), steps, cond);
  return seg_loss_from_prediction(g, eps_hat, E, zt, steps, sched, phy);
}

// ---------------------------------------------------------------------------
// GPS-level U-Net

struct GpsDenoiserConfig {
  std::vector<std::size_t> channels{32, 32, 64, 64};
  std::size_t heads = 4;
  std::size_t length = 64;
  std::size_t cond_dim = 64;
  std::size_t latent_len = 8;
  std::size_t latent_dim = 32;
  std::size_t groups = 8;
  int T = 1000;

  std::size_t levels() const { return channels.size(); }

  void validate() const {
    require(!channels.empty(), Errc::invalid_argument, "gps denoiser needs at least one level");
    for (std::size_t ch : channels)
      require(ch % groups == 0 && ch % heads == 0, Errc::invalid_argument,
              "gps denoiser channels must be divisible by groups and heads");
    const std::size_t f = std::size_t(1) << (channels.size() - 1);
    require(length > 0 && length % f == 0, Errc::shape_mismatch,
            "sequence length " + std::to_string(length) + " not divisible by " + std::to_string(f));
    require(cond_dim >= 2 && cond_dim % 2 == 0, Errc::invalid_argument, "gps denoiser: cond_dim must be even");
  }
  nlohmann::json to_json() const {
    return {{"channels", channels},     {"heads", heads},           {"length", length},
            {"cond_dim", cond_dim},     {"latent_len", latent_len}, {"latent_dim", latent_dim},
            {"groups", groups},         {"T", T}};
  }
  static GpsDenoiserConfig from_json(const nlohmann::json& j) {
    GpsDenoiserConfig c;
    c.channels = j.value("channels", c.channels);
    c.heads = j.value("heads", c.heads);
    c.length = j.value("length", c.length);
    c.cond_dim = j.value("cond_dim", c.cond_dim);
    c.latent_len = j.value("latent_len", c.latent_len);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.groups = j.value("groups", c.groups);
    c.T = j.value("T", c.T);
    c.validate();
    return c;
  }
  friend bool operator==(const GpsDenoiserConfig&, const GpsDenoiserConfig&) = default;
};

namespace detail {

template <class T>
void init_conv(ParamStore<T>& s, const std::string& name, std::size_t in, std::size_t out, std::size_t k, Rng& rng,
               double gain = 1.0) {
  init_normal(s, name + ".w", {k * in, out}, gain / std::sqrt(double(k * in)), rng);
  init_const(s, name + ".b", {1, out});
}

template <class T>
Var conv(Graph<T>& g, const ParamStore<T>& s, const std::string& name, Var x, std::size_t batch) {
  const std::size_t k = g.value(g.param(s, name + ".w")).rows() / g.value(x).cols();
  return nn::conv1d(g, x, g.param(s, name + ".w"), g.param(s, name + ".b"), {batch, k, 1, k / 2});
}

template <class T>
void init_resblock(ParamStore<T>& s, const std::string& n, std::size_t in, std::size_t out, std::size_t cond, Rng& rng) {
  init_conv(s, n + ".conv1", in, out, 3, rng);
  init_linear(s, n + ".emb", cond, out, rng);
  init_conv(s, n + ".conv2", out, out, 3, rng);
  if (in != out) init_linear(s, n + ".skip", in, out, rng);
}

template <class T>
Var resblock(Graph<T>& g, const ParamStore<T>& s, const std::string& n, Var x, Var emb, std::size_t batch,
             std::size_t groups) {
  Var h = conv(g, s, n + ".conv1", nn::silu(g, nn::group_norm(g, x, batch, groups)), batch);
  h = nn::add_grouped(g, h, nn::linear(g, s, n + ".emb", emb));
  h = conv(g, s, n + ".conv2", nn::silu(g, nn::group_norm(g, h, batch, groups)), batch);
  Var skip = s.contains(n + ".skip.w") ? nn::linear(g, s, n + ".skip", x) : x;
  return nn::add(g, skip, h);
}

template <class T>
void init_transformer(ParamStore<T>& s, const std::string& n, std::size_t ch, std::size_t len, std::size_t zdim,
                      Rng& rng) {
  init_normal(s, n + ".pos", {len, ch}, 0.02, rng);
  nn::init_mha(s, n + ".self", ch, ch, ch, ch, rng);
  nn::init_mha(s, n + ".cross", ch, zdim, ch, ch, rng, /*zero_out=*/true);
  nn::init_mlp(s, n + ".ff", ch, 2 * ch, ch, rng);
}

template <class T>
Var transformer(Graph<T>& g, const ParamStore<T>& s, const std::string& n, Var x, Var z, std::size_t batch,
                std::size_t heads) {
  Var h = nn::add_tiled(g, x, g.param(s, n + ".pos"));
  Var a = nn::layer_norm(g, h);
  h = nn::add(g, h, nn::multihead_attention(g, s, n + ".self", a, a, {batch, heads}));
  h = nn::add(g, h, nn::multihead_attention(g, s, n + ".cross", nn::layer_norm(g, h), z, {batch, heads}));
  return nn::add(g, h, nn::mlp_gelu(g, s, n + ".ff", nn::layer_norm(g, h)));
}

inline std::string level_name(const char* part, std::size_t l) { return std::string("gps.") + part + std::to_string(l); }

}  // namespace detail

template <class T>
void init_gps_denoiser(ParamStore<T>& s, const GpsDenoiserConfig& c, Rng& rng) {
  c.validate();
  const auto& ch = c.channels;
  const std::size_t L = c.levels(), E = c.cond_dim;
  init_condition_mlp(s, "gps", E, rng);
  init_time_mlp(s, "gps.temb", E, rng);
  init_time_mlp(s, "gps.aug_temb", E, rng);
  detail::init_conv(s, "gps.stem", 4, ch[0], 3, rng);
  std::size_t len = c.length, prev = ch[0];
  for (std::size_t l = 0; l < L; ++l) {
    const auto n = detail::level_name("down", l);
    detail::init_resblock(s, n + ".r0", prev, ch[l], E, rng);
    detail::init_resblock(s, n + ".r1", ch[l], ch[l], E, rng);
    detail::init_transformer(s, n + ".st", ch[l], len, c.latent_dim, rng);
    prev = ch[l];
    if (l + 1 < L) {
      detail::init_conv(s, n + ".down", ch[l], ch[l], 3, rng);
      len /= 2;
    }
  }
  detail::init_resblock(s, "gps.mid.r0", prev, prev, E, rng);
  detail::init_transformer(s, "gps.mid.st", prev, len, c.latent_dim, rng);
  detail::init_resblock(s, "gps.mid.r1", prev, prev, E, rng);
  for (std::size_t k = 0; k < L; ++k) {
    const std::size_t l = L - 1 - k;
    const auto n = detail::level_name("up", l);
    detail::init_resblock(s, n + ".r0", prev + ch[l], ch[l], E, rng);
    detail::init_resblock(s, n + ".r1", ch[l], ch[l], E, rng);
    detail::init_transformer(s, n + ".st", ch[l], len, c.latent_dim, rng);
    prev = ch[l];
    if (l > 0) {
      detail::init_conv(s, n + ".up", ch[l], ch[l], 3, rng);
      len *= 2;
    }
  }
  detail::init_conv(s, "gps.head", ch[0], 2, 3, rng);
  init_const(s, "gps.skip.w", {E, 2});
  init_const(s, "gps.skip.b", {1, 2});
}

/// Straight origin-to-destination polyline of every condition row,
/// [batch * n, 2]; fed to the U-Net stem next to x_t.
template <class T>
Tensor<T> od_line(const Tensor<T>& cond, std::size_t n) {
  Tensor<T> out(Shape{cond.rows() * n, 2});
  for (std::size_t i = 0; i < cond.rows(); ++i)
    for (std::size_t k = 0; k < n; ++k) {
      const T u = n > 1 ? T(double(k) / double(n - 1)) : T(0);
      out(i * n + k, 0) = (T(1) - u) * cond(i, 1) + u * cond(i, 3);
      out(i * n + k, 1) = (T(1) - u) * cond(i, 2) + u * cond(i, 4);
    }
  return out;
}

/// eps-hat for x_t [batch * N, 2] given steps t, conditions, the noise-augmented
/// standardized latent z_hat [batch * L_z, d_z] and its augmentation steps.
template <class T>
Var gps_eps_forward(Graph<T>& g, const ParamStore<T>& s, const GpsDenoiserConfig& c, Var x_t,
                    const std::vector<int>& steps, const Tensor<T>& cond, Var z_hat, const std::vector<int>& aug_steps) {
  const std::size_t B = steps.size(), L = c.levels();
  const auto& X = g.value(x_t);
  require(B > 0 && X.cols() == 2 && X.rows() == B * c.length, Errc::shape_mismatch,
          "gps_eps_forward: input " + shape_str(X.shape()) + " for batch " + std::to_string(B) + " of length " +
              std::to_string(c.length));
  require(g.value(z_hat).rows() == B * c.latent_len && g.value(z_hat).cols() == c.latent_dim &&
              aug_steps.size() == B && cond.rows() == B,
          Errc::shape_mismatch, "gps_eps_forward: latent or condition shape");
  Var te = time_embedding(g, s, "gps.temb", steps, c.cond_dim, c.T);
  Var e = nn::add(g, te, condition_embedding(g, s, "gps", cond));
  e = nn::silu(g, nn::add(g, e, time_embedding(g, s, "gps.aug_temb", aug_steps, c.cond_dim, c.T)));
  Var h = detail::conv(g, s, "gps.stem", nn::concat_cols(g, x_t, g.constant(od_line(cond, c.length))), B);
  std::vector<Var> skips;
  for (std::size_t l = 0; l < L; ++l) {
    const auto n = detail::level_name("down", l);
    h = detail::resblock(g, s, n + ".r0", h, e, B, c.groups);
    h = detail::resblock(g, s, n + ".r1", h, e, B, c.groups);
    h = detail::transformer(g, s, n + ".st", h, z_hat, B, c.heads);
    skips.push_back(h);
    if (l + 1 < L) h = nn::downsample_strided(g, detail::conv(g, s, n + ".down", h, B), B, 2);
  }
  h = detail::resblock(g, s, "gps.mid.r0", h, e, B, c.groups);
  h = detail::transformer(g, s, "gps.mid.st", h, z_hat, B, c.heads);
  h = detail::resblock(g, s, "gps.mid.r1", h, e, B, c.groups);
  for (std::size_t k = 0; k < L; ++k) {
    const std::size_t l = L - 1 - k;
    const auto n = detail::level_name("up", l);
    h = detail::resblock(g, s, n + ".r0", nn::concat_cols(g, h, skips[l]), e, B, c.groups);
    h = detail::resblock(g, s, n + ".r1", h, e, B, c.groups);
    h = detail::transformer(g, s, n + ".st", h, z_hat, B, c.heads);
    if (l > 0) h = detail::conv(g, s, n + ".up", nn::upsample_nearest(g, h, B, 2), B);
  }
  h = nn::silu(g, nn::group_norm(g, h, B, c.groups));
  // Learned per-step input skip: at high noise eps-hat is close to a multiple of x_t.
  Var skip = nn::mul_grouped(g, x_t, nn::linear(g, s, "gps.skip", nn::silu(g, te)));
  return nn::add(g, detail::conv(g, s, "gps.head", h, B), skip);
}

/// Per-example draws of the GPS stage: noise/step for x and the latent augmentation.
template <class T>
struct GpsDraw {
  Draw<T> x;
  diff::NoiseAugmented<T> z;
};

template <class T>
GpsDraw<T> draw_gps(const Shape& x_shape, const Tensor<T>& z0, const diff::NoiseSchedule& sched, Rng& rng) {
  GpsDraw<T> d;
  d.x = draw_noise<T>(x_shape, sched.T, rng);
  d.z = diff::noise_augment(z0, sched, rng);
  return d;
}

/// Mean squared noise-prediction error over the batch. x0 stacks the
/// normalized GPS rows of every example.
template <class T>
Var gps_train_loss(Graph<T>& g, const ParamStore<T>& s, const GpsDenoiserConfig& c, const diff::NoiseSchedule& sched,
                   const Tensor<T>& x0, const Tensor<T>& cond, const std::vector<GpsDraw<T>>& draws) {
  require(!draws.empty(), Errc::empty_batch, "gps_train_loss: empty batch");
  std::vector<int> steps, aug;
  std::vector<Tensor<T>> eps, zh;
  for (const auto& d : draws) {
    steps.push_back(d.x.t);
    eps.push_back(d.x.eps);
    aug.push_back(d.z.t_hat);
    zh.push_back(d.z.z_hat);
  }
  const Tensor<T> E = detail::stack_rows(eps);
  const Tensor<T> xt = diff::q_sample_batch(x0, steps, E, sched);
  Var eps_hat = gps_eps_forward(g, s, c, g.constant(xt), steps, cond, g.constant(detail::stack_rows(zh)), aug);
  return nn::mse(g, eps_hat, E);
}

}  // namespace cardiff::den
