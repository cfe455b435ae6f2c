#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "cardiff/datagen.hpp"
#include "cardiff/layers.hpp"

// Trajectory autoencoder: a Transformer encoder over segment tokens, a
// cross-attention compressor onto a fixed set of latent vectors, a
// decompressor back to L_max query slots and an autoregressive decoder.

namespace cardiff::codec {

using nn::Graph;
using nn::Var;

struct CodecConfig {
  std::size_t vocab = 363;
  std::size_t max_len = 48;
  std::size_t d_model = 64;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t heads = 4;
  std::size_t latent_len = 8;
  std::size_t latent_dim = 32;
  std::size_t ff_mult = 4;

  std::size_t latent_size() const { return latent_len * latent_dim; }

  void validate() const {
    require(vocab > std::size_t(data::TOKEN_OFFSET), Errc::invalid_argument, "codec vocab too small");
    require(max_len >= 3, Errc::invalid_argument, "codec max_len must be >= 3");
    require(latent_len >= 1 && latent_len <= max_len, Errc::invalid_argument, "codec needs 1 <= L_z <= L_max");
    require(heads >= 1 && d_model % heads == 0, Errc::invalid_argument, "d_model must be divisible by heads");
    require(latent_dim >= 1 && ff_mult >= 1, Errc::invalid_argument, "codec dims must be positive");
  }

  nlohmann::json to_json() const {
    return {{"vocab", vocab},           {"max_len", max_len},       {"d_model", d_model},
            {"enc_layers", enc_layers}, {"dec_layers", dec_layers}, {"heads", heads},
            {"latent_len", latent_len}, {"latent_dim", latent_dim}, {"ff_mult", ff_mult}};
  }
  static CodecConfig from_json(const nlohmann::json& j) {
    CodecConfig c;
    c.vocab = j.value("vocab", c.vocab);
    c.max_len = j.value("max_len", c.max_len);
    c.d_model = j.value("d_model", c.d_model);
    c.enc_layers = j.value("enc_layers", c.enc_layers);
    c.dec_layers = j.value("dec_layers", c.dec_layers);
    c.heads = j.value("heads", c.heads);
    c.latent_len = j.value("latent_len", c.latent_len);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.ff_mult = j.value("ff_mult", c.ff_mult);
    c.validate();
    return c;
  }
  friend bool operator==(const CodecConfig&, const CodecConfig&) = default;
};

inline std::string layer_name(const std::string& base, std::size_t i) { return base + std::to_string(i); }

template <class T>
void init_codec(ParamStore<T>& s, const CodecConfig& c, Rng& rng) {
  c.validate();
  const std::size_t d = c.d_model, ff = c.ff_mult * c.d_model;
  const double emb = 0.1;
  init_normal(s, "ae.enc.tok", {c.vocab, d}, emb, rng);
  init_normal(s, "ae.enc.pos", {c.max_len, d}, emb, rng);
  init_linear(s, "ae.enc.coord", 2, d, rng);
  for (std::size_t i = 0; i < c.enc_layers; ++i) {
    const auto n = layer_name("ae.enc.l", i);
    nn::init_mha(s, n + ".attn", d, d, d, d, rng);
    nn::init_mlp(s, n + ".ff", d, ff, d, rng);
  }
  init_normal(s, "ae.comp.z0", {c.latent_len, c.latent_dim}, 1.0, rng);
  nn::init_mha(s, "ae.comp.attn", c.latent_dim, d, d, c.latent_dim, rng);
  init_normal(s, "ae.decomp.query", {c.max_len, d}, emb, rng);
  nn::init_mha(s, "ae.decomp.attn", d, c.latent_dim, d, d, rng);
  nn::init_mlp(s, "ae.decomp.ff", d, ff, d, rng);
  init_normal(s, "ae.dec.tok", {c.vocab, d}, emb, rng);
  init_normal(s, "ae.dec.pos", {c.max_len, d}, emb, rng);
  for (std::size_t i = 0; i < c.dec_layers; ++i) {
    const auto n = layer_name("ae.dec.l", i);
    nn::init_mha(s, n + ".self", d, d, d, d, rng);
    nn::init_mha(s, n + ".cross", d, d, d, d, rng);
    nn::init_mlp(s, n + ".ff", d, ff, d, rng);
  }
  init_linear(s, "ae.dec.head", d, c.vocab, rng);
}

/// Token batch padded to the longest member. centers holds the normalized
/// segment center of every token (zeros for specials).
template <class T>
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> tokens;             ///< [batch * len]
  Tensor<T> centers;                   ///< [batch * len, 2]
  std::vector<std::uint8_t> key_mask;  ///< 1 for non-PAD tokens
};

/// Normalized center of every segment of a network.
inline std::vector<geo::Point> normalized_centers(const geo::RoadNetwork& net) {
  std::vector<geo::Point> out;
  for (const auto& s : net.segments()) out.push_back(data::normalize_point(s.center, net.bbox()));
  return out;
}

template <class T>
TokenBatch<T> make_token_batch(const std::vector<std::vector<int>>& seqs, const std::vector<geo::Point>& centers,
                               const CodecConfig& c) {
  require(!seqs.empty(), Errc::empty_batch, "codec batch is empty");
  TokenBatch<T> b;
  b.batch = seqs.size();
  for (const auto& s : seqs) {
    require(s.size() + 2 <= c.max_len, Errc::overlength,
            "sequence of " + std::to_string(s.size()) + " segments exceeds " + std::to_string(c.max_len) + " tokens");
    b.len = std::max(b.len, s.size() + 2);
  }
  b.tokens.assign(b.batch * b.len, data::PAD);
  b.centers = Tensor<T>::zeros(b.batch * b.len, 2);
  b.key_mask.assign(b.batch * b.len, 0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const auto tok = data::to_tokens(seqs[i], b.len);
    for (std::size_t p = 0; p < b.len; ++p) {
      const int t = tok[p];
      require(t < int(c.vocab), Errc::unknown_segment, "segment id outside codec vocabulary");
      b.tokens[i * b.len + p] = t;
      b.key_mask[i * b.len + p] = t != data::PAD;
      if (t >= data::TOKEN_OFFSET) {
        const auto& q = centers.at(std::size_t(t - data::TOKEN_OFFSET));
        b.centers(i * b.len + p, 0) = T(q.x);
        b.centers(i * b.len + p, 1) = T(q.y);
      }
    }
  }
  return b;
}

namespace detail {

inline std::vector<int> tiled_ids(std::size_t n, std::size_t batch) {
  std::vector<int> ids(n * batch);
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = int(i % n);
  return ids;
}

template <class T>
Var positions(Graph<T>& g, const ParamStore<T>& s, const std::string& name, std::size_t len) {
  return nn::slice_rows(g, g.param(s, name), 0, len);
}

}  // namespace detail

/// Raw latent Z [batch * L_z, d_z].
template <class T>
Var encode_to_latent(Graph<T>& g, const ParamStore<T>& s, const CodecConfig& c, const TokenBatch<T>& b) {
  require(b.len <= c.max_len, Errc::overlength, "token batch longer than L_max");
  Var x = nn::gather_rows(g, g.param(s, "ae.enc.tok"), b.tokens);
  x = nn::add_tiled(g, x, detail::positions(g, s, "ae.enc.pos", b.len));
  nn::AttentionSpec self{b.batch, c.heads, false, b.key_mask};
  for (std::size_t i = 0; i < c.enc_layers; ++i) {
    const auto n = layer_name("ae.enc.l", i);
    Var a = nn::layer_norm(g, x);
    x = nn::add(g, x, nn::multihead_attention(g, s, n + ".attn", a, a, self));
    x = nn::add(g, x, nn::mlp_gelu(g, s, n + ".ff", nn::layer_norm(g, x)));
  }
  Var h = nn::add(g, nn::layer_norm(g, x), nn::linear(g, s, "ae.enc.coord", g.constant(b.centers)));
  Var z0 = nn::gather_rows(g, g.param(s, "ae.comp.z0"), detail::tiled_ids(c.latent_len, b.batch));
  return nn::add(g, z0, nn::multihead_attention(g, s, "ae.comp.attn", z0, h, {b.batch, c.heads, false, b.key_mask}));
}

/// H-hat [batch * L_max, d_model] from raw latents.
template <class T>
Var decompress(Graph<T>& g, const ParamStore<T>& s, const CodecConfig& c, Var z, std::size_t batch) {
  require(g.value(z).rows() == batch * c.latent_len && g.value(z).cols() == c.latent_dim, Errc::shape_mismatch,
          "decompress: latent shape " + shape_str(g.value(z).shape()));
  Var q = nn::gather_rows(g, g.param(s, "ae.decomp.query"), detail::tiled_ids(c.max_len, batch));
  Var h = nn::add(g, q, nn::multihead_attention(g, s, "ae.decomp.attn", q, z, {batch, c.heads}));
  return nn::add(g, h, nn::mlp_gelu(g, s, "ae.decomp.ff", nn::layer_norm(g, h)));
}

/// Teacher-forced logits. `inputs` holds batch rows of equal length starting
/// with BOS; row p of the output scores the token at position p + 1.
template <class T>
Var decode_logits(Graph<T>& g, const ParamStore<T>& s, const CodecConfig& c, Var z, std::size_t batch,
                  const std::vector<int>& inputs) {
  require(batch > 0 && inputs.size() % batch == 0, Errc::shape_mismatch, "decode_logits: input grouping");
  const std::size_t L = inputs.size() / batch;
  require(L >= 1 && L <= c.max_len, Errc::overlength, "decoder input longer than L_max");
  for (std::size_t i = 0; i < batch; ++i)
    require(inputs[i * L] == data::BOS, Errc::invalid_argument, "teacher tokens must begin with BOS");
  Var hh = decompress(g, s, c, z, batch);
  Var x = nn::gather_rows(g, g.param(s, "ae.dec.tok"), inputs);
  x = nn::add_tiled(g, x, detail::positions(g, s, "ae.dec.pos", L));
  for (std::size_t i = 0; i < c.dec_layers; ++i) {
    const auto n = layer_name("ae.dec.l", i);
    Var a = nn::layer_norm(g, x);
    x = nn::add(g, x, nn::multihead_attention(g, s, n + ".self", a, a, {batch, c.heads, true}));
    x = nn::add(g, x, nn::multihead_attention(g, s, n + ".cross", nn::layer_norm(g, x), hh, {batch, c.heads}));
    x = nn::add(g, x, nn::mlp_gelu(g, s, n + ".ff", nn::layer_norm(g, x)));
  }
  return nn::linear(g, s, "ae.dec.head", nn::layer_norm(g, x));
}

/// Decoder inputs (all but the last position) and targets (all but BOS).
struct TeacherTokens {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<std::uint8_t> use;  ///< target != PAD
};

inline TeacherTokens teacher_tokens(const std::vector<int>& tokens, std::size_t batch) {
  const std::size_t L = tokens.size() / batch;
  TeacherTokens t;
  for (std::size_t i = 0; i < batch; ++i)
    for (std::size_t p = 0; p + 1 < L; ++p) {
      t.inputs.push_back(tokens[i * L + p]);
      t.targets.push_back(tokens[i * L + p + 1]);
      t.use.push_back(tokens[i * L + p + 1] != data::PAD);
    }
  return t;
}

/// Mean negative log-likelihood over non-PAD targets.
template <class T>
Var recon_loss(Graph<T>& g, Var logits, const TeacherTokens& t) {
  return nn::cross_entropy(g, logits, t.targets, t.use);
}

/// Encode, decode with teacher forcing and score.
template <class T>
Var autoencoder_loss(Graph<T>& g, const ParamStore<T>& s, const CodecConfig& c, const TokenBatch<T>& b) {
  Var z = encode_to_latent(g, s, c, b);
  const auto t = teacher_tokens(b.tokens, b.batch);
  return recon_loss(g, decode_logits(g, s, c, z, b.batch, t.inputs), t);
}

struct TokenAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double rate() const { return total ? double(correct) / double(total) : 0.0; }
};

/// Teacher-forced argmax accuracy over non-PAD targets.
template <class T>
TokenAccuracy token_accuracy(const Tensor<T>& logits, const TeacherTokens& t) {
  TokenAccuracy a;
  const std::size_t V = logits.cols();
  for (std::size_t r = 0; r < t.targets.size(); ++r) {
    if (!t.use[r]) continue;
    const T* row = logits.data() + r * V;
    a.correct += int(std::max_element(row, row + V) - row) == t.targets[r];
    ++a.total;
  }
  return a;
}

// -- search ------------------------------------------------------------------

struct Hypothesis {
  std::vector<int> tokens;  ///< generated tokens (BOS excluded, EOS included if finished)
  double sum_logp = 0;
  bool finished = false;
  double score() const { return tokens.empty() ? -std::numeric_limits<double>::infinity() : sum_logp / double(tokens.size()); }
};

struct SearchConfig {
  std::size_t max_len = 47;  ///< generated tokens, EOS included
  int eos = data::EOS;
  std::vector<int> banned{data::PAD, data::BOS};
  std::size_t min_len = 1;  ///< EOS is disallowed before this many tokens
};

namespace detail {

template <class T>
std::vector<double> masked_log_softmax(const std::vector<T>& logits, const SearchConfig& sc, std::size_t generated) {
  std::vector<double> lp(logits.begin(), logits.end());
  for (int b : sc.banned)
    if (b >= 0 && std::size_t(b) < lp.size()) lp[std::size_t(b)] = -std::numeric_limits<double>::infinity();
  if (generated < sc.min_len) lp[std::size_t(sc.eos)] = -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(lp.begin(), lp.end());
  double z = 0;
  for (double v : lp) z += std::exp(v - m);
  const double lz = m + std::log(z);
  for (auto& v : lp) v -= lz;
  return lp;
}

}  // namespace detail

/// Argmax decoding. advance(state, token) feeds a token and returns the
/// next-token logits.
template <class State, class Advance>
Hypothesis greedy_search(State state, int bos, Advance&& advance, const SearchConfig& sc) {
  Hypothesis h;
  auto lp = detail::masked_log_softmax(advance(state, bos), sc, 0);
  while (h.tokens.size() < sc.max_len) {
    const int tok = int(std::max_element(lp.begin(), lp.end()) - lp.begin());
    h.tokens.push_back(tok);
    h.sum_logp += lp[std::size_t(tok)];
    if (tok == sc.eos) {
      h.finished = true;
      break;
    }
    if (h.tokens.size() == sc.max_len) break;
    lp = detail::masked_log_softmax(advance(state, tok), sc, h.tokens.size());
  }
  return h;
}

/// Length-normalized beam search (score = mean token log-probability). The
/// greedy hypothesis competes in the final ranking, so the result never
/// scores below it; width 1 is exactly greedy decoding.
template <class State, class Advance>
Hypothesis beam_search(const State& init, int bos, Advance&& advance, std::size_t width, const SearchConfig& sc) {
  require(width >= 1, Errc::invalid_argument, "beam width must be >= 1");
  Hypothesis greedy = greedy_search(init, bos, advance, sc);
  if (width == 1) return greedy;

  struct Beam {
    State state;
    Hypothesis hyp;
    std::vector<double> lp;
  };
  std::vector<Beam> beams;
  {
    State st = init;
    auto lp = detail::masked_log_softmax(advance(st, bos), sc, 0);
    beams.push_back({std::move(st), {}, std::move(lp)});
  }
  std::vector<Hypothesis> done;
  std::size_t beam_finished = 0;
  while (!beams.empty() && beam_finished < width) {
    struct Cand {
      double sum;
      std::size_t beam;
      int tok;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < beams.size(); ++b)
      for (std::size_t v = 0; v < beams[b].lp.size(); ++v)
        if (std::isfinite(beams[b].lp[v])) cands.push_back({beams[b].hyp.sum_logp + beams[b].lp[v], b, int(v)});
    const std::size_t keep = std::min(cands.size(), 2 * width);
    std::partial_sort(cands.begin(), cands.begin() + std::ptrdiff_t(keep), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.sum != b.sum) return a.sum > b.sum;
      if (a.beam != b.beam) return a.beam < b.beam;
      return a.tok < b.tok;
    });
    std::vector<Beam> next;
    for (std::size_t k = 0; k < keep && next.size() < width; ++k) {
      const auto& cd = cands[k];
      Hypothesis h = beams[cd.beam].hyp;
      h.tokens.push_back(cd.tok);
      h.sum_logp = cd.sum;
      if (cd.tok == sc.eos) {
        h.finished = true;
        done.push_back(std::move(h));
        ++beam_finished;
        continue;
      }
      if (h.tokens.size() >= sc.max_len) {
        done.push_back(std::move(h));
        ++beam_finished;
        continue;
      }
      State st = beams[cd.beam].state;
      auto lp = detail::masked_log_softmax(advance(st, cd.tok), sc, h.tokens.size());
      next.push_back({std::move(st), std::move(h), std::move(lp)});
    }
    beams = std::move(next);
  }
  done.push_back(std::move(greedy));
  std::size_t best = 0;
  for (std::size_t i = 1; i < done.size(); ++i)
    if (done[i].score() > done[best].score()) best = i;
  return done[best];
}

// -- incremental decoder -----------------------------------------------------

/// Key/value caches of one partial hypothesis.
template <class T>
struct DecoderState {
  std::size_t pos = 0;
  std::vector<std::vector<T>> self_k, self_v;  ///< per layer, pos rows of d_model
  const std::vector<MatR<T>>* cross_k = nullptr;
  const std::vector<MatR<T>>* cross_v = nullptr;
};

/// Token-by-token decoder equivalent to decode_logits, without a graph.
template <class T>
class IncrementalDecoder {
 public:
  IncrementalDecoder(const ParamStore<T>& s, const CodecConfig& c) : s_(s), c_(c) {}

  /// Cross-attention keys/values of every decoder layer for one latent.
  struct Context {
    std::vector<MatR<T>> k, v;
  };

  /// Contexts for a batch of raw latents [batch * L_z, d_z].
  std::vector<Context> contexts(const Tensor<T>& z, std::size_t batch) const {
    Graph<T> g(false);
    Var hh = decompress(g, s_, c_, g.constant(z), batch);
    const auto& H = g.value(hh);
    const std::size_t L = c_.max_len, d = c_.d_model;
    std::vector<Context> out(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      CMapR<T> Hb(H.data() + b * L * d, Eigen::Index(L), Eigen::Index(d));
      for (std::size_t l = 0; l < c_.dec_layers; ++l) {
        const auto n = layer_name("ae.dec.l", l) + ".cross";
        out[b].k.push_back(affine_rows(Hb, n + ".k"));
        out[b].v.push_back(affine_rows(Hb, n + ".v"));
      }
    }
    return out;
  }

  DecoderState<T> start(const Context& ctx) const {
    DecoderState<T> st;
    st.self_k.assign(c_.dec_layers, {});
    st.self_v.assign(c_.dec_layers, {});
    st.cross_k = &ctx.k;
    st.cross_v = &ctx.v;
    return st;
  }

  /// Feeds `token` at the next position and returns next-token logits.
  std::vector<T> advance(DecoderState<T>& st, int token) const {
    require(st.pos < c_.max_len, Errc::overlength, "decoder exceeded L_max");
    const std::size_t d = c_.d_model;
    using Row = Eigen::Matrix<T, 1, Eigen::Dynamic>;
    Row h = mat(s_.value("ae.dec.tok")).row(token) + mat(s_.value("ae.dec.pos")).row(Eigen::Index(st.pos));
    for (std::size_t l = 0; l < c_.dec_layers; ++l) {
      const auto n = layer_name("ae.dec.l", l);
      Row a = ln(h);
      Row q = affine_rows(a, n + ".self.q");
      Row k = affine_rows(a, n + ".self.k");
      Row v = affine_rows(a, n + ".self.v");
      st.self_k[l].insert(st.self_k[l].end(), k.data(), k.data() + d);
      st.self_v[l].insert(st.self_v[l].end(), v.data(), v.data() + d);
      CMapR<T> K(st.self_k[l].data(), Eigen::Index(st.pos + 1), Eigen::Index(d));
      CMapR<T> V(st.self_v[l].data(), Eigen::Index(st.pos + 1), Eigen::Index(d));
      h += affine_rows(attend(q, K, V), n + ".self.o");
      a = ln(h);
      q = affine_rows(a, n + ".cross.q");
      h += affine_rows(attend(q, (*st.cross_k)[l], (*st.cross_v)[l]), n + ".cross.o");
      a = ln(h);
      Row f = affine_rows(a, n + ".ff.fc1");
      for (Eigen::Index i = 0; i < f.size(); ++i) f[i] = gelu(f[i]);
      h += affine_rows(f, n + ".ff.fc2");
    }
    Row logits = affine_rows(ln(h), "ae.dec.head");
    ++st.pos;
    return std::vector<T>(logits.data(), logits.data() + logits.size());
  }

 private:
  template <class M>
  MatR<T> affine_rows(const M& x, const std::string& name) const {
    MatR<T> y = x * mat(s_.value(name + ".w"));
    y.rowwise() += mat(s_.value(name + ".b")).row(0);
    return y;
  }

  template <class M>
  static Eigen::Matrix<T, 1, Eigen::Dynamic> ln(const M& h) {
    Tensor<T> t = Tensor<T>::zeros(1, std::size_t(h.size()));
    std::copy_n(h.data(), h.size(), t.data());
    Tensor<T> y = nn::layer_norm_value(t, T(1e-5));
    return mat(y).row(0);
  }

  static T gelu(T v) {
    constexpr double kA = 0.7978845608028654, kB = 0.044715;
    return T(0.5) * v * (T(1) + std::tanh(T(kA) * (v + T(kB) * v * v * v)));
  }

  template <class Q, class K, class V>
  Eigen::Matrix<T, 1, Eigen::Dynamic> attend(const Q& q, const K& k, const V& v) const {
    const std::size_t d = c_.d_model, H = c_.heads, dh = d / H;
    const T sc = T(1.0 / std::sqrt(double(dh)));
    Eigen::Matrix<T, 1, Eigen::Dynamic> out(1, Eigen::Index(d));
    Buffer<T> p(std::size_t(k.rows()));
    for (std::size_t h = 0; h < H; ++h) {
      const auto qh = q.middleCols(Eigen::Index(h * dh), Eigen::Index(dh));
      const auto kh = k.middleCols(Eigen::Index(h * dh), Eigen::Index(dh));
      const auto vh = v.middleCols(Eigen::Index(h * dh), Eigen::Index(dh));
      Eigen::Matrix<T, 1, Eigen::Dynamic> s = (qh * kh.transpose()) * sc;
      std::copy_n(s.data(), s.size(), p.data());
      nn::softmax_row_inplace(p.data(), p.size());
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> pm(p.data(), Eigen::Index(p.size()));
      out.middleCols(Eigen::Index(h * dh), Eigen::Index(dh)) = pm * vh;
    }
    return out;
  }

  const ParamStore<T>& s_;
  const CodecConfig& c_;
};

/// Greedy (width 1) or beam decoding of every latent in a raw batch.
template <class T>
std::vector<Hypothesis> beam_decode(const ParamStore<T>& s, const CodecConfig& c, const Tensor<T>& z,
                                    std::size_t batch, std::size_t width = 4, std::size_t max_len = 0) {
  SearchConfig sc;
  sc.max_len = max_len ? std::min(max_len, c.max_len - 1) : c.max_len - 1;
  IncrementalDecoder<T> dec(s, c);
  auto ctx = dec.contexts(z, batch);
  std::vector<Hypothesis> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    auto advance = [&dec](DecoderState<T>& st, int tok) { return dec.advance(st, tok); };
    out.push_back(beam_search(dec.start(ctx[b]), data::BOS, advance, width, sc));
  }
  return out;
}

template <class T>
std::vector<Hypothesis> greedy_decode(const ParamStore<T>& s, const CodecConfig& c, const Tensor<T>& z,
                                      std::size_t batch, std::size_t max_len = 0) {
  return beam_decode(s, c, z, batch, 1, max_len);
}

/// Segment ids of a decoded hypothesis (tokens up to EOS; specials dropped).
inline std::vector<int> hypothesis_segments(const Hypothesis& h) { return data::from_tokens(h.tokens); }

// -- latent standardisation --------------------------------------------------

/// Per-coordinate mean and population std over flattened training latents.
struct LatentStats {
  std::vector<double> mu;
  std::vector<double> sigma;
  friend bool operator==(const LatentStats&, const LatentStats&) = default;
};

/// latents: n rows of equal length.
inline LatentStats fit_latent_stats(const std::vector<std::vector<double>>& latents) {
  require(latents.size() >= 2, Errc::invalid_argument, "latent statistics need at least two latents");
  const std::size_t D = latents.front().size();
  LatentStats st;
  st.mu.assign(D, 0.0);
  st.sigma.assign(D, 0.0);
  for (const auto& z : latents) {
    require(z.size() == D, Errc::shape_mismatch, "latent length mismatch");
    for (std::size_t i = 0; i < D; ++i) st.mu[i] += z[i];
  }
  for (auto& m : st.mu) m /= double(latents.size());
  for (const auto& z : latents)
    for (std::size_t i = 0; i < D; ++i) st.sigma[i] += (z[i] - st.mu[i]) * (z[i] - st.mu[i]);
  for (std::size_t i = 0; i < D; ++i) {
    st.sigma[i] = std::sqrt(st.sigma[i] / double(latents.size()));
    require(st.sigma[i] >= 1e-6, Errc::degenerate_dimension,
            "latent coordinate " + std::to_string(i) + " has std " + std::to_string(st.sigma[i]));
  }
  return st;
}

/// Rows of a [n * L_z, d_z] latent batch flattened per sample.
template <class T>
std::vector<std::vector<double>> split_latents(const Tensor<T>& z, std::size_t batch) {
  const std::size_t per = z.size() / batch;
  std::vector<std::vector<double>> out(batch);
  for (std::size_t b = 0; b < batch; ++b) out[b].assign(z.data() + b * per, z.data() + (b + 1) * per);
  return out;
}

template <class T>
Tensor<T> standardize(const Tensor<T>& z, const LatentStats& st) {
  const std::size_t D = st.mu.size();
  require(D > 0 && z.size() % D == 0, Errc::shape_mismatch, "standardize: latent size");
  Tensor<T> out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = T((double(z[i]) - st.mu[i % D]) / st.sigma[i % D]);
  return out;
}

template <class T>
Tensor<T> destandardize(const Tensor<T>& z, const LatentStats& st) {
  const std::size_t D = st.mu.size();
  require(D > 0 && z.size() % D == 0, Errc::shape_mismatch, "destandardize: latent size");
  Tensor<T> out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = T(double(z[i]) * st.sigma[i % D] + st.mu[i % D]);
  return out;
}

/// Differentiable destandardisation of a [batch * L_z, d_z] latent.
template <class T>
Var destandardize(Graph<T>& g, Var z, const LatentStats& st, const CodecConfig& c) {
  require(st.mu.size() == c.latent_size(), Errc::shape_mismatch, "latent statistics do not match the codec");
  Tensor<T> sig(Shape{c.latent_len, c.latent_dim}), mu(Shape{c.latent_len, c.latent_dim});
  for (std::size_t i = 0; i < c.latent_size(); ++i) {
    sig[i] = T(st.sigma[i]);
    mu[i] = T(st.mu[i]);
  }
  return nn::add_tiled(g, nn::mul_tiled(g, z, g.constant(std::move(sig))), g.constant(std::move(mu)));
}

}  // namespace cardiff::codec
