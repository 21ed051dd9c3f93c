#pragma once

// Visuomotor policy: per-view conv encoders with spatial-softmax keypoints,
// a proprioception MLP, an MLP fusion into per-timestep embeddings, a
// causally-masked pre-norm transformer over the observation history, and a
// mixture / Gaussian / regression action head. One class owns the parameter
// store; training drives loss_and_grad, rollouts drive encode_frame + act.

#include <json.hpp>

#include <deque>
#include <fstream>
#include <optional>

#include "tampi/dataset_io.hpp"
#include "tampi/nn.hpp"
#include "tampi/world.hpp"

namespace tampi {

enum class HeadKind : uint8_t { gmm = 0, gaussian = 1, mse = 2 };
enum class ActMode : uint8_t { mean = 0, sample = 1 };

inline const char* head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::gmm: return "gmm";
    case HeadKind::gaussian: return "gaussian";
    default: return "mse";
  }
}

inline HeadKind head_kind_from_name(const std::string& s) {
  if (s == "gmm") return HeadKind::gmm;
  if (s == "gaussian") return HeadKind::gaussian;
  if (s == "mse") return HeadKind::mse;
  throw ContractError("unknown head kind " + s);
}

struct PolicyConfig {
  int context = 8;
  int layers = 4;  // transformer blocks; 0 = MLP baseline (fusion + head)
  int heads = 4;
  int embed = 128;
  double dropout = 0.1;
  HeadKind head = HeadKind::gmm;
  int gmm_k = 5;
  double min_std = 1e-4;
  std::vector<int> conv_channels = {16, 32, 32};
  std::vector<int> proprio_widths = {32, 32};
  std::vector<int> fusion_widths = {128};
  int views = 2;
  int proprio_dim = 4;
  int action_dim = 4;  // motion dims + 1 gripper dim
  int crop = 76;       // act()-time center crop side; training must match
  ActionMode action_mode = ActionMode::task_space;
  GripperMode gripper_mode = GripperMode::binary;

  void validate() const {
    if (context < 1) throw ContractError("policy: context must be >= 1");
    if (layers < 0) throw ContractError("policy: layers must be >= 0");
    if (layers > 0 && (heads < 1 || embed % heads != 0))
      throw ContractError("policy: embed dim must divide by heads");
    if (gmm_k < 1) throw ContractError("policy: gmm_k must be >= 1");
    if (conv_channels.empty()) throw ContractError("policy: need at least one conv layer");
    if (views < 1 || proprio_dim < 1 || action_dim < 2)
      throw ContractError("policy: bad io dims");
    if (crop < 4 || crop > kImageSide) throw ContractError("policy: bad crop side");
    if (min_std <= 0.0) throw ContractError("policy: min_std must be positive");
  }

  int mixture_k() const { return head == HeadKind::gmm ? gmm_k : 1; }

  /// Per-component scale applied to motion targets so the network regresses
  /// values in [-1, 1]; the gripper dimension uses +-1 encoding directly.
  std::vector<double> action_scale(const WorldConfig& w) const {
    std::vector<double> s;
    if (action_mode == ActionMode::task_space)
      s = {w.limits.dpos, w.limits.dpos, w.limits.dtheta};
    else
      s.assign(static_cast<size_t>(w.chain.dof()), w.limits.dq);
    s.push_back(1.0);
    if (static_cast<int>(s.size()) != action_dim)
      throw ContractError("policy: action_dim inconsistent with action mode");
    return s;
  }

  nlohmann::json record() const {
    return {{"context", context},
            {"layers", layers},
            {"heads", heads},
            {"embed", embed},
            {"dropout", dropout},
            {"head", head_kind_name(head)},
            {"gmm_k", gmm_k},
            {"min_std", min_std},
            {"conv_channels", conv_channels},
            {"proprio_widths", proprio_widths},
            {"fusion_widths", fusion_widths},
            {"views", views},
            {"proprio_dim", proprio_dim},
            {"action_dim", action_dim},
            {"crop", crop},
            {"action_mode", action_mode_name(action_mode)},
            {"gripper_mode", gripper_mode == GripperMode::binary ? "binary" : "continuous"}};
  }

  static PolicyConfig from_record(const nlohmann::json& j) {
    PolicyConfig c;
    c.context = j.at("context");
    c.layers = j.at("layers");
    c.heads = j.at("heads");
    c.embed = j.at("embed");
    c.dropout = j.at("dropout");
    c.head = head_kind_from_name(j.at("head"));
    c.gmm_k = j.at("gmm_k");
    c.min_std = j.at("min_std");
    c.conv_channels = j.at("conv_channels").get<std::vector<int>>();
    c.proprio_widths = j.at("proprio_widths").get<std::vector<int>>();
    c.fusion_widths = j.at("fusion_widths").get<std::vector<int>>();
    c.views = j.at("views");
    c.proprio_dim = j.at("proprio_dim");
    c.action_dim = j.at("action_dim");
    c.crop = j.at("crop");
    c.action_mode = std::string(j.at("action_mode")) == "joint_space" ? ActionMode::joint_space
                                                                      : ActionMode::task_space;
    c.gripper_mode = std::string(j.at("gripper_mode")) == "continuous" ? GripperMode::continuous
                                                                       : GripperMode::binary;
    c.validate();
    return c;
  }
};

/// One training batch of fixed-length windows, front-padded with zeros.
/// Images are channel-first floats in [0, 1], one buffer per view.
template <typename T>
struct PolicyBatch {
  std::vector<std::vector<T>> view_images;  // per view: [b*len, 3, side, side]
  std::vector<T> proprio;                   // [b*len, proprio_dim]
  std::vector<T> targets;                   // [b, len, action_dim], normalized
  std::vector<T> mask;                      // [b, len], 1 = position in loss
  std::vector<int> first_valid;             // [b]
  int bsz = 0, len = 0, side = 0;
};

template <typename T>
struct ViewEncoderCtx {
  std::vector<Conv2dCtx<T>> convs;
  std::vector<GeluCtx<T>> gelus;
  SpatialSoftmaxCtx<T> ssm;
};

/// Conv stack (3x3, stride 2) whose final feature map feeds a spatial
/// softmax; output is the 2-per-channel keypoint vector.
template <typename T>
class ViewEncoder {
 public:
  ViewEncoder() = default;
  ViewEncoder(ParamStore<T>& ps, const std::string& name, const std::vector<int>& channels,
              Rng& rng) {
    int cin = 3;
    for (size_t i = 0; i < channels.size(); ++i) {
      convs_.emplace_back(ps, name + str_printf(".conv%zu", i), cin, channels[i], rng);
      cin = channels[i];
    }
    out_channels_ = cin;
  }

  int out_dim() const { return 2 * out_channels_; }

  std::vector<T> forward(const std::vector<T>& images, int n, int side,
                         ViewEncoderCtx<T>* ctx) const {
    if (ctx) {
      ctx->convs.resize(convs_.size());
      ctx->gelus.resize(convs_.size() - 1);
    }
    std::vector<T> x = images;
    int h = side;
    for (size_t i = 0; i < convs_.size(); ++i) {
      x = convs_[i].forward(x, n, h, h, ctx ? &ctx->convs[i] : nullptr);
      h = convs_[i].out_dim(h);
      if (h < 1) throw ContractError("view encoder: image too small for conv stack");
      if (i + 1 < convs_.size()) x = Gelu<T>::forward(x, ctx ? &ctx->gelus[i] : nullptr);
    }
    return SpatialSoftmax<T>::forward(x, n, out_channels_, h, h, ctx ? &ctx->ssm : nullptr);
  }

  std::vector<T> backward(const std::vector<T>& dy, ViewEncoderCtx<T>& ctx) {
    std::vector<T> d = SpatialSoftmax<T>::backward(dy, ctx.ssm);
    for (size_t i = convs_.size(); i-- > 0;) {
      if (i + 1 < convs_.size()) d = Gelu<T>::backward(d, ctx.gelus[i]);
      d = convs_[i].backward(d, ctx.convs[i]);
    }
    return d;
  }

 private:
  std::vector<Conv2d<T>> convs_;
  int out_channels_ = 0;
};

template <typename T>
struct MlpCtx {
  std::vector<LinearCtx<T>> fcs;
  std::vector<GeluCtx<T>> gelus;
};

/// Linear stack with GELU after every layer except optionally the last.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore<T>& ps, const std::string& name, int in, const std::vector<int>& widths,
      bool final_activation, Rng& rng)
      : final_act_(final_activation) {
    for (size_t i = 0; i < widths.size(); ++i) {
      fcs_.emplace_back(ps, name + str_printf(".fc%zu", i), in, widths[i], rng);
      in = widths[i];
    }
    out_ = in;
  }

  int out_dim() const { return out_; }

  std::vector<T> forward(std::vector<T> x, int n, MlpCtx<T>* ctx) const {
    if (ctx) {
      ctx->fcs.resize(fcs_.size());
      ctx->gelus.resize(fcs_.size());
    }
    for (size_t i = 0; i < fcs_.size(); ++i) {
      x = fcs_[i].forward(x, n, ctx ? &ctx->fcs[i] : nullptr);
      if (final_act_ || i + 1 < fcs_.size())
        x = Gelu<T>::forward(x, ctx ? &ctx->gelus[i] : nullptr);
    }
    return x;
  }

  std::vector<T> backward(std::vector<T> d, MlpCtx<T>& ctx) {
    for (size_t i = fcs_.size(); i-- > 0;) {
      if (final_act_ || i + 1 < fcs_.size()) d = Gelu<T>::backward(d, ctx.gelus[i]);
      d = fcs_[i].backward(d, ctx.fcs[i]);
    }
    return d;
  }

 private:
  std::vector<Linear<T>> fcs_;
  bool final_act_ = true;
  int out_ = 0;
};

template <typename T>
struct EncoderCtx {
  std::vector<ViewEncoderCtx<T>> views;
  MlpCtx<T> proprio;
  MlpCtx<T> fusion;
  LinearCtx<T> project;
  std::vector<int> feature_splits;
};

template <typename T>
struct PolicyCtx {
  EncoderCtx<T> enc;
  DropoutCtx<T> emb_drop;
  std::vector<BlockCtx<T>> blocks;
  LayerNormCtx<T> final_ln;
  LinearCtx<T> head;
  std::vector<T> head_raw;
  int bsz = 0, len = 0;
};

template <typename T>
class Policy {
 public:
  explicit Policy(const PolicyConfig& cfg, uint64_t init_seed = 0) : cfg_(cfg) {
    cfg.validate();
    Rng rng(init_seed, 9100);
    for (int v = 0; v < cfg.views; ++v)
      views_.emplace_back(ps_, str_printf("enc%d", v), cfg.conv_channels, rng);
    proprio_ = Mlp<T>(ps_, "proprio", cfg.proprio_dim, cfg.proprio_widths, true, rng);
    int feat = cfg.views * views_[0].out_dim() + proprio_.out_dim();
    fusion_ = Mlp<T>(ps_, "fusion", feat, cfg.fusion_widths, true, rng);
    project_ = Linear<T>(ps_, "project", fusion_.out_dim(), cfg.embed, rng);
    for (int l = 0; l < cfg.layers; ++l)
      blocks_.emplace_back(ps_, str_printf("block%d", l), cfg.embed, cfg.heads, cfg.context, rng,
                           cfg.dropout);
    final_ln_ = LayerNorm<T>(ps_, "final_ln", cfg.embed);
    head_out_ = head_output_dim();
    head_ = Linear<T>(ps_, "head", cfg.embed, head_out_, rng, 0.01);
    emb_drop_ = Dropout<T>(cfg.dropout);
  }

  const PolicyConfig& cfg() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }

  int head_output_dim() const {
    int K = cfg_.mixture_k(), A = cfg_.action_dim;
    return cfg_.head == HeadKind::mse ? A : K + 2 * K * A;
  }

  /// Embeddings for a batch of frames: [n, embed].
  std::vector<T> encode_frames(const PolicyBatch<T>& batch, EncoderCtx<T>* ctx) const {
    int n = batch.bsz * batch.len;
    return encode_raw(batch.view_images, batch.proprio, n, batch.side, ctx);
  }

  /// Transformer + head over encoded frames: returns raw head outputs
  /// [bsz, len, head_out]. Training passes ctx + rng; eval passes null.
  std::vector<T> forward_embeddings(std::vector<T> emb, int bsz, int len,
                                    const std::vector<int>& first_valid, PolicyCtx<T>* ctx,
                                    Rng* rng) const {
    if (bsz < 1 || emb.size() != static_cast<size_t>(bsz) * len * cfg_.embed)
      throw ContractError("policy: embedding buffer size mismatch");
    if (len > cfg_.context) throw ContractError("policy: history longer than context");
    emb = emb_drop_.forward(emb, ctx ? &ctx->emb_drop : nullptr, rng);
    if (ctx) ctx->blocks.resize(blocks_.size());
    for (size_t l = 0; l < blocks_.size(); ++l)
      emb = blocks_[l].forward(std::move(emb), bsz, len, first_valid,
                               ctx ? &ctx->blocks[l] : nullptr, rng);
    emb = final_ln_.forward(emb, bsz * len, ctx ? &ctx->final_ln : nullptr);
    auto raw = head_.forward(emb, bsz * len, ctx ? &ctx->head : nullptr);
    if (ctx) {
      ctx->head_raw = raw;
      ctx->bsz = bsz;
      ctx->len = len;
    }
    return raw;
  }

  struct LossResult {
    double loss = 0.0;
    size_t positions = 0;
  };

  /// Full training step math: forward, masked per-position head loss,
  /// backward into the parameter gradients.
  LossResult loss_and_grad(const PolicyBatch<T>& batch, Rng& rng) {
    PolicyCtx<T> ctx;
    auto emb = encode_frames(batch, &ctx.enc);
    auto raw =
        forward_embeddings(std::move(emb), batch.bsz, batch.len, batch.first_valid, &ctx, &rng);
    std::vector<T> draw(raw.size(), T(0));
    LossResult res = head_loss(raw, batch, draw.data());
    backward(draw, batch, ctx);
    return res;
  }

  /// Loss only (no gradients); used for validation metrics.
  LossResult loss_only(const PolicyBatch<T>& batch) const {
    auto emb = encode_raw(batch.view_images, batch.proprio, batch.bsz * batch.len, batch.side,
                          nullptr);
    auto raw = forward_embeddings(std::move(emb), batch.bsz, batch.len, batch.first_valid,
                                  nullptr, nullptr);
    return head_loss(raw, batch, nullptr);
  }

  /// Mixture parameters decoded from one raw head row.
  struct HeadParams {
    std::vector<T> logits, mu, sigma;  // K; K*A; K*A (sigma empty for mse)
  };

  HeadParams decode_head(const T* raw) const {
    int K = cfg_.mixture_k(), A = cfg_.action_dim;
    HeadParams p;
    if (cfg_.head == HeadKind::mse) {
      p.logits = {T(0)};
      p.mu.assign(raw, raw + A);
      return p;
    }
    p.logits.assign(raw, raw + K);
    p.mu.assign(raw + K, raw + K + K * A);
    p.sigma.resize(static_cast<size_t>(K) * A);
    for (size_t i = 0; i < p.sigma.size(); ++i)
      p.sigma[i] = softplus(raw[K + K * A + i]) + static_cast<T>(cfg_.min_std);
    return p;
  }

  /// Per-frame embedding for rollouts (eval mode, single observation).
  std::vector<T> encode_frame(const Observation& obs) const {
    auto [imgs, prop] = observation_tensors(obs);
    return encode_raw(imgs, prop, 1, cfg_.crop, nullptr);
  }

  /// Action from a history of per-frame embeddings (most recent last).
  ControlAction act_from_embeddings(const std::deque<std::vector<T>>& history, ActMode mode,
                                    Rng* rng, const WorldConfig& world) const {
    if (history.empty()) throw ContractError("policy: empty history");
    int len = cfg_.context;
    size_t used = std::min(history.size(), static_cast<size_t>(len));
    std::vector<T> emb(static_cast<size_t>(len) * cfg_.embed, T(0));
    int fv = len - static_cast<int>(used);
    for (size_t i = 0; i < used; ++i) {
      const auto& e = history[history.size() - used + i];
      std::copy(e.begin(), e.end(), emb.begin() + (fv + static_cast<long>(i)) * cfg_.embed);
    }
    auto raw = forward_embeddings(std::move(emb), 1, len, {fv}, nullptr, nullptr);
    HeadParams hp = decode_head(raw.data() + static_cast<size_t>(len - 1) * head_out_);
    return decode_action(hp, mode, rng, world);
  }

  /// Spec-level action op: encode the raw observation history and decode.
  ControlAction act(const std::vector<Observation>& history, ActMode mode, Rng* rng,
                    const WorldConfig& world) const {
    std::deque<std::vector<T>> embs;
    size_t used = std::min(history.size(), static_cast<size_t>(cfg_.context));
    for (size_t i = history.size() - used; i < history.size(); ++i)
      embs.push_back(encode_frame(history[i]));
    return act_from_embeddings(embs, mode, rng, world);
  }

  ControlAction decode_action(const HeadParams& hp, ActMode mode, Rng* rng,
                              const WorldConfig& world) const {
    int K = cfg_.mixture_k(), A = cfg_.action_dim;
    std::vector<T> a(static_cast<size_t>(A));
    if (cfg_.head == HeadKind::mse) {
      a = hp.mu;
    } else {
      int k = 0;
      if (mode == ActMode::sample) {
        if (!rng) throw ContractError("policy: sample mode needs an rng");
        std::vector<double> w(K);
        double mx = hp.logits[0];
        for (int i = 1; i < K; ++i) mx = std::max(mx, static_cast<double>(hp.logits[i]));
        double sum = 0.0;
        for (int i = 0; i < K; ++i) {
          w[i] = std::exp(static_cast<double>(hp.logits[i]) - mx);
          sum += w[i];
        }
        double u = rng->uniform() * sum, acc = 0.0;
        for (int i = 0; i < K; ++i) {
          acc += w[i];
          if (u <= acc) {
            k = i;
            break;
          }
          k = i;
        }
        for (int d = 0; d < A; ++d)
          a[d] = hp.mu[k * A + d] + hp.sigma[k * A + d] * static_cast<T>(rng->normal());
      } else {
        for (int i = 1; i < K; ++i)
          if (hp.logits[i] > hp.logits[k]) k = i;
        for (int d = 0; d < A; ++d) a[d] = hp.mu[k * A + d];
      }
    }
    std::vector<double> scale = cfg_.action_scale(world);
    ControlAction act;
    act.mode = cfg_.action_mode;
    act.motion.resize(static_cast<size_t>(A) - 1);
    for (int d = 0; d + 1 < A; ++d) {
      double m = std::clamp(static_cast<double>(a[d]), -1.0, 1.0);
      act.motion[d] = m * scale[d];
    }
    double g = static_cast<double>(a[A - 1]);
    if (cfg_.gripper_mode == GripperMode::binary)
      act.gripper_cmd = g >= 0.0 ? 1.0 : 0.0;
    else
      act.gripper_cmd = std::clamp((g + 1.0) / 2.0, 0.0, 1.0);
    return act;
  }

  /// Center-cropped, normalized tensors for one observation.
  std::pair<std::vector<std::vector<T>>, std::vector<T>> observation_tensors(
      const Observation& obs) const {
    if (static_cast<int>(obs.views.size()) != cfg_.views)
      throw ContractError("policy: observation view count mismatch");
    int off = (kImageSide - cfg_.crop) / 2;
    std::vector<std::vector<T>> imgs(static_cast<size_t>(cfg_.views));
    for (int v = 0; v < cfg_.views; ++v)
      imgs[v] = crop_to_chw(obs.views[v].rgb, kImageSide, cfg_.crop, off, off);
    std::vector<T> prop(cfg_.proprio_dim);
    for (int d = 0; d < cfg_.proprio_dim; ++d) prop[d] = static_cast<T>(obs.proprio[d]);
    return {std::move(imgs), std::move(prop)};
  }

  /// HWC u8 -> CHW float in [0,1], cropping side->crop at offset (oy, ox).
  static std::vector<T> crop_to_chw(const std::vector<uint8_t>& rgb, int side, int crop, int oy,
                                    int ox) {
    std::vector<T> out(static_cast<size_t>(3) * crop * crop);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x)
          out[(static_cast<size_t>(c) * crop + y) * crop + x] =
              static_cast<T>(rgb[((static_cast<size_t>(y + oy) * side) + (x + ox)) * 3 + c]) /
              T(255);
    return out;
  }

  /// Masked head loss over raw outputs; writes d(loss)/d(raw) when draw set.
  LossResult head_loss(const std::vector<T>& raw, const PolicyBatch<T>& batch, T* draw) const {
    int K = cfg_.mixture_k(), A = cfg_.action_dim;
    size_t valid = 0;
    for (T m : batch.mask) valid += m != T(0);
    if (valid == 0) throw ContractError("policy: batch has no valid positions");
    double total = 0.0;
    T inv = static_cast<T>(1.0 / static_cast<double>(valid));
    for (int b = 0; b < batch.bsz; ++b)
      for (int t = 0; t < batch.len; ++t) {
        size_t pos = static_cast<size_t>(b) * batch.len + t;
        if (batch.mask[pos] == T(0)) continue;
        const T* r = raw.data() + pos * head_out_;
        const T* target = batch.targets.data() + pos * A;
        T* dr = draw ? draw + pos * head_out_ : nullptr;
        if (cfg_.head == HeadKind::mse) {
          for (int d = 0; d < A; ++d) {
            T e = r[d] - target[d];
            total += static_cast<double>(e) * static_cast<double>(e) / A;
            if (dr) dr[d] = T(2) * e / static_cast<T>(A) * inv;
          }
          continue;
        }
        HeadParams hp = decode_head(r);
        std::vector<T> dlog(K, T(0)), dmu(static_cast<size_t>(K) * A, T(0)),
            dsig(static_cast<size_t>(K) * A, T(0));
        T nll = gmm_nll(hp.logits.data(), hp.mu.data(), hp.sigma.data(), target, K, A,
                        dr ? dlog.data() : nullptr, dr ? dmu.data() : nullptr,
                        dr ? dsig.data() : nullptr);
        total += static_cast<double>(nll);
        if (dr) {
          for (int k = 0; k < K; ++k) dr[k] = dlog[k] * inv;
          for (int i = 0; i < K * A; ++i) dr[K + i] = dmu[i] * inv;
          for (int i = 0; i < K * A; ++i) {
            // sigma = softplus(s) + min_std
            T s = r[K + K * A + i];
            dr[K + K * A + i] = dsig[i] * sigmoid(s) * inv;
          }
        }
      }
    return {total / static_cast<double>(valid), valid};
  }

  /// Backward from d(loss)/d(raw head outputs) into parameter gradients.
  /// Returns per-frame embedding gradients (for causality probes).
  std::vector<T> backward(const std::vector<T>& draw, const PolicyBatch<T>& batch,
                          PolicyCtx<T>& ctx) {
    std::vector<T> d = head_.backward(draw, ctx.head);
    d = final_ln_.backward(d, ctx.final_ln);
    for (size_t l = blocks_.size(); l-- > 0;) d = blocks_[l].backward(d, ctx.blocks[l]);
    d = emb_drop_.backward(d, ctx.emb_drop);
    std::vector<T> demb = d;
    decode_backward(d, batch.bsz * batch.len, ctx.enc);
    return demb;
  }

  /// Input-gradient variant: also returns per-view image gradients.
  std::vector<std::vector<T>> encoder_input_grads(const std::vector<T>& demb, int n,
                                                  EncoderCtx<T>& ctx) {
    return decode_backward(demb, n, ctx);
  }

  T softplus(T x) const {
    return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  }
  T sigmoid(T x) const { return T(1) / (T(1) + std::exp(-x)); }

 private:
  std::vector<T> encode_raw(const std::vector<std::vector<T>>& view_images,
                            const std::vector<T>& proprio, int n, int side,
                            EncoderCtx<T>* ctx) const {
    if (static_cast<int>(view_images.size()) != cfg_.views)
      throw ContractError("policy: view buffer count mismatch");
    if (ctx) ctx->views.resize(static_cast<size_t>(cfg_.views));
    std::vector<std::vector<T>> feats(static_cast<size_t>(cfg_.views) + 1);
    for (int v = 0; v < cfg_.views; ++v)
      feats[v] =
          views_[v].forward(view_images[v], n, side, ctx ? &ctx->views[v] : nullptr);
    feats[cfg_.views] = proprio_.forward(proprio, n, ctx ? &ctx->proprio : nullptr);
    std::vector<int> splits;
    size_t width = 0;
    for (auto& f : feats) {
      splits.push_back(static_cast<int>(f.size() / n));
      width += f.size() / n;
    }
    std::vector<T> cat(static_cast<size_t>(n) * width);
    size_t off = 0;
    for (size_t f = 0; f < feats.size(); ++f) {
      size_t w = feats[f].size() / n;
      for (int i = 0; i < n; ++i)
        std::copy(feats[f].begin() + i * w, feats[f].begin() + (i + 1) * w,
                  cat.begin() + static_cast<size_t>(i) * width + off);
      off += w;
    }
    if (ctx) ctx->feature_splits = splits;
    auto fused = fusion_.forward(std::move(cat), n, ctx ? &ctx->fusion : nullptr);
    return project_.forward(fused, n, ctx ? &ctx->project : nullptr);
  }

  std::vector<std::vector<T>> decode_backward(const std::vector<T>& demb, int n,
                                              EncoderCtx<T>& ctx) {
    std::vector<T> d = project_.backward(demb, ctx.project);
    d = fusion_.backward(std::move(d), ctx.fusion);
    size_t width = d.size() / n;
    std::vector<std::vector<T>> dimgs;
    size_t off = 0;
    for (int v = 0; v <= cfg_.views; ++v) {
      size_t w = static_cast<size_t>(ctx.feature_splits[v]);
      std::vector<T> part(static_cast<size_t>(n) * w);
      for (int i = 0; i < n; ++i)
        std::copy(d.begin() + static_cast<size_t>(i) * width + off,
                  d.begin() + static_cast<size_t>(i) * width + off + w,
                  part.begin() + static_cast<size_t>(i) * w);
      off += w;
      if (v < cfg_.views)
        dimgs.push_back(views_[v].backward(part, ctx.views[v]));
      else
        proprio_.backward(std::move(part), ctx.proprio);
    }
    return dimgs;
  }

  PolicyConfig cfg_;
  ParamStore<T> ps_;
  std::vector<ViewEncoder<T>> views_;
  Mlp<T> proprio_, fusion_;
  Linear<T> project_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> final_ln_;
  Linear<T> head_;
  Dropout<T> emb_drop_{0.0};
  int head_out_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic, config echo, train step, then one named f32 block per
// parameter (the dataset container's block encoding).

inline constexpr char kCheckpointMagic[4] = {'O', 'P', 'T', 'C'};
inline constexpr uint16_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::string& path, const Policy<float>& policy,
                             uint64_t train_step) {
  std::string buf;
  buf.append(kCheckpointMagic, 4);
  detail::put_scalar<uint16_t>(buf, kCheckpointVersion);
  detail::put_str(buf, policy.cfg().record().dump());
  detail::put_scalar<uint64_t>(buf, train_step);
  detail::put_scalar<uint32_t>(buf, static_cast<uint32_t>(policy.params().size()));
  for (const auto& p : policy.params().items()) {
    std::vector<uint32_t> shape(p.shape.begin(), p.shape.end());
    TensorBlock b = TensorBlock::f32(p.name, shape, p.value);
    detail::put_str(buf, b.name);
    detail::put_scalar<uint8_t>(buf, static_cast<uint8_t>(b.dtype));
    detail::put_scalar<uint8_t>(buf, static_cast<uint8_t>(b.shape.size()));
    for (uint32_t d : b.shape) detail::put_scalar<uint32_t>(buf, d);
    detail::put_scalar<uint64_t>(buf, b.bytes.size());
    detail::put_bytes(buf, b.bytes.data(), b.bytes.size());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot open checkpoint for writing: " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DatasetError("checkpoint write failed: " + path);
}

struct Checkpoint {
  PolicyConfig cfg;
  uint64_t train_step = 0;
  std::vector<TensorBlock> blocks;
};

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open checkpoint: " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::Cursor cur{reinterpret_cast<const uint8_t*>(data.data()), data.size(), 0, "checkpoint"};
  auto magic = cur.take_bytes(4);
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0)
    throw BadMagic("not a checkpoint file: " + path);
  auto ver = cur.take<uint16_t>();
  if (ver != kCheckpointVersion)
    throw UnsupportedVersion(str_printf("checkpoint version %u unsupported", ver));
  Checkpoint ck;
  ck.cfg = PolicyConfig::from_record(nlohmann::json::parse(cur.take_str()));
  ck.train_step = cur.take<uint64_t>();
  auto count = cur.take<uint32_t>();
  for (uint32_t i = 0; i < count; ++i) {
    TensorBlock b;
    b.name = cur.take_str();
    b.dtype = static_cast<DType>(cur.take<uint8_t>());
    if (b.dtype != DType::f32) throw ShapeMismatch("checkpoint block " + b.name + ": not f32");
    auto rank = cur.take<uint8_t>();
    for (uint8_t r = 0; r < rank; ++r) b.shape.push_back(cur.take<uint32_t>());
    auto nbytes = cur.take<uint64_t>();
    if (nbytes != b.elems() * 4)
      throw ShapeMismatch("checkpoint block " + b.name + ": byte count mismatch");
    b.bytes = cur.take_bytes(nbytes);
    ck.blocks.push_back(std::move(b));
  }
  return ck;
}

inline Policy<float> policy_from_checkpoint(const Checkpoint& ck) {
  Policy<float> policy(ck.cfg);
  auto& ps = policy.params();
  if (ck.blocks.size() != ps.size())
    throw ShapeMismatch(str_printf("checkpoint has %zu parameter blocks, policy needs %zu",
                                   ck.blocks.size(), ps.size()));
  for (auto& p : ps.items()) {
    const TensorBlock* b = nullptr;
    for (auto& blk : ck.blocks)
      if (blk.name == p.name) b = &blk;
    if (!b) throw ShapeMismatch("checkpoint missing parameter " + p.name);
    std::vector<uint32_t> want(p.shape.begin(), p.shape.end());
    if (b->shape != want) throw ShapeMismatch("checkpoint shape mismatch for " + p.name);
    std::vector<float> vals = b->as_f32();
    std::copy(vals.begin(), vals.end(), p.value.begin());
  }
  return policy;
}

inline Policy<float> load_policy(const std::string& path) {
  return policy_from_checkpoint(read_checkpoint(path));
}

}  // namespace tampi
