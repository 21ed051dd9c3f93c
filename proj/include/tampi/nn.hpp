#pragma once

// Reverse-mode neural network operator set sized for a single desktop core.
// Every operator is a plain struct over a shared parameter store: forward
// takes an optional context pointer (null = inference, no activations kept)
// and backward replays the stored context, accumulating parameter gradients
// and returning input gradients. Everything is templated on the scalar so
// the float training path has a bit-compatible double twin for
// finite-difference verification.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tampi/common.hpp"
#include "tampi/rng.hpp"

namespace tampi {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool decay = true;  // weight decay applies; off for biases and norm gains

  size_t numel() const { return value.size(); }
};

/// Flat registry of named parameters. Layers hold indices into it, so the
/// optimizer, checkpoint writer, and gradient checks all see one list.
template <typename T>
class ParamStore {
 public:
  size_t add(const std::string& name, std::vector<int> shape, bool decay) {
    size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ContractError(str_printf("parameter %s: bad dim %d", name.c_str(), d));
      n *= static_cast<size_t>(d);
    }
    for (auto& p : items_)
      if (p.name == name) throw ContractError("duplicate parameter name " + name);
    Param<T> p;
    p.name = name;
    p.shape = std::move(shape);
    p.value.assign(n, T(0));
    p.grad.assign(n, T(0));
    p.decay = decay;
    items_.push_back(std::move(p));
    return items_.size() - 1;
  }

  Param<T>& at(size_t i) { return items_[i]; }
  const Param<T>& at(size_t i) const { return items_[i]; }
  size_t size() const { return items_.size(); }
  std::vector<Param<T>>& items() { return items_; }
  const std::vector<Param<T>>& items() const { return items_; }

  size_t total_numel() const {
    size_t n = 0;
    for (auto& p : items_) n += p.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : items_) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }

  double grad_norm() const {
    double s = 0.0;
    for (auto& p : items_)
      for (T g : p.grad) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
  }

  /// Scales all gradients so the global L2 norm is at most max_norm.
  /// Returns the pre-clip norm.
  double clip_global_norm(double max_norm) {
    double n = grad_norm();
    if (n > max_norm && n > 0.0) {
      T s = static_cast<T>(max_norm / n);
      for (auto& p : items_)
        for (T& g : p.grad) g *= s;
    }
    return n;
  }

 private:
  std::vector<Param<T>> items_;
};

namespace detail {

template <typename T>
inline void init_normal(std::vector<T>& v, Rng& rng, double std) {
  for (T& x : v) x = static_cast<T>(rng.normal() * std);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear

template <typename T>
struct LinearCtx {
  std::vector<T> x;
  int n = 0;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng,
         double w_std = -1.0)
      : ps_(&ps), in_(in), out_(out) {
    w_ = ps.add(name + ".w", {out, in}, true);
    b_ = ps.add(name + ".b", {out}, false);
    detail::init_normal(ps.at(w_).value, rng, w_std < 0.0 ? std::sqrt(2.0 / in) : w_std);
  }

  int in_dim() const { return in_; }
  int out_dim() const { return out_; }

  /// x: [n, in] -> [n, out]
  std::vector<T> forward(const std::vector<T>& x, int n, LinearCtx<T>* ctx) const {
    if (x.size() != static_cast<size_t>(n) * in_)
      throw ContractError("linear: input size mismatch");
    std::vector<T> y(static_cast<size_t>(n) * out_);
    ConstMatMap<T> X(x.data(), n, in_);
    ConstMatMap<T> W(ps_->at(w_).value.data(), out_, in_);
    MatMap<T> Y(y.data(), n, out_);
    Y.noalias() = X * W.transpose();
    const auto& b = ps_->at(b_).value;
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out_; ++o) y[static_cast<size_t>(i) * out_ + o] += b[o];
    if (ctx) {
      ctx->x = x;
      ctx->n = n;
    }
    return y;
  }

  std::vector<T> backward(const std::vector<T>& dy, const LinearCtx<T>& ctx) {
    int n = ctx.n;
    ConstMatMap<T> dY(dy.data(), n, out_);
    ConstMatMap<T> X(ctx.x.data(), n, in_);
    ConstMatMap<T> W(ps_->at(w_).value.data(), out_, in_);
    MatMap<T> dW(ps_->at(w_).grad.data(), out_, in_);
    dW.noalias() += dY.transpose() * X;
    auto& db = ps_->at(b_).grad;
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < out_; ++o) db[o] += dy[static_cast<size_t>(i) * out_ + o];
    std::vector<T> dx(static_cast<size_t>(n) * in_);
    MatMap<T> dX(dx.data(), n, in_);
    dX.noalias() = dY * W;
    return dx;
  }

 private:
  ParamStore<T>* ps_ = nullptr;
  size_t w_ = 0, b_ = 0;
  int in_ = 0, out_ = 0;
};

// ---------------------------------------------------------------------------
// Conv2d: 3x3 stride-2 pad-1 via im2col + GEMM

template <typename T>
struct Conv2dCtx {
  std::vector<T> cols;  // [n][cin*k*k, ho*wo] concatenated
  int n = 0, h = 0, w = 0;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& name, int cin, int cout, Rng& rng, int k = 3,
         int stride = 2, int pad = 1)
      : ps_(&ps), cin_(cin), cout_(cout), k_(k), stride_(stride), pad_(pad) {
    w_ = ps.add(name + ".w", {cout, cin * k * k}, true);
    b_ = ps.add(name + ".b", {cout}, false);
    detail::init_normal(ps.at(w_).value, rng, std::sqrt(2.0 / (cin * k * k)));
  }

  int out_channels() const { return cout_; }
  int out_dim(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  /// x: [n, cin, h, w] -> [n, cout, ho, wo]
  std::vector<T> forward(const std::vector<T>& x, int n, int h, int w, Conv2dCtx<T>* ctx) const {
    int ho = out_dim(h), wo = out_dim(w);
    if (ho < 1 || wo < 1) throw ContractError("conv: input smaller than kernel");
    if (x.size() != static_cast<size_t>(n) * cin_ * h * w)
      throw ContractError("conv: input size mismatch");
    size_t krows = static_cast<size_t>(cin_) * k_ * k_;
    size_t cols_per = krows * ho * wo;
    std::vector<T> cols(static_cast<size_t>(n) * cols_per);
    std::vector<T> y(static_cast<size_t>(n) * cout_ * ho * wo);
    ConstMatMap<T> W(ps_->at(w_).value.data(), cout_, static_cast<int>(krows));
    const auto& b = ps_->at(b_).value;
    for (int i = 0; i < n; ++i) {
      T* col = cols.data() + static_cast<size_t>(i) * cols_per;
      im2col(x.data() + static_cast<size_t>(i) * cin_ * h * w, h, w, col);
      MatMap<T> C(col, static_cast<int>(krows), ho * wo);
      MatMap<T> Y(y.data() + static_cast<size_t>(i) * cout_ * ho * wo, cout_, ho * wo);
      Y.noalias() = W * C;
      for (int c = 0; c < cout_; ++c) Y.row(c).array() += b[c];
    }
    if (ctx) {
      ctx->cols = std::move(cols);
      ctx->n = n;
      ctx->h = h;
      ctx->w = w;
    }
    return y;
  }

  std::vector<T> backward(const std::vector<T>& dy, const Conv2dCtx<T>& ctx) {
    int n = ctx.n, h = ctx.h, w = ctx.w;
    int ho = out_dim(h), wo = out_dim(w);
    size_t krows = static_cast<size_t>(cin_) * k_ * k_;
    size_t cols_per = krows * ho * wo;
    ConstMatMap<T> W(ps_->at(w_).value.data(), cout_, static_cast<int>(krows));
    MatMap<T> dW(ps_->at(w_).grad.data(), cout_, static_cast<int>(krows));
    auto& db = ps_->at(b_).grad;
    std::vector<T> dx(static_cast<size_t>(n) * cin_ * h * w, T(0));
    std::vector<T> dcol(cols_per);
    for (int i = 0; i < n; ++i) {
      ConstMatMap<T> dY(dy.data() + static_cast<size_t>(i) * cout_ * ho * wo, cout_, ho * wo);
      ConstMatMap<T> C(ctx.cols.data() + static_cast<size_t>(i) * cols_per,
                       static_cast<int>(krows), ho * wo);
      dW.noalias() += dY * C.transpose();
      for (int c = 0; c < cout_; ++c) db[c] += dY.row(c).sum();
      MatMap<T> dC(dcol.data(), static_cast<int>(krows), ho * wo);
      dC.noalias() = W.transpose() * dY;
      col2im(dcol.data(), h, w, dx.data() + static_cast<size_t>(i) * cin_ * h * w);
    }
    return dx;
  }

 private:
  void im2col(const T* img, int h, int w, T* col) const {
    int ho = out_dim(h), wo = out_dim(w);
    size_t r = 0;
    for (int c = 0; c < cin_; ++c)
      for (int ki = 0; ki < k_; ++ki)
        for (int kj = 0; kj < k_; ++kj, ++r)
          for (int oy = 0; oy < ho; ++oy) {
            int iy = oy * stride_ - pad_ + ki;
            T* dst = col + r * ho * wo + static_cast<size_t>(oy) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + wo, T(0));
              continue;
            }
            const T* src = img + (static_cast<size_t>(c) * h + iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              int ix = ox * stride_ - pad_ + kj;
              dst[ox] = (ix < 0 || ix >= w) ? T(0) : src[ix];
            }
          }
  }

  void col2im(const T* col, int h, int w, T* dimg) const {
    int ho = out_dim(h), wo = out_dim(w);
    size_t r = 0;
    for (int c = 0; c < cin_; ++c)
      for (int ki = 0; ki < k_; ++ki)
        for (int kj = 0; kj < k_; ++kj, ++r)
          for (int oy = 0; oy < ho; ++oy) {
            int iy = oy * stride_ - pad_ + ki;
            if (iy < 0 || iy >= h) continue;
            const T* src = col + r * ho * wo + static_cast<size_t>(oy) * wo;
            T* dst = dimg + (static_cast<size_t>(c) * h + iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              int ix = ox * stride_ - pad_ + kj;
              if (ix >= 0 && ix < w) dst[ix] += src[ox];
            }
          }
  }

  ParamStore<T>* ps_ = nullptr;
  size_t w_ = 0, b_ = 0;
  int cin_ = 0, cout_ = 0, k_ = 3, stride_ = 2, pad_ = 1;
};

// ---------------------------------------------------------------------------
// Spatial softmax: per-channel softmax over the map, then expected (x, y)
// in [-1, 1] normalized coordinates.

template <typename T>
struct SpatialSoftmaxCtx {
  std::vector<T> probs;  // [n, c, h*w]
  int n = 0, c = 0, h = 0, w = 0;
};

template <typename T>
class SpatialSoftmax {
 public:
  /// x: [n, c, h, w] -> [n, 2c], layout (x0, y0, x1, y1, ...)
  static std::vector<T> forward(const std::vector<T>& x, int n, int c, int h, int w,
                                SpatialSoftmaxCtx<T>* ctx) {
    int hw = h * w;
    std::vector<T> probs(x.size());
    std::vector<T> y(static_cast<size_t>(n) * 2 * c);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* m = x.data() + (static_cast<size_t>(i) * c + ch) * hw;
        T* p = probs.data() + (static_cast<size_t>(i) * c + ch) * hw;
        T mx = m[0];
        for (int k = 1; k < hw; ++k) mx = std::max(mx, m[k]);
        T sum = T(0);
        for (int k = 0; k < hw; ++k) {
          p[k] = std::exp(m[k] - mx);
          sum += p[k];
        }
        T ex = T(0), ey = T(0);
        for (int iy = 0; iy < h; ++iy)
          for (int ix = 0; ix < w; ++ix) {
            T pr = p[iy * w + ix] / sum;
            p[iy * w + ix] = pr;
            ex += pr * coord(ix, w);
            ey += pr * coord(iy, h);
          }
        y[static_cast<size_t>(i) * 2 * c + 2 * ch] = ex;
        y[static_cast<size_t>(i) * 2 * c + 2 * ch + 1] = ey;
      }
    if (ctx) {
      ctx->probs = std::move(probs);
      ctx->n = n;
      ctx->c = c;
      ctx->h = h;
      ctx->w = w;
    }
    return y;
  }

  static std::vector<T> backward(const std::vector<T>& dy, const SpatialSoftmaxCtx<T>& ctx) {
    int n = ctx.n, c = ctx.c, h = ctx.h, w = ctx.w, hw = h * w;
    std::vector<T> dx(static_cast<size_t>(n) * c * hw);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const T* p = ctx.probs.data() + (static_cast<size_t>(i) * c + ch) * hw;
        T* d = dx.data() + (static_cast<size_t>(i) * c + ch) * hw;
        T dex = dy[static_cast<size_t>(i) * 2 * c + 2 * ch];
        T dey = dy[static_cast<size_t>(i) * 2 * c + 2 * ch + 1];
        // E = sum p_k v_k with p = softmax(x): dE/dx_k = p_k (v_k - E)
        T ex = T(0), ey = T(0);
        for (int iy = 0; iy < h; ++iy)
          for (int ix = 0; ix < w; ++ix) {
            ex += p[iy * w + ix] * coord(ix, w);
            ey += p[iy * w + ix] * coord(iy, h);
          }
        for (int iy = 0; iy < h; ++iy)
          for (int ix = 0; ix < w; ++ix)
            d[iy * w + ix] = p[iy * w + ix] * (dex * (coord(ix, w) - ex) + dey * (coord(iy, h) - ey));
      }
    return dx;
  }

  static T coord(int i, int extent) {
    return extent <= 1 ? T(0) : T(-1) + T(2) * i / (extent - 1);
  }
};

// ---------------------------------------------------------------------------
// LayerNorm over the last dimension

template <typename T>
struct LayerNormCtx {
  std::vector<T> xhat;
  std::vector<T> inv_std;  // per row
  int n = 0;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, int dim) : ps_(&ps), dim_(dim) {
    g_ = ps.add(name + ".gamma", {dim}, false);
    b_ = ps.add(name + ".beta", {dim}, false);
    std::fill(ps.at(g_).value.begin(), ps.at(g_).value.end(), T(1));
  }

  std::vector<T> forward(const std::vector<T>& x, int n, LayerNormCtx<T>* ctx) const {
    std::vector<T> y(x.size());
    std::vector<T> xhat(ctx ? x.size() : 0);
    std::vector<T> inv_std(ctx ? n : 0);
    const auto& g = ps_->at(g_).value;
    const auto& b = ps_->at(b_).value;
    for (int i = 0; i < n; ++i) {
      const T* xr = x.data() + static_cast<size_t>(i) * dim_;
      T* yr = y.data() + static_cast<size_t>(i) * dim_;
      T mean = T(0);
      for (int d = 0; d < dim_; ++d) mean += xr[d];
      mean /= dim_;
      T var = T(0);
      for (int d = 0; d < dim_; ++d) var += (xr[d] - mean) * (xr[d] - mean);
      var /= dim_;
      T is = T(1) / std::sqrt(var + T(kEps));
      for (int d = 0; d < dim_; ++d) {
        T xh = (xr[d] - mean) * is;
        yr[d] = xh * g[d] + b[d];
        if (ctx) xhat[static_cast<size_t>(i) * dim_ + d] = xh;
      }
      if (ctx) inv_std[i] = is;
    }
    if (ctx) {
      ctx->xhat = std::move(xhat);
      ctx->inv_std = std::move(inv_std);
      ctx->n = n;
    }
    return y;
  }

  std::vector<T> backward(const std::vector<T>& dy, const LayerNormCtx<T>& ctx) {
    int n = ctx.n;
    const auto& g = ps_->at(g_).value;
    auto& dg = ps_->at(g_).grad;
    auto& db = ps_->at(b_).grad;
    std::vector<T> dx(dy.size());
    for (int i = 0; i < n; ++i) {
      const T* dyr = dy.data() + static_cast<size_t>(i) * dim_;
      const T* xh = ctx.xhat.data() + static_cast<size_t>(i) * dim_;
      T* dxr = dx.data() + static_cast<size_t>(i) * dim_;
      T sum_dxh = T(0), sum_dxh_xh = T(0);
      for (int d = 0; d < dim_; ++d) {
        dg[d] += dyr[d] * xh[d];
        db[d] += dyr[d];
        T dxh = dyr[d] * g[d];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh[d];
      }
      for (int d = 0; d < dim_; ++d) {
        T dxh = dyr[d] * g[d];
        dxr[d] = ctx.inv_std[i] * (dxh - sum_dxh / dim_ - xh[d] * sum_dxh_xh / dim_);
      }
    }
    return dx;
  }

  static constexpr double kEps = 1e-5;

 private:
  ParamStore<T>* ps_ = nullptr;
  size_t g_ = 0, b_ = 0;
  int dim_ = 0;
};

// ---------------------------------------------------------------------------
// GELU (exact erf form)

template <typename T>
struct GeluCtx {
  std::vector<T> x;
};

template <typename T>
class Gelu {
 public:
  static std::vector<T> forward(const std::vector<T>& x, GeluCtx<T>* ctx) {
    std::vector<T> y(x.size());
    for (size_t i = 0; i < x.size(); ++i) y[i] = x[i] * phi(x[i]);
    if (ctx) ctx->x = x;
    return y;
  }

  static std::vector<T> backward(const std::vector<T>& dy, const GeluCtx<T>& ctx) {
    std::vector<T> dx(dy.size());
    for (size_t i = 0; i < dy.size(); ++i) {
      T x = ctx.x[i];
      T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014326779);
      dx[i] = dy[i] * (phi(x) + x * pdf);
    }
    return dx;
  }

 private:
  static T phi(T x) { return T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475244))); }
};

// ---------------------------------------------------------------------------
// Dropout (inverted scaling; identity when ctx is null)

template <typename T>
struct DropoutCtx {
  std::vector<T> mask;
};

template <typename T>
class Dropout {
 public:
  explicit Dropout(double p = 0.0) : p_(p) {}

  std::vector<T> forward(const std::vector<T>& x, DropoutCtx<T>* ctx, Rng* rng) const {
    if (!ctx || p_ <= 0.0) {
      if (ctx) ctx->mask.clear();
      return x;
    }
    std::vector<T> y(x.size());
    ctx->mask.resize(x.size());
    T scale = static_cast<T>(1.0 / (1.0 - p_));
    for (size_t i = 0; i < x.size(); ++i) {
      ctx->mask[i] = rng->uniform() < p_ ? T(0) : scale;
      y[i] = x[i] * ctx->mask[i];
    }
    return y;
  }

  std::vector<T> backward(const std::vector<T>& dy, const DropoutCtx<T>& ctx) const {
    if (ctx.mask.empty()) return dy;
    std::vector<T> dx(dy.size());
    for (size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * ctx.mask[i];
    return dx;
  }

  double p() const { return p_; }

 private:
  double p_;
};

// ---------------------------------------------------------------------------
// Causal multi-head self-attention with a learned per-offset relative bias
// added to the logits. Shorter (front-padded) sequences pass first_valid per
// batch row; keys before it are masked out, and rows before it attend only
// to themselves so their softmax stays well defined.

template <typename T>
struct MhaCtx {
  std::vector<T> q, k, v;      // [b, len, dim]
  std::vector<T> probs;        // [b, heads, len, len], pre-dropout softmax
  LinearCtx<T> qc, kc, vc, oc;
  DropoutCtx<T> pdrop;         // mask applied to probs (empty when inactive)
  std::vector<int> first_valid;
  int bsz = 0, len = 0;
};

template <typename T>
class Mha {
 public:
  Mha() = default;
  Mha(ParamStore<T>& ps, const std::string& name, int dim, int heads, int max_len, Rng& rng,
      double attn_dropout)
      : ps_(&ps), dim_(dim), heads_(heads), max_len_(max_len), drop_(attn_dropout) {
    if (dim % heads != 0) throw ContractError("attention: dim not divisible by heads");
    wq_ = Linear<T>(ps, name + ".q", dim, dim, rng, std::sqrt(1.0 / dim));
    wk_ = Linear<T>(ps, name + ".k", dim, dim, rng, std::sqrt(1.0 / dim));
    wv_ = Linear<T>(ps, name + ".v", dim, dim, rng, std::sqrt(1.0 / dim));
    wo_ = Linear<T>(ps, name + ".o", dim, dim, rng, std::sqrt(1.0 / dim));
    rel_ = ps.add(name + ".rel_bias", {heads, max_len}, false);
  }

  /// x: [bsz, len, dim]; first_valid: per row, the first real position.
  std::vector<T> forward(const std::vector<T>& x, int bsz, int len,
                         const std::vector<int>& first_valid, MhaCtx<T>* ctx, Rng* rng) const {
    if (len > max_len_) throw ContractError("attention: sequence longer than context");
    int rows = bsz * len;
    int dh = dim_ / heads_;
    MhaCtx<T> local;
    MhaCtx<T>& c = ctx ? *ctx : local;
    c.bsz = bsz;
    c.len = len;
    c.first_valid = first_valid;
    c.q = wq_.forward(x, rows, ctx ? &c.qc : nullptr);
    c.k = wk_.forward(x, rows, ctx ? &c.kc : nullptr);
    c.v = wv_.forward(x, rows, ctx ? &c.vc : nullptr);
    const auto& rel = ps_->at(rel_).value;
    T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    std::vector<T> probs(static_cast<size_t>(bsz) * heads_ * len * len, T(0));
    std::vector<T> concat(static_cast<size_t>(rows) * dim_, T(0));
    for (int b = 0; b < bsz; ++b) {
      int fv = first_valid.empty() ? 0 : first_valid[b];
      for (int hd = 0; hd < heads_; ++hd) {
        const T* relh = rel.data() + static_cast<size_t>(hd) * max_len_;
        for (int i = 0; i < len; ++i) {
          int lo = i < fv ? i : fv;  // padded rows attend to themselves only
          int hi = i;
          T* prow = probs.data() +
                    ((static_cast<size_t>(b) * heads_ + hd) * len + i) * len;
          const T* qi = c.q.data() + (static_cast<size_t>(b) * len + i) * dim_ + hd * dh;
          T mx = -std::numeric_limits<T>::infinity();
          for (int j = lo; j <= hi; ++j) {
            const T* kj = c.k.data() + (static_cast<size_t>(b) * len + j) * dim_ + hd * dh;
            T dot = T(0);
            for (int d = 0; d < dh; ++d) dot += qi[d] * kj[d];
            dot = dot * inv_sqrt + relh[i - j];
            prow[j] = dot;
            mx = std::max(mx, dot);
          }
          T sum = T(0);
          for (int j = lo; j <= hi; ++j) {
            prow[j] = std::exp(prow[j] - mx);
            sum += prow[j];
          }
          for (int j = lo; j <= hi; ++j) prow[j] /= sum;
        }
      }
    }
    // keep the pre-dropout distribution for the softmax jacobian; the
    // value-weighted sum uses the dropped version
    std::vector<T> dropped =
        ctx && drop_.p() > 0.0 ? drop_.forward(probs, &c.pdrop, rng) : probs;
    if (ctx && drop_.p() <= 0.0) c.pdrop.mask.clear();
    for (int b = 0; b < bsz; ++b)
      for (int hd = 0; hd < heads_; ++hd)
        for (int i = 0; i < len; ++i) {
          const T* prow = dropped.data() +
                          ((static_cast<size_t>(b) * heads_ + hd) * len + i) * len;
          T* out = concat.data() + (static_cast<size_t>(b) * len + i) * dim_ + hd * dh;
          for (int j = 0; j <= i; ++j) {
            if (prow[j] == T(0)) continue;
            const T* vj = c.v.data() + (static_cast<size_t>(b) * len + j) * dim_ + hd * dh;
            for (int d = 0; d < dh; ++d) out[d] += prow[j] * vj[d];
          }
        }
    if (ctx) c.probs = std::move(probs);
    return wo_.forward(concat, rows, ctx ? &c.oc : nullptr);
  }

  std::vector<T> backward(const std::vector<T>& dy, const MhaCtx<T>& ctx) {
    int bsz = ctx.bsz, len = ctx.len, rows = bsz * len, dh = dim_ / heads_;
    std::vector<T> dconcat = wo_.backward(dy, ctx.oc);
    auto& drel = ps_->at(rel_).grad;
    T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    bool dropped = !ctx.pdrop.mask.empty();

    // value stage sees the post-dropout probs
    std::vector<T> dprobs(ctx.probs.size(), T(0));
    std::vector<T> dv(static_cast<size_t>(rows) * dim_, T(0));
    for (int b = 0; b < bsz; ++b)
      for (int hd = 0; hd < heads_; ++hd)
        for (int i = 0; i < len; ++i) {
          size_t row = (static_cast<size_t>(b) * heads_ + hd) * len + i;
          const T* prow = ctx.probs.data() + row * len;
          const T* mrow = dropped ? ctx.pdrop.mask.data() + row * len : nullptr;
          T* dprow = dprobs.data() + row * len;
          const T* dout = dconcat.data() + (static_cast<size_t>(b) * len + i) * dim_ + hd * dh;
          for (int j = 0; j <= i; ++j) {
            T pd = dropped ? prow[j] * mrow[j] : prow[j];
            const T* vj = ctx.v.data() + (static_cast<size_t>(b) * len + j) * dim_ + hd * dh;
            T* dvj = dv.data() + (static_cast<size_t>(b) * len + j) * dim_ + hd * dh;
            T dp = T(0);
            for (int d = 0; d < dh; ++d) {
              dp += dout[d] * vj[d];
              dvj[d] += pd * dout[d];
            }
            dprow[j] = dp;
          }
        }
    // back through the dropout mask onto the softmax output
    if (dropped) dprobs = drop_.backward(dprobs, ctx.pdrop);

    std::vector<T> dq(static_cast<size_t>(rows) * dim_, T(0));
    std::vector<T> dk(static_cast<size_t>(rows) * dim_, T(0));
    for (int b = 0; b < bsz; ++b) {
      int fv = ctx.first_valid.empty() ? 0 : ctx.first_valid[b];
      for (int hd = 0; hd < heads_; ++hd) {
        T* drelh = drel.data() + static_cast<size_t>(hd) * max_len_;
        for (int i = 0; i < len; ++i) {
          int lo = i < fv ? i : fv;
          size_t row = (static_cast<size_t>(b) * heads_ + hd) * len + i;
          const T* prow = ctx.probs.data() + row * len;
          const T* dprow = dprobs.data() + row * len;
          // softmax backward: dlogit_j = p_j (dp_j - sum_k p_k dp_k)
          T dot = T(0);
          for (int j = lo; j <= i; ++j) dot += prow[j] * dprow[j];
          const T* qi = ctx.q.data() + (static_cast<size_t>(b) * len + i) * dim_ + hd * dh;
          T* dqi = dq.data() + (static_cast<size_t>(b) * len + i) * dim_ + hd * dh;
          for (int j = lo; j <= i; ++j) {
            T dl = prow[j] * (dprow[j] - dot);
            drelh[i - j] += dl;
            const T* kj = ctx.k.data() + (static_cast<size_t>(b) * len + j) * dim_ + hd * dh;
            T* dkj = dk.data() + (static_cast<size_t>(b) * len + j) * dim_ + hd * dh;
            for (int d = 0; d < dh; ++d) {
              dqi[d] += dl * inv_sqrt * kj[d];
              dkj[d] += dl * inv_sqrt * qi[d];
            }
          }
        }
      }
    }
    std::vector<T> dx = wq_.backward(dq, ctx.qc);
    std::vector<T> dxk = wk_.backward(dk, ctx.kc);
    std::vector<T> dxv = wv_.backward(dv, ctx.vc);
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += dxk[i] + dxv[i];
    return dx;
  }

 private:
  ParamStore<T>* ps_ = nullptr;
  Linear<T> wq_, wk_, wv_, wo_;
  size_t rel_ = 0;
  int dim_ = 0, heads_ = 0, max_len_ = 0;
  Dropout<T> drop_{0.0};
};

// ---------------------------------------------------------------------------
// Pre-norm transformer block: x += drop(attn(ln1(x))); x += drop(mlp(ln2(x)))

template <typename T>
struct BlockCtx {
  LayerNormCtx<T> ln1, ln2;
  MhaCtx<T> mha;
  LinearCtx<T> fc1, fc2;
  GeluCtx<T> gelu;
  DropoutCtx<T> d_attn, d_mlp;
};

template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamStore<T>& ps, const std::string& name, int dim, int heads, int max_len,
                   Rng& rng, double dropout)
      : ln1_(ps, name + ".ln1", dim),
        ln2_(ps, name + ".ln2", dim),
        mha_(ps, name + ".attn", dim, heads, max_len, rng, dropout),
        fc1_(ps, name + ".fc1", dim, 4 * dim, rng),
        fc2_(ps, name + ".fc2", 4 * dim, dim, rng, std::sqrt(1.0 / (4 * dim))),
        drop_(dropout),
        dim_(dim) {}

  std::vector<T> forward(std::vector<T> x, int bsz, int len, const std::vector<int>& first_valid,
                         BlockCtx<T>* ctx, Rng* rng) const {
    int rows = bsz * len;
    auto h = ln1_.forward(x, rows, ctx ? &ctx->ln1 : nullptr);
    h = mha_.forward(h, bsz, len, first_valid, ctx ? &ctx->mha : nullptr, rng);
    h = drop_.forward(h, ctx ? &ctx->d_attn : nullptr, rng);
    for (size_t i = 0; i < x.size(); ++i) x[i] += h[i];
    auto m = ln2_.forward(x, rows, ctx ? &ctx->ln2 : nullptr);
    m = fc1_.forward(m, rows, ctx ? &ctx->fc1 : nullptr);
    m = Gelu<T>::forward(m, ctx ? &ctx->gelu : nullptr);
    m = fc2_.forward(m, rows, ctx ? &ctx->fc2 : nullptr);
    m = drop_.forward(m, ctx ? &ctx->d_mlp : nullptr, rng);
    for (size_t i = 0; i < x.size(); ++i) x[i] += m[i];
    return x;
  }

  std::vector<T> backward(const std::vector<T>& dy, BlockCtx<T>& ctx) {
    auto dm = drop_.backward(dy, ctx.d_mlp);
    dm = fc2_.backward(dm, ctx.fc2);
    dm = Gelu<T>::backward(dm, ctx.gelu);
    dm = fc1_.backward(dm, ctx.fc1);
    dm = ln2_.backward(dm, ctx.ln2);
    std::vector<T> dx(dy.size());
    for (size_t i = 0; i < dx.size(); ++i) dx[i] = dy[i] + dm[i];
    auto da = drop_.backward(dx, ctx.d_attn);
    da = mha_.backward(da, ctx.mha);
    da = ln1_.backward(da, ctx.ln1);
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += da[i];
    return dx;
  }

 private:
  LayerNorm<T> ln1_, ln2_;
  Mha<T> mha_;
  Linear<T> fc1_, fc2_;
  Dropout<T> drop_{0.0};
  int dim_ = 0;
};

// ---------------------------------------------------------------------------
// Gaussian mixture negative log likelihood with diagonal components.
// Gradients are written only when the pointers are non-null.

template <typename T>
inline T gmm_nll(const T* logits, const T* mu, const T* sigma, const T* action, int K, int A,
                 T* dlogits = nullptr, T* dmu = nullptr, T* dsigma = nullptr) {
  constexpr double kLog2Pi = 1.8378770664093454836;
  // z_k = log softmax(logits)_k + sum_d log N(a_d; mu_kd, sigma_kd)
  T lmax = logits[0];
  for (int k = 1; k < K; ++k) lmax = std::max(lmax, logits[k]);
  T lse = T(0);
  for (int k = 0; k < K; ++k) lse += std::exp(logits[k] - lmax);
  lse = lmax + std::log(lse);

  std::vector<T> z(K);
  for (int k = 0; k < K; ++k) {
    T acc = logits[k] - lse;
    for (int d = 0; d < A; ++d) {
      T s = sigma[k * A + d];
      T u = (action[d] - mu[k * A + d]) / s;
      acc += T(-0.5) * u * u - std::log(s) - T(0.5) * T(kLog2Pi);
    }
    z[k] = acc;
  }
  T zmax = z[0];
  for (int k = 1; k < K; ++k) zmax = std::max(zmax, z[k]);
  T zsum = T(0);
  for (int k = 0; k < K; ++k) zsum += std::exp(z[k] - zmax);
  T nll = -(zmax + std::log(zsum));
  if (!std::isfinite(static_cast<double>(nll)))
    throw ContractError("gmm_nll: non-finite loss");

  if (dlogits || dmu || dsigma) {
    for (int k = 0; k < K; ++k) {
      T r = std::exp(z[k] - zmax) / zsum;  // responsibility
      if (dlogits) {
        T alpha = std::exp(logits[k] - lse);
        dlogits[k] += alpha - r;  // d(-lse_z)/dlogit with logsoftmax inside
      }
      for (int d = 0; d < A; ++d) {
        T s = sigma[k * A + d];
        T diff = action[d] - mu[k * A + d];
        if (dmu) dmu[k * A + d] += -r * diff / (s * s);
        if (dsigma) dsigma[k * A + d] += -r * (diff * diff / (s * s * s) - T(1) / s);
      }
    }
  }
  return nll;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and bias correction. Decay is skipped
// for parameters flagged decay=false (biases, norm gains, position biases).

template <typename T>
class AdamW {
 public:
  explicit AdamW(double weight_decay = 0.01) : wd_(weight_decay) {}

  /// One update over every parameter. Returns false (and changes nothing)
  /// if any gradient is non-finite.
  bool step(ParamStore<T>& ps, double lr) {
    if (m_.empty()) {
      m_.resize(ps.size());
      v_.resize(ps.size());
      for (size_t i = 0; i < ps.size(); ++i) {
        m_[i].assign(ps.at(i).numel(), T(0));
        v_[i].assign(ps.at(i).numel(), T(0));
      }
    }
    for (auto& p : ps.items())
      for (T g : p.grad)
        if (!std::isfinite(static_cast<double>(g))) return false;
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < ps.size(); ++i) {
      Param<T>& p = ps.at(i);
      for (size_t j = 0; j < p.numel(); ++j) {
        double g = static_cast<double>(p.grad[j]);
        double m = beta1_ * static_cast<double>(m_[i][j]) + (1.0 - beta1_) * g;
        double v = beta2_ * static_cast<double>(v_[i][j]) + (1.0 - beta2_) * g * g;
        m_[i][j] = static_cast<T>(m);
        v_[i][j] = static_cast<T>(v);
        double update = (m / bc1) / (std::sqrt(v / bc2) + eps_);
        if (p.decay) update += wd_ * static_cast<double>(p.value[j]);
        p.value[j] -= static_cast<T>(lr * update);
      }
    }
    return true;
  }

  long step_count() const { return t_; }
  double weight_decay() const { return wd_; }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, wd_;
  long t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Finite-difference verification

/// Central-difference check of an analytic gradient: for each of the first
/// `max_coords` coordinates (all if 0), perturbs data[i] by ±step, calls the
/// pure-forward loss, and compares against grad[i]. Returns the max relative
/// error with an absolute floor so exact zeros compare clean.
template <typename T>
inline double finite_diff_max_rel_err(T* data, const T* grad, size_t n,
                                      const std::function<T()>& loss, double step = 1e-5,
                                      size_t max_coords = 0) {
  double worst = 0.0;
  size_t count = max_coords == 0 ? n : std::min(n, max_coords);
  for (size_t i = 0; i < count; ++i) {
    T keep = data[i];
    data[i] = keep + static_cast<T>(step);
    double up = static_cast<double>(loss());
    data[i] = keep - static_cast<T>(step);
    double dn = static_cast<double>(loss());
    data[i] = keep;
    double fd = (up - dn) / (2.0 * step);
    double an = static_cast<double>(grad[i]);
    double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
    worst = std::max(worst, err);
  }
  return worst;
}

/// Checks every parameter in the store against finite differences of `loss`
/// (a pure forward pass). `grads` must already hold the analytic gradients.
template <typename T>
inline double grad_check_params(ParamStore<T>& ps, const std::function<T()>& loss,
                                double step = 1e-5, size_t max_coords_per_param = 0) {
  double worst = 0.0;
  for (auto& p : ps.items()) {
    double e = finite_diff_max_rel_err(p.value.data(), p.grad.data(), p.numel(), loss, step,
                                       max_coords_per_param);
    worst = std::max(worst, e);
  }
  return worst;
}

}  // namespace tampi
