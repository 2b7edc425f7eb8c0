#ifndef METACOND_MODEL_HPP
#define METACOND_MODEL_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "metacond/common.hpp"
#include "metacond/tokenizer.hpp"

namespace metacond {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

enum class Precision { f32, f64 };

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = 1024;
  int max_seq_len = 512;
  Precision precision = Precision::f32;

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 ||
        max_seq_len < 1)
      throw UsageError("model config: all dimensions must be positive");
    if (d_model % n_heads != 0)
      throw UsageError("model config: d_model must be divisible by n_heads");
  }

  size_t parameter_count() const {
    size_t d = static_cast<size_t>(d_model), v = static_cast<size_t>(vocab_size);
    size_t per_layer = 4 * d * d + 2 * d * static_cast<size_t>(d_ff) + 4 * d;
    return v * d + static_cast<size_t>(max_seq_len) * d +
           static_cast<size_t>(n_layers) * per_layer + 2 * d + v * d;
  }
};

namespace nn {

constexpr double kLnEps = 1e-5;

template <typename T>
inline T gelu(T x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T a = static_cast<T>(0.044715);
  return static_cast<T>(0.5) * x * (static_cast<T>(1) + std::tanh(c * (x + a * x * x * x)));
}

template <typename T>
inline T gelu_grad(T x) {
  const T c = static_cast<T>(0.7978845608028654);
  const T a = static_cast<T>(0.044715);
  T u = c * (x + a * x * x * x);
  T th = std::tanh(u);
  T sech2 = static_cast<T>(1) - th * th;
  return static_cast<T>(0.5) * (static_cast<T>(1) + th) +
         static_cast<T>(0.5) * x * sech2 * c * (static_cast<T>(1) + static_cast<T>(3) * a * x * x);
}

}  // namespace nn

/// One named parameter tensor with its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool decay = false;  // weight decay applies to 2-D weights only

  void init_zero_grad() { grad = Matrix<T>::Zero(value.rows(), value.cols()); }
};

struct CaptureFlags {
  bool hidden_states = false;
  bool attention = false;
};

/// Per-layer captures from one forward pass. hidden[l] is the residual
/// stream after block l ([B*L, d]); attention[l] holds softmax probabilities
/// as n_heads*B stacked LxL blocks, block index b*n_heads + h.
template <typename T>
struct Capture {
  std::vector<Matrix<T>> hidden;
  std::vector<Matrix<T>> attention;
};

template <typename T>
struct MaskedLossResult {
  T backprop_loss = 0;
  T report_loss = 0;
  size_t backprop_targets = 0;
  size_t report_targets = 0;
};

/// Mean cross-entropy over each mask's true targets. If dlogits is non-null
/// it receives the gradient of backprop_loss; rows of backprop-masked
/// targets stay exactly zero, so their labels cannot influence any gradient.
template <typename T>
MaskedLossResult<T> masked_loss(const Matrix<T>& logits, const std::vector<TokenId>& targets,
                                const std::vector<uint8_t>& backprop_mask,
                                const std::vector<uint8_t>& report_mask,
                                Matrix<T>* dlogits = nullptr) {
  const auto n = static_cast<size_t>(logits.rows());
  if (targets.size() != n || backprop_mask.size() != n || report_mask.size() != n)
    throw UsageError("masked_loss: shape mismatch");
  size_t n_bp = 0, n_rp = 0;
  for (size_t i = 0; i < n; ++i) {
    n_bp += backprop_mask[i] ? 1 : 0;
    n_rp += report_mask[i] ? 1 : 0;
  }
  if (n_bp == 0) throw NumericError("masked_loss: batch has no backprop targets");
  if (dlogits) *dlogits = Matrix<T>::Zero(logits.rows(), logits.cols());

  T bp_sum = 0, rp_sum = 0;
  RowVec<T> probs(logits.cols());
  for (size_t i = 0; i < n; ++i) {
    if (!backprop_mask[i] && !report_mask[i]) continue;
    const auto row = logits.row(static_cast<Eigen::Index>(i));
    T mx = row.maxCoeff();
    probs = (row.array() - mx).exp();
    T z = probs.sum();
    T log_z = std::log(z) + mx;
    T nll = log_z - row(static_cast<Eigen::Index>(targets[i]));
    if (backprop_mask[i]) {
      bp_sum += nll;
      if (dlogits) {
        auto out = dlogits->row(static_cast<Eigen::Index>(i));
        out = probs / z / static_cast<T>(n_bp);
        out(static_cast<Eigen::Index>(targets[i])) -= static_cast<T>(1) / static_cast<T>(n_bp);
      }
    }
    if (report_mask[i]) rp_sum += nll;
  }
  MaskedLossResult<T> result;
  result.backprop_loss = bp_sum / static_cast<T>(n_bp);
  result.report_loss =
      n_rp ? rp_sum / static_cast<T>(n_rp) : std::numeric_limits<T>::quiet_NaN();
  result.backprop_targets = n_bp;
  result.report_targets = n_rp;
  return result;
}

/// Decoder-only pre-norm transformer with learned absolute positions, GELU
/// MLP and an untied output head. Forward caches every activation needed for
/// an exact manual backward pass; capture switches additionally materialize
/// hidden states and attention maps for analysis passes.
template <typename T>
class MicroLM {
 public:
  MicroLM(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    cfg_.precision = std::is_same_v<T, double> ? Precision::f64 : Precision::f32;
    build_params();
    init_params(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Param<T>>& params() { return params_; }
  const std::vector<Param<T>>& params() const { return params_; }

  size_t parameter_count() const {
    size_t n = 0;
    for (const auto& p : params_) n += static_cast<size_t>(p.value.size());
    return n;
  }

  uint64_t checksum() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& p : params_) {
      const char* bytes = reinterpret_cast<const char*>(p.value.data());
      size_t len = static_cast<size_t>(p.value.size()) * sizeof(T);
      h = splitmix64(h ^ fnv1a64_bytes(bytes, len));
    }
    return h;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  /// tokens is row-major [B, L] flattened. Returns logits [B*L, vocab].
  const Matrix<T>& forward(const std::vector<TokenId>& tokens, int batch, int len,
                           Capture<T>* capture = nullptr,
                           CaptureFlags flags = {}) {
    if (batch < 1 || len < 1 || tokens.size() != static_cast<size_t>(batch) * len)
      throw UsageError("forward: tokens shape mismatch");
    if (len > cfg_.max_seq_len) throw UsageError("forward: sequence longer than max_seq_len");
    for (TokenId id : tokens)
      if (id >= static_cast<TokenId>(cfg_.vocab_size))
        throw DataError("forward: token id out of range");

    B_ = batch;
    L_ = len;
    tokens_ = tokens;
    const int d = cfg_.d_model, n_rows = B_ * L_;

    if (capture) {
      capture->hidden.clear();
      capture->attention.clear();
    }

    acts_.x.resize(cfg_.n_layers + 1);
    acts_.x[0].resize(n_rows, d);
    for (int b = 0; b < B_; ++b)
      for (int t = 0; t < L_; ++t)
        acts_.x[0].row(b * L_ + t) = tok_emb().value.row(tokens_[b * L_ + t]) +
                                     pos_emb().value.row(t);

    acts_.ln1_hat.resize(cfg_.n_layers);
    acts_.ln1_rstd.resize(cfg_.n_layers);
    acts_.ln1_out.resize(cfg_.n_layers);
    acts_.q.resize(cfg_.n_layers);
    acts_.k.resize(cfg_.n_layers);
    acts_.v.resize(cfg_.n_layers);
    acts_.att.resize(cfg_.n_layers);
    acts_.att_mix.resize(cfg_.n_layers);
    acts_.x_mid.resize(cfg_.n_layers);
    acts_.ln2_hat.resize(cfg_.n_layers);
    acts_.ln2_rstd.resize(cfg_.n_layers);
    acts_.ln2_out.resize(cfg_.n_layers);
    acts_.mlp_pre.resize(cfg_.n_layers);
    acts_.mlp_act.resize(cfg_.n_layers);

    for (int l = 0; l < cfg_.n_layers; ++l) {
      layer_forward(l);
      if (capture && flags.hidden_states) capture->hidden.push_back(acts_.x[l + 1]);
      if (capture && flags.attention) capture->attention.push_back(acts_.att[l]);
    }

    layer_norm(acts_.x[cfg_.n_layers], lnf_gamma().value, lnf_beta().value, acts_.lnf_hat,
               acts_.lnf_rstd, acts_.lnf_out);
    logits_.noalias() = acts_.lnf_out * head().value.transpose();
    return logits_;
  }

  /// Backward from dlogits (same shape as logits); accumulates into grads.
  void backward(const Matrix<T>& dlogits) {
    if (dlogits.rows() != logits_.rows() || dlogits.cols() != logits_.cols())
      throw UsageError("backward: dlogits shape mismatch");
    const int d = cfg_.d_model, n_rows = B_ * L_;

    head().grad.noalias() += dlogits.transpose() * acts_.lnf_out;
    Matrix<T> dlnf_out = dlogits * head().value;
    Matrix<T> dx(n_rows, d);
    layer_norm_backward(dlnf_out, acts_.lnf_hat, acts_.lnf_rstd, lnf_gamma(), lnf_beta(), dx);

    for (int l = cfg_.n_layers - 1; l >= 0; --l) layer_backward(l, dx);

    for (int b = 0; b < B_; ++b)
      for (int t = 0; t < L_; ++t) {
        tok_emb().grad.row(tokens_[b * L_ + t]) += dx.row(b * L_ + t);
        pos_emb().grad.row(t) += dx.row(b * L_ + t);
      }
  }

  const Matrix<T>& logits() const { return logits_; }

  // Named accessors follow the declared parameter order used by checkpoints.
  Param<T>& tok_emb() { return params_[0]; }
  Param<T>& pos_emb() { return params_[1]; }
  Param<T>& layer_param(int l, int i) { return params_[2 + l * 10 + i]; }
  Param<T>& lnf_gamma() { return params_[2 + cfg_.n_layers * 10]; }
  Param<T>& lnf_beta() { return params_[3 + cfg_.n_layers * 10]; }
  Param<T>& head() { return params_[4 + cfg_.n_layers * 10]; }

 private:
  // Layer parameter slots: 0 ln1_g, 1 ln1_b, 2 wq, 3 wk, 4 wv, 5 wo,
  // 6 ln2_g, 7 ln2_b, 8 fc1, 9 fc2.
  void build_params() {
    const int d = cfg_.d_model, dff = cfg_.d_ff, v = cfg_.vocab_size;
    auto add = [&](const std::string& name, int rows, int cols, bool decay) {
      Param<T> p;
      p.name = name;
      p.value = Matrix<T>::Zero(rows, cols);
      p.decay = decay;
      p.init_zero_grad();
      params_.push_back(std::move(p));
    };
    add("tok_emb", v, d, true);
    add("pos_emb", cfg_.max_seq_len, d, true);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::string prefix = "layer" + std::to_string(l) + ".";
      add(prefix + "ln1_gamma", 1, d, false);
      add(prefix + "ln1_beta", 1, d, false);
      add(prefix + "wq", d, d, true);
      add(prefix + "wk", d, d, true);
      add(prefix + "wv", d, d, true);
      add(prefix + "wo", d, d, true);
      add(prefix + "ln2_gamma", 1, d, false);
      add(prefix + "ln2_beta", 1, d, false);
      add(prefix + "fc1", dff, d, true);
      add(prefix + "fc2", d, dff, true);
    }
    add("lnf_gamma", 1, cfg_.d_model, false);
    add("lnf_beta", 1, cfg_.d_model, false);
    add("head", v, d, true);
  }

  // N(0, 0.02^2) everywhere, residual output projections (wo, fc2) scaled by
  // 1/sqrt(2*n_layers), norm gains at 1.
  void init_params(uint64_t seed) {
    const T base_std = static_cast<T>(0.02);
    const T resid_std = base_std / std::sqrt(static_cast<T>(2 * cfg_.n_layers));
    for (size_t i = 0; i < params_.size(); ++i) {
      Param<T>& p = params_[i];
      Rng rng(derive_seed(seed, "model/init", i));
      bool is_gamma = p.name.ends_with("gamma");
      bool is_beta = p.name.ends_with("beta");
      bool is_resid = p.name.ends_with("wo") || p.name.ends_with("fc2");
      T std_dev = is_resid ? resid_std : base_std;
      for (Eigen::Index r = 0; r < p.value.rows(); ++r)
        for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
          if (is_gamma) p.value(r, c) = static_cast<T>(1);
          else if (is_beta) p.value(r, c) = static_cast<T>(0);
          else p.value(r, c) = static_cast<T>(rng.next_normal()) * std_dev;
        }
    }
  }

  void layer_norm(const Matrix<T>& x, const Matrix<T>& gamma, const Matrix<T>& beta,
                  Matrix<T>& hat, Matrix<T>& rstd, Matrix<T>& out) {
    const Eigen::Index n = x.rows(), d = x.cols();
    hat.resize(n, d);
    rstd.resize(n, 1);
    out.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      T mu = x.row(i).mean();
      T var = (x.row(i).array() - mu).square().mean();
      T r = static_cast<T>(1) / std::sqrt(var + static_cast<T>(nn::kLnEps));
      rstd(i, 0) = r;
      hat.row(i) = (x.row(i).array() - mu) * r;
      out.row(i) = hat.row(i).cwiseProduct(gamma.row(0)) + beta.row(0);
    }
  }

  void layer_norm_backward(const Matrix<T>& dout, const Matrix<T>& hat, const Matrix<T>& rstd,
                           Param<T>& gamma, Param<T>& beta, Matrix<T>& dx) {
    const Eigen::Index n = dout.rows(), d = dout.cols();
    dx.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      gamma.grad.row(0) += dout.row(i).cwiseProduct(hat.row(i));
      beta.grad.row(0) += dout.row(i);
      RowVec<T> dhat = dout.row(i).cwiseProduct(gamma.value.row(0));
      T m1 = dhat.mean();
      T m2 = dhat.cwiseProduct(hat.row(i)).mean();
      dx.row(i) = (dhat.array() - m1 - hat.row(i).array() * m2) * rstd(i, 0);
    }
  }

  void layer_forward(int l) {
    const int d = cfg_.d_model, nh = cfg_.n_heads, dh = d / nh, n_rows = B_ * L_;
    const T scale = static_cast<T>(1) / std::sqrt(static_cast<T>(dh));
    const Matrix<T>& x = acts_.x[l];

    layer_norm(x, layer_param(l, 0).value, layer_param(l, 1).value, acts_.ln1_hat[l],
               acts_.ln1_rstd[l], acts_.ln1_out[l]);
    acts_.q[l].noalias() = acts_.ln1_out[l] * layer_param(l, 2).value.transpose();
    acts_.k[l].noalias() = acts_.ln1_out[l] * layer_param(l, 3).value.transpose();
    acts_.v[l].noalias() = acts_.ln1_out[l] * layer_param(l, 4).value.transpose();

    acts_.att[l].resize(static_cast<Eigen::Index>(B_) * nh * L_, L_);
    acts_.att_mix[l].resize(n_rows, d);
    Matrix<T> scores(L_, L_);
    for (int b = 0; b < B_; ++b) {
      for (int h = 0; h < nh; ++h) {
        auto q = acts_.q[l].block(b * L_, h * dh, L_, dh);
        auto k = acts_.k[l].block(b * L_, h * dh, L_, dh);
        auto v = acts_.v[l].block(b * L_, h * dh, L_, dh);
        auto p = acts_.att[l].block((b * nh + h) * L_, 0, L_, L_);
        scores.noalias() = q * k.transpose() * scale;
        for (int i = 0; i < L_; ++i) {
          auto row = scores.row(i).head(i + 1);
          T mx = row.maxCoeff();
          p.row(i).setZero();
          p.row(i).head(i + 1) = (row.array() - mx).exp();
          p.row(i).head(i + 1) /= p.row(i).head(i + 1).sum();
        }
        acts_.att_mix[l].block(b * L_, h * dh, L_, dh).noalias() = p * v;
      }
    }

    acts_.x_mid[l].noalias() = acts_.att_mix[l] * layer_param(l, 5).value.transpose();
    acts_.x_mid[l] += x;

    layer_norm(acts_.x_mid[l], layer_param(l, 6).value, layer_param(l, 7).value,
               acts_.ln2_hat[l], acts_.ln2_rstd[l], acts_.ln2_out[l]);
    acts_.mlp_pre[l].noalias() = acts_.ln2_out[l] * layer_param(l, 8).value.transpose();
    acts_.mlp_act[l] = acts_.mlp_pre[l].unaryExpr([](T v) { return nn::gelu(v); });
    acts_.x[l + 1].noalias() = acts_.mlp_act[l] * layer_param(l, 9).value.transpose();
    acts_.x[l + 1] += acts_.x_mid[l];
  }

  // dx carries d(loss)/d(block output) in, d(loss)/d(block input) out.
  void layer_backward(int l, Matrix<T>& dx) {
    const int d = cfg_.d_model, nh = cfg_.n_heads, dh = d / nh, n_rows = B_ * L_;
    const T scale = static_cast<T>(1) / std::sqrt(static_cast<T>(dh));

    // MLP branch: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid))))
    layer_param(l, 9).grad.noalias() += dx.transpose() * acts_.mlp_act[l];
    Matrix<T> dact = dx * layer_param(l, 9).value;
    Matrix<T> dpre =
        dact.cwiseProduct(acts_.mlp_pre[l].unaryExpr([](T v) { return nn::gelu_grad(v); }));
    layer_param(l, 8).grad.noalias() += dpre.transpose() * acts_.ln2_out[l];
    Matrix<T> dln2_out = dpre * layer_param(l, 8).value;
    Matrix<T> dx_mid(n_rows, d);
    layer_norm_backward(dln2_out, acts_.ln2_hat[l], acts_.ln2_rstd[l], layer_param(l, 6),
                        layer_param(l, 7), dx_mid);
    dx_mid += dx;  // residual

    // Attention branch: x_mid = x + wo(attn(ln1(x)))
    layer_param(l, 5).grad.noalias() += dx_mid.transpose() * acts_.att_mix[l];
    Matrix<T> datt_mix = dx_mid * layer_param(l, 5).value;

    Matrix<T> dq(n_rows, d), dk(n_rows, d), dv(n_rows, d);
    Matrix<T> dp(L_, L_), ds(L_, L_);
    for (int b = 0; b < B_; ++b) {
      for (int h = 0; h < nh; ++h) {
        auto q = acts_.q[l].block(b * L_, h * dh, L_, dh);
        auto k = acts_.k[l].block(b * L_, h * dh, L_, dh);
        auto v = acts_.v[l].block(b * L_, h * dh, L_, dh);
        auto p = acts_.att[l].block((b * nh + h) * L_, 0, L_, L_);
        auto dmix = datt_mix.block(b * L_, h * dh, L_, dh);
        dp.noalias() = dmix * v.transpose();
        dv.block(b * L_, h * dh, L_, dh).noalias() = p.transpose() * dmix;
        for (int i = 0; i < L_; ++i) {
          auto p_row = p.row(i).head(i + 1);
          auto dp_row = dp.row(i).head(i + 1);
          T dot = p_row.cwiseProduct(dp_row).sum();
          ds.row(i).setZero();
          ds.row(i).head(i + 1) = (p_row.array() * (dp_row.array() - dot)).matrix() * scale;
        }
        dq.block(b * L_, h * dh, L_, dh).noalias() = ds * k;
        dk.block(b * L_, h * dh, L_, dh).noalias() = ds.transpose() * q;
      }
    }

    layer_param(l, 2).grad.noalias() += dq.transpose() * acts_.ln1_out[l];
    layer_param(l, 3).grad.noalias() += dk.transpose() * acts_.ln1_out[l];
    layer_param(l, 4).grad.noalias() += dv.transpose() * acts_.ln1_out[l];
    Matrix<T> dln1_out = dq * layer_param(l, 2).value;
    dln1_out.noalias() += dk * layer_param(l, 3).value;
    dln1_out.noalias() += dv * layer_param(l, 4).value;
    layer_norm_backward(dln1_out, acts_.ln1_hat[l], acts_.ln1_rstd[l], layer_param(l, 0),
                        layer_param(l, 1), dx);
    dx += dx_mid;  // residual into block input
  }

  struct Activations {
    std::vector<Matrix<T>> x;  // residual stream per layer boundary
    std::vector<Matrix<T>> ln1_hat, ln1_rstd, ln1_out;
    std::vector<Matrix<T>> q, k, v, att, att_mix;
    std::vector<Matrix<T>> x_mid;
    std::vector<Matrix<T>> ln2_hat, ln2_rstd, ln2_out;
    std::vector<Matrix<T>> mlp_pre, mlp_act;
    Matrix<T> lnf_hat, lnf_rstd, lnf_out;
  };

  ModelConfig cfg_;
  std::vector<Param<T>> params_;
  Activations acts_;
  Matrix<T> logits_;
  std::vector<TokenId> tokens_;
  int B_ = 0, L_ = 0;
};

}  // namespace metacond

#endif  // METACOND_MODEL_HPP
