#ifndef METACOND_OPTIM_HPP
#define METACOND_OPTIM_HPP

#include <cmath>
#include <vector>

#include "metacond/common.hpp"
#include "metacond/model.hpp"

namespace metacond {

/// Linear warmup to max_lr over the first ceil(warmup_fraction*total) steps,
/// then cosine decay to zero at total_steps. Continuous, peak exactly at the
/// warmup boundary.
inline double lr_at_step(size_t step, size_t total_steps, double max_lr,
                         double warmup_fraction) {
  if (total_steps == 0) return 0.0;
  size_t warmup = static_cast<size_t>(
      std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (warmup == 0) warmup = 1;
  if (step <= warmup)
    return max_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total_steps) return 0.0;
  double progress = static_cast<double>(step - warmup) /
                    static_cast<double>(total_steps - warmup);
  return 0.5 * max_lr * (1.0 + std::cos(3.14159265358979323846 * progress));
}

/// AdamW with decoupled weight decay. Decay touches only parameters flagged
/// decay (2-D weights); moments live alongside in the same precision.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Param<T>>& params, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.95, double eps = 1e-8)
      : weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const auto& p : params) {
      m_.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  size_t step_count() const { return t_; }
  void set_step_count(size_t t) { t_ = t; }
  std::vector<Matrix<T>>& m() { return m_; }
  std::vector<Matrix<T>>& v() { return v_; }

  /// Returns the global gradient L2 norm measured before any clipping.
  double step(std::vector<Param<T>>& params, double lr, double grad_clip = 0.0) {
    double sq_sum = 0.0;
    for (const auto& p : params) sq_sum += static_cast<double>(p.grad.squaredNorm());
    double grad_norm = std::sqrt(sq_sum);
    double scale = 1.0;
    if (grad_clip > 0.0 && grad_norm > grad_clip) scale = grad_clip / grad_norm;

    ++t_;
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    const T bc1 = static_cast<T>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const T bc2 = static_cast<T>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
    for (size_t i = 0; i < params.size(); ++i) {
      Param<T>& p = params[i];
      auto g = (p.grad.array() * static_cast<T>(scale)).eval();
      m_[i].array() = b1 * m_[i].array() + (static_cast<T>(1) - b1) * g;
      v_[i].array() = b2 * v_[i].array() + (static_cast<T>(1) - b2) * g.square();
      auto m_hat = m_[i].array() / bc1;
      auto v_hat = v_[i].array() / bc2;
      p.value.array() -=
          static_cast<T>(lr) * (m_hat / (v_hat.sqrt() + static_cast<T>(eps_)) +
                                (p.decay ? static_cast<T>(weight_decay_) : static_cast<T>(0)) *
                                    p.value.array());
    }
    return grad_norm;
  }

 private:
  double weight_decay_, beta1_, beta2_, eps_;
  size_t t_ = 0;
  std::vector<Matrix<T>> m_, v_;
};

}  // namespace metacond

#endif  // METACOND_OPTIM_HPP
