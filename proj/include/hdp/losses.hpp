#pragma once

#include <span>
#include <vector>

namespace hdp::loss {

/// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] before logs.
inline constexpr double kProbClamp = 1e-7;

/// Distance used by the two feature-distillation terms.
enum class FeatureDistance {
  kSquaredL2,   // mean over the batch of ||a_i - b_i||^2
  kElementMse,  // same, additionally divided by the feature dimension
};

struct LossBreakdown {
  double ce = 0;
  double pseudo_entropy = 0;
  double distill_real = 0;
  double distill_pseudo = 0;
  double beta = 0;
  double total = 0;
};

/// Binary cross entropy, -mean[y log p + (1-y) log(1-p)].
template <typename T>
double bce(std::span<const T> probs, std::span<const int> labels);

/// d bce / d probs (zero where the clamp is active).
template <typename T>
std::vector<double> bce_grad(std::span<const T> probs, std::span<const int> labels);

/// d bce(sigmoid(z)) / dz = (sigmoid(z) - y) / n, the unclamped derivative
/// used for training so saturated mistakes still receive gradient.
template <typename T>
std::vector<T> bce_logit_grad(std::span<const T> logits, std::span<const int> labels);

/// Entropy of a batch against the fake label: -mean[log p].
template <typename T>
double pseudo_entropy(std::span<const T> probs);

template <typename T>
std::vector<double> pseudo_entropy_grad(std::span<const T> probs);

template <typename T>
std::vector<T> pseudo_entropy_logit_grad(std::span<const T> logits);

/// Batch-mean feature distance between two row-major (n x dim) batches.
template <typename T>
double feat_mse(std::span<const T> a, std::span<const T> b, int dim,
                FeatureDistance mode = FeatureDistance::kSquaredL2);

/// Gradient of feat_mse with respect to `a`.
template <typename T>
std::vector<T> feat_mse_grad(std::span<const T> a, std::span<const T> b, int dim,
                             FeatureDistance mode = FeatureDistance::kSquaredL2);

/// total = ce + E + beta * (l_r + l_p).
LossBreakdown total_loss(double ce, double pseudo_entropy, double distill_real, double distill_pseudo, double beta);

}  // namespace hdp::loss
