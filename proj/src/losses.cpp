#include "hdp/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hdp/detector.hpp"
#include "hdp/error.hpp"

namespace hdp::loss {
namespace {

void check_pair(std::size_t a, std::size_t b) {
  require(a == b, ErrorKind::kLengthMismatch,
          "probabilities and labels differ in length (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
  require(a > 0, ErrorKind::kEmptyBatch, "loss over an empty batch");
}

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

/// log-likelihood term for one sample; shared by bce and pseudo_entropy so
/// the two agree exactly on all-fake labels.
double log_likelihood(double p, int y) { return y == 1 ? std::log(clamp_prob(p)) : std::log(1.0 - clamp_prob(p)); }

double dlog_likelihood(double p, int y) {
  if (p <= kProbClamp || p >= 1.0 - kProbClamp) return 0.0;
  return y == 1 ? 1.0 / p : -1.0 / (1.0 - p);
}

void check_features(std::size_t a, std::size_t b, int dim) {
  require(dim > 0, ErrorKind::kShapeMismatch, "feature dimension must be positive");
  require(a == b && a % static_cast<std::size_t>(dim) == 0, ErrorKind::kShapeMismatch,
          "feature batches differ in shape");
  require(a > 0, ErrorKind::kEmptyBatch, "feature distance over an empty batch");
}

}  // namespace

template <typename T>
double bce(std::span<const T> probs, std::span<const int> labels) {
  check_pair(probs.size(), labels.size());
  double acc = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) acc += log_likelihood(static_cast<double>(probs[i]), labels[i]);
  return -acc / static_cast<double>(probs.size());
}

template <typename T>
std::vector<double> bce_grad(std::span<const T> probs, std::span<const int> labels) {
  check_pair(probs.size(), labels.size());
  const double n = static_cast<double>(probs.size());
  std::vector<double> g(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) g[i] = -dlog_likelihood(static_cast<double>(probs[i]), labels[i]) / n;
  return g;
}

template <typename T>
std::vector<T> bce_logit_grad(std::span<const T> logits, std::span<const int> labels) {
  check_pair(logits.size(), labels.size());
  const T n = static_cast<T>(logits.size());
  std::vector<T> g(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) g[i] = (sigmoid(logits[i]) - static_cast<T>(labels[i])) / n;
  return g;
}

template <typename T>
double pseudo_entropy(std::span<const T> probs) {
  require(!probs.empty(), ErrorKind::kEmptyBatch, "entropy over an empty batch");
  double acc = 0;
  for (T p : probs) acc += log_likelihood(static_cast<double>(p), 1);
  return -acc / static_cast<double>(probs.size());
}

template <typename T>
std::vector<double> pseudo_entropy_grad(std::span<const T> probs) {
  require(!probs.empty(), ErrorKind::kEmptyBatch, "entropy over an empty batch");
  const double n = static_cast<double>(probs.size());
  std::vector<double> g(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) g[i] = -dlog_likelihood(static_cast<double>(probs[i]), 1) / n;
  return g;
}

template <typename T>
std::vector<T> pseudo_entropy_logit_grad(std::span<const T> logits) {
  require(!logits.empty(), ErrorKind::kEmptyBatch, "entropy over an empty batch");
  const T n = static_cast<T>(logits.size());
  std::vector<T> g(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) g[i] = (sigmoid(logits[i]) - T(1)) / n;
  return g;
}

template <typename T>
double feat_mse(std::span<const T> a, std::span<const T> b, int dim, FeatureDistance mode) {
  check_features(a.size(), b.size(), dim);
  const std::size_t n = a.size() / static_cast<std::size_t>(dim);
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  double out = acc / static_cast<double>(n);
  if (mode == FeatureDistance::kElementMse) out /= dim;
  return out;
}

template <typename T>
std::vector<T> feat_mse_grad(std::span<const T> a, std::span<const T> b, int dim, FeatureDistance mode) {
  check_features(a.size(), b.size(), dim);
  const std::size_t n = a.size() / static_cast<std::size_t>(dim);
  double scale = 2.0 / static_cast<double>(n);
  if (mode == FeatureDistance::kElementMse) scale /= dim;
  std::vector<T> g(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = static_cast<T>(scale * (static_cast<double>(a[i]) - b[i]));
  return g;
}

LossBreakdown total_loss(double ce, double pseudo_entropy, double distill_real, double distill_pseudo, double beta) {
  for (double v : {ce, pseudo_entropy, distill_real, distill_pseudo, beta})
    require(std::isfinite(v), ErrorKind::kNonFinite, "non-finite loss component");
  require(beta >= 0, ErrorKind::kInvalidArgument, "beta must be non-negative");
  LossBreakdown out{ce, pseudo_entropy, distill_real, distill_pseudo, beta, 0};
  out.total = ce + pseudo_entropy + beta * (distill_real + distill_pseudo);
  return out;
}

#define HDP_INSTANTIATE(T)                                                                          \
  template double bce<T>(std::span<const T>, std::span<const int>);                                 \
  template std::vector<double> bce_grad<T>(std::span<const T>, std::span<const int>);               \
  template std::vector<T> bce_logit_grad<T>(std::span<const T>, std::span<const int>);              \
  template double pseudo_entropy<T>(std::span<const T>);                                            \
  template std::vector<double> pseudo_entropy_grad<T>(std::span<const T>);                          \
  template std::vector<T> pseudo_entropy_logit_grad<T>(std::span<const T>);                         \
  template double feat_mse<T>(std::span<const T>, std::span<const T>, int, FeatureDistance);        \
  template std::vector<T> feat_mse_grad<T>(std::span<const T>, std::span<const T>, int, FeatureDistance);

HDP_INSTANTIATE(float)
HDP_INSTANTIATE(double)
#undef HDP_INSTANTIATE

}  // namespace hdp::loss
