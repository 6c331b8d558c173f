#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hdp/image.hpp"

namespace hdp {

/// Activations recorded by a forward pass and consumed by backward().
/// The layout of `buffers` is private to the extractor that produced it.
template <typename T>
struct Tape {
  int batch = 0;
  std::vector<std::vector<T>> buffers;
};

/// Feature extractor g: image -> R^d. Extractors are stateless descriptions
/// of an architecture; parameters live in the owning Detector so that
/// copying, freezing and checkpointing work on one flat vector.
template <typename T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;

  virtual std::string arch_id() const = 0;
  virtual Shape input_shape() const = 0;
  virtual int feature_dim() const = 0;
  virtual std::size_t param_count() const = 0;
  virtual void init_params(std::span<T> params, std::uint64_t seed) const = 0;

  /// input: n images NCHW; features: n x d row-major. `tape` may be null.
  virtual void forward(std::span<const T> params, std::span<const T> input, int n, std::span<T> features,
                       Tape<T>* tape) const = 0;

  /// Accumulates into dparams and writes dinput (n x C x H x W). Either
  /// output span may be empty to skip that gradient.
  virtual void backward(std::span<const T> params, const Tape<T>& tape, std::span<const T> dfeatures,
                        std::span<T> dparams, std::span<T> dinput) const = 0;
};

/// Widths of the reference extractor: three [conv3x3 -> ReLU -> avgpool2]
/// blocks followed by global average pooling.
struct ConvNetConfig {
  Shape input;
  std::vector<int> widths{16, 32, 64};
};

template <typename T>
std::shared_ptr<const FeatureExtractor<T>> make_convnet(ConvNetConfig cfg);

/// Identity extractor (features are the flattened pixels). Paired with the
/// linear head this is a logistic-regression probe.
template <typename T>
std::shared_ptr<const FeatureExtractor<T>> make_linear_probe(Shape input);

/// Rebuilds an extractor from its arch_id ("convnet-16-32-64", "linear").
template <typename T>
std::shared_ptr<const FeatureExtractor<T>> make_extractor(const std::string& arch_id, Shape input);

/// Binary real/fake detector f = sigmoid(head(g(x))). All parameters sit in
/// one flat vector: extractor parameters first, then d head weights and the
/// head bias.
template <typename T>
class Detector {
 public:
  struct Pass {
    int batch = 0;
    std::vector<T> features;  // batch x d
    std::vector<T> logits;    // batch
    Tape<T> tape;
  };

  Detector(std::shared_ptr<const FeatureExtractor<T>> extractor, std::uint64_t init_seed);

  const FeatureExtractor<T>& extractor() const { return *extractor_; }
  std::shared_ptr<const FeatureExtractor<T>> extractor_ptr() const { return extractor_; }
  std::string arch_id() const { return extractor_->arch_id(); }
  Shape input_shape() const { return extractor_->input_shape(); }
  int feature_dim() const { return extractor_->feature_dim(); }

  std::span<const T> params() const { return params_; }
  /// Mutable access; raises FrozenModel on a frozen clone.
  std::span<T> mutable_params();
  std::span<const T> head_weights() const;
  T head_bias() const { return params_.back(); }
  void set_head(std::span<const T> weights, T bias);

  bool frozen() const { return frozen_; }
  /// Deep copy that rejects every later parameter update.
  Detector clone_frozen() const;

  int creation_stage() const { return creation_stage_; }
  void set_creation_stage(int stage) { creation_stage_ = stage; }

  /// Full forward. `record` keeps the tape needed by backward().
  Pass forward(std::span<const T> batch, bool record = false) const;
  std::vector<T> forward_prob(std::span<const T> batch) const;
  /// 1 iff P(fake) >= 0.5; ties go to fake.
  std::vector<int> predict(std::span<const T> batch) const;
  std::vector<T> features(std::span<const T> batch) const;

  /// Backpropagates dL/dlogit (per sample) and dL/dfeature (batch x d, may
  /// be empty) through a recorded pass. dparams is accumulated, dinput is
  /// overwritten; empty spans are skipped.
  void backward(const Pass& pass, std::span<const T> dlogits, std::span<const T> dfeatures, std::span<T> dparams,
                std::span<T> dinput) const;

  int batch_size_of(std::span<const T> batch) const;

 private:
  std::shared_ptr<const FeatureExtractor<T>> extractor_;
  std::vector<T> params_;
  bool frozen_ = false;
  int creation_stage_ = 0;
};

template <typename T>
T sigmoid(T z);

extern template class Detector<float>;
extern template class Detector<double>;

using Model = Detector<float>;

}  // namespace hdp
