#include "hdp/detector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "hdp/error.hpp"
#include "hdp/random.hpp"

namespace hdp {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct LayerDims {
  int cin, cout, h, w;  // spatial size at the conv input (same padding)
  std::size_t weight_offset, bias_offset;
  int k() const { return cin * 9; }
};

template <typename T>
class ConvNet final : public FeatureExtractor<T> {
 public:
  explicit ConvNet(ConvNetConfig cfg) : cfg_(std::move(cfg)) {
    require(!cfg_.widths.empty(), ErrorKind::kInvalidArgument, "convnet needs at least one block");
    const int div = 1 << cfg_.widths.size();
    require(cfg_.input.height % div == 0 && cfg_.input.width % div == 0, ErrorKind::kInvalidArgument,
            "input height/width must be divisible by 2^blocks");
    int cin = cfg_.input.channels, h = cfg_.input.height, w = cfg_.input.width;
    std::size_t off = 0;
    for (int cout : cfg_.widths) {
      LayerDims l{cin, cout, h, w, off, 0};
      off += static_cast<std::size_t>(cout) * l.k();
      l.bias_offset = off;
      off += static_cast<std::size_t>(cout);
      layers_.push_back(l);
      cin = cout;
      h /= 2;
      w /= 2;
    }
    param_count_ = off;
    final_spatial_ = h * w;
  }

  std::string arch_id() const override {
    std::string id = "convnet";
    for (int wdt : cfg_.widths) id += "-" + std::to_string(wdt);
    return id;
  }
  Shape input_shape() const override { return cfg_.input; }
  int feature_dim() const override { return cfg_.widths.back(); }
  std::size_t param_count() const override { return param_count_; }

  void init_params(std::span<T> params, std::uint64_t seed) const override {
    Rng rng(hash_seed({seed, 0xc0471ULL}));
    std::fill(params.begin(), params.end(), T(0));
    for (const auto& l : layers_) {
      const double stddev = std::sqrt(2.0 / l.k());
      const std::size_t nw = static_cast<std::size_t>(l.cout) * l.k();
      for (std::size_t i = 0; i < nw; ++i) params[l.weight_offset + i] = static_cast<T>(stddev * rng.normal());
    }
  }

  void forward(std::span<const T> params, std::span<const T> input, int n, std::span<T> features,
               Tape<T>* tape) const override {
    const Shape s = cfg_.input;
    const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
    // NCHW -> CNHW
    std::vector<T> act(input.size());
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < s.channels; ++c)
        std::copy_n(input.data() + (static_cast<std::size_t>(b) * s.channels + c) * plane, plane,
                    act.data() + (static_cast<std::size_t>(c) * n + b) * plane);

    if (tape) {
      tape->batch = n;
      tape->buffers.assign(2 * layers_.size(), {});
    }
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const auto& l = layers_[li];
      const std::size_t cols_n = static_cast<std::size_t>(n) * l.h * l.w;
      std::vector<T> cols(static_cast<std::size_t>(l.k()) * cols_n);
      im2col(act, l, n, cols);
      std::vector<T> z(static_cast<std::size_t>(l.cout) * cols_n);
      ConstMapMat<T> wmat(params.data() + l.weight_offset, l.cout, l.k());
      ConstMapMat<T> cmat(cols.data(), l.k(), static_cast<Eigen::Index>(cols_n));
      MapMat<T> zmat(z.data(), l.cout, static_cast<Eigen::Index>(cols_n));
      zmat.noalias() = wmat * cmat;
      for (int co = 0; co < l.cout; ++co) zmat.row(co).array() += params[l.bias_offset + co];

      // ReLU + 2x2 average pool.
      const int ho = l.h / 2, wo = l.w / 2;
      std::vector<T> pooled(static_cast<std::size_t>(l.cout) * n * ho * wo);
      for (int c = 0; c < l.cout; ++c)
        for (int b = 0; b < n; ++b) {
          const T* src = z.data() + ((static_cast<std::size_t>(c) * n + b) * l.h) * l.w;
          T* dst = pooled.data() + ((static_cast<std::size_t>(c) * n + b) * ho) * wo;
          for (int y = 0; y < ho; ++y)
            for (int x = 0; x < wo; ++x) {
              const T* p = src + (2 * y) * l.w + 2 * x;
              dst[y * wo + x] = T(0.25) * (std::max(p[0], T(0)) + std::max(p[1], T(0)) + std::max(p[l.w], T(0)) +
                                           std::max(p[l.w + 1], T(0)));
            }
        }
      if (tape) {
        tape->buffers[2 * li] = std::move(cols);
        tape->buffers[2 * li + 1] = std::move(z);
      }
      act = std::move(pooled);
    }
    // Global average pool: act is d x n x final_spatial.
    const int d = feature_dim();
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < d; ++c) {
        const T* p = act.data() + (static_cast<std::size_t>(c) * n + b) * final_spatial_;
        T acc = 0;
        for (int i = 0; i < final_spatial_; ++i) acc += p[i];
        features[static_cast<std::size_t>(b) * d + c] = acc / static_cast<T>(final_spatial_);
      }
  }

  void backward(std::span<const T> params, const Tape<T>& tape, std::span<const T> dfeatures, std::span<T> dparams,
                std::span<T> dinput) const override {
    const int n = tape.batch;
    const int d = feature_dim();
    // dL/d(pooled output of the last block), CNHW.
    std::vector<T> dpool(static_cast<std::size_t>(d) * n * final_spatial_);
    for (int c = 0; c < d; ++c)
      for (int b = 0; b < n; ++b) {
        const T g = dfeatures[static_cast<std::size_t>(b) * d + c] / static_cast<T>(final_spatial_);
        std::fill_n(dpool.data() + (static_cast<std::size_t>(c) * n + b) * final_spatial_, final_spatial_, g);
      }

    for (std::size_t li = layers_.size(); li-- > 0;) {
      const auto& l = layers_[li];
      const auto& cols = tape.buffers[2 * li];
      const auto& z = tape.buffers[2 * li + 1];
      const std::size_t cols_n = static_cast<std::size_t>(n) * l.h * l.w;
      const int ho = l.h / 2, wo = l.w / 2;
      std::vector<T> dz(static_cast<std::size_t>(l.cout) * cols_n);
      for (int c = 0; c < l.cout; ++c)
        for (int b = 0; b < n; ++b) {
          const std::size_t base = (static_cast<std::size_t>(c) * n + b);
          const T* gp = dpool.data() + base * ho * wo;
          const T* zp = z.data() + base * l.h * l.w;
          T* dp = dz.data() + base * l.h * l.w;
          for (int y = 0; y < l.h; ++y)
            for (int x = 0; x < l.w; ++x) {
              const int i = y * l.w + x;
              dp[i] = zp[i] > T(0) ? T(0.25) * gp[(y / 2) * wo + x / 2] : T(0);
            }
        }
      ConstMapMat<T> dzmat(dz.data(), l.cout, static_cast<Eigen::Index>(cols_n));
      if (!dparams.empty()) {
        ConstMapMat<T> cmat(cols.data(), l.k(), static_cast<Eigen::Index>(cols_n));
        MapMat<T> dw(dparams.data() + l.weight_offset, l.cout, l.k());
        dw.noalias() += dzmat * cmat.transpose();
        // Plain loop: a vectorized sum would peel by the buffer's alignment and
        // change the rounding from run to run.
        for (int co = 0; co < l.cout; ++co) {
          const T* row = dz.data() + static_cast<std::size_t>(co) * cols_n;
          T acc(0);
          for (std::size_t i = 0; i < cols_n; ++i) acc += row[i];
          dparams[l.bias_offset + co] += acc;
        }
      }
      if (li == 0 && dinput.empty()) break;
      std::vector<T> dcols(static_cast<std::size_t>(l.k()) * cols_n);
      ConstMapMat<T> wmat(params.data() + l.weight_offset, l.cout, l.k());
      MapMat<T>(dcols.data(), l.k(), static_cast<Eigen::Index>(cols_n)).noalias() = wmat.transpose() * dzmat;
      std::vector<T> dact(static_cast<std::size_t>(l.cin) * cols_n, T(0));
      col2im(dcols, l, n, dact);
      dpool = std::move(dact);
    }
    if (!dinput.empty()) {
      const Shape s = cfg_.input;
      const std::size_t plane = static_cast<std::size_t>(s.height) * s.width;
      for (int b = 0; b < n; ++b)
        for (int c = 0; c < s.channels; ++c)
          std::copy_n(dpool.data() + (static_cast<std::size_t>(c) * n + b) * plane, plane,
                      dinput.data() + (static_cast<std::size_t>(b) * s.channels + c) * plane);
    }
  }

 private:
  static void im2col(const std::vector<T>& act, const LayerDims& l, int n, std::vector<T>& cols) {
    const std::size_t cols_n = static_cast<std::size_t>(n) * l.h * l.w;
    for (int ci = 0; ci < l.cin; ++ci)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          T* row = cols.data() + static_cast<std::size_t>(ci * 9 + ky * 3 + kx) * cols_n;
          for (int b = 0; b < n; ++b) {
            const T* src = act.data() + (static_cast<std::size_t>(ci) * n + b) * l.h * l.w;
            T* dst = row + static_cast<std::size_t>(b) * l.h * l.w;
            for (int y = 0; y < l.h; ++y) {
              const int yy = y + ky - 1;
              T* drow = dst + y * l.w;
              if (yy < 0 || yy >= l.h) {
                std::fill_n(drow, l.w, T(0));
                continue;
              }
              const T* srow = src + yy * l.w;
              for (int x = 0; x < l.w; ++x) {
                const int xx = x + kx - 1;
                drow[x] = (xx < 0 || xx >= l.w) ? T(0) : srow[xx];
              }
            }
          }
        }
  }

  static void col2im(const std::vector<T>& dcols, const LayerDims& l, int n, std::vector<T>& dact) {
    const std::size_t cols_n = static_cast<std::size_t>(n) * l.h * l.w;
    for (int ci = 0; ci < l.cin; ++ci)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const T* row = dcols.data() + static_cast<std::size_t>(ci * 9 + ky * 3 + kx) * cols_n;
          for (int b = 0; b < n; ++b) {
            T* dst = dact.data() + (static_cast<std::size_t>(ci) * n + b) * l.h * l.w;
            const T* src = row + static_cast<std::size_t>(b) * l.h * l.w;
            for (int y = 0; y < l.h; ++y) {
              const int yy = y + ky - 1;
              if (yy < 0 || yy >= l.h) continue;
              const T* srow = src + y * l.w;
              T* drow = dst + yy * l.w;
              for (int x = 0; x < l.w; ++x) {
                const int xx = x + kx - 1;
                if (xx >= 0 && xx < l.w) drow[xx] += srow[x];
              }
            }
          }
        }
  }

  ConvNetConfig cfg_;
  std::vector<LayerDims> layers_;
  std::size_t param_count_ = 0;
  int final_spatial_ = 1;
};

template <typename T>
class LinearProbe final : public FeatureExtractor<T> {
 public:
  explicit LinearProbe(Shape input) : input_(input) {}

  std::string arch_id() const override { return "linear"; }
  Shape input_shape() const override { return input_; }
  int feature_dim() const override { return static_cast<int>(input_.size()); }
  std::size_t param_count() const override { return 0; }
  void init_params(std::span<T>, std::uint64_t) const override {}

  void forward(std::span<const T>, std::span<const T> input, int n, std::span<T> features,
               Tape<T>* tape) const override {
    std::copy_n(input.data(), static_cast<std::size_t>(n) * input_.size(), features.data());
    if (tape) {
      tape->batch = n;
      tape->buffers.clear();
    }
  }

  void backward(std::span<const T>, const Tape<T>& tape, std::span<const T> dfeatures, std::span<T>,
                std::span<T> dinput) const override {
    if (!dinput.empty()) std::copy_n(dfeatures.data(), static_cast<std::size_t>(tape.batch) * input_.size(), dinput.data());
  }

 private:
  Shape input_;
};

}  // namespace

template <typename T>
std::shared_ptr<const FeatureExtractor<T>> make_convnet(ConvNetConfig cfg) {
  return std::make_shared<ConvNet<T>>(std::move(cfg));
}

template <typename T>
std::shared_ptr<const FeatureExtractor<T>> make_linear_probe(Shape input) {
  return std::make_shared<LinearProbe<T>>(input);
}

template <typename T>
std::shared_ptr<const FeatureExtractor<T>> make_extractor(const std::string& arch_id, Shape input) {
  if (arch_id == "linear") return make_linear_probe<T>(input);
  const std::string prefix = "convnet";
  if (arch_id.rfind(prefix, 0) == 0) {
    ConvNetConfig cfg{input, {}};
    std::size_t pos = prefix.size();
    while (pos < arch_id.size()) {
      if (arch_id[pos] != '-') fail(ErrorKind::kInvalidArgument, "bad architecture id '" + arch_id + "'");
      std::size_t end = arch_id.find('-', pos + 1);
      if (end == std::string::npos) end = arch_id.size();
      try {
        cfg.widths.push_back(std::stoi(arch_id.substr(pos + 1, end - pos - 1)));
      } catch (const std::exception&) {
        fail(ErrorKind::kInvalidArgument, "bad architecture id '" + arch_id + "'");
      }
      pos = end;
    }
    return make_convnet<T>(cfg);
  }
  fail(ErrorKind::kInvalidArgument, "unknown architecture '" + arch_id + "'");
}

template <typename T>
T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <typename T>
Detector<T>::Detector(std::shared_ptr<const FeatureExtractor<T>> extractor, std::uint64_t init_seed)
    : extractor_(std::move(extractor)) {
  const int d = extractor_->feature_dim();
  params_.assign(extractor_->param_count() + static_cast<std::size_t>(d) + 1, T(0));
  extractor_->init_params(std::span<T>(params_).first(extractor_->param_count()), init_seed);
  Rng rng(hash_seed({init_seed, 0x4eadULL}));
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (int i = 0; i < d; ++i) params_[extractor_->param_count() + i] = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
std::span<T> Detector<T>::mutable_params() {
  require(!frozen_, ErrorKind::kFrozenModel, "frozen detectors cannot be updated");
  return params_;
}

template <typename T>
std::span<const T> Detector<T>::head_weights() const {
  return std::span<const T>(params_).subspan(extractor_->param_count(), static_cast<std::size_t>(feature_dim()));
}

template <typename T>
void Detector<T>::set_head(std::span<const T> weights, T bias) {
  require(static_cast<int>(weights.size()) == feature_dim(), ErrorKind::kShapeMismatch, "head weight size mismatch");
  auto p = mutable_params();
  std::copy(weights.begin(), weights.end(), p.begin() + static_cast<std::ptrdiff_t>(extractor_->param_count()));
  p.back() = bias;
}

template <typename T>
Detector<T> Detector<T>::clone_frozen() const {
  Detector copy = *this;
  copy.frozen_ = true;
  return copy;
}

template <typename T>
int Detector<T>::batch_size_of(std::span<const T> batch) const {
  const std::size_t per = input_shape().size();
  require(batch.size() % per == 0, ErrorKind::kShapeMismatch,
          "batch of " + std::to_string(batch.size()) + " values is not a multiple of " + input_shape().str());
  return static_cast<int>(batch.size() / per);
}

template <typename T>
typename Detector<T>::Pass Detector<T>::forward(std::span<const T> batch, bool record) const {
  Pass pass;
  pass.batch = batch_size_of(batch);
  const int d = feature_dim();
  pass.features.assign(static_cast<std::size_t>(pass.batch) * d, T(0));
  pass.logits.assign(static_cast<std::size_t>(pass.batch), T(0));
  if (pass.batch == 0) return pass;
  const auto ex_params = std::span<const T>(params_).first(extractor_->param_count());
  extractor_->forward(ex_params, batch, pass.batch, pass.features, record ? &pass.tape : nullptr);
  const auto w = head_weights();
  const T b = head_bias();
  for (int i = 0; i < pass.batch; ++i) {
    T acc = b;
    const T* f = pass.features.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) acc += w[j] * f[j];
    pass.logits[i] = acc;
  }
  return pass;
}

template <typename T>
std::vector<T> Detector<T>::forward_prob(std::span<const T> batch) const {
  const Pass pass = forward(batch, false);
  std::vector<T> probs(pass.logits.size());
  // Keep outputs strictly inside (0,1) even where the logistic saturates.
  const T lo = std::numeric_limits<T>::min();
  const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = std::clamp(sigmoid(pass.logits[i]), lo, hi);
  return probs;
}

template <typename T>
std::vector<int> Detector<T>::predict(std::span<const T> batch) const {
  const auto probs = forward_prob(batch);
  std::vector<int> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= T(0.5) ? 1 : 0;
  return out;
}

template <typename T>
std::vector<T> Detector<T>::features(std::span<const T> batch) const {
  return forward(batch, false).features;
}

template <typename T>
void Detector<T>::backward(const Pass& pass, std::span<const T> dlogits, std::span<const T> dfeatures,
                           std::span<T> dparams, std::span<T> dinput) const {
  const int n = pass.batch;
  const int d = feature_dim();
  require(static_cast<int>(dlogits.size()) == n, ErrorKind::kShapeMismatch, "dlogits size mismatch");
  require(dfeatures.empty() || dfeatures.size() == pass.features.size(), ErrorKind::kShapeMismatch,
          "dfeatures size mismatch");
  require(dparams.empty() || dparams.size() == params_.size(), ErrorKind::kShapeMismatch, "dparams size mismatch");
  require(dinput.empty() || dinput.size() == static_cast<std::size_t>(n) * input_shape().size(),
          ErrorKind::kShapeMismatch, "dinput size mismatch");
  require(pass.tape.batch == n, ErrorKind::kInvalidArgument, "pass was not recorded");
  if (n == 0) return;

  const auto w = head_weights();
  const std::size_t head_off = extractor_->param_count();
  std::vector<T> dfeat(static_cast<std::size_t>(n) * d);
  for (int i = 0; i < n; ++i) {
    const T g = dlogits[i];
    const T* f = pass.features.data() + static_cast<std::size_t>(i) * d;
    T* df = dfeat.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      df[j] = g * w[j];
      if (!dfeatures.empty()) df[j] += dfeatures[static_cast<std::size_t>(i) * d + j];
    }
    if (!dparams.empty()) {
      for (int j = 0; j < d; ++j) dparams[head_off + j] += g * f[j];
      dparams[head_off + d] += g;
    }
  }
  const auto ex_params = std::span<const T>(params_).first(head_off);
  const auto ex_grads = dparams.empty() ? std::span<T>() : dparams.first(head_off);
  extractor_->backward(ex_params, pass.tape, dfeat, ex_grads, dinput);
}

template float sigmoid<float>(float);
template double sigmoid<double>(double);
template class Detector<float>;
template class Detector<double>;
template std::shared_ptr<const FeatureExtractor<float>> make_convnet<float>(ConvNetConfig);
template std::shared_ptr<const FeatureExtractor<double>> make_convnet<double>(ConvNetConfig);
template std::shared_ptr<const FeatureExtractor<float>> make_linear_probe<float>(Shape);
template std::shared_ptr<const FeatureExtractor<double>> make_linear_probe<double>(Shape);
template std::shared_ptr<const FeatureExtractor<float>> make_extractor<float>(const std::string&, Shape);
template std::shared_ptr<const FeatureExtractor<double>> make_extractor<double>(const std::string&, Shape);

}  // namespace hdp
