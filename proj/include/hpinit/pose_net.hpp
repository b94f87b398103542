#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "hpinit/container.hpp"
#include "hpinit/error.hpp"
#include "hpinit/geometry.hpp"
#include "hpinit/image.hpp"
#include "hpinit/random.hpp"

namespace hpinit {

// ---------------------------------------------------------------------------
// Angle normalization: degrees <-> [-1, 1]

inline constexpr double kAngleScale = 90.0;

/// theta / 90 carried as a rounded quotient plus the exact division remainder,
/// so the reverse mapping restores theta bit-for-bit.
struct NormalizedAngle {
  double hi = 0.0;
  double lo = 0.0;

  double value() const { return hi + lo; }
};

inline NormalizedAngle normalize_angle(double degrees) {
  const double hi = degrees / kAngleScale;
  const double rem = std::fma(-hi, kAngleScale, degrees);
  return {hi, rem / kAngleScale};
}

inline double denormalize_angle(const NormalizedAngle& n) {
  return std::fma(n.hi, kAngleScale, n.lo * kAngleScale);
}

inline double denormalize_angle(double n) { return n * kAngleScale; }

// ---------------------------------------------------------------------------
// Preprocessing

inline constexpr int kNetInput = 96;

/// Crops `bb` out of `image` and resamples it bilinearly to size x size.
/// Sample points outside the image read as 0.5.
inline GrayImage preprocess(const GrayImage& image, const BoundingBox& bb, int size = kNetInput) {
  bb.validate();
  require(!image.empty(), Errc::InvalidArgument, "empty image");
  const double w = image.width(), h = image.height();
  require(bb.x < w && bb.y < h && bb.x + bb.w > 0 && bb.y + bb.h > 0, Errc::EmptyIntersection,
          "bounding box does not overlap the image");
  std::vector<float> px(static_cast<std::size_t>(size) * size);
  const double sx = bb.w / size, sy = bb.h / size;
  for (int r = 0; r < size; ++r) {
    const double y = bb.y + (r + 0.5) * sy - 0.5;
    for (int c = 0; c < size; ++c) {
      const double x = bb.x + (c + 0.5) * sx - 0.5;
      float v = 0.5f;
      if (x >= -0.5 && x <= w - 0.5 && y >= -0.5 && y <= h - 0.5)
        v = static_cast<float>(image.sample_clamped(x, y));
      px[static_cast<std::size_t>(r) * size + c] = v;
    }
  }
  return GrayImage(size, size, std::move(px));
}

// ---------------------------------------------------------------------------
// Layers. Tensors are flat channel-major (c, y, x) vectors.

namespace nn {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

struct ConvShape {
  int in_c, in_hw, out_c, k;
  int out_hw() const { return in_hw - k + 1; }
  int col_rows() const { return in_c * k * k; }
  int col_cols() const { return out_hw() * out_hw(); }
};

template <typename S>
RowMat<S> im2col(std::span<const S> in, const ConvShape& cs) {
  const int o = cs.out_hw();
  RowMat<S> col(cs.col_rows(), cs.col_cols());
  for (int c = 0; c < cs.in_c; ++c)
    for (int ky = 0; ky < cs.k; ++ky)
      for (int kx = 0; kx < cs.k; ++kx) {
        S* dst = col.row((c * cs.k + ky) * cs.k + kx).data();
        for (int oy = 0; oy < o; ++oy) {
          const S* src = in.data() + (static_cast<std::ptrdiff_t>(c) * cs.in_hw + oy + ky) * cs.in_hw + kx;
          std::copy(src, src + o, dst + static_cast<std::ptrdiff_t>(oy) * o);
        }
      }
  return col;
}

template <typename S>
void col2im_add(const RowMat<S>& dcol, const ConvShape& cs, std::span<S> din) {
  const int o = cs.out_hw();
  for (int c = 0; c < cs.in_c; ++c)
    for (int ky = 0; ky < cs.k; ++ky)
      for (int kx = 0; kx < cs.k; ++kx) {
        const S* src = dcol.row((c * cs.k + ky) * cs.k + kx).data();
        for (int oy = 0; oy < o; ++oy) {
          S* dst = din.data() + (static_cast<std::ptrdiff_t>(c) * cs.in_hw + oy + ky) * cs.in_hw + kx;
          const S* s = src + static_cast<std::ptrdiff_t>(oy) * o;
          for (int ox = 0; ox < o; ++ox) dst[ox] += s[ox];
        }
      }
}

/// z = W * im2col(in) + b. W is out_c x (in_c k k), row-major.
template <typename S>
RowMat<S> conv_forward(std::span<const S> in, const ConvShape& cs, std::span<const S> weights,
                       std::span<const S> bias, RowMat<S>* col_out = nullptr) {
  Eigen::Map<const RowMat<S>> w(weights.data(), cs.out_c, cs.col_rows());
  Eigen::Map<const Vec<S>> b(bias.data(), cs.out_c);
  RowMat<S> col = im2col(in, cs);
  RowMat<S> z = w * col;
  z.colwise() += b;
  if (col_out) *col_out = std::move(col);
  return z;
}

/// Accumulates weight/bias gradients; writes the input gradient when din is non-empty.
template <typename S>
void conv_backward(const RowMat<S>& dz, const RowMat<S>& col, const ConvShape& cs,
                   std::span<const S> weights, std::span<S> dweights, std::span<S> dbias,
                   std::span<S> din) {
  Eigen::Map<RowMat<S>> dw(dweights.data(), cs.out_c, cs.col_rows());
  Eigen::Map<Vec<S>> db(dbias.data(), cs.out_c);
  dw.noalias() += dz * col.transpose();
  db += dz.rowwise().sum();
  if (!din.empty()) {
    Eigen::Map<const RowMat<S>> w(weights.data(), cs.out_c, cs.col_rows());
    const RowMat<S> dcol = w.transpose() * dz;
    std::fill(din.begin(), din.end(), S(0));
    col2im_add(dcol, cs, din);
  }
}

/// 2x2 stride-2 max pool over `channels` planes of hw x hw; odd edges are dropped.
/// `argmax` receives the flat input index of each output's winner.
template <typename S>
std::vector<S> maxpool_forward(std::span<const S> in, int channels, int hw,
                               std::vector<std::uint32_t>& argmax) {
  const int o = hw / 2;
  std::vector<S> out(static_cast<std::size_t>(channels) * o * o);
  argmax.resize(out.size());
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < o; ++y)
      for (int x = 0; x < o; ++x) {
        std::size_t best = (static_cast<std::size_t>(c) * hw + 2 * y) * hw + 2 * x;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t i = (static_cast<std::size_t>(c) * hw + 2 * y + dy) * hw + 2 * x + dx;
            if (in[i] > in[best]) best = i;
          }
        const std::size_t oi = (static_cast<std::size_t>(c) * o + y) * o + x;
        out[oi] = in[best];
        argmax[oi] = static_cast<std::uint32_t>(best);
      }
  return out;
}

template <typename S>
void maxpool_backward(std::span<const S> dout, const std::vector<std::uint32_t>& argmax,
                      std::span<S> din) {
  std::fill(din.begin(), din.end(), S(0));
  for (std::size_t i = 0; i < dout.size(); ++i) din[argmax[i]] += dout[i];
}

template <typename S>
void relu_inplace(std::span<S> v) {
  for (auto& x : v) x = x > S(0) ? x : S(0);
}

/// dz = dout where the pre-activation was positive, else 0.
template <typename S>
void relu_backward_inplace(std::span<const S> pre, std::span<S> grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(pre[i] > S(0))) grad[i] = S(0);
}

template <typename S>
Vec<S> dense_forward(const Vec<S>& in, std::span<const S> weights, std::span<const S> bias) {
  const auto out = static_cast<Eigen::Index>(bias.size());
  Eigen::Map<const RowMat<S>> w(weights.data(), out, in.size());
  Eigen::Map<const Vec<S>> b(bias.data(), out);
  return w * in + b;
}

template <typename S>
Vec<S> dense_backward(const Vec<S>& dout, const Vec<S>& in, std::span<const S> weights,
                      std::span<S> dweights, std::span<S> dbias) {
  const auto out = dout.size();
  Eigen::Map<const RowMat<S>> w(weights.data(), out, in.size());
  Eigen::Map<RowMat<S>> dw(dweights.data(), out, in.size());
  Eigen::Map<Vec<S>> db(dbias.data(), out);
  dw.noalias() += dout * in.transpose();
  db += dout;
  return w.transpose() * dout;
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Network

/// Three conv+ReLU+maxpool blocks, two ReLU dense layers, linear 3-output head.
/// Dropout follows the last pool and each hidden dense layer.
struct PoseNetArch {
  int input = kNetInput;
  std::array<int, 3> channels{8, 16, 32};
  std::array<int, 3> kernels{5, 3, 3};
  std::array<int, 2> hidden{128, 64};
  std::array<double, 3> dropout{0.5, 0.5, 0.5};

  nn::ConvShape conv(int l) const {
    int hw = input, in_c = 1;
    for (int i = 0; i < l; ++i) {
      hw = (hw - kernels[static_cast<std::size_t>(i)] + 1) / 2;
      in_c = channels[static_cast<std::size_t>(i)];
    }
    return {in_c, hw, channels[static_cast<std::size_t>(l)], kernels[static_cast<std::size_t>(l)]};
  }
  int pooled_hw(int l) const { return conv(l).out_hw() / 2; }
  int flat_size() const { return channels[2] * pooled_hw(2) * pooled_hw(2); }

  void validate() const {
    require(input >= 8, Errc::InvalidArgument, "network input too small");
    for (int l = 0; l < 3; ++l)
      require(channels[static_cast<std::size_t>(l)] >= 1 && kernels[static_cast<std::size_t>(l)] >= 1 &&
                  conv(l).out_hw() >= 2,
              Errc::InvalidArgument, "conv stack does not fit the input size");
    require(hidden[0] >= 1 && hidden[1] >= 1, Errc::InvalidArgument, "hidden widths must be >= 1");
    for (double p : dropout)
      require(p >= 0.0 && p < 1.0, Errc::InvalidArgument, "dropout rate must be in [0, 1)");
  }

  friend bool operator==(const PoseNetArch&, const PoseNetArch&) = default;
};

inline void to_json(nlohmann::json& j, const PoseNetArch& a) {
  j = {{"input", a.input},   {"channels", a.channels}, {"kernels", a.kernels},
       {"hidden", a.hidden}, {"dropout", a.dropout},   {"outputs", 3}};
}

inline void from_json(const nlohmann::json& j, PoseNetArch& a) {
  require(j.value("outputs", 0) == 3, Errc::ShapeMismatch, "pose net output size must be 3");
  a.input = j.at("input").get<int>();
  a.channels = j.at("channels").get<std::array<int, 3>>();
  a.kernels = j.at("kernels").get<std::array<int, 3>>();
  a.hidden = j.at("hidden").get<std::array<int, 2>>();
  a.dropout = j.at("dropout").get<std::array<double, 3>>();
}

/// Offsets of each parameter tensor within the flat parameter vector.
struct ParamLayout {
  struct Slot {
    std::size_t offset, size;
  };
  std::array<Slot, 6> weights{};
  std::array<Slot, 6> biases{};
  std::size_t total = 0;

  explicit ParamLayout(const PoseNetArch& a) {
    auto add = [&](Slot& s, std::size_t n) {
      s = {total, n};
      total += n;
    };
    for (int l = 0; l < 3; ++l) {
      const auto cs = a.conv(l);
      add(weights[static_cast<std::size_t>(l)], static_cast<std::size_t>(cs.out_c) * cs.col_rows());
      add(biases[static_cast<std::size_t>(l)], static_cast<std::size_t>(cs.out_c));
    }
    const std::array<int, 4> widths{a.flat_size(), a.hidden[0], a.hidden[1], 3};
    for (int l = 0; l < 3; ++l) {
      add(weights[static_cast<std::size_t>(l + 3)],
          static_cast<std::size_t>(widths[static_cast<std::size_t>(l + 1)]) * widths[static_cast<std::size_t>(l)]);
      add(biases[static_cast<std::size_t>(l + 3)], static_cast<std::size_t>(widths[static_cast<std::size_t>(l + 1)]));
    }
  }
};

/// Pose regressor with all parameters in one flat vector.
template <typename S>
class PoseNet {
 public:
  using Vec = nn::Vec<S>;

  PoseNet() : PoseNet(PoseNetArch{}) {}
  explicit PoseNet(const PoseNetArch& arch) : arch_(arch), layout_((arch.validate(), arch)) {
    params_.assign(layout_.total, S(0));
  }

  /// He-normal weights for ReLU layers, 1/sqrt(fan_in) for the linear head, zero biases.
  static PoseNet random(const PoseNetArch& arch, std::uint64_t seed) {
    PoseNet net(arch);
    Rng rng(seed);
    for (std::size_t l = 0; l < 6; ++l) {
      const auto& slot = net.layout_.weights[l];
      std::size_t fan_in;
      if (l < 3) {
        fan_in = static_cast<std::size_t>(arch.conv(static_cast<int>(l)).col_rows());
      } else {
        fan_in = slot.size / net.layout_.biases[l].size;
      }
      const double sd = (l == 5 ? 1.0 : std::sqrt(2.0)) / std::sqrt(static_cast<double>(fan_in));
      for (std::size_t i = 0; i < slot.size; ++i)
        net.params_[slot.offset + i] = static_cast<S>(sd * normal(rng));
    }
    return net;
  }

  const PoseNetArch& arch() const { return arch_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<S>& params() { return params_; }
  const std::vector<S>& params() const { return params_; }

  std::span<const S> weights(std::size_t l) const { return slot(layout_.weights[l]); }
  std::span<const S> bias(std::size_t l) const { return slot(layout_.biases[l]); }

  template <typename T>
  PoseNet<T> cast() const {
    PoseNet<T> out(arch_);
    std::transform(params_.begin(), params_.end(), out.params().begin(),
                   [](S v) { return static_cast<T>(v); });
    return out;
  }

  /// Intermediate values of one forward pass, kept for backprop.
  struct Trace {
    std::array<std::vector<S>, 4> act;               // conv inputs; act[3] is the flat pooled output
    std::array<nn::RowMat<S>, 3> col;
    std::array<nn::RowMat<S>, 3> pre;                // conv pre-activations
    std::array<std::vector<std::uint32_t>, 3> argmax;
    std::array<Vec, 3> dense_in;                     // inputs to the dense layers, after dropout
    std::array<Vec, 2> dense_pre;
    std::array<Vec, 3> mask;                         // empty when dropout is off
    Vec out;
  };

  /// Forward pass. With `rng` set, dropout masks are drawn from it (inverted dropout).
  Vec forward(std::span<const S> input, Trace* trace = nullptr, Rng* rng = nullptr) const {
    const auto in_size = static_cast<std::size_t>(arch_.input) * arch_.input;
    require(input.size() == in_size, Errc::ShapeMismatch,
            "network expects " + std::to_string(arch_.input) + "x" + std::to_string(arch_.input) +
                " input");
    Trace local;
    Trace& t = trace ? *trace : local;
    t.act[0].assign(input.begin(), input.end());
    for (int l = 0; l < 3; ++l) {
      const auto li = static_cast<std::size_t>(l);
      const auto cs = arch_.conv(l);
      t.pre[li] = nn::conv_forward<S>(t.act[li], cs, weights(li), bias(li), &t.col[li]);
      nn::RowMat<S> r = t.pre[li];
      nn::relu_inplace<S>(std::span<S>(r.data(), static_cast<std::size_t>(r.size())));
      t.act[li + 1] = nn::maxpool_forward<S>(std::span<const S>(r.data(), static_cast<std::size_t>(r.size())),
                                             cs.out_c, cs.out_hw(), t.argmax[li]);
    }
    Vec h = Eigen::Map<const Vec>(t.act[3].data(), static_cast<Eigen::Index>(t.act[3].size()));
    for (std::size_t d = 0; d < 3; ++d) {
      apply_dropout(h, arch_.dropout[d], t.mask[d], rng);
      t.dense_in[d] = h;
      h = nn::dense_forward<S>(h, weights(3 + d), bias(3 + d));
      if (d < 2) {
        t.dense_pre[d] = h;
        nn::relu_inplace<S>(std::span<S>(h.data(), static_cast<std::size_t>(h.size())));
      }
    }
    t.out = h;
    return h;
  }

  /// Back-propagates dL/dout through `t`, accumulating into `grad` (same layout as params).
  void backward(const Trace& t, const Vec& dout, std::span<S> grad) const {
    require(grad.size() == params_.size(), Errc::ShapeMismatch, "gradient buffer size");
    Vec g = dout;
    for (int d = 2; d >= 0; --d) {
      const auto di = static_cast<std::size_t>(d);
      if (d < 2) {
        nn::relu_backward_inplace<S>(
            std::span<const S>(t.dense_pre[di].data(), static_cast<std::size_t>(t.dense_pre[di].size())),
            std::span<S>(g.data(), static_cast<std::size_t>(g.size())));
      }
      g = nn::dense_backward<S>(g, t.dense_in[di], weights(3 + di), mslot(grad, layout_.weights[3 + di]),
                                mslot(grad, layout_.biases[3 + di]));
      if (t.mask[di].size() > 0) g.array() *= t.mask[di].array();
    }
    std::vector<S> gact(g.data(), g.data() + g.size());
    for (int l = 2; l >= 0; --l) {
      const auto li = static_cast<std::size_t>(l);
      const auto cs = arch_.conv(l);
      nn::RowMat<S> dz(cs.out_c, cs.col_cols());
      nn::maxpool_backward<S>(gact, t.argmax[li],
                              std::span<S>(dz.data(), static_cast<std::size_t>(dz.size())));
      nn::relu_backward_inplace<S>(
          std::span<const S>(t.pre[li].data(), static_cast<std::size_t>(t.pre[li].size())),
          std::span<S>(dz.data(), static_cast<std::size_t>(dz.size())));
      std::vector<S> din(l > 0 ? t.act[li].size() : 0);
      nn::conv_backward<S>(dz, t.col[li], cs, weights(li), mslot(grad, layout_.weights[li]),
                           mslot(grad, layout_.biases[li]), din);
      gact = std::move(din);
    }
  }

 private:
  std::span<const S> slot(const ParamLayout::Slot& s) const {
    return std::span<const S>(params_.data() + s.offset, s.size);
  }
  static std::span<S> mslot(std::span<S> buf, const ParamLayout::Slot& s) {
    return buf.subspan(s.offset, s.size);
  }
  static void apply_dropout(Vec& h, double rate, Vec& mask, Rng* rng) {
    if (!rng || rate <= 0.0) {
      mask.resize(0);
      return;
    }
    mask.resize(h.size());
    const S keep = static_cast<S>(1.0 / (1.0 - rate));
    for (Eigen::Index i = 0; i < h.size(); ++i) mask(i) = uniform01(*rng) < rate ? S(0) : keep;
    h.array() *= mask.array();
  }

  PoseNetArch arch_;
  ParamLayout layout_;
  std::vector<S> params_;
};

/// Raw network output (normalized angles) for a preprocessed crop; dropout off.
template <typename S>
std::array<double, 3> forward(const PoseNet<S>& net, const GrayImage& input) {
  require(input.width() == net.arch().input && input.height() == net.arch().input,
          Errc::ShapeMismatch, "input crop size does not match the network");
  std::vector<S> x(input.pixels().begin(), input.pixels().end());
  const auto out = net.forward(x);
  return {static_cast<double>(out(0)), static_cast<double>(out(1)), static_cast<double>(out(2))};
}

template <typename S>
HeadPose predict_pose(const PoseNet<S>& net, const GrayImage& image, const BoundingBox& bb) {
  const auto o = forward(net, preprocess(image, bb, net.arch().input));
  auto angle = [](double v) { return std::clamp(denormalize_angle(v), -90.0, 90.0); };
  return {angle(o[0]), angle(o[1]), angle(o[2])};
}

// ---------------------------------------------------------------------------
// Training (Nesterov accelerated gradient)

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  int batch_size = 32;
  int max_epochs = 60;
  int patience = 8;
  int augment = 3;            // jittered crops per training sample
  double jitter = 0.05;       // box position/scale jitter, fraction of box size
  double val_fraction = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    require(learning_rate > 0, Errc::InvalidArgument, "learning rate must be > 0");
    require(momentum >= 0 && momentum < 1, Errc::InvalidArgument, "momentum must be in [0, 1)");
    require(batch_size >= 1 && max_epochs >= 1 && patience >= 1 && augment >= 1,
            Errc::InvalidArgument, "batch size, epochs, patience and augment must be >= 1");
    require(jitter >= 0 && val_fraction >= 0 && val_fraction < 1, Errc::InvalidArgument,
            "bad jitter or validation fraction");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"momentum", c.momentum}, {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},       {"patience", c.patience},  {"augment", c.augment},
       {"jitter", c.jitter},               {"val_fraction", c.val_fraction}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.momentum = j.value("momentum", d.momentum);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.patience = j.value("patience", d.patience);
  c.augment = j.value("augment", d.augment);
  c.jitter = j.value("jitter", d.jitter);
  c.val_fraction = j.value("val_fraction", d.val_fraction);
  c.seed = j.value("seed", d.seed);
}

struct PoseTrainSample {
  const GrayImage* image;
  BoundingBox bb;
  HeadPose pose;
};

struct EpochStats {
  int epoch = 0;
  double train_rmse = 0.0;  // degrees, with dropout active
  double val_rmse = 0.0;    // degrees
};

template <typename S>
struct PoseTrainResult {
  PoseNet<S> net;
  std::vector<EpochStats> history;
  int best_epoch = 0;
};

/// Half squared error summed over outputs; returns the loss and writes dL/dout.
template <typename S>
double squared_error_loss(const nn::Vec<S>& out, std::span<const S> target, nn::Vec<S>& dout) {
  dout.resize(out.size());
  double loss = 0.0;
  for (Eigen::Index j = 0; j < out.size(); ++j) {
    const S diff = out(j) - target[static_cast<std::size_t>(j)];
    dout(j) = diff;
    loss += 0.5 * static_cast<double>(diff) * static_cast<double>(diff);
  }
  return loss;
}

/// Mean loss over a batch and its parameter gradient (averaged over the batch).
template <typename S>
double batch_gradient(const PoseNet<S>& net, std::span<const std::vector<S>> inputs,
                      std::span<const std::array<S, 3>> targets, std::span<S> grad, Rng* dropout_rng) {
  std::fill(grad.begin(), grad.end(), S(0));
  typename PoseNet<S>::Trace trace;
  nn::Vec<S> dout;
  double loss = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto out = net.forward(inputs[i], &trace, dropout_rng);
    loss += squared_error_loss<S>(out, targets[i], dout);
    net.backward(trace, dout, grad);
  }
  const S inv = static_cast<S>(1.0 / static_cast<double>(inputs.size()));
  for (auto& g : grad) g *= inv;
  return loss / static_cast<double>(inputs.size());
}

namespace detail {

inline BoundingBox jitter_box(const BoundingBox& bb, double amount, Rng& rng) {
  const double f = 1.0 + uniform(rng, -amount, amount);
  BoundingBox out = bb.scaled(f);
  out.x += uniform(rng, -amount, amount) * bb.w;
  out.y += uniform(rng, -amount, amount) * bb.h;
  return out;
}

template <typename S>
std::vector<S> crop_input(const GrayImage& img, const BoundingBox& bb, int size) {
  const GrayImage crop = preprocess(img, bb, size);
  return std::vector<S>(crop.pixels().begin(), crop.pixels().end());
}

template <typename S>
std::array<S, 3> pose_target(const HeadPose& p) {
  return {static_cast<S>(normalize_angle(p.pitch).value()), static_cast<S>(normalize_angle(p.yaw).value()),
          static_cast<S>(normalize_angle(p.roll).value())};
}

}  // namespace detail

/// RMSE in degrees over all three angles, dropout off.
template <typename S>
double evaluate_rmse(const PoseNet<S>& net, std::span<const std::vector<S>> inputs,
                     std::span<const std::array<S, 3>> targets) {
  if (inputs.empty()) return 0.0;
  double se = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto out = net.forward(inputs[i]);
    for (int j = 0; j < 3; ++j) {
      const double d = static_cast<double>(out(j) - targets[i][static_cast<std::size_t>(j)]);
      se += d * d;
    }
  }
  return std::sqrt(se / (3.0 * static_cast<double>(inputs.size()))) * kAngleScale;
}

/// NAG training with early stopping on validation RMSE; returns the best-validation weights.
template <typename S = float>
PoseTrainResult<S> train_pose_net(std::span<const PoseTrainSample> dataset, const TrainConfig& cfg,
                                  const PoseNetArch& arch = {}) {
  cfg.validate();
  arch.validate();
  require(dataset.size() >= 2, Errc::InvalidArgument, "pose training needs >= 2 samples");
  for (const auto& s : dataset) {
    require(s.image != nullptr, Errc::InvalidArgument, "missing training image");
    s.pose.validate();
  }

  // Seeded validation split.
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(derive_seed(cfg.seed, 1));
  shuffle(order, split_rng);
  std::size_t n_val = static_cast<std::size_t>(std::floor(cfg.val_fraction * static_cast<double>(dataset.size())));
  if (cfg.val_fraction > 0 && n_val == 0) n_val = 1;
  n_val = std::min(n_val, dataset.size() - 1);

  std::vector<std::vector<S>> train_x, val_x;
  std::vector<std::array<S, 3>> train_y, val_y;
  for (std::size_t j = 0; j < order.size(); ++j) {
    const auto& s = dataset[order[j]];
    if (j < n_val) {
      val_x.push_back(detail::crop_input<S>(*s.image, s.bb, arch.input));
      val_y.push_back(detail::pose_target<S>(s.pose));
      continue;
    }
    Rng jr(derive_seed(cfg.seed, 1000 + order[j]));
    for (int a = 0; a < cfg.augment; ++a) {
      train_x.push_back(detail::crop_input<S>(*s.image, detail::jitter_box(s.bb, cfg.jitter, jr), arch.input));
      train_y.push_back(detail::pose_target<S>(s.pose));
    }
  }

  PoseTrainResult<S> result{PoseNet<S>::random(arch, derive_seed(cfg.seed, 2)), {}, 0};
  PoseNet<S>& net = result.net;
  PoseNet<S> lookahead = net;
  std::vector<S> velocity(net.params().size(), S(0));
  std::vector<S> grad(net.params().size());
  std::vector<S> best = net.params();
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;

  const S mu = static_cast<S>(cfg.momentum), lr = static_cast<S>(cfg.learning_rate);
  std::vector<std::size_t> idx(train_x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::vector<S>> bx;
  std::vector<std::array<S, 3>> by;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng erng(derive_seed(cfg.seed, 100000 + static_cast<std::uint64_t>(epoch)));
    shuffle(idx, erng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (std::size_t start = 0, batch = 0; start < idx.size(); start += bs, ++batch) {
      const std::size_t end = std::min(idx.size(), start + bs);
      bx.clear();
      by.clear();
      for (std::size_t i = start; i < end; ++i) {
        bx.push_back(train_x[idx[i]]);
        by.push_back(train_y[idx[i]]);
      }
      // Gradient at the lookahead point theta + mu * v.
      auto& lp = lookahead.params();
      for (std::size_t p = 0; p < lp.size(); ++p) lp[p] = net.params()[p] + mu * velocity[p];
      const double loss = batch_gradient<S>(lookahead, bx, by, grad, &erng);
      if (!std::isfinite(loss))
        throw Error(Errc::NonFiniteLoss,
                    "epoch " + std::to_string(epoch) + " batch " + std::to_string(batch));
      for (std::size_t p = 0; p < lp.size(); ++p) {
        velocity[p] = mu * velocity[p] - lr * grad[p];
        net.params()[p] += velocity[p];
      }
      loss_sum += loss * static_cast<double>(end - start);
      loss_count += end - start;
    }
    EpochStats st;
    st.epoch = epoch;
    // loss is half the per-sample squared error summed over three outputs
    st.train_rmse = std::sqrt(2.0 * loss_sum / (3.0 * static_cast<double>(loss_count))) * kAngleScale;
    st.val_rmse = val_x.empty() ? st.train_rmse : evaluate_rmse<S>(net, val_x, val_y);
    result.history.push_back(st);

    if (st.val_rmse < best_val) {
      best_val = st.val_rmse;
      best = net.params();
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  net.params() = best;
  return result;
}

// ---------------------------------------------------------------------------
// Model file

inline constexpr char kPoseNetMagic[9] = "HPIPNET\0";
inline constexpr std::uint32_t kPoseNetVersion = 1;

inline void save_pose_net(const std::string& path, const PoseNet<float>& net,
                          const nlohmann::json& metadata = nlohmann::json::object()) {
  Container c;
  c.header = {{"format", "hpinit-posenet"},
              {"arch", net.arch()},
              {"param_count", net.params().size()},
              {"metadata", metadata}};
  c.payload = net.params();
  write_container(path, kPoseNetMagic, kPoseNetVersion, c);
}

inline PoseNet<float> load_pose_net(const std::string& path) {
  const Container c = read_container(path, kPoseNetMagic, kPoseNetVersion);
  require(c.header.value("format", "") == "hpinit-posenet", Errc::ParseError,
          path + ": not a pose network");
  PoseNetArch arch;
  try {
    arch = c.header.at("arch").get<PoseNetArch>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::ParseError, path + ": " + e.what());
  }
  PoseNet<float> net(arch);
  require(c.header.value("param_count", std::size_t{0}) == net.params().size() &&
              c.payload.size() == net.params().size(),
          Errc::ShapeMismatch, path + ": parameter count does not match the architecture");
  for (float v : c.payload) require(std::isfinite(v), Errc::ParseError, path + ": non-finite weight");
  net.params() = c.payload;
  return net;
}

}  // namespace hpinit
