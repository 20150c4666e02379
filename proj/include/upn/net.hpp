#pragma once

// Feed-forward networks with exact first and second derivatives.
//
// A net maps [x; t] to an output vector. Hidden layers use tanh, the output
// layer is affine. GradTape records one forward pass, optionally together
// with the tangents dh/dx that make up the input Jacobian, and replays it
// backward to produce parameter and input gradients of
//     <out_bar, f(x, t)> + <jac_bar, J_f(x, t)>.
// The second term is what the covariance right-hand side needs: its
// cotangent flows through the Jacobian into both x and the parameters.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "upn/errors.hpp"
#include "upn/linalg.hpp"

namespace upn {

enum class Activation { tanh, identity };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + s + "'");
}

class MlpNet {
public:
  MlpNet() = default;

  // Zero-initialized net. layer_dims[0] counts the time feature.
  MlpNet(std::vector<int> layer_dims, std::vector<Activation> activations, std::uint64_t seed = 0)
      : dims_(std::move(layer_dims)), acts_(std::move(activations)), seed_(seed) {
    detail::require_dims(dims_.size() >= 2, "MlpNet: need at least input and output widths");
    detail::require_dims(acts_.size() == dims_.size() - 1, "MlpNet: one activation per layer");
    for (int d : dims_) detail::require_dims(d >= 1, "MlpNet: layer widths must be positive");
    for (std::size_t k = 0; k + 1 < dims_.size(); ++k) {
      weights_.push_back(Mat::Zero(dims_[k + 1], dims_[k]));
      biases_.push_back(Vec::Zero(dims_[k + 1]));
    }
  }

  // tanh hidden layers, identity output, weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.
  static MlpNet random(const std::vector<int>& layer_dims, std::uint64_t seed) {
    std::vector<Activation> acts(layer_dims.size() - 1, Activation::tanh);
    acts.back() = Activation::identity;
    MlpNet net(layer_dims, acts, seed);
    std::mt19937_64 gen(seed);
    for (auto& w : net.weights_) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(gen);
    }
    return net;
  }

  const std::vector<int>& layer_dims() const { return dims_; }
  const std::vector<Activation>& activations() const { return acts_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t num_layers() const { return weights_.size(); }
  int input_dim() const { return dims_.front(); }
  int state_dim() const { return dims_.front() - 1; }
  int output_dim() const { return dims_.back(); }

  std::size_t param_count() const {
    std::size_t count = 0;
    for (std::size_t k = 0; k < weights_.size(); ++k)
      count += static_cast<std::size_t>(weights_[k].size() + biases_[k].size());
    return count;
  }

  Mat& weight(std::size_t k) { return weights_[k]; }
  const Mat& weight(std::size_t k) const { return weights_[k]; }
  Vec& bias(std::size_t k) { return biases_[k]; }
  const Vec& bias(std::size_t k) const { return biases_[k]; }

  // Per layer: W column-major, then b.
  Vec flatten() const {
    Vec out(static_cast<Eigen::Index>(param_count()));
    Eigen::Index pos = 0;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      out.segment(pos, weights_[k].size()) = vec(weights_[k]);
      pos += weights_[k].size();
      out.segment(pos, biases_[k].size()) = biases_[k];
      pos += biases_[k].size();
    }
    return out;
  }

  void unflatten(const Vec& params) {
    detail::require_dims(static_cast<std::size_t>(params.size()) == param_count(),
                         "MlpNet::unflatten: expected " + std::to_string(param_count()) + " parameters");
    Eigen::Index pos = 0;
    for (std::size_t k = 0; k < weights_.size(); ++k) {
      weights_[k] = Eigen::Map<const Mat>(params.data() + pos, weights_[k].rows(), weights_[k].cols());
      pos += weights_[k].size();
      biases_[k] = params.segment(pos, biases_[k].size());
      pos += biases_[k].size();
    }
  }

  void check_input(const Vec& x) const {
    detail::require_dims(x.size() == state_dim(), "MlpNet: state has length " + std::to_string(x.size()) +
                                                      ", net expects " + std::to_string(state_dim()));
  }

private:
  std::vector<int> dims_;
  std::vector<Activation> acts_;
  std::vector<Mat> weights_;
  std::vector<Vec> biases_;
  std::uint64_t seed_ = 0;
};

inline Vec net_input(const Vec& x, double t) {
  Vec in(x.size() + 1);
  in.head(x.size()) = x;
  in(x.size()) = t;
  return in;
}

inline Vec forward(const MlpNet& net, const Vec& x, double t) {
  net.check_input(x);
  Vec h = net_input(x, t);
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    Vec p = net.weight(k) * h + net.bias(k);
    if (net.activations()[k] == Activation::tanh) p = p.array().tanh();
    h = std::move(p);
  }
  return h;
}

/// Recorded forward pass of one net evaluation.
class GradTape {
public:
  GradTape() = default;

  static GradTape record(const MlpNet& net, const Vec& x, double t, bool with_jacobian) {
    net.check_input(x);
    GradTape tape;
    const int n = net.state_dim();
    tape.with_jacobian_ = with_jacobian;
    tape.h_.reserve(net.num_layers() + 1);
    tape.h_.push_back(net_input(x, t));
    if (with_jacobian) tape.pre_tangents_.reserve(net.num_layers());
    Mat h_tangent;  // dh_{k-1}/dx; unused for the first layer
    for (std::size_t k = 0; k < net.num_layers(); ++k) {
      const Mat& w = net.weight(k);
      Vec p = w * tape.h_.back() + net.bias(k);
      const bool tanh_layer = net.activations()[k] == Activation::tanh;
      if (tanh_layer) p = p.array().tanh();
      if (with_jacobian) {
        Mat p_tangent = k == 0 ? Mat(w.leftCols(n)) : Mat(w * h_tangent);
        h_tangent = tanh_layer ? Mat((1.0 - p.array().square()).matrix().asDiagonal() * p_tangent) : p_tangent;
        tape.pre_tangents_.push_back(std::move(p_tangent));
      }
      tape.h_.push_back(std::move(p));
    }
    if (with_jacobian) tape.jacobian_ = std::move(h_tangent);
    return tape;
  }

  const Vec& output() const { return h_.back(); }
  const Mat& jacobian() const { return jacobian_; }
  bool has_jacobian() const { return with_jacobian_; }

  // Adds the parameter gradient of <out_bar, f> + <jac_bar, J> into
  // `param_grad` (length net.param_count()) and returns the state gradient.
  // `jac_bar` may be null.
  Vec backward(const MlpNet& net, const Vec& out_bar, const Mat* jac_bar, double* param_grad) const {
    detail::require_dims(out_bar.size() == net.output_dim(), "GradTape::backward: cotangent length mismatch");
    const bool second_order = jac_bar != nullptr;
    if (second_order && !with_jacobian_) throw Error("GradTape::backward: tape recorded without Jacobian");
    const int n = net.state_dim();
    Vec hb = out_bar;
    Mat tb;
    if (second_order) {
      detail::require_dims(jac_bar->rows() == net.output_dim() && jac_bar->cols() == n,
                           "GradTape::backward: Jacobian cotangent shape mismatch");
      tb = *jac_bar;
    }
    // Offsets of each layer's parameters in the flat vector.
    std::vector<Eigen::Index> offsets(net.num_layers());
    Eigen::Index pos = 0;
    for (std::size_t k = 0; k < net.num_layers(); ++k) {
      offsets[k] = pos;
      pos += net.weight(k).size() + net.bias(k).size();
    }
    for (std::size_t kk = net.num_layers(); kk-- > 0;) {
      const Mat& w = net.weight(kk);
      const Vec& h_out = h_[kk + 1];
      const Vec& h_in = h_[kk];
      Vec pb;
      Mat ptb;
      if (net.activations()[kk] == Activation::tanh) {
        const Eigen::ArrayXd s = 1.0 - h_out.array().square();
        if (second_order) {
          const Mat& pt = pre_tangents_[kk];
          const Eigen::ArrayXd sb = (pt.array() * tb.array()).rowwise().sum();
          ptb = s.matrix().asDiagonal() * tb;
          hb.array() -= 2.0 * h_out.array() * sb;
        }
        pb = (s * hb.array()).matrix();
      } else {
        pb = hb;
        if (second_order) ptb = tb;
      }
      if (param_grad != nullptr) {
        Eigen::Map<Mat> wg(param_grad + offsets[kk], w.rows(), w.cols());
        Eigen::Map<Vec> bg(param_grad + offsets[kk] + w.size(), w.rows());
        wg.noalias() += pb * h_in.transpose();
        bg += pb;
        if (second_order) {
          if (kk == 0) {
            wg.leftCols(n) += ptb;  // input tangent is [I; 0]
          } else {
            wg.noalias() += ptb * input_tangent(net, kk).transpose();
          }
        }
      }
      hb = w.transpose() * pb;
      if (second_order && kk > 0) tb = w.transpose() * ptb;
    }
    return hb.head(n);
  }

private:
  // dh_{k}/dx for k >= 1 (the tangent feeding layer k).
  Mat input_tangent(const MlpNet& net, std::size_t k) const {
    const Mat& pt = pre_tangents_[k - 1];
    if (net.activations()[k - 1] == Activation::tanh)
      return (1.0 - h_[k].array().square()).matrix().asDiagonal() * pt;
    return pt;
  }

  std::vector<Vec> h_;             // h_[0] = [x; t], h_[k] = layer k output
  std::vector<Mat> pre_tangents_;  // d(pre-activation of layer k)/dx
  Mat jacobian_;
  bool with_jacobian_ = false;
};

/// d f / d x, excluding the time column.
inline Mat input_jacobian(const MlpNet& net, const Vec& x, double t) {
  return GradTape::record(net, x, t, true).jacobian();
}

/// d f / d t.
inline Vec time_derivative(const MlpNet& net, const Vec& x, double t) {
  net.check_input(x);
  Vec h = net_input(x, t);
  Vec dh = Vec::Zero(h.size());
  dh(h.size() - 1) = 1.0;
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    Vec p = net.weight(k) * h + net.bias(k);
    Vec dp = net.weight(k) * dh;
    if (net.activations()[k] == Activation::tanh) {
      p = p.array().tanh();
      dp = ((1.0 - p.array().square()) * dp.array()).matrix();
    }
    h = std::move(p);
    dh = std::move(dp);
  }
  return dh;
}

/// v^T d f / d params, flat in MlpNet::flatten order.
inline Vec param_vjp(const MlpNet& net, const Vec& x, double t, const Vec& v) {
  detail::require_dims(v.size() == net.output_dim(), "param_vjp: cotangent length mismatch");
  Vec grad = Vec::Zero(static_cast<Eigen::Index>(net.param_count()));
  GradTape::record(net, x, t, false).backward(net, v, nullptr, grad.data());
  return grad;
}

/// (d J_f / d x) u: the derivative of the input Jacobian along direction u.
inline Mat jacobian_directional_derivative(const MlpNet& net, const Vec& x, double t, const Vec& u) {
  net.check_input(x);
  detail::require_dims(u.size() == net.state_dim(), "jacobian_directional_derivative: direction length mismatch");
  const int n = net.state_dim();
  Vec h = net_input(x, t);
  Vec dh = Vec::Zero(n + 1);
  dh.head(n) = u;
  Mat ht = Mat::Zero(n + 1, n);
  ht.topRows(n).setIdentity();
  Mat dht = Mat::Zero(n + 1, n);
  for (std::size_t k = 0; k < net.num_layers(); ++k) {
    const Mat& w = net.weight(k);
    Vec p = w * h + net.bias(k);
    Vec dp = w * dh;
    Mat pt = w * ht;
    Mat dpt = w * dht;
    if (net.activations()[k] == Activation::tanh) {
      p = p.array().tanh();
      const Eigen::ArrayXd s = 1.0 - p.array().square();
      dp = (s * dp.array()).matrix();
      const Eigen::ArrayXd ds = -2.0 * p.array() * dp.array();
      dht = ds.matrix().asDiagonal() * pt + s.matrix().asDiagonal() * dpt;
      ht = s.matrix().asDiagonal() * pt;
    } else {
      dht = std::move(dpt);
      ht = std::move(pt);
    }
    h = std::move(p);
    dh = std::move(dp);
  }
  return dht;
}

/// Reshapes a flat output of length n(n+1)/2 into a lower-triangular matrix
/// using the vech ordering.
inline Mat lower_triangular_from(const Vec& flat, int n) {
  detail::require_dims(flat.size() == triangular_number(n),
                       "lower_triangular_output: output length " + std::to_string(flat.size()) +
                           " does not match n(n+1)/2 for n=" + std::to_string(n));
  Mat l = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) l(i, j) = flat(vech_index(i, j));
  return l;
}

inline Mat lower_triangular_output(const MlpNet& net, const Vec& mu, double t, int n) {
  detail::require_dims(net.output_dim() == triangular_number(n),
                       "lower_triangular_output: net output dim does not match n(n+1)/2");
  return lower_triangular_from(forward(net, mu, t), n);
}

}  // namespace upn
