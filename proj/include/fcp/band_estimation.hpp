#pragma once

// Sound propagation of a feature-space region through the prediction head.
// The calibrated ball is first enclosed in a box, then pushed through the head
// with interval arithmetic: affine layers map center and halfwidth as
// c' = Wc + b, r' = |W| r; ReLU clamps the interval at zero.  The result
// always contains the exact image of the region (soundness), at the price of
// looseness that grows with head depth.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "fcp/matrix.hpp"
#include "fcp/nn.hpp"
#include "fcp/rng.hpp"

namespace fcp {

struct Box {
  Vector lo, hi;

  void validate() const {
    if (lo.size() != hi.size()) throw std::invalid_argument("Box: lo/hi size mismatch");
    for (std::size_t j = 0; j < lo.size(); ++j)
      if (!(lo[j] <= hi[j]) || !std::isfinite(lo[j]) || !std::isfinite(hi[j]))
        throw std::invalid_argument("Box: requires finite lo <= hi");
  }

  bool contains(std::span<const double> v, double slack = 0.0) const {
    for (std::size_t j = 0; j < v.size(); ++j)
      if (v[j] < lo[j] - slack || v[j] > hi[j] + slack) return false;
    return true;
  }

  double mean_width() const {
    double s = 0.0;
    for (std::size_t j = 0; j < lo.size(); ++j) s += hi[j] - lo[j];
    return lo.empty() ? 0.0 : s / static_cast<double>(lo.size());
  }
};

// Ball in feature space: center is the trained feature of a sample, radius is
// the calibrated quantile.
struct FeatureBand {
  Vector center;
  double radius = 0.0;
  Norm norm = Norm::kLinf;
};

// Smallest enclosing box.  Exact for the l-infinity ball; a strict superset
// for the l2 ball (still sound).
inline Box ball_to_box(const FeatureBand& band) {
  if (!(band.radius >= 0.0)) throw std::invalid_argument("ball_to_box: negative radius");
  Box box;
  box.lo.resize(band.center.size());
  box.hi.resize(band.center.size());
  for (std::size_t j = 0; j < band.center.size(); ++j) {
    box.lo[j] = band.center[j] - band.radius;
    box.hi[j] = band.center[j] + band.radius;
  }
  return box;
}

namespace detail {

inline Box affine_interval(const DenseLayer& layer, const Box& in) {
  Box out;
  out.lo.resize(layer.weight.rows);
  out.hi.resize(layer.weight.rows);
  for (std::size_t i = 0; i < layer.weight.rows; ++i) {
    const auto row = layer.weight.row(i);
    double center = layer.bias[i];
    double halfwidth = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      center += row[j] * 0.5 * (in.lo[j] + in.hi[j]);
      halfwidth += std::abs(row[j]) * 0.5 * (in.hi[j] - in.lo[j]);
    }
    out.lo[i] = center - halfwidth;
    out.hi[i] = center + halfwidth;
  }
  return out;
}

inline void relu_interval(Box& box) {
  for (std::size_t j = 0; j < box.lo.size(); ++j) {
    box.lo[j] = std::max(box.lo[j], 0.0);
    box.hi[j] = std::max(box.hi[j], 0.0);
  }
}

inline constexpr std::uint64_t kStreamBallSample = 0x31;

}  // namespace detail

// Pushes a feature box through the head layers.  The output box contains
// head(v) for every v in the input box, and is monotone in the input box.
inline Box ibp_propagate(const SplitModel& model, Box box) {
  if (box.lo.size() != model.feature_width())
    throw std::invalid_argument("ibp_propagate: box width must match the feature width");
  box.validate();
  for (std::size_t l = model.split_index(); l < model.num_layers(); ++l) {
    box = detail::affine_interval(model.layer(l), box);
    if (model.relu_after(l)) detail::relu_interval(box);
  }
  return box;
}

// One uniform draw from the ball.
inline Vector sample_in_ball(const FeatureBand& band, Rng& rng) {
  const std::size_t d = band.center.size();
  Vector v(d);
  if (band.norm == Norm::kLinf) {
    for (std::size_t j = 0; j < d; ++j)
      v[j] = band.center[j] + rng.uniform(-band.radius, band.radius);
  } else {
    // isotropic direction, radius scaled by u^(1/d) for uniformity in volume
    double n2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      v[j] = rng.normal();
      n2 += v[j] * v[j];
    }
    const double inv = 1.0 / std::max(std::sqrt(n2), 1e-300);
    const double r =
        band.radius * std::pow(rng.uniform01(), 1.0 / static_cast<double>(d));
    for (std::size_t j = 0; j < d; ++j) v[j] = band.center[j] + v[j] * inv * r;
  }
  return v;
}

// Componentwise min/max of the head over n ball samples: an inner (empirical)
// approximation of the exact image, always contained in the IBP box.  The
// inner/outer width ratio is the tightness diagnostic reported per experiment.
inline Box sample_inner_box(const SplitModel& model, const FeatureBand& band, std::size_t n,
                            std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_inner_box: n must be >= 1");
  if (band.center.size() != model.feature_width())
    throw std::invalid_argument("sample_inner_box: center width must match the feature width");
  Rng rng(seed, detail::kStreamBallSample);
  Box box;
  for (std::size_t s = 0; s < n; ++s) {
    const Vector img = model.head_forward(sample_in_ball(band, rng));
    if (s == 0) {
      box.lo = img;
      box.hi = img;
    } else {
      for (std::size_t j = 0; j < img.size(); ++j) {
        box.lo[j] = std::min(box.lo[j], img[j]);
        box.hi[j] = std::max(box.hi[j], img[j]);
      }
    }
  }
  return box;
}

}  // namespace fcp
