#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cor/calibration.hpp"
#include "cor/model.hpp"

namespace cor {

inline constexpr double kDefaultDelta = 0.1;
inline constexpr double kDefaultEpsilon = 1e-6;

struct LayerSensitivity {
  std::size_t layer = 0;
  double s_hard = 0.0;
  double s_easy = 0.0;
  double r = 0.0;
  std::size_t n_hard = 0;
  std::size_t n_easy = 0;

  friend bool operator==(const LayerSensitivity&, const LayerSensitivity&) = default;
};

/// s_hard / (s_easy + epsilon).
double knowledge_intensity(double s_hard, double s_easy, double epsilon = kDefaultEpsilon);

/// Per-record loss change when the expert-sum output of `layer` is scaled by
/// (1 + delta) at every context position. Not clamped; may be negative.
std::vector<double> loss_degradations(const MoeModel& model, std::span<const TokenRecord> records, std::size_t layer,
                                      double delta = kDefaultDelta);

/// Mean of loss_degradations. Throws InputError on empty records and
/// IndexError on a bad layer.
double perturb_and_measure(const MoeModel& model, std::span<const TokenRecord> records, std::size_t layer,
                           double delta = kDefaultDelta);

/// One entry per layer. Throws StratificationError when either set is empty.
std::vector<LayerSensitivity> rki(const MoeModel& model, const StratifiedSets& sets, double delta = kDefaultDelta,
                                  double epsilon = kDefaultEpsilon, std::size_t threads = 1);

/// Linear residual cascade h_l = h_{l-1} + F_l(h_{l-1}) whose branches have
/// slope `gain` around the unperturbed trajectory and carry a knowledge
/// signal of strength kappa[l] on hard probes and `noise_floor` on easy
/// probes.
struct CascadeSpec {
  std::vector<double> kappa;
  double gain = 0.3;
  double noise_floor = 0.01;
  double delta = kDefaultDelta;
  double epsilon = kDefaultEpsilon;
  std::size_t width = 8;
  std::size_t probes = 16;
  std::uint64_t seed = 3;

  /// Throws ConfigError unless gain >= 0, every kappa >= 0 and depth >= 1.
  void validate() const;
};

struct CascadeReport {
  std::vector<double> s_hard;
  std::vector<double> s_easy;
  std::vector<double> r;
};

CascadeReport verify_cascade(const CascadeSpec& spec);

}  // namespace cor
