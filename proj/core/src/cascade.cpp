#include <cmath>
#include <numeric>
#include <random>

#include "cor/layer_analysis.hpp"

namespace cor {
namespace {

using Vec = std::vector<double>;

double dot(const Vec& a, const Vec& b) { return std::inner_product(a.begin(), a.end(), b.begin(), 0.0); }

class Cascade {
 public:
  Cascade(const CascadeSpec& spec, Vec direction) : spec_(spec), direction_(std::move(direction)) {}

  /// Readout <direction, h_L> with the branch output of `perturbed` scaled
  /// by (1 + delta); no perturbation when perturbed == depth.
  double run(const Vec& x, bool hard, std::size_t perturbed) const {
    const std::size_t depth = spec_.kappa.size();
    // Reference trajectory: every branch emits only its signal term.
    std::vector<Vec> reference{x};
    for (std::size_t l = 0; l < depth; ++l) {
      Vec next = reference.back();
      const double c = signal(l, hard);
      for (std::size_t i = 0; i < next.size(); ++i) next[i] += c * direction_[i];
      reference.push_back(std::move(next));
    }
    Vec h = x;
    for (std::size_t l = 0; l < depth; ++l) {
      const double c = signal(l, hard);
      Vec branch(h.size());
      for (std::size_t i = 0; i < h.size(); ++i) {
        branch[i] = c * direction_[i] + spec_.gain * (h[i] - reference[l][i]);
      }
      if (l == perturbed)
        for (double& v : branch) v *= 1.0 + spec_.delta;
      for (std::size_t i = 0; i < h.size(); ++i) h[i] += branch[i];
    }
    return dot(direction_, h);
  }

 private:
  double signal(std::size_t layer, bool hard) const { return hard ? spec_.kappa[layer] : spec_.noise_floor; }

  const CascadeSpec& spec_;
  Vec direction_;
};

}  // namespace

void CascadeSpec::validate() const {
  if (kappa.empty()) throw ConfigError("cascade: depth must be at least 1");
  if (!(gain >= 0.0)) throw ConfigError("cascade: gain must be non-negative");
  for (double k : kappa)
    if (!(k >= 0.0)) throw ConfigError("cascade: kappa values must be non-negative");
  if (width == 0 || probes == 0) throw ConfigError("cascade: width and probe count must be positive");
}

CascadeReport verify_cascade(const CascadeSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_vec = [&] {
    Vec v(spec.width);
    for (double& x : v) x = normal(rng);
    return v;
  };
  Vec direction = random_vec();
  const double norm = std::sqrt(dot(direction, direction));
  for (double& v : direction) v /= norm;

  std::vector<Vec> hard_probes, easy_probes;
  for (std::size_t i = 0; i < spec.probes; ++i) hard_probes.push_back(random_vec());
  for (std::size_t i = 0; i < spec.probes; ++i) easy_probes.push_back(random_vec());

  const Cascade cascade(spec, direction);
  const std::size_t depth = spec.kappa.size();
  auto sensitivity = [&](const std::vector<Vec>& probes, bool hard, std::size_t layer) {
    double total = 0.0;
    for (const Vec& x : probes) total += cascade.run(x, hard, layer) - cascade.run(x, hard, depth);
    return total / static_cast<double>(probes.size());
  };

  CascadeReport report;
  for (std::size_t l = 0; l < depth; ++l) {
    report.s_hard.push_back(sensitivity(hard_probes, true, l));
    report.s_easy.push_back(sensitivity(easy_probes, false, l));
    report.r.push_back(knowledge_intensity(report.s_hard.back(), report.s_easy.back(), spec.epsilon));
  }
  return report;
}

}  // namespace cor
