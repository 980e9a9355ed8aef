// SPDX-License-Identifier: Apache-2.0
#include "advlab/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "advlab/errors.hpp"

namespace advlab::losses {

void AsymmetricLossConfig::validate() const {
  if (!std::isfinite(gamma_pos) || gamma_pos < 0.0) throw ConfigError("gamma_pos must be finite and >= 0");
  if (!std::isfinite(gamma_neg) || gamma_neg < 0.0) throw ConfigError("gamma_neg must be finite and >= 0");
  if (!(clip_margin >= 0.0 && clip_margin < 0.5)) throw ConfigError("clip_margin must lie in [0, 0.5)");
}

namespace {

void check_unit(std::span<const double> v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] >= 0.0 && v[i] <= 1.0)) {
      throw ContractError(std::string(what) + "[" + std::to_string(i) + "] = " + std::to_string(v[i]) +
                          " is outside [0, 1]");
    }
  }
}

// pow with 0^0 = 1, matching the graph primitive.
double focal(double base, double gamma) { return gamma == 0.0 ? 1.0 : std::pow(base, gamma); }

}  // namespace

double asymmetric_loss(std::span<const double> scores, std::span<const double> targets,
                       const AsymmetricLossConfig& cfg) {
  cfg.validate();
  if (scores.size() != targets.size()) throw ContractError("scores and targets differ in length");
  check_unit(scores, "score");
  check_unit(targets, "target");
  double total = 0.0;
  for (std::size_t k = 0; k < scores.size(); ++k) {
    const double p = scores[k], t = targets[k];
    const double pm = std::max(p - cfg.clip_margin, 0.0);
    const double pos = t * focal(1.0 - p, cfg.gamma_pos) * -std::log(std::max(p, kLogFloor));
    const double neg = (1.0 - t) * focal(pm, cfg.gamma_neg) * -std::log(std::max(1.0 - pm, kLogFloor));
    total += pos + neg;
  }
  return total;
}

double consistency_loss(std::span<const double> scores_adv, std::span<const double> scores_clean,
                        const AsymmetricLossConfig& cfg) {
  return asymmetric_loss(scores_adv, scores_clean, cfg);
}

diff::NodeId append_asymmetric_loss(diff::GraphBuilder& b, diff::NodeId scores, diff::NodeId targets,
                                    const AsymmetricLossConfig& cfg) {
  cfg.validate();
  constexpr double inf = std::numeric_limits<double>::infinity();
  auto one_minus = [&](diff::NodeId n) { return b.shift(b.scale(n, -1.0), 1.0); };

  diff::NodeId pos = b.scale(b.log(b.clamp(scores, kLogFloor, inf)), -1.0);
  if (cfg.gamma_pos != 0.0) pos = b.mul(b.pow(one_minus(scores), cfg.gamma_pos), pos);
  pos = b.mul(targets, pos);

  diff::NodeId pm = cfg.clip_margin == 0.0 ? scores : b.relu(b.shift(scores, -cfg.clip_margin));
  diff::NodeId neg = b.scale(b.log(b.clamp(one_minus(pm), kLogFloor, inf)), -1.0);
  if (cfg.gamma_neg != 0.0) neg = b.mul(b.pow(pm, cfg.gamma_neg), neg);
  neg = b.mul(one_minus(targets), neg);

  return b.sum(b.add(pos, neg));
}

diff::NodeId append_consistency_loss(diff::GraphBuilder& b, diff::NodeId scores_adv, diff::NodeId scores_clean,
                                     const AsymmetricLossConfig& cfg) {
  return append_asymmetric_loss(b, scores_adv, b.stop_gradient(scores_clean), cfg);
}

}  // namespace advlab::losses
