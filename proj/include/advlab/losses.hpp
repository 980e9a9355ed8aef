// SPDX-License-Identifier: Apache-2.0
#pragma once

// Multi-label asymmetric loss. Per class, with target t, score p, margin m and
// p_m = max(p - m, 0):
//
//   t * (1 - p)^gamma_pos * -log(p)  +  (1 - t) * p_m^gamma_neg * -log(1 - p_m)
//
// summed over classes. log arguments are clamped below at 1e-12. Targets may be
// soft (any value in [0, 1]); the consistency term uses the clean scores as
// targets with no gradient flowing into them.

#include <span>

#include "advlab/graph.hpp"

namespace advlab::losses {

inline constexpr double kLogFloor = 1e-12;

struct AsymmetricLossConfig {
  double gamma_pos = 0.0;
  double gamma_neg = 4.0;
  double clip_margin = 0.05;

  /// Plain binary cross-entropy.
  static AsymmetricLossConfig bce() { return {0.0, 0.0, 0.0}; }
  void validate() const;
  friend bool operator==(const AsymmetricLossConfig&, const AsymmetricLossConfig&) = default;
};

double asymmetric_loss(std::span<const double> scores, std::span<const double> targets,
                       const AsymmetricLossConfig& cfg);
double consistency_loss(std::span<const double> scores_adv, std::span<const double> scores_clean,
                        const AsymmetricLossConfig& cfg);

/// Graph forms. `targets` may be any node of the same shape as `scores`.
diff::NodeId append_asymmetric_loss(diff::GraphBuilder& b, diff::NodeId scores, diff::NodeId targets,
                                    const AsymmetricLossConfig& cfg);
/// Wraps `scores_clean` in stop_gradient before use as the target.
diff::NodeId append_consistency_loss(diff::GraphBuilder& b, diff::NodeId scores_adv, diff::NodeId scores_clean,
                                     const AsymmetricLossConfig& cfg);

}  // namespace advlab::losses
