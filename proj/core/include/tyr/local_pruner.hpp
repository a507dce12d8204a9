// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0
//
// Progressive second-order local pruning of one linear module.
//
// The module being pruned is W (d_in x d_out): wo for attention (input
// channels grouped per head) or wdown for the FFN (input channels grouped in
// fixed-size neuron groups). Saliency combines a first-order term |G_p W_p^T|
// with the OBS curvature term ||W_p||^2 / (2 [H^-1]_pp); after a unit is
// removed the surviving rows are re-solved against the damped Hessian, and
// the maintained inverse is updated per channel with rank-1 downdates.

#pragma once

#include <span>
#include <vector>

#include "tyr/calibration.hpp"
#include "tyr/common.hpp"

namespace tyr {

// Uniform partition of [0, d_in) into contiguous channel ranges.
// group_size == head_dim for attention heads; 16 by default for FFN neurons.
struct UnitGrouping {
  int group_size = 1;
  int unit_count = 0;

  int channel_begin(int unit) const { return unit * group_size; }
  int channel_end(int unit) const { return (unit + 1) * group_size; }
  int channel_count() const { return group_size * unit_count; }
};

struct HessianState {
  Matrix inv_h;  // maintained damped inverse; pruned rows/cols are zero
  Matrix grad;   // (H + lambda I) * W, fixed at construction, rows masked
  std::vector<std::uint8_t> active;
  double lambda = 0.0;

  int dim() const { return static_cast<int>(inv_h.rows()); }
  std::vector<int> active_channels() const;
};

// lambda = lambda_frac * mean(diag H), floored at 1e-8 * (1 + trace H).
// inv_h = (H + lambda I)^-1 via Cholesky; throws NumericError if the damped
// matrix still fails to factor.
HessianState build_hessian_state(const Matrix& w, const Matrix& h,
                                 double lambda_frac);

// |G_p W_p^T| + ||W_p||^2 / (2 [inv_h]_pp) for an active channel p.
double channel_saliency(const HessianState& state, const Matrix& w, int p);

// Mean channel saliency per unit; inactive units score +infinity.
std::vector<double> unit_saliency(const HessianState& state, const Matrix& w,
                                  const UnitGrouping& grouping);

// Removes one unit: zeroes its rows of W, applies the rank-1 inverse update
// per channel, masks grad, then re-solves the surviving rows of W against
// the maintained inverse. Throws NumericError when a pivot drops below 1e-12.
void prune_unit_step(HessianState& state, Matrix& w, int unit,
                     const UnitGrouping& grouping);

struct TrajectorySnapshot {
  double target_sparsity = 0.0;    // as requested
  double realized_sparsity = 0.0;  // pruned_units / unit_count
  std::vector<int> retained_units;
  std::vector<int> retained_channels;
  Matrix packed_w;  // retained rows of W, ascending channel order
};

struct PruneTrajectory {
  std::vector<int> pruned_units;  // greedy removal order
  std::vector<TrajectorySnapshot> snapshots;  // aligned with the request list
};

// Greedy progressive pruning: repeatedly removes the argmin-saliency unit
// (ties -> lowest index) and snapshots whenever the cumulative unit sparsity
// crosses a requested point. Requesting 0 yields the bit-identical input;
// requesting 1 yields an empty retained set. Non-quantizable targets round
// to the nearest achievable unit count (realized_sparsity records it).
PruneTrajectory prune_progressive(const Matrix& w, const ActivationStats& stats,
                                  const UnitGrouping& grouping,
                                  std::span<const double> snapshot_sparsities,
                                  double lambda_frac);

}  // namespace tyr
