// Copyright (c) 2026 the tyr authors
// SPDX-License-Identifier: Apache-2.0

#include "tyr/local_pruner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace tyr {

namespace {

constexpr double kPivotFloor = 1e-12;

bool unit_is_active(const HessianState& state, const UnitGrouping& grouping,
                    int unit) {
  return state.active[static_cast<std::size_t>(grouping.channel_begin(unit))] != 0;
}

}  // namespace

std::vector<int> HessianState::active_channels() const {
  std::vector<int> out;
  out.reserve(active.size());
  for (int p = 0; p < dim(); ++p) {
    if (active[static_cast<std::size_t>(p)]) out.push_back(p);
  }
  return out;
}

HessianState build_hessian_state(const Matrix& w, const Matrix& h,
                                 double lambda_frac) {
  const long d_in = w.rows();
  if (h.rows() != d_in || h.cols() != d_in) {
    throw InputError("build_hessian_state: H must be d_in x d_in");
  }
  const double scale = h.cwiseAbs().maxCoeff();
  if ((h - h.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (scale + 1.0)) {
    throw InputError("build_hessian_state: H is not symmetric");
  }

  HessianState state;
  const double trace = h.trace();
  state.lambda = std::max(lambda_frac * trace / static_cast<double>(d_in),
                          1e-8 * (1.0 + trace));
  Matrix damped = h;
  damped.diagonal().array() += state.lambda;
  Eigen::LLT<Matrix> llt(damped);
  if (llt.info() != Eigen::Success) {
    throw NumericError(
        "build_hessian_state: damped Hessian failed Cholesky factorization");
  }
  state.inv_h = llt.solve(Matrix::Identity(d_in, d_in));
  state.grad.noalias() = damped * w;
  state.active.assign(static_cast<std::size_t>(d_in), 1);
  return state;
}

double channel_saliency(const HessianState& state, const Matrix& w, int p) {
  if (p < 0 || p >= state.dim() || !state.active[static_cast<std::size_t>(p)]) {
    throw InputError("channel_saliency: channel is not active");
  }
  const double diag = state.inv_h(p, p);
  if (diag <= 0.0) {
    std::ostringstream os;
    os << "channel_saliency: inverse-Hessian diagonal is not positive at "
          "channel " << p;
    throw NumericError(os.str());
  }
  const double first = std::abs(state.grad.row(p).dot(w.row(p)));
  const double second = w.row(p).squaredNorm() / (2.0 * diag);
  return first + second;
}

std::vector<double> unit_saliency(const HessianState& state, const Matrix& w,
                                  const UnitGrouping& grouping) {
  if (grouping.channel_count() != state.dim()) {
    throw InputError("unit_saliency: grouping does not cover d_in");
  }
  std::vector<double> scores(static_cast<std::size_t>(grouping.unit_count),
                             std::numeric_limits<double>::infinity());
  for (int u = 0; u < grouping.unit_count; ++u) {
    if (!unit_is_active(state, grouping, u)) continue;
    double sum = 0.0;
    for (int p = grouping.channel_begin(u); p < grouping.channel_end(u); ++p) {
      sum += channel_saliency(state, w, p);
    }
    scores[static_cast<std::size_t>(u)] =
        sum / static_cast<double>(grouping.group_size);
  }
  return scores;
}

void prune_unit_step(HessianState& state, Matrix& w, int unit,
                     const UnitGrouping& grouping) {
  if (unit < 0 || unit >= grouping.unit_count) {
    throw InputError("prune_unit_step: unit out of range");
  }
  if (!unit_is_active(state, grouping, unit)) {
    throw InputError("prune_unit_step: unit already pruned");
  }

  Vector col(state.dim());
  for (int p = grouping.channel_begin(unit); p < grouping.channel_end(unit);
       ++p) {
    w.row(p).setZero();
    const double d = state.inv_h(p, p);
    if (d < kPivotFloor) {
      std::ostringstream os;
      os << "prune_unit_step: inverse-Hessian pivot " << d << " at channel "
         << p << " is below " << kPivotFloor;
      throw NumericError(os.str());
    }
    col = state.inv_h.col(p);
    state.inv_h.noalias() -= (col * col.transpose()) / d;
    state.inv_h.row(p).setZero();
    state.inv_h.col(p).setZero();
    state.grad.row(p).setZero();
    state.active[static_cast<std::size_t>(p)] = 0;
  }

  // Re-solve the survivors against the maintained inverse: the quadratic
  // model around the original weights has its minimizer at inv_h * grad over
  // the active block, which is the one-step Newton form of the W + H^-1 G
  // adjustment.
  const std::vector<int> active = state.active_channels();
  if (!active.empty()) {
    const Matrix solved =
        state.inv_h(active, active) * state.grad(active, Eigen::all);
    w(active, Eigen::all) = solved;
  }
}

PruneTrajectory prune_progressive(const Matrix& w, const ActivationStats& stats,
                                  const UnitGrouping& grouping,
                                  std::span<const double> snapshot_sparsities,
                                  double lambda_frac) {
  if (grouping.channel_count() != w.rows()) {
    throw InputError("prune_progressive: grouping does not cover d_in");
  }
  if (stats.dim() != w.rows()) {
    throw InputError("prune_progressive: Hessian dimension mismatch");
  }
  const int units = grouping.unit_count;
  std::vector<long> target_counts;
  target_counts.reserve(snapshot_sparsities.size());
  double prev = -1.0;
  for (double s : snapshot_sparsities) {
    if (s < 0.0 || s > 1.0) {
      throw InputError("prune_progressive: snapshot sparsity outside [0, 1]");
    }
    if (s < prev) {
      throw InputError("prune_progressive: snapshot sparsities must be sorted");
    }
    prev = s;
    target_counts.push_back(std::llround(s * units));
  }

  PruneTrajectory traj;
  traj.snapshots.resize(snapshot_sparsities.size());
  HessianState state = build_hessian_state(w, stats.h, lambda_frac);
  Matrix current = w;

  auto emit = [&](long pruned_count) {
    for (std::size_t i = 0; i < target_counts.size(); ++i) {
      if (target_counts[i] != pruned_count) continue;
      TrajectorySnapshot& snap = traj.snapshots[i];
      snap.target_sparsity = snapshot_sparsities[i];
      snap.realized_sparsity =
          static_cast<double>(pruned_count) / static_cast<double>(units);
      for (int u = 0; u < units; ++u) {
        if (unit_is_active(state, grouping, u)) snap.retained_units.push_back(u);
      }
      snap.retained_channels = state.active_channels();
      snap.packed_w = current(snap.retained_channels, Eigen::all);
    }
  };

  emit(0);
  const long max_count =
      target_counts.empty() ? 0 : *std::max_element(target_counts.begin(),
                                                    target_counts.end());
  for (long k = 1; k <= max_count; ++k) {
    const std::vector<double> scores = unit_saliency(state, current, grouping);
    int best = -1;
    for (int u = 0; u < units; ++u) {
      if (!unit_is_active(state, grouping, u)) continue;
      if (best < 0 || scores[static_cast<std::size_t>(u)] <
                          scores[static_cast<std::size_t>(best)]) {
        best = u;
      }
    }
    prune_unit_step(state, current, best, grouping);
    traj.pruned_units.push_back(best);
    emit(k);
  }
  return traj;
}

}  // namespace tyr
