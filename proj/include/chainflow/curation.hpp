#pragma once

// Demonstration curation: kinematic artifact filters, root-aligned MPJPE and
// third-difference jerk gates for tracked rollouts, action perturbation, and
// padded sliding-window slicing into training samples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/env.hpp"
#include "chainflow/rng.hpp"

namespace chainflow {

// Site trajectory of one clip (z up, meters). Joint-angle channels ride along
// for the near-static filter, which is defined on angles rather than sites.
struct MotionClip {
  std::vector<std::vector<Vec2>> frames;          // T x (K+1) world sites
  std::vector<std::vector<double>> joint_angles;  // T x K
  double fps = 30.0;
  int instruction_id = -1;

  int length() const { return static_cast<int>(frames.size()); }
  int site_count() const { return frames.empty() ? 0 : static_cast<int>(frames[0].size()); }
};

struct TrackedTrajectory {
  std::vector<std::vector<double>> states;   // T x d_s
  std::vector<std::vector<double>> actions;  // T x d_a (unperturbed supervision)
  std::vector<std::vector<Vec2>> sites;      // T x (K+1) world positions
  std::vector<std::vector<double>> joint_angles;  // T x K
  int instruction_id = -1;
};

struct WindowSample {
  std::vector<std::vector<double>> history;         // L_max x d_s (first-frame padded)
  std::vector<std::vector<double>> target_states;   // H x d_s
  std::vector<std::vector<double>> target_actions;  // H x d_a
  int instruction_id = -1;
};

enum class FilterReason { ok, short_clip, near_static, penetration, floating };

inline const char* filter_reason_name(FilterReason r) {
  switch (r) {
    case FilterReason::ok: return "ok";
    case FilterReason::short_clip: return "short";
    case FilterReason::near_static: return "static";
    case FilterReason::penetration: return "penetration";
    case FilterReason::floating: return "floating";
  }
  return "?";
}

struct FilterThresholds {
  int min_frames = 30;
  double static_motion = 2e-3;
  double penetration_drop = 0.05;
  double penetration_min = -0.03;
  double floating_height = 0.30;
  double floating_variance = 0.08;
};

// Kinematic filters, applied in order: length, near-static motion, ground
// penetration, floating. Returns the first reason that rejects.
inline FilterReason filter_kinematic(const MotionClip& clip, const FilterThresholds& th = {}) {
  const int t_len = clip.length();
  if (t_len < th.min_frames) return FilterReason::short_clip;

  // near-static: mean consecutive joint-angle difference inside every
  // 1-second sliding window stays below the threshold
  const int win = std::max(2, static_cast<int>(std::lround(clip.fps)));
  if (t_len >= win) {
    const int joints = static_cast<int>(clip.joint_angles[0].size());
    bool all_windows_static = true;
    for (int start = 0; start + win <= t_len && all_windows_static; ++start) {
      double acc = 0.0;
      for (int t = start; t < start + win - 1; ++t)
        for (int j = 0; j < joints; ++j)
          acc += std::abs(clip.joint_angles[static_cast<size_t>(t) + 1][static_cast<size_t>(j)] -
                          clip.joint_angles[static_cast<size_t>(t)][static_cast<size_t>(j)]);
      const double mean = acc / static_cast<double>((win - 1) * joints);
      if (mean >= th.static_motion) all_windows_static = false;
    }
    if (all_windows_static) return FilterReason::near_static;
  }

  // lowest site height per frame
  std::vector<double> z_min(static_cast<size_t>(t_len));
  for (int t = 0; t < t_len; ++t) {
    double m = clip.frames[static_cast<size_t>(t)][0].z;
    for (const auto& p : clip.frames[static_cast<size_t>(t)]) m = std::min(m, p.z);
    z_min[static_cast<size_t>(t)] = m;
  }
  auto median_of = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  if (t_len >= win) {
    const std::vector<double> first(z_min.begin(), z_min.begin() + win);
    const std::vector<double> last(z_min.end() - win, z_min.end());
    const double global_min = *std::min_element(z_min.begin(), z_min.end());
    if (median_of(last) < median_of(first) - th.penetration_drop &&
        global_min < th.penetration_min)
      return FilterReason::penetration;
  }

  // floating: terminal (foot) site never approaches the ground and barely moves
  const int foot = clip.site_count() - 1;
  double foot_min = clip.frames[0][static_cast<size_t>(foot)].z;
  double sum = 0.0, sum_sq = 0.0;
  for (int t = 0; t < t_len; ++t) {
    const double z = clip.frames[static_cast<size_t>(t)][static_cast<size_t>(foot)].z;
    foot_min = std::min(foot_min, z);
    sum += z;
    sum_sq += z * z;
  }
  const double mean = sum / t_len;
  const double variance = sum_sq / t_len - mean * mean;
  if (foot_min > th.floating_height && variance < th.floating_variance)
    return FilterReason::floating;

  return FilterReason::ok;
}

// Root-aligned mean per-joint position error: site 0 is the root, the average
// runs over the non-root sites j = 1..J.
inline double rollout_mpjpe(const MotionClip& ref, const MotionClip& roll) {
  if (ref.length() != roll.length())
    throw std::invalid_argument("rollout_mpjpe: length mismatch " + std::to_string(ref.length()) +
                                " vs " + std::to_string(roll.length()));
  if (ref.site_count() != roll.site_count())
    throw std::invalid_argument("rollout_mpjpe: site count mismatch");
  const int t_len = ref.length();
  const int joints = ref.site_count() - 1;
  double acc = 0.0;
  for (int t = 0; t < t_len; ++t) {
    const auto& rf = ref.frames[static_cast<size_t>(t)];
    const auto& lf = roll.frames[static_cast<size_t>(t)];
    for (int j = 1; j <= joints; ++j) {
      const double dx = (lf[static_cast<size_t>(j)].x - lf[0].x) - (rf[static_cast<size_t>(j)].x - rf[0].x);
      const double dz = (lf[static_cast<size_t>(j)].z - lf[0].z) - (rf[static_cast<size_t>(j)].z - rf[0].z);
      acc += std::sqrt(dx * dx + dz * dz);
    }
  }
  return acc / (static_cast<double>(t_len) * joints);
}

// Mean third-order finite-difference jerk of the non-root sites, in m/s^3.
inline double rollout_jerk(const MotionClip& roll) {
  const int t_len = roll.length();
  if (t_len < 4) throw std::invalid_argument("rollout_jerk: need at least 4 frames, got " +
                                             std::to_string(t_len));
  const int joints = roll.site_count() - 1;
  const double dt = 1.0 / roll.fps;
  const double dt3 = dt * dt * dt;
  double acc = 0.0;
  for (int t = 0; t + 3 < t_len; ++t) {
    for (int j = 1; j <= joints; ++j) {
      auto site = [&](int ti) { return roll.frames[static_cast<size_t>(ti)][static_cast<size_t>(j)]; };
      const double dx = site(t + 3).x - 3.0 * site(t + 2).x + 3.0 * site(t + 1).x - site(t).x;
      const double dz = site(t + 3).z - 3.0 * site(t + 2).z + 3.0 * site(t + 1).z - site(t).z;
      acc += std::sqrt(dx * dx + dz * dz) / dt3;
    }
  }
  return acc / (static_cast<double>(t_len - 3) * joints);
}

struct RolloutGate {
  double max_mpjpe = 0.15;  // m, inclusive reject
  double max_jerk = 600.0;  // m/s^3, inclusive reject
};

inline bool gate_rollout(const MotionClip& ref, const MotionClip& roll,
                         const RolloutGate& gate = {}) {
  return rollout_mpjpe(ref, roll) < gate.max_mpjpe && rollout_jerk(roll) < gate.max_jerk;
}

// Isotropic Gaussian action perturbation; the executed action is perturbed
// while the clean action is kept as supervision.
inline Action perturb_action(const Action& a, double sigma, Rng& rng) {
  Action out = a;
  for (auto& v : out.target_angles) v += sigma * rng.normal();
  return out;
}

// Prepend L_max copies of the first state, then slice windows of
// L_max + H frames stepping by stride. Window count for T >= H is
// floor((T - H) / stride) + 1; shorter trajectories yield none.
inline std::vector<WindowSample> build_windows(const TrackedTrajectory& traj, int l_max, int horizon,
                                               int stride) {
  if (horizon < 1) throw std::invalid_argument("build_windows: horizon must be >= 1");
  if (stride < 1) throw std::invalid_argument("build_windows: stride must be >= 1");
  std::vector<WindowSample> out;
  const int t_len = static_cast<int>(traj.states.size());
  if (t_len < horizon) return out;

  std::vector<std::vector<double>> padded;
  padded.reserve(static_cast<size_t>(t_len + l_max));
  for (int i = 0; i < l_max; ++i) padded.push_back(traj.states[0]);
  for (const auto& s : traj.states) padded.push_back(s);

  const int count = (t_len - horizon) / stride + 1;
  out.reserve(static_cast<size_t>(count));
  for (int w = 0; w < count; ++w) {
    const int start = w * stride;
    WindowSample sample;
    sample.instruction_id = traj.instruction_id;
    sample.history.assign(padded.begin() + start, padded.begin() + start + l_max);
    sample.target_states.assign(traj.states.begin() + start, traj.states.begin() + start + horizon);
    sample.target_actions.assign(traj.actions.begin() + start, traj.actions.begin() + start + horizon);
    out.push_back(std::move(sample));
  }
  return out;
}

enum class Split : uint8_t { train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

// Seeded 80/10/10 split by trajectory index.
inline std::vector<Split> assign_splits(int count, Rng& rng, double train_frac = 0.8,
                                        double val_frac = 0.1) {
  std::vector<int> order(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) order[static_cast<size_t>(i)] = i;
  rng.shuffle(order);
  std::vector<Split> splits(static_cast<size_t>(count), Split::train);
  const int n_train = static_cast<int>(std::lround(train_frac * count));
  const int n_val = static_cast<int>(std::lround(val_frac * count));
  for (int i = 0; i < count; ++i) {
    if (i < n_train)
      splits[static_cast<size_t>(order[static_cast<size_t>(i)])] = Split::train;
    else if (i < n_train + n_val)
      splits[static_cast<size_t>(order[static_cast<size_t>(i)])] = Split::val;
    else
      splits[static_cast<size_t>(order[static_cast<size_t>(i)])] = Split::test;
  }
  return splits;
}

// Clip view of a tracked trajectory (shared site/angle data).
inline MotionClip clip_from_trajectory(const TrackedTrajectory& traj, double fps) {
  MotionClip clip;
  clip.frames = traj.sites;
  clip.joint_angles = traj.joint_angles;
  clip.fps = fps;
  clip.instruction_id = traj.instruction_id;
  return clip;
}

}  // namespace chainflow
