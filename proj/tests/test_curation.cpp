#include "doctest.h"

#include <cmath>

#include "chainflow/curation.hpp"
#include "chainflow/expert.hpp"
#include "chainflow/serialize.hpp"

using namespace chainflow;

namespace {

// flat clip: all sites at a constant height, no joint motion
MotionClip constant_clip(int t_len, double height, int sites = 5, double fps = 30.0) {
  MotionClip clip;
  clip.fps = fps;
  for (int t = 0; t < t_len; ++t) {
    std::vector<Vec2> frame(static_cast<size_t>(sites));
    for (int j = 0; j < sites; ++j) frame[static_cast<size_t>(j)] = {0.25 * j, height};
    clip.frames.push_back(frame);
    clip.joint_angles.push_back(std::vector<double>(4, 0.0));
  }
  return clip;
}

MotionClip expert_clip(const std::string& text, int t_len = 120) {
  EnvConfig cfg;
  Vocabulary vocab;
  MotionClip clip;
  clip.fps = 1.0 / cfg.dt;
  EnvState s = initial_state(cfg);
  for (int t = 0; t < t_len; ++t) {
    const Action a = scripted_expert(vocab, text, t, cfg);
    s = step(s, a, cfg);
    clip.frames.push_back(forward_kinematics(s, cfg));
    clip.joint_angles.push_back(s.joint_angles);
  }
  return clip;
}

}  // namespace

TEST_CASE("filter: clips shorter than 30 frames are rejected as short") {
  CHECK(filter_kinematic(constant_clip(29, 1.0)) == FilterReason::short_clip);
  CHECK(filter_kinematic(constant_clip(30, 0.1)) != FilterReason::short_clip);
}

TEST_CASE("filter: perfectly static clips are rejected as static") {
  MotionClip clip = constant_clip(90, 0.1);
  CHECK(filter_kinematic(clip) == FilterReason::near_static);
}

TEST_CASE("filter: pure floating at 0.5 m with zero variance is rejected") {
  // needs visible joint motion so the static filter does not fire first
  MotionClip clip = constant_clip(90, 0.5);
  for (int t = 0; t < clip.length(); ++t)
    clip.joint_angles[static_cast<size_t>(t)][0] = 0.2 * std::sin(0.3 * t);
  CHECK(filter_kinematic(clip) == FilterReason::floating);
}

TEST_CASE("filter: sinking below the ground trips the penetration gate") {
  MotionClip clip = constant_clip(90, 0.0);
  // move joints so the clip is not static; sink all sites over time
  for (int t = 0; t < clip.length(); ++t) {
    clip.joint_angles[static_cast<size_t>(t)][0] = 0.2 * std::sin(0.3 * t);
    const double z = 0.10 - 0.0025 * t;  // ends around -0.12
    for (auto& p : clip.frames[static_cast<size_t>(t)]) p.z = z;
  }
  CHECK(filter_kinematic(clip) == FilterReason::penetration);
}

TEST_CASE("filter: a clean expert clip is retained") {
  CHECK(filter_kinematic(expert_clip("wave tip fast")) == FilterReason::ok);
}

TEST_CASE("filter outcomes are deterministic and idempotent") {
  MotionClip clip = expert_clip("swing base slow", 90);
  const FilterReason first = filter_kinematic(clip);
  for (int i = 0; i < 3; ++i) CHECK(filter_kinematic(clip) == first);
}

TEST_CASE("mpjpe: identical clips give zero, global offsets cancel") {
  MotionClip ref = expert_clip("bend tip slow", 60);
  CHECK(rollout_mpjpe(ref, ref) == doctest::Approx(0.0));
  MotionClip shifted = ref;
  for (auto& f : shifted.frames)
    for (auto& p : f) {
      p.x += 1.7;
      p.z += -0.4;
    }
  CHECK(rollout_mpjpe(ref, shifted) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("mpjpe: single-frame single-joint offset of 0.1 m averages to 0.1/J") {
  MotionClip ref = constant_clip(1, 1.0);
  MotionClip roll = ref;
  roll.frames[0][3].z += 0.1;
  const int joints = ref.site_count() - 1;
  CHECK(rollout_mpjpe(ref, roll) == doctest::Approx(0.1 / joints).epsilon(1e-12));
}

TEST_CASE("mpjpe: translation invariance holds to 1e-12") {
  MotionClip ref = expert_clip("wave base fast", 50);
  MotionClip roll = expert_clip("wave base slow", 50);
  const double base = rollout_mpjpe(ref, roll);
  MotionClip ref_shift = ref, roll_shift = roll;
  for (auto& f : ref_shift.frames)
    for (auto& p : f) p.x += 3.25;
  for (auto& f : roll_shift.frames)
    for (auto& p : f) p.x -= 2.0;
  CHECK(std::abs(rollout_mpjpe(ref_shift, roll_shift) - base) < 1e-12);
}

TEST_CASE("mpjpe errors on length mismatch") {
  CHECK_THROWS_AS(rollout_mpjpe(constant_clip(10, 1.0), constant_clip(11, 1.0)),
                  std::invalid_argument);
}

TEST_CASE("jerk: constant and linear motion give exactly zero") {
  CHECK(rollout_jerk(constant_clip(20, 1.0)) == doctest::Approx(0.0));
  MotionClip lin = constant_clip(20, 1.0);
  for (int t = 0; t < 20; ++t)
    for (auto& p : lin.frames[static_cast<size_t>(t)]) p.x += 0.05 * t;
  CHECK(rollout_jerk(lin) < 1e-8);  // rounding residue over dt^3 only
}

TEST_CASE("jerk: cubic trajectory p = (t dt)^3 gives 6 m/s^3 at 30 fps") {
  MotionClip clip = constant_clip(40, 1.0);
  const double dt = 1.0 / 30.0;
  for (int t = 0; t < 40; ++t) {
    const double x = std::pow(t * dt, 3.0);
    for (auto& p : clip.frames[static_cast<size_t>(t)]) p.x = x;
  }
  CHECK(rollout_jerk(clip) == doctest::Approx(6.0).epsilon(1e-9));
}

TEST_CASE("jerk requires at least four frames") {
  CHECK_THROWS_AS(rollout_jerk(constant_clip(3, 1.0)), std::invalid_argument);
}

TEST_CASE("gate: thresholds are inclusive rejects") {
  MotionClip ref = constant_clip(10, 1.0);

  // exactly 0.15 m mpjpe -> reject
  MotionClip roll = ref;
  for (auto& f : roll.frames)
    for (size_t j = 1; j < f.size(); ++j) f[j].z += 0.15;
  CHECK(rollout_mpjpe(ref, roll) == doctest::Approx(0.15));
  CHECK_FALSE(gate_rollout(ref, roll));

  // clean pair is kept
  CHECK(gate_rollout(ref, ref));

  // low mpjpe but jerk around 700 -> reject
  MotionClip jerky = ref;
  const double dt3 = std::pow(1.0 / 30.0, 3.0);
  const double amp = 700.0 * dt3 / 8.0;  // third difference of alternating +-amp is 8*amp
  for (int t = 0; t < jerky.length(); ++t)
    for (size_t j = 1; j < jerky.frames[static_cast<size_t>(t)].size(); ++j)
      jerky.frames[static_cast<size_t>(t)][j].z += (t % 2 ? amp : -amp);
  CHECK(rollout_jerk(jerky) == doctest::Approx(700.0).epsilon(1e-9));
  CHECK(rollout_mpjpe(ref, jerky) < 0.15);
  CHECK_FALSE(gate_rollout(ref, jerky));
}

TEST_CASE("gate keeps (ref, ref) whenever ref passes the jerk gate") {
  MotionClip ref = expert_clip("swing tip fast", 60);
  REQUIRE(rollout_jerk(ref) < 600.0);
  CHECK(gate_rollout(ref, ref));
}

TEST_CASE("perturb_action: sigma 0 is the identity") {
  Rng rng(1);
  Action a;
  a.target_angles = {0.1, -0.5, 0.3, 0.0};
  const Action p = perturb_action(a, 0.0, rng);
  for (int j = 0; j < 4; ++j) CHECK(p.target_angles[j] == a.target_angles[j]);
}

TEST_CASE("perturb_action: noise statistics match sigma = 0.01 over 1e5 draws") {
  Rng rng(42);
  Action a;
  a.target_angles = {0.0};
  const int n = 100000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = perturb_action(a, 0.01, rng).target_angles[0];
    sum += d;
    sum_sq += d * d;
  }
  const double mean = sum / n;
  const double std_dev = std::sqrt(sum_sq / n - mean * mean);
  CHECK(std_dev >= 0.0099);
  CHECK(std_dev <= 0.0101);
  CHECK(std::abs(mean) <= 3.0 * 0.01 / std::sqrt(static_cast<double>(n)));
}

namespace {
TrackedTrajectory synthetic_traj(int t_len, int d_s = 6, int d_a = 2) {
  TrackedTrajectory tr;
  tr.instruction_id = 3;
  for (int t = 0; t < t_len; ++t) {
    std::vector<double> s(static_cast<size_t>(d_s), static_cast<double>(t));
    std::vector<double> a(static_cast<size_t>(d_a), static_cast<double>(-t));
    tr.states.push_back(s);
    tr.actions.push_back(a);
    tr.sites.push_back(std::vector<Vec2>(3));
    tr.joint_angles.push_back(std::vector<double>(2, 0.0));
  }
  return tr;
}
}  // namespace

TEST_CASE("windows: T = H yields exactly one window whose history is all padding") {
  const int h = 4;
  TrackedTrajectory tr = synthetic_traj(h);
  const auto windows = build_windows(tr, 8, h, 10);
  REQUIRE(windows.size() == 1);
  for (const auto& row : windows[0].history)
    for (size_t i = 0; i < row.size(); ++i) CHECK(row[i] == tr.states[0][i]);
  for (int t = 0; t < h; ++t) CHECK(windows[0].target_states[t][0] == static_cast<double>(t));
}

TEST_CASE("windows: paper-scale L_max 154 and H 4 give 158-frame windows") {
  TrackedTrajectory tr = synthetic_traj(200);
  const auto windows = build_windows(tr, 154, 4, 2);
  REQUIRE_FALSE(windows.empty());
  CHECK(windows[0].history.size() + windows[0].target_states.size() == 158);
}

TEST_CASE("windows: count follows floor((T - H)/stride) + 1 and stride 2 halves it") {
  for (int t_len : {40, 41, 57}) {
    TrackedTrajectory tr = synthetic_traj(t_len);
    const auto w1 = build_windows(tr, 16, 4, 1);
    const auto w2 = build_windows(tr, 16, 4, 2);
    CHECK(static_cast<int>(w1.size()) == (t_len - 4) / 1 + 1);
    CHECK(static_cast<int>(w2.size()) == (t_len - 4) / 2 + 1);
    const int diff = static_cast<int>(w1.size()) - 2 * static_cast<int>(w2.size());
    CHECK(std::abs(diff + 1) <= 1);  // halving up to +-1
  }
  // too-short trajectories produce an empty list
  CHECK(build_windows(synthetic_traj(3), 16, 4, 1).empty());
}

TEST_CASE("windows: every emitted sample has exact history and target lengths") {
  TrackedTrajectory tr = synthetic_traj(50);
  for (const auto& w : build_windows(tr, 12, 4, 3)) {
    CHECK(w.history.size() == 12);
    CHECK(w.target_states.size() == 4);
    CHECK(w.target_actions.size() == 4);
    CHECK(w.instruction_id == 3);
  }
}

TEST_CASE("windows: targets stay contiguous with history") {
  TrackedTrajectory tr = synthetic_traj(30);
  const int l_max = 8;
  const auto windows = build_windows(tr, l_max, 4, 1);
  for (size_t w = 0; w < windows.size(); ++w) {
    // last history frame is the trajectory frame just before the first target
    const auto& hist_last = windows[w].history.back();
    const auto& tgt_first = windows[w].target_states.front();
    const double expect_hist = w == 0 ? 0.0 : static_cast<double>(w - 1);
    CHECK(hist_last[0] == expect_hist);
    CHECK(tgt_first[0] == static_cast<double>(w));
  }
}

TEST_CASE("splits: seeded 80/10/10 assignment is reproducible") {
  Rng rng_a(7), rng_b(7);
  const auto s1 = assign_splits(100, rng_a);
  const auto s2 = assign_splits(100, rng_b);
  CHECK(s1 == s2);
  int train = 0, val = 0, test = 0;
  for (Split s : s1) {
    train += s == Split::train;
    val += s == Split::val;
    test += s == Split::test;
  }
  CHECK(train == 80);
  CHECK(val == 10);
  CHECK(test == 10);
}

TEST_CASE("dataset container round-trips through disk") {
  TrackedTrajectory tr = synthetic_traj(20, 6, 2);
  auto windows = build_windows(tr, 8, 4, 2);
  DatasetHeader h;
  h.d_s = 6;
  h.d_a = 2;
  h.joint_count = 2;
  h.l_max = 8;
  h.horizon = 4;
  const std::string path = "/tmp/chainflow_test_dataset.bin";
  save_dataset(path, h, windows);
  DatasetHeader h2;
  const auto loaded = load_dataset(path, &h2);
  CHECK(h2.d_s == 6);
  CHECK(h2.l_max == 8);
  REQUIRE(loaded.size() == windows.size());
  for (size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].instruction_id == windows[i].instruction_id);
    for (size_t t = 0; t < loaded[i].history.size(); ++t)
      for (size_t d = 0; d < loaded[i].history[t].size(); ++d)
        CHECK(loaded[i].history[t][d] ==
              doctest::Approx(windows[i].history[t][d]).epsilon(1e-6));
  }
}

TEST_CASE("trajectory container round-trips exactly") {
  EnvConfig cfg;
  TrackedTrajectory tr = synthetic_traj(15, state_dim(cfg), 4);
  tr.sites.assign(15, std::vector<Vec2>(5, {0.5, -0.25}));
  tr.joint_angles.assign(15, std::vector<double>(4, 0.7));
  TrajectoryFileHeader h{state_dim(cfg), 4, 4, 30.0};
  const std::string path = "/tmp/chainflow_test_traj.bin";
  save_trajectories(path, h, {tr, tr});
  const auto loaded = load_trajectories(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].states == tr.states);
  CHECK(loaded[0].actions == tr.actions);
  CHECK(loaded[1].joint_angles == tr.joint_angles);
}
