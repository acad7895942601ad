#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "chainflow/env.hpp"
#include "chainflow/expert.hpp"
#include "chainflow/rng.hpp"

using namespace chainflow;

namespace {

EnvState random_state(const EnvConfig& cfg, Rng& rng) {
  EnvState s;
  s.root_x = rng.uniform(-0.2, 0.2);
  s.root_z = rng.uniform(0.5, 1.5);
  s.root_theta = rng.uniform(-0.3, 0.3);
  s.root_vx = rng.uniform(-0.5, 0.5);
  s.root_vz = rng.uniform(-0.5, 0.5);
  s.root_omega = rng.uniform(-0.5, 0.5);
  s.joint_angles.resize(static_cast<size_t>(cfg.joint_count));
  s.joint_velocities.resize(static_cast<size_t>(cfg.joint_count));
  s.joint_angles[0] = -kPi / 2.0 + rng.uniform(-0.5, 0.5);
  for (int j = 1; j < cfg.joint_count; ++j)
    s.joint_angles[static_cast<size_t>(j)] = rng.uniform(-0.5, 0.5);
  for (int j = 0; j < cfg.joint_count; ++j)
    s.joint_velocities[static_cast<size_t>(j)] = rng.uniform(-0.5, 0.5);
  return s;
}

}  // namespace

TEST_CASE("equilibrium: zero gravity, zero velocities, targets at current angles") {
  EnvConfig cfg;
  cfg.gravity = 0.0;
  EnvState s = initial_state(cfg);
  s.root_z = 5.0;  // far from the ground
  Action a{s.joint_angles};
  EnvState next = step(s, a, cfg);
  CHECK(next.root_z == doctest::Approx(s.root_z));
  CHECK(next.root_theta == doctest::Approx(s.root_theta));
  for (int j = 0; j < cfg.joint_count; ++j) {
    CHECK(next.joint_angles[j] == doctest::Approx(s.joint_angles[j]));
    CHECK(next.joint_velocities[j] == doctest::Approx(0.0));
  }
}

TEST_CASE("free fall from rest drops the root by g*dt^2 after one step") {
  EnvConfig cfg;
  EnvState s = initial_state(cfg);
  s.root_z = 5.0;  // no contact; straight-down pose has zero gravity torque
  Action a{s.joint_angles};
  EnvState next = step(s, a, cfg);
  const double expected = 5.0 - cfg.gravity * cfg.dt * cfg.dt;
  CHECK(next.root_z == doctest::Approx(expected).epsilon(1e-12));
  CHECK(expected == doctest::Approx(5.0 - 0.0109).epsilon(1e-3));
  for (int j = 0; j < cfg.joint_count; ++j)
    CHECK(next.joint_velocities[j] == doctest::Approx(0.0));
}

TEST_CASE("step rejects NaN inputs") {
  EnvConfig cfg;
  EnvState s = initial_state(cfg);
  Action a{s.joint_angles};
  s.root_vz = std::nan("");
  CHECK_THROWS_AS(step(s, a, cfg), std::invalid_argument);
  EnvState s2 = initial_state(cfg);
  Action bad{s2.joint_angles};
  bad.target_angles[1] = std::nan("");
  CHECK_THROWS_AS(step(s2, bad, cfg), std::invalid_argument);
}

TEST_CASE("forward kinematics places sites along accumulated link angles") {
  EnvConfig cfg;
  EnvState s;
  s.root_x = 0.0;
  s.root_z = 1.0;
  s.joint_angles.assign(4, 0.0);
  s.joint_velocities.assign(4, 0.0);

  SUBCASE("zero angles extend along +x") {
    const auto sites = forward_kinematics(s, cfg);
    for (int j = 0; j <= 4; ++j) {
      CHECK(sites[j].x == doctest::Approx(0.25 * j));
      CHECK(sites[j].z == doctest::Approx(1.0));
    }
  }
  SUBCASE("first joint at pi/2 lifts site 1 straight up") {
    s.joint_angles[0] = kPi / 2.0;
    const auto sites = forward_kinematics(s, cfg);
    CHECK(sites[1].x == doctest::Approx(0.0));
    CHECK(sites[1].z == doctest::Approx(1.25));
  }
  SUBCASE("random angles preserve link length exactly") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
      EnvState r = random_state(cfg, rng);
      const auto sites = forward_kinematics(r, cfg);
      for (int j = 1; j <= 4; ++j) {
        const double dx = sites[j].x - sites[j - 1].x;
        const double dz = sites[j].z - sites[j - 1].z;
        CHECK(std::sqrt(dx * dx + dz * dz) == doctest::Approx(cfg.link_length).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("state vector layout: d_s = 23 for K=4 and FK consistency") {
  EnvConfig cfg;
  CHECK(state_dim(cfg) == 23);
  Rng rng(9);
  EnvState s = random_state(cfg, rng);
  const auto v = to_state_vector(s, cfg);
  REQUIRE(static_cast<int>(v.size()) == 23);
  CHECK(v[0] == s.root_z);
  CHECK(v[1] == s.root_theta);
  // root-frame site positions match FK rotated into the root frame
  const auto sites = forward_kinematics(s, cfg);
  const double c = std::cos(-s.root_theta), sn = std::sin(-s.root_theta);
  for (int j = 0; j <= 4; ++j) {
    const double dx = sites[j].x - s.root_x, dz = sites[j].z - s.root_z;
    CHECK(v[13 + 2 * j] == doctest::Approx(c * dx - sn * dz).epsilon(1e-12));
    CHECK(v[14 + 2 * j] == doctest::Approx(sn * dx + c * dz).epsilon(1e-12));
  }
  // site 0 is the root: always (0, 0) in the root frame
  CHECK(v[13] == doctest::Approx(0.0));
  CHECK(v[14] == doctest::Approx(0.0));
}

TEST_CASE("all-zero state maps to zeros except FK site columns") {
  EnvConfig cfg;
  EnvState s;
  s.joint_angles.assign(4, 0.0);
  s.joint_velocities.assign(4, 0.0);
  const auto v = to_state_vector(s, cfg);
  for (int i = 0; i < 13; ++i) CHECK(v[i] == 0.0);
  for (int j = 0; j <= 4; ++j) {
    CHECK(v[13 + 2 * j] == doctest::Approx(0.25 * j));
    CHECK(v[14 + 2 * j] == doctest::Approx(0.0));
  }
}

TEST_CASE("is_fallen uses a strict threshold at fall_height") {
  EnvConfig cfg;
  EnvState s = initial_state(cfg);
  s.root_z = 0.14;
  CHECK(is_fallen(s, cfg));
  s.root_z = 0.15;
  CHECK_FALSE(is_fallen(s, cfg));
  s.root_z = 1.0;
  CHECK_FALSE(is_fallen(s, cfg));
}

TEST_CASE("step is deterministic: replaying actions reproduces states bit-exactly") {
  EnvConfig cfg;
  Rng rng(77);
  EnvState s0 = random_state(cfg, rng);
  std::vector<Action> actions;
  for (int t = 0; t < 50; ++t) {
    Action a;
    a.target_angles.resize(4);
    for (auto& v : a.target_angles) v = rng.uniform(-1.0, 1.0);
    actions.push_back(a);
  }
  auto rollout = [&](void) {
    std::vector<double> trace;
    EnvState s = s0;
    for (const auto& a : actions) {
      s = step(s, a, cfg);
      trace.push_back(s.root_z);
      trace.push_back(s.root_theta);
      for (double q : s.joint_angles) trace.push_back(q);
    }
    return trace;
  };
  const auto t1 = rollout();
  const auto t2 = rollout();
  CHECK(std::memcmp(t1.data(), t2.data(), t1.size() * sizeof(double)) == 0);
}

TEST_CASE("energy is non-increasing with zero actions over 1000 steps") {
  EnvConfig cfg;
  Rng rng(123);
  Action zero;
  zero.target_angles.assign(4, 0.0);
  for (int trial = 0; trial < 10; ++trial) {
    EnvState s = random_state(cfg, rng);
    const double e0 = mechanical_energy(s, zero, cfg);
    double peak = e0;
    for (int t = 0; t < 1000; ++t) {
      s = step(s, zero, cfg);
      REQUIRE(s.finite());
      peak = std::max(peak, mechanical_energy(s, zero, cfg));
    }
    const double e_end = mechanical_energy(s, zero, cfg);
    CHECK(e_end <= e0 + 1e-6);
    // transient integrator error stays a small fraction of the initial energy
    CHECK(peak <= e0 * 1.05 + 0.5);
  }
}

TEST_CASE("scripted expert: hold verb outputs the rest pose at every frame") {
  EnvConfig cfg;
  Vocabulary vocab;
  for (int t : {0, 7, 100, 239}) {
    const Action a = scripted_expert(vocab, "hold base slow", t, cfg);
    const auto rest = rest_pose(cfg);
    for (int j = 0; j < 4; ++j) CHECK(a.target_angles[j] == doctest::Approx(rest[j]));
  }
}

TEST_CASE("scripted expert: fast doubles the schedule frequency of slow") {
  EnvConfig cfg;
  Vocabulary vocab;
  // fast at frame t equals slow at frame 2t for every animated joint
  for (int t = 0; t < 120; ++t) {
    const Action fast = scripted_expert(vocab, "wave tip fast", t, cfg);
    const Action slow = scripted_expert(vocab, "wave tip slow", 2 * t, cfg);
    for (int j = 0; j < 4; ++j)
      CHECK(fast.target_angles[j] == doctest::Approx(slow.target_angles[j]).epsilon(1e-12));
  }
}

TEST_CASE("scripted expert: body-part slot changes only its own joints") {
  EnvConfig cfg;
  Vocabulary vocab;
  const auto base_joints = body_part_joints(cfg, 0);
  const auto tip_joints = body_part_joints(cfg, 1);
  // groups are disjoint and exclude the support joint
  for (int j : base_joints)
    for (int i : tip_joints) CHECK(j != i);
  for (int t = 0; t < 60; ++t) {
    const Action a = scripted_expert(vocab, "swing base fast", t, cfg);
    const Action b = scripted_expert(vocab, "swing tip fast", t, cfg);
    const auto rest = rest_pose(cfg);
    for (int j = 0; j < 4; ++j) {
      const bool in_base = std::find(base_joints.begin(), base_joints.end(), j) != base_joints.end();
      const bool in_tip = std::find(tip_joints.begin(), tip_joints.end(), j) != tip_joints.end();
      if (!in_base) CHECK(a.target_angles[j] == doctest::Approx(rest[j]));
      if (!in_tip) CHECK(b.target_angles[j] == doctest::Approx(rest[j]));
    }
  }
}

TEST_CASE("scripted expert rejects unknown instructions") {
  EnvConfig cfg;
  Vocabulary vocab;
  CHECK_THROWS_AS(scripted_expert(vocab, "jump base slow", 0, cfg), std::invalid_argument);
  CHECK_THROWS_AS(scripted_expert(vocab, "wave base", 0, cfg), std::invalid_argument);
}

TEST_CASE("every expert schedule keeps the chain standing for 240 frames") {
  EnvConfig cfg;
  Vocabulary vocab;
  for (int id = 0; id < vocab.size(); ++id) {
    const std::string text = vocab.instruction_text(id);
    EnvState s = initial_state(cfg);
    double min_z = s.root_z, max_z = s.root_z;
    for (int t = 0; t < 240; ++t) {
      const Action a = scripted_expert(vocab, text, t, cfg);
      s = step(s, a, cfg);
      REQUIRE(s.finite());
      min_z = std::min(min_z, s.root_z);
      max_z = std::max(max_z, s.root_z);
      REQUIRE_MESSAGE(!is_fallen(s, cfg), "instruction \"", text, "\" fell at frame ", t);
    }
    MESSAGE("instruction \"", text, "\": root z in [", min_z, ", ", max_z, "]");
    CHECK(min_z > 0.3);
    CHECK(max_z < 1.5);
  }
}
