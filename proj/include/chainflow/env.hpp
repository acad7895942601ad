#pragma once

// Planar articulated-chain simulator. A free root (x, z, theta) carries K
// PD-actuated revolute joints; links extend from the root and the terminal
// site acts as the foot. Dynamics use a constant diagonal mass matrix with
// exact geometric Jacobians for gravity and ground-contact generalized
// forces, integrated with one semi-implicit Euler step per control step.
// step() is a pure function of (state, action, config).

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace chainflow {

inline constexpr double kPi = 3.14159265358979323846;

struct Vec2 {
  double x = 0.0;
  double z = 0.0;
};

struct EnvConfig {
  int joint_count = 4;            // K
  double link_length = 0.25;      // m
  double link_mass = 1.0;         // kg
  double gravity = 9.81;          // m/s^2
  double dt = 1.0 / 30.0;         // s
  double pd_kp = 60.0;
  double pd_kd = 5.0;
  double ground_stiffness = 2000.0;
  double ground_damping = 50.0;
  double fall_height = 0.15;      // m, root height below which the chain counts as fallen

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0)) throw std::invalid_argument(std::string("EnvConfig: ") + name + " must be positive");
    };
    if (joint_count < 1) throw std::invalid_argument("EnvConfig: joint_count must be >= 1");
    positive(link_length, "link_length");
    positive(link_mass, "link_mass");
    if (gravity < 0.0) throw std::invalid_argument("EnvConfig: gravity must be >= 0");
    positive(dt, "dt");
    positive(pd_kp, "pd_kp");
    positive(pd_kd, "pd_kd");
    positive(ground_stiffness, "ground_stiffness");
    positive(ground_damping, "ground_damping");
    positive(fall_height, "fall_height");
    if (dt > 1.0 / 30.0 + 1e-12) throw std::invalid_argument("EnvConfig: dt must be <= 1/30 s");
  }
};

// Torque clamp bounding the energy a bad policy can inject per step.
inline constexpr double kTorqueLimit = 200.0;

struct EnvState {
  double root_x = 0.0;
  double root_z = 0.0;
  double root_theta = 0.0;
  double root_vx = 0.0;
  double root_vz = 0.0;
  double root_omega = 0.0;
  std::vector<double> joint_angles;      // K
  std::vector<double> joint_velocities;  // K

  bool finite() const {
    auto ok = [](double v) { return std::isfinite(v); };
    if (!(ok(root_x) && ok(root_z) && ok(root_theta) && ok(root_vx) && ok(root_vz) &&
          ok(root_omega)))
      return false;
    for (double v : joint_angles)
      if (!ok(v)) return false;
    for (double v : joint_velocities)
      if (!ok(v)) return false;
    return true;
  }
};

struct Action {
  std::vector<double> target_angles;  // K, clamped to [-pi, pi] before PD
};

inline int state_dim(const EnvConfig& cfg) {
  return 5 + 2 * cfg.joint_count + 2 * (cfg.joint_count + 1);
}
inline int action_dim(const EnvConfig& cfg) { return cfg.joint_count; }

// Site 0 is the root; site j extends from site j-1 along the accumulated
// link angle phi_j = theta + sum_{i<=j} q_i.
inline std::vector<Vec2> forward_kinematics(const EnvState& s, const EnvConfig& cfg) {
  std::vector<Vec2> sites(static_cast<size_t>(cfg.joint_count) + 1);
  sites[0] = {s.root_x, s.root_z};
  double phi = s.root_theta;
  for (int j = 0; j < cfg.joint_count; ++j) {
    phi += s.joint_angles[static_cast<size_t>(j)];
    sites[static_cast<size_t>(j) + 1] = {
        sites[static_cast<size_t>(j)].x + cfg.link_length * std::cos(phi),
        sites[static_cast<size_t>(j)].z + cfg.link_length * std::sin(phi)};
  }
  return sites;
}

// Constant inertias: root rotation uses the rest-pose chain inertia; each
// joint uses its distal sub-chain inertia about the pivot. Every rotational
// inertia is floored so that ground-contact forces acting through the longest
// possible lever arms stay inside the stability region of one explicit step
// at cfg.dt (spring: k_eff dt^2/I < 4, damper: c_eff dt/I < 2; margin 1.5x).
struct EnvInertia {
  double total_mass = 0.0;
  double root_inertia = 0.0;
  std::vector<double> joint_inertia;
  double attitude_stiffness = 0.0;  // passive root attitude spring (ankle-support analogue)
  double attitude_damping = 0.0;
};

inline EnvInertia compute_inertia(const EnvConfig& cfg) {
  EnvInertia out;
  const int k = cfg.joint_count;
  const double m = cfg.link_mass;
  const double len = cfg.link_length;
  out.total_mass = m * k;
  const double rod = m * len * len / 12.0;
  auto lever_sq_sum = [len](int n_distal) {
    double s = 0.0;
    for (int i = 1; i <= n_distal; ++i) s += static_cast<double>(i) * static_cast<double>(i);
    return s * len * len;
  };
  // stiffness bound: (kp + k_ground * sum J^2) dt^2 / I < 4
  // damping bound:   (kd + c_ground * sum J^2) dt   / I < 2
  auto stability_floor = [&](double lever_sq, double kp, double kd) {
    const double spring = (kp + cfg.ground_stiffness * lever_sq) * cfg.dt * cfg.dt / 4.0;
    const double damper = (kd + cfg.ground_damping * lever_sq) * cfg.dt / 2.0;
    return 1.5 * std::max(spring, damper);
  };
  out.joint_inertia.resize(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) {
    // links j..K-1 hang from pivot j (0-indexed)
    double inertia = 0.0;
    for (int l = j; l < k; ++l) {
      const double r = (static_cast<double>(l - j) + 0.5) * len;
      inertia += m * r * r + rod;
    }
    out.joint_inertia[static_cast<size_t>(j)] =
        std::max(inertia, stability_floor(lever_sq_sum(k - j), cfg.pd_kp, cfg.pd_kd));
  }
  double root = 0.0;
  for (int l = 0; l < k; ++l) {
    const double r = (static_cast<double>(l) + 0.5) * len;
    root += m * r * r + rod;
  }
  out.root_inertia = std::max(root, stability_floor(lever_sq_sum(k), 0.0, 0.0));

  // A point foot cannot balance an inverted chain open loop; a passive
  // attitude spring on the root stands in for the foot-support polygon of
  // the 3D articulated body. Sized to dominate the destabilizing contact
  // torque (~ total weight times the chain length) with margin.
  out.attitude_stiffness = 5.0 * out.total_mass * cfg.gravity * len * static_cast<double>(k);
  out.attitude_damping = std::sqrt(std::max(out.attitude_stiffness * out.root_inertia, 0.0));
  return out;
}

namespace detail_env {

// Generalized force accumulator over Q = (x, z, theta, q_1..q_K).
struct GenForce {
  double fx = 0.0, fz = 0.0, torque_theta = 0.0;
  std::vector<double> torque_q;
};

// Applies a Cartesian force at a point through the Jacobian transpose.
// pivots[i] is the rotation center of generalized angle i (0 = theta/root).
inline void apply_point_force(GenForce& f, const Vec2& point, double fx, double fz,
                              const std::vector<Vec2>& pivots, int max_angle_index) {
  f.fx += fx;
  f.fz += fz;
  for (int i = 0; i <= max_angle_index; ++i) {
    const Vec2& pv = pivots[static_cast<size_t>(i)];
    // d(point)/d(angle_i) = rotate(point - pivot_i) by 90 degrees
    const double jx = -(point.z - pv.z);
    const double jz = point.x - pv.x;
    const double torque = jx * fx + jz * fz;
    if (i == 0)
      f.torque_theta += torque;
    else
      f.torque_q[static_cast<size_t>(i - 1)] += torque;
  }
}

// Vertical velocity of a chain point given generalized velocities.
inline double point_vz(const Vec2& point, const EnvState& s, const std::vector<Vec2>& pivots,
                       int max_angle_index) {
  double vz = s.root_vz;
  for (int i = 0; i <= max_angle_index; ++i) {
    const Vec2& pv = pivots[static_cast<size_t>(i)];
    const double omega = i == 0 ? s.root_omega : s.joint_velocities[static_cast<size_t>(i - 1)];
    vz += omega * (point.x - pv.x);
  }
  return vz;
}

}  // namespace detail_env

inline EnvState step(const EnvState& state, const Action& action, const EnvConfig& cfg) {
  if (!state.finite()) throw std::invalid_argument("step: non-finite state");
  for (double a : action.target_angles)
    if (!std::isfinite(a)) throw std::invalid_argument("step: non-finite action");
  if (static_cast<int>(action.target_angles.size()) != cfg.joint_count)
    throw std::invalid_argument("step: action size " + std::to_string(action.target_angles.size()) +
                                " vs joint count " + std::to_string(cfg.joint_count));

  const int k = cfg.joint_count;
  const EnvInertia inertia = compute_inertia(cfg);
  const auto sites = forward_kinematics(state, cfg);

  // pivots: angle 0 (theta) rotates about the root; joint i rotates about site i-1
  std::vector<Vec2> pivots(static_cast<size_t>(k) + 1);
  pivots[0] = sites[0];
  for (int i = 1; i <= k; ++i) pivots[static_cast<size_t>(i)] = sites[static_cast<size_t>(i - 1)];

  detail_env::GenForce f;
  f.torque_q.assign(static_cast<size_t>(k), 0.0);

  // gravity acts at each link center of mass; link l moves with theta and
  // joints 1..l+1
  for (int l = 0; l < k; ++l) {
    const Vec2 com = {0.5 * (sites[static_cast<size_t>(l)].x + sites[static_cast<size_t>(l) + 1].x),
                      0.5 * (sites[static_cast<size_t>(l)].z + sites[static_cast<size_t>(l) + 1].z)};
    detail_env::apply_point_force(f, com, 0.0, -cfg.link_mass * cfg.gravity, pivots, l + 1);
  }

  // passive root attitude spring-damper
  f.torque_theta += -inertia.attitude_stiffness * state.root_theta -
                    inertia.attitude_damping * state.root_omega;

  // PD torques on joints
  for (int j = 0; j < k; ++j) {
    const double target =
        std::clamp(action.target_angles[static_cast<size_t>(j)], -kPi, kPi);
    double tau = cfg.pd_kp * (target - state.joint_angles[static_cast<size_t>(j)]) -
                 cfg.pd_kd * state.joint_velocities[static_cast<size_t>(j)];
    tau = std::clamp(tau, -kTorqueLimit, kTorqueLimit);
    f.torque_q[static_cast<size_t>(j)] += tau;
  }

  // semi-implicit Euler: velocities from non-contact forces first
  EnvState next = state;
  next.root_vx = state.root_vx + cfg.dt * f.fx / inertia.total_mass;
  next.root_vz = state.root_vz + cfg.dt * f.fz / inertia.total_mass;
  next.root_omega = state.root_omega + cfg.dt * f.torque_theta / inertia.root_inertia;
  for (int j = 0; j < k; ++j)
    next.joint_velocities[static_cast<size_t>(j)] =
        state.joint_velocities[static_cast<size_t>(j)] +
        cfg.dt * f.torque_q[static_cast<size_t>(j)] / inertia.joint_inertia[static_cast<size_t>(j)];

  // Ground contact: vertical penalty force -k*penetration - c*velocity on any
  // penetrating site, clamped at zero (no adhesion). The damping term uses
  // the end-of-step velocity, resolved by fixed-order Gauss-Seidel sweeps so
  // impacts cannot gain energy; the result is deterministic.
  {
    std::vector<int> active;
    for (int j = 0; j <= k; ++j)
      if (sites[static_cast<size_t>(j)].z < 0.0) active.push_back(j);
    if (!active.empty()) {
      std::vector<double> force(active.size(), 0.0);
      // effective inverse mass of each site's vertical motion
      std::vector<double> winv(active.size(), 0.0);
      std::vector<std::vector<double>> jac(active.size());  // d(z_site)/dQ
      for (size_t s = 0; s < active.size(); ++s) {
        const int j = active[s];
        const Vec2& p = sites[static_cast<size_t>(j)];
        auto& row = jac[s];
        row.assign(static_cast<size_t>(k) + 3, 0.0);  // (x, z, theta, q1..qK)
        row[1] = 1.0;
        for (int i = 0; i <= j; ++i)
          row[static_cast<size_t>(2 + i)] = p.x - pivots[static_cast<size_t>(i)].x;
        double w = row[1] * row[1] / inertia.total_mass +
                   row[2] * row[2] / inertia.root_inertia;
        for (int i = 1; i <= k; ++i)
          w += row[static_cast<size_t>(2 + i)] * row[static_cast<size_t>(2 + i)] /
               inertia.joint_inertia[static_cast<size_t>(i - 1)];
        winv[s] = w;
      }
      auto site_vz = [&](size_t s) {
        const auto& row = jac[s];
        double vz = row[1] * next.root_vz + row[2] * next.root_omega;
        for (int i = 1; i <= k; ++i)
          vz += row[static_cast<size_t>(2 + i)] * next.joint_velocities[static_cast<size_t>(i - 1)];
        return vz;
      };
      auto apply_impulse = [&](size_t s, double dF) {
        const auto& row = jac[s];
        const double imp = cfg.dt * dF;
        next.root_vz += imp * row[1] / inertia.total_mass;
        next.root_omega += imp * row[2] / inertia.root_inertia;
        for (int i = 1; i <= k; ++i)
          next.joint_velocities[static_cast<size_t>(i - 1)] +=
              imp * row[static_cast<size_t>(2 + i)] / inertia.joint_inertia[static_cast<size_t>(i - 1)];
      };
      const int kSweeps = 8;
      for (int sweep = 0; sweep < kSweeps; ++sweep) {
        for (size_t s = 0; s < active.size(); ++s) {
          const double z = sites[static_cast<size_t>(active[s])].z;
          const double vz = site_vz(s);
          // solve F = max(0, -k z - c (vz + dt w (F - F_old)))
          double target = (-cfg.ground_stiffness * z - cfg.ground_damping * vz +
                           cfg.ground_damping * cfg.dt * winv[s] * force[s]) /
                          (1.0 + cfg.ground_damping * cfg.dt * winv[s]);
          target = std::max(0.0, target);
          apply_impulse(s, target - force[s]);
          force[s] = target;
        }
      }
    }
  }

  // positions advance with the new velocities
  next.root_x = state.root_x + cfg.dt * next.root_vx;
  next.root_z = state.root_z + cfg.dt * next.root_vz;
  next.root_theta = state.root_theta + cfg.dt * next.root_omega;
  for (int j = 0; j < k; ++j)
    next.joint_angles[static_cast<size_t>(j)] =
        state.joint_angles[static_cast<size_t>(j)] +
        cfg.dt * next.joint_velocities[static_cast<size_t>(j)];
  return next;
}

// Fixed layout: [root z, root theta, root vx, root vz, root omega,
//                q (K), qd (K), site positions in the root frame (2(K+1))].
inline std::vector<double> to_state_vector(const EnvState& s, const EnvConfig& cfg) {
  std::vector<double> v;
  v.reserve(static_cast<size_t>(state_dim(cfg)));
  v.push_back(s.root_z);
  v.push_back(s.root_theta);
  v.push_back(s.root_vx);
  v.push_back(s.root_vz);
  v.push_back(s.root_omega);
  for (double q : s.joint_angles) v.push_back(q);
  for (double qd : s.joint_velocities) v.push_back(qd);
  const auto sites = forward_kinematics(s, cfg);
  const double c = std::cos(-s.root_theta), sn = std::sin(-s.root_theta);
  for (const auto& p : sites) {
    const double dx = p.x - s.root_x, dz = p.z - s.root_z;
    v.push_back(c * dx - sn * dz);
    v.push_back(sn * dx + c * dz);
  }
  return v;
}

inline bool is_fallen(const EnvState& s, const EnvConfig& cfg) {
  return s.root_z < cfg.fall_height;
}

// Rest pose: chain extended straight down, terminal site touching the ground.
inline std::vector<double> rest_pose(const EnvConfig& cfg) {
  std::vector<double> q(static_cast<size_t>(cfg.joint_count), 0.0);
  q[0] = -kPi / 2.0;
  return q;
}

inline EnvState initial_state(const EnvConfig& cfg) {
  EnvState s;
  s.root_z = cfg.link_length * cfg.joint_count;
  s.joint_angles = rest_pose(cfg);
  s.joint_velocities.assign(static_cast<size_t>(cfg.joint_count), 0.0);
  return s;
}

// Total mechanical energy of the model system: kinetic (constant inertias) +
// gravity + contact-spring + PD-spring storage toward `target`. Used by the
// dissipation property test.
inline double mechanical_energy(const EnvState& s, const Action& target, const EnvConfig& cfg) {
  const EnvInertia inertia = compute_inertia(cfg);
  double e = 0.5 * inertia.total_mass * (s.root_vx * s.root_vx + s.root_vz * s.root_vz) +
             0.5 * inertia.root_inertia * s.root_omega * s.root_omega;
  for (int j = 0; j < cfg.joint_count; ++j)
    e += 0.5 * inertia.joint_inertia[static_cast<size_t>(j)] *
         s.joint_velocities[static_cast<size_t>(j)] * s.joint_velocities[static_cast<size_t>(j)];
  const auto sites = forward_kinematics(s, cfg);
  for (int l = 0; l < cfg.joint_count; ++l) {
    const double com_z = 0.5 * (sites[static_cast<size_t>(l)].z + sites[static_cast<size_t>(l) + 1].z);
    e += cfg.link_mass * cfg.gravity * com_z;
  }
  for (const auto& p : sites)
    if (p.z < 0.0) e += 0.5 * cfg.ground_stiffness * p.z * p.z;
  e += 0.5 * inertia.attitude_stiffness * s.root_theta * s.root_theta;
  for (int j = 0; j < cfg.joint_count; ++j) {
    const double err = std::clamp(target.target_angles[static_cast<size_t>(j)], -kPi, kPi) -
                       s.joint_angles[static_cast<size_t>(j)];
    e += 0.5 * cfg.pd_kp * err * err;
  }
  return e;
}

}  // namespace chainflow
