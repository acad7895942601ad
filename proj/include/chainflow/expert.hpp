#pragma once

// Deterministic scripted demonstration controllers, one target-angle schedule
// per instruction. Joint 1 always holds the support pose; body-part slots
// select disjoint groups among the remaining joints, the verb fixes the
// waveform and amplitude, and the speed slot scales frequency (fast = 2x
// slow).

#include <cmath>
#include <stdexcept>
#include <vector>

#include "chainflow/env.hpp"
#include "chainflow/instruction.hpp"

namespace chainflow {

struct ExpertParams {
  double slow_hz = 0.4;
  double fast_hz = 0.8;
  double wave_amp = 0.35;
  double bend_amp = 0.40;
  double swing_amp = 0.30;
};

// Joints animated by a body-part slot (0-based joint indices). Joint 0 is the
// support joint and never animates; the rest are split into a proximal and a
// distal group.
inline std::vector<int> body_part_joints(const EnvConfig& cfg, int body_part_index) {
  const int k = cfg.joint_count;
  std::vector<int> joints;
  if (k < 2) return joints;  // nothing to animate besides the support joint
  const int first = 1;
  const int mid = first + (k - first + 1) / 2;
  if (body_part_index == 0) {
    for (int j = first; j < mid; ++j) joints.push_back(j);
  } else {
    for (int j = mid; j < k; ++j) joints.push_back(j);
  }
  return joints;
}

inline Action scripted_expert(const Vocabulary& vocab, const std::string& instruction,
                              int frame_index, const EnvConfig& cfg,
                              const ExpertParams& params = {}) {
  const ParsedInstruction p = parse_instruction(vocab, instruction);
  Action a;
  a.target_angles = rest_pose(cfg);
  if (p.verb == 0) return a;  // hold: rest pose at every frame

  const double hz = p.speed == 0 ? params.slow_hz : params.fast_hz;
  const double t = frame_index * cfg.dt;
  const double phase = 2.0 * kPi * hz * t;
  const auto joints = body_part_joints(cfg, p.body_part);
  // proximal joints move the whole distal chain, so their group gets a
  // smaller amplitude to keep the support margin
  const double group_scale = p.body_part == 0 ? 0.7 : 1.0;
  for (size_t gi = 0; gi < joints.size(); ++gi) {
    double offset = 0.0;
    switch (p.verb) {
      case 1:  // wave: quadrature sinusoid across the group
        offset = params.wave_amp * std::sin(phase + 0.5 * kPi * static_cast<double>(gi));
        break;
      case 2:  // bend: unipolar raised-cosine flex
        offset = params.bend_amp * 0.5 * (1.0 - std::cos(phase));
        break;
      case 3:  // swing: flattened bipolar waveform holding its extremes
        offset = params.swing_amp * std::tanh(2.5 * std::sin(phase));
        break;
      default:
        throw std::invalid_argument("scripted_expert: verb index out of range");
    }
    a.target_angles[static_cast<size_t>(joints[gi])] += group_scale * offset;
  }
  return a;
}

}  // namespace chainflow
