#pragma once

// Evaluation metrics over aligner embeddings and simulated site trajectories:
// batch retrieval precision, embedding distance, Frechet distance between
// fitted Gaussians, ground clearance, frame-based jerk, and survived-frame
// ratio.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/env.hpp"

namespace chainflow {

struct EvalReport {
  double r1 = 0.0, r2 = 0.0, r3 = 0.0;
  double mm_dist = 0.0;
  double fid = 0.0;
  double floating_mm = 0.0;
  double jerk_mm = 0.0;
  double duration = 0.0;

  void write_text(const std::string& path) const {
    std::ofstream out(path);
    out << "r_precision_top1=" << r1 << "\n";
    out << "r_precision_top2=" << r2 << "\n";
    out << "r_precision_top3=" << r3 << "\n";
    out << "mm_dist=" << mm_dist << "\n";
    out << "fid=" << fid << "\n";
    out << "floating_mm=" << floating_mm << "\n";
    out << "jerk_mm_per_frame3=" << jerk_mm << "\n";
    out << "duration=" << duration << "\n";
  }
  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    out << "r1,r2,r3,mm_dist,fid,floating_mm,jerk_mm_per_frame3,duration\n";
    out << r1 << "," << r2 << "," << r3 << "," << mm_dist << "," << fid << "," << floating_mm
        << "," << jerk_mm << "," << duration << "\n";
  }
};

using EmbeddingBatch = std::vector<std::vector<double>>;

// Fraction of rows whose paired column lands in the top-k similarities; ties
// resolve toward the lower index.
inline double r_precision(const EmbeddingBatch& z_s, const EmbeddingBatch& z_t, int k) {
  const int b = static_cast<int>(z_s.size());
  if (b != static_cast<int>(z_t.size()))
    throw std::invalid_argument("r_precision: batch sizes differ");
  if (b < k) throw std::invalid_argument("r_precision: batch smaller than k");
  int hits = 0;
  for (int i = 0; i < b; ++i) {
    std::vector<std::pair<double, int>> sims;
    for (int j = 0; j < b; ++j) {
      double dot = 0.0;
      for (size_t d = 0; d < z_s[static_cast<size_t>(i)].size(); ++d)
        dot += z_s[static_cast<size_t>(i)][d] * z_t[static_cast<size_t>(j)][d];
      sims.push_back({dot, j});
    }
    std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b2) {
      if (a.first != b2.first) return a.first > b2.first;
      return a.second < b2.second;
    });
    for (int r = 0; r < k; ++r)
      if (sims[static_cast<size_t>(r)].second == i) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / b;
}

inline double mm_dist(const EmbeddingBatch& z_s, const EmbeddingBatch& z_t) {
  if (z_s.size() != z_t.size()) throw std::invalid_argument("mm_dist: batch sizes differ");
  double acc = 0.0;
  for (size_t i = 0; i < z_s.size(); ++i) {
    double sq = 0.0;
    for (size_t d = 0; d < z_s[i].size(); ++d) {
      const double diff = z_s[i][d] - z_t[i][d];
      sq += diff * diff;
    }
    acc += std::sqrt(sq);
  }
  return acc / static_cast<double>(z_s.size());
}

namespace detail_fid {

inline void fit_gaussian(const EmbeddingBatch& x, Eigen::VectorXd& mean, Eigen::MatrixXd& cov) {
  const int n = static_cast<int>(x.size());
  const int d = static_cast<int>(x[0].size());
  mean = Eigen::VectorXd::Zero(d);
  for (const auto& row : x)
    for (int j = 0; j < d; ++j) mean(j) += row[static_cast<size_t>(j)];
  mean /= static_cast<double>(n);
  cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& row : x) {
    Eigen::VectorXd c(d);
    for (int j = 0; j < d; ++j) c(j) = row[static_cast<size_t>(j)] - mean(j);
    cov.noalias() += c * c.transpose();
  }
  cov /= static_cast<double>(n - 1);  // unbiased
}

// Symmetric PSD square root with the eigenvalue tolerance demanded of FID.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, double neg_tol) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd vals = es.eigenvalues();
  for (int i = 0; i < vals.size(); ++i) {
    if (vals(i) < -neg_tol)
      throw std::runtime_error("fid: matrix is not PSD beyond tolerance (eigenvalue " +
                               std::to_string(vals(i)) + ")");
    vals(i) = std::sqrt(std::max(0.0, vals(i)));
  }
  return es.eigenvectors() * vals.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail_fid

// ||mu_g - mu_r||^2 + Tr(S_g + S_r - 2 (S_g S_r)^{1/2}), with the cross term
// evaluated through the symmetrized product sqrt(S_g)^T S_r sqrt(S_g).
inline double fid(const EmbeddingBatch& gen, const EmbeddingBatch& ref) {
  if (gen.size() < 2 || ref.size() < 2)
    throw std::invalid_argument("fid: need at least 2 samples per side");
  Eigen::VectorXd mu_g, mu_r;
  Eigen::MatrixXd cov_g, cov_r;
  detail_fid::fit_gaussian(gen, mu_g, cov_g);
  detail_fid::fit_gaussian(ref, mu_r, cov_r);
  const int d = static_cast<int>(mu_g.size());
  cov_g += 1e-6 * Eigen::MatrixXd::Identity(d, d);
  cov_r += 1e-6 * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd root_g = detail_fid::psd_sqrt(cov_g, 1e-8);
  const Eigen::MatrixXd inner = root_g * cov_r * root_g;  // symmetric PSD
  const Eigen::MatrixXd cross = detail_fid::psd_sqrt(inner, 1e-8);
  const double mean_term = (mu_g - mu_r).squaredNorm();
  const double trace_term = cov_g.trace() + cov_r.trace() - 2.0 * cross.trace();
  return mean_term + trace_term;
}

// Average positive clearance of the lowest site above a 5 mm tolerance, in mm.
inline double floating_metric(const std::vector<std::vector<Vec2>>& sites) {
  if (sites.empty()) throw std::invalid_argument("floating: empty trajectory");
  constexpr double kTol = 0.005;
  double acc = 0.0;
  for (const auto& frame : sites) {
    double z_min = frame[0].z;
    for (const auto& p : frame) z_min = std::min(z_min, p.z);
    acc += std::max(z_min - kTol, 0.0);
  }
  return 1e3 * acc / static_cast<double>(sites.size());
}

// Frame-based third-difference smoothness over the non-root sites: mean
// ||p_{t+3} - 3 p_{t+2} + 3 p_{t+1} - p_t|| times 10^3, no dt normalization.
inline double jerk_metric(const std::vector<std::vector<Vec2>>& sites) {
  const int t_len = static_cast<int>(sites.size());
  if (t_len < 4) throw std::invalid_argument("jerk: need at least 4 frames, got " +
                                             std::to_string(t_len));
  const int joints = static_cast<int>(sites[0].size()) - 1;
  double acc = 0.0;
  for (int t = 0; t + 3 < t_len; ++t)
    for (int j = 1; j <= joints; ++j) {
      auto p = [&](int ti) { return sites[static_cast<size_t>(ti)][static_cast<size_t>(j)]; };
      const double dx = p(t + 3).x - 3.0 * p(t + 2).x + 3.0 * p(t + 1).x - p(t).x;
      const double dz = p(t + 3).z - 3.0 * p(t + 2).z + 3.0 * p(t + 1).z - p(t).z;
      acc += std::sqrt(dx * dx + dz * dz);
    }
  return 1e3 * acc / (static_cast<double>(t_len - 3) * joints);
}

// Ratio of survived frames to reference frames over all rollouts.
inline double duration_metric(const std::vector<std::pair<int, int>>& valid_ref) {
  int64_t valid = 0, ref = 0;
  for (const auto& [v, r] : valid_ref) {
    if (v > r) throw std::invalid_argument("duration: valid frames exceed reference frames");
    valid += v;
    ref += r;
  }
  if (ref == 0) throw std::invalid_argument("duration: total reference frames is zero");
  return static_cast<double>(valid) / static_cast<double>(ref);
}

}  // namespace chainflow
