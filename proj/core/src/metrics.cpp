// Copyright 2026 The fsdrive Authors
// SPDX-License-Identifier: Apache-2.0

#include "fsdrive/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <nlohmann/json.hpp>

#include "fsdrive/error.hpp"
#include "fsdrive/rng.hpp"

namespace fsd::metrics {

namespace {

constexpr double kPsdTolerance = 1e-8;

void CheckWaypoints(std::span<const double> d) {
  FSD_CHECK(d.size() == world::kHorizon, ErrorKind::kShape,
            "expected 6 per-waypoint values, got " + std::to_string(d.size()));
}

double Round(double x, int decimals) {
  const double s = std::pow(10.0, decimals);
  return std::round(x * s) / s;
}

nlohmann::ordered_json TripleJson(const Triple& t, int decimals) {
  return {{"1s", Round(t.at1s, decimals)},
          {"2s", Round(t.at2s, decimals)},
          {"3s", Round(t.at3s, decimals)},
          {"avg", Round(t.avg, decimals)}};
}

// Eigenvalues of a symmetric matrix; tiny negatives are clamped to zero.
Eigen::MatrixXd PsdSqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  FSD_CHECK(es.info() == Eigen::Success, ErrorKind::kNumeric, std::string("eigendecomposition failed for ") + what);
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  for (int i = 0; i < ev.size(); ++i) {
    FSD_CHECK(ev[i] >= -kPsdTolerance * scale, ErrorKind::kNumeric,
              std::string(what) + " is not positive semi-definite (eigenvalue " + std::to_string(ev[i]) + ")");
    ev[i] = std::sqrt(std::max(0.0, ev[i]));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

Triple MakeTriple(double at1s, double at2s, double at3s) { return {at1s, at2s, at3s, (at1s + at2s + at3s) / 3.0}; }

Triple PerTimestep(std::span<const double> d) {
  CheckWaypoints(d);
  return MakeTriple(d[1], d[3], d[5]);
}

Triple Cumulative(std::span<const double> d) {
  CheckWaypoints(d);
  auto mean_to = [&](int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += d[i];
    return s / n;
  };
  return MakeTriple(mean_to(2), mean_to(4), mean_to(6));
}

std::array<double, world::kHorizon> WaypointDistances(const world::Trajectory& pred, const world::Trajectory& gt) {
  std::array<double, world::kHorizon> d{};
  for (int k = 0; k < world::kHorizon; ++k) d[k] = (pred.waypoints[k] - gt.waypoints[k]).Norm();
  return d;
}

Triple L2UniAd(const world::Trajectory& pred, const world::Trajectory& gt) {
  return PerTimestep(WaypointDistances(pred, gt));
}

Triple L2Stp3(const world::Trajectory& pred, const world::Trajectory& gt) {
  return Cumulative(WaypointDistances(pred, gt));
}

CollisionRates Collisions(std::span<const world::CollisionReport> reports) {
  FSD_CHECK(!reports.empty(), ErrorKind::kDegenerate, "collision rates need at least one report");
  std::array<double, world::kHorizon> pct{};
  for (const auto& r : reports) {
    for (int k = 0; k < world::kHorizon; ++k) pct[k] += r.per_waypoint[k] ? 1.0 : 0.0;
  }
  for (double& p : pct) p = 100.0 * p / static_cast<double>(reports.size());
  return {PerTimestep(pct), Cumulative(pct)};
}

// ---------------------------------------------------------------------------

GaussStats FitGaussian(const std::vector<std::vector<double>>& features) {
  FSD_CHECK(!features.empty(), ErrorKind::kDegenerate, "cannot fit a Gaussian to an empty set");
  const int dim = static_cast<int>(features.front().size());
  const int n = static_cast<int>(features.size());
  Eigen::MatrixXd x(n, dim);
  for (int i = 0; i < n; ++i) {
    FSD_CHECK(static_cast<int>(features[i].size()) == dim, ErrorKind::kShape, "ragged feature set");
    for (int j = 0; j < dim; ++j) x(i, j) = features[i][j];
  }
  const Eigen::VectorXd mu = x.colwise().mean();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(dim, dim);
  if (n > 1) {
    const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    cov = (c.transpose() * c) / static_cast<double>(n - 1);
  }
  if (n < dim + 1) cov += kShrinkage * Eigen::MatrixXd::Identity(dim, dim);
  cov = 0.5 * (cov + cov.transpose());

  GaussStats s;
  s.dim = dim;
  s.mean.assign(mu.data(), mu.data() + dim);
  s.cov.resize(static_cast<size_t>(dim) * dim);
  for (int i = 0; i < dim; ++i) {
    for (int j = 0; j < dim; ++j) s.cov[i * dim + j] = cov(i, j);
  }
  return s;
}

double FrechetDistance(const GaussStats& a, const GaussStats& b) {
  FSD_CHECK(a.dim == b.dim && a.dim > 0, ErrorKind::kShape, "Gaussian dimensions differ");
  const int d = a.dim;
  const Eigen::Map<const Eigen::VectorXd> mu_a(a.mean.data(), d), mu_b(b.mean.data(), d);
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> ca(a.cov.data(), d, d),
      cb(b.cov.data(), d, d);
  const Eigen::MatrixXd sa = 0.5 * (Eigen::MatrixXd(ca) + Eigen::MatrixXd(ca).transpose());
  const Eigen::MatrixXd sb = 0.5 * (Eigen::MatrixXd(cb) + Eigen::MatrixXd(cb).transpose());
  const Eigen::MatrixXd root_a = PsdSqrt(sa, "covariance A");
  PsdSqrt(sb, "covariance B");
  Eigen::MatrixXd inner = root_a * sb * root_a;
  inner = 0.5 * (inner + inner.transpose());
  const double tr_cross = PsdSqrt(inner, "covariance product").trace();
  const double value = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_cross;
  FSD_CHECK(std::isfinite(value), ErrorKind::kNumeric, "Frechet distance is not finite");
  return std::max(0.0, value);
}

FrameFeatures::FrameFeatures(int capacity, int dim, uint64_t seed) : capacity_(capacity), dim_(dim) {
  FSD_CHECK(capacity > 0 && dim > 0, ErrorKind::kConfig, "feature projection needs positive sizes");
  Rng rng(seed);
  projection_.resize(static_cast<size_t>(capacity) * dim);
  for (double& w : projection_) w = rng.Normal();
}

std::vector<double> FrameFeatures::Of(const codec::TokenGrid& grid) const {
  FSD_CHECK(!grid.ids.empty(), ErrorKind::kShape, "empty token grid");
  std::vector<double> f(dim_, 0.0);
  const double w = 1.0 / static_cast<double>(grid.ids.size());
  for (int id : grid.ids) {
    FSD_CHECK(id >= 0 && id < capacity_, ErrorKind::kRange, "codebook id outside feature histogram");
    const double* row = projection_.data() + static_cast<size_t>(id) * dim_;
    for (int j = 0; j < dim_; ++j) f[j] += w * row[j];
  }
  return f;
}

std::vector<double> FrameFeatures::Of(const raster::Frame& frame, const codec::Codebook& codebook) const {
  return Of(codec::EncodeFrame(frame, codebook));
}

double Ffd(std::span<const raster::Frame> a, std::span<const raster::Frame> b, const codec::Codebook& codebook) {
  const FrameFeatures features(codebook.capacity());
  auto fit = [&](std::span<const raster::Frame> set) {
    std::vector<std::vector<double>> f;
    f.reserve(set.size());
    for (const auto& frame : set) f.push_back(features.Of(frame, codebook));
    return FitGaussian(f);
  };
  return FrechetDistance(fit(a), fit(b));
}

// ---------------------------------------------------------------------------

double VqaAccuracy(std::span<const std::string> predictions, std::span<const std::string> references) {
  FSD_CHECK(predictions.size() == references.size(), ErrorKind::kShape, "prediction and reference counts differ");
  FSD_CHECK(!references.empty(), ErrorKind::kDegenerate, "accuracy of an empty set");
  size_t hits = 0;
  for (size_t i = 0; i < references.size(); ++i) hits += predictions[i] == references[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(references.size());
}

MetricsReport Aggregate(std::span<const PlanEvalRow> rows) {
  FSD_CHECK(!rows.empty(), ErrorKind::kDegenerate, "no evaluation rows");
  MetricsReport r;
  std::vector<world::CollisionReport> reports;
  for (const auto& row : rows) {
    const Triple u = PerTimestep(row.distances), s = Cumulative(row.distances);
    r.l2_uniad.at1s += u.at1s;
    r.l2_uniad.at2s += u.at2s;
    r.l2_uniad.at3s += u.at3s;
    r.l2_stp3.at1s += s.at1s;
    r.l2_stp3.at2s += s.at2s;
    r.l2_stp3.at3s += s.at3s;
    reports.push_back(row.collision);
    r.n_clamped += row.clamped ? 1 : 0;
  }
  const double n = static_cast<double>(rows.size());
  r.l2_uniad = MakeTriple(r.l2_uniad.at1s / n, r.l2_uniad.at2s / n, r.l2_uniad.at3s / n);
  r.l2_stp3 = MakeTriple(r.l2_stp3.at1s / n, r.l2_stp3.at2s / n, r.l2_stp3.at3s / n);
  r.collision = Collisions(reports);
  r.n_samples = static_cast<int>(rows.size());
  return r;
}

std::string MetricsReport::ToJson() const {
  nlohmann::ordered_json j;
  j["variant"] = variant;
  j["uniad"] = {{"l2", TripleJson(l2_uniad, 2)}, {"coll", TripleJson(collision.uniad, 2)}};
  j["stp3"] = {{"l2", TripleJson(l2_stp3, 2)}, {"coll", TripleJson(collision.stp3, 2)}};
  if (ffd) j["ffd"] = Round(*ffd, 1);
  if (vqa_acc) j["vqa_acc"] = Round(*vqa_acc, 4);
  j["n_samples"] = n_samples;
  j["n_clamped"] = n_clamped;
  j["config_hash"] = config_hash;
  j["raw"] = {{"l2_uniad_avg", l2_uniad.avg},
              {"l2_stp3_avg", l2_stp3.avg},
              {"coll_uniad_avg", collision.uniad.avg},
              {"coll_stp3_avg", collision.stp3.avg}};
  if (ffd) j["raw"]["ffd"] = *ffd;
  j["conventions_note"] =
      "uniad: value at the 1s/2s/3s waypoint; stp3: mean over all waypoints up to the horizon; avg: mean of the "
      "three horizon values; collision in percent; ffd: Frechet distance of projected codebook histograms";
  return j.dump(2);
}

}  // namespace fsd::metrics
