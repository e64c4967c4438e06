//! Occupancy classification metrics (precision/recall/F1, PR curves, AUC),
//! velocity metrics (RMSE, Var, mean Bhattacharyya distance), and the
//! cluster-tracking baselines.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Matrix6x3, Vector3, Vector6};
use thiserror::Error;

use crate::config::EstimatorParams;
use crate::occupancy::OccupancyGrid;
use crate::sim::GroundTruthStep;
use crate::state::MapState;
use crate::store::Flag;
use crate::velocity::{extract_clusters, match_clusters, segment_ground, Cluster};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction and truth grids differ in resolution, dims, or center")]
    ResolutionMismatch,
    #[error("no estimate/truth pairs within the alignment tolerance")]
    EmptyOverlap,
    #[error("no weighted particles near the query position")]
    NoParticles,
}

/// One point of a precision-recall sweep.
#[derive(Debug, Clone, Copy)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub auc: f64,
    pub best_f1: f64,
}

/// Ground truth in grid form, scored only where observed.
#[derive(Debug, Clone)]
pub struct TruthGrid {
    pub center: Vector3<f64>,
    pub edge: f64,
    pub dims: [usize; 3],
    pub occupied: Vec<bool>,
    pub observed: Vec<bool>,
}

impl From<&GroundTruthStep> for TruthGrid {
    fn from(gt: &GroundTruthStep) -> TruthGrid {
        let n = gt.dims[0] * gt.dims[1] * gt.dims[2];
        let mut occupied = vec![false; n];
        for &i in &gt.occupied {
            occupied[i as usize] = true;
        }
        TruthGrid {
            center: gt.center,
            edge: gt.edge,
            dims: gt.dims,
            occupied,
            observed: gt.observed.clone(),
        }
    }
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Pools classification counts over all (prediction, truth) pairs per
/// threshold; only observed voxels are scored. AUC integrates precision
/// over the recall axis, extended to recall 0 on the high-threshold side.
pub fn pr_curve(
    pairs: &[(&OccupancyGrid, &TruthGrid)],
    thresholds: &[f64],
) -> Result<PrCurve, EvalError> {
    for (pred, truth) in pairs {
        if pred.dims != truth.dims
            || (pred.edge - truth.edge).abs() > 1e-9
            || (pred.center - truth.center).norm() > 1e-6
        {
            return Err(EvalError::ResolutionMismatch);
        }
    }
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let (mut tp, mut fp, mut fne) = (0u64, 0u64, 0u64);
        for (pred, truth) in pairs {
            for i in 0..pred.probs.len() {
                if !truth.observed[i] {
                    continue;
                }
                let p = pred.probs[i];
                let is_pred = p > 0.0 && p as f64 >= t;
                match (is_pred, truth.occupied[i]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fne += 1,
                    (false, false) => {}
                }
            }
        }
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 1.0 };
        let recall = if tp + fne > 0 { tp as f64 / (tp + fne) as f64 } else { 0.0 };
        points.push(PrPoint { threshold: t, precision, recall, f1: f1_score(precision, recall) });
    }
    let mut by_recall: Vec<PrPoint> = points.clone();
    by_recall.sort_by(|a, b| a.recall.partial_cmp(&b.recall).unwrap());
    let mut auc = 0.0;
    let mut prev_r = 0.0;
    let mut prev_p = by_recall.first().map_or(1.0, |p| p.precision);
    for pt in &by_recall {
        auc += (pt.recall - prev_r) * (pt.precision + prev_p) / 2.0;
        prev_r = pt.recall;
        prev_p = pt.precision;
    }
    let best_f1 = points.iter().map(|p| p.f1).fold(0.0, f64::max);
    Ok(PrCurve { points, auc, best_f1 })
}

/// Velocity estimate with an optional per-axis variance.
#[derive(Debug, Clone, Copy)]
pub struct VelocityEstimate {
    pub t: f64,
    pub mean: Vector3<f64>,
    pub var: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct VelocityTruth {
    pub t: f64,
    pub velocity: Vector3<f64>,
}

/// RMSE, mean per-axis variance, and mean Bhattacharyya distance of a
/// velocity estimate stream against truth.
#[derive(Debug, Clone, Copy)]
pub struct VelocityReport {
    pub rmse: f64,
    pub var: Option<f64>,
    pub mbd: Option<f64>,
    pub pairs: usize,
}

impl VelocityReport {
    pub fn summary_row(&self, name: &str) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        format!("{name}\t{:.4}\t{}\t{}\t{}", self.rmse, opt(self.var), opt(self.mbd), self.pairs)
    }
}

/// Bhattacharyya distance between two diagonal Gaussians.
pub fn bhattacharyya_diag(
    mu1: Vector3<f64>,
    var1: Vector3<f64>,
    mu2: Vector3<f64>,
    var2: Vector3<f64>,
) -> f64 {
    let floor = 1e-12;
    let mut d = 0.0;
    let mut log_det_mix = 0.0;
    let mut log_det_1 = 0.0;
    let mut log_det_2 = 0.0;
    for a in 0..3 {
        let v1 = var1[a].max(floor);
        let v2 = var2[a].max(floor);
        let mix = (v1 + v2) / 2.0;
        let dm = mu1[a] - mu2[a];
        d += dm * dm / mix;
        log_det_mix += mix.ln();
        log_det_1 += v1.ln();
        log_det_2 += v2.ln();
    }
    d / 8.0 + 0.5 * (log_det_mix - 0.5 * (log_det_1 + log_det_2))
}

/// Aligns estimates to truth by nearest timestamp within `tol` and reports
/// the three velocity metrics. Estimates without variance contribute to
/// RMSE only.
pub fn velocity_report(
    estimates: &[VelocityEstimate],
    truth: &[VelocityTruth],
    sigma_gt: f64,
    tol: f64,
) -> Result<VelocityReport, EvalError> {
    if estimates.is_empty() || truth.is_empty() {
        return Err(EvalError::EmptyOverlap);
    }
    let mut se = 0.0;
    let mut n = 0usize;
    let mut var_sum = 0.0;
    let mut mbd_sum = 0.0;
    let mut n_var = 0usize;
    for est in estimates {
        let nearest = truth
            .iter()
            .min_by(|a, b| {
                (a.t - est.t).abs().partial_cmp(&(b.t - est.t).abs()).unwrap()
            })
            .unwrap();
        if (nearest.t - est.t).abs() > tol {
            continue;
        }
        se += (est.mean - nearest.velocity).norm_squared();
        n += 1;
        if let Some(var) = est.var {
            var_sum += (var.x + var.y + var.z) / 3.0;
            mbd_sum += bhattacharyya_diag(
                est.mean,
                var,
                nearest.velocity,
                Vector3::repeat(sigma_gt * sigma_gt),
            );
            n_var += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyOverlap);
    }
    Ok(VelocityReport {
        rmse: (se / n as f64).sqrt(),
        var: (n_var > 0).then(|| var_sum / n_var as f64),
        mbd: (n_var > 0).then(|| mbd_sum / n_var as f64),
        pairs: n,
    })
}

/// Weighted mean and per-axis variance of particle velocities within a ball
/// around a position; the map-side velocity readout for one object.
pub fn map_velocity_estimate(
    state: &MapState,
    position: Vector3<f64>,
    radius: f64,
) -> Result<(Vector3<f64>, Vector3<f64>), EvalError> {
    let r2 = radius * radius;
    let mut w_sum = 0.0;
    let mut mean = Vector3::zeros();
    for (_, _, p) in state.arena.iter_live() {
        if p.flag == Flag::Time {
            continue;
        }
        if (p.position_f64() - position).norm_squared() <= r2 {
            w_sum += p.weight;
            mean += p.velocity.cast::<f64>() * p.weight;
        }
    }
    if w_sum <= 0.0 {
        return Err(EvalError::NoParticles);
    }
    mean /= w_sum;
    let mut var = Vector3::zeros();
    for (_, _, p) in state.arena.iter_live() {
        if p.flag == Flag::Time {
            continue;
        }
        if (p.position_f64() - position).norm_squared() <= r2 {
            let d = p.velocity.cast::<f64>() - mean;
            var += Vector3::new(d.x * d.x, d.y * d.y, d.z * d.z) * p.weight;
        }
    }
    Ok((mean, var / w_sum))
}

/// Per-step output of a baseline tracker.
#[derive(Debug, Clone, Copy)]
pub struct TrackEstimate {
    pub t: f64,
    /// Cluster center the estimate belongs to.
    pub position: Vector3<f64>,
    pub mean: Vector3<f64>,
    pub var: Option<Vector3<f64>>,
}

/// Differencing baseline: cluster, match, and differentiate matched centers.
/// No filtering, no variance.
pub fn baseline_km_diff(
    frames: &[(f64, Vec<Vector3<f64>>)],
    params: &EstimatorParams,
    filter_res: f64,
    v_max: f64,
) -> Vec<TrackEstimate> {
    let mut out = Vec::new();
    let mut prev: Option<(f64, Vec<Cluster>)> = None;
    for (t, points) in frames {
        let clusters = frame_clusters(points, params, filter_res);
        if let Some((pt, pc)) = &prev {
            let dt = t - pt;
            if dt > 0.0 {
                let matched = match_clusters(pc, &clusters, v_max * dt, params.w_count);
                for (j, m) in matched.iter().enumerate() {
                    if let Some(i) = m {
                        out.push(TrackEstimate {
                            t: *t,
                            position: clusters[j].centroid,
                            mean: (clusters[j].centroid - pc[*i].centroid) / dt,
                            var: None,
                        });
                    }
                }
            }
        }
        prev = Some((*t, clusters));
    }
    out
}

/// Kalman-filter baseline: per-track linear-Gaussian constant-velocity
/// filter over matched cluster centers.
#[derive(Debug, Clone)]
pub struct KfParams {
    pub meas_std: f64,
    pub q_pos: f64,
    pub q_vel: f64,
    pub init_vel_std: f64,
}

impl Default for KfParams {
    fn default() -> Self {
        KfParams { meas_std: 0.05, q_pos: 0.01, q_vel: 0.1, init_vel_std: 2.0 }
    }
}

struct KfTrack {
    x: Vector6<f64>,
    p: Matrix6<f64>,
}

impl KfTrack {
    fn new(c: Vector3<f64>, kf: &KfParams) -> KfTrack {
        let mut p = Matrix6::zeros();
        for a in 0..3 {
            p[(a, a)] = kf.meas_std * kf.meas_std;
            p[(a + 3, a + 3)] = kf.init_vel_std * kf.init_vel_std;
        }
        KfTrack { x: Vector6::new(c.x, c.y, c.z, 0.0, 0.0, 0.0), p }
    }

    fn predict(&mut self, dt: f64, kf: &KfParams) {
        let mut f = Matrix6::identity();
        for a in 0..3 {
            f[(a, a + 3)] = dt;
        }
        let mut q = Matrix6::zeros();
        for a in 0..3 {
            q[(a, a)] = kf.q_pos * kf.q_pos;
            q[(a + 3, a + 3)] = kf.q_vel * kf.q_vel;
        }
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + q;
    }

    fn correct(&mut self, z: Vector3<f64>, kf: &KfParams) {
        let mut h = Matrix3x6::zeros();
        for a in 0..3 {
            h[(a, a)] = 1.0;
        }
        let r = Matrix3::identity() * kf.meas_std * kf.meas_std;
        let s = h * self.p * h.transpose() + r;
        let Some(s_inv) = s.try_inverse() else { return };
        let k: Matrix6x3<f64> = self.p * h.transpose() * s_inv;
        let innovation = z - h * self.x;
        self.x += k * innovation;
        self.p = (Matrix6::identity() - k * h) * self.p;
    }

    fn velocity(&self) -> Vector3<f64> {
        Vector3::new(self.x[3], self.x[4], self.x[5])
    }

    fn velocity_var(&self) -> Vector3<f64> {
        Vector3::new(self.p[(3, 3)], self.p[(4, 4)], self.p[(5, 5)])
    }
}

/// Multi-object tracker over cluster centers: match with the assignment
/// step, then filter each track with the constant-velocity model.
pub fn baseline_km_kf(
    frames: &[(f64, Vec<Vector3<f64>>)],
    params: &EstimatorParams,
    filter_res: f64,
    v_max: f64,
    kf: &KfParams,
) -> Vec<TrackEstimate> {
    let mut out = Vec::new();
    let mut prev_clusters: Vec<Cluster> = Vec::new();
    let mut tracks: Vec<KfTrack> = Vec::new();
    let mut prev_t = None;
    for (t, points) in frames {
        let clusters = frame_clusters(points, params, filter_res);
        let dt = prev_t.map_or(0.0, |pt: f64| t - pt);
        let matched = if prev_clusters.is_empty() {
            vec![None; clusters.len()]
        } else {
            match_clusters(&prev_clusters, &clusters, v_max * dt.max(1e-6), params.w_count)
        };
        // tracks are aligned with prev_clusters by index
        let mut track_opts: Vec<Option<KfTrack>> = tracks.into_iter().map(Some).collect();
        let mut new_tracks = Vec::with_capacity(clusters.len());
        for (j, cluster) in clusters.iter().enumerate() {
            let mut track = match matched[j] {
                Some(i) => {
                    let mut tr = track_opts[i].take().expect("cluster matched twice");
                    tr.predict(dt, kf);
                    tr
                }
                None => KfTrack::new(cluster.centroid, kf),
            };
            track.correct(cluster.centroid, kf);
            out.push(TrackEstimate {
                t: *t,
                position: cluster.centroid,
                mean: track.velocity(),
                var: Some(track.velocity_var()),
            });
            new_tracks.push(track);
        }
        tracks = new_tracks;
        prev_clusters = clusters;
        prev_t = Some(*t);
    }
    out
}

fn frame_clusters(
    points: &[Vector3<f64>],
    params: &EstimatorParams,
    filter_res: f64,
) -> Vec<Cluster> {
    let (_, rest) = segment_ground(points, params.ground_height);
    extract_clusters(
        points,
        &rest,
        params.cluster_dist.unwrap_or(2.0 * filter_res),
        params.min_cluster_size,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3], probs: Vec<f32>) -> OccupancyGrid {
        OccupancyGrid {
            center: Vector3::zeros(),
            edge: 0.2,
            dims,
            probs,
            observed: None,
            timestamp: 0.0,
        }
    }

    fn truth(dims: [usize; 3], occupied: Vec<bool>) -> TruthGrid {
        let n = occupied.len();
        TruthGrid {
            center: Vector3::zeros(),
            edge: 0.2,
            dims,
            occupied,
            observed: vec![true; n],
        }
    }

    #[test]
    fn pr_counts_examples() {
        // TP=30, FP=10, FN=30 at threshold 0.5
        let mut probs = vec![0.0f32; 100];
        let mut occ = vec![false; 100];
        for i in 0..30 {
            probs[i] = 0.9;
            occ[i] = true;
        }
        for i in 30..40 {
            probs[i] = 0.9;
        }
        for i in 40..70 {
            occ[i] = true;
        }
        let g = grid([10, 10, 1], probs);
        let t = truth([10, 10, 1], occ);
        let curve = pr_curve(&[(&g, &t)], &[0.5]).unwrap();
        let p = curve.points[0];
        assert!((p.precision - 0.75).abs() < 1e-12);
        assert!((p.recall - 0.5).abs() < 1e-12);
        assert!((p.f1 - 0.6).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_auc_one() {
        let mut probs = vec![0.0f32; 50];
        let mut occ = vec![false; 50];
        for i in 0..20 {
            probs[i] = 1.0;
            occ[i] = true;
        }
        let g = grid([50, 1, 1], probs);
        let t = truth([50, 1, 1], occ);
        let thresholds: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
        let curve = pr_curve(&[(&g, &t)], &thresholds).unwrap();
        for p in &curve.points {
            assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        }
        assert!((curve.auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_free_prediction_has_zero_recall_and_auc() {
        let g = grid([10, 1, 1], vec![0.0; 10]);
        let t = truth([10, 1, 1], vec![true; 10]);
        let curve = pr_curve(&[(&g, &t)], &[0.1, 0.5, 0.9]).unwrap();
        assert!(curve.points.iter().all(|p| p.recall == 0.0));
        assert_eq!(curve.auc, 0.0);
    }

    #[test]
    fn pr_matches_naive_double_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let probs: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let occ: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let obs: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
        let g = grid([n, 1, 1], probs.clone());
        let mut t = truth([n, 1, 1], occ.clone());
        t.observed = obs.clone();
        for thr in [0.2, 0.5, 0.8] {
            let curve = pr_curve(&[(&g, &t)], &[thr]).unwrap();
            let (mut tp, mut fp, mut fne) = (0.0, 0.0, 0.0);
            for i in 0..n {
                if !obs[i] {
                    continue;
                }
                let pred = probs[i] > 0.0 && probs[i] as f64 >= thr;
                if pred && occ[i] {
                    tp += 1.0;
                } else if pred {
                    fp += 1.0;
                } else if occ[i] {
                    fne += 1.0;
                }
            }
            let p = curve.points[0];
            assert!((p.precision - tp / (tp + fp)).abs() < 1e-12);
            assert!((p.recall - tp / (tp + fne)).abs() < 1e-12);
        }
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let g = grid([10, 1, 1], vec![0.0; 10]);
        let t = truth([5, 2, 1], vec![false; 10]);
        assert_eq!(pr_curve(&[(&g, &t)], &[0.5]).unwrap_err(), EvalError::ResolutionMismatch);
    }

    #[test]
    fn bhattacharyya_examples() {
        let zero = Vector3::zeros();
        let one = Vector3::repeat(1.0);
        assert!(bhattacharyya_diag(zero, one, zero, one).abs() < 1e-12);
        let d = bhattacharyya_diag(Vector3::new(1.0, 0.0, 0.0), one, zero, one);
        assert!((d - 0.125).abs() < 1e-12);
        // symmetric
        let a = bhattacharyya_diag(Vector3::new(0.3, 0.1, 0.0), Vector3::repeat(0.5), zero, one);
        let b = bhattacharyya_diag(zero, one, Vector3::new(0.3, 0.1, 0.0), Vector3::repeat(0.5));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn velocity_report_examples() {
        let truth: Vec<VelocityTruth> = (0..10)
            .map(|i| VelocityTruth { t: i as f64 * 0.1, velocity: Vector3::new(1.0, 0.0, 0.0) })
            .collect();
        // identical estimates with the ground-truth variance
        let sg = 0.1;
        let est: Vec<VelocityEstimate> = truth
            .iter()
            .map(|t| VelocityEstimate {
                t: t.t,
                mean: t.velocity,
                var: Some(Vector3::repeat(sg * sg)),
            })
            .collect();
        let r = velocity_report(&est, &truth, sg, 0.01).unwrap();
        assert!(r.rmse.abs() < 1e-12);
        assert!(r.mbd.unwrap().abs() < 1e-12);

        // constant 1 m/s error on one axis
        let est: Vec<VelocityEstimate> = truth
            .iter()
            .map(|t| VelocityEstimate {
                t: t.t,
                mean: t.velocity + Vector3::new(0.0, 1.0, 0.0),
                var: Some(Vector3::repeat(1e-6)),
            })
            .collect();
        let r = velocity_report(&est, &truth, sg, 0.01).unwrap();
        assert!((r.rmse - 1.0).abs() < 1e-9);

        // no overlap
        let late: Vec<VelocityEstimate> = vec![VelocityEstimate {
            t: 99.0,
            mean: Vector3::zeros(),
            var: None,
        }];
        assert_eq!(velocity_report(&late, &truth, sg, 0.01).unwrap_err(), EvalError::EmptyOverlap);
    }

    fn blob(center: Vector3<f64>, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.618;
                center + Vector3::new(0.05 * a.cos(), 0.05 * a.sin(), 0.02 * (i % 3) as f64)
            })
            .collect()
    }

    #[test]
    fn km_diff_differences_centers() {
        let params = EstimatorParams::default();
        let frames: Vec<(f64, Vec<Vector3<f64>>)> = (0..3)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, blob(Vector3::new(0.2 * i as f64, 0.0, 1.0), 8))
            })
            .collect();
        let est = baseline_km_diff(&frames, &params, 0.1, 5.0);
        assert_eq!(est.len(), 2);
        for e in est {
            assert!((e.mean - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-9);
            assert!(e.var.is_none());
        }
        // stationary cluster
        let frames: Vec<(f64, Vec<Vector3<f64>>)> =
            (0..3).map(|i| (i as f64 * 0.1, blob(Vector3::new(1.0, 1.0, 1.0), 8))).collect();
        let est = baseline_km_diff(&frames, &params, 0.1, 5.0);
        assert!(est.iter().all(|e| e.mean.norm() < 1e-9));
    }

    #[test]
    fn km_kf_converges_to_batch_least_squares() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let params = EstimatorParams::default();
        let kf = KfParams::default();
        let v_true = Vector3::new(1.0, 0.3, 0.0);
        let dt = 0.1;
        let mut centroids = Vec::new();
        let frames: Vec<(f64, Vec<Vector3<f64>>)> = (0..25)
            .map(|i| {
                let t = i as f64 * dt;
                let noise = Vector3::new(
                    rng.gen_range(-0.02..0.02),
                    rng.gen_range(-0.02..0.02),
                    0.0,
                );
                let center = Vector3::new(0.0, 0.0, 1.0) + v_true * t + noise;
                let pts = blob(center, 10);
                centroids.push((t, pts.iter().sum::<Vector3<f64>>() / pts.len() as f64));
                (t, pts)
            })
            .collect();
        let est = baseline_km_kf(&frames, &params, 0.1, 5.0, &kf);
        let last = est.last().unwrap();

        // batch least-squares constant-velocity fit on the centroids
        let n = centroids.len() as f64;
        let t_mean = centroids.iter().map(|(t, _)| t).sum::<f64>() / n;
        let c_mean = centroids.iter().map(|(_, c)| c).sum::<Vector3<f64>>() / n;
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for (t, c) in &centroids {
            num += (c - c_mean) * (t - t_mean);
            den += (t - t_mean) * (t - t_mean);
        }
        let ls_v = num / den;
        assert!(
            (last.mean - ls_v).norm() <= 0.1 * ls_v.norm().max(1.0),
            "kf {:?} vs ls {:?}",
            last.mean,
            ls_v
        );
        assert!(last.var.is_some());
    }
}
