//! Coordinate conversions, voxel and pyramid subspace indexing, activation
//! neighborhoods, and the analytic bounds that size the activation space.

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use thiserror::Error;

use crate::config::{MapConfig, NoiseModel};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("activation bound infeasible: {0}; increase r_min or decrease fov_v")]
    Infeasible(String),
}

/// Spherical coordinate with zenith measured from +z and azimuth from +x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalCoord {
    pub r: f64,
    /// Zenith angle in [0, pi].
    pub zenith: f64,
    /// Azimuth angle in [0, 2*pi).
    pub azimuth: f64,
}

/// Converts a Cartesian point to spherical coordinates.
///
/// Singularities resolve to azimuth 0: the poles and the origin have no
/// defined azimuth, so a fixed value keeps the mapping total.
pub fn to_spherical(p: Vector3<f64>) -> SphericalCoord {
    let r = p.norm();
    if r < 1e-12 {
        return SphericalCoord { r: 0.0, zenith: 0.0, azimuth: 0.0 };
    }
    let zenith = (p.z / r).clamp(-1.0, 1.0).acos();
    let s = zenith.sin();
    let azimuth = if s * r < 1e-12 {
        0.0
    } else {
        let a = p.y.atan2(p.x);
        if a < 0.0 { a + 2.0 * PI } else { a }
    };
    SphericalCoord { r, zenith, azimuth }
}

pub fn to_cartesian(s: &SphericalCoord) -> Vector3<f64> {
    Vector3::new(
        s.r * s.zenith.sin() * s.azimuth.cos(),
        s.r * s.zenith.sin() * s.azimuth.sin(),
        s.r * s.zenith.cos(),
    )
}

/// Sensor pose: position plus unit quaternion rotating sensor frame to world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Pose {
        Pose { position: Vector3::zeros(), orientation: UnitQuaternion::identity() }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Pose {
        Pose { position, orientation }
    }

    #[inline]
    pub fn sensor_to_world(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.orientation * p + self.position
    }

    #[inline]
    pub fn world_to_sensor(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse_transform_vector(&(p - self.position))
    }

    /// Rotates a world-frame offset (already relative to the map center)
    /// into the sensor frame.
    #[inline]
    pub fn world_dir_to_sensor(&self, d: Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse_transform_vector(&d)
    }
}

/// Egocentric voxel grid over the map box.
///
/// Voxel cells are half-open `[min, min + l)` along each axis, indexed as
/// `ix + iy*nx + iz*nx*ny` relative to the box centered on the robot.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    dims: [usize; 3],
    edge: f64,
    half: [f64; 3],
}

impl VoxelGrid {
    pub fn new(cfg: &MapConfig) -> VoxelGrid {
        VoxelGrid {
            dims: cfg.voxel_dims(),
            edge: cfg.voxel_edge,
            half: [cfg.map_size[0] / 2.0, cfg.map_size[1] / 2.0, cfg.map_size[2] / 2.0],
        }
    }

    pub fn with_dims(dims: [usize; 3], edge: f64) -> VoxelGrid {
        VoxelGrid {
            dims,
            edge,
            half: [
                dims[0] as f64 * edge / 2.0,
                dims[1] as f64 * edge / 2.0,
                dims[2] as f64 * edge / 2.0,
            ],
        }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn edge(&self) -> f64 {
        self.edge
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Voxel id of a world point given the current map center, or `None`
    /// when the point is outside the box.
    #[inline]
    pub fn index(&self, p: Vector3<f64>, center: Vector3<f64>) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let i = ((p[a] - center[a] + self.half[a]) / self.edge).floor();
            if i < 0.0 || i >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = i as usize;
        }
        Some(idx[0] + idx[1] * self.dims[0] + idx[2] * self.dims[0] * self.dims[1])
    }

    /// World-space center of a voxel cell.
    pub fn center_of(&self, id: usize, center: Vector3<f64>) -> Vector3<f64> {
        let (ix, iy, iz) = self.split(id);
        Vector3::new(
            center.x - self.half[0] + (ix as f64 + 0.5) * self.edge,
            center.y - self.half[1] + (iy as f64 + 0.5) * self.edge,
            center.z - self.half[2] + (iz as f64 + 0.5) * self.edge,
        )
    }

    #[inline]
    pub fn split(&self, id: usize) -> (usize, usize, usize) {
        let plane = self.dims[0] * self.dims[1];
        (id % self.dims[0], (id / self.dims[0]) % self.dims[1], id / plane)
    }
}

/// Pyramid subspace division of the sensor-frame sphere.
///
/// The full sphere is an (azimuth, zenith) grid of theta-sized cells anchored
/// at azimuth 0 (sensor forward) and zenith 0 (+z pole). The FOV grid is the
/// subset of cells whose center direction lies inside the field of view;
/// those cells get dense ids `zenith_row * n_azimuth + azimuth_col`.
#[derive(Debug, Clone)]
pub struct PyramidGrid {
    theta: f64,
    n_az_full: usize,
    n_zen_full: usize,
    /// Azimuth cells on the positive side of forward (canonical 0..n_pos).
    n_pos: usize,
    /// Azimuth cells on the negative side (canonical n_az_full-n_neg..).
    n_neg: usize,
    /// First zenith row inside the FOV and the number of FOV rows.
    zen_start: usize,
    n_zen: usize,
}

impl PyramidGrid {
    pub fn new(theta: f64, fov_h: f64, fov_v: f64) -> PyramidGrid {
        let n_zen_full = (PI / theta).round().max(1.0) as usize;
        let n_az_full = 2 * n_zen_full;
        let tol = 1e-9;
        let mut n_pos = 0;
        let mut n_neg = 0;
        for b in 0..n_az_full {
            let c = (b as f64 + 0.5) * theta;
            if c <= fov_h / 2.0 + tol {
                n_pos += 1;
            } else if 2.0 * PI - c <= fov_h / 2.0 + tol {
                n_neg += 1;
            }
        }
        let zen_lo = (PI - fov_v) / 2.0;
        let zen_hi = (PI + fov_v) / 2.0;
        let mut zen_start = n_zen_full;
        let mut n_zen = 0;
        for r in 0..n_zen_full {
            let c = (r as f64 + 0.5) * theta;
            if c >= zen_lo - tol && c <= zen_hi + tol {
                if n_zen == 0 {
                    zen_start = r;
                }
                n_zen += 1;
            }
        }
        PyramidGrid { theta, n_az_full, n_zen_full, n_pos, n_neg, zen_start, n_zen }
    }

    pub fn from_config(cfg: &MapConfig) -> PyramidGrid {
        PyramidGrid::new(cfg.pyramid_angle, cfg.fov_h, cfg.fov_v)
    }

    #[inline]
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Number of pyramid subspaces in the FOV (N_f).
    #[inline]
    pub fn n_fov(&self) -> usize {
        (self.n_pos + self.n_neg) * self.n_zen
    }

    /// FOV grid width in azimuth cells.
    #[inline]
    pub fn n_azimuth(&self) -> usize {
        self.n_pos + self.n_neg
    }

    /// Full-sphere grid dimensions (zenith rows, azimuth columns).
    #[inline]
    pub fn full_dims(&self) -> (usize, usize) {
        (self.n_zen_full, self.n_az_full)
    }

    /// Canonical full-sphere cell of a direction, as (zenith row, azimuth col).
    #[inline]
    pub fn canonical_cell(&self, s: &SphericalCoord) -> (usize, usize) {
        let row = ((s.zenith / self.theta).floor() as usize).min(self.n_zen_full - 1);
        let col = ((s.azimuth / self.theta).floor() as usize).min(self.n_az_full - 1);
        (row, col)
    }

    /// Dense FOV id of a canonical cell, or `None` when the cell is outside
    /// the field of view.
    #[inline]
    pub fn fov_id_of_cell(&self, row: usize, col: usize) -> Option<usize> {
        if row < self.zen_start || row >= self.zen_start + self.n_zen {
            return None;
        }
        let n_beta = self.n_azimuth();
        let az = if col < self.n_pos {
            col
        } else if col >= self.n_az_full - self.n_neg {
            col - (self.n_az_full - n_beta)
        } else {
            return None;
        };
        Some((row - self.zen_start) * n_beta + az)
    }

    /// Canonical cell of a dense FOV id.
    #[inline]
    pub fn cell_of_fov_id(&self, id: usize) -> (usize, usize) {
        let n_beta = self.n_azimuth();
        let row = self.zen_start + id / n_beta;
        let az = id % n_beta;
        let col = if az < self.n_pos { az } else { az + (self.n_az_full - n_beta) };
        (row, col)
    }

    /// Pyramid index of a sensor-frame direction; `None` when out of the FOV.
    #[inline]
    pub fn fov_index(&self, dir_sensor: Vector3<f64>) -> Option<usize> {
        let s = to_spherical(dir_sensor);
        if s.r < 1e-12 {
            return None;
        }
        let (row, col) = self.canonical_cell(&s);
        self.fov_id_of_cell(row, col)
    }

    /// Full-sphere pyramid id (`row * n_az_full + col`).
    #[inline]
    pub fn full_id(&self, row: usize, col: usize) -> usize {
        row * self.n_az_full + col
    }

    /// Cells within `n` rows and `n` columns of a full-sphere pyramid id.
    /// Azimuth wraps; zenith clamps at the poles, so clamped sets may have
    /// fewer than (2n+1)^2 members.
    pub fn activation_neighbors(&self, full_id: usize, n: u32) -> Vec<usize> {
        let row = full_id / self.n_az_full;
        let col = full_id % self.n_az_full;
        let n = n as isize;
        let r_lo = (row as isize - n).max(0) as usize;
        let r_hi = (row as isize + n).min(self.n_zen_full as isize - 1) as usize;
        let mut out = Vec::with_capacity(((2 * n + 1) * (2 * n + 1)) as usize);
        let full_wrap = (2 * n + 1) as usize >= self.n_az_full;
        for r in r_lo..=r_hi {
            if full_wrap {
                for c in 0..self.n_az_full {
                    out.push(self.full_id(r, c));
                }
            } else {
                for dc in -n..=n {
                    let c = (col as isize + dc).rem_euclid(self.n_az_full as isize) as usize;
                    out.push(self.full_id(r, c));
                }
            }
        }
        out
    }

    /// Per-FOV-cell activation windows mapped back to dense FOV ids.
    /// Window cells that fall outside the FOV are omitted: they can hold
    /// neither measurements nor indexed particles.
    pub fn fov_windows(&self, n: u32) -> Vec<Vec<u32>> {
        (0..self.n_fov())
            .map(|id| {
                let (row, col) = self.cell_of_fov_id(id);
                self.activation_neighbors(self.full_id(row, col), n)
                    .into_iter()
                    .filter_map(|fid| {
                        self.fov_id_of_cell(fid / self.n_az_full, fid % self.n_az_full)
                    })
                    .map(|v| v as u32)
                    .collect()
            })
            .collect()
    }
}

/// Angular bound and activation width derived from the sensor noise model.
#[derive(Debug, Clone, Copy)]
pub struct ActivationBound {
    /// Largest angular offset at which a measurement can still reach the
    /// density threshold epsilon.
    pub theta_prime_max: f64,
    /// Activation neighborhood half width for the configured pyramid angle.
    pub n: u32,
}

/// Closed-form maximum of the angular threshold over the reachable
/// (range, zenith) region, for either noise model.
pub fn theta_prime_max(cfg: &MapConfig) -> Result<ActivationBound, GeometryError> {
    let cos_half_fov = (cfg.fov_v / 2.0).cos();
    let arg = match cfg.noise_model {
        NoiseModel::ConstantSigma(sigma) => {
            let log_arg = cfg.epsilon * (2.0 * PI).powf(1.5) * sigma.powi(3);
            if log_arg <= 0.0 {
                return Err(GeometryError::Infeasible("non-positive log argument".into()));
            }
            2.0 * sigma * sigma / (cfg.r_min * cfg.r_min * cos_half_fov * cos_half_fov)
                * -log_arg.ln()
        }
        NoiseModel::LinearSigma(sp) => {
            let log_arg = cfg.epsilon * (2.0 * PI).powf(1.5) * sp.powi(3) * cfg.r_min.powi(3);
            if log_arg <= 0.0 {
                return Err(GeometryError::Infeasible("non-positive log argument".into()));
            }
            2.0 * sp * sp / (cos_half_fov * cos_half_fov) * -log_arg.ln()
        }
    };
    if !(0.0..=1.0).contains(&arg) {
        return Err(GeometryError::Infeasible(format!(
            "square root argument {arg:.4} outside [0, 1]"
        )));
    }
    let theta = arg.sqrt().asin();
    let n = ((theta / cfg.pyramid_angle).ceil() as u32).max(1);
    Ok(ActivationBound { theta_prime_max: theta, n })
}

/// Effective activation half width: the configured value, or the derived one.
pub fn activation_n(cfg: &MapConfig) -> Result<u32, GeometryError> {
    match cfg.activation_n {
        Some(n) => Ok(n),
        None => theta_prime_max(cfg).map(|b| b.n),
    }
}

/// Lower bound on the distance between two points whose azimuth or zenith
/// angles differ by at least `theta_prime`.
#[inline]
pub fn lower_bound_distance(r: f64, zenith: f64, theta_prime: f64) -> f64 {
    r * zenith.sin() * theta_prime.sin()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg_with(theta_deg: f64, fov_h_deg: f64, fov_v_deg: f64) -> MapConfig {
        MapConfig {
            pyramid_angle: theta_deg.to_radians(),
            fov_h: fov_h_deg.to_radians(),
            fov_v: fov_v_deg.to_radians(),
            ..MapConfig::default()
        }
    }

    #[test]
    fn spherical_examples() {
        let s = to_spherical(Vector3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(s.r, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.zenith, PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.azimuth, 0.0, epsilon = 1e-12);

        let s = to_spherical(Vector3::new(0.0, -1.0, 0.0));
        assert_abs_diff_eq!(s.zenith, PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.azimuth, 3.0 * PI / 2.0, epsilon = 1e-12);

        let s = to_spherical(Vector3::new(0.0, 0.0, 2.0));
        assert_abs_diff_eq!(s.r, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.zenith, 0.0, epsilon = 1e-12);
        assert_eq!(s.azimuth, 0.0);
    }

    #[test]
    fn spherical_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let r = rng.gen_range(1e-3..100.0_f64);
            let zenith = rng.gen_range(0.0..PI);
            let azimuth = rng.gen_range(0.0..2.0 * PI);
            let p = to_cartesian(&SphericalCoord { r, zenith, azimuth });
            let s = to_spherical(p);
            let back = to_cartesian(&s);
            assert!((back - p).norm() < 1e-9 * r.max(1.0), "{p:?} -> {s:?}");
        }
    }

    #[test]
    fn voxel_index_examples() {
        let cfg = MapConfig::default().normalize().unwrap();
        let grid = VoxelGrid::new(&cfg);
        let c = Vector3::new(3.0, -2.0, 1.0);
        assert_eq!(grid.index(c, c), Some(38_775));
        assert_eq!(grid.index(c + Vector3::new(5.1, 0.0, 0.0), c), None);
        assert_eq!(grid.index(c + Vector3::new(-5.0, -5.0, -3.0), c), Some(0));
    }

    #[test]
    fn voxel_center_within_half_diagonal() {
        let cfg = MapConfig::default().normalize().unwrap();
        let grid = VoxelGrid::new(&cfg);
        let c = Vector3::new(0.3, 0.7, -0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let p = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-3.0..3.0),
            ) + c;
            if let Some(id) = grid.index(p, c) {
                let vc = grid.center_of(id, c);
                assert!((vc - p).norm() <= 3.0_f64.sqrt() / 2.0 * cfg.voxel_edge + 1e-12);
            }
        }
    }

    #[test]
    fn pyramid_index_full_sphere_example() {
        let grid = PyramidGrid::new(PI / 2.0, 2.0 * PI, PI);
        assert_eq!(grid.n_azimuth(), 4);
        assert_eq!(grid.n_fov(), 8);
        // forward, horizontal: zenith row 1, azimuth col 0 -> id 4
        assert_eq!(grid.fov_index(Vector3::new(1.0, 0.0, 0.0)), Some(4));
        // scale invariance
        assert_eq!(
            grid.fov_index(Vector3::new(2.0, 0.0, 0.0)),
            grid.fov_index(Vector3::new(1.0, 0.0, 0.0))
        );
    }

    #[test]
    fn pyramid_index_rejects_points_behind() {
        let grid = PyramidGrid::new(3.0_f64.to_radians(), PI / 2.0, PI / 3.0);
        assert_eq!(grid.fov_index(Vector3::new(-1.0, 0.0, 0.0)), None);
        assert_eq!(grid.fov_index(Vector3::new(1.0, 0.0, 0.05)).is_some(), true);
        assert_eq!(grid.n_fov(), 30 * 20);
    }

    #[test]
    fn pyramid_fov_ids_are_dense_and_bijective() {
        let grid = PyramidGrid::new(3.0_f64.to_radians(), PI / 2.0, PI / 3.0);
        let mut seen = vec![false; grid.n_fov()];
        let (rows, cols) = grid.full_dims();
        for r in 0..rows {
            for c in 0..cols {
                if let Some(id) = grid.fov_id_of_cell(r, c) {
                    assert!(!seen[id]);
                    seen[id] = true;
                    assert_eq!(grid.cell_of_fov_id(id), (r, c));
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn activation_neighbor_counts() {
        let grid = PyramidGrid::new(3.0_f64.to_radians(), 2.0 * PI, PI);
        let (_, cols) = grid.full_dims();
        // interior cell: full (2n+1)^2 window
        let inner = grid.full_id(30, 40);
        assert_eq!(grid.activation_neighbors(inner, 1).len(), 9);
        assert_eq!(grid.activation_neighbors(inner, 0), vec![inner]);
        // pole row clamps to a 2x3 window
        let polar = grid.full_id(0, 5);
        assert_eq!(grid.activation_neighbors(polar, 1).len(), 6);
        // symmetry: a in N(b) iff b in N(a)
        let a = grid.full_id(10, 3);
        let b = grid.full_id(11, cols - 1);
        assert_eq!(
            grid.activation_neighbors(a, 2).contains(&b),
            grid.activation_neighbors(b, 2).contains(&a)
        );
    }

    #[test]
    fn activation_neighbors_enumeration_oracle() {
        // brute-force window membership on a small full-sphere grid
        let grid = PyramidGrid::new(PI / 4.0, 2.0 * PI, PI);
        let (rows, cols) = grid.full_dims();
        for row in 0..rows {
            for col in 0..cols {
                for n in 0..3u32 {
                    let got = grid.activation_neighbors(grid.full_id(row, col), n);
                    let mut expect = Vec::new();
                    for r in 0..rows {
                        for c in 0..cols {
                            let dr = (r as isize - row as isize).abs();
                            let dc = (c as isize - col as isize).abs();
                            let dc = dc.min(cols as isize - dc);
                            if dr <= n as isize && dc <= n as isize {
                                expect.push(grid.full_id(r, c));
                            }
                        }
                    }
                    let mut got = got;
                    got.sort_unstable();
                    got.dedup();
                    assert_eq!(got, expect, "row {row} col {col} n {n}");
                }
            }
        }
    }

    #[test]
    fn theta_prime_case1_matches_density_search_oracle() {
        // oracle: bisection on g_max(dd) = eps, then dd -> angle at the
        // worst-case point r = r_min, zenith at the FOV edge
        let cfg = MapConfig {
            noise_model: NoiseModel::ConstantSigma(0.05),
            r_min: 0.5,
            fov_v: PI / 3.0,
            epsilon: 0.01,
            ..MapConfig::default()
        };
        let sigma: f64 = 0.05;
        let g = |dd: f64| (2.0 * PI).powf(-1.5) * sigma.powi(-3) * (-dd * dd / (2.0 * sigma * sigma)).exp();
        let (mut lo, mut hi) = (0.0_f64, 10.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > cfg.epsilon {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let dd = lo;
        let oracle = (dd / (cfg.r_min * (cfg.fov_v / 2.0).cos())).asin();
        let bound = theta_prime_max(&cfg).unwrap();
        assert_abs_diff_eq!(bound.theta_prime_max, oracle, epsilon = 1e-9);
        assert_abs_diff_eq!(bound.theta_prime_max, 0.567515723302377, epsilon = 1e-12);
    }

    #[test]
    fn theta_prime_case2_band_and_monotonicity() {
        let cfg = MapConfig {
            noise_model: NoiseModel::LinearSigma(0.01),
            r_min: 0.15,
            fov_v: PI / 3.0,
            epsilon: 0.01,
            ..MapConfig::default()
        };
        let t = theta_prime_max(&cfg).unwrap().theta_prime_max.to_degrees();
        assert!((2.0..=5.0).contains(&t), "theta'_max = {t} deg");
        // larger epsilon shrinks the bound
        let larger = MapConfig { epsilon: 0.05, ..cfg.clone() };
        assert!(theta_prime_max(&larger).unwrap().theta_prime_max < t.to_radians());
    }

    #[test]
    fn density_at_bound_distance_stays_below_epsilon_on_grid() {
        // 100x100 (range, zenith) grid: any point at least the bound away
        // contributes at most epsilon density
        let cfg = MapConfig {
            noise_model: NoiseModel::LinearSigma(0.01),
            r_min: 0.15,
            fov_v: PI / 3.0,
            epsilon: 0.01,
            ..MapConfig::default()
        };
        let bound = theta_prime_max(&cfg).unwrap().theta_prime_max;
        let r_max = cfg.r_max();
        for i in 0..100 {
            for j in 0..100 {
                let r = cfg.r_min + (r_max - cfg.r_min) * i as f64 / 99.0;
                let zen = (PI - cfg.fov_v) / 2.0 + cfg.fov_v * j as f64 / 99.0;
                let dd = lower_bound_distance(r, zen, bound);
                let rho = cfg.noise_model.rho(r);
                let g = (2.0 * PI).powf(-1.5) / rho.powi(3) * (-dd * dd / (2.0 * rho * rho)).exp();
                assert!(
                    g <= cfg.epsilon + 1e-12,
                    "density {g} above epsilon at r={r}, zen={zen}"
                );
            }
        }
    }

    #[test]
    fn theta_prime_infeasible_cases_signal() {
        let cfg = MapConfig {
            noise_model: NoiseModel::ConstantSigma(2.0),
            r_min: 0.15,
            fov_v: 3.0,
            epsilon: 0.01,
            ..MapConfig::default()
        };
        assert!(theta_prime_max(&cfg).is_err());
    }

    #[test]
    fn lower_bound_examples_and_monte_carlo() {
        assert_abs_diff_eq!(
            lower_bound_distance(1.0, PI / 2.0, 30.0_f64.to_radians()),
            0.5,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            lower_bound_distance(2.0, 30.0_f64.to_radians(), PI / 2.0),
            1.0,
            epsilon = 1e-12
        );

        // brute-force sampling: pairs separated by at least theta' in azimuth
        // or zenith always satisfy the bound
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut violations = 0u32;
        for _ in 0..100_000 {
            let theta_p = rng.gen_range(0.01..PI / 2.0);
            let a = SphericalCoord {
                r: rng.gen_range(0.1..10.0),
                zenith: rng.gen_range(0.05..PI - 0.05),
                azimuth: rng.gen_range(0.0..2.0 * PI),
            };
            let mut b = SphericalCoord {
                r: rng.gen_range(0.1..10.0),
                zenith: rng.gen_range(0.0..PI),
                azimuth: rng.gen_range(0.0..2.0 * PI),
            };
            // force the required separation in one angle
            let lo_room = a.zenith - theta_p > 1e-6;
            let hi_room = PI - (a.zenith + theta_p) > 1e-6;
            if rng.gen_bool(0.5) || !(lo_room || hi_room) {
                let delta = rng.gen_range(theta_p..PI);
                b.azimuth = (a.azimuth + delta).rem_euclid(2.0 * PI);
            } else if hi_room && (!lo_room || rng.gen_bool(0.5)) {
                b.zenith = rng.gen_range(a.zenith + theta_p..PI);
            } else {
                b.zenith = rng.gen_range(0.0..a.zenith - theta_p);
            }
            let d = (to_cartesian(&a) - to_cartesian(&b)).norm();
            if d < lower_bound_distance(a.r, a.zenith, theta_p) - 1e-9 {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
    }

    #[test]
    fn pose_roundtrip() {
        let q = UnitQuaternion::from_euler_angles(0.1, -0.2, 1.3);
        let pose = Pose::new(Vector3::new(1.0, 2.0, 3.0), q);
        let p = Vector3::new(0.5, -0.7, 2.0);
        let back = pose.world_to_sensor(pose.sensor_to_world(p));
        assert!((back - p).norm() < 1e-12);
    }
}
