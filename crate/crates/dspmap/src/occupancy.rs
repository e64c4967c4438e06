//! Occupancy queries at arbitrary points and resolutions, future occupancy
//! prediction, binary maps, and the optional unknown-space mask.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::config::MapMode;
use crate::rng::{substream, PHASE_PREDICT_OCC};
use crate::state::MapState;
use crate::store::Flag;

#[derive(Debug, Error, PartialEq)]
pub enum OccupancyError {
    #[error("query point outside the map box")]
    OutsideMap,
    #[error("time particles are not enabled in this map")]
    NotEnabled,
}

/// Evaluation-facing snapshot: per-voxel probability at query resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub center: Vector3<f64>,
    /// Query resolution; independent of the storage voxel edge.
    pub edge: f64,
    pub dims: [usize; 3],
    pub probs: Vec<f32>,
    pub observed: Option<Vec<bool>>,
    pub timestamp: f64,
}

impl OccupancyGrid {
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn flat(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + iy * self.dims[0] + iz * self.dims[0] * self.dims[1]
    }

    /// World center of one grid voxel.
    pub fn voxel_center(&self, id: usize) -> Vector3<f64> {
        let nx = self.dims[0];
        let ny = self.dims[1];
        let (ix, iy, iz) = (id % nx, (id / nx) % ny, id / (nx * ny));
        let half = self.half();
        Vector3::new(
            self.center.x - half.x + (ix as f64 + 0.5) * self.edge,
            self.center.y - half.y + (iy as f64 + 0.5) * self.edge,
            self.center.z - half.z + (iz as f64 + 0.5) * self.edge,
        )
    }

    fn half(&self) -> Vector3<f64> {
        Vector3::new(
            self.dims[0] as f64 * self.edge / 2.0,
            self.dims[1] as f64 * self.edge / 2.0,
            self.dims[2] as f64 * self.edge / 2.0,
        )
    }

    /// Grid voxel containing a world point, if inside.
    pub fn index_of(&self, p: Vector3<f64>) -> Option<usize> {
        let half = self.half();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let i = ((p[a] - self.center[a] + half[a]) / self.edge).floor();
            if i < 0.0 || i >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = i as usize;
        }
        Some(self.flat(idx[0], idx[1], idx[2]))
    }

    /// True when two grids share center, resolution, and dimensions.
    pub fn compatible_with(&self, other: &OccupancyGrid) -> bool {
        self.dims == other.dims
            && (self.edge - other.edge).abs() < 1e-9
            && (self.center - other.center).norm() < 1e-6
    }
}

/// Binary occupancy snapshot.
#[derive(Debug, Clone)]
pub struct BinaryGrid {
    pub center: Vector3<f64>,
    pub edge: f64,
    pub dims: [usize; 3],
    pub occupied: Vec<bool>,
}

/// Weight mass in a query voxel mapped to a probability; voxels smaller
/// than the point-object spacing get the cubic scale factor.
#[inline]
pub fn voxel_probability(mass: f64, edge: f64, spacing: f64) -> f64 {
    let p = if edge <= spacing {
        mass * (spacing / edge).powi(3)
    } else {
        mass
    };
    p.min(1.0)
}

fn grid_dims(map_size: [f64; 3], edge: f64) -> [usize; 3] {
    [
        ((map_size[0] / edge) - 1e-9).ceil().max(1.0) as usize,
        ((map_size[1] / edge) - 1e-9).ceil().max(1.0) as usize,
        ((map_size[2] / edge) - 1e-9).ceil().max(1.0) as usize,
    ]
}

/// Occupancy probability at an arbitrary point: the weight mass inside the
/// cube of side `filter_res` centered there, clamped to one.
pub fn occupancy_at(state: &MapState, p: Vector3<f64>) -> Result<f64, OccupancyError> {
    if state.grid.index(p, state.center).is_none() {
        return Err(OccupancyError::OutsideMap);
    }
    let half = state.cfg.filter_res / 2.0;
    Ok(mass_in_cube(state, p, half).min(1.0))
}

fn mass_in_cube(state: &MapState, p: Vector3<f64>, half: f64) -> f64 {
    let edge = state.grid.edge();
    let dims = state.grid.dims();
    let c = state.center;
    let box_half = [
        state.cfg.map_size[0] / 2.0,
        state.cfg.map_size[1] / 2.0,
        state.cfg.map_size[2] / 2.0,
    ];
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let lo_i = ((p[a] - half - c[a] + box_half[a]) / edge).floor().max(0.0) as usize;
        let hi_i = ((p[a] + half - c[a] + box_half[a]) / edge).floor() as i64;
        lo[a] = lo_i.min(dims[a] - 1);
        hi[a] = hi_i.clamp(0, dims[a] as i64 - 1) as usize;
    }
    let mut mass = 0.0;
    for iz in lo[2]..=hi[2] {
        for iy in lo[1]..=hi[1] {
            for ix in lo[0]..=hi[0] {
                let v = ix + iy * dims[0] + iz * dims[0] * dims[1];
                for (_, ptc) in state.arena.iter_voxel(v) {
                    let pos = ptc.position_f64();
                    if (pos.x - p.x).abs() <= half
                        && (pos.y - p.y).abs() <= half
                        && (pos.z - p.z).abs() <= half
                    {
                        mass += ptc.weight;
                    }
                }
            }
        }
    }
    mass
}

/// Full-map occupancy snapshot at resolution `edge`.
pub fn occupancy_grid(state: &MapState, edge: f64) -> OccupancyGrid {
    grid_from_positions(
        state,
        edge,
        state
            .arena
            .iter_live()
            .filter(|(_, _, p)| p.flag != Flag::Time)
            .map(|(_, _, p)| (p.position_f64(), p.weight)),
    )
}

fn grid_from_positions(
    state: &MapState,
    edge: f64,
    positions: impl Iterator<Item = (Vector3<f64>, f64)>,
) -> OccupancyGrid {
    let dims = grid_dims(state.cfg.map_size, edge);
    let mut grid = OccupancyGrid {
        center: state.center,
        edge,
        dims,
        probs: vec![0.0; dims[0] * dims[1] * dims[2]],
        observed: None,
        timestamp: state.now,
    };
    let mut mass = vec![0.0f64; grid.voxel_count()];
    for (pos, w) in positions {
        if let Some(i) = grid.index_of(pos) {
            mass[i] += w;
        }
    }
    let spacing = state.cfg.filter_res;
    for (i, m) in mass.into_iter().enumerate() {
        grid.probs[i] = voxel_probability(m, edge, spacing) as f32;
    }
    grid
}

/// Future occupancy: every particle propagated by the mixture model's mean
/// over horizon `tau`, evaluated as a fresh grid. The map is not modified.
pub fn predict_occupancy(state: &MapState, tau: f64, edge: f64) -> OccupancyGrid {
    let v_hat = state.params.v_hat;
    let mode = state.params.mode;
    grid_from_positions(
        state,
        edge,
        state
            .arena
            .iter_live()
            .filter(|(_, _, p)| p.flag != Flag::Time)
            .map(move |(_, _, p)| {
                let factor = if mode == MapMode::Static {
                    0.0
                } else {
                    let speed = p.speed();
                    if speed > v_hat {
                        1.0
                    } else if speed <= crate::filter::STATIC_SPEED {
                        0.0
                    } else {
                        0.5
                    }
                };
                let pos = p.position_f64() + p.velocity.cast::<f64>() * (tau * factor);
                (pos, p.weight)
            }),
    )
}

/// Future occupancy with per-step noise injection, spreading uncertainty
/// over the horizon. Deterministic for a given map seed and frame.
pub fn predict_occupancy_noisy(
    state: &MapState,
    tau: f64,
    edge: f64,
    steps: u32,
) -> OccupancyGrid {
    let steps = steps.max(1);
    let dt = tau / steps as f64;
    let v_hat = state.params.v_hat;
    let mode = state.params.mode;
    let (q_pos, q_vel) = (state.params.q_pos_std, state.params.q_vel_std);
    let mut item = 0u64;
    let positions: Vec<(Vector3<f64>, f64)> = state
        .arena
        .iter_live()
        .filter(|(_, _, p)| p.flag != Flag::Time)
        .map(|(_, _, p)| {
            let mut rng = substream(state.seed, &[PHASE_PREDICT_OCC, state.frame, item]);
            item += 1;
            let mut pos = p.position_f64();
            let mut vel = p.velocity.cast::<f64>();
            let dynamic = mode != MapMode::Static && p.speed() > v_hat;
            for _ in 0..steps {
                if dynamic {
                    pos += vel * dt;
                    for a in 0..3 {
                        pos[a] += q_pos * rng.sample::<f64, _>(StandardNormal);
                        vel[a] += q_vel * rng.sample::<f64, _>(StandardNormal);
                    }
                } else {
                    for a in 0..3 {
                        pos[a] += q_pos * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            (pos, p.weight)
        })
        .collect();
    grid_from_positions(state, edge, positions.into_iter())
}

/// Thresholds a probability grid into a binary one. Voxels with zero
/// probability are never occupied, so threshold 0 selects exactly the
/// voxels holding any evidence.
pub fn binarize(grid: &OccupancyGrid, threshold: f64) -> BinaryGrid {
    BinaryGrid {
        center: grid.center,
        edge: grid.edge,
        dims: grid.dims,
        occupied: grid
            .probs
            .iter()
            .map(|&p| p > 0.0 && p as f64 >= threshold)
            .collect(),
    }
}

/// Unknown-space mask at resolution `edge`: a voxel is unknown until a time
/// particle whose cell overlaps it has been refreshed by an observation.
///
/// Each time particle stands for the world-lattice cell it was seeded in,
/// so a refresh marks every query voxel that cell overlaps; the egocentric
/// grid floats freely relative to the lattice.
pub fn unknown_mask(state: &MapState, edge: f64) -> Result<Vec<bool>, OccupancyError> {
    if !state.params.time_particles {
        return Err(OccupancyError::NotEnabled);
    }
    let dims = grid_dims(state.cfg.map_size, edge);
    let n = dims[0] * dims[1] * dims[2];
    let cell = state.cfg.voxel_edge;
    let half = [
        dims[0] as f64 * edge / 2.0,
        dims[1] as f64 * edge / 2.0,
        dims[2] as f64 * edge / 2.0,
    ];
    let eps = 1e-9;
    let mut refreshed = vec![false; n];
    for (_, _, p) in state.arena.iter_live() {
        if p.flag != Flag::Time || p.stamp < 0.0 {
            continue;
        }
        let pos = p.position_f64();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let cell_min = (pos[a] / cell).floor() * cell;
            let to_grid = |w: f64| ((w - state.center[a] + half[a]) / edge).floor();
            let l = to_grid(cell_min + eps);
            let h = to_grid(cell_min + cell - eps);
            if h < 0.0 || l >= dims[a] as f64 {
                inside = false;
                break;
            }
            lo[a] = l.max(0.0) as usize;
            hi[a] = (h as usize).min(dims[a] - 1);
        }
        if !inside {
            continue;
        }
        for iz in lo[2]..=hi[2] {
            for iy in lo[1]..=hi[1] {
                for ix in lo[0]..=hi[0] {
                    refreshed[ix + iy * dims[0] + iz * dims[0] * dims[1]] = true;
                }
            }
        }
    }
    Ok(refreshed.into_iter().map(|r| !r).collect())
}

/// Horizontal slice of a grid as a lossless 16-bit grayscale image.
/// Row 0 is the +y edge; x grows to the right.
pub fn slice_image(grid: &OccupancyGrid, z: f64) -> Option<image::ImageBuffer<image::Luma<u16>, Vec<u16>>> {
    let half_z = grid.dims[2] as f64 * grid.edge / 2.0;
    let iz = ((z - grid.center.z + half_z) / grid.edge).floor();
    if iz < 0.0 || iz >= grid.dims[2] as f64 {
        return None;
    }
    let iz = iz as usize;
    let (nx, ny) = (grid.dims[0], grid.dims[1]);
    let mut img = image::ImageBuffer::new(nx as u32, ny as u32);
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        let iy = ny - 1 - y as usize;
        let p = grid.probs[grid.flat(x as usize, iy, iz)];
        *pixel = image::Luma([(p.clamp(0.0, 1.0) * 65535.0).round() as u16]);
    }
    Some(img)
}
