//! The map state: particle arena, per-frame pyramid index, mixture
//! coefficients, and the egocentric box bookkeeping.

use std::collections::BTreeSet;

use nalgebra::Vector3;

use crate::config::{ConfigError, FilterParams, MapConfig};
use crate::geometry::{self, Pose, PyramidGrid, VoxelGrid};
use crate::store::{Flag, Particle, PyramidIndex, Stored, VoxelArena};

/// Voxel-indexed particle arena plus everything the filter phases share.
pub struct MapState {
    pub cfg: MapConfig,
    pub params: FilterParams,
    pub grid: VoxelGrid,
    pub pyramids: PyramidGrid,
    /// Activation windows per FOV pyramid, for the configured half width.
    pub windows: Vec<Vec<u32>>,
    pub activation_n: u32,
    pub arena: VoxelArena,
    pub index: PyramidIndex,
    /// Mixture coefficient lambda_1 per voxel, from the previous frame.
    pub dst_lambda1: Vec<f32>,
    /// Live particles per voxel when the coefficients were computed.
    pub dst_count: Vec<u32>,
    /// Posterior weight mass per voxel from the last fused sweep.
    pub voxel_mass: Vec<f64>,
    /// Map center: the robot position of the current frame.
    pub center: Vector3<f64>,
    pub pose: Pose,
    pub seed: u64,
    pub frame: u64,
    /// Timestamp of the current frame.
    pub now: f64,
    /// Total weight of the current newborn cohort, kept current by the phases.
    pub newborn_mass: f64,
    /// World-lattice cells currently holding time particles.
    time_seeded: BTreeSet<(i64, i64, i64)>,
}

impl MapState {
    pub fn new(cfg: MapConfig, params: FilterParams, seed: u64) -> Result<MapState, ConfigError> {
        let cfg = cfg.normalize()?;
        params.validate()?;
        let n_v = cfg.n_voxels();
        let slots_per_voxel =
            ((cfg.eta1 * params.l_max as f64 / n_v as f64).ceil() as usize).max(1);
        let pyramids = PyramidGrid::from_config(&cfg);
        let theta = cfg.pyramid_angle;
        let pyd_cap = ((cfg.eta2 * params.l_max as f64 * theta * theta
            / (2.0 * std::f64::consts::PI * std::f64::consts::PI))
            .ceil() as usize)
            .max(1);
        let activation_n = geometry::activation_n(&cfg)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let windows = pyramids.fov_windows(activation_n);
        let n_f = pyramids.n_fov();
        Ok(MapState {
            grid: VoxelGrid::new(&cfg),
            arena: VoxelArena::new(n_v, slots_per_voxel),
            index: PyramidIndex::new(n_f, pyd_cap),
            dst_lambda1: vec![0.5; n_v],
            dst_count: vec![0; n_v],
            voxel_mass: vec![0.0; n_v],
            windows,
            activation_n,
            pyramids,
            center: Vector3::zeros(),
            pose: Pose::identity(),
            seed,
            frame: 0,
            now: 0.0,
            newborn_mass: 0.0,
            time_seeded: BTreeSet::new(),
            cfg,
            params,
        })
    }

    /// Measurement bin capacity per pyramid (theta^2 / theta_snsr^2).
    pub fn measurement_bin_cap(&self) -> usize {
        let q = self.cfg.pyramid_angle / self.cfg.theta_snsr;
        ((q * q).round() as usize).max(1)
    }

    /// Moves the box to a new robot position and starts the next frame.
    pub fn begin_frame(&mut self, pose: Pose, timestamp: f64) {
        self.center = pose.position;
        self.pose = pose;
        self.now = timestamp;
        self.frame += 1;
    }

    /// Mixture coefficient used when spawning at a point in `voxel`.
    ///
    /// A voxel with enough live particles uses its own coefficient. A voxel
    /// without history borrows the count-weighted average of its immediate
    /// neighbors, so the leading edge of a moving obstacle inherits the
    /// body's evidence instead of restarting at the half/half guess; only
    /// when the whole neighborhood is empty does the guess apply.
    pub fn lambda1_for_birth(&self, voxel: usize) -> f64 {
        let min = self.params.dst_min_particles;
        if self.dst_count[voxel] >= min {
            return self.dst_lambda1[voxel] as f64;
        }
        let dims = self.grid.dims();
        let (ix, iy, iz) = self.grid.split(voxel);
        let mut weighted = 0.0;
        let mut total = 0u64;
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny, nz) = (ix as i64 + dx, iy as i64 + dy, iz as i64 + dz);
                    if nx < 0
                        || ny < 0
                        || nz < 0
                        || nx >= dims[0] as i64
                        || ny >= dims[1] as i64
                        || nz >= dims[2] as i64
                    {
                        continue;
                    }
                    let n = nx as usize + ny as usize * dims[0] + nz as usize * dims[0] * dims[1];
                    let count = self.dst_count[n];
                    if count >= min {
                        weighted += self.dst_lambda1[n] as f64 * count as f64;
                        total += count as u64;
                    }
                }
            }
        }
        if total > 0 {
            weighted / total as f64
        } else {
            0.5
        }
    }

    /// Seeds time particles in world-lattice cells that newly entered the
    /// box, and forgets cells that left it. No-op unless the feature is on.
    pub fn seed_time_particles(&mut self) -> u64 {
        if !self.params.time_particles {
            return 0;
        }
        let edge = self.cfg.voxel_edge;
        let half = [
            self.cfg.map_size[0] / 2.0,
            self.cfg.map_size[1] / 2.0,
            self.cfg.map_size[2] / 2.0,
        ];
        // cells whose center lies inside the box
        let lo_of = |c: f64, h: f64| ((c - h) / edge - 0.5).ceil() as i64;
        let hi_of = |c: f64, h: f64| ((c + h) / edge - 0.5).floor() as i64;
        let lo = [
            lo_of(self.center.x, half[0]),
            lo_of(self.center.y, half[1]),
            lo_of(self.center.z, half[2]),
        ];
        let hi = [
            hi_of(self.center.x, half[0]),
            hi_of(self.center.y, half[1]),
            hi_of(self.center.z, half[2]),
        ];
        self.time_seeded.retain(|&(x, y, z)| {
            x >= lo[0] && x <= hi[0] && y >= lo[1] && y <= hi[1] && z >= lo[2] && z <= hi[2]
        });
        let per_voxel = self.params.time_particles_per_voxel.max(1);
        let mut seeded = 0u64;
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if self.time_seeded.contains(&(x, y, z)) {
                        continue;
                    }
                    let base = Vector3::new(x as f64 * edge, y as f64 * edge, z as f64 * edge);
                    for i in 0..per_voxel {
                        let frac = (i as f64 + 0.5) / per_voxel as f64;
                        let pos = base + Vector3::repeat(frac * edge);
                        if let Some(v) = self.grid.index(pos, self.center) {
                            let p = Particle {
                                flag: Flag::Time,
                                weight: 0.0,
                                velocity: Vector3::zeros(),
                                position: pos.cast::<f32>(),
                                stamp: -1.0,
                            };
                            if let Stored::At(_) = self.arena.add(v, p) {
                                seeded += 1;
                            }
                        }
                    }
                    self.time_seeded.insert((x, y, z));
                }
            }
        }
        seeded
    }

    /// Writes the particle dump (one record per live particle).
    pub fn dump_particles<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", crate::store::DUMP_HEADER)?;
        for (voxel, slot, p) in self.arena.iter_live() {
            writeln!(w, "{}", crate::store::dump_record(voxel, slot, p))?;
        }
        Ok(())
    }
}
