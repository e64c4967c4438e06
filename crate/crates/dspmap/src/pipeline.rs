//! Frame ingestion and the per-frame mapping cycle: voxel filtering,
//! pyramid binning with visible lengths, then velocity estimation running
//! alongside predict + update, the fused resample sweep, and particle birth.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use thiserror::Error;

use crate::config::{ConfigError, MapMode, RunConfig};
use crate::filter;
use crate::geometry::Pose;
use crate::state::MapState;
use crate::velocity::{self, EstimateOutput, TrackerState, VelocityLabels};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("non-monotone timestamp: {now} after {prev}")]
    NonMonotoneTimestamp { prev: f64, now: f64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// One unit of ingestion: a timestamped sensor pose and its point cloud.
#[derive(Debug, Clone)]
pub struct Frame {
    pub timestamp: f64,
    pub pose: Pose,
    /// Points in the sensor frame.
    pub points: Vec<Vector3<f32>>,
}

/// Frame after voxel filtering, map-frame transform, and pyramid binning.
#[derive(Debug, Clone)]
pub struct PreprocessedFrame {
    /// Filtered points in world coordinates, stored pyramid-major.
    pub points: Vec<Vector3<f64>>,
    /// Squared range of each point from the map center.
    pub ranges2: Vec<f64>,
    /// FOV pyramid id of each point.
    pub pyramid_of: Vec<u32>,
    spans: Vec<(u32, u32)>,
    /// Max squared point range per pyramid; 0 where a pyramid has no points.
    pub visible_len2: Vec<f64>,
    pub dt: f64,
    pub dropped_bin: u32,
    pub dropped_fov: u32,
    pub dropped_outside: u32,
}

impl PreprocessedFrame {
    /// (start, len) of a pyramid's points in the flat arrays.
    #[inline]
    pub fn span(&self, pyramid: usize) -> (usize, usize) {
        let (s, l) = self.spans[pyramid];
        (s as usize, l as usize)
    }

    pub fn empty(n_pyramids: usize) -> PreprocessedFrame {
        PreprocessedFrame {
            points: Vec::new(),
            ranges2: Vec::new(),
            pyramid_of: Vec::new(),
            spans: vec![(0, 0); n_pyramids],
            visible_len2: vec![0.0; n_pyramids],
            dt: 0.0,
            dropped_bin: 0,
            dropped_fov: 0,
            dropped_outside: 0,
        }
    }
}

/// Downsamples a cloud to one centroid per occupied `res`-cell.
/// Output order follows the cell lattice, so it is reproducible.
pub fn voxel_filter(points: &[Vector3<f32>], res: f64) -> Vec<Vector3<f64>> {
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, u32)> = BTreeMap::new();
    for p in points {
        let p = p.cast::<f64>();
        let key = (
            (p.x / res).floor() as i64,
            (p.y / res).floor() as i64,
            (p.z / res).floor() as i64,
        );
        let e = cells.entry(key).or_insert((Vector3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    cells.into_values().map(|(sum, n)| sum / n as f64).collect()
}

/// Voxel-filters the cloud in the sensor frame, transforms to world, bins
/// points into FOV pyramids, and records per-pyramid visible lengths.
pub fn preprocess(
    state: &MapState,
    frame: &Frame,
    prev_timestamp: Option<f64>,
) -> Result<PreprocessedFrame, PipelineError> {
    let dt = match prev_timestamp {
        Some(prev) => {
            if frame.timestamp <= prev {
                return Err(PipelineError::NonMonotoneTimestamp {
                    prev,
                    now: frame.timestamp,
                });
            }
            frame.timestamp - prev
        }
        None => 0.0,
    };
    let n_f = state.pyramids.n_fov();
    let bin_cap = state.measurement_bin_cap();
    let center = frame.pose.position;
    let mut bins: Vec<Vec<(Vector3<f64>, f64)>> = vec![Vec::new(); n_f];
    let mut out = PreprocessedFrame::empty(n_f);
    out.dt = dt;

    for p_sensor in voxel_filter(&frame.points, state.cfg.filter_res) {
        let Some(pyd) = state.pyramids.fov_index(p_sensor) else {
            out.dropped_fov += 1;
            continue;
        };
        let world = frame.pose.sensor_to_world(p_sensor);
        if state.grid.index(world, center).is_none() {
            out.dropped_outside += 1;
            continue;
        }
        let r2 = p_sensor.norm_squared();
        if r2 > out.visible_len2[pyd] {
            out.visible_len2[pyd] = r2;
        }
        if bins[pyd].len() >= bin_cap {
            out.dropped_bin += 1;
            continue;
        }
        bins[pyd].push((world, r2));
    }

    for (pyd, bin) in bins.into_iter().enumerate() {
        out.spans[pyd] = (out.points.len() as u32, bin.len() as u32);
        for (world, r2) in bin {
            out.points.push(world);
            out.ranges2.push(r2);
            out.pyramid_of.push(pyd as u32);
        }
    }
    Ok(out)
}

/// Per-frame wall times, counts, and capacity diagnostics.
#[derive(Debug, Clone, Default)]
pub struct FrameReport {
    pub frame: u64,
    pub timestamp: f64,
    pub points_in: usize,
    pub points_used: usize,
    pub t_preprocess: Duration,
    pub t_velocity: Duration,
    pub t_predict: Duration,
    pub t_update: Duration,
    pub t_fused: Duration,
    pub t_birth: Duration,
    pub t_total: Duration,
    /// Offsets from step start; birth must start after the join.
    pub velocity_join_at: Duration,
    pub birth_start_at: Duration,
    pub live: u64,
    pub born: u64,
    pub pruned: u64,
    pub moved: u64,
    pub resample_deleted: u64,
    pub arena_dropped: u64,
    pub index_dropped: u64,
    pub bin_dropped: u32,
    pub fov_dropped: u32,
    pub outside_dropped: u32,
    pub time_seeded: u64,
}

impl FrameReport {
    pub const TABLE_HEADER: &'static str = "frame\ttimestamp\tpoints\tlive\tborn\tpruned\tdropped\tt_preprocess_ms\tt_velocity_ms\tt_predict_ms\tt_update_ms\tt_fused_ms\tt_birth_ms\tt_total_ms";

    pub fn table_row(&self) -> String {
        fn ms(d: Duration) -> String {
            format!("{:.3}", d.as_secs_f64() * 1e3)
        }
        format!(
            "{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.frame,
            self.timestamp,
            self.points_used,
            self.live,
            self.born,
            self.pruned,
            self.arena_dropped + self.index_dropped + self.bin_dropped as u64,
            ms(self.t_preprocess),
            ms(self.t_velocity),
            ms(self.t_predict),
            ms(self.t_update),
            ms(self.t_fused),
            ms(self.t_birth),
            ms(self.t_total),
        )
    }
}

/// Owns the map state and runs the per-frame cycle.
pub struct Pipeline {
    state: MapState,
    tracker: TrackerState,
    cfg: RunConfig,
    prev_timestamp: Option<f64>,
    pool: rayon::ThreadPool,
    /// Run velocity estimation on its own thread (results are identical
    /// either way; serial mode exists for profiling).
    pub concurrent_velocity: bool,
    /// Clustering/matching result of the last frame, for debug dumps.
    last_estimate: Option<EstimateOutput>,
}

impl Pipeline {
    /// Builds a pipeline with `threads` workers (0 picks the rayon default).
    pub fn new(cfg: RunConfig, seed: u64, threads: usize) -> Result<Pipeline, PipelineError> {
        let cfg = cfg.normalize()?;
        let state = MapState::new(cfg.map.clone(), cfg.filter.clone(), seed)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| PipelineError::Pool(e.to_string()))?;
        Ok(Pipeline {
            state,
            tracker: TrackerState::new(),
            cfg,
            prev_timestamp: None,
            pool,
            concurrent_velocity: true,
            last_estimate: None,
        })
    }

    pub fn state(&self) -> &MapState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut MapState {
        &mut self.state
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Clusters, matches, and velocities from the last frame's estimation.
    pub fn last_estimate(&self) -> Option<&EstimateOutput> {
        self.last_estimate.as_ref()
    }

    /// Appends the per-frame cluster/track debug rows:
    /// frame, cluster id, centroid, count, matched prev id, velocity.
    pub fn dump_clusters<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let Some(out) = &self.last_estimate else {
            return Ok(());
        };
        for (i, c) in out.clusters.iter().enumerate() {
            let matched = out.matched_prev[i].map_or("-".to_string(), |p| p.to_string());
            let vel = out.velocities[i]
                .map_or("-	-	-".to_string(), |v| format!("{}	{}	{}", v.x, v.y, v.z));
            writeln!(
                w,
                "{}	{}	{}	{}	{}	{}	{}	{}",
                self.state.frame, i, c.centroid.x, c.centroid.y, c.centroid.z, c.count, matched, vel
            )?;
        }
        Ok(())
    }

    /// Ingests one frame and runs the full cycle.
    pub fn step(&mut self, frame: &Frame) -> Result<FrameReport, PipelineError> {
        let t0 = Instant::now();
        let mut report = FrameReport {
            points_in: frame.points.len(),
            timestamp: frame.timestamp,
            ..FrameReport::default()
        };

        let tp = Instant::now();
        let pre = preprocess(&self.state, frame, self.prev_timestamp)?;
        self.prev_timestamp = Some(frame.timestamp);
        report.t_preprocess = tp.elapsed();
        report.points_used = pre.points.len();
        report.bin_dropped = pre.dropped_bin;
        report.fov_dropped = pre.dropped_fov;
        report.outside_dropped = pre.dropped_outside;

        self.state.begin_frame(frame.pose, frame.timestamp);
        report.frame = self.state.frame;
        report.time_seeded = self.state.seed_time_particles();

        let run_velocity = self.cfg.filter.mode == MapMode::Dynamic;
        let state = &mut self.state;
        let tracker = &mut self.tracker;
        let est_params = &self.cfg.estimator;
        let filter_res = self.cfg.map.filter_res;
        let v_max = self.cfg.filter.v_max;
        let pool = &self.pool;
        let dt = pre.dt;

        let mut labels = VelocityLabels::unknown(pre.points.len());
        let (predict_stats, update_stats);
        self.last_estimate = None;
        if run_velocity && self.concurrent_velocity {
            let (estimate_out, stats) = std::thread::scope(|scope| {
                let handle = scope.spawn(|| {
                    let tv = Instant::now();
                    let out =
                        velocity::estimate(&pre.points, tracker, dt, est_params, filter_res, v_max);
                    (out, tv.elapsed())
                });
                let stats = pool.install(|| {
                    let tpr = Instant::now();
                    let ps = filter::predict(state, dt);
                    let t_predict = tpr.elapsed();
                    let tu = Instant::now();
                    let us = (!pre.points.is_empty()).then(|| filter::update(state, &pre));
                    (ps, us, t_predict, tu.elapsed())
                });
                let (out, t_velocity) = handle.join().expect("velocity estimation panicked");
                report.t_velocity = t_velocity;
                (out, stats)
            });
            labels = estimate_out.labels.clone();
            self.last_estimate = Some(estimate_out);
            report.velocity_join_at = t0.elapsed();
            (predict_stats, update_stats) = (stats.0, stats.1);
            report.t_predict = stats.2;
            report.t_update = stats.3;
        } else {
            if run_velocity {
                let tv = Instant::now();
                let out =
                    velocity::estimate(&pre.points, tracker, dt, est_params, filter_res, v_max);
                labels = out.labels.clone();
                self.last_estimate = Some(out);
                report.t_velocity = tv.elapsed();
            }
            let stats = pool.install(|| {
                let tpr = Instant::now();
                let ps = filter::predict(state, dt);
                let t_predict = tpr.elapsed();
                let tu = Instant::now();
                let us = (!pre.points.is_empty()).then(|| filter::update(state, &pre));
                (ps, us, t_predict, tu.elapsed())
            });
            report.velocity_join_at = t0.elapsed();
            (predict_stats, update_stats) = (stats.0, stats.1);
            report.t_predict = stats.2;
            report.t_update = stats.3;
        }
        let _ = update_stats;
        report.pruned = predict_stats.pruned;
        report.moved = predict_stats.moved;
        report.index_dropped = predict_stats.index_dropped;

        let tf = Instant::now();
        let sweep = pool.install(|| filter::resample_occupancy_dst(state));
        report.t_fused = tf.elapsed();
        report.resample_deleted = sweep.deleted;

        report.birth_start_at = t0.elapsed();
        if !pre.points.is_empty() {
            let tb = Instant::now();
            let bs = pool.install(|| filter::birth(state, &pre, &labels));
            report.t_birth = tb.elapsed();
            report.born = bs.born;
            report.arena_dropped = predict_stats.dropped + bs.dropped;
        } else {
            report.arena_dropped = predict_stats.dropped;
        }

        report.live = state.arena.live_total();
        report.t_total = t0.elapsed();
        Ok(report)
    }
}
