//! Synthetic scenario simulator: analytic worlds of boxes and cylinders with
//! walking agents, a depth-sensor ray caster with range-proportional noise,
//! and ground-truth occupancy plus observed-mask generation.

use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::config::NoiseModel;
use crate::geometry::Pose;
use crate::pipeline::Frame;
use crate::rng::{substream, PHASE_SIM};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// Axis-aligned box obstacle.
#[derive(Debug, Clone, Copy)]
pub struct BoxObstacle {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl BoxObstacle {
    /// Unsigned distance from a point to the box surface.
    pub fn surface_distance(&self, p: Vector3<f64>) -> f64 {
        let c = (self.min + self.max) / 2.0;
        let b = (self.max - self.min) / 2.0;
        let q = Vector3::new(
            (p.x - c.x).abs() - b.x,
            (p.y - c.y).abs() - b.y,
            (p.z - c.z).abs() - b.z,
        );
        let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        (outside + inside).abs()
    }

    /// Nearest positive ray intersection within `t_max`.
    pub fn raycast(&self, o: Vector3<f64>, d: Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            if d[a].abs() < 1e-12 {
                if o[a] < self.min[a] || o[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((self.min[a] - o[a]) * inv, (self.max[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return None;
            }
        }
        (t0 > 1e-9).then_some(t0)
    }
}

/// Vertical cylinder: base center, radius, height.
#[derive(Debug, Clone, Copy)]
pub struct Cylinder {
    pub base: Vector3<f64>,
    pub radius: f64,
    pub height: f64,
}

impl Cylinder {
    pub fn surface_distance(&self, p: Vector3<f64>) -> f64 {
        let dxy = ((p.x - self.base.x).powi(2) + (p.y - self.base.y).powi(2)).sqrt();
        let zc = self.base.z + self.height / 2.0;
        let qx = dxy - self.radius;
        let qy = (p.z - zc).abs() - self.height / 2.0;
        let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
        let inside = qx.max(qy).min(0.0);
        (outside + inside).abs()
    }

    pub fn raycast(&self, o: Vector3<f64>, d: Vector3<f64>, t_max: f64) -> Option<f64> {
        let (z0, z1) = (self.base.z, self.base.z + self.height);
        let mut best: Option<f64> = None;
        let mut consider = |t: f64| {
            if t > 1e-9 && t <= t_max && best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        };
        // lateral surface
        let ox = o.x - self.base.x;
        let oy = o.y - self.base.y;
        let a = d.x * d.x + d.y * d.y;
        if a > 1e-12 {
            let b = 2.0 * (ox * d.x + oy * d.y);
            let c = ox * ox + oy * oy - self.radius * self.radius;
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let s = disc.sqrt();
                for t in [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)] {
                    let z = o.z + t * d.z;
                    if z >= z0 && z <= z1 {
                        consider(t);
                    }
                }
            }
        }
        // caps
        if d.z.abs() > 1e-12 {
            for zc in [z0, z1] {
                let t = (zc - o.z) / d.z;
                let x = o.x + t * d.x - self.base.x;
                let y = o.y + t * d.y - self.base.y;
                if x * x + y * y <= self.radius * self.radius {
                    consider(t);
                }
            }
        }
        best
    }
}

/// Motion program of a dynamic agent.
#[derive(Debug, Clone)]
pub enum Motion {
    /// Constant velocity, reflecting at the given axis-aligned bounds.
    ConstVel {
        velocity: Vector3<f64>,
        bounds_min: Vector3<f64>,
        bounds_max: Vector3<f64>,
    },
    /// Constant-speed loop through waypoints.
    Waypoints { points: Vec<Vector3<f64>>, speed: f64 },
}

/// A dynamic obstacle: a vertical cylinder following a motion program.
#[derive(Debug, Clone)]
pub struct Agent {
    pub start: Vector3<f64>,
    pub radius: f64,
    pub height: f64,
    pub motion: Motion,
}

/// Instantaneous kinematic state of an agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    /// Base center of the cylinder.
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

/// Triangle-wave fold of unbounded travel into [lo, hi] with reflection.
fn reflect_axis(start: f64, v: f64, t: f64, lo: f64, hi: f64) -> (f64, f64) {
    let span = hi - lo;
    if span <= 0.0 || v == 0.0 {
        return (start.clamp(lo.min(hi), hi.max(lo)), v);
    }
    let u = (start - lo + v * t).rem_euclid(2.0 * span);
    if u <= span {
        (lo + u, v)
    } else {
        (lo + 2.0 * span - u, -v)
    }
}

impl Agent {
    /// Analytic state at absolute time `t`; pure, so frames can be generated
    /// in any order.
    pub fn state_at(&self, t: f64) -> AgentState {
        match &self.motion {
            Motion::ConstVel { velocity, bounds_min, bounds_max } => {
                let mut position = Vector3::zeros();
                let mut vel = Vector3::zeros();
                for a in 0..3 {
                    let (p, v) =
                        reflect_axis(self.start[a], velocity[a], t, bounds_min[a], bounds_max[a]);
                    position[a] = p;
                    vel[a] = v;
                }
                AgentState { position, velocity: vel }
            }
            Motion::Waypoints { points, speed } => {
                if points.len() < 2 || *speed <= 0.0 {
                    return AgentState { position: self.start, velocity: Vector3::zeros() };
                }
                let mut lengths = Vec::with_capacity(points.len());
                let mut total = 0.0;
                for i in 0..points.len() {
                    let next = points[(i + 1) % points.len()];
                    let l = (next - points[i]).norm();
                    lengths.push(l);
                    total += l;
                }
                let mut s = (speed * t).rem_euclid(total);
                for i in 0..points.len() {
                    if s <= lengths[i] || i == points.len() - 1 {
                        let next = points[(i + 1) % points.len()];
                        let dir = (next - points[i]) / lengths[i].max(1e-12);
                        return AgentState {
                            position: points[i] + dir * s,
                            velocity: dir * *speed,
                        };
                    }
                    s -= lengths[i];
                }
                unreachable!()
            }
        }
    }

    pub fn cylinder_at(&self, t: f64) -> Cylinder {
        Cylinder { base: self.state_at(t).position, radius: self.radius, height: self.height }
    }

    /// Cylinder center (mid height), the reference point for velocity truth.
    pub fn center_at(&self, t: f64) -> Vector3<f64> {
        self.state_at(t).position + Vector3::new(0.0, 0.0, self.height / 2.0)
    }
}

/// Advances an agent state by `dt` with reflection at the bounds.
pub fn step_agent(
    state: &AgentState,
    dt: f64,
    bounds_min: Vector3<f64>,
    bounds_max: Vector3<f64>,
) -> AgentState {
    let mut out = *state;
    for a in 0..3 {
        let (p, v) = reflect_axis(state.position[a], state.velocity[a], dt, bounds_min[a], bounds_max[a]);
        out.position[a] = p;
        out.velocity[a] = v;
    }
    out
}

/// Depth sensor model used for ray casting.
#[derive(Debug, Clone, Copy)]
pub struct SensorSpec {
    pub fov_h: f64,
    pub fov_v: f64,
    /// Angular spacing between adjacent rays.
    pub ang_res: f64,
    pub max_range: f64,
    pub noise: NoiseModel,
}

/// Timed pose keyframe; position and angles interpolate linearly.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryKey {
    pub t: f64,
    pub position: Vector3<f64>,
    pub yaw: f64,
    pub pitch: f64,
}

/// A complete synthetic scenario.
#[derive(Debug, Clone)]
pub struct WorldSpec {
    pub name: String,
    pub bounds_min: Vector3<f64>,
    pub bounds_max: Vector3<f64>,
    pub ground: bool,
    /// Drop ground-slab voxels from the evaluation mask.
    pub exclude_ground_eval: bool,
    pub boxes: Vec<BoxObstacle>,
    pub cylinders: Vec<Cylinder>,
    pub agents: Vec<Agent>,
    pub trajectory: Vec<TrajectoryKey>,
    pub sensor: SensorSpec,
    pub rate: f64,
    pub duration: f64,
    pub seed: u64,
}

impl WorldSpec {
    pub fn n_frames(&self) -> usize {
        (self.duration * self.rate).round() as usize
    }

    pub fn frame_time(&self, idx: usize) -> f64 {
        idx as f64 / self.rate
    }

    /// Interpolated sensor pose at time `t`.
    pub fn pose_at(&self, t: f64) -> Pose {
        let keys = &self.trajectory;
        assert!(!keys.is_empty(), "world has no trajectory");
        let make = |k: &TrajectoryKey| {
            Pose::new(
                k.position,
                UnitQuaternion::from_euler_angles(0.0, k.pitch, k.yaw),
            )
        };
        if t <= keys[0].t {
            return make(&keys[0]);
        }
        for w in keys.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if t <= b.t {
                let f = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 1.0 };
                let position = a.position + (b.position - a.position) * f;
                let yaw = a.yaw + (b.yaw - a.yaw) * f;
                let pitch = a.pitch + (b.pitch - a.pitch) * f;
                return Pose::new(position, UnitQuaternion::from_euler_angles(0.0, pitch, yaw));
            }
        }
        make(keys.last().unwrap())
    }

    /// Nearest surface hit along a world-frame ray.
    pub fn raycast(&self, t: f64, origin: Vector3<f64>, dir: Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut best: Option<f64> = None;
        let mut consider = |hit: Option<f64>| {
            if let Some(h) = hit {
                if best.map_or(true, |b| h < b) {
                    best = Some(h);
                }
            }
        };
        for b in &self.boxes {
            consider(b.raycast(origin, dir, t_max));
        }
        for c in &self.cylinders {
            consider(c.raycast(origin, dir, t_max));
        }
        for a in &self.agents {
            consider(a.cylinder_at(t).raycast(origin, dir, t_max));
        }
        if self.ground && dir.z < -1e-12 && origin.z > 0.0 {
            let th = -origin.z / dir.z;
            if th <= t_max {
                consider(Some(th));
            }
        }
        best
    }

    /// Unsigned distance from a point to the nearest obstacle surface at `t`.
    pub fn surface_distance(&self, t: f64, p: Vector3<f64>) -> f64 {
        let mut d = f64::INFINITY;
        for b in &self.boxes {
            d = d.min(b.surface_distance(p));
        }
        for c in &self.cylinders {
            d = d.min(c.surface_distance(p));
        }
        for a in &self.agents {
            d = d.min(a.cylinder_at(t).surface_distance(p));
        }
        if self.ground {
            d = d.min(p.z.abs());
        }
        d
    }

    /// Casts one frame of the depth sensor with range noise.
    pub fn raycast_frame(&self, frame_idx: usize) -> Frame {
        let t = self.frame_time(frame_idx);
        let pose = self.pose_at(t);
        let s = &self.sensor;
        let n_az = (s.fov_h / s.ang_res).round() as usize;
        let n_zen = (s.fov_v / s.ang_res).round() as usize;
        let mut rng = substream(self.seed, &[PHASE_SIM, frame_idx as u64]);
        let mut points = Vec::new();
        for iz in 0..n_zen {
            let zen = (PI - s.fov_v) / 2.0 + (iz as f64 + 0.5) * s.ang_res;
            for ia in 0..n_az {
                let az = -s.fov_h / 2.0 + (ia as f64 + 0.5) * s.ang_res;
                let dir_sensor = Vector3::new(
                    zen.sin() * az.cos(),
                    zen.sin() * az.sin(),
                    zen.cos(),
                );
                let dir_world = pose.orientation * dir_sensor;
                if let Some(range) = self.raycast(t, pose.position, dir_world, s.max_range) {
                    let noisy =
                        range + s.noise.rho(range) * rng.sample::<f64, _>(StandardNormal);
                    points.push((dir_sensor * noisy).cast::<f32>());
                }
            }
        }
        Frame { timestamp: t, pose, points }
    }
}

/// Ground-truth snapshot for one evaluation step.
#[derive(Debug, Clone)]
pub struct GroundTruthStep {
    pub frame: u64,
    pub timestamp: f64,
    pub center: Vector3<f64>,
    pub dims: [usize; 3],
    pub edge: f64,
    /// Ids of occupied voxels in the egocentric grid.
    pub occupied: Vec<u32>,
    /// Per-voxel observed mask, same indexing as the grid.
    pub observed: Vec<bool>,
    pub agents: Vec<AgentTruth>,
}

#[derive(Debug, Clone, Copy)]
pub struct AgentTruth {
    pub id: u32,
    /// Cylinder center (mid height).
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

/// World-anchored observation lattice accumulating ray coverage.
pub struct ObservedLattice {
    origin: Vector3<f64>,
    dims: [usize; 3],
    edge: f64,
    seen: Vec<bool>,
}

impl ObservedLattice {
    pub fn new(world: &WorldSpec, edge: f64) -> ObservedLattice {
        let margin = 1.0;
        let origin = world.bounds_min - Vector3::repeat(margin);
        let extent = world.bounds_max + Vector3::repeat(margin) - origin;
        let dims = [
            (extent.x / edge).ceil() as usize,
            (extent.y / edge).ceil() as usize,
            (extent.z / edge).ceil() as usize,
        ];
        ObservedLattice { origin, dims, edge, seen: vec![false; dims[0] * dims[1] * dims[2]] }
    }

    #[inline]
    fn cell(&self, p: Vector3<f64>) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let i = ((p[a] - self.origin[a]) / self.edge).floor();
            if i < 0.0 || i >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = i as usize;
        }
        Some(idx[0] + idx[1] * self.dims[0] + idx[2] * self.dims[0] * self.dims[1])
    }

    pub fn is_seen(&self, p: Vector3<f64>) -> bool {
        self.cell(p).map_or(false, |i| self.seen[i])
    }

    /// Marks every lattice cell a ray traverses up to and including its hit.
    fn mark_ray(&mut self, origin: Vector3<f64>, dir: Vector3<f64>, t_end: f64) {
        // Amanatides-Woo traversal
        let mut cell = [0i64; 3];
        for a in 0..3 {
            cell[a] = ((origin[a] - self.origin[a]) / self.edge).floor() as i64;
        }
        let step: Vec<i64> = (0..3).map(|a| if dir[a] > 0.0 { 1 } else { -1 }).collect();
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            if dir[a].abs() > 1e-12 {
                let boundary = self.origin[a]
                    + (cell[a] + if dir[a] > 0.0 { 1 } else { 0 }) as f64 * self.edge;
                t_next[a] = (boundary - origin[a]) / dir[a];
                t_delta[a] = self.edge / dir[a].abs();
            }
        }
        let mut t = 0.0;
        while t <= t_end {
            if (0..3).all(|a| cell[a] >= 0 && cell[a] < self.dims[a] as i64) {
                let i = cell[0] as usize
                    + cell[1] as usize * self.dims[0]
                    + cell[2] as usize * self.dims[0] * self.dims[1];
                self.seen[i] = true;
            }
            let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
                0
            } else if t_next[1] <= t_next[2] {
                1
            } else {
                2
            };
            t = t_next[a];
            t_next[a] += t_delta[a];
            cell[a] += step[a];
        }
    }

    /// Casts dense noiseless rays from the frame's pose and accumulates
    /// coverage. `density` subdivides the sensor's angular resolution.
    pub fn observe(&mut self, world: &WorldSpec, frame_idx: usize, density: u32) {
        let t = world.frame_time(frame_idx);
        let pose = world.pose_at(t);
        let s = &world.sensor;
        let res = s.ang_res / density.max(1) as f64;
        let n_az = (s.fov_h / res).round() as usize;
        let n_zen = (s.fov_v / res).round() as usize;
        for iz in 0..n_zen {
            let zen = (PI - s.fov_v) / 2.0 + (iz as f64 + 0.5) * res;
            for ia in 0..n_az {
                let az = -s.fov_h / 2.0 + (ia as f64 + 0.5) * res;
                let dir_sensor =
                    Vector3::new(zen.sin() * az.cos(), zen.sin() * az.sin(), zen.cos());
                let dir = pose.orientation * dir_sensor;
                let t_hit = world
                    .raycast(t, pose.position, dir, s.max_range)
                    .unwrap_or(s.max_range);
                // include the hit cell itself
                self.mark_ray(pose.position, dir, t_hit + 1e-6);
            }
        }
    }
}

/// Computes the ground-truth snapshot for one evaluation step: occupancy by
/// surface distance at voxel centers, observedness from the lattice.
pub fn ground_truth_step(
    world: &WorldSpec,
    lattice: &ObservedLattice,
    frame_idx: usize,
    map_size: [f64; 3],
    edge: f64,
) -> GroundTruthStep {
    let t = world.frame_time(frame_idx);
    let center = world.pose_at(t).position;
    let dims = [
        ((map_size[0] / edge) - 1e-9).ceil().max(1.0) as usize,
        ((map_size[1] / edge) - 1e-9).ceil().max(1.0) as usize,
        ((map_size[2] / edge) - 1e-9).ceil().max(1.0) as usize,
    ];
    let half = Vector3::new(
        dims[0] as f64 * edge / 2.0,
        dims[1] as f64 * edge / 2.0,
        dims[2] as f64 * edge / 2.0,
    );
    let n = dims[0] * dims[1] * dims[2];
    let mut occupied = Vec::new();
    let mut observed = vec![false; n];
    for i in 0..n {
        let (ix, iy, iz) = (
            i % dims[0],
            (i / dims[0]) % dims[1],
            i / (dims[0] * dims[1]),
        );
        let p = Vector3::new(
            center.x - half.x + (ix as f64 + 0.5) * edge,
            center.y - half.y + (iy as f64 + 0.5) * edge,
            center.z - half.z + (iz as f64 + 0.5) * edge,
        );
        if world.exclude_ground_eval && world.ground && p.z.abs() <= edge {
            continue;
        }
        observed[i] = lattice.is_seen(p);
        if world.surface_distance(t, p) <= edge / 2.0 {
            occupied.push(i as u32);
        }
    }
    let agents = world
        .agents
        .iter()
        .enumerate()
        .map(|(id, a)| {
            let st = a.state_at(t);
            AgentTruth {
                id: id as u32,
                position: st.position + Vector3::new(0.0, 0.0, a.height / 2.0),
                velocity: st.velocity,
            }
        })
        .collect();
    GroundTruthStep {
        frame: frame_idx as u64,
        timestamp: t,
        center,
        dims,
        edge,
        occupied,
        observed,
        agents,
    }
}

fn parse_vec3(key: &str, v: &str, line: usize) -> Result<Vector3<f64>, SimError> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(SimError::Parse {
            line,
            msg: format!("{key}: expected three comma-separated numbers, got `{v}`"),
        });
    }
    let mut out = Vector3::zeros();
    for (i, p) in parts.iter().enumerate() {
        out[i] = p.parse::<f64>().map_err(|_| SimError::Parse {
            line,
            msg: format!("{key}: `{p}` is not a number"),
        })?;
    }
    Ok(out)
}

fn parse_f64(key: &str, v: &str, line: usize) -> Result<f64, SimError> {
    v.parse::<f64>().map_err(|_| SimError::Parse {
        line,
        msg: format!("{key}: `{v}` is not a number"),
    })
}

impl WorldSpec {
    /// Parses the sectioned key=value world format.
    pub fn parse(text: &str) -> Result<WorldSpec, SimError> {
        let mut world = WorldSpec {
            name: "world".into(),
            bounds_min: Vector3::new(-10.0, -10.0, 0.0),
            bounds_max: Vector3::new(10.0, 10.0, 5.0),
            ground: true,
            exclude_ground_eval: false,
            boxes: Vec::new(),
            cylinders: Vec::new(),
            agents: Vec::new(),
            trajectory: Vec::new(),
            sensor: SensorSpec {
                fov_h: 90.0_f64.to_radians(),
                fov_v: 60.0_f64.to_radians(),
                ang_res: 1.0_f64.to_radians(),
                max_range: 8.0,
                noise: NoiseModel::LinearSigma(0.01),
            },
            rate: 20.0,
            duration: 10.0,
            seed: 0,
        };
        enum Section {
            World,
            Sensor,
            Box { min: Option<Vector3<f64>>, max: Option<Vector3<f64>> },
            Cylinder { center: Option<Vector3<f64>>, radius: f64, height: f64 },
            Agent(AgentDraft),
            Trajectory,
        }
        #[derive(Default)]
        struct AgentDraft {
            start: Option<Vector3<f64>>,
            radius: f64,
            height: f64,
            velocity: Option<Vector3<f64>>,
            bounds_min: Option<Vector3<f64>>,
            bounds_max: Option<Vector3<f64>>,
            waypoints: Vec<Vector3<f64>>,
            speed: f64,
        }
        let mut section = Section::World;
        let finish =
            |world: &mut WorldSpec, section: &mut Section, line: usize| -> Result<(), SimError> {
                match std::mem::replace(section, Section::World) {
                    Section::Box { min: Some(min), max: Some(max) } => {
                        world.boxes.push(BoxObstacle { min, max });
                    }
                    Section::Box { .. } => {
                        return Err(SimError::Parse { line, msg: "box needs min and max".into() })
                    }
                    Section::Cylinder { center: Some(base), radius, height } => {
                        world.cylinders.push(Cylinder { base, radius, height });
                    }
                    Section::Cylinder { .. } => {
                        return Err(SimError::Parse { line, msg: "cylinder needs center".into() })
                    }
                    Section::Agent(d) => {
                        let start = d.start.ok_or(SimError::Parse {
                            line,
                            msg: "agent needs start".into(),
                        })?;
                        let motion = if !d.waypoints.is_empty() {
                            Motion::Waypoints { points: d.waypoints, speed: d.speed.max(0.0) }
                        } else {
                            Motion::ConstVel {
                                velocity: d.velocity.unwrap_or_else(Vector3::zeros),
                                bounds_min: d.bounds_min.unwrap_or(world.bounds_min),
                                bounds_max: d.bounds_max.unwrap_or(world.bounds_max),
                            }
                        };
                        world.agents.push(Agent {
                            start,
                            radius: if d.radius > 0.0 { d.radius } else { 0.25 },
                            height: if d.height > 0.0 { d.height } else { 1.7 },
                            motion,
                        });
                    }
                    _ => {}
                }
                Ok(())
            };

        for (lineno, raw) in text.lines().enumerate() {
            let line_no = lineno + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                finish(&mut world, &mut section, line_no)?;
                section = match name {
                    "world" => Section::World,
                    "sensor" => Section::Sensor,
                    "box" => Section::Box { min: None, max: None },
                    "cylinder" => Section::Cylinder { center: None, radius: 0.3, height: 2.0 },
                    "agent" => Section::Agent(AgentDraft::default()),
                    "trajectory" => Section::Trajectory,
                    other => {
                        return Err(SimError::Parse {
                            line: line_no,
                            msg: format!("unknown section `[{other}]`"),
                        })
                    }
                };
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(SimError::Parse {
                line: line_no,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match &mut section {
                Section::World => match key {
                    "name" => world.name = value.to_string(),
                    "bounds_min" => world.bounds_min = parse_vec3(key, value, line_no)?,
                    "bounds_max" => world.bounds_max = parse_vec3(key, value, line_no)?,
                    "ground" => world.ground = value == "true" || value == "1",
                    "exclude_ground_eval" => {
                        world.exclude_ground_eval = value == "true" || value == "1"
                    }
                    "rate" => world.rate = parse_f64(key, value, line_no)?,
                    "duration" => world.duration = parse_f64(key, value, line_no)?,
                    "seed" => {
                        world.seed = value.parse().map_err(|_| SimError::Parse {
                            line: line_no,
                            msg: format!("seed: `{value}` is not an integer"),
                        })?
                    }
                    _ => {
                        return Err(SimError::Parse {
                            line: line_no,
                            msg: format!("unknown world key `{key}`"),
                        })
                    }
                },
                Section::Sensor => match key {
                    "fov_h_deg" => world.sensor.fov_h = parse_f64(key, value, line_no)?.to_radians(),
                    "fov_v_deg" => world.sensor.fov_v = parse_f64(key, value, line_no)?.to_radians(),
                    "ang_res_deg" => {
                        world.sensor.ang_res = parse_f64(key, value, line_no)?.to_radians()
                    }
                    "max_range" => world.sensor.max_range = parse_f64(key, value, line_no)?,
                    "sigma" => {
                        world.sensor.noise = NoiseModel::ConstantSigma(parse_f64(key, value, line_no)?)
                    }
                    "sigma_prime" => {
                        world.sensor.noise = NoiseModel::LinearSigma(parse_f64(key, value, line_no)?)
                    }
                    _ => {
                        return Err(SimError::Parse {
                            line: line_no,
                            msg: format!("unknown sensor key `{key}`"),
                        })
                    }
                },
                Section::Box { min, max } => match key {
                    "min" => *min = Some(parse_vec3(key, value, line_no)?),
                    "max" => *max = Some(parse_vec3(key, value, line_no)?),
                    _ => {
                        return Err(SimError::Parse {
                            line: line_no,
                            msg: format!("unknown box key `{key}`"),
                        })
                    }
                },
                Section::Cylinder { center, radius, height } => match key {
                    "center" => *center = Some(parse_vec3(key, value, line_no)?),
                    "radius" => *radius = parse_f64(key, value, line_no)?,
                    "height" => *height = parse_f64(key, value, line_no)?,
                    _ => {
                        return Err(SimError::Parse {
                            line: line_no,
                            msg: format!("unknown cylinder key `{key}`"),
                        })
                    }
                },
                Section::Agent(d) => match key {
                    "start" => d.start = Some(parse_vec3(key, value, line_no)?),
                    "radius" => d.radius = parse_f64(key, value, line_no)?,
                    "height" => d.height = parse_f64(key, value, line_no)?,
                    "velocity" => d.velocity = Some(parse_vec3(key, value, line_no)?),
                    "bounds_min" => d.bounds_min = Some(parse_vec3(key, value, line_no)?),
                    "bounds_max" => d.bounds_max = Some(parse_vec3(key, value, line_no)?),
                    "speed" => d.speed = parse_f64(key, value, line_no)?,
                    "waypoints" => {
                        for (i, wp) in value.split(';').enumerate() {
                            d.waypoints.push(parse_vec3(&format!("waypoint {i}"), wp, line_no)?);
                        }
                    }
                    _ => {
                        return Err(SimError::Parse {
                            line: line_no,
                            msg: format!("unknown agent key `{key}`"),
                        })
                    }
                },
                Section::Trajectory => match key {
                    "key" => {
                        let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                        if parts.len() != 6 {
                            return Err(SimError::Parse {
                                line: line_no,
                                msg: "trajectory key wants t,x,y,z,yaw_deg,pitch_deg".into(),
                            });
                        }
                        let num = |i: usize| parse_f64("trajectory", parts[i], line_no);
                        world.trajectory.push(TrajectoryKey {
                            t: num(0)?,
                            position: Vector3::new(num(1)?, num(2)?, num(3)?),
                            yaw: num(4)?.to_radians(),
                            pitch: num(5)?.to_radians(),
                        });
                    }
                    _ => {
                        return Err(SimError::Parse {
                            line: line_no,
                            msg: format!("unknown trajectory key `{key}`"),
                        })
                    }
                },
            }
        }
        finish(&mut world, &mut section, text.lines().count())?;
        if world.trajectory.is_empty() {
            world.trajectory.push(TrajectoryKey {
                t: 0.0,
                position: Vector3::new(0.0, 0.0, 1.5),
                yaw: 0.0,
                pitch: 0.0,
            });
        }
        if world.rate <= 0.0 {
            return Err(SimError::Invalid("rate must be > 0".into()));
        }
        Ok(world)
    }
}
