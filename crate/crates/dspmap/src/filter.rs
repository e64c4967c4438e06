//! SMC-PHD core: prediction with the mixture motion model, occlusion-gated
//! activation-space update, particle birth, per-voxel resampling, and the
//! static/dynamic mixture coefficients.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{MapMode, NoiseModel};
use crate::pipeline::PreprocessedFrame;
use crate::rng::{substream, PHASE_BIRTH, PHASE_PREDICT, PHASE_RESAMPLE};
use crate::state::MapState;
use crate::store::{Flag, Particle, ParticleRef, Stored};
use crate::velocity::{Label, VelocityLabels};

const INV_2PI_CUBED_SQRT: f64 = 0.06349363593424097; // (2*pi)^(-3/2)
/// Speeds at or below this are treated as exactly zero.
pub const STATIC_SPEED: f64 = 1e-9;

/// Isotropic Gaussian measurement likelihood with range-dependent std.
#[inline]
pub fn likelihood(z: Vector3<f64>, x_pos: Vector3<f64>, range: f64, noise: &NoiseModel) -> f64 {
    let rho = noise.rho(range);
    let dd2 = (z - x_pos).norm_squared();
    INV_2PI_CUBED_SQRT / (rho * rho * rho) * (-dd2 / (2.0 * rho * rho)).exp()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PredictStats {
    pub moved: u64,
    pub pruned: u64,
    pub dropped: u64,
    pub indexed: u64,
    pub index_dropped: u64,
}

/// Propagates every live particle one frame, applies survival weight decay,
/// moves particles across voxels, and rebuilds the pyramid index.
pub fn predict(state: &mut MapState, dt: f64) -> PredictStats {
    state.index.clear();
    let n_v = state.arena.n_voxels();
    let p = &state.params;
    let mode = p.mode;
    let (q_pos, q_vel) = (p.q_pos_std, p.q_vel_std);
    let (v_hat, p_s) = (p.v_hat, p.p_s);
    let seed = state.seed;
    let frame = state.frame;
    let arena = &state.arena;

    // stage new states in parallel; per-voxel substreams keep the result
    // independent of the worker count
    let staged: Vec<Vec<(u32, Particle)>> = (0..n_v)
        .into_par_iter()
        .map(|v| {
            if arena.live_count(v) == 0 {
                return Vec::new();
            }
            let mut rng = substream(seed, &[PHASE_PREDICT, frame, v as u64]);
            let mut out = Vec::with_capacity(arena.live_count(v) as usize);
            for (slot, ptc) in arena.iter_voxel(v) {
                let mut np = *ptc;
                match np.flag {
                    Flag::Time => {}
                    _ => {
                        let dynamic = match mode {
                            MapMode::Static => false,
                            MapMode::Random => true,
                            MapMode::Dynamic => {
                                let speed = np.speed();
                                if speed > v_hat {
                                    true
                                } else if speed <= STATIC_SPEED {
                                    false
                                } else {
                                    rng.gen_bool(0.5)
                                }
                            }
                        };
                        let mut pos = np.position_f64();
                        let mut vel = np.velocity.cast::<f64>();
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
                        np.position = pos.cast::<f32>();
                        np.velocity = vel.cast::<f32>();
                        if np.flag == Flag::Survived {
                            np.weight *= p_s;
                        }
                    }
                }
                out.push((slot as u32, np));
            }
            out
        })
        .collect();

    // apply moves and rebuild the index serially, in (voxel, slot) order
    let mut stats = PredictStats::default();
    let mut newborn_mass = 0.0;
    let drops_before = state.arena.dropped;
    for (v, moves) in staged.into_iter().enumerate() {
        for (slot, np) in moves {
            let dest = state.grid.index(np.position_f64(), state.center);
            let placed = match dest {
                Some(d) if d == v => {
                    *state.arena.get_mut(v, slot as usize) = np;
                    Some((v, slot as usize))
                }
                Some(d) => {
                    state.arena.delete(v, slot as usize);
                    stats.moved += 1;
                    state.arena.add(d, np).slot().map(|s| (d, s))
                }
                None => {
                    state.arena.delete(v, slot as usize);
                    stats.pruned += 1;
                    None
                }
            };
            if let Some((dv, ds)) = placed {
                if np.flag == Flag::Newborn {
                    newborn_mass += np.weight;
                }
                let dir = state.pose.world_dir_to_sensor(np.position_f64() - state.center);
                if let Some(pyd) = state.pyramids.fov_index(dir) {
                    match state.index.push(pyd, ParticleRef { voxel: dv as u32, slot: ds as u32 }) {
                        Stored::At(_) => stats.indexed += 1,
                        Stored::Dropped => stats.index_dropped += 1,
                    }
                }
            }
        }
    }
    stats.dropped = state.arena.dropped - drops_before;
    state.newborn_mass = newborn_mass;
    stats
}

#[derive(Debug, Default, Clone, Copy)]
pub struct UpdateStats {
    pub updated: u64,
    pub refreshed_time: u64,
}

enum Applied {
    Weight(f64),
    Stamp,
}

/// Occlusion-gated weight update over the visible space.
///
/// Pass 1 shares the measurement-side normalizer C'(z) across particles;
/// pass 2 rewrites the weights of indexed particles that lie inside their
/// pyramid's visible length.
pub fn update(state: &mut MapState, pre: &PreprocessedFrame) -> UpdateStats {
    let p = &state.params;
    let p_d = p.p_d;
    let kappa = p.kappa;
    let empty_visible = p.empty_pyramid_visible;
    let noise = state.cfg.noise_model;
    let center = state.center;
    let r_min2 = state.cfg.r_min * state.cfg.r_min;
    let newborn_mass = state.newborn_mass;
    let arena = &state.arena;
    let index = &state.index;
    let windows = &state.windows;
    let n_f = state.pyramids.n_fov();

    // pass 1: C'(z) = total newborn mass + sum over survived particles whose
    // activation space contains z
    let c_prime: Vec<Vec<f64>> = (0..n_f)
        .into_par_iter()
        .map(|pyd| {
            let (start, len) = pre.span(pyd);
            if len == 0 {
                return Vec::new();
            }
            let mut c = vec![newborn_mass; len];
            for &w_pyd in &windows[pyd] {
                for r in index.entries(w_pyd as usize) {
                    let ptc = arena.get(r.voxel as usize, r.slot as usize);
                    if ptc.flag != Flag::Survived {
                        continue;
                    }
                    let pos = ptc.position_f64();
                    let r2 = (pos - center).norm_squared();
                    if r2 < r_min2 {
                        continue;
                    }
                    let range = r2.sqrt();
                    let scaled = p_d * ptc.weight;
                    for (j, cj) in c.iter_mut().enumerate() {
                        *cj += scaled * likelihood(pre.points[start + j], pos, range, &noise);
                    }
                }
            }
            c
        })
        .collect();
    let c_of = |global: usize| -> f64 {
        let pyd = pre.pyramid_of[global] as usize;
        let (start, _) = pre.span(pyd);
        c_prime[pyd][global - start]
    };

    // pass 2: per-particle posterior weights behind the occlusion gate
    let applied: Vec<Vec<(ParticleRef, Applied)>> = (0..n_f)
        .into_par_iter()
        .map(|pyd| {
            let mut out = Vec::new();
            let vis2 = pre.visible_len2[pyd];
            if vis2 <= 0.0 && !empty_visible {
                return out;
            }
            for r in index.entries(pyd) {
                let ptc = arena.get(r.voxel as usize, r.slot as usize);
                let pos = ptc.position_f64();
                let r2 = (pos - center).norm_squared();
                if r2 < r_min2 || (vis2 > 0.0 && r2 > vis2) {
                    continue;
                }
                match ptc.flag {
                    Flag::Time => out.push((*r, Applied::Stamp)),
                    Flag::Survived => {
                        let range = r2.sqrt();
                        let mut sum = 0.0;
                        for &w_pyd in &windows[pyd] {
                            let (start, len) = pre.span(w_pyd as usize);
                            for j in 0..len {
                                let g = likelihood(pre.points[start + j], pos, range, &noise);
                                sum += p_d * g / (kappa + c_of(start + j));
                            }
                        }
                        out.push((*r, Applied::Weight((1.0 - p_d + sum) * ptc.weight)));
                    }
                    Flag::Newborn => {
                        let w_prior = ptc.weight;
                        let mut sum = 0.0;
                        for &w_pyd in &windows[pyd] {
                            let (start, len) = pre.span(w_pyd as usize);
                            for j in 0..len {
                                sum += w_prior / (kappa + c_of(start + j));
                            }
                        }
                        out.push((*r, Applied::Weight(sum)));
                    }
                    Flag::Vacant => unreachable!("pyramid index references vacant slot"),
                }
            }
            out
        })
        .collect();

    let mut stats = UpdateStats::default();
    let now = state.now as f32;
    for batch in applied {
        for (r, a) in batch {
            let ptc = state.arena.get_mut(r.voxel as usize, r.slot as usize);
            match a {
                Applied::Weight(w) => {
                    ptc.weight = w;
                    stats.updated += 1;
                }
                Applied::Stamp => {
                    ptc.stamp = now;
                    stats.refreshed_time += 1;
                }
            }
        }
    }
    stats
}

#[derive(Debug, Default, Clone, Copy)]
pub struct BirthStats {
    pub born: u64,
    pub dropped: u64,
    pub mass: f64,
}

/// Spawns newborn particles around each measurement point, allocating
/// static and dynamic velocities per the mixture coefficients and the
/// initial velocity estimates.
pub fn birth(state: &mut MapState, pre: &PreprocessedFrame, labels: &VelocityLabels) -> BirthStats {
    let m_k = pre.points.len();
    if m_k == 0 {
        return BirthStats::default();
    }
    let p = &state.params;
    let l_b = p.l_b as usize;
    let w_each = match p.v_b {
        Some(vb) => vb / (m_k as f64 * l_b as f64),
        None => p.w_init,
    };
    let mode = p.mode;
    let (sigma_vb, v_max) = (p.sigma_vb, p.v_max);
    let noise = state.cfg.noise_model;
    let center = state.center;
    let seed = state.seed;
    let frame = state.frame;

    let lambda1: Vec<f64> = pre
        .points
        .iter()
        .map(|pt| match state.grid.index(*pt, center) {
            Some(v) => state.lambda1_for_birth(v),
            None => 0.5,
        })
        .collect();

    let order = interleave_order(l_b);
    let cohorts: Vec<Vec<Particle>> = (0..m_k)
        .into_par_iter()
        .map(|g| {
            let mut rng = substream(seed, &[PHASE_BIRTH, frame, g as u64]);
            let pt = pre.points[g];
            let rho = noise.rho(pre.ranges2[g].sqrt());
            let mut cohort = Vec::with_capacity(l_b);
            let label = labels.0.get(g).unwrap_or(&Label::Unknown);
            let (n_gauss, n_rand, v_est) = match (mode, label) {
                (MapMode::Static, _) | (MapMode::Dynamic, Label::Static) => (0, 0, Vector3::zeros()),
                (MapMode::Random, _) => (0, l_b, Vector3::zeros()),
                (MapMode::Dynamic, lbl) => {
                    let n_dyn = ((lambda1[g] * l_b as f64).round() as usize).min(l_b);
                    let n_rand = n_dyn / 2;
                    let v_est = match lbl {
                        Label::Estimated(v) => *v,
                        _ => Vector3::zeros(),
                    };
                    (n_dyn - n_rand, n_rand, v_est)
                }
            };
            for i in 0..l_b {
                let mut pos = pt;
                for a in 0..3 {
                    pos[a] += rho * rng.sample::<f64, _>(StandardNormal);
                }
                let vel = if i < n_gauss {
                    Vector3::new(
                        v_est.x + sigma_vb * rng.sample::<f64, _>(StandardNormal),
                        v_est.y + sigma_vb * rng.sample::<f64, _>(StandardNormal),
                        v_est.z + sigma_vb * rng.sample::<f64, _>(StandardNormal),
                    )
                } else if i < n_gauss + n_rand {
                    Vector3::new(
                        rng.gen_range(-v_max..v_max),
                        rng.gen_range(-v_max..v_max),
                        rng.gen_range(-v_max..v_max),
                    )
                } else {
                    Vector3::zeros()
                };
                cohort.push(Particle::newborn(pos.cast::<f32>(), vel.cast::<f32>(), w_each));
            }
            // spread the velocity classes across insertion order
            order.iter().map(|&i| cohort[i]).collect()
        })
        .collect();

    // insert cohort-index-major so capacity drops in a full voxel spread
    // evenly over measurement points instead of truncating the last ones
    let mut stats = BirthStats::default();
    for j in 0..l_b {
        for cohort in &cohorts {
            let ptc = cohort[j];
            match state.grid.index(ptc.position_f64(), center) {
                Some(v) => match state.arena.add(v, ptc) {
                    Stored::At(_) => {
                        stats.born += 1;
                        stats.mass += ptc.weight;
                    }
                    Stored::Dropped => stats.dropped += 1,
                },
                None => stats.dropped += 1,
            }
        }
    }
    state.newborn_mass = stats.mass;
    stats
}

/// Deterministic low-discrepancy interleaving of 0..n, so velocity classes
/// inside a cohort are spread across insertion order.
fn interleave_order(n: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = (0..n)
        .map(|i| ((((i + 1) as f64) * 0.618_033_988_749_894_9).fract(), i))
        .collect();
    keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Per-voxel mixture coefficients from the Dempster-Shafer masses.
#[derive(Debug, Clone)]
pub struct DstCoefficients {
    pub lambda1: Vec<f64>,
    pub live: Vec<u32>,
}

impl DstCoefficients {
    #[inline]
    pub fn lambda2(&self, voxel: usize) -> f64 {
        1.0 - self.lambda1[voxel]
    }
}

/// lambda_1 of one voxel's live particles: (W_d + W_ds/2) / W, 0.5 when empty.
fn voxel_lambda1(slots: &[Particle], v_hat: f64) -> (f64, u32, f64) {
    let mut w_d = 0.0;
    let mut w_s = 0.0;
    let mut w_ds = 0.0;
    let mut live = 0u32;
    for p in slots {
        if !p.is_live() || p.flag == Flag::Time {
            continue;
        }
        live += 1;
        let speed = p.speed();
        if speed >= v_hat {
            w_d += p.weight;
        } else if speed <= STATIC_SPEED {
            w_s += p.weight;
        } else {
            w_ds += p.weight;
        }
    }
    let w = w_d + w_s + w_ds;
    let lambda1 = if w > 0.0 { (w_d + 0.5 * w_ds) / w } else { 0.5 };
    (lambda1, live, w)
}

/// Computes the mixture coefficients for every voxel from current weights.
pub fn dst_coefficients(state: &MapState, v_hat: f64) -> DstCoefficients {
    let spv = state.arena.slots_per_voxel();
    let (mut lambda1, mut live) = (Vec::new(), Vec::new());
    for chunk in state.arena.slots_raw().chunks(spv) {
        let (l1, n, _) = voxel_lambda1(chunk, v_hat);
        lambda1.push(l1);
        live.push(n);
    }
    DstCoefficients { lambda1, live }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SweepStats {
    pub resampled_voxels: u64,
    pub deleted: u64,
    pub live_after: u64,
}

/// Per-voxel resample: keep at most `cap` particles chosen proportionally to
/// weight, then equalize weights so the voxel mass is exactly preserved.
fn resample_voxel(slots: &mut [Particle], cap: usize, rng: &mut impl Rng) -> (u64, u32) {
    let mut live_slots: Vec<usize> = Vec::new();
    let mut mass = 0.0;
    for (i, p) in slots.iter().enumerate() {
        if p.is_live() && p.flag != Flag::Time {
            live_slots.push(i);
            mass += p.weight;
        }
    }
    if live_slots.is_empty() {
        return (0, count_live(slots));
    }
    if mass <= 0.0 {
        // only dead mass left; empty the voxel
        let deleted = live_slots.len() as u64;
        for i in live_slots {
            slots[i].flag = Flag::Vacant;
        }
        return (deleted, count_live(slots));
    }
    let l = live_slots.len();
    if l <= cap {
        let w = mass / l as f64;
        for &i in &live_slots {
            slots[i].weight = w;
        }
        return (0, count_live(slots));
    }
    // systematic selection over the weight CDF, without replacement:
    // a particle hit by one or more points survives once
    let l_hat = cap;
    let step = mass / l_hat as f64;
    let mut next = rng.gen_range(0.0..1.0) * step;
    let mut cum = 0.0;
    let mut keep = vec![false; l];
    let mut kept = 0usize;
    for (j, &i) in live_slots.iter().enumerate() {
        cum += slots[i].weight;
        if cum > next {
            keep[j] = true;
            kept += 1;
            // skip extra points landing inside this particle's mass
            while cum > next {
                next += step;
            }
        }
    }
    debug_assert!(kept >= 1 && kept <= l_hat);
    let w = mass / kept as f64;
    let mut deleted = 0u64;
    for (j, &i) in live_slots.iter().enumerate() {
        if keep[j] {
            slots[i].weight = w;
        } else {
            slots[i].flag = Flag::Vacant;
            deleted += 1;
        }
    }
    (deleted, count_live(slots))
}

fn count_live(slots: &[Particle]) -> u32 {
    slots.iter().filter(|p| p.is_live()).count() as u32
}

/// Fused per-voxel sweep: newborn flags become survived, mixture
/// coefficients and voxel masses are recomputed, and each voxel is resampled.
pub fn resample_occupancy_dst(state: &mut MapState) -> SweepStats {
    let n_v = state.arena.n_voxels();
    let spv = state.arena.slots_per_voxel();
    let cap = state.params.per_voxel_cap(n_v);
    let v_hat = state.params.v_hat;
    let seed = state.seed;
    let frame = state.frame;
    let (slots, counts) = state.arena.parts_mut();
    let deleted: u64 = slots
        .par_chunks_mut(spv)
        .zip(counts.par_iter_mut())
        .zip(state.dst_lambda1.par_iter_mut())
        .zip(state.dst_count.par_iter_mut())
        .zip(state.voxel_mass.par_iter_mut())
        .enumerate()
        .map(|(v, ((((slots, count), lambda1), dst_count), mass))| {
            if *count == 0 {
                *lambda1 = 0.5;
                *dst_count = 0;
                *mass = 0.0;
                return 0u64;
            }
            for p in slots.iter_mut() {
                if p.flag == Flag::Newborn {
                    p.flag = Flag::Survived;
                }
            }
            let (l1, live, m) = voxel_lambda1(slots, v_hat);
            *lambda1 = l1 as f32;
            *dst_count = live;
            *mass = m;
            let mut rng = substream(seed, &[PHASE_RESAMPLE, frame, v as u64]);
            let (deleted, live_after) = resample_voxel(slots, cap, &mut rng);
            *count = live_after;
            deleted
        })
        .sum();
    state.arena.sync_live_total();
    state.newborn_mass = 0.0;
    SweepStats {
        resampled_voxels: n_v as u64,
        deleted,
        live_after: state.arena.live_total(),
    }
}

/// Rebuilds the pyramid index from current particle positions without
/// moving anything; predict does this as part of its sweep.
pub fn reindex(state: &mut MapState) {
    state.index.clear();
    let mut refs = Vec::new();
    for (voxel, slot, p) in state.arena.iter_live() {
        let dir = state.pose.world_dir_to_sensor(p.position_f64() - state.center);
        if let Some(pyd) = state.pyramids.fov_index(dir) {
            refs.push((pyd, ParticleRef { voxel: voxel as u32, slot: slot as u32 }));
        }
    }
    let mut newborn_mass = 0.0;
    for (pyd, r) in refs {
        state.index.push(pyd, r);
        let p = state.arena.get(r.voxel as usize, r.slot as usize);
        if p.flag == Flag::Newborn {
            newborn_mass += p.weight;
        }
    }
    state.newborn_mass = newborn_mass;
}

/// Standalone resampling over every voxel (the fused sweep without the
/// coefficient refresh), for direct use in tests and tools.
pub fn resample(state: &mut MapState) -> SweepStats {
    let n_v = state.arena.n_voxels();
    let spv = state.arena.slots_per_voxel();
    let cap = state.params.per_voxel_cap(n_v);
    let seed = state.seed;
    let frame = state.frame;
    let (slots, counts) = state.arena.parts_mut();
    let deleted: u64 = slots
        .par_chunks_mut(spv)
        .zip(counts.par_iter_mut())
        .enumerate()
        .map(|(v, (slots, count))| {
            if *count == 0 {
                return 0;
            }
            let mut rng = substream(seed, &[PHASE_RESAMPLE, frame, v as u64]);
            let (deleted, live_after) = resample_voxel(slots, cap, &mut rng);
            *count = live_after;
            deleted
        })
        .sum();
    state.arena.sync_live_total();
    SweepStats {
        resampled_voxels: n_v as u64,
        deleted,
        live_after: state.arena.live_total(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FilterParams, MapConfig};
    use crate::geometry::Pose;
    use crate::pipeline::{preprocess, Frame};
    use approx::assert_abs_diff_eq;

    fn test_state(params: FilterParams) -> MapState {
        let cfg = MapConfig {
            map_size: [8.0, 8.0, 6.0],
            ..MapConfig::default()
        };
        let mut st = MapState::new(cfg, params, 42).unwrap();
        st.begin_frame(Pose::identity(), 0.0);
        st
    }

    fn add_survived(st: &mut MapState, pos: [f64; 3], vel: [f64; 3], w: f64) -> (usize, usize) {
        let p = Particle {
            flag: Flag::Survived,
            weight: w,
            velocity: Vector3::new(vel[0] as f32, vel[1] as f32, vel[2] as f32),
            position: Vector3::new(pos[0] as f32, pos[1] as f32, pos[2] as f32),
            stamp: -1.0,
        };
        let v = st.grid.index(p.position_f64(), st.center).unwrap();
        let s = st.arena.add(v, p).slot().unwrap();
        (v, s)
    }

    fn pre_from_sensor_points(st: &MapState, points: &[[f64; 3]]) -> crate::pipeline::PreprocessedFrame {
        let frame = Frame {
            timestamp: st.now,
            pose: st.pose,
            points: points
                .iter()
                .map(|p| Vector3::new(p[0] as f32, p[1] as f32, p[2] as f32))
                .collect(),
        };
        preprocess(st, &frame, None).unwrap()
    }

    #[test]
    fn likelihood_examples() {
        let noise = NoiseModel::ConstantSigma(1.0);
        let z = Vector3::new(1.0, 0.0, 0.0);
        let g0 = likelihood(z, z, 1.0, &noise);
        assert_abs_diff_eq!(g0, 0.06349363593424097, epsilon = 1e-15);
        let x = Vector3::new(2.0, 1.0, 1.0); // distance sqrt(3)
        let g1 = likelihood(z, x, 1.0, &noise);
        assert_abs_diff_eq!(g1, 0.06349363593424097 * (-1.5f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn predict_noiseless_cv_shift_and_survival_decay() {
        let params = FilterParams {
            q_pos_std: 0.0,
            q_vel_std: 0.0,
            ..FilterParams::default()
        };
        let mut st = test_state(params);
        let (v, s) = add_survived(&mut st, [2.0, 0.0, 0.5], [1.0, 0.0, 0.0], 0.2);
        let stats = predict(&mut st, 0.1);
        assert_eq!(stats.pruned, 0);
        // the particle may have changed slots; find it
        let p = st
            .arena
            .iter_live()
            .map(|(_, _, p)| *p)
            .next()
            .unwrap();
        let _ = (v, s);
        assert!((p.position_f64() - Vector3::new(2.1, 0.0, 0.5)).norm() < 1e-6);
        assert_abs_diff_eq!(p.weight, 0.2 * st.params.p_s, epsilon = 1e-15);
        // and it is indexed for the update
        assert!(st.index.consistent_with(&st.arena));
        assert_eq!(stats.indexed, 1);
    }

    #[test]
    fn predict_keeps_static_particles_in_place() {
        let params = FilterParams {
            q_pos_std: 0.0,
            q_vel_std: 0.0,
            ..FilterParams::default()
        };
        let mut st = test_state(params);
        add_survived(&mut st, [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], 0.2);
        predict(&mut st, 0.5);
        let p = st.arena.iter_live().map(|(_, _, p)| *p).next().unwrap();
        assert!((p.position_f64() - Vector3::new(1.0, 1.0, 1.0)).norm() < 1e-9);
    }

    #[test]
    fn predict_noise_variance_matches_configuration() {
        let params = FilterParams {
            q_pos_std: 0.05,
            q_vel_std: 0.1,
            v_hat: 0.2,
            ..FilterParams::default()
        };
        let mut st = test_state(params);
        let n = 10_000;
        for i in 0..n {
            let x = -3.5 + 7.0 * ((i % 100) as f64 / 100.0);
            let y = -3.5 + 7.0 * ((i / 100) as f64 / 100.0);
            add_survived(&mut st, [x, y, 0.0], [1.0, 0.0, 0.0], 1e-4);
        }
        predict(&mut st, 0.0);
        let mut dv = Vec::with_capacity(n);
        for (_, _, p) in st.arena.iter_live() {
            dv.push(p.velocity.x as f64 - 1.0);
        }
        assert_eq!(dv.len(), n);
        let mean = dv.iter().sum::<f64>() / n as f64;
        let var = dv.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(
            (var - 0.01).abs() < 0.05 * 0.01,
            "sample variance {var} vs configured 0.01"
        );
    }

    #[test]
    fn update_missed_detection_floor_is_exact() {
        // theory-variant semantics: an empty frame scales every visible
        // particle by exactly 1 - P_d
        let params = FilterParams {
            empty_pyramid_visible: true,
            ..FilterParams::default()
        };
        let mut st = test_state(params);
        for i in 0..50 {
            let az = -0.6 + 0.025 * i as f64;
            let pos = [3.0 * az.cos(), 3.0 * az.sin(), 0.3];
            add_survived(&mut st, pos, [0.0, 0.0, 0.0], 1e-3 * (i + 1) as f64);
        }
        reindex(&mut st);
        let p_d = st.params.p_d;
        let before: Vec<(usize, usize, f64)> = st
            .arena
            .iter_live()
            .map(|(v, s, p)| (v, s, p.weight))
            .collect();
        assert_eq!(before.len(), 50);
        let pre = pre_from_sensor_points(&st, &[]);
        update(&mut st, &pre);
        for (v, s, w) in before {
            let got = st.arena.get(v, s).weight;
            assert_eq!(got, (1.0 - p_d + 0.0) * w, "missed-detection scaling must be exact");
        }
    }

    #[test]
    fn update_empty_activation_scales_by_miss_probability() {
        let params = FilterParams {
            empty_pyramid_visible: true,
            kappa: 0.01,
            ..FilterParams::default()
        };
        let mut st = test_state(params);
        // particle forward, measurement far off in azimuth: outside the
        // activation window, so only the miss term applies
        add_survived(&mut st, [2.0, 0.0, 0.0], [0.0, 0.0, 0.0], 0.1);
        reindex(&mut st);
        let far = [2.0 * 0.64f64.cos(), 2.0 * 0.64f64.sin(), 0.0];
        let pre = pre_from_sensor_points(&st, &[far]);
        update(&mut st, &pre);
        let p = st.arena.iter_live().map(|(_, _, p)| *p).next().unwrap();
        assert_eq!(p.weight, (1.0 - 0.9) * 0.1);
    }

    #[test]
    fn update_single_particle_at_measurement_closed_form() {
        let params = FilterParams {
            kappa: 0.0,
            ..FilterParams::default()
        };
        let mut st = test_state(params);
        add_survived(&mut st, [2.0, 0.0, 0.0], [0.0, 0.0, 0.0], 0.1);
        reindex(&mut st);
        let pre = pre_from_sensor_points(&st, &[[2.0, 0.0, 0.0]]);
        update(&mut st, &pre);
        let p = st.arena.iter_live().map(|(_, _, p)| *p).next().unwrap();
        // w = (1 - P_d) w + P_d g / (P_d w g) * w = (1 - P_d) w + 1
        assert_abs_diff_eq!(p.weight, (1.0 - 0.9) * 0.1 + 1.0, epsilon = 1e-9);
    }

    #[test]
    fn update_skips_particles_behind_the_visible_length() {
        let mut st = test_state(FilterParams::default());
        // measurement at 3 m, particle at sqrt(10) m in the same pyramid
        let r = 10.0f64.sqrt();
        add_survived(&mut st, [r, 0.0, 0.0], [0.0, 0.0, 0.0], 0.1);
        reindex(&mut st);
        let pre = pre_from_sensor_points(&st, &[[3.0, 0.0, 0.0]]);
        let pyd = pre.pyramid_of[0] as usize;
        assert!((pre.visible_len2[pyd] - 9.0).abs() < 1e-6);
        update(&mut st, &pre);
        let p = st.arena.iter_live().map(|(_, _, p)| *p).next().unwrap();
        assert_eq!(p.weight, 0.1, "occluded particle must keep its prior");
    }

    #[test]
    fn birth_cohort_weights_and_mass() {
        let params = FilterParams {
            v_b: Some(0.1),
            l_b: 20,
            ..FilterParams::default()
        };
        let mut st = test_state(params);
        // ten filtered points along an arc
        let points: Vec<[f64; 3]> = (0..10)
            .map(|i| {
                let az = -0.3 + 0.066 * i as f64;
                [3.0 * az.cos(), 3.0 * az.sin(), 0.4]
            })
            .collect();
        let pre = pre_from_sensor_points(&st, &points);
        assert_eq!(pre.points.len(), 10);
        let labels = VelocityLabels::unknown(10);
        let stats = birth(&mut st, &pre, &labels);
        assert_eq!(stats.born, 200);
        assert_abs_diff_eq!(stats.mass, 0.1, epsilon = 1e-12);
        for (_, _, p) in st.arena.iter_live() {
            assert_eq!(p.flag, Flag::Newborn);
            assert_abs_diff_eq!(p.weight, 0.1 / 200.0, epsilon = 1e-18);
        }
    }

    #[test]
    fn birth_static_label_spawns_static_particles() {
        let mut st = test_state(FilterParams::default());
        let pre = pre_from_sensor_points(&st, &[[2.5, 0.0, -0.5]]);
        let labels = VelocityLabels(vec![Label::Static]);
        birth(&mut st, &pre, &labels);
        let mut count = 0;
        for (_, _, p) in st.arena.iter_live() {
            assert_eq!(p.velocity, Vector3::zeros());
            count += 1;
        }
        assert_eq!(count, st.params.l_b);
    }

    #[test]
    fn birth_mixture_allocation_follows_lambda() {
        let params = FilterParams {
            l_b: 20,
            sigma_vb: 0.001,
            dst_min_particles: 5,
            ..FilterParams::default()
        };
        let mut st = test_state(params);
        let pre = pre_from_sensor_points(&st, &[[2.5, 0.0, 0.0]]);
        let voxel = st.grid.index(pre.points[0], st.center).unwrap();
        st.dst_lambda1[voxel] = 0.4;
        st.dst_count[voxel] = 100;
        let labels = VelocityLabels(vec![Label::Estimated(Vector3::new(2.0, 0.0, 0.0))]);
        birth(&mut st, &pre, &labels);
        let (mut zeros, mut near_estimate, mut elsewhere) = (0, 0, 0);
        for (_, _, p) in st.arena.iter_live() {
            let v = p.velocity.cast::<f64>();
            if v == Vector3::zeros() {
                zeros += 1;
            } else if (v - Vector3::new(2.0, 0.0, 0.0)).norm() < 0.05 {
                near_estimate += 1;
            } else {
                elsewhere += 1;
            }
        }
        // lambda1 = 0.4, L_b = 20: 8 dynamic (4 Gaussian + 4 random), 12 static
        assert_eq!(zeros, 12);
        assert_eq!(near_estimate, 4);
        assert_eq!(elsewhere, 4);
    }

    #[test]
    fn newborns_keep_prior_weight_through_predict() {
        let params = FilterParams {
            q_pos_std: 0.0,
            q_vel_std: 0.0,
            ..FilterParams::default()
        };
        let mut st = test_state(params);
        let pre = pre_from_sensor_points(&st, &[[2.0, 0.0, 0.0]]);
        birth(&mut st, &pre, &VelocityLabels(vec![Label::Static]));
        let mass_before = st.newborn_mass;
        predict(&mut st, 0.1);
        assert_abs_diff_eq!(st.newborn_mass, mass_before, epsilon = 1e-15);
        for (_, _, p) in st.arena.iter_live() {
            assert_eq!(p.flag, Flag::Newborn);
            assert_abs_diff_eq!(p.weight, st.params.w_init, epsilon = 1e-18);
        }
    }

    #[test]
    fn resample_equalizes_weights_and_conserves_mass() {
        let mut st = test_state(FilterParams::default());
        let (va, _) = add_survived(&mut st, [1.0, 1.0, 1.0], [0.0; 3], 0.3);
        add_survived(&mut st, [1.01, 1.0, 1.0], [0.0; 3], 0.2);
        resample(&mut st);
        let ws: Vec<f64> = st.arena.iter_voxel(va).map(|(_, p)| p.weight).collect();
        assert_eq!(ws.len(), 2);
        for w in &ws {
            assert_abs_diff_eq!(*w, 0.25, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(ws.iter().sum::<f64>(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn resample_caps_overfull_voxels_preserving_mass() {
        let params = FilterParams {
            l_max: 480_000, // cap of 10 per voxel at this map size
            ..FilterParams::default()
        };
        let mut st = test_state(params);
        let cap = st.params.per_voxel_cap(st.arena.n_voxels());
        assert_eq!(cap, 10);
        let mut voxel = 0;
        for i in 0..30 {
            let (v, _) = add_survived(
                &mut st,
                [1.0 + 1e-4 * i as f64, 1.0, 1.0],
                [0.0; 3],
                1.0 / 30.0,
            );
            voxel = v;
        }
        let before = st.arena.voxel_weight(voxel);
        resample(&mut st);
        let after = st.arena.voxel_weight(voxel);
        assert!(st.arena.live_count(voxel) as usize <= cap);
        assert_abs_diff_eq!(before, after, epsilon = 1e-12);
    }

    #[test]
    fn resample_empties_dead_mass_and_skips_empty_voxels() {
        let mut st = test_state(FilterParams::default());
        let (v, s) = add_survived(&mut st, [0.5, 0.5, 0.5], [0.0; 3], 0.5);
        st.arena.get_mut(v, s).weight = 0.0;
        resample(&mut st);
        assert_eq!(st.arena.live_count(v), 0);
        assert_eq!(st.arena.live_total(), 0);
    }

    #[test]
    fn dst_coefficient_examples() {
        let mut st = test_state(FilterParams::default());
        // W_d = 0.2 (fast), W_s = 0.6 (zero speed), W_ds = 0.2 (slow)
        let (v, _) = add_survived(&mut st, [1.0, 1.0, 1.0], [1.0, 0.0, 0.0], 0.2);
        add_survived(&mut st, [1.02, 1.0, 1.0], [0.0, 0.0, 0.0], 0.6);
        add_survived(&mut st, [1.04, 1.0, 1.0], [0.1, 0.0, 0.0], 0.2);
        let dst = dst_coefficients(&st, st.params.v_hat);
        assert_abs_diff_eq!(dst.lambda1[v], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(dst.lambda1[v] + dst.lambda2(v), 1.0, epsilon = 0.0);

        // all static
        let mut st2 = test_state(FilterParams::default());
        let (v2, _) = add_survived(&mut st2, [1.0, 1.0, 1.0], [0.0; 3], 0.4);
        let dst2 = dst_coefficients(&st2, st2.params.v_hat);
        assert_eq!(dst2.lambda1[v2], 0.0);

        // empty voxel falls back to half/half
        assert_eq!(dst2.lambda1[0], 0.5);
    }

    #[test]
    fn dst_lambda_monotone_in_dynamic_mass() {
        let mut prev = -1.0;
        for wd in [0.0, 0.1, 0.2, 0.5, 1.0] {
            let mut st = test_state(FilterParams::default());
            let (v, _) = add_survived(&mut st, [1.0, 1.0, 1.0], [0.0; 3], 0.6);
            add_survived(&mut st, [1.02, 1.0, 1.0], [0.1, 0.0, 0.0], 0.2);
            if wd > 0.0 {
                add_survived(&mut st, [1.04, 1.0, 1.0], [1.0, 0.0, 0.0], wd);
            }
            let l1 = dst_coefficients(&st, st.params.v_hat).lambda1[v];
            assert!(l1 >= prev);
            prev = l1;
        }
    }

    #[test]
    fn fused_sweep_clears_newborn_flags() {
        let mut st = test_state(FilterParams::default());
        let pre = pre_from_sensor_points(&st, &[[2.0, 0.0, 0.0]]);
        birth(&mut st, &pre, &VelocityLabels(vec![Label::Static]));
        resample_occupancy_dst(&mut st);
        for (_, _, p) in st.arena.iter_live() {
            assert_eq!(p.flag, Flag::Survived);
        }
        assert_eq!(st.newborn_mass, 0.0);
    }

    #[test]
    fn activation_space_bound_holds_for_excluded_measurements()
    {
        use rand::{Rng, SeedableRng};
        // measurements outside a particle's activation space would have
        // contributed at most epsilon density
        let cfg = MapConfig {
            map_size: [8.0, 8.0, 6.0],
            activation_n: None, // derive n from the noise model
            ..MapConfig::default()
        };
        let st = MapState::new(cfg.clone(), FilterParams::default(), 1).unwrap();
        let n = st.activation_n;
        let theta = cfg.pyramid_angle;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let mut checked = 0;
        while checked < 10_000 {
            let r = rng.gen_range(cfg.r_min..3.9);
            let zen: f64 = rng.gen_range(1.05..2.09); // inside the vertical FOV
            let az: f64 = rng.gen_range(-0.7..0.7);
            let particle = Vector3::new(
                r * zen.sin() * az.cos(),
                r * zen.sin() * az.sin(),
                r * zen.cos(),
            );
            let rz: f64 = rng.gen_range(cfg.r_min..3.9);
            let mzen: f64 = rng.gen_range(1.05..2.09);
            let maz: f64 = rng.gen_range(-0.7..0.7);
            // require a bin separation beyond the activation window
            let bin = |a: f64, t: f64| (a / t).floor() as i64;
            let dz = (bin(mzen, theta) - bin(zen, theta)).abs();
            let da = (bin(maz.rem_euclid(std::f64::consts::TAU), theta)
                - bin(az.rem_euclid(std::f64::consts::TAU), theta))
            .abs()
            .min(120 - (bin(maz.rem_euclid(std::f64::consts::TAU), theta)
                - bin(az.rem_euclid(std::f64::consts::TAU), theta))
                .abs());
            if dz <= n as i64 && da <= n as i64 {
                continue;
            }
            let z = Vector3::new(
                rz * mzen.sin() * maz.cos(),
                rz * mzen.sin() * maz.sin(),
                rz * mzen.cos(),
            );
            let g = likelihood(z, particle, r, &cfg.noise_model);
            assert!(
                g <= cfg.epsilon + 1e-12,
                "excluded likelihood {g} above epsilon at r={r}"
            );
            checked += 1;
        }
    }
}
