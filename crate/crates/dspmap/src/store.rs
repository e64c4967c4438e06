//! Fixed-capacity, flag-based particle storage indexed by voxel subspace,
//! plus the per-frame pyramid index.
//!
//! Particles live in one large preallocated arena; adding and deleting only
//! flips a flag, and a full voxel silently drops the incoming particle
//! (counted, never an error). The pyramid index holds references into the
//! arena and is rebuilt from scratch every frame.

use nalgebra::Vector3;

/// Slot state of a particle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Flag {
    Vacant = 0,
    Survived = 1,
    Newborn = 2,
    /// Zero-weight bookkeeping particle carrying an observation timestamp.
    Time = 3,
}

/// One particle: a flagged storage slot with weight and 6-D state.
#[derive(Debug, Clone, Copy)]
pub struct Particle {
    pub flag: Flag,
    pub weight: f64,
    pub velocity: Vector3<f32>,
    pub position: Vector3<f32>,
    /// Last refresh time for `Time` particles; negative when never observed.
    pub stamp: f32,
}

impl Particle {
    pub fn vacant() -> Particle {
        Particle {
            flag: Flag::Vacant,
            weight: 0.0,
            velocity: Vector3::zeros(),
            position: Vector3::zeros(),
            stamp: -1.0,
        }
    }

    pub fn newborn(position: Vector3<f32>, velocity: Vector3<f32>, weight: f64) -> Particle {
        Particle { flag: Flag::Newborn, weight, velocity, position, stamp: -1.0 }
    }

    #[inline]
    pub fn is_live(&self) -> bool {
        self.flag != Flag::Vacant
    }

    #[inline]
    pub fn speed(&self) -> f64 {
        self.velocity.cast::<f64>().norm()
    }

    #[inline]
    pub fn position_f64(&self) -> Vector3<f64> {
        self.position.cast::<f64>()
    }
}

/// Result of an insertion into bounded storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stored {
    At(usize),
    /// Capacity exhausted; the particle was discarded.
    Dropped,
}

impl Stored {
    pub fn slot(self) -> Option<usize> {
        match self {
            Stored::At(s) => Some(s),
            Stored::Dropped => None,
        }
    }
}

/// Preallocated particle arena with a fixed number of slots per voxel.
pub struct VoxelArena {
    slots: Vec<Particle>,
    counts: Vec<u32>,
    slots_per_voxel: usize,
    live_total: u64,
    /// Particles discarded because their voxel was full.
    pub dropped: u64,
}

impl VoxelArena {
    pub fn new(n_voxels: usize, slots_per_voxel: usize) -> VoxelArena {
        VoxelArena {
            slots: vec![Particle::vacant(); n_voxels * slots_per_voxel],
            counts: vec![0; n_voxels],
            slots_per_voxel,
            live_total: 0,
            dropped: 0,
        }
    }

    #[inline]
    pub fn n_voxels(&self) -> usize {
        self.counts.len()
    }

    #[inline]
    pub fn slots_per_voxel(&self) -> usize {
        self.slots_per_voxel
    }

    #[inline]
    pub fn live_total(&self) -> u64 {
        self.live_total
    }

    #[inline]
    pub fn live_count(&self, voxel: usize) -> u32 {
        self.counts[voxel]
    }

    /// Writes the particle into the first vacant slot of `voxel`.
    pub fn add(&mut self, voxel: usize, p: Particle) -> Stored {
        debug_assert!(p.is_live());
        if self.counts[voxel] as usize >= self.slots_per_voxel {
            self.dropped += 1;
            return Stored::Dropped;
        }
        let base = voxel * self.slots_per_voxel;
        for s in 0..self.slots_per_voxel {
            if !self.slots[base + s].is_live() {
                self.slots[base + s] = p;
                self.counts[voxel] += 1;
                self.live_total += 1;
                return Stored::At(s);
            }
        }
        // counts said there was room; flags disagree
        unreachable!("voxel occupancy counter out of sync");
    }

    /// Deletes by flagging the slot vacant.
    pub fn delete(&mut self, voxel: usize, slot: usize) {
        let p = &mut self.slots[voxel * self.slots_per_voxel + slot];
        debug_assert!(p.is_live());
        p.flag = Flag::Vacant;
        self.counts[voxel] -= 1;
        self.live_total -= 1;
    }

    /// Moves a live particle to a new voxel (`None` destination prunes it).
    /// The particle's position must already hold its new value.
    pub fn move_to(&mut self, voxel: usize, slot: usize, dest: Option<usize>) -> Stored {
        match dest {
            Some(d) if d == voxel => Stored::At(slot),
            Some(d) => {
                let p = *self.get(voxel, slot);
                self.delete(voxel, slot);
                self.add(d, p)
            }
            None => {
                self.delete(voxel, slot);
                Stored::Dropped
            }
        }
    }

    #[inline]
    pub fn get(&self, voxel: usize, slot: usize) -> &Particle {
        &self.slots[voxel * self.slots_per_voxel + slot]
    }

    #[inline]
    pub fn get_mut(&mut self, voxel: usize, slot: usize) -> &mut Particle {
        &mut self.slots[voxel * self.slots_per_voxel + slot]
    }

    /// Live particles of one voxel in slot order.
    pub fn iter_voxel(&self, voxel: usize) -> impl Iterator<Item = (usize, &Particle)> {
        let base = voxel * self.slots_per_voxel;
        self.slots[base..base + self.slots_per_voxel]
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_live())
    }

    /// All live particles as (voxel, slot, particle).
    pub fn iter_live(&self) -> impl Iterator<Item = (usize, usize, &Particle)> {
        let spv = self.slots_per_voxel;
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_live())
            .map(move |(i, p)| (i / spv, i % spv, p))
    }

    /// Raw slots of one voxel, for in-place sweeps.
    #[inline]
    pub fn voxel_slots_mut(&mut self, voxel: usize) -> &mut [Particle] {
        let base = voxel * self.slots_per_voxel;
        &mut self.slots[base..base + self.slots_per_voxel]
    }

    /// Raw views for chunked parallel sweeps: slots, per-voxel counters.
    /// Callers that mutate flags must fix the counters and then call
    /// [`VoxelArena::sync_live_total`].
    pub fn parts_mut(&mut self) -> (&mut [Particle], &mut [u32]) {
        (&mut self.slots, &mut self.counts)
    }

    /// Read-only raw slot array (length `n_voxels * slots_per_voxel`).
    #[inline]
    pub fn slots_raw(&self) -> &[Particle] {
        &self.slots
    }

    /// Recomputes the global live total from the per-voxel counters.
    pub fn sync_live_total(&mut self) {
        self.live_total = self.counts.iter().map(|&c| c as u64).sum();
    }

    /// Checks counter/flag agreement; used by debug builds and tests.
    pub fn counters_consistent(&self) -> bool {
        let mut total = 0u64;
        for v in 0..self.counts.len() {
            let base = v * self.slots_per_voxel;
            let n = self.slots[base..base + self.slots_per_voxel]
                .iter()
                .filter(|p| p.is_live())
                .count() as u32;
            if n != self.counts[v] {
                return false;
            }
            total += n as u64;
        }
        total == self.live_total
    }

    /// Total weight in one voxel.
    pub fn voxel_weight(&self, voxel: usize) -> f64 {
        self.iter_voxel(voxel).map(|(_, p)| p.weight).sum()
    }
}

/// Reference from the pyramid index into the arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParticleRef {
    pub voxel: u32,
    pub slot: u32,
}

/// Per-frame index of particles by FOV pyramid subspace.
pub struct PyramidIndex {
    entries: Vec<Vec<ParticleRef>>,
    cap: usize,
    /// Index insertions discarded because a pyramid was full.
    pub dropped: u64,
}

impl PyramidIndex {
    pub fn new(n_pyramids: usize, cap: usize) -> PyramidIndex {
        PyramidIndex { entries: vec![Vec::new(); n_pyramids], cap: cap.max(1), dropped: 0 }
    }

    #[inline]
    pub fn n_pyramids(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn capacity_per_pyramid(&self) -> usize {
        self.cap
    }

    pub fn push(&mut self, pyramid: usize, r: ParticleRef) -> Stored {
        let list = &mut self.entries[pyramid];
        if list.len() >= self.cap {
            self.dropped += 1;
            return Stored::Dropped;
        }
        list.push(r);
        Stored::At(list.len() - 1)
    }

    #[inline]
    pub fn entries(&self, pyramid: usize) -> &[ParticleRef] {
        &self.entries[pyramid]
    }

    #[inline]
    pub fn count(&self, pyramid: usize) -> usize {
        self.entries[pyramid].len()
    }

    /// Empties every pyramid; called at the start of each frame.
    pub fn clear(&mut self) {
        for list in &mut self.entries {
            list.clear();
        }
    }

    /// True when every entry references a live arena slot.
    pub fn consistent_with(&self, arena: &VoxelArena) -> bool {
        self.entries.iter().flatten().all(|r| {
            (r.voxel as usize) < arena.n_voxels()
                && arena.get(r.voxel as usize, r.slot as usize).is_live()
        })
    }
}

/// Formats one live particle as a dump record:
/// voxel, slot, flag, weight, vx, vy, vz, px, py, pz.
pub fn dump_record(voxel: usize, slot: usize, p: &Particle) -> String {
    format!(
        "{}\t{}\t{}\t{:e}\t{}\t{}\t{}\t{}\t{}\t{}",
        voxel, slot, p.flag as u8, p.weight,
        p.velocity.x, p.velocity.y, p.velocity.z,
        p.position.x, p.position.y, p.position.z
    )
}

pub const DUMP_HEADER: &str = "voxel\tslot\tflag\tweight\tvx\tvy\tvz\tpx\tpy\tpz";

#[cfg(test)]
mod tests {
    use super::*;

    fn particle(w: f64) -> Particle {
        Particle::newborn(Vector3::new(0.5, 0.5, 0.5), Vector3::zeros(), w)
    }

    #[test]
    fn add_fills_first_vacancy() {
        let mut arena = VoxelArena::new(4, 3);
        assert_eq!(arena.add(1, particle(0.1)), Stored::At(0));
        assert_eq!(arena.add(1, particle(0.2)), Stored::At(1));
        arena.delete(1, 0);
        assert_eq!(arena.add(1, particle(0.3)), Stored::At(0));
        assert_eq!(arena.live_count(1), 2);
    }

    #[test]
    fn full_voxel_drops_and_keeps_count() {
        let mut arena = VoxelArena::new(2, 8);
        for _ in 0..8 {
            assert!(matches!(arena.add(0, particle(0.1)), Stored::At(_)));
        }
        assert_eq!(arena.add(0, particle(0.1)), Stored::Dropped);
        assert_eq!(arena.live_count(0), 8);
        assert_eq!(arena.dropped, 1);
    }

    #[test]
    fn delete_zeroes_voxel_weight() {
        let mut arena = VoxelArena::new(2, 4);
        arena.add(0, particle(0.3));
        arena.add(0, particle(0.2));
        arena.delete(0, 0);
        arena.delete(0, 1);
        assert_eq!(arena.voxel_weight(0), 0.0);
        assert!(!arena.get(0, 0).is_live());
    }

    #[test]
    fn move_conserves_weight_with_drops_accounted() {
        // bookkeeping oracle: weight before == weight after + dropped weight
        let mut arena = VoxelArena::new(3, 2);
        arena.add(0, particle(0.1));
        arena.add(0, particle(0.2));
        arena.add(1, particle(0.4));
        arena.add(1, particle(0.8));
        let before: f64 = (0..3).map(|v| arena.voxel_weight(v)).sum();

        let mut dropped_weight = 0.0;
        // voxel 1 is full: moving both of voxel 0 there drops one
        for slot in 0..2 {
            let w = arena.get(0, slot).weight;
            if arena.move_to(0, slot, Some(1)) == Stored::Dropped {
                dropped_weight += w;
            }
        }
        // and moving out of the map prunes
        let w = arena.get(1, 0).weight;
        assert_eq!(arena.move_to(1, 0, None), Stored::Dropped);
        dropped_weight += w;

        let after: f64 = (0..3).map(|v| arena.voxel_weight(v)).sum();
        assert!((before - (after + dropped_weight)).abs() < 1e-12);
        assert!(arena.counters_consistent());
    }

    #[test]
    fn move_within_same_voxel_keeps_slot() {
        let mut arena = VoxelArena::new(2, 4);
        arena.add(0, particle(0.5));
        assert_eq!(arena.move_to(0, 0, Some(0)), Stored::At(0));
        assert_eq!(arena.live_count(0), 1);
    }

    #[test]
    fn pyramid_index_capacity_and_clear() {
        let mut idx = PyramidIndex::new(4, 3);
        let r = ParticleRef { voxel: 0, slot: 0 };
        assert_eq!(idx.push(2, r), Stored::At(0));
        assert_eq!(idx.count(2), 1);
        idx.push(2, r);
        idx.push(2, r);
        assert_eq!(idx.push(2, r), Stored::Dropped);
        assert_eq!(idx.dropped, 1);
        idx.clear();
        assert!((0..4).all(|p| idx.count(p) == 0));
    }

    #[test]
    fn randomized_ops_never_desync_counters() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n_voxels = 32;
        let mut arena = VoxelArena::new(n_voxels, 8);
        let mut idx = PyramidIndex::new(8, 64);
        let mut live: Vec<(usize, usize)> = Vec::new();
        for _ in 0..100_000 {
            match rng.gen_range(0..3) {
                0 => {
                    let v = rng.gen_range(0..n_voxels);
                    if let Stored::At(s) = arena.add(v, particle(rng.gen_range(0.0..1.0))) {
                        live.push((v, s));
                        idx.push(rng.gen_range(0..8), ParticleRef {
                            voxel: v as u32,
                            slot: s as u32,
                        });
                    }
                }
                1 if !live.is_empty() => {
                    let i = rng.gen_range(0..live.len());
                    let (v, s) = live.swap_remove(i);
                    arena.delete(v, s);
                    idx.clear();
                    for &(v, s) in &live {
                        idx.push(rng.gen_range(0..8), ParticleRef { voxel: v as u32, slot: s as u32 });
                    }
                }
                _ if !live.is_empty() => {
                    let i = rng.gen_range(0..live.len());
                    let (v, s) = live[i];
                    let dest = rng.gen_range(0..n_voxels);
                    match arena.move_to(v, s, Some(dest)) {
                        Stored::At(ns) => live[i] = (dest, ns),
                        Stored::Dropped => {
                            live.swap_remove(i);
                        }
                    }
                    idx.clear();
                    for &(v, s) in &live {
                        idx.push(rng.gen_range(0..8), ParticleRef { voxel: v as u32, slot: s as u32 });
                    }
                }
                _ => {}
            }
        }
        assert!(arena.counters_consistent());
        assert!(idx.consistent_with(&arena));
        let by_scan: u64 = (0..n_voxels).map(|v| arena.live_count(v) as u64).sum();
        assert_eq!(by_scan, arena.live_total());
    }
}
