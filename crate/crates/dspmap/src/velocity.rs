//! Object-level initial velocity estimation: ground segmentation, Euclidean
//! clustering over a spatial hash, Kuhn-Munkres cluster matching, and center
//! differencing between adjacent frames.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::config::EstimatorParams;

/// Per-point velocity label for the current frame's filtered points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    /// Ground or otherwise known-static point.
    Static,
    /// Velocity of the matched cluster the point belongs to.
    Estimated(Vector3<f64>),
    /// Unmatched, unclustered, or first-frame point.
    Unknown,
}

#[derive(Debug, Clone, Default)]
pub struct VelocityLabels(pub Vec<Label>);

impl VelocityLabels {
    pub fn unknown(n: usize) -> VelocityLabels {
        VelocityLabels(vec![Label::Unknown; n])
    }
}

/// A point cluster with its matching features.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub centroid: Vector3<f64>,
    pub count: usize,
    /// Indices into the frame's point list.
    pub members: Vec<u32>,
}

/// Splits points into (ground, rest) index sets by world height.
pub fn segment_ground(points: &[Vector3<f64>], height: f64) -> (Vec<u32>, Vec<u32>) {
    let mut ground = Vec::new();
    let mut rest = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if p.z <= height {
            ground.push(i as u32);
        } else {
            rest.push(i as u32);
        }
    }
    (ground, rest)
}

/// Euclidean cluster extraction: connected components under
/// `dist <= cluster_dist`, dropping components below `min_size`.
pub fn extract_clusters(
    points: &[Vector3<f64>],
    subset: &[u32],
    cluster_dist: f64,
    min_size: usize,
) -> Vec<Cluster> {
    let cell = cluster_dist.max(1e-9);
    let key = |p: &Vector3<f64>| {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    };
    let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
    for &i in subset {
        cells.entry(key(&points[i as usize])).or_default().push(i);
    }
    let mut visited: HashMap<u32, bool> = subset.iter().map(|&i| (i, false)).collect();
    let d2 = cluster_dist * cluster_dist;
    let mut clusters = Vec::new();
    for &start in subset {
        if visited[&start] {
            continue;
        }
        let mut members = Vec::new();
        let mut stack = vec![start];
        visited.insert(start, true);
        while let Some(i) = stack.pop() {
            members.push(i);
            let p = points[i as usize];
            let (cx, cy, cz) = key(&p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(list) = cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                            continue;
                        };
                        for &j in list {
                            if !visited[&j] && (points[j as usize] - p).norm_squared() <= d2 {
                                visited.insert(j, true);
                                stack.push(j);
                            }
                        }
                    }
                }
            }
        }
        if members.len() >= min_size {
            members.sort_unstable();
            let centroid = members
                .iter()
                .fold(Vector3::zeros(), |acc, &i| acc + points[i as usize])
                / members.len() as f64;
            clusters.push(Cluster { centroid, count: members.len(), members });
        }
    }
    clusters
}

/// Minimum-cost assignment on a square matrix (shortest augmenting path,
/// O(n^3)). Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

const FORBIDDEN: f64 = 1e9;

/// Matching cost: center distance plus the normalized point-count difference.
fn pair_cost(a: &Cluster, b: &Cluster, w_count: f64) -> f64 {
    let dc = (a.centroid - b.centroid).norm();
    let dn = (a.count as f64 - b.count as f64).abs() / a.count.max(b.count) as f64;
    dc + w_count * dn
}

/// Matches previous clusters to current ones; pairs with center distance
/// beyond `gate_dist` are forbidden. Returns, per current cluster, the index
/// of its matched previous cluster (`None` marks a new obstacle).
pub fn match_clusters(
    prev: &[Cluster],
    cur: &[Cluster],
    gate_dist: f64,
    w_count: f64,
) -> Vec<Option<usize>> {
    let n = prev.len().max(cur.len());
    if n == 0 {
        return Vec::new();
    }
    // pad to square with zero-cost dummies
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i >= prev.len() || j >= cur.len() {
                        0.0
                    } else if (prev[i].centroid - cur[j].centroid).norm() > gate_dist {
                        FORBIDDEN
                    } else {
                        pair_cost(&prev[i], &cur[j], w_count)
                    }
                })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost);
    let mut matched = vec![None; cur.len()];
    for (i, &j) in assignment.iter().enumerate() {
        if i < prev.len() && j < cur.len() && cost[i][j] < FORBIDDEN / 2.0 {
            matched[j] = Some(i);
        }
    }
    matched
}

/// Clusters carried between frames.
#[derive(Debug, Default)]
pub struct TrackerState {
    pub prev: Vec<Cluster>,
}

impl TrackerState {
    pub fn new() -> TrackerState {
        TrackerState::default()
    }
}

/// Per-frame result: the point labels plus the matching, for debug dumps.
#[derive(Debug)]
pub struct EstimateOutput {
    pub labels: VelocityLabels,
    pub clusters: Vec<Cluster>,
    pub matched_prev: Vec<Option<usize>>,
    pub velocities: Vec<Option<Vector3<f64>>>,
}

/// Labels every filtered point of the frame: ground points are static,
/// matched clusters carry the differenced center velocity, everything else
/// is unknown. Updates the tracker with this frame's clusters.
pub fn estimate(
    points: &[Vector3<f64>],
    tracker: &mut TrackerState,
    dt: f64,
    params: &EstimatorParams,
    filter_res: f64,
    v_max: f64,
) -> EstimateOutput {
    let mut labels = VelocityLabels::unknown(points.len());
    let (ground, rest) = segment_ground(points, params.ground_height);
    for &i in &ground {
        labels.0[i as usize] = Label::Static;
    }
    let cluster_dist = params.cluster_dist.unwrap_or(2.0 * filter_res);
    let clusters = extract_clusters(points, &rest, cluster_dist, params.min_cluster_size);
    let (matched, velocities) = if dt > 0.0 && !tracker.prev.is_empty() {
        let gate = v_max * dt;
        let matched = match_clusters(&tracker.prev, &clusters, gate, params.w_count);
        let velocities: Vec<Option<Vector3<f64>>> = matched
            .iter()
            .enumerate()
            .map(|(j, m)| {
                m.map(|i| (clusters[j].centroid - tracker.prev[i].centroid) / dt)
            })
            .collect();
        for (j, vel) in velocities.iter().enumerate() {
            if let Some(v) = vel {
                for &m in &clusters[j].members {
                    labels.0[m as usize] = Label::Estimated(*v);
                }
            }
        }
        (matched, velocities)
    } else {
        (vec![None; clusters.len()], vec![None; clusters.len()])
    };
    tracker.prev = clusters.clone();
    EstimateOutput { labels, clusters, matched_prev: matched, velocities }
}
