//! File formats: the DSPD dataset stream, ground-truth files, and occupancy
//! grid exports. All binary formats are little-endian and versioned.

use std::io::{Read, Write};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::Pose;
use crate::occupancy::OccupancyGrid;
use crate::pipeline::Frame;
use crate::sim::{AgentTruth, GroundTruthStep};

pub const DATASET_MAGIC: &[u8; 4] = b"DSPD";
pub const TRUTH_MAGIC: &[u8; 4] = b"DSPT";
pub const GRID_MAGIC: &[u8; 4] = b"DSPG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic, expected {0}")]
    BadMagic(&'static str),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("corrupt data at frame {frame}: {msg}")]
    Corrupt { frame: u64, msg: String },
}

fn w_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn w_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn w_f32<W: Write>(w: &mut W, v: f32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
fn w_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn r_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn r_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
fn r_f32<R: Read>(r: &mut R) -> std::io::Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}
fn r_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Streams frames into the DSPD dataset format.
pub struct DatasetWriter<W: Write> {
    w: W,
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(mut w: W) -> Result<DatasetWriter<W>, IoError> {
        w.write_all(DATASET_MAGIC)?;
        w_u32(&mut w, FORMAT_VERSION)?;
        Ok(DatasetWriter { w })
    }

    pub fn write_frame(&mut self, frame: &Frame) -> Result<(), IoError> {
        w_f64(&mut self.w, frame.timestamp)?;
        for a in 0..3 {
            w_f32(&mut self.w, frame.pose.position[a] as f32)?;
        }
        let q = frame.pose.orientation.quaternion();
        for v in [q.w, q.i, q.j, q.k] {
            w_f32(&mut self.w, v as f32)?;
        }
        w_u32(&mut self.w, frame.points.len() as u32)?;
        for p in &frame.points {
            w_f32(&mut self.w, p.x)?;
            w_f32(&mut self.w, p.y)?;
            w_f32(&mut self.w, p.z)?;
        }
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.w
    }
}

/// Reads a DSPD dataset; frame parse errors carry the frame index.
pub struct DatasetReader<R: Read> {
    r: R,
    next_frame: u64,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut r: R) -> Result<DatasetReader<R>, IoError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(IoError::BadMagic("DSPD"));
        }
        let version = r_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(IoError::Version(version));
        }
        Ok(DatasetReader { r, next_frame: 0 })
    }

    /// Next frame, or `None` at a clean end of stream.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, IoError> {
        let timestamp = match r_f64(&mut self.r) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let frame = self.next_frame;
        let fail = |msg: &str| IoError::Corrupt { frame, msg: msg.to_string() };
        let mut pos = Vector3::zeros();
        for a in 0..3 {
            pos[a] = r_f32(&mut self.r).map_err(|_| fail("truncated position"))? as f64;
        }
        let mut q = [0f32; 4];
        for v in &mut q {
            *v = r_f32(&mut self.r).map_err(|_| fail("truncated quaternion"))?;
        }
        let quat = Quaternion::new(q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64);
        if quat.norm() < 1e-6 {
            return Err(fail("zero quaternion"));
        }
        let n = r_u32(&mut self.r).map_err(|_| fail("truncated point count"))?;
        let mut points = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let x = r_f32(&mut self.r).map_err(|_| fail("truncated point data"))?;
            let y = r_f32(&mut self.r).map_err(|_| fail("truncated point data"))?;
            let z = r_f32(&mut self.r).map_err(|_| fail("truncated point data"))?;
            points.push(Vector3::new(x, y, z));
        }
        self.next_frame += 1;
        Ok(Some(Frame {
            timestamp,
            pose: Pose::new(pos, UnitQuaternion::from_quaternion(quat)),
            points,
        }))
    }

    pub fn frames(mut self) -> impl Iterator<Item = Result<Frame, IoError>> {
        std::iter::from_fn(move || self.next_frame().transpose())
    }
}

fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect()
}

/// Ground-truth file header plus all evaluation steps.
#[derive(Debug, Clone)]
pub struct GroundTruthFile {
    pub map_size: [f64; 3],
    pub edge: f64,
    pub dims: [usize; 3],
    pub stride: u32,
    pub steps: Vec<GroundTruthStep>,
}

pub fn write_ground_truth<W: Write>(mut w: W, gt: &GroundTruthFile) -> Result<(), IoError> {
    w.write_all(TRUTH_MAGIC)?;
    w_u32(&mut w, FORMAT_VERSION)?;
    for s in gt.map_size {
        w_f32(&mut w, s as f32)?;
    }
    w_f32(&mut w, gt.edge as f32)?;
    for d in gt.dims {
        w_u32(&mut w, d as u32)?;
    }
    w_u32(&mut w, gt.stride)?;
    w_u32(&mut w, gt.steps.len() as u32)?;
    for step in &gt.steps {
        w_u64(&mut w, step.frame)?;
        w_f64(&mut w, step.timestamp)?;
        for a in 0..3 {
            w_f32(&mut w, step.center[a] as f32)?;
        }
        w_u32(&mut w, step.occupied.len() as u32)?;
        for &v in &step.occupied {
            w_u32(&mut w, v)?;
        }
        w.write_all(&pack_bits(&step.observed))?;
        w_u32(&mut w, step.agents.len() as u32)?;
        for a in &step.agents {
            w_u32(&mut w, a.id)?;
            for i in 0..3 {
                w_f32(&mut w, a.position[i] as f32)?;
            }
            for i in 0..3 {
                w_f32(&mut w, a.velocity[i] as f32)?;
            }
        }
    }
    Ok(())
}

pub fn read_ground_truth<R: Read>(mut r: R) -> Result<GroundTruthFile, IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRUTH_MAGIC {
        return Err(IoError::BadMagic("DSPT"));
    }
    let version = r_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(IoError::Version(version));
    }
    let map_size = [r_f32(&mut r)? as f64, r_f32(&mut r)? as f64, r_f32(&mut r)? as f64];
    let edge = r_f32(&mut r)? as f64;
    let dims = [r_u32(&mut r)? as usize, r_u32(&mut r)? as usize, r_u32(&mut r)? as usize];
    let stride = r_u32(&mut r)?;
    let n_steps = r_u32(&mut r)?;
    let n_voxels = dims[0] * dims[1] * dims[2];
    let mut steps = Vec::with_capacity(n_steps as usize);
    for _ in 0..n_steps {
        let frame = r_u64(&mut r)?;
        let timestamp = r_f64(&mut r)?;
        let center = Vector3::new(r_f32(&mut r)? as f64, r_f32(&mut r)? as f64, r_f32(&mut r)? as f64);
        let n_occ = r_u32(&mut r)?;
        let mut occupied = Vec::with_capacity(n_occ as usize);
        for _ in 0..n_occ {
            occupied.push(r_u32(&mut r)?);
        }
        let mut mask = vec![0u8; n_voxels.div_ceil(8)];
        r.read_exact(&mut mask)?;
        let observed = unpack_bits(&mask, n_voxels);
        let n_agents = r_u32(&mut r)?;
        let mut agents = Vec::with_capacity(n_agents as usize);
        for _ in 0..n_agents {
            let id = r_u32(&mut r)?;
            let position =
                Vector3::new(r_f32(&mut r)? as f64, r_f32(&mut r)? as f64, r_f32(&mut r)? as f64);
            let velocity =
                Vector3::new(r_f32(&mut r)? as f64, r_f32(&mut r)? as f64, r_f32(&mut r)? as f64);
            agents.push(AgentTruth { id, position, velocity });
        }
        steps.push(GroundTruthStep {
            frame,
            timestamp,
            center,
            dims,
            edge,
            occupied,
            observed,
            agents,
        });
    }
    Ok(GroundTruthFile { map_size, edge, dims, stride, steps })
}

/// Writes one occupancy grid: header, then per-voxel f32 probabilities,
/// then the optional observed-mask bitset.
pub fn write_grid<W: Write>(mut w: W, grid: &OccupancyGrid) -> Result<(), IoError> {
    w.write_all(GRID_MAGIC)?;
    w_u32(&mut w, FORMAT_VERSION)?;
    w_f64(&mut w, grid.timestamp)?;
    for a in 0..3 {
        w_f32(&mut w, grid.center[a] as f32)?;
    }
    w_f32(&mut w, grid.edge as f32)?;
    for d in grid.dims {
        w_u32(&mut w, d as u32)?;
    }
    w.write_all(&[grid.observed.is_some() as u8])?;
    for &p in &grid.probs {
        w_f32(&mut w, p)?;
    }
    if let Some(mask) = &grid.observed {
        w.write_all(&pack_bits(mask))?;
    }
    Ok(())
}

pub fn read_grid<R: Read>(mut r: R) -> Result<OccupancyGrid, IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(IoError::BadMagic("DSPG"));
    }
    let version = r_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(IoError::Version(version));
    }
    let timestamp = r_f64(&mut r)?;
    let center = Vector3::new(r_f32(&mut r)? as f64, r_f32(&mut r)? as f64, r_f32(&mut r)? as f64);
    let edge = r_f32(&mut r)? as f64;
    let dims = [r_u32(&mut r)? as usize, r_u32(&mut r)? as usize, r_u32(&mut r)? as usize];
    let mut has_mask = [0u8; 1];
    r.read_exact(&mut has_mask)?;
    let n = dims[0] * dims[1] * dims[2];
    let mut probs = Vec::with_capacity(n);
    for _ in 0..n {
        probs.push(r_f32(&mut r)?);
    }
    let observed = if has_mask[0] != 0 {
        let mut mask = vec![0u8; n.div_ceil(8)];
        r.read_exact(&mut mask)?;
        Some(unpack_bits(&mask, n))
    } else {
        None
    };
    Ok(OccupancyGrid { center, edge, dims, probs, observed, timestamp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    #[test]
    fn dataset_roundtrip() {
        let frames = vec![
            Frame {
                timestamp: 0.0,
                pose: Pose::new(
                    Vector3::new(1.0, 2.0, 3.0),
                    UnitQuaternion::from_euler_angles(0.0, 0.1, 0.2),
                ),
                points: vec![Vector3::new(1.0f32, 0.5, -0.25)],
            },
            Frame { timestamp: 0.05, pose: Pose::identity(), points: vec![] },
        ];
        let mut buf = Vec::new();
        let mut w = DatasetWriter::new(&mut buf).unwrap();
        for f in &frames {
            w.write_frame(f).unwrap();
        }
        let back: Vec<Frame> = DatasetReader::new(buf.as_slice())
            .unwrap()
            .frames()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].points, frames[0].points);
        assert!((back[0].timestamp - frames[0].timestamp).abs() < 1e-12);
        assert!((back[0].pose.position - frames[0].pose.position).norm() < 1e-6);
        assert!(back[1].points.is_empty());
    }

    #[test]
    fn dataset_rejects_bad_magic_and_truncation() {
        assert!(matches!(
            DatasetReader::new(&b"XXXX\x01\x00\x00\x00"[..]),
            Err(IoError::BadMagic(_))
        ));

        let mut buf = Vec::new();
        let mut w = DatasetWriter::new(&mut buf).unwrap();
        w.write_frame(&Frame {
            timestamp: 0.0,
            pose: Pose::identity(),
            points: vec![Vector3::new(1.0f32, 2.0, 3.0)],
        })
        .unwrap();
        buf.truncate(buf.len() - 2);
        let mut r = DatasetReader::new(buf.as_slice()).unwrap();
        match r.next_frame() {
            Err(IoError::Corrupt { frame: 0, .. }) => {}
            other => panic!("expected corrupt frame 0, got {other:?}"),
        }
    }

    #[test]
    fn grid_roundtrip_is_bit_exact() {
        let grid = OccupancyGrid {
            center: Vector3::new(0.5, -1.0, 2.0),
            edge: 0.25,
            dims: [3, 2, 2],
            probs: (0..12).map(|i| i as f32 / 11.0).collect(),
            observed: Some((0..12).map(|i| i % 3 == 0).collect()),
            timestamp: 1.25,
        };
        let mut buf = Vec::new();
        write_grid(&mut buf, &grid).unwrap();
        let back = read_grid(buf.as_slice()).unwrap();
        assert_eq!(back.probs, grid.probs);
        assert_eq!(back.observed, grid.observed);
        assert_eq!(back.dims, grid.dims);

        let mut buf2 = Vec::new();
        write_grid(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn ground_truth_roundtrip() {
        let step = GroundTruthStep {
            frame: 5,
            timestamp: 0.25,
            center: Vector3::new(0.0, 0.0, 1.5),
            dims: [4, 4, 2],
            edge: 0.3,
            occupied: vec![1, 7, 31],
            observed: (0..32).map(|i| i % 2 == 0).collect(),
            agents: vec![AgentTruth {
                id: 0,
                position: Vector3::new(1.0, 2.0, 0.85),
                velocity: Vector3::new(0.0, 1.0, 0.0),
            }],
        };
        let gt = GroundTruthFile {
            map_size: [1.2, 1.2, 0.6],
            edge: 0.3,
            dims: [4, 4, 2],
            stride: 5,
            steps: vec![step],
        };
        let mut buf = Vec::new();
        write_ground_truth(&mut buf, &gt).unwrap();
        let back = read_ground_truth(buf.as_slice()).unwrap();
        assert_eq!(back.steps.len(), 1);
        assert_eq!(back.steps[0].occupied, vec![1, 7, 31]);
        assert_eq!(back.steps[0].observed, gt.steps[0].observed);
        assert_eq!(back.steps[0].agents.len(), 1);
        assert_eq!(back.stride, 5);
    }
}
