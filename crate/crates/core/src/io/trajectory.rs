use std::path::Path;

use super::{write_atomic, ByteReader};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MLTR";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

/// A `[B, T, C, H, W]` block of fields stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    shape: [usize; 5],
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Data(format!("trajectory shape {:?} needs {} values, got {}", shape, n, data.len())));
        }
        Ok(Self { shape, data })
    }

    /// A single `[T, H, W]` scalar trajectory.
    pub fn single(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new([1, frames, 1, height, width], data)
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn frames(&self) -> usize {
        self.shape[1]
    }

    pub fn channels(&self) -> usize {
        self.shape[2]
    }

    pub fn height(&self) -> usize {
        self.shape[3]
    }

    pub fn width(&self) -> usize {
        self.shape[4]
    }

    pub fn frame_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Frames `[start, start + count)` of batch member `b`, flattened.
    pub fn frames_slice(&self, b: usize, start: usize, count: usize) -> &[f64] {
        let f = self.frame_len();
        let base = b * self.shape[1] * f;
        &self.data[base + start * f..base + (start + count) * f]
    }

    pub fn frame(&self, b: usize, t: usize) -> &[f64] {
        self.frames_slice(b, t, 1)
    }

    /// The first `count` frames of every batch member.
    pub fn truncate_frames(&self, count: usize) -> Trajectory {
        let count = count.min(self.frames());
        let mut data = Vec::with_capacity(self.batch() * count * self.frame_len());
        for b in 0..self.batch() {
            data.extend_from_slice(self.frames_slice(b, 0, count));
        }
        Trajectory { shape: [self.shape[0], count, self.shape[2], self.shape[3], self.shape[4]], data }
    }

    /// Single-member trajectory from `[C, H, W]` frames.
    pub fn from_frames(frames: &[Tensor]) -> Result<Trajectory> {
        let first = frames.first().ok_or_else(|| Error::Data("no frames".into()))?;
        let fs = first.shape();
        if fs.len() != 3 || frames.iter().any(|f| f.shape() != fs) {
            return Err(Error::Data("frames must share one [C, H, W] shape".into()));
        }
        let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
        Trajectory::new([1, frames.len(), fs[0], fs[1], fs[2]], data)
    }

    /// Frames `start..start + count` of member `b` as `[C, H, W]` tensors.
    pub fn to_frames(&self, b: usize, start: usize, count: usize) -> Result<Vec<Tensor>> {
        if b >= self.batch() || start + count > self.frames() {
            return Err(Error::Data(format!(
                "frames {}..{} of member {} outside {:?}",
                start,
                start + count,
                b,
                self.shape
            )));
        }
        (start..start + count)
            .map(|t| Ok(Tensor::new(self.shape[2..].to_vec(), self.frame(b, t).to_vec())?))
            .collect()
    }

    /// Stack single-member trajectories of equal shape along the batch axis.
    pub fn stack(parts: &[Trajectory]) -> Result<Trajectory> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to stack".into()))?;
        let mut shape = first.shape;
        let mut data = Vec::with_capacity(parts.len() * first.data.len());
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::Data(format!("cannot stack {:?} with {:?}", p.shape, first.shape)));
            }
            data.extend_from_slice(&p.data);
        }
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        Ok(Trajectory { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(31 + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F64);
        let start = out.len();
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        if r.take(4)? != MAGIC {
            return Err(Error::Data(format!("{} is not a trajectory file (bad magic)", origin.display())));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Data(format!("{}: unsupported trajectory version {}", origin.display(), version)));
        }
        let mut shape = [0usize; 5];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Data(format!("{}: unsupported dtype tag {}", origin.display(), dtype)));
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Data(format!("{}: dims overflow", origin.display())))?;
        let start = r.position();
        let data = r.f64s(n)?;
        let payload = &bytes[start..r.position()];
        let offset = r.position() as u64;
        let stored = r.u32()?;
        r.finish()?;
        if crc32fast::hash(payload) != stored {
            return Err(Error::Checksum { path: origin.to_path_buf(), offset });
        }
        Ok(Self { shape, data })
    }
}

pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    write_atomic(path, &traj.to_bytes())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Trajectory::from_bytes(&bytes, path)
}
