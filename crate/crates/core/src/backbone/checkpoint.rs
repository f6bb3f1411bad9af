use std::path::Path;

use super::{DenoiserNet, NetConfig};
use crate::io::{write_atomic, ByteReader};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MLSA";
const VERSION: u16 = 1;

/// A trained network plus any extra named vectors (e.g. data normalization
/// statistics) stored after the parameter blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: DenoiserNet,
    pub extras: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(net: DenoiserNet) -> Self {
        Self { net, extras: Vec::new() }
    }

    pub fn extra(&self, name: &str) -> Option<&[f64]> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.net.config();
        let mut out = Vec::with_capacity(16 + 8 * self.net.num_parameters());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [cfg.depth, cfg.width, cfg.window, cfg.channels, cfg.height, cfg.width_s, cfg.embed_dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let count = self.net.names().len() + self.extras.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let blobs = self
            .net
            .names()
            .iter()
            .zip(super::Denoiser::params(&self.net))
            .map(|(n, t)| (n.as_str(), t.data()))
            .chain(self.extras.iter().map(|(n, v)| (n.as_str(), v.as_slice())));
        for (name, data) in blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        if r.take(4)? != MAGIC {
            return Err(Error::Data(format!("{} is not a checkpoint (bad magic)", origin.display())));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Data(format!("{}: unsupported checkpoint version {}", origin.display(), version)));
        }
        let mut f = [0usize; 7];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let config = NetConfig {
            depth: f[0],
            width: f[1],
            window: f[2],
            channels: f[3],
            height: f[4],
            width_s: f[5],
            embed_dim: f[6],
        };
        let template = DenoiserNet::new(config, 0)?;
        let shapes: Vec<Vec<usize>> = super::Denoiser::params(&template).iter().map(|t| t.shape().to_vec()).collect();
        let count = r.u32()? as usize;
        if count < shapes.len() {
            return Err(Error::Data(format!(
                "{}: {} blobs, network needs {}",
                origin.display(),
                count,
                shapes.len()
            )));
        }
        let mut named = Vec::with_capacity(shapes.len());
        let mut extras = Vec::new();
        for i in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Data(format!("{}: blob name is not UTF-8", origin.display())))?;
            let n = r.u64()? as usize;
            let data = r.f64s(n)?;
            if i < shapes.len() {
                named.push((name, Tensor::new(shapes[i].clone(), data)?));
            } else {
                extras.push((name, data));
            }
        }
        r.finish()?;
        Ok(Self { net: DenoiserNet::from_parts(config, named)?, extras })
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

/// Shorthand for a network without extras.
pub fn save_checkpoint(net: &DenoiserNet, path: &Path) -> Result<()> {
    write_checkpoint(&Checkpoint::new(net.clone()), path)
}

pub fn load_checkpoint(path: &Path) -> Result<DenoiserNet> {
    Ok(read_checkpoint(path)?.net)
}
