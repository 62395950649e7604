//! Binary organism checkpoints.
//!
//! Layout: 8-byte magic, one endianness byte (`b'L'` or `b'B'`), then in that
//! byte order a `u16` format version and the payload:
//!
//! ```text
//! u8  organism activation (0 linear, 1 gelu)
//! u32 n, u32 x n organism layer sizes
//! u32 m, u32 x m particle layer sizes
//! f64 task learning rate, f64 task momentum, f64 x P*W task velocity
//! per particle: f64 x W weights, f64 lr, f64 momentum, f64 x W velocity
//! ```
//!
//! Writers always emit little-endian; readers accept both. Trailing bytes are
//! an error.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Activation, Network, NetworkArchitecture, OptimizerState};
use crate::organism::{OrganismArchitecture, OrganismNetwork};
use crate::particle::ParticleNetwork;

pub const MAGIC: [u8; 8] = *b"ORGNCKPT";
pub const FORMAT_VERSION: u16 = 1;

/// Companion metadata written next to a checkpoint as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u16,
    pub experiment: String,
    pub seed: u64,
    pub epoch: usize,
    pub particle_count: usize,
    /// Resolved run configuration, as TOML text.
    pub config: String,
}

pub fn encode(on: &OrganismNetwork) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(b'L');
    write_payload::<LittleEndian>(&mut out, on).expect("writing to a Vec cannot fail");
    out
}

fn write_payload<B: ByteOrder>(out: &mut Vec<u8>, on: &OrganismNetwork) -> std::io::Result<()> {
    out.write_u16::<B>(FORMAT_VERSION)?;
    let arch = on.arch();
    out.write_u8(match arch.shape.activation() {
        Activation::Linear => 0,
        Activation::Gelu => 1,
    })?;
    for sizes in [arch.shape.layer_sizes(), arch.particle.layer_sizes()] {
        out.write_u32::<B>(sizes.len() as u32)?;
        for &s in sizes {
            out.write_u32::<B>(s as u32)?;
        }
    }
    let task = on.task_optimizer();
    out.write_f64::<B>(task.learning_rate)?;
    out.write_f64::<B>(task.momentum)?;
    for &v in &task.velocity {
        out.write_f64::<B>(v)?;
    }
    for (p, opt) in on.particles().iter().zip(on.self_optimizers()) {
        for &w in p.weights() {
            out.write_f64::<B>(w)?;
        }
        out.write_f64::<B>(opt.learning_rate)?;
        out.write_f64::<B>(opt.momentum)?;
        for &v in &opt.velocity {
            out.write_f64::<B>(v)?;
        }
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<OrganismNetwork> {
    if bytes.len() < MAGIC.len() + 1 || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut rd = &bytes[MAGIC.len() + 1..];
    let on = match bytes[MAGIC.len()] {
        b'L' => read_payload::<LittleEndian>(&mut rd)?,
        b'B' => read_payload::<BigEndian>(&mut rd)?,
        t => return Err(Error::Checkpoint(format!("unknown endianness tag {t:#04x}"))),
    };
    if !rd.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rd.len())));
    }
    Ok(on)
}

fn truncated(_: std::io::Error) -> Error {
    Error::Checkpoint("truncated payload".into())
}

fn read_f64s<B: ByteOrder>(rd: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    if rd.len() < n * 8 {
        return Err(Error::Checkpoint("truncated payload".into()));
    }
    let mut v = vec![0.0; n];
    rd.read_f64_into::<B>(&mut v).map_err(truncated)?;
    Ok(v)
}

fn read_sizes<B: ByteOrder>(rd: &mut &[u8]) -> Result<Vec<usize>> {
    let n = rd.read_u32::<B>().map_err(truncated)? as usize;
    if n > 64 {
        return Err(Error::Checkpoint(format!("implausible depth {n}")));
    }
    (0..n)
        .map(|_| match rd.read_u32::<B>().map_err(truncated)? {
            s if s > 1 << 20 => Err(Error::Checkpoint(format!("implausible layer size {s}"))),
            s => Ok(s as usize),
        })
        .collect()
}

fn read_payload<B: ByteOrder>(rd: &mut &[u8]) -> Result<OrganismNetwork> {
    let version = rd.read_u16::<B>().map_err(truncated)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let activation = match rd.read_u8().map_err(truncated)? {
        0 => Activation::Linear,
        1 => Activation::Gelu,
        a => return Err(Error::Checkpoint(format!("unknown activation code {a}"))),
    };
    let shape = read_sizes::<B>(rd)?;
    let particle = read_sizes::<B>(rd)?;
    let particle = NetworkArchitecture::new(particle, Activation::Linear).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let arch = OrganismArchitecture::new(shape, activation, particle).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = arch.particle_count();
    let per = arch.particle.weight_count();
    let remaining = count
        .checked_mul(per)
        .and_then(|cp| cp.checked_mul(24))
        .and_then(|b| b.checked_add(16 * count + 16));
    if remaining.is_none_or(|r| rd.len() < r) {
        return Err(Error::Checkpoint("truncated payload".into()));
    }
    let lr = rd.read_f64::<B>().map_err(truncated)?;
    let momentum = rd.read_f64::<B>().map_err(truncated)?;
    let mut task_opt = OptimizerState::new(lr, momentum, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    task_opt.velocity = read_f64s::<B>(rd, count * per)?;
    let mut particles = Vec::with_capacity(count);
    let mut self_opts = Vec::with_capacity(count);
    for _ in 0..count {
        let w = read_f64s::<B>(rd, per)?;
        particles.push(ParticleNetwork::new(Network::new(arch.particle.clone(), w)?)?);
        let lr = rd.read_f64::<B>().map_err(truncated)?;
        let momentum = rd.read_f64::<B>().map_err(truncated)?;
        let mut opt = OptimizerState::new(lr, momentum, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        opt.velocity = read_f64s::<B>(rd, per)?;
        self_opts.push(opt);
    }
    OrganismNetwork::from_parts(arch, particles, self_opts, task_opt)
}

/// Writes `path` and `path.json` (the metadata).
pub fn save(path: &Path, on: &OrganismNetwork, meta: &CheckpointMeta) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode(on))?;
    f.flush()?;
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(meta_path(path), json + "\n")?;
    Ok(())
}

pub fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

pub fn load(path: &Path) -> Result<OrganismNetwork> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?
        .read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let text = std::fs::read_to_string(meta_path(path))?;
    Ok(serde_json::from_str(&text)?)
}
