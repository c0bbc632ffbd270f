//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"BBKT"
//! version u32
//! config  u32 length + UTF-8 canonical text block (network config + seed)
//! count   u32 tensor records
//! record  name (u16 length + bytes), dtype u8 (0 = f32), ndim u8,
//!         dims u32 each, payload f32 LE
//! crc32   u32 over every preceding byte
//! ```
//!
//! A save -> load round trip restores every tensor bit-exactly, so
//! mean-only forward passes reproduce bit-identically.

use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::network::{Network, NetworkConfig, NetworkError};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BBKT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    Format(String),
    Crc { expected: u32, actual: u32 },
    Network(NetworkError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {}", e),
            CheckpointError::Format(msg) => write!(f, "malformed checkpoint: {}", msg),
            CheckpointError::Crc { expected, actual } => {
                write!(f, "checkpoint crc mismatch: expected {:08x}, got {:08x}", expected, actual)
            }
            CheckpointError::Network(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<NetworkError> for CheckpointError {
    fn from(e: NetworkError) -> Self {
        CheckpointError::Network(e)
    }
}

/// All tensors a network persists, by name.
fn named_tensors(net: &Network) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, conv) in net.conv.iter().enumerate() {
        out.push((format!("conv{}.kernel.mu", i), conv.kernel.mu.clone()));
        out.push((format!("conv{}.kernel.rho", i), conv.kernel.rho.clone()));
        out.push((format!("conv{}.bias.mu", i), conv.bias.mu.clone()));
        out.push((format!("conv{}.bias.rho", i), conv.bias.rho.clone()));
        if let Some(bn) = &net.bn[i] {
            out.push((format!("bn{}.gamma", i), bn.gamma.clone()));
            out.push((format!("bn{}.beta", i), bn.beta.clone()));
            out.push((format!("bn{}.running_mean", i), Tensor::from_slice(&bn.running_mean)));
            out.push((format!("bn{}.running_var", i), Tensor::from_slice(&bn.running_var)));
        }
    }
    for (name, fc) in [("fc1", &net.fc1), ("fc2", &net.fc2)] {
        out.push((format!("{}.weight.mu", name), fc.weight.mu.clone()));
        out.push((format!("{}.weight.rho", name), fc.weight.rho.clone()));
        out.push((format!("{}.bias.mu", name), fc.bias.mu.clone()));
        out.push((format!("{}.bias.rho", name), fc.bias.rho.clone()));
    }
    out
}

/// Serialize a network to the checkpoint byte format.
pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let mut config_text = net.config().to_text();
    config_text.push_str(&format!("seed = {}\n", net.seed()));
    buf.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(config_text.as_bytes());

    let tensors = named_tensors(net);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save(net: &Network, path: &Path) -> Result<(), CheckpointError> {
    let bytes = to_bytes(net);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format(format!(
                "truncated at offset {} (need {} bytes)",
                self.pos, n
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes into a network.
pub fn from_bytes(bytes: &[u8]) -> Result<Network, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Format("file shorter than header".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let expected = u32::from_le_bytes(trailer.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if expected != actual {
        return Err(CheckpointError::Crc { expected, actual });
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {}", version)));
    }

    let config_len = r.u32()? as usize;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| CheckpointError::Format("config block is not UTF-8".into()))?;
    let mut seed = 0u64;
    let mut net_lines = String::new();
    for line in config_text.lines() {
        if let Some(rest) = line.trim().strip_prefix("seed") {
            if let Some(value) = rest.trim().strip_prefix('=') {
                seed = value
                    .trim()
                    .parse()
                    .map_err(|_| CheckpointError::Format("bad seed record".into()))?;
                continue;
            }
        }
        net_lines.push_str(line);
        net_lines.push('\n');
    }
    let config = NetworkConfig::from_text(&net_lines)?;

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(CheckpointError::Format(format!("unknown dtype {} in {}", dtype, name)));
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(shape, data)
            .map_err(|e| CheckpointError::Format(format!("tensor {}: {}", name, e)))?;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }

    let mut net = Network::build(config, seed)?;
    restore(&mut net, &tensors)?;
    Ok(net)
}

pub fn load(path: &Path) -> Result<Network, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

fn restore(net: &mut Network, tensors: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let find = |name: &str| -> Result<&Tensor, CheckpointError> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Format(format!("missing tensor {}", name)))
    };
    let assign = |dst: &mut Tensor, name: &str| -> Result<(), CheckpointError> {
        let src = find(name)?;
        if src.shape() != dst.shape() {
            return Err(CheckpointError::Format(format!(
                "tensor {} shape {:?} does not match config shape {:?}",
                name,
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
        Ok(())
    };

    for i in 0..net.conv.len() {
        assign(&mut net.conv[i].kernel.mu, &format!("conv{}.kernel.mu", i))?;
        assign(&mut net.conv[i].kernel.rho, &format!("conv{}.kernel.rho", i))?;
        assign(&mut net.conv[i].bias.mu, &format!("conv{}.bias.mu", i))?;
        assign(&mut net.conv[i].bias.rho, &format!("conv{}.bias.rho", i))?;
        if net.bn[i].is_some() {
            let gamma = find(&format!("bn{}.gamma", i))?.clone();
            let beta = find(&format!("bn{}.beta", i))?.clone();
            let mean = find(&format!("bn{}.running_mean", i))?.data().to_vec();
            let var = find(&format!("bn{}.running_var", i))?.data().to_vec();
            let bn = net.bn[i].as_mut().unwrap();
            bn.gamma = gamma;
            bn.beta = beta;
            bn.running_mean = mean;
            bn.running_var = var;
        }
    }
    for (name, fc) in [("fc1", &mut net.fc1), ("fc2", &mut net.fc2)] {
        assign(&mut fc.weight.mu, &format!("{}.weight.mu", name))?;
        assign(&mut fc.weight.rho, &format!("{}.weight.rho", name))?;
        assign(&mut fc.bias.mu, &format!("{}.bias.mu", name))?;
        assign(&mut fc.bias.rho, &format!("{}.bias.rho", name))?;
    }
    Ok(())
}
