//! Self-describing model checkpoints: a fixed-order architecture record
//! followed by the named parameter arrays, all little-endian with f32
//! values. Identical models serialize to identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::proposal::{ProposalConfig, ProposalMode};
use super::{CascadedModel, ModelConfig, UNetConfig};
use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::signal::Area;

const MAGIC: &[u8; 4] = b"BTCK";
const VERSION: u32 = 1;

pub fn save(model: &CascadedModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = &model.config;
    w.write_all(&[match cfg.area {
        Area::Femur => 0u8,
        Area::Tibia => 1u8,
    }])?;
    w.write_all(&(cfg.signal_len as u32).to_le_bytes())?;
    w.write_all(&(cfg.unet.channels.len() as u32).to_le_bytes())?;
    for &c in &cfg.unet.channels {
        w.write_all(&(c as u32).to_le_bytes())?;
    }
    w.write_all(&(cfg.unet.kernel_size as u32).to_le_bytes())?;
    w.write_all(&(cfg.unet.input_len as u32).to_le_bytes())?;
    w.write_all(&(cfg.proposal.window_len as u32).to_le_bytes())?;
    w.write_all(&(cfg.proposal.candidate_factor as u32).to_le_bytes())?;
    w.write_all(&cfg.proposal.sampling_std.to_le_bytes())?;
    w.write_all(&[match cfg.proposal.mode {
        ProposalMode::Stochastic => 0u8,
        ProposalMode::Deterministic => 1u8,
    }])?;
    w.write_all(&(cfg.classifier_hidden.0 as u32).to_le_bytes())?;
    w.write_all(&(cfg.classifier_hidden.1 as u32).to_le_bytes())?;
    w.write_all(&(cfg.classes() as u32).to_le_bytes())?;
    model.params.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CascadedModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let area = match read_u8(&mut r)? {
        0 => Area::Femur,
        1 => Area::Tibia,
        other => return Err(Error::Format(format!("unknown area code {other}"))),
    };
    let signal_len = read_u32(&mut r)? as usize;
    let n_channels = read_u32(&mut r)? as usize;
    let mut channels = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        channels.push(read_u32(&mut r)? as usize);
    }
    let kernel_size = read_u32(&mut r)? as usize;
    let input_len = read_u32(&mut r)? as usize;
    let window_len = read_u32(&mut r)? as usize;
    let candidate_factor = read_u32(&mut r)? as usize;
    let sampling_std = read_f64(&mut r)?;
    let mode = match read_u8(&mut r)? {
        0 => ProposalMode::Stochastic,
        1 => ProposalMode::Deterministic,
        other => return Err(Error::Format(format!("unknown proposal mode {other}"))),
    };
    let h0 = read_u32(&mut r)? as usize;
    let h1 = read_u32(&mut r)? as usize;
    let classes = read_u32(&mut r)? as usize;

    let config = ModelConfig {
        area,
        signal_len,
        unet: UNetConfig::new(channels, kernel_size, input_len)?,
        proposal: ProposalConfig {
            window_len,
            candidate_factor,
            sampling_std,
            mode,
        },
        classifier_hidden: (h0, h1),
    };
    config.validate()?;
    if classes != config.classes() {
        return Err(Error::Format(format!(
            "checkpoint declares {classes} classes, area {} has {}",
            area.name(),
            config.classes()
        )));
    }
    let params = ParamStore::read_from(&mut r)?;
    let model = CascadedModel { config, params };
    model.validate_params()?;
    Ok(model)
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
