//! Plain-text profile configuration: `key = value` pairs grouped in one
//! `[chNN]` section per region, with a top-level `area = ...` line.
//!
//! ```text
//! area = femur
//!
//! [ch11]
//! n_soft_min = 1
//! n_soft_max = 2
//! ...
//! ```

use std::path::Path;

use super::TissueProfile;
use crate::error::{Error, Result};
use crate::signal::{AcousticModel, Area, RegionLabel};

/// Parse a profile file. Sections start from the area defaults for their
/// region (scaled to `ac`), then apply each `key = value` override.
pub fn parse(text: &str, ac: &AcousticModel) -> Result<Vec<TissueProfile>> {
    let mut area: Option<Area> = None;
    let mut profiles: Vec<TissueProfile> = Vec::new();
    let mut current: Option<usize> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| Error::Config(format!("profiles line {}: {msg}", lineno + 1));

        if let Some(section) = line.strip_prefix('[') {
            let section = section
                .strip_suffix(']')
                .ok_or_else(|| at("unterminated section header".into()))?
                .trim();
            let channel: u16 = section
                .strip_prefix("ch")
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| at(format!("expected [chNN], got [{section}]")))?;
            let area = area.ok_or_else(|| at("'area = ...' must precede sections".into()))?;
            let region = RegionLabel::new(area, channel).map_err(|e| at(e.to_string()))?;
            if profiles.iter().any(|p| p.region == region) {
                return Err(at(format!("duplicate section for channel {channel}")));
            }
            let mut base = TissueProfile::defaults(area, ac)?
                .into_iter()
                .find(|p| p.region == region)
                .expect("defaults cover every region");
            base.region = region;
            profiles.push(base);
            current = Some(profiles.len() - 1);
            continue;
        }

        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at(format!("expected 'key = value', got '{line}'")))?;
        let (key, value) = (key.trim(), value.trim());
        match current {
            None => {
                if key == "area" {
                    if area.is_some() {
                        return Err(at("duplicate 'area'".into()));
                    }
                    area = Some(Area::from_name(value)?);
                } else {
                    return Err(at(format!("unknown top-level key '{key}'")));
                }
            }
            Some(idx) => profiles[idx]
                .set_field(key, value)
                .map_err(|e| at(e.to_string()))?,
        }
    }

    if profiles.is_empty() {
        return Err(Error::Config("profile file defines no regions".into()));
    }
    for p in &profiles {
        p.validate()?;
    }
    Ok(profiles)
}

pub fn load(path: &Path, ac: &AcousticModel) -> Result<Vec<TissueProfile>> {
    let text = std::fs::read_to_string(path)?;
    parse(&text, ac)
}

/// Render profiles in the file format (usable as a starting template).
pub fn render(area: Area, profiles: &[TissueProfile]) -> String {
    let mut out = format!("area = {}\n", area.name());
    for p in profiles {
        out.push_str(&format!("\n[ch{}]\n", p.region.channel()));
        out.push_str(&format!("n_soft_min = {}\n", p.n_soft_min));
        out.push_str(&format!("n_soft_max = {}\n", p.n_soft_max));
        out.push_str(&format!("soft_amp_min = {}\n", p.soft_amp_min));
        out.push_str(&format!("soft_amp_max = {}\n", p.soft_amp_max));
        out.push_str(&format!("soft_spacing_mm = {}\n", p.soft_spacing_mm));
        out.push_str(&format!("soft_width_min = {}\n", p.soft_width_min));
        out.push_str(&format!("soft_width_max = {}\n", p.soft_width_max));
        out.push_str(&format!("bone_amp_min = {}\n", p.bone_amp_min));
        out.push_str(&format!("bone_amp_max = {}\n", p.bone_amp_max));
        out.push_str(&format!("bone_depth_min_mm = {}\n", p.bone_depth_min_mm));
        out.push_str(&format!("bone_depth_max_mm = {}\n", p.bone_depth_max_mm));
        out.push_str(&format!("attenuation_mu = {}\n", p.attenuation_mu));
        out.push_str(&format!("noise_sigma = {}\n", p.noise_sigma));
        out.push_str(&format!("peak_shape_width = {}\n", p.peak_shape_width));
        out.push_str(&format!("dropout_prob = {}\n", p.dropout_prob));
    }
    out
}
