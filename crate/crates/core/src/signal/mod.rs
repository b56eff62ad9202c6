//! Domain types for A-mode ultrasound signals: frames, annotations,
//! anatomical regions, and the acoustic depth/index conversion.

pub mod store;

use crate::error::{Error, Result};

/// Echo amplitudes above this are clamped during preprocessing.
pub const AMP_CEILING: f64 = 5000.0;
/// Width of a ground-truth peak segment, in samples.
pub const ANNOTATION_WIDTH: usize = 10;

/// Acoustic constants tying sample indices to tissue depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcousticModel {
    /// Ultrasound speed in soft tissue, m/s.
    pub speed_mps: f64,
    /// Sampling rate, Hz.
    pub sample_rate_hz: f64,
    /// Samples per frame.
    pub signal_len: usize,
}

impl AcousticModel {
    /// Soft tissue at 1540 m/s sampled at 40 MHz, 6760 samples (~130 mm).
    pub const fn full_length() -> Self {
        AcousticModel {
            speed_mps: 1540.0,
            sample_rate_hz: 40e6,
            signal_len: 6760,
        }
    }

    /// Same acoustics with a different frame length.
    pub const fn with_signal_len(signal_len: usize) -> Self {
        AcousticModel {
            speed_mps: 1540.0,
            sample_rate_hz: 40e6,
            signal_len,
        }
    }

    pub fn new(speed_mps: f64, sample_rate_hz: f64, signal_len: usize) -> Result<Self> {
        if !(speed_mps > 0.0) || !(sample_rate_hz > 0.0) || signal_len == 0 {
            return Err(Error::Config(format!(
                "acoustic model requires positive v, fs, signal_len (got {speed_mps}, {sample_rate_hz}, {signal_len})"
            )));
        }
        Ok(AcousticModel {
            speed_mps,
            sample_rate_hz,
            signal_len,
        })
    }

    /// Depth per sample index in millimetres.
    ///
    /// One index step covers the round-trip time of one sample period, so
    /// the one-way depth step is v / (2 fs), converted to mm.
    pub fn depth_unit_mm(&self) -> f64 {
        self.speed_mps / (2.0 * self.sample_rate_hz) * 1000.0
    }

    /// Total depth span of a frame in millimetres.
    pub fn span_mm(&self) -> f64 {
        self.signal_len as f64 * self.depth_unit_mm()
    }
}

impl Default for AcousticModel {
    fn default() -> Self {
        Self::full_length()
    }
}

/// Convert a depth in mm to the nearest sample index (round half to even),
/// clamped to `[0, signal_len - 1]`.
pub fn depth_to_index(depth_mm: f64, ac: &AcousticModel) -> Result<usize> {
    if !depth_mm.is_finite() || depth_mm < 0.0 || depth_mm > ac.span_mm() {
        return Err(Error::Range(format!(
            "depth {depth_mm} mm outside [0, {:.3}] mm",
            ac.span_mm()
        )));
    }
    let raw = depth_mm / ac.depth_unit_mm();
    let idx = round_half_even(raw) as usize;
    Ok(idx.min(ac.signal_len - 1))
}

/// Convert a sample index to depth in mm.
pub fn index_to_depth(idx: usize, ac: &AcousticModel) -> Result<f64> {
    if idx >= ac.signal_len {
        return Err(Error::Range(format!(
            "index {idx} outside [0, {})",
            ac.signal_len
        )));
    }
    Ok(idx as f64 * ac.depth_unit_mm())
}

fn round_half_even(x: f64) -> f64 {
    let floor = x.floor();
    let frac = x - floor;
    if frac > 0.5 {
        floor + 1.0
    } else if frac < 0.5 {
        floor
    } else if (floor as i64) % 2 == 0 {
        floor
    } else {
        floor + 1.0
    }
}

/// Anatomical area; each area has its own transducer channels and model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Area {
    Femur,
    Tibia,
}

impl Area {
    /// Transducer channels with discernible bone peaks in this area.
    pub fn channels(&self) -> &'static [u16] {
        match self {
            Area::Femur => &[11, 12, 15],
            Area::Tibia => &[16, 17, 18, 19, 20],
        }
    }

    /// Number of anatomical regions (= classifier classes).
    pub fn region_count(&self) -> usize {
        self.channels().len()
    }

    pub fn name(&self) -> &'static str {
        match self {
            Area::Femur => "femur",
            Area::Tibia => "tibia",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "femur" => Ok(Area::Femur),
            "tibia" => Ok(Area::Tibia),
            other => Err(Error::Config(format!("unknown area '{other}'"))),
        }
    }

    fn region_names(&self) -> &'static [&'static str] {
        match self {
            Area::Femur => &["R_alpha", "R_beta", "R_gamma"],
            Area::Tibia => &["R_delta", "R_epsilon", "R_zeta", "R_eta", "R_theta"],
        }
    }
}

/// One anatomical region: an area plus the transducer channel attached there.
/// Channel and region are a bijection within each area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegionLabel {
    area: Area,
    channel: u16,
}

impl RegionLabel {
    pub fn new(area: Area, channel: u16) -> Result<Self> {
        if !area.channels().contains(&channel) {
            return Err(Error::Config(format!(
                "channel {channel} is not a {} channel (expected one of {:?})",
                area.name(),
                area.channels()
            )));
        }
        Ok(RegionLabel { area, channel })
    }

    /// Region by class index within the area (0-based).
    pub fn from_index(area: Area, index: usize) -> Result<Self> {
        let channels = area.channels();
        let &channel = channels.get(index).ok_or_else(|| {
            Error::Config(format!(
                "region index {index} outside 0..{} for {}",
                channels.len(),
                area.name()
            ))
        })?;
        Ok(RegionLabel { area, channel })
    }

    pub fn area(&self) -> Area {
        self.area
    }

    pub fn channel(&self) -> u16 {
        self.channel
    }

    /// Class index of this region within its area (0-based).
    pub fn index(&self) -> usize {
        self.area
            .channels()
            .iter()
            .position(|&c| c == self.channel)
            .expect("channel validated at construction")
    }

    pub fn name(&self) -> &'static str {
        self.area.region_names()[self.index()]
    }
}

impl std::fmt::Display for RegionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}(ch{})", self.name(), self.channel)
    }
}

/// One 1D ultrasound echo trace with its metadata.
///
/// `samples` are raw amplitudes clamped to `[0, AMP_CEILING]`; `normalized`
/// is the same trace scaled into `[0, 1]` for network input.
#[derive(Debug, Clone, PartialEq)]
pub struct AModeFrame {
    pub frame_id: u32,
    pub region: RegionLabel,
    pub samples: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Clamp raw amplitudes into `[0, AMP_CEILING]` and attach the normalized
/// copy. Rejects traces of the wrong length.
pub fn preprocess_frame(
    raw: &[f64],
    region: RegionLabel,
    frame_id: u32,
    signal_len: usize,
) -> Result<AModeFrame> {
    if raw.len() != signal_len {
        return Err(Error::Shape(format!(
            "frame {frame_id}: expected {signal_len} samples, got {}",
            raw.len()
        )));
    }
    let samples: Vec<f64> = raw.iter().map(|&x| x.clamp(0.0, AMP_CEILING)).collect();
    let normalized = samples.iter().map(|&x| x / AMP_CEILING).collect();
    Ok(AModeFrame {
        frame_id,
        region,
        samples,
        normalized,
    })
}

/// Ground-truth bone-peak segment and depth for a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakAnnotation {
    pub seg_start: usize,
    /// Inclusive end index.
    pub seg_end: usize,
    pub depth_mm: f64,
    pub present: bool,
}

impl PeakAnnotation {
    /// Annotation for a peak at `peak_idx`: a segment of `ANNOTATION_WIDTH`
    /// samples whose floor midpoint is the peak index.
    pub fn at_index(peak_idx: usize, depth_mm: f64, ac: &AcousticModel) -> Result<Self> {
        let half = ANNOTATION_WIDTH / 2;
        if peak_idx < half - 1 || peak_idx + half >= ac.signal_len {
            return Err(Error::Range(format!(
                "peak index {peak_idx} too close to the frame edge for a {ANNOTATION_WIDTH}-wide segment"
            )));
        }
        let ann = PeakAnnotation {
            seg_start: peak_idx - (half - 1),
            seg_end: peak_idx + half,
            depth_mm,
            present: true,
        };
        ann.validate(ac)?;
        Ok(ann)
    }

    /// Annotation for a frame with no visible bone peak.
    pub fn absent() -> Self {
        PeakAnnotation {
            seg_start: 0,
            seg_end: 0,
            depth_mm: 0.0,
            present: false,
        }
    }

    /// Floor midpoint of the segment; the nominal peak index.
    pub fn midpoint(&self) -> usize {
        (self.seg_start + self.seg_end) / 2
    }

    pub fn validate(&self, ac: &AcousticModel) -> Result<()> {
        if !self.present {
            return Ok(());
        }
        if self.seg_start > self.seg_end || self.seg_end >= ac.signal_len {
            return Err(Error::Range(format!(
                "segment [{}, {}] outside frame of {} samples",
                self.seg_start, self.seg_end, ac.signal_len
            )));
        }
        if self.seg_end - self.seg_start + 1 != ANNOTATION_WIDTH {
            return Err(Error::Range(format!(
                "segment [{}, {}] is not {ANNOTATION_WIDTH} samples wide",
                self.seg_start, self.seg_end
            )));
        }
        let mid_depth = index_to_depth(self.midpoint(), ac)?;
        if (mid_depth - self.depth_mm).abs() > ac.depth_unit_mm() {
            return Err(Error::Range(format!(
                "depth {} mm inconsistent with segment midpoint depth {:.4} mm",
                self.depth_mm, mid_depth
            )));
        }
        Ok(())
    }
}

/// Shift a frame and its annotation along the sample axis, zero-filling the
/// vacated end. The annotation depth is recomputed from the shifted midpoint.
pub fn shift_augment(
    frame: &AModeFrame,
    annotation: &PeakAnnotation,
    shift: i64,
    ac: &AcousticModel,
) -> Result<(AModeFrame, PeakAnnotation)> {
    let len = ac.signal_len as i64;
    if shift.abs() >= len / 10 {
        return Err(Error::Augmentation(format!(
            "|shift| = {} exceeds signal_len/10 = {}",
            shift.abs(),
            len / 10
        )));
    }
    let annotation = if annotation.present {
        let new_start = annotation.seg_start as i64 + shift;
        let new_end = annotation.seg_end as i64 + shift;
        if new_start < 0 || new_end >= len {
            return Err(Error::Augmentation(format!(
                "shift {shift} pushes segment [{}, {}] outside [0, {len})",
                annotation.seg_start, annotation.seg_end
            )));
        }
        let mut ann = PeakAnnotation {
            seg_start: new_start as usize,
            seg_end: new_end as usize,
            depth_mm: 0.0,
            present: true,
        };
        ann.depth_mm = index_to_depth(ann.midpoint(), ac)?;
        ann
    } else {
        *annotation
    };

    let n = frame.samples.len();
    let mut samples = vec![0.0; n];
    if shift >= 0 {
        let s = shift as usize;
        samples[s..].copy_from_slice(&frame.samples[..n - s]);
    } else {
        let s = (-shift) as usize;
        samples[..n - s].copy_from_slice(&frame.samples[s..]);
    }
    let frame = preprocess_frame(&samples, frame.region, frame.frame_id, n)?;
    Ok((frame, annotation))
}

/// A raw labeled corpus from one area, before augmentation and splitting.
#[derive(Debug, Clone)]
pub struct FrameSet {
    pub acoustic: AcousticModel,
    pub area: Area,
    pub frames: Vec<(AModeFrame, PeakAnnotation)>,
}

/// Train/test tag for one dataset entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Augmented, shuffled, split-tagged dataset ready for training.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub acoustic: AcousticModel,
    pub area: Area,
    pub frames: Vec<(AModeFrame, PeakAnnotation)>,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split.iter().filter(|&&s| s == split).count()
    }
}
