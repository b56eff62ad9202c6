//! Traditional peak detector used for comparison: the tallest sample
//! inside an expert-defined window is declared the bone peak.

use crate::error::{Error, Result};
use crate::signal::{depth_to_index, AModeFrame, AcousticModel};
use crate::synthgen::TissueProfile;

/// Expert window and detection floor for one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub window_start: usize,
    /// Inclusive end index.
    pub window_end: usize,
    /// Peaks weaker than this are not reported.
    pub min_prominence: f64,
}

impl BaselineConfig {
    pub fn validate(&self, signal_len: usize) -> Result<()> {
        if self.window_start >= self.window_end || self.window_end >= signal_len {
            return Err(Error::Config(format!(
                "baseline window [{}, {}] invalid for {} samples",
                self.window_start, self.window_end, signal_len
            )));
        }
        Ok(())
    }

    /// Emulate expert knowledge for synthetic data: the profile's bone
    /// depth range widened by 10%, with a floor of five noise deviations.
    pub fn from_profile(profile: &TissueProfile, ac: &AcousticModel) -> Result<Self> {
        let lo = (profile.bone_depth_min_mm * 0.9).max(0.0);
        let hi = (profile.bone_depth_max_mm * 1.1).min(ac.span_mm());
        let window_start = depth_to_index(lo, ac)?;
        let window_end = depth_to_index(hi, ac)?.min(ac.signal_len - 1);
        let cfg = BaselineConfig {
            window_start,
            window_end,
            min_prominence: 5.0 * profile.noise_sigma,
        };
        cfg.validate(ac.signal_len)?;
        Ok(cfg)
    }
}

/// Index of the tallest sample inside the window, or `None` when nothing
/// clears the prominence floor. Ties resolve to the lowest index.
pub fn windowed_argmax(frame: &AModeFrame, cfg: &BaselineConfig) -> Result<Option<usize>> {
    cfg.validate(frame.samples.len())?;
    let mut best = cfg.window_start;
    for i in cfg.window_start..=cfg.window_end {
        if frame.samples[i] > frame.samples[best] {
            best = i;
        }
    }
    if frame.samples[best] < cfg.min_prominence {
        return Ok(None);
    }
    Ok(Some(best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::signal::{preprocess_frame, Area, RegionLabel};
    use crate::synthgen::generate_frame;

    fn frame_from(raw: &[f64]) -> AModeFrame {
        let region = RegionLabel::new(Area::Femur, 11).unwrap();
        preprocess_frame(raw, region, 0, raw.len()).unwrap()
    }

    #[test]
    fn finds_single_peak_inside_window() {
        let mut raw = vec![1.0; 256];
        raw[100] = 3000.0;
        let cfg = BaselineConfig {
            window_start: 64,
            window_end: 192,
            min_prominence: 10.0,
        };
        assert_eq!(windowed_argmax(&frame_from(&raw), &cfg).unwrap(), Some(100));
    }

    #[test]
    fn ignores_taller_distractor_outside_window() {
        let mut raw = vec![1.0; 256];
        raw[100] = 3000.0;
        raw[20] = 4500.0;
        let cfg = BaselineConfig {
            window_start: 64,
            window_end: 192,
            min_prominence: 10.0,
        };
        assert_eq!(windowed_argmax(&frame_from(&raw), &cfg).unwrap(), Some(100));
    }

    #[test]
    fn distractor_inside_window_defeats_argmax() {
        // Documented failure mode: a taller non-bone echo in the window.
        let mut raw = vec![1.0; 256];
        raw[100] = 3000.0; // true bone peak
        raw[80] = 4000.0; // soft-tissue echo
        let cfg = BaselineConfig {
            window_start: 64,
            window_end: 192,
            min_prominence: 10.0,
        };
        assert_eq!(windowed_argmax(&frame_from(&raw), &cfg).unwrap(), Some(80));
    }

    #[test]
    fn weak_window_reports_nothing() {
        let raw = vec![1.0; 256];
        let cfg = BaselineConfig {
            window_start: 64,
            window_end: 192,
            min_prominence: 10.0,
        };
        assert_eq!(windowed_argmax(&frame_from(&raw), &cfg).unwrap(), None);
    }

    #[test]
    fn invalid_windows_rejected() {
        let raw = vec![1.0; 256];
        let frame = frame_from(&raw);
        for (s, e) in [(10, 10), (20, 10), (0, 256)] {
            let cfg = BaselineConfig {
                window_start: s,
                window_end: e,
                min_prominence: 0.0,
            };
            assert!(windowed_argmax(&frame, &cfg).is_err());
        }
    }

    #[test]
    fn output_always_inside_window() {
        let ac = AcousticModel::with_signal_len(2048);
        let profiles = TissueProfile::defaults(Area::Femur, &ac).unwrap();
        for (pi, profile) in profiles.iter().enumerate() {
            let cfg = BaselineConfig::from_profile(profile, &ac).unwrap();
            for i in 0..40 {
                let mut rng = substream(77, "dataset", (pi * 40 + i) as u64);
                let (frame, _) = generate_frame(profile, &mut rng, &ac, i as u32).unwrap();
                if let Some(idx) = windowed_argmax(&frame, &cfg).unwrap() {
                    assert!((cfg.window_start..=cfg.window_end).contains(&idx));
                }
            }
        }
    }

    #[test]
    fn small_bias_on_distractor_free_frames() {
        let ac = AcousticModel::with_signal_len(2048);
        let mut profile = TissueProfile::defaults(Area::Femur, &ac).unwrap()[0].clone();
        profile.n_soft_min = 0;
        profile.n_soft_max = 0;
        let cfg = BaselineConfig::from_profile(&profile, &ac).unwrap();
        for i in 0..50 {
            let mut rng = substream(78, "dataset", i);
            let (frame, ann) = generate_frame(&profile, &mut rng, &ac, i as u32).unwrap();
            let idx = windowed_argmax(&frame, &cfg).unwrap();
            let got = idx.expect("clean bone peak must clear the floor");
            let bias = got.abs_diff(ann.midpoint());
            assert!(bias <= 5, "frame {i}: bias {bias} samples");
        }
    }

    #[test]
    fn absent_peak_with_quiet_window_is_none() {
        let ac = AcousticModel::with_signal_len(2048);
        let mut profile = TissueProfile::defaults(Area::Femur, &ac).unwrap()[0].clone();
        profile.n_soft_min = 0;
        profile.n_soft_max = 0;
        profile.dropout_prob = 0.1;
        let cfg = BaselineConfig::from_profile(&profile, &ac).unwrap();
        let mut saw_absent = false;
        for i in 0..200 {
            let mut rng = substream(79, "dataset", i);
            let (frame, ann) = generate_frame(&profile, &mut rng, &ac, i as u32).unwrap();
            if !ann.present {
                saw_absent = true;
                assert_eq!(windowed_argmax(&frame, &cfg).unwrap(), None);
            }
        }
        assert!(saw_absent);
    }
}
