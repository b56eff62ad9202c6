//! Parametric A-mode echo simulator.
//!
//! Each frame is built from a bone-interface pulse placed at a drawn depth,
//! a region-specific pattern of shallower soft-tissue interface pulses, an
//! exponential depth attenuation, and additive noise. The soft-tissue
//! pattern (count, spacing, amplitude, pulse width) is what makes regions
//! distinguishable; the taller-than-bone distractors are what defeat plain
//! windowed argmax detection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, substream};
use crate::signal::{
    depth_to_index, preprocess_frame, AModeFrame, AcousticModel, Area, FrameSet, PeakAnnotation,
    RegionLabel, AMP_CEILING,
};

/// Carrier period of the rectified pulse model, in samples.
const CARRIER_PERIOD: f64 = 6.0;
/// Soft-tissue interfaces stay at least this much shallower than the bone.
const SOFT_BONE_GAP_MM: f64 = 1.5;

/// Signal statistics of one anatomical region.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueProfile {
    pub region: RegionLabel,
    /// Count range of soft-tissue interface pulses.
    pub n_soft_min: usize,
    pub n_soft_max: usize,
    /// Amplitude range of soft-tissue pulses.
    pub soft_amp_min: f64,
    pub soft_amp_max: f64,
    /// Characteristic spacing between successive interfaces, mm.
    pub soft_spacing_mm: f64,
    /// Width (FWHM, samples) range of soft-tissue pulses.
    pub soft_width_min: usize,
    pub soft_width_max: usize,
    /// Amplitude range of the bone pulse before attenuation.
    pub bone_amp_min: f64,
    pub bone_amp_max: f64,
    /// Bone depth range, mm.
    pub bone_depth_min_mm: f64,
    pub bone_depth_max_mm: f64,
    /// Exponential decay per mm of depth.
    pub attenuation_mu: f64,
    /// Additive Gaussian noise amplitude.
    pub noise_sigma: f64,
    /// Width (FWHM, samples) of the bone pulse envelope.
    pub peak_shape_width: usize,
    /// Probability that a frame carries no visible bone peak.
    pub dropout_prob: f64,
}

impl TissueProfile {
    pub fn validate(&self) -> Result<()> {
        let ok_amp = |a: f64, b: f64| a >= 0.0 && b <= AMP_CEILING && a <= b;
        if !ok_amp(self.soft_amp_min, self.soft_amp_max)
            || !ok_amp(self.bone_amp_min, self.bone_amp_max)
        {
            return Err(Error::Config(format!(
                "{}: amplitude ranges must lie in [0, {AMP_CEILING}]",
                self.region
            )));
        }
        if self.bone_depth_min_mm < 5.0
            || self.bone_depth_max_mm > 120.0
            || self.bone_depth_min_mm > self.bone_depth_max_mm
        {
            return Err(Error::Config(format!(
                "{}: bone depth range [{}, {}] must lie in [5, 120] mm",
                self.region, self.bone_depth_min_mm, self.bone_depth_max_mm
            )));
        }
        if !(0.0..=0.1).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "{}: dropout_prob {} outside [0, 0.1]",
                self.region, self.dropout_prob
            )));
        }
        if self.n_soft_min > self.n_soft_max
            || self.soft_width_min > self.soft_width_max
            || self.soft_width_min == 0
        {
            return Err(Error::Config(format!(
                "{}: soft interface count/width ranges are inverted",
                self.region
            )));
        }
        if self.peak_shape_width == 0 || self.soft_spacing_mm <= 0.0 {
            return Err(Error::Config(format!(
                "{}: peak width and spacing must be positive",
                self.region
            )));
        }
        if self.attenuation_mu < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "{}: attenuation and noise must be non-negative",
                self.region
            )));
        }
        Ok(())
    }

    /// Apply a `--set` style override to one field.
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
        }
        match key {
            "n_soft_min" => self.n_soft_min = parse(key, value)?,
            "n_soft_max" => self.n_soft_max = parse(key, value)?,
            "soft_amp_min" => self.soft_amp_min = parse(key, value)?,
            "soft_amp_max" => self.soft_amp_max = parse(key, value)?,
            "soft_spacing_mm" => self.soft_spacing_mm = parse(key, value)?,
            "soft_width_min" => self.soft_width_min = parse(key, value)?,
            "soft_width_max" => self.soft_width_max = parse(key, value)?,
            "bone_amp_min" => self.bone_amp_min = parse(key, value)?,
            "bone_amp_max" => self.bone_amp_max = parse(key, value)?,
            "bone_depth_min_mm" => self.bone_depth_min_mm = parse(key, value)?,
            "bone_depth_max_mm" => self.bone_depth_max_mm = parse(key, value)?,
            "attenuation_mu" => self.attenuation_mu = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "peak_shape_width" => self.peak_shape_width = parse(key, value)?,
            "dropout_prob" => self.dropout_prob = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown profile field '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Default profiles for an area, scaled to the acoustic depth span.
    ///
    /// Regions differ in interface count, spacing, amplitude, and pulse
    /// width; soft-tissue amplitudes are allowed to exceed the attenuated
    /// bone pulse so that the tallest echo is frequently not the bone.
    pub fn defaults(area: Area, ac: &AcousticModel) -> Result<Vec<TissueProfile>> {
        let span = ac.span_mm();
        let depth_lo = (0.35 * span).max(5.0);
        let depth_hi = (0.75 * span).min(120.0);
        if depth_hi - depth_lo < 1.0 {
            return Err(Error::Config(format!(
                "acoustic span {span:.2} mm too short for a usable bone depth range"
            )));
        }
        // (count range, amp range, spacing mm, width range)
        let fingerprints: &[((usize, usize), (f64, f64), f64, (usize, usize))] = match area {
            Area::Femur => &[
                ((1, 2), (1100.0, 3100.0), 0.16, (14, 18)),
                ((4, 6), (900.0, 2800.0), 0.055, (4, 6)),
                ((2, 4), (1100.0, 3000.0), 0.10, (16, 22)),
            ],
            Area::Tibia => &[
                ((1, 2), (1100.0, 3000.0), 0.17, (13, 17)),
                ((3, 4), (900.0, 2700.0), 0.07, (4, 6)),
                ((5, 7), (800.0, 2400.0), 0.045, (5, 7)),
                ((2, 3), (1200.0, 3100.0), 0.12, (16, 22)),
                ((4, 6), (1000.0, 2800.0), 0.06, (15, 19)),
            ],
        };
        let mut profiles = Vec::new();
        for (i, &((n_lo, n_hi), (a_lo, a_hi), spacing_frac, (w_lo, w_hi))) in
            fingerprints.iter().enumerate()
        {
            let bone_amp_max = 3800.0;
            let p = TissueProfile {
                region: RegionLabel::from_index(area, i)?,
                n_soft_min: n_lo,
                n_soft_max: n_hi,
                soft_amp_min: a_lo,
                soft_amp_max: a_hi,
                soft_spacing_mm: spacing_frac * span,
                soft_width_min: w_lo,
                soft_width_max: w_hi,
                bone_amp_min: 2600.0,
                bone_amp_max,
                bone_depth_min_mm: depth_lo,
                bone_depth_max_mm: depth_hi,
                attenuation_mu: 0.015,
                noise_sigma: 0.02 * bone_amp_max,
                peak_shape_width: 10,
                dropout_prob: 0.0,
            };
            p.validate()?;
            profiles.push(p);
        }
        Ok(profiles)
    }
}

/// Generation settings for one dataset.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub seed: u64,
    pub frames_per_region: usize,
    pub acoustic: AcousticModel,
}

/// A rectified-carrier pulse under a Gaussian envelope, added in place.
/// `fwhm` is the envelope full width at half maximum in samples.
fn add_pulse(samples: &mut [f64], center: usize, amplitude: f64, fwhm: usize) {
    let sigma = fwhm as f64 / 2.355;
    let reach = (3.5 * sigma).ceil() as i64;
    let c = center as i64;
    for i in (c - reach).max(0)..=(c + reach).min(samples.len() as i64 - 1) {
        let d = (i - c) as f64;
        let envelope = (-d * d / (2.0 * sigma * sigma)).exp();
        let carrier = (std::f64::consts::TAU * d / CARRIER_PERIOD).cos().abs();
        samples[i as usize] += amplitude * envelope * carrier;
    }
}

/// Generate one labeled frame from the profile's statistics.
pub fn generate_frame(
    profile: &TissueProfile,
    rng: &mut ChaCha8Rng,
    ac: &AcousticModel,
    frame_id: u32,
) -> Result<(AModeFrame, PeakAnnotation)> {
    profile.validate()?;
    if profile.bone_depth_max_mm > ac.span_mm() {
        return Err(Error::Generator(format!(
            "{}: bone depth range exceeds the {:.2} mm acoustic span",
            profile.region,
            ac.span_mm()
        )));
    }
    let mut samples = vec![0.0; ac.signal_len];

    // Fixed draw order keeps frames reproducible.
    let present = rng.gen::<f64>() >= profile.dropout_prob;
    let depth = rng.gen_range(profile.bone_depth_min_mm..=profile.bone_depth_max_mm);
    let bone_idx = depth_to_index(depth, ac).map_err(|e| Error::Generator(e.to_string()))?;
    let bone_amp = rng.gen_range(profile.bone_amp_min..=profile.bone_amp_max)
        * (-profile.attenuation_mu * depth).exp();
    if present {
        add_pulse(&mut samples, bone_idx, bone_amp, profile.peak_shape_width);
    }

    let n_soft = rng.gen_range(profile.n_soft_min..=profile.n_soft_max);
    let start_mm = 0.05 * ac.span_mm();
    for k in 0..n_soft {
        let jitter = rng.gen_range(-0.35..0.35);
        let d_k = start_mm + (k as f64 + 0.5 + jitter) * profile.soft_spacing_mm;
        let amp = rng.gen_range(profile.soft_amp_min..=profile.soft_amp_max);
        let width = rng.gen_range(profile.soft_width_min..=profile.soft_width_max);
        if d_k >= depth - SOFT_BONE_GAP_MM || d_k >= ac.span_mm() {
            continue;
        }
        let idx = depth_to_index(d_k, ac).map_err(|e| Error::Generator(e.to_string()))?;
        add_pulse(
            &mut samples,
            idx,
            amp * (-profile.attenuation_mu * d_k).exp(),
            width,
        );
    }

    if profile.noise_sigma > 0.0 {
        for s in samples.iter_mut() {
            *s += profile.noise_sigma * standard_normal(rng);
        }
    }

    let frame = preprocess_frame(&samples, profile.region, frame_id, ac.signal_len)?;
    let annotation = if present {
        PeakAnnotation::at_index(bone_idx, depth, ac)
            .map_err(|e| Error::Generator(e.to_string()))?
    } else {
        PeakAnnotation::absent()
    };
    Ok((frame, annotation))
}

/// Generate a balanced corpus: `frames_per_region` frames for every profile.
/// Frame RNG streams are derived from `(seed, frame_id)`, so the output is
/// independent of generation order.
pub fn generate_dataset(profiles: &[TissueProfile], cfg: &GenConfig) -> Result<FrameSet> {
    if profiles.len() < 2 {
        return Err(Error::Config(
            "at least two region profiles are required for classification".into(),
        ));
    }
    if cfg.frames_per_region == 0 {
        return Err(Error::Config("frames_per_region must be positive".into()));
    }
    let area = profiles[0].region.area();
    if profiles.iter().any(|p| p.region.area() != area) {
        return Err(Error::Config(
            "all profiles must belong to the same area".into(),
        ));
    }
    let mut frames = Vec::with_capacity(profiles.len() * cfg.frames_per_region);
    for (ri, profile) in profiles.iter().enumerate() {
        for i in 0..cfg.frames_per_region {
            let frame_id = (ri * cfg.frames_per_region + i) as u32;
            let mut rng = substream(cfg.seed, "dataset", frame_id as u64);
            frames.push(generate_frame(profile, &mut rng, &cfg.acoustic, frame_id)?);
        }
    }
    Ok(FrameSet {
        acoustic: cfg.acoustic,
        area,
        frames,
    })
}

/// Index of the tallest sample; ties resolve to the lowest index.
pub fn global_argmax(samples: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in samples.iter().enumerate() {
        if v > samples[best] {
            best = i;
        }
    }
    best
}

pub mod profile_file;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::index_to_depth;

    fn desk_acoustic() -> AcousticModel {
        AcousticModel::with_signal_len(2048)
    }

    fn femur_profiles() -> Vec<TissueProfile> {
        TissueProfile::defaults(Area::Femur, &desk_acoustic()).unwrap()
    }

    #[test]
    fn single_clean_peak_sits_at_drawn_depth() {
        let ac = desk_acoustic();
        let mut p = femur_profiles()[0].clone();
        p.noise_sigma = 0.0;
        p.n_soft_min = 0;
        p.n_soft_max = 0;
        let mut rng = substream(3, "dataset", 0);
        let (frame, ann) = generate_frame(&p, &mut rng, &ac, 0).unwrap();
        assert!(ann.present);
        let argmax = global_argmax(&frame.samples);
        assert_eq!(argmax, ann.midpoint());
        assert_eq!(argmax, depth_to_index(ann.depth_mm, &ac).unwrap());
    }

    #[test]
    fn attenuation_shrinks_deep_peaks() {
        // Equal base amplitude, different depths: the deeper echo is weaker.
        let mu = 0.015;
        let shallow = (-mu * 20.0 as f64).exp();
        let deep = (-mu * 100.0 as f64).exp();
        assert!(deep < shallow);

        let ac = AcousticModel::full_length();
        let mut p = TissueProfile::defaults(Area::Femur, &ac).unwrap()[0].clone();
        p.noise_sigma = 0.0;
        p.n_soft_min = 0;
        p.n_soft_max = 0;
        p.bone_amp_min = 3000.0;
        p.bone_amp_max = 3000.0;
        p.bone_depth_min_mm = 20.0;
        p.bone_depth_max_mm = 20.0;
        let mut rng = substream(4, "dataset", 0);
        let (near, _) = generate_frame(&p, &mut rng, &ac, 0).unwrap();
        p.bone_depth_min_mm = 100.0;
        p.bone_depth_max_mm = 100.0;
        let mut rng = substream(4, "dataset", 0);
        let (far, _) = generate_frame(&p, &mut rng, &ac, 0).unwrap();
        let max_near = near.samples.iter().cloned().fold(0.0, f64::max);
        let max_far = far.samples.iter().cloned().fold(0.0, f64::max);
        assert!(max_far < max_near, "{max_far} !< {max_near}");
    }

    #[test]
    fn same_seed_reproduces_frames() {
        let ac = desk_acoustic();
        let p = &femur_profiles()[1];
        let mut r1 = substream(9, "dataset", 5);
        let mut r2 = substream(9, "dataset", 5);
        let (f1, a1) = generate_frame(p, &mut r1, &ac, 5).unwrap();
        let (f2, a2) = generate_frame(p, &mut r2, &ac, 5).unwrap();
        assert_eq!(f1.samples, f2.samples);
        assert_eq!(a1, a2);
    }

    #[test]
    fn dataset_is_balanced_and_consistent() {
        let cfg = GenConfig {
            seed: 11,
            frames_per_region: 20,
            acoustic: desk_acoustic(),
        };
        let set = generate_dataset(&femur_profiles(), &cfg).unwrap();
        assert_eq!(set.frames.len(), 60);
        let mut counts = [0usize; 3];
        for (frame, ann) in &set.frames {
            counts[frame.region.index()] += 1;
            if ann.present {
                let mid_depth = index_to_depth(ann.midpoint(), &set.acoustic).unwrap();
                assert!((mid_depth - ann.depth_mm).abs() <= set.acoustic.depth_unit_mm());
            }
        }
        assert_eq!(counts, [20, 20, 20]);
    }

    #[test]
    fn three_profiles_of_200_yield_600() {
        let cfg = GenConfig {
            seed: 1,
            frames_per_region: 200,
            acoustic: AcousticModel::with_signal_len(512),
        };
        let profiles = TissueProfile::defaults(Area::Femur, &cfg.acoustic).unwrap();
        let set = generate_dataset(&profiles, &cfg).unwrap();
        assert_eq!(set.frames.len(), 600);
    }

    #[test]
    fn mixed_areas_rejected() {
        let ac = desk_acoustic();
        let mut profiles = femur_profiles();
        profiles.push(TissueProfile::defaults(Area::Tibia, &ac).unwrap()[0].clone());
        let cfg = GenConfig {
            seed: 0,
            frames_per_region: 1,
            acoustic: ac,
        };
        assert!(matches!(
            generate_dataset(&profiles, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn amplitudes_stay_in_range() {
        let cfg = GenConfig {
            seed: 21,
            frames_per_region: 30,
            acoustic: desk_acoustic(),
        };
        let set = generate_dataset(&femur_profiles(), &cfg).unwrap();
        for (frame, _) in &set.frames {
            for &s in &frame.samples {
                assert!((0.0..=AMP_CEILING).contains(&s));
            }
            for &s in &frame.normalized {
                assert!((0.0..=1.0).contains(&s));
            }
        }
    }

    #[test]
    fn distractors_dominate_a_third_of_frames() {
        let cfg = GenConfig {
            seed: 5,
            frames_per_region: 100,
            acoustic: desk_acoustic(),
        };
        let set = generate_dataset(&femur_profiles(), &cfg).unwrap();
        let mut dominated = 0;
        let mut total = 0;
        for (frame, ann) in &set.frames {
            if !ann.present {
                continue;
            }
            total += 1;
            let argmax = global_argmax(&frame.samples);
            if argmax < ann.seg_start || argmax > ann.seg_end {
                dominated += 1;
            }
        }
        let frac = dominated as f64 / total as f64;
        assert!(frac >= 0.3, "only {frac:.2} of frames are distractor-dominant");
    }

    #[test]
    fn dropout_marks_frames_absent() {
        let ac = desk_acoustic();
        let mut p = femur_profiles()[0].clone();
        p.dropout_prob = 0.1;
        let mut absent = 0;
        for i in 0..300 {
            let mut rng = substream(33, "dataset", i);
            let (_, ann) = generate_frame(&p, &mut rng, &ac, i as u32).unwrap();
            if !ann.present {
                absent += 1;
            }
        }
        assert!((10..=70).contains(&absent), "absent = {absent}");
    }

    /// Nearest-centroid on coarse magnitude spectra: regions must be
    /// separable by trivial statistics for classification to be learnable.
    #[test]
    fn region_fingerprints_are_separable() {
        let cfg = GenConfig {
            seed: 13,
            frames_per_region: 60,
            acoustic: desk_acoustic(),
        };
        let set = generate_dataset(&femur_profiles(), &cfg).unwrap();

        // Magnitude spectrum of the signal downsampled to 256 points,
        // computed by direct DFT (independent of any crate machinery).
        fn spectrum(samples: &[f64]) -> Vec<f64> {
            let n = 256;
            let step = samples.len() / n;
            let ds: Vec<f64> = (0..n).map(|i| samples[i * step]).collect();
            let mut mags = Vec::with_capacity(48);
            for k in 1..49 {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in ds.iter().enumerate() {
                    let ang = std::f64::consts::TAU * (k * t) as f64 / n as f64;
                    re += v * ang.cos();
                    im -= v * ang.sin();
                }
                mags.push((re * re + im * im).sqrt() / n as f64);
            }
            mags
        }

        let feats: Vec<(usize, Vec<f64>)> = set
            .frames
            .iter()
            .map(|(f, _)| (f.region.index(), spectrum(&f.samples)))
            .collect();

        // Odd frames build centroids; even frames are scored.
        let dim = feats[0].1.len();
        let mut centroids = vec![vec![0.0; dim]; 3];
        let mut counts = [0usize; 3];
        for (i, (r, f)) in feats.iter().enumerate() {
            if i % 2 == 1 {
                for (c, v) in centroids[*r].iter_mut().zip(f) {
                    *c += v;
                }
                counts[*r] += 1;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut correct = 0;
        let mut total = 0;
        for (i, (r, f)) in feats.iter().enumerate() {
            if i % 2 == 0 {
                let best = (0..3)
                    .min_by(|&a, &b| {
                        let da: f64 = centroids[a]
                            .iter()
                            .zip(f)
                            .map(|(c, v)| (c - v) * (c - v))
                            .sum();
                        let db: f64 = centroids[b]
                            .iter()
                            .zip(f)
                            .map(|(c, v)| (c - v) * (c - v))
                            .sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                if best == *r {
                    correct += 1;
                }
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc > 0.6, "nearest-centroid accuracy {acc:.2} <= 0.6");
    }
}
