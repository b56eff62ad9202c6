//! Post-processing network outputs into per-frame decisions: thresholded
//! probability segments, the peak-existence/location rule, and depth.
//!
//! The coarse segmentation decides whether a peak exists at all; the
//! refined segmentation pins down its position. A peak reported with no
//! coarse support is discarded.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::proposal::{ProposalMode, RegionProposal};
use crate::network::CascadedModel;
use crate::rng::substream;
use crate::signal::{index_to_depth, AModeFrame, AcousticModel, PeakAnnotation, RegionLabel};

/// Default probability threshold: the decision boundary of the two-class
/// softmax.
pub const DEFAULT_TAU: f64 = 0.5;

/// A maximal run of positions whose peak probability clears the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: usize,
    /// Inclusive end index.
    pub end: usize,
    /// Maximum probability inside the run.
    pub peak_score: f64,
}

impl Segment {
    pub fn midpoint(&self) -> usize {
        (self.start + self.end) / 2
    }
}

/// Everything the cascade reports for one frame.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub frame_id: u32,
    /// Predicted anatomical region.
    pub region: RegionLabel,
    /// Global sample index of the bone peak, if one was detected.
    pub peak_index: Option<usize>,
    /// Depth equivalent of `peak_index`.
    pub depth_mm: Option<f64>,
    pub coarse_segments: Vec<Segment>,
    /// Window-local segments from the refined pass.
    pub refined_segments: Vec<Segment>,
    pub proposal: RegionProposal,
}

/// Maximal runs of `probs[i] >= tau`, each scored by its highest value.
pub fn threshold_segments(probs: &[f64], tau: f64) -> Result<Vec<Segment>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Parameter(format!(
            "threshold {tau} must lie strictly inside (0, 1)"
        )));
    }
    let mut segments = Vec::new();
    let mut current: Option<Segment> = None;
    for (i, &p) in probs.iter().enumerate() {
        if p >= tau {
            match current.as_mut() {
                Some(seg) => {
                    seg.end = i;
                    seg.peak_score = seg.peak_score.max(p);
                }
                None => {
                    current = Some(Segment {
                        start: i,
                        end: i,
                        peak_score: p,
                    })
                }
            }
        } else if let Some(seg) = current.take() {
            segments.push(seg);
        }
    }
    if let Some(seg) = current.take() {
        segments.push(seg);
    }
    Ok(segments)
}

/// Highest score wins; ties resolve to the lowest start index.
fn best_segment(segments: &[Segment]) -> Option<&Segment> {
    segments.iter().reduce(|best, s| {
        if s.peak_score > best.peak_score {
            s
        } else {
            best
        }
    })
}

/// Combine the two segmentations: the coarse output confirms existence,
/// the refined output (mapped through the proposal) supplies the position,
/// falling back to the best coarse segment when the refined pass abstains.
pub fn resolve_peak(
    coarse: &[Segment],
    refined: &[Segment],
    proposal: &RegionProposal,
) -> Option<usize> {
    if coarse.is_empty() {
        return None;
    }
    if let Some(best) = best_segment(refined) {
        return Some(proposal.start + best.midpoint());
    }
    best_segment(coarse).map(|s| s.midpoint())
}

/// Frozen model plus the acoustic conversion and threshold.
pub struct Predictor<'m> {
    pub model: &'m CascadedModel,
    pub acoustic: AcousticModel,
    pub tau: f64,
    mode: ProposalMode,
    seed: u64,
}

impl<'m> Predictor<'m> {
    pub fn new(model: &'m CascadedModel, acoustic: AcousticModel, tau: f64) -> Result<Self> {
        if acoustic.signal_len != model.config.signal_len {
            return Err(Error::Config(format!(
                "acoustic model expects {} samples, network {}",
                acoustic.signal_len, model.config.signal_len
            )));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Parameter(format!(
                "threshold {tau} must lie strictly inside (0, 1)"
            )));
        }
        Ok(Predictor {
            model,
            acoustic,
            tau,
            mode: ProposalMode::Deterministic,
            seed: 0,
        })
    }

    /// Switch to stochastic proposals (seeded); inference then samples the
    /// refined window instead of taking the distribution's mode.
    pub fn with_stochastic_proposals(mut self, seed: u64) -> Self {
        self.mode = ProposalMode::Stochastic;
        self.seed = seed;
        self
    }

    pub fn predict(&self, frame: &AModeFrame) -> Result<Prediction> {
        Ok(self.predict_batch(&[frame])?.pop().expect("one frame in"))
    }

    /// Run the cascade on a batch and post-process every frame.
    pub fn predict_batch(&self, frames: &[&AModeFrame]) -> Result<Vec<Prediction>> {
        let mut rng = substream(self.seed, "sbp-infer", 0);
        self.predict_batch_with_rng(frames, &mut rng)
    }

    /// As `predict_batch` but drawing stochastic proposals from `rng`.
    pub fn predict_batch_with_rng(
        &self,
        frames: &[&AModeFrame],
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Prediction>> {
        let pass = self
            .model
            .forward_batch(frames, self.mode, rng, false)?;
        let coarse_fg = pass.graph.value(pass.coarse.fg_prob);
        let refined_fg = pass.graph.value(pass.refined.fg_prob);
        let class_probs = pass.graph.value(pass.class_probs);
        let signal_len = self.model.config.signal_len;
        let window = self.model.config.proposal.window_len;

        let mut out = Vec::with_capacity(frames.len());
        for (i, frame) in frames.iter().enumerate() {
            let coarse_row: Vec<f64> = (0..signal_len).map(|j| coarse_fg[[i, j]]).collect();
            let refined_row: Vec<f64> = (0..window).map(|j| refined_fg[[i, j]]).collect();
            let coarse_segments = threshold_segments(&coarse_row, self.tau)?;
            let refined_segments = threshold_segments(&refined_row, self.tau)?;
            let proposal = pass.proposals[i].clone();

            let classes = self.model.config.classes();
            let mut best_class = 0;
            for c in 1..classes {
                if class_probs[[i, c]] > class_probs[[i, best_class]] {
                    best_class = c;
                }
            }
            let region = RegionLabel::from_index(self.model.config.area, best_class)?;

            let peak_index = resolve_peak(&coarse_segments, &refined_segments, &proposal);
            let depth_mm = match peak_index {
                Some(idx) => Some(index_to_depth(idx, &self.acoustic)?),
                None => None,
            };
            out.push(Prediction {
                frame_id: frame.frame_id,
                region,
                peak_index,
                depth_mm,
                coarse_segments,
                refined_segments,
                proposal,
            });
        }
        Ok(out)
    }
}

/// One export row: prediction joined with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub frame_id: u32,
    pub true_region: RegionLabel,
    pub pred_region: RegionLabel,
    pub true_depth_mm: Option<f64>,
    pub pred_depth_mm: Option<f64>,
    /// Absolute depth error; present only when both depths are.
    pub bias_mm: Option<f64>,
    pub latency_ms: f64,
}

impl PredictionRow {
    pub fn new(
        prediction: &Prediction,
        truth: &PeakAnnotation,
        true_region: RegionLabel,
        latency_ms: f64,
    ) -> Self {
        let true_depth_mm = truth.present.then_some(truth.depth_mm);
        let bias_mm = match (true_depth_mm, prediction.depth_mm) {
            (Some(t), Some(p)) => Some((p - t).abs()),
            _ => None,
        };
        PredictionRow {
            frame_id: prediction.frame_id,
            true_region,
            pred_region: prediction.region,
            true_depth_mm,
            pred_depth_mm: prediction.depth_mm,
            bias_mm,
            latency_ms,
        }
    }
}

/// Write rows as `frame_id,true_region,pred_region,true_depth,pred_depth,
/// bias_mm,latency_ms`; absent values stay empty.
pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "frame_id,true_region,pred_region,true_depth,pred_depth,bias_mm,latency_ms"
    )?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.6}",
            r.frame_id,
            r.true_region.channel(),
            r.pred_region.channel(),
            fmt(r.true_depth_mm),
            fmt(r.pred_depth_mm),
            fmt(r.bias_mm),
            r.latency_ms
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Read rows written by [`write_predictions`].
pub fn read_predictions(path: &Path, area: crate::signal::Area) -> Result<Vec<PredictionRow>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty predictions file".into()))??;
    if !header.starts_with("frame_id,true_region,pred_region") {
        return Err(Error::Format("unrecognized predictions header".into()));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!(
                "predictions line {}: expected 7 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| Error::Format(format!("bad number '{s}'")))
            }
        };
        let channel = |s: &str| -> Result<RegionLabel> {
            let ch: u16 = s
                .parse()
                .map_err(|_| Error::Format(format!("bad channel '{s}'")))?;
            RegionLabel::new(area, ch)
        };
        rows.push(PredictionRow {
            frame_id: fields[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad frame id '{}'", fields[0])))?,
            true_region: channel(fields[1])?,
            pred_region: channel(fields[2])?,
            true_depth_mm: parse_f(fields[3])?,
            pred_depth_mm: parse_f(fields[4])?,
            bias_mm: parse_f(fields[5])?,
            latency_ms: parse_f(fields[6])?.unwrap_or(0.0),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::signal::Area;
    use crate::synthgen::{generate_dataset, GenConfig, TissueProfile};
    use approx::assert_abs_diff_eq;

    #[test]
    fn threshold_segment_runs() {
        let probs = [0.1, 0.9, 0.8, 0.2, 0.7];
        let segs = threshold_segments(&probs, 0.5).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].start, segs[0].end), (1, 2));
        assert_abs_diff_eq!(segs[0].peak_score, 0.9);
        assert_eq!((segs[1].start, segs[1].end), (4, 4));
    }

    #[test]
    fn threshold_empty_and_guard() {
        assert!(threshold_segments(&[0.1, 0.2], 0.5).unwrap().is_empty());
        assert!(threshold_segments(&[0.1], 0.0).is_err());
        assert!(threshold_segments(&[0.1], 1.0).is_err());
    }

    #[test]
    fn tau_monotonicity() {
        use rand::Rng;
        let mut rng = crate::rng::substream(1, "tau", 0);
        let probs: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut prev = threshold_segments(&probs, 0.2).unwrap();
        for tau in [0.3, 0.5, 0.7, 0.9] {
            let cur = threshold_segments(&probs, tau).unwrap();
            // Raising tau never adds segments in total covered length and
            // every surviving position was covered before.
            let covered =
                |segs: &[Segment]| -> usize { segs.iter().map(|s| s.end - s.start + 1).sum() };
            assert!(covered(&cur) <= covered(&prev));
            for seg in &cur {
                for i in seg.start..=seg.end {
                    assert!(prev
                        .iter()
                        .any(|p| (p.start..=p.end).contains(&i)));
                }
            }
            prev = cur;
        }
    }

    fn proposal_at(start: usize) -> RegionProposal {
        RegionProposal {
            start,
            width: 64,
            candidate_start: start,
            distribution: vec![1.0 / 192.0; 192],
        }
    }

    #[test]
    fn resolve_requires_coarse_support() {
        let refined = vec![Segment {
            start: 40,
            end: 49,
            peak_score: 0.99,
        }];
        assert_eq!(resolve_peak(&[], &refined, &proposal_at(80)), None);
    }

    #[test]
    fn resolve_maps_refined_through_proposal() {
        let coarse = vec![Segment {
            start: 100,
            end: 120,
            peak_score: 0.8,
        }];
        let refined = vec![Segment {
            start: 40,
            end: 49,
            peak_score: 0.9,
        }];
        assert_eq!(
            resolve_peak(&coarse, &refined, &proposal_at(80)),
            Some(124)
        );
    }

    #[test]
    fn resolve_falls_back_to_coarse_midpoint() {
        let coarse = vec![Segment {
            start: 100,
            end: 109,
            peak_score: 0.8,
        }];
        assert_eq!(resolve_peak(&coarse, &[], &proposal_at(80)), Some(104));
    }

    #[test]
    fn resolve_tie_breaks_deterministically() {
        let coarse = vec![Segment {
            start: 0,
            end: 1,
            peak_score: 0.6,
        }];
        let refined = vec![
            Segment {
                start: 10,
                end: 19,
                peak_score: 0.7,
            },
            Segment {
                start: 30,
                end: 39,
                peak_score: 0.7,
            },
        ];
        // Equal scores: the earlier segment wins.
        assert_eq!(
            resolve_peak(&coarse, &refined, &proposal_at(0)),
            Some(14)
        );
    }

    #[test]
    fn predictions_roundtrip_and_purity() {
        let ac = crate::signal::AcousticModel::with_signal_len(2048);
        let profiles = TissueProfile::defaults(Area::Femur, &ac).unwrap();
        let set = generate_dataset(
            &profiles,
            &GenConfig {
                seed: 3,
                frames_per_region: 2,
                acoustic: ac,
            },
        )
        .unwrap();
        let model =
            crate::network::CascadedModel::init(ModelConfig::for_area(Area::Femur, 2048).unwrap(), 1)
                .unwrap();
        let predictor = Predictor::new(&model, ac, DEFAULT_TAU).unwrap();
        let frames: Vec<&AModeFrame> = set.frames.iter().map(|(f, _)| f).collect();

        let p1 = predictor.predict_batch(&frames).unwrap();
        let p2 = predictor.predict_batch(&frames).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(a.peak_index, b.peak_index);
            assert_eq!(a.depth_mm, b.depth_mm);
            assert_eq!(a.region, b.region);
            assert_eq!(a.proposal, b.proposal);
        }
        // Depth always matches the index conversion exactly.
        for p in &p1 {
            if let (Some(idx), Some(d)) = (p.peak_index, p.depth_mm) {
                assert_eq!(d, index_to_depth(idx, &ac).unwrap());
            }
        }

        // Rows survive the CSV roundtrip.
        let rows: Vec<PredictionRow> = p1
            .iter()
            .zip(&set.frames)
            .map(|(p, (f, a))| PredictionRow::new(p, a, f.region, 1.25))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.csv");
        write_predictions(&path, &rows).unwrap();
        let back = read_predictions(&path, Area::Femur).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.frame_id, b.frame_id);
            assert_eq!(a.true_region, b.true_region);
            assert_eq!(a.pred_region, b.pred_region);
            let close = |x: Option<f64>, y: Option<f64>| match (x, y) {
                (Some(x), Some(y)) => (x - y).abs() < 1e-5,
                (None, None) => true,
                _ => false,
            };
            assert!(close(a.bias_mm, b.bias_mm));
        }
    }

    #[test]
    fn peak_index_lies_inside_a_reported_segment() {
        let ac = crate::signal::AcousticModel::with_signal_len(2048);
        let profiles = TissueProfile::defaults(Area::Femur, &ac).unwrap();
        let set = generate_dataset(
            &profiles,
            &GenConfig {
                seed: 8,
                frames_per_region: 4,
                acoustic: ac,
            },
        )
        .unwrap();
        let model =
            crate::network::CascadedModel::init(ModelConfig::for_area(Area::Femur, 2048).unwrap(), 2)
                .unwrap();
        let predictor = Predictor::new(&model, ac, 0.4).unwrap();
        let frames: Vec<&AModeFrame> = set.frames.iter().map(|(f, _)| f).collect();
        for p in predictor.predict_batch(&frames).unwrap() {
            if let Some(idx) = p.peak_index {
                let in_refined = p
                    .refined_segments
                    .iter()
                    .any(|s| (p.proposal.start + s.start..=p.proposal.start + s.end).contains(&idx));
                let in_coarse = p
                    .coarse_segments
                    .iter()
                    .any(|s| (s.start..=s.end).contains(&idx));
                assert!(in_refined || in_coarse);
            }
        }
    }
}
