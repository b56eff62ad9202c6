//! Losses, dataset preparation, and the training loop.
//!
//! Both U-Nets train on dice plus binary cross-entropy; the classifier on
//! cross-entropy. The five components are summed without weights. The
//! refined branch's target is the annotation segment re-indexed into the
//! proposed window, or all-background when the proposal missed the peak.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::autodiff::optim::RmsProp;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::inference::{PredictionRow, Predictor, DEFAULT_TAU};
use crate::network::proposal::{ProposalMode, RegionProposal};
use crate::network::{BatchPass, CascadedModel};
use crate::rng::substream;
use crate::signal::{shift_augment, AModeFrame, Dataset, FrameSet, PeakAnnotation, Split};

/// Training hyperparameters. The split ratio is fixed at 8:2.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub epsilon_dice: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch_size: 10,
            epochs: 50,
            epsilon_dice: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 || self.epsilon_dice <= 0.0 {
            return Err(Error::Config(
                "learning rate, batch size, and dice epsilon must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fraction of the dataset tagged as training data.
pub const TRAIN_FRACTION: f64 = 0.8;
/// Number of shifted copies per source frame.
pub const AUGMENT_FOLD: usize = 10;
/// Largest augmentation shift on full-length signals, samples.
pub const MAX_SHIFT: i64 = 100;

/// The augmentation shifts for a frame length: ten evenly spaced values in
/// `[-S, S]` where `S` is 100 capped by the `signal_len/10` shift bound.
pub fn augmentation_shifts(signal_len: usize) -> Vec<i64> {
    let cap = (signal_len as i64) / 10 - 1;
    let s = MAX_SHIFT.min(cap).max(1);
    (0..AUGMENT_FOLD)
        .map(|i| {
            let x = -s as f64 + 2.0 * s as f64 * i as f64 / (AUGMENT_FOLD - 1) as f64;
            x.round() as i64
        })
        .collect()
}

/// Preprocess, augment tenfold by shifting, shuffle (seeded), and split
/// 8:2. Channels are mixed within the area.
pub fn build_dataset(set: &FrameSet, seed: u64) -> Result<Dataset> {
    if set.frames.is_empty() {
        return Err(Error::Dataset("no frames to build a dataset from".into()));
    }
    let shifts = augmentation_shifts(set.acoustic.signal_len);
    let mut frames = Vec::with_capacity(set.frames.len() * AUGMENT_FOLD);
    for (frame, ann) in &set.frames {
        for &shift in &shifts {
            frames.push(shift_augment(frame, ann, shift, &set.acoustic)?);
        }
    }
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.shuffle(&mut substream(seed, "shuffle", 0));
    let mut shuffled: Vec<(AModeFrame, PeakAnnotation)> = Vec::with_capacity(frames.len());
    for (new_id, &src) in order.iter().enumerate() {
        let (mut f, a) = frames[src].clone();
        f.frame_id = new_id as u32;
        shuffled.push((f, a));
    }
    let n = shuffled.len();
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let split: Vec<Split> = (0..n)
        .map(|i| if i < n_train { Split::Train } else { Split::Test })
        .collect();
    Ok(Dataset {
        acoustic: set.acoustic,
        area: set.area,
        frames: shuffled,
        split,
    })
}

/// The five loss components of one batch plus their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_dice: f64,
    pub l_ce: f64,
    pub l_dice_refined: f64,
    pub l_ce_refined: f64,
    pub l_cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.l_dice + self.l_ce + self.l_dice_refined + self.l_ce_refined + self.l_cls
    }
}

/// Graph nodes of the loss components, for backward passes.
pub struct LossNodes {
    pub l_dice: NodeId,
    pub l_ce: NodeId,
    pub l_dice_refined: NodeId,
    pub l_ce_refined: NodeId,
    pub l_cls: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |id: NodeId| g.value(id).iter().next().copied().unwrap();
        LossBreakdown {
            l_dice: v(self.l_dice),
            l_ce: v(self.l_ce),
            l_dice_refined: v(self.l_dice_refined),
            l_ce_refined: v(self.l_ce_refined),
            l_cls: v(self.l_cls),
            total: v(self.total),
        }
    }
}

/// Binary foreground mask of the annotation over the full signal.
pub fn coarse_mask(annotations: &[&PeakAnnotation], signal_len: usize) -> Array2<f64> {
    let mut mask = Array2::<f64>::zeros((annotations.len(), signal_len));
    for (i, ann) in annotations.iter().enumerate() {
        if ann.present {
            for j in ann.seg_start..=ann.seg_end.min(signal_len - 1) {
                mask[[i, j]] = 1.0;
            }
        }
    }
    mask
}

/// The annotation segment re-indexed into each proposal window; rows whose
/// window misses the peak stay all-background so the refined branch learns
/// to abstain.
pub fn refined_mask(
    annotations: &[&PeakAnnotation],
    proposals: &[RegionProposal],
    window: usize,
) -> Array2<f64> {
    let mut mask = Array2::<f64>::zeros((annotations.len(), window));
    for (i, (ann, prop)) in annotations.iter().zip(proposals).enumerate() {
        if !ann.present {
            continue;
        }
        let lo = ann.seg_start.max(prop.start);
        let hi = ann.seg_end.min(prop.start + prop.width - 1);
        if lo > hi {
            continue;
        }
        for j in lo..=hi {
            mask[[i, j - prop.start]] = 1.0;
        }
    }
    mask
}

/// Attach the total training loss (five unweighted components) to a
/// forward pass.
pub fn total_loss(
    pass: &mut BatchPass<'_>,
    annotations: &[&PeakAnnotation],
    class_labels: &[usize],
    signal_len: usize,
    eps: f64,
) -> Result<LossNodes> {
    let window = pass
        .graph
        .value(pass.refined.fg_prob)
        .shape()[1];
    let coarse_truth = coarse_mask(annotations, signal_len);
    let refined_truth = refined_mask(annotations, &pass.proposals, window);

    let g = &mut pass.graph;
    let l_dice = g.dice_loss(pass.coarse.fg_prob, coarse_truth.clone(), eps)?;
    let l_ce = g.binary_ce(pass.coarse.fg_prob, coarse_truth)?;
    let l_dice_refined = g.dice_loss(pass.refined.fg_prob, refined_truth.clone(), eps)?;
    let l_ce_refined = g.binary_ce(pass.refined.fg_prob, refined_truth)?;
    let l_cls = g.class_ce(pass.class_probs, class_labels.to_vec())?;

    let mut total = g.add(l_dice, l_ce)?;
    total = g.add(total, l_dice_refined)?;
    total = g.add(total, l_ce_refined)?;
    total = g.add(total, l_cls)?;
    Ok(LossNodes {
        l_dice,
        l_ce,
        l_dice_refined,
        l_ce_refined,
        l_cls,
        total,
    })
}

/// Scalar dice loss between a foreground probability sequence and a binary
/// mask (single signal).
pub fn dice_loss(pred: &[f64], truth: &[f64], eps: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(
        Array2::from_shape_vec((1, pred.len()), pred.to_vec())
            .expect("row shape")
            .into_dyn(),
    );
    let t = Array2::from_shape_vec((1, truth.len()), truth.to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let node = g.dice_loss(p, t, eps)?;
    Ok(g.value(node).iter().next().copied().unwrap())
}

/// Scalar binary cross-entropy between per-position probabilities and a
/// binary mask (single signal).
pub fn ce_loss(pred: &[f64], truth: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(
        Array2::from_shape_vec((1, pred.len()), pred.to_vec())
            .expect("row shape")
            .into_dyn(),
    );
    let t = Array2::from_shape_vec((1, truth.len()), truth.to_vec())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let node = g.binary_ce(p, t)?;
    Ok(g.value(node).iter().next().copied().unwrap())
}

/// Scalar classification loss for one frame's region probabilities.
pub fn cls_loss(region_probs: &[f64], true_region: usize) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.input(
        Array2::from_shape_vec((1, region_probs.len()), region_probs.to_vec())
            .expect("row shape")
            .into_dyn(),
    );
    let node = g.class_ce(p, vec![true_region])?;
    Ok(g.value(node).iter().next().copied().unwrap())
}

/// Per-epoch record of the loss log.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub losses: LossBreakdown,
    /// Mean absolute peak-index error on the held-out split, samples.
    pub val_mae_samples: f64,
}

/// Output of a training run.
pub struct TrainOutcome {
    pub log: Vec<EpochStats>,
    /// Epoch with the lowest validation MAE.
    pub best_epoch: Option<usize>,
    /// Parameters at the best epoch (by validation MAE).
    pub best_params: Option<crate::autodiff::params::ParamStore>,
}

impl TrainOutcome {
    /// Comma-separated loss log, one row per epoch.
    pub fn write_loss_log(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "epoch,l_dice,l_ce,l_dice_refined,l_ce_refined,l_cls,total"
        )?;
        for e in &self.log {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                e.epoch,
                e.losses.l_dice,
                e.losses.l_ce,
                e.losses.l_dice_refined,
                e.losses.l_ce_refined,
                e.losses.l_cls,
                e.losses.total
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean absolute peak-index error of the predictor over dataset rows.
/// Misses (truth present, no prediction) are excluded; returns the count.
pub fn peak_mae_samples(
    rows: &[PredictionRow],
    unit_mm: f64,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut misses = 0usize;
    for r in rows {
        match (r.true_depth_mm, r.bias_mm) {
            (Some(_), Some(b)) => {
                total += b / unit_mm;
                n += 1;
            }
            (Some(_), None) => misses += 1,
            _ => {}
        }
    }
    let mae = if n > 0 { total / n as f64 } else { f64::INFINITY };
    (mae, misses)
}

/// Evaluate the model on a dataset split with deterministic proposals.
pub fn evaluate_split(
    model: &CascadedModel,
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    tau: f64,
) -> Result<Vec<PredictionRow>> {
    let predictor = Predictor::new(model, dataset.acoustic, tau)?;
    let indices = dataset.indices(split);
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let frames: Vec<&AModeFrame> = chunk.iter().map(|&i| &dataset.frames[i].0).collect();
        let preds = predictor.predict_batch(&frames)?;
        for (&i, pred) in chunk.iter().zip(&preds) {
            let (frame, ann) = &dataset.frames[i];
            rows.push(PredictionRow::new(pred, ann, frame.region, 0.0));
        }
    }
    Ok(rows)
}

/// Paths for checkpoints written during training.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPaths {
    /// Final-epoch checkpoint.
    pub last: Option<PathBuf>,
    /// Checkpoint of the epoch with the lowest validation MAE.
    pub best: Option<PathBuf>,
}

/// Train in place for `cfg.epochs` epochs over the training split,
/// stochastic proposals, RMSprop updates, dropping the last partial batch
/// of each epoch. Returns the per-epoch loss log and tracks the best
/// validation MAE.
pub fn train(
    model: &mut CascadedModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    checkpoints: &CheckpointPaths,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.count(Split::Train) == 0 {
        return Err(Error::Dataset("dataset has no training split".into()));
    }
    if dataset.area != model.config.area {
        return Err(Error::Config(format!(
            "dataset area {} does not match model area {}",
            dataset.area.name(),
            model.config.area.name()
        )));
    }
    let signal_len = model.config.signal_len;
    let train_idx = dataset.indices(Split::Train);
    let mut optimizer = RmsProp::with_config(cfg.lr, 0.99, 1e-8);
    let mut sbp_rng = substream(cfg.seed, "sbp", 0);
    let mut outcome = TrainOutcome {
        log: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_params: None,
    };
    let mut best_mae = f64::INFINITY;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut substream(cfg.seed, "shuffle", epoch as u64 + 1));

        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < cfg.batch_size {
                break;
            }
            let frames: Vec<&AModeFrame> =
                chunk.iter().map(|&i| &dataset.frames[i].0).collect();
            let annotations: Vec<&PeakAnnotation> =
                chunk.iter().map(|&i| &dataset.frames[i].1).collect();
            let labels: Vec<usize> = frames.iter().map(|f| f.region.index()).collect();

            let (named_grads, losses) = {
                let mut pass =
                    model.forward_batch(&frames, ProposalMode::Stochastic, &mut sbp_rng, true)?;
                let nodes =
                    total_loss(&mut pass, &annotations, &labels, signal_len, cfg.epsilon_dice)?;
                let losses = nodes.breakdown(&pass.graph);
                if !losses.total.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch}, batch {batches}: {losses:?}"
                    )));
                }
                let grads = pass.graph.backward(nodes.total)?;
                (pass.tape_params.named_gradients(&grads), losses)
            };
            optimizer.step(&mut model.params, &named_grads).map_err(|e| {
                Error::Training(format!("epoch {epoch}, batch {batches}: {e}"))
            })?;

            sums.l_dice += losses.l_dice;
            sums.l_ce += losses.l_ce;
            sums.l_dice_refined += losses.l_dice_refined;
            sums.l_ce_refined += losses.l_ce_refined;
            sums.l_cls += losses.l_cls;
            sums.total += losses.total;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Dataset(format!(
                "training split smaller than one batch of {}",
                cfg.batch_size
            )));
        }
        let inv = 1.0 / batches as f64;
        let losses = LossBreakdown {
            l_dice: sums.l_dice * inv,
            l_ce: sums.l_ce * inv,
            l_dice_refined: sums.l_dice_refined * inv,
            l_ce_refined: sums.l_ce_refined * inv,
            l_cls: sums.l_cls * inv,
            total: sums.total * inv,
        };

        let val_rows = evaluate_split(model, dataset, Split::Test, cfg.batch_size, DEFAULT_TAU)?;
        let (val_mae, _) = peak_mae_samples(&val_rows, dataset.acoustic.depth_unit_mm());
        if val_mae < best_mae {
            best_mae = val_mae;
            outcome.best_epoch = Some(epoch);
            outcome.best_params = Some(model.params.clone());
            if let Some(path) = &checkpoints.best {
                crate::network::checkpoint::save(model, path)?;
            }
        }
        log::info!(
            "epoch {epoch}: total {:.4} (dice {:.4} ce {:.4} dice' {:.4} ce' {:.4} cls {:.4}) val MAE {:.2}",
            losses.total,
            losses.l_dice,
            losses.l_ce,
            losses.l_dice_refined,
            losses.l_ce_refined,
            losses.l_cls,
            val_mae
        );
        outcome.log.push(EpochStats {
            epoch,
            losses,
            val_mae_samples: val_mae,
        });
    }

    if let Some(path) = &checkpoints.last {
        crate::network::checkpoint::save(model, path)?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;
    use crate::signal::{Area, AcousticModel};
    use crate::synthgen::{generate_dataset, GenConfig, TissueProfile};
    use approx::assert_abs_diff_eq;

    fn tiny_frame_set(frames_per_region: usize, signal_len: usize, seed: u64) -> FrameSet {
        let acoustic = AcousticModel::with_signal_len(signal_len);
        let profiles = TissueProfile::defaults(Area::Femur, &acoustic).unwrap();
        generate_dataset(
            &profiles,
            &GenConfig {
                seed,
                frames_per_region,
                acoustic,
            },
        )
        .unwrap()
    }

    #[test]
    fn loss_wrappers_match_closed_forms() {
        // Perfect overlap.
        let mask = [0.0, 1.0, 1.0, 0.0, 0.0];
        assert!(dice_loss(&mask, &mask, 1e-6).unwrap() <= 1e-5);
        // Uniform binary prediction: ce = ln 2.
        let ce = ce_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(ce, 2.0f64.ln(), epsilon = 1e-12);
        // Uniform class prediction over three classes: ln 3.
        let third = 1.0 / 3.0;
        let cls = cls_loss(&[third, third, third], 2).unwrap();
        assert_abs_diff_eq!(cls, 3.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn augmentation_shift_values() {
        let shifts = augmentation_shifts(6760);
        assert_eq!(shifts.len(), 10);
        assert_eq!(shifts[0], -100);
        assert_eq!(shifts[9], 100);
        let mut sorted = shifts.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 10, "duplicate shifts in {shifts:?}");
        assert!(!shifts.contains(&0));

        // Small signals shrink the range to respect the shift bound.
        let small = augmentation_shifts(512);
        assert!(small.iter().all(|s| s.abs() < 512 / 10));
    }

    #[test]
    fn build_dataset_counts_and_split() {
        let set = tiny_frame_set(5, 512, 3);
        let ds = build_dataset(&set, 7).unwrap();
        assert_eq!(ds.frames.len(), set.frames.len() * AUGMENT_FOLD);
        let train = ds.count(Split::Train);
        let test = ds.count(Split::Test);
        assert_eq!(train + test, ds.frames.len());
        let ideal = ds.frames.len() as f64 * TRAIN_FRACTION;
        assert!((train as f64 - ideal).abs() <= 1.0);
        // Frame ids are re-issued sequentially.
        for (i, (f, _)) in ds.frames.iter().enumerate() {
            assert_eq!(f.frame_id, i as u32);
        }
    }

    #[test]
    fn build_dataset_is_deterministic() {
        let set = tiny_frame_set(3, 512, 3);
        let a = build_dataset(&set, 11).unwrap();
        let b = build_dataset(&set, 11).unwrap();
        for ((fa, aa), (fb, ab)) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.samples, fb.samples);
            assert_eq!(aa, ab);
        }
        assert_eq!(a.split, b.split);
        let c = build_dataset(&set, 12).unwrap();
        assert!(a
            .frames
            .iter()
            .zip(&c.frames)
            .any(|((fa, _), (fc, _))| fa.samples != fc.samples));
    }

    #[test]
    fn refined_mask_intersects_window() {
        let ann = PeakAnnotation {
            seg_start: 100,
            seg_end: 109,
            depth_mm: 0.0,
            present: true,
        };
        let prop = RegionProposal {
            start: 96,
            width: 32,
            candidate_start: 0,
            distribution: vec![1.0],
        };
        let m = refined_mask(&[&ann], &[prop.clone()], 32);
        let row: Vec<f64> = (0..32).map(|j| m[[0, j]]).collect();
        let on: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(j, _)| j)
            .collect();
        assert_eq!(on, (4..=13).collect::<Vec<_>>());

        // Window that misses the annotation entirely: all background.
        let far = RegionProposal {
            start: 400,
            width: 32,
            ..prop
        };
        let m = refined_mask(&[&ann], &[far], 32);
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn total_loss_sums_components() {
        let set = tiny_frame_set(4, 512, 5);
        let ds = build_dataset(&set, 1).unwrap();
        let model =
            CascadedModel::init(ModelConfig::for_area(Area::Femur, 512).unwrap(), 1).unwrap();
        let idx = ds.indices(Split::Train);
        let frames: Vec<&AModeFrame> = idx[..4].iter().map(|&i| &ds.frames[i].0).collect();
        let anns: Vec<&PeakAnnotation> = idx[..4].iter().map(|&i| &ds.frames[i].1).collect();
        let mut rng = substream(1, "sbp", 0);
        let mut pass = model
            .forward_batch(&frames, ProposalMode::Stochastic, &mut rng, true)
            .unwrap();
        let labels: Vec<usize> = frames.iter().map(|f| f.region.index()).collect();
        let nodes = total_loss(&mut pass, &anns, &labels, 512, 1e-6).unwrap();
        let lb = nodes.breakdown(&pass.graph);
        assert_abs_diff_eq!(lb.total, lb.component_sum(), epsilon = 1e-12);
        assert!(lb.l_dice >= 0.0 && lb.l_dice <= 1.0);
        assert!(lb.l_dice_refined >= 0.0 && lb.l_dice_refined <= 1.0);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let set = tiny_frame_set(4, 512, 6);
        let ds = build_dataset(&set, 2).unwrap();
        let mut model =
            CascadedModel::init(ModelConfig::for_area(Area::Femur, 512).unwrap(), 2).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let outcome = train(&mut model, &ds, &cfg, &CheckpointPaths::default()).unwrap();
        assert!(outcome.log.is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn loss_log_length_equals_epochs() {
        let set = tiny_frame_set(2, 512, 7);
        let ds = build_dataset(&set, 3).unwrap();
        let mut model =
            CascadedModel::init(ModelConfig::for_area(Area::Femur, 512).unwrap(), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 10,
            ..Default::default()
        };
        let outcome = train(&mut model, &ds, &cfg, &CheckpointPaths::default()).unwrap();
        assert_eq!(outcome.log.len(), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        outcome.write_loss_log(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epoch,l_dice,l_ce,"));
    }

    #[test]
    fn five_epoch_smoke_training_reduces_loss() {
        // Clean frames so the optimization signal is strong.
        let acoustic = AcousticModel::with_signal_len(512);
        let mut profiles = TissueProfile::defaults(Area::Femur, &acoustic).unwrap();
        for p in profiles.iter_mut() {
            p.noise_sigma = 10.0;
        }
        let set = generate_dataset(
            &profiles,
            &GenConfig {
                seed: 9,
                frames_per_region: 2,
                acoustic,
            },
        )
        .unwrap();
        // 6 raw frames -> 60 augmented; 48 train / 12 test.
        let ds = build_dataset(&set, 4).unwrap();
        let mut model =
            CascadedModel::init(ModelConfig::for_area(Area::Femur, 512).unwrap(), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let outcome = train(&mut model, &ds, &cfg, &CheckpointPaths::default()).unwrap();
        let totals: Vec<f64> = outcome.log.iter().map(|e| e.losses.total).collect();
        for w in totals.windows(2) {
            assert!(
                w[1] < w[0],
                "loss did not strictly decrease: {totals:?}"
            );
        }
    }
}
