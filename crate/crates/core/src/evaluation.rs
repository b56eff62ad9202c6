//! Metrics, latency benchmarking, outlier reporting, and report emission.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::inference::{PredictionRow, Predictor};
use crate::network::CascadedModel;
use crate::signal::{AModeFrame, AcousticModel, Area, RegionLabel};

/// Bias statistics of one region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    pub region: RegionLabel,
    /// Frames with both a true and a predicted depth.
    pub evaluated: usize,
    /// Frames with a true peak the detector did not report.
    pub missed: usize,
    pub bias_mean_mm: f64,
    /// Population standard deviation of the absolute bias.
    pub bias_std_mm: f64,
    /// Percentage of evaluated frames with bias below one millimetre.
    pub pct_sub_mm: f64,
}

/// Latency of one execution mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeLatency {
    pub mean_ms: f64,
    pub p95_ms: f64,
}

/// Wall-clock inference cost per batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyStats {
    pub batch_size: usize,
    pub reps: usize,
    pub single_thread: ModeLatency,
    pub multi_thread: ModeLatency,
    pub threads: usize,
}

/// Everything the evaluation harness reports for one run.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub area: Area,
    pub per_region: Vec<RegionStats>,
    pub classification_accuracy: f64,
    /// Rows are true regions, columns predicted regions.
    pub confusion: Vec<Vec<usize>>,
    pub latency: Option<LatencyStats>,
    /// Frames whose bias exceeds mean + 3 std, with their bias.
    pub outliers: Vec<(u32, f64)>,
    /// Bias per evaluated frame, ordered by frame id.
    pub bias_series: Vec<(u32, f64)>,
}

/// Per-region absolute-bias statistics. Frames where the detector abstained
/// but a peak exists count as misses and stay out of the averages.
pub fn bias_stats(rows: &[PredictionRow], area: Area) -> Result<Vec<RegionStats>> {
    if !rows.iter().any(|r| r.bias_mm.is_some()) {
        return Err(Error::Evaluation(
            "no matched frames: every prediction missed or lacked ground truth".into(),
        ));
    }
    let mut grouped: BTreeMap<u16, (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let entry = grouped
            .entry(r.true_region.channel())
            .or_insert_with(|| (Vec::new(), 0));
        match (r.true_depth_mm, r.bias_mm) {
            (Some(_), Some(b)) => entry.0.push(b),
            (Some(_), None) => entry.1 += 1,
            _ => {}
        }
    }
    let mut out = Vec::new();
    for (channel, (biases, missed)) in grouped {
        let region = RegionLabel::new(area, channel)?;
        let n = biases.len();
        let (mean, std, sub_mm) = if n > 0 {
            let mean = biases.iter().sum::<f64>() / n as f64;
            let var = biases.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / n as f64;
            let sub = biases.iter().filter(|&&b| b < 1.0).count() as f64 / n as f64 * 100.0;
            (mean, var.sqrt(), sub)
        } else {
            (f64::NAN, f64::NAN, 0.0)
        };
        out.push(RegionStats {
            region,
            evaluated: n,
            missed,
            bias_mean_mm: mean,
            bias_std_mm: std,
            pct_sub_mm: sub_mm,
        });
    }
    Ok(out)
}

/// Accuracy and the true-by-predicted confusion matrix.
pub fn classification_metrics(rows: &[PredictionRow], area: Area) -> Result<(f64, Vec<Vec<usize>>)> {
    if rows.is_empty() {
        return Err(Error::Evaluation("no predictions to score".into()));
    }
    let k = area.region_count();
    let mut confusion = vec![vec![0usize; k]; k];
    for r in rows {
        if r.true_region.area() != area || r.pred_region.area() != area {
            return Err(Error::Evaluation(format!(
                "row {} carries labels outside the {} region set",
                r.frame_id,
                area.name()
            )));
        }
        confusion[r.true_region.index()][r.pred_region.index()] += 1;
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    Ok((correct as f64 / rows.len() as f64, confusion))
}

fn percentile_95(sorted_ms: &[f64]) -> f64 {
    let idx = ((sorted_ms.len() as f64) * 0.95).ceil() as usize;
    sorted_ms[idx.saturating_sub(1).min(sorted_ms.len() - 1)]
}

/// Benchmark batched inference, single-threaded and with the batch split
/// across threads. Five warm-up batches precede `reps >= 30` timed ones.
pub fn latency_bench(
    model: &CascadedModel,
    acoustic: &AcousticModel,
    frames: &[&AModeFrame],
    batch_size: usize,
    reps: usize,
) -> Result<LatencyStats> {
    if reps < 30 {
        return Err(Error::Parameter(format!(
            "need at least 30 timed repetitions, got {reps}"
        )));
    }
    if frames.len() < batch_size || batch_size == 0 {
        return Err(Error::Parameter(format!(
            "need at least one batch of {batch_size} frames, got {}",
            frames.len()
        )));
    }
    let predictor = Predictor::new(model, *acoustic, crate::inference::DEFAULT_TAU)?;
    let batches: Vec<&[&AModeFrame]> = frames.chunks_exact(batch_size).collect();
    let batch_at = |i: usize| batches[i % batches.len()];

    for i in 0..5 {
        predictor.predict_batch(batch_at(i))?;
    }
    let mut single = Vec::with_capacity(reps);
    for i in 0..reps {
        let t = Instant::now();
        predictor.predict_batch(batch_at(i))?;
        single.push(t.elapsed().as_secs_f64() * 1000.0);
    }

    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(batch_size)
        .max(1);
    let mut multi = Vec::with_capacity(reps);
    for i in 0..reps {
        let batch = batch_at(i);
        let chunk = batch.len().div_ceil(threads);
        let t = Instant::now();
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for part in batch.chunks(chunk) {
                let predictor = &predictor;
                handles.push(scope.spawn(move || predictor.predict_batch(part)));
            }
            for h in handles {
                h.join().map_err(|_| {
                    Error::Evaluation("worker thread panicked during benchmark".into())
                })??;
            }
            Ok(())
        })?;
        multi.push(t.elapsed().as_secs_f64() * 1000.0);
    }

    let stats = |mut v: Vec<f64>| -> ModeLatency {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ModeLatency {
            mean_ms: mean,
            p95_ms: percentile_95(&v),
        }
    };
    Ok(LatencyStats {
        batch_size,
        reps,
        single_thread: stats(single),
        multi_thread: stats(multi),
        threads,
    })
}

/// Assemble the full report from prediction rows.
pub fn build_report(
    rows: &[PredictionRow],
    area: Area,
    latency: Option<LatencyStats>,
) -> Result<EvalReport> {
    let per_region = bias_stats(rows, area)?;
    let (accuracy, confusion) = classification_metrics(rows, area)?;

    let mut series: Vec<(u32, f64)> = rows
        .iter()
        .filter_map(|r| r.bias_mm.map(|b| (r.frame_id, b)))
        .collect();
    series.sort_by_key(|&(id, _)| id);
    let n = series.len() as f64;
    let mean = series.iter().map(|&(_, b)| b).sum::<f64>() / n;
    let std =
        (series.iter().map(|&(_, b)| (b - mean) * (b - mean)).sum::<f64>() / n).sqrt();
    let threshold = mean + 3.0 * std;
    let outliers: Vec<(u32, f64)> = series
        .iter()
        .copied()
        .filter(|&(_, b)| b > threshold)
        .collect();

    Ok(EvalReport {
        area,
        per_region,
        classification_accuracy: accuracy,
        confusion,
        latency,
        outliers,
        bias_series: series,
    })
}

impl EvalReport {
    /// Structured text with fixed key names.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("area={}\n", self.area.name()));
        let evaluated: usize = self.per_region.iter().map(|r| r.evaluated).sum();
        let missed: usize = self.per_region.iter().map(|r| r.missed).sum();
        out.push_str(&format!("frames_evaluated={evaluated}\n"));
        out.push_str(&format!("frames_missed={missed}\n"));
        out.push_str(&format!(
            "accuracy={:.6}\n",
            self.classification_accuracy
        ));
        for r in &self.per_region {
            out.push_str(&format!(
                "[region {} channel={}]\n",
                r.region.name(),
                r.region.channel()
            ));
            out.push_str(&format!("evaluated={}\n", r.evaluated));
            out.push_str(&format!("missed={}\n", r.missed));
            out.push_str(&format!("bias_mean_mm={:.6}\n", r.bias_mean_mm));
            out.push_str(&format!("bias_std_mm={:.6}\n", r.bias_std_mm));
            out.push_str(&format!("pct_sub_mm={:.6}\n", r.pct_sub_mm));
        }
        out.push_str("[confusion rows=true cols=predicted]\n");
        for (i, row) in self.confusion.iter().enumerate() {
            let region = RegionLabel::from_index(self.area, i).expect("index in range");
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("{},{}\n", region.name(), cells.join(",")));
        }
        if let Some(lat) = &self.latency {
            out.push_str("[latency]\n");
            out.push_str(&format!("batch_size={}\n", lat.batch_size));
            out.push_str(&format!("reps={}\n", lat.reps));
            out.push_str(&format!(
                "latency_ms_mean={:.6}\n",
                lat.single_thread.mean_ms
            ));
            out.push_str(&format!("latency_ms_p95={:.6}\n", lat.single_thread.p95_ms));
            out.push_str(&format!("threads={}\n", lat.threads));
            out.push_str(&format!(
                "latency_ms_mean_threaded={:.6}\n",
                lat.multi_thread.mean_ms
            ));
            out.push_str(&format!(
                "latency_ms_p95_threaded={:.6}\n",
                lat.multi_thread.p95_ms
            ));
        }
        out.push_str("[outliers bias>mean+3std]\n");
        for (id, bias) in &self.outliers {
            out.push_str(&format!("frame_id={id},bias_mm={bias:.6}\n"));
        }
        out
    }

    /// Write the report and the per-frame bias series.
    pub fn emit(&self, report_path: &Path, series_path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(report_path)?);
        w.write_all(self.render().as_bytes())?;
        w.flush()?;

        let mut w = BufWriter::new(std::fs::File::create(series_path)?);
        writeln!(w, "frame_id,bias_mm")?;
        for (id, bias) in &self.bias_series {
            writeln!(w, "{id},{bias:.6}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Side-by-side comparison of the learned detector and the windowed-argmax
/// baseline, one row per channel.
pub fn comparison_table(
    model_rows: &[PredictionRow],
    baseline_rows: &[PredictionRow],
    area: Area,
) -> Result<String> {
    let model_stats = bias_stats(model_rows, area)?;
    let baseline_stats = bias_stats(baseline_rows, area)?;
    let mut out = String::new();
    out.push_str("area,channel,region,traditional_mm,cascaded_mm,pct_sub_mm\n");
    for m in &model_stats {
        let b = baseline_stats
            .iter()
            .find(|b| b.region == m.region)
            .ok_or_else(|| {
                Error::Evaluation(format!("baseline lacks rows for {}", m.region))
            })?;
        out.push_str(&format!(
            "{},{},{},{:.3} +/- {:.3},{:.3} +/- {:.3},{:.1}%\n",
            area.name(),
            m.region.channel(),
            m.region.name(),
            b.bias_mean_mm,
            b.bias_std_mm,
            m.bias_mean_mm,
            m.bias_std_mm,
            m.pct_sub_mm
        ));
    }
    Ok(out)
}
