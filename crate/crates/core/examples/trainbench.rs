use bonetrack::network::{CascadedModel, ModelConfig};
use bonetrack::signal::{AcousticModel, Area, Split};
use bonetrack::synthgen::{generate_dataset, GenConfig, TissueProfile};
use bonetrack::training::{build_dataset, peak_mae_samples, train, evaluate_split, CheckpointPaths, TrainConfig};
use std::time::Instant;

fn main() {
    let acoustic = AcousticModel::with_signal_len(2048);
    let profiles = TissueProfile::defaults(Area::Femur, &acoustic).unwrap();
    let set = generate_dataset(&profiles, &GenConfig { seed: 7, frames_per_region: 25, acoustic }).unwrap();
    let ds = build_dataset(&set, 7).unwrap();
    println!("train {} test {}", ds.count(Split::Train), ds.count(Split::Test));
    let mut model = CascadedModel::init(ModelConfig::for_area(Area::Femur, 2048).unwrap(), 7).unwrap();
    let cfg = TrainConfig { epochs: 50, seed: 7, ..Default::default() };
    let t = Instant::now();
    let outcome = train(&mut model, &ds, &cfg, &CheckpointPaths::default()).unwrap();
    println!("trained in {:.1} s", t.elapsed().as_secs_f64());
    for e in outcome.log.iter().step_by(5).chain(outcome.log.last()) {
        println!(
            "epoch {:2}  dice {:.4}  ce {:.4}  dice' {:.4}  ce' {:.4}  cls {:.4}  total {:.4}  valMAE {:.2}",
            e.epoch, e.losses.l_dice, e.losses.l_ce, e.losses.l_dice_refined,
            e.losses.l_ce_refined, e.losses.l_cls, e.losses.total, e.val_mae_samples
        );
    }
    let rows = evaluate_split(&model, &ds, Split::Test, 10, 0.5).unwrap();
    let (mae, misses) = peak_mae_samples(&rows, ds.acoustic.depth_unit_mm());
    let acc = rows.iter().filter(|r| r.pred_region == r.true_region).count() as f64 / rows.len() as f64;
    println!("final: MAE {mae:.2} samples, misses {misses}, accuracy {acc:.3}");
}
