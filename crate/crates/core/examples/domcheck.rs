use bonetrack::signal::{AcousticModel, Area};
use bonetrack::synthgen::{generate_dataset, global_argmax, GenConfig, TissueProfile};

fn main() {
    let acoustic = AcousticModel::with_signal_len(2048);
    let profiles = TissueProfile::defaults(Area::Femur, &acoustic).unwrap();
    let set = generate_dataset(&profiles, &GenConfig { seed: 7, frames_per_region: 200, acoustic }).unwrap();
    let mut dom = [0usize; 3];
    let mut tot = [0usize; 3];
    for (f, a) in &set.frames {
        if !a.present { continue; }
        let r = f.region.index();
        tot[r] += 1;
        let am = global_argmax(&f.samples);
        if am < a.seg_start || am > a.seg_end { dom[r] += 1; }
    }
    for r in 0..3 {
        println!("region {}: dominance {:.2}", r, dom[r] as f64 / tot[r] as f64);
    }
    let d: usize = dom.iter().sum();
    let t: usize = tot.iter().sum();
    println!("overall {:.3}", d as f64 / t as f64);
}
