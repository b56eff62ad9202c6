use approx::assert_abs_diff_eq;
use ndarray::Ix2;

use super::proposal::ProposalMode;
use super::*;
use crate::autodiff::Graph;
use crate::signal::{preprocess_frame, AcousticModel, RegionLabel};
use crate::synthgen::{generate_frame, TissueProfile};

fn desk_config() -> ModelConfig {
    ModelConfig::for_area(Area::Femur, 2048).unwrap()
}

fn random_frames(n: usize, signal_len: usize, seed: u64) -> Vec<AModeFrame> {
    use rand::Rng;
    let region = RegionLabel::new(Area::Femur, 11).unwrap();
    (0..n)
        .map(|i| {
            let mut rng = substream(seed, "frames", i as u64);
            let raw: Vec<f64> = (0..signal_len).map(|_| rng.gen_range(0.0..4500.0)).collect();
            preprocess_frame(&raw, region, i as u32, signal_len).unwrap()
        })
        .collect()
}

#[test]
fn default_window_sizes() {
    assert_eq!(default_window(6760), 512);
    assert_eq!(default_window(2048), 160);
    assert_eq!(default_window(512), 32);
}

#[test]
fn config_validation() {
    assert!(UNetConfig::new(vec![8, 16, 32, 64], 5, 2048).is_err());
    assert!(UNetConfig::new(vec![8, 16, 32, 64, 128], 4, 2048).is_err());
    assert!(UNetConfig::new(vec![8, 16, 32, 64, 128], 5, 2049).is_err());
    let cfg = desk_config();
    assert_eq!(cfg.unet.input_len, 2048);
    assert_eq!(cfg.proposal.window_len, 160);
    assert_eq!(cfg.classes(), 3);

    // Full-length frames are padded up to a multiple of 16.
    let full = ModelConfig::for_area(Area::Femur, 6760).unwrap();
    assert_eq!(full.unet.input_len, 6768);
    assert_eq!(full.proposal.window_len, 512);
}

#[test]
fn init_creates_expected_parameters() {
    let model = CascadedModel::init(desk_config(), 7).unwrap();
    model.validate_params().unwrap();
    // Biases start at zero, weights do not.
    assert!(model
        .params
        .get("coarse.head.b")
        .unwrap()
        .iter()
        .all(|&v| v == 0.0));
    assert!(model
        .params
        .get("cls.fc2.w")
        .unwrap()
        .iter()
        .any(|&v| v != 0.0));
    // Same seed, same weights.
    let again = CascadedModel::init(desk_config(), 7).unwrap();
    assert_eq!(model.params, again.params);
}

#[test]
fn coarse_forward_shapes_and_probabilities() {
    let model = CascadedModel::init(desk_config(), 1).unwrap();
    let frames = random_frames(2, 2048, 5);
    let refs: Vec<&AModeFrame> = frames.iter().collect();
    let mut rng = substream(1, "sbp", 0);
    let pass = model
        .forward_batch(&refs, ProposalMode::Deterministic, &mut rng, false)
        .unwrap();

    let fg = pass.graph.value(pass.coarse.fg_prob);
    assert_eq!(fg.shape(), &[2, 2048]);
    for &p in fg.iter() {
        assert!(p > 0.0 && p < 1.0, "probability {p} outside (0,1)");
    }

    let cls = pass.graph.value(pass.class_probs);
    assert_eq!(cls.shape(), &[2, 3]);
    for row in cls.view().into_dimensionality::<Ix2>().unwrap().outer_iter() {
        assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
        for &p in row.iter() {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    let refined = pass.graph.value(pass.refined.fg_prob);
    assert_eq!(refined.shape(), &[2, 160]);
    assert!(refined.iter().all(|p| p.is_finite()));
}

#[test]
fn forward_is_finite_on_many_random_frames() {
    let model = CascadedModel::init(desk_config(), 2).unwrap();
    let frames = random_frames(100, 2048, 17);
    let mut rng = substream(2, "sbp", 0);
    for chunk in frames.chunks(20) {
        let refs: Vec<&AModeFrame> = chunk.iter().collect();
        let pass = model
            .forward_batch(&refs, ProposalMode::Deterministic, &mut rng, false)
            .unwrap();
        assert!(pass
            .graph
            .value(pass.coarse.fg_prob)
            .iter()
            .all(|p| p.is_finite()));
        assert!(pass
            .graph
            .value(pass.refined.fg_prob)
            .iter()
            .all(|p| p.is_finite()));
        assert!(pass
            .graph
            .value(pass.class_probs)
            .iter()
            .all(|p| p.is_finite()));
    }
}

#[test]
fn attention_gate_bounded_and_shape_preserving() {
    let model = CascadedModel::init(desk_config(), 3).unwrap();
    let mut g = Graph::new();
    let mut tp = TapeParams::new(&model.params);
    use super::attention_gate;
    use crate::autodiff::gradcheck::random_tensor;
    let mut rng = substream(3, "att", 0);
    let enc_arr = random_tensor(&[2, 8, 32], &mut rng, -1.0, 1.0);
    let up_arr = random_tensor(&[2, 16, 32], &mut rng, -1.0, 1.0);
    let enc = g.input(enc_arr.clone());
    let up = g.input(up_arr);
    let out = attention_gate(&mut g, &mut tp, "coarse.att0", enc, up).unwrap();
    assert_eq!(g.value(out).shape(), &[2, 8, 32]);
    // output = enc * gate with gate in (0,1): |out| < |enc| and same sign.
    for (&o, &e) in g.value(out).iter().zip(enc_arr.iter()) {
        if e != 0.0 {
            let gate = o / e;
            assert!(gate > 0.0 && gate < 1.0, "gate {gate} outside (0,1)");
        }
    }
}

#[test]
fn region_crop_widths_and_content() {
    let model = CascadedModel::init(desk_config(), 4).unwrap();
    let frames = random_frames(2, 2048, 23);
    let refs: Vec<&AModeFrame> = frames.iter().collect();
    let mut rng = substream(4, "sbp", 0);
    let mut pass = model
        .forward_batch(&refs, ProposalMode::Deterministic, &mut rng, false)
        .unwrap();

    let w = model.config.proposal.window_len;
    for layer in 0..UNET_DEPTH {
        let crop = model
            .region_crop(
                &mut pass.graph,
                &pass.coarse.dec_feats,
                &pass.proposals,
                layer,
            )
            .unwrap();
        let shape = pass.graph.value(crop).shape().to_vec();
        assert_eq!(shape[2], w >> layer, "layer {layer}");

        // Crop content equals the slice of the full feature tensor.
        let full = pass.graph.value(pass.coarse.dec_feats[layer]).clone();
        let cropped = pass.graph.value(crop);
        for (i, p) in pass.proposals.iter().enumerate() {
            let start = p.start >> layer;
            for c in 0..shape[1] {
                for j in 0..shape[2] {
                    assert_eq!(cropped[[i, c, j]], full[[i, c, start + j]]);
                }
            }
        }
    }
    assert!(model
        .region_crop(&mut pass.graph, &pass.coarse.dec_feats, &pass.proposals, 9)
        .is_err());
}

#[test]
fn deterministic_inference_is_bit_identical() {
    let model = CascadedModel::init(desk_config(), 5).unwrap();
    let frames = random_frames(3, 2048, 31);
    let refs: Vec<&AModeFrame> = frames.iter().collect();
    let mut rng1 = substream(5, "sbp", 0);
    let mut rng2 = substream(99, "sbp", 7);
    let p1 = model
        .forward_batch(&refs, ProposalMode::Deterministic, &mut rng1, false)
        .unwrap();
    let p2 = model
        .forward_batch(&refs, ProposalMode::Deterministic, &mut rng2, false)
        .unwrap();
    assert_eq!(
        p1.graph.value(p1.refined.fg_prob),
        p2.graph.value(p2.refined.fg_prob)
    );
    assert_eq!(
        p1.graph.value(p1.class_probs),
        p2.graph.value(p2.class_probs)
    );
    assert_eq!(p1.proposals, p2.proposals);
}

#[test]
fn full_length_batch_forward_is_finite() {
    let model = CascadedModel::init(ModelConfig::for_area(Area::Femur, 6760).unwrap(), 6).unwrap();
    let ac = AcousticModel::full_length();
    let profiles = TissueProfile::defaults(Area::Femur, &ac).unwrap();
    let frames: Vec<AModeFrame> = (0..10)
        .map(|i| {
            let mut rng = substream(40, "dataset", i);
            generate_frame(&profiles[i as usize % 3], &mut rng, &ac, i as u32)
                .unwrap()
                .0
        })
        .collect();
    let refs: Vec<&AModeFrame> = frames.iter().collect();
    let mut rng = substream(6, "sbp", 0);
    let pass = model
        .forward_batch(&refs, ProposalMode::Deterministic, &mut rng, false)
        .unwrap();
    for id in [pass.coarse.fg_prob, pass.refined.fg_prob, pass.class_probs] {
        assert!(pass.graph.value(id).iter().all(|v| v.is_finite()));
    }
    assert_eq!(pass.graph.value(pass.coarse.fg_prob).shape(), &[10, 6760]);
    // Every proposal window fits inside the true signal.
    for p in &pass.proposals {
        assert!(p.start + p.width <= 6760);
    }
}

#[test]
fn checkpoint_roundtrip_is_exact_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = CascadedModel::init(desk_config(), 7).unwrap();

    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    checkpoint::save(&model, &p1).unwrap();
    checkpoint::save(&model, &p2).unwrap();
    let bytes1 = std::fs::read(&p1).unwrap();
    let bytes2 = std::fs::read(&p2).unwrap();
    assert_eq!(bytes1, bytes2);

    let back = checkpoint::load(&p1).unwrap();
    assert_eq!(back.config, model.config);
    // Values pass through f32, so saving again must be byte-identical.
    let p3 = dir.path().join("c.ckpt");
    checkpoint::save(&back, &p3).unwrap();
    assert_eq!(std::fs::read(&p3).unwrap(), bytes1);
}

#[test]
fn frames_from_wrong_area_rejected() {
    let model = CascadedModel::init(desk_config(), 8).unwrap();
    let region = RegionLabel::new(Area::Tibia, 16).unwrap();
    let frame = preprocess_frame(&vec![0.0; 2048], region, 0, 2048).unwrap();
    assert!(model.frames_to_input(&[&frame]).is_err());
}
