mod common;

use common::*;
use dualpath::flow::FlowModel;
use dualpath::metrics::{run_control_protocol, Control, EvalArtifacts, Protocol};
use dualpath::model::*;
use dualpath::motion::*;
use dualpath::nn::{load_checkpoint, AdamConfig, AdamState};
use dualpath::objectives::*;
use dualpath::sampler::*;
use dualpath::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(mode: ControlMode) -> ModelConfig {
    ModelConfig {
        past_frames: 4,
        future_frames: 5,
        latent_dim: 3,
        hidden_dim: 6,
        mode,
        bottom_input: match mode {
            ControlMode::PartialBodyControl => BottomInput::Part1,
            ControlMode::EndPoseControl => BottomInput::Aux,
        },
        ..ModelConfig::default()
    }
}

fn walker_examples(n: usize, seed: u64) -> Vec<Example> {
    generate_synthetic_dataset(&Skeleton::walker(), n, 4, 5, &GaitConfigSampler::default(), seed)
        .unwrap()
        .iter()
        .map(Example::from)
        .collect()
}

fn schedule(epochs: usize) -> TrainSchedule {
    TrainSchedule {
        epochs,
        batch_size: 4,
        adam: AdamConfig::with_lr(3e-3),
        seed: 21,
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let data = walker_examples(10, 1);
    let run = |epochs: usize| {
        let mut m = DualPathCvae::new(small_config(ControlMode::PartialBodyControl), 5).unwrap();
        let mut opt = AdamState::for_store(&m.store);
        let log = train_model(&mut m, &mut opt, &data, &schedule(epochs), 0, |_, _, _, _| Ok(())).unwrap();
        (m, opt, log)
    };
    let (full, full_opt, full_log) = run(3);
    let (again, _, again_log) = run(3);
    assert_eq!(full.store, again.store);
    assert_eq!(full_log, again_log);
    assert!(full_log[2].total < full_log[0].total);

    let (part, part_opt, part_log) = run(2);
    let dir = tempfile::tempdir().unwrap();
    part.save(dir.path(), Some(&part_opt), Default::default()).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    let mut resumed = DualPathCvae::from_checkpoint(&ck).unwrap();
    let mut opt = ck.optimizer.clone().unwrap();
    assert_eq!(resumed.store, part.store);
    assert_eq!(opt, part_opt);
    let tail = train_model(&mut resumed, &mut opt, &data, &schedule(3), 2, |_, _, _, _| Ok(())).unwrap();
    assert_eq!(resumed.store, full.store);
    assert_eq!(opt, full_opt);
    assert_eq!([part_log, tail].concat(), full_log);
}

#[test]
fn zero_epochs_leave_parameters() {
    let data = walker_examples(4, 2);
    let mut m = DualPathCvae::new(small_config(ControlMode::EndPoseControl), 5).unwrap();
    let before = m.store.clone();
    let mut opt = AdamState::for_store(&m.store);
    let log = train_model(&mut m, &mut opt, &data, &schedule(0), 0, |_, _, _, _| Ok(())).unwrap();
    assert!(log.is_empty());
    assert_eq!(m.store, before);
}

#[test]
fn non_finite_data_aborts() {
    let mut data = walker_examples(4, 3);
    data[1].future = Matrix::from_vec(5, 36, vec![f64::NAN; 180]).unwrap();
    let mut m = DualPathCvae::new(small_config(ControlMode::PartialBodyControl), 5).unwrap();
    let mut opt = AdamState::for_store(&m.store);
    let err = train_model(&mut m, &mut opt, &data, &schedule(1), 0, |_, _, _, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
}

#[test]
fn end_pose_model_trains_on_aux_sequences() {
    let data = walker_examples(6, 4);
    let mut m = DualPathCvae::new(small_config(ControlMode::EndPoseControl), 5).unwrap();
    assert_eq!(m.config.bottom_dim(), 36);
    let aux = m.bottom_target(&data[0].future).unwrap();
    assert_eq!(aux.row(0), data[0].future.row(0));
    assert_eq!(aux.row(4), data[0].future.row(4));
    let mut opt = AdamState::for_store(&m.store);
    let log = train_model(&mut m, &mut opt, &data, &schedule(2), 0, |_, _, _, _| Ok(())).unwrap();
    assert!(log.iter().all(|l| l.total.is_finite()));
}

/// Zeroes the columns of the top decoder-init layer that read `z_t`, so the
/// full-body decoder ignores `z_t`.
fn ignore_top_latent(m: &mut DualPathCvae) {
    let (h, dz) = (m.config.hidden_dim, m.config.latent_dim);
    let id = m.store.id("top.decoder_init.weight").unwrap();
    let cols = h + 2 * dz;
    let w = m.store.get_mut(id);
    for r in 0..h {
        for c in h..h + dz {
            w[r * cols + c] = 0.0;
        }
    }
}

#[test]
fn generation_controls() {
    let data = walker_examples(3, 5);
    let mut m = DualPathCvae::new(small_config(ControlMode::PartialBodyControl), 5).unwrap();
    let c = &data[0].past;
    let zt = m.prior_top(c).unwrap().sample(&mut ChaCha8Rng::seed_from_u64(1));
    let zb = m.prior_bottom(c).unwrap().sample(&mut ChaCha8Rng::seed_from_u64(2));
    let both = m
        .generate_controlled(c, &LatentSource::Fixed(zt.clone()), &LatentSource::Fixed(zb.clone()), 4, 9)
        .unwrap();
    assert!(both.windows(2).all(|w| w[0] == w[1]));
    let varied = m
        .generate_controlled(c, &LatentSource::PriorSample, &LatentSource::PriorSample, 4, 9)
        .unwrap();
    assert!(varied[0] != varied[1]);
    assert_eq!(
        varied,
        m.generate_controlled(c, &LatentSource::PriorSample, &LatentSource::PriorSample, 4, 9)
            .unwrap()
    );

    ignore_top_latent(&mut m);
    let fixed_zb = m
        .generate_controlled(c, &LatentSource::PriorSample, &LatentSource::Fixed(zb), 4, 3)
        .unwrap();
    let cols = m.config.split.columns(Part::Part1);
    let p1: Vec<Matrix> = fixed_zb.iter().map(|s| s.select_columns(&cols)).collect();
    assert!(p1.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn protocol_reports() {
    let data = walker_examples(4, 6);
    let sk = Skeleton::walker();
    let mut m = DualPathCvae::new(small_config(ControlMode::PartialBodyControl), 5).unwrap();
    let flow = FlowModel::new(36, 2, 1).unwrap();
    let art = EvalArtifacts {
        model: &m,
        sampler: None,
        flow: Some(&flow),
        skeleton: &sk,
    };
    let r = run_control_protocol(&art, &data, Protocol::RandomSampling, Control::None, 6, 3).unwrap();
    assert_eq!(r, run_control_protocol(&art, &data, Protocol::RandomSampling, Control::None, 6, 3).unwrap());
    assert!(r.mpd <= r.apd_full);
    assert!(r.apd_part1 > 0.0 && r.apd_part2 > 0.0 && r.nll.is_some());
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    for key in ["protocol", "control", "K", "apd_full", "apd_part1", "apd_part2", "mpd", "nll"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["protocol"], "random_sampling");
    assert!(r.to_text().contains("APD(part1)"));

    assert!(run_control_protocol(&art, &data, Protocol::DiversitySampling, Control::FixZb, 10, 3).is_err());
    assert!(run_control_protocol(&art, &data, Protocol::RandomSampling, Control::EndPose, 10, 3).is_err());
    assert!(run_control_protocol(&art, &[], Protocol::RandomSampling, Control::None, 10, 3).is_err());

    ignore_top_latent(&mut m);
    let spec = SamplerSpec {
        k: 5,
        condition_dim: 36,
        latent_dim: 3,
        hidden_dim: 4,
    };
    let heads = SamplerHeads::new(spec, 2).unwrap();
    let art = EvalArtifacts {
        model: &m,
        sampler: Some(&heads),
        flow: None,
        skeleton: &sk,
    };
    let r = run_control_protocol(&art, &data, Protocol::DiversitySampling, Control::FixZb, 5, 3).unwrap();
    assert_eq!(r.apd_full, 0.0);
    assert!(r.nll.is_none());
    assert!(run_control_protocol(&art, &data, Protocol::DiversitySampling, Control::FixZb, 6, 3).is_err());
}

#[test]
fn sampler_training_keeps_prerequisites_frozen() {
    let data = walker_examples(6, 7);
    let sk = Skeleton::walker();
    let model = DualPathCvae::new(small_config(ControlMode::PartialBodyControl), 5).unwrap();
    let flow = FlowModel::new(36, 2, 1).unwrap();
    let (model_sum, flow_sum) = (model.store.checksum(), flow.store.checksum());
    let spec = SamplerSpec {
        k: 3,
        condition_dim: 36,
        latent_dim: 3,
        hidden_dim: 4,
    };
    let target = SamplerTarget {
        model: &model,
        flow: Some(&flow),
        skeleton: &sk,
    };
    let w = SamplerLossWeights::default();
    let run = |epochs: usize| {
        let mut heads = SamplerHeads::new(spec, 2).unwrap();
        let mut opt = AdamState::for_store(&heads.store);
        let log = train_sampler(&mut heads, &mut opt, target, &data, &w, &schedule(epochs), 0, |_, _, _, _| Ok(())).unwrap();
        (heads, log)
    };
    let (fresh, log0) = run(0);
    assert!(log0.is_empty());
    assert_eq!(fresh.store, SamplerHeads::new(spec, 2).unwrap().store);
    let (a, log_a) = run(3);
    let (b, log_b) = run(3);
    assert_eq!(a.store, b.store);
    assert_eq!(log_a, log_b);
    assert!(a.store != fresh.store);
    assert!(log_a[2].total < log_a[0].total, "{log_a:?}");
    assert_eq!(model.store.checksum(), model_sum);
    assert_eq!(flow.store.checksum(), flow_sum);

    let zb = frozen_bottom_latents(&model, &data, 21).unwrap();
    assert_eq!(zb, frozen_bottom_latents(&model, &data, 21).unwrap());
    let wrong = SamplerSpec {
        latent_dim: 4,
        ..spec
    };
    let mut heads = SamplerHeads::new(wrong, 2).unwrap();
    let mut opt = AdamState::for_store(&heads.store);
    assert!(train_sampler(&mut heads, &mut opt, target, &data, &w, &schedule(1), 0, |_, _, _, _| Ok(())).is_err());
}

#[test]
fn map_noise_is_affine() {
    let spec = SamplerSpec {
        k: 4,
        condition_dim: 6,
        latent_dim: 3,
        hidden_dim: 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let heads = SamplerHeads::new(spec, 1).unwrap();
    let c = random_matrix(&mut rng, 3, 6, 1.0);
    let e1 = random_vec(&mut rng, 3, 1.0);
    let e2 = random_vec(&mut rng, 3, 1.0);
    let z0 = heads.map_noise(&c, &[0.0; 3]).unwrap();
    let z1 = heads.map_noise(&c, &e1).unwrap();
    let z2 = heads.map_noise(&c, &e2).unwrap();
    let mix: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
    let zm = heads.map_noise(&c, &mix).unwrap();
    let ab = heads.heads(&c).unwrap();
    for k in 0..4 {
        assert_eq!(z0[k], ab[k].1);
        for i in 0..3 {
            let want = z0[k][i] + 2.0 * (z1[k][i] - z0[k][i]) - 0.5 * (z2[k][i] - z0[k][i]);
            assert!((zm[k][i] - want).abs() < 1e-12);
        }
    }
    assert!(heads.map_noise(&c, &[0.0; 2]).is_err());
}
