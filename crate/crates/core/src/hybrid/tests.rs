use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::complex::CVar;
use crate::dsp::{mix, stft_var, synthetic_speech, AudioClip, MixSpec, NoiseKind, NoiseSource, Pair};
use crate::gradcheck::{gradcheck_with, GradcheckOptions};
use crate::params::{gradcheck_module, Ctx, ParamStore};
use crate::tensor::Tensor;
use crate::Error;

fn tiny() -> ModelConfig {
    let mut c = ModelConfig::tiny();
    c.train.batch_size = 2;
    c.train.epochs = 2;
    c.train.validation_fraction = 0.0;
    c
}

fn randv(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn pair(len: usize, seed: u64) -> Pair {
    let clean = synthetic_speech(len, 16000, seed);
    let spec = MixSpec {
        snr_db: 5.0,
        noise: NoiseSource::Synthetic(NoiseKind::White),
        seed: seed + 1000,
    };
    let (noisy, noise) = mix(&clean, &spec).unwrap();
    Pair {
        name: format!("clip{seed}"),
        clean,
        noisy,
        noise,
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[test]
fn loss_tf_single_bin() {
    let tape = Tape::new();
    let clean = CVar::new(tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap()), tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap())).unwrap();
    let est = CVar::new(tape.constant(Tensor::zeros([2, 2])), tape.constant(Tensor::zeros([2, 2]))).unwrap();
    assert_eq!(loss_tf(&clean, &est).unwrap().item(), 2.0 / 4.0);
    assert_eq!(loss_tf(&clean, &clean).unwrap().item(), 0.0);
    let other = CVar::new(tape.constant(Tensor::zeros([1, 4])), tape.constant(Tensor::zeros([1, 4]))).unwrap();
    assert!(matches!(loss_tf(&clean, &other), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn loss_tf_ignores_part_signs() {
    let tape = Tape::new();
    let re = randv(12, 1);
    let im = randv(12, 2);
    let est = CVar::new(tape.constant(Tensor::new([3, 4], randv(12, 3)).unwrap()), tape.constant(Tensor::new([3, 4], randv(12, 4)).unwrap())).unwrap();
    let a = CVar::new(tape.constant(Tensor::new([3, 4], re.clone()).unwrap()), tape.constant(Tensor::new([3, 4], im.clone()).unwrap())).unwrap();
    let flip = |v: &[f64], s: u64| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        v.iter().map(|x| if rng.gen_bool(0.5) { -x } else { *x }).collect()
    };
    let b = CVar::new(tape.constant(Tensor::new([3, 4], flip(&re, 5)).unwrap()), tape.constant(Tensor::new([3, 4], flip(&im, 6)).unwrap())).unwrap();
    assert_eq!(loss_tf(&a, &est).unwrap().item(), loss_tf(&b, &est).unwrap().item());
}

#[test]
fn loss_t_hand_value() {
    let tape = Tape::new();
    let clean = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
    let est = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let noisy = tape.constant(Tensor::from_vec(vec![1.0, 1.0]));
    assert_eq!(loss_t(&clean, &est, &noisy).unwrap().item(), 1.0);
    assert_eq!(loss_t(&clean, &clean, &noisy).unwrap().item(), 0.0);
    let short = tape.constant(Tensor::from_vec(vec![0.0]));
    assert!(loss_t(&clean, &short, &noisy).is_err());
}

#[test]
fn loss_t_terms_equal() {
    for seed in 0..20 {
        let n = 100 + seed as usize;
        let y = randv(n, seed);
        let yh = randv(n, seed + 100);
        let x: Vec<f64> = randv(n, seed + 200).iter().zip(&y).map(|(a, b)| a + b).collect();
        let noise: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let noise_hat: Vec<f64> = x.iter().zip(&yh).map(|(a, b)| a - b).collect();
        let speech = l1(&y, &yh);
        assert!((speech - l1(&noise, &noise_hat)).abs() < 1e-12);
        let tape = Tape::new();
        let v = |d: &[f64]| tape.constant(Tensor::from_vec(d.to_vec()));
        let got = loss_t(&v(&y), &v(&yh), &v(&x)).unwrap().item();
        assert!((got - 2.0 * speech / n as f64).abs() < 1e-12);
    }
}

#[test]
fn loss_total_weights() {
    let tape = Tape::new();
    let tf = tape.constant(Tensor::scalar(0.7));
    let t = tape.constant(Tensor::scalar(0.2));
    assert_eq!(loss_total(1.0, &tf, &t).unwrap().item(), 0.7);
    assert_eq!(loss_total(0.0, &tf, &t).unwrap().item(), 0.2);
    assert!((loss_total(0.5, &tf, &t).unwrap().item() - 0.45).abs() < 1e-15);
    assert!(loss_total(1.5, &tf, &t).is_err());
    assert!(loss_total(-0.1, &tf, &t).is_err());
}

#[test]
fn cross_domain_loss_zero_at_truth() {
    let p = pair(2048, 3);
    for alpha in [0.0, 0.3, 1.0] {
        for mode in [AlphaMode::Fixed, AlphaMode::Energy] {
            let tape = Tape::new();
            let clean = tape.constant(Tensor::from_vec(p.clean.samples().to_vec()));
            let noisy = tape.constant(Tensor::from_vec(p.noisy.samples().to_vec()));
            let cfg = LossConfig { alpha, alpha_mode: mode };
            let parts = cross_domain_loss(&clean, &clean, &noisy, Default::default(), &cfg).unwrap();
            assert_eq!(parts.total.item(), 0.0);
            assert_eq!(parts.tf.item(), 0.0);
            assert_eq!(parts.t.item(), 0.0);
            let off = cross_domain_loss(&clean, &noisy, &noisy, Default::default(), &cfg).unwrap();
            assert!(off.tf.item() > 0.0 && off.t.item() > 0.0);
            if mode == AlphaMode::Fixed {
                assert_eq!(off.alpha, alpha);
            } else {
                assert!(off.alpha > 0.0 && off.alpha < 1.0);
            }
        }
    }
}

#[test]
fn energy_alpha_oracle() {
    let tape = Tape::new();
    let y = randv(1024, 9);
    let clean = tape.constant(Tensor::from_vec(y.clone()));
    let spec = stft_var(&clean, Default::default()).unwrap();
    let mut e_spec = 0.0;
    let (re, im) = (spec.re.value(), spec.im.value());
    for (a, b) in re.data().iter().zip(im.data()) {
        e_spec += a * a + b * b;
    }
    e_spec /= re.len() as f64;
    let e_time = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
    let want = e_spec / (e_spec + e_time);
    assert!((energy_alpha(&clean, &spec) - want).abs() < 1e-12);
}

/// Minimum distance of any L1 kink argument from zero, ignoring arguments
/// that stay at rounding level for every estimate (imaginary parts of the DC
/// and Nyquist bins).
fn kink_margin(clean: &[f64], est: &[f64]) -> f64 {
    let tape = Tape::new();
    let sy = stft_var(&tape.constant(Tensor::from_vec(clean.to_vec())), Default::default()).unwrap();
    let se = stft_var(&tape.constant(Tensor::from_vec(est.to_vec())), Default::default()).unwrap();
    let mut m = clean.iter().zip(est).map(|(a, b)| (a - b).abs()).fold(f64::INFINITY, f64::min);
    for (y, e) in [(sy.re.value(), se.re.value()), (sy.im.value(), se.im.value())] {
        for (a, b) in y.data().iter().zip(e.data()) {
            if a.abs() < 1e-12 && b.abs() < 1e-12 {
                continue;
            }
            m = m.min(b.abs()).min((a.abs() - b.abs()).abs());
        }
    }
    m
}

#[test]
fn loss_total_gradcheck_wrt_estimate() {
    let n = 768;
    let clean = randv(n, 21);
    let noisy: Vec<f64> = clean.iter().zip(randv(n, 22)).map(|(a, b)| a + 0.3 * b).collect();
    let est: Vec<f64> = clean.iter().zip(randv(n, 23)).map(|(a, b)| a + 0.2 * b).collect();
    let margin = kink_margin(&clean, &est);
    assert!(margin > 1e-4, "test point too close to an L1 kink: {margin}");
    let opts = GradcheckOptions {
        max_coords: Some(40),
        ..GradcheckOptions::default()
    };
    let r = gradcheck_with(
        |tape, v| {
            let c = tape.constant(Tensor::from_vec(clean.clone()));
            let x = tape.constant(Tensor::from_vec(noisy.clone()));
            let parts = cross_domain_loss(&c, &v[0], &x, Default::default(), &LossConfig::default())?;
            Ok(parts.total)
        },
        &[Tensor::from_vec(est.clone())],
        &opts,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn loss_total_gradcheck_wrt_model_params() {
    let (model, store) = DchtModel::new(tiny()).unwrap();
    let p = pair(1024, 7);
    let opts = GradcheckOptions {
        max_coords: Some(2),
        seed: 3,
        ..GradcheckOptions::default()
    };
    for prefix in ["swinunet.head", "swinunet.enc0.block0.wmsa.attn.q", "dptnet.mask.proj", "dptnet.block0.local.gru.w_ih"] {
        let r = gradcheck_module(&store, prefix, &[], &opts, |ctx, _| {
            let noisy = ctx.input(Tensor::from_vec(p.noisy.samples().to_vec()));
            let clean = ctx.input(Tensor::from_vec(p.clean.samples().to_vec()));
            let out = model.forward(ctx, &noisy)?;
            Ok(cross_domain_loss(&clean, &out.enhanced, &noisy, model.config.stft, &model.config.loss)?.total)
        })
        .unwrap();
        assert!(r.coords_checked > 0, "{prefix}");
        assert!(r.max_rel_error < 1e-4, "{prefix}: {r:?}");
    }
}

#[test]
fn clipping_examples() {
    let mut g = Grads::new();
    g.insert("a".into(), Tensor::from_vec(vec![6.0, 0.0]));
    g.insert("b".into(), Tensor::from_vec(vec![8.0]));
    let before = clip_gradients(&mut g, 5.0).unwrap();
    assert_eq!(before, 10.0);
    assert_eq!(g["a"].data(), &[3.0, 0.0]);
    assert_eq!(g["b"].data(), &[4.0]);
    assert_eq!(global_norm(&g).unwrap(), 5.0);

    let mut h = Grads::new();
    h.insert("a".into(), Tensor::from_vec(vec![3.0, 0.0]));
    let keep = h.clone();
    assert_eq!(clip_gradients(&mut h, 5.0).unwrap(), 3.0);
    assert_eq!(h, keep);
}

#[test]
fn non_finite_gradient_names_parameter() {
    let mut g = Grads::new();
    g.insert("ok".into(), Tensor::from_vec(vec![1.0]));
    g.insert("layer.w".into(), Tensor::from_vec(vec![0.0, f64::NAN]));
    match clip_gradients(&mut g, 5.0) {
        Err(Error::NonFinite { location, index }) => {
            assert!(location.contains("layer.w"), "{location}");
            assert_eq!(index, 1);
        }
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn clipped_norm_bounded(vals in proptest::collection::vec(-1e3f64..1e3, 1..40), split in 1usize..5) {
        let mut g = Grads::new();
        for (i, chunk) in vals.chunks(split).enumerate() {
            g.insert(format!("p{i}"), Tensor::from_vec(chunk.to_vec()));
        }
        let before = global_norm(&g).unwrap();
        clip_gradients(&mut g, 5.0).unwrap();
        let after = global_norm(&g).unwrap();
        prop_assert!(after <= 5.0 + 1e-9);
        if before <= 5.0 {
            prop_assert_eq!(after, before);
        }
    }
}

#[test]
fn lr_schedule_peaks_at_warmup() {
    let (d, w) = (64, 200);
    let peak = lr_schedule(w, d, w, 1.0);
    assert!((peak - (d as f64).powf(-0.5) * (w as f64).powf(-0.5)).abs() < 1e-15);
    for s in 1..1000 {
        assert!(lr_schedule(s, d, w, 1.0) <= peak + 1e-18, "step {s}");
    }
    for s in 1..w {
        assert!(lr_schedule(s, d, w, 1.0) < lr_schedule(s + 1, d, w, 1.0));
    }
    for s in [w + 1, 400, 800, 3200] {
        let ratio = lr_schedule(4 * s, d, w, 1.0) / lr_schedule(s, d, w, 1.0);
        assert!((ratio - 0.5).abs() < 1e-12);
    }
    assert_eq!(lr_schedule(100, d, w, 2.0), 2.0 * lr_schedule(100, d, w, 1.0));
}

#[test]
fn adam_matches_scalar_oracle() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::from_vec(vec![0.5, -1.0])).unwrap();
    let mut adam = Adam::new(0.9, 0.98, 1e-9);
    let gs = [[0.1, -0.3], [0.2, 0.0], [-0.4, 0.5]];
    let (mut p, mut m, mut v) = ([0.5, -1.0], [0.0; 2], [0.0; 2]);
    for (t, g) in gs.iter().enumerate() {
        let mut grads = Grads::new();
        grads.insert("w".into(), Tensor::from_vec(g.to_vec()));
        adam.step(&mut store, &grads, 0.01).unwrap();
        let t = (t + 1) as i32;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.98 * v[i] + 0.02 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.98f64.powi(t));
            p[i] -= 0.01 * mh / (vh.sqrt() + 1e-9);
        }
        for i in 0..2 {
            assert!((store.get("w").unwrap().data()[i] - p[i]).abs() < 1e-15);
        }
    }
    assert_eq!(adam.step, 3);
    assert_eq!(adam.m["w"].shape(), &[2]);
    let mut bad = Grads::new();
    bad.insert("w".into(), Tensor::zeros([3]));
    assert!(adam.step(&mut store, &bad, 0.01).is_err());
}

#[test]
fn fusion_is_sum_of_branches() {
    let (model, store) = DchtModel::new(tiny()).unwrap();
    let noisy = AudioClip::new(randv(1500, 4).iter().map(|v| 0.3 * v).collect(), 16000).unwrap();
    let both = model.enhance(&store, &noisy, Fusion::Both).unwrap();
    let s = model.enhance(&store, &noisy, Fusion::Spectral).unwrap();
    let t = model.enhance(&store, &noisy, Fusion::Temporal).unwrap();
    let sum: Vec<f64> = s.samples().iter().zip(t.samples()).map(|(a, b)| a + b).collect();
    assert_eq!(both.samples(), &sum[..]);
    let ctx = Ctx::eval(&store);
    let x = ctx.input(Tensor::from_vec(noisy.samples().to_vec()));
    let out = model.forward(&ctx, &x).unwrap();
    assert_eq!(out.spectral.unwrap().value().data(), s.samples());
    assert_eq!(out.temporal.unwrap().value().data(), t.samples());
    assert_eq!(model.enhance(&store, &noisy, Fusion::Passthrough).unwrap(), noisy);
}

#[test]
fn zero_input_zero_output_without_biases() {
    let (model, mut store) = DchtModel::new(tiny()).unwrap();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let last = n.rsplit('.').next().unwrap();
        if last.starts_with("bias") || last.starts_with("beta") || last.starts_with("b_") {
            store.zero_prefix(&n);
        }
    }
    let zero = AudioClip::new(vec![0.0; 4000], 16000).unwrap();
    let out = model.enhance(&store, &zero, Fusion::Both).unwrap();
    assert!(out.samples().iter().all(|v| *v == 0.0));
}

#[test]
fn output_length_matches_input() {
    let (model, store) = DchtModel::new(tiny()).unwrap();
    for len in [512, 8000, 16000] {
        let clip = AudioClip::new(randv(len, len as u64).iter().map(|v| 0.1 * v).collect(), 16000).unwrap();
        for fusion in [Fusion::Both, Fusion::Spectral, Fusion::Temporal] {
            assert_eq!(model.enhance(&store, &clip, fusion).unwrap().len(), len);
        }
    }
}

#[test]
fn branch_errors_are_named() {
    let (model, store) = DchtModel::new(tiny()).unwrap();
    let short = AudioClip::new(vec![0.1; 100], 16000).unwrap();
    let err = model.enhance(&store, &short, Fusion::Spectral).unwrap_err().to_string();
    assert!(err.contains("spectral"), "{err}");
    let tiny_clip = AudioClip::new(vec![0.1; 8], 16000).unwrap();
    let err = model.enhance(&store, &tiny_clip, Fusion::Temporal).unwrap_err().to_string();
    assert!(err.contains("temporal"), "{err}");
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let (_, store) = DchtModel::new(tiny()).unwrap();
    let ck = Checkpoint::new(tiny(), store.clone(), 17);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    for (name, t) in store.iter() {
        let u = back.params.get(name).unwrap();
        assert!(t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let path2 = dir.path().join("b.ckpt");
    back.save(&path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    assert_eq!(back.id().unwrap(), ck.id().unwrap());
    let (model, params) = back.into_model().unwrap();
    assert_eq!(params, store);
    assert_eq!(model.config, tiny());
}

#[test]
fn checkpoint_rejects_bad_files() {
    let (_, store) = DchtModel::new(tiny()).unwrap();
    let bytes = Checkpoint::new(tiny(), store.clone(), 0).to_bytes().unwrap();
    let mut wrong = bytes.clone();
    wrong[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&wrong).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());

    let mut other = tiny();
    other.dptnet.enc_channels = 6;
    let ck = Checkpoint::new(other, store, 0);
    assert!(ck.into_model().is_err());
}

#[test]
fn config_toml_round_trip() {
    let cfg = tiny();
    let text = cfg.to_toml().unwrap();
    assert_eq!(ModelConfig::from_toml(&text).unwrap(), cfg);
    assert_eq!(ModelConfig::from_toml("").unwrap(), ModelConfig::default());
    assert!(ModelConfig::from_toml("[train]\nbogus = 1\n").is_err());
    assert!(ModelConfig::from_toml("[loss]\nalpha = 1.5\n").is_err());
    assert!(ModelConfig::from_toml("fusion = \"sideways\"\n").is_err());
    assert_eq!(cfg.hash().unwrap(), tiny().hash().unwrap());
    assert_ne!(cfg.hash().unwrap(), ModelConfig::default().hash().unwrap());
    assert_eq!("temporal".parse::<Fusion>().unwrap(), Fusion::Temporal);
    assert!("x".parse::<Fusion>().is_err());
}

#[test]
fn training_is_deterministic() {
    let data: Vec<Pair> = (0..3).map(|i| pair(2048, i)).collect();
    let mut cfg = tiny();
    cfg.train.max_steps = Some(3);
    let run = || {
        let (model, store) = DchtModel::new(cfg.clone()).unwrap();
        train(&model, store, &data, &data[..1], |_| {}).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.steps.len(), 3);
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.last, b.last);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.state.step, 3);
    assert!(a.steps.iter().all(|s| s.loss.is_finite() && s.lr > 0.0));
    assert!(a.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
    // two epochs of 2 batches each, capped after the first batch of epoch 1
    assert_eq!(a.epochs.len(), 2);
    assert_eq!(a.steps[2].epoch, 1);
}

#[test]
fn empty_training_set_is_an_error() {
    let (model, store) = DchtModel::new(tiny()).unwrap();
    assert!(matches!(train(&model, store, &[], &[], |_| {}), Err(Error::Data(_))));
}

#[test]
fn best_checkpoint_tracks_validation() {
    let data: Vec<Pair> = (0..2).map(|i| pair(1024, 10 + i)).collect();
    let mut cfg = tiny();
    cfg.train.epochs = 3;
    cfg.train.batch_size = 2;
    let (model, store) = DchtModel::new(cfg).unwrap();
    let out = train(&model, store, &data, &data, |_| {}).unwrap();
    let min = out.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val, min);
    let tr = Trainer::new(&model, out.best.clone());
    assert!((tr.mean_loss(&data).unwrap() - min).abs() < 1e-12);
}

#[test]
fn validation_split_is_deterministic_and_disjoint() {
    let data: Vec<Pair> = (0..10).map(|i| pair(512, i)).collect();
    let (t1, v1) = split_validation(&data, 0.2, 4);
    let (t2, v2) = split_validation(&data, 0.2, 4);
    assert_eq!(t1, t2);
    assert_eq!(v1, v2);
    assert_eq!((t1.len(), v1.len()), (8, 2));
    assert!(v1.iter().all(|v| !t1.iter().any(|t| t.name == v.name)));
    let (all, none) = split_validation(&data, 0.0, 4);
    assert_eq!((all.len(), none.len()), (10, 0));
}
