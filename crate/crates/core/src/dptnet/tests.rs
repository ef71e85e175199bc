use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::gradcheck::GradcheckOptions;
use crate::params::{gradcheck_module, project};

fn tiny() -> DptConfig {
    DptConfig {
        enc_channels: 4,
        enc_kernel: 4,
        enc_stride: 2,
        chunk: 4,
        num_blocks: 1,
        heads: 2,
        gru_hidden: Some(6),
        compress_factor: 2,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ramp(tape: &Tape, shape: &[usize]) -> Var {
    let n: usize = shape.iter().product();
    tape.constant(Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap())
}

#[test]
fn frame_arithmetic() {
    let c = DptConfig::default();
    assert_eq!(c.frames(64).unwrap(), (64, (64 - 16) / 8 + 1));
    assert_eq!(c.frames(100).unwrap(), (104, 12));
    assert_eq!(c.frames(16).unwrap(), (16, 1));
    assert!(matches!(c.frames(15), Err(Error::Audio(_))));
    assert_eq!(chunk_count(128, 64), 3);
    assert_eq!(chunk_count(64, 64), 1);
    assert_eq!(chunk_count(1, 64), 1);
    assert_eq!(chunk_count(65, 64), 2);
}

#[test]
fn config_validation() {
    assert!(DptConfig::default().validate().is_ok());
    assert!(DptConfig { heads: 3, ..DptConfig::default() }.validate().is_err());
    assert!(DptConfig { chunk: 63, ..DptConfig::default() }.validate().is_err());
    assert!(DptConfig { num_blocks: 0, ..DptConfig::default() }.validate().is_err());
    assert_eq!(DptConfig::default().hidden(), 128);
}

#[test]
fn encoder_matches_direct_convolution() {
    let mut store = ParamStore::new();
    let net = DptNet::new(&mut store, "dptnet", DptConfig::default(), &mut rng(1)).unwrap();
    store.set("dptnet.encoder.bias", Tensor::uniform([64], -0.1, 0.1, &mut rng(2))).unwrap();
    let ctx = Ctx::eval(&store);
    let x = ramp(ctx.tape(), &[64]);
    let y = net.encode(&ctx, &x).unwrap();
    assert_eq!(y.shape(), vec![64, 7]);
    let (w, b, xv, yv) = (store.get("dptnet.encoder.weight").unwrap(), store.get("dptnet.encoder.bias").unwrap(), x.value(), y.value());
    for c in 0..64 {
        for t in 0..7 {
            let mut acc = b.data()[c];
            for k in 0..16 {
                acc += w.data()[c * 16 + k] * xv.data()[t * 8 + k];
            }
            assert!((yv.data()[c * 7 + t] - acc.max(0.0)).abs() < 1e-12);
        }
    }
    store.set("dptnet.encoder.bias", Tensor::zeros([64])).unwrap();
    let ctx = Ctx::eval(&store);
    let zero = ctx.input(Tensor::zeros([64]));
    assert!(net.encode(&ctx, &zero).unwrap().value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn encoder_gradcheck() {
    let mut store = ParamStore::new();
    let net = DptNet::new(&mut store, "dptnet", tiny(), &mut rng(3)).unwrap();
    let x = Tensor::randn([11], 1.0, &mut rng(4));
    let r = gradcheck_module(&store, "dptnet.encoder", &[x], &GradcheckOptions::default(), |ctx, v| {
        project(&net.encode(ctx, &v[0])?, 1)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn segmentation_round_trip_is_exact() {
    let tape = Tape::new();
    for frames in 1..=640 {
        let x = tape.constant(Tensor::randn([2, frames], 1.0, &mut rng(frames as u64)));
        let chunked = segment(&x, 64).unwrap();
        assert_eq!(chunked.chunks(), chunk_count(frames, 64));
        assert_eq!(desegment(&chunked).unwrap().value(), x.value());
    }
    let x = ramp(&tape, &[3, 128]);
    assert_eq!(segment(&x, 64).unwrap().data.shape(), vec![3, 3, 64]);
}

#[test]
fn segment_places_overlapping_frames() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new([1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let c = segment(&x, 4).unwrap();
    assert_eq!(c.data.value().data(), &[1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 5.0, 0.0]);
}

/// Plain attention by loops on one sequence `[S, d]`.
fn attention_ref(store: &ParamStore, name: &str, x: &[Vec<f64>], heads: usize) -> Vec<Vec<f64>> {
    let lin = |p: &str, v: &[f64]| -> Vec<f64> {
        let w = store.get(&format!("{name}.{p}.weight")).unwrap();
        let d = w.shape()[0];
        let b = store.get(&format!("{name}.{p}.bias")).map(|b| b.data().to_vec()).unwrap_or(vec![0.0; d]);
        (0..d).map(|o| b[o] + (0..v.len()).map(|i| w.data()[o * v.len() + i] * v[i]).sum::<f64>()).collect()
    };
    let q: Vec<_> = x.iter().map(|v| lin("q", v)).collect();
    let k: Vec<_> = x.iter().map(|v| lin("k", v)).collect();
    let v: Vec<_> = x.iter().map(|v| lin("v", v)).collect();
    let d = x[0].len();
    let dh = d / heads;
    let mut mixed = vec![vec![0.0; d]; x.len()];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        for i in 0..x.len() {
            let logits: Vec<f64> =
                (0..x.len()).map(|j| r.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in r.clone() {
                mixed[i][c] = (0..x.len()).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    mixed.iter().map(|m| lin("out", m)).collect()
}

#[test]
fn attention_matches_loop_reference() {
    let mut store = ParamStore::new();
    let mut r = rng(5);
    let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, None, &mut r).unwrap();
    for name in ["a.q.bias", "a.v.bias", "a.out.bias"] {
        store.set(name, Tensor::uniform([8], -0.5, 0.5, &mut r)).unwrap();
    }
    let ctx = Ctx::eval(&store);
    let x = Tensor::randn([2, 5, 8], 1.0, &mut r);
    let y = attn.forward(&ctx, &ctx.input(x.clone())).unwrap().value();
    for b in 0..2 {
        let seq: Vec<Vec<f64>> = (0..5).map(|s| x.data()[(b * 5 + s) * 8..(b * 5 + s + 1) * 8].to_vec()).collect();
        let want = attention_ref(&store, "a", &seq, 2);
        for s in 0..5 {
            for c in 0..8 {
                assert!((y.data()[(b * 5 + s) * 8 + c] - want[s][c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn unit_compression_with_identity_kernel_is_exact() {
    let mut store = ParamStore::new();
    let mut r = rng(6);
    let compressed = MultiHeadAttention::new(&mut store, "a", 8, 2, Some(1), &mut r).unwrap();
    let (ck, cv) = compressed.compress.clone().unwrap();
    ck.set_identity(&mut store).unwrap();
    cv.set_identity(&mut store).unwrap();
    let plain = MultiHeadAttention { compress: None, ..compressed.clone() };
    let ctx = Ctx::eval(&store);
    let x = ctx.input(Tensor::randn([3, 7, 8], 1.0, &mut r));
    assert_eq!(compressed.forward(&ctx, &x).unwrap().value(), plain.forward(&ctx, &x).unwrap().value());
}

#[test]
fn compression_shortens_keys() {
    let mut store = ParamStore::new();
    let mc = MemoryCompression::new(&mut store, "c", 4, 3, true, &mut rng(7)).unwrap();
    let ctx = Ctx::eval(&store);
    for (s, want) in [(1, 1), (3, 1), (4, 2), (62, 21)] {
        let y = mc.forward(&ctx, &ctx.input(Tensor::zeros([2, s, 4]))).unwrap();
        assert_eq!(y.shape(), vec![2, want, 4]);
    }
}

#[test]
fn single_step_sequence_is_finite() {
    let mut store = ParamStore::new();
    let t = ImprovedTransformer::new(&mut store, "t", 8, 2, 16, Some(3), &mut rng(8)).unwrap();
    let ctx = Ctx::eval(&store);
    let y = t.forward(&ctx, &ctx.input(Tensor::randn([4, 1, 8], 1.0, &mut rng(9)))).unwrap();
    assert_eq!(y.shape(), vec![4, 1, 8]);
    assert!(y.value().first_non_finite().is_none());
    assert!(ImprovedTransformer::new(&mut ParamStore::new(), "t", 8, 3, 16, None, &mut rng(8)).is_err());
}

#[test]
fn improved_transformer_gradcheck() {
    for compress in [None, Some(2)] {
        let mut store = ParamStore::new();
        let t = ImprovedTransformer::new(&mut store, "t", 8, 2, 16, compress, &mut rng(10)).unwrap();
        let x = Tensor::randn([1, 5, 8], 1.0, &mut rng(11));
        let opts = GradcheckOptions {
            max_coords: Some(12),
            ..GradcheckOptions::default()
        };
        let r = gradcheck_module(&store, "t.", &[x], &opts, |ctx, v| project(&t.forward(ctx, &v[0])?, 3)).unwrap();
        assert!(r.max_rel_error < 1e-4, "{compress:?}: {r:?}");
    }
}

#[test]
fn block_preserves_shape_and_handles_one_chunk() {
    let mut store = ParamStore::new();
    let block = DptBlock::new(&mut store, "b", &DptConfig { chunk: 8, ..tiny() }, &mut rng(12)).unwrap();
    let ctx = Ctx::eval(&store);
    for (n, frames) in [(3, 16), (1, 8)] {
        let x = ChunkedTensor {
            data: ctx.input(Tensor::randn([4, n, 8], 1.0, &mut rng(13))),
            frames,
        };
        let y = block.forward(&ctx, &x).unwrap();
        assert_eq!(y.data.shape(), vec![4, n, 8]);
        assert!(y.data.value().first_non_finite().is_none());
    }
}

#[test]
fn local_stage_is_equivariant_across_chunks() {
    let mut store = ParamStore::new();
    let block = DptBlock::new(&mut store, "b", &DptConfig { chunk: 8, ..tiny() }, &mut rng(14)).unwrap();
    let ctx = Ctx::eval(&store);
    let x = Tensor::randn([4, 3, 8], 1.0, &mut rng(15));
    let perm = [2usize, 0, 1];
    let mut px = Tensor::zeros([4, 3, 8]);
    for c in 0..4 {
        for (n, &from) in perm.iter().enumerate() {
            for f in 0..8 {
                px.data_mut()[(c * 3 + n) * 8 + f] = x.data()[(c * 3 + from) * 8 + f];
            }
        }
    }
    let y = block.local(&ctx, &ctx.input(x)).unwrap().value();
    let py = block.local(&ctx, &ctx.input(px)).unwrap().value();
    for c in 0..4 {
        for (n, &from) in perm.iter().enumerate() {
            for f in 0..8 {
                assert_eq!(py.data()[(c * 3 + n) * 8 + f], y.data()[(c * 3 + from) * 8 + f]);
            }
        }
    }
}

#[test]
fn block_gradcheck() {
    let mut store = ParamStore::new();
    let block = DptBlock::new(&mut store, "b", &tiny(), &mut rng(16)).unwrap();
    let x = Tensor::randn([4, 3, 4], 1.0, &mut rng(17));
    let opts = GradcheckOptions {
        max_coords: Some(6),
        ..GradcheckOptions::default()
    };
    let r = gradcheck_module(&store, "b.", &[x], &opts, |ctx, v| {
        let y = block.forward(ctx, &ChunkedTensor { data: v[0].clone(), frames: 8 })?;
        project(&y.data, 4)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn zero_features_give_silence() {
    let mut store = ParamStore::new();
    let net = DptNet::new(&mut store, "dptnet", tiny(), &mut rng(18)).unwrap();
    let ctx = Ctx::eval(&store);
    let enc = net.encode(&ctx, &ctx.input(Tensor::randn([20], 1.0, &mut rng(19)))).unwrap();
    let zero = ctx.input(Tensor::zeros(enc.shape()));
    let y = net.mask_and_decode(&ctx, &zero, &enc, 20).unwrap();
    assert!(y.value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn output_length_matches_input() {
    let mut store = ParamStore::new();
    let cfg = DptConfig {
        enc_channels: 4,
        chunk: 16,
        num_blocks: 1,
        heads: 2,
        ..DptConfig::default()
    };
    let net = DptNet::new(&mut store, "dptnet", cfg, &mut rng(20)).unwrap();
    for len in [64usize, 100, 16000] {
        let ctx = Ctx::eval(&store);
        let y = net.forward(&ctx, &ctx.input(Tensor::randn([len], 0.1, &mut rng(len as u64)))).unwrap();
        assert_eq!(y.shape(), vec![len]);
    }
    let ctx = Ctx::eval(&store);
    assert!(net.forward(&ctx, &ctx.input(Tensor::zeros([15]))).is_err());
}

#[test]
fn end_to_end_gradcheck() {
    let mut store = ParamStore::new();
    let net = DptNet::new(&mut store, "dptnet", tiny(), &mut rng(21)).unwrap();
    let x = Tensor::randn([13], 1.0, &mut rng(22));
    let opts = GradcheckOptions {
        max_coords: Some(4),
        ..GradcheckOptions::default()
    };
    let r = gradcheck_module(&store, "dptnet.", &[x], &opts, |ctx, v| project(&net.forward(ctx, &v[0])?, 5)).unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

proptest! {
    #[test]
    fn round_trip_any_chunk(frames in 1usize..200, half in 1usize..20, seed in 0u64..100) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn([2, frames], 1.0, &mut rng(seed)));
        let c = segment(&x, 2 * half).unwrap();
        prop_assert_eq!(desegment(&c).unwrap().value(), x.value());
    }
}
