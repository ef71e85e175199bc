use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::gradcheck::GradcheckOptions;
use crate::params::{gradcheck_module, project};

fn tiny() -> SwinUnetConfig {
    SwinUnetConfig {
        patch_size: 2,
        embed_dim: 4,
        depths: vec![2, 2],
        heads: vec![2, 2],
        window: 2,
        mlp_ratio: 2,
        ..SwinUnetConfig::default()
    }
}

fn build(cfg: SwinUnetConfig, seed: u64) -> (ParamStore, SwinUnet) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = SwinUnet::new(&mut store, "swinunet", cfg, &mut rng).unwrap();
    (store, net)
}

fn random_spec(tape: &Tape, k: usize, f: usize, scale: f64, seed: u64) -> CVar {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CVar::constant(tape, Tensor::randn([k, f], scale, &mut rng), Tensor::randn([k, f], scale, &mut rng)).unwrap()
}

#[test]
fn default_config_is_valid() {
    let c = SwinUnetConfig::default();
    c.validate().unwrap();
    assert_eq!(c.pad_multiple(), 64);
    let odd = SwinUnetConfig { depths: vec![2, 3, 2], ..c.clone() };
    assert!(odd.validate().is_err());
    let heads = SwinUnetConfig { heads: vec![5, 6, 12], ..c };
    assert!(heads.validate().is_err());
}

#[test]
fn embed_token_count_and_zero_input() {
    let cfg = SwinUnetConfig { patch_size: 4, depths: vec![2], heads: vec![2], window: 2, embed_dim: 4, ..tiny() };
    let (store, net) = build(cfg, 1);
    let ctx = Ctx::eval(&store);
    let zero = CVar::constant(ctx.tape(), Tensor::zeros([8, 8]), Tensor::zeros([8, 8])).unwrap();
    let (tokens, grid) = net.patch_embed(&ctx, &zero).unwrap();
    assert_eq!(tokens.shape(), vec![1, 2, 2, 4]);
    assert_eq!((grid.padded_frames, grid.padded_bins), (8, 8));
    let (re, im) = tokens.values();
    assert!(re.data().iter().chain(im.data()).all(|v| *v == 0.0));
}

#[test]
fn embed_matches_patch_loop() {
    let (store, net) = build(tiny(), 2);
    let ctx = Ctx::eval(&store);
    let x = random_spec(ctx.tape(), 5, 7, 1.0, 3);
    let (tokens, grid) = net.patch_embed(&ctx, &x).unwrap();
    assert_eq!((grid.padded_frames, grid.padded_bins), (8, 8));
    let (xr, xi) = x.values();
    let wr = store.get("swinunet.embed.weight_re").unwrap();
    let wi = store.get("swinunet.embed.weight_im").unwrap();
    let (tr, ti) = tokens.values();
    for gh in 0..4 {
        for gw in 0..4 {
            for c in 0..4 {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..2 {
                    for j in 0..2 {
                        let (k, f) = (gh * 2 + i, gw * 2 + j);
                        let (a, b) = if k < 5 && f < 7 { (xr.data()[k * 7 + f], xi.data()[k * 7 + f]) } else { (0.0, 0.0) };
                        let (p, q) = (wr.data()[c * 4 + i * 2 + j], wi.data()[c * 4 + i * 2 + j]);
                        re += a * p - b * q;
                        im += a * q + b * p;
                    }
                }
                let at = (gh * 4 + gw) * 4 + c;
                assert!((tr.data()[at] - re).abs() < 1e-12 && (ti.data()[at] - im).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pad_unpad_round_trip() {
    let tape = Tape::new();
    let x = random_spec(&tape, 13, 9, 1.0, 4);
    let grid = PaddedGrid::new(13, 9, 8);
    let p = grid.pad(&x).unwrap();
    assert_eq!(p.shape(), vec![16, 16]);
    assert_eq!(grid.unpad(&p).unwrap().values(), x.values());
}

#[test]
fn merge_and_expand_shapes() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let merge = PatchMerge::new(&mut store, "m", 3, 1e-8, &mut rng).unwrap();
    let expand = PatchExpand::new(&mut store, "e", 6, &mut rng).unwrap();
    let ctx = Ctx::eval(&store);
    let x = CVar::constant(ctx.tape(), Tensor::randn([1, 4, 4, 3], 1.0, &mut rng), Tensor::randn([1, 4, 4, 3], 1.0, &mut rng)).unwrap();
    let m = merge.forward(&ctx, &x).unwrap();
    assert_eq!(m.shape(), vec![1, 2, 2, 6]);
    assert_eq!(expand.forward(&ctx, &m).unwrap().shape(), x.shape());
    let odd = CVar::constant(ctx.tape(), Tensor::zeros([1, 3, 4, 3]), Tensor::zeros([1, 3, 4, 3])).unwrap();
    assert!(merge.forward(&ctx, &odd).is_err());
}

#[test]
fn merge_expand_gradcheck() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let merge = PatchMerge::new(&mut store, "m", 2, 1e-8, &mut rng).unwrap();
    let expand = PatchExpand::new(&mut store, "e", 4, &mut rng).unwrap();
    let inputs = [Tensor::randn([1, 4, 4, 2], 1.0, &mut rng), Tensor::randn([1, 4, 4, 2], 1.0, &mut rng)];
    let r = gradcheck_module(&store, "", &inputs, &GradcheckOptions::default(), |ctx, v| {
        let x = CVar::new(v[0].clone(), v[1].clone())?;
        let y = expand.forward(ctx, &merge.forward(ctx, &x)?)?;
        project(&y.re, 1)?.add(&project(&y.im, 2)?)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn mask_scalar_values() {
    let tape = Tape::new();
    let f = CVar::constant(&tape, Tensor::from_vec(vec![3.0, 0.0]), Tensor::from_vec(vec![4.0, 0.0])).unwrap();
    let (re, im) = bounded_mask(&f).unwrap().values();
    let mag = re.data()[0].hypot(im.data()[0]);
    assert!((mag - 5.0f64.tanh()).abs() < 1e-15);
    assert!((mag - 0.999909).abs() < 1e-6);
    assert!((re.data()[0] / mag - 0.6).abs() < 1e-15 && (im.data()[0] / mag - 0.8).abs() < 1e-15);
    assert_eq!((re.data()[1], im.data()[1]), (0.0, 0.0));
}

#[test]
fn mask_gradient_is_finite_at_zero() {
    let tape = Tape::new();
    let f = CVar::leaf(&tape, Tensor::from_vec(vec![0.0]), Tensor::from_vec(vec![0.0])).unwrap();
    let m = bounded_mask(&f).unwrap();
    m.re.add(&m.im).unwrap().sum().backward().unwrap();
    // d tanh(|F|)·F/|F| at 0 is the identity.
    assert_eq!(f.re.grad().unwrap().data(), &[1.0]);
    assert_eq!(f.im.grad().unwrap().data(), &[1.0]);
}

#[test]
fn direct_output_without_mask_connection() {
    let (store, net) = build(SwinUnetConfig { mask_connection: false, ..tiny() }, 7);
    let ctx = Ctx::eval(&store);
    let x = random_spec(ctx.tape(), 6, 9, 1.0, 8);
    let out = net.forward(&ctx, &x).unwrap();
    assert!(out.mask.is_none());
    assert_eq!(out.estimate.values(), out.raw.values());
}

#[test]
fn output_shape_matches_input() {
    let (store, net) = build(tiny(), 9);
    for (k, f) in [(1, 1), (3, 17), (8, 8), (9, 257)] {
        let ctx = Ctx::eval(&store);
        let x = random_spec(ctx.tape(), k, f, 1.0, k as u64);
        let out = net.forward(&ctx, &x).unwrap();
        assert_eq!(out.estimate.shape(), vec![k, f]);
        assert_eq!(out.mask.unwrap().shape(), vec![k, f]);
    }
}

#[test]
fn zero_projections_pass_skip_and_head_through() {
    // Zeroing every block's output projection makes the blocks identities,
    // so the output no longer depends on the attention parameters.
    let (mut store, net) = build(tiny(), 10);
    for p in net.output_projection_prefixes() {
        store.zero_prefix(&p);
    }
    let mut other = store.clone();
    for name in store.names().filter(|n| n.contains(".attn.q.")).map(str::to_string).collect::<Vec<_>>() {
        other.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v *= -3.0);
    }
    let run = |s: &ParamStore| {
        let ctx = Ctx::eval(s);
        net.forward(&ctx, &random_spec(ctx.tape(), 8, 8, 1.0, 11)).unwrap().estimate.values()
    };
    assert_eq!(run(&store), run(&other));
}

#[test]
fn non_finite_input_names_stage() {
    let (mut store, net) = build(tiny(), 12);
    store.get_mut("swinunet.fuse0.bias_re").unwrap().data_mut()[0] = f64::NAN;
    let ctx = Ctx::eval(&store);
    let err = net.forward(&ctx, &random_spec(ctx.tape(), 8, 8, 1.0, 1)).unwrap_err();
    assert!(err.is_numerical());
    assert!(err.to_string().contains("swinunet decoder stage 0"), "{err}");
}

#[test]
fn enhance_returns_bounded_mask() {
    let (store, net) = build(tiny(), 13);
    let tape = Tape::new();
    let (re, im) = random_spec(&tape, 6, 9, 3.0, 14).values();
    let spec = Spectrogram::new(re, im, crate::dsp::StftConfig { frame_size: 16, hop: 8 }, 16000).unwrap();
    let (est, mask) = net.enhance(&store, &spec).unwrap();
    let mask = mask.unwrap();
    let mag = mask.magnitude();
    let y = spec.magnitude();
    let yh = est.magnitude();
    for i in 0..mag.len() {
        assert!(mag[i] <= 1.0);
        assert!(yh.data()[i] <= y.data()[i]);
    }
}

#[test]
fn full_branch_gradcheck() {
    let (store, net) = build(tiny(), 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let inputs = [Tensor::randn([8, 8], 1.0, &mut rng), Tensor::randn([8, 8], 1.0, &mut rng)];
    let opts = GradcheckOptions {
        max_coords: Some(3),
        ..GradcheckOptions::default()
    };
    let r = gradcheck_module(&store, "swinunet.", &inputs, &opts, |ctx, v| {
        let y = net.forward(ctx, &CVar::new(v[0].clone(), v[1].clone())?)?.estimate;
        project(&y.re, 1)?.add(&project(&y.im, 2)?)
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

proptest! {
    #[test]
    fn shuffle_inverts_space_to_depth(h in 1usize..4, w in 1usize..4, c in 1usize..4, r in 1usize..3, seed in 0u64..100) {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, h * r, w * r, c];
        let x = CVar::constant(&tape, Tensor::randn(shape, 1.0, &mut rng), Tensor::randn(shape, 1.0, &mut rng)).unwrap();
        let back = pixel_shuffle(&space_to_depth(&x, r).unwrap(), r).unwrap();
        prop_assert_eq!(back.values(), x.values());
    }

    #[test]
    fn mask_never_exceeds_one(seed in 0u64..500, scale in 0.01f64..50.0) {
        let (store, net) = build(tiny(), 100);
        let ctx = Ctx::eval(&store);
        let x = random_spec(ctx.tape(), 5, 6, scale, seed);
        let out = net.forward(&ctx, &x).unwrap();
        let m = magnitudes(out.mask.as_ref().unwrap());
        let (y, yh) = (magnitudes(&x), magnitudes(&out.estimate));
        for i in 0..m.len() {
            prop_assert!(m[i] <= 1.0);
            prop_assert!(yh[i] <= y[i]);
        }
    }
}
