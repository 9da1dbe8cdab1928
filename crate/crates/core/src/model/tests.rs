use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::gradcheck::randn;
use crate::numerics::Tensor;

fn micro_cfg() -> ModelCfg {
    let enc = EncoderCfg {
        d: 8,
        layers: 1,
        heads: 2,
        mlp_ratio: 2,
        dropout: 0.0,
        patch_len: Some(5),
        ..Default::default()
    };
    ModelCfg {
        src: enc.clone(),
        dst: enc,
        init_std: 0.3,
        ..Default::default()
    }
}

fn shapes(cs: usize, cd: usize, n_w: usize, p: usize) -> (StreamShape, StreamShape) {
    (
        StreamShape { channels: cs, n_w, patch_len: p },
        StreamShape { channels: cd, n_w, patch_len: p },
    )
}

fn micro(classes: usize) -> ModelBundle<f64> {
    let (s, d) = shapes(3, 2, 20, 5);
    ModelBundle::paired(&micro_cfg(), s, d, classes, 7).unwrap()
}

fn input(seed: u64, shape: &[usize]) -> Tensor<f64> {
    randn(&mut ChaCha8Rng::seed_from_u64(seed), shape)
}

#[test]
fn encode_shape_contract() {
    let cfg = ModelCfg {
        src: EncoderCfg { patch_len: Some(10), layers: 2, ..Default::default() },
        dst: EncoderCfg { patch_len: Some(10), layers: 2, ..Default::default() },
        ..Default::default()
    };
    let (s, d) = shapes(9, 6, 200, 10);
    let b = ModelBundle::<f64>::paired(&cfg, s, d, 12, 1).unwrap();
    let mut ctx = Ctx::eval(&b.params);
    let x = ctx.input(input(1, &[2, 6, 200]));
    let r = b.encode(&mut ctx, Modality::Dst, x).unwrap();
    assert_eq!(r.shape(), [2, 6, 20, 64]);
    assert_eq!(ctx.graph.shape(r.var), &[2, 6, 20, 64]);

    let xs = ctx.input(input(2, &[2, 9, 200]));
    let rs = b.encode(&mut ctx, Modality::Src, xs).unwrap();
    let t = b.translate(&mut ctx, Direction::S2d, &rs).unwrap();
    assert_eq!((t.tokens, t.patches, t.dim, t.modality), (6, 20, 64, Modality::Dst));
    let back = b.translate(&mut ctx, Direction::D2s, &r).unwrap();
    assert_eq!((back.tokens, back.modality), (9, Modality::Src));
}

#[test]
fn conv_encoder_shape_contract() {
    for (n_w, p) in [(20, 5), (40, 4), (200, 10), (12, 12)] {
        let enc = EncoderCfg { kind: EncoderKind::Conv, d: 8, heads: 2, layers: 3, patch_len: Some(p), ..Default::default() };
        let cfg = ModelCfg { src: enc.clone(), dst: enc, ..Default::default() };
        let (s, d) = shapes(2, 3, n_w, p);
        let b = ModelBundle::<f64>::paired(&cfg, s, d, 4, 1).unwrap();
        let mut ctx = Ctx::eval(&b.params);
        let x = ctx.input(input(3, &[2, 3, n_w]));
        let r = b.encode(&mut ctx, Modality::Dst, x).unwrap();
        assert_eq!(ctx.graph.shape(r.var), &[2, 3, n_w / p, 8]);
    }
}

#[test]
fn channel_mismatch_is_shape_error() {
    let b = micro(3);
    let mut ctx = Ctx::eval(&b.params);
    let x = ctx.input(input(1, &[1, 3, 20]));
    assert!(matches!(b.encode(&mut ctx, Modality::Dst, x), Err(ModelError::Shape(_))));
}

#[test]
fn identical_windows_give_identical_reps() {
    let b = micro(3);
    let one = input(4, &[1, 2, 20]);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let mut ctx = Ctx::eval(&b.params);
    let x = ctx.input(Tensor::new(vec![2, 2, 20], two).unwrap());
    let r = b.encode(&mut ctx, Modality::Dst, x).unwrap();
    let v = ctx.graph.value(r.var).data();
    let half = v.len() / 2;
    assert_eq!(&v[..half], &v[half..]);
}

#[test]
fn channel_permutation_is_equivariant() {
    let mut b = micro(3);
    let perm = [1usize, 0];
    let x = input(5, &[1, 2, 20]);
    let mut ctx = Ctx::eval(&b.params);
    let xv = ctx.input(x.clone());
    let r = b.encode(&mut ctx, Modality::Dst, xv).unwrap();
    let base = ctx.graph.value(r.var).clone();
    drop(ctx);

    let px: Vec<f64> = perm.iter().flat_map(|&c| x.data()[c * 20..(c + 1) * 20].to_vec()).collect();
    let id = b.params.id("e_dst.spatial_embed").unwrap();
    let e = b.params.get(id).clone();
    let pe: Vec<f64> = perm.iter().flat_map(|&c| e.data()[c * 8..(c + 1) * 8].to_vec()).collect();
    b.params.set(id, Tensor::new(e.shape().to_vec(), pe).unwrap()).unwrap();

    let mut ctx = Ctx::eval(&b.params);
    let xv = ctx.input(Tensor::new(vec![1, 2, 20], px).unwrap());
    let r = b.encode(&mut ctx, Modality::Dst, xv).unwrap();
    let out = ctx.graph.value(r.var);
    let chunk = 4 * 8;
    for (i, &c) in perm.iter().enumerate() {
        let got = &out.data()[i * chunk..(i + 1) * chunk];
        let want = &base.data()[c * chunk..(c + 1) * chunk];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn translate_rejects_wrong_modality() {
    let b = micro(3);
    let mut ctx = Ctx::eval(&b.params);
    let x = ctx.input(input(1, &[1, 2, 20]));
    let r = b.encode(&mut ctx, Modality::Dst, x).unwrap();
    assert!(matches!(b.translate(&mut ctx, Direction::S2d, &r), Err(ModelError::Contract(_))));
}

#[test]
fn classifier_rejects_src_reps() {
    let b = micro(3);
    let mut ctx = Ctx::eval(&b.params);
    let x = ctx.input(input(1, &[1, 3, 20]));
    let r = b.encode(&mut ctx, Modality::Src, x).unwrap();
    assert!(matches!(b.classify(&mut ctx, &r), Err(ModelError::Contract(_))));
}

#[test]
fn zero_rep_yields_head_bias() {
    for pool in [ClassifierPool::MeanTokens, ClassifierPool::Time] {
        let cfg = ModelCfg { classifier_pool: pool, ..micro_cfg() };
        let (s, d) = shapes(3, 2, 20, 5);
        let mut b = ModelBundle::<f64>::paired(&cfg, s, d, 4, 3).unwrap();
        let bias = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        b.params.set(b.head_bias(), bias.clone()).unwrap();
        let mut ctx = Ctx::eval(&b.params);
        let z = ctx.input(Tensor::zeros(vec![1, 2, 4, 8]));
        let r = LatentRep { var: z, modality: Modality::Dst, batch: 1, tokens: 2, patches: 4, dim: 8 };
        let logits = b.classify(&mut ctx, &r).unwrap();
        assert_eq!(ctx.graph.value(logits).data(), bias.data());
    }
}

#[test]
fn both_paths_share_the_classifier() {
    let b = micro(3);
    let mut ctx = Ctx::grad_no_dropout(&b.params);
    let xs = ctx.input(input(1, &[2, 3, 20]));
    let xd = ctx.input(input(2, &[2, 2, 20]));
    let rd = b.encode(&mut ctx, Modality::Dst, xd).unwrap();
    let rs = b.encode(&mut ctx, Modality::Src, xs).unwrap();
    let rt = b.translate(&mut ctx, Direction::S2d, &rs).unwrap();
    let before = ctx.bound_params().count();
    let l1 = b.classify(&mut ctx, &rd).unwrap();
    let mid = ctx.bound_params().count();
    let l2 = b.classify(&mut ctx, &rt).unwrap();
    assert!(mid > before);
    assert_eq!(ctx.bound_params().count(), mid);
    assert_eq!(ctx.graph.shape(l1), ctx.graph.shape(l2));
    assert_eq!(ctx.graph.shape(l1), &[2, 3]);
}

#[test]
fn time_pool_examples() {
    let store = ParamStore::<f64>::new();
    let mut ctx = Ctx::eval(&store);
    let z = ctx.input(Tensor::new(vec![1, 1, 2, 1], vec![2.0, 4.0]).unwrap());
    let r = LatentRep { var: z, modality: Modality::Dst, batch: 1, tokens: 1, patches: 2, dim: 1 };
    let p = time_pool(&mut ctx, &r, PoolKind::Time).unwrap();
    assert_eq!(ctx.graph.value(p).data(), &[3.0]);

    let slice = [1.0, -2.0, 0.5, 3.0, 7.0, -1.0];
    let data: Vec<f64> = (0..2).flat_map(|s| (0..3).flat_map(move |_| slice[s * 3..s * 3 + 3].to_vec())).collect();
    let z = ctx.input(Tensor::new(vec![1, 2, 3, 3], data).unwrap());
    let r = LatentRep { var: z, modality: Modality::Dst, batch: 1, tokens: 2, patches: 3, dim: 3 };
    let p = time_pool(&mut ctx, &r, PoolKind::Time).unwrap();
    for (a, b) in ctx.graph.value(p).data().iter().zip(slice) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn parameter_names_unique_and_owned() {
    let b = micro(3);
    let mut names: Vec<&str> = b.params.iter().map(|(_, n, _)| n).collect();
    let n = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), n);
    assert_eq!(b.nets(), Net::ALL.to_vec());
    for net in Net::ALL {
        assert!(!b.param_ids(net).is_empty());
    }
}

#[test]
fn init_is_seeded() {
    let a = micro(3);
    let b = micro(3);
    for ((_, _, x), (_, _, y)) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn encode_translate_classify_passes_grad_check() {
    let b = micro(3);
    let xs = input(11, &[2, 3, 20]);
    let report = param_grad_check("encode_translate_classify", &b, 1e-4, |b, ctx| {
        let x = ctx.input(xs.clone());
        let r = b.encode(ctx, Modality::Src, x)?;
        let t = b.translate(ctx, Direction::S2d, &r)?;
        let logits = b.classify(ctx, &t)?;
        let sm = ctx.graph.softmax(logits, 1)?;
        let w = ctx.input(input(12, &[2, 3]));
        let p = ctx.graph.mul(sm, w)?;
        Ok(ctx.graph.sum_all(p))
    });
    assert!(report.passed, "{report}");
}

#[test]
fn gradient_reaches_encoder_input() {
    let b = micro(3);
    let report = crate::numerics::grad_check("translate_to_input", &[input(13, &[1, 2, 20])], 1e-4, None, |g, v| {
        let mut ctx = Ctx::eval(&b.params);
        std::mem::swap(&mut ctx.graph, g);
        let x = v[0];
        let out = (|| -> Result<Var, ModelError> {
            let r = b.encode(&mut ctx, Modality::Dst, x)?;
            let t = b.translate(&mut ctx, Direction::D2s, &r)?;
            Ok(t.var)
        })();
        std::mem::swap(&mut ctx.graph, g);
        out.map_err(|e| match e {
            ModelError::Numerics(n) => n,
            other => crate::numerics::NumericsError::Invalid { op: "model", msg: other.to_string() },
        })
    });
    assert!(report.passed, "{report}");
}
