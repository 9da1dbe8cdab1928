use super::*;
use crate::dataset::{make_windows, synth_transfer_dataset, NormStats, WindowSet};
use crate::model::{EncoderCfg, ModelBundle, ModelCfg, StreamShape};

fn tiny_cfg() -> ModelCfg {
    let enc = EncoderCfg { d: 8, patch_len: Some(4), layers: 2, heads: 2, mlp_ratio: 2, dropout: 0.1, ..Default::default() };
    ModelCfg { src: enc.clone(), dst: enc, ..Default::default() }
}

fn sets() -> (WindowSet, WindowSet) {
    let recs = synth_transfer_dataset(3, 3, 6, 1.0);
    let names = |s: &str| vec![s.to_string()];
    let build = |r: &[crate::dataset::Recording]| {
        let mut set: Option<WindowSet> = None;
        for rec in r {
            let pairs = make_windows(rec, &names("SRC"), &names("DST"), 1.0, 1.0).unwrap();
            let w = WindowSet::from_pairs(&pairs).unwrap();
            match &mut set {
                Some(s) => s.extend(&w).unwrap(),
                None => set = Some(w),
            }
        }
        set.unwrap()
    };
    let mut train = build(&recs[..2]);
    let mut val = build(&recs[2..]);
    let stats = NormStats::fit(&train);
    stats.normalize(&mut train);
    stats.normalize(&mut val);
    (train, val)
}

fn bundle(train: &WindowSet, seed: u64) -> ModelBundle<f32> {
    let s = StreamShape { channels: train.src_channels, n_w: train.n_w, patch_len: 4 };
    let d = StreamShape { channels: train.dst_channels, n_w: train.n_w, patch_len: 4 };
    ModelBundle::paired(&tiny_cfg(), s, d, 6, seed).unwrap()
}

fn short(strict: bool) -> TrainConfig {
    TrainConfig { epochs_cls: 3, epochs_contrastive: 2, batch_size: 32, seed: 11, strict_determinism: strict, ..Default::default() }
}

#[test]
fn every_phase_updates_exactly_its_networks() {
    let (train, _) = sets();
    let b = bundle(&train, 1);
    let idx: Vec<usize> = (0..16).collect();
    let batch = train.batch::<f32>(&idx, true);
    let cfg = TrainConfig::default();
    for mode in [Mode::Baseline, Mode::Tsr, Mode::Ctsr, Mode::Cfsr] {
        for p in 0..cfg.phases(mode).len() {
            let a = audit_phase(&b, mode, p, &cfg, &batch).unwrap();
            assert!(a.passed(), "{a:?}");
        }
    }
    let a = audit_phase(&b, Mode::Baseline, 0, &cfg, &batch).unwrap();
    assert!(!a.updated.contains(&Net::ESrc));
    assert_eq!(a.terms.ce_src, 0.0);
    assert_eq!(a.terms.l_co, 0.0);
    let a = audit_phase(&b, Mode::Cfsr, 0, &cfg, &batch).unwrap();
    assert!(!a.updated.contains(&Net::Cls));
    assert_eq!(a.terms.l_cl, 0.0);
}

#[test]
fn dst_path_ignores_source_windows() {
    let (train, _) = sets();
    let b = bundle(&train, 2);
    let p1 = evaluate_path(&b, &train, EvalPath::Dst).unwrap();
    assert_eq!(p1.len(), train.len());
    let mut noisy = train.clone();
    for (i, v) in noisy.src.iter_mut().enumerate() {
        *v = ((i * 7919) % 101) as f64 - 50.0;
    }
    b.counters().reset();
    let p2 = evaluate_path(&b, &noisy, EvalPath::Dst).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(b.counters().get(Net::ESrc), 0);
    assert_eq!(b.counters().get(Net::TS2d), 0);
    let p3 = evaluate_path(&b, &noisy, EvalPath::SrcViaTranslator).unwrap();
    assert_eq!(p3.len(), train.len());
    assert!(b.counters().get(Net::ESrc) > 0);
}

#[test]
fn runs_are_bit_identical_and_prefetch_matches_strict() {
    let (train, val) = sets();
    let data = TrainData { train: &train, validation: &val };
    let run = |strict: bool| {
        let mut b = bundle(&train, 3);
        let out = train_fn(&mut b, Mode::Ctsr, &short(strict), data, &TrainOptions::default());
        (out.trace, b.params)
    };
    let (t1, p1) = run(true);
    let (t2, p2) = run(true);
    let (t3, _) = run(false);
    assert_eq!(t1, t2);
    assert_eq!(t1, t3);
    assert_eq!(t1.len(), 3);
    for ((_, _, a), (_, _, b)) in p1.iter().zip(p2.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

fn train_fn(b: &mut ModelBundle<f32>, mode: Mode, cfg: &TrainConfig, data: TrainData<'_>, opts: &TrainOptions) -> TrainOutcome {
    super::train(b, mode, cfg, data, opts).unwrap()
}

#[test]
fn resume_reproduces_uninterrupted_trace() {
    let (train, val) = sets();
    let data = TrainData { train: &train, validation: &val };
    let cfg = short(true);
    let mut full = bundle(&train, 4);
    let whole = train_fn(&mut full, Mode::Cfsr, &cfg, data, &TrainOptions::default());
    assert!(whole.completed);
    assert_eq!(whole.trace.len(), 5);
    assert!(whole.trace[0].val_macro_f1.is_none() && whole.trace[2].val_macro_f1.is_some());

    let dir = tempfile::tempdir().unwrap();
    let opts = |stop| TrainOptions {
        checkpoint: Some(dir.path().join("ckpt.bin")),
        checkpoint_every: 1,
        resume: true,
        stop_after_epochs: stop,
        trace_path: None,
    };
    // stop inside phase one, at the phase boundary, then inside phase two
    for stop in [1, 1, 2] {
        let mut b = bundle(&train, 4);
        let part = train_fn(&mut b, Mode::Cfsr, &cfg, data, &opts(Some(stop)));
        assert!(!part.completed);
    }
    let mut b = bundle(&train, 4);
    let resumed = train_fn(&mut b, Mode::Cfsr, &cfg, data, &opts(None));
    assert!(resumed.completed);
    assert_eq!(resumed.trace, whole.trace);
    assert_eq!(resumed.provenance, whole.provenance);
    for ((_, _, a), (_, _, c)) in b.params.iter().zip(full.params.iter()) {
        assert_eq!(a.data(), c.data());
    }
}

#[test]
fn provenance_and_validation_counters() {
    let (train, val) = sets();
    let data = TrainData { train: &train, validation: &val };
    let mut b = bundle(&train, 5);
    let out = train_fn(&mut b, Mode::Tsr, &short(true), data, &TrainOptions::default());
    assert_eq!(out.provenance.train_subjects.len(), 2);
    assert_eq!(out.provenance.validation_subjects.iter().collect::<Vec<_>>(), vec!["subject02"]);
    assert_eq!(out.provenance.validation_src_encoder_calls, 0);
    assert_eq!(out.provenance.validation_translator_calls, 0);
    assert_eq!(out.provenance.train_windows, 3 * train.len() as u64);
    let best = out.best_epoch.unwrap();
    let best_f1 = out.trace[best].val_macro_f1.unwrap();
    assert!(out.trace.iter().all(|r| r.val_macro_f1.unwrap() <= best_f1));
    assert!(out.trace[..best].iter().all(|r| r.val_macro_f1.unwrap() < best_f1));
}

#[test]
fn fused_mode_needs_a_fused_bundle() {
    let (train, val) = sets();
    let data = TrainData { train: &train, validation: &val };
    let mut b = bundle(&train, 6);
    assert!(super::train(&mut b, Mode::Fused, &short(true), data, &TrainOptions::default()).is_err());
    let (ft, fv) = (train.fused(), val.fused());
    let shape = StreamShape { channels: ft.dst_channels, n_w: ft.n_w, patch_len: 4 };
    let mut fb = ModelBundle::<f32>::fused(&tiny_cfg(), shape, 6, 6).unwrap();
    let out = train_fn(&mut fb, Mode::Fused, &short(true), TrainData { train: &ft, validation: &fv }, &TrainOptions::default());
    assert_eq!(out.trace.len(), 3);
    assert_eq!(evaluate_path(&fb, &fv, EvalPath::Dst).unwrap().len(), fv.len());
}
