//! Fixtures shared by the benchmarks.

use xsense_core::dataset::{make_windows, synth_generate, NormStats, SynthParams, WindowSet};
use xsense_core::model::{EncoderCfg, ModelBundle, ModelCfg, StreamShape};

/// Normalized windows of a small synthetic dataset.
pub fn windows() -> WindowSet {
    let p = SynthParams { n_subjects: 2, ..Default::default() };
    let recs = synth_generate(&p).recordings;
    let mut set = WindowSet::empty(p.src_channels, p.dst_channels, 40);
    for r in &recs {
        let pairs = make_windows(r, &[SynthParams::SRC.into()], &[SynthParams::DST.into()], 2.0, 0.5).expect("windows");
        set.extend(&WindowSet::from_pairs(&pairs).expect("set")).expect("extend");
    }
    NormStats::fit(&set).normalize(&mut set);
    set
}

pub fn model_cfg(d: usize, layers: usize) -> ModelCfg {
    let enc = EncoderCfg { d, layers, heads: 2, patch_len: Some(4), ..Default::default() };
    ModelCfg { src: enc.clone(), dst: enc, ..Default::default() }
}

pub fn bundle(set: &WindowSet, d: usize, layers: usize) -> ModelBundle<f32> {
    let s = StreamShape { channels: set.src_channels, n_w: set.n_w, patch_len: 4 };
    let t = StreamShape { channels: set.dst_channels, n_w: set.n_w, patch_len: 4 };
    ModelBundle::paired(&model_cfg(d, layers), s, t, 6, 0).expect("bundle")
}
