use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DatasetError, Recording, Result};
use crate::loss::Batch;
use crate::numerics::{Real, Tensor};

/// A `c × n_w` slice of one modality (or of several, channel-concatenated).
#[derive(Clone, Debug, PartialEq)]
pub struct SensorWindow {
    pub modality: String,
    pub channels: usize,
    pub n_w: usize,
    pub values: Vec<f64>,
    pub label: usize,
    pub subject_id: String,
    pub segment: usize,
    pub window_index: usize,
}

/// Source and target windows over the identical sample interval.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub src: SensorWindow,
    pub dst: SensorWindow,
}

/// Where a window came from.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowTag {
    pub subject: String,
    pub segment: usize,
    pub index: usize,
}

/// Number of windows of `w` samples at stride `s` in `len` samples.
pub fn window_count(len: usize, w: usize, s: usize) -> usize {
    if len < w || w == 0 || s == 0 {
        0
    } else {
        (len - w) / s + 1
    }
}

fn samples(seconds: f64, rate: f64, what: &str) -> Result<usize> {
    let exact = seconds * rate;
    let n = exact.round();
    if n < 1.0 || (exact - n).abs() > 1e-6 * exact.max(1.0) {
        return Err(DatasetError::Contract(format!(
            "{what} of {seconds} s at {rate} Hz is not a whole number of samples"
        )));
    }
    Ok(n as usize)
}

/// Majority label; ties go to the centre sample's label when it is among
/// the tied labels, otherwise to the smallest tied id.
fn window_label(labels: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let center = labels[labels.len() / 2];
    if counts.get(&center) == Some(&best) {
        return center;
    }
    counts
        .into_iter()
        .find(|&(_, c)| c == best)
        .map(|(l, _)| l)
        .unwrap_or(center)
}

fn gather(rec: &Recording, names: &[String], start: usize, w: usize) -> Result<(Vec<f64>, usize)> {
    let mut values = Vec::new();
    let mut channels = 0;
    for name in names {
        let s = rec.stream(name).ok_or_else(|| {
            DatasetError::Contract(format!("subject {} has no modality {name}", rec.subject_id))
        })?;
        for c in 0..s.channels {
            values.extend_from_slice(&s.channel(c)[start..start + w]);
        }
        channels += s.channels;
    }
    Ok((values, channels))
}

/// Index-aligned sliding windows over the `src` and `dst` modality groups
/// (each group is channel-concatenated in the given order).
pub fn make_windows(
    rec: &Recording,
    src: &[String],
    dst: &[String],
    window_seconds: f64,
    slide_seconds: f64,
) -> Result<Vec<WindowPair>> {
    let w = samples(window_seconds, rec.sample_rate, "window")?;
    let s = samples(slide_seconds, rec.sample_rate, "slide")?;
    let n = window_count(rec.len(), w, s);
    let (src_name, dst_name) = (src.join("+"), dst.join("+"));
    (0..n)
        .map(|i| {
            let start = i * s;
            let label = window_label(&rec.labels[start..start + w]);
            let window = |name: &str, group: &[String]| -> Result<SensorWindow> {
                let (values, channels) = gather(rec, group, start, w)?;
                Ok(SensorWindow {
                    modality: name.to_string(),
                    channels,
                    n_w: w,
                    values,
                    label,
                    subject_id: rec.subject_id.clone(),
                    segment: rec.segment,
                    window_index: i,
                })
            };
            Ok(WindowPair { src: window(&src_name, src)?, dst: window(&dst_name, dst)? })
        })
        .collect()
}

/// Windows of one split packed as `[N, c, n_w]` arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub src_channels: usize,
    pub dst_channels: usize,
    pub n_w: usize,
    pub src: Vec<f64>,
    pub dst: Vec<f64>,
    pub labels: Vec<usize>,
    pub tags: Vec<WindowTag>,
}

impl WindowSet {
    pub fn empty(src_channels: usize, dst_channels: usize, n_w: usize) -> Self {
        Self {
            src_channels,
            dst_channels,
            n_w,
            src: Vec::new(),
            dst: Vec::new(),
            labels: Vec::new(),
            tags: Vec::new(),
        }
    }

    pub fn from_pairs(pairs: &[WindowPair]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| DatasetError::Contract("no windows to pack".into()))?;
        let mut set = Self::empty(first.src.channels, first.dst.channels, first.src.n_w);
        for p in pairs {
            set.push(p)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, p: &WindowPair) -> Result<()> {
        let aligned = p.src.window_index == p.dst.window_index
            && p.src.subject_id == p.dst.subject_id
            && p.src.segment == p.dst.segment;
        if !aligned {
            return Err(DatasetError::Contract("window pair is not time-aligned".into()));
        }
        if p.src.channels != self.src_channels || p.dst.channels != self.dst_channels || p.src.n_w != self.n_w || p.dst.n_w != self.n_w {
            return Err(DatasetError::Contract(format!(
                "window shape mismatch: expected src {}x{} dst {}x{}",
                self.src_channels, self.n_w, self.dst_channels, self.n_w
            )));
        }
        self.src.extend_from_slice(&p.src.values);
        self.dst.extend_from_slice(&p.dst.values);
        self.labels.push(p.src.label);
        self.tags.push(WindowTag {
            subject: p.src.subject_id.clone(),
            segment: p.src.segment,
            index: p.src.window_index,
        });
        Ok(())
    }

    pub fn extend(&mut self, other: &WindowSet) -> Result<()> {
        if (other.src_channels, other.dst_channels, other.n_w) != (self.src_channels, self.dst_channels, self.n_w) {
            return Err(DatasetError::Contract("cannot merge window sets of different shapes".into()));
        }
        self.src.extend_from_slice(&other.src);
        self.dst.extend_from_slice(&other.dst);
        self.labels.extend_from_slice(&other.labels);
        self.tags.extend_from_slice(&other.tags);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn src_window(&self, i: usize) -> &[f64] {
        let n = self.src_channels * self.n_w;
        &self.src[i * n..(i + 1) * n]
    }

    pub fn dst_window(&self, i: usize) -> &[f64] {
        let n = self.dst_channels * self.n_w;
        &self.dst[i * n..(i + 1) * n]
    }

    /// Gathers the windows at `idx` into a batch (source omitted unless
    /// `with_src`).
    pub fn batch<F: Real>(&self, idx: &[usize], with_src: bool) -> Batch<F> {
        let pack = |c: usize, all: &[f64]| {
            let n = c * self.n_w;
            let data: Vec<F> = idx.iter().flat_map(|&i| all[i * n..(i + 1) * n].iter().map(|&v| F::from_f64(v))).collect();
            Tensor::new(vec![idx.len(), c, self.n_w], data).expect("window batch shape")
        };
        Batch {
            src: with_src.then(|| pack(self.src_channels, &self.src)),
            dst: pack(self.dst_channels, &self.dst),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Single-stream copy whose target windows hold every source channel
    /// followed by every target channel.
    pub fn fused(&self) -> WindowSet {
        let (cs, cd, n) = (self.src_channels * self.n_w, self.dst_channels * self.n_w, self.len());
        let mut dst = Vec::with_capacity(n * (cs + cd));
        for i in 0..n {
            dst.extend_from_slice(&self.src[i * cs..(i + 1) * cs]);
            dst.extend_from_slice(&self.dst[i * cd..(i + 1) * cd]);
        }
        WindowSet {
            src_channels: 0,
            dst_channels: self.src_channels + self.dst_channels,
            n_w: self.n_w,
            src: Vec::new(),
            dst,
            labels: self.labels.clone(),
            tags: self.tags.clone(),
        }
    }

    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.tags.iter().map(|t| t.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Statistics over every sample of every window in `values`
    /// (`[N, channels, n_w]`). Zero-variance channels get unit scale.
    pub fn fit(values: &[f64], channels: usize, n_w: usize) -> Self {
        if channels * n_w == 0 {
            return Self { mean: vec![0.0; channels], std: vec![1.0; channels] };
        }
        let mut sum = vec![0.0; channels];
        let mut count = 0usize;
        for w in values.chunks(channels * n_w) {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += w[c * n_w..(c + 1) * n_w].iter().sum::<f64>();
            }
            count += n_w;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut sq = vec![0.0; channels];
        for w in values.chunks(channels * n_w) {
            for (c, s) in sq.iter_mut().enumerate() {
                *s += w[c * n_w..(c + 1) * n_w].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn map(&self, values: &mut [f64], n_w: usize, f: impl Fn(f64, f64, f64) -> f64) {
        let c = self.mean.len();
        if c * n_w == 0 {
            return;
        }
        for w in values.chunks_mut(c * n_w) {
            for ch in 0..c {
                for v in &mut w[ch * n_w..(ch + 1) * n_w] {
                    *v = f(*v, self.mean[ch], self.std[ch]);
                }
            }
        }
    }

    pub fn normalize(&self, values: &mut [f64], n_w: usize) {
        self.map(values, n_w, |v, m, s| (v - m) / s);
    }

    pub fn denormalize(&self, values: &mut [f64], n_w: usize) {
        self.map(values, n_w, |v, m, s| v * s + m);
    }
}

/// Z-score statistics of both streams, fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub src: ChannelStats,
    pub dst: ChannelStats,
}

impl NormStats {
    pub fn fit(train: &WindowSet) -> Self {
        Self {
            src: ChannelStats::fit(&train.src, train.src_channels, train.n_w),
            dst: ChannelStats::fit(&train.dst, train.dst_channels, train.n_w),
        }
    }

    pub fn normalize(&self, set: &mut WindowSet) {
        self.src.normalize(&mut set.src, set.n_w);
        self.dst.normalize(&mut set.dst, set.n_w);
    }

    pub fn denormalize(&self, set: &mut WindowSet) {
        self.src.denormalize(&mut set.src, set.n_w);
        self.dst.denormalize(&mut set.dst, set.n_w);
    }
}

#[cfg(test)]
mod tests {
    use super::super::Stream;
    use super::*;
    use proptest::prelude::*;

    fn rec(len: usize, rate: f64) -> Recording {
        let ramp: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let mut two = ramp.clone();
        two.extend(ramp.iter().map(|v| -v));
        Recording {
            subject_id: "s1".into(),
            segment: 0,
            sample_rate: rate,
            streams: vec![
                Stream { modality: "A".into(), channels: 1, values: ramp.clone() },
                Stream { modality: "B".into(), channels: 2, values: two },
            ],
            labels: vec![0; len],
        }
    }

    fn names(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn window_counts() {
        let r = rec(1000, 100.0);
        assert_eq!(make_windows(&r, &names(&["A"]), &names(&["B"]), 2.0, 0.5).unwrap().len(), 17);
        assert_eq!(make_windows(&rec(200, 100.0), &names(&["A"]), &names(&["B"]), 2.0, 0.7).unwrap().len(), 1);
        assert!(make_windows(&rec(199, 100.0), &names(&["A"]), &names(&["B"]), 2.0, 0.5).unwrap().is_empty());
    }

    #[test]
    fn non_integral_window_is_rejected() {
        assert!(make_windows(&rec(100, 30.0), &names(&["A"]), &names(&["B"]), 0.25, 0.1).is_err());
    }

    #[test]
    fn pairs_cover_the_same_interval() {
        let r = rec(100, 10.0);
        let pairs = make_windows(&r, &names(&["A"]), &names(&["B", "A"]), 2.0, 0.5).unwrap();
        for p in &pairs {
            assert_eq!(p.src.window_index, p.dst.window_index);
            let start = p.src.window_index * 5;
            assert_eq!(p.src.values[0], start as f64);
            assert_eq!(p.dst.channels, 3);
            assert_eq!(p.dst.values[0], start as f64);
            assert_eq!(p.dst.values[20], -(start as f64));
            assert_eq!(p.dst.values[40], start as f64);
        }
    }

    #[test]
    fn majority_label_with_center_tie_break() {
        assert_eq!(window_label(&[1, 1, 1, 2]), 1);
        assert_eq!(window_label(&[1, 1, 2, 2]), 2);
        assert_eq!(window_label(&[2, 2, 1, 1]), 1);
        assert_eq!(window_label(&[3, 3, 0, 1, 1, 2]), 1);
        assert_eq!(window_label(&[3, 3, 1, 1, 2, 4]), 1);
        assert_eq!(window_label(&[3, 3, 1, 1, 0, 0, 2]), 1);
        assert_eq!(window_label(&[3, 3, 2, 1, 1]), 1);
        assert_eq!(window_label(&[4, 4, 3, 3, 2, 5, 5]), 3);
    }

    proptest! {
        #[test]
        fn window_count_matches_formula(len in 0usize..400, w in 1usize..60, s in 1usize..30) {
            let r = rec(len, 10.0);
            let pairs = make_windows(&r, &names(&["A"]), &names(&["B"]), w as f64 / 10.0, s as f64 / 10.0).unwrap();
            let want = if len < w { 0 } else { (len - w) / s + 1 };
            prop_assert_eq!(pairs.len(), want);
        }

        #[test]
        fn stats_ignore_train_order(seed in 0u64..500) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let r = Recording {
                streams: vec![
                    Stream { modality: "A".into(), channels: 1, values: (0..300).map(|_| rng.gen_range(-5.0..5.0)).collect() },
                    Stream { modality: "B".into(), channels: 2, values: (0..600).map(|_| rng.gen_range(0.0..100.0)).collect() },
                ],
                ..rec(300, 10.0)
            };
            let mut pairs = make_windows(&r, &names(&["A"]), &names(&["B"]), 2.0, 0.5).unwrap();
            let a = NormStats::fit(&WindowSet::from_pairs(&pairs).unwrap());
            pairs.shuffle(&mut rng);
            let b = NormStats::fit(&WindowSet::from_pairs(&pairs).unwrap());
            for (x, y) in a.dst.mean.iter().zip(&b.dst.mean).chain(a.dst.std.iter().zip(&b.dst.std)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_examples() {
        let s = ChannelStats { mean: vec![5.0], std: vec![2.0] };
        let mut v = vec![9.0, 5.0];
        s.normalize(&mut v, 2);
        assert_eq!(v, vec![2.0, 0.0]);

        let constant = vec![3.0; 8];
        let st = ChannelStats::fit(&constant, 1, 4);
        assert_eq!(st.std, vec![1.0]);
        let mut c = constant.clone();
        st.normalize(&mut c, 4);
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_round_trip() {
        let r = rec(300, 10.0);
        let pairs = make_windows(&r, &names(&["A"]), &names(&["B"]), 2.0, 0.5).unwrap();
        let orig = WindowSet::from_pairs(&pairs).unwrap();
        let stats = NormStats::fit(&orig);
        let mut set = orig.clone();
        stats.normalize(&mut set);
        let m: f64 = set.dst.iter().sum::<f64>() / set.dst.len() as f64;
        assert!(m.abs() < 1e-9);
        stats.denormalize(&mut set);
        for (a, b) in set.src.iter().chain(&set.dst).zip(orig.src.iter().chain(&orig.dst)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_gathers_requested_windows() {
        let r = rec(100, 10.0);
        let set = WindowSet::from_pairs(&make_windows(&r, &names(&["A"]), &names(&["B"]), 2.0, 0.5).unwrap()).unwrap();
        let b = set.batch::<f32>(&[3, 0], true);
        assert_eq!(b.dst.shape(), &[2, 2, 20]);
        assert_eq!(b.src.as_ref().unwrap().data()[0], 15.0);
        assert_eq!(b.src.as_ref().unwrap().data()[20], 0.0);
        assert!(set.batch::<f32>(&[1], false).src.is_none());
    }

    #[test]
    fn fused_sets_normalise_without_a_source_stream() {
        let r = rec(100, 10.0);
        let set = WindowSet::from_pairs(&make_windows(&r, &names(&["A"]), &names(&["B"]), 2.0, 0.5).unwrap()).unwrap();
        let mut fused = set.fused();
        let stats = NormStats::fit(&fused);
        assert!(stats.src.mean.is_empty());
        stats.normalize(&mut fused);
        assert!(fused.src.is_empty());
    }
}
