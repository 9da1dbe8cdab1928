use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::probe::linear_probe;
use super::{make_windows, ModalitySpec, Recording, Result, Stream};

/// Generator parameters. Each subject performs every class in
/// `segments_per_class` bouts of `segment_seconds`, in random order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_classes: usize,
    /// Scale of the target's distractor motion and sensor noise.
    pub noise_dst: f64,
    /// Gain of the class signal as seen by the target.
    pub dst_gain: f64,
    pub sample_rate: f64,
    pub segment_seconds: f64,
    pub segments_per_class: usize,
    pub src_channels: usize,
    pub dst_channels: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            n_subjects: 4,
            n_classes: 6,
            noise_dst: 1.0,
            dst_gain: 0.35,
            sample_rate: 20.0,
            segment_seconds: 12.0,
            segments_per_class: 2,
            src_channels: 3,
            dst_channels: 3,
        }
    }
}

impl SynthParams {
    pub const SRC: &'static str = "SRC";
    pub const DST: &'static str = "DST";

    pub fn modalities(&self) -> Vec<ModalitySpec> {
        let chans = |n: usize| (0..n).map(|i| format!("c{i}")).collect();
        vec![
            ModalitySpec { name: Self::SRC.into(), channel_names: chans(self.src_channels) },
            ModalitySpec { name: Self::DST.into(), channel_names: chans(self.dst_channels) },
        ]
    }

    pub fn activities(&self) -> Vec<String> {
        (0..self.n_classes).map(|k| format!("class{k}")).collect()
    }
}

/// Recordings plus the per-sample latent features that generated them.
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub recordings: Vec<Recording>,
    /// Per recording, `LATENT_DIM` channels, channel-major like a stream.
    pub latents: Vec<Stream>,
}

/// Dimension of the latent class process.
pub const LATENT_DIM: usize = 3;

/// Two synthetic body locations observing a shared class-dependent
/// oscillatory latent. The source sees it cleanly; the target sees it
/// attenuated under larger class-independent distractor motion.
pub fn synth_transfer_dataset(seed: u64, n_subjects: usize, n_classes: usize, noise_dst: f64) -> Vec<Recording> {
    synth_generate(&SynthParams { seed, n_subjects, n_classes, noise_dst, ..Default::default() }).recordings
}

pub fn synth_generate(p: &SynthParams) -> SynthOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let k = p.n_classes.max(2);
    let randn = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let centers = randn(&mut rng, k * LATENT_DIM);
    let amps = randn(&mut rng, k * LATENT_DIM);
    let freqs: Vec<f64> = (0..k).map(|i| 0.6 + 1.8 * i as f64 / (k - 1) as f64).collect();
    let m_src = randn(&mut rng, p.src_channels * LATENT_DIM);
    let m_dst = randn(&mut rng, p.dst_channels * LATENT_DIM);
    let n = (p.segment_seconds * p.sample_rate).round() as usize;
    let sensor = Normal::new(0.0, 0.1).expect("noise std");
    let dst_sensor = Normal::new(0.0, 0.1 * p.noise_dst.max(0.0) + f64::MIN_POSITIVE).expect("noise std");
    let offset = Normal::new(0.0, 0.8 * p.noise_dst.max(0.0) + f64::MIN_POSITIVE).expect("offset std");

    let mut recordings = Vec::with_capacity(p.n_subjects);
    let mut latents = Vec::with_capacity(p.n_subjects);
    for subject in 0..p.n_subjects {
        let mut order: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, p.segments_per_class)).collect();
        order.shuffle(&mut rng);
        let gain: Vec<f64> = (0..LATENT_DIM).map(|_| rng.gen_range(0.8..1.2)).collect();
        let total = n * order.len();
        let mut src = vec![0.0; p.src_channels * total];
        let mut dst = vec![0.0; p.dst_channels * total];
        let mut lat = vec![0.0; 2 * LATENT_DIM * total];
        let mut labels = Vec::with_capacity(total);
        for (seg, &c) in order.iter().enumerate() {
            let amp_scale = rng.gen_range(0.7..1.3);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let jitter: Vec<f64> = (0..LATENT_DIM).map(|_| 0.15 * rng.sample::<f64, _>(StandardNormal)).collect();
            let dir = randn(&mut rng, p.dst_channels);
            let d_freq = rng.gen_range(0.5..2.5);
            let d_phase = rng.gen_range(0.0..2.0 * PI);
            let d_amp = 1.5 * p.noise_dst;
            let d_off: Vec<f64> = (0..p.dst_channels).map(|_| offset.sample(&mut rng)).collect();
            let center: Vec<f64> = (0..LATENT_DIM).map(|j| centers[c * LATENT_DIM + j] + jitter[j]).collect();
            let amp: Vec<f64> = (0..LATENT_DIM).map(|j| amps[c * LATENT_DIM + j] * amp_scale).collect();
            for i in 0..n {
                let t = i as f64 / p.sample_rate;
                let at = seg * n + i;
                let wave = (2.0 * PI * freqs[c] * t + phase).sin();
                let s: Vec<f64> = (0..LATENT_DIM).map(|j| (center[j] + amp[j] * wave) * gain[j]).collect();
                for ch in 0..p.src_channels {
                    let clean: f64 = (0..LATENT_DIM).map(|j| m_src[ch * LATENT_DIM + j] * s[j]).sum();
                    src[ch * total + at] = clean + sensor.sample(&mut rng);
                }
                let distract = d_amp * (2.0 * PI * d_freq * t + d_phase).sin();
                for ch in 0..p.dst_channels {
                    let clean: f64 = (0..LATENT_DIM).map(|j| m_dst[ch * LATENT_DIM + j] * s[j]).sum();
                    dst[ch * total + at] =
                        p.dst_gain * clean + dir[ch] * distract + d_off[ch] + dst_sensor.sample(&mut rng);
                }
                for j in 0..LATENT_DIM {
                    lat[j * total + at] = center[j];
                    lat[(LATENT_DIM + j) * total + at] = amp[j];
                }
                labels.push(c);
            }
        }
        let subject_id = format!("subject{subject:02}");
        recordings.push(Recording {
            subject_id,
            segment: 0,
            sample_rate: p.sample_rate,
            streams: vec![
                Stream { modality: SynthParams::SRC.into(), channels: p.src_channels, values: src },
                Stream { modality: SynthParams::DST.into(), channels: p.dst_channels, values: dst },
            ],
            labels,
        });
        latents.push(Stream { modality: "LATENT".into(), channels: 2 * LATENT_DIM, values: lat });
    }
    SynthOutput { recordings, latents }
}

/// Leave-one-subject-out linear-probe scores on a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeFloors {
    /// Mean macro-F1 of a probe on flattened raw target windows.
    pub raw_dst: f64,
    /// Mean macro-F1 of a probe on the generating latents at window centres.
    pub oracle: f64,
}

pub fn probe_floors(out: &SynthOutput, classes: usize, window_seconds: f64, slide_seconds: f64) -> Result<ProbeFloors> {
    struct Feats {
        raw: Vec<f64>,
        lat: Vec<f64>,
        y: Vec<usize>,
    }
    let mut per_subject = Vec::with_capacity(out.recordings.len());
    let (mut raw_dim, lat_dim) = (0, 2 * LATENT_DIM);
    for (rec, lat) in out.recordings.iter().zip(&out.latents) {
        let names = [SynthParams::DST.to_string()];
        let pairs = make_windows(rec, &names, &names, window_seconds, slide_seconds)?;
        let mut f = Feats { raw: Vec::new(), lat: Vec::new(), y: Vec::new() };
        let n = lat.len();
        let stride = (slide_seconds * rec.sample_rate).round() as usize;
        for p in &pairs {
            raw_dim = p.dst.values.len();
            f.raw.extend_from_slice(&p.dst.values);
            let centre = p.dst.window_index * stride + p.dst.n_w / 2;
            f.lat.extend((0..lat_dim).map(|j| lat.values[j * n + centre]));
            f.y.push(p.dst.label);
        }
        per_subject.push(f);
    }
    let (mut raw, mut oracle) = (0.0, 0.0);
    for test in 0..per_subject.len() {
        let mut tr = Feats { raw: Vec::new(), lat: Vec::new(), y: Vec::new() };
        for (_, f) in per_subject.iter().enumerate().filter(|(i, _)| *i != test) {
            tr.raw.extend_from_slice(&f.raw);
            tr.lat.extend_from_slice(&f.lat);
            tr.y.extend_from_slice(&f.y);
        }
        let te = &per_subject[test];
        raw += linear_probe(&tr.raw, &tr.y, &te.raw, &te.y, raw_dim, classes);
        oracle += linear_probe(&tr.lat, &tr.y, &te.lat, &te.y, lat_dim, classes);
    }
    let k = per_subject.len().max(1) as f64;
    Ok(ProbeFloors { raw_dst: raw / k, oracle: oracle / k })
}
