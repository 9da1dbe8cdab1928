//! Multinomial logistic-regression probe: the linear floor/ceiling against
//! which learned representations are judged.

use crate::evaluation::ConfusionMatrix;

/// Inverse L2 strength, as in the usual `C` parameterisation.
pub const PROBE_C: f64 = 1.0;
const ITERS: usize = 600;
const LR: f64 = 0.05;

/// Fitted probe over standardised features.
#[derive(Clone, Debug)]
pub struct Probe {
    mean: Vec<f64>,
    std: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
    dim: usize,
    classes: usize,
}

impl Probe {
    /// Full-batch Adam on mean cross-entropy plus `|W|² / (2 C n)`.
    pub fn fit(x: &[f64], y: &[usize], dim: usize, classes: usize) -> Self {
        let n = y.len();
        assert_eq!(x.len(), n * dim, "probe features must be [n, dim]");
        let mut mean = vec![0.0; dim];
        for row in x.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut std = vec![0.0; dim];
        for row in x.chunks(dim) {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        for s in &mut std {
            *s = if *s > 1e-16 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<f64> = x
            .chunks(dim)
            .flat_map(|row| row.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect::<Vec<_>>())
            .collect();

        let mut p = Probe { mean, std, w: vec![0.0; dim * classes], b: vec![0.0; classes], dim, classes };
        let np = p.w.len() + classes;
        let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
        let reg = 1.0 / (PROBE_C * n as f64);
        for step in 1..=ITERS {
            let mut g = vec![0.0; np];
            for (row, &label) in z.chunks(dim).zip(y) {
                let probs = p.softmax(row);
                for k in 0..classes {
                    let d = (probs[k] - if k == label { 1.0 } else { 0.0 }) / n as f64;
                    for j in 0..dim {
                        g[j * classes + k] += d * row[j];
                    }
                    g[p.w.len() + k] += d;
                }
            }
            for (gi, wi) in g.iter_mut().zip(&p.w) {
                *gi += reg * wi;
            }
            let (c1, c2) = (1.0 - 0.9f64.powi(step as i32), 1.0 - 0.999f64.powi(step as i32));
            for i in 0..np {
                m1[i] = 0.9 * m1[i] + 0.1 * g[i];
                m2[i] = 0.999 * m2[i] + 0.001 * g[i] * g[i];
                let delta = LR * (m1[i] / c1) / ((m2[i] / c2).sqrt() + 1e-8);
                if i < p.w.len() {
                    p.w[i] -= delta;
                } else {
                    p.b[i - p.w.len()] -= delta;
                }
            }
        }
        p
    }

    fn softmax(&self, z: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.classes)
            .map(|k| self.b[k] + (0..self.dim).map(|j| z[j] * self.w[j * self.classes + k]).sum::<f64>())
            .collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, x: &[f64]) -> Vec<usize> {
        x.chunks(self.dim)
            .map(|row| {
                let z: Vec<f64> = row.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]).collect();
                let p = self.softmax(&z);
                (0..self.classes).fold(0, |best, k| if p[k] > p[best] { k } else { best })
            })
            .collect()
    }
}

/// Macro-F1 of a probe fitted on `(train_x, train_y)` and scored on the
/// test pair.
pub fn linear_probe(
    train_x: &[f64],
    train_y: &[usize],
    test_x: &[f64],
    test_y: &[usize],
    dim: usize,
    classes: usize,
) -> f64 {
    let probe = Probe::fit(train_x, train_y, dim, classes);
    let pred = probe.predict(test_x);
    ConfusionMatrix::from_predictions(classes, test_y, &pred).macro_f1()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn separable_blobs_are_learned() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let centers = [[3.0, 0.0], [0.0, 3.0], [-3.0, -3.0]];
        let mut draw = |n: usize| {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for i in 0..n {
                let k = i % 3;
                x.push(centers[k][0] + rng.gen_range(-1.0..1.0));
                x.push(centers[k][1] + rng.gen_range(-1.0..1.0));
                y.push(k);
            }
            (x, y)
        };
        let (xa, ya) = draw(90);
        let (xb, yb) = draw(60);
        assert_eq!(linear_probe(&xa, &ya, &xb, &yb, 2, 3), 1.0);
    }

    #[test]
    fn noise_features_stay_near_chance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let xa: Vec<f64> = (0..400 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ya: Vec<usize> = (0..400).map(|i| i % 4).collect();
        let xb: Vec<f64> = (0..400 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f1 = linear_probe(&xa, &ya, &xb, &ya, 4, 4);
        assert!(f1 < 0.4, "{f1}");
    }
}
