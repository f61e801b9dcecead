use std::f64::consts::{PI, TAU};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Nuisance parameters of the grating task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthTask {
    /// Amplitude is drawn uniformly from this interval per sample.
    pub amplitude: (f64, f64),
    /// Phase offset is drawn uniformly from `±phase_jitter` per sample.
    pub phase_jitter: f64,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise_std: f64,
}

impl Default for SynthTask {
    fn default() -> Self {
        SynthTask {
            amplitude: (0.25, 0.45),
            phase_jitter: PI / 2.0,
            noise_std: 0.12,
        }
    }
}

impl SynthTask {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.amplitude;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::contract(format!("amplitude interval [{lo}, {hi}] is invalid")));
        }
        if !(self.phase_jitter >= 0.0 && self.phase_jitter.is_finite()) {
            return Err(Error::contract(format!("phase jitter must be >= 0, got {}", self.phase_jitter)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::contract(format!("noise std must be >= 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

/// Spatial frequency `(fx, fy)` in cycles per image and base phase of
/// class `k`. Frequencies walk the low-frequency lattice so that any class
/// count up to 24 gets distinct patterns.
fn class_pattern(k: usize) -> (f64, f64, f64) {
    const LATTICE: [(i32, i32); 24] = [
        (1, 0), (0, 1), (1, 1), (1, -1), (2, 0), (0, 2), (2, 1), (1, 2),
        (2, -1), (1, -2), (2, 2), (2, -2), (3, 0), (0, 3), (3, 1), (1, 3),
        (3, -1), (1, -3), (3, 2), (2, 3), (3, -2), (2, -3), (3, 3), (3, -3),
    ];
    let (fx, fy) = LATTICE[k % LATTICE.len()];
    let phase = (k as f64 * 0.7) % TAU;
    (fx as f64, fy as f64, phase)
}

fn render(out: &mut Vec<f64>, k: usize, h: usize, w: usize, amp: f64, dphi: f64, noise: &mut dyn FnMut() -> f64) {
    let (fx, fy, phase) = class_pattern(k);
    for y in 0..h {
        for x in 0..w {
            let arg = TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase + dphi;
            let v = 0.5 + amp * arg.cos() + noise();
            out.push(v.clamp(0.0, 1.0));
        }
    }
}

/// Seeded single-channel grating task with default nuisance parameters.
/// Sample `i` has class `i mod classes` before a seeded shuffle, so counts
/// are balanced within one.
pub fn synth_dataset(seed: u64, n: usize, classes: usize, h: usize, w: usize) -> Result<Dataset> {
    synth_dataset_with(&SynthTask::default(), seed, n, classes, h, w)
}

pub fn synth_dataset_with(task: &SynthTask, seed: u64, n: usize, classes: usize, h: usize, w: usize) -> Result<Dataset> {
    task.validate()?;
    if classes == 0 || n < classes {
        return Err(Error::contract(format!("need n >= classes >= 1, got n={n}, classes={classes}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::contract("image extents must be positive"));
    }
    let mut rng = SplitMix64::derive(seed, 0xDA7A);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(n * h * w);
    for &k in &labels {
        let amp = rng.uniform(task.amplitude.0, task.amplitude.1);
        let dphi = rng.uniform(-task.phase_jitter, task.phase_jitter);
        let mut noise_rng = SplitMix64::new(rng.next_u64());
        render(&mut data, k, h, w, amp, dphi, &mut || task.noise_std * noise_rng.normal());
    }
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    Dataset::new(images, labels, classes)
}

/// One noiseless, unjittered image per class at mid amplitude.
pub fn synth_patterns(classes: usize, h: usize, w: usize) -> Result<Dataset> {
    let (lo, hi) = SynthTask::default().amplitude;
    let amp = 0.5 * (lo + hi);
    let mut data = Vec::with_capacity(classes * h * w);
    for k in 0..classes {
        render(&mut data, k, h, w, amp, 0.0, &mut || 0.0);
    }
    Dataset::new(Tensor::new(vec![classes, 1, h, w], data)?, (0..classes).collect(), classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_a_seed() {
        let a = synth_dataset(3, 50, 10, 8, 8).unwrap();
        let b = synth_dataset(3, 50, 10, 8, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(4, 50, 10, 8, 8).unwrap());
    }

    #[test]
    fn one_sample_per_class_when_n_equals_classes() {
        let d = synth_dataset(1, 10, 10, 8, 8).unwrap();
        let mut l = d.labels().to_vec();
        l.sort();
        assert_eq!(l, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn balanced_and_in_range() {
        let d = synth_dataset(9, 105, 10, 8, 8).unwrap();
        let mut counts = [0usize; 10];
        d.labels().iter().for_each(|&l| counts[l] += 1);
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1);
        assert!(d.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_dataset(0, 5, 10, 8, 8).is_err());
    }

    #[test]
    fn patterns_are_distinct() {
        let p = synth_patterns(24, 8, 8).unwrap();
        let per = 64;
        let d = p.images().data();
        for a in 0..24 {
            for b in a + 1..24 {
                let diff: f64 = (0..per).map(|i| (d[a * per + i] - d[b * per + i]).abs()).sum();
                assert!(diff > 1.0, "classes {a} and {b} look alike");
            }
        }
    }
}
