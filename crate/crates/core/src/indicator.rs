//! Rolling z-score of the innovation stream.

use std::collections::VecDeque;

use crate::scalar::Real;

pub const DEFAULT_WINDOW: usize = 80;
pub const DEFAULT_MIN_SAMPLES: usize = 10;

/// Population standard deviation (mean removed, denominator N) over a
/// sliding window of the most recent innovations.
///
/// Sums are kept relative to an anchor and rebuilt exactly once per window
/// length, which keeps the incremental estimate within round-off of a
/// from-scratch recomputation on arbitrarily long streams.
#[derive(Clone, Debug)]
pub struct RollingStd {
    window: usize,
    min_samples: usize,
    buf: VecDeque<f64>,
    count: usize,
    anchor: f64,
    s1: f64,
    s2: f64,
    since_rebuild: usize,
    degenerate: usize,
}

impl RollingStd {
    pub fn new(window: usize, min_samples: usize) -> Self {
        assert!(window >= 2, "window must hold at least two samples");
        let min_samples = min_samples.clamp(2, window);
        RollingStd {
            window,
            min_samples,
            buf: VecDeque::with_capacity(window),
            count: 0,
            anchor: 0.0,
            s1: 0.0,
            s2: 0.0,
            since_rebuild: 0,
            degenerate: 0,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn min_samples(&self) -> usize {
        self.min_samples
    }

    /// Samples seen since construction.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn buffer(&self) -> impl Iterator<Item = f64> + '_ {
        self.buf.iter().copied()
    }

    /// Number of times a score was withheld because the window had zero
    /// variance.
    pub fn degenerate_count(&self) -> usize {
        self.degenerate
    }

    fn rebuild(&mut self) {
        let n = self.buf.len().max(1) as f64;
        self.anchor = self.buf.iter().sum::<f64>() / n;
        self.s1 = 0.0;
        self.s2 = 0.0;
        for &x in &self.buf {
            let d = x - self.anchor;
            self.s1 += d;
            self.s2 += d * d;
        }
        self.since_rebuild = 0;
    }

    pub fn push(&mut self, x: f64) {
        assert!(x.is_finite(), "innovation must be finite");
        if self.buf.is_empty() {
            self.anchor = x;
        }
        if self.buf.len() == self.window {
            let old = self.buf.pop_front().unwrap_or(0.0) - self.anchor;
            self.s1 -= old;
            self.s2 -= old * old;
        }
        self.buf.push_back(x);
        let d = x - self.anchor;
        self.s1 += d;
        self.s2 += d * d;
        self.count += 1;
        self.since_rebuild += 1;
        if self.since_rebuild >= self.window {
            self.rebuild();
        }
    }

    /// Current σ̂, or `None` during warm-up or when the window is flat.
    pub fn std(&self) -> Option<f64> {
        if self.count < self.min_samples {
            return None;
        }
        let n = self.buf.len() as f64;
        let mean = self.s1 / n;
        let var = (self.s2 / n - mean * mean).max(0.0);
        let scale = self.buf.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let sd = var.sqrt();
        if sd == 0.0 || sd <= 1e-13 * scale {
            return None;
        }
        Some(sd)
    }

    /// Pushes `innovation` and returns `innovation / σ̂` once warm.
    pub fn update_and_score(&mut self, innovation: f64) -> Option<f64> {
        self.push(innovation);
        if self.count < self.min_samples {
            return None;
        }
        match self.std() {
            Some(sd) => Some(innovation / sd),
            None => {
                if self.degenerate == 0 {
                    log::warn!("innovation window has zero variance; z-score withheld");
                }
                self.degenerate += 1;
                None
            }
        }
    }
}

impl Default for RollingStd {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW, DEFAULT_MIN_SAMPLES)
    }
}

/// From-scratch population standard deviation, usable on tape variables.
pub fn window_std<T: Real>(xs: &[T]) -> T {
    let n = T::from_f64(xs.len() as f64);
    let mean = T::sum(xs) / n;
    let dev: Vec<T> = xs.iter().map(|&x| (x - mean) * (x - mean)).collect();
    (T::sum(&dev) / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn brute_std(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
    }

    #[test]
    fn constant_stream_is_degenerate() {
        let mut r = RollingStd::default();
        for _ in 0..30 {
            assert_eq!(r.update_and_score(1.0), None);
        }
        assert!(r.degenerate_count() > 0);
    }

    #[test]
    fn alternating_window() {
        let mut r = RollingStd::default();
        for i in 0..80 {
            r.push(if i % 2 == 0 { -1.0 } else { 1.0 });
        }
        // Window after the push: 79 alternating values plus the new 1.
        let z = r.update_and_score(1.0).unwrap();
        let window: Vec<f64> = r.buffer().collect();
        let sd = brute_std(&window);
        assert!((z - 1.0 / sd).abs() < 1e-12);
        assert!((sd - 1.0).abs() < 1e-3, "sd={sd}");
    }

    #[test]
    fn alternating_exact_window_gives_unit_score() {
        // A window of exactly forty (−1, +1) pairs: the newest sample is +1.
        let mut r = RollingStd::default();
        let mut last = None;
        for i in 0..80 {
            last = r.update_and_score(if i % 2 == 0 { -1.0 } else { 1.0 });
        }
        assert!((last.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warm_up_withholds_scores() {
        let mut r = RollingStd::new(80, 10);
        for i in 0..9 {
            assert_eq!(r.update_and_score(i as f64), None);
        }
        assert!(r.update_and_score(9.0).is_some());
    }

    #[test]
    fn incremental_matches_recomputation_on_long_stream() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let dist = Normal::new(0.3, 2.0).unwrap();
        let mut r = RollingStd::default();
        for step in 0..10_000 {
            r.push(dist.sample(&mut rng));
            if let Some(sd) = r.std() {
                let window: Vec<f64> = r.buffer().collect();
                let b = brute_std(&window);
                assert!((sd - b).abs() <= 1e-12 * b, "step {step}: {sd} vs {b}");
            }
        }
    }

    #[test]
    fn generic_window_std_matches() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        assert!((window_std(&xs) - brute_std(&xs)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn scale_invariance(
            xs in prop::collection::vec(-5.0f64..5.0, 20..200),
            c in 1e-3f64..1e3,
        ) {
            let mut a = RollingStd::default();
            let mut b = RollingStd::default();
            for &x in &xs {
                let za = a.update_and_score(x);
                let zb = b.update_and_score(c * x);
                match (za, zb) {
                    (Some(u), Some(v)) => prop_assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0)),
                    (None, None) => {}
                    other => prop_assert!(false, "mismatch {:?}", other),
                }
            }
        }
    }
}
