//! Local FIFO memory, gated global memory and the statistics that drive
//! admission.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::blocks::loss::check_normalized;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Detached encoder output of frame `frame_index`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Tensor<T>,
    pub frame_index: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Tensor<T>, frame_index: usize) -> Result<Self> {
        if !values.all_finite() {
            return Err(Error::NonFinite(format!("feature map of frame {frame_index}")));
        }
        Ok(FeatureMap { values, frame_index })
    }
}

fn check_order(last: Option<usize>, next: usize, which: &str) -> Result<()> {
    match last {
        Some(l) if next <= l => {
            Err(Error::Contract(format!("{which}: frame {next} pushed after frame {l}")))
        }
        _ => Ok(()),
    }
}

/// The `τ` most recent feature maps, oldest first.
#[derive(Clone, Debug)]
pub struct LocalMemory<T> {
    capacity: usize,
    entries: VecDeque<FeatureMap<T>>,
}

impl<T: Scalar> LocalMemory<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("local memory capacity must be at least 1".into()));
        }
        Ok(LocalMemory { capacity, entries: VecDeque::with_capacity(capacity + 1) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &FeatureMap<T>> {
        self.entries.iter()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|f| f.frame_index).collect()
    }

    pub fn push(&mut self, f: FeatureMap<T>) -> Result<()> {
        check_order(self.entries.back().map(|e| e.frame_index), f.frame_index, "local memory")?;
        self.entries.push_back(f);
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Stored maps followed by `current`, which is not stored.
    pub fn window<'a>(&'a self, current: &'a Tensor<T>) -> Vec<&'a Tensor<T>> {
        self.entries.iter().map(|f| &f.values).chain(std::iter::once(current)).collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Mean over pixels of `Σ_c p log p` (nats), with `0 log 0 = 0`.
pub fn representativeness<T: Scalar>(probs: &Tensor<T>) -> Result<f64> {
    check_normalized(probs)?;
    let (k, h, w) = probs.dims3("representativeness")?;
    let n = h * w;
    let d = probs.data();
    let mut total = 0.0;
    for i in 0..n {
        for c in 0..k {
            let p = d[c * n + i].to_f64_lossy();
            if p > 0.0 {
                total += p * p.ln();
            }
        }
    }
    Ok(total / n as f64)
}

/// Negative Frobenius distance between two feature maps.
pub fn frame_similarity<T: Scalar>(f: &Tensor<T>, latest: &Tensor<T>) -> Result<f64> {
    if f.shape() != latest.shape() {
        return Err(Error::shape("frame_similarity", format!("{:?} vs {:?}", f.shape(), latest.shape())));
    }
    let sq: f64 = f
        .data()
        .iter()
        .zip(latest.data())
        .map(|(&a, &b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(-sq.sqrt())
}

/// Outcome of one admission decision. `s` is `-inf` for the unconditional
/// first admission.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Admission {
    pub admitted: bool,
    pub r: f64,
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalEntry<T> {
    pub feature: FeatureMap<T>,
    pub r: f64,
    pub s: f64,
}

/// Feature maps admitted by the confidence and novelty gates.
#[derive(Clone, Debug)]
pub struct GlobalMemory<T> {
    entries: VecDeque<GlobalEntry<T>>,
    pub alpha: f64,
    pub beta: f64,
    capacity: Option<usize>,
    latest: Option<FeatureMap<T>>,
    last_seen: Option<usize>,
    comparisons: u64,
}

impl<T: Scalar> GlobalMemory<T> {
    pub fn new(alpha: f64, beta: f64, capacity: Option<usize>) -> Result<Self> {
        if capacity == Some(0) {
            return Err(Error::Config("global memory capacity must be at least 1".into()));
        }
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::Config(format!("thresholds must be finite, got alpha={alpha} beta={beta}")));
        }
        Ok(GlobalMemory {
            entries: VecDeque::new(),
            alpha,
            beta,
            capacity,
            latest: None,
            last_seen: None,
            comparisons: 0,
        })
    }

    /// The admission predicate for a non-empty memory.
    pub fn admits(&self, r: f64, s: f64) -> bool {
        r > self.alpha && s < self.beta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &GlobalEntry<T>> {
        self.entries.iter()
    }

    pub fn latest(&self) -> Option<&FeatureMap<T>> {
        self.latest.as_ref()
    }

    /// Number of similarity evaluations performed so far.
    pub fn comparisons(&self) -> u64 {
        self.comparisons
    }

    /// Considers `f` with predicted class probabilities `probs`.
    pub fn consider(&mut self, f: FeatureMap<T>, probs: &Tensor<T>) -> Result<Admission> {
        let r = representativeness(probs)?;
        self.consider_with_r(f, r)
    }

    /// As [`consider`](Self::consider) with a precomputed representativeness.
    pub fn consider_with_r(&mut self, f: FeatureMap<T>, r: f64) -> Result<Admission> {
        check_order(self.last_seen, f.frame_index, "global memory")?;
        self.last_seen = Some(f.frame_index);
        let (admitted, s) = match &self.latest {
            None => (true, f64::NEG_INFINITY),
            Some(latest) => {
                self.comparisons += 1;
                let s = frame_similarity(&f.values, &latest.values)?;
                (self.admits(r, s), s)
            }
        };
        if admitted {
            self.entries.push_back(GlobalEntry { feature: f.clone(), r, s });
            self.latest = Some(f);
            if let Some(cap) = self.capacity {
                while self.entries.len() > cap {
                    self.entries.pop_front();
                }
            }
        }
        Ok(Admission { admitted, r, s })
    }

    /// Up to `n` distinct entries drawn uniformly without replacement, in
    /// storage order.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<&FeatureMap<T>>> {
        if n == 0 {
            return Err(Error::Config("sample size must be at least 1".into()));
        }
        let len = self.entries.len();
        if len <= n {
            return Ok(self.entries.iter().map(|e| &e.feature).collect());
        }
        let mut idx = index::sample(rng, len, n).into_vec();
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| &self.entries[i].feature).collect())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.latest = None;
        self.last_seen = None;
        self.comparisons = 0;
    }
}

/// Running sums for threshold calibration: `α` is the mean of all per-frame
/// `r`, `β` the mean of all `s` measured against the previous frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Calibration {
    r_sum: f64,
    r_count: u64,
    s_sum: f64,
    s_count: u64,
}

impl Calibration {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one frame. `s` is `None` for the first frame of a video.
    pub fn add(&mut self, r: f64, s: Option<f64>) {
        self.r_sum += r;
        self.r_count += 1;
        if let Some(s) = s {
            self.s_sum += s;
            self.s_count += 1;
        }
    }

    pub fn merge(&mut self, other: &Calibration) {
        self.r_sum += other.r_sum;
        self.r_count += other.r_count;
        self.s_sum += other.s_sum;
        self.s_count += other.s_count;
    }

    pub fn frames(&self) -> u64 {
        self.r_count
    }

    /// `(α, β)`.
    pub fn finish(&self) -> Result<(f64, f64)> {
        if self.r_count == 0 {
            return Err(Error::Config("calibration needs at least one frame".into()));
        }
        if self.s_count == 0 {
            return Err(Error::Config("calibration needs at least one video with two frames".into()));
        }
        Ok((self.r_sum / self.r_count as f64, self.s_sum / self.s_count as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fm(v: f64, i: usize) -> FeatureMap<f64> {
        FeatureMap::new(Tensor::full(&[1, 4, 4], v), i).unwrap()
    }

    #[test]
    fn fifo_keeps_last_tau() {
        let mut m = LocalMemory::new(4).unwrap();
        for i in 0..6 {
            m.push(fm(0.0, i)).unwrap();
        }
        assert_eq!(m.frame_indices(), vec![2, 3, 4, 5]);
        assert!(m.push(fm(0.0, 3)).is_err());
    }

    #[test]
    fn window_appends_current() {
        let mut m = LocalMemory::new(4).unwrap();
        let cur = Tensor::full(&[1, 4, 4], 9.0);
        assert_eq!(m.window(&cur).len(), 1);
        m.push(fm(0.0, 0)).unwrap();
        m.push(fm(1.0, 1)).unwrap();
        let w = m.window(&cur);
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].data()[0], 9.0);
    }

    #[test]
    fn representativeness_cases() {
        let onehot = Tensor::new(&[2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(representativeness(&onehot).unwrap(), 0.0);
        let uniform = Tensor::full(&[2, 2, 2], 0.5);
        assert!((representativeness(&uniform).unwrap() + 0.693_147_180_559_945_3).abs() < 1e-12);
        let skew = Tensor::new(&[2, 1, 2], vec![0.9, 0.9, 0.1, 0.1]).unwrap();
        let r = representativeness(&skew).unwrap();
        assert!((r + 0.3251).abs() < 1e-4);
        assert!(r < -0.08);
        assert!(representativeness(&Tensor::full(&[2, 1, 1], 0.3)).is_err());
    }

    #[test]
    fn similarity_cases() {
        let z = Tensor::<f64>::zeros(&[16]);
        let o = Tensor::full(&[16], 1.0);
        assert_eq!(frame_similarity(&z, &z).unwrap(), 0.0);
        assert_eq!(frame_similarity(&z, &o).unwrap(), -4.0);
        assert_eq!(frame_similarity(&Tensor::<f64>::zeros(&[25]), &Tensor::full(&[25], 1.0)).unwrap(), -5.0);
        assert!(frame_similarity(&z, &Tensor::zeros(&[15])).is_err());
    }

    #[test]
    fn first_admission_and_gates() {
        let mut g = GlobalMemory::new(-0.08, -4.65, Some(256)).unwrap();
        let a = g.consider_with_r(fm(0.0, 0), -5.0).unwrap();
        assert!(a.admitted && a.s == f64::NEG_INFINITY);
        // 16 elements at distance 1 → s = -4, too similar
        assert!(!g.consider_with_r(fm(1.0, 1), -0.01).unwrap().admitted);
        // distance 1.5 per element → s = -6
        assert!(g.consider_with_r(fm(1.5, 2), -0.03).unwrap().admitted);
        assert!(!g.consider_with_r(fm(10.0, 3), -0.3251).unwrap().admitted);
        assert_eq!(g.len(), 2);
        assert_eq!(g.comparisons(), 3);
        assert!(g.consider_with_r(fm(0.0, 3), 0.0).is_err());
    }

    #[test]
    fn capacity_evicts_oldest() {
        let mut g = GlobalMemory::new(-1.0, -1.0, Some(2)).unwrap();
        for i in 0..5 {
            g.consider_with_r(fm(10.0 * i as f64, i), 0.0).unwrap();
        }
        let idx: Vec<usize> = g.entries().map(|e| e.feature.frame_index).collect();
        assert_eq!(idx, vec![3, 4]);
        assert_eq!(g.latest().unwrap().frame_index, 4);
    }

    #[test]
    fn sampling() {
        let mut g = GlobalMemory::new(-1.0, -1.0, None).unwrap();
        g.consider_with_r(fm(0.0, 0), 0.0).unwrap();
        g.consider_with_r(fm(5.0, 1), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(g.sample(4, &mut rng).unwrap().len(), 2);
        for i in 2..10 {
            g.consider_with_r(fm(5.0 * i as f64, i), 0.0).unwrap();
        }
        let pick = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            g.sample(4, &mut rng).unwrap().iter().map(|f| f.frame_index).collect::<Vec<_>>()
        };
        assert_eq!(pick(11), pick(11));
        assert_eq!(pick(11).len(), 4);
        assert!(g.sample(0, &mut rng).is_err());
    }

    #[test]
    fn calibration_means() {
        let mut c = Calibration::new();
        assert!(c.finish().is_err());
        c.add(0.0, None);
        c.add(-0.6931, Some(-3.0));
        let (a, b) = c.finish().unwrap();
        assert!((a + 0.34655).abs() < 1e-12);
        assert_eq!(b, -3.0);
    }
}
