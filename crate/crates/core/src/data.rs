//! Synthetic datasets, stratified splits, label-noise injection and the
//! class-balanced / permutation batch samplers.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::parallel;
use crate::seed;
use crate::transition::TransitionMatrix;

/// One training example.
///
/// `y_true` is the latent class and exists for evaluation only. `y_star` is
/// the label as delivered (after noise injection) and is never changed
/// afterwards. `y_current` is the live label that label correction rewrites.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    x: Vec<f64>,
    y_true: usize,
    y_star: usize,
    y_current: usize,
}

impl Sample {
    /// A clean sample: all three labels agree.
    pub fn clean(x: Vec<f64>, label: usize) -> Self {
        Sample {
            x,
            y_true: label,
            y_star: label,
            y_current: label,
        }
    }

    pub fn with_labels(x: Vec<f64>, y_true: usize, y_star: usize, y_current: usize) -> Self {
        Sample {
            x,
            y_true,
            y_star,
            y_current,
        }
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Latent class. Evaluation code only.
    pub fn y_true(&self) -> usize {
        self.y_true
    }

    pub fn y_star(&self) -> usize {
        self.y_star
    }

    pub fn y_current(&self) -> usize {
        self.y_current
    }

    pub(crate) fn set_current(&mut self, label: usize) {
        self.y_current = label;
    }

    fn set_observed(&mut self, label: usize) {
        self.y_star = label;
        self.y_current = label;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

/// Fixed-point-free class permutation used by pair-flip noise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Pairing(Vec<usize>);

impl Pairing {
    pub fn new(targets: Vec<usize>) -> Result<Self> {
        let n = targets.len();
        let mut seen = vec![false; n];
        for (i, &t) in targets.iter().enumerate() {
            if t >= n || seen[t] {
                return Err(Error::Config(format!("pairing {targets:?} is not a permutation")));
            }
            if t == i {
                return Err(Error::Config(format!("pairing maps class {i} to itself")));
            }
            seen[t] = true;
        }
        Ok(Pairing(targets))
    }

    /// `i → (i + 1) mod n`.
    pub fn cyclic(n: usize) -> Self {
        Pairing((0..n).map(|i| (i + 1) % n).collect())
    }

    pub fn target(&self, class: usize) -> usize {
        self.0[class]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<usize>> for Pairing {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Pairing::new(v)
    }
}

impl From<Pairing> for Vec<usize> {
    fn from(p: Pairing) -> Self {
        p.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub gamma: f64,
    /// Asymmetric only; defaults to the cyclic shift.
    pub pairing: Option<Pairing>,
    pub seed: u64,
}

impl NoiseSpec {
    /// The matrix labels are drawn from.
    pub fn oracle(&self, n_classes: usize) -> Result<TransitionMatrix> {
        match self.kind {
            NoiseKind::Symmetric => TransitionMatrix::symmetric(n_classes, self.gamma),
            NoiseKind::Asymmetric => {
                let pairing = self
                    .pairing
                    .clone()
                    .unwrap_or_else(|| Pairing::cyclic(n_classes));
                TransitionMatrix::asymmetric(n_classes, self.gamma, &pairing)
            }
        }
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

/// Isotropic spread at which a nearest-true-mean classifier scores about
/// 95.7% on 4 classes in 16 dimensions (measured 95.2–96.3% over seeds 0 to 9
/// at 1000 samples per class).
pub const CALIBRATED_SPREAD: f64 = 0.33;

impl BlobSpec {
    fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("need at least two feature dimensions".into()));
        }
        if !(self.spread > 0.0) || !self.spread.is_finite() {
            return Err(Error::Config(format!("spread must be positive, got {}", self.spread)));
        }
        Ok(())
    }

    /// Class means. When `n_classes ≤ dim` they are random orthonormal
    /// directions, so every pair of means is exactly `√2` apart; otherwise
    /// they are standard-normal vectors scaled to unit expected norm.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = seed::stream_rng(seed::derive(self.seed, "blob-means"), 0);
        let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        if self.n_classes > self.dim {
            let scale = 1.0 / (self.dim as f64).sqrt();
            return (0..self.n_classes)
                .map(|_| gaussian(&mut rng).into_iter().map(|v| v * scale).collect())
                .collect();
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.n_classes);
        while basis.len() < self.n_classes {
            let mut v = gaussian(&mut rng);
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                v.iter_mut().zip(b).for_each(|(a, c)| *a -= dot * c);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        basis
    }
}

/// Gaussian clusters around seeded class means; sample `j` of class `c` is
/// drawn from its own random stream.
pub fn generate_blobs(spec: &BlobSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let means = spec.class_means();
    let noise_seed = seed::derive(spec.seed, "blob-points");
    let total = spec.n_classes * spec.n_per_class;
    Ok(parallel::map_range(total, |idx| {
        let class = idx / spec.n_per_class;
        let mut rng = seed::stream_rng(noise_seed, idx as u64);
        let x = means[class]
            .iter()
            .map(|m| m + spec.spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Sample::clean(x, class)
    }))
}

/// Accuracy of assigning each sample to its nearest class mean (the Bayes
/// rule for equal-covariance isotropic blobs with equal priors).
pub fn nearest_mean_accuracy(means: &[Vec<f64>], samples: &[Sample]) -> f64 {
    let hits = samples
        .iter()
        .filter(|s| {
            let dist = |m: &Vec<f64>| -> f64 {
                m.iter().zip(s.x()).map(|(a, b)| (a - b).powi(2)).sum()
            };
            let best = means
                .iter()
                .enumerate()
                .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            best == s.y_true()
        })
        .count();
    hits as f64 / samples.len().max(1) as f64
}

/// Fractions of each class routed to the four splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub noisy_train: f64,
    pub clean_train: f64,
    pub valid: f64,
    pub test: f64,
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 4] {
        [self.noisy_train, self.clean_train, self.valid, self.test]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub noisy_train: Vec<Sample>,
    pub clean_train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    n_classes: usize,
    noise: Option<NoiseSpec>,
}

impl DatasetSplits {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.clean_train.first().map(|s| s.x.len()).unwrap_or(0)
    }

    /// The noise applied to `noisy_train`, if any.
    pub fn noise(&self) -> Option<&NoiseSpec> {
        self.noise.as_ref()
    }

    /// Corrupt `noisy_train` once. A second call is an error because the
    /// delivered labels are fixed after injection.
    pub fn inject_noise(&mut self, spec: &NoiseSpec) -> Result<()> {
        if self.noise.is_some() {
            return Err(Error::Precondition("noise was already injected".into()));
        }
        match spec.kind {
            NoiseKind::Symmetric => {
                inject_symmetric_noise(&mut self.noisy_train, self.n_classes, spec.gamma, spec.seed)?
            }
            NoiseKind::Asymmetric => {
                let pairing = spec
                    .pairing
                    .clone()
                    .unwrap_or_else(|| Pairing::cyclic(self.n_classes));
                inject_asymmetric_noise(&mut self.noisy_train, spec.gamma, &pairing, spec.seed)?
            }
        }
        self.noise = Some(spec.clone());
        Ok(())
    }

    /// Restore every live label of `noisy_train` to its delivered label.
    pub fn reset_corrections(&mut self) {
        for s in &mut self.noisy_train {
            s.y_current = s.y_star;
        }
    }
}

/// Stratified split: within each class the samples are shuffled and the
/// first `floor(fraction · count)` go to each split in turn.
pub fn split(
    samples: Vec<Sample>,
    n_classes: usize,
    fractions: SplitFractions,
    seed: u64,
    min_clean_per_class: usize,
) -> Result<DatasetSplits> {
    let fr = fractions.as_array();
    if fr.iter().any(|f| !(*f > 0.0)) || fr.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be positive and sum to at most 1: {fr:?}"
        )));
    }
    let mut by_class: Vec<Vec<Sample>> = vec![Vec::new(); n_classes];
    for s in samples {
        if s.y_true >= n_classes {
            return Err(Error::Precondition(format!("label {} out of range", s.y_true)));
        }
        by_class[s.y_true].push(s);
    }
    let mut parts: [Vec<Sample>; 4] = Default::default();
    for (c, mut members) in by_class.into_iter().enumerate() {
        let mut rng = seed::stream_rng(seed::derive(seed, "split"), c as u64);
        members.shuffle(&mut rng);
        let total = members.len();
        let counts: Vec<usize> = fr.iter().map(|f| (f * total as f64 + 1e-9).floor() as usize).collect();
        if counts[1] < min_clean_per_class.max(1) {
            return Err(Error::Config(format!(
                "class {c} gets {} clean samples, need at least {}",
                counts[1],
                min_clean_per_class.max(1)
            )));
        }
        let mut iter = members.into_iter();
        for (part, &k) in parts.iter_mut().zip(&counts) {
            part.extend(iter.by_ref().take(k));
        }
    }
    for (i, part) in parts.iter_mut().enumerate() {
        let mut rng = seed::stream_rng(seed::derive(seed, "split-order"), i as u64);
        part.shuffle(&mut rng);
    }
    let [noisy_train, clean_train, valid, test] = parts;
    Ok(DatasetSplits {
        noisy_train,
        clean_train,
        valid,
        test,
        n_classes,
        noise: None,
    })
}

fn draw_from_row(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.len() - 1
}

fn inject_from_oracle(samples: &mut [Sample], oracle: &TransitionMatrix, seed: u64) {
    let labels = parallel::map_range(samples.len(), |i| {
        let mut rng = seed::stream_rng(seed, i as u64);
        let u: f64 = rng.random();
        draw_from_row(oracle.row(samples[i].y_true), u)
    });
    for (s, y) in samples.iter_mut().zip(labels) {
        s.set_observed(y);
    }
}

/// Each delivered label is drawn from row `y_true` of the symmetric matrix,
/// using one random stream per sample index.
pub fn inject_symmetric_noise(samples: &mut [Sample], n_classes: usize, gamma: f64, seed: u64) -> Result<()> {
    let oracle = TransitionMatrix::symmetric(n_classes, gamma)?;
    inject_from_oracle(samples, &oracle, seed);
    Ok(())
}

/// Keep the label with probability `1 − γ`, otherwise flip to `pairing(y_true)`.
pub fn inject_asymmetric_noise(samples: &mut [Sample], gamma: f64, pairing: &Pairing, seed: u64) -> Result<()> {
    let oracle = TransitionMatrix::asymmetric(pairing.len(), gamma, pairing)?;
    inject_from_oracle(samples, &oracle, seed);
    Ok(())
}

/// Fraction of samples whose live label differs from the latent class.
pub fn noise_level(samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| s.y_current != s.y_true).count() as f64 / samples.len() as f64
}

/// Draws class-balanced clean batches: exactly `K` distinct samples per class.
#[derive(Clone, Debug)]
pub struct CleanSampler {
    by_class: Vec<Vec<usize>>,
    k: usize,
    rng: ChaCha8Rng,
}

impl CleanSampler {
    pub fn new(clean: &[Sample], n_classes: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, s) in clean.iter().enumerate() {
            if s.y_current >= n_classes {
                return Err(Error::Precondition(format!("label {} out of range", s.y_current)));
            }
            by_class[s.y_current].push(i);
        }
        if let Some((c, members)) = by_class.iter().enumerate().find(|(_, m)| m.len() < k) {
            return Err(Error::Config(format!(
                "class {c} has {} clean samples, K = {k}",
                members.len()
            )));
        }
        Ok(CleanSampler {
            by_class,
            k,
            rng: seed::stream_rng(seed::derive(seed, "clean-sampler"), 0),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.k * self.by_class.len()
    }

    /// Indices into the clean set, grouped by class.
    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size());
        for members in &self.by_class {
            let picks = rand::seq::index::sample(&mut self.rng, members.len(), self.k);
            out.extend(picks.into_iter().map(|p| members[p]));
        }
        out
    }
}

/// Noisy-set batches of size `M`: each epoch walks a fresh seeded permutation,
/// the last batch of an epoch may be shorter.
#[derive(Clone, Debug)]
pub struct NoisySampler {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
}

impl NoisySampler {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(Error::Config(format!(
                "noisy batch size {batch_size} must lie in 1..={len}"
            )));
        }
        Ok(NoisySampler {
            len,
            batch_size,
            seed: seed::derive(seed, "noisy-sampler"),
            epoch: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut perm: Vec<usize> = (0..self.len).collect();
        perm.shuffle(&mut seed::stream_rng(self.seed, self.epoch));
        self.epoch += 1;
        perm.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// CSV with columns `x0..x{d-1},y_true,y_star,y_current`.
pub fn samples_to_csv(samples: &[Sample]) -> String {
    let dim = samples.first().map(|s| s.x.len()).unwrap_or(0);
    let mut out: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    out.extend(["y_true", "y_star", "y_current"].map(String::from));
    let mut text = out.join(",");
    text.push('\n');
    for s in samples {
        let mut cols: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        cols.push(s.y_true.to_string());
        cols.push(s.y_star.to_string());
        cols.push(s.y_current.to_string());
        text.push_str(&cols.join(","));
        text.push('\n');
    }
    text
}

pub fn samples_from_csv(text: &str) -> Result<Vec<Sample>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?
        .split(',')
        .collect();
    if header.len() < 3 || header[header.len() - 3..] != ["y_true", "y_star", "y_current"] {
        return Err(Error::Parse {
            line: 1,
            message: "header must end with y_true,y_star,y_current".into(),
        });
    }
    let dim = header.len() - 3;
    for (i, h) in header[..dim].iter().enumerate() {
        if *h != format!("x{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column x{i}, found {h:?}"),
            });
        }
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 2;
            let cols: Vec<&str> = line.split(',').collect();
            check_dim("csv columns", header.len(), cols.len()).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let parse_err = |e: String| Error::Parse {
                line: line_no,
                message: e,
            };
            let x = cols[..dim]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| parse_err(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let label = |v: &str| v.parse::<usize>().map_err(|e| parse_err(e.to_string()));
            Ok(Sample::with_labels(
                x,
                label(cols[dim])?,
                label(cols[dim + 1])?,
                label(cols[dim + 2])?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transition::true_transition_empirical;
    use proptest::prelude::*;

    fn blobs(n: usize, per: usize, seed: u64) -> Vec<Sample> {
        generate_blobs(&BlobSpec {
            n_classes: n,
            n_per_class: per,
            dim: 16,
            spread: CALIBRATED_SPREAD,
            seed,
        })
        .unwrap()
    }

    fn three_sigma(p: f64, n: usize) -> f64 {
        3.0 * (p * (1.0 - p) / n as f64).sqrt()
    }

    #[test]
    fn blobs_are_reproducible() {
        assert_eq!(blobs(4, 50, 3), blobs(4, 50, 3));
        assert_ne!(blobs(4, 50, 3), blobs(4, 50, 4));
    }

    #[test]
    fn tiny_spread_is_separable() {
        let spec = BlobSpec {
            n_classes: 5,
            n_per_class: 100,
            dim: 8,
            spread: 1e-6,
            seed: 1,
        };
        let s = generate_blobs(&spec).unwrap();
        assert_eq!(nearest_mean_accuracy(&spec.class_means(), &s), 1.0);
    }

    #[test]
    fn calibrated_spread_lands_in_target_band() {
        for seed in 100..103 {
            let spec = BlobSpec {
                n_classes: 4,
                n_per_class: 1000,
                dim: 16,
                spread: CALIBRATED_SPREAD,
                seed,
            };
            let acc = nearest_mean_accuracy(&spec.class_means(), &generate_blobs(&spec).unwrap());
            assert!((0.92..=0.97).contains(&acc), "seed {seed}: {acc}");
        }
    }

    #[test]
    fn blob_spec_validation() {
        let mut spec = BlobSpec {
            n_classes: 1,
            n_per_class: 10,
            dim: 4,
            spread: 1.0,
            seed: 0,
        };
        assert!(generate_blobs(&spec).is_err());
        spec.n_classes = 3;
        spec.spread = 0.0;
        assert!(generate_blobs(&spec).is_err());
    }

    const FR: SplitFractions = SplitFractions {
        noisy_train: 0.8,
        clean_train: 0.05,
        valid: 0.05,
        test: 0.1,
    };

    #[test]
    fn split_sizes_and_stratification() {
        let s = split(blobs(4, 1000, 0), 4, FR, 1, 10).unwrap();
        assert_eq!(
            (s.noisy_train.len(), s.clean_train.len(), s.valid.len(), s.test.len()),
            (3200, 200, 200, 400)
        );
        for (part, per) in [(&s.noisy_train, 800), (&s.clean_train, 50), (&s.valid, 50), (&s.test, 100)] {
            for c in 0..4 {
                assert_eq!(part.iter().filter(|x| x.y_true() == c).count(), per);
            }
        }
    }

    #[test]
    fn split_determinism_contract() {
        let a = split(blobs(4, 200, 0), 4, FR, 1, 2).unwrap();
        let b = split(blobs(4, 200, 0), 4, FR, 1, 2).unwrap();
        let c = split(blobs(4, 200, 0), 4, FR, 2, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.clean_train.len(), c.clean_train.len());
        assert_ne!(a.clean_train, c.clean_train);
    }

    #[test]
    fn split_rejects_thin_clean_set() {
        assert!(matches!(
            split(blobs(4, 100, 0), 4, FR, 1, 10),
            Err(Error::Config(_))
        ));
    }

    fn noisy_splits(gamma: f64, kind: NoiseKind, n: usize, per: usize) -> DatasetSplits {
        let mut s = split(blobs(n, per, 5), n, FR, 3, 1).unwrap();
        s.inject_noise(&NoiseSpec {
            kind,
            gamma,
            pairing: None,
            seed: 77,
        })
        .unwrap();
        s
    }

    #[test]
    fn zero_noise_is_a_no_op() {
        for kind in [NoiseKind::Symmetric, NoiseKind::Asymmetric] {
            let s = noisy_splits(0.0, kind, 4, 100);
            assert!(s.noisy_train.iter().all(|x| x.y_star() == x.y_true()));
            assert_eq!(noise_level(&s.noisy_train), 0.0);
        }
    }

    #[test]
    fn symmetric_noise_rates() {
        let s = noisy_splits(0.8, NoiseKind::Symmetric, 10, 1000);
        let n = s.noisy_train.len();
        let kept = s.noisy_train.iter().filter(|x| x.y_star() == x.y_true()).count() as f64 / n as f64;
        assert!((kept - 0.28).abs() <= three_sigma(0.28, n), "{kept}");
        assert!((noise_level(&s.noisy_train) - 0.72).abs() <= three_sigma(0.72, n));
        // each specific wrong class gets γ/N = 0.08
        let to_next = s
            .noisy_train
            .iter()
            .filter(|x| x.y_star() == (x.y_true() + 1) % 10)
            .count() as f64
            / n as f64;
        assert!((to_next - 0.08).abs() <= three_sigma(0.08, n), "{to_next}");
        // live labels start at the delivered labels
        assert!(s.noisy_train.iter().all(|x| x.y_current() == x.y_star()));
    }

    #[test]
    fn asymmetric_noise_rates_and_support() {
        let s = noisy_splits(0.4, NoiseKind::Asymmetric, 4, 2000);
        let n = s.noisy_train.len();
        let kept = s.noisy_train.iter().filter(|x| x.y_star() == x.y_true()).count() as f64 / n as f64;
        assert!((kept - 0.6).abs() <= three_sigma(0.6, n));
        assert!((noise_level(&s.noisy_train) - 0.4).abs() <= three_sigma(0.4, n));
        assert!(s
            .noisy_train
            .iter()
            .all(|x| x.y_star() == x.y_true() || x.y_star() == (x.y_true() + 1) % 4));
    }

    #[test]
    fn empirical_transition_tracks_oracle() {
        let s = noisy_splits(0.6, NoiseKind::Symmetric, 4, 3000);
        let emp = true_transition_empirical(4, s.noisy_train.iter().map(|x| (x.y_true(), x.y_current()))).unwrap();
        let oracle = TransitionMatrix::symmetric(4, 0.6).unwrap();
        let per_class = s.noisy_train.len() / 4;
        for i in 0..4 {
            for j in 0..4 {
                let p = oracle.get(i, j);
                assert!((emp.get(i, j) - p).abs() <= three_sigma(p, per_class));
            }
        }
    }

    #[test]
    fn noise_is_injected_once() {
        let mut s = noisy_splits(0.2, NoiseKind::Symmetric, 4, 100);
        let again = NoiseSpec {
            kind: NoiseKind::Symmetric,
            gamma: 0.2,
            pairing: None,
            seed: 1,
        };
        assert!(s.inject_noise(&again).is_err());
    }

    #[test]
    fn pairing_validation() {
        assert!(Pairing::new(vec![1, 0, 2]).is_err());
        assert!(Pairing::new(vec![1, 1, 0]).is_err());
        assert!(Pairing::new(vec![2, 0, 1]).is_ok());
    }

    #[test]
    fn clean_batches_are_balanced() {
        let s = split(blobs(4, 400, 0), 4, FR, 1, 1).unwrap();
        let mut one = CleanSampler::new(&s.clean_train, 4, 1, 9).unwrap();
        let b = one.next_batch();
        assert_eq!(b.len(), 4);
        let mut sampler = CleanSampler::new(&s.clean_train, 4, 5, 9).unwrap();
        for _ in 0..20 {
            let b = sampler.next_batch();
            assert_eq!(b.len(), 20);
            let mut sorted = b.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 20, "no repeats within a batch");
            for c in 0..4 {
                assert_eq!(b.iter().filter(|&&i| s.clean_train[i].y_current() == c).count(), 5);
            }
        }
        assert!(CleanSampler::new(&s.clean_train, 4, 21, 0).is_err());
    }

    #[test]
    fn noisy_epoch_is_a_permutation() {
        let mut sampler = NoisySampler::new(103, 10, 4).unwrap();
        let epoch = sampler.next_epoch();
        assert_eq!(epoch.len(), 11);
        let mut all: Vec<usize> = epoch.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        let second = sampler.next_epoch();
        assert_ne!(epoch, second);
        assert_eq!(NoisySampler::new(103, 10, 4).unwrap().next_epoch(), epoch);
        let whole = NoisySampler::new(50, 50, 1).unwrap().next_epoch();
        assert_eq!(whole.len(), 1);
        assert!(NoisySampler::new(5, 6, 1).is_err());
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(samples_from_csv("a,b,c\n").is_err());
        assert!(samples_from_csv("x0,y_true,y_star,y_current\n1.0,0,0\n").is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_byte_exact(
            rows in prop::collection::vec((prop::collection::vec(-1e6f64..1e6, 3), 0usize..5, 0usize..5, 0usize..5), 1..20)
        ) {
            let samples: Vec<Sample> = rows
                .into_iter()
                .map(|(x, a, b, c)| Sample::with_labels(x, a, b, c))
                .collect();
            let text = samples_to_csv(&samples);
            let back = samples_from_csv(&text).unwrap();
            prop_assert_eq!(&back, &samples);
            prop_assert_eq!(samples_to_csv(&back), text);
        }
    }
}
