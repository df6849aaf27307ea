//! Label transition matrices: the per-batch estimator, closed-form noise
//! oracles, divergence diagnostics and concentration bounds.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{NoiseKind, Pairing};
use crate::error::{check_dim, Error, Result};
use crate::parallel;
use crate::seed;

/// Denominator floor of [`chi2_divergence`].
pub const CHI2_FLOOR: f64 = 1e-6;

/// Row-stochastic `N×N` matrix with entry `(i, j) = p(noisy = j | true = i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub const ROW_TOLERANCE: f64 = 1e-9;

    /// Validating constructor over row-major entries.
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        check_dim("transition entries", n * n, entries.len())?;
        if n == 0 {
            return Err(Error::Precondition("empty transition matrix".into()));
        }
        for (i, row) in entries.chunks_exact(n).enumerate() {
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Precondition(format!(
                    "transition row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > Self::ROW_TOLERANCE {
                return Err(Error::Precondition(format!(
                    "transition row {i} sums to {sum}"
                )));
            }
        }
        Ok(TransitionMatrix { n, entries })
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        TransitionMatrix { n, entries }
    }

    pub fn uniform(n: usize) -> Self {
        TransitionMatrix {
            n,
            entries: vec![1.0 / n as f64; n * n],
        }
    }

    /// Symmetric noise: diagonal `1 − (N−1)γ/N`, off-diagonal `γ/N`.
    pub fn symmetric(n: usize, gamma: f64) -> Result<Self> {
        check_gamma(NoiseKind::Symmetric, gamma)?;
        if n < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let nf = n as f64;
        let diag = 1.0 - (nf - 1.0) / nf * gamma;
        let off = gamma / nf;
        let mut entries = vec![off; n * n];
        for i in 0..n {
            entries[i * n + i] = diag;
        }
        TransitionMatrix::new(n, entries)
    }

    /// Pair-flip noise: diagonal `1 − γ`, `(i, pairing(i)) = γ`, zero elsewhere.
    pub fn asymmetric(n: usize, gamma: f64, pairing: &Pairing) -> Result<Self> {
        check_gamma(NoiseKind::Asymmetric, gamma)?;
        check_dim("pairing size", n, pairing.len())?;
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0 - gamma;
            entries[i * n + pairing.target(i)] += gamma;
        }
        TransitionMatrix::new(n, entries)
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `Tᵀ p`: the noisy-label distribution implied by clean-label probabilities `p`.
    pub fn mix(&self, p: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|j| (0..self.n).map(|i| self.get(i, j) * p[i]).sum())
            .collect()
    }

    pub fn mean_diagonal(&self) -> f64 {
        mean_diagonal(self)
    }

    pub fn max_abs_diff(&self, other: &TransitionMatrix) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Entrywise mean of several matrices of equal size.
    pub fn average(matrices: &[TransitionMatrix]) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::Precondition("no matrices to average".into()))?;
        let n = first.n;
        let mut acc = vec![0.0; n * n];
        for m in matrices {
            check_dim("averaged matrix size", n, m.n)?;
            for (a, v) in acc.iter_mut().zip(&m.entries) {
                *a += v;
            }
        }
        let k = matrices.len() as f64;
        acc.iter_mut().for_each(|v| *v /= k);
        TransitionMatrix::new(n, acc)
    }

    /// Row-major CSV with a header of class indices.
    pub fn to_csv(&self) -> String {
        let mut out = (0..self.n).map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        out.push('\n');
        for row in self.entries.chunks_exact(self.n) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let n = header.split(',').count();
        for (i, h) in header.split(',').enumerate() {
            if h.trim() != i.to_string() {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("expected class index {i}, found {h:?}"),
                });
            }
        }
        let mut entries = Vec::with_capacity(n * n);
        for (row_idx, line) in lines.enumerate() {
            let values: Vec<&str> = line.split(',').collect();
            if values.len() != n {
                return Err(Error::Parse {
                    line: row_idx + 2,
                    message: format!("expected {n} values, found {}", values.len()),
                });
            }
            for v in values {
                entries.push(v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: row_idx + 2,
                    message: e.to_string(),
                })?);
            }
        }
        if entries.len() != n * n {
            return Err(Error::Parse {
                line: entries.len() / n.max(1) + 2,
                message: format!("expected {n} rows"),
            });
        }
        TransitionMatrix::new(n, entries)
    }
}

fn check_gamma(kind: NoiseKind, gamma: f64) -> Result<()> {
    let upper = match kind {
        NoiseKind::Symmetric => 1.0,
        NoiseKind::Asymmetric => 0.5,
    };
    if (0.0..upper).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{kind:?} noise level must lie in [0, {upper}), got {gamma}"
        )))
    }
}

/// Estimate the transition matrix from a clean batch and the noisy head's
/// outputs on it: `T̂ = (Σ y f(x)ᵀ) diag⁻¹(Σ y)`, i.e. row `i` is the mean
/// noisy-head output over the clean samples of class `i`.
///
/// Every class must be present in the batch; a missing class is an error.
pub fn estimate_transition<P: AsRef<[f64]>>(
    n_classes: usize,
    labels: &[usize],
    outputs: &[P],
) -> Result<TransitionMatrix> {
    check_dim("estimator outputs", labels.len(), outputs.len())?;
    let n = n_classes;
    let mut sums = vec![0.0; n * n];
    let mut counts = vec![0usize; n];
    for (&y, out) in labels.iter().zip(outputs) {
        let p = out.as_ref();
        check_dim("estimator output width", n, p.len())?;
        if y >= n {
            return Err(Error::Precondition(format!("label {y} out of range")));
        }
        let total: f64 = p.iter().sum();
        if p.iter().any(|v| !(0.0..=1.0).contains(v))
            || (total - 1.0).abs() > TransitionMatrix::ROW_TOLERANCE
        {
            return Err(Error::Precondition(
                "estimator inputs must be probability vectors".into(),
            ));
        }
        counts[y] += 1;
        for (s, v) in sums[y * n..(y + 1) * n].iter_mut().zip(p) {
            *s += v;
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Precondition(format!(
            "class {missing} has no clean samples in the batch"
        )));
    }
    for (row, &c) in sums.chunks_exact_mut(n).zip(&counts) {
        let inv = c as f64;
        row.iter_mut().for_each(|v| *v /= inv);
    }
    TransitionMatrix::new(n, sums)
}

/// Empirical `p(current | true)` from `(true, current)` label pairs.
pub fn true_transition_empirical<I>(n_classes: usize, pairs: I) -> Result<TransitionMatrix>
where
    I: IntoIterator<Item = (usize, usize)>,
{
    let n = n_classes;
    let mut counts = vec![0usize; n * n];
    let mut totals = vec![0usize; n];
    for (t, c) in pairs {
        if t >= n || c >= n {
            return Err(Error::Precondition(format!("label pair ({t}, {c}) out of range")));
        }
        counts[t * n + c] += 1;
        totals[t] += 1;
    }
    if let Some(missing) = totals.iter().position(|&c| c == 0) {
        return Err(Error::Precondition(format!("true class {missing} is empty")));
    }
    let entries = counts
        .chunks_exact(n)
        .zip(&totals)
        .flat_map(|(row, &tot)| row.iter().map(move |&c| c as f64 / tot as f64))
        .collect();
    TransitionMatrix::new(n, entries)
}

/// Row-wise Pearson χ² divergence `Σ_j (T̂_ij − T_ij)² / max(T_ij, floor)`,
/// averaged uniformly over rows.
pub fn chi2_divergence(estimate: &TransitionMatrix, truth: &TransitionMatrix) -> Result<f64> {
    check_dim("chi2 matrix size", truth.n, estimate.n)?;
    let n = truth.n;
    let total: f64 = (0..n)
        .map(|i| {
            estimate
                .row(i)
                .iter()
                .zip(truth.row(i))
                .map(|(e, t)| (e - t).powi(2) / t.max(CHI2_FLOOR))
                .sum::<f64>()
        })
        .sum();
    Ok(total / n as f64)
}

/// `trace(T) / N`.
pub fn mean_diagonal(t: &TransitionMatrix) -> f64 {
    (0..t.n).map(|i| t.get(i, i)).sum::<f64>() / t.n as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    pub epsilon: f64,
    pub k: usize,
}

impl BoundQuery {
    pub fn new(epsilon: f64, k: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0,1], got {epsilon}")));
        }
        if k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(BoundQuery { epsilon, k })
    }
}

/// `2 exp(−2 ε² K)`; may exceed 1.
pub fn hoeffding_bound(epsilon: f64, k: usize) -> f64 {
    2.0 * (-2.0 * epsilon * epsilon * k as f64).exp()
}

/// [`hoeffding_bound`] clipped to a probability.
pub fn hoeffding_probability(query: BoundQuery) -> f64 {
    hoeffding_bound(query.epsilon, query.k).clamp(0.0, 1.0)
}

/// Best achievable test accuracy when training on labels corrupted at level `γ`.
pub fn accuracy_upper_bound(kind: NoiseKind, gamma: f64, n_classes: usize) -> Result<f64> {
    check_gamma(kind, gamma)?;
    Ok(match kind {
        NoiseKind::Symmetric => {
            let r = (n_classes as f64 - 1.0) / n_classes as f64;
            r * gamma * gamma - 2.0 * r * gamma + 1.0
        }
        NoiseKind::Asymmetric => 2.0 * gamma * gamma - 2.0 * gamma + 1.0,
    })
}

/// The full estimation-error bound with the measurable quantities filled in.
/// The network norm, Lipschitz and input-radius constants stay symbolic.
pub fn estimation_bound_formula(n_classes: usize, k: usize, noisy_set_size: usize, epsilon: f64) -> String {
    format!(
        "P(|T̂_ij − T_ij| > {epsilon}) ≤ {n_classes}·L·B·(sqrt(2H·log 2) + 1)·Θ̄·ΠΦ̄_h / sqrt({noisy_set_size}) \
         + sqrt(−log {epsilon}) / sqrt(2·{noisy_set_size}) + {:.6}",
        hoeffding_bound(epsilon, k)
    )
}

/// Monte Carlo frequency of `max_ij |T̂_ij − T_ij| > ε` when the noisy
/// classifier is ideal.
///
/// Each clean sample of class `i` contributes a one-hot output drawn from row
/// `i` of `oracle`, so `T̂_ij` is a mean of `K` independent `[0,1]` variables
/// with expectation `T_ij`. Trial `t` uses its own random stream, making the
/// result independent of scheduling.
pub fn mc_bound_check(
    oracle: &TransitionMatrix,
    k: usize,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials < 1000 {
        return Err(Error::Config(format!("need at least 1000 trials, got {trials}")));
    }
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let n = oracle.n;
    let cumulative: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            oracle
                .row(i)
                .iter()
                .scan(0.0, |acc, v| {
                    *acc += v;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    let exceed = parallel::map_range(trials, |t| {
        let mut rng = seed::stream_rng(seed, t as u64);
        let mut counts = vec![0usize; n * n];
        for (i, cum) in cumulative.iter().enumerate() {
            for _ in 0..k {
                let u: f64 = rng.random();
                // last index absorbs rounding in the cumulative sum
                let j = cum.iter().position(|c| u < *c).unwrap_or(n - 1);
                counts[i * n + j] += 1;
            }
        }
        let worst = counts
            .iter()
            .zip(&oracle.entries)
            .map(|(&c, t)| (c as f64 / k as f64 - t).abs())
            .fold(0.0, f64::max);
        // absolute slack so that a deviation of exactly ε is not counted
        worst > epsilon + 1e-12
    });
    Ok(exceed.iter().filter(|&&e| e).count() as f64 / trials as f64)
}
