//! Evaluation: accuracy, label-recovery quality on the noisy training set,
//! incorrect-label detection scores and seed-level confidence intervals.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{self, argmax, ModelParams, PROB_FLOOR};
use crate::parallel::{self, pairwise_sum};

/// Which head produces the probabilities being scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringHead {
    #[default]
    Clean,
    Noisy,
}

/// Per-sample class probabilities from one head.
pub fn head_probabilities(model: &ModelParams, samples: &[Sample], head: ScoringHead) -> Result<Vec<Vec<f64>>> {
    parallel::map_slice(samples, |s| {
        let feats = nn::forward_features(&model.extractor, s.x())?;
        let h = match head {
            ScoringHead::Clean => &model.clean_head,
            ScoringHead::Noisy => &model.noisy_head,
        };
        Ok(nn::head_forward(h, &feats)?.into_vec())
    })
    .into_iter()
    .collect()
}

/// Fraction of samples whose clean-head argmax equals the latent class.
pub fn test_accuracy(model: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Precondition("accuracy of an empty set".into()));
    }
    let probs = head_probabilities(model, samples, ScoringHead::Clean)?;
    Ok(accuracy_from_probs(&probs, samples))
}

fn accuracy_from_probs(probs: &[Vec<f64>], samples: &[Sample]) -> f64 {
    let hits = probs
        .iter()
        .zip(samples)
        .filter(|(p, s)| argmax(p) == s.y_true())
        .count();
    hits as f64 / samples.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub overall_accuracy: f64,
    pub overall_nll: f64,
    /// Absent when no delivered label is wrong.
    pub incorrect_accuracy: Option<f64>,
    pub incorrect_nll: Option<f64>,
    pub incorrect_count: usize,
}

/// How well the clean head recovers latent classes on the noisy training
/// set, overall and on the samples whose delivered label was wrong. NLL uses
/// the natural log.
pub fn recovery_report(model: &ModelParams, noisy_train: &[Sample]) -> Result<RecoveryReport> {
    if noisy_train.is_empty() {
        return Err(Error::Precondition("recovery report of an empty set".into()));
    }
    let probs = head_probabilities(model, noisy_train, ScoringHead::Clean)?;
    let nll: Vec<f64> = probs
        .iter()
        .zip(noisy_train)
        .map(|(p, s)| -p[s.y_true()].max(PROB_FLOOR).ln())
        .collect();
    let hit: Vec<bool> = probs
        .iter()
        .zip(noisy_train)
        .map(|(p, s)| argmax(p) == s.y_true())
        .collect();
    let wrong: Vec<usize> = noisy_train
        .iter()
        .enumerate()
        .filter(|(_, s)| s.y_star() != s.y_true())
        .map(|(i, _)| i)
        .collect();
    let n = noisy_train.len() as f64;
    let (incorrect_accuracy, incorrect_nll) = if wrong.is_empty() {
        (None, None)
    } else {
        let k = wrong.len() as f64;
        let acc = wrong.iter().filter(|&&i| hit[i]).count() as f64 / k;
        let sub: Vec<f64> = wrong.iter().map(|&i| nll[i]).collect();
        (Some(acc), Some(pairwise_sum(&sub) / k))
    };
    Ok(RecoveryReport {
        overall_accuracy: hit.iter().filter(|h| **h).count() as f64 / n,
        overall_nll: pairwise_sum(&nll) / n,
        incorrect_accuracy,
        incorrect_nll,
        incorrect_count: wrong.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub auroc: f64,
    pub auprc: f64,
    /// Fraction of positives; the AUPRC of an uninformative scorer.
    pub prevalence: f64,
    pub head: ScoringHead,
}

/// Score each noisy-set sample by `1 − p(y_star | x)` and measure how well
/// that separates wrongly labelled samples (positives) from the rest.
pub fn detection_report(model: &ModelParams, noisy_train: &[Sample], head: ScoringHead) -> Result<DetectionReport> {
    let probs = head_probabilities(model, noisy_train, head)?;
    let scores: Vec<f64> = probs
        .iter()
        .zip(noisy_train)
        .map(|(p, s)| 1.0 - p[s.y_star()])
        .collect();
    let positives: Vec<bool> = noisy_train.iter().map(|s| s.y_star() != s.y_true()).collect();
    let pos = positives.iter().filter(|p| **p).count();
    Ok(DetectionReport {
        auroc: auroc(&scores, &positives)?,
        auprc: auprc(&scores, &positives)?,
        prevalence: pos as f64 / positives.len() as f64,
        head,
    })
}

fn check_binary(scores: &[f64], positives: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != positives.len() {
        return Err(Error::Dimension {
            context: "detection labels",
            expected: scores.len(),
            actual: positives.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Precondition("NaN detection score".into()));
    }
    let pos = positives.iter().filter(|p| **p).count();
    let neg = positives.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Precondition(format!(
            "detection needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score, grouped into runs of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve via the Mann–Whitney rank statistic, with tied
/// scores assigned their average rank.
pub fn auroc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, positives)?;
    let mut rank_sum = 0.0;
    let mut next_rank = 1.0;
    for g in tie_groups(scores) {
        let avg = next_rank + (g.len() as f64 - 1.0) / 2.0;
        rank_sum += avg * g.iter().filter(|&&i| positives[i]).count() as f64;
        next_rank += g.len() as f64;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Area under the precision–recall curve by step integration
/// `Σ (R_k − R_{k−1}) P_k`, sweeping thresholds from high to low with tied
/// scores entering together.
pub fn auprc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (pos, _) = check_binary(scores, positives)?;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for g in tie_groups(scores).into_iter().rev() {
        seen += g.len();
        tp += g.iter().filter(|&&i| positives[i]).count();
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub recall: f64,
}

/// ROC and PR operating points, one per distinct score (predict positive when `score ≥ threshold`).
pub fn detection_curve(scores: &[f64], positives: &[bool]) -> Result<Vec<CurvePoint>> {
    let (pos, neg) = check_binary(scores, positives)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut out = Vec::new();
    for g in tie_groups(scores).into_iter().rev() {
        let gp = g.iter().filter(|&&i| positives[i]).count();
        tp += gp;
        fp += g.len() - gp;
        out.push(CurvePoint {
            threshold: scores[g[0]],
            tpr: tp as f64 / pos as f64,
            fpr: fp as f64 / neg as f64,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / pos as f64,
        });
    }
    Ok(out)
}

pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("threshold,tpr,fpr,precision,recall\n");
    for p in points {
        s.push_str(&format!("{},{},{},{},{}\n", p.threshold, p.tpr, p.fpr, p.precision, p.recall));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
    /// Construction used for the half-width.
    pub method: String,
}

/// `mean ± 1.96 · s / √n` with the sample standard deviation `s`.
pub fn confidence_interval(values: &[f64]) -> Result<ConfidenceInterval> {
    if values.len() < 2 {
        return Err(Error::Precondition(format!(
            "confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    let sd = (pairwise_sum(&sq) / (n - 1.0)).sqrt();
    Ok(ConfidenceInterval {
        mean,
        half_width: 1.96 * sd / n.sqrt(),
        n: values.len(),
        method: "normal-1.96".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, HeadParams};
    use crate::seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    /// A model whose clean head outputs a fixed class for every input.
    fn constant_model(class: usize, n: usize) -> ModelParams {
        let mut m = ModelParams::init(2, &[3], n, 0).unwrap();
        let mut bias = vec![0.0; n];
        bias[class] = 50.0;
        *m.clean_head.dense_mut() = Dense::new(3, n, vec![0.0; 3 * n], bias).unwrap();
        m
    }

    /// A model whose clean head predicts the class nearest to the scalar input:
    /// logits `a·c·x − a·c²/2` peak at `c = x`.
    fn lookup_model(n: usize) -> ModelParams {
        let a = 80.0;
        let extractor = crate::nn::FeatureExtractorParams::new(
            vec![Dense::new(1, 1, vec![1.0], vec![0.0]).unwrap()],
            vec![crate::nn::Activation::Identity],
        )
        .unwrap();
        let hw: Vec<f64> = (0..n).map(|c| a * c as f64).collect();
        let hb: Vec<f64> = (0..n).map(|c| -a * (c * c) as f64 / 2.0).collect();
        let head = HeadParams::new(Dense::new(1, n, hw, hb).unwrap());
        ModelParams::from_parts(extractor, head.clone(), head).unwrap()
    }

    #[test]
    fn accuracy_cases() {
        let set: Vec<Sample> = (0..8).map(|i| Sample::clean(vec![i as f64, 0.0], i % 4)).collect();
        assert_eq!(test_accuracy(&constant_model(2, 4), &set).unwrap(), 0.25);
        assert!(test_accuracy(&constant_model(2, 4), &[]).is_err());
    }

    #[test]
    fn accuracy_hand_built() {
        let m = lookup_model(3);
        let set: Vec<Sample> = (0..3).map(|c| Sample::clean(vec![c as f64], c)).collect();
        assert_eq!(test_accuracy(&m, &set).unwrap(), 1.0);
        let mixed = vec![
            Sample::clean(vec![0.0], 0),
            Sample::clean(vec![1.0], 1),
            Sample::clean(vec![2.0], 0),
        ];
        assert_abs_diff_eq!(test_accuracy(&m, &mixed).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn recovery_perfect_and_empty_subset() {
        let m = lookup_model(3);
        let set: Vec<Sample> = (0..3).map(|c| Sample::with_labels(vec![c as f64], c, (c + 1) % 3, c)).collect();
        let r = recovery_report(&m, &set).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert_eq!(r.incorrect_accuracy, Some(1.0));
        assert!(r.overall_nll < 1e-9);
        let clean: Vec<Sample> = (0..3).map(|c| Sample::clean(vec![c as f64], c)).collect();
        let r = recovery_report(&m, &clean).unwrap();
        assert_eq!(r.incorrect_accuracy, None);
        assert_eq!(r.incorrect_nll, None);
    }

    #[test]
    fn recovery_of_memorizer_matches_label_noise() {
        // a model predicting y_star everywhere scores 1 − noise on the overall set
        let m = lookup_model(3);
        let set: Vec<Sample> = (0..30)
            .map(|i| {
                let star = i % 3;
                let truth = if i % 5 == 0 { (star + 1) % 3 } else { star };
                Sample::with_labels(vec![star as f64], truth, star, star)
            })
            .collect();
        let noise = set.iter().filter(|s| s.y_star() != s.y_true()).count() as f64 / 30.0;
        let r = recovery_report(&m, &set).unwrap();
        assert_abs_diff_eq!(r.overall_accuracy, 1.0 - noise, epsilon = 1e-12);
        assert_eq!(r.incorrect_accuracy, Some(0.0));
    }

    #[test]
    fn recovery_accuracy_streaming_equals_batch() {
        let m = ModelParams::init(2, &[4], 3, 5).unwrap();
        let mut rng = seed::stream_rng(1, 0);
        let set: Vec<Sample> = (0..200)
            .map(|i| Sample::with_labels(vec![rng.random(), rng.random()], i % 3, (i / 3) % 3, i % 3))
            .collect();
        let batch = recovery_report(&m, &set).unwrap().overall_accuracy;
        let mut hits = 0usize;
        for s in &set {
            if m.predict(s.x()).unwrap().argmax() == s.y_true() {
                hits += 1;
            }
        }
        assert_eq!(batch, hits as f64 / set.len() as f64);
    }

    #[test]
    fn auroc_separating_scores() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let pos = [false, false, true, true];
        assert_eq!(auroc(&scores, &pos).unwrap(), 1.0);
        assert_eq!(auprc(&scores, &pos).unwrap(), 1.0);
        let flipped = [true, true, false, false];
        assert_eq!(auroc(&scores, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn auroc_all_tied_is_half() {
        let scores = [0.5; 6];
        let pos = [true, false, true, false, false, true];
        assert_eq!(auroc(&scores, &pos).unwrap(), 0.5);
        assert_abs_diff_eq!(auprc(&scores, &pos).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn degenerate_balance_is_an_error() {
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auprc(&[0.1, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn curve_ends_at_full_recall() {
        let scores = [0.3, 0.1, 0.7, 0.7, 0.2];
        let pos = [true, false, true, false, false];
        let c = detection_curve(&scores, &pos).unwrap();
        let last = c.last().unwrap();
        assert_eq!((last.tpr, last.fpr, last.recall), (1.0, 1.0, 1.0));
        assert!(curve_to_csv(&c).starts_with("threshold,tpr,fpr,precision,recall\n"));
    }

    #[test]
    fn confidence_interval_cases() {
        let ci = confidence_interval(&[3.0, 3.0, 3.0]).unwrap();
        assert_eq!((ci.mean, ci.half_width), (3.0, 0.0));
        let ci = confidence_interval(&[0.0, 1.0]).unwrap();
        assert_eq!(ci.mean, 0.5);
        assert_abs_diff_eq!(ci.half_width, 1.96 * 0.5f64.sqrt() / 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(ci.half_width, 0.98, epsilon = 1e-3);
        let scaled = confidence_interval(&[0.0, -3.0]).unwrap();
        assert_abs_diff_eq!(scaled.mean, -1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(scaled.half_width, 3.0 * ci.half_width, epsilon = 1e-12);
        assert!(confidence_interval(&[1.0]).is_err());
    }
}
