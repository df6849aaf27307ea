//! Feed-forward classifier with a shared feature extractor and two linear
//! softmax heads, analytic gradients, and SGD with momentum.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::parallel;
use crate::seed;
use crate::transition::TransitionMatrix;

/// Lower bound applied to probabilities inside `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Samples per accumulation chunk in [`backward_from`]. The chunking is the
/// same in sequential and parallel mode, which keeps gradients bitwise equal.
const GRAD_CHUNK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `y = W x + b`; `weights` is row-major with one row per output.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn new(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_dim("dense weights", inputs * outputs, weights.len())?;
        check_dim("dense bias", outputs, bias.len())?;
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Precondition("dense parameters must be finite".into()));
        }
        Ok(Dense {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases alike.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
            bias: (0..outputs).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, v)| acc + w * v))
            .collect()
    }

    /// `W += delta ⊗ input`, `b += delta`.
    fn accumulate(&mut self, input: &[f64], delta: &[f64]) {
        for ((row, b), d) in self
            .weights
            .chunks_exact_mut(self.inputs)
            .zip(self.bias.iter_mut())
            .zip(delta)
        {
            if *d == 0.0 {
                continue;
            }
            *b += d;
            for (w, v) in row.iter_mut().zip(input) {
                *w += d * v;
            }
        }
    }

    /// `out += Wᵀ delta`.
    fn backprop_into(&self, delta: &[f64], out: &mut [f64]) {
        for (row, d) in self.weights.chunks_exact(self.inputs).zip(delta) {
            if *d == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += d * w;
            }
        }
    }

    fn add_assign(&mut self, other: &Dense) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }

    fn zeros_like(&self) -> Dense {
        Dense::zeros(self.inputs, self.outputs)
    }
}

/// Shared feature extractor: a chain of dense layers, each followed by its activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractorParams {
    layers: Vec<Dense>,
    activations: Vec<Activation>,
}

impl FeatureExtractorParams {
    pub fn new(layers: Vec<Dense>, activations: Vec<Activation>) -> Result<Self> {
        check_dim("extractor activations", layers.len(), activations.len())?;
        if layers.is_empty() {
            return Err(Error::Precondition("extractor needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("extractor layer chain", pair[0].outputs, pair[1].inputs)?;
        }
        Ok(FeatureExtractorParams {
            layers,
            activations,
        })
    }

    /// ReLU layers of the given widths on top of `input_dim`.
    pub fn init<R: Rng>(input_dim: usize, widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("extractor needs at least one hidden width".into()));
        }
        let mut fan_in = input_dim;
        let mut layers = Vec::with_capacity(widths.len());
        for &w in widths {
            layers.push(Dense::init(fan_in, w, rng));
            fan_in = w;
        }
        let activations = vec![Activation::Relu; widths.len()];
        Self::new(layers, activations)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }
}

/// Linear softmax head; weights hold `n_classes` rows of `feature_dim` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams(Dense);

impl HeadParams {
    pub fn new(dense: Dense) -> Self {
        HeadParams(dense)
    }

    pub fn zeros(feature_dim: usize, n_classes: usize) -> Self {
        HeadParams(Dense::zeros(feature_dim, n_classes))
    }

    pub fn feature_dim(&self) -> usize {
        self.0.inputs
    }

    pub fn n_classes(&self) -> usize {
        self.0.outputs
    }

    pub fn dense(&self) -> &Dense {
        &self.0
    }

    pub fn dense_mut(&mut self) -> &mut Dense {
        &mut self.0
    }
}

/// Extractor plus the clean head (trained through the transition matrix)
/// and the noisy head (trained on the live noisy labels).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub extractor: FeatureExtractorParams,
    pub clean_head: HeadParams,
    pub noisy_head: HeadParams,
}

impl ModelParams {
    pub fn init(input_dim: usize, hidden: &[usize], n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let mut rng = seed::stream_rng(seed, 0);
        let extractor = FeatureExtractorParams::init(input_dim, hidden, &mut rng)?;
        let feat = extractor.output_dim();
        let clean_head = HeadParams(Dense::init(feat, n_classes, &mut rng));
        let noisy_head = HeadParams(Dense::init(feat, n_classes, &mut rng));
        Ok(ModelParams {
            extractor,
            clean_head,
            noisy_head,
        })
    }

    pub fn from_parts(
        extractor: FeatureExtractorParams,
        clean_head: HeadParams,
        noisy_head: HeadParams,
    ) -> Result<Self> {
        check_dim("clean head input", extractor.output_dim(), clean_head.feature_dim())?;
        check_dim("noisy head input", extractor.output_dim(), noisy_head.feature_dim())?;
        check_dim("head classes", clean_head.n_classes(), noisy_head.n_classes())?;
        Ok(ModelParams {
            extractor,
            clean_head,
            noisy_head,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.clean_head.n_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in a fixed order: extractor layers (weights, bias),
    /// clean head, noisy head. [`GradientSet::tensors`] uses the same order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.extractor.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        for h in [&self.clean_head.0, &self.noisy_head.0] {
            out.push(h.weights.as_slice());
            out.push(h.bias.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.extractor.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        for h in [&mut self.clean_head.0, &mut self.noisy_head.0] {
            out.push(h.weights.as_mut_slice());
            out.push(h.bias.as_mut_slice());
        }
        out
    }

    fn flat_slot(&mut self, mut index: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if index < t.len() {
                return &mut t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn zero_grad(&self) -> GradientSet {
        GradientSet {
            extractor: self.extractor.layers.iter().map(Dense::zeros_like).collect(),
            clean_head: self.clean_head.0.zeros_like(),
            noisy_head: self.noisy_head.0.zeros_like(),
        }
    }

    /// Clean-head class probabilities for one input.
    pub fn predict(&self, x: &[f64]) -> Result<ProbVector> {
        let feats = forward_features(&self.extractor, x)?;
        head_forward(&self.clean_head, &feats)
    }

    /// Both heads' probabilities for one input, sharing one extractor pass.
    pub fn predict_both(&self, x: &[f64]) -> Result<(ProbVector, ProbVector)> {
        let feats = forward_features(&self.extractor, x)?;
        Ok((
            head_forward(&self.clean_head, &feats)?,
            head_forward(&self.noisy_head, &feats)?,
        ))
    }
}

/// Gradients shaped like [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub extractor: Vec<Dense>,
    pub clean_head: Dense,
    pub noisy_head: Dense,
}

impl GradientSet {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.extractor {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        for h in [&self.clean_head, &self.noisy_head] {
            out.push(h.weights.as_slice());
            out.push(h.bias.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.extractor {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        for h in [&mut self.clean_head, &mut self.noisy_head] {
            out.push(h.weights.as_mut_slice());
            out.push(h.bias.as_mut_slice());
        }
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.extractor.iter_mut().zip(&other.extractor) {
            a.add_assign(b);
        }
        self.clean_head.add_assign(&other.clean_head);
        self.noisy_head.add_assign(&other.noisy_head);
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0))
    }

    fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.tensors()
            .into_iter()
            .enumerate()
            .find_map(|(i, t)| t.iter().find(|v| !v.is_finite()).map(|v| (i, *v)))
    }
}

/// A probability vector: nonnegative entries summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Precondition("empty probability vector".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Precondition(format!(
                "probability entries must lie in [0,1]: {values:?}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(Error::Precondition(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(ProbVector(values))
    }

    pub fn uniform(n: usize) -> Self {
        ProbVector(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, class: usize) -> Self {
        let mut v = vec![0.0; n];
        v[class] = 1.0;
        ProbVector(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-Σ target_i ln max(p_i, floor)`.
pub fn cross_entropy(p: &ProbVector, target: &[f64]) -> Result<f64> {
    check_dim("cross-entropy target", p.len(), target.len())?;
    Ok(p.0
        .iter()
        .zip(target)
        .filter(|(_, t)| **t != 0.0)
        .map(|(pi, t)| -t * pi.max(PROB_FLOOR).ln())
        .sum())
}

/// Cross-entropy against a hard label.
pub fn cross_entropy_label(p: &[f64], label: usize) -> f64 {
    -p[label].max(PROB_FLOOR).ln()
}

pub fn forward_features(phi: &FeatureExtractorParams, x: &[f64]) -> Result<Vec<f64>> {
    check_dim("extractor input", phi.input_dim(), x.len())?;
    let mut h = x.to_vec();
    for (layer, act) in phi.layers.iter().zip(&phi.activations) {
        h = layer.affine(&h).into_iter().map(|v| act.apply(v)).collect();
    }
    Ok(h)
}

pub fn head_forward(head: &HeadParams, feats: &[f64]) -> Result<ProbVector> {
    check_dim("head input", head.feature_dim(), feats.len())?;
    Ok(ProbVector(softmax(&head.0.affine(feats))))
}

/// Cached activations of one extractor pass.
#[derive(Clone, Debug)]
struct Trace {
    /// `inputs[l]` is the input of layer `l`; the last entry is the feature vector.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    fn features(&self) -> &[f64] {
        self.inputs.last().expect("trace holds the input")
    }
}

fn forward_trace(phi: &FeatureExtractorParams, x: &[f64]) -> Result<Trace> {
    check_dim("extractor input", phi.input_dim(), x.len())?;
    let mut inputs = Vec::with_capacity(phi.layers.len() + 1);
    let mut pre = Vec::with_capacity(phi.layers.len());
    inputs.push(x.to_vec());
    for (layer, act) in phi.layers.iter().zip(&phi.activations) {
        let z = layer.affine(inputs.last().unwrap());
        inputs.push(z.iter().map(|v| act.apply(*v)).collect());
        pre.push(z);
    }
    Ok(Trace { inputs, pre })
}

/// An input paired with the label a loss term is computed against.
#[derive(Clone, Copy, Debug)]
pub struct LabeledInput<'a> {
    pub x: &'a [f64],
    pub label: usize,
}

/// The clean batch `d` and the noisy batch `d̄` of one iteration.
#[derive(Clone, Debug, Default)]
pub struct JointBatch<'a> {
    pub clean: Vec<LabeledInput<'a>>,
    pub noisy: Vec<LabeledInput<'a>>,
}

/// Which terms make up the scalar objective.
///
/// Total = Σ_clean CE(p, y) + Σ_noisy CE(Tᵀp, ȳ) + noisy_weight · Σ_noisy CE(p̄, ȳ),
/// where `p` is the clean head and `p̄` the noisy head. The middle term is
/// dropped when `transition` is `None`. The transition matrix is a constant
/// of the objective: no gradient flows through it.
#[derive(Clone, Copy, Debug)]
pub struct JointObjective<'a> {
    pub transition: Option<&'a TransitionMatrix>,
    pub noisy_weight: f64,
}

impl JointObjective<'_> {
    pub fn uses_noisy_head(&self) -> bool {
        self.noisy_weight != 0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// CE of the clean head on the clean batch.
    pub clean_batch: f64,
    /// CE of `Tᵀp` on the noisy batch.
    pub corrected_noisy: f64,
    /// Unweighted CE of the noisy head on the noisy batch.
    pub noisy_head: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The transition-corrected clean-classifier loss.
    pub fn clean_loss(&self) -> f64 {
        self.clean_batch + self.corrected_noisy
    }
}

/// Per-sample outputs of one shared extractor pass.
#[derive(Clone, Debug)]
pub struct SampleForward {
    trace: Trace,
    pub clean_probs: Vec<f64>,
    pub noisy_probs: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct BatchForward {
    pub clean: Vec<SampleForward>,
    pub noisy: Vec<SampleForward>,
}

impl BatchForward {
    /// Noisy-head outputs on the clean batch, the input of the estimator.
    pub fn noisy_head_on_clean(&self) -> Option<Vec<&[f64]>> {
        self.clean
            .iter()
            .map(|s| s.noisy_probs.as_deref())
            .collect()
    }

    /// Clean-head outputs on the noisy batch, the input of label correction.
    pub fn clean_head_on_noisy(&self) -> Vec<&[f64]> {
        self.noisy.iter().map(|s| s.clean_probs.as_slice()).collect()
    }
}

fn forward_sample(
    params: &ModelParams,
    x: &[f64],
    with_noisy_head: bool,
    location: &str,
) -> Result<SampleForward> {
    let trace = forward_trace(&params.extractor, x)?;
    let feats = trace.features();
    let logits = params.clean_head.0.affine(feats);
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("clean head logits, {location}"),
            value: *v,
        });
    }
    let noisy_probs = if with_noisy_head {
        let nl = params.noisy_head.0.affine(feats);
        if let Some(v) = nl.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("noisy head logits, {location}"),
                value: *v,
            });
        }
        Some(softmax(&nl))
    } else {
        None
    };
    Ok(SampleForward {
        clean_probs: softmax(&logits),
        noisy_probs,
        trace,
    })
}

/// One extractor pass per sample; the noisy head is evaluated only when asked.
pub fn forward_batch(
    params: &ModelParams,
    batch: &JointBatch<'_>,
    with_noisy_head: bool,
) -> Result<BatchForward> {
    let n = params.n_classes();
    for s in batch.clean.iter().chain(&batch.noisy) {
        if s.label >= n {
            return Err(Error::Precondition(format!(
                "label {} out of range for {n} classes",
                s.label
            )));
        }
    }
    let clean = parallel::map_range(batch.clean.len(), |i| {
        forward_sample(params, batch.clean[i].x, with_noisy_head, &format!("clean sample {i}"))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let noisy = parallel::map_range(batch.noisy.len(), |i| {
        forward_sample(params, batch.noisy[i].x, with_noisy_head, &format!("noisy sample {i}"))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(BatchForward { clean, noisy })
}

/// Which contributions a sample makes to the objective.
#[derive(Clone, Copy)]
enum Role {
    Clean,
    Noisy,
}

struct SampleTerms {
    clean_batch: f64,
    corrected: f64,
    noisy_head: f64,
}

/// Loss of one sample and the gradients w.r.t. both heads' logits.
fn sample_terms(
    sample: &SampleForward,
    label: usize,
    role: Role,
    objective: &JointObjective<'_>,
) -> (SampleTerms, Vec<f64>, Option<Vec<f64>>) {
    let p = &sample.clean_probs;
    let n = p.len();
    let mut terms = SampleTerms {
        clean_batch: 0.0,
        corrected: 0.0,
        noisy_head: 0.0,
    };
    let mut d_clean = vec![0.0; n];
    let mut d_noisy = None;
    match role {
        Role::Clean => {
            terms.clean_batch = cross_entropy_label(p, label);
            if p[label] > PROB_FLOOR {
                d_clean.copy_from_slice(p);
                d_clean[label] -= 1.0;
            }
        }
        Role::Noisy => {
            if let Some(t) = objective.transition {
                // q_y = Σ_k T_ky p_k; dL/dz_j = p_j (1 - T_jy / q_y)
                let q: f64 = (0..n).map(|k| t.get(k, label) * p[k]).sum();
                terms.corrected = -q.max(PROB_FLOOR).ln();
                if q > PROB_FLOOR {
                    for (j, d) in d_clean.iter_mut().enumerate() {
                        *d = p[j] * (1.0 - t.get(j, label) / q);
                    }
                }
            }
            if objective.uses_noisy_head() {
                let pn = sample
                    .noisy_probs
                    .as_ref()
                    .expect("noisy head evaluated when its weight is nonzero");
                terms.noisy_head = cross_entropy_label(pn, label);
                let mut d = vec![0.0; n];
                if pn[label] > PROB_FLOOR {
                    for (dj, pj) in d.iter_mut().zip(pn) {
                        *dj = objective.noisy_weight * pj;
                    }
                    d[label] -= objective.noisy_weight;
                }
                d_noisy = Some(d);
            }
        }
    }
    (terms, d_clean, d_noisy)
}

fn accumulate_sample(
    params: &ModelParams,
    grads: &mut GradientSet,
    sample: &SampleForward,
    d_clean: &[f64],
    d_noisy: Option<&[f64]>,
) {
    let feats = sample.trace.features();
    let mut delta = vec![0.0; feats.len()];
    if d_clean.iter().any(|v| *v != 0.0) {
        grads.clean_head.accumulate(feats, d_clean);
        params.clean_head.0.backprop_into(d_clean, &mut delta);
    }
    if let Some(dn) = d_noisy {
        grads.noisy_head.accumulate(feats, dn);
        params.noisy_head.0.backprop_into(dn, &mut delta);
    }
    let layers = &params.extractor.layers;
    for l in (0..layers.len()).rev() {
        let act = params.extractor.activations[l];
        for (d, z) in delta.iter_mut().zip(&sample.trace.pre[l]) {
            *d *= act.derivative(*z);
        }
        if delta.iter().all(|v| *v == 0.0) {
            break;
        }
        grads.extractor[l].accumulate(&sample.trace.inputs[l], &delta);
        if l > 0 {
            let mut next = vec![0.0; layers[l].inputs];
            layers[l].backprop_into(&delta, &mut next);
            delta = next;
        }
    }
}

/// Loss and exact gradients given a cached forward pass.
pub fn backward_from(
    params: &ModelParams,
    batch: &JointBatch<'_>,
    forward: &BatchForward,
    objective: &JointObjective<'_>,
) -> Result<(LossBreakdown, GradientSet)> {
    check_dim("forward clean samples", batch.clean.len(), forward.clean.len())?;
    check_dim("forward noisy samples", batch.noisy.len(), forward.noisy.len())?;
    if let Some(t) = objective.transition {
        check_dim("transition size", params.n_classes(), t.n_classes())?;
    }
    if objective.uses_noisy_head()
        && forward.noisy.iter().any(|s| s.noisy_probs.is_none())
    {
        return Err(Error::Precondition(
            "noisy head outputs missing from the forward pass".into(),
        ));
    }
    let items: Vec<(&SampleForward, usize, Role)> = forward
        .clean
        .iter()
        .zip(&batch.clean)
        .map(|(f, s)| (f, s.label, Role::Clean))
        .chain(
            forward
                .noisy
                .iter()
                .zip(&batch.noisy)
                .map(|(f, s)| (f, s.label, Role::Noisy)),
        )
        .collect();

    let n_chunks = items.len().div_ceil(GRAD_CHUNK);
    let partials = parallel::map_range(n_chunks, |c| {
        let mut grads = params.zero_grad();
        let mut losses = Vec::new();
        for &(sample, label, role) in &items[c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(items.len())] {
            let (terms, d_clean, d_noisy) = sample_terms(sample, label, role, objective);
            accumulate_sample(params, &mut grads, sample, &d_clean, d_noisy.as_deref());
            losses.push(terms);
        }
        (grads, losses)
    });

    let mut grads = params.zero_grad();
    let mut loss = LossBreakdown::default();
    for (g, terms) in &partials {
        grads.add_assign(g);
        for t in terms {
            loss.clean_batch += t.clean_batch;
            loss.corrected_noisy += t.corrected;
            loss.noisy_head += t.noisy_head;
        }
    }
    loss.total = loss.clean_loss() + objective.noisy_weight * loss.noisy_head;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite {
            location: "total loss".into(),
            value: loss.total,
        });
    }
    if let Some((tensor, value)) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            location: format!("gradient tensor {tensor}"),
            value,
        });
    }
    Ok((loss, grads))
}

/// Forward and backward over a joint batch in one go.
pub fn backward_joint(
    params: &ModelParams,
    batch: &JointBatch<'_>,
    objective: &JointObjective<'_>,
) -> Result<(LossBreakdown, GradientSet)> {
    let forward = forward_batch(params, batch, objective.uses_noisy_head())?;
    backward_from(params, batch, &forward, objective)
}

/// Loss value only.
pub fn joint_loss(
    params: &ModelParams,
    batch: &JointBatch<'_>,
    objective: &JointObjective<'_>,
) -> Result<LossBreakdown> {
    let forward = forward_batch(params, batch, objective.uses_noisy_head())?;
    let mut loss = LossBreakdown::default();
    for (f, s) in forward.clean.iter().zip(&batch.clean) {
        loss.clean_batch += sample_terms(f, s.label, Role::Clean, objective).0.clean_batch;
    }
    for (f, s) in forward.noisy.iter().zip(&batch.noisy) {
        let t = sample_terms(f, s.label, Role::Noisy, objective).0;
        loss.corrected_noisy += t.corrected;
        loss.noisy_head += t.noisy_head;
    }
    loss.total = loss.clean_loss() + objective.noisy_weight * loss.noisy_head;
    Ok(loss)
}

/// Compare analytic gradients against central differences on a random
/// subsample of `samples` parameters. Returns the largest
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check(
    params: &ModelParams,
    batch: &JointBatch<'_>,
    objective: &JointObjective<'_>,
    step: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Precondition("finite-difference step must be positive".into()));
    }
    let (_, grads) = backward_joint(params, batch, objective)?;
    let analytic = grads.flat();
    let total = analytic.len();
    let mut rng = seed::stream_rng(seed, 0);
    let picks: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        rand::seq::index::sample(&mut rng, total, samples).into_vec()
    };
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for idx in picks {
        let orig = *probe.flat_slot(idx);
        *probe.flat_slot(idx) = orig + step;
        let up = joint_loss(&probe, batch, objective)?.total;
        *probe.flat_slot(idx) = orig - step;
        let down = joint_loss(&probe, batch, objective)?.total;
        *probe.flat_slot(idx) = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[idx];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// SGD with classical momentum: `v ← μ v + g`, `θ ← θ − lr · v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Option<GradientSet>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: None,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn velocity(&self) -> Option<&GradientSet> {
        self.velocity.as_ref()
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientSet) {
        let momentum = self.momentum;
        let velocity = self.velocity.get_or_insert_with(|| params.zero_grad());
        for ((p, v), g) in params
            .tensors_mut()
            .into_iter()
            .zip(velocity.tensors_mut())
            .zip(grads.tensors())
        {
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}
