//! Training objective: supervised distance alignment plus the batch
//! skewness (anti-hubness) loss, with analytic gradients.
//!
//! The skewness loss counts how often each seen class is predicted inside a
//! batch and penalizes the third standardized moment of those counts. The
//! argmax count has no useful gradient, so the loss is evaluated on a soft
//! histogram: each instance spreads one unit of mass over the seen classes
//! with a temperature softmax of its cosine scores. The hard histogram is
//! still produced for reporting.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, cosine_matrix, CosineTable, Matrix, VARIANCE_EPS};
use crate::projector::{backward_batch, forward_batch, MlpWeights, DEFAULT_HIDDEN};

/// How the cubed deviations of the class counts are summed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewnessForm {
    /// Sum over the `N` batch instances: each class's cubed deviation is
    /// weighted by its count, normalized by `N * var^(3/2)`.
    #[default]
    PerInstance,
    /// Sum over the `p` classes, normalized by `p * var^(3/2)`; the same
    /// statistic as [`kernels::skewness_of_counts`].
    PerClass,
}

/// Which side of the alignment the network produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Direction {
    /// Semantic vectors are projected into feature space (the default).
    #[default]
    #[serde(rename = "sem2feat")]
    SemToFeat,
    /// Features are projected into semantic space. Experimental.
    #[serde(rename = "feat2sem")]
    FeatToSem,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::SemToFeat => "sem2feat",
            Direction::FeatToSem => "feat2sem",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sem2feat" => Ok(Direction::SemToFeat),
            "feat2sem" => Ok(Direction::FeatToSem),
            other => Err(Error::config(format!(
                "unknown direction {other:?} (expected sem2feat or feat2sem)"
            ))),
        }
    }
}

/// Every scalar that shapes a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the skewness loss.
    pub alpha: f64,
    /// L2 penalty on weight matrices.
    pub lambda: f64,
    /// Seen-class score penalty for generalized zero-shot inference.
    pub beta: f64,
    pub batch_size: usize,
    /// Soft-histogram softmax temperature.
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub final_relu: bool,
    pub normalize_features: bool,
    pub normalize_embeddings: bool,
    pub skewness_form: SkewnessForm,
    pub direction: Direction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            lambda: 1e-4,
            beta: 0.6,
            batch_size: 64,
            tau: 0.1,
            lr: 1e-3,
            epochs: 100,
            seed: 7,
            hidden: DEFAULT_HIDDEN.to_vec(),
            final_relu: true,
            normalize_features: false,
            normalize_embeddings: true,
            skewness_form: SkewnessForm::PerInstance,
            direction: Direction::SemToFeat,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.alpha) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !finite_nonneg(self.lambda) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !self.beta.is_finite() {
            return Err(Error::config("beta must be finite"));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !finite_nonneg(self.lr) {
            return Err(Error::config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden layer sizes must be a non-empty list of positive sizes"));
        }
        Ok(())
    }
}

/// Per-class prediction counts of one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchHistogram {
    pub counts: Vec<f64>,
    pub total: f64,
}

impl BatchHistogram {
    pub fn from_counts(counts: Vec<f64>) -> Self {
        let total = counts.iter().sum();
        Self { counts, total }
    }

    /// Hard histogram of predicted class indices over `p` classes.
    pub fn from_predictions(predictions: &[usize], p: usize) -> Self {
        let mut counts = vec![0.0; p];
        for &c in predictions {
            counts[c] += 1.0;
        }
        Self::from_counts(counts)
    }

    /// `sum |a - b| / total`
    pub fn l1_gap(&self, other: &BatchHistogram) -> f64 {
        let diff: f64 = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| (a - b).abs())
            .sum();
        diff / self.total
    }
}

/// Mean squared feature-to-projection distance plus weight decay.
///
/// Row `i` of `batch_semantics` is the semantic vector of the class of
/// feature row `i`. Identical semantic rows are projected once.
pub fn distance_loss(
    batch_features: &Matrix,
    batch_semantics: &Matrix,
    w: &MlpWeights,
    lambda: f64,
) -> Result<(f64, MlpWeights)> {
    let n = batch_features.rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if batch_semantics.rows() != n {
        return Err(Error::DimMismatch {
            expected: n,
            actual: batch_semantics.rows(),
        });
    }
    check_output_dim(w, batch_features.cols())?;
    let (unique, owner) = dedupe_rows(batch_semantics);
    let (projected, cache) = forward_batch(w, &unique)?;

    let scale = 2.0 / n as f64;
    let mut data = 0.0;
    let mut grad_out = Matrix::zeros(unique.rows(), projected.cols());
    for i in 0..n {
        let u = owner[i];
        let f = batch_features.row(i);
        let mut sq = 0.0;
        let g = grad_out.row_mut(u);
        for (k, (&p, &x)) in projected.row(u).iter().zip(f).enumerate() {
            let diff = p - x;
            sq += diff * diff;
            g[k] += scale * diff;
        }
        data += sq;
    }
    let loss = data / n as f64 + lambda * w.weight_sq_norm();
    let mut grads = backward_batch(w, &cache, &grad_out)?;
    add_weight_decay(&mut grads, w, lambda);
    Ok((loss, grads))
}

fn check_output_dim(w: &MlpWeights, m: usize) -> Result<()> {
    if w.output_dim() != m {
        return Err(Error::DimMismatch {
            expected: w.output_dim(),
            actual: m,
        });
    }
    Ok(())
}

/// Unique rows in first-appearance order, and the unique index of each row.
fn dedupe_rows(m: &Matrix) -> (Matrix, Vec<usize>) {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut keep = Vec::new();
    let owner = m
        .iter_rows()
        .enumerate()
        .map(|(i, row)| {
            let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
            let next = keep.len();
            *seen.entry(key).or_insert_with(|| {
                keep.push(i);
                next
            })
        })
        .collect();
    (m.select_rows(&keep), owner)
}

/// `grads += 2 * lambda * W` on weight matrices only.
fn add_weight_decay(grads: &mut MlpWeights, w: &MlpWeights, lambda: f64) {
    if lambda == 0.0 {
        return;
    }
    for k in 0..w.num_layers() {
        let src = w.layer(k).weight;
        let (dst, _) = grads.layer_mut(k);
        kernels::axpy(dst, 2.0 * lambda, src);
    }
}

/// Per-row argmax of cosine against the prototypes; ties go to the lowest
/// class index.
pub fn predict_batch_hard(batch_features: &Matrix, prototypes: &Matrix) -> Result<Vec<usize>> {
    check_prototypes(prototypes)?;
    let table = cosine_matrix(batch_features, prototypes)?;
    Ok(argmax_rows(&table.cos))
}

fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.iter_rows()
        .map(|r| kernels::argmax(r).expect("non-empty row"))
        .collect()
}

fn check_prototypes(prototypes: &Matrix) -> Result<()> {
    if prototypes.rows() < 2 {
        return Err(Error::config(format!(
            "need at least 2 prototypes, got {}",
            prototypes.rows()
        )));
    }
    Ok(())
}

/// Soft class assignment of a batch: cosine table and softmax weights.
struct SoftAssignment {
    table: CosineTable,
    probs: Matrix,
}

fn soft_assign(queries: &Matrix, prototypes: &Matrix, tau: f64) -> Result<SoftAssignment> {
    check_prototypes(prototypes)?;
    let table = cosine_matrix(queries, prototypes)?;
    let mut probs = Matrix::zeros(queries.rows(), prototypes.rows());
    for i in 0..queries.rows() {
        kernels::softmax_into(table.cos.row(i), tau, probs.row_mut(i))?;
    }
    Ok(SoftAssignment { table, probs })
}

impl SoftAssignment {
    fn histogram(&self) -> BatchHistogram {
        let mut counts = vec![0.0; self.probs.cols()];
        for row in self.probs.iter_rows() {
            kernels::axpy(&mut counts, 1.0, row);
        }
        BatchHistogram::from_counts(counts)
    }

    /// Pulls a gradient on the counts back to the queries and prototypes.
    fn backward(
        &self,
        queries: &Matrix,
        prototypes: &Matrix,
        grad_counts: &[f64],
        tau: f64,
    ) -> (Matrix, Matrix) {
        let (n, p) = (queries.rows(), prototypes.rows());
        let mut d_queries = Matrix::zeros(n, queries.cols());
        let mut d_protos = Matrix::zeros(p, prototypes.cols());
        for i in 0..n {
            let probs = self.probs.row(i);
            let mean_g = kernels::dot(probs, grad_counts);
            let q = queries.row(i);
            let qn = self.table.query_norms[i];
            for c in 0..p {
                // d counts_c' / d s_ic through the softmax, then 1/tau.
                let d_score = probs[c] * (grad_counts[c] - mean_g) / tau;
                if d_score == 0.0 {
                    continue;
                }
                let cos = self.table.cos.get(i, c);
                let proto = prototypes.row(c);
                let pn = self.table.prototype_norms[c];
                let inv = 1.0 / (qn * pn);
                // d cos / d q = p/(|q||p|) - cos q/|q|^2, symmetric for p.
                let dq = d_queries.row_mut(i);
                kernels::axpy(dq, d_score * inv, proto);
                kernels::axpy(dq, -d_score * cos / (qn * qn), q);
                let dp = d_protos.row_mut(c);
                kernels::axpy(dp, d_score * inv, q);
                kernels::axpy(dp, -d_score * cos / (pn * pn), proto);
            }
        }
        (d_queries, d_protos)
    }
}

/// Soft prediction counts: `counts_c = sum_i softmax(cos_i / tau)_c`.
pub fn soft_histogram(
    batch_features: &Matrix,
    prototypes: &Matrix,
    tau: f64,
) -> Result<BatchHistogram> {
    Ok(soft_assign(batch_features, prototypes, tau)?.histogram())
}

/// Skewness loss of a histogram in its default per-instance form, with
/// the gradient with respect to each count.
pub fn skewness_loss(hist: &BatchHistogram) -> (f64, Vec<f64>) {
    skewness_loss_with(hist, SkewnessForm::PerInstance)
}

/// Skewness loss with explicit summation form.
///
/// Mean and variance are taken over the `p` class counts, and `N` is the
/// sum of the counts. Variance at or below [`VARIANCE_EPS`] (uniform
/// predictions) returns zero loss and zero gradient.
pub fn skewness_loss_with(hist: &BatchHistogram, form: SkewnessForm) -> (f64, Vec<f64>) {
    let h = &hist.counts;
    let p = h.len() as f64;
    let (mean, var) = kernels::mean_and_variance(h);
    if h.is_empty() || var <= VARIANCE_EPS {
        return (0.0, vec![0.0; h.len()]);
    }
    let dev: Vec<f64> = h.iter().map(|c| c - mean).collect();
    let var15 = var.powf(1.5);
    // d var / d h_k = 2 d_k / p (deviations sum to zero).
    let dvar = |k: usize| 2.0 * dev[k] / p;
    match form {
        SkewnessForm::PerInstance => {
            let total: f64 = h.iter().sum();
            let s3: f64 = h.iter().zip(&dev).map(|(c, d)| c * d.powi(3)).sum();
            let weighted_sq: f64 = h.iter().zip(&dev).map(|(c, d)| c * d * d).sum();
            let loss = s3 / (total * var15);
            let grad = (0..h.len())
                .map(|k| {
                    let ds3 = dev[k].powi(3) + 3.0 * h[k] * dev[k] * dev[k] - 3.0 * weighted_sq / p;
                    ds3 / (total * var15)
                        - s3 / (total * total * var15)
                        - 1.5 * s3 * dvar(k) / (total * var15 * var)
                })
                .collect();
            (loss, grad)
        }
        SkewnessForm::PerClass => {
            let s3: f64 = dev.iter().map(|d| d.powi(3)).sum();
            let sq: f64 = dev.iter().map(|d| d * d).sum();
            let loss = s3 / (p * var15);
            let grad = (0..h.len())
                .map(|k| {
                    let ds3 = 3.0 * dev[k] * dev[k] - 3.0 * sq / p;
                    ds3 / (p * var15) - 1.5 * s3 * dvar(k) / (p * var15 * var)
                })
                .collect();
            (loss, grad)
        }
    }
}

/// A training batch drawn from the seen classes.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    /// `N x m` features.
    pub features: &'a Matrix,
    /// Seen-class index of each feature row.
    pub labels: &'a [usize],
    /// `p x d` semantic vectors of every seen class.
    pub seen_semantics: &'a Matrix,
}

impl Batch<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.labels.len() != n {
            return Err(Error::DimMismatch {
                expected: n,
                actual: self.labels.len(),
            });
        }
        let p = self.seen_semantics.rows();
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= p) {
            return Err(Error::ManifestMismatch(format!(
                "batch label {bad} out of range for {p} seen classes"
            )));
        }
        Ok(())
    }

    /// Semantic row of every instance.
    pub fn instance_semantics(&self) -> Matrix {
        self.seen_semantics.select_rows(self.labels)
    }
}

/// Loss values and gradients of one batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Distance term including weight decay.
    pub distance: f64,
    /// Skewness term before weighting by alpha; zero when alpha is zero.
    pub skewness: f64,
    pub total: f64,
    pub hard: BatchHistogram,
    /// Present when the skewness branch was evaluated.
    pub soft: Option<BatchHistogram>,
    pub grads: MlpWeights,
}

struct AlignmentTerms {
    data: f64,
    skewness: f64,
    d_queries: Matrix,
    d_protos: Matrix,
    hard: BatchHistogram,
    soft: BatchHistogram,
}

// Shared core for both directions: queries are compared against class
// prototypes, query i belongs to prototype labels[i].
fn alignment_terms(
    queries: &Matrix,
    labels: &[usize],
    prototypes: &Matrix,
    alpha: f64,
    tau: f64,
    form: SkewnessForm,
) -> Result<AlignmentTerms> {
    if queries.cols() != prototypes.cols() {
        return Err(Error::DimMismatch {
            expected: prototypes.cols(),
            actual: queries.cols(),
        });
    }
    let n = queries.rows();
    let scale = 2.0 / n as f64;
    let mut data = 0.0;
    let mut d_queries = Matrix::zeros(n, queries.cols());
    let mut d_protos = Matrix::zeros(prototypes.rows(), prototypes.cols());
    for (i, &y) in labels.iter().enumerate() {
        let q = queries.row(i);
        let mut sq = 0.0;
        {
            let dq = d_queries.row_mut(i);
            for (k, (&a, &b)) in q.iter().zip(prototypes.row(y)).enumerate() {
                let diff = a - b;
                sq += diff * diff;
                dq[k] = scale * diff;
            }
        }
        data += sq;
        kernels::axpy(d_protos.row_mut(y), -scale, q);
        kernels::axpy(d_protos.row_mut(y), scale, prototypes.row(y));
    }
    data /= n as f64;

    let soft_assignment = soft_assign(queries, prototypes, tau)?;
    let hard = BatchHistogram::from_predictions(
        &argmax_rows(&soft_assignment.table.cos),
        prototypes.rows(),
    );
    let soft = soft_assignment.histogram();
    let (skewness, mut grad_counts) = skewness_loss_with(&soft, form);
    for g in &mut grad_counts {
        *g *= alpha;
    }
    let (sq, sp) = soft_assignment.backward(queries, prototypes, &grad_counts, tau);
    kernels::axpy(d_queries.as_mut_slice(), 1.0, sq.as_slice());
    kernels::axpy(d_protos.as_mut_slice(), 1.0, sp.as_slice());
    Ok(AlignmentTerms {
        data,
        skewness,
        d_queries,
        d_protos,
        hard,
        soft,
    })
}

/// `L_T = L_S + alpha * L_U` with gradients composed through the soft
/// histogram.
///
/// With `alpha == 0` this is exactly [`distance_loss`] (the supervised-only
/// baseline); the hard histogram is still reported.
pub fn total_loss(batch: &Batch<'_>, w: &MlpWeights, cfg: &TrainConfig) -> Result<LossOutput> {
    batch.validate()?;
    let p = batch.seen_semantics.rows();
    match cfg.direction {
        Direction::SemToFeat => {
            check_output_dim(w, batch.features.cols())?;
            if cfg.alpha == 0.0 {
                let (distance, grads) =
                    distance_loss(batch.features, &batch.instance_semantics(), w, cfg.lambda)?;
                let prototypes = crate::projector::project(w, batch.seen_semantics)?;
                let hard = BatchHistogram::from_predictions(
                    &predict_batch_hard(batch.features, &prototypes)?,
                    p,
                );
                return Ok(LossOutput {
                    distance,
                    skewness: 0.0,
                    total: distance,
                    hard,
                    soft: None,
                    grads,
                });
            }
            let (prototypes, cache) = forward_batch(w, batch.seen_semantics)?;
            let terms = alignment_terms(
                batch.features,
                batch.labels,
                &prototypes,
                cfg.alpha,
                cfg.tau,
                cfg.skewness_form,
            )?;
            let mut grads = backward_batch(w, &cache, &terms.d_protos)?;
            add_weight_decay(&mut grads, w, cfg.lambda);
            Ok(finish(terms, w, cfg, grads))
        }
        Direction::FeatToSem => {
            if w.input_dim() != batch.features.cols() {
                return Err(Error::DimMismatch {
                    expected: w.input_dim(),
                    actual: batch.features.cols(),
                });
            }
            let (queries, cache) = forward_batch(w, batch.features)?;
            let terms = alignment_terms(
                &queries,
                batch.labels,
                batch.seen_semantics,
                cfg.alpha,
                cfg.tau,
                cfg.skewness_form,
            )?;
            let mut grads = backward_batch(w, &cache, &terms.d_queries)?;
            add_weight_decay(&mut grads, w, cfg.lambda);
            let mut out = finish(terms, w, cfg, grads);
            if cfg.alpha == 0.0 {
                out.skewness = 0.0;
                out.soft = None;
            }
            Ok(out)
        }
    }
}

fn finish(terms: AlignmentTerms, w: &MlpWeights, cfg: &TrainConfig, grads: MlpWeights) -> LossOutput {
    let distance = terms.data + cfg.lambda * w.weight_sq_norm();
    LossOutput {
        distance,
        skewness: terms.skewness,
        total: distance + cfg.alpha * terms.skewness,
        hard: terms.hard,
        soft: Some(terms.soft),
        grads,
    }
}

/// The soft skewness loss alone as a function of the network weights
/// (semantic-to-feature direction), with its gradient.
pub fn skewness_objective(
    batch: &Batch<'_>,
    w: &MlpWeights,
    tau: f64,
    form: SkewnessForm,
) -> Result<(f64, MlpWeights)> {
    batch.validate()?;
    check_output_dim(w, batch.features.cols())?;
    let (prototypes, cache) = forward_batch(w, batch.seen_semantics)?;
    let assignment = soft_assign(batch.features, &prototypes, tau)?;
    let (loss, grad_counts) = skewness_loss_with(&assignment.histogram(), form);
    let (_, d_protos) = assignment.backward(batch.features, &prototypes, &grad_counts, tau);
    Ok((loss, backward_batch(w, &cache, &d_protos)?))
}
