//! Monte Carlo cross-validation of `alpha`, `lambda` and `beta`.
//!
//! Each repeat splits the seen classes into train-seen and proxy-unseen
//! classes, and holds out a fraction of the train-seen instances. For every
//! (`alpha`, `lambda`) pair a model is trained on the remaining train-seen
//! instances and scored by ZSL top-1 on the proxy-unseen classes. The best
//! model of the repeat is then used to pick `beta` by the harmonic mean of
//! generalized accuracies on the held-out seen instances and proxy-unseen
//! instances.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingTable, FeatureBank, SplitManifest};
use crate::error::{Error, Result};
use crate::inference::{embed, evaluate_gzsl_embedded, evaluate_zsl, ClassPrototypes};
use crate::kernels::Matrix;
use crate::losses::TrainConfig;
use crate::trainer::{prepare_bank, prepare_table, train};

/// How per-repeat results become the final value of a hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of the per-repeat winners.
    #[default]
    MeanOfWinners,
    /// Grid value with the best score averaged over repeats.
    ArgmaxOfMeanScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSpec {
    pub repeats: usize,
    /// Fraction of train-seen instances held out as the seen test split.
    pub holdout_fraction: f64,
    /// Proxy-unseen class count; `None` means `ceil(p / 5)`.
    pub proxy_unseen_count: Option<usize>,
    pub grid_alpha: Vec<f64>,
    pub grid_lambda: Vec<f64>,
    pub grid_beta: Vec<f64>,
    pub seed: u64,
    pub aggregation: Aggregation,
}

impl Default for CvSpec {
    fn default() -> Self {
        Self {
            repeats: 10,
            holdout_fraction: 0.2,
            proxy_unseen_count: None,
            grid_alpha: vec![0.0, 0.35, 0.7, 1.0],
            grid_lambda: vec![0.0, 1e-4, 1e-3],
            grid_beta: vec![0.0, 0.3, 0.6, 0.9],
            seed: 7,
            aggregation: Aggregation::MeanOfWinners,
        }
    }
}

impl CvSpec {
    pub fn proxy_count(&self, p: usize) -> usize {
        self.proxy_unseen_count.unwrap_or(p.div_ceil(5))
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config(format!(
                "holdout fraction must be in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        for (name, grid) in [
            ("alpha", &self.grid_alpha),
            ("lambda", &self.grid_lambda),
            ("beta", &self.grid_beta),
        ] {
            if grid.is_empty() {
                return Err(Error::config(format!("{name} grid is empty")));
            }
            if grid.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("{name} grid has a non-finite value")));
            }
        }
        let proxy = self.proxy_count(p);
        if proxy == 0 || p < proxy + 2 {
            return Err(Error::config(format!(
                "cannot hold out {proxy} proxy-unseen classes from {p} seen classes (need at least 2 left)"
            )));
        }
        Ok(())
    }
}

/// Winners and grid scores of one repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub proxy_unseen: Vec<String>,
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Proxy-unseen ZSL top-1 per `(alpha, lambda)`, alpha-major.
    pub zsl_scores: Vec<f64>,
    /// Harmonic mean per beta for the winning model.
    pub hm_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub value: f64,
    pub mean_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub spec: CvSpec,
    pub repeats: Vec<RepeatResult>,
    /// Mean score of each alpha (best lambda per repeat) and lambda (best
    /// alpha per repeat).
    pub alpha_scores: Vec<GridScore>,
    pub lambda_scores: Vec<GridScore>,
    pub beta_scores: Vec<GridScore>,
    pub selected: TrainConfig,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

// First maximum wins, so equal scores keep the earlier grid value.
fn best_index(scores: &[f64]) -> usize {
    crate::kernels::argmax(scores).expect("non-empty grid")
}

fn run_repeat(
    repeat: usize,
    bank: &FeatureBank,
    table: &EmbeddingTable,
    manifest: &SplitManifest,
    base: &TrainConfig,
    spec: &CvSpec,
) -> Result<RepeatResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1 + repeat as u64);

    let mut classes = manifest.seen.clone();
    classes.shuffle(&mut rng);
    let proxy = spec.proxy_count(classes.len());
    let proxy_unseen: Vec<String> = classes[..proxy].to_vec();
    let mut train_seen: Vec<String> = classes[proxy..].to_vec();
    train_seen.sort_by_key(|c| manifest.seen.iter().position(|s| s == c));
    let mut proxy_sorted = proxy_unseen.clone();
    proxy_sorted.sort_by_key(|c| manifest.seen.iter().position(|s| s == c));

    let inner = SplitManifest {
        seen: train_seen.clone(),
        unseen: proxy_sorted.clone(),
    };
    let row_class = |r: usize| bank.label_name(r);
    let proxy_rows: Vec<usize> = (0..bank.len()).filter(|&r| proxy_sorted.iter().any(|c| c == row_class(r))).collect();
    let mut seen_rows: Vec<usize> = (0..bank.len()).filter(|&r| train_seen.iter().any(|c| c == row_class(r))).collect();
    seen_rows.shuffle(&mut rng);
    let n_test = ((seen_rows.len() as f64) * spec.holdout_fraction).round() as usize;
    let (test_rows, fit_rows) = seen_rows.split_at(n_test.clamp(1, seen_rows.len() - 1));
    let mut fit_rows = fit_rows.to_vec();
    fit_rows.sort_unstable();
    let mut test_rows = test_rows.to_vec();
    test_rows.sort_unstable();

    let fit_bank = bank.subset(&fit_rows)?;
    let test_bank = bank.subset(&test_rows)?;
    let proxy_bank = bank.subset(&proxy_rows)?;

    let pairs: Vec<(f64, f64)> = spec
        .grid_alpha
        .iter()
        .flat_map(|&a| spec.grid_lambda.iter().map(move |&l| (a, l)))
        .collect();
    let mut models = Vec::with_capacity(pairs.len());
    let mut zsl_scores = Vec::with_capacity(pairs.len());
    for &(alpha, lambda) in &pairs {
        let cfg = TrainConfig {
            alpha,
            lambda,
            seed: base.seed.wrapping_add(repeat as u64),
            ..base.clone()
        };
        let run = train(&fit_bank, table, &inner, &cfg)?;
        let prepared = prepare_table(table, &cfg)?;
        let protos = ClassPrototypes::from_table(&prepared, &proxy_sorted)?;
        let eval_bank = prepare_bank(&proxy_bank, &cfg)?;
        zsl_scores.push(evaluate_zsl(&eval_bank, &protos, &run.weights, cfg.direction)?.top1_unseen);
        models.push((cfg, run.weights));
    }
    let winner = best_index(&zsl_scores);
    let (cfg, weights) = &models[winner];

    let prepared = prepare_table(table, cfg)?;
    let mut names = train_seen.clone();
    names.extend(proxy_sorted.iter().cloned());
    let semantics = prepared.matrix_for(&names)?;
    let test_bank = prepare_bank(&test_bank, cfg)?;
    let proxy_bank = prepare_bank(&proxy_bank, cfg)?;
    let seen_truth = test_bank.labels_in(&names)?;
    let unseen_truth = proxy_bank.labels_in(&names)?;
    let (seen_q, protos) = embed(weights, cfg.direction, test_bank.features(), &semantics)?;
    let (unseen_q, _): (Matrix, Matrix) = embed(weights, cfg.direction, proxy_bank.features(), &semantics)?;
    let hm_scores = spec
        .grid_beta
        .iter()
        .map(|&beta| {
            evaluate_gzsl_embedded(&seen_q, &seen_truth, &unseen_q, &unseen_truth, &protos, &names, train_seen.len(), beta)
                .map(|r| r.harmonic_mean.unwrap_or(0.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let beta = spec.grid_beta[best_index(&hm_scores)];

    Ok(RepeatResult {
        repeat,
        proxy_unseen: proxy_sorted,
        alpha: pairs[winner].0,
        lambda: pairs[winner].1,
        beta,
        zsl_scores,
        hm_scores,
    })
}

/// Runs every repeat (in parallel) and aggregates the winners.
pub fn mc_cross_validate(
    seen_bank: &FeatureBank,
    table: &EmbeddingTable,
    manifest: &SplitManifest,
    base: &TrainConfig,
    spec: &CvSpec,
) -> Result<CvReport> {
    spec.validate(manifest.seen.len())?;
    base.validate()?;
    manifest.validate(table)?;
    seen_bank.labels_in(&manifest.seen)?;
    let repeats = (0..spec.repeats)
        .into_par_iter()
        .map(|r| run_repeat(r, seen_bank, table, manifest, base, spec))
        .collect::<Result<Vec<_>>>()?;

    let n_lambda = spec.grid_lambda.len();
    let alpha_scores: Vec<GridScore> = spec
        .grid_alpha
        .iter()
        .enumerate()
        .map(|(i, &value)| GridScore {
            value,
            mean_score: mean(repeats.iter().map(|r| {
                r.zsl_scores[i * n_lambda..(i + 1) * n_lambda]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })),
        })
        .collect();
    let lambda_scores: Vec<GridScore> = spec
        .grid_lambda
        .iter()
        .enumerate()
        .map(|(j, &value)| GridScore {
            value,
            mean_score: mean(repeats.iter().map(|r| {
                r.zsl_scores
                    .iter()
                    .skip(j)
                    .step_by(n_lambda)
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max)
            })),
        })
        .collect();
    let beta_scores: Vec<GridScore> = spec
        .grid_beta
        .iter()
        .enumerate()
        .map(|(k, &value)| GridScore {
            value,
            mean_score: mean(repeats.iter().map(|r| r.hm_scores[k])),
        })
        .collect();

    let pick = |scores: &[GridScore], winners: Vec<f64>| match spec.aggregation {
        Aggregation::MeanOfWinners => mean(winners),
        Aggregation::ArgmaxOfMeanScore => {
            let s: Vec<f64> = scores.iter().map(|g| g.mean_score).collect();
            scores[best_index(&s)].value
        }
    };
    let selected = TrainConfig {
        alpha: pick(&alpha_scores, repeats.iter().map(|r| r.alpha).collect()),
        lambda: pick(&lambda_scores, repeats.iter().map(|r| r.lambda).collect()),
        beta: pick(&beta_scores, repeats.iter().map(|r| r.beta).collect()),
        ..base.clone()
    };
    Ok(CvReport {
        spec: spec.clone(),
        repeats,
        alpha_scores,
        lambda_scores,
        beta_scores,
        selected,
    })
}
