//! Epoch and batch orchestration, telemetry, and run directories.
//!
//! A run directory holds `config.json`, `weights.bin` (checkpoint format of
//! [`crate::projector`]) and `log.csv` with one row per epoch.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingTable, FeatureBank, SplitManifest};
use crate::error::{Error, Result};
use crate::hubness::{occurrence_distribution, Metric};
use crate::inference::{embed, evaluate_zsl_embedded};
use crate::kernels::{self, Matrix};
use crate::losses::{total_loss, Batch, Direction, TrainConfig};
use crate::projector::{init_weights, read_checkpoint, write_checkpoint, AdamState, MlpWeights};

pub const RUN_FORMAT_VERSION: u32 = 1;
pub const LOG_HEADER: &str = "epoch,L_S,L_U,L_T,hist_gap,seen_top1,skew_j1";

/// Telemetry of one epoch. Losses are means over the epoch's batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_s: f64,
    pub l_u: f64,
    pub l_t: f64,
    /// Mean `sum |soft - hard| / N` per batch; zero when the skewness term is off.
    pub hist_gap: f64,
    /// Top-1 over the seen training bank against seen prototypes.
    pub seen_top1: f64,
    /// Skewness of the seen-prototype occurrence counts at `j = 1`.
    pub skew_j1: Option<f64>,
}

impl EpochLog {
    fn csv_row(&self) -> String {
        let skew = self.skew_j1.map(|s| s.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.l_s, self.l_u, self.l_t, self.hist_gap, self.seen_top1, skew
        )
    }

    fn parse_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::format(format!("log row has {} fields, expected 7", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::format(format!("bad number {:?} in log", fields[i])))
        };
        Ok(Self {
            epoch: fields[0]
                .parse()
                .map_err(|_| Error::format(format!("bad epoch {:?} in log", fields[0])))?,
            l_s: num(1)?,
            l_u: num(2)?,
            l_t: num(3)?,
            hist_gap: num(4)?,
            seen_top1: num(5)?,
            skew_j1: if fields[6].is_empty() { None } else { Some(num(6)?) },
        })
    }
}

/// Result of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub seen_classes: Vec<String>,
    pub log: Vec<EpochLog>,
    /// Final weights, rounded to the `f32` values stored on disk.
    pub weights: MlpWeights,
    pub step_count: u64,
}

/// Contents of `config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunMeta {
    format_version: u32,
    config: TrainConfig,
    seen_classes: Vec<String>,
    step_count: u64,
    epochs_completed: usize,
}

/// Applies the configured row normalization to a bank.
pub fn prepare_bank(bank: &FeatureBank, cfg: &TrainConfig) -> Result<FeatureBank> {
    if cfg.normalize_features {
        bank.normalized()
    } else {
        Ok(bank.clone())
    }
}

/// Applies the configured normalization to an embedding table.
pub fn prepare_table(table: &EmbeddingTable, cfg: &TrainConfig) -> Result<EmbeddingTable> {
    let mut out = table.clone();
    if cfg.normalize_embeddings {
        out.normalize()?;
    }
    Ok(out)
}

/// Layer sizes of the network for a direction.
pub fn network_dims(cfg: &TrainConfig, semantic_dim: usize, feature_dim: usize) -> (usize, Vec<usize>, usize) {
    match cfg.direction {
        Direction::SemToFeat => (semantic_dim, cfg.hidden.clone(), feature_dim),
        Direction::FeatToSem => (feature_dim, cfg.hidden.iter().rev().copied().collect(), semantic_dim),
    }
}

/// Per-epoch shuffle generator: stream `1 + epoch` of the master seed.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

struct EpochStats {
    l_s: f64,
    l_u: f64,
    l_t: f64,
    hist_gap: f64,
    hard_counts: Vec<f64>,
}

fn run_epoch(
    features: &Matrix,
    labels: &[usize],
    semantics: &Matrix,
    w: &mut MlpWeights,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let n = cfg.batch_size;
    let mut order: Vec<usize> = (0..features.rows()).collect();
    order.shuffle(&mut epoch_rng(cfg.seed, epoch));
    let batches = order.len() / n;
    let mut stats = EpochStats {
        l_s: 0.0,
        l_u: 0.0,
        l_t: 0.0,
        hist_gap: 0.0,
        hard_counts: vec![0.0; semantics.rows()],
    };
    for chunk in order.chunks_exact(n) {
        let batch_features = features.select_rows(chunk);
        let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let batch = Batch {
            features: &batch_features,
            labels: &batch_labels,
            seen_semantics: semantics,
        };
        let out = total_loss(&batch, w, cfg)?;
        if !out.total.is_finite() {
            return Err(Error::CorruptData(format!("non-finite loss at epoch {epoch}")));
        }
        stats.l_s += out.distance;
        stats.l_u += out.skewness;
        stats.l_t += out.total;
        if let Some(soft) = &out.soft {
            stats.hist_gap += soft.l1_gap(&out.hard);
        }
        kernels::axpy(&mut stats.hard_counts, 1.0, &out.hard.counts);
        adam.step(w, &out.grads)?;
    }
    let b = batches as f64;
    stats.l_s /= b;
    stats.l_u /= b;
    stats.l_t /= b;
    stats.hist_gap /= b;
    Ok(stats)
}

/// Seen-class accuracy and `j = 1` skewness of the current weights.
fn telemetry(w: &MlpWeights, cfg: &TrainConfig, features: &Matrix, labels: &[usize], semantics: &Matrix, names: &[String]) -> Result<(f64, Option<f64>)> {
    let (queries, protos) = embed(w, cfg.direction, features, semantics)?;
    let report = evaluate_zsl_embedded(&queries, labels, &protos, names)?;
    let dist = occurrence_distribution(&queries, &protos, 1, Metric::Cosine)?;
    Ok((report.top1_unseen, kernels::skewness_of_counts(&dist.counts_f64()).ok()))
}

/// Trains the projection on the seen classes of `manifest`.
///
/// Every row of `seen_bank` must belong to a seen class. Telemetry is
/// computed on `f32`-rounded weights so it matches what a reloaded run
/// evaluates to.
pub fn train(
    seen_bank: &FeatureBank,
    table: &EmbeddingTable,
    manifest: &SplitManifest,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    manifest.validate(table)?;
    let bank = prepare_bank(seen_bank, cfg)?;
    let table = prepare_table(table, cfg)?;
    let labels = bank.labels_in(&manifest.seen)?;
    if bank.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "{} seen instances is fewer than the batch size {}",
            bank.len(),
            cfg.batch_size
        )));
    }
    let semantics = table.matrix_for(&manifest.seen)?;
    let (input, hidden, output) = network_dims(cfg, table.dim(), bank.dim());
    let mut w = init_weights(input, &hidden, output, cfg.seed)?.with_final_relu(cfg.final_relu);
    let mut adam = AdamState::new(&w, cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let stats = run_epoch(bank.features(), &labels, &semantics, &mut w, &mut adam, cfg, epoch)?;
        debug_assert_eq!(
            stats.hard_counts.iter().sum::<f64>(),
            ((bank.len() / cfg.batch_size) * cfg.batch_size) as f64
        );
        let (seen_top1, skew_j1) =
            telemetry(&w.rounded_to_f32(), cfg, bank.features(), &labels, &semantics, &manifest.seen)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            l_s: stats.l_s,
            l_u: stats.l_u,
            l_t: stats.l_t,
            hist_gap: stats.hist_gap,
            seen_top1,
            skew_j1,
        };
        log::info!(
            "epoch {} L_T {:.6} L_S {:.6} L_U {:.6} seen_top1 {:.4}",
            entry.epoch,
            entry.l_t,
            entry.l_s,
            entry.l_u,
            entry.seen_top1
        );
        log.push(entry);
    }
    Ok(TrainRun {
        config: cfg.clone(),
        seen_classes: manifest.seen.clone(),
        log,
        weights: w.rounded_to_f32(),
        step_count: adam.step_count(),
    })
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for row in log {
        let _ = writeln!(out, "{}", row.csv_row());
    }
    out
}

pub fn parse_log_csv(text: &str) -> Result<Vec<EpochLog>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format("log.csv header does not match"));
    }
    lines.filter(|l| !l.is_empty()).map(EpochLog::parse_csv_row).collect()
}

pub fn save_run(run: &TrainRun, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = RunMeta {
        format_version: RUN_FORMAT_VERSION,
        config: run.config.clone(),
        seen_classes: run.seen_classes.clone(),
        step_count: run.step_count,
        epochs_completed: run.log.len(),
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(dir.join("config.json"), json)?;
    write_checkpoint(
        dir.join("weights.bin"),
        &run.weights,
        run.config.seed,
        run.step_count,
        serde_json::to_value(&run.config)?,
    )?;
    fs::write(dir.join("log.csv"), log_csv(&run.log))?;
    Ok(())
}

pub fn load_run(dir: impl AsRef<Path>) -> Result<TrainRun> {
    let dir = dir.as_ref();
    let meta: RunMeta = serde_json::from_slice(&fs::read(dir.join("config.json"))?)
        .map_err(|e| Error::format(format!("config.json: {e}")))?;
    if meta.format_version != RUN_FORMAT_VERSION {
        return Err(Error::format(format!(
            "run format version {} is not supported (expected {RUN_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let (weights, header) = read_checkpoint(dir.join("weights.bin"))?;
    if header.step_count != meta.step_count {
        return Err(Error::format("weights.bin and config.json disagree on step count"));
    }
    let log = parse_log_csv(&fs::read_to_string(dir.join("log.csv"))?)?;
    if log.len() != meta.epochs_completed {
        return Err(Error::format(format!(
            "log.csv has {} rows, config.json records {} epochs",
            log.len(),
            meta.epochs_completed
        )));
    }
    Ok(TrainRun {
        config: meta.config,
        seen_classes: meta.seen_classes,
        log,
        weights,
        step_count: meta.step_count,
    })
}
