//! Zero-shot and generalized zero-shot prediction and evaluation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{EmbeddingTable, FeatureBank};
use crate::error::{Error, Result};
use crate::kernels::{self, cosine_matrix, Matrix};
use crate::losses::Direction;
use crate::projector::{project, MlpWeights};

/// Class of the most cosine-similar prototype.
pub fn zsl_predict(feature: &[f64], prototypes: &Matrix) -> Result<usize> {
    gzsl_predict(feature, prototypes, &vec![false; prototypes.rows()], 0.0)
}

/// Argmax of `cos - beta * [seen]` over all prototypes.
pub fn gzsl_predict(feature: &[f64], prototypes: &Matrix, seen_mask: &[bool], beta: f64) -> Result<usize> {
    let query = Matrix::from_vec(1, feature.len(), feature.to_vec())?;
    Ok(predict_rows(&query, prototypes, seen_mask, beta)?[0])
}

/// Vectorized [`gzsl_predict`] over the rows of `queries`.
pub fn predict_rows(queries: &Matrix, prototypes: &Matrix, seen_mask: &[bool], beta: f64) -> Result<Vec<usize>> {
    if prototypes.rows() == 0 {
        return Err(Error::config("no prototypes to predict from"));
    }
    if seen_mask.len() != prototypes.rows() {
        return Err(Error::DimMismatch {
            expected: prototypes.rows(),
            actual: seen_mask.len(),
        });
    }
    if !beta.is_finite() {
        return Err(Error::config("beta must be finite"));
    }
    let table = cosine_matrix(queries, prototypes)?;
    Ok((0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let scores: Vec<f64> = table
                .cos
                .row(i)
                .iter()
                .zip(seen_mask)
                .map(|(&c, &seen)| if seen { c - beta } else { c })
                .collect();
            kernels::argmax(&scores).expect("non-empty")
        })
        .collect())
}

/// `2su / (s + u)`, or 0 when both are 0.
pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen > 0.0 {
        2.0 * seen * unseen / (seen + unseen)
    } else {
        0.0
    }
}

/// Named semantic vectors of the classes to predict among.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    pub names: Vec<String>,
    pub semantics: Matrix,
}

impl ClassPrototypes {
    pub fn from_table<S: AsRef<str>>(table: &EmbeddingTable, names: &[S]) -> Result<Self> {
        Ok(Self {
            names: names.iter().map(|n| n.as_ref().to_string()).collect(),
            semantics: table.matrix_for(names)?,
        })
    }
}

/// Maps features and prototypes into the space where cosine is compared.
///
/// Returns `(queries, prototypes)`.
pub fn embed(
    w: &MlpWeights,
    direction: Direction,
    features: &Matrix,
    semantics: &Matrix,
) -> Result<(Matrix, Matrix)> {
    match direction {
        Direction::SemToFeat => Ok((features.clone(), project(w, semantics)?)),
        Direction::FeatToSem => Ok((project(w, features)?, semantics.clone())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub correct: u64,
    pub total: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `"zsl"` or `"gzsl"`.
    pub task: String,
    pub top1_seen: Option<f64>,
    pub top1_unseen: f64,
    pub harmonic_mean: Option<f64>,
    pub per_class: BTreeMap<String, ClassAccuracy>,
    pub beta: Option<f64>,
    pub n_instances: usize,
    /// Row and column order of `confusion_counts`.
    pub classes: Vec<String>,
    /// `confusion_counts[true][predicted]`.
    pub confusion_counts: Vec<Vec<u64>>,
    pub config_echo: serde_json::Value,
}

struct Tally {
    classes: Vec<String>,
    confusion: Vec<Vec<u64>>,
}

impl Tally {
    fn new(classes: &[String]) -> Self {
        Self {
            classes: classes.to_vec(),
            confusion: vec![vec![0; classes.len()]; classes.len()],
        }
    }

    fn add(&mut self, truth: &[usize], predicted: &[usize]) {
        for (&t, &p) in truth.iter().zip(predicted) {
            self.confusion[t][p] += 1;
        }
    }

    /// Micro accuracy over the rows of the given classes.
    fn accuracy_over(&self, classes: std::ops::Range<usize>) -> f64 {
        let (mut correct, mut total) = (0u64, 0u64);
        for c in classes {
            correct += self.confusion[c][c];
            total += self.confusion[c].iter().sum::<u64>();
        }
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    }

    fn per_class(&self) -> BTreeMap<String, ClassAccuracy> {
        self.classes
            .iter()
            .enumerate()
            .filter_map(|(c, name)| {
                let total: u64 = self.confusion[c].iter().sum();
                (total > 0).then(|| {
                    let correct = self.confusion[c][c];
                    (
                        name.clone(),
                        ClassAccuracy {
                            correct,
                            total,
                            accuracy: correct as f64 / total as f64,
                        },
                    )
                })
            })
            .collect()
    }

    fn instances(&self) -> usize {
        self.confusion.iter().flatten().sum::<u64>() as usize
    }
}

/// ZSL report for already-embedded queries; `truth[i]` indexes `names`.
pub fn evaluate_zsl_embedded(queries: &Matrix, truth: &[usize], prototypes: &Matrix, names: &[String]) -> Result<EvalReport> {
    if truth.len() != queries.rows() {
        return Err(Error::DimMismatch {
            expected: queries.rows(),
            actual: truth.len(),
        });
    }
    let predicted = predict_rows(queries, prototypes, &vec![false; prototypes.rows()], 0.0)?;
    let mut tally = Tally::new(names);
    tally.add(truth, &predicted);
    Ok(EvalReport {
        task: "zsl".into(),
        top1_seen: None,
        top1_unseen: tally.accuracy_over(0..names.len()),
        harmonic_mean: None,
        per_class: tally.per_class(),
        beta: None,
        n_instances: tally.instances(),
        classes: tally.classes,
        confusion_counts: tally.confusion,
        config_echo: serde_json::Value::Null,
    })
}

/// Top-1 accuracy of `bank` against `prototypes`, every bank class must be
/// among the prototype names.
pub fn evaluate_zsl(bank: &FeatureBank, prototypes: &ClassPrototypes, w: &MlpWeights, direction: Direction) -> Result<EvalReport> {
    let truth = bank.labels_in(&prototypes.names)?;
    let (queries, protos) = embed(w, direction, bank.features(), &prototypes.semantics)?;
    evaluate_zsl_embedded(&queries, &truth, &protos, &prototypes.names)
}

/// GZSL report for already-embedded data. Prototypes are seen classes then
/// unseen classes; `seen_truth` and `unseen_truth` index that union.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_gzsl_embedded(
    seen_queries: &Matrix,
    seen_truth: &[usize],
    unseen_queries: &Matrix,
    unseen_truth: &[usize],
    prototypes: &Matrix,
    names: &[String],
    n_seen: usize,
    beta: f64,
) -> Result<EvalReport> {
    let mask: Vec<bool> = (0..prototypes.rows()).map(|c| c < n_seen).collect();
    let mut tally = Tally::new(names);
    for (queries, truth) in [(seen_queries, seen_truth), (unseen_queries, unseen_truth)] {
        if truth.len() != queries.rows() {
            return Err(Error::DimMismatch {
                expected: queries.rows(),
                actual: truth.len(),
            });
        }
        if queries.rows() > 0 {
            tally.add(truth, &predict_rows(queries, prototypes, &mask, beta)?);
        }
    }
    let seen = tally.accuracy_over(0..n_seen);
    let unseen = tally.accuracy_over(n_seen..names.len());
    Ok(EvalReport {
        task: "gzsl".into(),
        top1_seen: Some(seen),
        top1_unseen: unseen,
        harmonic_mean: Some(harmonic_mean(seen, unseen)),
        per_class: tally.per_class(),
        beta: Some(beta),
        n_instances: tally.instances(),
        classes: tally.classes,
        confusion_counts: tally.confusion,
        config_echo: serde_json::Value::Null,
    })
}

/// Generalized evaluation over the union of seen and unseen classes.
pub fn evaluate_gzsl(
    seen_bank: &FeatureBank,
    unseen_bank: &FeatureBank,
    seen: &ClassPrototypes,
    unseen: &ClassPrototypes,
    w: &MlpWeights,
    direction: Direction,
    beta: f64,
) -> Result<EvalReport> {
    if let Some(c) = seen.names.iter().find(|c| unseen.names.contains(c)) {
        return Err(Error::config(format!("class {c:?} is both seen and unseen")));
    }
    let mut names = seen.names.clone();
    names.extend(unseen.names.iter().cloned());
    let mut sem = seen.semantics.as_slice().to_vec();
    sem.extend_from_slice(unseen.semantics.as_slice());
    let semantics = Matrix::from_vec(names.len(), seen.semantics.cols(), sem)?;

    let seen_truth = seen_bank.labels_in(&seen.names)?;
    let unseen_truth: Vec<usize> = unseen_bank
        .labels_in(&unseen.names)?
        .into_iter()
        .map(|l| l + seen.names.len())
        .collect();
    let (seen_q, protos) = embed(w, direction, seen_bank.features(), &semantics)?;
    let (unseen_q, _) = embed(w, direction, unseen_bank.features(), &semantics)?;
    evaluate_gzsl_embedded(&seen_q, &seen_truth, &unseen_q, &unseen_truth, &protos, &names, seen.names.len(), beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::init_weights;
    use crate::testutil::Lcg;
    use proptest::prelude::*;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Lcg) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap()
    }

    #[test]
    fn single_prototype_always_wins() {
        let protos = Matrix::from_rows(&[[0.3, -0.2]]).unwrap();
        assert_eq!(zsl_predict(&[-5.0, 1.0], &protos).unwrap(), 0);
    }

    #[test]
    fn collinear_feature_picks_its_prototype() {
        let protos = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(zsl_predict(&[2.0, 2.0, 2.0], &protos).unwrap(), 2);
        assert!(matches!(zsl_predict(&[0.0; 3], &protos), Err(Error::DegenerateVector)));
    }

    #[test]
    fn beta_is_subtracted_from_seen_scores() {
        // cos to the seen prototype 0.9, to the unseen one 0.5
        let seen = [0.9, (1.0f64 - 0.81).sqrt()];
        let unseen = [0.5, -(1.0f64 - 0.25).sqrt()];
        let protos = Matrix::from_rows(&[seen, unseen]).unwrap();
        let feature = [1.0, 0.0];
        assert_eq!(gzsl_predict(&feature, &protos, &[true, false], 0.0).unwrap(), 0);
        assert_eq!(gzsl_predict(&feature, &protos, &[true, false], 0.6).unwrap(), 1);
    }

    #[test]
    fn large_beta_always_picks_unseen() {
        let mut rng = Lcg::new(5);
        let protos = random_matrix(6, 4, &mut rng);
        let mask = [true, true, true, true, false, true];
        let queries = random_matrix(40, 4, &mut rng);
        assert!(predict_rows(&queries, &protos, &mask, 2.0).unwrap().iter().all(|&c| c == 4));
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(40.1, 22.5) - 28.8).abs() < 0.05);
        assert!((harmonic_mean(53.8, 26.2) - 35.2).abs() < 0.05);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        for x in [0.0, 0.3, 17.0] {
            assert!((harmonic_mean(x, x) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let protos = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let queries = Matrix::from_rows(&[[3.0, 0.1], [0.2, 1.0], [1.0, 0.0]]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let r = evaluate_zsl_embedded(&queries, &[0, 1, 0], &protos, &names).unwrap();
        assert_eq!(r.top1_unseen, 1.0);
        assert_eq!(r.confusion_counts, vec![vec![2, 0], vec![0, 1]]);
        assert_eq!(r.per_class["a"].total, 2);
    }

    #[test]
    fn untrained_weights_are_near_chance() {
        // Features carry no class information, labels are balanced.
        let (q, per_class, d, m) = (8usize, 50usize, 30usize, 16usize);
        let mut rng = Lcg::new(21);
        let n = q * per_class;
        let features = Matrix::from_vec(n, m, (0..n * m).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let names: Vec<String> = (0..n).map(|i| format!("c{}", i % q)).collect();
        let bank = FeatureBank::from_row_names(features, &names).unwrap();
        let table = EmbeddingTable::from_entries(
            (0..q).map(|c| (format!("c{c}"), (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect())),
        )
        .unwrap();
        let class_names: Vec<String> = (0..q).map(|c| format!("c{c}")).collect();
        let protos = ClassPrototypes::from_table(&table, &class_names).unwrap();
        let w = init_weights(d, &[64, 64], m, 11).unwrap().with_final_relu(false);
        let r = evaluate_zsl(&bank, &protos, &w, Direction::SemToFeat).unwrap();
        let chance = 1.0 / q as f64;
        let sigma = (chance * (1.0 - chance) / n as f64).sqrt();
        assert!((r.top1_unseen - chance).abs() < 3.0 * sigma, "{}", r.top1_unseen);
    }

    #[test]
    fn unknown_label_is_manifest_mismatch() {
        let bank = FeatureBank::from_row_names(Matrix::from_rows(&[[1.0, 0.0]]).unwrap(), &["zebra"]).unwrap();
        let table = EmbeddingTable::from_entries(vec![("cat".to_string(), vec![1.0, 0.0])]).unwrap();
        let protos = ClassPrototypes::from_table(&table, &["cat"]).unwrap();
        let w = MlpWeights::zeros(&[2, 2, 2], false).unwrap();
        assert!(matches!(
            evaluate_zsl(&bank, &protos, &w, Direction::SemToFeat),
            Err(Error::ManifestMismatch(_))
        ));
    }

    #[test]
    fn gzsl_report_is_internally_consistent() {
        let mut rng = Lcg::new(9);
        let protos = random_matrix(5, 3, &mut rng);
        let names: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let sq = random_matrix(30, 3, &mut rng);
        let uq = random_matrix(20, 3, &mut rng);
        let st: Vec<usize> = (0..30).map(|_| rng.below(3)).collect();
        let ut: Vec<usize> = (0..20).map(|_| 3 + rng.below(2)).collect();
        let r = evaluate_gzsl_embedded(&sq, &st, &uq, &ut, &protos, &names, 3, 0.2).unwrap();
        let (s, u) = (r.top1_seen.unwrap(), r.top1_unseen);
        assert_eq!(r.harmonic_mean.unwrap(), harmonic_mean(s, u));
        assert_eq!(r.n_instances, 50);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["task", "top1_seen", "top1_unseen", "harmonic_mean", "per_class", "beta", "config_echo"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn beta_zero_is_plain_argmax(seed in 0u64..500) {
            let mut rng = Lcg::new(seed);
            let protos = random_matrix(7, 4, &mut rng);
            let queries = random_matrix(20, 4, &mut rng);
            let mask: Vec<bool> = (0..7).map(|_| rng.below(2) == 0).collect();
            let a = predict_rows(&queries, &protos, &mask, 0.0).unwrap();
            let b = predict_rows(&queries, &protos, &[false; 7], 0.0).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn raising_beta_never_moves_unseen_to_seen(seed in 0u64..500, b1 in -1.0f64..2.0, db in 0.0f64..2.0) {
            let mut rng = Lcg::new(seed);
            let protos = random_matrix(6, 3, &mut rng);
            let queries = random_matrix(30, 3, &mut rng);
            let mask = [true, true, true, false, false, false];
            let lo = predict_rows(&queries, &protos, &mask, b1).unwrap();
            let hi = predict_rows(&queries, &protos, &mask, b1 + db).unwrap();
            for (a, b) in lo.iter().zip(&hi) {
                if !mask[*a] {
                    prop_assert_eq!(a, b);
                }
            }
        }

        #[test]
        fn harmonic_mean_at_most_arithmetic(s in 0.0f64..1.0, u in 0.0f64..1.0) {
            prop_assert!(harmonic_mean(s, u) <= (s + u) / 2.0 + 1e-15);
        }

        #[test]
        fn accuracy_ignores_instance_order(seed in 0u64..500) {
            let mut rng = Lcg::new(seed);
            let protos = random_matrix(4, 3, &mut rng);
            let names: Vec<String> = (0..4).map(|i| format!("c{i}")).collect();
            let queries = random_matrix(25, 3, &mut rng);
            let truth: Vec<usize> = (0..25).map(|_| rng.below(4)).collect();
            let order: Vec<usize> = (0..25).rev().collect();
            let shuffled_truth: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
            let a = evaluate_zsl_embedded(&queries, &truth, &protos, &names).unwrap();
            let b = evaluate_zsl_embedded(&queries.select_rows(&order), &shuffled_truth, &protos, &names).unwrap();
            prop_assert_eq!(a.top1_unseen, b.top1_unseen);
            prop_assert_eq!(a.confusion_counts, b.confusion_counts);
        }
    }
}
