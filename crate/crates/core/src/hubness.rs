//! Hubness diagnostics: how often each prototype appears among the `j`
//! nearest neighbors of a query set, and the skewness of those counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, Matrix};

/// Neighborhood similarity used for the top-`j` search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    L2,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
        })
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "l2" => Ok(Metric::L2),
            other => Err(Error::config(format!(
                "unknown metric {other:?} (expected cosine or l2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccurrenceDistribution {
    pub counts: Vec<u64>,
    pub j: usize,
    pub n_queries: usize,
}

impl OccurrenceDistribution {
    pub fn counts_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Indices of the `j` best prototypes for each query, best first.
///
/// Larger score is better; equal scores rank the lower index first.
pub fn top_j_neighbors(
    queries: &Matrix,
    prototypes: &Matrix,
    j: usize,
    metric: Metric,
) -> Result<Vec<Vec<usize>>> {
    let n_protos = prototypes.rows();
    if j == 0 || j > n_protos {
        return Err(Error::config(format!(
            "j must be between 1 and the number of prototypes ({n_protos}), got {j}"
        )));
    }
    if queries.cols() != prototypes.cols() {
        return Err(Error::DimMismatch {
            expected: prototypes.cols(),
            actual: queries.cols(),
        });
    }
    let proto_norms: Vec<f64> = prototypes.iter_rows().map(kernels::norm).collect();
    if metric == Metric::Cosine && proto_norms.contains(&0.0) {
        return Err(Error::DegenerateVector);
    }
    (0..queries.rows())
        .into_par_iter()
        .map(|i| {
            let q = queries.row(i);
            let qn = kernels::norm(q);
            if metric == Metric::Cosine && qn == 0.0 {
                return Err(Error::DegenerateVector);
            }
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(j + 1);
            for (c, proto) in prototypes.iter_rows().enumerate() {
                let score = match metric {
                    Metric::Cosine => kernels::dot(q, proto) / (qn * proto_norms[c]),
                    Metric::L2 => -kernels::l2_distance_sq(q, proto)?,
                };
                // Strictly-better insertion keeps earlier (lower) indices
                // ahead of later ties.
                let pos = best.iter().position(|&(s, _)| score > s).unwrap_or(best.len());
                if pos < j {
                    best.insert(pos, (score, c));
                    best.truncate(j);
                }
            }
            Ok(best.into_iter().map(|(_, c)| c).collect())
        })
        .collect()
}

/// Counts of prototype appearances among every query's `j` nearest
/// neighbors, from an exact search.
pub fn occurrence_distribution(
    queries: &Matrix,
    prototypes: &Matrix,
    j: usize,
    metric: Metric,
) -> Result<OccurrenceDistribution> {
    let neighbors = top_j_neighbors(queries, prototypes, j, metric)?;
    let mut counts = vec![0u64; prototypes.rows()];
    for c in neighbors.iter().flatten() {
        counts[*c] += 1;
    }
    Ok(OccurrenceDistribution {
        counts,
        j,
        n_queries: queries.rows(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hub {
    pub prototype: usize,
    pub name: Option<String>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubnessReport {
    pub j: usize,
    pub metric: Metric,
    pub n_queries: usize,
    pub counts: Vec<u64>,
    /// `None` when the counts have (near) zero variance.
    pub skewness: Option<f64>,
    pub skewness_null_reason: Option<String>,
    pub top_hubs: Vec<Hub>,
}

pub const MAX_REPORTED_HUBS: usize = 10;

impl HubnessReport {
    pub fn from_distribution(dist: &OccurrenceDistribution, metric: Metric) -> Self {
        let (skewness, skewness_null_reason) = match kernels::skewness_of_counts(&dist.counts_f64()) {
            Ok(s) => (Some(s), None),
            Err(e @ Error::ZeroVariance(_)) => (None, Some(e.to_string())),
            Err(e) => (None, Some(e.to_string())),
        };
        let mut order: Vec<usize> = (0..dist.counts.len()).collect();
        order.sort_by(|&a, &b| dist.counts[b].cmp(&dist.counts[a]).then(a.cmp(&b)));
        let top_hubs = order
            .into_iter()
            .take(MAX_REPORTED_HUBS)
            .map(|c| Hub {
                prototype: c,
                name: None,
                count: dist.counts[c],
            })
            .collect();
        Self {
            j: dist.j,
            metric,
            n_queries: dist.n_queries,
            counts: dist.counts.clone(),
            skewness,
            skewness_null_reason,
            top_hubs,
        }
    }

    /// Attaches prototype names to the hub list.
    pub fn with_names(mut self, names: &[String]) -> Self {
        for hub in &mut self.top_hubs {
            hub.name = names.get(hub.prototype).cloned();
        }
        self
    }
}

pub fn hubness_report(
    queries: &Matrix,
    prototypes: &Matrix,
    j: usize,
    metric: Metric,
) -> Result<HubnessReport> {
    let dist = occurrence_distribution(queries, prototypes, j, metric)?;
    Ok(HubnessReport::from_distribution(&dist, metric))
}
