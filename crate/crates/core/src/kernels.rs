//! Dense linear algebra and statistics primitives.
//!
//! Everything here is a pure function over borrowed data. Vectors are plain
//! `&[f64]` slices; [`Matrix`] is a row-major owned buffer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance at or below this value is treated as zero.
pub const VARIANCE_EPS: f64 = 1e-12;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equally sized rows. An empty slice yields a `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics; a zero-column matrix has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rescales every row to unit l2 norm.
    pub fn normalize_rows(&mut self) -> Result<()> {
        let cols = self.cols;
        if cols == 0 {
            return Ok(());
        }
        for row in self.data.chunks_exact_mut(cols) {
            normalize_in_place(row)?;
        }
        Ok(())
    }

    /// Rounds every entry to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

#[inline]
fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Dot product with four independent accumulators. The reduction order is
/// fixed, so results are reproducible bit for bit.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Squared Euclidean distance.
pub fn l2_distance_sq(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum())
}

/// Temperature softmax with max-subtraction.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, temperature, &mut out)?;
    Ok(out)
}

/// [`softmax`] writing into a caller-provided buffer of the same length.
pub fn softmax_into(scores: &[f64], temperature: f64, out: &mut [f64]) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    check_dims(scores, out)?;
    if scores.is_empty() {
        return Err(Error::DimMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = ((s - max) / temperature).exp();
        *o = e;
        total += e;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}

/// Population mean and variance.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Third standardized moment of a count distribution:
/// `sum_i (c_i - mean)^3 / (n * var^(3/2))` with population variance.
pub fn skewness_of_counts(counts: &[f64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::DimMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let (mean, var) = mean_and_variance(counts);
    if var <= VARIANCE_EPS {
        return Err(Error::ZeroVariance(var));
    }
    let cubes: f64 = counts.iter().map(|c| (c - mean).powi(3)).sum();
    Ok(cubes / (counts.len() as f64 * var.powf(1.5)))
}

/// Rescales `v` to unit l2 norm.
pub fn normalize_in_place(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector);
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Ok(())
}

/// Pairwise cosines between the rows of `queries` and of `prototypes`,
/// returned with the row norms of each.
pub fn cosine_matrix(queries: &Matrix, prototypes: &Matrix) -> Result<CosineTable> {
    if queries.cols() != prototypes.cols() {
        return Err(Error::DimMismatch {
            expected: prototypes.cols(),
            actual: queries.cols(),
        });
    }
    let row_norms = |m: &Matrix| -> Result<Vec<f64>> {
        m.iter_rows()
            .map(|r| {
                let n = norm(r);
                if n == 0.0 {
                    Err(Error::DegenerateVector)
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let query_norms = row_norms(queries)?;
    let prototype_norms = row_norms(prototypes)?;
    let mut cos = Matrix::zeros(queries.rows(), prototypes.rows());
    for (i, q) in queries.iter_rows().enumerate() {
        for (c, p) in prototypes.iter_rows().enumerate() {
            let v = dot(q, p) / (query_norms[i] * prototype_norms[c]);
            cos.set(i, c, v.clamp(-1.0, 1.0));
        }
    }
    Ok(CosineTable {
        cos,
        query_norms,
        prototype_norms,
    })
}

/// Output of [`cosine_matrix`].
#[derive(Debug, Clone)]
pub struct CosineTable {
    /// `queries x prototypes`
    pub cos: Matrix,
    pub query_norms: Vec<f64>,
    pub prototype_norms: Vec<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / sqrt(14 * 77)
        let c = cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((c - 0.974631846).abs() < 1e-9, "{c}");
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector)
        ));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_distance_sq(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(l2_distance_sq(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert_eq!(l2_distance_sq(&[1.0, 2.0], &[4.0, 6.0]).unwrap(), 25.0);
        assert!(matches!(
            l2_distance_sq(&[1.0], &[1.0, 2.0]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[2.5, 2.5, 2.5], 0.3).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1.0, 0.0], 1.0).unwrap();
        let logistic = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((p[0] - logistic).abs() < 1e-15);
        assert!((p[0] - 0.731058579).abs() < 1e-9);
        assert!((p[1] - 0.268941421).abs() < 1e-9);
        let p = softmax(&[1.0, 0.0], 0.01).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!(p[1].abs() < 1e-12);
        assert!(softmax(&[1.0], 0.0).is_err());
    }

    #[test]
    fn skewness_examples() {
        assert!(matches!(
            skewness_of_counts(&[5.0, 5.0, 5.0, 5.0]),
            Err(Error::ZeroVariance(_))
        ));
        // mean 4, cubed deviations (216, -8, -8, -8), var 12
        let oracle = 192.0 / (4.0 * 12f64.powf(1.5));
        let s = skewness_of_counts(&[10.0, 2.0, 2.0, 2.0]).unwrap();
        assert!((s - oracle).abs() < 1e-12);
        assert!((s - 1.154700538).abs() < 1e-9);
        let s2 = skewness_of_counts(&[2.0, 2.0, 2.0, 10.0]).unwrap();
        assert!((s2 - 1.154700538).abs() < 1e-9);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.1, 0.5, 0.2, 0.5]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    fn nonzero_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, n)
            .prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            (a, b) in (1usize..12).prop_flat_map(|n| (nonzero_vec(n), nonzero_vec(n))),
            s in 0.01f64..100.0,
            t in 0.01f64..100.0,
        ) {
            let c = cosine(&a, &b).unwrap();
            prop_assert!((c - cosine(&b, &a).unwrap()).abs() < 1e-12);
            let sa: Vec<f64> = a.iter().map(|x| x * s).collect();
            let tb: Vec<f64> = b.iter().map(|x| x * t).collect();
            prop_assert!((c - cosine(&sa, &tb).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn softmax_is_simplex_and_keeps_argmax(
            scores in prop::collection::vec(-50.0f64..50.0, 1..20),
            tau in 0.001f64..10.0,
        ) {
            let p = softmax(&scores, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v >= 0.0 && v.is_finite()));
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if scores.iter().filter(|&&s| s == max).count() == 1 {
                prop_assert_eq!(argmax(&p), argmax(&scores));
            }
        }

        #[test]
        fn skewness_permutation_and_shift_invariant(
            counts in prop::collection::vec(0u32..50, 2..20),
            shift in -100.0f64..100.0,
            rot in 0usize..20,
        ) {
            let c: Vec<f64> = counts.iter().map(|&x| x as f64).collect();
            if let Ok(s) = skewness_of_counts(&c) {
                let mut rotated = c.clone();
                let k = rot % rotated.len();
                rotated.rotate_left(k);
                rotated.reverse();
                prop_assert!((s - skewness_of_counts(&rotated).unwrap()).abs() < 1e-9);
                let shifted: Vec<f64> = c.iter().map(|x| x + shift).collect();
                prop_assert!((s - skewness_of_counts(&shifted).unwrap()).abs() < 1e-9);
            }
        }

        #[test]
        fn single_hub_is_positive_and_mirror_negates(
            n in 3usize..30,
            base in 0.0f64..20.0,
            hub in 1.0f64..100.0,
        ) {
            let mut c = vec![base; n];
            c[0] = base + hub;
            let s = skewness_of_counts(&c).unwrap();
            prop_assert!(s > 0.0);
            let mirrored: Vec<f64> = c.iter().map(|x| -x).collect();
            prop_assert!((s + skewness_of_counts(&mirrored).unwrap()).abs() < 1e-9);
        }
    }
}
