//! Dense row-major linear algebra and the information-theoretic primitives
//! shared by every other module.
//!
//! Everything here is a pure function on immutable inputs (safe to call from
//! any number of threads) and accumulates in a fixed order, so results are
//! bit-reproducible for a given build — including between the parallel and
//! sequential builds, which differ only in how rows are scheduled.

use crate::error::{Error, Result};
use crate::par;

/// Norms below this are treated as zero when normalizing rows.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Log clamp used inside cross-entropy/KL so exact zeros stay finite.
pub const LOG_EPS: f64 = 1e-12;

/// Dense row-major matrix of 64-bit floats. Rows are samples (or anchors),
/// columns are feature dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter {
                name: "shape",
                message: format!("rows and cols must be >= 1, got {rows}x{cols}"),
            });
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidParameter {
                name: "data",
                message: format!("expected {} entries for {rows}x{cols}, got {}", rows * cols, data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "zero-sized matrix");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidParameter {
                name: "rows",
                message: "need at least one row".into(),
            });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::InvalidParameter {
                    name: "rows",
                    message: format!("row {i} has {} entries, expected {cols}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn transpose(&self) -> EmbeddingMatrix {
        let mut out = EmbeddingMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// First non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        self.data
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.cols, p % self.cols))
    }

    /// Euclidean norm of row `i`.
    pub fn row_norm(&self, i: usize) -> f64 {
        self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

/// Batch of per-row probability distributions: entries in [0, 1], each row
/// summing to 1 within 1e-9. Stored batch-major (B x K).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    probs: EmbeddingMatrix,
}

impl ScoreDistribution {
    /// Validating constructor for externally supplied probabilities.
    pub fn new(probs: EmbeddingMatrix) -> Result<Self> {
        for i in 0..probs.rows() {
            let mut sum = 0.0;
            for (j, &p) in probs.row(i).iter().enumerate() {
                if !(0.0..=1.0 + 1e-12).contains(&p) {
                    return Err(Error::InvalidParameter {
                        name: "probs",
                        message: format!("entry ({i},{j}) = {p} outside [0,1]"),
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter {
                    name: "probs",
                    message: format!("row {i} sums to {sum}, expected 1"),
                });
            }
        }
        Ok(Self { probs })
    }

    /// Internal constructor for rows already produced by `softmax_rows`.
    pub(crate) fn from_softmax(probs: EmbeddingMatrix) -> Self {
        Self { probs }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.probs.rows()
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.probs.cols()
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        self.probs.shape()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs.get(i, j)
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.probs
    }
}

#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        acc += a * b;
    }
    acc
}

/// Standard matrix product. Each output entry accumulates over the inner
/// dimension in ascending order (row-major), so results match a naive triple
/// loop bit-for-bit regardless of how rows are scheduled.
pub fn matmul(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k) = a.shape();
    let n = b.cols();
    let mut out = vec![0.0; m * n];
    par::for_each_chunk_mut(&mut out, n, k * n, |i, out_row| {
        let a_row = a.row(i);
        for (l, &a_il) in a_row.iter().enumerate().take(k) {
            let b_row = b.row(l);
            for (o, &b_lj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_il * b_lj;
            }
        }
    });
    EmbeddingMatrix::new(m, n, out)
}

/// Divides each row by its Euclidean norm. Rows with norm below
/// [`ZERO_NORM_EPS`] are returned unchanged and flagged.
pub fn l2_normalize_rows(x: &EmbeddingMatrix) -> (EmbeddingMatrix, Vec<bool>) {
    let mut out = x.clone();
    let cols = x.cols();
    let mut flags = vec![false; x.rows()];
    for (i, flag) in flags.iter_mut().enumerate() {
        let row = &mut out.data[i * cols..(i + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < ZERO_NORM_EPS {
            *flag = true;
        } else {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    (out, flags)
}

/// Normalizes a single vector in place; returns false (vector untouched)
/// when its norm is below [`ZERO_NORM_EPS`].
pub fn normalize_in_place(v: &mut [f64]) -> bool {
    let norm = dot(v, v).sqrt();
    if norm < ZERO_NORM_EPS {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// Row-wise softmax of `logits / tau`, computed with max-subtraction so large
/// logits cannot overflow.
pub fn softmax_rows(logits: &EmbeddingMatrix, tau: f64) -> Result<ScoreDistribution> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter {
            name: "tau",
            message: format!("temperature must be a positive real, got {tau}"),
        });
    }
    if let Some((i, j)) = logits.find_non_finite() {
        return Err(Error::NonFiniteInput {
            op: "softmax_rows",
            row: i,
            col: j,
        });
    }
    let (rows, cols) = logits.shape();
    let mut out = vec![0.0; rows * cols];
    par::for_each_chunk_mut(&mut out, cols, 4 * cols, |i, out_row| {
        let row = logits.row(i);
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            let s = v / tau;
            if s > max {
                max = s;
            }
        }
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row.iter()) {
            let e = (v / tau - max).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    });
    Ok(ScoreDistribution::from_softmax(EmbeddingMatrix::new(
        rows, cols, out,
    )?))
}

/// Which batch reduction a loss-like sum applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Mean over batch rows (default; loss scale independent of batch size).
    Mean,
    /// Plain sum over batch rows.
    Sum,
}

/// Cross entropy `-sum_ij target[i,j] * ln(pred[i,j] + eps)` with the target
/// treated as a constant, reduced over the batch per `reduction`.
pub fn cross_entropy_rows(
    target: &ScoreDistribution,
    pred: &ScoreDistribution,
    reduction: Reduction,
) -> Result<f64> {
    if target.shape() != pred.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_rows",
            left: target.shape(),
            right: pred.shape(),
        });
    }
    let mut total = 0.0;
    for i in 0..target.rows() {
        let t = target.row(i);
        let p = pred.row(i);
        let mut row_ce = 0.0;
        for (tv, pv) in t.iter().zip(p.iter()) {
            row_ce -= tv * (pv + LOG_EPS).ln();
        }
        total += row_ce;
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / target.rows() as f64,
    })
}

/// KL divergence `sum_ij p * ln((p + eps)/(q + eps))`, summed over the whole
/// batch. Satisfies `cross_entropy(p, q, Sum) = kl(p, q) + entropy(p)` with
/// the same epsilon clamp.
pub fn kl_rows(p: &ScoreDistribution, q: &ScoreDistribution) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_rows",
            left: p.shape(),
            right: q.shape(),
        });
    }
    let mut total = 0.0;
    for i in 0..p.rows() {
        for (pv, qv) in p.row(i).iter().zip(q.row(i).iter()) {
            total += pv * ((pv + LOG_EPS) / (qv + LOG_EPS)).ln();
        }
    }
    Ok(total)
}

/// Per-row index of the maximum entry; ties go to the lowest index.
pub fn argmax_rows(x: &EmbeddingMatrix) -> Vec<usize> {
    x.iter_rows()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent triple-loop product used as the matmul oracle.
    fn matmul_oracle(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> EmbeddingMatrix {
        let mut out = EmbeddingMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for l in 0..a.cols() {
                    acc += a.get(i, l) * b.get(l, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
        use crate::rng::{normal, stream_rng, StreamId};
        let mut rng = stream_rng(seed, StreamId::EvalSplit);
        let data = (0..rows * cols).map(|_| normal(&mut rng)).collect();
        EmbeddingMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = EmbeddingMatrix::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = EmbeddingMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = EmbeddingMatrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c.get(0, 0), 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = rand_matrix(5, 7, 1);
        let b = rand_matrix(7, 3, 2);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        for (g, w) in got.data().iter().zip(want.data().iter()) {
            assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = rand_matrix(2, 3, 3);
        let b = rand_matrix(4, 2, 4);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(4, 2)"), "{msg}");
    }

    #[test]
    fn normalize_three_four_five() {
        let x = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let (n, flags) = l2_normalize_rows(&x);
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(flags, vec![false]);
    }

    #[test]
    fn normalize_zero_row_flagged() {
        let x = EmbeddingMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let (n, flags) = l2_normalize_rows(&x);
        assert_eq!(n.row(0), &[0.0, 0.0]);
        assert_eq!(flags, vec![true]);
    }

    #[test]
    fn normalize_random_rows_unit_norm() {
        let x = rand_matrix(10, 8, 5);
        let (n, flags) = l2_normalize_rows(&x);
        assert!(flags.iter().all(|f| !f));
        for i in 0..n.rows() {
            // Norm recomputation oracle.
            let norm = n.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_equal_logits_uniform() {
        for c in [-3.0, 0.0, 17.5] {
            for tau in [0.04, 1.0, 10.0] {
                let x = EmbeddingMatrix::from_rows(&[vec![c, c, c]]).unwrap();
                let s = softmax_rows(&x, tau).unwrap();
                for j in 0..3 {
                    assert!((s.get(0, j) - 1.0 / 3.0).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn softmax_direct_two_logit_evaluation() {
        let x = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let s = softmax_rows(&x, 1.0).unwrap();
        let e = 1.0_f64.exp();
        assert!((s.get(0, 0) - e / (e + 1.0)).abs() <= 1e-12);
        assert!((s.get(0, 1) - 1.0 / (e + 1.0)).abs() <= 1e-12);
        assert!((s.get(0, 0) - 0.73106).abs() < 1e-5);
        assert!((s.get(0, 1) - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn softmax_huge_logits_no_overflow() {
        let x = EmbeddingMatrix::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&x, 1.0).unwrap();
        assert!(s.get(0, 0) > 1.0 - 1e-12);
        assert!(s.get(0, 1) < 1e-12);
        assert!(s.get(0, 0).is_finite());
    }

    #[test]
    fn softmax_rejects_bad_tau_and_non_finite() {
        let x = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(softmax_rows(&x, 0.0).is_err());
        assert!(softmax_rows(&x, -1.0).is_err());
        let bad = EmbeddingMatrix::from_rows(&[vec![f64::NAN, 0.0]]).unwrap();
        assert!(softmax_rows(&bad, 1.0).is_err());
    }

    #[test]
    fn cross_entropy_of_distribution_with_itself_is_entropy() {
        let p = ScoreDistribution::new(EmbeddingMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap())
            .unwrap();
        let ce = cross_entropy_rows(&p, &p, Reduction::Sum).unwrap();
        assert!((ce - 2.0_f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn cross_entropy_matched_one_hot_is_zero() {
        let p = ScoreDistribution::new(EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let ce = cross_entropy_rows(&p, &p, Reduction::Sum).unwrap();
        assert!(ce.abs() <= 1e-9);
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let p = ScoreDistribution::new(
            EmbeddingMatrix::from_rows(&[vec![0.2, 0.3, 0.5]]).unwrap(),
        )
        .unwrap();
        assert!(kl_rows(&p, &p).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn kl_one_hot_vs_uniform_is_ln_two() {
        let p = ScoreDistribution::new(EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap())
            .unwrap();
        let q = ScoreDistribution::new(EmbeddingMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap())
            .unwrap();
        let kl = kl_rows(&p, &q).unwrap();
        assert!((kl - 2.0_f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn argmax_basic_and_tie_rule() {
        let x = EmbeddingMatrix::from_rows(&[vec![0.1, 0.9]]).unwrap();
        assert_eq!(argmax_rows(&x), vec![1]);
        let tie = EmbeddingMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(argmax_rows(&tie), vec![0]);
    }

    #[test]
    fn argmax_matches_linear_scan_oracle() {
        let x = rand_matrix(20, 6, 9);
        let got = argmax_rows(&x);
        for (i, &g) in got.iter().enumerate() {
            let mut best = 0;
            for j in 1..6 {
                if x.get(i, j) > x.get(i, best) {
                    best = j;
                }
            }
            assert_eq!(g, best);
        }
    }

    #[test]
    fn score_distribution_validates_rows() {
        let bad = EmbeddingMatrix::from_rows(&[vec![0.7, 0.7]]).unwrap();
        assert!(ScoreDistribution::new(bad).is_err());
        let neg = EmbeddingMatrix::from_rows(&[vec![-0.1, 1.1]]).unwrap();
        assert!(ScoreDistribution::new(neg).is_err());
    }
}
