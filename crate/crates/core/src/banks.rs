//! Textual and visual semantics banks plus the language-guided knowledge
//! aggregation step that maintains them.
//!
//! The textual bank holds one fixed unit-norm anchor per category. The visual
//! bank holds one momentum-updated anchor per category; a column stays
//! all-zeros until the first batch containing that category replaces it with
//! the batch centroid, after which updates follow the exponential moving
//! average `V <- m V + (1 - m) z_C` followed by re-normalization to unit
//! length. Bank mutation happens only through `&mut` access (one logical
//! writer); reads are freely concurrent.

use crate::error::{Error, Result};
use crate::numerics::{
    argmax_rows, dot, matmul, normalize_in_place, EmbeddingMatrix, ZERO_NORM_EPS,
};
use rand_chacha::ChaCha8Rng;

/// Fixed bank of text-derived anchors, stored D x C (one anchor per column).
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TextualSemanticsBank {
    anchors: EmbeddingMatrix,
    names: Vec<String>,
    source_tag: String,
}

impl TextualSemanticsBank {
    /// Builds a bank from a D x C anchor matrix. Columns are normalized to
    /// unit length; an all-zero column is rejected.
    pub fn new(
        anchors: EmbeddingMatrix,
        names: Vec<String>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        let categories = anchors.cols();
        if categories < 2 {
            return Err(Error::InvalidParameter {
                name: "categories",
                message: format!("a textual bank needs at least 2 anchors, got {categories}"),
            });
        }
        if names.len() != categories {
            return Err(Error::CountMismatch {
                what: "category name",
                left: names.len(),
                right: categories,
            });
        }
        let mut seen = std::collections::HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::InvalidParameter {
                    name: "category_names",
                    message: "empty category name".into(),
                });
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateName { name: name.clone() });
            }
        }
        let mut anchors = anchors;
        for j in 0..categories {
            let mut col = anchors.column(j);
            if !normalize_in_place(&mut col) {
                return Err(Error::ZeroNormRow {
                    op: "TextualSemanticsBank::new",
                    row: j,
                });
            }
            for (i, v) in col.iter().enumerate() {
                anchors.set(i, j, *v);
            }
        }
        Ok(Self {
            anchors,
            names,
            source_tag: source_tag.into(),
        })
    }

    /// Builds a bank from one anchor per row (C x D), the layout used by
    /// embedding files.
    pub fn from_anchor_rows(
        rows: &EmbeddingMatrix,
        names: Vec<String>,
        source_tag: impl Into<String>,
    ) -> Result<Self> {
        Self::new(rows.transpose(), names, source_tag)
    }

    pub fn num_categories(&self) -> usize {
        self.anchors.cols()
    }

    pub fn dim(&self) -> usize {
        self.anchors.rows()
    }

    /// D x C anchor matrix.
    pub fn anchors(&self) -> &EmbeddingMatrix {
        &self.anchors
    }

    /// Anchors as a C x D matrix (one anchor per row).
    pub fn anchor_rows(&self) -> EmbeddingMatrix {
        self.anchors.transpose()
    }

    pub fn anchor(&self, category: usize) -> Vec<f64> {
        self.anchors.column(category)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// New bank restricted to `names`, columns ordered as requested. The
    /// paired visual bank must be rebuilt from scratch afterwards.
    pub fn subset(&self, names: &[String]) -> Result<TextualSemanticsBank> {
        let mut missing = Vec::new();
        let mut indices = Vec::with_capacity(names.len());
        for name in names {
            match self.index_of(name) {
                Some(i) => indices.push(i),
                None => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::UnknownCategories { names: missing });
        }
        let dim = self.dim();
        let mut anchors = EmbeddingMatrix::zeros(dim, indices.len().max(1));
        if indices.len() < 2 {
            return Err(Error::InvalidParameter {
                name: "names",
                message: "subset must keep at least 2 categories".into(),
            });
        }
        for (new_j, &old_j) in indices.iter().enumerate() {
            for i in 0..dim {
                anchors.set(i, new_j, self.anchors.get(i, old_j));
            }
        }
        TextualSemanticsBank::new(
            anchors,
            names.to_vec(),
            format!("{}#subset", self.source_tag),
        )
    }
}

/// Momentum-updated bank of visual anchors, stored D x C. A column is
/// all-zeros exactly while its `initialized` flag is false.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualSemanticsBank {
    anchors: EmbeddingMatrix,
    initialized: Vec<bool>,
    momentum: f64,
}

impl VisualSemanticsBank {
    pub fn new(dim: usize, categories: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidParameter {
                name: "momentum",
                message: format!("momentum must lie in (0, 1), got {momentum}"),
            });
        }
        if categories < 1 || dim < 1 {
            return Err(Error::InvalidParameter {
                name: "shape",
                message: format!("need dim >= 1 and categories >= 1, got {dim}x{categories}"),
            });
        }
        Ok(Self {
            anchors: EmbeddingMatrix::zeros(dim, categories),
            initialized: vec![false; categories],
            momentum,
        })
    }

    /// Ablation variant: anchors start as random unit vectors with all flags
    /// set, so every update takes the momentum branch from step one.
    pub fn new_random_init(
        dim: usize,
        categories: usize,
        momentum: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut bank = Self::new(dim, categories, momentum)?;
        for j in 0..categories {
            let mut col = vec![0.0; dim];
            loop {
                crate::rng::fill_normal(rng, &mut col, 1.0);
                if normalize_in_place(&mut col) {
                    break;
                }
            }
            for (i, v) in col.iter().enumerate() {
                bank.anchors.set(i, j, *v);
            }
            bank.initialized[j] = true;
        }
        Ok(bank)
    }

    /// Rebuilds a bank from checkpoint fields.
    pub fn from_parts(
        anchors: EmbeddingMatrix,
        initialized: Vec<bool>,
        momentum: f64,
    ) -> Result<Self> {
        if initialized.len() != anchors.cols() {
            return Err(Error::CountMismatch {
                what: "initialized flag",
                left: initialized.len(),
                right: anchors.cols(),
            });
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidParameter {
                name: "momentum",
                message: format!("momentum must lie in (0, 1), got {momentum}"),
            });
        }
        for (j, &init) in initialized.iter().enumerate() {
            let norm = dot(&anchors.column(j), &anchors.column(j)).sqrt();
            if init && norm < ZERO_NORM_EPS {
                return Err(Error::State(format!(
                    "anchor {j} flagged initialized but has zero norm"
                )));
            }
            if !init && norm >= ZERO_NORM_EPS {
                return Err(Error::State(format!(
                    "anchor {j} not initialized but has nonzero norm"
                )));
            }
        }
        Ok(Self {
            anchors,
            initialized,
            momentum,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.anchors.cols()
    }

    pub fn dim(&self) -> usize {
        self.anchors.rows()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// D x C anchor matrix; uninitialized columns are all-zeros.
    pub fn anchors(&self) -> &EmbeddingMatrix {
        &self.anchors
    }

    pub fn anchor(&self, category: usize) -> Vec<f64> {
        self.anchors.column(category)
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    pub fn initialized_count(&self) -> usize {
        self.initialized.iter().filter(|b| **b).count()
    }

    /// Applies one aggregation result: init-replace for first-seen categories,
    /// the momentum average otherwise, then unit re-normalization. Categories
    /// absent from the batch are untouched.
    pub fn momentum_update(&mut self, batch: &LgkaBatchResult) -> Result<()> {
        if batch.centroids.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "momentum_update",
                left: (batch.centroids.rows(), batch.centroids.cols()),
                right: self.anchors.shape(),
            });
        }
        let m = self.momentum;
        for (row, &category) in batch.present_categories.iter().enumerate() {
            if category >= self.num_categories() {
                return Err(Error::AssignmentOutOfRange {
                    index: row,
                    value: category,
                    categories: self.num_categories(),
                });
            }
            let centroid = batch.centroids.row(row);
            let mut col: Vec<f64> = if self.initialized[category] {
                self.anchors
                    .column(category)
                    .iter()
                    .zip(centroid.iter())
                    .map(|(a, c)| m * a + (1.0 - m) * c)
                    .collect()
            } else {
                centroid.to_vec()
            };
            // A cancelling centroid could drive the column to zero; leave the
            // anchor untouched rather than normalize garbage.
            if !normalize_in_place(&mut col) {
                continue;
            }
            for (i, v) in col.iter().enumerate() {
                self.anchors.set(i, category, *v);
            }
            self.initialized[category] = true;
        }
        Ok(())
    }

    /// The per-sample extended bank `V' = [V^0, ..., V^{C-1}, z_T]` as a
    /// D x (C+1) matrix. Uninitialized columns participate as zeros.
    pub fn append_teacher_anchor(&self, z_t_row: &[f64]) -> Result<EmbeddingMatrix> {
        if z_t_row.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "append_teacher_anchor",
                left: (1, z_t_row.len()),
                right: self.anchors.shape(),
            });
        }
        let norm = dot(z_t_row, z_t_row).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter {
                name: "z_t_row",
                message: format!("teacher feature must be unit-norm, got norm {norm}"),
            });
        }
        let (dim, c) = self.anchors.shape();
        let mut out = EmbeddingMatrix::zeros(dim, c + 1);
        for i in 0..dim {
            for j in 0..c {
                out.set(i, j, self.anchors.get(i, j));
            }
            out.set(i, c, z_t_row[i]);
        }
        Ok(out)
    }
}

/// Output of one aggregation pass over a batch: per-sample category
/// assignments and the centroid of each category present in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LgkaBatchResult {
    pub assignments: Vec<usize>,
    /// One row per entry of `present_categories`, in the same order.
    pub centroids: EmbeddingMatrix,
    /// Ascending category indices that appeared in the batch.
    pub present_categories: Vec<usize>,
}

/// Classifies each sample row of `z` into its most similar text anchor
/// (argmax of the dot products, ties to the lowest index).
pub fn classify_by_tsb(z: &EmbeddingMatrix, tsb: &TextualSemanticsBank) -> Result<Vec<usize>> {
    if z.cols() != tsb.dim() {
        return Err(Error::ShapeMismatch {
            op: "classify_by_tsb",
            left: z.shape(),
            right: tsb.anchors().shape(),
        });
    }
    for i in 0..z.rows() {
        if z.row_norm(i) < ZERO_NORM_EPS {
            return Err(Error::ZeroNormRow {
                op: "classify_by_tsb",
                row: i,
            });
        }
    }
    let scores = matmul(z, tsb.anchors())?;
    Ok(argmax_rows(&scores))
}

/// Arithmetic mean of the sample rows assigned to each category present in
/// the batch. Absent categories produce no centroid.
pub fn batch_centroids(
    z: &EmbeddingMatrix,
    assignments: &[usize],
    num_categories: usize,
) -> Result<LgkaBatchResult> {
    if assignments.len() != z.rows() {
        return Err(Error::CountMismatch {
            what: "assignment",
            left: assignments.len(),
            right: z.rows(),
        });
    }
    for (i, &a) in assignments.iter().enumerate() {
        if a >= num_categories {
            return Err(Error::AssignmentOutOfRange {
                index: i,
                value: a,
                categories: num_categories,
            });
        }
    }
    let dim = z.cols();
    let mut sums = vec![vec![0.0; dim]; num_categories];
    let mut counts = vec![0usize; num_categories];
    for (i, &a) in assignments.iter().enumerate() {
        let row = z.row(i);
        for (s, v) in sums[a].iter_mut().zip(row.iter()) {
            *s += v;
        }
        counts[a] += 1;
    }
    let present: Vec<usize> = (0..num_categories).filter(|&c| counts[c] > 0).collect();
    let mut centroids = EmbeddingMatrix::zeros(present.len().max(1), dim);
    for (row, &c) in present.iter().enumerate() {
        for (j, s) in sums[c].iter().enumerate() {
            centroids.set(row, j, s / counts[c] as f64);
        }
    }
    Ok(LgkaBatchResult {
        assignments: assignments.to_vec(),
        centroids,
        present_categories: present,
    })
}

/// Convenience wrapper running the whole aggregation step (classify,
/// centroid, momentum update) with teacher features.
pub fn lgka_step(
    z_teacher: &EmbeddingMatrix,
    tsb: &TextualSemanticsBank,
    vsb: &mut VisualSemanticsBank,
) -> Result<LgkaBatchResult> {
    let assignments = classify_by_tsb(z_teacher, tsb)?;
    let batch = batch_centroids(z_teacher, &assignments, tsb.num_categories())?;
    vsb.momentum_update(&batch)?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize_rows;
    use crate::rng::{normal, stream_rng, StreamId};

    fn unit_axes_tsb() -> TextualSemanticsBank {
        // e1, e2 anchors in 2-D.
        let anchors = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        TextualSemanticsBank::new(anchors, vec!["a".into(), "b".into()], "test").unwrap()
    }

    fn unit_row(v: Vec<f64>) -> Vec<f64> {
        let mut v = v;
        normalize_in_place(&mut v);
        v
    }

    #[test]
    fn classify_nearest_axis() {
        let tsb = unit_axes_tsb();
        let z = EmbeddingMatrix::from_rows(&[unit_row(vec![0.9, 0.436])]).unwrap();
        assert_eq!(classify_by_tsb(&z, &tsb).unwrap(), vec![0]);
    }

    #[test]
    fn classify_exact_anchor_is_fixed_point() {
        let mut rng = stream_rng(3, StreamId::TextAnchors);
        let raw = EmbeddingMatrix::new(4, 8, (0..32).map(|_| normal(&mut rng)).collect()).unwrap();
        let (rows, _) = l2_normalize_rows(&raw);
        let names = (0..4).map(|i| format!("cat_{i}")).collect();
        let tsb = TextualSemanticsBank::from_anchor_rows(&rows, names, "test").unwrap();
        for k in 0..4 {
            let z = EmbeddingMatrix::from_rows(&[tsb.anchor(k)]).unwrap();
            assert_eq!(classify_by_tsb(&z, &tsb).unwrap(), vec![k]);
        }
    }

    #[test]
    fn classify_matches_brute_force_scan() {
        let mut rng = stream_rng(11, StreamId::TextAnchors);
        let raw = EmbeddingMatrix::new(6, 8, (0..48).map(|_| normal(&mut rng)).collect()).unwrap();
        let (anchor_rows, _) = l2_normalize_rows(&raw);
        let names = (0..6).map(|i| format!("cat_{i}")).collect();
        let tsb = TextualSemanticsBank::from_anchor_rows(&anchor_rows, names, "test").unwrap();
        let raw_z =
            EmbeddingMatrix::new(20, 8, (0..160).map(|_| normal(&mut rng)).collect()).unwrap();
        let (z, _) = l2_normalize_rows(&raw_z);
        let got = classify_by_tsb(&z, &tsb).unwrap();
        for i in 0..z.rows() {
            // Exhaustive max-dot scan oracle.
            let mut best = 0;
            let mut best_dot = f64::NEG_INFINITY;
            for c in 0..6 {
                let d = dot(z.row(i), &tsb.anchor(c));
                if d > best_dot {
                    best_dot = d;
                    best = c;
                }
            }
            assert_eq!(got[i], best, "row {i}");
        }
    }

    #[test]
    fn classify_rejects_zero_rows_naming_the_row() {
        let tsb = unit_axes_tsb();
        let z = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let err = classify_by_tsb(&z, &tsb).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn classify_invariant_under_positive_batch_rescale() {
        let tsb = unit_axes_tsb();
        let z = EmbeddingMatrix::from_rows(&[
            unit_row(vec![0.7, 0.3]),
            unit_row(vec![-0.2, 0.9]),
        ])
        .unwrap();
        let base = classify_by_tsb(&z, &tsb).unwrap();
        let mut scaled = z.clone();
        scaled.scale(37.5);
        assert_eq!(classify_by_tsb(&scaled, &tsb).unwrap(), base);
    }

    #[test]
    fn centroids_hand_mean() {
        let z = EmbeddingMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.8, 0.6],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let res = batch_centroids(&z, &[0, 0, 1], 4).unwrap();
        assert_eq!(res.present_categories, vec![0, 1]);
        assert!((res.centroids.get(0, 0) - 0.9).abs() <= 1e-15);
        assert!((res.centroids.get(0, 1) - 0.3).abs() <= 1e-15);
        assert_eq!(res.centroids.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn centroid_of_single_row_is_that_row() {
        let z = EmbeddingMatrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let res = batch_centroids(&z, &[2], 4).unwrap();
        assert_eq!(res.present_categories, vec![2]);
        assert_eq!(res.centroids.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn centroids_match_grouped_sum_oracle() {
        let mut rng = stream_rng(21, StreamId::TrainBatches);
        let z = EmbeddingMatrix::new(32, 5, (0..160).map(|_| normal(&mut rng)).collect()).unwrap();
        let assignments: Vec<usize> = (0..32).map(|i| (i * 7) % 6).collect();
        let res = batch_centroids(&z, &assignments, 6).unwrap();
        for (row, &c) in res.present_categories.iter().enumerate() {
            let members: Vec<usize> = (0..32).filter(|&i| assignments[i] == c).collect();
            for j in 0..5 {
                let want: f64 =
                    members.iter().map(|&i| z.get(i, j)).sum::<f64>() / members.len() as f64;
                assert!((res.centroids.get(row, j) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn centroids_reject_out_of_range_assignment() {
        let z = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(batch_centroids(&z, &[5], 4).is_err());
    }

    #[test]
    fn momentum_update_init_replace_branch() {
        let mut vsb = VisualSemanticsBank::new(2, 2, 0.999).unwrap();
        let batch = LgkaBatchResult {
            assignments: vec![0],
            centroids: EmbeddingMatrix::from_rows(&[vec![0.6, 0.8]]).unwrap(),
            present_categories: vec![0],
        };
        vsb.momentum_update(&batch).unwrap();
        assert_eq!(vsb.anchor(0), vec![0.6, 0.8]);
        assert!(vsb.initialized()[0]);
        assert!(!vsb.initialized()[1]);
        assert_eq!(vsb.anchor(1), vec![0.0, 0.0]);
    }

    #[test]
    fn momentum_update_ema_branch_then_normalized() {
        let mut vsb = VisualSemanticsBank::new(2, 2, 0.999).unwrap();
        let init = LgkaBatchResult {
            assignments: vec![0],
            centroids: EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            present_categories: vec![0],
        };
        vsb.momentum_update(&init).unwrap();
        let step = LgkaBatchResult {
            assignments: vec![0],
            centroids: EmbeddingMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap(),
            present_categories: vec![0],
        };
        vsb.momentum_update(&step).unwrap();
        // Pre-normalization (0.999, 0.001), then unit length.
        let norm = (0.999f64 * 0.999 + 0.001 * 0.001).sqrt();
        let a = vsb.anchor(0);
        assert!((a[0] - 0.999 / norm).abs() <= 1e-15);
        assert!((a[1] - 0.001 / norm).abs() <= 1e-15);
    }

    #[test]
    fn momentum_update_converges_geometrically_to_constant_centroid() {
        let mut vsb = VisualSemanticsBank::new(3, 2, 0.9).unwrap();
        let mut c = vec![0.2, -0.5, 0.7];
        normalize_in_place(&mut c);
        let start = LgkaBatchResult {
            assignments: vec![0],
            centroids: EmbeddingMatrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(),
            present_categories: vec![0],
        };
        vsb.momentum_update(&start).unwrap();
        let target = LgkaBatchResult {
            assignments: vec![0],
            centroids: EmbeddingMatrix::from_rows(&[c.clone()]).unwrap(),
            present_categories: vec![0],
        };
        let dist =
            |v: &[f64]| -> f64 { v.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() };
        let mut prev = dist(&vsb.anchor(0));
        let mut ratios = Vec::new();
        for _ in 0..200 {
            vsb.momentum_update(&target).unwrap();
            let d = dist(&vsb.anchor(0));
            if prev > 1e-9 {
                ratios.push(d / prev);
            }
            prev = d;
        }
        // Geometric contraction at (approximately) rate m per step, and
        // convergence to the centroid.
        assert!(prev < 1e-6, "distance after 200 steps: {prev}");
        let tail = &ratios[5..50.min(ratios.len())];
        for r in tail {
            assert!((r - 0.9).abs() < 0.05, "contraction ratio {r}");
        }
    }

    #[test]
    fn momentum_zero_tracks_latest_centroid_and_near_one_freezes() {
        // m -> 0+: anchor equals the latest centroid (normalized).
        let mut fast = VisualSemanticsBank::new(2, 2, 1e-12).unwrap();
        let init = LgkaBatchResult {
            assignments: vec![0],
            centroids: EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            present_categories: vec![0],
        };
        fast.momentum_update(&init).unwrap();
        let next = LgkaBatchResult {
            assignments: vec![0],
            centroids: EmbeddingMatrix::from_rows(&[vec![0.6, 0.8]]).unwrap(),
            present_categories: vec![0],
        };
        fast.momentum_update(&next).unwrap();
        let a = fast.anchor(0);
        assert!((a[0] - 0.6).abs() <= 1e-9 && (a[1] - 0.8).abs() <= 1e-9);

        // m -> 1-: anchor invariant under updates.
        let mut slow = VisualSemanticsBank::new(2, 2, 1.0 - 1e-12).unwrap();
        slow.momentum_update(&init).unwrap();
        slow.momentum_update(&next).unwrap();
        let a = slow.anchor(0);
        assert!((a[0] - 1.0).abs() <= 1e-9 && a[1].abs() <= 1e-9);
    }

    #[test]
    fn initialized_flags_are_monotone_and_absent_categories_untouched() {
        let mut rng = stream_rng(5, StreamId::TrainBatches);
        let mut vsb = VisualSemanticsBank::new(4, 3, 0.5).unwrap();
        let mut seen = vec![false; 3];
        for step in 0..20 {
            let cat = step % 2; // category 2 never appears
            let mut c = vec![0.0; 4];
            crate::rng::fill_normal(&mut rng, &mut c, 1.0);
            normalize_in_place(&mut c);
            let batch = LgkaBatchResult {
                assignments: vec![cat],
                centroids: EmbeddingMatrix::from_rows(&[c]).unwrap(),
                present_categories: vec![cat],
            };
            vsb.momentum_update(&batch).unwrap();
            seen[cat] = true;
            for (j, &s) in seen.iter().enumerate() {
                assert_eq!(vsb.initialized()[j], s);
            }
        }
        assert_eq!(vsb.anchor(2), vec![0.0; 4]);
        assert_eq!(vsb.initialized_count(), 2);
    }

    #[test]
    fn append_teacher_anchor_layout_and_self_similarity() {
        let mut vsb = VisualSemanticsBank::new(2, 2, 0.9).unwrap();
        let batch = LgkaBatchResult {
            assignments: vec![0, 1],
            centroids: EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            present_categories: vec![0, 1],
        };
        vsb.momentum_update(&batch).unwrap();
        let t = unit_row(vec![0.5, 0.5]);
        let v_prime = vsb.append_teacher_anchor(&t).unwrap();
        assert_eq!(v_prime.shape(), (2, 3));
        assert_eq!(v_prime.column(0), vec![1.0, 0.0]);
        assert_eq!(v_prime.column(1), vec![0.0, 1.0]);
        assert!((dot(&t, &v_prime.column(2)) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn uninitialized_column_contributes_zero_logit() {
        let mut vsb = VisualSemanticsBank::new(2, 2, 0.9).unwrap();
        let batch = LgkaBatchResult {
            assignments: vec![0],
            centroids: EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            present_categories: vec![0],
        };
        vsb.momentum_update(&batch).unwrap();
        let t = vec![1.0, 0.0];
        let v_prime = vsb.append_teacher_anchor(&t).unwrap();
        let logits = matmul(&EmbeddingMatrix::from_rows(&[t]).unwrap(), &v_prime).unwrap();
        // Column 1 is uninitialized: logit exactly 0, softmax mass exp(0/tau)/Z.
        assert_eq!(logits.get(0, 1), 0.0);
        let s = crate::numerics::softmax_rows(&logits, 0.5).unwrap();
        let z = (1.0f64 / 0.5).exp() + 1.0 + (1.0f64 / 0.5).exp();
        assert!((s.get(0, 1) - 1.0 / z).abs() <= 1e-12);
    }

    #[test]
    fn subset_selects_and_permutes_columns() {
        let mut rng = stream_rng(9, StreamId::TextAnchors);
        let raw = EmbeddingMatrix::new(4, 6, (0..24).map(|_| normal(&mut rng)).collect()).unwrap();
        let (rows, _) = l2_normalize_rows(&raw);
        let names: Vec<String> = (0..4).map(|i| format!("cat_{i}")).collect();
        let tsb = TextualSemanticsBank::from_anchor_rows(&rows, names.clone(), "test").unwrap();

        let two = tsb.subset(&["cat_2".into(), "cat_0".into()]).unwrap();
        assert_eq!(two.num_categories(), 2);
        assert_eq!(two.names(), &["cat_2".to_string(), "cat_0".to_string()]);
        // Permutation oracle: column k of the subset equals the column the
        // name maps to in the original bank.
        assert_eq!(two.anchor(0), tsb.anchor(2));
        assert_eq!(two.anchor(1), tsb.anchor(0));

        let same = tsb.subset(&names).unwrap();
        assert_eq!(same.anchors(), tsb.anchors());
        assert_eq!(same.names(), tsb.names());
    }

    #[test]
    fn subset_unknown_names_listed_in_error() {
        let tsb = unit_axes_tsb();
        let err = tsb
            .subset(&["a".into(), "nope".into(), "missing".into()])
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nope") && msg.contains("missing"), "{msg}");
    }

    #[test]
    fn tsb_rejects_duplicate_and_empty_names() {
        let anchors = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(TextualSemanticsBank::new(
            anchors.clone(),
            vec!["x".into(), "x".into()],
            "t"
        )
        .is_err());
        assert!(
            TextualSemanticsBank::new(anchors, vec!["x".into(), "".into()], "t").is_err()
        );
    }
}
