//! Alignment losses: visual-space and textual-space cross-entropy between
//! teacher and student similarity-score distributions, the combined and
//! generalized (three-term) objectives, and the queue-based baseline.
//!
//! Every loss returns its value, named components, and analytic gradients.
//! Teacher embeddings are constants everywhere: gradients flow into the
//! student embeddings (through the similarity products and the output
//! normalization Jacobian `I - z z^T`, which is idempotent and therefore safe
//! to compose with the student's own backward) and, in the generalized and
//! naive-projected losses, into the anchor projection parameters.

use std::collections::{BTreeMap, VecDeque};

use crate::banks::{TextualSemanticsBank, VisualSemanticsBank};
use crate::error::{Error, Result};
use crate::numerics::{
    cross_entropy_rows, dot, matmul, softmax_rows, EmbeddingMatrix, Reduction, ScoreDistribution,
    LOG_EPS,
};
use crate::student::{MlpGradients, ProjectionHead};

/// Which objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Alpha-weighted visual + textual alignment.
    Standard,
    /// Three cross-entropy terms sharing the visual teacher distribution as
    /// target; trains the anchor projection.
    Generalized,
    /// Queue-based similarity distillation over randomly maintained instances.
    BaselineSeed,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Standard => "standard",
            LossMode::Generalized => "generalized",
            LossMode::BaselineSeed => "baseline_seed",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(LossMode::Standard),
            "generalized" => Ok(LossMode::Generalized),
            "baseline_seed" => Ok(LossMode::BaselineSeed),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?} (expected standard|generalized|baseline_seed)"
            ))),
        }
    }
}

/// Temperatures, term weight, and reduction for the losses.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub tau_teacher: f64,
    pub tau_student: f64,
    pub alpha: f64,
    pub mode: LossMode,
    pub reduction: Reduction,
}

impl LossConfig {
    pub fn standard(tau_teacher: f64, tau_student: f64) -> Self {
        Self {
            tau_teacher,
            tau_student,
            alpha: 0.5,
            mode: LossMode::Standard,
            reduction: Reduction::Mean,
        }
    }

    pub fn generalized(tau_teacher: f64, tau_student: f64) -> Self {
        Self {
            tau_teacher,
            tau_student,
            alpha: 0.33,
            mode: LossMode::Generalized,
            reduction: Reduction::Mean,
        }
    }

    pub fn baseline_seed(tau_teacher: f64, tau_student: f64) -> Self {
        Self {
            tau_teacher,
            tau_student,
            alpha: 1.0,
            mode: LossMode::BaselineSeed,
            reduction: Reduction::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [
            ("tau_teacher", self.tau_teacher),
            ("tau_student", self.tau_student),
        ] {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::InvalidParameter {
                    name,
                    message: format!("temperature must be positive, got {tau}"),
                });
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter {
                name: "alpha",
                message: format!("alpha must lie in [0, 1], got {}", self.alpha),
            });
        }
        Ok(())
    }

    fn batch_scale(&self, batch: usize) -> f64 {
        match self.reduction {
            Reduction::Mean => 1.0 / batch as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// The four similarity-score distributions of one loss evaluation, kept for
/// diagnostics. Fields are present only when the mode computes them.
#[derive(Debug, Clone, Default)]
pub struct ScoreSnapshots {
    pub teacher_visual: Option<ScoreDistribution>,
    pub student_visual: Option<ScoreDistribution>,
    pub teacher_textual: Option<ScoreDistribution>,
    pub student_textual: Option<ScoreDistribution>,
}

impl ScoreSnapshots {
    /// First few rows of each distribution, for abort diagnostics.
    pub fn head_rows(&self, n: usize) -> BTreeMap<String, Vec<Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (name, dist) in [
            ("teacher_visual", &self.teacher_visual),
            ("student_visual", &self.student_visual),
            ("teacher_textual", &self.teacher_textual),
            ("student_textual", &self.student_textual),
        ] {
            if let Some(d) = dist {
                let rows = (0..d.rows().min(n)).map(|i| d.row(i).to_vec()).collect();
                out.insert(name.to_string(), rows);
            }
        }
        out
    }
}

/// Snapshot written when training aborts on a non-finite loss.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DiagnosticSnapshot {
    pub step: u64,
    pub components: BTreeMap<String, f64>,
    pub score_rows: BTreeMap<String, Vec<Vec<f64>>>,
}

/// Value, components, gradients, and score snapshots of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    /// Gradient w.r.t. the (unit-norm) student embeddings, B x D.
    pub grad_student: EmbeddingMatrix,
    /// Gradient w.r.t. the anchor projection parameters, when one is in play.
    pub grad_projection: Option<MlpGradients>,
    pub scores: ScoreSnapshots,
}

/// FIFO queue of past teacher embeddings backing the baseline loss.
#[derive(Debug, Clone)]
pub struct InstanceQueue {
    entries: VecDeque<Vec<f64>>,
    capacity: usize,
    dim: usize,
}

impl InstanceQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::InvalidParameter {
                name: "queue",
                message: format!("capacity and dim must be >= 1, got {capacity} and {dim}"),
            });
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Enqueues each row, evicting the oldest entries beyond capacity.
    pub fn push_batch(&mut self, z_t: &EmbeddingMatrix) -> Result<()> {
        if z_t.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "InstanceQueue::push_batch",
                left: z_t.shape(),
                right: (self.capacity, self.dim),
            });
        }
        for i in 0..z_t.rows() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(z_t.row(i).to_vec());
        }
        Ok(())
    }

    /// Queue entries as anchor columns (D x K, oldest first).
    pub fn as_anchor_matrix(&self) -> EmbeddingMatrix {
        assert!(!self.entries.is_empty(), "empty queue has no anchor matrix");
        let k = self.entries.len();
        let mut out = EmbeddingMatrix::zeros(self.dim, k);
        for (j, e) in self.entries.iter().enumerate() {
            for (i, v) in e.iter().enumerate() {
                out.set(i, j, *v);
            }
        }
        out
    }
}

/// Logits of `z` against the anchor columns with the per-sample teacher
/// feature appended as the final column.
pub(crate) fn extended_logits(
    z: &EmbeddingMatrix,
    z_t: &EmbeddingMatrix,
    anchors: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    let base = matmul(z, anchors)?;
    let (b, k) = base.shape();
    let mut out = EmbeddingMatrix::zeros(b, k + 1);
    for i in 0..b {
        let src = base.row(i);
        let dst = out.row_mut(i);
        dst[..k].copy_from_slice(src);
        dst[k] = dot(z.row(i), z_t.row(i));
    }
    Ok(out)
}

/// Exact gradient of the eps-clamped cross entropy w.r.t. the prediction
/// logits, for a constant target: `scale/tau * (p_j * S - t_j * r_j)` with
/// `r_k = p_k/(p_k + eps)` and `S = sum_k t_k r_k`.
fn ce_pred_logit_grad(
    target: &ScoreDistribution,
    pred: &ScoreDistribution,
    tau: f64,
    scale: f64,
) -> EmbeddingMatrix {
    let (rows, cols) = pred.shape();
    let mut out = EmbeddingMatrix::zeros(rows, cols);
    for i in 0..rows {
        let t = target.row(i);
        let p = pred.row(i);
        let mut s = 0.0;
        for (tv, pv) in t.iter().zip(p.iter()) {
            s += tv * (pv / (pv + LOG_EPS));
        }
        let g = out.row_mut(i);
        for j in 0..cols {
            let r = p[j] / (p[j] + LOG_EPS);
            g[j] = scale / tau * (p[j] * s - t[j] * r);
        }
    }
    out
}

/// Gradient w.r.t. `z` rows given logit coefficients over `[anchors | z_t]`.
/// `anchor_rows` is K x D (one anchor per row); the final coefficient column,
/// when `self_teacher` is set, multiplies the per-sample teacher feature.
fn grad_z_from_coefficients(
    coef: &EmbeddingMatrix,
    anchor_rows: &EmbeddingMatrix,
    self_teacher: Option<&EmbeddingMatrix>,
) -> Result<EmbeddingMatrix> {
    let k = anchor_rows.rows();
    let b = coef.rows();
    let mut base = EmbeddingMatrix::zeros(b, k.max(1));
    for i in 0..b {
        let row = coef.row(i);
        let dst = base.row_mut(i);
        dst[..k].copy_from_slice(&row[..k]);
    }
    let mut grad = matmul(&base, anchor_rows)?;
    if let Some(z_t) = self_teacher {
        for i in 0..b {
            let c = coef.get(i, k);
            let g = grad.row_mut(i);
            for (gv, tv) in g.iter_mut().zip(z_t.row(i).iter()) {
                *gv += c * tv;
            }
        }
    }
    Ok(grad)
}

/// Projects each gradient row onto the tangent space of the unit sphere at
/// the matching embedding row: `g <- g - (g . z) z`. This is the
/// normalization Jacobian evaluated at unit-norm `z`.
fn project_rows_tangent(grad: &mut EmbeddingMatrix, z: &EmbeddingMatrix) {
    for i in 0..grad.rows() {
        let zi = z.row(i);
        let g = grad.row_mut(i);
        let gz = dot(g, zi);
        for (gv, zv) in g.iter_mut().zip(zi.iter()) {
            *gv -= gz * zv;
        }
    }
}

fn check_same_shape(op: &'static str, a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Cross entropy between teacher and student score distributions over the
/// visual bank with the sample's own teacher feature appended.
pub fn visual_alignment_loss(
    z_t: &EmbeddingMatrix,
    z_s: &EmbeddingMatrix,
    vsb: &VisualSemanticsBank,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    check_same_shape("visual_alignment_loss", z_t, z_s)?;
    if z_t.cols() != vsb.dim() {
        return Err(Error::ShapeMismatch {
            op: "visual_alignment_loss",
            left: z_t.shape(),
            right: vsb.anchors().shape(),
        });
    }
    if vsb.initialized_count() == 0 {
        return Err(Error::State(
            "visual alignment needs at least one initialized anchor".into(),
        ));
    }
    let teacher_logits = extended_logits(z_t, z_t, vsb.anchors())?;
    let student_logits = extended_logits(z_s, z_t, vsb.anchors())?;
    let s_tv = softmax_rows(&teacher_logits, cfg.tau_teacher)?;
    let s_sv = softmax_rows(&student_logits, cfg.tau_student)?;
    let total = cross_entropy_rows(&s_tv, &s_sv, cfg.reduction)?;

    let scale = cfg.batch_scale(z_t.rows());
    let coef = ce_pred_logit_grad(&s_tv, &s_sv, cfg.tau_student, scale);
    let anchor_rows = vsb.anchors().transpose();
    let mut grad = grad_z_from_coefficients(&coef, &anchor_rows, Some(z_t))?;
    project_rows_tangent(&mut grad, z_s);

    let mut components = BTreeMap::new();
    components.insert("visual".to_string(), total);
    Ok(LossOutput {
        total,
        components,
        grad_student: grad,
        grad_projection: None,
        scores: ScoreSnapshots {
            teacher_visual: Some(s_tv),
            student_visual: Some(s_sv),
            ..Default::default()
        },
    })
}

/// Cross entropy between teacher and student score distributions over the
/// fixed text anchors.
pub fn textual_alignment_loss(
    z_t: &EmbeddingMatrix,
    z_s: &EmbeddingMatrix,
    tsb: &TextualSemanticsBank,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    check_same_shape("textual_alignment_loss", z_t, z_s)?;
    if z_t.cols() != tsb.dim() {
        return Err(Error::ShapeMismatch {
            op: "textual_alignment_loss",
            left: z_t.shape(),
            right: tsb.anchors().shape(),
        });
    }
    let s_tl = softmax_rows(&matmul(z_t, tsb.anchors())?, cfg.tau_teacher)?;
    let s_sl = softmax_rows(&matmul(z_s, tsb.anchors())?, cfg.tau_student)?;
    let total = cross_entropy_rows(&s_tl, &s_sl, cfg.reduction)?;

    let scale = cfg.batch_scale(z_t.rows());
    let coef = ce_pred_logit_grad(&s_tl, &s_sl, cfg.tau_student, scale);
    let anchor_rows = tsb.anchor_rows();
    let mut grad = grad_z_from_coefficients(&coef, &anchor_rows, None)?;
    project_rows_tangent(&mut grad, z_s);

    let mut components = BTreeMap::new();
    components.insert("textual".to_string(), total);
    Ok(LossOutput {
        total,
        components,
        grad_student: grad,
        grad_projection: None,
        scores: ScoreSnapshots {
            teacher_textual: Some(s_tl),
            student_textual: Some(s_sl),
            ..Default::default()
        },
    })
}

/// Alpha-weighted combination of the visual and textual alignment losses.
pub fn lgd_loss(
    z_t: &EmbeddingMatrix,
    z_s: &EmbeddingMatrix,
    tsb: &TextualSemanticsBank,
    vsb: &VisualSemanticsBank,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if cfg.mode != LossMode::Standard {
        return Err(Error::Config(format!(
            "lgd_loss expects standard mode, got {}",
            cfg.mode.as_str()
        )));
    }
    let alpha = cfg.alpha;
    // Alpha boundaries skip the unused side entirely so pure-visual runs do
    // not require anchors of matching dimension and vice versa.
    let visual = if alpha > 0.0 {
        Some(visual_alignment_loss(z_t, z_s, vsb, cfg)?)
    } else {
        None
    };
    let textual = if alpha < 1.0 {
        Some(textual_alignment_loss(z_t, z_s, tsb, cfg)?)
    } else {
        None
    };

    let b = z_t.rows();
    let d = z_t.cols();
    let mut grad = EmbeddingMatrix::zeros(b, d);
    let mut components = BTreeMap::new();
    let mut scores = ScoreSnapshots::default();
    let mut total = 0.0;
    if let Some(v) = &visual {
        components.insert("visual".to_string(), v.total);
        total += alpha * v.total;
        for (g, vg) in grad.data_mut().iter_mut().zip(v.grad_student.data()) {
            *g += alpha * vg;
        }
        scores.teacher_visual = v.scores.teacher_visual.clone();
        scores.student_visual = v.scores.student_visual.clone();
    }
    if let Some(t) = &textual {
        components.insert("textual".to_string(), t.total);
        total += (1.0 - alpha) * t.total;
        for (g, tg) in grad.data_mut().iter_mut().zip(t.grad_student.data()) {
            *g += (1.0 - alpha) * tg;
        }
        scores.teacher_textual = t.scores.teacher_textual.clone();
        scores.student_textual = t.scores.student_textual.clone();
    }
    Ok(LossOutput {
        total,
        components,
        grad_student: grad,
        grad_projection: None,
        scores,
    })
}

/// Three cross-entropy terms, all targeted by the visual teacher
/// distribution: student-visual, teacher-textual, and student-textual
/// predictions. Textual logits run against the projected anchors with the
/// sample's own teacher feature appended, which keeps every distribution the
/// same width as the visual target. The second and third terms train the
/// projection.
pub fn generalized_lgd_loss(
    z_t: &EmbeddingMatrix,
    z_s: &EmbeddingMatrix,
    tsb: &TextualSemanticsBank,
    vsb: &VisualSemanticsBank,
    projection: Option<&ProjectionHead>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if cfg.mode != LossMode::Generalized {
        return Err(Error::Config(format!(
            "generalized_lgd_loss expects generalized mode, got {}",
            cfg.mode.as_str()
        )));
    }
    cfg.validate()?;
    check_same_shape("generalized_lgd_loss", z_t, z_s)?;
    let d = z_t.cols();
    if projection.is_none() && tsb.dim() != d {
        return Err(Error::Config(format!(
            "text anchors have dim {} but embeddings have dim {d}; a projection head is required",
            tsb.dim()
        )));
    }
    if let Some(p) = projection {
        if p.in_dim() != tsb.dim() || p.out_dim() != d {
            return Err(Error::ShapeMismatch {
                op: "generalized_lgd_loss projection",
                left: (p.out_dim(), p.in_dim()),
                right: (d, tsb.dim()),
            });
        }
    }
    if vsb.initialized_count() == 0 {
        return Err(Error::State(
            "generalized loss needs at least one initialized visual anchor".into(),
        ));
    }

    let anchor_rows = tsb.anchor_rows();
    let (projected, pre_acts) = match projection {
        Some(p) => {
            let (a, pre) = p.forward_rows(&anchor_rows)?;
            (a, Some(pre))
        }
        None => (anchor_rows.clone(), None),
    };
    let projected_cols = projected.transpose();

    let s_tv = softmax_rows(
        &extended_logits(z_t, z_t, vsb.anchors())?,
        cfg.tau_teacher,
    )?;
    let s_sv = softmax_rows(
        &extended_logits(z_s, z_t, vsb.anchors())?,
        cfg.tau_student,
    )?;
    let s_tl = softmax_rows(&extended_logits(z_t, z_t, &projected_cols)?, cfg.tau_teacher)?;
    let s_sl = softmax_rows(&extended_logits(z_s, z_t, &projected_cols)?, cfg.tau_student)?;

    let t1 = cross_entropy_rows(&s_tv, &s_sv, cfg.reduction)?;
    let t2 = cross_entropy_rows(&s_tv, &s_tl, cfg.reduction)?;
    let t3 = cross_entropy_rows(&s_tv, &s_sl, cfg.reduction)?;
    let alpha = cfg.alpha;
    let total = alpha * t1 + alpha * t2 + alpha * t3;

    let scale = cfg.batch_scale(z_t.rows());

    // Student gradient: term 1 over the visual anchors, term 3 over the
    // projected anchors (including the appended teacher column).
    let coef1 = ce_pred_logit_grad(&s_tv, &s_sv, cfg.tau_student, scale);
    let vsb_rows = vsb.anchors().transpose();
    let g1 = grad_z_from_coefficients(&coef1, &vsb_rows, Some(z_t))?;
    let coef3 = ce_pred_logit_grad(&s_tv, &s_sl, cfg.tau_student, scale);
    let g3 = grad_z_from_coefficients(&coef3, &projected, Some(z_t))?;
    let mut grad = EmbeddingMatrix::zeros(z_s.rows(), d);
    for ((g, a), b) in grad.data_mut().iter_mut().zip(g1.data()).zip(g3.data()) {
        *g = alpha * (a + b);
    }
    project_rows_tangent(&mut grad, z_s);

    // Projection gradient: terms 2 and 3 reach the projected anchors; the
    // appended teacher column is constant w.r.t. the projection.
    let grad_projection = match projection {
        Some(p) => {
            let c = tsb.num_categories();
            let b = z_t.rows();
            let coef2 = ce_pred_logit_grad(&s_tv, &s_tl, cfg.tau_teacher, scale);
            let mut coef2_cols = EmbeddingMatrix::zeros(b, c);
            let mut coef3_cols = EmbeddingMatrix::zeros(b, c);
            for i in 0..b {
                coef2_cols.row_mut(i).copy_from_slice(&coef2.row(i)[..c]);
                coef3_cols.row_mut(i).copy_from_slice(&coef3.row(i)[..c]);
            }
            let ga2 = matmul(&coef2_cols.transpose(), z_t)?;
            let ga3 = matmul(&coef3_cols.transpose(), z_s)?;
            let mut grad_anchors = EmbeddingMatrix::zeros(c, d);
            for ((g, a), bb) in grad_anchors
                .data_mut()
                .iter_mut()
                .zip(ga2.data())
                .zip(ga3.data())
            {
                *g = alpha * (a + bb);
            }
            Some(p.backward_rows(&anchor_rows, pre_acts.as_ref().unwrap(), &grad_anchors)?)
        }
        None => None,
    };

    let mut components = BTreeMap::new();
    components.insert("visual".to_string(), t1);
    components.insert("textual_teacher".to_string(), t2);
    components.insert("textual_student".to_string(), t3);
    Ok(LossOutput {
        total,
        components,
        grad_student: grad,
        grad_projection,
        scores: ScoreSnapshots {
            teacher_visual: Some(s_tv),
            student_visual: Some(s_sv),
            teacher_textual: Some(s_tl),
            student_textual: Some(s_sl),
        },
    })
}

/// Queue-based baseline: the student mimics the teacher's score distribution
/// over past teacher instances plus the sample's own teacher feature.
pub fn seed_baseline_loss(
    z_t: &EmbeddingMatrix,
    z_s: &EmbeddingMatrix,
    queue: &InstanceQueue,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    check_same_shape("seed_baseline_loss", z_t, z_s)?;
    if queue.is_empty() {
        return Err(Error::State("instance queue is empty".into()));
    }
    if z_t.cols() != queue.dim() {
        return Err(Error::ShapeMismatch {
            op: "seed_baseline_loss",
            left: z_t.shape(),
            right: (queue.dim(), queue.len()),
        });
    }
    let anchors = queue.as_anchor_matrix();
    let s_t = softmax_rows(&extended_logits(z_t, z_t, &anchors)?, cfg.tau_teacher)?;
    let s_s = softmax_rows(&extended_logits(z_s, z_t, &anchors)?, cfg.tau_student)?;
    let total = cross_entropy_rows(&s_t, &s_s, cfg.reduction)?;

    let scale = cfg.batch_scale(z_t.rows());
    let coef = ce_pred_logit_grad(&s_t, &s_s, cfg.tau_student, scale);
    let anchor_rows = anchors.transpose();
    let mut grad = grad_z_from_coefficients(&coef, &anchor_rows, Some(z_t))?;
    project_rows_tangent(&mut grad, z_s);

    let mut components = BTreeMap::new();
    components.insert("seed".to_string(), total);
    Ok(LossOutput {
        total,
        components,
        grad_student: grad,
        grad_projection: None,
        scores: ScoreSnapshots {
            teacher_visual: Some(s_t),
            student_visual: Some(s_s),
            ..Default::default()
        },
    })
}

/// Textual alignment with a learnable projection and no visual anchor: the
/// failure-mode foil for the generalized loss. The target distribution
/// depends on the projection, and the gradient follows that dependence (both
/// the target and prediction paths), which is exactly the naive objective a
/// dimension-mismatch retrofit would minimize. Teacher embeddings stay
/// frozen.
pub fn naive_projected_textual_loss(
    z_t: &EmbeddingMatrix,
    z_s: &EmbeddingMatrix,
    tsb: &TextualSemanticsBank,
    projection: Option<&ProjectionHead>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    check_same_shape("naive_projected_textual_loss", z_t, z_s)?;
    let d = z_t.cols();
    if projection.is_none() && tsb.dim() != d {
        return Err(Error::Config(format!(
            "text anchors have dim {} but embeddings have dim {d}; a projection head is required",
            tsb.dim()
        )));
    }
    let anchor_rows = tsb.anchor_rows();
    let (projected, pre_acts) = match projection {
        Some(p) => {
            let (a, pre) = p.forward_rows(&anchor_rows)?;
            (a, Some(pre))
        }
        None => (anchor_rows.clone(), None),
    };
    let projected_cols = projected.transpose();

    let s_tl = softmax_rows(&matmul(z_t, &projected_cols)?, cfg.tau_teacher)?;
    let s_sl = softmax_rows(&matmul(z_s, &projected_cols)?, cfg.tau_student)?;
    let total = cross_entropy_rows(&s_tl, &s_sl, cfg.reduction)?;

    let b = z_t.rows();
    let c = tsb.num_categories();
    let scale = cfg.batch_scale(b);

    // Prediction path.
    let coef_s = ce_pred_logit_grad(&s_tl, &s_sl, cfg.tau_student, scale);
    let mut grad = grad_z_from_coefficients(&coef_s, &projected, None)?;
    project_rows_tangent(&mut grad, z_s);

    let grad_projection = match projection {
        Some(p) => {
            // Target path: dCE/dt_k = -ln(p_k + eps), chained through the
            // teacher-side softmax.
            let mut coef_t = EmbeddingMatrix::zeros(b, c);
            for i in 0..b {
                let t = s_tl.row(i);
                let pr = s_sl.row(i);
                let mut u_dot_t = 0.0;
                let u: Vec<f64> = pr.iter().map(|pv| -scale * (pv + LOG_EPS).ln()).collect();
                for (tv, uv) in t.iter().zip(u.iter()) {
                    u_dot_t += tv * uv;
                }
                let row = coef_t.row_mut(i);
                for k in 0..c {
                    row[k] = t[k] * (u[k] - u_dot_t) / cfg.tau_teacher;
                }
            }
            let ga_target = matmul(&coef_t.transpose(), z_t)?;
            let ga_pred = matmul(&coef_s.transpose(), z_s)?;
            let mut grad_anchors = EmbeddingMatrix::zeros(c, d);
            for ((g, a), bb) in grad_anchors
                .data_mut()
                .iter_mut()
                .zip(ga_target.data())
                .zip(ga_pred.data())
            {
                *g = a + bb;
            }
            Some(p.backward_rows(&anchor_rows, pre_acts.as_ref().unwrap(), &grad_anchors)?)
        }
        None => None,
    };

    let mut components = BTreeMap::new();
    components.insert("textual_naive".to_string(), total);
    Ok(LossOutput {
        total,
        components,
        grad_student: grad,
        grad_projection,
        scores: ScoreSnapshots {
            teacher_textual: Some(s_tl),
            student_textual: Some(s_sl),
            ..Default::default()
        },
    })
}
