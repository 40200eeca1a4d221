//! Central-finite-difference utilities for verifying analytic gradients,
//! plus a randomized battery covering every loss mode end to end (loss ->
//! normalization -> MLP parameters, and the projection head where one
//! exists).
//!
//! The numeric side only ever evaluates the loss value, so it stays
//! independent of the gradient code it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::banks::{batch_centroids, TextualSemanticsBank, VisualSemanticsBank};
use crate::error::Result;
use crate::losses::{
    generalized_lgd_loss, lgd_loss, naive_projected_textual_loss, seed_baseline_loss,
    InstanceQueue, LossConfig,
};
use crate::numerics::{l2_normalize_rows, EmbeddingMatrix};
use crate::rng::{normal, stream_rng, StreamId};
use crate::student::{ProjectionHead, StudentNet};

/// Central differences of `f` at `point`: `(f(x+h e_k) - f(x-h e_k)) / 2h`
/// for every coordinate.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for k in 0..point.len() {
        x[k] = point[k] + step;
        let up = f(&x);
        x[k] = point[k] - step;
        let down = f(&x);
        x[k] = point[k];
        grads.push((up - down) / (2.0 * step));
    }
    grads
}

/// Worst relative disagreement between two gradient vectors, with a floor on
/// the denominator so near-zero components compare on an absolute scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Which objective the battery exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatteryMode {
    Standard,
    Generalized,
    BaselineSeed,
    NaiveTextual,
}

impl BatteryMode {
    pub fn name(&self) -> &'static str {
        match self {
            BatteryMode::Standard => "standard",
            BatteryMode::Generalized => "generalized",
            BatteryMode::BaselineSeed => "baseline_seed",
            BatteryMode::NaiveTextual => "naive_textual",
        }
    }
}

/// Worst-case relative errors over a battery run.
#[derive(Debug, Clone, Copy)]
pub struct BatteryOutcome {
    pub instances: usize,
    /// Worst disagreement over all student parameters.
    pub worst_student_rel_error: f64,
    /// Worst disagreement over all projection parameters (0 when the mode
    /// has no projection).
    pub worst_projection_rel_error: f64,
    /// Worst disagreement of the loss gradient w.r.t. the (pre-normalization)
    /// student embeddings.
    pub worst_embedding_rel_error: f64,
}

/// Relative-error denominators are floored here; below this scale the
/// comparison is absolute (finite differences bottom out near 1e-10).
pub const GRAD_REL_FLOOR: f64 = 1e-3;

const FD_STEP: f64 = 1e-6;

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
    loop {
        let data = (0..rows * cols).map(|_| normal(rng)).collect();
        let raw = EmbeddingMatrix::new(rows, cols, data).unwrap();
        let (m, flags) = l2_normalize_rows(&raw);
        if flags.iter().all(|f| !f) {
            return m;
        }
    }
}

fn initialized_vsb(c: usize, d: usize, rng: &mut ChaCha8Rng) -> VisualSemanticsBank {
    let mut vsb = VisualSemanticsBank::new(d, c, 0.999).unwrap();
    let z = unit_rows(c, d, rng);
    let assignments: Vec<usize> = (0..c).collect();
    let agg = batch_centroids(&z, &assignments, c).unwrap();
    vsb.momentum_update(&agg).unwrap();
    vsb
}

struct Instance {
    mode: BatteryMode,
    z_t: EmbeddingMatrix,
    inputs: EmbeddingMatrix,
    student: StudentNet,
    tsb: TextualSemanticsBank,
    vsb: VisualSemanticsBank,
    projection: Option<ProjectionHead>,
    queue: Option<InstanceQueue>,
    cfg: LossConfig,
}

impl Instance {
    fn loss_total(&self, student: &StudentNet, projection: Option<&ProjectionHead>) -> f64 {
        let (z_s, _) = student.forward(&self.inputs).unwrap();
        self.loss_for(&z_s, projection).0
    }

    fn loss_for(
        &self,
        z_s: &EmbeddingMatrix,
        projection: Option<&ProjectionHead>,
    ) -> (f64, crate::losses::LossOutput) {
        let out = match self.mode {
            BatteryMode::Standard => {
                lgd_loss(&self.z_t, z_s, &self.tsb, &self.vsb, &self.cfg).unwrap()
            }
            BatteryMode::Generalized => generalized_lgd_loss(
                &self.z_t,
                z_s,
                &self.tsb,
                &self.vsb,
                projection,
                &self.cfg,
            )
            .unwrap(),
            BatteryMode::BaselineSeed => {
                seed_baseline_loss(&self.z_t, z_s, self.queue.as_ref().unwrap(), &self.cfg)
                    .unwrap()
            }
            BatteryMode::NaiveTextual => {
                naive_projected_textual_loss(&self.z_t, z_s, &self.tsb, projection, &self.cfg)
                    .unwrap()
            }
        };
        (out.total, out)
    }

}

/// Draws one random instance. Rectifier pre-activations too close to zero
/// would poison the finite differences, so degenerate draws are re-sampled.
fn random_instance(mode: BatteryMode, rng: &mut ChaCha8Rng) -> Instance {
    loop {
        let b = rng.gen_range(2..=8);
        let c = rng.gen_range(2..=6);
        let d = rng.gen_range(4..=16);
        let d_in = rng.gen_range(4..=8);
        let hidden = rng.gen_range(4..=8);
        let tau_t = rng.gen_range(0.1..=0.5);
        let tau_s = rng.gen_range(0.1..=0.5);
        let text_dim = match mode {
            BatteryMode::Generalized | BatteryMode::NaiveTextual => d + rng.gen_range(2..=8),
            _ => d,
        };

        let z_t = unit_rows(b, d, rng);
        let anchors = unit_rows(c, text_dim, rng);
        let names = (0..c).map(|i| format!("cat_{i}")).collect();
        let tsb = TextualSemanticsBank::from_anchor_rows(&anchors, names, "battery").unwrap();
        let vsb = initialized_vsb(c, d, rng);
        let student = StudentNet::new_random(d_in, &[hidden], d, rng).unwrap();
        let inputs = {
            let data = (0..b * d_in).map(|_| normal(rng)).collect();
            EmbeddingMatrix::new(b, d_in, data).unwrap()
        };
        let projection = match mode {
            BatteryMode::Generalized | BatteryMode::NaiveTextual => {
                Some(ProjectionHead::new_random(text_dim, &[], d, rng).unwrap())
            }
            _ => None,
        };
        let queue = match mode {
            BatteryMode::BaselineSeed => {
                let k = rng.gen_range(3..=8);
                let mut q = InstanceQueue::new(k, d).unwrap();
                q.push_batch(&unit_rows(k, d, rng)).unwrap();
                Some(q)
            }
            _ => None,
        };
        let cfg = match mode {
            BatteryMode::Standard => LossConfig {
                alpha: rng.gen_range(0.1..=0.9),
                ..LossConfig::standard(tau_t, tau_s)
            },
            BatteryMode::Generalized => LossConfig::generalized(tau_t, tau_s),
            BatteryMode::BaselineSeed => LossConfig::baseline_seed(tau_t, tau_s),
            BatteryMode::NaiveTextual => LossConfig::standard(tau_t, tau_s),
        };

        let inst = Instance {
            mode,
            z_t,
            inputs,
            student,
            tsb,
            vsb,
            projection,
            queue,
            cfg,
        };
        // Differentiability guard: FD steps of 1e-6 must not cross a
        // rectifier boundary, and no output row may sit near the
        // normalization singularity at zero (a sample with every hidden unit
        // dead produces exactly that).
        let pre_ok = {
            let pre = crate::student::affine_forward(inst.student.layers(), &inst.inputs).unwrap();
            let hidden_clear = pre[..pre.len() - 1]
                .iter()
                .all(|m| m.data().iter().all(|v| v.abs() > 1e-4));
            let last = pre.last().unwrap();
            let rows_clear = (0..last.rows()).all(|i| last.row_norm(i) > 1e-2);
            hidden_clear && rows_clear
        };
        if pre_ok {
            return inst;
        }
    }
}

/// Runs `instances` random finite-difference checks for one mode and returns
/// the worst relative errors seen. Gradients are checked at three levels:
/// the loss's own embedding gradient (through the normalization Jacobian),
/// every student parameter through the full forward/backward, and every
/// projection parameter where the mode has one.
pub fn loss_gradient_battery(
    mode: BatteryMode,
    instances: usize,
    seed: u64,
) -> Result<BatteryOutcome> {
    let mut rng = stream_rng(seed, StreamId::Probe);
    let mut worst_student = 0.0_f64;
    let mut worst_projection = 0.0_f64;
    let mut worst_embedding = 0.0_f64;

    for _ in 0..instances {
        let inst = random_instance(mode, &mut rng);
        let (z_s, cache) = inst.student.forward(&inst.inputs).unwrap();
        let (_, out) = inst.loss_for(&z_s, inst.projection.as_ref());

        // Embedding-level check: the loss gradient includes the unit-sphere
        // tangent projection, so the numeric side normalizes its input.
        {
            let base: Vec<f64> = z_s.data().to_vec();
            let (b, d) = z_s.shape();
            let f = |v: &[f64]| {
                let m = EmbeddingMatrix::new(b, d, v.to_vec()).unwrap();
                let (normed, _) = l2_normalize_rows(&m);
                inst.loss_for(&normed, inst.projection.as_ref()).0
            };
            let numeric = central_difference(f, &base, FD_STEP);
            let err = max_relative_error(out.grad_student.data(), &numeric, GRAD_REL_FLOOR);
            worst_embedding = worst_embedding.max(err);
        }

        // Student parameters through the full pipeline.
        {
            let analytic = inst.student.backward(&cache, &out.grad_student)?.flatten();
            let params = inst.student.flatten_params();
            let f = |p: &[f64]| {
                let mut net = inst.student.clone();
                net.load_flat(p).unwrap();
                inst.loss_total(&net, inst.projection.as_ref())
            };
            let numeric = central_difference(f, &params, FD_STEP);
            let err = max_relative_error(&analytic, &numeric, GRAD_REL_FLOOR);
            worst_student = worst_student.max(err);
        }

        // Projection parameters, when the mode trains one.
        if let (Some(proj), Some(grad)) = (inst.projection.as_ref(), out.grad_projection.as_ref())
        {
            let analytic = grad.flatten();
            let params = proj.flatten_params();
            let f = |p: &[f64]| {
                let mut head = proj.clone();
                head.load_flat(p).unwrap();
                inst.loss_total(&inst.student, Some(&head))
            };
            let numeric = central_difference(f, &params, FD_STEP);
            let err = max_relative_error(&analytic, &numeric, GRAD_REL_FLOOR);
            worst_projection = worst_projection.max(err);
        }
    }

    Ok(BatteryOutcome {
        instances,
        worst_student_rel_error: worst_student,
        worst_projection_rel_error: worst_projection,
        worst_embedding_rel_error: worst_embedding,
    })
}
