//! Evaluation: zero-shot classification against the text bank, linear
//! probing of frozen embeddings, alignment diagnostics, and the paired
//! text-control and collapse experiments.

mod experiments;
mod probe;

pub use experiments::{
    ablation_paired_stats, collapse_experiment, run_arm_grid, run_suite_arm,
    suite_base_settings, text_control_experiment, ArmRun, CollapseArmStats, CollapseRecord,
    MismatchArm, PairedStats, SuiteArm, SuiteCell, TextControlRecord,
};
pub use probe::{linear_probe, ProbeConfig};

use crate::banks::{classify_by_tsb, TextualSemanticsBank, VisualSemanticsBank};
use crate::error::{Error, Result};
use crate::losses::{extended_logits, LossConfig};
use crate::numerics::{
    argmax_rows, dot, kl_rows, matmul, softmax_rows, EmbeddingMatrix,
};
use crate::rng::{stream_rng, StreamId};
use crate::student::{ProjectionHead, StudentNet};
use crate::synthworld::SyntheticWorld;

/// Held-out samples with evaluation-only labels.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub inputs: EmbeddingMatrix,
    pub teacher: EmbeddingMatrix,
    pub labels: Vec<usize>,
}

impl EvalSplit {
    /// Deterministic split drawn from the world's evaluation stream.
    pub fn from_world(world: &SyntheticWorld, samples: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, StreamId::EvalSplit);
        let batch = world.sample_batch(samples, &mut rng);
        Self {
            inputs: batch.inputs,
            teacher: batch.teacher_embeddings,
            labels: batch.labels,
        }
    }

    /// Deterministic split restricted to a category subset; labels index
    /// into the subset.
    pub fn from_world_categories(
        world: &SyntheticWorld,
        samples: usize,
        seed: u64,
        categories: &[usize],
    ) -> Self {
        let mut rng = stream_rng(seed, StreamId::EvalSplit);
        let batch = world.sample_batch_from(samples, &mut rng, categories);
        Self {
            inputs: batch.inputs,
            teacher: batch.teacher_embeddings,
            labels: batch.labels,
        }
    }
}

/// Which encoder produces the embeddings under evaluation.
#[derive(Clone, Copy)]
pub enum EncoderRef<'a> {
    Student(&'a StudentNet),
    /// Use the split's stored teacher embeddings directly.
    Teacher,
}

/// Embeds the split's inputs with the chosen encoder.
pub fn embed(encoder: EncoderRef<'_>, split: &EvalSplit) -> Result<EmbeddingMatrix> {
    match encoder {
        EncoderRef::Student(net) => Ok(net.forward(&split.inputs)?.0),
        EncoderRef::Teacher => Ok(split.teacher.clone()),
    }
}

/// Zero-shot result: overall accuracy plus per-class accuracy (None for
/// classes absent from the split).
#[derive(Debug, Clone)]
pub struct ZeroshotReport {
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
}

/// Classifies embeddings into the most similar text anchor and scores
/// against the held-out labels. A projection is required when anchor and
/// embedding dimensions differ; classification then uses raw dot products
/// with the projected anchors.
pub fn zeroshot_eval(
    encoder: EncoderRef<'_>,
    split: &EvalSplit,
    tsb: &TextualSemanticsBank,
    projection: Option<&ProjectionHead>,
) -> Result<ZeroshotReport> {
    let z = embed(encoder, split)?;
    if split.labels.len() != z.rows() {
        return Err(Error::CountMismatch {
            what: "label",
            left: split.labels.len(),
            right: z.rows(),
        });
    }
    let c = tsb.num_categories();
    let pred = if tsb.dim() == z.cols() {
        classify_by_tsb(&z, tsb)?
    } else {
        let proj = projection.ok_or_else(|| {
            Error::Config("dimension-mismatched anchors need a projection head".into())
        })?;
        let (projected, _) = proj.forward_rows(&tsb.anchor_rows())?;
        argmax_rows(&matmul(&z, &projected.transpose())?)
    };
    let mut correct = vec![0usize; c];
    let mut seen = vec![0usize; c];
    let mut total_correct = 0usize;
    for (p, &l) in pred.iter().zip(split.labels.iter()) {
        if l >= c {
            return Err(Error::AssignmentOutOfRange {
                index: 0,
                value: l,
                categories: c,
            });
        }
        seen[l] += 1;
        if *p == l {
            correct[l] += 1;
            total_correct += 1;
        }
    }
    let per_class = (0..c)
        .map(|k| (seen[k] > 0).then(|| correct[k] as f64 / seen[k] as f64))
        .collect();
    Ok(ZeroshotReport {
        accuracy: total_correct as f64 / split.labels.len() as f64,
        per_class,
    })
}

/// Mean signed pairwise cosine between anchor rows. Near-zero rows fall back
/// to cosine 0 for the pair (the norm statistic catches that regime).
pub fn mean_pairwise_cosine(rows: &EmbeddingMatrix) -> f64 {
    let n = rows.rows();
    if n < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let ni = rows.row_norm(i);
            let nj = rows.row_norm(j);
            if ni > 1e-12 && nj > 1e-12 {
                sum += dot(rows.row(i), rows.row(j)) / (ni * nj);
            }
            pairs += 1;
        }
    }
    sum / pairs as f64
}

/// Mean Euclidean norm of anchor rows.
pub fn mean_row_norm(rows: &EmbeddingMatrix) -> f64 {
    (0..rows.rows()).map(|i| rows.row_norm(i)).sum::<f64>() / rows.rows() as f64
}

/// Scalar summaries of how well the student's score distributions track the
/// teacher's, in both anchor spaces.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AlignmentDiagnostics {
    /// Mean per-sample KL(teacher || student) over the text anchors.
    pub mean_kl_textual: f64,
    /// Mean per-sample KL(teacher || student) over the visual bank with the
    /// appended teacher column.
    pub mean_kl_visual: f64,
    /// Mean pairwise cosine of the effective textual anchors (projected when
    /// a projection is in play).
    pub anchor_separation: f64,
}

/// Computes the alignment diagnostics for paired teacher/student embeddings
/// of the same inputs.
pub fn alignment_diagnostics(
    z_t: &EmbeddingMatrix,
    z_s: &EmbeddingMatrix,
    tsb: &TextualSemanticsBank,
    vsb: &VisualSemanticsBank,
    projection: Option<&ProjectionHead>,
    cfg: &LossConfig,
) -> Result<AlignmentDiagnostics> {
    if z_t.shape() != z_s.shape() {
        return Err(Error::ShapeMismatch {
            op: "alignment_diagnostics",
            left: z_t.shape(),
            right: z_s.shape(),
        });
    }
    let b = z_t.rows() as f64;
    let anchors_rows = match projection {
        Some(p) => p.forward_rows(&tsb.anchor_rows())?.0,
        None => tsb.anchor_rows(),
    };
    if anchors_rows.cols() != z_t.cols() {
        return Err(Error::ShapeMismatch {
            op: "alignment_diagnostics",
            left: z_t.shape(),
            right: anchors_rows.shape(),
        });
    }
    let anchor_cols = anchors_rows.transpose();
    let s_tl = softmax_rows(&matmul(z_t, &anchor_cols)?, cfg.tau_teacher)?;
    let s_sl = softmax_rows(&matmul(z_s, &anchor_cols)?, cfg.tau_student)?;
    let mean_kl_textual = kl_rows(&s_tl, &s_sl)? / b;

    let s_tv = softmax_rows(&extended_logits(z_t, z_t, vsb.anchors())?, cfg.tau_teacher)?;
    let s_sv = softmax_rows(&extended_logits(z_s, z_t, vsb.anchors())?, cfg.tau_student)?;
    let mean_kl_visual = kl_rows(&s_tv, &s_sv)? / b;

    Ok(AlignmentDiagnostics {
        mean_kl_textual,
        mean_kl_visual,
        anchor_separation: mean_pairwise_cosine(&anchors_rows),
    })
}

/// Full evaluation report, serialized as JSON by the CLI.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub zeroshot_accuracy: f64,
    pub linear_probe_accuracy: Option<f64>,
    pub mean_kl_teacher_student_textual: f64,
    pub mean_kl_teacher_student_visual: f64,
    pub anchor_separation: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
}
