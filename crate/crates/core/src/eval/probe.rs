//! Linear probe: multinomial logistic regression trained by full-batch
//! gradient descent on frozen embeddings.

use rand::seq::SliceRandom;

use super::{embed, EncoderRef, EvalSplit};
use crate::error::{Error, Result};
use crate::numerics::{argmax_rows, matmul, softmax_rows, EmbeddingMatrix, LOG_EPS};
use crate::rng::{stream_rng, StreamId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop when the loss change per iteration falls below this.
    pub tol: f64,
    /// Fraction of the train split used (semi-supervised protocol).
    pub label_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            max_iters: 10_000,
            tol: 1e-8,
            label_fraction: 1.0,
            seed: 0,
        }
    }
}

fn mean_ce_and_grads(
    x: &EmbeddingMatrix,
    labels: &[usize],
    w: &EmbeddingMatrix,
    b: &[f64],
) -> Result<(f64, EmbeddingMatrix, Vec<f64>)> {
    let n = x.rows();
    let c = w.rows();
    let mut logits = matmul(x, &w.transpose())?;
    for i in 0..n {
        for (v, bias) in logits.row_mut(i).iter_mut().zip(b.iter()) {
            *v += bias;
        }
    }
    let probs = softmax_rows(&logits, 1.0)?;
    let mut loss = 0.0;
    let mut delta = EmbeddingMatrix::zeros(n, c);
    for i in 0..n {
        let p = probs.row(i);
        loss -= (p[labels[i]] + LOG_EPS).ln();
        let row = delta.row_mut(i);
        row.copy_from_slice(p);
        row[labels[i]] -= 1.0;
    }
    loss /= n as f64;
    let mut grad_w = matmul(&delta.transpose(), x)?;
    grad_w.scale(1.0 / n as f64);
    let mut grad_b = vec![0.0; c];
    for i in 0..n {
        for (g, d) in grad_b.iter_mut().zip(delta.row(i).iter()) {
            *g += d / n as f64;
        }
    }
    Ok((loss, grad_w, grad_b))
}

/// Trains the probe on the (optionally label-subsampled) train split and
/// returns test accuracy. The encoder stays frozen; with an orthogonal
/// rotation applied jointly to train and test embeddings the optimum, and
/// hence the accuracy, is unchanged.
pub fn linear_probe(
    encoder: EncoderRef<'_>,
    train_split: &EvalSplit,
    test_split: &EvalSplit,
    cfg: &ProbeConfig,
) -> Result<f64> {
    if !(cfg.label_fraction > 0.0 && cfg.label_fraction <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "label_fraction",
            message: format!("must lie in (0, 1], got {}", cfg.label_fraction),
        });
    }
    let x_train_full = embed(encoder, train_split)?;
    let x_test = embed(encoder, test_split)?;

    // Label-fraction subsampling, seeded.
    let n_full = x_train_full.rows();
    let keep = ((n_full as f64 * cfg.label_fraction).ceil() as usize).clamp(1, n_full);
    let mut indices: Vec<usize> = (0..n_full).collect();
    if keep < n_full {
        let mut rng = stream_rng(cfg.seed, StreamId::Probe);
        indices.shuffle(&mut rng);
        indices.truncate(keep);
        indices.sort_unstable();
    }
    let mut x_train = EmbeddingMatrix::zeros(keep, x_train_full.cols());
    let mut y_train = Vec::with_capacity(keep);
    for (row, &idx) in indices.iter().enumerate() {
        x_train.row_mut(row).copy_from_slice(x_train_full.row(idx));
        y_train.push(train_split.labels[idx]);
    }

    let classes = y_train
        .iter()
        .chain(test_split.labels.iter())
        .max()
        .map(|m| m + 1)
        .unwrap_or(0);
    let distinct_train: std::collections::HashSet<usize> = y_train.iter().copied().collect();
    if distinct_train.len() < 2 {
        return Err(Error::Eval(format!(
            "probe train split holds {} distinct class(es); need at least 2",
            distinct_train.len()
        )));
    }

    let d = x_train.cols();
    let mut w = EmbeddingMatrix::zeros(classes, d);
    let mut b = vec![0.0; classes];
    let mut prev_loss = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let (loss, grad_w, grad_b) = mean_ce_and_grads(&x_train, &y_train, &w, &b)?;
        for (p, g) in w.data_mut().iter_mut().zip(grad_w.data().iter()) {
            *p -= cfg.learning_rate * g;
        }
        for (p, g) in b.iter_mut().zip(grad_b.iter()) {
            *p -= cfg.learning_rate * g;
        }
        if (prev_loss - loss).abs() < cfg.tol {
            break;
        }
        prev_loss = loss;
    }

    let mut logits = matmul(&x_test, &w.transpose())?;
    for i in 0..logits.rows() {
        for (v, bias) in logits.row_mut(i).iter_mut().zip(b.iter()) {
            *v += bias;
        }
    }
    let pred = argmax_rows(&logits);
    let correct = pred
        .iter()
        .zip(test_split.labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / test_split.labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, l2_normalize_rows};
    use crate::rng::{fill_normal, normal};
    use crate::synthworld::{gen_world, WorldParams};

    fn split_from(x: EmbeddingMatrix, labels: Vec<usize>) -> EvalSplit {
        EvalSplit {
            inputs: x.clone(),
            teacher: x,
            labels,
        }
    }

    #[test]
    fn separable_two_class_embeddings_reach_full_accuracy() {
        let mut rng = stream_rng(1, StreamId::Probe);
        let n = 40;
        let mut x = EmbeddingMatrix::zeros(n, 3);
        let mut labels = Vec::new();
        for i in 0..n {
            let class = i % 2;
            let center = if class == 0 { 1.0 } else { -1.0 };
            let row = x.row_mut(i);
            fill_normal(&mut rng, row, 0.2);
            row[0] += center;
            labels.push(class);
        }
        let split = split_from(x, labels);
        let acc = linear_probe(
            EncoderRef::Teacher,
            &split,
            &split,
            &ProbeConfig::default(),
        )
        .unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn probe_on_noiseless_teacher_embeddings_is_perfect() {
        let mut p = WorldParams::desk(4, 3);
        p.sample_noise_sigma = 0.0;
        let world = gen_world(p).unwrap();
        let train = super::super::EvalSplit::from_world(&world, 200, 3);
        let test = super::super::EvalSplit::from_world(&world, 200, 4);
        let acc = linear_probe(
            EncoderRef::Teacher,
            &train,
            &test,
            &ProbeConfig::default(),
        )
        .unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn single_class_train_split_is_rejected() {
        let x = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1]]).unwrap();
        let split = split_from(x, vec![0, 0]);
        let err = linear_probe(
            EncoderRef::Teacher,
            &split,
            &split,
            &ProbeConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Eval(_)), "{err}");
    }

    #[test]
    fn probe_is_invariant_to_joint_orthogonal_rotation() {
        let world = gen_world(WorldParams::desk(3, 7)).unwrap();
        let train = super::super::EvalSplit::from_world(&world, 150, 7);
        let test = super::super::EvalSplit::from_world(&world, 150, 8);
        let cfg = ProbeConfig::default();
        let base = linear_probe(EncoderRef::Teacher, &train, &test, &cfg).unwrap();

        // Random orthogonal matrix via Gram-Schmidt on gaussian columns.
        let d = world.embed_dim();
        let mut rng = stream_rng(9, StreamId::Probe);
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            for u in &q {
                let p = dot(&v, u);
                for (vi, ui) in v.iter_mut().zip(u.iter()) {
                    *vi -= p * ui;
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-6 {
                for vi in v.iter_mut() {
                    *vi /= norm;
                }
                q.push(v);
            }
        }
        let q = EmbeddingMatrix::from_rows(&q).unwrap();
        let rotate = |s: &EvalSplit| -> EvalSplit {
            let rotated = matmul(&s.teacher, &q).unwrap();
            let (rotated, _) = l2_normalize_rows(&rotated);
            EvalSplit {
                inputs: s.inputs.clone(),
                teacher: rotated,
                labels: s.labels.clone(),
            }
        };
        let rotated =
            linear_probe(EncoderRef::Teacher, &rotate(&train), &rotate(&test), &cfg).unwrap();
        assert!(
            (base - rotated).abs() <= 0.02,
            "rotation changed probe accuracy: {base} vs {rotated}"
        );
    }

    #[test]
    fn label_fraction_subsamples_but_still_learns() {
        let mut p = WorldParams::desk(4, 11);
        p.sample_noise_sigma = 0.05;
        let world = gen_world(p).unwrap();
        let train = super::super::EvalSplit::from_world(&world, 400, 11);
        let test = super::super::EvalSplit::from_world(&world, 200, 12);
        let cfg = ProbeConfig {
            label_fraction: 0.1,
            ..ProbeConfig::default()
        };
        let acc = linear_probe(EncoderRef::Teacher, &train, &test, &cfg).unwrap();
        assert!(acc > 0.9, "10% labels on an easy world should still probe well, got {acc}");
    }
}
