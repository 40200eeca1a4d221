//! End-to-end training behavior: loss trends on a separable world, batch
//! permutation symmetry, full determinism, and the baseline/visual
//! equivalence oracle on bank-backed queues.

use lgd_core::banks::{batch_centroids, classify_by_tsb, VisualSemanticsBank};
use lgd_core::losses::{
    lgd_loss, seed_baseline_loss, visual_alignment_loss, InstanceQueue, LossConfig,
};
use lgd_core::numerics::{l2_normalize_rows, EmbeddingMatrix};
use lgd_core::rng::{normal, stream_rng, StreamId};
use lgd_core::student::train::{
    train_distillation, NoHooks, TrainSettings, WorldBatchProvider,
};
use lgd_core::student::{sgd_step, OptimizerState, StudentNet};
use lgd_core::synthworld::{gen_world, WorldParams};

fn unit_rows(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
    let mut rng = stream_rng(seed, StreamId::EvalSplit);
    let data = (0..rows * cols).map(|_| normal(&mut rng)).collect();
    l2_normalize_rows(&EmbeddingMatrix::new(rows, cols, data).unwrap()).0
}

#[test]
fn loss_trends_down_over_first_fifty_steps() {
    let mut params = WorldParams::desk(4, 42);
    params.sample_noise_sigma = 0.05;
    let world = gen_world(params).unwrap();
    let tsb = world.gen_text_anchors(None).unwrap();
    let mut settings = TrainSettings::desk(42, LossConfig::standard(0.04, 0.1));
    settings.epochs = 2;
    settings.steps_per_epoch = 30;
    settings.warmup_epochs = 1;
    let mut provider = WorldBatchProvider::new(world, 42);
    let arts = train_distillation(&settings, &mut provider, &tsb, &mut NoHooks).unwrap();
    let losses: Vec<f64> = arts.step_metrics[..50]
        .iter()
        .map(|r| r.loss_total)
        .collect();
    let avg = |r: std::ops::Range<usize>| -> f64 {
        let n = r.len() as f64;
        losses[r].iter().sum::<f64>() / n
    };
    let head = avg(0..10);
    let mid = avg(20..30);
    let tail = avg(40..50);
    assert!(tail < mid && mid < head, "no downward trend: {head} {mid} {tail}");
}

#[test]
fn batch_row_permutation_leaves_parameter_update_unchanged() {
    // Mean-reduced losses are permutation-symmetric over the batch, so one
    // optimizer step from a permuted batch lands on the same parameters.
    let world = gen_world(WorldParams::desk(4, 7)).unwrap();
    let tsb = world.gen_text_anchors(None).unwrap();
    let mut rng = stream_rng(7, StreamId::TrainBatches);
    let batch = world.sample_batch(16, &mut rng);
    let mut vsb = VisualSemanticsBank::new(16, 4, 0.999).unwrap();
    let assignments = classify_by_tsb(&batch.teacher_embeddings, &tsb).unwrap();
    let agg = batch_centroids(&batch.teacher_embeddings, &assignments, 4).unwrap();
    vsb.momentum_update(&agg).unwrap();
    let cfg = LossConfig::standard(0.04, 0.1);

    let mut init_rng = stream_rng(7, StreamId::StudentInit);
    let net0 = StudentNet::new_random(world.input_dim(), &[32], 16, &mut init_rng).unwrap();

    let step_with = |inputs: &EmbeddingMatrix, teacher: &EmbeddingMatrix| -> Vec<f64> {
        let net = net0.clone();
        let (z_s, cache) = net.forward(inputs).unwrap();
        let out = lgd_loss(teacher, &z_s, &tsb, &vsb, &cfg).unwrap();
        let grads = net.backward(&cache, &out.grad_student).unwrap();
        let mut opt = OptimizerState::new(net.layers(), 0.9, 1e-4);
        let mut layers = net.layers().to_vec();
        sgd_step(&mut layers, &grads, &mut opt, 0.05, 0).unwrap();
        layers
            .iter()
            .flat_map(|l| {
                l.weight
                    .data()
                    .iter()
                    .copied()
                    .chain(l.bias.iter().copied())
                    .collect::<Vec<f64>>()
            })
            .collect()
    };

    let base = step_with(&batch.inputs, &batch.teacher_embeddings);

    // Reverse the batch rows.
    let b = batch.inputs.rows();
    let perm: Vec<usize> = (0..b).rev().collect();
    let mut p_inputs = EmbeddingMatrix::zeros(b, batch.inputs.cols());
    let mut p_teacher = EmbeddingMatrix::zeros(b, 16);
    for (dst, &src) in perm.iter().enumerate() {
        p_inputs.row_mut(dst).copy_from_slice(batch.inputs.row(src));
        p_teacher
            .row_mut(dst)
            .copy_from_slice(batch.teacher_embeddings.row(src));
    }
    let permuted = step_with(&p_inputs, &p_teacher);
    for (a, p) in base.iter().zip(permuted.iter()) {
        assert!((a - p).abs() <= 1e-12, "{a} vs {p}");
    }
}

#[test]
fn seed_queue_equal_to_bank_reproduces_visual_loss_fifty_instances() {
    for trial in 0..50u64 {
        let c = 3 + (trial % 4) as usize;
        let d = 6 + (trial % 8) as usize;
        let b = 2 + (trial % 5) as usize;
        let anchors = unit_rows(c, d, 1000 + trial);
        let mut vsb = VisualSemanticsBank::new(d, c, 0.999).unwrap();
        let agg = batch_centroids(&anchors, &(0..c).collect::<Vec<_>>(), c).unwrap();
        vsb.momentum_update(&agg).unwrap();

        let mut queue = InstanceQueue::new(c, d).unwrap();
        queue.push_batch(&vsb.anchors().transpose()).unwrap();

        let z_t = unit_rows(b, d, 2000 + trial);
        let z_s = unit_rows(b, d, 3000 + trial);
        let cfg = LossConfig::standard(0.04 + 0.01 * (trial % 3) as f64, 0.1);
        let vis = visual_alignment_loss(&z_t, &z_s, &vsb, &cfg).unwrap();
        let seed = seed_baseline_loss(&z_t, &z_s, &queue, &cfg).unwrap();
        assert!(
            (vis.total - seed.total).abs() <= 1e-12,
            "trial {trial}: {} vs {}",
            vis.total,
            seed.total
        );
        for (a, bb) in vis.grad_student.data().iter().zip(seed.grad_student.data()) {
            assert!((a - bb).abs() <= 1e-12, "trial {trial}");
        }
    }
}

#[test]
fn whole_pipeline_is_bit_reproducible() {
    let params = WorldParams::desk(6, 99);
    let run = || {
        let world = gen_world(params.clone()).unwrap();
        let tsb = world.gen_text_anchors(None).unwrap();
        let mut settings = TrainSettings::desk(99, LossConfig::standard(0.04, 0.1));
        settings.epochs = 3;
        settings.steps_per_epoch = 10;
        settings.warmup_epochs = 1;
        settings.batch_size = 24;
        settings.augment_sigma = 0.02;
        let mut provider = WorldBatchProvider::new(world, 99);
        train_distillation(&settings, &mut provider, &tsb, &mut NoHooks).unwrap()
    };
    let a = run();
    let b = run();
    let bits = |v: &[f64]| -> Vec<u64> { v.iter().map(|x| x.to_bits()).collect() };
    assert_eq!(
        bits(&a.student.flatten_params()),
        bits(&b.student.flatten_params())
    );
    assert_eq!(bits(a.vsb.anchors().data()), bits(b.vsb.anchors().data()));
    for (ra, rb) in a.step_metrics.iter().zip(b.step_metrics.iter()) {
        assert_eq!(ra.loss_total.to_bits(), rb.loss_total.to_bits());
        assert_eq!(ra.lr.to_bits(), rb.lr.to_bits());
    }
}

#[test]
fn trained_student_beats_chance_comfortably() {
    let world = gen_world(WorldParams::desk(4, 5)).unwrap();
    let tsb = world.gen_text_anchors(None).unwrap();
    let mut settings = TrainSettings::desk(5, LossConfig::standard(0.04, 0.1));
    settings.epochs = 8;
    settings.steps_per_epoch = 30;
    settings.warmup_epochs = 1;
    let mut provider = WorldBatchProvider::new(world.clone(), 5);
    let arts = train_distillation(&settings, &mut provider, &tsb, &mut NoHooks).unwrap();
    let split = lgd_core::eval::EvalSplit::from_world(&world, 1000, 5);
    let report = lgd_core::eval::zeroshot_eval(
        lgd_core::eval::EncoderRef::Student(&arts.student),
        &split,
        &tsb,
        None,
    )
    .unwrap();
    assert!(
        report.accuracy > 0.8,
        "trained accuracy {} too low",
        report.accuracy
    );
}
