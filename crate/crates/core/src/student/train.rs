//! The distillation training loop: draw a batch, aggregate teacher features
//! into the visual bank, evaluate the configured loss, and step the student
//! (and projection) with scheduled SGD. Deterministic given a seed; the
//! sequential bank update makes the loop itself single-threaded while the
//! per-step math parallelizes internally.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::banks::{batch_centroids, classify_by_tsb, TextualSemanticsBank, VisualSemanticsBank};
use crate::dataio::MetricsRow;
use crate::error::{Error, Result};
use crate::losses::{
    generalized_lgd_loss, lgd_loss, naive_projected_textual_loss, seed_baseline_loss,
    DiagnosticSnapshot, InstanceQueue, LossConfig, LossMode, LossOutput,
};
use crate::numerics::{argmax_rows, matmul, EmbeddingMatrix, ZERO_NORM_EPS};
use crate::rng::{fill_normal, stream_rng, StreamId};
use crate::student::{sgd_step, OptimizerState, ProjectionHead, Schedule, StudentNet};
use crate::synthworld::{SampleBatch, SyntheticWorld};

/// Objective optimized by the loop. The first three mirror the public loss
/// modes; the last is the experiment-only collapse foil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingObjective {
    Standard,
    Generalized,
    BaselineSeed,
    NaiveProjectedTextual,
}

impl From<LossMode> for TrainingObjective {
    fn from(mode: LossMode) -> Self {
        match mode {
            LossMode::Standard => TrainingObjective::Standard,
            LossMode::Generalized => TrainingObjective::Generalized,
            LossMode::BaselineSeed => TrainingObjective::BaselineSeed,
        }
    }
}

/// How the visual bank starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VsbInit {
    /// Zero columns, init-replace on first contact (the default branch).
    Replace,
    /// Ablation: random unit anchors, momentum updates from the start.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Held-out inputs/labels evaluated at an epoch cadence during training.
#[derive(Debug, Clone)]
pub struct CadenceEval {
    pub every_epochs: usize,
    pub inputs: EmbeddingMatrix,
    pub labels: Vec<usize>,
}

/// Everything the loop needs besides the data source and the text bank.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub warmup_epochs: usize,
    pub hidden_dims: Vec<usize>,
    pub loss: LossConfig,
    pub objective: TrainingObjective,
    pub optimizer: OptimizerSettings,
    pub bank_momentum: f64,
    pub vsb_init: VsbInit,
    /// Queue length for the baseline objective.
    pub queue_capacity: usize,
    /// Gaussian jitter applied to raw inputs (the desk-scale stand-in for
    /// data augmentation).
    pub augment_sigma: f64,
    /// Hidden dims of the anchor projection (empty = single affine layer).
    pub projection_hidden: Vec<usize>,
    pub cadence_eval: Option<CadenceEval>,
}

impl TrainSettings {
    /// Desk-scale defaults for a given loss configuration.
    pub fn desk(seed: u64, loss: LossConfig) -> Self {
        Self {
            seed,
            batch_size: 64,
            epochs: 30,
            steps_per_epoch: 40,
            warmup_epochs: 5,
            hidden_dims: vec![64],
            objective: loss.mode.into(),
            loss,
            optimizer: OptimizerSettings::default(),
            bank_momentum: 0.999,
            vsb_init: VsbInit::Replace,
            queue_capacity: 1024,
            augment_sigma: 0.0,
            projection_hidden: Vec::new(),
            cadence_eval: None,
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config(
                "batch_size, epochs, and steps_per_epoch must all be >= 1".into(),
            ));
        }
        if !(self.bank_momentum > 0.0 && self.bank_momentum < 1.0) {
            return Err(Error::Config(format!(
                "bank momentum must lie in (0, 1), got {}",
                self.bank_momentum
            )));
        }
        if self.objective == TrainingObjective::BaselineSeed && self.queue_capacity == 0 {
            return Err(Error::Config("baseline objective needs queue_capacity >= 1".into()));
        }
        Ok(())
    }
}

/// Source of training batches.
pub trait BatchProvider {
    fn input_dim(&self) -> usize;
    fn teacher_dim(&self) -> usize;
    fn next_batch(&mut self, batch_size: usize) -> Result<SampleBatch>;
}

/// Batches drawn from a synthetic world.
pub struct WorldBatchProvider {
    world: SyntheticWorld,
    rng: ChaCha8Rng,
}

impl WorldBatchProvider {
    pub fn new(world: SyntheticWorld, seed: u64) -> Self {
        Self {
            world,
            rng: stream_rng(seed, StreamId::TrainBatches),
        }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }
}

impl BatchProvider for WorldBatchProvider {
    fn input_dim(&self) -> usize {
        self.world.input_dim()
    }

    fn teacher_dim(&self) -> usize {
        self.world.embed_dim()
    }

    fn next_batch(&mut self, batch_size: usize) -> Result<SampleBatch> {
        Ok(self.world.sample_batch(batch_size, &mut self.rng))
    }
}

/// Batches sampled (with replacement) from precomputed input/teacher arrays.
pub struct FileBatchProvider {
    inputs: EmbeddingMatrix,
    teacher: EmbeddingMatrix,
    labels: Option<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl FileBatchProvider {
    pub fn new(
        inputs: EmbeddingMatrix,
        teacher: EmbeddingMatrix,
        labels: Option<Vec<usize>>,
        seed: u64,
    ) -> Result<Self> {
        if inputs.rows() != teacher.rows() {
            return Err(Error::CountMismatch {
                what: "sample",
                left: inputs.rows(),
                right: teacher.rows(),
            });
        }
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::CountMismatch {
                    what: "label",
                    left: l.len(),
                    right: inputs.rows(),
                });
            }
        }
        let (teacher, flags) = crate::numerics::l2_normalize_rows(&teacher);
        if let Some(row) = flags.iter().position(|f| *f) {
            return Err(Error::ZeroNormRow {
                op: "FileBatchProvider::new",
                row,
            });
        }
        Ok(Self {
            inputs,
            teacher,
            labels,
            rng: stream_rng(seed, StreamId::TrainBatches),
        })
    }
}

impl BatchProvider for FileBatchProvider {
    fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    fn teacher_dim(&self) -> usize {
        self.teacher.cols()
    }

    fn next_batch(&mut self, batch_size: usize) -> Result<SampleBatch> {
        let n = self.inputs.rows();
        let mut inputs = EmbeddingMatrix::zeros(batch_size, self.inputs.cols());
        let mut teacher = EmbeddingMatrix::zeros(batch_size, self.teacher.cols());
        let mut labels = Vec::with_capacity(batch_size);
        for i in 0..batch_size {
            let idx = self.rng.gen_range(0..n);
            inputs.row_mut(i).copy_from_slice(self.inputs.row(idx));
            teacher.row_mut(i).copy_from_slice(self.teacher.row(idx));
            labels.push(self.labels.as_ref().map(|l| l[idx]).unwrap_or(0));
        }
        Ok(SampleBatch {
            inputs,
            teacher_embeddings: teacher,
            labels,
        })
    }
}

/// View of the loop state handed to epoch hooks.
pub struct EpochState<'a> {
    pub epoch: usize,
    pub step: u64,
    pub epoch_fraction: f64,
    pub student: &'a StudentNet,
    pub projection: Option<&'a ProjectionHead>,
    pub vsb: &'a VisualSemanticsBank,
}

/// Observer for metrics rows; file-backed sinks live in the CLI.
pub trait TrainHooks {
    fn on_step(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _row: &MetricsRow, _state: &EpochState<'_>) -> Result<()> {
        Ok(())
    }
}

/// No-op hooks.
pub struct NoHooks;
impl TrainHooks for NoHooks {}

/// Final model, banks, and the full metrics series of one run.
#[derive(Debug)]
pub struct TrainedArtifacts {
    pub student: StudentNet,
    pub projection: Option<ProjectionHead>,
    pub vsb: VisualSemanticsBank,
    pub queue: Option<InstanceQueue>,
    pub step_metrics: Vec<MetricsRow>,
    pub epoch_metrics: Vec<MetricsRow>,
    pub steps: u64,
}

fn component_summary(out: &LossOutput) -> (Option<f64>, Option<f64>) {
    let visual = out
        .components
        .get("visual")
        .or_else(|| out.components.get("seed"))
        .copied();
    let textual = if let Some(t) = out.components.get("textual") {
        Some(*t)
    } else if out.components.contains_key("textual_teacher")
        || out.components.contains_key("textual_student")
    {
        Some(
            out.components.get("textual_teacher").copied().unwrap_or(0.0)
                + out.components.get("textual_student").copied().unwrap_or(0.0),
        )
    } else {
        out.components.get("textual_naive").copied()
    };
    (visual, textual)
}

/// Classifies teacher features for the aggregation step. With matching
/// dimensions this is the plain text-anchor argmax; in the mismatched regime
/// the current projected anchors act as the classifier.
fn classify_for_banks(
    z_t: &EmbeddingMatrix,
    tsb: &TextualSemanticsBank,
    projection: Option<&ProjectionHead>,
) -> Result<Vec<usize>> {
    if tsb.dim() == z_t.cols() {
        return classify_by_tsb(z_t, tsb);
    }
    let proj = projection.ok_or_else(|| {
        Error::Config("dimension-mismatched anchors need a projection head".into())
    })?;
    for i in 0..z_t.rows() {
        if z_t.row_norm(i) < ZERO_NORM_EPS {
            return Err(Error::ZeroNormRow {
                op: "classify_for_banks",
                row: i,
            });
        }
    }
    let (projected, _) = proj.forward_rows(&tsb.anchor_rows())?;
    let scores = matmul(z_t, &projected.transpose())?;
    Ok(argmax_rows(&scores))
}

fn zeroshot_on(
    student: &StudentNet,
    tsb: &TextualSemanticsBank,
    projection: Option<&ProjectionHead>,
    inputs: &EmbeddingMatrix,
    labels: &[usize],
) -> Result<f64> {
    let (z_s, _) = student.forward(inputs)?;
    let pred = if tsb.dim() == z_s.cols() {
        classify_by_tsb(&z_s, tsb)?
    } else {
        let proj = projection.ok_or_else(|| {
            Error::Config("dimension-mismatched anchors need a projection head".into())
        })?;
        let (projected, _) = proj.forward_rows(&tsb.anchor_rows())?;
        argmax_rows(&matmul(&z_s, &projected.transpose())?)
    };
    let correct = pred
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Runs the full distillation loop. Per step: draw a batch, get teacher
/// features, aggregate them into the visual bank, run the student forward,
/// evaluate the configured loss, backpropagate, and apply one scheduled SGD
/// step. Returns the trained artifacts and the metrics series. Deterministic
/// given the settings.
pub fn train_distillation<P: BatchProvider>(
    settings: &TrainSettings,
    provider: &mut P,
    tsb: &TextualSemanticsBank,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainedArtifacts> {
    settings.validate()?;
    let d = provider.teacher_dim();
    let needs_projection = tsb.dim() != d;
    match settings.objective {
        TrainingObjective::Standard | TrainingObjective::BaselineSeed if needs_projection => {
            return Err(Error::Config(format!(
                "objective requires matching dims, but anchors are {}-d and embeddings {d}-d",
                tsb.dim()
            )));
        }
        _ => {}
    }

    let mut student_rng = stream_rng(settings.seed, StreamId::StudentInit);
    let mut student = StudentNet::new_random(
        provider.input_dim(),
        &settings.hidden_dims,
        d,
        &mut student_rng,
    )?;
    let mut student_opt = OptimizerState::new(
        student.layers(),
        settings.optimizer.momentum,
        settings.optimizer.weight_decay,
    );

    let use_projection = needs_projection
        && matches!(
            settings.objective,
            TrainingObjective::Generalized | TrainingObjective::NaiveProjectedTextual
        );
    let mut projection = if use_projection {
        let mut rng = stream_rng(settings.seed, StreamId::ProjectionInit);
        Some(ProjectionHead::new_random(
            tsb.dim(),
            &settings.projection_hidden,
            d,
            &mut rng,
        )?)
    } else {
        None
    };
    let mut projection_opt = projection.as_ref().map(|p| {
        OptimizerState::new(
            p.layers(),
            settings.optimizer.momentum,
            settings.optimizer.weight_decay,
        )
    });

    let mut vsb = match settings.vsb_init {
        VsbInit::Replace => VisualSemanticsBank::new(d, tsb.num_categories(), settings.bank_momentum)?,
        VsbInit::Random => {
            let mut rng = stream_rng(settings.seed, StreamId::VsbRandomInit);
            VisualSemanticsBank::new_random_init(
                d,
                tsb.num_categories(),
                settings.bank_momentum,
                &mut rng,
            )?
        }
    };

    let mut queue = if settings.objective == TrainingObjective::BaselineSeed {
        Some(InstanceQueue::new(settings.queue_capacity, d)?)
    } else {
        None
    };

    let schedule = Schedule::new(
        settings.optimizer.learning_rate,
        settings.warmup_epochs,
        settings.epochs,
    )?;

    let mut aug_rng = stream_rng(settings.seed, StreamId::Augmentation);
    let total_steps = settings.total_steps();
    let mut step_metrics = Vec::with_capacity(total_steps as usize);
    let mut epoch_metrics = Vec::with_capacity(settings.epochs);
    let mut aug_buf = vec![0.0; provider.input_dim()];

    // Per-epoch accumulators for the CSV summary rows.
    let mut epoch_loss_sum = 0.0;
    let mut epoch_visual_sum = (0.0, 0usize);
    let mut epoch_textual_sum = (0.0, 0usize);

    for step in 0..total_steps {
        let epoch = (step / settings.steps_per_epoch as u64) as usize;
        let t = step as f64 / total_steps as f64;
        let lr = schedule.lr_at(t);

        let mut batch = provider.next_batch(settings.batch_size)?;
        if settings.augment_sigma >= 0.0 {
            for i in 0..batch.inputs.rows() {
                fill_normal(&mut aug_rng, &mut aug_buf, settings.augment_sigma);
                for (v, n) in batch.inputs.row_mut(i).iter_mut().zip(aug_buf.iter()) {
                    *v += n;
                }
            }
        }
        let z_t = &batch.teacher_embeddings;

        // Language-guided aggregation always runs: the visual bank is
        // maintained by the teacher regardless of the objective or the
        // optimizer settings.
        let assignments = classify_for_banks(z_t, tsb, projection.as_ref())?;
        let agg = batch_centroids(z_t, &assignments, tsb.num_categories())?;
        vsb.momentum_update(&agg)?;

        let (z_s, cache) = student.forward(&batch.inputs)?;

        let mut pushed_before_loss = false;
        let loss = match settings.objective {
            TrainingObjective::Standard => lgd_loss(z_t, &z_s, tsb, &vsb, &settings.loss)?,
            TrainingObjective::Generalized => {
                generalized_lgd_loss(z_t, &z_s, tsb, &vsb, projection.as_ref(), &settings.loss)?
            }
            TrainingObjective::BaselineSeed => {
                let q = queue.as_mut().unwrap();
                if q.is_empty() {
                    // First step: nothing enqueued yet, so the loss runs
                    // against the batch's own teacher features.
                    q.push_batch(z_t)?;
                    pushed_before_loss = true;
                }
                seed_baseline_loss(z_t, &z_s, q, &settings.loss)?
            }
            TrainingObjective::NaiveProjectedTextual => {
                naive_projected_textual_loss(z_t, &z_s, tsb, projection.as_ref(), &settings.loss)?
            }
        };

        if !loss.total.is_finite() {
            return Err(Error::TrainingAbort {
                step,
                message: format!("loss became non-finite ({})", loss.total),
                diagnostics: Box::new(DiagnosticSnapshot {
                    step,
                    components: loss.components.clone(),
                    score_rows: loss.scores.head_rows(4),
                }),
            });
        }

        let grads = student.backward(&cache, &loss.grad_student)?;
        sgd_step(student.layers_mut(), &grads, &mut student_opt, lr, step)?;
        student.bump_version();
        if let (Some(p), Some(po), Some(pg)) = (
            projection.as_mut(),
            projection_opt.as_mut(),
            loss.grad_projection.as_ref(),
        ) {
            sgd_step(p.layers_mut(), pg, po, lr, step)?;
        }

        if let Some(q) = queue.as_mut() {
            if !pushed_before_loss {
                q.push_batch(z_t)?;
            }
        }

        let (visual, textual) = component_summary(&loss);
        let row = MetricsRow {
            step,
            epoch,
            lr,
            loss_total: loss.total,
            loss_visual: visual,
            loss_textual: textual,
            vsb_initialized_count: vsb.initialized_count(),
            zeroshot_acc: None,
        };
        hooks.on_step(&row)?;
        epoch_loss_sum += loss.total;
        if let Some(v) = visual {
            epoch_visual_sum = (epoch_visual_sum.0 + v, epoch_visual_sum.1 + 1);
        }
        if let Some(t) = textual {
            epoch_textual_sum = (epoch_textual_sum.0 + t, epoch_textual_sum.1 + 1);
        }
        step_metrics.push(row);

        let epoch_end = (step + 1) % settings.steps_per_epoch as u64 == 0;
        if epoch_end {
            let steps_f = settings.steps_per_epoch as f64;
            let zeroshot_acc = match &settings.cadence_eval {
                Some(ce)
                    if (epoch + 1) % ce.every_epochs.max(1) == 0
                        || epoch + 1 == settings.epochs =>
                {
                    Some(zeroshot_on(
                        &student,
                        tsb,
                        projection.as_ref(),
                        &ce.inputs,
                        &ce.labels,
                    )?)
                }
                _ => None,
            };
            let epoch_row = MetricsRow {
                step,
                epoch,
                lr,
                loss_total: epoch_loss_sum / steps_f,
                loss_visual: (epoch_visual_sum.1 > 0)
                    .then(|| epoch_visual_sum.0 / epoch_visual_sum.1 as f64),
                loss_textual: (epoch_textual_sum.1 > 0)
                    .then(|| epoch_textual_sum.0 / epoch_textual_sum.1 as f64),
                vsb_initialized_count: vsb.initialized_count(),
                zeroshot_acc,
            };
            let state = EpochState {
                epoch,
                step,
                epoch_fraction: (step + 1) as f64 / total_steps as f64,
                student: &student,
                projection: projection.as_ref(),
                vsb: &vsb,
            };
            hooks.on_epoch(&epoch_row, &state)?;
            epoch_metrics.push(epoch_row);
            epoch_loss_sum = 0.0;
            epoch_visual_sum = (0.0, 0);
            epoch_textual_sum = (0.0, 0);
        }
    }

    Ok(TrainedArtifacts {
        student,
        projection,
        vsb,
        queue,
        step_metrics,
        epoch_metrics,
        steps: total_steps,
    })
}
