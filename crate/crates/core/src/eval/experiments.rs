//! Paired experiments: ablation arms over seeds, text control, and the
//! projection-collapse comparison. Arms sharing a seed share the world and
//! the batch sequence, so differences isolate the loss or bank change.

use super::{mean_pairwise_cosine, mean_row_norm, zeroshot_eval, EncoderRef, EvalSplit};
use crate::banks::TextualSemanticsBank;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossMode};
use crate::rng::{stream_rng, StreamId};
use crate::student::train::{
    train_distillation, NoHooks, TrainSettings, TrainingObjective, WorldBatchProvider,
};
use crate::student::ProjectionHead;
use crate::synthworld::{gen_world, SyntheticWorld, WorldParams};

/// One cell of a suite grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub zeroshot: f64,
}

/// Named training arms used by the ablation and baseline-comparison suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteArm {
    VisualOnly,
    TextualOnly,
    Combined,
    SeedBaseline,
}

impl SuiteArm {
    pub fn name(&self) -> &'static str {
        match self {
            SuiteArm::VisualOnly => "visual_only",
            SuiteArm::TextualOnly => "textual_only",
            SuiteArm::Combined => "combined",
            SuiteArm::SeedBaseline => "seed_baseline",
        }
    }

    fn apply(&self, settings: &mut TrainSettings) {
        match self {
            SuiteArm::VisualOnly => {
                settings.loss.mode = LossMode::Standard;
                settings.loss.alpha = 1.0;
                settings.objective = TrainingObjective::Standard;
            }
            SuiteArm::TextualOnly => {
                settings.loss.mode = LossMode::Standard;
                settings.loss.alpha = 0.0;
                settings.objective = TrainingObjective::Standard;
            }
            SuiteArm::Combined => {
                settings.loss.mode = LossMode::Standard;
                settings.loss.alpha = 0.5;
                settings.objective = TrainingObjective::Standard;
            }
            SuiteArm::SeedBaseline => {
                settings.loss.mode = LossMode::BaselineSeed;
                settings.objective = TrainingObjective::BaselineSeed;
            }
        }
    }
}

/// Trains one arm on the seed's world and returns held-out zero-shot
/// accuracy. The world, text bank, batch stream, and eval split depend only
/// on the seed, so arms pair exactly.
pub fn run_suite_arm(
    arm: SuiteArm,
    seed: u64,
    base: &TrainSettings,
    world_params: &WorldParams,
    eval_samples: usize,
) -> Result<ArmRun> {
    let mut params = world_params.clone();
    params.seed = seed;
    let world = gen_world(params)?;
    let tsb = world.gen_text_anchors(None)?;
    let mut settings = base.clone();
    settings.seed = seed;
    arm.apply(&mut settings);
    let mut provider = WorldBatchProvider::new(world.clone(), seed);
    let arts = train_distillation(&settings, &mut provider, &tsb, &mut NoHooks)?;
    let split = EvalSplit::from_world(&world, eval_samples, seed);
    let report = zeroshot_eval(EncoderRef::Student(&arts.student), &split, &tsb, None)?;
    Ok(ArmRun {
        arm: arm.name().to_string(),
        seed,
        zeroshot: report.accuracy,
    })
}

/// Mean and standard error of paired differences `a[i] - b[i]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedStats {
    pub mean_difference: f64,
    pub standard_error: f64,
}

pub fn ablation_paired_stats(a: &[f64], b: &[f64]) -> PairedStats {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let diffs: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = if diffs.len() > 1 {
        diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    PairedStats {
        mean_difference: mean,
        standard_error: (var / n).sqrt(),
    }
}

/// Which bank the control arm trains against.
#[derive(Debug, Clone)]
pub enum MismatchArm {
    /// The full (task-agnostic) bank of the same world.
    FullBank,
    /// Anchors from a different world entirely.
    Foreign(TextualSemanticsBank),
}

/// Paired text-control run for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TextControlRecord {
    pub matched_acc: f64,
    pub mismatched_acc: f64,
    pub difference: f64,
}

/// Trains two students on the same unlabeled stream, one guided by the
/// task-restricted bank and one by the mismatched bank, then evaluates both
/// zero-shot on the subset task (subset-category samples classified against
/// the subset anchors).
pub fn text_control_experiment(
    world: &SyntheticWorld,
    full_tsb: &TextualSemanticsBank,
    task_subset_names: &[String],
    settings: &TrainSettings,
    mismatch: &MismatchArm,
    eval_samples: usize,
) -> Result<TextControlRecord> {
    if task_subset_names.is_empty() {
        return Err(Error::Config("task subset must be nonempty".into()));
    }
    let subset_tsb = full_tsb.subset(task_subset_names)?;
    let subset_indices: Vec<usize> = task_subset_names
        .iter()
        .map(|n| full_tsb.index_of(n).expect("validated by subset()"))
        .collect();

    let train_arm = |tsb: &TextualSemanticsBank| -> Result<crate::student::StudentNet> {
        let mut provider = WorldBatchProvider::new(world.clone(), settings.seed);
        let arts = train_distillation(settings, &mut provider, tsb, &mut NoHooks)?;
        Ok(arts.student)
    };

    let matched_student = train_arm(&subset_tsb)?;
    let mismatched_student = match mismatch {
        MismatchArm::FullBank => train_arm(full_tsb)?,
        MismatchArm::Foreign(foreign) => {
            if foreign.dim() != full_tsb.dim() {
                return Err(Error::ShapeMismatch {
                    op: "text_control_experiment",
                    left: foreign.anchors().shape(),
                    right: full_tsb.anchors().shape(),
                });
            }
            train_arm(foreign)?
        }
    };

    // Subset task: samples from the subset categories, classified against
    // the subset anchors. Same split for both arms.
    let split =
        EvalSplit::from_world_categories(world, eval_samples, settings.seed, &subset_indices);
    let matched_acc = zeroshot_eval(
        EncoderRef::Student(&matched_student),
        &split,
        &subset_tsb,
        None,
    )?
    .accuracy;
    let mismatched_acc = zeroshot_eval(
        EncoderRef::Student(&mismatched_student),
        &split,
        &subset_tsb,
        None,
    )?
    .accuracy;
    Ok(TextControlRecord {
        matched_acc,
        mismatched_acc,
        difference: matched_acc - mismatched_acc,
    })
}

/// Anchor-geometry and accuracy statistics of one collapse-experiment arm.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseArmStats {
    pub zeroshot_acc: f64,
    pub separation_initial: f64,
    pub separation_final: f64,
    pub mean_norm_initial: f64,
    pub mean_norm_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseRecord {
    pub naive: CollapseArmStats,
    pub remedy: CollapseArmStats,
}

/// With dimension-mismatched anchors and a learnable projection, trains (a)
/// the naive projected textual loss and (b) the three-term loss, and reports
/// zero-shot accuracy plus projected-anchor geometry drift for both arms.
pub fn collapse_experiment(
    world: &SyntheticWorld,
    settings: &TrainSettings,
    eval_samples: usize,
) -> Result<CollapseRecord> {
    if world.text_dim() == world.embed_dim() {
        return Err(Error::Config(
            "collapse experiment needs dimension-mismatched anchors (set text_dim)".into(),
        ));
    }
    let tsb = world.gen_text_anchors(None)?;
    let split = EvalSplit::from_world(world, eval_samples, settings.seed);

    // The training loop draws the projection init from this same stream, so
    // the initial geometry below is exactly the geometry both arms start at.
    let initial_projection = {
        let mut rng = stream_rng(settings.seed, StreamId::ProjectionInit);
        ProjectionHead::new_random(
            world.text_dim(),
            &settings.projection_hidden,
            world.embed_dim(),
            &mut rng,
        )?
    };
    let (initial_anchors, _) = initial_projection.forward_rows(&tsb.anchor_rows())?;
    let separation_initial = mean_pairwise_cosine(&initial_anchors);
    let mean_norm_initial = mean_row_norm(&initial_anchors);

    let run_arm = |objective: TrainingObjective, mode: LossMode| -> Result<CollapseArmStats> {
        let mut s = settings.clone();
        s.objective = objective;
        s.loss.mode = mode;
        if objective == TrainingObjective::Generalized {
            s.loss.alpha = 0.33;
        }
        let mut provider = WorldBatchProvider::new(world.clone(), s.seed);
        let arts = train_distillation(&s, &mut provider, &tsb, &mut NoHooks)?;
        let projection = arts.projection.as_ref().ok_or_else(|| {
            Error::State("collapse arm finished without a projection".into())
        })?;
        let (final_anchors, _) = projection.forward_rows(&tsb.anchor_rows())?;
        let report = zeroshot_eval(
            EncoderRef::Student(&arts.student),
            &split,
            &tsb,
            Some(projection),
        )?;
        Ok(CollapseArmStats {
            zeroshot_acc: report.accuracy,
            separation_initial,
            separation_final: mean_pairwise_cosine(&final_anchors),
            mean_norm_initial,
            mean_norm_final: mean_row_norm(&final_anchors),
        })
    };

    let naive = run_arm(TrainingObjective::NaiveProjectedTextual, LossMode::Standard)?;
    let remedy = run_arm(TrainingObjective::Generalized, LossMode::Generalized)?;
    Ok(CollapseRecord { naive, remedy })
}

/// Standard-mode settings with generalized-arm support, used by suites.
pub fn suite_base_settings(seed: u64) -> TrainSettings {
    TrainSettings::desk(seed, LossConfig::standard(0.04, 0.1))
}

/// One grid cell outcome; failures carry the error text so a suite can
/// finish its remaining cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCell {
    pub arm: String,
    pub seed: u64,
    pub outcome: std::result::Result<f64, String>,
}

/// Runs every (arm, seed) cell, in parallel when the `parallel` feature is
/// on. Cells are independent deterministic runs and results come back in
/// grid order, so the output is identical either way.
pub fn run_arm_grid(
    arms: &[SuiteArm],
    seeds: &[u64],
    base: &TrainSettings,
    world_params: &WorldParams,
    eval_samples: usize,
) -> Vec<SuiteCell> {
    let n = arms.len() * seeds.len();
    crate::par::map_indexed(n, usize::MAX / n.max(1), |idx| {
        let arm = arms[idx / seeds.len()];
        let seed = seeds[idx % seeds.len()];
        let outcome = run_suite_arm(arm, seed, base, world_params, eval_samples)
            .map(|r| r.zeroshot)
            .map_err(|e| e.to_string());
        SuiteCell {
            arm: arm.name().to_string(),
            seed,
            outcome,
        }
    })
}
