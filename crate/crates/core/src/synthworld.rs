//! Controllable synthetic worlds standing in for a frozen teacher encoder
//! and a text encoder.
//!
//! A world is a set of well-separated unit category directions in embedding
//! space, a mixing map from embedding space to raw input space, and noise
//! knobs. The teacher is the identity on the latent: a sample's latent vector
//! IS its teacher embedding, which keeps ground truth available for
//! evaluation while the student still has to invert the mixing map and
//! denoise. Text anchors are perturbed (optionally dimension-lifted) copies
//! of the category directions, so they are informative but imperfectly
//! aligned with the visual space.
//!
//! Worlds are immutable after generation and all draws are keyed by
//! `(seed, stream)`, so concurrent sampling is race-free and deterministic.

use crate::banks::TextualSemanticsBank;
use crate::error::{Error, Result};
use crate::numerics::{dot, matmul, normalize_in_place, EmbeddingMatrix};
use crate::rng::{fill_normal, stream_rng, StreamId, RNG_ALGORITHM};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Acceptance slack applied only after exact rejection sampling has failed:
/// the separation floor is then enforced up to this many degrees.
const ANGLE_SLACK_DEG: f64 = 1.0;
const GEN_ATTEMPTS: usize = 1000;
/// Mixing maps are re-sampled until their condition number is below this.
const MAX_MIXING_CONDITION: f64 = 100.0;

/// Correlated category structure: directions are drawn around shared group
/// centers instead of independently, so similarity between categories
/// carries a fingerprint (the way real category vocabularies do). Distinct
/// group sizes make that fingerprint asymmetric.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryGroups {
    /// One entry per group; entries must sum to the category count.
    pub sizes: Vec<usize>,
    /// Angle between each member direction and its group center.
    pub within_group_angle_deg: f64,
}

/// Generation parameters (everything needed to rebuild a world bit-exactly,
/// together with the seed).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldParams {
    pub categories: usize,
    pub embed_dim: usize,
    pub input_dim: usize,
    pub sample_noise_sigma: f64,
    pub text_offset_sigma: f64,
    pub input_noise_sigma: f64,
    /// Separation floor for independent directions, or for group centers
    /// when `groups` is set.
    pub min_pairwise_angle_deg: f64,
    /// Text-anchor dimension when it differs from `embed_dim` (the
    /// dimension-mismatch regime); `None` means anchors live in embedding
    /// space.
    pub text_dim: Option<usize>,
    /// Correlated category structure; `None` samples directions
    /// independently.
    pub groups: Option<CategoryGroups>,
    pub seed: u64,
}

impl WorldParams {
    /// Desk-scale defaults for a given category count and seed.
    pub fn desk(categories: usize, seed: u64) -> Self {
        Self {
            categories,
            embed_dim: 16,
            input_dim: 32,
            sample_noise_sigma: 0.15,
            text_offset_sigma: 0.1,
            input_noise_sigma: 0.0,
            min_pairwise_angle_deg: 25.0,
            text_dim: None,
            groups: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::InvalidParameter {
                name: "categories",
                message: format!("need at least 2 categories, got {}", self.categories),
            });
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidParameter {
                name: "embed_dim",
                message: format!("need embed_dim >= 2, got {}", self.embed_dim),
            });
        }
        if self.input_dim < self.embed_dim {
            return Err(Error::InvalidParameter {
                name: "input_dim",
                message: format!(
                    "input_dim ({}) must be >= embed_dim ({})",
                    self.input_dim, self.embed_dim
                ),
            });
        }
        for (name, v) in [
            ("sample_noise_sigma", self.sample_noise_sigma),
            ("text_offset_sigma", self.text_offset_sigma),
            ("input_noise_sigma", self.input_noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter {
                    name,
                    message: format!("must be finite and >= 0, got {v}"),
                });
            }
        }
        if !(0.0..180.0).contains(&self.min_pairwise_angle_deg) {
            return Err(Error::InvalidParameter {
                name: "min_pairwise_angle_deg",
                message: format!("must lie in [0, 180), got {}", self.min_pairwise_angle_deg),
            });
        }
        if let Some(td) = self.text_dim {
            if td < 2 {
                return Err(Error::InvalidParameter {
                    name: "text_dim",
                    message: format!("need text_dim >= 2, got {td}"),
                });
            }
        }
        if let Some(g) = &self.groups {
            if g.sizes.iter().sum::<usize>() != self.categories {
                return Err(Error::InvalidParameter {
                    name: "groups",
                    message: format!(
                        "group sizes sum to {}, expected {}",
                        g.sizes.iter().sum::<usize>(),
                        self.categories
                    ),
                });
            }
            if g.sizes.iter().any(|s| *s == 0) {
                return Err(Error::InvalidParameter {
                    name: "groups",
                    message: "group sizes must be >= 1".into(),
                });
            }
            if !(0.0..90.0).contains(&g.within_group_angle_deg) {
                return Err(Error::InvalidParameter {
                    name: "groups",
                    message: format!(
                        "within_group_angle_deg must lie in [0, 90), got {}",
                        g.within_group_angle_deg
                    ),
                });
            }
        }
        Ok(())
    }
}

/// On-disk world description: params plus the RNG algorithm identifier.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpecFile {
    pub format_version: u32,
    pub rng_algorithm: String,
    pub params: WorldParams,
}

/// One batch of samples: raw inputs for the student, teacher embeddings, and
/// the (evaluation-only) true labels.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    pub inputs: EmbeddingMatrix,
    pub teacher_embeddings: EmbeddingMatrix,
    pub labels: Vec<usize>,
}

/// A generated world. Immutable; all sampling goes through explicit streams.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    params: WorldParams,
    /// C x D unit category directions.
    directions: EmbeddingMatrix,
    /// input_dim x D mixing map with bounded condition number.
    mixing_map: EmbeddingMatrix,
    /// text_dim x D lift with orthonormal columns, present when
    /// `params.text_dim` is set.
    text_map: Option<EmbeddingMatrix>,
}

/// Minimum pairwise separation in degrees, measured as the acute angle
/// between anchor axes.
fn min_pairwise_angle_deg(directions: &EmbeddingMatrix) -> f64 {
    let c = directions.rows();
    let mut min_angle = 180.0_f64;
    for i in 0..c {
        for j in (i + 1)..c {
            let cos = dot(directions.row(i), directions.row(j)).clamp(-1.0, 1.0);
            let angle = cos.abs().acos().to_degrees();
            if angle < min_angle {
                min_angle = angle;
            }
        }
    }
    min_angle
}

fn sample_direction_set(
    c: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> EmbeddingMatrix {
    let mut m = EmbeddingMatrix::zeros(c, d);
    for i in 0..c {
        loop {
            fill_normal(rng, m.row_mut(i), 1.0);
            if normalize_in_place(m.row_mut(i)) {
                break;
            }
        }
    }
    m
}

/// Condition number (largest over smallest singular value) of `a` via Jacobi
/// eigenvalue iteration on `a^T a`. Small matrices only.
fn condition_number(a: &EmbeddingMatrix) -> f64 {
    let gram = matmul(&a.transpose(), a).expect("square gram");
    let n = gram.rows();
    let mut g = gram;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += g.get(i, j).abs();
            }
        }
        if off < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let gpq = g.get(p, q);
                if gpq.abs() < 1e-15 {
                    continue;
                }
                let gpp = g.get(p, p);
                let gqq = g.get(q, q);
                let theta = 0.5 * (2.0 * gpq).atan2(gqq - gpp);
                let (s, c) = theta.sin_cos();
                for k in 0..n {
                    let gkp = g.get(k, p);
                    let gkq = g.get(k, q);
                    g.set(k, p, c * gkp - s * gkq);
                    g.set(k, q, s * gkp + c * gkq);
                }
                for k in 0..n {
                    let gpk = g.get(p, k);
                    let gqk = g.get(q, k);
                    g.set(p, k, c * gpk - s * gqk);
                    g.set(q, k, s * gpk + c * gqk);
                }
            }
        }
    }
    let mut max_ev = f64::MIN;
    let mut min_ev = f64::MAX;
    for i in 0..n {
        let ev = g.get(i, i).max(0.0);
        max_ev = max_ev.max(ev);
        min_ev = min_ev.min(ev);
    }
    if min_ev <= 0.0 {
        f64::INFINITY
    } else {
        (max_ev / min_ev).sqrt()
    }
}

/// Gram-Schmidt orthonormalization of gaussian columns: a text_dim x D lift
/// with orthonormal columns.
fn orthonormal_lift(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
    let mut cols_v: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while cols_v.len() < cols {
        let mut v = vec![0.0; rows];
        fill_normal(rng, &mut v, 1.0);
        for u in &cols_v {
            let proj = dot(&v, u);
            for (vi, ui) in v.iter_mut().zip(u.iter()) {
                *vi -= proj * ui;
            }
        }
        if normalize_in_place(&mut v) {
            cols_v.push(v);
        }
    }
    let mut m = EmbeddingMatrix::zeros(rows, cols);
    for (j, v) in cols_v.iter().enumerate() {
        for (i, x) in v.iter().enumerate() {
            m.set(i, j, *x);
        }
    }
    m
}

/// Generates a world: directions are re-sampled until the pairwise-angle
/// floor holds (exact first, then with a one-degree slack), and the mixing
/// map until its condition number is bounded.
pub fn gen_world(params: WorldParams) -> Result<SyntheticWorld> {
    params.validate()?;
    let mut dir_rng = stream_rng(params.seed, StreamId::WorldDirections);
    let c = params.categories;
    let d = params.embed_dim;

    let anchor_count = match &params.groups {
        Some(g) => g.sizes.len(),
        None => c,
    };
    let mut base_set = None;
    for pass in 0..2 {
        let floor = params.min_pairwise_angle_deg - pass as f64 * ANGLE_SLACK_DEG;
        for _ in 0..GEN_ATTEMPTS {
            let cand = sample_direction_set(anchor_count, d, &mut dir_rng);
            if min_pairwise_angle_deg(&cand) >= floor {
                base_set = Some(cand);
                break;
            }
        }
        if base_set.is_some() {
            break;
        }
    }
    let base_set = base_set.ok_or_else(|| {
        Error::Generation(format!(
            "could not place {anchor_count} directions in {d}-d with pairwise angle >= {} deg after {} attempts",
            params.min_pairwise_angle_deg,
            2 * GEN_ATTEMPTS
        ))
    })?;
    let directions = match &params.groups {
        None => base_set,
        Some(g) => {
            // Spread each group's members at a fixed angle around its
            // center, along random orthogonal offsets.
            let w = g.within_group_angle_deg.to_radians();
            let (sin_w, cos_w) = w.sin_cos();
            let mut dirs = EmbeddingMatrix::zeros(c, d);
            let mut row = 0;
            for (gi, &size) in g.sizes.iter().enumerate() {
                let center = base_set.row(gi).to_vec();
                for _ in 0..size {
                    loop {
                        let mut offset = vec![0.0; d];
                        fill_normal(&mut dir_rng, &mut offset, 1.0);
                        let proj = dot(&offset, &center);
                        for (o, cv) in offset.iter_mut().zip(center.iter()) {
                            *o -= proj * cv;
                        }
                        if !normalize_in_place(&mut offset) {
                            continue;
                        }
                        let member: Vec<f64> = center
                            .iter()
                            .zip(offset.iter())
                            .map(|(cv, ov)| cos_w * cv + sin_w * ov)
                            .collect();
                        // Keep members of the same group distinguishable.
                        let distinct = (0..row).all(|r| {
                            dot(dirs.row(r), &member).clamp(-1.0, 1.0).acos().to_degrees()
                                > g.within_group_angle_deg / 4.0
                        });
                        if distinct {
                            dirs.row_mut(row).copy_from_slice(&member);
                            break;
                        }
                    }
                    row += 1;
                }
            }
            dirs
        }
    };

    let mut mix_rng = stream_rng(params.seed, StreamId::WorldMixing);
    let mut mixing_map = None;
    for _ in 0..GEN_ATTEMPTS {
        let mut cand = EmbeddingMatrix::zeros(params.input_dim, d);
        let scale = 1.0 / (d as f64).sqrt();
        fill_normal(&mut mix_rng, cand.data_mut(), scale);
        if condition_number(&cand) <= MAX_MIXING_CONDITION {
            mixing_map = Some(cand);
            break;
        }
    }
    let mixing_map = mixing_map.ok_or_else(|| {
        Error::Generation(format!(
            "could not sample a {}x{d} mixing map with condition <= {MAX_MIXING_CONDITION}",
            params.input_dim
        ))
    })?;

    let text_map = params.text_dim.map(|td| {
        let mut rng = stream_rng(params.seed, StreamId::TextMap);
        orthonormal_lift(td, d, &mut rng)
    });

    Ok(SyntheticWorld {
        params,
        directions,
        mixing_map,
        text_map,
    })
}

impl SyntheticWorld {
    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    pub fn categories(&self) -> usize {
        self.params.categories
    }

    pub fn embed_dim(&self) -> usize {
        self.params.embed_dim
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_dim
    }

    /// Text-anchor dimension (embed_dim unless a lift is configured).
    pub fn text_dim(&self) -> usize {
        self.params.text_dim.unwrap_or(self.params.embed_dim)
    }

    /// C x D unit category directions.
    pub fn directions(&self) -> &EmbeddingMatrix {
        &self.directions
    }

    pub fn mixing_map(&self) -> &EmbeddingMatrix {
        &self.mixing_map
    }

    pub fn spec_file(&self) -> WorldSpecFile {
        WorldSpecFile {
            format_version: 1,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            params: self.params.clone(),
        }
    }

    /// Draws `batch` samples from the given stream. Labels are uniform over
    /// the categories; the latent is the category direction plus gaussian
    /// noise, re-normalized; the teacher embedding is the latent; the input
    /// is the mixed latent plus input noise.
    pub fn sample_batch(&self, batch: usize, rng: &mut ChaCha8Rng) -> SampleBatch {
        let all: Vec<usize> = (0..self.categories()).collect();
        self.sample_batch_from(batch, rng, &all)
    }

    /// Like `sample_batch` but restricted to a category subset. Returned
    /// labels index into `categories` (position in the subset), which is what
    /// a subset-restricted anchor bank classifies into.
    pub fn sample_batch_from(
        &self,
        batch: usize,
        rng: &mut ChaCha8Rng,
        categories: &[usize],
    ) -> SampleBatch {
        assert!(!categories.is_empty(), "empty category subset");
        let d = self.embed_dim();
        let d_in = self.input_dim();
        let mut inputs = EmbeddingMatrix::zeros(batch.max(1), d_in);
        let mut teacher = EmbeddingMatrix::zeros(batch.max(1), d);
        let mut labels = Vec::with_capacity(batch);
        let mut noise = vec![0.0; d];
        let mut in_noise = vec![0.0; d_in];
        for i in 0..batch {
            let pos = rng.gen_range(0..categories.len());
            let cat = categories[pos];
            labels.push(pos);
            let mut latent: Vec<f64> = self.directions.row(cat).to_vec();
            fill_normal(rng, &mut noise, self.params.sample_noise_sigma);
            for (l, n) in latent.iter_mut().zip(noise.iter()) {
                *l += n;
            }
            if !normalize_in_place(&mut latent) {
                // Noise exactly cancelling the direction is measure-zero;
                // fall back to the clean direction.
                latent = self.directions.row(cat).to_vec();
            }
            teacher.row_mut(i).copy_from_slice(&latent);
            fill_normal(rng, &mut in_noise, self.params.input_noise_sigma);
            let input_row = inputs.row_mut(i);
            for (r, row_m) in input_row.iter_mut().zip(self.mixing_map.iter_rows()) {
                *r = dot(row_m, &latent);
            }
            for (r, n) in input_row.iter_mut().zip(in_noise.iter()) {
                *r += n;
            }
        }
        SampleBatch {
            inputs,
            teacher_embeddings: teacher,
            labels,
        }
    }

    /// The full text anchor set in text space (C rows), before any subset.
    /// Anchors are perturbed category directions, lifted by the text map when
    /// one is configured, and unit-normalized. Deterministic per world, so
    /// repeated calls return identical anchors.
    fn raw_text_anchors(&self) -> EmbeddingMatrix {
        let mut rng = stream_rng(self.params.seed, StreamId::TextAnchors);
        let c = self.categories();
        let td = self.text_dim();
        let mut anchors = EmbeddingMatrix::zeros(c, td);
        let mut offset = vec![0.0; td];
        for i in 0..c {
            let base: Vec<f64> = match &self.text_map {
                Some(t) => {
                    let dir = self.directions.row(i);
                    (0..td).map(|r| dot(t.row(r), dir)).collect()
                }
                None => self.directions.row(i).to_vec(),
            };
            fill_normal(&mut rng, &mut offset, self.params.text_offset_sigma);
            let row = anchors.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r = base[j] + offset[j];
            }
            if !normalize_in_place(row) {
                row.copy_from_slice(&base);
                normalize_in_place(row);
            }
        }
        anchors
    }

    /// Builds the textual bank for this world, optionally restricted to a
    /// name subset (names are `cat_0..cat_{C-1}`).
    pub fn gen_text_anchors(&self, name_subset: Option<&[String]>) -> Result<TextualSemanticsBank> {
        let anchors = self.raw_text_anchors();
        let names: Vec<String> = (0..self.categories()).map(|i| format!("cat_{i}")).collect();
        let full = TextualSemanticsBank::from_anchor_rows(
            &anchors,
            names,
            format!("synthetic:seed={}", self.params.seed),
        )?;
        match name_subset {
            Some(subset) => full.subset(subset),
            None => Ok(full),
        }
    }
}
