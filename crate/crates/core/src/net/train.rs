//! End-to-end training of encoder, global connection and decoders.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{adam_step, AdamState, Scalar};
use crate::latent::{dropout_hierarchy, mask_gradients};
use crate::sdf::{PointBatch, ScalarGrid3};

use super::config::ModelConfig;
use super::field::Field;
use super::loss::{l1_terms, positions};
use super::model::{Model, ModelParams};

/// One training example: the baked input grid and its two point sets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingShape {
    pub grid: ScalarGrid3,
    pub uniform: PointBatch,
    pub near_surface: PointBatch,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub adam: Vec<AdamState<f32>>,
    pub iteration: u64,
    /// Batch loss of every completed step.
    pub losses: Vec<f32>,
}

/// Loss of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub loss: f64,
    pub level_losses: Vec<f64>,
}

impl TrainState {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let model = Model::init(config)?;
        let adam = model
            .params
            .tensors()
            .iter()
            .map(|t| AdamState::new(t.shape(), config.adam))
            .collect();
        Ok(Self {
            model,
            adam,
            iteration: 0,
            losses: Vec::new(),
        })
    }

    /// Random stream for a given iteration, so resumed runs replay exactly.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed);
        rng.set_stream(self.iteration + 1);
        rng
    }
}

/// Loss gradients of the whole model for a batch of shapes.
pub fn batch_gradients<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    shapes: &[&TrainingShape],
    rng: &mut R,
) -> Result<(ModelParams<T>, StepReport)> {
    let config = &model.config;
    let mut grads = model.params.zeros_like();
    let mut level_losses = vec![0.0; model.num_levels()];
    for shape in shapes {
        let (z, cache) = model.encode_with_cache(&shape.grid)?;
        let (dropped, masks) = dropout_hierarchy(&z, config.effective_dropout(), rng)?;
        let mut batch = shape.uniform.draw(config.points_per_set, rng);
        batch.extend(&shape.near_surface.draw(config.points_per_set, rng));
        if batch.is_empty() {
            return Err(Error::Argument("training shape has no points".into()));
        }
        let pts = positions(&batch);
        let scale = 1.0 / (batch.len() * shapes.len()) as f64;
        let field = Field::new(model, &dropped)?;
        let mut fg = field.backward(&pts, true, |r, v| Ok(l1_terms(v, &batch.gt_sdf[r], scale)))?;
        for (a, b) in level_losses.iter_mut().zip(&fg.terms) {
            *a += b;
        }
        mask_gradients(&mut fg.latents, &masks);
        model.params.encoder.backward(&cache, &fg.latents, &mut grads.encoder)?;
        if let Some(dec) = fg.decoders {
            for (a, b) in grads.decoders.iter_mut().zip(&dec) {
                for (ta, tb) in a.tensors_mut().zip(b.tensors()) {
                    ta.add_assign(tb)?;
                }
            }
        }
        if let Some(g) = fg.global {
            for (ta, tb) in grads.global.tensors_mut().zip(g.tensors()) {
                ta.add_assign(tb)?;
            }
        }
    }
    let report = StepReport {
        iteration: 0,
        loss: level_losses.iter().sum(),
        level_losses,
    };
    Ok((grads, report))
}

/// Encode → dropout → multilevel loss on fresh draws → backward → Adam.
pub fn train_step(state: &mut TrainState, dataset: &[TrainingShape]) -> Result<StepReport> {
    if dataset.is_empty() {
        return Err(Error::Argument("training needs at least one shape".into()));
    }
    let mut rng = state.step_rng();
    let b = state.model.config.batch_size;
    let picks: Vec<usize> = if dataset.len() <= b {
        (0..dataset.len()).collect()
    } else {
        let mut p = sample(&mut rng, dataset.len(), b).into_vec();
        p.sort_unstable();
        p
    };
    let batch: Vec<&TrainingShape> = picks.iter().map(|&i| &dataset[i]).collect();
    let (grads, mut report) = batch_gradients(&state.model, &batch, &mut rng)?;
    if !report.loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at iteration {} (level losses {:?})",
            state.iteration, report.level_losses
        )));
    }
    if !grads.is_finite() {
        let names = grads.non_finite_tensors();
        return Err(Error::Numeric(format!(
            "non-finite gradient at iteration {} in {}",
            state.iteration,
            names.join(", ")
        )));
    }
    for ((p, g), s) in state.model.params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut state.adam) {
        adam_step(p, g, s)?;
    }
    report.iteration = state.iteration;
    state.iteration += 1;
    state.losses.push(report.loss as f32);
    Ok(report)
}

/// Runs `iterations` steps, calling `progress` after each one.
pub fn train_for(
    state: &mut TrainState,
    dataset: &[TrainingShape],
    iterations: usize,
    mut progress: impl FnMut(&StepReport),
) -> Result<()> {
    for _ in 0..iterations {
        let report = train_step(state, dataset)?;
        progress(&report);
    }
    Ok(())
}

/// Trains a fresh model for `config.iterations` steps.
pub fn train(dataset: &[TrainingShape], config: &ModelConfig) -> Result<TrainState> {
    let mut state = TrainState::new(config)?;
    train_for(&mut state, dataset, config.iterations, |_| {})?;
    Ok(state)
}
