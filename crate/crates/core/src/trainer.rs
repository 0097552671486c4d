//! Gradients, finite-difference verification, AdamW and the training loop.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{OptimizerConfig, RunConfig};
use crate::error::{LensError, Result};
use crate::interchange::{read_tensor, write_tensor, Precision};
use crate::model::{ForwardOptions, LensModel, LensWeights, Sample};
use crate::numerics::Tensor;
use crate::objectives::{ciou, giou, LossBreakdown};
use crate::synthetic::SyntheticTask;
use crate::tape::Graph;

pub type GradientMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub trainable: bool,
}

/// Flat view of every named tensor in a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    pub entries: Vec<ParamEntry>,
}

impl ParameterStore {
    pub fn of(model: &LensModel) -> Self {
        let mut entries = Vec::new();
        model.weights.visit("", &mut |name, t| {
            entries.push(ParamEntry {
                name: name.to_string(),
                dims: t.dims().to_vec(),
                trainable: model.is_trainable(name),
            })
        });
        ParameterStore { entries }
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.dims.iter().product::<usize>()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.dims.iter().product::<usize>())
            .sum()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.name.as_str())
    }
}

/// Loss and gradients of `scale · total_loss` for one sample. Frozen
/// parameters are absent from the map.
pub fn backward_scaled(
    model: &LensModel,
    sample: &Sample,
    opts: &ForwardOptions,
    scale: f64,
) -> Result<(LossBreakdown, GradientMap)> {
    let mut g = Graph::new();
    let vars = model.build(&mut g, &sample.input, &sample.image, opts, true)?;
    let loss = model.attach_loss(&mut g, &vars, &sample.mask)?;
    let grads = g.backward_with_seed(loss.total, scale);
    let mut out = GradientMap::new();
    let mut bad = None;
    vars.weights.visit("", &mut |name, &v| {
        if !model.is_trainable(name) {
            return;
        }
        let grad = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(g.value(v).dims()));
        if !grad.is_finite() && bad.is_none() {
            bad = Some(name.to_string());
        }
        out.insert(name.to_string(), grad);
    });
    if let Some(name) = bad {
        return Err(LensError::NonFiniteGradient(name));
    }
    Ok((loss.breakdown, out))
}

pub fn backward(model: &LensModel, sample: &Sample, opts: &ForwardOptions) -> Result<(LossBreakdown, GradientMap)> {
    backward_scaled(model, sample, opts, 1.0)
}

/// Applies `f` to the tensor called `name`.
fn with_param(model: &mut LensModel, name: &str, f: &mut dyn FnMut(&mut Tensor)) {
    model.weights.visit_mut("", &mut |n, t| {
        if n == name {
            f(t)
        }
    });
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Fraction of each tensor's coordinates to probe (at least one).
    pub subset: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            subset: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Probes whose relative error exceeded the threshold, worst first.
    pub offending: Vec<Probe>,
    pub worst: Option<Probe>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.offending.is_empty()
    }

    pub fn offending_names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.offending.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        names
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences on a seeded subset
/// of coordinates. Keypoints are fixed from the unperturbed forward pass and
/// the full-description branch is used.
pub fn fd_gradient_check(
    model: &LensModel,
    sample: &Sample,
    opts: GradCheckOptions,
    threshold: f64,
) -> Result<GradCheckReport> {
    let keypoints = model.infer(&sample.input, &sample.image)?.keypoints;
    let fwd = ForwardOptions {
        use_locals: true,
        keypoints: Some(keypoints),
    };
    let (_, analytic) = backward(model, sample, &fwd)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe_model = model.clone();
    let mut probes = Vec::new();
    for (name, grad) in &analytic {
        let n = grad.len();
        let k = ((n as f64 * opts.subset).ceil() as usize).clamp(1, n);
        let mut idx = sample_indices(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        for i in idx {
            let mut eval = |delta: f64| -> Result<f64> {
                with_param(&mut probe_model, name, &mut |t| t.data_mut()[i] += delta);
                let l = probe_model.loss(sample, &fwd);
                with_param(&mut probe_model, name, &mut |t| t.data_mut()[i] -= delta);
                Ok(l?.total)
            };
            let (plus, minus) = (eval(opts.step)?, eval(-opts.step)?);
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[i];
            probes.push(Probe {
                name: name.clone(),
                index: i,
                analytic: a,
                numeric,
                relative_error: relative_error(a, numeric),
            });
        }
    }
    probes.sort_by(|a, b| b.relative_error.total_cmp(&a.relative_error));
    let max = probes.first().map_or(0.0, |p| p.relative_error);
    Ok(GradCheckReport {
        max_relative_error: max,
        checked: probes.len(),
        worst: probes.first().cloned(),
        offending: probes.into_iter().take_while(|p| p.relative_error >= threshold).collect(),
    })
}

/// Max relative error for each finite-difference step.
pub fn step_sweep(model: &LensModel, sample: &Sample, steps: &[f64], seed: u64) -> Result<Vec<(f64, f64)>> {
    steps
        .iter()
        .map(|&step| {
            let opts = GradCheckOptions { step, subset: 0.05, seed };
            Ok((step, fd_gradient_check(model, sample, opts, f64::INFINITY)?.max_relative_error))
        })
        .collect()
}

/// AdamW moments, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// One decoupled-weight-decay Adam step over the parameters named in
    /// `grads`.
    pub fn update(&mut self, weights: &mut LensWeights<Tensor>, grads: &GradientMap) {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (first, second) = (&mut self.first, &mut self.second);
        weights.visit_mut("", &mut |name, param| {
            let Some(g) = grads.get(name) else { return };
            let m = first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.dims()));
            let v = second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.dims()));
            let decay = 1.0 - c.learning_rate * c.weight_decay;
            for (((p, &gi), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p *= decay;
                *p -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    /// `false` when the step took the global-description-only branch.
    pub used_locals: bool,
}

/// Averaged gradients over a batch. Samples run in parallel; the sum is
/// taken in batch order so results do not depend on scheduling.
pub fn batch_gradients(
    model: &LensModel,
    batch: &[Sample],
    opts: &ForwardOptions,
) -> Result<(LossBreakdown, GradientMap)> {
    if batch.is_empty() {
        return Err(LensError::InvalidArgument("empty batch".into()));
    }
    let results: Vec<Result<(LossBreakdown, GradientMap)>> =
        batch.par_iter().map(|s| backward(model, s, opts)).collect();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut sum = GradientMap::new();
    for r in results {
        let (l, grads) = r?;
        loss.accumulate(&l, scale);
        for (name, g) in grads {
            let g = g.scaled(scale);
            match sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    Ok((loss, sum))
}

/// One optimizer step. Draws the description-dropout branch from
/// `dropout_rng` once per batch.
pub fn train_step<R: Rng>(
    model: &mut LensModel,
    opt: &mut OptimizerState,
    batch: &[Sample],
    dropout_rng: &mut R,
) -> Result<StepRecord> {
    let drop = dropout_rng.gen_bool(model.config.description_dropout.clamp(0.0, 1.0));
    let used_locals = model.config.use_local_descriptions && !drop;
    let opts = ForwardOptions {
        use_locals: used_locals,
        keypoints: None,
    };
    let (loss, grads) = batch_gradients(model, batch, &opts)?;
    let step = opt.step as usize;
    if !loss.total.is_finite() {
        return Err(LensError::Diverged { step, loss: loss.total });
    }
    opt.update(&mut model.weights, &grads);
    Ok(StepRecord {
        step,
        loss,
        used_locals,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub giou: f64,
    pub ciou: f64,
}

/// gIoU/cIoU of thresholded predictions.
pub fn evaluate(model: &LensModel, samples: &[Sample]) -> Result<Metrics> {
    let pairs: Vec<Result<(Tensor, Tensor)>> = samples
        .par_iter()
        .map(|s| {
            let out = model.infer(&s.input, &s.image)?;
            Ok((out.mask.binary(), s.mask.clone()))
        })
        .collect();
    let pairs = pairs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Metrics {
        giou: giou(&pairs)?,
        ciou: ciou(&pairs)?,
    })
}

pub const HELD_OUT_SIZE: usize = 64;

#[derive(Clone, Debug)]
pub struct TrainingReport {
    pub records: Vec<StepRecord>,
    pub best_loss: f64,
    pub initial: Metrics,
    pub final_metrics: Metrics,
    pub elapsed: Duration,
    pub model: LensModel,
}

impl TrainingReport {
    /// Means of consecutive blocks of `block` step losses.
    pub fn smoothed_losses(&self, block: usize) -> Vec<f64> {
        self.records
            .chunks(block.max(1))
            .map(|c| c.iter().map(|r| r.loss.total).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Seed offsets of the independent streams used by `fit_synthetic`.
const TASK_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const HELD_OUT_STREAM: u64 = 0x5eed;

pub fn held_out_set(config: &RunConfig) -> Vec<Sample> {
    SyntheticTask::new(config, config.seed.wrapping_add(TASK_STREAM))
        .batch(config.seed.wrapping_add(HELD_OUT_STREAM), HELD_OUT_SIZE)
}

/// Trains a fresh model on the synthetic blob task.
pub fn fit_synthetic(config: &RunConfig, steps: usize) -> Result<TrainingReport> {
    fit_synthetic_with(config, steps, &mut |_| {})
}

pub fn fit_synthetic_with(
    config: &RunConfig,
    steps: usize,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainingReport> {
    let start = Instant::now();
    let mut model = LensModel::new(config.clone())?;
    let task = SyntheticTask::new(config, config.seed.wrapping_add(TASK_STREAM));
    let held_out = held_out_set(config);
    let initial = evaluate(&model, &held_out)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(TRAIN_STREAM));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(DROPOUT_STREAM));
    let mut opt = OptimizerState::new(config.optimizer);
    let mut records = Vec::with_capacity(steps);
    let mut best = f64::INFINITY;
    for _ in 0..steps {
        let batch: Vec<Sample> = (0..config.batch_size)
            .map(|_| task.sample(&mut data_rng).sample)
            .collect();
        let rec = train_step(&mut model, &mut opt, &batch, &mut dropout_rng)?;
        best = best.min(rec.loss.total);
        on_step(&rec);
        records.push(rec);
    }
    let final_metrics = if steps == 0 {
        initial
    } else {
        evaluate(&model, &held_out)?
    };
    Ok(TrainingReport {
        records,
        best_loss: best,
        initial,
        final_metrics,
        elapsed: start.elapsed(),
        model,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: RunConfig,
    pub parameters: Vec<CheckpointEntry>,
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

/// Writes one tensor file per parameter plus `checkpoint.json`.
pub fn save_checkpoint(model: &LensModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut parameters = Vec::new();
    let mut err = None;
    model.weights.visit("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        let file = format!("{name}.ltns");
        if let Err(e) = write_tensor(&dir.join(&file), t, Precision::F64) {
            err = Some(e);
        }
        parameters.push(CheckpointEntry {
            name: name.to_string(),
            file,
            dims: t.dims().to_vec(),
        });
    });
    if let Some(e) = err {
        return Err(e);
    }
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        parameters,
    };
    std::fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<LensModel> {
    let text = std::fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let mut model = LensModel::new(manifest.config)?;
    let mut loaded = BTreeMap::new();
    for entry in &manifest.parameters {
        let t = read_tensor(&dir.join(&entry.file))?;
        if t.dims() != entry.dims.as_slice() {
            return Err(LensError::Manifest(format!("{} has dims {:?}, manifest says {:?}", entry.name, t.dims(), entry.dims)));
        }
        loaded.insert(entry.name.clone(), t);
    }
    let mut problem = None;
    model.weights.visit_mut("", &mut |name, t| match loaded.remove(name) {
        Some(v) if v.dims() == t.dims() => *t = v,
        Some(_) => problem = Some(format!("{name}: shape differs from configuration")),
        None => problem = Some(format!("{name}: missing from checkpoint")),
    });
    if let Some(p) = problem.or_else(|| loaded.keys().next().map(|k| format!("{k}: unknown parameter"))) {
        return Err(LensError::Manifest(p));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (LensModel, Sample) {
        let cfg = RunConfig::toy();
        let model = LensModel::new(cfg.clone()).unwrap();
        let s = SyntheticTask::new(&cfg, 3).batch(4, 1).remove(0);
        (model, s)
    }

    #[test]
    fn store_names_are_unique_and_counted() {
        let (model, _) = toy();
        let store = ParameterStore::of(&model);
        let mut names: Vec<&str> = store.entries.iter().map(|e| e.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(store.total_count(), model.parameter_count());
        assert_eq!(store.total_count(), store.trainable_count());
        let mut frozen = model.clone();
        frozen.config.decoder_trainable = false;
        let fs = ParameterStore::of(&frozen);
        assert!(fs.trainable_count() < fs.total_count());
        assert!(fs.trainable_names().all(|n| !n.starts_with("decoder.")));
    }

    #[test]
    fn scaled_loss_scales_gradients() {
        let (model, s) = toy();
        let opts = ForwardOptions::inference();
        let (_, g1) = backward(&model, &s, &opts).unwrap();
        let (_, g2) = backward_scaled(&model, &s, &opts, 2.0).unwrap();
        for (name, a) in &g1 {
            for (x, y) in a.data().iter().zip(g2[name].data()) {
                assert_eq!(2.0 * x, *y, "{name}");
            }
        }
    }

    #[test]
    fn adamw_without_second_moment_is_sign_descent() {
        let mut weights = LensModel::new(RunConfig::toy()).unwrap().weights;
        let before = weights.cls_position.clone();
        let mut grads = GradientMap::new();
        let g = Tensor::row_vector((0..before.len()).map(|i| i as f64 - 7.5).collect());
        grads.insert("cls_position".into(), g.clone());
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            beta2: 0.0,
            weight_decay: 0.0,
            eps: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = OptimizerState::new(cfg);
        opt.update(&mut weights, &grads);
        for ((a, b), gi) in weights.cls_position.data().iter().zip(before.data()).zip(g.data()) {
            assert!((a - (b - 0.1 * gi.signum())).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (mut model, s) = toy();
        let before = model.weights.clone();
        let mut opt = OptimizerState::new(OptimizerConfig {
            learning_rate: 0.0,
            ..OptimizerConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        train_step(&mut model, &mut opt, &[s.clone(), s], &mut rng).unwrap();
        assert_eq!(model.weights, before);
    }

    #[test]
    fn quadratic_central_difference() {
        let f = |t: f64| t * t;
        let h = 1e-4;
        let fd = (f(3.0 + h) - f(3.0 - h)) / (2.0 * h);
        assert!((fd - 6.0).abs() < 1e-9);
        assert!(relative_error(6.0, fd) < 1e-9);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
