//! RMSProp training of whole cascades.
//!
//! Training maximizes the batch objective of [`crate::objective`]. An
//! optional reverse stage-wise pass first fits each device's stages from
//! last to first, each against the sub-cascade that starts at it with all
//! downstream stages frozen; joint fine-tuning of every stage follows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{stratified_kfold, Dataset};
use crate::error::{CascadeError, Result, StageCoord};
use crate::graph::CascadeArchitecture;
use crate::inference::{evaluate, time_harness, Metrics};
use crate::objective::{objective_value_and_gradient, GradientSet, ObjectiveConfig, ParameterSet};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStrategy {
    ReverseStagewise,
    RandomOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    pub init: InitStrategy,
    /// Epoch budget of each stage during reverse stage-wise initialization;
    /// defaults to a quarter of `epochs`.
    #[serde(default)]
    pub init_epochs_per_stage: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            objective: ObjectiveConfig::firm(0.0, Default::default()),
            init: InitStrategy::ReverseStagewise,
            init_epochs_per_stage: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CascadeError::Config(what.to_owned()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return bad("rmsprop_decay must lie in (0, 1)");
        }
        if !(self.rmsprop_epsilon.is_finite() && self.rmsprop_epsilon > 0.0) {
            return bad("rmsprop_epsilon must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        self.objective.validate()
    }

    pub fn init_epochs(&self) -> usize {
        self.init_epochs_per_stage.unwrap_or((self.epochs / 4).max(1))
    }
}

/// Running mean of squared gradients, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub stages: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        OptimizerState { stages: params.stages.iter().map(|m| vec![0.0; m.params.len()]).collect() }
    }
}

/// A trained cascade together with how it was trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    #[serde(default = "model_schema_version")]
    pub schema_version: u32,
    pub arch: CascadeArchitecture,
    pub params: ParameterSet,
    /// Sum of minibatch objectives over each joint-training epoch.
    pub history: Vec<f64>,
    pub config: TrainConfig,
}

fn model_schema_version() -> u32 {
    MODEL_SCHEMA_VERSION
}

impl TrainedModel {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let model: TrainedModel = serde_json::from_str(text)?;
        if model.schema_version != MODEL_SCHEMA_VERSION {
            return Err(CascadeError::Schema(format!("unsupported model schema_version {}", model.schema_version)));
        }
        model.params.check(&model.arch)?;
        for m in &model.params.stages {
            if m.params.iter().any(|v| !v.is_finite()) {
                return Err(CascadeError::Structural("model parameters must be finite".into()));
            }
        }
        Ok(model)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }
}

fn check_congruent(params: &ParameterSet, grads: &GradientSet, state: &OptimizerState) -> Result<()> {
    let ok = params.stages.len() == grads.stages.len()
        && params.stages.len() == state.stages.len()
        && params
            .stages
            .iter()
            .zip(&grads.stages)
            .zip(&state.stages)
            .all(|((p, g), s)| p.params.len() == g.len() && g.len() == s.len());
    if ok {
        Ok(())
    } else {
        Err(CascadeError::Structural("parameter, gradient and optimizer shapes differ".into()))
    }
}

/// In-place ascent step. Stages whose `frozen` flag is set are untouched.
fn rmsprop_update(
    params: &mut ParameterSet,
    grads: &GradientSet,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    frozen: &[bool],
) -> Result<()> {
    for (i, g) in grads.stages.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CascadeError::Training { stage: Some(i), epoch: None, message: "non-finite gradient".into() });
        }
    }
    let rho = cfg.rmsprop_decay;
    for (i, ((model, g), s)) in params.stages.iter_mut().zip(&grads.stages).zip(&mut state.stages).enumerate() {
        if frozen.get(i).copied().unwrap_or(false) {
            continue;
        }
        for ((w, &g), s) in model.params.iter_mut().zip(g).zip(s.iter_mut()) {
            *s = rho * *s + (1.0 - rho) * g * g;
            *w += cfg.learning_rate * g / (s.sqrt() + cfg.rmsprop_epsilon);
        }
    }
    Ok(())
}

/// `state' = rho state + (1 - rho) g^2`, `params' = params + lr g / (sqrt(state') + eps)`.
pub fn rmsprop_step(
    params: &ParameterSet,
    grads: &GradientSet,
    state: &OptimizerState,
    cfg: &TrainConfig,
) -> Result<(ParameterSet, OptimizerState)> {
    check_congruent(params, grads, state)?;
    let mut p = params.clone();
    let mut s = state.clone();
    rmsprop_update(&mut p, grads, &mut s, cfg, &[])?;
    Ok((p, s))
}

/// Minibatch RMSProp over all rows of `data` for `epochs` epochs, returning
/// the per-epoch sum of minibatch objectives.
fn fit(
    arch: &CascadeArchitecture,
    params: &mut ParameterSet,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    frozen: &[bool],
    shuffle_seed: u64,
) -> Result<Vec<f64>> {
    let mut state = OptimizerState::new(params);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (value, grads) = objective_value_and_gradient(arch, params, data, batch, &cfg.objective)?;
            rmsprop_update(params, &grads, &mut state, cfg, frozen).map_err(|e| match e {
                CascadeError::Training { stage, message, .. } => {
                    CascadeError::Training { stage, epoch: Some(epoch), message }
                }
                other => other,
            })?;
            total += value;
        }
        if !total.is_finite() {
            return Err(CascadeError::Training {
                stage: None,
                epoch: Some(epoch),
                message: "objective diverged".into(),
            });
        }
        history.push(total);
    }
    Ok(history)
}

fn check_data(arch: &CascadeArchitecture, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    arch.ensure_valid(data.n_features())?;
    if data.is_empty() {
        return Err(CascadeError::Input("training data is empty".into()));
    }
    Ok(())
}

/// Order in which reverse stage-wise initialization visits stages: the root
/// device first (its stages are downstream of every branch), then each
/// branch, each device from its last stage to its first.
pub fn reverse_stagewise_order(arch: &CascadeArchitecture) -> Vec<StageCoord> {
    let root = arch.root_device();
    let devices = std::iter::once(root).chain(0..arch.device_count());
    devices
        .flat_map(|d| (0..arch.device(d).len()).rev().map(move |s| StageCoord { device: d, stage: s }))
        .filter(|&c| arch.spec(c).is_trainable())
        .collect()
}

/// Linear sub-cascade starting at `at`: the rest of its device, then (for a
/// branch stage) the root's model stages.
fn downstream(arch: &CascadeArchitecture, at: StageCoord) -> Vec<StageCoord> {
    let root = arch.root_device();
    let mut path: Vec<StageCoord> =
        (at.stage..arch.device(at.device).len()).map(|s| StageCoord { device: at.device, stage: s }).collect();
    if at.device != root {
        path.extend((0..arch.root.len()).map(|s| StageCoord { device: root, stage: s }));
    }
    path.retain(|&c| arch.spec(c).is_trainable());
    path
}

pub(crate) fn init_shuffle_seed(seed: u64, position: usize) -> u64 {
    seed ^ (position as u64 + 1).wrapping_mul(0xA076_1D64_78BD_642F)
}

/// Pre-trains every stage, last to first per device, against the firm (or
/// soft, per `cfg`) sub-cascade objective rooted at that stage with the
/// downstream stages frozen.
pub fn reverse_stagewise_init(arch: &CascadeArchitecture, data: &Dataset, cfg: &TrainConfig) -> Result<ParameterSet> {
    check_data(arch, data, cfg)?;
    let mut params = ParameterSet::init(arch, cfg.seed)?;
    let coords = arch.trainable_coords();
    let index_of = |c: StageCoord| coords.iter().position(|&x| x == c).expect("trainable stage");

    for (position, at) in reverse_stagewise_order(arch).into_iter().enumerate() {
        let path = downstream(arch, at);
        let sub_arch = CascadeArchitecture::linear(path.iter().map(|&c| arch.spec(c).clone()).collect(), arch.gating);
        let mut sub_params =
            ParameterSet { stages: path.iter().map(|&c| params.stages[index_of(c)].clone()).collect() };
        let mut frozen = vec![true; path.len()];
        frozen[0] = false;
        fit(&sub_arch, &mut sub_params, data, cfg, cfg.init_epochs(), &frozen, init_shuffle_seed(cfg.seed, position))
            .map_err(|e| match e {
            CascadeError::Training { epoch, message, .. } => CascadeError::Training {
                stage: Some(index_of(at)),
                epoch,
                message: format!("during initialization: {message}"),
            },
            other => other,
        })?;
        params.stages[index_of(at)] = sub_params.stages.swap_remove(0);
    }
    Ok(params)
}

/// Optional reverse stage-wise initialization followed by joint training.
pub fn train(arch: &CascadeArchitecture, data: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    check_data(arch, data, cfg)?;
    let mut params = match cfg.init {
        InitStrategy::ReverseStagewise => reverse_stagewise_init(arch, data, cfg)?,
        InitStrategy::RandomOnly => ParameterSet::init(arch, cfg.seed)?,
    };
    let history = fit(arch, &mut params, data, cfg, cfg.epochs, &[], cfg.seed)?;
    Ok(TrainedModel { schema_version: MODEL_SCHEMA_VERSION, arch: arch.clone(), params, history, config: cfg.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub folds: usize,
    pub fold_seed: u64,
    /// Hard-mode timing repetitions per fold; 0 skips timing.
    pub timing_repetitions: usize,
    /// Train folds and grid points on the rayon pool. Results do not depend
    /// on this flag.
    pub parallel: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions { folds: 8, fold_seed: 0, timing_repetitions: 0, parallel: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub metrics: Metrics,
    pub seconds_per_instance: Option<f64>,
    pub seconds_std_error: Option<f64>,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub accuracy: MeanSe,
    pub f1: MeanSe,
    pub mean_cost: MeanSe,
    pub mean_stages: MeanSe,
    pub seconds_per_instance: Option<MeanSe>,
    pub folds: Vec<FoldResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub std_error: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std_error = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        MeanSe { mean, std_error }
    }
}

/// Cross-validated speed/accuracy trade-off over a lambda grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub rows: Vec<SweepRow>,
    /// Row with the highest mean accuracy; ties go to the lower mean cost,
    /// then to the earlier grid entry.
    pub best: usize,
}

impl TradeoffCurve {
    pub fn best_row(&self) -> &SweepRow {
        &self.rows[self.best]
    }
}

/// Default lambda grid: `{0} U {10^i : i = -4..1}`.
pub fn default_lambda_grid() -> Vec<f64> {
    std::iter::once(0.0).chain((-4..=1).map(|i| 10f64.powi(i))).collect()
}

pub(crate) fn best_index(rows: &[SweepRow]) -> usize {
    let mut best = 0;
    for (i, r) in rows.iter().enumerate().skip(1) {
        let b = &rows[best];
        if r.accuracy.mean > b.accuracy.mean
            || (r.accuracy.mean == b.accuracy.mean && r.mean_cost.mean < b.mean_cost.mean)
        {
            best = i;
        }
    }
    best
}

/// For each lambda: stratified k-fold training and hard-mode evaluation.
pub fn lambda_sweep(
    arch: &CascadeArchitecture,
    data: &Dataset,
    grid: &[f64],
    cfg: &TrainConfig,
    opts: &SweepOptions,
) -> Result<TradeoffCurve> {
    if grid.is_empty() {
        return Err(CascadeError::Config("lambda grid is empty".into()));
    }
    check_data(arch, data, cfg)?;
    for &l in grid {
        ObjectiveConfig { lambda: l, ..cfg.objective }.validate()?;
    }
    let plan = stratified_kfold(data.labels(), opts.folds, opts.fold_seed)?;
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..opts.folds).map(move |f| (g, f))).collect();

    let run = |&(g, fold): &(usize, usize)| -> Result<(TrainedModel, Dataset)> {
        let train_set = data.select(&plan.train_rows(fold));
        let test_set = data.select(&plan.test_rows(fold));
        let mut fold_cfg = cfg.clone();
        fold_cfg.objective.lambda = grid[g];
        fold_cfg.seed = cfg.seed.wrapping_add(fold as u64);
        Ok((train(arch, &train_set, &fold_cfg)?, test_set))
    };
    let trained: Vec<(TrainedModel, Dataset)> = if opts.parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };

    // Evaluation and timing run sequentially on this thread.
    let mut rows = Vec::with_capacity(grid.len());
    for (g, &lambda) in grid.iter().enumerate() {
        let mut folds = Vec::with_capacity(opts.folds);
        for fold in 0..opts.folds {
            let (model, test_set) = &trained[g * opts.folds + fold];
            let metrics = evaluate(model, test_set)?;
            let timing = if opts.timing_repetitions > 0 {
                Some(time_harness(model, test_set, opts.timing_repetitions)?)
            } else {
                None
            };
            folds.push(FoldResult {
                fold,
                metrics,
                seconds_per_instance: timing.map(|t| t.mean_seconds),
                seconds_std_error: timing.map(|t| t.std_error),
                final_objective: *model.history.last().unwrap_or(&f64::NAN),
            });
        }
        let col = |f: &dyn Fn(&FoldResult) -> f64| MeanSe::of(&folds.iter().map(f).collect::<Vec<_>>());
        rows.push(SweepRow {
            lambda,
            accuracy: col(&|r| r.metrics.accuracy),
            f1: col(&|r| r.metrics.f1),
            mean_cost: col(&|r| r.metrics.mean_cost),
            mean_stages: col(&|r| r.metrics.mean_stages_executed),
            seconds_per_instance: if opts.timing_repetitions > 0 {
                Some(col(&|r| r.seconds_per_instance.unwrap_or(f64::NAN)))
            } else {
                None
            },
            folds,
        });
    }
    Ok(TradeoffCurve { best: best_index(&rows), rows })
}
