//! Experiment orchestration: config files, lambda sweeps with reports,
//! alpha sensitivity studies, firm-vs-soft comparisons and paired t-tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{gen_synthetic, load_csv, CsvSchema, Dataset, SyntheticSpec};
use crate::error::{CascadeError, Result};
use crate::gating::Gating;
use crate::graph::CascadeArchitecture;
use crate::inference::StageCount;
use crate::objective::{Family, ObjectiveConfig};
use crate::training::{
    best_index, default_lambda_grid, lambda_sweep, InitStrategy, MeanSe, SweepOptions, SweepRow, TradeoffCurve,
    TrainConfig,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Alpha used for training when the requested gating is hard.
pub const HARD_SURROGATE_ALPHA: f64 = 1024.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Csv { path: PathBuf, schema: PathBuf },
    Synthetic(SyntheticSpec),
}

/// Optimizer settings of an experiment; the seed and objective live on the
/// experiment itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init: InitStrategy,
    pub init_epochs_per_stage: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSettings {
            learning_rate: d.learning_rate,
            rmsprop_decay: d.rmsprop_decay,
            rmsprop_epsilon: d.rmsprop_epsilon,
            epochs: d.epochs,
            batch_size: d.batch_size,
            init: d.init,
            init_epochs_per_stage: d.init_epochs_per_stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Path to an architecture JSON file.
    pub architecture: PathBuf,
    pub dataset: DatasetSource,
    #[serde(default = "firm")]
    pub family: Family,
    /// Overrides the architecture's `gating_alpha` when present.
    #[serde(default)]
    pub alpha: Option<Gating>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default = "eight")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub timing_repetitions: usize,
    /// Train on a seeded random subset of this many rows.
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn firm() -> Family {
    Family::Firm
}

fn eight() -> usize {
    8
}

impl ExperimentConfig {
    /// A config over an in-memory architecture path and synthetic data with
    /// every other field at its default.
    pub fn synthetic(architecture: PathBuf, spec: SyntheticSpec) -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            architecture,
            dataset: DatasetSource::Synthetic(spec),
            family: Family::Firm,
            alpha: None,
            lambda_grid: default_lambda_grid(),
            train: TrainSettings::default(),
            folds: 8,
            seed: 0,
            timing_repetitions: 0,
            subset: None,
            output_dir: None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CascadeError::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CascadeError::Schema(format!("unsupported experiment schema_version {}", cfg.schema_version)));
        }
        Ok(cfg)
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CascadeError::io(path, e))?;
        let mut cfg = Self::from_json_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.architecture);
        if let DatasetSource::Csv { path, schema } = &mut cfg.dataset {
            fix(path);
            fix(schema);
        }
        if let Some(out) = &mut cfg.output_dir {
            fix(out);
        }
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks the numeric fields and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CascadeError::Config(m));
        if self.lambda_grid.is_empty() {
            return bad("lambda_grid is empty".into());
        }
        if let Some(&l) = self.lambda_grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return bad(format!("lambda must be finite and non-negative, got {l}"));
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if let Some(a) = self.alpha {
            a.validate()?;
        }
        if self.subset == Some(0) {
            return bad("subset must be positive".into());
        }
        let mut files = vec![&self.architecture];
        if let DatasetSource::Csv { path, schema } = &self.dataset {
            files.push(path);
            files.push(schema);
        }
        for f in files {
            if !f.is_file() {
                return bad(format!("referenced file does not exist: {}", f.display()));
            }
        }
        self.train_config(0.0, self.gating_or(Gating::default())).validate()
    }

    fn gating_or(&self, arch_gating: Gating) -> Gating {
        self.alpha.unwrap_or(arch_gating)
    }

    /// Training settings for one grid point; `gating` is the gate actually
    /// trained with (see [`training_gating`]).
    pub fn train_config(&self, lambda: f64, gating: Gating) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            rmsprop_decay: t.rmsprop_decay,
            rmsprop_epsilon: t.rmsprop_epsilon,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            objective: ObjectiveConfig { lambda, gating, family: self.family },
            init: t.init,
            init_epochs_per_stage: t.init_epochs_per_stage,
        }
    }

    pub fn load_architecture(&self) -> Result<CascadeArchitecture> {
        let p = &self.architecture;
        let text = std::fs::read_to_string(p).map_err(|e| CascadeError::io(p, e))?;
        CascadeArchitecture::from_json_str(&text)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let data = match &self.dataset {
            DatasetSource::Csv { path, schema } => load_csv(path, &CsvSchema::load(schema)?)?,
            DatasetSource::Synthetic(spec) => gen_synthetic(spec)?,
        };
        Ok(match self.subset {
            Some(m) if m < data.len() => data.random_subset(m, self.seed),
            _ => data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub n_features: usize,
    pub positives: usize,
    pub note: String,
}

impl DatasetSummary {
    fn of(data: &Dataset) -> Self {
        DatasetSummary {
            n: data.len(),
            n_features: data.n_features(),
            positives: data.positive_count(),
            note: data.positive_class_note.clone(),
        }
    }
}

/// The selected operating point with stage pass counts summed over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPoint {
    pub lambda: f64,
    pub accuracy: MeanSe,
    pub f1: MeanSe,
    pub mean_cost: MeanSe,
    pub mean_stages: MeanSe,
    pub seconds_per_instance: Option<MeanSe>,
    pub stage_counts: Vec<StageCount>,
}

impl BestPoint {
    fn of(row: &SweepRow) -> Self {
        let mut counts: Vec<StageCount> = row.folds[0].metrics.stage_counts.clone();
        for f in &row.folds[1..] {
            for (c, o) in counts.iter_mut().zip(&f.metrics.stage_counts) {
                c.executed += o.executed;
                c.passed += o.passed;
            }
        }
        BestPoint {
            lambda: row.lambda,
            accuracy: row.accuracy,
            f1: row.f1,
            mean_cost: row.mean_cost,
            mean_stages: row.mean_stages,
            seconds_per_instance: row.seconds_per_instance,
            stage_counts: counts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub toolkit_version: String,
    pub config: ExperimentConfig,
    /// The architecture as trained, after any alpha override.
    pub architecture: CascadeArchitecture,
    pub dataset: DatasetSummary,
    pub trained_gating: Gating,
    pub curve: TradeoffCurve,
    pub best: BestPoint,
    #[serde(default)]
    pub paired_tests: Vec<NamedTest>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let r: ExperimentReport = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(CascadeError::Schema(format!("unsupported report schema_version {}", r.schema_version)));
        }
        if r.curve.best >= r.curve.rows.len() || r.curve.rows.iter().any(|row| row.folds.is_empty()) {
            return Err(CascadeError::Schema("report curve is inconsistent".into()));
        }
        Ok(r)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Copy with every wall-time field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.curve.rows {
            row.seconds_per_instance = None;
            for f in &mut row.folds {
                f.seconds_per_instance = None;
                f.seconds_std_error = None;
            }
        }
        r.best.seconds_per_instance = None;
        r
    }

    /// Writes `report.json`, `sweep.csv`, `folds.csv` and `stages.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CascadeError::io(dir, e))?;
        let report = dir.join("report.json");
        std::fs::write(&report, self.to_json_string()).map_err(|e| CascadeError::io(&report, e))?;
        write_tables(&self.curve, dir)
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(p: &Path, e: csv::Error) -> CascadeError {
    CascadeError::Input(format!("{}: {e}", p.display()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Flat CSV tables of a curve for external plotting.
pub fn write_tables(curve: &TradeoffCurve, dir: &Path) -> Result<()> {
    let sweep = dir.join("sweep.csv");
    let folds = dir.join("folds.csv");
    let stages = dir.join("stages.csv");

    let mut w = csv_writer(&sweep)?;
    w.write_record([
        "lambda",
        "accuracy",
        "accuracy_se",
        "f1",
        "f1_se",
        "mean_cost",
        "mean_cost_se",
        "mean_stages",
        "mean_stages_se",
        "seconds",
        "seconds_se",
        "best",
    ])
    .map_err(|e| csv_error(&sweep, e))?;
    for (i, r) in curve.rows.iter().enumerate() {
        w.write_record([
            r.lambda.to_string(),
            r.accuracy.mean.to_string(),
            r.accuracy.std_error.to_string(),
            r.f1.mean.to_string(),
            r.f1.std_error.to_string(),
            r.mean_cost.mean.to_string(),
            r.mean_cost.std_error.to_string(),
            r.mean_stages.mean.to_string(),
            r.mean_stages.std_error.to_string(),
            opt(r.seconds_per_instance.map(|s| s.mean)),
            opt(r.seconds_per_instance.map(|s| s.std_error)),
            (i == curve.best).to_string(),
        ])
        .map_err(|e| csv_error(&sweep, e))?;
    }
    w.flush().map_err(|e| CascadeError::io(&sweep, e))?;

    let mut w = csv_writer(&folds)?;
    w.write_record([
        "lambda",
        "fold",
        "n",
        "accuracy",
        "f1",
        "precision",
        "recall",
        "mean_cost",
        "mean_stages",
        "seconds",
        "final_objective",
    ])
    .map_err(|e| csv_error(&folds, e))?;
    for r in &curve.rows {
        for f in &r.folds {
            let m = &f.metrics;
            w.write_record([
                r.lambda.to_string(),
                f.fold.to_string(),
                m.n.to_string(),
                m.accuracy.to_string(),
                m.f1.to_string(),
                m.precision.to_string(),
                m.recall.to_string(),
                m.mean_cost.to_string(),
                m.mean_stages_executed.to_string(),
                opt(f.seconds_per_instance),
                f.final_objective.to_string(),
            ])
            .map_err(|e| csv_error(&folds, e))?;
        }
    }
    w.flush().map_err(|e| CascadeError::io(&folds, e))?;

    let mut w = csv_writer(&stages)?;
    w.write_record(["lambda", "fold", "device", "stage", "executed", "passed"]).map_err(|e| csv_error(&stages, e))?;
    for r in &curve.rows {
        for f in &r.folds {
            for c in &f.metrics.stage_counts {
                w.write_record([
                    r.lambda.to_string(),
                    f.fold.to_string(),
                    c.device.to_string(),
                    c.stage.to_string(),
                    c.executed.to_string(),
                    c.passed.to_string(),
                ])
                .map_err(|e| csv_error(&stages, e))?;
            }
        }
    }
    w.flush().map_err(|e| CascadeError::io(&stages, e))
}

/// Gating used for training: hard gating has no gradient, so it is trained
/// with a steep finite surrogate. Evaluation is always hard.
pub fn training_gating(requested: Gating, family: Family) -> (Gating, Option<String>) {
    match (requested, family) {
        (Gating::Hard, Family::Firm) => (
            Gating::Finite(HARD_SURROGATE_ALPHA),
            Some(format!(
                "alpha=inf requested: trained with alpha={HARD_SURROGATE_ALPHA} and evaluated with hard gating"
            )),
        ),
        _ => (requested, None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions<'a> {
    /// Train folds on the rayon pool.
    pub parallel: bool,
    /// Directory that receives `partial.json` after each completed grid
    /// point, so a failure keeps the finished rows.
    pub partial_dir: Option<&'a Path>,
}

fn attribute(e: CascadeError, lambda: f64) -> CascadeError {
    match e {
        CascadeError::Training { stage, epoch, message } => {
            CascadeError::Training { stage, epoch, message: format!("lambda={lambda}: {message}") }
        }
        other => other,
    }
}

/// Cross-validated lambda sweep described by `cfg`, evaluated in hard mode.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with(cfg, RunOptions { parallel: true, partial_dir: None })
}

pub fn run_experiment_with(cfg: &ExperimentConfig, opts: RunOptions<'_>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let arch = cfg.load_architecture()?;
    let data = cfg.load_dataset()?;
    run_on(cfg, arch, &data, opts)
}

/// [`run_experiment_with`] over an already loaded architecture and dataset.
pub fn run_on(
    cfg: &ExperimentConfig,
    mut arch: CascadeArchitecture,
    data: &Dataset,
    opts: RunOptions<'_>,
) -> Result<ExperimentReport> {
    let requested = cfg.gating_or(arch.gating);
    let (trained_gating, note) = training_gating(requested, cfg.family);
    arch.gating = trained_gating;
    arch = arch.with_resolved_costs();
    let train_cfg = cfg.train_config(0.0, trained_gating);
    let sweep_opts = SweepOptions {
        folds: cfg.folds,
        fold_seed: cfg.seed,
        timing_repetitions: cfg.timing_repetitions,
        parallel: opts.parallel,
    };
    let mut rows = Vec::with_capacity(cfg.lambda_grid.len());
    for &lambda in &cfg.lambda_grid {
        let curve = lambda_sweep(&arch, data, &[lambda], &train_cfg, &sweep_opts).map_err(|e| attribute(e, lambda))?;
        rows.extend(curve.rows);
        if let Some(dir) = opts.partial_dir {
            let partial = TradeoffCurve { best: best_index(&rows), rows: rows.clone() };
            std::fs::create_dir_all(dir).map_err(|e| CascadeError::io(dir, e))?;
            let path = dir.join("partial.json");
            let text = serde_json::to_string_pretty(&partial)?;
            std::fs::write(&path, text).map_err(|e| CascadeError::io(&path, e))?;
        }
    }
    let curve = TradeoffCurve { best: best_index(&rows), rows };
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        toolkit_version: TOOLKIT_VERSION.to_owned(),
        config: cfg.clone(),
        best: BestPoint::of(curve.best_row()),
        architecture: arch,
        dataset: DatasetSummary::of(data),
        trained_gating,
        curve,
        paired_tests: Vec::new(),
        notes: note.into_iter().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub n: usize,
    pub mean_difference: f64,
    pub t: f64,
    /// Two-sided p-value.
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTest {
    pub name: String,
    pub test: TTest,
}

/// Paired t-test on `a - b` with `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(CascadeError::Input(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(CascadeError::Degenerate("paired t-test needs at least two pairs".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(CascadeError::Input("paired samples must be finite".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // Differences equal up to rounding count as constant.
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var.sqrt() <= 1e-12 * scale.max(f64::MIN_POSITIVE) || var == 0.0 {
        return Err(CascadeError::Degenerate("differences have zero variance".into()));
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| CascadeError::Degenerate(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { n: d.len(), mean_difference: mean, t, p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: Gating,
    pub trained_alpha: Gating,
    pub best_lambda: f64,
    pub accuracy: MeanSe,
    pub f1: MeanSe,
    pub mean_cost: MeanSe,
    pub mean_stages: MeanSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaStudy {
    pub rows: Vec<AlphaRow>,
    pub notes: Vec<String>,
}

/// `{2^i : -2 <= i <= 10} U {inf}`.
pub fn default_alpha_set() -> Vec<Gating> {
    (-2..=10).map(|i| Gating::Finite(2f64.powi(i))).chain(std::iter::once(Gating::Hard)).collect()
}

/// One full sweep per alpha; each row reports that sweep's best point.
pub fn alpha_sensitivity(cfg: &ExperimentConfig, alphas: &[Gating], opts: RunOptions<'_>) -> Result<AlphaStudy> {
    if alphas.is_empty() {
        return Err(CascadeError::Config("alpha set is empty".into()));
    }
    cfg.validate()?;
    let arch = cfg.load_architecture()?;
    let data = cfg.load_dataset()?;
    let mut study = AlphaStudy { rows: Vec::new(), notes: Vec::new() };
    for &alpha in alphas {
        alpha.validate()?;
        let run_cfg = ExperimentConfig { alpha: Some(alpha), ..cfg.clone() };
        let report = run_on(&run_cfg, arch.clone(), &data, RunOptions { partial_dir: None, ..opts })?;
        study.notes.extend(report.notes);
        let b = &report.best;
        study.rows.push(AlphaRow {
            alpha,
            trained_alpha: report.trained_gating,
            best_lambda: b.lambda,
            accuracy: b.accuracy,
            f1: b.f1,
            mean_cost: b.mean_cost,
            mean_stages: b.mean_stages,
        });
    }
    Ok(study)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyComparison {
    pub firm: ExperimentReport,
    pub soft: ExperimentReport,
    /// Firm minus soft per-fold mean cost at the two best points.
    pub cost_test: Option<TTest>,
    /// Firm minus soft per-fold accuracy at the two best points.
    pub accuracy_test: Option<TTest>,
    pub notes: Vec<String>,
}

/// Runs `cfg` under both families on identical folds and compares their
/// best-accuracy points fold by fold.
pub fn compare_families(cfg: &ExperimentConfig, opts: RunOptions<'_>) -> Result<FamilyComparison> {
    cfg.validate()?;
    let arch = cfg.load_architecture()?;
    let data = cfg.load_dataset()?;
    compare_families_on(cfg, &arch, &data, opts)
}

pub fn compare_families_on(
    cfg: &ExperimentConfig,
    arch: &CascadeArchitecture,
    data: &Dataset,
    opts: RunOptions<'_>,
) -> Result<FamilyComparison> {
    let run = |family| {
        let c = ExperimentConfig { family, ..cfg.clone() };
        run_on(&c, arch.clone(), data, RunOptions { partial_dir: None, ..opts })
    };
    let firm = run(Family::Firm)?;
    let soft = run(Family::Soft)?;
    let per_fold = |r: &ExperimentReport, f: fn(&crate::inference::Metrics) -> f64| -> Vec<f64> {
        r.curve.best_row().folds.iter().map(|x| f(&x.metrics)).collect()
    };
    let mut notes = Vec::new();
    let mut test = |name: &str, f: fn(&crate::inference::Metrics) -> f64| match paired_t_test(
        &per_fold(&firm, f),
        &per_fold(&soft, f),
    ) {
        Ok(t) => Some(t),
        Err(e) => {
            notes.push(format!("{name}: {e}"));
            None
        }
    };
    let cost_test = test("mean_cost", |m| m.mean_cost);
    let accuracy_test = test("accuracy", |m| m.accuracy);
    Ok(FamilyComparison { firm, soft, cost_test, accuracy_test, notes })
}
