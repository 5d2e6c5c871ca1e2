//! Deployment semantics: hard `p > 0.5` decisions with early exit, logical
//! AND across branch devices, and per-instance cost accounting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CascadeError, Result, StageCoord};
use crate::graph::{CascadeArchitecture, CascadeMode};
use crate::objective::ParameterSet;
use crate::stage::ForwardCache;
use crate::training::TrainedModel;

/// What happened to one instance in hard mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardDecisionTrace {
    pub label: u8,
    pub score: f64,
    /// Stages in execution order; branch devices run before the root.
    pub executed: Vec<StageCoord>,
    /// Whether each executed stage let the instance through, aligned with
    /// `executed`.
    pub passed: Vec<bool>,
    pub cost: f64,
    pub rejected_at: Option<StageCoord>,
}

/// Reusable per-stage buffers so repeated predictions do not allocate
/// activations.
pub struct Scratch {
    caches: Vec<ForwardCache>,
    slot: Vec<Vec<Option<usize>>>,
}

impl Scratch {
    pub fn new(arch: &CascadeArchitecture) -> Self {
        let mut slot: Vec<Vec<Option<usize>>> =
            (0..=arch.device_count()).map(|d| vec![None; arch.device(d).len()]).collect();
        let coords = arch.trainable_coords();
        for (i, c) in coords.iter().enumerate() {
            slot[c.device][c.stage] = Some(i);
        }
        Scratch { caches: vec![ForwardCache::default(); coords.len()], slot }
    }
}

struct Runner<'a> {
    arch: &'a CascadeArchitecture,
    params: &'a ParameterSet,
    x: &'a [f64],
    trace: HardDecisionTrace,
}

impl Runner<'_> {
    fn stage(&mut self, scratch: &mut Scratch, at: StageCoord) -> Result<f64> {
        let i =
            scratch.slot[at.device][at.stage].ok_or_else(|| CascadeError::Structural(format!("no model at {at}")))?;
        let p = self.params.stages[i].forward_cached(self.x, &mut scratch.caches[i])?;
        self.trace.executed.push(at);
        self.trace.passed.push(p > 0.5);
        self.trace.cost += self.arch.spec(at).cost();
        Ok(p)
    }

    /// Runs stages `from..` of `device` with early exit. Returns whether every
    /// stage passed, and the last probability seen.
    fn chain(&mut self, scratch: &mut Scratch, device: usize, from: usize) -> Result<(bool, f64, Option<StageCoord>)> {
        let mut last = f64::NAN;
        for stage in from..self.arch.device(device).len() {
            let at = StageCoord { device, stage };
            last = self.stage(scratch, at)?;
            if last <= 0.5 {
                return Ok((false, last, Some(at)));
            }
        }
        Ok((true, last, None))
    }
}

pub fn predict_hard_with(
    arch: &CascadeArchitecture,
    params: &ParameterSet,
    x: &[f64],
    scratch: &mut Scratch,
) -> Result<HardDecisionTrace> {
    let mut run = Runner {
        arch,
        params,
        x,
        trace: HardDecisionTrace {
            label: 0,
            score: f64::NAN,
            executed: Vec::with_capacity(arch.total_stage_count()),
            passed: Vec::with_capacity(arch.total_stage_count()),
            cost: 0.0,
            rejected_at: None,
        },
    };
    let root = arch.root_device();
    match arch.mode {
        CascadeMode::Linear => {
            let (passed, p, rejected) = run.chain(scratch, root, 0)?;
            run.trace.label = passed as u8;
            run.trace.score = p;
            run.trace.rejected_at = rejected;
        }
        CascadeMode::Tree => {
            // Every branch runs: the devices are physically parallel.
            let mut all_passed = true;
            let mut product = 1.0;
            for d in 0..arch.device_count() {
                let (passed, p, rejected) = run.chain(scratch, d, 0)?;
                product *= p;
                if !passed && all_passed {
                    all_passed = false;
                    run.trace.rejected_at = rejected;
                }
            }
            let combiner = StageCoord { device: root, stage: 0 };
            run.trace.executed.push(combiner);
            run.trace.passed.push(all_passed);
            run.trace.cost += arch.spec(combiner).cost();
            if !all_passed {
                run.trace.label = 0;
                run.trace.score = product;
            } else if arch.root.len() == 1 {
                run.trace.label = 1;
                run.trace.score = product;
            } else {
                let (passed, p, rejected) = run.chain(scratch, root, 1)?;
                run.trace.label = passed as u8;
                run.trace.score = p;
                run.trace.rejected_at = rejected;
            }
        }
    }
    Ok(run.trace)
}

pub fn predict_hard(model: &TrainedModel, x: &[f64]) -> Result<HardDecisionTrace> {
    let mut scratch = Scratch::new(&model.arch);
    predict_hard_with(&model.arch, &model.params, x, &mut scratch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// How many instances reached and passed each stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub device: usize,
    pub stage: usize,
    pub executed: usize,
    pub passed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_cost: f64,
    pub mean_stages_executed: f64,
    pub stage_counts: Vec<StageCount>,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn from_traces(arch: &CascadeArchitecture, labels: &[u8], traces: &[HardDecisionTrace]) -> Result<Self> {
        if traces.is_empty() {
            return Err(CascadeError::Input("cannot evaluate on an empty dataset".into()));
        }
        let mut counts: Vec<StageCount> =
            arch.coords().map(|c| StageCount { device: c.device, stage: c.stage, executed: 0, passed: 0 }).collect();
        let index_of = |c: StageCoord| counts_index(arch, c);
        let mut conf = Confusion::default();
        let (mut cost, mut stages) = (0.0, 0usize);
        for (t, &y) in traces.iter().zip(labels) {
            match (t.label, y) {
                (1, 1) => conf.tp += 1,
                (1, _) => conf.fp += 1,
                (_, 1) => conf.fn_ += 1,
                _ => conf.tn += 1,
            }
            cost += t.cost;
            stages += t.executed.len();
            for (&c, &ok) in t.executed.iter().zip(&t.passed) {
                let entry = &mut counts[index_of(c)];
                entry.executed += 1;
                entry.passed += ok as usize;
            }
        }
        let n = traces.len();
        let precision = ratio(conf.tp, conf.tp + conf.fp);
        let recall = ratio(conf.tp, conf.tp + conf.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Ok(Metrics {
            n,
            accuracy: (conf.tp + conf.tn) as f64 / n as f64,
            precision,
            recall,
            f1,
            mean_cost: cost / n as f64,
            mean_stages_executed: stages as f64 / n as f64,
            stage_counts: counts,
            confusion: conf,
        })
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn counts_index(arch: &CascadeArchitecture, c: StageCoord) -> usize {
    (0..c.device).map(|d| arch.device(d).len()).sum::<usize>() + c.stage
}

/// Hard-mode metrics over every row of `data`.
pub fn evaluate(model: &TrainedModel, data: &Dataset) -> Result<Metrics> {
    let traces = predict_all(model, data)?;
    Metrics::from_traces(&model.arch, data.labels(), &traces)
}

pub fn predict_all(model: &TrainedModel, data: &Dataset) -> Result<Vec<HardDecisionTrace>> {
    if data.is_empty() {
        return Err(CascadeError::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut scratch = Scratch::new(&model.arch);
    (0..data.len()).map(|r| predict_hard_with(&model.arch, &model.params, data.row(r), &mut scratch)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_seconds: f64,
    pub std_error: f64,
    pub repetitions: usize,
}

/// Times `repetitions` single-instance hard-mode classifications on the
/// calling thread, cycling through the rows of `data`.
pub fn time_harness(model: &TrainedModel, data: &Dataset, repetitions: usize) -> Result<Timing> {
    let rows: Vec<usize> = (0..data.len()).collect();
    time_rows(model, data, &rows, repetitions)
}

/// [`time_harness`] restricted to the given rows.
pub fn time_rows(model: &TrainedModel, data: &Dataset, rows: &[usize], repetitions: usize) -> Result<Timing> {
    if repetitions == 0 {
        return Err(CascadeError::Input("repetitions must be at least 1".into()));
    }
    if rows.is_empty() {
        return Err(CascadeError::Input("nothing to time".into()));
    }
    let mut scratch = Scratch::new(&model.arch);
    // warm-up pass
    for &r in rows.iter().take(16) {
        std::hint::black_box(predict_hard_with(&model.arch, &model.params, data.row(r), &mut scratch)?);
    }
    let mut samples = Vec::with_capacity(repetitions);
    for i in 0..repetitions {
        let x = data.row(rows[i % rows.len()]);
        let start = Instant::now();
        let t = predict_hard_with(&model.arch, &model.params, std::hint::black_box(x), &mut scratch)?;
        std::hint::black_box(t);
        samples.push(start.elapsed().as_secs_f64());
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std_error = if samples.len() > 1 {
        (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(Timing { mean_seconds: mean, std_error, repetitions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::{logit, Gating};
    use crate::stage::{StageModel, StageSpec};
    use crate::training::TrainConfig;

    /// Linear stage on feature `j` with weight 1 and zero bias: emits
    /// `logistic(x_j)`, so a row of logits dictates every stage probability.
    pub(crate) fn probe_stage(j: usize, cost: f64) -> StageSpec {
        StageSpec::linear(vec![j], cost)
    }

    pub(crate) fn probe_model(arch: CascadeArchitecture) -> TrainedModel {
        let stages = arch
            .trainable_coords()
            .into_iter()
            .map(|c| StageModel::new(arch.spec(c).clone(), vec![1.0, 0.0]).unwrap())
            .collect();
        TrainedModel {
            schema_version: 1,
            params: ParameterSet { stages },
            arch,
            history: vec![],
            config: TrainConfig::default(),
        }
    }

    fn logits(probs: &[f64]) -> Vec<f64> {
        probs.iter().map(|&p| logit(p)).collect()
    }

    #[test]
    fn linear_early_exit() {
        let arch = CascadeArchitecture::linear(
            vec![probe_stage(0, 1.0), probe_stage(1, 2.0), probe_stage(2, 4.0)],
            Gating::default(),
        );
        let model = probe_model(arch);
        let t = predict_hard(&model, &logits(&[0.7, 0.4, 0.9])).unwrap();
        assert_eq!(t.label, 0);
        assert!((t.score - 0.4).abs() < 1e-12);
        assert_eq!(t.cost, 3.0);
        assert_eq!(t.rejected_at, Some(StageCoord { device: 0, stage: 1 }));
        assert_eq!(t.executed.len(), 2);

        let t = predict_hard(&model, &logits(&[0.7, 0.6, 0.9])).unwrap();
        assert_eq!((t.label, t.cost, t.rejected_at), (1, 7.0, None));

        let t = predict_hard(&model, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!((t.label, t.executed.len(), t.score), (0, 1, 0.5));
    }

    #[test]
    fn tree_branch_rejection() {
        let arch = CascadeArchitecture::tree(
            vec![vec![probe_stage(0, 1.0)], vec![probe_stage(1, 1.0)]],
            vec![StageSpec::combiner(1.0), probe_stage(2, 10.0)],
            Gating::default(),
        );
        let model = probe_model(arch);
        let t = predict_hard(&model, &logits(&[0.9, 0.3, 0.99])).unwrap();
        assert_eq!(t.label, 0);
        assert!((t.score - 0.27).abs() < 1e-12);
        assert_eq!(t.cost, 3.0);
        assert_eq!(t.rejected_at, Some(StageCoord { device: 1, stage: 0 }));

        let t = predict_hard(&model, &logits(&[0.9, 0.8, 0.99])).unwrap();
        assert_eq!((t.label, t.cost), (1, 13.0));
        assert!((t.score - 0.99).abs() < 1e-12);
    }

    #[test]
    fn metrics_basic() {
        let arch = CascadeArchitecture::linear(vec![probe_stage(0, 2.5)], Gating::default());
        let model = probe_model(arch);
        // perfect predictor: the logit feature agrees with the label
        let data = Dataset::new(vec![3.0, -3.0, 2.0, -1.0], 1, vec![1, 0, 1, 0]).unwrap();
        let m = evaluate(&model, &data).unwrap();
        assert_eq!((m.accuracy, m.f1, m.mean_cost), (1.0, 1.0, 2.5));

        // all-negative predictor on 10% positives
        let labels: Vec<u8> = (0..100).map(|i| (i < 10) as u8).collect();
        let data = Dataset::new(vec![-1.0; 100], 1, labels).unwrap();
        let m = evaluate(&model, &data).unwrap();
        assert!((m.accuracy - 0.9).abs() < 1e-15);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.stage_counts[0].executed, 100);
        assert_eq!(m.stage_counts[0].passed, 0);

        let empty = Dataset::new(vec![], 1, vec![]).unwrap();
        assert!(matches!(evaluate(&model, &empty), Err(CascadeError::Input(_))));
    }

    #[test]
    fn tree_pass_counts() {
        let arch = CascadeArchitecture::tree(
            vec![vec![probe_stage(0, 1.0)], vec![probe_stage(1, 1.0)]],
            vec![StageSpec::combiner(1.0), probe_stage(2, 10.0)],
            Gating::default(),
        );
        let model = probe_model(arch);
        let rows = [[0.9, 0.3, 0.9], [0.9, 0.8, 0.2], [0.2, 0.8, 0.9], [0.6, 0.6, 0.6]];
        let f: Vec<f64> = rows.iter().flat_map(|r| logits(r)).collect();
        let data = Dataset::new(f, 3, vec![0, 0, 0, 1]).unwrap();
        let m = evaluate(&model, &data).unwrap();
        let passed: Vec<usize> = m.stage_counts.iter().map(|c| c.passed).collect();
        let executed: Vec<usize> = m.stage_counts.iter().map(|c| c.executed).collect();
        assert_eq!(executed, vec![4, 4, 4, 2]);
        assert_eq!(passed, vec![3, 3, 2, 1]);
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn ties_reject_at_first_stage() {
        let arch = CascadeArchitecture::linear((0..3).map(|j| probe_stage(j, 1.0)).collect(), Gating::default());
        let t = predict_hard(&probe_model(arch), &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!((t.label, t.score, t.cost), (0, 0.5, 1.0));
        assert_eq!(t.rejected_at, Some(StageCoord { device: 0, stage: 0 }));
    }

    #[test]
    fn single_stage_mean_cost_is_its_cost() {
        let arch = CascadeArchitecture::linear(vec![probe_stage(0, 7.25)], Gating::default());
        let data = Dataset::new(vec![1.0, -2.0, 0.5], 1, vec![1, 0, 0]).unwrap();
        assert_eq!(evaluate(&probe_model(arch), &data).unwrap().mean_cost, 7.25);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use proptest::collection::vec;

        /// Architecture whose k-th trainable stage reads feature k, with its
        /// stage count; `shape` is the branch lengths (empty for linear).
        fn build(shape: &[usize], root_len: usize, costs: &[f64]) -> (CascadeArchitecture, usize) {
            let mut next = 0;
            let mut stage = || {
                let s = probe_stage(next, costs[next % costs.len()]);
                next += 1;
                s
            };
            let arch = if shape.is_empty() {
                CascadeArchitecture::linear((0..root_len).map(|_| stage()).collect(), Gating::default())
            } else {
                let branches: Vec<Vec<StageSpec>> = shape.iter().map(|&l| (0..l).map(|_| stage()).collect()).collect();
                let mut root = vec![StageSpec::combiner(0.5)];
                root.extend((1..root_len).map(|_| stage()));
                CascadeArchitecture::tree(branches, root, Gating::default())
            };
            (arch, next)
        }

        proptest! {
            #[test]
            fn trace_invariants(
                shape in vec(1usize..=3, 0..=3),
                root_len in 1usize..=4,
                costs in vec(0.1f64..10.0, 1..=6),
                probs in vec(0.01f64..0.99, 16),
            ) {
                let (arch, n) = build(&shape, root_len, &costs);
                let model = probe_model(arch.clone());
                let x = logits(&probs[..n]);
                let t = predict_hard(&model, &x).unwrap();

                let spent: f64 = t.executed.iter().map(|&c| arch.spec(c).cost()).sum();
                prop_assert_eq!(t.cost, spent);
                prop_assert_eq!(t.executed.len(), t.passed.len());
                if t.label == 1 {
                    prop_assert!(t.rejected_at.is_none());
                    prop_assert!(t.passed.iter().all(|&p| p));
                }
                if let Some(r) = t.rejected_at {
                    // nothing later on the rejecting device ran
                    prop_assert!(!t.executed.iter().any(|c| c.device == r.device && c.stage > r.stage));
                    prop_assert_eq!(t.label, 0);
                }
                if !shape.is_empty() {
                    // every branch stage before a rejection and the combiner always run
                    let combiner = StageCoord { device: arch.root_device(), stage: 0 };
                    prop_assert!(t.executed.contains(&combiner));
                }
            }
        }
    }
}
