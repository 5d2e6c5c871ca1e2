//! Training objectives and their exact gradients.
//!
//! The per-instance objective is `log-likelihood(y, P*) - lambda * r(x)`,
//! summed over a batch (higher is better). `P*` is the combined cascade
//! output and `r` the expected-cost regularizer. The firm family combines
//! with gated mixtures and charges cost through `g_alpha`; the soft family
//! combines with the noisy-AND product and charges cost through raw
//! probabilities.
//!
//! Gradients are computed per instance in two steps: the derivative of the
//! objective with respect to every stage probability (closed form along the
//! back-to-front chain recursions), then backpropagation through each stage
//! model.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{CascadeError, Result};
use crate::gating::Gating;
use crate::graph::{CascadeArchitecture, CascadeMode};
use crate::stage::{ForwardCache, StageModel};

pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Firm,
    Soft,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Firm => "firm",
            Family::Soft => "soft",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub gating: Gating,
    pub family: Family,
}

impl ObjectiveConfig {
    pub fn firm(lambda: f64, gating: Gating) -> Self {
        ObjectiveConfig { lambda, gating, family: Family::Firm }
    }

    pub fn soft(lambda: f64) -> Self {
        ObjectiveConfig { lambda, gating: Gating::default(), family: Family::Soft }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(CascadeError::Config(format!("lambda must be finite and non-negative, got {}", self.lambda)));
        }
        self.gating.validate()
    }

    fn gate(&self) -> Gate {
        match self.family {
            Family::Firm => Gate::Firm(self.gating),
            Family::Soft => Gate::Identity,
        }
    }
}

/// Gate applied to stage probabilities when routing mass and charging cost.
#[derive(Debug, Clone, Copy)]
pub enum Gate {
    Firm(Gating),
    Identity,
}

impl Gate {
    #[inline]
    fn value(&self, p: f64) -> f64 {
        match self {
            Gate::Firm(g) => g.gate(p),
            Gate::Identity => p,
        }
    }

    #[inline]
    fn deriv(&self, p: f64) -> f64 {
        match self {
            Gate::Firm(g) => g.gate_deriv(p),
            Gate::Identity => 1.0,
        }
    }
}

/// Trainable parameters, one [`StageModel`] per entry of
/// [`CascadeArchitecture::trainable_coords`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub stages: Vec<StageModel>,
}

/// Gradients with the same layout as a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub stages: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        GradientSet { stages: params.stages.iter().map(|m| vec![0.0; m.params.len()]).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.stages.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

impl ParameterSet {
    pub fn init(arch: &CascadeArchitecture, seed: u64) -> Result<Self> {
        let stages = arch
            .trainable_coords()
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                StageModel::init(arch.spec(c).clone(), seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParameterSet { stages })
    }

    /// Checks that the models match the architecture stage for stage.
    pub fn check(&self, arch: &CascadeArchitecture) -> Result<()> {
        let coords = arch.trainable_coords();
        if coords.len() != self.stages.len() {
            return Err(CascadeError::Structural(format!(
                "architecture has {} trainable stages, parameter set has {}",
                coords.len(),
                self.stages.len()
            )));
        }
        for (c, m) in coords.iter().zip(&self.stages) {
            let spec = arch.spec(*c);
            if spec.kind != m.spec.kind
                || spec.hidden_sizes != m.spec.hidden_sizes
                || spec.feature_mask != m.spec.feature_mask
                || spec.basis != m.spec.basis
                || m.params.len() != spec.param_count()
            {
                return Err(CascadeError::Structural(format!("model at {c} does not match its stage spec")));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().map(|m| m.params.len()).sum()
    }
}

/// `y log p + (1 - y) log(1 - p)` with `p` clamped inside the logs.
pub fn cross_entropy(y: u8, p_star: f64) -> Result<f64> {
    if y > 1 {
        return Err(CascadeError::Input(format!("label must be 0 or 1, got {y}")));
    }
    if !p_star.is_finite() {
        return Err(CascadeError::Input(format!("probability is not finite: {p_star}")));
    }
    Ok(log_likelihood(y, p_star))
}

#[inline]
fn log_likelihood(y: u8, p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        p.ln()
    } else {
        (1.0 - p).ln()
    }
}

/// `d/dp` of [`log_likelihood`]; zero where the clamp is active.
#[inline]
fn log_likelihood_deriv(y: u8, p: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    if y == 1 {
        1.0 / p
    } else {
        -1.0 / (1.0 - p)
    }
}

/// Firm chain `S_1` and `dS_1/dp_l` for every stage.
fn firm_chain(probs: &[f64], gate: Gate) -> (f64, Vec<f64>) {
    let n = probs.len();
    let mut s = vec![0.0; n];
    s[n - 1] = probs[n - 1];
    for l in (0..n - 1).rev() {
        let g = gate.value(probs[l]);
        s[l] = (1.0 - g) * probs[l] + g * s[l + 1];
    }
    let mut d = vec![0.0; n];
    let mut prefix = 1.0;
    for l in 0..n - 1 {
        let g = gate.value(probs[l]);
        d[l] = prefix * ((1.0 - g) + gate.deriv(probs[l]) * (s[l + 1] - probs[l]));
        prefix *= g;
    }
    d[n - 1] = prefix;
    (s[0], d)
}

/// `prod_l x_l` and the products leaving each factor out.
fn product_chain(xs: &[f64]) -> (f64, Vec<f64>) {
    let n = xs.len();
    let mut out = vec![1.0; n];
    let mut acc = 1.0;
    for i in 0..n {
        out[i] = acc;
        acc *= xs[i];
    }
    let mut suffix = 1.0;
    for i in (0..n).rev() {
        out[i] *= suffix;
        suffix *= xs[i];
    }
    (acc, out)
}

/// `k_1 + sum_{l>=2} k_l prod_{k<l} G(p_k)` and its derivative in each `p_l`.
fn cost_chain(probs: &[f64], costs: &[f64], gate: Gate) -> (f64, Vec<f64>) {
    let n = probs.len();
    let mut r = vec![0.0; n];
    r[n - 1] = costs[n - 1];
    for l in (0..n - 1).rev() {
        r[l] = costs[l] + gate.value(probs[l]) * r[l + 1];
    }
    let mut d = vec![0.0; n];
    let mut prefix = 1.0;
    for l in 0..n - 1 {
        d[l] = prefix * gate.deriv(probs[l]) * r[l + 1];
        prefix *= gate.value(probs[l]);
    }
    (r[0], d)
}

fn check_lists(probs: &[f64], costs: &[f64]) -> Result<()> {
    if probs.is_empty() || probs.len() != costs.len() {
        return Err(CascadeError::Structural(format!(
            "need equal, non-empty probability and cost lists ({} vs {})",
            probs.len(),
            costs.len()
        )));
    }
    Ok(())
}

/// `k_1 + sum_{l>=2} k_l prod_{k<l} g(p_k)`.
pub fn regularizer_linear_firm(stage_probs: &[f64], costs: &[f64], gating: Gating) -> Result<f64> {
    check_lists(stage_probs, costs)?;
    gating.validate()?;
    Ok(cost_chain(stage_probs, costs, Gate::Firm(gating)).0)
}

/// [`regularizer_linear_firm`] with the gate replaced by the identity.
pub fn regularizer_linear_soft(stage_probs: &[f64], costs: &[f64]) -> Result<f64> {
    check_lists(stage_probs, costs)?;
    Ok(cost_chain(stage_probs, costs, Gate::Identity).0)
}

/// Per-device inputs of the tree regularizer.
#[derive(Debug, Clone)]
pub struct TreeCostInputs<'a> {
    /// Stage probabilities of every branch device.
    pub branch_stage_probs: &'a [Vec<f64>],
    /// Branch outputs `p_*^d`.
    pub branch_outputs: &'a [f64],
    /// Probabilities of root stages 2..L (the combiner has none).
    pub root_stage_probs: &'a [f64],
    pub branch_costs: &'a [Vec<f64>],
    /// Root costs including the combiner's.
    pub root_costs: &'a [f64],
}

fn tree_cost(inputs: &TreeCostInputs<'_>, gate: Gate) -> Result<f64> {
    let TreeCostInputs { branch_stage_probs, branch_outputs, root_stage_probs, branch_costs, root_costs } = *inputs;
    if branch_stage_probs.is_empty()
        || branch_stage_probs.len() != branch_outputs.len()
        || branch_costs.len() != branch_outputs.len()
        || root_costs.len() != root_stage_probs.len() + 1
    {
        return Err(CascadeError::Structural("tree regularizer inputs have inconsistent shapes".into()));
    }
    let mut total = 0.0;
    for (p, k) in branch_stage_probs.iter().zip(branch_costs) {
        check_lists(p, k)?;
        total += cost_chain(p, k, gate).0;
    }
    total += root_costs[0];
    if !root_stage_probs.is_empty() {
        let branch_gate: f64 = branch_outputs.iter().map(|&p| gate.value(p)).product();
        total += branch_gate * cost_chain(root_stage_probs, &root_costs[1..], gate).0;
    }
    Ok(total)
}

/// Branch terms as in the linear regularizer, the combiner cost
/// unconditionally, then root stage `l >= 2` charged with
/// `prod_d g(p_*^d) prod_{k=2}^{l-1} g(p_k)`.
pub fn regularizer_tree_firm(inputs: &TreeCostInputs<'_>, gating: Gating) -> Result<f64> {
    gating.validate()?;
    tree_cost(inputs, Gate::Firm(gating))
}

pub fn regularizer_tree_soft(inputs: &TreeCostInputs<'_>) -> Result<f64> {
    tree_cost(inputs, Gate::Identity)
}

/// Stage probabilities of one instance laid out by device; the combiner
/// slot of a tree root is unused.
#[derive(Debug, Clone)]
struct InstanceProbs {
    devices: Vec<Vec<f64>>,
}

/// `P*`, `r` and their derivatives for one instance, keyed like
/// [`InstanceProbs`].
struct InstanceTerms {
    p_star: f64,
    reg: f64,
    d_p: Vec<Vec<f64>>,
    d_r: Vec<Vec<f64>>,
}

fn costs_of(arch: &CascadeArchitecture, device: usize) -> Vec<f64> {
    arch.device(device).iter().map(|s| s.cost()).collect()
}

fn instance_terms(arch: &CascadeArchitecture, probs: &InstanceProbs, cfg: &ObjectiveConfig) -> InstanceTerms {
    let gate = cfg.gate();
    let root = arch.root_device();
    let mut d_p: Vec<Vec<f64>> = probs.devices.iter().map(|d| vec![0.0; d.len()]).collect();
    let mut d_r = d_p.clone();

    match arch.mode {
        CascadeMode::Linear => {
            let p = &probs.devices[root];
            let (p_star, dp) = match cfg.family {
                Family::Firm => firm_chain(p, gate),
                Family::Soft => product_chain(p),
            };
            let (reg, dr) = cost_chain(p, &costs_of(arch, root), gate);
            d_p[root] = dp;
            d_r[root] = dr;
            InstanceTerms { p_star, reg, d_p, d_r }
        }
        CascadeMode::Tree => {
            let n_branches = arch.device_count();
            // branch outputs and their derivatives w.r.t. branch stage probs
            let mut outputs = Vec::with_capacity(n_branches);
            let mut d_outputs = Vec::with_capacity(n_branches);
            for d in 0..n_branches {
                let (o, dd) = match cfg.family {
                    Family::Firm => firm_chain(&probs.devices[d], gate),
                    Family::Soft => product_chain(&probs.devices[d]),
                };
                outputs.push(o);
                d_outputs.push(dd);
            }
            let root_probs = &probs.devices[root][1..];
            let root_costs = costs_of(arch, root);

            let (q, q_except) = product_chain(&outputs);
            let gates: Vec<f64> = outputs.iter().map(|&p| gate.value(p)).collect();
            let (branch_gate, gate_except) = product_chain(&gates);

            // output
            let mut d_out_branch = vec![0.0; n_branches];
            let p_star = match cfg.family {
                Family::Firm => {
                    if root_probs.is_empty() {
                        d_out_branch.copy_from_slice(&q_except);
                        q
                    } else {
                        let (s2, ds2) = firm_chain(root_probs, gate);
                        let gq = gate.value(q);
                        let d_q = (1.0 - branch_gate) + branch_gate * gate.deriv(q) * s2;
                        let d_bg = -q + gq * s2;
                        for d in 0..n_branches {
                            d_out_branch[d] = d_q * q_except[d] + d_bg * gate.deriv(outputs[d]) * gate_except[d];
                        }
                        for (slot, v) in d_p[root][1..].iter_mut().zip(ds2) {
                            *slot = branch_gate * gq * v;
                        }
                        (1.0 - branch_gate) * q + branch_gate * gq * s2
                    }
                }
                Family::Soft => {
                    let (rp, rp_except) = product_chain(root_probs);
                    for d in 0..n_branches {
                        d_out_branch[d] = q_except[d] * rp;
                    }
                    for (slot, v) in d_p[root][1..].iter_mut().zip(rp_except) {
                        *slot = q * v;
                    }
                    q * rp
                }
            };
            for d in 0..n_branches {
                d_p[d] = d_outputs[d].iter().map(|v| v * d_out_branch[d]).collect();
            }

            // regularizer
            let mut reg = root_costs[0];
            let mut d_reg_output = vec![0.0; n_branches];
            if !root_probs.is_empty() {
                let (r2, dr2) = cost_chain(root_probs, &root_costs[1..], gate);
                reg += branch_gate * r2;
                for d in 0..n_branches {
                    d_reg_output[d] = r2 * gate.deriv(outputs[d]) * gate_except[d];
                }
                for (slot, v) in d_r[root][1..].iter_mut().zip(dr2) {
                    *slot = branch_gate * v;
                }
            }
            for d in 0..n_branches {
                let (rd, drd) = cost_chain(&probs.devices[d], &costs_of(arch, d), gate);
                reg += rd;
                d_r[d] = drd.iter().zip(&d_outputs[d]).map(|(direct, via)| direct + d_reg_output[d] * via).collect();
            }
            InstanceTerms { p_star, reg, d_p, d_r }
        }
    }
}

/// Runs every trainable stage on one row, keeping caches for backprop.
struct Evaluator<'a> {
    arch: &'a CascadeArchitecture,
    params: &'a ParameterSet,
    slots: Vec<(usize, usize)>,
    caches: Vec<ForwardCache>,
    probs: InstanceProbs,
}

impl<'a> Evaluator<'a> {
    fn new(arch: &'a CascadeArchitecture, params: &'a ParameterSet) -> Result<Self> {
        params.check(arch)?;
        let slots = arch.trainable_coords().into_iter().map(|c| (c.device, c.stage)).collect::<Vec<_>>();
        let devices = (0..=arch.device_count()).map(|d| vec![0.0; arch.device(d).len()]).collect();
        Ok(Evaluator {
            arch,
            params,
            caches: vec![ForwardCache::default(); slots.len()],
            slots,
            probs: InstanceProbs { devices },
        })
    }

    fn run(&mut self, x: &[f64]) -> Result<()> {
        for (i, &(d, s)) in self.slots.iter().enumerate() {
            self.probs.devices[d][s] = self.params.stages[i].forward_cached(x, &mut self.caches[i])?;
        }
        Ok(())
    }

    fn value(&mut self, x: &[f64], y: u8, cfg: &ObjectiveConfig) -> Result<f64> {
        self.run(x)?;
        let t = instance_terms(self.arch, &self.probs, cfg);
        Ok(log_likelihood(y, t.p_star) - cfg.lambda * t.reg)
    }

    fn accumulate(&mut self, x: &[f64], y: u8, cfg: &ObjectiveConfig, grad: &mut GradientSet) -> Result<f64> {
        self.run(x)?;
        let t = instance_terms(self.arch, &self.probs, cfg);
        let dl = log_likelihood_deriv(y, t.p_star);
        for (i, &(d, s)) in self.slots.iter().enumerate() {
            let upstream = dl * t.d_p[d][s] - cfg.lambda * t.d_r[d][s];
            if upstream != 0.0 {
                self.params.stages[i].backward(&self.caches[i], upstream, &mut grad.stages[i]);
            }
        }
        Ok(log_likelihood(y, t.p_star) - cfg.lambda * t.reg)
    }
}

fn check_batch(data: &Dataset, rows: &[usize]) -> Result<()> {
    if rows.is_empty() {
        return Err(CascadeError::Input("empty batch".into()));
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= data.len()) {
        return Err(CascadeError::Structural(format!("row {r} outside dataset of {} rows", data.len())));
    }
    Ok(())
}

/// `sum_n [log-likelihood - lambda r]` over `rows` of `data`.
pub fn objective_value(
    arch: &CascadeArchitecture,
    params: &ParameterSet,
    data: &Dataset,
    rows: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_batch(data, rows)?;
    let mut eval = Evaluator::new(arch, params)?;
    let mut total = 0.0;
    for &r in rows {
        total += eval.value(data.row(r), data.label(r), cfg)?;
    }
    Ok(total)
}

/// Objective value and its exact gradient, summed in row order.
pub fn objective_value_and_gradient(
    arch: &CascadeArchitecture,
    params: &ParameterSet,
    data: &Dataset,
    rows: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<(f64, GradientSet)> {
    cfg.validate()?;
    if cfg.family == Family::Firm && cfg.gating.is_hard() {
        return Err(CascadeError::Config("hard gating has no usable gradient; train with a finite alpha".into()));
    }
    check_batch(data, rows)?;
    let mut eval = Evaluator::new(arch, params)?;
    let mut grad = GradientSet::zeros_like(params);
    let mut total = 0.0;
    for &r in rows {
        total += eval.accumulate(data.row(r), data.label(r), cfg, &mut grad)?;
    }
    Ok((total, grad))
}

pub fn objective_gradient(
    arch: &CascadeArchitecture,
    params: &ParameterSet,
    data: &Dataset,
    rows: &[usize],
    cfg: &ObjectiveConfig,
) -> Result<GradientSet> {
    objective_value_and_gradient(arch, params, data, rows, cfg).map(|(_, g)| g)
}

/// `|a - n| / max(1e-8, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between `grad` and central differences of `f`
/// around `x`.
pub fn max_relative_error<F>(mut f: F, x: &[f64], grad: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(CascadeError::Input(format!("step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let dn = f(&probe)?;
        probe[i] = x[i];
        worst = worst.max(relative_error(grad[i], (up - dn) / (2.0 * h)));
    }
    Ok(worst)
}

/// Compares [`objective_gradient`] against central differences over every
/// parameter and returns the largest relative error.
pub fn finite_difference_check(
    arch: &CascadeArchitecture,
    params: &ParameterSet,
    data: &Dataset,
    rows: &[usize],
    cfg: &ObjectiveConfig,
    h: f64,
) -> Result<f64> {
    let grad = objective_gradient(arch, params, data, rows, cfg)?;
    let flat_grad: Vec<f64> = grad.stages.concat();
    let flat: Vec<f64> = params.stages.iter().flat_map(|m| m.params.iter().copied()).collect();
    let mut scratch = params.clone();
    max_relative_error(
        |theta| {
            let mut off = 0;
            for m in &mut scratch.stages {
                let n = m.params.len();
                m.params.copy_from_slice(&theta[off..off + n]);
                off += n;
            }
            objective_value(arch, &scratch, data, rows, cfg)
        },
        &flat,
        &flat_grad,
        h,
    )
}
