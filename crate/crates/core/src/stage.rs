//! Per-stage probabilistic classifiers.
//!
//! A stage reads a subset of the global feature row (its feature mask),
//! optionally applies the quadratic basis expansion, and pushes the result
//! through zero or more logistic hidden layers into a single logistic output.
//! Parameters are stored flat, layer after layer, each layer as a row-major
//! `out x in` weight block followed by `out` biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CascadeError, Result};
use crate::gating::logistic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    LinearLogistic,
    Feedforward,
    /// Cost-only noisy-AND combiner at the head of the root device of a tree.
    Combiner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    #[default]
    Identity,
    /// `[x, y] -> [x, y, x^2, y^2, xy]`; requires exactly two masked features.
    Quadratic,
}

impl Basis {
    fn is_identity(&self) -> bool {
        *self == Basis::Identity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: StageKind,
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    #[serde(default, rename = "features")]
    pub feature_mask: Vec<usize>,
    /// Execution cost. When omitted in a config file it is filled with
    /// [`StageSpec::default_cost`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Basis::is_identity")]
    pub basis: Basis,
}

impl StageSpec {
    pub fn linear(features: Vec<usize>, cost: f64) -> Self {
        StageSpec {
            kind: StageKind::LinearLogistic,
            hidden_sizes: Vec::new(),
            feature_mask: features,
            cost: Some(cost),
            basis: Basis::Identity,
        }
    }

    pub fn feedforward(features: Vec<usize>, hidden: Vec<usize>, cost: f64) -> Self {
        StageSpec {
            kind: StageKind::Feedforward,
            hidden_sizes: hidden,
            feature_mask: features,
            cost: Some(cost),
            basis: Basis::Identity,
        }
    }

    pub fn combiner(cost: f64) -> Self {
        StageSpec {
            kind: StageKind::Combiner,
            hidden_sizes: Vec::new(),
            feature_mask: Vec::new(),
            cost: Some(cost),
            basis: Basis::Identity,
        }
    }

    pub fn with_basis(mut self, basis: Basis) -> Self {
        self.basis = basis;
        self
    }

    pub fn is_trainable(&self) -> bool {
        self.kind != StageKind::Combiner
    }

    pub fn cost(&self) -> f64 {
        self.cost.unwrap_or_else(|| self.default_cost())
    }

    pub fn input_dim(&self) -> usize {
        match self.basis {
            Basis::Identity => self.feature_mask.len(),
            Basis::Quadratic => 5,
        }
    }

    /// Layer widths from input to the single output unit.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.hidden_sizes.len() + 2);
        widths.push(self.input_dim());
        widths.extend_from_slice(&self.hidden_sizes);
        widths.push(1);
        widths
    }

    pub fn param_count(&self) -> usize {
        if !self.is_trainable() {
            return 0;
        }
        self.layer_widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Multiply-accumulate count of one forward pass; the default cost unit.
    pub fn default_cost(&self) -> f64 {
        match self.kind {
            StageKind::Combiner => 1.0,
            _ => {
                let macs: usize = self.layer_widths().windows(2).map(|w| w[0] * w[1]).sum();
                let expand = if self.basis == Basis::Quadratic { 3 } else { 0 };
                (macs + expand) as f64
            }
        }
    }

    /// Shape problems of this spec alone (feature range is checked by the
    /// architecture, which knows the feature dimension).
    pub fn shape_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.kind {
            StageKind::LinearLogistic if !self.hidden_sizes.is_empty() => {
                out.push("linear_logistic stage must not have hidden layers".into())
            }
            StageKind::Feedforward if self.hidden_sizes.is_empty() || self.hidden_sizes.len() > 2 => {
                out.push(format!("feedforward stage needs 1 or 2 hidden layers, got {}", self.hidden_sizes.len()))
            }
            StageKind::Combiner if !self.hidden_sizes.is_empty() || !self.feature_mask.is_empty() => {
                out.push("combiner stage carries only a cost".into())
            }
            _ => {}
        }
        if self.hidden_sizes.contains(&0) {
            out.push("hidden layer sizes must be positive".into());
        }
        if self.is_trainable() && self.feature_mask.is_empty() {
            out.push("stage has an empty feature mask".into());
        }
        let mut seen = self.feature_mask.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            out.push("feature mask contains duplicate indices".into());
        }
        if self.basis == Basis::Quadratic && self.feature_mask.len() != 2 {
            out.push(format!("quadratic basis needs exactly 2 features, got {}", self.feature_mask.len()));
        }
        match self.cost {
            Some(c) if !(c.is_finite() && c >= 0.0) => {
                out.push(format!("cost must be finite and non-negative, got {c}"))
            }
            _ => {}
        }
        out
    }
}

/// `[x, y] -> [x, y, x^2, y^2, xy]`.
pub fn basis_expand(x: &[f64]) -> Result<[f64; 5]> {
    match *x {
        [a, b] => Ok([a, b, a * a, b * b, a * b]),
        _ => Err(CascadeError::Input(format!("basis expansion takes 2 inputs, got {}", x.len()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageModel {
    pub spec: StageSpec,
    pub params: Vec<f64>,
}

/// Activations retained from a forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `acts[0]` is the (masked, expanded) input; the last entry holds the
    /// output probability.
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> f64 {
        self.acts.last().map(|a| a[0]).unwrap_or(f64::NAN)
    }
}

impl StageModel {
    pub fn new(spec: StageSpec, params: Vec<f64>) -> Result<Self> {
        if !spec.is_trainable() {
            return Err(CascadeError::Structural("combiner stages carry no model".into()));
        }
        if let Some(v) = spec.shape_violations().into_iter().next() {
            return Err(CascadeError::Structural(v));
        }
        if params.len() != spec.param_count() {
            return Err(CascadeError::Structural(format!(
                "stage expects {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(CascadeError::Structural("stage parameters must be finite".into()));
        }
        Ok(StageModel { spec, params })
    }

    /// Glorot-uniform weights, zero biases, reproducible from `seed`.
    pub fn init(spec: StageSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.param_count());
        for w in spec.layer_widths().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        StageModel::new(spec, params)
    }

    fn gather_input(&self, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        out.clear();
        for &j in &self.spec.feature_mask {
            let v = *x.get(j).ok_or_else(|| {
                CascadeError::Structural(format!("feature index {j} out of range for row of length {}", x.len()))
            })?;
            if !v.is_finite() {
                return Err(CascadeError::Input(format!("feature {j} is not finite")));
            }
            out.push(v);
        }
        if self.spec.basis == Basis::Quadratic {
            let e = basis_expand(out)?;
            out.clear();
            out.extend_from_slice(&e);
        }
        Ok(())
    }

    /// `P(y = 1 | x)`.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)?;
        Ok(cache.output())
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) -> Result<f64> {
        let widths = self.spec.layer_widths();
        let layers = widths.len() - 1;
        cache.acts.resize_with(widths.len(), Vec::new);
        {
            let (first, _) = cache.acts.split_at_mut(1);
            self.gather_input(x, &mut first[0])?;
        }
        let mut offset = 0;
        for l in 0..layers {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let (head, tail) = cache.acts.split_at_mut(l + 1);
            let input = &head[l];
            let output = &mut tail[0];
            output.clear();
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = row.iter().zip(input).map(|(a, v)| a * v).sum::<f64>() + b[o];
                output.push(logistic(z));
            }
            offset += n_in * n_out + n_out;
        }
        Ok(cache.output())
    }

    /// Accumulates `upstream * dp/dparams` into `grad` using activations from
    /// the most recent [`StageModel::forward_cached`] call on `cache`.
    pub fn backward(&self, cache: &ForwardCache, upstream: f64, grad: &mut [f64]) {
        let widths = self.spec.layer_widths();
        let layers = widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut acc = 0;
        for l in 0..layers {
            offsets.push(acc);
            acc += widths[l] * widths[l + 1] + widths[l + 1];
        }
        // delta = dJ/dz for the current layer's pre-activations
        let p = cache.output();
        let mut delta = vec![upstream * p * (1.0 - p)];
        for l in (0..layers).rev() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let input = &cache.acts[l];
            let off = offsets[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, v) in row.iter_mut().zip(input) {
                    *g += d * v;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                let mut next = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    for (i, nx) in next.iter_mut().enumerate() {
                        *nx += d * w[o * n_in + i];
                    }
                }
                for (nx, a) in next.iter_mut().zip(input) {
                    *nx *= a * (1.0 - a);
                }
                delta = next;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_linear_model_outputs_half() {
        let spec = StageSpec::linear(vec![0, 1, 2], 1.0);
        let m = StageModel::new(spec, vec![0.0; 4]).unwrap();
        assert_eq!(m.forward(&[3.0, -7.0, 1e3]).unwrap(), 0.5);
    }

    #[test]
    fn linear_hand_evaluation() {
        let m = StageModel::new(StageSpec::linear(vec![0, 1], 1.0), vec![1.0, -1.0, 0.0]).unwrap();
        let p = m.forward(&[2.0, 1.0]).unwrap();
        assert!((p - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn zero_output_layer_gives_half() {
        let spec = StageSpec::feedforward(vec![0, 1, 2], vec![4], 1.0);
        let mut m = StageModel::init(spec, 7).unwrap();
        let n = m.params.len();
        // last layer: 4 weights + 1 bias
        for v in &mut m.params[n - 5..] {
            *v = 0.0;
        }
        assert_eq!(m.forward(&[0.3, 9.0, -2.0]).unwrap(), 0.5);
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let spec = StageSpec::linear((0..5).collect(), 1.0);
        let a = StageModel::init(spec.clone(), 11).unwrap();
        let b = StageModel::init(spec, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.params.len(), 6);
        assert_eq!(a.params[5], 0.0);

        let ff = StageSpec::feedforward((0..37).collect(), vec![10], 1.0);
        assert_eq!(ff.param_count(), (37 * 10 + 10) + (10 + 1));
        let m = StageModel::init(ff, 3).unwrap();
        let limit = (6.0f64 / 47.0).sqrt();
        assert!(m.params[..370].iter().all(|w| w.abs() <= limit));
        assert!(m.params[370..380].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn basis_expansion() {
        assert_eq!(basis_expand(&[2.0, 3.0]).unwrap(), [2.0, 3.0, 4.0, 9.0, 6.0]);
        assert_eq!(basis_expand(&[0.0, 0.0]).unwrap(), [0.0; 5]);
        assert_eq!(basis_expand(&[1.0, 1.0]).unwrap(), [1.0; 5]);
        assert!(matches!(basis_expand(&[1.0]), Err(CascadeError::Input(_))));
        assert!(basis_expand(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn quadratic_stage_uses_expanded_inputs() {
        let spec = StageSpec::linear(vec![1, 2], 1.0).with_basis(Basis::Quadratic);
        assert_eq!(spec.input_dim(), 5);
        let m = StageModel::new(spec, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        // only the xy term is weighted: logistic(2 * 3)
        let p = m.forward(&[100.0, 2.0, 3.0]).unwrap();
        assert!((p - logistic(6.0)).abs() < 1e-15);
    }

    #[test]
    fn forward_errors() {
        let m = StageModel::new(StageSpec::linear(vec![0, 4], 1.0), vec![0.0; 3]).unwrap();
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(CascadeError::Structural(_))));
        assert!(matches!(m.forward(&[f64::NAN, 0.0, 0.0, 0.0, 1.0]), Err(CascadeError::Input(_))));
        assert!(StageModel::new(StageSpec::linear(vec![0], 1.0), vec![0.0]).is_err());
        assert!(StageModel::new(StageSpec::linear(vec![0], 1.0), vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn spec_violations() {
        let mut s = StageSpec::feedforward(vec![0, 0], vec![], -1.0);
        let v = s.shape_violations();
        assert_eq!(v.len(), 3, "{v:?}");
        s.hidden_sizes = vec![3, 3, 3];
        assert!(s.shape_violations().iter().any(|m| m.contains("hidden")));
    }

    #[test]
    fn default_cost_counts_macs() {
        let mut s = StageSpec::feedforward((0..37).collect(), vec![10], 0.0);
        s.cost = None;
        assert_eq!(s.cost(), 380.0);
        let mut l = StageSpec::linear(vec![0, 1], 0.0).with_basis(Basis::Quadratic);
        l.cost = None;
        assert_eq!(l.cost(), 8.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = StageSpec::feedforward(vec![0, 2, 3], vec![4, 3], 1.0);
        let m = StageModel::init(spec, 5).unwrap();
        let x = [0.4, 9.9, -1.2, 0.7];
        let mut cache = ForwardCache::default();
        m.forward_cached(&x, &mut cache).unwrap();
        let mut grad = vec![0.0; m.params.len()];
        m.backward(&cache, 1.0, &mut grad);
        let h = 1e-5;
        for i in 0..m.params.len() {
            let mut up = m.clone();
            up.params[i] += h;
            let mut dn = m.clone();
            dn.params[i] -= h;
            let fd = (up.forward(&x).unwrap() - dn.forward(&x).unwrap()) / (2.0 * h);
            let err = (fd - grad[i]).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
            assert!(err < 1e-6, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn output_strictly_inside_unit_interval(
                seed in any::<u64>(),
                x in proptest::collection::vec(-5.0f64..5.0, 4),
            ) {
                let m = StageModel::init(StageSpec::feedforward(vec![0, 1, 2, 3], vec![3], 1.0), seed).unwrap();
                let p = m.forward(&x).unwrap();
                prop_assert!(p > 0.0 && p < 1.0);
            }

            #[test]
            fn mask_permutation_invariance(
                seed in any::<u64>(),
                x in proptest::collection::vec(-3.0f64..3.0, 6),
                rot in 0usize..4,
            ) {
                let mask = vec![5, 1, 3, 0];
                let hidden = 3;
                let m = StageModel::init(StageSpec::feedforward(mask.clone(), vec![hidden], 1.0), seed).unwrap();
                let n_in = mask.len();
                let perm: Vec<usize> = (0..n_in).map(|i| (i + rot) % n_in).collect();
                let new_mask: Vec<usize> = perm.iter().map(|&i| mask[i]).collect();
                let mut params = m.params.clone();
                for o in 0..hidden {
                    for (new_i, &old_i) in perm.iter().enumerate() {
                        params[o * n_in + new_i] = m.params[o * n_in + old_i];
                    }
                }
                let permuted = StageModel::new(StageSpec::feedforward(new_mask, vec![hidden], 1.0), params).unwrap();
                let a = m.forward(&x).unwrap();
                let b = permuted.forward(&x).unwrap();
                prop_assert!((a - b).abs() < 1e-14);
            }
        }
    }
}
