//! Cascade architectures and the rules that combine stage probabilities into
//! one cascade output.
//!
//! Two topologies are supported. A *linear* cascade is a single chain of
//! stages. A *tree* cascade is a star: `D` branch devices each run their own
//! chain, and a root device combines the branch outputs with a cost-only
//! noisy-AND stage before continuing with its own chain.

use serde::{Deserialize, Serialize};

use crate::error::{CascadeError, Result, StageCoord};
use crate::gating::Gating;
use crate::stage::{StageKind, StageSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CascadeMode {
    Linear,
    Tree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeArchitecture {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(rename = "gating_alpha", default)]
    pub gating: Gating,
    pub mode: CascadeMode,
    #[serde(default)]
    pub branches: Vec<Vec<StageSpec>>,
    pub root: Vec<StageSpec>,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

/// One invariant violation found by [`CascadeArchitecture::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub at: Option<StageCoord>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.at {
            Some(c) => write!(f, "{c}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl CascadeArchitecture {
    pub fn linear(stages: Vec<StageSpec>, gating: Gating) -> Self {
        CascadeArchitecture {
            schema_version: SCHEMA_VERSION,
            gating,
            mode: CascadeMode::Linear,
            branches: Vec::new(),
            root: stages,
        }
    }

    /// `root` must start with the combiner stage.
    pub fn tree(branches: Vec<Vec<StageSpec>>, root: Vec<StageSpec>, gating: Gating) -> Self {
        CascadeArchitecture { schema_version: SCHEMA_VERSION, gating, mode: CascadeMode::Tree, branches, root }
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let arch: CascadeArchitecture = serde_json::from_str(text)?;
        if arch.schema_version != SCHEMA_VERSION {
            return Err(CascadeError::Schema(format!(
                "unsupported architecture schema_version {}",
                arch.schema_version
            )));
        }
        Ok(arch)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn device_count(&self) -> usize {
        self.branches.len()
    }

    pub fn root_device(&self) -> usize {
        self.branches.len()
    }

    pub fn device(&self, device: usize) -> &[StageSpec] {
        if device < self.branches.len() {
            &self.branches[device]
        } else {
            &self.root
        }
    }

    pub fn spec(&self, at: StageCoord) -> &StageSpec {
        &self.device(at.device)[at.stage]
    }

    /// All stages in canonical order: branches first, then the root device.
    pub fn coords(&self) -> impl Iterator<Item = StageCoord> + '_ {
        (0..=self.branches.len())
            .flat_map(move |d| (0..self.device(d).len()).map(move |s| StageCoord { device: d, stage: s }))
    }

    /// Stages that own a model, in the canonical parameter order.
    pub fn trainable_coords(&self) -> Vec<StageCoord> {
        self.coords().filter(|&c| self.spec(c).is_trainable()).collect()
    }

    pub fn total_stage_count(&self) -> usize {
        self.coords().count()
    }

    pub fn total_cost(&self) -> f64 {
        self.coords().map(|c| self.spec(c).cost()).sum()
    }

    /// Fills omitted costs with the multiply-accumulate default.
    pub fn with_resolved_costs(mut self) -> Self {
        for stage in self.branches.iter_mut().flatten().chain(self.root.iter_mut()) {
            if stage.cost.is_none() {
                stage.cost = Some(stage.default_cost());
            }
        }
        self
    }

    /// Every invariant violation, not just the first.
    pub fn validate(&self, feature_dim: usize) -> std::result::Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        let mut push = |at: Option<StageCoord>, message: String| out.push(Violation { at, message });

        if let Err(e) = self.gating.validate() {
            push(None, e.to_string());
        }
        match self.mode {
            CascadeMode::Linear if !self.branches.is_empty() => {
                push(None, format!("linear mode takes no branch devices, found {}", self.branches.len()))
            }
            CascadeMode::Tree if self.branches.is_empty() => {
                push(None, "tree mode needs at least one branch device".into())
            }
            _ => {}
        }
        if self.root.is_empty() {
            push(None, "root device has no stages".into());
        }
        for (d, branch) in self.branches.iter().enumerate() {
            if branch.is_empty() {
                push(Some(StageCoord { device: d, stage: 0 }), "branch device has no stages".into());
            }
        }
        let root = self.root_device();
        for at in self.coords() {
            let spec = self.spec(at);
            for v in spec.shape_violations() {
                push(Some(at), v);
            }
            for &j in &spec.feature_mask {
                if j >= feature_dim {
                    push(Some(at), format!("feature index {j} outside feature dimension {feature_dim}"));
                }
            }
            let head_of_tree_root = self.mode == CascadeMode::Tree && at.device == root && at.stage == 0;
            match (spec.kind == StageKind::Combiner, head_of_tree_root) {
                (false, true) => push(Some(at), "first root stage of a tree must be a combiner".into()),
                (true, false) => push(Some(at), "combiner stages are only allowed at the head of a tree root".into()),
                _ => {}
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }

    pub fn ensure_valid(&self, feature_dim: usize) -> Result<()> {
        self.validate(feature_dim)
            .map_err(|v| CascadeError::Config(v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")))
    }
}

/// Per-stage mixture coefficients of a firm cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights {
    pub theta: Vec<f64>,
}

impl MixtureWeights {
    pub fn sum(&self) -> f64 {
        self.theta.iter().sum()
    }
}

/// `prod_l p_l`.
pub fn combine_noisy_and(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(CascadeError::Input("noisy-AND of an empty list".into()));
    }
    Ok(probs.iter().product())
}

/// `theta_l = (1 - g(p_l)) prod_{k<l} g(p_k)` for `l < L` and
/// `theta_L = prod_{k<L} g(p_k)`.
pub fn mixture_weights_linear(probs: &[f64], gating: Gating) -> Result<MixtureWeights> {
    gating.validate()?;
    if probs.is_empty() {
        return Err(CascadeError::Input("cascade with no stages".into()));
    }
    let last = probs.len() - 1;
    let mut prefix = 1.0;
    let mut theta = Vec::with_capacity(probs.len());
    for (l, &p) in probs.iter().enumerate() {
        if l == last {
            theta.push(prefix);
        } else {
            let g = gating.gate(p);
            theta.push((1.0 - g) * prefix);
            prefix *= g;
        }
    }
    Ok(MixtureWeights { theta })
}

/// Firm output of a linear chain, evaluated by the back-to-front recursion
/// `S_L = p_L`, `S_l = (1 - g(p_l)) p_l + g(p_l) S_{l+1}`, which expands to
/// `sum_l theta_l p_l`.
pub fn combine_linear_firm(probs: &[f64], gating: Gating) -> Result<f64> {
    gating.validate()?;
    let (&last, rest) = probs.split_last().ok_or_else(|| CascadeError::Input("cascade with no stages".into()))?;
    Ok(rest.iter().rev().fold(last, |s, &p| {
        let g = gating.gate(p);
        (1.0 - g) * p + g * s
    }))
}

/// Output of one branch device of a tree; same rule as a linear cascade.
pub fn combine_per_branch(branch: &[f64], gating: Gating) -> Result<f64> {
    combine_linear_firm(branch, gating)
}

/// Mixture weights of the root device of a tree. `root_probs` are the
/// probabilities of root stages 2..L (the combiner's probability is the
/// branch product). The prefix products include the combiner stage.
///
/// When the root has only the combiner, its single weight is 1: the
/// `l = 1` and `l = L` cases of the weight definition coincide and sum.
pub fn mixture_weights_tree(branch_outputs: &[f64], root_probs: &[f64], gating: Gating) -> Result<MixtureWeights> {
    gating.validate()?;
    if branch_outputs.is_empty() {
        return Err(CascadeError::Structural(
            "tree combination needs at least one branch; use the linear combiner".into(),
        ));
    }
    if root_probs.is_empty() {
        return Ok(MixtureWeights { theta: vec![1.0] });
    }
    let branch_gate: f64 = branch_outputs.iter().map(|&p| gating.gate(p)).product();
    let combined: f64 = branch_outputs.iter().product();
    let mut theta = Vec::with_capacity(root_probs.len() + 1);
    theta.push(1.0 - branch_gate);
    let mut prefix = gating.gate(combined) * branch_gate;
    let last = root_probs.len() - 1;
    for (l, &p) in root_probs.iter().enumerate() {
        if l == last {
            theta.push(prefix);
        } else {
            let g = gating.gate(p);
            theta.push((1.0 - g) * prefix);
            prefix *= g;
        }
    }
    Ok(MixtureWeights { theta })
}

/// Firm output of a tree: `sum_l theta_l p_l` over root stages, where the
/// combiner's probability is `prod_d p_*^d`.
pub fn combine_tree_firm(branch_outputs: &[f64], root_probs: &[f64], gating: Gating) -> Result<f64> {
    let weights = mixture_weights_tree(branch_outputs, root_probs, gating)?;
    let combined: f64 = branch_outputs.iter().product();
    Ok(std::iter::once(combined).chain(root_probs.iter().copied()).zip(&weights.theta).map(|(p, t)| p * t).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage::StageSpec;

    const A32: Gating = Gating::Finite(32.0);

    pub(crate) fn c5_style() -> CascadeArchitecture {
        CascadeArchitecture::tree(
            vec![vec![StageSpec::linear(vec![0, 1], 2.0)], vec![StageSpec::linear(vec![2, 3, 4], 3.0)]],
            vec![StageSpec::combiner(1.0), StageSpec::feedforward((0..6).collect(), vec![10], 70.0)],
            A32,
        )
    }

    #[test]
    fn noisy_and() {
        assert!((combine_noisy_and(&[0.9, 0.8]).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(combine_noisy_and(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(combine_noisy_and(&[0.5; 4]).unwrap(), 0.0625);
        assert!(matches!(combine_noisy_and(&[]), Err(CascadeError::Input(_))));
    }

    #[test]
    fn linear_weights() {
        assert_eq!(mixture_weights_linear(&[0.3], A32).unwrap().theta, vec![1.0]);
        let w = mixture_weights_linear(&[0.2, 0.9], A32).unwrap();
        assert!((w.theta[0] - 0.999_932_388_370_324_9).abs() < 1e-12);
        assert!((w.theta[1] - 6.761_162_967_508_65e-5).abs() < 1e-15);
        let w = mixture_weights_linear(&[1.0, 1.0, 0.3], A32).unwrap();
        assert_eq!(w.theta, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_firm_values() {
        let p = combine_linear_firm(&[0.2, 0.9], A32).unwrap();
        assert!((p - 0.200_047_328_140_772_56).abs() < 1e-12);
        let p = combine_linear_firm(&[0.9, 0.9, 0.2], A32).unwrap();
        assert!((p - 0.2).abs() < 0.01);
        assert!((p - 0.200_003_707_517_628_66).abs() < 1e-12);
        for &p in &[0.0, 0.13, 0.5, 1.0] {
            assert_eq!(combine_linear_firm(&[p], A32).unwrap(), p);
            assert_eq!(combine_per_branch(&[p], A32).unwrap(), p);
        }
    }

    #[test]
    fn recursion_matches_weighted_sum() {
        let probs = [0.7, 0.55, 0.49, 0.8, 0.1];
        let w = mixture_weights_linear(&probs, A32).unwrap();
        let direct: f64 = w.theta.iter().zip(&probs).map(|(t, p)| t * p).sum();
        let rec = combine_linear_firm(&probs, A32).unwrap();
        assert!((direct - rec).abs() < 1e-15);
    }

    #[test]
    fn tree_values() {
        // single branch, root = combiner only: pass-through
        for &p in &[0.0, 0.3, 0.5, 0.77, 1.0] {
            assert!((combine_tree_firm(&[p], &[], A32).unwrap() - p).abs() < 1e-15);
        }
        let p = combine_tree_firm(&[0.9, 0.3], &[0.8], A32).unwrap();
        assert!((p - 0.27).abs() < 0.01);
        assert!((p - 0.269_552_998_694_204_36).abs() < 1e-12);
        assert_eq!(combine_tree_firm(&[1.0, 1.0], &[1.0, 1.0], A32).unwrap(), 1.0);
        assert!(matches!(combine_tree_firm(&[], &[0.5], A32), Err(CascadeError::Structural(_))));
    }

    #[test]
    fn architecture_validation() {
        assert_eq!(c5_style().validate(6), Ok(()));

        let bad = c5_style();
        let v = bad.validate(5).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].at, Some(StageCoord { device: 2, stage: 1 }));
        assert!(v[0].message.contains("feature index 5"));

        let mut no_branches = c5_style();
        no_branches.branches.clear();
        let v = no_branches.validate(6).unwrap_err();
        assert!(v.iter().any(|v| v.message.contains("at least one branch")));

        let mut many = c5_style();
        many.root[0] = StageSpec::linear(vec![9], -1.0);
        many.branches[0].push(StageSpec::combiner(1.0));
        let v = many.validate(6).unwrap_err();
        assert!(v.len() >= 4, "{v:?}");
    }

    #[test]
    fn architecture_json_schema() {
        let text = r#"{
            "gating_alpha": "inf",
            "mode": "linear",
            "root": [
                {"kind": "linear_logistic", "features": [0, 1], "cost": 2.5},
                {"kind": "feedforward", "hidden_sizes": [10], "features": [0, 1, 2]}
            ]
        }"#;
        let arch = CascadeArchitecture::from_json_str(text).unwrap();
        assert_eq!(arch.gating, Gating::Hard);
        assert_eq!(arch.root[0].cost(), 2.5);
        assert_eq!(arch.root[1].cost, None);
        assert_eq!(arch.root[1].cost(), 40.0);
        let again = CascadeArchitecture::from_json_str(&arch.to_json_string()).unwrap();
        assert_eq!(arch, again);

        let bumped = text.replacen('{', "{\"schema_version\": 9,", 1);
        assert!(matches!(CascadeArchitecture::from_json_str(&bumped), Err(CascadeError::Schema(_))));
    }

    #[test]
    fn trainable_order_skips_combiner() {
        let arch = c5_style();
        let coords = arch.trainable_coords();
        assert_eq!(
            coords,
            vec![
                StageCoord { device: 0, stage: 0 },
                StageCoord { device: 1, stage: 0 },
                StageCoord { device: 2, stage: 1 },
            ]
        );
        assert_eq!(arch.total_stage_count(), 4);
    }

    mod props {
        use super::*;
        use proptest::collection::vec;
        use proptest::prelude::*;

        fn alpha() -> impl Strategy<Value = Gating> {
            prop_oneof![Just(8.0), Just(32.0), Just(1024.0)].prop_map(Gating::Finite)
        }

        proptest! {
            #[test]
            fn linear_telescoping(probs in vec(0.0f64..=1.0, 1..=6), g in alpha()) {
                let w = mixture_weights_linear(&probs, g).unwrap();
                prop_assert!((w.sum() - 1.0).abs() < 1e-12);
                prop_assert!(w.theta.iter().all(|t| (0.0..=1.0).contains(t)));
            }

            #[test]
            fn linear_output_is_convex(probs in vec(0.0f64..=1.0, 1..=6), g in alpha()) {
                let p = combine_linear_firm(&probs, g).unwrap();
                let lo = probs.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(p >= lo - 1e-15 && p <= hi + 1e-15);
            }

            #[test]
            fn tree_weight_sum_identity(
                branches in vec(0.0f64..=1.0, 1..=4),
                root in vec(0.0f64..=1.0, 1..=5),
                g in alpha(),
            ) {
                let w = mixture_weights_tree(&branches, &root, g).unwrap();
                let big_g: f64 = branches.iter().map(|&p| g.gate(p)).product();
                let q: f64 = branches.iter().product();
                let expect = 1.0 - big_g * (1.0 - g.gate(q));
                prop_assert!((w.sum() - expect).abs() < 1e-12);
            }

            #[test]
            fn noisy_and_permutation_invariant(mut probs in vec(0.0f64..=1.0, 1..=6), k in 0usize..6) {
                let a = combine_noisy_and(&probs).unwrap();
                let n = probs.len();
                probs.rotate_left(k % n);
                let b = combine_noisy_and(&probs).unwrap();
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }
    }
}
