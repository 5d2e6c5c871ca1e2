//! Normalized logistic gate used to approximate the hard `p > 0.5` routing
//! decision of a deployed cascade.
//!
//! `f(p) = 1 / (1 + exp(-alpha (p - 0.5)))` and
//! `g(p) = (f(p) - f(0)) / (f(1) - f(0))`, so that `g(0) = 0` and `g(1) = 1`
//! for every `alpha`. As `alpha` grows `g` approaches the step function; as it
//! shrinks `g` approaches the identity.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CascadeError, Result};

pub const DEFAULT_ALPHA: f64 = 32.0;

/// Sharpness of the gate. `Hard` stands for `alpha = inf` and yields the
/// step function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gating {
    Finite(f64),
    Hard,
}

impl Default for Gating {
    fn default() -> Self {
        Gating::Finite(DEFAULT_ALPHA)
    }
}

impl Gating {
    pub fn new(alpha: f64) -> Result<Self> {
        let gating = if alpha == f64::INFINITY { Gating::Hard } else { Gating::Finite(alpha) };
        gating.validate()?;
        Ok(gating)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Gating::Hard => Ok(()),
            Gating::Finite(a) if a.is_finite() && a > 0.0 => Ok(()),
            Gating::Finite(a) => {
                Err(CascadeError::Config(format!("gating alpha must be positive and finite (or hard), got {a}")))
            }
        }
    }

    pub fn alpha(&self) -> f64 {
        match *self {
            Gating::Finite(a) => a,
            Gating::Hard => f64::INFINITY,
        }
    }

    pub fn is_hard(&self) -> bool {
        matches!(self, Gating::Hard)
    }

    /// Normalized gate value. Panics are avoided by treating non-positive
    /// alpha as a caller bug caught in [`Gating::validate`]; use
    /// [`g_alpha`] for checked evaluation.
    #[inline]
    pub fn gate(&self, p: f64) -> f64 {
        match *self {
            Gating::Hard => step(p),
            Gating::Finite(a) => {
                // upper half by reflection, so g(1) = 1 and g(p) + g(1 - p) = 1 exactly
                let (f0, span) = normalizer(a);
                let lower = |q: f64| ((logistic(a * (q - 0.5)) - f0) / span).clamp(0.0, 1.0);
                if p > 0.5 {
                    1.0 - lower(1.0 - p)
                } else {
                    lower(p)
                }
            }
        }
    }

    /// `dg/dp`. Zero for the hard gate (callers that need a usable gradient
    /// go through [`g_alpha_deriv`], which rejects it).
    #[inline]
    pub fn gate_deriv(&self, p: f64) -> f64 {
        match *self {
            Gating::Hard => 0.0,
            Gating::Finite(a) => {
                let (_, span) = normalizer(a);
                // f (1 - f), with 1 - f evaluated directly to avoid cancellation
                let z = a * (p - 0.5);
                a * logistic(z) * logistic(-z) / span
            }
        }
    }
}

/// Step function with the tie at 0.5 mapped to 0.5.
fn step(p: f64) -> f64 {
    if p > 0.5 {
        1.0
    } else if p < 0.5 {
        0.0
    } else {
        0.5
    }
}

/// Logistic that never evaluates `exp` of a large positive argument.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`logistic`] on `(0, 1)`.
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `(f(0), f(1) - f(0))`. `f(1) - f(0) = 1 - 2 f(0)` by symmetry, which keeps
/// the span exact when `f(0)` underflows.
#[inline]
fn normalizer(alpha: f64) -> (f64, f64) {
    let f0 = logistic(-0.5 * alpha);
    (f0, 1.0 - 2.0 * f0)
}

fn check_probability(p: f64) -> Result<()> {
    if !p.is_finite() {
        return Err(CascadeError::Input(format!("probability is not finite: {p}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(CascadeError::Input(format!("probability outside [0, 1]: {p}")));
    }
    Ok(())
}

/// Un-normalized logistic `f(p)`.
pub fn f_alpha(p: f64, gating: Gating) -> Result<f64> {
    check_probability(p)?;
    gating.validate()?;
    match gating {
        Gating::Finite(a) => Ok(logistic(a * (p - 0.5))),
        Gating::Hard => Ok(step(p)),
    }
}

pub fn g_alpha(p: f64, gating: Gating) -> Result<f64> {
    check_probability(p)?;
    gating.validate()?;
    Ok(gating.gate(p))
}

pub fn g_alpha_deriv(p: f64, gating: Gating) -> Result<f64> {
    check_probability(p)?;
    gating.validate()?;
    if gating.is_hard() {
        return Err(CascadeError::Config("hard gating has no usable derivative".into()));
    }
    Ok(gating.gate_deriv(p))
}

impl Serialize for Gating {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Gating::Finite(a) => serializer.serialize_f64(a),
            Gating::Hard => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Gating {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let gating = match Raw::deserialize(deserializer)? {
            Raw::Num(a) => Gating::Finite(a),
            Raw::Text(s) if s == "inf" || s == "infinity" => Gating::Hard,
            Raw::Text(s) => return Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        };
        gating.validate().map_err(serde::de::Error::custom)?;
        Ok(gating)
    }
}
