//! Perturbation sources for the generalized attack loop and the prediction
//! subspaces used to reason about them.
//!
//! Every source returns the direction whose addition *increases* the target
//! class likelihood; the attack loop only ever adds `α · P`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::{ce_seed, softmax, ForwardTrace, Mlp};
use crate::vector::{argmax, sub};

/// Default margin for the M-logit source.
pub const DEFAULT_KAPPA: f64 = 20.0;
/// Components of the CE gradient smaller than this are treated as zero by the
/// sign source (double-precision regime).
pub const DEFAULT_SIGN_EPSILON: f64 = 1e-16;
/// Single-precision counterpart of [`DEFAULT_SIGN_EPSILON`].
pub const SINGLE_PRECISION_EPSILON: f64 = 1e-8;
/// Confidence threshold τ separating the subspaces.
pub const DEFAULT_CONFIDENCE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceKind {
    Ce,
    CeSign,
    Logit,
    MLogit,
}

impl SourceKind {
    pub const ALL: [SourceKind; 4] = [
        SourceKind::Ce,
        SourceKind::CeSign,
        SourceKind::Logit,
        SourceKind::MLogit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Ce => "ce",
            SourceKind::CeSign => "ce-sign",
            SourceKind::Logit => "logit",
            SourceKind::MLogit => "m-logit",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown source `{s}` (valid: ce, ce-sign, logit, m-logit)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSource {
    kind: SourceKind,
    kappa: f64,
    sign_epsilon: f64,
}

impl PerturbationSource {
    pub fn new(kind: SourceKind) -> Self {
        Self {
            kind,
            kappa: DEFAULT_KAPPA,
            sign_epsilon: DEFAULT_SIGN_EPSILON,
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) {
            return Err(Error::config(format!("kappa must be >= 0, got {kappa}")));
        }
        self.kappa = kappa;
        Ok(self)
    }

    pub fn with_sign_epsilon(mut self, eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(Error::config(format!("sign epsilon must be >= 0, got {eps}")));
        }
        self.sign_epsilon = eps;
        Ok(self)
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn sign_epsilon(&self) -> f64 {
        self.sign_epsilon
    }

    /// Perturbation `P` at `x` toward target class `c`.
    pub fn perturbation(&self, model: &Mlp, x: &[f64], c: usize) -> Result<Vec<f64>> {
        let trace = model.forward(x)?;
        self.perturbation_from_trace(model, &trace, c)
    }

    /// As [`perturbation`](Self::perturbation), reusing an existing forward pass.
    pub fn perturbation_from_trace(
        &self,
        model: &Mlp,
        trace: &ForwardTrace,
        c: usize,
    ) -> Result<Vec<f64>> {
        let classes = model.num_classes();
        if c >= classes {
            return Err(Error::config(format!(
                "target class {c} out of range for {classes} classes"
            )));
        }
        let logits = trace.logits();
        match self.kind {
            SourceKind::Ce => {
                let mut seed = ce_seed(logits, c)?;
                seed.iter_mut().for_each(|s| *s = -*s);
                model.backward(trace, &seed)
            }
            SourceKind::CeSign => {
                let grad = model.backward(trace, &ce_seed(logits, c)?)?;
                Ok(grad
                    .into_iter()
                    .map(|g| {
                        if g.abs() < self.sign_epsilon || g == 0.0 {
                            0.0
                        } else {
                            // sign of the ascent direction −∇J
                            -g.signum()
                        }
                    })
                    .collect())
            }
            SourceKind::Logit => model.backward(trace, &crate::net::one_hot(classes, c)),
            SourceKind::MLogit => {
                if classes < 2 {
                    return Err(Error::config("m-logit needs at least two classes"));
                }
                let runner_up = runner_up(logits, c);
                if logits[c] - logits[runner_up] >= self.kappa {
                    return Ok(vec![0.0; model.input_dim()]);
                }
                let mut seed = vec![0.0; classes];
                seed[c] = 1.0;
                seed[runner_up] = -1.0;
                model.backward(trace, &seed)
            }
        }
    }
}

/// `argmax_{i≠c} logits_i`, ties to the lowest index.
pub fn runner_up(logits: &[f64], c: usize) -> usize {
    let mut best: Option<usize> = None;
    for (i, &z) in logits.iter().enumerate() {
        if i == c {
            continue;
        }
        match best {
            Some(b) if logits[b] >= z => {}
            _ => best = Some(i),
        }
    }
    best.expect("at least two classes")
}

/// Prediction subspaces relative to a target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subspace {
    /// Confidently some other class.
    D1,
    /// Low confidence.
    D2,
    /// Confidently the target class.
    D3,
}

impl Subspace {
    pub fn tag(self) -> &'static str {
        match self {
            Subspace::D1 => "D1",
            Subspace::D2 => "D2",
            Subspace::D3 => "D3",
        }
    }
}

impl fmt::Display for Subspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Assigns `probs` to exactly one subspace for target class `c`.
///
/// `tau` must lie in (0.5, 1), which makes `probs[c] ≥ tau` imply that `c` is
/// the argmax.
pub fn classify_subspace(probs: &[f64], c: usize, tau: f64) -> Subspace {
    assert!(tau > 0.5 && tau < 1.0, "confidence threshold must lie in (0.5, 1)");
    let top = argmax(probs);
    if probs[c] >= tau {
        Subspace::D3
    } else if probs[top] >= tau && top != c {
        Subspace::D1
    } else {
        Subspace::D2
    }
}

/// Softmax of the logits at `x` followed by [`classify_subspace`].
pub fn subspace_at(model: &Mlp, x: &[f64], c: usize, tau: f64) -> Result<Subspace> {
    let probs = softmax(&model.logits(x)?)?;
    Ok(classify_subspace(&probs, c, tau))
}

/// `∇g_a − ∇g_b` at `x`.
pub fn logit_gradient_gap(model: &Mlp, x: &[f64], a: usize, b: usize) -> Result<Vec<f64>> {
    Ok(sub(&model.grad_logit(x, a)?, &model.grad_logit(x, b)?))
}
