//! The generalized iterative attack `X_{n+1} = ζ(X_n + α P_n)`.
//!
//! Record `n` of a trajectory describes the iterate `X_n` (record 0 is the
//! unmodified input) together with the perturbation `P_n` evaluated there and
//! the multiplier that is applied to it.

mod sweep;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{classify_subspace, PerturbationSource, Subspace, DEFAULT_CONFIDENCE};
use crate::net::{softmax, Mlp, Sample};
use crate::vector::{argmax, l1_norm, l2_norm, linf_norm, sub};

pub use sweep::{
    sweep, write_summary_csv, write_trajectories_csv, SweepEntry, SweepReport, SweepSummary,
    SUMMARY_HEADER, TRAJECTORY_HEADER,
};

/// Step-size multiplier schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// Fixed `α` every iteration.
    EqualMultiplier(f64),
    /// `α = β / Σ|P|`, so every step adds the same L1 mass.
    EqualPerturbation(f64),
}

impl Schedule {
    pub fn name(&self) -> &'static str {
        match self {
            Schedule::EqualMultiplier(_) => "equal-multiplier",
            Schedule::EqualPerturbation(_) => "equal-perturbation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule {
    /// Stop as soon as the prediction equals the target.
    FirstFlip,
    /// Always run `max_iterations` steps.
    FixedIterations,
    /// Stop once the target probability reaches the given level.
    TargetConfidence(f64),
}

impl StopRule {
    pub fn name(&self) -> &'static str {
        match self {
            StopRule::FirstFlip => "first-flip",
            StopRule::FixedIterations => "fixed",
            StopRule::TargetConfidence(_) => "target-confidence",
        }
    }
}

impl FromStr for StopRule {
    type Err = Error;

    /// Parses `first-flip`, `fixed`, or `target-confidence:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-flip" => Ok(StopRule::FirstFlip),
            "fixed" => Ok(StopRule::FixedIterations),
            _ => match s.strip_prefix("target-confidence:") {
                Some(p) => p
                    .parse()
                    .map(StopRule::TargetConfidence)
                    .map_err(|_| Error::config(format!("bad confidence in `{s}`"))),
                None => Err(Error::config(format!(
                    "unknown stop rule `{s}` (valid: first-flip, fixed, target-confidence:<p>)"
                ))),
            },
        }
    }
}

impl fmt::Display for StopRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopRule::TargetConfidence(p) => write!(f, "target-confidence:{p}"),
            other => f.write_str(other.name()),
        }
    }
}

pub const DEFAULT_MAX_ITERATIONS: usize = 250;
/// Fixed multiplier of the equal-multiplier protocol.
pub const DEFAULT_ALPHA: f64 = 5e-4;
/// Per-step L1 budget of the equal-perturbation protocol.
pub const DEFAULT_BETA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub source: PerturbationSource,
    pub target_class: usize,
    pub schedule: Schedule,
    pub max_iterations: usize,
    /// Optional L∞ radius around the starting point.
    pub epsilon_ball: Option<f64>,
    pub stop_rule: StopRule,
}

impl AttackConfig {
    pub fn new(source: PerturbationSource, target_class: usize, schedule: Schedule) -> Self {
        Self {
            source,
            target_class,
            schedule,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            epsilon_ball: None,
            stop_rule: StopRule::FirstFlip,
        }
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    pub fn with_stop_rule(mut self, rule: StopRule) -> Self {
        self.stop_rule = rule;
        self
    }

    pub fn with_epsilon_ball(mut self, eps: Option<f64>) -> Self {
        self.epsilon_ball = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.schedule {
            // α = 0 is allowed: it is the null attack used as a control.
            Schedule::EqualMultiplier(a) if !(a >= 0.0 && a.is_finite()) => {
                return Err(Error::config(format!("alpha must be finite and >= 0, got {a}")))
            }
            Schedule::EqualPerturbation(b) if !(b > 0.0 && b.is_finite()) => {
                return Err(Error::config(format!("beta must be finite and > 0, got {b}")))
            }
            _ => {}
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be at least 1"));
        }
        if let Some(eps) = self.epsilon_ball {
            if !(eps > 0.0) {
                return Err(Error::config(format!("epsilon ball must be > 0, got {eps}")));
            }
        }
        if let StopRule::TargetConfidence(p) = self.stop_rule {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::config(format!("target confidence must lie in (0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

/// Step multiplier for perturbation `p` under `schedule`.
///
/// Fails with [`Error::VanishedGradient`] when the equal-perturbation
/// schedule meets an all-zero perturbation.
pub fn compute_alpha(schedule: Schedule, p: &[f64]) -> Result<f64> {
    match schedule {
        Schedule::EqualMultiplier(alpha) => Ok(alpha),
        Schedule::EqualPerturbation(beta) => {
            let mass = l1_norm(p);
            if mass == 0.0 {
                Err(Error::VanishedGradient)
            } else {
                Ok(beta / mass)
            }
        }
    }
}

/// Projects `candidate` into the box of `x0` and, if given, the L∞ ball of
/// radius `epsilon` around it.
pub fn clip(candidate: &[f64], x0: &Sample, epsilon: Option<f64>) -> Result<Sample> {
    if candidate.len() != x0.dim() {
        return Err(Error::Shape {
            expected: x0.dim(),
            actual: candidate.len(),
        });
    }
    let coords = candidate
        .iter()
        .zip(x0.coords())
        .map(|(&v, &origin)| {
            let (mut lo, mut hi) = (x0.lower_bound(), x0.upper_bound());
            if let Some(eps) = epsilon {
                lo = lo.max(origin - eps);
                hi = hi.min(origin + eps);
            }
            v.clamp(lo, hi)
        })
        .collect();
    x0.with_coords(coords)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub predicted: usize,
    pub softmax_initial: f64,
    pub softmax_target: f64,
    pub logit_initial: f64,
    pub logit_target: f64,
    /// `Σ|P_n|` before scaling.
    pub grad_l1: f64,
    pub alpha_used: f64,
    pub cum_l2: f64,
    pub cum_linf: f64,
    pub subspace: Subspace,
    /// L1 mass of the step that produced this iterate (0 for record 0).
    pub step_l1: f64,
    /// Whether projection altered the step that produced this iterate.
    pub clipped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Flipped,
    ReachedConfidence,
    Exhausted,
    VanishedGradient,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::Flipped => "flipped",
            Termination::ReachedConfidence => "reached-confidence",
            Termination::Exhausted => "exhausted",
            Termination::VanishedGradient => "vanished-gradient",
        }
    }
}

/// Where and at what cost the prediction first became the target class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flip {
    pub iteration: usize,
    pub l2: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackTrajectory {
    pub records: Vec<IterationRecord>,
    pub first_flip: Option<Flip>,
    pub final_sample: Sample,
    pub initial_class: usize,
    pub termination: Termination,
    /// Every visited iterate, `points[n]` belonging to `records[n]`.
    pub points: Vec<Vec<f64>>,
}

impl AttackTrajectory {
    pub fn first_flip_iteration(&self) -> Option<usize> {
        self.first_flip.map(|f| f.iteration)
    }

    pub fn flip_l2(&self) -> Option<f64> {
        self.first_flip.map(|f| f.l2)
    }

    pub fn flip_linf(&self) -> Option<f64> {
        self.first_flip.map(|f| f.linf)
    }

    pub fn flipped(&self) -> bool {
        self.first_flip.is_some()
    }
}

/// Runs one targeted attack from `x0`.
pub fn run_attack(model: &Mlp, x0: &Sample, config: &AttackConfig) -> Result<AttackTrajectory> {
    config.validate()?;
    let classes = model.num_classes();
    if classes < 2 {
        return Err(Error::config("attacks need a model with at least two classes"));
    }
    let c = config.target_class;
    if c >= classes {
        return Err(Error::config(format!(
            "target class {c} out of range for {classes} classes"
        )));
    }
    if x0.dim() != model.input_dim() {
        return Err(Error::Shape {
            expected: model.input_dim(),
            actual: x0.dim(),
        });
    }

    let initial_class = model.predict(x0.coords())?;
    let mut x = x0.clone();
    let mut records = Vec::new();
    let mut points = Vec::new();
    let mut first_flip = None;
    let mut step_l1 = 0.0;
    let mut clipped = false;

    let termination = 'run: {
        for n in 0..=config.max_iterations {
            let trace = model.forward(x.coords())?;
            let logits = trace.logits();
            let probs = softmax(logits)?;
            let predicted = argmax(&probs);
            let p = config.source.perturbation_from_trace(model, &trace, c)?;
            let grad_l1 = l1_norm(&p);
            let alpha = match compute_alpha(config.schedule, &p) {
                Ok(a) => Some(a),
                Err(Error::VanishedGradient) => None,
                Err(e) => return Err(e),
            };
            let offset = sub(x.coords(), x0.coords());
            let record = IterationRecord {
                iteration: n,
                predicted,
                softmax_initial: probs[initial_class],
                softmax_target: probs[c],
                logit_initial: logits[initial_class],
                logit_target: logits[c],
                grad_l1,
                alpha_used: alpha.unwrap_or(0.0),
                cum_l2: l2_norm(&offset),
                cum_linf: linf_norm(&offset),
                subspace: classify_subspace(&probs, c, DEFAULT_CONFIDENCE),
                step_l1,
                clipped,
            };
            records.push(record);
            points.push(x.coords().to_vec());

            if predicted == c && first_flip.is_none() {
                first_flip = Some(Flip {
                    iteration: n,
                    l2: record.cum_l2,
                    linf: record.cum_linf,
                });
            }
            match config.stop_rule {
                StopRule::FirstFlip if first_flip.is_some() => break 'run Termination::Flipped,
                StopRule::TargetConfidence(level) if probs[c] >= level => {
                    break 'run Termination::ReachedConfidence
                }
                _ => {}
            }
            if n == config.max_iterations {
                break 'run Termination::Exhausted;
            }
            let Some(alpha) = alpha else {
                break 'run Termination::VanishedGradient;
            };

            let candidate: Vec<f64> = x
                .coords()
                .iter()
                .zip(&p)
                .map(|(xi, pi)| xi + alpha * pi)
                .collect();
            let next = clip(&candidate, x0, config.epsilon_ball)?;
            clipped = next.coords() != candidate.as_slice();
            step_l1 = l1_norm(&sub(next.coords(), x.coords()));
            x = next;
        }
        unreachable!("the final iteration always terminates the loop")
    };

    Ok(AttackTrajectory {
        records,
        first_flip,
        final_sample: x,
        initial_class,
        termination,
        points,
    })
}
