//! Numerical checks of how the cross-entropy input gradient decomposes.
//!
//! For target class `c` and `d_m = ∇g_m − ∇g_c`, the exact identity
//!
//! ```text
//! ∇ₓJ = Σ_{m≠c} p_m · d_m,        p = softmax(g)
//! ```
//!
//! holds at every input. Its two limiting cases become finite-confidence
//! bounds:
//!
//! * confidently wrong class `r`: `‖∇ₓJ − d_r‖ / ‖d_r‖ ≤ 2 (1 − p_r) · R` with
//!   `R = max_m ‖d_m‖ / ‖d_r‖`;
//! * confidently target class: `‖∇ₓJ‖ ≤ (1 − p_c) · max_m ‖d_m‖`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::losses::{classify_subspace, PerturbationSource, SourceKind, Subspace};
use crate::net::{softmax, Mlp};
use crate::vector::{argmax, format_real, l2_norm, sub};

/// Denominator floor for relative errors of vanishing vectors.
pub const NORM_FLOOR: f64 = 1e-300;
/// Tolerance on the exact decomposition.
pub const IDENTITY_TOLERANCE: f64 = 1e-8;
/// Relative rounding allowance when comparing a norm with its bound; the
/// binary D3 bound is attained with equality.
pub const BOUND_SLACK: f64 = 1e-12;

pub const REPORT_HEADER: [&str; 7] = [
    "point_id",
    "subspace",
    "confidence",
    "residual",
    "grad_norm",
    "bound",
    "bound_satisfied",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremReport {
    pub subspace: Subspace,
    /// D1: relative error against `d_r`; D2: relative error of the exact
    /// identity; D3: `‖∇ₓJ‖ / max_m ‖d_m‖`.
    pub residual: f64,
    /// `p_r` in D1, `p_c` in D3, the largest probability in D2.
    pub confidence: f64,
    pub grad_norm: f64,
    /// Upper bound the checked quantity must respect (residual in D1 and D2,
    /// gradient norm in D3).
    pub bound: f64,
    /// Relative error of the exact identity at the same point.
    pub identity_error: f64,
}

impl TheoremReport {
    pub fn bound_satisfied(&self) -> bool {
        let checked = match self.subspace {
            Subspace::D3 => self.grad_norm,
            _ => self.residual,
        };
        checked <= self.bound * (1.0 + BOUND_SLACK) && self.identity_error <= IDENTITY_TOLERANCE
    }
}

/// `Σ_{m≠c} probs_m`, the total weight on the differences `d_m`.
pub fn beta_mass(probs: &[f64], c: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .filter(|&(m, _)| m != c)
        .map(|(_, p)| p)
        .sum::<f64>()
        .min(1.0)
}

struct Decomposition {
    probs: Vec<f64>,
    grad_ce: Vec<f64>,
    /// `d_m = ∇g_m − ∇g_c` for every class (zero for `m = c`).
    diffs: Vec<Vec<f64>>,
}

fn decompose(model: &Mlp, x: &[f64], c: usize) -> Result<Decomposition> {
    let grad_ce = model.grad_input_ce(x, c)?;
    let probs = softmax(&model.logits(x)?)?;
    let jac = model.logit_jacobian(x)?;
    let diffs = jac.iter().map(|row| sub(row, &jac[c])).collect();
    Ok(Decomposition {
        probs,
        grad_ce,
        diffs,
    })
}

fn identity_error(d: &Decomposition, c: usize) -> f64 {
    let mut sum = vec![0.0; d.grad_ce.len()];
    for (m, diff) in d.diffs.iter().enumerate() {
        if m == c {
            continue;
        }
        for (s, v) in sum.iter_mut().zip(diff) {
            *s += d.probs[m] * v;
        }
    }
    l2_norm(&sub(&d.grad_ce, &sum)) / l2_norm(&d.grad_ce).max(NORM_FLOOR)
}

fn max_diff_norm(d: &Decomposition) -> f64 {
    d.diffs.iter().map(|v| l2_norm(v)).fold(0.0, f64::max)
}

/// Relative error of `∇ₓJ = Σ_{m≠c} p_m (∇g_m − ∇g_c)` at `x`.
pub fn verify_d2_identity(model: &Mlp, x: &[f64], c: usize) -> Result<f64> {
    Ok(identity_error(&decompose(model, x, c)?, c))
}

/// Checks the wrong-class limit at a point predicted as some `r ≠ c`.
pub fn verify_d1_limit(model: &Mlp, x: &[f64], c: usize) -> Result<TheoremReport> {
    let d = decompose(model, x, c)?;
    let r = argmax(&d.probs);
    if r == c {
        return Err(Error::domain(format!("point is predicted as the target class {c}")));
    }
    let approx = &d.diffs[r];
    let approx_norm = l2_norm(approx).max(NORM_FLOOR);
    let ratio = max_diff_norm(&d) / approx_norm;
    Ok(TheoremReport {
        subspace: Subspace::D1,
        residual: l2_norm(&sub(&d.grad_ce, approx)) / approx_norm,
        confidence: d.probs[r],
        grad_norm: l2_norm(&d.grad_ce),
        bound: 2.0 * beta_mass(&d.probs, r) * ratio,
        identity_error: identity_error(&d, c),
    })
}

/// Checks the vanishing-gradient limit at a point predicted as `c`.
pub fn verify_d3_limit(model: &Mlp, x: &[f64], c: usize) -> Result<TheoremReport> {
    let d = decompose(model, x, c)?;
    if argmax(&d.probs) != c {
        return Err(Error::domain(format!("point is not predicted as the target class {c}")));
    }
    let max_diff = max_diff_norm(&d);
    let grad_norm = l2_norm(&d.grad_ce);
    Ok(TheoremReport {
        subspace: Subspace::D3,
        residual: grad_norm / max_diff.max(NORM_FLOOR),
        confidence: d.probs[c],
        grad_norm,
        bound: beta_mass(&d.probs, c) * max_diff,
        identity_error: identity_error(&d, c),
    })
}

/// True when every component of `∇ₓJ` is below `threshold` in magnitude
/// (or exactly zero), i.e. when the sign source has nothing left to follow.
pub fn verify_sign_saturation(model: &Mlp, x: &[f64], c: usize, threshold: f64) -> Result<bool> {
    let grad = model.grad_input_ce(x, c)?;
    let saturated = grad.iter().all(|g| g.abs() < threshold || *g == 0.0);
    debug_assert_eq!(
        saturated,
        PerturbationSource::new(SourceKind::CeSign)
            .with_sign_epsilon(threshold)?
            .perturbation(model, x, c)?
            .iter()
            .all(|v| *v == 0.0)
    );
    Ok(saturated)
}

/// Runs the check matching the subspace of `x`: the wrong-class bound in D1,
/// the exact identity in D2, the vanishing bound in D3.
pub fn verify_point(model: &Mlp, x: &[f64], c: usize, tau: f64) -> Result<TheoremReport> {
    let probs = softmax(&model.logits(x)?)?;
    match classify_subspace(&probs, c, tau) {
        Subspace::D1 => verify_d1_limit(model, x, c),
        Subspace::D3 => verify_d3_limit(model, x, c),
        Subspace::D2 => {
            let d = decompose(model, x, c)?;
            let err = identity_error(&d, c);
            Ok(TheoremReport {
                subspace: Subspace::D2,
                residual: err,
                confidence: d.probs[argmax(&d.probs)],
                grad_norm: l2_norm(&d.grad_ce),
                bound: IDENTITY_TOLERANCE,
                identity_error: err,
            })
        }
    }
}

pub fn write_theorem_report<W: Write>(reports: &[TheoremReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for (i, r) in reports.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.subspace.tag().to_string(),
            format_real(r.confidence),
            format_real(r.residual),
            format_real(r.grad_norm),
            format_real(r.bound),
            r.bound_satisfied().to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Layer};

    /// Binary linear model with logit gap `k · x₀`; class 1 leads for `x₀ > 0`.
    fn binary(k: f64) -> Mlp {
        let layer = Layer::new(vec![-k / 2.0, 0.3, k / 2.0, 0.3], vec![0.0; 2], 2, Activation::Identity)
            .unwrap();
        Mlp::new(vec![layer]).unwrap()
    }

    /// Gap `k · x₀` gives `p_1 = σ(k x₀)`; solve for the requested confidence.
    fn at_confidence(k: f64, p: f64) -> [f64; 2] {
        [(p / (1.0 - p)).ln() / k, 0.0]
    }

    #[test]
    fn beta_mass_examples() {
        let u = [1.0 / 3.0; 3];
        assert!((beta_mass(&u, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((beta_mass(&[0.9, 0.06, 0.04], 0) - 0.1).abs() < 1e-15);
        assert!(beta_mass(&[0.0, 0.5, 0.5], 0) <= 1.0);
    }

    #[test]
    fn binary_d1_residual_is_one_minus_confidence() {
        let model = binary(4.0);
        for p in [0.999, 0.5 + 1e-9] {
            // class 1 leads with p_1 = p; target is class 0
            let x = at_confidence(4.0, p);
            let rep = verify_d1_limit(&model, &x, 0).unwrap();
            assert!((rep.confidence - p).abs() < 1e-12);
            assert!((rep.residual - (1.0 - rep.confidence)).abs() < 1e-12);
            assert!(rep.bound_satisfied());
        }
        let mid = verify_d1_limit(&model, &[1e-12, 0.0], 0).unwrap();
        assert!((mid.residual - 0.5).abs() < 1e-9);
    }

    #[test]
    fn binary_d3_norm_closed_form() {
        let model = binary(4.0);
        let x = at_confidence(4.0, 0.9);
        let rep = verify_d3_limit(&model, &x, 1).unwrap();
        // ‖∇J‖ = (1 − p_c) ‖d_r‖ and ‖d_r‖ = 4
        assert!((rep.grad_norm - 0.1 * 4.0).abs() < 1e-12);
        assert!(rep.bound_satisfied());
        let x = at_confidence(4.0, 1.0 - 1e-12);
        let rep = verify_d3_limit(&model, &x, 1).unwrap();
        assert!(rep.grad_norm <= 1e-12 * 4.0 * (1.0 + 1e-3));
    }

    #[test]
    fn preconditions_are_enforced() {
        let model = binary(4.0);
        let x = at_confidence(4.0, 0.8);
        assert!(matches!(verify_d1_limit(&model, &x, 1), Err(Error::Domain(_))));
        assert!(matches!(verify_d3_limit(&model, &x, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn degenerate_point_uses_floor() {
        // probabilities saturate exactly: gradient and decomposition are both 0
        let model = binary(4000.0);
        let err = verify_d2_identity(&model, &[0.9, 0.0], 1).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sign_saturation_cases() {
        let model = binary(4.0);
        assert!(!verify_sign_saturation(&model, &at_confidence(4.0, 0.1), 1, 1e-16).unwrap());
        assert!(!verify_sign_saturation(&model, &[0.2, 0.0], 1, 0.0).unwrap());
        let deep = binary(4000.0);
        assert!(verify_sign_saturation(&deep, &[0.9, 0.0], 1, 0.0).unwrap());
        assert!(verify_sign_saturation(&binary(100.0), &[0.9, 0.0], 1, 1e-16).unwrap());
    }

    #[test]
    fn report_csv_header() {
        let model = binary(4.0);
        let reps = vec![verify_point(&model, &[0.5, 0.1], 1, 0.9).unwrap()];
        let mut buf = Vec::new();
        write_theorem_report(&reps, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "point_id,subspace,confidence,residual,grad_norm,bound,bound_satisfied"
        );
        assert!(lines.next().unwrap().starts_with("0,D2,"));
    }
}
