//! Normal-Inverse-Gamma evidential outputs: losses, MoNIG fusion and the
//! aleatoric/epistemic split.

use crate::error::{Error, Result};
use crate::special::{digamma, ln_gamma};

const HALF_LN_PI: f64 = 0.572_364_942_924_700_1;

/// Shape values closer to 1 than this are rejected by [`uncertainty`].
pub const MIN_SHAPE_MARGIN: f64 = 1e-9;

/// The four evidential parameters `(delta, gamma, alpha, beta)`.
///
/// Construction checks finiteness, `gamma > 0`, `beta > 0` and `alpha >= 1`.
/// Network heads always emit `alpha > 1`; the closed endpoint is admitted so
/// the loss can be evaluated at `alpha = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigParams {
    pub delta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    pub fn new(delta: f64, gamma: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = Self {
            delta,
            gamma,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            delta,
            gamma,
            alpha,
            beta,
        } = *self;
        if !(delta.is_finite() && gamma.is_finite() && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::Domain(format!("non-finite NIG parameters {self:?}")));
        }
        if gamma <= 0.0 {
            return Err(Error::Domain(format!("gamma must be > 0, got {gamma}")));
        }
        if alpha < 1.0 {
            return Err(Error::Domain(format!("alpha must be > 1, got {alpha}")));
        }
        if beta <= 0.0 {
            return Err(Error::Domain(format!("beta must be > 0, got {beta}")));
        }
        Ok(())
    }
}

/// Decomposed evidential loss; `total == nll + lambda * reg`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvidentialLossParts {
    pub nll: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Partial derivatives of the total evidential loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NigGradient {
    pub delta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Prediction with its aleatoric (`E[sigma^2]`) and epistemic (`Var[mu]`) parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyReport {
    pub prediction: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
}

fn check_label(y: f64) -> Result<()> {
    if y.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("label must be finite, got {y}")))
    }
}

/// `(Omega, (y - delta)^2 gamma + Omega)` with overflow detection.
fn log_arguments(p: &NigParams, y: f64) -> Result<(f64, f64)> {
    let omega = 2.0 * p.beta * (1.0 + p.gamma);
    let r = y - p.delta;
    let inner = r * r * p.gamma + omega;
    if !omega.is_finite() || !inner.is_finite() {
        return Err(Error::NumericRange(format!(
            "log argument overflow for {p:?}, y={y}"
        )));
    }
    Ok((omega, inner))
}

/// Negative log-likelihood of `y` under the Student-t marginal of `p`.
pub fn nig_nll(p: &NigParams, y: f64) -> Result<f64> {
    p.validate()?;
    check_label(y)?;
    let (omega, inner) = log_arguments(p, y)?;
    let nll = HALF_LN_PI - 0.5 * p.gamma.ln() - p.alpha * omega.ln()
        + (p.alpha + 0.5) * inner.ln()
        + ln_gamma(p.alpha)
        - ln_gamma(p.alpha + 0.5);
    if !nll.is_finite() {
        return Err(Error::NumericRange(format!("nll not finite for {p:?}, y={y}")));
    }
    Ok(nll)
}

/// Evidence regularizer `|y - delta| * (2 gamma + alpha)`.
pub fn nig_reg(p: &NigParams, y: f64) -> Result<f64> {
    p.validate()?;
    check_label(y)?;
    Ok((y - p.delta).abs() * (2.0 * p.gamma + p.alpha))
}

pub fn evidential_loss(p: &NigParams, y: f64, lambda: f64) -> Result<EvidentialLossParts> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Precondition(format!(
            "lambda must be a finite value > 0, got {lambda}"
        )));
    }
    let nll = nig_nll(p, y)?;
    let reg = nig_reg(p, y)?;
    Ok(EvidentialLossParts {
        nll,
        reg,
        total: nll + lambda * reg,
        lambda,
    })
}

/// Closed-form gradient of `evidential_loss(p, y, lambda).total`.
///
/// At `y == delta` the regularizer's subgradient is taken as zero.
pub fn evidential_loss_grad(p: &NigParams, y: f64, lambda: f64) -> Result<NigGradient> {
    evidential_loss(p, y, lambda)?;
    let (_, inner) = log_arguments(p, y)?;
    let NigParams {
        gamma,
        alpha,
        beta,
        delta,
    } = *p;
    let r = y - delta;
    let a_half = alpha + 0.5;
    let sign = if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    };
    let omega = 2.0 * beta * (1.0 + gamma);
    Ok(NigGradient {
        delta: -2.0 * a_half * r * gamma / inner - lambda * sign * (2.0 * gamma + alpha),
        gamma: -0.5 / gamma - alpha / (1.0 + gamma)
            + a_half * (r * r + 2.0 * beta) / inner
            + lambda * 2.0 * r.abs(),
        alpha: inner.ln() - omega.ln() + digamma(alpha) - digamma(alpha + 0.5) + lambda * r.abs(),
        beta: -alpha / beta + a_half * 2.0 * (1.0 + gamma) / inner,
    })
}

/// M-ary MoNIG fusion.
///
/// The `1/M` terms make this differ from chaining binary fusions, so it is
/// only offered in one-shot form.
pub fn monig_fuse(inputs: &[NigParams]) -> Result<NigParams> {
    if inputs.is_empty() {
        return Err(Error::Precondition("cannot fuse an empty list".into()));
    }
    for p in inputs {
        p.validate()?;
    }
    let m = inputs.len() as f64;
    let gamma: f64 = inputs.iter().map(|p| p.gamma).sum();
    let delta = inputs.iter().map(|p| p.gamma * p.delta).sum::<f64>() / gamma;
    let alpha = inputs.iter().map(|p| p.alpha).sum::<f64>() + 1.0 / m;
    let dispersion: f64 = inputs
        .iter()
        .map(|p| p.gamma * (p.delta - delta).powi(2))
        .sum();
    let beta = inputs.iter().map(|p| p.beta).sum::<f64>() + dispersion / m;
    NigParams::new(delta, gamma, alpha, beta)
        .map_err(|e| Error::NumericRange(format!("fused parameters invalid: {e}")))
}

/// Normalized evidence `gamma_i / sum(gamma)`, the weights MoNIG applies to each delta.
pub fn fusion_weights(inputs: &[NigParams]) -> Result<Vec<f64>> {
    if inputs.is_empty() {
        return Err(Error::Precondition("no inputs to weight".into()));
    }
    let total: f64 = inputs.iter().map(|p| p.gamma).sum();
    Ok(inputs.iter().map(|p| p.gamma / total).collect())
}

pub fn uncertainty(p: &NigParams) -> Result<UncertaintyReport> {
    p.validate()?;
    if p.alpha <= 1.0 + MIN_SHAPE_MARGIN {
        return Err(Error::Domain(format!(
            "alpha={} too close to 1 for finite uncertainty",
            p.alpha
        )));
    }
    let aleatoric = p.beta / (p.alpha - 1.0);
    Ok(UncertaintyReport {
        prediction: p.delta,
        aleatoric,
        epistemic: aleatoric / p.gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nig(d: f64, g: f64, a: f64, b: f64) -> NigParams {
        NigParams::new(d, g, a, b).unwrap()
    }

    #[test]
    fn nll_hand_values() {
        let p = nig(0.0, 1.0, 1.0, 0.5);
        assert!((nig_nll(&p, 0.0).unwrap() - 1.5 * 2f64.ln()).abs() < 1e-9);
        assert!((nig_nll(&p, 1.0).unwrap() - 1.5 * 3f64.ln()).abs() < 1e-9);
        assert!((nig_nll(&p, 0.0).unwrap() - 1.039_720_771).abs() < 1e-9);
        assert!((nig_nll(&p, 1.0).unwrap() - 1.647_918_433).abs() < 1e-9);
    }

    #[test]
    fn nll_symmetric_about_delta() {
        let p = nig(1.0, 0.8, 2.5, 1.3);
        let a = nig_nll(&p, 1.7).unwrap();
        let b = nig_nll(&p, 0.3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn nll_overflow_is_reported() {
        let p = nig(0.0, 1e300, 2.0, 1e300);
        assert!(matches!(nig_nll(&p, 1.0), Err(Error::NumericRange(_))));
        let p = nig(0.0, 1e200, 2.0, 1.0);
        assert!(matches!(nig_nll(&p, 1e200), Err(Error::NumericRange(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(NigParams::new(0.0, 0.0, 2.0, 1.0).is_err());
        assert!(NigParams::new(0.0, 1.0, 0.9, 1.0).is_err());
        assert!(NigParams::new(0.0, 1.0, 2.0, -1.0).is_err());
        assert!(NigParams::new(f64::NAN, 1.0, 2.0, 1.0).is_err());
        let raw = NigParams {
            delta: 0.0,
            gamma: -1.0,
            alpha: 2.0,
            beta: 1.0,
        };
        assert!(matches!(nig_nll(&raw, 0.0), Err(Error::Domain(_))));
        assert!(nig_nll(&nig(0.0, 1.0, 2.0, 1.0), f64::INFINITY).is_err());
    }

    #[test]
    fn reg_hand_values() {
        assert_eq!(nig_reg(&nig(1.0, 2.0, 3.0, 7.0), 3.0).unwrap(), 14.0);
        assert_eq!(nig_reg(&nig(0.4, 2.0, 3.0, 7.0), 0.4).unwrap(), 0.0);
        assert_eq!(nig_reg(&nig(0.0, 0.5, 1.5, 1.0), -1.0).unwrap(), 2.5);
    }

    #[test]
    fn evidential_loss_hand_values() {
        let p = nig(0.0, 1.0, 1.0, 0.5);
        let l0 = evidential_loss(&p, 0.0, 0.01).unwrap();
        assert!((l0.total - 1.039_720_771).abs() < 1e-9);
        assert_eq!(l0.reg, 0.0);
        let l1 = evidential_loss(&p, 1.0, 0.01).unwrap();
        assert_eq!(l1.reg, 3.0);
        assert!((l1.total - 1.677_918_433).abs() < 1e-9);
        assert_eq!(l1.total, l1.nll + l1.lambda * l1.reg);
        assert!(matches!(
            evidential_loss(&p, 0.0, 0.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn fuse_hand_values() {
        let single = monig_fuse(&[nig(2.0, 1.5, 2.0, 1.0)]).unwrap();
        assert_eq!(single, nig(2.0, 1.5, 3.0, 1.0));

        let p = nig(0.7, 1.2, 2.5, 0.9);
        let twin = monig_fuse(&[p, p]).unwrap();
        assert!((twin.delta - 0.7).abs() < 1e-15);
        assert_eq!(twin.gamma, 2.4);
        assert_eq!(twin.alpha, 5.5);
        assert!((twin.beta - 1.8).abs() < 1e-15);

        let f = monig_fuse(&[nig(1.0, 2.0, 3.0, 4.0), nig(3.0, 1.0, 2.0, 1.0)]).unwrap();
        assert!((f.delta - 5.0 / 3.0).abs() < 1e-14);
        assert_eq!(f.gamma, 3.0);
        assert_eq!(f.alpha, 5.5);
        assert!((f.beta - 19.0 / 3.0).abs() < 1e-14);

        assert!(matches!(monig_fuse(&[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn weights_hand_values() {
        let w = fusion_weights(&[nig(0.0, 2.0, 2.0, 1.0), nig(0.0, 1.0, 2.0, 1.0)]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let w = fusion_weights(&[nig(0.0, 0.3, 2.0, 1.0); 4]).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(fusion_weights(&[nig(5.0, 9.0, 2.0, 1.0)]).unwrap(), vec![1.0]);
    }

    #[test]
    fn uncertainty_hand_values() {
        let u = uncertainty(&nig(1.2, 2.0, 3.0, 4.0)).unwrap();
        assert_eq!((u.prediction, u.aleatoric, u.epistemic), (1.2, 2.0, 1.0));
        let u = uncertainty(&nig(0.0, 1.0, 2.0, 1.0)).unwrap();
        assert_eq!((u.prediction, u.aleatoric, u.epistemic), (0.0, 1.0, 1.0));
        assert!(uncertainty(&nig(0.0, 1.0, 1.0, 1.0)).is_err());
        assert!(uncertainty(&nig(0.0, 1.0, 1.0 + 1e-10, 1.0)).is_err());
    }

    fn valid_nig() -> impl Strategy<Value = NigParams> {
        (-10.0..10.0f64, 0.01..10.0f64, 1.01..10.0f64, 0.01..10.0f64)
            .prop_map(|(d, g, a, b)| nig(d, g, a, b))
    }

    proptest! {
        #[test]
        fn fused_delta_is_convex(list in prop::collection::vec(valid_nig(), 1..16)) {
            let f = monig_fuse(&list).unwrap();
            let lo = list.iter().map(|p| p.delta).fold(f64::INFINITY, f64::min);
            let hi = list.iter().map(|p| p.delta).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f.delta >= lo - 1e-12 && f.delta <= hi + 1e-12);
            prop_assert!(f.beta >= list.iter().map(|p| p.beta).sum::<f64>());
        }

        #[test]
        fn fusion_weight_scale_invariance(list in prop::collection::vec(valid_nig(), 1..10), c in 0.1..10.0f64) {
            let scaled: Vec<_> = list.iter().map(|p| nig(p.delta, p.gamma * c, p.alpha, p.beta)).collect();
            let w0 = fusion_weights(&list).unwrap();
            let w1 = fusion_weights(&scaled).unwrap();
            for (a, b) in w0.iter().zip(&w1) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let d0 = monig_fuse(&list).unwrap().delta;
            let d1 = monig_fuse(&scaled).unwrap().delta;
            prop_assert!((d0 - d1).abs() <= 1e-12 * (1.0 + d0.abs()));
        }

        #[test]
        fn reg_zero_iff_on_target(p in valid_nig(), t in -5.0..5.0f64) {
            let r = nig_reg(&p, p.delta + t).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert_eq!(r == 0.0, t == 0.0);
        }

        #[test]
        fn nll_monotone_in_residual(p in valid_nig(), a in 0.0..5.0f64, b in 0.0..5.0f64) {
            let (near, far) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(nig_nll(&p, p.delta + near).unwrap() <= nig_nll(&p, p.delta + far).unwrap() + 1e-12);
        }

        #[test]
        fn loss_gradient_matches_finite_differences(p in valid_nig(), y in -10.0..10.0f64) {
            prop_assume!((y - p.delta).abs() > 1e-3);
            let lambda = 0.01;
            let g = evidential_loss_grad(&p, y, lambda).unwrap();
            let f = |q: NigParams| evidential_loss(&q, y, lambda).unwrap().total;
            let checks = [
                (g.delta, 1e-5 * p.delta.abs().max(1e-2), 0usize),
                (g.gamma, 1e-5 * p.gamma, 1),
                (g.alpha, 1e-5 * (p.alpha - 1.0).min(p.alpha), 2),
                (g.beta, 1e-5 * p.beta, 3),
            ];
            for (analytic, h, which) in checks {
                let shift = |s: f64| {
                    let mut q = p;
                    match which {
                        0 => q.delta += s,
                        1 => q.gamma += s,
                        2 => q.alpha += s,
                        _ => q.beta += s,
                    }
                    q
                };
                let fd = (f(shift(h)) - f(shift(-h))) / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                prop_assert!(rel < 1e-4, "param {} analytic {} fd {}", which, analytic, fd);
            }
        }
    }
}
