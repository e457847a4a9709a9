//! Graph-side evidential primitives: head activations, MoNIG fusion and the
//! evidential loss, built from the engine's differentiable nodes.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nig::NigParams;
use crate::partition::LabelGroup;

pub const GAMMA_FLOOR: f64 = 1e-4;
pub const ALPHA_FLOOR: f64 = 1e-4;
pub const BETA_FLOOR: f64 = 1e-4;

const HALF_LN_PI: f64 = 0.572_364_942_924_700_1;

/// Four `[n, 1]` columns holding one NIG output per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NigVars {
    pub delta: Var,
    pub gamma: Var,
    pub alpha: Var,
    pub beta: Var,
}

impl NigVars {
    /// The parameters of sample `row`.
    pub fn at(&self, g: &Graph, row: usize) -> NigParams {
        NigParams {
            delta: g.value(self.delta).values()[row],
            gamma: g.value(self.gamma).values()[row],
            alpha: g.value(self.alpha).values()[row],
            beta: g.value(self.beta).values()[row],
        }
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.delta).len()
    }
}

/// Maps a raw `[n, 4]` head output to a local regressor's NIG:
/// `delta = tanh(r0) * L/2 + center`, `gamma = softplus(r1) + floor`,
/// `alpha = 1 + softplus(r2) + floor`, `beta = softplus(r3) + floor`.
pub fn head_activation(g: &mut Graph, raw: Var, group: &LabelGroup) -> Result<NigVars> {
    let r0 = g.column(raw, 0)?;
    let r1 = g.column(raw, 1)?;
    let r2 = g.column(raw, 2)?;
    let r3 = g.column(raw, 3)?;
    let offset = g.tanh(r0);
    let scaled = g.scale(offset, group.length / 2.0);
    let delta = g.shift(scaled, group.center);
    let gamma = g.softplus(r1);
    let gamma = g.shift(gamma, GAMMA_FLOOR);
    let alpha = g.softplus(r2);
    let alpha = g.shift(alpha, 1.0 + ALPHA_FLOOR);
    let beta = g.softplus(r3);
    let beta = g.shift(beta, BETA_FLOOR);
    Ok(NigVars {
        delta,
        gamma,
        alpha,
        beta,
    })
}

/// M-ary MoNIG over `items`, computed per row.
pub fn monig(g: &mut Graph, items: &[NigVars]) -> Result<NigVars> {
    if items.is_empty() {
        return Err(Error::Precondition("cannot fuse an empty list".into()));
    }
    let m = items.len() as f64;
    let gammas: Vec<Var> = items.iter().map(|p| p.gamma).collect();
    let gamma = g.add_all(&gammas)?;
    let weighted = items
        .iter()
        .map(|p| g.mul(p.gamma, p.delta))
        .collect::<Result<Vec<_>>>()?;
    let weighted = g.add_all(&weighted)?;
    let delta = g.div(weighted, gamma)?;
    let alphas: Vec<Var> = items.iter().map(|p| p.alpha).collect();
    let alpha = g.add_all(&alphas)?;
    let alpha = g.shift(alpha, 1.0 / m);
    let mut spread = Vec::with_capacity(items.len());
    for p in items {
        let diff = g.sub(p.delta, delta)?;
        let sq = g.square(diff);
        spread.push(g.mul(p.gamma, sq)?);
    }
    let spread = g.add_all(&spread)?;
    let spread = g.scale(spread, 1.0 / m);
    let betas: Vec<Var> = items.iter().map(|p| p.beta).collect();
    let beta = g.add_all(&betas)?;
    let beta = g.add(beta, spread)?;
    Ok(NigVars {
        delta,
        gamma,
        alpha,
        beta,
    })
}

/// Per-sample evidential loss `nll + lambda * reg` as an `[n, 1]` column.
pub fn evidence_loss(g: &mut Graph, p: NigVars, y: Var, lambda: f64) -> Result<Var> {
    let r = g.sub(y, p.delta)?;
    let one_plus_gamma = g.shift(p.gamma, 1.0);
    let omega = g.mul(p.beta, one_plus_gamma)?;
    let omega = g.scale(omega, 2.0);
    let r2 = g.square(r);
    let spread = g.mul(r2, p.gamma)?;
    let inner = g.add(spread, omega)?;

    let log_gamma = g.log(p.gamma);
    let t1 = g.scale(log_gamma, -0.5);
    let t1 = g.shift(t1, HALF_LN_PI);
    let log_omega = g.log(omega);
    let t2 = g.mul(p.alpha, log_omega)?;
    let a_half = g.shift(p.alpha, 0.5);
    let log_inner = g.log(inner);
    let t3 = g.mul(a_half, log_inner)?;
    let lg_a = g.ln_gamma(p.alpha);
    let lg_ah = g.ln_gamma(a_half);
    let t4 = g.sub(lg_a, lg_ah)?;
    let nll = g.sub(t1, t2)?;
    let nll = g.add(nll, t3)?;
    let nll = g.add(nll, t4)?;

    let abs_r = g.abs(r);
    let two_gamma = g.scale(p.gamma, 2.0);
    let evidence = g.add(two_gamma, p.alpha)?;
    let reg = g.mul(abs_r, evidence)?;
    let reg = g.scale(reg, lambda);
    g.add(nll, reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::nig::{evidential_loss, monig_fuse};

    fn column(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::column(v.to_vec()))
    }

    fn nig_column(g: &mut Graph, ps: &[NigParams]) -> NigVars {
        let pick = |f: fn(&NigParams) -> f64| ps.iter().map(f).collect::<Vec<_>>();
        NigVars {
            delta: column(g, &pick(|p| p.delta)),
            gamma: column(g, &pick(|p| p.gamma)),
            alpha: column(g, &pick(|p| p.alpha)),
            beta: column(g, &pick(|p| p.beta)),
        }
    }

    #[test]
    fn graph_loss_matches_scalar_loss() {
        let ps = [
            NigParams::new(0.0, 1.0, 1.0, 0.5).unwrap(),
            NigParams::new(0.3, 2.5, 3.0, 0.7).unwrap(),
            NigParams::new(-1.0, 0.2, 1.5, 4.0).unwrap(),
        ];
        let ys = [1.0, 0.3, 2.0];
        let mut g = Graph::new();
        let p = nig_column(&mut g, &ps);
        let y = column(&mut g, &ys);
        let l = evidence_loss(&mut g, p, y, 0.01).unwrap();
        for i in 0..3 {
            let want = evidential_loss(&ps[i], ys[i], 0.01).unwrap().total;
            assert!((g.value(l).values()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_monig_matches_scalar_fusion() {
        let a = [NigParams::new(1.0, 2.0, 3.0, 4.0).unwrap(), NigParams::new(0.0, 1.0, 2.0, 1.0).unwrap()];
        let b = [NigParams::new(3.0, 1.0, 2.0, 1.0).unwrap(), NigParams::new(5.0, 0.5, 1.5, 2.0).unwrap()];
        let mut g = Graph::new();
        let va = nig_column(&mut g, &a);
        let vb = nig_column(&mut g, &b);
        let f = monig(&mut g, &[va, vb]).unwrap();
        for i in 0..2 {
            let want = monig_fuse(&[a[i], b[i]]).unwrap();
            let got = f.at(&g, i);
            assert!((got.delta - want.delta).abs() < 1e-12);
            assert!((got.gamma - want.gamma).abs() < 1e-12);
            assert!((got.alpha - want.alpha).abs() < 1e-12);
            assert!((got.beta - want.beta).abs() < 1e-12);
        }
    }

    #[test]
    fn head_outputs_respect_floors_for_extreme_raw_values() {
        let group = LabelGroup {
            index: 0,
            center: 1.0,
            left: 0.0,
            right: 3.0,
            length: 3.0,
        };
        let mut g = Graph::new();
        let raw = g.constant(
            Tensor::matrix(2, 4, vec![-800.0, -800.0, -800.0, -800.0, 800.0, 800.0, 800.0, 800.0])
                .unwrap(),
        );
        let p = head_activation(&mut g, raw, &group).unwrap();
        for row in 0..2 {
            let q = p.at(&g, row);
            assert!(q.validate().is_ok());
            assert!(q.alpha > 1.0 && q.gamma >= GAMMA_FLOOR && q.beta >= BETA_FLOOR);
            assert!(q.delta >= -0.5 && q.delta <= 2.5);
        }
    }
}
