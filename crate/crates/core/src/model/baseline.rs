use rand::Rng;

use super::branch::Affine;
use super::{row_slice, NetworkConfig};
use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Plain point regressor: the branch backbone with one affine output per component.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRegressor {
    pub store: ParamStore,
    pub layers: Vec<Affine>,
    pub heads: Vec<Affine>,
}

impl BaselineRegressor {
    pub fn new<R: Rng>(cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut width = cfg.input_dim;
        let mut layers = Vec::new();
        for (l, &size) in cfg.feature_layer_sizes.iter().enumerate() {
            layers.push(Affine::new(&mut store, &format!("baseline/layer{}", l + 1), width, size, rng)?);
            width = size;
        }
        let heads = (0..cfg.output_components)
            .map(|d| Affine::new(&mut store, &format!("baseline/comp{d}"), width, 1, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { store, layers, heads })
    }

    /// One `[n, 1]` prediction column per component.
    pub fn forward(&self, g: &mut Graph, tag: usize, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        for layer in &self.layers {
            let z = layer.apply(g, tag, &self.store, h)?;
            h = g.tanh(z);
        }
        self.heads.iter().map(|head| head.apply(g, tag, &self.store, h)).collect()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(256) {
            let end = (start + 256).min(x.rows());
            let mut g = Graph::new();
            let xv = g.constant(row_slice(x, start, end)?);
            let cols = self.forward(&mut g, 0, xv)?;
            for row in 0..(end - start) {
                out.push(cols.iter().map(|c| g.value(*c).values()[row]).collect());
            }
        }
        Ok(out)
    }
}
