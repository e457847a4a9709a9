//! The cross-dataset branch and its multi-feature fusion (MFF) cascade.
//!
//! At every fusion level each incoming feature is first passed through its
//! own dense projection, then the projected features are folded pairwise
//! with a learned sigmoid gate: `out = s * a + (1 - s) * b`, where
//! `s = sigmoid(W2 tanh(W1 [a; b] + b1) + b2)`. Branch features are folded
//! in branch order and the cross branch's own feature comes last.

use rand::Rng;

use super::branch::{Affine, BranchGraph, RegressionLayers};
use super::NetworkConfig;
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::partition::PartitionSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gate {
    pub hidden: Affine,
    pub out: Affine,
}

impl Gate {
    fn fuse(&self, g: &mut Graph, tag: usize, store: &ParamStore, a: Var, b: Var) -> Result<Var> {
        let joined = g.concat(&[a, b])?;
        let h = self.hidden.apply(g, tag, store, joined)?;
        let h = g.tanh(h);
        let s = self.out.apply(g, tag, store, h)?;
        let s = g.sigmoid(s);
        let keep = g.mul(s, a)?;
        let rest = g.one_minus(s);
        let other = g.mul(rest, b)?;
        g.add(keep, other)
    }
}

pub fn gate_hidden_width(width: usize) -> usize {
    (width / 4).max(4)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MffModule {
    /// 1-based feature level this module fuses.
    pub level: usize,
    pub projections: Vec<Affine>,
    pub gates: Vec<Gate>,
    /// Whether the previous cross feature is an input.
    pub takes_previous: bool,
}

impl MffModule {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        level: usize,
        branch_count: usize,
        width: usize,
        takes_previous: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let inputs = branch_count + usize::from(takes_previous);
        let prefix = format!("cross/mff{level}");
        let projections = (0..inputs)
            .map(|i| Affine::new(store, &format!("{prefix}/proj{i}"), width, width, rng))
            .collect::<Result<Vec<_>>>()?;
        let hidden = gate_hidden_width(width);
        let gates = (0..inputs.saturating_sub(1))
            .map(|j| {
                Ok(Gate {
                    hidden: Affine::new(store, &format!("{prefix}/gate{j}/hidden"), 2 * width, hidden, rng)?,
                    out: Affine::new(store, &format!("{prefix}/gate{j}/out"), hidden, width, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            level,
            projections,
            gates,
            takes_previous,
        })
    }

    /// Number of pairwise gated fusions this module performs.
    pub fn fusion_count(&self) -> usize {
        self.gates.len()
    }
}

pub fn mff_forward(
    module: &MffModule,
    g: &mut Graph,
    tag: usize,
    store: &ParamStore,
    branch_features: &[Var],
    previous: Option<Var>,
) -> Result<Var> {
    if previous.is_some() != module.takes_previous {
        return Err(Error::Usage(format!(
            "MFF level {}: previous cross feature {}",
            module.level,
            if module.takes_previous { "required" } else { "not expected" }
        )));
    }
    let inputs: Vec<Var> = branch_features.iter().copied().chain(previous).collect();
    if inputs.len() != module.projections.len() {
        return Err(Error::Shape(format!(
            "MFF level {}: {} inputs for {} projections",
            module.level,
            inputs.len(),
            module.projections.len()
        )));
    }
    let projected = inputs
        .iter()
        .zip(&module.projections)
        .map(|(&x, p)| p.apply(g, tag, store, x))
        .collect::<Result<Vec<_>>>()?;
    let width = g.value(projected[0]).cols();
    if projected.iter().any(|&p| g.value(p).cols() != width) {
        return Err(Error::Shape(format!("MFF level {}: widths differ after projection", module.level)));
    }
    let mut acc = projected[0];
    for (gate, &next) in module.gates.iter().zip(&projected[1..]) {
        acc = gate.fuse(g, tag, store, acc, next)?;
    }
    Ok(acc)
}

/// Fuses branch features from level `K` upward and carries its own regression layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossDatasetBranch {
    pub store: ParamStore,
    pub branch_count: usize,
    pub mff: Vec<MffModule>,
    /// `(level, layer)` for the cross branch's own layers above `K`.
    pub layers: Vec<(usize, Affine)>,
    pub regression: RegressionLayers,
}

impl CrossDatasetBranch {
    /// MFF modules sit at levels `K..L-1` and the cross branch's own layers
    /// at `K+1..L`. When `K == L` a single module at level `L` produces the
    /// final feature directly.
    pub fn new<R: Rng>(
        cfg: &NetworkConfig,
        branch_count: usize,
        partitions: Vec<PartitionSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if branch_count == 0 {
            return Err(Error::Precondition("cross branch needs at least one source branch".into()));
        }
        let sizes = &cfg.feature_layer_sizes;
        let depth = sizes.len();
        let k = cfg.mff_start_layer;
        let mut store = ParamStore::new();
        let mut mff = Vec::new();
        let mut layers = Vec::new();
        let last_fused = if k == depth { depth } else { depth - 1 };
        for level in k..=last_fused {
            mff.push(MffModule::new(&mut store, level, branch_count, sizes[level - 1], level > k, rng)?);
        }
        for level in (k + 1)..=depth {
            layers.push((
                level,
                Affine::new(&mut store, &format!("cross/layer{level}"), sizes[level - 2], sizes[level - 1], rng)?,
            ));
        }
        let regression = RegressionLayers::new(&mut store, "cross", sizes[depth - 1], partitions, rng)?;
        Ok(Self {
            store,
            branch_count,
            mff,
            layers,
            regression,
        })
    }

    pub fn partitions(&self) -> &[PartitionSpec] {
        &self.regression.partitions
    }

    /// Widths of the cross branch's own layers, level by level.
    pub fn layer_widths(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .map(|(level, a)| (*level, self.store.get(a.w).tensor.shape()[0]))
            .collect()
    }

    /// `branch_features[n][l]` is feature `f^{l+1}` of branch `n`.
    pub fn forward(&self, g: &mut Graph, tag: usize, branch_features: &[Vec<Var>]) -> Result<BranchGraph> {
        if branch_features.len() != self.branch_count {
            return Err(Error::Shape(format!(
                "cross branch built for {} branches, got {}",
                self.branch_count,
                branch_features.len()
            )));
        }
        let at_level = |level: usize| -> Vec<Var> { branch_features.iter().map(|f| f[level - 1]).collect() };
        let first = &self.mff[0];
        let mut fused = mff_forward(first, g, tag, &self.store, &at_level(first.level), None)?;
        let mut features = vec![fused];
        for (level, layer) in &self.layers {
            let z = layer.apply(g, tag, &self.store, fused)?;
            let h = g.tanh(z);
            fused = match self.mff.iter().find(|m| m.level == *level) {
                Some(module) => mff_forward(module, g, tag, &self.store, &at_level(*level), Some(h))?,
                None => h,
            };
            features.push(fused);
        }
        let (heads, outputs) = self.regression.forward(g, tag, &self.store, fused)?;
        Ok(BranchGraph {
            features,
            heads,
            fused: outputs,
        })
    }
}
