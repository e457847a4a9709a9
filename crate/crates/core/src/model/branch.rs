use rand::Rng;

use super::evidential::{head_activation, monig, NigVars};
use super::NetworkConfig;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::partition::{build_partition, PartitionSpec};
use crate::synth::Dataset;

/// Weight and bias of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        let (w, b) = store.add_affine(prefix, fan_in, fan_out, rng)?;
        Ok(Self { w, b })
    }

    pub fn apply(&self, g: &mut Graph, tag: usize, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(tag, store, self.w);
        let b = g.param(tag, store, self.b);
        g.affine(x, w, b)
    }
}

/// Graph handles produced by one branch forward pass.
#[derive(Debug, Clone)]
pub struct BranchGraph {
    /// Feature after each layer, `f^1 .. f^L` (the cross branch only exposes its final feature).
    pub features: Vec<Var>,
    /// `heads[d][g]`: local regressor `g` of output component `d`.
    pub heads: Vec<Vec<NigVars>>,
    /// Intra-fused output per component.
    pub fused: Vec<NigVars>,
}

/// Per-component sets of `G` local evidential regressors over a shared feature.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionLayers {
    pub heads: Vec<Vec<Affine>>,
    pub partitions: Vec<PartitionSpec>,
}

impl RegressionLayers {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        partitions: Vec<PartitionSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let heads = partitions
            .iter()
            .enumerate()
            .map(|(d, p)| {
                (0..p.group_count)
                    .map(|g| Affine::new(store, &format!("{prefix}/comp{d}/head{g}"), width, 4, rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { heads, partitions })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tag: usize,
        store: &ParamStore,
        feature: Var,
    ) -> Result<(Vec<Vec<NigVars>>, Vec<NigVars>)> {
        let mut heads = Vec::with_capacity(self.heads.len());
        let mut fused = Vec::with_capacity(self.heads.len());
        for (layer, partition) in self.heads.iter().zip(&self.partitions) {
            let outs = layer
                .iter()
                .zip(&partition.groups)
                .map(|(head, group)| {
                    let raw = head.apply(g, tag, store, feature)?;
                    head_activation(g, raw, group)
                })
                .collect::<Result<Vec<_>>>()?;
            fused.push(monig(g, &outs)?);
            heads.push(outs);
        }
        Ok((heads, fused))
    }
}

/// One partition per output component, built from a dataset's labels.
pub fn partitions_for(data: &Dataset, cfg: &NetworkConfig) -> Result<Vec<PartitionSpec>> {
    if data.output_dim() != cfg.output_components {
        return Err(Error::Shape(format!(
            "dataset {} has {} label components, network expects {}",
            data.domain_id,
            data.output_dim(),
            cfg.output_components
        )));
    }
    (0..cfg.output_components)
        .map(|d| build_partition(&data.component(d), cfg.group_count, cfg.overlap))
        .collect()
}

/// Feature layers plus local-regressor heads for a single source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleDatasetBranch {
    pub index: usize,
    pub dataset_id: String,
    pub store: ParamStore,
    pub layers: Vec<Affine>,
    pub regression: RegressionLayers,
}

impl SingleDatasetBranch {
    pub fn new<R: Rng>(
        index: usize,
        dataset_id: &str,
        cfg: &NetworkConfig,
        partitions: Vec<PartitionSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if partitions.len() != cfg.output_components
            || partitions.iter().any(|p| p.group_count != cfg.group_count)
        {
            return Err(Error::Shape(format!(
                "branch {index}: need {} partitions of {} groups",
                cfg.output_components, cfg.group_count
            )));
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(cfg.feature_layer_sizes.len());
        let mut width = cfg.input_dim;
        for (l, &size) in cfg.feature_layer_sizes.iter().enumerate() {
            layers.push(Affine::new(&mut store, &format!("branch{index}/layer{}", l + 1), width, size, rng)?);
            width = size;
        }
        let regression = RegressionLayers::new(&mut store, &format!("branch{index}"), width, partitions, rng)?;
        Ok(Self {
            index,
            dataset_id: dataset_id.to_string(),
            store,
            layers,
            regression,
        })
    }

    /// Builds the branch with partitions taken from `data`'s labels.
    pub fn for_dataset<R: Rng>(index: usize, data: &Dataset, cfg: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let partitions = partitions_for(data, cfg)?;
        Self::new(index, &data.domain_id, cfg, partitions, rng)
    }

    pub fn partitions(&self) -> &[PartitionSpec] {
        &self.regression.partitions
    }

    pub fn features(&self, g: &mut Graph, tag: usize, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let z = layer.apply(g, tag, &self.store, h)?;
            h = g.tanh(z);
            out.push(h);
        }
        Ok(out)
    }

    pub fn forward(&self, g: &mut Graph, tag: usize, x: Var) -> Result<BranchGraph> {
        let expected = self.store.get(self.layers[0].w).tensor.shape()[1];
        if g.value(x).cols() != expected {
            return Err(Error::Shape(format!(
                "branch {} expects input width {expected}, got {}",
                self.index,
                g.value(x).cols()
            )));
        }
        let features = self.features(g, tag, x)?;
        let last = *features.last().expect("at least one layer");
        let (heads, fused) = self.regression.forward(g, tag, &self.store, last)?;
        Ok(BranchGraph { features, heads, fused })
    }

    /// Copies feature-layer weights from another branch of the same shape.
    pub fn copy_backbone_from(&mut self, other: &SingleDatasetBranch) -> Result<()> {
        for (l, (mine, theirs)) in self.layers.iter().zip(&other.layers).enumerate() {
            for (dst, src) in [(mine.w, theirs.w), (mine.b, theirs.b)] {
                let value = other.store.get(src).tensor.clone();
                let name = self.store.get(dst).name.clone();
                self.store.assign(&name, value).map_err(|e| {
                    Error::Shape(format!("backbone layer {}: {e}", l + 1))
                })?;
            }
        }
        Ok(())
    }
}
