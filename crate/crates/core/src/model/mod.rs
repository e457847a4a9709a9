//! Network assembly: single-dataset branches, the cross-dataset branch and
//! the inter-branch evidential fusion.

mod baseline;
mod branch;
mod cross;
pub mod evidential;

pub use baseline::BaselineRegressor;
pub use branch::{partitions_for, Affine, BranchGraph, RegressionLayers, SingleDatasetBranch};
pub use cross::{gate_hidden_width, mff_forward, CrossDatasetBranch, Gate, MffModule};
pub use evidential::NigVars;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nig::{fusion_weights, uncertainty, NigParams, UncertaintyReport};
use crate::synth::Dataset;

/// Rows evaluated per graph during inference.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub feature_layer_sizes: Vec<usize>,
    /// 1-based layer at which the cross branch starts fusing (`K`).
    pub mff_start_layer: usize,
    pub group_count: usize,
    pub overlap: f64,
    pub output_components: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            feature_layer_sizes: vec![64, 64, 64, 64],
            mff_start_layer: 3,
            group_count: 8,
            overlap: 2.0,
            output_components: 2,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let depth = self.feature_layer_sizes.len();
        if self.input_dim == 0 {
            return Err(Error::Config("network.input_dim must be >= 1".into()));
        }
        if depth == 0 || self.feature_layer_sizes.contains(&0) {
            return Err(Error::Config("network.feature_layer_sizes must be non-empty and positive".into()));
        }
        if self.mff_start_layer == 0 || self.mff_start_layer > depth {
            return Err(Error::Config(format!(
                "network.mff_start_layer must be in [1, {depth}], got {}",
                self.mff_start_layer
            )));
        }
        if self.group_count == 0 {
            return Err(Error::Config("network.group_count must be >= 1".into()));
        }
        if self.output_components == 0 {
            return Err(Error::Config("network.output_components must be >= 1".into()));
        }
        if !self.overlap.is_finite() || self.overlap < 1.0 {
            return Err(Error::Config(format!("network.overlap must be >= 1, got {}", self.overlap)));
        }
        Ok(())
    }
}

/// Which branch outputs take part in the final fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionFlags {
    /// Include the cross-dataset branch (when one is attached).
    pub use_cross: bool,
    /// MoNIG across branches; when off only the cross branch's output is used.
    pub inter_fusion: bool,
}

impl Default for FusionFlags {
    fn default() -> Self {
        Self {
            use_cross: true,
            inter_fusion: true,
        }
    }
}

/// Normalized-evidence diagnostics for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardDiagnostics {
    /// `branch_weights[d][n]` over the fused participants (single branches, then cross).
    pub branch_weights: Vec<Vec<f64>>,
    /// `regressor_weights[n][d][g]` within each participant.
    pub regressor_weights: Vec<Vec<Vec<f64>>>,
    /// `branch_nig[n][d]`, each participant's intra-fused output.
    pub branch_nig: Vec<Vec<NigParams>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub nig: Vec<NigParams>,
    pub uncertainty: Vec<UncertaintyReport>,
    pub diagnostics: ForwardDiagnostics,
}

/// Graph handles of a full forward pass.
#[derive(Debug, Clone)]
pub struct EifGraph {
    pub branches: Vec<BranchGraph>,
    pub cross: Option<BranchGraph>,
    /// Outputs fused across branches, in fusion order.
    pub participants: Vec<Vec<NigVars>>,
    pub output: Vec<NigVars>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EifModel {
    pub config: NetworkConfig,
    pub branches: Vec<SingleDatasetBranch>,
    pub cross: Option<CrossDatasetBranch>,
    pub flags: FusionFlags,
}

impl EifModel {
    pub fn new(config: NetworkConfig, branches: Vec<SingleDatasetBranch>) -> Result<Self> {
        config.validate()?;
        if branches.is_empty() {
            return Err(Error::Precondition("an EIF model needs at least one branch".into()));
        }
        for (n, b) in branches.iter().enumerate() {
            if b.index != n {
                return Err(Error::Precondition(format!("branch at slot {n} has index {}", b.index)));
            }
            if b.layers.len() != config.feature_layer_sizes.len() {
                return Err(Error::Shape(format!("branch {n} depth differs from config")));
            }
        }
        Ok(Self {
            config,
            branches,
            cross: None,
            flags: FusionFlags::default(),
        })
    }

    /// Builds one branch per dataset, partitioned on that dataset's labels.
    pub fn for_sources<R: Rng>(config: NetworkConfig, sources: &[&Dataset], rng: &mut R) -> Result<Self> {
        let branches = sources
            .iter()
            .enumerate()
            .map(|(n, d)| SingleDatasetBranch::for_dataset(n, d, &config, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(config, branches)
    }

    /// Creates a fresh cross branch partitioned on the merged labels of `datasets`.
    pub fn attach_cross<R: Rng>(&mut self, datasets: &[&Dataset], rng: &mut R) -> Result<()> {
        let merged = Dataset::concat("merged", datasets);
        let partitions = partitions_for(&merged, &self.config)?;
        self.cross = Some(CrossDatasetBranch::new(&self.config, self.branches.len(), partitions, rng)?);
        Ok(())
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    /// Store tag of the cross branch; branch `n` uses tag `n`.
    pub fn cross_tag(&self) -> usize {
        self.branches.len()
    }

    fn cross_active(&self) -> bool {
        self.flags.use_cross && self.cross.is_some()
    }

    /// All parameter stores, branches first, then the cross branch.
    pub fn stores(&self) -> Vec<&ParamStore> {
        self.branches
            .iter()
            .map(|b| &b.store)
            .chain(self.cross.as_ref().map(|c| &c.store))
            .collect()
    }

    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<EifGraph> {
        if g.value(x).cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input width {} vs configured {}",
                g.value(x).cols(),
                self.config.input_dim
            )));
        }
        let branches = self
            .branches
            .iter()
            .enumerate()
            .map(|(n, b)| b.forward(g, n, x))
            .collect::<Result<Vec<_>>>()?;
        let cross = match (&self.cross, self.cross_active()) {
            (Some(c), true) => {
                let feats: Vec<Vec<Var>> = branches.iter().map(|b| b.features.clone()).collect();
                Some(c.forward(g, self.cross_tag(), &feats)?)
            }
            _ => None,
        };
        let participants: Vec<Vec<NigVars>> = if self.flags.inter_fusion {
            branches
                .iter()
                .map(|b| b.fused.clone())
                .chain(cross.iter().map(|c| c.fused.clone()))
                .collect()
        } else {
            let c = cross.as_ref().ok_or_else(|| {
                Error::Config("inter fusion disabled but no active cross branch".into())
            })?;
            vec![c.fused.clone()]
        };
        let output = if participants.len() == 1 {
            participants[0].clone()
        } else {
            (0..self.config.output_components)
                .map(|d| {
                    let items: Vec<NigVars> = participants.iter().map(|p| p[d]).collect();
                    evidential::monig(g, &items)
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(EifGraph {
            branches,
            cross,
            participants,
            output,
        })
    }

    /// Predictions, uncertainties and fusion diagnostics for every row of `x`.
    pub fn eif_forward(&self, x: &Tensor) -> Result<Vec<SampleOutput>> {
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(x.rows());
            let chunk = row_slice(x, start, end)?;
            let mut g = Graph::new();
            let xv = g.constant(chunk);
            let eg = self.forward_graph(&mut g, xv)?;
            let participant_heads: Vec<&Vec<Vec<NigVars>>> = eg
                .branches
                .iter()
                .map(|b| &b.heads)
                .chain(eg.cross.iter().map(|c| &c.heads))
                .collect();
            let participant_heads: Vec<&Vec<Vec<NigVars>>> = if self.flags.inter_fusion {
                participant_heads
            } else {
                vec![participant_heads[participant_heads.len() - 1]]
            };
            for row in 0..(end - start) {
                let nig: Vec<NigParams> = eg.output.iter().map(|v| v.at(&g, row)).collect();
                let uncertainty = nig.iter().map(uncertainty).collect::<Result<Vec<_>>>()?;
                let branch_nig: Vec<Vec<NigParams>> = eg
                    .participants
                    .iter()
                    .map(|p| p.iter().map(|v| v.at(&g, row)).collect())
                    .collect();
                let branch_weights = (0..self.config.output_components)
                    .map(|d| {
                        let items: Vec<NigParams> = branch_nig.iter().map(|b| b[d]).collect();
                        fusion_weights(&items)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let regressor_weights = participant_heads
                    .iter()
                    .map(|heads| {
                        heads
                            .iter()
                            .map(|layer| {
                                let items: Vec<NigParams> = layer.iter().map(|v| v.at(&g, row)).collect();
                                fusion_weights(&items)
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                out.push(SampleOutput {
                    nig,
                    uncertainty,
                    diagnostics: ForwardDiagnostics {
                        branch_weights,
                        regressor_weights,
                        branch_nig,
                    },
                });
            }
        }
        Ok(out)
    }

    /// Unweighted mean of the single-dataset branches' intra-fused predictions.
    pub fn average_fusion_predict(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(x.rows());
        let n = self.branches.len() as f64;
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(x.rows());
            let mut g = Graph::new();
            let xv = g.constant(row_slice(x, start, end)?);
            let fused = self
                .branches
                .iter()
                .enumerate()
                .map(|(i, b)| b.forward(&mut g, i, xv).map(|bg| bg.fused))
                .collect::<Result<Vec<_>>>()?;
            for row in 0..(end - start) {
                out.push(
                    (0..self.config.output_components)
                        .map(|d| fused.iter().map(|f| g.value(f[d].delta).values()[row]).sum::<f64>() / n)
                        .collect(),
                );
            }
        }
        Ok(out)
    }
}

/// Rows `start..end` of a 2-D tensor.
pub fn row_slice(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let c = x.cols();
    Tensor::matrix(end - start, c, x.values()[start * c..end * c].to_vec())
}

/// Stacks input vectors into an `[n, dim]` tensor.
pub fn inputs_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("ragged input rows".into()));
    }
    Tensor::matrix(rows.len(), dim, rows.iter().flatten().copied().collect())
}
