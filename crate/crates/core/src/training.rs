//! Stage-1 and stage-2 training, baselines, few-shot adaptation and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, clip_global_norm, AdamState, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::evidential::evidence_loss;
use crate::model::{
    inputs_tensor, BaselineRegressor, BranchGraph, EifModel, NetworkConfig, NigVars,
    SingleDatasetBranch,
};
use crate::nig::UncertaintyReport;
use crate::partition::PartitionSpec;
use crate::synth::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub stage1_batches: usize,
    pub stage2_batches: usize,
    pub seed: u64,
    pub freeze_backbones_stage2: bool,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            learning_rate: 1e-4,
            batch_size: 64,
            stage1_batches: 4000,
            stage2_batches: 500,
            seed: 0,
            freeze_backbones_stage2: false,
            clip_norm: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("train.lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("train.clip_norm must be > 0, got {c}")));
            }
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

// RNG streams, so each phase draws independently of the others.
const STREAM_STAGE1: u64 = 1;
const STREAM_STAGE2: u64 = 2;
const STREAM_BASELINE: u64 = 3;
const STREAM_ADAPT: u64 = 4;

/// A sampled mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[n, input_dim]`.
    pub x: Tensor,
    /// `y[d]` holds component `d` of every sample.
    pub y: Vec<Vec<f64>>,
    /// Index of the dataset each sample came from.
    pub source: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Gathers `(dataset, sample)` picks into tensors.
    pub fn gather(datasets: &[&Dataset], picks: &[(usize, usize)]) -> Result<Batch> {
        let rows: Vec<Vec<f64>> = picks.iter().map(|&(d, i)| datasets[d].inputs[i].clone()).collect();
        let x = inputs_tensor(&rows)?;
        let dim = picks.first().map_or(0, |&(d, _)| datasets[d].output_dim());
        let y = (0..dim)
            .map(|c| picks.iter().map(|&(d, i)| datasets[d].labels[i][c]).collect())
            .collect();
        Ok(Batch {
            x,
            y,
            source: picks.iter().map(|&(d, _)| d).collect(),
        })
    }

    fn label_vars(&self, g: &mut Graph) -> Vec<Var> {
        self.y.iter().map(|col| g.constant(Tensor::column(col.clone()))).collect()
    }
}

/// Uniform draws with replacement from a single dataset.
pub fn uniform_batch_sampler<R: Rng>(data: &Dataset, batch_size: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if data.is_empty() {
        return Err(Error::Precondition(format!("dataset {} is empty", data.domain_id)));
    }
    Ok((0..batch_size).map(|_| (0, rng.gen_range(0..data.len()))).collect())
}

/// Uniform draws over the union of `datasets`, so shares follow dataset sizes.
pub fn concatenated_batch_sampler<R: Rng>(
    datasets: &[&Dataset],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let total: usize = datasets.iter().map(|d| d.len()).sum();
    if total == 0 {
        return Err(Error::Precondition("no samples to draw from".into()));
    }
    Ok((0..batch_size)
        .map(|_| {
            let mut k = rng.gen_range(0..total);
            let mut d = 0;
            while k >= datasets[d].len() {
                k -= datasets[d].len();
                d += 1;
            }
            (d, k)
        })
        .collect())
}

/// Picks a dataset uniformly, then a sample uniformly inside it.
pub fn balanced_batch_sampler<R: Rng>(
    datasets: &[&Dataset],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    if datasets.is_empty() {
        return Err(Error::Precondition("balanced sampling needs at least one dataset".into()));
    }
    if batch_size < datasets.len() {
        return Err(Error::Precondition(format!(
            "batch size {batch_size} is smaller than the number of datasets {}",
            datasets.len()
        )));
    }
    if let Some(d) = datasets.iter().find(|d| d.is_empty()) {
        return Err(Error::Precondition(format!("dataset {} is empty", d.domain_id)));
    }
    Ok((0..batch_size)
        .map(|_| {
            let d = rng.gen_range(0..datasets.len());
            (d, rng.gen_range(0..datasets[d].len()))
        })
        .collect())
}

/// Loss terms of one branch on one batch.
#[derive(Debug, Clone)]
pub struct BranchLoss {
    /// `local[d][g]`: masked mean over the samples inside group `g`, `None` when the group is empty.
    pub local: Vec<Vec<Option<Var>>>,
    /// `global[d]`: mean over the batch through the intra-fused output.
    pub global: Vec<Var>,
    pub total: Var,
}

/// Local terms over group members plus the global term, summed over components.
pub fn branch_loss(
    g: &mut Graph,
    bg: &BranchGraph,
    partitions: &[PartitionSpec],
    y: &[Var],
    labels: &[Vec<f64>],
    lambda: f64,
) -> Result<BranchLoss> {
    let mut local = Vec::with_capacity(partitions.len());
    let mut global = Vec::with_capacity(partitions.len());
    let mut terms = Vec::new();
    for (d, partition) in partitions.iter().enumerate() {
        let n = labels[d].len();
        let mut masks = vec![vec![0.0; n]; partition.group_count];
        for (i, &label) in labels[d].iter().enumerate() {
            for gi in partition.membership(label) {
                masks[gi][i] = 1.0;
            }
        }
        let mut per_group = Vec::with_capacity(partition.group_count);
        for (gi, mask) in masks.into_iter().enumerate() {
            let count = mask.iter().sum::<f64>();
            if count == 0.0 {
                per_group.push(None);
                continue;
            }
            let l = evidence_loss(g, bg.heads[d][gi], y[d], lambda)?;
            let w = g.constant(Tensor::column(mask.iter().map(|m| m / count).collect()));
            let weighted = g.mul(l, w)?;
            let term = g.sum(weighted);
            terms.push(term);
            per_group.push(Some(term));
        }
        local.push(per_group);
        let l = evidence_loss(g, bg.fused[d], y[d], lambda)?;
        let term = g.mean(l);
        terms.push(term);
        global.push(term);
    }
    let total = g.add_all(&terms)?;
    Ok(BranchLoss { local, global, total })
}

/// Mean evidence loss of `out` summed over components.
pub fn output_loss(g: &mut Graph, out: &[NigVars], y: &[Var], lambda: f64) -> Result<Var> {
    let terms = out
        .iter()
        .zip(y)
        .map(|(p, &yv)| {
            let l = evidence_loss(g, *p, yv, lambda)?;
            Ok(g.mean(l))
        })
        .collect::<Result<Vec<_>>>()?;
    g.add_all(&terms)
}

fn check_finite(loss: f64, what: &str, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericRange(format!("{what} loss is {loss} at batch {batch}")))
    }
}

/// Accumulates gradients for the tagged stores, clips and steps them.
fn optimize(
    g: &Graph,
    loss: Var,
    stores: &mut [(usize, &mut ParamStore, &mut AdamState)],
    clip: Option<f64>,
    batch: usize,
) -> Result<()> {
    let grads = g.backward(loss)?;
    if !grads.is_finite() {
        return Err(Error::NumericRange(format!("non-finite gradient at batch {batch}")));
    }
    for (tag, store, _) in stores.iter_mut() {
        store.zero_grads();
        grads.accumulate_into(*tag, store);
    }
    if let Some(max) = clip {
        let mut refs: Vec<&mut ParamStore> = stores.iter_mut().map(|(_, s, _)| &mut **s).collect();
        clip_global_norm(&mut refs, max);
    }
    for (_, store, state) in stores.iter_mut() {
        adam_step(store, state);
    }
    Ok(())
}

/// Outcome of stage-1 training.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Report {
    pub trace: Vec<f64>,
    /// `(component, group)` pairs with no member in the training data.
    pub empty_groups: Vec<(usize, usize)>,
}

/// Trains one branch on its own dataset.
pub fn train_stage1(branch: &mut SingleDatasetBranch, data: &Dataset, cfg: &TrainConfig) -> Result<Stage1Report> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition(format!("dataset {} is empty", data.domain_id)));
    }
    let mut empty_groups = Vec::new();
    for (d, partition) in branch.partitions().iter().enumerate() {
        let mut hit = vec![false; partition.group_count];
        for y in data.component(d) {
            for gi in partition.membership(y) {
                hit[gi] = true;
            }
        }
        empty_groups.extend(hit.iter().enumerate().filter(|(_, h)| !**h).map(|(gi, _)| (d, gi)));
    }
    let mut rng = cfg.rng(STREAM_STAGE1 + 16 * branch.index as u64);
    let mut adam = AdamState::new(cfg.learning_rate);
    let tag = branch.index;
    let datasets = [data];
    let mut trace = Vec::with_capacity(cfg.stage1_batches);
    for step in 0..cfg.stage1_batches {
        let batch = Batch::gather(&datasets, &uniform_batch_sampler(data, cfg.batch_size, &mut rng)?)?;
        let mut g = Graph::new();
        let x = g.constant(batch.x.clone());
        let y = batch.label_vars(&mut g);
        let bg = branch.forward(&mut g, tag, x)?;
        let loss = branch_loss(&mut g, &bg, branch.partitions(), &y, &batch.y, cfg.lambda)?;
        let value = g.scalar(loss.total);
        check_finite(value, "stage-1", step)?;
        trace.push(value);
        optimize(&g, loss.total, &mut [(tag, &mut branch.store, &mut adam)], cfg.clip_norm, step)?;
    }
    Ok(Stage1Report { trace, empty_groups })
}

/// Stage-2 loss terms on one batch.
#[derive(Debug, Clone)]
pub struct Stage2Loss {
    pub cross: Option<BranchLoss>,
    pub joint: Var,
    pub total: Var,
}

pub fn stage2_loss(model: &EifModel, g: &mut Graph, batch: &Batch, lambda: f64) -> Result<Stage2Loss> {
    let x = g.constant(batch.x.clone());
    let y = batch.label_vars(g);
    let eg = model.forward_graph(g, x)?;
    let cross = match (&eg.cross, &model.cross) {
        (Some(cg), Some(c)) => Some(branch_loss(g, cg, c.partitions(), &y, &batch.y, lambda)?),
        _ => None,
    };
    let joint = output_loss(g, &eg.output, &y, lambda)?;
    let total = match &cross {
        Some(c) => g.add(c.total, joint)?,
        None => joint,
    };
    Ok(Stage2Loss { cross, joint, total })
}

fn model_states(model: &EifModel, lr: f64) -> Vec<AdamState> {
    (0..model.branch_count() + 1).map(|_| AdamState::new(lr)).collect()
}

/// Tagged stores of `model` paired with their optimizer states.
fn trainable<'a>(
    model: &'a mut EifModel,
    states: &'a mut [AdamState],
    include_branches: bool,
) -> Vec<(usize, &'a mut ParamStore, &'a mut AdamState)> {
    let cross_tag = model.cross_tag();
    let use_cross = model.flags.use_cross;
    let (branch_states, cross_state) = states.split_at_mut(cross_tag);
    let mut out: Vec<(usize, &mut ParamStore, &mut AdamState)> = Vec::new();
    if include_branches {
        for (n, (b, s)) in model.branches.iter_mut().zip(branch_states.iter_mut()).enumerate() {
            out.push((n, &mut b.store, s));
        }
    }
    if let (Some(c), true) = (model.cross.as_mut(), use_cross) {
        out.push((cross_tag, &mut c.store, &mut cross_state[0]));
    }
    out
}

/// Joint training of all branches (and the cross branch when active) on balanced batches.
pub fn train_stage2(model: &mut EifModel, datasets: &[&Dataset], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = cfg.rng(STREAM_STAGE2);
    let mut states = model_states(model, cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.stage2_batches);
    for step in 0..cfg.stage2_batches {
        let batch = Batch::gather(datasets, &balanced_batch_sampler(datasets, cfg.batch_size, &mut rng)?)?;
        let mut g = Graph::new();
        let loss = stage2_loss(model, &mut g, &batch, cfg.lambda)?;
        let value = g.scalar(loss.total);
        check_finite(value, "stage-2", step)?;
        trace.push(value);
        let mut stores = trainable(model, &mut states, !cfg.freeze_backbones_stage2);
        optimize(&g, loss.total, &mut stores, cfg.clip_norm, step)?;
    }
    Ok(trace)
}

/// Few-shot adaptation: evidence loss on every branch output, the cross
/// branch output and the inter-fused output.
pub fn finetune_adapt(model: &mut EifModel, target: &Dataset, cfg: &TrainConfig, batches: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::Precondition("adaptation set is empty".into()));
    }
    let mut rng = cfg.rng(STREAM_ADAPT);
    let mut states = model_states(model, cfg.learning_rate);
    let datasets = [target];
    let mut trace = Vec::with_capacity(batches);
    for step in 0..batches {
        let batch = Batch::gather(&datasets, &uniform_batch_sampler(target, cfg.batch_size, &mut rng)?)?;
        let mut g = Graph::new();
        let x = g.constant(batch.x.clone());
        let y = batch.label_vars(&mut g);
        let eg = model.forward_graph(&mut g, x)?;
        let mut terms = Vec::new();
        for bg in eg.branches.iter().chain(eg.cross.iter()) {
            terms.push(output_loss(&mut g, &bg.fused, &y, cfg.lambda)?);
        }
        terms.push(output_loss(&mut g, &eg.output, &y, cfg.lambda)?);
        let total = g.add_all(&terms)?;
        let value = g.scalar(total);
        check_finite(value, "adaptation", step)?;
        trace.push(value);
        let mut stores = trainable(model, &mut states, true);
        optimize(&g, total, &mut stores, cfg.clip_norm, step)?;
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    Single,
    SimpleMix,
    BalancedMix,
}

impl BaselineVariant {
    pub fn name(self) -> &'static str {
        match self {
            BaselineVariant::Single => "single",
            BaselineVariant::SimpleMix => "simple_mix",
            BaselineVariant::BalancedMix => "balanced_mix",
        }
    }
}

/// Mean absolute error over samples and components.
fn mae_loss(g: &mut Graph, pred: &[Var], y: &[Var]) -> Result<Var> {
    let terms = pred
        .iter()
        .zip(y)
        .map(|(&p, &yv)| {
            let r = g.sub(p, yv)?;
            let a = g.abs(r);
            Ok(g.mean(a))
        })
        .collect::<Result<Vec<_>>>()?;
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, 1.0 / pred.len() as f64))
}

/// Trains a plain regressor with an L1 loss for `batches` steps.
pub fn train_baseline(
    variant: BaselineVariant,
    datasets: &[&Dataset],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    batches: usize,
) -> Result<(BaselineRegressor, Vec<f64>)> {
    cfg.validate()?;
    if variant == BaselineVariant::Single && datasets.len() != 1 {
        return Err(Error::Precondition(format!(
            "single baseline takes one dataset, got {}",
            datasets.len()
        )));
    }
    let mut rng = cfg.rng(STREAM_BASELINE);
    let mut model = BaselineRegressor::new(net, &mut rng)?;
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(batches);
    for step in 0..batches {
        let picks = match variant {
            BaselineVariant::Single => uniform_batch_sampler(datasets[0], cfg.batch_size, &mut rng)?,
            BaselineVariant::SimpleMix => concatenated_batch_sampler(datasets, cfg.batch_size, &mut rng)?,
            BaselineVariant::BalancedMix => balanced_batch_sampler(datasets, cfg.batch_size, &mut rng)?,
        };
        let batch = Batch::gather(datasets, &picks)?;
        let mut g = Graph::new();
        let x = g.constant(batch.x.clone());
        let y = batch.label_vars(&mut g);
        let pred = model.forward(&mut g, 0, x)?;
        let loss = mae_loss(&mut g, &pred, &y)?;
        let value = g.scalar(loss);
        check_finite(value, "baseline", step)?;
        trace.push(value);
        optimize(&g, loss, &mut [(0, &mut model.store, &mut adam)], cfg.clip_norm, step)?;
    }
    Ok((model, trace))
}

/// Point prediction with optional uncertainty for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub point: Vec<f64>,
    pub uncertainty: Option<Vec<UncertaintyReport>>,
}

pub trait Predictor {
    fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>>;
}

impl Predictor for EifModel {
    fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        Ok(self
            .eif_forward(x)?
            .into_iter()
            .map(|s| Prediction {
                point: s.nig.iter().map(|p| p.delta).collect(),
                uncertainty: Some(s.uncertainty),
            })
            .collect())
    }
}

impl Predictor for BaselineRegressor {
    fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        Ok(BaselineRegressor::predict(self, x)?
            .into_iter()
            .map(|point| Prediction {
                point,
                uncertainty: None,
            })
            .collect())
    }
}

/// Unweighted mean of the single-dataset branches.
pub struct AverageFusion<'a>(pub &'a EifModel);

impl Predictor for AverageFusion<'_> {
    fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        Ok(self
            .0
            .average_fusion_predict(x)?
            .into_iter()
            .map(|point| Prediction {
                point,
                uncertainty: None,
            })
            .collect())
    }
}

/// Fixed output, handy as a reference predictor.
pub struct ConstantPredictor(pub Vec<f64>);

impl Predictor for ConstantPredictor {
    fn predict(&self, x: &Tensor) -> Result<Vec<Prediction>> {
        Ok((0..x.rows())
            .map(|_| Prediction {
                point: self.0.clone(),
                uncertainty: None,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean absolute error per component.
    pub mae: Vec<f64>,
    /// Mean Euclidean distance between prediction and label.
    pub joint_error: f64,
    /// Means over samples and components, when the predictor reports uncertainty.
    pub mean_aleatoric: Option<f64>,
    pub mean_epistemic: Option<f64>,
    pub sample_count: usize,
}

impl Metrics {
    pub fn mean_mae(&self) -> f64 {
        self.mae.iter().sum::<f64>() / self.mae.len() as f64
    }
}

pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Precondition(format!("cannot evaluate on empty dataset {}", data.domain_id)));
    }
    let x = inputs_tensor(&data.inputs)?;
    let preds = predictor.predict(&x)?;
    let n = data.len() as f64;
    let dim = data.output_dim();
    let mut mae = vec![0.0; dim];
    let mut joint = 0.0;
    let mut alea = 0.0;
    let mut epi = 0.0;
    let mut has_unc = true;
    for (p, y) in preds.iter().zip(&data.labels) {
        if p.point.len() != dim {
            return Err(Error::Shape(format!("prediction has {} components, labels {dim}", p.point.len())));
        }
        let mut sq = 0.0;
        for d in 0..dim {
            let r = p.point[d] - y[d];
            mae[d] += r.abs();
            sq += r * r;
        }
        joint += sq.sqrt();
        match &p.uncertainty {
            Some(u) => {
                alea += u.iter().map(|r| r.aleatoric).sum::<f64>() / dim as f64;
                epi += u.iter().map(|r| r.epistemic).sum::<f64>() / dim as f64;
            }
            None => has_unc = false,
        }
    }
    let metrics = Metrics {
        mae: mae.into_iter().map(|m| m / n).collect(),
        joint_error: joint / n,
        mean_aleatoric: has_unc.then_some(alea / n),
        mean_epistemic: has_unc.then_some(epi / n),
        sample_count: data.len(),
    };
    if !metrics.joint_error.is_finite() {
        return Err(Error::NumericRange(format!("non-finite error on {}", data.domain_id)));
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SingleDatasetBranch;
    use crate::nig::{evidential_loss, NigParams};
    use crate::synth::{default_benchmark, Dataset};

    fn tiny_net(g: usize) -> NetworkConfig {
        NetworkConfig {
            input_dim: 2,
            feature_layer_sizes: vec![6, 5, 4],
            mff_start_layer: 2,
            group_count: g,
            overlap: 2.0,
            output_components: 2,
        }
    }

    fn toy_dataset(id: &str, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let labels = inputs.iter().map(|x| vec![0.8 * x[0] + 0.1, 0.5 * x[1] - 0.3 * x[0]]).collect();
        Dataset {
            domain_id: id.into(),
            inputs,
            labels,
            noise_sigmas: vec![0.0; n],
        }
    }

    fn small_cfg(batches: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            stage1_batches: batches,
            stage2_batches: batches,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn branch_loss_matches_scalar_recomputation() {
        let net = tiny_net(3);
        let data = toy_dataset("a", 40, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let branch = SingleDatasetBranch::for_dataset(0, &data, &net, &mut rng).unwrap();
        let picks: Vec<(usize, usize)> = (0..40).map(|i| (0, i)).collect();
        let batch = Batch::gather(&[&data], &picks).unwrap();
        let mut g = Graph::new();
        let x = g.constant(batch.x.clone());
        let y = batch.label_vars(&mut g);
        let bg = branch.forward(&mut g, 0, x).unwrap();
        let loss = branch_loss(&mut g, &bg, branch.partitions(), &y, &batch.y, 0.01).unwrap();

        let mut expected = 0.0;
        for (d, partition) in branch.partitions().iter().enumerate() {
            for gi in 0..partition.group_count {
                let members: Vec<usize> = (0..40)
                    .filter(|&i| partition.membership(batch.y[d][i]).contains(&gi))
                    .collect();
                if members.is_empty() {
                    continue;
                }
                let s: f64 = members
                    .iter()
                    .map(|&i| evidential_loss(&bg.heads[d][gi].at(&g, i), batch.y[d][i], 0.01).unwrap().total)
                    .sum();
                expected += s / members.len() as f64;
            }
            let s: f64 = (0..40)
                .map(|i| evidential_loss(&bg.fused[d].at(&g, i), batch.y[d][i], 0.01).unwrap().total)
                .sum();
            expected += s / 40.0;
        }
        assert!((g.scalar(loss.total) - expected).abs() < 1e-9);
    }

    #[test]
    fn overlap_sample_feeds_exactly_its_groups() {
        let net = NetworkConfig {
            output_components: 1,
            ..tiny_net(4)
        };
        let labels: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let data = Dataset {
            domain_id: "lin".into(),
            inputs: labels.iter().map(|&y| vec![y, -y]).collect(),
            labels: labels.iter().map(|&y| vec![y]).collect(),
            noise_sigmas: vec![0.0; 40],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut branch = SingleDatasetBranch::for_dataset(0, &data, &net, &mut rng).unwrap();
        let partition = branch.partitions()[0].clone();
        let (i, members) = (0..40)
            .map(|i| (i, partition.membership(labels[i])))
            .find(|(_, m)| m.len() == 2)
            .expect("an overlap sample exists");
        let batch = Batch::gather(&[&data], &[(0, i)]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(batch.x.clone());
        let y = batch.label_vars(&mut g);
        let bg = branch.forward(&mut g, 0, x).unwrap();
        let loss = branch_loss(&mut g, &bg, branch.partitions(), &y, &batch.y, 0.01).unwrap();
        let locals: Vec<Var> = loss.local[0].iter().flatten().copied().collect();
        assert_eq!(locals.len(), 2);
        let total = g.add_all(&locals).unwrap();
        let grads = g.backward(total).unwrap();
        branch.store.zero_grads();
        grads.accumulate_into(0, &mut branch.store);
        for gi in 0..4 {
            let name = format!("branch0/comp0/head{gi}/W");
            let norm = branch.store.get(branch.store.id_of(&name).unwrap()).gradient.squared_norm();
            assert_eq!(norm > 0.0, members.contains(&gi), "head {gi}");
        }
    }

    #[test]
    fn zero_batches_leave_branch_unchanged() {
        let net = tiny_net(2);
        let data = toy_dataset("a", 30, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut branch = SingleDatasetBranch::for_dataset(0, &data, &net, &mut rng).unwrap();
        let before = branch.clone();
        let report = train_stage1(&mut branch, &data, &small_cfg(0)).unwrap();
        assert!(report.trace.is_empty());
        assert_eq!(branch, before);
    }

    #[test]
    fn stage1_is_deterministic_and_descends() {
        let net = tiny_net(2);
        let data = toy_dataset("a", 200, 6);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut branch = SingleDatasetBranch::for_dataset(0, &data, &net, &mut rng).unwrap();
            let report = train_stage1(&mut branch, &data, &small_cfg(300)).unwrap();
            (branch, report)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let start: f64 = ra.trace[..100].iter().sum();
        let end: f64 = ra.trace[200..].iter().sum();
        assert!(end < start, "{start} -> {end}");
    }

    #[test]
    fn freeze_flag_keeps_branches_bitwise() {
        let net = tiny_net(2);
        let a = toy_dataset("a", 60, 8);
        let b = toy_dataset("b", 30, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = EifModel::for_sources(net, &[&a, &b], &mut rng).unwrap();
        model.attach_cross(&[&a, &b], &mut rng).unwrap();
        let branches = model.branches.clone();
        let cross = model.cross.clone();
        let cfg = TrainConfig {
            freeze_backbones_stage2: true,
            ..small_cfg(5)
        };
        train_stage2(&mut model, &[&a, &b], &cfg).unwrap();
        assert_eq!(model.branches, branches);
        assert_ne!(model.cross, cross);
    }

    #[test]
    fn stage2_loss_is_cross_plus_joint() {
        let net = tiny_net(2);
        let a = toy_dataset("a", 20, 11);
        let b = toy_dataset("b", 20, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut model = EifModel::for_sources(net, &[&a, &b], &mut rng).unwrap();
        model.attach_cross(&[&a, &b], &mut rng).unwrap();
        let picks = balanced_batch_sampler(&[&a, &b], 16, &mut rng).unwrap();
        let batch = Batch::gather(&[&a, &b], &picks).unwrap();
        let mut g = Graph::new();
        let loss = stage2_loss(&model, &mut g, &batch, 0.01).unwrap();
        let cross = g.scalar(loss.cross.as_ref().unwrap().total);

        let out = model.eif_forward(&batch.x).unwrap();
        let mut joint = 0.0;
        for d in 0..2 {
            joint += (0..16)
                .map(|i| evidential_loss(&out[i].nig[d], batch.y[d][i], 0.01).unwrap().total)
                .sum::<f64>()
                / 16.0;
        }
        assert!((g.scalar(loss.joint) - joint).abs() < 1e-9);
        assert!((g.scalar(loss.total) - (cross + joint)).abs() < 1e-9);
    }

    #[test]
    fn zero_stage2_batches_keep_model() {
        let net = tiny_net(2);
        let a = toy_dataset("a", 20, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut model = EifModel::for_sources(net, &[&a], &mut rng).unwrap();
        model.attach_cross(&[&a], &mut rng).unwrap();
        let before = model.clone();
        assert!(train_stage2(&mut model, &[&a], &small_cfg(0)).unwrap().is_empty());
        assert!(finetune_adapt(&mut model, &a, &small_cfg(0), 0).unwrap().is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn adaptation_rejects_empty_target() {
        let net = tiny_net(2);
        let a = toy_dataset("a", 20, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut model = EifModel::for_sources(net, &[&a], &mut rng).unwrap();
        let empty = a.subset(&[]);
        assert!(matches!(
            finetune_adapt(&mut model, &empty, &small_cfg(1), 1),
            Err(Error::Precondition(_))
        ));
    }

    fn shares(picks: &[(usize, usize)], k: usize) -> Vec<f64> {
        let mut c = vec![0.0; k];
        for &(d, _) in picks {
            c[d] += 1.0;
        }
        c.iter().map(|v| v / picks.len() as f64).collect()
    }

    #[test]
    fn sampler_shares() {
        let bench = default_benchmark(1).unwrap();
        let sets: Vec<&Dataset> = bench.sources.iter().collect();
        assert_eq!((sets[0].len(), sets[1].len()), (8000, 4000));
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let balanced = balanced_batch_sampler(&sets, 100_000, &mut rng).unwrap();
        let s = shares(&balanced, 2);
        assert!((s[0] - 0.5).abs() < 0.01, "{s:?}");
        let simple = concatenated_batch_sampler(&sets, 100_000, &mut rng).unwrap();
        let s = shares(&simple, 2);
        assert!((s[0] - 2.0 / 3.0).abs() < 0.01, "{s:?}");
        let one = balanced_batch_sampler(&sets[..1], 500, &mut rng).unwrap();
        assert!(one.iter().all(|&(d, _)| d == 0));
    }

    #[test]
    fn balanced_sampler_preconditions_and_determinism() {
        let a = toy_dataset("a", 5, 19);
        let b = toy_dataset("b", 5, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        assert!(balanced_batch_sampler(&[], 4, &mut rng).is_err());
        assert!(balanced_batch_sampler(&[&a, &b], 1, &mut rng).is_err());
        let draw = |seed| balanced_batch_sampler(&[&a, &b], 32, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn constant_predictor_metrics() {
        let data = Dataset {
            domain_id: "c".into(),
            inputs: vec![vec![0.0], vec![1.0]],
            labels: vec![vec![0.0], vec![2.0]],
            noise_sigmas: vec![0.0; 2],
        };
        let m = evaluate(&ConstantPredictor(vec![0.5]), &data).unwrap();
        assert!((m.mae[0] - 1.0).abs() < 1e-15);
        assert!((m.joint_error - 1.0).abs() < 1e-15);
        let perfect = evaluate(&ConstantPredictor(vec![0.0]), &data.subset(&[0])).unwrap();
        assert_eq!(perfect.mae, vec![0.0]);
        assert!(evaluate(&ConstantPredictor(vec![0.0]), &data.subset(&[])).is_err());
    }

    #[test]
    fn single_baseline_fits_constant_labels() {
        let mut data = toy_dataset("k", 64, 22);
        for y in &mut data.labels {
            *y = vec![0.3, -0.2];
        }
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..small_cfg(0)
        };
        let (model, trace) = train_baseline(BaselineVariant::Single, &[&data], &tiny_net(1), &cfg, 600).unwrap();
        let m = evaluate(&model, &data).unwrap();
        assert!(m.mean_mae() < 0.02, "{m:?} {:?}", trace.last());
    }

    #[test]
    fn eif_metrics_report_uncertainty_and_repeat() {
        let net = tiny_net(2);
        let a = toy_dataset("a", 30, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let model = EifModel::for_sources(net, &[&a], &mut rng).unwrap();
        let m1 = evaluate(&model, &a).unwrap();
        let m2 = evaluate(&model, &a).unwrap();
        assert_eq!(m1, m2);
        assert!(m1.mean_aleatoric.unwrap() > 0.0 && m1.mean_epistemic.unwrap() > 0.0);
        let branch_nig: NigParams = model.eif_forward(&inputs_tensor(&a.inputs[..1]).unwrap()).unwrap()[0].nig[0];
        assert!(branch_nig.alpha > 1.0);
    }
}
