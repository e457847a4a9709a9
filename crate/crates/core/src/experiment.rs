//! End-to-end runs: benchmark generation, every model variant, evaluation
//! and the fusion diagnostics behind the reports.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{inputs_tensor, EifModel, FusionFlags, NetworkConfig, SampleOutput};
use crate::synth::{default_benchmark, domain_seed, ood_domain, split_for_stages, Dataset};
use crate::training::{
    evaluate, finetune_adapt, train_baseline, train_stage1, train_stage2, AverageFusion, BaselineVariant,
    Metrics, TrainConfig,
};

/// Every model the experiment can train and evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Plain regressor trained on source `n` only.
    Single(usize),
    SimpleMix,
    BalancedMix,
    /// Unweighted mean of the stage-1 branches.
    AverageFusion,
    /// Stage 2 without the cross-dataset branch.
    InterFusion,
    /// Full model with the cross-dataset branch.
    Eif,
    /// Full model fine-tuned on a few target samples (target rows only).
    EifAdapted,
}

impl Variant {
    pub fn default_set(source_count: usize) -> Vec<Variant> {
        let mut v: Vec<Variant> = (0..source_count).map(Variant::Single).collect();
        v.extend([
            Variant::SimpleMix,
            Variant::BalancedMix,
            Variant::AverageFusion,
            Variant::InterFusion,
            Variant::Eif,
            Variant::EifAdapted,
        ]);
        v
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Single(n) => write!(f, "single_{n}"),
            Variant::SimpleMix => f.write_str("simple_mix"),
            Variant::BalancedMix => f.write_str("balanced_mix"),
            Variant::AverageFusion => f.write_str("average_fusion"),
            Variant::InterFusion => f.write_str("inter_fusion"),
            Variant::Eif => f.write_str("eif"),
            Variant::EifAdapted => f.write_str("eif_adapted"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "simple_mix" => Variant::SimpleMix,
            "balanced_mix" => Variant::BalancedMix,
            "average_fusion" => Variant::AverageFusion,
            "inter_fusion" => Variant::InterFusion,
            "eif" => Variant::Eif,
            "eif_adapted" => Variant::EifAdapted,
            other => match other.strip_prefix("single_").map(str::parse::<usize>) {
                Some(Ok(n)) => Variant::Single(n),
                _ => return Err(Error::Config(format!("unknown variant `{other}`"))),
            },
        })
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ablation switches applied to the `eif` variant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub disable_cross_branch: bool,
    pub average_fusion: bool,
    pub disable_inter_fusion: bool,
}

impl AblationFlags {
    pub fn fusion_flags(&self) -> FusionFlags {
        FusionFlags {
            use_cross: !self.disable_cross_branch,
            inter_fusion: !self.disable_inter_fusion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.disable_cross_branch && self.disable_inter_fusion {
            return Err(Error::Config(
                "ablation.disable_inter_fusion needs the cross branch, but disable_cross_branch is set".into(),
            ));
        }
        Ok(())
    }
}

/// Knobs of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
    pub variants: Vec<Variant>,
    /// Fraction of each source held out for testing.
    pub test_fraction: (usize, usize),
    /// Stage-1 : stage-2 split of the remaining source data.
    pub stage_ratio: (usize, usize),
    pub adapt_samples: usize,
    pub adapt_batches: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationFlags::default(),
            variants: Variant::default_set(2),
            test_fraction: (4, 1),
            stage_ratio: (4, 1),
            adapt_samples: 100,
            adapt_batches: 100,
        }
    }
}

/// Benchmark data for one seed, split for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub source_train: Vec<Dataset>,
    pub source_test: Vec<Dataset>,
    pub stage1: Vec<Dataset>,
    pub stage2: Vec<Dataset>,
    /// Few-shot adaptation samples per target.
    pub adapt: Vec<Dataset>,
    /// Target samples not used for adaptation; every variant is scored on these.
    pub target_eval: Vec<Dataset>,
    pub ood: Dataset,
}

/// Test datasets in report order: source tests then target evaluation sets.
pub fn eval_sets(data: &PreparedData) -> Vec<&Dataset> {
    data.source_test.iter().chain(&data.target_eval).collect()
}

pub fn prepare_data(seed: u64, settings: &RunSettings) -> Result<PreparedData> {
    let bench = default_benchmark(seed)?;
    let mut source_train = Vec::new();
    let mut source_test = Vec::new();
    let mut stage1 = Vec::new();
    let mut stage2 = Vec::new();
    for (i, s) in bench.sources.iter().enumerate() {
        let (train, test) = split_for_stages(s, settings.test_fraction, domain_seed(seed, 100 + i as u64))?;
        let (a, b) = split_for_stages(&train, settings.stage_ratio, domain_seed(seed, 200 + i as u64))?;
        source_train.push(train);
        source_test.push(test);
        stage1.push(a);
        stage2.push(b);
    }
    let mut adapt = Vec::new();
    let mut target_eval = Vec::new();
    for (i, t) in bench.targets.iter().enumerate() {
        if settings.adapt_samples >= t.len() {
            return Err(Error::Config(format!(
                "experiment.adapt_samples {} leaves nothing to evaluate on {}",
                settings.adapt_samples, t.domain_id
            )));
        }
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(domain_seed(seed, 300 + i as u64)));
        let (a, rest) = idx.split_at(settings.adapt_samples);
        let (mut a, mut rest) = (a.to_vec(), rest.to_vec());
        a.sort_unstable();
        rest.sort_unstable();
        adapt.push(t.subset(&a));
        target_eval.push(t.subset(&rest));
    }
    Ok(PreparedData {
        source_train,
        source_test,
        stage1,
        stage2,
        adapt,
        target_eval,
        ood: ood_domain(seed)?,
    })
}

/// One metrics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub variant: Variant,
    pub dataset: String,
    /// "source" or "target".
    pub role: String,
    pub metrics: Metrics,
}

/// Fusion-weight and uncertainty diagnostics gathered from the trained models.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Dataset ids of `branch_weights` rows.
    pub weight_datasets: Vec<String>,
    /// Mean normalized branch γ per dataset, participants in fusion order.
    pub branch_weights: Vec<Vec<f64>>,
    /// Per source test set, fraction of samples whose largest branch weight is their own branch.
    pub self_identification: Vec<f64>,
    /// `regressor_heatmap[d][true_group][regressor]` for the largest source after stage 1.
    pub regressor_heatmap: Vec<Vec<Vec<f64>>>,
    /// Fraction of test samples whose argmax regressor lies within one group of the true group.
    pub diagonal_hit_rate: f64,
    /// `(dataset, true sigma, predicted aleatoric)` on the source test sets.
    pub aleatoric_pairs: Vec<(String, f64, f64)>,
    /// Spearman correlation of `aleatoric_pairs`, per source test set.
    pub aleatoric_spearman: Vec<f64>,
    /// `(dataset, mean epistemic, mean aleatoric)`, sources then targets then OOD.
    pub uncertainty_summary: Vec<(String, f64, f64)>,
    /// Mean epistemic on the OOD set over mean epistemic on the source test sets.
    pub ood_epistemic_ratio: f64,
}

/// Everything produced for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub diagnostics: Option<Diagnostics>,
    /// Loss traces by name (`stage1_branch0`, `stage2_eif`, ...).
    pub traces: Vec<(String, Vec<f64>)>,
    pub warnings: Vec<String>,
    /// Trained full model, when the `eif` variant ran.
    pub eif: Option<EifModel>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Average ranks, ties sharing the mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (mean(ra.iter().copied()), mean(rb.iter().copied()));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn forward_all(model: &EifModel, data: &Dataset) -> Result<Vec<SampleOutput>> {
    model.eif_forward(&inputs_tensor(&data.inputs)?)
}

/// Regressor-weight heatmap and the ±1-group hit rate of branch 0 on `test`.
fn regressor_diagnostics(stage1: &EifModel, test: &Dataset) -> Result<(Vec<Vec<Vec<f64>>>, f64)> {
    let branch = &stage1.branches[0];
    let mut only = stage1.clone();
    only.branches.truncate(1);
    only.cross = None;
    let outs = forward_all(&only, test)?;
    let mut heat = Vec::new();
    let mut hits = 0usize;
    let mut total = 0usize;
    for (d, partition) in branch.partitions().iter().enumerate() {
        let gc = partition.group_count;
        let mut sums = vec![vec![0.0; gc]; gc];
        let mut counts = vec![0usize; gc];
        for (out, y) in outs.iter().zip(&test.labels) {
            let truth = partition.nearest_center(y[d]);
            let w = &out.diagnostics.regressor_weights[0][d];
            for (s, v) in sums[truth].iter_mut().zip(w) {
                *s += v;
            }
            counts[truth] += 1;
            if argmax(w).abs_diff(truth) <= 1 {
                hits += 1;
            }
            total += 1;
        }
        for (row, &c) in sums.iter_mut().zip(&counts) {
            if c > 0 {
                row.iter_mut().for_each(|v| *v /= c as f64);
            }
        }
        heat.push(sums);
    }
    Ok((heat, hits as f64 / total as f64))
}

fn eif_diagnostics(eif: &EifModel, data: &PreparedData) -> Result<Diagnostics> {
    let mut diag = Diagnostics::default();
    let sets: Vec<&Dataset> = eval_sets(data).into_iter().chain(std::iter::once(&data.ood)).collect();
    let mut source_epi = Vec::new();
    let mut ood_epi = 0.0;
    for (k, set) in sets.iter().enumerate() {
        let outs = forward_all(eif, set)?;
        let participants = outs[0].diagnostics.branch_nig.len();
        let per_sample: Vec<Vec<f64>> = outs
            .iter()
            .map(|o| {
                (0..participants)
                    .map(|n| mean(o.diagnostics.branch_weights.iter().map(|w| w[n])))
                    .collect()
            })
            .collect();
        diag.weight_datasets.push(set.domain_id.clone());
        diag.branch_weights
            .push((0..participants).map(|n| mean(per_sample.iter().map(|w| w[n]))).collect());
        let alea: Vec<f64> = outs.iter().map(|o| mean(o.uncertainty.iter().map(|u| u.aleatoric))).collect();
        let epi: Vec<f64> = outs.iter().map(|o| mean(o.uncertainty.iter().map(|u| u.epistemic))).collect();
        diag.uncertainty_summary
            .push((set.domain_id.clone(), mean(epi.iter().copied()), mean(alea.iter().copied())));
        if k < data.source_test.len() {
            let own = per_sample.iter().filter(|w| argmax(w) == k).count();
            diag.self_identification.push(own as f64 / per_sample.len() as f64);
            diag.aleatoric_spearman.push(spearman(&alea, &set.noise_sigmas));
            diag.aleatoric_pairs.extend(
                set.noise_sigmas
                    .iter()
                    .zip(&alea)
                    .map(|(&s, &a)| (set.domain_id.clone(), s, a)),
            );
            source_epi.extend(epi);
        } else if k == sets.len() - 1 {
            ood_epi = mean(epi);
        }
    }
    diag.ood_epistemic_ratio = ood_epi / mean(source_epi);
    Ok(diag)
}

fn role_of(data: &PreparedData, set: &Dataset) -> &'static str {
    if data.source_test.iter().any(|s| s.domain_id == set.domain_id) {
        "source"
    } else {
        "target"
    }
}

fn push_rows<P: crate::training::Predictor + ?Sized>(
    rows: &mut Vec<MetricRow>,
    variant: Variant,
    model: &P,
    data: &PreparedData,
) -> Result<()> {
    for set in eval_sets(data) {
        rows.push(MetricRow {
            variant,
            dataset: set.domain_id.clone(),
            role: role_of(data, set).into(),
            metrics: evaluate(model, set)?,
        });
    }
    Ok(())
}

/// Trains and evaluates the requested variants for one seed.
/// Untrained branches for `seed`, plus the generator that later initializes
/// the cross branch.
pub fn fresh_base(seed: u64, network: &NetworkConfig, data: &PreparedData) -> Result<(EifModel, ChaCha8Rng)> {
    let stage1_refs: Vec<&Dataset> = data.stage1.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(domain_seed(seed, 400));
    let base = EifModel::for_sources(network.clone(), &stage1_refs, &mut rng)?;
    Ok((base, rng))
}

pub fn run_seed(seed: u64, settings: &RunSettings) -> Result<SeedResult> {
    settings.network.validate()?;
    settings.ablation.validate()?;
    let data = prepare_data(seed, settings)?;
    let cfg = TrainConfig {
        seed,
        ..settings.train.clone()
    };
    cfg.validate()?;
    let wants = |v: Variant| settings.variants.contains(&v);
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    let mut warnings = Vec::new();
    let baseline_budget = cfg.stage1_batches + cfg.stage2_batches;

    for (n, train) in data.source_train.iter().enumerate() {
        if wants(Variant::Single(n)) {
            let (m, t) = train_baseline(BaselineVariant::Single, &[train], &settings.network, &cfg, baseline_budget)?;
            push_rows(&mut rows, Variant::Single(n), &m, &data)?;
            traces.push((format!("baseline_single_{n}"), t));
        }
    }
    let train_refs: Vec<&Dataset> = data.source_train.iter().collect();
    for (v, bv) in [
        (Variant::SimpleMix, BaselineVariant::SimpleMix),
        (Variant::BalancedMix, BaselineVariant::BalancedMix),
    ] {
        if wants(v) {
            let (m, t) = train_baseline(bv, &train_refs, &settings.network, &cfg, baseline_budget)?;
            push_rows(&mut rows, v, &m, &data)?;
            traces.push((format!("baseline_{v}"), t));
        }
    }

    let needs_eif = wants(Variant::Eif) || wants(Variant::EifAdapted);
    let needs_stage1 = needs_eif || wants(Variant::AverageFusion) || wants(Variant::InterFusion);
    let mut diagnostics = None;
    let mut eif_out = None;
    if needs_stage1 {
        let stage2_refs: Vec<&Dataset> = data.stage2.iter().collect();
        let (mut base, mut rng) = fresh_base(seed, &settings.network, &data)?;
        for (n, branch) in base.branches.iter_mut().enumerate() {
            let report = train_stage1(branch, &data.stage1[n], &cfg)?;
            for (d, g) in report.empty_groups {
                warnings.push(format!("branch {n}: component {d} group {g} has no training samples"));
            }
            traces.push((format!("stage1_branch{n}"), report.trace));
        }
        if wants(Variant::AverageFusion) {
            push_rows(&mut rows, Variant::AverageFusion, &AverageFusion(&base), &data)?;
        }
        if wants(Variant::InterFusion) {
            let mut m = base.clone();
            m.flags = FusionFlags {
                use_cross: false,
                inter_fusion: true,
            };
            traces.push(("stage2_inter_fusion".into(), train_stage2(&mut m, &stage2_refs, &cfg)?));
            push_rows(&mut rows, Variant::InterFusion, &m, &data)?;
        }
        if needs_eif {
            let mut eif = base.clone();
            eif.flags = settings.ablation.fusion_flags();
            if eif.flags.use_cross {
                eif.attach_cross(&stage2_refs, &mut rng)?;
            }
            traces.push(("stage2_eif".into(), train_stage2(&mut eif, &stage2_refs, &cfg)?));
            if wants(Variant::Eif) {
                if settings.ablation.average_fusion {
                    push_rows(&mut rows, Variant::Eif, &AverageFusion(&eif), &data)?;
                } else {
                    push_rows(&mut rows, Variant::Eif, &eif, &data)?;
                }
            }
            let mut diag = eif_diagnostics(&eif, &data)?;
            let (heat, hit) = regressor_diagnostics(&base, &data.source_test[0])?;
            diag.regressor_heatmap = heat;
            diag.diagonal_hit_rate = hit;
            diagnostics = Some(diag);
            if wants(Variant::EifAdapted) {
                for (k, (adapt, eval)) in data.adapt.iter().zip(&data.target_eval).enumerate() {
                    let mut m = eif.clone();
                    traces.push((
                        format!("adapt_target{k}"),
                        finetune_adapt(&mut m, adapt, &cfg, settings.adapt_batches)?,
                    ));
                    rows.push(MetricRow {
                        variant: Variant::EifAdapted,
                        dataset: eval.domain_id.clone(),
                        role: "target".into(),
                        metrics: evaluate(&m, eval)?,
                    });
                }
            }
            eif_out = Some(eif);
        }
    }
    Ok(SeedResult {
        seed,
        rows,
        diagnostics,
        traces,
        warnings,
        eif: eif_out,
    })
}

/// Means of matching (variant, dataset) rows across seeds.
pub fn average_rows(results: &[SeedResult]) -> Vec<MetricRow> {
    let mut out: Vec<MetricRow> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for r in results.iter().flat_map(|s| &s.rows) {
        match out
            .iter()
            .position(|o| o.variant == r.variant && o.dataset == r.dataset)
        {
            Some(i) => {
                let m = &mut out[i].metrics;
                for (a, b) in m.mae.iter_mut().zip(&r.metrics.mae) {
                    *a += b;
                }
                m.joint_error += r.metrics.joint_error;
                m.mean_aleatoric = m.mean_aleatoric.zip(r.metrics.mean_aleatoric).map(|(a, b)| a + b);
                m.mean_epistemic = m.mean_epistemic.zip(r.metrics.mean_epistemic).map(|(a, b)| a + b);
                m.sample_count += r.metrics.sample_count;
                counts[i] += 1;
            }
            None => {
                out.push(r.clone());
                counts.push(1);
            }
        }
    }
    for (o, &c) in out.iter_mut().zip(&counts) {
        let k = c as f64;
        let m = &mut o.metrics;
        m.mae.iter_mut().for_each(|v| *v /= k);
        m.joint_error /= k;
        m.mean_aleatoric = m.mean_aleatoric.map(|v| v / k);
        m.mean_epistemic = m.mean_epistemic.map(|v| v / k);
        m.sample_count /= c;
    }
    out
}

/// Mean of `metric` over rows of `variant` with the given role.
pub fn role_mean(rows: &[MetricRow], variant: Variant, role: &str, metric: impl Fn(&Metrics) -> f64) -> Option<f64> {
    let xs: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == variant && r.role == role)
        .map(|r| metric(&r.metrics))
        .collect();
    (!xs.is_empty()).then(|| mean(xs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::default_set(3) {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("single_x".parse::<Variant>().is_err());
        assert!("eiff".parse::<Variant>().is_err());
    }

    #[test]
    fn spearman_fixtures() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        // Ties take average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3).
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!((r - 0.866_025_403_784_438_6).abs() < 1e-12, "{r}");
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn prepared_splits_are_disjoint_and_sized() {
        let d = prepare_data(3, &RunSettings::default()).unwrap();
        assert_eq!(d.source_test[0].len(), 1600);
        assert_eq!(d.source_test[1].len(), 800);
        assert_eq!(d.stage1[0].len() + d.stage2[0].len(), 6400);
        assert_eq!(d.stage2[1].len(), 640);
        assert_eq!(d.adapt[0].len(), 100);
        assert_eq!(d.target_eval[1].len(), 1900);
        assert_eq!(prepare_data(3, &RunSettings::default()).unwrap(), d);
    }

    #[test]
    fn conflicting_ablation_is_rejected() {
        let a = AblationFlags {
            disable_cross_branch: true,
            disable_inter_fusion: true,
            ..AblationFlags::default()
        };
        assert!(matches!(a.validate(), Err(Error::Config(_))));
    }
}
