//! Central finite-difference checks of the stage-1 and stage-2 loss gradients
//! on small random networks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{EifModel, FusionFlags, NetworkConfig};
use crate::synth::Dataset;
use crate::training::{branch_loss, stage2_loss, Batch};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Coordinates checked per parameter tensor.
    pub coords_per_tensor: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            seed: 0,
            tolerance: 1e-4,
            coords_per_tensor: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub case: usize,
    pub stage: Stage,
    pub network: NetworkConfig,
    pub checked: usize,
    /// Coordinates sitting on a kink of `|y - delta|` within the step.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `(parameter, index, analytic, numeric)` for failures.
    pub failures: Vec<(String, usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub cases: Vec<CaseReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.failures.is_empty() && c.checked > 0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

fn random_network<R: Rng>(rng: &mut R) -> NetworkConfig {
    let depth = rng.gen_range(1..=3);
    NetworkConfig {
        input_dim: rng.gen_range(1..=3),
        feature_layer_sizes: (0..depth).map(|_| rng.gen_range(2..=4)).collect(),
        mff_start_layer: rng.gen_range(1..=depth),
        group_count: rng.gen_range(1..=4),
        overlap: rng.gen_range(1.0..2.5),
        output_components: rng.gen_range(1..=2),
    }
}

fn random_dataset<R: Rng>(id: &str, cfg: &NetworkConfig, n: usize, rng: &mut R) -> Dataset {
    Dataset {
        domain_id: id.into(),
        inputs: (0..n)
            .map(|_| (0..cfg.input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect(),
        labels: (0..n)
            .map(|_| (0..cfg.output_components).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect(),
        noise_sigmas: vec![0.1; n],
    }
}

fn store_mut(model: &mut EifModel, tag: usize) -> &mut ParamStore {
    if tag < model.branches.len() {
        &mut model.branches[tag].store
    } else {
        &mut model.cross.as_mut().expect("cross branch").store
    }
}

fn loss_value(model: &EifModel, stage: Stage, batch: &Batch, lambda: f64) -> Result<(Graph, crate::autodiff::Var)> {
    let mut g = Graph::new();
    let loss = match stage {
        Stage::One => {
            let branch = &model.branches[0];
            let x = g.constant(batch.x.clone());
            let y: Vec<_> = batch.y.iter().map(|c| g.constant(Tensor::column(c.clone()))).collect();
            let bg = branch.forward(&mut g, 0, x)?;
            branch_loss(&mut g, &bg, branch.partitions(), &y, &batch.y, lambda)?.total
        }
        Stage::Two => stage2_loss(model, &mut g, batch, lambda)?.total,
    };
    Ok((g, loss))
}

fn eval(model: &EifModel, stage: Stage, batch: &Batch, lambda: f64) -> Result<f64> {
    let (g, loss) = loss_value(model, stage, batch, lambda)?;
    let v = g.scalar(loss);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericRange(format!("gradcheck loss is {v}")))
    }
}

fn check_case(case: usize, stage: Stage, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CaseReport> {
    let network = random_network(rng);
    let sources = rng.gen_range(1..=3);
    let data: Vec<Dataset> = (0..sources)
        .map(|k| {
            let n = rng.gen_range(network.group_count.max(3)..=8);
            random_dataset(&format!("src{k}"), &network, n, rng)
        })
        .collect();
    let refs: Vec<&Dataset> = data.iter().collect();
    let mut model = EifModel::for_sources(network.clone(), &refs, rng)?;
    model.attach_cross(&refs, rng)?;
    model.flags = match rng.gen_range(0..3) {
        0 => FusionFlags::default(),
        1 => FusionFlags { use_cross: false, inter_fusion: true },
        _ => FusionFlags { use_cross: true, inter_fusion: false },
    };
    let lambda = [0.0, 0.01, 0.5][rng.gen_range(0..3)];
    let picks: Vec<(usize, usize)> = match stage {
        Stage::One => (0..data[0].len()).map(|i| (0, i)).collect(),
        Stage::Two => data.iter().enumerate().flat_map(|(k, d)| (0..d.len()).map(move |i| (k, i))).collect(),
    };
    let batch = Batch::gather(&refs, &picks)?;

    let (g, loss) = loss_value(&model, stage, &batch, lambda)?;
    let grads = g.backward(loss)?;
    let tags: Vec<usize> = match stage {
        Stage::One => vec![0],
        Stage::Two => (0..=model.branch_count()).collect(),
    };
    for &t in &tags {
        let store = store_mut(&mut model, t);
        store.zero_grads();
        grads.accumulate_into(t, store);
    }

    let mut report = CaseReport {
        case,
        stage,
        network,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    for &t in &tags {
        let count = store_mut(&mut model, t).len();
        for p in 0..count {
            let len = store_mut(&mut model, t).iter().nth(p).expect("parameter").tensor.len();
            let coords = sample(rng, len, len.min(cfg.coords_per_tensor)).into_vec();
            for i in coords {
                let (name, theta, analytic) = {
                    let param = store_mut(&mut model, t).iter().nth(p).expect("parameter");
                    (param.name.clone(), param.tensor.values()[i], param.gradient.values()[i])
                };
                let at = |model: &mut EifModel, v: f64| -> Result<f64> {
                    store_mut(model, t).iter_mut().nth(p).expect("parameter").tensor.values_mut()[i] = v;
                    eval(model, stage, &batch, lambda)
                };
                let h = 1e-4 * theta.abs().max(1.0);
                let plus = at(&mut model, theta + h)?;
                let minus = at(&mut model, theta - h)?;
                let numeric = (plus - minus) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                if rel < cfg.tolerance {
                    at(&mut model, theta)?;
                    report.checked += 1;
                    report.max_rel_error = report.max_rel_error.max(rel);
                    continue;
                }
                // A slope jump inside the step shows up as one-sided differences
                // that disagree by the same amount at any step size.
                let center = at(&mut model, theta)?;
                let jump = |p: f64, m: f64, h: f64| ((p - center) - (center - m)).abs() / h;
                let wide = jump(plus, minus, h);
                let hs = h / 10.0;
                let p2 = at(&mut model, theta + hs)?;
                let m2 = at(&mut model, theta - hs)?;
                at(&mut model, theta)?;
                if wide > 1e-8 && jump(p2, m2, hs) > 0.5 * wide {
                    report.skipped += 1;
                } else {
                    report.checked += 1;
                    report.max_rel_error = report.max_rel_error.max(rel);
                    report.failures.push((name, i, analytic, numeric));
                }
            }
        }
    }
    Ok(report)
}

/// Runs `cfg.cases` random configurations, each checked at both stages.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = Vec::with_capacity(2 * cfg.cases);
    for case in 0..cfg.cases {
        cases.push(check_case(case, Stage::One, cfg, &mut rng)?);
        cases.push(check_case(case, Stage::Two, cfg, &mut rng)?);
    }
    Ok(GradcheckReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert_eq!(report.cases.len(), 40);
        for c in &report.cases {
            assert!(c.failures.is_empty(), "case {} {:?}: {:?}", c.case, c.stage, c.failures);
            assert!(c.skipped * 10 <= c.checked, "case {}: {} skipped", c.case, c.skipped);
        }
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-4);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = GradcheckConfig {
            tolerance: 0.0,
            ..GradcheckConfig::default()
        };
        let r = check_case(0, Stage::One, &cfg, &mut rng).unwrap();
        assert!(!r.failures.is_empty());
    }
}
