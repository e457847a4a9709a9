//! Synthetic multi-domain regression data.
//!
//! A domain draws Gaussian inputs around its own mean, maps them through one
//! non-stationary target function per output component and adds Gaussian
//! noise whose scale depends on which axis-aligned input slab the sample
//! falls in. The true noise scale of every sample is kept for evaluation.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_HEADER: &str = "evifuse-dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// `amp*sin(freq*x0) + slope(x0)*x0 + cross*x1 + offset`, slope switching at 0.
    /// Params: `[amp, freq, slope_left, slope_right, cross, offset]`.
    PiecewiseSine,
    /// `c1*x1 + c3*x1^3 + mix*x0*x1 + offset`. Params: `[c1, c3, mix, offset]`.
    CubicBlend,
    /// `scale*tanh(rate*x0) + cross*x1 + offset`. Params: `[scale, rate, cross, offset]`.
    SaturatingRamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFunction {
    pub kind: TargetKind,
    pub params: Vec<f64>,
}

impl TargetFunction {
    pub fn new(kind: TargetKind, params: Vec<f64>) -> Result<Self> {
        let need = match kind {
            TargetKind::PiecewiseSine => 6,
            TargetKind::CubicBlend | TargetKind::SaturatingRamp => 4,
        };
        if params.len() != need {
            return Err(Error::Config(format!(
                "target function {kind:?} needs {need} params, got {}",
                params.len()
            )));
        }
        Ok(Self { kind, params })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let x0 = x[0];
        let x1 = x.get(1).copied().unwrap_or(0.0);
        let p = &self.params;
        match self.kind {
            TargetKind::PiecewiseSine => {
                let slope = if x0 < 0.0 { p[2] } else { p[3] };
                p[0] * (p[1] * x0).sin() + slope * x0 + p[4] * x1 + p[5]
            }
            TargetKind::CubicBlend => p[0] * x1 + p[1] * x1.powi(3) + p[2] * x0 * x1 + p[3],
            TargetKind::SaturatingRamp => p[0] * (p[1] * x0).tanh() + p[2] * x1 + p[3],
        }
    }
}

/// Inputs with `lo <= x[axis] < hi` get noise scale `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRegion {
    pub axis: usize,
    pub lo: f64,
    pub hi: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub input_mean: Vec<f64>,
    pub input_spread: Vec<f64>,
    /// One function per output component.
    pub targets: Vec<TargetFunction>,
    /// First matching region wins.
    pub noise_profile: Vec<NoiseRegion>,
    /// Noise scale outside every region.
    pub base_sigma: f64,
    pub label_clip: Option<(f64, f64)>,
    pub sample_count: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let dim = self.input_mean.len();
        if dim == 0 || self.input_spread.len() != dim {
            return Err(Error::Config(format!(
                "{}: input_mean/input_spread length mismatch",
                self.domain_id
            )));
        }
        if self.input_spread.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config(format!("{}: input_spread must be > 0", self.domain_id)));
        }
        if self.targets.is_empty() {
            return Err(Error::Config(format!("{}: no target functions", self.domain_id)));
        }
        if self.base_sigma < 0.0 || self.noise_profile.iter().any(|r| r.sigma < 0.0 || r.axis >= dim) {
            return Err(Error::Config(format!("{}: bad noise_profile", self.domain_id)));
        }
        if self.sample_count == 0 {
            return Err(Error::Config(format!("{}: sample_count must be >= 1", self.domain_id)));
        }
        Ok(())
    }

    /// Noise scale for an input, by the first slab containing it.
    pub fn sigma_at(&self, x: &[f64]) -> f64 {
        self.noise_profile
            .iter()
            .find(|r| r.lo <= x[r.axis] && x[r.axis] < r.hi)
            .map_or(self.base_sigma, |r| r.sigma)
    }

    /// Distance from this domain's input mean to `other`'s, in units of
    /// `other`'s per-axis spread.
    pub fn standardized_distance_to(&self, other: &DomainSpec) -> f64 {
        self.input_mean
            .iter()
            .zip(&other.input_mean)
            .zip(&other.input_spread)
            .map(|((a, b), s)| ((a - b) / s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain_id: String,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<f64>>,
    /// True per-sample noise scale; evaluation only.
    pub noise_sigmas: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    /// Labels of one output component.
    pub fn component(&self, d: usize) -> Vec<f64> {
        self.labels.iter().map(|y| y[d]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            domain_id: self.domain_id.clone(),
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
            noise_sigmas: indices.iter().map(|&i| self.noise_sigmas[i]).collect(),
        }
    }

    /// Concatenation of several datasets under a new id.
    pub fn concat(domain_id: &str, parts: &[&Dataset]) -> Dataset {
        let mut out = Dataset {
            domain_id: domain_id.to_string(),
            inputs: Vec::new(),
            labels: Vec::new(),
            noise_sigmas: Vec::new(),
        };
        for p in parts {
            out.inputs.extend(p.inputs.iter().cloned());
            out.labels.extend(p.labels.iter().cloned());
            out.noise_sigmas.extend(p.noise_sigmas.iter().copied());
        }
        out
    }

    /// Writes the text format: header line, then
    /// `domain_id,x..,y..,sigma` per sample.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.input_dim() != self.output_dim() {
            return Err(Error::Format(format!(
                "dataset file format needs input dim == label dim, got {} and {}",
                self.input_dim(),
                self.output_dim()
            )));
        }
        if self.domain_id.contains(',') || self.domain_id.contains('\n') {
            return Err(Error::Format(format!("domain id {:?} has a separator", self.domain_id)));
        }
        let mut line = String::new();
        writeln!(w, "{DATASET_HEADER}")?;
        for i in 0..self.len() {
            line.clear();
            line.push_str(&self.domain_id);
            for v in self.inputs[i].iter().chain(&self.labels[i]) {
                write!(line, ",{v}").expect("string write");
            }
            write!(line, ",{}", self.noise_sigmas[i]).expect("string write");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Reads the text format. All records must share one domain id.
    pub fn read_from<R: BufRead>(r: R) -> Result<Dataset> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h == DATASET_HEADER => {}
            Some(Ok(h)) => return Err(Error::Format(format!("bad dataset header {h:?}"))),
            Some(Err(e)) => return Err(e.into()),
            None => return Err(Error::Format("empty dataset file".into())),
        }
        let mut out = Dataset {
            domain_id: String::new(),
            inputs: Vec::new(),
            labels: Vec::new(),
            noise_sigmas: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let lineno = n + 2;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 4 || (fields.len() - 2) % 2 != 0 {
                return Err(Error::Format(format!(
                    "line {lineno}: expected id, D inputs, D labels, sigma"
                )));
            }
            let d = (fields.len() - 2) / 2;
            if out.inputs.is_empty() {
                out.domain_id = fields[0].to_string();
            } else if fields[0] != out.domain_id {
                return Err(Error::Format(format!(
                    "line {lineno}: domain {} differs from {}",
                    fields[0], out.domain_id
                )));
            } else if d != out.input_dim() {
                return Err(Error::Format(format!("line {lineno}: inconsistent width")));
            }
            let nums = fields[1..]
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("line {lineno}: bad number {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if nums.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("line {lineno}: non-finite value")));
            }
            out.inputs.push(nums[..d].to_vec());
            out.labels.push(nums[d..2 * d].to_vec());
            out.noise_sigmas.push(nums[2 * d]);
        }
        Ok(out)
    }
}

pub fn generate_domain(spec: &DomainSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Dataset {
        domain_id: spec.domain_id.clone(),
        inputs: Vec::with_capacity(spec.sample_count),
        labels: Vec::with_capacity(spec.sample_count),
        noise_sigmas: Vec::with_capacity(spec.sample_count),
    };
    for _ in 0..spec.sample_count {
        let x: Vec<f64> = spec
            .input_mean
            .iter()
            .zip(&spec.input_spread)
            .map(|(m, s)| m + s * unit.sample(&mut rng))
            .collect();
        let sigma = spec.sigma_at(&x);
        let y: Vec<f64> = spec
            .targets
            .iter()
            .map(|f| {
                let v = f.eval(&x) + sigma * unit.sample(&mut rng);
                match spec.label_clip {
                    Some((lo, hi)) => v.clamp(lo, hi),
                    None => v,
                }
            })
            .collect();
        data.inputs.push(x);
        data.labels.push(y);
        data.noise_sigmas.push(sigma);
    }
    Ok(data)
}

/// Disjoint random split with sizes in proportion `ratio.0 : ratio.1`.
pub fn split_for_stages(data: &Dataset, ratio: (usize, usize), seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = ratio;
    if a == 0 || b == 0 {
        return Err(Error::Precondition("split ratio components must be positive".into()));
    }
    if data.len() < a + b {
        return Err(Error::Precondition(format!(
            "dataset of {} samples is smaller than ratio sum {}",
            data.len(),
            a + b
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let first = data.len() * a / (a + b);
    let (left, right) = idx.split_at(first);
    let mut left = left.to_vec();
    let mut right = right.to_vec();
    left.sort_unstable();
    right.sort_unstable();
    Ok((data.subset(&left), data.subset(&right)))
}

/// Shared target functions of the default benchmark; domains differ in
/// input distribution, noise and (for targets) a constant label offset.
fn default_targets(offset0: f64, offset1: f64) -> Vec<TargetFunction> {
    vec![
        TargetFunction {
            kind: TargetKind::PiecewiseSine,
            params: vec![0.6, 2.0, 0.6, 1.6, 0.3, offset0],
        },
        TargetFunction {
            kind: TargetKind::CubicBlend,
            params: vec![0.8, 0.25, 0.3, offset1],
        },
    ]
}

fn slab(axis: usize, lo: f64, hi: f64, sigma: f64) -> NoiseRegion {
    NoiseRegion { axis, lo, hi, sigma }
}

/// The four domain specs of the default benchmark: two wide sources and two
/// narrow, shifted targets.
pub fn default_specs() -> (Vec<DomainSpec>, Vec<DomainSpec>) {
    let sources = vec![
        DomainSpec {
            domain_id: "source-a".into(),
            input_mean: vec![-0.9, -0.3],
            input_spread: vec![0.9, 0.8],
            targets: default_targets(0.0, 0.0),
            noise_profile: vec![
                slab(0, f64::NEG_INFINITY, -1.2, 0.30),
                slab(0, -1.2, -0.3, 0.05),
            ],
            base_sigma: 0.15,
            label_clip: None,
            sample_count: 8000,
        },
        DomainSpec {
            domain_id: "source-b".into(),
            input_mean: vec![0.9, 0.4],
            input_spread: vec![0.8, 0.9],
            targets: default_targets(0.0, 0.0),
            noise_profile: vec![
                slab(1, 1.0, f64::INFINITY, 0.35),
                slab(0, f64::NEG_INFINITY, 0.8, 0.05),
            ],
            base_sigma: 0.18,
            label_clip: None,
            sample_count: 4000,
        },
    ];
    let targets = vec![
        DomainSpec {
            domain_id: "target-c".into(),
            input_mean: vec![0.0, 1.2],
            input_spread: vec![0.4, 0.35],
            targets: default_targets(0.2, -0.15),
            noise_profile: vec![],
            base_sigma: 0.1,
            label_clip: None,
            sample_count: 2000,
        },
        DomainSpec {
            domain_id: "target-d".into(),
            input_mean: vec![0.0, -1.3],
            input_spread: vec![0.4, 0.35],
            targets: default_targets(-0.15, 0.2),
            noise_profile: vec![],
            base_sigma: 0.1,
            label_clip: None,
            sample_count: 2000,
        },
    ];
    (sources, targets)
}

/// An extra domain far from both sources, for out-of-distribution checks.
pub fn ood_spec() -> DomainSpec {
    DomainSpec {
        domain_id: "ood".into(),
        input_mean: vec![3.2, -2.6],
        input_spread: vec![0.4, 0.4],
        targets: default_targets(0.0, 0.0),
        noise_profile: vec![],
        base_sigma: 0.1,
        label_clip: None,
        sample_count: 2000,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub sources: Vec<Dataset>,
    pub targets: Vec<Dataset>,
}

/// Per-domain seeds are derived from `seed` so domains are independent.
pub fn domain_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9) + 1)
}

pub fn default_benchmark(seed: u64) -> Result<Benchmark> {
    let (src, tgt) = default_specs();
    for t in &tgt {
        for s in &src {
            if t.standardized_distance_to(s) <= 1.0 {
                return Err(Error::Config(format!(
                    "target {} lies within one spread of source {}",
                    t.domain_id, s.domain_id
                )));
            }
        }
    }
    let sources = src
        .iter()
        .enumerate()
        .map(|(i, s)| generate_domain(s, domain_seed(seed, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let targets = tgt
        .iter()
        .enumerate()
        .map(|(i, s)| generate_domain(s, domain_seed(seed, 10 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark { sources, targets })
}

pub fn ood_domain(seed: u64) -> Result<Dataset> {
    generate_domain(&ood_spec(), domain_seed(seed, 20))
}
