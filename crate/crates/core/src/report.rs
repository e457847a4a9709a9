//! Result files: per-seed CSVs, seed-averaged tables, heatmap data and the
//! hashed manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::{SeedResult, Variant};

pub const RESULTS_FORMAT: &str = "evifuse-results v1";
pub const MANIFEST: &str = "manifest.toml";

/// Decimal text with ten significant digits.
pub fn fmt_num(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return "0.000000000".into();
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = (9 - exp).clamp(0, 40) as usize;
    format!("{v:.decimals$}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, fmt_num)
}

fn parse_num(s: &str, what: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Format(format!("{what}: `{s}` is not a number")))
}

fn parse_opt(s: &str, what: &str) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_num(s, what).map(Some)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Header and rows of a CSV file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()).map_err(|e| csv_err(path, e)))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}

/// One metrics line of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub seed: u64,
    pub variant: Variant,
    pub dataset: String,
    pub role: String,
    pub mae: Vec<f64>,
    pub joint_error: f64,
    pub mean_aleatoric: Option<f64>,
    pub mean_epistemic: Option<f64>,
    pub samples: usize,
}

impl MetricRecord {
    pub fn mean_mae(&self) -> f64 {
        self.mae.iter().sum::<f64>() / self.mae.len() as f64
    }
}

/// A named scalar diagnostic of one seed, optionally tied to a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagRecord {
    pub seed: u64,
    pub metric: String,
    pub dataset: String,
    pub value: f64,
}

/// Everything the reports aggregate, for any number of seeds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Records {
    pub metrics: Vec<MetricRecord>,
    pub diagnostics: Vec<DiagRecord>,
    /// `(seed, dataset, participant, weight)`.
    pub branch_weights: Vec<(u64, String, String, f64)>,
    /// `(seed, component, true group, regressor, weight)`.
    pub regressor_weights: Vec<(u64, usize, usize, usize, f64)>,
    /// `(seed, dataset, mean epistemic, mean aleatoric)`.
    pub uncertainty: Vec<(u64, String, f64, f64)>,
    /// `(seed, dataset, true sigma, predicted aleatoric)` per test sample.
    pub aleatoric_pairs: Vec<(u64, String, f64, f64)>,
}

pub fn participant_names(count: usize, has_cross: bool) -> Vec<String> {
    let singles = if has_cross { count - 1 } else { count };
    let mut v: Vec<String> = (0..singles).map(|n| format!("branch{n}")).collect();
    if has_cross {
        v.push("cross".into());
    }
    v
}

impl Records {
    pub fn from_results(results: &[SeedResult]) -> Records {
        let mut out = Records::default();
        for r in results {
            out.extend_seed(r);
        }
        out
    }

    fn extend_seed(&mut self, r: &SeedResult) {
        for row in &r.rows {
            let m = &row.metrics;
            self.metrics.push(MetricRecord {
                seed: r.seed,
                variant: row.variant,
                dataset: row.dataset.clone(),
                role: row.role.clone(),
                mae: m.mae.clone(),
                joint_error: m.joint_error,
                mean_aleatoric: m.mean_aleatoric,
                mean_epistemic: m.mean_epistemic,
                samples: m.sample_count,
            });
        }
        let Some(d) = &r.diagnostics else { return };
        let has_cross = r.eif.as_ref().is_some_and(|m| m.cross.is_some() && m.flags.use_cross);
        let mut push = |metric: &str, dataset: &str, value: f64| {
            self.diagnostics.push(DiagRecord {
                seed: r.seed,
                metric: metric.into(),
                dataset: dataset.into(),
                value,
            })
        };
        push("diagonal_hit_rate", &d.weight_datasets[0], d.diagonal_hit_rate);
        for (k, v) in d.self_identification.iter().enumerate() {
            push("self_identification", &d.weight_datasets[k], *v);
        }
        for (k, v) in d.aleatoric_spearman.iter().enumerate() {
            push("aleatoric_spearman", &d.weight_datasets[k], *v);
        }
        push("ood_epistemic_ratio", "ood", d.ood_epistemic_ratio);
        for (ds, w) in d.weight_datasets.iter().zip(&d.branch_weights) {
            let names = participant_names(w.len(), has_cross);
            for (name, v) in names.iter().zip(w) {
                self.branch_weights.push((r.seed, ds.clone(), name.clone(), *v));
            }
        }
        for (c, heat) in d.regressor_heatmap.iter().enumerate() {
            for (g, row) in heat.iter().enumerate() {
                for (k, v) in row.iter().enumerate() {
                    self.regressor_weights.push((r.seed, c, g, k, *v));
                }
            }
        }
        for (ds, epi, alea) in &d.uncertainty_summary {
            self.uncertainty.push((r.seed, ds.clone(), *epi, *alea));
        }
        for (ds, sigma, alea) in &d.aleatoric_pairs {
            self.aleatoric_pairs.push((r.seed, ds.clone(), *sigma, *alea));
        }
    }

    pub fn extend(&mut self, other: Records) {
        self.metrics.extend(other.metrics);
        self.diagnostics.extend(other.diagnostics);
        self.branch_weights.extend(other.branch_weights);
        self.regressor_weights.extend(other.regressor_weights);
        self.uncertainty.extend(other.uncertainty);
        self.aleatoric_pairs.extend(other.aleatoric_pairs);
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.metrics.iter().map(|m| m.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Seed-averaged mean of `f` over rows of `variant` with `role`.
    pub fn role_mean(&self, variant: Variant, role: &str, f: impl Fn(&MetricRecord) -> f64) -> Option<f64> {
        let per_seed: Vec<f64> = self
            .seeds()
            .into_iter()
            .filter_map(|seed| {
                let xs: Vec<f64> = self
                    .metrics
                    .iter()
                    .filter(|m| m.seed == seed && m.variant == variant && m.role == role)
                    .map(&f)
                    .collect();
                (!xs.is_empty()).then(|| mean(&xs))
            })
            .collect();
        (!per_seed.is_empty()).then(|| mean(&per_seed))
    }

    /// Seed average of diagnostic `metric` (for `dataset`, or over all datasets).
    pub fn diagnostic_mean(&self, metric: &str, dataset: Option<&str>) -> Option<f64> {
        let xs: Vec<f64> = self
            .diagnostics
            .iter()
            .filter(|d| d.metric == metric && dataset.map_or(true, |ds| d.dataset == ds))
            .map(|d| d.value)
            .collect();
        (!xs.is_empty()).then(|| mean(&xs))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

const METRIC_HEADER: [&str; 10] = [
    "seed",
    "variant",
    "dataset",
    "role",
    "mae_0",
    "mae_1",
    "mean_mae",
    "joint_error",
    "mean_aleatoric",
    "mean_epistemic",
];

fn metric_row(m: &MetricRecord) -> Vec<String> {
    let mut row = vec![m.seed.to_string(), m.variant.to_string(), m.dataset.clone(), m.role.clone()];
    row.push(m.mae.first().copied().map_or_else(String::new, fmt_num));
    row.push(m.mae.get(1).copied().map_or_else(String::new, fmt_num));
    row.push(fmt_num(m.mean_mae()));
    row.push(fmt_num(m.joint_error));
    row.push(opt_num(m.mean_aleatoric));
    row.push(opt_num(m.mean_epistemic));
    row.push(m.samples.to_string());
    row
}

fn metric_header() -> Vec<&'static str> {
    let mut h = METRIC_HEADER.to_vec();
    h.push("samples");
    h
}

const PAIR_HEADER: [&str; 4] = ["seed", "dataset", "true_sigma", "aleatoric"];

fn pair_rows(rec: &Records) -> Vec<Vec<String>> {
    rec.aleatoric_pairs
        .iter()
        .map(|(seed, ds, s, a)| vec![seed.to_string(), ds.clone(), fmt_num(*s), fmt_num(*a)])
        .collect()
}

/// Writes the per-seed files into `dir` and returns their paths.
pub fn write_seed(dir: &Path, r: &SeedResult) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let rec = Records::from_results(std::slice::from_ref(r));
    let mut files = Vec::new();
    let mut emit = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let p = dir.join(name);
        write_csv(&p, header, &rows)?;
        files.push(p);
        Ok(())
    };
    emit("metrics.csv", &metric_header(), rec.metrics.iter().map(metric_row).collect())?;
    let mut trace_rows = Vec::new();
    for (name, t) in &r.traces {
        trace_rows.extend(t.iter().enumerate().map(|(i, v)| vec![name.clone(), i.to_string(), fmt_num(*v)]));
    }
    emit("traces.csv", &["trace", "batch", "loss"], trace_rows)?;
    emit(
        "warnings.csv",
        &["warning"],
        r.warnings.iter().map(|w| vec![w.clone()]).collect(),
    )?;
    if r.diagnostics.is_some() {
        emit(
            "diagnostics.csv",
            &["seed", "metric", "dataset", "value"],
            rec.diagnostics
                .iter()
                .map(|x| vec![x.seed.to_string(), x.metric.clone(), x.dataset.clone(), fmt_num(x.value)])
                .collect(),
        )?;
        emit(
            "branch_weights.csv",
            &["seed", "dataset", "participant", "weight"],
            rec.branch_weights
                .iter()
                .map(|(s, ds, p, v)| vec![s.to_string(), ds.clone(), p.clone(), fmt_num(*v)])
                .collect(),
        )?;
        emit(
            "regressor_heatmap.csv",
            &["seed", "component", "true_group", "regressor", "weight"],
            rec.regressor_weights
                .iter()
                .map(|(s, c, g, k, v)| vec![s.to_string(), c.to_string(), g.to_string(), k.to_string(), fmt_num(*v)])
                .collect(),
        )?;
        emit(
            "uncertainty_summary.csv",
            &["seed", "dataset", "mean_epistemic", "mean_aleatoric"],
            rec.uncertainty
                .iter()
                .map(|(s, ds, e, a)| vec![s.to_string(), ds.clone(), fmt_num(*e), fmt_num(*a)])
                .collect(),
        )?;
        emit("aleatoric_pairs.csv", &PAIR_HEADER, pair_rows(&rec))?;
    }
    Ok(files)
}

fn col(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Format(format!("{}: missing column `{name}`", path.display())))
}

fn cell<'a>(row: &'a [String], i: usize, path: &Path) -> Result<&'a str> {
    row.get(i)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("{}: short row", path.display())))
}

fn parse_seed(s: &str, path: &Path) -> Result<u64> {
    s.parse()
        .map_err(|_| Error::Format(format!("{}: bad seed `{s}`", path.display())))
}

fn parse_index(s: &str, path: &Path) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Format(format!("{}: bad index `{s}`", path.display())))
}

/// Reads the per-seed CSVs written by [`write_seed`].
pub fn read_seed(dir: &Path) -> Result<Records> {
    let mut rec = Records::default();
    let path = dir.join("metrics.csv");
    let (h, rows) = read_csv(&path)?;
    let idx: Vec<usize> = metric_header()
        .iter()
        .map(|c| col(&h, c, &path))
        .collect::<Result<_>>()?;
    for row in &rows {
        let c = |k: usize| cell(row, idx[k], &path);
        let mut mae = vec![parse_num(c(4)?, "mae_0")?];
        if let Some(v) = parse_opt(c(5)?, "mae_1")? {
            mae.push(v);
        }
        rec.metrics.push(MetricRecord {
            seed: parse_seed(c(0)?, &path)?,
            variant: c(1)?.parse()?,
            dataset: c(2)?.to_string(),
            role: c(3)?.to_string(),
            mae,
            joint_error: parse_num(c(7)?, "joint_error")?,
            mean_aleatoric: parse_opt(c(8)?, "mean_aleatoric")?,
            mean_epistemic: parse_opt(c(9)?, "mean_epistemic")?,
            samples: parse_index(c(10)?, &path)?,
        });
    }
    let path = dir.join("diagnostics.csv");
    if !path.exists() {
        return Ok(rec);
    }
    let (_, rows) = read_csv(&path)?;
    for row in &rows {
        rec.diagnostics.push(DiagRecord {
            seed: parse_seed(cell(row, 0, &path)?, &path)?,
            metric: cell(row, 1, &path)?.into(),
            dataset: cell(row, 2, &path)?.into(),
            value: parse_num(cell(row, 3, &path)?, "value")?,
        });
    }
    let path = dir.join("branch_weights.csv");
    for row in &read_csv(&path)?.1 {
        rec.branch_weights.push((
            parse_seed(cell(row, 0, &path)?, &path)?,
            cell(row, 1, &path)?.into(),
            cell(row, 2, &path)?.into(),
            parse_num(cell(row, 3, &path)?, "weight")?,
        ));
    }
    let path = dir.join("regressor_heatmap.csv");
    for row in &read_csv(&path)?.1 {
        rec.regressor_weights.push((
            parse_seed(cell(row, 0, &path)?, &path)?,
            parse_index(cell(row, 1, &path)?, &path)?,
            parse_index(cell(row, 2, &path)?, &path)?,
            parse_index(cell(row, 3, &path)?, &path)?,
            parse_num(cell(row, 4, &path)?, "weight")?,
        ));
    }
    let path = dir.join("uncertainty_summary.csv");
    for row in &read_csv(&path)?.1 {
        rec.uncertainty.push((
            parse_seed(cell(row, 0, &path)?, &path)?,
            cell(row, 1, &path)?.into(),
            parse_num(cell(row, 2, &path)?, "mean_epistemic")?,
            parse_num(cell(row, 3, &path)?, "mean_aleatoric")?,
        ));
    }
    let path = dir.join("aleatoric_pairs.csv");
    for row in &read_csv(&path)?.1 {
        rec.aleatoric_pairs.push((
            parse_seed(cell(row, 0, &path)?, &path)?,
            cell(row, 1, &path)?.into(),
            parse_num(cell(row, 2, &path)?, "true_sigma")?,
            parse_num(cell(row, 3, &path)?, "aleatoric")?,
        ));
    }
    Ok(rec)
}

fn group_mean<K: Ord + Clone>(items: impl IntoIterator<Item = (K, f64)>) -> BTreeMap<K, f64> {
    let mut acc: BTreeMap<K, (f64, usize)> = BTreeMap::new();
    for (k, v) in items {
        let e = acc.entry(k).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Writes the seed-averaged tables into `dir` and returns their paths.
pub fn write_aggregate(dir: &Path, rec: &Records) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut emit = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let p = dir.join(name);
        write_csv(&p, header, &rows)?;
        files.push(p);
        Ok(())
    };
    let seeds = rec.seeds();
    let mut keys: Vec<(Variant, String, String)> = Vec::new();
    for m in &rec.metrics {
        let k = (m.variant, m.dataset.clone(), m.role.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut rows = Vec::new();
    for (v, ds, role) in &keys {
        let ms: Vec<&MetricRecord> = rec
            .metrics
            .iter()
            .filter(|m| m.variant == *v && &m.dataset == ds)
            .collect();
        let avg = |f: &dyn Fn(&MetricRecord) -> f64| mean(&ms.iter().map(|m| f(m)).collect::<Vec<_>>());
        let opt = |f: &dyn Fn(&MetricRecord) -> Option<f64>| {
            let xs: Option<Vec<f64>> = ms.iter().map(|m| f(m)).collect();
            xs.map(|x| mean(&x))
        };
        rows.push(vec![
            v.to_string(),
            ds.clone(),
            role.clone(),
            fmt_num(avg(&|m| m.mae[0])),
            ms[0].mae.get(1).map_or_else(String::new, |_| fmt_num(avg(&|m| m.mae[1]))),
            fmt_num(avg(&|m| m.mean_mae())),
            fmt_num(avg(&|m| m.joint_error)),
            opt_num(opt(&|m| m.mean_aleatoric)),
            opt_num(opt(&|m| m.mean_epistemic)),
            ms.len().to_string(),
        ]);
    }
    let mut header = metric_header()[1..10].to_vec();
    header.push("seeds");
    emit("metrics_mean.csv", &header, rows)?;

    let mut datasets: Vec<(String, String)> = Vec::new();
    for (_, ds, role) in &keys {
        if !datasets.iter().any(|(d, _)| d == ds) {
            datasets.push((ds.clone(), role.clone()));
        }
    }
    let mut variants: Vec<Variant> = Vec::new();
    for (v, _, _) in &keys {
        if !variants.contains(v) {
            variants.push(*v);
        }
    }
    let mut header: Vec<String> = vec!["variant".into()];
    header.extend(datasets.iter().map(|(d, _)| d.clone()));
    header.extend(["source_mean".into(), "target_mean".into()]);
    let rows = variants
        .iter()
        .map(|v| {
            let mut row = vec![v.to_string()];
            for (ds, _) in &datasets {
                let xs: Vec<f64> = rec
                    .metrics
                    .iter()
                    .filter(|m| m.variant == *v && &m.dataset == ds)
                    .map(|m| m.joint_error)
                    .collect();
                row.push(if xs.is_empty() { String::new() } else { fmt_num(mean(&xs)) });
            }
            for role in ["source", "target"] {
                row.push(opt_num(rec.role_mean(*v, role, |m| m.joint_error)));
            }
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    emit("comparison.csv", &header_refs, rows)?;

    let bw = group_mean(rec.branch_weights.iter().map(|(_, ds, p, v)| ((ds.clone(), p.clone()), *v)));
    let mut order: Vec<String> = Vec::new();
    for (_, ds, _, _) in &rec.branch_weights {
        if !order.contains(ds) {
            order.push(ds.clone());
        }
    }
    let rows = order
        .iter()
        .flat_map(|ds| {
            bw.iter()
                .filter(move |((d, _), _)| d == ds)
                .map(|((d, p), v)| vec![d.clone(), p.clone(), fmt_num(*v)])
        })
        .collect();
    emit("branch_weight_heatmap.csv", &["dataset", "participant", "mean_weight"], rows)?;

    let rw = group_mean(rec.regressor_weights.iter().map(|(_, c, g, k, v)| ((*c, *g, *k), *v)));
    emit(
        "regressor_weight_heatmap.csv",
        &["component", "true_group", "regressor", "mean_weight"],
        rw.iter()
            .map(|((c, g, k), v)| vec![c.to_string(), g.to_string(), k.to_string(), fmt_num(*v)])
            .collect(),
    )?;

    let epi = group_mean(rec.uncertainty.iter().map(|(_, ds, e, _)| (ds.clone(), *e)));
    let alea = group_mean(rec.uncertainty.iter().map(|(_, ds, _, a)| (ds.clone(), *a)));
    let mut order: Vec<String> = Vec::new();
    for (_, ds, _, _) in &rec.uncertainty {
        if !order.contains(ds) {
            order.push(ds.clone());
        }
    }
    emit(
        "uncertainty_summary.csv",
        &["dataset", "mean_epistemic", "mean_aleatoric"],
        order.iter().map(|ds| vec![ds.clone(), fmt_num(epi[ds]), fmt_num(alea[ds])]).collect(),
    )?;

    emit("aleatoric_pairs.csv", &PAIR_HEADER, pair_rows(rec))?;

    let diag = group_mean(rec.diagnostics.iter().map(|d| ((d.metric.clone(), d.dataset.clone()), d.value)));
    emit(
        "diagnostics_mean.csv",
        &["metric", "dataset", "value", "seeds"],
        diag.iter()
            .map(|((m, ds), v)| vec![m.clone(), ds.clone(), fmt_num(*v), seeds.len().to_string()])
            .collect(),
    )?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// `complete`, or `incomplete` when a seed failed.
    pub status: String,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub failures: Vec<String>,
    #[serde(default)]
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl Manifest {
    pub fn new(seeds: Vec<u64>, failures: Vec<String>, root: &Path, files: &[PathBuf]) -> Result<Self> {
        let mut entries = files
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(root).unwrap_or(p);
                Ok(ManifestEntry {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Self {
            format: RESULTS_FORMAT.into(),
            status: if failures.is_empty() { "complete" } else { "incomplete" }.into(),
            seeds,
            failures,
            files: entries,
        })
    }

    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let p = root.join(MANIFEST);
        fs::write(&p, toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?)?;
        Ok(p)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let p = root.join(MANIFEST);
        let text = fs::read_to_string(&p)?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    }

    /// Checks the format tag and every listed hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        if self.format != RESULTS_FORMAT {
            return Err(Error::Format(format!(
                "{}: results format `{}` differs from `{RESULTS_FORMAT}`",
                root.display(),
                self.format
            )));
        }
        for e in &self.files {
            let actual = sha256_file(&root.join(&e.path))?;
            if actual != e.sha256 {
                return Err(Error::Format(format!("{}: hash mismatch for {}", root.display(), e.path)));
            }
        }
        Ok(())
    }
}

/// Loads every seed from result directories after checking their manifests.
pub fn load_results(roots: &[PathBuf]) -> Result<Records> {
    let mut all = Records::default();
    let mut seen = Vec::new();
    for root in roots {
        let manifest = Manifest::read(root)?;
        manifest.verify(root)?;
        for &seed in &manifest.seeds {
            if seen.contains(&seed) {
                return Err(Error::Format(format!("seed {seed} appears in more than one input")));
            }
            seen.push(seed);
            all.extend(read_seed(&root.join(format!("seed{seed}")))?);
        }
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_keep_ten_significant_digits() {
        assert_eq!(fmt_num(0.5), "0.5000000000");
        assert_eq!(fmt_num(1234.5), "1234.500000");
        assert_eq!(fmt_num(-0.000123456789012), "-0.0001234567890");
        assert_eq!(fmt_num(0.0), "0.000000000");
        for v in [3.0e-7, 0.123456789, 98765.4321, -2.5] {
            let s = fmt_num(v);
            let digits = s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len();
            assert!(digits >= 6, "{s}");
            assert!(((s.parse::<f64>().unwrap() - v) / v).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &["a", "b"], &[vec!["x,y".into(), "1".into()]]).unwrap();
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, vec!["a", "b"]);
        assert_eq!(rows, vec![vec!["x,y".to_string(), "1".to_string()]]);
    }

    #[test]
    fn manifest_detects_tampering_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.csv");
        write_csv(&f, &["x"], &[vec!["1".into()]]).unwrap();
        let m = Manifest::new(vec![1], vec![], dir.path(), &[f.clone()]).unwrap();
        m.write(dir.path()).unwrap();
        let back = Manifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        back.verify(dir.path()).unwrap();
        fs::write(&f, "x\n2\n").unwrap();
        assert!(back.verify(dir.path()).is_err());
        let old = Manifest {
            format: "evifuse-results v0".into(),
            ..m
        };
        assert!(matches!(old.verify(dir.path()), Err(Error::Format(s)) if s.contains("format")));
    }
}
