use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evifuse::checkpoint::Checkpoint;
use evifuse::config::ExperimentConfig;
use evifuse::experiment::{fresh_base, prepare_data, PreparedData};
use evifuse::gradcheck::{run_gradcheck, GradcheckConfig};
use evifuse::model::EifModel;
use evifuse::nig::{evidential_loss, monig_fuse, NigParams};
use evifuse::partition::build_partition;
use evifuse::report::{fmt_num, write_csv};
use evifuse::synth::Dataset;
use evifuse::training::{
    evaluate, finetune_adapt, train_baseline, train_stage1, train_stage2, BaselineVariant, Metrics,
    Predictor,
};
use evifuse::{runner, Error, Result};

#[derive(Parser)]
#[command(name = "evifuse", version, about = "Evidential fusion experiments on synthetic multi-source data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Benchmark seed; defaults to the first configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the benchmark splits for one seed as dataset files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the label groups of a file of labels.
    Partition {
        /// Labels, whitespace or comma separated.
        labels: PathBuf,
        #[arg(long, default_value_t = 8)]
        groups: usize,
        #[arg(long, default_value_t = 2.0)]
        overlap: f64,
    },
    /// Fuse NIG tuples `delta gamma alpha beta`, one per line.
    Fuse {
        /// Input file; standard input when omitted.
        input: Option<PathBuf>,
    },
    /// Print the evidential loss terms.
    #[command(allow_negative_numbers = true)]
    Loss {
        delta: f64,
        gamma: f64,
        alpha: f64,
        beta: f64,
        y: f64,
        #[arg(default_value_t = 0.01)]
        lambda: f64,
    },
    /// Finite-difference check of the stage-1 and stage-2 loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        cases: usize,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train the single-dataset branches.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach the cross branch and train the fused model from a stage-1 checkpoint.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a baseline regressor.
    TrainBaseline {
        #[command(flatten)]
        common: Common,
        /// single_N, simple_mix or balanced_mix.
        #[arg(long, default_value = "balanced_mix")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the source test and target sets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a fused model on the few-shot samples of one target.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target index.
        #[arg(long, default_value_t = 0)]
        target: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate finished result directories.
    Report {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configured seed and variant.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Precondition(_) | Error::Shape(_) | Error::Format(_) => 2,
        Error::Domain(_) | Error::NumericRange(_) => 3,
        Error::Io(_) | Error::Checkpoint(_) => 4,
    }
}

/// Six decimals with trailing zeros dropped.
fn short(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, u64)> {
    let cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.experiment.seeds[0]);
    Ok((cfg, seed))
}

fn prepared(common: &Common) -> Result<(ExperimentConfig, u64, PreparedData)> {
    let (cfg, seed) = load_config(common)?;
    let data = prepare_data(seed, &cfg.run_settings())?;
    Ok((cfg, seed, data))
}

fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let mut w = io::BufWriter::new(fs::File::create(path)?);
    d.write_to(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = trace.iter().enumerate().map(|(i, v)| vec![i.to_string(), fmt_num(*v)]).collect();
    write_csv(path, &["batch", "loss"], &rows)
}

fn parse_numbers(text: &str) -> Result<Vec<f64>> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Format(format!("`{t}` is not a number"))))
        .collect()
}

fn fuse(input: Option<&Path>) -> Result<String> {
    let reader: Box<dyn BufRead> = match input {
        Some(p) => Box::new(BufReader::new(fs::File::open(p)?)),
        None => Box::new(BufReader::new(io::stdin())),
    };
    let mut items = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let v = parse_numbers(body).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if v.len() != 4 {
            return Err(Error::Format(format!("line {}: expected 4 values, got {}", n + 1, v.len())));
        }
        items.push(NigParams::new(v[0], v[1], v[2], v[3]).map_err(|e| match e {
            Error::Domain(m) => Error::Domain(format!("line {}: {m}", n + 1)),
            other => other,
        })?);
    }
    if items.is_empty() {
        return Err(Error::Format("no NIG tuples in input".into()));
    }
    let f = monig_fuse(&items)?;
    Ok(format!(
        "δ={} γ={} α={} β={}",
        short(f.delta),
        short(f.gamma),
        short(f.alpha),
        short(f.beta)
    ))
}

fn metric_rows(model: &dyn Predictor, data: &PreparedData) -> Result<Vec<Vec<String>>> {
    let mut rows = Vec::new();
    let sets = data
        .source_test
        .iter()
        .map(|d| (d, "source"))
        .chain(data.target_eval.iter().map(|d| (d, "target")));
    for (d, role) in sets {
        rows.push(metric_row(&d.domain_id, role, &evaluate(model, d)?));
    }
    Ok(rows)
}

const METRIC_HEADER: [&str; 9] = [
    "dataset",
    "role",
    "mae_0",
    "mae_1",
    "mean_mae",
    "joint_error",
    "mean_aleatoric",
    "mean_epistemic",
    "samples",
];

fn metric_row(dataset: &str, role: &str, m: &Metrics) -> Vec<String> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, fmt_num);
    vec![
        dataset.into(),
        role.into(),
        opt(m.mae.first().copied()),
        opt(m.mae.get(1).copied()),
        fmt_num(m.mean_mae()),
        fmt_num(m.joint_error),
        opt(m.mean_aleatoric),
        opt(m.mean_epistemic),
        m.sample_count.to_string(),
    ]
}

fn load_eif(path: &Path) -> Result<EifModel> {
    Checkpoint::load(path)?.into_eif()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let (_, _, data) = prepared(&common)?;
            fs::create_dir_all(&out)?;
            let groups: [(&str, &[Dataset]); 5] = [
                ("stage1", &data.stage1),
                ("stage2", &data.stage2),
                ("test", &data.source_test),
                ("adapt", &data.adapt),
                ("eval", &data.target_eval),
            ];
            for (prefix, sets) in groups {
                for d in sets {
                    let p = out.join(format!("{prefix}_{}.csv", d.domain_id));
                    write_dataset(&p, d)?;
                    println!("{}", p.display());
                }
            }
            let p = out.join(format!("ood_{}.csv", data.ood.domain_id));
            write_dataset(&p, &data.ood)?;
            println!("{}", p.display());
        }
        Command::Partition {
            labels,
            groups,
            overlap,
        } => {
            let values = parse_numbers(&fs::read_to_string(&labels)?)?;
            let spec = build_partition(&values, groups, overlap)?;
            println!("group\tleft\tright\tcenter\tlength\tmembers");
            for g in &spec.groups {
                let members = values.iter().filter(|&&y| g.contains(y)).count();
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    g.index,
                    short(g.left),
                    short(g.right),
                    short(g.center),
                    short(g.length),
                    members
                );
            }
        }
        Command::Fuse { input } => println!("{}", fuse(input.as_deref())?),
        Command::Loss {
            delta,
            gamma,
            alpha,
            beta,
            y,
            lambda,
        } => {
            let p = NigParams::new(delta, gamma, alpha, beta)?;
            let l = evidential_loss(&p, y, lambda)?;
            println!("nll={} reg={} total={}", short(l.nll), short(l.reg), short(l.total));
        }
        Command::Gradcheck { seed, cases, tolerance } => {
            let report = run_gradcheck(&GradcheckConfig {
                seed,
                cases,
                tolerance,
                ..GradcheckConfig::default()
            })?;
            let checked: usize = report.cases.iter().map(|c| c.checked).sum();
            let skipped: usize = report.cases.iter().map(|c| c.skipped).sum();
            println!(
                "cases={} checked={checked} skipped={skipped} max_rel_error={:.3e}",
                report.cases.len(),
                report.max_rel_error()
            );
            for c in report.cases.iter().filter(|c| !c.failures.is_empty()) {
                for (name, i, a, n) in &c.failures {
                    eprintln!("case {} {:?}: {name}[{i}] analytic {a:e} numeric {n:e}", c.case, c.stage);
                }
            }
            if !report.passed() {
                return Err(Error::NumericRange("gradient check failed".into()));
            }
        }
        Command::TrainStage1 { common, out } => {
            let (cfg, seed, data) = prepared(&common)?;
            let train = cfg.train(seed);
            let (mut base, _) = fresh_base(seed, &cfg.network(), &data)?;
            fs::create_dir_all(&out)?;
            for (n, branch) in base.branches.iter_mut().enumerate() {
                let report = train_stage1(branch, &data.stage1[n], &train)?;
                for (d, g) in report.empty_groups {
                    eprintln!("warning: branch {n}: component {d} group {g} has no training samples");
                }
                write_trace(&out.join(format!("stage1_branch{n}.csv")), &report.trace)?;
            }
            Checkpoint::Eif(base).save(&out.join("stage1.evf"))?;
        }
        Command::TrainStage2 { common, checkpoint, out } => {
            let (cfg, seed, data) = prepared(&common)?;
            let mut model = load_eif(&checkpoint)?;
            if model.config != cfg.network() {
                return Err(Error::Config("network section differs from the checkpoint's network".into()));
            }
            let (_, mut rng) = fresh_base(seed, &model.config, &data)?;
            let refs: Vec<&Dataset> = data.stage2.iter().collect();
            model.flags = cfg.ablation.fusion_flags();
            if model.flags.use_cross && model.cross.is_none() {
                model.attach_cross(&refs, &mut rng)?;
            }
            let trace = train_stage2(&mut model, &refs, &cfg.train(seed))?;
            fs::create_dir_all(&out)?;
            write_trace(&out.join("stage2.csv"), &trace)?;
            Checkpoint::Eif(model).save(&out.join("eif.evf"))?;
        }
        Command::TrainBaseline { common, variant, out } => {
            let (cfg, seed, data) = prepared(&common)?;
            let train = cfg.train(seed);
            let budget = train.stage1_batches + train.stage2_batches;
            let all: Vec<&Dataset> = data.source_train.iter().collect();
            let (kind, sets): (BaselineVariant, Vec<&Dataset>) = match variant.as_str() {
                "simple_mix" => (BaselineVariant::SimpleMix, all),
                "balanced_mix" => (BaselineVariant::BalancedMix, all),
                v => {
                    let n: usize = v
                        .strip_prefix("single_")
                        .and_then(|n| n.parse().ok())
                        .filter(|&n| n < data.source_train.len())
                        .ok_or_else(|| Error::Config(format!("--variant: unknown baseline `{v}`")))?;
                    (BaselineVariant::Single, vec![&data.source_train[n]])
                }
            };
            let network = cfg.network();
            let (model, trace) = train_baseline(kind, &sets, &network, &train, budget)?;
            fs::create_dir_all(&out)?;
            write_trace(&out.join(format!("baseline_{variant}.csv")), &trace)?;
            Checkpoint::Baseline { network, model }.save(&out.join(format!("{variant}.evf")))?;
        }
        Command::Eval { common, checkpoint, out } => {
            let (_, _, data) = prepared(&common)?;
            let rows = match Checkpoint::load(&checkpoint)? {
                Checkpoint::Eif(m) => metric_rows(&m, &data)?,
                Checkpoint::Baseline { model, .. } => metric_rows(&model, &data)?,
            };
            for r in &rows {
                println!("{} {} mean_mae={} joint_error={}", r[0], r[1], r[4], r[5]);
            }
            write_csv(&out.join("metrics.csv"), &METRIC_HEADER, &rows)?;
        }
        Command::Adapt {
            common,
            checkpoint,
            target,
            out,
        } => {
            let (cfg, seed, data) = prepared(&common)?;
            let (adapt, eval) = data
                .adapt
                .get(target)
                .zip(data.target_eval.get(target))
                .ok_or_else(|| Error::Config(format!("--target {target}: only {} targets", data.adapt.len())))?;
            let mut model = load_eif(&checkpoint)?;
            let before = evaluate(&model, eval)?;
            let trace = finetune_adapt(&mut model, adapt, &cfg.train(seed), cfg.experiment.adapt_batches)?;
            let after = evaluate(&model, eval)?;
            println!(
                "{} mean_mae before={} after={}",
                eval.domain_id,
                fmt_num(before.mean_mae()),
                fmt_num(after.mean_mae())
            );
            fs::create_dir_all(&out)?;
            write_trace(&out.join(format!("adapt_target{target}.csv")), &trace)?;
            write_csv(
                &out.join("metrics.csv"),
                &METRIC_HEADER,
                &[
                    metric_row(&format!("{}:before", eval.domain_id), "target", &before),
                    metric_row(&format!("{}:after", eval.domain_id), "target", &after),
                ],
            )?;
            Checkpoint::Eif(model).save(&out.join(format!("adapted_target{target}.evf")))?;
        }
        Command::Report { inputs, out } => {
            let records = runner::report(&inputs, &out)?;
            println!("aggregated {} seeds into {}", records.seeds().len(), out.display());
        }
        Command::Experiment {
            config,
            seed,
            out,
            workers,
        } => {
            let mut cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = seed {
                cfg.experiment.seeds = vec![s];
            }
            let out = out.unwrap_or_else(|| cfg.experiment.output_dir.clone());
            let outcome = runner::run_experiment(&cfg, &out, workers.unwrap_or_else(runner::default_workers))?;
            println!(
                "{} seeds, {} files, results in {}",
                outcome.manifest.seeds.len(),
                outcome.manifest.files.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
