use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use al_policy::eval::{
    compare_table, domain_count_study, evaluate, loo_experiment, study_to_tsv, DatasetResults,
    Method, MethodResult, ReportTable,
};
use al_policy::trainer::{initial_checkpoint, train_from};
use al_policy::{Checkpoint, Dataset, Error, Execution, Manifest, Result};

mod config;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "al-policy", version, about = "Train and evaluate learned active-learning query policies")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Base seed for training and evaluation splits.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Scaled settings: `desk` (2000 iterations, 20 trials) or `paper`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Dataset manifest (same as `--set manifest=...`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Worker threads; 1 runs everything on the calling thread.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load and validate every dataset in the manifest.
    Prepare,
    /// Train a policy on the configured datasets.
    Train,
    /// Evaluate a trained policy on the configured datasets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate the fixed query strategies.
    Baseline,
    /// Leave-one-dataset-out training and comparison.
    Loo,
    /// Vary the number of training datasets.
    StudyDomains,
    /// Pretty-print a report table.
    Report {
        /// A `table.tsv` written by `baseline`, `eval` or `loo`.
        table: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.preset {
        cfg.preset(p)?;
    }
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(m) = &common.manifest {
        cfg.manifest = m.clone();
    }
    if let Some(s) = common.seed {
        cfg.train.base_seed = s;
    }
    Ok(cfg)
}

fn load_datasets(cfg: &RunConfig) -> Result<Vec<Dataset>> {
    let manifest = Manifest::from_file(&cfg.manifest)?;
    manifest.load_many(&cfg.datasets)
}

fn write_resolved(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("resolved_config.txt"), cfg.to_text())?;
    Ok(())
}

fn progress_writer(out: &Path) -> Result<impl FnMut(&al_policy::trainer::Progress) -> Result<()>> {
    let mut file = fs::File::create(out.join("progress.tsv"))?;
    writeln!(file, "iteration\tmean_return\tmean_recon\tmean_entropy\tdatasets")?;
    Ok(move |p: &al_policy::trainer::Progress| {
        writeln!(
            file,
            "{}\t{}\t{}\t{}\t{}",
            p.iteration,
            p.mean_return,
            p.mean_recon,
            p.mean_entropy,
            p.datasets.join(",")
        )?;
        Ok(())
    })
}

fn print_table(t: &ReportTable) {
    let w = t.rows.iter().map(|r| r.dataset.len()).max().unwrap_or(7).max(7);
    let cw = t.methods.iter().map(|m| m.len()).max().unwrap_or(8).max(13);
    print!("{:<w$}", "dataset");
    for m in &t.methods {
        print!("  {m:>cw$}");
    }
    println!();
    for r in &t.rows {
        print!("{:<w$}", r.dataset);
        for c in &r.cells {
            print!("  {:>cw$}", format!("{:.2} ± {:.2}", c.mean, c.stderr));
        }
        println!();
    }
    for (label, vals) in [("average", t.averages()), ("wins", t.wins())] {
        print!("{label:<w$}");
        for v in vals {
            print!("  {:>cw$}", format!("{v:.2}"));
        }
        println!();
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    let exec = match cli.common.workers {
        Some(1) => Execution::Sequential,
        Some(n) => {
            al_policy::par::set_workers(n);
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    let out = &cli.common.out;
    match cli.command {
        Command::Prepare => {
            let manifest = Manifest::from_file(&cfg.manifest)?;
            let mut count = 0;
            for e in &manifest.entries {
                let ds = manifest.load(&e.name)?;
                let (neg, pos) = ds.class_counts();
                al_policy::make_trial_split(&ds, 0, cfg.train.base_seed)?;
                println!("{:<12} n={:<5} d={:<3} -1:{neg:<4} +1:{pos}", e.name, ds.len(), ds.dim());
                count += 1;
            }
            println!("validated {count} datasets");
        }
        Command::Train => {
            let data = load_datasets(&cfg)?;
            write_resolved(out, &cfg)?;
            let mut log = progress_writer(out)?;
            let path = out.join("checkpoint.bin");
            let every = cfg.checkpoint_every;
            let ckpt = train_from(initial_checkpoint(&cfg.train), &cfg.train, &data, exec, |p, s| {
                log(p)?;
                if every > 0 && p.iteration % every == 0 {
                    s.save(&path)?;
                }
                Ok(())
            })?;
            ckpt.save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Eval { checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = load_datasets(&cfg)?;
            write_resolved(out, &cfg)?;
            let label = format!("{}-policy", ckpt.model.kind());
            let mut results = Vec::new();
            for ds in &data {
                let o = evaluate(
                    Method::Policy(&ckpt.model),
                    ds,
                    cfg.trials,
                    cfg.train.budget,
                    cfg.train.base_seed,
                    exec,
                )?;
                results.push(DatasetResults {
                    dataset: ds.name().to_string(),
                    methods: vec![MethodResult::from_outcomes(label.clone(), o)],
                });
            }
            let report = compare_table(&results)?;
            report.write_to(out)?;
            print_table(&report.table);
        }
        Command::Baseline => {
            let data = load_datasets(&cfg)?;
            write_resolved(out, &cfg)?;
            let mut results = Vec::new();
            for ds in &data {
                let mut methods = Vec::new();
                for &k in &cfg.methods {
                    let o = evaluate(
                        Method::Strategy(k),
                        ds,
                        cfg.trials,
                        cfg.train.budget,
                        cfg.train.base_seed,
                        exec,
                    )?;
                    methods.push(MethodResult::from_outcomes(k.label(), o));
                }
                results.push(DatasetResults {
                    dataset: ds.name().to_string(),
                    methods,
                });
            }
            let report = compare_table(&results)?;
            report.write_to(out)?;
            print_table(&report.table);
        }
        Command::Loo => {
            let data = load_datasets(&cfg)?;
            write_resolved(out, &cfg)?;
            let mut log = progress_writer(out)?;
            let ck_dir = out.join("checkpoints");
            let outcome = loo_experiment(&data, &cfg.loo(), exec, &mut log, &mut |f| {
                f.checkpoint.save(&ck_dir.join(format!("{}.bin", f.held_out)))?;
                if let Some(s) = &f.single {
                    s.save(&ck_dir.join(format!("{}.single.bin", f.held_out)))?;
                }
                log::info!("fold {} done", f.held_out);
                Ok(())
            })?;
            outcome.report.write_to(out)?;
            print_table(&outcome.report.table);
        }
        Command::StudyDomains => {
            let data = load_datasets(&cfg)?;
            write_resolved(out, &cfg)?;
            let mut log = progress_writer(out)?;
            let rows = domain_count_study(&data, &cfg.counts, cfg.subsets, &cfg.loo(), exec, &mut log)?;
            let text = study_to_tsv(&rows);
            fs::write(out.join("study.tsv"), &text)?;
            print!("{text}");
        }
        Command::Report { table } => {
            let text = fs::read_to_string(&table)?;
            print_table(&ReportTable::from_tsv(&text)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 3,
                _ => 1,
            })
        }
    }
}
