//! Evaluation protocol: learning-curve AUC, paired trials, comparison tables,
//! leave-one-out folds and the domain-count study.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;

use crate::baselines::{run_episode, StrategyKind};
use crate::checkpoint::Checkpoint;
use crate::data::{make_trial_split, Dataset};
use crate::env::Episode;
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::policy::{ActionMode, PolicyModel};
use crate::seed;
use crate::trainer::{train_from, initial_checkpoint, Progress, TrainConfig};

const STRATEGY_TAG: u64 = 0x57a7;
const STUDY_TAG: u64 = 0x5d0c;

/// Column label of the meta-network policy evaluated on its own training
/// datasets. Columns ending in `(Tr)` never take part in win counts.
pub const POLICY_TRAIN: &str = "MetaPolicy(Tr)";
pub const POLICY_TEST: &str = "MetaPolicy(Te)";
pub const SINGLE_TEST: &str = "SingleRL(Te)";

/// `100 x mean(Acc_1..Acc_budget)`.
pub fn auc(acc_history: &[f64], budget: usize) -> Result<f64> {
    if budget == 0 || acc_history.len() != budget + 1 {
        return Err(Error::Shape(format!(
            "accuracy history of length {} for budget {budget}",
            acc_history.len()
        )));
    }
    Ok(100.0 * acc_history[1..].iter().sum::<f64>() / budget as f64)
}

/// A query rule under evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Strategy(StrategyKind),
    /// Learned policy, acting greedily.
    Policy(&'a PolicyModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub trial: u64,
    pub auc: f64,
    pub acc_history: Vec<f64>,
}

/// Runs `method` on trial splits `0..trials` of `ds`. The split of trial `t`
/// depends only on `(base_seed, ds, t)`, so every method sees the same
/// splits.
pub fn evaluate(
    method: Method<'_>,
    ds: &Dataset,
    trials: u64,
    budget: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<TrialOutcome>> {
    let idx: Vec<u64> = (0..trials).collect();
    exec.try_map(&idx, |&t| {
        let split = make_trial_split(ds, t, base_seed)?;
        let acc_history = match method {
            Method::Strategy(kind) => {
                let s = seed::derive(base_seed, &[STRATEGY_TAG, seed::name_tag(ds.name()), t]);
                run_episode(ds, &split, kind, budget, s)?
            }
            Method::Policy(model) => {
                let mut ep = Episode::new(ds, &split, budget)?;
                while !ep.is_done() {
                    let a = model.act(&ep, ActionMode::Argmax, 0)?;
                    ep.step(a)?;
                }
                ep.acc_history().to_vec()
            }
        };
        Ok(TrialOutcome {
            trial: t,
            auc: auc(&acc_history, budget)?,
            acc_history,
        })
    })
}

/// Per-trial AUCs of a learned policy.
pub fn evaluate_policy(
    model: &PolicyModel,
    ds: &Dataset,
    trials: u64,
    budget: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<f64>> {
    Ok(evaluate(Method::Policy(model), ds, trials, budget, base_seed, exec)?
        .into_iter()
        .map(|o| o.auc)
        .collect())
}

/// Per-trial AUCs of a fixed strategy.
pub fn evaluate_strategy(
    kind: StrategyKind,
    ds: &Dataset,
    trials: u64,
    budget: usize,
    base_seed: u64,
    exec: Execution,
) -> Result<Vec<f64>> {
    Ok(evaluate(Method::Strategy(kind), ds, trials, budget, base_seed, exec)?
        .into_iter()
        .map(|o| o.auc)
        .collect())
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean; zero for fewer than two samples.
pub fn std_err(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (var / xs.len() as f64).sqrt()
}

/// Samples behind one table cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodResult {
    pub method: String,
    pub aucs: Vec<f64>,
    /// Per-trial accuracy curves; empty when the cell has no curve.
    pub histories: Vec<Vec<f64>>,
}

impl MethodResult {
    pub fn from_outcomes(method: impl Into<String>, outcomes: Vec<TrialOutcome>) -> Self {
        let (aucs, histories) = outcomes.into_iter().map(|o| (o.auc, o.acc_history)).unzip();
        Self {
            method: method.into(),
            aucs,
            histories,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetResults {
    pub dataset: String,
    pub methods: Vec<MethodResult>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub cells: Vec<Cell>,
}

/// Mean AUC and standard error per `(dataset, method)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub methods: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn wins_eligible(method: &str) -> bool {
    !method.ends_with("(Tr)")
}

impl ReportTable {
    /// Mean over rows of each method's mean.
    pub fn averages(&self) -> Vec<f64> {
        (0..self.methods.len())
            .map(|m| mean(&self.rows.iter().map(|r| r.cells[m].mean).collect::<Vec<_>>()))
            .collect()
    }

    /// Row wins per method. The best eligible mean takes the row; exact ties
    /// split it evenly.
    pub fn wins(&self) -> Vec<f64> {
        let mut wins = vec![0.0; self.methods.len()];
        let eligible: Vec<usize> = (0..self.methods.len())
            .filter(|&m| wins_eligible(&self.methods[m]))
            .collect();
        for row in &self.rows {
            let best = eligible
                .iter()
                .map(|&m| row.cells[m].mean)
                .fold(f64::NEG_INFINITY, f64::max);
            let top: Vec<usize> = eligible
                .iter()
                .copied()
                .filter(|&m| row.cells[m].mean == best)
                .collect();
            for &m in &top {
                wins[m] += 1.0 / top.len() as f64;
            }
        }
        wins
    }

    pub fn column(&self, method: &str) -> Option<usize> {
        self.methods.iter().position(|m| m == method)
    }

    pub fn row(&self, dataset: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.dataset == dataset)
    }

    /// Tab-separated text: a header, one line per dataset, then `average` and
    /// `wins` summary lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("dataset");
        for m in &self.methods {
            write!(s, "\t{m}\t{m} se\t{m} n").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.dataset);
            for c in &r.cells {
                write!(s, "\t{}\t{}\t{}", c.mean, c.stderr, c.n).unwrap();
            }
            s.push('\n');
        }
        for (label, vals) in [("average", self.averages()), ("wins", self.wins())] {
            s.push_str(label);
            for v in vals {
                write!(s, "\t{v}\t\t").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`ReportTable::to_tsv`] output and checks its summary lines.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Report(m);
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty report".into()))?
            .split('\t')
            .collect();
        if header.first() != Some(&"dataset") || !(header.len() - 1).is_multiple_of(3) {
            return Err(bad("malformed header".into()));
        }
        let methods: Vec<String> = header[1..].chunks(3).map(|c| c[0].to_string()).collect();
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| bad(format!("bad number {s:?}")))
        };
        let mut table = ReportTable {
            methods,
            rows: Vec::new(),
        };
        let mut summaries = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != header.len() {
                return Err(bad(format!("row has {} fields, header {}", f.len(), header.len())));
            }
            if f[0] == "average" || f[0] == "wins" {
                let v = f[1..].chunks(3).map(|c| num(c[0])).collect::<Result<Vec<_>>>()?;
                summaries.push((f[0], v));
                continue;
            }
            let cells = f[1..]
                .chunks(3)
                .map(|c| {
                    Ok(Cell {
                        mean: num(c[0])?,
                        stderr: num(c[1])?,
                        n: c[2].parse().map_err(|_| bad(format!("bad count {:?}", c[2])))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            table.rows.push(ReportRow {
                dataset: f[0].to_string(),
                cells,
            });
        }
        for (label, vals) in summaries {
            let want = if label == "average" {
                table.averages()
            } else {
                table.wins()
            };
            let ok = vals
                .iter()
                .zip(&want)
                .all(|(a, b)| (a - b).abs() <= 1e-9 || (a.is_nan() && b.is_nan()));
            if !ok {
                return Err(bad(format!("{label} line disagrees with the rows")));
            }
        }
        Ok(table)
    }
}

/// Mean accuracy and standard error at each step for one
/// `(dataset, method)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub dataset: String,
    pub method: String,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl Curve {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\tmean\tstderr\n");
        for (t, (m, e)) in self.mean.iter().zip(&self.stderr).enumerate() {
            writeln!(s, "{t}\t{m}\t{e}").unwrap();
        }
        s
    }

    pub fn file_name(&self) -> String {
        let slug = |s: &str| -> String {
            s.chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
                .collect()
        };
        format!("{}__{}.tsv", slug(&self.dataset), slug(&self.method))
    }
}

/// A table plus its learning curves.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub table: ReportTable,
    pub curves: Vec<Curve>,
}

impl Report {
    /// Writes `table.tsv` and `curves/*.tsv` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("curves"))?;
        fs::write(dir.join("table.tsv"), self.table.to_tsv())?;
        for c in &self.curves {
            fs::write(dir.join("curves").join(c.file_name()), c.to_tsv())?;
        }
        Ok(())
    }
}

/// Builds the comparison table and learning curves. Every dataset must report
/// the same methods in the same order.
pub fn compare_table(results: &[DatasetResults]) -> Result<Report> {
    let first = results
        .first()
        .ok_or_else(|| Error::Report("no results to tabulate".into()))?;
    let methods: Vec<String> = first.methods.iter().map(|m| m.method.clone()).collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut curves = Vec::new();
    for r in results {
        let these: Vec<&str> = r.methods.iter().map(|m| m.method.as_str()).collect();
        if these != methods.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Report(format!(
                "{} reports methods {these:?}, expected {methods:?}",
                r.dataset
            )));
        }
        let mut cells = Vec::with_capacity(methods.len());
        for m in &r.methods {
            if m.aucs.is_empty() {
                return Err(Error::Report(format!("{}/{} has no trials", r.dataset, m.method)));
            }
            cells.push(Cell {
                mean: mean(&m.aucs),
                stderr: std_err(&m.aucs),
                n: m.aucs.len(),
            });
            if let Some(c) = curve(&r.dataset, m)? {
                curves.push(c);
            }
        }
        rows.push(ReportRow {
            dataset: r.dataset.clone(),
            cells,
        });
    }
    Ok(Report {
        table: ReportTable { methods, rows },
        curves,
    })
}

fn curve(dataset: &str, m: &MethodResult) -> Result<Option<Curve>> {
    let Some(len) = m.histories.first().map(Vec::len) else {
        return Ok(None);
    };
    if m.histories.iter().any(|h| h.len() != len) {
        return Err(Error::Report(format!("{dataset}/{}: ragged curves", m.method)));
    }
    let mut means = Vec::with_capacity(len);
    let mut errs = Vec::with_capacity(len);
    for t in 0..len {
        let col: Vec<f64> = m.histories.iter().map(|h| h[t]).collect();
        means.push(mean(&col));
        errs.push(std_err(&col));
    }
    Ok(Some(Curve {
        dataset: dataset.to_string(),
        method: m.method.clone(),
        mean: means,
        stderr: errs,
    }))
}

/// Settings shared by the leave-one-out folds and the domain-count study.
#[derive(Clone, Debug, PartialEq)]
pub struct LooConfig {
    pub train: TrainConfig,
    pub trials: u64,
    /// Seed of the evaluation splits.
    pub eval_seed: u64,
    pub baselines: Vec<StrategyKind>,
    /// Also train and evaluate the single-model variant.
    pub single: bool,
    /// Also evaluate each fold's policy on its own training datasets.
    pub train_eval: bool,
}

impl Default for LooConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            trials: 100,
            eval_seed: 0,
            baselines: StrategyKind::ALL.to_vec(),
            single: true,
            train_eval: true,
        }
    }
}

/// Outcome of training on all datasets but one.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub held_out: String,
    pub checkpoint: Checkpoint,
    pub single: Option<Checkpoint>,
    pub results: DatasetResults,
}

/// Trains on `sources`, reporting progress through `on_progress`.
pub fn train_policy(
    cfg: &TrainConfig,
    sources: &[Dataset],
    exec: Execution,
    on_progress: &mut dyn FnMut(&Progress) -> Result<()>,
) -> Result<Checkpoint> {
    train_from(initial_checkpoint(cfg), cfg, sources, exec, |p, _| on_progress(p))
}

/// Mean policy AUC over `datasets`, each averaged over the evaluation trials.
fn mean_policy_auc(
    model: &PolicyModel,
    datasets: &[&Dataset],
    cfg: &LooConfig,
    exec: Execution,
) -> Result<Vec<f64>> {
    datasets
        .iter()
        .map(|ds| {
            let aucs = evaluate_policy(model, ds, cfg.trials, cfg.train.budget, cfg.eval_seed, exec)?;
            Ok(mean(&aucs))
        })
        .collect()
}

/// One fold: train on every dataset except `datasets[held_out]`, then
/// evaluate the learned policies and the baselines on the held-out one.
pub fn run_fold(
    datasets: &[Dataset],
    held_out: usize,
    cfg: &LooConfig,
    exec: Execution,
    on_progress: &mut dyn FnMut(&Progress) -> Result<()>,
) -> Result<FoldOutcome> {
    let target = &datasets[held_out];
    let sources: Vec<Dataset> = datasets
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != held_out)
        .map(|(_, d)| d.clone())
        .collect();
    let ckpt = train_policy(&cfg.train, &sources, exec, on_progress)?;
    let single = if cfg.single {
        let mut sc = cfg.train.clone();
        sc.model = crate::policy::ModelKind::Single;
        Some(train_policy(&sc, &sources, exec, on_progress)?)
    } else {
        None
    };

    let (budget, trials, es) = (cfg.train.budget, cfg.trials, cfg.eval_seed);
    let mut methods = Vec::new();
    if cfg.train_eval {
        let refs: Vec<&Dataset> = sources.iter().collect();
        let per = mean_policy_auc(&ckpt.model, &refs, cfg, exec)?;
        methods.push(MethodResult {
            method: POLICY_TRAIN.into(),
            aucs: per,
            histories: Vec::new(),
        });
    }
    let te = evaluate(Method::Policy(&ckpt.model), target, trials, budget, es, exec)?;
    methods.push(MethodResult::from_outcomes(POLICY_TEST, te));
    if let Some(s) = &single {
        let o = evaluate(Method::Policy(&s.model), target, trials, budget, es, exec)?;
        methods.push(MethodResult::from_outcomes(SINGLE_TEST, o));
    }
    for &kind in &cfg.baselines {
        let o = evaluate(Method::Strategy(kind), target, trials, budget, es, exec)?;
        methods.push(MethodResult::from_outcomes(kind.label(), o));
    }
    Ok(FoldOutcome {
        held_out: target.name().to_string(),
        checkpoint: ckpt,
        single,
        results: DatasetResults {
            dataset: target.name().to_string(),
            methods,
        },
    })
}

/// All folds plus the combined report.
#[derive(Clone, Debug)]
pub struct LooOutcome {
    pub folds: Vec<FoldOutcome>,
    pub report: Report,
}

/// Leave-one-out over `datasets`; `on_fold` sees each fold as it finishes.
pub fn loo_experiment(
    datasets: &[Dataset],
    cfg: &LooConfig,
    exec: Execution,
    on_progress: &mut dyn FnMut(&Progress) -> Result<()>,
    on_fold: &mut dyn FnMut(&FoldOutcome) -> Result<()>,
) -> Result<LooOutcome> {
    if datasets.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-out needs at least 2 datasets, got {}",
            datasets.len()
        )));
    }
    let mut folds = Vec::with_capacity(datasets.len());
    for i in 0..datasets.len() {
        let f = run_fold(datasets, i, cfg, exec, on_progress)?;
        on_fold(&f)?;
        folds.push(f);
    }
    let results: Vec<DatasetResults> = folds.iter().map(|f| f.results.clone()).collect();
    let report = compare_table(&results)?;
    Ok(LooOutcome { folds, report })
}

/// Averages for one number of training domains.
#[derive(Clone, Debug, PartialEq)]
pub struct CountOutcome {
    pub count: usize,
    pub train_auc: f64,
    pub test_auc: f64,
    /// Number of trained policies behind the averages.
    pub occurrences: usize,
}

pub const DEFAULT_COUNTS: [usize; 4] = [1, 4, 7, 13];
pub const DEFAULT_SUBSETS: usize = 3;

/// Trains on random subsets of `count` datasets and evaluates on the
/// remaining ones. `count == len - 1` runs the leave-one-out folds instead of
/// random subsets.
pub fn domain_count_study(
    datasets: &[Dataset],
    counts: &[usize],
    subsets: usize,
    cfg: &LooConfig,
    exec: Execution,
    on_progress: &mut dyn FnMut(&Progress) -> Result<()>,
) -> Result<Vec<CountOutcome>> {
    let n = datasets.len();
    for &c in counts {
        if c == 0 || c + 1 > n {
            return Err(Error::Config(format!(
                "domain count {c} needs between 1 and {} for {n} datasets",
                n.saturating_sub(1)
            )));
        }
    }
    if subsets == 0 {
        return Err(Error::Config("at least one subset per count is required".into()));
    }
    let mut out = Vec::with_capacity(counts.len());
    for &c in counts {
        let draws: Vec<Vec<usize>> = if c + 1 == n {
            (0..n).map(|h| (0..n).filter(|&i| i != h).collect()).collect()
        } else {
            (0..subsets as u64)
                .map(|s| {
                    let mut rng = seed::rng(seed::derive(cfg.train.base_seed, &[STUDY_TAG, c as u64, s]));
                    let mut v = sample(&mut rng, n, c).into_vec();
                    v.sort_unstable();
                    v
                })
                .collect()
        };
        let (mut tr, mut te) = (Vec::new(), Vec::new());
        for train_idx in &draws {
            let sources: Vec<Dataset> = train_idx.iter().map(|&i| datasets[i].clone()).collect();
            let targets: Vec<&Dataset> = (0..n)
                .filter(|i| !train_idx.contains(i))
                .map(|i| &datasets[i])
                .collect();
            let ckpt = train_policy(&cfg.train, &sources, exec, on_progress)?;
            let src_refs: Vec<&Dataset> = sources.iter().collect();
            tr.push(mean(&mean_policy_auc(&ckpt.model, &src_refs, cfg, exec)?));
            te.push(mean(&mean_policy_auc(&ckpt.model, &targets, cfg, exec)?));
        }
        out.push(CountOutcome {
            count: c,
            train_auc: mean(&tr),
            test_auc: mean(&te),
            occurrences: draws.len(),
        });
    }
    Ok(out)
}

/// Tab-separated `count train_auc test_auc occurrences` lines with a header.
pub fn study_to_tsv(rows: &[CountOutcome]) -> String {
    let mut s = String::from("count\ttrain_auc\ttest_auc\toccurrences\n");
    for r in rows {
        writeln!(s, "{}\t{}\t{}\t{}", r.count, r.train_auc, r.test_auc, r.occurrences).unwrap();
    }
    s
}
