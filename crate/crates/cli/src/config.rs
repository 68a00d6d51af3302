//! Flat `key = value` run configuration.
//!
//! Values are resolved in order: built-in defaults, `--preset`, `--config`
//! file, `--set key=value` overrides, then `--seed`. Every run writes the
//! fully expanded result to `resolved_config.txt`, which can be fed back via
//! `--config` to repeat the run.

use std::fs;
use std::path::{Path, PathBuf};

use al_policy::eval::{LooConfig, DEFAULT_COUNTS, DEFAULT_SUBSETS};
use al_policy::{Error, Result, StrategyKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Empty means every manifest entry.
    pub datasets: Vec<String>,
    pub methods: Vec<StrategyKind>,
    pub trials: u64,
    pub train: TrainConfig,
    pub single: bool,
    pub train_eval: bool,
    pub counts: Vec<usize>,
    pub subsets: usize,
    /// Write an intermediate checkpoint every this many iterations (0 = only
    /// at the end).
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.txt"),
            datasets: Vec::new(),
            methods: StrategyKind::ALL.to_vec(),
            trials: 100,
            train: TrainConfig::default(),
            single: true,
            train_eval: true,
            counts: DEFAULT_COUNTS.to_vec(),
            subsets: DEFAULT_SUBSETS,
            checkpoint_every: 0,
        }
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Applies a named preset.
    pub fn preset(&mut self, name: &str) -> Result<()> {
        match name {
            "desk" => {
                self.train.iterations = 2000;
                self.trials = 20;
            }
            "paper" | "full" => {
                let fresh = RunConfig::default();
                self.train.iterations = fresh.train.iterations;
                self.trials = fresh.trials;
            }
            _ => return Err(Error::Config(format!("unknown preset {name:?}"))),
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "manifest" => self.manifest = PathBuf::from(value),
            "datasets" => self.datasets = list(value),
            "methods" => {
                self.methods = list(value)
                    .iter()
                    .map(|m| m.parse())
                    .collect::<Result<_>>()?
            }
            "trials" => self.trials = parse(key, value)?,
            "single" => self.single = parse(key, value)?,
            "train_eval" => self.train_eval = parse(key, value)?,
            "counts" => {
                self.counts = list(value)
                    .iter()
                    .map(|c| parse(key, c))
                    .collect::<Result<_>>()?
            }
            "subsets" => self.subsets = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => self.train.set(key, value)?,
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` command-line override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(&format!("{k} = {v}\n"));
        };
        put("manifest", self.manifest.display().to_string());
        put("datasets", join(self.datasets.clone()));
        put("methods", join(self.methods.iter().map(|m| m.to_string()).collect()));
        put("trials", self.trials.to_string());
        put("single", self.single.to_string());
        put("train_eval", self.train_eval.to_string());
        put("counts", join(self.counts.iter().map(|c| c.to_string()).collect()));
        put("subsets", self.subsets.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        for (k, v) in self.train.entries() {
            put(k, v);
        }
        s
    }

    pub fn loo(&self) -> LooConfig {
        LooConfig {
            train: self.train.clone(),
            trials: self.trials,
            eval_seed: self.train.base_seed,
            baselines: self.methods.clone(),
            single: self.single,
            train_eval: self.train_eval,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.preset("desk").unwrap();
        c.apply_text("datasets = breast, heart\nmethods=us,qbb # comment\nlr = 0.01\n")
            .unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.train.iterations, 2000);
        assert_eq!(d.trials, 20);
        assert_eq!(d.datasets, vec!["breast", "heart"]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("itrations = 5"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("trials"), Err(Error::Config(_))));
        assert!(matches!(c.preset("laptop"), Err(Error::Config(_))));
    }
}
