//! Commands behind the `gptf` binary: synthetic data, training, prediction
//! and evaluation. Every command reads a [`RunConfig`] and writes plain-text
//! artifacts into an output directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use gptf_core::elbo::LambdaSolver;
use gptf_core::evaluate::{predict_binary_score_corrected, read_predictions, write_predictions};
use gptf_core::optimizer::{train_with_observer, write_log_line};
use gptf_core::sptensor::balanced_sample;
use gptf_core::synth::{write_factors, write_truth_manifest};
use gptf_core::{
    auc, generate, init_state, mse, parse_coo, predict_binary_score, predict_continuous, read_checkpoint,
    write_checkpoint, write_coo, EntryBatch, Method, Mode, OptimConfig, SparseTensor, SynthConfig,
};

pub const TRAIN_FILE: &str = "train.coo";
pub const TEST_FILE: &str = "test.coo";
pub const TRUTH_FILE: &str = "truth.txt";
pub const FACTORS_FILE: &str = "factors.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.txt";
pub const METRICS_FILE: &str = "metrics.txt";

/// Binary prediction score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// `Φ(m*)`
    Plain,
    /// `Φ(m*/√(1 + s*²))`
    Corrected,
}

/// Everything a run depends on besides its input files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// One rank for every mode, or one per mode.
    pub rank: Vec<usize>,
    pub p: usize,
    pub tasks: usize,
    pub seed: u64,
    pub optim: OptimConfig,
    pub jitter: f64,
    /// Add an equal number of sampled zero cells to the training entries.
    pub balance: bool,
    pub score: ScoreKind,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Continuous,
            rank: vec![3],
            p: 100,
            tasks: gptf_core::parallel::default_tasks(),
            seed: 0,
            optim: OptimConfig::default(),
            jitter: gptf_core::model::DEFAULT_JITTER,
            balance: false,
            score: ScoreKind::Plain,
            synth: SynthConfig::default(),
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|e| anyhow!("bad list element {s:?}: {e}")))
        .collect()
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => bail!("expected a boolean, got {v:?}"),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults overlaid with a `key=value` file, if given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), n + 1))?;
                cfg.set(k.trim(), v.trim()).with_context(|| format!("{}:{}", path.display(), n + 1))?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let o = &mut self.optim;
        let s = &mut self.synth;
        match key {
            "mode" => self.mode = v.parse()?,
            "rank" => self.rank = parse_list(v)?,
            "p" => self.p = v.parse()?,
            "tasks" => self.tasks = v.parse()?,
            "seed" => self.seed = v.parse()?,
            "jitter" => self.jitter = v.parse()?,
            "balance" => self.balance = parse_bool(v)?,
            "score" => {
                self.score = match v {
                    "plain" => ScoreKind::Plain,
                    "corrected" => ScoreKind::Corrected,
                    _ => bail!("score must be plain or corrected, got {v:?}"),
                }
            }
            "optimizer" => o.method = v.parse::<Method>()?,
            "max_iters" => o.max_iters = v.parse()?,
            "grad_tol" => o.grad_tol = v.parse()?,
            "elbo_rel_tol" => o.elbo_rel_tol = v.parse()?,
            "step_size" => o.step_size = v.parse()?,
            "lbfgs_memory" => o.lbfgs_memory = v.parse()?,
            "c1" => o.c1 = v.parse()?,
            "c2" => o.c2 = v.parse()?,
            "lambda_solver" => {
                o.fixed_point.solver = match v {
                    "newton" => LambdaSolver::Newton,
                    "fixed_point" => LambdaSolver::FixedPoint,
                    _ => bail!("lambda_solver must be newton or fixed_point, got {v:?}"),
                }
            }
            "lambda_tol" => o.fixed_point.tol = v.parse()?,
            "lambda_max_iter" => o.fixed_point.max_iter = v.parse()?,
            "dims" => s.dims = parse_list(v)?,
            "density" => s.density = v.parse()?,
            "test_fraction" => s.test_fraction = v.parse()?,
            "amplitude" => s.amplitude = v.parse()?,
            "lengthscale" => s.lengthscale = v.parse()?,
            "noise_precision" => s.noise_precision = v.parse()?,
            "num_features" => s.num_features = v.parse()?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            bail!("p must be at least 1");
        }
        if self.tasks == 0 {
            bail!("tasks must be at least 1");
        }
        if self.rank.is_empty() || self.rank.contains(&0) {
            bail!("ranks must be positive");
        }
        self.optim.validate()?;
        Ok(())
    }

    /// Per-mode ranks for a tensor with `modes` modes.
    pub fn ranks_for(&self, modes: usize) -> Result<Vec<usize>> {
        match self.rank.len() {
            1 => Ok(vec![self.rank[0]; modes]),
            n if n == modes => Ok(self.rank.clone()),
            n => bail!("{n} ranks given for a {modes}-mode tensor"),
        }
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            ranks: self.ranks_for(self.synth.dims.len())?,
            mode: self.mode,
            seed: self.seed,
            ..self.synth.clone()
        })
    }

    /// Every setting, for the metrics report.
    pub fn echo(&self) -> BTreeMap<&'static str, String> {
        let o = &self.optim;
        let s = &self.synth;
        BTreeMap::from([
            ("mode", self.mode.to_string()),
            ("rank", join(&self.rank)),
            ("p", self.p.to_string()),
            ("tasks", self.tasks.to_string()),
            ("seed", self.seed.to_string()),
            ("jitter", format!("{:?}", self.jitter)),
            ("balance", self.balance.to_string()),
            ("score", if self.score == ScoreKind::Plain { "plain" } else { "corrected" }.to_string()),
            ("optimizer", o.method.to_string()),
            ("max_iters", o.max_iters.to_string()),
            ("grad_tol", format!("{:?}", o.grad_tol)),
            ("elbo_rel_tol", format!("{:?}", o.elbo_rel_tol)),
            ("step_size", format!("{:?}", o.step_size)),
            ("lbfgs_memory", o.lbfgs_memory.to_string()),
            ("c1", format!("{:?}", o.c1)),
            ("c2", format!("{:?}", o.c2)),
            (
                "lambda_solver",
                match o.fixed_point.solver {
                    LambdaSolver::Newton => "newton",
                    LambdaSolver::FixedPoint => "fixed_point",
                }
                .to_string(),
            ),
            ("lambda_tol", format!("{:?}", o.fixed_point.tol)),
            ("lambda_max_iter", o.fixed_point.max_iter.to_string()),
            ("dims", join(&s.dims)),
            ("density", format!("{:?}", s.density)),
            ("test_fraction", format!("{:?}", s.test_fraction)),
            ("amplitude", format!("{:?}", s.amplitude)),
            ("lengthscale", format!("{:?}", s.lengthscale)),
            ("noise_precision", format!("{:?}", s.noise_precision)),
            ("num_features", s.num_features.to_string()),
        ])
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

pub fn read_tensor(path: &Path) -> Result<SparseTensor> {
    parse_coo(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub train: PathBuf,
    pub test: PathBuf,
    pub train_count: usize,
    pub test_count: usize,
    pub resamples: usize,
}

/// Writes `train.coo`, `test.coo`, `truth.txt` and `factors.txt` into `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let data = generate(&cfg.synth_config()?)?;
    let train = out.join(TRAIN_FILE);
    let test = out.join(TEST_FILE);
    let mut w = create(&train)?;
    write_coo(&data.train, &mut w)?;
    w.flush()?;
    let mut w = create(&test)?;
    write_coo(&data.test, &mut w)?;
    w.flush()?;
    let mut w = create(&out.join(TRUTH_FILE))?;
    write_truth_manifest(&data.truth, &mut w)?;
    w.flush()?;
    let mut w = create(&out.join(FACTORS_FILE))?;
    write_factors(&data.truth.factors, &mut w)?;
    w.flush()?;
    Ok(SynthSummary {
        train,
        test,
        train_count: data.train.nnz(),
        test_count: data.test.nnz(),
        resamples: data.truth.resamples,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub entries: usize,
    pub iterations: usize,
    pub initial_elbo: f64,
    pub final_elbo: f64,
    pub stop: gptf_core::optimizer::StopReason,
}

fn training_batch(cfg: &RunConfig, tensor: &SparseTensor) -> Result<EntryBatch> {
    if cfg.balance {
        let base = if cfg.mode == Mode::Binary { tensor.to_binary() } else { tensor.clone() };
        Ok(balanced_sample(&base, &HashSet::new(), cfg.seed)?)
    } else {
        Ok(tensor.to_batch())
    }
}

/// Trains on the COO file at `train`; writes `model.ckpt` and `train_log.jsonl`.
pub fn cmd_train(cfg: &RunConfig, train: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let tensor = read_tensor(train)?;
    let batch = training_batch(cfg, &tensor)?;
    let ranks = cfg.ranks_for(tensor.num_modes())?;
    let mut state = init_state(tensor.dims(), &ranks, cfg.p, cfg.mode, cfg.seed)?;
    state.jitter = cfg.jitter;
    let optim = OptimConfig { seed: cfg.seed, ..cfg.optim };

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join(LOG_FILE);
    let mut log = create(&log_path)?;
    let mut log_err = None;
    let report = train_with_observer(&batch, &state, &optim, cfg.tasks, |rec| {
        if log_err.is_none() {
            log_err = write_log_line(rec, &mut log).err();
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing training log");
    }
    log.flush()?;

    let ckpt = out.join(CHECKPOINT_FILE);
    let mut w = create(&ckpt)?;
    write_checkpoint(&report.state, Some(&report.stats), &mut w)?;
    w.flush()?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        log: log_path,
        entries: batch.len(),
        iterations: report.records.len() - 1,
        initial_elbo: report.initial_elbo(),
        final_elbo: report.final_elbo(),
        stop: report.stop,
    })
}

/// Reads cell indices from a COO file, or from bare lines of `modes`
/// indices with an optional ignored value column.
pub fn read_indices(path: &Path, modes: usize) -> Result<Vec<Vec<usize>>> {
    if let Ok(t) = parse_coo(open(path)?) {
        if t.num_modes() == modes {
            return Ok(t.entries().iter().map(|e| e.index.clone()).collect());
        }
    }
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != modes && fields.len() != modes + 1 {
            bail!("{}:{}: expected {modes} indices, got {} fields", path.display(), n + 1, fields.len());
        }
        let idx = fields[..modes]
            .iter()
            .map(|f| f.parse::<usize>().map_err(|e| anyhow!("{}:{}: bad index {f:?}: {e}", path.display(), n + 1)))
            .collect::<Result<Vec<_>>>()?;
        out.push(idx);
    }
    Ok(out)
}

/// Scores every cell listed in `index` with the checkpoint; writes `predictions.txt`.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, index: &Path, out: &Path) -> Result<PathBuf> {
    let ckpt = read_checkpoint(open(checkpoint)?).with_context(|| format!("reading {}", checkpoint.display()))?;
    let state = &ckpt.state;
    let indices = read_indices(index, state.factors.num_modes())?;
    let scores = match state.mode() {
        Mode::Continuous => {
            let stats = ckpt.stats.as_ref().ok_or_else(|| anyhow!("checkpoint has no training statistics"))?;
            predict_continuous(state, stats, &indices)?
        }
        Mode::Binary => match (cfg.score, ckpt.stats.as_ref()) {
            (ScoreKind::Plain, _) => predict_binary_score(state, &indices)?,
            (ScoreKind::Corrected, Some(stats)) => predict_binary_score_corrected(state, stats, &indices)?,
            (ScoreKind::Corrected, None) => bail!("corrected scores need training statistics in the checkpoint"),
        },
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(PREDICTIONS_FILE);
    let mut w = create(&path)?;
    write_predictions(&indices, &scores, &mut w)?;
    w.flush()?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: &'static str,
    pub value: f64,
    pub entries: usize,
    /// Population variance of the targets (continuous mode).
    pub target_variance: Option<f64>,
    pub positives: Option<usize>,
}

/// Compares predictions against a COO truth file; writes `metrics.txt`.
pub fn cmd_eval(cfg: &RunConfig, predictions: &Path, truth: &Path, out: &Path) -> Result<EvalReport> {
    let (indices, scores) =
        read_predictions(open(predictions)?).with_context(|| format!("parsing {}", predictions.display()))?;
    let truth_t = read_tensor(truth)?;
    let by_index: HashMap<&[usize], f64> = indices.iter().map(|i| i.as_slice()).zip(scores.iter().copied()).collect();
    let mut preds = Vec::with_capacity(truth_t.nnz());
    let mut targets = Vec::with_capacity(truth_t.nnz());
    for e in truth_t.entries() {
        let p = by_index.get(e.index.as_slice()).ok_or_else(|| {
            anyhow!("no prediction for truth index ({})", join(&e.index))
        })?;
        preds.push(*p);
        targets.push(e.value);
    }
    let truth_set: HashSet<&[usize]> = truth_t.entries().iter().map(|e| e.index.as_slice()).collect();
    if let Some(extra) = indices.iter().find(|i| !truth_set.contains(i.as_slice())) {
        bail!("prediction index ({}) is not in the truth file", join(extra));
    }

    let report = match cfg.mode {
        Mode::Continuous => {
            let n = targets.len() as f64;
            let mean = targets.iter().sum::<f64>() / n;
            let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
            EvalReport {
                metric: "mse",
                value: mse(&preds, &targets)?,
                entries: targets.len(),
                target_variance: Some(var),
                positives: None,
            }
        }
        Mode::Binary => {
            let labels: Vec<f64> = targets.iter().map(|&t| f64::from(t != 0.0)).collect();
            EvalReport {
                metric: "auc",
                value: auc(&preds, &labels)?,
                entries: labels.len(),
                target_variance: None,
                positives: Some(labels.iter().filter(|&&l| l == 1.0).count()),
            }
        }
    };

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = create(&out.join(METRICS_FILE))?;
    writeln!(w, "metric={}", report.metric)?;
    writeln!(w, "value={:?}", report.value)?;
    writeln!(w, "entries={}", report.entries)?;
    if let Some(v) = report.target_variance {
        writeln!(w, "target_variance={v:?}")?;
    }
    if let Some(p) = report.positives {
        writeln!(w, "positives={p}")?;
    }
    for (k, v) in cfg.echo() {
        writeln!(w, "config.{k}={v}")?;
    }
    w.flush()?;
    Ok(report)
}
