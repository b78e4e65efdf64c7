//! Multi-source multi-target training.
//!
//! Each step draws one mini-batch from every source and target domain,
//! pushes all of them through the shared model, and minimises
//! `λ·L_c + (1 − λ)·L_dis` with plain gradient descent. `L_c` sums the
//! per-source cross-entropies. `L_dis` is the softmax-weighted sum of the
//! source × target joint-MMD grid over the bottleneck features and the
//! class probabilities.

mod eval;
mod grid;
mod report;
mod sampler;
mod tasks;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    classification_loss, coral_loss, jmmd, mk_mmd, mmd2, overall_loss, weighted_distance,
    Bandwidth, Heuristic, KernelSpec, WeightFlow,
};
use crate::data::SplitPair;
use crate::diffcore::{sgd_step, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ArchitectureConfig, Model, Variant};
use crate::rng::{stream_rng, Stream};

pub use eval::{evaluate, ConfusionMatrix, EvalReport, Evaluation};
pub use grid::{run_grid, run_tasks, ResultRow, TaskOutcome};
pub use report::{collapse_ssmt, read_results, write_results, GridTable};
pub use sampler::{BatchSampler, EpochSampler};
pub use tasks::{source_count_sweep, tasks_for_mode, target_count_sweep, two_to_two_pairs, DomainPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Wjmmd,
    Msst,
    Ssmt,
    CMsmt,
    SourceOnly,
    BaselineMmd,
    BaselineMkmmd,
    BaselineJmmd,
    BaselineCoral,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::Wjmmd,
        Mode::Msst,
        Mode::Ssmt,
        Mode::CMsmt,
        Mode::SourceOnly,
        Mode::BaselineMmd,
        Mode::BaselineMkmmd,
        Mode::BaselineJmmd,
        Mode::BaselineCoral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Wjmmd => "wjmmd",
            Mode::Msst => "msst",
            Mode::Ssmt => "ssmt",
            Mode::CMsmt => "c_msmt",
            Mode::SourceOnly => "source_only",
            Mode::BaselineMmd => "baseline_mmd",
            Mode::BaselineMkmmd => "baseline_mkmmd",
            Mode::BaselineJmmd => "baseline_jmmd",
            Mode::BaselineCoral => "baseline_coral",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

/// Which domains a run adapts from and to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    pub mode: Mode,
    pub seed: u64,
    /// Runs sharing a group are reported together (single-source runs that
    /// target the same domains).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl TaskSpec {
    pub fn new(
        id: impl Into<String>,
        sources: &[&str],
        targets: &[&str],
        mode: Mode,
        seed: u64,
    ) -> Self {
        TaskSpec {
            id: id.into(),
            sources: sources.iter().map(|s| s.to_string()).collect(),
            targets: targets.iter().map(|s| s.to_string()).collect(),
            mode,
            seed,
            group: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("task '{}': {}", self.id, m)));
        if self.sources.is_empty() || self.targets.is_empty() {
            return bad("needs at least one source and one target".into());
        }
        if let Some(d) = self.sources.iter().find(|s| self.targets.contains(s)) {
            return bad(format!("domain '{d}' is both source and target"));
        }
        for list in [&self.sources, &self.targets] {
            let mut sorted = list.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != list.len() {
                return bad("duplicate domain".into());
            }
        }
        match self.mode {
            Mode::Msst if self.targets.len() != 1 => bad("msst runs take exactly one target".into()),
            Mode::Ssmt if self.sources.len() != 1 => bad("ssmt runs take exactly one source".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub arch: Variant,
    pub dropout_p: f64,
    /// Epochs without trailing-mean improvement before stopping; `None` runs
    /// every epoch.
    pub patience: Option<usize>,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub weight_flow: WeightFlow,
    /// Kernel family for each joint-MMD layer.
    pub kernel: KernelSpec,
    /// Seed of the 80/20 train/test split when data is loaded from manifests.
    pub split_seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale settings for the small variant.
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 30,
            arch: Variant::Small,
            dropout_p: 0.5,
            patience: Some(10),
            plateau_window: 10,
            plateau_tol: 1e-4,
            weight_flow: WeightFlow::Detached,
            kernel: KernelSpec::ladder(Bandwidth::Auto(Heuristic::Median)),
            split_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the full residual network.
    pub fn table1() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 64,
            arch: Variant::Table1,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {} invalid", self.learning_rate)));
        }
        if self.plateau_window == 0 {
            return Err(Error::Config("plateau window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout_p)));
        }
        self.kernel.validate()
    }
}

/// Per-epoch means of the loss components and pair weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_dis")]
    pub l_dis: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub weights: Vec<Vec<f64>>,
}

/// Loss values of one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLosses {
    pub l_c: f64,
    pub l_dis: f64,
    pub l: f64,
    pub weights: Vec<Vec<f64>>,
}

struct Activations {
    features: Var,
    probs: Var,
}

fn lookup<'a>(data: &'a BTreeMap<String, SplitPair>, id: &str) -> Result<&'a SplitPair> {
    data.get(id)
        .ok_or_else(|| Error::Config(format!("domain '{id}' has no data")))
}

/// Training state for one task: model, samplers and per-domain dropout
/// streams. Every domain slot owns its own random streams, so leaving out
/// the target passes (source-only) does not change the source batches.
pub struct Trainer<'a> {
    task: TaskSpec,
    cfg: TrainConfig,
    lambda: f64,
    model: Model,
    sources: Vec<&'a SplitPair>,
    targets: Vec<&'a SplitPair>,
    sampler: EpochSampler,
    dropout_rngs: Vec<rand_chacha::ChaCha8Rng>,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(task: &TaskSpec, cfg: &TrainConfig, data: &'a BTreeMap<String, SplitPair>) -> Result<Self> {
        task.validate()?;
        cfg.validate()?;
        let sources = task
            .sources
            .iter()
            .map(|id| lookup(data, id))
            .collect::<Result<Vec<_>>>()?;
        let targets = task
            .targets
            .iter()
            .map(|id| lookup(data, id))
            .collect::<Result<Vec<_>>>()?;
        let class_count = sources[0].train.class_count;
        for sp in sources.iter().chain(&targets) {
            if sp.train.class_count != class_count {
                return Err(Error::Config(format!(
                    "domain '{}' has {} classes, expected {}",
                    sp.train.domain_id, sp.train.class_count, class_count
                )));
            }
        }
        if let Some(sp) = sources.iter().find(|sp| !sp.train.is_labeled()) {
            return Err(Error::Config(format!(
                "source domain '{}' has no labels",
                sp.train.domain_id
            )));
        }
        let arch = ArchitectureConfig::new(cfg.arch, class_count).with_dropout(cfg.dropout_p);
        let mut model = Model::build(arch, &mut stream_rng(task.seed, Stream::Init, 0))?;
        model.train();
        let slots = sources.len() + targets.len();
        let sizes: Vec<usize> = sources.iter().chain(&targets).map(|sp| sp.train.len()).collect();
        let sampler = EpochSampler::new(
            &sizes,
            cfg.batch_size,
            (0..slots as u64)
                .map(|i| stream_rng(task.seed, Stream::Sampling, i))
                .collect(),
        )?;
        let dropout_rngs = (0..slots as u64)
            .map(|i| stream_rng(task.seed, Stream::Dropout, i))
            .collect();
        let lambda = if task.mode == Mode::SourceOnly { 1.0 } else { cfg.lambda };
        Ok(Trainer {
            task: task.clone(),
            cfg: cfg.clone(),
            lambda,
            model,
            sources,
            targets,
            sampler,
            dropout_rngs,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.steps_per_epoch()
    }

    fn forward(&mut self, tape: &mut Tape, slot: usize, x: Tensor) -> Result<(Activations, Var)> {
        let xv = tape.constant(x);
        let features = self.model.features(tape, xv, &mut self.dropout_rngs[slot])?;
        let logits = self.model.classify(tape, features)?;
        let probs = tape.softmax(logits)?;
        Ok((Activations { features, probs }, logits))
    }

    fn joint(&self, tape: &mut Tape, s: &Activations, t: &Activations) -> Result<Var> {
        let k = [self.cfg.kernel.clone(), self.cfg.kernel.clone()];
        jmmd(tape, &[s.features, s.probs], &[t.features, t.probs], &k)
    }

    fn uniform_mean(tape: &mut Tape, cells: Vec<Vec<Var>>) -> Result<(Var, Vec<Vec<f64>>)> {
        let (g, h) = (cells.len(), cells[0].len());
        let flat = tape.stack(&cells.concat())?;
        let total = tape.sum(flat);
        let w = 1.0 / (g * h) as f64;
        Ok((tape.scale(total, w), vec![vec![w; h]; g]))
    }

    fn discrepancy(
        &self,
        tape: &mut Tape,
        src: &[Activations],
        tgt: &[Activations],
        l_c: f64,
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        let grid = |tape: &mut Tape, f: &dyn Fn(&mut Tape, &Activations, &Activations) -> Result<Var>| {
            src.iter()
                .map(|s| tgt.iter().map(|t| f(tape, s, t)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        };
        match self.task.mode {
            Mode::SourceOnly => {
                let zero = tape.constant(Tensor::scalar(0.0));
                Ok((zero, vec![vec![0.0; self.targets.len()]; self.sources.len()]))
            }
            Mode::Wjmmd | Mode::Msst | Mode::Ssmt | Mode::CMsmt => {
                let cells = grid(tape, &|tp, s, t| self.joint(tp, s, t))?;
                let bad = cells
                    .iter()
                    .flatten()
                    .map(|&v| tape.value(v).item())
                    .find(|v| !v.is_finite());
                if let Some(l_dis) = bad {
                    return Err(Error::NonFiniteLoss {
                        step: self.step,
                        l_c,
                        l_dis,
                    });
                }
                let (l, rep) = weighted_distance(tape, &cells, self.cfg.weight_flow)?;
                Ok((l, rep.weights))
            }
            Mode::BaselineJmmd => {
                let cells = grid(tape, &|tp, s, t| self.joint(tp, s, t))?;
                Self::uniform_mean(tape, cells)
            }
            Mode::BaselineMmd => {
                let cells = grid(tape, &|tp, s, t| mmd2(tp, s.features, t.features, &KernelSpec::median()))?;
                Self::uniform_mean(tape, cells)
            }
            Mode::BaselineMkmmd => {
                let k = KernelSpec::ladder(Bandwidth::Auto(Heuristic::Median));
                let cells = grid(tape, &|tp, s, t| mk_mmd(tp, s.features, t.features, &k))?;
                Self::uniform_mean(tape, cells)
            }
            Mode::BaselineCoral => {
                let cells = grid(tape, &|tp, s, t| coral_loss(tp, s.features, t.features))?;
                Self::uniform_mean(tape, cells)
            }
        }
    }

    /// Runs one forward/backward/update step and returns its losses.
    pub fn step(&mut self) -> Result<StepLosses> {
        let g = self.sources.len();
        let mut tape = Tape::new();
        let mut src = Vec::with_capacity(g);
        let mut logits = Vec::with_capacity(g);
        let mut labels = Vec::with_capacity(g);
        for i in 0..g {
            let idx = self.sampler.sample_one(i);
            let train = &self.sources[i].train;
            let x = train.features.select_rows(&idx)?;
            let y: Vec<usize> = {
                let l = train.labels.as_ref().expect("sources are labeled");
                idx.iter().map(|&r| l[r]).collect()
            };
            let (act, lg) = self.forward(&mut tape, i, x)?;
            src.push(act);
            logits.push(lg);
            labels.push(y);
        }
        let mut tgt = Vec::with_capacity(self.targets.len());
        if self.task.mode != Mode::SourceOnly {
            for j in 0..self.targets.len() {
                let idx = self.sampler.sample_one(g + j);
                let x = self.targets[j].train.features.select_rows(&idx)?;
                tgt.push(self.forward(&mut tape, g + j, x)?.0);
            }
            if self.task.mode == Mode::CMsmt {
                let features: Vec<Var> = tgt.iter().map(|a| a.features).collect();
                let probs: Vec<Var> = tgt.iter().map(|a| a.probs).collect();
                let merged = Activations {
                    features: tape.concat_rows(&features)?,
                    probs: tape.concat_rows(&probs)?,
                };
                tgt = vec![merged];
            }
        }
        let label_refs: Vec<&[usize]> = labels.iter().map(Vec::as_slice).collect();
        let l_c = classification_loss(&mut tape, &logits, &label_refs)?;
        let l_c_value = tape.value(l_c).item();
        let (l_dis, weights) = self.discrepancy(&mut tape, &src, &tgt, l_c_value)?;
        let loss = overall_loss(&mut tape, self.lambda, l_c, l_dis)?;
        let losses = StepLosses {
            l_c: tape.value(l_c).item(),
            l_dis: tape.value(l_dis).item(),
            l: tape.value(loss).item(),
            weights,
        };
        if !losses.l.is_finite() || !losses.l_c.is_finite() || !losses.l_dis.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                l_c: losses.l_c,
                l_dis: losses.l_dis,
            });
        }
        tape.backward(loss)?;
        let store = self.model.store_mut();
        store.accumulate_grads(&tape);
        sgd_step(store, self.cfg.learning_rate);
        self.step += 1;
        Ok(losses)
    }

    /// Runs one epoch and returns the mean losses.
    pub fn epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let steps = self.steps_per_epoch();
        let mut rec = EpochRecord {
            epoch,
            l_c: 0.0,
            l_dis: 0.0,
            l: 0.0,
            weights: Vec::new(),
        };
        for _ in 0..steps {
            let s = self.step()?;
            rec.l_c += s.l_c;
            rec.l_dis += s.l_dis;
            rec.l += s.l;
            if rec.weights.is_empty() {
                rec.weights = vec![vec![0.0; s.weights[0].len()]; s.weights.len()];
            }
            for (acc, w) in rec.weights.iter_mut().flatten().zip(s.weights.iter().flatten()) {
                *acc += w;
            }
        }
        let n = steps as f64;
        rec.l_c /= n;
        rec.l_dis /= n;
        rec.l /= n;
        rec.weights.iter_mut().flatten().for_each(|w| *w /= n);
        Ok(rec)
    }

    pub fn into_model(mut self) -> Model {
        self.model.eval();
        self.model
    }
}

/// Tracks trailing-window means of the epoch loss.
#[derive(Debug, Clone)]
struct Plateau {
    window: usize,
    tol: f64,
    patience: Option<usize>,
    history: Vec<f64>,
    best: f64,
    stale: usize,
}

impl Plateau {
    fn new(cfg: &TrainConfig) -> Self {
        Plateau {
            window: cfg.plateau_window,
            tol: cfg.plateau_tol,
            patience: cfg.patience,
            history: Vec::new(),
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records an epoch loss; true when training should stop.
    fn push(&mut self, loss: f64) -> bool {
        self.history.push(loss);
        let Some(patience) = self.patience else {
            return false;
        };
        if self.history.len() < self.window {
            return false;
        }
        let tail = &self.history[self.history.len() - self.window..];
        let mean = tail.iter().sum::<f64>() / self.window as f64;
        if self.best - mean < self.tol {
            self.stale += 1;
        } else {
            self.stale = 0;
        }
        self.best = self.best.min(mean);
        self.stale >= patience.max(1)
    }
}

/// Trains `task` and evaluates the result on each target's test split.
pub fn train(
    task: &TaskSpec,
    cfg: &TrainConfig,
    data: &BTreeMap<String, SplitPair>,
) -> Result<(Model, EvalReport)> {
    let mut trainer = Trainer::new(task, cfg, data)?;
    let mut plateau = Plateau::new(cfg);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let rec = trainer.epoch(epoch)?;
        let stop = plateau.push(rec.l);
        trace.push(rec);
        if stop {
            break;
        }
    }
    let model = trainer.into_model();
    let evaluations = task
        .targets
        .iter()
        .map(|id| evaluate(&model, &lookup(data, id)?.test))
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport {
        epochs_run: trace.len(),
        evaluations,
        trace,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("nope".parse::<Mode>().is_err());
    }

    #[test]
    fn task_validation() {
        assert!(TaskSpec::new("a", &["D0"], &["D0"], Mode::Wjmmd, 0).validate().is_err());
        assert!(TaskSpec::new("a", &["D0", "D1"], &["D2", "D3"], Mode::Msst, 0).validate().is_err());
        assert!(TaskSpec::new("a", &["D0", "D1"], &["D2"], Mode::Ssmt, 0).validate().is_err());
        assert!(TaskSpec::new("a", &[], &["D2"], Mode::Wjmmd, 0).validate().is_err());
        assert!(TaskSpec::new("a", &["D0", "D1"], &["D2", "D3"], Mode::Wjmmd, 0).validate().is_ok());
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.lambda = -0.1;
        assert!(c.validate().is_err());
        assert!(TrainConfig::table1().validate().is_ok());
    }

    #[test]
    fn plateau_stops_on_flat_loss() {
        let cfg = TrainConfig {
            patience: Some(3),
            plateau_window: 2,
            ..TrainConfig::default()
        };
        let mut p = Plateau::new(&cfg);
        let mut stopped_at = None;
        for (i, l) in [5.0, 4.0, 3.0, 3.0, 3.0, 3.0, 3.0, 3.0].iter().enumerate() {
            if p.push(*l) {
                stopped_at = Some(i);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6));
        let mut never = Plateau::new(&TrainConfig {
            patience: None,
            ..cfg
        });
        assert!((0..50).all(|_| !never.push(1.0)));
    }
}
