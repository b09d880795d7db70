use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
pub use crate::losses::LossKind;
use crate::nn::{Architecture, LrSchedule, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Maxl,
    Single,
    Random,
    KMeans,
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HierarchySpec {
    /// The same number of auxiliary classes for every primary class.
    Balanced(usize),
    /// This many auxiliary classes in total, spread as evenly as possible.
    Total(usize),
    /// CIFAR-100 label levels, primary then auxiliary (e.g. 20 and 100).
    Human { primary: usize, aux: usize },
}

macro_rules! keyword_enum {
    ($t:ty, $what:literal, $($v:path => $s:literal),+ $(,)?) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($s => Ok($v),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
    };
}

keyword_enum!(DatasetKind, "dataset",
    DatasetKind::Mnist => "mnist",
    DatasetKind::Cifar10 => "cifar10",
    DatasetKind::Cifar100 => "cifar100",
    DatasetKind::Synthetic => "synthetic",
);
keyword_enum!(Method, "method",
    Method::Maxl => "maxl",
    Method::Single => "single",
    Method::Random => "random",
    Method::KMeans => "kmeans",
    Method::Human => "human",
);
keyword_enum!(LossKind, "loss",
    LossKind::Focal => "focal",
    LossKind::CrossEntropy => "cross-entropy",
);

impl fmt::Display for HierarchySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HierarchySpec::Balanced(k) => write!(f, "balanced:{k}"),
            HierarchySpec::Total(k) => write!(f, "total:{k}"),
            HierarchySpec::Human { primary, aux } => write!(f, "human:{primary}:{aux}"),
        }
    }
}

impl FromStr for HierarchySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad hierarchy `{s}`; use balanced:K, total:K or human:P:A"));
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| p.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(bad);
        match parts[..] {
            ["balanced", k] => Ok(HierarchySpec::Balanced(num(k)?)),
            ["total", k] => Ok(HierarchySpec::Total(num(k)?)),
            ["human", p, a] => Ok(HierarchySpec::Human {
                primary: num(p)?,
                aux: num(a)?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Everything needed to reproduce one training run.
///
/// Stored as flat `key = value` lines; `#` starts a comment. Unknown or repeated
/// keys are errors. Unset keys take per-dataset defaults: CIFAR-100 uses plain
/// SGD at 1e-2 halved every 50 epochs for 200 epochs, other datasets use
/// momentum SGD with cosine annealing, at 1e-2 on images and 0.1 on synthetic data.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub train_subset: usize,
    pub test_subset: usize,
    pub arch: Architecture,
    pub method: Method,
    pub hierarchy: HierarchySpec,
    pub loss: LossKind,
    pub gamma: f64,
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_schedule: ScheduleKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub beta_weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkpoint_every: usize,
    pub probe_size: usize,
    pub latent_dim: usize,
    pub synth_classes: usize,
    pub synth_sub: usize,
    pub synth_dim: usize,
    pub synth_sep: f64,
    pub synth_n: usize,
}

/// Shape of the multi-task learning-rate schedule; the base rate is `lr`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    StepHalving(usize),
    Constant,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::Cosine => f.write_str("cosine"),
            ScheduleKind::StepHalving(p) => write!(f, "step-halving:{p}"),
            ScheduleKind::Constant => f.write_str("constant"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().split_once(':') {
            None if s.trim() == "cosine" => Ok(ScheduleKind::Cosine),
            None if s.trim() == "constant" => Ok(ScheduleKind::Constant),
            Some(("step-halving", p)) => p
                .parse()
                .ok()
                .filter(|&p: &usize| p > 0)
                .map(ScheduleKind::StepHalving)
                .ok_or_else(|| Error::Config(format!("bad schedule period in `{s}`"))),
            _ => Err(Error::Config(format!(
                "unknown schedule `{s}`; use cosine, constant or step-halving:P"
            ))),
        }
    }
}

const KEYS: &[&str] = &[
    "dataset",
    "data-dir",
    "train-subset",
    "test-subset",
    "arch",
    "method",
    "hierarchy",
    "loss",
    "gamma",
    "lambda",
    "optimizer",
    "lr",
    "lr-schedule",
    "momentum",
    "weight-decay",
    "beta",
    "beta-weight-decay",
    "epochs",
    "batch-size",
    "seed",
    "output-dir",
    "checkpoint-every",
    "probe-size",
    "latent-dim",
    "synth-classes",
    "synth-sub",
    "synth-dim",
    "synth-sep",
    "synth-n",
];

impl RunConfig {
    pub fn defaults(dataset: DatasetKind) -> Self {
        let cifar100 = dataset == DatasetKind::Cifar100;
        Self {
            dataset,
            data_dir: PathBuf::new(),
            train_subset: 0,
            test_subset: 0,
            arch: if dataset == DatasetKind::Synthetic {
                Architecture::Mlp { hidden: vec![64, 64] }
            } else {
                Architecture::convnet4()
            },
            method: Method::Maxl,
            hierarchy: HierarchySpec::Balanced(if cifar100 { 5 } else { 3 }),
            loss: LossKind::Focal,
            gamma: 2.0,
            lambda: 0.2,
            optimizer: if cifar100 {
                OptimizerKind::PlainSgd
            } else {
                OptimizerKind::MomentumSgd
            },
            // convnet-4 has no normalization layers and diverges at 0.1
            lr: if dataset == DatasetKind::Synthetic { 0.1 } else { 1e-2 },
            lr_schedule: if cifar100 {
                ScheduleKind::StepHalving(50)
            } else {
                ScheduleKind::Cosine
            },
            momentum: if cifar100 { 0.0 } else { 0.9 },
            weight_decay: 5e-4,
            beta: 1e-3,
            beta_weight_decay: 5e-4,
            epochs: match dataset {
                DatasetKind::Mnist | DatasetKind::Synthetic => 30,
                DatasetKind::Cifar10 | DatasetKind::Cifar100 => 200,
            },
            batch_size: 100,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 10,
            probe_size: 512,
            latent_dim: 32,
            synth_classes: 3,
            synth_sub: 4,
            synth_dim: 16,
            synth_sep: 1.0,
            synth_n: 100,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<&str, &str> = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("unknown key `{k}` on line {}", no + 1)));
            }
            if pairs.insert(k, v).is_some() {
                return Err(Error::Config(format!("key `{k}` given twice")));
            }
        }
        let dataset = match pairs.remove("dataset") {
            Some(v) => v.parse()?,
            None => return Err(Error::Config("missing required key `dataset`".into())),
        };
        let mut c = Self::defaults(dataset);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        let v = value;
        match key {
            "dataset" => self.dataset = v.parse()?,
            "data-dir" => self.data_dir = PathBuf::from(v),
            "train-subset" => self.train_subset = num(key, v)?,
            "test-subset" => self.test_subset = num(key, v)?,
            "arch" => self.arch = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "method" => self.method = v.parse()?,
            "hierarchy" => self.hierarchy = v.parse()?,
            "loss" => self.loss = v.parse()?,
            "gamma" => self.gamma = num(key, v)?,
            "lambda" => self.lambda = num(key, v)?,
            "optimizer" => self.optimizer = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "lr" => self.lr = num(key, v)?,
            "lr-schedule" => self.lr_schedule = v.parse()?,
            "momentum" => self.momentum = num(key, v)?,
            "weight-decay" => self.weight_decay = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "beta-weight-decay" => self.beta_weight_decay = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch-size" => self.batch_size = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "output-dir" => self.output_dir = PathBuf::from(v),
            "checkpoint-every" => self.checkpoint_every = num(key, v)?,
            "probe-size" => self.probe_size = num(key, v)?,
            "latent-dim" => self.latent_dim = num(key, v)?,
            "synth-classes" => self.synth_classes = num(key, v)?,
            "synth-sub" => self.synth_sub = num(key, v)?,
            "synth-dim" => self.synth_dim = num(key, v)?,
            "synth-sep" => self.synth_sep = num(key, v)?,
            "synth-n" => self.synth_n = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.gamma) || !finite_nonneg(self.lambda) {
            return fail(format!(
                "gamma and lambda must be nonnegative, got {} and {}",
                self.gamma, self.lambda
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return fail(format!("beta must be nonnegative, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !finite_nonneg(self.weight_decay) || !finite_nonneg(self.beta_weight_decay) {
            return fail("weight decay must be nonnegative".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch-size must be positive".into());
        }
        let human = matches!(self.hierarchy, HierarchySpec::Human { .. });
        if self.method == Method::Human && !human {
            return fail("method human requires hierarchy human:P:A".into());
        }
        if human && self.dataset != DatasetKind::Cifar100 {
            return fail("hierarchy human:P:A requires dataset cifar100".into());
        }
        if self.dataset != DatasetKind::Synthetic && self.data_dir.as_os_str().is_empty() {
            return fail(format!("dataset {} requires `data-dir`", self.dataset));
        }
        if self.dataset == DatasetKind::Synthetic && !finite_nonneg(self.synth_sep) {
            return fail("synth-sep must be nonnegative".into());
        }
        Ok(())
    }

    /// Multi-task learning-rate schedule over `epochs`.
    pub fn schedule(&self) -> LrSchedule {
        match self.lr_schedule {
            ScheduleKind::Cosine => LrSchedule::Cosine {
                base: self.lr,
                horizon: self.epochs,
            },
            ScheduleKind::StepHalving(period) => LrSchedule::StepHalving { base: self.lr, period },
            ScheduleKind::Constant => LrSchedule::Constant { base: self.lr },
        }
    }

    /// Every key in a fixed order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &k in KEYS {
            let v = match k {
                "dataset" => self.dataset.to_string(),
                "data-dir" => self.data_dir.display().to_string(),
                "train-subset" => self.train_subset.to_string(),
                "test-subset" => self.test_subset.to_string(),
                "arch" => self.arch.to_string(),
                "method" => self.method.to_string(),
                "hierarchy" => self.hierarchy.to_string(),
                "loss" => self.loss.to_string(),
                "gamma" => self.gamma.to_string(),
                "lambda" => self.lambda.to_string(),
                "optimizer" => self.optimizer.to_string(),
                "lr" => self.lr.to_string(),
                "lr-schedule" => self.lr_schedule.to_string(),
                "momentum" => self.momentum.to_string(),
                "weight-decay" => self.weight_decay.to_string(),
                "beta" => self.beta.to_string(),
                "beta-weight-decay" => self.beta_weight_decay.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch-size" => self.batch_size.to_string(),
                "seed" => self.seed.to_string(),
                "output-dir" => self.output_dir.display().to_string(),
                "checkpoint-every" => self.checkpoint_every.to_string(),
                "probe-size" => self.probe_size.to_string(),
                "latent-dim" => self.latent_dim.to_string(),
                "synth-classes" => self.synth_classes.to_string(),
                "synth-sub" => self.synth_sub.to_string(),
                "synth-dim" => self.synth_dim.to_string(),
                "synth-sep" => self.synth_sep.to_string(),
                "synth-n" => self.synth_n.to_string(),
                _ => unreachable!("every key is listed"),
            };
            if v.is_empty() {
                continue;
            }
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}
