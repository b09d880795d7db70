//! The two-stage training loop: an auxiliary-training pass that fits the
//! multi-task network to generated labels, then a meta-training pass that
//! updates the label generator through a differentiable look-ahead step.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::autograd::{Graph, Tensor};
use crate::baselines::KMeansState;
use crate::data::{batches, Dataset, HierarchySpec, Method, RunConfig};
use crate::diagnostics::{export_embeddings, generate_all, grad_cosine, utilization_of, EVAL_CHUNK};
use crate::error::{Error, Result};
use crate::hierarchy::{human_aux_labels, Hierarchy, HumanHierarchyMap, HumanLabels};
use crate::losses::{entropy_reg, LossKind};
use crate::nn::{
    schedule_lr, sgd_step, virtual_sgd_step, Checkpoint, GradMap, InputShape, LabelGenNet, MultiTaskNet, OptimizerKind,
    OptimizerState,
};

/// Loss applied to both heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskLoss {
    pub kind: LossKind,
    pub gamma: f64,
}

impl TaskLoss {
    pub fn focal(gamma: f64) -> Self {
        Self {
            kind: LossKind::Focal,
            gamma,
        }
    }

    fn apply(
        self,
        g: &mut Graph,
        pred: crate::autograd::Var,
        target: crate::autograd::Var,
    ) -> Result<crate::autograd::Var> {
        self.kind.apply(g, pred, target, self.gamma)
    }
}

/// Both networks, their optimizers and the run constants.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epoch: usize,
    pub net: MultiTaskNet,
    pub opt: OptimizerState,
    pub labelgen: LabelGenNet,
    pub gen_opt: OptimizerState,
    pub lambda: f64,
    pub loss: TaskLoss,
    pub seed: u64,
    pub batch_size: usize,
}

/// Sample-weighted mean losses of one auxiliary-training pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuxMetrics {
    pub primary_loss: f64,
    pub aux_loss: Option<f64>,
}

/// Sample-weighted means of one meta-training pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetaMetrics {
    pub meta_loss: f64,
    pub entropy: f64,
}

/// One metrics row. Columns that do not apply to a method are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr_alpha: f64,
    pub lr_beta: Option<f64>,
    pub primary_train_loss: f64,
    pub aux_train_loss: Option<f64>,
    pub meta_loss: Option<f64>,
    pub entropy_term: Option<f64>,
    pub test_accuracy: f64,
    pub label_utilization: Option<f64>,
    pub cosine_similarity: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,lr-alpha,lr-beta,primary-train-loss,aux-train-loss,meta-loss,entropy-term,test-accuracy,label-utilization,cosine-similarity";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr_alpha,
            opt(self.lr_beta),
            self.primary_train_loss,
            opt(self.aux_train_loss),
            opt(self.meta_loss),
            opt(self.entropy_term),
            self.test_accuracy,
            opt(self.label_utilization),
            opt(self.cosine_similarity),
        )
    }
}

fn non_finite(stage: &'static str, epoch: usize, batch: usize) -> Error {
    Error::NonFinite { stage, epoch, batch }
}

/// One optimizer step of the multi-task network on `primary + aux` loss (or the
/// primary loss alone when `aux` is `None`). Returns the two loss values.
pub fn aux_step(
    net: &mut MultiTaskNet,
    opt: &mut OptimizerState,
    images: &Tensor,
    labels: &[usize],
    aux: Option<&Tensor>,
    loss: TaskLoss,
) -> Result<(f64, Option<f64>)> {
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, true);
    let x = g.constant(net.arch().input_tensor(images)?);
    let target = g.constant(Tensor::one_hot(labels, net.num_primary()));
    let (lp, la) = match aux {
        Some(ya) => {
            let out = net.forward(&mut g, &p, x)?;
            let lp = loss.apply(&mut g, out.primary, target)?;
            let t = g.constant(ya.clone());
            (lp, Some(loss.apply(&mut g, out.aux, t)?))
        }
        None => {
            let (_, pri) = net.forward_primary(&mut g, &p, x)?;
            (loss.apply(&mut g, pri, target)?, None)
        }
    };
    let total = match la {
        Some(la) => g.add(lp, la)?,
        None => lp,
    };
    let values = (g.item(lp), la.map(|l| g.item(l)));
    if !g.item(total).is_finite() {
        return Err(non_finite("auxiliary", 0, 0));
    }
    let grads = g.backward(total, &p, false)?;
    sgd_step(net.params_mut(), &GradMap::from_graph(&g, &grads), opt)?;
    Ok(values)
}

/// Value and generator gradient of the meta objective on one batch.
#[derive(Clone, Debug)]
pub struct MetaOutcome {
    /// Primary loss after the look-ahead step plus `lambda` times the entropy term.
    pub loss: f64,
    pub entropy: f64,
    pub grads: GradMap,
}

/// Look-ahead `θ1+ = θ1 − α ∇θ1 (L_pri + L_aux)` with generated labels kept on
/// the tape, then `L_pri(θ1+) + λ H(y_aux)` on the same batch, differentiated
/// with respect to the generator parameters.
pub fn meta_gradient(
    net: &MultiTaskNet,
    labelgen: &LabelGenNet,
    images: &Tensor,
    labels: &[usize],
    alpha: f64,
    lambda: f64,
    loss: TaskLoss,
) -> Result<MetaOutcome> {
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, true);
    let q = labelgen.params().bind(&mut g, true);
    let x_net = g.constant(net.arch().input_tensor(images)?);
    let x_gen = if labelgen.arch() == net.arch() {
        x_net
    } else {
        g.constant(labelgen.arch().input_tensor(images)?)
    };
    let target = g.constant(Tensor::one_hot(labels, net.num_primary()));
    let y_aux = labelgen.forward(&mut g, &q, x_gen, labels)?;
    let out = net.forward(&mut g, &p, x_net)?;
    let lp = loss.apply(&mut g, out.primary, target)?;
    let la = loss.apply(&mut g, out.aux, y_aux)?;
    let inner = g.add(lp, la)?;
    let plus = virtual_sgd_step(&mut g, &p, inner, alpha)?;
    let (_, pri) = net.forward_primary(&mut g, &plus, x_net)?;
    let outer = loss.apply(&mut g, pri, target)?;
    let h = entropy_reg(&mut g, y_aux)?;
    let weighted = g.scalar_mul(h, lambda);
    let total = g.add(outer, weighted)?;
    let (value, entropy) = (g.item(total), g.item(h));
    if !value.is_finite() {
        return Err(non_finite("meta", 0, 0));
    }
    let grads = g.backward(total, &q, false)?;
    Ok(MetaOutcome {
        loss: value,
        entropy,
        grads: GradMap::from_graph(&g, &grads),
    })
}

fn locate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { stage, .. } => non_finite(stage, epoch, batch),
        other => other,
    }
}

/// Fits the multi-task network for one pass over `data` with labels from the frozen generator.
pub fn auxiliary_training_pass(state: &mut TrainState, data: &Dataset) -> Result<AuxMetrics> {
    let TrainState {
        net,
        opt,
        labelgen,
        loss,
        ..
    } = state;
    let mut source = |_: &[usize], x: &Tensor, y: &[usize]| labelgen.generate(x, y).map(Some);
    auxiliary_pass_with(
        net,
        opt,
        data,
        state.epoch,
        state.seed,
        state.batch_size,
        *loss,
        &mut source,
    )
}

type AuxSource<'a> = dyn FnMut(&[usize], &Tensor, &[usize]) -> Result<Option<Tensor>> + 'a;

pub(crate) fn auxiliary_pass_with(
    net: &mut MultiTaskNet,
    opt: &mut OptimizerState,
    data: &Dataset,
    epoch: usize,
    seed: u64,
    batch_size: usize,
    loss: TaskLoss,
    source: &mut AuxSource<'_>,
) -> Result<AuxMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    let (mut sp, mut sa, mut any_aux) = (0.0, 0.0, false);
    for (b, idx) in batches(data.len(), batch_size, epoch, seed, 0).iter().enumerate() {
        let (x, y) = data.batch(idx);
        let aux = source(idx, &x, &y)?;
        let (lp, la) = aux_step(net, opt, &x, &y, aux.as_ref(), loss).map_err(|e| locate(e, epoch, b))?;
        sp += lp * idx.len() as f64;
        if let Some(la) = la {
            sa += la * idx.len() as f64;
            any_aux = true;
        }
    }
    let n = data.len() as f64;
    Ok(AuxMetrics {
        primary_loss: sp / n,
        aux_loss: any_aux.then_some(sa / n),
    })
}

/// Updates the generator for one pass over `data`; the multi-task network is left unchanged.
pub fn meta_training_pass(state: &mut TrainState, data: &Dataset) -> Result<MetaMetrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    let alpha = state.opt.lr;
    let (mut sl, mut sh) = (0.0, 0.0);
    for (b, idx) in batches(data.len(), state.batch_size, state.epoch, state.seed, 1)
        .iter()
        .enumerate()
    {
        let (x, y) = data.batch(idx);
        let m = meta_gradient(&state.net, &state.labelgen, &x, &y, alpha, state.lambda, state.loss)
            .map_err(|e| locate(e, state.epoch, b))?;
        sgd_step(state.labelgen.params_mut(), &m.grads, &mut state.gen_opt)?;
        sl += m.loss * idx.len() as f64;
        sh += m.entropy * idx.len() as f64;
    }
    let n = data.len() as f64;
    Ok(MetaMetrics {
        meta_loss: sl / n,
        entropy: sh / n,
    })
}

/// Top-1 primary accuracy, overall and per class (`None` for absent classes).
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn evaluate(net: &MultiTaskNet, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let c = net.num_primary();
    let (mut hits, mut seen) = (vec![0usize; c], vec![0usize; c]);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let (_, pri, _) = net.predict(&x)?;
        for (pred, &truth) in pri.argmax_rows().into_iter().zip(&y) {
            if truth >= c {
                return Err(Error::PrimaryClassOutOfRange {
                    class: truth,
                    num_primary: c,
                });
            }
            seen[truth] += 1;
            hits[truth] += usize::from(pred == truth);
        }
    }
    Ok(Evaluation {
        accuracy: hits.iter().sum::<usize>() as f64 / data.len() as f64,
        per_class: hits
            .iter()
            .zip(&seen)
            .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
            .collect(),
    })
}

/// Where auxiliary labels come from during a run.
pub(crate) enum Labeler {
    /// Primary task only.
    None,
    /// The learned generator, updated by the meta pass.
    Generator { net: LabelGenNet, opt: OptimizerState },
    /// Fixed per-sample label rows `[N, K]`.
    Fixed(Tensor),
    /// Clusters of autoencoder latents, refreshed every iteration.
    KMeans(Box<KMeansState>),
}

impl Labeler {
    fn batch_labels(&mut self, idx: &[usize], x: &Tensor, y: &[usize]) -> Result<Option<Tensor>> {
        match self {
            Labeler::None => Ok(None),
            Labeler::Generator { net, .. } => net.generate(x, y).map(Some),
            Labeler::Fixed(t) => Ok(Some(t.select_rows(idx))),
            Labeler::KMeans(k) => k.batch_labels(idx, x, y).map(Some),
        }
    }

    fn peek_labels(&self, idx: &[usize], x: &Tensor, y: &[usize]) -> Result<Option<Tensor>> {
        match self {
            Labeler::None => Ok(None),
            Labeler::Generator { net, .. } => net.generate(x, y).map(Some),
            Labeler::Fixed(t) => Ok(Some(t.select_rows(idx))),
            Labeler::KMeans(k) => Ok(Some(k.labels_of(idx))),
        }
    }

    fn utilization(&self, train: &Dataset) -> Result<Option<f64>> {
        Ok(match self {
            Labeler::None => None,
            Labeler::Generator { net, .. } => Some(utilization_of(&generate_all(net, train)?)),
            Labeler::Fixed(t) => Some(utilization_of(t)),
            Labeler::KMeans(k) => Some(utilization_of(&k.labels_of(&(0..train.len()).collect::<Vec<_>>()))),
        })
    }
}

/// Derived per-run seeds so the two networks and the probe batch draw independent streams.
pub(crate) fn sub_seed(seed: u64, purpose: u64) -> u64 {
    crate::data::mix_seed(seed, 0x4D41_584C, purpose)
}

/// Training data and hierarchy of a run. With a human hierarchy the primary
/// labels are relabeled to the coarser level and `human` holds the finer one.
pub(crate) struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub hierarchy: Hierarchy,
    pub human: Option<HumanLabels>,
}

pub(crate) fn prepare(cfg: &RunConfig, train: &Dataset, test: &Dataset) -> Result<Prepared> {
    let (mut train, mut test) = (train.clone(), test.clone());
    let np = train.num_classes();
    let (hierarchy, human) = match cfg.hierarchy {
        HierarchySpec::Balanced(k) => (Hierarchy::balanced(np, k)?, None),
        HierarchySpec::Total(k) => (Hierarchy::near_balanced(np, k, cfg.seed)?, None),
        HierarchySpec::Human { primary, aux } => {
            let map = HumanHierarchyMap::cifar100();
            let h = human_aux_labels(&map, primary, aux, train.labels())?;
            let t = human_aux_labels(&map, primary, aux, test.labels())?;
            train.relabel(h.primary.clone(), primary)?;
            test.relabel(t.primary, primary)?;
            (h.hierarchy.clone(), Some(h))
        }
    };
    Ok(Prepared {
        train,
        test,
        hierarchy,
        human,
    })
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Vec<EpochMetrics>,
    pub net: MultiTaskNet,
    pub labelgen: Option<LabelGenNet>,
    pub hierarchy: Hierarchy,
}

/// Trains per `cfg.method`; methods other than MAXL go to
/// [`crate::baselines::train_baseline`]. With `out` set, writes the config
/// snapshot, `metrics.csv`, `checkpoints/` and `embeddings/` there.
pub fn train(cfg: &RunConfig, train: &Dataset, test: &Dataset, out: Option<&Path>) -> Result<RunOutput> {
    if cfg.method != Method::Maxl {
        return crate::baselines::train_baseline(cfg, train, test, out);
    }
    cfg.validate()?;
    let p = prepare(cfg, train, test)?;
    let input = p.train.input_shape();
    let net = new_multitask(cfg, input, p.train.num_classes(), p.hierarchy.total())?;
    let gen = LabelGenNet::new(&cfg.arch, input, p.hierarchy.clone(), sub_seed(cfg.seed, 2))?;
    let opt = OptimizerState::new(OptimizerKind::PlainSgd, cfg.beta, 0.0, cfg.beta_weight_decay)?;
    run_loop(
        cfg,
        &p.train,
        &p.test,
        out,
        net,
        p.hierarchy,
        Labeler::Generator { net: gen, opt },
    )
}

/// Run-long auxiliary labels of the methods that fix them up front: random
/// sub-classes and the human hierarchy. `None` for the other methods.
pub(crate) fn fixed_aux_labels(cfg: &RunConfig, p: &Prepared) -> Result<Option<Tensor>> {
    match cfg.method {
        Method::Random => {
            crate::baselines::random_aux_labels(p.train.labels(), &p.hierarchy, sub_seed(cfg.seed, 4)).map(Some)
        }
        Method::Human => match &p.human {
            Some(h) => Ok(Some(h.aux_one_hot())),
            None => Err(Error::HumanWithoutHierarchy),
        },
        _ => Ok(None),
    }
}

pub(crate) fn new_multitask(
    cfg: &RunConfig,
    input: InputShape,
    num_primary: usize,
    total_aux: usize,
) -> Result<MultiTaskNet> {
    MultiTaskNet::new(&cfg.arch, input, num_primary, total_aux, sub_seed(cfg.seed, 1))
}

struct RunFiles {
    dir: PathBuf,
    metrics: fs::File,
}

impl RunFiles {
    fn create(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        for sub in ["checkpoints", "embeddings"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let snap = dir.join("config.txt");
        fs::write(&snap, cfg.to_text()).map_err(|e| Error::io(&snap, e))?;
        let path = dir.join("metrics.csv");
        let mut metrics = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        let path = self.dir.join("metrics.csv");
        writeln!(self.metrics, "{}", m.csv_row()).map_err(|e| Error::io(&path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&path, e))
    }
}

/// Checkpoint of the multi-task network and, when present, the generator.
pub fn make_checkpoint(
    net: &MultiTaskNet,
    labelgen: Option<&LabelGenNet>,
    hierarchy: &Hierarchy,
    cfg: &RunConfig,
    epoch: usize,
) -> Checkpoint {
    let mut d = String::new();
    let counts: Vec<String> = hierarchy.counts().iter().map(usize::to_string).collect();
    let _ = writeln!(d, "arch={}", net.arch());
    let _ = writeln!(d, "input={}", net.input_shape());
    let _ = writeln!(d, "num-primary={}", net.num_primary());
    let _ = writeln!(d, "total-aux={}", net.total_aux());
    let _ = writeln!(d, "hierarchy={}", counts.join(","));
    let _ = writeln!(d, "method={}", cfg.method);
    let _ = writeln!(d, "seed={}", cfg.seed);
    let _ = writeln!(d, "epoch={epoch}");
    if let Some(gen) = labelgen {
        let _ = writeln!(d, "labelgen-arch={}", gen.arch());
    }
    let mut c = Checkpoint::new(d);
    c.push_params("multitask/", net.params());
    if let Some(gen) = labelgen {
        c.push_params("labelgen/", gen.params());
    }
    c
}

pub(crate) fn meta_field<T: std::str::FromStr>(c: &Checkpoint, key: &str) -> Result<T> {
    c.meta(key).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format {
        what: "checkpoint",
        detail: format!("missing or invalid `{key}`"),
    })
}

/// Hierarchy recorded in a checkpoint.
pub fn restore_hierarchy(c: &Checkpoint) -> Result<Hierarchy> {
    let counts: String = meta_field(c, "hierarchy")?;
    let counts = counts
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Format {
            what: "checkpoint",
            detail: "invalid `hierarchy`".into(),
        })?;
    Hierarchy::new(counts)
}

/// Rebuilds the multi-task network stored in a checkpoint.
pub fn restore_multitask(c: &Checkpoint) -> Result<MultiTaskNet> {
    let arch: String = meta_field(c, "arch")?;
    let input: InputShape = meta_field(c, "input")?;
    let mut net = MultiTaskNet::new(
        &arch.parse()?,
        input,
        meta_field(c, "num-primary")?,
        meta_field(c, "total-aux")?,
        0,
    )?;
    c.load_params("multitask/", net.params_mut())?;
    Ok(net)
}

/// Rebuilds the generator stored in a checkpoint, if any.
pub fn restore_labelgen(c: &Checkpoint) -> Result<Option<LabelGenNet>> {
    let Some(arch) = c.meta("labelgen-arch") else {
        return Ok(None);
    };
    let input: InputShape = meta_field(c, "input")?;
    let mut gen = LabelGenNet::new(&arch.parse()?, input, restore_hierarchy(c)?, 0)?;
    c.load_params("labelgen/", gen.params_mut())?;
    Ok(Some(gen))
}

/// Seeded training-set sample used for the per-epoch gradient-cosine probe.
pub(crate) fn probe_indices(cfg: &RunConfig, n: usize) -> Vec<usize> {
    let mut idx = batches(n, n.max(1), 0, sub_seed(cfg.seed, 3), 0).concat();
    idx.truncate(cfg.probe_size.min(n));
    idx.sort_unstable();
    idx
}

pub(crate) fn run_loop(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    out: Option<&Path>,
    mut net: MultiTaskNet,
    hierarchy: Hierarchy,
    mut labeler: Labeler,
) -> Result<RunOutput> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set"));
    }
    crate::autograd::retain_freed_memory();
    let mut files = out.map(|d| RunFiles::create(d, cfg)).transpose()?;
    let schedule = cfg.schedule();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let loss = TaskLoss {
        kind: cfg.loss,
        gamma: cfg.gamma,
    };
    let probe = probe_indices(cfg, train.len());
    let (probe_x, probe_y) = train.batch(&probe);
    let probe_pri = Tensor::one_hot(&probe_y, train.num_classes());
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let alpha = schedule_lr(&schedule, epoch);
        opt.set_lr(alpha)?;
        let step = (|| -> Result<EpochMetrics> {
            let aux = {
                let lab = &mut labeler;
                let mut source = |idx: &[usize], x: &Tensor, y: &[usize]| lab.batch_labels(idx, x, y);
                auxiliary_pass_with(
                    &mut net,
                    &mut opt,
                    train,
                    epoch,
                    cfg.seed,
                    cfg.batch_size,
                    loss,
                    &mut source,
                )?
            };
            let mut meta = None;
            let mut lr_beta = None;
            if let Labeler::Generator { net: gen, opt: gen_opt } = &mut labeler {
                let mut state = TrainState {
                    epoch,
                    net: net.clone(),
                    opt: opt.clone(),
                    labelgen: gen.clone(),
                    gen_opt: gen_opt.clone(),
                    lambda: cfg.lambda,
                    loss,
                    seed: cfg.seed,
                    batch_size: cfg.batch_size,
                };
                meta = Some(meta_training_pass(&mut state, train)?);
                *gen = state.labelgen;
                *gen_opt = state.gen_opt;
                lr_beta = Some(gen_opt.lr);
            }
            let accuracy = evaluate(&net, test)?.accuracy;
            let utilization = labeler.utilization(train)?;
            let cosine = match labeler.peek_labels(&probe, &probe_x, &probe_y)? {
                Some(ya) => Some(grad_cosine(&net, &probe_x, &probe_pri, &ya, loss.kind, loss.gamma)?),
                None => None,
            };
            Ok(EpochMetrics {
                epoch: epoch + 1,
                lr_alpha: alpha,
                lr_beta,
                primary_train_loss: aux.primary_loss,
                aux_train_loss: aux.aux_loss,
                meta_loss: meta.map(|m| m.meta_loss),
                entropy_term: meta.map(|m| m.entropy),
                test_accuracy: accuracy,
                label_utilization: utilization,
                cosine_similarity: cosine,
            })
        })();
        let row = match step {
            Ok(row) => row,
            Err(e) => {
                if let (Error::NonFinite { stage, epoch, batch }, Some(f)) = (&e, &files) {
                    let p = f.dir.join("abort.txt");
                    let _ = fs::write(&p, format!("stage={stage}\nepoch={epoch}\nbatch={batch}\n"));
                }
                return Err(e);
            }
        };
        if let Some(f) = files.as_mut() {
            f.append(&row)?;
            let last = epoch + 1 == cfg.epochs;
            if last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
                let gen = match &labeler {
                    Labeler::Generator { net, .. } => Some(net),
                    _ => None,
                };
                let path = f.dir.join("checkpoints").join(format!("epoch-{:04}.ckpt", epoch + 1));
                make_checkpoint(&net, gen, &hierarchy, cfg, epoch + 1).save(&path)?;
            }
        }
        metrics.push(row);
    }
    if let Some(f) = &files {
        if !test.is_empty() {
            export_embeddings(&net, test, &f.dir.join("embeddings").join("test.csv"))?;
        }
    }
    let labelgen = match labeler {
        Labeler::Generator { net, .. } => Some(net),
        _ => None,
    };
    Ok(RunOutput {
        metrics,
        net,
        labelgen,
        hierarchy,
    })
}
