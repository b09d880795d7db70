//! Gradient agreement between tasks, auxiliary-label usage and feature export.

use std::io::Write;
use std::path::Path;

use crate::autograd::{Graph, Tensor};
use crate::data::{Dataset, Method, RunConfig};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::meta::{fixed_aux_labels, meta_field, prepare, probe_indices, restore_labelgen, restore_multitask};
use crate::nn::{Checkpoint, LabelGenNet, MultiTaskNet};

/// Norms below this make the similarity 0.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;

/// Samples per forward pass in the evaluation helpers.
pub(crate) const EVAL_CHUNK: usize = 500;

/// Cosine similarity between the shared-trunk gradients of the primary and
/// auxiliary losses on one batch.
///
/// `images` is `[N, C, H, W]`; `y_pri` and `y_aux` are target rows for the two heads.
pub fn grad_cosine(
    net: &MultiTaskNet,
    images: &Tensor,
    y_pri: &Tensor,
    y_aux: &Tensor,
    loss: LossKind,
    gamma: f64,
) -> Result<f64> {
    grad_cosine_scaled(net, images, y_pri, y_aux, loss, gamma, 1.0, 1.0)
}

/// [`grad_cosine`] with each loss multiplied by a constant first.
#[allow(clippy::too_many_arguments)]
pub fn grad_cosine_scaled(
    net: &MultiTaskNet,
    images: &Tensor,
    y_pri: &Tensor,
    y_aux: &Tensor,
    loss: LossKind,
    gamma: f64,
    scale_pri: f64,
    scale_aux: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = net.params().bind(&mut g, true);
    let x = g.constant(net.arch().input_tensor(images)?);
    let out = net.forward(&mut g, &p, x)?;
    let tp = g.constant(y_pri.clone());
    let ta = g.constant(y_aux.clone());
    let lp = loss.apply(&mut g, out.primary, tp, gamma)?;
    let lp = g.scalar_mul(lp, scale_pri);
    let la = loss.apply(&mut g, out.aux, ta, gamma)?;
    let la = g.scalar_mul(la, scale_aux);
    let trunk = &p[net.trunk_param_range()];
    let gp = g.backward(lp, trunk, true)?;
    let ga = g.backward(la, trunk, false)?;
    let (mut dot, mut np, mut na) = (0.0, 0.0, 0.0);
    for (&a, &b) in gp.iter().zip(&ga) {
        for (&u, &v) in g.value(a).data().iter().zip(g.value(b).data()) {
            dot += u * v;
            np += u * u;
            na += v * v;
        }
    }
    let (np, na) = (np.sqrt(), na.sqrt());
    if np < GRAD_NORM_FLOOR || na < GRAD_NORM_FLOOR {
        return Ok(0.0);
    }
    Ok((dot / (np * na)).clamp(-1.0, 1.0))
}

/// Fraction of the `K` auxiliary classes that are the argmax of at least one row.
pub fn utilization_of(labels: &Tensor) -> f64 {
    let k = *labels.shape().last().unwrap_or(&0);
    if k == 0 || labels.is_empty() {
        return 0.0;
    }
    let mut hit = vec![false; k];
    for a in labels.argmax_rows() {
        hit[a] = true;
    }
    hit.iter().filter(|&&h| h).count() as f64 / k as f64
}

/// Soft auxiliary labels the generator assigns to every sample of `data`.
pub fn generate_all(labelgen: &LabelGenNet, data: &Dataset) -> Result<Tensor> {
    let k = labelgen.output_len();
    let mut out = Vec::with_capacity(data.len() * k);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        out.extend_from_slice(labelgen.generate(&x, &y)?.data());
    }
    Tensor::new(vec![data.len(), k], out)
}

/// Share of auxiliary classes the generator uses as a hard label on `data`.
pub fn label_utilization(labelgen: &LabelGenNet, data: &Dataset) -> Result<f64> {
    Ok(utilization_of(&generate_all(labelgen, data)?))
}

/// Writes `label,f0,f1,...` then one row per sample: its primary label and the
/// trunk output features.
pub fn export_embeddings(net: &MultiTaskNet, data: &Dataset, out: &Path) -> Result<()> {
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(out, e);
    let dim = net.feature_dim();
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..dim).map(|i| format!("f{i}")))
        .collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let (features, _, _) = net.predict(&x)?;
        for (r, label) in y.iter().enumerate() {
            write!(w, "{label}").map_err(io)?;
            for v in features.row(r) {
                write!(w, ",{v}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineRecord {
    pub epoch: usize,
    pub similarity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UtilizationRecord {
    pub epoch: usize,
    pub fraction: f64,
}

/// Diagnostics recomputed from a saved checkpoint. Methods whose auxiliary
/// labels cannot be rebuilt from the checkpoint (single task, k-means) have none.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Replay {
    pub epoch: usize,
    pub cosine: Option<CosineRecord>,
    pub utilization: Option<UtilizationRecord>,
}

/// Recomputes gradient cosine (on the run's probe batch) and label utilization
/// for `ckpt`. Method and seed come from the checkpoint, data and loss from `cfg`.
pub fn replay_checkpoint(cfg: &RunConfig, train: &Dataset, test: &Dataset, ckpt: &Checkpoint) -> Result<Replay> {
    let mut cfg = cfg.clone();
    cfg.method = meta_field::<String>(ckpt, "method")?.parse()?;
    cfg.seed = meta_field(ckpt, "seed")?;
    let epoch: usize = meta_field(ckpt, "epoch")?;
    let p = prepare(&cfg, train, test)?;
    let net = restore_multitask(ckpt)?;
    if net.num_primary() != p.train.num_classes() || net.input_shape() != p.train.input_shape() {
        return Err(Error::Config(format!(
            "checkpoint network ({} classes, input {}) does not fit the configured data ({} classes, input {})",
            net.num_primary(),
            net.input_shape(),
            p.train.num_classes(),
            p.train.input_shape()
        )));
    }
    let probe = probe_indices(&cfg, p.train.len());
    let (x, y) = p.train.batch(&probe);
    let (probe_aux, fraction) = match cfg.method {
        Method::Maxl => {
            let gen = restore_labelgen(ckpt)?.ok_or_else(|| Error::Format {
                what: "checkpoint",
                detail: "maxl checkpoint without a label generator".into(),
            })?;
            (Some(gen.generate(&x, &y)?), Some(label_utilization(&gen, &p.train)?))
        }
        _ => match fixed_aux_labels(&cfg, &p)? {
            Some(all) => (Some(all.select_rows(&probe)), Some(utilization_of(&all))),
            None => (None, None),
        },
    };
    let cosine = match probe_aux {
        Some(ya) => {
            let yp = Tensor::one_hot(&y, net.num_primary());
            Some(CosineRecord {
                epoch,
                similarity: grad_cosine(&net, &x, &yp, &ya, cfg.loss, cfg.gamma)?,
            })
        }
        None => None,
    };
    Ok(Replay {
        epoch,
        cosine,
        utilization: fraction.map(|fraction| UtilizationRecord { epoch, fraction }),
    })
}
