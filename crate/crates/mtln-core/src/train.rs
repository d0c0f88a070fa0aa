//! SGD-with-momentum training loop, the single-task ablation switch,
//! standalone loss/metric evaluation, and the binary checkpoint codec.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, resize_bilinear, Sample};
use crate::ellipse::BinaryMask;
use crate::loss::{
    boundary_weight_map, soft_dice_loss, total_loss, weighted_cross_entropy, LossConfig, LossError,
};
use crate::metrics::{
    dice_score, evaluate_case, summarize, threshold_probs, CaseReport, HausdorffMode,
    MetricsError, Summary,
};
use crate::nn::{bind_params, build_mtln, forward_mtln, ModelParams, NetworkConfig, NnError, ParamTensor};
use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    BadConfig(String),
    EmptyTrainSplit,
    EmptySplit,
    /// Training diverged; carries the epoch and the sample being processed
    /// when the first non-finite value appeared.
    NanLoss { epoch: usize, sample_id: String },
    Loss(LossError),
    Nn(NnError),
    Tensor(TensorError),
    Metrics(MetricsError),
    Checkpoint(CheckpointError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig(msg) => write!(f, "invalid training config: {msg}"),
            TrainError::EmptyTrainSplit => write!(f, "training requires a non-empty train split"),
            TrainError::EmptySplit => write!(f, "evaluation requires a non-empty split"),
            TrainError::NanLoss { epoch, sample_id } => {
                write!(f, "loss became non-finite at epoch {epoch} on sample {sample_id}")
            }
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::Nn(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Metrics(e) => write!(f, "{e}"),
            TrainError::Checkpoint(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}
impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Nn(e)
    }
}
impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}
impl From<MetricsError> for TrainError {
    fn from(e: MetricsError) -> Self {
        TrainError::Metrics(e)
    }
}
impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

pub type Result<T> = core::result::Result<T, TrainError>;

/// Whether the ellipse-regression head participates in the loss. In
/// single-task mode the head is excluded from the graph, so its
/// parameters receive no gradient and stay at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMode {
    MultiTask,
    SingleTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TaskMode,
    pub loss: LossConfig,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            momentum: 0.9,
            epochs: 200,
            batch_size: 1,
            seed: 0,
            mode: TaskMode::MultiTask,
            loss: LossConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "learning_rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::BadConfig(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".to_string()));
        }
        self.loss.validate()?;
        self.network.validate()?;
        Ok(())
    }

    /// Loss configuration actually applied: single-task mode forces the
    /// ellipse term's weight to zero.
    pub fn effective_loss(&self) -> LossConfig {
        let mut cfg = self.loss.clone();
        if self.mode == TaskMode::SingleTask {
            cfg.alpha2 = 0.0;
        }
        cfg
    }
}

/// One row of the training log. Val columns are NaN when the val split is
/// empty.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dsc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub params: ModelParams,
    pub velocity: ModelParams,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// One momentum-SGD update: `v <- momentum*v - lr*g; p <- p + v`,
/// elementwise per tensor. The three maps must share one name set.
pub fn sgd_momentum_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f32>>,
    velocity: &mut ModelParams,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let names_match = params.tensors().len() == grads.len()
        && params.tensors().len() == velocity.tensors().len()
        && params
            .tensors()
            .keys()
            .all(|k| grads.contains_key(k) && velocity.tensors().contains_key(k));
    if !names_match {
        return Err(TrainError::BadConfig(
            "parameter, gradient, and velocity name sets differ".to_string(),
        ));
    }
    for (name, p) in params.tensors_mut() {
        let g = &grads[name];
        let v = velocity
            .tensors_mut()
            .get_mut(name)
            .expect("name set checked above");
        if g.len() != p.values.len() || v.values.len() != p.values.len() {
            return Err(TrainError::BadConfig(format!(
                "tensor {name} has mismatched parameter/gradient/velocity lengths"
            )));
        }
        for i in 0..p.values.len() {
            v.values[i] = (momentum * v.values[i] as f64 - lr * g[i] as f64) as f32;
            p.values[i] += v.values[i];
        }
    }
    Ok(())
}

/// Divergence shows up either as a non-finite loss value or as a
/// non-finite intermediate rejected inside the graph; both map to the
/// same abort-with-sample-context policy.
fn is_nonfinite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Tensor(TensorError::NonFinite(_))
            | TrainError::Nn(NnError::Tensor(TensorError::NonFinite(_)))
            | TrainError::Loss(LossError::Tensor(TensorError::NonFinite(_)))
    )
}

fn zeros_like(params: &ModelParams) -> ModelParams {
    let tensors = params
        .tensors()
        .iter()
        .map(|(name, t)| {
            (
                name.clone(),
                ParamTensor {
                    dims: t.dims.clone(),
                    values: vec![0.0; t.values.len()],
                },
            )
        })
        .collect();
    ModelParams::from_tensors(tensors)
}

/// A sample lowered to the network's input geometry, with the loss
/// weight map precomputed.
struct Prepared {
    id: String,
    image: Vec<f32>,
    mask: BinaryMask,
    weights: Vec<f32>,
    /// Normalized ellipse target in the sample's native frame; stretch
    /// resizing keeps normalized parameters unchanged.
    target: [f32; 5],
}

fn prepare(sample: &Sample, net: &NetworkConfig, loss_cfg: &LossConfig) -> Result<Prepared> {
    let (ih, iw) = (net.input_h, net.input_w);
    let image = if sample.h == ih && sample.w == iw {
        sample.image.clone()
    } else {
        resize_bilinear(&sample.image, sample.h, sample.w, ih, iw)
    };
    let mask = if sample.h == ih && sample.w == iw {
        sample.mask.clone()
    } else {
        // Nearest-neighbour resize keeps the mask binary.
        let mut m = BinaryMask::zeros(ih, iw);
        for y in 0..ih {
            let sy = ((y as f64 + 0.5) * sample.h as f64 / ih as f64 - 0.5)
                .round()
                .clamp(0.0, (sample.h - 1) as f64) as usize;
            for x in 0..iw {
                let sx = ((x as f64 + 0.5) * sample.w as f64 / iw as f64 - 0.5)
                    .round()
                    .clamp(0.0, (sample.w - 1) as f64) as usize;
                m.set(y, x, sample.mask.get(sy, sx));
            }
        }
        m
    };
    let weights = boundary_weight_map(&mask, loss_cfg)?;
    let norm = sample.ellipse.normalized(sample.w, sample.h);
    let target = [
        norm[0] as f32,
        norm[1] as f32,
        norm[2] as f32,
        norm[3] as f32,
        norm[4] as f32,
    ];
    Ok(Prepared {
        id: sample.id.clone(),
        image,
        mask,
        weights,
        target,
    })
}

/// Builds the per-sample graph and returns (total loss id, seg probs id).
fn build_graph(
    tape: &mut Tape,
    ids: &BTreeMap<String, TensorId>,
    prepared: &Prepared,
    net: &NetworkConfig,
    loss_cfg: &LossConfig,
    include_et: bool,
) -> Result<(TensorId, TensorId)> {
    let image = tape.leaf(
        &[1, 1, net.input_h, net.input_w],
        prepared.image.clone(),
        false,
    )?;
    let (seg_logits, et_out) = forward_mtln(tape, ids, image, net, include_et)?;
    let ce = weighted_cross_entropy(tape, seg_logits, &prepared.mask, &prepared.weights, loss_cfg.p_clip)?;
    let probs = tape.sigmoid(seg_logits)?;
    let dice = soft_dice_loss(tape, probs, &prepared.mask, loss_cfg.dice_smooth)?;
    let l_seg = tape.add(ce, dice)?;
    let l_et = match et_out {
        Some(et) => Some(crate::loss::ellipse_param_mse(tape, et, &prepared.target)?),
        None => None,
    };
    let loss = total_loss(tape, l_seg, l_et, loss_cfg)?;
    Ok((loss, probs))
}

/// Forward+backward for one sample. Gradients cover every parameter name;
/// parameters outside the graph (the regression head in single-task mode)
/// get zeros.
fn sample_gradients(
    params: &ModelParams,
    prepared: &Prepared,
    net: &NetworkConfig,
    loss_cfg: &LossConfig,
    include_et: bool,
) -> Result<(f64, BTreeMap<String, Vec<f32>>)> {
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, params)?;
    let (loss, _) = build_graph(&mut tape, &ids, prepared, net, loss_cfg, include_et)?;
    let loss_value = tape.scalar(loss) as f64;
    tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, &id) in &ids {
        let g = match tape.grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.values(id).len()],
        };
        grads.insert(name.clone(), g);
    }
    Ok((loss_value, grads))
}

/// Forward-only loss and hard-Dice for one sample against its mask.
fn sample_loss_and_dice(
    params: &ModelParams,
    prepared: &Prepared,
    net: &NetworkConfig,
    loss_cfg: &LossConfig,
    include_et: bool,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, params)?;
    let (loss, probs) = build_graph(&mut tape, &ids, prepared, net, loss_cfg, include_et)?;
    let pred = threshold_probs(tape.values(probs), net.input_h, net.input_w);
    let dsc = dice_score(&pred, &prepared.mask)?;
    Ok((tape.scalar(loss) as f64, dsc))
}

/// Mean total loss of a parameter set over samples, with no training side
/// effects.
pub fn mean_total_loss(params: &ModelParams, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    cfg.validate()?;
    let loss_cfg = cfg.effective_loss();
    let include_et = cfg.mode == TaskMode::MultiTask;
    let mut total = 0.0;
    for s in samples {
        let p = prepare(s, &cfg.network, &loss_cfg)?;
        total += sample_loss_and_dice(params, &p, &cfg.network, &loss_cfg, include_et)?.0;
    }
    Ok(total / samples.len() as f64)
}

/// Mean soft-Dice component alone, the overlap half of the segmentation
/// term; used as the convergence yardstick for overfit checks.
pub fn mean_soft_dice_loss(
    params: &ModelParams,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    cfg.validate()?;
    let loss_cfg = cfg.effective_loss();
    let mut total = 0.0;
    for s in samples {
        let p = prepare(s, &cfg.network, &loss_cfg)?;
        let mut tape = Tape::new();
        let ids = bind_params(&mut tape, params)?;
        let image = tape.leaf(
            &[1, 1, cfg.network.input_h, cfg.network.input_w],
            p.image.clone(),
            false,
        )?;
        let (seg_logits, _) = forward_mtln(&mut tape, &ids, image, &cfg.network, false)?;
        let probs = tape.sigmoid(seg_logits)?;
        let dice = soft_dice_loss(&mut tape, probs, &p.mask, loss_cfg.dice_smooth)?;
        total += tape.scalar(dice) as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains from scratch. See [`train_from`] for resuming.
pub fn train(cfg: &TrainConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainOutput> {
    train_from(cfg, train_set, val_set, None)
}

/// Runs `cfg.epochs` further epochs, starting from `start` when given and
/// from a fresh initialization otherwise. Each epoch shuffles the train
/// set with a seed derived from (config seed, absolute epoch), so a
/// resumed run replays exactly the schedule of an uninterrupted one.
/// Returns the checkpoint with the best val loss (the final epoch when
/// the val split is empty) and the per-epoch log.
pub fn train_from(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    start: Option<Checkpoint>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let loss_cfg = cfg.effective_loss();
    let include_et = cfg.mode == TaskMode::MultiTask;

    let reference = build_mtln(&cfg.network)?;
    let (mut params, mut velocity, start_epoch) = match start {
        Some(ckpt) => {
            let same_names = ckpt.params.tensors().len() == reference.tensors().len()
                && ckpt
                    .params
                    .tensors()
                    .keys()
                    .zip(reference.tensors().keys())
                    .all(|(a, b)| a == b);
            if !same_names {
                return Err(TrainError::BadConfig(
                    "checkpoint parameters do not match the configured network".to_string(),
                ));
            }
            (ckpt.params, ckpt.velocity, ckpt.epoch as usize)
        }
        None => {
            let velocity = zeros_like(&reference);
            (reference, velocity, 0)
        }
    };

    let prepared: Vec<Prepared> = train_set
        .iter()
        .map(|s| prepare(s, &cfg.network, &loss_cfg))
        .collect::<Result<_>>()?;
    let prepared_val: Vec<Prepared> = val_set
        .iter()
        .map(|s| prepare(s, &cfg.network, &loss_cfg))
        .collect::<Result<_>>()?;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;

    for rel_epoch in 1..=cfg.epochs {
        let epoch = start_epoch + rel_epoch;
        // Shuffling identity order with an (seed, epoch)-derived stream
        // makes each epoch's permutation independent of training history,
        // so resumed runs replay the uninterrupted schedule.
        let mut indices: Vec<usize> = (0..prepared.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        indices.shuffle(&mut rng);

        let mut train_total = 0.0f64;
        for batch in indices.chunks(cfg.batch_size) {
            let mut accum: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for &i in batch {
                let p = &prepared[i];
                let (loss_value, grads) =
                    match sample_gradients(&params, p, &cfg.network, &loss_cfg, include_et) {
                        Ok(v) => v,
                        Err(e) if is_nonfinite(&e) => {
                            return Err(TrainError::NanLoss {
                                epoch,
                                sample_id: p.id.clone(),
                            })
                        }
                        Err(e) => return Err(e),
                    };
                if !loss_value.is_finite() {
                    return Err(TrainError::NanLoss {
                        epoch,
                        sample_id: p.id.clone(),
                    });
                }
                train_total += loss_value;
                for (name, g) in grads {
                    let slot = accum
                        .entry(name)
                        .or_insert_with(|| vec![0.0f64; g.len()]);
                    for (a, v) in slot.iter_mut().zip(g) {
                        *a += v as f64;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mean_grads: BTreeMap<String, Vec<f32>> = accum
                .into_iter()
                .map(|(name, g)| (name, g.into_iter().map(|v| (v * scale) as f32).collect()))
                .collect();
            sgd_momentum_step(&mut params, &mean_grads, &mut velocity, cfg.learning_rate, cfg.momentum)?;
            if let Some(bad) = params
                .tensors()
                .values()
                .find(|t| t.values.iter().any(|v| !v.is_finite()))
            {
                let _ = bad;
                return Err(TrainError::NanLoss {
                    epoch,
                    sample_id: prepared[batch[0]].id.clone(),
                });
            }
        }
        let train_loss = train_total / prepared.len() as f64;

        let (val_loss, val_dsc) = if prepared_val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let mut lt = 0.0;
            let mut dt = 0.0;
            for p in &prepared_val {
                let (l, d) =
                    match sample_loss_and_dice(&params, p, &cfg.network, &loss_cfg, include_et) {
                        Ok(v) => v,
                        Err(e) if is_nonfinite(&e) => {
                            return Err(TrainError::NanLoss {
                                epoch,
                                sample_id: p.id.clone(),
                            })
                        }
                        Err(e) => return Err(e),
                    };
                if !l.is_finite() {
                    return Err(TrainError::NanLoss {
                        epoch,
                        sample_id: p.id.clone(),
                    });
                }
                lt += l;
                dt += d;
            }
            (lt / prepared_val.len() as f64, dt / prepared_val.len() as f64)
        };

        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_dsc,
        });

        if !prepared_val.is_empty() && best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((
                val_loss,
                Checkpoint {
                    config: cfg.clone(),
                    epoch: epoch as u64,
                    params: params.clone(),
                    velocity: velocity.clone(),
                },
            ));
        }
    }

    let checkpoint = match best {
        Some((_, ckpt)) => ckpt,
        None => Checkpoint {
            config: cfg.clone(),
            epoch: (start_epoch + cfg.epochs) as u64,
            params,
            velocity,
        },
    };
    Ok(TrainOutput { checkpoint, log })
}

/// Runs the network over each sample and scores it against the ground
/// truth at the sample's native resolution (probabilities are resized
/// back when the network input differs). Reports come back in id order.
pub fn evaluate_model(
    ckpt: &Checkpoint,
    samples: &[Sample],
    hd_mode: HausdorffMode,
) -> Result<(Vec<CaseReport>, Summary)> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let net = &ckpt.config.network;
    let mut order: Vec<&Sample> = samples.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let mut reports = Vec::with_capacity(order.len());
    for s in order {
        let image = if s.h == net.input_h && s.w == net.input_w {
            s.image.clone()
        } else {
            resize_bilinear(&s.image, s.h, s.w, net.input_h, net.input_w)
        };
        let mut tape = Tape::new();
        let ids = bind_params(&mut tape, &ckpt.params)?;
        let input = tape.leaf(&[1, 1, net.input_h, net.input_w], image, false)?;
        let (seg_logits, _) = forward_mtln(&mut tape, &ids, input, net, false)?;
        let probs_id = tape.sigmoid(seg_logits)?;
        let probs = tape.values(probs_id);
        let native = if s.h == net.input_h && s.w == net.input_w {
            probs.to_vec()
        } else {
            resize_bilinear(probs, net.input_h, net.input_w, s.h, s.w)
        };
        reports.push(evaluate_case(
            &s.id,
            &native,
            &s.mask,
            &s.ellipse,
            s.pixel_size_mm,
            hd_mode,
        )?);
    }
    let summary = summarize(&reports);
    Ok((reports, summary))
}

/// Predicted segmentation probabilities for one image at its native size,
/// plus the raw normalized regression-head output when the checkpoint was
/// trained multi-task.
pub fn infer_probs(
    ckpt: &Checkpoint,
    image: &[f32],
    h: usize,
    w: usize,
) -> Result<(Vec<f32>, Option<[f64; 5]>)> {
    let net = &ckpt.config.network;
    if image.len() != h * w {
        return Err(TrainError::BadConfig(format!(
            "image has {} values for {h}x{w}",
            image.len()
        )));
    }
    let resized = if h == net.input_h && w == net.input_w {
        image.to_vec()
    } else {
        resize_bilinear(image, h, w, net.input_h, net.input_w)
    };
    let include_et = ckpt.config.mode == TaskMode::MultiTask;
    let mut tape = Tape::new();
    let ids = bind_params(&mut tape, &ckpt.params)?;
    let input = tape.leaf(&[1, 1, net.input_h, net.input_w], resized, false)?;
    let (seg_logits, et_out) = forward_mtln(&mut tape, &ids, input, net, include_et)?;
    let probs_id = tape.sigmoid(seg_logits)?;
    let probs = tape.values(probs_id);
    let native = if h == net.input_h && w == net.input_w {
        probs.to_vec()
    } else {
        resize_bilinear(probs, net.input_h, net.input_w, h, w)
    };
    let et = et_out.map(|id| {
        let v = tape.values(id);
        [v[0] as f64, v[1] as f64, v[2] as f64, v[3] as f64, v[4] as f64]
    });
    Ok((native, et))
}

// --- checkpoint codec ---

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    BadJson(String),
    BadRecord(String),
    TrailingData(usize),
    VelocityMismatch,
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint version {v}")
            }
            CheckpointError::Truncated => write!(f, "checkpoint data ends prematurely"),
            CheckpointError::BadJson(msg) => write!(f, "invalid checkpoint header: {msg}"),
            CheckpointError::BadRecord(msg) => write!(f, "invalid tensor record: {msg}"),
            CheckpointError::TrailingData(n) => {
                write!(f, "{n} unexpected bytes after the last tensor record")
            }
            CheckpointError::VelocityMismatch => {
                write!(f, "velocity tensor names do not mirror the parameter names")
            }
        }
    }
}

impl core::error::Error for CheckpointError {}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MTLN";
const CHECKPOINT_VERSION: u32 = 1;

/// JSON header carried inside the binary container. The epoch rides here
/// because the tensor section has no slot for it.
#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: u64,
    config: TrainConfig,
}

fn encode_record(out: &mut Vec<u8>, name: &str, t: &ParamTensor) -> core::result::Result<(), CheckpointError> {
    if name.len() > u16::MAX as usize {
        return Err(CheckpointError::BadRecord(format!("name of {} bytes", name.len())));
    }
    if t.dims.len() > u8::MAX as usize {
        return Err(CheckpointError::BadRecord(format!("{} dims", t.dims.len())));
    }
    if t.dims.iter().product::<usize>() != t.values.len() {
        return Err(CheckpointError::BadRecord(format!(
            "{name}: dims {:?} do not match {} values",
            t.dims,
            t.values.len()
        )));
    }
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> core::result::Result<Vec<u8>, CheckpointError> {
    let meta = serde_json::to_string(&CheckpointMeta {
        epoch: ckpt.epoch,
        config: ckpt.config.clone(),
    })
    .map_err(|e| CheckpointError::BadJson(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let total = ckpt.params.tensors().len() + ckpt.velocity.tensors().len();
    out.extend_from_slice(&(total as u32).to_le_bytes());
    for (name, t) in ckpt.params.tensors() {
        // The prefix marks velocity records in the container, so no
        // parameter may claim it.
        if name.starts_with("vel/") {
            return Err(CheckpointError::BadRecord(format!(
                "parameter name {name} uses the reserved vel/ prefix"
            )));
        }
        encode_record(&mut out, name, t)?;
    }
    for (name, t) in ckpt.velocity.tensors() {
        encode_record(&mut out, &format!("vel/{name}"), t)?;
    }
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> core::result::Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> core::result::Result<u16, CheckpointError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> core::result::Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_checkpoint(data: &[u8]) -> core::result::Result<Checkpoint, CheckpointError> {
    let mut c = Cursor { data, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let json_len = c.u32()? as usize;
    let json = core::str::from_utf8(c.take(json_len)?)
        .map_err(|e| CheckpointError::BadJson(e.to_string()))?;
    let meta: CheckpointMeta =
        serde_json::from_str(json).map_err(|e| CheckpointError::BadJson(e.to_string()))?;
    let count = c.u32()? as usize;

    let mut params = BTreeMap::new();
    let mut velocity = BTreeMap::new();
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = core::str::from_utf8(c.take(name_len)?)
            .map_err(|e| CheckpointError::BadRecord(e.to_string()))?
            .to_string();
        let ndim = c.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = c.take(n * 4)?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = ParamTensor { dims, values };
        let (map, key) = match name.strip_prefix("vel/") {
            Some(base) => (&mut velocity, base.to_string()),
            None => (&mut params, name),
        };
        if map.insert(key.clone(), tensor).is_some() {
            return Err(CheckpointError::BadRecord(format!("duplicate tensor {key}")));
        }
    }
    if c.pos != data.len() {
        return Err(CheckpointError::TrailingData(data.len() - c.pos));
    }
    let names_match = params.len() == velocity.len()
        && params.keys().zip(velocity.keys()).all(|(a, b)| a == b);
    if !names_match {
        return Err(CheckpointError::VelocityMismatch);
    }
    Ok(Checkpoint {
        config: meta.config,
        epoch: meta.epoch,
        params: ModelParams::from_tensors(params),
        velocity: ModelParams::from_tensors(velocity),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom;

    fn tensor_map(entries: &[(&str, &[f32])]) -> ModelParams {
        let map = entries
            .iter()
            .map(|(name, vals)| {
                (
                    name.to_string(),
                    ParamTensor {
                        dims: vec![vals.len()],
                        values: vals.to_vec(),
                    },
                )
            })
            .collect();
        ModelParams::from_tensors(map)
    }

    fn grads_map(entries: &[(&str, &[f32])]) -> BTreeMap<String, Vec<f32>> {
        entries
            .iter()
            .map(|(name, vals)| (name.to_string(), vals.to_vec()))
            .collect()
    }

    #[test]
    fn sgd_zero_momentum_is_plain_descent() {
        let mut p = tensor_map(&[("w", &[1.0, 2.0])]);
        let mut v = tensor_map(&[("w", &[0.0, 0.0])]);
        let g = grads_map(&[("w", &[0.5, -1.0])]);
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.0).unwrap();
        let w = &p.get("w").unwrap().values;
        assert!((w[0] - 0.95).abs() < 1e-7 && (w[1] - 2.1).abs() < 1e-7);
    }

    #[test]
    fn sgd_two_step_recursion_matches_hand_arithmetic() {
        let mut p = tensor_map(&[("w", &[1.0])]);
        let mut v = tensor_map(&[("w", &[0.0])]);
        let g = grads_map(&[("w", &[1.0])]);
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        assert!((p.get("w").unwrap().values[0] - 0.9).abs() < 1e-7);
        assert!((v.get("w").unwrap().values[0] + 0.1).abs() < 1e-7);
        sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9).unwrap();
        assert!((v.get("w").unwrap().values[0] + 0.19).abs() < 1e-7);
        assert!((p.get("w").unwrap().values[0] - 0.71).abs() < 1e-7);
    }

    #[test]
    fn sgd_zero_grads_zero_velocity_is_identity() {
        let mut p = tensor_map(&[("w", &[3.0, -4.0])]);
        let before = p.clone();
        let mut v = tensor_map(&[("w", &[0.0, 0.0])]);
        let g = grads_map(&[("w", &[0.0, 0.0])]);
        sgd_momentum_step(&mut p, &g, &mut v, 0.5, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_rejects_name_mismatch() {
        let mut p = tensor_map(&[("w", &[1.0])]);
        let mut v = tensor_map(&[("w", &[0.0])]);
        let g = grads_map(&[("u", &[1.0])]);
        assert!(matches!(
            sgd_momentum_step(&mut p, &g, &mut v, 0.1, 0.9),
            Err(TrainError::BadConfig(_))
        ));
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            seed: 5,
            network: NetworkConfig {
                input_h: 64,
                input_w: 64,
                channels: vec![4, 8],
                fc_hidden: vec![8],
                seed: 11,
            },
            ..TrainConfig::default()
        }
    }

    fn phantoms(seed0: u64, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| generate_phantom(seed0 + i as u64, 64, 64).unwrap())
            .collect()
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.momentum = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn config_json_round_trip_rejects_unknown_keys() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<TrainConfig>("{\"learning_rte\":0.1}").is_err());
        let single: TrainConfig = serde_json::from_str("{\"mode\":\"single-task\"}").unwrap();
        assert_eq!(single.mode, TaskMode::SingleTask);
    }

    #[test]
    fn first_full_batch_epoch_loss_equals_standalone_loss() {
        let samples = phantoms(20, 3);
        let mut cfg = tiny_config(1);
        cfg.batch_size = samples.len();
        let params = build_mtln(&cfg.network).unwrap();
        let standalone = mean_total_loss(&params, &samples, &cfg).unwrap();
        let out = train(&cfg, &samples, &[]).unwrap();
        // All epoch-1 losses are computed before the single full-batch
        // step, so the logged value is the same mean up to summation
        // order.
        assert!(
            (out.log[0].train_loss - standalone).abs() < 1e-9,
            "{} vs {standalone}",
            out.log[0].train_loss
        );
    }

    #[test]
    fn training_is_deterministic_in_config_and_seed() {
        let train_set = phantoms(30, 3);
        let val_set = phantoms(40, 2);
        let cfg = tiny_config(2);
        let a = train(&cfg, &train_set, &val_set).unwrap();
        let b = train(&cfg, &train_set, &val_set).unwrap();
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_loss.to_bits(), y.val_loss.to_bits());
            assert_eq!(x.val_dsc.to_bits(), y.val_dsc.to_bits());
        }
        assert_eq!(
            encode_checkpoint(&a.checkpoint).unwrap(),
            encode_checkpoint(&b.checkpoint).unwrap()
        );
    }

    #[test]
    fn resumed_run_replays_the_uninterrupted_schedule() {
        let train_set = phantoms(50, 3);
        let cfg = tiny_config(4);
        let whole = train(&cfg, &train_set, &[]).unwrap();

        let mut first_half = cfg.clone();
        first_half.epochs = 2;
        let part1 = train(&first_half, &train_set, &[]).unwrap();
        let part2 = train_from(&first_half, &train_set, &[], Some(part1.checkpoint)).unwrap();
        assert_eq!(part2.checkpoint.epoch, 4);
        for (x, y) in whole.log[2..].iter().zip(&part2.log) {
            assert_eq!(x.epoch, y.epoch);
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        }
        // The config snapshots differ (2 vs 4 epochs), but the learned
        // state must be bitwise identical.
        assert_eq!(whole.checkpoint.params, part2.checkpoint.params);
        assert_eq!(whole.checkpoint.velocity, part2.checkpoint.velocity);
        assert_eq!(whole.checkpoint.epoch, part2.checkpoint.epoch);
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let cfg = tiny_config(1);
        assert!(matches!(
            train(&cfg, &[], &[]),
            Err(TrainError::EmptyTrainSplit)
        ));
    }

    #[test]
    fn exploding_learning_rate_aborts_with_sample_id() {
        let samples = phantoms(60, 2);
        let mut cfg = tiny_config(10);
        cfg.learning_rate = 1e18;
        match train(&cfg, &samples, &[]) {
            Err(TrainError::NanLoss { epoch, sample_id }) => {
                assert!(epoch >= 1);
                assert!(!sample_id.is_empty());
            }
            other => panic!("expected divergence abort, got {other:?}"),
        }
    }

    #[test]
    fn single_task_matches_model_with_head_removed() {
        let cfg = tiny_config(1);
        let params = build_mtln(&cfg.network).unwrap();
        let sample = generate_phantom(70, 64, 64).unwrap();
        let loss_cfg = cfg.loss.clone();
        let p = prepare(&sample, &cfg.network, &loss_cfg).unwrap();

        let (loss_full, grads_full) =
            sample_gradients(&params, &p, &cfg.network, &loss_cfg, false).unwrap();

        let trimmed: BTreeMap<String, ParamTensor> = params
            .tensors()
            .iter()
            .filter(|(name, _)| !name.starts_with("et."))
            .map(|(name, t)| (name.clone(), t.clone()))
            .collect();
        let trimmed = ModelParams::from_tensors(trimmed);
        let (loss_trim, grads_trim) =
            sample_gradients(&trimmed, &p, &cfg.network, &loss_cfg, false).unwrap();

        assert_eq!(loss_full.to_bits(), loss_trim.to_bits());
        for (name, g) in &grads_trim {
            let full = &grads_full[name];
            assert_eq!(full.len(), g.len());
            for (a, b) in full.iter().zip(g) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
        // Head parameters exist in the full set but carry zero gradient.
        for (name, g) in &grads_full {
            if name.starts_with("et.") {
                assert!(g.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn best_val_checkpoint_is_selected() {
        let train_set = phantoms(80, 3);
        let val_set = phantoms(90, 2);
        let cfg = tiny_config(3);
        let out = train(&cfg, &train_set, &val_set).unwrap();
        let best_epoch = out
            .log
            .iter()
            .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
            .unwrap()
            .epoch;
        assert_eq!(out.checkpoint.epoch as usize, best_epoch);

        // Without a val split the final epoch is kept.
        let out = train(&cfg, &train_set, &[]).unwrap();
        assert_eq!(out.checkpoint.epoch, 3);
        assert!(out.log.iter().all(|l| l.val_loss.is_nan()));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = tiny_config(1);
        let params = build_mtln(&cfg.network).unwrap();
        let mut velocity = zeros_like(&params);
        for (i, t) in velocity.tensors_mut().values_mut().enumerate() {
            for (j, v) in t.values.iter_mut().enumerate() {
                *v = ((i * 31 + j) as f32).sin();
            }
        }
        let ckpt = Checkpoint {
            config: cfg,
            epoch: 17,
            params,
            velocity,
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(&bytes[0..4], b"MTLN");
    }

    #[test]
    fn checkpoint_codec_rejects_corruption() {
        let cfg = tiny_config(1);
        let params = build_mtln(&cfg.network).unwrap();
        let velocity = zeros_like(&params);
        let ckpt = Checkpoint {
            config: cfg,
            epoch: 1,
            params,
            velocity,
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();

        let mut bad = bytes.clone();
        bad[0] ^= 0xFF;
        assert_eq!(decode_checkpoint(&bad), Err(CheckpointError::BadMagic));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(
            decode_checkpoint(&bad),
            Err(CheckpointError::UnsupportedVersion(9))
        );

        let truncated = &bytes[..bytes.len() - 3];
        assert_eq!(decode_checkpoint(truncated), Err(CheckpointError::Truncated));

        let mut extended = bytes.clone();
        extended.push(0);
        assert_eq!(
            decode_checkpoint(&extended),
            Err(CheckpointError::TrailingData(1))
        );
    }

    #[test]
    fn checkpoint_rejects_reserved_parameter_names() {
        let ckpt = Checkpoint {
            config: TrainConfig::default(),
            epoch: 0,
            params: tensor_map(&[("vel/w", &[1.0])]),
            velocity: tensor_map(&[("vel/w", &[0.0])]),
        };
        assert!(matches!(
            encode_checkpoint(&ckpt),
            Err(CheckpointError::BadRecord(_))
        ));
    }

    #[test]
    fn loaded_checkpoint_reproduces_forward_outputs() {
        let samples = phantoms(100, 2);
        let cfg = tiny_config(2);
        let out = train(&cfg, &samples, &[]).unwrap();
        let bytes = encode_checkpoint(&out.checkpoint).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();

        let (p1, _) = infer_probs(&out.checkpoint, &samples[0].image, 64, 64).unwrap();
        let (p2, _) = infer_probs(&back, &samples[0].image, 64, 64).unwrap();
        assert_eq!(p1.len(), p2.len());
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn evaluation_orders_by_id_and_handles_sizes() {
        let mut samples = phantoms(110, 3);
        samples.reverse();
        let cfg = tiny_config(1);
        let out = train(&cfg, &samples, &[]).unwrap();
        let (reports, summary) = evaluate_model(&out.checkpoint, &samples, HausdorffMode::Contour).unwrap();
        assert_eq!(reports.len(), 3);
        for pair in reports.windows(2) {
            assert!(pair[0].case_id < pair[1].case_id);
        }
        assert_eq!(summary.cases, 3);

        // A sample at a different native size is resized through the net
        // and scored at its own resolution.
        let big = generate_phantom(120, 96, 96).unwrap();
        let (reports, _) = evaluate_model(&out.checkpoint, &[big.clone()], HausdorffMode::Contour).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].case_id, big.id);

        assert!(matches!(
            evaluate_model(&out.checkpoint, &[], HausdorffMode::Contour),
            Err(TrainError::EmptySplit)
        ));
    }

    /// Convergence on a memorizable set: a small net must drive the mean
    /// soft-Dice loss under 0.05 within 300 epochs on 8 phantoms and then
    /// segment them with mean hard Dice at least 0.95.
    /// Desk-scale loss shape: at 64x64 the whole frame sits near the
    /// boundary, so the published full-frame weight profile would scale
    /// the CE term ~20x and destabilize SGD. A narrower, lighter band
    /// keeps the terms balanced.
    pub(super) fn overfit_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            seed: 7,
            learning_rate: 0.01,
            momentum: 0.9,
            loss: LossConfig {
                omega0: 5.0,
                sigma: 3.0,
                // At this narrow width the shared trunk destabilizes under
                // the full ellipse-loss weight at batch 1; halving it keeps
                // the memorization check about the optimizer, not about
                // task balance.
                alpha2: 0.5,
                ..LossConfig::default()
            },
            network: NetworkConfig {
                input_h: 64,
                input_w: 64,
                channels: vec![8, 16],
                fc_hidden: vec![16, 8],
                seed: 3,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn overfits_eight_phantoms() {
        let samples = phantoms(200, 8);
        let cfg = overfit_config(30);

        let mut ckpt: Option<Checkpoint> = None;
        let mut early_losses: Option<Vec<f64>> = None;
        let mut trained_epochs = 0;
        let mut dice = f64::INFINITY;
        while trained_epochs < 300 {
            let out = train_from(&cfg, &samples, &[], ckpt.take()).unwrap();
            if early_losses.is_none() {
                early_losses = Some(out.log.iter().map(|l| l.train_loss).collect());
            }
            trained_epochs += cfg.epochs;
            dice = mean_soft_dice_loss(&out.checkpoint.params, &samples, &cfg).unwrap();
            ckpt = Some(out.checkpoint);
            if dice < 0.04 {
                break;
            }
        }
        assert!(dice < 0.05, "soft-Dice loss {dice} after {trained_epochs} epochs");

        let ckpt = ckpt.unwrap();
        let (_, summary) = evaluate_model(&ckpt, &samples, HausdorffMode::Contour).unwrap();
        assert!(summary.dsc.mean >= 0.95, "mean DSC {}", summary.dsc.mean);

        // Later training must sit below the early epochs on this
        // memorizable set: compare the first-chunk mean against the
        // final soft-Dice level.
        let early = early_losses.unwrap();
        let early_mean = early.iter().take(10).sum::<f64>() / 10.0;
        assert!(
            dice < early_mean,
            "final dice {dice} vs early mean loss {early_mean}"
        );
    }
}
