//! Training loops for the semi-supervised model and its two baselines, plus
//! the self-describing checkpoint format that wraps a trained model.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action_model::{ActionConfig, ActionModel, Normalization, SubsetSize};
use crate::context_learner::{ContextConfig, ContextLearner};
use crate::diffcore::layers::Mlp;
use crate::diffcore::{
    adam_step, kahan_sum, read_checkpoint, write_checkpoint, AdamConfig, Array, DiffError,
    ParameterStore, RngStream, Tape,
};
use crate::doorsim::{Action, Dataset, ObjectRecord, SimError};
use crate::ModelError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] SimError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no labeled records to train on")]
    NoLabels,
    #[error("checkpoint metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Ssnp,
    Np,
    NsFinetune,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Ssnp, ModelKind::Np, ModelKind::NsFinetune];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ssnp => "ssnp",
            ModelKind::Np => "np",
            ModelKind::NsFinetune => "ns-finetune",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown model kind {s:?} (expected ssnp, np or ns-finetune)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of epochs over which β ramps linearly from 0 to 1.
    pub anneal_frac: f64,
    pub seed: u64,
    /// Weight on the action loss in the joint objective.
    pub loss_weight: f64,
    /// Multiplier on β for the action-latent KL terms.
    pub action_kl_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Ssnp,
            epochs: 60,
            lr: 1e-3,
            anneal_frac: 0.2,
            seed: 0,
            loss_weight: 1.0,
            action_kl_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.anneal_frac) {
            return Err(TrainError::Config(format!("anneal fraction {} outside [0, 1]", self.anneal_frac)));
        }
        for (name, w) in [("loss weight", self.loss_weight), ("action KL weight", self.action_kl_weight)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(TrainError::Config(format!("{name} {w} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Linear KL annealing `β(t) = min(1, t / steps)`; `steps = 0` means no ramp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub steps: u64,
}

impl AnnealSchedule {
    pub fn new(cfg: &TrainConfig, records_per_epoch: usize) -> Self {
        let epochs = (cfg.anneal_frac * cfg.epochs as f64).round() as u64;
        Self {
            steps: epochs * records_per_epoch as u64,
        }
    }

    pub fn beta(&self, step: u64) -> f64 {
        if self.steps == 0 {
            1.0
        } else {
            (step as f64 / self.steps as f64).min(1.0)
        }
    }
}

/// Per-epoch means; `None` where a term was not computed that epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochLoss {
    pub phase: String,
    pub epoch: usize,
    pub mean_loss_x: Option<f64>,
    pub mean_loss_a: Option<f64>,
    pub beta: f64,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct LogLine<'a> {
    #[serde(flatten)]
    loss: &'a EpochLoss,
    wall_ms: u128,
}

/// Everything needed to rebuild and re-check a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub context: Option<ContextConfig>,
    pub action: Option<ActionConfig>,
    pub head_hidden: Option<usize>,
    pub normalization: Normalization,
    pub labeled_frac: f64,
    pub loss_trace: Vec<EpochLoss>,
    /// Mean training loss on a fixed probe batch after training, at β = 1.
    pub probe_loss: f64,
}

#[derive(Clone, Debug)]
enum Nets {
    Ssnp { ctx: ContextLearner, act: ActionModel },
    Np { act: ActionModel },
    NsFinetune { ctx: ContextLearner, head: Mlp },
}

/// A trained model: parameters, architecture and training record.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub meta: CheckpointMeta,
    pub store: ParameterStore,
    nets: Nets,
}

fn head_dims(d_c: usize, hidden: usize) -> [usize; 4] {
    [d_c + 4, hidden, hidden, 1]
}

const PROBE_RECORDS: usize = 8;

// Substream purposes under the training seed.
const STREAM_INIT: u64 = 10;
const STREAM_ORDER: u64 = 11;
const STREAM_STEP: u64 = 12;
const STREAM_PROBE: u64 = 13;
const STREAM_HEAD_INIT: u64 = 14;

impl TrainedModel {
    fn rebuild(meta: CheckpointMeta, mut store: ParameterStore) -> Result<Self, TrainError> {
        // Layers look up existing parameters by name; the stream only feeds
        // initializers whose output is discarded.
        let mut rng = RngStream::new(0);
        let nets = match meta.config.kind {
            ModelKind::Ssnp => Nets::Ssnp {
                ctx: ContextLearner::new(&mut store, "ctx", need(meta.context, "context")?, &mut rng)?,
                act: ActionModel::new(&mut store, "np", need(meta.action, "action")?, meta.normalization, &mut rng)?,
            },
            ModelKind::Np => Nets::Np {
                act: ActionModel::new(&mut store, "np", need(meta.action, "action")?, meta.normalization, &mut rng)?,
            },
            ModelKind::NsFinetune => {
                let cc = need(meta.context, "context")?;
                Nets::NsFinetune {
                    ctx: ContextLearner::new(&mut store, "ctx", cc, &mut rng)?,
                    head: Mlp::new(
                        &mut store,
                        "head",
                        &head_dims(cc.d_c, need(meta.head_hidden, "head")?),
                        &mut rng,
                    )?,
                }
            }
        };
        Ok(Self { meta, store, nets })
    }

    pub fn kind(&self) -> ModelKind {
        self.meta.config.kind
    }

    /// Mean of `q(c | X)` for models with an image pathway.
    pub fn object_context(&self, images: &[Array]) -> Result<Option<Vec<f64>>, ModelError> {
        match &self.nets {
            Nets::Ssnp { ctx, .. } | Nets::NsFinetune { ctx, .. } => {
                Ok(Some(crate::action_model::context_mean(ctx, &self.store, images)?))
            }
            Nets::Np { .. } => Ok(None),
        }
    }

    /// Predicted rewards given a precomputed object context.
    pub fn predict_with_context(
        &self,
        c: Option<&[f64]>,
        observed: &[(Action, f64)],
        targets: &[Action],
    ) -> Result<Vec<f64>, ModelError> {
        match &self.nets {
            Nets::Ssnp { act, .. } => {
                let c = c.ok_or_else(|| ModelError::Input("missing object context".into()))?;
                act.predict_rewards(&self.store, Some(c), observed, targets)
            }
            Nets::Np { act } => act.predict_rewards(&self.store, None, observed, targets),
            Nets::NsFinetune { head, .. } => {
                let c = c.ok_or_else(|| ModelError::Input("missing object context".into()))?;
                head_predict(head, &self.store, &self.meta.normalization, c, targets)
            }
        }
    }

    /// Predicted rewards for `targets` from images and observed pairs.
    pub fn predict(
        &self,
        images: &[Array],
        observed: &[(Action, f64)],
        targets: &[Action],
    ) -> Result<Vec<f64>, ModelError> {
        let c = self.object_context(images)?;
        self.predict_with_context(c.as_deref(), observed, targets)
    }

    /// Recompute the probe loss stored at the end of training.
    pub fn probe_loss(&self, data: &Dataset) -> Result<f64, TrainError> {
        probe_loss(&self.nets, &self.store, &self.meta, data)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), TrainError> {
        let meta = serde_json::to_vec(&self.meta)?;
        write_checkpoint(w, &self.store, &meta)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, TrainError> {
        let (store, meta) = read_checkpoint(r)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        Self::rebuild(meta, store)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn need<T>(v: Option<T>, what: &str) -> Result<T, TrainError> {
    v.ok_or_else(|| TrainError::Config(format!("checkpoint lacks the {what} architecture")))
}

fn head_input(tape: &mut Tape, norm: &Normalization, c: &[f64], targets: &[Action]) -> Result<crate::diffcore::Var, ModelError> {
    let mut data = Vec::with_capacity(targets.len() * (c.len() + 4));
    for a in targets {
        data.extend_from_slice(c);
        data.extend(norm.action(a));
    }
    Ok(tape.constant(Array::new(vec![targets.len(), c.len() + 4], data)?))
}

fn head_predict(
    head: &Mlp,
    store: &ParameterStore,
    norm: &Normalization,
    c: &[f64],
    targets: &[Action],
) -> Result<Vec<f64>, ModelError> {
    if targets.is_empty() {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let x = head_input(&mut tape, norm, c, targets)?;
    let y = head.forward(&mut tape, store, x)?;
    Ok(tape.value(y).data().iter().map(|&v| norm.denormalize_reward(v)).collect())
}

/// Where per-epoch JSON lines go.
pub struct TrainLog<'a> {
    out: Option<&'a mut dyn Write>,
    start: Instant,
}

impl<'a> TrainLog<'a> {
    pub fn new(out: Option<&'a mut dyn Write>) -> Self {
        Self {
            out,
            start: Instant::now(),
        }
    }

    fn emit(&mut self, loss: &EpochLoss) -> Result<(), TrainError> {
        log::info!(
            "{} epoch {}: loss_x {:?} loss_a {:?} beta {:.3}",
            loss.phase,
            loss.epoch,
            loss.mean_loss_x,
            loss.mean_loss_a,
            loss.beta
        );
        if let Some(out) = self.out.as_mut() {
            let line = LogLine {
                loss,
                wall_ms: self.start.elapsed().as_millis(),
            };
            serde_json::to_writer(&mut **out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Running means for one epoch.
#[derive(Default)]
struct EpochAccum {
    x: Vec<f64>,
    a: Vec<f64>,
}

impl EpochAccum {
    fn finish(self, phase: &str, epoch: usize, beta: f64) -> EpochLoss {
        let mean = |v: &[f64]| (!v.is_empty()).then(|| kahan_sum(v.iter().copied()) / v.len() as f64);
        EpochLoss {
            phase: phase.to_string(),
            epoch,
            mean_loss_x: mean(&self.x),
            mean_loss_a: mean(&self.a),
            beta,
        }
    }
}

fn check_images(data: &Dataset) -> Result<ContextConfig, TrainError> {
    data.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("empty dataset".into()));
    }
    Ok(ContextConfig::for_image(data.header.image_h, data.header.image_w))
}

fn epoch_order(seed: u64, phase: u64, epoch: usize, n: usize) -> Vec<usize> {
    RngStream::keyed(seed, &[STREAM_ORDER, phase, epoch as u64]).permutation(n)
}

fn step_stream(seed: u64, phase: u64, step: u64) -> RngStream {
    RngStream::keyed(seed, &[STREAM_STEP, phase, step])
}

fn labeled_pairs(rec: &ObjectRecord) -> Option<(&[Action], &[f64])> {
    rec.rewards.as_deref().map(|r| (rec.actions.as_slice(), r))
}

/// Joint semi-supervised training: every record contributes the image ELBO,
/// labeled records also the action loss.
pub fn train_ssnp(data: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    let cc = check_images(data)?;
    if data.labeled_count() == 0 {
        log::warn!("no labeled records; only the image model will be trained");
    }
    let norm = Normalization::default();
    let ac = ActionConfig {
        d_c: cc.d_c,
        ..ActionConfig::default()
    };
    let mut store = ParameterStore::new();
    let mut init = RngStream::keyed(cfg.seed, &[STREAM_INIT]);
    let ctx = ContextLearner::new(&mut store, "ctx", cc, &mut init)?;
    let act = ActionModel::new(&mut store, "np", ac, norm, &mut init)?;
    let adam = AdamConfig::new(cfg.lr);
    let anneal = AnnealSchedule::new(cfg, data.len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut acc = EpochAccum::default();
        let mut beta = 0.0;
        for i in epoch_order(cfg.seed, 0, epoch, data.len()) {
            let rec = &data.records[i];
            beta = anneal.beta(step);
            let mut rng = step_stream(cfg.seed, 0, step);
            let mut tape = Tape::new();
            let lx = ctx.loss_context(&mut tape, &store, &rec.images, &mut rng, beta)?;
            let mut total = lx.total;
            acc.x.push(tape.value(lx.total).item());
            if let Some((a, r)) = labeled_pairs(rec) {
                let la = act.loss_action(
                    &mut tape,
                    &store,
                    a,
                    r,
                    Some(lx.c_sample),
                    &mut rng,
                    beta * cfg.action_kl_weight,
                    SubsetSize::Random,
                )?;
                acc.a.push(tape.value(la.total).item());
                let weighted = tape.scale(la.total, cfg.loss_weight);
                total = tape.add(total, weighted)?;
            }
            tape.backward(total, &mut store)?;
            adam_step(&mut store, &adam);
            step += 1;
        }
        let e = acc.finish("ssnp", epoch, beta);
        log.emit(&e)?;
        trace.push(e);
    }
    finish(data, cfg, store, Nets::Ssnp { ctx, act }, Some(cc), Some(ac), None, trace)
}

/// Supervised-only neural process: no image pathway, labeled records only.
pub fn train_np_baseline(data: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    data.validate()?;
    let labeled: Vec<&ObjectRecord> = data.records.iter().filter(|r| r.labeled()).collect();
    if labeled.is_empty() {
        return Err(TrainError::NoLabels);
    }
    let norm = Normalization::default();
    let ac = ActionConfig {
        d_c: 0,
        ..ActionConfig::default()
    };
    let mut store = ParameterStore::new();
    let mut init = RngStream::keyed(cfg.seed, &[STREAM_INIT]);
    let act = ActionModel::new(&mut store, "np", ac, norm, &mut init)?;
    let adam = AdamConfig::new(cfg.lr);
    let anneal = AnnealSchedule::new(cfg, labeled.len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut acc = EpochAccum::default();
        let mut beta = 0.0;
        for i in epoch_order(cfg.seed, 1, epoch, labeled.len()) {
            let (a, r) = labeled_pairs(labeled[i]).expect("filtered to labeled");
            beta = anneal.beta(step);
            let mut rng = step_stream(cfg.seed, 1, step);
            let mut tape = Tape::new();
            let la = act.loss_action(&mut tape, &store, a, r, None, &mut rng, beta * cfg.action_kl_weight, SubsetSize::Random)?;
            acc.a.push(tape.value(la.total).item());
            tape.backward(la.total, &mut store)?;
            adam_step(&mut store, &adam);
            step += 1;
        }
        let e = acc.finish("np", epoch, beta);
        log.emit(&e)?;
        trace.push(e);
    }
    finish(data, cfg, store, Nets::Np { act }, None, Some(ac), None, trace)
}

/// Output of the image-only pretraining phase of the two-stage baseline.
#[derive(Clone, Debug)]
pub struct Pretrained {
    store: ParameterStore,
    ctx: ContextLearner,
    trace: Vec<EpochLoss>,
    seed: u64,
    epochs: usize,
    anneal_frac: f64,
    lr: f64,
}

/// Phase 1 of the two-stage baseline: the image model alone on every record.
/// Depends only on images, so it can be shared across label splits.
pub fn pretrain_context(data: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<Pretrained, TrainError> {
    cfg.validate()?;
    let cc = check_images(data)?;
    let mut store = ParameterStore::new();
    let mut init = RngStream::keyed(cfg.seed, &[STREAM_INIT]);
    let ctx = ContextLearner::new(&mut store, "ctx", cc, &mut init)?;
    let adam = AdamConfig::new(cfg.lr);
    let anneal = AnnealSchedule::new(cfg, data.len());
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut acc = EpochAccum::default();
        let mut beta = 0.0;
        for i in epoch_order(cfg.seed, 2, epoch, data.len()) {
            beta = anneal.beta(step);
            let mut rng = step_stream(cfg.seed, 2, step);
            let mut tape = Tape::new();
            let lx = ctx.loss_context(&mut tape, &store, &data.records[i].images, &mut rng, beta)?;
            acc.x.push(tape.value(lx.total).item());
            tape.backward(lx.total, &mut store)?;
            adam_step(&mut store, &adam);
            step += 1;
        }
        let e = acc.finish("pretrain", epoch, beta);
        log.emit(&e)?;
        trace.push(e);
    }
    Ok(Pretrained {
        store,
        ctx,
        trace,
        seed: cfg.seed,
        epochs: cfg.epochs,
        anneal_frac: cfg.anneal_frac,
        lr: cfg.lr,
    })
}

/// Phase 2: a fresh reward head on frozen context means, labeled records only.
pub fn finetune_head(
    pre: &Pretrained,
    data: &Dataset,
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    if (pre.seed, pre.epochs, pre.anneal_frac, pre.lr) != (cfg.seed, cfg.epochs, cfg.anneal_frac, cfg.lr) {
        return Err(TrainError::Config("pretrained phase was run with a different config".into()));
    }
    data.validate()?;
    let labeled: Vec<&ObjectRecord> = data.records.iter().filter(|r| r.labeled()).collect();
    if labeled.is_empty() {
        return Err(TrainError::NoLabels);
    }
    let norm = Normalization::default();
    let cc = pre.ctx.cfg;
    let hidden = ActionConfig::default().hidden;
    let mut store = pre.store.clone();
    let mut init = RngStream::keyed(cfg.seed, &[STREAM_HEAD_INIT]);
    let head = Mlp::new(&mut store, "head", &head_dims(cc.d_c, hidden), &mut init)?;
    let contexts: Vec<Vec<f64>> = labeled
        .iter()
        .map(|r| crate::action_model::context_mean(&pre.ctx, &store, &r.images))
        .collect::<Result<_, _>>()?;
    let adam = AdamConfig::new(cfg.lr);
    let mut trace = pre.trace.clone();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut acc = EpochAccum::default();
        for i in epoch_order(cfg.seed, 3, epoch, labeled.len()) {
            let (a, r) = labeled_pairs(labeled[i]).expect("filtered to labeled");
            let mut tape = Tape::new();
            let x = head_input(&mut tape, &norm, &contexts[i], a)?;
            let pred = head.forward(&mut tape, &store, x)?;
            let target: Vec<f64> = r.iter().map(|&v| norm.reward(v)).collect();
            let target = tape.constant(Array::new(vec![r.len(), 1], target)?);
            let mse = tape.mse(pred, target)?;
            acc.a.push(tape.value(mse).item());
            tape.backward(mse, &mut store)?;
            adam_step(&mut store, &adam);
            step += 1;
        }
        let e = acc.finish("finetune", epoch, 1.0);
        log.emit(&e)?;
        trace.push(e);
    }
    log::debug!("finetune ran {step} steps");
    finish(
        data,
        cfg,
        store,
        Nets::NsFinetune { ctx: pre.ctx.clone(), head },
        Some(cc),
        None,
        Some(hidden),
        trace,
    )
}

/// Both phases of the pretrain-then-finetune baseline.
pub fn train_ns_finetune(data: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<TrainedModel, TrainError> {
    let pre = pretrain_context(data, cfg, log)?;
    finetune_head(&pre, data, cfg, log)
}

/// Dispatch on `cfg.kind`.
pub fn train(data: &Dataset, cfg: &TrainConfig, log: &mut TrainLog) -> Result<TrainedModel, TrainError> {
    match cfg.kind {
        ModelKind::Ssnp => train_ssnp(data, cfg, log),
        ModelKind::Np => train_np_baseline(data, cfg, log),
        ModelKind::NsFinetune => train_ns_finetune(data, cfg, log),
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    data: &Dataset,
    cfg: &TrainConfig,
    store: ParameterStore,
    nets: Nets,
    context: Option<ContextConfig>,
    action: Option<ActionConfig>,
    head_hidden: Option<usize>,
    loss_trace: Vec<EpochLoss>,
) -> Result<TrainedModel, TrainError> {
    let mut meta = CheckpointMeta {
        config: *cfg,
        context,
        action,
        head_hidden,
        normalization: Normalization::default(),
        labeled_frac: data.header.labeled_frac,
        loss_trace,
        probe_loss: 0.0,
    };
    meta.probe_loss = probe_loss(&nets, &store, &meta, data)?;
    Ok(TrainedModel { meta, store, nets })
}

/// Mean training objective at β = 1 over the first few records, with noise
/// from a fixed stream.
fn probe_loss(nets: &Nets, store: &ParameterStore, meta: &CheckpointMeta, data: &Dataset) -> Result<f64, TrainError> {
    let seed = meta.config.seed;
    let mut losses = Vec::new();
    for (i, rec) in data.records.iter().take(PROBE_RECORDS).enumerate() {
        let mut rng = RngStream::keyed(seed, &[STREAM_PROBE, i as u64]);
        let mut tape = Tape::new();
        let pairs = labeled_pairs(rec);
        let loss = match nets {
            Nets::Ssnp { ctx, act } => {
                let lx = ctx.loss_context(&mut tape, store, &rec.images, &mut rng, 1.0)?;
                let mut v = tape.value(lx.total).item();
                if let Some((a, r)) = pairs {
                    let la = act.loss_action(
                        &mut tape,
                        store,
                        a,
                        r,
                        Some(lx.c_sample),
                        &mut rng,
                        meta.config.action_kl_weight,
                        SubsetSize::Random,
                    )?;
                    v += meta.config.loss_weight * tape.value(la.total).item();
                }
                Some(v)
            }
            Nets::Np { act } => match pairs {
                Some((a, r)) => {
                    let la = act.loss_action(&mut tape, store, a, r, None, &mut rng, meta.config.action_kl_weight, SubsetSize::Random)?;
                    Some(tape.value(la.total).item())
                }
                None => None,
            },
            Nets::NsFinetune { ctx, head } => {
                let lx = ctx.loss_context(&mut tape, store, &rec.images, &mut rng, 1.0)?;
                let mut v = tape.value(lx.total).item();
                if let Some((a, r)) = pairs {
                    let c = crate::action_model::context_mean(ctx, store, &rec.images)?;
                    let pred = head_predict(head, store, &meta.normalization, &c, a)?;
                    let se: Vec<f64> = pred
                        .iter()
                        .zip(r)
                        .map(|(p, t)| (meta.normalization.reward(*p) - meta.normalization.reward(*t)).powi(2))
                        .collect();
                    v += kahan_sum(se.iter().copied()) / se.len() as f64;
                }
                Some(v)
            }
        };
        losses.extend(loss);
    }
    Ok(if losses.is_empty() { 0.0 } else { kahan_sum(losses.iter().copied()) / losses.len() as f64 })
}

#[cfg(test)]
#[path = "training_tests.rs"]
mod tests;
