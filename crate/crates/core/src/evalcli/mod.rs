//! Evaluation protocol (regret and RMSE adaptation curves), CSV reporting,
//! and the command-line front end.

mod cli;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::diffcore::{kahan_sum, Array, RngStream};
use crate::doorsim::{
    execute_action, optimal_reward, sample_candidate_actions, Action, Dataset, DoorKinematics, ObjectRecord,
    SimError,
};
use crate::training::{ModelKind, TrainError, TrainedModel};
use crate::ModelError;

pub use cli::{cli_main, run_cli};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] SimError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("test door {0} has no reward labels")]
    Unlabeled(usize),
    #[error("image count {requested} exceeds the {available} images per door")]
    TooManyImages { requested: usize, available: usize },
    #[error("invalid record: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Regret,
    Rmse,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Regret => "regret",
            Metric::Rmse => "rmse",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "regret" => Ok(Metric::Regret),
            "rmse" => Ok(Metric::Rmse),
            _ => Err(format!("unknown metric {s:?}")),
        }
    }
}

/// One point of one adaptation curve for one door.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub model: ModelKind,
    pub k: f64,
    pub x: usize,
    pub door_id: usize,
    pub seed: u64,
    pub metric: Metric,
    pub value: f64,
    /// Number of images the object context was inferred from, when ablated.
    pub image_count: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub candidates: usize,
    pub max_context: usize,
    pub seed: u64,
    /// Evaluate doors on the rayon pool; output is identical either way.
    pub parallel: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            candidates: 100,
            max_context: 10,
            seed: 0,
            parallel: true,
        }
    }
}

// Substream purposes under the evaluation seed.
const STREAM_CANDIDATES: u64 = 3;
const STREAM_CONTEXT_ORDER: u64 = 4;

/// Anything that maps (images, observed pairs, targets) to predicted rewards.
pub trait RewardModel: Sync {
    fn kind(&self) -> ModelKind;
    fn labeled_frac(&self) -> f64;
    /// Opaque per-door state computed once from the images.
    fn door_context(&self, images: &[Array]) -> Result<Option<Vec<f64>>, ModelError>;
    fn predict(&self, c: Option<&[f64]>, observed: &[(Action, f64)], targets: &[Action]) -> Result<Vec<f64>, ModelError>;
}

impl RewardModel for TrainedModel {
    fn kind(&self) -> ModelKind {
        TrainedModel::kind(self)
    }

    fn labeled_frac(&self) -> f64 {
        self.meta.labeled_frac
    }

    fn door_context(&self, images: &[Array]) -> Result<Option<Vec<f64>>, ModelError> {
        self.object_context(images)
    }

    fn predict(&self, c: Option<&[f64]>, observed: &[(Action, f64)], targets: &[Action]) -> Result<Vec<f64>, ModelError> {
        self.predict_with_context(c, observed, targets)
    }
}

/// The candidate list shared by every model and every `x` for one door.
pub fn door_candidates(seed: u64, door_id: usize, count: usize) -> Vec<Action> {
    sample_candidate_actions(&mut RngStream::keyed(seed, &[STREAM_CANDIDATES, door_id as u64]), count)
}

/// The door's labeled pairs in the fixed order used for context prefixes.
pub fn context_order(seed: u64, door_id: usize, rec: &ObjectRecord) -> Result<Vec<(Action, f64)>, EvalError> {
    let pairs = rec.pairs();
    if pairs.is_empty() {
        return Err(EvalError::Unlabeled(door_id));
    }
    let perm = RngStream::keyed(seed, &[STREAM_CONTEXT_ORDER, door_id as u64]).permutation(pairs.len());
    Ok(perm.into_iter().map(|i| pairs[i]).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// `(r* - r)/r*` for the true reward `r` of the selected action.
pub fn regret(optimal: f64, achieved: f64) -> f64 {
    (optimal - achieved) / optimal
}

/// Regret of executing the candidate with the highest predicted reward.
pub fn selection_regret(door: &DoorKinematics, candidates: &[Action], predicted: &[f64]) -> Result<f64, EvalError> {
    if candidates.len() != predicted.len() {
        return Err(EvalError::Parse(format!(
            "{} predictions for {} candidates",
            predicted.len(),
            candidates.len()
        )));
    }
    let chosen = argmax(predicted).ok_or_else(|| EvalError::Parse("no candidates".into()))?;
    Ok(regret(optimal_reward(door), execute_action(door, &candidates[chosen])))
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    let sq: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).collect();
    (kahan_sum(sq) / truth.len() as f64).sqrt()
}

/// Run `f` on every test door, serially or on the rayon pool, keeping door order.
fn per_door<F>(test: &Dataset, parallel: bool, f: F) -> Result<Vec<EvalRecord>, EvalError>
where
    F: Fn(usize, &ObjectRecord) -> Result<Vec<EvalRecord>, EvalError> + Sync,
{
    let chunks: Vec<Vec<EvalRecord>> = if parallel {
        test.records.par_iter().enumerate().map(|(i, r)| f(i, r)).collect::<Result<_, _>>()?
    } else {
        test.records.iter().enumerate().map(|(i, r)| f(i, r)).collect::<Result<_, _>>()?
    };
    Ok(chunks.into_iter().flatten().collect())
}

/// Regret of the model's best-predicted candidate, for `x = 0..=max_context`
/// observed pairs on every test door.
pub fn eval_regret(model: &dyn RewardModel, test: &Dataset, opts: &EvalOptions) -> Result<Vec<EvalRecord>, EvalError> {
    per_door(test, opts.parallel, |door_id, rec| {
        let context = context_order(opts.seed, door_id, rec)?;
        let candidates = door_candidates(opts.seed, door_id, opts.candidates);
        let c = model.door_context(&rec.images)?;
        let mut out = Vec::new();
        for x in 0..=opts.max_context.min(context.len()) {
            let pred = model.predict(c.as_deref(), &context[..x], &candidates)?;
            out.push(EvalRecord {
                model: model.kind(),
                k: model.labeled_frac(),
                x,
                door_id,
                seed: opts.seed,
                metric: Metric::Regret,
                value: selection_regret(&rec.kinematics, &candidates, &pred)?,
                image_count: None,
            });
        }
        Ok(out)
    })
}

fn rmse_records(
    model: &dyn RewardModel,
    test: &Dataset,
    opts: &EvalOptions,
    image_count: Option<usize>,
) -> Result<Vec<EvalRecord>, EvalError> {
    let available = test.header.images_per_door;
    if let Some(m) = image_count {
        if m == 0 || m > available {
            return Err(EvalError::TooManyImages { requested: m, available });
        }
    }
    per_door(test, opts.parallel, |door_id, rec| {
        let context = context_order(opts.seed, door_id, rec)?;
        let truth = rec.rewards.as_deref().ok_or(EvalError::Unlabeled(door_id))?;
        let images = &rec.images[..image_count.unwrap_or(rec.images.len()).min(rec.images.len())];
        let c = model.door_context(images)?;
        let mut out = Vec::new();
        for x in 0..=opts.max_context.min(context.len()) {
            let pred = model.predict(c.as_deref(), &context[..x], &rec.actions)?;
            out.push(EvalRecord {
                model: model.kind(),
                k: model.labeled_frac(),
                x,
                door_id,
                seed: opts.seed,
                metric: Metric::Rmse,
                value: rmse(&pred, truth),
                image_count,
            });
        }
        Ok(out)
    })
}

/// Reward RMSE over each door's labeled actions given the first `x` as context.
pub fn eval_rmse(model: &dyn RewardModel, test: &Dataset, opts: &EvalOptions) -> Result<Vec<EvalRecord>, EvalError> {
    rmse_records(model, test, opts, None)
}

/// [`eval_rmse`] with the image set truncated to each of `image_counts`.
pub fn eval_image_ablation(
    model: &dyn RewardModel,
    test: &Dataset,
    image_counts: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<EvalRecord>, EvalError> {
    let mut out = Vec::new();
    for &m in image_counts {
        out.extend(rmse_records(model, test, opts, Some(m))?);
    }
    Ok(out)
}

/// Mean, standard error and count for one curve point.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveSummary {
    pub model: ModelKind,
    pub k: f64,
    pub x: usize,
    pub metric: Metric,
    pub image_count: Option<usize>,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

/// Group by `(model, k, x, metric, image_count)`, ordered by model, metric,
/// k, image count, then x.
pub fn summarize(records: &[EvalRecord]) -> Vec<CurveSummary> {
    type Key = (ModelKind, Metric, u64, Option<usize>, usize);
    let mut groups: BTreeMap<Key, (f64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        // k is non-negative, so its bit pattern orders like the value.
        let key = (r.model, r.metric, r.k.to_bits(), r.image_count, r.x);
        groups.entry(key).or_insert_with(|| (r.k, Vec::new())).1.push(r.value);
    }
    groups
        .into_iter()
        .map(|((model, metric, _, image_count, x), (k, values))| {
            let n = values.len();
            let mean = kahan_sum(values.iter().copied()) / n as f64;
            let stderr = if n > 1 {
                let ss = kahan_sum(values.iter().map(|v| (v - mean) * (v - mean)));
                (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
            } else {
                0.0
            };
            CurveSummary {
                model,
                k,
                x,
                metric,
                image_count,
                mean,
                stderr,
                count: n,
            }
        })
        .collect()
}

pub const RECORD_HEADER: [&str; 7] = ["model", "k", "x", "door_id", "seed", "metric", "value"];
pub const SUMMARY_HEADER: [&str; 8] = ["model", "k", "x", "metric", "image_count", "mean", "stderr", "count"];

/// Write records as CSV; an `image_count` column is added only when some
/// record carries one.
pub fn write_records(records: &[EvalRecord], w: impl Write) -> Result<(), EvalError> {
    let with_images = records.iter().any(|r| r.image_count.is_some());
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = RECORD_HEADER.to_vec();
    if with_images {
        header.push("image_count");
    }
    out.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.model.to_string(),
            r.k.to_string(),
            r.x.to_string(),
            r.door_id.to_string(),
            r.seed.to_string(),
            r.metric.to_string(),
            r.value.to_string(),
        ];
        if with_images {
            row.push(r.image_count.map(|m| m.to_string()).unwrap_or_default());
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

fn field<T: FromStr>(row: &csv::StringRecord, idx: Option<usize>, name: &str) -> Result<T, EvalError> {
    let raw = idx
        .and_then(|i| row.get(i))
        .ok_or_else(|| EvalError::Parse(format!("missing column {name}")))?;
    raw.parse()
        .map_err(|_| EvalError::Parse(format!("bad {name} value {raw:?}")))
}

pub fn read_records(r: impl Read) -> Result<Vec<EvalRecord>, EvalError> {
    let mut input = csv::Reader::from_reader(r);
    let header = input.headers()?.clone();
    let col = |name: &str| header.iter().position(|h| h == name);
    for name in RECORD_HEADER {
        if col(name).is_none() {
            return Err(EvalError::Parse(format!("missing column {name}")));
        }
    }
    let img = col("image_count");
    let mut out = Vec::new();
    for row in input.records() {
        let row = row?;
        let model: String = field(&row, col("model"), "model")?;
        let metric: String = field(&row, col("metric"), "metric")?;
        out.push(EvalRecord {
            model: model.parse().map_err(EvalError::Parse)?,
            k: field(&row, col("k"), "k")?,
            x: field(&row, col("x"), "x")?,
            door_id: field(&row, col("door_id"), "door_id")?,
            seed: field(&row, col("seed"), "seed")?,
            metric: metric.parse().map_err(EvalError::Parse)?,
            value: field(&row, col("value"), "value")?,
            image_count: match img.and_then(|i| row.get(i)) {
                None | Some("") => None,
                Some(_) => Some(field(&row, img, "image_count")?),
            },
        });
    }
    Ok(out)
}

pub fn write_summary(rows: &[CurveSummary], w: impl Write) -> Result<(), EvalError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for s in rows {
        out.write_record([
            s.model.to_string(),
            s.k.to_string(),
            s.x.to_string(),
            s.metric.to_string(),
            s.image_count.map(|m| m.to_string()).unwrap_or_default(),
            s.mean.to_string(),
            s.stderr.to_string(),
            s.count.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
