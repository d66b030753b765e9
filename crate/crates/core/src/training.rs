//! SGD with momentum, the two-phase schedule, evaluation and the
//! question-only overlap baseline.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{rank_descending, PoolingMode, NUM_CANDIDATES};
use crate::data::{ClozeExample, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Model;
use crate::objectives::{sample_wrong_candidate, ObjectiveConfig};
use crate::params::{ParamSet, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr_first_half: f64,
    pub lr_second_half: f64,
    pub momentum: f64,
    pub epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr_first_half: 0.4,
            lr_second_half: 0.08,
            momentum: 0.9,
            epochs: 30,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_first_half > 0.0 && self.lr_second_half > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be > 0, got {} and {}",
                self.lr_first_half, self.lr_second_half
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// The first `floor(epochs / 2)` epochs use `lr_first_half`.
pub fn lr_at(epoch: usize, config: &SgdConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} out of range for a {}-epoch schedule",
            config.epochs
        )));
    }
    Ok(if epoch < config.epochs / 2 {
        config.lr_first_half
    } else {
        config.lr_second_half
    })
}

/// One row of the loss history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Optimizer state that survives a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// One buffer per parameter, same length as its data.
    pub velocity: Vec<Vec<f64>>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Loss summed over the last completed epoch.
    pub running_loss: f64,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(params: &ParamSet, seed: u64) -> Self {
        TrainState {
            velocity: params.ids().map(|id| vec![0.0; params.get(id).len()]).collect(),
            epoch: 0,
            running_loss: 0.0,
            seed,
            history: Vec::new(),
        }
    }

    fn check(&self, params: &ParamSet) -> Result<()> {
        let ok = self.velocity.len() == params.len()
            && params
                .ids()
                .zip(&self.velocity)
                .all(|(id, v)| params.get(id).len() == v.len());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "velocity buffers do not mirror the parameters".into(),
            ))
        }
    }
}

/// Shuffle order and wrong-candidate draws for `epoch`. Each epoch has
/// its own stream so a resumed run sees the same draws.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// `v ← μ·v + g; θ ← θ − lr·v`. Missing gradients count as zero; frozen
/// parameters are left alone.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &[Option<Vec<f64>>],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for ((id, grad), v) in ids.into_iter().zip(grads).zip(velocity.iter_mut()) {
        let n = params.get(id).len();
        if v.len() != n || grad.as_ref().is_some_and(|g| g.len() != n) {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: params.get(id).shape().to_vec(),
                rhs: vec![grad.as_ref().map_or(v.len(), Vec::len)],
            });
        }
        if !params.is_trainable(id) {
            continue;
        }
        match grad {
            Some(g) => v.iter_mut().zip(g).for_each(|(v, g)| *v = momentum * *v + g),
            None => v.iter_mut().for_each(|v| *v *= momentum),
        }
        for (p, v) in params.get_mut(id).data_mut().iter_mut().zip(v.iter()) {
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Knobs shared by training runs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub objective: ObjectiveConfig,
    pub sgd: SgdConfig,
    pub pooling: PoolingMode,
}

fn train_example(
    model: &mut Model,
    ex: &ClozeExample,
    options: &TrainOptions,
    wrong: usize,
    state: &mut TrainState,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.params().bind(&mut g);
    let mut s = Session::new(&mut g, &vars);
    let fwd = model.forward(&mut s, ex, options.pooling)?;
    let loss = model.loss(s.graph, &fwd, ex.answer, &options.objective, wrong)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    g.backward(loss)?;
    let grads = model.params().collect_grads(&g, &vars);
    sgd_step(
        model.params_mut(),
        &grads,
        &mut state.velocity,
        lr,
        options.sgd.momentum,
    )?;
    Ok(value)
}

/// Runs at most `max_epochs` further epochs from `state.epoch` and
/// returns the records they produced (also appended to `state.history`).
pub fn train_epochs(
    model: &mut Model,
    data: &Dataset,
    options: &TrainOptions,
    state: &mut TrainState,
    max_epochs: usize,
) -> Result<Vec<EpochRecord>> {
    options.sgd.validate()?;
    options.objective.validate()?;
    model.check_dataset(data)?;
    state.check(model.params())?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let end = options.sgd.epochs.min(state.epoch.saturating_add(max_epochs));
    let mut records = Vec::new();
    while state.epoch < end {
        let epoch = state.epoch;
        let lr = lr_at(epoch, &options.sgd)?;
        let mut rng = epoch_rng(state.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let ex = &data.examples[i];
            let wrong = sample_wrong_candidate(ex.answer, &mut rng);
            total += train_example(model, ex, options, wrong, state, lr)
                .map_err(|e| e.context(format!("epoch {epoch}, example `{}`", ex.id)))?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: total / data.len() as f64,
            lr,
        };
        state.running_loss = total;
        state.epoch += 1;
        state.history.push(record.clone());
        records.push(record);
    }
    Ok(records)
}

/// Trains for every remaining epoch of the schedule.
pub fn train(
    model: &mut Model,
    data: &Dataset,
    options: &TrainOptions,
    state: &mut TrainState,
) -> Result<Vec<EpochRecord>> {
    train_epochs(model, data, options, state, usize::MAX)
}

/// Per-example evaluation detail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub predicted: usize,
    pub gold: usize,
    pub ranking: [usize; NUM_CANDIDATES],
    pub m: [f64; NUM_CANDIDATES],
    pub assignments: Option<[usize; NUM_CANDIDATES]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub p_at_2: f64,
    pub records: Vec<ExampleRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<ExampleRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let hits = records.iter().filter(|r| r.predicted == r.gold).count();
        let top2 = records.iter().filter(|r| r.ranking[..2].contains(&r.gold)).count();
        EvalReport {
            accuracy: hits as f64 / n,
            p_at_2: top2 as f64 / n,
            records,
        }
    }

    pub fn summary(&self) -> String {
        format!("accuracy={:.4} p@2={:.4}", self.accuracy, self.p_at_2)
    }
}

/// Scores every example; work is spread over threads but the records
/// stay in dataset order.
pub fn evaluate(model: &Model, data: &Dataset, pooling: PoolingMode) -> Result<EvalReport> {
    model.check_dataset(data)?;
    let records = data
        .examples
        .par_iter()
        .map(|ex| {
            let out = model
                .infer(ex, pooling)
                .map_err(|e| e.context(format!("example `{}`", ex.id)))?;
            Ok(ExampleRecord {
                id: ex.id.clone(),
                predicted: out.prediction.predicted,
                gold: ex.answer,
                ranking: out.prediction.ranking,
                m: out.alignment.selected,
                assignments: Some(out.alignment.assignments),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_records(records))
}

fn jaccard(a: &HashSet<usize>, b: &HashSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// Ranks candidates by Jaccard overlap with the union of the question
/// items' tokens, never looking at the steps.
pub fn hasty_baseline(data: &Dataset) -> EvalReport {
    let records = data
        .examples
        .iter()
        .map(|ex| {
            let question: HashSet<usize> = ex
                .question_items
                .iter()
                .flat_map(|q| q.tokens.iter().copied())
                .collect();
            let mut m = [0.0; NUM_CANDIDATES];
            for (c, cand) in ex.candidates.iter().take(NUM_CANDIDATES).enumerate() {
                m[c] = jaccard(&cand.iter().copied().collect(), &question);
            }
            let ranking = rank_descending(&m);
            ExampleRecord {
                id: ex.id.clone(),
                predicted: ranking[0],
                gold: ex.answer,
                ranking,
                m,
                assignments: None,
            }
        })
        .collect();
    EvalReport::from_records(records)
}
