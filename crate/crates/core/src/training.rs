//! Siamese training with antenna masking.
//!
//! Each step draws a batch of index pairs `(n, k)` with a pseudo-distance
//! `d_{n,k}`, draws one antenna subset for the whole batch, predicts both
//! members of every pair through the same parameters, and minimizes
//! `(d_{n,k} − ‖p_n − p_k‖)²` averaged over the batch with AdamW under a
//! linear warmup.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::metrics::{
    sample_training_pairs, sample_training_pairs_from_matrix, PairwiseMatrix,
    PseudoDistanceProvider, TrainingPair,
};
use crate::models::{AntennaSubset, Network};
use crate::sim::Snapshot;
use crate::tensor::{backward, ParamSet, Tape, Tensor, Var};

/// Antenna-count policy during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Every batch sees a uniform random subset of exactly `n_t` antennas.
    FixedN(usize),
    /// Every batch first draws `n_t` uniformly from `1..=a_max`.
    RandomN,
}

impl Strategy {
    pub fn validate(&self, a_max: usize) -> Result<()> {
        match *self {
            Strategy::FixedN(n) if n < 1 || n > a_max => Err(Error::Config(format!(
                "strategy fixed-n:{n} needs 1 ≤ n_t ≤ a_max = {a_max}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn sample(&self, a_max: usize, rng: &mut impl Rng) -> Result<AntennaSubset> {
        match *self {
            Strategy::FixedN(n) => sample_subset_fixed_n(a_max, n, rng),
            Strategy::RandomN => sample_subset_random_n(a_max, rng),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::FixedN(n) => write!(f, "fixed-n:{n}"),
            Strategy::RandomN => f.write_str("random-n"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random-n" {
            return Ok(Strategy::RandomN);
        }
        s.strip_prefix("fixed-n:")
            .and_then(|n| n.parse().ok())
            .map(Strategy::FixedN)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy {s:?}; expected \"fixed-n:<k>\" or \"random-n\""
                ))
            })
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Uniform `n_t`-subset of `0..a_max`.
pub fn sample_subset_fixed_n(a_max: usize, n_t: usize, rng: &mut impl Rng) -> Result<AntennaSubset> {
    if n_t < 1 || n_t > a_max {
        return Err(Error::Config(format!(
            "subset size {n_t} outside 1..={a_max}"
        )));
    }
    AntennaSubset::from_unsorted(index::sample(rng, a_max, n_t).into_vec(), a_max)
}

/// Size uniform on `1..=a_max`, then a uniform subset of that size.
pub fn sample_subset_random_n(a_max: usize, rng: &mut impl Rng) -> Result<AntennaSubset> {
    if a_max < 1 {
        return Err(Error::Config("a_max must be at least 1".into()));
    }
    let n = rng.random_range(1..=a_max);
    sample_subset_fixed_n(a_max, n, rng)
}

/// Counter-based generator: the stream for `(seed, label, position)` does
/// not depend on how many values other positions consumed.
pub fn stream_rng(seed: u64, label: &str, position: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, label, 0));
    rng.set_stream(position);
    rng
}

/// `(d − ‖p_n − p_k‖)²` for one pair.
pub fn siamese_loss(p_n: [f64; 2], p_k: [f64; 2], d: f64) -> f64 {
    let dist = ((p_n[0] - p_k[0]).powi(2) + (p_n[1] - p_k[1]).powi(2)).sqrt();
    (d - dist).powi(2)
}

/// Mean of the per-pair losses on the tape. `p_n` and `p_k` are `[B, 2]`.
/// `weights` defaults to uniform.
pub fn siamese_batch_loss(
    tape: &mut Tape,
    p_n: Var,
    p_k: Var,
    distances: &[f64],
    weights: Option<&[f64]>,
) -> Result<Var> {
    let b = distances.len();
    if tape.shape(p_n) != [b, 2] || tape.shape(p_k) != [b, 2] {
        return Err(Error::shape("siamese loss", tape.shape(p_n), &[b, 2]));
    }
    if distances.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::Validation("pseudo-distances must be nonnegative".into()));
    }
    let diff = tape.sub(p_n, p_k)?;
    let norm = tape.row_norm(diff)?;
    let d = tape.constant(Tensor::new([b], distances.to_vec())?);
    let r = tape.sub(d, norm)?;
    let sq = tape.square(r);
    let w = weights.map(<[f64]>::to_vec).unwrap_or_else(|| vec![1.0; b]);
    tape.weighted_mean(sq, w)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

/// One AdamW update in place: decoupled decay `p ← p − lr·wd·p`, then the
/// bias-corrected adaptive step.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamW,
) -> Result<()> {
    for (path, p) in params.iter() {
        match grads.get(path) {
            Some(g) if g.shape() == p.shape() => {}
            Some(g) => return Err(Error::Usage(format!(
                "gradient for {path} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            ))),
            None => return Err(Error::Usage(format!("missing gradient for {path}"))),
        }
    }
    if grads.len() != params.len() {
        return Err(Error::Usage("gradients name parameters that do not exist".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (path, p) in params.iter_mut() {
        let g = grads[path].data();
        let m = state
            .m
            .entry(path.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(path.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let decay = 1.0 - lr * hp.weight_decay;
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            let update = (*mi / c1) / ((*vi / c2).sqrt() + hp.eps);
            *pi = *pi * decay - lr * update;
        }
    }
    Ok(())
}

/// `base_lr · min(1, (step + 1) / warmup_steps)`.
pub fn warmup_lr(step: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    let ramp = (step + 1) as f64 / warmup_steps.max(1) as f64;
    base_lr * ramp.min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Pairs per batch.
    pub batch_size: usize,
    pub epochs: usize,
    /// Pairs drawn per epoch; `None` uses one pair per snapshot.
    pub pairs_per_epoch: Option<usize>,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Abort when the batch loss exceeds this value (NaN/Inf always abort).
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::RandomN,
            batch_size: 64,
            epochs: 10,
            pairs_per_epoch: None,
            base_lr: 3e-4,
            warmup_steps: 500,
            weight_decay: 1e-4,
            seed: 0,
            divergence_threshold: 1e12,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, a_max: usize) -> Result<()> {
        self.strategy.validate(a_max)?;
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config("batch_size and epochs must be at least 1".into()));
        }
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(Error::Config("pairs_per_epoch must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("base_lr and weight_decay must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        self.pairs_per_epoch.unwrap_or(samples).div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }
}

/// Supplies `(n, k, d_{n,k})` pairs.
pub trait PairSource {
    fn len(&self) -> usize;
    fn sample_pairs(&self, count: usize, seed: u64) -> Result<Vec<TrainingPair>>;
}

impl PairSource for PseudoDistanceProvider {
    fn len(&self) -> usize {
        PseudoDistanceProvider::len(self)
    }

    fn sample_pairs(&self, count: usize, seed: u64) -> Result<Vec<TrainingPair>> {
        sample_training_pairs(self, count, seed)
    }
}

impl PairSource for PairwiseMatrix {
    fn len(&self) -> usize {
        PairwiseMatrix::len(self)
    }

    fn sample_pairs(&self, count: usize, seed: u64) -> Result<Vec<TrainingPair>> {
        sample_training_pairs_from_matrix(self, count, seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// What one optimization step saw.
#[derive(Clone, Debug)]
pub struct StepTrace<'a> {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub pairs: &'a [TrainingPair],
    /// Subset applied to the first member of every pair.
    pub subset_n: &'a AntennaSubset,
    /// Subset applied to the second member of every pair.
    pub subset_k: &'a AntennaSubset,
}

#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Per-pair loss weight; uniform when absent.
    pub pair_weight: Option<&'a dyn Fn(&TrainingPair) -> f64>,
    pub observer: Option<&'a mut dyn FnMut(&StepTrace<'_>)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub losses: Vec<LossRecord>,
    pub optimizer: OptimizerState,
}

/// Batch loss for the given pairs; returns the tape and the loss node.
fn batch_loss(
    network: &Network,
    params: &ParamSet,
    snapshots: &[Snapshot],
    pairs: &[TrainingPair],
    subset_n: &AntennaSubset,
    subset_k: &AntennaSubset,
    weights: Option<&[f64]>,
) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let left: Vec<&[Tensor]> = pairs.iter().map(|p| snapshots[p.n].cirs.as_slice()).collect();
    let right: Vec<&[Tensor]> = pairs.iter().map(|p| snapshots[p.k].cirs.as_slice()).collect();
    let d: Vec<f64> = pairs.iter().map(|p| p.distance).collect();
    let (p_n, p_k) = if subset_n == subset_k {
        // one pass over both branches
        let both: Vec<&[Tensor]> = left.iter().chain(&right).copied().collect();
        let out = network.forward_batch(&mut tape, &bound, &both, subset_n)?;
        split_rows(&mut tape, out, pairs.len())?
    } else {
        (
            network.forward_batch(&mut tape, &bound, &left, subset_n)?,
            network.forward_batch(&mut tape, &bound, &right, subset_k)?,
        )
    };
    let loss = siamese_batch_loss(&mut tape, p_n, p_k, &d, weights)?;
    Ok((tape, loss))
}

/// Splits `[2b, 2]` into its first and last `b` rows.
fn split_rows(tape: &mut Tape, x: Var, b: usize) -> Result<(Var, Var)> {
    let first = tape.gather_rows(x, &(0..b).collect::<Vec<_>>())?;
    let second = tape.gather_rows(x, &(b..2 * b).collect::<Vec<_>>())?;
    Ok((first, second))
}

/// Mean Siamese loss over `pairs` with every antenna present.
pub fn evaluate_loss(
    network: &Network,
    params: &ParamSet,
    snapshots: &[Snapshot],
    pairs: &[TrainingPair],
) -> Result<f64> {
    let full = AntennaSubset::full(network.a_max());
    let mut total = 0.0;
    for chunk in pairs.chunks(256) {
        let (tape, loss) = batch_loss(network, params, snapshots, chunk, &full, &full, None)?;
        total += tape.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Runs the full schedule and returns the trained parameters and the loss
/// curve. Deterministic given `config` and the initial parameters.
pub fn train(
    network: &Network,
    init: &ParamSet,
    snapshots: &[Snapshot],
    pairs: &dyn PairSource,
    config: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    let a_max = network.a_max();
    config.validate(a_max)?;
    if snapshots.len() < 2 || pairs.len() != snapshots.len() {
        return Err(Error::Config(format!(
            "need at least 2 snapshots with one pseudo-distance row each, got {} snapshots and {} rows",
            snapshots.len(),
            pairs.len()
        )));
    }
    if let Some(s) = snapshots.iter().find(|s| s.cirs.len() != a_max) {
        return Err(Error::Config(format!(
            "snapshot at t = {} has {} antennas, model expects {a_max}",
            s.timestamp,
            s.cirs.len()
        )));
    }
    let hp = AdamW {
        weight_decay: config.weight_decay,
        ..AdamW::default()
    };
    let steps_per_epoch = config.steps_per_epoch(snapshots.len());
    let mut params = init.clone();
    let mut state = OptimizerState::default();
    let mut losses = Vec::with_capacity(config.epochs * steps_per_epoch);
    let mut step: u64 = 0;
    for epoch in 0..config.epochs {
        let pool = pairs.sample_pairs(
            steps_per_epoch * config.batch_size,
            crate::derive_seed(config.seed, "pairs", epoch as u64),
        )?;
        for batch in pool.chunks(config.batch_size) {
            let subset = config
                .strategy
                .sample(a_max, &mut stream_rng(config.seed, "subset", step))?;
            let weights: Option<Vec<f64>> = hooks
                .pair_weight
                .map(|w| batch.iter().map(w).collect());
            let (tape, loss) = batch_loss(
                network,
                &params,
                snapshots,
                batch,
                &subset,
                &subset,
                weights.as_deref(),
            )?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() || value > config.divergence_threshold {
                return Err(Error::Divergence { step, loss: value });
            }
            let grads = backward(&tape, loss, &params)?;
            drop(tape);
            let lr = warmup_lr(step, config.warmup_steps, config.base_lr);
            adamw_step(&mut params, &grads, &mut state, lr, &hp)?;
            if let Some(obs) = hooks.observer.as_mut() {
                obs(&StepTrace {
                    step,
                    lr,
                    loss: value,
                    pairs: batch,
                    subset_n: &subset,
                    subset_k: &subset,
                });
            }
            losses.push(LossRecord {
                step,
                lr,
                loss: value,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        params,
        losses,
        optimizer: state,
    })
}

pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "step,lr,loss").map_err(|e| Error::io(path, e))?;
    for r in losses {
        writeln!(w, "{},{},{}", r.step, r.lr, r.loss).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
