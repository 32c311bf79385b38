//! Segment datasets, the rollout loss, AdamW and the two-phase training loop.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::manifold::ConstraintSet;
use crate::models::{FieldKind, FieldSpec, MlpParams, ParamNodes};
use crate::parallel::Parallelism;
use crate::solvers::{solve_segment, solve_segment_taped};
use crate::systems::System;
use crate::tape::{NodeId, Tape};

/// States per training segment: the initial condition and three targets.
pub const SEGMENT_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub states: Vec<Vec<f64>>,
    pub dt: f64,
    /// Index of the source trajectory.
    pub source: usize,
}

impl Segment {
    pub fn initial(&self) -> &[f64] {
        &self.states[0]
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.states[1..]
    }
}

/// Non-overlapping windows of `seg_len` consecutive states; a shorter tail
/// is dropped.
pub fn make_segments(states: &[Vec<f64>], dt: f64, seg_len: usize, source: usize) -> Vec<Segment> {
    if seg_len < 2 {
        return Vec::new();
    }
    states
        .chunks_exact(seg_len)
        .map(|c| Segment {
            states: c.to_vec(),
            dt,
            source,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub split: Split,
    pub segments: Vec<Segment>,
}

impl TrajectoryDataset {
    pub fn from_trajectories(split: Split, trajectories: &[Vec<Vec<f64>>], dt: f64) -> Self {
        let segments = trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, t)| make_segments(t, dt, SEGMENT_LEN, i))
            .collect();
        Self { split, segments }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Mean over the predicted states and their entries of the squared error.
pub fn mse(pred: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err("mse_loss states", target.len(), pred.len()));
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if p.len() != t.len() || p.is_empty() {
            return Err(shape_err("mse_loss state", t.len(), p.len()));
        }
        let s: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        total += s / p.len() as f64;
    }
    Ok(total / pred.len() as f64)
}

/// [`mse`] recorded on a tape.
pub fn mse_loss(tape: &mut Tape, pred: &[NodeId], target: &[Vec<f64>]) -> Result<NodeId> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err("mse_loss states", target.len(), pred.len()));
    }
    let w = 1.0 / pred.len() as f64;
    let mut terms = Vec::with_capacity(pred.len());
    for (&p, t) in pred.iter().zip(target) {
        let tn = tape.constant_vec(t.clone());
        let d = tape.sub(p, tn)?;
        terms.push((tape.mean_squares(d)?, w));
    }
    tape.lin_comb(&terms)
}

/// Rollout loss of one segment, recorded with parameter nodes `p`.
pub fn segment_loss_taped(tape: &mut Tape, field: &FieldSpec, p: &ParamNodes, seg: &Segment) -> Result<NodeId> {
    let u0 = tape.constant_vec(seg.initial().to_vec());
    let f = |t: &mut Tape, u: NodeId| field.record(t, p, u);
    let pred = solve_segment_taped(tape, &f, u0, seg.states.len() - 1, seg.dt)?;
    mse_loss(tape, &pred, seg.targets())
}

pub fn segment_loss(field: &FieldSpec, seg: &Segment) -> Result<f64> {
    let f = |u: &[f64]| field.eval(u);
    let pred = solve_segment(&f, seg.initial(), seg.states.len() - 1, seg.dt)?;
    mse(&pred, seg.targets())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub hyper: AdamW,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimState {
    pub fn new(params: &MlpParams, hyper: AdamW) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self {
            hyper,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update with decoupled weight decay.
    pub fn step(&mut self, params: &mut MlpParams, grads: &[Vec<f64>]) -> Result<()> {
        let mut blocks = params.blocks_mut();
        if grads.len() != blocks.len() || self.m.len() != blocks.len() {
            return Err(shape_err("adamw blocks", blocks.len(), grads.len()));
        }
        for (b, g) in blocks.iter().zip(grads) {
            if b.len() != g.len() {
                return Err(shape_err("adamw block", b.len(), g.len()));
            }
        }
        self.step += 1;
        let h = self.hyper;
        let c1 = 1.0 - h.beta1.powi(self.step as i32);
        let c2 = 1.0 - h.beta2.powi(self.step as i32);
        for (k, block) in blocks.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in block.iter_mut().enumerate() {
                let g = grads[k][i];
                m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
                v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= h.lr * h.weight_decay * *w;
                *w -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: FieldKind,
    pub hidden: Vec<usize>,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamW,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: FieldKind::Pnde,
            hidden: vec![64, 64],
            pretrain_epochs: 300,
            finetune_epochs: 100,
            batch_size: 64,
            seed: 0,
            optimizer: AdamW::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let FieldKind::Snde { gamma } = self.kind {
            if !(gamma >= 0.0) {
                return Err(Error::Config(format!("gamma must be non-negative, got {gamma}")));
            }
        }
        Ok(())
    }

    pub fn widths(&self, dim: usize) -> Vec<usize> {
        let mut w = vec![dim];
        w.extend(&self.hidden);
        w.push(dim);
        w
    }

    pub fn init_params(&self, dim: usize) -> Result<MlpParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(STREAM_INIT);
        MlpParams::init(&self.widths(dim), &mut rng)
    }
}

const STREAM_INIT: u64 = 0;
const STREAM_PRETRAIN: u64 = 1;
const STREAM_FINETUNE: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub wall_ms: u64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("phase,epoch,train_loss,valid_loss,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:e},{:e},{}\n",
            r.phase.name(),
            r.epoch,
            r.train_loss,
            r.valid_loss,
            r.wall_ms
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    /// Weights with the lowest validation loss seen, the start included.
    pub params: MlpParams,
    pub best_valid: f64,
    pub log: Vec<LogRow>,
}

/// Training driver bound to one system and one pair of datasets.
pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub train: &'a TrajectoryDataset,
    pub valid: &'a TrajectoryDataset,
    pub parallelism: Parallelism,
    train_constraints: Vec<Option<Arc<dyn ConstraintSet>>>,
    valid_constraints: Vec<Option<Arc<dyn ConstraintSet>>>,
}

fn constraint_table(system: &System, data: &TrajectoryDataset) -> Result<Vec<Option<Arc<dyn ConstraintSet>>>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    if system.constraints_depend_on_state() {
        data.segments.iter().map(|s| system.constraints_for(s.initial())).collect()
    } else {
        let shared = system.constraints_for(data.segments[0].initial())?;
        Ok(vec![shared; data.len()])
    }
}

impl<'a> Trainer<'a> {
    pub fn new(
        system: &System,
        config: &'a TrainConfig,
        train: &'a TrajectoryDataset,
        valid: &'a TrajectoryDataset,
        parallelism: Parallelism,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set has no segments".into()));
        }
        if valid.is_empty() {
            return Err(Error::Config("validation set has no segments".into()));
        }
        let dim = system.dim();
        for seg in train.segments.iter().chain(&valid.segments) {
            if seg.states.iter().any(|s| s.len() != dim) {
                return Err(shape_err("dataset state", dim, seg.states[0].len()));
            }
        }
        Ok(Self {
            config,
            train,
            valid,
            parallelism,
            train_constraints: constraint_table(system, train)?,
            valid_constraints: constraint_table(system, valid)?,
        })
    }

    fn field(&self, kind: FieldKind, params: &Arc<MlpParams>, c: &Option<Arc<dyn ConstraintSet>>) -> Result<FieldSpec> {
        let c = if kind.needs_constraints() { c.clone() } else { None };
        FieldSpec::new(kind, Arc::clone(params), c)
    }

    /// Mean segment loss over the validation set.
    pub fn validation_loss(&self, params: &MlpParams, kind: FieldKind) -> Result<f64> {
        let params = Arc::new(params.clone());
        let losses = self.parallelism.map(&self.valid.segments, |i, seg| {
            let f = self.field(kind, &params, &self.valid_constraints[i])?;
            segment_loss(&f, seg)
        });
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / self.valid.len() as f64)
    }

    /// Loss and summed parameter gradient over `batch` (segment indices).
    pub fn batch_gradient(&self, params: &MlpParams, kind: FieldKind, batch: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let shared = Arc::new(params.clone());
        let results = self.parallelism.map(batch, |_, &i| -> Result<(f64, Vec<Vec<f64>>)> {
            let field = self.field(kind, &shared, &self.train_constraints[i])?;
            let mut tape = Tape::new();
            let nodes = params.leaves(&mut tape);
            let loss = segment_loss_taped(&mut tape, &field, &nodes, &self.train.segments[i])?;
            let value = tape.value(loss).as_slice()[0];
            let grads = tape.backward(loss)?;
            Ok((value, nodes.blocks().iter().map(|&b| grads.wrt(b).into_vec()).collect()))
        });
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        let mut sum: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        for r in results {
            let (loss, g) = r?;
            total += loss;
            for (acc, gb) in sum.iter_mut().zip(&g) {
                for (a, x) in acc.iter_mut().zip(gb) {
                    *a += x;
                }
            }
        }
        for acc in &mut sum {
            acc.iter_mut().for_each(|a| *a *= scale);
        }
        Ok((total * scale, sum))
    }

    /// Train `params` as a `kind` field for `epochs` epochs.
    pub fn run_phase(&self, params: MlpParams, kind: FieldKind, phase: Phase, epochs: usize) -> Result<PhaseOutcome> {
        let stream = match phase {
            Phase::Pretrain => STREAM_PRETRAIN,
            Phase::Finetune => STREAM_FINETUNE,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        let mut params = params;
        let mut opt = OptimState::new(&params, self.config.optimizer);
        let mut best_valid = self.validation_loss(&params, kind)?;
        let mut best = params.clone();
        let mut log = Vec::with_capacity(epochs);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let start = Instant::now();

        for epoch in 1..=epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0;
            for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
                let diverged = || Error::Training {
                    phase: phase.name(),
                    epoch,
                    batch: b,
                };
                let (loss, grads) = match self.batch_gradient(&params, kind, batch) {
                    Ok(r) => r,
                    Err(Error::Divergence { .. }) | Err(Error::NonFinite { .. }) => return Err(diverged()),
                    Err(e) => return Err(e),
                };
                if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                    return Err(diverged());
                }
                opt.step(&mut params, &grads)?;
                epoch_loss += loss;
                batches += 1;
            }
            let valid = match self.validation_loss(&params, kind) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::Divergence { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            if valid < best_valid {
                best_valid = valid;
                best = params.clone();
            }
            log.push(LogRow {
                phase,
                epoch,
                train_loss: epoch_loss / batches as f64,
                valid_loss: valid,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
        Ok(PhaseOutcome {
            params: best,
            best_valid,
            log,
        })
    }

    /// Unconstrained pretraining from the seeded initialization.
    pub fn pretrain(&self, dim: usize) -> Result<PhaseOutcome> {
        let init = self.config.init_params(dim)?;
        self.run_phase(init, FieldKind::Nde, Phase::Pretrain, self.config.pretrain_epochs)
    }

    /// Fine-tuning of pretrained weights as the configured kind.
    pub fn finetune(&self, pretrained: &MlpParams) -> Result<PhaseOutcome> {
        self.run_phase(pretrained.clone(), self.config.kind, Phase::Finetune, self.config.finetune_epochs)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub log: Vec<LogRow>,
}

/// Both phases: NDE pretraining, then fine-tuning as `config.kind`.
pub fn train(
    system: &System,
    config: &TrainConfig,
    train_set: &TrajectoryDataset,
    valid_set: &TrajectoryDataset,
    parallelism: Parallelism,
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(system, config, train_set, valid_set, parallelism)?;
    let pre = trainer.pretrain(system.dim())?;
    let fine = trainer.finetune(&pre.params)?;
    let mut log = pre.log;
    log.extend(fine.log);
    Ok(TrainOutcome {
        params: fine.params,
        log,
    })
}
