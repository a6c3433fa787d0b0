//! Optimizers and the training loop.
//!
//! Each epoch re-mines its training units with an epoch-derived seed, deals
//! them into batches and takes one optimizer step per batch on the summed
//! (or optionally averaged) batch loss.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{check_dim, Error, Result};
use crate::losses::{self, sq_dist, Reduction, SclConfig, SetLabel};
use crate::mining::{self, GenuineSet, ImposterSet, SampleSet};
use crate::model::{init_model, FreezeMask, Gradients, Mlp, Trace};
use crate::seed;

const EPOCH_STREAM: u64 = 0x4550_4f43;

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// Adam moment accumulators, one buffer per parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(buffer_lens: &[usize]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: buffer_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: buffer_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &Mlp) -> Self {
        let lens: Vec<usize> = model
            .layers()
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        AdamState::new(&lens)
    }

    /// One bias-corrected Adam update over raw buffers. Buffers with
    /// `frozen[k] == true` are left untouched, accumulators included.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], frozen: &[bool], lr: f64) -> Result<()> {
        check_dim(self.m.len(), params.len())?;
        check_dim(self.m.len(), grads.len())?;
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            check_dim(self.m[k].len(), p.len())?;
            check_dim(self.m[k].len(), g.len())?;
        }
        self.t += 1;
        let t = self.t as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if frozen.get(k).copied().unwrap_or(false) {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

fn frozen_buffers(model: &Mlp, freeze: FreezeMask) -> Vec<bool> {
    (0..model.n_layers())
        .flat_map(|k| [freeze.is_frozen(k); 2])
        .collect()
}

pub fn adam_step(model: &mut Mlp, grads: &Gradients, state: &mut AdamState, lr: f64, freeze: FreezeMask) -> Result<()> {
    model.validate_freeze(freeze)?;
    let frozen = frozen_buffers(model, freeze);
    let grads = grads.buffers();
    state.step(&mut model.buffers_mut(), &grads, &frozen, lr)
}

/// `θ ← θ − lr·g`
pub fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_dim(params.len(), grads.len())?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

pub fn sgd_step(model: &mut Mlp, grads: &Gradients, lr: f64, freeze: FreezeMask) -> Result<()> {
    model.validate_freeze(freeze)?;
    let frozen = frozen_buffers(model, freeze);
    let grads = grads.buffers();
    let mut params = model.buffers_mut();
    check_dim(params.len(), grads.len())?;
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !frozen[k] {
            sgd_update(p, g, lr)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Scl,
    Cl,
    Tl,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Cl, LossKind::Tl, LossKind::Scl];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Scl => "SCL",
            LossKind::Cl => "CL",
            LossKind::Tl => "TL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Training units (sets, pairs or triplets) per batch.
    pub batch_size: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub cl_margin: f64,
    pub tl_margin: f64,
    /// Units mined per subject and epoch.
    pub per_subject: usize,
    pub seed: u64,
    pub frozen_layers: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub reduction: Reduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::paper_regime()
    }
}

impl TrainConfig {
    /// Adam at 3e-6 for 30 epochs, batches of 50, first layer frozen.
    pub fn paper_regime() -> Self {
        TrainConfig {
            loss: LossKind::Scl,
            optimizer: OptimizerKind::Adam,
            learning_rate: 3e-6,
            epochs: 30,
            batch_size: 50,
            alpha1: 2.0,
            alpha2: 3.1,
            cl_margin: 2.0,
            tl_margin: 0.4,
            per_subject: 4,
            seed: 0,
            frozen_layers: 1,
            hidden: vec![32],
            embedding_dim: 16,
            reduction: Reduction::Sum,
        }
    }

    /// Same losses and batching with a step size a freshly initialized
    /// desk-scale network can learn with.
    pub fn synthetic_regime() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 100,
            frozen_layers: 0,
            ..TrainConfig::paper_regime()
        }
    }

    pub fn scl(&self) -> SclConfig {
        SclConfig {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
        }
    }

    pub fn freeze(&self) -> FreezeMask {
        FreezeMask::new(self.frozen_layers)
    }

    /// `[input, hidden..., embedding]`
    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.embedding_dim))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.per_subject == 0 {
            return Err(Error::Config("per_subject must be >= 1".into()));
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if self.frozen_layers > self.hidden.len() + 1 {
            return Err(Error::Config(format!(
                "frozen_layers = {} exceeds the {} layers of the model",
                self.frozen_layers,
                self.hidden.len() + 1
            )));
        }
        self.scl().validate()?;
        losses::validate_margin("cl_margin", self.cl_margin)?;
        losses::validate_margin("tl_margin", self.tl_margin)
    }
}

// ---------------------------------------------------------------------------
// Log
// ---------------------------------------------------------------------------

/// Per-epoch record.
///
/// For SCL and CL, `mean_genuine` / `mean_imposter` average the loss over
/// genuine- and imposter-labelled units. Triplets carry no such label, so for
/// TL they hold the mean anchor-positive and anchor-negative squared distances.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub sum_loss: f64,
    pub mean_genuine: f64,
    pub mean_imposter: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn loss_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.sum_loss).collect()
    }

    /// `epoch,sum_loss,mean_genuine,mean_imposter,seconds`
    pub fn write_csv<W: Write>(&self, writer: W) -> std::io::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(["epoch", "sum_loss", "mean_genuine", "mean_imposter", "seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.sum_loss.to_string(),
                e.mean_genuine.to_string(),
                e.mean_imposter.to_string(),
                e.seconds.to_string(),
            ])?;
        }
        w.flush()
    }
}

// ---------------------------------------------------------------------------
// Loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum Unit<'a> {
    Set {
        label: SetLabel,
        a: &'a Sample,
        b: &'a Sample,
        c: Option<&'a Sample>,
    },
    Pair {
        label: SetLabel,
        first: &'a Sample,
        second: &'a Sample,
    },
    Triplet {
        anchor: &'a Sample,
        positive: &'a Sample,
        negative: &'a Sample,
    },
}

fn set_unit<'a, S: SampleSet<'a>>(s: &S) -> Unit<'a> {
    let (a, b, c) = s.slots();
    Unit::Set {
        label: S::LABEL,
        a,
        b,
        c,
    }
}

fn epoch_batches<'a>(ds: &'a Dataset, cfg: &TrainConfig, epoch_seed: u64) -> Result<Vec<Vec<Unit<'a>>>> {
    let flatten = |batches: Vec<mining::Batch<Unit<'a>, Unit<'a>>>| {
        batches
            .into_iter()
            .map(|b| b.genuine.into_iter().chain(b.imposter).collect())
            .collect()
    };
    Ok(match cfg.loss {
        LossKind::Scl => {
            let genuine = mining::build_genuine_sets(ds, cfg.per_subject, epoch_seed);
            let imposter = mining::build_imposter_sets(ds, cfg.per_subject, epoch_seed)?;
            flatten(mining::make_batches(
                genuine.iter().map(set_unit).collect(),
                imposter.iter().map(set_unit).collect(),
                cfg.batch_size,
                epoch_seed,
            )?)
        }
        LossKind::Cl => {
            let (genuine, imposter): (Vec<_>, Vec<_>) = mining::build_cl_pairs(ds, cfg.per_subject, epoch_seed)?
                .into_iter()
                .map(|p| Unit::Pair {
                    label: p.label,
                    first: p.first,
                    second: p.second,
                })
                .partition(|u| matches!(u, Unit::Pair { label: SetLabel::Genuine, .. }));
            flatten(mining::make_batches(genuine, imposter, cfg.batch_size, epoch_seed)?)
        }
        LossKind::Tl => {
            let triplets = mining::build_triplets(ds, cfg.per_subject, epoch_seed)?
                .into_iter()
                .map(|t| Unit::Triplet {
                    anchor: t.anchor,
                    positive: t.positive,
                    negative: t.negative,
                })
                .collect();
            mining::shuffled_chunks(triplets, cfg.batch_size, epoch_seed)?
        }
    })
}

/// What a unit contributes to the epoch log.
enum Tally {
    Genuine(f64),
    Imposter(f64),
    Triplet { pos: f64, neg: f64 },
}

enum UnitKind {
    Labelled(SetLabel),
    Triplet { pos: f64, neg: f64 },
}

struct UnitOutcome {
    value: f64,
    tally: Tally,
}

fn run_unit(
    model: &Mlp,
    unit: &Unit<'_>,
    cfg: &TrainConfig,
    scale: f64,
    freeze: FreezeMask,
    grads: &mut Gradients,
) -> Result<UnitOutcome> {
    let fwd = |s: &Sample| -> Result<(Vec<f64>, Trace)> { model.forward(&s.embedding) };
    let back = |trace: &Trace, g: &[f64], grads: &mut Gradients| -> Result<()> {
        if scale == 1.0 {
            model.backward_into(trace, g, freeze, grads)
        } else {
            let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
            model.backward_into(trace, &scaled, freeze, grads)
        }
    };
    let (loss, kind) = match *unit {
        Unit::Set { label, a, b, c } => {
            let (ea, ta) = fwd(a)?;
            let (eb, tb) = fwd(b)?;
            let ec = c.map(fwd).transpose()?;
            let loss = losses::scl_set_loss(label, &ea, &eb, ec.as_ref().map(|(e, _)| e.as_slice()), &cfg.scl())?;
            back(&ta, &loss.grad_a, grads)?;
            back(&tb, &loss.grad_b, grads)?;
            if let (Some((_, tc)), Some(gc)) = (&ec, &loss.grad_c) {
                back(tc, gc, grads)?;
            }
            (loss, UnitKind::Labelled(label))
        }
        Unit::Pair { label, first, second } => {
            let (e1, t1) = fwd(first)?;
            let (e2, t2) = fwd(second)?;
            let loss = losses::contrastive_loss(&e1, &e2, label, cfg.cl_margin)?;
            back(&t1, &loss.grad_a, grads)?;
            back(&t2, &loss.grad_b, grads)?;
            (loss, UnitKind::Labelled(label))
        }
        Unit::Triplet {
            anchor,
            positive,
            negative,
        } => {
            let (ea, ta) = fwd(anchor)?;
            let (ep, tp) = fwd(positive)?;
            let (en, tn) = fwd(negative)?;
            let loss = losses::triplet_loss(&ea, &ep, &en, cfg.tl_margin)?;
            back(&ta, &loss.grad_a, grads)?;
            back(&tp, &loss.grad_b, grads)?;
            back(&tn, loss.grad_c.as_ref().expect("triplet slot"), grads)?;
            let (pos, neg) = (sq_dist(&ea, &ep), sq_dist(&ea, &en));
            (loss, UnitKind::Triplet { pos, neg })
        }
    };
    if !loss.value.is_finite() {
        return Err(Error::Numeric(format!("non-finite unit loss {}", loss.value)));
    }
    let tally = match kind {
        UnitKind::Labelled(SetLabel::Genuine) => Tally::Genuine(loss.value),
        UnitKind::Labelled(SetLabel::Imposter) => Tally::Imposter(loss.value),
        UnitKind::Triplet { pos, neg } => Tally::Triplet { pos, neg },
    };
    Ok(UnitOutcome {
        value: loss.value,
        tally,
    })
}

/// Reduced SCL loss of one batch and its parameter gradients, computed
/// exactly as a training step does.
pub fn scl_batch_loss(
    model: &Mlp,
    genuine: &[GenuineSet<'_>],
    imposter: &[ImposterSet<'_>],
    cfg: &TrainConfig,
) -> Result<(f64, Gradients)> {
    let freeze = cfg.freeze();
    model.validate_freeze(freeze)?;
    let units: Vec<Unit<'_>> = genuine
        .iter()
        .map(set_unit)
        .chain(imposter.iter().map(set_unit))
        .collect();
    let scale = cfg.reduction.scale(units.len());
    let mut grads = Gradients::zeros_like(model);
    let mut total = 0.0;
    for unit in &units {
        total += run_unit(model, unit, cfg, scale, freeze, &mut grads)?.value;
    }
    Ok((total * scale, grads))
}

/// Initial parameters `train` starts from for this config.
pub fn initial_model(input_dim: usize, cfg: &TrainConfig) -> Result<Mlp> {
    init_model(&cfg.layer_dims(input_dim), cfg.seed)
}

/// Trains a freshly initialized model (see [`initial_model`]).
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, TrainLog)> {
    cfg.validate()?;
    let model = initial_model(ds.dim(), cfg)?;
    train_model(model, ds, cfg)
}

/// Trains `model` in place of a fresh initialization.
pub fn train_model(mut model: Mlp, ds: &Dataset, cfg: &TrainConfig) -> Result<(Mlp, TrainLog)> {
    cfg.validate()?;
    check_dim(model.input_dim(), ds.dim())?;
    let freeze = cfg.freeze();
    model.validate_freeze(freeze)?;
    let mut adam = AdamState::for_model(&model);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let epoch_seed = seed::derive(cfg.seed, EPOCH_STREAM, epoch as u64);
        let batches = epoch_batches(ds, cfg, epoch_seed)?;

        let mut sum_loss = 0.0;
        let (mut gen_sum, mut gen_n, mut imp_sum, mut imp_n) = (0.0, 0usize, 0.0, 0usize);
        for batch in &batches {
            let scale = cfg.reduction.scale(batch.len());
            let mut grads = Gradients::zeros_like(&model);
            for unit in batch {
                let out = run_unit(&model, unit, cfg, scale, freeze, &mut grads)?;
                sum_loss += out.value;
                match out.tally {
                    Tally::Genuine(v) => {
                        gen_sum += v;
                        gen_n += 1;
                    }
                    Tally::Imposter(v) => {
                        imp_sum += v;
                        imp_n += 1;
                    }
                    Tally::Triplet { pos, neg } => {
                        gen_sum += pos;
                        imp_sum += neg;
                        gen_n += 1;
                        imp_n += 1;
                    }
                }
            }
            match cfg.optimizer {
                OptimizerKind::Adam => adam_step(&mut model, &grads, &mut adam, cfg.learning_rate, freeze)?,
                OptimizerKind::Sgd => sgd_step(&mut model, &grads, cfg.learning_rate, freeze)?,
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let entry = EpochLog {
            epoch: epoch + 1,
            sum_loss,
            mean_genuine: mean(gen_sum, gen_n),
            mean_imposter: mean(imp_sum, imp_n),
            seconds: started.elapsed().as_secs_f64(),
        };
        if !entry.sum_loss.is_finite() {
            return Err(Error::Numeric(format!("epoch {} loss is not finite", epoch + 1)));
        }
        log::debug!(
            "epoch {:>4} loss {:.6} genuine {:.6} imposter {:.6}",
            entry.epoch,
            entry.sum_loss,
            entry.mean_genuine,
            entry.mean_imposter
        );
        log.epochs.push(entry);
    }
    Ok((model, log))
}
