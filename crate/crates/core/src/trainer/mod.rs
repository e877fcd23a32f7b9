//! Stochastic training of the bridge approximator: draw a step and an
//! intermediate state per example, score the approximator's prediction,
//! and take one Adam step.

mod batching;
mod config;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;

pub use batching::plan_batches;
pub use config::{config_fingerprint, TrainConfig};

use crate::approximator::{ConditioningBundle, NeuralApproximator, PackedBatch, ParamGroup};
use crate::bridge::{sample_marginal, BridgeSchedule};
use crate::checkpoint::Checkpoint;
use crate::error::{ensure, Error, Result};
use crate::losses::{row_loss_grad, LossConfig};
use crate::optim::{clip_global_norm, AdamState};
use crate::prior::{PairedExample, PriorEncoder};
use crate::seeding::{stream_rng, streams};
use crate::sequence::TokenSequence;

/// Which parameters a step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Everything trains, conditioning included.
    Joint,
    /// Base network only, run without conditioning.
    BasePretrain,
    /// Base frozen; only the conditioning path trains.
    Adapt,
}

impl Phase {
    pub fn at(cfg: &TrainConfig, step: u64) -> Phase {
        match cfg.base_pretrain_steps {
            0 => Phase::Joint,
            n if step <= n => Phase::BasePretrain,
            _ => Phase::Adapt,
        }
    }

    fn trains(self, group: ParamGroup) -> bool {
        match self {
            Phase::Joint => true,
            Phase::BasePretrain => group == ParamGroup::Base,
            Phase::Adapt => group == ParamGroup::Conditioning,
        }
    }

    fn conditioned(self) -> bool {
        self != Phase::BasePretrain
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: NeuralApproximator,
    pub encoder: PriorEncoder,
    pub schedule: BridgeSchedule,
    pub adam: AdamState,
    pub encoder_adam: AdamState,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub best_valid: Option<f64>,
}

impl TrainState {
    /// Fresh state. With `freeze_prior` the encoder is fitted on `train`
    /// here and never changes afterwards.
    pub fn init(cfg: &TrainConfig, train: &[PairedExample]) -> Result<Self> {
        cfg.validate()?;
        ensure!(!train.is_empty(), "training split is empty");
        let vocab = train[0].y.vocab_size();
        let feat = train[0].s_features.ncols();
        let mut rng = stream_rng(cfg.seed, streams::MODEL_INIT, 0);
        let mut model = NeuralApproximator::new(cfg.model.clone(), vocab, feat, &mut rng)?;
        if !cfg.zero_init_conditioning {
            model.randomize_conditioning(cfg.conditioning_init_scale, &mut rng);
        }
        let encoder = if cfg.freeze_prior {
            PriorEncoder::fit(train, &cfg.encoder)?.0
        } else {
            PriorEncoder::untrained(feat, vocab)
        };
        let lens: Vec<usize> = model.params.tensors().iter().map(|(_, _, t)| t.len()).collect();
        Ok(Self {
            adam: AdamState::for_shapes(&lens),
            encoder_adam: AdamState::for_shapes(&[encoder.weights.len(), encoder.bias.len()]),
            model,
            encoder,
            schedule: BridgeSchedule::cosine(cfg.steps)?,
            step: 0,
            best_valid: None,
        })
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Sampled bridge step per example.
    pub timesteps: Vec<usize>,
}

pub struct Trainer {
    cfg: TrainConfig,
    loss: LossConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, loss: LossConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        loss.validate()?;
        ensure!(
            state.schedule.steps() == cfg.steps,
            "state has {} bridge steps, config asks for {}",
            state.schedule.steps(),
            cfg.steps
        );
        Ok(Self { cfg, loss, state })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    /// One update on `batch`. All randomness comes from the step index, so
    /// a resumed run replays the same draws.
    pub fn train_step(&mut self, batch: &[&PairedExample]) -> Result<StepReport> {
        ensure!(!batch.is_empty(), "empty batch");
        let k = self.state.step + 1;
        let phase = Phase::at(&self.cfg, k);
        let steps = self.cfg.steps;
        let mut rng = stream_rng(self.cfg.seed, streams::TRAIN_STEP, k);

        let mut states = Vec::with_capacity(batch.len());
        let mut conds = Vec::with_capacity(batch.len());
        let mut timesteps = Vec::with_capacity(batch.len());
        for ex in batch {
            let x = if self.cfg.freeze_prior {
                self.state.encoder.encode_strict(ex.s_features.view(), ex.mask())?
            } else {
                self.state.encoder.encode_example(ex)?
            };
            let t = rng.gen_range(0..steps);
            states.push(sample_marginal(&x, &ex.y, t, &self.state.schedule, &mut rng)?);
            conds.push(ConditioningBundle::new(
                ex.s_features.clone(),
                ex.mask().to_vec(),
                t,
                steps,
            )?);
            timesteps.push(t);
        }
        let items: Vec<_> = states.iter().map(|s| &s.z).zip(&conds).collect();
        let packed = PackedBatch::new(&items)?;
        let cache = self.state.model.forward(&packed, phase.conditioned())?;

        let targets: Vec<&TokenSequence> = batch.iter().map(|ex| &ex.y).collect();
        let (losses, dprobs) = batch_loss_grad(
            &self.loss,
            &self.state.schedule,
            &packed,
            &states,
            &targets,
            &cache.probs,
        );
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !loss.is_finite() {
            let mut hist = vec![0usize; steps];
            timesteps.iter().for_each(|&t| hist[t] += 1);
            return Err(Error::NonFinite {
                step: k,
                detail: format!(
                    "loss {loss}; t histogram {hist:?}; max logit {}",
                    self.state.model.max_logit(&cache)
                ),
            });
        }
        let grads = self.state.model.backward(&packed, &cache, &dprobs);

        let lr = self.cfg.noam.rate(k);
        let model = &mut self.state.model;
        let active: Vec<bool> = model
            .params
            .tensors()
            .iter()
            .map(|(_, g, _)| phase.trains(*g))
            .collect();
        let mut grads = grads;
        let mut gslices: Vec<&mut [f64]> = grads
            .tensors_mut()
            .into_iter()
            .map(|(_, _, t)| t.as_slice_mut().expect("contiguous gradient"))
            .collect();
        let grad_norm = clip_global_norm(&mut gslices, &active, self.cfg.grad_clip);
        let gviews: Vec<&[f64]> = gslices.into_iter().map(|g| &*g).collect();
        let mut pslices: Vec<&mut [f64]> = model
            .params
            .tensors_mut()
            .into_iter()
            .map(|(_, _, t)| t.as_slice_mut().expect("contiguous parameter"))
            .collect();
        self.state
            .adam
            .update(&self.cfg.adam, lr, &mut pslices, &gviews, &active);

        if !self.cfg.freeze_prior {
            self.encoder_step(batch, lr);
        }
        self.state.step = k;
        Ok(StepReport {
            step: k,
            loss,
            lr,
            grad_norm,
            timesteps,
        })
    }

    /// Cross-entropy step for a jointly trained prior encoder.
    fn encoder_step(&mut self, batch: &[&PairedExample], lr: f64) {
        let rows: usize = batch.iter().map(|ex| ex.len()).sum();
        let feat = self.state.encoder.feature_dim();
        let mut s = Array2::zeros((rows, feat));
        let mut targets = Vec::with_capacity(rows);
        let mut weights = Vec::with_capacity(rows);
        let mut r = 0;
        for ex in batch {
            for i in 0..ex.len() {
                s.row_mut(r).assign(&ex.s_features.row(i));
                let real = ex.y.is_real(i);
                targets.push(if real { ex.y.get(i) } else { 0 });
                weights.push(if real { 1.0 } else { 0.0 });
                r += 1;
            }
        }
        if weights.iter().all(|&w| w == 0.0) {
            return;
        }
        let (_, mut dw, mut db) = self.state.encoder.loss_grad(s.view(), &targets, &weights);
        let enc = &mut self.state.encoder;
        let mut g: Vec<&mut [f64]> = vec![dw.as_slice_mut().unwrap(), db.as_slice_mut().unwrap()];
        clip_global_norm(&mut g, &[true, true], self.cfg.grad_clip);
        let gv: Vec<&[f64]> = g.into_iter().map(|v| &*v).collect();
        let mut p: Vec<&mut [f64]> = vec![enc.weights.as_slice_mut().unwrap(), enc.bias.as_slice_mut().unwrap()];
        self.state
            .encoder_adam
            .update(&self.cfg.adam, lr, &mut p, &gv, &[true, true]);
        enc.mark_fitted();
    }

    /// Mean per-example loss on `examples` with fixed per-example draws, so
    /// successive evaluations are directly comparable.
    pub fn validation_loss(&self, examples: &[PairedExample]) -> Result<f64> {
        let limit = self.cfg.valid_limit.unwrap_or(usize::MAX).min(examples.len());
        let examples = &examples[..limit];
        ensure!(!examples.is_empty(), "validation split is empty");
        let lengths: Vec<usize> = examples.iter().map(|e| e.len()).collect();
        let chunks = contiguous_chunks(&lengths, self.cfg.batch_size_tokens);
        let phase = Phase::at(&self.cfg, self.state.step.max(1));
        let parts: Vec<Result<(f64, usize)>> = chunks
            .par_iter()
            .map(|range| {
                let mut states = Vec::new();
                let mut conds = Vec::new();
                for i in range.clone() {
                    let ex = &examples[i];
                    let mut rng = stream_rng(self.cfg.seed, streams::VALIDATION, i as u64);
                    let x = self.state.encoder.encode_example(ex)?;
                    let t = rng.gen_range(0..self.cfg.steps);
                    states.push(sample_marginal(&x, &ex.y, t, &self.state.schedule, &mut rng)?);
                    conds.push(ConditioningBundle::new(
                        ex.s_features.clone(),
                        ex.mask().to_vec(),
                        t,
                        self.cfg.steps,
                    )?);
                }
                let items: Vec<_> = states.iter().map(|s| &s.z).zip(&conds).collect();
                let packed = PackedBatch::new(&items)?;
                let probs = self.state.model.forward(&packed, phase.conditioned())?.probs;
                let targets: Vec<&TokenSequence> = range.clone().map(|i| &examples[i].y).collect();
                let (losses, _) = batch_loss_grad(&self.loss, &self.state.schedule, &packed, &states, &targets, &probs);
                Ok((losses.iter().sum::<f64>(), losses.len()))
            })
            .collect();
        let mut total = 0.0;
        let mut count = 0;
        for p in parts {
            let (l, c) = p?;
            total += l;
            count += c;
        }
        Ok(total / count.max(1) as f64)
    }
}

/// Per-example mean loss over real positions, and the gradient of the
/// batch mean of those at the output probabilities.
fn batch_loss_grad(
    cfg: &LossConfig,
    schedule: &BridgeSchedule,
    packed: &PackedBatch,
    states: &[crate::bridge::BridgeState],
    targets: &[&TokenSequence],
    probs: &Array2<f64>,
) -> (Vec<f64>, Array2<f64>) {
    let k = probs.ncols();
    let mut dprobs = Array2::zeros(probs.dim());
    let b = states.len() as f64;
    let mut g = vec![0.0; k];
    let mut losses = Vec::with_capacity(states.len());
    for (e, (st, y)) in states.iter().zip(targets).enumerate() {
        let beta = schedule.beta(st.t);
        let keep = st.keep.as_deref();
        let real = st.z.real_count().max(1) as f64;
        let mut total = 0.0;
        for (i, r) in packed.example_rows(e).enumerate() {
            if !packed.is_real(r) {
                continue;
            }
            let phi = probs.row(r);
            let phi = phi.as_slice().expect("contiguous probabilities");
            let v = keep.is_none_or(|kv| kv[i]);
            total += row_loss_grad(cfg, beta, st.z.get(i), y.get(i), v, phi, &mut g);
            dprobs
                .row_mut(r)
                .assign(&Array1::from_iter(g.iter().map(|x| x / (real * b))));
        }
        losses.push(total / real);
    }
    (losses, dprobs)
}

/// Consecutive index ranges holding at most `budget` tokens each.
pub(crate) fn contiguous_chunks(lengths: &[usize], budget: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut tokens = 0;
    for (i, &len) in lengths.iter().enumerate() {
        if i > start && tokens + len > budget {
            out.push(start..i);
            start = i;
            tokens = 0;
        }
        tokens += len;
    }
    if start < lengths.len() {
        out.push(start..lengths.len());
    }
    out
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    /// Reports for the steps run by this call.
    pub steps: Vec<StepReport>,
    /// `(step, validation loss)` for every evaluation, including step 0.
    pub valid: Vec<(u64, f64)>,
}

pub const METRICS_HEADER: &str = "step,loss,lr";
pub const VALID_HEADER: &str = "step,valid_loss";
pub const TIMING_HEADER: &str = "step,wall_seconds";

/// Runs the full schedule of epochs, or continues `resume` to the end of it.
///
/// With `out_dir`, writes `metrics.csv`, `valid.csv`, `timing.csv`,
/// `last.ckpt` and `best.ckpt` there. Resuming keeps the rows up to the
/// checkpoint's step and appends the rest, so the files match an
/// uninterrupted run.
pub fn fit(
    cfg: &TrainConfig,
    loss: &LossConfig,
    train: &[PairedExample],
    valid: &[PairedExample],
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    loss.validate()?;
    ensure!(!train.is_empty(), "training split is empty");
    ensure!(!valid.is_empty(), "validation split is empty");
    let max_len = train.iter().chain(valid).map(|e| e.len()).max().unwrap_or(0);
    cfg.check_lengths(max_len)?;
    let fingerprint = config_fingerprint(cfg, loss);

    let (state, fresh) = match resume {
        Some(ck) => {
            ensure!(
                ck.fingerprint == fingerprint,
                "checkpoint fingerprint {} does not match config {}",
                ck.fingerprint,
                fingerprint
            );
            (ck.state, false)
        }
        None => (TrainState::init(cfg, train)?, true),
    };
    let start = state.step;
    let mut trainer = Trainer::new(cfg.clone(), *loss, state)?;

    let mut sinks = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(Sinks::open(dir, start)?)
        }
        None => None,
    };
    let snapshot = |t: &Trainer| Checkpoint::new(cfg.clone(), *loss, t.state.clone());
    let save = |ck: &Checkpoint, name: &str| -> Result<()> {
        match out_dir {
            Some(dir) => ck.save(&dir.join(name)),
            None => Ok(()),
        }
    };

    let mut valid_hist = Vec::new();
    let mut best = None;
    if fresh {
        let v = trainer.validation_loss(valid)?;
        valid_hist.push((0, v));
        trainer.state.best_valid = Some(v);
        if let Some(s) = sinks.as_mut() {
            s.valid(0, v)?;
        }
        let ck = snapshot(&trainer);
        save(&ck, "best.ckpt")?;
        best = Some(ck);
    } else if let Some(dir) = out_dir {
        let path = dir.join("best.ckpt");
        if path.exists() {
            best = Some(Checkpoint::load(&path, Some(&fingerprint))?);
        }
    }

    let lengths: Vec<usize> = train.iter().map(|e| e.len()).collect();
    let per_epoch = plan_batches(&lengths, cfg.batch_size_tokens, cfg.seed, 0).len() as u64;
    let mut total = per_epoch * cfg.epochs as u64;
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let clock = Instant::now();
    let mut reports = Vec::new();
    let mut plan_epoch = u64::MAX;
    let mut plan = Vec::new();
    for k in start + 1..=total {
        let epoch = (k - 1) / per_epoch;
        if epoch != plan_epoch {
            plan = plan_batches(&lengths, cfg.batch_size_tokens, cfg.seed, epoch);
            plan_epoch = epoch;
        }
        let batch: Vec<&PairedExample> = plan[((k - 1) % per_epoch) as usize]
            .iter()
            .map(|&i| &train[i])
            .collect();
        let report = trainer.train_step(&batch)?;
        if let Some(s) = sinks.as_mut() {
            s.step(&report, clock.elapsed().as_secs_f64())?;
        }
        if k % 100 == 0 {
            log::info!("step {k}/{total} loss {:.5} lr {:.3e}", report.loss, report.lr);
        }
        reports.push(report);

        let last = k == total;
        if last || (cfg.eval_every > 0 && k % cfg.eval_every == 0) {
            let v = trainer.validation_loss(valid)?;
            log::info!("step {k} validation loss {v:.5}");
            valid_hist.push((k, v));
            if let Some(s) = sinks.as_mut() {
                s.valid(k, v)?;
            }
            if trainer.state.best_valid.is_none_or(|b| v < b) {
                trainer.state.best_valid = Some(v);
                let ck = snapshot(&trainer);
                save(&ck, "best.ckpt")?;
                best = Some(ck);
            }
        }
        if !last && cfg.checkpoint_every > 0 && k % cfg.checkpoint_every == 0 {
            save(&snapshot(&trainer), "last.ckpt")?;
        }
    }
    let last = snapshot(&trainer);
    save(&last, "last.ckpt")?;
    if let Some(s) = sinks.as_mut() {
        s.flush()?;
    }
    Ok(FitOutcome {
        best: best.unwrap_or_else(|| last.clone()),
        last,
        steps: reports,
        valid: valid_hist,
    })
}

/// CSV outputs of a training run.
struct Sinks {
    metrics: (PathBuf, File),
    valid: (PathBuf, File),
    timing: (PathBuf, File),
}

impl Sinks {
    fn open(dir: &Path, resume_step: u64) -> Result<Self> {
        Ok(Self {
            metrics: open_csv(&dir.join("metrics.csv"), METRICS_HEADER, resume_step)?,
            valid: open_csv(&dir.join("valid.csv"), VALID_HEADER, resume_step)?,
            timing: open_csv(&dir.join("timing.csv"), TIMING_HEADER, resume_step)?,
        })
    }

    fn step(&mut self, r: &StepReport, wall: f64) -> Result<()> {
        write_line(&mut self.metrics, &format!("{},{:e},{:e}", r.step, r.loss, r.lr))?;
        write_line(&mut self.timing, &format!("{},{wall:.3}", r.step))
    }

    fn valid(&mut self, step: u64, v: f64) -> Result<()> {
        write_line(&mut self.valid, &format!("{step},{v:e}"))
    }

    fn flush(&mut self) -> Result<()> {
        for (p, f) in [&mut self.metrics, &mut self.valid, &mut self.timing] {
            f.flush().map_err(|e| Error::io(p.clone(), e))?;
        }
        Ok(())
    }
}

fn write_line(sink: &mut (PathBuf, File), line: &str) -> Result<()> {
    writeln!(sink.1, "{line}").map_err(|e| Error::io(sink.0.clone(), e))
}

/// Opens a step-keyed CSV for appending. Rows beyond `keep_through` are
/// dropped; a fresh run (`keep_through == 0`) starts with just the header.
fn open_csv(path: &Path, header: &str, keep_through: u64) -> Result<(PathBuf, File)> {
    let mut kept = vec![header.to_string()];
    if keep_through > 0 && path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let step: u64 = line
                .split(',')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad row {line:?}")))?;
            if step <= keep_through {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for line in &kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok((path.to_path_buf(), f))
}

#[cfg(test)]
mod tests;
