//! Minibatch ADAM training with CSV loss logs and periodic checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use emavio_tensor::{Adam, Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{Config, LossConfig, ModelConfig, Precision};
use crate::data::SequenceSample;
use crate::losses::{frame_loss, poses_tensor, sequence_loss, total_loss};
use crate::model::{forward_sequence, Model};
use crate::{Error, Result};

pub const LOSS_LOG: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Loss of one step, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// Optimizer steps taken before this batch.
    pub step: u64,
    pub frame_loss: f64,
    pub seq_loss: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

pub fn log_header(use_multistate: bool) -> &'static str {
    if use_multistate {
        "step,frame_loss,seq_loss,total,grad_norm,wall_ms"
    } else {
        "step,frame_loss,total,grad_norm,wall_ms"
    }
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{}", self.step, self.frame_loss);
        if let Some(s) = self.seq_loss {
            write!(row, ",{s}").unwrap();
        }
        write!(row, ",{},{},{}", self.total, self.grad_norm, self.wall_ms).unwrap();
        row
    }
}

/// Per-sequence losses built on `g`; returns `(frame, seq, total)` vars.
pub fn sample_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    sample: &SequenceSample,
    loss: &LossConfig,
    step: u64,
) -> Result<(Var, Option<Var>, Var)> {
    let pred = forward_sequence(g, store, cfg, sample)?;
    let gt = g.constant(poses_tensor(&sample.gt_rel)?);
    let frame = frame_loss(g, pred, gt, loss.lambda_rot_frame)?;
    let seq = if loss.use_multistate {
        Some(sequence_loss(g, pred, &sample.gt_seq, loss.lambda_rot_seq)?)
    } else {
        None
    };
    let total = total_loss(g, frame, seq, step)?;
    Ok((frame, seq, total))
}

/// Mean `(frame, seq, total)` losses over `samples`, without gradients.
pub fn dataset_loss(model: &Model, samples: &[SequenceSample], loss: &LossConfig) -> Result<(f64, Option<f64>, f64)> {
    if samples.is_empty() {
        return Err(Error::Contract("loss of an empty dataset".into()));
    }
    let (mut f, mut s, mut t) = (0.0, 0.0, 0.0);
    for sample in samples {
        let mut g = Graph::new();
        let (fv, sv, tv) = sample_loss(&mut g, &model.store, &model.cfg, sample, loss, 0)?;
        f += g.value(fv).item();
        s += sv.map_or(0.0, |v| g.value(v).item());
        t += g.value(tv).item();
    }
    let n = samples.len() as f64;
    Ok((f / n, loss.use_multistate.then_some(s / n), t / n))
}

/// Sample indices of batch `step`: consecutive slices of a per-epoch
/// permutation seeded by `(seed, epoch)`, so any step can be recomputed
/// without replaying earlier ones.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, dataset_len: usize) -> Vec<usize> {
    let n = dataset_len as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|k| {
            let global = step * batch_size as u64 + k;
            let (epoch, pos) = (global / n, (global % n) as usize);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(epoch + 2);
                let mut perm: Vec<usize> = (0..dataset_len).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[pos]
        })
        .collect()
}

pub struct Trainer {
    pub cfg: Config,
    pub model: Model,
    /// Optimizer steps taken so far.
    pub step: u64,
    adam: Adam,
}

impl Trainer {
    /// Fresh model initialized from `cfg.seed`.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut model = Model::new(&cfg.model, cfg.seed)?;
        if cfg.precision == Precision::F32 {
            model.store.round_to_f32();
        }
        Ok(Self::with_model(cfg, model, 0))
    }

    /// Continues from a checkpoint whose model config must match `cfg`.
    pub fn resume(cfg: &Config, path: &Path) -> Result<Self> {
        cfg.validate()?;
        let ckpt = checkpoint::load_matching(path, &cfg.model)?;
        Ok(Self::with_model(cfg, ckpt.model, ckpt.step))
    }

    pub fn with_model(cfg: &Config, model: Model, step: u64) -> Self {
        let t = &cfg.train;
        Self {
            cfg: cfg.clone(),
            model,
            step,
            adam: Adam::new(t.lr, t.beta1, t.beta2, t.eps),
        }
    }

    /// One ADAM step on the next batch.
    pub fn train_step(&mut self, samples: &[SequenceSample]) -> Result<StepLog> {
        if samples.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let start = Instant::now();
        let step = self.step;
        let batch = batch_indices(self.cfg.seed, step, self.cfg.train.batch_size, samples.len());
        let mut g = Graph::new();
        let (mut frames, mut seqs, mut totals) = (Vec::new(), Vec::new(), Vec::new());
        for &i in &batch {
            let (f, s, t) = sample_loss(
                &mut g,
                &self.model.store,
                &self.model.cfg,
                &samples[i],
                &self.cfg.loss,
                step,
            )?;
            frames.push(g.value(f).item());
            seqs.extend(s.map(|v| g.value(v).item()));
            totals.push(t);
        }
        let stacked = g.concat(&totals, 0)?;
        let loss = g.mean(stacked);
        let total = g.value(loss).item();
        if !total.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("batch loss is {total}"),
            });
        }
        g.backward(loss, &mut self.model.store)?;
        let grad_norm = self.model.store.grad_norm();
        if !grad_norm.is_finite() {
            self.model.store.zero_grads();
            return Err(Error::Divergence {
                step,
                msg: format!("gradient norm is {grad_norm}"),
            });
        }
        self.adam.step(&mut self.model.store)?;
        if self.cfg.precision == Precision::F32 {
            self.model.store.round_to_f32();
        }
        self.step += 1;
        let n = batch.len() as f64;
        Ok(StepLog {
            step,
            frame_loss: frames.iter().sum::<f64>() / n,
            seq_loss: self.cfg.loss.use_multistate.then(|| seqs.iter().sum::<f64>() / n),
            total,
            grad_norm,
            wall_ms: if self.cfg.train.log_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }

    /// Trains until `cfg.train.steps` optimizer steps have been taken,
    /// writing `loss.csv` and `checkpoint.bin` into `out_dir`. Rows of an
    /// existing log at or beyond the current step are replaced, so a resumed
    /// run reproduces the log of an uninterrupted one.
    ///
    /// On divergence the error is returned and the last checkpoint written
    /// before it is left in place.
    pub fn run(&mut self, samples: &[SequenceSample], out_dir: &Path) -> Result<Vec<StepLog>> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join(LOSS_LOG);
        let header = log_header(self.cfg.loss.use_multistate);
        let mut log = String::from(header);
        log.push('\n');
        if self.step > 0 {
            if let Ok(old) = fs::read_to_string(&log_path) {
                let mut lines = old.lines();
                if lines.next() == Some(header) {
                    for line in lines {
                        let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                        if row_step.is_some_and(|s| s < self.step) {
                            log.push_str(line);
                            log.push('\n');
                        }
                    }
                }
            }
        }
        let ckpt_path = out_dir.join(CHECKPOINT_FILE);
        let every = self.cfg.train.checkpoint_every;
        let mut rows = Vec::new();
        while self.step < self.cfg.train.steps {
            let result = self.train_step(samples);
            let row = match result {
                Ok(row) => row,
                Err(e) => {
                    write_atomic(&log_path, &log)?;
                    return Err(e);
                }
            };
            log.push_str(&row.csv_row());
            log.push('\n');
            rows.push(row);
            if every > 0 && self.step.is_multiple_of(every) {
                checkpoint::save(&ckpt_path, self.step, &self.model)?;
                write_atomic(&log_path, &log)?;
            }
        }
        checkpoint::save(&ckpt_path, self.step, &self.model)?;
        write_atomic(&log_path, &log)?;
        Ok(rows)
    }
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// First step whose batch loss is below `fraction` of the first logged one.
pub fn first_step_below(rows: &[StepLog], fraction: f64) -> Option<u64> {
    let first = rows.first()?.total;
    rows.iter().find(|r| r.total < fraction * first).map(|r| r.step)
}
