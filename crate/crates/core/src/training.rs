//! Two-phase training: language reconstruction with the decoder conditioned
//! on `u^L`, then joint training of the visual encoder, mapping, decoder and
//! grounding head with the language encoder frozen.
//!
//! Each phase stops after `patience` epochs without a validation-CIDEr
//! improvement or at its epoch cap. Training continues from where the first
//! phase stopped; the parameters of the best second-phase epoch are kept
//! alongside the final ones.
//! Batches hold whole videos, up to `batch_size` clips, so gradients flow
//! through the context cell.

use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{Config, TrainConfig};
use crate::dataset::{packed_video_batches, Dataset, VideoSample};
use crate::inference::{corpus_cider, mean_mapping_loss};
use crate::model::{LossWeights, Model, Phase};
use crate::params::{Grads, Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged in {phase:?} epoch {epoch}: {what} is not finite")]
    Divergence { phase: Phase, epoch: usize, what: String },
    #[error("non-finite gradient in block {block}")]
    NonFiniteGradient { block: String },
    #[error("language encoder changed during {phase:?} epoch {epoch}")]
    FreezeViolation { phase: Phase, epoch: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("the training split is empty")]
    EmptyTrainingSet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(t: &TrainConfig) -> Self {
        Self {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
        }
    }
}

/// Adam with bias correction and a step count per block, so blocks that
/// start training late get fresh corrections.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub steps: Vec<u64>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor> = store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                Tensor::zeros(r, c)
            })
            .collect();
        Self {
            hyper,
            steps: vec![0; store.len()],
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates the listed blocks.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, ids: &[ParamId]) -> Result<(), TrainError> {
        for &id in ids {
            if !grads.get(id).is_finite() {
                return Err(TrainError::NonFiniteGradient {
                    block: store.name(id).to_string(),
                });
            }
        }
        let AdamHyper { lr, beta1, beta2, eps } = self.hyper;
        for &id in ids {
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let g = grads.get(id).as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            let p = store.get_mut(id).as_mut_slice();
            for k in 0..g.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub phase: Phase,
    #[serde(rename = "L_S")]
    pub l_s: f64,
    #[serde(rename = "L_M")]
    pub l_m: f64,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    #[serde(rename = "L_G")]
    pub l_g: f64,
    pub total: f64,
    pub val_cider: f64,
    /// Teacher-forced next-token accuracy over the epoch's batches.
    pub accuracy: f64,
    pub language_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub phase: Phase,
    /// Epochs completed in the current phase.
    pub phase_epoch: usize,
    /// Epochs completed overall.
    pub epoch: usize,
    pub best_cider: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
    pub finished: bool,
    /// Hex seed and word position of the shuffling generator.
    pub rng_seed: String,
    pub rng_word_pos: String,
    /// Language encoder hash fixed when the second phase starts.
    pub frozen_hash: Option<String>,
    /// Held-out `L(M)` when the second phase starts.
    pub heldout_lm_start: Option<f64>,
    pub log: Vec<LogEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Finished,
    Halted,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

pub struct Trainer {
    pub config: Config,
    pub model: Model,
    pub adam: Adam,
    pub state: TrainerState,
    rng: ChaCha8Rng,
    best: Option<Vec<Tensor>>,
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.ids().map(|id| store.get(id).clone()).collect()
}

impl Trainer {
    pub fn new(config: Config, data: &Dataset) -> Self {
        let model = Model::new(&config.model, data, config.seed);
        let adam = Adam::new(&model.store, AdamHyper::from(&config.train));
        // shuffling draws from its own stream so it never perturbs init
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);
        let state = TrainerState {
            phase: Phase::Pretrain,
            phase_epoch: 0,
            epoch: 0,
            best_cider: None,
            best_epoch: None,
            since_best: 0,
            finished: false,
            rng_seed: hex(&rng.get_seed()),
            rng_word_pos: rng.get_word_pos().to_string(),
            frozen_hash: None,
            heldout_lm_start: None,
            log: Vec::new(),
        };
        Self {
            config,
            model,
            adam,
            state,
            rng,
            best: None,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, CheckpointError> {
        let seed = unhex(&ckpt.state.rng_seed)
            .ok_or_else(|| CheckpointError::Corruption("bad generator seed".into()))?;
        let pos: u128 = ckpt
            .state
            .rng_word_pos
            .parse()
            .map_err(|_| CheckpointError::Corruption("bad generator position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(pos);
        Ok(Self {
            config: ckpt.config,
            model: ckpt.model,
            adam: ckpt.adam,
            state: ckpt.state,
            rng,
            best: ckpt.best,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.rng_word_pos = self.rng.get_word_pos().to_string();
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            state,
            best: self.best.clone(),
        }
    }

    fn phase_cap(&self, phase: Phase) -> usize {
        match phase {
            Phase::Pretrain => self.config.train.pretrain_epochs,
            Phase::Full => self.config.train.max_epochs,
        }
    }

    /// One pass over the training videos in the current phase.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<LogEntry, TrainError> {
        if data.videos.is_empty() {
            return Err(TrainError::EmptyTrainingSet);
        }
        let phase = self.state.phase;
        let epoch = self.state.epoch + 1;
        let weights = LossWeights::from(&self.config.train);
        let trainable = self.model.trainable(phase);
        let order_seed = self.rng.next_u64();
        let counts: Vec<usize> = data.videos.iter().map(|v| v.clips.len()).collect();
        let batches = packed_video_batches(&counts, self.config.train.batch_size, order_seed);
        let mut sums = [0.0f64; 5];
        let (mut correct, mut tokens) = (0usize, 0usize);
        for batch in &batches {
            let videos: Vec<&VideoSample> = batch.iter().map(|&i| &data.videos[i]).collect();
            let (mut grads, vals) = {
                let mut g = Graph::new(&self.model.store);
                let l = self.model.batch_loss(&mut g, &videos, phase, &weights);
                let vals = [l.ls, l.lm, l.lr, l.lg, l.total].map(|v| g.tape.scalar(v));
                correct += l.correct;
                tokens += l.tokens;
                (g.gradients(l.total), vals)
            };
            if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
                return Err(TrainError::Divergence {
                    phase,
                    epoch,
                    what: ["L_S", "L_M", "L_R", "L_G", "total loss"][i].into(),
                });
            }
            for (s, v) in sums.iter_mut().zip(vals) {
                *s += v;
            }
            grads.clip_global_norm(self.config.train.clip_norm);
            self.adam.step(&mut self.model.store, &grads, &trainable)?;
        }
        let n = batches.len() as f64;
        let val_cider = if data.heldout.is_empty() {
            0.0
        } else {
            corpus_cider(&self.model, &data.vocab, &data.heldout, phase.source())
        };
        let language_hash = self.model.language_hash();
        if phase == Phase::Full && self.state.frozen_hash.as_deref() != Some(language_hash.as_str()) {
            return Err(TrainError::FreezeViolation { phase, epoch });
        }
        Ok(LogEntry {
            epoch,
            phase,
            l_s: sums[0] / n,
            l_m: sums[1] / n,
            l_r: sums[2] / n,
            l_g: sums[3] / n,
            total: sums[4] / n,
            val_cider,
            accuracy: correct as f64 / tokens.max(1) as f64,
            language_hash,
        })
    }

    fn finish_phase(&mut self, data: &Dataset) {
        if self.state.phase == Phase::Pretrain {
            self.best = None;
        }
        self.state.best_cider = None;
        self.state.best_epoch = None;
        self.state.since_best = 0;
        self.state.phase_epoch = 0;
        match self.state.phase {
            Phase::Pretrain => {
                self.state.phase = Phase::Full;
                self.state.frozen_hash = Some(self.model.language_hash());
                self.state.heldout_lm_start = Some(mean_mapping_loss(&self.model, &data.heldout));
            }
            Phase::Full => self.state.finished = true,
        }
    }

    fn phase_done(&self, data: &Dataset) -> bool {
        self.state.phase_epoch >= self.phase_cap(self.state.phase)
            || (!data.heldout.is_empty() && self.state.since_best >= self.config.train.patience)
    }

    /// Trains until both phases finish, or until `halt_after` epochs ran in
    /// this call. With `out` set, writes `last.ckpt` and `log.jsonl` after
    /// every epoch, `best.ckpt` on second-phase improvements and
    /// `final.ckpt` at the end.
    pub fn run(
        &mut self,
        data: &Dataset,
        out: Option<&Path>,
        halt_after: Option<usize>,
        on_epoch: &mut dyn FnMut(&LogEntry),
    ) -> Result<RunStatus, TrainError> {
        self.run_until(data, out, halt_after, None, on_epoch)
    }

    /// Runs only the remainder of the current phase.
    pub fn run_phase(&mut self, data: &Dataset, on_epoch: &mut dyn FnMut(&LogEntry)) -> Result<(), TrainError> {
        let phase = self.state.phase;
        self.run_until(data, None, None, Some(phase), on_epoch).map(|_| ())
    }

    fn run_until(
        &mut self,
        data: &Dataset,
        out: Option<&Path>,
        halt_after: Option<usize>,
        only: Option<Phase>,
        on_epoch: &mut dyn FnMut(&LogEntry),
    ) -> Result<RunStatus, TrainError> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                path: dir.display().to_string(),
                source,
            })?;
        }
        let mut ran = 0;
        loop {
            if self.state.finished {
                break;
            }
            if self.phase_done(data) {
                let phase = self.state.phase;
                self.finish_phase(data);
                if only == Some(phase) {
                    return Ok(RunStatus::Finished);
                }
                continue;
            }
            if halt_after.is_some_and(|h| ran >= h) {
                return Ok(RunStatus::Halted);
            }
            let entry = self.train_epoch(data)?;
            ran += 1;
            self.state.epoch += 1;
            self.state.phase_epoch += 1;
            let improved = self.state.best_cider.is_none_or(|b| entry.val_cider > b);
            if improved {
                self.state.best_cider = Some(entry.val_cider);
                self.state.best_epoch = Some(entry.epoch);
                self.state.since_best = 0;
                self.best = Some(snapshot(&self.model.store));
            } else {
                self.state.since_best += 1;
            }
            on_epoch(&entry);
            self.state.log.push(entry);
            if let Some(dir) = out {
                if improved && self.state.phase == Phase::Full {
                    self.checkpoint().save(&dir.join("best.ckpt"))?;
                }
                self.checkpoint().save(&dir.join("last.ckpt"))?;
                self.write_log(&dir.join("log.jsonl"))?;
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
            self.checkpoint().save(&dir.join("last.ckpt"))?;
            self.write_log(&dir.join("log.jsonl"))?;
        }
        Ok(RunStatus::Finished)
    }

    pub fn log_lines(&self) -> String {
        self.state
            .log
            .iter()
            .map(|e| serde_json::to_string(e).expect("log entry serializes") + "\n")
            .collect()
    }

    fn write_log(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.log_lines()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// First phase only: the language encoder, decoder and grounding head learn
/// to reconstruct sentences from `u^L`.
pub fn pretrain_language_gcn(data: &Dataset, config: &Config) -> Result<Trainer, TrainError> {
    let mut t = Trainer::new(config.clone(), data);
    t.run_phase(data, &mut |_| {})?;
    Ok(t)
}

/// Second phase on top of a pretrained trainer.
pub fn train_full(mut trainer: Trainer, data: &Dataset) -> Result<Trainer, TrainError> {
    if trainer.state.phase == Phase::Pretrain {
        let cap = trainer.config.train.pretrain_epochs;
        trainer.state.phase_epoch = trainer.state.phase_epoch.max(cap);
    }
    trainer.run(data, None, None, &mut |_| {})?;
    Ok(trainer)
}
