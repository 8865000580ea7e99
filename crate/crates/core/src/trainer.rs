//! Dynamic pre-training (random variant alternation over one shared weight
//! set) and all-in-one / single-task fine-tuning.
//!
//! Every optimization step activates exactly one depth variant, runs one
//! forward/backward pass, and applies one Adam update to the single
//! parameter set and its single set of moments. A run of N steps therefore
//! performs N passes while producing both usable variants; the pass ledger
//! records this.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Model, VariantConfig};
use crate::autodiff::Tape;
use crate::checkpoint::{self, TrainerMeta};
use crate::degrade::{compose_pretrain_sample, CorruptionRecipe};
use crate::error::{Error, Result};
use crate::imageio::to_model_batch;
use crate::params::ParamStore;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrain,
    FinetuneAllInOne,
    FinetuneSingle,
}

/// Binary branch-activation flag: which variant runs this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantFlag {
    Large,
    Small,
}

impl VariantFlag {
    pub fn indicator(self) -> u8 {
        match self {
            VariantFlag::Large => 1,
            VariantFlag::Small => 0,
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            VariantFlag::Large => "L",
            VariantFlag::Small => "S",
        }
    }

    pub fn config(self, base_channels: usize) -> VariantConfig {
        match self {
            VariantFlag::Large => VariantConfig::dynet_l(base_channels),
            VariantFlag::Small => VariantConfig::dynet_s(base_channels),
        }
    }
}

/// Draw the active variant: Large with probability `p`, else Small.
pub fn select_variant(rng: &mut ChaCha12Rng, p: f64) -> Result<VariantFlag> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config("variant_probability", "must be in [0, 1]"));
    }
    Ok(if rng.gen::<f64>() < p {
        VariantFlag::Large
    } else {
        VariantFlag::Small
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Optimization steps for pre-training.
    pub iterations: u64,
    /// Epochs for fine-tuning.
    pub epochs: u64,
    /// Probability of activating DyNet-L on a given step.
    pub variant_probability: f64,
    /// Fixed variant for single-task fine-tuning ("L" or "S").
    pub fixed_variant: Option<String>,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Square crop fed to the model during fine-tuning.
    pub crop: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            batch_size: 32,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            iterations: 1_000_000,
            epochs: 120,
            variant_probability: 0.5,
            fixed_variant: None,
            checkpoint_every: 0,
            seed: 0,
            crop: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.variant_probability) {
            return Err(Error::config("variant_probability", "must be in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if self.crop % 8 != 0 || self.crop == 0 {
            return Err(Error::config("crop", "must be a positive multiple of 8"));
        }
        if self.phase == Phase::FinetuneSingle {
            match self.fixed_variant.as_deref() {
                Some("L") | Some("S") => {}
                other => {
                    return Err(Error::config(
                        "fixed_variant",
                        format!("single-task fine-tuning needs \"L\" or \"S\", got {other:?}"),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Adam with one moment pair per parameter tensor; moment layout mirrors the
/// parameter store exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let m = store.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        let v = store.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            step: 0,
            m,
            v,
        }
    }

    /// One update over the full parameter set; entries without a gradient
    /// (not touched by the active variant's graph) are left untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f64>>]) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads[id.index()].as_ref() else {
                continue;
            };
            let i = id.index();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let w = store.value_mut(id);
            let (ws, ms, vs, gs) = (
                w.as_slice_mut().unwrap(),
                m.as_slice_mut().unwrap(),
                v.as_slice_mut().unwrap(),
                g.as_slice().unwrap(),
            );
            for j in 0..ws.len() {
                ms[j] = self.beta1 * ms[j] + (1.0 - self.beta1) * gs[j];
                vs[j] = self.beta2 * vs[j] + (1.0 - self.beta2) * gs[j] * gs[j];
                let mhat = ms[j] / bc1;
                let vhat = vs[j] / bc2;
                ws[j] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Step counts per activated variant. `total_passes` is the testable form of
/// the training-cost claim: one alternating run of N steps performs N
/// forward/backward passes yet yields both variants, where separate training
/// would need 2N.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct PassLedger {
    pub steps_large: u64,
    pub steps_small: u64,
}

impl PassLedger {
    pub fn total_passes(&self) -> u64 {
        self.steps_large + self.steps_small
    }

    /// Passes a pair of separately trained variants would have consumed for
    /// the same per-variant step counts.
    pub fn separate_training_passes(&self) -> u64 {
        2 * self.total_passes()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunningLoss {
    window: VecDeque<f64>,
    cap: usize,
}

impl RunningLoss {
    pub fn new(cap: usize) -> Self {
        RunningLoss {
            window: VecDeque::new(),
            cap: cap.max(1),
        }
    }

    pub fn push(&mut self, loss: f64) {
        if self.window.len() == self.cap {
            self.window.pop_front();
        }
        self.window.push_back(loss);
    }

    pub fn mean(&self) -> f64 {
        if self.window.is_empty() {
            f64::NAN
        } else {
            self.window.iter().sum::<f64>() / self.window.len() as f64
        }
    }
}

/// Mutable training state: shared weights, one optimizer state, counters.
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub iteration: u64,
    pub cfg: TrainConfig,
    pub ledger: PassLedger,
    pub running: RunningLoss,
}

impl TrainState {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(&model.store, &cfg);
        Ok(TrainState {
            model,
            adam,
            iteration: 0,
            cfg,
            ledger: PassLedger::default(),
            running: RunningLoss::new(50),
        })
    }

    /// Resume from a checkpoint that carries optimizer moments.
    pub fn resume(path: impl AsRef<Path>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ckpt = checkpoint::read(&path)?;
        let meta = ckpt.manifest.trainer.clone().ok_or_else(|| {
            Error::Checkpoint("checkpoint has no trainer state to resume from".into())
        })?;
        let variant = VariantConfig::dynet_l(ckpt.manifest.arch.base_channels);
        let model = checkpoint::assemble(&ckpt, &variant)?;
        let mut adam = Adam::new(&model.store, &cfg);
        adam.step = meta.adam_step;
        adam.m = ckpt.opt_m.ok_or_else(|| {
            Error::Checkpoint("checkpoint is missing first-moment tensors".into())
        })?;
        adam.v = ckpt.opt_v.ok_or_else(|| {
            Error::Checkpoint("checkpoint is missing second-moment tensors".into())
        })?;
        Ok(TrainState {
            model,
            adam,
            iteration: meta.iteration,
            cfg,
            ledger: PassLedger::default(),
            running: RunningLoss::new(50),
        })
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = TrainerMeta {
            iteration: self.iteration,
            seed: self.cfg.seed,
            adam_step: self.adam.step,
        };
        checkpoint::save(&self.model, path, Some((&meta, &self.adam.m, &self.adam.v)))
    }

    /// RNG for one iteration, derived from the run seed so resumed runs
    /// replay the identical stream.
    fn iter_rng(&self, iteration: u64) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(iteration.wrapping_add(1));
        rng
    }
}

/// One optimization step: forward under the flagged variant, L1 loss over
/// all pixels, one shared update. `batch` holds (input, target) images in
/// [0, 255].
pub fn pretrain_step(
    state: &mut TrainState,
    batch: &[(Array3<f64>, Array3<f64>)],
    flag: VariantFlag,
) -> Result<f64> {
    let inputs: Vec<Array3<f64>> = batch.iter().map(|(i, _)| i.clone()).collect();
    let targets: Vec<Array3<f64>> = batch.iter().map(|(_, t)| t.clone()).collect();
    let input = to_model_batch(&inputs)?;
    let target = to_model_batch(&targets)?;
    let variant = flag.config(state.model.arch.base_channels);

    let (loss_val, grads) = {
        let mut tape = Tape::with_params(&state.model.store);
        let x = tape.leaf(input);
        let y = state.model.forward_on_tape(&mut tape, x, &variant)?;
        let loss = tape.l1_loss(y, &target);
        let loss_val = tape.value(loss).iter().next().copied().unwrap();
        if !loss_val.is_finite() {
            return Err(Error::Train {
                iteration: state.iteration,
                flag: flag.indicator(),
                message: format!("non-finite loss {loss_val}"),
            });
        }
        let all = tape.backward(loss);
        let mut per_param: Vec<Option<ArrayD<f64>>> = vec![None; state.model.store.len()];
        for id in state.model.store.ids() {
            if let Some(var) = tape.param_var(id) {
                per_param[id.index()] = all[var].clone();
            }
        }
        (loss_val, per_param)
    };

    state.adam.apply(&mut state.model.store, &grads);
    match flag {
        VariantFlag::Large => state.ledger.steps_large += 1,
        VariantFlag::Small => state.ledger.steps_small += 1,
    }
    state.iteration += 1;
    state.running.push(loss_val);
    Ok(loss_val)
}

/// Structured training-log record; one JSON line per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: u64,
    pub flag: u8,
    pub variant: String,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

pub struct TrainLog<W: Write> {
    writer: W,
    pub records: u64,
}

impl<W: Write> TrainLog<W> {
    pub fn new(writer: W) -> Self {
        TrainLog { writer, records: 0 }
    }

    pub fn append(&mut self, rec: &TrainLogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.writer, rec)?;
        self.writer.write_all(b"\n")?;
        self.records += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations_run: u64,
    pub final_iteration: u64,
    pub first_running_loss: f64,
    pub final_running_loss: f64,
    pub ledger: PassLedger,
    pub checkpoints_written: Vec<PathBuf>,
}

/// Dynamic pre-training over a corpus of clean patches.
pub fn run_pretrain<W: Write>(
    state: &mut TrainState,
    corpus: &[Array3<f64>],
    recipe: &CorruptionRecipe,
    log: &mut TrainLog<W>,
    ckpt_dir: Option<&Path>,
) -> Result<RunSummary> {
    if corpus.is_empty() {
        return Err(Error::Manifest("pre-training corpus is empty".into()));
    }
    let started = Instant::now();
    let mut first_running = f64::NAN;
    let mut checkpoints = Vec::new();
    let target_iters = state.cfg.iterations;
    let mut run = 0u64;

    while state.iteration < target_iters {
        let iter = state.iteration;
        let mut rng = state.iter_rng(iter);
        let flag = select_variant(&mut rng, state.cfg.variant_probability)?;

        let mut batch = Vec::with_capacity(state.cfg.batch_size);
        for bi in 0..state.cfg.batch_size {
            let patch = &corpus[rng.gen_range(0..corpus.len())];
            let sample_seed = rng.gen::<u64>() ^ (bi as u64);
            let sample = compose_pretrain_sample(patch, &recipe.with_seed(sample_seed))?;
            batch.push((sample.input, sample.target));
        }

        let loss = pretrain_step(state, &batch, flag)?;
        if run == 0 {
            first_running = loss;
        }
        run += 1;
        log.append(&TrainLogRecord {
            iteration: state.iteration,
            flag: flag.indicator(),
            variant: flag.letter().to_string(),
            loss,
            lr: state.cfg.learning_rate,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })?;

        if let Some(dir) = ckpt_dir {
            let every = state.cfg.checkpoint_every;
            if every > 0 && state.iteration % every == 0 && state.iteration < target_iters {
                let p = dir.join(format!("checkpoint_{:08}.ckpt", state.iteration));
                state.save_checkpoint(&p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(dir) = ckpt_dir {
        let p = dir.join("checkpoint_final.ckpt");
        state.save_checkpoint(&p)?;
        checkpoints.push(p);
    }
    Ok(RunSummary {
        iterations_run: run,
        final_iteration: state.iteration,
        first_running_loss: first_running,
        final_running_loss: state.running.mean(),
        ledger: state.ledger,
        checkpoints_written: checkpoints,
    })
}

/// A supervised (degraded, clean) pair belonging to a named task.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub task: String,
    pub degraded: Array3<f64>,
    pub clean: Array3<f64>,
}

/// Fine-tuning: epoch loop over task pairs, variant-alternating updates for
/// the all-in-one phase, fixed variant for single-task, no masking.
pub fn run_finetune<W: Write>(
    state: &mut TrainState,
    declared_tasks: &[String],
    pairs: &[PairedSample],
    log: &mut TrainLog<W>,
    ckpt_dir: Option<&Path>,
) -> Result<RunSummary> {
    for task in declared_tasks {
        if !pairs.iter().any(|p| &p.task == task) {
            return Err(Error::Manifest(format!(
                "dataset manifest missing a declared task: `{task}`"
            )));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Manifest("fine-tuning dataset is empty".into()));
    }
    let started = Instant::now();
    let mut first_running = f64::NAN;
    let mut checkpoints = Vec::new();
    let crop = state.cfg.crop;
    let mut run = 0u64;

    let fixed_flag = match state.cfg.phase {
        Phase::FinetuneSingle => Some(match state.cfg.fixed_variant.as_deref() {
            Some("S") => VariantFlag::Small,
            _ => VariantFlag::Large,
        }),
        _ => None,
    };

    for _epoch in 0..state.cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        {
            let mut rng = state.iter_rng(state.iteration);
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
        for chunk in order.chunks(state.cfg.batch_size) {
            let mut rng = state.iter_rng(state.iteration);
            let flag = match fixed_flag {
                Some(f) => f,
                None => select_variant(&mut rng, state.cfg.variant_probability)?,
            };
            let mut batch = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let pair = &pairs[idx];
                let (_, h, w) = pair.clean.dim();
                if h < crop || w < crop {
                    return Err(Error::Manifest(format!(
                        "pair for task `{}` is {h}x{w}, smaller than crop {crop}",
                        pair.task
                    )));
                }
                let cy = if h > crop { rng.gen_range(0..=h - crop) } else { 0 };
                let cx = if w > crop { rng.gen_range(0..=w - crop) } else { 0 };
                let cut = |img: &Array3<f64>| {
                    let mut out = Array3::zeros((3, crop, crop));
                    for c in 0..3 {
                        for y in 0..crop {
                            for x in 0..crop {
                                out[(c, y, x)] = img[(c, cy + y, cx + x)];
                            }
                        }
                    }
                    out
                };
                batch.push((cut(&pair.degraded), cut(&pair.clean)));
            }
            let loss = pretrain_step(state, &batch, flag)?;
            if run == 0 {
                first_running = loss;
            }
            run += 1;
            log.append(&TrainLogRecord {
                iteration: state.iteration,
                flag: flag.indicator(),
                variant: flag.letter().to_string(),
                loss,
                lr: state.cfg.learning_rate,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            })?;
            if let Some(dir) = ckpt_dir {
                let every = state.cfg.checkpoint_every;
                if every > 0 && state.iteration % every == 0 {
                    let p = dir.join(format!("checkpoint_{:08}.ckpt", state.iteration));
                    state.save_checkpoint(&p)?;
                    checkpoints.push(p);
                }
            }
        }
    }
    if let Some(dir) = ckpt_dir {
        let p = dir.join("checkpoint_final.ckpt");
        state.save_checkpoint(&p)?;
        checkpoints.push(p);
    }
    Ok(RunSummary {
        iterations_run: run,
        final_iteration: state.iteration,
        first_running_loss: first_running,
        final_running_loss: state.running.mean(),
        ledger: state.ledger,
        checkpoints_written: checkpoints,
    })
}
