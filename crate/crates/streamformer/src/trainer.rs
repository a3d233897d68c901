//! Frame-level cross-entropy training: Adam, the two-phase warmup schedule
//! (ramped learning rate and a smaller frame budget before the switch),
//! frame-count batching, and a synthetic frame-classification task that
//! stands in for real speech.

use crate::error::{Error, Result};
use crate::layers::DropoutCtx;
use crate::model::{AcousticModel, AttentionPlan, BoundModel, ModelConfig, StreamingSpec};
use crate::rng::Rng;
use crate::streaming::xl_train_step;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Mean over frames of the negative log-probability assigned to each
/// frame's label. `log_posteriors` rows must already be log-normalized.
pub fn cross_entropy<S: Scalar>(
    tape: &mut Tape<S>,
    log_posteriors: Var,
    labels: &[usize],
) -> Result<Var> {
    tape.nll_from_log_probs(log_posteriors, labels)
}

#[derive(Debug, Clone)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(model: &AcousticModel<S>, hyper: AdamHyper) -> Self {
        let zeros: Vec<Tensor<S>> = model
            .params()
            .entries
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            hyper,
        }
    }
}

/// One bias-corrected Adam update over all parameters, accumulated in f64.
pub fn adam_step<S: Scalar>(
    model: &mut AcousticModel<S>,
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    let n = model.params().entries.len();
    if grads.len() != n {
        return Err(Error::config(
            "adam_step",
            format!("expected {n} gradients, got {}", grads.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = state.hyper.beta1;
    let b2 = state.hyper.beta2;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for i in 0..n {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = model.params_mut().entries[i].tensor.data_mut();
        for j in 0..g.len() {
            let gj = g[j].to_f64();
            let mj = b1 * m[j].to_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64() + (1.0 - b2) * gj * gj;
            m[j] = S::from_f64(mj);
            v[j] = S::from_f64(vj);
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + state.hyper.eps);
            p[j] = S::from_f64(p[j].to_f64() - update);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrDecay {
    Constant,
    InvSqrt,
}

/// Two-phase schedule: a linear learning-rate ramp over the warmup steps
/// combined with a smaller per-batch frame budget, then the main phase at
/// the base rate (constant, or inverse-sqrt decayed from the warmup end).
#[derive(Debug, Clone)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub warmup_batch_frames: usize,
    pub main_batch_frames: usize,
    pub base_lr: f64,
    pub decay: LrDecay,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            warmup_steps: 100,
            warmup_batch_frames: 128,
            main_batch_frames: 256,
            base_lr: 1e-3,
            decay: LrDecay::Constant,
        }
    }
}

impl Schedule {
    /// Learning rate at `step` (1-based ramp): `base * step / warmup`
    /// during the ramp, then constant or `base * sqrt(warmup / step)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.base_lr;
        }
        if step <= self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        match self.decay {
            LrDecay::Constant => self.base_lr,
            LrDecay::InvSqrt => self.base_lr * (self.warmup_steps as f64 / step as f64).sqrt(),
        }
    }

    pub fn batch_frames_at(&self, step: u64) -> usize {
        if step < self.warmup_steps {
            self.warmup_batch_frames
        } else {
            self.main_batch_frames
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "lr = {}\nwarmup_steps = {}\nwarmup_batch_frames = {}\nbatch_frames = {}\nlr_decay = {}\n",
            self.base_lr,
            self.warmup_steps,
            self.warmup_batch_frames,
            self.main_batch_frames,
            match self.decay {
                LrDecay::Constant => "constant",
                LrDecay::InvSqrt => "inv_sqrt",
            }
        )
    }

    pub const KEYS: [&'static str; 5] = [
        "lr",
        "warmup_steps",
        "warmup_batch_frames",
        "batch_frames",
        "lr_decay",
    ];

    /// Parse schedule keys out of a combined key=value config text.
    /// Unknown keys are left for the model-config parser to validate.
    pub fn parse_text(text: &str, source: &str) -> Result<(Self, Vec<String>)> {
        let mut sched = Schedule::default();
        let mut notices = Vec::new();
        let mut seen = std::collections::HashMap::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                seen.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        for key in Self::KEYS {
            match seen.get(key) {
                Some(v) => match key {
                    "lr" => {
                        sched.base_lr = v
                            .parse()
                            .map_err(|_| Error::file(source, format!("bad lr {v:?}")))?
                    }
                    "warmup_steps" => {
                        sched.warmup_steps = v
                            .parse()
                            .map_err(|_| Error::file(source, format!("bad warmup_steps {v:?}")))?
                    }
                    "warmup_batch_frames" => {
                        sched.warmup_batch_frames = v.parse().map_err(|_| {
                            Error::file(source, format!("bad warmup_batch_frames {v:?}"))
                        })?
                    }
                    "batch_frames" => {
                        sched.main_batch_frames = v
                            .parse()
                            .map_err(|_| Error::file(source, format!("bad batch_frames {v:?}")))?
                    }
                    "lr_decay" => {
                        sched.decay = match v.as_str() {
                            "constant" => LrDecay::Constant,
                            "inv_sqrt" => LrDecay::InvSqrt,
                            other => {
                                return Err(Error::file(
                                    source,
                                    format!("expected constant|inv_sqrt, got {other:?}"),
                                ))
                            }
                        }
                    }
                    _ => unreachable!(),
                },
                None => notices.push(format!("{source}: key {key} missing, using default")),
            }
        }
        Ok((sched, notices))
    }
}

/// Greedy frame-count packing: sequences are taken in (seed-shuffled) order
/// and added to the current batch while the frame budget allows; a sequence
/// longer than the budget forms its own batch. No sequence is ever split.
pub fn make_batches(lengths: &[usize], budget_frames: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut order);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut used = 0usize;
    for idx in order {
        let len = lengths[idx];
        if !current.is_empty() && used + len > budget_frames {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        current.push(idx);
        used += len;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Class-conditional synthetic frame-classification task. Labels arrive in
/// runs of several frames (as phonetic states do), features are the label's
/// mean vector plus isotropic noise, so both temporal structure and frame
/// identity carry signal.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub n_classes: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub min_run: usize,
    pub max_run: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    class_means: Vec<f64>,
}

impl SyntheticTask {
    pub fn new(n_classes: usize, feature_dim: usize, noise_sigma: f64, seed: u64) -> Self {
        let mut rng = Rng::derive(seed, "task.means");
        let class_means = (0..n_classes * feature_dim)
            .map(|_| rng.uniform(1.0))
            .collect();
        SyntheticTask {
            n_classes,
            feature_dim,
            noise_sigma,
            min_run: 5,
            max_run: 20,
            min_len: 40,
            max_len: 120,
            seed,
            class_means,
        }
    }

    pub fn for_model(cfg: &ModelConfig, noise_sigma: f64) -> Self {
        SyntheticTask::new(cfg.n_classes, cfg.n_features, noise_sigma, cfg.seed)
    }

    /// Deterministic sequence generation; `stream` names the split so train
    /// and eval data never collide.
    pub fn generate<S: Scalar>(&self, n_seqs: usize, stream: &str) -> Vec<(Tensor<S>, Vec<usize>)> {
        let mut rng = Rng::derive(self.seed, &format!("task.{stream}"));
        (0..n_seqs)
            .map(|_| {
                let len = rng.range_usize(self.min_len, self.max_len + 1);
                let mut labels = Vec::with_capacity(len);
                while labels.len() < len {
                    let label = rng.range_usize(0, self.n_classes);
                    let run = rng.range_usize(self.min_run, self.max_run + 1);
                    for _ in 0..run.min(len - labels.len()) {
                        labels.push(label);
                    }
                }
                let mut data = Vec::with_capacity(len * self.feature_dim);
                for &label in &labels {
                    for f in 0..self.feature_dim {
                        let mean = self.class_means[label * self.feature_dim + f];
                        data.push(S::from_f64(mean + self.noise_sigma * rng.normal()));
                    }
                }
                (
                    Tensor::new(vec![len, self.feature_dim], data).unwrap(),
                    labels,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub step: u64,
    pub lr: f64,
    pub batch_frames: usize,
    pub loss: f64,
    /// Held-out frame accuracy, present on evaluation steps.
    pub accuracy: Option<f64>,
}

impl TrainRecord {
    pub fn to_line(&self) -> String {
        let acc = match self.accuracy {
            Some(a) => format!("{a:.4}"),
            None => "na".to_string(),
        };
        format!(
            "step={}\tlr={:.6e}\tbatch_frames={}\tloss={:.6}\tacc={}",
            self.step, self.lr, self.batch_frames, self.loss, acc
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: u64,
    pub eval_every: u64,
    pub eval_seqs: usize,
    /// Stop as soon as held-out accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 2000,
            eval_every: 25,
            eval_seqs: 4,
            target_accuracy: None,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub final_accuracy: Option<f64>,
    pub steps_run: u64,
}

/// Frame accuracy of the model on task sequences.
pub fn frame_accuracy<S: Scalar>(
    model: &AcousticModel<S>,
    data: &[(Tensor<S>, Vec<usize>)],
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (feats, labels) in data {
        let logp = model.forward(feats, crate::model::ForwardMode::Eval)?;
        let k = logp.shape()[1];
        for (t, &label) in labels.iter().enumerate() {
            let row = &logp.data()[t * k..(t + 1) * k];
            let mut best = 0usize;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Run the two-phase training loop. Sequences are drawn from the task, a
/// non-finite loss aborts with the step index and the global parameter
/// norm, and the loop stops early once the target accuracy is reached.
pub fn train<S: Scalar>(
    model: &mut AcousticModel<S>,
    task: &SyntheticTask,
    schedule: &Schedule,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    if task.feature_dim != model.config().n_features || task.n_classes != model.config().n_classes
    {
        return Err(Error::config(
            "train",
            format!(
                "task shape ({} features, {} classes) does not match model ({}, {})",
                task.feature_dim,
                task.n_classes,
                model.config().n_features,
                model.config().n_classes
            ),
        ));
    }
    let eval_data = task.generate::<S>(options.eval_seqs, "eval");
    let mut adam = AdamState::new(model, AdamHyper::default());
    let mut dropout_rng = Rng::derive(model.config().seed, "train.dropout");
    let mut records = Vec::new();
    let mut final_accuracy = None;

    let mut pool: Vec<(Tensor<S>, Vec<usize>)> = Vec::new();
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut batch_cursor = 0usize;
    let mut epoch = 0u64;
    let mut pool_budget = usize::MAX;

    for step in 0..options.steps {
        let lr = schedule.lr_at(step + 1);
        let budget = schedule.batch_frames_at(step);
        if pool.is_empty() || batch_cursor >= batches.len() || budget != pool_budget {
            epoch += 1;
            pool = task.generate::<S>(16, &format!("train.epoch{epoch}"));
            let lengths: Vec<usize> = pool.iter().map(|(f, _)| f.shape()[0]).collect();
            batches = make_batches(&lengths, budget, model.config().seed ^ epoch);
            batch_cursor = 0;
            pool_budget = budget;
        }
        let batch = &batches[batch_cursor];
        batch_cursor += 1;

        let (loss, grads) = batch_gradients(model, &pool, batch, &mut dropout_rng)?;
        if !loss.is_finite() {
            return Err(Error::NanLoss {
                step,
                param_norm: model.params().global_norm(),
            });
        }
        adam_step(model, &grads, &mut adam, lr)?;

        let batch_frames: usize = batch.iter().map(|&i| pool[i].0.shape()[0]).sum();
        let mut record = TrainRecord {
            step,
            lr,
            batch_frames,
            loss,
            accuracy: None,
        };
        if (step + 1) % options.eval_every == 0 || step + 1 == options.steps {
            let acc = frame_accuracy(model, &eval_data)?;
            record.accuracy = Some(acc);
            final_accuracy = Some(acc);
            records.push(record);
            if options.target_accuracy.is_some_and(|t| acc >= t) {
                return Ok(TrainOutcome {
                    records,
                    final_accuracy,
                    steps_run: step + 1,
                });
            }
        } else {
            records.push(record);
        }
    }
    Ok(TrainOutcome {
        records,
        final_accuracy,
        steps_run: options.steps,
    })
}

/// Frame-weighted mean loss and accumulated gradients over one batch of
/// sequences. Chunk-recurrent models train chunk-wise with severed history;
/// everything else trains on a single whole-utterance tape.
fn batch_gradients<S: Scalar>(
    model: &AcousticModel<S>,
    pool: &[(Tensor<S>, Vec<usize>)],
    batch: &[usize],
    dropout_rng: &mut Rng,
) -> Result<(f64, Vec<Tensor<S>>)> {
    let total_frames: usize = batch.iter().map(|&i| pool[i].0.shape()[0]).sum();
    let mut grads: Vec<Tensor<S>> = model
        .params()
        .entries
        .iter()
        .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
        .collect();
    let mut total_loss = 0.0;
    for &idx in batch {
        let (feats, labels) = &pool[idx];
        let weight = feats.shape()[0] as f64 / total_frames as f64;
        let w = S::from_f64(weight);
        match model.config().streaming {
            StreamingSpec::Xl { .. } => {
                let step = xl_train_step(model, feats, labels, Some(dropout_rng))?;
                total_loss += weight * step.loss;
                for (dst, src) in grads.iter_mut().zip(&step.grads) {
                    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                        *d += w * *s;
                    }
                }
            }
            _ => {
                let (loss, seq_grads) = sequence_gradients(model, feats, labels, dropout_rng)?;
                total_loss += weight * loss;
                for (i, g) in seq_grads.into_iter().enumerate() {
                    if let Some(g) = g {
                        for (d, s) in grads[i].data_mut().iter_mut().zip(g.data()) {
                            *d += w * *s;
                        }
                    }
                }
            }
        }
    }
    Ok((total_loss, grads))
}

fn sequence_gradients<S: Scalar>(
    model: &AcousticModel<S>,
    feats: &Tensor<S>,
    labels: &[usize],
    dropout_rng: &mut Rng,
) -> Result<(f64, Vec<Option<Tensor<S>>>)> {
    let t_out = model.config().out_len(feats.shape()[0]);
    let mask = match model.config().streaming {
        StreamingSpec::Masked(w) => Some(crate::attention::build_mask(t_out, &w)),
        _ => None,
    };
    let mut tape = Tape::new();
    let bound: BoundModel = model.bind(&mut tape, true);
    let fv = tape.constant(feats.clone());
    let plan = match &mask {
        Some(m) => AttentionPlan::Windowed(m),
        None => AttentionPlan::Full,
    };
    let mut dropout = DropoutCtx::train(model.config().dropout, dropout_rng);
    let logp = model.apply(&mut tape, &bound, fv, &plan, &mut dropout)?;
    let loss = cross_entropy(&mut tape, logp, labels)?;
    let loss_value = tape.value(loss).item().to_f64();
    tape.backward(loss)?;
    let grads = bound.vars.iter().map(|&v| tape.grad(v)).collect();
    Ok((loss_value, grads))
}
