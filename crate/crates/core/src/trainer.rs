//! Composite objective, optimizer, schedule, training loop and evaluation.
//!
//! The objective is
//! `L_clc + alpha * L_dis + beta * L_pat - gamma * I(p_t; x_t)`, with both
//! adversarial terms behind gradient reversal so one backward pass serves the
//! whole minimax.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::adversarial::{global_domain_loss, grl_schedule, patch_bce};
use crate::checkpoint::{self, DType};
use crate::data::{paired_batches, DomainBatch, LabeledImageSet};
use crate::dcm::mutual_information_on_tape;
use crate::error::{Error, Result};
use crate::model::TvtModel;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::vit::{Features, ModelConfig, PatchProbe, Transferability};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the global adversarial loss.
    pub alpha: f64,
    /// Weight of the patch-level adversarial loss.
    pub beta: f64,
    /// Weight of the mutual-information bonus.
    pub gamma: f64,
    /// Transferability-weighted last layer on/off.
    pub tam: bool,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub momentum: f64,
    pub batch_source: usize,
    pub batch_target: usize,
    pub seed: u64,
    /// Evaluate and checkpoint every this many steps (0: only at the end).
    pub eval_interval: usize,
    /// Global gradient-norm clip (0 disables).
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            tam: true,
            peak_lr: 0.03,
            warmup_steps: 500,
            total_steps: 1500,
            momentum: 0.9,
            batch_source: 16,
            batch_target: 16,
            seed: 0,
            eval_interval: 500,
            max_grad_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr must be >= 0, got {}", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            return fail("batch sizes must be at least 1".into());
        }
        if self.max_grad_norm.is_nan() || self.max_grad_norm < 0.0 {
            return fail(format!("max_grad_norm must be >= 0, got {}", self.max_grad_norm));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.peak_lr,
            warmup: self.warmup_steps,
            total: self.total_steps,
        }
    }
}

/// The three configurations of the module ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// Supervised source training only.
    SourceOnly,
    /// Adversarial alignment with the transferability-weighted last layer.
    Tam,
    /// Everything, including the mutual-information term.
    TamDcm,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::SourceOnly, Ablation::Tam, Ablation::TamDcm];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::SourceOnly => "source-only",
            Ablation::Tam => "+tam",
            Ablation::TamDcm => "+tam+dcm",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Ablation::SourceOnly => {
                cfg.alpha = 0.0;
                cfg.beta = 0.0;
                cfg.gamma = 0.0;
                cfg.tam = false;
            }
            Ablation::Tam => {
                cfg.gamma = 0.0;
                cfg.tam = true;
            }
            Ablation::TamDcm => cfg.tam = true,
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to 0
/// at `total`. Steps past `total` stay at the final value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let step = step.min(self.total);
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return self.peak;
        }
        let progress = (step - self.warmup) as f64 / span as f64;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Heavy-ball SGD: `v <- mu v + g`, `theta <- theta - lr v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        SgdMomentum {
            momentum,
            velocity: store.ids().map(|id| vec![0.0; store.tensor(id).numel()]).collect(),
        }
    }

    /// Applies one update from the gradients in `store`. Parameters that took no
    /// part in the loss (no gradient) are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if store.len() != self.velocity.len() {
            return Err(Error::Contract("optimizer state does not match the parameter set".into()));
        }
        if store.ids().all(|id| store.tensor(id).grad.is_none()) {
            return Err(Error::Contract("optimizer step without any gradients".into()));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, v) in ids.into_iter().zip(&mut self.velocity) {
            let t = store.tensor_mut(id);
            let g = t.grad.take();
            match &g {
                Some(g) => v.iter_mut().zip(g).for_each(|(v, g)| *v = self.momentum * *v + g),
                None => v.iter_mut().for_each(|v| *v *= self.momentum),
            }
            t.data_mut().iter_mut().zip(v.iter()).for_each(|(p, v)| *p -= lr * v);
            t.grad = g;
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let norm = ids
        .iter()
        .filter_map(|&id| store.tensor(id).grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for id in ids {
            if let Some(g) = store.tensor_mut(id).grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Values of the four objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossTerms {
    pub l_clc: f64,
    pub l_dis: f64,
    pub l_pat: f64,
    pub mi: f64,
}

impl LossTerms {
    pub fn combined(&self, w: &LossWeights) -> f64 {
        self.l_clc + w.alpha * self.l_dis + w.beta * self.l_pat - w.gamma * self.mi
    }
}

pub struct Objective {
    pub tape: Tape,
    pub loss: Var,
    pub terms: LossTerms,
    pub features: Features,
}

/// Records the full objective for one paired batch. Terms with zero weight
/// are evaluated for reporting but left out of the differentiated loss.
pub fn total_objective(
    model: &TvtModel,
    store: &ParamStore,
    batch: &DomainBatch,
    weights: &LossWeights,
    grl_lambda: f64,
    mode: Transferability<'_>,
) -> Result<Objective> {
    let mut tape = Tape::new();
    let loss = record_objective(&mut tape, model, store, batch, weights, grl_lambda, mode)?;
    let (loss, terms, features) = loss;
    Ok(Objective {
        tape,
        loss,
        terms,
        features,
    })
}

/// Same as [`total_objective`] on a caller-provided tape.
pub fn record_objective(
    tape: &mut Tape,
    model: &TvtModel,
    store: &ParamStore,
    batch: &DomainBatch,
    weights: &LossWeights,
    grl_lambda: f64,
    mode: Transferability<'_>,
) -> Result<(Var, LossTerms, Features)> {
    let (ns, nt) = (batch.n_source(), batch.n_target);
    if ns == 0 || nt == 0 {
        return Err(Error::Validation("objective needs source and target examples".into()));
    }
    let n = ns + nt;
    let images = batch.images();
    let probe = PatchProbe {
        disc: &model.patch_disc,
        grl_lambda,
    };
    let features = model
        .vit
        .forward_features(tape, store, &images, n, Some(probe), mode)?;
    let logits = model.vit.classify(tape, store, features.class_state)?;

    let source_logits = tape.rows(logits, 0, ns)?;
    let l_clc = tape.cross_entropy(source_logits, &batch.source_labels)?;

    let domain = batch.domain_labels();
    let l_dis = global_domain_loss(
        tape,
        store,
        &model.global_disc,
        features.class_state,
        &domain,
        grl_lambda,
    )?;
    let probs = features
        .patch_probs
        .ok_or_else(|| Error::Contract("patch probe missing from features".into()))?;
    let l_pat = patch_bce(tape, probs, &domain, model.config().num_patches())?;

    let target_logits = tape.rows(logits, ns, n)?;
    let mi = mutual_information_on_tape(tape, target_logits)?;

    let terms = LossTerms {
        l_clc: tape.value(l_clc).item(),
        l_dis: tape.value(l_dis).item(),
        l_pat: tape.value(l_pat).item(),
        mi: tape.value(mi).item(),
    };

    let mut loss = l_clc;
    for (term, w) in [(l_dis, weights.alpha), (l_pat, weights.beta), (mi, -weights.gamma)] {
        if w != 0.0 {
            let scaled = tape.scale(term, w);
            loss = tape.add(loss, scaled)?;
        }
    }
    Ok((loss, terms, features))
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub lambda: f64,
    pub l_clc: f64,
    pub l_dis: f64,
    pub l_pat: f64,
    pub mi: f64,
    pub acc: Option<f64>,
}

/// Receives training progress.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// `step` counts completed updates; `is_final` marks the end-of-run state.
    fn on_checkpoint(&mut self, _step: usize, _is_final: bool, _store: &ParamStore) -> Result<()> {
        Ok(())
    }
}

/// Observer that discards everything.
pub struct Silent;

impl TrainObserver for Silent {}

/// Writes `metrics.jsonl`, `checkpoint_<step>.ckpt` files and `final.ckpt`
/// into a run directory.
pub struct RunDir {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

impl RunDir {
    pub const METRICS: &'static str = "metrics.jsonl";
    pub const FINAL: &'static str = "final.ckpt";

    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::METRICS);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            metrics: BufWriter::new(file),
        })
    }

    pub fn checkpoint_name(step: usize) -> String {
        format!("checkpoint_{step:06}.ckpt")
    }
}

impl TrainObserver for RunDir {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        let path = self.dir.join(Self::METRICS);
        let line = serde_json::to_string(record).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&path, e))
    }

    fn on_checkpoint(&mut self, step: usize, is_final: bool, store: &ParamStore) -> Result<()> {
        let metrics = self.dir.join(Self::METRICS);
        self.metrics.flush().map_err(|e| Error::io(&metrics, e))?;
        let name = if is_final {
            Self::FINAL.to_string()
        } else {
            Self::checkpoint_name(step)
        };
        checkpoint::save(&self.dir.join(name), store, DType::F64)
    }
}

pub struct TrainData<'a> {
    pub source_train: &'a LabeledImageSet,
    pub target_train: &'a LabeledImageSet,
    /// Labelled target split, used only for reporting accuracy.
    pub target_test: &'a LabeledImageSet,
}

pub struct FitOutcome {
    pub model: TvtModel,
    pub store: ParamStore,
    pub records: Vec<StepRecord>,
    pub target_accuracy: f64,
}

fn mode_for(tam: bool) -> Transferability<'static> {
    if tam {
        Transferability::Discriminator
    } else {
        Transferability::Vanilla
    }
}

/// Trains from a seeded initialization. Deterministic given its arguments.
pub fn fit(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    observer: &mut dyn TrainObserver,
) -> Result<FitOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    for set in [data.source_train, data.target_train, data.target_test] {
        set.validate(model_cfg.classes)?;
        if set.channels != model_cfg.channels
            || set.height != model_cfg.image_size
            || set.width != model_cfg.image_size
        {
            return Err(Error::Config(format!(
                "images are {}x{}x{} but the model expects {}x{}x{}",
                set.height, set.width, set.channels, model_cfg.image_size, model_cfg.image_size, model_cfg.channels
            )));
        }
    }

    let (model, mut store) = TvtModel::new(model_cfg, cfg.seed)?;
    let mut optimizer = SgdMomentum::new(&store, cfg.momentum);
    let schedule = cfg.schedule();
    let weights = cfg.weights();
    let mode = mode_for(cfg.tam);
    let mut batches = paired_batches(
        data.source_train,
        data.target_train,
        cfg.batch_source,
        cfg.batch_target,
        cfg.seed,
    )?;

    let mut records = Vec::with_capacity(cfg.total_steps);
    let mut last_acc = None;
    for step in 0..cfg.total_steps {
        let batch = batches.next().expect("batch stream is endless");
        let lr = schedule.at(step);
        let lambda = grl_schedule(step as f64 / cfg.total_steps as f64);
        let obj = total_objective(&model, &store, &batch, &weights, lambda, mode)?;
        let grads = obj.tape.backward(obj.loss)?;
        store.zero_grad();
        grads.accumulate_into(&mut store);
        drop(obj.tape);
        if cfg.max_grad_norm > 0.0 {
            clip_grad_norm(&mut store, cfg.max_grad_norm);
        }
        optimizer.step(&mut store, lr)?;

        let done = step + 1;
        let eval_now =
            done == cfg.total_steps || (cfg.eval_interval > 0 && done % cfg.eval_interval == 0);
        let acc = if eval_now {
            let a = evaluate(&model, &store, data.target_test, cfg.tam)?;
            last_acc = Some(a);
            Some(a)
        } else {
            None
        };
        let t = obj.terms;
        for (name, v) in [("l_clc", t.l_clc), ("l_dis", t.l_dis), ("l_pat", t.l_pat), ("mi", t.mi)] {
            if !v.is_finite() {
                return Err(Error::Validation(format!("{name} became non-finite at step {step}")));
            }
        }
        let record = StepRecord {
            step,
            lr,
            lambda,
            l_clc: t.l_clc,
            l_dis: t.l_dis,
            l_pat: t.l_pat,
            mi: t.mi,
            acc,
        };
        observer.on_step(&record)?;
        records.push(record);
        if eval_now && done != cfg.total_steps {
            observer.on_checkpoint(done, false, &store)?;
        }
    }

    store.zero_grad();
    let target_accuracy = match last_acc {
        Some(a) => a,
        None => evaluate(&model, &store, data.target_test, cfg.tam)?,
    };
    observer.on_checkpoint(cfg.total_steps, true, &store)?;
    Ok(FitOutcome {
        model,
        store,
        records,
        target_accuracy,
    })
}

const EVAL_CHUNK: usize = 100;

/// Class predictions (argmax of logits) for a set of images.
pub fn predict(model: &TvtModel, store: &ParamStore, set: &LabeledImageSet, tam: bool) -> Result<Vec<usize>> {
    let k = model.config().classes;
    let mut preds = Vec::with_capacity(set.len());
    let per = set.image_len();
    for chunk in set.images.chunks(EVAL_CHUNK * per) {
        let n = chunk.len() / per;
        let mut tape = Tape::new();
        let probe = tam.then_some(PatchProbe {
            disc: &model.patch_disc,
            grl_lambda: 0.0,
        });
        let f = model
            .vit
            .forward_features(&mut tape, store, chunk, n, probe, mode_for(tam))?;
        let logits = model.vit.classify(&mut tape, store, f.class_state)?;
        for row in tape.data(logits).chunks(k) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            preds.push(best.0);
        }
    }
    Ok(preds)
}

/// Fraction of correctly classified images.
pub fn evaluate(model: &TvtModel, store: &ParamStore, set: &LabeledImageSet, tam: bool) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty split".into()));
    }
    let preds = predict(model, store, set, tam)?;
    let correct = preds.iter().zip(&set.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / set.len() as f64)
}

/// Finite-difference check of the full objective's tape gradient.
///
/// Transferabilities are computed once at the current parameters and then held
/// fixed, matching the stop-gradient on the attention weighting. Because both
/// discriminators sit behind gradient reversal, the tape gradient of a
/// feature-extractor or head parameter is the derivative of
/// `L_clc - gamma I - lambda (alpha L_dis + beta L_pat)`, while for
/// discriminator parameters it is the derivative of the objective itself; the
/// finite differences use whichever applies to each coordinate.
#[allow(clippy::too_many_arguments)]
pub fn objective_grad_check(
    model: &TvtModel,
    store: &ParamStore,
    batch: &DomainBatch,
    weights: &LossWeights,
    grl_lambda: f64,
    coords: &[crate::gradcheck::Coord],
    h: f64,
    inject_fault: bool,
) -> Result<crate::gradcheck::GradCheckReport> {
    let base = total_objective(model, store, batch, weights, grl_lambda, Transferability::Discriminator)?;
    let fixed = base
        .features
        .transferability
        .clone()
        .ok_or_else(|| Error::Contract("transferabilities missing".into()))?;
    drop(base);

    let build = |p: &ParamStore| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        if inject_fault {
            tape.inject_gelu_backward_fault();
        }
        let (loss, _, _) = record_objective(&mut tape, model, p, batch, weights, grl_lambda, Transferability::Fixed(&fixed))?;
        Ok((tape, loss))
    };
    let value = |p: &ParamStore, coord: crate::gradcheck::Coord| -> Result<f64> {
        let mut tape = Tape::new();
        let (_, t, _) = record_objective(&mut tape, model, p, batch, weights, grl_lambda, Transferability::Fixed(&fixed))?;
        if TvtModel::is_discriminator_param(p, coord.param) {
            Ok(t.combined(weights))
        } else {
            Ok(t.l_clc - weights.gamma * t.mi - grl_lambda * (weights.alpha * t.l_dis + weights.beta * t.l_pat))
        }
    };
    crate::gradcheck::grad_check_with(store, coords, h, build, value)
}
