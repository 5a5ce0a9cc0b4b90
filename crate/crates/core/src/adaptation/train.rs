use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{queries, DETECTOR_PARAMS, DISC_PARAMS};
use super::{
    adversarial_loss_var, evaluate, supervised_loss, total_loss, AdaptationConfig, AdaptationError,
    AdversarialMode, DetectorModel, DiscriminatorBank, Level, LossWeights, LEVELS,
};
use crate::autodiff::{
    adamw_step, AdamState, Checkpoint, CheckpointKind, GrlConfig, Tape, Tensor, Var,
};
use crate::dataset::{
    derive_seed, pair_for_iteration, Benchmark, BlendedSample, SourceTargetMixSample,
};
use crate::schedule::format_sig17;

const STREAM_MODEL_INIT: u64 = 20;
const STREAM_DISC_INIT: u64 = 21;
const STREAM_PRETRAIN: u64 = 30;
const STREAM_FINETUNE: u64 = 31;
const STREAM_SOURCE_ONLY: u64 = 32;

/// Detector, discriminators and their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub model: DetectorModel,
    pub discs: DiscriminatorBank,
    model_opt: AdamState,
    disc_opt: [AdamState; 3],
}

impl Learner {
    pub fn new(cfg: &AdaptationConfig) -> Result<Self, AdaptationError> {
        let model = DetectorModel::new(
            &cfg.benchmark.layout,
            &cfg.model,
            derive_seed(cfg.seed, STREAM_MODEL_INIT, 0),
        )?;
        let discs = DiscriminatorBank::new(
            &model,
            &cfg.model,
            derive_seed(cfg.seed, STREAM_DISC_INIT, 0),
        );
        Ok(Self::from_parts(model, discs))
    }

    /// Fresh optimizer state around existing weights.
    pub fn from_parts(model: DetectorModel, discs: DiscriminatorBank) -> Self {
        let model_opt = AdamState::zeros_like(model.params());
        let disc_opt = LEVELS.map(|l| AdamState::zeros_like(discs.level_params(l)));
        Self {
            model,
            discs,
            model_opt,
            disc_opt,
        }
    }

    /// A learner shaped by `cfg` carrying the weights (and, for a resumable
    /// checkpoint, the optimizer state) stored in `ck`.
    pub fn from_checkpoint(
        ck: &Checkpoint,
        cfg: &AdaptationConfig,
    ) -> Result<Self, AdaptationError> {
        let mut learner = Self::new(cfg)?;
        learner.restore(ck)?;
        Ok(learner)
    }

    fn weight_arrays(&self) -> Vec<Tensor> {
        self.model
            .params()
            .iter()
            .chain(self.discs.params())
            .cloned()
            .collect()
    }

    fn weight_shapes(&self) -> Vec<(usize, usize)> {
        let mut s = self.model.shapes();
        s.extend(self.discs.shapes());
        s
    }

    pub fn weights_checkpoint(&self, iteration: u64) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Weights,
            iteration,
            arrays: self.weight_arrays(),
        }
    }

    fn resumable_checkpoint(
        &self,
        iteration: usize,
        acc: &EpochAccumulator,
        best: Option<f64>,
    ) -> Checkpoint {
        let mut arrays = self.weight_arrays();
        arrays.extend(self.model_opt.m.iter().cloned());
        arrays.extend(self.disc_opt.iter().flat_map(|s| s.m.iter().cloned()));
        arrays.extend(self.model_opt.v.iter().cloned());
        arrays.extend(self.disc_opt.iter().flat_map(|s| s.v.iter().cloned()));
        let steps = std::iter::once(self.model_opt.step)
            .chain(self.disc_opt.iter().map(|s| s.step))
            .map(|s| s as f64)
            .collect();
        arrays.push(Tensor::from_vec(1, 4, steps).expect("four counters"));
        let mut sums = acc.sums.to_vec();
        sums.push(acc.count as f64);
        arrays.push(Tensor::from_vec(1, 5, sums).expect("five accumulators"));
        arrays.push(Tensor::scalar(best.unwrap_or(f64::NAN)));
        Checkpoint {
            kind: CheckpointKind::Resumable,
            iteration: iteration as u64,
            arrays,
        }
    }

    /// Replaces weights from a checkpoint written for the same config.
    /// Weight checkpoints reset the optimizer state.
    fn restore(
        &mut self,
        ck: &Checkpoint,
    ) -> Result<Option<(usize, EpochAccumulator, Option<f64>)>, AdaptationError> {
        let shapes = self.weight_shapes();
        let n = shapes.len();
        match ck.kind {
            CheckpointKind::Weights => ck.check_shapes(&shapes, n)?,
            CheckpointKind::Resumable => {
                let mut all = shapes.clone();
                all.extend(shapes.iter().copied());
                all.extend(shapes.iter().copied());
                all.extend([(1, 4), (1, 5), (1, 1)]);
                ck.check_shapes(&all, all.len())?;
            }
        }
        let (model_part, disc_part) = ck.arrays[..n].split_at(DETECTOR_PARAMS);
        self.model.params_mut().clone_from_slice(model_part);
        self.discs.params_mut().clone_from_slice(disc_part);
        if ck.kind == CheckpointKind::Weights {
            *self = Self::from_parts(self.model.clone(), self.discs.clone());
            return Ok(None);
        }
        let m = &ck.arrays[n..2 * n];
        let v = &ck.arrays[2 * n..3 * n];
        let extra = &ck.arrays[3 * n..];
        let steps = extra[0].data();
        self.model_opt.m.clone_from_slice(&m[..DETECTOR_PARAMS]);
        self.model_opt.v.clone_from_slice(&v[..DETECTOR_PARAMS]);
        self.model_opt.step = steps[0] as u64;
        for (i, st) in self.disc_opt.iter_mut().enumerate() {
            let at = DETECTOR_PARAMS + i * DISC_PARAMS;
            st.m.clone_from_slice(&m[at..at + DISC_PARAMS]);
            st.v.clone_from_slice(&v[at..at + DISC_PARAMS]);
            st.step = steps[i + 1] as u64;
        }
        let a = extra[1].data();
        let acc = EpochAccumulator {
            sums: [a[0], a[1], a[2], a[3]],
            count: a[4] as usize,
        };
        let best = Some(extra[2].data()[0]).filter(|b| !b.is_nan());
        Ok(Some((ck.iteration as usize, acc, best)))
    }
}

/// Loss values of one step. Adversarial entries are the log-likelihood form
/// (never positive), averaged over the two samples of the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub l_sup: f64,
    pub l_adv: [f64; 3],
    pub total: f64,
}

/// What a gradient query differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// The training loss with queries passed through gradient reversal.
    Training,
    /// The training loss with the reversal replaced by identity.
    PlainTraining,
    /// `sum_l lambda_l * L_adv_l` alone, no reversal.
    Adversarial,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub model: Vec<Tensor>,
    pub discs: Vec<Tensor>,
    pub losses: StepLosses,
}

const ADV_TERMS: [&str; 3] = ["adversarial_sp", "adversarial_ch", "adversarial_ins"];

fn check_finite(term: &'static str, value: f64) -> Result<f64, AdaptationError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(AdaptationError::NonFiniteLoss {
            term,
            value,
            iteration: 0,
        })
    }
}

fn differentiate(
    learner: &Learner,
    blended: &BlendedSample,
    mix: &SourceTargetMixSample,
    delta: f64,
    mode: AdversarialMode,
    weights: &LossWeights,
    objective: Objective,
) -> Result<StepGradients, AdaptationError> {
    for sample in [
        blended.delta,
        blended.domain_label,
        mix.delta,
        mix.domain_label,
    ] {
        if sample != delta {
            return Err(AdaptationError::DeltaMismatch {
                sample,
                given: delta,
            });
        }
    }
    let tape = Tape::new();
    let mv = learner.model.leaves(&tape);
    let dv = learner.discs.leaves(&tape);
    let model = &learner.model;

    let (feat_b, logits_b) = model.forward(&tape, &mv, &blended.image)?;
    let l_sup = supervised_loss(&tape, logits_b, model.grid_size(), &blended.annotations)?;
    check_finite("supervised", l_sup.scalar())?;

    let (other_image, label_b, label_o) = match mode {
        AdversarialMode::Mixed => (&mix.image, delta, delta),
        AdversarialMode::Hard => (&mix.target, 0.0, 1.0),
    };
    let (feat_o, logits_o) = model.forward(&tape, &mv, other_image)?;
    let q_b = queries(&tape, feat_b, logits_b)?;
    let q_o = queries(&tape, feat_o, logits_o)?;

    let reverse = objective == Objective::Training;
    let mut adv: Vec<Var<'_>> = Vec::with_capacity(3);
    for level in LEVELS {
        let i = level.index();
        let d_b = DiscriminatorBank::forward(&dv, level, route(q_b[i], reverse))?;
        let d_o = DiscriminatorBank::forward(&dv, level, route(q_o[i], reverse))?;
        for d in [d_b, d_o] {
            check_finite(ADV_TERMS[i], d.scalar())?;
        }
        let both = adversarial_loss_var(&tape, label_b, d_b)?
            .add(&adversarial_loss_var(&tape, label_o, d_o)?)?;
        adv.push(both.scale(0.5));
    }
    let l_adv = [adv[0].scalar(), adv[1].scalar(), adv[2].scalar()];
    let root = match objective {
        Objective::Adversarial => {
            let zero = tape.leaf(Tensor::scalar(0.0));
            total_loss(zero, adv[0], adv[1], adv[2], weights)?
        }
        // the discriminators minimize binary cross-entropy, the negated log-likelihood
        _ => total_loss(
            l_sup,
            adv[0].scale(-1.0),
            adv[1].scale(-1.0),
            adv[2].scale(-1.0),
            weights,
        )?,
    };
    let losses = StepLosses {
        l_sup: l_sup.scalar(),
        l_adv: [
            check_finite(ADV_TERMS[0], l_adv[0])?,
            check_finite(ADV_TERMS[1], l_adv[1])?,
            check_finite(ADV_TERMS[2], l_adv[2])?,
        ],
        total: check_finite("total", root.scalar())?,
    };
    root.backward()?;
    Ok(StepGradients {
        model: mv.iter().map(Var::grad).collect(),
        discs: dv.iter().map(Var::grad).collect(),
        losses,
    })
}

fn route(q: Var<'_>, reverse: bool) -> Var<'_> {
    if reverse {
        q.grl(GrlConfig::default())
    } else {
        q
    }
}

/// Gradients of `objective` at the learner's current parameters.
pub fn step_gradients(
    learner: &Learner,
    blended: &BlendedSample,
    mix: &SourceTargetMixSample,
    delta: f64,
    cfg: &AdaptationConfig,
    objective: Objective,
) -> Result<StepGradients, AdaptationError> {
    differentiate(
        learner,
        blended,
        mix,
        delta,
        cfg.adversarial_mode,
        &cfg.weights,
        objective,
    )
}

/// One optimizer step on the training loss.
///
/// The supervised term sees only the blended sample. In mixed mode both
/// samples carry the soft label `delta`; in hard mode the blended sample is
/// labeled source and the raw target operand of `mix` is labeled target.
/// A discriminator whose weight is zero is left untouched.
pub fn train_step(
    learner: &mut Learner,
    blended: &BlendedSample,
    mix: &SourceTargetMixSample,
    delta: f64,
    cfg: &AdaptationConfig,
) -> Result<StepLosses, AdaptationError> {
    let g = step_gradients(learner, blended, mix, delta, cfg, Objective::Training)?;
    adamw_step(
        learner.model.params_mut(),
        &g.model,
        &mut learner.model_opt,
        &cfg.optimizer,
    )?;
    for level in LEVELS {
        if cfg.weights.get(level) == 0.0 {
            continue;
        }
        let at = level.index() * DISC_PARAMS;
        adamw_step(
            learner.discs.level_params_mut(level),
            &g.discs[at..at + DISC_PARAMS],
            &mut learner.disc_opt[level.index()],
            &cfg.optimizer,
        )?;
    }
    Ok(g.losses)
}

/// Hooks into a training loop.
pub trait TrainObserver {
    /// Called once per iteration with the mixing weight in force.
    fn on_delta(&mut self, _iteration: usize, _delta: f64) {}
    fn on_step(&mut self, _iteration: usize, _losses: &StepLosses) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_sup: f64,
    pub l_adv: [f64; 3],
    pub delta: f64,
    pub map: Option<f64>,
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        push_metrics_row(&mut out, r);
    }
    out
}

const METRICS_HEADER: &str = "epoch,l_sup,l_sp,l_ch,l_ins,delta,map";

fn push_metrics_row(out: &mut String, r: &EpochMetrics) {
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{}",
        r.epoch,
        format_sig17(r.l_sup),
        format_sig17(r.l_adv[0]),
        format_sig17(r.l_adv[1]),
        format_sig17(r.l_adv[2]),
        format_sig17(r.delta),
        r.map.map(format_sig17).unwrap_or_default()
    );
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct EpochAccumulator {
    sums: [f64; 4],
    count: usize,
}

impl EpochAccumulator {
    fn add(&mut self, l: &StepLosses) {
        self.sums[0] += l.l_sup;
        for i in 0..3 {
            self.sums[i + 1] += l.l_adv[i];
        }
        self.count += 1;
    }

    fn mean(&self) -> [f64; 4] {
        let n = self.count.max(1) as f64;
        self.sums.map(|s| s / n)
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<&'a Path>,
    /// Stop after this many total iterations, leaving a resumable checkpoint.
    pub stop_after: Option<usize>,
    /// Evaluate on the target set at the end of every epoch.
    pub evaluate: bool,
    pub observer: Option<&'a mut dyn TrainObserver>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub learner: Learner,
    pub metrics: Vec<EpochMetrics>,
    /// Iterations completed in total, including any before a resume.
    pub iterations_done: usize,
    pub completed: bool,
    pub final_map: Option<f64>,
    pub best_map: Option<f64>,
}

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RESUME_CHECKPOINT: &str = "resume.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

struct LoopSpec {
    stream: u64,
    iterations: usize,
    scheduled: bool,
    final_name: &'static str,
}

struct LoopState {
    start: usize,
    acc: EpochAccumulator,
    best: Option<f64>,
}

fn run_loop(
    mut learner: Learner,
    bench: &Benchmark,
    cfg: &AdaptationConfig,
    spec: &LoopSpec,
    state: LoopState,
    opts: &mut RunOptions<'_>,
) -> Result<RunReport, AdaptationError> {
    cfg.validate()?;
    let ipe = cfg.iterations_per_epoch;
    let LoopState {
        start,
        mut acc,
        mut best,
    } = state;
    let mut metrics = Vec::new();
    let mut last_map = None;
    let end = opts
        .stop_after
        .map_or(spec.iterations, |s| s.min(spec.iterations));
    for it in start..end {
        let delta = if spec.scheduled {
            cfg.delta_at(it)?
        } else {
            0.0
        };
        if let Some(obs) = opts.observer.as_deref_mut() {
            obs.on_delta(it, delta);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, spec.stream, it as u64));
        let (blended, mix) = pair_for_iteration(&bench.source, &bench.target, delta, &mut rng)?;
        let losses = train_step(&mut learner, &blended, &mix, delta, cfg).map_err(|e| match e {
            AdaptationError::NonFiniteLoss { term, value, .. } => AdaptationError::NonFiniteLoss {
                term,
                value,
                iteration: it,
            },
            other => other,
        })?;
        if let Some(obs) = opts.observer.as_deref_mut() {
            obs.on_step(it, &losses);
        }
        acc.add(&losses);

        let done = it + 1;
        if done % ipe == 0 || done == spec.iterations {
            let map = if opts.evaluate {
                Some(evaluate(&learner.model, &bench.target)?.map)
            } else {
                None
            };
            let [l_sup, sp, ch, ins] = acc.mean();
            metrics.push(EpochMetrics {
                epoch: done.div_ceil(ipe),
                l_sup,
                l_adv: [sp, ch, ins],
                delta,
                map,
            });
            acc = EpochAccumulator::default();
            last_map = map;
            if let Some(m) = map {
                if best.is_none_or(|b| m > b) {
                    best = Some(m);
                    if let Some(dir) = opts.out_dir {
                        learner
                            .weights_checkpoint(done as u64)
                            .save(dir.join(BEST_CHECKPOINT))?;
                    }
                }
            }
        }
    }
    let completed = end == spec.iterations;
    if let Some(dir) = opts.out_dir {
        append_metrics(&dir.join(METRICS_FILE), &metrics)?;
        if completed {
            learner
                .weights_checkpoint(spec.iterations as u64)
                .save(dir.join(spec.final_name))?;
        } else {
            learner
                .resumable_checkpoint(end, &acc, best)
                .save(dir.join(RESUME_CHECKPOINT))?;
        }
    }
    Ok(RunReport {
        learner,
        metrics,
        iterations_done: end.max(start),
        completed,
        final_map: if completed { last_map } else { None },
        best_map: best,
    })
}

fn append_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<(), AdaptationError> {
    let io = |source| AdaptationError::Io {
        path: path.to_path_buf(),
        source,
    };
    let fresh = !path.exists();
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    for r in rows {
        push_metrics_row(&mut text, r);
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)
}

/// Hard-label adversarial training on raw source and raw target images for
/// `pretrain_iterations` steps, starting from a seeded initialization.
pub fn pretrain(
    bench: &Benchmark,
    cfg: &AdaptationConfig,
    mut opts: RunOptions<'_>,
) -> Result<RunReport, AdaptationError> {
    let cfg = AdaptationConfig {
        adversarial_mode: AdversarialMode::Hard,
        ..*cfg
    };
    let spec = LoopSpec {
        stream: STREAM_PRETRAIN,
        iterations: cfg.pretrain_iterations,
        scheduled: false,
        final_name: PRETRAIN_CHECKPOINT,
    };
    let state = LoopState {
        start: 0,
        acc: EpochAccumulator::default(),
        best: None,
    };
    run_loop(Learner::new(&cfg)?, bench, &cfg, &spec, state, &mut opts)
}

/// The blending fine-tune loop: `schedule.total_iterations` steps whose
/// mixing weight and soft label come from the schedule or `static_delta`.
///
/// `checkpoint` is either pretrained weights (fresh optimizer state) or a
/// resumable checkpoint from an interrupted run of the same config.
pub fn finetune(
    checkpoint: &Checkpoint,
    bench: &Benchmark,
    cfg: &AdaptationConfig,
    mut opts: RunOptions<'_>,
) -> Result<RunReport, AdaptationError> {
    let mut learner = Learner::new(cfg)?;
    let state = match learner.restore(checkpoint)? {
        Some((start, acc, best)) => LoopState { start, acc, best },
        None => LoopState {
            start: 0,
            acc: EpochAccumulator::default(),
            best: None,
        },
    };
    let spec = LoopSpec {
        stream: STREAM_FINETUNE,
        iterations: cfg.schedule.total_iterations,
        scheduled: true,
        final_name: FINAL_CHECKPOINT,
    };
    run_loop(learner, bench, cfg, &spec, state, &mut opts)
}

/// Supervised training on clean source images only, for the same number of
/// steps as pretraining plus fine-tuning.
pub fn train_source_only(
    bench: &Benchmark,
    cfg: &AdaptationConfig,
    mut opts: RunOptions<'_>,
) -> Result<RunReport, AdaptationError> {
    let cfg = AdaptationConfig {
        weights: LossWeights::ZERO,
        adversarial_mode: AdversarialMode::Hard,
        ..*cfg
    };
    let spec = LoopSpec {
        stream: STREAM_SOURCE_ONLY,
        iterations: cfg.pretrain_iterations + cfg.schedule.total_iterations,
        scheduled: false,
        final_name: FINAL_CHECKPOINT,
    };
    let state = LoopState {
        start: 0,
        acc: EpochAccumulator::default(),
        best: None,
    };
    run_loop(Learner::new(&cfg)?, bench, &cfg, &spec, state, &mut opts)
}

impl Learner {
    /// Detector parameters for the level-independent part of the network.
    pub fn backbone(&self) -> &[Tensor] {
        &self.model.params()[DetectorModel::backbone_indices()]
    }

    pub fn level_params(&self, level: Level) -> &[Tensor] {
        self.discs.level_params(level)
    }
}
