//! Losses, the stochastic norm estimator, Adam, and the training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::solve_reference;
use crate::error::{Error, Result};
use crate::graph::CoatesGraph;
use crate::krylov::{gmres, GmresOptions};
use crate::neural::{forward_on_tape, learned_preconditioner, ModelParams, Mode, Tape, TapedFactors, Var};
use crate::sparse::CsrMatrix;

/// One problem `(A, x, b)`; `x` is absent for evaluation-only samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub a: CsrMatrix,
    pub x: Option<Vec<f64>>,
    pub b: Vec<f64>,
    /// Seed the sample was generated from; also seeds its probe vectors.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// `‖Aw − Pw‖²`
    Max,
    /// `‖P A⁻¹ w − w‖²`
    Min,
    /// `‖P x − b‖²`
    MinHat,
    /// `‖Aw − Pw‖² + α ‖P x‖²`
    Combined,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Max => "max",
            LossKind::Min => "min",
            LossKind::MinHat => "min-hat",
            LossKind::Combined => "combined",
        }
    }

    /// Whether the loss draws a probe vector `w`.
    pub fn uses_probe(self) -> bool {
        !matches!(self, LossKind::MinHat)
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "min" => Ok(Self::Min),
            "min-hat" | "min_hat" => Ok(Self::MinHat),
            "combined" => Ok(Self::Combined),
            _ => Err(Error::Config(format!("unknown loss `{s}` (max|min|min-hat|combined)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub clip: f64,
    pub eps: f64,
    pub seed: u64,
    pub hutchinson_samples: usize,
    /// GMRES tolerance of the validation solves.
    pub val_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Max,
            alpha: 0.2,
            lr: 1e-3,
            epochs: 100,
            batch: 1,
            clip: 1.0,
            eps: 1e-4,
            seed: 0,
            hutchinson_samples: 1,
            val_tol: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0) {
            return bad(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip must be positive, got {}", self.clip));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch != 1 {
            return bad(format!("only batch size 1 is supported, got {}", self.batch));
        }
        if self.hutchinson_samples == 0 {
            return bad("hutchinson_samples must be at least 1".into());
        }
        if !(self.val_tol > 0.0) {
            return bad(format!("validation tolerance must be positive, got {}", self.val_tol));
        }
        Ok(())
    }
}

/// `‖v‖²` of the tape vector `v` minus a constant.
fn squared_distance(tape: &mut Tape, v: Var, target: Vec<f64>) -> Var {
    let t = tape.column(target);
    let d = tape.sub(v, t);
    tape.squared_norm(d)
}

/// `‖A w − L (U w)‖²`.
pub fn loss_max(tape: &mut Tape, f: &TapedFactors, a: &CsrMatrix, w: &[f64]) -> Result<Var> {
    let aw = a.spmv(w)?;
    let wv = tape.column(w.to_vec());
    let pw = f.apply(tape, wv);
    Ok(squared_distance(tape, pw, aw))
}

/// `‖P z − w‖²` with `z = A⁻¹ w` supplied as a constant.
pub fn loss_min_with(tape: &mut Tape, f: &TapedFactors, z: &[f64], w: &[f64]) -> Var {
    let zv = tape.column(z.to_vec());
    let pz = f.apply(tape, zv);
    squared_distance(tape, pz, w.to_vec())
}

/// `‖P A⁻¹ w − w‖²`; `A⁻¹ w` comes from the reference solver and carries
/// no gradient.
pub fn loss_min(tape: &mut Tape, f: &TapedFactors, a: &CsrMatrix, w: &[f64]) -> Result<Var> {
    let z = solve_reference(a, w)?;
    Ok(loss_min_with(tape, f, &z, w))
}

fn solution(sample: &TrainSample) -> Result<&[f64]> {
    sample.x.as_deref().ok_or_else(|| {
        Error::Config(format!("sample with seed {} has no reference solution", sample.seed))
    })
}

/// `‖P x − b‖²`.
pub fn loss_min_hat(tape: &mut Tape, f: &TapedFactors, sample: &TrainSample) -> Result<Var> {
    let x = solution(sample)?;
    Ok(loss_min_with(tape, f, x, &sample.b))
}

/// `‖A w − P w‖² + α ‖P x‖²`.
pub fn loss_combined(
    tape: &mut Tape,
    f: &TapedFactors,
    sample: &TrainSample,
    w: &[f64],
    alpha: f64,
) -> Result<Var> {
    let x = solution(sample)?;
    let first = loss_max(tape, f, &sample.a, w)?;
    let xv = tape.column(x.to_vec());
    let px = f.apply(tape, xv);
    let second = tape.squared_norm(px);
    let second = tape.scale(second, alpha);
    Ok(tape.add(first, second))
}

/// Records `kind` averaged over the probe vectors in `probes`. `inverses`
/// optionally supplies `A⁻¹ w` for each probe (used by [`LossKind::Min`]).
pub fn record_loss(
    tape: &mut Tape,
    f: &TapedFactors,
    kind: LossKind,
    alpha: f64,
    sample: &TrainSample,
    probes: &[Vec<f64>],
    inverses: Option<&[Vec<f64>]>,
) -> Result<Var> {
    if kind == LossKind::MinHat {
        return loss_min_hat(tape, f, sample);
    }
    if probes.is_empty() {
        return Err(Error::Config("loss needs at least one probe vector".into()));
    }
    let mut total: Option<Var> = None;
    for (i, w) in probes.iter().enumerate() {
        let term = match kind {
            LossKind::Max => loss_max(tape, f, &sample.a, w)?,
            LossKind::Min => match inverses {
                Some(z) => loss_min_with(tape, f, &z[i], w),
                None => loss_min(tape, f, &sample.a, w)?,
            },
            LossKind::Combined => loss_combined(tape, f, sample, w, alpha)?,
            LossKind::MinHat => unreachable!(),
        };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term),
        });
    }
    let total = total.expect("at least one probe");
    Ok(if probes.len() == 1 {
        total
    } else {
        tape.scale(total, 1.0 / probes.len() as f64)
    })
}

/// Loss value and flattened parameter gradient for one sample.
pub fn loss_and_gradient(
    params: &ModelParams,
    graph: &CoatesGraph,
    kind: LossKind,
    alpha: f64,
    sample: &TrainSample,
    probes: &[Vec<f64>],
    inverses: Option<&[Vec<f64>]>,
    mode: Mode,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let f = forward_on_tape(&mut tape, params, graph, mode)?;
    let loss = record_loss(&mut tape, &f, kind, alpha, sample, probes, inverses)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss, 1.0)?;
    Ok((value, f.param_grads(&grads)))
}

/// Loss value only.
pub fn loss_value(
    params: &ModelParams,
    graph: &CoatesGraph,
    kind: LossKind,
    alpha: f64,
    sample: &TrainSample,
    probes: &[Vec<f64>],
    inverses: Option<&[Vec<f64>]>,
    mode: Mode,
) -> Result<f64> {
    let mut tape = Tape::new();
    let f = forward_on_tape(&mut tape, params, graph, mode)?;
    let loss = record_loss(&mut tape, &f, kind, alpha, sample, probes, inverses)?;
    Ok(tape.scalar(loss))
}

pub fn standard_normal<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Mean of `‖M w‖²` over `samples` standard normal draws; unbiased for `‖M‖_F²`.
pub fn hutchinson_estimate<R: Rng>(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    n: usize,
    samples: usize,
    rng: &mut R,
) -> f64 {
    assert!(samples >= 1, "at least one sample");
    let total: f64 = (0..samples)
        .map(|_| {
            let w = standard_normal(rng, n);
            apply(&w).iter().map(|v| v * v).sum::<f64>()
        })
        .sum();
    total / samples as f64
}

/// Scales `grads` onto the ball of radius `max_norm` if outside it.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    pub val_iterations: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,mean_train_loss,val_iterations";

    pub fn csv_row(&self) -> String {
        format!("{},{:e},{}", self.epoch, self.mean_train_loss, self.val_iterations)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams,
    /// Epoch of `best`; 0 means the initial parameters.
    pub best_epoch: usize,
    /// Parameters after the last epoch.
    pub last: ModelParams,
    pub history: Vec<EpochRecord>,
}

/// Mean GMRES iteration count with the learned preconditioner. Solves that
/// fail or do not converge count as `n` iterations.
pub fn validation_iterations(params: &ModelParams, samples: &[TrainSample], tol: f64) -> f64 {
    let counts: Vec<usize> = samples
        .par_iter()
        .map(|s| {
            let n = s.a.n();
            learned_preconditioner(params, &s.a)
                .and_then(|p| gmres(&s.a, &p, &s.b, &vec![0.0; n], &GmresOptions::with_tol(tol)))
                .map(|r| if r.converged { r.iterations } else { n })
                .unwrap_or(n)
        })
        .collect();
    counts.iter().sum::<usize>() as f64 / samples.len() as f64
}

/// Probe stream of one training sample.
fn probe_rng(sample_seed: u64, run_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    rng.set_stream(run_seed);
    rng
}

/// Adam with batch size 1 over `train` for `cfg.epochs` epochs, keeping the
/// parameters with the fewest mean validation iterations (earliest epoch on
/// ties). `on_epoch` sees each record as soon as it is complete.
pub fn train(
    init: ModelParams,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be nonempty".into()));
    }
    let mut params = init;
    params.eps = cfg.eps;
    params.validate()?;
    let graphs: Vec<CoatesGraph> = train.iter().map(|s| CoatesGraph::from_matrix(&s.a)).collect();
    let mut rngs: Vec<ChaCha8Rng> = train.iter().map(|s| probe_rng(s.seed, cfg.seed)).collect();
    let mut flat = params.flat();
    let mut adam = AdamState::new(flat.len());
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_metric = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        for (i, sample) in train.iter().enumerate() {
            let n = sample.a.n();
            let probes: Vec<Vec<f64>> = if cfg.loss.uses_probe() {
                (0..cfg.hutchinson_samples).map(|_| standard_normal(&mut rngs[i], n)).collect()
            } else {
                Vec::new()
            };
            let inverses = if cfg.loss == LossKind::Min {
                Some(
                    probes
                        .iter()
                        .map(|w| solve_reference(&sample.a, w))
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| Error::Generation(format!("sample {i} (seed {}): {e}", sample.seed)))?,
                )
            } else {
                None
            };
            let diverged = |what: String| Error::Divergence(format!("epoch {epoch}, sample {i}: {what}"));
            let (loss, mut grads) = loss_and_gradient(
                &params,
                &graphs[i],
                cfg.loss,
                cfg.alpha,
                sample,
                &probes,
                inverses.as_deref(),
                Mode::Train,
            )
            .map_err(|e| match e {
                Error::Divergence(m) => diverged(m),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}")));
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            clip_gradients(&mut grads, cfg.clip);
            adam_step(&mut flat, &grads, &mut adam, cfg.lr);
            params.set_flat(&flat);
            loss_sum += loss;
        }
        let record = EpochRecord {
            epoch,
            mean_train_loss: loss_sum / train.len() as f64,
            val_iterations: validation_iterations(&params, val, cfg.val_tol),
        };
        if record.val_iterations < best_metric {
            best_metric = record.val_iterations;
            best = params.clone();
            best_epoch = epoch;
        }
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: params,
        history,
    })
}
