//! Adam training over minibatches of residual indices.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fitloss::{FitContext, FitScheme, LossConfig};
use crate::solver::Dataset;
use crate::symnet::{eps_pred, AnsatzConfig, EpsMode, ModelParams, PhysCoef, PhysicsParams};

/// How ε_pred is searched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EpsSweep {
    Global,
    /// One run per interval [0.1^{i+1}, 0.1^i]; the lowest final loss wins.
    Intervals(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_base: f64,
    /// Step size of trainable physics coefficients (defaults to lr_base).
    pub lr_physics: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    /// Residual indices per step; `None` uses all of them.
    pub minibatch: Option<usize>,
    pub per_scale_lr: bool,
    pub seed: u64,
    pub eps_sweep: EpsSweep,
    /// Record wall-clock seconds in the history (off keeps reruns identical).
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_base: 1e-3,
            lr_physics: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            minibatch: None,
            per_scale_lr: true,
            seed: 0,
            eps_sweep: EpsSweep::Global,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, samples: usize) -> Result<()> {
        if !(self.lr_base > 0.0) || self.lr_physics.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return Err(Error::Config("Adam betas must lie in (0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if let Some(b) = self.minibatch {
            if b == 0 || b > samples {
                return Err(Error::Config(format!("minibatch {b} not in 1..={samples}")));
            }
        }
        if let EpsSweep::Intervals(v) = &self.eps_sweep {
            if v.is_empty() {
                return Err(Error::Config("interval sweep needs at least one interval".into()));
            }
        }
        Ok(())
    }

    /// Steps per epoch for `samples` residual indices.
    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        let b = self.minibatch.unwrap_or(samples);
        samples.div_ceil(b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub iter: usize,
    pub loss: f64,
    pub eps_pred: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss,eps_pred,grad_norm,seconds\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{:e},{:e},{:.3}", r.iter, r.loss, r.eps_pred, r.grad_norm, r.seconds);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected Adam update with per-coordinate step sizes.
pub fn adam_step(flat: &mut [f64], grad: &[f64], state: &mut AdamState, lrs: &[f64], cfg: &TrainConfig) -> Result<()> {
    if flat.len() != grad.len() || grad.len() != state.m.len() || lrs.len() != grad.len() {
        return Err(Error::Dimension("Adam state does not match the parameters".into()));
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..flat.len() {
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * grad[i];
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        flat[i] -= lrs[i] * mh / (vh.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Step size of every flat coordinate: lr·ε_pred^m on scale-m network
/// entries when `per_scale_lr` is set.
pub fn learning_rates(params: &ModelParams, cfg: &TrainConfig) -> Vec<f64> {
    let eps = eps_pred(&params.scale);
    let mut lrs = Vec::with_capacity(params.len());
    for b in &params.blocks {
        for (m, lp) in b.scales.iter().enumerate() {
            let f = if cfg.per_scale_lr { eps.powi(m as i32) } else { 1.0 };
            lrs.extend(std::iter::repeat_n(cfg.lr_base * f, lp.len()));
        }
    }
    lrs.push(cfg.lr_base);
    let lp = cfg.lr_physics.unwrap_or(cfg.lr_base);
    lrs.resize(params.len(), lp);
    lrs
}

/// Batch loss gradient with respect to `params.flatten()`.
pub fn gradient(ctx: &FitContext, params: &ModelParams, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    ctx.loss_and_grad(params, Some(batch))
}

/// Physics coefficients a scheme without physics terms must not carry.
pub fn physics_for(scheme: FitScheme, physics: PhysicsParams) -> PhysicsParams {
    if scheme.uses_physics() {
        physics
    } else {
        PhysicsParams { sigma_s: PhysCoef::Zero, sigma_a: PhysCoef::Zero, source: PhysCoef::Zero }
    }
}

/// Outcome of a training run. `aborted` holds the divergence error when
/// training stopped early; `params` are then the last finite iterate.
#[derive(Debug)]
pub struct TrainRun {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub final_loss: f64,
    pub eps_mode: EpsMode,
    pub aborted: Option<Error>,
}

/// Trains from `ModelParams::init(…, seed)`; in interval mode one run per
/// interval, returning the run with the lowest final full-batch loss.
pub fn train(
    ds: &Dataset,
    acfg: &AnsatzConfig,
    lcfg: &LossConfig,
    tcfg: &TrainConfig,
    scheme: FitScheme,
    physics: PhysicsParams,
) -> Result<TrainRun> {
    let ctx = FitContext::new(ds, acfg, lcfg, scheme)?;
    tcfg.validate(ctx.samples())?;
    let physics = physics_for(scheme, physics);
    let modes: Vec<EpsMode> = match &tcfg.eps_sweep {
        EpsSweep::Global => vec![EpsMode::Global],
        EpsSweep::Intervals(v) => v.iter().map(|&i| EpsMode::Interval(i)).collect(),
    };
    let mut best: Option<TrainRun> = None;
    for mode in modes {
        let init = ModelParams::init(acfg, mode, physics.clone(), tcfg.seed);
        let run = train_from(&ctx, init, tcfg)?;
        let better = match &best {
            None => true,
            Some(b) => match (&b.aborted, &run.aborted) {
                (Some(_), None) => true,
                (None, Some(_)) => false,
                _ => run.final_loss < b.final_loss,
            },
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one mode"))
}

/// Runs the optimizer from the given initial parameters.
pub fn train_from(ctx: &FitContext, init: ModelParams, tcfg: &TrainConfig) -> Result<TrainRun> {
    let samples = ctx.samples();
    tcfg.validate(samples)?;
    let bsize = tcfg.minibatch.unwrap_or(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut params = init;
    let mut flat = params.flatten();
    let mut state = AdamState::new(flat.len());
    let mut history = TrainHistory::default();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..samples).collect();
    let mut iter = 0;
    let mut aborted = None;
    'epochs: for _ in 0..tcfg.epochs {
        if bsize < samples {
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(bsize) {
            let (loss, grad) = match gradient(ctx, &params, batch) {
                Ok(v) => v,
                Err(Error::Divergence { path, .. }) => {
                    aborted = Some(Error::Divergence { iter, path });
                    break 'epochs;
                }
                Err(e @ (Error::Scale(_) | Error::StageDivergence(_) | Error::Overflow(_))) => {
                    aborted = Some(Error::Divergence { iter, path: e.to_string() });
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let gn = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            history.records.push(HistoryRecord {
                iter,
                loss,
                eps_pred: eps_pred(&params.scale),
                grad_norm: gn,
                seconds: if tcfg.timing { start.elapsed().as_secs_f64() } else { 0.0 },
            });
            let lrs = learning_rates(&params, tcfg);
            let mut next = flat.clone();
            adam_step(&mut next, &grad, &mut state, &lrs, tcfg)?;
            if let Some(k) = next.iter().position(|x| !x.is_finite()) {
                aborted = Some(Error::Divergence { iter, path: params.param_path(k) });
                break 'epochs;
            }
            flat = next;
            params.unflatten(&flat)?;
            iter += 1;
        }
    }
    let final_loss = if aborted.is_some() { f64::INFINITY } else { ctx.loss_value(&params, None).unwrap_or(f64::INFINITY) };
    let eps_mode = params.scale.mode;
    Ok(TrainRun { params, history, final_loss, eps_mode, aborted })
}
