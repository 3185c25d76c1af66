//! Training: reverse-mode gradients over the full pipeline, AdamW with a
//! one-cycle schedule, the training loop with checkpointing, and the
//! finite-difference gradient oracle.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointState};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{robust_loss_var, LossConfig, Metrics, MetricsAccum};
use crate::geometry::{augment_flip, random_sample, ScenePair};
use crate::matrix::{Matrix, Scalar};
use crate::model::{forward, init_params, predict, Binding, ModelConfig, ParamSet, BN_MOMENTUM};
use crate::rng::Rng;
use crate::tape::{Graph, VarId};
use crate::tokenizer::Phase;

/// AdamW hyperparameters (decoupled weight decay, bias-corrected moments).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Per-parameter moment accumulators and the step counter (doubles as the
/// schedule position).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<S> {
    pub m: BTreeMap<String, Matrix<S>>,
    pub v: BTreeMap<String, Matrix<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(params: &ParamSet<S>) -> Self {
        let zeros_like = |set: &ParamSet<S>| {
            set.params()
                .map(|(k, t)| (k.clone(), Matrix::zeros(t.rows(), t.cols())))
                .collect::<BTreeMap<_, _>>()
        };
        OptimState {
            m: zeros_like(params),
            v: zeros_like(params),
            step: 0,
        }
    }
}

/// Whether a parameter receives weight decay: norm scale/shift parameters
/// (path segments `bn` or `ln`) are excluded.
pub fn decays(path: &str) -> bool {
    !path.split('/').any(|seg| seg == "bn" || seg == "ln")
}

/// One AdamW update:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`
/// with `beta = (0.9, 0.999)`. A NaN gradient aborts before any state is
/// touched.
pub fn adamw_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &BTreeMap<String, Matrix<S>>,
    state: &mut OptimState<S>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (path, p) in params.params() {
        let g = grads.get(path).ok_or_else(|| {
            Error::invalid_argument(format!("missing gradient for parameter {path}"))
        })?;
        if g.shape() != p.shape() {
            return Err(Error::invalid_argument(format!(
                "gradient shape {:?} != parameter shape {:?} at {path}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::numeric(format!("non-finite gradient at {path}")));
        }
    }
    let t = state.step + 1;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let bc1 = S::from_f64(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = S::from_f64(1.0 - cfg.beta2.powi(t as i32));
    let lr_s = S::from_f64(lr);
    let eps = S::from_f64(cfg.eps);
    for (path, p) in params.params_mut() {
        let g = &grads[path.as_str()];
        let m = state.m.get_mut(path.as_str()).expect("moment m");
        let v = state.v.get_mut(path.as_str()).expect("moment v");
        let wd = if decays(path) {
            S::from_f64(cfg.weight_decay)
        } else {
            S::zero()
        };
        let one = S::one();
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let pi = p.data()[i];
            p.data_mut()[i] = pi - lr_s * (m_hat / (v_hat.sqrt() + eps) + wd * pi);
        }
    }
    state.step = t;
    Ok(())
}

/// One-cycle schedule: linear warmup from `lr_max / 25` to `lr_max` over the
/// first 30% of steps, then cosine annealing down to `lr_max / 1e4` at the
/// final step.
pub fn onecycle_lr(step: usize, total_steps: usize, lr_max: f64) -> Result<f64> {
    if total_steps == 0 || step >= total_steps {
        return Err(Error::invalid_argument(format!(
            "schedule step {step} out of range for {total_steps} total steps"
        )));
    }
    let last = total_steps - 1;
    let warmup = (0.3 * last as f64).round() as usize;
    let start = lr_max / 25.0;
    let end = lr_max / 1e4;
    if step <= warmup {
        if warmup == 0 {
            return Ok(lr_max);
        }
        return Ok(start + (lr_max - start) * step as f64 / warmup as f64);
    }
    let t = (step - warmup) as f64 / (last - warmup) as f64;
    Ok(end + (lr_max - end) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Run a forward/loss build and return the loss value plus named gradients
/// for every parameter (zeros for parameters the loss does not touch).
pub fn grad<S: Scalar>(
    params: &ParamSet<S>,
    build: impl FnOnce(&mut Graph<S>, &Binding) -> Result<VarId>,
) -> Result<(S, BTreeMap<String, Matrix<S>>)> {
    let mut g: Graph<S> = Graph::new();
    let binding = Binding::new(&mut g, params);
    let loss = build(&mut g, &binding)?;
    let value = g.scalar(loss);
    let mut grads = g.backward(loss);
    let named = params
        .params()
        .map(|(path, p)| {
            let gm = grads
                .take(binding.var(path))
                .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()));
            (path.clone(), gm)
        })
        .collect();
    Ok((value, named))
}

/// Result of a finite-difference sweep: the largest relative error over all
/// parameter coordinates and where it occurred.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub coords_checked: usize,
}

/// Central-difference oracle: evaluates the loss at `p +- h` per coordinate
/// (f64) and compares against the reverse-mode gradients. The relative error
/// uses `|a - n| / max(1, |a|, |n|)` so tiny gradients are judged absolutely.
pub fn finite_difference_check(
    params: &ParamSet<f64>,
    h: f64,
    build: impl Fn(&mut Graph<f64>, &Binding) -> Result<VarId>,
) -> Result<FdReport> {
    let (_, analytic) = grad(params, &build)?;
    let eval = |set: &ParamSet<f64>| -> Result<f64> {
        let mut g: Graph<f64> = Graph::new();
        let binding = Binding::new(&mut g, set);
        let loss = build(&mut g, &binding)?;
        Ok(g.scalar(loss))
    };
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: String::new(),
        coords_checked: 0,
    };
    let paths: Vec<String> = params.params().map(|(p, _)| p.clone()).collect();
    for path in &paths {
        let len = params.param(path).unwrap().len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.param_mut(path).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.param_mut(path).unwrap().data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[path].data()[i];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{path}[{i}] analytic={a:.3e} numeric={numeric:.3e}");
            }
        }
    }
    Ok(report)
}

/// Training-run configuration. Desk-scale defaults; the loss follows the
/// summed robust loss over all points unless flagged otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub n_points: usize,
    pub seed: u64,
    pub augment: bool,
    /// Restrict the loss to valid (non-occluded) points.
    pub loss_on_valid_only: bool,
    pub loss_mean: bool,
    /// Evaluate on the dataset every this many steps (0 = never).
    pub eval_every: usize,
    /// Periodic checkpoint interval in steps (0 = initial/final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr_max: 2e-4,
            weight_decay: 1e-4,
            total_steps: 1000,
            batch_size: 2,
            n_points: 256,
            seed: 0,
            augment: true,
            loss_on_valid_only: false,
            loss_mean: false,
            eval_every: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Key=value echo of the resolved configuration, one setting per line.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("backbone", self.model.backbone.as_str().to_string()),
            (
                "backbone_widths",
                self.model
                    .backbone_widths
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("dim", self.model.dim.to_string()),
            ("dynamic_graph", self.model.dynamic_graph.to_string()),
            ("gct_layers", self.model.gct_layers.to_string()),
            ("k", self.model.k.to_string()),
            ("local_transformer", self.model.local_transformer.to_string()),
            ("lr", format!("{:e}", self.lr_max)),
            ("weight_decay", format!("{:e}", self.weight_decay)),
            ("steps", self.total_steps.to_string()),
            ("batch", self.batch_size.to_string()),
            ("points", self.n_points.to_string()),
            ("seed", self.seed.to_string()),
            ("augment", self.augment.to_string()),
            ("loss_on_valid_only", self.loss_on_valid_only.to_string()),
            ("loss_mean", self.loss_mean.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ] {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }
}

/// Everything a finished (or aborted-at-limit) run hands back.
pub struct TrainOutput {
    pub params: ParamSet<f32>,
    pub optim: OptimState<f32>,
    pub loss_log: Vec<f32>,
    pub log_lines: Vec<String>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Metrics over both evaluation splits. `non_occluded` is absent when every
/// point is occluded.
pub struct EvalReport {
    pub all: Metrics,
    pub non_occluded: Option<Metrics>,
}

/// Evaluate a prediction function over scenes, pooling per point. Emits the
/// "all points" and "non-occluded only" splits.
pub fn evaluate_with(
    scenes: &[ScenePair],
    mut predict_fn: impl FnMut(&ScenePair) -> Result<Matrix<f32>>,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::invalid_argument("evaluation over empty scene list"));
    }
    let mut all = MetricsAccum::new();
    let mut nonocc = MetricsAccum::new();
    for scene in scenes {
        let pred = predict_fn(scene)?;
        let every: Vec<bool> = vec![true; scene.n_source()];
        let visible: Vec<bool> = scene.occlusion.iter().map(|&o| !o).collect();
        all.add_flow(&pred, &scene.gt_flow, &every)?;
        nonocc.add_flow(&pred, &scene.gt_flow, &visible)?;
    }
    Ok(EvalReport {
        all: all.finish()?,
        non_occluded: nonocc.finish().ok(),
    })
}

/// Evaluate a trained model over scenes.
pub fn evaluate(
    params: &ParamSet<f32>,
    cfg: &ModelConfig,
    scenes: &[ScenePair],
) -> Result<EvalReport> {
    evaluate_with(scenes, |scene| predict(params, cfg, &scene.source, &scene.target))
}

// Tag mixed into the seed for the data-sampling stream so it is independent
// of the parameter-init stream (which uses the seed directly).
const DATA_STREAM_TAG: u64 = 0xDA7A_5EED_0BAD_CAFE;

/// Train from a fresh initialization.
pub fn train(cfg: &TrainConfig, dataset: &[ScenePair], out_dir: Option<&Path>) -> Result<TrainOutput> {
    let params = init_params::<f32>(&cfg.model, cfg.seed);
    let optim = OptimState::new(&params);
    let rng = Rng::new(cfg.seed ^ DATA_STREAM_TAG);
    run_training(cfg, dataset, out_dir, params, optim, rng)
}

/// Resume from a checkpoint; the config must hash-match the one that wrote it.
pub fn resume(
    cfg: &TrainConfig,
    dataset: &[ScenePair],
    ckpt: &Path,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    let state = load_checkpoint(ckpt, cfg.model.hash())?;
    run_training(cfg, dataset, out_dir, state.params, state.optim, state.rng)
}

fn write_log(out_dir: Option<&Path>, lines: &[String]) -> Result<()> {
    if let Some(dir) = out_dir {
        let mut f = File::create(dir.join("train_log.txt"))?;
        for line in lines {
            writeln!(f, "{line}")?;
        }
    }
    Ok(())
}

fn save_state(
    dir: &Path,
    name: &str,
    cfg: &TrainConfig,
    params: &ParamSet<f32>,
    optim: &OptimState<f32>,
    rng: &Rng,
) -> Result<PathBuf> {
    let path = dir.join(name);
    save_checkpoint(
        &path,
        &CheckpointState {
            params: params.clone(),
            optim: optim.clone(),
            rng: rng.clone(),
        },
        cfg.model.hash(),
    )?;
    Ok(path)
}

/// Divergence handling: persist the pre-step state as the last good
/// checkpoint, flush logs, and wrap everything into a numeric error.
#[allow(clippy::too_many_arguments)]
fn abort_step(
    msg: &str,
    step: usize,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    params: &ParamSet<f32>,
    optim: &OptimState<f32>,
    rng_at_step_start: &Rng,
    log_lines: &[String],
) -> Error {
    let mut full = format!("{msg} at step {step}");
    if let Some(dir) = out_dir {
        match save_state(
            dir,
            "checkpoint_last_good.gmsf",
            cfg,
            params,
            optim,
            rng_at_step_start,
        ) {
            Ok(path) => full.push_str(&format!("; last good state saved to {}", path.display())),
            Err(e) => full.push_str(&format!("; failed to save last good state: {e}")),
        }
    }
    let _ = write_log(out_dir, log_lines);
    Error::numeric(full)
}

fn run_training(
    cfg: &TrainConfig,
    dataset: &[ScenePair],
    out_dir: Option<&Path>,
    mut params: ParamSet<f32>,
    mut optim: OptimState<f32>,
    mut rng: Rng,
) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(Error::invalid_argument("training dataset is empty"));
    }
    if cfg.batch_size == 0 || cfg.n_points == 0 {
        return Err(Error::invalid_argument("batch_size and n_points must be positive"));
    }
    let start = optim.step as usize;
    if start > cfg.total_steps {
        return Err(Error::invalid_argument(format!(
            "checkpoint is at step {start}, beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let loss_cfg = LossConfig {
        mean: cfg.loss_mean,
        ..LossConfig::default()
    };
    let mut loss_log = Vec::new();
    let mut log_lines = Vec::new();
    if let (Some(dir), true) = (out_dir, start == 0) {
        save_state(dir, "checkpoint_init.gmsf", cfg, &params, &optim, &rng)?;
    }

    for step in start..cfg.total_steps {
        let rng_at_step_start = rng.clone();
        let lr = onecycle_lr(step, cfg.total_steps, cfg.lr_max)?;

        let mut g: Graph<f32> = Graph::new();
        let binding = Binding::new(&mut g, &params);
        let mut scene_losses = Vec::with_capacity(cfg.batch_size);
        let mut bn_updates = Vec::new();
        for _ in 0..cfg.batch_size {
            let idx = rng.below(dataset.len());
            let sample_seed = rng.next_u64();
            let aug_seed = rng.next_u64();
            let scene = &dataset[idx];
            let n = cfg.n_points.min(scene.n_source()).min(scene.n_target());
            let sampled = random_sample(scene, n, sample_seed)?;
            let scene = if cfg.augment {
                augment_flip(&sampled, aug_seed)
            } else {
                sampled
            };
            let pass = forward(
                &mut g,
                &binding,
                &cfg.model,
                scene.source.points(),
                scene.target.points(),
                Phase::Train,
            )?;
            if !g.value(pass.v_final).all_finite() {
                return Err(abort_step(
                    "training diverged (non-finite prediction)",
                    step,
                    cfg,
                    out_dir,
                    &params,
                    &optim,
                    &rng_at_step_start,
                    &log_lines,
                ));
            }
            bn_updates.extend(pass.bn_updates);
            let gt = g.constant(scene.gt_flow.clone());
            let mask: Vec<bool> = if cfg.loss_on_valid_only {
                scene.occlusion.iter().map(|&o| !o).collect()
            } else {
                vec![true; scene.n_source()]
            };
            let (loss, _) = robust_loss_var(&mut g, pass.v_final, gt, &mask, &loss_cfg)?;
            scene_losses.push(loss);
        }
        let mut total = scene_losses[0];
        for &l in &scene_losses[1..] {
            total = g.add(total, l);
        }
        let total = g.scale(total, 1.0 / cfg.batch_size as f64);
        let loss_value = g.scalar(total);
        if !loss_value.is_finite() {
            return Err(abort_step(
                "training diverged (non-finite loss)",
                step,
                cfg,
                out_dir,
                &params,
                &optim,
                &rng_at_step_start,
                &log_lines,
            ));
        }

        let mut grads = g.backward(total);
        let named: BTreeMap<String, Matrix<f32>> = params
            .params()
            .map(|(path, p)| {
                let gm = grads
                    .take(binding.var(path))
                    .unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols()));
                (path.clone(), gm)
            })
            .collect();

        // Fold batch statistics into the running averages, in forward order.
        for (prefix, node) in &bn_updates {
            let (mean, var) = g.bn_batch_stats(*node).expect("train-mode bn node");
            for (suffix, batch) in [("mean", mean), ("var", var)] {
                let buf = params
                    .buffer_mut(&format!("{prefix}/{suffix}"))
                    .expect("bn running buffer");
                for (r, b) in buf.data_mut().iter_mut().zip(batch.data()) {
                    *r = (BN_MOMENTUM as f32) * *r + (1.0 - BN_MOMENTUM as f32) * *b;
                }
            }
        }

        let adam_cfg = AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        };
        if let Err(e) = adamw_step(&mut params, &named, &mut optim, lr, &adam_cfg) {
            return Err(abort_step(
                &format!("optimizer aborted ({e})"),
                step,
                cfg,
                out_dir,
                &params,
                &optim,
                &rng_at_step_start,
                &log_lines,
            ));
        }

        log_lines.push(format!("step={step} lr={lr:.9e} loss={loss_value:.9e}"));
        loss_log.push(loss_value);

        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let report = evaluate(&params, &cfg.model, dataset)?;
            log_lines.push(format!("eval step={step} {}", report.all.to_record("all")));
            if let Some(m) = &report.non_occluded {
                log_lines.push(format!("eval step={step} {}", m.to_record("non-occluded")));
            }
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                save_state(
                    dir,
                    &format!("checkpoint_step{:06}.gmsf", step + 1),
                    cfg,
                    &params,
                    &optim,
                    &rng,
                )?;
            }
        }
    }

    let mut final_checkpoint = None;
    if let Some(dir) = out_dir {
        if cfg.total_steps > 0 {
            final_checkpoint = Some(save_state(
                dir,
                "checkpoint_final.gmsf",
                cfg,
                &params,
                &optim,
                &rng,
            )?);
        }
        write_log(out_dir, &log_lines)?;
    }
    Ok(TrainOutput {
        params,
        optim,
        loss_log,
        log_lines,
        final_checkpoint,
    })
}
