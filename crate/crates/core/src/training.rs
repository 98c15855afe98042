//! Multi-task TD pretraining: sample an evaluation task, roll a trajectory,
//! slide a context window over it, and nudge the transformer parameters with
//! the TD semi-gradient
//!
//! ```text
//!   theta <- theta + alpha * (R + gamma*TF(Z0') - TF(Z0)) * grad TF(Z0)
//! ```
//!
//! where the gradient flows only through `TF(Z0)`, never the bootstrapped
//! target. Also hosts the Adam optimizer, parameter initialization, and the
//! one-scalar learning-rate fit that defines the batch-TD reference model.

use std::collections::HashMap;
use std::sync::Mutex;

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

use crate::attention::{forward, AttnKind, Layer, MaskKind, TransformerParams};
use crate::autodiff::{grad_output, LayerGrad};
use crate::error::{Error, Result};
use crate::metrics::{
    elementwise_stats, eval_values, implicit_weight_similarity, msve, sensitivity_similarity,
    td_baseline, value_difference, MetricRecord, TdBaseline,
};
use crate::mrp::{
    gen_boyan, gen_boyan_representable, gen_cartpole, sample_trajectory, stationary_distribution,
    true_value, Task,
};
use crate::numerics::{Matrix, SeededRng};
use crate::prompt::sliding_prompts;

/// Number of states in the randomized Boyan chains used for pretraining.
pub const BOYAN_STATES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSource {
    Boyan,
    BoyanRepresentable,
    Cartpole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// context length
    pub n: usize,
    /// trajectory length per task
    pub tau: usize,
    /// number of tasks
    pub k: usize,
    pub alpha: f64,
    pub gamma: f64,
    /// layer count
    pub l: usize,
    pub shared: bool,
    pub attn: AttnKind,
    /// feature dimension
    pub d: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub task_source: TaskSource,
    /// metric-logging cadence, in parameter updates
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n: 30,
            tau: 347,
            k: 4000,
            alpha: 0.001,
            gamma: 0.9,
            l: 3,
            shared: true,
            attn: AttnKind::Linear,
            d: 4,
            weight_decay: 1e-6,
            seed: 0,
            task_source: TaskSource::Boyan,
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < self.n + 2 {
            return Err(Error::Config(format!(
                "tau = {} must be at least n+2 = {}",
                self.tau,
                self.n + 2
            )));
        }
        if self.d == 0 || self.n == 0 {
            return Err(Error::Config("n and d must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma = {} outside [0, 1)", self.gamma)));
        }
        if self.alpha < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("negative learning rate or weight decay".into()));
        }
        if self.shared && self.l == 0 {
            return Err(Error::Config("shared transformer needs l >= 1".into()));
        }
        Ok(())
    }

    fn sample_task(&self, rng: &mut SeededRng) -> Result<Task> {
        match self.task_source {
            TaskSource::Boyan => gen_boyan(BOYAN_STATES, self.d, self.gamma, rng),
            TaskSource::BoyanRepresentable => {
                gen_boyan_representable(BOYAN_STATES, self.d, self.gamma, rng).map(|(t, _)| t)
            }
            TaskSource::Cartpole => gen_cartpole(self.d, self.gamma, rng),
        }
    }
}

/// Xavier-uniform initialization with gain 0.1: every entry of every P and Q
/// is drawn from +-gain*sqrt(6/(fan_in+fan_out)); nothing is pinned to zero.
pub fn init_params(cfg: &TrainConfig, rng: &mut SeededRng) -> Result<TransformerParams> {
    cfg.validate()?;
    let dim = 2 * cfg.d + 1;
    let limit = 0.1 * (6.0 / (2 * dim) as f64).sqrt();
    let count = if cfg.shared { 1 } else { cfg.l };
    let layers = (0..count)
        .map(|_| Layer {
            p: Matrix::from_fn(dim, dim, |_, _| rng.uniform(-limit, limit)),
            q: Matrix::from_fn(dim, dim, |_, _| rng.uniform(-limit, limit)),
        })
        .collect();
    TransformerParams::new(layers, cfg.shared, cfg.attn, MaskKind::Td0 { n: cfg.n }, cfg.l)
}

/// Adam moments for one matrix.
#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

impl Moments {
    fn zeros(dim: usize) -> Self {
        Moments { m: Matrix::zeros(dim, dim), v: Matrix::zeros(dim, dim) }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    p: Vec<Moments>,
    q: Vec<Moments>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &TransformerParams) -> Self {
        let dim = params.dim();
        AdamState {
            p: vec![Moments::zeros(dim); params.layers.len()],
            q: vec![Moments::zeros(dim); params.layers.len()],
            t: 0,
        }
    }
}

fn adam_update(target: &mut Matrix, grad: &Matrix, mom: &mut Moments, t: u64, alpha: f64, wd: f64) {
    let b1c = 1.0 - ADAM_BETA1.powi(t as i32);
    let b2c = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..target.rows() {
        for j in 0..target.cols() {
            let g = grad[(i, j)];
            mom.m[(i, j)] = ADAM_BETA1 * mom.m[(i, j)] + (1.0 - ADAM_BETA1) * g;
            mom.v[(i, j)] = ADAM_BETA2 * mom.v[(i, j)] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = mom.m[(i, j)] / b1c;
            let vhat = mom.v[(i, j)] / b2c;
            // decoupled weight decay: multiplicative shrink, then the
            // (ascent-direction) Adam step
            target[(i, j)] *= 1.0 - alpha * wd;
            target[(i, j)] += alpha * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// One Adam step along the ascent direction `grads`.
pub fn adam_step(
    params: &mut TransformerParams,
    grads: &[LayerGrad],
    state: &mut AdamState,
    alpha: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.layers.len() {
        return Err(Error::Dimension("adam_step: gradient count mismatch".into()));
    }
    state.t += 1;
    for (slot, grad) in grads.iter().enumerate() {
        adam_update(&mut params.layers[slot].p, &grad.p, &mut state.p[slot], state.t, alpha, weight_decay);
        adam_update(&mut params.layers[slot].q, &grad.q, &mut state.q[slot], state.t, alpha, weight_decay);
    }
    Ok(())
}

/// TD error and ascent direction for one `(Z0, Z0', R)` window. The target
/// `R + gamma*TF(Z0')` is a constant: only `TF(Z0)` is differentiated.
pub fn semi_gradient_step(
    params: &TransformerParams,
    z0: &crate::prompt::Prompt,
    z0_prime: &crate::prompt::Prompt,
    r: f64,
    gamma: f64,
) -> Result<(f64, Vec<LayerGrad>)> {
    let g = grad_output(z0, params)?;
    let target = r + gamma * forward(z0_prime, params)?.output;
    let delta = target - g.output;
    let direction = g
        .layers
        .iter()
        .map(|lg| LayerGrad { p: lg.p.scale(delta), q: lg.q.scale(delta) })
        .collect();
    Ok((delta, direction))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: TransformerParams,
    pub records: Vec<MetricRecord>,
    /// `(task_index, parameters)` snapshots every 40 tasks.
    pub snapshots: Vec<(usize, TransformerParams)>,
}

/// Tasks between parameter snapshots.
pub const SNAPSHOT_EVERY: usize = 40;

struct EvalSetup {
    task: crate::mrp::FiniteTask,
    v_true: Vec<f64>,
    d_p: Vec<f64>,
    baseline: TdBaseline,
}

fn eval_setup(cfg: &TrainConfig, rng: &mut SeededRng) -> Result<EvalSetup> {
    // the evaluation task is always a finite Boyan chain (MSVE and the
    // stationary weighting need an enumerable state space, which CartPole
    // sources lack)
    let task = gen_boyan(BOYAN_STATES, cfg.d, cfg.gamma, rng)?;
    let finite = task.as_finite().unwrap().clone();
    let v_true = true_value(&finite.mrp, cfg.gamma)?;
    let d_p = stationary_distribution(&finite.mrp.p)?;
    let alpha_star = fit_alpha_for_vtd(cfg)?;
    let baseline = td_baseline(alpha_star, cfg.l, cfg.d, cfg.n)?;
    Ok(EvalSetup { task: finite, v_true, d_p, baseline })
}

fn log_record(
    cfg: &TrainConfig,
    params: &TransformerParams,
    setup: &EvalSetup,
    task_index: usize,
    eval_rng: &mut SeededRng,
) -> Result<MetricRecord> {
    let mut task = Task::Finite(setup.task.clone());
    let traj = sample_trajectory(&mut task, cfg.n, eval_rng)?;
    let prompt = crate::prompt::build_prompt(
        &traj.phis[0..=cfg.n],
        &traj.rewards[0..cfg.n],
        cfg.gamma,
        &traj.phis[cfg.n],
    )?;
    let values = eval_values(&prompt, params, &setup.task)?;
    let (p_br, p_avg, q_tl, q_tr, q_avg) =
        elementwise_stats(&params.layers[0].p, &params.layers[0].q, cfg.d)?;
    Ok(MetricRecord {
        task_index,
        msve: msve(&values, &setup.v_true, &setup.d_p)?,
        p_bottom_right: p_br,
        p_avg_abs_others: p_avg,
        q_trace_left: q_tl,
        q_trace_right: q_tr,
        q_avg_abs_others: q_avg,
        vd: value_difference(params, &setup.baseline, &setup.task, &prompt)?,
        iws: implicit_weight_similarity(params, &setup.baseline, &setup.task, &prompt)?,
        ss: sensitivity_similarity(params, &setup.baseline, &setup.task, &prompt)?,
    })
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let rng = SeededRng::new(cfg.seed);
    let mut init_rng = rng.derive(1);
    let mut task_rng = rng.derive(2);
    let mut eval_rng = rng.derive(3);

    let mut params = init_params(cfg, &mut init_rng)?;
    let mut state = AdamState::new(&params);
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut setup: Option<EvalSetup> = None;
    let mut updates: usize = 0;

    for task_index in 0..cfg.k {
        let mut task = cfg.sample_task(&mut task_rng)?;
        let traj = sample_trajectory(&mut task, cfg.tau + 1, &mut task_rng)?;
        for t in 0..cfg.tau - cfg.n {
            let (z0, z0p, r) = sliding_prompts(&traj, cfg.n, cfg.gamma, t)?;
            let (_, direction) = semi_gradient_step(&params, &z0, &z0p, r, cfg.gamma)?;
            adam_step(&mut params, &direction, &mut state, cfg.alpha, cfg.weight_decay)?;
            updates += 1;
            if cfg.log_every > 0 && updates % cfg.log_every == 0 {
                if setup.is_none() {
                    setup = Some(eval_setup(cfg, &mut eval_rng)?);
                }
                records.push(log_record(
                    cfg,
                    &params,
                    setup.as_ref().unwrap(),
                    task_index,
                    &mut eval_rng,
                )?);
            }
        }
        if (task_index + 1) % SNAPSHOT_EVERY == 0 {
            snapshots.push((task_index + 1, params.clone()));
        }
    }
    Ok(TrainOutput { params, records, snapshots })
}

/// Directional derivative of the forward pass along d theta_TD / d alpha for
/// the one-parameter family `theta_TD(alpha) = construct_td(alpha*I, ...)`.
/// P is constant in alpha; Q's top block row moves by `(-I, +I)` per layer.
pub fn tf_alpha_derivative(
    prompt: &crate::prompt::Prompt,
    alpha: f64,
    l: usize,
    d: usize,
    n: usize,
) -> Result<(f64, f64)> {
    let baseline = td_baseline(alpha, l, d, n)?;
    let g = grad_output(prompt, &baseline.params)?;
    let mut deriv = 0.0;
    for lg in &g.layers {
        for i in 0..d {
            deriv += -lg.q[(i, i)] + lg.q[(i, d + i)];
        }
    }
    Ok((g.output, deriv))
}

type AlphaKey = (usize, usize, usize, u64, TaskSource);
static ALPHA_CACHE: Lazy<Mutex<HashMap<AlphaKey, f64>>> = Lazy::new(|| Mutex::new(HashMap::new()));

/// Tasks consumed by the alpha fit (a one-parameter problem converges far
/// faster than the full transformer).
const ALPHA_FIT_TASKS: usize = 40;
const ALPHA_FIT_LR: f64 = 0.003;

/// Fit the single scalar learning rate of the batch-TD reference model by
/// running the pretraining loop with only alpha trainable. Cached per
/// `(l, n, d, gamma, task_source)` with a fixed internal seed, so every
/// caller sees the same reference model.
pub fn fit_alpha_for_vtd(cfg: &TrainConfig) -> Result<f64> {
    let key: AlphaKey = (cfg.l, cfg.n, cfg.d, cfg.gamma.to_bits(), cfg.task_source);
    if let Some(&alpha) = ALPHA_CACHE.lock().unwrap().get(&key) {
        return Ok(alpha);
    }
    let mut seed = 0x77AE_21B5_u64;
    for part in [cfg.l as u64, cfg.n as u64, cfg.d as u64, cfg.gamma.to_bits()] {
        seed = seed.rotate_left(13) ^ part;
    }
    let mut rng = SeededRng::new(seed);
    let mut alpha = 0.0;
    let (mut m, mut v) = (0.0, 0.0);
    let mut t = 0u64;
    for _ in 0..ALPHA_FIT_TASKS {
        let mut task = cfg.sample_task(&mut rng)?;
        let traj = sample_trajectory(&mut task, cfg.tau + 1, &mut rng)?;
        for w in 0..cfg.tau - cfg.n {
            let (z0, z0p, r) = sliding_prompts(&traj, cfg.n, cfg.gamma, w)?;
            let (out0, deriv) = tf_alpha_derivative(&z0, alpha, cfg.l, cfg.d, cfg.n)?;
            let out_prime =
                forward(&z0p, &td_baseline(alpha, cfg.l, cfg.d, cfg.n)?.params)?.output;
            let delta = r + cfg.gamma * out_prime - out0;
            let g = delta * deriv;
            t += 1;
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = m / (1.0 - ADAM_BETA1.powi(t as i32));
            let vhat = v / (1.0 - ADAM_BETA2.powi(t as i32));
            alpha += ALPHA_FIT_LR * mhat / (vhat.sqrt() + ADAM_EPS);
            if alpha.abs() > 10.0 {
                return Err(Error::Divergence(format!("alpha fit diverged to {alpha}")));
            }
        }
    }
    ALPHA_CACHE.lock().unwrap().insert(key, alpha);
    Ok(alpha)
}
