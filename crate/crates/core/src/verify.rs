//! Numerical verification suites: forward-pass/oracle equivalence across
//! random seeds, the MSVE-vs-context-length demo, and a Monte-Carlo
//! consistency check that the theta* family is closed under the expected
//! pretraining update.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{forward, two_head_forward};
use crate::autodiff::tf1_closed_form;
use crate::constructions::{
    construct_avg_td, construct_rg, construct_td, construct_td_lambda, construct_td_one_layer,
    theta_star,
};
use crate::error::{Error, Result};
use crate::metrics::{eval_values, msve};
use crate::mrp::{
    gen_boyan, gen_boyan_representable, sample_trajectory, stationary_distribution, true_value,
    Task,
};
use crate::numerics::{dot, Matrix, SeededRng};
use crate::oracles::{batch_avg_td, batch_rg, batch_td0, batch_td_lambda};
use crate::prompt::{build_avg_reward_prompt, build_prompt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EquivalenceKind {
    Td0,
    Td0OneLayer,
    Rg,
    TdLambda { lambda: f64 },
    Avg,
}

impl EquivalenceKind {
    pub fn name(&self) -> String {
        match self {
            EquivalenceKind::Td0 => "td0".into(),
            EquivalenceKind::Td0OneLayer => "td0-onelayer".into(),
            EquivalenceKind::Rg => "rg".into(),
            EquivalenceKind::TdLambda { lambda } => format!("td-lambda({lambda})"),
            EquivalenceKind::Avg => "avg".into(),
        }
    }
}

/// Absolute forward-vs-oracle differences, one row per seed, one column per
/// layer 0..=L.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub kind: String,
    pub l: usize,
    pub diffs: Vec<Vec<f64>>,
}

impl EquivalenceReport {
    pub fn max_diff(&self) -> f64 {
        self.diffs.iter().flatten().fold(0.0, |a, &b| a.max(b))
    }

    /// Per-layer maxima over seeds, as log10 (0 maps to f64::NEG_INFINITY).
    pub fn per_layer_log10(&self) -> Vec<f64> {
        (0..=self.l)
            .map(|l| {
                self.diffs.iter().map(|row| row[l]).fold(0.0f64, f64::max).log10()
            })
            .collect()
    }
}

fn equivalence_seed_run(
    kind: EquivalenceKind,
    l: usize,
    n: usize,
    d: usize,
    gamma: f64,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    let phis: Vec<Vec<f64>> = (0..n + 1).map(|_| rng.uniform_vec(d, -1.0, 1.0)).collect();
    let rewards = rng.uniform_vec(n, -1.0, 1.0);
    let query = rng.uniform_vec(d, -1.0, 1.0);
    let layers = if matches!(kind, EquivalenceKind::Td0OneLayer) { 1 } else { l };
    let c_list: Vec<Matrix> = (0..layers)
        .map(|_| Matrix::from_fn(d, d, |_, _| rng.uniform(-1.0, 1.0)))
        .collect();

    let (ys, ws) = match kind {
        EquivalenceKind::Avg => {
            let prompt = build_avg_reward_prompt(&phis, &rewards, &query)?;
            let fwd = two_head_forward(&prompt, &construct_avg_td(&c_list)?)?;
            let ws = batch_avg_td(prompt.context(), &c_list, layers)?;
            ((0..=layers).map(|i| fwd.y(i)).collect::<Vec<_>>(), ws)
        }
        _ => {
            let prompt = build_prompt(&phis, &rewards, gamma, &query)?;
            let params = match kind {
                EquivalenceKind::Td0 => construct_td(&c_list, n)?,
                EquivalenceKind::Td0OneLayer => construct_td_one_layer(&c_list[0], n)?,
                EquivalenceKind::Rg => construct_rg(&c_list, n)?,
                EquivalenceKind::TdLambda { lambda } => {
                    construct_td_lambda(&c_list, n, lambda)?
                }
                EquivalenceKind::Avg => unreachable!(),
            };
            let fwd = forward(&prompt, &params)?;
            let ws = match kind {
                EquivalenceKind::Rg => batch_rg(prompt.context(), &c_list, layers)?,
                EquivalenceKind::TdLambda { lambda } => {
                    batch_td_lambda(prompt.context(), &c_list, layers, lambda)?
                }
                _ => batch_td0(prompt.context(), &c_list, layers)?,
            };
            ((0..=layers).map(|i| fwd.y(i)).collect::<Vec<_>>(), ws)
        }
    };
    Ok((0..ys.len())
        .map(|i| (-dot(&query, &ws[i]) - ys[i]).abs())
        .collect())
}

/// Run the forward pass and the matching oracle on `seeds` random
/// prompt/preconditioner draws, recording per-layer absolute differences.
pub fn verify_equivalence(
    kind: EquivalenceKind,
    l: usize,
    n: usize,
    d: usize,
    seeds: u64,
) -> Result<EquivalenceReport> {
    let gamma = 0.9;
    let effective_l = if matches!(kind, EquivalenceKind::Td0OneLayer) { 1 } else { l };
    let diffs: Result<Vec<Vec<f64>>> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let mut rng = SeededRng::new(0xEC0A_11CE).derive(s + 1);
            equivalence_seed_run(kind, l, n, d, gamma, &mut rng)
        })
        .collect();
    Ok(EquivalenceReport { kind: kind.name(), l: effective_l, diffs: diffs? })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoConfig {
    pub tasks: usize,
    pub grid: Vec<usize>,
    pub layers: usize,
    pub d: usize,
    pub gamma: f64,
    pub states_min: usize,
    pub states_max: usize,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            tasks: 300,
            grid: (1..=40).collect(),
            layers: 15,
            d: 5,
            gamma: 0.9,
            states_min: 5,
            states_max: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoRow {
    pub context_len: usize,
    pub mean_msve: f64,
    pub std_err: f64,
}

/// MSVE of the explicit TD transformer (C = I) against context length,
/// averaged over random representable tasks.
pub fn demo_msve_vs_context(cfg: &DemoConfig) -> Result<Vec<DemoRow>> {
    if cfg.grid.is_empty() || cfg.tasks == 0 {
        return Err(Error::Parameter("demo: empty grid or zero tasks".into()));
    }
    let max_n = *cfg.grid.iter().max().unwrap();
    let mut seed_rng = SeededRng::new(cfg.seed);
    let task_seeds: Vec<u64> = (0..cfg.tasks).map(|_| seed_rng.next_u64()).collect();

    // per task, one trajectory; each grid point reads its prefix
    let per_task: Result<Vec<Vec<f64>>> = task_seeds
        .par_iter()
        .map(|&s| {
            let mut rng = SeededRng::new(s);
            let span = cfg.states_max - cfg.states_min + 1;
            let m = cfg.states_min + (rng.next_u64() % span as u64) as usize;
            let (task, _) = gen_boyan_representable(m, cfg.d, cfg.gamma, &mut rng)?;
            let finite = task.as_finite().unwrap().clone();
            let v_true = true_value(&finite.mrp, cfg.gamma)?;
            let d_p = stationary_distribution(&finite.mrp.p)?;
            let mut t = Task::Finite(finite.clone());
            let traj = sample_trajectory(&mut t, max_n, &mut rng)?;
            cfg.grid
                .iter()
                .map(|&n| {
                    let prompt = build_prompt(
                        &traj.phis[0..=n],
                        &traj.rewards[0..n],
                        cfg.gamma,
                        &traj.phis[n],
                    )?;
                    let params =
                        construct_td(&vec![Matrix::identity(cfg.d); cfg.layers], n)?;
                    let values = eval_values(&prompt, &params, &finite)?;
                    msve(&values, &v_true, &d_p)
                })
                .collect()
        })
        .collect();
    let per_task = per_task?;

    Ok(cfg
        .grid
        .iter()
        .enumerate()
        .map(|(gi, &n)| {
            let samples: Vec<f64> = per_task.iter().map(|row| row[gi]).collect();
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                / (samples.len().saturating_sub(1).max(1)) as f64;
            DemoRow {
                context_len: n,
                mean_msve: mean,
                std_err: (var / samples.len() as f64).sqrt(),
            }
        })
        .collect())
}

/// Monte-Carlo statistics for one coordinate of the expected update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordStat {
    pub name: String,
    pub mean: f64,
    pub std_err: f64,
    pub off_pattern: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantReport {
    pub samples: usize,
    pub coords: Vec<CoordStat>,
    pub pass: bool,
}

/// Number of states in the sampled Boyan tasks (features i.i.d. U(-1,1), so
/// the symmetry assumptions on the feature matrix hold).
const INVARIANT_TASK_STATES: usize = 10;

struct UpdateSample {
    p_top: Vec<f64>,
    p_mid: Vec<f64>,
    q_a: Matrix,
    q_a_prime: Matrix,
    q_a_row: Vec<f64>,
}

fn one_update_sample(
    p0: &Matrix,
    q0: &Matrix,
    n: usize,
    d: usize,
    gamma: f64,
    rng: &mut SeededRng,
) -> Result<UpdateSample> {
    let mut task = gen_boyan(INVARIANT_TASK_STATES, d, gamma, rng)?;
    // S_0..S_{n+2}: n+2 transitions
    let traj = sample_trajectory(&mut task, n + 2, rng)?;
    let z0 = build_prompt(&traj.phis[0..=n], &traj.rewards[0..n], gamma, &traj.phis[n + 1])?;
    let z0p =
        build_prompt(&traj.phis[1..=n + 1], &traj.rewards[1..n + 1], gamma, &traj.phis[n + 2])?;
    let r = traj.rewards[n + 1];
    let cf0 = tf1_closed_form(&z0, p0, q0)?;
    let cfp = tf1_closed_form(&z0p, p0, q0)?;
    let delta = r + gamma * cfp.value - cf0.value;
    Ok(UpdateSample {
        p_top: cf0.grad_p[0..d].iter().map(|g| delta * g).collect(),
        p_mid: cf0.grad_p[d..2 * d].iter().map(|g| delta * g).collect(),
        q_a: cf0.grad_q_a.scale(delta),
        q_a_prime: cf0.grad_q_a_prime.scale(delta),
        q_a_row: cf0.grad_q_a_row.iter().map(|g| delta * g).collect(),
    })
}

/// Monte-Carlo check of invariant-set membership for arbitrary single-layer
/// parameters: estimate the expected semi-gradient update over `k` fresh
/// tasks and test that all off-pattern coordinates are statistically zero and
/// the diagonal blocks are statistically scalar-times-identity.
pub fn invariant_set_report(
    p0: &Matrix,
    q0: &Matrix,
    n: usize,
    d: usize,
    gamma: f64,
    k: usize,
    rng: &mut SeededRng,
) -> Result<InvariantReport> {
    if k < 100 {
        return Err(Error::Parameter(format!(
            "invariant set check needs k >= 100, got {k}"
        )));
    }
    let seeds: Vec<u64> = (0..k).map(|_| rng.next_u64()).collect();
    let samples: Result<Vec<UpdateSample>> = seeds
        .par_iter()
        .map(|&s| one_update_sample(p0, q0, n, d, gamma, &mut SeededRng::new(s)))
        .collect();
    let samples = samples?;
    let kf = k as f64;

    let stat = |name: String, values: Vec<f64>, off_pattern: bool| -> CoordStat {
        let mean = values.iter().sum::<f64>() / kf;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (kf - 1.0);
        CoordStat { name, mean, std_err: (var / kf).sqrt(), off_pattern, pass: true }
    };

    let mut coords = Vec::new();
    for i in 0..d {
        coords.push(stat(
            format!("p_top[{i}]"),
            samples.iter().map(|s| s.p_top[i]).collect(),
            true,
        ));
        coords.push(stat(
            format!("p_mid[{i}]"),
            samples.iter().map(|s| s.p_mid[i]).collect(),
            true,
        ));
        coords.push(stat(
            format!("q_a_row[{i}]"),
            samples.iter().map(|s| s.q_a_row[i]).collect(),
            true,
        ));
    }
    for i in 0..d {
        for j in 0..d {
            coords.push(stat(
                format!("q_a[{i},{j}]"),
                samples.iter().map(|s| s.q_a[(i, j)]).collect(),
                i != j,
            ));
            coords.push(stat(
                format!("q_a_prime[{i},{j}]"),
                samples.iter().map(|s| s.q_a_prime[(i, j)]).collect(),
                i != j,
            ));
        }
    }

    // off-pattern coordinates: mean within 4 SE of zero
    for c in coords.iter_mut().filter(|c| c.off_pattern) {
        c.pass = c.mean.abs() <= 4.0 * c.std_err;
    }
    // diagonal blocks: each diagonal mean within 4 SE of the block's average
    for block in ["q_a", "q_a_prime"] {
        let diag: Vec<(f64, f64)> = coords
            .iter()
            .filter(|c| !c.off_pattern && c.name.starts_with(block) && {
                // exclude q_a_row / the other block's names
                let exact = c.name.strip_prefix(block).map(|s| s.starts_with('['));
                exact == Some(true)
            })
            .map(|c| (c.mean, c.std_err))
            .collect();
        let avg = diag.iter().map(|(m, _)| m).sum::<f64>() / diag.len() as f64;
        for c in coords.iter_mut().filter(|c| !c.off_pattern && c.name.starts_with(block)) {
            let exact = c.name.strip_prefix(block).map(|s| s.starts_with('['));
            if exact == Some(true) {
                c.pass = (c.mean - avg).abs() <= 4.0 * c.std_err;
            }
        }
    }
    let pass = coords.iter().all(|c| c.pass);
    Ok(InvariantReport { samples: k, coords, pass })
}

/// The invariant-set check at `theta*(eta, c, c')`.
pub fn verify_invariant_set(
    eta: f64,
    c: f64,
    c_prime: f64,
    n: usize,
    d: usize,
    k: usize,
    rng: &mut SeededRng,
) -> Result<InvariantReport> {
    let star = theta_star(eta, c, c_prime, d, n)?;
    invariant_set_report(&star.layers[0].p, &star.layers[0].q, n, d, 0.9, k, rng)
}
