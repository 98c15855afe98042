//! Iterative reference implementations of the batch policy-evaluation
//! algorithms the masked forward passes are supposed to execute. These are
//! written directly from the update rules, with no matrix tricks, so that a
//! forward-pass/oracle agreement is meaningful evidence.

use crate::error::{Error, Result};
use crate::mrp::Trajectory;
use crate::numerics::{dot, Matrix};
use crate::prompt::Context;

fn matvec(c: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..c.rows()).map(|i| (0..c.cols()).map(|j| c[(i, j)] * v[j]).sum()).collect()
}

fn require_gamma(ctx: &Context) -> Result<f64> {
    ctx.gamma
        .ok_or_else(|| Error::Parameter("discounted oracle needs a discounted context".into()))
}

fn check_layers(ctx: &Context, c_list: &[Matrix], l: usize) -> Result<()> {
    if c_list.len() != l {
        return Err(Error::Parameter(format!(
            "need {} preconditioners, got {}",
            l,
            c_list.len()
        )));
    }
    let d = ctx.dim();
    if c_list.iter().any(|c| c.rows() != d || c.cols() != d) {
        return Err(Error::Dimension("preconditioner size != feature dim".into()));
    }
    Ok(())
}

/// Preconditioned batch TD(0):
/// `w_{l+1} = w_l + (1/n) C_l sum_j (R_{j+1} + gamma w^T phi_{j+1} - w^T phi_j) phi_j`.
/// Returns `w_0..w_L` with `w_0 = 0`.
pub fn batch_td0(ctx: &Context, c_list: &[Matrix], l: usize) -> Result<Vec<Vec<f64>>> {
    let gamma = require_gamma(ctx)?;
    check_layers(ctx, c_list, l)?;
    let (n, d) = (ctx.n(), ctx.dim());
    let mut ws = vec![vec![0.0; d]];
    for c in c_list {
        let w = ws.last().unwrap();
        let mut acc = vec![0.0; d];
        for j in 0..n {
            let delta = ctx.rewards[j] + gamma * dot(w, &ctx.phis[j + 1]) - dot(w, &ctx.phis[j]);
            for i in 0..d {
                acc[i] += delta * ctx.phis[j][i];
            }
        }
        let step = matvec(c, &acc);
        ws.push((0..d).map(|i| w[i] + step[i] / n as f64).collect());
    }
    Ok(ws)
}

/// Batch residual gradient: TD(0) with the full-gradient factor
/// `(phi_j - gamma phi_{j+1})` in place of `phi_j`.
pub fn batch_rg(ctx: &Context, c_list: &[Matrix], l: usize) -> Result<Vec<Vec<f64>>> {
    let gamma = require_gamma(ctx)?;
    check_layers(ctx, c_list, l)?;
    let (n, d) = (ctx.n(), ctx.dim());
    let mut ws = vec![vec![0.0; d]];
    for c in c_list {
        let w = ws.last().unwrap();
        let mut acc = vec![0.0; d];
        for j in 0..n {
            let delta = ctx.rewards[j] + gamma * dot(w, &ctx.phis[j + 1]) - dot(w, &ctx.phis[j]);
            for i in 0..d {
                acc[i] += delta * (ctx.phis[j][i] - gamma * ctx.phis[j + 1][i]);
            }
        }
        let step = matvec(c, &acc);
        ws.push((0..d).map(|i| w[i] + step[i] / n as f64).collect());
    }
    Ok(ws)
}

/// Batch TD(lambda). The trace runs over the context's first-block features:
/// `e_1 = phi_0`, `e_{i+1} = lambda e_i + phi_i`, and
/// `w_{l+1} = w_l + (1/n) C_l sum_i (R_i + gamma w^T phi_i - w^T phi_{i-1}) e_i`.
/// lambda = 0 degenerates to `batch_td0` exactly.
pub fn batch_td_lambda(
    ctx: &Context,
    c_list: &[Matrix],
    l: usize,
    lambda: f64,
) -> Result<Vec<Vec<f64>>> {
    let gamma = require_gamma(ctx)?;
    check_layers(ctx, c_list, l)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda {lambda} outside [0, 1]")));
    }
    let (n, d) = (ctx.n(), ctx.dim());
    let mut traces = Vec::with_capacity(n);
    let mut e = vec![0.0; d];
    for j in 0..n {
        for i in 0..d {
            e[i] = lambda * e[i] + ctx.phis[j][i];
        }
        traces.push(e.clone());
    }
    let mut ws = vec![vec![0.0; d]];
    for c in c_list {
        let w = ws.last().unwrap();
        let mut acc = vec![0.0; d];
        for j in 0..n {
            let delta = ctx.rewards[j] + gamma * dot(w, &ctx.phis[j + 1]) - dot(w, &ctx.phis[j]);
            for i in 0..d {
                acc[i] += delta * traces[j][i];
            }
        }
        let step = matvec(c, &acc);
        ws.push((0..d).map(|i| w[i] + step[i] / n as f64).collect());
    }
    Ok(ws)
}

/// Batch average-reward TD with the running mean `rbar_j` of `R_1..R_j`:
/// `w_{l+1} = w_l + (1/n) C_l sum_j (R_j - rbar_j + w^T phi_j - w^T phi_{j-1}) phi_{j-1}`.
pub fn batch_avg_td(ctx: &Context, c_list: &[Matrix], l: usize) -> Result<Vec<Vec<f64>>> {
    check_layers(ctx, c_list, l)?;
    let (n, d) = (ctx.n(), ctx.dim());
    let mut ws = vec![vec![0.0; d]];
    for c in c_list {
        let w = ws.last().unwrap();
        let mut acc = vec![0.0; d];
        let mut reward_sum = 0.0;
        for j in 0..n {
            reward_sum += ctx.rewards[j];
            let rbar = reward_sum / (j + 1) as f64;
            let delta =
                ctx.rewards[j] - rbar + dot(w, &ctx.phis[j + 1]) - dot(w, &ctx.phis[j]);
            for i in 0..d {
                acc[i] += delta * ctx.phis[j][i];
            }
        }
        let step = matvec(c, &acc);
        ws.push((0..d).map(|i| w[i] + step[i] / n as f64).collect());
    }
    Ok(ws)
}

/// Plain online linear TD(0) along a trajectory; returns `w_0..w_T`.
pub fn online_td0(
    traj: &Trajectory,
    alphas: &[f64],
    gamma: f64,
    w0: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if alphas.len() != traj.len() {
        return Err(Error::Parameter(format!(
            "need {} step sizes, got {}",
            traj.len(),
            alphas.len()
        )));
    }
    if alphas.iter().any(|&a| a <= 0.0) {
        return Err(Error::Parameter("step sizes must be positive".into()));
    }
    let d = w0.len();
    let mut ws = vec![w0.to_vec()];
    for t in 0..traj.len() {
        let w = ws.last().unwrap();
        let delta =
            traj.rewards[t] + gamma * dot(w, &traj.phis[t + 1]) - dot(w, &traj.phis[t]);
        ws.push((0..d).map(|i| w[i] + alphas[t] * delta * traj.phis[t][i]).collect());
    }
    Ok(ws)
}
