//! Prompt matrices for the in-context policy evaluation setting.
//!
//! A discounted prompt is the (2d+1) x (n+1) matrix whose context column j
//! (1-based in the docs, 0-based internally: column j-1) is
//! `(phi_{j-1}; gamma*phi_j; R_j)` and whose final column is the query
//! `(phi_query; 0_d; 0)`. The average-reward prompt appends one all-zero
//! "memory" row and drops the discount.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrp::Trajectory;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    Discounted,
    AverageReward,
}

/// The raw transition triples a prompt was built from, kept alongside the
/// matrix so reference algorithms can consume them losslessly (the matrix
/// alone cannot be inverted when gamma = 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    /// phi_0 .. phi_n (n+1 vectors)
    pub phis: Vec<Vec<f64>>,
    /// R_1 .. R_n
    pub rewards: Vec<f64>,
    /// absent for the average-reward setting
    pub gamma: Option<f64>,
}

impl Context {
    pub fn n(&self) -> usize {
        self.rewards.len()
    }

    pub fn dim(&self) -> usize {
        self.phis[0].len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    z: Matrix,
    d: usize,
    n: usize,
    kind: PromptKind,
    ctx: Context,
    query: Vec<f64>,
}

impl Prompt {
    pub fn z(&self) -> &Matrix {
        &self.z
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn context(&self) -> &Context {
        &self.ctx
    }

    pub fn query(&self) -> &[f64] {
        &self.query
    }

    /// New prompt with only the top-d entries of the query column replaced.
    pub fn query_substitute(&self, phi_s: &[f64]) -> Result<Prompt> {
        if phi_s.len() != self.d {
            return Err(Error::Parameter(format!(
                "query_substitute: dim {} != {}",
                phi_s.len(),
                self.d
            )));
        }
        let mut out = self.clone();
        for (i, &x) in phi_s.iter().enumerate() {
            out.z[(i, self.n)] = x;
        }
        out.query = phi_s.to_vec();
        Ok(out)
    }
}

fn check_dims(phis: &[Vec<f64>], rewards: &[f64], query: &[f64]) -> Result<(usize, usize)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Parameter("prompt: empty context".into()));
    }
    if phis.len() != n + 1 {
        return Err(Error::Parameter(format!(
            "prompt: {} feature vectors for {} rewards (need n+1)",
            phis.len(),
            n
        )));
    }
    let d = query.len();
    if phis.iter().any(|p| p.len() != d) {
        return Err(Error::Parameter("prompt: inconsistent feature dimension".into()));
    }
    Ok((n, d))
}

/// Discounted prompt from transition features `phi_0..phi_n`, rewards
/// `R_1..R_n`, and a query feature.
pub fn build_prompt(
    phis: &[Vec<f64>],
    rewards: &[f64],
    gamma: f64,
    query: &[f64],
) -> Result<Prompt> {
    let (n, d) = check_dims(phis, rewards, query)?;
    let mut z = Matrix::zeros(2 * d + 1, n + 1);
    for j in 0..n {
        for i in 0..d {
            z[(i, j)] = phis[j][i];
            z[(d + i, j)] = gamma * phis[j + 1][i];
        }
        z[(2 * d, j)] = rewards[j];
    }
    for i in 0..d {
        z[(i, n)] = query[i];
    }
    Ok(Prompt {
        z,
        d,
        n,
        kind: PromptKind::Discounted,
        ctx: Context { phis: phis.to_vec(), rewards: rewards.to_vec(), gamma: Some(gamma) },
        query: query.to_vec(),
    })
}

/// Average-reward prompt: undiscounted successor block plus one all-zero
/// memory row; shape (2d+2) x (n+1).
pub fn build_avg_reward_prompt(
    phis: &[Vec<f64>],
    rewards: &[f64],
    query: &[f64],
) -> Result<Prompt> {
    let (n, d) = check_dims(phis, rewards, query)?;
    let mut z = Matrix::zeros(2 * d + 2, n + 1);
    for j in 0..n {
        for i in 0..d {
            z[(i, j)] = phis[j][i];
            z[(d + i, j)] = phis[j + 1][i];
        }
        z[(2 * d, j)] = rewards[j];
    }
    for i in 0..d {
        z[(i, n)] = query[i];
    }
    Ok(Prompt {
        z,
        d,
        n,
        kind: PromptKind::AverageReward,
        ctx: Context { phis: phis.to_vec(), rewards: rewards.to_vec(), gamma: None },
        query: query.to_vec(),
    })
}

/// The sliding-window prompt pair of multi-task TD pretraining at offset `t`:
/// `Z_0` holds transitions `t..t+n` with query `phi_{t+n+1}`, `Z_0'` shifts
/// everything by one with query `phi_{t+n+2}`, and `R = R_{t+n+2}`.
pub fn sliding_prompts(
    traj: &Trajectory,
    n: usize,
    gamma: f64,
    t: usize,
) -> Result<(Prompt, Prompt, f64)> {
    if traj.len() < t + n + 2 {
        return Err(Error::Bounds(format!(
            "sliding_prompts: need {} transitions, trajectory has {}",
            t + n + 2,
            traj.len()
        )));
    }
    let z0 = build_prompt(
        &traj.phis[t..=t + n],
        &traj.rewards[t..t + n],
        gamma,
        &traj.phis[t + n + 1],
    )?;
    let z0p = build_prompt(
        &traj.phis[t + 1..=t + n + 1],
        &traj.rewards[t + 1..t + n + 1],
        gamma,
        &traj.phis[t + n + 2],
    )?;
    Ok((z0, z0p, traj.rewards[t + n + 1]))
}
