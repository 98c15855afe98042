//! Markov reward processes, feature maps, and the task generators used for
//! pretraining: randomized Boyan chains (finite) and randomized CartPole
//! environments with tile-coded features (streaming).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, solve_linear, Matrix, SeededRng};

/// Finite MRP `(p0, P, r)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteMrp {
    pub p0: Vec<f64>,
    pub p: Matrix,
    pub r: Vec<f64>,
}

impl FiniteMrp {
    pub fn num_states(&self) -> usize {
        self.p0.len()
    }

    /// Row-stochasticity and distribution checks (1e-12 slack).
    pub fn validate(&self) -> Result<()> {
        let m = self.num_states();
        if self.p.rows() != m || self.p.cols() != m || self.r.len() != m {
            return Err(Error::Dimension("FiniteMrp: inconsistent sizes".into()));
        }
        let sum0: f64 = self.p0.iter().sum();
        if (sum0 - 1.0).abs() > 1e-12 || self.p0.iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("p0 is not a distribution".into()));
        }
        for i in 0..m {
            let s: f64 = self.p.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-12 || self.p.row(i).iter().any(|&x| x < 0.0) {
                return Err(Error::Domain(format!("row {i} of P is not a distribution")));
            }
        }
        Ok(())
    }
}

/// Row `s` is `phi(s)^T`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMap {
    pub phi: Matrix,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.phi.cols()
    }

    pub fn feature(&self, s: usize) -> Vec<f64> {
        self.phi.row(s).to_vec()
    }
}

/// CartPole physics, the random-policy push probability, and reset thresholds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CartPoleEnv {
    pub m_cart: f64,
    pub m_pole: f64,
    pub g: f64,
    pub l_pole: f64,
    pub tau: f64,
    pub f: f64,
    /// probability of pushing right under the fixed random policy
    pub epsilon: f64,
    pub x_threshold: f64,
    pub theta_threshold: f64,
}

impl CartPoleEnv {
    /// One semi-implicit Euler step under the given action (true = push right).
    fn step(&self, s: [f64; 4], push_right: bool) -> [f64; 4] {
        let [x, x_dot, theta, theta_dot] = s;
        let force = if push_right { self.f } else { -self.f };
        let total_mass = self.m_cart + self.m_pole;
        let pml = self.m_pole * self.l_pole;
        let cos_t = theta.cos();
        let sin_t = theta.sin();
        let temp = (force + pml * theta_dot * theta_dot * sin_t) / total_mass;
        let theta_acc = (self.g * sin_t - cos_t * temp)
            / (self.l_pole * (4.0 / 3.0 - self.m_pole * cos_t * cos_t / total_mass));
        let x_acc = temp - pml * theta_acc * cos_t / total_mass;
        let x_dot2 = x_dot + self.tau * x_acc;
        let theta_dot2 = theta_dot + self.tau * theta_acc;
        [x + self.tau * x_dot2, x_dot2, theta + self.tau * theta_dot2, theta_dot2]
    }

    fn needs_reset(&self, s: [f64; 4]) -> bool {
        s[0].abs() > self.x_threshold || s[2].abs() > self.theta_threshold
    }

    fn reset(&self, rng: &mut SeededRng) -> [f64; 4] {
        [
            rng.uniform(-0.05, 0.05),
            rng.uniform(-0.05, 0.05),
            rng.uniform(-0.05, 0.05),
            rng.uniform(-0.05, 0.05),
        ]
    }
}

/// Per-dimension tile widths for the CartPole feature oracle.
///
/// The widths are a config knob; the defaults are coarse enough that tiles
/// repeat within a trajectory, which the memoized-feature contract requires.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileConfig {
    pub widths: [f64; 4],
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig { widths: [0.48, 0.5, 0.0418, 0.5] }
    }
}

/// Lazily assigns each visited tile a reward in U(-1,1) and a feature in
/// U(-1,1)^d, memoized so repeat visits are identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TileOracle {
    pub config: TileConfig,
    pub d: usize,
    rng: SeededRng,
    #[serde(skip)]
    table: HashMap<[i64; 4], (Vec<f64>, f64)>,
}

impl TileOracle {
    pub fn new(config: TileConfig, d: usize, rng: SeededRng) -> Self {
        TileOracle { config, d, rng, table: HashMap::new() }
    }

    pub fn tile_of(&self, s: [f64; 4]) -> [i64; 4] {
        let mut t = [0i64; 4];
        for i in 0..4 {
            t[i] = (s[i] / self.config.widths[i]).floor() as i64;
        }
        t
    }

    pub fn lookup(&mut self, s: [f64; 4]) -> (Vec<f64>, f64) {
        let tile = self.tile_of(s);
        let d = self.d;
        let rng = &mut self.rng;
        self.table
            .entry(tile)
            .or_insert_with(|| {
                let phi = rng.uniform_vec(d, -1.0, 1.0);
                let r = rng.uniform(-1.0, 1.0);
                (phi, r)
            })
            .clone()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CartPoleTask {
    pub env: CartPoleEnv,
    pub oracle: TileOracle,
    pub gamma: f64,
}

/// Boyan-chain task: finite MRP + tabular features, with optional ground-truth
/// weights when the value function is representable by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteTask {
    pub mrp: FiniteMrp,
    pub features: FeatureMap,
    pub gamma: f64,
    pub w_star: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Finite(FiniteTask),
    CartPole(CartPoleTask),
}

impl Task {
    pub fn gamma(&self) -> f64 {
        match self {
            Task::Finite(t) => t.gamma,
            Task::CartPole(t) => t.gamma,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Task::Finite(t) => t.features.dim(),
            Task::CartPole(t) => t.oracle.d,
        }
    }

    pub fn as_finite(&self) -> Option<&FiniteTask> {
        match self {
            Task::Finite(t) => Some(t),
            Task::CartPole(_) => None,
        }
    }

    /// Generator metadata + parameters as a JSON document for reproducibility.
    pub fn to_json(&self, generator: &str, seed: u64) -> serde_json::Value {
        serde_json::json!({
            "generator": generator,
            "seed": seed,
            "task": self,
        })
    }

    pub fn from_json(doc: &serde_json::Value) -> Result<Task> {
        serde_json::from_value(doc["task"].clone())
            .map_err(|e| Error::Config(format!("task deserialization: {e}")))
    }
}

/// A sampled trajectory: `length+1` feature vectors and `length` rewards.
/// `state_ids` is present for finite tasks; `resets` counts CartPole episode
/// boundaries.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub phis: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub state_ids: Option<Vec<usize>>,
    pub resets: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

fn normalized_uniform(rng: &mut SeededRng, m: usize) -> Vec<f64> {
    let mut v = rng.uniform_vec(m, 0.0, 1.0);
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn boyan_structure(rng: &mut SeededRng, m: usize, d: usize) -> (Vec<f64>, Matrix, FeatureMap) {
    let mut phi_rows = Vec::with_capacity(m);
    for _ in 0..m {
        phi_rows.push(rng.uniform_vec(d, -1.0, 1.0));
    }
    let p0 = normalized_uniform(rng, m);
    let mut p = Matrix::zeros(m, m);
    for i in 0..m.saturating_sub(2) {
        let eps = rng.uniform(0.0, 1.0);
        p[(i, i + 1)] = eps;
        p[(i, i + 2)] = 1.0 - eps;
    }
    p[(m - 2, m - 1)] = 1.0;
    let z = normalized_uniform(rng, m);
    for j in 0..m {
        p[(m - 1, j)] = z[j];
    }
    (p0, p, FeatureMap { phi: Matrix::from_rows(&phi_rows) })
}

/// Randomized Boyan chain with i.i.d. U(-1,1) rewards and features.
pub fn gen_boyan(m: usize, d: usize, gamma: f64, rng: &mut SeededRng) -> Result<Task> {
    if m < 3 {
        return Err(Error::Parameter(format!("gen_boyan: m = {m} < 3")));
    }
    if d == 0 {
        return Err(Error::Parameter("gen_boyan: d = 0".into()));
    }
    let (p0, p, features) = boyan_structure(rng, m, d);
    let r = rng.uniform_vec(m, -1.0, 1.0);
    Ok(Task::Finite(FiniteTask {
        mrp: FiniteMrp { p0, p, r },
        features,
        gamma,
        w_star: None,
    }))
}

/// Boyan chain whose true value function is representable: `w*` is drawn
/// first, `v = Phi w*`, and `r = (I - gamma P) v`.
pub fn gen_boyan_representable(
    m: usize,
    d: usize,
    gamma: f64,
    rng: &mut SeededRng,
) -> Result<(Task, Vec<f64>)> {
    if m < 3 {
        return Err(Error::Parameter(format!("gen_boyan_representable: m = {m} < 3")));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma = {gamma} outside [0,1)")));
    }
    let w_star = rng.uniform_vec(d, -1.0, 1.0);
    let (p0, p, features) = boyan_structure(rng, m, d);
    let v: Vec<f64> = (0..m).map(|s| dot(features.phi.row(s), &w_star)).collect();
    let mut r = vec![0.0; m];
    for i in 0..m {
        r[i] = v[i] - gamma * dot(p.row(i), &v);
    }
    let task = Task::Finite(FiniteTask {
        mrp: FiniteMrp { p0, p, r },
        features,
        gamma,
        w_star: Some(w_star.clone()),
    });
    Ok((task, w_star))
}

/// Randomized CartPole task with tile-coded reward/feature oracles.
pub fn gen_cartpole(d: usize, gamma: f64, rng: &mut SeededRng) -> Result<Task> {
    if d == 0 {
        return Err(Error::Parameter("gen_cartpole: d = 0".into()));
    }
    gen_cartpole_with(d, gamma, TileConfig::default(), rng)
}

pub fn gen_cartpole_with(
    d: usize,
    gamma: f64,
    tiles: TileConfig,
    rng: &mut SeededRng,
) -> Result<Task> {
    let env = CartPoleEnv {
        m_cart: rng.uniform(0.5, 1.5),
        m_pole: rng.uniform(0.5, 1.5),
        g: rng.uniform(7.0, 12.0),
        l_pole: rng.uniform(0.5, 1.5),
        tau: rng.uniform(0.01, 0.05),
        f: rng.uniform(5.0, 15.0),
        epsilon: rng.uniform(0.0, 1.0),
        x_threshold: 2.4,
        theta_threshold: 12.0f64.to_radians(),
    };
    let label = rng.next_u64();
    let oracle_rng = rng.derive(label);
    Ok(Task::CartPole(CartPoleTask {
        env,
        oracle: TileOracle::new(tiles, d, oracle_rng),
        gamma,
    }))
}

/// Sample `(S_0, R_1, S_1, ..., S_length)`: `length+1` states, `length`
/// rewards, with `R_{t+1} = r(S_t)`.
pub fn sample_trajectory(task: &mut Task, length: usize, rng: &mut SeededRng) -> Result<Trajectory> {
    if length == 0 {
        return Err(Error::Parameter("sample_trajectory: length = 0".into()));
    }
    match task {
        Task::Finite(t) => {
            let mut ids = Vec::with_capacity(length + 1);
            let mut phis = Vec::with_capacity(length + 1);
            let mut rewards = Vec::with_capacity(length);
            let mut s = rng.sample_index(&t.mrp.p0);
            ids.push(s);
            phis.push(t.features.feature(s));
            for _ in 0..length {
                rewards.push(t.mrp.r[s]);
                s = rng.sample_index(t.mrp.p.row(s));
                ids.push(s);
                phis.push(t.features.feature(s));
            }
            Ok(Trajectory { phis, rewards, state_ids: Some(ids), resets: 0 })
        }
        Task::CartPole(t) => {
            let mut phis = Vec::with_capacity(length + 1);
            let mut rewards = Vec::with_capacity(length);
            let mut resets = 0;
            let mut s = t.env.reset(rng);
            let (phi, _) = t.oracle.lookup(s);
            phis.push(phi);
            for _ in 0..length {
                let (_, r) = t.oracle.lookup(s);
                rewards.push(r);
                let push_right = rng.uniform01() < t.env.epsilon;
                s = t.env.step(s, push_right);
                if t.env.needs_reset(s) {
                    s = t.env.reset(rng);
                    resets += 1;
                }
                let (phi, _) = t.oracle.lookup(s);
                phis.push(phi);
            }
            Ok(Trajectory { phis, rewards, state_ids: None, resets })
        }
    }
}

/// Stationary distribution via power iteration from a fixed generic start,
/// to a 1e-12 sup-norm residual, at most 1e5 iterations.
///
/// For reducible or periodic chains (e.g. `P = I` or a permutation matrix)
/// the fixed point is not unique; the returned vector is whatever the
/// canonical start converges to, independent of any initial distribution, or
/// a `NonConvergence` error when the iteration oscillates.
pub fn stationary_distribution(p: &Matrix) -> Result<Vec<f64>> {
    let m = p.rows();
    if p.cols() != m {
        return Err(Error::Dimension("stationary_distribution: non-square P".into()));
    }
    // deterministic non-uniform start so the result never depends on p0
    let mut d: Vec<f64> = (1..=m).map(|i| i as f64).collect();
    let s: f64 = d.iter().sum();
    d.iter_mut().for_each(|x| *x /= s);
    let mut residual = f64::INFINITY;
    for _ in 0..100_000 {
        let mut next = vec![0.0; m];
        for i in 0..m {
            let di = d[i];
            if di == 0.0 {
                continue;
            }
            for j in 0..m {
                next[j] += di * p[(i, j)];
            }
        }
        let sum: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= sum);
        residual = d.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        d = next;
        if residual < 1e-12 {
            return Ok(d);
        }
    }
    Err(Error::NonConvergence { residual, context: "power iteration".into() })
}

/// Exact solve of `(I - gamma P) v = r`.
pub fn true_value(mrp: &FiniteMrp, gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("gamma = {gamma} outside [0,1)")));
    }
    let m = mrp.num_states();
    let a = Matrix::from_fn(m, m, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - gamma * mrp.p[(i, j)]
    });
    let v = solve_linear(&a, &mrp.r)?;
    let mut worst = 0.0f64;
    for i in 0..m {
        let bellman = mrp.r[i] + gamma * dot(mrp.p.row(i), &v);
        worst = worst.max((v[i] - bellman).abs());
    }
    if worst > 1e-9 {
        return Err(Error::NonConvergence { residual: worst, context: "true_value residual".into() });
    }
    Ok(v)
}
