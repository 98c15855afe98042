//! Masked linear/softmax attention and the layer-stacked forward pass.
//!
//! One attention layer updates the prompt as
//! `Z_{l+1} = Z_l + (1/n) * P_l * Z_l * M * attn(Z_l^T * Q_l * Z_l)`
//! where `attn` is the identity (linear attention) or a row-wise softmax,
//! and `M` is a fixed mask singling out the context columns. The scalar the
//! network emits is the negated bottom-right entry of `Z_L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::prompt::{Prompt, PromptKind};

/// Fixed attention masks, all `(n+1) x (n+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MaskKind {
    /// `diag(I_n, 0)`: plain context/query separation.
    Td0 { n: usize },
    /// Sub-diagonal powers of lambda; zero last row and column.
    TdLambda { lambda: f64, n: usize },
    /// Running-mean-subtraction mask for the first average-reward head.
    AvgHead1 { n: usize },
    /// Same as `Td0`; kept distinct so two-head parameter sets are explicit.
    AvgHead2 { n: usize },
}

impl MaskKind {
    pub fn n(&self) -> usize {
        match *self {
            MaskKind::Td0 { n }
            | MaskKind::TdLambda { n, .. }
            | MaskKind::AvgHead1 { n }
            | MaskKind::AvgHead2 { n } => n,
        }
    }
}

pub fn make_mask(kind: &MaskKind) -> Result<Matrix> {
    let n = kind.n();
    if n < 1 {
        return Err(Error::Parameter("make_mask: n must be >= 1".into()));
    }
    match *kind {
        MaskKind::Td0 { .. } | MaskKind::AvgHead2 { .. } => {
            let mut m = Matrix::zeros(n + 1, n + 1);
            for i in 0..n {
                m[(i, i)] = 1.0;
            }
            Ok(m)
        }
        MaskKind::TdLambda { lambda, .. } => {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::Parameter(format!(
                    "make_mask: lambda {lambda} outside [0, 1]"
                )));
            }
            let mut m = Matrix::zeros(n + 1, n + 1);
            for i in 0..n {
                for j in 0..=i {
                    m[(i, j)] = lambda.powi((i - j) as i32);
                }
            }
            Ok(m)
        }
        MaskKind::AvgHead1 { .. } => {
            // (I_{n+1} - U_{n+1} diag(1, 1/2, ..., 1/(n+1))) * M2 with U the
            // all-ones upper triangle (diagonal included)
            let m2 = make_mask(&MaskKind::AvgHead2 { n })?;
            let mut lhs = Matrix::identity(n + 1);
            for i in 0..n + 1 {
                for j in i..n + 1 {
                    lhs[(i, j)] -= 1.0 / (j + 1) as f64;
                }
            }
            Ok(lhs.mul(&m2))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnKind {
    Linear,
    Softmax,
}

/// One attention layer's weights; both matrices are square with the prompt's
/// row dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub p: Matrix,
    pub q: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub layers: Vec<Layer>,
    /// Autoregressive weight sharing: one layer applied `l` times.
    pub shared: bool,
    pub attn: AttnKind,
    pub mask: MaskKind,
    pub l: usize,
}

impl TransformerParams {
    pub fn new(
        layers: Vec<Layer>,
        shared: bool,
        attn: AttnKind,
        mask: MaskKind,
        l: usize,
    ) -> Result<Self> {
        if shared && layers.len() != 1 {
            return Err(Error::Parameter(format!(
                "shared params need exactly one layer, got {}",
                layers.len()
            )));
        }
        if !shared && layers.len() != l {
            return Err(Error::Parameter(format!(
                "sequential params need {} layers, got {}",
                l,
                layers.len()
            )));
        }
        for layer in &layers {
            if layer.p.rows() != layer.p.cols()
                || layer.q.rows() != layer.q.cols()
                || layer.p.rows() != layer.q.rows()
            {
                return Err(Error::Dimension("P, Q must be square and same size".into()));
            }
        }
        Ok(TransformerParams { layers, shared, attn, mask, l })
    }

    /// The layer used at depth `l` (constant when shared).
    pub fn layer_at(&self, l: usize) -> &Layer {
        if self.shared {
            &self.layers[0]
        } else {
            &self.layers[l]
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].p.rows()
    }
}

/// `P * Z * M * (Z^T * Q * Z)`
pub fn lin_attn(z: &Matrix, p: &Matrix, q: &Matrix, m: &Matrix) -> Result<Matrix> {
    let s = z.transpose().mat_mul(&q.mat_mul(z)?)?;
    p.mat_mul(z)?.mat_mul(m)?.mat_mul(&s)
}

/// Row-wise softmax, stabilized by max subtraction (which is output-invariant).
pub fn row_softmax(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let mx = (0..a.cols()).map(|j| a[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..a.cols() {
            let e = (a[(i, j)] - mx).exp();
            out[(i, j)] = e;
            sum += e;
        }
        for j in 0..a.cols() {
            out[(i, j)] /= sum;
        }
    }
    out
}

/// `P * Z * M * softmax(Z^T * Q * Z)` with the softmax applied per row.
pub fn softmax_attn(z: &Matrix, p: &Matrix, q: &Matrix, m: &Matrix) -> Result<Matrix> {
    let s = row_softmax(&z.transpose().mat_mul(&q.mat_mul(z)?)?);
    p.mat_mul(z)?.mat_mul(m)?.mat_mul(&s)
}

/// Forward-pass result: the full per-layer trace `Z_0..Z_L` and the scalar
/// output `-Z_L[bottom, right]`.
#[derive(Debug, Clone)]
pub struct Forward {
    pub trace: Vec<Matrix>,
    pub output: f64,
}

impl Forward {
    /// `y_l = Z_l[bottom, right]` (un-negated, as it appears in the matrix).
    pub fn y(&self, l: usize) -> f64 {
        let z = &self.trace[l];
        z[(z.rows() - 1, z.cols() - 1)]
    }
}

pub fn forward(prompt: &Prompt, params: &TransformerParams) -> Result<Forward> {
    if params.mask.n() != prompt.n() {
        return Err(Error::Dimension(format!(
            "mask n {} != prompt n {}",
            params.mask.n(),
            prompt.n()
        )));
    }
    if params.dim() != prompt.z().rows() {
        return Err(Error::Dimension(format!(
            "parameter size {} != prompt rows {}",
            params.dim(),
            prompt.z().rows()
        )));
    }
    let m = make_mask(&params.mask)?;
    let n = prompt.n() as f64;
    let mut trace = Vec::with_capacity(params.l + 1);
    trace.push(prompt.z().clone());
    for l in 0..params.l {
        let layer = params.layer_at(l);
        let z = trace.last().unwrap();
        let a = match params.attn {
            AttnKind::Linear => lin_attn(z, &layer.p, &layer.q, &m)?,
            AttnKind::Softmax => softmax_attn(z, &layer.p, &layer.q, &m)?,
        };
        trace.push(z.add(&a.scale(1.0 / n)));
    }
    let zl = trace.last().unwrap();
    let output = -zl[(zl.rows() - 1, zl.cols() - 1)];
    Ok(Forward { trace, output })
}

/// One two-head layer for the average-reward setting. `w` is the combining
/// map applied to the stacked head outputs; as constructed it writes only the
/// memory row (output row 2d+2 = head-1 row 2d+1 plus head-2 row 2d+2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoHeadLayer {
    pub p1: Matrix,
    pub p2: Matrix,
    pub q: Matrix,
    pub w: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoHeadParams {
    pub layers: Vec<TwoHeadLayer>,
}

impl TwoHeadParams {
    pub fn l(&self) -> usize {
        self.layers.len()
    }
}

pub fn two_head_forward(prompt: &Prompt, params: &TwoHeadParams) -> Result<Forward> {
    if prompt.kind() != PromptKind::AverageReward {
        return Err(Error::Parameter(
            "two_head_forward needs an average-reward prompt".into(),
        ));
    }
    let m1 = make_mask(&MaskKind::AvgHead1 { n: prompt.n() })?;
    let m2 = make_mask(&MaskKind::AvgHead2 { n: prompt.n() })?;
    let n = prompt.n() as f64;
    let rows = prompt.z().rows();
    let mut trace = Vec::with_capacity(params.l() + 1);
    trace.push(prompt.z().clone());
    for layer in &params.layers {
        let z = trace.last().unwrap();
        let a1 = lin_attn(z, &layer.p1, &layer.q, &m1)?;
        let a2 = lin_attn(z, &layer.p2, &layer.q, &m2)?;
        let mut stacked = Matrix::zeros(2 * rows, z.cols());
        for i in 0..rows {
            for j in 0..z.cols() {
                stacked[(i, j)] = a1[(i, j)];
                stacked[(rows + i, j)] = a2[(i, j)];
            }
        }
        let delta = layer.w.mat_mul(&stacked)?;
        trace.push(z.add(&delta.scale(1.0 / n)));
    }
    let zl = trace.last().unwrap();
    let output = -zl[(zl.rows() - 1, zl.cols() - 1)];
    Ok(Forward { trace, output })
}
