//! Explicit attention weights whose forward passes run classic policy
//! evaluation algorithms: preconditioned batch TD(0) (multi-layer and the
//! one-layer alternative), residual gradient, TD(lambda) via its mask, the
//! two-head average-reward construction, and the single-layer family
//! theta*(eta, c, c') that is invariant under expected multi-task TD updates.

use crate::attention::{
    AttnKind, Layer, MaskKind, TransformerParams, TwoHeadLayer, TwoHeadParams,
};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

fn check_square(c_list: &[Matrix]) -> Result<usize> {
    let d = c_list
        .first()
        .ok_or_else(|| Error::Parameter("empty preconditioner list".into()))?
        .rows();
    for c in c_list {
        if c.rows() != d || c.cols() != d {
            return Err(Error::Dimension("preconditioners must be square d x d".into()));
        }
    }
    Ok(d)
}

/// `P = diag(0_{2d}, 1)`, the shared value-readout head of every discounted
/// construction here.
fn p_td(d: usize) -> Matrix {
    let mut p = Matrix::zeros(2 * d + 1, 2 * d + 1);
    p[(2 * d, 2 * d)] = 1.0;
    p
}

/// Copy `block` (d x d) into `dst` with its top-left corner at (r0, c0),
/// optionally negated.
fn place(dst: &mut Matrix, block: &Matrix, r0: usize, c0: usize, sign: f64) {
    for i in 0..block.rows() {
        for j in 0..block.cols() {
            dst[(r0 + i, c0 + j)] += sign * block[(i, j)];
        }
    }
}

/// Multi-layer TD(0): layer l has `Q` with `(-C_l^T, C_l^T)` across the top
/// block row and the readout `P`.
pub fn construct_td(c_list: &[Matrix], n: usize) -> Result<TransformerParams> {
    let d = check_square(c_list)?;
    let layers = c_list
        .iter()
        .map(|c| {
            let ct = c.transpose();
            let mut q = Matrix::zeros(2 * d + 1, 2 * d + 1);
            place(&mut q, &ct, 0, 0, -1.0);
            place(&mut q, &ct, 0, d, 1.0);
            Layer { p: p_td(d), q }
        })
        .collect();
    TransformerParams::new(layers, false, AttnKind::Linear, MaskKind::Td0 { n }, c_list.len())
}

/// One-layer TD(0) alternative: `Q` carries only `-C^T` in the top-left block.
pub fn construct_td_one_layer(c: &Matrix, n: usize) -> Result<TransformerParams> {
    let d = check_square(std::slice::from_ref(c))?;
    let mut q = Matrix::zeros(2 * d + 1, 2 * d + 1);
    place(&mut q, &c.transpose(), 0, 0, -1.0);
    TransformerParams::new(
        vec![Layer { p: p_td(d), q }],
        false,
        AttnKind::Linear,
        MaskKind::Td0 { n },
        1,
    )
}

/// Residual gradient: the +-C^T checkerboard over the 2d x 2d corner.
pub fn construct_rg(c_list: &[Matrix], n: usize) -> Result<TransformerParams> {
    let d = check_square(c_list)?;
    let layers = c_list
        .iter()
        .map(|c| {
            let ct = c.transpose();
            let mut q = Matrix::zeros(2 * d + 1, 2 * d + 1);
            place(&mut q, &ct, 0, 0, -1.0);
            place(&mut q, &ct, 0, d, 1.0);
            place(&mut q, &ct, d, 0, 1.0);
            place(&mut q, &ct, d, d, -1.0);
            Layer { p: p_td(d), q }
        })
        .collect();
    TransformerParams::new(layers, false, AttnKind::Linear, MaskKind::Td0 { n }, c_list.len())
}

/// TD(lambda): the TD(0) weights with the lambda-decay mask.
pub fn construct_td_lambda(c_list: &[Matrix], n: usize, lambda: f64) -> Result<TransformerParams> {
    let mut params = construct_td(c_list, n)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda {lambda} outside [0, 1]")));
    }
    params.mask = MaskKind::TdLambda { lambda, n };
    Ok(params)
}

/// Two-head average-reward TD weights for a `(2d+2)`-row prompt. Head 1 reads
/// the reward row (index 2d), head 2 reads the memory row (index 2d+1); the
/// combining map writes their sum into the memory row only.
pub fn construct_avg_td(c_list: &[Matrix]) -> Result<TwoHeadParams> {
    let d = check_square(c_list)?;
    let rows = 2 * d + 2;
    let layers = c_list
        .iter()
        .map(|c| {
            let ct = c.transpose();
            let mut p1 = Matrix::zeros(rows, rows);
            p1[(2 * d, 2 * d)] = 1.0;
            let mut p2 = Matrix::zeros(rows, rows);
            p2[(2 * d + 1, 2 * d + 1)] = 1.0;
            let mut q = Matrix::zeros(rows, rows);
            place(&mut q, &ct, 0, 0, -1.0);
            place(&mut q, &ct, 0, d, 1.0);
            let mut w = Matrix::zeros(rows, 2 * rows);
            w[(2 * d + 1, 2 * d)] = 1.0; // head-1 reward row
            w[(2 * d + 1, rows + 2 * d + 1)] = 1.0; // head-2 memory row
            TwoHeadLayer { p1, p2, q, w }
        })
        .collect();
    Ok(TwoHeadParams { layers })
}

/// The invariant single-layer family: `P = diag(0_{2d}, eta)`, `Q` with
/// `c I_d` top-left and `c' I_d` middle-left.
pub fn theta_star(eta: f64, c: f64, c_prime: f64, d: usize, n: usize) -> Result<TransformerParams> {
    let mut p = Matrix::zeros(2 * d + 1, 2 * d + 1);
    p[(2 * d, 2 * d)] = eta;
    let mut q = Matrix::zeros(2 * d + 1, 2 * d + 1);
    for i in 0..d {
        q[(i, i)] = c;
        q[(d + i, i)] = c_prime;
    }
    TransformerParams::new(vec![Layer { p, q }], false, AttnKind::Linear, MaskKind::Td0 { n }, 1)
}

/// Membership test for the theta* family: off-pattern entries of (P, Q) are
/// (numerically) zero and the two left-column d x d blocks are scalar
/// multiples of the identity.
pub fn is_theta_star(p: &Matrix, q: &Matrix, d: usize, tol: f64) -> bool {
    let sz = 2 * d + 1;
    if p.rows() != sz || p.cols() != sz || q.rows() != sz || q.cols() != sz {
        return false;
    }
    for i in 0..sz {
        for j in 0..sz {
            if i == 2 * d && j == 2 * d {
                continue;
            }
            if p[(i, j)].abs() > tol {
                return false;
            }
        }
    }
    let c = q[(0, 0)];
    let c_prime = q[(d, 0)];
    for i in 0..sz {
        for j in 0..sz {
            let want = if j < d && i < d {
                if i == j { c } else { 0.0 }
            } else if j < d && i < 2 * d {
                if i - d == j { c_prime } else { 0.0 }
            } else {
                0.0
            };
            if (q[(i, j)] - want).abs() > tol {
                return false;
            }
        }
    }
    true
}
