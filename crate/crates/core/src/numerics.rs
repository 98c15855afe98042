//! Dense row-major matrices, weighted norms and least squares, and a
//! platform-stable seeded PRNG. Everything is 64-bit IEEE-754; the problem
//! sizes here (d <= 8, n <= 250) make dense arithmetic the right choice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Standard product. Errors on inner-dimension mismatch.
    pub fn mat_mul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "mat_mul: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let lhs = k * other.cols;
                let dst = i * other.cols;
                for j in 0..other.cols {
                    out.data[dst + j] += a * other.data[lhs + j];
                }
            }
        }
        Ok(out)
    }

    /// Product with shapes known to conform by construction.
    pub fn mul(&self, other: &Matrix) -> Matrix {
        self.mat_mul(other).expect("conformable by construction")
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * s).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// sqrt(sum_s d(s) v(s)^2). `d` must be a probability vector.
pub fn weighted_norm(v: &[f64], d: &[f64]) -> Result<f64> {
    if v.len() != d.len() {
        return Err(Error::Dimension(format!(
            "weighted_norm: len {} vs {}",
            v.len(),
            d.len()
        )));
    }
    if d.iter().any(|&w| w < 0.0) {
        return Err(Error::Domain("weighted_norm: negative weight".into()));
    }
    Ok(v.iter().zip(d).map(|(x, w)| w * x * x).sum::<f64>().sqrt())
}

/// Cosine similarity with the convention that near-zero vectors (norm below
/// 1e-12) compare as 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (na, nb) = (norm2(a), norm2(b));
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::Dimension("solve_linear: non-square or rhs mismatch".into()));
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap();
        if m[(pivot, col)].abs() < 1e-300 {
            return Err(Error::Singular { cond: f64::INFINITY, context: "solve_linear pivot".into() });
        }
        if pivot != col {
            for j in 0..n {
                let tmp = m[(col, j)];
                m[(col, j)] = m[(pivot, j)];
                m[(pivot, j)] = tmp;
            }
            x.swap(col, pivot);
        }
        for i in col + 1..n {
            let f = m[(i, col)] / m[(col, col)];
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m[(i, j)] -= f * m[(col, j)];
            }
            x[i] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= m[(i, j)] * x[j];
        }
        x[i] = s / m[(i, i)];
    }
    Ok(x)
}

fn invert(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = solve_linear(a, &e)?;
        inv.set_col(j, &col);
    }
    Ok(inv)
}

fn norm_1(a: &Matrix) -> f64 {
    (0..a.cols())
        .map(|j| (0..a.rows()).map(|i| a[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// argmin_w || Phi w - v ||_{d_p} via the weighted normal equations
/// (Phi^T D Phi) w = Phi^T D v. Fails when the weighted Gram matrix has an
/// estimated 1-norm condition number above 1e12.
pub fn weighted_least_squares(phi: &Matrix, v: &[f64], d_p: &[f64]) -> Result<Vec<f64>> {
    let (s, d) = (phi.rows(), phi.cols());
    if v.len() != s || d_p.len() != s {
        return Err(Error::Dimension("weighted_least_squares: row mismatch".into()));
    }
    if d_p.iter().any(|&w| w < 0.0) {
        return Err(Error::Domain("weighted_least_squares: negative weight".into()));
    }
    let mut gram = Matrix::zeros(d, d);
    let mut rhs = vec![0.0; d];
    for i in 0..s {
        let w = d_p[i];
        if w == 0.0 {
            continue;
        }
        let row = phi.row(i);
        for a in 0..d {
            rhs[a] += w * row[a] * v[i];
            for b in 0..d {
                gram[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    let cond = match invert(&gram) {
        Ok(inv) => norm_1(&gram) * norm_1(&inv),
        Err(_) => f64::INFINITY,
    };
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::Singular { cond, context: "weighted Gram matrix".into() });
    }
    solve_linear(&gram, &rhs)
}

/// xoshiro256++ seeded through splitmix64.
///
/// Pinned update equations (so sequences are identical across platforms):
/// splitmix64: `z = (s += 0x9E3779B97F4A7C15); z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
/// z = (z ^ z>>27) * 0x94D049BB133111EB; z ^ z>>31`.
/// xoshiro256++ output: `rotl(s0 + s3, 23) + s0`, with the usual xor-shift state
/// transition. Doubles are drawn as `(x >> 11) * 2^-53`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeededRng {
    seed: u64,
    state: [u64; 4],
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut next = || {
            sm = sm.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = sm;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        };
        SeededRng { seed, state: [next(), next(), next(), next()] }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for a worker; the label is mixed into the seed.
    pub fn derive(&self, label: u64) -> SeededRng {
        SeededRng::new(self.seed ^ label.wrapping_mul(0xD6E8_FEB8_6659_FD93).rotate_left(17))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    /// Sample an index from a probability vector.
    pub fn sample_index(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform01();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}
