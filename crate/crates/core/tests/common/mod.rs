//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use dualpath::motion::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Euclidean distance between two sequences restricted to `cols`, by
/// walking rows and columns directly.
pub fn seq_distance(a: &Matrix, b: &Matrix, cols: Option<&[usize]>) -> f64 {
    let mut s = 0.0;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            if cols.is_none_or(|cs| cs.contains(&c)) {
                let d = a.get(r, c) - b.get(r, c);
                s += d * d;
            }
        }
    }
    s.sqrt()
}

/// `(1/(K(K−1))) Σ_i Σ_{j≠i} ‖x^i − x^j‖`.
pub fn apd_oracle(seqs: &[Matrix], cols: Option<&[usize]>) -> f64 {
    let k = seqs.len();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                total += seq_distance(&seqs[i], &seqs[j], cols);
            }
        }
    }
    total / (k * (k - 1)) as f64
}

pub fn mpd_oracle(seqs: &[Matrix], cols: Option<&[usize]>) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..seqs.len() {
        for j in 0..seqs.len() {
            if i != j {
                best = best.min(seq_distance(&seqs[i], &seqs[j], cols));
            }
        }
    }
    best
}

/// KL between diagonal Gaussians given means and standard deviations.
pub fn kl_oracle(mq: &[f64], sq: &[f64], mp: &[f64], sp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|i| (sp[i] / sq[i]).ln() + (sq[i] * sq[i] + (mq[i] - mp[i]).powi(2)) / (2.0 * sp[i] * sp[i]) - 0.5)
        .sum()
}

/// Central-difference Jacobian of `f` at `x`, row-major `[out][in]`.
pub fn numeric_jacobian(x: &[f64], h: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let n_out = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; n_out];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let dn = f(&xp);
        xp[i] = x[i];
        for o in 0..n_out {
            jac[o][i] = (up[o] - dn[o]) / (2.0 * h);
        }
    }
    jac
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn determinant(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut det = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        if m[piv][col] == 0.0 {
            return 0.0;
        }
        if piv != col {
            m.swap(piv, col);
            det = -det;
        }
        det *= m[col][col];
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    det
}
