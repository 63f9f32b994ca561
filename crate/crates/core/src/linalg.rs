//! Small dense and matrix-free linear algebra used by the norm estimators.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// A linear map between finite-dimensional complex spaces given by its action.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn apply(&self, x: &[C64], y: &mut [C64]);
    fn apply_adjoint(&self, y: &[C64], x: &mut [C64]);
}

impl LinearOperator for DMatrix<C64> {
    fn nrows(&self) -> usize {
        self.nrows()
    }

    fn ncols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        y.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
        // column-major storage: accumulate column by column
        for (j, xj) in x.iter().enumerate() {
            if *xj == C64::new(0.0, 0.0) {
                continue;
            }
            let col = self.column(j);
            for (yi, a) in y.iter_mut().zip(col.iter()) {
                *yi += a * xj;
            }
        }
    }

    fn apply_adjoint(&self, y: &[C64], x: &mut [C64]) {
        for (j, xj) in x.iter_mut().enumerate() {
            let col = self.column(j);
            let mut acc = C64::new(0.0, 0.0);
            for (a, yi) in col.iter().zip(y.iter()) {
                acc += a.conj() * yi;
            }
            *xj = acc;
        }
    }
}

/// Neumaier-compensated sum of squared moduli.
fn sum_sq<'a>(it: impl Iterator<Item = &'a C64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for z in it {
        let x = z.norm_sqr();
        let t = sum + x;
        comp += if sum.abs() >= x { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

pub fn norm2(v: &[C64]) -> f64 {
    sum_sq(v.iter()).sqrt()
}

pub fn frobenius(m: &DMatrix<C64>) -> f64 {
    sum_sq(m.iter()).sqrt()
}

/// Largest singular value through a full dense SVD.
pub fn top_singular_dense(m: &DMatrix<C64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// All singular values, descending.
pub fn singular_values_dense(m: &DMatrix<C64>) -> Vec<f64> {
    let mut s: Vec<f64> = m
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

fn random_unit(n: usize, seed: u64) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<C64> = (0..n)
        .map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
        .collect();
    let n = norm2(&v);
    v.iter_mut().for_each(|z| *z /= n);
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterativeNorm {
    pub sigma: f64,
    pub iterations: usize,
}

/// Power iteration on the Gram operator `A* A`; stops when the relative change
/// of the singular value estimate drops below `tol`.
pub fn power_iteration<O: LinearOperator + ?Sized>(
    op: &O,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<IterativeNorm> {
    let (m, n) = (op.nrows(), op.ncols());
    if m == 0 || n == 0 {
        return Ok(IterativeNorm {
            sigma: 0.0,
            iterations: 0,
        });
    }
    let mut v = random_unit(n, seed);
    let mut av = vec![C64::new(0.0, 0.0); m];
    let mut w = vec![C64::new(0.0, 0.0); n];
    let mut sigma = 0.0f64;
    let mut last_change = f64::INFINITY;
    for it in 1..=max_iter {
        op.apply(&v, &mut av);
        op.apply_adjoint(&av, &mut w);
        let wn = norm2(&w);
        if wn == 0.0 {
            return Ok(IterativeNorm {
                sigma: 0.0,
                iterations: it,
            });
        }
        let next = wn.sqrt();
        last_change = (next - sigma).abs() / next;
        sigma = next;
        for (vi, wi) in v.iter_mut().zip(w.iter()) {
            *vi = wi / wn;
        }
        if last_change <= tol {
            // report the Rayleigh value of the normalized iterate
            op.apply(&v, &mut av);
            return Ok(IterativeNorm {
                sigma: norm2(&av).max(sigma),
                iterations: it,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        last_change,
    })
}

/// Golub-Kahan-Lanczos bidiagonalization with full reorthogonalization.
/// Converges quickly even when the top singular values cluster.
pub fn lanczos_top_singular<O: LinearOperator + ?Sized>(
    op: &O,
    tol: f64,
    max_steps: usize,
    seed: u64,
) -> Result<IterativeNorm> {
    let (m, n) = (op.nrows(), op.ncols());
    if m == 0 || n == 0 {
        return Ok(IterativeNorm {
            sigma: 0.0,
            iterations: 0,
        });
    }
    let steps = max_steps.min(m).min(n).max(1);
    let mut vs: Vec<Vec<C64>> = Vec::with_capacity(steps + 1);
    let mut us: Vec<Vec<C64>> = Vec::with_capacity(steps);
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    vs.push(random_unit(n, seed));
    let mut prev = 0.0f64;
    let mut last_change = f64::INFINITY;
    for k in 0..steps {
        let mut u = vec![C64::new(0.0, 0.0); m];
        op.apply(&vs[k], &mut u);
        for q in &us {
            let c: C64 = q.iter().zip(u.iter()).map(|(a, b)| a.conj() * b).sum();
            u.iter_mut()
                .zip(q.iter())
                .for_each(|(ui, qi)| *ui -= c * qi);
        }
        let alpha = norm2(&u);
        alphas.push(alpha);
        if alpha > 0.0 {
            u.iter_mut().for_each(|z| *z /= alpha);
        }
        us.push(u);

        let mut v = vec![C64::new(0.0, 0.0); n];
        op.apply_adjoint(&us[k], &mut v);
        for q in &vs {
            let c: C64 = q.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum();
            v.iter_mut()
                .zip(q.iter())
                .for_each(|(vi, qi)| *vi -= c * qi);
        }
        let beta = norm2(&v);

        let kk = alphas.len();
        let mut b = DMatrix::<f64>::zeros(kk, kk);
        for i in 0..kk {
            b[(i, i)] = alphas[i];
            if i + 1 < kk {
                b[(i, i + 1)] = betas[i];
            }
        }
        let sigma = b
            .svd(false, false)
            .singular_values
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        last_change = if sigma > 0.0 {
            (sigma - prev).abs() / sigma
        } else {
            0.0
        };
        prev = sigma;
        let exhausted = beta <= 1e-14 * sigma.max(1e-300) || alpha == 0.0;
        if (k > 0 && last_change <= tol) || exhausted || k + 1 == m.min(n) {
            return Ok(IterativeNorm {
                sigma,
                iterations: k + 1,
            });
        }
        betas.push(beta);
        v.iter_mut().for_each(|z| *z /= beta);
        vs.push(v);
    }
    Err(Error::NonConvergence {
        iterations: steps,
        last_change,
    })
}

/// Restarted Golub-Kahan-Lanczos: runs `block` reorthogonalized steps, restarts
/// from the top Ritz vector, and stops when two consecutive restarts agree to
/// `tol`. Memory stays at `2·block` vectors.
pub fn lanczos_restarted<O: LinearOperator + ?Sized>(
    op: &O,
    tol: f64,
    block: usize,
    max_restarts: usize,
    seed: u64,
) -> Result<IterativeNorm> {
    let (m, n) = (op.nrows(), op.ncols());
    if m == 0 || n == 0 {
        return Ok(IterativeNorm {
            sigma: 0.0,
            iterations: 0,
        });
    }
    let block = block.max(2).min(m.min(n));
    let mut start = random_unit(n, seed);
    let mut prev = 0.0f64;
    let mut last_change = f64::INFINITY;
    let mut total = 0usize;
    for restart in 0..max_restarts {
        let mut vs: Vec<Vec<C64>> = vec![start.clone()];
        let mut us: Vec<Vec<C64>> = Vec::with_capacity(block);
        let mut alphas = Vec::with_capacity(block);
        let mut betas = Vec::with_capacity(block);
        for k in 0..block {
            let mut u = vec![C64::new(0.0, 0.0); m];
            op.apply(&vs[k], &mut u);
            for q in &us {
                let c: C64 = q.iter().zip(u.iter()).map(|(a, b)| a.conj() * b).sum();
                u.iter_mut().zip(q.iter()).for_each(|(ui, qi)| *ui -= c * qi);
            }
            let alpha = norm2(&u);
            alphas.push(alpha);
            total += 1;
            if alpha > 0.0 {
                u.iter_mut().for_each(|z| *z /= alpha);
            }
            us.push(u);
            if k + 1 == block || alpha == 0.0 {
                break;
            }
            let mut v = vec![C64::new(0.0, 0.0); n];
            op.apply_adjoint(&us[k], &mut v);
            for q in &vs {
                let c: C64 = q.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum();
                v.iter_mut().zip(q.iter()).for_each(|(vi, qi)| *vi -= c * qi);
            }
            let beta = norm2(&v);
            if beta <= 1e-14 * alphas.iter().cloned().fold(0.0, f64::max) {
                break;
            }
            betas.push(beta);
            v.iter_mut().for_each(|z| *z /= beta);
            vs.push(v);
        }
        let kk = alphas.len();
        let mut b = DMatrix::<f64>::zeros(kk, kk);
        for i in 0..kk {
            b[(i, i)] = alphas[i];
            if i + 1 < kk {
                b[(i, i + 1)] = betas[i];
            }
        }
        let svd = b.svd(false, true);
        let (imax, sigma) = svd
            .singular_values
            .iter()
            .cloned()
            .enumerate()
            .fold((0, 0.0), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
        last_change = if sigma > 0.0 {
            (sigma - prev).abs() / sigma
        } else {
            0.0
        };
        if sigma == 0.0 || (restart > 0 && last_change <= tol) || kk < block {
            return Ok(IterativeNorm {
                sigma,
                iterations: total,
            });
        }
        prev = sigma;
        let vt = svd.v_t.expect("requested right singular vectors");
        let mut next = vec![C64::new(0.0, 0.0); n];
        for (j, vj) in vs.iter().take(kk).enumerate() {
            let w = vt[(imax, j)];
            next.iter_mut().zip(vj).for_each(|(a, b)| *a += b * w);
        }
        let nn = norm2(&next);
        next.iter_mut().for_each(|z| *z /= nn);
        start = next;
    }
    Err(Error::NonConvergence {
        iterations: total,
        last_change,
    })
}

/// Gauss-Legendre nodes and weights on [0, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 0 { 1.0 } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Ordinary least squares fit `y = slope * x + intercept`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Spectral norm of a small real matrix.
pub fn spectral_norm_real(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

pub fn dvec(v: &[C64]) -> DVector<C64> {
    DVector::from_column_slice(v)
}
