//! Oscillatory operators evaluated directly: the semiclassical operator `B_h`
//! between atomic measures, thickened sets with their rescaled Lebesgue
//! measures, the grid discretization of `1_X 𝓕_h 1_Y`, and exponent fits.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Budget, Error, Result};
use crate::linalg::{
    lanczos_restarted, least_squares, power_iteration, top_singular_dense, LinearOperator, C64,
};
use crate::measures::{AxisBox, FractalMeasure, Phase};

pub const DENSE_CROSSOVER: usize = 512;
const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Weighted kernel of `B_h : L²(μ_Y) → L²(μ_X)`.
///
/// `kernel[(j, l)] = sqrt(wx_j) · exp(iΦ(x_j, y_l)/h) p(x_j, y_l) · sqrt(wy_l)`,
/// so its spectral norm on plain vectors is the operator norm between the
/// weighted spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    pub rows: Vec<Vec<f64>>,
    pub row_weights: Vec<f64>,
    pub cols: Vec<Vec<f64>>,
    pub col_weights: Vec<f64>,
    pub kernel: DMatrix<C64>,
    pub h: f64,
}

impl OperatorMatrix {
    /// Applies the row and column weights to an unweighted kernel.
    pub fn from_parts(
        rows: Vec<Vec<f64>>,
        row_weights: Vec<f64>,
        cols: Vec<Vec<f64>>,
        col_weights: Vec<f64>,
        base: DMatrix<C64>,
        h: f64,
    ) -> Result<Self> {
        if base.nrows() != rows.len()
            || base.ncols() != cols.len()
            || rows.len() != row_weights.len()
            || cols.len() != col_weights.len()
        {
            return Err(Error::invalid("operator matrix dimensions are inconsistent"));
        }
        let kernel = DMatrix::from_fn(base.nrows(), base.ncols(), |j, l| {
            base[(j, l)] * (row_weights[j] * col_weights[l]).sqrt()
        });
        if kernel.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::invalid("operator matrix has non-finite entries"));
        }
        Ok(OperatorMatrix {
            rows,
            row_weights,
            cols,
            col_weights,
            kernel,
            h,
        })
    }

    pub fn frobenius(&self) -> f64 {
        crate::linalg::frobenius(&self.kernel)
    }
}

fn check_h(mu_x: &FractalMeasure, mu_y: &FractalMeasure, phase: &Phase, h: f64) -> Result<()> {
    if phase.dim != mu_x.dim || phase.dim != mu_y.dim {
        return Err(Error::invalid("phase and measure dimensions differ"));
    }
    let floor = mu_x.scale_floor.max(mu_y.scale_floor);
    if !(h.is_finite() && h > 0.0) || h < floor * (1.0 - 1e-12) {
        return Err(Error::invalid(format!(
            "h = {h:e} must be at least the scale floor {floor:e}"
        )));
    }
    Ok(())
}

#[inline]
fn fio_entry(phase: &Phase, x: &[f64], y: &[f64], h: f64) -> C64 {
    C64::from_polar((phase.symbol)(x, y), phase.eval(x, y) / h)
}

pub fn build_fio(
    mu_x: &FractalMeasure,
    mu_y: &FractalMeasure,
    phase: &Phase,
    h: f64,
    budget: &Budget,
) -> Result<OperatorMatrix> {
    check_h(mu_x, mu_y, phase, h)?;
    budget.check("fio matrix entries", (mu_x.len() as u128) * (mu_y.len() as u128))?;
    let (m, n) = (mu_x.len(), mu_y.len());
    let rows: Vec<Vec<C64>> = mu_x
        .atoms
        .par_iter()
        .zip(&mu_x.weights)
        .map(|(x, wx)| {
            let sx = wx.sqrt();
            mu_y.atoms
                .iter()
                .zip(&mu_y.weights)
                .map(|(y, wy)| fio_entry(phase, x, y, h) * (sx * wy.sqrt()))
                .collect()
        })
        .collect();
    let kernel = DMatrix::from_fn(m, n, |j, l| rows[j][l]);
    if kernel.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
        return Err(Error::invalid("operator matrix has non-finite entries"));
    }
    Ok(OperatorMatrix {
        rows: mu_x.atoms.clone(),
        row_weights: mu_x.weights.clone(),
        cols: mu_y.atoms.clone(),
        col_weights: mu_y.weights.clone(),
        kernel,
        h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    Dense,
    PowerIteration,
    Lanczos,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub sigma: f64,
    pub method: NormMethod,
    pub iterations: usize,
}

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 10_000;

/// Dense SVD up to 512 rows and columns, power iteration on the Gram matrix
/// beyond that.
pub fn operator_norm(mat: &OperatorMatrix) -> Result<NormEstimate> {
    if mat.kernel.nrows().max(mat.kernel.ncols()) <= DENSE_CROSSOVER {
        Ok(NormEstimate {
            sigma: top_singular_dense(&mat.kernel),
            method: NormMethod::Dense,
            iterations: 0,
        })
    } else {
        operator_norm_iterative(mat)
    }
}

pub fn operator_norm_iterative(mat: &OperatorMatrix) -> Result<NormEstimate> {
    let it = power_iteration(&mat.kernel, POWER_TOL, POWER_MAX_ITER, 0x5eed)?;
    Ok(NormEstimate {
        sigma: it.sigma,
        method: NormMethod::PowerIteration,
        iterations: it.iterations,
    })
}

/// `B_h` with entries generated on demand, for sizes where the dense kernel
/// would not fit in memory.
pub struct FioOperator<'a> {
    pub mu_x: &'a FractalMeasure,
    pub mu_y: &'a FractalMeasure,
    pub phase: &'a Phase,
    pub h: f64,
}

impl<'a> FioOperator<'a> {
    pub fn new(
        mu_x: &'a FractalMeasure,
        mu_y: &'a FractalMeasure,
        phase: &'a Phase,
        h: f64,
    ) -> Result<Self> {
        check_h(mu_x, mu_y, phase, h)?;
        Ok(FioOperator {
            mu_x,
            mu_y,
            phase,
            h,
        })
    }

    pub fn norm(&self, tol: f64, seed: u64) -> Result<NormEstimate> {
        let it = lanczos_restarted(self, tol, 24, 400, seed)?;
        Ok(NormEstimate {
            sigma: it.sigma,
            method: NormMethod::Lanczos,
            iterations: it.iterations,
        })
    }
}

impl LinearOperator for FioOperator<'_> {
    fn nrows(&self) -> usize {
        self.mu_x.len()
    }

    fn ncols(&self) -> usize {
        self.mu_y.len()
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        let sy: Vec<C64> = x
            .iter()
            .zip(&self.mu_y.weights)
            .map(|(v, w)| v * w.sqrt())
            .collect();
        y.par_iter_mut()
            .zip(self.mu_x.atoms.par_iter().zip(&self.mu_x.weights))
            .for_each(|(out, (xa, wx))| {
                let mut acc = ZERO;
                for (ya, v) in self.mu_y.atoms.iter().zip(&sy) {
                    acc += fio_entry(self.phase, xa, ya, self.h) * v;
                }
                *out = acc * wx.sqrt();
            });
    }

    fn apply_adjoint(&self, y: &[C64], x: &mut [C64]) {
        let sx: Vec<C64> = y
            .iter()
            .zip(&self.mu_x.weights)
            .map(|(v, w)| v * w.sqrt())
            .collect();
        x.par_iter_mut()
            .zip(self.mu_y.atoms.par_iter().zip(&self.mu_y.weights))
            .for_each(|(out, (ya, wy))| {
                let mut acc = ZERO;
                for (xa, v) in self.mu_x.atoms.iter().zip(&sx) {
                    acc += fio_entry(self.phase, xa, ya, self.h).conj() * v;
                }
                *out = acc * wy.sqrt();
            });
    }
}

/// `B_h f` at the atoms of `μ_X`, for `f` given on the atoms of `μ_Y`.
pub fn apply_fio(
    mu_x: &FractalMeasure,
    mu_y: &FractalMeasure,
    phase: &Phase,
    h: f64,
    f: &[C64],
) -> Result<Vec<C64>> {
    check_h(mu_x, mu_y, phase, h)?;
    if f.len() != mu_y.len() {
        return Err(Error::invalid("f must hold one value per atom of Y"));
    }
    Ok(mu_x
        .atoms
        .par_iter()
        .map(|x| {
            let mut acc = ZERO;
            for ((y, w), v) in mu_y.atoms.iter().zip(&mu_y.weights).zip(f) {
                acc += fio_entry(phase, x, y, h) * (v * *w);
            }
            acc
        })
        .collect())
}

/// `‖g‖_{L²(μ)}`.
pub fn l2_norm(mu: &FractalMeasure, g: &[C64]) -> f64 {
    mu.weights
        .iter()
        .zip(g)
        .map(|(w, v)| w * v.norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// `X + B_r`, optionally clipped to a box, with nearest-center membership.
#[derive(Debug, Clone)]
pub struct ThickenedSet {
    pub centers: Vec<Vec<f64>>,
    pub radius: f64,
    pub clip: Option<AxisBox>,
    buckets: HashMap<Vec<i64>, Vec<usize>>,
}

impl ThickenedSet {
    pub fn new(centers: Vec<Vec<f64>>, radius: f64, clip: Option<AxisBox>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::invalid("thickened set needs at least one center"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid("thickening radius must be positive"));
        }
        let d = centers[0].len();
        if centers.iter().any(|c| c.len() != d) {
            return Err(Error::invalid("centers have mixed dimensions"));
        }
        let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, c) in centers.iter().enumerate() {
            buckets.entry(cell_of(c, radius)).or_default().push(i);
        }
        Ok(ThickenedSet {
            centers,
            radius,
            clip,
            buckets,
        })
    }

    /// Thickening of a measure's support, clipped to its bounding box.
    pub fn around(mu: &FractalMeasure, radius: f64) -> Result<Self> {
        Self::new(mu.atoms.clone(), radius, Some(mu.bounding_box.clone()))
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        if let Some(c) = &self.clip {
            if !c.contains_closed(p) {
                return false;
            }
        }
        let base = cell_of(p, self.radius);
        let d = base.len();
        let r2 = self.radius * self.radius;
        let mut key = base.clone();
        for code in 0..3usize.pow(d as u32) {
            let mut rem = code;
            for i in 0..d {
                key[i] = base[i] + (rem % 3) as i64 - 1;
                rem /= 3;
            }
            if let Some(list) = self.buckets.get(&key) {
                for &k in list {
                    let c = &self.centers[k];
                    let d2: f64 = c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d2 <= r2 {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Bounding box of the centers dilated by the radius, cut to the clip box.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for c in &self.centers {
            for i in 0..d {
                lo[i] = lo[i].min(c[i] - self.radius);
                hi[i] = hi[i].max(c[i] + self.radius);
            }
        }
        if let Some(b) = &self.clip {
            for i in 0..d {
                lo[i] = lo[i].max(b.lo(i));
                hi[i] = hi[i].min(b.hi(i));
            }
        }
        (lo, hi)
    }
}

fn cell_of(p: &[f64], r: f64) -> Vec<i64> {
    p.iter().map(|c| (c / r).floor() as i64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThickenOptions {
    pub volume_samples: usize,
    /// keep only the first this many accepted points as atoms
    pub atom_samples: Option<usize>,
    pub seed: u64,
}

impl Default for ThickenOptions {
    fn default() -> Self {
        ThickenOptions {
            volume_samples: 1 << 16,
            atom_samples: None,
            seed: 0x7f1c_4e55,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Thickening {
    pub measure: FractalMeasure,
    pub set: ThickenedSet,
    pub volume: f64,
    pub accepted: usize,
}

/// Additive recurrence with the generalized golden ratio (the R_d sequence).
fn kronecker_alphas(d: usize) -> Vec<f64> {
    let mut x = 2.0f64;
    for _ in 0..64 {
        x = (1.0 + x).powf(1.0 / (d as f64 + 1.0));
    }
    (1..=d).map(|i| x.powi(-(i as i32)).fract()).collect()
}

pub fn thicken(mu: &FractalMeasure, h: f64, delta: f64) -> Result<FractalMeasure> {
    Ok(thicken_with(mu, h, delta, &ThickenOptions::default())?.measure)
}

/// Atomic approximation of `μ_h = h^{δ-d}·Lebesgue` restricted to `X + B_h`.
pub fn thicken_with(
    mu: &FractalMeasure,
    h: f64,
    delta: f64,
    opts: &ThickenOptions,
) -> Result<Thickening> {
    if !(h.is_finite() && h > 0.0) || h < mu.scale_floor * (1.0 - 1e-12) {
        return Err(Error::invalid(format!(
            "h = {h:e} is below the measure's floor {:e}",
            mu.scale_floor
        )));
    }
    if !(0.0..=mu.dim as f64).contains(&delta) {
        return Err(Error::invalid("delta must lie in [0, d]"));
    }
    if opts.volume_samples == 0 {
        return Err(Error::invalid("volume_samples must be positive"));
    }
    let set = ThickenedSet::around(mu, h)?;
    let d = mu.dim;
    let (lo, hi) = set.bounds();
    let side: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| (b - a).max(0.0)).collect();
    let domain: f64 = side.iter().product();
    let alphas = kronecker_alphas(d);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shift: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
    let points: Vec<Vec<f64>> = (0..opts.volume_samples)
        .map(|n| {
            (0..d)
                .map(|i| lo[i] + (shift[i] + (n as f64 + 1.0) * alphas[i]).fract() * side[i])
                .collect()
        })
        .collect();
    let inside: Vec<bool> = points.par_iter().map(|p| set.contains(p)).collect();
    let accepted = inside.iter().filter(|b| **b).count();
    if accepted == 0 {
        return Err(Error::invalid("no quasi-random sample landed in the thickened set"));
    }
    let volume = domain * accepted as f64 / opts.volume_samples as f64;
    let keep = opts.atom_samples.unwrap_or(accepted).min(accepted).max(1);
    let atoms: Vec<Vec<f64>> = points
        .into_iter()
        .zip(&inside)
        .filter(|(_, b)| **b)
        .map(|(p, _)| p)
        .take(keep)
        .collect();
    let total = h.powf(delta - d as f64) * volume;
    let weights = vec![total / keep as f64; keep];
    let measure = FractalMeasure::new(d, atoms, weights, h, mu.bounding_box.clone())?;
    Ok(Thickening {
        measure,
        set,
        volume,
        accepted,
    })
}

/// Lattice points `k·step` inside a set, as a masked tensor grid.
#[derive(Debug, Clone)]
struct MaskedGrid {
    /// first lattice index and count per axis
    axes: Vec<(i64, usize)>,
    /// flattened indices (first axis slowest) of points inside the set
    inside: Vec<usize>,
}

impl MaskedGrid {
    fn build(set: &ThickenedSet, step: f64, budget: &Budget) -> Result<Self> {
        let (lo, hi) = set.bounds();
        let axes: Vec<(i64, usize)> = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| {
                let i0 = (a / step).ceil() as i64;
                let i1 = (b / step).floor() as i64;
                (i0, (i1 - i0 + 1).max(0) as usize)
            })
            .collect();
        let full: u128 = axes.iter().map(|a| a.1 as u128).product();
        budget.check("grid points", full)?;
        let full = full as usize;
        let d = axes.len();
        let inside: Vec<usize> = (0..full)
            .into_par_iter()
            .filter(|&flat| {
                let p = position(&axes, flat, step, d);
                set.contains(&p)
            })
            .collect();
        Ok(MaskedGrid { axes, inside })
    }

    fn full_len(&self) -> usize {
        self.axes.iter().map(|a| a.1).product()
    }

    fn coords(&self, axis: usize, step: f64) -> Vec<f64> {
        let (i0, n) = self.axes[axis];
        (0..n).map(|k| (i0 + k as i64) as f64 * step).collect()
    }

    fn point(&self, flat: usize, step: f64) -> Vec<f64> {
        position(&self.axes, flat, step, self.axes.len())
    }
}

fn position(axes: &[(i64, usize)], flat: usize, step: f64, d: usize) -> Vec<f64> {
    let mut rem = flat;
    let mut p = vec![0.0; d];
    for i in (0..d).rev() {
        let (i0, n) = axes[i];
        p[i] = (i0 + (rem % n) as i64) as f64 * step;
        rem /= n;
    }
    p
}

/// Maximal runs of consecutive flattened indices, split to bounded length so
/// the phase recurrence stays accurate.
fn runs(indices: &[usize]) -> Vec<(usize, usize)> {
    const MAX_RUN: usize = 256;
    let mut out = Vec::new();
    let mut k = 0;
    while k < indices.len() {
        let start = k;
        while k + 1 < indices.len() && indices[k + 1] == indices[k] + 1 && k + 1 - start < MAX_RUN {
            k += 1;
        }
        out.push((start, k + 1 - start));
        k += 1;
    }
    out
}

/// Discretized `1_X 𝓕_h 1_Y` with `𝓕_h f(ξ) = (2πh)^{-d/2} ∫ e^{-ix·ξ/h} f(x) dx`,
/// acting on point values with cell-volume weights folded into the scale.
pub struct GridFup {
    pub dim: usize,
    pub h: f64,
    pub step: f64,
    freq: MaskedGrid,
    space: MaskedGrid,
    scale: f64,
    /// d = 1: coordinates of masked points and runs over them
    freq_pos: Vec<f64>,
    space_pos: Vec<f64>,
    freq_runs: Vec<(usize, usize)>,
    space_runs: Vec<(usize, usize)>,
    /// d = 2: per-axis tables `t[b][a] = e^{-iξ_b x_a/h}` and adjoints
    tables: Vec<(DMatrix<C64>, DMatrix<C64>)>,
}

impl GridFup {
    pub fn new(freq: &ThickenedSet, space: &ThickenedSet, h: f64, step: f64, budget: &Budget) -> Result<Self> {
        let d = freq.dim();
        if space.dim() != d || !(1..=2).contains(&d) {
            return Err(Error::invalid("grid operator supports d = 1 or 2 with matching sets"));
        }
        if !(step > 0.0 && step <= h / 4.0 * (1.0 + 1e-12)) {
            return Err(Error::invalid(format!("grid step {step:e} must be at most h/4")));
        }
        let fg = MaskedGrid::build(freq, step, budget)?;
        let sg = MaskedGrid::build(space, step, budget)?;
        if fg.inside.is_empty() || sg.inside.is_empty() {
            return Err(Error::invalid("grid misses one of the sets entirely"));
        }
        let scale = (2.0 * PI * h).powf(-(d as f64) / 2.0) * step.powi(d as i32);
        let mut op = GridFup {
            dim: d,
            h,
            step,
            scale,
            freq_pos: Vec::new(),
            space_pos: Vec::new(),
            freq_runs: Vec::new(),
            space_runs: Vec::new(),
            tables: Vec::new(),
            freq: fg,
            space: sg,
        };
        if d == 1 {
            budget.check(
                "grid operator entries",
                op.freq.inside.len() as u128 * op.space.inside.len() as u128,
            )?;
            op.freq_pos = op.freq.inside.iter().map(|&f| op.freq.point(f, step)[0]).collect();
            op.space_pos = op.space.inside.iter().map(|&f| op.space.point(f, step)[0]).collect();
            op.freq_runs = runs(&op.freq.inside);
            op.space_runs = runs(&op.space.inside);
        } else {
            for axis in 0..d {
                let xi = op.freq.coords(axis, step);
                let x = op.space.coords(axis, step);
                budget.check("grid exponential table", xi.len() as u128 * x.len() as u128)?;
                let t = DMatrix::from_fn(xi.len(), x.len(), |b, a| C64::from_polar(1.0, -xi[b] * x[a] / h));
                let ta = t.adjoint();
                op.tables.push((t, ta));
            }
        }
        Ok(op)
    }

    pub fn space_points(&self) -> Vec<Vec<f64>> {
        self.space.inside.iter().map(|&f| self.space.point(f, self.step)).collect()
    }

    pub fn freq_points(&self) -> Vec<Vec<f64>> {
        self.freq.inside.iter().map(|&f| self.freq.point(f, self.step)).collect()
    }

    fn run_sums(
        &self,
        targets: &[f64],
        src_pos: &[f64],
        src_runs: &[(usize, usize)],
        sign: f64,
        v: &[C64],
        out: &mut [C64],
    ) {
        let (h, s, c) = (self.h, self.step, self.scale);
        out.par_iter_mut().zip(targets.par_iter()).for_each(|(o, &t)| {
            let ratio = C64::from_polar(1.0, sign * t * s / h);
            let mut acc = ZERO;
            for &(start, len) in src_runs {
                let mut e = C64::from_polar(1.0, sign * t * src_pos[start] / h);
                for k in start..start + len {
                    acc += e * v[k];
                    e *= ratio;
                }
            }
            *o = acc * c;
        });
    }

    /// `out[b1][b2] = Σ t1[b1][a1] t2[b2][a2] input[a1][a2]` with the cheaper
    /// contraction order.
    fn separable(
        t1: &DMatrix<C64>,
        t2: &DMatrix<C64>,
        input: &[C64],
        na: (usize, usize),
        nb: (usize, usize),
    ) -> Vec<C64> {
        let (na1, na2) = na;
        let (nb1, nb2) = nb;
        let live: Vec<usize> = (0..na1)
            .filter(|&a1| input[a1 * na2..(a1 + 1) * na2].iter().any(|z| *z != ZERO))
            .collect();
        let cost_a = nb1 * live.len() * na2 + nb1 * nb2 * na2;
        let cost_b = live.len() * na2 * nb2 + nb1 * nb2 * live.len();
        let mut out = vec![ZERO; nb1 * nb2];
        if cost_a <= cost_b {
            out.par_chunks_mut(nb2).enumerate().for_each(|(b1, row)| {
                let mut g = vec![ZERO; na2];
                for &a1 in &live {
                    let c = t1[(b1, a1)];
                    let src = &input[a1 * na2..(a1 + 1) * na2];
                    g.iter_mut().zip(src).for_each(|(gi, s)| *gi += c * s);
                }
                for (b2, o) in row.iter_mut().enumerate() {
                    let mut acc = ZERO;
                    for (a2, gi) in g.iter().enumerate() {
                        acc += t2[(b2, a2)] * gi;
                    }
                    *o = acc;
                }
            });
        } else {
            let g: Vec<Vec<C64>> = live
                .par_iter()
                .map(|&a1| {
                    let src = &input[a1 * na2..(a1 + 1) * na2];
                    (0..nb2)
                        .map(|b2| {
                            let mut acc = ZERO;
                            for (a2, s) in src.iter().enumerate() {
                                acc += t2[(b2, a2)] * s;
                            }
                            acc
                        })
                        .collect()
                })
                .collect();
            out.par_chunks_mut(nb2).enumerate().for_each(|(b1, row)| {
                for (gi, &a1) in g.iter().zip(&live) {
                    let c = t1[(b1, a1)];
                    row.iter_mut().zip(gi).for_each(|(o, v)| *o += c * v);
                }
            });
        }
        out
    }

    fn grid_apply(&self, from: &MaskedGrid, to: &MaskedGrid, adjoint: bool, x: &[C64], y: &mut [C64]) {
        let mut full = vec![ZERO; from.full_len()];
        for (v, &k) in x.iter().zip(&from.inside) {
            full[k] = *v;
        }
        let (t1, t2) = if adjoint {
            (&self.tables[0].1, &self.tables[1].1)
        } else {
            (&self.tables[0].0, &self.tables[1].0)
        };
        let out = Self::separable(
            t1,
            t2,
            &full,
            (from.axes[0].1, from.axes[1].1),
            (to.axes[0].1, to.axes[1].1),
        );
        for (o, &k) in y.iter_mut().zip(&to.inside) {
            *o = out[k] * self.scale;
        }
    }

    /// Largest singular value by restarted Lanczos (dense SVD for small grids).
    pub fn norm(&self) -> Result<NormEstimate> {
        let (m, n) = (self.nrows(), self.ncols());
        if m.max(n) <= DENSE_CROSSOVER {
            let mut dense = DMatrix::<C64>::zeros(m, n);
            let mut e = vec![ZERO; n];
            let mut col = vec![ZERO; m];
            for l in 0..n {
                e[l] = C64::new(1.0, 0.0);
                self.apply(&e, &mut col);
                e[l] = ZERO;
                dense.set_column(l, &nalgebra::DVector::from_column_slice(&col));
            }
            return Ok(NormEstimate {
                sigma: top_singular_dense(&dense),
                method: NormMethod::Dense,
                iterations: 0,
            });
        }
        let it = lanczos_restarted(self, 1e-10, 24, 400, 0x9e1d)?;
        Ok(NormEstimate {
            sigma: it.sigma,
            method: NormMethod::Lanczos,
            iterations: it.iterations,
        })
    }

    /// `‖A f‖ / ‖f‖` for `f` sampled on the space grid.
    pub fn rayleigh_quotient<F: Fn(&[f64]) -> C64>(&self, f: F) -> f64 {
        let v: Vec<C64> = self.space_points().iter().map(|p| f(p)).collect();
        let nv = crate::linalg::norm2(&v);
        if nv == 0.0 {
            return 0.0;
        }
        let mut out = vec![ZERO; self.nrows()];
        self.apply(&v, &mut out);
        crate::linalg::norm2(&out) / nv
    }
}

impl LinearOperator for GridFup {
    fn nrows(&self) -> usize {
        self.freq.inside.len()
    }

    fn ncols(&self) -> usize {
        self.space.inside.len()
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        if self.dim == 1 {
            self.run_sums(&self.freq_pos, &self.space_pos, &self.space_runs, -1.0, x, y);
        } else {
            self.grid_apply(&self.space, &self.freq, false, x, y);
        }
    }

    fn apply_adjoint(&self, y: &[C64], x: &mut [C64]) {
        if self.dim == 1 {
            self.run_sums(&self.space_pos, &self.freq_pos, &self.freq_runs, 1.0, y, x);
        } else {
            self.grid_apply(&self.freq, &self.space, true, y, x);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridNormReport {
    pub norm: f64,
    pub refined_norm: f64,
    pub relative_change: f64,
    pub step: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Norm of the grid operator at `step`, confirmed at `step/2`; a change above
/// 2% means the grid is too coarse.
pub fn fup_grid_norm(
    freq: &ThickenedSet,
    space: &ThickenedSet,
    h: f64,
    step: f64,
    budget: &Budget,
) -> Result<GridNormReport> {
    let coarse = GridFup::new(freq, space, h, step, budget)?;
    let a = coarse.norm()?.sigma;
    let (rows, cols) = (coarse.nrows(), coarse.ncols());
    drop(coarse);
    let b = GridFup::new(freq, space, h, step / 2.0, budget)?.norm()?.sigma;
    let change = (a - b).abs() / b.max(f64::MIN_POSITIVE);
    if change > 0.02 {
        return Err(Error::invalid(format!(
            "grid step {step:e} too coarse: halving it moves the norm from {a} to {b}"
        )));
    }
    Ok(GridNormReport {
        norm: a,
        refined_norm: b,
        relative_change: change,
        step,
        rows,
        cols,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub h: f64,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub table: Vec<SweepPoint>,
    pub fitted_slope: f64,
    pub baseline: f64,
    pub gain: f64,
}

impl SweepResult {
    /// Fits `log norm` against `log h`; the baseline is `max(0, (d-δ-δ')/2)`.
    pub fn from_table(table: Vec<SweepPoint>, d: usize, delta: f64, delta_prime: f64) -> Result<Self> {
        if table.len() < 3 {
            return Err(Error::invalid("a sweep needs at least three h values"));
        }
        let (hmin, hmax) = table
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), p| (a.min(p.h), b.max(p.h)));
        if hmax / hmin < 4.0 * (1.0 - 1e-12) {
            return Err(Error::invalid("h values must span at least two octaves"));
        }
        if table.iter().any(|p| !(p.h > 0.0 && p.norm > 0.0)) {
            return Err(Error::invalid("sweep values must be positive"));
        }
        let xs: Vec<f64> = table.iter().map(|p| p.h.ln()).collect();
        let ys: Vec<f64> = table.iter().map(|p| p.norm.ln()).collect();
        let (slope, _) = least_squares(&xs, &ys);
        let baseline = ((d as f64 - delta - delta_prime) / 2.0).max(0.0);
        Ok(SweepResult {
            table,
            fitted_slope: slope,
            baseline,
            gain: slope - baseline,
        })
    }

    pub fn intercept(&self) -> f64 {
        let xs: Vec<f64> = self.table.iter().map(|p| p.h.ln()).collect();
        let ys: Vec<f64> = self.table.iter().map(|p| p.norm.ln()).collect();
        least_squares(&xs, &ys).1
    }

    /// CSV `h,norm,log_h,log_norm`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["h", "norm", "log_h", "log_norm"])?;
        for p in &self.table {
            w.write_record([
                p.h.to_string(),
                p.norm.to_string(),
                p.h.ln().to_string(),
                p.norm.ln().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("sweep table", e))?;
        Ok(())
    }

    /// JSON `{fitted_slope, baseline, gain}`.
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "fitted_slope": self.fitted_slope,
            "baseline": self.baseline,
            "gain": self.gain,
        }))?)
    }

    /// Log-log scatter of the table with the fitted line.
    pub fn to_svg(&self) -> String {
        let (w, hgt, pad) = (480.0, 360.0, 48.0);
        let xs: Vec<f64> = self.table.iter().map(|p| p.h.ln()).collect();
        let ys: Vec<f64> = self.table.iter().map(|p| p.norm.ln()).collect();
        let c = self.intercept();
        let fit: Vec<f64> = xs.iter().map(|x| self.fitted_slope * x + c).collect();
        let (x0, x1) = minmax(&xs);
        let (y0, y1) = minmax(&ys.iter().chain(&fit).cloned().collect::<Vec<_>>());
        let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
        let sy = |y: f64| hgt - pad - (y - y0) / (y1 - y0).max(1e-12) * (hgt - 2.0 * pad);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{hgt}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"steelblue\"/>\n",
            sx(x0),
            sy(self.fitted_slope * x0 + c),
            sx(x1),
            sy(self.fitted_slope * x1 + c)
        ));
        for (x, y) in xs.iter().zip(&ys) {
            s.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"black\"/>\n",
                sx(*x),
                sy(*y)
            ));
        }
        s.push_str(&format!(
            "<text x=\"{pad}\" y=\"20\" font-size=\"12\">log norm vs log h, slope {:.4}</text>\n</svg>\n",
            self.fitted_slope
        ));
        s
    }
}

fn minmax(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)))
}

/// Evaluates `builder` at each `h` (in parallel, results kept in input order)
/// and fits the decay exponent.
pub fn norm_sweep<F>(builder: F, h_values: &[f64], d: usize, delta: f64, delta_prime: f64) -> Result<SweepResult>
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    if h_values.len() < 3 {
        return Err(Error::invalid("a sweep needs at least three h values"));
    }
    let table: Vec<SweepPoint> = h_values
        .par_iter()
        .map(|&h| Ok(SweepPoint { h, norm: builder(h)? }))
        .collect::<Result<_>>()?;
    SweepResult::from_table(table, d, delta, delta_prime)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cantor::{fup_norm, CantorSpec};
    use crate::measures::make_cantor_measure;
    use std::sync::Arc;

    fn cantor(k: u32) -> FractalMeasure {
        make_cantor_measure(&CantorSpec::line(3, &[0, 2], &[0, 2], k), &Budget::default()).unwrap()
    }

    #[test]
    fn zero_symbol_gives_zero_norm() {
        let mu = cantor(3);
        let p = Phase::dot(1, 1.0).with_symbol(Arc::new(|_, _| 0.0), 0.0);
        let m = build_fio(&mu, &mu, &p, 0.1, &Budget::default()).unwrap();
        assert_eq!(operator_norm(&m).unwrap().sigma, 0.0);
    }

    #[test]
    fn constant_phase_limit_is_rank_one() {
        let mu = cantor(4);
        let m = build_fio(&mu, &mu, &Phase::dot(1, 1.0), 1e9, &Budget::default()).unwrap();
        assert!((operator_norm(&m).unwrap().sigma - 1.0).abs() < 1e-8);
    }

    #[test]
    fn all_ones_and_diagonal_kernels() {
        let pts = vec![vec![0.0], vec![0.5]];
        let ones = DMatrix::from_element(2, 2, C64::new(1.0, 0.0));
        let m = OperatorMatrix::from_parts(pts.clone(), vec![1.0; 2], pts.clone(), vec![1.0; 2], ones, 1.0)
            .unwrap();
        assert!((operator_norm(&m).unwrap().sigma - 2.0).abs() < 1e-12);
        let three = vec![vec![0.0], vec![0.3], vec![0.6]];
        let diag = DMatrix::<C64>::identity(3, 3);
        let m = OperatorMatrix::from_parts(three.clone(), vec![1.0, 4.0, 0.25], three, vec![1.0; 3], diag, 1.0)
            .unwrap();
        assert!((operator_norm(&m).unwrap().sigma - 2.0).abs() < 1e-12);
    }

    #[test]
    fn iterative_and_dense_norms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = DMatrix::<C64>::from_fn(100, 100, |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let pts: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64 / 100.0]).collect();
        let m = OperatorMatrix::from_parts(pts.clone(), vec![1.0; 100], pts, vec![1.0; 100], base, 1.0).unwrap();
        let dense = operator_norm(&m).unwrap();
        let power = operator_norm_iterative(&m).unwrap();
        assert_eq!(dense.method, NormMethod::Dense);
        assert!((dense.sigma - power.sigma).abs() <= 1e-8 * dense.sigma);
        assert!(dense.sigma <= m.frobenius() + 1e-9);
    }

    #[test]
    fn dft_phase_reproduces_cantor_norms() {
        // Φ = -2πxy with h = 1/N turns B_h into the weighted DFT submatrix
        for k in 1..=4u32 {
            let spec = CantorSpec::line(3, &[0, 2], &[0, 2], k);
            let mu = make_cantor_measure(&spec, &Budget::default()).unwrap();
            let n = 3f64.powi(k as i32);
            let m = build_fio(&mu, &mu, &Phase::dot(1, 2.0 * PI), 1.0 / n, &Budget::default()).unwrap();
            let b = operator_norm(&m).unwrap().sigma;
            let r = fup_norm(&spec, &Budget::default()).unwrap().r;
            assert!((b * 2f64.powi(k as i32) / n.sqrt() - r).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn matrix_free_operator_matches_dense() {
        let mu = cantor(5);
        let p = Phase::sin_cos_plus_bilinear();
        let m = build_fio(&mu, &mu, &p, 0.01, &Budget::default()).unwrap();
        let op = FioOperator::new(&mu, &mu, &p, 0.01).unwrap();
        let a = operator_norm(&m).unwrap().sigma;
        let b = op.norm(1e-12, 3).unwrap().sigma;
        assert!((a - b).abs() < 1e-8 * a);
        let f: Vec<C64> = (0..mu.len()).map(|i| C64::new(1.0, i as f64 * 0.01)).collect();
        let g = apply_fio(&mu, &mu, &p, 0.01, &f).unwrap();
        let sq: Vec<C64> = f.iter().zip(&mu.weights).map(|(v, w)| v * w.sqrt()).collect();
        let mut out = vec![ZERO; mu.len()];
        op.apply(&sq, &mut out);
        let direct = l2_norm(&mu, &g);
        assert!((direct - crate::linalg::norm2(&out)).abs() < 1e-12);
    }

    #[test]
    fn thickening_single_and_separated_atoms() {
        let one = FractalMeasure::new(1, vec![vec![0.5]], vec![1.0], 0.01, AxisBox::unit(1)).unwrap();
        let t = thicken_with(&one, 0.01, 0.0, &ThickenOptions::default()).unwrap();
        assert!((t.measure.total_mass() - 2.0).abs() < 1e-12);
        let two = FractalMeasure::new(1, vec![vec![0.3], vec![0.6]], vec![0.5; 2], 0.01, AxisBox::unit(1)).unwrap();
        let t2 = thicken_with(&two, 0.01, 0.0, &ThickenOptions::default()).unwrap();
        assert!((t2.measure.total_mass() - 4.0).abs() < 4.0 * 1e-3, "{}", t2.measure.total_mass());
        let capped = thicken_with(
            &two,
            0.01,
            0.0,
            &ThickenOptions {
                atom_samples: Some(50),
                ..ThickenOptions::default()
            },
        )
        .unwrap();
        assert_eq!(capped.measure.len(), 50);
        assert!((capped.measure.total_mass() - t2.measure.total_mass()).abs() < 1e-12);
    }

    #[test]
    fn full_window_is_nearly_unitary() {
        let space = ThickenedSet::new(vec![vec![0.5]], 0.5, None).unwrap();
        let freq = ThickenedSet::new(vec![vec![0.5]], 4.0, None).unwrap();
        let h = 0.05;
        let op = GridFup::new(&freq, &space, h, h / 4.0, &Budget::default()).unwrap();
        let n = op.norm().unwrap().sigma;
        assert!((n - 1.0).abs() < 0.02, "{n}");
    }

    #[test]
    fn lattice_translation_leaves_the_grid_norm_unchanged() {
        let mu = cantor(4);
        let h = 3f64.powi(-3);
        let step = h / 4.0;
        // radius off the lattice so no grid point sits exactly on the boundary
        let r = 1.01 * h;
        let a = ThickenedSet::new(mu.atoms.clone(), r, None).unwrap();
        let v = 7.0 * step;
        let moved: Vec<Vec<f64>> = mu.atoms.iter().map(|p| vec![p[0] + v]).collect();
        let b = ThickenedSet::new(moved, r, None).unwrap();
        let n1 = GridFup::new(&a, &a, h, step, &Budget::default()).unwrap().norm().unwrap().sigma;
        let n2 = GridFup::new(&b, &b, h, step, &Budget::default()).unwrap().norm().unwrap().sigma;
        assert!((n1 - n2).abs() < 1e-9, "{n1} {n2}");
    }

    #[test]
    fn two_dimensional_grid_matches_dense_assembly() {
        let xs = ThickenedSet::new(vec![vec![0.0, 0.0], vec![0.3, 0.1]], 0.12, None).unwrap();
        let ys = ThickenedSet::new(vec![vec![0.1, -0.2]], 0.15, None).unwrap();
        let h = 0.2;
        let op = GridFup::new(&xs, &ys, h, h / 4.0, &Budget::default()).unwrap();
        let (fp, sp) = (op.freq_points(), op.space_points());
        let c = op.step * op.step / (2.0 * PI * h);
        let dense = DMatrix::from_fn(fp.len(), sp.len(), |b, a| {
            C64::from_polar(c, -(fp[b][0] * sp[a][0] + fp[b][1] * sp[a][1]) / h)
        });
        let v: Vec<C64> = (0..sp.len()).map(|i| C64::new((i as f64).sin(), 0.3)).collect();
        let mut out = vec![ZERO; fp.len()];
        op.apply(&v, &mut out);
        let expect = &dense * crate::linalg::dvec(&v);
        let err: f64 = out.iter().zip(expect.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        let w: Vec<C64> = (0..fp.len()).map(|i| C64::new(0.1, (i as f64).cos())).collect();
        let mut back = vec![ZERO; sp.len()];
        op.apply_adjoint(&w, &mut back);
        let expect = dense.adjoint() * crate::linalg::dvec(&w);
        let err: f64 = back.iter().zip(expect.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn sweep_fits_synthetic_power_law() {
        let hs = [0.5, 0.25, 0.125, 0.0625];
        let s = norm_sweep(|h| Ok(h.powf(0.3)), &hs, 1, 0.2, 0.2).unwrap();
        assert!((s.fitted_slope - 0.3).abs() < 1e-12);
        assert!((s.baseline - 0.3).abs() < 1e-12);
        assert!(norm_sweep(|h| Ok(h), &hs[..2], 1, 0.0, 0.0).is_err());
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("h,norm,log_h,log_norm"));
        assert!(s.to_svg().starts_with("<svg"));
    }
}
