//! Weighted atomic measures, axis-aligned boxes and phase functions.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cantor::CantorSpec;
use crate::error::{Budget, Error, Result};
use crate::linalg::spectral_norm_real;

/// Axis-aligned box `[min_corner, min_corner + side)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub min_corner: Vec<f64>,
    pub side: Vec<f64>,
}

impl AxisBox {
    pub fn new(min_corner: Vec<f64>, side: Vec<f64>) -> Result<Self> {
        if min_corner.len() != side.len() || side.is_empty() {
            return Err(Error::invalid(
                "box corner and side must have equal nonzero length",
            ));
        }
        if side.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("box sides must be positive and finite"));
        }
        Ok(AxisBox { min_corner, side })
    }

    pub(crate) fn from_bounds(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        let side = lo.iter().zip(&hi).map(|(a, b)| b - a).collect();
        AxisBox {
            min_corner: lo,
            side,
        }
    }

    pub fn unit(dim: usize) -> Self {
        AxisBox {
            min_corner: vec![0.0; dim],
            side: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.side.len()
    }

    pub fn lo(&self, i: usize) -> f64 {
        self.min_corner[i]
    }

    pub fn hi(&self, i: usize) -> f64 {
        self.min_corner[i] + self.side[i]
    }

    pub fn max_corner(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.hi(i)).collect()
    }

    pub fn center(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.min_corner[i] + 0.5 * self.side[i])
            .collect()
    }

    pub fn volume(&self) -> f64 {
        self.side.iter().product()
    }

    /// Half-open membership.
    pub fn contains(&self, p: &[f64]) -> bool {
        (0..self.dim()).all(|i| p[i] >= self.lo(i) && p[i] < self.hi(i))
    }

    pub fn contains_closed(&self, p: &[f64]) -> bool {
        (0..self.dim()).all(|i| p[i] >= self.lo(i) && p[i] <= self.hi(i))
    }

    pub fn contains_box(&self, other: &AxisBox) -> bool {
        (0..self.dim()).all(|i| other.lo(i) >= self.lo(i) && other.hi(i) <= self.hi(i))
    }

    /// Dilation by `alpha` about the barycenter.
    pub fn dilate(&self, alpha: f64) -> AxisBox {
        let c = self.center();
        let side: Vec<f64> = self.side.iter().map(|s| s * alpha).collect();
        let min_corner = c.iter().zip(&side).map(|(c, s)| c - 0.5 * s).collect();
        AxisBox { min_corner, side }
    }

    pub fn intersect(&self, other: &AxisBox) -> Option<AxisBox> {
        let d = self.dim();
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        for i in 0..d {
            let a = self.lo(i).max(other.lo(i));
            let b = self.hi(i).min(other.hi(i));
            if b <= a {
                return None;
            }
            lo.push(a);
            hi.push(b);
        }
        Some(AxisBox::from_bounds(lo, hi))
    }

    /// `self \ other` as at most `2d` disjoint boxes.
    pub fn subtract(&self, other: &AxisBox) -> Vec<AxisBox> {
        let Some(cut) = self.intersect(other) else {
            return vec![self.clone()];
        };
        let d = self.dim();
        let mut out = Vec::new();
        let mut lo: Vec<f64> = self.min_corner.clone();
        let mut hi: Vec<f64> = self.max_corner();
        for i in 0..d {
            if cut.lo(i) > lo[i] {
                let mut h = hi.clone();
                h[i] = cut.lo(i);
                out.push(AxisBox::from_bounds(lo.clone(), h));
            }
            if cut.hi(i) < hi[i] {
                let mut l = lo.clone();
                l[i] = cut.hi(i);
                out.push(AxisBox::from_bounds(l, hi.clone()));
            }
            lo[i] = cut.lo(i);
            hi[i] = cut.hi(i);
        }
        out
    }

    /// ℓ∞ distance from a point to the closed box (0 inside).
    pub fn dist_inf_to_point(&self, p: &[f64]) -> f64 {
        (0..self.dim())
            .map(|i| (self.lo(i) - p[i]).max(p[i] - self.hi(i)).max(0.0))
            .fold(0.0, f64::max)
    }

    /// ℓ∞ distance from an interior point to the boundary.
    pub fn dist_inf_to_boundary(&self, p: &[f64]) -> f64 {
        (0..self.dim())
            .map(|i| (p[i] - self.lo(i)).min(self.hi(i) - p[i]))
            .fold(f64::INFINITY, f64::min)
    }

    /// ℓ∞ Hausdorff distance between two boxes.
    pub fn hausdorff_inf(&self, other: &AxisBox) -> f64 {
        (0..self.dim())
            .map(|i| {
                (self.lo(i) - other.lo(i))
                    .abs()
                    .max((self.hi(i) - other.hi(i)).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn diameter(&self) -> f64 {
        self.side.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Weighted point cloud standing in for a compactly supported measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractalMeasure {
    pub dim: usize,
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub scale_floor: f64,
    pub bounding_box: AxisBox,
}

impl FractalMeasure {
    pub fn new(
        dim: usize,
        atoms: Vec<Vec<f64>>,
        weights: Vec<f64>,
        scale_floor: f64,
        bounding_box: AxisBox,
    ) -> Result<Self> {
        let m = FractalMeasure {
            dim,
            atoms,
            weights,
            scale_floor,
            bounding_box,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.bounding_box.dim() != self.dim {
            return Err(Error::invalid("measure dimension mismatch"));
        }
        if self.atoms.len() != self.weights.len() || self.atoms.is_empty() {
            return Err(Error::invalid(
                "atoms and weights must be nonempty and of equal length",
            ));
        }
        if self
            .bounding_box
            .side
            .iter()
            .any(|s| (*s - 1.0).abs() > 1e-12)
        {
            return Err(Error::invalid("bounding box must have unit side"));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights must be finite and nonnegative"));
        }
        let total = self.total_mass();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::invalid("total mass must be finite and positive"));
        }
        for (i, a) in self.atoms.iter().enumerate() {
            if a.len() != self.dim || !self.bounding_box.contains_closed(a) {
                return Err(Error::invalid(format!(
                    "atom {i} lies outside the bounding box"
                )));
            }
        }
        if !(self.scale_floor > 0.0 && self.scale_floor < 1.0) {
            return Err(Error::invalid("scale_floor must lie in (0, side)"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_probability(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= 1e-12
    }

    /// μ of a half-open box.
    pub fn mass_in_box(&self, b: &AxisBox) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .filter(|(a, _)| b.contains(a))
            .map(|(_, w)| *w)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: FractalMeasure = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

pub fn make_cantor_measure(spec: &CantorSpec, budget: &Budget) -> Result<FractalMeasure> {
    spec.validate_digits()?;
    if spec.m < 3 {
        return Err(Error::invalid("Cantor base must be at least 3"));
    }
    let count = (spec.a.len() as u128)
        .checked_pow(spec.k)
        .unwrap_or(u128::MAX);
    budget.check("cantor atoms", count)?;
    let pts = spec.points_of(&spec.a, budget)?;
    let n = spec.n() as f64;
    let w = 1.0 / count as f64;
    let atoms = pts
        .into_iter()
        .map(|p| p.into_iter().map(|c| c as f64 / n).collect())
        .collect();
    FractalMeasure::new(
        spec.d,
        atoms,
        vec![w; count as usize],
        1.0 / n,
        AxisBox::unit(spec.d),
    )
}

pub fn carpet_spec(level: u32) -> CantorSpec {
    let digits: Vec<Vec<u32>> = (0..3)
        .flat_map(|i| (0..3).map(move |j| vec![i, j]))
        .filter(|v| !(v[0] == 1 && v[1] == 1))
        .collect();
    CantorSpec {
        m: 3,
        d: 2,
        a: digits.clone(),
        b: digits,
        k: level,
    }
}

pub fn make_carpet_measure(level: u32, budget: &Budget) -> Result<FractalMeasure> {
    if level == 0 {
        return Err(Error::invalid("carpet level must be at least 1"));
    }
    make_cantor_measure(&carpet_spec(level), budget)
}

/// Horizontal and vertical segments of length 10 crossing at the origin, mapped
/// into the unit square by `u = (p + 5) / 10`.
#[derive(Debug, Clone)]
pub struct SegmentPair {
    pub x: FractalMeasure,
    pub y: FractalMeasure,
    /// physical coordinates are `scale * u + offset`
    pub scale: f64,
    pub offset: f64,
}

impl SegmentPair {
    pub fn to_physical(&self, u: &[f64]) -> Vec<f64> {
        u.iter().map(|c| self.scale * c + self.offset).collect()
    }
}

pub const SEGMENT_DEFAULT_RESOLUTION: usize = 1000;

pub fn make_segment_pair() -> SegmentPair {
    make_segment_pair_with(SEGMENT_DEFAULT_RESOLUTION).expect("default resolution is valid")
}

/// Midpoint samples of length measure, normalized to probability measures.
pub fn make_segment_pair_with(resolution: usize) -> Result<SegmentPair> {
    if resolution < 2 {
        return Err(Error::invalid("segment resolution must be at least 2"));
    }
    let n = resolution as f64;
    let w = vec![1.0 / n; resolution];
    let along: Vec<f64> = (0..resolution).map(|i| (i as f64 + 0.5) / n).collect();
    let xs = along.iter().map(|t| vec![*t, 0.5]).collect();
    let ys = along.iter().map(|t| vec![0.5, *t]).collect();
    let floor = 1.0 / n;
    Ok(SegmentPair {
        x: FractalMeasure::new(2, xs, w.clone(), floor, AxisBox::unit(2))?,
        y: FractalMeasure::new(2, ys, w, floor, AxisBox::unit(2))?,
        scale: 10.0,
        offset: -5.0,
    })
}

/// Uniform random cloud in the unit cube.
pub fn random_cloud(
    dim: usize,
    count: usize,
    scale_floor: f64,
    seed: u64,
) -> Result<FractalMeasure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms = (0..count)
        .map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect())
        .collect();
    FractalMeasure::new(
        dim,
        atoms,
        vec![1.0 / count as f64; count],
        scale_floor,
        AxisBox::unit(dim),
    )
}

/// Least-squares slope of `log N(ε)` against `log(1/ε)` for occupied grid cells.
pub fn box_counting_slope(atoms: &[Vec<f64>], scales: &[f64]) -> f64 {
    let mut xs = Vec::with_capacity(scales.len());
    let mut ys = Vec::with_capacity(scales.len());
    for &eps in scales {
        let mut cells: Vec<Vec<i64>> = atoms
            .iter()
            .map(|a| a.iter().map(|c| (c / eps).floor() as i64).collect())
            .collect();
        cells.sort();
        cells.dedup();
        xs.push((1.0 / eps).ln());
        ys.push((cells.len() as f64).ln());
    }
    crate::linalg::least_squares(&xs, &ys).0
}

pub type ScalarFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync>;

/// Phase Φ(x, y) with its mixed Hessian, norm bounds and amplitude p(x, y).
#[derive(Clone)]
pub struct Phase {
    pub dim: usize,
    pub phi: ScalarFn,
    pub mixed_hessian: MatrixFn,
    /// sup of the spectral norm of the mixed Hessian
    pub c0_bound: f64,
    /// C¹ norm (value plus gradient) of the mixed Hessian
    pub c1_bound: f64,
    pub symbol: ScalarFn,
    pub symbol_c1: f64,
    pub name: String,
}

impl std::fmt::Debug for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Phase")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("c0_bound", &self.c0_bound)
            .field("c1_bound", &self.c1_bound)
            .finish()
    }
}

pub const FD_HESSIAN_STEP: f64 = 1e-5;

fn fd_mixed(phi: &ScalarFn, x: &[f64], y: &[f64], h: f64) -> DMatrix<f64> {
    let d = x.len();
    let mut out = DMatrix::zeros(d, d);
    let mut xp = x.to_vec();
    let mut yp = y.to_vec();
    for i in 0..d {
        for j in 0..d {
            let mut v = 0.0;
            for (si, sj, s) in [
                (1.0, 1.0, 1.0),
                (1.0, -1.0, -1.0),
                (-1.0, 1.0, -1.0),
                (-1.0, -1.0, 1.0),
            ] {
                xp[i] = x[i] + si * h;
                yp[j] = y[j] + sj * h;
                v += s * phi(&xp, &yp);
            }
            xp[i] = x[i];
            yp[j] = y[j];
            out[(i, j)] = v / (4.0 * h * h);
        }
    }
    out
}

impl Phase {
    /// Φ(x, y) = -scale · x·y with p ≡ 1.
    pub fn dot(dim: usize, scale: f64) -> Phase {
        Phase {
            dim,
            phi: Arc::new(move |x, y| -scale * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()),
            mixed_hessian: Arc::new(move |x, _| DMatrix::identity(x.len(), x.len()) * (-scale)),
            c0_bound: scale.abs(),
            c1_bound: scale.abs(),
            symbol: Arc::new(|_, _| 1.0),
            symbol_c1: 1.0,
            name: if scale == 1.0 {
                "dot".into()
            } else {
                format!("dot*{scale}")
            },
        }
    }

    /// sin(x)cos(y) + xy on the line.
    pub fn sin_cos_plus_bilinear() -> Phase {
        Phase {
            dim: 1,
            phi: Arc::new(|x, y| x[0].sin() * y[0].cos() + x[0] * y[0]),
            mixed_hessian: Arc::new(|x, y| {
                DMatrix::from_element(1, 1, 1.0 - x[0].cos() * y[0].sin())
            }),
            c0_bound: 2.0,
            c1_bound: 3.0,
            symbol: Arc::new(|_, _| 1.0),
            symbol_c1: 1.0,
            name: "sin_cos_plus_xy".into(),
        }
    }

    /// sin(x)cos(y) on the line.
    pub fn sin_cos() -> Phase {
        Phase {
            dim: 1,
            phi: Arc::new(|x, y| x[0].sin() * y[0].cos()),
            mixed_hessian: Arc::new(|x, y| DMatrix::from_element(1, 1, -x[0].cos() * y[0].sin())),
            c0_bound: 1.0,
            c1_bound: 2.0,
            symbol: Arc::new(|_, _| 1.0),
            symbol_c1: 1.0,
            name: "sin_cos".into(),
        }
    }

    /// Builds the mixed Hessian from central differences of `phi`.
    pub fn from_phi(dim: usize, phi: ScalarFn, c0_bound: f64, c1_bound: f64) -> Phase {
        let p = phi.clone();
        Phase {
            dim,
            phi,
            mixed_hessian: Arc::new(move |x, y| fd_mixed(&p, x, y, FD_HESSIAN_STEP)),
            c0_bound,
            c1_bound,
            symbol: Arc::new(|_, _| 1.0),
            symbol_c1: 1.0,
            name: "custom".into(),
        }
    }

    pub fn with_symbol(mut self, symbol: ScalarFn, symbol_c1: f64) -> Phase {
        self.symbol = symbol;
        self.symbol_c1 = symbol_c1;
        self
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.phi)(x, y)
    }

    /// Compares the Hessian evaluator against a Richardson-extrapolated central
    /// difference at random probes in the unit cube.
    pub fn finite_difference_check(&self, probes: usize, seed: u64) -> FdReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let mut max_norm = 0.0f64;
        let h = 1e-3;
        for _ in 0..probes {
            let x: Vec<f64> = (0..self.dim).map(|_| rng.gen::<f64>()).collect();
            let y: Vec<f64> = (0..self.dim).map(|_| rng.gen::<f64>()).collect();
            let exact = (self.mixed_hessian)(&x, &y);
            let coarse = fd_mixed(&self.phi, &x, &y, h);
            let fine = fd_mixed(&self.phi, &x, &y, h / 2.0);
            let fd = (fine * 4.0 - coarse) / 3.0;
            let scale = exact.amax().max(1e-300);
            worst = worst.max((fd - &exact).amax() / scale);
            max_norm = max_norm.max(spectral_norm_real(&exact));
        }
        FdReport {
            max_relative_error: worst,
            max_hessian_norm: max_norm,
            c0_bound_holds: max_norm <= self.c0_bound * (1.0 + 1e-12),
        }
    }
}

pub fn standard_phase() -> Phase {
    Phase::dot(2, 1.0)
}

pub fn standard_phase_dim(dim: usize) -> Phase {
    Phase::dot(dim, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub max_hessian_norm: f64,
    pub c0_bound_holds: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cantor(m: u32, d: usize, digits: &[u32], k: u32) -> CantorSpec {
        let a: Vec<Vec<u32>> = if d == 1 {
            digits.iter().map(|v| vec![*v]).collect()
        } else {
            digits
                .iter()
                .flat_map(|i| digits.iter().map(move |j| vec![*i, *j]))
                .collect()
        };
        CantorSpec {
            m,
            d,
            a: a.clone(),
            b: a,
            k,
        }
    }

    #[test]
    fn cantor_measure_level_one() {
        let mu = make_cantor_measure(&cantor(3, 1, &[0, 2], 1), &Budget::default()).unwrap();
        assert_eq!(mu.atoms, vec![vec![0.0], vec![2.0 / 3.0]]);
        assert_eq!(mu.weights, vec![0.5, 0.5]);
        assert_eq!(mu.scale_floor, 1.0 / 3.0);
    }

    #[test]
    fn full_alphabet_is_uniform_grid() {
        let mu = make_cantor_measure(&cantor(3, 1, &[0, 1, 2], 2), &Budget::default()).unwrap();
        let xs: Vec<f64> = mu.atoms.iter().map(|a| a[0]).collect();
        let expect: Vec<f64> = (0..9).map(|i| i as f64 / 9.0).collect();
        assert_eq!(xs, expect);
        assert!(mu.weights.iter().all(|w| *w == 1.0 / 9.0));
    }

    #[test]
    fn planar_cantor_box_dimension() {
        let mu = make_cantor_measure(&cantor(3, 2, &[0, 2], 3), &Budget::default()).unwrap();
        assert_eq!(mu.len(), 64);
        // occupied triadic cells: 4, 16, 64 at scales 3^-1, 3^-2, 3^-3
        let s = box_counting_slope(&mu.atoms, &[1.0 / 3.0, 1.0 / 9.0, 1.0 / 27.0]);
        assert!((s - 4f64.ln() / 3f64.ln()).abs() < 1e-9, "slope {s}");
    }

    #[test]
    fn carpet_levels() {
        let b = Budget::default();
        let c1 = make_carpet_measure(1, &b).unwrap();
        assert_eq!(c1.len(), 8);
        assert!(c1.weights.iter().all(|w| *w == 0.125));
        assert_eq!(make_carpet_measure(2, &b).unwrap().len(), 64);
        let c3 = make_carpet_measure(3, &b).unwrap();
        let s = box_counting_slope(&c3.atoms, &[1.0 / 3.0, 1.0 / 9.0, 1.0 / 27.0]);
        assert!((s - 8f64.ln() / 3f64.ln()).abs() < 1e-9, "slope {s}");
    }

    #[test]
    fn budget_and_alphabet_errors() {
        let spec = cantor(3, 1, &[0, 2], 30);
        assert!(matches!(
            make_cantor_measure(&spec, &Budget::new(1000)),
            Err(Error::Budget { .. })
        ));
        let empty = CantorSpec {
            m: 3,
            d: 1,
            a: vec![],
            b: vec![vec![0]],
            k: 1,
        };
        assert!(make_cantor_measure(&empty, &Budget::default()).is_err());
    }

    #[test]
    fn segment_pair_is_one_dimensional() {
        let pair = make_segment_pair();
        assert!(pair.x.atoms.iter().all(|a| a[1] == 0.5));
        assert!(pair.y.atoms.iter().all(|a| a[0] == 0.5));
        let scales: Vec<f64> = (2..7).map(|k| 2f64.powi(-k)).collect();
        let s = box_counting_slope(&pair.x.atoms, &scales);
        assert!((s - 1.0).abs() < 0.05, "slope {s}");
        let p = pair.to_physical(&pair.x.atoms[0]);
        assert!((p[0] + 4.995).abs() < 1e-12 && p[1] == 0.0);
    }

    #[test]
    fn standard_phase_values() {
        let phase = standard_phase();
        assert_eq!(phase.eval(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(phase.eval(&[1.0, 2.0], &[3.0, 4.0]), -11.0);
        let h = (phase.mixed_hessian)(&[0.3, 0.1], &[0.7, 0.2]);
        assert_eq!(h, DMatrix::identity(2, 2) * -1.0);
        let r = phase.finite_difference_check(100, 11);
        assert!(r.max_relative_error <= 1e-8, "{r:?}");
        assert!(r.c0_bound_holds);
    }

    #[test]
    fn fallback_hessian_matches_analytic() {
        let analytic = Phase::sin_cos_plus_bilinear();
        let fd = Phase::from_phi(1, analytic.phi.clone(), 2.0, 3.0);
        for (x, y) in [(0.1, 0.2), (0.7, -0.4), (1.3, 0.9)] {
            let a = (analytic.mixed_hessian)(&[x], &[y])[(0, 0)];
            let b = (fd.mixed_hessian)(&[x], &[y])[(0, 0)];
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert!(analytic.finite_difference_check(100, 5).max_relative_error < 1e-5);
    }

    #[test]
    fn box_arithmetic() {
        let b = AxisBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(b.contains(&[0.0, 0.5]) && !b.contains(&[1.0, 0.5]));
        assert!(b.contains_closed(&[1.0, 0.5]));
        let big = b.dilate(1.5);
        assert_eq!(big.min_corner, vec![-0.25, -0.25]);
        assert_eq!(b.hausdorff_inf(&big), 0.25);
        let hole = AxisBox::new(vec![0.25, 0.25], vec![0.5, 0.5]).unwrap();
        let pieces = b.subtract(&hole);
        assert_eq!(pieces.len(), 4);
        let v: f64 = pieces.iter().map(|p| p.volume()).sum();
        assert!((v - 0.75).abs() < 1e-15);
        assert!(AxisBox::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mu = make_cantor_measure(&cantor(3, 2, &[0, 2], 2), &Budget::default()).unwrap();
        let back = FractalMeasure::from_json(&mu.to_json().unwrap()).unwrap();
        assert_eq!(mu, back);
    }
}
