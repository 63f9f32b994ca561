//! Empirical regularity, doubling and nonorthogonality constants, plus
//! quadrature checks of the rectangle mean value identities.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::gauss_legendre;
use crate::measures::{FractalMeasure, Phase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub alpha: f64,
    pub beta: f64,
    pub grid: Vec<f64>,
}

impl ScaleRange {
    /// Powers of two inside `[alpha, beta]`, coarsest first.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        Self::geometric(alpha, beta, 2.0)
    }

    /// Powers of `ratio` inside `[alpha, beta]`. The grid is anchored at 1 so
    /// that a narrower range yields a subset of scales.
    pub fn geometric(alpha: f64, beta: f64, ratio: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= beta && ratio > 1.0) {
            return Err(Error::invalid("scale range needs 0 < alpha <= beta and ratio > 1"));
        }
        let hi = (beta.ln() / ratio.ln() + 1e-9).floor() as i32;
        let lo = (alpha.ln() / ratio.ln() - 1e-9).ceil() as i32;
        let mut grid: Vec<f64> = (lo..=hi).rev().map(|j| ratio.powi(j)).collect();
        if grid.is_empty() {
            grid.push(beta);
        }
        Ok(ScaleRange { alpha, beta, grid })
    }

    pub fn with_grid(grid: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid("scale grid must be nonempty and positive"));
        }
        let alpha = grid.iter().cloned().fold(f64::INFINITY, f64::min);
        let beta = grid.iter().cloned().fold(0.0, f64::max);
        Ok(ScaleRange { alpha, beta, grid })
    }

    fn check_floor(&self, mu: &FractalMeasure) -> Result<()> {
        if self.alpha < mu.scale_floor * (1.0 - 1e-12) {
            return Err(Error::invalid(format!(
                "finest scale {:e} is below the measure's floor {:e}",
                self.alpha, mu.scale_floor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    /// box center, or the quadruple x1, x2, y1, y2
    pub points: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
    pub kind: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub scales: Vec<f64>,
    pub value: f64,
    pub witness: Witness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantReport {
    pub value: f64,
    pub witnesses: Vec<Witness>,
    pub per_scale: Vec<ScaleEntry>,
    /// configurations skipped because a ball held fewer than two atoms
    pub under_resolved: usize,
}

impl ConstantReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Per-scale table as CSV `scale_x,scale_y,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scale_x", "scale_y", "value"])?;
        for e in &self.per_scale {
            let sy = e.scales.get(1).copied().unwrap_or(e.scales[0]);
            w.write_record([e.scales[0].to_string(), sy.to_string(), e.value.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Uniform bucket grid for closed-box and ball queries.
pub(crate) struct PointGrid<'a> {
    pts: &'a [Vec<f64>],
    cell: f64,
    buckets: HashMap<Vec<i64>, Vec<usize>>,
}

impl<'a> PointGrid<'a> {
    pub(crate) fn new(pts: &'a [Vec<f64>], cell: f64) -> Self {
        let mut buckets: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, p) in pts.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        PointGrid { pts, cell, buckets }
    }

    fn key(p: &[f64], cell: f64) -> Vec<i64> {
        p.iter().map(|c| (c / cell).floor() as i64).collect()
    }

    /// Indices of points in the closed box `[lo, hi]`, ascending.
    pub(crate) fn in_box(&self, lo: &[f64], hi: &[f64]) -> Vec<usize> {
        let a = Self::key(lo, self.cell);
        let b = Self::key(hi, self.cell);
        let mut out = Vec::new();
        let d = lo.len();
        let mut cur = a.clone();
        loop {
            if let Some(v) = self.buckets.get(&cur) {
                out.extend(v.iter().copied().filter(|&i| {
                    let p = &self.pts[i];
                    (0..d).all(|k| p[k] >= lo[k] && p[k] <= hi[k])
                }));
            }
            let mut k = 0;
            loop {
                if k == d {
                    out.sort_unstable();
                    return out;
                }
                if cur[k] < b[k] {
                    cur[k] += 1;
                    break;
                }
                cur[k] = a[k];
                k += 1;
            }
        }
    }

    /// Indices within closed Euclidean distance `r` of `x`.
    pub(crate) fn in_ball(&self, x: &[f64], r: f64) -> Vec<usize> {
        let lo: Vec<f64> = x.iter().map(|c| c - r).collect();
        let hi: Vec<f64> = x.iter().map(|c| c + r).collect();
        let r2 = r * r;
        self.in_box(&lo, &hi)
            .into_iter()
            .filter(|&i| self.pts[i].iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= r2)
            .collect()
    }
}

fn mass(mu: &FractalMeasure, idx: &[usize]) -> f64 {
    idx.iter().map(|&i| mu.weights[i]).sum()
}

/// Closed box of side `r` centered at `c`.
fn box_mass(mu: &FractalMeasure, grid: &PointGrid, c: &[f64], r: f64) -> f64 {
    let lo: Vec<f64> = c.iter().map(|v| v - r / 2.0).collect();
    let hi: Vec<f64> = c.iter().map(|v| v + r / 2.0).collect();
    mass(mu, &grid.in_box(&lo, &hi))
}

const MAX_GRID_BOXES: usize = 1 << 18;

fn sample_centers(mu: &FractalMeasure, r: f64) -> Vec<(Vec<f64>, &'static str)> {
    let d = mu.dim;
    let mut out: Vec<(Vec<f64>, &'static str)> = mu.atoms.iter().map(|a| (a.clone(), "centered")).collect();
    out.extend(
        mu.atoms
            .iter()
            .map(|a| (a.iter().map(|c| c + r / 2.0).collect(), "cornered")),
    );
    let mut step = r / 2.0;
    let bb = &mu.bounding_box;
    let count = |s: f64| ((1.0 + r) / s).ceil() as usize + 1;
    while count(step).saturating_pow(d as u32) > MAX_GRID_BOXES {
        step *= 2.0;
    }
    let n = count(step);
    let total = n.pow(d as u32);
    for flat in 0..total {
        let mut rem = flat;
        let c: Vec<f64> = (0..d)
            .map(|k| {
                let i = rem % n;
                rem /= n;
                bb.lo(k) - r / 2.0 + i as f64 * step
            })
            .collect();
        out.push((c, "grid"));
    }
    out
}

fn finish(mut per_scale: Vec<ScaleEntry>, maximize: bool, under: usize) -> ConstantReport {
    per_scale.retain(|e| e.value.is_finite());
    let pick = per_scale
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |acc, (i, e)| match acc {
            Some((_, v)) if (maximize && e.value <= v) || (!maximize && e.value >= v) => acc,
            _ => Some((i, e.value)),
        });
    let (value, witnesses) = match pick {
        Some((i, v)) => (v, vec![per_scale[i].witness.clone()]),
        None => (if maximize { 1.0 } else { 0.0 }, vec![]),
    };
    ConstantReport {
        value,
        witnesses,
        per_scale,
        under_resolved: under,
    }
}

/// Smallest `C_R ≥ 1` with `μ(I) ≤ C_R r^δ` on sampled closed boxes and
/// `r^δ ≤ C_R μ(I)` on atom-centered ones.
pub fn estimate_regularity(mu: &FractalMeasure, range: &ScaleRange, delta: f64) -> Result<ConstantReport> {
    range.check_floor(mu)?;
    let per_scale: Vec<ScaleEntry> = range
        .grid
        .par_iter()
        .map(|&r| {
            let grid = PointGrid::new(&mu.atoms, r);
            let rd = r.powf(delta);
            let mut best = (1.0f64, Witness {
                points: vec![],
                scales: vec![r],
                kind: "trivial".into(),
                value: 1.0,
            });
            for (c, kind) in sample_centers(mu, r) {
                let m = box_mass(mu, &grid, &c, r);
                let mut v = m / rd;
                let mut k = kind;
                if kind == "centered" && m > 0.0 && rd / m > v {
                    v = rd / m;
                    k = "centered_lower";
                }
                if v > best.0 {
                    best = (v, Witness {
                        points: vec![c],
                        scales: vec![r],
                        kind: k.into(),
                        value: v,
                    });
                }
            }
            ScaleEntry {
                scales: vec![r],
                value: best.0,
                witness: best.1,
            }
        })
        .collect();
    Ok(finish(per_scale, true, 0))
}

/// Re-evaluates a regularity or doubling witness.
pub fn reevaluate_box_witness(mu: &FractalMeasure, w: &Witness, delta: f64) -> f64 {
    let r = w.scales[0];
    if w.points.is_empty() {
        return 1.0;
    }
    let grid = PointGrid::new(&mu.atoms, r);
    let m = box_mass(mu, &grid, &w.points[0], r);
    match w.kind.as_str() {
        "centered_lower" => r.powf(delta) / m,
        "doubling" => box_mass(mu, &PointGrid::new(&mu.atoms, 2.0 * r), &w.points[0], 2.0 * r) / m,
        _ => m / r.powf(delta),
    }
}

/// Smallest `C_D` with `μ(2I) ≤ C_D μ(I)` over atom-centered closed cubes.
pub fn estimate_doubling(mu: &FractalMeasure, range: &ScaleRange) -> Result<ConstantReport> {
    range.check_floor(mu)?;
    let per_scale: Vec<ScaleEntry> = range
        .grid
        .par_iter()
        .map(|&r| {
            let g1 = PointGrid::new(&mu.atoms, r);
            let g2 = PointGrid::new(&mu.atoms, 2.0 * r);
            let mut best = (1.0f64, vec![]);
            for a in &mu.atoms {
                let v = box_mass(mu, &g2, a, 2.0 * r) / box_mass(mu, &g1, a, r);
                if v > best.0 {
                    best = (v, vec![a.clone()]);
                }
            }
            ScaleEntry {
                scales: vec![r],
                value: best.0,
                witness: Witness {
                    points: best.1,
                    scales: vec![r],
                    kind: "doubling".into(),
                    value: best.0,
                },
            }
        })
        .collect();
    Ok(finish(per_scale, true, 0))
}

#[derive(Debug, Clone, Copy)]
pub struct NonorthogonalityOptions {
    /// centers per side and scale, spread evenly over the atom list
    pub max_centers: usize,
    /// balls with fewer atoms are searched exhaustively over pairs
    pub exhaustive_below: usize,
    pub samples: usize,
    /// larger balls are thinned to this many atoms, keeping the first and last
    pub max_ball_atoms: usize,
    pub seed: u64,
}

impl Default for NonorthogonalityOptions {
    fn default() -> Self {
        NonorthogonalityOptions {
            max_centers: 16,
            exhaustive_below: 64,
            samples: 2000,
            max_ball_atoms: 512,
            seed: 0x0c0ffee,
        }
    }
}

fn spread(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k).collect()
}

/// Evenly spaced subset in lexicographic coordinate order.
fn thin(mut ball: Vec<usize>, atoms: &[Vec<f64>], k: usize) -> Vec<usize> {
    let n = ball.len();
    if n <= k || k < 2 {
        return ball;
    }
    ball.sort_by(|&a, &b| atoms[a].partial_cmp(&atoms[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    (0..k).map(|i| ball[i * (n - 1) / (k - 1)]).collect()
}

/// Mixed second difference of Φ over a quadruple.
pub fn mixed_difference(phase: &Phase, x1: &[f64], x2: &[f64], y1: &[f64], y2: &[f64]) -> f64 {
    let p = &phase.phi;
    p(x1, y1) - p(x2, y1) - p(x1, y2) + p(x2, y2)
}

struct BallSearch {
    value: f64,
    quad: [usize; 4],
}

fn search_balls(
    bx: &[usize],
    by: &[usize],
    mx: &FractalMeasure,
    my: &FractalMeasure,
    phase: &Phase,
    opts: &NonorthogonalityOptions,
    seed: u64,
) -> BallSearch {
    let table: Vec<Vec<f64>> = bx
        .iter()
        .map(|&i| by.iter().map(|&j| phase.eval(&mx.atoms[i], &my.atoms[j])).collect())
        .collect();
    let mut best = BallSearch {
        value: -1.0,
        quad: [0; 4],
    };
    let mut visit = |a: usize, b: usize| {
        let (mut lo, mut hi) = ((f64::INFINITY, 0usize), (f64::NEG_INFINITY, 0usize));
        for j in 0..by.len() {
            let g = table[a][j] - table[b][j];
            if g < lo.0 {
                lo = (g, j);
            }
            if g > hi.0 {
                hi = (g, j);
            }
        }
        let v = hi.0 - lo.0;
        if v > best.value {
            best = BallSearch {
                value: v,
                quad: [bx[a], bx[b], by[hi.1], by[lo.1]],
            };
        }
    };
    if bx.len() < opts.exhaustive_below {
        for a in 0..bx.len() {
            for b in a + 1..bx.len() {
                visit(a, b);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..opts.samples {
            let a = rng.gen_range(0..bx.len());
            let b = rng.gen_range(0..bx.len());
            visit(a, b);
        }
    }
    best
}

/// Empirical `c_N`: the minimum over sampled centers and scale pairs of the
/// largest normalized mixed difference inside the two `ℓ²` balls.
pub fn estimate_nonorthogonality(
    mu_x: &FractalMeasure,
    mu_y: &FractalMeasure,
    phase: &Phase,
    ranges: (&ScaleRange, &ScaleRange),
) -> Result<ConstantReport> {
    estimate_nonorthogonality_with(mu_x, mu_y, phase, ranges, &NonorthogonalityOptions::default())
}

pub fn estimate_nonorthogonality_with(
    mu_x: &FractalMeasure,
    mu_y: &FractalMeasure,
    phase: &Phase,
    ranges: (&ScaleRange, &ScaleRange),
    opts: &NonorthogonalityOptions,
) -> Result<ConstantReport> {
    ranges.0.check_floor(mu_x)?;
    ranges.1.check_floor(mu_y)?;
    if mu_x.dim != phase.dim || mu_y.dim != phase.dim {
        return Err(Error::invalid("phase dimension does not match the measures"));
    }
    let cx = spread(mu_x.len(), opts.max_centers);
    let cy = spread(mu_y.len(), opts.max_centers);
    let pairs: Vec<(f64, f64)> = ranges
        .0
        .grid
        .iter()
        .flat_map(|&rx| ranges.1.grid.iter().map(move |&ry| (rx, ry)))
        .collect();
    let results: Vec<(ScaleEntry, usize)> = pairs
        .par_iter()
        .map(|&(rx, ry)| {
            let gx = PointGrid::new(&mu_x.atoms, rx);
            let gy = PointGrid::new(&mu_y.atoms, ry);
            let bys: Vec<Vec<usize>> = cy
                .iter()
                .map(|&j| thin(gy.in_ball(&mu_y.atoms[j], ry), &mu_y.atoms, opts.max_ball_atoms))
                .collect();
            let mut under = 0;
            let mut worst: Option<(f64, [usize; 4])> = None;
            for &i in &cx {
                let bx = thin(gx.in_ball(&mu_x.atoms[i], rx), &mu_x.atoms, opts.max_ball_atoms);
                for (jj, by) in bys.iter().enumerate() {
                    if bx.len() < 2 || by.len() < 2 {
                        under += 1;
                        continue;
                    }
                    let seed = opts.seed ^ ((i as u64) << 32) ^ (cy[jj] as u64);
                    let s = search_balls(&bx, by, mu_x, mu_y, phase, opts, seed);
                    let v = s.value.abs() / (rx * ry);
                    if worst.map_or(true, |(w, _)| v < w) {
                        worst = Some((v, s.quad));
                    }
                }
            }
            let (value, points) = match worst {
                Some((v, q)) => (
                    v,
                    vec![
                        mu_x.atoms[q[0]].clone(),
                        mu_x.atoms[q[1]].clone(),
                        mu_y.atoms[q[2]].clone(),
                        mu_y.atoms[q[3]].clone(),
                    ],
                ),
                None => (f64::INFINITY, vec![]),
            };
            (
                ScaleEntry {
                    scales: vec![rx, ry],
                    value,
                    witness: Witness {
                        points,
                        scales: vec![rx, ry],
                        kind: "quadruple".into(),
                        value,
                    },
                },
                under,
            )
        })
        .collect();
    let under = results.iter().map(|r| r.1).sum();
    Ok(finish(results.into_iter().map(|r| r.0).collect(), false, under))
}

/// Re-evaluates a nonorthogonality witness quadruple.
pub fn reevaluate_quadruple(phase: &Phase, w: &Witness) -> f64 {
    let p = &w.points;
    mixed_difference(phase, &p[0], &p[1], &p[2], &p[3]).abs() / (w.scales[0] * w.scales[1])
}

/// Rectangle `[x0, x1] × [y0, y1]` in `R^d × R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

impl Rectangle {
    fn sides(&self) -> (Vec<f64>, Vec<f64>) {
        let v = self.x1.iter().zip(&self.x0).map(|(a, b)| a - b).collect();
        let w = self.y1.iter().zip(&self.y0).map(|(a, b)| a - b).collect();
        (v, w)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn rect_integral(phase: &Phase, r: &Rectangle, nodes: &[f64], weights: &[f64]) -> f64 {
    let (v, w) = r.sides();
    let d = v.len();
    let mut total = 0.0;
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    for (xi, wx) in nodes.iter().zip(weights) {
        for k in 0..d {
            x[k] = r.x0[k] + xi * v[k];
        }
        for (eta, wy) in nodes.iter().zip(weights) {
            for k in 0..d {
                y[k] = r.y0[k] + eta * w[k];
            }
            let h = (phase.mixed_hessian)(&x, &y);
            let mut c = 0.0;
            for i in 0..d {
                for j in 0..d {
                    c += v[i] * h[(i, j)] * w[j];
                }
            }
            total += wx * wy * c;
        }
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MvtCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub error: f64,
}

/// Tensor Gauss quadrature of the bitangent contraction against the
/// four-corner difference of Φ.
pub fn verify_geometric_mvt(phase: &Phase, rect: &Rectangle, quadrature_n: usize) -> Result<MvtCheck> {
    let (v, w) = rect.sides();
    if norm(&v) == 0.0 || norm(&w) == 0.0 {
        return Err(Error::invalid("degenerate rectangle"));
    }
    if quadrature_n == 0 {
        return Err(Error::invalid("quadrature order must be positive"));
    }
    let (nodes, weights) = gauss_legendre(quadrature_n);
    let lhs = rect_integral(phase, rect, &nodes, &weights);
    let p = &phase.phi;
    let rhs = p(&rect.x0, &rect.y0) - p(&rect.x0, &rect.y1) - p(&rect.x1, &rect.y0) + p(&rect.x1, &rect.y1);
    Ok(MvtCheck {
        lhs,
        rhs,
        error: (lhs - rhs).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MvtDifference {
    pub lhs: f64,
    pub bound: f64,
    pub slack: f64,
    pub eps_x: f64,
    pub eps_y: f64,
    pub c_x: f64,
    pub c_y: f64,
}

/// Difference of the rectangle integrals over two rectangles against
/// `7‖∂²Φ‖_{C¹}(ε_x c_y + ε_y c_x)`.
pub fn verify_mvt_difference_bound(phase: &Phase, rects: (&Rectangle, &Rectangle)) -> Result<MvtDifference> {
    let (r0, r1) = rects;
    let dist = |a: &[f64], b: &[f64]| norm(&a.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>());
    let eps_x = dist(&r0.x0, &r1.x0).max(dist(&r0.x1, &r1.x1));
    let eps_y = dist(&r0.y0, &r1.y0).max(dist(&r0.y1, &r1.y1));
    let c_x = dist(&r0.x1, &r0.x0).max(dist(&r1.x1, &r1.x0));
    let c_y = dist(&r0.y1, &r0.y0).max(dist(&r1.y1, &r1.y0));
    for (name, v) in [("eps_x", eps_x), ("eps_y", eps_y), ("c_x", c_x), ("c_y", c_y)] {
        if v > 1.0 {
            return Err(Error::invalid(format!("hypothesis violated: {name} = {v} exceeds 1")));
        }
    }
    let (nodes, weights) = gauss_legendre(32);
    let a = rect_integral(phase, r0, &nodes, &weights);
    let b = rect_integral(phase, r1, &nodes, &weights);
    let lhs = (a - b).abs();
    let bound = 7.0 * phase.c1_bound * (eps_x * c_y + eps_y * c_x);
    Ok(MvtDifference {
        lhs,
        bound,
        slack: bound - lhs,
        eps_x,
        eps_y,
        c_x,
        c_y,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cantor::CantorSpec;
    use crate::error::Budget;
    use crate::measures::{make_cantor_measure, make_carpet_measure, make_segment_pair, standard_phase, AxisBox};

    fn cantor(k: u32) -> FractalMeasure {
        make_cantor_measure(&CantorSpec::line(3, &[0, 2], &[0, 2], k), &Budget::default()).unwrap()
    }

    fn delta() -> f64 {
        2f64.ln() / 3f64.ln()
    }

    /// Exhaustive maximum of μ(I)/r^δ over closed triadic intervals, by direct counting.
    fn triadic_oracle(mu: &FractalMeasure, jmax: i32) -> f64 {
        let mut worst = 0.0f64;
        for j in 0..=jmax {
            let r = 3f64.powi(-j);
            for i in 0..3i64.pow(j as u32) {
                let (lo, hi) = (i as f64 * r, (i + 1) as f64 * r);
                let m: f64 = mu
                    .atoms
                    .iter()
                    .zip(&mu.weights)
                    .filter(|(a, _)| a[0] >= lo - 1e-15 && a[0] <= hi + 1e-15)
                    .map(|(_, w)| *w)
                    .sum();
                worst = worst.max(m / r.powf(delta()));
            }
        }
        worst
    }

    #[test]
    fn cantor_regularity_is_bounded() {
        let mu = cantor(6);
        let range = ScaleRange::new(3f64.powi(-5), 1.0).unwrap();
        let rep = estimate_regularity(&mu, &range, delta()).unwrap();
        assert!(rep.value <= 4.0, "{}", rep.value);
        let oracle = triadic_oracle(&mu, 5);
        assert!(oracle <= 4.0 && oracle >= 1.0, "{oracle}");
        let w = &rep.witnesses[0];
        assert!((reevaluate_box_witness(&mu, w, delta()) - rep.value).abs() < 1e-12);
    }

    #[test]
    fn grid_and_atom_regularity() {
        let n = 64;
        let atoms: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 + 0.5) / n as f64]).collect();
        let mu = FractalMeasure::new(1, atoms, vec![1.0 / n as f64; n], 1.0 / n as f64, AxisBox::unit(1)).unwrap();
        let rep = estimate_regularity(&mu, &ScaleRange::new(1.0 / 32.0, 1.0).unwrap(), 1.0).unwrap();
        assert!(rep.value <= 2.0, "{}", rep.value);
        let one = FractalMeasure::new(1, vec![vec![0.3]], vec![1.0], 1e-3, AxisBox::unit(1)).unwrap();
        let rep = estimate_regularity(&one, &ScaleRange::new(1e-2, 1.0).unwrap(), 0.0).unwrap();
        assert_eq!(rep.value, 1.0);
        assert_eq!(estimate_doubling(&one, &ScaleRange::new(1e-2, 1.0).unwrap()).unwrap().value, 1.0);
    }

    #[test]
    fn doubling_examples() {
        let mu = cantor(6);
        let rep = estimate_doubling(&mu, &ScaleRange::new(3f64.powi(-5), 0.5).unwrap()).unwrap();
        assert!(rep.value <= 4.0, "{}", rep.value);
        let n = 1000;
        let atoms: Vec<Vec<f64>> = (0..n).map(|i| vec![(i as f64 + 0.5) / n as f64]).collect();
        let uni = FractalMeasure::new(1, atoms, vec![1.0 / n as f64; n], 1.0 / n as f64, AxisBox::unit(1)).unwrap();
        let rep = estimate_doubling(&uni, &ScaleRange::new(1.0 / 64.0, 0.5).unwrap()).unwrap();
        assert!(rep.value <= 3.0 + 1e-9, "{}", rep.value);
        // the left end of the interval: μ([−r, r]) / μ([−r/2, r/2]) → 2
        assert!(rep.value >= 1.9);
    }

    #[test]
    fn restricting_scales_cannot_increase_constants() {
        let mu = cantor(6);
        let wide = ScaleRange::new(3f64.powi(-5), 1.0).unwrap();
        let narrow = ScaleRange::new(0.01, 0.3).unwrap();
        assert!(narrow.grid.iter().all(|r| wide.grid.contains(r)));
        let a = estimate_regularity(&mu, &wide, delta()).unwrap().value;
        let b = estimate_regularity(&mu, &narrow, delta()).unwrap().value;
        assert!(b <= a);
        let a = estimate_doubling(&mu, &wide).unwrap().value;
        let b = estimate_doubling(&mu, &narrow).unwrap().value;
        assert!(b <= a);
    }

    #[test]
    fn segment_pair_is_orthogonal() {
        let pair = make_segment_pair();
        let range = ScaleRange::new(0.01, 0.5).unwrap();
        let rep = estimate_nonorthogonality(&pair.x, &pair.y, &standard_phase(), (&range, &range)).unwrap();
        assert!(rep.per_scale.iter().all(|e| e.value < 1e-6), "{}", rep.value);
    }

    #[test]
    fn cantor_pair_is_nonorthogonal() {
        let mu = cantor(6);
        let range = ScaleRange::new(3f64.powi(-4), 0.5).unwrap();
        let phase = crate::measures::standard_phase_dim(1);
        let rep = estimate_nonorthogonality(&mu, &mu, &phase, (&range, &range)).unwrap();
        assert!(rep.value > 0.0);
        assert!((reevaluate_quadruple(&phase, &rep.witnesses[0]) - rep.value).abs() < 1e-12);
    }

    #[test]
    fn carpet_at_one_third() {
        let mu = make_carpet_measure(4, &Budget::default()).unwrap();
        let r = ScaleRange::with_grid(vec![1.0 / 3.0]).unwrap();
        let rep = estimate_nonorthogonality(&mu, &mu, &standard_phase(), (&r, &r)).unwrap();
        assert!(rep.value > 0.0, "{}", rep.value);
    }

    #[test]
    fn swapping_roles_is_symmetric() {
        let mu = cantor(5);
        let nu = make_cantor_measure(&CantorSpec::line(4, &[0, 3], &[0, 3], 4), &Budget::default()).unwrap();
        let phase = crate::measures::Phase::sin_cos_plus_bilinear();
        let flip = crate::measures::Phase::from_phi(1, {
            let p = phase.phi.clone();
            std::sync::Arc::new(move |y: &[f64], x: &[f64]| p(x, y))
        }, 2.0, 3.0);
        let rx = ScaleRange::new(1.0 / 32.0, 0.5).unwrap();
        let ry = ScaleRange::new(1.0 / 16.0, 0.5).unwrap();
        let a = estimate_nonorthogonality(&mu, &nu, &phase, (&rx, &ry)).unwrap().value;
        let b = estimate_nonorthogonality(&nu, &mu, &flip, (&ry, &rx)).unwrap().value;
        assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn mvt_examples() {
        let phase = crate::measures::standard_phase_dim(1);
        let r = Rectangle {
            x0: vec![0.0],
            x1: vec![1.0],
            y0: vec![0.0],
            y1: vec![1.0],
        };
        let c = verify_geometric_mvt(&phase, &r, 4).unwrap();
        assert!((c.lhs + 1.0).abs() < 1e-14 && (c.rhs + 1.0).abs() < 1e-14);
        let p = crate::measures::Phase::sin_cos_plus_bilinear();
        let r = Rectangle {
            x0: vec![0.1],
            x1: vec![0.7],
            y0: vec![-0.3],
            y1: vec![0.4],
        };
        assert!(verify_geometric_mvt(&p, &r, 32).unwrap().error <= 1e-10);
        let d = verify_mvt_difference_bound(&p, (&r, &r)).unwrap();
        assert_eq!(d.lhs, 0.0);
        assert!(d.slack >= 0.0);
        let degenerate = Rectangle {
            x0: vec![0.1],
            x1: vec![0.1],
            y0: vec![0.0],
            y1: vec![1.0],
        };
        assert!(verify_geometric_mvt(&p, &degenerate, 8).is_err());
    }

    #[test]
    fn translated_bilinear_rectangles() {
        // for Φ = −x·y the rectangle integral is −v·w, independent of position
        let phase = standard_phase();
        let r0 = Rectangle {
            x0: vec![0.0, 0.0],
            x1: vec![0.3, 0.1],
            y0: vec![0.0, 0.0],
            y1: vec![0.2, 0.4],
        };
        let r1 = Rectangle {
            x0: vec![0.05, 0.0],
            x1: vec![0.3, 0.2],
            y0: vec![0.1, 0.0],
            y1: vec![0.2, 0.5],
        };
        let d = verify_mvt_difference_bound(&phase, (&r0, &r1)).unwrap();
        let exact = (-(0.3 * 0.2 + 0.1 * 0.4) - -(0.25 * 0.1 + 0.2 * 0.5f64)).abs();
        assert!((d.lhs - exact).abs() < 1e-14);
        assert!(d.slack >= 0.0);
    }
}
