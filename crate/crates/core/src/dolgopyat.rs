//! Induction-on-scales quantities: explicit constants, child quadruples with
//! reverse Cauchy-Schwarz certification, `C_θ` norms and the one-step
//! contraction harness together with its level recursion.
//!
//! Tiles are addressed by [`TileRef`] (level plus index inside the level) so
//! that every routine works directly on a [`TileTree`].

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretization::{Region, Tile, TileTree};
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::measures::{AxisBox, Phase};

/// Grid resolution per axis used when sampling a tile box.
pub const GRID_PER_AXIS: usize = 16;
/// Finite-difference step relative to the tile diameter.
pub const FD_RELATIVE_STEP: f64 = 1e-4;

/// A positive quantity kept as its natural logarithm together with its
/// double value whenever that is a normal finite number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogValue {
    pub ln: f64,
    pub value: Option<f64>,
}

impl LogValue {
    fn from_ln(ln: f64) -> Self {
        let v = ln.exp();
        LogValue {
            ln,
            value: (v.is_normal()).then_some(v),
        }
    }

    fn exact(value: f64, ln: f64) -> Self {
        LogValue {
            ln,
            value: value.is_normal().then_some(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DolgopyatConstants {
    #[serde(rename = "c_N")]
    pub c_n: f64,
    #[serde(rename = "C_D_X")]
    pub c_d_x: f64,
    #[serde(rename = "C_D_Y")]
    pub c_d_y: f64,
    pub d: usize,
    pub hessian_c1: f64,
    #[serde(rename = "L")]
    pub l: LogValue,
    pub theta: f64,
    /// ⌈log₂(20 L^{5/3})⌉
    pub doubling_steps: u32,
    pub rho_lower: LogValue,
    pub epsilon1: LogValue,
    pub epsilon0: LogValue,
    pub inv_epsilon0: LogValue,
}

/// `⌈log₂(20 L^{5/3})⌉` from `ln L`.
pub fn doubling_steps(ln_l: f64) -> u32 {
    let v = (20f64.ln() + 5.0 / 3.0 * ln_l) / std::f64::consts::LN_2;
    v.ceil() as u32
}

/// `ln` of the probability floor `(C_D(X) C_D(Y))^{-2⌈log₂(20 L^{5/3})⌉}`.
pub fn rho_lower_ln(ln_l: f64, c_d_x: f64, c_d_y: f64) -> f64 {
    -2.0 * doubling_steps(ln_l) as f64 * (c_d_x.ln() + c_d_y.ln())
}

pub fn compute_constants(
    c_n: f64,
    c_d_x: f64,
    c_d_y: f64,
    d: usize,
    hessian_c1: f64,
) -> Result<DolgopyatConstants> {
    if !(c_n > 0.0 && c_n <= 1.0) {
        return Err(Error::invalid(format!("c_N must lie in (0, 1], got {c_n}")));
    }
    if !(c_d_x >= 1.0 && c_d_y >= 1.0 && c_d_x.is_finite() && c_d_y.is_finite()) {
        return Err(Error::invalid("doubling constants must be finite and >= 1"));
    }
    if d == 0 {
        return Err(Error::invalid("dimension must be >= 1"));
    }
    if !(hessian_c1 >= 0.0 && hessian_c1.is_finite()) {
        return Err(Error::invalid("hessian C1 norm must be finite and nonnegative"));
    }
    let df = d as f64;
    let m = hessian_c1.max(1.0);
    let ln_l = 14.0 * 10f64.ln() + 3.0 * df.ln() - 3.0 * c_n.ln() + 3.0 * m.ln();
    let l_value = 1e14 * df.powi(3) / c_n.powi(3) * m.powi(3);
    let steps = doubling_steps(ln_l);
    let ln_rho = -2.0 * steps as f64 * (c_d_x.ln() + c_d_y.ln());
    let ln_eps1 = 2.0 * ln_rho + 2.0 * c_n.ln() - 9.0 * 10f64.ln() - 2.0 * df.ln() - 2.0 / 3.0 * ln_l;
    let ln_eps0 = ln_eps1 - 6f64.ln() - ln_l.ln();
    Ok(DolgopyatConstants {
        c_n,
        c_d_x,
        c_d_y,
        d,
        hessian_c1,
        l: LogValue::exact(l_value, ln_l),
        theta: 1.0 / (8.0 * m),
        doubling_steps: steps,
        rho_lower: LogValue::from_ln(ln_rho),
        epsilon1: LogValue::from_ln(ln_eps1),
        epsilon0: LogValue::from_ln(ln_eps0),
        inv_epsilon0: LogValue::from_ln(-ln_eps0),
    })
}

impl DolgopyatConstants {
    /// `L ≥ max(180³, 10¹⁰ c_N^{-3} ‖∂²Φ‖³_{C¹}) d^{3/2}`, in log-space.
    pub fn satisfies_first_estimate(&self) -> bool {
        let df = self.d as f64;
        let a = 3.0 * 180f64.ln();
        let b = 10.0 * 10f64.ln() - 3.0 * self.c_n.ln() + 3.0 * self.hessian_c1.max(1e-300).ln();
        self.l.ln >= a.max(b) + 1.5 * df.ln()
    }

    /// Both lower bounds on `L` required by the inductive step with this `θ`.
    pub fn satisfies_step_estimate(&self) -> bool {
        let df = self.d as f64;
        let a = 12.0 * 10f64.ln() + 3.0 * df.ln() - 3.0 * self.c_n.ln() - 1.5 * self.theta.ln();
        let b = 10.0 * 10f64.ln() + 3.0 * self.hessian_c1.max(1e-300).ln() + 1.5 * df.ln()
            - 3.0 * self.c_n.ln();
        self.l.ln >= a.max(b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileRef {
    pub level: u32,
    pub index: usize,
}

impl TileRef {
    pub fn new(level: u32, index: usize) -> Self {
        TileRef { level, index }
    }

    fn get<'a>(&self, tree: &'a TileTree) -> Result<&'a Tile> {
        tree.levels
            .get(self.level as usize)
            .and_then(|l| l.get(self.index))
            .ok_or_else(|| Error::invalid(format!("no tile {}:{}", self.level, self.index)))
    }
}

/// `⌊-log_L(floor)⌋`: the number of levels the source measure resolves.
pub fn resolved_levels(tree: &TileTree) -> u32 {
    scale_index(tree.l, tree.source.scale_floor)
}

/// `⌊-log_L h⌋`.
pub fn scale_index(l: u64, h: f64) -> u32 {
    let v = -h.ln() / (l as f64).ln();
    (v + 1e-9).floor().max(0.0) as u32
}

fn representative(t: &Tile) -> Vec<f64> {
    t.anchor.clone().unwrap_or_else(|| t.hull().center())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn pair_hull(a: &AxisBox, b: &AxisBox) -> AxisBox {
    let d = a.dim();
    let lo: Vec<f64> = (0..d).map(|i| a.lo(i).min(b.lo(i))).collect();
    let hi: Vec<f64> = (0..d).map(|i| a.hi(i).max(b.hi(i))).collect();
    AxisBox::from_bounds(lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct CandidatePair {
    a: usize,
    b: usize,
    /// `L^{n+2/3}|x_a - x_{a'}|`
    spacing: f64,
}

/// Child pairs of `parent` meeting the even spacing bound whose joint
/// bounding box lies inside the parent tile.
fn candidate_pairs(tree: &TileTree, parent: TileRef) -> Result<(Vec<usize>, Vec<Vec<f64>>, Vec<CandidatePair>)> {
    let tile = parent.get(tree)?;
    if (parent.level as usize) + 1 >= tree.levels.len() {
        return Err(Error::invalid(format!(
            "tile {}:{} sits on the deepest level and has no children",
            parent.level, parent.index
        )));
    }
    if tile.children.len() < 2 {
        return Err(Error::invalid(format!(
            "tile {}:{} has {} child(ren); two are required",
            parent.level,
            parent.index,
            tile.children.len()
        )));
    }
    let next = &tree.levels[parent.level as usize + 1];
    let kids: Vec<usize> = tile.children.clone();
    let pts: Vec<Vec<f64>> = kids.iter().map(|&c| representative(&next[c])).collect();
    let hulls: Vec<AxisBox> = kids.iter().map(|&c| next[c].hull()).collect();
    let region = tile.region();
    let scale = (tree.l as f64).powf(parent.level as f64 + 2.0 / 3.0);
    let tol = 1e-9 * (tree.l as f64).powi(-(parent.level as i32) - 1);
    let mut pairs = Vec::new();
    for i in 0..kids.len() {
        for j in i + 1..kids.len() {
            let spacing = scale * euclid(&pts[i], &pts[j]);
            if spacing > 0.5 {
                continue;
            }
            let hull = Region::from_box(pair_hull(&hulls[i], &hulls[j]));
            if hull.is_subset_of(&region, tol) {
                pairs.push(CandidatePair { a: i, b: j, spacing });
            }
        }
    }
    Ok((kids, pts, pairs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChildQuadruple {
    /// `I_a, I_{a'}, J_b, J_{b'}`
    pub tiles: [TileRef; 4],
    /// `x_a, x_{a'}, y_b, y_{b'}`
    pub points: [Vec<f64>; 4],
    /// `[[ω_ab, ω_ab'], [ω_a'b, ω_a'b']]`
    pub omega: [[f64; 2]; 2],
    pub rcs_value: f64,
    pub spacing_x: f64,
    pub spacing_y: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

impl ChildQuadruple {
    pub fn lower_holds(&self) -> bool {
        self.rcs_value >= self.lower_bound
    }

    pub fn upper_holds(&self) -> bool {
        self.rcs_value <= self.upper_bound
    }

    pub fn spacing_holds(&self) -> bool {
        self.spacing_x <= 0.5 && self.spacing_y <= 0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum FailedBound {
    /// no child pair satisfies spacing and segment containment
    Spacing,
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadrupleSearch {
    /// best quadruple: largest value under the upper bound if one exists,
    /// otherwise the smallest value found
    pub best: Option<ChildQuadruple>,
    pub certified: bool,
    pub failure: Option<FailedBound>,
    pub x_pairs: usize,
    pub y_pairs: usize,
    pub examined: usize,
    pub meeting_lower: usize,
}

/// Exhaustive search over admissible child pairs of `I` and `J`, with tile
/// anchors as representative points.
pub fn select_child_quadruple(
    tree_x: &TileTree,
    tree_y: &TileTree,
    i: TileRef,
    j: TileRef,
    phase: &Phase,
    c_n: f64,
) -> Result<QuadrupleSearch> {
    if tree_x.l != tree_y.l {
        return Err(Error::invalid("trees must share the same L"));
    }
    let (kx, px, pairs_x) = candidate_pairs(tree_x, i)?;
    let (ky, py, pairs_y) = candidate_pairs(tree_y, j)?;
    let (n, m) = (i.level, j.level);
    let (nx, ny) = (resolved_levels(tree_x), resolved_levels(tree_y));
    if n >= nx.max(1) || m >= ny.max(1) {
        return Err(Error::invalid(format!(
            "levels ({n}, {m}) exceed the resolved depths ({nx}, {ny})"
        )));
    }
    let table: Vec<Vec<f64>> = px
        .iter()
        .map(|x| py.iter().map(|y| phase.eval(x, y)).collect())
        .collect();
    let scale = (tree_x.l as f64).powf(n as f64 + m as f64 + 4.0 / 3.0);
    let lower = c_n / 1000.0;
    let upper = phase.c0_bound / 20.0;

    let mut best_under: Option<(f64, usize, usize)> = None;
    let mut best_over: Option<(f64, usize, usize)> = None;
    let mut meeting_lower = 0usize;
    for (p, cx) in pairs_x.iter().enumerate() {
        for (q, cy) in pairs_y.iter().enumerate() {
            let (a, a2, b, b2) = (cx.a, cx.b, cy.a, cy.b);
            let tau = table[a][b] - table[a2][b] - table[a][b2] + table[a2][b2];
            let v = scale * tau.abs();
            if v >= lower && v <= upper {
                meeting_lower += 1;
            }
            if v <= upper {
                if best_under.map_or(true, |(bv, _, _)| v > bv) {
                    best_under = Some((v, p, q));
                }
            } else if best_over.map_or(true, |(bv, _, _)| v < bv) {
                best_over = Some((v, p, q));
            }
        }
    }
    let examined = pairs_x.len() * pairs_y.len();
    let chosen = best_under.or(best_over);
    let best = chosen.map(|(v, p, q)| {
        let (cx, cy) = (&pairs_x[p], &pairs_y[q]);
        let (a, a2, b, b2) = (cx.a, cx.b, cy.a, cy.b);
        ChildQuadruple {
            tiles: [
                TileRef::new(n + 1, kx[a]),
                TileRef::new(n + 1, kx[a2]),
                TileRef::new(m + 1, ky[b]),
                TileRef::new(m + 1, ky[b2]),
            ],
            points: [px[a].clone(), px[a2].clone(), py[b].clone(), py[b2].clone()],
            omega: [[table[a][b], table[a][b2]], [table[a2][b], table[a2][b2]]],
            rcs_value: v,
            spacing_x: cx.spacing,
            spacing_y: cy.spacing,
            lower_bound: lower,
            upper_bound: upper,
        }
    });
    let failure = match (&best, best_under) {
        (None, _) => Some(FailedBound::Spacing),
        (Some(_), None) => Some(FailedBound::Upper),
        (Some(q), Some(_)) if !q.lower_holds() => Some(FailedBound::Lower),
        _ => None,
    };
    Ok(QuadrupleSearch {
        certified: failure.is_none(),
        best,
        failure,
        x_pairs: pairs_x.len(),
        y_pairs: pairs_y.len(),
        examined,
        meeting_lower,
    })
}

/// All `(I, J)` with `n < K_X`, `m < K_Y`, `n + m ≤ max_sum` and both tiles
/// carrying at least two children.
pub fn admissible_pairs(tree_x: &TileTree, tree_y: &TileTree, max_sum: u32) -> Vec<(TileRef, TileRef)> {
    let kx = resolved_levels(tree_x).min(tree_x.deepest_level());
    let ky = resolved_levels(tree_y).min(tree_y.deepest_level());
    let branching = |tree: &TileTree, n: u32| -> Vec<TileRef> {
        tree.level(n)
            .iter()
            .enumerate()
            .filter(|(_, t)| t.children.len() >= 2)
            .map(|(k, _)| TileRef::new(n, k))
            .collect()
    };
    let mut out = Vec::new();
    for n in 0..kx {
        let xs = branching(tree_x, n);
        for m in 0..ky {
            if n + m > max_sum {
                continue;
            }
            let ys = branching(tree_y, m);
            for a in &xs {
                for b in &ys {
                    out.push((*a, *b));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RhoReport {
    pub rho_empirical: f64,
    pub ln_rho_empirical: f64,
    pub ln_rho_lower: f64,
    pub exceeds_lower: bool,
}

/// `Pr(a)Pr(a')Pr(b)Pr(b')` with `Pr(a) = μ_X(I_a)/μ_X(I)`, compared with the
/// doubling floor evaluated at the trees' `L`.
pub fn probability_of_quadruple(
    tree_x: &TileTree,
    tree_y: &TileTree,
    i: TileRef,
    j: TileRef,
    quadruple: &ChildQuadruple,
    c_d: (f64, f64),
) -> Result<RhoReport> {
    let ti = i.get(tree_x)?;
    let tj = j.get(tree_y)?;
    if ti.measure <= 0.0 || tj.measure <= 0.0 {
        return Err(Error::invalid("parent tile carries zero measure"));
    }
    let q = &quadruple.tiles;
    let pa = q[0].get(tree_x)?.measure / ti.measure;
    let pa2 = q[1].get(tree_x)?.measure / ti.measure;
    let pb = q[2].get(tree_y)?.measure / tj.measure;
    let pb2 = q[3].get(tree_y)?.measure / tj.measure;
    let rho = pa * pa2 * pb * pb2;
    let ln_rho = pa.ln() + pa2.ln() + pb.ln() + pb2.ln();
    let ln_lower = rho_lower_ln((tree_x.l as f64).ln(), c_d.0, c_d.1);
    Ok(RhoReport {
        rho_empirical: rho,
        ln_rho_empirical: ln_rho,
        ln_rho_lower: ln_lower,
        exceeds_lower: ln_rho >= ln_lower,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CThetaNorm {
    pub value: f64,
    pub sup: f64,
    pub grad_sup: f64,
    /// sample point where `|f|` is largest
    pub argmax: Vec<f64>,
}

/// `max(sup|f|, θ·diam·sup|∇f|)` over `samples`, with central differences of
/// step `1e-4·diam`.
pub fn c_theta_norm<F>(f: F, samples: &[Vec<f64>], diam: f64, theta: f64) -> Result<CThetaNorm>
where
    F: Fn(&[f64]) -> C64,
{
    if samples.is_empty() {
        return Err(Error::invalid("C_theta norm needs at least one sample"));
    }
    if !(diam > 0.0) {
        return Err(Error::invalid("tile diameter must be positive"));
    }
    let step = FD_RELATIVE_STEP * diam;
    let mut sup = -1.0f64;
    let mut argmax = samples[0].clone();
    let mut grad_sup = 0.0f64;
    let mut probe = samples[0].clone();
    for x in samples {
        let v = f(x).norm();
        if v > sup {
            sup = v;
            argmax.clone_from(x);
        }
        probe.clone_from(x);
        let mut g2 = 0.0;
        for k in 0..x.len() {
            probe[k] = x[k] + step;
            let fp = f(&probe);
            probe[k] = x[k] - step;
            let fm = f(&probe);
            probe[k] = x[k];
            g2 += ((fp - fm) / (2.0 * step)).norm_sqr();
        }
        grad_sup = grad_sup.max(g2.sqrt());
    }
    Ok(CThetaNorm {
        value: sup.max(theta * diam * grad_sup),
        sup,
        grad_sup,
        argmax,
    })
}

fn push_grid(b: &AxisBox, out: &mut Vec<Vec<f64>>) {
    let d = b.dim();
    let total = GRID_PER_AXIS.pow(d as u32);
    for k in 0..total {
        let mut rem = k;
        let p: Vec<f64> = (0..d)
            .map(|i| {
                let c = rem % GRID_PER_AXIS;
                rem /= GRID_PER_AXIS;
                b.lo(i) + (c as f64 + 0.5) / GRID_PER_AXIS as f64 * b.side[i]
            })
            .collect();
        out.push(p);
    }
}

/// Sample set of a tile: its atoms and a `16^d` grid in each of its boxes.
/// With `with_children` the grids of the children's boxes are added, which
/// makes every child's plain sample set a subset.
pub fn tile_samples(tree: &TileTree, t: TileRef, with_children: bool) -> Result<Vec<Vec<f64>>> {
    let tile = t.get(tree)?;
    let mut out: Vec<Vec<f64>> = tile.atoms.iter().map(|&k| tree.source.atoms[k].clone()).collect();
    for b in &tile.boxes {
        push_grid(b, &mut out);
    }
    if let (true, Some(next)) = (with_children, tree.levels.get(t.level as usize + 1)) {
        for &c in &tile.children {
            for b in &next[c].boxes {
                push_grid(b, &mut out);
            }
        }
    }
    Ok(out)
}

/// Evaluator for `F_J(x)`.
struct Localized<'a> {
    phase: &'a Phase,
    h: f64,
    center: Vec<f64>,
    points: Vec<&'a [f64]>,
    /// `w_y f(y)` per atom
    coeffs: Vec<C64>,
    inv_mass: f64,
}

impl<'a> Localized<'a> {
    fn new(tree: &'a TileTree, tile: &'a Tile, phase: &'a Phase, h: f64, f: &[C64]) -> Self {
        let src: &'a crate::measures::FractalMeasure = &tree.source;
        Localized {
            phase,
            h,
            center: tile.base_cube.center(),
            points: tile.atoms.iter().map(|&k| src.atoms[k].as_slice()).collect(),
            coeffs: tile.atoms.iter().map(|&k| f[k] * src.weights[k]).collect(),
            inv_mass: if tile.measure > 0.0 { 1.0 / tile.measure } else { 0.0 },
        }
    }

    fn eval(&self, x: &[f64]) -> C64 {
        let base = self.phase.eval(x, &self.center);
        let mut acc = C64::new(0.0, 0.0);
        for (y, c) in self.points.iter().zip(&self.coeffs) {
            let t = (self.phase.eval(x, y) - base) / self.h;
            let p = (self.phase.symbol)(x, y);
            acc += C64::from_polar(p, t) * c;
        }
        acc * self.inv_mass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub i: TileRef,
    pub j: TileRef,
    /// `E_a ‖F_J‖²_{C_θ(I_a)}`
    pub lhs: f64,
    /// `(E_b ‖F_{J_b}‖_{C_θ(I)})²`
    pub middle: f64,
    /// `R = E_b ‖F_{J_b}‖²_{C_θ(I)}`
    pub r: f64,
    pub sigma2: f64,
    /// `σ²/R`, absent when `R = 0`
    pub gap: Option<f64>,
    pub degenerate: bool,
    /// `σ² ≥ ε₁ R` checked in log-space
    pub meets_epsilon1: bool,
    /// `‖F_{J_b}‖_{C_θ(I)}` per child of `J`
    pub child_norms: Vec<f64>,
    pub child_weights: Vec<f64>,
    /// `x_a`, the sampled maximizer of `|F_J|` on each child of `I`
    pub argmax: Vec<Vec<f64>>,
}

impl ContractionReport {
    /// `lhs ≤ middle ≤ R` up to a relative tolerance.
    pub fn chain_holds(&self, rel: f64) -> bool {
        let tol = rel * self.r.max(f64::MIN_POSITIVE);
        self.lhs <= self.middle + tol && self.middle <= self.r + tol
    }
}

fn check_scales(tree_x: &TileTree, tree_y: &TileTree, h: f64) -> Result<u32> {
    if tree_x.l != tree_y.l {
        return Err(Error::invalid("trees must share the same L"));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("h must be positive"));
    }
    let floor = tree_x.source.scale_floor.max(tree_y.source.scale_floor);
    if h < floor * (1.0 - 1e-12) {
        return Err(Error::invalid(format!(
            "h = {h:e} is below the resolvable scale {floor:e}"
        )));
    }
    Ok(scale_index(tree_x.l, h))
}

pub fn contraction_step(
    tree_x: &TileTree,
    tree_y: &TileTree,
    phase: &Phase,
    h: f64,
    i: TileRef,
    j: TileRef,
    f: &[C64],
    constants: &DolgopyatConstants,
) -> Result<ContractionReport> {
    let k = check_scales(tree_x, tree_y, h)?;
    if i.level + j.level + 1 != k {
        return Err(Error::invalid(format!(
            "levels {} + {} + 1 must equal K = {k}",
            i.level, j.level
        )));
    }
    if f.len() != tree_y.source.len() {
        return Err(Error::invalid("f must hold one value per atom of Y"));
    }
    contraction_unchecked(tree_x, tree_y, phase, h, i, j, f, constants.theta, constants.epsilon1.ln)
}

#[allow(clippy::too_many_arguments)]
fn contraction_unchecked(
    tree_x: &TileTree,
    tree_y: &TileTree,
    phase: &Phase,
    h: f64,
    i: TileRef,
    j: TileRef,
    f: &[C64],
    theta: f64,
    ln_eps1: f64,
) -> Result<ContractionReport> {
    let ti = i.get(tree_x)?;
    let tj = j.get(tree_y)?;
    if ti.atoms.is_empty() || tj.atoms.is_empty() || ti.measure <= 0.0 || tj.measure <= 0.0 {
        return Err(Error::invalid(format!(
            "tiles {}:{} and {}:{} must both carry mass",
            i.level, i.index, j.level, j.index
        )));
    }
    let deep_x = tree_x.levels.get(i.level as usize + 1);
    let deep_y = tree_y.levels.get(j.level as usize + 1);
    let (Some(next_x), Some(next_y)) = (deep_x, deep_y) else {
        return Err(Error::invalid("both tiles need a level of children"));
    };

    let fj = Localized::new(tree_y, tj, phase, h, f);
    let lhs_parts: Vec<(f64, f64, Vec<f64>)> = ti
        .children
        .par_iter()
        .map(|&a| {
            let child = &next_x[a];
            let s = tile_samples(tree_x, TileRef::new(i.level + 1, a), false)?;
            let n = c_theta_norm(|x| fj.eval(x), &s, child.diameter(), theta)?;
            Ok((child.measure / ti.measure, n.value, n.argmax))
        })
        .collect::<Result<_>>()?;
    let lhs: f64 = lhs_parts.iter().map(|(w, v, _)| w * v * v).sum();

    let samples_i = tile_samples(tree_x, i, false)?;
    let diam_i = ti.diameter();
    let child_parts: Vec<(f64, f64)> = tj
        .children
        .par_iter()
        .map(|&b| {
            let child = &next_y[b];
            if child.measure <= 0.0 {
                return Ok((0.0, 0.0));
            }
            let fb = Localized::new(tree_y, child, phase, h, f);
            let n = c_theta_norm(|x| fb.eval(x), &samples_i, diam_i, theta)?;
            Ok((child.measure / tj.measure, n.value))
        })
        .collect::<Result<_>>()?;
    let r: f64 = child_parts.iter().map(|(w, v)| w * v * v).sum();
    let mean: f64 = child_parts.iter().map(|(w, v)| w * v).sum();
    let sigma2 = r - lhs;
    let degenerate = r == 0.0;
    let gap = (!degenerate).then(|| sigma2 / r);
    let meets = match gap {
        Some(g) if g > 0.0 => g.ln() >= ln_eps1,
        _ => false,
    };
    Ok(ContractionReport {
        i,
        j,
        lhs,
        middle: mean * mean,
        r,
        sigma2,
        gap,
        degenerate,
        meets_epsilon1: meets,
        child_norms: child_parts.iter().map(|p| p.1).collect(),
        child_weights: child_parts.iter().map(|p| p.0).collect(),
        argmax: lhs_parts.into_iter().map(|p| p.2).collect(),
    })
}

/// Direct check of the twisting contract
/// `‖e^{iΨ_b} F_{J_b}‖_{C_θ(I_a)} ≤ ‖F_{J_b}‖_{C_θ(I)}` for every child pair.
/// Returns `(lhs, rhs)` per `(a, b)` in row-major order.
pub fn twisting_norms(
    tree_x: &TileTree,
    tree_y: &TileTree,
    phase: &Phase,
    h: f64,
    i: TileRef,
    j: TileRef,
    f: &[C64],
    theta: f64,
) -> Result<Vec<(f64, f64)>> {
    let ti = i.get(tree_x)?;
    let tj = j.get(tree_y)?;
    let next_x = tree_x
        .levels
        .get(i.level as usize + 1)
        .ok_or_else(|| Error::invalid("I has no children level"))?;
    let next_y = tree_y
        .levels
        .get(j.level as usize + 1)
        .ok_or_else(|| Error::invalid("J has no children level"))?;
    let samples_i = tile_samples(tree_x, i, true)?;
    let y_j = tj.base_cube.center();
    let mut out = Vec::new();
    for &b in &tj.children {
        let child = &next_y[b];
        if child.measure <= 0.0 {
            continue;
        }
        let fb = Localized::new(tree_y, child, phase, h, f);
        let rhs = c_theta_norm(|x| fb.eval(x), &samples_i, ti.diameter(), theta)?.value;
        let y_b = child.base_cube.center();
        let twisted = |x: &[f64]| {
            let psi = (phase.eval(x, &y_b) - phase.eval(x, &y_j)) / h;
            C64::from_polar(1.0, psi) * fb.eval(x)
        };
        for &a in &ti.children {
            let s = tile_samples(tree_x, TileRef::new(i.level + 1, a), false)?;
            let lhs = c_theta_norm(twisted, &s, next_x[a].diameter(), theta)?.value;
            out.push((lhs, rhs));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub level: u32,
    pub pairs: usize,
    pub min_gap: f64,
    pub median_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationReport {
    pub k: u32,
    pub bound: f64,
    /// base case with the analytic bound alone, without any gain
    pub base_bound: f64,
    pub per_level: Vec<GapRow>,
    pub steps: Vec<ContractionReport>,
    /// deepest tiles where the sampled `‖E_J‖²` exceeded the analytic base
    /// bound; the sampled value is used there instead
    pub base_violations: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs the `E_J` recursion from the deepest level `K` up to the roots, with
/// the measured gap of each `J` in place of `ε₁`.
pub fn iterate_contraction(
    tree_x: &TileTree,
    tree_y: &TileTree,
    phase: &Phase,
    h: f64,
    f: &[C64],
    constants: &DolgopyatConstants,
) -> Result<IterationReport> {
    let k = check_scales(tree_x, tree_y, h)?;
    if f.len() != tree_y.source.len() {
        return Err(Error::invalid("f must hold one value per atom of Y"));
    }
    if tree_x.deepest_level() < k || tree_y.deepest_level() < k {
        return Err(Error::invalid(format!(
            "trees must reach level K = {k} (have {} and {})",
            tree_x.deepest_level(),
            tree_y.deepest_level()
        )));
    }
    let mu_x_total: f64 = tree_x.level(0).iter().map(|t| t.measure).sum();
    let mu_y_total: f64 = tree_y.level(0).iter().map(|t| t.measure).sum();
    let p_c1 = phase.symbol_c1;
    let src = &tree_y.source;

    // bounds on ‖E_J‖² for the current level of Y
    let mut bounds: Vec<f64> = tree_y
        .level(k)
        .iter()
        .map(|t| {
            if t.measure <= 0.0 {
                return 0.0;
            }
            let l2: f64 = t.atoms.iter().map(|&a| src.weights[a] * f[a].norm_sqr()).sum();
            p_c1 * p_c1 * mu_x_total / t.measure * l2
        })
        .collect();
    let analytic_root = if k == 0 {
        bounds.clone()
    } else {
        Vec::new()
    };
    let mut steps = Vec::new();
    let mut per_level = Vec::new();
    let mut violations = 0usize;
    for m in (0..k).rev() {
        let n = k - m - 1;
        let xs: Vec<TileRef> = tree_x
            .level(n)
            .iter()
            .enumerate()
            .filter(|(_, t)| t.measure > 0.0)
            .map(|(q, _)| TileRef::new(n, q))
            .collect();
        let ys = tree_y.level(m);
        let mut next_bounds = vec![0.0; ys.len()];
        let mut level_gaps = Vec::new();
        for (jq, tj) in ys.iter().enumerate() {
            if tj.measure <= 0.0 {
                continue;
            }
            let jr = TileRef::new(m, jq);
            let reports: Vec<ContractionReport> = xs
                .iter()
                .map(|ir| {
                    contraction_unchecked(
                        tree_x,
                        tree_y,
                        phase,
                        h,
                        *ir,
                        jr,
                        f,
                        constants.theta,
                        constants.epsilon1.ln,
                    )
                })
                .collect::<Result<_>>()?;
            // the deepest children also get their sampled norms as a floor
            if m + 1 == k {
                for (bi, &b) in tj.children.iter().enumerate() {
                    let sampled: f64 = reports
                        .iter()
                        .zip(&xs)
                        .map(|(rep, ir)| {
                            let v = rep.child_norms[bi];
                            ir.get(tree_x).map(|t| t.measure).unwrap_or(0.0) * v * v
                        })
                        .sum();
                    if sampled > bounds[b] * (1.0 + 1e-12) {
                        violations += 1;
                        bounds[b] = sampled;
                    }
                }
            }
            let mut factor = f64::NEG_INFINITY;
            for rep in &reports {
                let ratio = if rep.r > 0.0 {
                    rep.lhs / rep.r
                } else if rep.lhs > 0.0 {
                    f64::INFINITY
                } else {
                    continue;
                };
                factor = factor.max(ratio);
                if let Some(g) = rep.gap {
                    level_gaps.push(g);
                }
            }
            if factor == f64::NEG_INFINITY {
                factor = 0.0;
            }
            let mean: f64 = tj
                .children
                .iter()
                .map(|&b| tree_y.tile(m + 1, b).measure / tj.measure * bounds[b])
                .sum();
            next_bounds[jq] = factor * mean;
            steps.extend(reports);
        }
        let pairs = level_gaps.len();
        let min_gap = level_gaps.iter().cloned().fold(f64::INFINITY, f64::min);
        per_level.push(GapRow {
            level: m,
            pairs,
            min_gap: if pairs == 0 { f64::NAN } else { min_gap },
            median_gap: median(&mut level_gaps),
        });
        bounds = next_bounds;
    }
    let roots = tree_y.level(0);
    let total: f64 = roots
        .iter()
        .zip(&bounds)
        .map(|(t, b)| t.measure * b)
        .sum::<f64>()
        * mu_y_total;
    let base_total: f64 = if k == 0 {
        roots
            .iter()
            .zip(&analytic_root)
            .map(|(t, b)| t.measure * b)
            .sum::<f64>()
            * mu_y_total
    } else {
        let l2: f64 = src
            .weights
            .iter()
            .zip(f)
            .map(|(w, v)| w * v.norm_sqr())
            .sum();
        p_c1 * p_c1 * mu_x_total * mu_y_total * l2
    };
    per_level.reverse();
    Ok(IterationReport {
        k,
        bound: total.sqrt(),
        base_bound: base_total.sqrt(),
        per_level,
        steps,
        base_violations: violations,
    })
}

/// Writes the per-level table as CSV `level,pairs,min_gap,median_gap`.
pub fn write_gap_csv<W: Write>(rows: &[GapRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["level", "pairs", "min_gap", "median_gap"])?;
    for r in rows {
        w.write_record([
            r.level.to_string(),
            r.pairs.to_string(),
            r.min_gap.to_string(),
            r.median_gap.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("gap table", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cantor::CantorSpec;
    use crate::discretization::perturbed_discretization;
    use crate::error::Budget;
    use crate::measures::{make_cantor_measure, FractalMeasure};

    #[test]
    fn constants_reference_case() {
        let c = compute_constants(1.0, 2.0, 2.0, 1, 1.0).unwrap();
        assert_eq!(c.l.value, Some(1e14));
        assert_eq!(c.doubling_steps, 82);
        assert_eq!(c.theta, 0.125);
        assert!(c.inv_epsilon0.ln.is_finite() && c.inv_epsilon0.ln > 0.0);
        // 1/ε₀ = 6·10⁹ c_N⁻² d² (C_D C_D)^{4·82} L^{2/3} ln L
        let direct = 6f64.ln() + 9.0 * 10f64.ln() + 4.0 * 82.0 * 4f64.ln()
            + 2.0 / 3.0 * 1e14f64.ln()
            + 1e14f64.ln().ln();
        assert!((c.inv_epsilon0.ln - direct).abs() <= 1e-12 * direct);
        assert!(c.satisfies_first_estimate() && c.satisfies_step_estimate());
        // log and double fields agree
        assert!((c.l.ln - 1e14f64.ln()).abs() < 1e-12 * 1e14f64.ln());
    }

    #[test]
    fn halving_c_n_multiplies_l_by_eight() {
        let a = compute_constants(1.0, 2.0, 2.0, 1, 1.0).unwrap();
        let b = compute_constants(0.5, 2.0, 2.0, 1, 1.0).unwrap();
        assert_eq!(b.l.value.unwrap(), 8.0 * a.l.value.unwrap());
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        assert!(compute_constants(0.0, 2.0, 2.0, 1, 1.0).is_err());
        assert!(compute_constants(1.5, 2.0, 2.0, 1, 1.0).is_err());
        assert!(compute_constants(1.0, 0.5, 2.0, 1, 1.0).is_err());
        assert!(compute_constants(1.0, 2.0, 2.0, 0, 1.0).is_err());
    }

    #[test]
    fn c_theta_examples() {
        let grid: Vec<Vec<f64>> = (0..=10_000).map(|i| vec![i as f64 / 10_000.0]).collect();
        let one = c_theta_norm(|_| C64::new(1.0, 0.0), &grid, 1.0, 0.125).unwrap();
        assert_eq!(one.value, 1.0);
        let lin = c_theta_norm(|x| C64::new(x[0], 0.0), &grid, 1.0, 0.125).unwrap();
        assert!((lin.value - 1.0).abs() < 1e-12);
        let s = c_theta_norm(|x| C64::new((50.0 * x[0]).sin(), 0.0), &grid, 1.0, 0.125).unwrap();
        assert!((s.value - 6.25).abs() < 1e-3, "{}", s.value);
        assert!(c_theta_norm(|_| C64::new(1.0, 0.0), &[], 1.0, 0.1).is_err());
    }

    fn cantor_tree(k: u32, depth: u32) -> TileTree {
        let spec = CantorSpec::line(3, &[0, 2], &[0, 2], k);
        let mu = make_cantor_measure(&spec, &Budget::default()).unwrap();
        perturbed_discretization(&mu, 1000, depth).unwrap()
    }

    #[test]
    fn root_quadruple_and_balanced_probability() {
        let t = cantor_tree(9, 0);
        let phase = Phase::dot(1, 1.0);
        let root = TileRef::new(0, 0);
        let q = select_child_quadruple(&t, &t, root, root, &phase, 0.1).unwrap();
        assert!(q.certified, "{q:?}");
        let best = q.best.unwrap();
        assert!(best.lower_holds() && best.upper_holds() && best.spacing_holds());
        let rho = probability_of_quadruple(&t, &t, root, root, &best, (2.0, 2.0)).unwrap();
        assert!(rho.rho_empirical > 0.0 && rho.exceeds_lower);
    }

    #[test]
    fn equal_weight_children_give_one_sixteenth() {
        // two atoms far apart → two equal children of the root
        let mu = FractalMeasure::new(1, vec![vec![0.25], vec![0.75]], vec![0.5, 0.5], 1e-3, AxisBox::unit(1)).unwrap();
        let t = perturbed_discretization(&mu, 1000, 0).unwrap();
        let root = TileRef::new(0, 0);
        let kids = &t.tile(0, 0).children;
        assert_eq!(kids.len(), 2);
        let quad = ChildQuadruple {
            tiles: [
                TileRef::new(1, kids[0]),
                TileRef::new(1, kids[1]),
                TileRef::new(1, kids[0]),
                TileRef::new(1, kids[1]),
            ],
            points: [vec![0.25], vec![0.75], vec![0.25], vec![0.75]],
            omega: [[0.0; 2]; 2],
            rcs_value: 0.0,
            spacing_x: 0.0,
            spacing_y: 0.0,
            lower_bound: 0.0,
            upper_bound: 0.0,
        };
        let rho = probability_of_quadruple(&t, &t, root, root, &quad, (2.0, 2.0)).unwrap();
        assert_eq!(rho.rho_empirical, 1.0 / 16.0);
        // the children sit too far apart for even spacing
        let q = select_child_quadruple(&t, &t, root, root, &Phase::dot(1, 1.0), 0.1).unwrap();
        assert_eq!(q.failure, Some(FailedBound::Spacing));
    }

    #[test]
    fn single_child_is_an_error() {
        let mu = FractalMeasure::new(1, vec![vec![0.5]], vec![1.0], 1e-3, AxisBox::unit(1)).unwrap();
        let t = perturbed_discretization(&mu, 1000, 0).unwrap();
        let root = TileRef::new(0, 0);
        assert!(select_child_quadruple(&t, &t, root, root, &Phase::dot(1, 1.0), 0.1).is_err());
    }

    #[test]
    fn zero_input_is_degenerate_and_level_sum_is_enforced() {
        let t = cantor_tree(8, 0);
        let c = compute_constants(1.0, 2.0, 2.0, 1, 1.0).unwrap();
        let phase = Phase::dot(1, 1.0);
        let zero = vec![C64::new(0.0, 0.0); t.source.len()];
        let root = TileRef::new(0, 0);
        let rep = contraction_step(&t, &t, &phase, 1e-3, root, root, &zero, &c).unwrap();
        assert!(rep.degenerate && rep.gap.is_none() && rep.lhs == 0.0 && rep.r == 0.0);
        // K = 0 at h = 0.01, so (0, 0) is not admissible
        assert!(contraction_step(&t, &t, &phase, 0.01, root, root, &zero, &c).is_err());
    }

    #[test]
    fn contraction_on_small_cantor_pair() {
        let t = cantor_tree(8, 0);
        let c = compute_constants(1.0, 2.0, 2.0, 1, 1.0).unwrap();
        let phase = Phase::dot(1, 1.0);
        let ones = vec![C64::new(1.0, 0.0); t.source.len()];
        let root = TileRef::new(0, 0);
        let rep = contraction_step(&t, &t, &phase, 1e-3, root, root, &ones, &c).unwrap();
        assert!(rep.chain_holds(1e-9), "{rep:?}");
        assert!(rep.gap.unwrap() > 0.0);
        let it = iterate_contraction(&t, &t, &phase, 1e-3, &ones, &c).unwrap();
        assert_eq!(it.k, 1);
        assert_eq!(it.per_level.len(), 1);
        assert!(it.bound <= it.base_bound);
        let mut buf = Vec::new();
        write_gap_csv(&it.per_level, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("level,pairs,min_gap,median_gap"));
    }

    #[test]
    fn one_level_recursion_is_the_base_case() {
        let t = cantor_tree(7, 0);
        let c = compute_constants(1.0, 2.0, 2.0, 1, 1.0).unwrap();
        let ones = vec![C64::new(1.0, 0.0); t.source.len()];
        let it = iterate_contraction(&t, &t, &Phase::dot(1, 1.0), 0.01, &ones, &c).unwrap();
        assert_eq!(it.k, 0);
        assert_eq!(it.bound, it.base_bound);
        assert!((it.bound - 1.0).abs() < 1e-12);
    }
}
