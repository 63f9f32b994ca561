//! Classical Schottky groups built from disjoint disks: Möbius generators,
//! disk-word trees, limit-set samples and the geometric constants of their
//! limit sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Budget, Error, Result};
use crate::linalg::C64;
use crate::measures::{box_counting_slope, AxisBox, FractalMeasure};
use crate::regularity::{ConstantReport, ScaleEntry, Witness};

const MAPPING_TOL: f64 = 1e-9;
const INVERSE_TOL: f64 = 1e-10;
const BOUNDARY_SAMPLES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "DiskSpec", into = "DiskSpec")]
pub struct Disk {
    pub center: C64,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiskSpec {
    center: [f64; 2],
    radius: f64,
}

impl From<DiskSpec> for Disk {
    fn from(s: DiskSpec) -> Self {
        Disk {
            center: C64::new(s.center[0], s.center[1]),
            radius: s.radius,
        }
    }
}

impl From<Disk> for DiskSpec {
    fn from(d: Disk) -> Self {
        DiskSpec {
            center: [d.center.re, d.center.im],
            radius: d.radius,
        }
    }
}

impl Disk {
    pub fn new(x: f64, y: f64, radius: f64) -> Result<Self> {
        let d = Disk {
            center: C64::new(x, y),
            radius,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite() && self.center.re.is_finite() && self.center.im.is_finite()) {
            return Err(Error::invalid("disk needs a finite center and positive radius"));
        }
        Ok(())
    }

    /// `r_self - |c_self - c_other| - r_other`; positive for strict containment.
    pub fn containment_margin(&self, inner: &Disk) -> f64 {
        self.radius - (self.center - inner.center).norm() - inner.radius
    }

    pub fn contains_disk(&self, inner: &Disk) -> bool {
        self.containment_margin(inner) >= 0.0
    }

    /// Closed disks are disjoint when the gap between them is positive.
    pub fn gap(&self, other: &Disk) -> f64 {
        (self.center - other.center).norm() - self.radius - other.radius
    }

    pub fn contains_point(&self, z: C64) -> bool {
        (z - self.center).norm() <= self.radius
    }

    pub fn boundary(&self, n: usize) -> Vec<C64> {
        (0..n)
            .map(|k| self.center + C64::from_polar(self.radius, 2.0 * std::f64::consts::PI * k as f64 / n as f64))
            .collect()
    }
}

/// The disks drawn in the standard genus-two illustration: unit disks centered
/// at (0, 5.2), (-3, 0), (3, 0), (0, 1.732).
pub fn figure_disks() -> Vec<Disk> {
    [(0.0, 5.2), (-3.0, 0.0), (3.0, 0.0), (0.0, 1.732)]
        .iter()
        .map(|&(x, y)| Disk {
            center: C64::new(x, y),
            radius: 1.0,
        })
        .collect()
}

/// `z ↦ (a z + b) / (c z + dd)` with determinant one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MobiusMap {
    pub a: C64,
    pub b: C64,
    pub c: C64,
    pub dd: C64,
}

impl MobiusMap {
    pub fn new(a: C64, b: C64, c: C64, dd: C64) -> Result<Self> {
        let det = a * dd - b * c;
        if !(det.norm() > 0.0 && det.norm().is_finite()) {
            return Err(Error::invalid("Möbius matrix is singular"));
        }
        let s = det.sqrt();
        Ok(MobiusMap {
            a: a / s,
            b: b / s,
            c: c / s,
            dd: dd / s,
        })
    }

    pub fn identity() -> Self {
        let (o, z) = (C64::new(1.0, 0.0), C64::new(0.0, 0.0));
        MobiusMap { a: o, b: z, c: z, dd: o }
    }

    pub fn det(&self) -> C64 {
        self.a * self.dd - self.b * self.c
    }

    /// `self ∘ other`.
    pub fn compose(&self, o: &MobiusMap) -> MobiusMap {
        MobiusMap {
            a: self.a * o.a + self.b * o.c,
            b: self.a * o.b + self.b * o.dd,
            c: self.c * o.a + self.dd * o.c,
            dd: self.c * o.b + self.dd * o.dd,
        }
    }

    pub fn inverse(&self) -> MobiusMap {
        MobiusMap {
            a: self.dd,
            b: -self.b,
            c: -self.c,
            dd: self.a,
        }
    }

    pub fn apply(&self, z: C64) -> C64 {
        (self.a * z + self.b) / (self.c * z + self.dd)
    }

    /// Entrywise distance to `other` or to `-other`, whichever is smaller.
    pub fn distance_up_to_sign(&self, o: &MobiusMap) -> f64 {
        let d = |s: f64| {
            [self.a - o.a * s, self.b - o.b * s, self.c - o.c * s, self.dd - o.dd * s]
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max)
        };
        d(1.0).min(d(-1.0))
    }

    /// Image of a disk; fails when the pole lies in the closed disk.
    pub fn image_disk(&self, disk: &Disk) -> Result<Disk> {
        if self.c.norm() == 0.0 {
            let s = self.a / self.dd;
            return Ok(Disk {
                center: s * disk.center + self.b / self.dd,
                radius: s.norm() * disk.radius,
            });
        }
        // z + dd/c, then inversion, then scaling by -det/c² and translation by a/c
        let p = disk.center + self.dd / self.c;
        let denom = p.norm_sqr() - disk.radius * disk.radius;
        if !(denom > 0.0) {
            return Err(Error::invalid("disk image is not a disk: the pole lies inside"));
        }
        let inv_center = p.conj() / denom;
        let inv_radius = disk.radius / denom;
        let k = -self.det() / (self.c * self.c);
        Ok(Disk {
            center: k * inv_center + self.a / self.c,
            radius: k.norm() * inv_radius,
        })
    }

    /// `γ(center + u) - center(γ(disk))` for `|u| = radius`, evaluated without
    /// forming either large coordinate, so tiny image disks keep full relative
    /// precision.
    pub fn offset_from_image_center(&self, disk: &Disk, u: C64) -> Option<C64> {
        if self.c.norm() == 0.0 {
            return Some(self.a / self.dd * u);
        }
        let p = disk.center + self.dd / self.c;
        let rho2 = u.norm_sqr();
        let denom = p.norm_sqr() - rho2;
        if !(denom > 0.0) {
            return None;
        }
        let k = -self.det() / (self.c * self.c);
        Some(-k * (rho2 + p.conj() * u) / ((p + u) * denom))
    }

    /// Fixed point with derivative of modulus below one, if the map is loxodromic.
    pub fn attracting_fixed_point(&self) -> Option<C64> {
        if self.c.norm() == 0.0 {
            return None;
        }
        let disc = ((self.a - self.dd) * (self.a - self.dd) + 4.0 * self.b * self.c).sqrt();
        [1.0, -1.0]
            .iter()
            .map(|s| (self.a - self.dd + disc * *s) / (2.0 * self.c))
            .find(|z| (self.c * z + self.dd).norm() > 1.0 + 1e-12)
    }
}

#[derive(Debug, Clone)]
pub struct SchottkyGroup {
    pub disks: Vec<Disk>,
    pub genus: usize,
    pub generators: Vec<MobiusMap>,
    pub mapping_error: f64,
    pub inverse_error: f64,
}

impl SchottkyGroup {
    pub fn letters(&self) -> usize {
        2 * self.genus
    }

    pub fn pair(&self, a: usize) -> usize {
        (a + self.genus) % (2 * self.genus)
    }
}

/// Canonical generators `γ_a(z) = c_a + r_a r_ā / (z - c_ā)`, so that `γ_a`
/// sends the closed exterior of `D_ā` onto `D_a`.
pub fn make_schottky(disks: &[Disk]) -> Result<SchottkyGroup> {
    let n = disks.len();
    if n < 4 || n % 2 != 0 {
        return Err(Error::invalid("a Schottky group needs 2g disks with g >= 2"));
    }
    for d in disks {
        d.validate()?;
    }
    for i in 0..n {
        for j in i + 1..n {
            if disks[i].gap(&disks[j]) <= 0.0 {
                return Err(Error::invalid(format!("disks {} and {} are not disjoint", i + 1, j + 1)));
            }
        }
    }
    let g = n / 2;
    let pair = |a: usize| (a + g) % n;
    let generators: Vec<MobiusMap> = (0..n)
        .map(|a| {
            let (da, db) = (disks[a], disks[pair(a)]);
            MobiusMap::new(
                da.center,
                C64::new(da.radius * db.radius, 0.0) - da.center * db.center,
                C64::new(1.0, 0.0),
                -db.center,
            )
        })
        .collect::<Result<_>>()?;
    let mut mapping_error = 0.0f64;
    for a in 0..n {
        let (da, db) = (disks[a], disks[pair(a)]);
        for z in db.boundary(BOUNDARY_SAMPLES) {
            let w = generators[a].apply(z);
            mapping_error = mapping_error.max(((w - da.center).norm() - da.radius).abs() / da.radius);
        }
    }
    let inverse_error = (0..n)
        .map(|a| generators[a].compose(&generators[pair(a)]).distance_up_to_sign(&MobiusMap::identity()))
        .fold(0.0, f64::max);
    if mapping_error > MAPPING_TOL || inverse_error > INVERSE_TOL {
        return Err(Error::Invariant {
            invariant: "generator mapping",
            location: "make_schottky".into(),
            detail: format!("mapping error {mapping_error:e}, inverse error {inverse_error:e}"),
        });
    }
    Ok(SchottkyGroup {
        disks: disks.to_vec(),
        genus: g,
        generators,
        mapping_error,
        inverse_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordDisk {
    /// zero-based letters
    pub word: Vec<u8>,
    pub disk: Disk,
}

impl WordDisk {
    /// One-based letters, e.g. `121212`.
    pub fn label(&self) -> String {
        self.word.iter().map(|a| (a + 1).to_string()).collect::<Vec<_>>().join(if self.word.iter().any(|a| *a >= 9) { "." } else { "" })
    }
}

/// Disks of all reduced words by length; `levels[n-1]` holds the words of length n.
#[derive(Debug, Clone)]
pub struct DiskTree {
    pub levels: Vec<Vec<WordDisk>>,
}

impl DiskTree {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, n: usize) -> &[WordDisk] {
        &self.levels[n - 1]
    }

    pub fn max_radius(&self, n: usize) -> f64 {
        self.level(n).iter().map(|w| w.disk.radius).fold(0.0, f64::max)
    }

    pub fn find(&self, word: &[u8]) -> Option<&WordDisk> {
        let lvl = self.levels.get(word.len().checked_sub(1)?)?;
        lvl.binary_search_by(|w| w.word.as_slice().cmp(word)).ok().map(|i| &lvl[i])
    }

    /// JSON array of `{word, center, radius}` over every level.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row {
            word: String,
            center: [f64; 2],
            radius: f64,
        }
        let rows: Vec<Row> = self
            .levels
            .iter()
            .flatten()
            .map(|w| Row {
                word: w.label(),
                center: [w.disk.center.re, w.disk.center.im],
                radius: w.disk.radius,
            })
            .collect();
        Ok(serde_json::to_string_pretty(&rows)?)
    }

    /// Nested disks colored by level.
    pub fn to_svg(&self, group: &SchottkyGroup) -> String {
        let (lo, side) = frame(&group.disks);
        let px = 640.0;
        let map = |z: C64| ((z.re - lo[0]) / side * px, px - (z.im - lo[1]) / side * px);
        let palette = ["#1f4e79", "#2e75b6", "#9dc3e6", "#c55a11", "#f4b183", "#548235", "#a9d18e", "#7030a0"];
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{px}\" height=\"{px}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        );
        for (n, lvl) in self.levels.iter().enumerate() {
            let color = palette[n % palette.len()];
            for w in lvl {
                let (x, y) = map(w.disk.center);
                s.push_str(&format!(
                    "<circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"{:.4}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"0.6\"/>\n",
                    w.disk.radius / side * px
                ));
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// `2g (2g-1)^{n-1}`.
pub fn word_count(genus: usize, n: usize) -> u128 {
    let l = 2 * genus as u128;
    if n == 0 {
        return 1;
    }
    l * (l - 1).pow(n as u32 - 1)
}

/// `D_{a₁⋯a_n} = γ_{a₁}(D_{a₂⋯a_n})` for every reduced word up to length `n`.
pub fn iterate_disks(group: &SchottkyGroup, n: usize, budget: &Budget) -> Result<DiskTree> {
    if n == 0 {
        return Err(Error::invalid("depth must be at least 1"));
    }
    let total: u128 = (1..=n).map(|k| word_count(group.genus, k)).sum();
    budget.check("Schottky words", total)?;
    let mut levels: Vec<Vec<WordDisk>> = vec![group
        .disks
        .iter()
        .enumerate()
        .map(|(a, d)| WordDisk {
            word: vec![a as u8],
            disk: *d,
        })
        .collect()];
    for _ in 1..n {
        let prev = levels.last().expect("level one exists");
        let next: Vec<Vec<WordDisk>> = (0..group.letters())
            .into_par_iter()
            .map(|a| {
                prev.iter()
                    .filter(|w| w.word[0] as usize != group.pair(a))
                    .map(|w| {
                        let disk = group.generators[a].image_disk(&w.disk)?;
                        let mut word = Vec::with_capacity(w.word.len() + 1);
                        word.push(a as u8);
                        word.extend_from_slice(&w.word);
                        Ok(WordDisk { word, disk })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        levels.push(next.into_iter().flatten().collect());
    }
    Ok(DiskTree { levels })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeCheck {
    /// smallest `r_parent - |c_parent - c_child| - r_child` in absolute units
    pub min_nesting_margin: f64,
    /// largest relative radius error of mapped boundary samples, measured
    /// from the image center
    pub max_boundary_error: f64,
    /// the same error with samples mapped in plane coordinates; bounded below
    /// by the spacing of doubles near the center divided by the radius
    pub max_plane_boundary_error: f64,
    pub words: usize,
}

/// Nesting of every word inside its prefix, and boundary samples of
/// `D_{a₂⋯a_n}` landing on `∂D_{a₁⋯a_n}` under `γ_{a₁}`.
pub fn check_tree(group: &SchottkyGroup, tree: &DiskTree) -> Result<TreeCheck> {
    let mut margin = f64::INFINITY;
    let mut boundary = 0.0f64;
    let mut plane = 0.0f64;
    let mut words = tree.levels[0].len();
    for n in 2..=tree.depth() {
        let (m, b, pl) = tree
            .level(n)
            .par_iter()
            .map(|w| -> Result<(f64, f64, f64)> {
                let parent = tree
                    .find(&w.word[..n - 1])
                    .ok_or_else(|| missing(&w.word))?;
                let tail = tree
                    .find(&w.word[1..])
                    .ok_or_else(|| missing(&w.word))?;
                let g = &group.generators[w.word[0] as usize];
                let (mut err, mut plane_err) = (0.0f64, 0.0f64);
                for (z, k) in tail.disk.boundary(BOUNDARY_SAMPLES).into_iter().zip(0..) {
                    let u = C64::from_polar(tail.disk.radius, 2.0 * std::f64::consts::PI * k as f64 / BOUNDARY_SAMPLES as f64);
                    let off = g.offset_from_image_center(&tail.disk, u).ok_or_else(|| missing(&w.word))?;
                    err = err.max((off.norm() - w.disk.radius).abs() / w.disk.radius);
                    plane_err = plane_err.max(((g.apply(z) - w.disk.center).norm() - w.disk.radius).abs() / w.disk.radius);
                }
                Ok((parent.disk.containment_margin(&w.disk), err, plane_err))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold((f64::INFINITY, 0.0f64, 0.0f64), |(a, b, c), (m, e, p)| (a.min(m), b.max(e), c.max(p)));
        margin = margin.min(m);
        boundary = boundary.max(b);
        plane = plane.max(pl);
        words += tree.level(n).len();
    }
    Ok(TreeCheck {
        min_nesting_margin: margin,
        max_boundary_error: boundary,
        max_plane_boundary_error: plane,
        words,
    })
}

fn missing(word: &[u8]) -> Error {
    Error::Invariant {
        invariant: "tree completeness",
        location: format!("{word:?}"),
        detail: "a prefix or suffix word is absent".into(),
    }
}

/// Square frame around the generating disks: lower-left corner and side.
fn frame(disks: &[Disk]) -> ([f64; 2], f64) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for d in disks {
        lo[0] = lo[0].min(d.center.re - d.radius);
        lo[1] = lo[1].min(d.center.im - d.radius);
        hi[0] = hi[0].max(d.center.re + d.radius);
        hi[1] = hi[1].max(d.center.im + d.radius);
    }
    let side = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    (lo, side)
}

/// Limit-set sample as a measure in the unit square. Physical points are
/// `offset + scale · u`.
#[derive(Debug, Clone)]
pub struct LimitSet {
    pub measure: FractalMeasure,
    pub offset: [f64; 2],
    pub scale: f64,
    /// largest level-n radius in physical units
    pub radius: f64,
    /// largest level-(n-1) radius in physical units
    pub parent_radius: f64,
    pub depth: usize,
}

impl LimitSet {
    pub fn to_physical(&self, u: &[f64]) -> C64 {
        C64::new(self.offset[0] + self.scale * u[0], self.offset[1] + self.scale * u[1])
    }
}

/// One atom per reduced word of length `n` at the center of its disk, uniform
/// weights, floor equal to the largest level-n radius.
pub fn sample_limit_set(group: &SchottkyGroup, n: usize, budget: &Budget) -> Result<LimitSet> {
    let tree = iterate_disks(group, n, budget)?;
    limit_set_from_tree(group, &tree, n)
}

pub fn limit_set_from_tree(group: &SchottkyGroup, tree: &DiskTree, n: usize) -> Result<LimitSet> {
    if n == 0 || n > tree.depth() {
        return Err(Error::invalid("requested level is not in the tree"));
    }
    let (lo, side) = frame(&group.disks);
    let level = tree.level(n);
    let atoms: Vec<Vec<f64>> = level
        .iter()
        .map(|w| vec![(w.disk.center.re - lo[0]) / side, (w.disk.center.im - lo[1]) / side])
        .collect();
    let radius = tree.max_radius(n);
    let parent_radius = if n > 1 { tree.max_radius(n - 1) } else { side };
    let floor = radius / side;
    let weights = vec![1.0 / atoms.len() as f64; atoms.len()];
    let measure = FractalMeasure::new(2, atoms, weights, floor, AxisBox::unit(2))?;
    Ok(LimitSet {
        measure,
        offset: lo,
        scale: side,
        radius,
        parent_radius,
        depth: n,
    })
}

/// Powers of two between the largest level-(n-1) radius and `1/4`, coarsest
/// first. Below that radius the atoms are too sparse to fill every box the
/// limit set meets.
pub fn box_scales(limit: &LimitSet) -> Vec<f64> {
    let hi = -2i32;
    let lo = (limit.parent_radius / limit.scale).log2().ceil() as i32;
    (lo..=hi).rev().map(|j| 2f64.powi(j)).collect()
}

/// Box-counting slope of a limit-set sample on the given scales.
pub fn box_dimension(limit: &LimitSet, scales: &[f64]) -> Result<f64> {
    if scales.len() < 2 {
        return Err(Error::invalid("box counting needs at least two scales"));
    }
    if scales.iter().any(|s| *s < limit.measure.scale_floor) {
        return Err(Error::invalid("box scale below the limit-set resolution"));
    }
    Ok(box_counting_slope(&limit.measure.atoms, scales))
}

/// `n` unit directions evenly spread over a half circle.
pub fn direction_grid(n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|k| {
            let t = std::f64::consts::PI * k as f64 / n as f64;
            [t.cos(), t.sin()]
        })
        .collect()
}

pub const NONCONCENTRATION_CENTERS: usize = 1024;

/// `c₀ = min_{x, ε, w} max_{y ∈ B(x, ε)} |⟨y - x, w⟩| / ε` over up to 1024
/// evenly spread centers.
pub fn nonconcentration_constant(mu: &FractalMeasure, eps_grid: &[f64], dir_grid: &[[f64; 2]]) -> Result<ConstantReport> {
    if mu.dim != 2 {
        return Err(Error::invalid("nonconcentration is measured in the plane"));
    }
    if eps_grid.is_empty() || dir_grid.is_empty() {
        return Err(Error::invalid("scale and direction grids must be nonempty"));
    }
    if eps_grid.iter().any(|e| *e < mu.scale_floor * (1.0 - 1e-12)) {
        return Err(Error::invalid("finest scale is below the sample's resolution"));
    }
    let n = mu.len();
    let k = NONCONCENTRATION_CENTERS.min(n);
    let centers: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    let rows: Vec<(ScaleEntry, usize)> = eps_grid
        .par_iter()
        .map(|&eps| {
            let grid = crate::regularity::PointGrid::new(&mu.atoms, eps);
            let mut under = 0;
            let mut worst: Option<(f64, usize, usize, usize)> = None;
            for &i in &centers {
                let x = &mu.atoms[i];
                let ball = grid.in_ball(x, eps);
                if ball.len() < 2 {
                    under += 1;
                    continue;
                }
                for (wi, w) in dir_grid.iter().enumerate() {
                    let (mut best, mut arg) = (0.0f64, i);
                    for &j in &ball {
                        let y = &mu.atoms[j];
                        let v = ((y[0] - x[0]) * w[0] + (y[1] - x[1]) * w[1]).abs();
                        if v > best {
                            best = v;
                            arg = j;
                        }
                    }
                    let v = best / eps;
                    if worst.map_or(true, |(b, ..)| v < b) {
                        worst = Some((v, i, arg, wi));
                    }
                }
            }
            let entry = match worst {
                Some((v, i, j, wi)) => ScaleEntry {
                    scales: vec![eps],
                    value: v,
                    witness: Witness {
                        points: vec![mu.atoms[i].clone(), mu.atoms[j].clone(), dir_grid[wi].to_vec()],
                        scales: vec![eps],
                        kind: "nonconcentration".into(),
                        value: v,
                    },
                },
                None => ScaleEntry {
                    scales: vec![eps],
                    value: f64::INFINITY,
                    witness: Witness {
                        points: vec![],
                        scales: vec![eps],
                        kind: "under_resolved".into(),
                        value: f64::INFINITY,
                    },
                },
            };
            (entry, under)
        })
        .collect();
    let under_resolved = rows.iter().map(|r| r.1).sum();
    let per_scale: Vec<ScaleEntry> = rows.into_iter().map(|r| r.0).filter(|e| e.value.is_finite()).collect();
    let pick = per_scale
        .iter()
        .min_by(|a, b| a.value.partial_cmp(&b.value).expect("finite values"));
    let (value, witnesses) = match pick {
        Some(e) => (e.value, vec![e.witness.clone()]),
        None => (0.0, vec![]),
    };
    Ok(ConstantReport {
        value,
        witnesses,
        per_scale,
        under_resolved,
    })
}

/// Generalized circle `a(x² + y²) + b x + c y + d = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedCircle {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl GeneralizedCircle {
    pub fn circle(center: C64, radius: f64) -> Self {
        GeneralizedCircle {
            a: 1.0,
            b: -2.0 * center.re,
            c: -2.0 * center.im,
            d: center.norm_sqr() - radius * radius,
        }
    }

    /// The line `{z : ⟨z, (cos t, sin t)⟩ = s}`.
    pub fn line(t: f64, s: f64) -> Self {
        GeneralizedCircle {
            a: 0.0,
            b: t.cos(),
            c: t.sin(),
            d: -s,
        }
    }

    pub fn is_line(&self) -> bool {
        self.a == 0.0
    }

    /// Geometric distance from a point to the curve.
    pub fn distance(&self, p: C64) -> f64 {
        if self.is_line() {
            (self.b * p.re + self.c * p.im + self.d).abs() / self.b.hypot(self.c)
        } else {
            let q = C64::new(-self.b / (2.0 * self.a), -self.c / (2.0 * self.a));
            let r = (self.b * self.b + self.c * self.c - 4.0 * self.a * self.d).max(0.0).sqrt() / (2.0 * self.a.abs());
            ((p - q).norm() - r).abs()
        }
    }

    /// `max_i max(0, dist(C, c_i) - r_i)`.
    pub fn margin(&self, disks: &[Disk]) -> f64 {
        disks
            .iter()
            .map(|d| (self.distance(d.center) - d.radius).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleMargin {
    pub margin: f64,
    /// best value before clipping at zero; negative when a circle cuts every disk deeply
    pub signed: f64,
    pub witness: GeneralizedCircle,
    /// same quantity from a dense grid over centers and line directions
    pub grid_margin: f64,
}

pub const MARGIN_STARTS: usize = 64;
const MARGIN_SEED: u64 = 0x5c07_7e11;

/// For a fixed center the best radius balances the farthest inner and outer
/// constraints: `(max(d_i - r_i) - min(d_i + r_i)) / 2`.
fn circle_value(q: C64, disks: &[Disk]) -> (f64, f64) {
    let mut far = f64::NEG_INFINITY;
    let mut near = f64::INFINITY;
    for d in disks {
        let dist = (q - d.center).norm();
        far = far.max(dist - d.radius);
        near = near.min(dist + d.radius);
    }
    ((far - near) / 2.0, (far + near) / 2.0)
}

fn line_value(t: f64, disks: &[Disk]) -> (f64, f64) {
    let (ct, st) = (t.cos(), t.sin());
    let mut far = f64::NEG_INFINITY;
    let mut near = f64::INFINITY;
    for d in disks {
        let p = d.center.re * ct + d.center.im * st;
        far = far.max(p - d.radius);
        near = near.min(p + d.radius);
    }
    ((far - near) / 2.0, (far + near) / 2.0)
}

fn circumcenter(a: C64, b: C64, c: C64) -> Option<C64> {
    let d = 2.0 * (a.re * (b.im - c.im) + b.re * (c.im - a.im) + c.re * (a.im - b.im));
    if d.abs() < 1e-14 {
        return None;
    }
    let (a2, b2, c2) = (a.norm_sqr(), b.norm_sqr(), c.norm_sqr());
    Some(C64::new(
        (a2 * (b.im - c.im) + b2 * (c.im - a.im) + c2 * (a.im - b.im)) / d,
        (a2 * (c.re - b.re) + b2 * (a.re - c.re) + c2 * (b.re - a.re)) / d,
    ))
}

/// Compass search on the circle center over sixteen directions.
fn refine_center(mut q: C64, disks: &[Disk], mut step: f64) -> (f64, C64) {
    let mut v = circle_value(q, disks).0;
    let dirs: Vec<C64> = (0..16)
        .map(|k| C64::from_polar(1.0, std::f64::consts::PI * k as f64 / 8.0))
        .collect();
    while step > 1e-13 * (1.0 + q.norm()) {
        let mut moved = false;
        for d in &dirs {
            let cand = q + d * step;
            let cv = circle_value(cand, disks).0;
            if cv < v {
                v = cv;
                q = cand;
                moved = true;
                break;
            }
        }
        if !moved {
            step /= 2.0;
        }
    }
    (v, q)
}

fn refine_line(mut t: f64, disks: &[Disk], mut step: f64) -> (f64, f64) {
    let mut v = line_value(t, disks).0;
    while step > 1e-14 {
        let (l, r) = (line_value(t - step, disks).0, line_value(t + step, disks).0);
        if l < v {
            v = l;
            t -= step;
        } else if r < v {
            v = r;
            t += step;
        } else {
            step /= 2.0;
        }
    }
    (v, t)
}

/// Smallest achievable `max_i dist(C, D_i)` over circles and lines `C`.
pub fn circle_margin(disks: &[Disk]) -> Result<CircleMargin> {
    if disks.len() != 4 {
        return Err(Error::invalid("circle_margin takes exactly four disks"));
    }
    for d in disks {
        d.validate()?;
    }
    // Work in a frame fixed by the disks themselves so the result does not
    // depend on where the configuration sits in the plane.
    let c0 = disks.iter().map(|d| d.center).sum::<C64>() / 4.0;
    let spread = disks.iter().map(|d| (d.center - c0).norm() + d.radius).fold(0.0, f64::max);
    let anchor = disks
        .iter()
        .map(|d| d.center - c0)
        .find(|v| v.norm() > 1e-9 * spread)
        .unwrap_or(C64::new(1.0, 0.0));
    let rot = anchor.conj() / anchor.norm();
    let frame: Vec<Disk> = disks
        .iter()
        .map(|d| Disk {
            center: (d.center - c0) * rot,
            radius: d.radius,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(MARGIN_SEED);
    let mut best = (f64::INFINITY, None::<C64>, 0.0);
    let triples = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    for s in 0..MARGIN_STARTS {
        let tri = triples[s % 4];
        let jitter = |d: &Disk, rng: &mut ChaCha8Rng| {
            d.center + C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * d.radius
        };
        let p: Vec<C64> = tri.iter().map(|&i| jitter(&frame[i], &mut rng)).collect();
        if let Some(q0) = circumcenter(p[0], p[1], p[2]) {
            if q0.norm() < 1e6 * (1.0 + spread) {
                let (v, q) = refine_center(q0, &frame, spread / 4.0);
                if v < best.0 {
                    best = (v, Some(q), 0.0);
                }
            }
        }
        let t0 = (p[1] - p[0]).arg() + std::f64::consts::FRAC_PI_2;
        let (v, t) = refine_line(t0, &frame, 0.25);
        if v < best.0 {
            best = (v, None, t);
        }
    }
    let witness = match best.1 {
        Some(q) => {
            let q = q * rot.conj() + c0;
            GeneralizedCircle::circle(q, circle_value(q, disks).1.max(0.0))
        }
        None => {
            let t = best.2 - rot.arg();
            GeneralizedCircle::line(t, line_value(t, disks).1)
        }
    };
    let grid_margin = grid_margin(&frame, spread);
    Ok(CircleMargin {
        margin: best.0.max(0.0),
        signed: best.0,
        witness,
        grid_margin,
    })
}

/// Dense search: centers on a 401² grid over a box ten times the configuration,
/// and 3600 line directions.
fn grid_margin(disks: &[Disk], spread: f64) -> f64 {
    let c0 = disks.iter().map(|d| d.center).sum::<C64>() / 4.0;
    let n = 401;
    let half = 10.0 * spread;
    let circles = (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let q = c0 + C64::new(-half + 2.0 * half * i as f64 / (n - 1) as f64, -half + 2.0 * half * j as f64 / (n - 1) as f64);
            circle_value(q, disks).0
        })
        .reduce(|| f64::INFINITY, f64::min);
    let lines = (0..3600)
        .map(|k| line_value(std::f64::consts::PI * k as f64 / 3600.0, disks).0)
        .fold(f64::INFINITY, f64::min);
    circles.min(lines).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonorthogonalityBound {
    pub c_n: f64,
    /// admissible scale ceiling `c₁c₀²/(10‖Φ‖_{C³})`; absent when the phase has no third derivatives
    pub scale_ceiling: Option<f64>,
}

/// `c_N = c₁³ c₀⁶ / (200 (1 + ‖Φ‖_{C³})²)`.
pub fn nonorthogonality_from_nonconcentration(c0: f64, c1: f64, phi_c3: f64) -> Result<NonorthogonalityBound> {
    if !(c0 > 0.0 && c0 <= 1.0 && c1 > 0.0 && c1 <= 1.0 && phi_c3 >= 0.0 && phi_c3.is_finite()) {
        return Err(Error::invalid("need 0 < c0, c1 <= 1 and a finite nonnegative C³ norm"));
    }
    let c_n = c1.powi(3) * c0.powi(6) / (200.0 * (1.0 + phi_c3).powi(2));
    let scale_ceiling = (phi_c3 > 0.0).then(|| c1 * c0 * c0 / (10.0 * phi_c3));
    Ok(NonorthogonalityBound { c_n, scale_ceiling })
}

/// Word lookup used by the fixed-point check: letters of `γ_{a₁}⋯γ_{a_n}`.
pub fn word_map(group: &SchottkyGroup, word: &[u8]) -> MobiusMap {
    word.iter()
        .fold(MobiusMap::identity(), |m, &a| m.compose(&group.generators[a as usize]))
}

/// Parses one-based digit words such as `121212`.
pub fn parse_word(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| {
            c.to_digit(10)
                .filter(|d| *d >= 1)
                .map(|d| (d - 1) as u8)
                .ok_or_else(|| Error::invalid(format!("bad letter {c:?} in word {s:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn figure() -> SchottkyGroup {
        make_schottky(&figure_disks()).unwrap()
    }

    #[test]
    fn figure_configuration_is_a_valid_group() {
        let g = figure();
        assert_eq!(g.genus, 2);
        assert!(g.mapping_error <= 1e-9);
        for a in 0..4 {
            let m = g.generators[a];
            assert!((m.det() - C64::new(1.0, 0.0)).norm() < 1e-12);
            assert!(m.compose(&g.generators[g.pair(a)]).distance_up_to_sign(&MobiusMap::identity()) < 1e-10);
        }
    }

    #[test]
    fn overlapping_disks_are_rejected() {
        let mut d = figure_disks();
        d[1] = Disk::new(0.5, 5.0, 1.0).unwrap();
        assert!(make_schottky(&d).is_err());
        assert!(make_schottky(&d[..2]).is_err());
    }

    #[test]
    fn disk_image_matches_boundary_samples() {
        let m = MobiusMap::new(C64::new(1.0, 2.0), C64::new(0.5, 0.0), C64::new(0.3, -0.1), C64::new(2.0, 1.0)).unwrap();
        let d = Disk::new(1.0, 1.0, 0.5).unwrap();
        let img = m.image_disk(&d).unwrap();
        for z in d.boundary(64) {
            assert!(((m.apply(z) - img.center).norm() - img.radius).abs() < 1e-12 * img.radius.max(1.0));
        }
        let pole = -m.dd / m.c;
        assert!(m.image_disk(&Disk { center: pole, radius: 0.1 }).is_err());
    }

    #[test]
    fn second_level_has_twelve_nested_disks() {
        let g = figure();
        let t = iterate_disks(&g, 2, &Budget::default()).unwrap();
        assert_eq!(t.level(1), &t.levels[0][..]);
        assert_eq!(t.level(1).len(), 4);
        assert_eq!(t.level(2).len(), 12);
        let c = check_tree(&g, &t).unwrap();
        assert!(c.min_nesting_margin > 0.0);
        assert!(c.max_boundary_error < 1e-9);
    }

    #[test]
    fn radii_shrink_with_depth() {
        let g = figure();
        let t = iterate_disks(&g, 7, &Budget::default()).unwrap();
        for n in 1..7 {
            assert!(t.max_radius(n + 1) < t.max_radius(n));
        }
        assert!(iterate_disks(&g, 30, &Budget::default()).is_err());
    }

    #[test]
    fn attracting_fixed_point_lies_in_its_word_disk() {
        let g = figure();
        let t = iterate_disks(&g, 6, &Budget::default()).unwrap();
        let w = parse_word("121212").unwrap();
        let z = word_map(&g, &w[..2]).attracting_fixed_point().unwrap();
        assert!(t.find(&w).unwrap().disk.contains_point(z));
    }

    #[test]
    fn limit_sample_has_one_atom_per_word() {
        let g = figure();
        let l = sample_limit_set(&g, 1, &Budget::default()).unwrap();
        assert_eq!(l.measure.len(), 4);
        let p = l.to_physical(&l.measure.atoms[0]);
        assert!((p - g.disks[0].center).norm() < 1e-12);
    }

    #[test]
    fn collinear_atoms_have_no_nonconcentration() {
        let atoms: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 200.0, 0.5]).collect();
        let mu = FractalMeasure::new(2, atoms, vec![1.0 / 200.0; 200], 0.005, AxisBox::unit(2)).unwrap();
        let r = nonconcentration_constant(&mu, &[0.05, 0.1], &direction_grid(4)).unwrap();
        assert!(r.value < 1e-12);
        assert!(r.value <= 1.0);
    }

    #[test]
    fn margins_of_degenerate_configurations_vanish() {
        let line: Vec<Disk> = (0..4).map(|i| Disk::new(3.0 * i as f64, 1.0, 0.5).unwrap()).collect();
        let m = circle_margin(&line).unwrap();
        assert!(m.margin < 1e-9);
        let on_circle: Vec<Disk> = [0.3, 1.4, 2.9, 4.4]
            .iter()
            .map(|t: &f64| Disk::new(10.0 * t.cos(), 10.0 * t.sin(), 0.5).unwrap())
            .collect();
        assert!(circle_margin(&on_circle).unwrap().margin < 1e-6);
        assert!(circle_margin(&on_circle[..3]).is_err());
    }

    #[test]
    fn figure_configuration_has_positive_margin() {
        let m = circle_margin(&figure_disks()).unwrap();
        assert!(m.margin > 0.0);
        assert!(m.grid_margin >= m.margin - 1e-6);
        assert!((m.witness.margin(&figure_disks()) - m.margin).abs() < 1e-9);
    }

    #[test]
    fn formula_examples() {
        let a = nonorthogonality_from_nonconcentration(1.0, 1.0, 0.0).unwrap();
        assert!((a.c_n - 1.0 / 200.0).abs() < 1e-15);
        assert_eq!(a.scale_ceiling, None);
        let b = nonorthogonality_from_nonconcentration(0.5, 1.0, 1.0).unwrap();
        assert!((b.c_n - 1.0 / 51200.0).abs() < 1e-18);
        assert!(nonorthogonality_from_nonconcentration(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn disk_json_round_trip() {
        let d = figure_disks();
        let s = serde_json::to_string(&d).unwrap();
        let back: Vec<Disk> = serde_json::from_str(&s).unwrap();
        assert_eq!(d, back);
    }
}
