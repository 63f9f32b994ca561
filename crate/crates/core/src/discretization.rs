//! Tile trees: the standard L-adic discretization and its perturbed variant in
//! which every tile keeps a support point well away from its boundary.
//!
//! Geometry is exact box arithmetic on half-open boxes. Cube bounds are always
//! computed as `q / L^n` so that shared faces agree bit for bit.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measures::{AxisBox, FractalMeasure};

/// Finite union of pairwise disjoint half-open boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Region {
    pub boxes: Vec<AxisBox>,
}

impl Region {
    pub fn from_box(b: AxisBox) -> Self {
        Region { boxes: vec![b] }
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(AxisBox::volume).sum()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.contains(p))
    }

    pub fn subtract_box(&mut self, cut: &AxisBox) {
        if self.boxes.iter().all(|b| b.intersect(cut).is_none()) {
            return;
        }
        self.boxes = self.boxes.iter().flat_map(|b| b.subtract(cut)).collect();
    }

    pub fn subtract(&mut self, other: &Region) {
        for b in &other.boxes {
            self.subtract_box(b);
        }
    }

    pub fn intersect_box(&self, b: &AxisBox) -> Region {
        Region {
            boxes: self.boxes.iter().filter_map(|x| x.intersect(b)).collect(),
        }
    }

    pub fn intersect(&self, other: &Region) -> Region {
        let mut boxes = Vec::new();
        for a in &self.boxes {
            for b in &other.boxes {
                if let Some(c) = a.intersect(b) {
                    boxes.push(c);
                }
            }
        }
        Region { boxes }
    }

    pub fn union_with(&mut self, other: &Region) {
        let mut extra = other.clone();
        extra.subtract(self);
        self.boxes.extend(extra.boxes);
    }

    /// `self ⊆ other`, ignoring slivers thinner than `tol`.
    pub fn is_subset_of(&self, other: &Region, tol: f64) -> bool {
        let mut rest = self.clone();
        rest.subtract(other);
        rest.boxes.iter().all(|b| b.side.iter().any(|s| *s <= tol))
    }

    pub fn hull(&self) -> Option<AxisBox> {
        let first = self.boxes.first()?;
        let d = first.dim();
        let mut lo = first.min_corner.clone();
        let mut hi = first.max_corner();
        for b in &self.boxes[1..] {
            for i in 0..d {
                lo[i] = lo[i].min(b.lo(i));
                hi[i] = hi[i].max(b.hi(i));
            }
        }
        Some(AxisBox::from_bounds(lo, hi))
    }

    /// ℓ∞ distance from a point of the region to its boundary.
    pub fn dist_to_boundary(&self, p: &[f64]) -> f64 {
        if !self.contains(p) {
            return 0.0;
        }
        let Some(h) = self.hull() else { return 0.0 };
        let frame = h.dilate(3.0);
        let mut outside = Region::from_box(frame.clone());
        outside.subtract(self);
        outside
            .boxes
            .iter()
            .map(|b| b.dist_inf_to_point(p))
            .fold(frame.dist_inf_to_boundary(p), f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tile {
    pub level: u32,
    pub boxes: Vec<AxisBox>,
    pub base_cube: AxisBox,
    /// integer corner of the base cube in units of `L^{-level}`
    pub cube_index: Vec<i64>,
    pub anchor: Option<Vec<f64>>,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    pub measure: f64,
    /// indices into the source measure, ascending
    pub atoms: Vec<usize>,
}

impl Tile {
    pub fn region(&self) -> Region {
        Region {
            boxes: self.boxes.clone(),
        }
    }

    pub fn hull(&self) -> AxisBox {
        self.region()
            .hull()
            .unwrap_or_else(|| self.base_cube.clone())
    }

    pub fn diameter(&self) -> f64 {
        self.hull().diameter()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TileTree {
    pub dim: usize,
    #[serde(rename = "L")]
    pub l: u64,
    /// deepest perturbed level; one more level of standard cubes follows it
    /// in perturbed trees
    pub depth: u32,
    pub perturbed: bool,
    pub levels: Vec<Vec<Tile>>,
    #[serde(skip)]
    pub source: Arc<FractalMeasure>,
}

impl TileTree {
    pub fn level(&self, n: u32) -> &[Tile] {
        &self.levels[n as usize]
    }

    pub fn tile(&self, n: u32, id: usize) -> &Tile {
        &self.levels[n as usize][id]
    }

    pub fn children(&self, n: u32, id: usize) -> impl Iterator<Item = (usize, &Tile)> {
        let next = &self.levels[n as usize + 1];
        self.levels[n as usize][id]
            .children
            .iter()
            .map(move |c| (*c, &next[*c]))
    }

    pub fn deepest_level(&self) -> u32 {
        self.levels.len() as u32 - 1
    }

    /// `L^{-2/3-n}`, the perturbation scale at level `n`.
    pub fn skin(&self, n: u32) -> f64 {
        skin(self.l, n)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn skin(l: u64, n: u32) -> f64 {
    (l as f64).powf(-2.0 / 3.0 - n as f64)
}

fn level_scale(l: u64, n: u32) -> Result<f64> {
    let ln = l
        .checked_pow(n)
        .filter(|v| *v <= 1u64 << 53)
        .ok_or_else(|| Error::invalid("L^n exceeds exact double range"))?;
    Ok(ln as f64)
}

fn cube_of(q: &[i64], ln: f64) -> AxisBox {
    let lo: Vec<f64> = q.iter().map(|c| *c as f64 / ln).collect();
    let hi: Vec<f64> = q.iter().map(|c| (*c + 1) as f64 / ln).collect();
    AxisBox::from_bounds(lo, hi)
}

fn cube_index(x: &[f64], ln: f64) -> Vec<i64> {
    x.iter()
        .map(|c| {
            let mut q = (c * ln).floor() as i64;
            while (q as f64) / ln > *c {
                q -= 1;
            }
            while ((q + 1) as f64) / ln <= *c {
                q += 1;
            }
            q
        })
        .collect()
}

/// Standard cubes at level `n` meeting the support, sorted by index.
fn standard_level(mu: &FractalMeasure, l: u64, n: u32) -> Result<Vec<Tile>> {
    let ln = level_scale(l, n)?;
    let mut groups: std::collections::BTreeMap<Vec<i64>, Vec<usize>> = Default::default();
    for (i, a) in mu.atoms.iter().enumerate() {
        groups.entry(cube_index(a, ln)).or_default().push(i);
    }
    Ok(groups
        .into_iter()
        .map(|(q, atoms)| {
            let cube = cube_of(&q, ln);
            Tile {
                level: n,
                boxes: vec![cube.clone()],
                base_cube: cube,
                cube_index: q,
                anchor: None,
                children: vec![],
                parent: None,
                measure: atoms.iter().map(|i| mu.weights[*i]).sum(),
                atoms,
            }
        })
        .collect())
}

fn best_anchor(mu: &FractalMeasure, tile: &Tile) -> Option<Vec<f64>> {
    let region = tile.region();
    let mut best: Option<(f64, usize)> = None;
    for &i in &tile.atoms {
        let d = region.dist_to_boundary(&mu.atoms[i]);
        if best.map_or(true, |(b, _)| d > b) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| mu.atoms[i].clone())
}

fn check_depth(mu: &FractalMeasure, l: u64, finest: u32) -> Result<()> {
    let scale = (l as f64).powi(-(finest as i32));
    if scale < mu.scale_floor * (1.0 - 1e-12) {
        return Err(Error::invalid(format!(
            "depth {finest} gives scale {scale:e} below the measure's floor {:e}",
            mu.scale_floor
        )));
    }
    Ok(())
}

fn link_standard(levels: &mut [Vec<Tile>], l: u64) {
    for n in 0..levels.len() - 1 {
        let (upper, lower) = levels.split_at_mut(n + 1);
        let parents = &mut upper[n];
        let map: HashMap<Vec<i64>, usize> = parents
            .iter()
            .enumerate()
            .map(|(i, t)| (t.cube_index.clone(), i))
            .collect();
        for (ci, child) in lower[0].iter_mut().enumerate() {
            let pq: Vec<i64> = child
                .cube_index
                .iter()
                .map(|c| c.div_euclid(l as i64))
                .collect();
            let p = map[&pq];
            parents[p].children.push(ci);
            child.parent = Some(p);
        }
    }
}

pub fn standard_discretization(mu: &FractalMeasure, l: u64, depth: u32) -> Result<TileTree> {
    mu.validate()?;
    if l < 2 {
        return Err(Error::invalid("L must be at least 2"));
    }
    check_depth(mu, l, depth)?;
    let mut levels = (0..=depth)
        .map(|n| standard_level(mu, l, n))
        .collect::<Result<Vec<_>>>()?;
    link_standard(&mut levels, l);
    for level in levels.iter_mut() {
        for t in level.iter_mut() {
            t.anchor = best_anchor(mu, t);
        }
    }
    Ok(TileTree {
        dim: mu.dim,
        l,
        depth,
        perturbed: false,
        levels,
        source: Arc::new(mu.clone()),
    })
}

/// A boundary component: fixed coordinates with the chosen end (`true` = upper).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Component {
    fixed: Vec<(usize, bool)>,
}

fn components(d: usize, codim: usize) -> Vec<Component> {
    let mut out = Vec::new();
    let mut subset: Vec<usize> = (0..codim).collect();
    loop {
        for mask in 0..(1u32 << codim) {
            out.push(Component {
                fixed: subset
                    .iter()
                    .enumerate()
                    .map(|(b, &i)| (i, mask >> (codim - 1 - b) & 1 == 1))
                    .collect(),
            });
        }
        // next combination in lexicographic order
        let mut i = codim;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if subset[i] < d - codim + i {
                subset[i] += 1;
                for j in i + 1..codim {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Box around a component: width `r` across the fixed coordinates,
/// the component's own extent grown by `grow` along the free ones.
fn component_box(cube: &AxisBox, p: &Component, s: f64, r: f64, grow: f64) -> AxisBox {
    let d = cube.dim();
    let mut lo = vec![0.0; d];
    let mut hi = vec![0.0; d];
    for i in 0..d {
        lo[i] = cube.lo(i) + s / 2.0 - grow;
        hi[i] = cube.hi(i) - s / 2.0 + grow;
    }
    for &(i, upper) in &p.fixed {
        let end = if upper { cube.hi(i) } else { cube.lo(i) };
        lo[i] = end - r;
        hi[i] = end + r;
    }
    AxisBox::from_bounds(lo, hi)
}

/// [`component_box`] with different reach into the cube and out of it
/// across the fixed coordinates.
fn component_box_skewed(cube: &AxisBox, p: &Component, s: f64, inward: f64, outward: f64) -> AxisBox {
    let b = component_box(cube, p, s, outward, 0.0);
    let (mut lo, mut hi) = (b.min_corner.clone(), b.max_corner());
    for &(i, upper) in &p.fixed {
        if upper {
            lo[i] = cube.hi(i) - inward;
        } else {
            hi[i] = cube.lo(i) + inward;
        }
    }
    AxisBox::from_bounds(lo, hi)
}

struct Work {
    cube: AxisBox,
    q: Vec<i64>,
    region: Region,
    atoms: Vec<usize>,
}

struct LevelBuilder<'a> {
    mu: &'a FractalMeasure,
    d: usize,
    s: f64,
    tiles: Vec<Work>,
    index: HashMap<Vec<i64>, usize>,
    /// atoms of each standard cube, keyed by index
    cube_atoms: HashMap<Vec<i64>, Vec<usize>>,
}

fn neighbourhood(q: &[i64]) -> Vec<Vec<i64>> {
    let mut out = vec![q.to_vec()];
    for i in 0..q.len() {
        out = out
            .into_iter()
            .flat_map(|v| {
                [-1i64, 0, 1].into_iter().map(move |o| {
                    let mut w = v.clone();
                    w[i] += o;
                    w
                })
            })
            .collect();
    }
    out.sort();
    out
}

impl<'a> LevelBuilder<'a> {
    fn new(mu: &'a FractalMeasure, l: u64, n: u32) -> Result<Self> {
        let cubes = standard_level(mu, l, n)?;
        let s = skin(l, n);
        let mut index = HashMap::new();
        let mut cube_atoms = HashMap::new();
        let tiles = cubes
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                index.insert(t.cube_index.clone(), i);
                cube_atoms.insert(t.cube_index.clone(), t.atoms.clone());
                Work {
                    cube: t.base_cube.clone(),
                    q: t.cube_index,
                    region: Region::from_box(t.base_cube),
                    atoms: t.atoms,
                }
            })
            .collect();
        Ok(LevelBuilder {
            mu,
            d: mu.dim,
            s,
            tiles,
            index,
            cube_atoms,
        })
    }

    fn is_good(&self, t: usize) -> bool {
        let w = &self.tiles[t];
        w.atoms
            .iter()
            .any(|&i| w.region.dist_to_boundary(&self.mu.atoms[i]) >= self.s / 5.0)
    }

    /// Largest type among the tile's atoms relative to its base cube.
    fn tile_type(&self, t: usize) -> i32 {
        let w = &self.tiles[t];
        w.atoms
            .iter()
            .map(|&i| {
                let x = &self.mu.atoms[i];
                let close = (0..self.d)
                    .filter(|&c| (x[c] - w.cube.lo(c)).min(w.cube.hi(c) - x[c]) <= self.s / 2.0)
                    .count();
                (self.d - close) as i32
            })
            .max()
            .unwrap_or(-1)
    }

    fn refresh_atoms(&mut self, t: usize) {
        let w = &self.tiles[t];
        let mut atoms: Vec<usize> = neighbourhood(&w.q)
            .iter()
            .filter_map(|q| self.cube_atoms.get(q))
            .flatten()
            .copied()
            .filter(|&i| w.region.contains(&self.mu.atoms[i]))
            .collect();
        atoms.sort_unstable();
        self.tiles[t].atoms = atoms;
    }

    fn neighbours(&self, t: usize) -> Vec<usize> {
        neighbourhood(&self.tiles[t].q)
            .iter()
            .filter_map(|q| self.index.get(q).copied())
            .filter(|&u| u != t)
            .collect()
    }

    fn adjacent_to(&self, t: usize, p: &Component) -> Vec<usize> {
        let q = &self.tiles[t].q;
        let mut out = Vec::new();
        for mask in 1..(1u32 << p.fixed.len()) {
            let mut v = q.clone();
            for (b, &(i, upper)) in p.fixed.iter().enumerate() {
                if mask >> b & 1 == 1 {
                    v[i] += if upper { 1 } else { -1 };
                }
            }
            if let Some(&u) = self.index.get(&v) {
                out.push(u);
            }
        }
        out.sort_by(|a, b| self.tiles[*a].q.cmp(&self.tiles[*b].q));
        out
    }

    fn witnessed(&self, t: usize, p: &Component, radius: f64) -> bool {
        let w = &self.tiles[t];
        let tube = component_box(&w.cube, p, self.s, radius, 0.0);
        w.atoms.iter().any(|&i| tube.contains(&self.mu.atoms[i]))
    }

    /// `depth` is how far into the cube the tube reaches when `t` absorbs
    /// it; atoms witnessed at radius `r` need `depth >= r + s/5`.
    fn absorb(&mut self, t: usize, p: &Component, depth: f64) {
        let s = self.s;
        let cube = self.tiles[t].cube.clone();
        let tube = component_box(&cube, p, s, s / 2.0, 0.0);
        let good_neighbour = self
            .adjacent_to(t, p)
            .into_iter()
            .find(|&u| self.is_good(u));
        match good_neighbour {
            Some(u) => {
                let taken = self.tiles[t].region.intersect_box(&tube);
                self.tiles[u].region.union_with(&taken);
                self.tiles[t].region.subtract(&taken);
                self.refresh_atoms(t);
                self.refresh_atoms(u);
            }
            None => {
                let mut grab = Region::from_box(component_box_skewed(&cube, p, s, depth.max(s / 2.0), s / 2.0));
                grab.union_with(&Region::from_box(component_box(
                    &cube,
                    p,
                    s,
                    s / 4.0,
                    s / 4.0,
                )));
                for u in self.neighbours(t) {
                    self.tiles[u].region.subtract(&grab);
                    self.refresh_atoms(u);
                }
                self.tiles[t].region.union_with(&grab);
                self.refresh_atoms(t);
            }
        }
    }

    fn run(&mut self, level: u32) -> Result<()> {
        // A type-k atom can sit within s/2 of a face yet farther than s/5 from
        // it, so no component witnesses it at radius s/5. The second sweep at
        // the type-defining radius s/2 picks up such tiles.
        let mut processed: BTreeSet<(usize, Component, bool)> = BTreeSet::new();
        for k in (0..self.d as i32).rev() {
            let comps = components(self.d, self.d - k as usize);
            for wide in [false, true] {
                let radius = if wide { self.s / 2.0 } else { self.s / 5.0 };
                loop {
                    let mut acted = false;
                    for t in 0..self.tiles.len() {
                        for p in &comps {
                            if self.is_good(t) || self.tile_type(t) != k {
                                break;
                            }
                            if !self.tiles[t]
                                .region
                                .is_subset_of(&Region::from_box(self.tiles[t].cube.clone()), 0.0)
                            {
                                return Err(Error::Invariant {
                                    invariant: "bad tiles stay inside their cube",
                                    location: format!("level {level}, cube {:?}", self.tiles[t].q),
                                    detail: "a bad tile extends beyond its base cube".into(),
                                });
                            }
                            let key = (t, p.clone(), wide);
                            if processed.contains(&key) || !self.witnessed(t, p, radius) {
                                continue;
                            }
                            processed.insert(key);
                            self.absorb(t, p, radius + self.s / 5.0);
                            acted = true;
                        }
                    }
                    if !acted {
                        break;
                    }
                }
            }
        }
        for t in 0..self.tiles.len() {
            if !self.tiles[t].atoms.is_empty() && !self.is_good(t) {
                return Err(Error::Invariant {
                    invariant: "every nonempty tile is good after absorption",
                    location: format!("level {level}, cube {:?}", self.tiles[t].q),
                    detail: format!(
                        "type {} tile has no atom at distance s/5 from its boundary",
                        self.tile_type(t)
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Attaches each child to one parent and reshapes parents around straddlers.
fn assemble(
    mu: &FractalMeasure,
    parents: Vec<Work>,
    children: &mut [Tile],
    level: u32,
    l: u64,
) -> Vec<Tile> {
    let mut index: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    for (i, w) in parents.iter().enumerate() {
        index.entry(w.q.clone()).or_default().push(i);
    }
    let mut assigned = vec![Vec::new(); parents.len()];
    let mut overlaps: Vec<Vec<usize>> = vec![Vec::new(); parents.len()];
    for (ci, child) in children.iter_mut().enumerate() {
        let region = child.region();
        let pq: Vec<i64> = child
            .cube_index
            .iter()
            .map(|c| c.div_euclid(l as i64))
            .collect();
        let mut cands: Vec<usize> = neighbourhood(&pq)
            .iter()
            .filter_map(|q| index.get(q))
            .flatten()
            .copied()
            .collect();
        cands.sort_by(|a, b| parents[*a].q.cmp(&parents[*b].q));
        let mut best: Option<(f64, usize)> = None;
        let mut inside = None;
        for &p in &cands {
            let ov = region.intersect(&parents[p].region).volume();
            if ov <= 0.0 {
                continue;
            }
            overlaps[p].push(ci);
            if inside.is_none() && region.is_subset_of(&parents[p].region, 0.0) {
                inside = Some(p);
            }
            if best.map_or(true, |(b, _)| ov > b) {
                best = Some((ov, p));
            }
        }
        let p = inside
            .or(best.map(|(_, p)| p))
            .expect("child overlaps some parent");
        assigned[p].push(ci);
        child.parent = Some(p);
    }
    parents
        .into_iter()
        .enumerate()
        .map(|(p, w)| {
            let mut region = w.region;
            for &ci in &overlaps[p] {
                if children[ci].parent != Some(p) {
                    region.subtract(&children[ci].region());
                }
            }
            for &ci in &assigned[p] {
                region.union_with(&children[ci].region());
            }
            let mut atoms: Vec<usize> = assigned[p]
                .iter()
                .flat_map(|&c| children[c].atoms.clone())
                .collect();
            atoms.sort_unstable();
            let mut tile = Tile {
                level,
                boxes: region.boxes,
                base_cube: w.cube,
                cube_index: w.q,
                anchor: None,
                children: assigned[p].clone(),
                parent: None,
                measure: atoms.iter().map(|i| mu.weights[*i]).sum(),
                atoms,
            };
            tile.anchor = best_anchor(mu, &tile);
            tile
        })
        .collect()
}

/// Perturbed tree on levels `0..=depth`, followed by standard cubes at `depth + 1`.
pub fn perturbed_discretization(mu: &FractalMeasure, l: u64, depth: u32) -> Result<TileTree> {
    mu.validate()?;
    if l < 1000 {
        return Err(Error::invalid(
            "perturbed discretization requires L >= 1000",
        ));
    }
    check_depth(mu, l, depth + 1)?;
    let mut next = standard_level(mu, l, depth + 1)?;
    for t in next.iter_mut() {
        t.anchor = best_anchor(mu, t);
    }
    let mut built: Vec<Vec<Tile>> = vec![next];
    for n in (0..=depth).rev() {
        let parents = if n == 0 {
            standard_level(mu, l, 0)?
                .into_iter()
                .map(|t| Work {
                    cube: t.base_cube.clone(),
                    q: t.cube_index,
                    region: Region::from_box(t.base_cube),
                    atoms: t.atoms,
                })
                .collect()
        } else {
            let mut b = LevelBuilder::new(mu, l, n)?;
            b.run(n)?;
            b.tiles
                .into_iter()
                .filter(|w| !w.atoms.is_empty())
                .collect()
        };
        let children = built.last_mut().expect("nonempty");
        let level = assemble(mu, parents, children, n, l);
        built.push(level);
    }
    built.reverse();
    Ok(TileTree {
        dim: mu.dim,
        l,
        depth,
        perturbed: true,
        levels: built,
        source: Arc::new(mu.clone()),
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct InvariantTally {
    pub checked: usize,
    pub failed: usize,
    /// most negative slack seen (normalized by the level's skin scale where relevant)
    pub worst_margin: f64,
}

impl InvariantTally {
    fn new() -> Self {
        InvariantTally {
            checked: 0,
            failed: 0,
            worst_margin: f64::INFINITY,
        }
    }

    fn record(&mut self, margin: f64, ok: bool) {
        self.checked += 1;
        if !ok {
            self.failed += 1;
        }
        self.worst_margin = self.worst_margin.min(margin);
    }

    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TreeFailure {
    pub invariant: &'static str,
    pub level: u32,
    pub tile: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TreeReport {
    pub partition: InvariantTally,
    pub nesting: InvariantTally,
    pub containment: InvariantTally,
    pub interior_point: InvariantTally,
    pub failures: Vec<TreeFailure>,
}

impl TreeReport {
    pub fn all_passed(&self) -> bool {
        self.partition.passed()
            && self.nesting.passed()
            && self.containment.passed()
            && self.interior_point.passed()
    }

    fn fail(&mut self, invariant: &'static str, level: u32, tile: usize, detail: String) {
        if self.failures.len() < 64 {
            self.failures.push(TreeFailure {
                invariant,
                level,
                tile,
                detail,
            });
        }
    }
}

fn region_gap(inner: &AxisBox, region: &Region) -> f64 {
    // positive: clearance between `inner` and the complement of `region`;
    // negative: depth by which the complement intrudes
    let frame = inner.dilate(3.0);
    let mut outside = Region::from_box(frame);
    outside.subtract(region);
    let mut gap = f64::INFINITY;
    for b in &outside.boxes {
        match b.intersect(inner) {
            Some(c) => gap = gap.min(-c.side.iter().cloned().fold(f64::INFINITY, f64::min)),
            None => {
                let sep = (0..inner.dim())
                    .map(|i| (b.lo(i) - inner.hi(i)).max(inner.lo(i) - b.hi(i)))
                    .fold(f64::NEG_INFINITY, f64::max);
                gap = gap.min(sep);
            }
        }
    }
    gap
}

/// Verifies partition, nesting, cube containment and the interior-point bound.
pub fn check_tree(tree: &TileTree) -> TreeReport {
    let mu = &*tree.source;
    let mut rep = TreeReport {
        partition: InvariantTally::new(),
        nesting: InvariantTally::new(),
        containment: InvariantTally::new(),
        interior_point: InvariantTally::new(),
        failures: vec![],
    };
    let l = tree.l;
    for (n, tiles) in tree.levels.iter().enumerate() {
        let n = n as u32;
        // partition: each atom lies in exactly one tile geometry, matching the stored lists
        let mut owner: Vec<Option<usize>> = vec![None; mu.len()];
        let mut index: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
        for (i, t) in tiles.iter().enumerate() {
            index.entry(t.cube_index.clone()).or_default().push(i);
            for &a in &t.atoms {
                owner[a] = Some(i);
            }
        }
        let ln = (l as f64).powi(n as i32);
        for (a, x) in mu.atoms.iter().enumerate() {
            let q = cube_index(x, ln);
            let holders: Vec<usize> = neighbourhood(&q)
                .iter()
                .filter_map(|c| index.get(c))
                .flatten()
                .copied()
                .filter(|&i| tiles[i].region().contains(x))
                .collect();
            let ok = holders.len() == 1 && owner[a] == Some(holders[0]);
            rep.partition.record(if ok { 0.0 } else { -1.0 }, ok);
            if !ok {
                rep.fail(
                    "partition",
                    n,
                    owner[a].unwrap_or(usize::MAX),
                    format!("atom {a} held by {holders:?}"),
                );
            }
        }
        // nesting
        if (n as usize) + 1 < tree.levels.len() {
            let next = &tree.levels[n as usize + 1];
            let mut seen = vec![0usize; next.len()];
            for (i, t) in tiles.iter().enumerate() {
                let parent = t.region();
                let mut atoms = Vec::new();
                let mut ok = true;
                for &c in &t.children {
                    seen[c] += 1;
                    if next[c].parent != Some(i) || !next[c].region().is_subset_of(&parent, 0.0) {
                        ok = false;
                    }
                    atoms.extend(next[c].atoms.iter().copied());
                }
                for (x, &c1) in t.children.iter().enumerate() {
                    for &c2 in &t.children[x + 1..] {
                        if next[c1].region().intersect(&next[c2].region()).volume() > 0.0 {
                            ok = false;
                        }
                    }
                }
                atoms.sort_unstable();
                if atoms != t.atoms {
                    ok = false;
                }
                rep.nesting.record(if ok { 0.0 } else { -1.0 }, ok);
                if !ok {
                    rep.fail("nesting", n, i, "children do not partition the tile".into());
                }
            }
            for (c, count) in seen.iter().enumerate() {
                if *count != 1 {
                    rep.nesting.record(-1.0, false);
                    rep.fail(
                        "nesting",
                        n + 1,
                        c,
                        format!("tile listed under {count} parents"),
                    );
                }
            }
        }
        if n == 0 || n > tree.depth {
            continue;
        }
        let s = skin(l, n);
        let alpha = (l as f64).powf(-2.0 / 3.0);
        for (i, t) in tiles.iter().enumerate() {
            let region = t.region();
            let outer = t.base_cube.dilate(1.0 + alpha);
            let inner = t.base_cube.dilate(1.0 - alpha);
            let slack_out = region
                .boxes
                .iter()
                .flat_map(|b| {
                    (0..tree.dim)
                        .map(|c| (b.lo(c) - outer.lo(c)).min(outer.hi(c) - b.hi(c)))
                        .collect::<Vec<_>>()
                })
                .fold(f64::INFINITY, f64::min);
            let slack_in = region_gap(&inner, &region);
            let tol = 8.0
                * f64::EPSILON
                * (1.0
                    + t.base_cube
                        .max_corner()
                        .iter()
                        .fold(0.0f64, |a, c| a.max(c.abs())));
            let margin = slack_out.min(slack_in) / s;
            let ok = slack_out >= -tol && slack_in >= -tol;
            rep.containment.record(margin, ok);
            if !ok {
                rep.fail(
                    "containment",
                    n,
                    i,
                    format!("outer slack {slack_out:e}, inner slack {slack_in:e}"),
                );
            }
            let dist = t
                .anchor
                .as_ref()
                .filter(|x| t.atoms.iter().any(|&a| &mu.atoms[a] == *x))
                .map(|x| region.dist_to_boundary(x))
                .unwrap_or(f64::NEG_INFINITY);
            let ok = dist >= s / 10.0;
            rep.interior_point.record(dist / s - 0.1, ok);
            if !ok {
                rep.fail(
                    "interior_point",
                    n,
                    i,
                    format!("anchor distance {dist:e} < s/10 = {:e}", s / 10.0),
                );
            }
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cantor::CantorSpec;
    use crate::error::Budget;
    use crate::measures::make_cantor_measure;

    fn atoms_1d(xs: &[f64], floor: f64) -> FractalMeasure {
        let w = 1.0 / xs.len() as f64;
        FractalMeasure::new(
            1,
            xs.iter().map(|x| vec![*x]).collect(),
            vec![w; xs.len()],
            floor,
            AxisBox::unit(1),
        )
        .unwrap()
    }

    #[test]
    fn component_enumeration() {
        assert_eq!(components(2, 1).len(), 4);
        assert_eq!(components(2, 2).len(), 4);
        assert_eq!(components(3, 2).len(), 12);
        let c = components(2, 1);
        assert_eq!(c[0].fixed, vec![(0, false)]);
        assert_eq!(c[3].fixed, vec![(1, true)]);
    }

    #[test]
    fn standard_single_atom() {
        let mu = atoms_1d(&[0.0], 1e-3);
        let t = standard_discretization(&mu, 10, 2).unwrap();
        assert!(t.levels.iter().all(|l| l.len() == 1));
        assert_eq!(t.tile(2, 0).anchor, Some(vec![0.0]));
        let rep = check_tree(&t);
        assert!(rep.partition.passed() && rep.nesting.passed());
        assert!(!rep.interior_point.passed());
    }

    #[test]
    fn standard_cantor_counts() {
        let spec = CantorSpec::line(3, &[0, 2], &[0, 2], 3);
        let mu = make_cantor_measure(&spec, &Budget::default()).unwrap();
        let t = standard_discretization(&mu, 3, 3).unwrap();
        for n in 0..=3 {
            assert_eq!(t.level(n).len(), 1 << n);
        }
    }

    #[test]
    fn corner_atoms_are_absorbed() {
        let mu = atoms_1d(&[0.0, 0.5], 1e-6);
        let t = perturbed_discretization(&mu, 1000, 1).unwrap();
        assert_eq!(t.level(1).len(), 2);
        let rep = check_tree(&t);
        assert!(rep.all_passed(), "{rep:?}");
        let s = t.skin(1);
        for tile in t.level(1) {
            let x = tile.anchor.clone().unwrap();
            assert!(tile.region().dist_to_boundary(&x) >= s / 10.0);
        }
    }

    #[test]
    fn interior_atom_keeps_its_cube() {
        let mu = atoms_1d(&[0.4567], 1e-6);
        let t = perturbed_discretization(&mu, 1000, 1).unwrap();
        let tile = &t.level(1)[0];
        assert_eq!(tile.boxes, vec![tile.base_cube.clone()]);
    }

    #[test]
    fn reassigned_child_is_detected() {
        let mu = atoms_1d(&[0.1, 0.9], 1e-4);
        let mut t = standard_discretization(&mu, 10, 2).unwrap();
        let moved = t.levels[1][0].children.pop().unwrap();
        t.levels[1][1].children.push(moved);
        assert!(!check_tree(&t).nesting.passed());
    }

    #[test]
    fn region_ops() {
        let mut r = Region::from_box(AxisBox::unit(2));
        let hole = AxisBox::new(vec![0.4, 0.4], vec![0.2, 0.2]).unwrap();
        r.subtract_box(&hole);
        assert!(!r.contains(&[0.5, 0.5]) && r.contains(&[0.1, 0.5]));
        assert!((r.volume() - 0.96).abs() < 1e-12);
        assert!((r.dist_to_boundary(&[0.3, 0.5]) - 0.1).abs() < 1e-12);
        r.union_with(&Region::from_box(hole));
        assert!((r.volume() - 1.0).abs() < 1e-12);
        assert!(Region::from_box(AxisBox::unit(2)).is_subset_of(&r, 0.0));
    }

    #[test]
    fn deterministic_trees() {
        let mu = crate::measures::random_cloud(2, 50, 1e-9, 4).unwrap();
        let a = perturbed_discretization(&mu, 1000, 2)
            .unwrap()
            .to_json()
            .unwrap();
        let b = perturbed_discretization(&mu, 1000, 2)
            .unwrap()
            .to_json()
            .unwrap();
        assert_eq!(a, b);
    }
}
