//! Arithmetic Cantor sets and their discrete Fourier submatrices.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Budget, Error, Result};
use crate::linalg::{frobenius, power_iteration, top_singular_dense, C64};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CantorSpec {
    pub m: u32,
    pub d: usize,
    /// row alphabet, each digit a `d`-vector
    pub a: Vec<Vec<u32>>,
    /// column alphabet
    pub b: Vec<Vec<u32>>,
    pub k: u32,
}

impl CantorSpec {
    /// One-dimensional spec from scalar digit lists.
    pub fn line(m: u32, a: &[u32], b: &[u32], k: u32) -> Self {
        CantorSpec {
            m,
            d: 1,
            a: a.iter().map(|v| vec![*v]).collect(),
            b: b.iter().map(|v| vec![*v]).collect(),
            k,
        }
    }

    pub fn with_level(&self, k: u32) -> Self {
        CantorSpec { k, ..self.clone() }
    }

    pub fn n(&self) -> u64 {
        (self.m as u64).pow(self.k)
    }

    pub fn delta_a(&self) -> f64 {
        (self.a.len() as f64).ln() / (self.m as f64).ln()
    }

    pub fn delta_b(&self) -> f64 {
        (self.b.len() as f64).ln() / (self.m as f64).ln()
    }

    pub fn beta(&self) -> f64 {
        (self.d as f64 - self.delta_a() - self.delta_b()) / 2.0
    }

    pub(crate) fn validate_digits(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if self.a.is_empty() || self.b.is_empty() {
            return Err(Error::invalid("alphabets must be nonempty"));
        }
        for digit in self.a.iter().chain(&self.b) {
            if digit.len() != self.d || digit.iter().any(|c| *c >= self.m) {
                return Err(Error::invalid(format!(
                    "digit {digit:?} is not in {{0..{}}}^{}",
                    self.m.saturating_sub(1),
                    self.d
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 3 {
            return Err(Error::invalid("M must be at least 3"));
        }
        if self.k == 0 {
            return Err(Error::invalid("level k must be at least 1"));
        }
        self.validate_digits()?;
        let n = (self.m as u128)
            .checked_pow(self.k)
            .ok_or_else(|| Error::invalid("M^k overflows"))?;
        if n > u64::MAX as u128 / 2 {
            return Err(Error::invalid("M^k too large"));
        }
        Ok(())
    }

    pub(crate) fn points_of(
        &self,
        alphabet: &[Vec<u32>],
        budget: &Budget,
    ) -> Result<Vec<Vec<u64>>> {
        let count = (alphabet.len() as u128)
            .checked_pow(self.k)
            .unwrap_or(u128::MAX);
        budget.check("cantor points", count)?;
        let mut digits = alphabet.to_vec();
        digits.sort();
        digits.dedup();
        let mut pts: Vec<Vec<u64>> = vec![vec![0; self.d]];
        let mut place = 1u64;
        for _ in 0..self.k {
            let mut next = Vec::with_capacity(pts.len() * digits.len());
            for p in &pts {
                for dg in &digits {
                    next.push(
                        p.iter()
                            .zip(dg)
                            .map(|(c, a)| c + *a as u64 * place)
                            .collect(),
                    );
                }
            }
            pts = next;
            place *= self.m as u64;
        }
        pts.sort();
        pts.dedup();
        Ok(pts)
    }
}

/// `C_{k,A}` as sorted integer lattice points.
pub fn cantor_points(spec: &CantorSpec, budget: &Budget) -> Result<Vec<Vec<u64>>> {
    spec.validate()?;
    spec.points_of(&spec.a, budget)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FupNormReport {
    pub r: f64,
    pub hs: f64,
    pub beta: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct NormOptions {
    /// matrices with both dimensions at most this use a dense SVD
    pub dense_crossover: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for NormOptions {
    fn default() -> Self {
        NormOptions {
            dense_crossover: 512,
            tol: 1e-12,
            max_iter: 10_000,
            seed: 0x5eed,
        }
    }
}

/// `N^{-d/2} exp(2πi j·ℓ/N)` restricted to `C_{k,A} × C_{k,B}`.
pub fn dft_submatrix(spec: &CantorSpec, budget: &Budget) -> Result<DMatrix<C64>> {
    spec.validate()?;
    let ra = (spec.a.len() as u128).pow(spec.k);
    let rb = (spec.b.len() as u128).pow(spec.k);
    budget.check("DFT submatrix entries", ra.saturating_mul(rb))?;
    let rows = spec.points_of(&spec.a, budget)?;
    let cols = spec.points_of(&spec.b, budget)?;
    let n = spec.n();
    let scale = (n as f64).powf(-(spec.d as f64) / 2.0);
    let entries: Vec<Vec<C64>> = rows
        .par_iter()
        .map(|j| {
            cols.iter()
                .map(|l| {
                    let mut ph: u128 = 0;
                    for (a, b) in j.iter().zip(l) {
                        ph = (ph + (*a as u128 % n as u128) * (*b as u128 % n as u128)) % n as u128;
                    }
                    let t = 2.0 * PI * ph as f64 / n as f64;
                    C64::new(t.cos(), t.sin()) * scale
                })
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        entries[i][j]
    }))
}

pub fn fup_norm(spec: &CantorSpec, budget: &Budget) -> Result<FupNormReport> {
    fup_norm_with(spec, budget, &NormOptions::default())
}

pub fn fup_norm_with(
    spec: &CantorSpec,
    budget: &Budget,
    opts: &NormOptions,
) -> Result<FupNormReport> {
    let mat = dft_submatrix(spec, budget)?;
    let hs = frobenius(&mat);
    let r = if mat.nrows().max(mat.ncols()) <= opts.dense_crossover {
        top_singular_dense(&mat)
    } else {
        power_iteration(&mat, opts.tol, opts.max_iter, opts.seed)?.sigma
    };
    let beta = spec.beta();
    let gain = -r.ln() / (spec.n() as f64).ln() - beta;
    Ok(FupNormReport { r, hs, beta, gain })
}

/// Exact `sqrt(|A|^k |B|^k / N^d)`.
pub fn hs_closed_form(spec: &CantorSpec) -> f64 {
    let num = ((spec.a.len() * spec.b.len()) as u128).checked_pow(spec.k);
    let den = (spec.m as u128).checked_pow(spec.d as u32 * spec.k);
    if let (Some(num), Some(den)) = (num, den) {
        if num < 1 << 53 && den < 1 << 53 {
            return (num as f64 / den as f64).sqrt();
        }
    }
    let k = spec.k as f64;
    let log = k * ((spec.a.len() as f64).ln() + (spec.b.len() as f64).ln())
        - spec.d as f64 * k * (spec.m as f64).ln();
    (0.5 * log).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Submultiplicativity {
    pub r_k1: f64,
    pub r_k2: f64,
    pub r_sum: f64,
    pub slack: f64,
}

pub fn submultiplicativity_check(
    base: &CantorSpec,
    k1: u32,
    k2: u32,
    budget: &Budget,
) -> Result<Submultiplicativity> {
    if k1 == 0 || k2 == 0 {
        return Err(Error::invalid("levels must be at least 1"));
    }
    let r_k1 = fup_norm(&base.with_level(k1), budget)?.r;
    let r_k2 = fup_norm(&base.with_level(k2), budget)?.r;
    let r_sum = fup_norm(&base.with_level(k1 + k2), budget)?.r;
    Ok(Submultiplicativity {
        r_k1,
        r_k2,
        r_sum,
        slack: r_k1 * r_k2 - r_sum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinorWitness {
    pub j: Vec<u32>,
    pub j_prime: Vec<u32>,
    pub l: Vec<u32>,
    pub l_prime: Vec<u32>,
    /// `<j - j', l - l'>` as an integer
    pub inner: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinorTest {
    pub nonorthogonal: bool,
    pub witness: Option<MinorWitness>,
}

/// Searches `A² × B²` for a quadruple with `<j - j', l - l'> ≠ 0 mod M`.
pub fn minor_test(spec: &CantorSpec) -> Result<MinorTest> {
    if spec.k != 1 {
        return Err(Error::invalid("minor test requires k = 1"));
    }
    spec.validate()?;
    let m = spec.m as i64;
    for j in &spec.a {
        for jp in &spec.a {
            for l in &spec.b {
                for lp in &spec.b {
                    let inner: i64 = (0..spec.d)
                        .map(|i| (j[i] as i64 - jp[i] as i64) * (l[i] as i64 - lp[i] as i64))
                        .sum();
                    if inner.rem_euclid(m) != 0 {
                        return Ok(MinorTest {
                            nonorthogonal: true,
                            witness: Some(MinorWitness {
                                j: j.clone(),
                                j_prime: jp.clone(),
                                l: l.clone(),
                                l_prime: lp.clone(),
                                inner,
                            }),
                        });
                    }
                }
            }
        }
    }
    Ok(MinorTest {
        nonorthogonal: false,
        witness: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: u32,
    #[serde(rename = "N")]
    pub n: u64,
    pub r: f64,
    pub hs: f64,
    pub beta: f64,
    pub gain: f64,
}

pub fn exponent_sweep(base: &CantorSpec, k_max: u32, budget: &Budget) -> Result<Vec<SweepRow>> {
    if k_max == 0 {
        return Err(Error::invalid("k_max must be at least 1"));
    }
    (1..=k_max)
        .map(|k| {
            let s = base.with_level(k);
            let rep = fup_norm(&s, budget)?;
            Ok(SweepRow {
                k,
                n: s.n(),
                r: rep.r,
                hs: rep.hs,
                beta: rep.beta,
                gain: rep.gain,
            })
        })
        .collect()
}

/// CSV with header `k,N,r,hs,beta,gain`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b() -> Budget {
        Budget::default()
    }

    #[test]
    fn lattice_points() {
        let pts = cantor_points(&CantorSpec::line(3, &[0, 2], &[0, 2], 2), &b()).unwrap();
        assert_eq!(pts, vec![vec![0], vec![2], vec![6], vec![8]]);
        let pts = cantor_points(&CantorSpec::line(4, &[0, 2], &[0], 1), &b()).unwrap();
        assert_eq!(pts, vec![vec![0], vec![2]]);
        let s = CantorSpec {
            m: 3,
            d: 2,
            a: vec![vec![0, 0], vec![2, 2]],
            b: vec![vec![0, 0]],
            k: 1,
        };
        assert_eq!(
            cantor_points(&s, &b()).unwrap(),
            vec![vec![0, 0], vec![2, 2]]
        );
    }

    #[test]
    fn full_alphabet_is_unitary() {
        let rep = fup_norm(&CantorSpec::line(3, &[0, 1, 2], &[0, 1, 2], 1), &b()).unwrap();
        assert!((rep.r - 1.0).abs() < 1e-12);
        assert!((rep.beta + 0.5).abs() < 1e-15);
        assert!((rep.gain - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_closed_form() {
        // Gram eigenvalues of [[1,1],[1,w]]/√3 with w = e^{4πi/3} are (2 ± |1+w|)/3, |1+w| = 1
        let rep = fup_norm(&CantorSpec::line(3, &[0, 2], &[0, 2], 1), &b()).unwrap();
        assert!((rep.hs - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let top = 1.0;
        assert!((rep.r - top).abs() < 1e-12, "{}", rep.r);
        assert!(rep.r < rep.hs);
    }

    #[test]
    fn rank_one_at_first_level_only() {
        let base = CantorSpec::line(4, &[0, 2], &[0, 2], 1);
        let r1 = fup_norm(&base, &b()).unwrap();
        assert!((r1.r - 1.0).abs() < 1e-12 && (r1.r - r1.hs).abs() < 1e-12);
        // deeper levels pick up nonzero products such as 2·2 mod 16
        let expect = [
            1.0,
            0.923_879_532_511_286_7,
            0.850_648_568_723_622_3,
            0.783_189_782_650_629_8,
        ];
        for (k, e) in (1..=4).zip(expect) {
            let r = fup_norm(&base.with_level(k), &b()).unwrap().r;
            assert!((r - e).abs() < 1e-9, "k={k} r={r}");
        }
        assert!(!minor_test(&base).unwrap().nonorthogonal);
    }

    #[test]
    fn minor_examples() {
        let t = minor_test(&CantorSpec::line(3, &[0, 1], &[0, 1], 1)).unwrap();
        assert!(t.nonorthogonal);
        assert_eq!(t.witness.unwrap().inner.rem_euclid(3), 1);
        let s = CantorSpec {
            m: 3,
            d: 2,
            a: vec![vec![0, 0], vec![1, 0]],
            b: vec![vec![0, 0], vec![0, 1]],
            k: 1,
        };
        assert!(!minor_test(&s).unwrap().nonorthogonal);
        assert!(minor_test(&CantorSpec::line(3, &[0, 1], &[0, 1], 2)).is_err());
    }

    #[test]
    fn submultiplicative_examples() {
        let s = submultiplicativity_check(&CantorSpec::line(3, &[0, 2], &[0, 2], 1), 1, 1, &b())
            .unwrap();
        assert!(s.slack >= -1e-9);
        let s = submultiplicativity_check(&CantorSpec::line(5, &[0, 1], &[0, 3], 1), 1, 1, &b())
            .unwrap();
        assert!(s.slack >= -1e-9);
    }

    #[test]
    fn power_path_matches_dense() {
        let spec = CantorSpec::line(3, &[0, 2], &[0, 2], 6);
        let dense = fup_norm(&spec, &b()).unwrap();
        let opts = NormOptions {
            dense_crossover: 0,
            ..NormOptions::default()
        };
        let iter = fup_norm_with(&spec, &b(), &opts).unwrap();
        assert!((dense.r - iter.r).abs() < 1e-9 * dense.r);
    }

    #[test]
    fn budget_is_enforced() {
        let spec = CantorSpec::line(3, &[0, 2], &[0, 2], 8);
        assert!(matches!(
            fup_norm(&spec, &Budget::new(1000)),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn sweep_csv_header() {
        let rows = exponent_sweep(&CantorSpec::line(3, &[0, 2], &[0, 2], 1), 2, &b()).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,N,r,hs,beta,gain\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
