//! Finite Grassmann algebras, kernel norms and Berezin integration.
//!
//! An element is stored by its coefficients on ordered monomials
//! `xi_{i_1} ... xi_{i_n}` with `i_1 < ... < i_n`. For the kernel expansion
//! `E = sum_n 1/n! sum E_n(xi_1..xi_n) xi_1..xi_n` with antisymmetric `E_n`
//! the coefficient of an ordered monomial is `E_n` at that tuple, so the
//! weighted norm `sum_n h^n/n! sum |E_n|` equals `sum_I h^{|I|} |c_I|`.
//!
//! Berezin integration over a pair `(psi, psi-bar)` is normalized by
//! `int psi psi-bar = 1`, which gives `int exp(-psi-bar B psi) = det B`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{cdet, cinverse, CMat};

/// Maximum number of generators in one algebra.
pub const MAX_GENERATORS: usize = 128;

pub type Monomial = u128;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Meaning of a generator: a spinor component of `psi` or `psi-bar` at a site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Generator {
    pub level: usize,
    pub site: usize,
    pub spin: u8,
    pub bar: bool,
}

/// Generator layout for `sites` sites with four spin components, `psi` then `psi-bar`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSet {
    pub gens: Vec<Generator>,
}

impl GeneratorSet {
    /// Generators `psi(site, spin)` at index `2 * (4 * s + spin)` and `psi-bar` right after.
    pub fn spinors(level: usize, sites: &[usize]) -> Result<Self> {
        let mut gens = Vec::with_capacity(8 * sites.len());
        for &site in sites {
            for spin in 0..4u8 {
                gens.push(Generator { level, site, spin, bar: false });
                gens.push(Generator { level, site, spin, bar: true });
            }
        }
        if gens.len() > MAX_GENERATORS {
            return Err(Error::EnumerationOverflow { what: "Grassmann generators".into(), limit: MAX_GENERATORS });
        }
        Ok(Self { gens })
    }

    pub fn len(&self) -> usize {
        self.gens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gens.is_empty()
    }

    pub fn index_of(&self, g: Generator) -> Option<usize> {
        self.gens.iter().position(|&h| h == g)
    }

    /// `(psi, psi-bar)` index pairs in layout order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, g) in self.gens.iter().enumerate() {
            if !g.bar {
                if let Some(j) = self.index_of(Generator { bar: true, ..*g }) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Sign of the permutation that sorts `seq` (distinct entries).
fn sort_sign(seq: &[usize]) -> f64 {
    let mut inv = 0usize;
    for i in 0..seq.len() {
        for j in i + 1..seq.len() {
            if seq[i] > seq[j] {
                inv += 1;
            }
        }
    }
    if inv % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn bits(m: Monomial) -> Vec<usize> {
    let mut out = Vec::with_capacity(m.count_ones() as usize);
    let mut r = m;
    while r != 0 {
        let i = r.trailing_zeros() as usize;
        out.push(i);
        r &= r - 1;
    }
    out
}

/// Sign of `xi_A xi_B` relative to the ordered monomial `xi_{A u B}`.
fn product_sign(a: Monomial, b: Monomial) -> f64 {
    // Each generator of b passes over the generators of a with larger index.
    let mut swaps = 0u32;
    let mut r = b;
    while r != 0 {
        let i = r.trailing_zeros();
        let above = if i >= 127 { 0 } else { a >> (i + 1) };
        swaps += above.count_ones();
        r &= r - 1;
    }
    if swaps % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GrassmannElement {
    pub n_gen: usize,
    terms: BTreeMap<Monomial, Complex64>,
}

impl GrassmannElement {
    pub fn zero(n_gen: usize) -> Self {
        Self { n_gen, terms: BTreeMap::new() }
    }

    pub fn scalar(n_gen: usize, v: Complex64) -> Self {
        let mut e = Self::zero(n_gen);
        if v != c(0.0) {
            e.terms.insert(0, v);
        }
        e
    }

    pub fn one(n_gen: usize) -> Self {
        Self::scalar(n_gen, c(1.0))
    }

    pub fn generator(n_gen: usize, i: usize) -> Self {
        let mut e = Self::zero(n_gen);
        e.terms.insert(1u128 << i, c(1.0));
        e
    }

    /// `v * xi_{i_1} ... xi_{i_n}` for an arbitrary index order.
    pub fn monomial(n_gen: usize, idx: &[usize], v: Complex64) -> Self {
        let mut m: Monomial = 0;
        for &i in idx {
            if m >> i & 1 == 1 {
                return Self::zero(n_gen);
            }
            m |= 1u128 << i;
        }
        let mut e = Self::zero(n_gen);
        if v != c(0.0) {
            e.terms.insert(m, v * sort_sign(idx));
        }
        e
    }

    /// Coefficient of the product `xi_{idx_0} xi_{idx_1} ...` in the given order.
    pub fn coefficient(&self, idx: &[usize]) -> Complex64 {
        let mut m: Monomial = 0;
        for &i in idx {
            if m >> i & 1 == 1 {
                return c(0.0);
            }
            m |= 1u128 << i;
        }
        self.terms.get(&m).copied().unwrap_or(c(0.0)) * sort_sign(idx)
    }

    pub fn terms(&self) -> impl Iterator<Item = (Vec<usize>, Complex64)> + '_ {
        self.terms.iter().map(|(&m, &v)| (bits(m), v))
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn scalar_part(&self) -> Complex64 {
        self.terms.get(&0).copied().unwrap_or(c(0.0))
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(|m| m.count_ones() as usize).max().unwrap_or(0)
    }

    pub fn is_even(&self) -> bool {
        self.terms.keys().all(|m| m.count_ones() % 2 == 0)
    }

    /// Part of exact degree `n`.
    pub fn graded(&self, n: usize) -> Self {
        let terms = self.terms.iter().filter(|(m, _)| m.count_ones() as usize == n).map(|(&m, &v)| (m, v)).collect();
        Self { n_gen: self.n_gen, terms }
    }

    pub fn truncate(&self, cap: usize) -> Self {
        let terms = self.terms.iter().filter(|(m, _)| m.count_ones() as usize <= cap).map(|(&m, &v)| (m, v)).collect();
        Self { n_gen: self.n_gen, terms }
    }

    pub fn check_cap(&self, cap: usize) -> Result<()> {
        let d = self.degree();
        if d > cap {
            return Err(Error::DegreeCap { cap, degree: d });
        }
        Ok(())
    }

    fn insert(&mut self, m: Monomial, v: Complex64) {
        let e = self.terms.entry(m).or_insert(c(0.0));
        *e += v;
        if *e == c(0.0) {
            self.terms.remove(&m);
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (&m, &v) in &other.terms {
            out.insert(m, v);
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(c(-1.0)))
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let terms = self.terms.iter().map(|(&m, &v)| (m, v * s)).filter(|(_, v)| *v != c(0.0)).collect();
        Self { n_gen: self.n_gen, terms }
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = Self::zero(self.n_gen.max(other.n_gen));
        for (&a, &va) in &self.terms {
            for (&b, &vb) in &other.terms {
                if a & b == 0 {
                    out.insert(a | b, va * vb * product_sign(a, b));
                }
            }
        }
        out
    }

    /// Product with terms above degree `cap` discarded.
    pub fn mul_capped(&self, other: &Self, cap: usize) -> Self {
        let mut out = Self::zero(self.n_gen.max(other.n_gen));
        for (&a, &va) in &self.terms {
            for (&b, &vb) in &other.terms {
                if a & b == 0 && (a | b).count_ones() as usize <= cap {
                    out.insert(a | b, va * vb * product_sign(a, b));
                }
            }
        }
        out
    }

    /// `exp(E)` for even `E`, summed until the nilpotent part vanishes.
    pub fn exp(&self) -> Result<Self> {
        if !self.is_even() {
            return Err(Error::Precondition("exponential of an odd element".into()));
        }
        let s = self.scalar_part();
        let nil = self.sub(&Self::scalar(self.n_gen, s));
        let mut term = Self::one(self.n_gen);
        let mut sum = Self::one(self.n_gen);
        let mut n = 1.0;
        loop {
            term = term.mul(&nil).scale(c(1.0 / n));
            if term.terms.is_empty() {
                break;
            }
            sum = sum.add(&term);
            n += 1.0;
        }
        Ok(sum.scale(s.exp()))
    }

    /// `sum_I prod_{g in I} w_g |c_I|`.
    pub fn kernel_norm(&self, weights: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(&m, v)| bits(m).iter().map(|&g| weights[g]).product::<f64>() * v.norm())
            .sum()
    }

    /// Norm with the same weight `h` on every generator.
    pub fn norm_h(&self, h: f64) -> f64 {
        self.terms.iter().map(|(&m, v)| h.powi(m.count_ones() as i32) * v.norm()).sum()
    }

    /// Berezin integral over `pairs = [(psi, psi-bar), ...]`, with
    /// `int psi_i psi-bar_i = 1` for each pair.
    pub fn integrate(&self, pairs: &[(usize, usize)]) -> Self {
        let mut mask: Monomial = 0;
        let mut order = Vec::with_capacity(2 * pairs.len());
        for &(p, q) in pairs {
            mask |= (1u128 << p) | (1u128 << q);
            order.push(p);
            order.push(q);
        }
        let mut out = Self::zero(self.n_gen);
        for (&m, &v) in &self.terms {
            if m & mask != mask {
                continue;
            }
            let rest = m & !mask;
            let mut seq = order.clone();
            seq.extend(bits(rest));
            // m = sign(seq) * (pairs in order)(rest); pairs integrate to 1.
            out.insert(rest, v * sort_sign(&seq));
        }
        out
    }

    /// Substitution `xi_g -> sum_j h[(g, j)] f_j` into a new algebra with `h.ncols()` generators.
    pub fn substitute(&self, h: &CMat) -> Result<Self> {
        if h.nrows() < self.n_gen || h.ncols() > MAX_GENERATORS {
            return Err(Error::Precondition("substitution matrix shape".into()));
        }
        let n_new = h.ncols();
        let images: Vec<Self> = (0..self.n_gen)
            .map(|g| {
                let mut e = Self::zero(n_new);
                for j in 0..n_new {
                    if h[(g, j)] != c(0.0) {
                        e.terms.insert(1u128 << j, h[(g, j)]);
                    }
                }
                e
            })
            .collect();
        let mut out = Self::zero(n_new);
        for (&m, &v) in &self.terms {
            let mut t = Self::scalar(n_new, v);
            for g in bits(m) {
                t = t.mul(&images[g]);
            }
            out = out.add(&t);
        }
        Ok(out)
    }

    /// Deterministic text dump: `degree idx... re im` per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let mut entries: Vec<_> = self.terms.iter().collect();
        entries.sort_by_key(|(m, _)| (m.count_ones(), bits(**m)));
        for (m, v) in entries {
            let b = bits(*m);
            let _ = write!(s, "{}", b.len());
            for i in b {
                let _ = write!(s, " {i}");
            }
            let _ = writeln!(s, " {:e} {:e}", v.re, v.im);
        }
        s
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.sub(other).terms.values().fold(0.0, |m, v| m.max(v.norm()))
    }
}

/// `sum_{i,j} psi-bar_i B_{ij} psi_j` over the given pairs.
pub fn bilinear(n_gen: usize, pairs: &[(usize, usize)], b: &CMat) -> GrassmannElement {
    let mut e = GrassmannElement::zero(n_gen);
    for (i, &(_, bar_i)) in pairs.iter().enumerate() {
        for (j, &(psi_j, _)) in pairs.iter().enumerate() {
            if b[(i, j)] != c(0.0) {
                e = e.add(&GrassmannElement::monomial(n_gen, &[bar_i, psi_j], b[(i, j)]));
            }
        }
    }
    e
}

/// `int exp(-psi-bar D psi) E` over `pairs`, by Wick's theorem.
///
/// Each monomial with fields `psi_{i_a}` and `psi-bar_{j_b}` from the
/// integrated pairs contributes `det D * det[(D^{-1})_{i_a j_b}]` after
/// reordering into adjacent `(psi psi-bar)` pairs.
pub fn gaussian_integral(e: &GrassmannElement, d: &CMat, pairs: &[(usize, usize)]) -> Result<GrassmannElement> {
    let n = pairs.len();
    if d.nrows() != n || d.ncols() != n {
        return Err(Error::Precondition(format!("form is {}x{} for {n} pairs", d.nrows(), d.ncols())));
    }
    let det = cdet(d);
    let inv = cinverse(d)?;
    let mut psi_pos = BTreeMap::new();
    let mut bar_pos = BTreeMap::new();
    let mut mask: Monomial = 0;
    for (k, &(p, q)) in pairs.iter().enumerate() {
        psi_pos.insert(p, k);
        bar_pos.insert(q, k);
        mask |= (1u128 << p) | (1u128 << q);
    }
    let mut out = GrassmannElement::zero(e.n_gen);
    for (&m, &v) in &e.terms {
        let inside = bits(m & mask);
        let psis: Vec<usize> = inside.iter().copied().filter(|g| psi_pos.contains_key(g)).collect();
        let bars: Vec<usize> = inside.iter().copied().filter(|g| bar_pos.contains_key(g)).collect();
        if psis.len() != bars.len() {
            continue;
        }
        let rest = m & !mask;
        let mut seq = Vec::with_capacity(m.count_ones() as usize);
        for (a, b) in psis.iter().zip(&bars) {
            seq.push(*a);
            seq.push(*b);
        }
        seq.extend(bits(rest));
        let minor = CMat::from_fn(psis.len(), bars.len(), |a, b| inv[(psi_pos[&psis[a]], bar_pos[&bars[b]])]);
        out.insert(rest, v * sort_sign(&seq) * det * cdet(&minor));
    }
    Ok(out)
}

/// A polymer piece of an activity on unit-lattice sites.
#[derive(Clone, Debug)]
pub struct LocalPiece {
    pub sites: Vec<usize>,
    pub value: GrassmannElement,
}

/// Relevant parts of `E = sum_X E(X)` relative to a region `Lambda`.
#[derive(Clone, Debug)]
pub struct RelevantParts {
    pub epsilon: f64,
    pub mass: f64,
    pub remainder: GrassmannElement,
    pub boundary: GrassmannElement,
}

/// Splits off `-epsilon Vol(Lambda) - m <psi-bar psi>_Lambda` from the pieces inside `Lambda`.
///
/// `epsilon` is minus the degree-0 sum per site of `Lambda`; `m` is minus the
/// mean diagonal coefficient of `psi-bar(x,b) psi(x,b)` over sites of `Lambda`.
/// Pieces meeting both `Lambda` and its complement go to the boundary part.
pub fn extract_relevant(
    pieces: &[LocalPiece],
    gens: &GeneratorSet,
    lambda: &[usize],
    volume_element: f64,
) -> Result<RelevantParts> {
    let n_gen = gens.len();
    let inside = |s: &usize| lambda.contains(s);
    let mut interior = GrassmannElement::zero(n_gen);
    let mut boundary = GrassmannElement::zero(n_gen);
    for p in pieces {
        if p.sites.is_empty() {
            return Err(Error::Precondition("polymer with no sites".into()));
        }
        if p.sites.iter().all(inside) {
            interior = interior.add(&p.value);
        } else if p.sites.iter().any(inside) {
            boundary = boundary.add(&p.value);
        } else {
            return Err(Error::Precondition("polymer outside Lambda".into()));
        }
    }
    let vol = lambda.len() as f64 * volume_element;
    let eps = if vol > 0.0 { -interior.scalar_part().re / vol } else { 0.0 };
    let mut diag = 0.0;
    let mut count = 0usize;
    for &s in lambda {
        for spin in 0..4u8 {
            let g = gens.index_of(Generator { level: gens.gens[0].level, site: s, spin, bar: false });
            let gb = gens.index_of(Generator { level: gens.gens[0].level, site: s, spin, bar: true });
            if let (Some(a), Some(b)) = (g, gb) {
                diag += interior.coefficient(&[b, a]).re;
                count += 1;
            }
        }
    }
    let mass = if count > 0 { -diag / (count as f64 * volume_element) } else { 0.0 };
    let mut local = GrassmannElement::scalar(n_gen, c(-eps * vol));
    for &s in lambda {
        for spin in 0..4u8 {
            let lv = gens.gens[0].level;
            if let (Some(a), Some(b)) = (
                gens.index_of(Generator { level: lv, site: s, spin, bar: false }),
                gens.index_of(Generator { level: lv, site: s, spin, bar: true }),
            ) {
                local = local.add(&GrassmannElement::monomial(n_gen, &[b, a], c(-mass * volume_element)));
            }
        }
    }
    Ok(RelevantParts { epsilon: eps, mass, remainder: interior.sub(&local), boundary })
}

/// Result of a substitution together with the measured norm transport.
#[derive(Clone, Debug)]
pub struct Substitution {
    pub element: GrassmannElement,
    /// `max_g sum_j |H_{gj}|`.
    pub bound: f64,
    /// `||E o H||_h <= ||E||_{c h}` at the probed `h`.
    pub norm_holds: bool,
}

pub fn field_substitution(e: &GrassmannElement, h: &CMat, probe_h: f64) -> Result<Substitution> {
    let element = e.substitute(h)?;
    let bound = crate::linalg::max_row_l1(h);
    let lhs = element.norm_h(probe_h);
    let rhs = e.norm_h(bound * probe_h);
    Ok(Substitution { element, bound, norm_holds: lhs <= rhs * (1.0 + 1e-12) + 1e-300 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (2 * i, 2 * i + 1)).collect()
    }

    fn test_matrix(n: usize) -> CMat {
        CMat::from_fn(n, n, |i, j| {
            Complex64::new(if i == j { 2.0 } else { 0.3 * (i as f64 - j as f64) }, 0.1 * (i + 2 * j) as f64)
        })
    }

    #[test]
    fn anticommutation() {
        let a = GrassmannElement::generator(4, 1);
        let b = GrassmannElement::generator(4, 3);
        assert_eq!(a.mul(&b).add(&b.mul(&a)), GrassmannElement::zero(4));
        assert_eq!(a.mul(&a), GrassmannElement::zero(4));
        assert_eq!(GrassmannElement::monomial(4, &[3, 1], c(1.0)).coefficient(&[1, 3]), c(-1.0));
    }

    #[test]
    fn gaussian_is_determinant() {
        let n = 3;
        let p = pairs(n);
        let d = test_matrix(n);
        let e = bilinear(2 * n, &p, &d).scale(c(-1.0)).exp().unwrap();
        let z = e.integrate(&p).scalar_part();
        assert!((z - cdet(&d)).norm() < 1e-12);
    }

    #[test]
    fn wick_matches_brute_force() {
        let n = 3;
        let p = pairs(n);
        let d = test_matrix(n);
        let gauss = bilinear(2 * n, &p, &d).scale(c(-1.0)).exp().unwrap();
        let ins = GrassmannElement::monomial(2 * n, &[0, 3], c(1.0))
            .add(&GrassmannElement::monomial(2 * n, &[2, 5, 4, 1], c(0.5)))
            .add(&GrassmannElement::scalar(2 * n, c(0.25)));
        let brute = gauss.mul(&ins).integrate(&p);
        let wick = gaussian_integral(&ins, &d, &p).unwrap();
        assert!(brute.max_abs_diff(&wick) < 1e-12);
        let two = gaussian_integral(&GrassmannElement::monomial(2 * n, &[0, 3], c(1.0)), &d, &p).unwrap();
        let inv = cinverse(&d).unwrap();
        assert!((two.scalar_part() - cdet(&d) * inv[(0, 1)]).norm() < 1e-12);
    }

    #[test]
    fn bilinear_norm() {
        let n = 2;
        let p = pairs(n);
        let m = CMat::from_fn(n, n, |i, j| c((i + 2 * j) as f64 - 1.0));
        let e = bilinear(2 * n, &p, &m);
        let sum: f64 = m.iter().map(|v| v.norm()).sum();
        assert!((e.norm_h(0.7) - 0.49 * sum).abs() < 1e-12);
        assert!(e.norm_h(1.4) >= e.norm_h(0.7));
        assert_eq!(GrassmannElement::scalar(2, c(-3.0)).norm_h(5.0), 3.0);
    }

    #[test]
    fn pair_order_independence() {
        let n = 2;
        let d = test_matrix(n);
        let p = pairs(n);
        let g = bilinear(2 * n, &p, &d).scale(c(-1.0)).exp().unwrap();
        let rev: Vec<_> = p.iter().rev().copied().collect();
        assert!(g.integrate(&p).max_abs_diff(&g.integrate(&rev)) < 1e-14);
    }

    #[test]
    fn substitution_scalar_map() {
        let e = GrassmannElement::monomial(4, &[1, 0], c(2.0)).add(&GrassmannElement::scalar(4, c(1.0)));
        let id = CMat::identity(4, 4);
        assert_eq!(field_substitution(&e, &id, 1.0).unwrap().element, e);
        let lam = id * c(0.5);
        let s = field_substitution(&e, &lam, 2.0).unwrap();
        assert!((s.element.norm_h(2.0) - e.norm_h(1.0)).abs() < 1e-12);
        assert!(s.norm_holds);
    }

    #[test]
    fn relevant_parts_reassemble() {
        let gens = GeneratorSet::spinors(0, &[0, 1]).unwrap();
        let n = gens.len();
        let vac = LocalPiece { sites: vec![0], value: GrassmannElement::scalar(n, c(0.3)) };
        let vac1 = LocalPiece { sites: vec![1], value: GrassmannElement::scalar(n, c(0.3)) };
        let r = extract_relevant(&[vac, vac1], &gens, &[0, 1], 1.0).unwrap();
        assert!((r.epsilon + 0.3).abs() < 1e-15);
        assert!(r.remainder.norm_h(1.0) < 1e-14 && r.mass == 0.0);

        let pp: Vec<(usize, usize)> = gens.pairs();
        let mass_term = bilinear(n, &pp, &(CMat::identity(8, 8) * c(0.2)));
        let r = extract_relevant(&[LocalPiece { sites: vec![0, 1], value: mass_term }], &gens, &[0, 1], 1.0).unwrap();
        assert!((r.mass + 0.2).abs() < 1e-15);
        assert!(r.remainder.norm_h(1.0) < 1e-14);
    }
}
