//! Sparse multivariate polynomials with exact derivatives.
//!
//! Polynomial scalar and vector fields let the geometry code evaluate first
//! and second derivatives, Lie brackets and Gaussian smoothings exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Poly {
    nvars: usize,
    // sorted by exponent vector, no zero coefficients
    terms: Vec<(Vec<u32>, f64)>,
}

impl Poly {
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: Vec::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        Self::from_terms(nvars, [(vec![0; nvars], c)])
    }

    /// The coordinate function `x_i` (0-based index).
    pub fn var(nvars: usize, i: usize) -> Self {
        assert!(i < nvars, "variable index out of range");
        let mut e = vec![0; nvars];
        e[i] = 1;
        Self::from_terms(nvars, [(e, 1.0)])
    }

    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Vec<u32>, f64)>) -> Self {
        let mut map: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for (e, c) in terms {
            assert_eq!(e.len(), nvars, "exponent vector has wrong length");
            *map.entry(e).or_insert(0.0) += c;
        }
        Self {
            nvars,
            terms: map.into_iter().filter(|(_, c)| *c != 0.0).collect(),
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> &[(Vec<u32>, f64)] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|(e, _)| e.iter().sum())
            .max()
            .unwrap_or(0)
    }

    /// Re-embeds into a ring with more variables; existing variables keep
    /// their indices.
    pub fn with_nvars(&self, nvars: usize) -> Self {
        assert!(nvars >= self.nvars);
        Self::from_terms(
            nvars,
            self.terms.iter().map(|(e, c)| {
                let mut e2 = e.clone();
                e2.resize(nvars, 0);
                (e2, *c)
            }),
        )
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        debug_assert!(x.len() >= self.nvars);
        self.terms
            .iter()
            .map(|(e, c)| {
                e.iter().zip(x).fold(
                    *c,
                    |acc, (&k, &xi)| if k == 0 { acc } else { acc * xi.powi(k as i32) },
                )
            })
            .sum()
    }

    pub fn partial(&self, i: usize) -> Self {
        Self::from_terms(
            self.nvars,
            self.terms.iter().filter(|(e, _)| e[i] > 0).map(|(e, c)| {
                let mut e2 = e.clone();
                let k = e2[i];
                e2[i] -= 1;
                (e2, c * k as f64)
            }),
        )
    }

    pub fn gradient(&self) -> Vec<Poly> {
        (0..self.nvars).map(|i| self.partial(i)).collect()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_terms(
            self.nvars,
            self.terms.iter().map(|(e, c)| (e.clone(), c * s)),
        )
    }

    /// `x ↦ E[p(x + sqrt(variance) Z)]` with `Z` standard normal in every variable.
    pub fn gaussian_smooth(&self, variance: f64) -> Self {
        let sd = variance.max(0.0).sqrt();
        let mut out: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        for (e, c) in &self.terms {
            // expand prod_i (x_i + sd Z_i)^{k_i} and take the Gaussian moments
            let mut partial: Vec<(Vec<u32>, f64)> = vec![(vec![0; self.nvars], *c)];
            for (i, &k) in e.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                let mut next = Vec::new();
                for (pe, pc) in &partial {
                    for j in (0..=k).step_by(2) {
                        let coef = binomial(k, j) * sd.powi(j as i32) * double_factorial_odd(j);
                        let mut ne = pe.clone();
                        ne[i] += k - j;
                        next.push((ne, pc * coef));
                    }
                }
                partial = next;
            }
            for (pe, pc) in partial {
                *out.entry(pe).or_insert(0.0) += pc;
            }
        }
        Self::from_terms(self.nvars, out)
    }

    /// Parses expressions such as `x1*x2 - 0.5*x3^2 + 2`. Variables are
    /// 1-based `x1..xN`.
    pub fn parse(src: &str, nvars: usize) -> Result<Self> {
        let mut p = Parser {
            s: src.as_bytes(),
            pos: 0,
            nvars,
        };
        let out = p.expr()?;
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(Error::Parse(format!(
                "unexpected input at offset {} in `{src}`",
                p.pos
            )));
        }
        Ok(out)
    }

    fn pow(&self, k: u32) -> Self {
        let mut acc = Self::constant(self.nvars, 1.0);
        for _ in 0..k {
            acc = &acc * self;
        }
        acc
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

// E[Z^j] for even j: (j-1)!!
fn double_factorial_odd(j: u32) -> f64 {
    if j == 0 {
        return 1.0;
    }
    (1..j).step_by(2).fold(1.0, |acc, i| acc * i as f64)
}

impl Add for &Poly {
    type Output = Poly;
    fn add(self, rhs: &Poly) -> Poly {
        let n = self.nvars.max(rhs.nvars);
        let a = self.with_nvars(n);
        let b = rhs.with_nvars(n);
        Poly::from_terms(n, a.terms.into_iter().chain(b.terms))
    }
}

impl Sub for &Poly {
    type Output = Poly;
    fn sub(self, rhs: &Poly) -> Poly {
        self + &(-rhs)
    }
}

impl Neg for &Poly {
    type Output = Poly;
    fn neg(self) -> Poly {
        self.scale(-1.0)
    }
}

impl Mul for &Poly {
    type Output = Poly;
    fn mul(self, rhs: &Poly) -> Poly {
        let n = self.nvars.max(rhs.nvars);
        let a = self.with_nvars(n);
        let b = rhs.with_nvars(n);
        let mut terms = Vec::with_capacity(a.terms.len() * b.terms.len());
        for (ea, ca) in &a.terms {
            for (eb, cb) in &b.terms {
                let e: Vec<u32> = ea.iter().zip(eb).map(|(x, y)| x + y).collect();
                terms.push((e, ca * cb));
            }
        }
        Poly::from_terms(n, terms)
    }
}

impl fmt::Display for Poly {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (idx, (e, c)) in self.terms.iter().enumerate() {
            match (idx, *c < 0.0) {
                (0, _) => write!(f, "{c}")?,
                (_, true) => write!(f, " - {}", -c)?,
                (_, false) => write!(f, " + {c}")?,
            }
            for (i, &k) in e.iter().enumerate() {
                match k {
                    0 => {}
                    1 => write!(f, "*x{}", i + 1)?,
                    _ => write!(f, "*x{}^{}", i + 1, k)?,
                }
            }
        }
        Ok(())
    }
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    nvars: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn err(&self, what: &str) -> Error {
        Error::Parse(format!("{what} at offset {}", self.pos))
    }

    fn expr(&mut self) -> Result<Poly> {
        let mut acc = match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                -&self.term()?
            }
            Some(b'+') => {
                self.pos += 1;
                self.term()?
            }
            _ => self.term()?,
        };
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = &acc + &self.term()?;
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = &acc - &self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Poly> {
        let mut acc = self.factor()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            acc = &acc * &self.factor()?;
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Poly> {
        let base = match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.err("expected `)`"));
                }
                self.pos += 1;
                inner
            }
            Some(b'x') => {
                self.pos += 1;
                let idx = self.integer()?;
                if idx == 0 || idx as usize > self.nvars {
                    return Err(self.err(&format!("variable x{idx} outside x1..x{}", self.nvars)));
                }
                Poly::var(self.nvars, idx as usize - 1)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                Poly::constant(self.nvars, self.number()?)
            }
            _ => return Err(self.err("expected a number, variable or `(`")),
        };
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let k = self.integer()?;
            return Ok(base.pow(k));
        }
        Ok(base)
    }

    fn integer(&mut self) -> Result<u32> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.s[start..self.pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| self.err("expected an integer"))
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.s.len() {
            let c = self.s[self.pos];
            let exp_sign = (c == b'-' || c == b'+')
                && self.pos > start
                && matches!(self.s[self.pos - 1], b'e' | b'E');
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        std::str::from_utf8(&self.s[start..self.pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| self.err("malformed number"))
    }
}

/// A vector field whose components are polynomials on `R^N`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyField {
    components: Vec<Poly>,
}

impl PolyField {
    pub fn new(components: Vec<Poly>) -> Self {
        let n = components.len();
        Self {
            components: components
                .into_iter()
                .map(|p| p.with_nvars(n.max(p.nvars())))
                .collect(),
        }
    }

    /// Constant field.
    pub fn constant(values: &[f64]) -> Self {
        let n = values.len();
        Self::new(values.iter().map(|&c| Poly::constant(n, c)).collect())
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Poly] {
        &self.components
    }

    pub fn is_zero(&self) -> bool {
        self.components.iter().all(Poly::is_zero)
    }

    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.components.iter().map(|p| p.eval(x)))
    }

    /// `dy(v)` at `x`.
    pub fn directional(&self, x: &[f64], v: &[f64]) -> DVector<f64> {
        let n = self.dim();
        DVector::from_iterator(
            n,
            self.components.iter().map(|p| {
                (0..n)
                    .filter(|&j| v[j] != 0.0)
                    .map(|j| p.partial(j).eval(x) * v[j])
                    .sum()
            }),
        )
    }

    /// `y''(x)(v, w)`.
    pub fn second(&self, x: &[f64], v: &[f64], w: &[f64]) -> DVector<f64> {
        let n = self.dim();
        DVector::from_iterator(
            n,
            self.components.iter().map(|p| {
                let mut s = 0.0;
                for j in 0..n {
                    if v[j] == 0.0 {
                        continue;
                    }
                    let pj = p.partial(j);
                    for k in 0..n {
                        if w[k] != 0.0 {
                            s += pj.partial(k).eval(x) * v[j] * w[k];
                        }
                    }
                }
                s
            }),
        )
    }

    pub fn jacobian_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| self.components[i].partial(j).eval(x))
    }

    /// Symbolic Jacobian, row-major: entry `(i, j)` is `∂_j y_i`.
    pub fn jacobian_polys(&self) -> Vec<Vec<Poly>> {
        self.components.iter().map(Poly::gradient).collect()
    }

    /// `[self, other] = d(other)(self) - d(self)(other)`.
    pub fn bracket(&self, other: &PolyField) -> PolyField {
        let n = self.dim();
        assert_eq!(n, other.dim());
        let comps = (0..n)
            .map(|i| {
                let mut acc = Poly::zero(n);
                for j in 0..n {
                    acc = &acc + &(&self.components[j] * &other.components[i].partial(j));
                    acc = &acc - &(&other.components[j] * &self.components[i].partial(j));
                }
                acc
            })
            .collect();
        PolyField::new(comps)
    }

    pub fn scale(&self, s: f64) -> PolyField {
        PolyField::new(self.components.iter().map(|p| p.scale(s)).collect())
    }

    pub fn add(&self, other: &PolyField) -> PolyField {
        PolyField::new(
            self.components
                .iter()
                .zip(&other.components)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }
}
