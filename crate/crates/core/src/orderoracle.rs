//! Symbolic interaction orders.
//!
//! Node states become polynomials over one indeterminate per feature. Only
//! the monomial support is tracked: weight matrices are treated as fully
//! mixing and coefficients are dropped, so every coordinate of a node state
//! shares one support set.

use std::collections::BTreeSet;

use rand::Rng;
use serde::Serialize;

use crate::error::{config_err, contract_err, Result};

pub const MAX_FEATURES: usize = 8;
pub const MAX_LAYERS: usize = 4;
/// Expansion budget per polynomial.
pub const MAX_MONOMIALS: usize = 1 << 20;

/// Exponent vector packed as one byte per feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial(u64);

impl Monomial {
    pub fn var(k: usize) -> Self {
        Monomial(1u64 << (8 * k))
    }

    pub fn exponent(self, k: usize) -> u32 {
        ((self.0 >> (8 * k)) & 0xFF) as u32
    }

    pub fn degree(self) -> u32 {
        self.0.to_le_bytes().iter().map(|b| u32::from(*b)).sum()
    }

    pub fn contains(self, k: usize) -> bool {
        self.exponent(k) > 0
    }

    /// Exponents never exceed `2^MAX_LAYERS`, so byte lanes cannot carry.
    fn times(self, other: Self) -> Self {
        Monomial(self.0 + other.0)
    }
}

/// Support of a polynomial.
pub type Polynomial = BTreeSet<Monomial>;

fn product(a: &Polynomial, b: &Polynomial) -> Result<Polynomial> {
    let mut out = Polynomial::new();
    for x in a {
        for y in b {
            out.insert(x.times(*y));
        }
        if out.len() > MAX_MONOMIALS {
            return Err(config_err!("symbolic expansion exceeds {MAX_MONOMIALS} monomials"));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Emerg,
    Residual,
}

impl std::str::FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "emerg" => Ok(Mode::Emerg),
            "residual" => Ok(Mode::Residual),
            _ => Err(config_err!("unknown mode `{s}` (emerg | residual)")),
        }
    }
}

/// Square boolean adjacency support.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    n: usize,
    cells: Vec<bool>,
}

impl Pattern {
    pub fn new(n: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != n * n {
            return Err(contract_err!("pattern of {} cells is not {n}x{n}", cells.len()));
        }
        Ok(Self { n, cells })
    }

    pub fn full(n: usize) -> Self {
        Self {
            n,
            cells: vec![true; n * n],
        }
    }

    pub fn from_matrix(m: &crate::diffcore::Tensor) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(contract_err!("pattern from a {:?} matrix", m.shape()));
        }
        Self::new(m.rows(), m.data().iter().map(|v| *v != 0.0).collect())
    }

    /// Symmetric pattern with unit diagonal; each off-diagonal pair is an edge
    /// with probability `density`.
    pub fn random_symmetric(n: usize, density: f64, rng: &mut impl Rng) -> Self {
        let mut cells = vec![false; n * n];
        for i in 0..n {
            cells[i * n + i] = true;
            for j in i + 1..n {
                if rng.gen_bool(density) {
                    cells[i * n + j] = true;
                    cells[j * n + i] = true;
                }
            }
        }
        Self { n, cells }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j]
    }
}

/// Per layer `0..=N_l`, per node, the polynomial support of `h_m^(l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolicRun {
    pub mode: Mode,
    pub states: Vec<Vec<Polynomial>>,
}

impl SymbolicRun {
    pub fn degrees(&self, layer: usize, node: usize) -> BTreeSet<u32> {
        self.states[layer][node].iter().map(|m| m.degree()).collect()
    }

    /// Degree set over node `m`'s whole history `h^(0) … h^(N_l)`.
    pub fn history_degrees(&self, node: usize) -> BTreeSet<u32> {
        (0..self.states.len()).flat_map(|l| self.degrees(l, node)).collect()
    }

    pub fn max_degree(&self, layer: usize) -> u32 {
        self.states[layer]
            .iter()
            .flat_map(|p| p.iter().map(|m| m.degree()))
            .max()
            .unwrap_or(0)
    }
}

fn check_limits(features: usize, layers: usize) -> Result<()> {
    if features == 0 || features > MAX_FEATURES {
        return Err(config_err!("features = {features} must lie in 1..={MAX_FEATURES}"));
    }
    if layers > MAX_LAYERS {
        return Err(config_err!("layers = {layers} exceeds {MAX_LAYERS}"));
    }
    Ok(())
}

/// Runs the message-passing recurrence symbolically. `patterns` holds one
/// support per layer, or a single support reused by every layer.
pub fn symbolic_run(features: usize, layers: usize, patterns: &[Pattern], mode: Mode) -> Result<SymbolicRun> {
    check_limits(features, layers)?;
    if layers > 0 && patterns.len() != layers && patterns.len() != 1 {
        return Err(contract_err!("{} patterns for {layers} layers", patterns.len()));
    }
    if let Some(p) = patterns.iter().find(|p| p.size() != features) {
        return Err(contract_err!("{}-node pattern for {features} features", p.size()));
    }
    let h0: Vec<Polynomial> = (0..features).map(|k| Polynomial::from([Monomial::var(k)])).collect();
    let mut states = vec![h0.clone()];
    for l in 0..layers {
        let pat = &patterns[if patterns.len() == 1 { 0 } else { l }];
        let prev = states.last().unwrap();
        let mut next = Vec::with_capacity(features);
        for m in 0..features {
            let source = match mode {
                Mode::Emerg => &h0,
                Mode::Residual => prev,
            };
            let mut msg = Polynomial::new();
            for (n, s) in source.iter().enumerate() {
                if pat.get(m, n) {
                    msg.extend(s.iter().copied());
                }
            }
            let mut h = product(&prev[m], &msg)?;
            if mode == Mode::Residual {
                h.extend(prev[m].iter().copied());
            }
            next.push(h);
        }
        states.push(next);
    }
    Ok(SymbolicRun { mode, states })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Counterexample {
    pub layer: usize,
    pub node: usize,
    pub expected: u32,
    pub found: u32,
}

/// Whether every monomial of every nonzero `h_m^(l)` has degree exactly
/// `l + 1`; otherwise the first offending monomial.
pub fn check_prop1(features: usize, layers: usize, patterns: &[Pattern], mode: Mode) -> Result<(bool, Option<Counterexample>)> {
    let run = symbolic_run(features, layers, patterns, mode)?;
    for (l, layer) in run.states.iter().enumerate() {
        for (m, poly) in layer.iter().enumerate() {
            if let Some(bad) = poly.iter().find(|x| x.degree() != l as u32 + 1) {
                return Ok((
                    false,
                    Some(Counterexample {
                        layer: l,
                        node: m,
                        expected: l as u32 + 1,
                        found: bad.degree(),
                    }),
                ));
            }
        }
    }
    Ok((true, None))
}

/// One row of the degree table printed by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegreeRow {
    pub mode: Mode,
    pub layer: usize,
    pub degrees: Vec<u32>,
    pub max_degree: u32,
    pub history_degrees: Vec<u32>,
}

pub fn degree_table(features: usize, layers: usize, pattern: &Pattern, mode: Mode) -> Result<Vec<DegreeRow>> {
    let run = symbolic_run(features, layers, std::slice::from_ref(pattern), mode)?;
    let mut hist = BTreeSet::new();
    let mut rows = Vec::new();
    for l in 0..=layers {
        let deg: BTreeSet<u32> = (0..features).flat_map(|m| run.degrees(l, m)).collect();
        hist.extend(deg.iter().copied());
        rows.push(DegreeRow {
            mode,
            layer: l,
            degrees: deg.into_iter().collect(),
            max_degree: run.max_degree(l),
            history_degrees: hist.iter().copied().collect(),
        });
    }
    Ok(rows)
}
