//! Polynomials on non-negative measures over a finite grid.
//!
//! A measure `ν = c₁δ₁ + … + c_mδ_m` is stored as its weight vector `c`.
//! A monomial of degree `k` is the pairing `⟨g, ν^k⟩ = Σ g(i₁,…,i_k) c_{i₁}⋯c_{i_k}`
//! against a symmetric coefficient tensor `g`, stored densely in row-major
//! order over `{0,…,m−1}^k`. A polynomial is a list of such tensors, one per
//! degree.

use crate::error::{check_dim, Error, Result};

/// Default cap on polynomial degree for products and generator applications.
pub const DEFAULT_MAX_DEGREE: usize = 6;

/// Ordered points `x₁ < … < x_m` labelling the underlying space.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
}

impl Grid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("a grid needs at least one point".into()));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidGrid("grid points must be finite".into()));
        }
        if points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("grid points must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    /// Abstract labels `1, …, m`.
    pub fn labels(m: usize) -> Result<Self> {
        Self::new((1..=m).map(|i| i as f64).collect())
    }

    /// `nodes` equally spaced points covering `[start, end]`.
    pub fn uniform(start: f64, end: f64, nodes: usize) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidGrid("a grid needs at least one point".into()));
        }
        if nodes == 1 {
            return Self::new(vec![start]);
        }
        if end <= start {
            return Err(Error::InvalidGrid(format!("empty interval [{start}, {end}]")));
        }
        let h = (end - start) / (nodes - 1) as f64;
        Self::new((0..nodes).map(|i| start + h * i as f64).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Common spacing if the grid is uniform (relative tolerance 1e-9).
    pub fn spacing(&self) -> Option<f64> {
        if self.points.len() < 2 {
            return None;
        }
        let h = self.points[1] - self.points[0];
        let uniform = self
            .points
            .windows(2)
            .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(1.0));
        uniform.then_some(h)
    }
}

/// Non-negative measure on an `m`-point space, given by its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureVec {
    weights: Vec<f64>,
}

impl MeasureVec {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidInput("measure on an empty space".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::InvalidInput(format!(
                "measure weights must be finite and non-negative, got {w}"
            )));
        }
        Ok(Self { weights })
    }

    pub fn zero(m: usize) -> Self {
        Self {
            weights: vec![0.0; m],
        }
    }

    pub fn dirac(m: usize, i: usize, mass: f64) -> Result<Self> {
        let mut w = vec![0.0; m];
        *w.get_mut(i)
            .ok_or_else(|| Error::InvalidInput(format!("point {i} outside 0..{m}")))? = mass;
        Self::new(w)
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Symmetric coefficient tensor of degree `k` over `m` points.
#[derive(Debug, Clone, PartialEq)]
pub struct SymCoeff {
    dim: usize,
    degree: usize,
    values: Vec<f64>,
}

pub(crate) fn tensor_len(dim: usize, degree: usize) -> usize {
    dim.pow(degree as u32)
}

/// Writes the multi-index of flat position `idx` into `out` (row-major).
pub(crate) fn unflatten(mut idx: usize, dim: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = idx % dim;
        idx /= dim;
    }
}

pub(crate) fn flatten(index: &[usize], dim: usize) -> usize {
    index.iter().fold(0, |acc, &i| acc * dim + i)
}

impl SymCoeff {
    pub fn zero(dim: usize, degree: usize) -> Self {
        Self {
            dim,
            degree,
            values: vec![0.0; tensor_len(dim, degree)],
        }
    }

    /// Degree-0 coefficient.
    pub fn scalar(dim: usize, value: f64) -> Self {
        Self {
            dim,
            degree: 0,
            values: vec![value],
        }
    }

    /// Degree-1 coefficient, i.e. a function on the grid.
    pub fn vector(values: &[f64]) -> Self {
        Self {
            dim: values.len(),
            degree: 1,
            values: values.to_vec(),
        }
    }

    /// Degree-1 indicator of point `i`.
    pub fn indicator(dim: usize, i: usize) -> Self {
        let mut values = vec![0.0; dim];
        values[i] = 1.0;
        Self {
            dim,
            degree: 1,
            values,
        }
    }

    /// Builds a tensor from arbitrary dense values, symmetrizing over all
    /// index permutations.
    pub fn from_dense(dim: usize, degree: usize, values: Vec<f64>) -> Result<Self> {
        check_dim("dense tensor length", tensor_len(dim, degree), values.len())?;
        let mut out = Self {
            dim,
            degree,
            values,
        };
        out.symmetrize();
        Ok(out)
    }

    /// Builds a tensor from a function of the multi-index, then symmetrizes.
    pub fn from_fn(dim: usize, degree: usize, f: impl Fn(&[usize]) -> f64) -> Self {
        let mut index = vec![0; degree];
        let values = (0..tensor_len(dim, degree))
            .map(|idx| {
                unflatten(idx, dim, &mut index);
                f(&index)
            })
            .collect();
        let mut out = Self {
            dim,
            degree,
            values,
        };
        out.symmetrize();
        out
    }

    /// Rank-one power `g^{⊗n}` of a degree-1 tensor.
    pub fn tensor_power(g: &[f64], n: usize) -> Self {
        let dim = g.len();
        let mut index = vec![0; n];
        let values = (0..tensor_len(dim, n))
            .map(|idx| {
                unflatten(idx, dim, &mut index);
                index.iter().map(|&i| g[i]).product()
            })
            .collect();
        Self {
            dim,
            degree: n,
            values,
        }
    }

    /// Caller guarantees the values are already permutation invariant.
    pub(crate) fn from_symmetric_values(dim: usize, degree: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), tensor_len(dim, degree));
        Self {
            dim,
            degree,
            values,
        }
    }

    fn symmetrize(&mut self) {
        if self.degree < 2 {
            return;
        }
        let (dim, k) = (self.dim, self.degree);
        let n = self.values.len();
        let mut sums = vec![0.0; n];
        let mut counts = vec![0u32; n];
        let mut canon = vec![0usize; n];
        let mut index = vec![0; k];
        for (idx, c) in canon.iter_mut().enumerate() {
            unflatten(idx, dim, &mut index);
            index.sort_unstable();
            *c = flatten(&index, dim);
            sums[*c] += self.values[idx];
            counts[*c] += 1;
        }
        for (v, &c) in self.values.iter_mut().zip(&canon) {
            *v = sums[c] / counts[c] as f64;
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.degree, "multi-index length must equal the degree");
        self.values[flatten(index, self.dim)]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            degree: self.degree,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Contracts the last slot against `c`, giving a degree `k−1` tensor.
    pub fn contract(&self, c: &[f64]) -> Self {
        assert!(self.degree > 0, "cannot contract a scalar");
        Self {
            dim: self.dim,
            degree: self.degree - 1,
            values: contract_last(&self.values, c),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!((self.dim, self.degree), (other.dim, other.degree));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }
}

pub(crate) fn contract_last(values: &[f64], c: &[f64]) -> Vec<f64> {
    values
        .chunks_exact(c.len())
        .map(|row| row.iter().zip(c).map(|(g, w)| g * w).sum())
        .collect()
}

/// `⟨g, ν^k⟩`.
pub fn pair(g: &SymCoeff, nu: &MeasureVec) -> Result<f64> {
    check_dim("pairing", g.dim, nu.dim())?;
    Ok(pair_weights(&g.values, g.degree, nu.weights()))
}

pub(crate) fn pair_weights(values: &[f64], degree: usize, c: &[f64]) -> f64 {
    let mut current = values.to_vec();
    for _ in 0..degree {
        current = contract_last(&current, c);
    }
    current[0]
}

/// Symmetric tensor product `g ⊗ h`, characterized by
/// `⟨g⊗h, ν^{k+ℓ}⟩ = ⟨g, ν^k⟩⟨h, ν^ℓ⟩`.
pub fn sym_tensor(g: &SymCoeff, h: &SymCoeff) -> Result<SymCoeff> {
    check_dim("symmetric tensor product", g.dim, h.dim)?;
    let (dim, k, l) = (g.dim, g.degree, h.degree);
    let total = k + l;
    if k == 0 {
        return Ok(h.scaled(g.values[0]));
    }
    if l == 0 {
        return Ok(g.scaled(h.values[0]));
    }
    // Each way of choosing which k slots feed g contributes equally.
    let subsets: Vec<u32> = (0u32..1 << total)
        .filter(|mask| mask.count_ones() as usize == k)
        .collect();
    let norm = 1.0 / subsets.len() as f64;
    let mut index = vec![0; total];
    let values = (0..tensor_len(dim, total))
        .map(|idx| {
            unflatten(idx, dim, &mut index);
            let mut acc = 0.0;
            for &mask in &subsets {
                let (mut gi, mut hi) = (0usize, 0usize);
                for (slot, &i) in index.iter().enumerate() {
                    if mask & (1 << slot) != 0 {
                        gi = gi * dim + i;
                    } else {
                        hi = hi * dim + i;
                    }
                }
                acc += g.values[gi] * h.values[hi];
            }
            acc * norm
        })
        .collect();
    Ok(SymCoeff::from_symmetric_values(dim, total, values))
}

/// Polynomial `p(ν) = Σ_k ⟨g_k, ν^k⟩` with `terms[k]` of degree `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyRep {
    dim: usize,
    terms: Vec<SymCoeff>,
}

impl PolyRep {
    pub fn zero(dim: usize) -> Self {
        Self::constant(dim, 0.0)
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Self {
            dim,
            terms: vec![SymCoeff::scalar(dim, value)],
        }
    }

    /// `⟨g, ν⟩`.
    pub fn linear(g: &[f64]) -> Self {
        let dim = g.len();
        Self {
            dim,
            terms: vec![SymCoeff::scalar(dim, 0.0), SymCoeff::vector(g)],
        }
    }

    /// `⟨g, ν⟩^n`, stored as the single rank-one coefficient `g^{⊗n}`.
    pub fn power(g: &[f64], n: usize) -> Self {
        let dim = g.len();
        let mut terms: Vec<SymCoeff> = (0..n).map(|k| SymCoeff::zero(dim, k)).collect();
        terms.push(SymCoeff::tensor_power(g, n));
        Self { dim, terms }
    }

    /// Terms must have degrees `0, 1, …, n` in order.
    pub fn from_terms(terms: Vec<SymCoeff>) -> Result<Self> {
        let dim = terms
            .first()
            .ok_or_else(|| Error::InvalidInput("a polynomial needs a degree-0 term".into()))?
            .dim;
        for (k, t) in terms.iter().enumerate() {
            if t.degree != k {
                return Err(Error::InvalidInput(format!(
                    "term {k} has degree {}, expected {k}",
                    t.degree
                )));
            }
            check_dim("polynomial term", dim, t.dim)?;
        }
        Ok(Self { dim, terms })
    }

    /// Single homogeneous term `⟨g, ν^k⟩`.
    pub fn monomial(g: SymCoeff) -> Self {
        let dim = g.dim;
        let mut terms: Vec<SymCoeff> = (0..g.degree).map(|k| SymCoeff::zero(dim, k)).collect();
        terms.push(g);
        Self { dim, terms }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> &[SymCoeff] {
        &self.terms
    }

    pub fn term(&self, k: usize) -> Option<&SymCoeff> {
        self.terms.get(k)
    }

    /// Highest stored degree, whether or not its coefficient vanishes.
    pub fn stored_degree(&self) -> usize {
        self.terms.len() - 1
    }

    /// Largest `k` with `g_k ≠ 0`; the zero polynomial has degree 0.
    pub fn degree(&self) -> usize {
        self.terms.iter().rposition(|t| !t.is_zero()).unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(SymCoeff::is_zero)
    }

    pub fn eval(&self, nu: &MeasureVec) -> Result<f64> {
        poly_eval(self, nu)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            terms: self.terms.iter().map(|t| t.scaled(factor)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dim("polynomial sum", self.dim, other.dim)?;
        let n = self.terms.len().max(other.terms.len());
        let terms = (0..n)
            .map(|k| {
                let mut t = SymCoeff::zero(self.dim, k);
                for src in [self.terms.get(k), other.terms.get(k)].into_iter().flatten() {
                    t.add_assign(src);
                }
                t
            })
            .collect();
        Ok(Self {
            dim: self.dim,
            terms,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add(&other.scaled(-1.0))
    }

    /// Product `p·q`; rejected when the stored degrees add up past `max_degree`.
    pub fn mul(&self, other: &Self, max_degree: usize) -> Result<Self> {
        check_dim("polynomial product", self.dim, other.dim)?;
        let degree = self.stored_degree() + other.stored_degree();
        if degree > max_degree {
            return Err(Error::DegreeCap {
                degree,
                cap: max_degree,
            });
        }
        let mut terms: Vec<SymCoeff> = (0..=degree).map(|k| SymCoeff::zero(self.dim, k)).collect();
        for a in self.terms.iter().filter(|t| !t.is_zero()) {
            for b in other.terms.iter().filter(|t| !t.is_zero()) {
                let prod = sym_tensor(a, b)?;
                terms[prod.degree].add_assign(&prod);
            }
        }
        Ok(Self {
            dim: self.dim,
            terms,
        })
    }

    /// Drops trailing zero terms (keeps the degree-0 term).
    pub fn trimmed(mut self) -> Self {
        let keep = self.degree() + 1;
        self.terms.truncate(keep);
        self
    }

    /// Pads with zero terms up to `degree`.
    pub fn padded(mut self, degree: usize) -> Self {
        while self.terms.len() <= degree {
            let k = self.terms.len();
            self.terms.push(SymCoeff::zero(self.dim, k));
        }
        self
    }

    /// Concatenation of all coefficient arrays, degree 0 first.
    pub fn to_flat(&self) -> Vec<f64> {
        self.terms.iter().flat_map(|t| t.values.iter().copied()).collect()
    }

    /// Inverse of [`PolyRep::to_flat`]; values must already be symmetric.
    pub(crate) fn from_flat(dim: usize, degree: usize, flat: &[f64]) -> Self {
        let mut offset = 0;
        let terms = (0..=degree)
            .map(|k| {
                let len = tensor_len(dim, k);
                let t = SymCoeff::from_symmetric_values(dim, k, flat[offset..offset + len].to_vec());
                offset += len;
                t
            })
            .collect();
        Self { dim, terms }
    }
}

/// Number of scalars in the flat coefficient layout up to `degree`.
pub fn flat_len(dim: usize, degree: usize) -> usize {
    (0..=degree).map(|k| tensor_len(dim, k)).sum()
}

pub fn poly_eval(p: &PolyRep, nu: &MeasureVec) -> Result<f64> {
    check_dim("polynomial evaluation", p.dim, nu.dim())?;
    let c = nu.weights();
    Ok(p.terms.iter().map(|t| pair_weights(&t.values, t.degree, c)).sum())
}

/// First derivative `∂p(ν)(i) = Σ_k k⟨g_k(i,·), ν^{k−1}⟩`.
pub fn partial(p: &PolyRep, nu: &MeasureVec) -> Result<Vec<f64>> {
    check_dim("derivative", p.dim, nu.dim())?;
    let c = nu.weights();
    let mut grad = vec![0.0; p.dim];
    for t in p.terms.iter().skip(1) {
        let mut v = t.values.clone();
        for _ in 1..t.degree {
            v = contract_last(&v, c);
        }
        let k = t.degree as f64;
        for (g, x) in grad.iter_mut().zip(v) {
            *g += k * x;
        }
    }
    Ok(grad)
}

/// Second derivative `∂²p(ν)(i,j) = Σ_k k(k−1)⟨g_k(i,j,·), ν^{k−2}⟩`.
pub fn partial2(p: &PolyRep, nu: &MeasureVec) -> Result<SymCoeff> {
    check_dim("second derivative", p.dim, nu.dim())?;
    let c = nu.weights();
    let mut hess = SymCoeff::zero(p.dim, 2);
    for t in p.terms.iter().skip(2) {
        let mut v = t.values.clone();
        for _ in 2..t.degree {
            v = contract_last(&v, c);
        }
        let k = t.degree as f64;
        for (h, x) in hess.values.iter_mut().zip(v) {
            *h += k * (k - 1.0) * x;
        }
    }
    Ok(hess)
}
