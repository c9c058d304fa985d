//! Log-space linear-chain lattices.
//!
//! A lattice holds per-position emission scores and a label-bigram transition
//! matrix. The score of a path `y` is `Σ_i emissions[i, y_i] + Σ_i
//! transitions[y_i, y_{i+1}]`. Constraints restrict which labels may appear at
//! each position; an optional [`TransitionMask`] removes structurally illegal
//! bigrams and illegal first/last labels from the hypothesis space.
//!
//! Disallowed choices are given the finite score [`LOG_ZERO`] rather than
//! `-inf`, so that every recursion stays total. Any path carrying at least one
//! such score has probability that underflows to exactly zero.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Stand-in for `ln 0`.
pub const LOG_ZERO: f64 = -1.0e30;

/// Upper bound on the number of paths [`brute_force_log_partition`] will enumerate.
pub const MAX_ENUMERATED_PATHS: u128 = 1_000_000;

fn is_log_zero(x: f64) -> bool {
    x <= LOG_ZERO / 2.0
}

pub fn logsumexp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn logsumexp_view(xs: ArrayView1<'_, f64>) -> f64 {
    logsumexp(xs.iter().copied())
}

/// Structural legality: `allowed[[a, b]]` says whether `b` may follow `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMask {
    pub allowed: Array2<bool>,
    pub start: Vec<bool>,
    pub end: Vec<bool>,
}

impl TransitionMask {
    pub fn permissive(num_labels: usize) -> Self {
        Self {
            allowed: Array2::from_elem((num_labels, num_labels), true),
            start: vec![true; num_labels],
            end: vec![true; num_labels],
        }
    }

    pub fn num_labels(&self) -> usize {
        self.start.len()
    }

    pub fn path_is_legal(&self, path: &[usize]) -> bool {
        match (path.first(), path.last()) {
            (Some(&f), Some(&l)) => {
                self.start[f] && self.end[l] && path.windows(2).all(|w| self.allowed[[w[0], w[1]]])
            }
            _ => true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lattice {
    pub emissions: Array2<f64>,
    pub transitions: Array2<f64>,
    pub mask: Option<TransitionMask>,
}

impl Lattice {
    pub fn new(emissions: Array2<f64>, transitions: Array2<f64>, mask: Option<TransitionMask>) -> Result<Self> {
        let (n, y) = emissions.dim();
        if n == 0 || y == 0 {
            return Err(Error::Shape("lattice needs at least one position and one label".into()));
        }
        if transitions.dim() != (y, y) {
            return Err(Error::Shape(format!(
                "transitions are {:?}, expected ({y}, {y})",
                transitions.dim()
            )));
        }
        if let Some(m) = &mask {
            if m.allowed.dim() != (y, y) || m.start.len() != y || m.end.len() != y {
                return Err(Error::Shape("transition mask does not match label count".into()));
            }
        }
        if emissions.iter().chain(transitions.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Shape("lattice potentials must be finite".into()));
        }
        Ok(Self {
            emissions,
            transitions,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.emissions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.emissions.ncols()
    }

    /// Unmasked score of a complete path.
    pub fn path_score(&self, path: &[usize]) -> f64 {
        let emit: f64 = path.iter().enumerate().map(|(i, &y)| self.emissions[[i, y]]).sum();
        let trans: f64 = path.windows(2).map(|w| self.transitions[[w[0], w[1]]]).sum();
        emit + trans
    }

    /// Emissions with constraint and start/end penalties folded in, and
    /// transitions with masked bigrams set to [`LOG_ZERO`].
    fn effective(&self, c: Option<&Constraint>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (n, ny) = self.emissions.dim();
        let mut unary = self.emissions.clone();
        if let Some(c) = c {
            if c.len() != n || c.num_labels() != ny {
                return Err(Error::Shape(format!(
                    "constraint is {}x{}, lattice is {n}x{ny}",
                    c.len(),
                    c.num_labels()
                )));
            }
            for i in 0..n {
                if !c.allowed[i].iter().any(|&a| a) {
                    return Err(Error::EmptyConstraint { position: i });
                }
                for y in 0..ny {
                    if !c.allowed[i][y] {
                        unary[[i, y]] += LOG_ZERO;
                    }
                }
            }
        }
        let mut pairwise = self.transitions.clone();
        if let Some(m) = &self.mask {
            for y in 0..ny {
                if !m.start[y] {
                    unary[[0, y]] += LOG_ZERO;
                }
                if !m.end[y] {
                    unary[[n - 1, y]] += LOG_ZERO;
                }
            }
            for ((a, b), v) in pairwise.indexed_iter_mut() {
                if !m.allowed[[a, b]] {
                    *v = LOG_ZERO;
                }
            }
        }
        Ok((unary, pairwise))
    }
}

/// Per-position allowed label sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraint {
    allowed: Vec<Vec<bool>>,
}

impl Constraint {
    pub fn permissive(len: usize, num_labels: usize) -> Self {
        Self {
            allowed: vec![vec![true; num_labels]; len],
        }
    }

    pub fn from_masks(allowed: Vec<Vec<bool>>) -> Result<Self> {
        let ny = allowed.first().map_or(0, Vec::len);
        if allowed.iter().any(|a| a.len() != ny) {
            return Err(Error::Shape("ragged constraint".into()));
        }
        Ok(Self { allowed })
    }

    pub fn from_sets(sets: &[Vec<usize>], num_labels: usize) -> Result<Self> {
        let mut allowed = vec![vec![false; num_labels]; sets.len()];
        for (row, set) in allowed.iter_mut().zip(sets) {
            for &y in set {
                if y >= num_labels {
                    return Err(Error::Shape(format!("label {y} out of range")));
                }
                row[y] = true;
            }
        }
        Ok(Self { allowed })
    }

    /// Every position pinned to the given path.
    pub fn from_path(path: &[usize], num_labels: usize) -> Result<Self> {
        let sets: Vec<Vec<usize>> = path.iter().map(|&y| vec![y]).collect();
        Self::from_sets(&sets, num_labels)
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.allowed.first().map_or(0, Vec::len)
    }

    pub fn allows(&self, position: usize, label: usize) -> bool {
        self.allowed[position][label]
    }

    pub fn allowed_at(&self, position: usize) -> impl Iterator<Item = usize> + '_ {
        self.allowed[position]
            .iter()
            .enumerate()
            .filter_map(|(y, &a)| a.then_some(y))
    }

    pub fn set_size(&self, position: usize) -> usize {
        self.allowed[position].iter().filter(|&&a| a).count()
    }

    /// The single allowed label at `position`, if the position is pinned.
    pub fn pinned(&self, position: usize) -> Option<usize> {
        let mut it = self.allowed_at(position);
        match (it.next(), it.next()) {
            (Some(y), None) => Some(y),
            _ => None,
        }
    }

    /// `ln Π_i |A_i|`, usable when the product overflows.
    pub fn log_num_paths(&self) -> f64 {
        (0..self.len()).map(|i| (self.set_size(i) as f64).ln()).sum()
    }
}

/// `Π_i |A_i|`, saturating at `u128::MAX`.
pub fn count_compatible_paths(c: &Constraint) -> u128 {
    (0..c.len()).fold(1u128, |acc, i| acc.saturating_mul(c.set_size(i) as u128))
}

/// Forward and backward variables of a (possibly constrained) lattice.
///
/// `log_alpha[i, y]` includes the emission at `i`; `log_beta[i, y]` covers
/// positions strictly after `i`.
#[derive(Debug, Clone)]
pub struct LatticeResult {
    pub log_alpha: Array2<f64>,
    pub log_beta: Array2<f64>,
    pub log_z: f64,
    unary: Array2<f64>,
    pairwise: Array2<f64>,
}

pub fn forward_backward(l: &Lattice, c: Option<&Constraint>) -> Result<LatticeResult> {
    let (unary, pairwise) = l.effective(c)?;
    let (n, ny) = unary.dim();
    let mut log_alpha = Array2::zeros((n, ny));
    let mut log_beta = Array2::zeros((n, ny));
    log_alpha.row_mut(0).assign(&unary.row(0));
    let mut buf = vec![0.0; ny];
    for i in 1..n {
        for y in 0..ny {
            for (yp, b) in buf.iter_mut().enumerate() {
                *b = log_alpha[[i - 1, yp]] + pairwise[[yp, y]];
            }
            log_alpha[[i, y]] = unary[[i, y]] + logsumexp(buf.iter().copied());
        }
    }
    for i in (0..n - 1).rev() {
        for y in 0..ny {
            for (yn, b) in buf.iter_mut().enumerate() {
                *b = pairwise[[y, yn]] + unary[[i + 1, yn]] + log_beta[[i + 1, yn]];
            }
            log_beta[[i, y]] = logsumexp(buf.iter().copied());
        }
    }
    let log_z = logsumexp_view(log_alpha.row(n - 1));
    if is_log_zero(log_z) {
        return Err(Error::Infeasible);
    }
    Ok(LatticeResult {
        log_alpha,
        log_beta,
        log_z,
        unary,
        pairwise,
    })
}

impl LatticeResult {
    pub fn len(&self) -> usize {
        self.log_alpha.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.log_alpha.ncols()
    }

    /// `log Z` recomputed from the backward pass.
    pub fn log_z_backward(&self) -> f64 {
        logsumexp(
            (0..self.num_labels()).map(|y| self.log_beta[[0, y]] + self.unary[[0, y]]),
        )
    }

    /// `Σ_i p(y_i = a, y_{i+1} = b)` for every bigram.
    pub fn pair_marginal_sums(&self) -> Array2<f64> {
        let (n, ny) = self.log_alpha.dim();
        let mut out = Array2::zeros((ny, ny));
        for i in 0..n.saturating_sub(1) {
            for a in 0..ny {
                let la = self.log_alpha[[i, a]];
                if is_log_zero(la) {
                    continue;
                }
                for b in 0..ny {
                    let v = la + self.pairwise[[a, b]] + self.unary[[i + 1, b]] + self.log_beta[[i + 1, b]]
                        - self.log_z;
                    out[[a, b]] += v.exp();
                }
            }
        }
        out
    }

    /// Value and gradient of `E[F]` for the additive path functional
    /// `F(y) = Σ_i weights[i, y_i]`.
    ///
    /// The gradient is taken with respect to the emission scores (first
    /// matrix) and the transition scores (second matrix). It uses
    /// `∂E[F]/∂θ = Cov(F, ∂score/∂θ)` with conditional expectations of the
    /// prefix and suffix parts of `F` carried through normalised forward and
    /// backward recursions.
    pub fn expectation_gradient(&self, weights: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
        let (n, ny) = self.log_alpha.dim();
        assert_eq!(weights.dim(), (n, ny), "weight matrix shape");
        let marg = token_marginals(self);

        // prefix[i, y] = E[Σ_{k≤i} w_k | y_i = y], suffix[i, y] = E[Σ_{k>i} w_k | y_i = y]
        let mut prefix = Array2::<f64>::zeros((n, ny));
        let mut suffix = Array2::<f64>::zeros((n, ny));
        prefix.row_mut(0).assign(&weights.row(0));
        let mut logits = vec![0.0; ny];
        for i in 1..n {
            for y in 0..ny {
                for (yp, l) in logits.iter_mut().enumerate() {
                    *l = self.log_alpha[[i - 1, yp]] + self.pairwise[[yp, y]];
                }
                let norm = logsumexp(logits.iter().copied());
                let mut acc = 0.0;
                for (yp, l) in logits.iter().enumerate() {
                    acc += (l - norm).exp() * prefix[[i - 1, yp]];
                }
                prefix[[i, y]] = weights[[i, y]] + acc;
            }
        }
        for i in (0..n - 1).rev() {
            for y in 0..ny {
                for (yn, l) in logits.iter_mut().enumerate() {
                    *l = self.pairwise[[y, yn]] + self.unary[[i + 1, yn]] + self.log_beta[[i + 1, yn]];
                }
                let norm = logsumexp(logits.iter().copied());
                let mut acc = 0.0;
                for (yn, l) in logits.iter().enumerate() {
                    acc += (l - norm).exp() * (weights[[i + 1, yn]] + suffix[[i + 1, yn]]);
                }
                suffix[[i, y]] = acc;
            }
        }

        let expected: f64 = (marg.clone() * weights).sum();
        let mut grad_unary = Array2::zeros((n, ny));
        for i in 0..n {
            for y in 0..ny {
                let p = marg[[i, y]];
                if p > 0.0 {
                    grad_unary[[i, y]] = p * (prefix[[i, y]] + suffix[[i, y]] - expected);
                }
            }
        }
        let mut grad_pair = Array2::zeros((ny, ny));
        for i in 0..n.saturating_sub(1) {
            for a in 0..ny {
                let la = self.log_alpha[[i, a]];
                if is_log_zero(la) {
                    continue;
                }
                for b in 0..ny {
                    let p = (la + self.pairwise[[a, b]] + self.unary[[i + 1, b]] + self.log_beta[[i + 1, b]]
                        - self.log_z)
                        .exp();
                    if p > 0.0 {
                        let cond = prefix[[i, a]] + weights[[i + 1, b]] + suffix[[i + 1, b]];
                        grad_pair[[a, b]] += p * (cond - expected);
                    }
                }
            }
        }
        (expected, grad_unary, grad_pair)
    }
}

/// `p(y_i = y)` for every position and label.
pub fn token_marginals(res: &LatticeResult) -> Array2<f64> {
    let mut m = &res.log_alpha + &res.log_beta;
    m.mapv_inplace(|v| (v - res.log_z).exp());
    m
}

/// Highest-scoring allowed path. Ties go to the lowest label index.
pub fn viterbi(l: &Lattice, c: Option<&Constraint>) -> Result<(Vec<usize>, f64)> {
    let (unary, pairwise) = l.effective(c)?;
    let (n, ny) = unary.dim();
    let mut delta: Array1<f64> = unary.row(0).to_owned();
    let mut back = Array2::<usize>::zeros((n, ny));
    let mut next = Array1::<f64>::zeros(ny);
    for i in 1..n {
        for y in 0..ny {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for yp in 0..ny {
                let v = delta[yp] + pairwise[[yp, y]];
                if v > best {
                    best = v;
                    arg = yp;
                }
            }
            next[y] = best + unary[[i, y]];
            back[[i, y]] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (y, &v) in delta.iter().enumerate() {
        if v > best {
            best = v;
            last = y;
        }
    }
    if is_log_zero(best) {
        return Err(Error::Infeasible);
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = back[[i, path[i]]];
    }
    Ok((path, best))
}

/// Enumerates every allowed path. Use only as a reference on tiny lattices.
pub fn for_each_path(l: &Lattice, c: Option<&Constraint>, mut f: impl FnMut(&[usize], f64)) -> Result<()> {
    let (n, ny) = l.emissions.dim();
    let c = match c {
        Some(c) => c.clone(),
        None => Constraint::permissive(n, ny),
    };
    if c.len() != n || c.num_labels() != ny {
        return Err(Error::Shape("constraint does not match lattice".into()));
    }
    let choices: Vec<Vec<usize>> = (0..n).map(|i| c.allowed_at(i).collect()).collect();
    if let Some(i) = choices.iter().position(Vec::is_empty) {
        return Err(Error::EmptyConstraint { position: i });
    }
    if count_compatible_paths(&c) > MAX_ENUMERATED_PATHS {
        return Err(Error::StateSpaceTooLarge { labels: ny, len: n });
    }
    let mut odometer = vec![0usize; n];
    let mut path = vec![0usize; n];
    loop {
        for i in 0..n {
            path[i] = choices[i][odometer[i]];
        }
        if l.mask.as_ref().is_none_or(|m| m.path_is_legal(&path)) {
            f(&path, l.path_score(&path));
        }
        let mut k = 0;
        loop {
            if k == n {
                return Ok(());
            }
            odometer[k] += 1;
            if odometer[k] < choices[k].len() {
                break;
            }
            odometer[k] = 0;
            k += 1;
        }
    }
}

pub fn brute_force_log_partition(l: &Lattice, c: Option<&Constraint>) -> Result<f64> {
    let mut scores = Vec::new();
    for_each_path(l, c, |_, s| scores.push(s))?;
    if scores.is_empty() {
        return Err(Error::Infeasible);
    }
    Ok(logsumexp(scores.iter().copied()))
}
