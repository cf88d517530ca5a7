//! Taylor matrix exponentials with scaling and squaring, directional
//! derivatives of exponentials through block-triangular auxiliary matrices,
//! and exponential actions on vectors.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::linalg::{
    column_sums, drop_small, is_finite, matmul, matmul_acc, norm1, CMat, CVec, Csr, Direction,
    Elem, I,
};

/// Hard cap on Taylor terms after scaling.
pub const MAX_TERMS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpOptions {
    /// Series truncation tolerance relative to the accumulated sum.
    pub tol: f64,
    /// Entries with smaller magnitude are zeroed after every product.
    pub drop: f64,
    pub max_squarings: u32,
}

impl Default for ExpOptions {
    fn default() -> Self {
        ExpOptions {
            tol: 1e-14,
            drop: 1e-14,
            max_squarings: 64,
        }
    }
}

impl ExpOptions {
    fn validate(&self) -> Result<(), ExpError> {
        if !(self.tol > 0.0) || !(self.drop >= 0.0) {
            return Err(ExpError::InvalidOptions);
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpError {
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("Taylor series did not converge within {0} terms")]
    NoConvergence(usize),
    #[error("scaling needs {needed} squarings, limit is {max}")]
    TooManySquarings { needed: u32, max: u32 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid exponential options")]
    InvalidOptions,
}

/// Smallest `m` with `norm / 2^m <= 1`.
pub(crate) fn squarings_for(norm: f64, opts: &ExpOptions) -> Result<u32, ExpError> {
    if !norm.is_finite() {
        return Err(ExpError::NonFinite);
    }
    let mut m = 0u32;
    let mut scaled = norm;
    while scaled > 1.0 {
        m += 1;
        scaled = norm / 2f64.powi(m as i32);
        if m > opts.max_squarings {
            return Err(ExpError::TooManySquarings {
                needed: m,
                max: opts.max_squarings,
            });
        }
    }
    Ok(m)
}

/// 1-norm of the block-triangular matrix with `a` on the diagonal and the
/// given directions above it.
pub(crate) fn block_norm<T: Elem>(a: &DMatrix<T>, dirs: &[Direction<T>]) -> f64 {
    let base = column_sums(a);
    let mut norm = base.iter().cloned().fold(0.0, f64::max);
    for d in dirs {
        for (x, y) in base.iter().zip(d.column_sums()) {
            norm = norm.max(x + y);
        }
    }
    norm
}

/// Scaled Taylor data for `exp(a)`: the Taylor terms of `exp(a / 2^m)` and
/// every squaring level. The last level is `exp(a)`.
#[derive(Clone, Debug)]
pub(crate) struct ScaledExp<T: Elem> {
    pub squarings: u32,
    pub scaled: DMatrix<T>,
    pub terms: Vec<DMatrix<T>>,
    pub levels: Vec<DMatrix<T>>,
}

impl<T: Elem> ScaledExp<T> {
    pub fn result(&self) -> &DMatrix<T> {
        self.levels.last().expect("at least one level")
    }

    pub fn into_result(mut self) -> DMatrix<T> {
        self.levels.pop().expect("at least one level")
    }
}

fn converged(term: f64, sum: f64, tol: f64) -> bool {
    term == 0.0 || term <= tol * sum
}

pub(crate) fn scaled_exp<T: Elem>(
    a: &DMatrix<T>,
    squarings: u32,
    opts: &ExpOptions,
) -> Result<ScaledExp<T>, ExpError> {
    opts.validate()?;
    let n = a.nrows();
    if a.ncols() != n {
        return Err(ExpError::DimensionMismatch {
            expected: n,
            found: a.ncols(),
        });
    }
    if !is_finite(a) {
        return Err(ExpError::NonFinite);
    }
    let scaled = a * T::from_real(0.5f64.powi(squarings as i32));
    let mut terms = vec![DMatrix::<T>::identity(n, n)];
    let mut sum = DMatrix::<T>::identity(n, n);
    let mut t = 1;
    loop {
        if t > MAX_TERMS {
            return Err(ExpError::NoConvergence(MAX_TERMS));
        }
        let mut next = matmul(&scaled, &terms[t - 1]);
        next *= T::from_real(1.0 / t as f64);
        drop_small(&mut next, opts.drop);
        sum += &next;
        let done = converged(norm1(&next), norm1(&sum), opts.tol);
        terms.push(next);
        if done {
            break;
        }
        t += 1;
    }
    if !is_finite(&sum) {
        return Err(ExpError::NonFinite);
    }
    let mut levels = Vec::with_capacity(squarings as usize + 1);
    levels.push(sum);
    for _ in 0..squarings {
        let prev = levels.last().unwrap();
        let mut sq = matmul(prev, prev);
        drop_small(&mut sq, opts.drop);
        levels.push(sq);
    }
    Ok(ScaledExp {
        squarings,
        scaled,
        terms,
        levels,
    })
}

/// First and second directional derivatives of `exp(a)`.
#[derive(Clone, Debug)]
pub(crate) struct BlockDerivatives<T: Elem> {
    /// `first[i]` is block (1,2) of `exp([[a, d_i], [0, a]])`.
    pub first: Vec<DMatrix<T>>,
    /// `second[p]` is block (1,3) of `exp([[a, d_i, 0], [0, a, d_j], [0, 0, a]])`
    /// for `pairs[p] = (i, j)`.
    pub second: Vec<DMatrix<T>>,
}

/// Derivative blocks sharing the scaling of `base`. Directions are given
/// unscaled, in the same units as the exponent.
pub(crate) fn block_derivatives<T: Elem>(
    base: &ScaledExp<T>,
    dirs: &[Direction<T>],
    pairs: &[(usize, usize)],
    opts: &ExpOptions,
) -> Result<BlockDerivatives<T>, ExpError> {
    let n = base.scaled.nrows();
    let s = 0.5f64.powi(base.squarings as i32);
    let dirs: Vec<Direction<T>> = dirs.iter().map(|d| d.scaled(s)).collect();
    let zeros = || DMatrix::<T>::zeros(n, n);

    let mut d_term: Vec<DMatrix<T>> = (0..dirs.len()).map(|_| zeros()).collect();
    let mut d_sum: Vec<DMatrix<T>> = (0..dirs.len()).map(|_| zeros()).collect();
    let mut e_term: Vec<DMatrix<T>> = (0..pairs.len()).map(|_| zeros()).collect();
    let mut e_sum: Vec<DMatrix<T>> = (0..pairs.len()).map(|_| zeros()).collect();

    let mut t = 1;
    loop {
        if t > MAX_TERMS {
            return Err(ExpError::NoConvergence(MAX_TERMS));
        }
        let inv = T::from_real(1.0 / t as f64);
        let mut done = t >= base.terms.len();
        let mut e_next = Vec::with_capacity(pairs.len());
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let mut next = matmul(&base.scaled, &e_term[p]);
            dirs[i].mul_acc(&d_term[j], &mut next);
            next *= inv;
            drop_small(&mut next, opts.drop);
            e_sum[p] += &next;
            done &= converged(norm1(&next), norm1(&e_sum[p]), opts.tol);
            e_next.push(next);
        }
        let mut d_next = Vec::with_capacity(dirs.len());
        for (i, d) in dirs.iter().enumerate() {
            let mut next = matmul(&base.scaled, &d_term[i]);
            if let Some(p) = base.terms.get(t - 1) {
                d.mul_acc(p, &mut next);
            }
            next *= inv;
            drop_small(&mut next, opts.drop);
            d_sum[i] += &next;
            done &= converged(norm1(&next), norm1(&d_sum[i]), opts.tol);
            d_next.push(next);
        }
        e_term = e_next;
        d_term = d_next;
        if done {
            break;
        }
        t += 1;
    }

    for level in 0..base.squarings as usize {
        let p = &base.levels[level];
        let mut e_new = Vec::with_capacity(pairs.len());
        for (q, &(i, j)) in pairs.iter().enumerate() {
            let mut e = matmul(p, &e_sum[q]);
            matmul_acc(&mut e, T::one(), &d_sum[i], &d_sum[j]);
            matmul_acc(&mut e, T::one(), &e_sum[q], p);
            drop_small(&mut e, opts.drop);
            e_new.push(e);
        }
        let mut d_new = Vec::with_capacity(dirs.len());
        for d in &d_sum {
            let mut x = matmul(p, d);
            matmul_acc(&mut x, T::one(), d, p);
            drop_small(&mut x, opts.drop);
            d_new.push(x);
        }
        e_sum = e_new;
        d_sum = d_new;
    }
    if d_sum.iter().chain(e_sum.iter()).any(|m| !is_finite(m)) {
        return Err(ExpError::NonFinite);
    }
    Ok(BlockDerivatives {
        first: d_sum,
        second: e_sum,
    })
}

fn check_square(a: &CMat, n: usize) -> Result<(), ExpError> {
    for d in [a.nrows(), a.ncols()] {
        if d != n {
            return Err(ExpError::DimensionMismatch {
                expected: n,
                found: d,
            });
        }
    }
    Ok(())
}

/// `e^A` by scaling and squaring of a truncated Taylor series.
pub fn expm(a: &CMat, opts: &ExpOptions) -> Result<CMat, ExpError> {
    check_square(a, a.nrows())?;
    if !is_finite(a) {
        return Err(ExpError::NonFinite);
    }
    let m = squarings_for(norm1(a), opts)?;
    Ok(scaled_exp(a, m, opts)?.into_result())
}

/// Stacked block-bidiagonal operator `[[A, B1, 0], [0, A, B2], [0, 0, A]]`
/// applied to vectors, stored sparsely.
struct StackedOperator {
    a: Csr<Complex64>,
    b: Vec<Csr<Complex64>>,
}

impl StackedOperator {
    fn apply(&self, x: &[CVec]) -> Vec<CVec> {
        let nb = x.len();
        (0..nb)
            .map(|r| {
                let mut y = csr_mul_vec(&self.a, &x[r]);
                if r + 1 < nb {
                    y += csr_mul_vec(&self.b[r], &x[r + 1]);
                }
                y
            })
            .collect()
    }

    fn norm1(&self, blocks: usize) -> f64 {
        let a = self.a.column_sums();
        let mut norm = a.iter().cloned().fold(0.0, f64::max);
        for b in self.b.iter().take(blocks - 1) {
            for (x, y) in a.iter().zip(b.column_sums()) {
                norm = norm.max(x + y);
            }
        }
        norm
    }
}

fn csr_mul_vec(a: &Csr<Complex64>, v: &CVec) -> CVec {
    let mut out = CVec::zeros(a.n_rows);
    for i in 0..a.n_rows {
        let mut acc = Complex64::new(0.0, 0.0);
        for p in a.row_ptr[i]..a.row_ptr[i + 1] {
            acc += a.vals[p] * v[a.cols[p]];
        }
        out[i] = acc;
    }
    out
}

fn vec_norm1(x: &[CVec]) -> f64 {
    x.iter().flat_map(|v| v.iter()).map(|z| z.norm()).sum()
}

/// `exp(op) x` by repeated Taylor steps on a scaled operator.
fn stacked_action(
    op: &StackedOperator,
    mut x: Vec<CVec>,
    opts: &ExpOptions,
) -> Result<Vec<CVec>, ExpError> {
    opts.validate()?;
    let norm = op.norm1(x.len());
    if !norm.is_finite() || x.iter().any(|v| v.iter().any(|z| !z.is_finite())) {
        return Err(ExpError::NonFinite);
    }
    let steps = norm.ceil().max(1.0) as usize;
    let inv_steps = Complex64::new(1.0 / steps as f64, 0.0);
    for _ in 0..steps {
        let mut term = x.clone();
        let mut t = 1;
        loop {
            if t > MAX_TERMS {
                return Err(ExpError::NoConvergence(MAX_TERMS));
            }
            let scale = inv_steps / t as f64;
            term = op
                .apply(&term)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            for (xi, ti) in x.iter_mut().zip(&term) {
                *xi += ti;
            }
            if converged(vec_norm1(&term), vec_norm1(&x), opts.tol) {
                break;
            }
            t += 1;
        }
    }
    Ok(x)
}

/// `e^A v` without forming `e^A`.
pub fn expm_action(a: &CMat, v: &CVec, opts: &ExpOptions) -> Result<CVec, ExpError> {
    check_square(a, v.len())?;
    let op = StackedOperator {
        a: Csr::from_dense(a),
        b: Vec::new(),
    };
    Ok(stacked_action(&op, vec![v.clone()], opts)?.remove(0))
}

/// `P = e^{-i H dt}` and its derivative `D` along `Hk`.
pub fn prop_derivative(
    h: &CMat,
    hk: &CMat,
    dt: f64,
    opts: &ExpOptions,
) -> Result<(CMat, CMat), ExpError> {
    let n = h.nrows();
    check_square(h, n)?;
    check_square(hk, n)?;
    let s = -I * dt;
    let a = h * s;
    let dirs = [Direction::Dense(hk * s)];
    let m = squarings_for(block_norm(&a, &dirs), opts)?;
    let base = scaled_exp(&a, m, opts)?;
    let mut d = block_derivatives(&base, &dirs, &[], opts)?;
    Ok((base.into_result(), d.first.remove(0)))
}

/// Propagator with first and mixed second derivatives.
#[derive(Clone, Debug)]
pub struct SecondDerivative {
    pub p: CMat,
    pub dk: CMat,
    pub dj: CMat,
    /// Mixed second derivative `d^2 P / dc_k dc_j`.
    pub d2: CMat,
    /// Block (1,3) of the three-block exponential with `Hk` above `Hj`.
    pub block13: CMat,
}

/// Propagator derivatives from the three-block auxiliary exponential.
///
/// `d2` is the sum of the (1,3) blocks for both orderings of the directions,
/// which is the exact mixed derivative. For `Hk = Hj` it equals twice
/// `block13`.
pub fn prop_second_derivative(
    h: &CMat,
    hk: &CMat,
    hj: &CMat,
    dt: f64,
    opts: &ExpOptions,
) -> Result<SecondDerivative, ExpError> {
    let n = h.nrows();
    check_square(h, n)?;
    check_square(hk, n)?;
    check_square(hj, n)?;
    let s = -I * dt;
    let a = h * s;
    let dirs = [Direction::Dense(hk * s), Direction::Dense(hj * s)];
    let m = squarings_for(block_norm(&a, &dirs), opts)?;
    let base = scaled_exp(&a, m, opts)?;
    let mut d = block_derivatives(&base, &dirs, &[(0, 1), (1, 0)], opts)?;
    let e_jk = d.second.pop().unwrap();
    let e_kj = d.second.pop().unwrap();
    let dj = d.first.pop().unwrap();
    let dk = d.first.pop().unwrap();
    Ok(SecondDerivative {
        p: base.into_result(),
        dk,
        dj,
        d2: &e_kj + e_jk,
        block13: e_kj,
    })
}

/// Block-triangular auxiliary matrix `t * [[A, B1, 0], [0, A, B2], [0, 0, A]]`
/// (two blocks when `b2` is absent).
#[derive(Clone, Debug)]
pub struct AugmentedBlocks {
    pub a: CMat,
    pub b1: CMat,
    pub b2: Option<CMat>,
    pub t: Complex64,
}

impl AugmentedBlocks {
    pub fn block_count(&self) -> usize {
        if self.b2.is_some() {
            3
        } else {
            2
        }
    }
}

/// Applies the auxiliary exponential to a stacked vector holding `v` in the
/// bottom slot and returns the top slot: `D v` for two blocks, block (1,3)
/// times `v` for three.
pub fn aux_action(blocks: &AugmentedBlocks, v: &CVec, opts: &ExpOptions) -> Result<CVec, ExpError> {
    let n = v.len();
    check_square(&blocks.a, n)?;
    check_square(&blocks.b1, n)?;
    if let Some(b2) = &blocks.b2 {
        check_square(b2, n)?;
    }
    let sparse = |m: &CMat| Csr::from_dense(&(m * blocks.t));
    let mut b = vec![sparse(&blocks.b1)];
    if let Some(b2) = &blocks.b2 {
        b.push(sparse(b2));
    }
    let op = StackedOperator {
        a: sparse(&blocks.a),
        b,
    };
    let nb = blocks.block_count();
    let mut x = vec![CVec::zeros(n); nb];
    x[nb - 1] = v.clone();
    Ok(stacked_action(&op, x, opts)?.remove(0))
}
