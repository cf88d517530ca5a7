//! Dense and structured matrix helpers shared by the numerical modules.
//!
//! All matrices are column-major `nalgebra` matrices. Products go through
//! `matrixmultiply` directly on the underlying buffers.

use nalgebra::{ComplexField, DMatrix, DVector};
use num_complex::Complex64;

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;
pub type RMat = DMatrix<f64>;

pub const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Scalar types the propagation engine runs on.
pub trait Elem: ComplexField<RealField = f64> + Copy + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c`
    fn gemm(alpha: Self, a: &DMatrix<Self>, b: &DMatrix<Self>, beta: Self, c: &mut DMatrix<Self>);
    /// Converts a complex matrix, failing when it cannot be represented.
    fn from_complex_matrix(m: &CMat) -> Option<DMatrix<Self>>;
    fn to_complex(self) -> Complex64;
    /// `m * v` for a complex vector.
    fn apply(m: &DMatrix<Self>, v: &CVec) -> CVec;
    /// `m^dagger * v` for a complex vector.
    fn apply_adjoint(m: &DMatrix<Self>, v: &CVec) -> CVec;
    /// Splits the outer product `u v^dagger` into rank-one terms over `Self`,
    /// each tagged with the complex weight it carries.
    fn outer_parts(u: &CVec, v: &CVec) -> Vec<(LowRank<Self>, Complex64)>;
}

impl Elem for f64 {
    fn gemm(alpha: f64, a: &RMat, b: &RMat, beta: f64, c: &mut RMat) {
        let (m, k) = a.shape();
        let n = b.ncols();
        assert_eq!(b.nrows(), k);
        assert_eq!(c.shape(), (m, n));
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                1,
                m as isize,
                b.as_ptr(),
                1,
                k as isize,
                beta,
                c.as_mut_ptr(),
                1,
                m as isize,
            );
        }
    }

    fn from_complex_matrix(m: &CMat) -> Option<RMat> {
        let scale = m.iter().fold(0.0f64, |a, z| a.max(z.norm()));
        let tol = 1e-14 * scale.max(f64::MIN_POSITIVE);
        if m.iter().any(|z| z.im.abs() > tol) {
            return None;
        }
        Some(m.map(|z| z.re))
    }

    fn to_complex(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }

    fn apply(m: &RMat, v: &CVec) -> CVec {
        let re = m * v.map(|z| z.re);
        let im = m * v.map(|z| z.im);
        CVec::from_fn(v.len(), |i, _| Complex64::new(re[i], im[i]))
    }

    fn apply_adjoint(m: &RMat, v: &CVec) -> CVec {
        let re = m.tr_mul(&v.map(|z| z.re));
        let im = m.tr_mul(&v.map(|z| z.im));
        CVec::from_fn(v.len(), |i, _| Complex64::new(re[i], im[i]))
    }

    fn outer_parts(u: &CVec, v: &CVec) -> Vec<(LowRank<f64>, Complex64)> {
        // u v^dagger = (ur + i ui)(vr - i vi)^T
        let ur = u.map(|z| z.re);
        let ui = u.map(|z| z.im);
        let vr = v.map(|z| z.re);
        let vi = v.map(|z| z.im);
        let re = LowRank {
            terms: vec![(ur.clone(), vr.clone()), (ui.clone(), vi.clone())],
        };
        let im = LowRank {
            terms: vec![(ui, vr), (-ur, vi)],
        };
        vec![(re, Complex64::new(1.0, 0.0)), (im, I)]
    }
}

impl Elem for Complex64 {
    fn gemm(alpha: Complex64, a: &CMat, b: &CMat, beta: Complex64, c: &mut CMat) {
        let (m, k) = a.shape();
        let n = b.ncols();
        assert_eq!(b.nrows(), k);
        assert_eq!(c.shape(), (m, n));
        unsafe {
            matrixmultiply::zgemm(
                matrixmultiply::CGemmOption::Standard,
                matrixmultiply::CGemmOption::Standard,
                m,
                k,
                n,
                [alpha.re, alpha.im],
                a.as_ptr() as *const [f64; 2],
                1,
                m as isize,
                b.as_ptr() as *const [f64; 2],
                1,
                k as isize,
                [beta.re, beta.im],
                c.as_mut_ptr() as *mut [f64; 2],
                1,
                m as isize,
            );
        }
    }

    fn from_complex_matrix(m: &CMat) -> Option<CMat> {
        Some(m.clone())
    }

    fn to_complex(self) -> Complex64 {
        self
    }

    fn apply(m: &CMat, v: &CVec) -> CVec {
        m * v
    }

    fn apply_adjoint(m: &CMat, v: &CVec) -> CVec {
        m.ad_mul(v)
    }

    fn outer_parts(u: &CVec, v: &CVec) -> Vec<(LowRank<Complex64>, Complex64)> {
        vec![(
            LowRank {
                terms: vec![(u.clone(), v.map(|z| z.conj()))],
            },
            Complex64::new(1.0, 0.0),
        )]
    }
}

/// `a * b`
pub fn matmul<T: Elem>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let mut c = DMatrix::zeros(a.nrows(), b.ncols());
    T::gemm(T::one(), a, b, T::zero(), &mut c);
    c
}

/// `c += alpha * a * b`
pub fn matmul_acc<T: Elem>(c: &mut DMatrix<T>, alpha: T, a: &DMatrix<T>, b: &DMatrix<T>) {
    T::gemm(alpha, a, b, T::one(), c);
}

/// Induced 1-norm (largest absolute column sum).
pub fn norm1<T: Elem>(a: &DMatrix<T>) -> f64 {
    column_sums(a).into_iter().fold(0.0, f64::max)
}

pub fn column_sums<T: Elem>(a: &DMatrix<T>) -> Vec<f64> {
    a.column_iter()
        .map(|c| c.iter().map(|z| z.modulus()).sum())
        .collect()
}

/// Largest absolute entry.
pub fn max_abs<T: Elem>(a: &DMatrix<T>) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.modulus()))
}

/// Zeroes every entry whose modulus is below `threshold`.
pub fn drop_small<T: Elem>(a: &mut DMatrix<T>, threshold: f64) {
    if threshold <= 0.0 {
        return;
    }
    for z in a.iter_mut() {
        if z.modulus() < threshold {
            *z = T::zero();
        }
    }
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn commutator<T: Elem>(a: &DMatrix<T>, b: &DMatrix<T>) -> DMatrix<T> {
    let mut c = matmul(a, b);
    T::gemm(-T::one(), b, a, T::one(), &mut c);
    c
}

pub fn is_finite<T: Elem>(a: &DMatrix<T>) -> bool {
    a.iter().all(|z| z.to_complex().is_finite())
}

/// `tr(a * b)` without forming the product.
pub fn trace_product<T: Elem>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    let n = a.nrows();
    let mut acc = T::zero();
    for i in 0..n {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub fn cvec_norm(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `u^dagger v`
pub fn cdot(u: &CVec, v: &CVec) -> Complex64 {
    u.iter().zip(v.iter()).map(|(a, b)| a.conj() * b).sum()
}

/// Row-compressed sparse matrix used for control directions.
#[derive(Clone, Debug)]
pub struct Csr<T> {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<T>,
}

impl<T: Elem> Csr<T> {
    pub fn from_dense(a: &DMatrix<T>) -> Self {
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                let z = a[(i, j)];
                if z != T::zero() {
                    cols.push(j);
                    vals.push(z);
                }
            }
            row_ptr.push(cols.len());
        }
        Csr {
            n_rows: a.nrows(),
            n_cols: a.ncols(),
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let mut a = DMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                a[(i, self.cols[p])] = self.vals[p];
            }
        }
        a
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn scaled(&self, s: f64) -> Self {
        let s = T::from_real(s);
        Csr {
            vals: self.vals.iter().map(|&v| v * s).collect(),
            ..self.clone()
        }
    }

    /// `c += self * x`
    pub fn mul_acc(&self, x: &DMatrix<T>, c: &mut DMatrix<T>) {
        for col in 0..x.ncols() {
            let xc = x.column(col);
            let mut cc = c.column_mut(col);
            for i in 0..self.n_rows {
                let mut acc = T::zero();
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.vals[p] * xc[self.cols[p]];
                }
                cc[i] += acc;
            }
        }
    }

    /// `tr(self * x)`
    pub fn trace_with(&self, x: &DMatrix<T>) -> T {
        let mut acc = T::zero();
        for i in 0..self.n_rows {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[p] * x[(self.cols[p], i)];
            }
        }
        acc
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_cols];
        for (c, v) in self.cols.iter().zip(&self.vals) {
            s[*c] += v.modulus();
        }
        s
    }
}

/// Sum of outer products `sum_l u_l v_l^T` (no conjugation).
#[derive(Clone, Debug)]
pub struct LowRank<T: nalgebra::Scalar> {
    pub terms: Vec<(DVector<T>, DVector<T>)>,
}

impl<T: Elem> LowRank<T> {
    pub fn dim(&self) -> usize {
        self.terms.first().map_or(0, |t| t.0.len())
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        let n = self.dim();
        let mut a = DMatrix::zeros(n, n);
        for (u, v) in &self.terms {
            a += u * v.transpose();
        }
        a
    }

    pub fn scaled(&self, s: f64) -> Self {
        let s = T::from_real(s);
        LowRank {
            terms: self
                .terms
                .iter()
                .map(|(u, v)| (u * s, v.clone()))
                .collect(),
        }
    }

    /// `c += self * x`
    pub fn mul_acc(&self, x: &DMatrix<T>, c: &mut DMatrix<T>) {
        for (u, v) in &self.terms {
            // (u v^T) x = u (x^T v)^T
            let w = x.tr_mul(v);
            c.ger(T::one(), u, &w, T::one());
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        column_sums(&self.to_dense())
    }
}

/// A direction in the augmented block exponential.
#[derive(Clone, Debug)]
pub enum Direction<T: Elem> {
    Dense(DMatrix<T>),
    Sparse(Csr<T>),
    LowRank(LowRank<T>),
}

impl<T: Elem> Direction<T> {
    pub fn scaled(&self, s: f64) -> Self {
        match self {
            Direction::Dense(a) => Direction::Dense(a * T::from_real(s)),
            Direction::Sparse(a) => Direction::Sparse(a.scaled(s)),
            Direction::LowRank(a) => Direction::LowRank(a.scaled(s)),
        }
    }

    /// `c += self * x`
    pub fn mul_acc(&self, x: &DMatrix<T>, c: &mut DMatrix<T>) {
        match self {
            Direction::Dense(a) => matmul_acc(c, T::one(), a, x),
            Direction::Sparse(a) => a.mul_acc(x, c),
            Direction::LowRank(a) => a.mul_acc(x, c),
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        match self {
            Direction::Dense(a) => column_sums(a),
            Direction::Sparse(a) => a.column_sums(),
            Direction::LowRank(a) => a.column_sums(),
        }
    }

    pub fn norm1(&self) -> f64 {
        self.column_sums().into_iter().fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        match self {
            Direction::Dense(a) => a.clone(),
            Direction::Sparse(a) => a.to_dense(),
            Direction::LowRank(a) => a.to_dense(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_c(n: usize, rng: &mut ChaCha8Rng) -> CMat {
        CMat::from_fn(n, n, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn gemm_matches_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_c(7, &mut rng);
        let b = random_c(7, &mut rng);
        let c = matmul(&a, &b);
        assert!((c - &a * &b).norm() < 1e-12);
        let ar = a.map(|z| z.re);
        let br = b.map(|z| z.re);
        assert!((matmul(&ar, &br) - &ar * &br).norm() < 1e-12);
    }

    #[test]
    fn gemm_handles_rectangular_shapes() {
        let a = RMat::from_fn(3, 5, |i, j| (i + 2 * j) as f64);
        let b = RMat::from_fn(5, 2, |i, j| (i as f64) - (j as f64));
        assert!((matmul(&a, &b) - &a * &b).norm() < 1e-12);
    }

    #[test]
    fn structured_products_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = random_c(6, &mut rng);
        a[(1, 2)] = Complex64::new(0.0, 0.0);
        let x = random_c(6, &mut rng);
        let csr = Csr::from_dense(&a);
        let mut c = CMat::zeros(6, 6);
        csr.mul_acc(&x, &mut c);
        assert!((c - &a * &x).norm() < 1e-12);
        assert!((csr.trace_with(&x) - (&a * &x).trace()).norm() < 1e-12);

        let u = CVec::from_fn(6, |i, _| Complex64::new(i as f64, 1.0));
        let v = CVec::from_fn(6, |i, _| Complex64::new(1.0, -(i as f64)));
        let lr = LowRank { terms: vec![(u.clone(), v.clone())] };
        let mut c = CMat::zeros(6, 6);
        lr.mul_acc(&x, &mut c);
        assert!((c - &u * v.transpose() * &x).norm() < 1e-10);
    }

    #[test]
    fn real_outer_parts_recombine() {
        let u = CVec::from_fn(4, |i, _| Complex64::new(i as f64, 0.5 - i as f64));
        let v = CVec::from_fn(4, |i, _| Complex64::new(1.0 + i as f64, 2.0));
        let want = &u * v.adjoint();
        let mut got = CMat::zeros(4, 4);
        for (part, w) in f64::outer_parts(&u, &v) {
            got += part.to_dense().map(|x| Complex64::new(x, 0.0)) * w;
        }
        assert!((got - want).norm() < 1e-12);
    }

    #[test]
    fn drop_small_zeroes_tiny_entries() {
        let mut a = RMat::from_row_slice(2, 2, &[1.0, 1e-15, -1e-16, 2.0]);
        drop_small(&mut a, 1e-14);
        assert_eq!(a, RMat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
    }

    #[test]
    fn norm1_is_max_column_sum() {
        let a = RMat::from_row_slice(2, 2, &[1.0, -4.0, 2.0, 1.0]);
        assert_eq!(norm1(&a), 5.0);
    }
}
