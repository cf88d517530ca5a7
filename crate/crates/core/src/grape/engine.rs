//! Slice-parallel propagation and derivative kernel, generic over the
//! working scalar type.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use super::{ControlSet, Counters, Order};
use crate::linalg::{cdot, CMat, CVec, Csr, Direction, Elem};
use crate::matexp::{block_derivatives, block_norm, scaled_exp, squarings_for, ExpError, ExpOptions, ScaledExp};

/// Problem data in the working basis. Generators are stored as `-i G`.
#[derive(Clone, Debug)]
pub(crate) struct Prepared<T: Elem> {
    pub gen0: DMatrix<T>,
    pub gens: Vec<DMatrix<T>>,
    pub gen_sparse: Vec<Csr<T>>,
    pub initial: Vec<CVec>,
    pub targets: Vec<CVec>,
}

/// Per-pair overlaps and complex derivatives in the working basis.
pub(crate) struct Raw {
    pub overlaps: Vec<Complex64>,
    pub gradients: Vec<Vec<Complex64>>,
    pub hessians: Vec<CMat>,
    pub forward: Vec<Vec<CVec>>,
    pub backward: Vec<Vec<CVec>>,
    pub counters: Counters,
}

struct SliceOut {
    /// `[pair][k]`
    grad: Vec<Vec<Complex64>>,
    /// `[pair]`, K x K same-slice second derivatives
    diag: Vec<CMat>,
    /// `[pair][k]`: `D_k rho`
    u: Vec<Vec<CVec>>,
    /// `[pair][k]`: `D_k^dagger chi`
    a: Vec<Vec<CVec>>,
}

impl<T: Elem> Prepared<T> {
    pub fn n_controls(&self) -> usize {
        self.gens.len()
    }

    /// Exponent `-i dt (G0 + power * sum_k c_kn G_k)` of slice `n`.
    pub fn generator(&self, controls: &ControlSet, n: usize) -> DMatrix<T> {
        let mut a = &self.gen0 * T::from_real(controls.dt);
        for (k, g) in self.gens.iter().enumerate() {
            let c = controls.get(k, n);
            if c != 0.0 {
                a += g * T::from_real(controls.dt * controls.power * c);
            }
        }
        a
    }

    /// Exponent derivatives with respect to the normalized amplitudes.
    pub fn directions(&self, controls: &ControlSet) -> Vec<Direction<T>> {
        self.gen_sparse
            .iter()
            .map(|g| Direction::Sparse(g.scaled(controls.dt * controls.power)))
            .collect()
    }

    fn slice_exp(
        &self,
        controls: &ControlSet,
        dirs: &[Direction<T>],
        n: usize,
        keep_terms: bool,
        opts: &ExpOptions,
    ) -> Result<ScaledExp<T>, ExpError> {
        let a = self.generator(controls, n);
        let m = squarings_for(block_norm(&a, dirs), opts)?;
        let mut e = scaled_exp(&a, m, opts)?;
        if !keep_terms {
            e.terms.clear();
            let last = e.levels.len() - 1;
            e.levels.drain(..last);
        }
        Ok(e)
    }

    pub fn slice_propagator(
        &self,
        controls: &ControlSet,
        n: usize,
        opts: &ExpOptions,
    ) -> Result<DMatrix<T>, ExpError> {
        let dirs = self.directions(controls);
        Ok(self.slice_exp(controls, &dirs, n, false, opts)?.into_result())
    }

    pub fn evaluate(&self, controls: &ControlSet, order: Order, opts: &ExpOptions) -> Result<Raw, ExpError> {
        let nk = self.n_controls();
        let ns = controls.slices();
        let npairs = self.initial.len();
        let dirs = self.directions(controls);
        let keep = order != Order::Value;

        let exps: Vec<ScaledExp<T>> = (0..ns)
            .into_par_iter()
            .map(|n| self.slice_exp(controls, &dirs, n, keep, opts))
            .collect::<Result<_, _>>()?;

        let mut forward = Vec::with_capacity(npairs);
        let mut backward = Vec::with_capacity(npairs);
        let mut overlaps = Vec::with_capacity(npairs);
        for q in 0..npairs {
            let mut rho = Vec::with_capacity(ns + 1);
            rho.push(self.initial[q].clone());
            for e in &exps {
                let next = T::apply(e.result(), rho.last().unwrap());
                rho.push(next);
            }
            let mut chi = vec![CVec::zeros(0); ns + 1];
            chi[ns] = self.targets[q].clone();
            for n in (0..ns).rev() {
                chi[n] = T::apply_adjoint(exps[n].result(), &chi[n + 1]);
            }
            overlaps.push(cdot(&self.targets[q], &rho[ns]));
            forward.push(rho);
            backward.push(chi);
        }

        let mut counters = Counters {
            evaluations: 1,
            propagators: ns,
            ..Default::default()
        };
        let mut gradients = Vec::new();
        let mut hessians = Vec::new();
        if order == Order::Value {
            return Ok(Raw {
                overlaps,
                gradients,
                hessians,
                forward,
                backward,
                counters,
            });
        }

        let dir_scale = dirs.iter().map(|d| d.norm1()).fold(0.0, f64::max);
        let dir_scale = if dir_scale > 0.0 { dir_scale } else { 1.0 };
        let hessian = order == Order::Hessian;

        let slices: Vec<SliceOut> = (0..ns)
            .into_par_iter()
            .map(|n| {
                self.slice_derivatives(
                    &exps[n], &dirs, &forward, &backward, n, dir_scale, hessian, opts,
                )
            })
            .collect::<Result<_, _>>()?;

        counters.first_derivatives = ns * if hessian { nk } else { 0 };
        counters.second_derivatives = if hessian { ns * nk * (nk + 1) / 2 } else { 0 };

        for q in 0..npairs {
            let mut g = vec![Complex64::new(0.0, 0.0); nk * ns];
            for (n, s) in slices.iter().enumerate() {
                g[n * nk..(n + 1) * nk].copy_from_slice(&s.grad[q]);
            }
            gradients.push(g);
        }

        if hessian {
            for q in 0..npairs {
                hessians.push(assemble_hessian(&exps, &slices, q, nk));
            }
        }

        Ok(Raw {
            overlaps,
            gradients,
            hessians,
            forward,
            backward,
            counters,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn slice_derivatives(
        &self,
        exp: &ScaledExp<T>,
        dirs: &[Direction<T>],
        forward: &[Vec<CVec>],
        backward: &[Vec<CVec>],
        n: usize,
        dir_scale: f64,
        hessian: bool,
        opts: &ExpOptions,
    ) -> Result<SliceOut, ExpError> {
        let nk = dirs.len();
        let npairs = forward.len();
        // Rank-one directions rho chi^dagger, split into working-type parts.
        let mut ydirs = Vec::new();
        let mut meta = Vec::new();
        for q in 0..npairs {
            for (part, w) in T::outer_parts(&forward[q][n], &backward[q][n + 1]) {
                let norm = part.column_sums().into_iter().fold(0.0, f64::max);
                if norm == 0.0 {
                    continue;
                }
                let s = dir_scale / norm;
                ydirs.push(Direction::LowRank(part.scaled(s)));
                meta.push((q, w / s));
            }
        }
        let ny = ydirs.len();

        let zero = Complex64::new(0.0, 0.0);
        let mut grad = vec![vec![zero; nk]; npairs];
        let mut diag = vec![CMat::zeros(nk, nk); npairs];
        let mut u = vec![Vec::new(); npairs];
        let mut a = vec![Vec::new(); npairs];

        let trace = |k: usize, x: &DMatrix<T>| match &dirs[k] {
            Direction::Sparse(b) => b.trace_with(x).to_complex(),
            other => crate::linalg::trace_product(&other.to_dense(), x).to_complex(),
        };

        if !hessian {
            let bd = block_derivatives(exp, &ydirs, &[], opts)?;
            for (y, &(q, w)) in meta.iter().enumerate() {
                for k in 0..nk {
                    grad[q][k] += w * trace(k, &bd.first[y]);
                }
            }
        } else {
            let mut all: Vec<Direction<T>> = dirs.to_vec();
            all.extend(ydirs);
            let mut pairs = Vec::with_capacity(ny * nk);
            for y in 0..ny {
                for j in 0..nk {
                    pairs.push((j, nk + y));
                }
            }
            let bd = block_derivatives(exp, &all, &pairs, opts)?;
            for (y, &(q, w)) in meta.iter().enumerate() {
                let x = &bd.first[nk + y];
                for k in 0..nk {
                    grad[q][k] += w * trace(k, x);
                }
                let wmat = |j: usize| &bd.second[y * nk + j];
                for k in 0..nk {
                    for j in k..nk {
                        let v = w * (trace(k, wmat(j)) + trace(j, wmat(k)));
                        diag[q][(k, j)] += v;
                        if j != k {
                            diag[q][(j, k)] += v;
                        }
                    }
                }
            }
            for q in 0..npairs {
                for k in 0..nk {
                    u[q].push(T::apply(&bd.first[k], &forward[q][n]));
                    a[q].push(T::apply_adjoint(&bd.first[k], &backward[q][n + 1]));
                }
            }
        }
        Ok(SliceOut { grad, diag, u, a })
    }
}

/// Full complex Hessian of one pair's overlap from per-slice data.
fn assemble_hessian<T: Elem>(exps: &[ScaledExp<T>], slices: &[SliceOut], q: usize, nk: usize) -> CMat {
    let ns = slices.len();
    let dim = ns * nk;
    // Column (m, j) holds entries for rows (n, k) with n > m.
    let columns: Vec<Vec<Complex64>> = (0..dim)
        .into_par_iter()
        .map(|col| {
            let (m, j) = (col / nk, col % nk);
            let mut out = Vec::with_capacity((ns - m - 1) * nk);
            let mut w = slices[m].u[q][j].clone();
            for n in m + 1..ns {
                for k in 0..nk {
                    out.push(cdot(&slices[n].a[q][k], &w));
                }
                if n + 1 < ns {
                    w = T::apply(exps[n].result(), &w);
                }
            }
            out
        })
        .collect();
    let mut h = CMat::zeros(dim, dim);
    for (n, s) in slices.iter().enumerate() {
        for k in 0..nk {
            for j in 0..nk {
                h[(n * nk + k, n * nk + j)] = s.diag[q][(k, j)];
            }
        }
    }
    for (col, vals) in columns.iter().enumerate() {
        let m = col / nk;
        for (idx, &v) in vals.iter().enumerate() {
            let row = (m + 1) * nk + idx;
            h[(row, col)] = v;
            h[(col, row)] = v;
        }
    }
    h
}
