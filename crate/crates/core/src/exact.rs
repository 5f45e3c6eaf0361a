//! Eigensolvers and real-time propagation inside one magnetization sector.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use serde::Serialize;

use crate::hilbert::{
    enumerate_sector, expand_matrix, expand_vector, SectorBasis, SectorOperator, SectorState,
};
use crate::lattice::{
    build_couplings, restrict_to_active, ChainGeometry, CouplingMatrices, CouplingModel, Sign,
};
use crate::par;
use crate::rng::{substream, Stream};
use crate::{Error, Result};

/// Largest sector handled by dense diagonalization.
pub const DENSE_CAP: usize = 5000;
/// Below this dimension Lanczos falls back to a dense solve.
const DENSE_SWITCH: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Which {
    Lowest,
    Highest,
}

impl From<Sign> for Which {
    fn from(s: Sign) -> Self {
        match s {
            Sign::Ferro => Which::Lowest,
            Sign::Antiferro => Which::Highest,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LanczosOptions {
    /// Relative residual target `||H psi - E psi|| <= tol |E|`.
    pub tol: f64,
    /// Cap on matrix-vector products over all restarts.
    pub max_iter: usize,
    /// Basis vectors kept per restart cycle.
    pub krylov_dim: usize,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 6000,
            krylov_dim: 60,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LanczosResult {
    pub energy: f64,
    pub state: SectorState,
    pub residual: f64,
    pub iterations: usize,
    /// Distance to the next Ritz value of the final cycle.
    pub gap: Option<f64>,
    pub degenerate: bool,
}

struct RealKrylov {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    basis: Vec<Vec<f64>>,
    last_beta: f64,
}

/// Lanczos with full reorthogonalization from a normalized start vector.
fn real_lanczos(op: &SectorOperator, light: Option<&[f64]>, start: &[f64], m: usize) -> RealKrylov {
    let dim = start.len();
    let m = m.min(dim).max(1);
    let mut basis: Vec<Vec<f64>> = vec![start.to_vec()];
    let mut alpha = Vec::with_capacity(m);
    let mut beta: Vec<f64> = Vec::with_capacity(m);
    let mut w = vec![0.0; dim];
    let mut last_beta = 0.0;
    for j in 0..m {
        op.apply(light, &basis[j], &mut w);
        let a = par::dot(&w, &basis[j]);
        par::axpy(-a, &basis[j], &mut w);
        if j > 0 {
            par::axpy(-beta[j - 1], &basis[j - 1], &mut w);
        }
        let before = par::norm(&w);
        reorthogonalize(&basis, &mut w);
        let mut b = par::norm(&w);
        if b < 0.7 * before {
            reorthogonalize(&basis, &mut w);
            b = par::norm(&w);
        }
        alpha.push(a);
        let scale = a.abs() + beta.last().copied().unwrap_or(0.0);
        if j + 1 == m || b <= 1e-12 * scale.max(1e-300) {
            last_beta = b;
            break;
        }
        beta.push(b);
        let mut next = std::mem::replace(&mut w, vec![0.0; dim]);
        par::scale(1.0 / b, &mut next);
        basis.push(next);
    }
    RealKrylov {
        alpha,
        beta,
        basis,
        last_beta,
    }
}

fn reorthogonalize(basis: &[Vec<f64>], w: &mut [f64]) {
    let coeffs: Vec<f64> = basis.iter().map(|v| par::dot(v, w)).collect();
    for (c, v) in coeffs.iter().zip(basis) {
        par::axpy(-c, v, w);
    }
}

fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    sorted_eigen(t)
}

fn sorted_eigen(m: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Make the largest-magnitude component positive.
fn fix_phase(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() * (1.0 + 1e-12) {
            best = i;
        }
    }
    if v[best] < 0.0 {
        par::scale(-1.0, v);
    }
}

fn residual_norm(op: &SectorOperator, light: Option<&[f64]>, x: &[f64], e: f64) -> f64 {
    let mut w = vec![0.0; x.len()];
    op.apply(light, x, &mut w);
    par::axpy(-e, x, &mut w);
    par::norm(&w)
}

struct RealEigenpair {
    energy: f64,
    vector: Vec<f64>,
    residual: f64,
    iterations: usize,
    gap: Option<f64>,
}

/// Lowest eigenpair of `op` (already sign-adjusted).
fn lowest_eigenpair(
    op: &SectorOperator,
    light: Option<&[f64]>,
    opts: &LanczosOptions,
) -> Result<RealEigenpair> {
    let dim = op.dim();
    if dim == 0 {
        return Err(Error::Exact("empty sector".into()));
    }
    let scale_floor = 1e-6 * op.norm_estimate(light).max(1e-300);
    let target = |e: f64| opts.tol * e.abs().max(scale_floor);

    if dim <= DENSE_SWITCH {
        let (vals, vecs) = sorted_eigen(op.dense_matrix(light));
        let mut x: Vec<f64> = vecs.column(0).iter().copied().collect();
        fix_phase(&mut x);
        let residual = residual_norm(op, light, &x, vals[0]);
        return Ok(RealEigenpair {
            energy: vals[0],
            vector: x,
            residual,
            iterations: 1,
            gap: vals.get(1).map(|v| v - vals[0]),
        });
    }

    let mut rng = substream(opts.seed, Stream::StartVector, dim as u64);
    let mut x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() - 0.5).collect();
    let n0 = par::norm(&x);
    par::scale(1.0 / n0, &mut x);

    let mut iterations = 0;
    let mut last_residual = f64::INFINITY;
    while iterations < opts.max_iter {
        let m = opts.krylov_dim.min(opts.max_iter - iterations).max(2);
        let kr = real_lanczos(op, light, &x, m);
        iterations += kr.alpha.len() + 1;
        let (theta, y) = tridiagonal_eigen(&kr.alpha, &kr.beta);
        let k = kr.alpha.len();
        let mut next = vec![0.0; dim];
        for (l, v) in kr.basis.iter().enumerate().take(k) {
            par::axpy(y[(l, 0)], v, &mut next);
        }
        let nn = par::norm(&next);
        par::scale(1.0 / nn, &mut next);
        let estimate = kr.last_beta * y[(k - 1, 0)].abs();
        let gap = theta.get(1).map(|t| t - theta[0]);
        x = next;
        if estimate <= target(theta[0]) || k < m {
            let res = residual_norm(op, light, &x, theta[0]);
            last_residual = res;
            if res <= target(theta[0]) {
                fix_phase(&mut x);
                return Ok(RealEigenpair {
                    energy: theta[0],
                    vector: x,
                    residual: res,
                    iterations,
                    gap,
                });
            }
        } else {
            last_residual = estimate;
        }
        log::debug!(
            "lanczos restart: E = {:.12}, residual estimate {:.3e}",
            theta[0],
            estimate
        );
    }
    Err(Error::NotConverged {
        iterations,
        residual: last_residual,
    })
}

/// Extremal eigenpair of the sector Hamiltonian.
pub fn lanczos_extremal(
    matrices: &CouplingMatrices,
    basis: Arc<SectorBasis>,
    which: Which,
    opts: &LanczosOptions,
) -> Result<LanczosResult> {
    let op = SectorOperator::new(basis, matrices)?;
    lanczos_operator(&op, which, None, opts)
}

/// Extremal eigenpair of a prebuilt operator; `Highest` runs on `-H`.
pub fn lanczos_operator(
    op: &SectorOperator,
    which: Which,
    light: Option<&[f64]>,
    opts: &LanczosOptions,
) -> Result<LanczosResult> {
    let eff = match which {
        Which::Lowest => op.clone(),
        Which::Highest => op.negated(),
    };
    let pair = lowest_eigenpair(&eff, light, opts)?;
    let sign = eff.sign() * op.sign();
    let energy = sign * pair.energy;
    let scale = energy.abs().max(1e-12);
    let degenerate = pair.gap.is_some_and(|g| g < 1e-7 * scale);
    if degenerate {
        log::warn!(
            "extremal state is (nearly) degenerate: gap {:.3e}",
            pair.gap.unwrap_or(0.0)
        );
    }
    Ok(LanczosResult {
        energy,
        state: SectorState::from_real(op.basis().clone(), &pair.vector),
        residual: pair.residual,
        iterations: pair.iterations,
        gap: pair.gap,
        degenerate,
    })
}

#[derive(Debug, Clone)]
pub struct SpectrumResult {
    /// Ascending.
    pub energies: Vec<f64>,
    /// Eigenvectors as columns.
    pub states: DMatrix<f64>,
}

/// Dense diagonalization of one sector.
pub fn full_spectrum(
    matrices: &CouplingMatrices,
    basis: Arc<SectorBasis>,
) -> Result<SpectrumResult> {
    let op = SectorOperator::new(basis, matrices)?;
    operator_spectrum(&op, None)
}

pub fn operator_spectrum(op: &SectorOperator, light: Option<&[f64]>) -> Result<SpectrumResult> {
    if op.dim() > DENSE_CAP {
        return Err(Error::Exact(format!(
            "sector dimension {} exceeds the dense cap {DENSE_CAP}",
            op.dim()
        )));
    }
    let (energies, states) = sorted_eigen(op.dense_matrix(light));
    Ok(SpectrumResult { energies, states })
}

// ---------------------------------------------------------------------------
// Real-time propagation

#[derive(Debug, Clone, Copy)]
pub struct KrylovOptions {
    pub dt: f64,
    pub krylov_dim: usize,
    /// Local error target per exponential substep.
    pub tol: f64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self {
            dt: 0.02,
            krylov_dim: 30,
            tol: 1e-11,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PropagationStats {
    pub steps: usize,
    pub substeps: usize,
    pub matvecs: usize,
    pub max_error: f64,
}

/// Fourth-order commutator-free Magnus nodes and weights.
const CF4_C: [f64; 2] = [0.5 - 0.288_675_134_594_812_9, 0.5 + 0.288_675_134_594_812_9];
const CF4_A: [f64; 2] = [
    0.25 + 0.288_675_134_594_812_9,
    0.25 - 0.288_675_134_594_812_9,
];

pub struct Propagator<'a> {
    op: &'a SectorOperator,
    opts: KrylovOptions,
}

impl<'a> Propagator<'a> {
    pub fn new(op: &'a SectorOperator, opts: KrylovOptions) -> Result<Self> {
        if !(opts.dt > 0.0) || opts.krylov_dim < 2 || !(opts.tol > 0.0) {
            return Err(Error::Exact(
                "Krylov options need dt > 0, krylov_dim >= 2, tol > 0".into(),
            ));
        }
        Ok(Self { op, opts })
    }

    /// `v <- exp(-i tau H) v` with adaptive substeps.
    pub fn exp_step(
        &self,
        light: Option<&[f64]>,
        tau: f64,
        v: &mut [Complex64],
        stats: &mut PropagationStats,
    ) -> Result<()> {
        let dim = v.len();
        let nrm = par::cnorm(v);
        if nrm == 0.0 || tau == 0.0 {
            return Ok(());
        }
        let mut remaining = tau;
        while remaining > 0.0 {
            let nrm = par::cnorm(v);
            let m = self.opts.krylov_dim.min(dim).max(1);
            let mut basis: Vec<Vec<Complex64>> = Vec::with_capacity(m);
            let mut first = v.to_vec();
            par::cscale(Complex64::new(1.0 / nrm, 0.0), &mut first);
            basis.push(first);
            let mut alpha = Vec::with_capacity(m);
            let mut beta: Vec<f64> = Vec::with_capacity(m);
            let mut last_beta = 0.0;
            let mut w = vec![Complex64::default(); dim];
            for j in 0..m {
                self.op.apply(light, &basis[j], &mut w);
                stats.matvecs += 1;
                let a = par::cdot(&basis[j], &w).re;
                par::caxpy(Complex64::new(-a, 0.0), &basis[j], &mut w);
                if j > 0 {
                    par::caxpy(Complex64::new(-beta[j - 1], 0.0), &basis[j - 1], &mut w);
                }
                for _ in 0..2 {
                    let coeffs: Vec<Complex64> = basis.iter().map(|b| par::cdot(b, &w)).collect();
                    for (c, b) in coeffs.iter().zip(&basis) {
                        par::caxpy(-c, b, &mut w);
                    }
                }
                let b = par::cnorm(&w);
                alpha.push(a);
                let scale = a.abs() + beta.last().copied().unwrap_or(0.0);
                if j + 1 == m || b <= 1e-13 * scale.max(1e-300) {
                    last_beta = b;
                    break;
                }
                beta.push(b);
                let mut next = std::mem::replace(&mut w, vec![Complex64::default(); dim]);
                par::cscale(Complex64::new(1.0 / b, 0.0), &mut next);
                basis.push(next);
            }
            let k = alpha.len();
            let breakdown = k < m
                || last_beta
                    <= 1e-13 * alpha.iter().fold(0.0f64, |s, a| s.max(a.abs())).max(1e-300);
            let (theta, q) = tridiagonal_eigen(&alpha, &beta);
            let coeffs = |s: f64| -> Vec<Complex64> {
                (0..k)
                    .map(|r| {
                        (0..k)
                            .map(|l| Complex64::from_polar(q[(0, l)] * q[(r, l)], -s * theta[l]))
                            .sum::<Complex64>()
                    })
                    .collect()
            };
            let mut s = remaining;
            let mut c = coeffs(s);
            let mut err = if breakdown {
                0.0
            } else {
                last_beta * c[k - 1].norm()
            };
            let mut halvings = 0;
            while err > self.opts.tol {
                s *= 0.5;
                halvings += 1;
                if halvings > 40 {
                    return Err(Error::Exact(format!(
                        "Krylov step rejected: error {err:.3e} at tau {s:.3e}"
                    )));
                }
                c = coeffs(s);
                err = last_beta * c[k - 1].norm();
            }
            stats.max_error = stats.max_error.max(err);
            stats.substeps += 1;
            v.iter_mut().for_each(|x| *x = Complex64::default());
            for (l, b) in basis.iter().enumerate().take(k) {
                par::caxpy(c[l] * nrm, b, v);
            }
            remaining = if halvings == 0 { 0.0 } else { remaining - s };
        }
        Ok(())
    }

    /// Evolve from `t0` to `t1`. With a time-dependent light shift each step of
    /// length `dt` uses the fourth-order commutator-free Magnus split.
    pub fn evolve(
        &self,
        light: Option<&dyn Fn(f64) -> Vec<f64>>,
        v: &mut [Complex64],
        t0: f64,
        t1: f64,
        stats: &mut PropagationStats,
    ) -> Result<()> {
        if t1 < t0 {
            return Err(Error::Exact(format!(
                "propagation interval [{t0}, {t1}] is reversed"
            )));
        }
        if t1 == t0 {
            return Ok(());
        }
        let span = t1 - t0;
        let n_steps = ((span / self.opts.dt) - 1e-9).ceil().max(1.0) as usize;
        let h = span / n_steps as f64;
        let light_norm = light
            .map(|f| f(t0).iter().map(|x| x.abs()).sum::<f64>())
            .unwrap_or(0.0);
        let est = self.op.norm_estimate(None) + light_norm;
        if h * est >= 1.0 {
            log::warn!("dt = {h:.3e} with |H| ~ {est:.3e}: dt |H| >= 1, relying on adaptive Krylov substeps");
        }
        for step in 0..n_steps {
            let t = t0 + step as f64 * h;
            match light {
                None => self.exp_step(None, h, v, stats)?,
                Some(f) => {
                    let l1 = f(t + CF4_C[0] * h);
                    let l2 = f(t + CF4_C[1] * h);
                    for (w1, w2) in [(CF4_A[0], CF4_A[1]), (CF4_A[1], CF4_A[0])] {
                        let mixed: Vec<f64> = l1
                            .iter()
                            .zip(&l2)
                            .map(|(a, b)| 2.0 * (w1 * a + w2 * b))
                            .collect();
                        self.exp_step(Some(&mixed), 0.5 * h, v, stats)?;
                    }
                }
            }
            stats.steps += 1;
        }
        Ok(())
    }
}

/// Propagate one sector state from `t0` to `t1`.
pub fn krylov_propagate(
    matrices: &CouplingMatrices,
    light_shift: Option<&dyn Fn(f64) -> Vec<f64>>,
    state: &SectorState,
    t0: f64,
    t1: f64,
    opts: KrylovOptions,
) -> Result<(SectorState, PropagationStats)> {
    let op = SectorOperator::new(state.basis.clone(), matrices)?;
    let prop = Propagator::new(&op, opts)?;
    let mut out = state.clone();
    let mut stats = PropagationStats::default();
    prop.evolve(light_shift, &mut out.amplitudes, t0, t1, &mut stats)?;
    Ok((out, stats))
}

// ---------------------------------------------------------------------------
// Thermal states

#[derive(Debug, Clone, Copy)]
pub struct ThermalOptions {
    pub temperature: f64,
    pub transverse_field: f64,
    pub hole_density: f64,
    pub n_realizations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThermalResult {
    pub n_sites: usize,
    pub sz: Vec<f64>,
    pub sz_err: Vec<f64>,
    pub cx: Vec<f64>,
    pub cx_err: Vec<f64>,
    pub cz: Vec<f64>,
    pub cz_err: Vec<f64>,
    pub energy: f64,
    pub n_realizations: usize,
}

struct ThermalSample {
    sz: Vec<f64>,
    cx: Vec<f64>,
    cz: Vec<f64>,
    energy: f64,
}

/// NaN-aware mean and standard error over samples.
pub fn nan_mean_stderr(samples: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let len = samples.first().map_or(0, |s| s.len());
    let mut mean = vec![f64::NAN; len];
    let mut err = vec![f64::NAN; len];
    for k in 0..len {
        let vals: Vec<f64> = samples
            .iter()
            .map(|s| s[k])
            .filter(|v| v.is_finite())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        mean[k] = m;
        err[k] = if vals.len() > 1 {
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
    }
    (mean, err)
}

fn boltzmann(energies: &[f64], e_min: f64, beta: f64) -> Vec<f64> {
    energies
        .iter()
        .map(|e| (-beta * (e - e_min)).exp())
        .collect()
}

/// Gibbs state of a chain whose couplings already exclude holes.
fn thermal_sample(
    matrices: &CouplingMatrices,
    sign: f64,
    temperature: f64,
    field: f64,
) -> Result<ThermalSample> {
    let n = matrices.n_sites();
    let beta = 1.0 / temperature;
    if field == 0.0 {
        let mut spectra = Vec::with_capacity(n + 1);
        for n_up in 0..=n {
            let basis = Arc::new(enumerate_sector(n, n_up)?);
            let mut op = SectorOperator::new(basis.clone(), matrices)?;
            if sign < 0.0 {
                op = op.negated();
            }
            spectra.push((basis, operator_spectrum(&op, None)?));
        }
        let e_min = spectra
            .iter()
            .map(|(_, s)| s.energies[0])
            .fold(f64::INFINITY, f64::min);
        let mut z = 0.0;
        let mut energy = 0.0;
        let mut zi = vec![0.0; n];
        let mut zz = vec![0.0; n * n];
        let mut xx = vec![0.0; n * n];
        for (basis, spec) in &spectra {
            let w = boltzmann(&spec.energies, e_min, beta);
            z += w.iter().sum::<f64>();
            energy += w
                .iter()
                .zip(&spec.energies)
                .map(|(a, e)| a * e)
                .sum::<f64>();
            let v = &spec.states;
            let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |r, c| v[(r, c)] * w[c]);
            let rho = &scaled * v.transpose();
            density_moments(basis, |a, b| rho[(a, b)], &mut zi, &mut zz, &mut xx);
        }
        Ok(finish_thermal(n, z, energy, zi, zz, xx, vec![0.0; n]))
    } else {
        if n > 12 {
            return Err(Error::Exact(format!(
                "transverse-field thermal state needs the full 2^N space; N = {n} exceeds 12"
            )));
        }
        let h = full_space_matrix(matrices, sign, field);
        let (energies, v) = sorted_eigen(h);
        let w = boltzmann(&energies, energies[0], beta);
        let z: f64 = w.iter().sum();
        let energy = w.iter().zip(&energies).map(|(a, e)| a * e).sum::<f64>();
        let scaled = DMatrix::from_fn(v.nrows(), v.ncols(), |r, c| v[(r, c)] * w[c]);
        let rho = &scaled * v.transpose();
        let dim = 1usize << n;
        let mut zi = vec![0.0; n];
        let mut zz = vec![0.0; n * n];
        let mut xx = vec![0.0; n * n];
        let mut xi = vec![0.0; n];
        for s in 0..dim {
            let p = rho[(s, s)];
            for i in 0..n {
                let si = if s >> i & 1 == 1 { 1.0 } else { -1.0 };
                zi[i] += p * si;
                xi[i] += rho[(s ^ (1 << i), s)];
                for j in 0..n {
                    let sj = if s >> j & 1 == 1 { 1.0 } else { -1.0 };
                    zz[i * n + j] += p * si * sj;
                    if i != j {
                        xx[i * n + j] += rho[(s ^ (1 << i) ^ (1 << j), s)];
                    }
                }
            }
        }
        Ok(finish_thermal(n, z, energy, zi, zz, xx, xi))
    }
}

fn finish_thermal(
    n: usize,
    z: f64,
    energy: f64,
    zi: Vec<f64>,
    zz: Vec<f64>,
    xx: Vec<f64>,
    xi: Vec<f64>,
) -> ThermalSample {
    let sz: Vec<f64> = zi.iter().map(|v| v / z).collect();
    let x: Vec<f64> = xi.iter().map(|v| v / z).collect();
    let mut cz = vec![0.0; n * n];
    let mut cx = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cz[i * n + j] = zz[i * n + j] / z - sz[i] * sz[j];
            cx[i * n + j] = if i == j {
                1.0 - x[i] * x[i]
            } else {
                xx[i * n + j] / z - x[i] * x[j]
            };
        }
    }
    ThermalSample {
        sz,
        cx,
        cz,
        energy: energy / z,
    }
}

/// Accumulate `Tr(rho Z_i)`, `Tr(rho Z_i Z_j)`, `Tr(rho X_i X_j)` for a sector density matrix.
fn density_moments(
    basis: &SectorBasis,
    rho: impl Fn(usize, usize) -> f64,
    zi: &mut [f64],
    zz: &mut [f64],
    xx: &mut [f64],
) {
    let n = basis.n_sites();
    for (k, &c) in basis.configs().iter().enumerate() {
        let p = rho(k, k);
        for i in 0..n {
            let si = if c >> i & 1 == 1 { 1.0 } else { -1.0 };
            zi[i] += p * si;
            for j in 0..n {
                let sj = if c >> j & 1 == 1 { 1.0 } else { -1.0 };
                zz[i * n + j] += p * si * sj;
                if i != j && (c >> i & 1) != (c >> j & 1) {
                    let t = basis.rank(c ^ (1 << i) ^ (1 << j));
                    xx[i * n + j] += rho(t, k);
                }
            }
        }
    }
}

fn full_space_matrix(matrices: &CouplingMatrices, sign: f64, field: f64) -> DMatrix<f64> {
    let n = matrices.n_sites();
    let dim = 1usize << n;
    let mut h = DMatrix::zeros(dim, dim);
    for s in 0..dim {
        let z = |i: usize| if s >> i & 1 == 1 { 1.0 } else { -1.0 };
        let mut d = matrices.constant;
        for i in 0..n {
            d += matrices.field_z[i] * z(i);
            for j in (i + 1)..n {
                d += matrices.zz.get(i, j) * z(i) * z(j);
                if z(i) != z(j) {
                    h[(s ^ (1 << i) ^ (1 << j), s)] += -sign * matrices.xy.get(i, j);
                }
            }
            h[(s ^ (1 << i), s)] += -field;
        }
        h[(s, s)] += sign * d;
    }
    h
}

/// Gibbs averages at temperature `T`, optionally with a transverse field and
/// random holes. Hole sites are reported as NaN and skipped in the averages.
pub fn thermal_observables(
    geom: &ChainGeometry,
    model: &CouplingModel,
    opts: &ThermalOptions,
) -> Result<ThermalResult> {
    if !(opts.temperature > 0.0) {
        return Err(Error::Exact(format!(
            "temperature must be positive, got {}",
            opts.temperature
        )));
    }
    if !(0.0..=1.0).contains(&opts.hole_density) || opts.transverse_field < 0.0 {
        return Err(Error::Exact(
            "hole density must lie in [0,1] and the transverse field must be >= 0".into(),
        ));
    }
    let n = geom.n_sites();
    let sign = match model.sign {
        Sign::Ferro => 1.0,
        Sign::Antiferro => -1.0,
    };
    let realizations = if opts.hole_density > 0.0 {
        opts.n_realizations.max(1)
    } else {
        1
    };
    let samples: Vec<ThermalSample> = (0..realizations)
        .map(|r| -> Result<ThermalSample> {
            let mut g = geom.clone();
            if opts.hole_density > 0.0 {
                let mut rng = substream(opts.seed, Stream::Holes, r as u64);
                let holes: Vec<usize> = geom
                    .active_sites()
                    .into_iter()
                    .filter(|_| rng.random::<f64>() < opts.hole_density)
                    .collect();
                g = geom.with_holes(geom.holes().iter().copied().chain(holes))?;
            }
            let m = build_couplings(&g, model)?;
            let (sub, sites) = restrict_to_active(&g, &m)?;
            let s = thermal_sample(&sub, sign, opts.temperature, opts.transverse_field)?;
            Ok(ThermalSample {
                sz: expand_vector(&s.sz, &sites, n),
                cx: expand_matrix(&s.cx, &sites, n),
                cz: expand_matrix(&s.cz, &sites, n),
                energy: s.energy,
            })
        })
        .collect::<Result<_>>()?;
    let pick = |f: fn(&ThermalSample) -> &[f64]| {
        nan_mean_stderr(&samples.iter().map(f).collect::<Vec<_>>())
    };
    let (sz, sz_err) = pick(|s| &s.sz);
    let (cx, cx_err) = pick(|s| &s.cx);
    let (cz, cz_err) = pick(|s| &s.cz);
    let energy = samples.iter().map(|s| s.energy).sum::<f64>() / samples.len() as f64;
    Ok(ThermalResult {
        n_sites: n,
        sz,
        sz_err,
        cx,
        cx_err,
        cz,
        cz_err,
        energy,
        n_realizations: realizations,
    })
}

/// Add a uniform offset so the double sum of finite entries equals `target`.
pub fn varmz_offset_correction(czz: &[f64], target_variance: f64) -> Vec<f64> {
    let finite: Vec<f64> = czz.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return czz.to_vec();
    }
    let offset = (target_variance - finite.iter().sum::<f64>()) / finite.len() as f64;
    czz.iter()
        .map(|v| if v.is_finite() { v + offset } else { *v })
        .collect()
}

// ---------------------------------------------------------------------------
// Dynamical structure factor

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DsfRoute {
    /// Full sector spectrum; exact poles.
    Dense,
    /// Spectral Lanczos from `S^z_q |0>`; Ritz poles.
    Lanczos { steps: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct DsfOptions {
    pub n_omega: usize,
    pub omega_max: Option<f64>,
    pub eta: Option<f64>,
    pub route: DsfRoute,
    pub lanczos: LanczosOptions,
}

impl Default for DsfOptions {
    fn default() -> Self {
        Self {
            n_omega: 200,
            omega_max: None,
            eta: None,
            route: DsfRoute::Dense,
            lanczos: LanczosOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DsfPole {
    pub omega: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DsfGrid {
    pub n_sites: usize,
    pub q: Vec<f64>,
    /// Bin centres.
    pub omega: Vec<f64>,
    pub bin_width: f64,
    /// `S(q, omega)` per bin, `q`-major, before normalization.
    pub raw: Vec<f64>,
    /// `raw / peak`.
    pub intensity: Vec<f64>,
    pub peak: f64,
    pub poles: Vec<Vec<DsfPole>>,
    /// `<0| S^z_{-q} S^z_q |0>`.
    pub static_sf: Vec<f64>,
    pub ground_energy: f64,
}

impl DsfGrid {
    pub fn column(&self, iq: usize) -> &[f64] {
        let w = self.omega.len();
        &self.raw[iq * w..(iq + 1) * w]
    }

    /// `omega / q` of the strongest pole at the smallest nonzero wavevector.
    pub fn ridge_velocity(&self) -> Option<f64> {
        let iq = self.q.iter().position(|&q| q > 0.0)?;
        let pole = self.poles[iq]
            .iter()
            .filter(|p| p.omega > 1e-9)
            .max_by(|a, b| a.weight.total_cmp(&b.weight))?;
        Some(pole.omega / self.q[iq])
    }
}

/// Diagonal form factor `(1/sqrt N) sum_j e^{i q j} Z_j` on every basis state.
fn sz_q_factor(basis: &SectorBasis, q: f64) -> Vec<Complex64> {
    let n = basis.n_sites();
    let phases: Vec<Complex64> = (0..n)
        .map(|j| Complex64::from_polar(1.0 / (n as f64).sqrt(), q * j as f64))
        .collect();
    basis
        .configs()
        .iter()
        .map(|&c| {
            (0..n)
                .map(|j| phases[j] * if c >> j & 1 == 1 { 1.0 } else { -1.0 })
                .sum()
        })
        .collect()
}

/// `S(q, omega)` in the extremal state of sector `n_up` at `q = 2 pi n / N`,
/// `n = 0..=N/2`. Excitation energies are measured with respect to the
/// operator whose ground state is taken, so `Highest` uses the spectrum of `-H`.
pub fn dynamical_structure_factor(
    matrices: &CouplingMatrices,
    which: Which,
    n_up: usize,
    opts: &DsfOptions,
) -> Result<DsfGrid> {
    let n = matrices.n_sites();
    let basis = Arc::new(enumerate_sector(n, n_up)?);
    let mut op = SectorOperator::new(basis.clone(), matrices)?;
    if which == Which::Highest {
        op = op.negated();
    }
    let qs: Vec<f64> = (0..=n / 2)
        .map(|k| 2.0 * PI * k as f64 / n as f64)
        .collect();
    let mut poles: Vec<Vec<DsfPole>> = Vec::with_capacity(qs.len());
    let mut static_sf = Vec::with_capacity(qs.len());
    let ground_energy;
    match opts.route {
        DsfRoute::Dense => {
            let spec = operator_spectrum(&op, None)?;
            ground_energy = spec.energies[0];
            let psi0 = spec.states.column(0);
            for &q in &qs {
                let f = sz_q_factor(&basis, q);
                let phi: Vec<Complex64> = f.iter().zip(psi0.iter()).map(|(a, &b)| a * b).collect();
                static_sf.push(par::cnorm(&phi).powi(2));
                let re = DVector::from_iterator(phi.len(), phi.iter().map(|z| z.re));
                let im = DVector::from_iterator(phi.len(), phi.iter().map(|z| z.im));
                let a = spec.states.tr_mul(&re);
                let b = spec.states.tr_mul(&im);
                poles.push(
                    (0..spec.energies.len())
                        .map(|k| DsfPole {
                            omega: spec.energies[k] - ground_energy,
                            weight: a[k] * a[k] + b[k] * b[k],
                        })
                        .collect(),
                );
            }
        }
        DsfRoute::Lanczos { steps } => {
            let gs = lanczos_operator(&op, Which::Lowest, None, &opts.lanczos)?;
            ground_energy = gs.energy;
            let psi0: Vec<f64> = gs.state.amplitudes.iter().map(|z| z.re).collect();
            for &q in &qs {
                let f = sz_q_factor(&basis, q);
                let mut list = Vec::new();
                let mut total = 0.0;
                for part in 0..2 {
                    let v: Vec<f64> = f
                        .iter()
                        .zip(&psi0)
                        .map(|(a, b)| b * if part == 0 { a.re } else { a.im })
                        .collect();
                    let nv = par::norm(&v);
                    total += nv * nv;
                    if nv < 1e-14 {
                        continue;
                    }
                    let mut start = v;
                    par::scale(1.0 / nv, &mut start);
                    let kr = real_lanczos(&op, None, &start, steps);
                    let (theta, y) = tridiagonal_eigen(&kr.alpha, &kr.beta);
                    for (k, &t) in theta.iter().enumerate() {
                        list.push(DsfPole {
                            omega: (t - ground_energy).max(0.0),
                            weight: nv * nv * y[(0, k)].powi(2),
                        });
                    }
                }
                static_sf.push(total);
                poles.push(list);
            }
        }
    }
    let max_pole = poles
        .iter()
        .flatten()
        .map(|p| p.omega)
        .fold(0.0f64, f64::max);
    let omega_max = opts.omega_max.unwrap_or(1.05 * max_pole.max(1e-9));
    let nw = opts.n_omega.max(1);
    let dw = omega_max / nw as f64;
    let omega: Vec<f64> = (0..nw).map(|k| (k as f64 + 0.5) * dw).collect();
    let mut raw = vec![0.0; qs.len() * nw];
    for (iq, list) in poles.iter().enumerate() {
        let col = &mut raw[iq * nw..(iq + 1) * nw];
        for p in list {
            match opts.eta {
                None => {
                    let b = ((p.omega / dw).floor() as usize).min(nw - 1);
                    if p.omega <= omega_max * (1.0 + 1e-12) {
                        col[b] += p.weight;
                    }
                }
                Some(eta) => {
                    for (k, c) in col.iter_mut().enumerate() {
                        let x = omega[k] - p.omega;
                        *c += p.weight * dw * eta / PI / (x * x + eta * eta);
                    }
                }
            }
        }
    }
    let peak = raw.iter().copied().fold(0.0f64, f64::max);
    let intensity = raw
        .iter()
        .map(|v| if peak > 0.0 { v / peak } else { 0.0 })
        .collect();
    Ok(DsfGrid {
        n_sites: n,
        q: qs,
        omega,
        bin_width: dw,
        raw,
        intensity,
        peak,
        poles,
        static_sf,
        ground_energy,
    })
}

// ---------------------------------------------------------------------------
// Susceptibility and sound velocity

#[derive(Debug, Clone, Serialize)]
pub struct SusceptibilityResult {
    /// `kappa = J / (2 e'')` with `e(m)` the energy per site at `m = M_z/N`.
    pub kappa: f64,
    pub kappa_err: f64,
    /// `u = 2 J a pi kappa K` (a = 1).
    pub u: f64,
    pub u_over_2j: f64,
    /// `u = 2 J K / (pi kappa)`, from the bosonization identity
    /// `dn/dmu = K / (pi u)` with `dn/dmu = kappa / (2J)`. Agrees with `u`
    /// only when `pi kappa = 1`.
    pub u_compressibility: f64,
    pub center_mz: i64,
    pub energies: Vec<(i64, f64)>,
    pub curvature: f64,
}

/// Compressibility from the second difference of sector extremal energies
/// around the smallest achievable `|M_z|`, and the implied sound velocity.
///
/// The per-spin normalization makes the nearest-neighbour chain give
/// `kappa = 1/pi`, so the relation closes on `u = 2J` for `K = 1`.
pub fn susceptibility_and_velocity(
    matrices: &CouplingMatrices,
    which: Which,
    j_xy: f64,
    k_luttinger: f64,
    opts: &LanczosOptions,
) -> Result<SusceptibilityResult> {
    let n = matrices.n_sites();
    if n < 3 {
        return Err(Error::Exact("susceptibility needs at least 3 sites".into()));
    }
    let center = n.div_ceil(2);
    if center + 1 > n {
        return Err(Error::Exact("no sector above the centre".into()));
    }
    let mut energies = Vec::new();
    let mut max_res = 0.0f64;
    for n_up in [center - 1, center, center + 1] {
        let basis = Arc::new(enumerate_sector(n, n_up)?);
        let r = lanczos_extremal(matrices, basis.clone(), which, opts)?;
        let e = match which {
            Which::Lowest => r.energy,
            Which::Highest => -r.energy,
        };
        max_res = max_res.max(r.residual);
        energies.push((2 * n_up as i64 - n as i64, e));
    }
    let curvature = n as f64 * (energies[0].1 + energies[2].1 - 2.0 * energies[1].1) / 4.0;
    if !(curvature > 0.0) {
        return Err(Error::Exact(format!(
            "non-positive energy curvature {curvature:.3e}: sectors degenerate"
        )));
    }
    let kappa = j_xy / (2.0 * curvature);
    let kappa_err = kappa * (n as f64 * max_res) / curvature;
    let u = 2.0 * j_xy * PI * kappa * k_luttinger;
    Ok(SusceptibilityResult {
        kappa,
        kappa_err,
        u,
        u_over_2j: u / (2.0 * j_xy),
        u_compressibility: 2.0 * j_xy * k_luttinger / (PI * kappa),
        center_mz: energies[1].0,
        energies,
        curvature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::{observable_cxx, observable_czz, observable_sz};
    use crate::lattice::{table, Boundary, VdwEnergies};
    use approx::assert_abs_diff_eq;

    fn ring(n: usize, model: &CouplingModel) -> CouplingMatrices {
        build_couplings(&ChainGeometry::periodic(n).unwrap(), model).unwrap()
    }

    fn sector(n: usize, k: usize) -> Arc<SectorBasis> {
        Arc::new(enumerate_sector(n, k).unwrap())
    }

    #[test]
    fn two_site_extremes() {
        let j = 1.3;
        let m = ring(
            2,
            &CouplingModel::dipolar(j, Sign::Ferro, VdwEnergies::zero()),
        );
        let lo =
            lanczos_extremal(&m, sector(2, 1), Which::Lowest, &LanczosOptions::default()).unwrap();
        assert_abs_diff_eq!(lo.energy, -j, epsilon = 1e-12);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(lo.state.amplitudes[0].re, r, epsilon = 1e-12);
        assert_abs_diff_eq!(lo.state.amplitudes[1].re, r, epsilon = 1e-12);
        let hi =
            lanczos_extremal(&m, sector(2, 1), Which::Highest, &LanczosOptions::default()).unwrap();
        assert_abs_diff_eq!(hi.energy, j, epsilon = 1e-12);
        let spec = full_spectrum(&m, sector(2, 1)).unwrap();
        assert_abs_diff_eq!(spec.energies[0], -j, epsilon = 1e-12);
        assert_abs_diff_eq!(spec.energies[1], j, epsilon = 1e-12);
    }

    #[test]
    fn three_site_ring_by_hand() {
        // one up spin hopping on a triangle: -J times the adjacency matrix
        let j = 0.9;
        let m = ring(
            3,
            &CouplingModel::dipolar(j, Sign::Ferro, VdwEnergies::zero()),
        );
        let spec = full_spectrum(&m, sector(3, 1)).unwrap();
        let t = m.xy.get(0, 1);
        assert_abs_diff_eq!(t, j, epsilon = 1e-12);
        for (e, want) in spec.energies.iter().zip([-2.0 * t, t, t]) {
            assert_abs_diff_eq!(*e, want, epsilon = 1e-12);
        }
        let gram = spec.states.transpose() * &spec.states;
        assert!((gram - DMatrix::identity(3, 3)).abs().max() < 1e-10);
    }

    /// Free-fermion ring energy for a nearest-neighbour XY ring at filling `p`:
    /// periodic fermions for odd `p`, antiperiodic for even `p`.
    fn nn_ring_energy(n: usize, p: usize, j: f64) -> f64 {
        let shift = if p % 2 == 1 { 0.0 } else { 0.5 };
        let mut eps: Vec<f64> = (0..n)
            .map(|k| -2.0 * j * (2.0 * PI * (k as f64 + shift) / n as f64).cos())
            .collect();
        eps.sort_by(f64::total_cmp);
        eps[..p].iter().sum()
    }

    #[test]
    fn nn_ring_ground_energy_matches_fermion_sea() {
        let m = ring(12, &CouplingModel::nearest_neighbor(1.0));
        for p in [5, 6] {
            let r = lanczos_extremal(&m, sector(12, p), Which::Lowest, &LanczosOptions::default())
                .unwrap();
            assert_abs_diff_eq!(r.energy, nn_ring_energy(12, p, 1.0), epsilon = 1e-9);
            assert!(r.residual <= 1e-8 * r.energy.abs());
        }
    }

    #[test]
    fn lanczos_agrees_with_dense_and_sign_flip() {
        let model = CouplingModel::dipolar(1.0, Sign::Ferro, table::VDW_ADIABATIC);
        let m = ring(12, &model);
        let b = sector(12, 6);
        let op = SectorOperator::new(b.clone(), &m).unwrap();
        let dense = operator_spectrum(&op, None).unwrap();
        let lo = lanczos_operator(&op, Which::Lowest, None, &LanczosOptions::default()).unwrap();
        assert_abs_diff_eq!(lo.energy, dense.energies[0], epsilon = 1e-9);
        let hi = lanczos_operator(&op, Which::Highest, None, &LanczosOptions::default()).unwrap();
        assert_abs_diff_eq!(hi.energy, *dense.energies.last().unwrap(), epsilon = 1e-9);
        let neg = lanczos_operator(
            &op.negated(),
            Which::Lowest,
            None,
            &LanczosOptions::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(neg.energy, -hi.energy, epsilon = 1e-9);
        let overlap = neg.state.inner(&hi.state).norm();
        assert_abs_diff_eq!(overlap, 1.0, epsilon = 1e-7);
    }

    #[test]
    fn lanczos_is_seed_deterministic() {
        let m = ring(
            14,
            &CouplingModel::dipolar(1.0, Sign::Ferro, VdwEnergies::zero()),
        );
        let opts = LanczosOptions {
            seed: 5,
            ..Default::default()
        };
        let a = lanczos_extremal(&m, sector(14, 7), Which::Lowest, &opts).unwrap();
        let b = lanczos_extremal(&m, sector(14, 7), Which::Lowest, &opts).unwrap();
        assert_eq!(a.energy.to_bits(), b.energy.to_bits());
        assert_eq!(a.state.amplitudes, b.state.amplitudes);
    }

    #[test]
    fn zero_hamiltonian_is_identity() {
        let m = ring(6, &CouplingModel::nearest_neighbor(1.0)).xy_only();
        let zero = CouplingMatrices {
            xy: crate::lattice::SymMatrix::zeros(6),
            ..m
        };
        let b = sector(6, 3);
        let s = SectorState::from_real(
            b.clone(),
            &(0..b.dim()).map(|k| (k as f64).sin()).collect::<Vec<_>>(),
        );
        let (out, _) =
            krylov_propagate(&zero, None, &s, 0.0, 3.0, KrylovOptions::default()).unwrap();
        for (a, b) in out.amplitudes.iter().zip(&s.amplitudes) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn two_site_rabi_oscillation() {
        let j = 1.7;
        let m = ring(
            2,
            &CouplingModel::dipolar(j, Sign::Ferro, VdwEnergies::zero()),
        );
        let b = sector(2, 1);
        let s = SectorState::from_config(b.clone(), 0b01).unwrap();
        for t in [0.1, 0.5, 1.3, 2.9] {
            let (out, _) =
                krylov_propagate(&m, None, &s, 0.0, t, KrylovOptions::default()).unwrap();
            let p = out.amplitudes[b.rank(0b10)].norm_sqr();
            assert_abs_diff_eq!(p, (j * t).sin().powi(2), epsilon = 1e-10);
        }
    }

    #[test]
    fn energy_and_norm_conservation() {
        let model = CouplingModel::dipolar(1.0, Sign::Ferro, table::VDW_QUENCH);
        let m = ring(12, &model);
        let b = sector(12, 6);
        let op = SectorOperator::new(b.clone(), &m).unwrap();
        let neel: u32 = (0..12).filter(|i| i % 2 == 0).map(|i| 1u32 << i).sum();
        let mut s = SectorState::from_config(b.clone(), neel).unwrap();
        let energy = |s: &SectorState| {
            let mut w = vec![Complex64::default(); s.dim()];
            op.apply(None, &s.amplitudes, &mut w);
            par::cdot(&s.amplitudes, &w).re
        };
        let e0 = energy(&s);
        let prop = Propagator::new(
            &op,
            KrylovOptions {
                dt: 0.05,
                ..Default::default()
            },
        )
        .unwrap();
        let mut stats = PropagationStats::default();
        for step in 0..20 {
            let before = s.norm();
            prop.evolve(
                None,
                &mut s.amplitudes,
                step as f64 * 0.5,
                (step + 1) as f64 * 0.5,
                &mut stats,
            )
            .unwrap();
            assert!((s.norm() - before).abs() < 1e-9);
        }
        assert!((energy(&s) - e0).abs() <= 1e-8 * e0.abs().max(1.0));
    }

    #[test]
    fn magnus_step_is_fourth_order() {
        let n = 10;
        let model = CouplingModel::dipolar(1.0, Sign::Ferro, VdwEnergies::zero());
        let m = ring(n, &model);
        let b = sector(n, 5);
        let op = SectorOperator::new(b.clone(), &m).unwrap();
        let mut rng = substream(2, Stream::StartVector, 99);
        let mut s = SectorState {
            basis: b.clone(),
            amplitudes: (0..b.dim())
                .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect(),
        };
        s.normalize();
        let light = |t: f64| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    if i % 2 == 0 {
                        6.0 * (1.0 + t).recip() + 2.0 * (3.0 * t).sin()
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let run = |dt: f64| {
            let prop = Propagator::new(
                &op,
                KrylovOptions {
                    dt,
                    krylov_dim: 40,
                    tol: 1e-14,
                },
            )
            .unwrap();
            let mut v = s.amplitudes.clone();
            let mut stats = PropagationStats::default();
            prop.evolve(Some(&light), &mut v, 0.0, 1.0, &mut stats)
                .unwrap();
            v
        };
        let (a, b2, c) = (run(0.2), run(0.1), run(0.05));
        let diff = |x: &[Complex64], y: &[Complex64]| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q).norm_sqr())
                .sum::<f64>()
                .sqrt()
        };
        let order = (diff(&a, &b2) / diff(&b2, &c)).log2();
        assert!(order >= 3.8, "observed order {order}");
    }

    #[test]
    fn zero_temperature_limit_matches_ground_state() {
        let n = 8;
        let geom = ChainGeometry::periodic(n).unwrap();
        let model = CouplingModel::dipolar(1.0, Sign::Ferro, VdwEnergies::zero());
        let m = build_couplings(&geom, &model).unwrap();
        // find the sector holding the overall ground state
        let (best, _) = (0..=n)
            .map(|k| {
                (
                    k,
                    lanczos_extremal(&m, sector(n, k), Which::Lowest, &LanczosOptions::default())
                        .unwrap()
                        .energy,
                )
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let gs = lanczos_extremal(
            &m,
            sector(n, best),
            Which::Lowest,
            &LanczosOptions::default(),
        )
        .unwrap();
        assert!(!gs.degenerate);
        let th = thermal_observables(
            &geom,
            &model,
            &ThermalOptions {
                temperature: 0.01,
                transverse_field: 0.0,
                hole_density: 0.0,
                n_realizations: 1,
                seed: 0,
            },
        )
        .unwrap();
        let cx = observable_cxx(&gs.state);
        let cz = observable_czz(&gs.state);
        let sz = observable_sz(&gs.state);
        for k in 0..n * n {
            assert_abs_diff_eq!(th.cx[k], cx[k], epsilon = 1e-6);
            assert_abs_diff_eq!(th.cz[k], cz[k], epsilon = 1e-6);
        }
        for (a, b) in th.sz.iter().zip(&sz) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn infinite_temperature_is_uncorrelated() {
        let n = 6;
        let geom = ChainGeometry::periodic(n).unwrap();
        let model = CouplingModel::dipolar(1.0, Sign::Antiferro, table::VDW_ADIABATIC);
        for field in [0.0, 0.05] {
            let th = thermal_observables(
                &geom,
                &model,
                &ThermalOptions {
                    temperature: 1e9,
                    transverse_field: field,
                    hole_density: 0.0,
                    n_realizations: 1,
                    seed: 0,
                },
            )
            .unwrap();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        assert!(th.cx[i * n + j].abs() < 1e-6);
                        assert!(th.cz[i * n + j].abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn transverse_field_path_agrees_with_sectors_at_zero_field() {
        let n = 6;
        let geom = ChainGeometry::periodic(n).unwrap();
        let model = CouplingModel::dipolar(1.0, Sign::Ferro, table::VDW_ADIABATIC);
        let m = build_couplings(&geom, &model).unwrap();
        let a = thermal_sample(&m, 1.0, 0.7, 0.0).unwrap();
        let b = thermal_sample(&m, 1.0, 0.7, 1e-300).unwrap();
        for k in 0..n * n {
            assert_abs_diff_eq!(a.cx[k], b.cx[k], epsilon = 1e-10);
            assert_abs_diff_eq!(a.cz[k], b.cz[k], epsilon = 1e-10);
        }
        assert_abs_diff_eq!(a.energy, b.energy, epsilon = 1e-10);
    }

    #[test]
    fn holes_are_reported_missing() {
        let n = 8;
        let geom = ChainGeometry::new(n, Boundary::PeriodicRing, [2]).unwrap();
        let model = CouplingModel::dipolar(1.0, Sign::Ferro, VdwEnergies::zero());
        let th = thermal_observables(
            &geom,
            &model,
            &ThermalOptions {
                temperature: 0.3,
                transverse_field: 0.0,
                hole_density: 0.2,
                n_realizations: 6,
                seed: 1,
            },
        )
        .unwrap();
        assert!(th.sz[2].is_nan());
        assert!(th.cz[2 * n + 5].is_nan());
        assert!(th.cx[n + 4].is_finite());
    }

    #[test]
    fn varmz_offset() {
        let c = vec![1.0, -0.2, -0.2, 1.0];
        assert_eq!(varmz_offset_correction(&c, 1.6), c);
        let n = 24;
        let c: Vec<f64> = (0..n * n).map(|k| ((k * 7) % 5) as f64 * 0.01).collect();
        let sum: f64 = c.iter().sum();
        let out = varmz_offset_correction(&c, 0.0);
        assert_abs_diff_eq!(out[3] - c[3], -sum / 576.0, epsilon = 1e-15);
        assert!(out.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn ground_sector_has_zero_magnetization_variance() {
        let m = ring(
            10,
            &CouplingModel::dipolar(1.0, Sign::Ferro, table::VDW_ADIABATIC),
        );
        let r =
            lanczos_extremal(&m, sector(10, 5), Which::Lowest, &LanczosOptions::default()).unwrap();
        let s: f64 = observable_czz(&r.state).iter().sum();
        assert!(s.abs() < 1e-10);
    }

    #[test]
    fn dsf_sum_rule_and_conservation() {
        let n = 10;
        let m = ring(
            n,
            &CouplingModel::dipolar(1.0, Sign::Antiferro, table::VDW_ADIABATIC),
        );
        let grid =
            dynamical_structure_factor(&m, Which::Highest, n / 2, &DsfOptions::default()).unwrap();
        // direct <0|S_{-q} S_q|0> from the ground-state ZZ moments
        let gs = lanczos_extremal(
            &m,
            sector(n, n / 2),
            Which::Highest,
            &LanczosOptions::default(),
        )
        .unwrap();
        let zz = crate::hilbert::ZMoments::of_sector(&gs.state);
        for (iq, &q) in grid.q.iter().enumerate() {
            let mut direct = 0.0;
            for i in 0..n {
                for j in 0..n {
                    direct += (q * (j as f64 - i as f64)).cos() * zz.zz[i * n + j] / n as f64;
                }
            }
            let integrated: f64 = grid.column(iq).iter().sum();
            assert_abs_diff_eq!(integrated, direct, epsilon = 1e-8);
            assert_abs_diff_eq!(grid.static_sf[iq], direct, epsilon = 1e-8);
        }
        let q0: f64 = grid.poles[0]
            .iter()
            .filter(|p| p.omega > 1e-9)
            .map(|p| p.weight)
            .sum();
        assert!(q0 < 1e-20);
        assert!(grid
            .intensity
            .iter()
            .all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn dsf_routes_agree_on_ridge() {
        let n = 12;
        let m = ring(
            n,
            &CouplingModel::dipolar(1.0, Sign::Antiferro, table::VDW_ADIABATIC),
        );
        let dense =
            dynamical_structure_factor(&m, Which::Highest, n / 2, &DsfOptions::default()).unwrap();
        let lz = dynamical_structure_factor(
            &m,
            Which::Highest,
            n / 2,
            &DsfOptions {
                route: DsfRoute::Lanczos { steps: 150 },
                ..Default::default()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(
            dense.ridge_velocity().unwrap(),
            lz.ridge_velocity().unwrap(),
            epsilon = 1e-6
        );
        for iq in 0..dense.q.len() {
            assert_abs_diff_eq!(dense.static_sf[iq], lz.static_sf[iq], epsilon = 1e-10);
        }
    }

    #[test]
    fn dsf_support_inside_two_spinon_continuum() {
        // free fermions: S^z_q creates one particle-hole pair, omega in
        // [2J|sin q|, 4J sin(q/2)] for a half-filled ring in the thermodynamic limit;
        // at finite N the poles are differences of ring single-particle energies.
        let n = 12;
        let j = 1.0;
        let m = ring(n, &CouplingModel::nearest_neighbor(j));
        let grid =
            dynamical_structure_factor(&m, Which::Lowest, n / 2, &DsfOptions::default()).unwrap();
        let shift = 0.5; // even filling: antiperiodic
        let eps = |k: f64| -2.0 * j * (2.0 * PI * (k + shift) / n as f64).cos();
        for (iq, _) in grid.q.iter().enumerate().skip(1) {
            let mut allowed: Vec<f64> = Vec::new();
            for k in 0..n {
                let (e_in, e_out) = (eps(k as f64), eps(((k + iq) % n) as f64));
                let occupied = |e: f64| {
                    let mut all: Vec<f64> = (0..n).map(|x| eps(x as f64)).collect();
                    all.sort_by(f64::total_cmp);
                    e <= all[n / 2 - 1] + 1e-12
                };
                if occupied(e_in) && !occupied(e_out) {
                    allowed.push(e_out - e_in);
                }
            }
            for p in grid.poles[iq].iter().filter(|p| p.weight > 1e-12) {
                assert!(
                    allowed.iter().any(|a| (a - p.omega).abs() < grid.bin_width),
                    "pole {} not allowed",
                    p.omega
                );
            }
        }
    }

    #[test]
    fn nn_susceptibility_closes_on_free_velocity() {
        let n = 200;
        // free-fermion energies per sector avoid ED at large N
        let e = |p: usize| nn_ring_energy(n, p, 1.0);
        let curv = n as f64 * (e(n / 2 + 1) + e(n / 2 - 1) - 2.0 * e(n / 2)) / 4.0;
        let kappa = 1.0 / (2.0 * curv);
        assert!((kappa - 1.0 / PI).abs() < 0.02);
        // and the ED route at small N agrees with the fermion route
        let m = ring(12, &CouplingModel::nearest_neighbor(1.0));
        let r =
            susceptibility_and_velocity(&m, Which::Lowest, 1.0, 1.0, &LanczosOptions::default())
                .unwrap();
        let e12 = |p| nn_ring_energy(12, p, 1.0);
        let want = 1.0 / (2.0 * 12.0 * (e12(7) + e12(5) - 2.0 * e12(6)) / 4.0);
        assert_abs_diff_eq!(r.kappa, want, epsilon = 1e-8);
    }
}
