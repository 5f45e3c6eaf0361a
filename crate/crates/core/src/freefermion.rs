//! Jordan-Wigner solution of nearest-neighbour XY chains.
//!
//! `H = -sum_i J_i (S+_i S-_{i+1} + h.c.)` maps to the hopping matrix
//! `h_{i,i+1} = -J_i`. On a ring the boundary bond picks up the fermion
//! parity `(-1)^(n-1)`, so odd fillings are periodic and even fillings
//! antiperiodic.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::exact::nan_mean_stderr;
use crate::lattice::{CouplingMatrices, SymMatrix};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FermionBoundary {
    Open,
    Periodic,
}

/// Bond strengths `J_i` on `(i, i+1)`; a ring has one extra bond `(N-1, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bonds {
    pub n_sites: usize,
    pub boundary: FermionBoundary,
    pub j: Vec<f64>,
}

impl Bonds {
    pub fn new(n_sites: usize, boundary: FermionBoundary, j: Vec<f64>) -> Result<Self> {
        let want = match boundary {
            FermionBoundary::Open => n_sites.saturating_sub(1),
            FermionBoundary::Periodic => n_sites,
        };
        if n_sites < 2 || j.len() != want {
            return Err(Error::FreeFermion(format!(
                "{n_sites} sites with {:?} boundary need {want} bonds, got {}",
                boundary,
                j.len()
            )));
        }
        if boundary == FermionBoundary::Periodic && n_sites < 3 {
            return Err(Error::FreeFermion(
                "a periodic chain needs at least 3 sites".into(),
            ));
        }
        Ok(Self {
            n_sites,
            boundary,
            j,
        })
    }

    pub fn uniform(n_sites: usize, boundary: FermionBoundary, j: f64) -> Result<Self> {
        let len = if boundary == FermionBoundary::Open {
            n_sites.saturating_sub(1)
        } else {
            n_sites
        };
        Self::new(n_sites, boundary, vec![j; len])
    }

    /// Same chain as spin couplings for the exact solvers.
    pub fn to_couplings(&self) -> CouplingMatrices {
        let n = self.n_sites;
        let mut xy = SymMatrix::zeros(n);
        for (b, &jb) in self.j.iter().enumerate() {
            xy.set(b, (b + 1) % n, jb);
        }
        CouplingMatrices {
            xy,
            zz: SymMatrix::zeros(n),
            field_z: vec![0.0; n],
            constant: 0.0,
        }
    }

    pub fn hopping_matrix(&self, n_particles: usize) -> DMatrix<f64> {
        let n = self.n_sites;
        let mut h = DMatrix::zeros(n, n);
        for (b, &jb) in self.j.iter().enumerate() {
            let (a, c) = (b, (b + 1) % n);
            let t = if c == 0 {
                // boundary bond: JW string of the remaining n-1 fermions
                let parity = if n_particles % 2 == 1 { 1.0 } else { -1.0 };
                -jb * parity
            } else {
                -jb
            };
            h[(a, c)] += t;
            h[(c, a)] += t;
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct FreeFermionState {
    /// `G_ij = <c+_i c_j>`.
    pub g: DMatrix<f64>,
    pub energy: f64,
    pub orbital_energies: Vec<f64>,
    pub n_particles: usize,
}

/// Filled Fermi sea of the lowest `n_particles` orbitals.
pub fn jw_solve(bonds: &Bonds, n_particles: usize) -> Result<FreeFermionState> {
    let mut states = jw_shell_states(bonds, n_particles)?;
    if states.len() > 1 {
        return Err(Error::FreeFermion(format!(
            "open Fermi shell at filling {n_particles}/{}: ground state is degenerate",
            bonds.n_sites
        )));
    }
    Ok(states.pop().expect("one state"))
}

/// Ground state, or the two Slater determinants spanning an unresolved
/// two-orbital Fermi shell with one particle to place. Their equal mixture is
/// the zero-temperature limit when the splitting is below resolution.
pub fn jw_shell_states(bonds: &Bonds, n_particles: usize) -> Result<Vec<FreeFermionState>> {
    let n = bonds.n_sites;
    if n_particles > n {
        return Err(Error::FreeFermion(format!(
            "{n_particles} particles on {n} sites"
        )));
    }
    let eig = SymmetricEigen::new(bonds.hopping_matrix(n_particles));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eps: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let build = |occupied: &[usize]| {
        let occ = DMatrix::from_fn(n, occupied.len(), |r, c| {
            eig.eigenvectors[(r, order[occupied[c]])]
        });
        FreeFermionState {
            g: &occ * occ.transpose(),
            energy: occupied.iter().map(|&k| eps[k]).sum(),
            orbital_energies: eps.clone(),
            n_particles,
        }
    };
    let lowest: Vec<usize> = (0..n_particles).collect();
    if n_particles == 0 || n_particles == n {
        return Ok(vec![build(&lowest)]);
    }
    let scale = eps.iter().fold(0.0f64, |m, e| m.max(e.abs())).max(1e-300);
    let tol = 1e-10 * scale;
    if eps[n_particles] - eps[n_particles - 1] >= tol {
        return Ok(vec![build(&lowest)]);
    }
    let below = n_particles >= 2 && eps[n_particles - 1] - eps[n_particles - 2] < tol;
    let above = n_particles + 1 < n && eps[n_particles + 1] - eps[n_particles] < tol;
    if below || above {
        return Err(Error::FreeFermion(format!(
            "Fermi shell at filling {n_particles}/{n} is more than two-fold degenerate"
        )));
    }
    let mut swapped = lowest.clone();
    swapped[n_particles - 1] = n_particles;
    Ok(vec![build(&lowest), build(&swapped)])
}

/// `<Z_i> = 2 G_ii - 1`.
pub fn sz_from_g(g: &DMatrix<f64>) -> Vec<f64> {
    (0..g.nrows()).map(|i| 2.0 * g[(i, i)] - 1.0).collect()
}

/// Connected `C^z`, row-major.
pub fn cz_from_g(g: &DMatrix<f64>) -> Vec<f64> {
    let n = g.nrows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = if i == j {
                let z = 2.0 * g[(i, i)] - 1.0;
                1.0 - z * z
            } else {
                -4.0 * g[(i, j)] * g[(j, i)]
            };
        }
    }
    out
}

/// Entry `(a, b)` of the string matrix starting at site `i`.
fn string_entry(g: &DMatrix<f64>, i: usize, a: usize, b: usize) -> f64 {
    let (l, m) = (i + a, i + b + 1);
    2.0 * g[(l, m)] - if l == m { 1.0 } else { 0.0 }
}

/// `<X_i X_j>` for `i < j` from the `(j-i) x (j-i)` string determinant.
pub fn cx_from_g(g: &DMatrix<f64>, i: usize, j: usize) -> Result<f64> {
    if i >= j || j >= g.nrows() {
        return Err(Error::FreeFermion(format!(
            "cx_from_g needs i < j < N, got ({i}, {j})"
        )));
    }
    let r = j - i;
    if r > 200 {
        log::warn!("string determinant of size {r}: conditioning not guaranteed");
    }
    let m = DMatrix::from_fn(r, r, |a, b| string_entry(g, i, a, b));
    Ok(m.lu().determinant())
}

/// `<X_i X_{i+r}>` for `r = 1..=r_max` from one unpivoted LU sweep: the
/// leading minors of the string matrix are exactly the requested determinants.
/// Falls back to pivoted determinants if a pivot becomes negligible.
pub fn cx_row_from_g(g: &DMatrix<f64>, i: usize, r_max: usize) -> Vec<f64> {
    let n = g.nrows();
    let r_max = r_max.min(n - 1 - i);
    let mut out = Vec::with_capacity(r_max);
    if r_max == 0 {
        return out;
    }
    let mut a = DMatrix::from_fn(r_max, r_max, |p, q| string_entry(g, i, p, q));
    let mut det = 1.0;
    for k in 0..r_max {
        let pivot = a[(k, k)];
        let scale = (0..r_max)
            .map(|c| a[(k, c)].abs())
            .fold(0.0f64, f64::max)
            .max(1e-300);
        if pivot.abs() < 1e-10 * scale {
            log::debug!(
                "small pivot at r = {} from site {i}; switching to pivoted LU",
                k + 1
            );
            for r in (k + 1)..=r_max {
                out.push(cx_from_g(g, i, i + r).unwrap_or(f64::NAN));
            }
            return out;
        }
        det *= pivot;
        out.push(det);
        for row in (k + 1)..r_max {
            let f = a[(row, k)] / pivot;
            if f != 0.0 {
                for col in (k + 1)..r_max {
                    a[(row, col)] -= f * a[(k, col)];
                }
            }
        }
    }
    out
}

/// Full `C^x` matrix (`<X_i> = 0` at fixed particle number), diagonal 1.
pub fn cx_matrix_from_g(g: &DMatrix<f64>) -> Vec<f64> {
    let n = g.nrows();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for (r, v) in cx_row_from_g(g, i, n - 1 - i).into_iter().enumerate() {
            let j = i + r + 1;
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct DisorderOptions {
    pub n_sites: usize,
    pub j: f64,
    /// Probability that a bond is weakened.
    pub p: f64,
    pub weak_scale: f64,
    pub n_realizations: usize,
    pub seed: u64,
    pub r_max: usize,
    /// Sites dropped at each chain end before pair statistics (open chains).
    pub edge_exclusion: usize,
    pub boundary: FermionBoundary,
}

impl DisorderOptions {
    pub fn new(n_sites: usize, p: f64, n_realizations: usize, seed: u64) -> Self {
        Self {
            n_sites,
            j: 1.0,
            p,
            weak_scale: 0.125,
            n_realizations,
            seed,
            r_max: n_sites / 2,
            edge_exclusion: 1,
            boundary: FermionBoundary::Open,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DisorderResult {
    pub r: Vec<usize>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_realizations: usize,
    /// Realizations whose Fermi shell was unresolved and averaged.
    pub n_degenerate: usize,
}

/// Pair-averaged `C^x(r)` at half filling. On a ring only pairs whose
/// connecting string avoids the closing bond are used, which covers every
/// separation up to `N - 1`.
pub fn chain_cx_profile(bonds: &Bonds, r_max: usize, edge_exclusion: usize) -> Result<Vec<f64>> {
    shell_cx_profile(bonds, r_max, edge_exclusion).map(|(p, _)| p)
}

/// As [`chain_cx_profile`], averaging over an unresolved Fermi shell; the
/// flag reports whether that happened.
fn shell_cx_profile(
    bonds: &Bonds,
    r_max: usize,
    edge_exclusion: usize,
) -> Result<(Vec<f64>, bool)> {
    let n = bonds.n_sites;
    let edge = match bonds.boundary {
        FermionBoundary::Open => edge_exclusion,
        FermionBoundary::Periodic => 0,
    };
    let lo = edge;
    let hi = n.saturating_sub(edge); // exclusive
    if hi <= lo + 1 {
        return Err(Error::FreeFermion("edge exclusion leaves no pairs".into()));
    }
    let states = jw_shell_states(bonds, n / 2)?;
    let r_max = r_max.min(hi - lo - 1);
    let mut sum = vec![0.0; r_max];
    let mut count = vec![0usize; r_max];
    for st in &states {
        let rows: Vec<Vec<f64>> = (lo..hi - 1)
            .into_par_iter()
            .map(|i| cx_row_from_g(&st.g, i, r_max.min(hi - 1 - i)))
            .collect();
        for row in rows {
            for (r, v) in row.into_iter().enumerate() {
                if v.is_finite() {
                    sum[r] += v;
                    count[r] += 1;
                }
            }
        }
    }
    let profile = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();
    Ok((profile, states.len() > 1))
}

/// Bimodal bond disorder: each bond independently becomes `weak_scale * J`
/// with probability `p`. Half filling.
pub fn disorder_ensemble(opts: &DisorderOptions) -> Result<DisorderResult> {
    if !(0.0..=1.0).contains(&opts.p) {
        return Err(Error::FreeFermion(format!(
            "bond probability {} outside [0, 1]",
            opts.p
        )));
    }
    if opts.n_realizations == 0 {
        return Err(Error::FreeFermion("need at least one realization".into()));
    }
    let n = opts.n_sites;
    let results: Vec<(Vec<f64>, bool)> = (0..opts.n_realizations)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(opts.seed, Stream::Disorder, k as u64);
            let n_bonds = match opts.boundary {
                FermionBoundary::Open => n - 1,
                FermionBoundary::Periodic => n,
            };
            let j: Vec<f64> = (0..n_bonds)
                .map(|_| {
                    if rng.random::<f64>() < opts.p {
                        opts.j * opts.weak_scale
                    } else {
                        opts.j
                    }
                })
                .collect();
            let bonds = Bonds::new(n, opts.boundary, j)?;
            shell_cx_profile(&bonds, opts.r_max, opts.edge_exclusion)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = results.iter().map(|p| p.0.as_slice()).collect();
    let (mean, stderr) = nan_mean_stderr(&refs);
    Ok(DisorderResult {
        r: (1..=mean.len()).collect(),
        mean,
        stderr,
        n_realizations: opts.n_realizations,
        n_degenerate: results.iter().filter(|p| p.1).count(),
    })
}
