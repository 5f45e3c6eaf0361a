//! Fixed-magnetization bases and matrix-free Hamiltonian action.
//!
//! A configuration is an `N`-bit integer with bit `i` set when spin `i` points
//! up. Each sector holds the configurations with a fixed number of up spins in
//! ascending integer order. Ranking splits the word into a low and a high half
//! and adds two table lookups, so the flip-flop kernel needs no hashing.
//!
//! Holes stay in the configuration as spectator bits fixed to down; their
//! couplings are zero upstream so they never move.

use std::ops::{AddAssign, Mul};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::lattice::{CouplingMatrices, SymMatrix};
use crate::par::{self, CHUNK};
use crate::{Error, Result};

pub const MAX_SITES: usize = 30;

pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

#[derive(Debug)]
pub struct SectorBasis {
    n_sites: usize,
    n_up: usize,
    configs: Vec<u32>,
    low_bits: usize,
    low_rank: Vec<u32>,
    high_offset: Vec<u32>,
}

/// Enumerate the `C(N, n_up)` configurations with `n_up` spins up.
pub fn enumerate_sector(n_sites: usize, n_up: usize) -> Result<SectorBasis> {
    if n_sites == 0 || n_sites > MAX_SITES {
        return Err(Error::Hilbert(format!(
            "basis enumeration supports 1..={MAX_SITES} sites, got {n_sites}"
        )));
    }
    if n_up > n_sites {
        return Err(Error::Hilbert(format!(
            "n_up = {n_up} exceeds N = {n_sites}"
        )));
    }
    let low_bits = n_sites / 2;
    let high_bits = n_sites - low_bits;

    let mut low_rank = vec![0u32; 1 << low_bits];
    let mut low_by_count: Vec<Vec<u32>> = vec![Vec::new(); low_bits + 1];
    for lo in 0..(1u32 << low_bits) {
        let k = lo.count_ones() as usize;
        low_rank[lo as usize] = low_by_count[k].len() as u32;
        low_by_count[k].push(lo);
    }

    let dim = binomial(n_sites, n_up) as usize;
    let mut configs = Vec::with_capacity(dim);
    let mut high_offset = vec![u32::MAX; 1 << high_bits];
    for hi in 0..(1u32 << high_bits) {
        let k = hi.count_ones() as usize;
        if k > n_up || n_up - k > low_bits {
            continue;
        }
        high_offset[hi as usize] = configs.len() as u32;
        for &lo in &low_by_count[n_up - k] {
            configs.push((hi << low_bits) | lo);
        }
    }
    debug_assert_eq!(configs.len(), dim);
    Ok(SectorBasis {
        n_sites,
        n_up,
        configs,
        low_bits,
        low_rank,
        high_offset,
    })
}

impl SectorBasis {
    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_up(&self) -> usize {
        self.n_up
    }

    /// `M_z = 2 n_up - N`
    pub fn magnetization(&self) -> i64 {
        2 * self.n_up as i64 - self.n_sites as i64
    }

    pub fn dim(&self) -> usize {
        self.configs.len()
    }

    pub fn configs(&self) -> &[u32] {
        &self.configs
    }

    pub fn config(&self, k: usize) -> u32 {
        self.configs[k]
    }

    #[inline(always)]
    pub fn rank(&self, c: u32) -> usize {
        let lo = c & ((1u32 << self.low_bits) - 1);
        let hi = c >> self.low_bits;
        (self.high_offset[hi as usize] + self.low_rank[lo as usize]) as usize
    }

    /// Rank with validation, for configurations coming from outside.
    pub fn try_rank(&self, c: u32) -> Option<usize> {
        if self.n_sites < 32 && c >> self.n_sites != 0 {
            return None;
        }
        if c.count_ones() as usize != self.n_up {
            return None;
        }
        Some(self.rank(c))
    }

    fn full_mask(&self) -> u32 {
        if self.n_sites == 32 {
            u32::MAX
        } else {
            (1u32 << self.n_sites) - 1
        }
    }
}

/// Scalar types the matrix-free kernels work on.
pub trait Amplitude:
    Copy + Send + Sync + Default + AddAssign + Mul<f64, Output = Self> + 'static
{
}
impl Amplitude for f64 {}
impl Amplitude for Complex64 {}

/// Hamiltonian restricted to one sector, with the diagonal precomputed.
///
/// `H = -(1/2) sum_{i<j} xy_ij (XX + YY) + diag`, optionally multiplied by an
/// overall sign so that the highest state of `H` is found as the lowest of `-H`.
#[derive(Debug, Clone)]
pub struct SectorOperator {
    basis: Arc<SectorBasis>,
    xy: Vec<f64>,
    diag: Vec<f64>,
    sign: f64,
}

fn active_light(light: Option<&[f64]>) -> Vec<(u32, f64)> {
    light
        .map(|l| {
            l.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, &v)| (i as u32, v))
                .collect()
        })
        .unwrap_or_default()
}

impl SectorOperator {
    pub fn new(basis: Arc<SectorBasis>, matrices: &CouplingMatrices) -> Result<Self> {
        let n = basis.n_sites();
        if matrices.n_sites() != n {
            return Err(Error::Hilbert(format!(
                "coupling matrices are {}x{} but the basis has {n} sites",
                matrices.n_sites(),
                matrices.n_sites()
            )));
        }
        let xy = matrices.xy.as_slice().to_vec();
        let zz = &matrices.zz;
        let field = &matrices.field_z;
        let constant = matrices.constant;
        let diag: Vec<f64> = basis
            .configs()
            .par_iter()
            .map(|&c| diagonal_energy(c, n, zz, field, constant))
            .collect();
        Ok(Self {
            basis,
            xy,
            diag,
            sign: 1.0,
        })
    }

    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        out.sign = -self.sign;
        out
    }

    pub fn sign(&self) -> f64 {
        self.sign
    }

    pub fn basis(&self) -> &Arc<SectorBasis> {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    /// `y = H x` with an optional per-site energy `light[i] (1 + Z_i)/2`.
    pub fn apply<T: Amplitude>(&self, light: Option<&[f64]>, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(y.len(), self.dim());
        let n = self.basis.n_sites();
        let full = self.basis.full_mask();
        let light = active_light(light);
        let basis = &*self.basis;
        let xy = &self.xy;
        let sign = self.sign;
        y.par_chunks_mut(CHUNK)
            .enumerate()
            .for_each(|(chunk, out)| {
                let start = chunk * CHUNK;
                for (off, slot) in out.iter_mut().enumerate() {
                    let k = start + off;
                    let c = basis.configs[k];
                    let mut d = self.diag[k];
                    for &(site, e) in &light {
                        if c >> site & 1 == 1 {
                            d += e;
                        }
                    }
                    let mut acc = x[k] * (sign * d);
                    let mut ups = c;
                    while ups != 0 {
                        let i = ups.trailing_zeros() as usize;
                        ups &= ups - 1;
                        let row = &xy[i * n..(i + 1) * n];
                        let mut downs = !c & full;
                        while downs != 0 {
                            let j = downs.trailing_zeros() as usize;
                            downs &= downs - 1;
                            let t = row[j];
                            if t != 0.0 {
                                let target = c ^ (1 << i) ^ (1 << j);
                                acc += x[basis.rank(target)] * (-sign * t);
                            }
                        }
                    }
                    *slot = acc;
                }
            });
    }

    /// Diagonal energy of basis state `k` including an optional light shift.
    pub fn diagonal(&self, k: usize, light: Option<&[f64]>) -> f64 {
        let c = self.basis.configs[k];
        let extra: f64 = active_light(light)
            .iter()
            .filter(|(s, _)| c >> s & 1 == 1)
            .map(|(_, e)| e)
            .sum();
        self.sign * (self.diag[k] + extra)
    }

    /// Gershgorin bound on the spectral radius.
    pub fn norm_estimate(&self, light: Option<&[f64]>) -> f64 {
        let n = self.basis.n_sites();
        let light_max: f64 = light
            .map(|l| l.iter().map(|v| v.abs()).sum())
            .unwrap_or(0.0);
        let diag_max = self.diag.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let row_max = (0..n)
            .map(|i| {
                self.xy[i * n..(i + 1) * n]
                    .iter()
                    .map(|v| v.abs())
                    .sum::<f64>()
            })
            .fold(0.0f64, f64::max);
        diag_max + light_max + row_max * self.basis.n_up().min(n - self.basis.n_up()) as f64
    }

    /// Dense matrix of the operator, for small sectors.
    pub fn dense_matrix(&self, light: Option<&[f64]>) -> DMatrix<f64> {
        let dim = self.dim();
        let n = self.basis.n_sites();
        let full = self.basis.full_mask();
        let mut h = DMatrix::zeros(dim, dim);
        for k in 0..dim {
            let c = self.basis.configs[k];
            h[(k, k)] = self.diagonal(k, light);
            for i in 0..n {
                if c >> i & 1 == 0 {
                    continue;
                }
                for j in 0..n {
                    if (!c & full) >> j & 1 == 0 {
                        continue;
                    }
                    let t = self.xy[i * n + j];
                    if t != 0.0 {
                        let target = self.basis.rank(c ^ (1 << i) ^ (1 << j));
                        h[(k, target)] += -self.sign * t;
                    }
                }
            }
        }
        h
    }
}

fn diagonal_energy(c: u32, n: usize, zz: &SymMatrix, field: &[f64], constant: f64) -> f64 {
    let spin = |i: usize| if c >> i & 1 == 1 { 1.0 } else { -1.0 };
    let mut e = constant;
    for (i, &f) in field.iter().enumerate().take(n) {
        let si = spin(i);
        e += f * si;
        let row = zz.row(i);
        for (j, &w) in row.iter().enumerate().take(n).skip(i + 1) {
            if w != 0.0 {
                e += w * si * spin(j);
            }
        }
    }
    e
}

/// Unnormalized image `H|psi>` for one state (builds the operator each call).
pub fn apply_hamiltonian(
    matrices: &CouplingMatrices,
    light_shift: Option<&[f64]>,
    state: &SectorState,
) -> Result<SectorState> {
    let op = SectorOperator::new(state.basis.clone(), matrices)?;
    if let Some(l) = light_shift {
        if l.len() != state.basis.n_sites() {
            return Err(Error::Hilbert(format!(
                "light shift has {} entries for {} sites",
                l.len(),
                state.basis.n_sites()
            )));
        }
    }
    let mut out = vec![Complex64::default(); state.dim()];
    op.apply(light_shift, &state.amplitudes, &mut out);
    Ok(SectorState {
        basis: state.basis.clone(),
        amplitudes: out,
    })
}

/// Complex amplitudes over one sector basis.
#[derive(Debug, Clone)]
pub struct SectorState {
    pub basis: Arc<SectorBasis>,
    pub amplitudes: Vec<Complex64>,
}

impl SectorState {
    pub fn zeros(basis: Arc<SectorBasis>) -> Self {
        let dim = basis.dim();
        Self {
            basis,
            amplitudes: vec![Complex64::default(); dim],
        }
    }

    pub fn from_config(basis: Arc<SectorBasis>, config: u32) -> Result<Self> {
        let k = basis.try_rank(config).ok_or_else(|| {
            Error::Hilbert(format!("configuration {config:#b} is not in the sector"))
        })?;
        let mut s = Self::zeros(basis);
        s.amplitudes[k] = Complex64::new(1.0, 0.0);
        Ok(s)
    }

    pub fn from_real(basis: Arc<SectorBasis>, v: &[f64]) -> Self {
        assert_eq!(v.len(), basis.dim());
        Self {
            basis,
            amplitudes: v.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn norm(&self) -> f64 {
        par::cnorm(&self.amplitudes)
    }

    pub fn normalize(&mut self) -> f64 {
        let n = self.norm();
        if n > 0.0 {
            par::cscale(Complex64::new(1.0 / n, 0.0), &mut self.amplitudes);
        }
        n
    }

    pub fn inner(&self, other: &SectorState) -> Complex64 {
        par::cdot(&self.amplitudes, &other.amplitudes)
    }

    pub fn n_sites(&self) -> usize {
        self.basis.n_sites()
    }
}

/// Direct sum of sector states covering `n_up = 0..=N`.
#[derive(Debug, Clone)]
pub struct FullState {
    pub n_sites: usize,
    pub sectors: Vec<SectorState>,
}

impl FullState {
    /// Product state with amplitudes `(up_i, down_i)` on every site.
    pub fn product(
        n_sites: usize,
        local: impl Fn(usize) -> (Complex64, Complex64),
    ) -> Result<Self> {
        let factors: Vec<(Complex64, Complex64)> = (0..n_sites).map(&local).collect();
        let mut sectors = Vec::with_capacity(n_sites + 1);
        for n_up in 0..=n_sites {
            let basis = Arc::new(enumerate_sector(n_sites, n_up)?);
            let amplitudes = basis
                .configs()
                .iter()
                .map(|&c| {
                    factors
                        .iter()
                        .enumerate()
                        .fold(Complex64::new(1.0, 0.0), |acc, (i, &(u, d))| {
                            acc * if c >> i & 1 == 1 { u } else { d }
                        })
                })
                .collect();
            sectors.push(SectorState { basis, amplitudes });
        }
        Ok(Self { n_sites, sectors })
    }

    /// Embed a single-sector state.
    pub fn from_sector(state: &SectorState) -> Result<Self> {
        let n = state.n_sites();
        let mut sectors = Vec::with_capacity(n + 1);
        for n_up in 0..=n {
            if n_up == state.basis.n_up() {
                sectors.push(state.clone());
            } else {
                sectors.push(SectorState::zeros(Arc::new(enumerate_sector(n, n_up)?)));
            }
        }
        Ok(Self {
            n_sites: n,
            sectors,
        })
    }

    pub fn norm(&self) -> f64 {
        self.sectors
            .iter()
            .map(|s| s.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_dense(&self) -> Result<Vec<Complex64>> {
        if self.n_sites > 20 {
            return Err(Error::Hilbert(format!(
                "dense state for N = {} exceeds the 20-site cap",
                self.n_sites
            )));
        }
        let mut out = vec![Complex64::default(); 1 << self.n_sites];
        for s in &self.sectors {
            for (k, &c) in s.basis.configs().iter().enumerate() {
                out[c as usize] = s.amplitudes[k];
            }
        }
        Ok(out)
    }

    pub fn from_dense(n_sites: usize, dense: &[Complex64]) -> Result<Self> {
        if dense.len() != 1 << n_sites {
            return Err(Error::Hilbert("dense vector length is not 2^N".into()));
        }
        let mut sectors = Vec::with_capacity(n_sites + 1);
        for n_up in 0..=n_sites {
            let basis = Arc::new(enumerate_sector(n_sites, n_up)?);
            let amplitudes = basis.configs().iter().map(|&c| dense[c as usize]).collect();
            sectors.push(SectorState { basis, amplitudes });
        }
        Ok(Self { n_sites, sectors })
    }
}

/// Per-chunk accumulation of `<n_i n_j>` and `<n_i>` from diagonal weights.
fn occupation_moments<'a>(
    basis: &SectorBasis,
    weight: impl Fn(usize) -> f64 + Sync + 'a,
) -> (Vec<f64>, Vec<f64>) {
    let n = basis.n_sites();
    let dim = basis.dim();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..dim.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut nn = vec![0.0; n * n];
            let mut occ = vec![0.0; n];
            for k in chunk * CHUNK..((chunk + 1) * CHUNK).min(dim) {
                let w = weight(k);
                if w == 0.0 {
                    continue;
                }
                let c = basis.configs[k];
                let mut ups = c;
                while ups != 0 {
                    let i = ups.trailing_zeros() as usize;
                    ups &= ups - 1;
                    occ[i] += w;
                    let mut rest = ups;
                    while rest != 0 {
                        let j = rest.trailing_zeros() as usize;
                        rest &= rest - 1;
                        nn[i * n + j] += w;
                    }
                }
            }
            (nn, occ)
        })
        .collect();
    let mut nn = vec![0.0; n * n];
    let mut occ = vec![0.0; n];
    for (pnn, pocc) in partials {
        nn.iter_mut().zip(&pnn).for_each(|(a, b)| *a += b);
        occ.iter_mut().zip(&pocc).for_each(|(a, b)| *a += b);
    }
    (nn, occ)
}

/// Diagonal moments `<Z_i>` and `<Z_i Z_j>` (unnormalized by the state norm).
#[derive(Debug, Clone)]
pub struct ZMoments {
    pub n_sites: usize,
    pub weight: f64,
    pub z: Vec<f64>,
    pub zz: Vec<f64>,
}

impl ZMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            n_sites: n,
            weight: 0.0,
            z: vec![0.0; n],
            zz: vec![0.0; n * n],
        }
    }

    pub fn of_sector(state: &SectorState) -> Self {
        let amps = &state.amplitudes;
        Self::of_weights(&state.basis, |k| amps[k].norm_sqr())
    }

    pub fn of_weights(basis: &SectorBasis, weight: impl Fn(usize) -> f64 + Sync) -> Self {
        let n = basis.n_sites();
        let total: f64 = {
            let partials: Vec<f64> = (0..basis.dim().div_ceil(CHUNK))
                .into_par_iter()
                .map(|c| {
                    (c * CHUNK..((c + 1) * CHUNK).min(basis.dim()))
                        .map(&weight)
                        .sum::<f64>()
                })
                .collect();
            partials.into_iter().sum()
        };
        let (nn, occ) = occupation_moments(basis, &weight);
        let mut z = vec![0.0; n];
        let mut zz = vec![0.0; n * n];
        for i in 0..n {
            z[i] = 2.0 * occ[i] - total;
            for j in 0..n {
                let nij = if i == j {
                    occ[i]
                } else {
                    nn[i.min(j) * n + i.max(j)]
                };
                zz[i * n + j] = 4.0 * nij - 2.0 * occ[i] - 2.0 * occ[j] + total;
            }
        }
        Self {
            n_sites: n,
            weight: total,
            z,
            zz,
        }
    }

    pub fn add(&mut self, other: &ZMoments) {
        self.weight += other.weight;
        self.z.iter_mut().zip(&other.z).for_each(|(a, b)| *a += b);
        self.zz.iter_mut().zip(&other.zz).for_each(|(a, b)| *a += b);
    }

    pub fn mean_z(&self) -> Vec<f64> {
        self.z.iter().map(|v| v / self.weight).collect()
    }

    /// Connected `C^z_ij`.
    pub fn connected(&self) -> Vec<f64> {
        let n = self.n_sites;
        let m = self.mean_z();
        (0..n * n)
            .map(|k| self.zz[k] / self.weight - m[k / n] * m[k % n])
            .collect()
    }
}

/// Per-site `<Z_i>`.
pub fn observable_sz(state: &SectorState) -> Vec<f64> {
    ZMoments::of_sector(state).mean_z()
}

/// Connected `C^z_ij`, row-major `N x N`.
pub fn observable_czz(state: &SectorState) -> Vec<f64> {
    ZMoments::of_sector(state).connected()
}

/// Diagonal observables of a direct-sum state, sector by sector.
pub fn full_state_z(state: &FullState) -> ZMoments {
    let mut m = ZMoments::zeros(state.n_sites);
    for s in &state.sectors {
        m.add(&ZMoments::of_sector(s));
    }
    m
}

/// Raw flip-flop moments `F_ij = sum conj(psi_k') psi_k` over configurations
/// with `i` up and `j` down, `k'` the configuration with both flipped.
fn flip_moments(state: &SectorState) -> Vec<Complex64> {
    let basis = &*state.basis;
    let n = basis.n_sites();
    let full = basis.full_mask();
    let amps = &state.amplitudes;
    let dim = basis.dim();
    let partials: Vec<Vec<Complex64>> = (0..dim.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut f = vec![Complex64::default(); n * n];
            for k in chunk * CHUNK..((chunk + 1) * CHUNK).min(dim) {
                let a = amps[k];
                if a == Complex64::default() {
                    continue;
                }
                let c = basis.configs[k];
                let mut ups = c;
                while ups != 0 {
                    let i = ups.trailing_zeros() as usize;
                    ups &= ups - 1;
                    let mut downs = !c & full;
                    while downs != 0 {
                        let j = downs.trailing_zeros() as usize;
                        downs &= downs - 1;
                        let target = basis.rank(c ^ (1 << i) ^ (1 << j));
                        f[i * n + j] += amps[target].conj() * a;
                    }
                }
            }
            f
        })
        .collect();
    let mut f = vec![Complex64::default(); n * n];
    for p in partials {
        f.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
    }
    f
}

/// Unnormalized `<X_i X_j>` for `i != j` inside one sector (zero diagonal).
pub fn sector_xx(state: &SectorState) -> Vec<f64> {
    let n = state.n_sites();
    let f = flip_moments(state);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out[i * n + j] = (f[i * n + j] + f[j * n + i]).re;
            }
        }
    }
    out
}

/// Connected `C^x_ij = 2 Re <S+_i S-_j>` at fixed magnetization, `C^x_ii = 1`.
pub fn observable_cxx(state: &SectorState) -> Vec<f64> {
    let n = state.n_sites();
    let norm2 = state.norm().powi(2);
    let mut out = sector_xx(state);
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = if i == j { 1.0 } else { out[i * n + j] / norm2 };
        }
    }
    out
}

/// Replace rows and columns of inactive sites by NaN.
pub fn mask_matrix(values: &mut [f64], n: usize, active: impl Fn(usize) -> bool) {
    for i in 0..n {
        for j in 0..n {
            if !active(i) || !active(j) {
                values[i * n + j] = f64::NAN;
            }
        }
    }
}

pub fn mask_vector(values: &mut [f64], active: impl Fn(usize) -> bool) {
    for (i, v) in values.iter_mut().enumerate() {
        if !active(i) {
            *v = f64::NAN;
        }
    }
}

/// Scatter an `m x m` matrix over `sites` into `N x N`, NaN elsewhere.
pub fn expand_matrix(values: &[f64], sites: &[usize], n: usize) -> Vec<f64> {
    let m = sites.len();
    let mut out = vec![f64::NAN; n * n];
    for a in 0..m {
        for b in 0..m {
            out[sites[a] * n + sites[b]] = values[a * m + b];
        }
    }
    out
}

pub fn expand_vector(values: &[f64], sites: &[usize], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; n];
    for (a, &s) in sites.iter().enumerate() {
        out[s] = values[a];
    }
    out
}
