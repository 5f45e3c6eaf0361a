//! Estimators and fits for correlation profiles, Friedel oscillations and
//! light cones.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::lattice::{chord_of_separation, ChainGeometry};
use crate::protocol::{QuenchGrid, SnapshotSet};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Profiles

/// Connected correlations averaged over pairs at equal chord distance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationProfile {
    pub n_sites: usize,
    pub basis: String,
    /// Chord distance, strictly increasing.
    pub r: Vec<f64>,
    /// Ring separation (perimeter distance) of each bin.
    pub d: Vec<usize>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_pairs: Vec<usize>,
    pub n_samples: usize,
    /// True when `stderr` is a sampling error usable as fit weights; false for
    /// exact input where it only measures the scatter between pairs.
    pub sampling_errors: bool,
}

impl CorrelationProfile {
    /// Profile `f(d)` on a ring for `d = 1..=N/2`, without errors.
    pub fn from_fn(n_sites: usize, basis: &str, f: impl Fn(usize) -> f64) -> Self {
        let d: Vec<usize> = (1..=n_sites / 2).collect();
        Self {
            n_sites,
            basis: basis.into(),
            r: d.iter()
                .map(|&x| chord_of_separation(x as f64, n_sites))
                .collect(),
            mean: d.iter().map(|&x| f(x)).collect(),
            stderr: vec![0.0; d.len()],
            n_pairs: vec![n_sites; d.len()],
            d,
            n_samples: 1,
            sampling_errors: false,
        }
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.mean.iter_mut().for_each(|v| *v *= c);
        out.stderr.iter_mut().for_each(|v| *v *= c.abs());
        out
    }

    /// Value at ring separation `d`, if present.
    pub fn at_separation(&self, d: usize) -> Option<f64> {
        self.d.iter().position(|&x| x == d).map(|k| self.mean[k])
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let se = if values.len() > 1 {
        (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    (m, se)
}

/// Bin a symmetric `N x N` correlation matrix by ring separation. Pairs with a
/// non-finite entry (holes) are skipped; empty bins are dropped.
pub fn bin_correlations(
    c: &[f64],
    geom: &ChainGeometry,
    basis: &str,
) -> Result<CorrelationProfile> {
    let n = geom.n_sites();
    if c.len() != n * n {
        return Err(Error::Analysis(format!(
            "correlation matrix has {} entries, expected {}",
            c.len(),
            n * n
        )));
    }
    let mut bins: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (c[i * n + j] + c[j * n + i]);
            if v.is_finite() {
                bins.entry(geom.separation(i, j)).or_default().push(v);
            }
        }
    }
    build_profile(n, basis, bins, 1, false)
}

/// Bin each sample matrix separately, then average the binned values over
/// samples; errors are the standard error across samples.
pub fn bin_ensemble(
    samples: &[&[f64]],
    geom: &ChainGeometry,
    basis: &str,
) -> Result<CorrelationProfile> {
    if samples.len() == 1 {
        return bin_correlations(samples[0], geom, basis);
    }
    let mut bins: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut n_pairs: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        if let Ok(p) = bin_correlations(s, geom, basis) {
            for k in 0..p.len() {
                bins.entry(p.d[k]).or_default().push(p.mean[k]);
                *n_pairs.entry(p.d[k]).or_default() += p.n_pairs[k];
            }
        }
    }
    let mut prof = build_profile(geom.n_sites(), basis, bins, samples.len(), true)?;
    prof.n_pairs = prof.d.iter().map(|d| n_pairs[d]).collect();
    Ok(prof)
}

fn build_profile(
    n: usize,
    basis: &str,
    bins: BTreeMap<usize, Vec<f64>>,
    n_samples: usize,
    sampling: bool,
) -> Result<CorrelationProfile> {
    let mut p = CorrelationProfile {
        n_sites: n,
        basis: basis.into(),
        r: vec![],
        d: vec![],
        mean: vec![],
        stderr: vec![],
        n_pairs: vec![],
        n_samples,
        sampling_errors: sampling,
    };
    for (d, vals) in bins {
        if vals.is_empty() {
            log::warn!("empty correlation bin at separation {d}");
            continue;
        }
        let (m, se) = mean_and_stderr(&vals);
        p.r.push(chord_of_separation(d as f64, n));
        p.d.push(d);
        p.mean.push(m);
        p.stderr.push(se);
        p.n_pairs.push(vals.len());
    }
    if p.is_empty() {
        return Err(Error::Analysis("no finite pairs to bin".into()));
    }
    Ok(p)
}

/// Connected correlation estimator from projective snapshots, with jackknife
/// errors over blocks of shots. Missing entries (0) drop the pair for that shot.
pub fn bin_snapshots(shots: &SnapshotSet, geom: &ChainGeometry) -> Result<CorrelationProfile> {
    let n = geom.n_sites();
    if shots.n_sites != n {
        return Err(Error::Analysis(
            "snapshot length does not match the geometry".into(),
        ));
    }
    let m = shots.shots.len();
    if m < 2 {
        return Err(Error::Analysis("need at least two shots".into()));
    }
    let blocks = m.min(20);
    // per block and pair: count, sum s_i, sum s_j, sum s_i s_j
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let mut acc = vec![[0.0f64; 4]; blocks * pairs.len()];
    for (k, shot) in shots.shots.iter().enumerate() {
        let b = k * blocks / m;
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let (si, sj) = (shot[i], shot[j]);
            if si == 0 || sj == 0 {
                continue;
            }
            let a = &mut acc[b * pairs.len() + p];
            a[0] += 1.0;
            a[1] += si as f64;
            a[2] += sj as f64;
            a[3] += (si * sj) as f64;
        }
    }
    let connected = |s: [f64; 4]| {
        if s[0] > 0.0 {
            s[3] / s[0] - (s[1] / s[0]) * (s[2] / s[0])
        } else {
            f64::NAN
        }
    };
    let mut total = vec![[0.0f64; 4]; pairs.len()];
    for b in 0..blocks {
        for p in 0..pairs.len() {
            for q in 0..4 {
                total[p][q] += acc[b * pairs.len() + p][q];
            }
        }
    }
    let seps: Vec<usize> = pairs.iter().map(|&(i, j)| geom.separation(i, j)).collect();
    let bin_means = |est: &dyn Fn(usize) -> f64| -> BTreeMap<usize, (f64, usize)> {
        let mut out: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (p, &sep) in seps.iter().enumerate() {
            let v = est(p);
            if v.is_finite() {
                let e = out.entry(sep).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        out.into_iter()
            .map(|(d, (s, c))| (d, (s / c as f64, c)))
            .collect()
    };
    let full = bin_means(&|p| connected(total[p]));
    let mut replicas: Vec<BTreeMap<usize, (f64, usize)>> = Vec::with_capacity(blocks);
    for b in 0..blocks {
        replicas.push(bin_means(&|p| {
            let mut s = total[p];
            for q in 0..4 {
                s[q] -= acc[b * pairs.len() + p][q];
            }
            connected(s)
        }));
    }
    let mut prof = CorrelationProfile {
        n_sites: n,
        basis: shots.basis.label(),
        r: vec![],
        d: vec![],
        mean: vec![],
        stderr: vec![],
        n_pairs: vec![],
        n_samples: m,
        sampling_errors: true,
    };
    for (d, (v, c)) in full {
        let reps: Vec<f64> = replicas
            .iter()
            .filter_map(|r| r.get(&d).map(|x| x.0))
            .collect();
        let bf = reps.len() as f64;
        let rm = reps.iter().sum::<f64>() / bf;
        let var = (bf - 1.0) / bf * reps.iter().map(|x| (x - rm).powi(2)).sum::<f64>();
        prof.r.push(chord_of_separation(d as f64, n));
        prof.d.push(d);
        prof.mean.push(v);
        prof.stderr.push(var.sqrt());
        prof.n_pairs.push(c);
    }
    if prof.is_empty() {
        return Err(Error::Analysis("no pairs observed in snapshots".into()));
    }
    Ok(prof)
}

// ---------------------------------------------------------------------------
// Detection errors

/// Independent read-out flips: `eps_up` is the probability that an up spin is
/// read as down, `eps_dn` the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionErrors {
    pub eps_up: f64,
    pub eps_dn: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CorrectionOrder {
    /// Correlations scale by `1 - 2 eps_up - 2 eps_dn`.
    FirstOrder,
    /// Correlations scale by `(1 - eps_up - eps_dn)^2`.
    Exact,
}

impl DetectionErrors {
    pub fn new(eps_up: f64, eps_dn: f64) -> Result<Self> {
        if !(0.0..0.25).contains(&eps_up) || !(0.0..0.25).contains(&eps_dn) {
            return Err(Error::Analysis(format!(
                "detection errors must lie in [0, 0.25), got ({eps_up}, {eps_dn})"
            )));
        }
        Ok(Self { eps_up, eps_dn })
    }

    pub fn slope(&self) -> f64 {
        1.0 - self.eps_up - self.eps_dn
    }

    pub fn offset(&self) -> f64 {
        self.eps_dn - self.eps_up
    }

    pub fn correlation_factor(&self, order: CorrectionOrder) -> f64 {
        match order {
            CorrectionOrder::FirstOrder => 1.0 - 2.0 * self.eps_up - 2.0 * self.eps_dn,
            CorrectionOrder::Exact => self.slope().powi(2),
        }
    }

    pub fn apply_magnetization(&self, sz: f64) -> f64 {
        self.slope() * sz + self.offset()
    }

    pub fn invert_magnetization(&self, measured: f64) -> f64 {
        (measured - self.offset()) / self.slope()
    }

    pub fn apply_correlation(&self, c: f64, order: CorrectionOrder) -> f64 {
        c * self.correlation_factor(order)
    }

    pub fn invert_correlation(&self, measured: f64, order: CorrectionOrder) -> f64 {
        measured / self.correlation_factor(order)
    }

    pub fn invert_profile(
        &self,
        profile: &CorrelationProfile,
        order: CorrectionOrder,
    ) -> CorrelationProfile {
        profile.scaled(1.0 / self.correlation_factor(order))
    }
}

// ---------------------------------------------------------------------------
// Least squares

#[derive(Debug, Clone, Serialize)]
pub struct FitResult {
    pub model: String,
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub reduced_chi2: f64,
    pub dof: usize,
    /// Upper-tail probability of `chi2` when the fit is weighted by sampling errors.
    pub p_value: Option<f64>,
    pub cutoff: Option<f64>,
    pub rescale: f64,
    pub weighted: bool,
    pub converged: bool,
    pub at_bound: Vec<String>,
    pub n_points: usize,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|k| self.values[k])
    }

    pub fn error(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|k| self.errors[k])
    }
}

struct LmOutcome {
    params: Vec<f64>,
    cost: f64,
    jacobian: DMatrix<f64>,
    converged: bool,
}

/// Box-constrained Levenberg-Marquardt on weighted residuals `r(p)`.
fn levenberg_marquardt(
    residual: &dyn Fn(&[f64]) -> Vec<f64>,
    p0: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> LmOutcome {
    let np = p0.len();
    let clamp = |p: &mut [f64]| {
        for k in 0..np {
            p[k] = p[k].clamp(lower[k], upper[k]);
        }
    };
    let cost_of = |p: &[f64]| residual(p).iter().map(|r| r * r).sum::<f64>();
    let jac = |p: &[f64], r0: &[f64]| {
        let mut j = DMatrix::zeros(r0.len(), np);
        for k in 0..np {
            let h = 1e-7 * p[k].abs().max(1e-4);
            let mut up = p.to_vec();
            let mut dn = p.to_vec();
            up[k] = (p[k] + h).min(upper[k]);
            dn[k] = (p[k] - h).max(lower[k]);
            let span = up[k] - dn[k];
            if span <= 0.0 {
                continue;
            }
            let ru = residual(&up);
            let rd = residual(&dn);
            for i in 0..r0.len() {
                j[(i, k)] = (ru[i] - rd[i]) / span;
            }
        }
        j
    };
    let mut p = p0.to_vec();
    clamp(&mut p);
    let mut r = residual(&p);
    let mut cost = r.iter().map(|x| x * x).sum::<f64>();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut j = jac(&p, &r);
    for _ in 0..500 {
        let jt = j.transpose();
        let a = &jt * &j;
        let g = &jt * DVector::from_vec(r.clone());
        let mut improved = false;
        for _ in 0..30 {
            let mut m = a.clone();
            for k in 0..np {
                m[(k, k)] += lambda * a[(k, k)].max(1e-12);
            }
            let step = match m.cholesky() {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let mut trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            clamp(&mut trial);
            let tc = cost_of(&trial);
            if tc.is_finite() && tc <= cost {
                let rel = (cost - tc) / cost.max(1e-300);
                let moved = p
                    .iter()
                    .zip(&trial)
                    .map(|(a, b)| (a - b).abs() / a.abs().max(1e-8))
                    .fold(0.0f64, f64::max);
                p = trial;
                r = residual(&p);
                cost = tc;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if rel < 1e-14 || moved < 1e-12 {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            // no descent possible at any damping: stationary within round-off
            converged = true;
        } else {
            j = jac(&p, &r);
        }
        if converged {
            break;
        }
    }
    let jacobian = jac(&p, &r);
    LmOutcome {
        params: p,
        cost,
        jacobian,
        converged,
    }
}

struct Problem<'a> {
    model: String,
    names: Vec<String>,
    x: &'a [f64],
    y: &'a [f64],
    sigma: Option<&'a [f64]>,
    f: &'a dyn Fn(&[f64], usize) -> f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Problem<'_> {
    fn residual(&self, p: &[f64]) -> Vec<f64> {
        (0..self.x.len())
            .map(|i| {
                let r = (self.f)(p, i) - self.y[i];
                match self.sigma {
                    Some(s) => r / s[i],
                    None => r,
                }
            })
            .collect()
    }

    fn solve(&self, starts: &[Vec<f64>]) -> Result<FitResult> {
        let res = |p: &[f64]| self.residual(p);
        let best = starts
            .iter()
            .map(|s| levenberg_marquardt(&res, s, &self.lower, &self.upper))
            .filter(|o| o.cost.is_finite())
            .min_by(|a, b| a.cost.total_cmp(&b.cost))
            .ok_or_else(|| {
                Error::Analysis(format!(
                    "{}: no start converged to a finite cost",
                    self.model
                ))
            })?;
        let n = self.x.len();
        let np = best.params.len();
        // parameters pinned by equal bounds carry no covariance
        let free: Vec<usize> = (0..np).filter(|&k| self.upper[k] > self.lower[k]).collect();
        let dof = n.saturating_sub(free.len());
        let jf = best.jacobian.select_columns(free.iter());
        let s2 = if self.sigma.is_some() || dof == 0 {
            1.0
        } else {
            best.cost / dof as f64
        };
        let mut cov = DMatrix::zeros(np, np);
        match (jf.transpose() * &jf).try_inverse() {
            Some(inv) => {
                for (a, &ka) in free.iter().enumerate() {
                    for (b, &kb) in free.iter().enumerate() {
                        cov[(ka, kb)] = inv[(a, b)] * s2;
                    }
                }
            }
            None => free.iter().for_each(|&k| cov[(k, k)] = f64::NAN),
        }
        let errors: Vec<f64> = (0..np).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
        let at_bound = free
            .iter()
            .copied()
            .filter(|&k| {
                let span = (self.upper[k] - self.lower[k]).abs().max(1.0);
                (best.params[k] - self.lower[k]).abs() < 1e-9 * span
                    || (best.params[k] - self.upper[k]).abs() < 1e-9 * span
            })
            .map(|k| self.names[k].clone())
            .collect();
        let p_value = match (self.sigma, dof) {
            (Some(_), d) if d > 0 => ChiSquared::new(d as f64)
                .ok()
                .map(|c| 1.0 - c.cdf(best.cost)),
            _ => None,
        };
        Ok(FitResult {
            model: self.model.clone(),
            names: self.names.clone(),
            values: best.params,
            errors,
            covariance: (0..np)
                .map(|a| (0..np).map(|b| cov[(a, b)]).collect())
                .collect(),
            chi2: best.cost,
            reduced_chi2: if dof > 0 {
                best.cost / dof as f64
            } else {
                f64::NAN
            },
            dof,
            p_value,
            cutoff: None,
            rescale: 1.0,
            weighted: self.sigma.is_some(),
            converged: best.converged,
            at_bound,
            n_points: n,
        })
    }
}

/// Linear least squares for amplitudes given basis functions, weighted.
fn linear_amplitudes(cols: &[Vec<f64>], y: &[f64], w: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = y.len();
    let k = cols.len();
    let a = DMatrix::from_fn(n, k, |i, c| cols[c][i] * w[i]);
    let b = DVector::from_iterator(n, y.iter().zip(w).map(|(y, w)| y * w));
    let sol = a.clone().svd(true, true).solve(&b, 1e-14).ok()?;
    let resid = &a * &sol - &b;
    Some((sol.iter().copied().collect(), resid.norm_squared()))
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64))
        .collect()
}

struct Selected {
    r: Vec<f64>,
    d: Vec<f64>,
    y: Vec<f64>,
    sigma: Option<Vec<f64>>,
}

fn select_points(
    profile: &CorrelationProfile,
    cutoff: f64,
    min_points: usize,
    what: &str,
) -> Result<Selected> {
    let mut s = Selected {
        r: vec![],
        d: vec![],
        y: vec![],
        sigma: None,
    };
    let mut sig = vec![];
    for k in 0..profile.len() {
        if profile.r[k] >= cutoff && profile.r[k] > 0.0 && profile.mean[k].is_finite() {
            s.r.push(profile.r[k]);
            s.d.push(profile.d[k] as f64);
            s.y.push(profile.mean[k]);
            sig.push(profile.stderr[k]);
        }
    }
    if s.r.len() < min_points {
        return Err(Error::Analysis(format!(
            "{what}: {} points at r >= {cutoff}, need at least {min_points}",
            s.r.len()
        )));
    }
    if profile.sampling_errors && sig.iter().all(|v| *v > 0.0 && v.is_finite()) {
        s.sigma = Some(sig);
    }
    Ok(s)
}

fn parity(d: f64) -> Result<f64> {
    let k = d.round();
    if (d - k).abs() > 1e-6 {
        return Err(Error::Analysis(format!(
            "perimeter distance {d} is not an integer"
        )));
    }
    Ok(if (k as i64) % 2 == 0 { 1.0 } else { -1.0 })
}

#[derive(Debug, Clone, Copy)]
pub struct CxFitOptions {
    pub cutoff: f64,
    /// Multiply the model by `(-1)^d` (AFM x-correlations).
    pub stagger: bool,
    /// Fit an envelope `exp(-r / xi)`; off fixes `xi = infinity`.
    pub envelope: bool,
    pub rescale: f64,
}

impl Default for CxFitOptions {
    fn default() -> Self {
        Self {
            cutoff: 0.0,
            stagger: false,
            envelope: false,
            rescale: 1.0,
        }
    }
}

/// `C^x(r) = s(d) [A r^{-1/(2K)} + B (-1)^d r^{-(2K + 1/(2K))}] e^{-r/xi}`.
pub fn fit_cx(profile: &CorrelationProfile, opts: &CxFitOptions) -> Result<FitResult> {
    let sel = select_points(profile, opts.cutoff, 5, "fit_cx")?;
    let alt: Vec<f64> = sel.d.iter().map(|&d| parity(d)).collect::<Result<_>>()?;
    let sign: Vec<f64> = alt
        .iter()
        .map(|&a| if opts.stagger { a } else { 1.0 })
        .collect();
    let pre = opts.rescale;
    let r = sel.r.clone();
    // parameters: K, inv_xi, A, B
    let f = |p: &[f64], i: usize| {
        let (k, lam, a, b) = (p[0], p[1], p[2], p[3]);
        pre * sign[i]
            * (a * r[i].powf(-0.5 / k) + b * alt[i] * r[i].powf(-(2.0 * k + 0.5 / k)))
            * (-lam * r[i]).exp()
    };
    let w: Vec<f64> = sel
        .sigma
        .as_ref()
        .map_or(vec![1.0; r.len()], |s| s.iter().map(|v| 1.0 / v).collect());
    let lam_grid: Vec<f64> = if opts.envelope {
        vec![0.0, 0.01, 0.03, 0.1, 0.3]
    } else {
        vec![0.0]
    };
    let mut starts = vec![];
    let mut scored = vec![];
    for &k in &log_grid(0.2, 8.0, 60) {
        for &lam in &lam_grid {
            let c1: Vec<f64> = (0..r.len())
                .map(|i| pre * sign[i] * r[i].powf(-0.5 / k) * (-lam * r[i]).exp())
                .collect();
            let c2: Vec<f64> = (0..r.len())
                .map(|i| {
                    pre * sign[i] * alt[i] * r[i].powf(-(2.0 * k + 0.5 / k)) * (-lam * r[i]).exp()
                })
                .collect();
            if let Some((amp, cost)) = linear_amplitudes(&[c1, c2], &sel.y, &w) {
                scored.push((cost, vec![k, lam, amp[0], amp[1]]));
            }
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    starts.extend(scored.into_iter().take(4).map(|s| s.1));
    let lam_hi = if opts.envelope { 10.0 } else { 0.0 };
    let prob = Problem {
        model: "cx".into(),
        names: vec!["K".into(), "inv_xi".into(), "A".into(), "B".into()],
        x: &r,
        y: &sel.y,
        sigma: sel.sigma.as_deref(),
        f: &f,
        lower: vec![0.05, 0.0, -1e6, -1e6],
        upper: vec![50.0, lam_hi, 1e6, 1e6],
    };
    let mut fit = prob.solve(&starts)?;
    fit.cutoff = Some(opts.cutoff);
    fit.rescale = opts.rescale;
    Ok(fit)
}

#[derive(Debug, Clone, Copy)]
pub struct CzFitOptions {
    pub cutoff: f64,
    pub rescale: f64,
}

impl Default for CzFitOptions {
    fn default() -> Self {
        Self {
            cutoff: 0.0,
            rescale: 1.0,
        }
    }
}

/// `C^z(r) = f [-(2K/pi^2) r^-2 + D (-1)^d r^{-2K}]`.
pub fn fit_cz(profile: &CorrelationProfile, opts: &CzFitOptions) -> Result<FitResult> {
    let sel = select_points(profile, opts.cutoff, 4, "fit_cz")?;
    let alt: Vec<f64> = sel.d.iter().map(|&d| parity(d)).collect::<Result<_>>()?;
    let r = sel.r.clone();
    let pre = opts.rescale;
    let f = |p: &[f64], i: usize| {
        pre * (-(2.0 * p[0] / (PI * PI)) * r[i].powi(-2) + p[1] * alt[i] * r[i].powf(-2.0 * p[0]))
    };
    let w: Vec<f64> = sel
        .sigma
        .as_ref()
        .map_or(vec![1.0; r.len()], |s| s.iter().map(|v| 1.0 / v).collect());
    let mut scored = vec![];
    for &k in &log_grid(0.2, 8.0, 80) {
        let y2: Vec<f64> = (0..r.len())
            .map(|i| sel.y[i] + pre * (2.0 * k / (PI * PI)) * r[i].powi(-2))
            .collect();
        let c: Vec<f64> = (0..r.len())
            .map(|i| pre * alt[i] * r[i].powf(-2.0 * k))
            .collect();
        if let Some((amp, cost)) = linear_amplitudes(&[c], &y2, &w) {
            scored.push((cost, vec![k, amp[0]]));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let starts: Vec<Vec<f64>> = scored.into_iter().take(4).map(|s| s.1).collect();
    let prob = Problem {
        model: "cz".into(),
        names: vec!["K".into(), "D".into()],
        x: &r,
        y: &sel.y,
        sigma: sel.sigma.as_deref(),
        f: &f,
        lower: vec![0.05, -1e6],
        upper: vec![50.0, 1e6],
    };
    let mut fit = prob.solve(&starts)?;
    fit.cutoff = Some(opts.cutoff);
    fit.rescale = opts.rescale;
    Ok(fit)
}

#[derive(Debug, Clone, Serialize)]
pub struct CutoffScan {
    /// `(r_c, K, sigma_K)`; `None` where the fit failed.
    pub table: Vec<(f64, Option<f64>, Option<f64>)>,
    pub selected: Option<f64>,
    pub tolerance: f64,
}

/// Smallest cutoff whose `K` differs from the next cutoff's by less than `tol`.
pub fn cutoff_scan(
    profile: &CorrelationProfile,
    fitter: &dyn Fn(&CorrelationProfile, f64) -> Result<FitResult>,
    cutoffs: &[f64],
    tol: f64,
) -> Result<CutoffScan> {
    let table: Vec<(f64, Option<f64>, Option<f64>)> = cutoffs
        .iter()
        .map(|&rc| match fitter(profile, rc) {
            Ok(f) => (rc, f.get("K"), f.error("K")),
            Err(_) => (rc, None, None),
        })
        .collect();
    if table.iter().filter(|t| t.1.is_some()).count() < 2 {
        return Err(Error::Analysis(
            "cutoff scan needs at least two successful fits".into(),
        ));
    }
    let selected = table
        .windows(2)
        .find(|w| matches!((w[0].1, w[1].1), (Some(a), Some(b)) if (a - b).abs() < tol))
        .map(|w| w[0].0);
    Ok(CutoffScan {
        table,
        selected,
        tolerance: tol,
    })
}

// ---------------------------------------------------------------------------
// Friedel oscillations

/// `2 k_F = pi (1 - M_z / N)`.
pub fn friedel_wavevector(mz: i64, n: usize) -> f64 {
    PI * (1.0 - mz as f64 / n as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct FriedelSpectrum {
    pub q: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub peak_q: f64,
    pub peak_index: usize,
    /// Peak not clearly above the remaining spectrum.
    pub flat: bool,
}

/// `|sum_j e^{iqj} m_j|` at `q = 2 pi n / N`; peak searched over `0 < q <= pi`.
pub fn friedel_fft(profile: &[f64]) -> Result<FriedelSpectrum> {
    let n = profile.len();
    if n < 3 || profile.iter().any(|v| !v.is_finite()) {
        return Err(Error::Analysis(
            "Friedel FFT needs at least 3 finite sites".into(),
        ));
    }
    let mut buf: Vec<Complex64> = profile.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    let magnitude: Vec<f64> = buf.iter().map(|z| z.norm()).collect();
    let q: Vec<f64> = (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect();
    let peak_index = (1..=n / 2)
        .max_by(|&a, &b| magnitude[a].total_cmp(&magnitude[b]))
        .unwrap_or(1);
    let others: Vec<f64> = (1..=n / 2)
        .filter(|&k| k != peak_index)
        .map(|k| magnitude[k])
        .collect();
    let mean_other = if others.is_empty() {
        0.0
    } else {
        others.iter().sum::<f64>() / others.len() as f64
    };
    let flat = magnitude[peak_index] < 1.5 * mean_other || magnitude[peak_index] < 1e-12;
    Ok(FriedelSpectrum {
        peak_q: q[peak_index],
        q,
        magnitude,
        peak_index,
        flat,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FriedelFitOptions {
    /// Fix `2 k_F` to `pi (1 - M_z/N)`.
    pub pin_kf: bool,
    /// Sites within this distance of either chain end are excluded.
    pub edge_exclusion: usize,
}

/// `m_j = A cos(2 k_F j) [(N/pi) cos(pi j / N)]^{-K}` with `j` measured from the
/// chain centre. `signal` is indexed along the chain (length `N`, odd).
pub fn fit_friedel(
    signal: &[f64],
    stderr: Option<&[f64]>,
    mz: i64,
    opts: &FriedelFitOptions,
) -> Result<FitResult> {
    let n = signal.len();
    if n.is_multiple_of(2) {
        return Err(Error::Analysis(format!(
            "Friedel fit needs an odd chain, got N = {n}"
        )));
    }
    let half = (n as i64 - 1) / 2;
    let mut x = vec![];
    let mut y = vec![];
    let mut s = vec![];
    for (k, &v) in signal.iter().enumerate() {
        let dist_to_end = k.min(n - 1 - k);
        if dist_to_end < opts.edge_exclusion || !v.is_finite() {
            continue;
        }
        x.push(k as f64 - half as f64);
        y.push(v);
        s.push(stderr.map_or(0.0, |e| e[k]));
    }
    if x.len() < 4 {
        return Err(Error::Analysis("Friedel fit needs at least 4 sites".into()));
    }
    let nf = n as f64;
    let sigma = if s.iter().all(|v| *v > 0.0 && v.is_finite()) {
        Some(s)
    } else {
        None
    };
    let w: Vec<f64> = sigma
        .as_ref()
        .map_or(vec![1.0; x.len()], |s| s.iter().map(|v| 1.0 / v).collect());
    let env = |j: f64, k: f64| ((nf / PI) * (PI * j / nf).cos()).powf(-k);
    let kf_pin = friedel_wavevector(mz, n);
    let kf_grid: Vec<f64> = if opts.pin_kf {
        vec![kf_pin]
    } else {
        (1..400).map(|k| PI * k as f64 / 400.0).collect()
    };
    let mut scored = vec![];
    for &kf in &kf_grid {
        for &k in &log_grid(0.1, 4.0, 30) {
            let c: Vec<f64> = x.iter().map(|&j| (kf * j).cos() * env(j, k)).collect();
            if let Some((amp, cost)) = linear_amplitudes(&[c], &y, &w) {
                scored.push((cost, vec![amp[0], kf, k]));
            }
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let starts: Vec<Vec<f64>> = scored.into_iter().take(4).map(|s| s.1).collect();
    let f = |p: &[f64], i: usize| p[0] * (p[1] * x[i]).cos() * env(x[i], p[2]);
    let (klo, khi) = if opts.pin_kf {
        (kf_pin, kf_pin)
    } else {
        (0.0, PI)
    };
    let prob = Problem {
        model: "friedel".into(),
        names: vec!["A".into(), "kF2".into(), "K".into()],
        x: &x,
        y: &y,
        sigma: sigma.as_deref(),
        f: &f,
        lower: vec![-1e6, klo, 0.01],
        upper: vec![1e6, khi, 20.0],
    };
    prob.solve(&starts)
}

// ---------------------------------------------------------------------------
// Light cone

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FrontDefinition {
    /// Time of the first local maximum above threshold.
    FirstMaximum,
    /// Time at which the rise towards that maximum crosses half its height.
    HalfRise,
}

#[derive(Debug, Clone, Copy)]
pub struct LightconeOptions {
    pub d_min: usize,
    pub threshold_sigma: f64,
    /// Absolute threshold applied when the grid carries no sampling noise.
    pub floor: f64,
    /// Threshold as a fraction of the row maximum; suppresses small precursors.
    pub relative_floor: f64,
    pub definition: FrontDefinition,
    /// Fit `d = 2 v (t - t0)` instead of `d = 2 v t`.
    pub intercept: bool,
}

impl Default for LightconeOptions {
    fn default() -> Self {
        Self {
            d_min: 2,
            threshold_sigma: 3.0,
            floor: 1e-3,
            relative_floor: 0.5,
            definition: FrontDefinition::HalfRise,
            intercept: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrontArrival {
    pub d: usize,
    pub t_star: f64,
}

/// Front arrival per distance: the first local maximum of `C(d, t)` above the
/// threshold, or the half-height point of the rise leading to it.
pub fn front_arrivals(grid: &QuenchGrid, opts: &LightconeOptions) -> Vec<FrontArrival> {
    let nt = grid.times.len();
    let mut out = vec![];
    for (id, &d) in grid.d.iter().enumerate() {
        if d < opts.d_min {
            continue;
        }
        let row = &grid.values[id];
        let noise = grid.stderr[id]
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max);
        let peak = row
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f64::MIN, f64::max);
        let threshold = (opts.threshold_sigma * noise)
            .max(opts.floor)
            .max(opts.relative_floor * peak);
        let Some(k) = (1..nt.saturating_sub(1))
            .find(|&k| row[k] > threshold && row[k] >= row[k - 1] && row[k] >= row[k + 1])
        else {
            continue;
        };
        let t_star = match opts.definition {
            FrontDefinition::FirstMaximum => {
                // parabolic refinement of the maximum on a uniform grid
                let (a, b, c) = (row[k - 1], row[k], row[k + 1]);
                let den = a - 2.0 * b + c;
                let dt = grid.times[k + 1] - grid.times[k];
                let shift = if den.abs() > 1e-300 {
                    (0.5 * (a - c) / den).clamp(-0.5, 0.5)
                } else {
                    0.0
                };
                grid.times[k] + shift * dt
            }
            FrontDefinition::HalfRise => {
                let half = 0.5 * row[k];
                let Some(j) = (0..k).rev().find(|&j| row[j] < half) else {
                    continue;
                };
                let w = (half - row[j]) / (row[j + 1] - row[j]);
                grid.times[j] + w * (grid.times[j + 1] - grid.times[j])
            }
        };
        out.push(FrontArrival { d, t_star });
    }
    out
}

/// Group velocity from the ballistic front `d = 2 v_g t*`.
pub fn fit_lightcone(grid: &QuenchGrid, opts: &LightconeOptions) -> Result<FitResult> {
    let fronts = front_arrivals(grid, opts);
    if fronts.len() < 3 {
        return Err(Error::Analysis(format!(
            "front detected at only {} distances (need 3)",
            fronts.len()
        )));
    }
    let t: Vec<f64> = fronts.iter().map(|f| f.t_star).collect();
    let d: Vec<f64> = fronts.iter().map(|f| f.d as f64).collect();
    let f_noint = |p: &[f64], i: usize| 2.0 * p[0] * t[i];
    let f_int = |p: &[f64], i: usize| 2.0 * p[0] * (t[i] - p[1]);
    let v0 = d.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>()
        / (2.0 * t.iter().map(|b| b * b).sum::<f64>());
    let prob = if opts.intercept {
        Problem {
            model: "lightcone".into(),
            names: vec!["vg".into(), "t0".into()],
            x: &t,
            y: &d,
            sigma: None,
            f: &f_int,
            lower: vec![0.0, -1e3],
            upper: vec![1e3, 1e3],
        }
    } else {
        Problem {
            model: "lightcone".into(),
            names: vec!["vg".into()],
            x: &t,
            y: &d,
            sigma: None,
            f: &f_noint,
            lower: vec![0.0],
            upper: vec![1e3],
        }
    };
    let start = if opts.intercept {
        vec![v0, 0.0]
    } else {
        vec![v0]
    };
    prob.solve(&[start])
}

// ---------------------------------------------------------------------------
// Misc

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HoleDecay {
    pub perimeter: f64,
    pub chord: f64,
}

/// `xi_p = 1 / |ln(1 - 2p)|` and its chord length on an `N`-site ring.
pub fn hole_decay_length(p: f64, n_sites: usize) -> Result<HoleDecay> {
    if !(0.0..0.5).contains(&p) {
        return Err(Error::Analysis(format!(
            "hole probability must lie in [0, 1/2), got {p}"
        )));
    }
    if p == 0.0 {
        return Ok(HoleDecay {
            perimeter: f64::INFINITY,
            chord: f64::INFINITY,
        });
    }
    let perimeter = 1.0 / (1.0 - 2.0 * p).ln().abs();
    // beyond half the ring the chord is no longer monotone; report NaN
    let chord = if perimeter <= n_sites as f64 / 2.0 {
        chord_of_separation(perimeter, n_sites)
    } else {
        f64::NAN
    };
    Ok(HoleDecay { perimeter, chord })
}

/// Least-squares slope of `ln y` versus `ln x` over points with `lo <= x <= hi`
/// and `y > 0`.
pub fn loglog_slope(x: &[f64], y: &[f64], lo: f64, hi: f64) -> Result<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a >= lo && **a <= hi && **b > 0.0 && b.is_finite())
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Analysis(
            "log-log slope needs at least 3 positive points".into(),
        ));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    Ok(sxy / sxx)
}

/// Weighted single power law `A x^-alpha` on `(x, y, sigma)`.
pub fn fit_power_law(x: &[f64], y: &[f64], sigma: &[f64]) -> Result<FitResult> {
    if x.len() < 3 {
        return Err(Error::Analysis(
            "power-law fit needs at least 3 points".into(),
        ));
    }
    let weighted = sigma.iter().all(|s| *s > 0.0 && s.is_finite());
    let f = |p: &[f64], i: usize| p[0] * x[i].powf(-p[1]);
    let slope = loglog_slope(x, y, f64::MIN_POSITIVE, f64::INFINITY).unwrap_or(-1.0);
    let prob = Problem {
        model: "power_law".into(),
        names: vec!["A".into(), "alpha".into()],
        x,
        y,
        sigma: if weighted { Some(sigma) } else { None },
        f: &f,
        lower: vec![-1e6, -20.0],
        upper: vec![1e6, 20.0],
    };
    let a0 = y[0] * x[0].powf(-slope);
    prob.solve(&[vec![a0, -slope], vec![a0, 0.5], vec![a0, 2.0]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{perimeter_distance, Boundary};
    use crate::protocol::BasisLabel;
    use crate::rng::{substream, Stream};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn cx_model(k: f64, a: f64, b: f64, lam: f64) -> impl Fn(usize, f64) -> f64 {
        move |d, r| {
            let alt = if d % 2 == 0 { 1.0 } else { -1.0 };
            (a * r.powf(-0.5 / k) + b * alt * r.powf(-(2.0 * k + 0.5 / k))) * (-lam * r).exp()
        }
    }

    fn noisy_profile(
        n: usize,
        f: &dyn Fn(usize, f64) -> f64,
        sigma: f64,
        seed: u64,
    ) -> CorrelationProfile {
        let mut rng = substream(seed, Stream::Bootstrap, 0);
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut p = CorrelationProfile::from_fn(n, "x", |d| f(d, chord_of_separation(d as f64, n)));
        p.mean
            .iter_mut()
            .for_each(|v| *v += normal.sample(&mut rng));
        p.stderr = vec![sigma; p.len()];
        p.sampling_errors = true;
        p
    }

    #[test]
    fn binning_translation_invariant_matrix() {
        let n = 12;
        let geom = ChainGeometry::periodic(n).unwrap();
        let f = |d: usize| 1.0 / (1.0 + d as f64);
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                c[i * n + j] = f(geom.separation(i, j));
            }
        }
        let p = bin_correlations(&c, &geom, "z").unwrap();
        assert_eq!(p.d, (1..=6).collect::<Vec<_>>());
        for k in 0..p.len() {
            assert_abs_diff_eq!(p.mean[k], f(p.d[k]), epsilon = 1e-15);
            assert_abs_diff_eq!(
                p.r[k],
                chord_of_separation(p.d[k] as f64, n),
                epsilon = 1e-15
            );
        }
        assert_eq!(p.n_pairs[0], 12);
        assert_eq!(p.n_pairs[5], 6);
        assert!(p.r.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn binning_skips_holes() {
        let n = 8;
        let geom = ChainGeometry::new(n, Boundary::PeriodicRing, [3]).unwrap();
        let mut c = vec![0.5; n * n];
        crate::hilbert::mask_matrix(&mut c, n, |i| i != 3);
        let p = bin_correlations(&c, &geom, "z").unwrap();
        assert_eq!(p.n_pairs[0], 6);
    }

    proptest! {
        #[test]
        fn binning_ignores_transposition(vals in proptest::collection::vec(-1.0f64..1.0, 100)) {
            let n = 10;
            let geom = ChainGeometry::periodic(n).unwrap();
            let t: Vec<f64> = (0..100).map(|k| vals[(k % n) * n + k / n]).collect();
            let a = bin_correlations(&vals, &geom, "x").unwrap();
            let b = bin_correlations(&t, &geom, "x").unwrap();
            prop_assert_eq!(a.mean, b.mean);
        }

        #[test]
        fn fft_peak_ignores_constant(shift in -5.0f64..5.0) {
            let n = 23;
            let prof: Vec<f64> = (0..n).map(|j| (PI * 10.0 / 23.0 * 2.0 * j as f64).cos() * 0.1).collect();
            let moved: Vec<f64> = prof.iter().map(|v| v + shift).collect();
            prop_assert_eq!(friedel_fft(&prof).unwrap().peak_index, friedel_fft(&moved).unwrap().peak_index);
        }

        #[test]
        fn magnetization_round_trip(sz in -1.0f64..1.0, eu in 0.0f64..0.2, ed in 0.0f64..0.2) {
            let e = DetectionErrors::new(eu, ed).unwrap();
            prop_assert!((e.invert_magnetization(e.apply_magnetization(sz)) - sz).abs() < 1e-12);
        }

        #[test]
        fn hole_length_monotone(p in 0.001f64..0.49, q in 0.001f64..0.49) {
            let (a, b) = (hole_decay_length(p, 24).unwrap(), hole_decay_length(q, 24).unwrap());
            if p < q { prop_assert!(a.perimeter > b.perimeter); }
        }
    }

    #[test]
    fn detection_factor() {
        let e = DetectionErrors::new(0.025, 0.03).unwrap();
        assert_abs_diff_eq!(
            e.correlation_factor(CorrectionOrder::FirstOrder),
            0.89,
            epsilon = 1e-15
        );
        let id = DetectionErrors::new(0.0, 0.0).unwrap();
        assert_eq!(id.invert_correlation(0.3, CorrectionOrder::FirstOrder), 0.3);
        assert_eq!(id.invert_magnetization(-0.4), -0.4);
        for order in [CorrectionOrder::FirstOrder, CorrectionOrder::Exact] {
            assert_abs_diff_eq!(
                e.invert_correlation(e.apply_correlation(0.123, order), order),
                0.123,
                epsilon = 1e-12
            );
        }
        assert!(DetectionErrors::new(0.3, 0.0).is_err());
    }

    #[test]
    fn cx_recovers_synthetic_parameters() {
        let n = 48;
        let truth = cx_model(1.85, 0.8, 0.15, 1.0 / 15.0);
        let p = noisy_profile(n, &truth, 0.0, 1);
        let mut p = p;
        p.sampling_errors = false;
        let fit = fit_cx(
            &p,
            &CxFitOptions {
                envelope: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(fit.get("K").unwrap(), 1.85, epsilon = 1e-6);
        assert_abs_diff_eq!(1.0 / fit.get("inv_xi").unwrap(), 15.0, epsilon = 1e-4);
    }

    #[test]
    fn cx_rescale_invariance() {
        let n = 24;
        let p = CorrelationProfile::from_fn(n, "x", |d| {
            cx_model(1.6, 0.7, -0.1, 0.0)(d, chord_of_separation(d as f64, n))
                * (1.0 + 0.01 * (d as f64).sin())
        });
        let a = fit_cx(&p, &CxFitOptions::default()).unwrap();
        let b = fit_cx(&p.scaled(0.37), &CxFitOptions::default()).unwrap();
        assert_abs_diff_eq!(a.get("K").unwrap(), b.get("K").unwrap(), epsilon = 1e-8);
        assert_abs_diff_eq!(
            b.get("A").unwrap(),
            0.37 * a.get("A").unwrap(),
            epsilon = 1e-8
        );
    }

    /// Coverage of the 2 sigma interval over random draws with known noise.
    const DRAWS: u64 = 1000;

    type Model = Box<dyn Fn(usize, f64) -> f64>;

    /// Fraction of draws whose 2 sigma interval on `K` covers the truth.
    fn coverage(
        fitter: &dyn Fn(&CorrelationProfile) -> Result<FitResult>,
        make: &dyn Fn(&mut rand_chacha::ChaCha8Rng) -> (f64, Model),
        n: usize,
        sigma: f64,
    ) -> f64 {
        let mut rng = substream(77, Stream::Bootstrap, 5);
        let mut hits = 0;
        for draw in 0..DRAWS {
            let (k, f) = make(&mut rng);
            let p = noisy_profile(n, &*f, sigma, 1000 + draw);
            let fit = fitter(&p).unwrap();
            if (fit.get("K").unwrap() - k).abs() <= 2.0 * fit.error("K").unwrap() {
                hits += 1;
            }
        }
        hits as f64 / DRAWS as f64
    }

    #[test]
    fn cx_coverage_over_random_draws() {
        let c = coverage(
            &|p| fit_cx(p, &CxFitOptions::default()),
            &|rng| {
                let k = 1.0 + rng.random::<f64>() * 1.5;
                let a = 0.5 + 0.5 * rng.random::<f64>();
                let b = 0.3 * (rng.random::<f64>() - 0.5);
                (k, Box::new(cx_model(k, a, b, 0.0)))
            },
            64,
            2e-3,
        );
        assert!(c >= 0.95, "coverage {c}");
    }

    #[test]
    fn cz_coverage_over_random_draws() {
        let c = coverage(
            &|p| fit_cz(p, &CzFitOptions::default()),
            &|rng| {
                let k = 0.6 + rng.random::<f64>() * 0.6;
                let dd = 0.05 + 0.2 * rng.random::<f64>();
                (
                    k,
                    Box::new(move |d: usize, r: f64| {
                        -(2.0 * k / (PI * PI)) / (r * r)
                            + dd * if d.is_multiple_of(2) { 1.0 } else { -1.0 } * r.powf(-2.0 * k)
                    }),
                )
            },
            48,
            1e-4,
        );
        assert!(c >= 0.95, "coverage {c}");
    }

    #[test]
    fn cz_recovers_synthetic_parameters() {
        let n = 24;
        let p = CorrelationProfile::from_fn(n, "z", |d| {
            let r = chord_of_separation(d as f64, n);
            -(2.0 * 0.9 / (PI * PI)) / (r * r)
                + 0.2 * if d % 2 == 0 { 1.0 } else { -1.0 } * r.powf(-1.8)
        });
        let fit = fit_cz(&p, &CzFitOptions::default()).unwrap();
        assert_abs_diff_eq!(fit.get("K").unwrap(), 0.9, epsilon = 1e-7);
        assert_abs_diff_eq!(fit.get("D").unwrap(), 0.2, epsilon = 1e-7);
        assert!(fit.converged);
    }

    #[test]
    fn cutoff_scan_pure_power_law_selects_zero() {
        let n = 40;
        let p = CorrelationProfile::from_fn(n, "x", |d| {
            0.9 * chord_of_separation(d as f64, n).powf(-0.25)
        });
        let scan = cutoff_scan(
            &p,
            &|p, rc| {
                fit_cx(
                    p,
                    &CxFitOptions {
                        cutoff: rc,
                        ..Default::default()
                    },
                )
            },
            &[0.0, 1.0, 2.0, 3.0],
            0.05,
        )
        .unwrap();
        assert_eq!(scan.selected, Some(0.0));
        assert_eq!(scan.table.len(), 4);
    }

    #[test]
    fn cutoff_scan_detects_short_range_contamination() {
        let n = 40;
        let p = CorrelationProfile::from_fn(n, "x", |d| {
            let r = chord_of_separation(d as f64, n);
            0.9 * r.powf(-0.25) + if d <= 2 { 0.4 } else { 0.0 }
        });
        let scan = cutoff_scan(
            &p,
            &|p, rc| {
                fit_cx(
                    p,
                    &CxFitOptions {
                        cutoff: rc,
                        ..Default::default()
                    },
                )
            },
            &[0.0, 1.0, 2.0, 3.0, 4.0],
            0.01,
        )
        .unwrap();
        assert_eq!(scan.selected, Some(2.0));
    }

    #[test]
    fn friedel_wavevector_examples() {
        assert_abs_diff_eq!(friedel_wavevector(0, 23), PI);
        assert_abs_diff_eq!(friedel_wavevector(23, 23), 0.0);
        assert_abs_diff_eq!(
            friedel_wavevector(11, 23),
            12.0 * PI / 23.0,
            epsilon = 1e-15
        );
    }

    fn friedel_profile(n: usize, a: f64, kf: f64, k: f64) -> Vec<f64> {
        let half = (n as f64 - 1.0) / 2.0;
        (0..n)
            .map(|i| {
                let j = i as f64 - half;
                a * (kf * j).cos() * ((n as f64 / PI) * (PI * j / n as f64).cos()).powf(-k)
            })
            .collect()
    }

    #[test]
    fn friedel_fit_recovers_synthetic_profile() {
        let n = 23;
        let kf = friedel_wavevector(1, n);
        let prof = friedel_profile(n, 0.2, kf, 0.85);
        let fit = fit_friedel(&prof, None, 1, &FriedelFitOptions::default()).unwrap();
        assert_abs_diff_eq!(fit.get("A").unwrap(), 0.2, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.get("kF2").unwrap(), kf, epsilon = 1e-6);
        assert_abs_diff_eq!(fit.get("K").unwrap(), 0.85, epsilon = 1e-6);
        let spec = friedel_fft(&prof).unwrap();
        assert_abs_diff_eq!(spec.peak_q, kf, epsilon = 1e-12);
    }

    #[test]
    fn friedel_coverage_over_random_draws() {
        let n = 23;
        let sigma = 0.002;
        let mut rng = substream(78, Stream::Bootstrap, 6);
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut hits = 0;
        for _ in 0..DRAWS {
            let mz = 2 * rng.random_range(0..10) + 1;
            let k = 0.5 + rng.random::<f64>();
            let a = 0.1 + 0.2 * rng.random::<f64>();
            let prof: Vec<f64> = friedel_profile(n, a, friedel_wavevector(mz, n), k)
                .into_iter()
                .map(|v| v + normal.sample(&mut rng))
                .collect();
            let opts = FriedelFitOptions {
                pin_kf: true,
                ..Default::default()
            };
            let fit = fit_friedel(&prof, Some(&vec![sigma; n]), mz, &opts).unwrap();
            if (fit.get("K").unwrap() - k).abs() <= 2.0 * fit.error("K").unwrap() {
                hits += 1;
            }
        }
        let c = hits as f64 / DRAWS as f64;
        assert!(c >= 0.95, "coverage {c}");
    }

    #[test]
    fn friedel_fit_with_noise_covers_truth() {
        let n = 23;
        let kf = friedel_wavevector(5, n);
        let mut rng = substream(3, Stream::Bootstrap, 9);
        let normal = Normal::new(0.0, 0.002).unwrap();
        let prof: Vec<f64> = friedel_profile(n, 0.3, kf, 0.8)
            .into_iter()
            .map(|v| v + normal.sample(&mut rng))
            .collect();
        let err = vec![0.002; n];
        let fit = fit_friedel(&prof, Some(&err), 5, &FriedelFitOptions::default()).unwrap();
        assert!((fit.get("K").unwrap() - 0.8).abs() < 3.0 * fit.error("K").unwrap());
        assert!(fit.weighted && fit.p_value.is_some());
    }

    #[test]
    fn lightcone_synthetic_front() {
        // sharp rise at d = 2 v t followed by a slow decay
        let times: Vec<f64> = (0..800).map(|k| k as f64 * 0.005).collect();
        let d: Vec<usize> = (1..=7).collect();
        let values: Vec<Vec<f64>> = d
            .iter()
            .map(|&dd| {
                times
                    .iter()
                    .map(|&t| {
                        let x = 2.0 * t - dd as f64;
                        0.1 / (1.0 + (-x / 0.02).exp()) * (-x.max(0.0)).exp()
                    })
                    .collect()
            })
            .collect();
        let grid = QuenchGrid {
            times: times.clone(),
            d: d.clone(),
            stderr: vec![vec![0.0; times.len()]; d.len()],
            values,
        };
        for definition in [FrontDefinition::HalfRise, FrontDefinition::FirstMaximum] {
            let fit = fit_lightcone(
                &grid,
                &LightconeOptions {
                    definition,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_abs_diff_eq!(fit.get("vg").unwrap(), 1.0, epsilon = 0.02);
        }
        let fronts = front_arrivals(&grid, &LightconeOptions::default());
        assert_eq!(fronts.first().unwrap().d, 2);
    }

    #[test]
    fn lightcone_needs_three_fronts() {
        let times: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let grid = QuenchGrid {
            times: times.clone(),
            d: vec![1, 2, 3],
            values: vec![vec![0.0; 10]; 3],
            stderr: vec![vec![0.0; 10]; 3],
        };
        assert!(fit_lightcone(&grid, &LightconeOptions::default()).is_err());
    }

    #[test]
    fn hole_decay_examples() {
        assert!(hole_decay_length(0.0, 24).unwrap().perimeter.is_infinite());
        let h = hole_decay_length(0.06, 24).unwrap();
        assert_abs_diff_eq!(h.perimeter, 7.82, epsilon = 5e-3);
        assert_abs_diff_eq!(h.chord, 6.5, epsilon = 0.05);
        assert_abs_diff_eq!(
            perimeter_distance(h.chord, &ChainGeometry::periodic(24).unwrap()).unwrap(),
            h.perimeter,
            epsilon = 1e-9
        );
        assert!(hole_decay_length(0.5, 24).is_err());
    }

    #[test]
    fn snapshot_estimator_matches_born_rule() {
        // |psi> = cos a |up up> + sin a |down down| on two sites: C^z_01 = 1 - cos^2(2a)
        let a: f64 = 0.6;
        let mut rng = substream(8, Stream::Snapshots, 0);
        let shots: Vec<Vec<i8>> = (0..100_000)
            .map(|_| {
                if rng.random::<f64>() < a.cos().powi(2) {
                    vec![1, 1]
                } else {
                    vec![-1, -1]
                }
            })
            .collect();
        let set = SnapshotSet {
            n_sites: 2,
            basis: BasisLabel::Z,
            shots,
            seed: 8,
            time: 0.0,
            realization: 0,
        };
        let geom = ChainGeometry::open(3, 2).unwrap();
        let set3 = SnapshotSet {
            n_sites: 3,
            shots: set.shots.iter().map(|s| vec![s[0], s[1], 0]).collect(),
            ..set
        };
        let p = bin_snapshots(&set3, &geom).unwrap();
        let want = 1.0 - (2.0 * a).cos().powi(2);
        assert!(
            (p.mean[0] - want).abs() < 3.0 * p.stderr[0],
            "{} vs {want} +- {}",
            p.mean[0],
            p.stderr[0]
        );
    }

    #[test]
    fn power_law_fit_and_slope() {
        let x: Vec<f64> = (1..=30).map(|k| k as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v.powf(-1.5)).collect();
        let s = vec![1e-3; x.len()];
        let fit = fit_power_law(&x, &y, &s).unwrap();
        assert_abs_diff_eq!(fit.get("alpha").unwrap(), 1.5, epsilon = 1e-6);
        assert!(fit.p_value.unwrap() > 0.99);
        assert_abs_diff_eq!(
            loglog_slope(&x, &y, 1.0, 30.0).unwrap(),
            -1.5,
            epsilon = 1e-12
        );
    }
}
