//! Simulated experimental sequences: light-shift ramps with decay and holes,
//! projective snapshots, quenches, Friedel preparation and angular scans.

use std::collections::BTreeSet;
use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{bin_ensemble, CorrelationProfile};
use crate::exact::{
    lanczos_extremal, nan_mean_stderr, KrylovOptions, LanczosOptions, PropagationStats, Propagator,
    Which,
};
use crate::hilbert::{
    enumerate_sector, expand_matrix, expand_vector, full_state_z, observable_cxx, observable_czz,
    observable_sz, FullState, SectorOperator, SectorState,
};
use crate::lattice::{build_couplings, restrict_to_active, ChainGeometry, CouplingModel, Sign};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

/// Sites above which dense rotated-basis measurements are refused.
pub const DENSE_MEASUREMENT_CAP: usize = 20;
/// Largest ring handled by `run_quench`.
pub const QUENCH_CAP: usize = 16;

// ---------------------------------------------------------------------------
// Schedules and noise

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RampSchedule {
    /// Initial light shift magnitude, rad/us.
    pub delta0: f64,
    /// Ramp duration, us.
    pub duration: f64,
    pub alpha: f64,
    /// `Ferro` puts `+delta` on addressed sites, `Antiferro` puts `-delta`.
    pub sign: Sign,
    /// Addressed sites, prepared down.
    pub addressed: BTreeSet<usize>,
    /// Recording times in `[0, total_time]`; the end point is always added.
    pub checkpoints: Vec<f64>,
    /// Ramp down, then back up along the reversed profile.
    pub reverse: bool,
}

impl RampSchedule {
    pub fn new(
        delta0: f64,
        duration: f64,
        alpha: f64,
        sign: Sign,
        addressed: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let s = Self {
            delta0,
            duration,
            alpha,
            sign,
            addressed: addressed.into_iter().collect(),
            checkpoints: vec![],
            reverse: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_checkpoints(mut self, times: Vec<f64>) -> Self {
        self.checkpoints = times;
        self
    }

    pub fn reversed(mut self, reverse: bool) -> Self {
        self.reverse = reverse;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Protocol(format!(
                "ramp duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.alpha >= 1.0) {
            return Err(Error::Protocol(format!(
                "ramp alpha must be >= 1, got {}",
                self.alpha
            )));
        }
        if !self.delta0.is_finite() {
            return Err(Error::Protocol("delta0 must be finite".into()));
        }
        let total = self.total_time();
        if let Some(t) = self
            .checkpoints
            .iter()
            .find(|t| !(**t >= 0.0 && **t <= total))
        {
            return Err(Error::Protocol(format!(
                "checkpoint {t} outside [0, {total}]"
            )));
        }
        Ok(())
    }

    pub fn total_time(&self) -> f64 {
        if self.reverse {
            2.0 * self.duration
        } else {
            self.duration
        }
    }

    /// Sorted, deduplicated checkpoints including the final time.
    pub fn recording_times(&self) -> Vec<f64> {
        let mut t = self.checkpoints.clone();
        t.push(self.total_time());
        t.sort_by(f64::total_cmp);
        t.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        t
    }

    /// Signed light shift on addressed sites at time `t`.
    pub fn light_at(&self, t: f64) -> Result<f64> {
        let tau = if self.reverse && t > self.duration {
            2.0 * self.duration - t
        } else {
            t
        };
        let d = lila_delta(tau.clamp(0.0, self.duration), self)?;
        Ok(match self.sign {
            Sign::Ferro => d,
            Sign::Antiferro => -d,
        })
    }
}

/// `delta(t) = delta0 (T - t) / (T - (1 - alpha) t)` on `[0, T]`.
pub fn lila_delta(t: f64, s: &RampSchedule) -> Result<f64> {
    let big_t = s.duration;
    if !(0.0..=big_t).contains(&t) {
        return Err(Error::Protocol(format!(
            "time {t} outside the ramp [0, {big_t}]"
        )));
    }
    Ok(s.delta0 * (big_t - t) / (big_t - (1.0 - s.alpha) * t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseModel {
    /// Probability that a site starts empty.
    pub p_init: f64,
    /// Rate of each of the four decay channels, 1/us.
    pub gamma: f64,
    pub eps_up: f64,
    pub eps_dn: f64,
    pub holes: bool,
    pub decay: bool,
    pub detection: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            p_init: 0.02,
            gamma: 0.0037,
            eps_up: 0.025,
            eps_dn: 0.03,
            holes: true,
            decay: true,
            detection: true,
        }
    }
}

impl NoiseModel {
    pub fn ideal() -> Self {
        Self {
            holes: false,
            decay: false,
            detection: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_init", self.p_init),
            ("eps_up", self.eps_up),
            ("eps_dn", self.eps_dn),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Protocol(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Protocol(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        Ok(())
    }

    fn hole_probability(&self) -> f64 {
        if self.holes {
            self.p_init
        } else {
            0.0
        }
    }

    /// Total jump rate per active site (two channels out of each level).
    fn site_rate(&self) -> f64 {
        if self.decay {
            2.0 * self.gamma
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// Trajectory states

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jump {
    pub time: f64,
    pub site: usize,
    /// Level the site decayed from.
    pub from_up: bool,
    /// One of four channels, two per level.
    pub channel: u8,
}

/// A pure state on the active sites of an `n_sites` chain.
#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub n_sites: usize,
    /// `sites[k]` is the chain index of bit `k`.
    pub sites: Vec<usize>,
    pub state: SectorState,
    pub jumps: Vec<Jump>,
}

impl TrajectoryState {
    pub fn is_active(&self, i: usize) -> bool {
        self.sites.contains(&i)
    }

    /// Full-length `<Z_i>`, NaN on holes.
    pub fn sz(&self) -> Vec<f64> {
        expand_vector(&observable_sz(&self.state), &self.sites, self.n_sites)
    }

    pub fn cx(&self) -> Vec<f64> {
        expand_matrix(&observable_cxx(&self.state), &self.sites, self.n_sites)
    }

    pub fn cz(&self) -> Vec<f64> {
        expand_matrix(&observable_czz(&self.state), &self.sites, self.n_sites)
    }
}

/// Project bit `pos` onto `up` and drop it from the register.
fn remove_site(state: &SectorState, pos: usize, up: bool) -> Result<SectorState> {
    let n = state.n_sites();
    let n_up = state.basis.n_up() - usize::from(up);
    let basis = Arc::new(enumerate_sector(n - 1, n_up)?);
    let mut out = SectorState::zeros(basis.clone());
    let low = (1u32 << pos) - 1;
    for (k, &c) in state.basis.configs().iter().enumerate() {
        if (c >> pos & 1 == 1) != up {
            continue;
        }
        let squeezed = (c & low) | ((c >> (pos + 1)) << pos);
        out.amplitudes[basis.rank(squeezed)] = state.amplitudes[k];
    }
    if out.normalize() == 0.0 {
        return Err(Error::Protocol(format!(
            "projection of site {pos} has zero weight"
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ramps

#[derive(Debug, Clone, Serialize)]
pub struct Checkpoint {
    pub time: f64,
    pub light: f64,
    pub sz: Vec<f64>,
    pub sz_err: Vec<f64>,
    /// Mean `<Z>` over active addressed / unaddressed sites.
    pub sz_addressed: (f64, f64),
    pub sz_unaddressed: (f64, f64),
    /// Fraction of trajectories in which each site still holds a spin.
    pub survival: Vec<f64>,
    pub energy: (f64, f64),
    pub cx: CorrelationProfile,
    pub cz: CorrelationProfile,
    pub cx_matrix: Vec<f64>,
    pub cz_matrix: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RampResult {
    pub n_sites: usize,
    pub checkpoints: Vec<Checkpoint>,
    pub finals: Vec<TrajectoryState>,
    pub stats: PropagationStats,
    pub mean_jumps: f64,
}

struct Sample {
    sz: Vec<f64>,
    cx: Vec<f64>,
    cz: Vec<f64>,
    addressed: f64,
    unaddressed: f64,
    energy: f64,
}

fn initial_config(sites: &[usize], addressed: &BTreeSet<usize>) -> u32 {
    sites
        .iter()
        .enumerate()
        .filter(|(_, s)| !addressed.contains(s))
        .fold(0u32, |c, (k, _)| c | 1 << k)
}

fn site_mean(values: &[f64], pick: impl Fn(usize) -> bool) -> f64 {
    let v: Vec<f64> = values
        .iter()
        .enumerate()
        .filter(|(i, x)| pick(*i) && x.is_finite())
        .map(|(_, x)| *x)
        .collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn run_trajectory(
    geom: &ChainGeometry,
    model: &CouplingModel,
    sched: &RampSchedule,
    noise: &NoiseModel,
    seed: u64,
    index: u64,
    krylov: KrylovOptions,
) -> Result<(Vec<Sample>, TrajectoryState, PropagationStats)> {
    let n = geom.n_sites();
    let mut rng = substream(seed, Stream::Trajectory, index);
    let mut hole_rng = substream(seed, Stream::Holes, index);
    let p = noise.hole_probability();
    let holes: Vec<usize> = (0..n)
        .filter(|&i| geom.is_active(i) && p > 0.0 && hole_rng.random::<f64>() < p)
        .collect();
    let mut g = geom.with_holes(holes)?;
    let (mut mats, mut sites) = restrict_to_active(&g, &build_couplings(&g, model)?)?;
    let n_up = sites
        .iter()
        .filter(|s| !sched.addressed.contains(s))
        .count();
    let basis = Arc::new(enumerate_sector(sites.len(), n_up)?);
    let mut state = SectorState::from_config(basis, initial_config(&sites, &sched.addressed))?;
    let mut jumps = vec![];
    let mut stats = PropagationStats::default();
    let mut samples = vec![];
    let next_jump = |rng: &mut ChaCha8Rng, t: f64, n_act: usize| {
        let rate = noise.site_rate() * n_act as f64;
        if rate > 0.0 {
            t + Exp::new(rate).expect("positive rate").sample(rng)
        } else {
            f64::INFINITY
        }
    };
    let mut t = 0.0;
    let mut t_jump = next_jump(&mut rng, t, sites.len());
    // false once every spin has decayed
    let mut alive = true;
    for &t_rec in &sched.recording_times() {
        while alive && t < t_rec {
            let t_stop = t_rec.min(t_jump);
            let op = SectorOperator::new(state.basis.clone(), &mats)?;
            let prop = Propagator::new(&op, krylov)?;
            let addressed: Vec<bool> = sites.iter().map(|s| sched.addressed.contains(s)).collect();
            let light = |tt: f64| -> Vec<f64> {
                let d = sched.light_at(tt).unwrap_or(0.0);
                addressed.iter().map(|&a| if a { d } else { 0.0 }).collect()
            };
            prop.evolve(Some(&light), &mut state.amplitudes, t, t_stop, &mut stats)?;
            t = t_stop;
            if t_jump <= t_rec {
                // jump: pick a site uniformly, its level by the Born rule
                let pos = rng.random_range(0..sites.len());
                let p_up = 0.5 * (1.0 + observable_sz(&state)[pos]);
                let from_up = rng.random::<f64>() < p_up;
                let channel = rng.random_range(0..2u8) + if from_up { 0 } else { 2 };
                jumps.push(Jump {
                    time: t,
                    site: sites[pos],
                    from_up,
                    channel,
                });
                if sites.len() == 1 {
                    alive = false;
                    sites.clear();
                    break;
                }
                state = remove_site(&state, pos, from_up)?;
                g = g.with_holes([sites[pos]])?;
                let r = restrict_to_active(&g, &build_couplings(&g, model)?)?;
                mats = r.0;
                sites = r.1;
                t_jump = next_jump(&mut rng, t, sites.len());
            }
        }
        if !alive {
            samples.push(Sample {
                sz: vec![f64::NAN; n],
                cx: vec![f64::NAN; n * n],
                cz: vec![f64::NAN; n * n],
                addressed: f64::NAN,
                unaddressed: f64::NAN,
                energy: f64::NAN,
            });
            continue;
        }
        let traj = TrajectoryState {
            n_sites: n,
            sites: sites.clone(),
            state: state.clone(),
            jumps: vec![],
        };
        let sz = traj.sz();
        let op = SectorOperator::new(state.basis.clone(), &mats)?;
        let mut hv = vec![Complex64::default(); state.dim()];
        op.apply(None, &state.amplitudes, &mut hv);
        let energy = state
            .amplitudes
            .iter()
            .zip(&hv)
            .map(|(a, b)| (a.conj() * b).re)
            .sum::<f64>();
        samples.push(Sample {
            addressed: site_mean(&sz, |i| sched.addressed.contains(&i)),
            unaddressed: site_mean(&sz, |i| !sched.addressed.contains(&i)),
            cx: traj.cx(),
            cz: traj.cz(),
            sz,
            energy,
        });
    }
    Ok((
        samples,
        TrajectoryState {
            n_sites: n,
            sites,
            state,
            jumps,
        },
        stats,
    ))
}

fn scalar_stats(v: &[f64]) -> (f64, f64) {
    let cols: Vec<[f64; 1]> = v.iter().map(|&x| [x]).collect();
    let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    let (m, e) = nan_mean_stderr(&refs);
    (m[0], e[0])
}

/// Trajectory-averaged ramp. Results are independent of the thread count.
pub fn run_ramp(
    geom: &ChainGeometry,
    model: &CouplingModel,
    sched: &RampSchedule,
    noise: &NoiseModel,
    n_trajectories: usize,
    seed: u64,
    krylov: KrylovOptions,
) -> Result<RampResult> {
    sched.validate()?;
    noise.validate()?;
    model.validate()?;
    if n_trajectories == 0 {
        return Err(Error::Protocol("need at least one trajectory".into()));
    }
    if let Some(s) = sched.addressed.iter().find(|&&s| s >= geom.n_sites()) {
        return Err(Error::Protocol(format!(
            "addressed site {s} outside the chain"
        )));
    }
    let runs: Vec<Result<_>> = (0..n_trajectories as u64)
        .into_par_iter()
        .map(|k| run_trajectory(geom, model, sched, noise, seed, k, krylov))
        .collect();
    let runs: Vec<(Vec<Sample>, TrajectoryState, PropagationStats)> =
        runs.into_iter().collect::<Result<_>>()?;
    let n = geom.n_sites();
    let times = sched.recording_times();
    let mut checkpoints = Vec::with_capacity(times.len());
    for (c, &time) in times.iter().enumerate() {
        let sz: Vec<&[f64]> = runs.iter().map(|r| r.0[c].sz.as_slice()).collect();
        let cx: Vec<&[f64]> = runs.iter().map(|r| r.0[c].cx.as_slice()).collect();
        let cz: Vec<&[f64]> = runs.iter().map(|r| r.0[c].cz.as_slice()).collect();
        let (sz_mean, sz_err) = nan_mean_stderr(&sz);
        let survival = (0..n)
            .map(|i| sz.iter().filter(|s| s[i].is_finite()).count() as f64 / runs.len() as f64)
            .collect();
        let pick = |f: fn(&Sample) -> f64| {
            scalar_stats(&runs.iter().map(|r| f(&r.0[c])).collect::<Vec<_>>())
        };
        checkpoints.push(Checkpoint {
            time,
            light: sched.light_at(time)?,
            sz: sz_mean,
            sz_err,
            sz_addressed: pick(|s| s.addressed),
            sz_unaddressed: pick(|s| s.unaddressed),
            survival,
            energy: pick(|s| s.energy),
            cx: bin_ensemble(&cx, geom, "x")?,
            cz: bin_ensemble(&cz, geom, "z")?,
            cx_matrix: nan_mean_stderr(&cx).0,
            cz_matrix: nan_mean_stderr(&cz).0,
        });
    }
    let mut stats = PropagationStats::default();
    for r in &runs {
        stats.steps += r.2.steps;
        stats.substeps += r.2.substeps;
        stats.matvecs += r.2.matvecs;
        stats.max_error = stats.max_error.max(r.2.max_error);
    }
    let mean_jumps = runs.iter().map(|r| r.1.jumps.len() as f64).sum::<f64>() / runs.len() as f64;
    Ok(RampResult {
        n_sites: n,
        checkpoints,
        finals: runs.into_iter().map(|r| r.1).collect(),
        stats,
        mean_jumps,
    })
}

/// Sites `0, 2, 4, ...` (`parity = 0`) or `1, 3, ...` among the active ones.
pub fn sublattice(geom: &ChainGeometry, parity: usize) -> BTreeSet<usize> {
    (0..geom.n_sites())
        .filter(|&i| i % 2 == parity % 2 && geom.is_active(i))
        .collect()
}

// ---------------------------------------------------------------------------
// Snapshots

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum BasisLabel {
    Z,
    /// Spin along `cos(theta) x + sin(theta) y`.
    Theta(f64),
}

impl BasisLabel {
    pub fn label(&self) -> String {
        match self {
            Self::Z => "z".into(),
            Self::Theta(t) => format!("theta={t}"),
        }
    }
}

/// Projective shots: `+1`, `-1`, or `0` for a missing (hole) site.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnapshotSet {
    pub n_sites: usize,
    pub basis: BasisLabel,
    pub shots: Vec<Vec<i8>>,
    pub seed: u64,
    pub time: f64,
    pub realization: u64,
}

/// Rotate every site so that `Z` outcomes sample `sigma_theta`.
fn rotate_dense(dense: &mut [Complex64], n: usize, theta: f64) {
    let ph = Complex64::from_polar(1.0, -theta);
    for site in 0..n {
        let bit = 1usize << site;
        for k in 0..dense.len() {
            if k & bit != 0 {
                let (u, d) = (dense[k], dense[k ^ bit]);
                dense[k] = (u + ph * d) * FRAC_1_SQRT_2;
                dense[k ^ bit] = (u - ph * d) * FRAC_1_SQRT_2;
            }
        }
    }
}

/// Outcome probabilities over `2^m` patterns of the register in `basis`.
fn pattern_distribution(state: &SectorState, basis: BasisLabel) -> Result<(Vec<u32>, Vec<f64>)> {
    match basis {
        BasisLabel::Z => Ok((
            state.basis.configs().to_vec(),
            state.amplitudes.iter().map(|a| a.norm_sqr()).collect(),
        )),
        BasisLabel::Theta(theta) => {
            let m = state.n_sites();
            if m > DENSE_MEASUREMENT_CAP {
                return Err(Error::Protocol(format!(
                    "rotated-basis measurement on {m} spins exceeds the {DENSE_MEASUREMENT_CAP}-spin cap"
                )));
            }
            let mut dense = FullState::from_sector(state)?.to_dense()?;
            rotate_dense(&mut dense, m, theta);
            Ok((
                (0..dense.len() as u32).collect(),
                dense.iter().map(|a| a.norm_sqr()).collect(),
            ))
        }
    }
}

/// Born-rule shots from trajectory states, cycling through the ensemble, with
/// independent read-out flips.
pub fn sample_snapshots(
    states: &[TrajectoryState],
    basis: BasisLabel,
    n_shots: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<SnapshotSet> {
    let Some(first) = states.first() else {
        return Err(Error::Protocol("no states to sample".into()));
    };
    let n = first.n_sites;
    let dists: Vec<(Vec<u32>, Vec<f64>)> = states
        .iter()
        .map(|s| {
            let (pat, p) = pattern_distribution(&s.state, basis)?;
            let mut cdf = Vec::with_capacity(p.len());
            let mut acc = 0.0;
            for x in p {
                acc += x;
                cdf.push(acc);
            }
            Ok((pat, cdf))
        })
        .collect::<Result<_>>()?;
    let (eu, ed) = if noise.detection {
        (noise.eps_up, noise.eps_dn)
    } else {
        (0.0, 0.0)
    };
    let mut rng = substream(seed, Stream::Snapshots, 0);
    let mut shots = Vec::with_capacity(n_shots);
    for k in 0..n_shots {
        let idx = k % states.len();
        let (pat, cdf) = &dists[idx];
        let total = *cdf.last().unwrap_or(&0.0);
        let u = rng.random::<f64>() * total;
        let pick = cdf.partition_point(|&c| c <= u).min(pat.len() - 1);
        let config = pat[pick];
        let mut shot = vec![0i8; n];
        for (b, &site) in states[idx].sites.iter().enumerate() {
            let up = config >> b & 1 == 1;
            let flip = rng.random::<f64>() < if up { eu } else { ed };
            shot[site] = if up != flip { 1 } else { -1 };
        }
        shots.push(shot);
    }
    Ok(SnapshotSet {
        n_sites: n,
        basis,
        shots,
        seed,
        time: f64::NAN,
        realization: 0,
    })
}

// ---------------------------------------------------------------------------
// Angular scans

#[derive(Debug, Clone, Serialize)]
pub struct AngularPoint {
    pub theta: f64,
    /// Per-site `<sigma_theta>`, NaN on holes.
    pub mean: Vec<f64>,
    /// Connected `C^theta_ij`, row-major.
    pub connected: Vec<f64>,
}

/// Exact rotated-basis moments of a direct-sum state.
pub fn angular_moments(state: &FullState, theta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = state.n_sites;
    if n > DENSE_MEASUREMENT_CAP {
        return Err(Error::Protocol(format!(
            "angular scan on {n} spins exceeds the {DENSE_MEASUREMENT_CAP}-spin cap"
        )));
    }
    let mut dense = state.to_dense()?;
    rotate_dense(&mut dense, n, theta);
    let rotated = FullState::from_dense(n, &dense)?;
    let m = full_state_z(&rotated);
    Ok((m.mean_z(), m.connected()))
}

/// `<sigma_theta>` and `C^theta` averaged over an ensemble of trajectory states.
pub fn angular_scan(states: &[TrajectoryState], thetas: &[f64]) -> Result<Vec<AngularPoint>> {
    let Some(first) = states.first() else {
        return Err(Error::Protocol("no states for the angular scan".into()));
    };
    let n = first.n_sites;
    thetas
        .iter()
        .map(|&theta| {
            let mut means = vec![];
            let mut conns = vec![];
            for s in states {
                let (mz, cz) = angular_moments(&FullState::from_sector(&s.state)?, theta)?;
                means.push(expand_vector(&mz, &s.sites, n));
                conns.push(expand_matrix(&cz, &s.sites, n));
            }
            let mr: Vec<&[f64]> = means.iter().map(|v| v.as_slice()).collect();
            let cr: Vec<&[f64]> = conns.iter().map(|v| v.as_slice()).collect();
            Ok(AngularPoint {
                theta,
                mean: nan_mean_stderr(&mr).0,
                connected: nan_mean_stderr(&cr).0,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Quenches

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QuenchInitial {
    /// All spins along `+y`.
    CssY,
    /// Alternating `+y` / `-y`.
    StaggeredCssY,
}

/// `C^z(d, t)` on a ring; `values[id][it]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuenchGrid {
    pub times: Vec<f64>,
    pub d: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct QuenchResult {
    pub grid: QuenchGrid,
    /// `sum_ij C^z_ij(t)`.
    pub variance_mz: Vec<f64>,
    /// Full `C^z_ij` at each time.
    pub matrices: Vec<Vec<f64>>,
    pub stats: PropagationStats,
}

pub fn initial_product(n: usize, initial: QuenchInitial) -> Result<FullState> {
    FullState::product(n, |i| {
        let sign = match initial {
            QuenchInitial::CssY => 1.0,
            QuenchInitial::StaggeredCssY => {
                if i % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        (
            Complex64::new(FRAC_1_SQRT_2, 0.0),
            Complex64::new(0.0, sign * FRAC_1_SQRT_2),
        )
    })
}

/// Exact sector-resolved evolution of a product state on a clean ring.
pub fn run_quench(
    geom: &ChainGeometry,
    model: &CouplingModel,
    initial: QuenchInitial,
    times: &[f64],
    krylov: KrylovOptions,
) -> Result<QuenchResult> {
    let n = geom.n_sites();
    if n > QUENCH_CAP {
        return Err(Error::Protocol(format!(
            "quench on {n} sites exceeds the {QUENCH_CAP}-site cap"
        )));
    }
    if geom.n_active() != n {
        return Err(Error::Protocol(
            "quench expects a ring without holes".into(),
        ));
    }
    if times.is_empty() || times.windows(2).any(|w| w[1] < w[0]) || times[0] < 0.0 {
        return Err(Error::Protocol(
            "quench times must be non-negative and sorted".into(),
        ));
    }
    let mats = build_couplings(geom, model)?;
    let mut state = initial_product(n, initial)?;
    let mut stats = PropagationStats::default();
    let ops: Vec<SectorOperator> = state
        .sectors
        .iter()
        .map(|s| SectorOperator::new(s.basis.clone(), &mats))
        .collect::<Result<_>>()?;
    let dmax = n / 2;
    let mut grid = QuenchGrid {
        times: times.to_vec(),
        d: (1..=dmax).collect(),
        values: vec![vec![]; dmax],
        stderr: vec![vec![]; dmax],
    };
    let mut variance_mz = vec![];
    let mut matrices = vec![];
    let mut t = 0.0;
    for &t_next in times {
        let results: Vec<Result<PropagationStats>> = state
            .sectors
            .par_iter_mut()
            .zip(&ops)
            .map(|(s, op)| {
                let mut st = PropagationStats::default();
                Propagator::new(op, krylov)?.evolve(None, &mut s.amplitudes, t, t_next, &mut st)?;
                Ok(st)
            })
            .collect();
        for r in results {
            let st = r?;
            stats.steps = stats.steps.max(st.steps);
            stats.substeps += st.substeps;
            stats.matvecs += st.matvecs;
            stats.max_error = stats.max_error.max(st.max_error);
        }
        t = t_next;
        let cz = full_state_z(&state).connected();
        for (id, &d) in grid.d.iter().enumerate() {
            let vals: Vec<f64> = (0..n)
                .flat_map(|i| [(i + d) % n, (i + n - d) % n].map(|j| cz[i * n + j]))
                .collect();
            grid.values[id].push(vals.iter().sum::<f64>() / vals.len() as f64);
            grid.stderr[id].push(0.0);
        }
        variance_mz.push(cz.iter().sum());
        matrices.push(cz);
    }
    Ok(QuenchResult {
        grid,
        variance_mz,
        matrices,
        stats,
    })
}

// ---------------------------------------------------------------------------
// Friedel oscillations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FriedelMode {
    DirectGroundState,
    AdiabaticRamp,
}

/// Sites prepared down: `k` is addressed iff `floor((k+1) n_dn / N)` exceeds
/// `floor(k n_dn / N)`, which spreads `n_dn` sites as evenly as possible.
pub fn friedel_pattern(n: usize, n_dn: usize) -> Vec<usize> {
    (0..n)
        .filter(|&k| (k + 1) * n_dn / n > k * n_dn / n)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FriedelRun {
    pub n_spins: usize,
    pub mz: i64,
    /// Addressed positions along the chain (0 = first site after the gap).
    pub pattern: Vec<usize>,
    /// Open chain `<Z_j>` ordered along the chain.
    pub obc: Vec<f64>,
    /// Uniform ring background at the same filling.
    pub pbc: Vec<f64>,
    /// Largest deviation of the raw ring profile from its mean.
    pub pbc_spread: f64,
    pub signal: Vec<f64>,
    pub degenerate: bool,
}

/// Friedel profile of an `n_spins`-spin open chain cut from an
/// `(n_spins + 1)`-site ring, minus the `n_spins`-site ring background.
pub fn run_friedel(
    n_spins: usize,
    model: &CouplingModel,
    mz: i64,
    mode: FriedelMode,
    schedule: Option<&RampSchedule>,
    lanczos: LanczosOptions,
    krylov: KrylovOptions,
) -> Result<FriedelRun> {
    if n_spins.is_multiple_of(2) {
        return Err(Error::Protocol(format!(
            "Friedel runs need an odd number of spins, got {n_spins}"
        )));
    }
    if (n_spins as i64 + mz) % 2 != 0 || mz.unsigned_abs() as usize > n_spins {
        return Err(Error::Protocol(format!(
            "M_z = {mz} is not reachable with {n_spins} spins"
        )));
    }
    let n_up = ((n_spins as i64 + mz) / 2) as usize;
    let n_dn = n_spins - n_up;
    let pattern = friedel_pattern(n_spins, n_dn);
    // chain position k sits on ring site k + 1; ring site 0 is removed
    let open = ChainGeometry::open(n_spins + 1, 0)?;
    let ring = ChainGeometry::periodic(n_spins)?;
    let which = Which::from(model.sign);
    let mut degenerate = false;
    let mut profile = |geom: &ChainGeometry, offset: usize| -> Result<Vec<f64>> {
        let (mats, sites) = restrict_to_active(geom, &build_couplings(geom, model)?)?;
        debug_assert!(sites.iter().enumerate().all(|(k, &s)| s == k + offset));
        match mode {
            FriedelMode::DirectGroundState => {
                let basis = Arc::new(enumerate_sector(n_spins, n_up)?);
                let res = lanczos_extremal(&mats, basis, which, &lanczos)?;
                degenerate |= res.degenerate;
                Ok(observable_sz(&res.state))
            }
            FriedelMode::AdiabaticRamp => {
                let sched = schedule.ok_or_else(|| {
                    Error::Protocol("adiabatic Friedel mode needs a ramp schedule".into())
                })?;
                let mut s = sched.clone();
                s.addressed = pattern.iter().map(|k| k + offset).collect();
                s.checkpoints.clear();
                let r = run_ramp(
                    geom,
                    model,
                    &s,
                    &NoiseModel::ideal(),
                    1,
                    lanczos.seed,
                    krylov,
                )?;
                Ok(sites
                    .iter()
                    .map(|&i| r.checkpoints.last().expect("final checkpoint").sz[i])
                    .collect())
            }
        }
    };
    let obc = profile(&open, 1)?;
    // translation average: a momentum-degenerate ring ground state need not be
    // uniform, the symmetric mixture of the degenerate manifold is
    let raw = profile(&ring, 0)?;
    let m0 = raw.iter().sum::<f64>() / n_spins as f64;
    let pbc_spread = raw.iter().map(|v| (v - m0).abs()).fold(0.0, f64::max);
    let pbc = vec![m0; n_spins];
    let signal = obc.iter().zip(&pbc).map(|(a, b)| a - b).collect();
    Ok(FriedelRun {
        n_spins,
        mz,
        pattern,
        obc,
        pbc,
        pbc_spread,
        signal,
        degenerate,
    })
}
