//! Scenario orchestration: one function per experiment type, all writing
//! through a single [`OutputSink`].

use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use tll_core::analysis::{
    bin_correlations, bin_snapshots, cutoff_scan, fit_cx, fit_cz, fit_friedel, fit_lightcone,
    fit_power_law, friedel_fft, friedel_wavevector, front_arrivals, loglog_slope, CorrectionOrder,
    CorrelationProfile, CutoffScan, CxFitOptions, CzFitOptions, DetectionErrors, FitResult,
    FriedelFitOptions, LightconeOptions,
};
use tll_core::exact::{
    dynamical_structure_factor, lanczos_extremal, susceptibility_and_velocity, thermal_observables,
    varmz_offset_correction, DsfOptions, LanczosResult, ThermalOptions, Which,
};
use tll_core::freefermion::{disorder_ensemble, DisorderOptions};
use tll_core::hilbert::{
    enumerate_sector, expand_matrix, expand_vector, observable_cxx, observable_czz, observable_sz,
};
use tll_core::lattice::{build_couplings, restrict_to_active, ChainGeometry, Sign};
use tll_core::protocol::{
    angular_scan, run_friedel, run_quench, run_ramp, sample_snapshots, BasisLabel, RampResult,
};

use crate::config::{ExperimentConfig, FitSettings, Scenario};
use crate::output::{num, OutputSink, ResultManifest};
use crate::svg::{self, Axis, Series};

const PROFILE_HEADER: &[&str] = &["d_sites", "r_chord", "mean", "stderr", "n_pairs"];

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    out: OutputSink,
    warnings: Vec<String>,
}

impl Run<'_> {
    fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// Run the configured scenario and write all outputs plus `manifest.json`.
/// Must be called inside the worker pool that should execute it.
pub fn run_scenario(cfg: &ExperimentConfig) -> Result<ResultManifest> {
    let start = Instant::now();
    let mut run = Run {
        cfg,
        out: OutputSink::new(&cfg.output_dir)?,
        warnings: vec![],
    };
    log::info!(
        "{} -> {} (seed {}, {} workers)",
        cfg.scenario.name(),
        cfg.output_dir.display(),
        cfg.seed,
        rayon::current_num_threads()
    );
    run.out.write_text("config.toml", &cfg.source)?;
    match cfg.scenario {
        Scenario::GroundStateCorrelations => ground_state(&mut run)?,
        Scenario::AdiabaticRamp | Scenario::BackAndForthRamp => ramp(&mut run)?,
        Scenario::Friedel => friedel(&mut run)?,
        Scenario::Quench => quench(&mut run)?,
        Scenario::Dsf => dsf(&mut run)?,
        Scenario::DisorderedChain => disorder(&mut run)?,
        Scenario::ThermalComparison => thermal(&mut run)?,
    }
    let manifest = ResultManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scenario: cfg.scenario.name().into(),
        config_sha256: cfg.config_hash.clone(),
        seed: cfg.seed,
        workers: rayon::current_num_threads(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        warnings: run.warnings,
        files: vec![],
    };
    let manifest = run.out.finish(manifest)?;
    log::info!(
        "done in {:.1} s, {} files, {} warning(s)",
        manifest.wall_clock_s,
        manifest.files.len(),
        manifest.warnings.len()
    );
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Shared helpers

fn profile_rows(p: &CorrelationProfile) -> Vec<Vec<String>> {
    (0..p.len())
        .map(|k| {
            vec![
                p.d[k].to_string(),
                num(p.r[k]),
                num(p.mean[k]),
                num(p.stderr[k]),
                p.n_pairs[k].to_string(),
            ]
        })
        .collect()
}

fn profile_plot(title: &str, profiles: &[(&str, &CorrelationProfile)]) -> String {
    let abs: Vec<Vec<f64>> = profiles
        .iter()
        .map(|(_, p)| p.mean.iter().map(|v| v.abs()).collect())
        .collect();
    let series: Vec<Series> = profiles
        .iter()
        .zip(&abs)
        .map(|((label, p), y)| Series { label, x: &p.r, y })
        .collect();
    svg::line_plot(
        title,
        "chord distance r",
        "|C(r)|",
        &series,
        (Axis::Log, Axis::Log),
    )
}

#[derive(Clone, Copy)]
enum Observable {
    X { stagger: bool },
    Z,
}

impl Observable {
    fn name(&self) -> &'static str {
        match self {
            Self::X { .. } => "cx",
            Self::Z => "cz",
        }
    }

    fn fit(&self, p: &CorrelationProfile, rc: f64, s: &FitSettings) -> tll_core::Result<FitResult> {
        match *self {
            Self::X { stagger } => fit_cx(
                p,
                &CxFitOptions {
                    cutoff: rc,
                    stagger,
                    envelope: s.envelope,
                    rescale: s.rescale,
                },
            ),
            Self::Z => fit_cz(
                p,
                &CzFitOptions {
                    cutoff: rc,
                    rescale: s.rescale,
                },
            ),
        }
    }
}

/// Fit at the fixed cutoff, or scan the cutoffs and fit at the selected one.
/// Problems become warnings; the fit is still reported when one succeeded.
fn fit_profile(
    run: &mut Run,
    p: &CorrelationProfile,
    obs: Observable,
) -> (Option<FitResult>, Option<CutoffScan>) {
    let s = run.cfg.fit.clone();
    let name = obs.name();
    let (rc, scan) = match s.fixed_cutoff {
        Some(rc) => (Some(rc), None),
        None => {
            let fitter = |p: &CorrelationProfile, rc: f64| obs.fit(p, rc, &s);
            match cutoff_scan(p, &fitter, &s.cutoffs, s.tolerance) {
                Ok(scan) => {
                    let rc = match scan.selected {
                        Some(rc) => Some(rc),
                        None => {
                            let first = scan.table.iter().find(|t| t.1.is_some()).map(|t| t.0);
                            run.warn(format!(
                                "{name}: no cutoff with |K(r_c) - K(next)| < {}; reporting the fit at r_c = {}",
                                s.tolerance,
                                first.map(num).unwrap_or_else(|| "none".into())
                            ));
                            first
                        }
                    };
                    (rc, Some(scan))
                }
                Err(e) => {
                    run.warn(format!("{name}: cutoff scan failed: {e}"));
                    (None, None)
                }
            }
        }
    };
    let fit = rc.and_then(|rc| match obs.fit(p, rc, &s) {
        Ok(f) => Some(f),
        Err(e) => {
            run.warn(format!("{name}: fit at r_c = {rc} failed: {e}"));
            None
        }
    });
    if let Some(f) = &fit {
        if !f.converged {
            run.warn(format!("{name}: fit did not converge"));
        }
        if !f.at_bound.is_empty() {
            run.warn(format!(
                "{name}: parameters at their bounds: {}",
                f.at_bound.join(", ")
            ));
        }
        log::info!(
            "{name}: K = {} +- {} at r_c = {}",
            num(f.get("K").unwrap_or(f64::NAN)),
            num(f.error("K").unwrap_or(f64::NAN)),
            num(f.cutoff.unwrap_or(f64::NAN))
        );
    }
    (fit, scan)
}

fn write_fits(
    run: &mut Run,
    prefix: &str,
    fits: &[(Observable, Option<FitResult>, Option<CutoffScan>)],
) -> Result<()> {
    let mut rows = vec![];
    for (obs, fit, scan) in fits {
        if let Some(f) = fit {
            run.out
                .write_json(&format!("{prefix}fit_{}.json", obs.name()), f)?;
        }
        if let Some(scan) = scan {
            for (rc, k, e) in &scan.table {
                rows.push(vec![
                    obs.name().to_string(),
                    num(*rc),
                    num(k.unwrap_or(f64::NAN)),
                    num(e.unwrap_or(f64::NAN)),
                ]);
            }
        }
    }
    if !rows.is_empty() {
        run.out.write_csv(
            &format!("{prefix}cutoff_scan.csv"),
            &["observable", "r_c", "K", "K_err"],
            &rows,
        )?;
    }
    Ok(())
}

struct Extremal {
    result: LanczosResult,
    sites: Vec<usize>,
}

fn extremal_state(run: &mut Run, geom: &ChainGeometry, n_up: usize) -> Result<Extremal> {
    let cfg = run.cfg;
    let (mats, sites) = restrict_to_active(geom, &build_couplings(geom, &cfg.model)?)?;
    let basis = Arc::new(enumerate_sector(sites.len(), n_up)?);
    log::info!(
        "Lanczos on {} spins, {} up, dimension {}",
        sites.len(),
        n_up,
        basis.dim()
    );
    let result = lanczos_extremal(&mats, basis, Which::from(cfg.model.sign), &cfg.lanczos)?;
    if result.degenerate {
        run.warn(format!(
            "extremal state is degenerate (gap {})",
            num(result.gap.unwrap_or(f64::NAN))
        ));
    }
    Ok(Extremal { result, sites })
}

fn sign_label(s: Sign) -> &'static str {
    match s {
        Sign::Ferro => "FM",
        Sign::Antiferro => "AFM",
    }
}

// ---------------------------------------------------------------------------
// Scenarios

fn ground_state(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let geom = &cfg.geometry;
    let n = geom.n_sites();
    let ext = extremal_state(run, geom, cfg.n_up)?;
    let st = &ext.result.state;
    let cx = expand_matrix(&observable_cxx(st), &ext.sites, n);
    let cz = expand_matrix(&observable_czz(st), &ext.sites, n);
    let sz = expand_vector(&observable_sz(st), &ext.sites, n);
    let px = bin_correlations(&cx, geom, "x")?;
    let pz = bin_correlations(&cz, geom, "z")?;
    run.out
        .write_csv("gs_cx.csv", PROFILE_HEADER, &profile_rows(&px))?;
    run.out
        .write_csv("gs_cz.csv", PROFILE_HEADER, &profile_rows(&pz))?;
    let rows: Vec<Vec<String>> = sz
        .iter()
        .enumerate()
        .map(|(i, v)| vec![i.to_string(), num(*v)])
        .collect();
    run.out.write_csv("gs_sz.csv", &["site", "sz"], &rows)?;
    let stagger = cfg.model.sign == Sign::Antiferro;
    let x = Observable::X { stagger };
    let (fx, sx) = fit_profile(run, &px, x);
    let (fz, sz_scan) = fit_profile(run, &pz, Observable::Z);
    write_fits(run, "", &[(x, fx, sx), (Observable::Z, fz, sz_scan)])?;
    let r = &ext.result;
    run.out.write_json(
        "ground_state.json",
        &json!({
            "sign": sign_label(cfg.model.sign),
            "n_active": ext.sites.len(),
            "n_up": cfg.n_up,
            "dimension": r.state.dim(),
            "energy_rad_per_us": r.energy,
            "residual": r.residual,
            "iterations": r.iterations,
            "gap_rad_per_us": r.gap,
            "degenerate": r.degenerate,
        }),
    )?;
    run.out.write_text(
        "gs_correlations.svg",
        &profile_plot("ground-state correlations", &[("C^x", &px), ("C^z", &pz)]),
    )?;
    Ok(())
}

fn ramp(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let geom = &cfg.geometry;
    let sched = cfg
        .schedule
        .as_ref()
        .context("ramp scenario without a schedule")?;
    log::info!(
        "ramp over {} us, {} trajectories",
        sched.total_time(),
        cfg.n_trajectories
    );
    let res = run_ramp(
        geom,
        &cfg.model,
        sched,
        &cfg.noise,
        cfg.n_trajectories,
        cfg.seed,
        cfg.krylov,
    )?;
    write_ramp_tables(run, &res)?;

    let last = res
        .checkpoints
        .last()
        .context("ramp produced no checkpoint")?;
    if cfg.fit_requested {
        let x = Observable::X {
            stagger: cfg.model.sign == Sign::Antiferro,
        };
        let (fx, sx) = fit_profile(run, &last.cx, x);
        let (fz, sz) = fit_profile(run, &last.cz, Observable::Z);
        write_fits(run, "", &[(x, fx, sx), (Observable::Z, fz, sz)])?;
    }
    snapshots(run, &res)?;

    let mut summary = json!({
        "total_time_us": sched.total_time(),
        "n_trajectories": cfg.n_trajectories,
        "mean_jumps": res.mean_jumps,
        "propagation": res.stats,
        "final_sz_addressed": last.sz_addressed,
        "final_sz_unaddressed": last.sz_unaddressed,
        "final_energy_rad_per_us": last.energy,
    });
    if cfg.scenario == Scenario::BackAndForthRamp {
        // addressed sites start down and the rest up, so a perfect return gives 1
        let ret = 0.5 * (last.sz_unaddressed.0 - last.sz_addressed.0);
        let err = 0.5 * last.sz_unaddressed.1.hypot(last.sz_addressed.1);
        summary["return_contrast"] = json!([ret, err]);
        log::info!("return contrast {ret:.4} +- {err:.4}");
    }
    run.out.write_json("ramp_summary.json", &summary)?;
    Ok(())
}

fn write_ramp_tables(run: &mut Run, res: &RampResult) -> Result<()> {
    let mut cp = vec![];
    let mut sz = vec![];
    let (mut cx, mut cz) = (vec![], vec![]);
    for c in &res.checkpoints {
        cp.push(vec![
            num(c.time),
            num(c.light),
            num(c.sz_addressed.0),
            num(c.sz_addressed.1),
            num(c.sz_unaddressed.0),
            num(c.sz_unaddressed.1),
            num(c.energy.0),
            num(c.energy.1),
        ]);
        for i in 0..c.sz.len() {
            sz.push(vec![
                num(c.time),
                i.to_string(),
                num(c.sz[i]),
                num(c.sz_err[i]),
                num(c.survival[i]),
            ]);
        }
        for (dst, p) in [(&mut cx, &c.cx), (&mut cz, &c.cz)] {
            for mut row in profile_rows(p) {
                row.insert(0, num(c.time));
                dst.push(row);
            }
        }
    }
    run.out.write_csv(
        "ramp_checkpoints.csv",
        &[
            "t_us",
            "light_rad_per_us",
            "sz_addressed",
            "sz_addressed_err",
            "sz_unaddressed",
            "sz_unaddressed_err",
            "energy_rad_per_us",
            "energy_err",
        ],
        &cp,
    )?;
    run.out.write_csv(
        "ramp_sz.csv",
        &["t_us", "site", "sz", "stderr", "survival"],
        &sz,
    )?;
    let header = ["t_us", "d_sites", "r_chord", "mean", "stderr", "n_pairs"];
    run.out.write_csv("ramp_cx.csv", &header, &cx)?;
    run.out.write_csv("ramp_cz.csv", &header, &cz)?;

    let t: Vec<f64> = res.checkpoints.iter().map(|c| c.time).collect();
    let a: Vec<f64> = res.checkpoints.iter().map(|c| c.sz_addressed.0).collect();
    let u: Vec<f64> = res.checkpoints.iter().map(|c| c.sz_unaddressed.0).collect();
    run.out.write_text(
        "ramp_magnetization.svg",
        &svg::line_plot(
            "sublattice magnetization",
            "t (us)",
            "<Z>",
            &[
                Series {
                    label: "addressed",
                    x: &t,
                    y: &a,
                },
                Series {
                    label: "unaddressed",
                    x: &t,
                    y: &u,
                },
            ],
            (Axis::Linear, Axis::Linear),
        ),
    )?;
    let last = res
        .checkpoints
        .last()
        .context("ramp produced no checkpoint")?;
    run.out.write_text(
        "ramp_correlations.svg",
        &profile_plot(
            "final correlations",
            &[("C^x", &last.cx), ("C^z", &last.cz)],
        ),
    )?;
    Ok(())
}

fn snapshots(run: &mut Run, res: &RampResult) -> Result<()> {
    let cfg = run.cfg;
    let s = &cfg.snapshots;
    let geom = &cfg.geometry;
    let mut rows = vec![];
    if s.n_shots > 0 {
        let mut bases = vec![];
        if s.z_basis {
            bases.push(BasisLabel::Z);
        }
        bases.extend(
            s.theta_deg
                .iter()
                .map(|t| BasisLabel::Theta(t.to_radians())),
        );
        let det = DetectionErrors::new(cfg.noise.eps_up, cfg.noise.eps_dn)?;
        for (k, basis) in bases.into_iter().enumerate() {
            let seed = cfg.seed.wrapping_add(1 + k as u64);
            let shots = sample_snapshots(&res.finals, basis, s.n_shots, &cfg.noise, seed)?;
            let raw = bin_snapshots(&shots, geom)?;
            let fixed = if cfg.noise.detection {
                det.invert_profile(&raw, CorrectionOrder::FirstOrder)
            } else {
                raw.clone()
            };
            let label = match basis {
                BasisLabel::Z => "z".to_string(),
                BasisLabel::Theta(t) => format!("theta_deg={}", num(t.to_degrees())),
            };
            for i in 0..raw.len() {
                rows.push(vec![
                    label.clone(),
                    raw.d[i].to_string(),
                    num(raw.r[i]),
                    num(raw.mean[i]),
                    num(raw.stderr[i]),
                    num(fixed.mean[i]),
                    num(fixed.stderr[i]),
                ]);
            }
        }
        run.out.write_csv(
            "snapshot_corr.csv",
            &[
                "basis",
                "d_sites",
                "r_chord",
                "raw",
                "raw_stderr",
                "corrected",
                "corrected_stderr",
            ],
            &rows,
        )?;
    }
    if !s.angular_scan_deg.is_empty() {
        let thetas: Vec<f64> = s.angular_scan_deg.iter().map(|t| t.to_radians()).collect();
        let points = angular_scan(&res.finals, &thetas)?;
        let n = geom.n_sites();
        let neighbour_mean = |c: &[f64], step: usize| {
            let v: Vec<f64> = (0..n)
                .map(|i| c[i * n + (i + step) % n])
                .filter(|v| v.is_finite())
                .collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        let rows: Vec<Vec<String>> = points
            .iter()
            .map(|p| {
                let m: Vec<f64> = p.mean.iter().copied().filter(|v| v.is_finite()).collect();
                vec![
                    num(p.theta.to_degrees()),
                    num(m.iter().sum::<f64>() / m.len().max(1) as f64),
                    num(neighbour_mean(&p.connected, 1)),
                    num(neighbour_mean(&p.connected, 2)),
                ]
            })
            .collect();
        run.out.write_csv(
            "angular_scan.csv",
            &["theta_deg", "mean_sigma", "c_nn", "c_nnn"],
            &rows,
        )?;
    }
    Ok(())
}

fn friedel(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let f = cfg
        .friedel
        .as_ref()
        .context("Friedel scenario without settings")?;
    let mut summary = vec![];
    for &mz in &f.mz {
        let tag = format!("mz{mz:+}");
        log::info!("Friedel run at M_z = {mz}");
        let r = run_friedel(
            f.n_spins,
            &cfg.model,
            mz,
            f.mode,
            cfg.schedule.as_ref(),
            cfg.lanczos,
            cfg.krylov,
        )?;
        if r.degenerate {
            run.warn(format!("M_z = {mz}: degenerate extremal state"));
        }
        let rows: Vec<Vec<String>> = (0..f.n_spins)
            .map(|j| {
                vec![
                    j.to_string(),
                    u8::from(r.pattern.contains(&j)).to_string(),
                    num(r.obc[j]),
                    num(r.pbc[j]),
                    num(r.signal[j]),
                ]
            })
            .collect();
        run.out.write_csv(
            &format!("friedel_{tag}.csv"),
            &["site", "addressed", "obc", "pbc", "signal"],
            &rows,
        )?;
        let spec = friedel_fft(&r.signal)?;
        let rows: Vec<Vec<String>> = spec
            .q
            .iter()
            .zip(&spec.magnitude)
            .map(|(q, m)| vec![num(*q), num(*m)])
            .collect();
        run.out.write_csv(
            &format!("friedel_fft_{tag}.csv"),
            &["q", "magnitude"],
            &rows,
        )?;
        let fit = match fit_friedel(
            &r.signal,
            None,
            mz,
            &FriedelFitOptions {
                pin_kf: f.pin_kf,
                edge_exclusion: f.edge_exclusion,
            },
        ) {
            Ok(fit) => {
                run.out
                    .write_json(&format!("fit_friedel_{tag}.json"), &fit)?;
                Some(fit)
            }
            Err(e) => {
                run.warn(format!("M_z = {mz}: Friedel fit failed: {e}"));
                None
            }
        };
        let k = fit.as_ref().and_then(|f| f.get("K")).unwrap_or(f64::NAN);
        let ke = fit.as_ref().and_then(|f| f.error("K")).unwrap_or(f64::NAN);
        summary.push(vec![
            mz.to_string(),
            num(friedel_wavevector(mz, f.n_spins)),
            num(spec.peak_q),
            spec.flat.to_string(),
            num(k),
            num(ke),
            r.degenerate.to_string(),
        ]);
        let x: Vec<f64> = (0..f.n_spins).map(|j| j as f64).collect();
        run.out.write_text(
            &format!("friedel_{tag}.svg"),
            &svg::line_plot(
                &format!("Friedel signal, M_z = {mz}"),
                "site",
                "<Z>_obc - <Z>_pbc",
                &[Series {
                    label: "signal",
                    x: &x,
                    y: &r.signal,
                }],
                (Axis::Linear, Axis::Linear),
            ),
        )?;
    }
    run.out.write_csv(
        "friedel_summary.csv",
        &["mz", "two_kf", "peak_q", "flat", "K", "K_err", "degenerate"],
        &summary,
    )?;
    Ok(())
}

fn quench(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let q = cfg
        .quench
        .as_ref()
        .context("quench scenario without settings")?;
    log::info!(
        "quench on {} sites, {} time points",
        cfg.geometry.n_sites(),
        q.times.len()
    );
    let res = run_quench(&cfg.geometry, &cfg.model, q.initial, &q.times, cfg.krylov)?;
    let g = &res.grid;
    let mut rows = vec![];
    for (it, &t) in g.times.iter().enumerate() {
        for (id, &d) in g.d.iter().enumerate() {
            rows.push(vec![
                num(t),
                d.to_string(),
                num(g.values[id][it]),
                num(g.stderr[id][it]),
            ]);
        }
    }
    run.out.write_csv(
        "quench_grid.csv",
        &["t_us", "d_sites", "czz", "stderr"],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = g
        .times
        .iter()
        .zip(&res.variance_mz)
        .map(|(t, v)| vec![num(*t), num(*v)])
        .collect();
    run.out
        .write_csv("quench_varmz.csv", &["t_us", "var_mz"], &rows)?;

    let opts = LightconeOptions {
        d_min: q.d_min,
        relative_floor: q.relative_floor,
        definition: q.front,
        intercept: q.intercept,
        ..LightconeOptions::default()
    };
    let fronts = front_arrivals(g, &opts);
    let rows: Vec<Vec<String>> = fronts
        .iter()
        .map(|f| vec![f.d.to_string(), num(f.t_star)])
        .collect();
    run.out
        .write_csv("fronts.csv", &["d_sites", "t_star_us"], &rows)?;
    match fit_lightcone(g, &opts) {
        Ok(fit) => {
            let vg = fit.get("vg").unwrap_or(f64::NAN);
            log::info!("v_g = {vg:.4} sites/us = {:.4} J", vg / cfg.model.j_xy);
            run.out.write_json("fit_vg.json", &fit)?;
            run.out.write_json(
                "quench_summary.json",
                &json!({
                    "vg_sites_per_us": vg,
                    "vg_err": fit.error("vg"),
                    "j_rad_per_us": cfg.model.j_xy,
                    "vg_over_j": vg / cfg.model.j_xy,
                    "front_definition": q.front,
                    "n_fronts": fronts.len(),
                    "propagation": res.stats,
                }),
            )?;
        }
        Err(e) => run.warn(format!("light-cone fit failed: {e}")),
    }
    // thin the time axis so the heatmap stays small
    let stride = g.times.len().div_ceil(200).max(1);
    let t: Vec<f64> = g.times.iter().step_by(stride).copied().collect();
    let d: Vec<f64> = g.d.iter().map(|&d| d as f64).collect();
    let vals: Vec<Vec<f64>> = g
        .values
        .iter()
        .map(|row| row.iter().step_by(stride).copied().collect())
        .collect();
    run.out.write_text(
        "quench_grid.svg",
        &svg::heatmap("C^z(d, t)", "t (us)", "d (sites)", &t, &d, &vals),
    )?;
    Ok(())
}

fn dsf(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let d = cfg.dsf.as_ref().context("DSF scenario without settings")?;
    let mats = build_couplings(&cfg.geometry, &cfg.model)?;
    let which = Which::from(cfg.model.sign);
    log::info!("structure factor in the n_up = {} sector", d.n_up);
    let grid = dynamical_structure_factor(
        &mats,
        which,
        d.n_up,
        &DsfOptions {
            n_omega: d.n_omega,
            omega_max: d.omega_max,
            eta: d.eta,
            route: d.route,
            lanczos: cfg.lanczos,
        },
    )?;
    let nw = grid.omega.len();
    let mut rows = vec![];
    let mut poles = vec![];
    for (iq, &q) in grid.q.iter().enumerate() {
        for (iw, &w) in grid.omega.iter().enumerate() {
            rows.push(vec![
                num(q),
                num(w),
                num(grid.raw[iq * nw + iw]),
                num(grid.intensity[iq * nw + iw]),
            ]);
        }
        for p in &grid.poles[iq] {
            poles.push(vec![num(q), num(p.omega), num(p.weight)]);
        }
    }
    run.out.write_csv(
        "dsf.csv",
        &["q", "omega_rad_per_us", "s", "intensity"],
        &rows,
    )?;
    run.out.write_csv(
        "dsf_poles.csv",
        &["q", "omega_rad_per_us", "weight"],
        &poles,
    )?;
    let rows: Vec<Vec<String>> = grid
        .q
        .iter()
        .zip(&grid.static_sf)
        .map(|(q, s)| vec![num(*q), num(*s)])
        .collect();
    run.out
        .write_csv("dsf_static.csv", &["q", "s_static"], &rows)?;
    let heat: Vec<Vec<f64>> = (0..nw)
        .map(|iw| {
            (0..grid.q.len())
                .map(|iq| grid.intensity[iq * nw + iw])
                .collect()
        })
        .collect();
    run.out.write_text(
        "dsf.svg",
        &svg::heatmap(
            "S(q, omega) / max",
            "q",
            "omega (rad/us)",
            &grid.q,
            &grid.omega,
            &heat,
        ),
    )?;

    let (k, source) = match d.k_luttinger {
        Some(k) => (Some(k), "config"),
        None => {
            let ext = extremal_state(run, &cfg.geometry, d.n_up)?;
            let n = cfg.geometry.n_sites();
            let cz = expand_matrix(&observable_czz(&ext.result.state), &ext.sites, n);
            let pz = bin_correlations(&cz, &cfg.geometry, "z")?;
            let (fz, scan) = fit_profile(run, &pz, Observable::Z);
            let k = fz.as_ref().and_then(|f| f.get("K"));
            write_fits(run, "", &[(Observable::Z, fz, scan)])?;
            (k, "fit_cz")
        }
    };
    let ridge = grid.ridge_velocity();
    let mut summary = json!({
        "ridge_velocity_sites_per_us": ridge,
        "k_luttinger": k,
        "k_source": source,
        "j_rad_per_us": cfg.model.j_xy,
        "ground_energy_rad_per_us": grid.ground_energy,
    });
    match k {
        Some(k) => {
            let sus = susceptibility_and_velocity(&mats, which, cfg.model.j_xy, k, &cfg.lanczos)?;
            log::info!(
                "kappa = {:.4}, u = {:.4}, u_compressibility = {:.4}, ridge = {}",
                sus.kappa,
                sus.u,
                sus.u_compressibility,
                ridge.map(num).unwrap_or_else(|| "none".into())
            );
            summary["susceptibility"] = serde_json::to_value(&sus)?;
        }
        None => run.warn("no Luttinger parameter available; velocity relation skipped"),
    }
    if ridge.is_none() {
        run.warn("no spectral weight at the smallest nonzero wavevector");
    }
    run.out.write_json("velocity.json", &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct DisorderSummary {
    n_sites: usize,
    boundary: String,
    p: f64,
    weak_scale: f64,
    n_realizations: usize,
    n_degenerate: usize,
    edge_exclusion_sites: usize,
    tail_window_sites: (f64, f64),
    tail_slope: Option<f64>,
}

fn disorder(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let d = cfg
        .disorder
        .as_ref()
        .context("disorder scenario without settings")?;
    log::info!(
        "{} free-fermion realizations on {} sites",
        d.n_realizations,
        d.n_sites
    );
    let res = disorder_ensemble(&DisorderOptions {
        n_sites: d.n_sites,
        j: cfg.model.j_xy,
        p: d.p,
        weak_scale: d.weak_scale,
        n_realizations: d.n_realizations,
        seed: cfg.seed,
        r_max: d.r_max,
        edge_exclusion: d.edge_exclusion,
        boundary: d.boundary,
    })?;
    let rows: Vec<Vec<String>> = (0..res.r.len())
        .map(|k| {
            vec![
                res.r[k].to_string(),
                num(res.mean[k]),
                num(res.stderr[k]),
                res.n_realizations.to_string(),
            ]
        })
        .collect();
    run.out.write_csv(
        "disorder_cx.csv",
        &["r", "mean", "stderr", "n_realizations"],
        &rows,
    )?;
    let (lo, hi) = d.tail;
    let keep: Vec<usize> = (0..res.r.len())
        .filter(|&k| {
            let r = res.r[k] as f64;
            r >= lo && r <= hi && res.mean[k] > 0.0 && res.mean[k].is_finite()
        })
        .collect();
    let x: Vec<f64> = keep.iter().map(|&k| res.r[k] as f64).collect();
    let y: Vec<f64> = keep.iter().map(|&k| res.mean[k]).collect();
    let sig: Vec<f64> = keep.iter().map(|&k| res.stderr[k]).collect();
    let slope = match loglog_slope(&x, &y, lo, hi) {
        Ok(s) => Some(s),
        Err(e) => {
            run.warn(format!("tail slope failed: {e}"));
            None
        }
    };
    match fit_power_law(&x, &y, &sig) {
        Ok(fit) => run.out.write_json("disorder_fit.json", &fit)?,
        Err(e) => run.warn(format!("power-law fit failed: {e}")),
    }
    if let Some(s) = slope {
        log::info!("tail slope {s:.3} over r in [{lo}, {hi}]");
    }
    run.out.write_json(
        "disorder_summary.json",
        &DisorderSummary {
            n_sites: d.n_sites,
            boundary: format!("{:?}", d.boundary).to_lowercase(),
            p: d.p,
            weak_scale: d.weak_scale,
            n_realizations: res.n_realizations,
            n_degenerate: res.n_degenerate,
            edge_exclusion_sites: d.edge_exclusion,
            tail_window_sites: d.tail,
            tail_slope: slope,
        },
    )?;
    let r: Vec<f64> = res.r.iter().map(|&r| r as f64).collect();
    run.out.write_text(
        "disorder_cx.svg",
        &svg::line_plot(
            "disorder-averaged C^x",
            "r (sites)",
            "C^x(r)",
            &[Series {
                label: "mean",
                x: &r,
                y: &res.mean,
            }],
            (Axis::Log, Axis::Log),
        ),
    )?;
    Ok(())
}

fn thermal(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let t = cfg
        .thermal
        .as_ref()
        .context("thermal scenario without settings")?;
    let geom = &cfg.geometry;
    log::info!(
        "thermal state at T = {} rad/us, {} realization(s)",
        t.temperature,
        t.n_realizations
    );
    let res = thermal_observables(
        geom,
        &cfg.model,
        &ThermalOptions {
            temperature: t.temperature,
            transverse_field: t.transverse_field,
            hole_density: t.hole_density,
            n_realizations: t.n_realizations,
            seed: cfg.seed,
        },
    )?;
    let rows: Vec<Vec<String>> = (0..res.n_sites)
        .map(|i| vec![i.to_string(), num(res.sz[i]), num(res.sz_err[i])])
        .collect();
    run.out
        .write_csv("thermal_sz.csv", &["site", "sz", "stderr"], &rows)?;
    let px = bin_correlations(&res.cx, geom, "x")?;
    let pz = bin_correlations(&res.cz, geom, "z")?;
    run.out
        .write_csv("thermal_cx.csv", PROFILE_HEADER, &profile_rows(&px))?;
    run.out
        .write_csv("thermal_cz.csv", PROFILE_HEADER, &profile_rows(&pz))?;
    let mut summary = json!({
        "temperature_rad_per_us": t.temperature,
        "transverse_field_rad_per_us": t.transverse_field,
        "hole_density": t.hole_density,
        "n_realizations": res.n_realizations,
        "energy_rad_per_us": res.energy,
    });
    if let Some(target) = t.var_mz_target {
        let fixed = varmz_offset_correction(&res.cz, target);
        let pc = bin_correlations(&fixed, geom, "z")?;
        run.out.write_csv(
            "thermal_cz_corrected.csv",
            PROFILE_HEADER,
            &profile_rows(&pc),
        )?;
        summary["var_mz_target"] = json!(target);
    }
    if cfg.fit_requested {
        let x = Observable::X {
            stagger: cfg.model.sign == Sign::Antiferro,
        };
        let (fx, sx) = fit_profile(run, &px, x);
        let (fz, sz) = fit_profile(run, &pz, Observable::Z);
        write_fits(run, "", &[(x, fx, sx), (Observable::Z, fz, sz)])?;
    }
    run.out.write_json("thermal.json", &summary)?;
    run.out.write_text(
        "thermal_correlations.svg",
        &profile_plot("thermal correlations", &[("C^x", &px), ("C^z", &pz)]),
    )?;
    Ok(())
}
