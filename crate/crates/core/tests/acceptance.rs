//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL` line
//! with the numbers it was judged on; the process exits non-zero if any fail.
//!
//! Runs with `harness = false` so the lines are always visible.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use tll_core::analysis::*;
use tll_core::exact::*;
use tll_core::freefermion::*;
use tll_core::hilbert::*;
use tll_core::lattice::*;
use tll_core::protocol::*;
use tll_core::rng::{substream, Stream};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

const CUTOFFS: [f64; 6] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];

/// Extremal N=24 half-filled ring states shared by several criteria.
struct Rings {
    fm: SectorState,
    afm: SectorState,
    geom: ChainGeometry,
}

fn rings() -> Rings {
    let n = 24;
    let geom = ChainGeometry::periodic(n).unwrap();
    let basis = Arc::new(enumerate_sector(n, n / 2).unwrap());
    let solve = |model: CouplingModel| {
        let mats = build_couplings(&geom, &model).unwrap();
        let op = SectorOperator::new(basis.clone(), &mats).unwrap();
        let r = lanczos_operator(&op, model.sign.into(), None, &LanczosOptions::default()).unwrap();
        r.state
    };
    let fm = solve(CouplingModel::dipolar(
        table::J_ADIABATIC,
        Sign::Ferro,
        table::VDW_ADIABATIC,
    ));
    let afm = solve(CouplingModel::dipolar(
        table::J_ADIABATIC,
        Sign::Antiferro,
        VdwEnergies::zero(),
    ));
    Rings { fm, afm, geom }
}

fn scan_line(scan: &CutoffScan) -> String {
    scan.table
        .iter()
        .map(|(rc, k, _)| match k {
            Some(k) => format!("{rc}:{k:.3}"),
            None => format!("{rc}:-"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn cx_fitter(stagger: bool) -> impl Fn(&CorrelationProfile, f64) -> tll_core::Result<FitResult> {
    move |p, rc| {
        fit_cx(
            p,
            &CxFitOptions {
                cutoff: rc,
                stagger,
                envelope: false,
                ..Default::default()
            },
        )
    }
}

fn cz_fitter(p: &CorrelationProfile, rc: f64) -> tll_core::Result<FitResult> {
    fit_cz(
        p,
        &CzFitOptions {
            cutoff: rc,
            ..Default::default()
        },
    )
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = substream(2024, Stream::Disorder, 0);
    let tight = LanczosOptions {
        tol: 1e-11,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(4..=12usize);
        let boundary = if rng.random::<bool>() {
            FermionBoundary::Open
        } else {
            FermionBoundary::Periodic
        };
        let n_bonds = if boundary == FermionBoundary::Open {
            n - 1
        } else {
            n
        };
        let j: Vec<f64> = (0..n_bonds).map(|_| rng.random_range(0.2..1.2)).collect();
        let p = rng.random_range(1..n);
        let bonds = Bonds::new(n, boundary, j).unwrap();
        let ff = jw_solve(&bonds, p).unwrap();
        let basis = Arc::new(enumerate_sector(n, p).unwrap());
        let ed = lanczos_extremal(&bonds.to_couplings(), basis, Which::Lowest, &tight).unwrap();
        worst = worst.max((ff.energy - ed.energy).abs());
        let (cx, cz) = (observable_cxx(&ed.state), observable_czz(&ed.state));
        let (fx, fz) = (cx_matrix_from_g(&ff.g), cz_from_g(&ff.g));
        for k in 0..n * n {
            worst = worst.max((cx[k] - fx[k]).abs()).max((cz[k] - fz[k]).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1e-9 && secs < 120.0,
        format!("50 instances, max |ED - JW| = {worst:.1e}, {secs:.1} s"),
    )
}

fn k_fm(r: &Rings) -> Outcome {
    let p = bin_correlations(&observable_cxx(&r.fm), &r.geom, "x").unwrap();
    let scan = cutoff_scan(&p, &cx_fitter(false), &CUTOFFS, 0.05).unwrap();
    let rc = scan.selected.unwrap_or(0.0);
    let fit = cx_fitter(false)(&p, rc).unwrap();
    let k = fit.get("K").unwrap();
    outcome(
        (k - 1.85).abs() <= 0.05,
        format!(
            "K = {k:.3} +- {:.3} at r_c = {rc} (target 1.85 +- 0.05); K(r_c) {}",
            fit.error("K").unwrap(),
            scan_line(&scan)
        ),
    )
}

fn k_afm(r: &Rings) -> Outcome {
    let p = bin_correlations(&observable_czz(&r.afm), &r.geom, "z").unwrap();
    let scan = cutoff_scan(&p, &cz_fitter, &CUTOFFS, 0.05).unwrap();
    let rc = scan.selected.unwrap_or(0.0);
    let fit = cz_fitter(&p, rc).unwrap();
    let k = fit.get("K").unwrap();
    outcome(
        (k - 0.85).abs() <= 0.05,
        format!(
            "K = {k:.3} +- {:.3} at r_c = {rc} (target 0.85 +- 0.05)",
            fit.error("K").unwrap()
        ),
    )
}

fn k_nn() -> Outcome {
    let t = Instant::now();
    let n = 64;
    let geom = ChainGeometry::periodic(n).unwrap();
    let bonds = Bonds::uniform(n, FermionBoundary::Periodic, 1.0).unwrap();
    let st = jw_solve(&bonds, n / 2).unwrap();
    let p = bin_correlations(&cx_matrix_from_g(&st.g), &geom, "x").unwrap();
    let fit = fit_cx(&p, &CxFitOptions::default()).unwrap();
    let k = fit.get("K").unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        (k - 1.0).abs() <= 0.05 && secs < 60.0,
        format!("K = {k:.4} (target 1.00 +- 0.05), {secs:.1} s"),
    )
}

fn friedel() -> Outcome {
    let t = Instant::now();
    let n = 23;
    let model = CouplingModel::dipolar(table::J_ADIABATIC, Sign::Antiferro, table::VDW_ADIABATIC);
    let bin = 2.0 * PI / n as f64;
    let mut worst = 0.0f64;
    let mut flat = 0;
    let mut degenerate = 0;
    for mz in (1..=21).step_by(2) {
        let run = run_friedel(
            n,
            &model,
            mz,
            FriedelMode::DirectGroundState,
            None,
            LanczosOptions::default(),
            KrylovOptions::default(),
        )
        .unwrap();
        let spec = friedel_fft(&run.signal).unwrap();
        worst = worst.max((spec.peak_q - friedel_wavevector(mz, n)).abs() / bin);
        flat += spec.flat as usize;
        degenerate += run.degenerate as usize;
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst < 1.0 && flat == 0 && secs < 3600.0,
        format!(
            "11 sectors, worst peak offset {worst:.2} bins, {flat} flat, \
             {degenerate} with a degenerate ring state, {secs:.0} s"
        ),
    )
}

fn lightcone() -> Outcome {
    let t = Instant::now();
    let n = 14;
    let geom = ChainGeometry::periodic(n).unwrap();
    let times: Vec<f64> = (0..=240).map(|k| k as f64 * 0.0025).collect();
    let j = table::J_QUENCH;
    let velocity = |model: CouplingModel, init: QuenchInitial, definition: FrontDefinition| {
        let q = run_quench(&geom, &model, init, &times, KrylovOptions::default()).unwrap();
        let opts = LightconeOptions {
            definition,
            ..Default::default()
        };
        fit_lightcone(&q.grid, &opts).unwrap().get("vg").unwrap() / j
    };
    let nn = || CouplingModel::nearest_neighbor(j);
    let afm = || CouplingModel::dipolar(j, Sign::Antiferro, table::VDW_QUENCH);
    let v_nn = velocity(nn(), QuenchInitial::CssY, FrontDefinition::HalfRise);
    let v_afm = velocity(
        afm(),
        QuenchInitial::StaggeredCssY,
        FrontDefinition::HalfRise,
    );
    let p_nn = velocity(nn(), QuenchInitial::CssY, FrontDefinition::FirstMaximum);
    let p_afm = velocity(
        afm(),
        QuenchInitial::StaggeredCssY,
        FrontDefinition::FirstMaximum,
    );
    let secs = t.elapsed().as_secs_f64();
    outcome(
        (v_nn - 2.0).abs() <= 0.2 && (v_afm - 1.8).abs() <= 0.27 && secs < 1800.0,
        format!(
            "half-rise fronts: NN v_g = {v_nn:.3} J (2 +- 0.2), AFM v_g = {v_afm:.3} J \
             (1.8 +- 0.27); first-maximum fronts give {p_nn:.3} J / {p_afm:.3} J; {secs:.0} s"
        ),
    )
}

fn hole_decay() -> Outcome {
    let h = hole_decay_length(0.06, 24).unwrap();
    let perimeter = (h.perimeter * 100.0).round() / 100.0;
    let quoted = (h.chord * 10.0).round() / 10.0;
    outcome(
        perimeter == 7.82 && quoted == 6.5,
        format!(
            "perimeter {:.4} (7.82), chord {:.4}, which rounds to the quoted 6.5",
            h.perimeter, h.chord
        ),
    )
}

fn detection() -> Outcome {
    let e = DetectionErrors::new(0.025, 0.03).unwrap();
    let f = e.correlation_factor(CorrectionOrder::FirstOrder);
    let mut worst = 0.0f64;
    for k in 0..=200 {
        let v = -1.0 + 0.01 * k as f64;
        worst = worst.max((e.invert_magnetization(e.apply_magnetization(v)) - v).abs());
        for order in [CorrectionOrder::FirstOrder, CorrectionOrder::Exact] {
            worst =
                worst.max((e.invert_correlation(e.apply_correlation(v, order), order) - v).abs());
        }
    }
    outcome(
        (f - 0.89).abs() < 1e-15 && worst < 1e-12,
        format!("factor {f:.15}, worst round trip {worst:.1e}"),
    )
}

fn cutoffs(r: &Rings) -> Outcome {
    let g = &r.geom;
    let fm_x = bin_correlations(&observable_cxx(&r.fm), g, "x").unwrap();
    let fm_z = bin_correlations(&observable_czz(&r.fm), g, "z").unwrap();
    let afm_x = bin_correlations(&observable_cxx(&r.afm), g, "x").unwrap();
    let afm_z = bin_correlations(&observable_czz(&r.afm), g, "z").unwrap();
    let scans = [
        (
            "FM x",
            cutoff_scan(&fm_x, &cx_fitter(false), &CUTOFFS, 0.05).unwrap(),
            0.0,
        ),
        (
            "FM z",
            cutoff_scan(&fm_z, &cz_fitter, &CUTOFFS, 0.05).unwrap(),
            3.0,
        ),
        (
            "AFM x",
            cutoff_scan(&afm_x, &cx_fitter(true), &CUTOFFS, 0.05).unwrap(),
            0.0,
        ),
        (
            "AFM z",
            cutoff_scan(&afm_z, &cz_fitter, &CUTOFFS, 0.05).unwrap(),
            0.0,
        ),
    ];
    let pass = scans.iter().all(|(_, s, want)| s.selected == Some(*want));
    let detail = scans
        .iter()
        .map(|(name, s, want)| {
            let got = s.selected.map_or("none".to_string(), |v| v.to_string());
            format!("{name}: r_c {got} (want {want}) [{}]", scan_line(s))
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn adiabatic_limit() -> Outcome {
    let n = 8;
    let geom = ChainGeometry::periodic(n).unwrap();
    let basis = Arc::new(enumerate_sector(n, n / 2).unwrap());
    let paper_delta0 = 2.0 * PI * 23.0;
    let deviation = |sign: Sign, delta0: f64| {
        let model = CouplingModel::dipolar(table::J_ADIABATIC, sign, table::VDW_ADIABATIC);
        let alpha = if sign == Sign::Ferro { 20.0 } else { 100.0 };
        let sched = RampSchedule::new(delta0, 50.0 / model.j_xy, alpha, sign, sublattice(&geom, 1))
            .unwrap();
        let ramp = run_ramp(
            &geom,
            &model,
            &sched,
            &NoiseModel::ideal(),
            1,
            0,
            KrylovOptions::default(),
        )
        .unwrap();
        let fin = &ramp.checkpoints.last().unwrap().cx;
        let mats = build_couplings(&geom, &model).unwrap();
        let gs = lanczos_extremal(
            &mats,
            basis.clone(),
            sign.into(),
            &LanczosOptions::default(),
        )
        .unwrap();
        let want = bin_correlations(&observable_cxx(&gs.state), &geom, "x").unwrap();
        (0..want.len())
            .map(|k| (fin.mean[k] - want.mean[k]).abs() / want.mean[k].abs())
            .fold(0.0f64, f64::max)
    };
    let deep: Vec<f64> = [Sign::Ferro, Sign::Antiferro]
        .iter()
        .map(|&s| deviation(s, 10.0 * paper_delta0))
        .collect();
    let shallow: Vec<f64> = [Sign::Ferro, Sign::Antiferro]
        .iter()
        .map(|&s| deviation(s, paper_delta0))
        .collect();
    outcome(
        deep.iter().all(|&d| d < 0.02),
        format!(
            "max relative C^x deviation FM {:.2}%, AFM {:.2}% with delta0 = 2pi x 230; \
             with delta0 = 2pi x 23 the Neel start is not the initial ground state: FM {:.2}%, AFM {:.2}%",
            100.0 * deep[0],
            100.0 * deep[1],
            100.0 * shallow[0],
            100.0 * shallow[1]
        ),
    )
}

fn disorder() -> Outcome {
    let t = Instant::now();
    let n = 400;
    let opts = DisorderOptions::new(n, 0.06, 200, 11);
    let dis = disorder_ensemble(&opts).unwrap();
    let x: Vec<f64> = dis.r.iter().map(|&r| r as f64).collect();
    let single = fit_power_law(&x, &dis.mean, &dis.stderr).unwrap();
    let p_value = single.p_value.unwrap_or(1.0);
    let tail = loglog_slope(&x, &dis.mean, 20.0, 200.0).unwrap();
    let ring = disorder_ensemble(&DisorderOptions {
        boundary: FermionBoundary::Periodic,
        ..opts
    })
    .unwrap();
    let ring_tail = loglog_slope(&x, &ring.mean, 20.0, 200.0).unwrap();
    // clean reference: one ring row, translation invariant
    let clean = jw_solve(
        &Bonds::uniform(n, FermionBoundary::Periodic, 1.0).unwrap(),
        n / 2,
    )
    .unwrap();
    let row = cx_row_from_g(&clean.g, 0, n / 2);
    let profile = CorrelationProfile::from_fn(n, "x", |d| row[d - 1]);
    let k_clean = fit_cx(&profile, &CxFitOptions::default())
        .unwrap()
        .get("K")
        .unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        p_value < 0.05 && (k_clean - 1.0).abs() <= 0.05 && (-2.6..=-1.4).contains(&tail),
        format!(
            "single power law p = {p_value:.1e}, clean K = {k_clean:.3}, open-chain tail slope \
             {tail:.3} over r in [20, 200] (want [-2.6, -1.4]; ring ensemble gives {ring_tail:.3}); \
             {} of 200 realizations with an unresolved Fermi shell; {secs:.0} s",
            dis.n_degenerate
        ),
    )
}

fn dsf() -> Outcome {
    let t = Instant::now();
    let n = 16;
    let geom = ChainGeometry::periodic(n).unwrap();
    let model = CouplingModel::dipolar(table::J_ADIABATIC, Sign::Antiferro, VdwEnergies::zero());
    let mats = build_couplings(&geom, &model).unwrap();
    let opts = DsfOptions {
        route: DsfRoute::Lanczos { steps: 200 },
        ..Default::default()
    };
    let grid = dynamical_structure_factor(&mats, Which::Highest, n / 2, &opts).unwrap();
    let total: f64 = grid.poles.iter().flatten().map(|p| p.weight).sum();
    let q0: f64 = grid.poles[0]
        .iter()
        .filter(|p| p.omega > 1e-9)
        .map(|p| p.weight)
        .sum();
    let ridge = grid.ridge_velocity().unwrap();
    let basis = Arc::new(enumerate_sector(n, n / 2).unwrap());
    let gs = lanczos_extremal(&mats, basis, Which::Highest, &LanczosOptions::default()).unwrap();
    let pz = bin_correlations(&observable_czz(&gs.state), &geom, "z").unwrap();
    let k = fit_cz(&pz, &CzFitOptions::default())
        .unwrap()
        .get("K")
        .unwrap();
    let sus = susceptibility_and_velocity(
        &mats,
        Which::Highest,
        model.j_xy,
        k,
        &LanczosOptions::default(),
    )
    .unwrap();
    let rel = (ridge - sus.u).abs() / sus.u;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        q0 <= 1e-12 * total && rel <= 0.15,
        format!(
            "q=0 weight above omega=0: {q0:.1e}; ridge {:.3} J vs 2 pi kappa K J = {:.3} J \
             ({:.1}% off; kappa = {:.4}, K = {k:.3}); 2 K J / (pi kappa) = {:.3} J; {secs:.0} s",
            ridge / model.j_xy,
            sus.u / model.j_xy,
            100.0 * rel,
            sus.kappa,
            sus.u_compressibility / model.j_xy
        ),
    )
}

fn main() {
    let t = Instant::now();
    let rings = rings();
    eprintln!(
        "N=24 ring states ready after {:.0} s",
        t.elapsed().as_secs_f64()
    );
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("K_FM at N=24", Box::new(|| k_fm(&rings))),
        ("K_AFM at N=24", Box::new(|| k_afm(&rings))),
        ("NN chain K", Box::new(k_nn)),
        ("Friedel wavevector", Box::new(friedel)),
        ("quench light cone", Box::new(lightcone)),
        ("hole-decay length", Box::new(hole_decay)),
        ("detection factor", Box::new(detection)),
        ("cutoff scan", Box::new(|| cutoffs(&rings))),
        ("adiabatic limit", Box::new(adiabatic_limit)),
        ("disordered chain", Box::new(disorder)),
        ("structure factor", Box::new(dsf)),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += !o.pass as usize;
        println!(
            "{} criterion {:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            k + 1,
            o.detail
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
