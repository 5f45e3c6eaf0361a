//! Ring geometry, distance metrics and coupling matrices.
//!
//! Sites sit on a circle with unit nearest-neighbour spacing. Two distance
//! notions coexist:
//!
//! - the *binning chord* `r = (N/pi) sin(pi |i-j| / N)` used to average and fit
//!   correlations, with its inverse the perimeter distance `d(r)`;
//! - the *physical* straight-line distance in units of the nearest-neighbour
//!   spacing, `sin(pi |i-j| / N) / sin(pi / N)`, which sets the couplings so
//!   that nearest neighbours interact with exactly `J`.
//!
//! Both are proportional at fixed `N`, so power-law exponents do not depend on
//! which one is used.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    PeriodicRing,
    /// Ring with one atom taken out. Distances still follow the circle.
    OpenRing {
        removed: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainGeometry {
    n_sites: usize,
    boundary: Boundary,
    holes: BTreeSet<usize>,
}

impl ChainGeometry {
    pub fn new(
        n_sites: usize,
        boundary: Boundary,
        holes: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        if n_sites < 2 {
            return Err(Error::Lattice(format!(
                "n_sites must be >= 2, got {n_sites}"
            )));
        }
        let holes: BTreeSet<usize> = holes.into_iter().collect();
        if let Some(&h) = holes.iter().find(|&&h| h >= n_sites) {
            return Err(Error::Lattice(format!(
                "hole index {h} out of range for N = {n_sites}"
            )));
        }
        if let Boundary::OpenRing { removed } = boundary {
            if removed >= n_sites {
                return Err(Error::Lattice(format!(
                    "removed site {removed} out of range for N = {n_sites}"
                )));
            }
            if holes.contains(&removed) {
                return Err(Error::Lattice(format!(
                    "removed site {removed} is also listed as a hole"
                )));
            }
        }
        Ok(Self {
            n_sites,
            boundary,
            holes,
        })
    }

    pub fn periodic(n_sites: usize) -> Result<Self> {
        Self::new(n_sites, Boundary::PeriodicRing, [])
    }

    pub fn open(n_sites: usize, removed: usize) -> Result<Self> {
        Self::new(n_sites, Boundary::OpenRing { removed }, [])
    }

    pub fn with_holes(&self, holes: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::new(
            self.n_sites,
            self.boundary,
            self.holes.iter().copied().chain(holes),
        )
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn holes(&self) -> &BTreeSet<usize> {
        &self.holes
    }

    pub fn removed_site(&self) -> Option<usize> {
        match self.boundary {
            Boundary::PeriodicRing => None,
            Boundary::OpenRing { removed } => Some(removed),
        }
    }

    /// Site carries a spin: neither a hole nor the removed atom.
    pub fn is_active(&self, i: usize) -> bool {
        i < self.n_sites && !self.holes.contains(&i) && self.removed_site() != Some(i)
    }

    pub fn active_sites(&self) -> Vec<usize> {
        (0..self.n_sites).filter(|&i| self.is_active(i)).collect()
    }

    pub fn n_active(&self) -> usize {
        self.active_sites().len()
    }

    /// Lattice separation along the ring, `min(|i-j|, N-|i-j|)`.
    pub fn separation(&self, i: usize, j: usize) -> usize {
        let d = i.abs_diff(j);
        d.min(self.n_sites - d)
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.n_sites {
            Err(Error::Lattice(format!(
                "site {i} out of range for N = {}",
                self.n_sites
            )))
        } else {
            Ok(())
        }
    }

    /// Straight-line distance in units of the nearest-neighbour spacing.
    pub fn physical_distance(&self, i: usize, j: usize) -> Result<f64> {
        self.check(i)?;
        self.check(j)?;
        let n = self.n_sites as f64;
        Ok((PI * i.abs_diff(j) as f64 / n).sin() / (PI / n).sin())
    }
}

/// Chord distance `r_ij = (N/pi) sin(pi |i-j| / N)`.
pub fn chord_distance(i: usize, j: usize, geom: &ChainGeometry) -> Result<f64> {
    geom.check(i)?;
    geom.check(j)?;
    Ok(chord_of_separation(i.abs_diff(j) as f64, geom.n_sites))
}

pub fn chord_of_separation(d: f64, n_sites: usize) -> f64 {
    let n = n_sites as f64;
    n / PI * (PI * d / n).sin()
}

/// Perimeter distance `d(r) = (N/pi) arcsin(pi r / N)`.
pub fn perimeter_distance(r: f64, geom: &ChainGeometry) -> Result<f64> {
    let n = geom.n_sites as f64;
    let rmax = n / PI;
    // allow round-off at the maximum
    if !(0.0..=rmax * (1.0 + 1e-12)).contains(&r) {
        return Err(Error::Lattice(format!(
            "chord distance {r} outside [0, {rmax}]"
        )));
    }
    let s = (PI * r / n).min(1.0);
    Ok(n / PI * s.asin())
}

/// Power-law exponent of the flip-flop couplings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Exponent {
    Power(f64),
    /// Only `|i-j| = 1` bonds (on the ring) are kept.
    NearestNeighbor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    /// Ground state of `H`.
    Ferro,
    /// Highest state of `H`, i.e. ground state of `-H`.
    Antiferro,
}

/// Pair energies `U_{s,t}` of the van der Waals term, rad/us.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VdwEnergies {
    pub uu: f64,
    pub dd: f64,
    pub ud: f64,
    pub du: f64,
}

/// Table of interaction energies for the two experimental sequences.
pub mod table {
    use super::VdwEnergies;
    use std::f64::consts::PI;

    pub const J_ADIABATIC: f64 = 2.0 * PI * 0.55;
    pub const J_QUENCH: f64 = 2.0 * PI * 0.62;

    pub const VDW_ADIABATIC: VdwEnergies = VdwEnergies {
        uu: 2.0 * PI * 0.051,
        dd: -2.0 * PI * 0.007,
        ud: 2.0 * PI * 0.058,
        du: 2.0 * PI * 0.058,
    };

    pub const VDW_QUENCH: VdwEnergies = VdwEnergies {
        uu: 2.0 * PI * 0.030,
        dd: -2.0 * PI * 0.006,
        ud: 2.0 * PI * 0.009,
        du: 2.0 * PI * 0.009,
    };
}

impl VdwEnergies {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.uu == 0.0 && self.dd == 0.0 && self.ud == 0.0 && self.du == 0.0
    }

    /// Coefficient of `sigma^z_i sigma^z_j` per unit `1/r^6`.
    pub fn zz(&self) -> f64 {
        0.25 * (self.uu + self.dd - self.ud - self.du)
    }

    /// Coefficient of `sigma^z_i` (the lower index of the pair) per unit `1/r^6`.
    pub fn field_first(&self) -> f64 {
        0.25 * (self.uu - self.dd + self.ud - self.du)
    }

    /// Coefficient of `sigma^z_j` (the upper index of the pair) per unit `1/r^6`.
    pub fn field_second(&self) -> f64 {
        0.25 * (self.uu - self.dd - self.ud + self.du)
    }

    pub fn constant(&self) -> f64 {
        0.25 * (self.uu + self.dd + self.ud + self.du)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingModel {
    pub j_xy: f64,
    pub exponent: Exponent,
    pub sign: Sign,
    pub vdw: VdwEnergies,
    /// Multiplicative scale per bond, keyed by `(min, max)` site index.
    pub bond_overrides: BTreeMap<(usize, usize), f64>,
}

impl CouplingModel {
    pub fn dipolar(j_xy: f64, sign: Sign, vdw: VdwEnergies) -> Self {
        Self {
            j_xy,
            exponent: Exponent::Power(3.0),
            sign,
            vdw,
            bond_overrides: BTreeMap::new(),
        }
    }

    pub fn nearest_neighbor(j_xy: f64) -> Self {
        Self {
            j_xy,
            exponent: Exponent::NearestNeighbor,
            sign: Sign::Ferro,
            vdw: VdwEnergies::zero(),
            bond_overrides: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, i: usize, j: usize, scale: f64) -> Self {
        self.bond_overrides.insert((i.min(j), i.max(j)), scale);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.j_xy > 0.0 && self.j_xy.is_finite()) {
            return Err(Error::Lattice(format!(
                "j_xy must be positive and finite, got {}",
                self.j_xy
            )));
        }
        let v = self.vdw;
        if ![v.uu, v.dd, v.ud, v.du].iter().all(|x| x.is_finite()) {
            return Err(Error::Lattice(
                "van der Waals energies must be finite".into(),
            ));
        }
        if let Exponent::Power(p) = self.exponent {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::Lattice(format!(
                    "exponent must be positive, got {p}"
                )));
            }
        }
        if self.bond_overrides.keys().any(|&(i, j)| i == j) {
            return Err(Error::Lattice("bond override on a single site".into()));
        }
        Ok(())
    }

    fn scale(&self, i: usize, j: usize) -> f64 {
        self.bond_overrides
            .get(&(i.min(j), i.max(j)))
            .copied()
            .unwrap_or(1.0)
    }
}

/// Dense symmetric `N x N` matrix in row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `H = -(1/2) sum_{i<j} xy_ij (XX + YY) + sum_{i<j} zz_ij ZZ + sum_i field_i Z + constant`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingMatrices {
    pub xy: SymMatrix,
    pub zz: SymMatrix,
    pub field_z: Vec<f64>,
    pub constant: f64,
}

impl CouplingMatrices {
    pub fn n_sites(&self) -> usize {
        self.xy.n()
    }

    /// Copy with all couplings touching `site` removed.
    pub fn without_site(&self, site: usize) -> Self {
        let mut out = self.clone();
        for k in 0..self.n_sites() {
            out.xy.set(site, k, 0.0);
            out.zz.set(site, k, 0.0);
        }
        out.field_z[site] = 0.0;
        out
    }

    /// XY couplings only, with the zz and field parts dropped.
    pub fn xy_only(&self) -> Self {
        let n = self.n_sites();
        Self {
            xy: self.xy.clone(),
            zz: SymMatrix::zeros(n),
            field_z: vec![0.0; n],
            constant: 0.0,
        }
    }
}

pub fn build_couplings(geom: &ChainGeometry, model: &CouplingModel) -> Result<CouplingMatrices> {
    model.validate()?;
    let n = geom.n_sites();
    if let Some(&(i, j)) = model.bond_overrides.keys().find(|&&(_, j)| j >= n) {
        return Err(Error::Lattice(format!(
            "bond override ({i},{j}) out of range for N = {n}"
        )));
    }
    let mut xy = SymMatrix::zeros(n);
    let mut zz = SymMatrix::zeros(n);
    let mut field_z = vec![0.0; n];
    let mut constant = 0.0;
    for i in 0..n {
        if !geom.is_active(i) {
            continue;
        }
        for j in (i + 1)..n {
            if !geom.is_active(j) {
                continue;
            }
            let keep = match model.exponent {
                Exponent::NearestNeighbor => geom.separation(i, j) == 1,
                Exponent::Power(_) => true,
            };
            if !keep {
                continue;
            }
            let rho = geom.physical_distance(i, j)?;
            let decay = match model.exponent {
                Exponent::NearestNeighbor => 1.0,
                Exponent::Power(p) => rho.powf(-p),
            };
            xy.set(i, j, model.j_xy * decay * model.scale(i, j));
            if !model.vdw.is_zero() {
                let w = rho.powi(-6);
                zz.set(i, j, model.vdw.zz() * w);
                field_z[i] += model.vdw.field_first() * w;
                field_z[j] += model.vdw.field_second() * w;
                constant += model.vdw.constant() * w;
            }
        }
    }
    Ok(CouplingMatrices {
        xy,
        zz,
        field_z,
        constant,
    })
}

/// Couplings among active sites only (holes and the removed site dropped).
/// Returns the restricted matrices and `sites[new] = old`.
pub fn restrict_to_active(
    geom: &ChainGeometry,
    matrices: &CouplingMatrices,
) -> Result<(CouplingMatrices, Vec<usize>)> {
    if matrices.n_sites() != geom.n_sites() {
        return Err(Error::Lattice("matrices do not match geometry".into()));
    }
    let sites = geom.active_sites();
    let m = sites.len();
    if m == 0 {
        return Err(Error::Lattice("no active sites".into()));
    }
    let mut xy = SymMatrix::zeros(m);
    let mut zz = SymMatrix::zeros(m);
    let mut field_z = vec![0.0; m];
    for (a, &oa) in sites.iter().enumerate() {
        field_z[a] = matrices.field_z[oa];
        for (b, &ob) in sites.iter().enumerate().skip(a + 1) {
            xy.set(a, b, matrices.xy.get(oa, ob));
            zz.set(a, b, matrices.zz.get(oa, ob));
        }
    }
    Ok((
        CouplingMatrices {
            xy,
            zz,
            field_z,
            constant: matrices.constant,
        },
        sites,
    ))
}

/// Chain with holes deleted and surviving sites relabelled in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Squeezed {
    pub geometry: ChainGeometry,
    pub matrices: CouplingMatrices,
    /// `old_index[new] = old`
    pub old_index: Vec<usize>,
}

pub fn squeeze_holes(geom: &ChainGeometry, matrices: &CouplingMatrices) -> Result<Squeezed> {
    let n = geom.n_sites();
    if matrices.n_sites() != n {
        return Err(Error::Lattice("matrices do not match geometry".into()));
    }
    let old_index: Vec<usize> = (0..n).filter(|i| !geom.holes().contains(i)).collect();
    let m = old_index.len();
    if m < 2 {
        return Err(Error::Lattice(format!(
            "squeezing leaves {m} site(s); at least 2 required"
        )));
    }
    let boundary = match geom.boundary() {
        Boundary::PeriodicRing => Boundary::PeriodicRing,
        Boundary::OpenRing { removed } => Boundary::OpenRing {
            removed: old_index
                .iter()
                .position(|&o| o == removed)
                .expect("removed site is not a hole"),
        },
    };
    let mut xy = SymMatrix::zeros(m);
    let mut zz = SymMatrix::zeros(m);
    let mut field_z = vec![0.0; m];
    for (a, &oa) in old_index.iter().enumerate() {
        field_z[a] = matrices.field_z[oa];
        for (b, &ob) in old_index.iter().enumerate().skip(a + 1) {
            xy.set(a, b, matrices.xy.get(oa, ob));
            zz.set(a, b, matrices.zz.get(oa, ob));
        }
    }
    Ok(Squeezed {
        geometry: ChainGeometry::new(m, boundary, [])?,
        matrices: CouplingMatrices {
            xy,
            zz,
            field_z,
            constant: matrices.constant,
        },
        old_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn chord_examples() {
        let g = ChainGeometry::periodic(24).unwrap();
        assert_abs_diff_eq!(
            chord_distance(0, 12, &g).unwrap(),
            24.0 / PI,
            epsilon = 1e-12
        );
        assert_eq!(chord_distance(5, 5, &g).unwrap(), 0.0);
        // (24/pi) sin(pi/24), evaluated independently
        assert_abs_diff_eq!(
            chord_distance(3, 4, &g).unwrap(),
            0.997_146_657_35,
            epsilon = 1e-10
        );
        assert!(chord_distance(0, 24, &g).is_err());
    }

    #[test]
    fn perimeter_examples() {
        let g = ChainGeometry::periodic(24).unwrap();
        assert_abs_diff_eq!(
            perimeter_distance(24.0 / PI, &g).unwrap(),
            12.0,
            epsilon = 1e-9
        );
        assert_eq!(perimeter_distance(0.0, &g).unwrap(), 0.0);
        let r = chord_distance(0, 1, &g).unwrap();
        assert_abs_diff_eq!(perimeter_distance(r, &g).unwrap(), 1.0, epsilon = 1e-9);
        assert!(perimeter_distance(-0.1, &g).is_err());
        assert!(perimeter_distance(8.0, &g).is_err());
    }

    #[test]
    fn chord_perimeter_inverse_exhaustive() {
        for n in 2..=64 {
            let g = ChainGeometry::periodic(n).unwrap();
            for d in 0..=n / 2 {
                let r = chord_distance(0, d, &g).unwrap();
                let back = perimeter_distance(r, &g).unwrap();
                assert!((back - d as f64).abs() < 1e-6, "N={n} d={d} back={back}");
            }
        }
    }

    #[test]
    fn geometry_invariants() {
        assert!(ChainGeometry::periodic(1).is_err());
        assert!(ChainGeometry::new(4, Boundary::PeriodicRing, [4]).is_err());
        assert!(ChainGeometry::new(4, Boundary::OpenRing { removed: 1 }, [1]).is_err());
        assert!(ChainGeometry::new(4, Boundary::OpenRing { removed: 4 }, []).is_err());
        let g = ChainGeometry::new(6, Boundary::OpenRing { removed: 0 }, [3]).unwrap();
        assert_eq!(g.active_sites(), vec![1, 2, 4, 5]);
    }

    #[test]
    fn two_site_ring_has_coupling_j() {
        let g = ChainGeometry::periodic(2).unwrap();
        let m = build_couplings(
            &g,
            &CouplingModel::dipolar(1.3, Sign::Ferro, VdwEnergies::zero()),
        )
        .unwrap();
        assert_abs_diff_eq!(m.xy.get(0, 1), 1.3, epsilon = 1e-14);
        assert_eq!(m.xy.get(0, 0), 0.0);
    }

    #[test]
    fn coupling_across_a_hole_is_about_j_over_8() {
        let model = CouplingModel::dipolar(1.0, Sign::Ferro, VdwEnergies::zero());
        // On the ring the next-nearest distance is 2 cos(pi/N), slightly below 2.
        let g = ChainGeometry::new(24, Boundary::PeriodicRing, [5]).unwrap();
        let m = build_couplings(&g, &model).unwrap();
        assert!((m.xy.get(4, 6) - 0.125).abs() / 0.125 < 0.03);
        let g = ChainGeometry::new(400, Boundary::PeriodicRing, [5]).unwrap();
        let m = build_couplings(&g, &model).unwrap();
        assert_abs_diff_eq!(m.xy.get(4, 6), 0.125, epsilon = 1e-4);
        for k in 0..400 {
            assert_eq!(m.xy.get(5, k), 0.0);
        }
    }

    #[test]
    fn nearest_neighbor_truncation() {
        let g = ChainGeometry::periodic(8).unwrap();
        let m = build_couplings(&g, &CouplingModel::nearest_neighbor(2.0)).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let expect = if g.separation(i, j) == 1 { 2.0 } else { 0.0 };
                assert_eq!(m.xy.get(i, j), expect);
            }
        }
    }

    #[test]
    fn vdw_rewriting_matches_projector_form() {
        // Compare sum_st U_st n^s_i n^t_j with the spin rewriting on all four
        // two-spin configurations.
        let v = VdwEnergies {
            uu: 0.3,
            dd: -0.07,
            ud: 0.11,
            du: 0.05,
        };
        for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let nu = |s: f64| (1.0 + s) / 2.0;
            let nd = |s: f64| (1.0 - s) / 2.0;
            let direct = v.uu * nu(si) * nu(sj)
                + v.dd * nd(si) * nd(sj)
                + v.ud * nu(si) * nd(sj)
                + v.du * nd(si) * nu(sj);
            let rewritten =
                v.zz() * si * sj + v.field_first() * si + v.field_second() * sj + v.constant();
            assert_abs_diff_eq!(direct, rewritten, epsilon = 1e-14);
        }
    }

    #[test]
    fn open_ring_equals_hole() {
        let model = CouplingModel::dipolar(1.0, Sign::Antiferro, table::VDW_ADIABATIC);
        let open = build_couplings(&ChainGeometry::open(9, 4).unwrap(), &model).unwrap();
        let hole = build_couplings(
            &ChainGeometry::new(9, Boundary::PeriodicRing, [4]).unwrap(),
            &model,
        )
        .unwrap();
        assert_eq!(open, hole);
    }

    #[test]
    fn couplings_are_rotation_invariant() {
        let n = 11;
        let model = CouplingModel::dipolar(1.0, Sign::Ferro, table::VDW_ADIABATIC);
        let m = build_couplings(&ChainGeometry::periodic(n).unwrap(), &model).unwrap();
        for shift in 1..n {
            for i in 0..n {
                for j in 0..n {
                    let (a, b) = ((i + shift) % n, (j + shift) % n);
                    assert_abs_diff_eq!(m.xy.get(i, j), m.xy.get(a, b), epsilon = 1e-13);
                    assert_abs_diff_eq!(m.zz.get(i, j), m.zz.get(a, b), epsilon = 1e-13);
                }
                assert_abs_diff_eq!(m.field_z[i], m.field_z[(i + shift) % n], epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn overrides_and_validation() {
        let g = ChainGeometry::periodic(6).unwrap();
        let model = CouplingModel::nearest_neighbor(1.0).with_override(3, 2, 0.125);
        let m = build_couplings(&g, &model).unwrap();
        assert_eq!(m.xy.get(2, 3), 0.125);
        assert_eq!(m.xy.get(3, 2), 0.125);
        let bad = CouplingModel {
            j_xy: -1.0,
            ..CouplingModel::nearest_neighbor(1.0)
        };
        assert!(build_couplings(&g, &bad).is_err());
    }

    #[test]
    fn squeeze_without_holes_is_identity() {
        let g = ChainGeometry::periodic(7).unwrap();
        let m = build_couplings(
            &g,
            &CouplingModel::dipolar(1.0, Sign::Ferro, VdwEnergies::zero()),
        )
        .unwrap();
        let s = squeeze_holes(&g, &m).unwrap();
        assert_eq!(s.matrices, m);
        assert_eq!(s.old_index, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn squeeze_single_hole_leaves_weak_bond() {
        let g = ChainGeometry::new(200, Boundary::PeriodicRing, [10]).unwrap();
        let m = build_couplings(
            &g,
            &CouplingModel::dipolar(1.0, Sign::Ferro, VdwEnergies::zero()),
        )
        .unwrap();
        let s = squeeze_holes(&g, &m).unwrap();
        assert_eq!(s.geometry.n_sites(), 199);
        assert_abs_diff_eq!(s.matrices.xy.get(9, 10), 0.125, epsilon = 1e-3);
        assert_abs_diff_eq!(s.matrices.xy.get(8, 9), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn squeeze_two_holes_matches_brute_force_relabeling() {
        let holes = [2usize, 6];
        let g = ChainGeometry::new(9, Boundary::PeriodicRing, holes).unwrap();
        let m = build_couplings(
            &g,
            &CouplingModel::dipolar(1.0, Sign::Ferro, table::VDW_ADIABATIC),
        )
        .unwrap();
        let s = squeeze_holes(&g, &m).unwrap();
        // brute force: count the holes below each surviving site
        for old in 0..9 {
            if holes.contains(&old) {
                continue;
            }
            let new = old - holes.iter().filter(|&&h| h < old).count();
            assert_eq!(s.old_index[new], old);
            for old2 in 0..9 {
                if holes.contains(&old2) {
                    continue;
                }
                let new2 = old2 - holes.iter().filter(|&&h| h < old2).count();
                assert_eq!(s.matrices.xy.get(new, new2), m.xy.get(old, old2));
                assert_eq!(s.matrices.zz.get(new, new2), m.zz.get(old, old2));
            }
        }
    }

    #[test]
    fn squeeze_rejects_all_holes() {
        let g = ChainGeometry::new(3, Boundary::PeriodicRing, [0, 1, 2]).unwrap();
        let m = build_couplings(&g, &CouplingModel::nearest_neighbor(1.0)).unwrap();
        assert!(squeeze_holes(&g, &m).is_err());
    }
}
