//! Result files and the run manifest.
//!
//! Every file goes through [`OutputSink`], which hashes the bytes it writes so
//! the manifest can list them. Files hold no timing information, which keeps
//! their checksums reproducible; wall-clock time lives only in the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultManifest {
    pub tool: String,
    pub version: String,
    pub scenario: String,
    pub config_sha256: String,
    pub seed: u64,
    pub workers: usize,
    pub wall_clock_s: f64,
    pub warnings: Vec<String>,
    pub files: Vec<FileEntry>,
}

pub struct OutputSink {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

/// Shortest round-trip representation (scientific notation for very small or
/// large magnitudes), `NaN` for missing values.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:?}")
    }
}

impl OutputSink {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: vec![],
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn write_bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, data).with_context(|| format!("writing {}", path.display()))?;
        self.files.retain(|f| f.name != name);
        self.files.push(FileEntry {
            name: name.to_string(),
            sha256: hex(&Sha256::digest(data)),
            bytes: data.len(),
        });
        log::info!("wrote {}", path.display());
        Ok(())
    }

    /// CSV with a header row. Cells are written verbatim; callers format numbers
    /// with [`num`].
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut s = header.join(",");
        s.push('\n');
        for row in rows {
            debug_assert_eq!(row.len(), header.len(), "{name}: ragged row");
            s.push_str(&row.join(","));
            s.push('\n');
        }
        self.write_bytes(name, s.as_bytes())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write_bytes(name, s.as_bytes())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.write_bytes(name, text.as_bytes())
    }

    /// Write `manifest.json`. The manifest is not listed in itself.
    pub fn finish(self, mut manifest: ResultManifest) -> Result<ResultManifest> {
        let mut files = self.files;
        files.sort_by(|a, b| a.name.cmp(&b.name));
        manifest.files = files;
        let mut s = serde_json::to_string_pretty(&manifest)?;
        s.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

/// Re-hash every file listed in a manifest; returns the names that differ.
pub fn verify_manifest(dir: &Path, manifest: &ResultManifest) -> Result<Vec<String>> {
    let mut bad = vec![];
    for f in &manifest.files {
        let data = fs::read(dir.join(&f.name)).with_context(|| format!("reading {}", f.name))?;
        if hex(&Sha256::digest(&data)) != f.sha256 || data.len() != f.bytes {
            bad.push(f.name.clone());
        }
    }
    Ok(bad)
}

/// Column layout of every CSV the harness can emit. File names are matched by
/// prefix so per-magnetization Friedel files share one entry.
pub const CSV_SCHEMAS: &[(&str, &[&str])] = &[
    (
        "gs_cx.csv",
        &["d_sites", "r_chord", "mean", "stderr", "n_pairs"],
    ),
    (
        "gs_cz.csv",
        &["d_sites", "r_chord", "mean", "stderr", "n_pairs"],
    ),
    ("gs_sz.csv", &["site", "sz"]),
    ("cutoff_scan.csv", &["observable", "r_c", "K", "K_err"]),
    (
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
    ),
    ("ramp_sz.csv", &["t_us", "site", "sz", "stderr", "survival"]),
    (
        "ramp_cx.csv",
        &["t_us", "d_sites", "r_chord", "mean", "stderr", "n_pairs"],
    ),
    (
        "ramp_cz.csv",
        &["t_us", "d_sites", "r_chord", "mean", "stderr", "n_pairs"],
    ),
    (
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
    ),
    (
        "angular_scan.csv",
        &["theta_deg", "mean_sigma", "c_nn", "c_nnn"],
    ),
    (
        "friedel_summary.csv",
        &["mz", "two_kf", "peak_q", "flat", "K", "K_err", "degenerate"],
    ),
    ("friedel_fft_", &["q", "magnitude"]),
    ("friedel_mz", &["site", "addressed", "obc", "pbc", "signal"]),
    ("quench_grid.csv", &["t_us", "d_sites", "czz", "stderr"]),
    ("quench_varmz.csv", &["t_us", "var_mz"]),
    ("fronts.csv", &["d_sites", "t_star_us"]),
    ("dsf.csv", &["q", "omega_rad_per_us", "s", "intensity"]),
    ("dsf_poles.csv", &["q", "omega_rad_per_us", "weight"]),
    ("dsf_static.csv", &["q", "s_static"]),
    (
        "disorder_cx.csv",
        &["r", "mean", "stderr", "n_realizations"],
    ),
    ("thermal_sz.csv", &["site", "sz", "stderr"]),
    (
        "thermal_cx.csv",
        &["d_sites", "r_chord", "mean", "stderr", "n_pairs"],
    ),
    (
        "thermal_cz.csv",
        &["d_sites", "r_chord", "mean", "stderr", "n_pairs"],
    ),
    (
        "thermal_cz_corrected.csv",
        &["d_sites", "r_chord", "mean", "stderr", "n_pairs"],
    ),
];

pub fn csv_schema(name: &str) -> Option<&'static [&'static str]> {
    CSV_SCHEMAS
        .iter()
        .filter(|(p, _)| name.starts_with(p))
        .max_by_key(|(p, _)| p.len())
        .map(|(_, h)| *h)
}
