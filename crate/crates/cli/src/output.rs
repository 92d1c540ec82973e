//! Files written by the harness: schema-tagged CSVs, JSON documents and the
//! run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use qdiffuse::ansatz::WeightedEnsemble;
use qdiffuse::config::ExperimentConfig;
use qdiffuse::metrics::magnetization_x;
use qdiffuse::tasks::{Provenance, TaskSample};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Canonical TOML of a config; the bytes that get hashed.
pub fn canonical_config(cfg: &ExperimentConfig) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
}

/// Git blob hash: SHA-256 over `"blob <len>\0" ++ bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String, CliError> {
    Ok(content_hash(canonical_config(cfg)?.as_bytes()))
}

/// Output directory for one command. Refuses to reuse a nonempty directory.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        if root.exists() {
            let nonempty =
                fs::read_dir(root).map_err(|e| CliError::Config(format!("{}: {e}", root.display())))?.next().is_some();
            if nonempty {
                return Err(CliError::Config(format!("output directory {} already has files", root.display())));
            }
        }
        fs::create_dir_all(root).map_err(|e| CliError::Config(format!("{}: {e}", root.display())))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn files(&self) -> &[String] {
        &self.written
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn csv(&mut self, name: &str, table: Table) -> Result<(), CliError> {
        let bytes = table.into_bytes()?;
        self.write(name, &bytes)
    }

    /// Written last, through a temporary file and a rename.
    pub fn manifest<T: Serialize>(&mut self, value: &T) -> Result<(), CliError> {
        let tmp = self.root.join("manifest.json.tmp");
        let dst = self.root.join("manifest.json");
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        s.push('\n');
        let mut f = fs::File::create(&tmp).map_err(|e| CliError::Config(format!("{}: {e}", tmp.display())))?;
        f.write_all(s.as_bytes())
            .and_then(|_| f.sync_all())
            .map_err(|e| CliError::Config(format!("{}: {e}", tmp.display())))?;
        fs::rename(&tmp, &dst).map_err(|e| CliError::Config(format!("{}: {e}", dst.display())))?;
        Ok(())
    }
}

/// Header plus rows, rendered with a schema comment line on top.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { header: header.iter().map(|h| h.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    fn into_bytes(self) -> Result<Vec<u8>, CliError> {
        let mut buf = format!("# schema_version={SCHEMA_VERSION}\n").into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            let io = |e: csv::Error| CliError::Numerical(e.to_string());
            w.write_record(&self.header).map_err(io)?;
            for r in &self.rows {
                w.write_record(r).map_err(io)?;
            }
            w.flush().map_err(|e| CliError::Numerical(e.to_string()))?;
        }
        Ok(buf)
    }
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

fn provenance_header(p: &Provenance) -> &'static [&'static str] {
    match p {
        Provenance::Clustered { .. } => &["q0", "c0_re", "c0_im"],
        Provenance::Circular { .. } => &["q0", "theta0"],
        Provenance::ManyBody { .. } => &["g"],
    }
}

fn provenance_cells(p: &Provenance) -> Vec<String> {
    match *p {
        Provenance::Clustered { q0, c0_re, c0_im } => vec![num(q0), num(c0_re), num(c0_im)],
        Provenance::Circular { q0, theta0 } => vec![num(q0), num(theta0)],
        Provenance::ManyBody { g } => vec![num(g)],
    }
}

/// Per-member summary: Bloch coordinates for one qubit, `M_x` otherwise,
/// purity always. `provenance` adds the generator's parameters per row.
pub fn ensemble_table(ensemble: &WeightedEnsemble, provenance: Option<&[TaskSample]>) -> Result<Table, CliError> {
    let single = ensemble.n_qubits() == 1;
    let mut header: Vec<&str> = vec!["index", "weight"];
    header.extend(if single { &["x", "y", "z"][..] } else { &["mx"][..] });
    header.push("purity");
    if let Some(first) = provenance.and_then(|p| p.first()) {
        header.extend(provenance_header(&first.provenance));
    }
    let mut t = Table::new(&header);
    for (i, (rho, w)) in ensemble.members().iter().enumerate() {
        let mut row = vec![i.to_string(), num(*w)];
        if single {
            let b = rho.bloch_coordinates()?;
            row.extend([num(b.x), num(b.y), num(b.z)]);
        } else {
            row.push(num(magnetization_x(rho)?));
        }
        row.push(num(rho.purity()));
        if let Some(p) = provenance {
            row.extend(provenance_cells(&p[i].provenance));
        }
        t.row(row);
    }
    Ok(t)
}
