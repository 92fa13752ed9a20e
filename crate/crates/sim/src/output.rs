//! Run directories: chain dumps, manifest, metrics and CSV logs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use iome_core::identity::PublicKey;
use iome_core::ledger::Chain;
use serde::{Deserialize, Serialize};

use crate::audit::{audit, AuditReport};
use crate::sim::{Manifest, SimOutput};

pub const PUBLIC_FILE: &str = "public.chain";
pub const CONSORTIUM_FILE: &str = "consortium.chain";
pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn child_file(id: &str) -> String {
    format!("child-{id}.chain")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    seed: u64,
    ca_pk: String,
    grid_manager_pk: String,
    predictor_pk: String,
    quorum: usize,
    od_window: u64,
    children: Vec<String>,
}

fn pk_from_hex(s: &str) -> Result<PublicKey> {
    let bytes = hex::decode(s).with_context(|| format!("bad public key hex {s:?}"))?;
    let arr: [u8; 32] = bytes
        .try_into()
        .map_err(|_| anyhow!("public key must be 32 bytes"))?;
    Ok(PublicKey(arr))
}

impl Manifest {
    pub fn to_toml(&self) -> String {
        let f = ManifestFile {
            seed: self.seed,
            ca_pk: hex::encode(self.ca_pk.0),
            grid_manager_pk: hex::encode(self.grid_manager_pk.0),
            predictor_pk: hex::encode(self.predictor_pk.0),
            quorum: self.quorum,
            od_window: self.od_window,
            children: self.children.clone(),
        };
        toml::to_string(&f).expect("manifest fields are plain values")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let f: ManifestFile = toml::from_str(s).context("parsing manifest")?;
        Ok(Manifest {
            seed: f.seed,
            ca_pk: pk_from_hex(&f.ca_pk)?,
            grid_manager_pk: pk_from_hex(&f.grid_manager_pk)?,
            predictor_pk: pk_from_hex(&f.predictor_pk)?,
            quorum: f.quorum,
            od_window: f.od_window,
            children: f.children,
        })
    }
}

/// The chains and manifest read back from a run directory.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub manifest: Manifest,
    pub public: Chain,
    pub consortium: Chain,
    pub children: Vec<Chain>,
}

impl LoadedRun {
    pub fn audit(&self) -> AuditReport {
        audit(&self.manifest, &self.public, &self.consortium, &self.children)
    }
}

impl SimOutput {
    pub fn audit(&self) -> AuditReport {
        audit(&self.manifest, &self.public, &self.consortium, &self.children)
    }
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Writes every artifact of a run into `dir`, creating it if needed.
/// Returns the audit of the in-memory chains, which is also written out.
pub fn write_run(dir: &Path, out: &SimOutput) -> Result<AuditReport> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(dir, PUBLIC_FILE, out.public.to_dump_bytes())?;
    write(dir, CONSORTIUM_FILE, out.consortium.to_dump_bytes())?;
    for c in &out.children {
        write(dir, &child_file(c.id()), c.to_dump_bytes())?;
    }
    write(dir, MANIFEST_FILE, out.manifest.to_toml())?;
    write(dir, "scenario.toml", out.config.to_toml_string())?;
    write(dir, "metrics.txt", out.metrics.summary())?;
    write(dir, "region_metrics.csv", out.metrics.region_csv())?;
    write(dir, "eps_log.csv", out.metrics.eps_csv())?;
    write(dir, "decisions.csv", out.metrics.decisions_csv())?;
    write(dir, "od.csv", out.metrics.od_csv())?;
    let report = out.audit();
    write(dir, "audit.txt", report.render())?;
    Ok(report)
}

fn read_chain(path: &Path) -> Result<Chain> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Chain::from_dump_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = Manifest::from_toml(
        &fs::read_to_string(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?,
    )?;
    let public = read_chain(&dir.join(PUBLIC_FILE))?;
    let consortium = read_chain(&dir.join(CONSORTIUM_FILE))?;
    let children = manifest
        .children
        .iter()
        .map(|id| read_chain(&dir.join(child_file(id))))
        .collect::<Result<_>>()?;
    Ok(LoadedRun {
        manifest,
        public,
        consortium,
        children,
    })
}
