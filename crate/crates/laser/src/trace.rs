//! Immutable activation traces and their on-disk cache format.
//!
//! A trace records the value at every captured hook site for every timestep
//! of one inversion or endpoint-generation run. Traces are sealed on
//! construction: the builder checks completeness and finiteness, after which
//! the entries can no longer change.
//!
//! The archive format is a single file: `LASERTRC` magic, a little-endian
//! u32 JSON-manifest length, the manifest (grid, sites, shapes, origin,
//! source id), then all values as little-endian f32 in manifest order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::HookSite;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"LASERTRC";

/// Where a trace came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOrigin {
    Inversion,
    EndpointFirst,
    EndpointLast,
}

/// Sealed map of `(timestep, site) -> value`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    origin: TraceOrigin,
    source_id: String,
    timesteps: Vec<i64>,
    sites: BTreeSet<HookSite>,
    entries: BTreeMap<(i64, HookSite), ArrayD<f32>>,
}

impl ActivationTrace {
    pub fn origin(&self) -> TraceOrigin {
        self.origin
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn timesteps(&self) -> &[i64] {
        &self.timesteps
    }

    pub fn sites(&self) -> &BTreeSet<HookSite> {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, timestep: i64, site: HookSite) -> Option<&ArrayD<f32>> {
        self.entries.get(&(timestep, site))
    }

    pub fn write_archive(&self, path: &Path) -> Result<()> {
        let manifest = ArchiveManifest {
            origin: self.origin,
            source_id: self.source_id.clone(),
            timesteps: self.timesteps.clone(),
            entries: self
                .entries
                .iter()
                .map(|((t, site), v)| ArchiveEntry {
                    timestep: *t,
                    site: *site,
                    shape: v.shape().to_vec(),
                })
                .collect(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
        file.write_all(&manifest_bytes)?;
        let mut buf = Vec::new();
        for value in self.entries.values() {
            buf.clear();
            buf.reserve(value.len() * 4);
            for v in value.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_archive(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::config(format!(
                "{} is not a trace archive",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes)?;
        let manifest_len = u32::from_le_bytes(len_bytes) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        file.read_exact(&mut manifest_bytes)?;
        let manifest: ArchiveManifest = serde_json::from_slice(&manifest_bytes)?;

        let mut entries = BTreeMap::new();
        for entry in &manifest.entries {
            let count: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; count * 4];
            file.read_exact(&mut raw)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let array = ArrayD::from_shape_vec(entry.shape.clone(), data)
                .map_err(|e| Error::config(format!("corrupt trace archive: {e}")))?;
            entries.insert((entry.timestep, entry.site), array);
        }
        let sites: BTreeSet<HookSite> = manifest.entries.iter().map(|e| e.site).collect();
        let trace = ActivationTrace {
            origin: manifest.origin,
            source_id: manifest.source_id,
            timesteps: manifest.timesteps,
            sites,
            entries,
        };
        trace.validate()?;
        Ok(trace)
    }

    fn validate(&self) -> Result<()> {
        let expected = self.timesteps.len() * self.sites.len();
        if self.entries.len() != expected {
            return Err(Error::config(format!(
                "trace incomplete: {} entries, expected {} ({} timesteps x {} sites)",
                self.entries.len(),
                expected,
                self.timesteps.len(),
                self.sites.len()
            )));
        }
        for t in &self.timesteps {
            for site in &self.sites {
                match self.entries.get(&(*t, *site)) {
                    None => {
                        return Err(Error::config(format!(
                            "trace missing entry for timestep {t}, site {site}"
                        )))
                    }
                    Some(v) if !v.iter().all(|x| x.is_finite()) => {
                        return Err(Error::numeric(format!(
                            "trace entry at timestep {t}, site {site} has non-finite values"
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Accumulates captured values; [`TraceBuilder::seal`] validates coverage.
#[derive(Debug)]
pub struct TraceBuilder {
    origin: TraceOrigin,
    source_id: String,
    timesteps: Vec<i64>,
    sites: BTreeSet<HookSite>,
    entries: BTreeMap<(i64, HookSite), ArrayD<f32>>,
}

impl TraceBuilder {
    pub fn new(
        origin: TraceOrigin,
        source_id: impl Into<String>,
        timesteps: Vec<i64>,
        sites: BTreeSet<HookSite>,
    ) -> Self {
        TraceBuilder {
            origin,
            source_id: source_id.into(),
            timesteps,
            sites,
            entries: BTreeMap::new(),
        }
    }

    pub fn sites(&self) -> &BTreeSet<HookSite> {
        &self.sites
    }

    pub fn record(&mut self, timestep: i64, site: HookSite, value: ArrayD<f32>) -> Result<()> {
        if !self.sites.contains(&site) {
            return Err(Error::config(format!(
                "capture at undeclared site {site}"
            )));
        }
        if self.entries.insert((timestep, site), value).is_some() {
            return Err(Error::config(format!(
                "duplicate capture at timestep {timestep}, site {site}"
            )));
        }
        Ok(())
    }

    pub fn seal(self) -> Result<ActivationTrace> {
        let trace = ActivationTrace {
            origin: self.origin,
            source_id: self.source_id,
            timesteps: self.timesteps,
            sites: self.sites,
            entries: self.entries,
        };
        trace.validate()?;
        Ok(trace)
    }
}

#[derive(Serialize, Deserialize)]
struct ArchiveEntry {
    timestep: i64,
    site: HookSite,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ArchiveManifest {
    origin: TraceOrigin,
    source_id: String,
    timesteps: Vec<i64>,
    entries: Vec<ArchiveEntry>,
}

/// Stable cache file path for an inversion trace, keyed by backbone name,
/// source-image hash, prompt hash and grid.
pub fn cache_path(
    cache_dir: &Path,
    backbone: &str,
    image_hash: &str,
    prompt_hash: &str,
    grid_timesteps: &[i64],
    sites: &BTreeSet<HookSite>,
) -> PathBuf {
    let mut hasher = Sha256::new();
    hasher.update(backbone.as_bytes());
    hasher.update(b"|");
    hasher.update(image_hash.as_bytes());
    hasher.update(b"|");
    hasher.update(prompt_hash.as_bytes());
    hasher.update(b"|");
    for t in grid_timesteps {
        hasher.update(t.to_le_bytes());
    }
    hasher.update(b"|");
    for site in sites {
        hasher.update(site.to_string().as_bytes());
        hasher.update(b",");
    }
    let digest = hex::encode(hasher.finalize());
    cache_dir.join(format!("{digest}.lasertrc"))
}

/// Hex SHA-256 of a byte buffer; used for image and prompt hashes.
pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

const LATENT_MAGIC: &[u8; 8] = b"LASERLAT";

#[derive(Serialize, Deserialize)]
struct LatentHeader {
    shape: [usize; 3],
    timestep_tag: Option<i64>,
}

/// Write a latent as `LASERLAT` magic + JSON header + little-endian f32.
pub fn write_latent(latent: &crate::backbone::Latent, path: &Path) -> Result<()> {
    let dim = latent.values.dim();
    let header = LatentHeader {
        shape: [dim.0, dim.1, dim.2],
        timestep_tag: latent.timestep_tag,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(LATENT_MAGIC)?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    let mut buf = Vec::with_capacity(latent.values.len() * 4);
    for v in latent.values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_latent(path: &Path) -> Result<crate::backbone::Latent> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != LATENT_MAGIC {
        return Err(Error::config(format!(
            "{} is not a latent archive",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut header_bytes)?;
    let header: LatentHeader = serde_json::from_slice(&header_bytes)?;
    let count = header.shape.iter().product::<usize>();
    let mut raw = vec![0u8; count * 4];
    file.read_exact(&mut raw)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let values = ndarray::Array3::from_shape_vec(
        (header.shape[0], header.shape[1], header.shape[2]),
        data,
    )
    .map_err(|e| Error::config(format!("corrupt latent archive: {e}")))?;
    Ok(crate::backbone::Latent {
        values,
        timestep_tag: header.timestep_tag,
    })
}
