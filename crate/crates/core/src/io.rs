//! On-disk formats: the `KAMX` matrix container and adapter checkpoints.
//!
//! `KAMX` layout, all integers and floats little-endian:
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `b"KAMX"`                        |
//! | 4      | 2    | format version (`u16`, currently 1)    |
//! | 6      | 8    | rows (`u64`, ≥ 1)                      |
//! | 14     | 8    | cols (`u64`, ≥ 1)                      |
//! | 22     | 8·rows·cols | entries (`f64`), row-major      |
//!
//! A checkpoint is a directory holding `manifest.json` and the `KAMX`
//! payloads it names by relative path. Nothing environment-dependent
//! (absolute paths, timestamps) is written.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, FullAdapter, LoraAdapter, PissaAdapter, SokaAdapter, SokaInit};
use crate::error::{arg_err, Error, Result};
use crate::kpsvd::KronTerm;
use crate::kron::KronShape;
use crate::matrix::Matrix;
use crate::rank::{energy_curve, gaps, RankDecision, RankPolicy, SelectionMode};

pub const MATRIX_MAGIC: &[u8; 4] = b"KAMX";
pub const MATRIX_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 + 8;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const CHECKPOINT_FORMAT: &str = "kronadapt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write `bytes` to `path` through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| arg_err!("{} is not a file path", path.display()))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(arg_err!(
            "cannot store a {}x{} matrix: both dimensions must be at least 1",
            m.rows(),
            m.cols()
        ));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 4 {
        return Err(corrupt(format!(
            "{} bytes is too short for a header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4])),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!(
            "header truncated at {} bytes",
            bytes.len()
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MATRIX_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: MATRIX_VERSION,
        });
    }
    let rows = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
    if rows == 0 || cols == 0 {
        return Err(corrupt(format!(
            "declared shape {rows}x{cols} has a zero dimension"
        )));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| corrupt(format!("declared shape {rows}x{cols} is too large")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(corrupt(format!(
            "declared {rows}x{cols} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::new(rows as usize, cols as usize, data).map_err(|e| corrupt(e.to_string()))
}

pub fn save_matrix(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_matrix(m)?)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, path)
}

/// Whether a checkpoint holds freshly initialized or trained parameters.
/// Initialization identities are only checked on `init` checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointState {
    Init,
    Trained,
}

/// An adapter plus the metadata stored beside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub adapter: Adapter,
    pub state: CheckpointState,
    /// Singular values of the original weight (PiSSA) or of its
    /// rearrangement (SoKA), when known.
    pub spectrum: Option<Vec<f64>>,
}

impl Checkpoint {
    pub fn init(adapter: Adapter) -> Self {
        let spectrum = match &adapter {
            Adapter::Soka(a) => Some(a.rank_decision.spectrum.clone()),
            _ => None,
        };
        Self {
            adapter,
            state: CheckpointState::Init,
            spectrum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub mode: SelectionMode,
    pub r_energy: usize,
    pub r_elbow: usize,
    pub r_final: usize,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payloads {
    pub base: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub u: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub v: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<String>,
}

/// `manifest.json` contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub kind: String,
    pub state: CheckpointState,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<KronShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<RankPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_decision: Option<RankSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<SokaInit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub payloads: Payloads,
}

fn spectrum_matrix(s: &[f64]) -> Result<Option<Matrix>> {
    if s.is_empty() {
        Ok(None)
    } else {
        Matrix::column(s.to_vec()).map(Some)
    }
}

/// Write a checkpoint directory (created if missing). Payloads are written
/// first and the manifest last, each atomically.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, m: &Matrix| -> Result<String> {
        save_matrix(m, dir.join(name))?;
        Ok(name.to_string())
    };
    let adapter = &ckpt.adapter;
    let mut payloads = Payloads {
        base: String::new(),
        sigma: None,
        u: Vec::new(),
        v: Vec::new(),
        a: None,
        b: None,
        spectrum: None,
    };
    if let Some(s) = ckpt
        .spectrum
        .as_deref()
        .map(spectrum_matrix)
        .transpose()?
        .flatten()
    {
        payloads.spectrum = Some(put("spectrum.kamx", &s)?);
    }
    let mut manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        format_version: CHECKPOINT_VERSION,
        kind: adapter.kind().as_str().into(),
        state: ckpt.state,
        rows: adapter.out_dim(),
        cols: adapter.in_dim(),
        rank: 0,
        shape: None,
        policy: None,
        rank_decision: None,
        init: None,
        lora_scale: None,
        seed: None,
        payloads: payloads.clone(),
    };
    match adapter {
        Adapter::Soka(a) => {
            payloads.base = put("base.kamx", &a.base)?;
            if !a.terms.is_empty() {
                let sig = Matrix::column(a.terms.iter().map(|t| t.sigma).collect())?;
                payloads.sigma = Some(put("sigma.kamx", &sig)?);
            }
            for (k, t) in a.terms.iter().enumerate() {
                payloads.u.push(put(&format!("u_{k:04}.kamx"), &t.u)?);
                payloads.v.push(put(&format!("v_{k:04}.kamx"), &t.v)?);
            }
            let d = &a.rank_decision;
            manifest.rank = a.rank();
            manifest.shape = Some(a.shape);
            manifest.policy = Some(d.policy);
            manifest.rank_decision = Some(RankSummary {
                mode: d.mode,
                r_energy: d.r_energy,
                r_elbow: d.r_elbow,
                r_final: d.r_final,
                clamped: d.clamped,
            });
            manifest.init = Some(a.init);
            if let SokaInit::Random { seed } = a.init {
                manifest.seed = Some(seed);
            }
            if payloads.spectrum.is_none() {
                if let Some(s) = spectrum_matrix(&d.spectrum)? {
                    payloads.spectrum = Some(put("spectrum.kamx", &s)?);
                }
            }
        }
        Adapter::Lora(a) => {
            payloads.base = put("base.kamx", &a.base)?;
            payloads.a = Some(put("a.kamx", &a.a)?);
            payloads.b = Some(put("b.kamx", &a.b)?);
            manifest.rank = a.rank();
            manifest.lora_scale = Some(a.scale);
            manifest.seed = Some(a.seed);
        }
        Adapter::Pissa(a) => {
            payloads.base = put("base.kamx", &a.base)?;
            payloads.a = Some(put("a.kamx", &a.a)?);
            payloads.b = Some(put("b.kamx", &a.b)?);
            manifest.rank = a.rank();
        }
        Adapter::Full(a) => {
            payloads.base = put("base.kamx", &a.weight)?;
            manifest.rank = a.weight.rows().min(a.weight.cols());
        }
    }
    manifest.payloads = payloads;
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::CorruptCheckpoint(format!("manifest encoding: {e}")))?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_NAME), text.as_bytes())?;
    Ok(manifest)
}

pub fn save_adapter(adapter: &Adapter, dir: impl AsRef<Path>) -> Result<Manifest> {
    save_checkpoint(
        &Checkpoint {
            adapter: adapter.clone(),
            state: CheckpointState::Trained,
            spectrum: None,
        },
        dir,
    )
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::CorruptCheckpoint(format!("missing manifest {}", path.display()))
        }
        _ => Error::io(&path, e),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::CorruptCheckpoint(format!(
            "{} is not a {CHECKPOINT_FORMAT} manifest",
            path.display()
        )));
    }
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

fn payload(dir: &Path, name: &str) -> Result<Matrix> {
    let rel = Path::new(name);
    if rel.is_absolute()
        || rel
            .components()
            .any(|c| matches!(c, std::path::Component::ParentDir))
    {
        return Err(Error::CorruptCheckpoint(format!(
            "payload path {name:?} must be relative to the checkpoint"
        )));
    }
    let path: PathBuf = dir.join(rel);
    if !path.exists() {
        return Err(Error::CorruptCheckpoint(format!(
            "missing payload {}",
            path.display()
        )));
    }
    load_matrix(path)
}

fn required<'a>(field: &'a Option<String>, what: &str) -> Result<&'a str> {
    field
        .as_deref()
        .ok_or_else(|| Error::CorruptCheckpoint(format!("manifest lacks the {what} payload")))
}

fn expect_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::Consistency(format!(
            "{what} is {}x{} but the manifest implies {rows}x{cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let p = &manifest.payloads;
    let base = payload(dir, &p.base)?;
    expect_shape(&base, manifest.rows, manifest.cols, "base")?;
    let spectrum = match &p.spectrum {
        Some(name) => Some(payload(dir, name)?.into_vec()),
        None => None,
    };
    let r = manifest.rank;

    let adapter = match manifest.kind.as_str() {
        "soka" => {
            let shape = manifest
                .shape
                .ok_or_else(|| Error::CorruptCheckpoint("soka manifest lacks shape".into()))?;
            shape
                .check_weight(manifest.rows, manifest.cols)
                .map_err(|e| Error::Consistency(e.to_string()))?;
            if p.u.len() != r || p.v.len() != r {
                return Err(Error::Consistency(format!(
                    "rank {r} but {} U and {} V payloads",
                    p.u.len(),
                    p.v.len()
                )));
            }
            let sigmas = if r == 0 {
                Vec::new()
            } else {
                let s = payload(dir, required(&p.sigma, "sigma")?)?;
                expect_shape(&s, r, 1, "sigma")?;
                s.into_vec()
            };
            let mut terms = Vec::with_capacity(r);
            for (k, &sigma) in sigmas.iter().enumerate() {
                let u = payload(dir, &p.u[k])?;
                expect_shape(&u, shape.m, shape.n, &format!("U[{k}]"))?;
                let v = payload(dir, &p.v[k])?;
                expect_shape(&v, shape.p, shape.q, &format!("V[{k}]"))?;
                terms.push(KronTerm::new(sigma, u, v)?);
            }
            let summary = manifest.rank_decision.clone().ok_or_else(|| {
                Error::CorruptCheckpoint("soka manifest lacks rank_decision".into())
            })?;
            let policy = manifest.policy.unwrap_or_default();
            let spec = spectrum.clone().unwrap_or_default();
            if summary.r_final != r {
                return Err(Error::Consistency(format!(
                    "rank decision says {} terms, manifest rank is {r}",
                    summary.r_final
                )));
            }
            let decision = RankDecision {
                mode: summary.mode,
                policy,
                energy_curve: energy_curve(&spec),
                gaps: gaps(&spec, policy.gap),
                spectrum: spec,
                r_energy: summary.r_energy,
                r_elbow: summary.r_elbow,
                r_final: summary.r_final,
                clamped: summary.clamped,
            };
            let init = manifest.init.unwrap_or(SokaInit::Kpsvd);
            Adapter::Soka(SokaAdapter::from_parts(base, terms, shape, decision, init)?)
        }
        "lora" | "pissa" => {
            let a = payload(dir, required(&p.a, "A")?)?;
            expect_shape(&a, manifest.rows, r, "A")?;
            let b = payload(dir, required(&p.b, "B")?)?;
            expect_shape(&b, manifest.cols, r, "B")?;
            if manifest.kind == "lora" {
                Adapter::Lora(LoraAdapter::from_parts(
                    base,
                    a,
                    b,
                    manifest.lora_scale.unwrap_or(1.0),
                    manifest.seed.unwrap_or(0),
                )?)
            } else {
                Adapter::Pissa(PissaAdapter::from_parts(base, a, b)?)
            }
        }
        "full" => Adapter::Full(FullAdapter { weight: base }),
        other => {
            return Err(Error::CorruptCheckpoint(format!(
                "unknown adapter kind {other:?}"
            )))
        }
    };
    Ok(Checkpoint {
        adapter,
        state: manifest.state,
        spectrum,
    })
}

pub fn load_adapter(dir: impl AsRef<Path>) -> Result<Adapter> {
    load_checkpoint(dir).map(|c| c.adapter)
}
