//! Dataset CSV serialization, content digests, and run manifests.
//!
//! The CSV layout is `delta,xC_1..xC_{d_C},xt,xM_1..xM_{d_M},xr` with
//! `delta` in {1, 2, inf} and empty fields for components not observed at
//! that stage. Values are written with the shortest decimal representation
//! that round-trips to the same f64, so write/read is lossless.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{CoarsenedDataset, CoarsenedRecord, Dims, Stage};
use crate::{Error, Result};

/// Hex-encoded SHA-256 digest of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex-encoded SHA-256 digest of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn csv_header(dims: &Dims) -> Vec<String> {
    let mut h = Vec::with_capacity(dims.total() + 1);
    h.push("delta".to_string());
    for i in 1..=dims.d_c() {
        h.push(format!("xC_{i}"));
    }
    h.push("xt".to_string());
    for i in 1..=dims.d_m() {
        h.push(format!("xM_{i}"));
    }
    h.push("xr".to_string());
    h
}

/// Write a coarsened dataset as CSV.
pub fn write_csv(dataset: &CoarsenedDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(csv_header(&dataset.dims))?;
    let mut row: Vec<String> = Vec::with_capacity(dataset.dims.total() + 1);
    for rec in &dataset.records {
        rec.check()?;
        row.clear();
        row.push(rec.stage.token().to_string());
        for v in rec.x_c.iter() {
            row.push(v.to_string());
        }
        row.push(rec.x_t.to_string());
        match &rec.x_m {
            Some(x_m) => {
                for v in x_m.iter() {
                    row.push(v.to_string());
                }
            }
            None => row.extend(std::iter::repeat_n(String::new(), dataset.dims.d_m())),
        }
        row.push(rec.x_r.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a coarsened dataset from CSV, validating the header against the
/// expected dimensions and the presence pattern of every row.
pub fn read_csv(path: &Path, dims: &Dims) -> Result<CoarsenedDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let expected = csv_header(dims);
    let got: Vec<String> = r.headers()?.iter().map(|s| s.to_string()).collect();
    if got != expected {
        return Err(Error::Config(format!(
            "CSV header mismatch: expected {expected:?}, got {got:?}"
        )));
    }
    let mut records = Vec::new();
    for (line, row) in r.records().enumerate() {
        let row = row?;
        let parse = |field: &str, col: usize| -> Result<f64> {
            field.parse::<f64>().map_err(|_| {
                Error::Config(format!(
                    "row {}: column {col} is not a number: {field:?}",
                    line + 2
                ))
            })
        };
        let stage = Stage::from_token(&row[0])?;
        let mut col = 1;
        let mut x_c = nalgebra::DVector::zeros(dims.d_c());
        for i in 0..dims.d_c() {
            x_c[i] = parse(&row[col], col)?;
            col += 1;
        }
        let x_t = parse(&row[col], col)?;
        col += 1;
        let x_m = if stage >= Stage::Two {
            let mut m = nalgebra::DVector::zeros(dims.d_m());
            for i in 0..dims.d_m() {
                m[i] = parse(&row[col + i], col + i)?;
            }
            Some(m)
        } else {
            for i in 0..dims.d_m() {
                if !row[col + i].is_empty() {
                    return Err(Error::Config(format!(
                        "row {}: stage-1 record has a mediator value",
                        line + 2
                    )));
                }
            }
            None
        };
        col += dims.d_m();
        let x_r = if stage == Stage::Full {
            Some(parse(&row[col], col)?)
        } else {
            if !row[col].is_empty() {
                return Err(Error::Config(format!(
                    "row {}: stage-{} record has a response value",
                    line + 2,
                    stage.token()
                )));
            }
            None
        };
        let rec = CoarsenedRecord {
            stage,
            x_c,
            x_t,
            x_m,
            x_r,
        };
        rec.check()?;
        records.push(rec);
    }
    Ok(CoarsenedDataset {
        dims: *dims,
        records,
    })
}

/// Manifest written next to every artifact-producing run so results can
/// be traced back to their exact inputs and reproduced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Command line the artifact was produced by.
    pub command: String,
    pub tool_version: String,
    pub created_utc: String,
    pub root_seed: u64,
    /// SHA-256 of the model config file, if one was used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    /// Digest of the serialized sampling policy, if the artifact depends
    /// on one. Estimation verifies this against the provided policy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_digest: Option<String>,
    /// Output file name -> SHA-256 of its bytes.
    pub outputs: std::collections::BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: String, root_seed: u64) -> Self {
        RunManifest {
            command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            created_utc: chrono::Utc::now().to_rfc3339(),
            root_seed,
            config_digest: None,
            policy_digest: None,
            outputs: Default::default(),
        }
    }

    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.outputs.insert(name, sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}
