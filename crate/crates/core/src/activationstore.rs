//! PVAC1 activation matrices.
//!
//! Layout: the 5-byte magic `PVAC1`, a little-endian `u32` header length,
//! a JSON header `{model_id, persona, layer, position, d, n, task_ids}`,
//! then `n·d` little-endian `f32` values in row-major order.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"PVAC1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    EndOfTurn,
    RoleMarker,
    FinalPrompt,
    TaskAveraged,
}

impl Position {
    pub const ALL: [Position; 4] = [Position::EndOfTurn, Position::RoleMarker, Position::FinalPrompt, Position::TaskAveraged];

    pub fn as_str(self) -> &'static str {
        match self {
            Position::EndOfTurn => "end_of_turn",
            Position::RoleMarker => "role_marker",
            Position::FinalPrompt => "final_prompt",
            Position::TaskAveraged => "task_averaged",
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Position::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| Error::UnknownEnum {
            field: "position",
            value: s.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model_id: String,
    persona: String,
    layer: usize,
    position: Position,
    d: usize,
    n: usize,
    task_ids: Vec<String>,
}

/// An `n × d` matrix of activations at one (model, persona, layer, position).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    model_id: String,
    persona: String,
    layer: usize,
    position: Position,
    d: usize,
    task_ids: Vec<String>,
    data: Vec<f32>,
}

impl ActivationMatrix {
    pub fn new(
        model_id: impl Into<String>,
        persona: impl Into<String>,
        layer: usize,
        position: Position,
        d: usize,
        task_ids: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let m = ActivationMatrix {
            model_id: model_id.into(),
            persona: persona.into(),
            layer,
            position,
            d,
            task_ids,
            data,
        };
        m.validate()?;
        Ok(m)
    }

    /// Build from `f64` rows, rounding to `f32` storage.
    pub fn from_rows(
        model_id: impl Into<String>,
        persona: impl Into<String>,
        layer: usize,
        position: Position,
        task_ids: Vec<String>,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        Self::new(model_id, persona, layer, position, d, task_ids, data)
    }

    fn validate(&self) -> Result<()> {
        if self.data.len() != self.task_ids.len() * self.d {
            return Err(Error::Format(format!(
                "payload has {} values, expected {} × {}",
                self.data.len(),
                self.task_ids.len(),
                self.d
            )));
        }
        let mut seen = HashSet::new();
        for id in &self.task_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: i / self.d,
                col: i % self.d,
            });
        }
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }
    pub fn persona(&self) -> &str {
        &self.persona
    }
    pub fn layer(&self) -> usize {
        self.layer
    }
    pub fn position(&self) -> Position {
        self.position
    }
    pub fn d(&self) -> usize {
        self.d
    }
    pub fn n(&self) -> usize {
        self.task_ids.len()
    }
    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| v as f64).collect()
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|i| self.row_f64(i)).collect()
    }

    /// Rows reordered and subset to `wanted`; metadata is kept.
    pub fn align(&self, wanted: &[String]) -> Result<ActivationMatrix> {
        let index: HashMap<&str, usize> = self.task_ids.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let missing: Vec<String> = wanted.iter().filter(|w| !index.contains_key(w.as_str())).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::MissingIds(missing));
        }
        let mut data = Vec::with_capacity(wanted.len() * self.d);
        for w in wanted {
            data.extend_from_slice(self.row(index[w.as_str()]));
        }
        ActivationMatrix::new(
            self.model_id.clone(),
            self.persona.clone(),
            self.layer,
            self.position,
            self.d,
            wanted.to_vec(),
            data,
        )
    }

    /// Arithmetic mean of row Euclidean norms.
    pub fn mean_norm(&self) -> Result<f64> {
        if self.n() == 0 {
            return Err(Error::Degenerate("empty matrix".into()));
        }
        let total: f64 = (0..self.n())
            .map(|i| self.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .sum();
        Ok(total / self.n() as f64)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = Header {
            model_id: self.model_id.clone(),
            persona: self.persona.clone(),
            layer: self.layer,
            position: self.position,
            d: self.d,
            n: self.n(),
            task_ids: self.task_ids.clone(),
        };
        let h = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(9 + h.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..5] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
        let body = &bytes[9..];
        if body.len() < hlen {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.n != header.task_ids.len() {
            return Err(Error::Format(format!("header n = {} but {} task_ids", header.n, header.task_ids.len())));
        }
        let payload = &body[hlen..];
        let expected = header.n * header.d * 4;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload length {} does not match header ({expected} bytes)",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        ActivationMatrix::new(
            header.model_id,
            header.persona,
            header.layer,
            header.position,
            header.d,
            header.task_ids,
            data,
        )
    }
}

pub fn write_matrix(matrix: &ActivationMatrix, path: &Path) -> Result<()> {
    let bytes = matrix.to_bytes()?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<ActivationMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ActivationMatrix::from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub persona: String,
    pub layer: usize,
    pub position: Position,
}

/// Index of a directory of matrices, one (persona, layer, position) per file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn find(&self, persona: &str, layer: usize, position: Position) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.persona == persona && e.layer == layer && e.position == position)
    }
}

/// Conventional relative path of a matrix inside a tree.
pub fn relative_path(persona: &str, layer: usize, position: Position) -> String {
    format!("{persona}/L{layer:03}_{position}.pvac")
}

/// Write matrices under `dir` plus a manifest. Entries are sorted.
pub fn write_tree(dir: &Path, matrices: &[ActivationMatrix]) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(matrices.len());
    for m in matrices {
        let rel = relative_path(m.persona(), m.layer(), m.position());
        write_matrix(m, &dir.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            persona: m.persona().to_string(),
            layer: m.layer(),
            position: m.position(),
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest { entries };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))
}

/// Load one matrix from a tree by key.
pub fn load_from_tree(dir: &Path, persona: &str, layer: usize, position: Position) -> Result<ActivationMatrix> {
    let manifest = read_manifest(dir)?;
    let entry = manifest
        .find(persona, layer, position)
        .ok_or_else(|| Error::invalid(format!("no matrix for ({persona}, {layer}, {position}) in manifest")))?;
    let path: PathBuf = dir.join(&entry.path);
    read_matrix(&path)
}
