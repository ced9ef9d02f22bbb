//! Source registry (TOML) and JSON-lines document files.
//!
//! ```toml
//! [[source]]
//! id = "beq"
//! name = "BEQ ebooks"
//! type = "books"            # books|articles|news|transcript|comments|forum
//! years = "1800-1960"
//! license = "public_domain" # public_domain|cc_by_sa|copyrighted_permission|non_commercial|tos_restricted
//! format = "plain"          # plain|wiki|html|json_comments
//! path = "beq.txt"          # relative to the registry file
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{CleanDocument, FormatHint, LicenseClass, SourceRecord, SourceType, Years};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub id: String,
    pub name: String,
    #[serde(rename = "type")]
    pub source_type: SourceType,
    pub years: String,
    pub license: LicenseClass,
    pub format: FormatHint,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRegistry {
    #[serde(default)]
    pub source: Vec<RegistryEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

pub fn load_registry(path: &Path) -> Result<SourceRegistry> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reg: SourceRegistry =
        toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    reg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = HashMap::new();
    for (i, e) in reg.source.iter().enumerate() {
        if let Some(prev) = seen.insert(e.id.clone(), i) {
            return Err(Error::config(
                format!("source[{i}].id"),
                format!("duplicate id {:?} (also source[{prev}])", e.id),
            ));
        }
        e.years
            .parse::<Years>()
            .map_err(|r| Error::config(format!("source[{i}].years"), r))?;
    }
    Ok(reg)
}

impl RegistryEntry {
    /// Metadata-only record (empty payload).
    pub fn record(&self) -> SourceRecord {
        SourceRecord {
            source_id: self.id.clone(),
            source_name: self.name.clone(),
            source_type: self.source_type,
            years: self.years.parse().unwrap_or(Years { start: 0, end: 0 }),
            license_class: self.license,
            raw_text: String::new(),
        }
    }

    /// Read the payload. Invalid UTF-8 makes the whole source unreadable.
    pub fn load(&self, base_dir: &Path) -> Result<SourceRecord> {
        let path = base_dir.join(&self.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let raw_text = String::from_utf8(bytes).map_err(|e| Error::Payload {
            source_id: self.id.clone(),
            reason: format!("invalid UTF-8 at byte {}", e.utf8_error().valid_up_to()),
        })?;
        Ok(SourceRecord {
            raw_text,
            ..self.record()
        })
    }
}

pub fn write_documents(path: &Path, docs: &[CleanDocument]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_documents(path: &Path) -> Result<Vec<CleanDocument>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            docs.push(serde_json::from_str(&line)?);
        }
    }
    Ok(docs)
}

/// Write documents for redistribution. Refuses if any document comes from a
/// source whose license forbids it.
pub fn export_documents(path: &Path, docs: &[CleanDocument], records: &[SourceRecord]) -> Result<()> {
    let licenses: HashMap<&str, LicenseClass> = records
        .iter()
        .map(|r| (r.source_id.as_str(), r.license_class))
        .collect();
    for d in docs {
        let lic = *licenses
            .get(d.source_id.as_str())
            .ok_or_else(|| Error::DanglingSource {
                doc_id: d.doc_id.clone(),
                source_id: d.source_id.clone(),
            })?;
        if !lic.exportable() {
            return Err(Error::ExportForbidden {
                source_id: d.source_id.clone(),
                license: lic.as_str().into(),
            });
        }
    }
    write_documents(path, docs)
}
