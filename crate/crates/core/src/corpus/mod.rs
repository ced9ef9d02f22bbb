//! Source ingestion, cleaning and per-source token accounting.

mod clean;
mod ingest;
mod manifest;
mod registry;

pub use clean::{clean_bytes, clean_text, paragraph_count};
pub use ingest::{ingest_all, ingest_source, FormatHint, IngestOutcome, Skipped};
pub use manifest::{build_manifest, millions, CorpusManifest, ManifestEntry};
pub use registry::{load_registry, read_documents, write_documents, export_documents, RegistryEntry, SourceRegistry};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceType {
    Books,
    Articles,
    News,
    Transcript,
    Comments,
    Forum,
}

impl SourceType {
    pub fn register(self) -> Register {
        match self {
            SourceType::Books | SourceType::Articles | SourceType::News => Register::Formal,
            SourceType::Transcript | SourceType::Comments | SourceType::Forum => {
                Register::Informal
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Register {
    Formal,
    Informal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LicenseClass {
    PublicDomain,
    CcBySa,
    CopyrightedPermission,
    NonCommercial,
    TosRestricted,
}

impl LicenseClass {
    /// Content under these licenses may be used for training but never
    /// redistributed.
    pub fn exportable(self) -> bool {
        !matches!(
            self,
            LicenseClass::CopyrightedPermission | LicenseClass::TosRestricted
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LicenseClass::PublicDomain => "public_domain",
            LicenseClass::CcBySa => "cc_by_sa",
            LicenseClass::CopyrightedPermission => "copyrighted_permission",
            LicenseClass::NonCommercial => "non_commercial",
            LicenseClass::TosRestricted => "tos_restricted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Years {
    pub start: u16,
    pub end: u16,
}

impl std::str::FromStr for Years {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |x: &str| x.trim().parse::<u16>().map_err(|e| format!("{x:?}: {e}"));
        let (start, end) = match s.split_once(['-', '–']) {
            Some((a, b)) => (parse(a)?, parse(b)?),
            None => {
                let y = parse(s)?;
                (y, y)
            }
        };
        if start > end {
            return Err(format!("{start} > {end}"));
        }
        Ok(Years { start, end })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceRecord {
    pub source_id: String,
    pub source_name: String,
    pub source_type: SourceType,
    pub years: Years,
    pub license_class: LicenseClass,
    pub raw_text: String,
}

impl SourceRecord {
    pub fn register(&self) -> Register {
        self.source_type.register()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanDocument {
    pub doc_id: String,
    pub source_id: String,
    pub text: String,
    pub paragraph_count: usize,
    #[serde(default)]
    pub token_count: usize,
}

impl CleanDocument {
    /// Wrap already-cleaned text.
    pub fn new(doc_id: impl Into<String>, source_id: impl Into<String>, text: String) -> Self {
        let paragraph_count = paragraph_count(&text);
        CleanDocument {
            doc_id: doc_id.into(),
            source_id: source_id.into(),
            text,
            paragraph_count,
            token_count: 0,
        }
    }
}

/// SHA-256 over document ids and texts in order.
pub fn corpus_hash(docs: &[CleanDocument]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for d in docs {
        h.update(d.doc_id.as_bytes());
        h.update([0]);
        h.update(d.text.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())
}
