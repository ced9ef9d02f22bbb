use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{CleanDocument, LicenseClass, Register, SourceRecord, SourceType, Years};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_id: String,
    pub source_name: String,
    pub source_type: SourceType,
    pub register: Register,
    pub years: Years,
    pub token_count: u64,
    pub license_class: LicenseClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub total_tokens: u64,
    pub formal_tokens: u64,
    pub informal_tokens: u64,
}

/// Aggregate token counts per source, in registry order.
pub fn build_manifest(docs: &[CleanDocument], records: &[SourceRecord]) -> Result<CorpusManifest> {
    let index: HashMap<&str, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.source_id.as_str(), i))
        .collect();
    let mut counts = vec![0u64; records.len()];
    for doc in docs {
        let i = *index
            .get(doc.source_id.as_str())
            .ok_or_else(|| Error::DanglingSource {
                doc_id: doc.doc_id.clone(),
                source_id: doc.source_id.clone(),
            })?;
        counts[i] += doc.token_count as u64;
    }

    let mut m = CorpusManifest::default();
    for (r, &token_count) in records.iter().zip(&counts) {
        m.total_tokens += token_count;
        match r.register() {
            Register::Formal => m.formal_tokens += token_count,
            Register::Informal => m.informal_tokens += token_count,
        }
        m.entries.push(ManifestEntry {
            source_id: r.source_id.clone(),
            source_name: r.source_name.clone(),
            source_type: r.source_type,
            register: r.register(),
            years: r.years,
            token_count,
            license_class: r.license_class,
        });
    }
    Ok(m)
}

/// Token count in millions with two decimals, e.g. `86.57M`.
pub fn millions(tokens: u64) -> String {
    format!("{:.2}M", tokens as f64 / 1e6)
}

impl fmt::Display for CorpusManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>3}  {:<32} {:<11} {:<9} {:>10}  License", "#", "Source", "Type", "Years", "Size")?;
        for (i, e) in self.entries.iter().enumerate() {
            let years = if e.years.start == e.years.end {
                e.years.start.to_string()
            } else {
                format!("{}-{}", e.years.start, e.years.end)
            };
            writeln!(
                f,
                "{:>3}  {:<32} {:<11} {:<9} {:>10}  {}",
                i + 1,
                e.source_name,
                format!("{:?}", e.source_type).to_lowercase(),
                years,
                millions(e.token_count),
                e.license_class.as_str()
            )?;
        }
        writeln!(f, "     {:<53} {:>10}", "Total", millions(self.total_tokens))?;
        writeln!(f, "     {:<53} {:>10}", "Formal", millions(self.formal_tokens))?;
        write!(f, "     {:<53} {:>10}", "Informal", millions(self.informal_tokens))
    }
}
