use log::warn;
use serde::{Deserialize, Serialize};

use super::{clean_text, CleanDocument, SourceRecord};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Container layout of a source payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatHint {
    /// Book text; chapters split on form feed or a line reading `@@doc@@`.
    Plain,
    /// `<doc ...>...</doc>` containers, or articles headed by `= Title =`.
    Wiki,
    /// One document per `<article>...</article>`, else the whole page.
    Html,
    /// JSON array of comment objects, or one object per line.
    JsonComments,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub source_id: String,
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOutcome {
    pub docs: Vec<CleanDocument>,
    pub skipped: Vec<Skipped>,
}

const PLAIN_MARKER: &str = "@@doc@@";
const COMMENT_FIELDS: &[&str] = &["text", "body", "message", "comment"];

/// Split a source payload into documents and clean each one. Malformed
/// containers are skipped individually; empty documents are dropped.
pub fn ingest_source(record: &SourceRecord, hint: FormatHint) -> Result<IngestOutcome> {
    let pieces = match hint {
        FormatHint::Plain => split_plain(&record.raw_text),
        FormatHint::Wiki => split_wiki(&record.raw_text),
        FormatHint::Html => split_html(&record.raw_text),
        FormatHint::JsonComments => split_json(&record.raw_text).map_err(|reason| Error::Payload {
            source_id: record.source_id.clone(),
            reason,
        })?,
    };

    let mut out = IngestOutcome::default();
    for (index, piece) in pieces.into_iter().enumerate() {
        match piece {
            Ok(raw) => {
                let text = clean_text(&raw);
                if !text.is_empty() {
                    let doc_id = format!("{}:{}", record.source_id, index);
                    out.docs.push(CleanDocument::new(doc_id, &record.source_id, text));
                }
            }
            Err(reason) => {
                warn!("{}: skipping document {index}: {reason}", record.source_id);
                out.skipped.push(Skipped {
                    source_id: record.source_id.clone(),
                    index,
                    reason,
                });
            }
        }
    }
    Ok(out)
}

/// Ingest many sources, one task per source. Output order follows input.
pub fn ingest_all(
    sources: &[(SourceRecord, FormatHint)],
    exec: Exec,
) -> Result<IngestOutcome> {
    let results = exec.map(sources, |(rec, hint)| ingest_source(rec, *hint));
    let mut all = IngestOutcome::default();
    for r in results {
        let r = r?;
        all.docs.extend(r.docs);
        all.skipped.extend(r.skipped);
    }
    Ok(all)
}

type Piece = std::result::Result<String, String>;

fn split_plain(raw: &str) -> Vec<Piece> {
    let mut docs = Vec::new();
    let mut cur = String::new();
    for line in raw.split_inclusive('\n') {
        let bare = line.trim_end_matches(['\n', '\r']);
        if bare.trim() == PLAIN_MARKER {
            docs.push(std::mem::take(&mut cur));
            continue;
        }
        let mut parts = line.split('\u{000C}');
        cur.push_str(parts.next().unwrap_or_default());
        for part in parts {
            docs.push(std::mem::take(&mut cur));
            cur.push_str(part);
        }
    }
    docs.push(cur);
    docs.into_iter().map(Ok).collect()
}

fn split_wiki(raw: &str) -> Vec<Piece> {
    if raw.contains("<doc") {
        return split_containers(raw, "<doc", "</doc>");
    }
    let mut docs: Vec<String> = Vec::new();
    let mut cur: Option<String> = None;
    for line in raw.split_inclusive('\n') {
        if is_title_line(line) {
            if let Some(doc) = cur.take() {
                docs.push(doc);
            }
            cur = Some(String::new());
        } else {
            cur.get_or_insert_with(String::new).push_str(line);
        }
    }
    docs.extend(cur);
    docs.into_iter().map(Ok).collect()
}

/// `= Title =` (level-one heading only; `== Section ==` stays in the text).
fn is_title_line(line: &str) -> bool {
    let t = line.trim();
    t.len() > 2
        && t.starts_with('=')
        && t.ends_with('=')
        && !t.starts_with("==")
        && !t.ends_with("==")
}

fn split_html(raw: &str) -> Vec<Piece> {
    if raw.contains("<article") {
        split_containers(raw, "<article", "</article>")
    } else {
        vec![Ok(raw.to_string())]
    }
}

/// Extract the bodies of `open ...>` / `close` containers. An opener without
/// a matching close, or a nested opener, makes that container malformed.
fn split_containers(raw: &str, open: &str, close: &str) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find(open) {
        let after_open = &rest[start..];
        let Some(gt) = after_open.find('>') else {
            out.push(Err(format!("unterminated {open} tag")));
            break;
        };
        let body_start = gt + 1;
        let body = &after_open[body_start..];
        let next_close = body.find(close);
        let next_open = body.find(open);
        match (next_close, next_open) {
            (Some(c), Some(o)) if o < c => {
                out.push(Err(format!("{open} opened before previous one closed")));
                rest = &body[o..];
            }
            (Some(c), _) => {
                out.push(Ok(body[..c].to_string()));
                rest = &body[c + close.len()..];
            }
            (None, Some(o)) => {
                out.push(Err(format!("{open} without {close}")));
                rest = &body[o..];
            }
            (None, None) => {
                out.push(Err(format!("{open} without {close}")));
                break;
            }
        }
    }
    out
}

fn split_json(raw: &str) -> std::result::Result<Vec<Piece>, String> {
    let trimmed = raw.trim_start();
    if trimmed.starts_with('[') {
        let values: Vec<serde_json::Value> =
            serde_json::from_str(trimmed).map_err(|e| format!("invalid JSON array: {e}"))?;
        return Ok(values.iter().map(comment_text).collect());
    }
    Ok(raw
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str::<serde_json::Value>(line)
                .map_err(|e| format!("invalid JSON: {e}"))
                .and_then(|v| comment_text(&v))
        })
        .collect())
}

fn comment_text(v: &serde_json::Value) -> Piece {
    let obj = v.as_object().ok_or("comment is not a JSON object")?;
    COMMENT_FIELDS
        .iter()
        .find_map(|k| obj.get(*k))
        .ok_or_else(|| "comment has no text field".to_string())?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| "comment text is not a string".to_string())
}
