//! Light text cleaning: BOM removal, markup stripping and whitespace
//! normalization. Dialectal orthography is left untouched.

use crate::error::{Error, Result};

const BOM: char = '\u{FEFF}';

/// Wiki link namespaces whose links are dropped rather than unwrapped.
const DROPPED_LINK_PREFIXES: &[&str] = &[
    "category:",
    "catégorie:",
    "file:",
    "fichier:",
    "image:",
];

/// Validate `raw` as UTF-8 and clean it.
pub fn clean_bytes(raw: &[u8]) -> Result<String> {
    match std::str::from_utf8(raw) {
        Ok(s) => Ok(clean_text(s)),
        Err(e) => Err(Error::InvalidUtf8 {
            position: e.valid_up_to(),
        }),
    }
}

/// Clean one document.
///
/// Paragraphs are separated by blank lines in the input and come out joined
/// by exactly one blank line. Lines that only held markup disappear without
/// creating a paragraph break.
pub fn clean_text(raw: &str) -> String {
    let text: String = raw.chars().filter(|&c| c != BOM).collect();
    let text = text.replace("\r\n", "\n").replace('\r', "\n");

    let mut paragraphs = Vec::new();
    for para in split_paragraphs(&text) {
        let stripped = strip_markup(&para);
        let lines: Vec<String> = stripped
            .split('\n')
            .map(normalize_line)
            .filter(|l| !l.is_empty())
            .collect();
        if !lines.is_empty() {
            paragraphs.push(lines.join("\n"));
        }
    }
    paragraphs.join("\n\n")
}

/// Number of blank-line separated paragraphs in already-cleaned text.
pub fn paragraph_count(cleaned: &str) -> usize {
    if cleaned.is_empty() {
        0
    } else {
        cleaned.split("\n\n").count()
    }
}

fn is_blank(line: &str) -> bool {
    line.chars().all(is_hspace)
}

fn is_hspace(c: char) -> bool {
    c == ' ' || c == '\t'
}

fn split_paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.split('\n') {
        if is_blank(line) {
            if !cur.is_empty() {
                out.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        out.push(cur.join("\n"));
    }
    out
}

fn normalize_line(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut pending_space = false;
    for c in line.trim_matches(is_hspace).chars() {
        if is_hspace(c) {
            pending_space = true;
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(c);
        }
    }
    out
}

/// Strip markup until nothing more can be removed. Removing one construct
/// can expose another (`<<b>i>`), so a single pass is not idempotent.
fn strip_markup(text: &str) -> String {
    let mut cur = text.to_string();
    loop {
        let next = strip_links(&strip_tags(&strip_templates(&cur)));
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

/// Drop balanced `{{ ... }}` templates whole, including nested ones.
/// Unbalanced openers are left as text.
fn strip_templates(text: &str) -> String {
    let b = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut copied = 0;
    while i + 1 < b.len() {
        if b[i] == b'{' && b[i + 1] == b'{' {
            if let Some(end) = template_end(b, i) {
                out.push_str(&text[copied..i]);
                i = end;
                copied = end;
                continue;
            }
        }
        i += 1;
    }
    out.push_str(&text[copied..]);
    out
}

fn template_end(b: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut i = start;
    while i + 1 < b.len() {
        if b[i] == b'{' && b[i + 1] == b'{' {
            depth += 1;
            i += 2;
        } else if b[i] == b'}' && b[i + 1] == b'}' {
            depth -= 1;
            i += 2;
            if depth == 0 {
                return Some(i);
            }
        } else {
            i += 1;
        }
    }
    None
}

/// Remove `<tag ...>`, `</tag>`, `<!...>` markup keeping text between tags.
/// A `<` not followed by a letter, `/` or `!` is ordinary text.
fn strip_tags(text: &str) -> String {
    let b = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    let mut copied = 0;
    while i < b.len() {
        if b[i] == b'<' && i + 1 < b.len() {
            let next = b[i + 1];
            if next.is_ascii_alphabetic() || next == b'/' || next == b'!' {
                let end = if text[i..].starts_with("<!--") {
                    text[i + 4..].find("-->").map(|p| i + 4 + p + 3)
                } else {
                    b[i + 1..]
                        .iter()
                        .position(|&c| c == b'>' || c == b'<')
                        .filter(|&p| b[i + 1 + p] == b'>')
                        .map(|p| i + 1 + p + 1)
                };
                if let Some(end) = end {
                    out.push_str(&text[copied..i]);
                    i = end;
                    copied = end;
                    continue;
                }
            }
        }
        i += 1;
    }
    out.push_str(&text[copied..]);
    out
}

/// Unwrap `[[target|label]]` to `label` and `[[target]]` to `target`;
/// namespace links (categories, files) are dropped.
fn strip_links(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find("[[") {
        let after = &rest[open + 2..];
        let Some(close) = after.find("]]") else { break };
        let inner = &after[..close];
        if inner.contains("[[") {
            // Nested opener: emit up to the inner one and retry from there.
            let skip = open + 2 + inner.find("[[").unwrap_or(0);
            out.push_str(&rest[..skip]);
            rest = &rest[skip..];
            continue;
        }
        out.push_str(&rest[..open]);
        let lower = inner.to_lowercase();
        if !DROPPED_LINK_PREFIXES.iter().any(|p| lower.starts_with(p)) {
            out.push_str(inner.rsplit('|').next().unwrap_or(inner));
        }
        rest = &after[close + 2..];
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn strips_bom() {
        assert_eq!(clean_text("\u{FEFF}Bonjour"), "Bonjour");
    }

    #[test]
    fn strips_tags_keeps_inner_text() {
        assert_eq!(clean_text("<p>All\u{f4}</p>"), "All\u{f4}");
        assert_eq!(
            clean_text("<a href=\"x\">lien</a> et <b>gras</b>"),
            "lien et gras"
        );
        assert_eq!(clean_text("a <!-- note --> b"), "a b");
    }

    #[test]
    fn collapses_spaces() {
        assert_eq!(clean_text("a\u{20}\u{20}b"), "a b");
        assert_eq!(clean_text("  a \t b  "), "a b");
    }

    #[test]
    fn comparison_signs_survive() {
        assert_eq!(clean_text("3 < 4 et 5 > 2"), "3 < 4 et 5 > 2");
    }

    #[test]
    fn wiki_templates_and_links() {
        assert_eq!(
            clean_text("Québec {{Infobox|pop={{n|8}}}} est [[Canada|au Canada]]."),
            "Québec est au Canada."
        );
        assert_eq!(clean_text("Voir [[Montréal]][[Catégorie:Ville]]"), "Voir Montréal");
        assert_eq!(clean_text("{{ouvert sans fin"), "{{ouvert sans fin");
    }

    #[test]
    fn paragraphs_survive_and_blank_runs_collapse() {
        let raw = "\n\nligne un\n  ligne deux  \n\n\n\n  \nautre para\n\n";
        let out = clean_text(raw);
        assert_eq!(out, "ligne un\nligne deux\n\nautre para");
        assert_eq!(paragraph_count(&out), 2);
    }

    #[test]
    fn markup_only_lines_do_not_split_paragraphs() {
        assert_eq!(clean_text("a\n<br>\nb"), "a\nb");
    }

    #[test]
    fn nested_markup_reaches_fixpoint() {
        assert_eq!(clean_text("<<b>i>x"), "x");
    }

    #[test]
    fn crlf_normalized() {
        assert_eq!(clean_text("a\r\nb\r\n\r\nc"), "a\nb\n\nc");
    }

    #[test]
    fn invalid_utf8_reports_position() {
        let err = clean_bytes(b"abc\xffdef").unwrap_err();
        assert!(matches!(err, Error::InvalidUtf8 { position: 3 }));
    }

    fn word_chars(s: &str) -> String {
        s.chars()
            .filter(|c| c.is_alphanumeric() || *c == '\'' || *c == '’')
            .collect()
    }

    proptest! {
        #[test]
        fn idempotent(s in "[ a-zé'<>/{}\\[\\]|!\\-\t\n\u{FEFF}]{0,80}") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once);
        }

        #[test]
        fn idempotent_any_unicode(s in any::<String>()) {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once);
        }

        #[test]
        fn word_characters_preserved(s in "[ a-zA-Zàéèêçô0-9'’.,!?\t\n\u{FEFF}-]{0,120}") {
            prop_assert_eq!(word_chars(&clean_text(&s)), word_chars(&s));
        }

        #[test]
        fn output_invariants(s in any::<String>()) {
            let out = clean_text(&s);
            prop_assert!(!out.contains(BOM));
            prop_assert!(!out.contains("  "));
            prop_assert!(!out.contains("\n\n\n"));
            for line in out.split('\n') {
                prop_assert_eq!(line, line.trim_matches(|c| c == ' ' || c == '\t'));
            }
        }
    }
}
