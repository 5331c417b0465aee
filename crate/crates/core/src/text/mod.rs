//! Tokenization, vocabularies and keyword sets.

mod keywords;
mod vocab;

pub use keywords::{KeywordId, KeywordSet, KeywordVocab};
pub use vocab::{decode_ids, encode_report, TokenId, Vocabulary, BOS, EOS, PAD, UNK};

/// Lowercases, splits on whitespace and detaches ASCII punctuation into
/// standalone tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Escapes backslash, tab, CR and LF so the text fits one tab-separated field.
pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

/// Inverse of [`escape_field`]; `None` on a dangling or unknown escape.
pub fn unescape_field(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        out.push(match chars.next()? {
            '\\' => '\\',
            't' => '\t',
            'n' => '\n',
            'r' => '\r',
            _ => return None,
        });
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn escaping_round_trips(s in ".*") {
            let e = escape_field(&s);
            prop_assert!(!e.contains('\t') && !e.contains('\n'));
            prop_assert_eq!(unescape_field(&e), Some(s));
        }
    }

    #[test]
    fn bad_escapes_are_rejected() {
        assert_eq!(unescape_field("a\\q"), None);
        assert_eq!(unescape_field("a\\"), None);
        assert_eq!(unescape_field("a\\tb").as_deref(), Some("a\tb"));
    }

    #[test]
    fn punctuation_is_detached() {
        assert_eq!(
            tokenize("Macular edema, both eyes."),
            ["macular", "edema", ",", "both", "eyes", "."]
        );
    }

    #[test]
    fn empty_and_whitespace_runs() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t\n").is_empty());
        assert_eq!(tokenize("A  b"), ["a", "b"]);
    }

    #[test]
    fn reserved_spellings_are_split() {
        let toks = tokenize("<pad> <BOS>");
        assert!(!toks.iter().any(|t| t.starts_with('<') && t.len() > 1));
    }
}
