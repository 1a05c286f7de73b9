//! Small text helpers shared across stages.

use sha2::{Digest, Sha256};

/// Collapses every whitespace run to a single space and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalization used for verbatim checks: whitespace runs collapse,
/// typographic quotes, dashes and ellipses fold to ASCII.
pub fn normalize_for_match(text: &str) -> String {
    let folded: String = text
        .chars()
        .map(|c| match c {
            '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{2032}' => '\'',
            '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{2033}' => '"',
            '\u{2010}' | '\u{2011}' | '\u{2012}' | '\u{2013}' | '\u{2014}' => '-',
            '\u{00A0}' | '\u{2007}' | '\u{202F}' => ' ',
            other => other,
        })
        .collect();
    normalize_whitespace(&folded.replace('\u{2026}', "..."))
}

/// True when `excerpt`, normalized, is a contiguous substring of `source`.
/// Empty excerpts never pass.
pub fn is_verbatim(excerpt: &str, source: &str) -> bool {
    let needle = normalize_for_match(excerpt);
    !needle.is_empty() && normalize_for_match(source).contains(&needle)
}

/// Same check against a pre-normalized haystack.
pub fn is_verbatim_in(excerpt: &str, normalized_source: &str) -> bool {
    let needle = normalize_for_match(excerpt);
    !needle.is_empty() && normalized_source.contains(&needle)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rough token estimate (four characters per token).
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verbatim_ignores_whitespace_and_quote_style() {
        let src = "We  collect your\n email address when you register.\nWe don\u{2019}t sell it.";
        assert!(is_verbatim("collect your email address", src));
        assert!(is_verbatim("We don't sell it.", src));
        assert!(!is_verbatim("We collect your phone number", src));
        assert!(!is_verbatim("   ", src));
    }

    #[test]
    fn token_estimate() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcde"), 2);
    }
}
