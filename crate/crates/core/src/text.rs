//! The text equivalence used for dedup, pair matching and encoding.

use unicode_normalization::UnicodeNormalization;

/// Unicode NFC, trimmed, with every internal whitespace run collapsed to a
/// single ASCII space.
pub fn normalize_text(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    let mut out = String::with_capacity(nfc.len());
    for word in nfc.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Equality under [`normalize_text`].
pub fn same_text(a: &str, b: &str) -> bool {
    normalize_text(a) == normalize_text(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapses_and_trims() {
        assert_eq!(normalize_text("  Hello \t\n world  "), "Hello world");
        assert_eq!(normalize_text("   "), "");
    }

    #[test]
    fn composes_to_nfc() {
        // "e" + combining acute vs precomposed "é".
        assert!(same_text("caf\u{0065}\u{0301}", "caf\u{00e9}"));
    }

    #[test]
    fn case_is_significant() {
        assert!(!same_text("Hello", "hello"));
    }
}
