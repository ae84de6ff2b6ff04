//! Text normalization rules.

use unicode_normalization::UnicodeNormalization;

/// NFC, trimmed, with internal whitespace runs collapsed to one space.
///
/// This is the cache-key and wire canonical form.
pub fn canonical_input(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Deduplication key for generated candidates: [`canonical_input`], lowercased,
/// with terminal punctuation removed.
pub fn candidate_key(text: &str) -> String {
    let lowered = canonical_input(text).to_lowercase();
    lowered
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c) || c.is_whitespace())
        .to_string()
}

/// Token sequence used by the overlap statistics.
pub fn tokens(text: &str) -> Vec<String> {
    let nfc: String = text.nfc().collect();
    nfc.to_lowercase()
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c)))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2018}'..='\u{201F}' | '\u{2026}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}' | '\u{00A1}' | '\u{2013}' | '\u{2014}'
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_collapses_whitespace() {
        assert_eq!(canonical_input("a  b"), canonical_input("a b"));
        assert_eq!(canonical_input("  a\t\nb  "), "a b");
    }

    #[test]
    fn canonical_is_nfc() {
        // "e" + combining acute vs precomposed
        assert_eq!(canonical_input("caf\u{0065}\u{0301}"), "caf\u{00e9}");
    }

    #[test]
    fn candidate_key_ignores_case_and_final_punct() {
        assert_eq!(candidate_key("The man sleeps."), candidate_key("the man  sleeps"));
        assert_eq!(candidate_key("Really?!"), "really");
        assert_ne!(candidate_key("a.b"), candidate_key("ab"));
    }

    #[test]
    fn tokens_strip_edges() {
        assert_eq!(tokens("The cat, \"sat\"."), vec!["the", "cat", "sat"]);
        assert_eq!(tokens("don't -- stop"), vec!["don't", "stop"]);
    }
}
