//! Canonical keys for entity names.
//!
//! A key is built by compatibility normalization (NFKC), full Unicode case
//! folding, replacing every punctuation character with a space, collapsing
//! whitespace runs and trimming. Two surface forms that reduce to the same
//! key are treated as the same subject everywhere in the engine.
//!
//! ```
//! use corpusforge::canonical::canonicalize;
//! assert_eq!(canonicalize("John F. Kennedy"), "john f kennedy");
//! assert_eq!(canonicalize("F.Kennedy"), "f kennedy");
//! ```

use thiserror::Error;
use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CanonicalError {
    #[error("name {0:?} has no characters left after canonicalization")]
    Empty(String),
}

// Case folding can leave a string that NFKC would rewrite again (and the
// reverse), so the pipeline is iterated to a fixed point. Real inputs settle
// after one pass; the bound only guards pathological sequences.
const MAX_PASSES: usize = 4;

/// Returns the canonical key of `name`. The result may be empty.
pub fn canonicalize(name: &str) -> String {
    let mut current = single_pass(name);
    for _ in 1..MAX_PASSES {
        let next = single_pass(&current);
        if next == current {
            break;
        }
        current = next;
    }
    current
}

/// Like [`canonicalize`] but rejects names with an empty key.
pub fn canonical_key(name: &str) -> Result<String, CanonicalError> {
    let key = canonicalize(name);
    if key.is_empty() {
        Err(CanonicalError::Empty(name.to_string()))
    } else {
        Ok(key)
    }
}

fn single_pass(input: &str) -> String {
    let normalized: String = input.nfkc().collect();
    let folded = caseless::default_case_fold_str(&normalized);
    let spaced: String = folded
        .chars()
        .map(|c| if is_punctuation(c) { ' ' } else { c })
        .collect();
    let mut out = String::with_capacity(spaced.len());
    for word in spaced.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

fn is_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}
