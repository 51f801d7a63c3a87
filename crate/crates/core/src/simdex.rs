//! Similarity between generated articles and reference texts.
//!
//! TF-IDF weighting is fixed: raw term counts, `idf = ln((1 + D) / (1 + df)) + 1`
//! over the comparison corpus, L2-normalized vectors. N-gram overlap is the
//! Jaccard index of n-gram sets, not containment.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::canonicalize;
use crate::gateway::{cosine, Gateway, GatewayError};
use crate::wikitext;

pub const WEIGHTING: &str = "tf = raw count; idf = ln((1 + D) / (1 + df)) + 1; L2-normalized";
pub const NGRAM_DEFINITION: &str = "Jaccard index of n-gram sets";

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("cannot embed an empty document")]
    EmptyDocument,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("subjects do not line up: {only_a} only in the first corpus, {only_b} only in the second")]
    Misaligned { only_a: usize, only_b: usize, titles_a: Vec<String>, titles_b: Vec<String> },
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("{0}: {1}")]
    Parse(String, String),
}

/// Markup stripped, case-folded, split on anything that is not a letter or
/// digit.
pub fn tokenize(text: &str) -> Vec<String> {
    let plain = wikitext::strip_markup(text);
    let folded = caseless::default_case_fold_str(&plain);
    folded.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// Document frequencies over a fixed corpus.
#[derive(Clone, Debug, Default)]
pub struct DocumentFrequencies {
    docs: usize,
    df: HashMap<String, usize>,
}

impl DocumentFrequencies {
    pub fn new<'a>(corpus: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut out = DocumentFrequencies::default();
        for doc in corpus {
            out.docs += 1;
            let unique: HashSet<&String> = doc.iter().collect();
            for t in unique {
                *out.df.entry(t.clone()).or_default() += 1;
            }
        }
        out
    }

    pub fn idf(&self, term: &str) -> f64 {
        let df = self.df.get(term).copied().unwrap_or(0);
        ((1 + self.docs) as f64 / (1 + df) as f64).ln() + 1.0
    }

    fn vector<'a>(&self, tokens: &'a [String]) -> HashMap<&'a str, f64> {
        let mut counts: HashMap<&str, f64> = HashMap::new();
        for t in tokens {
            *counts.entry(t.as_str()).or_default() += 1.0;
        }
        for (t, w) in counts.iter_mut() {
            *w *= self.idf(t);
        }
        let norm = counts.values().map(|w| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.values_mut().for_each(|w| *w /= norm);
        }
        counts
    }
}

/// Cosine of TF-IDF vectors. 0 when either document is empty.
pub fn tfidf_cosine(a: &[String], b: &[String], df: &DocumentFrequencies) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (va, vb) = (df.vector(a), df.vector(b));
    let (small, large) = if va.len() <= vb.len() { (&va, &vb) } else { (&vb, &va) };
    let dot: f64 = small.iter().filter_map(|(t, w)| large.get(t).map(|x| w * x)).sum();
    dot.clamp(0.0, 1.0)
}

fn set_jaccard<T: Eq + std::hash::Hash>(a: &HashSet<T>, b: &HashSet<T>) -> Ratio<u64> {
    let union = a.union(b).count() as u64;
    if union == 0 {
        return Ratio::from_integer(1);
    }
    Ratio::new(a.intersection(b).count() as u64, union)
}

/// Token-set Jaccard. 1 when both are empty.
pub fn jaccard(a: &[String], b: &[String]) -> Ratio<u64> {
    set_jaccard(&a.iter().collect(), &b.iter().collect())
}

pub fn ngrams(tokens: &[String], n: usize) -> HashSet<&[String]> {
    if n == 0 || tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).collect()
}

/// Jaccard over n-gram sets.
pub fn ngram_overlap(a: &[String], b: &[String], n: usize) -> Ratio<u64> {
    set_jaccard(&ngrams(a, n), &ngrams(b, n))
}

/// Cosine of whole-document embeddings.
pub fn semantic_cosine(gateway: &Gateway, a: &str, b: &str) -> Result<f64, SimilarityError> {
    if a.trim().is_empty() || b.trim().is_empty() {
        return Err(SimilarityError::EmptyDocument);
    }
    let limit = gateway.backend().max_embed_chars();
    for doc in [a, b] {
        let len = doc.chars().count();
        if len > limit {
            log::info!("document of {len} characters truncated to {limit} for embedding");
        }
    }
    let v = gateway.embed(&[a.to_string(), b.to_string()])?;
    Ok(cosine(&v[0], &v[1]))
}

/// One titled text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub title: String,
    pub tfidf_cosine: f64,
    pub jaccard: Ratio<u64>,
    pub ngram_overlap: BTreeMap<u8, Ratio<u64>>,
    pub semantic_cosine: Option<f64>,
    pub word_counts: (u64, u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub pairs: usize,
    pub tfidf_weighting: String,
    pub ngram_definition: String,
    pub df_corpus: String,
    pub mean_tfidf_cosine: f64,
    pub mean_jaccard: f64,
    pub mean_ngram_overlap: BTreeMap<u8, f64>,
    pub mean_semantic_cosine: Option<f64>,
    pub mean_words: (f64, f64),
    pub median_words: (f64, f64),
}

/// Pairs documents by canonical title. Fails with both difference lists
/// when the title sets differ.
pub fn align(a: &[Document], b: &[Document]) -> Result<Vec<(Document, Document)>, SimilarityError> {
    let index = |docs: &[Document]| -> BTreeMap<String, Document> {
        docs.iter().map(|d| (canonicalize(&d.title), d.clone())).collect()
    };
    let (ia, ib) = (index(a), index(b));
    let ka: BTreeSet<&String> = ia.keys().collect();
    let kb: BTreeSet<&String> = ib.keys().collect();
    if ka != kb {
        let titles_a: Vec<String> = ka.difference(&kb).map(|k| ia[*k].title.clone()).collect();
        let titles_b: Vec<String> = kb.difference(&ka).map(|k| ib[*k].title.clone()).collect();
        return Err(SimilarityError::Misaligned { only_a: titles_a.len(), only_b: titles_b.len(), titles_a, titles_b });
    }
    Ok(ia.into_iter().map(|(k, da)| (da, ib[&k].clone())).collect())
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

fn ratio_f64(r: &Ratio<u64>) -> f64 {
    r.to_f64().unwrap_or(0.0)
}

/// Compares aligned pairs. Document frequencies come from every text on
/// both sides. Semantic cosine is computed when a gateway is given.
pub fn compare(
    pairs: &[(Document, Document)],
    gateway: Option<&Gateway>,
) -> Result<(Vec<SimilarityReport>, SimilaritySummary), SimilarityError> {
    let tokens: Vec<(Vec<String>, Vec<String>)> =
        pairs.iter().map(|(a, b)| (tokenize(&a.text), tokenize(&b.text))).collect();
    let df = DocumentFrequencies::new(tokens.iter().flat_map(|(a, b)| [a.as_slice(), b.as_slice()]));
    let mut reports = Vec::with_capacity(pairs.len());
    for ((a, b), (ta, tb)) in pairs.iter().zip(&tokens) {
        let semantic = match gateway {
            Some(g) => Some(semantic_cosine(g, &wikitext::strip_markup(&a.text), &wikitext::strip_markup(&b.text))?),
            None => None,
        };
        reports.push(SimilarityReport {
            title: a.title.clone(),
            tfidf_cosine: tfidf_cosine(ta, tb, &df),
            jaccard: jaccard(ta, tb),
            ngram_overlap: (1..=3u8).map(|n| (n, ngram_overlap(ta, tb, n as usize))).collect(),
            semantic_cosine: semantic,
            word_counts: (wikitext::word_count(&a.text), wikitext::word_count(&b.text)),
        });
    }
    let col = |f: &dyn Fn(&SimilarityReport) -> f64| reports.iter().map(f).collect::<Vec<f64>>();
    let words_a = col(&|r| r.word_counts.0 as f64);
    let words_b = col(&|r| r.word_counts.1 as f64);
    let summary = SimilaritySummary {
        pairs: reports.len(),
        tfidf_weighting: WEIGHTING.to_string(),
        ngram_definition: NGRAM_DEFINITION.to_string(),
        df_corpus: "all texts from both sides of the comparison".to_string(),
        mean_tfidf_cosine: mean(&col(&|r| r.tfidf_cosine)),
        mean_jaccard: mean(&col(&|r| ratio_f64(&r.jaccard))),
        mean_ngram_overlap: (1..=3u8).map(|n| (n, mean(&col(&|r| ratio_f64(&r.ngram_overlap[&n]))))).collect(),
        mean_semantic_cosine: gateway.map(|_| mean(&col(&|r| r.semantic_cosine.unwrap_or(0.0)))),
        mean_words: (mean(&words_a), mean(&words_b)),
        median_words: (median(&words_a), median(&words_b)),
    };
    Ok((reports, summary))
}

/// Writes `similarity.jsonl` and `similarity_summary.json`.
pub fn write(dir: &Path, reports: &[SimilarityReport], summary: &SimilaritySummary) -> Result<(), SimilarityError> {
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |e| SimilarityError::Io(p, e)
    };
    let mut lines = String::new();
    for r in reports {
        lines.push_str(&serde_json::to_string(r).expect("serializable"));
        lines.push('\n');
    }
    let path = dir.join("similarity.jsonl");
    std::fs::write(&path, lines).map_err(io(&path))?;
    let path = dir.join("similarity_summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(summary).expect("serializable") + "\n").map_err(io(&path))
}

/// Reads documents from a run directory (its `articles.jsonl`) or from a
/// JSONL file of `{"title", "text"}` objects.
pub fn load_documents(path: &Path) -> Result<Vec<Document>, SimilarityError> {
    if path.is_dir() {
        let articles: Vec<crate::types::Article> =
            crate::engine::store::read_jsonl(&path.join(crate::engine::store::ARTICLES_FILE))
                .map_err(|e| SimilarityError::Parse(path.display().to_string(), e.to_string()))?;
        return Ok(articles.into_iter().map(|a| Document { title: a.subject.name, text: a.wikitext }).collect());
    }
    crate::engine::store::read_jsonl(path).map_err(|e| SimilarityError::Parse(path.display().to_string(), e.to_string()))
}

/// Mean of a ratio column, kept exact.
pub fn ratio_mean(values: &[Ratio<u64>]) -> Option<Ratio<u64>> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().fold(Ratio::zero(), |acc, v| acc + v) / Ratio::from_integer(values.len() as u64))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::gateway::mock::{GraphWorld, MockBackend};
    use crate::gateway::RetryPolicy;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenizer_splits_on_non_alphanumerics() {
        assert_eq!(toks("World War II"), vec!["world", "war", "ii"]);
        assert!(toks("").is_empty());
        assert_eq!(toks("co-operate"), vec!["co", "operate"]);
        assert_eq!(toks("[[Tufts University|Tufts]] STRASSE Straße"), vec!["tufts", "strasse", "strasse"]);
    }

    /// Values from a hand computation of the declared weighting, frozen
    /// before this module was written.
    #[test]
    fn tfidf_matches_the_three_document_oracle() {
        let docs: Vec<Vec<String>> = ["the cat sat on the mat", "the dog sat on the log", "cats and dogs chase the cat"]
            .iter()
            .map(|d| toks(d))
            .collect();
        let df = DocumentFrequencies::new(docs.iter().map(Vec::as_slice));
        let expected = [(0, 1, 0.5885604803793472), (0, 2, 0.2828564744824613), (1, 2, 0.14731025891276509)];
        for (a, b, want) in expected {
            assert!((tfidf_cosine(&docs[a], &docs[b], &df) - want).abs() < 1e-9);
            assert!((tfidf_cosine(&docs[b], &docs[a], &df) - want).abs() < 1e-9);
        }
        assert!((tfidf_cosine(&docs[0], &docs[0], &df) - 1.0).abs() < 1e-9);
        assert_eq!(tfidf_cosine(&toks("alpha beta"), &toks("gamma"), &df), 0.0);
        assert_eq!(tfidf_cosine(&[], &docs[0], &df), 0.0);
    }

    #[test]
    fn set_measures() {
        assert_eq!(jaccard(&toks("a b"), &toks("b c")), Ratio::new(1, 3));
        assert_eq!(jaccard(&[], &[]), Ratio::from_integer(1));
        assert_eq!(ngram_overlap(&toks("a b"), &toks("a b c"), 3), Ratio::zero());
        assert_eq!(ngram_overlap(&toks("a b"), &toks("a b"), 3), Ratio::from_integer(1));
        assert_eq!(ngram_overlap(&toks("a b c d"), &toks("a b c e"), 2), Ratio::new(2, 4));
    }

    #[test]
    fn semantic_cosine_uses_the_gateway() {
        let g = Gateway::new(Arc::new(MockBackend::new(GraphWorld::new(), 0)), RetryPolicy::immediate(1), 2);
        assert!((semantic_cosine(&g, "Ada Lovelace", "Ada Lovelace").unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(semantic_cosine(&g, "", "x"), Err(SimilarityError::EmptyDocument)));
    }

    #[test]
    fn alignment_reports_both_sides() {
        let d = |t: &str| Document { title: t.into(), text: "x".into() };
        let err = align(&[d("A"), d("B")], &[d("a"), d("C")]).unwrap_err();
        match err {
            SimilarityError::Misaligned { titles_a, titles_b, .. } => {
                assert_eq!(titles_a, vec!["B"]);
                assert_eq!(titles_b, vec!["C"]);
            }
            other => panic!("{other}"),
        }
        assert_eq!(align(&[d("A")], &[d("a")]).unwrap().len(), 1);
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]), 0..30)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn measures_are_symmetric_and_bounded(a in words(), b in words()) {
            let df = DocumentFrequencies::new([a.as_slice(), b.as_slice()]);
            let t = tfidf_cosine(&a, &b, &df);
            prop_assert!((t - tfidf_cosine(&b, &a, &df)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&t));
            prop_assert_eq!(jaccard(&a, &b), jaccard(&b, &a));
            for n in 1..=3 {
                prop_assert_eq!(ngram_overlap(&a, &b, n), ngram_overlap(&b, &a, n));
                prop_assert!(ngram_overlap(&a, &b, n) <= Ratio::from_integer(1));
                prop_assert_eq!(ngram_overlap(&a, &a, n), Ratio::from_integer(1));
            }
        }

        #[test]
        fn out_of_vocabulary_replacement_never_raises_overlap(
            doc in prop::collection::vec(0u8..40, 200),
            slots in prop::collection::vec(0usize..200, 1..30),
        ) {
            let base: Vec<String> = doc.iter().map(|i| format!("w{i}")).collect();
            let mut current = base.clone();
            let mut last = (jaccard(&current, &base), [1, 2, 3].map(|n| ngram_overlap(&current, &base, n)));
            for (k, &s) in slots.iter().enumerate() {
                current[s] = format!("oov{k}");
                let now = (jaccard(&current, &base), [1, 2, 3].map(|n| ngram_overlap(&current, &base, n)));
                prop_assert!(now.0 <= last.0);
                for n in 0..3 {
                    prop_assert!(now.1[n] <= last.1[n]);
                }
                last = now;
            }
        }
    }
}
