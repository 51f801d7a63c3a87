pub mod canonical;
pub mod cli;
pub mod config;
pub mod decimal;
pub mod dedup;
pub mod engine;
pub mod evaluator;
pub mod evidence;
pub mod gateway;
pub mod prompts;
pub mod sanitizer;
pub mod simdex;
pub mod types;
pub mod wikitext;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/canonical-keys.md")]
    mod canonical_keys {}
    #[doc = include_str!("../../../book/src/funnel.md")]
    mod funnel {}
    #[doc = include_str!("../../../book/src/dedup-guarantee.md")]
    mod dedup_guarantee {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/similarity.md")]
    mod similarity {}
    #[doc = include_str!("../../../book/src/evidence-scoring.md")]
    mod evidence_scoring {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
