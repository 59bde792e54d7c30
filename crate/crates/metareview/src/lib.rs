//! Turn a pile of reviews about one entity — a paper, a hotel, a pair of
//! shoes — into a single grounded meta-review.
//!
//! The engine decomposes the job into three traceable stages instead of one
//! opaque prompt:
//!
//! 1. **Aspect identification** — for every (aspect, review) pair, extract
//!    the fragments of the review that talk about that aspect.
//! 2. **Opinion consolidation** — summarize each aspect's fragment cluster
//!    into one short paragraph.
//! 3. **Meta-review synthesis** — fuse the aspect summaries into the final
//!    text.
//!
//! Every intermediate artifact is recorded in a [`pipeline::RunTrace`]:
//! fragments carry character spans back into their source review, clusters
//! carry digests, and every model call carries a prompt digest. Ablations
//! ([`pipeline::StagePlan`]) skip identification or consolidation, and
//! [`baselines`] provides three single- or two-phase alternatives for
//! comparison. [`eval`] scores outputs (aspect coverage, ROUGE, fragment
//! overlap, judge-based faithfulness, an AlignScore client) and aggregates
//! runs.
//!
//! Model access goes through the [`backend::Backend`] trait: a
//! deterministic offline [`backend::mock::MockBackend`], a retrying
//! [`backend::remote::RemoteBackend`] for OpenAI-style chat-completion
//! servers, and a content-addressed [`backend::cache::CachedBackend`] that
//! makes any run replayable and idempotent.
//!
//! # Example: a full offline run
//!
//! ```
//! use metareview::backend::mock::MockBackend;
//! use metareview::corpus::{DomainConfig, Entity, Review};
//! use metareview::pipeline::{run_pipeline, Grounding, PipelineConfig};
//! use metareview::prompts::TemplateRegistry;
//!
//! let domain = DomainConfig::from_json(r#"{
//!     "domain_id": "scientific",
//!     "entity_noun": "paper",
//!     "identification_style": "zero_shot",
//!     "consolidation_style": "zero_shot",
//!     "aspects": [
//!         {"aspect_id": "clarity", "name": "Clarity",
//!          "definition": "Whether the text is well written and organized."},
//!         {"aspect_id": "novelty", "name": "Novelty",
//!          "definition": "Whether the idea is original."}
//!     ]
//! }"#).unwrap();
//!
//! let entity = Entity {
//!     entity_id: "paper-1".into(),
//!     domain_id: "scientific".into(),
//!     reviews: vec![
//!         Review { review_id: "r1".into(),
//!                  text: "The writing is clear. The idea is novel.".into() },
//!         Review { review_id: "r2".into(),
//!                  text: "Sections three and four are unclear.".into() },
//!     ],
//!     reference_meta_review: None,
//!     gold_fragments: None,
//! };
//!
//! // The mock backend answers identification prompts by returning source
//! // sentences that contain an aspect's keywords, so the whole run is a
//! // pure function of its inputs.
//! let mut backend = MockBackend::new();
//! backend.register_keywords("clarity", ["clear", "unclear", "writing"]);
//! backend.register_keywords("novelty", ["novel", "original"]);
//!
//! let registry = TemplateRegistry::builtin();
//! let config = PipelineConfig { runs: 1, ..PipelineConfig::default() };
//! let runs = run_pipeline(&backend, &registry, &domain, &entity, &config).unwrap();
//!
//! let trace = &runs[0].trace;
//! let clusters = trace.clusters.as_ref().unwrap();
//! assert_eq!(clusters.len(), 2);
//! // every extracted fragment is located verbatim in its source review
//! assert!(clusters.iter().flat_map(|c| &c.fragments)
//!     .all(|f| f.grounding == Grounding::Exact));
//! assert!(runs[0].meta_review.text.contains("novel"));
//! ```
//!
//! The `metareview` binary wraps the same pieces: `run` writes meta-reviews
//! plus traces and a replayable manifest, `evaluate` scores a finished run
//! directory, `trace` renders one trace as Markdown, `compare` tabulates
//! several evaluated runs side by side, and `purge-cache` empties a
//! completion cache. See the `book/` guide for a tour.

pub mod backend;
pub mod baselines;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod fanout;
pub mod pipeline;
pub mod prompts;

pub use backend::{Backend, BackendError, GenerationParams};
pub use corpus::{load_corpus, Corpus, DomainConfig, Entity, Review};
pub use pipeline::{run_pipeline, MetaReview, PipelineConfig, PipelineError, PipelineRun};
pub use prompts::TemplateRegistry;

// The book's code blocks run as doc-tests, so the guide cannot drift from
// the API it describes.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
