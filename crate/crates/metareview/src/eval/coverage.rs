//! Aspect coverage: does the meta-review discuss the aspects the source
//! reviews discuss?
//!
//! Both aspect sets are recognized automatically by running the aspect
//! identification stage over the text in question — the meta-review on one
//! side, every source review on the other. The score is the F1 (Dice
//! overlap) of the two sets, so it needs no reference meta-review and no
//! human annotation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, GenerationParams};
use crate::corpus::{DomainConfig, Entity};
use crate::pipeline::{extract_fragments, parse_fragment_output};
use crate::prompts::{assemble_aspect_id_prompt, TemplateRegistry};

use super::EvalError;

/// Aspects detected in some text, with the fragments that evidenced each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectSet {
    pub domain_id: String,
    pub aspects: BTreeSet<String>,
    pub evidence: BTreeMap<String, Vec<String>>,
}

impl AspectSet {
    /// Builds a set without evidence — mostly for tests and fixtures.
    pub fn from_ids<I, S>(domain_id: &str, ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        AspectSet {
            domain_id: domain_id.to_string(),
            aspects: ids.into_iter().map(Into::into).collect(),
            evidence: BTreeMap::new(),
        }
    }
}

/// Runs identification once per aspect over a single text (e.g. a generated
/// meta-review); an aspect is present when any fragment comes back.
pub fn detect_aspects_in_text(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    text: &str,
    params: &GenerationParams,
    run_index: u32,
) -> Result<AspectSet, EvalError> {
    let mut aspects = BTreeSet::new();
    let mut evidence = BTreeMap::new();
    for aspect in &domain.aspects {
        let prompt = assemble_aspect_id_prompt(registry, domain, aspect, text)?;
        let completion = params.enforce_truncation(backend.complete(&params.request(&prompt, run_index))?)?;
        let fragments = parse_fragment_output(&completion.text);
        if !fragments.is_empty() {
            aspects.insert(aspect.aspect_id.clone());
            evidence.insert(aspect.aspect_id.clone(), fragments);
        }
    }
    Ok(AspectSet {
        domain_id: domain.domain_id.clone(),
        aspects,
        evidence,
    })
}

/// Aspect set of the source side: an aspect is present when identification
/// finds fragments for it in any review. Reuses the pipeline's extraction,
/// so when the generation itself ran identification these calls are cache
/// hits, not new model traffic.
pub fn detect_aspects_in_reviews(
    backend: &dyn Backend,
    registry: &TemplateRegistry,
    domain: &DomainConfig,
    entity: &Entity,
    params: &GenerationParams,
    run_index: u32,
    concurrency: usize,
) -> Result<AspectSet, EvalError> {
    let (clusters, _) = extract_fragments(
        backend,
        registry,
        domain,
        entity,
        params,
        run_index,
        concurrency,
        false,
    )?;
    let mut aspects = BTreeSet::new();
    let mut evidence = BTreeMap::new();
    for cluster in clusters {
        if !cluster.fragments.is_empty() {
            aspects.insert(cluster.aspect_id.clone());
            evidence.insert(
                cluster.aspect_id,
                cluster.fragments.into_iter().map(|f| f.text).collect(),
            );
        }
    }
    Ok(AspectSet {
        domain_id: domain.domain_id.clone(),
        aspects,
        evidence,
    })
}

/// F1 between two aspect sets: `2|A∩B| / (|A| + |B|)`. Two empty sets agree
/// perfectly (1.0); sets from different domains cannot be compared.
pub fn coverage_f1(generated: &AspectSet, source: &AspectSet) -> Result<f64, EvalError> {
    if generated.domain_id != source.domain_id {
        return Err(EvalError::DomainMismatch {
            a: generated.domain_id.clone(),
            b: source.domain_id.clone(),
        });
    }
    let total = generated.aspects.len() + source.aspects.len();
    if total == 0 {
        return Ok(1.0);
    }
    let shared = generated.aspects.intersection(&source.aspects).count();
    Ok(2.0 * shared as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_anchor() {
        // {a,b,c} vs {b,c,d}: shared 2, 2*2/(3+3) = 0.6667.
        let left = AspectSet::from_ids("d", ["a", "b", "c"]);
        let right = AspectSet::from_ids("d", ["b", "c", "d"]);
        assert!((coverage_f1(&left, &right).unwrap() - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn empty_set_edge_cases() {
        let empty = AspectSet::from_ids("d", Vec::<String>::new());
        let full = AspectSet::from_ids("d", ["a"]);
        assert_eq!(coverage_f1(&empty, &empty).unwrap(), 1.0);
        assert_eq!(coverage_f1(&empty, &full).unwrap(), 0.0);
        assert_eq!(coverage_f1(&full, &empty).unwrap(), 0.0);
    }

    #[test]
    fn cross_domain_comparison_is_rejected() {
        let a = AspectSet::from_ids("hotels", ["service"]);
        let b = AspectSet::from_ids("shoes", ["service"]);
        assert!(matches!(
            coverage_f1(&a, &b),
            Err(EvalError::DomainMismatch { .. })
        ));
    }

    proptest! {
        /// Coverage is symmetric, bounded to [0,1], and 1.0 exactly on
        /// identical sets.
        #[test]
        fn coverage_is_a_symmetric_overlap(
            left in proptest::collection::btree_set("[a-e]", 0..5),
            right in proptest::collection::btree_set("[a-e]", 0..5),
        ) {
            let a = AspectSet::from_ids("d", left.clone());
            let b = AspectSet::from_ids("d", right);
            let ab = coverage_f1(&a, &b).unwrap();
            let ba = coverage_f1(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            let aa = coverage_f1(&a, &a).unwrap();
            prop_assert!((aa - 1.0).abs() < 1e-12);
        }
    }
}
