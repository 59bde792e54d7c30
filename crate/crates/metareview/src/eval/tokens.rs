//! Shared tokenizer for the text-overlap metrics.

use rust_stemmers::{Algorithm, Stemmer};

/// Lowercased word tokens: maximal alphanumeric runs, everything else a
/// separator. With `stem`, each token is reduced by a Porter-family English
/// stemmer so inflection differences ("cushioned" / "cushioning") collapse.
pub fn tokenize(text: &str, stem: bool) -> Vec<String> {
    let stemmer = stem.then(|| Stemmer::create(Algorithm::English));
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let lower = w.to_lowercase();
            match &stemmer {
                Some(s) => s.stem(&lower).into_owned(),
                None => lower,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_non_alphanumeric_runs_and_lowercases() {
        assert_eq!(
            tokenize("Don't stop-me now!", false),
            vec!["don", "t", "stop", "me", "now"]
        );
        assert_eq!(tokenize("", false), Vec::<String>::new());
        assert_eq!(tokenize("3.5 stars", false), vec!["3", "5", "stars"]);
    }

    #[test]
    fn stemming_collapses_inflections() {
        assert_eq!(tokenize("running runs", true), vec!["run", "run"]);
        assert_ne!(tokenize("running runs", false)[0], "run");
    }
}
