use crossanno::agreement::agreement_report;
use crossanno::evaluation::evaluate_with;
use crossanno::merge::merge_pair;
use crossanno::sampling::{score_pool, UncertaintyMethod};
use crossanno::synth::{self, Rng};
use crossanno::tokenize::Tokenization;
use crossanno::{AnnotationSet, Author, Execution, LabelScheme};

#[test]
fn sequential_and_parallel_results_match() {
    let scheme = LabelScheme::new(1, ["SKILL", "TITLE", "PLACE"]).unwrap();
    let docs = synth::corpus(300, &scheme, 4);
    let tokens = Tokenization::from_documents(docs.iter().map(|d| &d.document));
    let mut rng = Rng::new(4);
    let gold: Vec<AnnotationSet> = docs
        .iter()
        .map(|d| AnnotationSet::new(d.document.id(), Author::Gold, 1, d.spans.clone()).unwrap())
        .collect();
    let a: Vec<_> = docs.iter().map(|d| synth::annotate(d, "a", &scheme, 0.4, &mut rng)).collect();
    let b: Vec<_> = docs.iter().map(|d| synth::annotate(d, "b", &scheme, 0.4, &mut rng)).collect();
    let probs: Vec<_> = docs
        .iter()
        .map(|d| synth::predictions(&d.document, &d.spans, &scheme, 0.4 + 0.5 * rng.unit()))
        .collect();
    let pairs: Vec<_> = a.iter().zip(&b).collect();

    let seq = Execution::Sequential;
    let par = Execution::Parallel;
    assert_eq!(
        evaluate_with(&gold, &a, &scheme, &tokens, seq).unwrap(),
        evaluate_with(&gold, &a, &scheme, &tokens, par).unwrap()
    );
    assert_eq!(
        seq.try_map(&pairs, |(x, y)| merge_pair(x, y)).unwrap(),
        par.try_map(&pairs, |(x, y)| merge_pair(x, y)).unwrap()
    );
    for m in [UncertaintyMethod::LeastConfidence, UncertaintyMethod::Margin, UncertaintyMethod::Entropy] {
        assert_eq!(score_pool(&probs, m, seq).unwrap(), score_pool(&probs, m, par).unwrap());
    }
    assert_eq!(
        agreement_report(&a, &b, &tokens, seq).unwrap(),
        agreement_report(&a, &b, &tokens, par).unwrap()
    );
}

#[test]
fn default_mode_follows_the_feature() {
    let expected = if cfg!(feature = "parallel") { Execution::Parallel } else { Execution::Sequential };
    assert_eq!(Execution::default(), expected);
}
