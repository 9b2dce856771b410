//! Gold labels of a synthetic corpus survive every format and projection the
//! pipelines put them through.

use propspan::corpus::{emit_si_predictions, emit_tc_predictions, parse_si_labels, parse_tc_labels};
use propspan::eval::{per_class_report, si_score};
use propspan::segmenter::{
    extract_exact_spans, merge_spans, project_labels, reconstruct_spans, split, RuleTokenizer, SplitStrategy,
};
use propspan::synth::{generate, SynthConfig};
use propspan::{SiLabel, Span};

fn corpus() -> propspan::synth::SynthCorpus {
    generate(&SynthConfig {
        articles: 25,
        seed: 99,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn label_files_round_trip() {
    let c = corpus();
    assert_eq!(parse_si_labels(&emit_si_predictions(&c.si_labels)).unwrap(), c.si_labels);
    assert_eq!(parse_tc_labels(&emit_tc_predictions(&c.tc_labels)).unwrap(), c.tc_labels);
}

#[test]
fn projection_and_reconstruction_recover_gold_spans() {
    let c = corpus();
    let tok = RuleTokenizer::build(c.articles.iter().map(|a| a.text()), 2000);
    for strategy in [SplitStrategy::Paragraph, SplitStrategy::Sentence] {
        let mut predicted = Vec::new();
        for article in &c.articles {
            let gold: Vec<Span> = c
                .si_labels
                .iter()
                .filter(|l| l.article_id == article.id())
                .map(|l| l.span)
                .collect();
            let mut spans = Vec::new();
            for seg in split(article, &tok, strategy, 128) {
                assert!(seg.len() <= 128);
                let labels = project_labels(&seg, &gold);
                spans.extend(reconstruct_spans(article, &seg, &labels).unwrap());
            }
            predicted.extend(merge_spans(article, spans).into_iter().map(|span| SiLabel {
                article_id: article.id(),
                span,
            }));
        }
        let mut gold = c.si_labels.clone();
        gold.sort();
        predicted.sort();
        assert_eq!(predicted, gold, "{strategy:?}");
        assert_eq!(si_score(&predicted, &gold).f1, 1.0);
    }
}

#[test]
fn exact_spans_carry_their_text_and_technique() {
    let c = corpus();
    let mut total = 0;
    for article in &c.articles {
        let labels: Vec<_> = c.tc_labels.iter().copied().filter(|l| l.article_id == article.id()).collect();
        let samples = extract_exact_spans(article, &labels).unwrap();
        assert_eq!(samples.len(), labels.len());
        for (s, l) in samples.iter().zip(&labels) {
            assert_eq!(s.surface, article.span_text(l.span).unwrap());
            assert_eq!(s.technique, Some(l.technique));
        }
        total += samples.len();
    }
    assert_eq!(total, c.tc_labels.len());
    assert_eq!(per_class_report(&c.tc_labels, &c.tc_labels).unwrap().micro_f1, 1.0);
}
