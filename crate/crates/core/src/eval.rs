//! Span-identification and technique-classification scorers.
//!
//! SI uses character-overlap partial credit: for predicted span `s` and gold
//! span `t`, `C(s, t, h) = |s ∩ t| / h`. Precision sums `C(s, t, |s|)` over all
//! pairs of the same article and divides by the number of predictions, recall
//! sums `C(s, t, |t|)` and divides by the number of gold spans. Pairs are not
//! matched one-to-one, so a prediction overlapping several gold spans is
//! credited for each of them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{SiLabel, Span, TcLabel, Technique};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn group_spans(labels: &[SiLabel]) -> BTreeMap<u32, Vec<Span>> {
    let mut out: BTreeMap<u32, Vec<Span>> = BTreeMap::new();
    for l in labels {
        out.entry(l.article_id).or_default().push(l.span);
    }
    out
}

pub fn si_score(pred: &[SiLabel], gold: &[SiLabel]) -> SiScore {
    if pred.is_empty() && gold.is_empty() {
        return SiScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let gold_by_article = group_spans(gold);
    let mut p_credit = 0.0;
    let mut r_credit = 0.0;
    for (article, preds) in group_spans(pred) {
        let Some(golds) = gold_by_article.get(&article) else {
            continue;
        };
        for s in &preds {
            for t in golds {
                let shared = s.intersection(*t) as f64;
                p_credit += shared / s.len() as f64;
                r_credit += shared / t.len() as f64;
            }
        }
    }
    let precision = if pred.is_empty() { 0.0 } else { p_credit / pred.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { r_credit / gold.len() as f64 };
    SiScore {
        precision,
        recall,
        f1: harmonic(precision, recall),
    }
}

type Key = (u32, Span);

/// Per-key technique multisets; errors unless both sides have the same
/// number of labels for every `(article_id, span)`.
fn align(pred: &[TcLabel], gold: &[TcLabel]) -> Result<Vec<(Vec<Technique>, Vec<Technique>)>> {
    let mut table: BTreeMap<Key, (Vec<Technique>, Vec<Technique>)> = BTreeMap::new();
    for l in pred {
        table.entry((l.article_id, l.span)).or_default().0.push(l.technique);
    }
    for l in gold {
        table.entry((l.article_id, l.span)).or_default().1.push(l.technique);
    }
    let bad: Vec<String> = table
        .iter()
        .filter(|(_, (p, g))| p.len() != g.len())
        .map(|((a, s), (p, g))| format!("{a} {s} (pred {}, gold {})", p.len(), g.len()))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Contract(format!(
            "prediction and gold spans differ: {}",
            bad.join(", ")
        )));
    }
    Ok(table.into_values().collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold spans of this class.
    pub support: usize,
    pub predicted: usize,
    pub true_positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    /// Indexed by [`Technique::index`].
    pub classes: Vec<ClassScore>,
    pub micro_f1: f64,
}

/// Micro-averaged F1 over the 14 classes for labels of the same spans.
pub fn tc_micro_f1(pred: &[TcLabel], gold: &[TcLabel]) -> Result<f64> {
    Ok(per_class_report(pred, gold)?.micro_f1)
}

pub fn per_class_report(pred: &[TcLabel], gold: &[TcLabel]) -> Result<ClassReport> {
    let mut classes = vec![ClassScore::default(); Technique::COUNT];
    for (p, g) in align(pred, gold)? {
        let mut p_counts = [0usize; Technique::COUNT];
        let mut g_counts = [0usize; Technique::COUNT];
        p.iter().for_each(|t| p_counts[t.index()] += 1);
        g.iter().for_each(|t| g_counts[t.index()] += 1);
        for c in 0..Technique::COUNT {
            classes[c].predicted += p_counts[c];
            classes[c].support += g_counts[c];
            classes[c].true_positives += p_counts[c].min(g_counts[c]);
        }
    }
    for c in &mut classes {
        c.precision = ratio(c.true_positives, c.predicted);
        c.recall = ratio(c.true_positives, c.support);
        c.f1 = harmonic(c.precision, c.recall);
    }
    let tp: usize = classes.iter().map(|c| c.true_positives).sum();
    let predicted: usize = classes.iter().map(|c| c.predicted).sum();
    let support: usize = classes.iter().map(|c| c.support).sum();
    let micro_f1 = harmonic(ratio(tp, predicted), ratio(tp, support));
    Ok(ClassReport { classes, micro_f1 })
}

/// Report for a run without predictions: gold supports, zero scores.
pub fn gold_only_report(gold: &[TcLabel]) -> ClassReport {
    let mut classes = vec![ClassScore::default(); Technique::COUNT];
    for l in gold {
        classes[l.technique.index()].support += 1;
    }
    ClassReport {
        classes,
        micro_f1: 0.0,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Score as a percentage with three decimals.
pub fn percent(v: f64) -> String {
    format!("{:.3}", v * 100.0)
}

/// `key=value` lines for an SI score.
pub fn format_si_score(score: &SiScore) -> String {
    format!(
        "precision={}\nrecall={}\nf1={}\n",
        percent(score.precision),
        percent(score.recall),
        percent(score.f1)
    )
}

/// Per-technique F1 with supports, one row per technique in canonical order.
pub fn render_class_table(report: &ClassReport) -> String {
    let width = Technique::ALL.iter().map(|t| t.name().len()).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}", "Technique", "Support", "F1 (%)");
    let _ = writeln!(out, "{}", "-".repeat(width + 20));
    for (t, c) in Technique::ALL.iter().zip(&report.classes) {
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}", t.name(), c.support, percent(c.f1));
    }
    let _ = writeln!(out, "{}", "-".repeat(width + 20));
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}", "micro-F1", "", percent(report.micro_f1));
    out
}

/// `key=value` lines for a TC report.
pub fn format_class_report(report: &ClassReport) -> String {
    let mut out = format!("micro_f1={}\n", percent(report.micro_f1));
    for (t, c) in Technique::ALL.iter().zip(&report.classes) {
        let _ = writeln!(out, "f1[{}]={}", t.name(), percent(c.f1));
        let _ = writeln!(out, "support[{}]={}", t.name(), c.support);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn si(a: u32, s: usize, e: usize) -> SiLabel {
        SiLabel {
            article_id: a,
            span: Span::new(s, e).unwrap(),
        }
    }

    fn tc(a: u32, t: Technique, s: usize, e: usize) -> TcLabel {
        TcLabel {
            article_id: a,
            technique: t,
            span: Span::new(s, e).unwrap(),
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn gold_only_report_keeps_supports() {
        let gold = vec![
            tc(1, Technique::Doubt, 0, 4),
            tc(1, Technique::Doubt, 5, 9),
            tc(2, Technique::Slogans, 0, 4),
        ];
        let r = gold_only_report(&gold);
        assert_eq!(r.classes[Technique::Doubt.index()].support, 2);
        assert_eq!(r.classes[Technique::Slogans.index()].support, 1);
        assert!(r.classes.iter().all(|c| c.f1 == 0.0));
        assert_eq!(r.micro_f1, 0.0);
    }

    #[test]
    fn si_golden_cases() {
        let s = si_score(&[si(1, 0, 10)], &[si(1, 0, 10)]);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));

        let s = si_score(&[si(1, 0, 10)], &[si(1, 5, 20)]);
        assert!(close(s.precision, 0.5) && close(s.recall, 1.0 / 3.0) && close(s.f1, 0.4));

        let s = si_score(&[si(1, 0, 5)], &[si(1, 0, 10)]);
        assert!(close(s.precision, 1.0) && close(s.recall, 0.5) && close(s.f1, 2.0 / 3.0));

        let s = si_score(&[], &[si(1, 0, 10)]);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));

        let s = si_score(&[], &[]);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));

        let s = si_score(&[si(1, 0, 10)], &[]);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn si_spans_of_other_articles_do_not_overlap() {
        let s = si_score(&[si(1, 0, 10)], &[si(2, 0, 10)]);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn si_over_credits_without_matching() {
        // one long prediction over two gold spans collects both credits
        let s = si_score(&[si(1, 0, 20)], &[si(1, 0, 10), si(1, 10, 20)]);
        assert!(close(s.precision, 1.0) && close(s.recall, 1.0));
        // two identical predictions on one gold span are each credited fully
        let s = si_score(&[si(1, 0, 10), si(1, 0, 10)], &[si(1, 0, 10)]);
        assert!(close(s.precision, 1.0) && close(s.recall, 2.0));
    }

    #[test]
    fn micro_f1_is_accuracy() {
        use Technique::*;
        let gold = [
            tc(1, Doubt, 0, 5),
            tc(1, Slogans, 6, 9),
            tc(2, Repetition, 0, 4),
            tc(2, FlagWaving, 5, 8),
        ];
        let mut pred = gold;
        pred[3].technique = Doubt;
        assert!(close(tc_micro_f1(&pred, &gold).unwrap(), 0.75));
        assert_eq!(tc_micro_f1(&gold, &gold).unwrap(), 1.0);
        pred.reverse();
        assert!(close(tc_micro_f1(&pred, &gold).unwrap(), 0.75));
    }

    #[test]
    fn key_mismatch_lists_spans() {
        let gold = [tc(1, Technique::Doubt, 0, 5)];
        let pred = [tc(1, Technique::Doubt, 0, 6)];
        let err = tc_micro_f1(&pred, &gold).unwrap_err().to_string();
        assert!(err.contains("[0, 5)") && err.contains("[0, 6)"), "{err}");
    }

    #[test]
    fn duplicate_keys_count_as_multisets() {
        use Technique::*;
        let gold = [tc(1, Doubt, 0, 5), tc(1, Slogans, 0, 5)];
        let pred = [tc(1, Slogans, 0, 5), tc(1, Repetition, 0, 5)];
        assert!(close(tc_micro_f1(&pred, &gold).unwrap(), 0.5));
    }

    #[test]
    fn per_class_breakdown() {
        use Technique::*;
        let gold = [
            tc(1, ThoughtTerminatingCliches, 0, 5),
            tc(1, LoadedLanguage, 6, 9),
            tc(1, LoadedLanguage, 10, 12),
        ];
        let pred = [
            tc(1, LoadedLanguage, 0, 5),
            tc(1, LoadedLanguage, 6, 9),
            tc(1, LoadedLanguage, 10, 12),
        ];
        let r = per_class_report(&pred, &gold).unwrap();
        let ttc = r.classes[ThoughtTerminatingCliches.index()];
        assert_eq!((ttc.support, ttc.recall, ttc.f1), (1, 0.0, 0.0));
        let ll = r.classes[LoadedLanguage.index()];
        assert!(close(ll.precision, 2.0 / 3.0) && close(ll.recall, 1.0));
        assert!(close(r.micro_f1, tc_micro_f1(&pred, &gold).unwrap()));

        let one = [tc(1, Doubt, 0, 5), tc(2, Doubt, 0, 5)];
        let r = per_class_report(&one, &one).unwrap();
        assert_eq!(r.classes[Doubt.index()].f1, 1.0);
        assert!(r.classes.iter().enumerate().all(|(i, c)| i == Doubt.index() || c.support == 0));
    }

    #[test]
    fn table_lists_techniques_in_order() {
        let gold = [tc(1, Technique::Doubt, 0, 5)];
        let r = per_class_report(&gold, &gold).unwrap();
        let table = render_class_table(&r);
        let rows: Vec<&str> = table.lines().skip(2).take(14).collect();
        for (row, t) in rows.iter().zip(Technique::ALL) {
            assert!(row.starts_with(t.name()));
        }
        assert!(format_class_report(&r).starts_with("micro_f1=100.000\n"));
        let s = si_score(&[si(1, 0, 10)], &[si(1, 0, 10)]);
        assert_eq!(format_si_score(&s), "precision=100.000\nrecall=100.000\nf1=100.000\n");
    }

    fn arb_spans() -> impl Strategy<Value = Vec<SiLabel>> {
        proptest::collection::vec((1u32..4, 0usize..60, 1usize..20), 0..8)
            .prop_map(|v| v.into_iter().map(|(a, s, l)| si(a, s, s + l)).collect())
    }

    /// Drops spans overlapping an earlier span of the same article.
    fn disjoint(v: Vec<SiLabel>) -> Vec<SiLabel> {
        let mut kept: Vec<SiLabel> = Vec::new();
        for l in v {
            if !kept.iter().any(|k| k.article_id == l.article_id && k.span.overlaps(l.span)) {
                kept.push(l);
            }
        }
        kept
    }

    proptest! {
        #[test]
        fn duality(s in arb_spans(), t in arb_spans()) {
            let a = si_score(&s, &t);
            let b = si_score(&t, &s);
            prop_assert!((a.precision - b.recall).abs() < 1e-12);
        }

        #[test]
        fn bounded_for_disjoint_span_sets(s in arb_spans(), t in arb_spans()) {
            let (s, t) = (disjoint(s), disjoint(t));
            let a = si_score(&s, &t);
            for v in [a.precision, a.recall, a.f1] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }

        #[test]
        fn adding_an_unmatched_gold_span_never_hurts(s in arb_spans(), t in arb_spans()) {
            let (s, t) = (disjoint(s), disjoint(t));
            let before = si_score(&s, &t).f1;
            if let Some(extra) = t.iter().find(|g| !s.iter().any(|p| p.article_id == g.article_id && p.span.overlaps(g.span))) {
                let mut more = s.clone();
                more.push(*extra);
                prop_assert!(si_score(&more, &t).f1 >= before - 1e-12);
            }
        }

        #[test]
        fn pooling_equals_offset_union(s in arb_spans(), t in arb_spans()) {
            let shift = |v: &[SiLabel]| -> Vec<SiLabel> {
                v.iter().map(|l| si(1, l.span.start() + 1000 * l.article_id as usize, l.span.end() + 1000 * l.article_id as usize)).collect()
            };
            let a = si_score(&s, &t);
            let b = si_score(&shift(&s), &shift(&t));
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        }
    }
}
