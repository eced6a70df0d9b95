//! Label schemes, BIO span decoding and phrase-level evaluation.
//!
//! Tag ids are dense: id 0 is always `O`, followed by `B-x`, `I-x` pairs in
//! slot-type order. Decoding is lenient IOB2: a dangling `I-x` opens a new
//! span, matching the usual CoNLL evaluation convention.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Slot-type inventory and its BIO tag expansion.
///
/// Single source of truth for tag indices: `tags[0] == "O"` and slot type
/// `i` owns tags `1 + 2i` (`B-`) and `2 + 2i` (`I-`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    slot_types: Vec<String>,
    tags: Vec<String>,
    #[serde(skip)]
    tag_index: HashMap<String, usize>,
}

impl LabelScheme {
    pub fn new<S: Into<String>>(slot_types: Vec<S>) -> Result<Self> {
        let slot_types: Vec<String> = slot_types.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for name in &slot_types {
            if name.is_empty() {
                return Err(Error::Schema("empty slot type name".into()));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Schema(format!("duplicate slot type {name:?}")));
            }
        }
        let mut tags = Vec::with_capacity(1 + 2 * slot_types.len());
        tags.push("O".to_string());
        for name in &slot_types {
            tags.push(format!("B-{name}"));
            tags.push(format!("I-{name}"));
        }
        let tag_index = tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self {
            slot_types,
            tags,
            tag_index,
        })
    }

    pub fn slot_types(&self) -> &[String] {
        &self.slot_types
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn n_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn tag_name(&self, id: usize) -> Result<&str> {
        self.tags
            .get(id)
            .map(String::as_str)
            .ok_or(Error::InvalidTagId {
                id,
                n_tags: self.tags.len(),
            })
    }

    pub fn tag_id(&self, name: &str) -> Option<usize> {
        self.tag_index.get(name).copied()
    }

    pub fn begin_id(&self, slot_idx: usize) -> usize {
        1 + 2 * slot_idx
    }

    pub fn inside_id(&self, slot_idx: usize) -> usize {
        2 + 2 * slot_idx
    }

    /// Slot-type index of a non-`O` tag id, or `None` for `O`.
    pub fn slot_of(&self, id: usize) -> Result<Option<usize>> {
        if id >= self.n_tags() {
            return Err(Error::InvalidTagId {
                id,
                n_tags: self.n_tags(),
            });
        }
        Ok(if id == 0 { None } else { Some((id - 1) / 2) })
    }

    pub fn is_begin(&self, id: usize) -> bool {
        id != 0 && id % 2 == 1
    }

    /// Rebuilds the tag index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.tag_index = self
            .tags
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }
}

/// A typed token span, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub slot_type: String,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(slot_type: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            slot_type: slot_type.into(),
            start,
            end,
        }
    }
}

/// Token sequence plus gold or pseudo tags, with optional soft label rows
/// and per-token training weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_tags: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_weights: Option<Vec<f64>>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<usize>) -> Self {
        Self {
            tokens,
            tags,
            soft_tags: None,
            token_weights: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks the structural invariants against a scheme.
    pub fn validate(&self, scheme: &LabelScheme) -> Result<()> {
        let n = self.tokens.len();
        if self.tags.len() != n {
            return Err(Error::LengthMismatch {
                context: format!("{} tags for {} tokens", self.tags.len(), n),
            });
        }
        for &t in &self.tags {
            if t >= scheme.n_tags() {
                return Err(Error::InvalidTagId {
                    id: t,
                    n_tags: scheme.n_tags(),
                });
            }
        }
        if let Some(rows) = &self.soft_tags {
            if rows.len() != n {
                return Err(Error::LengthMismatch {
                    context: format!("{} soft rows for {} tokens", rows.len(), n),
                });
            }
            for row in rows {
                if row.len() != scheme.n_tags() {
                    return Err(Error::LengthMismatch {
                        context: format!("soft row width {} != {}", row.len(), scheme.n_tags()),
                    });
                }
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Schema(format!(
                        "soft row is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        if let Some(w) = &self.token_weights {
            if w.len() != n {
                return Err(Error::LengthMismatch {
                    context: format!("{} weights for {} tokens", w.len(), n),
                });
            }
            if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(Error::Schema("negative or non-finite token weight".into()));
            }
        }
        Ok(())
    }
}

/// Decodes a tag-id sequence into typed spans, sorted by start.
///
/// Lenient IOB2: `B-x` always opens a span, `I-x` extends a running span of
/// the same type and otherwise opens a new one, `O` closes.
pub fn bio_decode(tags: &[usize], scheme: &LabelScheme) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    // (slot index, start of the open span)
    let mut open: Option<(usize, usize)> = None;

    for (pos, &id) in tags.iter().enumerate() {
        let slot = scheme.slot_of(id)?;
        match slot {
            None => {
                if let Some((s, start)) = open.take() {
                    spans.push(Span::new(scheme.slot_types[s].clone(), start, pos - 1));
                }
            }
            Some(s) => {
                let continues = !scheme.is_begin(id) && matches!(open, Some((o, _)) if o == s);
                if !continues {
                    if let Some((o, start)) = open.take() {
                        spans.push(Span::new(scheme.slot_types[o].clone(), start, pos - 1));
                    }
                    open = Some((s, pos));
                }
            }
        }
    }
    if let Some((s, start)) = open {
        spans.push(Span::new(scheme.slot_types[s].clone(), start, tags.len() - 1));
    }
    Ok(spans)
}

/// Encodes a span set back into BIO tag ids. Spans must be in bounds,
/// non-overlapping and refer to known slot types.
pub fn bio_encode(spans: &[Span], len: usize, scheme: &LabelScheme) -> Result<Vec<usize>> {
    let mut tags = vec![0usize; len];
    let mut covered = vec![false; len];
    for span in spans {
        if span.start > span.end || span.end >= len {
            return Err(Error::InvalidSpan {
                start: span.start,
                end: span.end,
                len,
            });
        }
        let slot_idx = scheme
            .slot_types
            .iter()
            .position(|t| *t == span.slot_type)
            .ok_or_else(|| Error::Schema(format!("unknown slot type {:?}", span.slot_type)))?;
        for pos in span.start..=span.end {
            if covered[pos] {
                return Err(Error::InvalidSpan {
                    start: span.start,
                    end: span.end,
                    len,
                });
            }
            covered[pos] = true;
            tags[pos] = if pos == span.start {
                scheme.begin_id(slot_idx)
            } else {
                scheme.inside_id(slot_idx)
            };
        }
    }
    Ok(tags)
}

/// Micro-averaged phrase-level precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhraseScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_pred: usize,
    pub n_gold: usize,
    pub n_correct: usize,
}

/// Span-level F1 over aligned tag sequences.
///
/// A predicted span counts only on exact (type, start, end) match. Counts
/// are micro-averaged across all sentences; 0/0 ratios are defined as 0.
pub fn phrase_f1(
    pred: &[Vec<usize>],
    gold: &[Vec<usize>],
    scheme: &LabelScheme,
) -> Result<PhraseScore> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            context: format!("{} pred sentences vs {} gold", pred.len(), gold.len()),
        });
    }
    let mut n_pred = 0usize;
    let mut n_gold = 0usize;
    let mut n_correct = 0usize;
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::LengthMismatch {
                context: format!("sentence {i}: {} pred tags vs {} gold", p.len(), g.len()),
            });
        }
        let pred_spans = bio_decode(p, scheme)?;
        let gold_spans: HashSet<Span> = bio_decode(g, scheme)?.into_iter().collect();
        n_pred += pred_spans.len();
        n_gold += gold_spans.len();
        n_correct += pred_spans.iter().filter(|s| gold_spans.contains(s)).count();
    }
    Ok(PhraseScore {
        precision: ratio_or_zero(n_correct, n_pred),
        recall: ratio_or_zero(n_correct, n_gold),
        f1: f1_from_counts(n_correct, n_pred, n_gold),
        n_pred,
        n_gold,
        n_correct,
    })
}

fn ratio_or_zero(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_from_counts(n_correct: usize, n_pred: usize, n_gold: usize) -> f64 {
    let p = ratio_or_zero(n_correct, n_pred);
    let r = ratio_or_zero(n_correct, n_gold);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_slot_scheme() -> LabelScheme {
        LabelScheme::new(vec!["PER", "LOC"]).unwrap()
    }

    #[test]
    fn scheme_tag_layout() {
        let s = two_slot_scheme();
        assert_eq!(s.tags(), &["O", "B-PER", "I-PER", "B-LOC", "I-LOC"]);
        assert_eq!(s.n_tags(), 1 + 2 * 2);
        for (i, name) in s.tags().iter().enumerate() {
            assert_eq!(s.tag_id(name), Some(i));
            assert_eq!(s.tag_name(i).unwrap(), name);
        }
        assert!(s.tag_id("B-ORG").is_none());
    }

    #[test]
    fn scheme_rejects_duplicates() {
        assert!(LabelScheme::new(vec!["A", "A"]).is_err());
        assert!(LabelScheme::new(vec![""]).is_err());
    }

    #[test]
    fn decode_no_spans() {
        let s = two_slot_scheme();
        assert_eq!(bio_decode(&[0, 0, 0], &s).unwrap(), vec![]);
    }

    #[test]
    fn decode_basic_spans() {
        let s = two_slot_scheme();
        // B-PER I-PER O B-LOC
        let spans = bio_decode(&[1, 2, 0, 3], &s).unwrap();
        assert_eq!(
            spans,
            vec![Span::new("PER", 0, 1), Span::new("LOC", 3, 3)]
        );
    }

    #[test]
    fn decode_dangling_inside_opens_span() {
        let s = two_slot_scheme();
        // I-PER I-PER
        let spans = bio_decode(&[2, 2], &s).unwrap();
        assert_eq!(spans, vec![Span::new("PER", 0, 1)]);
    }

    #[test]
    fn decode_adjacent_begins_split() {
        let s = two_slot_scheme();
        // B-PER B-PER I-LOC
        let spans = bio_decode(&[1, 1, 4], &s).unwrap();
        assert_eq!(
            spans,
            vec![
                Span::new("PER", 0, 0),
                Span::new("PER", 1, 1),
                Span::new("LOC", 2, 2)
            ]
        );
    }

    #[test]
    fn decode_rejects_invalid_id() {
        let s = two_slot_scheme();
        assert!(matches!(
            bio_decode(&[0, 5], &s),
            Err(Error::InvalidTagId { id: 5, .. })
        ));
    }

    /// Independent decoder used as an oracle: tests every [i, j] candidate
    /// against a closed-form span predicate instead of scanning with state.
    fn oracle_decode(tags: &[usize], scheme: &LabelScheme) -> Vec<Span> {
        let ty = |id: usize| -> Option<usize> {
            if id == 0 {
                None
            } else {
                Some((id - 1) / 2)
            }
        };
        let is_b = |id: usize| id != 0 && id % 2 == 1;
        let mut spans = Vec::new();
        for i in 0..tags.len() {
            let Some(x) = ty(tags[i]) else { continue };
            // start condition: B-x, or I-x with no same-type tag before it
            let starts = is_b(tags[i]) || i == 0 || ty(tags[i - 1]) != Some(x);
            if !starts {
                continue;
            }
            for j in i..tags.len() {
                // interior must be I-x all the way
                if ty(tags[j]) != Some(x) || (j > i && is_b(tags[j])) {
                    break;
                }
                let ends = j + 1 == tags.len() || ty(tags[j + 1]) != Some(x) || is_b(tags[j + 1]);
                if ends {
                    spans.push(Span::new(scheme.slot_types()[x].clone(), i, j));
                    break;
                }
            }
        }
        spans.sort();
        spans
    }

    #[test]
    fn decode_matches_oracle_exhaustively() {
        let s = two_slot_scheme();
        let n = s.n_tags();
        for len in 0..=4usize {
            let total = n.pow(len as u32);
            for code in 0..total {
                let mut tags = Vec::with_capacity(len);
                let mut c = code;
                for _ in 0..len {
                    tags.push(c % n);
                    c /= n;
                }
                let mut got = bio_decode(&tags, &s).unwrap();
                got.sort();
                assert_eq!(got, oracle_decode(&tags, &s), "tags {tags:?}");
            }
        }
    }

    #[test]
    fn f1_exact_match_is_one() {
        let s = two_slot_scheme();
        let seq = vec![vec![1, 2, 0]];
        let score = phrase_f1(&seq, &seq, &s).unwrap();
        assert_eq!(score.precision, 1.0);
        assert_eq!(score.recall, 1.0);
        assert_eq!(score.f1, 1.0);
    }

    #[test]
    fn f1_empty_prediction() {
        let s = two_slot_scheme();
        let pred = vec![vec![0, 0, 0, 0]];
        let gold = vec![vec![1, 0, 3, 4]];
        let score = phrase_f1(&pred, &gold, &s).unwrap();
        assert_eq!(score.precision, 0.0);
        assert_eq!(score.recall, 0.0);
        assert_eq!(score.f1, 0.0);
        assert_eq!(score.n_gold, 2);
    }

    #[test]
    fn f1_boundary_mismatch_is_zero() {
        let s = two_slot_scheme();
        // pred span (PER, 0, 1) vs gold span (PER, 0, 0): no exact match
        let pred = vec![vec![1, 2]];
        let gold = vec![vec![1, 0]];
        let score = phrase_f1(&pred, &gold, &s).unwrap();
        // set-intersection oracle over the enumerated span sets
        let ps: HashSet<Span> = bio_decode(&pred[0], &s).unwrap().into_iter().collect();
        let gs: HashSet<Span> = bio_decode(&gold[0], &s).unwrap().into_iter().collect();
        assert_eq!(ps.intersection(&gs).count(), 0);
        assert_eq!(score.f1, 0.0);
    }

    #[test]
    fn f1_rejects_length_mismatch() {
        let s = two_slot_scheme();
        assert!(phrase_f1(&[vec![0]], &[vec![0], vec![0]], &s).is_err());
        assert!(phrase_f1(&[vec![0, 0]], &[vec![0]], &s).is_err());
    }

    #[test]
    fn encode_rejects_bad_spans() {
        let s = two_slot_scheme();
        assert!(bio_encode(&[Span::new("PER", 0, 3)], 3, &s).is_err());
        assert!(bio_encode(&[Span::new("ORG", 0, 0)], 3, &s).is_err());
        let overlapping = [Span::new("PER", 0, 1), Span::new("LOC", 1, 2)];
        assert!(bio_encode(&overlapping, 3, &s).is_err());
    }

    /// Turns arbitrary (start, len, slot) triples into a valid span set.
    fn canonical_spans(raw: &[(usize, usize, usize)], len: usize, n_slots: usize) -> Vec<Span> {
        let mut spans: Vec<Span> = Vec::new();
        let mut covered = vec![false; len];
        for &(start, w, slot) in raw {
            if len == 0 {
                break;
            }
            let start = start % len;
            let end = (start + w % 3).min(len - 1);
            if covered[start..=end].iter().any(|&c| c) {
                continue;
            }
            covered[start..=end].iter_mut().for_each(|c| *c = true);
            spans.push(Span::new(format!("S{}", slot % n_slots), start, end));
        }
        spans.sort();
        spans
    }

    proptest! {
        #[test]
        fn decode_encode_roundtrip(
            len in 0usize..14,
            raw in proptest::collection::vec((0usize..20, 0usize..4, 0usize..3), 0..6)
        ) {
            let scheme = LabelScheme::new(vec!["S0", "S1", "S2"]).unwrap();
            let spans = canonical_spans(&raw, len, 3);
            let tags = bio_encode(&spans, len, &scheme).unwrap();
            let mut decoded = bio_decode(&tags, &scheme).unwrap();
            decoded.sort();
            prop_assert_eq!(decoded, spans);
        }

        #[test]
        fn decode_output_is_sorted_disjoint_in_bounds(
            tags in proptest::collection::vec(0usize..5, 0..20)
        ) {
            let scheme = LabelScheme::new(vec!["PER", "LOC"]).unwrap();
            let spans = bio_decode(&tags, &scheme).unwrap();
            let mut last_end: Option<usize> = None;
            for span in &spans {
                prop_assert!(span.start <= span.end);
                prop_assert!(span.end < tags.len());
                if let Some(e) = last_end {
                    prop_assert!(span.start > e);
                }
                last_end = Some(span.end);
            }
        }

        #[test]
        fn f1_self_is_one_and_symmetric(
            a in proptest::collection::vec(proptest::collection::vec(0usize..5, 1..10), 1..5),
            b in proptest::collection::vec(proptest::collection::vec(0usize..5, 1..10), 1..5),
        ) {
            let scheme = LabelScheme::new(vec!["PER", "LOC"]).unwrap();
            let n_spans: usize = a.iter()
                .map(|t| bio_decode(t, &scheme).unwrap().len())
                .sum();
            if n_spans > 0 {
                let score = phrase_f1(&a, &a, &scheme).unwrap();
                prop_assert_eq!(score.f1, 1.0);
            }
            // P(pred, gold) == R(gold, pred) on aligned shapes
            let bt: Vec<Vec<usize>> = a.iter().enumerate()
                .map(|(i, y)| {
                    let mut x = b[i % b.len()].clone();
                    x.resize(y.len(), 0);
                    x
                })
                .collect();
            let ab = phrase_f1(&a, &bt, &scheme).unwrap();
            let ba = phrase_f1(&bt, &a, &scheme).unwrap();
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.recall, ba.precision);
        }
    }
}
