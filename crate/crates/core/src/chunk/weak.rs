//! Weak BIOS supervision from segmentation spans and an idiom lexicon.

use super::{BiosLabel, BiosLabelSeq};
use crate::error::{FbsError, Result};
use crate::textdata::{is_punct, IdiomLexicon, Span, SpanKind, SpanSet, TokenSeq};

const COVERAGE_EPS: f64 = 1e-12;

/// A chunk that survived filtering and alignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetainedChunk {
    /// Byte span in the text.
    pub span: (usize, usize),
    pub kind: SpanKind,
    /// Half-open interval of fully contained tokens.
    pub tokens: (usize, usize),
    /// Half-open interval of every token the span touches.
    pub aligned: (usize, usize),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeakLabelReport {
    pub labels: BiosLabelSeq,
    pub retained: Vec<RetainedChunk>,
    pub idioms_accepted: usize,
    pub segments_overridden: usize,
    pub segments_filtered: usize,
    pub dropped_empty: usize,
    /// Token intervals of every candidate that reached alignment.
    pub aligned_spans: Vec<(usize, usize)>,
    pub coverage: f64,
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Lexicon matches resolved longest first, earlier start on ties.
fn idiom_spans(text: &str, lexicon: &IdiomLexicon) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (i, _) in text.char_indices() {
        for e in lexicon.iter() {
            if text[i..].starts_with(e) {
                cands.push((i, i + e.len()));
            }
        }
    }
    cands.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)));
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    for c in cands {
        if !accepted.iter().any(|&a| overlaps(a, c)) {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();
    accepted
}

fn char_len(text: &[u8], span: (usize, usize)) -> usize {
    String::from_utf8_lossy(&text[span.0..span.1]).chars().count()
}

fn has_punct(text: &[u8], span: (usize, usize)) -> bool {
    String::from_utf8_lossy(&text[span.0..span.1]).chars().any(is_punct)
}

/// Maps byte spans to tokens and assigns `S` / `B I…` labels; tokens not
/// fully inside a span stay `O`. Spans must not overlap.
pub fn label_spans(tokens: &TokenSeq, spans: &[Span]) -> WeakLabelReport {
    let mut report = WeakLabelReport {
        labels: vec![BiosLabel::O; tokens.len()],
        ..Default::default()
    };
    for s in spans {
        // offsets are ascending, so only tokens starting before the span end
        // can touch it
        let hi = tokens.offsets.partition_point(|o| o.0 < s.end);
        let lo = tokens.offsets[..hi].partition_point(|o| o.1 <= s.start);
        let inside: Vec<usize> = (lo..hi)
            .filter(|&i| tokens.offsets[i].0 >= s.start && tokens.offsets[i].1 <= s.end)
            .collect();
        let touched: Vec<usize> = (lo..hi)
            .filter(|&i| overlaps(tokens.offsets[i], (s.start, s.end)))
            .collect();
        if let (Some(&a), Some(&b)) = (touched.first(), touched.last()) {
            report.aligned_spans.push((a, b + 1));
        }
        let (Some(&first), Some(&last)) = (inside.first(), inside.last()) else {
            report.dropped_empty += 1;
            continue;
        };
        if inside.len() == 1 {
            report.labels[first] = BiosLabel::S;
        } else {
            report.labels[first] = BiosLabel::B;
            for &i in &inside[1..] {
                report.labels[i] = BiosLabel::I;
            }
        }
        report.retained.push(RetainedChunk {
            span: (s.start, s.end),
            kind: s.kind,
            tokens: (first, last + 1),
            aligned: (
                *touched.first().unwrap_or(&first),
                touched.last().map_or(last + 1, |l| l + 1),
            ),
        });
    }
    let retained: Vec<(usize, usize)> = report.retained.iter().map(|r| r.tokens).collect();
    report.coverage = coverage_ratio(&retained, &report.aligned_spans);
    report
}

/// Full pipeline: idiom matching, idiom-over-segment priority, segment
/// filters, offset alignment and BIOS assignment.
pub fn weak_label(
    text: &str,
    seg_spans: &SpanSet,
    lexicon: &IdiomLexicon,
    tokens: &TokenSeq,
) -> Result<WeakLabelReport> {
    let bytes = text.as_bytes();
    if let Some(s) = seg_spans.spans.iter().find(|s| s.end > bytes.len() || s.start >= s.end) {
        return Err(FbsError::invalid(format!(
            "span [{},{}) out of range for text of {} bytes",
            s.start,
            s.end,
            bytes.len()
        )));
    }
    // idioms from the lexicon plus any idiom spans supplied in the file
    let mut idioms = idiom_spans(text, lexicon);
    for s in seg_spans.of_kind(SpanKind::Idiom) {
        let c = (s.start, s.end);
        if !idioms.iter().any(|&a| overlaps(a, c)) {
            idioms.push(c);
        }
    }
    idioms.sort_unstable();

    let mut chosen: Vec<Span> = idioms
        .iter()
        .map(|&(start, end)| Span {
            start,
            end,
            kind: SpanKind::Idiom,
        })
        .collect();
    let mut overridden = 0;
    let mut filtered = 0;
    for s in seg_spans.of_kind(SpanKind::Segment) {
        let c = (s.start, s.end);
        if idioms.iter().any(|&a| overlaps(a, c)) {
            overridden += 1;
            continue;
        }
        let n = char_len(bytes, c);
        if !(2..=6).contains(&n) || has_punct(bytes, c) {
            filtered += 1;
            continue;
        }
        if chosen.iter().any(|k| overlaps((k.start, k.end), c)) {
            filtered += 1;
            continue;
        }
        chosen.push(*s);
    }
    chosen.sort_by_key(|s| (s.start, s.end));
    let mut report = label_spans(tokens, &chosen);
    report.idioms_accepted = idioms.len();
    report.segments_overridden = overridden;
    report.segments_filtered = filtered;
    Ok(report)
}

/// Share of aligned spans fully inside some retained chunk (token intervals).
pub fn coverage_ratio(retained: &[(usize, usize)], aligned: &[(usize, usize)]) -> f64 {
    let hit = aligned
        .iter()
        .filter(|a| retained.iter().any(|r| r.0 <= a.0 && a.1 <= r.1))
        .count();
    hit as f64 / (aligned.len() as f64 + COVERAGE_EPS)
}
