//! BIOS chunk labels, the deterministic parser, the online chunk cache and
//! the weak-supervision pipeline.

pub mod ctc;
pub mod head;
pub mod metrics;
pub mod weak;

use std::fmt;

use crate::error::{FbsError, Result};
use crate::numerics::kernels;

pub use ctc::{collapse_labels, ctc_loss, CtcOutcome, BLANK};
pub use head::{align_loss, bios_objective, chunk_schedule, predict_bios, BiosObjective, DEFAULT_Q0};
pub use metrics::{bios_macro_f1, boundary_f1, BoundaryScore};
pub use weak::{coverage_ratio, label_spans, weak_label, RetainedChunk, WeakLabelReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BiosLabel {
    B = 0,
    I = 1,
    O = 2,
    S = 3,
}

impl BiosLabel {
    pub const ALL: [BiosLabel; 4] = [BiosLabel::B, BiosLabel::I, BiosLabel::O, BiosLabel::S];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_boundary(self) -> bool {
        matches!(self, BiosLabel::B | BiosLabel::S)
    }
}

impl fmt::Display for BiosLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            BiosLabel::B => "B",
            BiosLabel::I => "I",
            BiosLabel::O => "O",
            BiosLabel::S => "S",
        };
        f.write_str(c)
    }
}

impl std::str::FromStr for BiosLabel {
    type Err = FbsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(BiosLabel::B),
            "I" => Ok(BiosLabel::I),
            "O" => Ok(BiosLabel::O),
            "S" => Ok(BiosLabel::S),
            _ => Err(FbsError::invalid(format!("unknown BIOS label {s:?}"))),
        }
    }
}

/// Token-aligned label sequence.
pub type BiosLabelSeq = Vec<BiosLabel>;

/// `token_index<TAB>label` per line.
pub fn format_label_dump(labels: &[BiosLabel]) -> String {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i}\t{l}\n"))
        .collect()
}

pub fn parse_label_dump(body: &str, origin: &str) -> Result<BiosLabelSeq> {
    let mut out = Vec::new();
    for (i, raw) in body.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| FbsError::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        };
        let (idx, lab) = raw
            .split_once('\t')
            .ok_or_else(|| err("expected token_index<TAB>label".into()))?;
        let idx: usize = idx.trim().parse().map_err(|_| err(format!("bad index {idx:?}")))?;
        if idx != out.len() {
            return Err(err(format!("expected index {}, got {idx}", out.len())));
        }
        out.push(lab.trim().parse().map_err(|e: FbsError| err(e.to_string()))?);
    }
    Ok(out)
}

/// Half-open token interval produced by the parser.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub start: usize,
    pub end: usize,
    /// Singleton produced by an `O` (or an orphan `I`).
    pub neutral: bool,
}

/// Left-to-right parse; chunks tile every position.
///
/// ```
/// use fbs_core::chunk::{parse_bios, BiosLabel::*};
///
/// let c = parse_bios(&[B, I, I, O, S]);
/// let spans: Vec<_> = c.iter().map(|c| (c.start, c.end)).collect();
/// assert_eq!(spans, vec![(0, 3), (3, 4), (4, 5)]);
/// ```
pub fn parse_bios(labels: &[BiosLabel]) -> Vec<Chunk> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        match labels[i] {
            BiosLabel::B => {
                let mut j = i + 1;
                while j < labels.len() && labels[j] == BiosLabel::I {
                    j += 1;
                }
                out.push(Chunk {
                    start: i,
                    end: j,
                    neutral: false,
                });
                i = j;
            }
            BiosLabel::S => {
                out.push(Chunk {
                    start: i,
                    end: i + 1,
                    neutral: false,
                });
                i += 1;
            }
            BiosLabel::O | BiosLabel::I => {
                out.push(Chunk {
                    start: i,
                    end: i + 1,
                    neutral: true,
                });
                i += 1;
            }
        }
    }
    out
}

/// A closed chunk in the cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkRecord {
    pub start: usize,
    pub end: usize,
    pub neutral: bool,
}

/// Per-sequence online chunk state: closed records with pooled (mean)
/// vectors and an open accumulator.
#[derive(Clone, Debug)]
pub struct ChunkCache {
    dim: usize,
    records: Vec<ChunkRecord>,
    pooled: Vec<f64>,
    open: Option<OpenChunk>,
}

#[derive(Clone, Debug)]
struct OpenChunk {
    start: usize,
    end: usize,
    /// Members seen; below `end - start` when the layer skipped positions.
    count: usize,
    sum: Vec<f64>,
}

impl ChunkCache {
    /// `dim` may be 0 to track intervals only.
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
            pooled: Vec::new(),
            open: None,
        }
    }

    pub fn records(&self) -> &[ChunkRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Pooled vectors of all closed records, row-major.
    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    pub fn pooled_row(&self, i: usize) -> &[f64] {
        &self.pooled[i * self.dim..(i + 1) * self.dim]
    }

    pub fn has_open(&self) -> bool {
        self.open.is_some()
    }

    fn flush(&mut self) {
        if let Some(open) = self.open.take() {
            let c = open.count as f64;
            self.pooled.extend(open.sum.iter().map(|s| s / c));
            self.records.push(ChunkRecord {
                start: open.start,
                end: open.end,
                neutral: false,
            });
        }
    }

    fn push_singleton(&mut self, t: usize, h: &[f64], neutral: bool) {
        self.pooled.extend(h.iter().map(|v| v / 1.0));
        self.records.push(ChunkRecord {
            start: t,
            end: t + 1,
            neutral,
        });
    }

    /// Consumes the label of token `t` (state `h`, length `dim`).
    pub fn update(&mut self, t: usize, h: &[f64], label: BiosLabel) {
        debug_assert_eq!(h.len(), self.dim);
        match label {
            BiosLabel::S => {
                self.flush();
                self.push_singleton(t, h, false);
            }
            BiosLabel::B => {
                self.flush();
                self.open = Some(OpenChunk {
                    start: t,
                    end: t + 1,
                    count: 1,
                    sum: h.iter().map(|v| 0.0 + v).collect(),
                });
            }
            BiosLabel::I => match self.open.as_mut() {
                Some(open) => {
                    for (s, v) in open.sum.iter_mut().zip(h) {
                        *s += v;
                    }
                    open.end = t + 1;
                    open.count += 1;
                }
                None => self.push_singleton(t, h, true),
            },
            BiosLabel::O => {
                self.flush();
                self.push_singleton(t, h, true);
            }
        }
    }

    /// Indices of the last `window` records eligible for attention.
    pub fn window(&self, window: usize, include_neutral: bool) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.records.len())
            .rev()
            .filter(|&i| include_neutral || !self.records[i].neutral)
            .take(window)
            .collect();
        idx.reverse();
        idx
    }
}

/// Single-head attention of `h` over the cache window (keys = values).
/// Returns the attended vector before the output projection; zero when the
/// window is empty.
pub fn chunk_attend(h: &[f64], cache: &ChunkCache, window: usize, include_neutral: bool) -> Vec<f64> {
    let rows = cache.window(window, include_neutral);
    let mut out = vec![0.0; h.len()];
    kernels::attend_memory(h, cache.pooled(), &rows, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use BiosLabel::*;

    /// Reference parser written independently: every O/orphan-I becomes a
    /// neutral singleton; a B opens a chunk that swallows following I's.
    fn brute_parse(labels: &[BiosLabel]) -> Vec<(usize, usize, bool)> {
        let mut out: Vec<(usize, usize, bool)> = Vec::new();
        let mut in_chunk = false;
        for (i, &l) in labels.iter().enumerate() {
            match (l, in_chunk) {
                (I, true) => out.last_mut().unwrap().1 = i + 1,
                (B, _) => {
                    out.push((i, i + 1, false));
                    in_chunk = true;
                }
                (S, _) => {
                    out.push((i, i + 1, false));
                    in_chunk = false;
                }
                (O, _) | (I, false) => {
                    out.push((i, i + 1, true));
                    in_chunk = false;
                }
            }
        }
        out
    }

    fn all_sequences(n: usize) -> Vec<Vec<BiosLabel>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|s| {
                    BiosLabel::ALL.iter().map(move |&l| {
                        let mut s = s.clone();
                        s.push(l);
                        s
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn pooling_counts_members_not_span() {
        let mut c = ChunkCache::new(1);
        c.update(0, &[1.0], B);
        c.update(3, &[3.0], I);
        c.update(4, &[5.0], O);
        assert_eq!(c.records()[0], ChunkRecord { start: 0, end: 4, neutral: false });
        assert_eq!(c.pooled_row(0), &[2.0]);
    }

    #[test]
    fn parser_examples() {
        let c = parse_bios(&[I, I]);
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|c| c.neutral && c.end - c.start == 1));
        assert!(parse_bios(&[]).is_empty());
    }

    #[test]
    fn parser_matches_reference_exhaustively() {
        for n in 0..=6 {
            for seq in all_sequences(n) {
                let got: Vec<_> = parse_bios(&seq).iter().map(|c| (c.start, c.end, c.neutral)).collect();
                assert_eq!(got, brute_parse(&seq), "{seq:?}");
            }
        }
    }

    #[test]
    fn streaming_cache_matches_parser() {
        for n in 0..=6 {
            for seq in all_sequences(n) {
                let mut cache = ChunkCache::new(0);
                for (t, &l) in seq.iter().enumerate() {
                    cache.update(t, &[], l);
                }
                let mut want = parse_bios(&seq);
                if cache.has_open() {
                    want.pop();
                }
                let got: Vec<_> = cache.records().iter().map(|r| (r.start, r.end, r.neutral)).collect();
                let want: Vec<_> = want.iter().map(|c| (c.start, c.end, c.neutral)).collect();
                assert_eq!(got, want, "{seq:?}");
            }
        }
    }

    #[test]
    fn cache_pools_means() {
        let mut c = ChunkCache::new(2);
        c.update(0, &[1.0, 2.0], S);
        assert_eq!(c.pooled_row(0), &[1.0, 2.0]);
        let h = [[0.3, -1.0], [0.6, 2.0], [1.2, 0.5]];
        c.update(1, &h[0], B);
        c.update(2, &h[1], I);
        c.update(3, &h[2], I);
        assert_eq!(c.len(), 1);
        c.update(4, &[9.0, 9.0], S);
        assert_eq!(c.len(), 3);
        let want = [(0.3 + 0.6 + 1.2) / 3.0, (-1.0 + 2.0 + 0.5) / 3.0];
        for (a, b) in c.pooled_row(1).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut o = ChunkCache::new(1);
        for t in 0..7 {
            o.update(t, &[t as f64], O);
        }
        assert_eq!(o.len(), 7);
    }

    #[test]
    fn window_and_attention() {
        let mut c = ChunkCache::new(2);
        assert_eq!(chunk_attend(&[1.0, 1.0], &c, 4, true), vec![0.0, 0.0]);
        c.update(0, &[1.0, 0.0], S);
        c.update(1, &[5.0, 5.0], O);
        c.update(2, &[0.0, 1.0], S);
        assert_eq!(c.window(2, true), vec![1, 2]);
        assert_eq!(c.window(2, false), vec![0, 2]);
        let mut a = ChunkCache::new(2);
        let mut b = ChunkCache::new(2);
        a.update(0, &[0.5, 0.2], S);
        a.update(1, &[-0.1, 0.9], S);
        b.update(0, &[-0.1, 0.9], S);
        b.update(1, &[0.5, 0.2], S);
        let q = [0.7, -0.3];
        let ra = chunk_attend(&q, &a, 8, true);
        let rb = chunk_attend(&q, &b, 8, true);
        for (x, y) in ra.iter().zip(&rb) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn label_dump_round_trip() {
        let labels = vec![B, I, O, S];
        let dump = format_label_dump(&labels);
        assert_eq!(dump, "0\tB\n1\tI\n2\tO\n3\tS\n");
        assert_eq!(parse_label_dump(&dump, "d").unwrap(), labels);
    }
}
