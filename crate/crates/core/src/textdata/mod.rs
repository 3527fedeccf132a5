//! Byte-level tokenizer with offset maps, span and lexicon readers, a trivial
//! segmenter and the synthetic corpus generator.

mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::error::{FbsError, Result};

pub use synth::{synth_corpus, SynthCorpus, BUILTIN_IDIOMS};

/// 256 byte values plus four reserved ids.
pub const VOCAB_SIZE: usize = 260;
pub const PAD: usize = 256;
pub const BOS: usize = 257;
pub const EOS: usize = 258;
pub const SEP: usize = 259;

/// Token ids with half-open byte offsets into the source text.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One token per UTF-8 byte.
///
/// ```
/// let t = fbs_core::textdata::encode("ab");
/// assert_eq!(t.ids, vec![97, 98]);
/// assert_eq!(t.offsets, vec![(0, 1), (1, 2)]);
/// ```
pub fn encode(text: &str) -> TokenSeq {
    TokenSeq {
        ids: text.bytes().map(usize::from).collect(),
        offsets: (0..text.len()).map(|i| (i, i + 1)).collect(),
    }
}

/// Like [`encode`] for raw bytes; rejects invalid UTF-8.
pub fn encode_bytes(bytes: &[u8]) -> Result<TokenSeq> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| FbsError::invalid(format!("invalid UTF-8 at byte {}", e.valid_up_to())))?;
    Ok(encode(text))
}

/// Concatenates byte tokens; reserved ids are rejected.
pub fn decode(ids: &[usize]) -> Result<String> {
    let bytes = ids
        .iter()
        .map(|&i| {
            u8::try_from(i).map_err(|_| FbsError::invalid(format!("token {i} is not a byte")))
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| FbsError::invalid(e.to_string()))
}

/// Decoding for display: reserved ids dropped, invalid sequences replaced.
pub fn decode_lossy(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter_map(|&i| u8::try_from(i).ok()).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SpanKind {
    Segment,
    Idiom,
}

impl fmt::Display for SpanKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpanKind::Segment => "segment",
            SpanKind::Idiom => "idiom",
        })
    }
}

/// Half-open byte interval with its source kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub kind: SpanKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpanSet {
    pub spans: Vec<Span>,
}

impl SpanSet {
    pub fn of_kind(&self, kind: SpanKind) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(move |s| s.kind == kind)
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// `start<TAB>end<TAB>kind` per line.
    pub fn to_tsv(&self) -> String {
        self.spans
            .iter()
            .map(|s| format!("{}\t{}\t{}\n", s.start, s.end, s.kind))
            .collect()
    }
}

/// Parses a span file body; `origin` names the source in errors.
pub fn parse_spans(body: &str, origin: &str, text_len: usize) -> Result<SpanSet> {
    let err = |line: usize, msg: String| FbsError::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut spans = Vec::new();
    let mut last_start = [None::<usize>; 2];
    for (i, raw) in body.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(line, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let start: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| err(line, format!("bad start {:?}", fields[0])))?;
        let end: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| err(line, format!("bad end {:?}", fields[1])))?;
        let kind = match fields[2].trim() {
            "segment" => SpanKind::Segment,
            "idiom" => SpanKind::Idiom,
            other => return Err(err(line, format!("unknown kind {other:?}"))),
        };
        if start >= end || end > text_len {
            return Err(err(
                line,
                format!("span [{start},{end}) out of range for text of {text_len} bytes"),
            ));
        }
        let slot = &mut last_start[kind as usize];
        if slot.is_some_and(|s| start < s) {
            return Err(err(line, format!("{kind} spans not sorted by start")));
        }
        *slot = Some(start);
        spans.push(Span { start, end, kind });
    }
    Ok(SpanSet { spans })
}

pub fn read_spans(path: impl AsRef<Path>, text_len: usize) -> Result<SpanSet> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path)?;
    parse_spans(&body, &path.display().to_string(), text_len)
}

/// Deduplicated idiom strings, each 3 to 5 characters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdiomLexicon {
    entries: BTreeSet<String>,
}

impl IdiomLexicon {
    pub fn new<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut lex = Self::default();
        for (i, e) in entries.into_iter().enumerate() {
            let e = e.into();
            check_entry(&e).map_err(|msg| FbsError::invalid(format!("entry {}: {msg}", i + 1)))?;
            lex.entries.insert(e);
        }
        Ok(lex)
    }

    /// The idioms used by the synthetic corpus generator.
    pub fn builtin() -> Self {
        Self::new(BUILTIN_IDIOMS.iter().copied()).expect("builtin lexicon is well formed")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, s: &str) -> bool {
        self.entries.contains(s)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }
}

fn check_entry(e: &str) -> std::result::Result<(), String> {
    let n = e.chars().count();
    if !(3..=5).contains(&n) {
        return Err(format!("{e:?} has {n} characters, expected 3 to 5"));
    }
    Ok(())
}

/// Lexicon parsed from a file plus the number of duplicate lines removed.
pub fn parse_lexicon(body: &str, origin: &str) -> Result<(IdiomLexicon, usize)> {
    let mut lex = IdiomLexicon::default();
    let mut dups = 0;
    for (i, raw) in body.lines().enumerate() {
        let e = raw.trim();
        if e.is_empty() {
            continue;
        }
        check_entry(e).map_err(|msg| FbsError::Parse {
            path: origin.to_string(),
            line: i + 1,
            msg,
        })?;
        if !lex.entries.insert(e.to_string()) {
            dups += 1;
        }
    }
    Ok((lex, dups))
}

pub fn read_lexicon(path: impl AsRef<Path>) -> Result<(IdiomLexicon, usize)> {
    let path = path.as_ref();
    let body = std::fs::read_to_string(path)?;
    parse_lexicon(&body, &path.display().to_string())
}

/// ASCII punctuation plus common CJK punctuation.
pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || "，。、！？；：“”‘’（）《》【】…—".contains(c)
}

/// Maximal runs of characters that are neither whitespace nor punctuation.
pub fn segment_trivial(text: &str) -> SpanSet {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        let word = !(c.is_whitespace() || is_punct(c));
        match (word, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push(Span {
                    start: s,
                    end: i,
                    kind: SpanKind::Segment,
                });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push(Span {
            start: s,
            end: text.len(),
            kind: SpanKind::Segment,
        });
    }
    SpanSet { spans }
}
