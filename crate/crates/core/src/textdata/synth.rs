use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Span, SpanKind, SpanSet};

/// Multi-token patterns inserted by [`synth_corpus`].
pub const BUILTIN_IDIOMS: &[&str] = &[
    "SKY", "SEA", "MOON", "WIND", "FIRE", "GOLD", "TREE", "RAIN", "STONE", "RIVER", "LIGHT",
    "CLOUD", "一石二鸟", "画蛇添足", "守株待兔", "对牛弹琴", "亡羊补牢", "井底之蛙", "半途而废",
    "马到成功",
];

const DIGITS: &[u8] = b"0123456789";

/// Generated text and the exact spans of every inserted pattern.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthCorpus {
    pub text: String,
    pub gold: SpanSet,
}

impl SynthCorpus {
    /// Bytes covered by gold spans over total bytes.
    pub fn pattern_share(&self) -> f64 {
        let covered: usize = self.gold.spans.iter().map(|s| s.end - s.start).sum();
        covered as f64 / self.text.len().max(1) as f64
    }
}

/// Deterministic text of exactly `n_tokens` bytes.
///
/// Filler is lowercase pseudo-words separated by spaces and light
/// punctuation. Patterns are idioms from [`BUILTIN_IDIOMS`] or single digits;
/// one is emitted whenever the running pattern share falls below
/// `pattern_rate`.
pub fn synth_corpus(seed: u64, n_tokens: usize, pattern_rate: f64) -> SynthCorpus {
    let rate = pattern_rate.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(n_tokens);
    let mut spans = Vec::new();
    let mut covered = 0usize;
    while text.len() < n_tokens {
        let want_pattern = rate > 0.0 && (covered as f64) < rate * (text.len() + 1) as f64;
        let (item, is_pattern) = if want_pattern {
            let pick = rng.random_range(0..BUILTIN_IDIOMS.len() + 4);
            if pick < BUILTIN_IDIOMS.len() {
                (BUILTIN_IDIOMS[pick].to_string(), true)
            } else {
                let d = DIGITS[rng.random_range(0..DIGITS.len())];
                ((d as char).to_string(), true)
            }
        } else {
            let n = rng.random_range(2..=7);
            let mut w: String = (0..n).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            match rng.random_range(0..20) {
                0 => w.push(','),
                1 => w.push('.'),
                2 => w.push('\n'),
                _ => {}
            }
            (w, false)
        };
        if text.len() + item.len() > n_tokens {
            while text.len() < n_tokens {
                text.push(rng.random_range(b'a'..=b'z') as char);
            }
            break;
        }
        if is_pattern {
            spans.push(Span {
                start: text.len(),
                end: text.len() + item.len(),
                kind: SpanKind::Idiom,
            });
            covered += item.len();
        }
        text.push_str(&item);
        if text.len() < n_tokens {
            text.push(' ');
        }
    }
    SynthCorpus {
        text,
        gold: SpanSet { spans },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_corpus(1, 5000, 0.3), synth_corpus(1, 5000, 0.3));
        assert_ne!(synth_corpus(1, 5000, 0.3).text, synth_corpus(2, 5000, 0.3).text);
    }

    #[test]
    fn zero_rate_has_no_gold() {
        let c = synth_corpus(3, 4000, 0.0);
        assert!(c.gold.is_empty());
        assert_eq!(c.text.len(), 4000);
    }

    #[test]
    fn half_rate_share_in_band() {
        let c = synth_corpus(7, 10_000, 0.5);
        let share = c.pattern_share();
        assert!((0.4..=0.6).contains(&share), "{share}");
        assert_eq!(c.text.len(), 10_000);
        for s in &c.gold.spans {
            let piece = &c.text[s.start..s.end];
            assert!(BUILTIN_IDIOMS.contains(&piece) || (piece.len() == 1 && piece.as_bytes()[0].is_ascii_digit()));
        }
    }
}
