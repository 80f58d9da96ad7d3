//! Toy text and trajectory tokenizers.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::trajectory::PoseHistory;
use crate::model::{Vocab, TRAJECTORY_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Text,
    ImagePlaceholder,
    Trajectory,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub kinds: Vec<TokenKind>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32, kind: TokenKind) {
        self.ids.push(id);
        self.kinds.push(kind);
    }

    pub fn extend(&mut self, other: &TokenSequence) {
        self.ids.extend_from_slice(&other.ids);
        self.kinds.extend_from_slice(&other.kinds);
    }

    pub fn image_placeholders(count: usize) -> Self {
        Self {
            ids: vec![Vocab::IMAGE_PLACEHOLDER; count],
            kinds: vec![TokenKind::ImagePlaceholder; count],
        }
    }
}

/// Words with a dedicated id; everything else hashes into the remaining text ids.
const LEXICON: &[&str] = &[
    "you",
    "are",
    "a",
    "driving",
    "assistant",
    "that",
    "generates",
    "safe",
    "and",
    "accurate",
    "actions.",
    "output",
    "the",
    "chain-of-thought",
    "reasoning",
    "of",
    "process,",
    "then",
    "future",
    "trajectory.",
    "ego",
    "vehicle",
    "lane",
    "keep",
    "change",
    "left",
    "right",
    "straight",
    "turn",
    "slow",
    "down",
    "speed",
    "up",
    "stop",
    "yield",
    "to",
    "pedestrian",
    "car",
    "truck",
    "cyclist",
    "ahead",
    "behind",
    "traffic",
    "light",
    "red",
    "green",
    "yellow",
    "intersection",
    "merge",
    "because",
    "is",
    "in",
    "front",
    "on",
    "road",
    "clear",
    "follow",
    "maintain",
    "distance",
    "obstacle",
    "avoid",
    "curve",
    "brake",
    "accelerate",
    "wait",
    "crosswalk",
    "sign",
    "nudge",
];

fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Whitespace tokenizer: lowercased words from the lexicon map to fixed ids,
/// other words are hashed into the ids left over in the text range.
#[derive(Debug, Clone)]
pub struct TextTokenizer {
    vocab: Vocab,
    lexicon_len: usize,
}

impl TextTokenizer {
    pub fn new(vocab: Vocab) -> Result<Self, String> {
        if vocab.text_len() <= LEXICON.len() {
            return Err(format!(
                "vocabulary of {} leaves {} text ids; the tokenizer needs more than {}",
                vocab.size,
                vocab.text_len(),
                LEXICON.len()
            ));
        }
        Ok(Self {
            vocab,
            lexicon_len: LEXICON.len(),
        })
    }

    /// Collapses whitespace and lowercases; the form `detokenize` returns.
    pub fn normalize(text: &str) -> String {
        text.split_whitespace()
            .map(str::to_lowercase)
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for word in text.split_whitespace() {
            seq.push(self.word_id(&word.to_lowercase()), TokenKind::Text);
        }
        seq
    }

    fn word_id(&self, word: &str) -> u32 {
        match LEXICON.iter().position(|w| *w == word) {
            Some(i) => Vocab::TEXT_START + i as u32,
            None => {
                let hashed = self.vocab.text_len() - self.lexicon_len;
                Vocab::TEXT_START + (self.lexicon_len + (fnv1a(word) % hashed as u64) as usize) as u32
            }
        }
    }

    /// Lexicon ids become their words, other ids `<tN>`; control tokens are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| {
                if id < Vocab::TEXT_START {
                    return None;
                }
                let i = (id - Vocab::TEXT_START) as usize;
                Some(match LEXICON.get(i) {
                    Some(w) if id < self.vocab.text_end() => (*w).to_string(),
                    _ => format!("<t{id}>"),
                })
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Uniform quantizer for one pose component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinRange {
    pub lo: f64,
    pub hi: f64,
}

impl BinRange {
    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / TRAJECTORY_BINS as f64
    }

    /// Bin index; out-of-range values land in the edge bin.
    pub fn quantize(&self, v: f64) -> usize {
        if !(self.lo..=self.hi).contains(&v) {
            log::warn!("trajectory value {v} outside [{}, {}], clamped", self.lo, self.hi);
        }
        let raw = ((v - self.lo) / (self.hi - self.lo) * TRAJECTORY_BINS as f64).floor();
        raw.clamp(0.0, (TRAJECTORY_BINS - 1) as f64) as usize
    }

    pub fn dequantize(&self, bin: usize) -> f64 {
        self.lo + (bin as f64 + 0.5) * self.width()
    }
}

pub const X_RANGE: BinRange = BinRange { lo: -50.0, hi: 50.0 };
pub const Y_RANGE: BinRange = BinRange { lo: -50.0, hi: 50.0 };
pub const YAW_RANGE: BinRange = BinRange { lo: -PI, hi: PI };

/// Maps each past pose to three tokens (x, y, yaw) in the trajectory range.
#[derive(Debug, Clone)]
pub struct TrajectoryTokenizer {
    vocab: Vocab,
    ranges: [BinRange; 3],
}

impl TrajectoryTokenizer {
    pub fn new(vocab: Vocab) -> Self {
        Self {
            vocab,
            ranges: [X_RANGE, Y_RANGE, YAW_RANGE],
        }
    }

    pub fn tokenize(&self, history: &PoseHistory) -> TokenSequence {
        let mut seq = TokenSequence::default();
        for pose in history.poses() {
            for (c, v) in [pose.x, pose.y, pose.yaw].into_iter().enumerate() {
                let id = self.vocab.trajectory_base(c) + self.ranges[c].quantize(v) as u32;
                seq.push(id, TokenKind::Trajectory);
            }
        }
        seq
    }

    /// Bin centres of a token sequence produced by [`Self::tokenize`].
    pub fn dequantize(&self, ids: &[u32]) -> Vec<[f64; 3]> {
        ids.chunks_exact(3)
            .map(|t| {
                let mut pose = [0.0; 3];
                for c in 0..3 {
                    let bin = (t[c] - self.vocab.trajectory_base(c)) as usize;
                    pose[c] = self.ranges[c].dequantize(bin);
                }
                pose
            })
            .collect()
    }
}
