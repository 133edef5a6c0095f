// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic classification tasks with planted decisive tokens.
//!
//! Token 0 is reserved for padding and never generated.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::{derive_seed, stream_rng, streams};

/// Keyword tokens owned by each class in the keyword task.
pub const KEYWORDS_PER_CLASS: usize = 3;
/// Length of the noise sentence repeated around the passkey.
pub const NOISE_SENTENCE_LEN: usize = 5;
/// Filler tokens needed for distinguishable noise.
const MIN_FILLER: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// 1–3 keywords of the label class and fewer keywords of other
    /// classes among filler.
    KeywordSentiment,
    /// A run of one passkey token inside a repeated noise sentence.
    PasskeyNeedle,
    /// The label is the penultimate token.
    CopyPrevious,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::KeywordSentiment, TaskKind::PasskeyNeedle, TaskKind::CopyPrevious];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::KeywordSentiment => "keyword-sentiment",
            TaskKind::PasskeyNeedle => "passkey-needle",
            TaskKind::CopyPrevious => "copy-previous",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    /// Passkey run length; ignored by the other tasks.
    pub needle_width: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Binary keyword task over 24 tokens and lengths 8–16.
    pub fn keyword(seed: u64) -> Self {
        Self {
            kind: TaskKind::KeywordSentiment,
            vocab_size: 24,
            min_len: 8,
            max_len: 16,
            num_classes: 2,
            needle_width: 1,
            seed,
        }
    }

    /// Four passkeys hidden in sequences of length 24–32.
    pub fn passkey(seed: u64) -> Self {
        Self {
            kind: TaskKind::PasskeyNeedle,
            vocab_size: 16,
            min_len: 24,
            max_len: 32,
            num_classes: 4,
            needle_width: 3,
            seed,
        }
    }

    /// Copy task over four symbols and lengths 4–12.
    pub fn copy(seed: u64) -> Self {
        Self {
            kind: TaskKind::CopyPrevious,
            vocab_size: 5,
            min_len: 4,
            max_len: 12,
            num_classes: 4,
            needle_width: 1,
            seed,
        }
    }

    /// Token ids carrying class information: `1..=num_classes·k`.
    fn signal_tokens(&self) -> usize {
        match self.kind {
            TaskKind::KeywordSentiment => self.num_classes * KEYWORDS_PER_CLASS,
            TaskKind::PasskeyNeedle | TaskKind::CopyPrevious => self.num_classes,
        }
    }

    /// Filler ids, after the signal ids.
    pub fn filler(&self) -> Range<usize> {
        1 + self.signal_tokens()..self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("a task needs at least 2 classes".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        let needed_filler = match self.kind {
            TaskKind::CopyPrevious => 0,
            _ => MIN_FILLER,
        };
        let needed = 1 + self.signal_tokens() + needed_filler;
        if self.vocab_size < needed {
            return Err(Error::Config(format!(
                "{} with {} classes needs a vocabulary of at least {needed}, got {}",
                self.kind, self.num_classes, self.vocab_size
            )));
        }
        let min_for_kind = match self.kind {
            TaskKind::KeywordSentiment => 5,
            TaskKind::PasskeyNeedle => self.needle_width.max(1),
            TaskKind::CopyPrevious => 2,
        };
        if self.min_len < min_for_kind {
            return Err(Error::Config(format!("{} needs sequences of length >= {min_for_kind}", self.kind)));
        }
        if self.kind == TaskKind::PasskeyNeedle && self.needle_width == 0 {
            return Err(Error::Config("needle width must be >= 1".into()));
        }
        Ok(())
    }

    /// Class of a token under the generating rule, if it carries one.
    fn class_of(&self, token: usize) -> Option<usize> {
        (1..=self.signal_tokens()).contains(&token).then(|| match self.kind {
            TaskKind::KeywordSentiment => (token - 1) / KEYWORDS_PER_CLASS,
            _ => token - 1,
        })
    }

    /// The generating labeling rule applied to arbitrary tokens.
    ///
    /// Keyword: the class with the most keywords, ties to the class of the
    /// last keyword. Passkey: the class of the first passkey token. Copy:
    /// the class of the penultimate token.
    pub fn label_of(&self, tokens: &[usize]) -> Option<usize> {
        match self.kind {
            TaskKind::KeywordSentiment => {
                let mut counts = vec![0usize; self.num_classes];
                let mut last = None;
                for c in tokens.iter().filter_map(|&t| self.class_of(t)) {
                    counts[c] += 1;
                    last = Some(c);
                }
                let last = last?;
                let max = *counts.iter().max()?;
                if counts[last] == max {
                    Some(last)
                } else {
                    counts.iter().position(|&c| c == max)
                }
            }
            TaskKind::PasskeyNeedle => tokens.iter().find_map(|&t| self.class_of(t)),
            TaskKind::CopyPrevious => tokens.len().checked_sub(2).and_then(|i| self.class_of(tokens[i])),
        }
    }
}

/// One labelled sequence with its decisive positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
    /// Ascending positions that determine the label.
    pub decisive: Vec<usize>,
}

impl Example {
    /// Smallest range covering every decisive position.
    pub fn decisive_span(&self) -> Range<usize> {
        match (self.decisive.first(), self.decisive.last()) {
            (Some(&a), Some(&b)) => a..b + 1,
            _ => 0..0,
        }
    }
}

/// Example `index` of the task; a pure function of `(spec.seed, index)`.
pub fn example(spec: &TaskSpec, index: u64) -> Result<Example> {
    spec.validate()?;
    let mut rng = stream_rng(derive_seed(spec.seed, streams::DATA), index);
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let label = rng.random_range(0..spec.num_classes);
    let filler = spec.filler();
    let ex = match spec.kind {
        TaskKind::KeywordSentiment => {
            let mut tokens: Vec<usize> = (0..len).map(|_| rng.random_range(filler.clone())).collect();
            let count = rng.random_range(1..=3usize);
            let distractors = rng.random_range(0..count);
            let picked = rand::seq::index::sample(&mut rng, len, count + distractors).into_vec();
            let mut decisive = picked[..count].to_vec();
            decisive.sort_unstable();
            for &p in &decisive {
                tokens[p] = 1 + label * KEYWORDS_PER_CLASS + rng.random_range(0..KEYWORDS_PER_CLASS);
            }
            for &p in &picked[count..] {
                let other = (label + rng.random_range(1..spec.num_classes)) % spec.num_classes;
                tokens[p] = 1 + other * KEYWORDS_PER_CLASS + rng.random_range(0..KEYWORDS_PER_CLASS);
            }
            Example { tokens, label, decisive }
        }
        TaskKind::PasskeyNeedle => {
            let sentence: Vec<usize> = (0..NOISE_SENTENCE_LEN).map(|_| rng.random_range(filler.clone())).collect();
            let mut tokens: Vec<usize> = (0..len).map(|i| sentence[i % NOISE_SENTENCE_LEN]).collect();
            let start = rng.random_range(0..=len - spec.needle_width);
            let decisive: Vec<usize> = (start..start + spec.needle_width).collect();
            for &p in &decisive {
                tokens[p] = 1 + label;
            }
            Example { tokens, label, decisive }
        }
        TaskKind::CopyPrevious => {
            let mut tokens: Vec<usize> = (0..len).map(|_| rng.random_range(1..=spec.num_classes)).collect();
            tokens[len - 2] = 1 + label;
            Example {
                tokens,
                label,
                decisive: vec![len - 2],
            }
        }
    };
    debug_assert_eq!(spec.label_of(&ex.tokens), Some(ex.label));
    Ok(ex)
}

/// Examples `0..n`, generated in parallel and returned in index order.
pub fn generate(spec: &TaskSpec, n: usize, exec: Execution) -> Result<Vec<Example>> {
    generate_range(spec, 0..n as u64, exec)
}

/// Examples with the given indices, so disjoint ranges give disjoint splits.
pub fn generate_range(spec: &TaskSpec, indices: Range<u64>, exec: Execution) -> Result<Vec<Example>> {
    spec.validate()?;
    if indices.is_empty() {
        return Err(Error::Contract("requested an empty dataset".into()));
    }
    let start = indices.start;
    par::try_map_indexed((indices.end - start) as usize, exec, |i| example(spec, start + i as u64))
}

/// Writes one JSON object per line.
pub fn write_jsonl(mut w: impl Write, examples: &[Example]) -> Result<()> {
    let io = |e| Error::io("<dataset>", e);
    for ex in examples {
        let line = serde_json::to_string(ex).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a dataset written by [`write_jsonl`]; blank lines are skipped.
pub fn read_jsonl(r: impl BufRead) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("dataset line {}: {e}", i + 1)))?;
        if ex.tokens.is_empty() || ex.decisive.iter().any(|&p| p >= ex.tokens.len()) {
            return Err(Error::Format(format!("dataset line {}: invalid example", i + 1)));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_jsonl(std::io::BufWriter::new(f), examples).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn load_dataset(path: &Path) -> Result<Vec<Example>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn keyword_example_is_reproducible() {
        let spec = TaskSpec::keyword(7);
        let a = generate(&spec, 1, Execution::Sequential).unwrap();
        let b = generate(&spec, 1, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(!a[0].decisive.is_empty());
    }

    #[test]
    fn flipping_a_lone_keyword_flips_the_label() {
        let spec = TaskSpec::keyword(3);
        let data = generate(&spec, 200, Execution::Sequential).unwrap();
        let ex = data.iter().find(|e| e.decisive.len() == 1).expect("single-keyword example");
        let mut t = ex.tokens.clone();
        let other = 1 - ex.label;
        t[ex.decisive[0]] = 1 + other * KEYWORDS_PER_CLASS;
        assert_eq!(spec.label_of(&t), Some(other));
    }

    #[test]
    fn passkey_span_has_needle_width() {
        let spec = TaskSpec::passkey(1);
        for ex in generate(&spec, 20, Execution::Sequential).unwrap() {
            assert_eq!(ex.decisive_span().len(), 3);
            assert!(ex.decisive.iter().all(|&p| ex.tokens[p] == 1 + ex.label));
        }
    }

    #[test]
    fn copy_label_is_penultimate() {
        let spec = TaskSpec::copy(2);
        for ex in generate(&spec, 20, Execution::Sequential).unwrap() {
            let n = ex.tokens.len();
            assert_eq!(ex.tokens[n - 2], ex.label + 1);
            assert_eq!(ex.decisive, vec![n - 2]);
        }
    }

    #[test]
    fn small_vocab_is_rejected() {
        let mut spec = TaskSpec::keyword(0);
        spec.vocab_size = 1 + 2 * KEYWORDS_PER_CLASS + 1;
        assert!(matches!(example(&spec, 0), Err(Error::Config(_))));
        let mut spec = TaskSpec::passkey(0);
        spec.min_len = 2;
        assert!(matches!(example(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let data = generate(&TaskSpec::passkey(5), 4, Execution::Sequential).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"tokens\":["));
        assert_eq!(read_jsonl(&buf[..]).unwrap(), data);
        assert!(matches!(read_jsonl(&b"{\"tokens\":[]}\n"[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn examples_follow_the_generating_rule(seed in any::<u64>(), index in 0u64..1000, kind in 0usize..3) {
            let spec = match kind {
                0 => TaskSpec::keyword(seed),
                1 => TaskSpec::passkey(seed),
                _ => TaskSpec::copy(seed),
            };
            let ex = example(&spec, index).unwrap();
            prop_assert_eq!(spec.label_of(&ex.tokens), Some(ex.label));
            prop_assert!(ex.tokens.iter().all(|&t| t >= 1 && t < spec.vocab_size));
            prop_assert!(ex.decisive.iter().all(|&p| p < ex.tokens.len()));
            prop_assert_eq!(example(&spec, index).unwrap(), ex);
        }
    }
}
