//! Token corpora: JSON Lines files and synthetic tasks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FIRST_WORD;
use crate::tensor::Rng;

/// A training pair. `tgt` excludes the start and end symbols.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// One line of a JSONL corpus: `{"src": [...], "tgt": [...]}` with `tgt` optional.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub src: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt: Option<Vec<u32>>,
}

impl From<Example> for CorpusLine {
    fn from(e: Example) -> Self {
        CorpusLine {
            src: e.src,
            tgt: Some(e.tgt),
        }
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<CorpusLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("corpus line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn to_jsonl(lines: &[CorpusLine]) -> Result<String> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    Ok(out)
}

/// Keeps only lines with a target, as training examples.
pub fn examples(lines: &[CorpusLine]) -> Result<Vec<Example>> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| match &l.tgt {
            Some(t) => Ok(Example {
                src: l.src.clone(),
                tgt: t.clone(),
            }),
            None => Err(Error::Input(format!(
                "corpus line {} has no \"tgt\"",
                i + 1
            ))),
        })
        .collect()
}

fn sentence(rng: &mut Rng, vocab: usize, max_len: usize) -> Vec<u32> {
    let len = rng.below(1, max_len as u64 + 1) as usize;
    (0..len)
        .map(|_| rng.below(FIRST_WORD as u64, vocab as u64) as u32)
        .collect()
}

/// Target equals source.
pub fn copy_task(rng: &mut Rng, n: usize, vocab: usize, max_len: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let s = sentence(rng, vocab, max_len);
            Example {
                tgt: s.clone(),
                src: s,
            }
        })
        .collect()
}

/// Target is the reversed source.
pub fn reverse_task(rng: &mut Rng, n: usize, vocab: usize, max_len: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let s = sentence(rng, vocab, max_len);
            Example {
                tgt: s.iter().rev().copied().collect(),
                src: s,
            }
        })
        .collect()
}

/// Unrelated random source and target sentences.
pub fn random_pairs(rng: &mut Rng, n: usize, vocab: usize, max_len: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let src = sentence(rng, vocab, max_len);
            Example {
                src,
                tgt: sentence(rng, vocab, max_len),
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
}

pub fn synthetic(
    task: Task,
    rng: &mut Rng,
    n: usize,
    vocab: usize,
    max_len: usize,
) -> Vec<Example> {
    match task {
        Task::Copy => copy_task(rng, n, vocab, max_len),
        Task::Reverse => reverse_task(rng, n, vocab, max_len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_with_optional_target() {
        let lines = vec![
            CorpusLine {
                src: vec![3, 4],
                tgt: Some(vec![5]),
            },
            CorpusLine {
                src: vec![6],
                tgt: None,
            },
        ];
        let text = to_jsonl(&lines).unwrap();
        assert_eq!(text, "{\"src\":[3,4],\"tgt\":[5]}\n{\"src\":[6]}\n");
        assert_eq!(parse_jsonl(&text).unwrap(), lines);
    }

    #[test]
    fn bad_line_is_named() {
        let err = parse_jsonl("{\"src\":[1]}\n{\"src\":\"x\"}\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn synthetic_tasks_respect_bounds() {
        let mut rng = Rng::new(0);
        for ex in reverse_task(&mut rng, 50, 16, 8) {
            assert!((1..=8).contains(&ex.src.len()));
            assert!(ex.src.iter().all(|&t| (FIRST_WORD..16).contains(&t)));
            assert_eq!(ex.tgt.iter().rev().copied().collect::<Vec<_>>(), ex.src);
        }
    }
}
