//! File helpers shared by the commands.

use std::path::{Path, PathBuf};

use san_core::data::{parse_jsonl, CorpusLine};
use san_core::divergence::{AttnKind, JsMatrix};
use san_core::model::{write_atomic, ModelConfig, ModelParams};
use serde::de::DeserializeOwned;

use crate::error::{CliError, CliResult};

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Reads a JSON document; a missing path yields the type's default.
pub fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => serde_json::from_str(&read_text(p)?)
            .map_err(|e| CliError::Input(format!("{}: {e}", p.display()))),
    }
}

pub fn load_model(path: &Path) -> CliResult<ModelParams> {
    san_core::model::load_weights(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// Parses a JSONL corpus and checks every token against the model's vocabulary
/// and length limit, naming the first offending line.
pub fn load_corpus(path: &Path, config: &ModelConfig) -> CliResult<Vec<CorpusLine>> {
    let text = read_text(path)?;
    let lines =
        parse_jsonl(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let numbers = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1);
    for (entry, number) in lines.iter().zip(numbers) {
        let fail = |what: &str| {
            CliError::Input(format!("{}: corpus line {number}: {what}", path.display()))
        };
        if entry.src.is_empty() {
            return Err(fail("empty src"));
        }
        for (field, toks) in [("src", Some(&entry.src)), ("tgt", entry.tgt.as_ref())] {
            let Some(toks) = toks else { continue };
            if let Some(t) = toks.iter().find(|&&t| t as usize >= config.vocab) {
                return Err(fail(&format!(
                    "{field} token {t} outside vocabulary of {}",
                    config.vocab
                )));
            }
            if toks.len() + 1 > config.max_len {
                return Err(fail(&format!(
                    "{field} has {} tokens, the model allows {}",
                    toks.len(),
                    config.max_len - 1
                )));
            }
        }
    }
    Ok(lines)
}

/// Reads a layer divergence matrix from `.json`, otherwise from CSV.
pub fn load_js_matrix(path: &Path, kind: AttnKind) -> CliResult<JsMatrix> {
    let text = read_text(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        JsMatrix::from_json(&text)
    } else {
        JsMatrix::from_csv(&text, kind)
    };
    parsed.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

/// `out.csv` / `out.json` style siblings of an output prefix.
pub fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut p = prefix.to_path_buf();
    if matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "json")) {
        p.set_extension("");
    }
    let mut name = p.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(ext);
    p.set_file_name(name);
    p
}

pub fn csv_row(cells: &[String]) -> String {
    let mut s = cells.join(",");
    s.push('\n');
    s
}

pub fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}
