//! Training and evaluation datasets as JSON lines.
//!
//! One example per line: `{"tokens": [..], "mask": [..], "target_start": n}`
//! where `mask[i]` is true exactly on the target tokens.

use std::io::Write;
use std::path::Path;

use ralm_core::model::Vocabulary;
use ralm_core::tuneval::TrainExample;
use ralm_core::TokenId;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Serialize, Deserialize)]
struct Record {
    tokens: Vec<TokenId>,
    mask: Vec<bool>,
    target_start: usize,
}

pub fn write_examples(w: &mut impl Write, examples: &[TrainExample]) -> std::io::Result<()> {
    for ex in examples {
        let rec = Record { tokens: ex.tokens.clone(), mask: ex.mask.clone(), target_start: ex.target_start };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Parses and validates examples against `vocab`.
pub fn read_examples(text: &str, origin: &str, vocab: Vocabulary) -> CliResult<Vec<TrainExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: &dyn std::fmt::Display| CliError::data(format!("{origin}:{}: {e}", i + 1));
        let rec: Record = serde_json::from_str(line).map_err(|e| at(&e))?;
        let ex = TrainExample { tokens: rec.tokens, mask: rec.mask, target_start: rec.target_start };
        ex.validate(vocab).map_err(|e| at(&e))?;
        out.push(ex);
    }
    if out.is_empty() {
        return Err(CliError::data(format!("{origin}: no examples")));
    }
    Ok(out)
}

pub fn save(path: &Path, examples: &[TrainExample]) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_examples(&mut std::io::BufWriter::new(file), examples).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path, vocab: Vocabulary) -> CliResult<Vec<TrainExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    read_examples(&text, &path.display().to_string(), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_validation() {
        let vocab = Vocabulary::new(258);
        let ex = TrainExample {
            tokens: vec![1, 258, 5, 259, 7, 8],
            mask: vec![false, false, false, false, true, true],
            target_start: 4,
        };
        let mut buf = Vec::new();
        write_examples(&mut buf, std::slice::from_ref(&ex)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(read_examples(&text, "t", vocab).unwrap(), vec![ex]);
        let bad = text.replace("\"mask\":[false,false,false,false,true,true]", "\"mask\":[false,true,false,false,true,true]");
        assert!(read_examples(&bad, "t", vocab).is_err());
        assert!(read_examples("", "t", vocab).is_err());
        assert!(read_examples("{\"tokens\":[1]}", "t", vocab).is_err());
    }
}
