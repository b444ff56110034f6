//! Corpus ingestion and the persisted index file.
//!
//! A corpus is either a directory (one document per regular file, visited
//! in byte order of the file names, subdirectories ignored) or a JSON-lines
//! file whose records carry `id` (string or number) and `text`. Text becomes
//! byte-level token ids. An optional exclusion list (one id per line) drops
//! documents by id.
//!
//! Index file layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "RALMIDX\0"
//! version  u32      1
//! k1, b    f64, f64
//! n_docs   u32
//! n_docs × { name: u32 len + UTF-8, source: u32 len + UTF-8,
//!            n_tokens: u32, n_tokens × u32 }
//! ```
//!
//! Only the documents and BM25 parameters are stored; the inverted
//! statistics are rebuilt on load.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ralm_core::retrieval::{Bm25Index, Bm25Params, Corpus, Document};
use ralm_core::TokenId;
use serde::Deserialize;

use crate::error::{CliError, CliResult};

pub const INDEX_MAGIC: &[u8; 8] = b"RALMIDX\0";
pub const INDEX_VERSION: u32 = 1;

#[derive(Deserialize)]
struct JsonDoc {
    id: serde_json::Value,
    text: String,
}

fn doc_from_text(name: String, source: String, text: &[u8]) -> Document {
    Document { name, source, tokens: text.iter().map(|&b| TokenId::from(b)).collect() }
}

/// Reads every regular file of `dir`, sorted by file name.
pub fn read_directory(dir: &Path) -> CliResult<Vec<Document>> {
    let mut entries = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let e = e.map_err(|e| CliError::io(dir, e))?;
        if e.file_type().map_err(|err| CliError::io(&e.path(), err))?.is_file() {
            entries.push(e.path());
        }
    }
    entries.sort();
    entries
        .into_iter()
        .map(|path| {
            let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(doc_from_text(name, path.display().to_string(), &bytes))
        })
        .collect()
}

/// Parses JSON-lines records `{"id": ..., "text": ...}`.
pub fn read_jsonl(text: &str, origin: &str) -> CliResult<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonDoc = serde_json::from_str(line)
            .map_err(|e| CliError::data(format!("{origin}:{}: {e}", i + 1)))?;
        let name = match rec.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(CliError::data(format!("{origin}:{}: id must be a string or number, got {other}", i + 1))),
        };
        docs.push(doc_from_text(name, format!("{origin}:{}", i + 1), rec.text.as_bytes()));
    }
    Ok(docs)
}

/// Loads a corpus from a directory or a `.jsonl` file, dropping excluded
/// ids and empty documents.
pub fn ingest(path: &Path, exclude: Option<&Path>) -> CliResult<Corpus> {
    let docs = if path.is_dir() {
        read_directory(path)?
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        read_jsonl(&text, &path.display().to_string())?
    };
    let excluded: BTreeSet<String> = match exclude {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::io(p, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => BTreeSet::new(),
    };
    let corpus = Corpus::from_documents(docs.into_iter().filter(|d| !excluded.contains(&d.name)))?;
    if corpus.is_empty() {
        return Err(CliError::data(format!("{}: no non-empty documents", path.display())));
    }
    Ok(corpus)
}

/// Reads a text file (or every file of a directory, concatenated in name
/// order) as one token stream.
pub fn read_stream(path: &Path) -> CliResult<Vec<TokenId>> {
    if path.is_dir() {
        Ok(read_directory(path)?.into_iter().flat_map(|d| d.tokens).collect())
    } else {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(bytes.iter().map(|&b| TokenId::from(b)).collect())
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn write_index(w: &mut impl Write, index: &Bm25Index) -> std::io::Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(INDEX_MAGIC);
    buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    buf.extend_from_slice(&index.params().k1.to_le_bytes());
    buf.extend_from_slice(&index.params().b.to_le_bytes());
    let docs = index.corpus().documents();
    buf.extend_from_slice(&(docs.len() as u32).to_le_bytes());
    for d in docs {
        put_str(&mut buf, &d.name);
        put_str(&mut buf, &d.source);
        buf.extend_from_slice(&(d.tokens.len() as u32).to_le_bytes());
        for t in &d.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> CliResult<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| CliError::data(format!("index file truncated at byte {}", self.at)))?;
        let out = &self.data[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> CliResult<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> CliResult<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::data("index file holds invalid UTF-8"))
    }
}

pub fn read_index(mut r: impl Read) -> CliResult<Bm25Index> {
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(|e| CliError::data(format!("index file: {e}")))?;
    let mut c = Cursor { data: &data, at: 0 };
    if c.take(8)? != INDEX_MAGIC {
        return Err(CliError::data("not an index file"));
    }
    let version = c.u32()?;
    if version != INDEX_VERSION {
        return Err(CliError::data(format!("index version {version} is not supported (expected {INDEX_VERSION})")));
    }
    let params = Bm25Params { k1: c.f64()?, b: c.f64()? };
    let n = c.u32()? as usize;
    let mut docs = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let name = c.string()?;
        let source = c.string()?;
        let len = c.u32()? as usize;
        let raw = c.take(len.checked_mul(4).ok_or_else(|| CliError::data("index file: bad length"))?)?;
        let tokens = raw.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        docs.push(Document { name, source, tokens });
    }
    if c.at != data.len() {
        return Err(CliError::data("index file has trailing bytes"));
    }
    Ok(Bm25Index::build(Corpus::from_documents(docs)?, params)?)
}

pub fn save_index(path: &Path, index: &Bm25Index) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_index(&mut std::io::BufWriter::new(file), index).map_err(|e| CliError::io(path, e))
}

pub fn load_index(path: &Path) -> CliResult<Bm25Index> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_index(file).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}
