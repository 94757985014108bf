use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generator::{CodeSample, Corpus};
use super::lang::AstTag;
use super::tokenize::{detokenize, tokenize};
use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "codeadapt-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    length_edges: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    code: String,
    doc: Option<String>,
    clone_class: Option<usize>,
    tags: Option<Vec<AstTag>>,
    length_bucket: usize,
    cpx_bucket: usize,
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let header = Header {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        length_edges: corpus.length_edges.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for s in &corpus.samples {
        let rec = Record {
            code: detokenize(&s.code_tokens),
            doc: s.doc_tokens.as_ref().map(|d| detokenize(d)),
            clone_class: s.clone_class,
            tags: s.tags.clone(),
            length_bucket: s.length_bucket,
            cpx_bucket: s.cpx_bucket,
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Corpus> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Dataset("corpus file is empty".into()))??;
    let header: Header =
        serde_json::from_str(&first).map_err(|e| Error::Dataset(format!("bad corpus header: {e}")))?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported corpus format {} v{}",
            header.format, header.version
        )));
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("record {}: {e}", i + 1)))?;
        let code_tokens = tokenize(&rec.code);
        if let Some(tags) = &rec.tags {
            if tags.len() != code_tokens.len() {
                return Err(Error::Dataset(format!(
                    "record {}: {} tags for {} tokens",
                    i + 1,
                    tags.len(),
                    code_tokens.len()
                )));
            }
        }
        samples.push(CodeSample {
            code_tokens,
            doc_tokens: rec.doc.as_deref().map(tokenize),
            clone_class: rec.clone_class,
            tags: rec.tags,
            length_bucket: rec.length_bucket,
            cpx_bucket: rec.cpx_bucket,
        });
    }
    Ok(Corpus {
        samples,
        length_edges: header.length_edges,
    })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    read_corpus(BufReader::new(File::open(path)?))
}
