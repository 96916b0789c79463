//! Corpus ingestion and the tokenized-corpus cache.
//!
//! A corpus is UTF-8 text with one document per line. Paired data uses a
//! single tab separating source from target. Lines that are not valid UTF-8
//! (and, for paired mode, lines missing the tab) are skipped with a counted
//! warning rather than aborting the run.
//!
//! The cache file stores varint-encoded id sequences:
//!
//! ```text
//! magic b"FGTC" | u32 LE version=1 | u64 LE doc count
//! per document: varint token count, then that many varint token ids
//! ```
//!
//! Varints are unsigned LEB128.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// One tokenized document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub tokens: Vec<u32>,
}

/// Raw text lines plus skip statistics.
pub struct RawCorpus {
    pub lines: Vec<String>,
    /// Count of lines dropped for invalid UTF-8.
    pub skipped_malformed: usize,
}

/// Read a corpus file line by line, skipping invalid UTF-8 lines.
pub fn read_lines(path: &Path) -> Result<RawCorpus> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open corpus {}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let mut lines = Vec::new();
    let mut skipped_malformed = 0;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        if buf.last() == Some(&b'\n') {
            buf.pop();
        }
        if buf.last() == Some(&b'\r') {
            buf.pop();
        }
        match std::str::from_utf8(&buf) {
            Ok(s) => lines.push(s.to_string()),
            Err(_) => {
                skipped_malformed += 1;
                log::warn!("skipping non-UTF-8 corpus line");
            }
        }
    }
    Ok(RawCorpus {
        lines,
        skipped_malformed,
    })
}

/// Load and tokenize an unpaired corpus. Documents are yielded in file
/// order; empty lines are dropped (a [`Document`] is never empty).
pub fn load_corpus(
    path: &Path,
    vocab: &Vocab,
    lowercase: bool,
    max_len: Option<usize>,
) -> Result<(Vec<Document>, usize)> {
    let raw = read_lines(path)?;
    let mut docs = Vec::new();
    for (i, line) in raw.lines.iter().enumerate() {
        let tokens = vocab.encode(line, lowercase, max_len);
        if tokens.is_empty() {
            continue;
        }
        docs.push(Document {
            id: i.to_string(),
            tokens,
        });
    }
    Ok((docs, raw.skipped_malformed))
}

/// Load a paired corpus (`source<TAB>target` per line). Lines without a tab
/// or with an empty side are counted as skipped.
pub fn load_pairs(
    path: &Path,
    vocab: &Vocab,
    lowercase: bool,
    max_len: Option<usize>,
) -> Result<(Vec<(Document, Document)>, usize)> {
    let raw = read_lines(path)?;
    let mut skipped = raw.skipped_malformed;
    let mut pairs = Vec::new();
    for (i, line) in raw.lines.iter().enumerate() {
        let Some((src, tgt)) = line.split_once('\t') else {
            if !line.trim().is_empty() {
                skipped += 1;
                log::warn!("skipping corpus line {i}: no tab separator");
            }
            continue;
        };
        let src_tokens = vocab.encode(src, lowercase, max_len);
        let tgt_tokens = vocab.encode(tgt, lowercase, max_len);
        if src_tokens.is_empty() || tgt_tokens.is_empty() {
            skipped += 1;
            continue;
        }
        pairs.push((
            Document {
                id: format!("{i}.src"),
                tokens: src_tokens,
            },
            Document {
                id: format!("{i}.tgt"),
                tokens: tgt_tokens,
            },
        ));
    }
    Ok((pairs, skipped))
}

// ---------------------------------------------------------------------------
// varints

pub fn write_varint<W: Write>(w: &mut W, mut value: u64) -> std::io::Result<()> {
    loop {
        let byte = (value & 0x7f) as u8;
        value >>= 7;
        if value == 0 {
            return w.write_all(&[byte]);
        }
        w.write_all(&[byte | 0x80])?;
    }
}

pub fn read_varint<R: Read>(r: &mut R) -> Result<u64> {
    let mut value = 0u64;
    let mut shift = 0;
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        if shift >= 64 {
            return Err(Error::data("varint overflows u64"));
        }
        value |= ((byte[0] & 0x7f) as u64) << shift;
        if byte[0] & 0x80 == 0 {
            return Ok(value);
        }
        shift += 7;
    }
}

// ---------------------------------------------------------------------------
// tokenized-corpus cache

const CACHE_MAGIC: &[u8; 4] = b"FGTC";
const CACHE_VERSION: u32 = 1;

pub fn write_token_cache(path: &Path, docs: &[Vec<u32>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(docs.len() as u64).to_le_bytes())?;
    for doc in docs {
        write_varint(&mut w, doc.len() as u64)?;
        for &id in doc {
            write_varint(&mut w, id as u64)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_token_cache(path: &Path) -> Result<Vec<Vec<u32>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::data("not a token cache file (bad magic)"));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != CACHE_VERSION {
        return Err(Error::data(format!("unsupported token cache version {version}")));
    }
    let mut cbuf = [0u8; 8];
    r.read_exact(&mut cbuf)?;
    let count = u64::from_le_bytes(cbuf);
    let mut docs = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = read_varint(&mut r)? as usize;
        let mut doc = Vec::with_capacity(len);
        for _ in 0..len {
            doc.push(read_varint(&mut r)? as u32);
        }
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn vocab() -> Vocab {
        Vocab::from_tokens(["one", "two", "three"].map(String::from)).unwrap()
    }

    #[test]
    fn empty_file_yields_zero_documents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "").unwrap();
        let (docs, skipped) = load_corpus(&path, &vocab(), true, None).unwrap();
        assert!(docs.is_empty());
        assert_eq!(skipped, 0);
    }

    #[test]
    fn three_line_file_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "one\ntwo two\nthree\n").unwrap();
        let (docs, _) = load_corpus(&path, &vocab(), true, None).unwrap();
        assert_eq!(docs.len(), 3);
        assert_eq!(docs[0].tokens, vec![6]);
        assert_eq!(docs[1].tokens, vec![7, 7]);
        assert_eq!(docs[2].tokens, vec![8]);
    }

    #[test]
    fn invalid_utf8_line_is_skipped_with_warning_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let mut bytes = b"one\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xfe, b'\n']);
        bytes.extend_from_slice(b"two\n");
        std::fs::write(&path, bytes).unwrap();
        let (docs, skipped) = load_corpus(&path, &vocab(), true, None).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(skipped, 1);
    }

    #[test]
    fn unreadable_path_is_an_error() {
        assert!(load_corpus(Path::new("/no/such/file"), &vocab(), true, None).is_err());
    }

    #[test]
    fn paired_lines_split_on_first_tab() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        std::fs::write(&path, "one two\tthree\nno tab here\ntwo\tone one\n").unwrap();
        let (pairs, skipped) = load_pairs(&path, &vocab(), true, None).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(skipped, 1);
        assert_eq!(pairs[0].0.tokens, vec![6, 7]);
        assert_eq!(pairs[0].1.tokens, vec![8]);
    }

    #[test]
    fn varint_round_trip() {
        for value in [0u64, 1, 127, 128, 300, 1 << 20, u64::MAX] {
            let mut buf = Vec::new();
            write_varint(&mut buf, value).unwrap();
            assert_eq!(read_varint(&mut Cursor::new(&buf)).unwrap(), value);
        }
    }

    #[test]
    fn token_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        let docs = vec![vec![1, 2, 300, 70000], vec![], vec![6, 6, 6]];
        write_token_cache(&path, &docs).unwrap();
        assert_eq!(read_token_cache(&path).unwrap(), docs);
    }
}
