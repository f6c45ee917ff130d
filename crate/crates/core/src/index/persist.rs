use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenseClsIndex, IndexManifest, IndexSet, InvertedIndex, Posting, StoredDoc, WordVectorStore, INDEX_FORMAT_VERSION};
use crate::binio::{append_crc, strip_crc, ByteReader, ByteWriter};
use crate::reduce::{ReductionHeads, WordEntry};
use crate::tokenizer::Vocabulary;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CLS_FILE: &str = "cls.bin";
pub const WORDS_FILE: &str = "words.bin";
pub const INV_FILE: &str = "inv.bin";
pub const IDS_FILE: &str = "ids.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const HEADS_FILE: &str = "heads.bin";

const CLS_MAGIC: &[u8; 4] = b"CBCL";
const WORDS_MAGIC: &[u8; 4] = b"CBWD";
const INV_MAGIC: &[u8; 4] = b"CBIV";

fn encode_cls(dense: &DenseClsIndex) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(CLS_MAGIC);
    w.u32(INDEX_FORMAT_VERSION);
    w.u32(dense.dim as u32);
    w.u64(dense.len() as u64);
    w.f32s(&dense.data);
    w.finish_with_crc()
}

fn decode_cls(data: &[u8]) -> Result<DenseClsIndex> {
    let mut r = ByteReader::with_crc(data, CLS_FILE)?;
    r.expect_magic(CLS_MAGIC)?;
    r.expect_version(INDEX_FORMAT_VERSION)?;
    let dim = r.u32()? as usize;
    let n = r.u64()? as usize;
    let data = r.f32s(n * dim)?;
    r.finish()?;
    Ok(DenseClsIndex { dim, data })
}

fn write_stem(w: &mut ByteWriter, stem: &str) -> Result<()> {
    let len = u16::try_from(stem.len())
        .map_err(|_| Error::InvalidArgument(format!("stem longer than 65535 bytes: {stem:.32}...")))?;
    w.u16(len);
    w.bytes(stem.as_bytes());
    Ok(())
}

fn encode_words(store: &WordVectorStore) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(WORDS_MAGIC);
    w.u32(INDEX_FORMAT_VERSION);
    w.u32(store.dim as u32);
    w.u64(store.docs.len() as u64);
    for doc in &store.docs {
        w.u32(doc.words.len() as u32);
        for e in &doc.words {
            w.u32(e.hash);
            write_stem(&mut w, &e.stem)?;
            w.f32s(&e.vector);
            w.f32(e.gate);
        }
        w.u32(doc.removed.len() as u32);
        for stem in &doc.removed {
            write_stem(&mut w, stem)?;
        }
    }
    Ok(w.finish_with_crc())
}

fn decode_words(data: &[u8]) -> Result<WordVectorStore> {
    let mut r = ByteReader::with_crc(data, WORDS_FILE)?;
    r.expect_magic(WORDS_MAGIC)?;
    r.expect_version(INDEX_FORMAT_VERSION)?;
    let dim = r.u32()? as usize;
    let n = r.u64()? as usize;
    let mut docs = Vec::with_capacity(n);
    for _ in 0..n {
        let count = r.u32()? as usize;
        let mut words = Vec::with_capacity(count);
        for _ in 0..count {
            let hash = r.u32()?;
            let len = r.u16()? as usize;
            let stem = r.utf8(len)?;
            let vector = r.f32s(dim)?;
            let gate = r.f32()?;
            words.push(WordEntry {
                hash,
                stem,
                vector,
                gate,
            });
        }
        let removed_count = r.u32()? as usize;
        let mut removed = Vec::with_capacity(removed_count);
        for _ in 0..removed_count {
            let len = r.u16()? as usize;
            removed.push(r.utf8(len)?);
        }
        docs.push(StoredDoc { words, removed });
    }
    r.finish()?;
    Ok(WordVectorStore { dim, docs })
}

fn encode_inverted(inv: &InvertedIndex) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(INV_MAGIC);
    w.u32(INDEX_FORMAT_VERSION);
    w.u32(inv.dim as u32);
    w.u64(inv.postings.len() as u64);
    for (&hash, list) in &inv.postings {
        w.u32(hash);
        w.u32(list.len() as u32);
        for p in list {
            w.u32(p.doc);
            w.f32s(&p.vector);
        }
    }
    w.finish_with_crc()
}

fn decode_inverted(data: &[u8]) -> Result<InvertedIndex> {
    let mut r = ByteReader::with_crc(data, INV_FILE)?;
    r.expect_magic(INV_MAGIC)?;
    r.expect_version(INDEX_FORMAT_VERSION)?;
    let dim = r.u32()? as usize;
    let terms = r.u64()? as usize;
    let mut inv = InvertedIndex {
        dim,
        postings: Default::default(),
    };
    let mut last: Option<u32> = None;
    for _ in 0..terms {
        let hash = r.u32()?;
        if last.is_some_and(|l| l >= hash) {
            return Err(Error::BadFormat(format!("{INV_FILE}: hashes not strictly sorted")));
        }
        last = Some(hash);
        let n = r.u32()? as usize;
        let mut list = Vec::with_capacity(n);
        for _ in 0..n {
            let doc = r.u32()?;
            if list.last().is_some_and(|p: &Posting| p.doc >= doc) {
                return Err(Error::BadFormat(format!("{INV_FILE}: postings not sorted")));
            }
            list.push(Posting {
                doc,
                vector: r.f32s(dim)?,
            });
        }
        inv.postings.insert(hash, list);
    }
    r.finish()?;
    Ok(inv)
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("bad escape {other:?} in {IDS_FILE}"),
                })
            }
        }
    }
    Ok(out)
}

fn encode_ids(ids: &[String], texts: &[String]) -> String {
    let mut out = String::new();
    for (i, (id, text)) in ids.iter().zip(texts).enumerate() {
        out.push_str(&format!("{i}\t{}\t{}\n", escape_field(id), escape_field(text)));
    }
    out
}

fn decode_ids(src: &str) -> Result<(Vec<String>, Vec<String>)> {
    let mut ids = Vec::new();
    let mut texts = Vec::new();
    for (i, line) in src.lines().enumerate() {
        let mut parts = line.splitn(3, '\t');
        let (Some(ord), Some(id), Some(text)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("{IDS_FILE}: expected 3 tab-separated fields"),
            });
        };
        if ord.parse::<usize>().ok() != Some(i) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("{IDS_FILE}: ordinal {ord:?} out of sequence"),
            });
        }
        ids.push(unescape_field(id, i + 1)?);
        texts.push(unescape_field(text, i + 1)?);
    }
    Ok((ids, texts))
}

/// In-memory encoding of every index file, keyed by file name.
pub(crate) fn encode_files(index: &IndexSet) -> Result<Vec<(&'static str, Vec<u8>)>> {
    let mut manifest = serde_json::to_vec_pretty(&index.manifest)?;
    manifest.push(b'\n');
    let mut files = vec![
        (MANIFEST_FILE, manifest),
        (CLS_FILE, encode_cls(&index.dense)),
        (WORDS_FILE, encode_words(&index.store)?),
        (IDS_FILE, encode_ids(&index.ids, &index.texts).into_bytes()),
        (VOCAB_FILE, index.vocab.to_text().into_bytes()),
        // The standalone heads format has no checksum; the index copy gets one.
        (HEADS_FILE, append_crc(index.heads.to_bytes())),
    ];
    if let Some(inv) = &index.inverted {
        files.push((INV_FILE, encode_inverted(inv)));
    }
    Ok(files)
}

pub fn save(index: &IndexSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in encode_files(index)? {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    if index.inverted.is_none() {
        let stale = dir.join(INV_FILE);
        if stale.exists() {
            std::fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
    }
    Ok(())
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    std::fs::read(&path).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: impl AsRef<Path>) -> Result<IndexSet> {
    let dir = dir.as_ref();
    let manifest: IndexManifest = serde_json::from_slice(&read(dir, MANIFEST_FILE)?)?;
    if manifest.format_version != INDEX_FORMAT_VERSION {
        return Err(Error::BadFormat(format!(
            "index format version {} unsupported",
            manifest.format_version
        )));
    }
    let dense = decode_cls(&read(dir, CLS_FILE)?)?;
    let store = decode_words(&read(dir, WORDS_FILE)?)?;
    let ids_src = String::from_utf8(read(dir, IDS_FILE)?)
        .map_err(|_| Error::BadFormat(format!("{IDS_FILE}: invalid UTF-8")))?;
    let (ids, texts) = decode_ids(&ids_src)?;
    let vocab = Vocabulary::parse(
        &String::from_utf8(read(dir, VOCAB_FILE)?)
            .map_err(|_| Error::BadFormat(format!("{VOCAB_FILE}: invalid UTF-8")))?,
    )?;
    let heads = ReductionHeads::from_bytes(strip_crc(&read(dir, HEADS_FILE)?, HEADS_FILE)?)?;
    let inverted = if manifest.em_enabled {
        let inv = decode_inverted(&read(dir, INV_FILE)?)?;
        if inv != InvertedIndex::from_store(&store) {
            return Err(Error::BadFormat(format!(
                "{INV_FILE} disagrees with {WORDS_FILE}"
            )));
        }
        Some(inv)
    } else {
        None
    };
    IndexSet::assemble(manifest, ids, texts, dense, store, inverted, vocab, heads)
}

/// Byte accounting per structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageStats {
    pub doc_count: usize,
    pub total_word_entries: usize,
    pub vectors_per_doc: f64,
    /// `doc_count * d_cls * 4`
    pub cls_payload_bytes: usize,
    /// `total_word_entries * word_dim * 4`
    pub word_vector_bytes: usize,
    pub posting_count: usize,
    pub term_count: usize,
    pub file_bytes: Vec<(String, usize)>,
}

impl StorageStats {
    pub fn of(index: &IndexSet) -> Result<Self> {
        let m = &index.manifest;
        let file_bytes = encode_files(index)?
            .into_iter()
            .map(|(n, b)| (n.to_string(), b.len()))
            .collect();
        Ok(Self {
            doc_count: m.doc_count,
            total_word_entries: m.total_word_entries,
            vectors_per_doc: m.total_word_entries as f64 / m.doc_count.max(1) as f64,
            cls_payload_bytes: index.dense.data.len() * 4,
            word_vector_bytes: m.total_word_entries * m.word_dim * 4,
            posting_count: index.inverted.as_ref().map_or(0, InvertedIndex::posting_count),
            term_count: index.inverted.as_ref().map_or(0, InvertedIndex::term_count),
            file_bytes,
        })
    }
}
