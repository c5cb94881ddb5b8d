//! Document loading, seeded splits, and fixed-length token chunks for MLM.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{encode, normalize_whitespace, Vocabulary};

pub const DEFAULT_CHUNK_SIZE: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    /// 0 = true, 1 = fake.
    pub label: Option<u8>,
    pub category: Option<String>,
}

impl Document {
    pub fn new(text: &str) -> Result<Self> {
        let text = normalize_whitespace(text);
        if text.is_empty() {
            return Err(Error::Data("document text is empty".into()));
        }
        Ok(Self {
            text,
            label: None,
            category: None,
        })
    }

    pub fn labeled(text: &str, label: u8) -> Result<Self> {
        if label > 1 {
            return Err(Error::Data(format!("label must be 0 or 1, got {label}")));
        }
        let mut d = Self::new(text)?;
        d.label = Some(label);
        Ok(d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// `.csv` → CSV; `.jsonl` / `.json` / `.ndjson` → JSON lines.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => Ok(Self::Csv),
            Some("jsonl" | "json" | "ndjson") => Ok(Self::Jsonl),
            _ => Err(Error::Data(format!(
                "cannot infer format of {} (expected .csv or .jsonl)",
                path.display()
            ))),
        }
    }
}

fn record_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Record {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_label(raw: &str) -> std::result::Result<Option<u8>, String> {
    match raw.trim() {
        "" => Ok(None),
        "0" => Ok(Some(0)),
        "1" => Ok(Some(1)),
        other => Err(format!("label must be 0 or 1, got `{other}`")),
    }
}

/// Reads documents in file order.
pub fn load_documents(path: &Path, format: Format) -> Result<Vec<Document>> {
    match format {
        Format::Csv => load_csv(path),
        Format::Jsonl => load_jsonl(path),
    }
}

fn load_csv(path: &Path) -> Result<Vec<Document>> {
    let bytes = std::fs::read(path)?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let headers = reader.headers().map_err(|e| record_error(path, 1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let text_col = col("text").ok_or_else(|| record_error(path, 1, "missing `text` column"))?;
    let (label_col, cat_col) = (col("label"), col("category"));

    let mut docs = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            record_error(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let text = row.get(text_col).ok_or_else(|| record_error(path, line, "missing `text` field"))?;
        let text = normalize_whitespace(text);
        if text.is_empty() {
            return Err(record_error(path, line, "empty `text` field"));
        }
        let label = match label_col.and_then(|c| row.get(c)) {
            Some(raw) => parse_label(raw).map_err(|m| record_error(path, line, m))?,
            None => None,
        };
        let category = cat_col
            .and_then(|c| row.get(c))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        docs.push(Document { text, label, category });
    }
    Ok(docs)
}

fn load_jsonl(path: &Path) -> Result<Vec<Document>> {
    let content = std::fs::read_to_string(path)?;
    let mut docs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| record_error(path, line_no, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| record_error(path, line_no, "expected a JSON object"))?;
        let text = obj
            .get("text")
            .and_then(|v| v.as_str())
            .ok_or_else(|| record_error(path, line_no, "missing `text` field"))?;
        let text = normalize_whitespace(text);
        if text.is_empty() {
            return Err(record_error(path, line_no, "empty `text` field"));
        }
        let label = match obj.get("label") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::Number(n)) => match n.as_u64() {
                Some(l @ (0 | 1)) => Some(l as u8),
                _ => return Err(record_error(path, line_no, format!("label must be 0 or 1, got {n}"))),
            },
            Some(serde_json::Value::String(s)) => parse_label(s).map_err(|m| record_error(path, line_no, m))?,
            Some(other) => {
                return Err(record_error(path, line_no, format!("label must be 0 or 1, got {other}")))
            }
        };
        let category = obj.get("category").and_then(|v| v.as_str()).map(str::to_string);
        docs.push(Document { text, label, category });
    }
    Ok(docs)
}

/// Writes documents as JSON lines (keys `text`, `label`, `category`).
pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes documents as CSV with header `text,label,category`.
pub fn write_csv(path: &Path, docs: &[Document]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["text", "label", "category"])?;
    for d in docs {
        let label = d.label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([d.text.as_str(), label.as_str(), d.category.as_deref().unwrap_or("")])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Train, validation, test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitSpec {
    /// 80/10/10 used for the MLM corpus.
    pub fn mlm(seed: u64) -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            seed,
        }
    }

    /// 68/12/20 used for the labeled datasets.
    pub fn classification(seed: u64) -> Self {
        Self {
            ratios: [0.68, 0.12, 0.20],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config(format!("split ratios must be non-negative, got {:?}", self.ratios)));
        }
        let total: f64 = self.ratios.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {total}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn select<T: Clone>(&self, items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
        (pick(&self.train), pick(&self.val), pick(&self.test))
    }
}

/// `floor(n·r)`, tolerant of ratios like 0.29 whose product lands a hair below an integer.
fn cut(n: usize, r: f64) -> usize {
    ((n as f64 * r) + 1e-9).floor().min(n as f64) as usize
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Seeded shuffle, then contiguous cuts at `floor(n·r_train)` and
/// `floor(n·(r_train + r_val))`.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Data("cannot split an empty document set".into()));
    }
    let order = shuffled(n, spec.seed);
    let a = cut(n, spec.ratios[0]);
    let b = cut(n, spec.ratios[0] + spec.ratios[1]).max(a);
    Ok(SplitIndices {
        train: order[..a].to_vec(),
        val: order[a..b].to_vec(),
        test: order[b..].to_vec(),
    })
}

pub fn split<T: Clone>(items: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    Ok(split_indices(items.len(), spec)?.select(items))
}

/// Alternative validation scheme: cut off `test_ratio` as test, then hold
/// out `val_fraction` of the remaining training part as validation.
pub fn split_indices_holdout(n: usize, test_ratio: f64, val_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(0.0..1.0).contains(&test_ratio) || !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "holdout fractions must lie in [0, 1), got test={test_ratio} val={val_fraction}"
        )));
    }
    if n == 0 {
        return Err(Error::Data("cannot split an empty document set".into()));
    }
    let order = shuffled(n, seed);
    let n_train_all = cut(n, 1.0 - test_ratio);
    let n_val = cut(n_train_all, val_fraction);
    let n_train = n_train_all - n_val;
    Ok(SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train_all].to_vec(),
        test: order[n_train_all..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub ids: Vec<usize>,
    pub word_begin: Vec<bool>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChunkStream {
    pub chunks: Vec<Chunk>,
    pub total_tokens: usize,
    pub dropped_tokens: usize,
}

/// Encodes documents in order, concatenates the token streams and cuts them
/// into consecutive `chunk_size` blocks. The trailing partial block is dropped.
pub fn chunk_stream(docs: &[Document], vocab: &Vocabulary, chunk_size: usize) -> Result<ChunkStream> {
    let mut ids = Vec::new();
    let mut word_begin = Vec::new();
    for d in docs {
        let enc = encode(vocab, &d.text);
        ids.extend(enc.ids);
        word_begin.extend(enc.word_begin);
    }
    chunk_tokens(&ids, &word_begin, chunk_size)
}

pub fn chunk_tokens(ids: &[usize], word_begin: &[bool], chunk_size: usize) -> Result<ChunkStream> {
    if chunk_size < 2 {
        return Err(Error::Config(format!("chunk size must be at least 2, got {chunk_size}")));
    }
    debug_assert_eq!(ids.len(), word_begin.len());
    let chunks: Vec<Chunk> = ids
        .chunks_exact(chunk_size)
        .zip(word_begin.chunks_exact(chunk_size))
        .map(|(i, w)| Chunk {
            ids: i.to_vec(),
            word_begin: w.to_vec(),
        })
        .collect();
    Ok(ChunkStream {
        total_tokens: ids.len(),
        dropped_tokens: ids.len() % chunk_size,
        chunks,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::io::Write;

    use proptest::prelude::*;

    use super::*;
    use crate::tokenizer::train_vocab;

    fn write_tmp(suffix: &str, content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_csv_in_order() {
        let f = write_tmp(".csv", "text,label,category\nx,0,S\n\"y, quoted\",1,\n");
        let docs = load_documents(f.path(), Format::Csv).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!((docs[0].text.as_str(), docs[0].label, docs[0].category.as_deref()), ("x", Some(0), Some("S")));
        assert_eq!((docs[1].text.as_str(), docs[1].label, docs[1].category.as_deref()), ("y, quoted", Some(1), None));
    }

    #[test]
    fn loads_jsonl_in_order() {
        let f = write_tmp(".jsonl", "{\"text\":\"x\",\"label\":0}\n\n{\"text\":\"y\",\"label\":1,\"category\":\"T\"}\n");
        let docs = load_documents(f.path(), Format::Jsonl).unwrap();
        assert_eq!(docs.iter().map(|d| (d.text.as_str(), d.label)).collect::<Vec<_>>(), [("x", Some(0)), ("y", Some(1))]);
        assert_eq!(docs[1].category.as_deref(), Some("T"));
    }

    #[test]
    fn empty_files_give_no_documents() {
        for (suffix, fmt) in [(".csv", Format::Csv), (".jsonl", Format::Jsonl)] {
            let f = write_tmp(suffix, "");
            assert!(load_documents(f.path(), fmt).unwrap().is_empty());
        }
    }

    #[test]
    fn bad_label_names_the_line() {
        let f = write_tmp(".csv", "text,label\na,0\nb,2\n");
        let err = load_documents(f.path(), Format::Csv).unwrap_err();
        assert!(matches!(err, Error::Record { line: 3, .. }), "{err}");
        let f = write_tmp(".jsonl", "{\"text\":\"a\",\"label\":1}\n{\"text\":\"b\",\"label\":2}\n");
        let err = load_documents(f.path(), Format::Jsonl).unwrap_err();
        assert!(matches!(err, Error::Record { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_text_and_malformed_rows_are_errors() {
        let f = write_tmp(".csv", "body,label\na,0\n");
        assert!(matches!(load_documents(f.path(), Format::Csv), Err(Error::Record { line: 1, .. })));
        let f = write_tmp(".jsonl", "{\"text\":\"a\"}\n{\"label\":1}\n");
        assert!(matches!(load_documents(f.path(), Format::Jsonl), Err(Error::Record { line: 2, .. })));
        let f = write_tmp(".jsonl", "{\"text\":\"a\"}\nnot json\n");
        assert!(matches!(load_documents(f.path(), Format::Jsonl), Err(Error::Record { line: 2, .. })));
        let f = write_tmp(".csv", "text,label\na,0\nb,1,extra\n");
        assert!(matches!(load_documents(f.path(), Format::Csv), Err(Error::Record { .. })));
    }

    #[test]
    fn csv_and_jsonl_writers_round_trip() {
        let docs = vec![
            Document::labeled("hello, \"world\"", 1).unwrap(),
            Document { text: "plain".into(), label: None, category: Some("B".into()) },
        ];
        let dir = tempfile::tempdir().unwrap();
        let (c, j) = (dir.path().join("d.csv"), dir.path().join("d.jsonl"));
        write_csv(&c, &docs).unwrap();
        write_jsonl(&j, &docs).unwrap();
        assert_eq!(load_documents(&c, Format::Csv).unwrap(), docs);
        assert_eq!(load_documents(&j, Format::Jsonl).unwrap(), docs);
    }

    #[test]
    fn split_sizes_follow_floor_arithmetic() {
        let s = split_indices(10, &SplitSpec::mlm(7)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split_indices(100, &SplitSpec::classification(7)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (68, 12, 20));
        let s = split_indices(100, &SplitSpec { ratios: [0.29, 0.29, 0.42], seed: 0 }).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (29, 29, 42));
    }

    #[test]
    fn split_is_deterministic_and_seed_dependent() {
        let a = split_indices(50, &SplitSpec::classification(3)).unwrap();
        let b = split_indices(50, &SplitSpec::classification(3)).unwrap();
        let c = split_indices(50, &SplitSpec::classification(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(split_indices(10, &SplitSpec { ratios: [0.5, 0.5, 0.5], seed: 0 }).is_err());
        assert!(split_indices(10, &SplitSpec { ratios: [1.2, -0.1, -0.1], seed: 0 }).is_err());
        assert!(split_indices(0, &SplitSpec::mlm(0)).is_err());
    }

    #[test]
    fn holdout_split_takes_validation_from_train() {
        let s = split_indices_holdout(100, 0.2, 0.15, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (68, 12, 20));
        let s = split_indices_holdout(40, 0.2, 0.15, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (28, 4, 8));
    }

    #[test]
    fn chunking_boundaries() {
        for (total, chunks, dropped) in [(300, 2, 44), (128, 1, 0), (127, 0, 127)] {
            let ids: Vec<usize> = (0..total).collect();
            let wb = vec![true; total];
            let s = chunk_tokens(&ids, &wb, 128).unwrap();
            assert_eq!((s.chunks.len(), s.dropped_tokens), (chunks, dropped));
        }
        assert!(chunk_tokens(&[1, 2], &[true, true], 1).is_err());
    }

    #[test]
    fn chunk_stream_concatenates_in_document_order() {
        let docs: Vec<Document> = ["ab ab ba", "ba ab", "aab"].iter().map(|t| Document::new(t).unwrap()).collect();
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let vocab = train_vocab(&texts, 12).unwrap();
        let stream: Vec<usize> = docs.iter().flat_map(|d| encode(&vocab, &d.text).ids).collect();
        let s = chunk_stream(&docs, &vocab, 3).unwrap();
        let flat: Vec<usize> = s.chunks.iter().flat_map(|c| c.ids.clone()).collect();
        assert_eq!(flat, stream[..flat.len()]);
        assert_eq!(s.total_tokens, stream.len());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..300, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let r_train = a;
            let r_val = (1.0 - a) * b;
            let spec = SplitSpec { ratios: [r_train, r_val, 1.0 - r_train - r_val], seed };
            let s = split_indices(n, &spec).unwrap();
            let all: BTreeSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            prop_assert_eq!(all.len(), n);
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
            prop_assert!(all.iter().all(|&i| i < n));
        }

        #[test]
        fn chunk_conservation(total in 0usize..2000, size in 2usize..300) {
            let ids: Vec<usize> = (0..total).map(|i| i % 17).collect();
            let wb: Vec<bool> = (0..total).map(|i| i % 3 == 0).collect();
            let s = chunk_tokens(&ids, &wb, size).unwrap();
            prop_assert_eq!(s.chunks.iter().map(Chunk::len).sum::<usize>(), total / size * size);
            prop_assert!(s.chunks.iter().all(|c| c.len() == size && c.word_begin.len() == size));
            let flat: Vec<usize> = s.chunks.iter().flat_map(|c| c.ids.clone()).collect();
            prop_assert_eq!(&flat[..], &ids[..flat.len()]);
        }
    }
}
