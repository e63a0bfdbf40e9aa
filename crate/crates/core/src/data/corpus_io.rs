//! On-disk corpus: `vocab.txt`, `interactions.tsv`, `features.bin`, and
//! optionally `clusters.tsv` for synthetic corpora.
//!
//! `features.bin` layout (little-endian):
//!
//! ```text
//! "ALTFEAT1" | u32 num_records | u32 dim | { u16 id_len | id bytes | dim × f32 }*
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{Corpus, Sample, TagVocabulary};
use crate::error::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const FEATURES_FILE: &str = "features.bin";
pub const CLUSTERS_FILE: &str = "clusters.tsv";
pub const FEATURES_MAGIC: &[u8; 8] = b"ALTFEAT1";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn encode_features<'a>(dim: usize, records: impl ExactSizeIterator<Item = (&'a str, &'a [f64])>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURES_MAGIC);
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for (id, feats) in records {
        if id.len() > u16::MAX as usize {
            return Err(Error::Format(format!("image id `{id}` too long")));
        }
        if feats.len() != dim {
            return Err(Error::dim(format!("image `{id}` has {} features, expected {dim}", feats.len())));
        }
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for &v in feats {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_features(path: &Path, corpus: &Corpus) -> Result<()> {
    let bytes = encode_features(
        corpus.feature_dim(),
        corpus.samples.iter().map(|s| (s.image_id.as_str(), s.features.as_slice())),
    )?;
    write_atomic(path, &bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads `features.bin` into `(image_id, features)` records in file order.
pub fn load_features(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let bytes = read(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != FEATURES_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format(format!("{}: image id is not UTF-8", path.display())))?
            .to_string();
        let feats = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        out.push((id, feats));
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!("{}: trailing bytes", path.display())));
    }
    Ok(out)
}

fn vocab_text(vocab: &TagVocabulary) -> String {
    let mut s = vocab.tags().join("\n");
    s.push('\n');
    s
}

fn load_vocab(path: &Path) -> Result<TagVocabulary> {
    let text = read_text(path)?;
    let mut tags = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            return Err(parse_err(path, i + 1, "empty tag"));
        }
        if tags.iter().any(|t: &String| t == line) {
            return Err(parse_err(path, i + 1, format!("duplicate tag `{line}`")));
        }
        tags.push(line.to_string());
    }
    TagVocabulary::new(tags)
}

fn interactions_text(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in &corpus.samples {
        let tags: Vec<&str> = s.tags.iter().map(|&t| corpus.vocab.tag(t)).collect();
        out.push_str(&format!("{}\t{}\t{}\n", s.image_id, s.user_id, tags.join(",")));
    }
    out
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(VOCAB_FILE), vocab_text(&corpus.vocab).as_bytes())?;
    write_atomic(&dir.join(INTERACTIONS_FILE), interactions_text(corpus).as_bytes())?;
    write_features(&dir.join(FEATURES_FILE), corpus)
}

/// Loads a corpus directory. Fails as a whole on the first malformed line,
/// unknown tag, or missing feature record.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let vocab_path = dir.join(VOCAB_FILE);
    let inter_path = dir.join(INTERACTIONS_FILE);
    let feat_path = dir.join(FEATURES_FILE);
    for p in [&vocab_path, &inter_path, &feat_path] {
        if !p.exists() {
            return Err(Error::io(
                p.as_path(),
                std::io::Error::new(std::io::ErrorKind::NotFound, "missing corpus file"),
            ));
        }
    }
    let vocab = load_vocab(&vocab_path)?;
    let mut features: HashMap<String, Vec<f64>> = load_features(&feat_path)?.into_iter().collect();

    let text = read_text(&inter_path)?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(&inter_path, i + 1, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let (image_id, user_id) = (fields[0], fields[1]);
        if image_id.is_empty() || user_id.is_empty() {
            return Err(parse_err(&inter_path, i + 1, "empty image or user id"));
        }
        let tags = vocab.parse_list(fields[2])?;
        let feats = features
            .remove(image_id)
            .ok_or_else(|| parse_err(&inter_path, i + 1, format!("no features for image `{image_id}`")))?;
        samples.push(Sample {
            image_id: image_id.to_string(),
            user_id: user_id.to_string(),
            features: feats,
            tags,
        });
    }
    Corpus::new(vocab, samples)
}

pub fn save_clusters(path: &Path, clusters: &[(String, usize)]) -> Result<()> {
    let text: String = clusters.iter().map(|(u, c)| format!("{u}\t{c}\n")).collect();
    write_atomic(path, text.as_bytes())
}

pub fn load_clusters(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let (u, c) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(path, i + 1, "expected user<TAB>cluster"))?;
            let c = c.parse().map_err(|_| parse_err(path, i + 1, "bad cluster id"))?;
            Ok((u.to_string(), c))
        })
        .collect()
}
