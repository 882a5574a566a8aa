//! Character vocabularies, tokenization and dataset manifests.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::synthesis::RenderSpec;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bidirectional map between characters and indices. Specials sit at 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index_of: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index_of.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index(&self, token: &str) -> Option<usize> {
        self.index_of.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    fn char_index(&self, c: char) -> usize {
        let mut buf = [0u8; 4];
        self.index(c.encode_utf8(&mut buf)).unwrap_or(UNK)
    }

    /// Newline-separated tokens, specials first.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(Error::Config("vocabulary file must start with the four specials".into()));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Builds a character vocabulary ordered by first occurrence.
pub fn build_vocab<S: AsRef<str>>(lines: &[S]) -> Result<Vocabulary> {
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen = std::collections::HashSet::new();
    for line in lines {
        for c in line.as_ref().chars() {
            if c == '\n' {
                return Err(Error::InvalidArgument("corpus lines must not contain newlines".into()));
            }
            if seen.insert(c) {
                tokens.push(c.to_string());
            }
        }
    }
    if seen.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Vocabulary::from_tokens(tokens)
}

/// Character indices followed by EOS, truncated so the result has at most `max_len` ids.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut ids: Vec<usize> = text.chars().take(max_len - 1).map(|c| vocab.char_index(c)).collect();
    ids.push(EOS);
    ids
}

pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        if id >= vocab.len() {
            return Err(Error::IndexOutOfVocabulary {
                index: id,
                size: vocab.len(),
            });
        }
        match id {
            EOS => break,
            PAD | BOS => {}
            _ => out.push_str(&vocab.tokens[id]),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Tit,
    Ocr,
    Mt,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tit" => Ok(Self::Tit),
            "ocr" => Ok(Self::Ocr),
            "mt" => Ok(Self::Mt),
            _ => Err(Error::InvalidArgument(format!("unknown dataset kind {s:?}"))),
        }
    }
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render: Option<RenderSpec>,
}

/// A loaded record: manifest fields plus the decoded image.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub image: Option<Image>,
    pub source: Option<String>,
    pub target: Option<String>,
    pub render: Option<RenderSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub records: Vec<Record>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TitExample {
    pub image: Image,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcrExample {
    pub image: Image,
    pub source: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Accepts either a dataset directory or the manifest file itself.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let path = manifest_path(path);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::record(format!("line {}", n + 1), e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.records
            .iter()
            .find_map(|r| r.image.as_ref().map(|i| (i.height, i.width)))
    }

    /// Fails on the first record whose image is not `height x width`.
    pub fn check_image_shape(&self, height: usize, width: usize) -> Result<()> {
        for r in &self.records {
            if let Some(img) = &r.image {
                if (img.height, img.width) != (height, width) {
                    return Err(Error::record(
                        &r.id,
                        format!(
                            "image is {}x{}, expected {height}x{width}",
                            img.height, img.width
                        ),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn sources(&self) -> Vec<&str> {
        self.records.iter().filter_map(|r| r.source.as_deref()).collect()
    }

    pub fn targets(&self) -> Vec<&str> {
        self.records.iter().filter_map(|r| r.target.as_deref()).collect()
    }

    pub fn tit_examples(&self, target_vocab: &Vocabulary, max_len: usize) -> Result<Vec<TitExample>> {
        self.records
            .iter()
            .map(|r| {
                Ok(TitExample {
                    image: require(&r.id, "image", r.image.clone())?,
                    target: encode(require(&r.id, "target", r.target.as_deref())?, target_vocab, max_len),
                })
            })
            .collect()
    }

    pub fn ocr_examples(&self, source_vocab: &Vocabulary, max_len: usize) -> Result<Vec<OcrExample>> {
        self.records
            .iter()
            .map(|r| {
                Ok(OcrExample {
                    image: require(&r.id, "image", r.image.clone())?,
                    source: encode(require(&r.id, "source", r.source.as_deref())?, source_vocab, max_len),
                })
            })
            .collect()
    }

    pub fn mt_examples(
        &self,
        source_vocab: &Vocabulary,
        target_vocab: &Vocabulary,
        max_src: usize,
        max_tgt: usize,
    ) -> Result<Vec<MtExample>> {
        self.records
            .iter()
            .map(|r| {
                Ok(MtExample {
                    source: encode(require(&r.id, "source", r.source.as_deref())?, source_vocab, max_src),
                    target: encode(require(&r.id, "target", r.target.as_deref())?, target_vocab, max_tgt),
                })
            })
            .collect()
    }
}

fn require<T>(id: &str, field: &str, v: Option<T>) -> Result<T> {
    v.ok_or_else(|| Error::record(id, format!("missing field {field:?}")))
}

/// Loads a manifest and its images. All images must share the shape of the first.
pub fn load_dataset(path: &Path, kind: DatasetKind) -> Result<Dataset> {
    let manifest = manifest_path(path);
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut shape = None;
    for m in read_manifest(&manifest)? {
        let needs_image = kind != DatasetKind::Mt;
        let (need_src, need_tgt) = match kind {
            DatasetKind::Tit => (false, true),
            DatasetKind::Ocr => (true, false),
            DatasetKind::Mt => (true, true),
        };
        if need_src && m.source.is_none() {
            return Err(Error::record(&m.id, "missing field \"source\""));
        }
        if need_tgt && m.target.is_none() {
            return Err(Error::record(&m.id, "missing field \"target\""));
        }
        let image = if needs_image {
            let rel = m
                .image_path
                .as_deref()
                .ok_or_else(|| Error::record(&m.id, "missing field \"image_path\""))?;
            let p = root.join(rel);
            if !p.is_file() {
                return Err(Error::record(&m.id, format!("image file {} not found", p.display())));
            }
            let img = Image::load_png(&p).map_err(|e| Error::record(&m.id, e.to_string()))?;
            match shape {
                None => shape = Some((img.height, img.width)),
                Some((h, w)) if (h, w) != (img.height, img.width) => {
                    return Err(Error::record(
                        &m.id,
                        format!("image is {}x{}, expected {h}x{w}", img.height, img.width),
                    ))
                }
                _ => {}
            }
            Some(img)
        } else {
            None
        };
        records.push(Record {
            id: m.id,
            image,
            source: m.source,
            target: m.target,
            render: m.render,
        });
    }
    Ok(Dataset { kind, records })
}

/// Writes `DIR/manifest.jsonl` and `DIR/images/<id>.png`; returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(dataset.len());
    for r in &dataset.records {
        let image_path = match &r.image {
            Some(img) => {
                let rel = format!("images/{}.png", r.id);
                let p = dir.join(&rel);
                if let Some(parent) = p.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                img.save_png(&p)?;
                Some(rel)
            }
            None => None,
        };
        manifest.push(ManifestRecord {
            id: r.id.clone(),
            image_path,
            source: r.source.clone(),
            target: r.target.clone(),
            render: r.render.clone(),
        });
    }
    let path = dir.join(MANIFEST);
    write_manifest(&path, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_from_ab() {
        let v = build_vocab(&["ab", "ba"]).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<s>", "</s>", "<unk>", "a", "b"]);
        assert_eq!(encode("ab", &v, 80), vec![4, 5, EOS]);
        assert_eq!(encode("a?", &v, 80), vec![4, UNK, EOS]);
        assert_eq!(decode(&[BOS, 4, 5, EOS, PAD], &v).unwrap(), "ab");
        assert_eq!(decode(&[EOS], &v).unwrap(), "");
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(build_vocab(&["", ""]), Err(Error::EmptyCorpus)));
        let none: [&str; 0] = [];
        assert!(matches!(build_vocab(&none), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn digits_give_fourteen() {
        assert_eq!(build_vocab(&["0123456789", "9876"]).unwrap().len(), 14);
    }

    #[test]
    fn truncation_keeps_eos_last() {
        let v = build_vocab(&["abc"]).unwrap();
        assert_eq!(encode("abcabc", &v, 3), vec![4, 5, EOS]);
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let v = build_vocab(&["a"]).unwrap();
        let err = decode(&[9], &v).unwrap_err();
        assert!(err.to_string().starts_with("index out of vocabulary"));
    }

    #[test]
    fn vocab_text_roundtrip() {
        let v = build_vocab(&["héllo wörld"]).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
    }
}
