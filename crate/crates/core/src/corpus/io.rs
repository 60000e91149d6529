//! Corpus directory layout: `manifest.json` plus one binary file per tensor
//! (`CSC1`, u32 rank, u32 dims, little-endian f32 payload).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::sentence::{Segment, SentenceSample};
use super::{Corpus, CorpusConfig, StaticSet};
use crate::alphabet::{Language, PhonemeAlphabet};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::json::from_value_lenient;

pub const TENSOR_MAGIC: &[u8; 4] = b"CSC1";
pub const MANIFEST: &str = "manifest.json";
const VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut at = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes.get(at..at + n).ok_or_else(|| format!("truncated at byte {at}"))?;
        at += n;
        Ok(s)
    };
    if take(4)? != TENSOR_MAGIC {
        return Err("bad magic".into());
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let rank = u32_of(take(4)?);
    let shape = (0..rank).map(|_| take(4).map(u32_of)).collect::<std::result::Result<Vec<_>, _>>()?;
    let n: usize = shape.iter().product();
    let payload = take(4 * n)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - at));
    }
    Tensor::from_vec(data, &shape).map_err(|e| e.to_string())
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|m| Error::parse(path, m))
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    let inner = items[0].shape().to_vec();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend(inner);
    Tensor::from_vec(data, &shape)
}

fn unstack(t: &Tensor, path: &Path) -> Result<Vec<Tensor>> {
    if t.rank() < 2 {
        return Err(Error::parse(path, format!("expected a stacked tensor, got shape {:?}", t.shape())));
    }
    let inner = &t.shape()[1..];
    let n: usize = inner.iter().product();
    t.data().chunks(n).map(|c| Tensor::from_vec(c.to_vec(), inner)).collect()
}

#[derive(Serialize, Deserialize)]
struct SentenceEntry {
    id: String,
    phonemes: Vec<usize>,
    hand: String,
    lip: String,
    coords: String,
    #[serde(default)]
    frames: Option<String>,
    asynchrony: usize,
    clean: Vec<Segment>,
    noisy: Vec<Segment>,
}

#[derive(Serialize, Deserialize)]
struct StaticEntry {
    images: Option<String>,
    clean_labels: Vec<usize>,
    noisy_labels: Vec<usize>,
    sources: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    language: Language,
    seed: u64,
    config: Value,
    alphabet: PhonemeAlphabet,
    sentences: Vec<SentenceEntry>,
    #[serde(rename = "static")]
    static_set: StaticEntry,
}

/// Writes `corpus` under `dir`, creating it if needed.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(corpus.sentences.len());
    for s in &corpus.sentences {
        let name = |what: &str| format!("{}_{what}.csc", s.id);
        write_tensor(&stack(&s.hand_rois)?, &dir.join(name("hand")))?;
        write_tensor(&stack(&s.lip_rois)?, &dir.join(name("lip")))?;
        write_tensor(&s.coords_tensor(), &dir.join(name("coords")))?;
        let frames = match &s.frames {
            Some(f) => {
                write_tensor(&stack(f)?, &dir.join(name("frames")))?;
                Some(name("frames"))
            }
            None => None,
        };
        entries.push(SentenceEntry {
            id: s.id.clone(),
            phonemes: s.phonemes.clone(),
            hand: name("hand"),
            lip: name("lip"),
            coords: name("coords"),
            frames,
            asynchrony: s.asynchrony,
            clean: s.clean.clone(),
            noisy: s.noisy.clone(),
        });
    }
    let st = &corpus.static_set;
    let images = if st.is_empty() {
        None
    } else {
        write_tensor(&stack(&st.images)?, &dir.join("static_images.csc"))?;
        Some("static_images.csc".to_string())
    };
    let manifest = Manifest {
        version: VERSION,
        language: corpus.alphabet.language,
        seed: corpus.seed,
        config: serde_json::to_value(&corpus.config).expect("config serializes"),
        alphabet: corpus.alphabet.clone(),
        sentences: entries,
        static_set: StaticEntry {
            images,
            clean_labels: st.clean_labels.clone(),
            noisy_labels: st.noisy_labels.clone(),
            sources: st.sources.clone(),
        },
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads a corpus written by [`write_corpus`]. Unknown manifest fields are
/// ignored.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    if m.version != VERSION {
        return Err(Error::parse(&path, format!("unsupported corpus version {}", m.version)));
    }
    let config: CorpusConfig = from_value_lenient(m.config).map_err(|e| Error::parse(&path, format!("config: {e}")))?;
    m.alphabet.validate().map_err(|e| Error::parse(&path, e.to_string()))?;
    let mut sentences = Vec::with_capacity(m.sentences.len());
    for e in m.sentences {
        let load = |name: &str| {
            let p = dir.join(name);
            read_tensor(&p).and_then(|t| unstack(&t, &p))
        };
        let hand_rois = load(&e.hand)?;
        let lip_rois = load(&e.lip)?;
        let coords_path = dir.join(&e.coords);
        let coords_t = read_tensor(&coords_path)?;
        if coords_t.shape() != [hand_rois.len(), 2] || lip_rois.len() != hand_rois.len() {
            return Err(Error::parse(&coords_path, format!("sentence {}: stream lengths disagree", e.id)));
        }
        let coords = coords_t.data().chunks(2).map(|c| [c[0], c[1]]).collect();
        let frames = e.frames.as_deref().map(load).transpose()?;
        sentences.push(SentenceSample {
            id: e.id,
            language: m.language,
            phonemes: e.phonemes,
            hand_rois,
            lip_rois,
            coords,
            frames,
            asynchrony: e.asynchrony,
            clean: e.clean,
            noisy: e.noisy,
        });
    }
    let st = m.static_set;
    let images = match &st.images {
        Some(name) => {
            let p = dir.join(name);
            unstack(&read_tensor(&p)?, &p)?
        }
        None => Vec::new(),
    };
    if images.len() != st.clean_labels.len() || images.len() != st.noisy_labels.len() {
        return Err(Error::parse(&path, "static image and label counts disagree"));
    }
    Ok(Corpus {
        seed: m.seed,
        config,
        alphabet: m.alphabet,
        sentences,
        static_set: StaticSet {
            images,
            clean_labels: st.clean_labels,
            noisy_labels: st.noisy_labels,
            sources: st.sources,
        },
    })
}
