//! Synthetic paired-document corpora and their on-disk format.
//!
//! A corpus directory holds a `manifest` (key=value text) and one
//! subdirectory per split with four little-endian files:
//!
//! | file          | record layout                                   |
//! |---------------|-------------------------------------------------|
//! | `images.bin`  | `u32 H, u32 W, u32 C`, then `H·W·C` `f32`        |
//! | `tokens.bin`  | `u32 len`, then `len` `u32` token ids            |
//! | `labels.bin`  | `u32` label                                      |
//! | `doc_ids.bin` | `u32 len`, then `len` UTF-8 bytes                |
//!
//! The manifest records the SHA-256 of every file; loading verifies them.
//! Generation draws every random value from [`SplitMix64`], so a corpus is
//! a pure function of its [`GeneratorConfig`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::document::{DocumentImage, DocumentPair};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const CORPUS_FORMAT: &str = "gdoc-corpus";
pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const GENERATOR_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
const SPLIT_FILES: [&str; 4] = ["images.bin", "tokens.bin", "labels.bin", "doc_ids.bin"];

/// Token ids below this value are reserved for `[PAD]`, `[CLS]`, `[SEP]`.
pub const FIRST_BODY_TOKEN: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_categories: usize,
    pub per_class: usize,
    /// 1 gives disjoint vocabularies and pure motifs; 0 gives one shared
    /// distribution.
    pub separability: f64,
    pub image_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
    pub min_body_len: usize,
    pub max_body_len: usize,
    pub test_fraction: f64,
    pub noise_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_categories: 16,
            per_class: 50,
            separability: 1.0,
            image_size: 32,
            channels: 1,
            vocab_size: 64,
            min_body_len: 8,
            max_body_len: 24,
            test_fraction: 0.2,
            noise_std: 0.15,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class < 1 {
            return Err(Error::Config("per_class must be at least 1".into()));
        }
        if self.num_categories < 1 {
            return Err(Error::Config("num_categories must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.separability) {
            return Err(Error::Config(format!("separability {} outside [0, 1]", self.separability)));
        }
        if self.image_size < 4 || self.channels < 1 {
            return Err(Error::Config("image must be at least 4×4 with one channel".into()));
        }
        if self.body_vocab() < self.num_categories {
            return Err(Error::Config(format!(
                "vocab_size {} leaves fewer body tokens than categories ({})",
                self.vocab_size, self.num_categories
            )));
        }
        if self.min_body_len < 1 || self.min_body_len > self.max_body_len {
            return Err(Error::Config("body length range is empty".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("test_fraction must lie in [0, 1) and noise_std be non-negative".into()));
        }
        Ok(())
    }

    fn body_vocab(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_BODY_TOKEN as usize)
    }

    /// Test documents per class; the rest go to train.
    pub fn test_per_class(&self) -> usize {
        (self.per_class as f64 * self.test_fraction).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub generator: GeneratorConfig,
    pub generator_version: u32,
    pub counts: BTreeMap<Split, usize>,
    /// `"<split>/<file>"` → lowercase hex SHA-256.
    pub digests: BTreeMap<String, String>,
}

impl CorpusManifest {
    pub fn num_categories(&self) -> usize {
        self.generator.num_categories
    }

    pub fn count(&self, split: Split) -> usize {
        self.counts.get(&split).copied().unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        let g = &self.generator;
        let mut lines = vec![
            format!("format={CORPUS_FORMAT}"),
            format!("format_version={CORPUS_FORMAT_VERSION}"),
            format!("generator_version={}", self.generator_version),
            format!("seed={}", g.seed),
            format!("num_categories={}", g.num_categories),
            format!("per_class={}", g.per_class),
            format!("separability={}", g.separability),
            format!("image_size={}", g.image_size),
            format!("channels={}", g.channels),
            format!("vocab_size={}", g.vocab_size),
            format!("min_body_len={}", g.min_body_len),
            format!("max_body_len={}", g.max_body_len),
            format!("test_fraction={}", g.test_fraction),
            format!("noise_std={}", g.noise_std),
        ];
        for (split, n) in &self.counts {
            lines.push(format!("{split}.count={n}"));
        }
        for (file, digest) in &self.digests {
            lines.push(format!("{file}.sha256={digest}"));
        }
        lines.join("\n") + "\n"
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(origin, format!("malformed manifest line '{line}'")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let take = |key: &str| -> Result<&String> {
            kv.get(key).ok_or_else(|| Error::data(origin, format!("manifest missing '{key}'")))
        };
        fn num<T: std::str::FromStr>(origin: &Path, key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::data(origin, format!("manifest value '{v}' for '{key}' is invalid")))
        }
        if take("format")? != CORPUS_FORMAT {
            return Err(Error::data(origin, "not a corpus manifest"));
        }
        let version: u32 = num(origin, "format_version", take("format_version")?)?;
        if version != CORPUS_FORMAT_VERSION {
            return Err(Error::data(origin, format!("unsupported corpus format version {version}")));
        }
        let field = |key: &str| -> Result<f64> { num(origin, key, take(key)?) };
        let ufield = |key: &str| -> Result<usize> { num(origin, key, take(key)?) };
        let generator = GeneratorConfig {
            seed: num(origin, "seed", take("seed")?)?,
            num_categories: ufield("num_categories")?,
            per_class: ufield("per_class")?,
            separability: field("separability")?,
            image_size: ufield("image_size")?,
            channels: ufield("channels")?,
            vocab_size: ufield("vocab_size")?,
            min_body_len: ufield("min_body_len")?,
            max_body_len: ufield("max_body_len")?,
            test_fraction: field("test_fraction")?,
            noise_std: field("noise_std")?,
        };
        let mut counts = BTreeMap::new();
        let mut digests = BTreeMap::new();
        for split in Split::ALL {
            if let Some(v) = kv.get(&format!("{split}.count")) {
                counts.insert(split, num(origin, "count", v)?);
                for file in SPLIT_FILES {
                    let key = format!("{split}/{file}");
                    digests.insert(key.clone(), take(&format!("{key}.sha256"))?.clone());
                }
            }
        }
        Ok(Self {
            generator,
            generator_version: num(origin, "generator_version", take("generator_version")?)?,
            counts,
            digests,
        })
    }
}

/// In-memory corpus, documents in generation order within each split.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: GeneratorConfig,
    pub train: Vec<DocumentPair>,
    pub test: Vec<DocumentPair>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[DocumentPair] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Image motif family and frequency of a category.
fn motif_params(category: usize) -> (usize, usize) {
    (category % 4, 1 + category / 4)
}

/// Noise-free motif in `[0, 1]` with an integer pixel shift.
fn motif_value(category: usize, y: usize, x: usize, size: usize, shift: (i64, i64)) -> f64 {
    use std::f64::consts::TAU;
    let (kind, freq) = motif_params(category);
    let n = size as f64;
    let yy = (y as i64 + shift.0) as f64;
    let xx = (x as i64 + shift.1) as f64;
    let f = freq as f64;
    match kind {
        0 => 0.5 + 0.5 * (TAU * f * yy / n).cos(),
        1 => 0.5 + 0.5 * (TAU * f * xx / n).cos(),
        2 => {
            let s = (TAU * f * (yy + 0.5) / n).cos() * (TAU * f * (xx + 0.5) / n).cos();
            if s >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        _ => {
            const CENTERS: [(f64, f64); 4] = [(0.3, 0.3), (0.7, 0.7), (0.3, 0.7), (0.7, 0.3)];
            let (cy, cx) = CENTERS[(freq - 1) % 4];
            let sigma = n / (6.0 + 2.0 * ((freq - 1) / 4) as f64);
            let dy = yy - cy * n;
            let dx = xx - cx * n;
            (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
        }
    }
}

fn generate_image(cfg: &GeneratorConfig, category: usize, rng: &mut SplitMix64) -> Result<DocumentImage> {
    let s = cfg.separability;
    let distractor = rng.below(cfg.num_categories);
    let mut jitter = || (rng.below(3) as i64 - 1, rng.below(3) as i64 - 1);
    let (own_shift, other_shift) = (jitter(), jitter());
    let n = cfg.image_size;
    let mut pixels = Vec::with_capacity(n * n * cfg.channels);
    for y in 0..n {
        for x in 0..n {
            let base = s * motif_value(category, y, x, n, own_shift) + (1.0 - s) * motif_value(distractor, y, x, n, other_shift);
            for _ in 0..cfg.channels {
                let v = base + cfg.noise_std * rng.normal();
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    DocumentImage::new(n, n, cfg.channels, pixels)
}

fn generate_tokens(cfg: &GeneratorConfig, category: usize, rng: &mut SplitMix64) -> Vec<u32> {
    let body = cfg.body_vocab();
    let chunk = body / cfg.num_categories;
    let len = cfg.min_body_len + rng.below(cfg.max_body_len - cfg.min_body_len + 1);
    (0..len)
        .map(|_| {
            let offset = if rng.bernoulli(cfg.separability) {
                category * chunk + rng.below(chunk)
            } else {
                rng.below(body)
            };
            FIRST_BODY_TOKEN + offset as u32
        })
        .collect()
}

/// Generate a corpus in memory.
///
/// Documents are produced class by class; within each class the first
/// `test_per_class` documents of a seeded permutation form the test split.
pub fn generate(cfg: &GeneratorConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let test_n = cfg.test_per_class();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for category in 0..cfg.num_categories {
        let mut order: Vec<usize> = (0..cfg.per_class).collect();
        rng.shuffle(&mut order);
        let mut docs = Vec::with_capacity(cfg.per_class);
        for i in 0..cfg.per_class {
            let image = generate_image(cfg, category, &mut rng)?;
            let tokens = generate_tokens(cfg, category, &mut rng);
            docs.push(DocumentPair {
                doc_id: format!("doc-{:06}", category * cfg.per_class + i),
                image,
                tokens,
                label: category as u32,
            });
        }
        for (rank, &i) in order.iter().enumerate() {
            let doc = docs[i].clone();
            if rank < test_n {
                test.push(doc);
            } else {
                train.push(doc);
            }
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        train,
        test,
    })
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("value {v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_split(docs: &[DocumentPair]) -> Result<[Vec<u8>; 4]> {
    let (mut images, mut tokens, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for d in docs {
        put_u32(&mut images, d.image.height)?;
        put_u32(&mut images, d.image.width)?;
        put_u32(&mut images, d.image.channels)?;
        for p in &d.image.pixels {
            images.extend_from_slice(&p.to_le_bytes());
        }
        put_u32(&mut tokens, d.tokens.len())?;
        for t in &d.tokens {
            tokens.extend_from_slice(&t.to_le_bytes());
        }
        labels.extend_from_slice(&d.label.to_le_bytes());
        put_u32(&mut ids, d.doc_id.len())?;
        ids.extend_from_slice(d.doc_id.as_bytes());
    }
    Ok([images, tokens, labels, ids])
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `corpus` under `dir`, creating it if needed.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusManifest> {
    let mut counts = BTreeMap::new();
    let mut digests = BTreeMap::new();
    for split in Split::ALL {
        let docs = corpus.split(split);
        let split_dir = dir.join(split.name());
        fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        for (file, bytes) in SPLIT_FILES.iter().zip(encode_split(docs)?) {
            let path = split_dir.join(file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            digests.insert(format!("{split}/{file}"), sha256_hex(&bytes));
        }
        counts.insert(split, docs.len());
    }
    let manifest = CorpusManifest {
        generator: corpus.config.clone(),
        generator_version: GENERATOR_VERSION,
        counts,
        digests,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Generate and write in one call.
pub fn generate_corpus(cfg: &GeneratorConfig, dir: &Path) -> Result<CorpusManifest> {
    write_corpus(&generate(cfg)?, dir)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    CorpusManifest::parse(&text, &path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::data(&self.path, "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::data(&self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn read_verified(dir: &Path, manifest: &CorpusManifest, split: Split, file: &str) -> Result<Vec<u8>> {
    let path = dir.join(split.name()).join(file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = manifest
        .digests
        .get(&format!("{split}/{file}"))
        .ok_or_else(|| Error::data(&path, "no digest recorded in manifest"))?;
    let found = sha256_hex(&bytes);
    if &found != expected {
        return Err(Error::Checksum {
            path,
            expected: expected.clone(),
            found,
        });
    }
    Ok(bytes)
}

/// Load one split after verifying every file digest. Documents come back
/// in the order they were written.
pub fn load_corpus(dir: &Path, split: Split) -> Result<Vec<DocumentPair>> {
    let manifest = read_manifest(dir)?;
    load_split(dir, &manifest, split)
}

pub fn load_split(dir: &Path, manifest: &CorpusManifest, split: Split) -> Result<Vec<DocumentPair>> {
    let count = *manifest
        .counts
        .get(&split)
        .ok_or_else(|| Error::data(dir.join(MANIFEST_FILE), format!("split '{split}' missing")))?;
    let mut files = Vec::with_capacity(4);
    for file in SPLIT_FILES {
        files.push(read_verified(dir, manifest, split, file)?);
    }
    let reader = |i: usize| Reader {
        bytes: &files[i],
        pos: 0,
        path: dir.join(split.name()).join(SPLIT_FILES[i]),
    };
    let (mut images, mut tokens, mut labels, mut ids) = (reader(0), reader(1), reader(2), reader(3));
    let vocab = manifest.generator.vocab_size as u32;
    let mut docs = Vec::with_capacity(count);
    for _ in 0..count {
        let (h, w, c) = (images.len()?, images.len()?, images.len()?);
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::data(&images.path, "image header overflows"))?;
        let raw = images.take(n.checked_mul(4).ok_or_else(|| Error::data(&images.path, "image too large"))?)?;
        let pixels = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let image = DocumentImage::new(h, w, c, pixels).map_err(|e| Error::data(&images.path, e.to_string()))?;
        let len = tokens.len()?;
        let body = (0..len).map(|_| tokens.u32()).collect::<Result<Vec<_>>>()?;
        if let Some(bad) = body.iter().find(|&&t| t >= vocab) {
            return Err(Error::data(&tokens.path, format!("token id {bad} outside vocabulary {vocab}")));
        }
        let label = labels.u32()?;
        if label as usize >= manifest.num_categories() {
            return Err(Error::data(&labels.path, format!("label {label} outside category range")));
        }
        let id_len = ids.len()?;
        let doc_id = std::str::from_utf8(ids.take(id_len)?)
            .map_err(|_| Error::data(&ids.path, "doc_id is not UTF-8"))?
            .to_string();
        docs.push(DocumentPair {
            doc_id,
            image,
            tokens: body,
            label,
        });
    }
    for r in [&images, &tokens, &labels, &ids] {
        r.finish()?;
    }
    Ok(docs)
}

/// Load both splits.
pub fn load_all(dir: &Path) -> Result<(CorpusManifest, Corpus)> {
    let manifest = read_manifest(dir)?;
    let train = load_split(dir, &manifest, Split::Train)?;
    let test = load_split(dir, &manifest, Split::Test)?;
    let corpus = Corpus {
        config: manifest.generator.clone(),
        train,
        test,
    };
    Ok((manifest, corpus))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            num_categories: 4,
            per_class: 10,
            image_size: 8,
            vocab_size: 15,
            min_body_len: 3,
            max_body_len: 6,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn splits_are_stratified_and_disjoint() {
        let c = generate(&small()).unwrap();
        assert_eq!(c.test.len(), 8);
        assert_eq!(c.train.len(), 32);
        let mut ids: Vec<_> = c.train.iter().chain(&c.test).map(|d| d.doc_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 40);
    }

    #[test]
    fn separable_vocabularies_are_disjoint() {
        let c = generate(&small()).unwrap();
        for d in &c.train {
            // 12 body tokens over 4 classes
            for &t in &d.tokens {
                assert_eq!((t - FIRST_BODY_TOKEN) / 3, d.label);
            }
            assert!(d.image.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small();
        cfg.per_class = 0;
        assert!(generate(&cfg).is_err());
        let mut cfg = small();
        cfg.vocab_size = 5;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(&small(), dir.path()).unwrap();
        let parsed = CorpusManifest::parse(&m.to_text(), Path::new("m")).unwrap();
        assert_eq!(parsed, m);
    }
}
