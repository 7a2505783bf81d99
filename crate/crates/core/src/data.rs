//! Caption and embedding ingestion, next-token sequence expansion, train/test
//! splitting, and a seeded synthetic corpus generator.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::text::{build_vocabulary, encode, normalize_and_tokenize, EncodedCaption, Token, Vocabulary, UNK_ID};

pub const CEMB_MAGIC: &[u8; 4] = b"CEMB";
pub const CEMB_VERSION: u32 = 1;

/// Precomputed image feature vector (the CNN descriptor of one image).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub image_id: String,
    pub vector: Vec<f32>,
}

/// All embeddings of a dataset, in file order, with lookup by image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: Vec<ImageEmbedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> EmbeddingTable {
        EmbeddingTable {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, embedding: ImageEmbedding) -> Result<()> {
        if embedding.vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                what: format!("embedding `{}`", embedding.image_id),
                expected: self.dim,
                actual: embedding.vector.len(),
            });
        }
        if embedding.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "embedding `{}` has non-finite components",
                embedding.image_id
            )));
        }
        if self.index.contains_key(&embedding.image_id) {
            return Err(Error::DuplicateId(embedding.image_id));
        }
        self.index
            .insert(embedding.image_id.clone(), self.entries.len());
        self.entries.push(embedding);
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageEmbedding> {
        self.index.get(image_id).map(|&i| &self.entries[i])
    }

    /// Like [`get`](Self::get) but reports a missing id as an error.
    pub fn vector(&self, image_id: &str) -> Result<&[f32]> {
        self.get(image_id)
            .map(|e| e.vector.as_slice())
            .ok_or_else(|| Error::MissingEmbedding(image_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ImageEmbedding> {
        self.entries.iter()
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(CEMB_MAGIC)?;
        out.write_u32::<LittleEndian>(CEMB_VERSION)?;
        out.write_u32::<LittleEndian>(self.entries.len() as u32)?;
        out.write_u32::<LittleEndian>(self.dim as u32)?;
        for e in &self.entries {
            out.write_u32::<LittleEndian>(e.image_id.len() as u32)?;
            out.write_all(e.image_id.as_bytes())?;
            for &v in &e.vector {
                out.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("write to Vec");
        buf
    }

    pub fn read_from(mut input: impl Read) -> Result<EmbeddingTable> {
        let truncated = |_| Error::format("CEMB", "truncated file");
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CEMB_MAGIC {
            return Err(Error::format("CEMB", format!("bad magic {magic:?}")));
        }
        let version = input.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != CEMB_VERSION {
            return Err(Error::format(
                "CEMB",
                format!("unsupported version {version}"),
            ));
        }
        let count = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let dim = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut table = EmbeddingTable::new(dim);
        for _ in 0..count {
            let id_len = input.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut id = Vec::new();
            (&mut input)
                .take(id_len as u64)
                .read_to_end(&mut id)
                .map_err(truncated)?;
            if id.len() != id_len {
                return Err(Error::format("CEMB", "truncated file"));
            }
            let image_id = String::from_utf8(id)
                .map_err(|e| Error::format("CEMB", format!("image id is not UTF-8: {e}")))?;
            let mut vector = vec![0f32; dim];
            input
                .read_f32_into::<LittleEndian>(&mut vector)
                .map_err(truncated)?;
            table.insert(ImageEmbedding { image_id, vector })?;
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| Error::format("CEMB", e.to_string()))? != 0 {
            return Err(Error::format("CEMB", "trailing bytes after last record"));
        }
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a CEMB file.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingTable::read_from(bytes.as_slice())
}

/// One `image_id<TAB>caption` line of a caption file, caption not yet tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCaption {
    pub image_id: String,
    pub caption: String,
}

/// Parses caption TSV contents. `source` is only used in error messages.
pub fn parse_captions(contents: &str, source: &Path) -> Result<Vec<RawCaption>> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in contents.split('\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let line_error = |message: &str| Error::LineFormat {
            path: source.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let (image_id, caption) = line
            .split_once('\t')
            .ok_or_else(|| line_error("expected `image_id<TAB>caption`, found no tab"))?;
        if image_id.is_empty() {
            return Err(line_error("empty image id"));
        }
        if !seen.insert(image_id) {
            return Err(Error::DuplicateId(image_id.to_string()));
        }
        records.push(RawCaption {
            image_id: image_id.to_string(),
            caption: caption.to_string(),
        });
    }
    Ok(records)
}

pub fn load_captions(path: impl AsRef<Path>) -> Result<Vec<RawCaption>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_captions(std::str::from_utf8(&bytes)?, path)
}

pub fn write_captions(records: &[RawCaption], mut out: impl Write) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}\t{}", r.image_id, r.caption)?;
    }
    Ok(())
}

pub fn save_captions(records: &[RawCaption], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_captions(records, &mut buf).expect("write to Vec");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// An image id paired with its fixed-length encoded caption.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: String,
    pub encoded: EncodedCaption,
}

/// One next-token training example: the image, the caption prefix padded
/// with `<unk>`, and the token to predict.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpandedSample {
    pub image_id: String,
    pub prefix: Vec<usize>,
    pub target: usize,
}

/// Expands one record into `n` samples. Sample `j` sees the first `j` caption
/// ids followed by `n - j` pads and predicts caption id `j`.
pub fn expand_pair(record: &CaptionRecord, n: usize) -> Result<Vec<ExpandedSample>> {
    let ids = record.encoded.ids();
    if ids.len() != n {
        return Err(Error::DimensionMismatch {
            what: format!("encoded caption of `{}`", record.image_id),
            expected: n,
            actual: ids.len(),
        });
    }
    Ok((0..n)
        .map(|j| {
            let mut prefix = ids[..j].to_vec();
            prefix.resize(n, UNK_ID);
            ExpandedSample {
                image_id: record.image_id.clone(),
                prefix,
                target: ids[j],
            }
        })
        .collect())
}

/// Tokenizes raw captions and encodes them to length `n`. Builds a vocabulary
/// with `min_count` unless one is supplied.
pub fn prepare_corpus(
    raw: &[RawCaption],
    vocab: Option<&Vocabulary>,
    min_count: usize,
    n: usize,
) -> Result<(Vocabulary, Vec<CaptionRecord>)> {
    let tokenized: Vec<Vec<Token>> = raw.iter().map(|r| normalize_and_tokenize(&r.caption)).collect();
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => build_vocabulary(&tokenized, min_count)?,
    };
    let records = raw
        .iter()
        .zip(&tokenized)
        .map(|(r, tokens)| CaptionRecord {
            image_id: r.image_id.clone(),
            encoded: encode(&vocab, tokens, n),
        })
        .collect();
    Ok((vocab, records))
}

pub fn expand_all(records: &[CaptionRecord], n: usize) -> Result<Vec<ExpandedSample>> {
    let mut samples = Vec::with_capacity(records.len() * n);
    for r in records {
        samples.extend(expand_pair(r, n)?);
    }
    Ok(samples)
}

/// Shuffles under `seed` and moves `test_count` items to the test side. Each
/// side keeps the input's relative order.
pub fn split_train_test<T: Clone>(
    records: &[T],
    test_count: usize,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if test_count > records.len() {
        return Err(Error::InvalidArgument(format!(
            "test_count {test_count} exceeds {} records",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; records.len()];
    for &i in &order[..test_count] {
        is_test[i] = true;
    }
    let (test, train): (Vec<_>, Vec<_>) = records
        .iter()
        .zip(&is_test)
        .partition(|&(_, &t)| t);
    Ok((
        train.into_iter().map(|(r, _)| r.clone()).collect(),
        test.into_iter().map(|(r, _)| r.clone()).collect(),
    ))
}

/// 64-bit FNV-1a; keys the per-image generator on the image id.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub d_img: usize,
    pub vocab_size: usize,
    pub max_caption_len: usize,
    /// Defaults to `min(4, max_caption_len)` when `None`.
    pub min_caption_len: Option<usize>,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(num_images: usize, d_img: usize, vocab_size: usize, max_caption_len: usize, seed: u64) -> Self {
        SynthConfig {
            num_images,
            d_img,
            vocab_size,
            max_caption_len,
            min_caption_len: None,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub embeddings: EmbeddingTable,
    pub captions: Vec<RawCaption>,
}

/// File names written by [`SynthDataset::write`].
pub const SYNTH_EMBEDDINGS_FILE: &str = "embeddings.cemb";
pub const SYNTH_CAPTIONS_FILE: &str = "captions.tsv";

impl SynthDataset {
    /// Writes `embeddings.cemb` and `captions.tsv` into `dir`, returning their paths.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let emb = dir.join(SYNTH_EMBEDDINGS_FILE);
        let cap = dir.join(SYNTH_CAPTIONS_FILE);
        self.embeddings.save(&emb)?;
        save_captions(&self.captions, &cap)?;
        Ok((emb, cap))
    }
}

/// Generates a seeded toy corpus. Image `i` is named `img{i:05}`; its vector
/// is drawn uniformly from `[-1, 1]` by a generator seeded with the global
/// seed and the image id. The caption is a fixed function of that vector:
/// component 0 picks the length, and token `k` is `w{b}` where `b` buckets
/// component `k mod d_img` into `vocab_size` equal bins.
pub fn synth_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    let SynthConfig {
        num_images,
        d_img,
        vocab_size,
        max_caption_len,
        min_caption_len,
        seed,
    } = *config;
    if num_images == 0 || d_img == 0 || vocab_size == 0 || max_caption_len == 0 {
        return Err(Error::InvalidArgument(
            "synthetic dataset sizes must all be positive".into(),
        ));
    }
    let min_len = min_caption_len.unwrap_or(max_caption_len.min(4));
    if min_len == 0 || min_len > max_caption_len {
        return Err(Error::InvalidArgument(format!(
            "min caption length {min_len} must lie in 1..={max_caption_len}"
        )));
    }
    let bucket = |v: f32, bins: usize| -> usize {
        let unit = ((f64::from(v) + 1.0) / 2.0).clamp(0.0, 1.0);
        ((unit * bins as f64) as usize).min(bins - 1)
    };

    let mut embeddings = EmbeddingTable::new(d_img);
    let mut captions = Vec::with_capacity(num_images);
    for i in 0..num_images {
        let image_id = format!("img{i:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(image_id.as_bytes()));
        let vector: Vec<f32> = (0..d_img).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
        let len = min_len + bucket(vector[0], max_caption_len - min_len + 1);
        let words: Vec<String> = (0..len)
            .map(|k| format!("w{}", bucket(vector[k % d_img], vocab_size)))
            .collect();
        captions.push(RawCaption {
            image_id: image_id.clone(),
            caption: words.join(" "),
        });
        embeddings.insert(ImageEmbedding { image_id, vector })?;
    }
    Ok(SynthDataset {
        embeddings,
        captions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::corpus_stats;
    use proptest::prelude::*;

    fn record(ids: &[usize]) -> CaptionRecord {
        CaptionRecord {
            image_id: "img".into(),
            encoded: EncodedCaption::from_ids(ids.to_vec(), 100).unwrap(),
        }
    }

    #[test]
    fn captions_parse_and_errors() {
        let p = Path::new("c.tsv");
        let recs = parse_captions("a\tone two\nb\tthree\n", p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].image_id, "b");
        assert_eq!(recs[0].caption, "one two");
        assert!(parse_captions("", p).unwrap().is_empty());
        match parse_captions("a\tx\nbroken line\n", p) {
            Err(Error::LineFormat { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_captions("a\tx\na\ty\n", p),
            Err(Error::DuplicateId(id)) if id == "a"
        ));
    }

    #[test]
    fn cemb_header_and_errors() {
        let mut t = EmbeddingTable::new(4);
        for i in 0..3 {
            t.insert(ImageEmbedding {
                image_id: format!("i{i}"),
                vector: vec![i as f32; 4],
            })
            .unwrap();
        }
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"CEMB");
        assert_eq!(EmbeddingTable::read_from(bytes.as_slice()).unwrap().len(), 3);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingTable::read_from(bad.as_slice()), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(EmbeddingTable::read_from(bad.as_slice()).is_err());
        assert!(EmbeddingTable::read_from(&bytes[..bytes.len() - 1]).is_err());

        assert!(t
            .insert(ImageEmbedding { image_id: "i0".into(), vector: vec![0.0; 4] })
            .is_err());
        assert!(t
            .insert(ImageEmbedding { image_id: "z".into(), vector: vec![0.0; 3] })
            .is_err());
        assert!(t
            .insert(ImageEmbedding { image_id: "n".into(), vector: vec![f32::NAN; 4] })
            .is_err());
    }

    #[test]
    fn expansion_matches_table_rows() {
        let samples = expand_pair(&record(&[11, 12, 13, 14, 0]), 5).unwrap();
        let prefixes: Vec<_> = samples.iter().map(|s| s.prefix.clone()).collect();
        assert_eq!(
            prefixes,
            vec![
                vec![0, 0, 0, 0, 0],
                vec![11, 0, 0, 0, 0],
                vec![11, 12, 0, 0, 0],
                vec![11, 12, 13, 0, 0],
                vec![11, 12, 13, 14, 0],
            ]
        );
        let targets: Vec<_> = samples.iter().map(|s| s.target).collect();
        assert_eq!(targets, [11, 12, 13, 14, 0]);

        let all_pad = expand_pair(&record(&[0, 0, 0]), 3).unwrap();
        assert!(all_pad.iter().all(|s| s.target == 0 && s.prefix == [0, 0, 0]));
        assert!(expand_pair(&record(&[1, 2]), 3).is_err());
    }

    #[test]
    fn expansion_count_scales_with_pairs() {
        let records: Vec<_> = (0..1570).map(|i| record(&[i % 90 + 1; 10])).collect();
        assert_eq!(expand_all(&records, 10).unwrap().len(), 15_700);
    }

    #[test]
    fn split_edge_cases() {
        let items: Vec<u32> = (0..100).collect();
        let (train, test) = split_train_test(&items, 0, 1).unwrap();
        assert_eq!(train.len(), 100);
        assert!(test.is_empty());
        assert_eq!(
            split_train_test(&items, 30, 9).unwrap(),
            split_train_test(&items, 30, 9).unwrap()
        );
        assert!(split_train_test(&items, 101, 0).is_err());
    }

    #[test]
    fn split_different_seeds_are_valid_partitions() {
        let items: Vec<u32> = (0..100).collect();
        let check = |train: &[u32], test: &[u32]| {
            let mut all: Vec<u32> = train.iter().chain(test).copied().collect();
            all.sort();
            assert_eq!(all, items);
            assert_eq!(test.len(), 30);
        };
        let (tr1, te1) = split_train_test(&items, 30, 1).unwrap();
        let (tr2, te2) = split_train_test(&items, 30, 2).unwrap();
        check(&tr1, &te1);
        check(&tr2, &te2);
        assert_ne!(te1, te2);
    }

    #[test]
    fn synth_is_deterministic_and_sized() {
        let cfg = SynthConfig::new(5, 8, 20, 10, 7);
        let a = synth_dataset(&cfg).unwrap();
        let b = synth_dataset(&cfg).unwrap();
        assert_eq!(a.embeddings.to_bytes(), b.embeddings.to_bytes());
        assert_eq!(a.captions, b.captions);
        assert_eq!(a.embeddings.len(), 5);
        assert_eq!(a.captions.len(), 5);
        let c = synth_dataset(&SynthConfig::new(5, 8, 20, 10, 8)).unwrap();
        assert_ne!(a.embeddings, c.embeddings);
        assert!(a
            .embeddings
            .iter()
            .flat_map(|e| &e.vector)
            .all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn synth_vocabulary_is_bounded() {
        let data = synth_dataset(&SynthConfig::new(200, 6, 15, 12, 3)).unwrap();
        let corpus: Vec<_> = data
            .captions
            .iter()
            .map(|c| normalize_and_tokenize(&c.caption))
            .collect();
        let stats = corpus_stats(&corpus);
        assert!(stats.unique_tokens <= 15);
        assert!(stats.length_histogram.keys().all(|&l| (4..=12).contains(&l)));
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        assert!(vocab.len() <= 16);
    }

    #[test]
    fn prepare_corpus_encodes_with_shared_vocab() {
        let raw = parse_captions("a\tx y z\nb\ty q\n", Path::new("-")).unwrap();
        let (vocab, recs) = prepare_corpus(&raw, None, 1, 4).unwrap();
        assert_eq!(vocab.len(), 5);
        assert_eq!(recs[0].encoded.ids(), &[3, 1, 4, 0]);
        assert_eq!(recs[1].encoded.ids(), &[1, 2, 0, 0]);
        let (_, recs) = prepare_corpus(&raw[1..], Some(&vocab), 1, 2).unwrap();
        assert_eq!(recs[0].encoded.ids(), &[1, 2]);
    }

    proptest! {
        #[test]
        fn expansion_invariants(ids in prop::collection::vec(0usize..20, 1..12)) {
            let n = ids.len();
            let samples = expand_pair(&record(&ids), n).unwrap();
            prop_assert_eq!(samples.len(), n);
            for (j, s) in samples.iter().enumerate() {
                prop_assert_eq!(&s.prefix[..j], &ids[..j]);
                prop_assert!(s.prefix[j..].iter().all(|&p| p == UNK_ID));
                prop_assert_eq!(s.target, ids[j]);
                if j + 1 < n {
                    let mut next = s.prefix.clone();
                    next[j] = s.target;
                    prop_assert_eq!(&samples[j + 1].prefix, &next);
                }
            }
        }

        #[test]
        fn cemb_round_trip_is_bitwise(
            vectors in prop::collection::vec(prop::collection::vec(-1e6f32..1e6, 3), 0..10)
        ) {
            let mut t = EmbeddingTable::new(3);
            for (i, v) in vectors.into_iter().enumerate() {
                t.insert(ImageEmbedding { image_id: format!("ছবি{i}"), vector: v }).unwrap();
            }
            let bytes = t.to_bytes();
            let back = EmbeddingTable::read_from(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            for (a, b) in t.iter().zip(back.iter()) {
                let abits: Vec<u32> = a.vector.iter().map(|x| x.to_bits()).collect();
                let bbits: Vec<u32> = b.vector.iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
        }

        #[test]
        fn split_is_partition(len in 0usize..50, frac in 0.0f64..=1.0, seed in any::<u64>()) {
            let items: Vec<usize> = (0..len).collect();
            let test_count = (len as f64 * frac) as usize;
            let (train, test) = split_train_test(&items, test_count, seed).unwrap();
            prop_assert_eq!(test.len(), test_count);
            let mut all: Vec<_> = train.into_iter().chain(test).collect();
            all.sort();
            prop_assert_eq!(all, items);
        }
    }
}
