//! Synthetic dataset: random text lines rendered with the built-in pixel
//! font, paired with transcriptions rewritten by per-style character
//! permutations. Each transcription style (TS) is represented by several
//! transcription style identifiers (TSI), mirroring documents that share a
//! transcription convention.

pub mod font;
mod render;

pub use font::Font;
pub use render::{
    mask_augment, parse_pgm, pgm_bytes, read_pgm, render_line, write_pgm, RenderParams,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, label, ChaCha8Rng};
use crate::tensor::Tensor;

/// Ordered character set. Model class `i+1` is character `i`; class 0 is the
/// CTC blank and has no character.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Alphabet {
    pub fn new(chars: &str) -> Result<Self> {
        let font = Font::builtin();
        let list: Vec<char> = chars.chars().collect();
        if list.is_empty() {
            return Err(Error::Config("alphabet is empty".into()));
        }
        let mut index = BTreeMap::new();
        for (i, &c) in list.iter().enumerate() {
            if !font.has(c) {
                return Err(Error::Config(format!("alphabet character {c:?} has no glyph")));
            }
            if index.insert(c, i).is_some() {
                return Err(Error::Config(format!("duplicate alphabet character {c:?}")));
            }
        }
        if !index.contains_key(&' ') {
            return Err(Error::Config("alphabet must contain a space".into()));
        }
        Ok(Alphabet { chars: list, index })
    }

    /// 12 letters plus space; 14 model classes with the blank.
    pub fn default_small() -> Self {
        Alphabet::new("abcdefghijkl ").expect("valid built-in alphabet")
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn space_index(&self) -> usize {
        self.index[&' ']
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Text to alphabet indices.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Dataset(format!("character {c:?} not in alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> String {
        indices.iter().map(|&i| self.chars[i]).collect()
    }

    /// Text to CTC class labels (alphabet index + 1).
    pub fn classes(&self, text: &str) -> Result<Vec<usize>> {
        Ok(self.encode(text)?.into_iter().map(|i| i + 1).collect())
    }

    /// CTC class labels (no blanks) back to text.
    pub fn text_of_classes(&self, classes: &[usize]) -> Result<String> {
        classes
            .iter()
            .map(|&k| {
                if k == 0 || k > self.chars.len() {
                    Err(Error::InvalidLabel(format!("class {k} has no character")))
                } else {
                    Ok(self.chars[k - 1])
                }
            })
            .collect()
    }
}

/// Bijection over alphabet indices; a synthetic transcription style.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StylePermutation {
    map: Vec<usize>,
}

impl StylePermutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        let mut seen = vec![false; n];
        for &v in &map {
            if v >= n || seen[v] {
                return Err(Error::Config(format!("not a permutation of 0..{n}: {map:?}")));
            }
            seen[v] = true;
        }
        Ok(StylePermutation { map })
    }

    pub fn identity(n: usize) -> Self {
        StylePermutation {
            map: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &v)| i == v)
    }

    pub fn fixes(&self, i: usize) -> bool {
        self.map[i] == i
    }

    pub fn apply_index(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn apply(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.map[i]).collect()
    }

    pub fn apply_str(&self, text: &str, alphabet: &Alphabet) -> Result<String> {
        Ok(alphabet.decode(&self.apply(&alphabet.encode(text)?)))
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0usize; self.map.len()];
        for (i, &v) in self.map.iter().enumerate() {
            inv[v] = i;
        }
        StylePermutation { map: inv }
    }

    /// `self.compose(other)` applies `other` first, then `self`.
    pub fn compose(&self, other: &StylePermutation) -> Self {
        StylePermutation {
            map: other.map.iter().map(|&v| self.map[v]).collect(),
        }
    }
}

/// Style 0 is the identity; the rest are seeded single-cycle permutations of
/// the non-space characters, pairwise distinct.
pub fn make_styles(alphabet: &Alphabet, n_styles: usize, seed: u64) -> Result<Vec<StylePermutation>> {
    if n_styles == 0 {
        return Err(Error::Config("n_styles must be >= 1".into()));
    }
    let n = alphabet.len();
    let space = alphabet.space_index();
    let slots: Vec<usize> = (0..n).filter(|&i| i != space).collect();
    if n_styles > 1 && slots.len() < 2 {
        return Err(Error::Config(
            "alphabet too small for non-identity styles".into(),
        ));
    }
    let mut styles = vec![StylePermutation::identity(n)];
    for k in 1..n_styles {
        let mut rng = rng::stream(seed, &[label::STYLE_PERM, k as u64]);
        let mut found = false;
        for _attempt in 0..200 {
            // Sattolo's shuffle: always yields a single cycle, hence every
            // non-space character maps to a different one.
            let mut targets = slots.clone();
            for i in (1..targets.len()).rev() {
                let j = rng.gen_range(0..i);
                targets.swap(i, j);
            }
            let mut map: Vec<usize> = (0..n).collect();
            for (slot, &t) in slots.iter().zip(targets.iter()) {
                map[*slot] = t;
            }
            let candidate = StylePermutation { map };
            if !styles.contains(&candidate) {
                styles.push(candidate);
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::Config(format!(
                "alphabet too small for {n_styles} distinct styles"
            )));
        }
    }
    Ok(styles)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub alphabet: String,
    pub n_styles: usize,
    pub tsi_per_style: usize,
    pub lines_per_tsi: usize,
    /// Word length range, inclusive.
    pub word_len: (usize, usize),
    /// Words per line, inclusive; words are space-separated.
    pub words_per_line: (usize, usize),
    pub train_frac: f64,
    pub render: RenderParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            alphabet: "abcdefghijkl ".into(),
            n_styles: 3,
            tsi_per_style: 3,
            lines_per_tsi: 300,
            word_len: (2, 8),
            words_per_line: (1, 2),
            train_frac: 0.9,
            render: RenderParams::default(),
        }
    }
}

impl SynthConfig {
    pub fn n_tsi(&self) -> usize {
        self.n_styles * self.tsi_per_style
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_styles == 0 || self.tsi_per_style == 0 || self.lines_per_tsi == 0 {
            return Err(Error::Config("dataset counts must be positive".into()));
        }
        if self.word_len.0 == 0 || self.word_len.0 > self.word_len.1 {
            return Err(Error::Config(format!("bad word_len range {:?}", self.word_len)));
        }
        if self.words_per_line.0 == 0 || self.words_per_line.0 > self.words_per_line.1 {
            return Err(Error::Config(format!(
                "bad words_per_line range {:?}",
                self.words_per_line
            )));
        }
        if !(0.0..=1.0).contains(&self.train_frac) {
            return Err(Error::Config("train_frac must be in [0,1]".into()));
        }
        self.render.validate()
    }
}

/// Random line text as alphabet indices: space-separated words of uniform
/// random non-space characters.
pub fn sample_text(alphabet: &Alphabet, config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let space = alphabet.space_index();
    let letters: Vec<usize> = (0..alphabet.len()).filter(|&i| i != space).collect();
    let n_words = rng.gen_range(config.words_per_line.0..=config.words_per_line.1);
    let mut out = Vec::new();
    for w in 0..n_words {
        if w > 0 {
            out.push(space);
        }
        let len = rng.gen_range(config.word_len.0..=config.word_len.1);
        for _ in 0..len {
            out.push(letters[rng.gen_range(0..letters.len())]);
        }
    }
    out
}

/// The rng stream that generated line `index` of `tsi`; text is drawn first,
/// then the renderer consumes the rest.
pub fn line_stream(seed: u64, tsi: usize, index: usize) -> ChaCha8Rng {
    rng::stream(seed, &[label::DATASET_LINE, tsi as u64, index as u64])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub alphabet: String,
    /// Explicit permutation maps, one per style.
    pub styles: Vec<StylePermutation>,
    /// Ground-truth style of each TSI (TSI ids are the indices).
    pub tsi_to_style: Vec<usize>,
    pub seed: u64,
    pub image_height: usize,
    /// Character cell width in pixels, for masking augmentation.
    pub char_width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub tsi: u32,
    pub transcription: String,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TRAIN_FILE: &str = "train.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const META_FILE: &str = "meta.json";

fn manifest_text(rows: &[ManifestRow]) -> String {
    let mut s = String::new();
    for r in rows {
        s.push_str(&r.path);
        s.push('\t');
        s.push_str(&r.tsi.to_string());
        s.push('\t');
        s.push_str(&r.transcription);
        s.push('\n');
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (path, tsi, transcription) = match (parts.next(), parts.next(), parts.next()) {
            (Some(p), Some(t), Some(tr)) => (p, t, tr),
            _ => {
                return Err(Error::Dataset(format!(
                    "manifest line {}: expected 3 tab-separated fields",
                    lineno + 1
                )))
            }
        };
        let tsi: u32 = tsi
            .parse()
            .map_err(|_| Error::Dataset(format!("manifest line {}: bad tsi", lineno + 1)))?;
        rows.push(ManifestRow {
            path: path.to_string(),
            tsi,
            transcription: transcription.to_string(),
        });
    }
    Ok(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub struct BuiltDataset {
    pub dir: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub meta: DatasetMeta,
}

/// Renders the whole dataset to `out`: `lines/{tsi}/{index}.pgm` images,
/// manifest plus train/test split TSVs, and `meta.json`. Line generation is
/// parallel; per-line rng streams make the result independent of scheduling.
pub fn build_dataset(config: &SynthConfig, seed: u64, out: &Path) -> Result<BuiltDataset> {
    config.validate()?;
    let alphabet = Alphabet::new(&config.alphabet)?;
    let styles = make_styles(&alphabet, config.n_styles, seed)?;
    let font = Font::builtin();

    let jobs: Vec<(usize, usize)> = (0..config.n_tsi())
        .flat_map(|tsi| (0..config.lines_per_tsi).map(move |i| (tsi, i)))
        .collect();
    let rendered: Vec<(ManifestRow, Vec<u8>)> = jobs
        .par_iter()
        .map(|&(tsi, i)| {
            let mut rng = line_stream(seed, tsi, i);
            let base = sample_text(&alphabet, config, &mut rng);
            let image = render_line(&alphabet.decode(&base), font, &config.render, &mut rng)?;
            let style = &styles[tsi % config.n_styles];
            let row = ManifestRow {
                path: format!("lines/{tsi}/{i}.pgm"),
                tsi: tsi as u32,
                transcription: alphabet.decode(&style.apply(&base)),
            };
            Ok((row, pgm_bytes(&image)?))
        })
        .collect::<Result<_>>()?;

    for tsi in 0..config.n_tsi() {
        let dir = out.join("lines").join(tsi.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (row, bytes) in &rendered {
        let path = out.join(&row.path);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }

    let rows: Vec<ManifestRow> = rendered.into_iter().map(|(r, _)| r).collect();
    let train_count = (config.lines_per_tsi as f64 * config.train_frac).floor() as usize;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for row in &rows {
        let index: usize = Path::new(&row.path)
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse().ok())
            .expect("paths are built above");
        if index < train_count {
            train.push(row.clone());
        } else {
            test.push(row.clone());
        }
    }
    let meta = DatasetMeta {
        alphabet: alphabet.as_string(),
        styles,
        tsi_to_style: (0..config.n_tsi()).map(|t| t % config.n_styles).collect(),
        seed,
        image_height: config.render.height,
        char_width: config.render.cell_width(),
    };
    let writes: [(&str, String); 4] = [
        (MANIFEST_FILE, manifest_text(&rows)),
        (TRAIN_FILE, manifest_text(&train)),
        (TEST_FILE, manifest_text(&test)),
        (
            META_FILE,
            serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
        ),
    ];
    for (name, text) in writes {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(BuiltDataset {
        dir: out.to_path_buf(),
        rows,
        meta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn file(self) -> &'static str {
        match self {
            Split::Train => TRAIN_FILE,
            Split::Test => TEST_FILE,
            Split::All => MANIFEST_FILE,
        }
    }
}

/// One loaded line: image in [0,1], TSI, transcription text, and the CTC
/// class label sequence.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub tsi: u32,
    pub text: String,
    pub label: Vec<usize>,
}

pub struct Dataset {
    pub dir: PathBuf,
    pub meta: DatasetMeta,
    pub alphabet: Alphabet,
    pub samples: Vec<Sample>,
}

pub fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    for s in &meta.styles {
        StylePermutation::new(s.map().to_vec())?;
    }
    for &s in &meta.tsi_to_style {
        if s >= meta.styles.len() {
            return Err(Error::Dataset(format!("tsi_to_style points at missing style {s}")));
        }
    }
    Ok(meta)
}

pub fn load_dataset(dir: &Path, split: Split) -> Result<Dataset> {
    let meta = load_meta(dir)?;
    let alphabet = Alphabet::new(&meta.alphabet)?;
    let rows = read_manifest(&dir.join(split.file()))?;
    let n_tsi = meta.tsi_to_style.len();
    let samples: Vec<Sample> = rows
        .par_iter()
        .map(|row| {
            if row.tsi as usize >= n_tsi {
                return Err(Error::Dataset(format!(
                    "{}: tsi {} not in metadata (0..{n_tsi})",
                    row.path, row.tsi
                )));
            }
            let image = read_pgm(&dir.join(&row.path))?;
            let label = alphabet.classes(&row.transcription)?;
            Ok(Sample {
                image,
                tsi: row.tsi,
                text: row.transcription.clone(),
                label,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        meta,
        alphabet,
        samples,
    })
}

impl Dataset {
    pub fn n_tsi(&self) -> usize {
        self.meta.tsi_to_style.len()
    }

    pub fn indices_of_tsi(&self, tsi: u32) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].tsi == tsi)
            .collect()
    }

    pub fn style_of_tsi(&self, tsi: u32) -> usize {
        self.meta.tsi_to_style[tsi as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_construction_rules() {
        assert!(Alphabet::new("ab a").is_err()); // duplicate
        assert!(Alphabet::new("abc").is_err()); // no space
        assert!(Alphabet::new("aB ").is_err()); // no glyph for 'B'
        let a = Alphabet::default_small();
        assert_eq!(a.len(), 13);
        assert_eq!(a.num_classes(), 14);
        assert_eq!(a.space_index(), 12);
        let enc = a.encode("cab bad").unwrap();
        assert_eq!(a.decode(&enc), "cab bad");
        assert_eq!(a.classes("ab").unwrap(), vec![1, 2]);
        assert_eq!(a.text_of_classes(&[1, 2, 13]).unwrap(), "ab ");
        assert!(a.text_of_classes(&[0]).is_err());
        assert!(a.encode("xyz").is_err());
    }

    #[test]
    fn permutation_example_from_three_letters() {
        // Charset (a,b,c) with style (c,a,b): "ab" reads as "ca".
        let p = StylePermutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(p.apply(&[0, 1]), vec![2, 0]);
        let alphabet = Alphabet::new("abc ").unwrap();
        let q = StylePermutation::new(vec![2, 0, 1, 3]).unwrap();
        assert_eq!(q.apply_str("ab", &alphabet).unwrap(), "ca");
        assert!(StylePermutation::new(vec![0, 0, 1]).is_err());
        assert!(StylePermutation::new(vec![0, 3]).is_err());
    }

    #[test]
    fn style_zero_is_identity_and_inverses_round_trip() {
        let alphabet = Alphabet::default_small();
        let styles = make_styles(&alphabet, 4, 11).unwrap();
        assert!(styles[0].is_identity());
        let mut rng = rng::stream(0, &[42]);
        let config = SynthConfig::default();
        for s in &styles {
            let inv = s.inverse();
            assert!(inv.compose(s).is_identity());
            for _ in 0..25 {
                let text = sample_text(&alphabet, &config, &mut rng);
                assert_eq!(inv.apply(&s.apply(&text)), text);
            }
        }
    }

    #[test]
    fn styles_are_distinct_space_fixed_and_deranged() {
        let alphabet = Alphabet::default_small();
        for seed in 0..10u64 {
            let styles = make_styles(&alphabet, 5, seed).unwrap();
            for (i, a) in styles.iter().enumerate() {
                assert!(a.fixes(alphabet.space_index()));
                for b in styles.iter().skip(i + 1) {
                    assert_ne!(a, b, "seed {seed}");
                }
                if i > 0 {
                    for c in 0..alphabet.len() {
                        if c != alphabet.space_index() {
                            assert_ne!(a.apply_index(c), c, "style {i} fixes {c}");
                        }
                    }
                }
            }
            let again = make_styles(&alphabet, 5, seed).unwrap();
            assert_eq!(styles, again);
        }
    }

    #[test]
    fn tiny_alphabet_limits_style_count() {
        let alphabet = Alphabet::new("ab ").unwrap();
        assert_eq!(make_styles(&alphabet, 2, 0).unwrap().len(), 2);
        assert!(make_styles(&alphabet, 3, 0).is_err());
        let single = Alphabet::new("a ").unwrap();
        assert!(make_styles(&single, 1, 0).is_ok());
        assert!(make_styles(&single, 2, 0).is_err());
    }

    fn tiny_config() -> SynthConfig {
        SynthConfig {
            n_styles: 2,
            tsi_per_style: 2,
            lines_per_tsi: 5,
            word_len: (2, 3),
            words_per_line: (1, 1),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn build_counts_split_and_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let built = build_dataset(&config, 123, dir.path()).unwrap();
        assert_eq!(built.rows.len(), 20);
        let tsis: std::collections::BTreeSet<u32> = built.rows.iter().map(|r| r.tsi).collect();
        assert_eq!(tsis.len(), 4);
        assert_eq!(built.meta.tsi_to_style, vec![0, 1, 0, 1]);

        let alphabet = Alphabet::new(&config.alphabet).unwrap();
        for row in &built.rows {
            let (tsi, i) = {
                let parts: Vec<&str> = row.path.split('/').collect();
                (
                    parts[1].parse::<usize>().unwrap(),
                    parts[2].trim_end_matches(".pgm").parse::<usize>().unwrap(),
                )
            };
            let mut rng = line_stream(123, tsi, i);
            let base = sample_text(&alphabet, &config, &mut rng);
            let style = &built.meta.styles[built.meta.tsi_to_style[tsi]];
            assert_eq!(row.transcription, alphabet.decode(&style.apply(&base)));
        }

        let train = read_manifest(&dir.path().join(TRAIN_FILE)).unwrap();
        let test = read_manifest(&dir.path().join(TEST_FILE)).unwrap();
        assert_eq!(train.len(), 16); // floor(5 * 0.9) = 4 per TSI
        assert_eq!(test.len(), 4);
        let all: Vec<ManifestRow> = train.into_iter().chain(test).collect();
        assert_eq!(all.len(), built.rows.len());
        for r in &all {
            assert!(built.rows.contains(r));
        }
    }

    #[test]
    fn dataset_round_trip_and_rebuild_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let config = tiny_config();
        build_dataset(&config, 9, d1.path()).unwrap();
        build_dataset(&config, 9, d2.path()).unwrap();
        for f in [MANIFEST_FILE, TRAIN_FILE, TEST_FILE, META_FILE] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let ds = load_dataset(d1.path(), Split::All).unwrap();
        assert_eq!(ds.samples.len(), 20);
        for (row, sample) in read_manifest(&d1.path().join(MANIFEST_FILE))
            .unwrap()
            .iter()
            .zip(&ds.samples)
        {
            assert_eq!(row.tsi, sample.tsi);
            assert_eq!(row.transcription, sample.text);
            let img = read_pgm(&d1.path().join(&row.path)).unwrap();
            assert_eq!(img, sample.image);
            assert_eq!(sample.image.shape()[0], 32);
            assert_eq!(sample.image.shape()[1] % 16, 0);
        }
        assert_eq!(ds.indices_of_tsi(2).len(), 5);
        assert_eq!(ds.style_of_tsi(2), 0);
    }

    #[test]
    fn parallel_build_matches_single_thread_build() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        pool.install(|| build_dataset(&config, 77, d1.path())).unwrap();
        build_dataset(&config, 77, d2.path()).unwrap();
        let rows = read_manifest(&d1.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(
            std::fs::read(d1.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(d2.path().join(MANIFEST_FILE)).unwrap()
        );
        for r in rows {
            assert_eq!(
                std::fs::read(d1.path().join(&r.path)).unwrap(),
                std::fs::read(d2.path().join(&r.path)).unwrap(),
                "{}",
                r.path
            );
        }
    }

    #[test]
    fn manifest_parser_rejects_malformed_rows() {
        assert!(parse_manifest("a.pgm\t0\tab\n").is_ok());
        assert!(parse_manifest("a.pgm\t0\n").is_err());
        assert!(parse_manifest("a.pgm\tx\tab\n").is_err());
        let rows = parse_manifest("a.pgm\t0\tab cd\n").unwrap();
        assert_eq!(rows[0].transcription, "ab cd");
    }

    #[test]
    fn labels_are_always_feasible_for_their_images() {
        // Rendered width grows faster than the CTC lower bound, so no
        // generated sample is ever skipped by the trainer.
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            lines_per_tsi: 30,
            word_len: (2, 8),
            words_per_line: (1, 2),
            ..tiny_config()
        };
        build_dataset(&config, 5, dir.path()).unwrap();
        let ds = load_dataset(dir.path(), Split::All).unwrap();
        for s in &ds.samples {
            let frames = s.image.shape()[1] / 4;
            assert!(frames >= crate::ctc::min_frames(&s.label));
        }
    }
}
