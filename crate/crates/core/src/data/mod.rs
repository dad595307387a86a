//! Synthetic facade corpus: generation, referring prompts, splitting and
//! on-disk formats.

mod generator;
mod pnm;

pub use generator::{generate_facade, Facade, FacadeSpec, Style, MAX_COLS, MAX_ROWS};
pub use pnm::{decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_image, read_mask, write_image, write_mask};

use crate::error::{Error, Result};
use crate::seg::BinaryMask;
use crate::text::{tokenize, TokenSequence, EOS};
use crate::vision::ImageTensor;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const PROMPT_PREFIX: &str = "User: <Image> Help me segment the objects in this image according to ";
pub const PROMPT_SUFFIX: &str = "? SAAF: ";
pub const ANSWER: &str = "Understood, it is <SEG>.";

pub const WINDOW_DESCRIPTIONS: [&str; 4] =
    ["daylight-admitting components", "glazed sections", "transparent surfaces", "fenestration elements"];
pub const WALL_DESCRIPTIONS: [&str; 3] = ["opaque envelope surfaces", "masonry regions", "solid wall areas"];

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MIN_SPLIT_SAMPLES: usize = 10;

/// Prompt up to and including the answer boundary `"SAAF: "`.
pub fn render_prompt(description: &str) -> String {
    format!("{PROMPT_PREFIX}{description}{PROMPT_SUFFIX}")
}

/// Prompt tokens followed by the supervised answer and a supervised `<EOS>`.
pub fn training_tokens(prompt: &str, answer: &str) -> Result<TokenSequence> {
    let mut seq = tokenize(prompt)?;
    seq.extend(&tokenize(answer)?, true);
    seq.push(EOS, true);
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetClass {
    Window,
    Wall,
}

impl TargetClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetClass::Window => "window",
            TargetClass::Wall => "wall",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "window" => Ok(TargetClass::Window),
            "wall" => Ok(TargetClass::Wall),
            other => Err(Error::UnknownClass(other.to_string())),
        }
    }

    pub fn descriptions(&self) -> &'static [&'static str] {
        match self {
            TargetClass::Window => &WINDOW_DESCRIPTIONS,
            TargetClass::Wall => &WALL_DESCRIPTIONS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "val" => Some(Split::Val),
            _ => None,
        }
    }
}

/// Files of one rendered facade, relative to the dataset root.
#[derive(Debug, Clone, PartialEq)]
pub struct FacadeFiles {
    pub image: PathBuf,
    pub window_mask: PathBuf,
    pub wall_mask: PathBuf,
    pub sha256: String,
    pub style: Style,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferringSample {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub target_class: TargetClass,
    pub description: String,
    pub prompt: String,
    pub answer: String,
    pub split: Split,
    pub sha256: String,
    pub style: Style,
}

impl ReferringSample {
    pub fn tokens(&self) -> Result<TokenSequence> {
        training_tokens(&self.prompt, &self.answer)
    }
}

/// Builds a sample pointing at the mask of `target_class`. The split is
/// provisional until [`split_and_dedup`].
pub fn make_referring_sample(
    id: &str,
    files: &FacadeFiles,
    target_class: &str,
    description: &str,
) -> Result<ReferringSample> {
    let target_class = TargetClass::parse(target_class)?;
    if description.trim().is_empty() {
        return Err(Error::EmptyDescription);
    }
    tokenize(description)?;
    let mask = match target_class {
        TargetClass::Window => files.window_mask.clone(),
        TargetClass::Wall => files.wall_mask.clone(),
    };
    Ok(ReferringSample {
        id: id.to_string(),
        image: files.image.clone(),
        mask,
        target_class,
        description: description.to_string(),
        prompt: render_prompt(description),
        answer: ANSWER.to_string(),
        split: Split::Train,
        sha256: files.sha256.clone(),
        style: files.style,
    })
}

/// Ordered samples with their split tags.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub samples: Vec<ReferringSample>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ReferringSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// `(train, test, val)` sizes.
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |s| self.split(s).count();
        (c(Split::Train), c(Split::Test), c(Split::Val))
    }

    /// No content hash may appear in two different splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for s in &self.samples {
            match seen.insert(&s.sha256, s.split) {
                Some(prev) if prev != s.split => return Err(Error::SplitOverlap(s.sha256.clone())),
                _ => {}
            }
        }
        Ok(())
    }
}

/// `(test, val, train)` sizes for `n` samples: `⌊0.2n⌋`, `⌊0.1n⌋`, remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let test = n / 5;
    let val = n / 10;
    (test, val, n - test - val)
}

/// Drops later samples whose image hash was already seen, then assigns
/// splits from a seeded shuffle. Sample order is preserved.
pub fn split_and_dedup(samples: Vec<ReferringSample>, seed: u64) -> Result<DatasetManifest> {
    let mut seen = HashSet::new();
    let mut unique: Vec<ReferringSample> = samples.into_iter().filter(|s| seen.insert(s.sha256.clone())).collect();
    if unique.len() < MIN_SPLIT_SAMPLES {
        return Err(Error::TooFewSamples { needed: MIN_SPLIT_SAMPLES, got: unique.len() });
    }
    let mut order: Vec<usize> = (0..unique.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, val, _) = split_sizes(unique.len());
    for (rank, &i) in order.iter().enumerate() {
        unique[i].split = if rank < test {
            Split::Test
        } else if rank < test + val {
            Split::Val
        } else {
            Split::Train
        };
    }
    let manifest = DatasetManifest { samples: unique };
    manifest.validate()?;
    Ok(manifest)
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    image: String,
    mask: String,
    target_class: String,
    description: String,
    split: String,
    sha256: String,
    #[serde(default = "default_style")]
    style: String,
}

fn default_style() -> String {
    Style::Photo.as_str().to_string()
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn encode_manifest(manifest: &DatasetManifest) -> String {
    let mut out = String::new();
    for s in &manifest.samples {
        let record = Record {
            id: s.id.clone(),
            image: s.image.to_string_lossy().into_owned(),
            mask: s.mask.to_string_lossy().into_owned(),
            target_class: s.target_class.as_str().to_string(),
            description: s.description.clone(),
            split: s.split.as_str().to_string(),
            sha256: s.sha256.clone(),
            style: s.style.as_str().to_string(),
        };
        out.push_str(&serde_json::to_string(&record).expect("records serialise"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    write_atomic(path, encode_manifest(manifest).as_bytes())
}

/// Parses newline-delimited records; `path` is only used in error messages.
pub fn decode_manifest(text: &str, path: &Path) -> Result<DatasetManifest> {
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedRecord { path: path.to_path_buf(), line: i + 1, reason };
        let r: Record = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let target_class = TargetClass::parse(&r.target_class).map_err(|e| malformed(e.to_string()))?;
        let split = Split::parse(&r.split).ok_or_else(|| malformed(format!("unknown split `{}`", r.split)))?;
        let style = Style::parse(&r.style).ok_or_else(|| malformed(format!("unknown style `{}`", r.style)))?;
        if r.description.trim().is_empty() {
            return Err(malformed("empty description".into()));
        }
        samples.push(ReferringSample {
            id: r.id,
            image: PathBuf::from(r.image),
            mask: PathBuf::from(r.mask),
            target_class,
            prompt: render_prompt(&r.description),
            description: r.description,
            answer: ANSWER.to_string(),
            split,
            sha256: r.sha256,
            style,
        });
    }
    let manifest = DatasetManifest { samples };
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_manifest(&text, path)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Options for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenOptions {
    pub count: usize,
    pub seed: u64,
    pub size: usize,
    pub styles: Vec<Style>,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { count: 100, seed: 0, size: 64, styles: vec![Style::Photo] }
    }
}

/// Renders `count` facades under `root` (styles assigned round-robin), one
/// referring sample each, and writes the split manifest.
///
/// Sample `i` draws everything from the ChaCha stream `i` of `seed`, so the
/// output is a pure function of the options.
pub fn generate_dataset(root: &Path, opts: &GenOptions) -> Result<DatasetManifest> {
    if opts.styles.is_empty() {
        return Err(Error::SpecInfeasible("no styles requested".into()));
    }
    let mut samples = Vec::with_capacity(opts.count);
    for i in 0..opts.count {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64);
        let style = opts.styles[i % opts.styles.len()];
        let spec = FacadeSpec::sample(&mut rng, style, opts.size, opts.size);
        let facade = generate_facade(&spec, rng.next_u64())?;

        let id = format!("{i:06}");
        let image = PathBuf::from(format!("images/{id}.ppm"));
        let window_mask = PathBuf::from(format!("masks/{id}_window.pgm"));
        let wall_mask = PathBuf::from(format!("masks/{id}_wall.pgm"));
        let ppm = encode_ppm(&facade.image);
        write_atomic(&root.join(&image), &ppm)?;
        write_mask(&root.join(&window_mask), &facade.window)?;
        write_mask(&root.join(&wall_mask), &facade.wall)?;

        let files = FacadeFiles { image, window_mask, wall_mask, sha256: sha256_hex(&ppm), style };
        let class = if rng.random_bool(0.5) { TargetClass::Window } else { TargetClass::Wall };
        let description = class.descriptions().choose(&mut rng).expect("non-empty pool");
        samples.push(make_referring_sample(&id, &files, class.as_str(), description)?);
    }
    let manifest = split_and_dedup(samples, opts.seed)?;
    write_manifest(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A sample with its image and target mask in memory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: ReferringSample,
    pub image: ImageTensor,
    pub mask: BinaryMask,
}

/// Reads the image and mask of every sample in `split`, in manifest order.
pub fn load_split(root: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<LoadedSample>> {
    manifest
        .split(split)
        .map(|s| {
            let image = read_image(&root.join(&s.image))?;
            let mask = read_mask(&root.join(&s.mask))?;
            if (mask.height, mask.width) != (image.height, image.width) {
                return Err(Error::DimsMismatch {
                    expected_h: image.height,
                    expected_w: image.width,
                    got_h: mask.height,
                    got_w: mask.width,
                });
            }
            Ok(LoadedSample { sample: s.clone(), image, mask })
        })
        .collect()
}

/// Number of samples per style in `split`.
pub fn style_counts(manifest: &DatasetManifest, split: Split) -> BTreeMap<Style, usize> {
    let mut out = BTreeMap::new();
    for s in manifest.split(split) {
        *out.entry(s.style).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::detokenize;
    use proptest::prelude::*;

    const GOLDEN: &str = "User: <Image> Help me segment the objects in this image according to glazed sections? SAAF: Understood, it is <SEG>.";

    fn files(hash: &str) -> FacadeFiles {
        FacadeFiles {
            image: "images/a.ppm".into(),
            window_mask: "masks/a_window.pgm".into(),
            wall_mask: "masks/a_wall.pgm".into(),
            sha256: hash.to_string(),
            style: Style::Photo,
        }
    }

    fn samples(n: usize) -> Vec<ReferringSample> {
        (0..n)
            .map(|i| {
                make_referring_sample(&format!("{i}"), &files(&format!("h{i}")), "window", "glazed sections").unwrap()
            })
            .collect()
    }

    #[test]
    fn template_matches_golden_string() {
        let s = make_referring_sample("0", &files("x"), "window", "glazed sections").unwrap();
        assert_eq!(format!("{}{}", s.prompt, s.answer), GOLDEN);
        assert!(s.prompt.ends_with("SAAF: "));
        assert!(s.prompt.contains("Help me segment the objects in this image according to glazed sections?"));
        assert_eq!(detokenize(&tokenize(GOLDEN).unwrap().ids).unwrap(), GOLDEN);
    }

    #[test]
    fn training_tokens_supervise_answer_only() {
        let s = make_referring_sample("0", &files("x"), "wall", "masonry regions").unwrap();
        let t = s.tokens().unwrap();
        let prompt_len = tokenize(&s.prompt).unwrap().len();
        assert!(t.supervise[..prompt_len].iter().all(|&f| !f));
        assert!(t.supervise[prompt_len..].iter().all(|&f| f));
        assert_eq!(*t.ids.last().unwrap(), EOS);
        assert_eq!(t.seg_position, Some(prompt_len + ANSWER.len() - 6));
    }

    #[test]
    fn class_selects_mask() {
        assert_eq!(
            make_referring_sample("0", &files("x"), "window", "glazed sections").unwrap().mask,
            PathBuf::from("masks/a_window.pgm")
        );
        assert_eq!(
            make_referring_sample("0", &files("x"), "wall", "masonry regions").unwrap().mask,
            PathBuf::from("masks/a_wall.pgm")
        );
        assert!(matches!(make_referring_sample("0", &files("x"), "door", "x"), Err(Error::UnknownClass(_))));
        assert!(matches!(make_referring_sample("0", &files("x"), "wall", ""), Err(Error::EmptyDescription)));
    }

    #[test]
    fn split_sizes_follow_rounding_rule() {
        let m = split_and_dedup(samples(100), 1).unwrap();
        assert_eq!(m.counts(), (70, 20, 10));
        let m = split_and_dedup(samples(95), 1).unwrap();
        assert_eq!(m.counts(), (67, 19, 9));
        assert!(matches!(split_and_dedup(samples(9), 1), Err(Error::TooFewSamples { needed: 10, got: 9 })));
    }

    #[test]
    fn duplicates_collapse() {
        let mut s = samples(12);
        s[5].sha256 = s[2].sha256.clone();
        let m = split_and_dedup(s, 0).unwrap();
        assert_eq!(m.samples.len(), 11);
        assert_eq!(m.samples.iter().filter(|x| x.sha256 == "h2").count(), 1);
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let m = split_and_dedup(samples(20), 3).unwrap();
        let text = encode_manifest(&m);
        assert_eq!(decode_manifest(&text, Path::new("m")).unwrap(), m);

        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[3] = lines[3].replace(r#""split":"#, r#""splat":"#);
        let err = decode_manifest(&lines.join("\n"), Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { line: 4, .. }), "{err}");

        let mut dup = m.clone();
        let (a, b) = (
            dup.samples.iter().position(|s| s.split == Split::Train).unwrap(),
            dup.samples.iter().position(|s| s.split == Split::Test).unwrap(),
        );
        dup.samples[b].sha256 = dup.samples[a].sha256.clone();
        assert!(matches!(decode_manifest(&encode_manifest(&dup), Path::new("m")), Err(Error::SplitOverlap(_))));
    }

    #[test]
    fn manifest_without_style_defaults_to_photo() {
        let line = r#"{"id":"0","image":"i.ppm","mask":"m.pgm","target_class":"window","description":"glazed sections","split":"val","sha256":"ab"}"#;
        let m = decode_manifest(line, Path::new("m")).unwrap();
        assert_eq!(m.samples[0].style, Style::Photo);
        assert_eq!(m.samples[0].split, Split::Val);
    }

    #[test]
    fn generated_dataset_is_reproducible() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let opts = GenOptions { count: 12, seed: 7, size: 32, styles: vec![Style::Photo, Style::LineDrawing] };
        let ma = generate_dataset(a.path(), &opts).unwrap();
        let mb = generate_dataset(b.path(), &opts).unwrap();
        assert_eq!(ma, mb);
        for s in &ma.samples {
            assert_eq!(
                std::fs::read(a.path().join(&s.image)).unwrap(),
                std::fs::read(b.path().join(&s.image)).unwrap()
            );
        }
        assert_eq!(
            std::fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
        let loaded = load_split(a.path(), &ma, Split::Train).unwrap();
        assert_eq!(loaded.len(), ma.counts().0);
        for l in &loaded {
            assert_eq!(sha256_hex(&encode_ppm(&l.image)), l.sample.sha256);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn splits_are_exact_and_disjoint(n in 10usize..300, seed in any::<u64>()) {
            let m = split_and_dedup(samples(n), seed).unwrap();
            let (test, val, train) = split_sizes(n);
            prop_assert_eq!(m.counts(), (train, test, val));
            prop_assert!(m.validate().is_ok());
        }
    }
}
