//! Synthetic caption datasets and the JSON-lines record format.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GlobalLocalFeatures;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("video {video_id}: {which} vector has length {got}, expected {expected}")]
    Length {
        video_id: String,
        which: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("video {video_id}: {which}[{index}] = {value} is outside (0, 1)")]
    Range {
        video_id: String,
        which: &'static str,
        index: usize,
        value: f64,
    },
    #[error("video {video_id}: {count} captions, need at least 2")]
    TooFewCaptions { video_id: String, count: usize },
    #[error("duplicate video id {0}")]
    DuplicateId(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("invalid split: {0}")]
    Split(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub video_id: String,
    pub features: GlobalLocalFeatures,
    pub captions: Vec<String>,
}

impl FeatureRecord {
    /// Checks caption count, vector lengths against `(K, J, M)` and the open unit interval.
    pub fn validate(&self, lengths: Option<(usize, usize, usize)>) -> Result<()> {
        if self.captions.len() < 2 {
            return Err(DataError::TooFewCaptions {
                video_id: self.video_id.clone(),
                count: self.captions.len(),
            });
        }
        let f = &self.features;
        let expected = lengths.map(|(k, j, m)| [k, j, m]);
        for (i, (which, v)) in [("long", &f.long), ("short", &f.short), ("local", &f.local)]
            .into_iter()
            .enumerate()
        {
            if let Some(e) = expected {
                if v.len() != e[i] {
                    return Err(DataError::Length {
                        video_id: self.video_id.clone(),
                        which,
                        got: v.len(),
                        expected: e[i],
                    });
                }
            }
            if let Some((index, &value)) = v.iter().enumerate().find(|(_, &x)| !(x > 0.0 && x < 1.0)) {
                return Err(DataError::Range {
                    video_id: self.video_id.clone(),
                    which,
                    index,
                    value,
                });
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic corpus. `k`, `j`, `m` are the feature lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_objects: usize,
    pub num_actions: usize,
    pub num_scenes: usize,
    pub num_videos: usize,
    pub g: usize,
    pub corruption_rate: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub k: usize,
    pub j: usize,
    pub m: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_objects: 10,
            num_actions: 10,
            num_scenes: 8,
            num_videos: 200,
            g: 20,
            corruption_rate: 0.5,
            noise_sigma: 0.05,
            seed: 7,
            k: 300,
            j: 400,
            m: 1000,
        }
    }
}

const OBJECTS: [&str; 40] = [
    "man", "woman", "dog", "cat", "child", "girl", "boy", "horse", "bird", "chef", "player", "band",
    "robot", "baby", "monkey", "student", "teacher", "crowd", "car", "train", "cow", "duck", "fish",
    "rabbit", "singer", "dancer", "soldier", "doctor", "farmer", "pilot", "lion", "tiger", "bear",
    "goat", "sheep", "panda", "clown", "nurse", "police", "team",
];

const ACTIONS: [&str; 30] = [
    "running", "jumping", "cooking", "singing", "dancing", "swimming", "eating", "talking",
    "driving", "riding", "playing", "walking", "reading", "writing", "painting", "climbing",
    "sleeping", "laughing", "fighting", "racing", "skating", "fishing", "shouting", "sitting",
    "typing", "cleaning", "drawing", "flying", "kicking", "throwing",
];

const SCENES: [&str; 20] = [
    "park", "kitchen", "street", "field", "room", "forest", "pool", "stadium", "beach", "garden",
    "office", "road", "river", "snow", "desert", "studio", "classroom", "market", "lake", "city",
];

fn names(base: &[&str], n: usize, prefix: &str) -> Vec<String> {
    (0..n)
        .map(|i| match base.get(i) {
            Some(w) => w.to_string(),
            None => format!("{prefix}{i}"),
        })
        .collect()
}

/// Latent content of one synthetic video.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Latent {
    pub object: usize,
    pub action: usize,
    pub scene: usize,
}

/// Word lists behind a [`SynthSpec`]. Long-range slot `i` belongs to `content()[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthLexicon {
    pub objects: Vec<String>,
    pub actions: Vec<String>,
    pub scenes: Vec<String>,
}

impl SynthLexicon {
    pub fn new(spec: &SynthSpec) -> Self {
        Self {
            objects: names(&OBJECTS, spec.num_objects, "object"),
            actions: names(&ACTIONS, spec.num_actions, "acting"),
            scenes: names(&SCENES, spec.num_scenes, "place"),
        }
    }

    pub fn content(&self) -> Vec<&str> {
        self.objects
            .iter()
            .chain(&self.actions)
            .chain(&self.scenes)
            .map(String::as_str)
            .collect()
    }

    pub fn long_slots(&self, l: &Latent) -> [usize; 3] {
        let (no, na) = (self.objects.len(), self.actions.len());
        [l.object, no + l.action, no + na + l.scene]
    }

    pub fn canonical(&self, l: &Latent) -> String {
        format!(
            "a {} is {} in the {}",
            self.objects[l.object], self.actions[l.action], self.scenes[l.scene]
        )
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.num_objects == 0 || self.num_actions == 0 || self.num_scenes == 0 {
            return bad("object, action and scene counts must be at least 1".into());
        }
        if self.num_objects > self.m {
            return bad(format!("{} objects exceed {} local slots", self.num_objects, self.m));
        }
        if self.num_actions > self.j {
            return bad(format!("{} actions exceed {} action slots", self.num_actions, self.j));
        }
        let content = self.num_objects + self.num_actions + self.num_scenes;
        if content > self.k {
            return bad(format!("{content} content words exceed {} long-range slots", self.k));
        }
        if self.g < 2 {
            return bad(format!("need at least 2 captions per video, got {}", self.g));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return bad(format!("corruption rate {} outside [0, 1]", self.corruption_rate));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be non-negative", self.noise_sigma));
        }
        Ok(())
    }
}

const CLAMP: (f64, f64) = (0.001, 0.999);

fn noise_vec(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (sigma * z.abs()).clamp(CLAMP.0, CLAMP.1)
        })
        .collect()
}

/// Applies word drop, adjacent swap or substitution to each word with probability `q`.
fn corrupt(words: &[&str], q: f64, pool: &[&str], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    let mut i = 0;
    while i < out.len() {
        if rng.gen::<f64>() < q {
            match rng.gen_range(0..3) {
                0 if out.len() > 1 => {
                    out.remove(i);
                    continue;
                }
                1 if i + 1 < out.len() => {
                    out.swap(i, i + 1);
                    i += 1;
                }
                _ => out[i] = pool[rng.gen_range(0..pool.len())].to_string(),
            }
        }
        i += 1;
    }
    out
}

/// Records together with the latent triple each was drawn from.
pub fn gen_synthetic_with_latents(spec: &SynthSpec) -> Result<Vec<(FeatureRecord, Latent)>> {
    spec.validate()?;
    let lex = SynthLexicon::new(spec);
    let pool = lex.content();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.num_videos.max(1).to_string().len().max(4);
    let mut out = Vec::with_capacity(spec.num_videos);
    for v in 0..spec.num_videos {
        let latent = Latent {
            object: rng.gen_range(0..spec.num_objects),
            action: rng.gen_range(0..spec.num_actions),
            scene: rng.gen_range(0..spec.num_scenes),
        };
        let mut long = noise_vec(spec.k, spec.noise_sigma, &mut rng);
        let mut short = noise_vec(spec.j, spec.noise_sigma, &mut rng);
        let mut local = noise_vec(spec.m, spec.noise_sigma, &mut rng);
        local[latent.object] = rng.gen_range(0.7..=0.99);
        short[latent.action] = rng.gen_range(0.7..=0.99);
        for s in lex.long_slots(&latent) {
            long[s] = rng.gen_range(0.7..=0.99);
        }
        let canonical = lex.canonical(&latent);
        let words: Vec<&str> = canonical.split(' ').collect();
        let mut captions = vec![canonical.clone()];
        for _ in 1..spec.g {
            let q = rng.gen::<f64>() * spec.corruption_rate;
            captions.push(corrupt(&words, q, &pool, &mut rng).join(" "));
        }
        out.push((
            FeatureRecord {
                video_id: format!("video{v:0width$}"),
                features: GlobalLocalFeatures { long, short, local },
                captions,
            },
            latent,
        ));
    }
    Ok(out)
}

pub fn gen_synthetic(spec: &SynthSpec) -> Result<Vec<FeatureRecord>> {
    Ok(gen_synthetic_with_latents(spec)?.into_iter().map(|(r, _)| r).collect())
}

pub fn to_jsonl(records: &[FeatureRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialize"));
        s.push('\n');
    }
    s
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn write_dataset(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    write_atomic(path, to_jsonl(records).as_bytes()).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses JSON lines, skipping blank lines. Vector lengths are checked when given.
pub fn parse_dataset<R: BufRead>(reader: R, lengths: Option<(usize, usize, usize)>) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.validate(lengths)?;
        if !seen.insert(rec.video_id.clone()) {
            return Err(DataError::DuplicateId(rec.video_id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, lengths: Option<(usize, usize, usize)>) -> Result<Vec<FeatureRecord>> {
    let f = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(BufReader::new(f), lengths)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then `val = floor(n * r_val)`, `test = floor(n * r_test)`
/// and the remainder to train. `ratios` is `(train, val, test)`.
pub fn split_dataset(ids: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let n = ids.len();
    if n < 3 {
        return Err(DataError::Split(format!("need at least 3 records, got {n}")));
    }
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) || ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!("ratios {ratios:?} must be positive and sum to 1")));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * rv).floor() as usize;
    let n_test = (n as f64 * rs).floor() as usize;
    let n_train = n - n_val - n_test;
    for (name, size) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if size == 0 {
            return Err(DataError::Split(format!("{name} split is empty for {n} records")));
        }
    }
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(DatasetSplit { train: order, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{gt_weights, IdfTable, MetricKind};
    use crate::text::tokenize;
    use std::collections::BTreeMap;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            num_videos: 30,
            g: 6,
            k: 40,
            j: 20,
            m: 25,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_synthetic(&small_spec()).unwrap();
        let b = gen_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&SynthSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn records_satisfy_invariants() {
        let spec = small_spec();
        let recs = gen_synthetic_with_latents(&spec).unwrap();
        let lex = SynthLexicon::new(&spec);
        for (r, l) in &recs {
            r.validate(Some((spec.k, spec.j, spec.m))).unwrap();
            assert_eq!(r.captions.len(), spec.g);
            assert_eq!(r.captions[0], lex.canonical(l));
            assert!(r.features.local[l.object] >= 0.7);
            assert!(r.features.short[l.action] >= 0.7);
            for s in lex.long_slots(l) {
                assert!(r.features.long[s] >= 0.7);
            }
            for c in &r.captions {
                let n = tokenize(c).len();
                assert!((1..=7).contains(&n));
            }
        }
    }

    #[test]
    fn zero_corruption_gives_identical_captions_and_equal_weights() {
        let spec = SynthSpec { corruption_rate: 0.0, ..small_spec() };
        let recs = gen_synthetic(&spec).unwrap();
        let refs: BTreeMap<String, Vec<Vec<String>>> = recs
            .iter()
            .map(|r| (r.video_id.clone(), r.captions.iter().map(|c| tokenize(c)).collect()))
            .collect();
        let idf = IdfTable::build(refs.values().map(Vec::as_slice));
        for r in &recs {
            assert!(r.captions.iter().all(|c| c == &r.captions[0]));
            for kind in MetricKind::ALL {
                let w = gt_weights(&refs[&r.video_id], kind, Some(&idf)).unwrap();
                assert!(w.iter().all(|&x| x == w[0]));
            }
        }
    }

    #[test]
    fn degenerate_spec_differs_only_by_noise() {
        let spec = SynthSpec {
            num_objects: 1,
            num_actions: 1,
            num_scenes: 1,
            corruption_rate: 0.0,
            ..small_spec()
        };
        let recs = gen_synthetic(&spec).unwrap();
        assert!(recs.iter().all(|r| r.captions == recs[0].captions));
        assert!(recs.iter().all(|r| r.features.local[0] >= 0.7));
    }

    #[test]
    fn clean_captions_outweigh_corrupted() {
        let spec = SynthSpec { num_videos: 100, g: 20, corruption_rate: 0.5, ..small_spec() };
        let recs = gen_synthetic(&spec).unwrap();
        let refs: BTreeMap<String, Vec<Vec<String>>> = recs
            .iter()
            .map(|r| (r.video_id.clone(), r.captions.iter().map(|c| tokenize(c)).collect()))
            .collect();
        let idf = IdfTable::build(refs.values().map(Vec::as_slice));
        let (mut clean, mut dirty, mut nc, mut nd) = (0.0, 0.0, 0usize, 0usize);
        for r in &recs {
            let w = gt_weights(&refs[&r.video_id], MetricKind::Cider, Some(&idf)).unwrap();
            for (c, x) in r.captions.iter().zip(w) {
                if c == &r.captions[0] {
                    clean += x;
                    nc += 1;
                } else {
                    dirty += x;
                    nd += 1;
                }
            }
        }
        assert!(clean / nc as f64 > dirty / nd as f64);
    }

    #[test]
    fn spec_limits() {
        let err = gen_synthetic(&SynthSpec { num_objects: 26, ..small_spec() }).unwrap_err();
        assert!(err.to_string().contains("local slots"));
        let err = gen_synthetic(&SynthSpec { num_objects: 20, num_actions: 20, num_scenes: 8, ..small_spec() }).unwrap_err();
        assert!(err.to_string().contains("long-range"));
        assert!(gen_synthetic(&SynthSpec { num_scenes: 0, ..small_spec() }).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = small_spec();
        let recs = gen_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&p, &recs).unwrap();
        let back = load_dataset(&p, Some((spec.k, spec.j, spec.m))).unwrap();
        assert_eq!(back, recs);
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), spec.num_videos);
    }

    #[test]
    fn load_rejects_bad_records() {
        let spec = small_spec();
        let mut recs = gen_synthetic(&spec).unwrap();
        recs[1].features.long.pop();
        let text = to_jsonl(&recs[..3]);
        let err = parse_dataset(text.as_bytes(), Some((spec.k, spec.j, spec.m))).unwrap_err();
        assert!(err.to_string().contains(&recs[1].video_id), "{err}");

        let mut recs = gen_synthetic(&spec).unwrap();
        recs[0].features.short[3] = 1.0;
        let err = parse_dataset(to_jsonl(&recs[..1]).as_bytes(), None).unwrap_err();
        assert!(matches!(err, DataError::Range { index: 3, which: "short", .. }), "{err}");

        let text = format!("{}{{\"video_id\": 3}}\n", to_jsonl(&gen_synthetic(&spec).unwrap()[..2]));
        let err = parse_dataset(text.as_bytes(), None).unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 3, .. }), "{err}");

        let mut recs = gen_synthetic(&spec).unwrap();
        recs[0].captions.truncate(1);
        assert!(matches!(
            parse_dataset(to_jsonl(&recs[..1]).as_bytes(), None).unwrap_err(),
            DataError::TooFewCaptions { count: 1, .. }
        ));
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_dataset(&ids(100), (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, split_dataset(&ids(100), (0.8, 0.1, 0.1), 3).unwrap());
        let all: BTreeSet<_> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn split_errors() {
        let err = split_dataset(&ids(10), (0.65, 0.05, 0.30), 1).unwrap_err();
        assert!(err.to_string().contains("val"), "{err}");
        assert!(split_dataset(&ids(2), (0.4, 0.3, 0.3), 1).is_err());
        assert!(split_dataset(&ids(10), (0.5, 0.3, 0.3), 1).is_err());
    }
}
