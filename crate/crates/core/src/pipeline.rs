//! End-to-end runs driven by a [`RunConfig`]: seeding, boosting, evaluation,
//! single-video decoding and standalone scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::data::{load_dataset, split_dataset, DataError, DatasetSplit, FeatureRecord};
use crate::metrics::{corpus_metrics, MetricRow, MetricsError};
use crate::model::ModelDims;
use crate::text::tokenize;
use crate::training::{
    encode_videos, evaluate, train_boosting, train_seeding, EncodedVideo, EpochRecord, MetricLexicon, Phase,
    TrainError, TrainRecord, TrainingSet,
};

pub const LOG_HEADER: &str = "epoch\tphase\tloss\tB@4\tM\tR\tC\txi_prob";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(format!("unknown split {s:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub records: Vec<FeatureRecord>,
    pub split: DatasetSplit,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let m = &cfg.model;
        let records = load_dataset(&cfg.dataset, Some((m.k, m.j, m.m)))?;
        Self::from_records(cfg, records)
    }

    pub fn from_records(cfg: &RunConfig, records: Vec<FeatureRecord>) -> Result<Self> {
        let ids: Vec<String> = records.iter().map(|r| r.video_id.clone()).collect();
        let split = split_dataset(&ids, cfg.split.ratios(), cfg.split.seed)?;
        Ok(Self { records, split })
    }

    pub fn ids(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.split.train,
            SplitName::Val => &self.split.val,
            SplitName::Test => &self.split.test,
        }
    }

    pub fn records(&self, which: SplitName) -> Vec<&FeatureRecord> {
        let wanted: BTreeSet<&str> = self.ids(which).iter().map(String::as_str).collect();
        self.records.iter().filter(|r| wanted.contains(r.video_id.as_str())).collect()
    }

    pub fn training_set(&self, cfg: &RunConfig) -> Result<TrainingSet> {
        Ok(TrainingSet::new(&self.records, &self.split, cfg.model.vocab_size, cfg.model.max_len)?)
    }

    pub fn training_set_with(&self, ckpt: &Checkpoint) -> TrainingSet {
        TrainingSet::with_vocab(
            ckpt.vocab.clone(),
            self.records(SplitName::Train),
            self.records(SplitName::Val),
            ckpt.model.dims().max_len,
        )
    }
}

#[derive(Debug, Clone)]
pub struct PhaseOutput {
    pub checkpoint: Checkpoint,
    pub record: TrainRecord,
}

impl PhaseOutput {
    /// Header plus one line per epoch.
    pub fn log(&self) -> String {
        format!("{LOG_HEADER}\n{}", self.record.log_lines())
    }
}

fn phase_rng(seed: u64, phase: Phase) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match phase {
        Phase::Init | Phase::Seeding => 0,
        Phase::Boosting => 1,
    });
    rng
}

pub fn model_dims(cfg: &RunConfig, data: &TrainingSet) -> ModelDims {
    ModelDims {
        vocab_size: data.vocab.len(),
        ..cfg.model
    }
}

pub fn run_seeding(cfg: &RunConfig, prepared: &Prepared, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<PhaseOutput> {
    let data = prepared.training_set(cfg)?;
    let dims = model_dims(cfg, &data);
    let out = train_seeding(&data, dims, &cfg.seeding, &mut phase_rng(cfg.seed, Phase::Seeding), on_epoch)?;
    let phase = if out.record.best_epoch == 0 { Phase::Init } else { Phase::Seeding };
    Ok(PhaseOutput {
        checkpoint: Checkpoint {
            model: out.model,
            vocab: data.vocab,
            phase,
            epoch: out.record.best_epoch,
            adam: Some(out.adam),
        },
        record: out.record,
    })
}

pub fn run_boosting(
    cfg: &RunConfig,
    prepared: &Prepared,
    entrance: Checkpoint,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<PhaseOutput> {
    entrance.check_dims(&cfg.model)?;
    let data = prepared.training_set_with(&entrance);
    let out = train_boosting(
        entrance.model,
        &data,
        &cfg.boosting,
        &mut phase_rng(cfg.seed, Phase::Boosting),
        on_epoch,
    )?;
    Ok(PhaseOutput {
        checkpoint: Checkpoint {
            model: out.model,
            vocab: entrance.vocab,
            phase: Phase::Boosting,
            epoch: out.record.best_epoch,
            adam: Some(out.adam),
        },
        record: out.record,
    })
}

/// Videos of one split encoded against the checkpoint's vocabulary.
pub fn encoded_split(prepared: &Prepared, ckpt: &Checkpoint, which: SplitName) -> Vec<EncodedVideo> {
    let mut lex = MetricLexicon::new(ckpt.vocab.clone());
    encode_videos(prepared.records(which), &mut lex, ckpt.model.dims().max_len)
}

/// Greedy-decodes every video of the split and scores it against its references.
pub fn evaluate_split(prepared: &Prepared, ckpt: &Checkpoint, which: SplitName) -> Result<MetricRow> {
    let videos = encoded_split(prepared, ckpt, which);
    if videos.is_empty() {
        return Err(PipelineError::Input(format!("split {which:?} is empty")));
    }
    Ok(evaluate(&ckpt.model, &videos, ckpt.model.dims().max_len)?)
}

pub fn decode_one(records: &[FeatureRecord], ckpt: &Checkpoint, video_id: &str) -> Result<String> {
    let rec = records
        .iter()
        .find(|r| r.video_id == video_id)
        .ok_or_else(|| PipelineError::Input(format!("no video with id {video_id:?}")))?;
    let fused = ckpt.model.fuse_value(&rec.features).map_err(TrainError::from)?;
    let out = ckpt
        .model
        .decode_greedy(&fused, ckpt.model.dims().max_len)
        .map_err(TrainError::from)?;
    Ok(ckpt.vocab.decode(&out.sentence).join(" "))
}

/// `video_id<TAB>caption` lines; blank lines are skipped, a repeated id is an error.
pub fn parse_candidates<R: BufRead>(reader: R) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| PipelineError::Input(format!("reading candidates: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| PipelineError::Input(format!("candidates line {}: expected video_id<TAB>caption", i + 1)))?;
        if out.insert(id.to_string(), caption.to_string()).is_some() {
            return Err(PipelineError::Input(format!("candidates line {}: duplicate id {id}", i + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub metrics: MetricRow,
    pub scored: usize,
    pub missing_references: Vec<String>,
    pub missing_candidates: Vec<String>,
}

/// Corpus metrics over the ids present on both sides.
pub fn score(candidates: &BTreeMap<String, String>, references: &[FeatureRecord]) -> Result<ScoreReport> {
    let refs: BTreeMap<&str, &FeatureRecord> = references.iter().map(|r| (r.video_id.as_str(), r)).collect();
    let mut cands = BTreeMap::new();
    let mut ref_words = BTreeMap::new();
    let mut missing_references = Vec::new();
    for (id, caption) in candidates {
        match refs.get(id.as_str()) {
            Some(r) => {
                cands.insert(id.clone(), tokenize(caption));
                ref_words.insert(id.clone(), r.captions.iter().map(|c| tokenize(c)).collect::<Vec<_>>());
            }
            None => missing_references.push(id.clone()),
        }
    }
    let missing_candidates = refs
        .keys()
        .filter(|id| !candidates.contains_key(**id))
        .map(|id| id.to_string())
        .collect();
    if cands.is_empty() {
        return Err(PipelineError::Input("no video id appears in both candidates and references".into()));
    }
    Ok(ScoreReport {
        metrics: corpus_metrics(&cands, &ref_words)?,
        scored: cands.len(),
        missing_references,
        missing_candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthSpec};

    fn small() -> (RunConfig, Vec<FeatureRecord>) {
        let spec = SynthSpec {
            num_objects: 3,
            num_actions: 3,
            num_scenes: 2,
            num_videos: 20,
            g: 4,
            k: 12,
            j: 6,
            m: 5,
            ..SynthSpec::default()
        };
        let recs = gen_synthetic(&spec).unwrap();
        let mut cfg = RunConfig::from_json(r#"{"seed": 5, "dataset": "unused"}"#).unwrap();
        cfg.model = ModelDims {
            k: 12,
            j: 6,
            m: 5,
            d_e: 3,
            d_w: 4,
            d_h: 5,
            vocab_size: 100,
            max_len: 8,
        };
        cfg.seeding.epochs = 2;
        cfg.seeding.learning_rate = 1e-2;
        cfg.boosting.epochs = 1;
        (cfg, recs)
    }

    #[test]
    fn seeding_then_boosting_is_reproducible() {
        let (cfg, recs) = small();
        let p = Prepared::from_records(&cfg, recs).unwrap();
        let run = || {
            let s = run_seeding(&cfg, &p, &mut |_| {}).unwrap();
            let b = run_boosting(&cfg, &p, s.checkpoint.clone(), &mut |_| {}).unwrap();
            (s.checkpoint.to_bytes(), s.log(), b.checkpoint.to_bytes(), b.log())
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.1.starts_with(LOG_HEADER));
        assert_eq!(a.1.lines().count(), 3);
    }

    #[test]
    fn boosting_rejects_mismatched_entrance() {
        let (cfg, recs) = small();
        let p = Prepared::from_records(&cfg, recs).unwrap();
        let s = run_seeding(&cfg, &p, &mut |_| {}).unwrap();
        let mut other = cfg.clone();
        other.model.d_h = 7;
        let e = run_boosting(&other, &p, s.checkpoint, &mut |_| {}).unwrap_err();
        assert!(e.to_string().contains("d_h"), "{e}");
    }

    #[test]
    fn zero_epochs_checkpoint_is_init() {
        let (mut cfg, recs) = small();
        cfg.seeding.epochs = 0;
        let p = Prepared::from_records(&cfg, recs).unwrap();
        let s = run_seeding(&cfg, &p, &mut |_| {}).unwrap();
        assert_eq!(s.checkpoint.phase, Phase::Init);
        assert_eq!(s.log(), format!("{LOG_HEADER}\n"));
    }

    #[test]
    fn scoring_identity_and_disjoint() {
        let (_, recs) = small();
        let first: BTreeMap<String, String> = recs.iter().map(|r| (r.video_id.clone(), r.captions[0].clone())).collect();
        let rep = score(&first, &recs).unwrap();
        assert_eq!(rep.metrics.bleu4, 1.0);
        assert_eq!(rep.scored, recs.len());
        let junk: BTreeMap<String, String> = recs.iter().map(|r| (r.video_id.clone(), "zzz qqq xxx yyy".into())).collect();
        let rep = score(&junk, &recs).unwrap();
        assert_eq!(rep.metrics, MetricRow { bleu4: 0.0, meteor: 0.0, rouge_l: 0.0, cider: 0.0 });
        let mut partial = BTreeMap::new();
        partial.insert("nope".to_string(), "a".to_string());
        assert!(score(&partial, &recs).is_err());
        partial.insert(recs[0].video_id.clone(), recs[0].captions[0].clone());
        let rep = score(&partial, &recs).unwrap();
        assert_eq!(rep.missing_references, ["nope"]);
        assert_eq!(rep.missing_candidates.len(), recs.len() - 1);
    }

    #[test]
    fn candidate_file_format() {
        let c = parse_candidates("v1\ta dog\n\nv2\tthe cat\tsits\n".as_bytes()).unwrap();
        assert_eq!(c["v2"], "the cat\tsits");
        assert!(parse_candidates("v1 a dog\n".as_bytes()).is_err());
        assert!(parse_candidates("v1\ta\nv1\tb\n".as_bytes()).is_err());
    }
}
