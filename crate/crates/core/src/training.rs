//! Seeding with metric-weighted cross-entropy and boosting with
//! discrepant-reward policy gradients.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetSplit, FeatureRecord};
use crate::grad::{GradError, Gradients, ParamStore, Tape, Tensor, Var};
use crate::metrics::{corpus_metrics, gt_weights, CiderRefs, IdfTable, MetricKind, MetricRow, MetricsError, CIDER_SIGMA};
use crate::model::{GlobalLocalFeatures, Model, ModelDims, ModelError, SsSchedule};
use crate::text::{tokenize, Sentence, Vocabulary};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("video {0} has no captions")]
    NoCaptions(String),
    #[error("unknown video id {0}")]
    UnknownVideo(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

impl From<TrainError> for GradError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Grad(g) | TrainError::Model(ModelError::Grad(g)) => g,
            other => GradError::Invalid {
                op: "training",
                msg: other.to_string(),
            },
        }
    }
}

mod metric_or_none {
    use super::MetricKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<MetricKind>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(k) => serde::Serialize::serialize(k, s),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<MetricKind>, D::Error> {
        let s = String::deserialize(d)?;
        if s == "none" {
            return Ok(None);
        }
        s.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains with plain cross-entropy.
    #[serde(with = "metric_or_none")]
    pub weight_metric: Option<MetricKind>,
    pub ss_schedule: SsSchedule,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for SeedingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 30,
            weight_metric: Some(MetricKind::Cider),
            ss_schedule: SsSchedule::default(),
            batch_size: 1,
            weight_decay: 0.0,
        }
    }
}

impl SeedingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("seeding learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("seeding batch_size must be at least 1".into()));
        }
        let s = &self.ss_schedule;
        if !(0.0..=1.0).contains(&s.p0) || !(0.0..=1.0).contains(&s.p_end) || s.end_epoch < s.peak_epoch {
            return Err(TrainError::Config(format!("bad scheduled-sampling schedule {s:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    None,
    Scst,
    B1,
    B2,
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::None => "none",
            BaselineKind::Scst => "scst",
            BaselineKind::B1 => "b1",
            BaselineKind::B2 => "b2",
        })
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "scst" => Ok(Self::Scst),
            "b1" => Ok(Self::B1),
            "b2" => Ok(Self::B2),
            _ => Err(format!("unknown baseline {s:?} (expected none, scst, b1 or b2)")),
        }
    }
}

/// How b1 combines the G leave-one-out ground-truth rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoostingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub baseline: BaselineKind,
    pub num_samples: usize,
    pub top_q: usize,
    pub reward_metric: MetricKind,
    pub b1_aggregate: Aggregate,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for BoostingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 70,
            baseline: BaselineKind::B2,
            num_samples: 5,
            top_q: 3,
            reward_metric: MetricKind::Cider,
            b1_aggregate: Aggregate::Mean,
            batch_size: 1,
            weight_decay: 0.0,
        }
    }
}

impl BoostingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("boosting learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("boosting batch_size must be at least 1".into()));
        }
        if self.baseline == BaselineKind::B2 && (self.top_q == 0 || self.top_q > self.num_samples) {
            return Err(TrainError::Config(format!(
                "b2 needs 1 <= top_q <= num_samples, got top_q={} num_samples={}",
                self.top_q, self.num_samples
            )));
        }
        Ok(())
    }
}

/// Maps words to metric ids: vocabulary ids first, then fresh ids for
/// out-of-vocabulary reference words so that UNK in a candidate never matches.
#[derive(Debug, Clone)]
pub struct MetricLexicon {
    vocab: Vocabulary,
    extra: BTreeMap<String, u32>,
}

impl MetricLexicon {
    pub fn new(vocab: Vocabulary) -> Self {
        Self {
            vocab,
            extra: BTreeMap::new(),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn id(&mut self, word: &str) -> u32 {
        if self.vocab.contains(word) {
            return self.vocab.token(word).0;
        }
        let next = (self.vocab.len() + self.extra.len()) as u32;
        *self.extra.entry(word.to_string()).or_insert(next)
    }

    pub fn ids(&mut self, caption: &str) -> Vec<u32> {
        tokenize(caption).iter().map(|w| self.id(w)).collect()
    }
}

pub fn sentence_ids(s: &Sentence) -> Vec<u32> {
    s.tokens().iter().map(|t| t.0).collect()
}

/// A video prepared for training: encoded captions plus metric-id references.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVideo {
    pub video_id: String,
    pub features: GlobalLocalFeatures,
    pub captions: Vec<Sentence>,
    pub refs: Vec<Vec<u32>>,
}

pub fn encode_videos<'a>(
    records: impl IntoIterator<Item = &'a FeatureRecord>,
    lexicon: &mut MetricLexicon,
    max_len: usize,
) -> Vec<EncodedVideo> {
    records
        .into_iter()
        .map(|r| EncodedVideo {
            video_id: r.video_id.clone(),
            features: r.features.clone(),
            captions: r.captions.iter().map(|c| lexicon.vocab().encode_caption(c, max_len)).collect(),
            refs: r.captions.iter().map(|c| lexicon.ids(c)).collect(),
        })
        .collect()
}

/// Train and validation videos sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub vocab: Vocabulary,
    pub max_len: usize,
    pub train: Vec<EncodedVideo>,
    pub val: Vec<EncodedVideo>,
    /// Document frequencies over training references, used for CIDEr weights and rewards.
    pub train_idf: IdfTable<u32>,
}

impl TrainingSet {
    /// Builds the vocabulary (at most `vocab_size` entries) from training captions.
    pub fn new(records: &[FeatureRecord], split: &DatasetSplit, vocab_size: usize, max_len: usize) -> Result<Self> {
        let by_id: BTreeMap<&str, &FeatureRecord> = records.iter().map(|r| (r.video_id.as_str(), r)).collect();
        let pick = |ids: &[String]| -> Result<Vec<&FeatureRecord>> {
            ids.iter()
                .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| TrainError::UnknownVideo(id.clone())))
                .collect()
        };
        let train = pick(&split.train)?;
        let val = pick(&split.val)?;
        let vocab = Vocabulary::build(train.iter().flat_map(|r| r.captions.iter()), vocab_size);
        Ok(Self::with_vocab(vocab, train, val, max_len))
    }

    pub fn with_vocab<'a>(
        vocab: Vocabulary,
        train: impl IntoIterator<Item = &'a FeatureRecord>,
        val: impl IntoIterator<Item = &'a FeatureRecord>,
        max_len: usize,
    ) -> Self {
        let mut lex = MetricLexicon::new(vocab.clone());
        let train = encode_videos(train, &mut lex, max_len);
        let val = encode_videos(val, &mut lex, max_len);
        let train_idf = IdfTable::build(train.iter().map(|v| v.refs.as_slice()));
        Self {
            vocab,
            max_len,
            train,
            val,
            train_idf,
        }
    }
}

pub(crate) fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(16)
}

/// Order-preserving map over contiguous chunks on scoped threads.
pub(crate) fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.max(1).min(items.len());
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<U>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// `-(1/G) * sum_j m_j log p(S_j | F)`. `xi(row, step)` chooses teacher input.
pub fn dxe_loss(
    model: &Model,
    tape: &mut Tape,
    video: &EncodedVideo,
    weights: &[f64],
    xi: &mut dyn FnMut(usize, usize) -> bool,
) -> Result<Var> {
    let g = video.captions.len();
    if g == 0 {
        return Err(TrainError::NoCaptions(video.video_id.clone()));
    }
    if weights.len() != g {
        return Err(TrainError::Config(format!("{} weights for {g} captions", weights.len())));
    }
    let fused = model.fuse(tape, &video.features)?;
    let lp = model.weighted_logprob(tape, fused, &video.captions, weights, xi)?;
    Ok(tape.scale(lp, -1.0 / g as f64)?)
}

/// Sentence-level score of a decoded sentence against metric-id references.
pub fn reward(sentence: &Sentence, refs: &[Vec<u32>], idf: &IdfTable<u32>, metric: MetricKind) -> f64 {
    crate::metrics::sentence_score(metric, &sentence_ids(sentence), refs, Some(idf)).expect("idf supplied")
}

/// Per-video reward machinery: cached CIDEr reference vectors and b1 values.
#[derive(Debug, Clone)]
pub struct RewardContext<'a> {
    metric: MetricKind,
    idf: &'a IdfTable<u32>,
    cider: Vec<Option<CiderRefs<u32>>>,
    b1: Vec<f64>,
}

impl<'a> RewardContext<'a> {
    pub fn new(videos: &[EncodedVideo], metric: MetricKind, idf: &'a IdfTable<u32>, agg: Aggregate) -> Result<Self> {
        let cider = videos
            .iter()
            .map(|v| (metric == MetricKind::Cider).then(|| CiderRefs::new(&v.refs, idf, CIDER_SIGMA)))
            .collect();
        let b1 = videos
            .iter()
            .map(|v| {
                let w = gt_weights(&v.refs, metric, Some(idf))?;
                Ok(match agg {
                    Aggregate::Mean => w.iter().sum::<f64>() / w.len().max(1) as f64,
                    Aggregate::Max => w.iter().copied().fold(0.0, f64::max),
                })
            })
            .collect::<std::result::Result<_, MetricsError>>()?;
        Ok(Self { metric, idf, cider, b1 })
    }

    pub fn reward(&self, index: usize, video: &EncodedVideo, s: &Sentence) -> f64 {
        match &self.cider[index] {
            Some(c) => c.score(&sentence_ids(s), self.idf),
            None => reward(s, &video.refs, self.idf, self.metric),
        }
    }

    pub fn b1(&self, index: usize) -> f64 {
        self.b1[index]
    }
}

/// Baseline `b` for one video; a constant with respect to the parameters.
pub fn baseline_value<R: Rng + ?Sized>(
    model: &Model,
    fused: &Tensor,
    index: usize,
    video: &EncodedVideo,
    cfg: &BoostingConfig,
    ctx: &RewardContext,
    max_len: usize,
    rng: &mut R,
) -> Result<f64> {
    Ok(match cfg.baseline {
        BaselineKind::None => 0.0,
        BaselineKind::Scst => ctx.reward(index, video, &model.decode_greedy(fused, max_len)?.sentence),
        BaselineKind::B1 => ctx.b1(index),
        BaselineKind::B2 => {
            if cfg.top_q == 0 || cfg.num_samples < cfg.top_q {
                return Err(TrainError::Config(format!(
                    "b2 needs 1 <= top_q <= num_samples, got top_q={} num_samples={}",
                    cfg.top_q, cfg.num_samples
                )));
            }
            let mut rs = Vec::with_capacity(cfg.num_samples);
            for _ in 0..cfg.num_samples {
                let s = model.decode_sample(fused, rng, max_len, 1.0)?;
                rs.push(ctx.reward(index, video, &s.sentence));
            }
            rs.sort_by(|a, b| b.total_cmp(a));
            rs[..cfg.top_q].iter().sum::<f64>() / cfg.top_q as f64
        }
    })
}

#[derive(Debug, Clone)]
pub struct DrStep {
    pub grads: Gradients,
    pub sentence: Sentence,
    pub reward: f64,
    pub baseline: f64,
    pub advantage: f64,
    /// Value of the surrogate `-(r - b) log p(S)`.
    pub surrogate: f64,
}

/// One Monte-Carlo policy-gradient sample. `None` when the sampled sentence is empty.
pub fn dr_step<R: Rng + ?Sized>(
    model: &Model,
    index: usize,
    video: &EncodedVideo,
    cfg: &BoostingConfig,
    ctx: &RewardContext,
    max_len: usize,
    rng: &mut R,
) -> Result<Option<DrStep>> {
    let fused_value = model.fuse_value(&video.features)?;
    let sample = model.decode_sample(&fused_value, rng, max_len, 1.0)?;
    if sample.sentence.is_empty() {
        return Ok(None);
    }
    let r = ctx.reward(index, video, &sample.sentence);
    let b = baseline_value(model, &fused_value, index, video, cfg, ctx, max_len, rng)?;
    let advantage = r - b;
    let mut tape = model.tape();
    let fused = model.fuse(&mut tape, &video.features)?;
    let lp = model.policy_logprob(&mut tape, fused, &sample.sentence, max_len)?;
    let loss = tape.scale(lp, -advantage)?;
    let surrogate = tape.value(loss)?.data()[0];
    let grads = tape.backward(loss)?;
    Ok(Some(DrStep {
        grads,
        sentence: sample.sentence,
        reward: r,
        baseline: b,
        advantage,
        surrogate,
    }))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64, clipped: bool },
    /// Non-finite gradient; parameters untouched.
    Aborted,
}

/// Adam on the accumulated `Parameter::grad`s, after global-norm clipping,
/// with decoupled weight decay on `*.weight` tensors.
/// Gradients are reset afterwards in both outcomes.
pub fn optimizer_step(params: &mut ParamStore, lr: f64, weight_decay: f64, state: &mut AdamState) -> StepOutcome {
    let finite = params.iter().all(|p| p.grad.is_finite());
    if !finite {
        params.zero_grad();
        return StepOutcome::Aborted;
    }
    let norm = params.iter().map(|p| p.grad.sum_sq()).sum::<f64>().sqrt();
    let clipped = norm > CLIP_NORM;
    let scale = if clipped { CLIP_NORM / norm } else { 1.0 };
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.grad.data();
        let decay = if p.name.ends_with(".weight") { 1.0 - lr * weight_decay } else { 1.0 };
        for (k, theta) in p.value.data_mut().iter_mut().enumerate() {
            let gk = g[k] * scale;
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *theta = *theta * decay - lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    params.zero_grad();
    StepOutcome::Applied { grad_norm: norm, clipped }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Seeding,
    Boosting,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Seeding => "seeding",
            Phase::Boosting => "boosting",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub metrics: MetricRow,
    pub xi_prob: f64,
    pub wall_secs: f64,
    pub mean_advantage: Option<f64>,
    pub grad_variance: Option<f64>,
    pub skipped: usize,
    pub incidents: usize,
}

impl EpochRecord {
    /// `epoch, phase, loss, B@4, M, R, C, xi_prob`, tab separated.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{:.4}\t{}\t{:.3}",
            self.epoch,
            self.phase,
            self.loss,
            self.metrics.to_tsv(),
            self.xi_prob
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch beat the starting model.
    pub best_epoch: usize,
    /// Raw validation CIDEr of the returned model.
    pub best_cider: f64,
}

impl TrainRecord {
    pub fn log_lines(&self) -> String {
        self.epochs.iter().map(|e| e.log_line() + "\n").collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub record: TrainRecord,
}

/// Greedy captions for every video, keyed by id.
pub fn decode_videos(model: &Model, videos: &[EncodedVideo], max_len: usize) -> Result<BTreeMap<String, Sentence>> {
    let out = par_map(videos, default_threads(), |v| -> Result<(String, Sentence)> {
        let f = model.fuse_value(&v.features)?;
        Ok((v.video_id.clone(), model.decode_greedy(&f, max_len)?.sentence))
    });
    out.into_iter().collect()
}

/// Corpus metrics of greedy decoding against each video's references.
pub fn evaluate(model: &Model, videos: &[EncodedVideo], max_len: usize) -> Result<MetricRow> {
    let decoded = decode_videos(model, videos, max_len)?;
    let cands: BTreeMap<String, Vec<u32>> = decoded.iter().map(|(k, s)| (k.clone(), sentence_ids(s))).collect();
    let refs: BTreeMap<String, Vec<Vec<u32>>> = videos.iter().map(|v| (v.video_id.clone(), v.refs.clone())).collect();
    Ok(corpus_metrics(&cands, &refs)?)
}

fn seeds_for<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.gen()).collect()
}

/// Leave-one-out ground-truth weights for every training video; ones for XE.
pub fn caption_weights(data: &TrainingSet, metric: Option<MetricKind>) -> Result<Vec<Vec<f64>>> {
    data.train
        .iter()
        .map(|v| match metric {
            Some(k) => Ok(gt_weights(&v.refs, k, Some(&data.train_idf))?),
            None => Ok(vec![1.0; v.captions.len()]),
        })
        .collect()
}

pub fn train_seeding<R: Rng + ?Sized>(
    data: &TrainingSet,
    dims: ModelDims,
    cfg: &SeedingConfig,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dims.vocab_size != data.vocab.len() {
        return Err(TrainError::Config(format!(
            "model vocab_size {} differs from vocabulary size {}",
            dims.vocab_size,
            data.vocab.len()
        )));
    }
    let mut model = Model::new(dims, rng);
    model.set_feature_center(GlobalLocalFeatures::mean(&dims, data.train.iter().map(|v| &v.features))?)?;
    continue_seeding(model, data, cfg, rng, on_epoch)
}

/// Seeding from an existing model (fresh optimizer state).
pub fn continue_seeding<R: Rng + ?Sized>(
    mut model: Model,
    data: &TrainingSet,
    cfg: &SeedingConfig,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let weights = caption_weights(data, cfg.weight_metric)?;
    let max_len = data.max_len;
    let threads = default_threads();
    let mut adam = AdamState::new(model.params());
    let mut record = TrainRecord::default();
    let mut best: Option<(Model, AdamState, f64)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for e in 0..cfg.epochs {
        let start = Instant::now();
        let p = cfg.ss_schedule.probability(e);
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut incidents = 0;
        for batch in order.chunks(cfg.batch_size) {
            let seeds = seeds_for(rng, batch.len());
            let jobs: Vec<(usize, u64)> = batch.iter().copied().zip(seeds).collect();
            let m = &model;
            let results = par_map(&jobs, threads, |&(vi, seed)| -> Result<(f64, Gradients)> {
                let mut vrng = ChaCha8Rng::seed_from_u64(seed);
                let mut tape = m.tape();
                let loss = dxe_loss(m, &mut tape, &data.train[vi], &weights[vi], &mut |_, _| vrng.gen::<f64>() < p)?;
                let value = tape.value(loss)?.data()[0];
                Ok((value, tape.backward(loss)?))
            });
            let mut total: Option<Gradients> = None;
            for r in results {
                let (l, g) = r?;
                loss_sum += l;
                match total.as_mut() {
                    Some(t) => t.add(&g),
                    None => total = Some(g),
                }
            }
            if let Some(mut g) = total {
                g.scale(1.0 / batch.len() as f64);
                model.params_mut().accumulate(&g);
                if optimizer_step(model.params_mut(), cfg.learning_rate, cfg.weight_decay, &mut adam) == StepOutcome::Aborted {
                    incidents += 1;
                }
            }
        }
        let metrics = evaluate(&model, &data.val, max_len)?;
        let rec = EpochRecord {
            epoch: e + 1,
            phase: Phase::Seeding,
            loss: loss_sum / data.train.len().max(1) as f64,
            metrics,
            xi_prob: p,
            wall_secs: start.elapsed().as_secs_f64(),
            mean_advantage: None,
            grad_variance: None,
            skipped: 0,
            incidents,
        };
        on_epoch(&rec);
        if best.as_ref().map_or(true, |b| metrics.cider > b.2) {
            best = Some((model.clone(), adam.clone(), metrics.cider));
            record.best_epoch = e + 1;
            record.best_cider = metrics.cider;
        }
        record.epochs.push(rec);
    }
    let (model, adam) = match best {
        Some((m, a, _)) => (m, a),
        None => {
            record.best_cider = evaluate(&model, &data.val, max_len)?.cider;
            (model, adam)
        }
    };
    Ok(TrainOutcome { model, adam, record })
}

/// Running `E||g||^2 - ||E g||^2` over flattened gradient samples.
#[derive(Debug, Clone, Default)]
pub struct VarianceAccumulator {
    sum: Vec<f64>,
    sum_sq: f64,
    n: usize,
}

impl VarianceAccumulator {
    pub fn push(&mut self, g: &[f64]) {
        if self.sum.is_empty() {
            self.sum = vec![0.0; g.len()];
        }
        for (s, x) in self.sum.iter_mut().zip(g) {
            *s += x;
        }
        self.sum_sq += g.iter().map(|x| x * x).sum::<f64>();
        self.n += 1;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Unbiased trace of the sample covariance; `None` below two samples.
    pub fn trace(&self) -> Option<f64> {
        if self.n < 2 {
            return None;
        }
        let n = self.n as f64;
        let mean_sq: f64 = self.sum.iter().map(|s| (s / n) * (s / n)).sum();
        Some((self.sum_sq / n - mean_sq) * n / (n - 1.0))
    }
}

pub fn train_boosting<R: Rng + ?Sized>(
    entrance: Model,
    data: &TrainingSet,
    cfg: &BoostingConfig,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let max_len = data.max_len;
    let threads = default_threads();
    let ctx = RewardContext::new(&data.train, cfg.reward_metric, &data.train_idf, cfg.b1_aggregate)?;
    let mut model = entrance;
    let mut adam = AdamState::new(model.params());
    let mut record = TrainRecord {
        best_cider: if cfg.epochs > 0 { evaluate(&model, &data.val, max_len)?.cider } else { 0.0 },
        ..TrainRecord::default()
    };
    let mut best: (Model, AdamState) = (model.clone(), adam.clone());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for e in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(rng);
        let (mut loss_sum, mut adv_sum, mut used, mut skipped, mut incidents) = (0.0, 0.0, 0usize, 0usize, 0usize);
        let mut var = VarianceAccumulator::default();
        for batch in order.chunks(cfg.batch_size) {
            let seeds = seeds_for(rng, batch.len());
            let jobs: Vec<(usize, u64)> = batch.iter().copied().zip(seeds).collect();
            let m = &model;
            let ctx = &ctx;
            let results = par_map(&jobs, threads, |&(vi, seed)| {
                let mut vrng = ChaCha8Rng::seed_from_u64(seed);
                dr_step(m, vi, &data.train[vi], cfg, ctx, max_len, &mut vrng)
            });
            let mut total: Option<Gradients> = None;
            let mut n = 0usize;
            for r in results {
                match r? {
                    None => skipped += 1,
                    Some(step) => {
                        loss_sum += step.surrogate;
                        adv_sum += step.advantage;
                        used += 1;
                        n += 1;
                        var.push(&step.grads.flatten(model.params()));
                        match total.as_mut() {
                            Some(t) => t.add(&step.grads),
                            None => total = Some(step.grads),
                        }
                    }
                }
            }
            if let Some(mut g) = total {
                g.scale(1.0 / n as f64);
                model.params_mut().accumulate(&g);
                if optimizer_step(model.params_mut(), cfg.learning_rate, cfg.weight_decay, &mut adam) == StepOutcome::Aborted {
                    incidents += 1;
                }
            }
        }
        let metrics = evaluate(&model, &data.val, max_len)?;
        let rec = EpochRecord {
            epoch: e + 1,
            phase: Phase::Boosting,
            loss: loss_sum / used.max(1) as f64,
            metrics,
            xi_prob: 0.0,
            wall_secs: start.elapsed().as_secs_f64(),
            mean_advantage: Some(adv_sum / used.max(1) as f64),
            grad_variance: var.trace(),
            skipped,
            incidents,
        };
        on_epoch(&rec);
        if metrics.cider > record.best_cider {
            best = (model.clone(), adam.clone());
            record.best_epoch = e + 1;
            record.best_cider = metrics.cider;
        }
        record.epochs.push(rec);
    }
    Ok(TrainOutcome {
        model: best.0,
        adam: best.1,
        record,
    })
}

/// Mean over videos of the trace of the covariance of single-sample policy
/// gradient estimates. Empty samples count as zero gradients.
pub fn estimator_variance<R: Rng + ?Sized>(
    model: &Model,
    videos: &[EncodedVideo],
    ctx: &RewardContext,
    cfg: &BoostingConfig,
    max_len: usize,
    samples_per_video: usize,
    rng: &mut R,
) -> Result<f64> {
    let seeds = seeds_for(rng, videos.len());
    let jobs: Vec<(usize, u64)> = (0..videos.len()).zip(seeds).collect();
    let per_video = par_map(&jobs, default_threads(), |&(vi, seed)| -> Result<f64> {
        let mut vrng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = VarianceAccumulator::default();
        let zeros = vec![0.0; model.params().num_values()];
        for _ in 0..samples_per_video {
            match dr_step(model, vi, &videos[vi], cfg, ctx, max_len, &mut vrng)? {
                Some(s) => acc.push(&s.grads.flatten(model.params())),
                None => acc.push(&zeros),
            }
        }
        Ok(acc.trace().unwrap_or(0.0))
    });
    let mut total = 0.0;
    for v in per_video {
        total += v?;
    }
    Ok(total / videos.len().max(1) as f64)
}
