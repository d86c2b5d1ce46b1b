//! Caption metrics: BLEU-4, METEOR (exact match only), ROUGE-L and CIDEr-D.
//!
//! Everything is generic over the word type so the same code scores raw
//! strings and interned ids. N-gram tables are `BTreeMap`s, which keeps
//! every floating-point reduction in a fixed order.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ORDER: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
const METEOR_ALPHA: f64 = 0.9;
const METEOR_GAMMA: f64 = 0.5;
const METEOR_THETA: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no references for video {0}")]
    MissingReferences(String),
    #[error("CIDEr needs an idf table")]
    MissingIdf,
    #[error("nothing to score")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "B4")]
    Bleu4,
    #[serde(rename = "M")]
    Meteor,
    #[serde(rename = "R")]
    RougeL,
    #[serde(rename = "C")]
    Cider,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [Self::Bleu4, Self::Meteor, Self::RougeL, Self::Cider];

    /// Largest value the metric can take.
    pub fn upper_bound(self) -> f64 {
        match self {
            Self::Cider => 10.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bleu4 => "B@4",
            Self::Meteor => "M",
            Self::RougeL => "R",
            Self::Cider => "C",
        })
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "B4" | "B@4" | "bleu4" => Ok(Self::Bleu4),
            "M" | "meteor" => Ok(Self::Meteor),
            "R" | "rouge_l" => Ok(Self::RougeL),
            "C" | "cider" => Ok(Self::Cider),
            _ => Err(format!("unknown metric {s:?} (expected B4, M, R or C)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub kind: MetricKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NGramCounts<T: Ord>(pub BTreeMap<Vec<T>, usize>);

impl<T: Ord> NGramCounts<T> {
    pub fn get(&self, g: &[T]) -> usize {
        self.0.get(g).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn ngram_counts<T: Ord + Clone>(s: &[T], n: usize) -> NGramCounts<T> {
    let mut m = BTreeMap::new();
    if n >= 1 && s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    NGramCounts(m)
}

/// Sentence BLEU-4 with add-one smoothing for orders 2..4.
pub fn bleu4<T: Ord + Clone, R: AsRef<[T]>>(candidate: &[T], references: &[R]) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let c = candidate.len();
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: BTreeMap<&[T], usize> = BTreeMap::new();
        let ref_counts: Vec<_> = references.iter().map(|r| ngram_counts(r.as_ref(), n)).collect();
        for rc in &ref_counts {
            for (g, &k) in &rc.0 {
                let e = max_ref.entry(g.as_slice()).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let matched: usize = cand
            .0
            .iter()
            .map(|(g, &k)| k.min(max_ref.get(g.as_slice()).copied().unwrap_or(0)))
            .sum();
        let total = cand.total();
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let r = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    let bp = (1.0 - r as f64 / c as f64).exp().min(1.0);
    bp * (log_sum / MAX_ORDER as f64).exp()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l<T: PartialEq, R: AsRef<[T]>>(candidate: &[T], references: &[R], beta: f64) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let b2 = beta * beta;
    references
        .iter()
        .map(|r| {
            let r = r.as_ref();
            if r.is_empty() {
                return 0.0;
            }
            let l = lcs_len(candidate, r) as f64;
            let p = l / candidate.len() as f64;
            let rec = l / r.len() as f64;
            if p == 0.0 && rec == 0.0 {
                0.0
            } else {
                (1.0 + b2) * p * rec / (rec + b2 * p)
            }
        })
        .fold(0.0, f64::max)
}

/// Aligns exact matches by repeatedly taking the longest common run among
/// unaligned positions. Returns `(candidate index, reference index)` pairs.
fn align<T: PartialEq>(c: &[T], r: &[T]) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; c.len()];
    let mut used_r = vec![false; r.len()];
    let mut pairs = Vec::new();
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for i in 0..c.len() {
            if used_c[i] {
                continue;
            }
            for j in 0..r.len() {
                let mut k = 0;
                while i + k < c.len()
                    && j + k < r.len()
                    && !used_c[i + k]
                    && !used_r[j + k]
                    && c[i + k] == r[j + k]
                {
                    k += 1;
                }
                if k > 0 && best.map_or(true, |(bk, _, _)| k > bk) {
                    best = Some((k, i, j));
                }
            }
        }
        let Some((k, i, j)) = best else { break };
        for d in 0..k {
            used_c[i + d] = true;
            used_r[j + d] = true;
            pairs.push((i + d, j + d));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

/// METEOR without stemming or synonyms.
pub fn meteor_lite<T: PartialEq, R: AsRef<[T]>>(candidate: &[T], references: &[R]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    references
        .iter()
        .map(|r| {
            let r = r.as_ref();
            let pairs = align(candidate, r);
            let m = pairs.len();
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / candidate.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let f_mean = p * rec / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * rec);
            let frag = count_chunks(&pairs) as f64 / m as f64;
            f_mean * (1.0 - METEOR_GAMMA * frag.powf(METEOR_THETA))
        })
        .fold(0.0, f64::max)
}

/// Document frequencies of every n-gram (orders 1..4) over reference sets.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable<T: Ord> {
    df: BTreeMap<Vec<T>, usize>,
    num_docs: usize,
}

impl<T: Ord + Clone> IdfTable<T> {
    /// One document per video: the union of that video's references.
    pub fn build<'a, I, R>(videos: I) -> Self
    where
        I: IntoIterator<Item = &'a [R]>,
        R: AsRef<[T]> + 'a,
    {
        let mut df = BTreeMap::new();
        let mut num_docs = 0;
        for refs in videos {
            num_docs += 1;
            let mut seen = std::collections::BTreeSet::new();
            for r in refs {
                for n in 1..=MAX_ORDER {
                    for w in r.as_ref().windows(n) {
                        seen.insert(w.to_vec());
                    }
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Self { df, num_docs: num_docs.max(1) }
    }

    pub fn df(&self, g: &[T]) -> usize {
        self.df.get(g).copied().unwrap_or(0)
    }

    pub fn num_docs(&self) -> usize {
        self.num_docs
    }

    pub fn idf(&self, g: &[T]) -> f64 {
        (self.num_docs as f64 / self.df(g).max(1) as f64).ln()
    }
}

pub fn build_idf<'a, T, I, R>(videos: I) -> IdfTable<T>
where
    T: Ord + Clone,
    I: IntoIterator<Item = &'a [R]>,
    R: AsRef<[T]> + 'a,
{
    IdfTable::build(videos)
}

#[derive(Debug, Clone)]
struct TfIdf<T: Ord> {
    orders: Vec<BTreeMap<Vec<T>, f64>>,
    norms: [f64; MAX_ORDER],
    len: usize,
}

impl<T: Ord + Clone> TfIdf<T> {
    fn new(s: &[T], idf: &IdfTable<T>) -> Self {
        let mut orders = Vec::with_capacity(MAX_ORDER);
        let mut norms = [0.0; MAX_ORDER];
        for n in 1..=MAX_ORDER {
            let v: BTreeMap<Vec<T>, f64> = ngram_counts(s, n)
                .0
                .into_iter()
                .map(|(g, tf)| {
                    let w = tf as f64 * idf.idf(&g);
                    (g, w)
                })
                .collect();
            norms[n - 1] = v.values().map(|x| x * x).sum::<f64>().sqrt();
            orders.push(v);
        }
        Self { orders, norms, len: s.len() }
    }

    fn sim(&self, r: &TfIdf<T>, sigma: f64) -> [f64; MAX_ORDER] {
        let delta = self.len as f64 - r.len as f64;
        let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
        let mut out = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if self.norms[n] == 0.0 || r.norms[n] == 0.0 {
                continue;
            }
            let dot: f64 = self.orders[n]
                .iter()
                .filter_map(|(g, &c)| r.orders[n].get(g).map(|&rv| c.min(rv) * rv))
                .sum();
            out[n] = dot / (self.norms[n] * r.norms[n]) * penalty;
        }
        out
    }
}

/// Reference side of CIDEr-D, precomputed once per video.
#[derive(Debug, Clone)]
pub struct CiderRefs<T: Ord> {
    refs: Vec<TfIdf<T>>,
    sigma: f64,
}

impl<T: Ord + Clone> CiderRefs<T> {
    pub fn new<R: AsRef<[T]>>(references: &[R], idf: &IdfTable<T>, sigma: f64) -> Self {
        Self {
            refs: references.iter().map(|r| TfIdf::new(r.as_ref(), idf)).collect(),
            sigma,
        }
    }

    pub fn score(&self, candidate: &[T], idf: &IdfTable<T>) -> f64 {
        if candidate.is_empty() || self.refs.is_empty() {
            return 0.0;
        }
        let cv = TfIdf::new(candidate, idf);
        let mut per_order = vec![Vec::with_capacity(self.refs.len()); MAX_ORDER];
        for r in &self.refs {
            for (n, s) in cv.sim(r, self.sigma).into_iter().enumerate() {
                per_order[n].push(s);
            }
        }
        let g = self.refs.len() as f64;
        let total: f64 = per_order
            .iter_mut()
            .map(|sims| {
                // sorted so the sum does not depend on reference order
                sims.sort_by(f64::total_cmp);
                sims.iter().sum::<f64>() / g
            })
            .sum();
        10.0 * total / MAX_ORDER as f64
    }
}

pub fn cider<T: Ord + Clone, R: AsRef<[T]>>(
    candidate: &[T],
    references: &[R],
    idf: &IdfTable<T>,
    sigma: f64,
) -> f64 {
    CiderRefs::new(references, idf, sigma).score(candidate, idf)
}

pub fn sentence_score<T: Ord + Clone, R: AsRef<[T]>>(
    kind: MetricKind,
    candidate: &[T],
    references: &[R],
    idf: Option<&IdfTable<T>>,
) -> Result<f64, MetricsError> {
    Ok(match kind {
        MetricKind::Bleu4 => bleu4(candidate, references),
        MetricKind::Meteor => meteor_lite(candidate, references),
        MetricKind::RougeL => rouge_l(candidate, references, ROUGE_BETA),
        MetricKind::Cider => cider(candidate, references, idf.ok_or(MetricsError::MissingIdf)?, CIDER_SIGMA),
    })
}

/// Leave-one-out quality of each reference: its score against the other G-1.
pub fn gt_weights<T: Ord + Clone, R: AsRef<[T]>>(
    references: &[R],
    kind: MetricKind,
    idf: Option<&IdfTable<T>>,
) -> Result<Vec<f64>, MetricsError> {
    if references.len() < 2 {
        return Ok(vec![1.0; references.len()]);
    }
    let prepared = match (kind, idf) {
        (MetricKind::Cider, Some(idf)) => Some(
            references
                .iter()
                .map(|r| TfIdf::new(r.as_ref(), idf))
                .collect::<Vec<_>>(),
        ),
        (MetricKind::Cider, None) => return Err(MetricsError::MissingIdf),
        _ => None,
    };
    (0..references.len())
        .map(|j| {
            let cand = references[j].as_ref();
            if let Some(p) = &prepared {
                let others = CiderRefs {
                    refs: p.iter().enumerate().filter(|&(i, _)| i != j).map(|(_, t)| t.clone()).collect(),
                    sigma: CIDER_SIGMA,
                };
                Ok(others.score(cand, idf.expect("checked above")))
            } else {
                let others: Vec<&[T]> = references
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != j)
                    .map(|(_, r)| r.as_ref())
                    .collect();
                sentence_score(kind, cand, &others, idf)
            }
        })
        .collect()
}

/// All four corpus metrics for one system output.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRow {
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    /// Raw CIDEr on the 0..10 scale.
    pub cider: f64,
}

impl MetricRow {
    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Bleu4 => self.bleu4,
            MetricKind::Meteor => self.meteor,
            MetricKind::RougeL => self.rouge_l,
            MetricKind::Cider => self.cider,
        }
    }

    /// CIDEr divided by 10 so every column lives in [0, 1].
    pub fn cider_normalized(&self) -> f64 {
        self.cider / 10.0
    }

    pub const TSV_HEADER: &'static str = "B@4\tM\tR\tC";

    /// Values times 100 with one decimal, CIDEr normalized first.
    pub fn to_tsv(&self) -> String {
        format!(
            "{:.1}\t{:.1}\t{:.1}\t{:.1}",
            self.bleu4 * 100.0,
            self.meteor * 100.0,
            self.rouge_l * 100.0,
            self.cider_normalized() * 100.0
        )
    }
}

fn lookup<'a, T: Ord, R>(
    candidates: &'a BTreeMap<String, Vec<T>>,
    references: &'a BTreeMap<String, Vec<R>>,
) -> Result<Vec<(&'a [T], &'a [R])>, MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::Empty);
    }
    candidates
        .iter()
        .map(|(id, c)| match references.get(id) {
            Some(r) if !r.is_empty() => Ok((c.as_slice(), r.as_slice())),
            _ => Err(MetricsError::MissingReferences(id.clone())),
        })
        .collect()
}

/// Mean sentence score over videos. CIDEr document frequencies come from the
/// references of the scored videos.
pub fn corpus_score<T: Ord + Clone, R: AsRef<[T]>>(
    candidates: &BTreeMap<String, Vec<T>>,
    references: &BTreeMap<String, Vec<R>>,
    kind: MetricKind,
) -> Result<Score, MetricsError> {
    let pairs = lookup(candidates, references)?;
    let idf = (kind == MetricKind::Cider).then(|| IdfTable::build(pairs.iter().map(|p| p.1)));
    let mut total = 0.0;
    for (c, r) in &pairs {
        total += sentence_score(kind, c, r, idf.as_ref())?;
    }
    Ok(Score {
        kind,
        value: total / pairs.len() as f64,
    })
}

pub fn corpus_metrics<T: Ord + Clone, R: AsRef<[T]>>(
    candidates: &BTreeMap<String, Vec<T>>,
    references: &BTreeMap<String, Vec<R>>,
) -> Result<MetricRow, MetricsError> {
    let pairs = lookup(candidates, references)?;
    let idf = IdfTable::build(pairs.iter().map(|p| p.1));
    let mut row = MetricRow::default();
    for (c, r) in &pairs {
        row.bleu4 += bleu4(c, r);
        row.meteor += meteor_lite(c, r);
        row.rouge_l += rouge_l(c, r, ROUGE_BETA);
        row.cider += cider(c, r, &idf, CIDER_SIGMA);
    }
    let n = pairs.len() as f64;
    row.bleu4 /= n;
    row.meteor /= n;
    row.rouge_l /= n;
    row.cider /= n;
    Ok(row)
}
