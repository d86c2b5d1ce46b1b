//! Fusion encoder over global-local confidence vectors and the LSTM caption decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{log_softmax_rows, GradError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::{Sentence, Token};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{which} vector has length {got}, expected {expected}")]
    FeatureLength {
        which: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("step {0} needs the previous token")]
    MissingToken(usize),
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenRange { token: u32, vocab: usize },
    #[error("tape was recorded over a different parameter store")]
    WrongTape,
    #[error("parameter {name}: {msg}")]
    Param { name: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Network hyperparameters. `vocab_size` is the number of output classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Long-range word slots (W).
    pub k: usize,
    /// Action slots (A).
    pub j: usize,
    /// Object-class slots (C).
    pub m: usize,
    pub d_e: usize,
    pub d_w: usize,
    pub d_h: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            k: 300,
            j: 400,
            m: 1000,
            d_e: 256,
            d_w: 300,
            d_h: 512,
            vocab_size: 3000,
            max_len: 30,
        }
    }
}

/// The three confidence vectors describing one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalLocalFeatures {
    /// W: long-range vocabulary confidences, length K.
    pub long: Vec<f64>,
    /// A: short-range action confidences, length J.
    pub short: Vec<f64>,
    /// C: keyframe object confidences, length M.
    pub local: Vec<f64>,
}

impl GlobalLocalFeatures {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            long: vec![0.0; dims.k],
            short: vec![0.0; dims.j],
            local: vec![0.0; dims.m],
        }
    }

    /// Per-coordinate mean over `videos`; zeros when empty.
    pub fn mean<'a>(dims: &ModelDims, videos: impl IntoIterator<Item = &'a GlobalLocalFeatures>) -> Result<Self> {
        let mut acc = Self::zeros(dims);
        let mut n = 0usize;
        for f in videos {
            f.check_lengths(dims)?;
            for (a, x) in [(&mut acc.long, &f.long), (&mut acc.short, &f.short), (&mut acc.local, &f.local)] {
                a.iter_mut().zip(x).for_each(|(a, x)| *a += x);
            }
            n += 1;
        }
        if n > 0 {
            for a in [&mut acc.long, &mut acc.short, &mut acc.local] {
                a.iter_mut().for_each(|a| *a /= n as f64);
            }
        }
        Ok(acc)
    }

    pub fn is_finite(&self) -> bool {
        self.long.iter().chain(&self.short).chain(&self.local).all(|x| x.is_finite())
    }

    pub fn check_lengths(&self, dims: &ModelDims) -> Result<()> {
        for (which, v, expected) in [
            ("long", &self.long, dims.k),
            ("short", &self.short, dims.j),
            ("local", &self.local, dims.m),
        ] {
            if v.len() != expected {
                return Err(ModelError::FeatureLength {
                    which,
                    got: v.len(),
                    expected,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub sentence: Sentence,
    /// One entry per emitted token, EOS included when it was emitted.
    pub step_logprobs: Vec<f64>,
    pub total_logprob: f64,
}

/// Piecewise-linear probability of feeding the ground-truth token:
/// `p0` rising to 1 at `peak_epoch`, then falling to `p_end` at `end_epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsSchedule {
    pub p0: f64,
    pub peak_epoch: usize,
    pub p_end: f64,
    pub end_epoch: usize,
}

impl Default for SsSchedule {
    fn default() -> Self {
        Self {
            p0: 0.8,
            peak_epoch: 10,
            p_end: 0.8,
            end_epoch: 30,
        }
    }
}

impl SsSchedule {
    pub fn probability(&self, epoch: usize) -> f64 {
        ss_probability(epoch, self)
    }
}

pub fn ss_probability(epoch: usize, s: &SsSchedule) -> f64 {
    let e = epoch as f64;
    let p = if epoch <= s.peak_epoch {
        if s.peak_epoch == 0 {
            1.0
        } else {
            s.p0 + (1.0 - s.p0) * e / s.peak_epoch as f64
        }
    } else if epoch < s.end_epoch {
        let span = (s.end_epoch - s.peak_epoch) as f64;
        1.0 + (s.p_end - 1.0) * (e - s.peak_epoch as f64) / span
    } else {
        s.p_end
    };
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    phi_long: Linear,
    phi_short: Linear,
    phi_local: Linear,
    fuse_out: Linear,
    embed: ParamId,
    /// input, forget, output, cell
    gates: [Linear; 4],
    out: Linear,
}

const GATE_NAMES: [&str; 4] = ["input", "forget", "output", "cell"];

/// Parameter names and shapes in storage order.
pub fn param_layout(d: &ModelDims) -> Vec<(String, [usize; 2])> {
    let mut v = Vec::new();
    let mut lin = |name: &str, i: usize, o: usize| {
        v.push((format!("{name}.weight"), [i, o]));
        v.push((format!("{name}.bias"), [1, o]));
    };
    lin("phi_long", d.k, d.d_e);
    lin("phi_short", d.j, d.d_e);
    lin("phi_local", d.m, d.d_e);
    lin("fuse_out", 3 * d.d_e, d.d_w);
    for g in GATE_NAMES {
        lin(&format!("lstm.{g}"), d.d_h + d.d_w, d.d_h);
    }
    lin("out", d.d_h, d.vocab_size);
    v.insert(8, ("embed.weight".to_string(), [d.vocab_size, d.d_w]));
    v
}

fn emission_mask(vocab: usize) -> Vec<bool> {
    (0..vocab)
        .map(|i| i == Token::PAD.index() || i == Token::BOS.index())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    dims: ModelDims,
    params: ParamStore,
    /// Subtracted from the inputs before the projections; zeros for a fresh model.
    feature_center: GlobalLocalFeatures,
}

impl Model {
    /// Weights uniform in [-0.08, 0.08], biases zero, forget-gate bias one.
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        for (name, [r, c]) in param_layout(&dims) {
            let data = if name.ends_with(".bias") {
                let fill = if name == "lstm.forget.bias" { 1.0 } else { 0.0 };
                vec![fill; r * c]
            } else {
                (0..r * c).map(|_| rng.gen_range(-0.08..=0.08)).collect()
            };
            params.add(name, Tensor::matrix(r, c, data).expect("layout shape"));
        }
        Self::from_params(dims, params).expect("fresh layout is valid")
    }

    /// Wraps an existing store after checking names, order and shapes.
    pub fn from_params(dims: ModelDims, params: ParamStore) -> Result<Self> {
        let layout = param_layout(&dims);
        if layout.len() != params.len() {
            return Err(ModelError::Invalid(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, [r, c]), p) in layout.iter().zip(params.iter()) {
            if &p.name != name {
                return Err(ModelError::Param {
                    name: p.name.clone(),
                    msg: format!("expected {name} at this position"),
                });
            }
            if p.value.shape() != [*r, *c] {
                return Err(ModelError::Param {
                    name: name.clone(),
                    msg: format!("shape {:?}, expected [{r}, {c}]", p.value.shape()),
                });
            }
            if !p.value.is_finite() {
                return Err(ModelError::Param {
                    name: name.clone(),
                    msg: "non-finite values".into(),
                });
            }
        }
        let feature_center = GlobalLocalFeatures::zeros(&dims);
        Ok(Self {
            dims,
            params,
            feature_center,
        })
    }

    pub fn feature_center(&self) -> &GlobalLocalFeatures {
        &self.feature_center
    }

    /// Typically the mean training features, so that every confidence
    /// vector enters the projections centered.
    pub fn set_feature_center(&mut self, center: GlobalLocalFeatures) -> Result<()> {
        center.check_lengths(&self.dims)?;
        if !center.is_finite() {
            return Err(ModelError::Invalid("non-finite feature center".into()));
        }
        self.feature_center = center;
        Ok(())
    }

    fn ids(&self) -> Ids {
        let lin = |i: usize| Linear {
            weight: ParamId(i),
            bias: ParamId(i + 1),
        };
        Ids {
            phi_long: lin(0),
            phi_short: lin(2),
            phi_local: lin(4),
            fuse_out: lin(6),
            embed: ParamId(8),
            gates: [lin(9), lin(11), lin(13), lin(15)],
            out: lin(17),
        }
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::new(&self.params)
    }

    /// Replaces the value of a named parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.params.find(name).ok_or_else(|| ModelError::Param {
            name: name.into(),
            msg: "no such parameter".into(),
        })?;
        let p = self.params.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(ModelError::Param {
                name: name.into(),
                msg: format!("shape {:?}, expected {:?}", value.shape(), p.value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Tapes may borrow a copy of the store (as gradient checking does), so
    /// only the layout is compared.
    fn check_tape(&self, tape: &Tape) -> Result<()> {
        let other = tape.params();
        if std::ptr::eq(other, &self.params)
            || (other.len() == self.params.len()
                && other.iter().zip(self.params.iter()).all(|(a, b)| a.value.shape() == b.value.shape()))
        {
            Ok(())
        } else {
            Err(ModelError::WrongTape)
        }
    }

    fn linear(&self, tape: &mut Tape, x: Var, l: Linear) -> Result<Var> {
        let w = tape.param(l.weight);
        let b = tape.param(l.bias);
        let xw = tape.matmul(x, w)?;
        Ok(tape.add(xw, b)?)
    }

    /// Fused feature `F` as a `1 x d_w` row.
    pub fn fuse(&self, tape: &mut Tape, f: &GlobalLocalFeatures) -> Result<Var> {
        self.check_tape(tape)?;
        f.check_lengths(&self.dims)?;
        let ids = self.ids();
        let mut parts = Vec::with_capacity(3);
        let c = &self.feature_center;
        for (v, mu, l) in [
            (&f.long, &c.long, ids.phi_long),
            (&f.short, &c.short, ids.phi_short),
            (&f.local, &c.local, ids.phi_local),
        ] {
            let x = tape.constant(Tensor::row(v.iter().zip(mu).map(|(x, m)| x - m).collect()));
            parts.push(self.linear(tape, x, l)?);
        }
        let cat = tape.concat(&parts)?;
        self.linear(tape, cat, ids.fuse_out)
    }

    pub fn fuse_value(&self, f: &GlobalLocalFeatures) -> Result<Tensor> {
        let mut tape = self.tape();
        let v = self.fuse(&mut tape, f)?;
        Ok(tape.value(v)?.clone())
    }

    /// One LSTM step over `[h_prev, x]`; works row-wise on batches.
    pub fn lstm_step(&self, tape: &mut Tape, h_prev: Var, c_prev: Var, x: Var) -> Result<(Var, Var)> {
        self.check_tape(tape)?;
        let hv = tape.value(h_prev)?;
        let xv = tape.value(x)?;
        if hv.cols() != self.dims.d_h || xv.cols() != self.dims.d_w || tape.value(c_prev)?.cols() != self.dims.d_h {
            return Err(ModelError::Invalid(format!(
                "lstm_step dims: h {:?}, c {:?}, x {:?}; expected d_h={}, d_w={}",
                hv.shape(),
                tape.value(c_prev)?.shape(),
                xv.shape(),
                self.dims.d_h,
                self.dims.d_w
            )));
        }
        let z = tape.concat(&[h_prev, x])?;
        let [gi, gf, go, gc] = self.ids().gates;
        let pre_i = self.linear(tape, z, gi)?;
        let pre_f = self.linear(tape, z, gf)?;
        let pre_o = self.linear(tape, z, go)?;
        let pre_c = self.linear(tape, z, gc)?;
        let i = tape.sigmoid(pre_i)?;
        let f = tape.sigmoid(pre_f)?;
        let o = tape.sigmoid(pre_o)?;
        let g = tape.tanh(pre_c)?;
        let keep = tape.mul(f, c_prev)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    /// `W_o h + b`, one row of V logits per hidden row.
    pub fn logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        self.check_tape(tape)?;
        self.linear(tape, h, self.ids().out)
    }

    /// Softmax over the vocabulary for a single hidden state.
    pub fn word_dist(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dims.d_h {
            return Err(ModelError::Invalid(format!("hidden length {} != {}", h.len(), self.dims.d_h)));
        }
        let mut tape = self.tape();
        let hv = tape.constant(Tensor::row(h.to_vec()));
        let z = self.logits(&mut tape, hv)?;
        let lp = log_softmax_rows(tape.value(z)?, None);
        Ok(lp.data().iter().map(|v| v.exp()).collect())
    }

    fn embed(&self, tape: &mut Tape, tokens: &[Token]) -> Result<Var> {
        if let Some(t) = tokens.iter().find(|t| t.index() >= self.dims.vocab_size) {
            return Err(ModelError::TokenRange {
                token: t.0,
                vocab: self.dims.vocab_size,
            });
        }
        let table = tape.param(self.ids().embed);
        let idx: Vec<usize> = tokens.iter().map(|t| t.index()).collect();
        Ok(tape.gather_rows(table, &idx)?)
    }

    /// Decoder input at 1-based `step`: `F` first, then the predicted token
    /// (`xi == false`) or the ground-truth token (`xi == true`).
    pub fn phi_input(
        &self,
        tape: &mut Tape,
        step: usize,
        prev_pred: Option<Token>,
        prev_gt: Option<Token>,
        fused: Var,
        xi: bool,
    ) -> Result<Var> {
        if step == 0 {
            return Err(ModelError::Invalid("steps start at 1".into()));
        }
        if step == 1 {
            return Ok(fused);
        }
        let tok = if xi { prev_gt } else { prev_pred };
        let tok = tok.ok_or(ModelError::MissingToken(step))?;
        self.embed(tape, &[tok])
    }

    /// `sum_j coef_j * log p(S_j | F)` over a batch of sentences fed through
    /// the decoder together. `xi(row, step)` picks ground truth (`true`) or
    /// the model's own previous argmax as the next input.
    fn batch_logprob(
        &self,
        tape: &mut Tape,
        fused: Var,
        sentences: &[Sentence],
        coefs: &[f64],
        mask: Option<&[bool]>,
        eos_cutoff: usize,
        xi: &mut dyn FnMut(usize, usize) -> bool,
    ) -> Result<Var> {
        self.check_tape(tape)?;
        if sentences.is_empty() || sentences.len() != coefs.len() {
            return Err(ModelError::Invalid(format!(
                "{} sentences with {} coefficients",
                sentences.len(),
                coefs.len()
            )));
        }
        let fv = tape.value(fused)?;
        if fv.rows() != 1 || fv.cols() != self.dims.d_w {
            return Err(ModelError::Invalid(format!("fused feature shape {:?}", fv.shape())));
        }
        for s in sentences {
            if let Some(t) = s.tokens().iter().find(|t| t.index() >= self.dims.vocab_size) {
                return Err(ModelError::TokenRange {
                    token: t.0,
                    vocab: self.dims.vocab_size,
                });
            }
        }
        let rows = sentences.len();
        let steps = sentences.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        let mut h = tape.constant(Tensor::zeros(rows, self.dims.d_h));
        let mut c = tape.constant(Tensor::zeros(rows, self.dims.d_h));
        let mut x = tape.gather_rows(fused, &vec![0; rows])?;
        let mut pred = vec![Token::EOS; rows];
        let mut total: Option<Var> = None;
        let pred_mask = emission_mask(self.dims.vocab_size);
        for i in 0..steps {
            if i > 0 {
                let toks: Vec<Token> = (0..rows)
                    .map(|r| {
                        let s = sentences[r].tokens();
                        if i - 1 < s.len() && xi(r, i + 1) {
                            s[i - 1]
                        } else if i - 1 < s.len() {
                            pred[r]
                        } else {
                            Token::EOS
                        }
                    })
                    .collect();
                x = self.embed(tape, &toks)?;
            }
            let (hn, cn) = self.lstm_step(tape, h, c, x)?;
            h = hn;
            c = cn;
            let z = self.logits(tape, h)?;
            let lp = tape.log_softmax(z, mask)?;
            let mut picks = Vec::with_capacity(rows);
            for (r, s) in sentences.iter().enumerate() {
                let target = match i.cmp(&s.len()) {
                    std::cmp::Ordering::Less => Some(s.tokens()[i]),
                    std::cmp::Ordering::Equal if s.len() < eos_cutoff => Some(Token::EOS),
                    _ => None,
                };
                if let Some(t) = target {
                    picks.push((r, t.index(), coefs[r]));
                }
            }
            if i + 1 < steps {
                let lpv = tape.value(lp)?;
                for (r, p) in pred.iter_mut().enumerate() {
                    *p = argmax(lpv.row_slice(r), &pred_mask);
                }
            }
            if picks.is_empty() {
                continue;
            }
            let step_sum = tape.pick_sum(lp, &picks)?;
            total = Some(match total {
                Some(t) => tape.add(t, step_sum)?,
                None => step_sum,
            });
        }
        match total {
            Some(t) => Ok(t),
            None => Ok(tape.constant(Tensor::scalar(0.0))),
        }
    }

    /// Teacher-forced `log p(S | F)` under the unmasked softmax, EOS included.
    pub fn seq_logprob(&self, tape: &mut Tape, fused: Var, sentence: &Sentence) -> Result<Var> {
        self.batch_logprob(tape, fused, std::slice::from_ref(sentence), &[1.0], None, usize::MAX, &mut |_, _| true)
    }

    /// `sum_j coef_j * log p(S_j | F)` with scheduled sampling: `xi(row, step)`
    /// returns whether the ground-truth token is fed at that step.
    pub fn weighted_logprob(
        &self,
        tape: &mut Tape,
        fused: Var,
        sentences: &[Sentence],
        coefs: &[f64],
        xi: &mut dyn FnMut(usize, usize) -> bool,
    ) -> Result<Var> {
        self.batch_logprob(tape, fused, sentences, coefs, None, usize::MAX, xi)
    }

    /// Log-probability of `sentence` under the decoding policy: PAD and BOS
    /// masked, and no EOS term when the sentence reached `max_len`.
    pub fn policy_logprob(&self, tape: &mut Tape, fused: Var, sentence: &Sentence, max_len: usize) -> Result<Var> {
        if sentence.len() > max_len {
            return Err(ModelError::Invalid(format!(
                "sentence of length {} exceeds max_len {max_len}",
                sentence.len()
            )));
        }
        let mask = emission_mask(self.dims.vocab_size);
        self.batch_logprob(
            tape,
            fused,
            std::slice::from_ref(sentence),
            &[1.0],
            Some(&mask),
            max_len,
            &mut |_, _| true,
        )
    }

    fn decode_with(
        &self,
        fused: &Tensor,
        max_len: usize,
        mut choose: impl FnMut(&[f64]) -> (Token, f64),
        temperature: f64,
    ) -> Result<DecodeResult> {
        if fused.rows() != 1 || fused.cols() != self.dims.d_w {
            return Err(ModelError::Invalid(format!("fused feature shape {:?}", fused.shape())));
        }
        let mask = emission_mask(self.dims.vocab_size);
        let mut tape = self.tape();
        let mut h = tape.constant(Tensor::zeros(1, self.dims.d_h));
        let mut c = tape.constant(Tensor::zeros(1, self.dims.d_h));
        let mut x = tape.constant(fused.clone());
        let mut tokens = Vec::new();
        let mut step_logprobs = Vec::new();
        while tokens.len() < max_len {
            let (hn, cn) = self.lstm_step(&mut tape, h, c, x)?;
            h = hn;
            c = cn;
            let z = self.logits(&mut tape, h)?;
            let mut zv = tape.value(z)?.clone();
            if temperature != 1.0 {
                zv.data_mut().iter_mut().for_each(|v| *v /= temperature);
            }
            let lp = log_softmax_rows(&zv, Some(&mask));
            let (tok, l) = choose(lp.data());
            step_logprobs.push(l);
            if tok == Token::EOS {
                break;
            }
            tokens.push(tok);
            x = self.embed(&mut tape, &[tok])?;
        }
        Ok(DecodeResult {
            total_logprob: step_logprobs.iter().sum(),
            sentence: Sentence(tokens),
            step_logprobs,
        })
    }

    /// Argmax decoding from `F`; ties go to the lowest token id.
    pub fn decode_greedy(&self, fused: &Tensor, max_len: usize) -> Result<DecodeResult> {
        let mask = emission_mask(self.dims.vocab_size);
        self.decode_with(
            fused,
            max_len,
            |lp| {
                let t = argmax(lp, &mask);
                (t, lp[t.index()])
            },
            1.0,
        )
    }

    /// Ancestral sampling from the (tempered) decoding distribution.
    pub fn decode_sample<R: Rng + ?Sized>(
        &self,
        fused: &Tensor,
        rng: &mut R,
        max_len: usize,
        temperature: f64,
    ) -> Result<DecodeResult> {
        if !(temperature > 0.0) {
            return Err(ModelError::Invalid(format!("temperature {temperature} must be positive")));
        }
        self.decode_with(
            fused,
            max_len,
            |lp| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut last = Token::EOS;
                for (i, &l) in lp.iter().enumerate() {
                    if l == f64::NEG_INFINITY {
                        continue;
                    }
                    last = Token(i as u32);
                    acc += l.exp();
                    if u < acc {
                        return (last, l);
                    }
                }
                (last, lp[last.index()])
            },
            temperature,
        )
    }
}

fn argmax(row: &[f64], mask: &[bool]) -> Token {
    let mut best = None;
    for (i, &v) in row.iter().enumerate() {
        if mask[i] {
            continue;
        }
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    Token(best.map_or(Token::EOS.0, |(i, _)| i as u32))
}
