//! Double-precision forward and backward passes over the reduction heads.
//!
//! The encoder is frozen, so each text is cached as its raw CLS vector plus the
//! mean raw vector of every stem; projecting the mean equals the mean of the
//! projections because `W_t` is linear.

use crate::encoder::Encoder;
use crate::linalg::Matrix;
use crate::reduce::{sigmoid, word_hash, HeadDims, ReductionHeads};
use crate::tokenizer::{tokenize, Vocabulary};
use crate::Result;

use super::{FreezeSet, LossWeights, TrainTriple};

/// All head parameters in f64. Matrices are row-major `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub dims: HeadDims,
    pub w_cls: Vec<f64>,
    pub w_t: Vec<f64>,
    pub w_s: Vec<f64>,
    pub b_s: f64,
    pub gamma: f64,
    /// Empty unless the uni layer is enabled.
    pub w_u: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Cls,
    Token,
    GateWeights,
    GateBias,
    Gamma,
    Uni,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Cls,
        ParamGroup::Token,
        ParamGroup::GateWeights,
        ParamGroup::GateBias,
        ParamGroup::Gamma,
        ParamGroup::Uni,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Cls => "W_cls",
            ParamGroup::Token => "W_t",
            ParamGroup::GateWeights => "W_s",
            ParamGroup::GateBias => "b_s",
            ParamGroup::Gamma => "gamma",
            ParamGroup::Uni => "W_u",
        }
    }

    pub(crate) fn frozen(self, freeze: &FreezeSet) -> bool {
        match self {
            ParamGroup::Cls => freeze.cls,
            ParamGroup::Token => freeze.token,
            ParamGroup::GateWeights | ParamGroup::GateBias => freeze.gate,
            ParamGroup::Gamma => freeze.gamma,
            ParamGroup::Uni => freeze.uni,
        }
    }
}

fn to_f64(m: &[f32]) -> Vec<f64> {
    m.iter().map(|&x| f64::from(x)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl Params {
    pub fn from_heads(heads: &ReductionHeads) -> Self {
        Self {
            dims: heads.dims(),
            w_cls: to_f64(heads.w_cls.as_slice()),
            w_t: to_f64(heads.w_t.as_slice()),
            w_s: to_f64(&heads.w_s),
            b_s: f64::from(heads.b_s),
            gamma: f64::from(heads.gamma),
            w_u: heads.w_u.as_ref().map_or_else(Vec::new, |m| to_f64(m.as_slice())),
        }
    }

    pub fn to_heads(&self) -> ReductionHeads {
        let d = self.dims;
        ReductionHeads {
            w_cls: Matrix::from_vec(d.enc, d.cls, to_f32(&self.w_cls)),
            w_t: Matrix::from_vec(d.enc, d.token, to_f32(&self.w_t)),
            w_s: to_f32(&self.w_s),
            b_s: self.b_s as f32,
            gamma: self.gamma as f32,
            w_u: d
                .has_uni()
                .then(|| Matrix::from_vec(d.token, d.uni, to_f32(&self.w_u))),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            w_cls: vec![0.0; self.w_cls.len()],
            w_t: vec![0.0; self.w_t.len()],
            w_s: vec![0.0; self.w_s.len()],
            b_s: 0.0,
            gamma: 0.0,
            w_u: vec![0.0; self.w_u.len()],
        }
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Cls => &self.w_cls,
            ParamGroup::Token => &self.w_t,
            ParamGroup::GateWeights => &self.w_s,
            ParamGroup::GateBias => std::slice::from_ref(&self.b_s),
            ParamGroup::Gamma => std::slice::from_ref(&self.gamma),
            ParamGroup::Uni => &self.w_u,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::Cls => &mut self.w_cls,
            ParamGroup::Token => &mut self.w_t,
            ParamGroup::GateWeights => &mut self.w_s,
            ParamGroup::GateBias => std::slice::from_mut(&mut self.b_s),
            ParamGroup::Gamma => std::slice::from_mut(&mut self.gamma),
            ParamGroup::Uni => &mut self.w_u,
        }
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .all(|&g| self.group(g).iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, group by group.
    pub(crate) fn add_scaled(&mut self, other: &Params, scale: f64) {
        for g in ParamGroup::ALL {
            for (a, b) in self.group_mut(g).iter_mut().zip(other.group(g)) {
                *a += scale * b;
            }
        }
    }

    fn zero_frozen(&mut self, freeze: &FreezeSet) {
        for g in ParamGroup::ALL {
            if g.frozen(freeze) {
                self.group_mut(g).iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedWord {
    pub hash: u32,
    pub stem: String,
    /// Mean raw encoder vector over every subword position of the stem.
    pub mean_raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedText {
    pub cls_raw: Vec<f64>,
    pub words: Vec<PreparedWord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTriple {
    pub q: PreparedText,
    pub pos: PreparedText,
    pub neg: PreparedText,
    pub t_margin: f64,
}

pub fn prepare_text(
    text: &str,
    vocab: &Vocabulary,
    encoder: &dyn Encoder,
    stemming: bool,
) -> Result<PreparedText> {
    let t = tokenize(text, vocab, stemming);
    let e = encoder.encode(text, &t)?;
    e.check(encoder.dim(), t.subword_ids.len())?;
    let words = t
        .unique_stems
        .iter()
        .map(|g| {
            let mut acc = vec![0f64; encoder.dim()];
            for &p in &g.positions {
                for (a, &x) in acc.iter_mut().zip(&e.token_raw[p]) {
                    *a += f64::from(x);
                }
            }
            let n = g.positions.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            PreparedWord {
                hash: word_hash(&g.stem),
                stem: g.stem.clone(),
                mean_raw: acc,
            }
        })
        .collect();
    Ok(PreparedText {
        cls_raw: to_f64(&e.cls_raw),
        words,
    })
}

pub fn prepare_triple(
    triple: &TrainTriple,
    vocab: &Vocabulary,
    encoder: &dyn Encoder,
    stemming: bool,
) -> Result<PreparedTriple> {
    Ok(PreparedTriple {
        q: prepare_text(&triple.q, vocab, encoder, stemming)?,
        pos: prepare_text(&triple.pos, vocab, encoder, stemming)?,
        neg: prepare_text(&triple.neg, vocab, encoder, stemming)?,
        t_margin: triple.t_margin,
    })
}

/// `x · W` for row-major `W` of shape `x.len() x cols`.
fn proj(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0f64; cols];
    for (r, &xr) in x.iter().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xr * wv;
        }
    }
    out
}

/// `G += x ⊗ dy`.
fn outer_acc(g: &mut [f64], x: &[f64], dy: &[f64]) {
    let cols = dy.len();
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        for (gv, &d) in g[r * cols..(r + 1) * cols].iter_mut().zip(dy) {
            *gv += xr * d;
        }
    }
}

/// `W · dy`, the gradient with respect to the input of `x · W`.
fn back(w: &[f64], dy: &[f64]) -> Vec<f64> {
    let cols = dy.len();
    w.chunks_exact(cols)
        .map(|row| row.iter().zip(dy).map(|(a, b)| a * b).sum())
        .collect()
}

fn dotf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Piecewise choices taken by a forward pass; gradients are only smooth while
/// these stay fixed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActivationPattern {
    pub kept: Vec<bool>,
    pub argmax: Vec<Option<usize>>,
    pub uni_positive: Vec<bool>,
}

struct QueryFwd {
    cls: Vec<f64>,
    /// Projected word vectors (input of the uni layer).
    h: Vec<Vec<f64>>,
    uni_pre: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
}

struct PassageFwd {
    cls: Vec<f64>,
    h: Vec<Vec<f64>>,
    z: Vec<f64>,
    /// Indices of words with a positive gate, in text order.
    kept: Vec<usize>,
    /// Per kept word: gate-scaled vector, uni pre-activation, final vector.
    v: Vec<Vec<f64>>,
    uni_pre: Vec<Vec<f64>>,
    f: Vec<Vec<f64>>,
}

fn uni_forward(p: &Params, v: &[f64], nonneg: bool) -> (Vec<f64>, Vec<f64>) {
    let pre = proj(v, &p.w_u, p.dims.uni);
    let out = if nonneg {
        pre.iter().map(|x| x.max(0.0)).collect()
    } else {
        pre.clone()
    };
    (pre, out)
}

fn forward_query(p: &Params, t: &PreparedText, nonneg: bool) -> QueryFwd {
    let d = p.dims;
    let cls = proj(&t.cls_raw, &p.w_cls, d.cls);
    let h: Vec<Vec<f64>> = t.words.iter().map(|w| proj(&w.mean_raw, &p.w_t, d.token)).collect();
    let (uni_pre, e) = if d.has_uni() {
        h.iter().map(|x| uni_forward(p, x, nonneg)).unzip()
    } else {
        (Vec::new(), h.clone())
    };
    QueryFwd { cls, h, uni_pre, e }
}

fn forward_passage(p: &Params, t: &PreparedText, nonneg: bool) -> PassageFwd {
    let d = p.dims;
    let cls = proj(&t.cls_raw, &p.w_cls, d.cls);
    let h: Vec<Vec<f64>> = t.words.iter().map(|w| proj(&w.mean_raw, &p.w_t, d.token)).collect();
    let z: Vec<f64> = h.iter().map(|x| dotf(x, &p.w_s) + p.b_s).collect();
    let kept: Vec<usize> = (0..h.len()).filter(|&j| z[j] > 0.0).collect();
    let v: Vec<Vec<f64>> = kept
        .iter()
        .map(|&j| h[j].iter().map(|x| x * z[j]).collect())
        .collect();
    let (uni_pre, f) = if d.has_uni() {
        v.iter().map(|x| uni_forward(p, x, nonneg)).unzip()
    } else {
        (Vec::new(), v.clone())
    };
    PassageFwd {
        cls,
        h,
        z,
        kept,
        v,
        uni_pre,
        f,
    }
}

/// Argmax over allowed passage words per query word, ties to the lowest index.
fn match_words(q: &PreparedText, qf: &QueryFwd, p: &PreparedText, pf: &PassageFwd, em: bool) -> (f64, Vec<Option<usize>>) {
    let mut total = 0.0;
    let mut argmax = Vec::with_capacity(qf.e.len());
    for (i, e) in qf.e.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (k, &j) in pf.kept.iter().enumerate() {
            if em && p.words[j].hash != q.words[i].hash {
                continue;
            }
            let s = dotf(e, &pf.f[k]);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((k, s));
            }
        }
        if let Some((_, s)) = best {
            total += s;
        }
        argmax.push(best.map(|(k, _)| k));
    }
    (total, argmax)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairScores {
    pub s_cls: f64,
    pub s_token: f64,
    pub s_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TripleTerms {
    pub l_b: f64,
    pub l_cls: f64,
    /// Gate sum over both passages.
    pub gate_sum: f64,
    pub gates: usize,
    pub zero_gates: usize,
}

pub(crate) struct TripleEval {
    pub terms: TripleTerms,
    pub pattern: ActivationPattern,
    /// Pre-activations of every gate, for kink detection.
    pub z: Vec<f64>,
    pub grads: Option<Params>,
}

pub(crate) struct ModelSettings<'a> {
    pub weights: &'a LossWeights,
    pub em: bool,
    pub uni_nonneg: bool,
    pub batch_size: usize,
}

/// Loss terms of one triple and, when asked, its contribution to the batch gradient.
pub(crate) fn eval_triple(
    params: &Params,
    t: &PreparedTriple,
    s: &ModelSettings<'_>,
    with_grads: bool,
) -> TripleEval {
    let qf = forward_query(params, &t.q, s.uni_nonneg);
    let pos = forward_passage(params, &t.pos, s.uni_nonneg);
    let neg = forward_passage(params, &t.neg, s.uni_nonneg);
    let sigma = sigmoid(params.gamma);

    let score = |p: &PreparedText, pf: &PassageFwd| {
        let s_cls = dotf(&qf.cls, &pf.cls);
        let (s_token, argmax) = match_words(&t.q, &qf, p, pf, s.em);
        let s_total = sigma * s_cls + (1.0 - sigma) * s_token;
        (PairScores { s_cls, s_token, s_total }, argmax)
    };
    let (sp, am_pos) = score(&t.pos, &pos);
    let (sn, am_neg) = score(&t.neg, &neg);

    let r_b = sp.s_total - sn.s_total - t.t_margin;
    let r_c = sp.s_cls - sn.s_cls - t.t_margin;
    let gate_sum: f64 = pos.z.iter().chain(&neg.z).map(|z| z.max(0.0)).sum();
    let gates = pos.z.len() + neg.z.len();
    let zero_gates = gates - pos.kept.len() - neg.kept.len();

    let mut pattern = ActivationPattern::default();
    for pf in [&pos, &neg] {
        pattern.kept.extend(pf.z.iter().map(|&z| z > 0.0));
        pattern.uni_positive.extend(pf.uni_pre.iter().flatten().map(|&x| x > 0.0));
    }
    pattern.uni_positive.extend(qf.uni_pre.iter().flatten().map(|&x| x > 0.0));
    pattern.argmax.extend(am_pos.iter().chain(&am_neg).copied());

    let grads = with_grads.then(|| {
        let b = s.batch_size as f64;
        let w = s.weights;
        let mut g = params.zeros_like();
        let mut dcls_q = vec![0f64; params.dims.cls];
        let mut de = vec![vec![0f64; qf.e.first().map_or(0, Vec::len)]; qf.e.len()];
        let coef_b = w.alpha_b * 2.0 * r_b / b;
        let coef_c = w.alpha_cls * 2.0 * r_c / b;
        let coef_cs = w.alpha_cs / b;
        for (sign, pf, sc, am) in [(1.0, &pos, &sp, &am_pos), (-1.0, &neg, &sn, &am_neg)] {
            let ds_total = sign * coef_b;
            let ds_cls = ds_total * sigma + sign * coef_c;
            let ds_tok = ds_total * (1.0 - sigma);
            g.gamma += ds_total * sigma * (1.0 - sigma) * (sc.s_cls - sc.s_token);
            for (d, &c) in dcls_q.iter_mut().zip(&pf.cls) {
                *d += ds_cls * c;
            }
            let dcls_p: Vec<f64> = qf.cls.iter().map(|c| ds_cls * c).collect();
            let mut df = vec![vec![0f64; de.first().map_or(0, Vec::len)]; pf.kept.len()];
            for (i, a) in am.iter().enumerate() {
                if let Some(k) = *a {
                    for (x, &y) in de[i].iter_mut().zip(&pf.f[k]) {
                        *x += ds_tok * y;
                    }
                    for (x, &y) in df[k].iter_mut().zip(&qf.e[i]) {
                        *x += ds_tok * y;
                    }
                }
            }
            let p = if sign > 0.0 { &t.pos } else { &t.neg };
            backward_passage(params, p, pf, &dcls_p, &df, coef_cs, s.uni_nonneg, &mut g);
        }
        backward_query(params, &t.q, &qf, &dcls_q, &de, s.uni_nonneg, &mut g);
        g
    });

    let mut z = pos.z;
    z.extend(neg.z);
    TripleEval {
        terms: TripleTerms {
            l_b: r_b * r_b,
            l_cls: r_c * r_c,
            gate_sum,
            gates,
            zero_gates,
        },
        pattern,
        z,
        grads,
    }
}

fn uni_backward(p: &Params, input: &[f64], pre: &[f64], dout: &[f64], nonneg: bool, g: &mut Params) -> Vec<f64> {
    let dpre: Vec<f64> = dout
        .iter()
        .zip(pre)
        .map(|(&d, &x)| if nonneg && x <= 0.0 { 0.0 } else { d })
        .collect();
    outer_acc(&mut g.w_u, input, &dpre);
    back(&p.w_u, &dpre)
}

fn backward_query(
    p: &Params,
    t: &PreparedText,
    qf: &QueryFwd,
    dcls: &[f64],
    de: &[Vec<f64>],
    nonneg: bool,
    g: &mut Params,
) {
    outer_acc(&mut g.w_cls, &t.cls_raw, dcls);
    for (i, w) in t.words.iter().enumerate() {
        let dh = if p.dims.has_uni() {
            uni_backward(p, &qf.h[i], &qf.uni_pre[i], &de[i], nonneg, g)
        } else {
            de[i].clone()
        };
        outer_acc(&mut g.w_t, &w.mean_raw, &dh);
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_passage(
    p: &Params,
    t: &PreparedText,
    pf: &PassageFwd,
    dcls: &[f64],
    df: &[Vec<f64>],
    coef_cs: f64,
    nonneg: bool,
    g: &mut Params,
) {
    outer_acc(&mut g.w_cls, &t.cls_raw, dcls);
    for (k, &j) in pf.kept.iter().enumerate() {
        let dv = if p.dims.has_uni() {
            uni_backward(p, &pf.v[k], &pf.uni_pre[k], &df[k], nonneg, g)
        } else {
            df[k].clone()
        };
        let gate = pf.z[j];
        let h = &pf.h[j];
        // Kept words have z > 0, so the ReLU passes the gradient through.
        let dz = dotf(h, &dv) + coef_cs;
        let mut dh: Vec<f64> = dv.iter().map(|x| gate * x).collect();
        for (a, &ws) in dh.iter_mut().zip(&p.w_s) {
            *a += dz * ws;
        }
        for (gs, &hv) in g.w_s.iter_mut().zip(h) {
            *gs += dz * hv;
        }
        g.b_s += dz;
        outer_acc(&mut g.w_t, &t.words[j].mean_raw, &dh);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchEval {
    pub l_b: f64,
    pub l_cls: f64,
    pub l_cs: f64,
    pub total: f64,
    pub gate_sum: f64,
    pub zero_gate_fraction: f64,
}

pub(crate) struct BatchResult {
    pub eval: BatchEval,
    pub patterns: Vec<ActivationPattern>,
    pub z: Vec<f64>,
    pub grads: Option<Params>,
}

/// Evaluates a batch; per-triple work fans out, reductions run in triple order.
pub(crate) fn eval_batch(
    params: &Params,
    batch: &[PreparedTriple],
    weights: &LossWeights,
    em: bool,
    uni_nonneg: bool,
    freeze: &FreezeSet,
    with_grads: bool,
) -> BatchResult {
    use rayon::prelude::*;
    let settings = ModelSettings {
        weights,
        em,
        uni_nonneg,
        batch_size: batch.len().max(1),
    };
    let per: Vec<TripleEval> = batch
        .par_iter()
        .map(|t| eval_triple(params, t, &settings, with_grads))
        .collect();

    let b = batch.len().max(1) as f64;
    let mut eval = BatchEval::default();
    let (mut gates, mut zero) = (0usize, 0usize);
    let mut grads = with_grads.then(|| params.zeros_like());
    let mut patterns = Vec::with_capacity(per.len());
    let mut z = Vec::new();
    for te in per {
        eval.l_b += te.terms.l_b;
        eval.l_cls += te.terms.l_cls;
        eval.gate_sum += te.terms.gate_sum;
        gates += te.terms.gates;
        zero += te.terms.zero_gates;
        if let (Some(acc), Some(tg)) = (grads.as_mut(), te.grads.as_ref()) {
            acc.add_scaled(tg, 1.0);
        }
        patterns.push(te.pattern);
        z.extend(te.z);
    }
    eval.l_b /= b;
    eval.l_cls /= b;
    eval.l_cs = eval.gate_sum / b;
    eval.total = weights.alpha_b * eval.l_b + weights.alpha_cls * eval.l_cls + weights.alpha_cs * eval.l_cs;
    eval.zero_gate_fraction = if gates == 0 { 0.0 } else { zero as f64 / gates as f64 };
    if let Some(g) = grads.as_mut() {
        g.zero_frozen(freeze);
    }
    BatchResult {
        eval,
        patterns,
        z,
        grads,
    }
}

/// Scores of one (query, passage) pair with the f64 parameters.
pub fn pair_scores(params: &Params, q: &PreparedText, p: &PreparedText, em: bool, uni_nonneg: bool) -> PairScores {
    let qf = forward_query(params, q, uni_nonneg);
    let pf = forward_passage(params, p, uni_nonneg);
    let s_cls = dotf(&qf.cls, &pf.cls);
    let (s_token, _) = match_words(q, &qf, p, &pf, em);
    let sigma = sigmoid(params.gamma);
    PairScores {
        s_cls,
        s_token,
        s_total: sigma * s_cls + (1.0 - sigma) * s_token,
    }
}
