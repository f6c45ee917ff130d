//! Multi-task training of the reduction heads with the encoder frozen.
//!
//! `L = α_b·L_b + α_cls·L_cls + α_cs·L_cs` where `L_b` and `L_cls` are
//! Margin-MSE on the aggregated and CLS scores and `L_cs` is the L1 norm of the
//! passage gates. Optimization is plain full-batch (or seeded mini-batch)
//! gradient descent on f64 copies of the parameters.

mod gradcheck;
mod model;

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use gradcheck::{
    grad_check, relative_error, Component, ComponentCheck, GradCheckReport, REL_ERR_FLOOR,
};
pub use model::{
    pair_scores, prepare_text, prepare_triple, ActivationPattern, BatchEval, PairScores,
    ParamGroup, Params, PreparedText, PreparedTriple, PreparedWord,
};

use crate::corpus::read_jsonl;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTriple {
    pub q: String,
    pub pos: String,
    pub neg: String,
    /// Teacher score difference between the positive and the negative.
    pub t_margin: f64,
}

pub fn read_triples(path: impl AsRef<Path>) -> Result<Vec<TrainTriple>> {
    let triples: Vec<TrainTriple> = read_jsonl(path)?;
    for (i, t) in triples.iter().enumerate() {
        if !t.t_margin.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "triple {} has a non-finite teacher margin",
                i + 1
            )));
        }
    }
    Ok(triples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_b: f64,
    pub alpha_cls: f64,
    pub alpha_cs: f64,
}

impl LossWeights {
    pub fn new(alpha_b: f64, alpha_cls: f64, alpha_cs: f64) -> Result<Self> {
        let w = Self {
            alpha_b,
            alpha_cls,
            alpha_cs,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha_b, self.alpha_cls, self.alpha_cs];
        if all.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative: {all:?}"
            )));
        }
        if all.iter().all(|&a| a == 0.0) {
            return Err(Error::InvalidArgument("loss weights are all zero".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_b: 1.0,
            alpha_cls: 0.1,
            alpha_cs: 0.75,
        }
    }
}

impl FromStr for LossWeights {
    type Err = Error;

    /// `"1,0.1,0.75"`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad loss weights {s:?}: {e}")))?;
        match parts[..] {
            [b, c, cs] => Self::new(b, c, cs),
            _ => Err(Error::InvalidArgument(format!(
                "expected three comma-separated loss weights, got {s:?}"
            ))),
        }
    }
}

/// Parameter groups excluded from updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeSet {
    pub cls: bool,
    pub token: bool,
    /// `W_s` and `b_s`.
    pub gate: bool,
    pub gamma: bool,
    pub uni: bool,
}

impl FreezeSet {
    /// Accepts `cls`, `token`, `gate`, `gamma`, `uni`.
    pub fn add(&mut self, name: &str) -> Result<()> {
        let slot = match name.trim().to_ascii_lowercase().as_str() {
            "cls" => &mut self.cls,
            "token" => &mut self.token,
            "gate" => &mut self.gate,
            "gamma" => &mut self.gamma,
            "uni" => &mut self.uni,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown parameter group {other:?}"
                )))
            }
        };
        *slot = true;
        Ok(())
    }

    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut f = Self::default();
        for n in names {
            f.add(n)?;
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr: f64,
    /// Exact-match masking in the token score.
    pub em: bool,
    pub uni_nonneg: bool,
    pub freeze: FreezeSet,
    /// Triples per step; `None` uses the full batch every step.
    pub batch_size: Option<usize>,
    /// Mini-batch shuffling seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lr: 0.05,
            em: false,
            uni_nonneg: false,
            freeze: FreezeSet::default(),
            batch_size: None,
            seed: 0,
        }
    }
}

/// `((s_pos - s_neg) - teacher_margin)²`
pub fn margin_mse(s_pos: f64, s_neg: f64, teacher_margin: f64) -> f64 {
    let r = (s_pos - s_neg) - teacher_margin;
    r * r
}

/// Mean of [`margin_mse`] over `(s_pos, s_neg, teacher_margin)` triples.
pub fn margin_mse_batch(items: &[(f64, f64, f64)]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().map(|&(p, n, t)| margin_mse(p, n, t)).sum::<f64>() / items.len() as f64
}

pub fn total_loss(
    batch: &[PreparedTriple],
    params: &Params,
    weights: &LossWeights,
    em: bool,
    uni_nonneg: bool,
) -> BatchEval {
    model::eval_batch(params, batch, weights, em, uni_nonneg, &FreezeSet::default(), false).eval
}

/// Loss values measured before the update of a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub l_b: f64,
    pub l_cls: f64,
    pub l_cs: f64,
    pub gate_sum: f64,
    pub zero_gate_fraction: f64,
    pub sigma_gamma: f64,
}

/// One gradient-descent step on `batch`; `params` is left untouched on error.
pub fn train_step(
    batch: &[PreparedTriple],
    params: &mut Params,
    config: &TrainConfig,
    step: usize,
) -> Result<LossRecord> {
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad learning rate {}", config.lr)));
    }
    config.weights.validate()?;
    let r = model::eval_batch(
        params,
        batch,
        &config.weights,
        config.em,
        config.uni_nonneg,
        &config.freeze,
        true,
    );
    let e = r.eval;
    let record = LossRecord {
        step,
        total: e.total,
        l_b: e.l_b,
        l_cls: e.l_cls,
        l_cs: e.l_cs,
        gate_sum: e.gate_sum,
        zero_gate_fraction: e.zero_gate_fraction,
        sigma_gamma: crate::reduce::sigmoid(params.gamma),
    };
    if !e.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            details: format!("{e:?}"),
        });
    }
    let grads = r.grads.expect("gradients requested");
    let mut next = params.clone();
    next.add_scaled(&grads, -config.lr);
    if !next.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            details: format!("parameters diverged after update; loss terms {e:?}"),
        });
    }
    *params = next;
    Ok(record)
}

/// Runs `steps` updates; with a batch size, each epoch reshuffles the triples.
pub fn train(
    triples: &[PreparedTriple],
    params: &mut Params,
    config: &TrainConfig,
    steps: usize,
) -> Result<Vec<LossRecord>> {
    if triples.is_empty() {
        return Err(Error::InvalidArgument("no training triples".into()));
    }
    let mut log = Vec::with_capacity(steps);
    let Some(bs) = config.batch_size.filter(|&b| b > 0 && b < triples.len()) else {
        for step in 0..steps {
            log.push(train_step(triples, params, config, step)?);
        }
        return Ok(log);
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut cursor = order.len();
    for step in 0..steps {
        if cursor + bs > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<PreparedTriple> = order[cursor..cursor + bs]
            .iter()
            .map(|&i| triples[i].clone())
            .collect();
        cursor += bs;
        log.push(train_step(&batch, params, config, step)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ReferenceEncoder;
    use crate::reduce::{HeadDims, ReductionHeads};
    use crate::tokenizer::Vocabulary;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(
            [
                "[UNK]", "the", "a", "of", "red", "blue", "fish", "bird", "sea", "sky", "swim",
                "fly", "water", "air",
            ]
            .iter()
            .copied(),
        )
        .unwrap()
    }

    fn batch() -> (Vec<PreparedTriple>, Params) {
        let enc = ReferenceEncoder::new(3, 16, 1).unwrap();
        let v = vocab();
        let raw = [
            ("red fish swim", "the red fish swim in the sea", "a blue bird of the sky", 2.0),
            ("bird fly", "the bird fly in the air", "fish swim in water", 1.5),
            ("sea water", "water of the sea", "the sky of air", -0.5),
        ];
        let triples = raw
            .iter()
            .map(|&(q, p, n, t)| {
                prepare_triple(
                    &TrainTriple {
                        q: q.into(),
                        pos: p.into(),
                        neg: n.into(),
                        t_margin: t,
                    },
                    &v,
                    &enc,
                    true,
                )
                .unwrap()
            })
            .collect();
        let heads = ReductionHeads::init(HeadDims::new(16, 8, 6, false), 11).unwrap();
        (triples, Params::from_heads(&heads))
    }

    #[test]
    fn margin_mse_examples() {
        assert_eq!(margin_mse(3.0, 1.0, 2.0), 0.0);
        assert_eq!(margin_mse(1.0, 0.0, 3.0), 4.0);
        let b = margin_mse_batch(&[(1.0, 0.0, 3.0), (2.0, 0.0, 1.0)]);
        assert_eq!(b, (4.0 + 1.0) / 2.0);
    }

    #[test]
    fn weights_parse_and_validate() {
        let w: LossWeights = "1,0.1,0.75".parse().unwrap();
        assert_eq!(w, LossWeights::default());
        assert!("0,0,0".parse::<LossWeights>().is_err());
        assert!("1,-1,0".parse::<LossWeights>().is_err());
        assert!("1,2".parse::<LossWeights>().is_err());
        let f = FreezeSet::from_names(["cls", "gamma"]).unwrap();
        assert!(f.cls && f.gamma && !f.token);
        assert!(FreezeSet::from_names(["bias"]).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let (b, p) = batch();
        let w = LossWeights::default();
        let e = total_loss(&b, &p, &w, false, false);
        assert!((e.total - (e.l_b + 0.1 * e.l_cls + 0.75 * e.l_cs)).abs() < 1e-12);
        assert!(e.total >= 0.0);
    }

    #[test]
    fn closed_gates_zero_gate_loss() {
        let (b, mut p) = batch();
        p.b_s = -10.0;
        let e = total_loss(&b, &p, &LossWeights::default(), false, false);
        assert_eq!(e.l_cs, 0.0);
        assert_eq!(e.zero_gate_fraction, 1.0);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let (b, mut p) = batch();
        let before = p.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        train_step(&b, &mut p, &cfg, 0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn one_step_decreases_loss() {
        let (b, mut p) = batch();
        let cfg = TrainConfig {
            lr: 0.01,
            ..Default::default()
        };
        let before = total_loss(&b, &p, &cfg.weights, false, false).total;
        train_step(&b, &mut p, &cfg, 0).unwrap();
        let after = total_loss(&b, &p, &cfg.weights, false, false).total;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn gate_loss_alone_drives_gates_down() {
        let (b, mut p) = batch();
        let cfg = TrainConfig {
            weights: LossWeights::new(0.0, 0.0, 1.0).unwrap(),
            lr: 0.05,
            ..Default::default()
        };
        let log = train(&b, &mut p, &cfg, 100).unwrap();
        for w in log.windows(2) {
            assert!(w[1].gate_sum <= w[0].gate_sum);
        }
        assert!(log.last().unwrap().gate_sum < 1e-6);
    }

    #[test]
    fn freeze_keeps_groups() {
        let (b, mut p) = batch();
        let before = p.clone();
        let cfg = TrainConfig {
            freeze: FreezeSet::from_names(["cls", "gate"]).unwrap(),
            ..Default::default()
        };
        train(&b, &mut p, &cfg, 3).unwrap();
        assert_eq!(p.w_cls, before.w_cls);
        assert_eq!((p.w_s.clone(), p.b_s), (before.w_s.clone(), before.b_s));
        assert_ne!(p.w_t, before.w_t);
    }

    #[test]
    fn gamma_gradient_vanishes_when_scores_agree() {
        // Identity CLS head and no words: s_cls and s_token are both 0 for
        // every pair, so only the CLS term can move gamma, and it doesn't.
        let (mut b, p) = batch();
        for t in &mut b {
            for text in [&mut t.q, &mut t.pos, &mut t.neg] {
                text.cls_raw.iter_mut().for_each(|x| *x = 0.0);
                text.words.clear();
            }
        }
        let cfg = TrainConfig::default();
        let mut q = p.clone();
        train_step(&b, &mut q, &cfg, 0).unwrap();
        assert_eq!(q.gamma, p.gamma);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (b, mut p) = batch();
        p.w_cls[0] = f64::NAN;
        let before = p.clone();
        let err = train_step(&b, &mut p, &TrainConfig::default(), 7).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 7, .. }));
        assert!(p.w_cls[0].is_nan() && p.w_t == before.w_t);
    }

    #[test]
    fn heads_round_trip_through_params() {
        let h = ReductionHeads::init(HeadDims::new(5, 3, 2, true), 1).unwrap();
        assert_eq!(Params::from_heads(&h).to_heads(), h);
    }

    #[test]
    fn pair_scores_match_inference_path() {
        use crate::reduce::{encode_text, ReduceConfig, TextKind};
        use crate::score::score_pair;
        use crate::tokenizer::tokenize;
        let enc = ReferenceEncoder::new(3, 16, 1).unwrap();
        let v = vocab();
        for uni in [false, true] {
            let mut h = ReductionHeads::init(HeadDims::new(16, 8, 6, uni), 5).unwrap();
            h.w_s = vec![0.3, -0.2, 0.1, 0.4, -0.5, 0.2];
            h.gamma = 0.7;
            let p = Params::from_heads(&h);
            let (qt, pt) = ("red fish swim", "the red fish swim in the sea of fish");
            for em in [false, true] {
                let q = prepare_text(qt, &v, &enc, true).unwrap();
                let d = prepare_text(pt, &v, &enc, true).unwrap();
                let got = pair_scores(&p, &q, &d, em, false);
                let enc_q = encode_text(&tokenize(qt, &v, true), &enc.encode_tokens(&tokenize(qt, &v, true)), &h, TextKind::Query, ReduceConfig::default()).unwrap();
                let enc_p = encode_text(&tokenize(pt, &v, true), &enc.encode_tokens(&tokenize(pt, &v, true)), &h, TextKind::Passage, ReduceConfig::default()).unwrap();
                let want = score_pair(&enc_q, &enc_p, &h, em).unwrap();
                assert!((got.s_total - want.s_total).abs() < 1e-4, "uni={uni} em={em}: {got:?} vs {want:?}");
                assert!((got.s_cls - want.s_cls).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn grad_check_random_heads() {
        let (b, mut p) = batch();
        p.w_s = vec![0.2, -0.1, 0.3, 0.05, -0.25, 0.15];
        p.gamma = 0.3;
        for em in [false, true] {
            let cfg = TrainConfig {
                em,
                ..Default::default()
            };
            let r = grad_check(&p, &b, &cfg, 1e-4, 1e-3);
            assert!(r.all_passed(), "{:?}", r.failures);
            assert!(r.checked > 100);
        }
    }

    #[test]
    fn grad_check_linear_path_is_tight() {
        let (b, p) = batch();
        let cfg = TrainConfig {
            weights: LossWeights::new(1.0, 0.1, 0.0).unwrap(),
            freeze: FreezeSet::from_names(["gate", "gamma"]).unwrap(),
            ..Default::default()
        };
        let r = grad_check(&p, &b, &cfg, 1e-4, 1e-5);
        assert!(r.all_passed(), "max {} {:?}", r.max_rel_err, r.failures.first());
    }

    #[test]
    fn grad_check_excludes_exact_kink() {
        let (b, mut p) = batch();
        // With W_s = 0 every pre-activation equals b_s; put them all on the hinge.
        p.b_s = 0.0;
        let cfg = TrainConfig::default();
        let r = grad_check(&p, &b, &cfg, 1e-4, 1e-3);
        assert!(r.excluded.iter().any(|c| c.group == "b_s"));
        assert!(r.all_passed());
    }
}
