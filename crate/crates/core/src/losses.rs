//! Segmentation losses over two-class softmax outputs.
//!
//! Dice and Jaccard are averaged over classes (background included); the
//! combined losses are unweighted sums with cross-entropy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_SMOOTH: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    Jaccard,
    Ce,
    #[default]
    DiceCe,
    JaccardCe,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Dice,
        LossKind::Jaccard,
        LossKind::Ce,
        LossKind::DiceCe,
        LossKind::JaccardCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::Jaccard => "jaccard",
            LossKind::Ce => "ce",
            LossKind::DiceCe => "dice_ce",
            LossKind::JaccardCe => "jaccard_ce",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown loss '{s}' (expected one of dice, jaccard, ce, dice_ce, jaccard_ce)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub smooth: f64,
    pub class_weights: Option<[f64; 2]>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::DiceCe,
            smooth: DEFAULT_SMOOTH,
            class_weights: None,
        }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smooth > 0.0) {
            return Err(Error::Config(format!("loss smooth must be > 0, got {}", self.smooth)));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config(format!("class weights must be positive: {w:?}")));
            }
        }
        Ok(())
    }
}

/// One-hot `[N,C,H,W]` target from per-pixel labels laid out `[N,H,W]`.
pub fn one_hot(labels: &[u8], n: usize, h: usize, w: usize, classes: usize) -> Result<Tensor> {
    if labels.len() != n * h * w {
        return Err(Error::Shape(format!(
            "{} labels for a {n}×{h}×{w} batch",
            labels.len()
        )));
    }
    let mut t = Tensor::zeros(&[n, classes, h, w]);
    let hw = h * w;
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= classes {
            return Err(Error::Validation(format!("label {l} ≥ {classes} classes")));
        }
        let (b, p) = (i / hw, i % hw);
        t.data_mut()[(b * classes + l) * hw + p] = 1.0;
    }
    Ok(t)
}

/// Check that `target` is a hard one-hot encoding along axis 1.
pub fn validate_one_hot(target: &Tensor) -> Result<()> {
    let s = target.shape();
    if s.len() != 4 {
        return Err(Error::Validation(format!("target must be [N,C,H,W], got {s:?}")));
    }
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = target.data();
    for b in 0..n {
        for p in 0..hw {
            let mut total = 0.0;
            for ch in 0..c {
                let v = d[(b * c + ch) * hw + p];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Validation(format!("target value {v} is not 0 or 1")));
                }
                total += v;
            }
            if total != 1.0 {
                return Err(Error::Validation(format!(
                    "target pixel {p} of sample {b} has {total} active classes"
                )));
            }
        }
    }
    Ok(())
}

fn check_pair(g: &Graph, x: Var, target: &Tensor) -> Result<()> {
    if g.shape(x) != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            g.shape(x),
            target.shape()
        )));
    }
    validate_one_hot(target)
}

/// Per-class sums `(Σp·t, Σp, Σt)` over batch and pixels, each `[C]`.
fn overlap_terms(g: &mut Graph, probs: Var, target: &Tensor) -> Result<(Var, Var, Var)> {
    let t = g.constant(target.clone());
    let pt = g.mul(probs, t)?;
    let inter = g.reduce_sum(pt, &[0, 2, 3])?;
    let sp = g.reduce_sum(probs, &[0, 2, 3])?;
    let st = g.reduce_sum(t, &[0, 2, 3])?;
    Ok((inter, sp, st))
}

/// Soft Dice coefficient per class: `(2Σpt + s) / (Σp + Σt + s)`.
pub fn dice_coefficients(g: &mut Graph, probs: Var, target: &Tensor, smooth: f64) -> Result<Var> {
    check_pair(g, probs, target)?;
    let (inter, sp, st) = overlap_terms(g, probs, target)?;
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, smooth);
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, smooth);
    g.div(num, den)
}

/// Soft IoU per class: `(Σpt + s) / (Σp + Σt − Σpt + s)`.
pub fn jaccard_coefficients(
    g: &mut Graph,
    probs: Var,
    target: &Tensor,
    smooth: f64,
) -> Result<Var> {
    check_pair(g, probs, target)?;
    let (inter, sp, st) = overlap_terms(g, probs, target)?;
    let num = g.add_scalar(inter, smooth);
    let den = g.add(sp, st)?;
    let den = g.sub(den, inter)?;
    let den = g.add_scalar(den, smooth);
    g.div(num, den)
}

/// `1 − (weighted) class mean` of per-class coefficients.
fn one_minus_mean(g: &mut Graph, coeffs: Var, weights: Option<[f64; 2]>) -> Result<Var> {
    let c = g.shape(coeffs)[0];
    let w: Vec<f64> = match weights {
        Some(w) if c == 2 => w.to_vec(),
        Some(_) => return Err(Error::Config("class weights given for a non-binary output".into())),
        None => vec![1.0; c],
    };
    let total: f64 = w.iter().sum();
    let wv = g.constant(Tensor::new(vec![c], w.iter().map(|x| x / total).collect())?);
    let weighted = g.mul(coeffs, wv)?;
    let mean = g.sum_all(weighted);
    let neg = g.scale(mean, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

pub fn dice_loss(g: &mut Graph, probs: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let c = dice_coefficients(g, probs, target, cfg.smooth)?;
    one_minus_mean(g, c, cfg.class_weights)
}

pub fn jaccard_loss(g: &mut Graph, probs: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    let c = jaccard_coefficients(g, probs, target, cfg.smooth)?;
    one_minus_mean(g, c, cfg.class_weights)
}

/// Mean over pixels of `−log softmax(logits)[target]`, via log-sum-exp.
/// With class weights this is the weighted mean `Σ w_y·ℓ / Σ w_y`.
pub fn cross_entropy(g: &mut Graph, logits: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    check_pair(g, logits, target)?;
    let s = target.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let logp = g.log_softmax(logits, 1)?;
    let (coef, norm) = match cfg.class_weights {
        None => (target.clone(), (n * hw) as f64),
        Some(w) => {
            if c != 2 {
                return Err(Error::Config("class weights given for a non-binary output".into()));
            }
            let mut t = target.clone();
            let mut norm = 0.0;
            for b in 0..n {
                for ch in 0..c {
                    for v in &mut t.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                        *v *= w[ch];
                        norm += *v;
                    }
                }
            }
            (t, norm)
        }
    };
    let tc = g.constant(coef);
    let picked = g.mul(logp, tc)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / norm))
}

/// Loss of the configured kind from raw logits `[N,2,H,W]`.
pub fn combined(g: &mut Graph, logits: Var, target: &Tensor, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let overlap = |g: &mut Graph, dice: bool| -> Result<Var> {
        let probs = g.softmax(logits, 1)?;
        if dice {
            dice_loss(g, probs, target, cfg)
        } else {
            jaccard_loss(g, probs, target, cfg)
        }
    };
    match cfg.kind {
        LossKind::Dice => overlap(g, true),
        LossKind::Jaccard => overlap(g, false),
        LossKind::Ce => cross_entropy(g, logits, target, cfg),
        LossKind::DiceCe => {
            let d = overlap(g, true)?;
            let ce = cross_entropy(g, logits, target, cfg)?;
            g.add(d, ce)
        }
        LossKind::JaccardCe => {
            let j = overlap(g, false)?;
            let ce = cross_entropy(g, logits, target, cfg)?;
            g.add(j, ce)
        }
    }
}
