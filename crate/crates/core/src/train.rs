//! Adam, the step learning-rate schedule and two-phase training with the
//! optional domain-generalisation switches (weighted sampling, stain
//! augmentation, domain-adversarial head).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentPolicy};
use crate::error::{Error, Result};
use crate::losses::{combined, one_hot, LossConfig};
use crate::model::{images_to_batch, Mode, ParamGroup, Pass, TransUnet};
use crate::morph::Mask;
use crate::stain::{augment_stain, StainAugmentConfig};
use crate::synth::DatasetLayout;
use crate::tensor::{Graph, Tensor, Var};
use crate::wsi::{weighted_sample, ManifestRow, TileLabel, TileSpec, WsiPyramid};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments, allocated lazily per parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Names that have moment buffers.
    pub fn allocated(&self) -> impl Iterator<Item = &str> {
        self.m.keys().map(String::as_str)
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Validation(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Validation(format!(
                    "{name}: gradient shape {:?} vs parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgFlags {
    /// Weighted sampling by (scanner, label) stratum.
    pub ws: bool,
    /// Stain augmentation.
    pub sa: bool,
    /// Domain-adversarial head on the Transformer output.
    pub da: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaConfig {
    pub hidden: usize,
    /// Weight of the domain loss relative to the segmentation loss.
    pub weight: f64,
    /// Steepness of the reversal-strength ramp.
    pub gamma: f64,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            weight: 1.0,
            gamma: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub lr_hi: f64,
    pub lr_lo: f64,
    pub decay_epoch: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
    pub dg: DgFlags,
    pub da: DaConfig,
    pub stain: StainAugmentConfig,
    pub augment: AugmentPolicy,
    /// Fraction of slides held out for validation.
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 20,
            phase2_epochs: 30,
            lr_hi: 1e-4,
            lr_lo: 1e-5,
            decay_epoch: 10,
            batch_size: 4,
            loss: LossConfig::default(),
            dg: DgFlags::default(),
            da: DaConfig::default(),
            stain: StainAugmentConfig::default(),
            augment: AugmentPolicy::default(),
            val_frac: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.phase1_epochs == 0 || self.phase2_epochs == 0 {
            errs.push("both phases need at least one epoch".to_string());
        }
        if self.decay_epoch >= self.phase1_epochs || self.decay_epoch >= self.phase2_epochs {
            errs.push(format!(
                "decay epoch {} must be below both phase lengths ({}, {})",
                self.decay_epoch, self.phase1_epochs, self.phase2_epochs
            ));
        }
        if !(self.lr_hi > self.lr_lo && self.lr_lo > 0.0) {
            errs.push(format!("need lr_hi > lr_lo > 0, got {} and {}", self.lr_hi, self.lr_lo));
        }
        if self.batch_size == 0 {
            errs.push("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            errs.push(format!("val_frac {} outside [0, 1)", self.val_frac));
        }
        if self.dg.da && (self.da.hidden == 0 || !(self.da.weight >= 0.0)) {
            errs.push("domain head needs hidden > 0 and weight ≥ 0".into());
        }
        if let Err(e) = self.loss.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.stain.validate() {
            errs.push(e.to_string());
        }
        if let Err(e) = self.augment.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// Learning rate for a zero-based epoch within a phase.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_epoch {
        cfg.lr_hi
    } else {
        cfg.lr_lo
    }
}

/// Reversal strength `2/(1+exp(−γp))−1` at training progress `p`.
pub fn da_lambda(progress: f64, gamma: f64) -> f64 {
    2.0 / (1.0 + (-gamma * progress).exp()) - 1.0
}

/// One training patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    /// Per-pixel class labels 0/1.
    pub mask: GrayImage,
    pub slide: String,
    pub scanner: String,
    pub label: TileLabel,
}

fn crop_mask(m: &Mask, t: &TileSpec) -> GrayImage {
    GrayImage::from_fn(t.size as u32, t.size as u32, |x, y| {
        let (cx, cy) = (t.x + x as usize, t.y + y as usize);
        Luma([(cx < m.width && cy < m.height && m.get(cx, cy)) as u8])
    })
}

/// Read every manifest tile and its ground-truth crop.
pub fn load_samples(rows: &[ManifestRow], layout: &DatasetLayout) -> Result<Vec<Sample>> {
    let mut slides: HashMap<&str, (WsiPyramid, Mask)> = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        if !slides.contains_key(r.slide.as_str()) {
            let p = WsiPyramid::open(&layout.slide(&r.slide))?;
            let gt = Mask::load_png(&layout.gt_mask(&r.slide))?;
            if (gt.width, gt.height) != p.canvas_extent(r.tile.mpp) {
                return Err(Error::Validation(format!(
                    "ground truth for {} is {}×{}, canvas is {:?}",
                    r.slide,
                    gt.width,
                    gt.height,
                    p.canvas_extent(r.tile.mpp)
                )));
            }
            slides.insert(&r.slide, (p, gt));
        }
        let (p, gt) = &slides[r.slide.as_str()];
        out.push(Sample {
            image: p.read_tile(&r.tile)?,
            mask: crop_mask(gt, &r.tile),
            slide: r.slide.clone(),
            scanner: r.scanner.clone(),
            label: r.label,
        });
    }
    Ok(out)
}

/// Hold out whole slides, `ceil(frac · n)` from the slides with dysplastic
/// patches and likewise from the rest, never emptying either group.
pub fn split_by_slide(samples: Vec<Sample>, frac: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut groups: [BTreeSet<String>; 2] = Default::default();
    for s in &samples {
        groups[0].insert(s.slide.clone());
    }
    for s in &samples {
        if s.label == TileLabel::Dysplastic {
            groups[0].remove(&s.slide);
            groups[1].insert(s.slide.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = BTreeSet::new();
    for g in groups {
        let mut ids: Vec<String> = g.into_iter().collect();
        let n_val = if ids.len() < 2 || frac <= 0.0 {
            0
        } else {
            ((frac * ids.len() as f64).ceil() as usize).min(ids.len() - 1)
        };
        ids.shuffle(&mut rng);
        val.extend(ids.into_iter().take(n_val));
    }
    samples.into_iter().partition(|s| !val.contains(&s.slide))
}

fn sample_rows(samples: &[Sample]) -> Vec<ManifestRow> {
    samples
        .iter()
        .map(|s| ManifestRow {
            slide: s.slide.clone(),
            scanner: s.scanner.clone(),
            tile: TileSpec {
                x: 0,
                y: 0,
                size: s.image.width() as usize,
                mpp: 1.0,
                padded: false,
            },
            label: s.label,
            tissue_frac: 1.0,
            positive_frac: 0.0,
        })
        .collect()
}

fn mask_batch(masks: &[&GrayImage]) -> Result<Tensor> {
    let (w, h) = masks[0].dimensions();
    let labels: Vec<u8> = masks.iter().flat_map(|m| m.as_raw().iter().copied()).collect();
    one_hot(&labels, masks.len(), h as usize, w as usize, 2)
}

/// Domain classifier on mean-pooled tokens behind a gradient reversal.
/// Returns mean cross-entropy against `domains`.
pub fn domain_loss(p: &mut Pass, tokens: Var, domains: &[usize], lambda: f64) -> Result<Var> {
    let pooled = p.g.reduce_mean(tokens, &[1])?;
    let rev = p.g.gradient_reversal(pooled, lambda);
    let (w1, b1) = (p.params.get("heads.domain.fc1.weight"), p.params.get("heads.domain.fc1.bias"));
    let (w2, b2) = (p.params.get("heads.domain.fc2.weight"), p.params.get("heads.domain.fc2.bias"));
    let h = p.g.linear(rev, w1, Some(b1))?;
    let h = p.g.relu(h);
    let logits = p.g.linear(h, w2, Some(b2))?;
    let k = p.g.shape(logits)[1];
    let n = domains.len();
    let mut onehot = Tensor::zeros(&[n, k]);
    for (i, &d) in domains.iter().enumerate() {
        if d >= k {
            return Err(Error::Validation(format!("domain {d} ≥ {k} classes")));
        }
        onehot.data_mut()[i * k + d] = 1.0;
    }
    let logp = p.g.log_softmax(logits, 1)?;
    let t = p.g.constant(onehot);
    let picked = p.g.mul(logp, t)?;
    let s = p.g.sum_all(picked);
    Ok(p.g.scale(s, -1.0 / n as f64))
}

/// Which parameters a phase updates.
pub fn phase_trainable(phase: usize, name: &str) -> bool {
    phase == 2 || matches!(ParamGroup::of(name), ParamGroup::Decoder | ParamGroup::Heads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: usize,
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub da_lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Optimizer updates per phase.
    pub steps: [usize; 2],
    /// Parameters holding Adam moments at the end of each phase.
    pub moments: [usize; 2],
    pub domains: Vec<String>,
}

struct StepOutcome {
    loss: f64,
    domain: Option<f64>,
}

/// Seed for one sample's augmentation draws.
fn sample_seed(seed: u64, phase: usize, epoch: usize, pos: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [phase as u64, epoch as u64, pos as u64] {
        h = (h ^ v).wrapping_mul(0x1000_0000_01b3).rotate_left(29);
    }
    h
}

fn prepare(
    s: &Sample,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(RgbImage, GrayImage)> {
    let mut img = s.image.clone();
    if cfg.dg.sa {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(2);
        img = augment_stain(&img, &cfg.stain, &mut r);
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    augment::apply(&cfg.augment, &img, &s.mask, &mut r)
}

fn train_step(
    model: &mut TransUnet,
    batch: &[(RgbImage, GrayImage, usize)],
    phase: usize,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    lr: f64,
    lambda: Option<f64>,
) -> Result<StepOutcome> {
    let imgs: Vec<&RgbImage> = batch.iter().map(|b| &b.0).collect();
    let masks: Vec<&GrayImage> = batch.iter().map(|b| &b.1).collect();
    let x_val = images_to_batch(&imgs)?;
    let target = mask_batch(&masks)?;
    let mut g = Graph::new();
    let mut p = model.pass(&mut g, |n| phase_trainable(phase, n));
    let x = p.g.constant(x_val);
    let out = model.forward(&mut p, x)?;
    let seg = combined(p.g, out.logits, &target, &cfg.loss)?;
    let (total, dom) = match lambda {
        Some(l) => {
            let domains: Vec<usize> = batch.iter().map(|b| b.2).collect();
            let d = domain_loss(&mut p, out.tokens, &domains, l)?;
            let dw = p.g.scale(d, cfg.da.weight);
            (p.g.add(seg, dw)?, Some(d))
        }
        None => (seg, None),
    };
    let bn_stats = std::mem::take(&mut p.bn_stats);
    let bound: Vec<(String, Var)> = p
        .params
        .iter()
        .filter(|(n, _)| phase_trainable(phase, n))
        .map(|(n, v)| (n.to_string(), v))
        .collect();
    let loss = g.value(total).item();
    let domain = dom.map(|d| g.value(d).item());
    let mut grads_raw = g.backward(total)?;
    let grads: BTreeMap<String, Tensor> = bound
        .into_iter()
        .filter_map(|(n, v)| grads_raw.take(v).map(|t| (n, t)))
        .collect();
    adam.step(model.params_mut(), &grads, lr)?;
    model.update_running_stats(&bn_stats);
    Ok(StepOutcome { loss, domain })
}

/// Mean training objective over `samples` without updating anything.
pub fn mean_loss(model: &TransUnet, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let imgs: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        let masks: Vec<&GrayImage> = chunk.iter().map(|s| &s.mask).collect();
        let mut g = Graph::new();
        let mut p = model.pass(&mut g, |_| false);
        let x = p.g.constant(images_to_batch(&imgs)?);
        let out = model.forward(&mut p, x)?;
        let l = combined(p.g, out.logits, &mask_batch(&masks)?, &cfg.loss)?;
        total += g.value(l).item() * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Pooled foreground-pixel F1 of eval-mode predictions (`prob > 0.5`).
pub fn pixel_f1(model: &TransUnet, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let imgs: Vec<&RgbImage> = chunk.iter().map(|s| &s.image).collect();
        let probs = model.predict_foreground(&images_to_batch(&imgs)?)?;
        let truth = chunk.iter().flat_map(|s| s.mask.as_raw().iter());
        for (&pr, &t) in probs.data().iter().zip(truth) {
            match (pr > 0.5, t != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Two-phase training: decoder and heads first with the encoder and
/// Transformer frozen, then the whole network, each phase with a fresh
/// optimizer and its own pass through the learning-rate schedule.
///
/// Metrics go to `out/metrics.jsonl` and checkpoints to
/// `out/phase{1,2}.ckpt` when `out` is given.
pub fn two_phase_train(
    model: &mut TransUnet,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let domains: Vec<String> = train
        .iter()
        .map(|s| s.scanner.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if cfg.dg.da {
        if domains.len() < 2 {
            return Err(Error::Config(format!(
                "domain-adversarial training needs at least two scanners, found {domains:?}"
            )));
        }
        if !model.has_domain_head() {
            model.add_domain_head(cfg.da.hidden, domains.len(), cfg.seed ^ 0xda);
        }
    }
    let domain_of: HashMap<&str, usize> = domains.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let rows = sample_rows(train);
    let n = train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.phase1_epochs + cfg.phase2_epochs) * per_epoch;
    let mut metrics = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };

    let mut report = TrainReport {
        records: Vec::new(),
        steps: [0, 0],
        moments: [0, 0],
        domains: domains.clone(),
    };
    let mut global = 0usize;
    for phase in [1usize, 2] {
        let epochs = if phase == 1 { cfg.phase1_epochs } else { cfg.phase2_epochs };
        let mut adam = AdamState::new();
        for epoch in 0..epochs {
            let lr = lr_at(epoch, cfg);
            let mut order_rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, phase, epoch, usize::MAX));
            let order: Vec<usize> = if cfg.dg.ws {
                weighted_sample(&rows, &mut order_rng, n)?
            } else {
                let mut o: Vec<usize> = (0..n).collect();
                o.shuffle(&mut order_rng);
                o
            };
            model.set_mode(Mode::Train);
            let (mut loss_sum, mut dom_sum) = (0.0, 0.0);
            let mut last_lambda = None;
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<(RgbImage, GrayImage, usize)> = idx
                    .par_iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        let s = &train[i];
                        let seed = sample_seed(cfg.seed, phase, epoch, b * cfg.batch_size + k);
                        let (img, mask) = prepare(s, cfg, seed)?;
                        Ok((img, mask, domain_of[s.scanner.as_str()]))
                    })
                    .collect::<Result<_>>()?;
                let lambda = cfg
                    .dg
                    .da
                    .then(|| da_lambda(global as f64 / total_steps as f64, cfg.da.gamma));
                let r = train_step(model, &batch, phase, cfg, &mut adam, lr, lambda)?;
                loss_sum += r.loss * idx.len() as f64;
                dom_sum += r.domain.unwrap_or(0.0) * idx.len() as f64;
                last_lambda = lambda;
                global += 1;
                report.steps[phase - 1] += 1;
            }
            model.set_mode(Mode::Eval);
            let val_f1 = if val.is_empty() {
                None
            } else {
                Some(pixel_f1(model, val, cfg.batch_size)?)
            };
            model.set_mode(Mode::Train);
            let rec = EpochRecord {
                phase,
                epoch,
                loss: loss_sum / n as f64,
                val_f1,
                lr,
                domain_loss: cfg.dg.da.then_some(dom_sum / n as f64),
                da_lambda: last_lambda,
            };
            log::info!(
                "phase {phase} epoch {epoch}: loss {:.4} val_f1 {:?} lr {lr:e}",
                rec.loss,
                rec.val_f1
            );
            if let Some(w) = metrics.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
                w.flush()?;
            }
            report.records.push(rec);
        }
        report.moments[phase - 1] = adam.allocated().count();
        if let Some(dir) = out {
            model.save(&dir.join(format!("phase{phase}.ckpt")))?;
        }
    }
    model.set_mode(Mode::Eval);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_resets_per_phase() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-4);
        assert_eq!(lr_at(9, &cfg), 1e-4);
        assert_eq!(lr_at(10, &cfg), 1e-5);
        assert_eq!(lr_at(29, &cfg), 1e-5);
    }

    #[test]
    fn default_config_is_valid_and_decay_is_checked() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            phase1_epochs: 5,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[3]))]);
        let mut a = AdamState::new();
        assert!(matches!(a.step(&mut params, &grads, 0.1), Err(Error::Validation(_))));
        assert_eq!(a.step, 0);
    }
}
