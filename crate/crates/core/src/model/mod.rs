//! TransUNet-style hybrid segmentation network.
//!
//! A ResNet-style CNN encodes the input to 1/16 resolution while keeping
//! feature maps at 1/2, 1/4 and 1/8 as skips. Each site of the 1/16 map is
//! linearly embedded as one token (1×1 patches) and passed through pre-norm
//! Transformer blocks. A cascaded upsampler then decodes back to full size,
//! concatenating the skips on the way up.

mod config;
mod describe;

pub use config::{ModelConfig, TransformerConfig};
pub use describe::{describe, describe_text, LayerShape};

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::BatchStats;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Transformer,
    Decoder,
    Heads,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        match name.split('.').next() {
            Some("encoder") => ParamGroup::Encoder,
            Some("transformer") => ParamGroup::Transformer,
            Some("decoder") => ParamGroup::Decoder,
            Some("heads") => ParamGroup::Heads,
            _ => unreachable!("parameter {name} has no group prefix"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters placed on a graph for one forward pass.
#[derive(Debug, Default)]
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Graph, bound parameters and side outputs of one forward pass.
pub struct Pass<'g> {
    pub g: &'g mut Graph,
    pub params: Binding,
    pub mode: Mode,
    /// Batch statistics of every train-mode batch norm, by layer name.
    pub bn_stats: Vec<(String, BatchStats)>,
    /// Stage output shapes, in the order [`describe`] lists them.
    pub trace: Vec<LayerShape>,
}

impl Pass<'_> {
    fn record(&mut self, name: &str, v: Var) {
        self.trace.push(LayerShape {
            name: name.to_string(),
            shape: self.g.shape(v).to_vec(),
        });
    }
}

pub struct Encoded {
    /// Top feature map `[N, c3, S/16, S/16]`.
    pub features: Var,
    /// Skips at 1/2, 1/4, 1/8 scale (in that order).
    pub skips: [Var; 3],
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Transformer output tokens `[N, T, D]`.
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct TransUnet {
    cfg: ModelConfig,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    mode: Mode,
}

struct Init {
    rng: ChaCha8Rng,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl Init {
    /// He-uniform: U(−√(6/fan_in), √(6/fan_in)).
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.params.insert(name, t);
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) {
        self.params.insert(name, Tensor::full(shape, v));
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, bias: bool) {
        self.he(format!("{name}.weight"), &[cout, cin, k, k], cin * k * k);
        if bias {
            self.fill(format!("{name}.bias"), &[cout], 0.0);
        }
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize, bias: bool) {
        self.he(format!("{name}.weight"), &[cin, cout], cin);
        if bias {
            self.fill(format!("{name}.bias"), &[cout], 0.0);
        }
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.fill(format!("{name}.gamma"), &[c], 1.0);
        self.fill(format!("{name}.beta"), &[c], 0.0);
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        self.buffers.insert(format!("{name}.running_var"), Tensor::ones(&[c]));
    }

    fn ln(&mut self, name: &str, d: usize) {
        self.fill(format!("{name}.gamma"), &[d], 1.0);
        self.fill(format!("{name}.beta"), &[d], 0.0);
    }
}

/// Residual blocks of encoder stage `s` (1-based): `(name, cin, cout, stride, projection)`.
pub(crate) fn stage_blocks(cfg: &ModelConfig, s: usize) -> Vec<(String, usize, usize, usize, bool)> {
    let ch = cfg.encoder_channels;
    let (cin, cout) = (ch[s - 1], ch[s]);
    let stride = if s == 1 { 1 } else { 2 };
    (0..cfg.blocks_per_stage[s - 1])
        .map(|j| {
            let name = format!("encoder.stage{s}.block{j}");
            if j == 0 {
                (name, cin, cout, stride, cin != cout || stride != 1)
            } else {
                (name, cout, cout, 1, false)
            }
        })
        .collect()
}

/// First-conv kernel of a residual block. Strided blocks use 4×4 (pad 1) so
/// every even extent halves exactly; the projection shortcut is then a
/// `stride × stride` conv with the same stride.
pub(crate) fn block_kernel(stride: usize) -> usize {
    if stride == 2 {
        4
    } else {
        3
    }
}

/// Input channels of decoder stage `i` (0-based), including its skip.
pub(crate) fn decoder_inputs(cfg: &ModelConfig, i: usize) -> (usize, usize) {
    let prev = if i == 0 {
        cfg.decoder_channels[0]
    } else {
        cfg.decoder_channels[i - 1]
    };
    (prev, skip_channels(cfg, i))
}

/// Channels of the skip concatenated at decoder stage `i`, 0 if none.
pub(crate) fn skip_channels(cfg: &ModelConfig, i: usize) -> usize {
    // stage 0 → 1/8 skip, 1 → 1/4, 2 → 1/2, 3 → none
    if i < 3 && i < cfg.n_skip {
        cfg.encoder_channels[2 - i]
    } else {
        0
    }
}

impl TransUnet {
    /// Deterministic He-uniform initialization from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        };
        let ch = cfg.encoder_channels;
        let t = &cfg.transformer;

        init.conv("encoder.stem.conv", ch[0], cfg.in_channels, cfg.stem_kernel, false);
        init.bn("encoder.stem.bn", ch[0]);
        for s in 1..=3 {
            for (name, cin, cout, stride, proj) in stage_blocks(&cfg, s) {
                init.conv(&format!("{name}.conv1"), cout, cin, block_kernel(stride), false);
                init.bn(&format!("{name}.bn1"), cout);
                init.conv(&format!("{name}.conv2"), cout, cout, 3, false);
                init.bn(&format!("{name}.bn2"), cout);
                if proj {
                    init.conv(&format!("{name}.down.conv"), cout, cin, stride, false);
                    init.bn(&format!("{name}.down.bn"), cout);
                }
            }
        }

        init.linear("transformer.embed", ch[3], t.hidden, true);
        init.fill("transformer.pos".into(), &[cfg.num_tokens(), t.hidden], 0.0);
        for l in 0..t.layers {
            let p = format!("transformer.layer{l}");
            init.ln(&format!("{p}.ln1"), t.hidden);
            for w in ["wq", "wk", "wv", "wo"] {
                init.he(format!("{p}.attn.{w}"), &[t.hidden, t.hidden], t.hidden);
            }
            init.ln(&format!("{p}.ln2"), t.hidden);
            init.linear(&format!("{p}.mlp.fc1"), t.hidden, t.mlp_dim, true);
            init.linear(&format!("{p}.mlp.fc2"), t.mlp_dim, t.hidden, true);
        }
        init.ln("transformer.norm", t.hidden);

        let dc = cfg.decoder_channels;
        init.conv("decoder.conv_more", dc[0], t.hidden, 3, false);
        init.bn("decoder.conv_more.bn", dc[0]);
        for i in 0..4 {
            let (prev, skip) = decoder_inputs(&cfg, i);
            let p = format!("decoder.block{i}");
            init.conv(&format!("{p}.conv1"), dc[i], prev + skip, 3, false);
            init.bn(&format!("{p}.bn1"), dc[i]);
            init.conv(&format!("{p}.conv2"), dc[i], dc[i], 3, false);
            init.bn(&format!("{p}.bn2"), dc[i]);
        }
        init.conv("heads.seg", cfg.num_classes, dc[3], 1, true);

        Ok(Self {
            cfg,
            params: init.params,
            buffers: init.buffers,
            mode: Mode::Train,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn names_in(&self, group: ParamGroup) -> impl Iterator<Item = &str> {
        self.params
            .keys()
            .map(String::as_str)
            .filter(move |n| ParamGroup::of(n) == group)
    }

    /// Add a domain classifier (`hidden` units, `domains` outputs) to the heads group.
    pub fn add_domain_head(&mut self, hidden: usize, domains: usize, seed: u64) {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        };
        init.linear("heads.domain.fc1", self.cfg.transformer.hidden, hidden, true);
        init.linear("heads.domain.fc2", hidden, domains, true);
        self.params.extend(init.params);
    }

    pub fn has_domain_head(&self) -> bool {
        self.params.contains_key("heads.domain.fc1.weight")
    }

    /// Place every parameter on `g`; `trainable` decides which ones require grad.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
            .collect();
        Binding { vars }
    }

    pub fn pass<'g>(&self, g: &'g mut Graph, trainable: impl Fn(&str) -> bool) -> Pass<'g> {
        let params = self.bind(g, trainable);
        Pass {
            g,
            params,
            mode: self.mode,
            bn_stats: Vec::new(),
            trace: Vec::new(),
        }
    }

    fn bn(&self, p: &mut Pass, name: &str, x: Var) -> Result<Var> {
        let gamma = p.params.get(&format!("{name}.gamma"));
        let beta = p.params.get(&format!("{name}.beta"));
        match p.mode {
            Mode::Train => {
                let (y, stats) = p.g.batch_norm2d_train(x, gamma, beta, BN_EPS)?;
                p.bn_stats.push((name.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => p.g.batch_norm2d_eval(
                x,
                gamma,
                beta,
                self.buffers[&format!("{name}.running_mean")].data(),
                self.buffers[&format!("{name}.running_var")].data(),
                BN_EPS,
            ),
        }
    }

    fn conv(&self, p: &mut Pass, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = p.params.get(&format!("{name}.weight"));
        let b = p.params.vars.get(&format!("{name}.bias")).copied();
        p.g.conv2d(x, w, b, stride, pad)
    }

    fn conv_bn_relu(&self, p: &mut Pass, conv: &str, bn: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(p, conv, x, stride, 1)?;
        let y = self.bn(p, bn, y)?;
        Ok(p.g.relu(y))
    }

    fn check_input(&self, p: &Pass, x: Var) -> Result<()> {
        let s = p.g.shape(x);
        let want = self.cfg.input_size;
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != want || s[3] != want {
            return Err(Error::Shape(format!(
                "model expects [N, {}, {want}, {want}], got {s:?}",
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// CNN feature extractor.
    pub fn encode(&self, p: &mut Pass, x: Var) -> Result<Encoded> {
        self.check_input(p, x)?;
        let k = self.cfg.stem_kernel;
        let y = self.conv(p, "encoder.stem.conv", x, 1, k / 2)?;
        let y = self.bn(p, "encoder.stem.bn", y)?;
        let y = p.g.relu(y);
        let half = p.g.max_pool2d(y, 2, 2, 0)?;
        p.record("encoder.stem", half);
        let mut y = p.g.max_pool2d(half, 2, 2, 0)?;
        p.record("encoder.pool", y);
        let mut outs = Vec::with_capacity(3);
        for s in 1..=3 {
            for (name, _, _, stride, proj) in stage_blocks(&self.cfg, s) {
                let h = self.conv_bn_relu(p, &format!("{name}.conv1"), &format!("{name}.bn1"), y, stride)?;
                let h = self.conv(p, &format!("{name}.conv2"), h, 1, 1)?;
                let h = self.bn(p, &format!("{name}.bn2"), h)?;
                let shortcut = if proj {
                    let d = self.conv(p, &format!("{name}.down.conv"), y, stride, 0)?;
                    self.bn(p, &format!("{name}.down.bn"), d)?
                } else {
                    y
                };
                let sum = p.g.add(h, shortcut)?;
                y = p.g.relu(sum);
            }
            p.record(&format!("encoder.stage{s}"), y);
            outs.push(y);
        }
        Ok(Encoded {
            features: outs[2],
            skips: [half, outs[0], outs[1]],
        })
    }

    /// 1×1 patch embedding: a linear map per feature-map site plus a learned
    /// positional embedding. Token `k` is site `(k / grid, k % grid)`.
    pub fn embed_patches(&self, p: &mut Pass, features: Var) -> Result<Var> {
        let s = p.g.shape(features).to_vec();
        let (grid, c3, d) = (self.cfg.grid(), self.cfg.encoder_channels[3], self.cfg.transformer.hidden);
        if s.len() != 4 || s[1] != c3 || s[2] != grid || s[3] != grid {
            return Err(Error::Shape(format!(
                "patch embedding expects [N, {c3}, {grid}, {grid}], got {s:?}"
            )));
        }
        let n = s[0];
        let t = grid * grid;
        let sites = p.g.permute(features, &[0, 2, 3, 1])?;
        let sites = p.g.reshape(sites, &[n, t, c3])?;
        let w = p.params.get("transformer.embed.weight");
        let b = p.params.get("transformer.embed.bias");
        let tokens = p.g.linear(sites, w, Some(b))?;
        let flat = p.g.reshape(tokens, &[n, t * d])?;
        let pos = p.params.get("transformer.pos");
        let pos = p.g.reshape(pos, &[t * d])?;
        let with_pos = p.g.add_bias(flat, pos)?;
        p.g.reshape(with_pos, &[n, t, d])
    }

    /// One pre-norm block: `x + MSA(LN(x))`, then `+ MLP(LN(·))`.
    pub fn transformer_block(&self, p: &mut Pass, layer: usize, x: Var) -> Result<Var> {
        let pre = format!("transformer.layer{layer}");
        let ln = |p: &mut Pass, name: &str, x: Var| -> Result<Var> {
            let gamma = p.params.get(&format!("{name}.gamma"));
            let beta = p.params.get(&format!("{name}.beta"));
            p.g.layer_norm(x, gamma, beta, LN_EPS)
        };
        let h = ln(p, &format!("{pre}.ln1"), x)?;
        let [wq, wk, wv, wo] = ["wq", "wk", "wv", "wo"].map(|w| p.params.get(&format!("{pre}.attn.{w}")));
        let att = p.g.multi_head_attention(h, wq, wk, wv, wo, self.cfg.transformer.heads)?;
        let x = p.g.add(x, att.out)?;
        let h = ln(p, &format!("{pre}.ln2"), x)?;
        let (w1, b1) = (p.params.get(&format!("{pre}.mlp.fc1.weight")), p.params.get(&format!("{pre}.mlp.fc1.bias")));
        let (w2, b2) = (p.params.get(&format!("{pre}.mlp.fc2.weight")), p.params.get(&format!("{pre}.mlp.fc2.bias")));
        let h = p.g.linear(h, w1, Some(b1))?;
        let h = p.g.gelu(h);
        let h = p.g.linear(h, w2, Some(b2))?;
        p.g.add(x, h)
    }

    /// All Transformer layers followed by the final layer norm.
    pub fn transformer(&self, p: &mut Pass, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for l in 0..self.cfg.transformer.layers {
            x = self.transformer_block(p, l, x)?;
        }
        let gamma = p.params.get("transformer.norm.gamma");
        let beta = p.params.get("transformer.norm.beta");
        p.g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Cascaded upsampler: tokens back to a `grid×grid` map, four ×2 stages
    /// (the first three concatenating skips at 1/8, 1/4, 1/2), then a 1×1
    /// segmentation head.
    pub fn decode(&self, p: &mut Pass, tokens: Var, skips: &[Var; 3]) -> Result<Var> {
        let s = p.g.shape(tokens).to_vec();
        let (grid, d) = (self.cfg.grid(), self.cfg.transformer.hidden);
        if s.len() != 3 || s[1] != grid * grid || s[2] != d {
            return Err(Error::Shape(format!(
                "decoder expects tokens [N, {}, {d}], got {s:?}",
                grid * grid
            )));
        }
        let n = s[0];
        let map = p.g.reshape(tokens, &[n, grid, grid, d])?;
        let map = p.g.permute(map, &[0, 3, 1, 2])?;
        let mut y = self.conv_bn_relu(p, "decoder.conv_more", "decoder.conv_more.bn", map, 1)?;
        p.record("decoder.conv_more", y);
        for i in 0..4 {
            y = p.g.upsample_bilinear2x(y)?;
            if skip_channels(&self.cfg, i) > 0 {
                let skip = skips[2 - i];
                let (ys, ss) = (p.g.shape(y).to_vec(), p.g.shape(skip).to_vec());
                let want_c = skip_channels(&self.cfg, i);
                if ss.len() != 4 || ss[0] != ys[0] || ss[1] != want_c || ss[2..] != ys[2..] {
                    return Err(Error::Shape(format!(
                        "decoder stage {}: skip {ss:?} does not match upsampled {ys:?} with {want_c} channels",
                        i + 1
                    )));
                }
                y = p.g.concat(&[y, skip], 1)?;
                p.record(&format!("decoder.block{i}.concat"), y);
            }
            let pre = format!("decoder.block{i}");
            y = self.conv_bn_relu(p, &format!("{pre}.conv1"), &format!("{pre}.bn1"), y, 1)?;
            y = self.conv_bn_relu(p, &format!("{pre}.conv2"), &format!("{pre}.bn2"), y, 1)?;
            p.record(&pre, y);
        }
        let logits = self.conv(p, "heads.seg", y, 1, 0)?;
        p.record("heads.seg", logits);
        Ok(logits)
    }

    pub fn forward(&self, p: &mut Pass, x: Var) -> Result<ForwardOutput> {
        p.record("input", x);
        let enc = self.encode(p, x)?;
        let tokens = self.embed_patches(p, enc.features)?;
        p.record("transformer.embed", tokens);
        let tokens = self.transformer(p, tokens)?;
        p.record("transformer.norm", tokens);
        let logits = self.decode(p, tokens, &enc.skips)?;
        Ok(ForwardOutput { logits, tokens })
    }

    /// Eval-mode logits for a batch, without recording gradients.
    pub fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut p = Pass {
            params: self.bind(&mut g, |_| false),
            g: &mut g,
            mode: Mode::Eval,
            bn_stats: Vec::new(),
            trace: Vec::new(),
        };
        let x = p.g.constant(batch.clone());
        let out = self.forward(&mut p, x)?;
        Ok(g.value(out.logits).clone())
    }

    /// Eval-mode class-1 probability maps, `[N, S, S]` flattened.
    pub fn predict_foreground(&self, batch: &Tensor) -> Result<Tensor> {
        let logits = self.predict_logits(batch)?;
        let s = logits.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let d = logits.data();
        let mut out = Vec::with_capacity(n * hw);
        for b in 0..n {
            for i in 0..hw {
                let max = (0..c).map(|k| d[(b * c + k) * hw + i]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|k| (d[(b * c + k) * hw + i] - max).exp()).sum();
                out.push((d[(b * c + 1) * hw + i] - max).exp() / z);
            }
        }
        Tensor::new(vec![n, s[2], s[3]], out)
    }

    /// Fold train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (name, st) in stats {
            let m = self.buffers.get_mut(&format!("{name}.running_mean")).expect("bn buffer");
            for (r, &b) in m.data_mut().iter_mut().zip(&st.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            let v = self.buffers.get_mut(&format!("{name}.running_var")).expect("bn buffer");
            for (r, &b) in v.data_mut().iter_mut().zip(&st.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    /// Entries written to a checkpoint: segmentation parameters and BN buffers.
    /// The training-only domain head is not persisted.
    fn checkpoint_entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter(|(k, _)| !k.starts_with("heads.domain."))
            .chain(&self.buffers)
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        write_checkpoint(f, self.checkpoint_entries())
    }

    /// Replace weights with checkpoint contents; names and shapes must match exactly.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let entries = read_checkpoint(BufReader::new(File::open(path)?))?;
        let mut seen = 0usize;
        let expected = self.checkpoint_entries().count();
        for (name, t) in entries {
            let slot = self
                .params
                .get_mut(&name)
                .or_else(|| self.buffers.get_mut(&name))
                .ok_or_else(|| Error::Checkpoint(format!("unexpected entry {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?} vs model {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            seen += 1;
        }
        if seen != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {seen} of {expected} model entries"
            )));
        }
        Ok(())
    }

    pub fn load(cfg: ModelConfig, path: &Path) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        m.load_weights(path)?;
        m.set_mode(Mode::Eval);
        Ok(m)
    }
}

/// Scale RGB bytes to roughly zero-mean unit-range inputs: `(v/255 − 0.5) / 0.25`.
pub fn normalize_pixel(v: u8) -> f64 {
    (v as f64 / 255.0 - 0.5) / 0.25
}

/// Stack same-size RGB patches into a normalized `[N, 3, H, W]` batch.
pub fn images_to_batch(images: &[&RgbImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0; images.len() * 3 * h * w];
    for (b, img) in images.iter().enumerate() {
        if img.dimensions() != first.dimensions() {
            return Err(Error::Shape(format!(
                "batch mixes {:?} and {:?} images",
                first.dimensions(),
                img.dimensions()
            )));
        }
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[((b * 3 + c) * h + y as usize) * w + x as usize] = normalize_pixel(px[c]);
            }
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}
