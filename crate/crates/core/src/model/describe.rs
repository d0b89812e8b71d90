use serde::Serialize;

use super::{skip_channels, ModelConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerShape {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Output shapes of the main stages for a batch of `n`, computed from the
/// configuration alone.
pub fn describe(cfg: &ModelConfig, n: usize) -> Vec<LayerShape> {
    let s = cfg.input_size;
    let ch = cfg.encoder_channels;
    let dc = cfg.decoder_channels;
    let d = cfg.transformer.hidden;
    let row = |name: &str, shape: Vec<usize>| LayerShape {
        name: name.to_string(),
        shape,
    };
    let mut rows = vec![
        row("input", vec![n, cfg.in_channels, s, s]),
        row("encoder.stem", vec![n, ch[0], s / 2, s / 2]),
        row("encoder.pool", vec![n, ch[0], s / 4, s / 4]),
        row("encoder.stage1", vec![n, ch[1], s / 4, s / 4]),
        row("encoder.stage2", vec![n, ch[2], s / 8, s / 8]),
        row("encoder.stage3", vec![n, ch[3], s / 16, s / 16]),
        row("transformer.embed", vec![n, cfg.num_tokens(), d]),
        row("transformer.norm", vec![n, cfg.num_tokens(), d]),
        row("decoder.conv_more", vec![n, dc[0], s / 16, s / 16]),
    ];
    let mut side = s / 16;
    for (i, &c) in dc.iter().enumerate() {
        side *= 2;
        let skip = skip_channels(cfg, i);
        if skip > 0 {
            let prev = if i == 0 { dc[0] } else { dc[i - 1] };
            rows.push(row(&format!("decoder.block{i}.concat"), vec![n, prev + skip, side, side]));
        }
        rows.push(row(&format!("decoder.block{i}"), vec![n, c, side, side]));
    }
    rows.push(row("heads.seg", vec![n, cfg.num_classes, s, s]));
    rows
}

/// Aligned `name  [shape]` table, one row per stage.
pub fn describe_text(cfg: &ModelConfig, n: usize) -> String {
    let rows = describe(cfg, n);
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!("{:<width$}  {:?}\n", r.name, r.shape));
    }
    out
}
