//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use dysseg::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared on an absolute scale of
/// `rtol · GRAD_FLOOR`; pure relative error is meaningless near zero.
pub const GRAD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        // Box-Muller; keeps the oracle free of the crate's own init code
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen::<f64>();
        scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Scalar objective `Σ proj ⊙ f(inputs)` evaluated on a fresh graph.
fn objective(
    inputs: &[Tensor],
    proj: Option<&Tensor>,
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    let v = g.value(out);
    match proj {
        Some(p) => v.data().iter().zip(p.data()).map(|(a, b)| a * b).sum(),
        None => v.item(),
    }
}

/// Maximum relative error between reverse-mode gradients and central
/// differences, over every element of every input.
///
/// The output of `build` is contracted with a fixed random projection so
/// that non-scalar ops are checked on a generic linear functional.
pub fn max_grad_error(
    inputs: &[Tensor],
    seed: u64,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    let out_shape = g.shape(out).to_vec();
    let proj = if g.value(out).numel() == 1 {
        None
    } else {
        Some(randn(&mut rng(seed ^ 0x9e37_79b9), &out_shape, 1.0))
    };
    let loss = match &proj {
        Some(p) => {
            let pv = g.constant(p.clone());
            let prod = g.mul(out, pv).unwrap();
            g.sum_all(prod)
        }
        None => out,
    };
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("input received no gradient");
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (objective(&plus, proj.as_ref(), &build)
                - objective(&minus, proj.as_ref(), &build))
                / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

pub mod ops;

/// 32-px network small enough for per-test forward passes.
pub fn tiny_config() -> dysseg::model::ModelConfig {
    use dysseg::model::{ModelConfig, TransformerConfig};
    ModelConfig {
        input_size: 32,
        encoder_channels: [4, 8, 16, 32],
        decoder_channels: [16, 8, 4, 4],
        transformer: TransformerConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            mlp_dim: 32,
        },
        ..ModelConfig::toy()
    }
}

/// `n` labelled 64-px patches cut from synthetic slides, each with both
/// classes present, cycling through the default scanner profiles.
pub fn toy_patches(n: usize, seed: u64) -> Vec<dysseg::train::Sample> {
    use dysseg::synth::{default_scanners, generate, SlideSpec};
    use dysseg::wsi::TileLabel;
    use image::{GrayImage, Luma};

    let scanners = default_scanners();
    let mut out = Vec::new();
    let mut k = 0u64;
    while out.len() < n {
        let scanner = scanners[k as usize % scanners.len()].clone();
        let spec = SlideSpec {
            id: format!("toy_{k:03}"),
            width: 192,
            height: 192,
            base_mpp: 1.0,
            sections: 1,
            blobs: 1,
            positive_frac: 0.35,
            scanner,
            seed: seed.wrapping_mul(1000) + k,
        };
        let s = generate(&spec).unwrap();
        for (tx, ty) in [(32, 32), (96, 32), (32, 96), (96, 96), (64, 64)] {
            if out.len() == n {
                break;
            }
            let image = image::imageops::crop_imm(&s.base, tx, ty, 64, 64).to_image();
            let gt = &s.ground_truth.mask;
            let mask = GrayImage::from_fn(64, 64, |x, y| {
                Luma([gt.get((tx + x) as usize, (ty + y) as usize) as u8])
            });
            let pos = mask.as_raw().iter().filter(|&&v| v != 0).count();
            if !(200..=64 * 64 - 200).contains(&pos) {
                continue;
            }
            out.push(dysseg::train::Sample {
                image,
                mask,
                slide: spec.id.clone(),
                scanner: spec.scanner.name.clone(),
                label: TileLabel::Dysplastic,
            });
        }
        k += 1;
    }
    out
}
