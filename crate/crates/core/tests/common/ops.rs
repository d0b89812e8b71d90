//! Randomized gradient cases, one per differentiable tensor op.

use dysseg::{Graph, Tensor, Var};
use rand::Rng;

use super::{max_grad_error, randn, rng, uniform};

pub type OpCase = fn(u64) -> f64;

/// Random tensor whose entries stay at least `gap` away from zero so ReLU
/// kinks are never straddled by the finite-difference step.
fn away_from_zero(r: &mut impl Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.gen_range(gap..1.5);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn dims(r: &mut impl Rng, lo: usize, hi: usize) -> usize {
    r.gen_range(lo..=hi)
}

pub fn suite() -> Vec<(&'static str, OpCase)> {
    vec![
        ("add", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 4), dims(&mut r, 1, 4)];
            let (a, b) = (randn(&mut r, &sh, 1.0), randn(&mut r, &sh, 1.0));
            max_grad_error(&[a, b], s, |g, v| g.add(v[0], v[1]).unwrap())
        }),
        ("sub", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 4), dims(&mut r, 1, 4)];
            let (a, b) = (randn(&mut r, &sh, 1.0), randn(&mut r, &sh, 1.0));
            max_grad_error(&[a, b], s, |g, v| g.sub(v[0], v[1]).unwrap())
        }),
        ("mul", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 4), dims(&mut r, 1, 4)];
            let (a, b) = (randn(&mut r, &sh, 1.0), randn(&mut r, &sh, 1.0));
            max_grad_error(&[a, b], s, |g, v| g.mul(v[0], v[1]).unwrap())
        }),
        ("div", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 4), dims(&mut r, 1, 4)];
            let a = randn(&mut r, &sh, 1.0);
            let b = uniform(&mut r, &sh, 0.5, 2.0);
            max_grad_error(&[a, b], s, |g, v| g.div(v[0], v[1]).unwrap())
        }),
        ("add_bias", |s| {
            let mut r = rng(s);
            let (m, d) = (dims(&mut r, 1, 5), dims(&mut r, 1, 4));
            let x = randn(&mut r, &[2, m, d], 1.0);
            let b = randn(&mut r, &[d], 1.0);
            max_grad_error(&[x, b], s, |g, v| g.add_bias(v[0], v[1]).unwrap())
        }),
        ("scale+add_scalar", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 6)];
            let x = randn(&mut r, &sh, 1.0);
            max_grad_error(&[x], s, |g, v| {
                let y = g.scale(v[0], -1.7);
                g.add_scalar(y, 0.3)
            })
        }),
        ("matmul", |s| {
            let mut r = rng(s);
            let (m, k, n) = (dims(&mut r, 1, 4), dims(&mut r, 1, 4), dims(&mut r, 1, 4));
            let a = randn(&mut r, &[m, k], 1.0);
            let b = randn(&mut r, &[k, n], 1.0);
            max_grad_error(&[a, b], s, |g, v| g.matmul(v[0], v[1]).unwrap())
        }),
        ("batch_matmul", |s| {
            let mut r = rng(s);
            let (bn, m, k, n) = (
                dims(&mut r, 1, 3),
                dims(&mut r, 1, 3),
                dims(&mut r, 1, 3),
                dims(&mut r, 1, 3),
            );
            let a = randn(&mut r, &[bn, m, k], 1.0);
            let b = randn(&mut r, &[bn, k, n], 1.0);
            max_grad_error(&[a, b], s, |g, v| g.batch_matmul(v[0], v[1]).unwrap())
        }),
        ("linear", |s| {
            let mut r = rng(s);
            let (k, n) = (dims(&mut r, 1, 4), dims(&mut r, 1, 4));
            let x = randn(&mut r, &[2, 3, k], 1.0);
            let w = randn(&mut r, &[k, n], 1.0);
            let b = randn(&mut r, &[n], 1.0);
            max_grad_error(&[x, w, b], s, |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap())
        }),
        ("conv2d", |s| {
            let mut r = rng(s);
            let (c, f) = (dims(&mut r, 1, 3), dims(&mut r, 1, 3));
            let k = [1, 3][r.gen_range(0..2)];
            let stride = r.gen_range(1..=2);
            let pad = if k == 3 { r.gen_range(0..=1) } else { 0 };
            // pick H, W so the output extent is integral
            let ho = dims(&mut r, 1, 4);
            let wo = dims(&mut r, 1, 4);
            let h = (ho - 1) * stride + k - 2 * pad;
            let w = (wo - 1) * stride + k - 2 * pad;
            let x = randn(&mut r, &[2, c, h.max(1), w.max(1)], 1.0);
            let wt = randn(&mut r, &[f, c, k, k], 1.0);
            let b = randn(&mut r, &[f], 1.0);
            max_grad_error(&[x, wt, b], s, move |g, v| {
                g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()
            })
        }),
        ("relu", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 4), dims(&mut r, 1, 5)];
            let x = away_from_zero(&mut r, &sh, 1e-2);
            max_grad_error(&[x], s, |g, v| g.relu(v[0]))
        }),
        ("gelu", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 4), dims(&mut r, 1, 5)];
            let x = randn(&mut r, &sh, 1.5);
            max_grad_error(&[x], s, |g, v| g.gelu(v[0]))
        }),
        ("log", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 6)];
            let x = uniform(&mut r, &sh, 0.2, 3.0);
            max_grad_error(&[x], s, |g, v| g.log(v[0]))
        }),
        ("exp", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 6)];
            let x = randn(&mut r, &sh, 1.0);
            max_grad_error(&[x], s, |g, v| g.exp(v[0]))
        }),
        ("softmax", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 3), dims(&mut r, 2, 4), dims(&mut r, 1, 3)];
            let axis = r.gen_range(0..3);
            let x = randn(&mut r, &sh, 1.0);
            max_grad_error(&[x], s, move |g, v| g.softmax(v[0], axis).unwrap())
        }),
        ("log_softmax", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 3), dims(&mut r, 2, 4), dims(&mut r, 1, 3)];
            let axis = r.gen_range(0..3);
            let x = randn(&mut r, &sh, 1.0);
            max_grad_error(&[x], s, move |g, v| g.log_softmax(v[0], axis).unwrap())
        }),
        ("max_pool2d", |s| {
            let mut r = rng(s);
            let (h, w) = (2 * dims(&mut r, 1, 3), 2 * dims(&mut r, 1, 3));
            let sh = [2, dims(&mut r, 1, 2), h, w];
            let x = randn(&mut r, &sh, 1.0);
            let (k, st, p) = if r.gen_bool(0.5) { (2, 2, 0) } else { (3, 2, 1) };
            if (h + 2 * p - k) % st != 0 || (w + 2 * p - k) % st != 0 {
                return max_grad_error(&[x], s, |g, v| g.max_pool2d(v[0], 2, 2, 0).unwrap());
            }
            max_grad_error(&[x], s, move |g, v| g.max_pool2d(v[0], k, st, p).unwrap())
        }),
        ("batch_norm2d_train", |s| {
            let mut r = rng(s);
            let c = dims(&mut r, 1, 3);
            let sh = [dims(&mut r, 1, 3), c, dims(&mut r, 2, 3), dims(&mut r, 2, 3)];
            let x = randn(&mut r, &sh, 1.0);
            let gm = uniform(&mut r, &[c], 0.5, 1.5);
            let bt = randn(&mut r, &[c], 1.0);
            max_grad_error(&[x, gm, bt], s, |g, v| {
                g.batch_norm2d_train(v[0], v[1], v[2], 1e-5).unwrap().0
            })
        }),
        ("batch_norm2d_eval", |s| {
            let mut r = rng(s);
            let c = dims(&mut r, 1, 3);
            let sh = [2, c, dims(&mut r, 1, 3), dims(&mut r, 1, 3)];
            let x = randn(&mut r, &sh, 1.0);
            let gm = uniform(&mut r, &[c], 0.5, 1.5);
            let bt = randn(&mut r, &[c], 1.0);
            let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
            let var: Vec<f64> = (0..c).map(|i| 0.5 + i as f64).collect();
            max_grad_error(&[x, gm, bt], s, move |g, v| {
                g.batch_norm2d_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap()
            })
        }),
        ("layer_norm", |s| {
            let mut r = rng(s);
            let d = dims(&mut r, 2, 6);
            let sh = [dims(&mut r, 1, 3), d];
            let x = randn(&mut r, &sh, 1.0);
            let gm = uniform(&mut r, &[d], 0.5, 1.5);
            let bt = randn(&mut r, &[d], 1.0);
            max_grad_error(&[x, gm, bt], s, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())
        }),
        ("bilinear_upsample2x", |s| {
            let mut r = rng(s);
            let sh = [1, dims(&mut r, 1, 2), dims(&mut r, 1, 3), dims(&mut r, 1, 3)];
            let x = randn(&mut r, &sh, 1.0);
            max_grad_error(&[x], s, |g, v| g.upsample_bilinear2x(v[0]).unwrap())
        }),
        ("concat", |s| {
            let mut r = rng(s);
            let axis = r.gen_range(0..3);
            let mut sa = [2, 3, 2];
            let mut sb = sa;
            sa[axis] = dims(&mut r, 1, 3);
            sb[axis] = dims(&mut r, 1, 3);
            let (a, b) = (randn(&mut r, &sa, 1.0), randn(&mut r, &sb, 1.0));
            max_grad_error(&[a, b], s, move |g, v| g.concat(&[v[0], v[1]], axis).unwrap())
        }),
        ("reshape+transpose", |s| {
            let mut r = rng(s);
            let (a, b, c) = (dims(&mut r, 1, 3), dims(&mut r, 1, 3), dims(&mut r, 1, 3));
            let x = randn(&mut r, &[a, b, c], 1.0);
            max_grad_error(&[x], s, move |g, v| {
                let y = g.reshape(v[0], &[a * b, c]).unwrap();
                let y = g.transpose(y).unwrap();
                g.permute(y, &[1, 0]).unwrap()
            })
        }),
        ("permute", |s| {
            let mut r = rng(s);
            let sh = [2, 3, dims(&mut r, 1, 3), 2];
            let x = randn(&mut r, &sh, 1.0);
            max_grad_error(&[x], s, |g, v| g.permute(v[0], &[2, 0, 3, 1]).unwrap())
        }),
        ("reduce_sum", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 3), dims(&mut r, 1, 3), dims(&mut r, 1, 3)];
            let x = randn(&mut r, &sh, 1.0);
            let options: [&'static [usize]; 3] = [&[0], &[1, 2], &[0, 2]];
            let axes = options[r.gen_range(0..3)];
            max_grad_error(&[x], s, move |g, v| g.reduce_sum(v[0], axes).unwrap())
        }),
        ("reduce_mean", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 3), dims(&mut r, 2, 4)];
            let x = randn(&mut r, &sh, 1.0);
            max_grad_error(&[x], s, |g, v| {
                let m = g.reduce_mean(v[0], &[1]).unwrap();
                let t = g.mean_all(v[0]);
                let t = g.reshape(t, &[1]).unwrap();
                let both = g.concat(&[m, t], 0).unwrap();
                g.sum_all(both)
            })
        }),
        ("gradient_reversal", |s| {
            let mut r = rng(s);
            let sh = [dims(&mut r, 1, 5)];
            let x = randn(&mut r, &sh, 1.0);
            // the reversed gradient is the point: compare against −λ·identity
            let lambda = r.gen_range(0.0..2.0);
            let mut g = Graph::new();
            let v = g.leaf(x.clone(), true);
            let y = g.gradient_reversal(v, lambda);
            let sq = g.mul(y, y).unwrap();
            let l = g.sum_all(sq);
            let grad = g.backward(l).unwrap().get(v).unwrap();
            x.data()
                .iter()
                .zip(grad.data())
                .map(|(xi, gi)| super::rel_err(*gi, -lambda * 2.0 * xi))
                .fold(0.0, f64::max)
        }),
        ("multi_head_attention", |s| {
            let mut r = rng(s);
            let heads = 2;
            let d = 4;
            let t = 3;
            let x = randn(&mut r, &[t, d], 1.0);
            let ws: Vec<Tensor> = (0..4).map(|_| randn(&mut r, &[d, d], 0.5)).collect();
            let mut inputs = vec![x];
            inputs.extend(ws);
            max_grad_error(&inputs, s, move |g, v: &[Var]| {
                g.multi_head_attention(v[0], v[1], v[2], v[3], v[4], heads)
                    .unwrap()
                    .out
            })
        }),
    ]
}
