use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, upsample_taps, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Relu(Var),
    Gelu(Var),
    Log(Var),
    Exp(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics participate in the gradient (train mode).
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Upsample2x(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Sum {
        x: Var,
        axes: Vec<usize>,
    },
    GradReverse {
        x: Var,
        lambda: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Result of [`Graph::multi_head_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[N,T,D]` (or `[T,D]` when the input was unbatched).
    pub out: Var,
    /// Row-stochastic attention weights, `[N·heads, T, T]`.
    pub weights: Var,
}

/// Batch statistics computed by a train-mode batch norm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n−1) variance.
    pub var: Vec<f64>,
}

/// Gradients produced by [`Graph::backward`], retained for leaf nodes only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.shapes[v.0].clone(),
            data: data.clone(),
        })
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let data = self.grads.get_mut(v.0)?.take()?;
        Some(Tensor {
            shape: self.shapes[v.0].clone(),
            data,
        })
    }
}

/// Append-only computation record. Nodes are stored in creation order, which
/// doubles as a topological order, so the graph is acyclic by construction.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Split `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    /// `x + b` with `b` of shape `[D]` broadcast along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(b) != [d] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bias = &self.value(b).data;
        let xt = self.value(x);
        let mut out = xt.clone();
        for row in out.data.chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|t| t * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|t| t + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &self.value(a).data, &self.value(b).data, &mut c);
        let t = Tensor {
            shape: vec![m, n],
            data: c,
        };
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `[B,M,K] × [B,K,N] → [B,M,N]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", &sa, &sb));
        }
        let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut c = vec![0.0; bn * m * n];
        let (da, db) = (&self.value(a).data, &self.value(b).data);
        for i in 0..bn {
            gemm_nn(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor {
            shape: vec![bn, m, n],
            data: c,
        };
        Ok(self.push(t, Op::BatchMatMul(a, b), &[a, b]))
    }

    /// Affine map over the last axis: `x[..., K] · w[K, N] + b[N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / k;
        let flat = self.reshape(x, &[rows, k])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        let n = self.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = n;
        self.reshape(y, &out_shape)
    }

    /// Cross-correlation of `x[N,C,H,W]` with `w[F,C,kh,kw]`, optional bias `[F]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err("conv2d bias", &sw, self.shape(b)));
            }
        }
        if stride == 0 {
            return Err(Error::Geometry("conv2d stride must be positive".into()));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        let ho = conv_extent(h, kh, stride, pad, "height")?;
        let wo = conv_extent(wd, kw, stride, pad, "width")?;
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let keep_cols = self.requires_grad(w) && !geom.is_pointwise();
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let xd = &self.value(x).data;
        let wdata = &self.value(w).data;
        let mut out = vec![0.0; n * f * ncols];
        let mut saved = if keep_cols {
            vec![0.0; n * rows * ncols]
        } else {
            Vec::new()
        };
        let mut scratch = if geom.is_pointwise() || keep_cols {
            Vec::new()
        } else {
            vec![0.0; rows * ncols]
        };
        for s in 0..n {
            let xs = &xd[s * c * h * wd..(s + 1) * c * h * wd];
            let cols: &[f64] = if geom.is_pointwise() {
                xs
            } else if keep_cols {
                let dst = &mut saved[s * rows * ncols..(s + 1) * rows * ncols];
                im2col(xs, &geom, dst);
                dst
            } else {
                im2col(xs, &geom, &mut scratch);
                &scratch
            };
            let os = &mut out[s * f * ncols..(s + 1) * f * ncols];
            if let Some(b) = b {
                let bias = &self.value(b).data;
                for (fi, plane) in os.chunks_mut(ncols).enumerate() {
                    plane.fill(bias[fi]);
                }
            }
            gemm_nn(f, rows, ncols, wdata, cols, os);
        }
        let t = Tensor {
            shape: vec![n, f, ho, wo],
            data: out,
        };
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let op = Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols: keep_cols.then_some(saved),
        };
        Ok(self.push(t, op, &parents))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| if t > 0.0 { t } else { 0.0 });
        self.push(v, Op::Relu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map(|t| 0.5 * t * (1.0 + (GELU_C * (t + GELU_A * t * t * t)).tanh()));
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::ln);
        self.push(v, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    fn check_axis(&self, op: &str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::Shape(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let xt = self.value(x);
        let (outer, len, inner) = axis_split(&xt.shape, axis);
        let mut out = xt.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| out[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for a in 0..len {
                    let e = (out[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..len {
                    out[idx(a)] /= z;
                }
            }
        }
        let t = Tensor {
            shape: xt.shape.clone(),
            data: out,
        };
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Numerically stable `x − logsumexp(x)` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let xt = self.value(x);
        let (outer, len, inner) = axis_split(&xt.shape, axis);
        let mut out = xt.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| out[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|a| (out[idx(a)] - max).exp()).sum();
                let log_z = z.ln();
                for a in 0..len {
                    out[idx(a)] = (out[idx(a)] - max) - log_z;
                }
            }
        }
        let t = Tensor {
            shape: xt.shape.clone(),
            data: out,
        };
        Ok(self.push(t, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Max pooling over `x[N,C,H,W]`; padded cells never win.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("max_pool2d expects rank 4, got {s:?}")));
        }
        if kernel == 0 || stride == 0 || pad >= kernel {
            return Err(Error::Geometry(format!(
                "max_pool2d kernel {kernel} stride {stride} pad {pad}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = conv_extent(h, kernel, stride, pad, "height")?;
        let wo = conv_extent(w, kernel, stride, pad, "width")?;
        let xd = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for ki in 0..kernel {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if best_idx == usize::MAX || xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let t = Tensor {
            shape: vec![n, c, ho, wo],
            data: out,
        };
        Ok(self.push(t, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Batch normalization over `x[N,C,H,W]` using statistics of this batch.
    /// Returns the output and the batch statistics for running-stat updates.
    pub fn batch_norm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let s = self.bn_check(x, gamma, beta)?;
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let m = (n * hw) as f64;
        let xd = &self.value(x).data;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for b in 0..n {
                for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    acc += v;
                }
            }
            mean[ch] = acc / m;
            let mut sq = 0.0;
            for b in 0..n {
                for &v in &xd[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    sq += (v - mean[ch]) * (v - mean[ch]);
                }
            }
            var[ch] = sq / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: var
                .iter()
                .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
                .collect(),
        };
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true);
        Ok((out, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let s = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != s[1] || running_var.len() != s[1] {
            return Err(Error::Shape(format!(
                "batch_norm2d running stats of length {} for {} channels",
                running_mean.len(),
                s[1]
            )));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, &inv_std, false))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<Vec<usize>> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::Shape(format!(
                "batch_norm2d: input {s:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(s)
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
    ) -> Var {
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let t = Tensor { shape: s, data: out };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std: inv_std.to_vec(),
            batch_stats,
        };
        self.push(t, op, &[x, gamma, beta])
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: input {s:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xd = &self.value(x).data;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let t = Tensor { shape: s, data: out };
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(t, op, &[x, gamma, beta]))
    }

    /// Align-corners bilinear ×2 upsampling of `x[N,C,H,W]`.
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("upsample expects rank 4, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let (ho, wo) = (2 * h, 2 * w);
        let xd = &self.value(x).data;
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
            for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                    let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                    dst[oy * wo + ox] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
        let t = Tensor {
            shape: vec![n, c, ho, wo],
            data: out,
        };
        Ok(self.push(t, Op::Upsample2x(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let sp = self.shape(p);
            let compatible = sp.len() == first.len()
                && sp
                    .iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, sp));
            }
            total += sp[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut shape = first.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape[axis] * inner;
                out.extend_from_slice(&t.data[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor { shape, data: out };
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("permute {axes:?} of shape {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let data = permute_data(&self.value(x).data, &s, axes);
        let t = Tensor {
            shape: out_shape,
            data,
        };
        Ok(self.push(
            t,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Shape("transpose needs rank ≥ 2".into()));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Sum over `axes` (removed from the shape; reducing every axis gives `[1]`).
    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axes.iter().any(|&a| a >= s.len()) {
            return Err(Error::Shape(format!("reduce_sum axes {axes:?} of shape {s:?}")));
        }
        let (out_shape, map) = reduction_map(&s, axes);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (i, &v) in self.value(x).data.iter().enumerate() {
            out[map(i)] += v;
        }
        let t = Tensor {
            shape: out_shape,
            data: out,
        };
        Ok(self.push(
            t,
            Op::Sum {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce_sum(x, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let count: usize = axes.iter().map(|&a| s.get(a).copied().unwrap_or(1)).product();
        let r = self.reduce_sum(x, axes)?;
        Ok(self.scale(r, 1.0 / count as f64))
    }

    /// Identity forward; backward multiplies the incoming gradient by `−lambda`.
    pub fn gradient_reversal(&mut self, x: Var, lambda: f64) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::GradReverse { x, lambda }, &[x])
    }

    /// Multi-head self-attention: `softmax(Q Kᵀ / √(D/h)) V` per head, heads
    /// concatenated and projected by `wo`. `x` is `[T,D]` or `[N,T,D]`; all
    /// projection matrices are `[D,D]`.
    pub fn multi_head_attention(
        &mut self,
        x: Var,
        wq: Var,
        wk: Var,
        wv: Var,
        wo: Var,
        heads: usize,
    ) -> Result<AttentionOutput> {
        let s = self.shape(x).to_vec();
        let (n, t, d, batched) = match s.as_slice() {
            [t, d] => (1, *t, *d, false),
            [n, t, d] => (*n, *t, *d, true),
            _ => return Err(Error::Shape(format!("attention input rank: {s:?}"))),
        };
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {d} is not divisible by {heads} heads"
            )));
        }
        for w in [wq, wk, wv, wo] {
            if self.shape(w) != [d, d] {
                return Err(shape_err("attention projection", &[d, d], self.shape(w)));
            }
        }
        let dh = d / heads;
        let x3 = self.reshape(x, &[n, t, d])?;
        let split = |g: &mut Graph, w: Var| -> Result<Var> {
            let p = g.linear(x3, w, None)?;
            let p = g.reshape(p, &[n, t, heads, dh])?;
            let p = g.permute(p, &[0, 2, 1, 3])?;
            g.reshape(p, &[n * heads, t, dh])
        };
        let q = split(self, wq)?;
        let k = split(self, wk)?;
        let v = split(self, wv)?;
        let kt = self.transpose(k)?;
        let scores = self.batch_matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = self.softmax(scores, 2)?;
        let ctx = self.batch_matmul(weights, v)?;
        let ctx = self.reshape(ctx, &[n, heads, t, dh])?;
        let ctx = self.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.reshape(ctx, &[n, t, d])?;
        let mut out = self.linear(ctx, wo, None)?;
        if !batched {
            out = self.reshape(out, &[t, d])?;
        }
        Ok(AttentionOutput { out, weights })
    }

    /// Reverse-mode sweep from a single-element `loss`. Gradients are
    /// accumulated, so shared subexpressions receive the sum of all paths.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &gout, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn backprop(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| {
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |g| {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(vb) {
                        *gi += go * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(va) {
                        *gi += go * x;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |g| {
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(vb) {
                        *gi += go / y;
                    }
                });
                acc(*b, &mut |g| {
                    for (((gi, &go), &x), &y) in g.iter_mut().zip(gout).zip(va).zip(vb) {
                        *gi -= go * x / (y * y);
                    }
                });
            }
            Op::AddBias(x, b) => {
                acc(*x, &mut |g| add_into(g, gout));
                let d = self.shape(*b)[0];
                acc(*b, &mut |g| {
                    for row in gout.chunks(d) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| {
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go * c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gout)),
            Op::GradReverse { x, lambda } => acc(*x, &mut |g| {
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += -lambda * go;
                }
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |g| gemm_nt(m, n, k, gout, vb, g));
                acc(*b, &mut |g| gemm_tn(k, m, n, va, gout, g));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |g| {
                    for i in 0..bn {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &gout[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut g[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..bn {
                        gemm_tn(
                            k,
                            m,
                            n,
                            &va[i * m * k..(i + 1) * m * k],
                            &gout[i * m * n..(i + 1) * m * n],
                            &mut g[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => self.conv_backward(*x, *w, *b, geom, cols.as_deref(), gout, &mut acc),
            Op::Relu(x) => {
                let vx = &self.value(*x).data;
                acc(*x, &mut |g| {
                    for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(vx) {
                        if v > 0.0 {
                            *gi += go;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = &self.value(*x).data;
                acc(*x, &mut |g| {
                    for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(vx) {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *gi += go * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
                    }
                });
            }
            Op::Log(x) => {
                let vx = &self.value(*x).data;
                acc(*x, &mut |g| {
                    for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(vx) {
                        *gi += go / v;
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value.data;
                acc(*x, &mut |g| {
                    for ((gi, &go), &v) in g.iter_mut().zip(gout).zip(y) {
                        *gi += go * v;
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &node.value.data;
                let (outer, len, inner) = axis_split(&node.value.shape, *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| gout[idx(a)] * y[idx(a)]).sum();
                            for a in 0..len {
                                g[idx(a)] += y[idx(a)] * (gout[idx(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let y = &node.value.data;
                let (outer, len, inner) = axis_split(&node.value.shape, *axis);
                acc(*x, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |a: usize| (o * len + a) * inner + i;
                            let total: f64 = (0..len).map(|a| gout[idx(a)]).sum();
                            for a in 0..len {
                                g[idx(a)] += gout[idx(a)] - y[idx(a)].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => acc(*x, &mut |g| {
                for (&src, &go) in argmax.iter().zip(gout) {
                    g[src] += go;
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = &node.value.shape;
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for j in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            sum_dy[ch] += gout[j];
                            sum_dy_xhat[ch] += gout[j] * xhat[j];
                        }
                    }
                }
                acc(*beta, &mut |g| add_into(g, &sum_dy));
                acc(*gamma, &mut |g| add_into(g, &sum_dy_xhat));
                let gm = &self.value(*gamma).data;
                let m = (n * hw) as f64;
                acc(*x, &mut |g| {
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gm[ch] * inv_std[ch];
                            for j in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                g[j] += if *batch_stats {
                                    k * (gout[j] - sum_dy[ch] / m - xhat[j] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * gout[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape.last().unwrap();
                acc(*beta, &mut |g| {
                    for row in gout.chunks(d) {
                        add_into(g, row);
                    }
                });
                acc(*gamma, &mut |g| {
                    for (row, hrow) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            g[j] += row[j] * hrow[j];
                        }
                    }
                });
                let gm = &self.value(*gamma).data;
                acc(*x, &mut |g| {
                    for (r, (row, hrow)) in gout.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = row[j] * gm[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        let df = d as f64;
                        for j in 0..d {
                            let dh = row[j] * gm[j];
                            g[r * d + j] += inv_std[r] * (dh - s1 / df - hrow[j] * s2 / df);
                        }
                    }
                });
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ty, tx) = (upsample_taps(h), upsample_taps(w));
                let (ho, wo) = (2 * h, 2 * w);
                acc(*x, &mut |g| {
                    for (p, dst) in g.chunks_mut(h * w).enumerate() {
                        let src = &gout[p * ho * wo..(p + 1) * ho * wo];
                        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                                let go = src[oy * wo + ox];
                                dst[y0 * w + x0] += go * (1.0 - wy) * (1.0 - wx);
                                dst[y0 * w + x1] += go * (1.0 - wy) * wx;
                                dst[y1 * w + x0] += go * wy * (1.0 - wx);
                                dst[y1 * w + x1] += go * wy * wx;
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(&node.value.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if needs(p) {
                        acc(p, &mut |g| {
                            for o in 0..outer {
                                let src = &gout[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                add_into(&mut g[o * len * inner..(o + 1) * len * inner], src);
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let back = permute_data(gout, &node.value.shape, &inverse);
                acc(*x, &mut |g| add_into(g, &back));
            }
            Op::Sum { x, axes } => {
                let (_, map) = reduction_map(self.shape(*x), axes);
                acc(*x, &mut |g| {
                    for (j, gi) in g.iter_mut().enumerate() {
                        *gi += gout[map(j)];
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        cols: Option<&[f64]>,
        gout: &[f64],
        acc: &mut dyn FnMut(Var, &mut dyn FnMut(&mut [f64])),
    ) {
        let n = self.shape(x)[0];
        let f = self.shape(w)[0];
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_size = geom.c * geom.h * geom.w;
        if let Some(b) = b {
            acc(b, &mut |g| {
                for s in 0..n {
                    for (fi, gi) in g.iter_mut().enumerate() {
                        let base = (s * f + fi) * ncols;
                        *gi += gout[base..base + ncols].iter().sum::<f64>();
                    }
                }
            });
        }
        let xd = &self.value(x).data;
        acc(w, &mut |g| {
            let mut scratch = Vec::new();
            for s in 0..n {
                let go = &gout[s * f * ncols..(s + 1) * f * ncols];
                let c: &[f64] = if geom.is_pointwise() {
                    &xd[s * in_size..(s + 1) * in_size]
                } else if let Some(cols) = cols {
                    &cols[s * rows * ncols..(s + 1) * rows * ncols]
                } else {
                    scratch.resize(rows * ncols, 0.0);
                    im2col(&xd[s * in_size..(s + 1) * in_size], geom, &mut scratch);
                    &scratch
                };
                gemm_nt(f, ncols, rows, go, c, g);
            }
        });
        let wd = &self.value(w).data;
        acc(x, &mut |g| {
            let mut dcols = vec![0.0; rows * ncols];
            for s in 0..n {
                let go = &gout[s * f * ncols..(s + 1) * f * ncols];
                let gx = &mut g[s * in_size..(s + 1) * in_size];
                if geom.is_pointwise() {
                    gemm_tn(rows, f, ncols, wd, go, gx);
                } else {
                    dcols.fill(0.0);
                    gemm_tn(rows, f, ncols, wd, go, &mut dcols);
                    col2im(&dcols, geom, gx);
                }
            }
        });
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn conv_extent(size: usize, k: usize, stride: usize, pad: usize, what: &str) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::Geometry(format!(
            "{what} {size} with kernel {k}, stride {stride}, pad {pad} gives a non-integral output extent"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let in_strides = Tensor::strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Output shape of reducing `axes` and a map from input flat index to output flat index.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, impl Fn(usize) -> usize) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = if kept.is_empty() {
        vec![1]
    } else {
        kept.iter().map(|&a| shape[a]).collect()
    };
    let in_strides = Tensor::strides(shape);
    let out_strides = Tensor::strides(&out_shape);
    let dims: Vec<(usize, usize, usize)> = kept
        .iter()
        .enumerate()
        .map(|(o, &a)| (in_strides[a], shape[a], out_strides[o]))
        .collect();
    let map = move |i: usize| {
        dims.iter()
            .map(|&(stride, extent, ostride)| (i / stride) % extent * ostride)
            .sum()
    };
    (out_shape, map)
}
