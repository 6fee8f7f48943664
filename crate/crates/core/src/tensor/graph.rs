use super::gemm::{gemm, Layout};
use super::{ParamVector, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f32),
    MatMul(Var, Var),
    Conv1d(Box<ConvSaved>),
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalMeanPool {
        x: Var,
        len: usize,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        group: usize,
        inv_std: Vec<f32>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        extents: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        inner: usize,
        extent: usize,
        start: usize,
        len: usize,
    },
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Cosine(Box<CosineSaved>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f32>,
    },
}

struct ConvSaved {
    x: Var,
    w: Var,
    b: Var,
    batch: usize,
    in_channels: usize,
    in_len: usize,
    out_channels: usize,
    out_len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cols: Vec<f32>,
}

struct CosineSaved {
    a: Var,
    b: Var,
    dim: usize,
    a_unit: Vec<f32>,
    b_unit: Vec<f32>,
    a_norm: Vec<f32>,
    b_norm: Vec<f32>,
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

/// Parameters bound as leaves of a graph, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.iter().any(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
pub struct Gradients {
    leaves: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<Tensor> {
        let data = self.leaves.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), data.clone()).expect("gradient shape"))
    }

    /// Gradient for every entry of `params`, in its order. Entries that were
    /// bound as constants or never reached by the loss get zeros.
    pub fn for_params(&self, bound: &Bound, params: &ParamVector) -> ParamVector {
        let mut out = ParamVector::new();
        for (name, t) in params.iter() {
            let g = bound
                .vars
                .iter()
                .find(|(n, _)| n == name)
                .and_then(|(_, v)| self.of(*v))
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.push(name, g).expect("names unique in source");
        }
        out
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let nb: usize = b.iter().product();
    a == b || nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

fn accumulate(slot: &mut Option<Vec<f32>>, contribution: Vec<f32>) {
    match slot {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
        None => *slot = Some(contribution),
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Define-by-run computation graph. Build one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        op: Op,
        grad: bool,
    ) -> Result<Var> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { value, op, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Binds every entry of `params` as a differentiable leaf.
    pub fn bind(&mut self, params: &ParamVector) -> Bound {
        self.bind_filtered(params, |_| true)
    }

    /// Binds entries for which `trainable(name)` holds as differentiable
    /// leaves and the rest as constants.
    pub fn bind_filtered(
        &mut self,
        params: &ParamVector,
        trainable: impl Fn(&str) -> bool,
    ) -> Bound {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    self.param(t.clone())
                } else {
                    self.constant(t.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bound { vars }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Vec<f32>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(shape_err(
                name,
                format!("{sa:?} vs {sb:?} (rhs must match or be a trailing suffix)"),
            ));
        }
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        Ok(da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % nb]))
            .collect())
    }

    /// Elementwise sum; `b` may broadcast as a trailing suffix of `a` or a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary("add", a, b, |x, y| x + y)?;
        let grad = self.needs(a) || self.needs(b);
        self.push("add", self.shape(a).to_vec(), data, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary("sub", a, b, |x, y| x - y)?;
        let grad = self.needs(a) || self.needs(b);
        self.push("sub", self.shape(a).to_vec(), data, Op::Sub(a, b), grad)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.binary("mul", a, b, |x, y| x * y)?;
        let grad = self.needs(a) || self.needs(b);
        self.push("mul", self.shape(a).to_vec(), data, Op::Mul(a, b), grad)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|v| -v).collect();
        self.push(
            "neg",
            self.shape(a).to_vec(),
            data,
            Op::Neg(a),
            self.needs(a),
        )
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        let data = self.data(a).iter().map(|v| v * s).collect();
        self.push(
            "scale",
            self.shape(a).to_vec(),
            data,
            Op::Scale(a, s),
            self.needs(a),
        )
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            Layout::Normal,
            self.data(b),
            Layout::Normal,
            0.0,
            &mut out,
        );
        let grad = self.needs(a) || self.needs(b);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), grad)
    }

    /// 1D convolution over `x: [n, c_in, len]` (or unbatched `[c_in, len]`)
    /// with `w: [c_out, c_in, kernel]` and `b: [c_out]`. Zero padding on both
    /// ends; output length is `(len + 2 * padding - kernel) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, c_in, len, batched) = match sx.as_slice() {
            [n, c, l] => (*n, *c, *l, true),
            [c, l] => (1, *c, *l, false),
            _ => {
                return Err(shape_err(
                    "conv1d",
                    format!("input must be [n, c, len] or [c, len], got {sx:?}"),
                ))
            }
        };
        let [c_out, w_in, kernel] = sw[..] else {
            return Err(shape_err(
                "conv1d",
                format!("weight must be [c_out, c_in, kernel], got {sw:?}"),
            ));
        };
        if w_in != c_in {
            return Err(shape_err(
                "conv1d",
                format!("input has {c_in} channels, weight expects {w_in}"),
            ));
        }
        if sb != [c_out] {
            return Err(shape_err(
                "conv1d",
                format!("bias must be [{c_out}], got {sb:?}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv1d", "stride must be positive"));
        }
        if len + 2 * padding < kernel {
            return Err(shape_err(
                "conv1d",
                format!(
                    "kernel {kernel} longer than padded input {}",
                    len + 2 * padding
                ),
            ));
        }
        let out_len = (len + 2 * padding - kernel) / stride + 1;
        let ck = c_in * kernel;
        let nl = batch * out_len;

        let xd = self.data(x);
        let mut cols = vec![0.0f32; ck * nl];
        for ci in 0..c_in {
            for kk in 0..kernel {
                let row = &mut cols[(ci * kernel + kk) * nl..(ci * kernel + kk + 1) * nl];
                for s in 0..batch {
                    let src = &xd[(s * c_in + ci) * len..(s * c_in + ci + 1) * len];
                    for t in 0..out_len {
                        let pos = (t * stride + kk) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < len {
                            row[s * out_len + t] = src[pos as usize];
                        }
                    }
                }
            }
        }
        let mut tmp = vec![0.0f32; c_out * nl];
        gemm(
            c_out,
            ck,
            nl,
            self.data(w),
            Layout::Normal,
            &cols,
            Layout::Normal,
            0.0,
            &mut tmp,
        );
        let bd = self.data(b);
        let mut out = vec![0.0f32; batch * c_out * out_len];
        for s in 0..batch {
            for co in 0..c_out {
                let dst = &mut out[(s * c_out + co) * out_len..(s * c_out + co + 1) * out_len];
                let src = &tmp[co * nl + s * out_len..co * nl + (s + 1) * out_len];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + bd[co];
                }
            }
        }
        let shape = if batched {
            vec![batch, c_out, out_len]
        } else {
            vec![c_out, out_len]
        };
        let grad = self.needs(x) || self.needs(w) || self.needs(b);
        let saved = ConvSaved {
            x,
            w,
            b,
            batch,
            in_channels: c_in,
            in_len: len,
            out_channels: c_out,
            out_len,
            kernel,
            stride,
            padding,
            cols: if grad { cols } else { Vec::new() },
        };
        self.push("conv1d", shape, out, Op::Conv1d(Box::new(saved)), grad)
    }

    /// Max pooling along the last axis.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let Some(&len) = sx.last() else {
            return Err(shape_err("max_pool1d", "scalar input"));
        };
        if kernel == 0 || stride == 0 || kernel > len {
            return Err(shape_err(
                "max_pool1d",
                format!("kernel {kernel}, stride {stride} on length {len}"),
            ));
        }
        let out_len = (len - kernel) / stride + 1;
        let rows = self.data(x).len() / len;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows * out_len);
        let mut argmax = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            for t in 0..out_len {
                let start = r * len + t * stride;
                let mut best = start;
                for i in start + 1..start + kernel {
                    if xd[i] > xd[best] {
                        best = i;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_len;
        self.push(
            "max_pool1d",
            shape,
            out,
            Op::MaxPool1d { x, argmax },
            self.needs(x),
        )
    }

    /// Mean over the last axis: `[n, c, len] -> [n, c]`, `[c, len] -> [c]`.
    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err(
                "global_mean_pool",
                format!("need at least 2 axes, got {sx:?}"),
            ));
        }
        let len = *sx.last().unwrap();
        let out: Vec<f32> = self
            .data(x)
            .chunks(len)
            .map(|c| c.iter().sum::<f32>() / len as f32)
            .collect();
        let shape = sx[..sx.len() - 1].to_vec();
        self.push(
            "global_mean_pool",
            shape,
            out,
            Op::GlobalMeanPool { x, len },
            self.needs(x),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&v| v.max(0.0)).collect();
        self.push(
            "relu",
            self.shape(a).to_vec(),
            data,
            Op::Relu(a),
            self.needs(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|v| v.tanh()).collect();
        self.push(
            "tanh",
            self.shape(a).to_vec(),
            data,
            Op::Tanh(a),
            self.needs(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&v| sigmoid(v)).collect();
        self.push(
            "sigmoid",
            self.shape(a).to_vec(),
            data,
            Op::Sigmoid(a),
            self.needs(a),
        )
    }

    /// Normalizes each group formed by the trailing `dims` axes to zero mean
    /// and unit variance (eps 1e-5). No running statistics, no affine terms.
    pub fn layer_norm(&mut self, x: Var, dims: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if dims == 0 || dims > sx.len() {
            return Err(shape_err(
                "layer_norm",
                format!("cannot normalize {dims} trailing axes of {sx:?}"),
            ));
        }
        let group: usize = sx[sx.len() - dims..].iter().product();
        let xd = self.data(x);
        let mut out = vec![0.0f32; xd.len()];
        let mut inv_std = Vec::with_capacity(xd.len() / group);
        for (src, dst) in xd.chunks(group).zip(out.chunks_mut(group)) {
            let mean = src.iter().sum::<f32>() / group as f32;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / group as f32;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(
            "layer_norm",
            sx,
            out,
            Op::LayerNorm { x, group, inv_std },
            self.needs(x),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat", "no inputs"));
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err(
                "concat",
                format!("axis {axis} out of range for {s0:?}"),
            ));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            let compatible = sp.len() == s0.len()
                && sp
                    .iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("{sp:?} vs {s0:?} along axis {axis}"),
                ));
            }
            extents.push(sp[axis]);
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &e) in parts.iter().zip(&extents) {
                out.extend_from_slice(&self.data(p)[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let grad = parts.iter().any(|&p| self.needs(p));
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                extents,
            },
            grad,
        )
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) along axis {axis} of {sx:?}", start + len),
            ));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let extent = sx[axis];
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(
                &xd[(o * extent + start) * inner..(o * extent + start + len) * inner],
            );
        }
        let mut shape = sx;
        shape[axis] = len;
        self.push(
            "slice",
            shape,
            out,
            Op::Slice {
                x,
                outer,
                inner,
                extent,
                start,
                len,
            },
            self.needs(x),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err(
                "transpose",
                format!("need at least 2 axes, got {sx:?}"),
            ));
        }
        let (rows, cols) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let batch = sx.iter().product::<usize>() / (rows * cols);
        let out = transpose_batched(self.data(x), batch, rows, cols);
        let mut shape = sx;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        self.push(
            "transpose",
            shape,
            out,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            self.needs(x),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.data(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.data(x).to_vec();
        self.push(
            "reshape",
            shape.to_vec(),
            data,
            Op::Reshape(x),
            self.needs(x),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let Some(&n) = sx.last() else {
            return Err(shape_err("softmax", "scalar input"));
        };
        let mut out = self.data(x).to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        self.push("softmax", sx, out, Op::Softmax(x), self.needs(x))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|v| v.ln()).collect();
        self.push(
            "log",
            self.shape(a).to_vec(),
            data,
            Op::Log(a),
            self.needs(a),
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|v| v.exp()).collect();
        self.push(
            "exp",
            self.shape(a).to_vec(),
            data,
            Op::Exp(a),
            self.needs(a),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push("sum", Vec::new(), vec![s], Op::Sum(a), self.needs(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s = (d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64) as f32;
        self.push("mean", Vec::new(), vec![s], Op::Mean(a), self.needs(a))
    }

    /// Pairwise cosine similarity of rows: `[n, d] x [m, d] -> [n, m]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("cosine_similarity", format!("{sa:?} vs {sb:?}")));
        }
        let (n, m, dim) = (sa[0], sb[0], sa[1]);
        let (a_unit, a_norm) = unit_rows(self.data(a), dim);
        let (b_unit, b_norm) = unit_rows(self.data(b), dim);
        let mut out = vec![0.0f32; n * m];
        gemm(
            n,
            dim,
            m,
            &a_unit,
            Layout::Normal,
            &b_unit,
            Layout::Transposed,
            0.0,
            &mut out,
        );
        let grad = self.needs(a) || self.needs(b);
        let saved = CosineSaved {
            a,
            b,
            dim,
            a_unit,
            b_unit,
            a_norm,
            b_norm,
        };
        self.push(
            "cosine_similarity",
            vec![n, m],
            out,
            Op::Cosine(Box::new(saved)),
            grad,
        )
    }

    /// Mean softmax cross-entropy of `logits: [n, classes]` against class indices.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(shape_err(
                "cross_entropy_with_logits",
                format!("logits {sl:?} vs {} targets", targets.len()),
            ));
        }
        let c = sl[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err(
                "cross_entropy_with_logits",
                format!("target {bad} out of range for {c} classes"),
            ));
        }
        let mut probs = self.data(logits).to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            total += (lse - row[t]) as f64;
            softmax_in_place(row);
        }
        let loss = (total / targets.len() as f64) as f32;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(
            "cross_entropy_with_logits",
            Vec::new(),
            vec![loss],
            op,
            self.needs(logits),
        )
    }

    /// Mean binary cross-entropy of logits against same-shaped 0/1 targets.
    pub fn binary_cross_entropy_with_logits(
        &mut self,
        logits: Var,
        targets: &Tensor,
    ) -> Result<Var> {
        let sl = self.shape(logits);
        if sl != targets.shape() {
            return Err(shape_err(
                "binary_cross_entropy_with_logits",
                format!("logits {sl:?} vs targets {:?}", targets.shape()),
            ));
        }
        let total: f64 = self
            .data(logits)
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()) as f64)
            .sum();
        let loss = (total / targets.numel() as f64) as f32;
        let op = Op::BceWithLogits {
            logits,
            targets: targets.data().to_vec(),
        };
        self.push(
            "binary_cross_entropy_with_logits",
            Vec::new(),
            vec![loss],
            op,
            self.needs(logits),
        )
    }

    /// Reverse pass from a scalar `loss`. Every node on the path is visited
    /// exactly once, in reverse recording order; fan-out accumulates.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { leaves, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = self.nodes[idx].value.data();
        let mut send = |v: Var, contribution: Vec<f32>| {
            if self.needs(v) {
                accumulate(&mut grads[v.0], contribution);
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[idx].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.needs(*b) {
                    let nb = self.data(*b).len();
                    let mut gb = vec![0.0; nb];
                    g.iter()
                        .enumerate()
                        .for_each(|(i, v)| gb[i % nb] += sign * v);
                    send(*b, gb);
                }
                send(*a, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if self.needs(*b) {
                    let mut gb = vec![0.0; nb];
                    g.iter()
                        .zip(da)
                        .enumerate()
                        .for_each(|(i, (gv, av))| gb[i % nb] += gv * av);
                    send(*b, gb);
                }
                if self.needs(*a) {
                    send(
                        *a,
                        g.iter()
                            .enumerate()
                            .map(|(i, gv)| gv * db[i % nb])
                            .collect(),
                    );
                }
            }
            Op::Neg(a) => send(*a, g.iter().map(|v| -v).collect()),
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        Layout::Normal,
                        self.data(*b),
                        Layout::Transposed,
                        0.0,
                        &mut ga,
                    );
                    send(*a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        self.data(*a),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        0.0,
                        &mut gb,
                    );
                    send(*b, gb);
                }
            }
            Op::Conv1d(s) => {
                let nl = s.batch * s.out_len;
                let ck = s.in_channels * s.kernel;
                let mut gt = vec![0.0f32; s.out_channels * nl];
                for b in 0..s.batch {
                    for co in 0..s.out_channels {
                        let src = &g[(b * s.out_channels + co) * s.out_len
                            ..(b * s.out_channels + co + 1) * s.out_len];
                        gt[co * nl + b * s.out_len..co * nl + (b + 1) * s.out_len]
                            .copy_from_slice(src);
                    }
                }
                if self.needs(s.b) {
                    send(s.b, gt.chunks(nl).map(|r| r.iter().sum()).collect());
                }
                if self.needs(s.w) {
                    let mut gw = vec![0.0; s.out_channels * ck];
                    gemm(
                        s.out_channels,
                        nl,
                        ck,
                        &gt,
                        Layout::Normal,
                        &s.cols,
                        Layout::Transposed,
                        0.0,
                        &mut gw,
                    );
                    send(s.w, gw);
                }
                if self.needs(s.x) {
                    let mut gcols = vec![0.0f32; ck * nl];
                    gemm(
                        ck,
                        s.out_channels,
                        nl,
                        self.data(s.w),
                        Layout::Transposed,
                        &gt,
                        Layout::Normal,
                        0.0,
                        &mut gcols,
                    );
                    let mut gx = vec![0.0f32; s.batch * s.in_channels * s.in_len];
                    for ci in 0..s.in_channels {
                        for kk in 0..s.kernel {
                            let row =
                                &gcols[(ci * s.kernel + kk) * nl..(ci * s.kernel + kk + 1) * nl];
                            for b in 0..s.batch {
                                let dst = &mut gx[(b * s.in_channels + ci) * s.in_len
                                    ..(b * s.in_channels + ci + 1) * s.in_len];
                                for t in 0..s.out_len {
                                    let pos = (t * s.stride + kk) as isize - s.padding as isize;
                                    if pos >= 0 && (pos as usize) < s.in_len {
                                        dst[pos as usize] += row[b * s.out_len + t];
                                    }
                                }
                            }
                        }
                    }
                    send(s.x, gx);
                }
            }
            Op::MaxPool1d { x, argmax, .. } => {
                let mut gx = vec![0.0; self.data(*x).len()];
                argmax.iter().zip(g).for_each(|(&i, gv)| gx[i] += gv);
                send(*x, gx);
            }
            Op::GlobalMeanPool { x, len } => {
                let inv = 1.0 / *len as f32;
                send(
                    *x,
                    g.iter()
                        .flat_map(|gv| std::iter::repeat_n(gv * inv, *len))
                        .collect(),
                );
            }
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(out)
                    .map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 })
                    .collect(),
            ),
            Op::Tanh(a) => send(
                *a,
                g.iter()
                    .zip(out)
                    .map(|(gv, o)| gv * (1.0 - o * o))
                    .collect(),
            ),
            Op::Sigmoid(a) => send(
                *a,
                g.iter()
                    .zip(out)
                    .map(|(gv, o)| gv * o * (1.0 - o))
                    .collect(),
            ),
            Op::LayerNorm { x, group, inv_std } => {
                let mut gx = vec![0.0f32; g.len()];
                let n = *group as f32;
                for (((gg, xh), dst), inv) in g
                    .chunks(*group)
                    .zip(out.chunks(*group))
                    .zip(gx.chunks_mut(*group))
                    .zip(inv_std)
                {
                    let mean_g = gg.iter().sum::<f32>() / n;
                    let mean_gx = gg.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / n;
                    for ((d, gv), xv) in dst.iter_mut().zip(gg).zip(xh) {
                        *d = inv * (gv - mean_g - xv * mean_gx);
                    }
                }
                send(*x, gx);
            }
            Op::Concat {
                parts,
                outer,
                inner,
                extents,
            } => {
                let total: usize = extents.iter().sum();
                let mut offset = 0;
                for (&p, &e) in parts.iter().zip(extents) {
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * e * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + e * inner]);
                        }
                        send(p, gp);
                    }
                    offset += e;
                }
            }
            Op::Slice {
                x,
                outer,
                inner,
                extent,
                start,
                len,
            } => {
                let mut gx = vec![0.0f32; outer * extent * inner];
                for o in 0..*outer {
                    let dst = (o * extent + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, gx);
            }
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => send(*x, transpose_batched(g, *batch, *cols, *rows)),
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Softmax(x) => {
                let n = *self.shape(*x).last().unwrap();
                let mut gx = vec![0.0f32; g.len()];
                for ((gg, y), dst) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f32 = gg.iter().zip(y).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dst.iter_mut().zip(gg).zip(y) {
                        *d = yv * (gv - dot);
                    }
                }
                send(*x, gx);
            }
            Op::Log(a) => send(
                *a,
                g.iter().zip(self.data(*a)).map(|(gv, x)| gv / x).collect(),
            ),
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(gv, o)| gv * o).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; self.data(*a).len()]),
            Op::Mean(a) => {
                let n = self.data(*a).len();
                send(*a, vec![g[0] / n as f32; n]);
            }
            Op::Cosine(s) => {
                let (n, m) = (s.a_norm.len(), s.b_norm.len());
                if self.needs(s.a) {
                    let mut du = vec![0.0f32; n * s.dim];
                    gemm(
                        n,
                        m,
                        s.dim,
                        g,
                        Layout::Normal,
                        &s.b_unit,
                        Layout::Normal,
                        0.0,
                        &mut du,
                    );
                    send(s.a, unit_backward(&du, &s.a_unit, &s.a_norm, s.dim));
                }
                if self.needs(s.b) {
                    let mut du = vec![0.0f32; m * s.dim];
                    gemm(
                        m,
                        n,
                        s.dim,
                        g,
                        Layout::Transposed,
                        &s.a_unit,
                        Layout::Normal,
                        0.0,
                        &mut du,
                    );
                    send(s.b, unit_backward(&du, &s.b_unit, &s.b_norm, s.dim));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f32;
                let mut gl: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= scale;
                }
                send(*logits, gl);
            }
            Op::BceWithLogits { logits, targets } => {
                let scale = g[0] / targets.len() as f32;
                let gl = self
                    .data(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| (sigmoid(x) - y) * scale)
                    .collect();
                send(*logits, gl);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn transpose_batched(x: &[f32], batch: usize, rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        let (src, dst) = (&x[b * rows * cols..], &mut out[b * rows * cols..]);
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

const NORM_EPS: f32 = 1e-8;

fn unit_rows(x: &[f32], dim: usize) -> (Vec<f32>, Vec<f32>) {
    let mut unit = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / dim);
    for row in x.chunks(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(NORM_EPS);
        unit.extend(row.iter().map(|v| v / norm));
        norms.push(norm);
    }
    (unit, norms)
}

/// Pulls a gradient on unit rows back through `u = x / |x|`.
fn unit_backward(du: &[f32], unit: &[f32], norms: &[f32], dim: usize) -> Vec<f32> {
    let mut gx = Vec::with_capacity(du.len());
    for ((d, u), &n) in du.chunks(dim).zip(unit.chunks(dim)).zip(norms) {
        let proj: f32 = d.iter().zip(u).map(|(a, b)| a * b).sum();
        gx.extend(d.iter().zip(u).map(|(dv, uv)| (dv - uv * proj) / n));
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_same_padding_keeps_length() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 256], 0.5));
        let w = g.constant(Tensor::full(&[8, 3, 5], 0.1));
        let b = g.constant(Tensor::zeros(&[8]));
        let y = g.conv1d(x, w, b, 1, 2).unwrap();
        assert_eq!(g.shape(y), &[8, 256]);
    }

    #[test]
    fn relu_and_softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_and_product_gradients() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[6.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.param(Tensor::scalar(5.0));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[5.0]);
        assert_eq!(grads.of(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));

        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let s = g.sum(c).unwrap();
        assert_eq!(g.backward(s).err(), Some(TensorError::Detached));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul") && err.to_string().contains("[2, 3]"));
        let c = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, c).unwrap_err().to_string().starts_with("add"));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 1.0]));
        assert_eq!(g.log(x).unwrap_err(), TensorError::NonFinite { op: "log" });
        let big = g.constant(t(&[1], &[100.0]));
        assert!(g.exp(big).is_err());
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(x) + sum(x * x) at x = [1, 2] -> grad = 1 + 2x
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s1 = g.sum(x).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s2 = g.sum(sq).unwrap();
        let f = g.add(s1, s2).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 3], 1.0));
        let b = g.param(Tensor::zeros(&[3]));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(
            g.backward(s).unwrap().of(b).unwrap().data(),
            &[4.0, 4.0, 4.0]
        );
    }

    #[test]
    fn max_pool_ties_pick_first() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 4], &[1.0, 1.0, 0.0, 3.0]));
        let y = g.max_pool1d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0]);
        let s = g.sum(y).unwrap();
        assert_eq!(
            g.backward(s).unwrap().of(x).unwrap().data(),
            &[1.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn global_mean_pool_ignores_frame_order() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(t(&[1, 2, 3], &[3.0, 1.0, 2.0, 6.0, 4.0, 5.0]));
        let pa = g.global_mean_pool(a).unwrap();
        let pb = g.global_mean_pool(b).unwrap();
        assert_eq!(g.value(pa), g.value(pb));
        assert_eq!(g.value(pa).data(), &[2.0, 5.0]);
    }
}
