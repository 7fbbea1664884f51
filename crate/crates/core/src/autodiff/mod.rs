//! Minimal reverse-mode differentiation over `f64` tensors.
//!
//! A [`Tape`] is a Wengert list: every op appends one node holding its value
//! and the indices of its inputs. Nodes are stored in execution order, which
//! is a topological order, so [`Tape::backward`] is a single reverse sweep.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod lstm;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rdwt::{self, WaveletFilterBank};

pub use adam::{AdamConfig, AdamState};
pub use conv::{Padding1d, Padding2d};
pub use gradcheck::{grad_check, grad_check_subset, GradCheck};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            shape: shape.to_vec(),
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let mut t = Self::new(data, shape)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var, usize, usize, usize),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: conv::Conv1dGeom,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: conv::Conv2dGeom,
    },
    TimeReverse(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        src_inner: usize,
        offset: usize,
        inner: usize,
    },
    Reshape(Var),
    Transpose(Var, usize, usize),
    Sum(Var),
    Mean(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var),
    Mse(Var, Var),
    ChannelNorm {
        x: Var,
        channels: usize,
        len: usize,
        peak: Vec<usize>,
        denom: Vec<f64>,
    },
    Rdwt {
        x: Var,
        channels: usize,
        levels: usize,
        bank: Arc<WaveletFilterBank>,
    },
    Irdwt {
        x: Var,
        channels: usize,
        levels: usize,
        bank: Arc<WaveletFilterBank>,
    },
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        geom: lstm::LstmGeom,
        cache: Box<lstm::LstmCache>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// ELU slope for negative inputs.
pub const ELU_ALPHA: f64 = 1.0;

/// Gradients keyed by node index; `None` where no gradient flows.
pub struct Gradients(Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros if nothing reached it.
    pub fn take(&mut self, v: Var, len: usize) -> Vec<f64> {
        self.0.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| vec![0.0; len])
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Vec<f64>, shape: Vec<usize>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = value.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: op_name,
                detail: format!("produced {bad}"),
            });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_raw(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "leaf",
                detail: "non-finite input".into(),
            });
        }
        self.nodes.push(Node {
            value: data,
            shape: shape.to_vec(),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf tracking gradients when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf_raw(t.data.clone(), &t.shape, t.requires_grad)
    }

    pub fn variable(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf_raw(data, shape, true)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf_raw(data, shape, false)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, value, shape, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, value, shape, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, k), |x| x * k)
    }

    /// `[n, k] × [k, m] → [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} × {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                for (o, &y) in row.iter_mut().zip(&bv[p * m..(p + 1) * m]) {
                    *o += x * y;
                }
            }
        }
        self.push("matmul", out, vec![n, m], Op::MatMul(a, b, n, k, m), &[a, b])
    }

    /// `x: [C_in, T]`, `w: [C_out, C_in / groups, K]`, `b: [C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize, groups: usize, padding: Padding1d) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 3 || groups == 0 || dilation == 0 {
            return Err(Error::Shape(format!("conv1d: input {sx:?}, weight {sw:?}")));
        }
        let geom = conv::Conv1dGeom {
            c_in: sx[0],
            c_out: sw[0],
            len: sx[1],
            kernel: sw[2],
            dilation,
            groups,
            padding,
        };
        if geom.c_in % groups != 0 || geom.c_out % groups != 0 || sw[1] != geom.c_in / groups || geom.kernel == 0 {
            return Err(Error::Shape(format!("conv1d: input {sx:?}, weight {sw:?}, groups {groups}")));
        }
        if padding == Padding1d::Same && geom.kernel % 2 == 0 {
            return Err(Error::Config(format!("same-padded conv1d needs an odd kernel, got {}", geom.kernel)));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::Shape(format!("conv1d bias {:?}", self.shape(b))));
            }
        }
        let out = conv::conv1d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv1d", out, vec![geom.c_out, geom.len], Op::Conv1d { x, w, b, geom }, &inputs)
    }

    /// `x: [C_in, H, W]`, `w: [C_out, C_in, KH, KW]`, `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, padding: Padding2d) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::Shape(format!("conv2d: input {sx:?}, weight {sw:?}")));
        }
        let geom = conv::Conv2dGeom {
            c_in: sx[0],
            c_out: sw[0],
            h: sx[1],
            w: sx[2],
            kh: sw[2],
            kw: sw[3],
            padding,
        };
        match padding {
            Padding2d::Valid if geom.kh > geom.h || geom.kw > geom.w => {
                return Err(Error::Shape(format!("conv2d: kernel {sw:?} larger than input {sx:?}")))
            }
            Padding2d::Same if geom.kh % 2 == 0 || geom.kw % 2 == 0 => {
                return Err(Error::Config("same-padded conv2d needs odd kernels".into()))
            }
            _ => {}
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::Shape(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let out = conv::conv2d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let (oh, ow) = geom.out_hw();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, vec![geom.c_out, oh, ow], Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Reverse along the last axis.
    pub fn time_reverse(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let t = *shape.last().ok_or_else(|| Error::Shape("time_reverse of a scalar".into()))?;
        let value = self.value(x).chunks(t.max(1)).flat_map(|c| c.iter().rev().copied()).collect();
        self.push("time_reverse", value, shape, Op::TimeReverse(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or(Error::EmptyInput("concat"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} for shape {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &n)| d != axis && n != first[d]) {
                return Err(Error::Shape(format!("concat: {first:?} vs {s:?} on axis {axis}")));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis..].iter().product()).collect();
        let mut value = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (&v, &n) in inputs.iter().zip(&inner) {
                value.extend_from_slice(&self.value(v)[o * n..(o + 1) * n]);
            }
        }
        self.push(
            "concat",
            value,
            shape,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
            },
            inputs,
        )
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::Shape(format!("slice {start}..{} of axis {axis} in {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let tail: usize = s[axis + 1..].iter().product();
        let src_inner = s[axis] * tail;
        let offset = start * tail;
        let inner = len * tail;
        let xv = self.value(x);
        let mut value = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            value.extend_from_slice(&xv[o * src_inner + offset..o * src_inner + offset + inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(
            "slice",
            value,
            shape,
            Op::Slice {
                x,
                outer,
                src_inner,
                offset,
                inner,
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape(format!("reshape {:?} to {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        self.push("reshape", value, shape.to_vec(), Op::Reshape(x), &[x])
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose of {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x);
        let value = (0..c * r).map(|k| xv[(k % r) * c + k / r]).collect();
        self.push("transpose", value, vec![c, r], Op::Transpose(x, r, c), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push("sum", vec![s], vec![1], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::EmptyInput("mean"));
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", vec![m], vec![1], Op::Mean(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.map("elu", x, Op::Elu(x), |v| if v > 0.0 { v } else { ELU_ALPHA * v.exp_m1() })
    }

    /// Mean squared error over all entries.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.is_empty() {
            return Err(Error::EmptyInput("mse_loss"));
        }
        let l = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        self.push("mse_loss", vec![l], vec![1], Op::Mse(pred, target), &[pred, target])
    }

    /// Per-row `(x - mean) / (max |x - mean| + 1e-8)` on `[C, T]`.
    pub fn channel_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::Shape(format!("channel_norm of {s:?}")));
        }
        let (channels, len) = (s[0], s[1]);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(xv.len());
        let mut peak = Vec::with_capacity(channels);
        let mut denom = Vec::with_capacity(channels);
        for row in xv.chunks(len) {
            let m = row.iter().sum::<f64>() / len as f64;
            let (p, dev) = row
                .iter()
                .map(|v| (v - m).abs())
                .enumerate()
                .fold((0, -1.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
            let d = dev + CHANNEL_NORM_EPS;
            value.extend(row.iter().map(|v| (v - m) / d));
            peak.push(p);
            denom.push(d);
        }
        self.push(
            "channel_norm",
            value,
            s,
            Op::ChannelNorm {
                x,
                channels,
                len,
                peak,
                denom,
            },
            &[x],
        )
    }

    /// `[C, T] → [C, levels + 1, T]` with planes ordered `[A_L, D_L, ..., D_1]`.
    pub fn rdwt(&mut self, x: Var, levels: usize, bank: &Arc<WaveletFilterBank>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape(format!("rdwt of {s:?}")));
        }
        let (channels, len) = (s[0], s[1]);
        let mut value = Vec::with_capacity(channels * (levels + 1) * len);
        for row in self.value(x).chunks(len) {
            for p in rdwt::forward_1d(row, levels, bank)? {
                value.extend(p);
            }
        }
        self.push(
            "rdwt",
            value,
            vec![channels, levels + 1, len],
            Op::Rdwt {
                x,
                channels,
                levels,
                bank: Arc::clone(bank),
            },
            &[x],
        )
    }

    /// `[C, levels + 1, T] → [C, T]`.
    pub fn irdwt(&mut self, x: Var, bank: &Arc<WaveletFilterBank>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] < 2 {
            return Err(Error::Shape(format!("irdwt of {s:?}")));
        }
        let (channels, bands, len) = (s[0], s[1], s[2]);
        let mut value = Vec::with_capacity(channels * len);
        for block in self.value(x).chunks(bands * len) {
            let planes: Vec<Vec<f64>> = block.chunks(len).map(<[f64]>::to_vec).collect();
            value.extend(rdwt::inverse_1d(&planes, bank)?);
        }
        self.push(
            "irdwt",
            value,
            vec![channels, len],
            Op::Irdwt {
                x,
                channels,
                levels: bands - 1,
                bank: Arc::clone(bank),
            },
            &[x],
        )
    }

    /// One LSTM direction over `x: [T, F]`; returns the hidden sequence `[T, H]`.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (si, sh, sb) = (self.shape(w_ih).to_vec(), self.shape(w_hh).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 {
            return Err(Error::Shape(format!("lstm input {sx:?}")));
        }
        if sx[0] == 0 {
            return Err(Error::EmptyInput("lstm sequence"));
        }
        let units = sh.first().copied().unwrap_or(0);
        if units == 0 || si != [sx[1], 4 * units] || sh != [units, 4 * units] || sb != [4 * units] {
            return Err(Error::Shape(format!(
                "lstm weights {si:?}, {sh:?}, {sb:?} for input {sx:?}"
            )));
        }
        let geom = lstm::LstmGeom {
            steps: sx[0],
            features: sx[1],
            units,
            reverse,
        };
        let (out, cache) = lstm::lstm_forward(&geom, self.value(x), self.value(w_ih), self.value(w_hh), self.value(b));
        self.push(
            "lstm",
            out,
            vec![geom.steps, units],
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                geom,
                cache: Box::new(cache),
            },
            &[x, w_ih, w_hh, b],
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: &mut dyn FnMut(&mut [f64])| {
            if !self.needs(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        let add_into = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (g, y))| *d += g * y));
                acc(*b, &mut |d| d.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (g, x))| *d += g * x));
            }
            Op::Scale(a, k) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, s)| *d += k * s)),
            Op::MatMul(a, b, n, k, m) => {
                let (n, k, m) = (*n, *k, *m);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| {
                    for i in 0..n {
                        for p in 0..k {
                            let row = &bv[p * m..(p + 1) * m];
                            d[i * k + p] += g[i * m..(i + 1) * m].iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..n {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for (dv, gv) in d[p * m..(p + 1) * m].iter_mut().zip(&g[i * m..(i + 1) * m]) {
                                *dv += x * gv;
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b, geom } => {
                let (gx, gw, gb) = conv::conv1d_backward(geom, self.value(*x), self.value(*w), g);
                acc(*x, &mut |d| add_into(d, &gx));
                acc(*w, &mut |d| add_into(d, &gw));
                if let Some(b) = b {
                    acc(*b, &mut |d| add_into(d, &gb));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = conv::conv2d_backward(geom, self.value(*x), self.value(*w), g);
                acc(*x, &mut |d| add_into(d, &gx));
                acc(*w, &mut |d| add_into(d, &gw));
                if let Some(b) = b {
                    acc(*b, &mut |d| add_into(d, &gb));
                }
            }
            Op::TimeReverse(x) => {
                let t = *node.shape.last().unwrap_or(&1);
                acc(*x, &mut |d| {
                    for (dc, gc) in d.chunks_mut(t.max(1)).zip(g.chunks(t.max(1))) {
                        dc.iter_mut().zip(gc.iter().rev()).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Concat { inputs, outer, inner } => {
                let total: usize = inner.iter().sum();
                let mut offset = 0;
                for (&v, &n) in inputs.iter().zip(inner) {
                    acc(v, &mut |d| {
                        for o in 0..*outer {
                            add_into(&mut d[o * n..(o + 1) * n], &g[o * total + offset..o * total + offset + n]);
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice {
                x,
                outer,
                src_inner,
                offset,
                inner,
            } => acc(*x, &mut |d| {
                for o in 0..*outer {
                    let s = o * src_inner + offset;
                    add_into(&mut d[s..s + inner], &g[o * inner..(o + 1) * inner]);
                }
            }),
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Transpose(x, r, c) => {
                let (r, c) = (*r, *c);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::Tanh(x) => acc(*x, &mut |d| {
                for ((dv, gv), y) in d.iter_mut().zip(g).zip(&node.value) {
                    *dv += gv * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((dv, gv), y) in d.iter_mut().zip(g).zip(&node.value) {
                    *dv += gv * y * (1.0 - y);
                }
            }),
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |d| {
                    for ((dv, gv), &xi) in d.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Elu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |d| {
                    for (((dv, gv), &xi), y) in d.iter_mut().zip(g).zip(xv).zip(&node.value) {
                        *dv += if xi > 0.0 { *gv } else { gv * (y + ELU_ALPHA) };
                    }
                });
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let k = 2.0 * g[0] / pv.len() as f64;
                acc(*p, &mut |d| d.iter_mut().zip(pv.iter().zip(tv)).for_each(|(d, (a, b))| *d += k * (a - b)));
                acc(*t, &mut |d| d.iter_mut().zip(pv.iter().zip(tv)).for_each(|(d, (a, b))| *d -= k * (a - b)));
            }
            Op::ChannelNorm {
                x,
                channels,
                len,
                peak,
                denom,
            } => acc(*x, &mut |d| {
                let n = *len as f64;
                for c in 0..*channels {
                    let y = &node.value[c * len..(c + 1) * len];
                    let gr = &g[c * len..(c + 1) * len];
                    let dd = denom[c];
                    // y = u / D with u = x - mean, D = |u_p| + eps.
                    let gsum: f64 = gr.iter().sum();
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    let sign = y[peak[c]].signum();
                    let row = &mut d[c * len..(c + 1) * len];
                    for (i, dv) in row.iter_mut().enumerate() {
                        let mut v = (gr[i] - gsum / n) / dd;
                        // dD/dx_i = sign (δ_ip - 1/n)
                        let dmask = if i == peak[c] { 1.0 } else { 0.0 };
                        v -= dot / dd * sign * (dmask - 1.0 / n);
                        *dv += v;
                    }
                }
            }),
            Op::Rdwt {
                x,
                channels,
                levels,
                bank,
            } => acc(*x, &mut |d| {
                let len = node.shape[2];
                let bands = levels + 1;
                for c in 0..*channels {
                    let block = &g[c * bands * len..(c + 1) * bands * len];
                    let planes: Vec<Vec<f64>> = block.chunks(len).map(<[f64]>::to_vec).collect();
                    let gx = rdwt::forward_adjoint_1d(&planes, bank).expect("shape checked in forward");
                    add_into(&mut d[c * len..(c + 1) * len], &gx);
                }
            }),
            Op::Irdwt {
                x,
                channels,
                levels,
                bank,
            } => acc(*x, &mut |d| {
                let len = node.shape[1];
                let bands = levels + 1;
                for c in 0..*channels {
                    let planes = rdwt::inverse_adjoint_1d(&g[c * len..(c + 1) * len], *levels, bank)
                        .expect("shape checked in forward");
                    for (band, p) in planes.iter().enumerate() {
                        let s = (c * bands + band) * len;
                        add_into(&mut d[s..s + len], p);
                    }
                }
            }),
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                geom,
                cache,
            } => {
                let lg = lstm::lstm_backward(
                    geom,
                    self.value(*x),
                    self.value(*w_ih),
                    self.value(*w_hh),
                    &node.value,
                    cache,
                    g,
                );
                acc(*x, &mut |d| add_into(d, &lg.x));
                acc(*w_ih, &mut |d| add_into(d, &lg.w_ih));
                acc(*w_hh, &mut |d| add_into(d, &lg.w_hh));
                acc(*b, &mut |d| add_into(d, &lg.b));
            }
        }
    }
}

pub const CHANNEL_NORM_EPS: f64 = 1e-8;

/// LSTM parameters for one direction.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
}

/// One LSTM step built from primitive ops; `x: [1, F]`, `h, c: [1, H]`.
pub fn lstm_cell(tape: &mut Tape, x: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let units = tape.shape(h)[1];
    let zx = tape.matmul(x, p.w_ih)?;
    let zh = tape.matmul(h, p.w_hh)?;
    let b = tape.reshape(p.b, &[1, 4 * units])?;
    let z0 = tape.add(zx, zh)?;
    let z = tape.add(z0, b)?;
    let gate = |tape: &mut Tape, k: usize| tape.slice(z, 1, k * units, units);
    let zi = gate(tape, 0)?;
    let zf = gate(tape, 1)?;
    let zg = gate(tape, 2)?;
    let zo = gate(tape, 3)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let g = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// LSTM layer unrolled through [`lstm_cell`]; returns `[T, H]` like [`Tape::lstm`].
pub fn lstm_unrolled(tape: &mut Tape, x: Var, p: &LstmParams, reverse: bool) -> Result<Var> {
    let steps = tape.shape(x)[0];
    if steps == 0 {
        return Err(Error::EmptyInput("lstm sequence"));
    }
    let units = tape.shape(p.w_hh)[0];
    let mut h = tape.constant(vec![0.0; units], &[1, units])?;
    let mut c = tape.constant(vec![0.0; units], &[1, units])?;
    let mut outs = vec![None; steps];
    for step in 0..steps {
        let t = if reverse { steps - 1 - step } else { step };
        let xt = tape.slice(x, 0, t, 1)?;
        let (hn, cn) = lstm_cell(tape, xt, h, c, p)?;
        outs[t] = Some(hn);
        h = hn;
        c = cn;
    }
    let outs: Vec<Var> = outs.into_iter().map(|v| v.expect("every step visited")).collect();
    tape.concat(&outs, 0)
}
