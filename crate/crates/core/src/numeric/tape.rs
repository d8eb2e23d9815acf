//! Operation tape for one forward/backward pass.
//!
//! Each op appends a node holding its output value and enough bookkeeping to
//! run the reverse pass. A tape lives for a single training or inference
//! step and is not shared across steps.

use std::sync::Arc;

use super::{NumericError, Tensor};
use crate::exec;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Index marking a gathered row as absent; the row reads as zeros and the
/// reverse pass skips it.
pub const GATHER_PAD: usize = usize::MAX;

/// Row count above which elementwise/row-wise kernels use the parallel map.
const PAR_MIN_ELEMS: usize = 1 << 14;

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: f64 },
    AddRow { x: Var, row: Var },
    ConcatLast { xs: Vec<Var>, widths: Vec<usize> },
    Gather { x: Var, idx: Arc<Vec<usize>> },
    Reshape { x: Var },
    MaxAxis1 { x: Var, argmax: Vec<u32> },
    SoftmaxAxis { x: Var, axis: usize },
    SumAxis0 { x: Var },
    SumAxis1 { x: Var },
    SumAll { x: Var },
    Exp { x: Var },
    Neg { x: Var },
    L1Norm { x: Var },
    L2Norm { x: Var },
    QuatNormalize { x: Var, fellback: bool },
    Hamilton { a: Var, b: Var },
    RotateVecs { q: Var, pts: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. `v`, if any was accumulated.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref()
                .map(|data| Tensor::new(self.nodes[v.0].value.shape().to_vec(), data.clone()).unwrap())
        })
    }

    /// Gradient of the last backward pass, zeros when untouched.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, NumericError> {
        if !value.is_finite() {
            return Err(NumericError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers an input tensor that does not require gradients.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, NumericError> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Registers a parameter leaf; [`Tape::backward`] fills its gradient.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var, NumericError> {
        self.push("leaf", t, Op::Leaf, true)
    }

    /// `y = x W + b` over the last axis; leading axes are batch dims.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericError> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if ws.len() != 2 || bs.len() != 1 || xs.is_empty() {
            return Err(NumericError::ShapeMismatch {
                op: "linear",
                detail: format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            });
        }
        let (fan_in, fan_out) = (ws[0], ws[1]);
        if *xs.last().unwrap() != fan_in || bs[0] != fan_out {
            return Err(NumericError::ShapeMismatch {
                op: "linear",
                detail: format!("x {xs:?} vs w {ws:?}, b {bs:?}"),
            });
        }
        let rows = self.value(x).numel() / fan_in;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = fan_out;

        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; rows * fan_out];
        exec_rows(&mut out, fan_out, rows * fan_in * fan_out, |r, yrow| {
            yrow.copy_from_slice(bd);
            let xrow = &xd[r * fan_in..(r + 1) * fan_in];
            for (i, &xi) in xrow.iter().enumerate() {
                let wrow = &wd[i * fan_out..(i + 1) * fan_out];
                for (y, &wv) in yrow.iter_mut().zip(wrow) {
                    *y += xi * wv;
                }
            }
        });
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push("linear", Tensor::new(out_shape, out)?, Op::Linear { x, w, b }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericError> {
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|&a| a.max(0.0)).collect();
        let needs = self.needs(x);
        self.push("relu", Tensor::new(v.shape().to_vec(), out)?, Op::Relu { x }, needs)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumericError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(name, Tensor::new(va.shape().to_vec(), out)?, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var, NumericError> {
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|&a| a * k).collect();
        let needs = self.needs(x);
        self.push("scale", Tensor::new(v.shape().to_vec(), out)?, Op::Scale { x, k }, needs)
    }

    /// `[n, d] + [d]`, broadcasting the row over the leading axis.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericError> {
        let (vx, vr) = (self.value(x), self.value(row));
        let d = *vx.shape().last().unwrap_or(&0);
        if vr.shape().len() != 1 || vr.shape()[0] != d || vx.shape().len() < 2 {
            return Err(NumericError::ShapeMismatch {
                op: "add_row",
                detail: format!("{:?} + {:?}", vx.shape(), vr.shape()),
            });
        }
        let rd = vr.data();
        let out: Vec<f64> = vx
            .data()
            .chunks(d)
            .flat_map(|c| c.iter().zip(rd).map(|(&a, &b)| a + b))
            .collect();
        let needs = self.needs(x) || self.needs(row);
        self.push("add_row", Tensor::new(vx.shape().to_vec(), out)?, Op::AddRow { x, row }, needs)
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var, NumericError> {
        if xs.is_empty() {
            return Err(NumericError::ShapeMismatch {
                op: "concat_last",
                detail: "no inputs".into(),
            });
        }
        let lead = self.value(xs[0]).shape()[..self.value(xs[0]).shape().len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.value(v).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(NumericError::ShapeMismatch {
                    op: "concat_last",
                    detail: format!("leading dims differ: {lead:?} vs {s:?}"),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(
            "concat_last",
            Tensor::new(shape, out)?,
            Op::ConcatLast { xs: xs.to_vec(), widths },
            needs,
        )
    }

    /// Selects rows of a `[m, d]` tensor; [`GATHER_PAD`] yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var, NumericError> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(NumericError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("want rank 2, got {:?}", v.shape()),
            });
        }
        let (m, d) = (v.shape()[0], v.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i != GATHER_PAD && i >= m) {
            return Err(NumericError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("index {bad} out of range for {m} rows"),
            });
        }
        let xd = v.data();
        let n = idx.len();
        let mut out = vec![0.0; n * d];
        let idx_fwd = Arc::clone(&idx);
        exec_rows(&mut out, d, n * d, |r, dst| {
            let i = idx_fwd[r];
            if i != GATHER_PAD {
                dst.copy_from_slice(&xd[i * d..(i + 1) * d]);
            }
        });
        let needs = self.needs(x);
        self.push("gather_rows", Tensor::new(vec![n, d], out)?, Op::Gather { x, idx }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, NumericError> {
        let v = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(NumericError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", v.shape()),
            });
        }
        let t = Tensor::new(shape, v.data().to_vec())?;
        let needs = self.needs(x);
        self.push("reshape", t, Op::Reshape { x }, needs)
    }

    /// Max over the middle axis of `[n, k, c]`; gradient flows to the first
    /// maximal element of each lane. Also returns the argmax indices.
    pub fn max_axis1(&mut self, x: Var) -> Result<(Var, Vec<u32>), NumericError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 {
            return Err(NumericError::ShapeMismatch {
                op: "max_axis1",
                detail: format!("want rank 3, got {s:?}"),
            });
        }
        let (n, k, c) = (s[0], s[1], s[2]);
        if k == 0 {
            return Err(NumericError::EmptyAxis { op: "max_axis1" });
        }
        let xd = v.data();
        let mut out = vec![0.0; n * c];
        let mut argmax = vec![0u32; n * c];
        for i in 0..n {
            let base = i * k * c;
            out[i * c..(i + 1) * c].copy_from_slice(&xd[base..base + c]);
            for kk in 1..k {
                for j in 0..c {
                    let cand = xd[base + kk * c + j];
                    if cand > out[i * c + j] {
                        out[i * c + j] = cand;
                        argmax[i * c + j] = kk as u32;
                    }
                }
            }
        }
        let needs = self.needs(x);
        let var = self.push(
            "max_axis1",
            Tensor::new(vec![n, c], out)?,
            Op::MaxAxis1 { x, argmax: argmax.clone() },
            needs,
        )?;
        Ok((var, argmax))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericError> {
        let v = self.value(x);
        let s = v.shape().to_vec();
        if axis >= s.len() {
            return Err(NumericError::ShapeMismatch {
                op: "softmax_axis",
                detail: format!("axis {axis} for shape {s:?}"),
            });
        }
        if s[axis] == 0 {
            return Err(NumericError::EmptyAxis { op: "softmax_axis" });
        }
        let mut out = v.data().to_vec();
        for_each_lane(&s, axis, |lane| {
            let mut mx = f64::NEG_INFINITY;
            for &i in lane {
                mx = mx.max(out[i]);
            }
            let mut sum = 0.0;
            for &i in lane {
                out[i] = (out[i] - mx).exp();
                sum += out[i];
            }
            for &i in lane {
                out[i] /= sum;
            }
        });
        let needs = self.needs(x);
        self.push("softmax_axis", Tensor::new(s, out)?, Op::SoftmaxAxis { x, axis }, needs)
    }

    /// Collapses the leading axis by summation: `[n, ...] -> [...]`.
    pub fn sum_axis0(&mut self, x: Var) -> Result<Var, NumericError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 2 {
            return Err(NumericError::ShapeMismatch {
                op: "sum_axis0",
                detail: format!("want rank >= 2, got {s:?}"),
            });
        }
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        let xd = v.data();
        let mut out = vec![0.0; rest];
        for r in 0..n {
            for (o, &x) in out.iter_mut().zip(&xd[r * rest..(r + 1) * rest]) {
                *o += x;
            }
        }
        let needs = self.needs(x);
        self.push("sum_axis0", Tensor::new(s[1..].to_vec(), out)?, Op::SumAxis0 { x }, needs)
    }

    /// `[n, k, c] -> [n, c]` by summing the middle axis.
    pub fn sum_axis1(&mut self, x: Var) -> Result<Var, NumericError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 {
            return Err(NumericError::ShapeMismatch {
                op: "sum_axis1",
                detail: format!("want rank 3, got {s:?}"),
            });
        }
        let (n, k, c) = (s[0], s[1], s[2]);
        let xd = v.data();
        let mut out = vec![0.0; n * c];
        exec_rows(&mut out, c, n * k * c, |i, dst| {
            let base = i * k * c;
            for kk in 0..k {
                for (d, &x) in dst.iter_mut().zip(&xd[base + kk * c..base + (kk + 1) * c]) {
                    *d += x;
                }
            }
        });
        let needs = self.needs(x);
        self.push("sum_axis1", Tensor::new(vec![n, c], out)?, Op::SumAxis1 { x }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, NumericError> {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push("sum_all", Tensor::scalar(total), Op::SumAll { x }, needs)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericError> {
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|&a| a.exp()).collect();
        let needs = self.needs(x);
        self.push("exp", Tensor::new(v.shape().to_vec(), out)?, Op::Exp { x }, needs)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, NumericError> {
        let v = self.value(x);
        let out: Vec<f64> = v.data().iter().map(|&a| -a).collect();
        let needs = self.needs(x);
        self.push("neg", Tensor::new(v.shape().to_vec(), out)?, Op::Neg { x }, needs)
    }

    /// Sum of absolute values; subgradient 0 at exact zeros.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var, NumericError> {
        let total: f64 = self.value(x).data().iter().map(|a| a.abs()).sum();
        let needs = self.needs(x);
        self.push("l1_norm", Tensor::scalar(total), Op::L1Norm { x }, needs)
    }

    pub fn l2_norm(&mut self, x: Var) -> Result<Var, NumericError> {
        let total: f64 = self.value(x).data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let needs = self.needs(x);
        self.push("l2_norm", Tensor::scalar(total), Op::L2Norm { x }, needs)
    }

    /// Normalizes a length-4 vector to the unit sphere. A near-zero input
    /// (norm <= 1e-12) falls back to the identity quaternion with zero
    /// gradient instead of dividing by zero.
    pub fn quat_normalize(&mut self, x: Var) -> Result<Var, NumericError> {
        let v = self.value(x);
        if v.shape() != [4] {
            return Err(NumericError::ShapeMismatch {
                op: "quat_normalize",
                detail: format!("want [4], got {:?}", v.shape()),
            });
        }
        let d = v.data();
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + d[3] * d[3]).sqrt();
        let (out, fellback) = if n <= 1e-12 {
            (vec![1.0, 0.0, 0.0, 0.0], true)
        } else {
            (d.iter().map(|&a| a / n).collect(), false)
        };
        let needs = self.needs(x);
        self.push(
            "quat_normalize",
            Tensor::new(vec![4], out)?,
            Op::QuatNormalize { x, fellback },
            needs,
        )
    }

    /// Hamilton product of two `[4]` quaternions (scalar-first).
    pub fn hamilton(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        if self.value(a).shape() != [4] || self.value(b).shape() != [4] {
            return Err(NumericError::ShapeMismatch {
                op: "hamilton",
                detail: format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let p = self.value(a).data();
        let q = self.value(b).data();
        let out = vec![
            p[0] * q[0] - p[1] * q[1] - p[2] * q[2] - p[3] * q[3],
            p[0] * q[1] + p[1] * q[0] + p[2] * q[3] - p[3] * q[2],
            p[0] * q[2] - p[1] * q[3] + p[2] * q[0] + p[3] * q[1],
            p[0] * q[3] + p[1] * q[2] - p[2] * q[1] + p[3] * q[0],
        ];
        let needs = self.needs(a) || self.needs(b);
        self.push("hamilton", Tensor::new(vec![4], out)?, Op::Hamilton { a, b }, needs)
    }

    /// Applies the quaternion sandwich rotation to `[n, 3]` points:
    /// `p + 2 w (v x p) + 2 v x (v x p)`. Callers pass a unit quaternion;
    /// the polynomial itself is what is differentiated.
    pub fn rotate_vecs(&mut self, q: Var, pts: Var) -> Result<Var, NumericError> {
        let qs = self.value(q).shape().to_vec();
        let ps = self.value(pts).shape().to_vec();
        if qs != [4] || ps.len() != 2 || ps[1] != 3 {
            return Err(NumericError::ShapeMismatch {
                op: "rotate_vecs",
                detail: format!("q {qs:?}, pts {ps:?}"),
            });
        }
        let qd = self.value(q).data().to_vec();
        let pd = self.value(pts).data();
        let n = ps[0];
        let mut out = vec![0.0; n * 3];
        exec_rows(&mut out, 3, n * 3, |i, dst| {
            let p = [pd[i * 3], pd[i * 3 + 1], pd[i * 3 + 2]];
            dst.copy_from_slice(&rotate_poly(&qd, &p));
        });
        let needs = self.needs(q) || self.needs(pts);
        self.push("rotate_vecs", Tensor::new(ps, out)?, Op::RotateVecs { q, pts }, needs)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate for every node
    /// on a path from a `requires_grad` leaf to the loss; leaves left
    /// untouched read back as zeros via [`Tape::grad_or_zeros`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericError> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(NumericError::NonScalarLoss { numel });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.accumulate(i, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(
        &self,
        node: usize,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<(), NumericError> {
        let add_to = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; contrib.len()]);
            for (g, &c) in slot.iter_mut().zip(contrib) {
                *g += c;
            }
        };
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (fan_in, fan_out) = {
                    let ws = self.value(*w).shape();
                    (ws[0], ws[1])
                };
                let rows = self.value(*x).numel() / fan_in;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                if self.needs(*x) {
                    let mut gx = vec![0.0; rows * fan_in];
                    exec_rows(&mut gx, fan_in, rows * fan_in * fan_out, |r, dst| {
                        let gyr = &gy[r * fan_out..(r + 1) * fan_out];
                        for (i, d) in dst.iter_mut().enumerate() {
                            let wrow = &wd[i * fan_out..(i + 1) * fan_out];
                            *d = gyr.iter().zip(wrow).map(|(&g, &wv)| g * wv).sum();
                        }
                    });
                    add_to(grads, *x, &gx);
                }
                if self.needs(*w) {
                    let gw = ordered_row_reduce(rows, fan_in * fan_out, |r, acc| {
                        let xr = &xd[r * fan_in..(r + 1) * fan_in];
                        let gyr = &gy[r * fan_out..(r + 1) * fan_out];
                        for (i, &xi) in xr.iter().enumerate() {
                            for (a, &g) in acc[i * fan_out..(i + 1) * fan_out].iter_mut().zip(gyr) {
                                *a += xi * g;
                            }
                        }
                    });
                    add_to(grads, *w, &gw);
                }
                if self.needs(*b) {
                    let gb = ordered_row_reduce(rows, fan_out, |r, acc| {
                        for (a, &g) in acc.iter_mut().zip(&gy[r * fan_out..(r + 1) * fan_out]) {
                            *a += g;
                        }
                    });
                    add_to(grads, *b, &gb);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let gx: Vec<f64> = xd
                        .iter()
                        .zip(gy)
                        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    add_to(grads, *x, &gx);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_to(grads, *a, gy);
                }
                if self.needs(*b) {
                    add_to(grads, *b, gy);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    add_to(grads, *a, gy);
                }
                if self.needs(*b) {
                    let neg: Vec<f64> = gy.iter().map(|&g| -g).collect();
                    add_to(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bd = self.value(*b).data();
                    let ga: Vec<f64> = gy.iter().zip(bd).map(|(&g, &v)| g * v).collect();
                    add_to(grads, *a, &ga);
                }
                if self.needs(*b) {
                    let ad = self.value(*a).data();
                    let gb: Vec<f64> = gy.iter().zip(ad).map(|(&g, &v)| g * v).collect();
                    add_to(grads, *b, &gb);
                }
            }
            Op::Scale { x, k } => {
                if self.needs(*x) {
                    let gx: Vec<f64> = gy.iter().map(|&g| g * k).collect();
                    add_to(grads, *x, &gx);
                }
            }
            Op::AddRow { x, row } => {
                if self.needs(*x) {
                    add_to(grads, *x, gy);
                }
                if self.needs(*row) {
                    let d = self.value(*row).numel();
                    let mut gr = vec![0.0; d];
                    for chunk in gy.chunks(d) {
                        for (g, &c) in gr.iter_mut().zip(chunk) {
                            *g += c;
                        }
                    }
                    add_to(grads, *row, &gr);
                }
            }
            Op::ConcatLast { xs, widths } => {
                let total: usize = widths.iter().sum();
                let rows = gy.len() / total;
                let mut offset = 0;
                for (&v, &w) in xs.iter().zip(widths) {
                    if self.needs(v) {
                        let mut gx = vec![0.0; rows * w];
                        for r in 0..rows {
                            gx[r * w..(r + 1) * w]
                                .copy_from_slice(&gy[r * total + offset..r * total + offset + w]);
                        }
                        add_to(grads, v, &gx);
                    }
                    offset += w;
                }
            }
            Op::Gather { x, idx } => {
                if self.needs(*x) {
                    let d = self.value(*x).shape()[1];
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        if i != GATHER_PAD {
                            for (g, &c) in gx[i * d..(i + 1) * d].iter_mut().zip(&gy[r * d..(r + 1) * d]) {
                                *g += c;
                            }
                        }
                    }
                    add_to(grads, *x, &gx);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    add_to(grads, *x, gy);
                }
            }
            Op::MaxAxis1 { x, argmax } => {
                if self.needs(*x) {
                    let s = self.value(*x).shape();
                    let (k, c) = (s[1], s[2]);
                    let mut gx = vec![0.0; self.value(*x).numel()];
                    for (lane, &am) in argmax.iter().enumerate() {
                        let (i, j) = (lane / c, lane % c);
                        gx[i * k * c + am as usize * c + j] += gy[lane];
                    }
                    add_to(grads, *x, &gx);
                }
            }
            Op::SoftmaxAxis { x, axis } => {
                if self.needs(*x) {
                    let y = self.nodes[node].value.data();
                    let s = self.value(*x).shape().to_vec();
                    let mut gx = vec![0.0; y.len()];
                    for_each_lane(&s, *axis, |lane| {
                        let dot: f64 = lane.iter().map(|&i| gy[i] * y[i]).sum();
                        for &i in lane {
                            gx[i] = y[i] * (gy[i] - dot);
                        }
                    });
                    add_to(grads, *x, &gx);
                }
            }
            Op::SumAxis0 { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).shape()[0];
                    let rest = gy.len();
                    let mut gx = vec![0.0; n * rest];
                    for r in 0..n {
                        gx[r * rest..(r + 1) * rest].copy_from_slice(gy);
                    }
                    add_to(grads, *x, &gx);
                }
            }
            Op::SumAxis1 { x } => {
                if self.needs(*x) {
                    let s = self.value(*x).shape();
                    let (n, k, c) = (s[0], s[1], s[2]);
                    let mut gx = vec![0.0; n * k * c];
                    for i in 0..n {
                        for kk in 0..k {
                            gx[i * k * c + kk * c..i * k * c + (kk + 1) * c]
                                .copy_from_slice(&gy[i * c..(i + 1) * c]);
                        }
                    }
                    add_to(grads, *x, &gx);
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let gx = vec![gy[0]; self.value(*x).numel()];
                    add_to(grads, *x, &gx);
                }
            }
            Op::Exp { x } => {
                if self.needs(*x) {
                    let y = self.nodes[node].value.data();
                    let gx: Vec<f64> = gy.iter().zip(y).map(|(&g, &v)| g * v).collect();
                    add_to(grads, *x, &gx);
                }
            }
            Op::Neg { x } => {
                if self.needs(*x) {
                    let gx: Vec<f64> = gy.iter().map(|&g| -g).collect();
                    add_to(grads, *x, &gx);
                }
            }
            Op::L1Norm { x } => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let gx: Vec<f64> = xd.iter().map(|&v| gy[0] * sign(v)).collect();
                    add_to(grads, *x, &gx);
                }
            }
            Op::L2Norm { x } => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    let n = self.nodes[node].value.item().max(1e-12);
                    let gx: Vec<f64> = xd.iter().map(|&v| gy[0] * v / n).collect();
                    add_to(grads, *x, &gx);
                }
            }
            Op::QuatNormalize { x, fellback } => {
                if self.needs(*x) && !fellback {
                    let xd = self.value(*x).data();
                    let y = self.nodes[node].value.data();
                    let n = (xd.iter().map(|v| v * v).sum::<f64>()).sqrt();
                    let dot: f64 = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    let gx: Vec<f64> = y.iter().zip(gy).map(|(&yi, &gi)| (gi - yi * dot) / n).collect();
                    add_to(grads, *x, &gx);
                }
            }
            Op::Hamilton { a, b } => {
                let p = self.value(*a).data();
                let q = self.value(*b).data();
                if self.needs(*a) {
                    // d(p*q)/dp: columns of the right-multiplication matrix
                    let ga = vec![
                        gy[0] * q[0] + gy[1] * q[1] + gy[2] * q[2] + gy[3] * q[3],
                        -gy[0] * q[1] + gy[1] * q[0] - gy[2] * q[3] + gy[3] * q[2],
                        -gy[0] * q[2] + gy[1] * q[3] + gy[2] * q[0] - gy[3] * q[1],
                        -gy[0] * q[3] - gy[1] * q[2] + gy[2] * q[1] + gy[3] * q[0],
                    ];
                    add_to(grads, *a, &ga);
                }
                if self.needs(*b) {
                    let gb = vec![
                        gy[0] * p[0] + gy[1] * p[1] + gy[2] * p[2] + gy[3] * p[3],
                        -gy[0] * p[1] + gy[1] * p[0] + gy[2] * p[3] - gy[3] * p[2],
                        -gy[0] * p[2] - gy[1] * p[3] + gy[2] * p[0] + gy[3] * p[1],
                        -gy[0] * p[3] + gy[1] * p[2] - gy[2] * p[1] + gy[3] * p[0],
                    ];
                    add_to(grads, *b, &gb);
                }
            }
            Op::RotateVecs { q, pts } => {
                let qd = self.value(*q).data();
                let pd = self.value(*pts).data();
                let n = self.value(*pts).shape()[0];
                let (w, v) = (qd[0], [qd[1], qd[2], qd[3]]);
                if self.needs(*pts) {
                    // dy/dp = I + 2w [v]x + 2 [v]x^2; transpose applied to gy
                    let m = rotate_jacobian_p(w, &v);
                    let mut gp = vec![0.0; n * 3];
                    exec_rows(&mut gp, 3, n * 3, |i, dst| {
                        let g = &gy[i * 3..(i + 1) * 3];
                        for (r, d) in dst.iter_mut().enumerate() {
                            *d = m[0][r] * g[0] + m[1][r] * g[1] + m[2][r] * g[2];
                        }
                    });
                    add_to(grads, *pts, &gp);
                }
                if self.needs(*q) {
                    let mut gq = [0.0; 4];
                    for i in 0..n {
                        let p = [pd[i * 3], pd[i * 3 + 1], pd[i * 3 + 2]];
                        let g = [gy[i * 3], gy[i * 3 + 1], gy[i * 3 + 2]];
                        let vxp = crate::geometry::cross3(&v, &p);
                        gq[0] += 2.0 * (vxp[0] * g[0] + vxp[1] * g[1] + vxp[2] * g[2]);
                        // dy/dv = -2w [p]x + 2((v.p) I + v p^T - 2 p v^T)
                        let vp = crate::geometry::dot3(&v, &p);
                        for r in 0..3 {
                            for cc in 0..3 {
                                let mut jac = 2.0 * (v[r] * p[cc] - 2.0 * p[r] * v[cc]);
                                if r == cc {
                                    jac += 2.0 * vp;
                                }
                                jac += -2.0 * w * skew(&p, r, cc);
                                gq[1 + cc] += jac * g[r];
                            }
                        }
                    }
                    add_to(grads, *q, &gq);
                }
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Entry `(r, c)` of the skew matrix `[p]x`.
fn skew(p: &[f64; 3], r: usize, c: usize) -> f64 {
    match (r, c) {
        (0, 1) => -p[2],
        (0, 2) => p[1],
        (1, 0) => p[2],
        (1, 2) => -p[0],
        (2, 0) => -p[1],
        (2, 1) => p[0],
        _ => 0.0,
    }
}

fn rotate_poly(q: &[f64], p: &[f64; 3]) -> [f64; 3] {
    let v = [q[1], q[2], q[3]];
    let t = crate::geometry::cross3(&v, p);
    let t2 = crate::geometry::cross3(&v, &t);
    [
        p[0] + 2.0 * (q[0] * t[0] + t2[0]),
        p[1] + 2.0 * (q[0] * t[1] + t2[1]),
        p[2] + 2.0 * (q[0] * t[2] + t2[2]),
    ]
}

/// Jacobian of the rotation polynomial w.r.t. the point.
fn rotate_jacobian_p(w: f64, v: &[f64; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, entry) in row.iter_mut().enumerate() {
            let mut val = if r == c { 1.0 } else { 0.0 };
            val += 2.0 * w * skew(v, r, c);
            // [v]x^2 = v v^T - (v.v) I
            let vv = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            val += 2.0 * (v[r] * v[c] - if r == c { vv } else { 0.0 });
            *entry = val;
        }
    }
    m
}

/// Runs `f` once per `chunk`-sized row of `out`, in parallel for large
/// workloads. Rows are disjoint, so outputs never depend on scheduling.
fn exec_rows(out: &mut [f64], chunk: usize, work: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
    if chunk == 0 || out.is_empty() {
        return;
    }
    if work < PAR_MIN_ELEMS {
        for (r, dst) in out.chunks_mut(chunk).enumerate() {
            f(r, dst);
        }
        return;
    }
    let rows = out.len() / chunk;
    let computed = exec::map(rows, |r| {
        let mut dst = vec![0.0; chunk];
        f(r, &mut dst);
        dst
    });
    for (r, dst) in computed.into_iter().enumerate() {
        out[r * chunk..(r + 1) * chunk].copy_from_slice(&dst);
    }
}

/// Deterministic reduction over rows: per-chunk partial accumulators are
/// combined in chunk order, independent of thread count.
fn ordered_row_reduce(rows: usize, acc_len: usize, f: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    const CHUNK: usize = 256;
    if rows * acc_len < PAR_MIN_ELEMS || rows <= CHUNK {
        let mut acc = vec![0.0; acc_len];
        for r in 0..rows {
            f(r, &mut acc);
        }
        return acc;
    }
    let n_chunks = rows.div_ceil(CHUNK);
    let partials = exec::map(n_chunks, |ci| {
        let mut acc = vec![0.0; acc_len];
        for r in ci * CHUNK..((ci + 1) * CHUNK).min(rows) {
            f(r, &mut acc);
        }
        acc
    });
    let mut acc = vec![0.0; acc_len];
    for partial in partials {
        for (a, p) in acc.iter_mut().zip(&partial) {
            *a += p;
        }
    }
    acc
}

/// Visits every 1D lane along `axis` of a tensor with the given shape,
/// passing element indices lane by lane.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut lane = vec![0usize; axis_len];
    for o in 0..outer {
        for i in 0..inner {
            for (t, slot) in lane.iter_mut().enumerate() {
                *slot = o * axis_len * inner + t * inner + i;
            }
            f(&lane);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_example() {
        let mut g = Tape::new();
        let x = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_example() {
        let mut g = Tape::new();
        let x = g.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let w = g.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0])).unwrap();
        let b = g.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, 9.0]);
    }

    #[test]
    fn linear_batched_matches_rowwise() {
        let mut g = Tape::new();
        let x = g.constant(t(&[2, 2, 3], &[0.5, -1.0, 2.0, 0.0, 1.0, 1.0, 3.0, -2.0, 0.25, 1.0, 1.0, 1.0])).unwrap();
        let w = g.constant(t(&[3, 2], &[1.0, -1.0, 0.5, 2.0, 0.0, 1.0])).unwrap();
        let b = g.constant(t(&[2], &[0.1, -0.2])).unwrap();
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2, 2]);
        // first row: [0.5 - 0.5 + 0.1, -0.5 - 2 + 2 - 0.2]
        let d = g.value(y).data();
        assert!((d[0] - 0.1).abs() < 1e-12);
        assert!((d[1] - (-0.7)).abs() < 1e-12);
    }

    #[test]
    fn relu_example() {
        let mut g = Tape::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Tape::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        assert!(matches!(
            g.linear(x, w, b),
            Err(NumericError::ShapeMismatch { op: "linear", .. })
        ));
    }

    #[test]
    fn max_axis1_examples() {
        let mut g = Tape::new();
        // K = 1 is the identity
        let x = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let (y, _) = g.max_axis1(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

        // [[1,5],[3,2]] over the K axis -> [3,5]
        let x = g.constant(t(&[1, 2, 2], &[1.0, 5.0, 3.0, 2.0])).unwrap();
        let (y, argmax) = g.max_axis1(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
        assert_eq!(argmax, vec![1, 0]);
    }

    #[test]
    fn max_axis1_tie_routes_to_first() {
        let mut g = Tape::new();
        let x = g.leaf(t(&[1, 2, 1], &[7.0, 7.0])).unwrap();
        let (y, argmax) = g.max_axis1(x).unwrap();
        assert_eq!(argmax, vec![0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Tape::new();
        let x = g.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax_axis(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[2], &[2.0f64.ln(), 0.0])).unwrap();
        let y = g.softmax_axis(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut g = Tape::new();
        let vals = [0.3, -1.2, 4.0, 0.0, 2.5, -0.7];
        let x = g.constant(t(&[2, 3], &vals)).unwrap();
        let y = g.softmax_axis(x, 1).unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 11.5).collect();
        let xs = g.constant(t(&[2, 3], &shifted)).unwrap();
        let ys = g.softmax_axis(xs, 1).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(ys).data()) {
            assert!((a - b).abs() < 1e-7);
        }
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Tape::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Tape::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn untouched_leaf_reads_zero_gradient() {
        let mut g = Tape::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let unused = g.leaf(t(&[3], &[1.0, 1.0, 1.0])).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad_or_zeros(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Tape::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(
            g.backward(x),
            Err(NumericError::NonScalarLoss { numel: 2 })
        ));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Tape::new();
        let x = g.constant(t(&[1], &[1e308])).unwrap();
        let y = g.scale(x, 10.0);
        assert!(matches!(y, Err(NumericError::NonFinite { op: "scale" })));
    }

    #[test]
    fn gather_pads_with_zeros_and_scatters_back() {
        let mut g = Tape::new();
        let x = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = g
            .gather_rows(x, Arc::new(vec![1, GATHER_PAD, 1]))
            .unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn hamilton_matches_geometry() {
        let a = crate::geometry::Quaternion::new(0.3, -0.4, 0.5, 0.6);
        let b = crate::geometry::Quaternion::new(-0.2, 0.9, 0.1, 0.4);
        let expect = a.hamilton(&b);
        let mut g = Tape::new();
        let va = g.constant(t(&[4], &[a.w, a.x, a.y, a.z])).unwrap();
        let vb = g.constant(t(&[4], &[b.w, b.x, b.y, b.z])).unwrap();
        let y = g.hamilton(va, vb).unwrap();
        let d = g.value(y).data();
        for (got, want) in d.iter().zip([expect.w, expect.x, expect.y, expect.z]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rotate_vecs_matches_geometry() {
        let q = crate::geometry::quat_normalize(&crate::geometry::Quaternion::new(0.8, 0.3, -0.2, 0.5)).unwrap();
        let pts = [[1.0, 2.0, 3.0], [-0.5, 0.25, 4.0]];
        let mut g = Tape::new();
        let vq = g.constant(t(&[4], &[q.w, q.x, q.y, q.z])).unwrap();
        let vp = g.constant(Tensor::from_points(&pts)).unwrap();
        let y = g.rotate_vecs(vq, vp).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let want = crate::geometry::quat_rotate(&q, p).unwrap();
            for k in 0..3 {
                assert!((g.value(y).data()[i * 3 + k] - want[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quat_normalize_fallback_gives_identity_and_zero_grad() {
        let mut g = Tape::new();
        let x = g.leaf(t(&[4], &[0.0, 0.0, 0.0, 0.0])).unwrap();
        let y = g.quat_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 0.0]);
        let loss = g.sum_all(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad_or_zeros(x).data(), &[0.0; 4]);
    }

    #[test]
    fn forward_values_are_thread_count_independent() {
        let data: Vec<f64> = (0..6000).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = || {
            let mut g = Tape::new();
            let x = g.constant(t(&[2000, 3], &data)).unwrap();
            let w = g.constant(t(&[3, 5], &(0..15).map(|i| (i as f64).cos()).collect::<Vec<_>>())).unwrap();
            let b = g.constant(t(&[5], &[0.1; 5])).unwrap();
            let y = g.linear(x, w, b).unwrap();
            let s = g.sum_all(y).unwrap();
            g.value(s).item()
        };
        let par = run();
        let seq = crate::exec::with_sequential(run);
        assert_eq!(par.to_bits(), seq.to_bits());
    }
}
