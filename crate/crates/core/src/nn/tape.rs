//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the reverse sweep. Nodes only reference earlier nodes, so the
//! tape is a topologically ordered DAG and a single reverse pass visits each
//! node once.
//!
//! Parameters are leaves registered by name and tagged with a group bit.
//! Each node carries the union of the groups it depends on, which lets
//! [`Tape::backward_many`] run several reverse sweeps that each touch only
//! the part of the graph that reaches the requested parameter group.

use std::collections::{BTreeMap, HashMap};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::warp::{pullback_trajectory, shoot, FlowTrajectory, KernelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

const IN_EPS: f64 = 1e-9;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulConst(NodeId, Vec<f64>),
    Sigmoid(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Linear(Vec<(NodeId, f64)>),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    PixelShuffle {
        x: NodeId,
        factor: usize,
    },
    InstanceNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Concat(Vec<NodeId>),
    Transpose(NodeId),
    Reshape(NodeId),
    RowSum(NodeId),
    ApplyEnergy {
        s: NodeId,
        e: NodeId,
        energy: Vec<f64>,
    },
    Warp {
        p: NodeId,
        m: NodeId,
        spec: KernelSpec,
        traj: FlowTrajectory,
    },
    Diff(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    groups: u32,
}

/// Recorded computation; consumed by one call to a backward method.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    consumed: bool,
    pub(crate) input: Option<NodeId>,
    pub(crate) output: Option<NodeId>,
}

/// Result of one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, NodeId>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `id`, zeros if it does not influence the root.
    pub fn node(&self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[id.0]))
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&id| self.node(id))
    }

    /// Gradients of every registered parameter whose name starts with `prefix`,
    /// keyed with the prefix stripped.
    pub fn params_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(k, &id)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), self.node(id))))
            .collect()
    }

    pub fn all_params(&self) -> BTreeMap<String, Tensor> {
        self.params_with_prefix("")
    }
}

fn shape_err(msg: String) -> Error {
    Error::ShapeMismatch(msg)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&self) -> Option<NodeId> {
        self.input
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    fn push(&mut self, value: Tensor, op: Op, groups: u32) -> NodeId {
        self.nodes.push(Node { value, op, groups });
        NodeId(self.nodes.len() - 1)
    }

    fn groups(&self, ids: &[NodeId]) -> u32 {
        ids.iter().fold(0, |g, id| g | self.nodes[id.0].groups)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, 0)
    }

    /// Trainable leaf, registered once per name; later calls with the same
    /// name return the existing node.
    pub fn param(&mut self, name: &str, value: &Tensor, group: u32) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push(value.clone(), Op::Leaf, group);
        self.params.insert(name.to_string(), id);
        id
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let g = self.groups(&[a, b]);
        self.push(value, op, g)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.nodes[a.0].value.map(f);
        let g = self.groups(&[a]);
        self.push(value, op, g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    /// Elementwise product with a fixed array (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.nodes[a.0].value.len() {
            return Err(shape_err(format!(
                "mask of {} for tensor of {}",
                mask.len(),
                self.nodes[a.0].value.len()
            )));
        }
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().zip(&mask).map(|(x, k)| x * k).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let g = self.groups(&[a]);
        Ok(self.push(value, Op::MulConst(a, mask), g))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.data().iter().sum();
        let g = self.groups(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), g)
    }

    /// `sum_k w_k * x_k` over same-shaped inputs.
    pub fn linear(&mut self, terms: Vec<(NodeId, f64)>) -> Result<NodeId> {
        let first = terms
            .first()
            .ok_or_else(|| shape_err("linear combination of nothing".into()))?
            .0;
        let mut acc = Tensor::zeros(self.shape(first));
        for &(id, w) in &terms {
            self.same_shape(first, id, "linear")?;
            for (a, v) in acc.data_mut().iter_mut().zip(self.nodes[id.0].value.data()) {
                *a += w * v;
            }
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let g = self.groups(&ids);
        Ok(self.push(acc, Op::Linear(terms), g))
    }

    /// Same-padded strided 1-D cross-correlation.
    /// `x: [c_in, len]`, `w: [c_out, c_in, width]`, `b: [c_out]` → `[c_out, len / stride]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 3 || bs != [ws[0]] || ws[1] != xs[0] {
            return Err(shape_err(format!("conv1d input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        if stride == 0 || xs[1] % stride != 0 {
            return Err(shape_err(format!("length {} not divisible by stride {stride}", xs[1])));
        }
        let (cin, len) = (xs[0], xs[1]);
        let (cout, width) = (ws[0], ws[2]);
        let lout = len / stride;
        let pad = (width - 1) / 2;
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; cout * lout];
        for o in 0..cout {
            let row = &mut out[o * lout..(o + 1) * lout];
            row.iter_mut().for_each(|v| *v = bv[o]);
            for c in 0..cin {
                let xr = &xv[c * len..(c + 1) * len];
                for k in 0..width {
                    let wk = wv[(o * cin + c) * width + k];
                    if wk == 0.0 {
                        continue;
                    }
                    for (j, r) in row.iter_mut().enumerate() {
                        let pos = (j * stride + k) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < len {
                            *r += wk * xr[pos as usize];
                        }
                    }
                }
            }
        }
        let g = self.groups(&[x, w, b]);
        let value = Tensor::new(vec![cout, lout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, stride }, g))
    }

    /// `[c * factor, len]` → `[c, len * factor]`, interleaving sub-channels in time.
    pub fn pixel_shuffle(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 2 || factor == 0 || !xs[0].is_multiple_of(factor) {
            return Err(shape_err(format!("pixel shuffle of {xs:?} by {factor}")));
        }
        let (cr, len) = (xs[0], xs[1]);
        let c = cr / factor;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; cr * len];
        for ch in 0..c {
            for l in 0..len {
                for i in 0..factor {
                    out[ch * len * factor + l * factor + i] = xv[(ch * factor + i) * len + l];
                }
            }
        }
        let g = self.groups(&[x]);
        let value = Tensor::new(vec![c, len * factor], out)?;
        Ok(self.push(value, Op::PixelShuffle { x, factor }, g))
    }

    /// Per-channel normalization over time followed by a learned affine map.
    pub fn instance_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 2 || self.shape(scale) != [xs[0]] || self.shape(shift) != [xs[0]] {
            return Err(shape_err(format!(
                "instance norm of {xs:?} with scale {:?}",
                self.shape(scale)
            )));
        }
        let (c, len) = (xs[0], xs[1]);
        let xv = self.nodes[x.0].value.data();
        let sv = self.nodes[scale.0].value.data();
        let hv = self.nodes[shift.0].value.data();
        let mut xhat = vec![0.0; c * len];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * len];
        for ch in 0..c {
            let row = &xv[ch * len..(ch + 1) * len];
            let mean = row.iter().sum::<f64>() / len as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let is = 1.0 / (var + IN_EPS).sqrt();
            inv_std[ch] = is;
            for l in 0..len {
                let h = (row[l] - mean) * is;
                xhat[ch * len + l] = h;
                out[ch * len + l] = sv[ch] * h + hv[ch];
            }
        }
        let g = self.groups(&[x, scale, shift]);
        let value = Tensor::new(vec![c, len], out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            },
            g,
        ))
    }

    /// Fully connected layer over the flattened input: `w: [out, n]`, `b: [out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].value.len();
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != n || self.shape(b) != [ws[0]] {
            return Err(shape_err(format!("dense of {n} inputs with weight {ws:?}")));
        }
        let out_dim = ws[0];
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let out = (0..out_dim)
            .map(|o| bv[o] + wv[o * n..(o + 1) * n].iter().zip(xv).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let g = self.groups(&[x, w, b]);
        Ok(self.push(Tensor::vector(out), Op::Dense { x, w, b }, g))
    }

    /// Stacks 2-D `[c_i, len]` tensors (or 1-D `[len]` as one channel) along channels.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut len = None;
        let mut channels = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            let (c, l) = match s {
                [l] => (1, *l),
                [c, l] => (*c, *l),
                _ => return Err(shape_err(format!("concat of {s:?}"))),
            };
            if *len.get_or_insert(l) != l {
                return Err(shape_err(format!("concat length {l} vs {len:?}")));
            }
            channels += c;
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let len = len.ok_or_else(|| shape_err("concat of nothing".into()))?;
        let g = self.groups(parts);
        let value = Tensor::new(vec![channels, len], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), g))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err(format!("transpose of {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let g = self.groups(&[x]);
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), g))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let g = self.groups(&[x]);
        Ok(self.push(value, Op::Reshape(x), g))
    }

    /// Per-frame energy of a `[frames, bins]` spectrogram.
    pub fn row_sum(&mut self, s: NodeId) -> Result<NodeId> {
        let sh = self.shape(s);
        if sh.len() != 2 {
            return Err(shape_err(format!("row sum of {sh:?}")));
        }
        let bins = sh[1];
        let out = self.nodes[s.0].value.data().chunks(bins).map(|r| r.iter().sum()).collect();
        let g = self.groups(&[s]);
        Ok(self.push(Tensor::vector(out), Op::RowSum(s), g))
    }

    /// Rescales each row of `s` so its sum becomes `e[t]`.
    pub fn apply_energy(&mut self, s: NodeId, e: NodeId) -> Result<NodeId> {
        let sh = self.shape(s).to_vec();
        if sh.len() != 2 || self.shape(e) != [sh[0]] {
            return Err(shape_err(format!(
                "apply energy {:?} to spectrogram {sh:?}",
                self.shape(e)
            )));
        }
        let bins = sh[1];
        let sv = self.nodes[s.0].value.data();
        let ev = self.nodes[e.0].value.data();
        let mut energy = Vec::with_capacity(sh[0]);
        let mut out = Vec::with_capacity(sv.len());
        for (t, row) in sv.chunks(bins).enumerate() {
            let src: f64 = row.iter().sum();
            if src == 0.0 {
                return Err(Error::ZeroEnergyFrame { frame: t });
            }
            let ratio = ev[t] / src;
            out.extend(row.iter().map(|v| v * ratio));
            energy.push(src);
        }
        let g = self.groups(&[s, e]);
        let value = Tensor::new(sh, out)?;
        Ok(self.push(value, Op::ApplyEnergy { s, e, energy }, g))
    }

    /// Shoots contour `p` with momenta `m`; the trajectory is kept for the reverse sweep.
    pub fn warp(&mut self, p: NodeId, m: NodeId, spec: &KernelSpec) -> Result<NodeId> {
        let (ps, ms) = (self.shape(p), self.shape(m));
        if ps.len() != 1 || ps != ms {
            return Err(shape_err(format!("warp of contour {ps:?} with momenta {ms:?}")));
        }
        let traj = shoot(self.nodes[p.0].value.data(), self.nodes[m.0].value.data(), spec)?;
        let value = Tensor::vector(traj.final_contour().to_vec());
        let g = self.groups(&[p, m]);
        Ok(self.push(
            value,
            Op::Warp {
                p,
                m,
                spec: *spec,
                traj,
            },
            g,
        ))
    }

    /// First difference along a 1-D tensor: `out[t] = x[t + 1] - x[t]`.
    pub fn diff(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.len() != 1 || s[0] == 0 {
            return Err(shape_err(format!("diff of {s:?}")));
        }
        let out = self.nodes[x.0].value.data().windows(2).map(|w| w[1] - w[0]).collect();
        let g = self.groups(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Diff(x), g))
    }

    /// Reverse sweep from `root` seeded with `upstream`, over every node.
    pub fn backward(&mut self, root: NodeId, upstream: &Tensor) -> Result<Gradients> {
        self.consume()?;
        self.sweep(root, upstream.clone(), None)
    }

    /// Several independent reverse sweeps from scalar roots; sweep `k` only
    /// propagates through nodes that depend on parameter groups in `mask_k`.
    pub fn backward_many(&mut self, roots: &[(NodeId, u32)]) -> Result<Vec<Gradients>> {
        self.consume()?;
        roots
            .iter()
            .map(|&(root, mask)| self.sweep(root, Tensor::scalar(1.0), Some(mask)))
            .collect()
    }

    fn consume(&mut self) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        Ok(())
    }

    fn sweep(&self, root: NodeId, upstream: Tensor, mask: Option<u32>) -> Result<Gradients> {
        if upstream.shape() != self.shape(root) {
            return Err(shape_err(format!(
                "upstream {:?} for output {:?}",
                upstream.shape(),
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(upstream);
        let wanted = |id: NodeId| mask.is_none_or(|m| self.nodes[id.0].groups & m != 0);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut emit = |id: NodeId, t: Tensor| {
                if !wanted(id) {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            self.node_backward(node, &g, &mut emit)?;
        }
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn node_backward(&self, node: &Node, g: &Tensor, emit: &mut impl FnMut(NodeId, Tensor)) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let like = |id: NodeId, data: Vec<f64>| Tensor::new(val(id).shape().to_vec(), data).expect("shape");
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.clone());
            }
            Op::Sub(a, b) => {
                emit(*a, g.clone());
                emit(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                emit(*a, like(*a, gd.iter().zip(vb).map(|(g, y)| g * y).collect()));
                emit(*b, like(*b, gd.iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(a, k) => emit(*a, g.map(|v| k * v)),
            Op::MulConst(a, mask) => emit(*a, like(*a, gd.iter().zip(mask).map(|(g, k)| g * k).collect())),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                emit(*a, like(*a, gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Ln(a) => {
                let x = val(*a).data();
                emit(*a, like(*a, gd.iter().zip(x).map(|(g, x)| g / x).collect()));
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                emit(*a, like(*a, gd.iter().zip(x).map(|(g, x)| g * sign(*x)).collect()));
            }
            Op::Square(a) => {
                let x = val(*a).data();
                emit(*a, like(*a, gd.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect()));
            }
            Op::Sum(a) => emit(*a, Tensor::full(val(*a).shape(), gd[0])),
            Op::Linear(terms) => {
                for &(id, w) in terms {
                    emit(id, g.map(|v| w * v));
                }
            }
            Op::Conv1d { x, w, b, stride } => {
                let (xs, ws) = (val(*x).shape(), val(*w).shape());
                let (cin, len, cout, width) = (xs[0], xs[1], ws[0], ws[2]);
                let lout = len / stride;
                let pad = (width - 1) / 2;
                let (xv, wv) = (val(*x).data(), val(*w).data());
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; cout];
                for o in 0..cout {
                    let go = &gd[o * lout..(o + 1) * lout];
                    gb[o] = go.iter().sum();
                    for c in 0..cin {
                        let xr = &xv[c * len..(c + 1) * len];
                        let gxr = &mut gx[c * len..(c + 1) * len];
                        for k in 0..width {
                            let wi = (o * cin + c) * width + k;
                            let wk = wv[wi];
                            let mut acc = 0.0;
                            for (j, gj) in go.iter().enumerate() {
                                let pos = (j * stride + k) as isize - pad as isize;
                                if pos >= 0 && (pos as usize) < len {
                                    acc += gj * xr[pos as usize];
                                    gxr[pos as usize] += gj * wk;
                                }
                            }
                            gw[wi] += acc;
                        }
                    }
                }
                emit(*x, like(*x, gx));
                emit(*w, like(*w, gw));
                emit(*b, like(*b, gb));
            }
            Op::PixelShuffle { x, factor } => {
                let xs = val(*x).shape();
                let (cr, len) = (xs[0], xs[1]);
                let mut gx = vec![0.0; cr * len];
                for ch in 0..cr / factor {
                    for l in 0..len {
                        for i in 0..*factor {
                            gx[(ch * factor + i) * len + l] = gd[ch * len * factor + l * factor + i];
                        }
                    }
                }
                emit(*x, like(*x, gx));
            }
            Op::InstanceNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
            } => {
                let xs = val(*x).shape();
                let (c, len) = (xs[0], xs[1]);
                let sv = val(*scale).data();
                let mut gx = vec![0.0; c * len];
                let mut gs = vec![0.0; c];
                let mut gh = vec![0.0; c];
                for ch in 0..c {
                    let r = ch * len..(ch + 1) * len;
                    let (gr, hr) = (&gd[r.clone()], &xhat[r.clone()]);
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gh: f64 = gr.iter().zip(hr).map(|(g, h)| g * h).sum();
                    gs[ch] = sum_gh;
                    gh[ch] = sum_g;
                    let n = len as f64;
                    let k = sv[ch] * inv_std[ch];
                    for l in 0..len {
                        gx[ch * len + l] = k * (gr[l] - sum_g / n - hr[l] * sum_gh / n);
                    }
                }
                emit(*x, like(*x, gx));
                emit(*scale, like(*scale, gs));
                emit(*shift, like(*shift, gh));
            }
            Op::Dense { x, w, b } => {
                let (xv, wv) = (val(*x).data(), val(*w).data());
                let n = xv.len();
                let mut gx = vec![0.0; n];
                let mut gw = vec![0.0; wv.len()];
                for (o, go) in gd.iter().enumerate() {
                    let wr = &wv[o * n..(o + 1) * n];
                    for i in 0..n {
                        gx[i] += go * wr[i];
                        gw[o * n + i] = go * xv[i];
                    }
                }
                emit(*x, like(*x, gx));
                emit(*w, like(*w, gw));
                emit(*b, g.clone());
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    emit(*p, like(*p, gd[off..off + n].to_vec()));
                    off += n;
                }
            }
            Op::Transpose(x) => {
                let xs = val(*x).shape();
                let (r, c) = (xs[0], xs[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gd[j * r + i];
                    }
                }
                emit(*x, like(*x, gx));
            }
            Op::Reshape(x) => emit(*x, like(*x, gd.to_vec())),
            Op::RowSum(s) => {
                let bins = val(*s).shape()[1];
                let gs = gd.iter().flat_map(|g| std::iter::repeat_n(*g, bins)).collect();
                emit(*s, like(*s, gs));
            }
            Op::ApplyEnergy { s, e, energy } => {
                let bins = val(*s).shape()[1];
                let (sv, ev) = (val(*s).data(), val(*e).data());
                let mut gs = vec![0.0; sv.len()];
                let mut ge = vec![0.0; ev.len()];
                for t in 0..ev.len() {
                    let r = t * bins..(t + 1) * bins;
                    let dot: f64 = gd[r.clone()].iter().zip(&sv[r.clone()]).map(|(g, s)| g * s).sum();
                    let src = energy[t];
                    ge[t] = dot / src;
                    let ratio = ev[t] / src;
                    let corr = dot * ev[t] / (src * src);
                    for i in r {
                        gs[i] = gd[i] * ratio - corr;
                    }
                }
                emit(*s, like(*s, gs));
                emit(*e, like(*e, ge));
            }
            Op::Warp { p, m, spec, traj } => {
                let (gp, gm) = pullback_trajectory(traj, spec, gd)?;
                emit(*p, like(*p, gp));
                emit(*m, like(*m, gm));
            }
            Op::Diff(x) => {
                let n = val(*x).len();
                let mut gx = vec![0.0; n];
                for (t, g) in gd.iter().enumerate() {
                    gx[t + 1] += g;
                    gx[t] -= g;
                }
                emit(*x, like(*x, gx));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    /// Checks d(sum(out * probe))/d(input k) for every input of a one-op graph.
    fn check_op(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
        let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let eval = |x: &[f64], want_grad: bool| -> Result<(f64, Vec<f64>)> {
            let mut tape = Tape::new();
            let mut off = 0;
            let mut ids = Vec::new();
            for (i, s) in shapes.iter().enumerate() {
                let t = Tensor::new(s.clone(), x[off..off + sizes[i]].to_vec()).unwrap();
                ids.push(tape.param(&format!("in{i}"), &t, 1));
                off += sizes[i];
            }
            let out = build(&mut tape, &ids);
            // fixed pseudo-random probe keeps the check sensitive to every output
            let probe: Vec<f64> = (0..tape.value(out).len()).map(|k| ((k * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
            let p = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), probe).unwrap());
            let prod = tape.mul(out, p).unwrap();
            let s = tape.sum(prod);
            let v = tape.value(s).item();
            if !want_grad {
                return Ok((v, vec![]));
            }
            let g = tape.backward(s, &Tensor::scalar(1.0))?;
            Ok((v, ids.iter().flat_map(|&id| g.node(id).into_data()).collect()))
        };
        grad_check(|x| eval(x, true), |x| eval(x, false).map(|r| r.0), &flat, 1e-5).unwrap()
    }

    #[test]
    fn square_via_mul() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::scalar(3.0), 1);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.param("x").unwrap().item(), 6.0);
    }

    #[test]
    fn second_backward_fails() {
        let mut tape = Tape::new();
        let x = tape.param("x", &Tensor::scalar(3.0), 1);
        let y = tape.square(x);
        tape.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(tape.backward(y, &Tensor::scalar(1.0)).unwrap_err(), Error::TapeConsumed);
    }

    #[test]
    fn gradient_is_linear_in_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let grad_of = |weights: [f64; 3]| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.param("x", &x0, 1);
            let s = tape.sigmoid(x);
            let g = tape.backward(s, &Tensor::vector(weights.to_vec())).unwrap();
            g.param("x").unwrap().into_data()
        };
        let total = grad_of([1.0, 1.0, 1.0]);
        let parts: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let mut w = [0.0; 3];
                w[k] = 1.0;
                grad_of(w)
            })
            .collect();
        for i in 0..3 {
            let s: f64 = parts.iter().map(|p| p[i]).sum();
            assert!((s - total[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 5, vec![1.0, 2.0, 4.0, 7.0, 11.0]).unwrap());
        let w = tape.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0]));
        let y = tape.conv1d(x, w, b, 1).unwrap();
        // out[j] = x[j-1] - x[j+1] with zero padding
        assert_eq!(tape.value(y).data(), &[-2.0, -3.0, -5.0, -7.0, 7.0]);
    }

    #[test]
    fn instance_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, &[3, 17], -5.0, 20.0));
        let s = tape.constant(Tensor::full(&[3], 1.0));
        let h = tape.constant(Tensor::zeros(&[3]));
        let y = tape.instance_norm(x, s, h).unwrap();
        for row in tape.value(y).data().chunks(17) {
            let mean = row.iter().sum::<f64>() / 17.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn primitives_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = rand_tensor(&mut rng, &[2, 6], -2.0, 2.0);
            let b = rand_tensor(&mut rng, &[2, 6], 0.5, 2.0);
            let checks: Vec<(&str, f64)> = vec![
                ("add", check_op(vec![a.clone(), b.clone()], |t, i| t.add(i[0], i[1]).unwrap())),
                ("sub", check_op(vec![a.clone(), b.clone()], |t, i| t.sub(i[0], i[1]).unwrap())),
                ("mul", check_op(vec![a.clone(), b.clone()], |t, i| t.mul(i[0], i[1]).unwrap())),
                ("scale", check_op(vec![a.clone()], |t, i| t.scale(i[0], -1.7))),
                ("sigmoid", check_op(vec![a.clone()], |t, i| t.sigmoid(i[0]))),
                ("ln", check_op(vec![b.clone()], |t, i| t.ln(i[0]))),
                ("abs", check_op(vec![b.clone()], |t, i| t.abs(i[0]))),
                ("square", check_op(vec![a.clone()], |t, i| t.square(i[0]))),
                ("sum", check_op(vec![a.clone()], |t, i| t.sum(i[0]))),
                ("linear", check_op(vec![a.clone(), b.clone()], |t, i| t.linear(vec![(i[0], 0.3), (i[1], -2.0)]).unwrap())),
                ("transpose", check_op(vec![a.clone()], |t, i| t.transpose(i[0]).unwrap())),
                ("concat", check_op(vec![a.clone(), b.clone()], |t, i| t.concat(&[i[0], i[1]]).unwrap())),
                ("row_sum", check_op(vec![b.clone()], |t, i| t.row_sum(i[0]).unwrap())),
                ("pixel_shuffle", check_op(vec![a.clone()], |t, i| t.pixel_shuffle(i[0], 2).unwrap())),
                ("mask", check_op(vec![a.clone()], |t, i| t.mul_const(i[0], (0..12).map(|k| (k % 3) as f64).collect()).unwrap())),
                ("diff", check_op(vec![Tensor::vector(a.data().to_vec())], |t, i| t.diff(i[0]).unwrap())),
                ("reshape", check_op(vec![a.clone()], |t, i| t.reshape(i[0], vec![3, 4]).unwrap())),
            ];
            for (name, err) in checks {
                assert!(err < 1e-6, "{name}: {err}");
            }
            let w = rand_tensor(&mut rng, &[3, 2, 3], -1.0, 1.0);
            let bias = rand_tensor(&mut rng, &[3], -1.0, 1.0);
            for stride in [1, 2] {
                let err = check_op(vec![a.clone(), w.clone(), bias.clone()], |t, i| t.conv1d(i[0], i[1], i[2], stride).unwrap());
                assert!(err < 1e-6, "conv stride {stride}: {err}");
            }
            let sc = rand_tensor(&mut rng, &[2], 0.5, 1.5);
            let sh = rand_tensor(&mut rng, &[2], -1.0, 1.0);
            let err = check_op(vec![a.clone(), sc, sh], |t, i| t.instance_norm(i[0], i[1], i[2]).unwrap());
            assert!(err < 1e-6, "instance norm: {err}");
            let dw = rand_tensor(&mut rng, &[4, 12], -1.0, 1.0);
            let db = rand_tensor(&mut rng, &[4], -1.0, 1.0);
            let err = check_op(vec![a.clone(), dw, db], |t, i| t.dense(i[0], i[1], i[2]).unwrap());
            assert!(err < 1e-6, "dense: {err}");
            let e = rand_tensor(&mut rng, &[2], 1.0, 5.0);
            let err = check_op(vec![b.clone(), e], |t, i| t.apply_energy(i[0], i[1]).unwrap());
            assert!(err < 1e-6, "apply energy: {err}");
        }
    }

    #[test]
    fn warp_node_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = rand_tensor(&mut rng, &[7], 90.0, 200.0);
            let m = rand_tensor(&mut rng, &[7], -0.5, 0.5);
            let err = check_op(vec![p, m], |t, i| t.warp(i[0], i[1], &KernelSpec::F0).unwrap());
            assert!(err < 1e-5, "warp: {err}");
        }
    }

    #[test]
    fn group_masks_restrict_sweeps() {
        let mut tape = Tape::new();
        let a = tape.param("a", &Tensor::scalar(2.0), 1);
        let b = tape.param("b", &Tensor::scalar(5.0), 2);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward_many(&[(y, 1), (y, 2)]).unwrap();
        assert_eq!(g[0].param("a").unwrap().item(), 5.0);
        assert_eq!(g[0].param("b").unwrap().item(), 0.0);
        assert_eq!(g[1].param("b").unwrap().item(), 2.0);
        assert_eq!(g[1].param("a").unwrap().item(), 0.0);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch(_))));
        let s = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let e = tape.constant(Tensor::vector(vec![1.0]));
        assert_eq!(tape.apply_energy(s, e), Err(Error::ZeroEnergyFrame { frame: 0 }));
    }
}
