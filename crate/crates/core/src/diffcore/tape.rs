use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::tensor::{check_shape, Tensor};
use crate::error::{Error, Result};

type Buf = Rc<Vec<f64>>;

/// Norm floor used by row normalization.
const NORM_FLOOR: f64 = 1e-12;

/// Largest argument accepted by `log1m_exp` before clamping.
const LOG1M_EXP_CAP: f64 = -1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Affine(usize, f64),
    MulConst(usize, Buf),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Exp(usize),
    Ln(usize),
    Log1mExp(usize),
    PowConst(usize, f64),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    MeanAxis0(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows(usize, Buf),
    L2NormalizeRows(usize, Buf),
    Reshape(usize),
    Upsample2x(usize),
    Stencil { x: usize, w: usize, rate: usize },
    GatherRows(usize, Rc<Vec<usize>>),
    Pick(usize, Rc<Vec<(usize, usize)>>),
    GiouLossRows(usize, Rc<Vec<[f64; 4]>>),
    L1Rows(usize, Rc<Vec<[f64; 4]>>),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b)
            | MulCol(a, b) => vec![*a, *b],
            Stencil { x, w, .. } => vec![*x, *w],
            Transpose(a) | Affine(a, _) | MulConst(a, _) | Relu(a) | Sigmoid(a) | Abs(a)
            | Exp(a) | Ln(a) | Log1mExp(a) | PowConst(a, _) | SumAll(a) | MeanAll(a)
            | SumRows(a) | MeanAxis0(a) | SoftmaxRows(a) | LogSoftmaxRows(a)
            | LayerNormRows(a, _) | L2NormalizeRows(a, _) | Reshape(a) | Upsample2x(a)
            | GatherRows(a, _) | Pick(a, _) | GiouLossRows(a, _) | L1Rows(a, _) => vec![*a],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Buf,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass. Dropped after backward; no higher-order use.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient of `var` into `tensor`; zeros if unreached.
    pub fn accumulate_into(&self, var: Var<'_>, tensor: &mut Tensor) {
        if !tensor.requires_grad() {
            return;
        }
        match self.wrt(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => tensor.accumulate_grad(&vec![0.0; tensor.numel()]),
        }
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap();
    (shape.iter().product::<usize>() / c, c)
}

fn box_corners(b: &[f64]) -> [f64; 4] {
    [
        b[0] - 0.5 * b[2],
        b[1] - 0.5 * b[3],
        b[0] + 0.5 * b[2],
        b[1] + 0.5 * b[3],
    ]
}

/// 1 - GIoU for a centre-size prediction against a corner-form target,
/// together with the gradient w.r.t. (cx, cy, w, h).
pub(crate) fn giou_loss_and_grad(pred: &[f64], t: &[f64; 4]) -> (f64, [f64; 4]) {
    let [px1, py1, px2, py2] = box_corners(pred);
    let [tx1, ty1, tx2, ty2] = *t;
    let iw_raw = px2.min(tx2) - px1.max(tx1);
    let ih_raw = py2.min(ty2) - py1.max(ty1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let (pw, ph) = (px2 - px1, py2 - py1);
    let union = pw * ph + (tx2 - tx1) * (ty2 - ty1) - inter;
    let ex = px2.max(tx2) - px1.min(tx1);
    let ey = py2.max(ty2) - py1.min(ty1);
    let enclose = ex * ey;
    let loss = 2.0 - inter / union - union / enclose;

    // partials w.r.t. corners (x1, y1, x2, y2)
    let overlap = iw_raw > 0.0 && ih_raw > 0.0;
    let di = if overlap {
        [
            if px1 > tx1 { -ih } else { 0.0 },
            if py1 > ty1 { -iw } else { 0.0 },
            if px2 < tx2 { ih } else { 0.0 },
            if py2 < ty2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let da = [-ph, -pw, ph, pw];
    let de = [
        if px1 < tx1 { -ey } else { 0.0 },
        if py1 < ty1 { -ex } else { 0.0 },
        if px2 > tx2 { ey } else { 0.0 },
        if py2 > ty2 { ex } else { 0.0 },
    ];
    let mut dc = [0.0; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        let d_iou = (di[k] * union - inter * du) / (union * union);
        let d_ue = (du * enclose - union * de[k]) / (enclose * enclose);
        dc[k] = -d_iou - d_ue;
    }
    let grad = [
        dc[0] + dc[2],
        dc[1] + dc[3],
        0.5 * (dc[2] - dc[0]),
        0.5 * (dc[3] - dc[1]),
    ];
    (loss, grad)
}

fn stencil_offsets(rate: usize) -> [(isize, isize); 9] {
    let r = rate as isize;
    let mut out = [(0, 0); 9];
    let mut k = 0;
    for dy in -1..=1 {
        for dx in -1..=1 {
            out[k] = (dy * r, dx * r);
            k += 1;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.inputs().iter().any(|&i| nodes[i].needs_grad);
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a leaf; it participates in backward iff `requires_grad`.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: Rc::new(tensor.data().to_vec()),
            op: Op::Leaf,
            needs_grad: tensor.requires_grad(),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(&Tensor::scalar(value))
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = &nodes[loss.id].shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]);
    f(slot);
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (r, k) = rows_cols(&nodes[*a].shape);
            let c = nodes[*b].shape[1];
            acc(grads, nodes, *a, |da| {
                for i in 0..r {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j] * bv[p * c + j];
                        }
                        da[i * k + p] += s;
                    }
                }
            });
            acc(grads, nodes, *b, |db| {
                for i in 0..r {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let row = &mut db[p * c..(p + 1) * c];
                        for (d, gv) in row.iter_mut().zip(&g[i * c..(i + 1) * c]) {
                            *d += aip * gv;
                        }
                    }
                }
            });
        }
        Op::Transpose(a) => {
            let (r, c) = rows_cols(&nodes[*a].shape);
            acc(grads, nodes, *a, |da| {
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            acc(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            acc(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            acc(grads, nodes, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        Op::AddRow(a, b) => {
            let c = nodes[*b].value.len();
            acc(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            acc(grads, nodes, *b, |d| {
                for (i, gv) in g.iter().enumerate() {
                    d[i % c] += gv;
                }
            });
        }
        Op::MulRow(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let c = bv.len();
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i % c];
                }
            });
            acc(grads, nodes, *b, |d| {
                for i in 0..g.len() {
                    d[i % c] += g[i] * av[i];
                }
            });
        }
        Op::MulCol(a, s) => {
            let (av, sv) = (&nodes[*a].value, &nodes[*s].value);
            let c = av.len() / sv.len();
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * sv[i / c];
                }
            });
            acc(grads, nodes, *s, |d| {
                for i in 0..g.len() {
                    d[i / c] += g[i] * av[i];
                }
            });
        }
        Op::Affine(a, scale) => {
            acc(grads, nodes, *a, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g)
            });
        }
        Op::MulConst(a, k) => {
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * k[i];
                }
            });
        }
        Op::Relu(a) => {
            let av = &nodes[*a].value;
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    if av[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid(a) => acc(grads, nodes, *a, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        }),
        Op::Abs(a) => {
            let av = &nodes[*a].value;
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * sign(av[i]);
                }
            });
        }
        Op::Exp(a) => acc(grads, nodes, *a, |d| {
            for i in 0..d.len() {
                d[i] += g[i] * y[i];
            }
        }),
        Op::Ln(a) => {
            let av = &nodes[*a].value;
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / av[i];
                }
            });
        }
        Op::Log1mExp(a) => {
            let av = &nodes[*a].value;
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    if av[i] <= LOG1M_EXP_CAP {
                        // d/dx ln(1 - e^x) = -1 / (e^{-x} - 1)
                        d[i] -= g[i] / (-av[i]).exp_m1();
                    }
                }
            });
        }
        Op::PowConst(a, p) => {
            let av = &nodes[*a].value;
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * p * av[i].powf(p - 1.0);
                }
            });
        }
        Op::SumAll(a) => acc(grads, nodes, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::MeanAll(a) => {
            let n = nodes[*a].value.len() as f64;
            acc(grads, nodes, *a, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
        }
        Op::SumRows(a) => {
            let (_, c) = rows_cols(&nodes[*a].shape);
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i / c];
                }
            });
        }
        Op::MeanAxis0(a) => {
            let (r, c) = rows_cols(&nodes[*a].shape);
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i % c] / r as f64;
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let (r, c) = rows_cols(&node.shape);
            acc(grads, nodes, *a, |d| {
                for i in 0..r {
                    let (ys, gs) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        d[i * c + j] += ys[j] * (gs[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            let (r, c) = rows_cols(&node.shape);
            acc(grads, nodes, *a, |d| {
                for i in 0..r {
                    let gs = &g[i * c..(i + 1) * c];
                    let total: f64 = gs.iter().sum();
                    for j in 0..c {
                        d[i * c + j] += gs[j] - y[i * c + j].exp() * total;
                    }
                }
            });
        }
        Op::LayerNormRows(a, inv_std) => {
            let (r, c) = rows_cols(&node.shape);
            acc(grads, nodes, *a, |d| {
                for i in 0..r {
                    let (xs, gs) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    let mean_g = gs.iter().sum::<f64>() / c as f64;
                    let mean_gx = xs.iter().zip(gs).map(|(x, g)| x * g).sum::<f64>() / c as f64;
                    for j in 0..c {
                        d[i * c + j] += inv_std[i] * (gs[j] - mean_g - xs[j] * mean_gx);
                    }
                }
            });
        }
        Op::L2NormalizeRows(a, norms) => {
            let (r, c) = rows_cols(&node.shape);
            acc(grads, nodes, *a, |d| {
                for i in 0..r {
                    let (ys, gs) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    if norms[i] <= NORM_FLOOR {
                        for j in 0..c {
                            d[i * c + j] += gs[j] / NORM_FLOOR;
                        }
                        continue;
                    }
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        d[i * c + j] += (gs[j] - ys[j] * dot) / norms[i];
                    }
                }
            });
        }
        Op::Reshape(a) => acc(grads, nodes, *a, |d| {
            d.iter_mut().zip(g).for_each(|(d, g)| *d += g)
        }),
        Op::Upsample2x(a) => {
            let s = &nodes[*a].shape;
            let (h, w, c) = (s[0], s[1], s[2]);
            acc(grads, nodes, *a, |d| {
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        let src = ((yy / 2) * w + xx / 2) * c;
                        let dst = (yy * 2 * w + xx) * c;
                        for k in 0..c {
                            d[src + k] += g[dst + k];
                        }
                    }
                }
            });
        }
        Op::Stencil { x, w, rate } => {
            let s = &nodes[*x].shape;
            let (h, wd, c) = (s[0], s[1], s[2]);
            let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
            let offsets = stencil_offsets(*rate);
            let mut dx = nodes[*x].needs_grad.then(|| vec![0.0; xv.len()]);
            let mut dw = nodes[*w].needs_grad.then(|| vec![0.0; wv.len()]);
            for yy in 0..h {
                for xx in 0..wd {
                    let out = (yy * wd + xx) * c;
                    for (k, (oy, ox)) in offsets.iter().enumerate() {
                        let (sy, sx) = (yy as isize + oy, xx as isize + ox);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                            continue;
                        }
                        let src = (sy as usize * wd + sx as usize) * c;
                        for ch in 0..c {
                            if let Some(dx) = dx.as_mut() {
                                dx[src + ch] += g[out + ch] * wv[k * c + ch];
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[k * c + ch] += g[out + ch] * xv[src + ch];
                            }
                        }
                    }
                }
            }
            if let Some(dx) = dx {
                acc(grads, nodes, *x, |d| d.iter_mut().zip(&dx).for_each(|(d, v)| *d += v));
            }
            if let Some(dw) = dw {
                acc(grads, nodes, *w, |d| d.iter_mut().zip(&dw).for_each(|(d, v)| *d += v));
            }
        }
        Op::GatherRows(a, idx) => {
            let c = *nodes[*a].shape.last().unwrap();
            acc(grads, nodes, *a, |d| {
                for (out, &src) in idx.iter().enumerate() {
                    for k in 0..c {
                        d[src * c + k] += g[out * c + k];
                    }
                }
            });
        }
        Op::Pick(a, pos) => {
            let c = *nodes[*a].shape.last().unwrap();
            acc(grads, nodes, *a, |d| {
                for (p, &(r, col)) in pos.iter().enumerate() {
                    d[r * c + col] += g[p];
                }
            });
        }
        Op::GiouLossRows(a, targets) => {
            let av = &nodes[*a].value;
            acc(grads, nodes, *a, |d| {
                for (p, t) in targets.iter().enumerate() {
                    let (_, gr) = giou_loss_and_grad(&av[p * 4..p * 4 + 4], t);
                    for k in 0..4 {
                        d[p * 4 + k] += g[p] * gr[k];
                    }
                }
            });
        }
        Op::L1Rows(a, targets) => {
            let av = &nodes[*a].value;
            acc(grads, nodes, *a, |d| {
                for (p, t) in targets.iter().enumerate() {
                    for k in 0..4 {
                        d[p * 4 + k] += g[p] * sign(av[p * 4 + k] - t[k]);
                    }
                }
            });
        }
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

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    /// The single value of a scalar node.
    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape(), self.value().to_vec()).expect("tape shapes are valid")
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, v) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(shape, v, op)
    }

    fn binary_same(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (shape, v) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(mismatch(name, &a.shape, &b.shape));
            }
            let v = a.value.iter().zip(b.value.iter()).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), v)
        };
        Ok(self.tape.push(shape, v, op))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, out) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(mismatch("matmul", &a.shape, &b.shape));
            }
            let (r, k, c) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let orow = &mut out[i * c..(i + 1) * c];
                for p in 0..k {
                    let aip = a.value[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (o, bv) in orow.iter_mut().zip(&b.value[p * c..(p + 1) * c]) {
                        *o += aip * bv;
                    }
                }
            }
            (vec![r, c], out)
        };
        Ok(self.tape.push(shape, out, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "transpose needs rank 2".into(),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let v = self.value();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.tape.push(vec![c, r], out, Op::Transpose(self.id)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a length-`c` vector to every row.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (shape, v) = self.row_broadcast(row, "add_row", |a, b| a + b)?;
        Ok(self.tape.push(shape, v, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row element-wise by a length-`c` vector.
    pub fn mul_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        let (shape, v) = self.row_broadcast(row, "mul_row", |a, b| a * b)?;
        Ok(self.tape.push(shape, v, Op::MulRow(self.id, row.id)))
    }

    fn row_broadcast(
        &self,
        row: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id], &nodes[row.id]);
        let c = *a.shape.last().unwrap();
        if b.value.len() != c {
            return Err(mismatch(name, &a.shape, &b.shape));
        }
        let v = a
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.value[i % c]))
            .collect();
        Ok((a.shape.clone(), v))
    }

    /// Scales row `i` by `scales[i]`.
    pub fn mul_col(&self, scales: Var<'t>) -> Result<Var<'t>> {
        let (shape, v) = {
            let nodes = self.tape.nodes.borrow();
            let (a, s) = (&nodes[self.id], &nodes[scales.id]);
            let (r, c) = rows_cols(&a.shape);
            if s.value.len() != r {
                return Err(mismatch("mul_col", &a.shape, &s.shape));
            }
            let v = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| x * s.value[i / c])
                .collect();
            (a.shape.clone(), v)
        };
        Ok(self.tape.push(shape, v, Op::MulCol(self.id, scales.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    /// `x / d`, divided exactly rather than scaled by `1 / d`.
    pub fn div_scalar(&self, d: f64) -> Var<'t> {
        self.unary(Op::Affine(self.id, 1.0 / d), |x| x / d)
    }

    /// `s * x + shift`.
    pub fn affine(&self, s: f64, shift: f64) -> Var<'t> {
        self.unary(Op::Affine(self.id, s), |x| s * x + shift)
    }

    /// Element-wise product with a constant array.
    pub fn mul_const(&self, k: &[f64]) -> Result<Var<'t>> {
        if k.len() != self.numel() {
            return Err(mismatch("mul_const", &self.shape(), &[k.len()]));
        }
        let v = self.value().iter().zip(k).map(|(a, b)| a * b).collect();
        Ok(self
            .tape
            .push(self.shape(), v, Op::MulConst(self.id, Rc::new(k.to_vec()))))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Ln(self.id), f64::ln)
    }

    /// `ln(1 - e^x)` for log-probabilities `x ≤ 0`. Arguments above `-1e-12`
    /// are clamped, with zero gradient there.
    pub fn log1m_exp(&self) -> Var<'t> {
        self.unary(Op::Log1mExp(self.id), |x| {
            let x = x.min(LOG1M_EXP_CAP);
            if x > -std::f64::consts::LN_2 {
                (-x.exp_m1()).ln()
            } else {
                (-x.exp()).ln_1p()
            }
        })
    }

    /// `x^p` for positive `x`.
    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(Op::PowConst(self.id, p), |x| x.powf(p))
    }

    pub fn sum_all(&self) -> Var<'t> {
        let s = self.value().iter().sum();
        self.tape.push(vec![1], vec![s], Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var<'t> {
        let v = self.value();
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.tape.push(vec![1], vec![s], Op::MeanAll(self.id))
    }

    /// Sum along the last axis.
    pub fn sum_rows(&self) -> Var<'t> {
        let (r, c) = rows_cols(&self.shape());
        let v = self.value();
        let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        self.tape.push(vec![r], out, Op::SumRows(self.id))
    }

    /// Mean over all leading positions; average pooling of a feature map.
    pub fn mean_axis0(&self) -> Var<'t> {
        let (r, c) = rows_cols(&self.shape());
        let v = self.value();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += v[i * c + j];
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.tape.push(vec![1, c], out, Op::MeanAxis0(self.id))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let shape = self.shape();
        let (r, c) = rows_cols(&shape);
        let v = self.value();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|o| *o /= z);
        }
        self.tape.push(shape, out, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let shape = self.shape();
        let (r, c) = rows_cols(&shape);
        let v = self.value();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        self.tape.push(shape, out, Op::LogSoftmaxRows(self.id))
    }

    /// Per-row standardization (zero mean, unit variance) without affine.
    pub fn layer_norm_rows(&self, eps: f64) -> Var<'t> {
        let shape = self.shape();
        let (r, c) = rows_cols(&shape);
        let v = self.value();
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            inv_std[i] = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv_std[i];
            }
        }
        self.tape
            .push(shape, out, Op::LayerNormRows(self.id, Rc::new(inv_std)))
    }

    pub fn l2_normalize_rows(&self) -> Var<'t> {
        let shape = self.shape();
        let (r, c) = rows_cols(&shape);
        let v = self.value();
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            norms[i] = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = norms[i].max(NORM_FLOOR);
            for j in 0..c {
                out[i * c + j] = row[j] / denom;
            }
        }
        self.tape
            .push(shape, out, Op::L2NormalizeRows(self.id, Rc::new(norms)))
    }

    /// Row-wise cosine similarity between `self` and `other` (same shape).
    pub fn cosine_rows(&self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.l2_normalize_rows();
        let b = other.l2_normalize_rows();
        Ok(a.mul(b)?.sum_rows())
    }

    /// All pairwise cosine similarities between rows: `[r × r]`.
    pub fn cosine_matrix(&self) -> Result<Var<'t>> {
        let n = self.l2_normalize_rows();
        n.matmul(n.transpose()?)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(mismatch("reshape", &self.shape(), shape));
        }
        Ok(self
            .tape
            .push(shape.to_vec(), self.value().to_vec(), Op::Reshape(self.id)))
    }

    /// Nearest-neighbour 2× upsampling of an `h × w × d` map.
    pub fn nearest_upsample2x(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "upsampling needs an h×w×d map".into(),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let v = self.value();
        let mut out = vec![0.0; 4 * h * w * c];
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                let src = ((yy / 2) * w + xx / 2) * c;
                let dst = (yy * 2 * w + xx) * c;
                out[dst..dst + c].copy_from_slice(&v[src..src + c]);
            }
        }
        Ok(self
            .tape
            .push(vec![2 * h, 2 * w, c], out, Op::Upsample2x(self.id)))
    }

    /// 3×3 depthwise stencil with dilation `rate` and zero padding over an
    /// `h × w × d` map; `weights` is `9 × d`, row-major over (dy, dx).
    pub fn dilated_stencil(&self, weights: Var<'t>, rate: usize) -> Result<Var<'t>> {
        let s = self.shape();
        let ws = weights.shape();
        if s.len() != 3 || ws.len() != 2 || ws[0] != 9 || ws[1] != s[2] {
            return Err(mismatch("dilated_stencil", &s, &ws));
        }
        let (h, wd, c) = (s[0], s[1], s[2]);
        let (xv, wv) = (self.value(), weights.value());
        let offsets = stencil_offsets(rate);
        let mut out = vec![0.0; xv.len()];
        for yy in 0..h {
            for xx in 0..wd {
                let o = (yy * wd + xx) * c;
                for (k, (oy, ox)) in offsets.iter().enumerate() {
                    let (sy, sx) = (yy as isize + oy, xx as isize + ox);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                        continue;
                    }
                    let src = (sy as usize * wd + sx as usize) * c;
                    for ch in 0..c {
                        out[o + ch] += wv[k * c + ch] * xv[src + ch];
                    }
                }
            }
        }
        Ok(self.tape.push(
            s,
            out,
            Op::Stencil {
                x: self.id,
                w: weights.id,
                rate,
            },
        ))
    }

    /// Selects rows (repeats allowed) of a rank-2 tensor.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let s = self.shape();
        let (r, c) = rows_cols(&s);
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: indices {idx:?} invalid for {r} rows"
            )));
        }
        let v = self.value();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        Ok(self.tape.push(
            vec![idx.len(), c],
            out,
            Op::GatherRows(self.id, Rc::new(idx.to_vec())),
        ))
    }

    /// Picks individual `(row, col)` entries into a vector.
    pub fn pick(&self, positions: &[(usize, usize)]) -> Result<Var<'t>> {
        let (r, c) = rows_cols(&self.shape());
        if positions.is_empty() || positions.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(Error::InvalidArgument(format!(
                "pick: positions out of range for {r}×{c}"
            )));
        }
        let v = self.value();
        let out = positions.iter().map(|&(i, j)| v[i * c + j]).collect();
        Ok(self.tape.push(
            vec![positions.len()],
            out,
            Op::Pick(self.id, Rc::new(positions.to_vec())),
        ))
    }

    /// Per-row `1 - GIoU` of `p × 4` centre-size boxes against constant
    /// corner-form targets.
    pub fn giou_loss_rows(&self, targets: &[[f64; 4]]) -> Result<Var<'t>> {
        self.check_box_rows("giou_loss_rows", targets.len())?;
        let v = self.value();
        let out = targets
            .iter()
            .enumerate()
            .map(|(p, t)| giou_loss_and_grad(&v[p * 4..p * 4 + 4], t).0)
            .collect();
        Ok(self.tape.push(
            vec![targets.len()],
            out,
            Op::GiouLossRows(self.id, Rc::new(targets.to_vec())),
        ))
    }

    /// Per-row L1 distance of `p × 4` boxes to constant centre-size targets.
    pub fn l1_rows(&self, targets: &[[f64; 4]]) -> Result<Var<'t>> {
        self.check_box_rows("l1_rows", targets.len())?;
        let v = self.value();
        let out = targets
            .iter()
            .enumerate()
            .map(|(p, t)| (0..4).map(|k| (v[p * 4 + k] - t[k]).abs()).sum())
            .collect();
        Ok(self.tape.push(
            vec![targets.len()],
            out,
            Op::L1Rows(self.id, Rc::new(targets.to_vec())),
        ))
    }

    fn check_box_rows(&self, name: &'static str, n: usize) -> Result<()> {
        let s = self.shape();
        if s.len() != 2 || s[1] != 4 || s[0] != n {
            return Err(mismatch(name, &s, &[n, 4]));
        }
        Ok(())
    }
}
