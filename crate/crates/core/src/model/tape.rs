//! Reverse-mode differentiation over 2-D tensors.
//!
//! Values are computed eagerly as nodes are pushed; `backward` walks the
//! tape in reverse and returns one gradient per parameter of the store the
//! graph was built against.

use ndarray::{s, Array2, ArrayView2, Axis, NdFloat};

use super::params::ParamStore;
use super::Segments;

pub(crate) type NodeId = usize;

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn cst<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("representable constant")
}

enum Op<F> {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Gather(NodeId, Vec<usize>),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<F>,
        rstd: Vec<F>,
    },
    Im2col {
        x: NodeId,
        kernel: usize,
        segments: Segments,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        q_seg: Segments,
        kv_seg: Segments,
        probs: Vec<Array2<F>>,
    },
    MulConst(NodeId, Array2<F>),
    AddConst(NodeId),
    L1 {
        pred: NodeId,
        target: Array2<F>,
    },
}

struct Node<F> {
    op: Op<F>,
    value: Option<Array2<F>>,
    grad: bool,
}

pub(crate) struct Graph<'p, F: NdFloat> {
    params: &'p ParamStore<F>,
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node<F>>,
}

impl<'p, F: NdFloat> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            param_nodes: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Array2<F> {
        match (&self.nodes[id].op, &self.nodes[id].value) {
            (_, Some(v)) => v,
            (Op::Param(i), None) => self.params.tensor(*i),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, op: Op<F>, value: Array2<F>, grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
            grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].grad
    }

    pub fn input(&mut self, value: Array2<F>) -> NodeId {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        self.nodes.push(Node {
            op: Op::Param(index),
            value: None,
            grad: true,
        });
        let id = self.nodes.len() - 1;
        self.param_nodes[index] = Some(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        let grad = self.needs(a) || self.needs(b);
        self.push(Op::MatMul(a, b), v, grad)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        let grad = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, grad)
    }

    /// `a + row` with `row` of shape `1 x cols` broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        let grad = self.needs(a) || self.needs(row);
        self.push(Op::AddRow(a, row), v, grad)
    }

    /// `out[i] = a[index[i]]`.
    pub fn gather(&mut self, a: NodeId, index: Vec<usize>) -> NodeId {
        let src = self.value(a);
        let mut v = Array2::zeros((index.len(), src.ncols()));
        for (i, &j) in index.iter().enumerate() {
            v.row_mut(i).assign(&src.row(j));
        }
        let grad = self.needs(a);
        self.push(Op::Gather(a, index), v, grad)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        let grad = self.needs(a);
        self.push(Op::Relu(a), v, grad)
    }

    /// Row-wise layer normalization with learned `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let d = cst::<F>(xv.ncols() as f64);
        let eps = cst::<F>(LN_EPS);
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).fold(F::zero(), |a, b| a + b) / d;
            let r = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd.push(r);
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        let grad = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            v,
            grad,
        )
    }

    /// Unfold `kernel` neighbouring rows (centred, zero-padded at segment
    /// edges) into one row of width `kernel * cols`.
    pub fn im2col(&mut self, x: NodeId, kernel: usize, segments: &Segments) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let pad = (kernel - 1) / 2;
        let mut v = Array2::zeros((rows, kernel * cols));
        for r in segments.ranges() {
            for t in r.clone() {
                for j in 0..kernel {
                    let src = t as isize + j as isize - pad as isize;
                    if src >= r.start as isize && src < r.end as isize {
                        v.slice_mut(s![t, j * cols..(j + 1) * cols])
                            .assign(&xv.row(src as usize));
                    }
                }
            }
        }
        let grad = self.needs(x);
        self.push(
            Op::Im2col {
                x,
                kernel,
                segments: segments.clone(),
            },
            v,
            grad,
        )
    }

    /// Multi-head scaled dot-product attention. Segment `b` of the queries
    /// attends only to segment `b` of the keys and values.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        q_seg: &Segments,
        kv_seg: &Segments,
    ) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / heads;
        let scale = cst::<F>(1.0 / (dh as f64).sqrt());
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(q_seg.len() * heads);
        for (qr, kr) in q_seg.ranges().zip(kv_seg.ranges()) {
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![qr.clone(), c.clone()]);
                let kh = kv.slice(s![kr.clone(), c.clone()]);
                let vh = vv.slice(s![kr.clone(), c.clone()]);
                let mut p = qh.dot(&kh.t());
                p.mapv_inplace(|x| x * scale);
                softmax_rows(&mut p);
                out.slice_mut(s![qr.clone(), c]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let grad = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            Op::Attention {
                q,
                k,
                v,
                heads,
                q_seg: q_seg.clone(),
                kv_seg: kv_seg.clone(),
                probs,
            },
            out,
            grad,
        )
    }

    /// Attention weights saved by an attention node, one `Lq x Lk` matrix
    /// per (segment, head) in segment-major order.
    pub fn attention_probs(&self, id: NodeId) -> &[Array2<F>] {
        match &self.nodes[id].op {
            Op::Attention { probs, .. } => probs,
            _ => panic!("node {id} is not an attention node"),
        }
    }

    pub fn mul_const(&mut self, a: NodeId, c: Array2<F>) -> NodeId {
        let v = self.value(a) * &c;
        let grad = self.needs(a);
        self.push(Op::MulConst(a, c), v, grad)
    }

    pub fn add_const(&mut self, a: NodeId, c: &Array2<F>) -> NodeId {
        let v = self.value(a) + c;
        let grad = self.needs(a);
        self.push(Op::AddConst(a), v, grad)
    }

    /// Mean absolute error as a `1 x 1` node.
    pub fn l1(&mut self, pred: NodeId, target: Array2<F>) -> NodeId {
        let p = self.value(pred);
        let n = cst::<F>(p.len() as f64);
        let total = p
            .iter()
            .zip(target.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), |a, b| a + b);
        let grad = self.needs(pred);
        self.push(Op::L1 { pred, target }, Array2::from_elem((1, 1), total / n), grad)
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    /// Parameters the graph never touched get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Vec<Array2<F>> {
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Array2::ones((1, 1)));

        for id in (0..=loss).rev() {
            if !self.nodes[id].grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        acc_view(&mut grads, *b, g.view());
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, r) => {
                    if self.needs(*r) {
                        acc(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Gather(a, index) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (i, &j) in index.iter().enumerate() {
                        let mut row = ga.row_mut(j);
                        row += &g.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut g = g;
                    g.zip_mut_with(self.value(id), |gv, &y| {
                        if y <= F::zero() {
                            *gv = F::zero();
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.needs(*beta) {
                        acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*gamma) {
                        acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*x) {
                        let d = cst::<F>(xhat.ncols() as f64);
                        let mut dx = &g * self.value(*gamma);
                        for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(rstd) {
                            let m1 = row.sum() / d;
                            let m2 = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).fold(F::zero(), |a, b| a + b) / d;
                            row.zip_mut_with(&xh, |v, &h| *v = r * (*v - m1 - h * m2));
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Im2col {
                    x,
                    kernel,
                    segments,
                } => {
                    let cols = self.value(*x).ncols();
                    let pad = (kernel - 1) / 2;
                    let mut gx = Array2::zeros((g.nrows(), cols));
                    for r in segments.ranges() {
                        for t in r.clone() {
                            for j in 0..*kernel {
                                let src = t as isize + j as isize - pad as isize;
                                if src >= r.start as isize && src < r.end as isize {
                                    let mut dst = gx.row_mut(src as usize);
                                    dst += &g.slice(s![t, j * cols..(j + 1) * cols]);
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    q_seg,
                    kv_seg,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = cst::<F>(1.0 / (dh as f64).sqrt());
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gk = Array2::zeros(kv.raw_dim());
                    let mut gv = Array2::zeros(vv.raw_dim());
                    let mut p_iter = probs.iter();
                    for (qr, kr) in q_seg.ranges().zip(kv_seg.ranges()) {
                        for h in 0..*heads {
                            let p = p_iter.next().expect("one prob matrix per head");
                            let c = h * dh..(h + 1) * dh;
                            let go = g.slice(s![qr.clone(), c.clone()]);
                            let qh = qv.slice(s![qr.clone(), c.clone()]);
                            let kh = kv.slice(s![kr.clone(), c.clone()]);
                            let vh = vv.slice(s![kr.clone(), c.clone()]);
                            let mut gvs = gv.slice_mut(s![kr.clone(), c.clone()]);
                            gvs += &p.t().dot(&go);
                            let mut ds = go.dot(&vh.t());
                            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).fold(F::zero(), |a, b| a + b);
                                drow.zip_mut_with(&prow, |x, &pv| *x = pv * (*x - dot) * scale);
                            }
                            let mut gqs = gq.slice_mut(s![qr.clone(), c.clone()]);
                            gqs += &ds.dot(&kh);
                            let mut gks = gk.slice_mut(s![kr.clone(), c]);
                            gks += &ds.t().dot(&qh);
                        }
                    }
                    if self.needs(*q) {
                        acc(&mut grads, *q, gq);
                    }
                    if self.needs(*k) {
                        acc(&mut grads, *k, gk);
                    }
                    if self.needs(*v) {
                        acc(&mut grads, *v, gv);
                    }
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, g * c),
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::L1 { pred, target } => {
                    let p = self.value(*pred);
                    let scale = g[[0, 0]] / cst::<F>(p.len() as f64);
                    let mut gp = p - target;
                    gp.mapv_inplace(|x| {
                        if x > F::zero() {
                            scale
                        } else if x < F::zero() {
                            -scale
                        } else {
                            F::zero()
                        }
                    });
                    acc(&mut grads, *pred, gp);
                }
            }
        }

        (0..self.params.len())
            .map(|i| {
                self.param_nodes[i]
                    .and_then(|id| grads[id].take())
                    .unwrap_or_else(|| Array2::zeros(self.params.tensor(i).raw_dim()))
            })
            .collect()
    }
}

fn acc<F: NdFloat>(grads: &mut [Option<Array2<F>>], id: NodeId, g: Array2<F>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

fn acc_view<F: NdFloat>(grads: &mut [Option<Array2<F>>], id: NodeId, g: ArrayView2<F>) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g.to_owned()),
    }
}

pub(crate) fn softmax_rows<F: NdFloat>(m: &mut Array2<F>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}
