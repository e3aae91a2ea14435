//! Reverse-mode tape over dense row-major matrices.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis, Zip};

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    Gather(NodeId, Arc<[usize]>),
    ScatterAdd(NodeId, Arc<[usize]>),
    SegmentSoftmax(NodeId, Arc<[usize]>),
    MulCol(NodeId, NodeId),
    EdgeRelu {
        send: NodeId,
        recv: NodeId,
        bias: NodeId,
        send_idx: Arc<[usize]>,
        recv_idx: Arc<[usize]>,
    },
    WeightedScatter(NodeId, NodeId, Arc<[usize]>),
    CenterRows(NodeId),
    SubRow(NodeId),
    Mse(NodeId, Arc<Array2<f64>>),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records every operation so gradients can be replayed in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

fn mismatch(context: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Error {
    Error::ShapeMismatch {
        context,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

/// `out[i] = a[index[i]]` row-wise.
fn gather(a: &Array2<f64>, index: &[usize]) -> Array2<f64> {
    let c = a.ncols();
    let src = a.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(index.len() * c);
    for &i in index {
        out.extend_from_slice(&src[i * c..(i + 1) * c]);
    }
    Array2::from_shape_vec((index.len(), c), out).expect("sized above")
}

/// `out[index[i]] += a[i]` row-wise.
fn scatter(a: &Array2<f64>, index: &[usize], n_rows: usize) -> Array2<f64> {
    let c = a.ncols();
    let src = a.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let mut out = vec![0.0; n_rows * c];
    for (row, &dst) in src.chunks_exact(c.max(1)).zip(index) {
        for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(row) {
            *o += v;
        }
    }
    Array2::from_shape_vec((n_rows, c), out).expect("sized above")
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
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

    /// Inputs of every ReLU and leaky ReLU on the tape, in recording order.
    /// Two tapes whose inputs have the same signs lie on the same smooth
    /// piece of the network.
    pub fn rectifier_inputs(&self) -> Vec<f64> {
        let mut inputs = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => inputs.extend(self.value(*a).iter().copied()),
                Op::EdgeRelu {
                    send,
                    recv,
                    bias,
                    send_idx,
                    recv_idx,
                } => {
                    let (vs, vr, vb) = (self.value(*send), self.value(*recv), self.value(*bias));
                    for (&i, &j) in send_idx.iter().zip(recv_idx.iter()) {
                        let pre = &vs.row(i) + &vr.row(j) + vb.row(0);
                        inputs.extend(pre.iter().copied());
                    }
                }
                _ => {}
            }
        }
        inputs
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(mismatch("neural::matmul", va, vb));
        }
        let out = if vb.ncols() == 1 {
            // matrix-vector products skip GEMM packing
            va.dot(&vb.column(0)).insert_axis(Axis(1))
        } else {
            va.dot(vb)
        };
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("neural::add", va, vb));
        }
        let out = va + vb;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Broadcast a `1 × c` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(mismatch("neural::add_row", va, vr));
        }
        let out = va + vr;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let out = self.value(a).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(parts[0]);
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).nrows() != first.nrows()) {
            return Err(mismatch("neural::concat_cols", first, self.value(*bad)));
        }
        let rows = first.nrows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        let layouts: Vec<_> = parts.iter().map(|&p| self.value(p).as_standard_layout()).collect();
        let slices: Vec<&[f64]> = layouts.iter().map(|l| l.as_slice().expect("standard")).collect();
        for r in 0..rows {
            for (src, &w) in slices.iter().zip(&widths) {
                out.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let out = Array2::from_shape_vec((rows, total), out).expect("sized above");
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = self.value(parts[0]);
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).ncols() != first.ncols()) {
            return Err(mismatch("neural::concat_rows", first, self.value(*bad)));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start + len > va.nrows() {
            return Err(Error::ShapeMismatch {
                context: "neural::slice_rows",
                left: va.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let out = va.slice(s![start..start + len, ..]).to_owned();
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: NodeId, index: Arc<[usize]>) -> Result<NodeId> {
        let va = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= va.nrows()) {
            return Err(Error::ShapeMismatch {
                context: "neural::gather_rows",
                left: va.shape().to_vec(),
                right: vec![bad],
            });
        }
        let out = gather(va, &index);
        Ok(self.push(out, Op::Gather(a, index)))
    }

    /// Row `i` of `a` is added into output row `index[i]`.
    pub fn scatter_add_rows(&mut self, a: NodeId, index: Arc<[usize]>, n_rows: usize) -> Result<NodeId> {
        let va = self.value(a);
        if index.len() != va.nrows() || index.iter().any(|&i| i >= n_rows) {
            return Err(Error::ShapeMismatch {
                context: "neural::scatter_add_rows",
                left: va.shape().to_vec(),
                right: vec![index.len(), n_rows],
            });
        }
        let out = scatter(va, &index, n_rows);
        Ok(self.push(out, Op::ScatterAdd(a, index)))
    }

    /// Softmax of an `e × 1` score column within each group; `group[i]`
    /// names the group of entry `i`.
    pub fn segment_softmax(&mut self, scores: NodeId, group: Arc<[usize]>) -> Result<NodeId> {
        let v = self.value(scores);
        if v.ncols() != 1 || v.nrows() != group.len() {
            return Err(Error::ShapeMismatch {
                context: "neural::segment_softmax",
                left: v.shape().to_vec(),
                right: vec![group.len(), 1],
            });
        }
        let n_groups = group.iter().max().map_or(0, |&g| g + 1);
        let mut max = vec![f64::NEG_INFINITY; n_groups];
        for (&x, &g) in v.iter().zip(group.iter()) {
            max[g] = max[g].max(x);
        }
        let mut out = Array2::zeros((group.len(), 1));
        let mut sum = vec![0.0; n_groups];
        for ((o, &x), &g) in out.iter_mut().zip(v.iter()).zip(group.iter()) {
            *o = (x - max[g]).exp();
            sum[g] += *o;
        }
        for (o, &g) in out.iter_mut().zip(group.iter()) {
            *o /= sum[g];
        }
        Ok(self.push(out, Op::SegmentSoftmax(scores, group)))
    }

    /// Scale row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.ncols() != 1 || vc.nrows() != va.nrows() {
            return Err(mismatch("neural::mul_col", va, vc));
        }
        let out = va * vc;
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    /// Per-edge `ReLU(send[send_idx[e]] + recv[recv_idx[e]] + bias)` in one
    /// pass.
    pub fn edge_relu(
        &mut self,
        send: NodeId,
        recv: NodeId,
        bias: NodeId,
        send_idx: Arc<[usize]>,
        recv_idx: Arc<[usize]>,
    ) -> Result<NodeId> {
        let (vs, vr, vb) = (self.value(send), self.value(recv), self.value(bias));
        let c = vs.ncols();
        if vr.ncols() != c || vb.dim() != (1, c) || send_idx.len() != recv_idx.len() {
            return Err(mismatch("neural::edge_relu", vs, vr));
        }
        if send_idx.iter().any(|&i| i >= vs.nrows()) || recv_idx.iter().any(|&i| i >= vr.nrows()) {
            return Err(mismatch("neural::edge_relu", vs, vr));
        }
        let (ss, rs) = (vs.as_standard_layout(), vr.as_standard_layout());
        let (ss, rs) = (ss.as_slice().expect("standard"), rs.as_slice().expect("standard"));
        let b = vb.iter().copied().collect::<Vec<f64>>();
        let mut out = Vec::with_capacity(send_idx.len() * c);
        for (&i, &j) in send_idx.iter().zip(recv_idx.iter()) {
            let (x, y) = (&ss[i * c..(i + 1) * c], &rs[j * c..(j + 1) * c]);
            out.extend(x.iter().zip(y).zip(&b).map(|((x, y), b)| (x + y + b).max(0.0)));
        }
        let out = Array2::from_shape_vec((send_idx.len(), c), out).expect("sized above");
        Ok(self.push(
            out,
            Op::EdgeRelu {
                send,
                recv,
                bias,
                send_idx,
                recv_idx,
            },
        ))
    }

    /// `out[index[e]] += alpha[e] · x[e]`, with `alpha` an `e × 1` column.
    pub fn weighted_scatter(&mut self, x: NodeId, alpha: NodeId, index: Arc<[usize]>, n_rows: usize) -> Result<NodeId> {
        let (vx, va) = (self.value(x), self.value(alpha));
        if va.dim() != (vx.nrows(), 1) || index.len() != vx.nrows() || index.iter().any(|&i| i >= n_rows) {
            return Err(mismatch("neural::weighted_scatter", vx, va));
        }
        let c = vx.ncols();
        let xs = vx.as_standard_layout();
        let xs = xs.as_slice().expect("standard");
        let mut out = vec![0.0; n_rows * c];
        for ((row, &a), &dst) in xs.chunks_exact(c.max(1)).zip(va.iter()).zip(index.iter()) {
            for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(row) {
                *o += a * v;
            }
        }
        let out = Array2::from_shape_vec((n_rows, c), out).expect("sized above");
        Ok(self.push(out, Op::WeightedScatter(x, alpha, index)))
    }

    /// Subtract the per-column mean. Returns the mean that was removed.
    pub fn center_rows(&mut self, a: NodeId) -> Result<(NodeId, Array1<f64>)> {
        let va = self.value(a);
        let mean = va.mean_axis(Axis(0)).ok_or_else(|| Error::ShapeMismatch {
            context: "neural::center_rows",
            left: va.shape().to_vec(),
            right: vec![1],
        })?;
        let out = va - &mean;
        Ok((self.push(out, Op::CenterRows(a)), mean))
    }

    /// Subtract a constant row (no gradient flows to it).
    pub fn sub_const_row(&mut self, a: NodeId, row: &Array1<f64>) -> Result<NodeId> {
        let va = self.value(a);
        if row.len() != va.ncols() {
            return Err(Error::ShapeMismatch {
                context: "neural::sub_const_row",
                left: va.shape().to_vec(),
                right: vec![row.len()],
            });
        }
        let out = va - row;
        Ok(self.push(out, Op::SubRow(a)))
    }

    /// Mean squared error against a constant target, as a `1 × 1` node.
    pub fn mse(&mut self, pred: NodeId, target: Arc<Array2<f64>>) -> Result<NodeId> {
        let vp = self.value(pred);
        if vp.shape() != target.shape() || vp.is_empty() {
            return Err(mismatch("neural::mse", vp, &target));
        }
        let mut acc = 0.0;
        Zip::from(vp).and(&*target).for_each(|&p, &t| acc += (p - t) * (p - t));
        let out = Array2::from_elem((1, 1), acc / vp.len() as f64);
        Ok(self.push(out, Op::Mse(pred, target)))
    }

    /// Backpropagate a unit seed from a scalar node.
    pub fn backward(&mut self, output: NodeId, store: &mut ParamStore) -> Result<()> {
        let shape = self.value(output).shape();
        if shape != [1, 1] {
            return Err(Error::ShapeMismatch {
                context: "neural::backward",
                left: shape.to_vec(),
                right: vec![1, 1],
            });
        }
        self.backward_with(output, Array2::ones((1, 1)), store)
    }

    /// Backpropagate an explicit upstream gradient. Parameter gradients are
    /// accumulated into `store`; every parameter ends with a gradient, zero
    /// when it did not take part.
    pub fn backward_with(&mut self, output: NodeId, seed: Array2<f64>, store: &mut ParamStore) -> Result<()> {
        if seed.shape() != self.value(output).shape() {
            return Err(mismatch("neural::backward_with", self.value(output), &seed));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        store.ensure_grads();
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>], store: &mut ParamStore) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::Param(p) => store.accumulate_grad(*p, g),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ga, gb) = if vb.ncols() == 1 {
                    let k = va.ncols();
                    let bcol: Vec<f64> = vb.iter().copied().collect();
                    let al = va.as_standard_layout();
                    let mut ga = Vec::with_capacity(va.len());
                    let mut gb = vec![0.0; k];
                    for (&gi, arow) in g.iter().zip(al.as_slice().expect("standard").chunks_exact(k.max(1))) {
                        ga.extend(bcol.iter().map(|b| gi * b));
                        for (o, &x) in gb.iter_mut().zip(arow) {
                            *o += gi * x;
                        }
                    }
                    let ga = Array2::from_shape_vec(va.raw_dim(), ga).expect("sized above");
                    (ga, Array2::from_shape_vec((k, 1), gb).expect("sized above"))
                } else {
                    (g.dot(&vb.t()), va.t().dot(g))
                };
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::AddRow(a, row) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                accumulate(&mut grads[a.0], ga);
            }
            Op::LeakyRelu(a, slope) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= slope;
                    }
                });
                accumulate(&mut grads[a.0], ga);
            }
            Op::ConcatCols(parts) => {
                let total = g.ncols();
                let gl = g.as_standard_layout();
                let gs = gl.as_slice().expect("standard");
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    let mut part = Vec::with_capacity(g.nrows() * w);
                    for row in gs.chunks_exact(total.max(1)) {
                        part.extend_from_slice(&row[start..start + w]);
                    }
                    accumulate(&mut grads[p.0], Array2::from_shape_vec((g.nrows(), w), part).expect("sized above"));
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    accumulate(&mut grads[p.0], g.slice(s![start..start + h, ..]).to_owned());
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let mut ga = Array2::zeros(self.value(*a).raw_dim());
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(&mut grads[a.0], ga);
            }
            Op::Gather(a, index) => {
                accumulate(&mut grads[a.0], scatter(g, index, self.value(*a).nrows()));
            }
            Op::ScatterAdd(a, index) => {
                accumulate(&mut grads[a.0], gather(g, index));
            }
            Op::EdgeRelu {
                send,
                recv,
                bias,
                send_idx,
                recv_idx,
            } => {
                let (vs, vr) = (self.value(*send), self.value(*recv));
                let c = vs.ncols();
                let (mut gs, mut gr, mut gb) = (vec![0.0; vs.len()], vec![0.0; vr.len()], vec![0.0; c]);
                let gl = g.as_standard_layout();
                let rows = gl.as_slice().expect("standard").chunks_exact(c.max(1));
                let outs = node.value.as_slice().expect("standard").chunks_exact(c.max(1));
                for (((grow, yrow), &i), &j) in rows.zip(outs).zip(send_idx.iter()).zip(recv_idx.iter()) {
                    let (ds, dr) = (&mut gs[i * c..(i + 1) * c], &mut gr[j * c..(j + 1) * c]);
                    for ((((ds, dr), db), &y), &gv) in ds.iter_mut().zip(dr.iter_mut()).zip(gb.iter_mut()).zip(yrow).zip(grow) {
                        let d = if y > 0.0 { gv } else { 0.0 };
                        *ds += d;
                        *dr += d;
                        *db += d;
                    }
                }
                let shape = |v: Vec<f64>, r: usize| Array2::from_shape_vec((r, c), v).expect("sized above");
                accumulate(&mut grads[send.0], shape(gs, vs.nrows()));
                accumulate(&mut grads[recv.0], shape(gr, vr.nrows()));
                accumulate(&mut grads[bias.0], shape(gb, 1));
            }
            Op::WeightedScatter(x, alpha, index) => {
                let (vx, va) = (self.value(*x), self.value(*alpha));
                let c = vx.ncols();
                let xl = vx.as_standard_layout();
                let xs = xl.as_slice().expect("standard");
                let gl = g.as_standard_layout();
                let gs = gl.as_slice().expect("standard");
                let mut gx = vec![0.0; vx.len()];
                let mut ga = vec![0.0; vx.nrows()];
                for (e, (&dst, &a)) in index.iter().zip(va.iter()).enumerate() {
                    let grow = &gs[dst * c..(dst + 1) * c];
                    let xrow = &xs[e * c..(e + 1) * c];
                    let mut dot = 0.0;
                    for ((o, &gv), &xv) in gx[e * c..(e + 1) * c].iter_mut().zip(grow).zip(xrow) {
                        *o = a * gv;
                        dot += xv * gv;
                    }
                    ga[e] = dot;
                }
                accumulate(&mut grads[x.0], Array2::from_shape_vec(vx.raw_dim(), gx).expect("sized above"));
                accumulate(&mut grads[alpha.0], Array2::from_shape_vec((ga.len(), 1), ga).expect("sized above"));
            }
            Op::SegmentSoftmax(scores, group) => {
                let alpha = &node.value;
                let n_groups = group.iter().max().map_or(0, |&k| k + 1);
                let mut dot = vec![0.0; n_groups];
                for ((&a, &d), &k) in alpha.iter().zip(g.iter()).zip(group.iter()) {
                    dot[k] += a * d;
                }
                let mut gs = Array2::zeros(alpha.raw_dim());
                for (((o, &a), &d), &k) in gs.iter_mut().zip(alpha.iter()).zip(g.iter()).zip(group.iter()) {
                    *o = a * (d - dot[k]);
                }
                accumulate(&mut grads[scores.0], gs);
            }
            Op::MulCol(a, col) => {
                let vc = self.value(*col);
                accumulate(&mut grads[a.0], g * vc);
                let gc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                accumulate(&mut grads[col.0], gc);
            }
            Op::CenterRows(a) => {
                let mean = g.mean_axis(Axis(0)).expect("non-empty");
                accumulate(&mut grads[a.0], g - &mean);
            }
            Op::SubRow(a) => accumulate(&mut grads[a.0], g.clone()),
            Op::Mse(pred, target) => {
                let vp = self.value(*pred);
                let scale = 2.0 * g[[0, 0]] / vp.len() as f64;
                let mut gp = vp - &**target;
                gp *= scale;
                accumulate(&mut grads[pred.0], gp);
            }
        }
    }
}
