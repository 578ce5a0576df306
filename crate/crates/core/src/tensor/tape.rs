use super::{
    axpy, binary, dot, matmul, matvec, rows_matvec, max_over_time_with_argmax, softmax, unary, BinaryOp,
    Gradients, ParamId, ParamSet, Result, Tensor, TensorError, UnaryOp,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Known-bad backward rules, used only to prove that gradient checks catch
/// a broken derivative.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// tanh backward uses `1 - y` instead of `1 - y^2`.
    TanhDerivative,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatVec(Var, Var),
    MatMul(Var, Var),
    RowsMatVec(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    Softmax(Var),
    MaxOverTime(Var, Vec<usize>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Stack(Vec<Var>),
    GatherRow(Var, usize),
    WeightedRows(Var, Var),
    Sum(Var),
    AddN(Vec<Var>),
    NegLogPick(Var, usize),
}

struct Node {
    // `None` for parameter leaves, whose value lives in the ParamSet.
    value: Option<Tensor>,
    op: Op,
}

/// Records a computation over borrowed parameters. A tape is single-use and
/// confined to one thread; build one per forward pass.
pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    fault: Option<BackwardFault>,
}

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(params: &'p ParamSet, fault: BackwardFault) -> Self {
        let mut tape = Self::new(params);
        tape.fault = Some(fault);
        tape
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            (None, _) => unreachable!("only parameter leaves omit their value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; gradients flowing into it are dropped.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for a parameter. Repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let out = matvec(self.value(w), self.value(x))?;
        Ok(self.push(out, Op::MatVec(w, x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `w [m, k]` applied to each row of `x [T, k]`.
    pub fn rows_matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let out = rows_matvec(self.value(w), self.value(x))?;
        Ok(self.push(out, Op::RowsMatVec(w, x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary(BinaryOp::Add, self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Binary(BinaryOp::Add, a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary(BinaryOp::Mul, self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Binary(BinaryOp::Mul, a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = unary(UnaryOp::Tanh, self.value(a))?;
        Ok(self.push(out, Op::Unary(UnaryOp::Tanh, a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = unary(UnaryOp::Sigmoid, self.value(a))?;
        Ok(self.push(out, Op::Unary(UnaryOp::Sigmoid, a)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let src = self.value(a);
        let data = src.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?.ensure_finite("scale")?;
        Ok(self.push(out, Op::Scale(a, factor)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax(self.value(a))?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn max_over_time(&mut self, r: Var) -> Result<Var> {
        let (out, arg) = max_over_time_with_argmax(self.value(r))?;
        Ok(self.push(out, Op::MaxOverTime(r, arg)))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Empty { op: "concat" });
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// `a[start..start + len]` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        if start + len > src.len() {
            return Err(TensorError::OutOfRange {
                op: "slice",
                index: start + len,
                len: src.len(),
            });
        }
        let out = Tensor::vector(src.data()[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice(a, start)))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(TensorError::Empty { op: "stack" })?;
        let width = self.value(*first).len();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let v = self.value(r);
            if v.shape() != [width] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: vec![width],
                    right: v.shape().to_vec(),
                });
            }
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows.len(), width, data)?;
        Ok(self.push(out, Op::Stack(rows.to_vec())))
    }

    /// Row `index` of a matrix, as a vector.
    pub fn gather_row(&mut self, m: Var, index: usize) -> Result<Var> {
        let src = self.value(m);
        let (rows, _) = src.dims2("gather_row")?;
        if index >= rows {
            return Err(TensorError::OutOfRange {
                op: "gather_row",
                index,
                len: rows,
            });
        }
        let out = Tensor::vector(src.row(index).to_vec());
        Ok(self.push(out, Op::GatherRow(m, index)))
    }

    /// `sum_t weights[t] * rows[t]` for weights `[T]` and rows `[T, d]`.
    pub fn weighted_rows(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let w = self.value(weights);
        let m = self.value(rows);
        let (t, d) = m.dims2("weighted_rows")?;
        if w.shape() != [t] {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_rows",
                left: w.shape().to_vec(),
                right: m.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; d];
        for (step, &a) in w.data().iter().enumerate() {
            axpy(a, m.row(step), &mut out);
        }
        let out = Tensor::vector(out).ensure_finite("weighted_rows")?;
        Ok(self.push(out, Op::WeightedRows(weights, rows)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let out = Tensor::scalar(s).ensure_finite("sum")?;
        Ok(self.push(out, Op::Sum(a)))
    }

    /// Elementwise sum of same-shaped values.
    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let first = terms.first().ok_or(TensorError::Empty { op: "add_n" })?;
        let mut acc = self.value(*first).clone();
        for &t in &terms[1..] {
            let v = self.value(t);
            if v.shape() != acc.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "add_n",
                    left: acc.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
                *a += b;
            }
        }
        let out = acc.ensure_finite("add_n")?;
        Ok(self.push(out, Op::AddN(terms.to_vec())))
    }

    /// `-ln(max(p[index], 1e-12))` for a probability vector `p`.
    pub fn neg_log_pick(&mut self, probs: Var, index: usize) -> Result<Var> {
        let p = self.value(probs);
        let len = p.len();
        let value = *p.data().get(index).ok_or(TensorError::OutOfRange {
            op: "neg_log_pick",
            index,
            len,
        })?;
        let out = Tensor::scalar(-value.max(LOG_CLAMP).ln());
        Ok(self.push(out, Op::NegLogPick(probs, index)))
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of every
    /// parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let shape = self.params.get(*id).value.shape().to_vec();
                    out.entries.push((*id, Tensor::new(shape, g)?));
                }
                Op::MatVec(w, x) => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let (m, k) = wv.dims2("matvec")?;
                    {
                        let gw = slot(&mut grads, *w, m * k);
                        for (i, &gi) in g.iter().enumerate() {
                            if gi != 0.0 {
                                axpy(gi, xv.data(), &mut gw[i * k..(i + 1) * k]);
                            }
                        }
                    }
                    let gx = slot(&mut grads, *x, k);
                    for (i, &gi) in g.iter().enumerate() {
                        if gi != 0.0 {
                            axpy(gi, wv.row(i), gx);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = av.dims2("matmul")?;
                    let (_, n) = bv.dims2("matmul")?;
                    {
                        // dA = G · Bᵀ
                        let ga = slot(&mut grads, *a, m * k);
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                ga[i * k + p] += dot(grow, bv.row(p));
                            }
                        }
                    }
                    // dB = Aᵀ · G
                    let gb = slot(&mut grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            axpy(av.data()[i * k + p], grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
                Op::RowsMatVec(w, x) => {
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let (m, k) = wv.dims2("rows_matvec")?;
                    let (t, _) = xv.dims2("rows_matvec")?;
                    {
                        let gw = slot(&mut grads, *w, m * k);
                        for step in 0..t {
                            for j in 0..m {
                                let gj = g[step * m + j];
                                if gj != 0.0 {
                                    axpy(gj, xv.row(step), &mut gw[j * k..(j + 1) * k]);
                                }
                            }
                        }
                    }
                    let gx = slot(&mut grads, *x, t * k);
                    for step in 0..t {
                        for j in 0..m {
                            let gj = g[step * m + j];
                            if gj != 0.0 {
                                axpy(gj, wv.row(j), &mut gx[step * k..(step + 1) * k]);
                            }
                        }
                    }
                }
                Op::Binary(op, a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    binary_backward(*op, (*a, av), (*b, bv), &g, &mut grads);
                }
                Op::Unary(op, a) => {
                    let y = node.value.as_ref().expect("unary output").data();
                    let ga = slot(&mut grads, *a, y.len());
                    for ((d, &gi), &yi) in ga.iter_mut().zip(&g).zip(y) {
                        let local = match (op, self.fault) {
                            (UnaryOp::Tanh, Some(BackwardFault::TanhDerivative)) => 1.0 - yi,
                            (UnaryOp::Tanh, _) => 1.0 - yi * yi,
                            (UnaryOp::Sigmoid, _) => yi * (1.0 - yi),
                        };
                        *d += gi * local;
                    }
                }
                Op::Scale(a, factor) => {
                    let ga = slot(&mut grads, *a, g.len());
                    axpy(*factor, &g, ga);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax output").data();
                    let inner = dot(&g, y);
                    let ga = slot(&mut grads, *a, y.len());
                    for ((d, &gi), &yi) in ga.iter_mut().zip(&g).zip(y) {
                        *d += yi * (gi - inner);
                    }
                }
                Op::MaxOverTime(r, arg) => {
                    let (t, d) = self.value(*r).dims2("max_over_time")?;
                    let gr = slot(&mut grads, *r, t * d);
                    for (j, (&step, &gj)) in arg.iter().zip(&g).enumerate() {
                        gr[step * d + j] += gj;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let gp = slot(&mut grads, p, len);
                        axpy(1.0, &g[offset..offset + len], gp);
                        offset += len;
                    }
                }
                Op::Slice(a, start) => {
                    let len = self.value(*a).len();
                    let ga = slot(&mut grads, *a, len);
                    axpy(1.0, &g, &mut ga[*start..*start + g.len()]);
                }
                Op::Stack(rows) => {
                    let width = g.len() / rows.len();
                    for (step, &r) in rows.iter().enumerate() {
                        let gr = slot(&mut grads, r, width);
                        axpy(1.0, &g[step * width..(step + 1) * width], gr);
                    }
                }
                Op::GatherRow(m, index) => {
                    let (rows, cols) = self.value(*m).dims2("gather_row")?;
                    let gm = slot(&mut grads, *m, rows * cols);
                    axpy(1.0, &g, &mut gm[index * cols..(index + 1) * cols]);
                }
                Op::WeightedRows(w, rows) => {
                    let wv = self.value(*w);
                    let mv = self.value(*rows);
                    let (t, d) = mv.dims2("weighted_rows")?;
                    {
                        let gw = slot(&mut grads, *w, t);
                        for (step, gws) in gw.iter_mut().enumerate() {
                            *gws += dot(&g, mv.row(step));
                        }
                    }
                    let gm = slot(&mut grads, *rows, t * d);
                    for (step, &a) in wv.data().iter().enumerate() {
                        axpy(a, &g, &mut gm[step * d..(step + 1) * d]);
                    }
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    let ga = slot(&mut grads, *a, len);
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::AddN(terms) => {
                    for &t in terms {
                        let gt = slot(&mut grads, t, g.len());
                        axpy(1.0, &g, gt);
                    }
                }
                Op::NegLogPick(p, index) => {
                    let pv = self.value(*p);
                    let len = pv.len();
                    let prob = pv.data()[*index];
                    let gp = slot(&mut grads, *p, len);
                    if prob >= LOG_CLAMP {
                        gp[*index] -= g[0] / prob;
                    }
                }
            }
        }
        out.entries.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

fn binary_backward(
    op: BinaryOp,
    (a, av): (Var, &Tensor),
    (b, bv): (Var, &Tensor),
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    // Partial of the output w.r.t. one operand, given the other.
    let partial = |other: &Tensor, i: usize| match op {
        BinaryOp::Add => 1.0,
        BinaryOp::Mul => {
            if other.is_scalar() {
                other.data()[0]
            } else {
                other.data()[i]
            }
        }
    };
    for (this, this_v, other_v) in [(a, av, bv), (b, bv, av)] {
        let gt = slot(grads, this, this_v.len());
        if this_v.is_scalar() && g.len() > 1 {
            gt[0] += g
                .iter()
                .enumerate()
                .map(|(i, gi)| gi * partial(other_v, i))
                .sum::<f64>();
        } else {
            for (i, (d, gi)) in gt.iter_mut().zip(g).enumerate() {
                *d += gi * partial(other_v, i);
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamSet;

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::vector(vec![1.0, -2.0, 3.0]));
        let mut tape = Tape::new(&ps);
        let p = tape.param(id);
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_times_anything_has_zero_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::vector(vec![4.0, 5.0]));
        let mut tape = Tape::new(&ps);
        let p = tape.param(id);
        let zero = tape.input(Tensor::scalar(0.0));
        let prod = tape.mul(p, zero).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let v = tape.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(v),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::vector(vec![1.0, 2.0]));
        for _ in 0..2 {
            let g = {
                let mut tape = Tape::new(&ps);
                let p = tape.param(id);
                let loss = tape.sum(p).unwrap();
                tape.backward(loss).unwrap()
            };
            ps.accumulate(&g, 1.0);
        }
        assert_eq!(ps.get(id).grad.data(), &[2.0, 2.0]);
        ps.zero_grads();
        assert_eq!(ps.get(id).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::vector(vec![3.0]));
        let mut tape = Tape::new(&ps);
        let a = tape.param(id);
        let b = tape.param(id);
        assert_eq!(a, b);
        // d(p*p)/dp = 2p
        let sq = tape.mul(a, b).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[6.0]);
    }
}
