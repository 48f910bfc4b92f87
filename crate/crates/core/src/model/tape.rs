//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! either whole ([`Tape::param`]) or as gathered rows ([`Tape::gather`]);
//! [`Tape::backward`] returns their gradients as [`SampleGrads`].

use super::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    Gather { param: usize, ids: Vec<Option<usize>> },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax { x: Var },
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    Cols { x: Var, start: usize },
    Row { x: Var, index: usize },
    Transpose(Var),
    RowNormalize(Var),
    NegLogPick { x: Var, index: usize, floor: f64 },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Gradients of one backward pass. Dense parameters are `Some` only when they
/// were used; gathered rows are listed individually.
#[derive(Debug, Clone, Default)]
pub struct SampleGrads {
    pub dense: Vec<Option<Mat>>,
    pub rows: Vec<(usize, usize, Vec<f64>)>,
}

impl SampleGrads {
    /// Dense view matching `shapes`.
    pub fn to_dense(&self, shapes: &[(usize, usize)]) -> Vec<Mat> {
        let mut out: Vec<Mat> = shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect();
        self.accumulate_into(&mut out);
        out
    }

    pub fn accumulate_into(&self, out: &mut [Mat]) {
        for (slot, g) in out.iter_mut().zip(&self.dense) {
            if let Some(g) = g {
                slot.add_assign(g);
            }
        }
        for (p, r, g) in &self.rows {
            for (a, b) in out[*p].row_mut(*r).iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// First parameter index holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.dense
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite()))
            .map(|(i, _)| i)
            .or_else(|| {
                self.rows
                    .iter()
                    .find(|(_, _, g)| g.iter().any(|x| !x.is_finite()))
                    .map(|(p, _, _)| *p)
            })
    }
}

pub struct Tape<'p> {
    params: &'p [Mat],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    /// Whole parameter tensor; repeated calls share one node.
    pub fn param(&mut self, id: usize) -> Var {
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(self.params[id].clone(), Op::Param(id));
        self.param_vars[id] = Some(v);
        v
    }

    /// Rows of a parameter table. `None` ids take the constant row produced by
    /// `fallback(position)` and receive no gradient.
    pub fn gather(
        &mut self,
        id: usize,
        ids: &[Option<usize>],
        fallback: impl Fn(usize) -> Vec<f64>,
    ) -> Var {
        let table = &self.params[id];
        let mut out = Mat::zeros(ids.len(), table.cols);
        for (i, row) in ids.iter().enumerate() {
            match row {
                Some(r) => out.row_mut(i).copy_from_slice(table.row(*r)),
                None => out.row_mut(i).copy_from_slice(&fallback(i)),
            }
        }
        self.push(
            out,
            Op::Gather {
                param: id,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!((1, xv.cols), bv.shape(), "add_row shape mismatch");
        let mut v = xv.clone();
        for r in 0..v.rows {
            for (a, c) in v.row_mut(r).iter_mut().zip(&bv.data) {
                *a += c;
            }
        }
        self.push(v, Op::AddRow(x, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, m: Mat) -> Var {
        let v = self.value(x).zip_map(&m, |a, b| a * b);
        self.push(v, Op::MulConst(x, m))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| 1.0 / (1.0 + (-a).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax over a square matrix with the diagonal excluded. A row
    /// with no off-diagonal entries becomes all zeros.
    pub fn softmax_rows_drop_diag(&mut self, x: Var) -> Var {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, drop_diag: bool) -> Var {
        let xv = self.value(x);
        if drop_diag {
            assert_eq!(xv.rows, xv.cols, "diagonal dropping needs a square matrix");
        }
        let mut v = Mat::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let keep = |c: usize| !(drop_diag && c == r);
            let max = (0..row.len())
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let out = v.row_mut(r);
            let mut total = 0.0;
            for c in 0..row.len() {
                if keep(c) {
                    out[c] = (row[c] - max).exp();
                    total += out[c];
                }
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        self.push(v, Op::Softmax { x })
    }

    /// Concatenates along columns.
    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows, rows, "hcat row mismatch");
                v.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        self.push(v, Op::HCat(parts.to_vec()))
    }

    /// Concatenates along rows.
    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "vcat column mismatch");
            data.extend_from_slice(&pv.data);
        }
        let rows = data.len() / cols.max(1);
        self.push(Mat::from_vec(rows, cols, data), Op::VCat(parts.to_vec()))
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut v = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(v, Op::Cols { x, start })
    }

    pub fn row(&mut self, x: Var, index: usize) -> Var {
        let v = Mat::row_vector(self.value(x).row(index).to_vec());
        self.push(v, Op::Row { x, index })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    /// Divides each row by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut v = xv.clone();
        for r in 0..v.rows {
            let s: f64 = v.row(r).iter().sum();
            for a in v.row_mut(r) {
                *a /= s;
            }
        }
        self.push(v, Op::RowNormalize(x))
    }

    /// `-ln(max(x[0, index], floor))` as a 1×1 matrix.
    pub fn neg_log_pick(&mut self, x: Var, index: usize, floor: f64) -> Var {
        let p = self.value(x).get(0, index);
        self.push(Mat::scalar(-p.max(floor).ln()), Op::NegLogPick { x, index, floor })
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut v = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            v.add_assign(self.value(p));
        }
        self.push(v, Op::Sum(parts.to_vec()))
    }

    /// Gradients of the scalar `out` (seeded with `seed`) for every parameter.
    pub fn backward(&self, out: Var, seed: f64) -> SampleGrads {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::scalar(seed));
        let mut result = SampleGrads {
            dense: vec![None; self.params.len()],
            rows: Vec::new(),
        };

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Const => {}
                Op::Param(id) => match &mut result.dense[*id] {
                    Some(existing) => existing.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Gather { param, ids } => {
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(id) = id {
                            result.rows.push((*param, *id, g.row(r).to_vec()));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(val(*b));
                    let gb = val(*a).matmul_tn(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.matmul(val(*b));
                    let gb = g.matmul_tn(val(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(val(*b), |x, y| x * y);
                    let gb = g.zip_map(val(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, b) => {
                    let mut gb = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(&mut grads, *x, g);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    acc(&mut grads, *x, g.map(|v| v * s));
                }
                Op::MulConst(x, m) => acc(&mut grads, *x, g.zip_map(m, |a, b| a * b)),
                Op::Relu(x) => {
                    let gx = g.zip_map(&node.value, |a, y| if y > 0.0 { a } else { 0.0 });
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |a, y| a * y * (1.0 - y));
                    acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let gx = g.zip_map(&node.value, |a, y| a * (1.0 - y * y));
                    acc(&mut grads, *x, gx);
                }
                Op::Softmax { x } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, &gy), &yy) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yy * (gy - dot);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::HCat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = val(p).cols;
                        let mut gp = Mat::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        off += pc;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::VCat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pr = val(p).rows;
                        let gp = Mat::from_vec(
                            pr,
                            g.cols,
                            g.data[off * g.cols..(off + pr) * g.cols].to_vec(),
                        );
                        off += pr;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::Cols { x, start } => {
                    let xv = val(*x);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        gx.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Row { x, index } => {
                    // In place: recurrent loops read every row of one input.
                    let xv = val(*x);
                    let slot = grads[x.0].get_or_insert_with(|| Mat::zeros(xv.rows, xv.cols));
                    for (a, b) in slot.row_mut(*index).iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                Op::Transpose(x) => acc(&mut grads, *x, g.transpose()),
                Op::RowNormalize(x) => {
                    let xv = val(*x);
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let s: f64 = xv.row(r).iter().sum();
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (o, &gy) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o = (gy - dot) / s;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::NegLogPick { x, index, floor } => {
                    let xv = val(*x);
                    let p = xv.get(0, *index);
                    let mut gx = Mat::zeros(xv.rows, xv.cols);
                    if p > *floor {
                        gx.set(0, *index, -g.data[0] / p);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        acc(&mut grads, p, g.clone());
                    }
                }
            }
        }
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of d(out)/d(param 0) for a scalar-valued graph.
    fn check(params: Vec<Mat>, build: impl Fn(&mut Tape) -> Var) {
        let mut tape = Tape::new(&params);
        let out = build(&mut tape);
        let g = tape.backward(out, 1.0).to_dense(&params.iter().map(Mat::shape).collect::<Vec<_>>());
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let h = 1e-6;
                let mut plus = params.clone();
                plus[p].data[i] += h;
                let mut minus = params.clone();
                minus[p].data[i] -= h;
                let fp = {
                    let mut t = Tape::new(&plus);
                    let o = build(&mut t);
                    t.value(o).data[0]
                };
                let fm = {
                    let mut t = Tape::new(&minus);
                    let o = build(&mut t);
                    t.value(o).data[0]
                };
                let fd = (fp - fm) / (2.0 * h);
                let an = g[p].data[i];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {p}[{i}]: analytic {an} vs numeric {fd}"
                );
            }
        }
    }

    fn m(r: usize, c: usize, seed: u64) -> Mat {
        let mut s = seed;
        Mat::from_vec(
            r,
            c,
            (0..r * c)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
                })
                .collect(),
        )
    }

    #[test]
    fn matmul_softmax_pick() {
        check(vec![m(3, 4, 1), m(4, 5, 2)], |t| {
            let a = t.param(0);
            let b = t.param(1);
            let ab = t.matmul(a, b);
            let s = t.softmax_rows(ab);
            let r = t.row(s, 1);
            t.neg_log_pick(r, 2, 1e-12)
        });
    }

    #[test]
    fn gates_and_concat() {
        check(vec![m(2, 3, 3), m(2, 3, 4), m(1, 3, 5)], |t| {
            let a = t.param(0);
            let b = t.param(1);
            let bias = t.param(2);
            let s = t.sigmoid(a);
            let th = t.tanh(b);
            let pr = t.mul(s, th);
            let d = t.sub(pr, a);
            let d = t.add_row(d, bias);
            let r = t.relu(d);
            let c = t.hcat(&[r, a]);
            let v = t.vcat(&[c, c]);
            let cl = t.cols(v, 1, 4);
            let tr = t.transpose(cl);
            let mm = t.matmul_nt(tr, tr);
            let sq = t.softmax_rows_drop_diag(mm);
            let pick = t.row(sq, 0);
            let sc = t.scale(pick, 3.0);
            let e = t.sigmoid(sc);
            let nrm = t.row_normalize(e);
            let total = t.sum(&[nrm, nrm]);
            t.neg_log_pick(total, 1, 1e-12)
        });
    }

    #[test]
    fn gather_rows_and_fallback() {
        let params = vec![m(4, 2, 9)];
        let mut t = Tape::new(&params);
        let g = t.gather(0, &[Some(2), None, Some(2)], |_| vec![7.0, 8.0]);
        assert_eq!(t.value(g).row(1), &[7.0, 8.0]);
        let w = t.constant(Mat::from_vec(2, 1, vec![1.0, 2.0]));
        let y = t.matmul(g, w);
        let yt = t.transpose(y);
        let one = t.constant(Mat::from_vec(3, 1, vec![1.0; 3]));
        let s = t.matmul(yt, one);
        let grads = t.backward(s, 1.0).to_dense(&[(4, 2)]);
        assert_eq!(grads[0].row(2), &[2.0, 4.0]);
        assert_eq!(grads[0].row(0), &[0.0, 0.0]);
    }

    #[test]
    fn drop_diag_single_row_is_zero() {
        let params: Vec<Mat> = vec![];
        let mut t = Tape::new(&params);
        let x = t.constant(Mat::scalar(3.0));
        let s = t.softmax_rows_drop_diag(x);
        assert_eq!(t.value(s).data, vec![0.0]);
    }
}
