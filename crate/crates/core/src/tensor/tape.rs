use std::borrow::Cow;

use rand::Rng;

use super::{gemm, Float, MatView, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: F,
    },
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: F,
        pad_id: usize,
        probs: Vec<F>,
        count: usize,
    },
}

struct Node<'a, F: Float> {
    shape: Vec<usize>,
    value: Cow<'a, [F]>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

/// Define-by-run record of a forward computation.
///
/// Leaves may borrow their storage (model parameters), so a tape lives no
/// longer than the weights it reads. Operations are appended in execution
/// order, which is a topological order by construction.
pub struct Tape<'a, F: Float> {
    nodes: Vec<Node<'a, F>>,
    grad_enabled: bool,
}

impl<'a, F: Float> Default for Tape<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Float> Tape<'a, F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; used for inference.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [F]>,
        op: Op<F>,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a borrowed tensor; tracks gradients if the tensor asks for them.
    pub fn leaf(&mut self, t: &'a Tensor<F>) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records an owned tensor.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, rg)
    }

    /// Records an owned, non-differentiable tensor.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("tape node shape")
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<F>> {
        self.nodes[v.0].grad.take()
    }

    // ---- operations ------------------------------------------------------

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D product of optionally transposed operands: `op(a)·op(b)`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            MatView::new(self.value(a), sa[0], sa[1], false).maybe_t(ta),
            MatView::new(self.value(b), sb[0], sb[1], false).maybe_t(tb),
            F::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Batched product over the leading axis of two rank-3 tensors.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let g = sa[0];
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
        let mut out = vec![F::zero(); g * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for (i, chunk) in out.chunks_mut(m * n).enumerate() {
                gemm(
                    MatView::new(&av[i * asz..(i + 1) * asz], sa[1], sa[2], false).maybe_t(ta),
                    MatView::new(&bv[i * bsz..(i + 1) * bsz], sb[1], sb[2], false).maybe_t(tb),
                    F::zero(),
                    chunk,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            vec![g, m, n],
            Cow::Owned(out),
            Op::BatchMatMul { a, b, ta, tb },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Mul(a, b), rg))
    }

    /// Adds a vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let n = sb[0];
        let bv = self.value(bias);
        let out: Vec<F> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % n])
            .collect();
        let rg = self.rg(&[x, bias]);
        let shape = sx.to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let out: Vec<F> = self.value(x).iter().map(|&v| v * factor).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<F> = self.value(x).iter().map(|&v| v.max(F::zero())).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Relu(x), rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax along the last axis where `keep[i] == false` forces a zero
    /// probability. A slice with nothing kept yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::shape("masked_softmax", self.shape(x), &[keep.len()]));
        }
        let axis = self.shape(x).len() - 1;
        self.softmax_impl(x, axis, Some(keep))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let mut out = vec![F::zero(); self.value(x).len()];
        softmax_forward(self.value(x), &shape, axis, keep, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { x, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gain)));
        }
        let rows = self.value(x).len() / n;
        let nf = F::of(n as f64);
        let mut xhat = vec![F::zero(); rows * n];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * n];
        {
            let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
            for r in 0..rows {
                let row = &xv[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<F>() / nf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
                let rs = F::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..n {
                    let h = (row[j] - mean) * rs;
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * g[j] + b[j];
                }
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            sx,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a `[V×d]` table; result is `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape("embedding", &st, &[ids.len()]));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), Cow::Owned(out), Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len()
            || perm
                .iter()
                .any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", &sx, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let mut out = vec![F::zero(); self.value(x).len()];
        permute_copy(self.value(x), &sx, perm, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            out_shape,
            Cow::Owned(out),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<F> = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Dropout { x, mask }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<F>();
        let rg = self.rg(&[x]);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), rg)
    }

    /// Mean token-level cross-entropy of `logits [N×V]` against `targets`,
    /// skipping positions whose target is `pad_id`. With smoothing `ε` the
    /// reference distribution is `(1-ε)·onehot + ε/V`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        pad_id: usize,
    ) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &sl, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing must be in [0, 1), got {smoothing}"
            )));
        }
        let (rows, v) = (sl[0], sl[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TargetOutOfRange { id: bad, vocab: v });
        }
        let eps = F::of(smoothing);
        let uniform = eps / F::of(v as f64);
        let on = F::one() - eps;
        let mut probs = vec![F::zero(); rows * v];
        softmax_forward(self.value(logits), &sl, 1, None, &mut probs);
        let lv = self.value(logits);
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            count += 1;
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<F>().ln();
            // -Σ q_i log p_i with log p_i = z_i - lse
            let mut nll = on * (lse - row[t]);
            if smoothing > 0.0 {
                let sum_logp: F = row.iter().map(|&z| z - lse).sum();
                nll -= uniform * sum_logp;
            }
            total += nll;
        }
        let loss = if count > 0 {
            total / F::of(count as f64)
        } else {
            F::zero()
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
                pad_id,
                probs,
                count,
            },
            rg,
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Populates gradients of `loss` on every node that requires them.
    ///
    /// A value consumed by several operations receives the sum of the
    /// per-use gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward(format!("{loss:?} is not on this tape")));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward(
                "loss does not depend on any tracked tensor".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if self.nodes[idx].requires_grad {
                self.nodes[idx].grad = g;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let av = MatView::new(self.value(a), sa[0], sa[1], false).maybe_t(ta);
                let bv = MatView::new(self.value(b), sb[0], sb[1], false).maybe_t(tb);
                let gv = MatView::new(g, av.rows, bv.cols, false);
                if self.requires_grad(a) {
                    let buf = acc(grads, a, self.value(a).len());
                    if ta {
                        gemm(bv, gv.t(), F::one(), buf);
                    } else {
                        gemm(gv, bv.t(), F::one(), buf);
                    }
                }
                if self.requires_grad(b) {
                    let buf = acc(grads, b, self.value(b).len());
                    if tb {
                        gemm(gv.t(), av, F::one(), buf);
                    } else {
                        gemm(av.t(), gv, F::one(), buf);
                    }
                }
            }
            &Op::BatchMatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
                let (m, n) = (node.shape[1], node.shape[2]);
                let (avals, bvals) = (self.value(a), self.value(b));
                for i in 0..sa[0] {
                    let av = MatView::new(&avals[i * asz..(i + 1) * asz], sa[1], sa[2], false)
                        .maybe_t(ta);
                    let bv = MatView::new(&bvals[i * bsz..(i + 1) * bsz], sb[1], sb[2], false)
                        .maybe_t(tb);
                    let gv = MatView::new(&g[i * m * n..(i + 1) * m * n], m, n, false);
                    if self.requires_grad(a) {
                        let buf = &mut acc(grads, a, avals.len())[i * asz..(i + 1) * asz];
                        if ta {
                            gemm(bv, gv.t(), F::one(), buf);
                        } else {
                            gemm(gv, bv.t(), F::one(), buf);
                        }
                    }
                    if self.requires_grad(b) {
                        let buf = &mut acc(grads, b, bvals.len())[i * bsz..(i + 1) * bsz];
                        if tb {
                            gemm(gv.t(), av, F::one(), buf);
                        } else {
                            gemm(av.t(), gv, F::one(), buf);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires_grad(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let bv = self.value(b);
                    for ((o, &gi), &y) in acc(grads, a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                }
                if self.requires_grad(b) {
                    let av = self.value(a);
                    for ((o, &gi), &x) in acc(grads, b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                }
            }
            &Op::AddBias { x, bias } => {
                if self.requires_grad(x) {
                    add_into(acc(grads, x, g.len()), g);
                }
                if self.requires_grad(bias) {
                    let n = self.value(bias).len();
                    let buf = acc(grads, bias, n);
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if self.requires_grad(x) {
                    for (o, &gi) in acc(grads, x, g.len()).iter_mut().zip(g) {
                        *o += gi * factor;
                    }
                }
            }
            &Op::Relu(x) => {
                if self.requires_grad(x) {
                    let xv = self.value(x);
                    for ((o, &gi), &v) in acc(grads, x, g.len()).iter_mut().zip(g).zip(xv) {
                        if v > F::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                if self.requires_grad(x) {
                    let y = &node.value;
                    let (outer, len, inner) = split_axis(&node.shape, axis);
                    let buf = acc(grads, x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: F = (0..len)
                                .map(|j| g[base + j * inner] * y[base + j * inner])
                                .sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                buf[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let nf = F::of(n as f64);
                if self.requires_grad(*gain) {
                    let buf = acc(grads, *gain, n);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            buf[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let buf = acc(grads, *bias, n);
                    for grow in g.chunks(n) {
                        add_into(buf, grow);
                    }
                }
                if self.requires_grad(*x) {
                    let gv = self.value(*gain);
                    let buf = acc(grads, *x, g.len());
                    let mut dh = vec![F::zero(); n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for j in 0..n {
                            dh[j] = grow[j] * gv[j];
                        }
                        let sum_dh: F = dh.iter().copied().sum();
                        let sum_dh_h: F = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum();
                        let out = &mut buf[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += rstd[r] / nf * (nf * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.requires_grad(*table) {
                    let d = self.shape(*table)[1];
                    let buf = acc(grads, *table, self.value(*table).len());
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut buf[id * d..(id + 1) * d], row);
                    }
                }
            }
            &Op::Reshape(x) => {
                if self.requires_grad(x) {
                    add_into(acc(grads, x, g.len()), g);
                }
            }
            Op::Permute { x, perm } => {
                if self.requires_grad(*x) {
                    let sx = self.shape(*x).to_vec();
                    let buf = acc(grads, *x, g.len());
                    permute_copy_back(g, &sx, perm, buf);
                }
            }
            Op::Dropout { x, mask } => {
                if self.requires_grad(*x) {
                    for ((o, &gi), &m) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            &Op::Sum(x) => {
                if self.requires_grad(x) {
                    let g0 = g[0];
                    acc(grads, x, self.value(x).len())
                        .iter_mut()
                        .for_each(|o| *o += g0);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                pad_id,
                probs,
                count,
            } => {
                if self.requires_grad(*logits) && *count > 0 {
                    let v = self.shape(*logits)[1];
                    let scale = g[0] / F::of(*count as f64);
                    let uniform = *smoothing / F::of(v as f64);
                    let on = F::one() - *smoothing;
                    let buf = acc(grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        for j in 0..v {
                            let q = if j == t { on + uniform } else { uniform };
                            buf[r * v + j] += scale * (probs[r * v + j] - q);
                        }
                    }
                }
            }
        }
    }
}

impl<'s, F: Float> MatView<'s, F> {
    fn maybe_t(self, t: bool) -> Self {
        if t {
            self.t()
        } else {
            self
        }
    }
}

fn acc<F: Float>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<F: Float>(
    x: &[F],
    shape: &[usize],
    axis: usize,
    keep: Option<&[bool]>,
    out: &mut [F],
) {
    let (outer, len, inner) = split_axis(shape, axis);
    let kept = |p: usize| keep.is_none_or(|k| k[p]);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len)
                .map(|j| base + j * inner)
                .filter(|&p| kept(p))
                .map(|p| x[p])
                .fold(F::neg_infinity(), F::max);
            if max == F::neg_infinity() {
                (0..len).for_each(|j| out[base + j * inner] = F::zero());
                continue;
            }
            let mut z = F::zero();
            for j in 0..len {
                let p = base + j * inner;
                let e = if kept(p) {
                    (x[p] - max).exp()
                } else {
                    F::zero()
                };
                out[p] = e;
                z += e;
            }
            for j in 0..len {
                out[base + j * inner] /= z;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Walks the output of a permutation in order, yielding the matching input
/// offset for each output offset.
fn for_each_permuted(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_stride: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..total {
        f(dst, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_stride[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_stride[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn permute_copy<F: Float>(x: &[F], in_shape: &[usize], perm: &[usize], out: &mut [F]) {
    for_each_permuted(in_shape, perm, |dst, src| out[dst] = x[src]);
}

fn permute_copy_back<F: Float>(g: &[F], in_shape: &[usize], perm: &[usize], buf: &mut [F]) {
    for_each_permuted(in_shape, perm, |dst, src| buf[src] += g[dst]);
}
