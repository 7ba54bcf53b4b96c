use super::kernels::{col2im3, gemm, gemm_a_bt, gemm_at_b, im2col3, transpose};
use super::{macs, matmul_dims, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
struct Ctx<'a> {
    inputs: Vec<&'a Tensor>,
    output: &'a Tensor,
    grad: &'a [f64],
    needs: Vec<bool>,
}

type Backward = Box<dyn Fn(&Ctx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
    leaf_grad: Option<Vec<f64>>,
}

/// Records operations in execution order; nodes are appended only after all
/// of their inputs, so the node list is already topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf; it collects gradients iff the tensor requires them.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            leaf_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut c = t.clone();
        c.requires_grad = true;
        self.leaf(c)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf (after one or more `backward` calls).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].leaf_grad.as_deref()
    }

    /// The leaf's value with its accumulated gradient attached.
    pub fn leaf_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.clone();
        t.requires_grad = node.requires_grad;
        t.grad = node.leaf_grad.clone();
        t
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.leaf_grad = None;
        }
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], backward: Backward) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            leaf_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(loss)/d(·) to every grad-requiring leaf. Leaf gradients
    /// accumulate across calls; use [`Tape::zero_grads`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.backward {
                None => {
                    if node.inputs.is_empty() && node.requires_grad {
                        let node = &mut self.nodes[id];
                        match &mut node.leaf_grad {
                            Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => node.leaf_grad = Some(g),
                        }
                    }
                }
                Some(rule) => {
                    let ctx = Ctx {
                        inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                        output: &node.value,
                        grad: &g,
                        needs: node
                            .inputs
                            .iter()
                            .map(|&i| self.nodes[i].requires_grad)
                            .collect(),
                    };
                    let input_grads = rule(&ctx);
                    let inputs = node.inputs.clone();
                    for (&i, ig) in inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !self.nodes[i].requires_grad {
                            continue;
                        }
                        match &mut grads[i] {
                            Some(buf) => buf.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        macs::add((m * k * n) as u64);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(move |c| {
                let (av, bv) = (c.inputs[0].data(), c.inputs[1].data());
                let da = c.needs[0].then(|| {
                    let mut da = vec![0.0; m * k];
                    gemm_a_bt(c.grad, bv, &mut da, m, n, k);
                    da
                });
                let db = c.needs[1].then(|| {
                    let mut db = vec![0.0; k * n];
                    gemm_at_b(av, c.grad, &mut db, k, m, n);
                    db
                });
                vec![da, db]
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return dim_err(format!("transpose needs a 2-d tensor, got {shape:?}"));
        }
        let (r, c) = (shape[0], shape[1]);
        let value = Tensor::new(&[c, r], transpose(self.value(a).data(), r, c))?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |ctx| vec![Some(transpose(ctx.grad, c, r))]),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.value(a).data().to_vec())?;
        Ok(self.push(value, &[a], Box::new(|c| vec![Some(c.grad.to_vec())])))
    }

    /// Same-padding convolution of `x: [c_in×h×w]` with `w: [c_out×c_in×k×k]`,
    /// `k ∈ {1, 3}`, plus an optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return dim_err(format!("conv2d expects [c,h,w] and [o,c,k,k], got {xs:?}, {ws:?}"));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[2] != ws[3] || (k != 1 && k != 3) {
            return Err(Error::UnsupportedOp(format!(
                "conv2d supports 1×1 and 3×3 kernels, got {}×{}",
                ws[2], ws[3]
            )));
        }
        if ws[1] != cin {
            return dim_err(format!("conv2d: input has {cin} channels, kernel expects {}", ws[1]));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return dim_err(format!("conv2d bias shape {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        let hw = h * wd;
        let kk = cin * k * k;
        let mut out = vec![0.0; cout * hw];
        if let Some(b) = bias {
            for (o, &bv) in self.value(b).data().iter().enumerate() {
                out[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if k == 1 {
                gemm(wv, xv, &mut out, cout, kk, hw);
            } else {
                let cols = im2col3(xv, cin, h, wd);
                gemm(wv, &cols, &mut out, cout, kk, hw);
            }
        }
        let value = Tensor::new(&[cout, h, wd], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(
            value,
            &inputs,
            Box::new(move |c| {
                let xv = c.inputs[0].data();
                let wv = c.inputs[1].data();
                let cols_owned;
                let cols: &[f64] = if k == 1 {
                    xv
                } else if c.needs[1] {
                    cols_owned = im2col3(xv, cin, h, wd);
                    &cols_owned
                } else {
                    &[]
                };
                let dx = c.needs[0].then(|| {
                    let mut dcols = vec![0.0; kk * hw];
                    gemm_at_b(wv, c.grad, &mut dcols, kk, cout, hw);
                    if k == 1 {
                        dcols
                    } else {
                        col2im3(&dcols, cin, h, wd)
                    }
                });
                let dw = c.needs[1].then(|| {
                    let mut dw = vec![0.0; cout * kk];
                    gemm_a_bt(c.grad, cols, &mut dw, cout, hw, kk);
                    dw
                });
                let mut grads = vec![dx, dw];
                if c.inputs.len() == 3 {
                    grads.push(c.needs[2].then(|| {
                        (0..cout)
                            .map(|o| c.grad[o * hw..(o + 1) * hw].iter().sum())
                            .collect()
                    }));
                }
                grads
            }),
        ))
    }

    // ------------------------------------------------------------------
    // pointwise

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{op}: shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.iter().map(|g| -g).collect())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|c| {
                let (av, bv) = (c.inputs[0].data(), c.inputs[1].data());
                let da = c.needs[0].then(|| c.grad.iter().zip(bv).map(|(g, y)| g * y).collect());
                let db = c.needs[1].then(|| c.grad.iter().zip(av).map(|(g, x)| g * x).collect());
                vec![da, db]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = Tensor::from_fn(self.shape(a), |i| self.value(a).data()[i] * k);
        self.push(
            value,
            &[a],
            Box::new(move |c| vec![Some(c.grad.iter().map(|g| g * k).collect())]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = Tensor::from_fn(self.shape(a), |i| self.value(a).data()[i] + k);
        self.push(value, &[a], Box::new(|c| vec![Some(c.grad.to_vec())]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = Tensor::from_fn(self.shape(a), |i| self.value(a).data()[i].max(0.0));
        self.push(
            value,
            &[a],
            Box::new(|c| {
                let x = c.inputs[0].data();
                vec![Some(
                    c.grad
                        .iter()
                        .zip(x)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = Tensor::from_fn(self.shape(a), |i| sigmoid(self.value(a).data()[i]));
        self.push(
            value,
            &[a],
            Box::new(|c| {
                let y = c.output.data();
                vec![Some(
                    c.grad
                        .iter()
                        .zip(y)
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect(),
                )]
            }),
        )
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("softmax axis {axis} out of range for {shape:?}"));
        }
        let x = self.value(a).data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input contains non-finite values".into()));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(x[base + j * inner]);
                }
                let mut z = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - mx).exp();
                    y[base + j * inner] = e;
                    z += e;
                }
                for j in 0..len {
                    y[base + j * inner] /= z;
                }
            }
        }
        let value = Tensor::new(&shape, y)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |c| {
                let y = c.output.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            dot += c.grad[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (c.grad[p] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    // ------------------------------------------------------------------
    // reductions and channel plumbing

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let n = self.value(a).len();
        self.push(value, &[a], Box::new(move |c| vec![Some(vec![c.grad[0]; n])]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let value = Tensor::scalar(self.value(a).sum() / n as f64);
        self.push(
            value,
            &[a],
            Box::new(move |c| vec![Some(vec![c.grad[0] / n as f64; n])]),
        )
    }

    /// `Σ coeffs[i] · terms[i]` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[Var], coeffs: &[f64]) -> Result<Var> {
        if terms.len() != coeffs.len() || terms.is_empty() {
            return dim_err("weighted_sum needs one coefficient per term");
        }
        for &t in terms {
            if self.value(t).len() != 1 {
                return dim_err("weighted_sum terms must be scalars");
            }
        }
        let total = terms
            .iter()
            .zip(coeffs)
            .map(|(&t, k)| self.value(t).data()[0] * k)
            .sum();
        let coeffs = coeffs.to_vec();
        Ok(self.push(
            Tensor::scalar(total),
            terms,
            Box::new(move |c| coeffs.iter().map(|k| Some(vec![c.grad[0] * k])).collect()),
        ))
    }

    /// Slice `[start, start+len)` of the leading axis.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return dim_err(format!("slice [{start}, {}) of {shape:?}", start + len));
        }
        let plane: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * plane..(start + len) * plane].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let total = shape[0] * plane;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            &[a],
            Box::new(move |c| {
                let mut dx = vec![0.0; total];
                dx[start * plane..(start + len) * plane].copy_from_slice(c.grad);
                vec![Some(dx)]
            }),
        ))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return dim_err("concat of zero tensors");
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return dim_err(format!("concat: trailing shape {:?} vs {:?}", &s[1..], tail));
            }
            lead += s[0];
            sizes.push(self.value(p).len());
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(&tail);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            parts,
            Box::new(move |c| {
                let mut off = 0;
                sizes
                    .iter()
                    .map(|&n| {
                        let g = c.grad[off..off + n].to_vec();
                        off += n;
                        Some(g)
                    })
                    .collect()
            }),
        ))
    }

    /// `y[c, ·] = lambda[c] · x[c, ·]`
    pub fn channel_scale(&mut self, x: Var, lambda: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if self.shape(lambda) != [shape[0]] {
            return dim_err(format!(
                "channel_scale: {:?} weights for {:?}",
                self.shape(lambda),
                shape
            ));
        }
        let plane: usize = shape[1..].iter().product();
        let xv = self.value(x).data();
        let lv = self.value(lambda).data();
        let value = Tensor::from_fn(&shape, |i| xv[i] * lv[i / plane]);
        Ok(self.push(
            value,
            &[x, lambda],
            Box::new(move |c| {
                let (xv, lv) = (c.inputs[0].data(), c.inputs[1].data());
                let dx = c.needs[0].then(|| {
                    c.grad
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * lv[i / plane])
                        .collect()
                });
                let dl = c.needs[1].then(|| {
                    (0..lv.len())
                        .map(|ch| {
                            (ch * plane..(ch + 1) * plane)
                                .map(|i| c.grad[i] * xv[i])
                                .sum()
                        })
                        .collect()
                });
                vec![dx, dl]
            }),
        ))
    }

    /// `[c×h×w] → [c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return dim_err(format!("global_avg_pool expects [c,h,w], got {shape:?}"));
        }
        let plane = shape[1] * shape[2];
        let xv = self.value(x).data();
        let value = Tensor::from_fn(&[shape[0]], |ch| {
            xv[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64
        });
        Ok(self.push(
            value,
            &[x],
            Box::new(move |c| {
                vec![Some(
                    (0..c.grad.len() * plane)
                        .map(|i| c.grad[i / plane] / plane as f64)
                        .collect(),
                )]
            }),
        ))
    }

    /// 2×2 average pooling with stride 2; spatial sizes must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
            return dim_err(format!("avg_pool2 expects [c,2h,2w], got {shape:?}"));
        }
        let (ch, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; ch * oh * ow];
        for c in 0..ch {
            for y in 0..oh {
                for xx in 0..ow {
                    let b = c * h * w + 2 * y * w + 2 * xx;
                    out[(c * oh + y) * ow + xx] =
                        0.25 * (xv[b] + xv[b + 1] + xv[b + w] + xv[b + w + 1]);
                }
            }
        }
        let value = Tensor::new(&[ch, oh, ow], out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |c| {
                let mut dx = vec![0.0; ch * h * w];
                for cc in 0..ch {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let g = 0.25 * c.grad[(cc * oh + y) * ow + xx];
                            let b = cc * h * w + 2 * y * w + 2 * xx;
                            dx[b] += g;
                            dx[b + 1] += g;
                            dx[b + w] += g;
                            dx[b + w + 1] += g;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return dim_err(format!("upsample2 expects [c,h,w], got {shape:?}"));
        }
        let (ch, h, w) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let value = Tensor::from_fn(&[ch, oh, ow], |i| {
            let c = i / (oh * ow);
            let r = i % (oh * ow);
            xv[c * h * w + (r / ow / 2) * w + (r % ow) / 2]
        });
        Ok(self.push(
            value,
            &[x],
            Box::new(move |c| {
                let mut dx = vec![0.0; ch * h * w];
                for (i, g) in c.grad.iter().enumerate() {
                    let cc = i / (oh * ow);
                    let r = i % (oh * ow);
                    dx[cc * h * w + (r / ow / 2) * w + (r % ow) / 2] += g;
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Bilinear resampling of `x: [c×h×w]` at `points` (row, col) in pixel
    /// index coordinates, clamped to the map. Output is `[c×out_h×out_w]`.
    pub fn bilinear_sample(
        &mut self,
        x: Var,
        points: &[(f64, f64)],
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return dim_err(format!("bilinear_sample expects [c,h,w], got {shape:?}"));
        }
        if points.is_empty() || points.len() != out_h * out_w {
            return dim_err(format!(
                "bilinear_sample: {} points for a {out_h}×{out_w} grid",
                points.len()
            ));
        }
        let (ch, h, w) = (shape[0], shape[1], shape[2]);
        let taps: Vec<[(usize, f64); 4]> = points.iter().map(|&(r, c)| bilinear_taps(r, c, h, w)).collect();
        let xv = self.value(x).data();
        let np = taps.len();
        let mut out = vec![0.0; ch * np];
        for c in 0..ch {
            let plane = &xv[c * h * w..(c + 1) * h * w];
            for (p, t) in taps.iter().enumerate() {
                out[c * np + p] = t.iter().map(|&(i, wt)| plane[i] * wt).sum();
            }
        }
        let value = Tensor::new(&[ch, out_h, out_w], out)?;
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let mut dx = vec![0.0; ch * h * w];
                for c in 0..ch {
                    let plane = &mut dx[c * h * w..(c + 1) * h * w];
                    for (p, t) in taps.iter().enumerate() {
                        let g = ctx.grad[c * np + p];
                        for &(i, wt) in t {
                            plane[i] += g * wt;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    // ------------------------------------------------------------------
    // loss primitives

    /// `Σ wᵢ·BCE(pᵢ, tᵢ) / Σ wᵢ` with `p` clamped to `[eps, 1-eps]`.
    pub fn weighted_bce(&mut self, pred: Var, target: &[f64], weights: &[f64], eps: f64) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || weights.len() != n {
            return dim_err("weighted_bce: target/weights length differs from prediction");
        }
        let wsum: f64 = weights.iter().sum();
        let pv = self.value(pred).data();
        let mut total = 0.0;
        if wsum > 0.0 {
            for i in 0..n {
                if weights[i] != 0.0 {
                    total += weights[i] * bce(pv[i], target[i], eps);
                }
            }
            total /= wsum;
        }
        let target = target.to_vec();
        let weights = weights.to_vec();
        Ok(self.push(
            Tensor::scalar(total),
            &[pred],
            Box::new(move |c| {
                let pv = c.inputs[0].data();
                let mut dp = vec![0.0; pv.len()];
                if wsum > 0.0 {
                    for i in 0..pv.len() {
                        let p = pv[i];
                        if weights[i] == 0.0 || p <= eps || p >= 1.0 - eps {
                            continue;
                        }
                        dp[i] = c.grad[0] * weights[i] / wsum * (p - target[i]) / (p * (1.0 - p));
                    }
                }
                vec![Some(dp)]
            }),
        ))
    }

    /// `Σ wᵢ·smoothL1((pᵢ - tᵢ)/dᵢ) / norm`, where `d` defaults to 1.
    pub fn weighted_smooth_l1(
        &mut self,
        pred: Var,
        target: &[f64],
        weights: &[f64],
        divisor: Option<&[f64]>,
        norm: f64,
    ) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || weights.len() != n || divisor.is_some_and(|d| d.len() != n) {
            return dim_err("weighted_smooth_l1: operand lengths differ");
        }
        let div: Vec<f64> = divisor.map_or_else(|| vec![1.0; n], |d| d.to_vec());
        let pv = self.value(pred).data();
        let mut total = 0.0;
        for i in 0..n {
            if weights[i] != 0.0 {
                total += weights[i] * smooth_l1((pv[i] - target[i]) / div[i]);
            }
        }
        total /= norm;
        let target = target.to_vec();
        let weights = weights.to_vec();
        Ok(self.push(
            Tensor::scalar(total),
            &[pred],
            Box::new(move |c| {
                let pv = c.inputs[0].data();
                let dp = (0..pv.len())
                    .map(|i| {
                        if weights[i] == 0.0 {
                            return 0.0;
                        }
                        let r = (pv[i] - target[i]) / div[i];
                        let d = if r.abs() < 1.0 { r } else { r.signum() };
                        c.grad[0] * weights[i] * d / div[i] / norm
                    })
                    .collect();
                vec![Some(dp)]
            }),
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce(p: f64, t: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

pub(crate) fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Four (flat index, weight) taps of a clamped bilinear sample.
pub(crate) fn bilinear_taps(r: f64, c: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let r = r.clamp(0.0, (h - 1) as f64);
    let c = c.clamp(0.0, (w - 1) as f64);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    [
        (r0 * w + c0, (1.0 - fr) * (1.0 - fc)),
        (r0 * w + c1, (1.0 - fr) * fc),
        (r1 * w + c0, fr * (1.0 - fc)),
        (r1 * w + c1, fr * fc),
    ]
}
