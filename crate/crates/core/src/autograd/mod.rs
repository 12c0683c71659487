//! A small reverse-mode automatic differentiation tape.
//!
//! A [`Graph`] records the forward computation of one sample against a
//! borrowed [`ParamSet`]. [`Graph::backward`] replays it in reverse and
//! returns gradients for the parameters whose [`Group`] is selected, so a
//! single forward pass of the translation network can feed both the
//! generator and the discriminator updates. Nodes that cannot reach a
//! selected group are never visited.

mod kernels;

pub use kernels::{col2im, im2col, ConvGeom};

use crate::tensor::{gemm, Scalar, Tensor};

/// Bit set of parameter groups.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize,
)]
pub struct Group(pub u8);

impl Group {
    pub const NONE: Group = Group(0);
    pub const GENERATOR: Group = Group(1);
    pub const DISCRIMINATOR: Group = Group(2);

    pub fn intersects(self, other: Group) -> bool {
        self.0 & other.0 != 0
    }

    pub fn union(self, other: Group) -> Group {
        Group(self.0 | other.0)
    }
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

/// Named, grouped trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        self.entries.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.entries[id.0].group.intersects(group))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Per-parameter gradients, `None` where a parameter received no signal.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(num_params: usize) -> Self {
        Gradients {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(factor);
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
        cols: Vec<T>,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        // geometry of the adjoint convolution mapping the output back onto the input
        geom: ConvGeom,
        c_in: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, T),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Var, Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    MseConst {
        x: Var,
        target: T,
    },
    L1(Var, Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
    PixelCrossEntropy {
        logits: Var,
        targets: Vec<i32>,
        probs: Vec<T>,
        valid: usize,
    },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    group: Group,
}

/// Forward tape for a single sample.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<'p, T>>,
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn group(&self, v: Var) -> Group {
        self.nodes[v.0].group
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, group: Group) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            group,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients never flow into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, Group::NONE)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let p = self.params.entry(id);
        self.nodes.push(Node {
            value: Value::Borrowed(&p.value),
            op: Op::Param(id),
            group: p.group,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution; `w` is `[c_out, c_in, k, k]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c_in, h, wd) = self.value(x).dims3().expect("conv2d input");
        let ws = self.value(w).shape().to_vec();
        assert!(
            ws.len() == 4 && ws[1] == c_in && ws[2] == ws[3],
            "conv2d weight {ws:?} vs input channels {c_in}"
        );
        let (c_out, k) = (ws[0], ws[2]);
        let geom =
            ConvGeom::conv(c_in, h, wd, k, stride, pad).expect("conv2d kernel larger than input");
        let mut cols = vec![T::zero(); geom.col_rows() * geom.col_cols()];
        im2col(self.value(x).data(), &geom, &mut cols);
        let n = geom.col_cols();
        let mut out = vec![T::zero(); c_out * n];
        gemm(
            false,
            false,
            c_out,
            n,
            geom.col_rows(),
            T::one(),
            self.value(w).data(),
            &cols,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, row) in out.chunks_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        let group = self
            .group(x)
            .union(self.group(w))
            .union(b.map_or(Group::NONE, |b| self.group(b)));
        let value = Tensor::from_vec(&[c_out, geom.h_out, geom.w_out], out).unwrap();
        self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                c_out,
                cols,
            },
            group,
        )
    }

    /// Transposed 2-D convolution; `w` is `[c_in, c_out, k, k]`. Output size
    /// is `(h - 1)·stride - 2·pad + k` per axis.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (c_in, h, wd) = self.value(x).dims3().expect("conv_transpose2d input");
        let ws = self.value(w).shape().to_vec();
        assert!(
            ws.len() == 4 && ws[0] == c_in && ws[2] == ws[3],
            "conv_transpose2d weight {ws:?}"
        );
        let (c_out, k) = (ws[1], ws[2]);
        let h_out = (h - 1) * stride + k - 2 * pad;
        let w_out = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom {
            c_in: c_out,
            h: h_out,
            w: w_out,
            k,
            stride,
            pad,
            h_out: h,
            w_out: wd,
        };
        let n = h * wd;
        let mut cols = vec![T::zero(); geom.col_rows() * n];
        gemm(
            true,
            false,
            geom.col_rows(),
            n,
            c_in,
            T::one(),
            self.value(w).data(),
            self.value(x).data(),
            T::zero(),
            &mut cols,
        );
        let mut out = vec![T::zero(); c_out * h_out * w_out];
        col2im(&cols, &geom, &mut out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (o, plane) in out.chunks_mut(h_out * w_out).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[o]);
            }
        }
        let group = self
            .group(x)
            .union(self.group(w))
            .union(b.map_or(Group::NONE, |b| self.group(b)));
        let value = Tensor::from_vec(&[c_out, h_out, w_out], out).unwrap();
        self.push(
            value,
            Op::ConvTranspose {
                x,
                w,
                b,
                geom,
                c_in,
            },
            group,
        )
    }

    /// Per-channel normalisation over spatial positions, `sqrt(var + eps)`
    /// in the denominator.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (c, _, _) = xv.dims3().expect("instance_norm input");
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = out.channel_mut(ch);
            let (mean, var) = mean_var(plane);
            let inv = T::one() / (var + T::lit(eps)).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let group = self.group(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, group)
    }

    /// `gamma[c] * x[c] + beta[c]` per channel.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (c, _, _) = self.value(x).dims3().expect("channel_affine input");
        assert_eq!(self.value(gamma).len(), c, "gamma length");
        assert_eq!(self.value(beta).len(), c, "beta length");
        let mut out = self.value(x).clone();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        for ch in 0..c {
            out.channel_mut(ch)
                .iter_mut()
                .for_each(|v| *v = g[ch] * *v + b[ch]);
        }
        let group = self
            .group(x)
            .union(self.group(gamma))
            .union(self.group(beta));
        self.push(out, Op::ChannelAffine { x, gamma, beta }, group)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let group = self.group(x);
        self.push(out, Op::Relu(x), group)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let group = self.group(x);
        self.push(out, Op::LeakyRelu(x, s), group)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let group = self.group(x);
        self.push(out, Op::Sigmoid(x), group)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let group = self.group(a).union(self.group(b));
        self.push(out, Op::Add(a, b), group)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let out = self.value(x).map(|v| v * f);
        let group = self.group(x);
        self.push(out, Op::Scale(x, f), group)
    }

    /// Sum of equally shaped nodes; panics on an empty list.
    pub fn sum(&mut self, items: &[Var]) -> Var {
        let mut it = items.iter().copied();
        let first = it.next().expect("sum of nothing");
        it.fold(first, |acc, v| self.add(acc, v))
    }

    /// `[C, H, W]` → `[C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3().expect("global_avg_pool input");
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let out = Tensor::from_fn(&[c], |ch| xv.channel(ch).iter().copied().sum::<T>() * inv);
        let group = self.group(x);
        self.push(out, Op::GlobalAvgPool(x), group)
    }

    /// Dense layer on a vector; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let ws = self.value(w).shape().to_vec();
        let n_in = self.value(x).len();
        assert!(
            ws.len() == 2 && ws[1] == n_in,
            "linear weight {ws:?} vs input {n_in}"
        );
        let mut out = self.value(b).data().to_vec();
        gemm(
            false,
            false,
            ws[0],
            1,
            n_in,
            T::one(),
            self.value(w).data(),
            self.value(x).data(),
            T::one(),
            &mut out,
        );
        let group = self.group(x).union(self.group(w)).union(self.group(b));
        self.push(
            Tensor::from_vec(&[ws[0]], out).unwrap(),
            Op::Linear { x, w, b },
            group,
        )
    }

    /// Contiguous sub-vector `x[start..start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out =
            Tensor::from_vec(&[len], self.value(x).data()[start..start + len].to_vec()).unwrap();
        let group = self.group(x);
        self.push(out, Op::Slice { x, start }, group)
    }

    /// Channel concatenation of two `[C_i, H, W]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ca, h, w) = self.value(a).dims3().expect("concat lhs");
        let (cb, hb, wb) = self.value(b).dims3().expect("concat rhs");
        assert_eq!((h, w), (hb, wb), "concat spatial dims");
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let group = self.group(a).union(self.group(b));
        self.push(
            Tensor::from_vec(&[ca + cb, h, w], data).unwrap(),
            Op::Concat(a, b),
            group,
        )
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/cols are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = xv.dims3().expect("max_pool2 input");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        let d = xv.data();
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ch * h * w;
                    let cands = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let best = cands
                        .into_iter()
                        .fold(cands[0], |b, k| if d[k] > d[b] { k } else { b });
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let group = self.group(x);
        self.push(
            Tensor::from_vec(&[c, ho, wo], out).unwrap(),
            Op::MaxPool2 { x, argmax },
            group,
        )
    }

    /// `mean((x - target)^2)` as a scalar node.
    pub fn mse_const(&mut self, x: Var, target: f64) -> Var {
        let t = T::lit(target);
        let xv = self.value(x);
        let n = T::from_usize(xv.len()).unwrap();
        let loss = xv.data().iter().map(|&v| (v - t) * (v - t)).sum::<T>() / n;
        let group = self.group(x);
        self.push(Tensor::scalar(loss), Op::MseConst { x, target: t }, group)
    }

    /// `mean(|a - b|)` as a scalar node.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "l1 shapes");
        let n = T::from_usize(av.len()).unwrap();
        let loss = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<T>()
            / n;
        let group = self.group(a).union(self.group(b));
        self.push(Tensor::scalar(loss), Op::L1(a, b), group)
    }

    /// `-log softmax(logits)[target]`, evaluated in log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let lv = self.value(logits).data();
        assert!(target < lv.len(), "cross_entropy target out of range");
        let (lse, probs) = log_softmax_parts(lv);
        let loss = lse - lv[target];
        let group = self.group(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            group,
        )
    }

    /// Mean per-pixel cross-entropy of `[K, H, W]` logits; `targets` holds
    /// class indices in `0..K` or `-1` for ignored pixels.
    pub fn pixel_cross_entropy(&mut self, logits: Var, targets: Vec<i32>) -> Var {
        let lv = self.value(logits);
        let (k, h, w) = lv.dims3().expect("pixel_cross_entropy logits");
        let plane = h * w;
        assert_eq!(targets.len(), plane, "pixel_cross_entropy targets");
        let d = lv.data();
        let mut probs = vec![T::zero(); k * plane];
        let mut total = T::zero();
        let mut valid = 0usize;
        let mut buf = vec![T::zero(); k];
        for p in 0..plane {
            let t = targets[p];
            if t < 0 {
                continue;
            }
            assert!((t as usize) < k, "pixel target {t} out of range");
            for c in 0..k {
                buf[c] = d[c * plane + p];
            }
            let (lse, pr) = log_softmax_parts(&buf);
            total += lse - buf[t as usize];
            for c in 0..k {
                probs[c * plane + p] = pr[c];
            }
            valid += 1;
        }
        let loss = if valid == 0 {
            T::zero()
        } else {
            total / T::from_usize(valid).unwrap()
        };
        let group = self.group(logits);
        self.push(
            Tensor::scalar(loss),
            Op::PixelCrossEntropy {
                logits,
                targets,
                probs,
                valid,
            },
            group,
        )
    }

    /// Reverse pass from the scalar `loss`, returning gradients for every
    /// parameter in `groups`. Parameters outside `groups` get `None`.
    pub fn backward(&self, loss: Var, groups: Group) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = Gradients::empty(self.params.len());
        let wants = |v: Var| self.nodes[v.0].group.intersects(groups);

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = self.value(Var(idx));
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if self.params.entry(*id).group.intersects(groups) {
                        match &mut out.grads[id.0] {
                            Some(g) => g.add_assign(&dy),
                            slot @ None => *slot = Some(dy),
                        }
                    }
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    geom,
                    c_out,
                    cols,
                } => {
                    let n = geom.col_cols();
                    let kk = geom.col_rows();
                    if wants(*w) {
                        let mut dw = vec![T::zero(); c_out * kk];
                        gemm(
                            false,
                            true,
                            *c_out,
                            kk,
                            n,
                            T::one(),
                            dy.data(),
                            cols,
                            T::zero(),
                            &mut dw,
                        );
                        acc(
                            &mut grads,
                            *w,
                            Tensor::from_vec(self.value(*w).shape(), dw).unwrap(),
                        );
                    }
                    if let Some(b) = b.filter(|b| wants(*b)) {
                        let db = dy
                            .data()
                            .chunks(n)
                            .map(|r| r.iter().copied().sum())
                            .collect();
                        acc(&mut grads, b, Tensor::from_vec(&[*c_out], db).unwrap());
                    }
                    if wants(*x) {
                        let mut dcols = vec![T::zero(); kk * n];
                        gemm(
                            true,
                            false,
                            kk,
                            n,
                            *c_out,
                            T::one(),
                            self.value(*w).data(),
                            dy.data(),
                            T::zero(),
                            &mut dcols,
                        );
                        let mut dx = vec![T::zero(); geom.c_in * geom.h * geom.w];
                        col2im(&dcols, geom, &mut dx);
                        acc(
                            &mut grads,
                            *x,
                            Tensor::from_vec(self.value(*x).shape(), dx).unwrap(),
                        );
                    }
                }
                Op::ConvTranspose {
                    x,
                    w,
                    b,
                    geom,
                    c_in,
                } => {
                    let n = geom.col_cols();
                    let kk = geom.col_rows();
                    let need_cols = wants(*w) || wants(*x);
                    let dcols = if need_cols {
                        let mut c = vec![T::zero(); kk * n];
                        im2col(dy.data(), geom, &mut c);
                        c
                    } else {
                        Vec::new()
                    };
                    if wants(*w) {
                        let mut dw = vec![T::zero(); c_in * kk];
                        gemm(
                            false,
                            true,
                            *c_in,
                            kk,
                            n,
                            T::one(),
                            self.value(*x).data(),
                            &dcols,
                            T::zero(),
                            &mut dw,
                        );
                        acc(
                            &mut grads,
                            *w,
                            Tensor::from_vec(self.value(*w).shape(), dw).unwrap(),
                        );
                    }
                    if let Some(b) = b.filter(|b| wants(*b)) {
                        let plane = geom.h * geom.w;
                        let db = dy
                            .data()
                            .chunks(plane)
                            .map(|r| r.iter().copied().sum())
                            .collect();
                        acc(&mut grads, b, Tensor::from_vec(&[geom.c_in], db).unwrap());
                    }
                    if wants(*x) {
                        let mut dx = vec![T::zero(); c_in * n];
                        gemm(
                            false,
                            false,
                            *c_in,
                            n,
                            kk,
                            T::one(),
                            self.value(*w).data(),
                            &dcols,
                            T::zero(),
                            &mut dx,
                        );
                        acc(
                            &mut grads,
                            *x,
                            Tensor::from_vec(self.value(*x).shape(), dx).unwrap(),
                        );
                    }
                }
                Op::InstanceNorm { x, inv_std } => {
                    if wants(*x) {
                        let (c, _, _) = y.dims3().unwrap();
                        let mut dx = dy.clone();
                        for ch in 0..c {
                            let yc = y.channel(ch);
                            let g = dx.channel_mut(ch);
                            let n = T::from_usize(g.len()).unwrap();
                            let mean_g = g.iter().copied().sum::<T>() / n;
                            let mean_gy = g.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>() / n;
                            let inv = inv_std[ch];
                            for (gv, &yv) in g.iter_mut().zip(yc) {
                                *gv = inv * (*gv - mean_g - yv * mean_gy);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::ChannelAffine { x, gamma, beta } => {
                    let xv = self.value(*x);
                    let (c, _, _) = xv.dims3().unwrap();
                    if wants(*gamma) {
                        let dg = (0..c)
                            .map(|ch| {
                                dy.channel(ch)
                                    .iter()
                                    .zip(xv.channel(ch))
                                    .map(|(&a, &b)| a * b)
                                    .sum()
                            })
                            .collect();
                        acc(&mut grads, *gamma, Tensor::from_vec(&[c], dg).unwrap());
                    }
                    if wants(*beta) {
                        let db = (0..c)
                            .map(|ch| dy.channel(ch).iter().copied().sum())
                            .collect();
                        acc(&mut grads, *beta, Tensor::from_vec(&[c], db).unwrap());
                    }
                    if wants(*x) {
                        let g = self.value(*gamma).data();
                        let mut dx = dy;
                        for ch in 0..c {
                            let s = g[ch];
                            dx.channel_mut(ch).iter_mut().for_each(|v| *v *= s);
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Relu(x) => {
                    if wants(*x) {
                        let mut dx = dy;
                        for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                            if v <= T::zero() {
                                *g = T::zero();
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::LeakyRelu(x, slope) => {
                    if wants(*x) {
                        let mut dx = dy;
                        for (g, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                            if v <= T::zero() {
                                *g *= *slope;
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Sigmoid(x) => {
                    if wants(*x) {
                        let mut dx = dy;
                        for (g, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                            *g *= s * (T::one() - s);
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) && wants(*b) {
                        acc(&mut grads, *a, dy.clone());
                        acc(&mut grads, *b, dy);
                    } else if wants(*a) {
                        acc(&mut grads, *a, dy);
                    } else if wants(*b) {
                        acc(&mut grads, *b, dy);
                    }
                }
                Op::Scale(x, f) => {
                    if wants(*x) {
                        let mut dx = dy;
                        dx.scale(*f);
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    if wants(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        let plane = shape[1] * shape[2];
                        let inv = T::one() / T::from_usize(plane).unwrap();
                        let d = dy.data();
                        let dx = Tensor::from_fn(&shape, |i| d[i / plane] * inv);
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w);
                    let (n_out, n_in) = (wv.shape()[0], wv.shape()[1]);
                    if wants(*w) {
                        let mut dw = vec![T::zero(); n_out * n_in];
                        gemm(
                            false,
                            false,
                            n_out,
                            n_in,
                            1,
                            T::one(),
                            dy.data(),
                            self.value(*x).data(),
                            T::zero(),
                            &mut dw,
                        );
                        acc(
                            &mut grads,
                            *w,
                            Tensor::from_vec(&[n_out, n_in], dw).unwrap(),
                        );
                    }
                    if wants(*b) {
                        acc(&mut grads, *b, dy.clone());
                    }
                    if wants(*x) {
                        let mut dx = vec![T::zero(); n_in];
                        gemm(
                            true,
                            false,
                            n_in,
                            1,
                            n_out,
                            T::one(),
                            wv.data(),
                            dy.data(),
                            T::zero(),
                            &mut dx,
                        );
                        acc(
                            &mut grads,
                            *x,
                            Tensor::from_vec(self.value(*x).shape(), dx).unwrap(),
                        );
                    }
                }
                Op::Slice { x, start } => {
                    if wants(*x) {
                        let mut dx = Tensor::zeros(self.value(*x).shape());
                        dx.data_mut()[*start..*start + dy.len()].copy_from_slice(dy.data());
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    if wants(*a) {
                        let t = Tensor::from_vec(self.value(*a).shape(), dy.data()[..na].to_vec())
                            .unwrap();
                        acc(&mut grads, *a, t);
                    }
                    if wants(*b) {
                        let t = Tensor::from_vec(self.value(*b).shape(), dy.data()[na..].to_vec())
                            .unwrap();
                        acc(&mut grads, *b, t);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if wants(*x) {
                        let mut dx = Tensor::zeros(self.value(*x).shape());
                        let d = dx.data_mut();
                        for (&i, &g) in argmax.iter().zip(dy.data()) {
                            d[i] += g;
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::MseConst { x, target } => {
                    if wants(*x) {
                        let xv = self.value(*x);
                        let f = T::lit(2.0) * dy.item() / T::from_usize(xv.len()).unwrap();
                        acc(&mut grads, *x, xv.map(|v| f * (v - *target)));
                    }
                }
                Op::L1(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let f = dy.item() / T::from_usize(av.len()).unwrap();
                    let sign = |d: T| {
                        if d > T::zero() {
                            f
                        } else if d < T::zero() {
                            -f
                        } else {
                            T::zero()
                        }
                    };
                    let da: Vec<T> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&p, &q)| sign(p - q))
                        .collect();
                    if wants(*b) {
                        let db = da.iter().map(|&v| -v).collect();
                        acc(&mut grads, *b, Tensor::from_vec(bv.shape(), db).unwrap());
                    }
                    if wants(*a) {
                        acc(&mut grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
                    }
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    if wants(*logits) {
                        let g = dy.item();
                        let mut d: Vec<T> = probs.iter().map(|&p| p * g).collect();
                        d[*target] -= g;
                        acc(
                            &mut grads,
                            *logits,
                            Tensor::from_vec(&[d.len()], d).unwrap(),
                        );
                    }
                }
                Op::PixelCrossEntropy {
                    logits,
                    targets,
                    probs,
                    valid,
                } => {
                    if wants(*logits) && *valid > 0 {
                        let shape = self.value(*logits).shape().to_vec();
                        let plane = shape[1] * shape[2];
                        let f = dy.item() / T::from_usize(*valid).unwrap();
                        let mut d: Vec<T> = probs.iter().map(|&p| p * f).collect();
                        for (p, &t) in targets.iter().enumerate() {
                            if t >= 0 {
                                d[t as usize * plane + p] -= f;
                            }
                        }
                        acc(&mut grads, *logits, Tensor::from_vec(&shape, d).unwrap());
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Population mean and variance of a slice.
pub(crate) fn mean_var<T: Scalar>(xs: &[T]) -> (T, T) {
    let n = T::from_usize(xs.len().max(1)).unwrap();
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var)
}

/// Log-sum-exp and softmax probabilities of `logits`, shifted by the max so
/// extreme values cannot overflow.
pub(crate) fn log_softmax_parts<T: Scalar>(logits: &[T]) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    let lse = max + total.ln();
    (lse, exps.into_iter().map(|e| e / total).collect())
}
