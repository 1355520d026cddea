//! Minimal reverse-mode tape over `ndarray` values.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes; calling
//! [`Tape::backward`] on a scalar root walks the list in reverse and hands each
//! node's gradient to its parents. Values are `Arc`-shared so parameter leaves
//! and identity ops (GRL) cost nothing to record.
//!
//! The op set is exactly what the model needs: dense/conv layers, a few
//! pointwise nonlinearities, row plumbing for segments and relation tuples,
//! cross-entropy / entropy heads, gradient reversal, and the differentiable
//! patch crop (whose kernel lives in [`crate::sampler`]).

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, Ix1, Ix2, Ix4};

use crate::sampler;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Identity of a trainable parameter in some external store. The tape only
/// uses it to label gradients; allocation and updates live in [`crate::nn`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

enum Op {
    Leaf { param: Option<ParamId> },
    /// (N,K) x (K,M) -> (N,M)
    MatMul { a: Var, b: Var },
    /// (N,M) + (M,)
    AddBias2 { x: Var, b: Var },
    /// (N,C,H,W) + (C,)
    AddBias4 { x: Var, b: Var },
    /// input (N,Cin,H,W), weight (Cout,Cin,k,k)
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Relu { x: Var },
    Sigmoid { x: Var },
    /// (N,C,H,W) -> (N,C) mean over the spatial extent
    GlobalAvgPool { x: Var },
    /// (N,C,H,W) -> (N,C*H*W)
    Flatten { x: Var },
    /// horizontal concat of (N,Di) blocks
    ConcatCols { parts: Vec<Var> },
    /// vertical concat of (Ni,D) blocks
    ConcatRows { parts: Vec<Var> },
    /// (N,D) -> (rows.len(),D)
    GatherRows { x: Var, rows: Vec<usize> },
    /// (T,D) -> (K, n*D): row k is the concat of x rows at tuples[k]
    TupleConcat { x: Var, tuples: Vec<Vec<usize>> },
    /// (N,D) -> (1,D)
    MeanRows { x: Var },
    /// (1,D) -> (n,D)
    BroadcastRows { x: Var },
    /// elementwise sum of same-shape nodes
    SumNodes { parts: Vec<Var> },
    /// row i scaled by factors[i] (constants, no gradient into factors)
    ScaleRows { x: Var, factors: Vec<f32> },
    Scale { x: Var, c: f32 },
    /// forward identity, backward multiplies upstream by -lambda
    Grl { x: Var, lambda: f32 },
    /// images (N,C,H,W) + centers (N,2) in [0,1]^2 -> (N,C,P,P)
    BilinearCrop { images: Var, centers: Var, size: usize },
    /// (N,K) logits -> 0-d mean cross-entropy against labels
    CrossEntropyMean { logits: Var, labels: Vec<usize> },
    /// (N,K) logits -> (N,) softmax entropies (natural log)
    EntropyRows { logits: Var },
    /// (N,) -> 0-d mean of weights[i]*x[i]
    WeightedMeanVec { x: Var, weights: Vec<f32> },
    /// 0-d scalars -> 0-d weighted sum
    WeightedSumScalars { parts: Vec<Var>, weights: Vec<f32> },
    /// any shape -> 0-d sum of all elements
    SumAll { x: Var },
}

struct Node {
    value: Arc<ArrayD<f32>>,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f32>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<f32>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f32>, op: Op) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<ArrayD<f32>>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f32> {
        &self.nodes[v.0].value
    }

    pub fn value_shared(&self, v: Var) -> Arc<ArrayD<f32>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, v: Var) -> f32 {
        let a = self.value(v);
        debug_assert_eq!(a.ndim(), 0, "scalar() on non-0-d node");
        *a.first().expect("empty node value")
    }

    pub fn leaf(&mut self, value: ArrayD<f32>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    pub fn leaf_shared(&mut self, value: Arc<ArrayD<f32>>) -> Var {
        self.push_shared(value, Op::Leaf { param: None })
    }

    /// Leaf whose gradient is reported under `id` by [`Gradients`]/[`Tape::param_grads`].
    pub fn param(&mut self, id: ParamId, value: Arc<ArrayD<f32>>) -> Var {
        self.push_shared(value, Op::Leaf { param: Some(id) })
    }

    /// Cuts the graph: same value, no parents.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value_shared(v);
        self.push_shared(value, Op::Leaf { param: None })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dims");
        let out = av.dot(&bv);
        self.push(out.into_dyn(), Op::MatMul { a, b })
    }

    pub fn add_bias2(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(self.value(x));
        let bv = as1(self.value(b));
        assert_eq!(xv.shape()[1], bv.len(), "bias width");
        let out = &xv + &bv;
        self.push(out.into_dyn(), Op::AddBias2 { x, b })
    }

    pub fn add_bias4(&mut self, x: Var, b: Var) -> Var {
        let xv = as4(self.value(x));
        let bv = as1(self.value(b));
        assert_eq!(xv.shape()[1], bv.len(), "channel bias width");
        let mut out = xv.to_owned();
        for c in 0..bv.len() {
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bv[c]);
        }
        self.push(out.into_dyn(), Op::AddBias4 { x, b })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xv = as4(self.value(x));
        let wv = as4(self.value(w));
        let out = conv2d_forward(&xv, &wv, stride, pad);
        self.push(out.into_dyn(), Op::Conv2d { x, w, stride, pad })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid { x })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = as4(self.value(x));
        let (n, c, h, w) = dims4(&xv);
        let mut out = Array2::<f32>::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                out[[i, j]] = xv.index_axis(Axis(0), i).index_axis(Axis(0), j).sum()
                    / (h * w) as f32;
            }
        }
        self.push(out.into_dyn(), Op::GlobalAvgPool { x })
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let xv = as4(self.value(x));
        let (n, c, h, w) = dims4(&xv);
        let out = xv
            .to_owned()
            .into_shape_with_order((n, c * h * w))
            .expect("flatten reshape");
        self.push(out.into_dyn(), Op::Flatten { x })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<Array2<f32>> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let n = views[0].shape()[0];
        for v in &views {
            assert_eq!(v.shape()[0], n, "concat_cols row count");
        }
        let total: usize = views.iter().map(|v| v.shape()[1]).sum();
        let mut out = Array2::<f32>::zeros((n, total));
        let mut off = 0;
        for v in &views {
            let w = v.shape()[1];
            out.slice_mut(ndarray::s![.., off..off + w]).assign(v);
            off += w;
        }
        self.push(out.into_dyn(), Op::ConcatCols { parts: parts.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<Array2<f32>> = parts.iter().map(|&p| as2(self.value(p))).collect();
        let d = views[0].shape()[1];
        for v in &views {
            assert_eq!(v.shape()[1], d, "concat_rows width");
        }
        let total: usize = views.iter().map(|v| v.shape()[0]).sum();
        let mut out = Array2::<f32>::zeros((total, d));
        let mut off = 0;
        for v in &views {
            let n = v.shape()[0];
            out.slice_mut(ndarray::s![off..off + n, ..]).assign(v);
            off += n;
        }
        self.push(out.into_dyn(), Op::ConcatRows { parts: parts.to_vec() })
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = as2(self.value(x));
        let mut out = Array2::<f32>::zeros((rows.len(), xv.shape()[1]));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&xv.row(r));
        }
        self.push(out.into_dyn(), Op::GatherRows { x, rows: rows.to_vec() })
    }

    pub fn tuple_concat(&mut self, x: Var, tuples: &[Vec<usize>]) -> Var {
        assert!(!tuples.is_empty());
        let xv = as2(self.value(x));
        let d = xv.shape()[1];
        let n = tuples[0].len();
        let mut out = Array2::<f32>::zeros((tuples.len(), n * d));
        for (k, tup) in tuples.iter().enumerate() {
            assert_eq!(tup.len(), n, "tuple arity");
            for (m, &r) in tup.iter().enumerate() {
                out.slice_mut(ndarray::s![k, m * d..(m + 1) * d]).assign(&xv.row(r));
            }
        }
        self.push(out.into_dyn(), Op::TupleConcat { x, tuples: tuples.to_vec() })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = as2(self.value(x));
        let out = xv.mean_axis(Axis(0)).expect("mean_rows of empty");
        let out = out.insert_axis(Axis(0));
        self.push(out.into_dyn(), Op::MeanRows { x })
    }

    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = as2(self.value(x));
        assert_eq!(xv.shape()[0], 1, "broadcast_rows expects (1,D)");
        let mut out = Array2::<f32>::zeros((n, xv.shape()[1]));
        for i in 0..n {
            out.row_mut(i).assign(&xv.row(0));
        }
        self.push(out.into_dyn(), Op::BroadcastRows { x })
    }

    pub fn sum_nodes(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let mut out = self.value(parts[0]).to_owned();
        for &p in &parts[1..] {
            assert_eq!(self.value(p).shape(), out.shape(), "sum_nodes shape");
            out += self.value(p);
        }
        self.push(out, Op::SumNodes { parts: parts.to_vec() })
    }

    pub fn scale_rows(&mut self, x: Var, factors: &[f32]) -> Var {
        let xv = as2(self.value(x));
        assert_eq!(xv.shape()[0], factors.len(), "scale_rows length");
        let mut out = xv.to_owned();
        for (i, &f) in factors.iter().enumerate() {
            out.row_mut(i).mapv_inplace(|v| v * f);
        }
        self.push(out.into_dyn(), Op::ScaleRows { x, factors: factors.to_vec() })
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let out = self.value(x).mapv(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda`
    /// on the way back.
    pub fn grl(&mut self, x: Var, lambda: f32) -> Var {
        assert!(lambda >= 0.0, "grl lambda must be non-negative");
        let value = self.value_shared(x);
        self.push_shared(value, Op::Grl { x, lambda })
    }

    pub fn bilinear_crop(&mut self, images: Var, centers: Var, size: usize) -> Var {
        let imgs = as4(self.value(images));
        let ctrs = as2(self.value(centers));
        let (n, c, h, w) = dims4(&imgs);
        assert_eq!(ctrs.shape(), [n, 2], "centers shape");
        assert!(size >= 1 && size <= h.min(w), "patch size vs frame");
        let mut out = Array4::<f32>::zeros((n, c, size, size));
        for i in 0..n {
            let patch = sampler::crop_forward_array(
                &imgs.index_axis(Axis(0), i),
                ctrs[[i, 0]] as f64,
                ctrs[[i, 1]] as f64,
                size,
            );
            out.index_axis_mut(Axis(0), i).assign(&patch);
        }
        self.push(out.into_dyn(), Op::BilinearCrop { images, centers, size })
    }

    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = as2(self.value(logits));
        assert_eq!(lv.shape()[0], labels.len(), "labels per row");
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < lv.shape()[1], "label out of range");
            let ls = log_softmax_row(&lv.row(i).to_owned());
            total -= ls[y] as f64;
        }
        let out = ndarray::arr0((total / labels.len() as f64) as f32);
        self.push(out.into_dyn(), Op::CrossEntropyMean { logits, labels: labels.to_vec() })
    }

    pub fn entropy_rows(&mut self, logits: Var) -> Var {
        let lv = as2(self.value(logits));
        let n = lv.shape()[0];
        let mut out = Array1::<f32>::zeros(n);
        for i in 0..n {
            let p = softmax_row(&lv.row(i).to_owned());
            out[i] = entropy_of_probs(&p);
        }
        self.push(out.into_dyn(), Op::EntropyRows { logits })
    }

    pub fn weighted_mean_vec(&mut self, x: Var, weights: &[f32]) -> Var {
        let xv = as1(self.value(x));
        assert_eq!(xv.len(), weights.len(), "weights length");
        let n = xv.len() as f32;
        let total: f32 = xv.iter().zip(weights).map(|(v, w)| v * w).sum();
        let out = ndarray::arr0(total / n);
        self.push(out.into_dyn(), Op::WeightedMeanVec { x, weights: weights.to_vec() })
    }

    pub fn weighted_sum_scalars(&mut self, parts: &[Var], weights: &[f32]) -> Var {
        assert_eq!(parts.len(), weights.len());
        let mut total = 0.0f32;
        for (&p, &w) in parts.iter().zip(weights) {
            total += self.scalar(p) * w;
        }
        let out = ndarray::arr0(total);
        self.push(
            out.into_dyn(),
            Op::WeightedSumScalars { parts: parts.to_vec(), weights: weights.to_vec() },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = ndarray::arr0(self.value(x).sum());
        self.push(out.into_dyn(), Op::SumAll { x })
    }

    /// Dense layer helper: `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let m = self.matmul(x, w);
        self.add_bias2(m, b)
    }

    /// Reverse pass from a 0-d scalar root.
    pub fn backward(&mut self, root: Var) -> Gradients {
        assert_eq!(self.value(root).ndim(), 0, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ndarray::arr0(1.0f32).into_dyn());

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of parameter leaves, labeled by [`ParamId`].
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, ArrayD<f32>)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &grads.grads[i] {
                    out.push((id, g.clone()));
                }
            }
        }
        out
    }

    fn backward_node(&self, idx: usize, g: &ArrayD<f32>, grads: &mut [Option<ArrayD<f32>>]) {
        let acc = |grads: &mut [Option<ArrayD<f32>>], v: Var, delta: ArrayD<f32>| {
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let av = as2(self.value(*a));
                let bv = as2(self.value(*b));
                let gv = as2(g);
                acc(grads, *a, gv.dot(&bv.t()).into_dyn());
                acc(grads, *b, av.t().dot(&gv).into_dyn());
            }
            Op::AddBias2 { x, b } => {
                let gv = as2(g);
                acc(grads, *x, gv.to_owned().into_dyn());
                acc(grads, *b, gv.sum_axis(Axis(0)).into_dyn());
            }
            Op::AddBias4 { x, b } => {
                let gv = as4(g);
                let c = gv.shape()[1];
                let mut gb = Array1::<f32>::zeros(c);
                for j in 0..c {
                    gb[j] = gv.index_axis(Axis(1), j).sum();
                }
                acc(grads, *x, gv.to_owned().into_dyn());
                acc(grads, *b, gb.into_dyn());
            }
            Op::Conv2d { x, w, stride, pad } => {
                let xv = as4(self.value(*x));
                let wv = as4(self.value(*w));
                let gv = as4(g);
                let (gx, gw) = conv2d_backward(&xv, &wv, &gv, *stride, *pad);
                acc(grads, *x, gx.into_dyn());
                acc(grads, *w, gw.into_dyn());
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(xv).for_each(|gi, &vi| {
                    if vi <= 0.0 {
                        *gi = 0.0;
                    }
                });
                acc(grads, *x, gx);
            }
            Op::Sigmoid { x } => {
                let yv = &self.nodes[idx].value;
                let mut gx = g.clone();
                ndarray::Zip::from(&mut gx).and(yv.as_ref()).for_each(|gi, &yi| {
                    *gi *= yi * (1.0 - yi);
                });
                acc(grads, *x, gx);
            }
            Op::GlobalAvgPool { x } => {
                let xv = as4(self.value(*x));
                let (n, c, h, w) = dims4(&xv);
                let gv = as2(g);
                let mut gx = Array4::<f32>::zeros((n, c, h, w));
                let inv = 1.0 / (h * w) as f32;
                for i in 0..n {
                    for j in 0..c {
                        gx.index_axis_mut(Axis(0), i)
                            .index_axis_mut(Axis(0), j)
                            .fill(gv[[i, j]] * inv);
                    }
                }
                acc(grads, *x, gx.into_dyn());
            }
            Op::Flatten { x } => {
                let shape = self.value(*x).raw_dim();
                let gx = as2(g).to_owned().into_shape_with_order(shape).expect("unflatten");
                acc(grads, *x, gx);
            }
            Op::ConcatCols { parts } => {
                let gv = as2(g);
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let gp = gv.slice(ndarray::s![.., off..off + w]).to_owned();
                    acc(grads, p, gp.into_dyn());
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let gv = as2(g);
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).shape()[0];
                    let gp = gv.slice(ndarray::s![off..off + n, ..]).to_owned();
                    acc(grads, p, gp.into_dyn());
                    off += n;
                }
            }
            Op::GatherRows { x, rows } => {
                let xv = as2(self.value(*x));
                let gv = as2(g);
                let mut gx = Array2::<f32>::zeros((xv.shape()[0], xv.shape()[1]));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = gx.row_mut(r);
                    dst += &gv.row(i);
                }
                acc(grads, *x, gx.into_dyn());
            }
            Op::TupleConcat { x, tuples } => {
                let xv = as2(self.value(*x));
                let d = xv.shape()[1];
                let gv = as2(g);
                let mut gx = Array2::<f32>::zeros((xv.shape()[0], d));
                for (k, tup) in tuples.iter().enumerate() {
                    for (m, &r) in tup.iter().enumerate() {
                        let mut dst = gx.row_mut(r);
                        dst += &gv.slice(ndarray::s![k, m * d..(m + 1) * d]);
                    }
                }
                acc(grads, *x, gx.into_dyn());
            }
            Op::MeanRows { x } => {
                let n = self.value(*x).shape()[0];
                let gv = as2(g);
                let mut gx = Array2::<f32>::zeros((n, gv.shape()[1]));
                let inv = 1.0 / n as f32;
                for i in 0..n {
                    gx.row_mut(i).assign(&gv.row(0));
                    gx.row_mut(i).mapv_inplace(|v| v * inv);
                }
                acc(grads, *x, gx.into_dyn());
            }
            Op::BroadcastRows { x } => {
                let gv = as2(g);
                let gx = gv.sum_axis(Axis(0)).insert_axis(Axis(0));
                acc(grads, *x, gx.into_dyn());
            }
            Op::SumNodes { parts } => {
                for &p in parts {
                    acc(grads, p, g.clone());
                }
            }
            Op::ScaleRows { x, factors } => {
                let gv = as2(g);
                let mut gx = gv.to_owned();
                for (i, &f) in factors.iter().enumerate() {
                    gx.row_mut(i).mapv_inplace(|v| v * f);
                }
                acc(grads, *x, gx.into_dyn());
            }
            Op::Scale { x, c } => {
                acc(grads, *x, g.mapv(|v| v * c));
            }
            Op::Grl { x, lambda } => {
                acc(grads, *x, g.mapv(|v| v * -lambda));
            }
            Op::BilinearCrop { images, centers, size } => {
                let imgs = as4(self.value(*images));
                let ctrs = as2(self.value(*centers));
                let gv = as4(g);
                let (n, c, h, w) = dims4(&imgs);
                let mut gimg = Array4::<f32>::zeros((n, c, h, w));
                let mut gctr = Array2::<f32>::zeros((n, 2));
                for i in 0..n {
                    let (gi, gcx, gcy) = sampler::crop_backward_array(
                        &imgs.index_axis(Axis(0), i),
                        ctrs[[i, 0]] as f64,
                        ctrs[[i, 1]] as f64,
                        *size,
                        &gv.index_axis(Axis(0), i),
                    );
                    gimg.index_axis_mut(Axis(0), i).assign(&gi);
                    gctr[[i, 0]] = gcx as f32;
                    gctr[[i, 1]] = gcy as f32;
                }
                acc(grads, *images, gimg.into_dyn());
                acc(grads, *centers, gctr.into_dyn());
            }
            Op::CrossEntropyMean { logits, labels } => {
                let lv = as2(self.value(*logits));
                let gs = *g.first().expect("scalar grad");
                let n = labels.len();
                let mut gl = Array2::<f32>::zeros((n, lv.shape()[1]));
                for (i, &y) in labels.iter().enumerate() {
                    let p = softmax_row(&lv.row(i).to_owned());
                    for k in 0..p.len() {
                        let target = if k == y { 1.0 } else { 0.0 };
                        gl[[i, k]] = gs * (p[k] - target) / n as f32;
                    }
                }
                acc(grads, *logits, gl.into_dyn());
            }
            Op::EntropyRows { logits } => {
                // dH/dz_k = -p_k (ln p_k + H)
                let lv = as2(self.value(*logits));
                let gv = as1(g);
                let mut gl = Array2::<f32>::zeros((lv.shape()[0], lv.shape()[1]));
                for i in 0..lv.shape()[0] {
                    let p = softmax_row(&lv.row(i).to_owned());
                    let h = entropy_of_probs(&p);
                    for k in 0..p.len() {
                        let lp = if p[k] > 0.0 { p[k].ln() } else { 0.0 };
                        gl[[i, k]] = gv[i] * (-p[k] * (lp + h));
                    }
                }
                acc(grads, *logits, gl.into_dyn());
            }
            Op::WeightedMeanVec { x, weights } => {
                let gs = *g.first().expect("scalar grad");
                let n = weights.len() as f32;
                let gx = Array1::from_iter(weights.iter().map(|w| gs * w / n));
                acc(grads, *x, gx.into_dyn());
            }
            Op::WeightedSumScalars { parts, weights } => {
                let gs = *g.first().expect("scalar grad");
                for (&p, &w) in parts.iter().zip(weights) {
                    acc(grads, p, ndarray::arr0(gs * w).into_dyn());
                }
            }
            Op::SumAll { x } => {
                let gs = *g.first().expect("scalar grad");
                let gx = ArrayD::from_elem(self.value(*x).raw_dim(), gs);
                acc(grads, *x, gx);
            }
        }
    }
}

fn as1(a: &ArrayD<f32>) -> Array1<f32> {
    a.view().into_dimensionality::<Ix1>().expect("expected 1-d").to_owned()
}

fn as2(a: &ArrayD<f32>) -> Array2<f32> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d").to_owned()
}

fn as4(a: &ArrayD<f32>) -> Array4<f32> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-d").to_owned()
}

fn dims4(a: &Array4<f32>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

pub fn softmax_row(logits: &Array1<f32>) -> Array1<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut e = logits.mapv(|v| (v - max).exp());
    let sum: f32 = e.sum();
    e.mapv_inplace(|v| v / sum);
    e
}

fn log_softmax_row(logits: &Array1<f32>) -> Array1<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse: f32 = logits.mapv(|v| (v - max).exp()).sum().ln() + max;
    logits.mapv(|v| v - lse)
}

fn entropy_of_probs(p: &Array1<f32>) -> f32 {
    -p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f32>()
}

pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &ndarray::ArrayView3<f32>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<f32>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = ci * k * k + ky * k + kx;
                let mut dst = col.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = plane[[iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    col: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f32> {
    let mut x = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ci * k * k + ky * k + kx;
                let src = col.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

fn conv2d_forward(x: &Array4<f32>, w: &Array4<f32>, stride: usize, pad: usize) -> Array4<f32> {
    let (n, cin, h, wd) = dims4(x);
    let (cout, cin2, k, k2) = dims4(w);
    assert_eq!(cin, cin2, "conv channel mismatch");
    assert_eq!(k, k2, "square kernels only");
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(wd, k, stride, pad);
    let w2 = w.to_owned().into_shape_with_order((cout, cin * k * k)).expect("conv w reshape");
    let mut out = Array4::<f32>::zeros((n, cout, ho, wo));
    for i in 0..n {
        let col = im2col(&x.index_axis(Axis(0), i), k, stride, pad, ho, wo);
        let o = w2.dot(&col); // (cout, ho*wo)
        out.index_axis_mut(Axis(0), i)
            .assign(&o.into_shape_with_order((cout, ho, wo)).expect("conv out reshape"));
    }
    out
}

fn conv2d_backward(
    x: &Array4<f32>,
    w: &Array4<f32>,
    gout: &Array4<f32>,
    stride: usize,
    pad: usize,
) -> (Array4<f32>, Array4<f32>) {
    let (n, cin, h, wd) = dims4(x);
    let (cout, _, k, _) = dims4(w);
    let (_, _, ho, wo) = dims4(gout);
    let w2 = w.to_owned().into_shape_with_order((cout, cin * k * k)).expect("conv w reshape");
    let mut gx = Array4::<f32>::zeros((n, cin, h, wd));
    let mut gw2 = Array2::<f32>::zeros((cout, cin * k * k));
    for i in 0..n {
        let col = im2col(&x.index_axis(Axis(0), i), k, stride, pad, ho, wo);
        let go = gout
            .index_axis(Axis(0), i)
            .to_owned()
            .into_shape_with_order((cout, ho * wo))
            .expect("gout reshape");
        gw2 = gw2 + go.dot(&col.t());
        let gcol = w2.t().dot(&go);
        gx.index_axis_mut(Axis(0), i)
            .assign(&col2im(&gcol, cin, h, wd, k, stride, pad, ho, wo));
    }
    let gw = gw2.into_shape_with_order((cout, cin, k, k)).expect("gw reshape");
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Central finite difference of a scalar-valued rebuild closure.
    fn fd_grad<F>(values: &mut [f32], mut eval: F, h: f32) -> Vec<f32>
    where
        F: FnMut(&[f32]) -> f32,
    {
        let mut out = vec![0.0; values.len()];
        for i in 0..values.len() {
            let orig = values[i];
            values[i] = orig + h;
            let hi = eval(values);
            values[i] = orig - h;
            let lo = eval(values);
            values[i] = orig;
            out[i] = (hi - lo) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &[f32], b: &[f32], tol: f32, what: &str) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "{what}[{i}]: analytic {x} vs fd {y}"
            );
        }
    }

    #[test]
    fn matmul_linear_grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut wdata: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xdata: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let eval = |w: &[f32]| {
            let mut t = Tape::new();
            let x = t.leaf(Array2::from_shape_vec((2, 4), xdata.clone()).unwrap().into_dyn());
            let wv = t.leaf(Array2::from_shape_vec((4, 3), w.to_vec()).unwrap().into_dyn());
            let y = t.matmul(x, wv);
            let r = t.relu(y);
            let s = t.sum_all(r);
            t.scalar(s)
        };

        let mut t = Tape::new();
        let x = t.leaf(Array2::from_shape_vec((2, 4), xdata.clone()).unwrap().into_dyn());
        let wv = t.leaf(Array2::from_shape_vec((4, 3), wdata.clone()).unwrap().into_dyn());
        let y = t.matmul(x, wv);
        let r = t.relu(y);
        let s = t.sum_all(r);
        let grads = t.backward(s);
        let analytic: Vec<f32> = grads.wrt(wv).unwrap().iter().copied().collect();

        let fd = fd_grad(&mut wdata, eval, 1e-2);
        assert_close(&analytic, &fd, 1e-2, "dL/dW");
    }

    #[test]
    fn conv2d_grads_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let xdata: Vec<f32> = (0..2 * 2 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut wdata: Vec<f32> = (0..3 * 2 * 3 * 3).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let eval = |w: &[f32]| {
            let mut t = Tape::new();
            let x = t.leaf(Array4::from_shape_vec((2, 2, 6, 6), xdata.clone()).unwrap().into_dyn());
            let wv = t.leaf(Array4::from_shape_vec((3, 2, 3, 3), w.to_vec()).unwrap().into_dyn());
            let y = t.conv2d(x, wv, 2, 1);
            let s = t.sum_all(y);
            t.scalar(s)
        };

        let mut t = Tape::new();
        let x = t.leaf(Array4::from_shape_vec((2, 2, 6, 6), xdata.clone()).unwrap().into_dyn());
        let wv = t.leaf(Array4::from_shape_vec((3, 2, 3, 3), wdata.clone()).unwrap().into_dyn());
        let y = t.conv2d(x, wv, 2, 1);
        let s = t.sum_all(y);
        let grads = t.backward(s);
        let gw: Vec<f32> = grads.wrt(wv).unwrap().iter().copied().collect();
        let gx_analytic: Vec<f32> = grads.wrt(x).unwrap().iter().copied().collect();

        let fd_w = fd_grad(&mut wdata, eval, 1e-2);
        assert_close(&gw, &fd_w, 1e-2, "dL/dW");

        // same trick for the input gradient
        let mut xmut = xdata.clone();
        let wfixed = wdata.clone();
        let eval_x = |xs: &[f32]| {
            let mut t = Tape::new();
            let x = t.leaf(Array4::from_shape_vec((2, 2, 6, 6), xs.to_vec()).unwrap().into_dyn());
            let wv = t.leaf(Array4::from_shape_vec((3, 2, 3, 3), wfixed.clone()).unwrap().into_dyn());
            let y = t.conv2d(x, wv, 2, 1);
            let s = t.sum_all(y);
            t.scalar(s)
        };
        let fd_x = fd_grad(&mut xmut, eval_x, 1e-2);
        assert_close(&gx_analytic, &fd_x, 1e-2, "dL/dX");
    }

    #[test]
    fn cross_entropy_backward_is_softmax_minus_onehot() {
        let mut t = Tape::new();
        let logits = t.leaf(arr2(&[[1.0f32, -1.0, 0.5], [0.0, 0.0, 0.0]]).into_dyn());
        let loss = t.cross_entropy_mean(logits, &[0, 2]);
        let grads = t.backward(loss);
        let g = grads.wrt(logits).unwrap();
        let p0 = softmax_row(&arr1(&[1.0f32, -1.0, 0.5]));
        assert!((g[[0, 0]] - (p0[0] - 1.0) / 2.0).abs() < 1e-6);
        assert!((g[[1, 2]] - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn entropy_rows_gradient_matches_finite_differences() {
        let mut ldata = vec![0.7f32, -0.3, 0.1, 1.2];
        let eval = |l: &[f32]| {
            let mut t = Tape::new();
            let logits = t.leaf(Array2::from_shape_vec((1, 4), l.to_vec()).unwrap().into_dyn());
            let h = t.entropy_rows(logits);
            let s = t.sum_all(h);
            t.scalar(s)
        };
        let mut t = Tape::new();
        let logits = t.leaf(Array2::from_shape_vec((1, 4), ldata.clone()).unwrap().into_dyn());
        let h = t.entropy_rows(logits);
        let s = t.sum_all(h);
        let grads = t.backward(s);
        let analytic: Vec<f32> = grads.wrt(logits).unwrap().iter().copied().collect();
        let fd = fd_grad(&mut ldata, eval, 1e-3);
        assert_close(&analytic, &fd, 1e-2, "dH/dz");
    }

    #[test]
    fn grl_negates_and_scales_gradient() {
        for lambda in [0.0f32, 0.5, 1.0] {
            let mut t = Tape::new();
            let x = t.leaf(arr1(&[2.0f32, -1.0]).into_dyn());
            let r = t.grl(x, lambda);
            let s = t.sum_all(r);
            // forward identity
            assert_eq!(t.value(r), t.value(x));
            let grads = t.backward(s);
            let gx = grads.wrt(x).unwrap();
            for &v in gx.iter() {
                assert_eq!(v, -lambda);
            }
        }
    }

    #[test]
    fn tuple_concat_and_gather_scatter_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(arr2(&[[1.0f32, 2.0], [3.0, 4.0], [5.0, 6.0]]).into_dyn());
        let tc = t.tuple_concat(x, &[vec![0, 2], vec![0, 1]]);
        assert_eq!(t.value(tc).shape(), &[2, 4]);
        assert_eq!(as2(t.value(tc)).row(0).to_vec(), vec![1.0, 2.0, 5.0, 6.0]);
        let s = t.sum_all(tc);
        let grads = t.backward(s);
        let gx = grads.wrt(x).unwrap();
        // row 0 used twice, rows 1 and 2 once
        assert_eq!(gx[[0, 0]], 2.0);
        assert_eq!(gx[[1, 0]], 1.0);
        assert_eq!(gx[[2, 0]], 1.0);
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(arr1(&[3.0f32]).into_dyn());
        let a = t.scale(x, 2.0);
        let b = t.scale(x, 5.0);
        let s = t.sum_nodes(&[a, b]);
        let root = t.sum_all(s);
        let grads = t.backward(root);
        assert_eq!(grads.wrt(x).unwrap()[[0]], 7.0);
    }
}
