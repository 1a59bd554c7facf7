use std::collections::BTreeMap;

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::param::{ParamId, ParamStore};
use super::{same_shape, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Scale(Var, T),
    MeanN(Vec<Var>),
    ConcatChannels(Vec<Var>),
    Upsample2x(Var),
    Crop {
        x: Var,
    },
    Sum(Var),
    /// Scalar-valued op whose local gradients were produced in the forward pass.
    Fused {
        inputs: Vec<Var>,
        local_grads: Vec<Tensor<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward computation, differentiated by [`Graph::backward`].
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// reverse topological order.
#[derive(Debug)]
pub struct Graph<T = f64> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    param_of: BTreeMap<Var, ParamId>,
    param_uses: BTreeMap<ParamId, usize>,
    train: bool,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph whose parameter nodes require gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            param_of: BTreeMap::new(),
            param_uses: BTreeMap::new(),
            train: true,
            grads: Vec::new(),
        }
    }

    /// A graph for evaluation only: parameters enter as constants.
    pub fn inference() -> Self {
        Graph {
            train: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::invariant(format!("non-finite value produced by {op:?}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn touch(&mut self, vars: &[Var]) {
        for v in vars {
            if let Some(&id) = self.param_of.get(v) {
                *self.param_uses.entry(id).or_default() += 1;
            }
        }
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
            .expect("constant inputs are caller-validated")
    }

    /// A differentiable leaf (e.g. an image under a gradient check).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true).expect("leaf inputs are caller-validated")
    }

    /// The node holding parameter `id`. Repeated calls return the same node,
    /// so every use of a shared parameter accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let train = self.train;
        let v = self
            .push(store.get(id).tensor.clone(), Op::Leaf, train)
            .expect("parameters are finite");
        self.params.insert(id, v);
        self.param_of.insert(v, id);
        v
    }

    /// How many ops consumed parameter `id` so far.
    pub fn param_uses(&self, id: ParamId) -> usize {
        self.param_uses.get(&id).copied().unwrap_or(0)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), bias.map(|b| self.value(b)), geom)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.touch(&inputs);
        let rg = self.any_grad(&inputs);
        self.push(out, Op::Conv2d { x, w, bias, geom }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.touch(&[a, b]);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        self.touch(&[a, b]);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.touch(&[x]);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::from_f64_lossy(s);
        let out = self.value(x).map(|v| v * s);
        self.touch(&[x]);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `(1/B)·Σ xs`, accumulated in list order.
    pub fn mean_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::config("mean_n needs at least one tensor"))?;
        // Running mean m_k = m_{k-1} + (x_k - m_{k-1}) / k: equal inputs give back the input bit-for-bit.
        let mut out = self.value(first).clone();
        for (k, &x) in rest.iter().enumerate() {
            same_shape(&out, self.value(x), "mean_n")?;
            let div = T::from_usize(k + 2).expect("small count");
            for (m, &v) in out.data_mut().iter_mut().zip(self.value(x).data()) {
                *m += (v - *m) / div;
            }
        }
        self.touch(xs);
        let rg = self.any_grad(xs);
        self.push(out, Op::MeanN(xs.to_vec()), rg)
    }

    /// Concatenate N×Cᵢ×H×W maps along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::config("concat needs at least one tensor"))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut total_c = 0;
        for &x in xs {
            let [xn, xc, xh, xw] = self.value(x).dims4()?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::config(format!(
                    "concat: shape mismatch {:?} vs {:?}",
                    self.shape(first),
                    self.shape(x)
                )));
            }
            total_c += xc;
        }
        let mut data = Vec::with_capacity(n * total_c * h * w);
        for b in 0..n {
            for &x in xs {
                let t = self.value(x);
                let per = t.numel() / n;
                data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
            }
        }
        let out = Tensor::new(&[n, total_c, h, w], data)?;
        self.touch(xs);
        let rg = self.any_grad(xs);
        self.push(out, Op::ConcatChannels(xs.to_vec()), rg)
    }

    /// Nearest-neighbour 2× upsampling: each cell becomes a 2×2 block.
    pub fn upsample_nearest_2x(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        for plane in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(plane * 2 * h + y) * 2 * w + xx] = src[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        self.touch(&[x]);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Upsample2x(x), rg)
    }

    /// Keep the top-left `h`×`w` window of every plane.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let [n, c, xh, xw] = self.value(x).dims4()?;
        if h > xh || w > xw {
            return Err(Error::config(format!("cannot crop a {xh}x{xw} map to {h}x{w}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for y in 0..h {
                let row = (plane * xh + y) * xw;
                out.extend_from_slice(&src[row..row + w]);
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        self.touch(&[x]);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Crop { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.touch(&[x]);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    /// Record a scalar op computed outside the graph, given its value and the
    /// gradient of that value w.r.t. each input.
    pub fn fused_scalar(&mut self, inputs: &[Var], value: T, local_grads: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != local_grads.len() {
            return Err(Error::invariant("fused op: one local gradient per input"));
        }
        for (&x, g) in inputs.iter().zip(&local_grads) {
            same_shape(self.value(x), g, "fused op gradient")?;
        }
        self.touch(inputs);
        let rg = self.any_grad(inputs);
        self.push(
            Tensor::scalar(value),
            Op::Fused {
                inputs: inputs.to_vec(),
                local_grads,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `root`. Afterwards [`Graph::grad`] holds
    /// d root / d node for every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if cfg!(debug_assertions) && !g.is_finite() {
                return Err(Error::invariant(format!("non-finite gradient at node {i}")));
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        let mut give = |v: Var, t: Tensor<T>| match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&t),
            None => grads[v.0] = Some(t),
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, bias, geom } => {
                let cg = conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *geom,
                    g,
                    (wants(x), wants(w), bias.as_ref().is_some_and(wants)),
                )?;
                if let Some(t) = cg.input {
                    give(*x, t);
                }
                if let Some(t) = cg.weight {
                    give(*w, t);
                }
                if let (Some(b), Some(t)) = (bias, cg.bias) {
                    give(*b, t);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        give(*v, g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&gi, &y)| gi * y).collect();
                    give(*a, Tensor::new(g.shape(), d)?);
                }
                if wants(b) {
                    let d = g.data().iter().zip(av.data()).map(|(&gi, &x)| gi * x).collect();
                    give(*b, Tensor::new(g.shape(), d)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                    .collect();
                give(*x, Tensor::new(g.shape(), d)?);
            }
            Op::Scale(x, s) => give(*x, g.map(|v| v * *s)),
            Op::MeanN(xs) => {
                let inv = T::one() / T::from_usize(xs.len()).expect("small count");
                let share = g.map(|v| v * inv);
                for x in xs.iter().filter(|x| wants(x)) {
                    give(*x, share.clone());
                }
            }
            Op::ConcatChannels(xs) => {
                let [n, total_c, h, w] = g.dims4()?;
                let mut offset = 0;
                for x in xs {
                    let c = self.shape(*x)[1];
                    if wants(x) {
                        let mut d = Vec::with_capacity(n * c * h * w);
                        for b in 0..n {
                            let start = (b * total_c + offset) * h * w;
                            d.extend_from_slice(&g.data()[start..start + c * h * w]);
                        }
                        give(*x, Tensor::new(self.shape(*x), d)?);
                    }
                    offset += c;
                }
            }
            Op::Upsample2x(x) => {
                let [n, c, h, w] = self.value(*x).dims4()?;
                let mut d = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(plane * h + y / 2) * w + xx / 2] += g.data()[(plane * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                give(*x, Tensor::new(self.shape(*x), d)?);
            }
            Op::Crop { x } => {
                let [n, c, xh, xw] = self.value(*x).dims4()?;
                let [_, _, h, w] = g.dims4()?;
                let mut d = vec![T::zero(); n * c * xh * xw];
                for plane in 0..n * c {
                    for y in 0..h {
                        let dst = (plane * xh + y) * xw;
                        d[dst..dst + w].copy_from_slice(&g.data()[(plane * h + y) * w..(plane * h + y + 1) * w]);
                    }
                }
                give(*x, Tensor::new(self.shape(*x), d)?);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                give(*x, Tensor::full(self.shape(*x), s));
            }
            Op::Fused { inputs, local_grads } => {
                let s = g.data()[0];
                for (x, lg) in inputs.iter().zip(local_grads) {
                    if wants(x) {
                        give(*x, lg.map(|v| v * s));
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradients of every parameter that entered this graph, by id.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    /// Add this graph's parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_scaled_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let y = g.scale(x, 2.0).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0; 6]);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn mean_n_of_identical_is_identity_and_splits_grad() {
        let t = Tensor::from_f64(&[1, 1, 2, 2], &[0.1, 0.7, -0.3, 1e-3]).unwrap();
        let mut g = Graph::<f64>::new();
        let xs: Vec<Var> = (0..3).map(|_| g.leaf(t.clone())).collect();
        let m = g.mean_n(&xs).unwrap();
        assert_eq!(g.value(m), &t);
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        for x in xs {
            assert_eq!(g.grad(x).unwrap().data(), &[1.0 / 3.0; 4]);
        }
    }

    #[test]
    fn mean_n_rejects_empty_and_mismatch() {
        let mut g = Graph::<f64>::new();
        assert!(matches!(g.mean_n(&[]), Err(Error::Config(_))));
        let a = g.leaf(Tensor::zeros(&[2]));
        let b = g.leaf(Tensor::zeros(&[3]));
        assert!(matches!(g.mean_n(&[a, b]), Err(Error::Config(_))));
        assert!(matches!(g.add(a, b), Err(Error::Config(_))));
    }

    #[test]
    fn add_zero_is_identity() {
        let t = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t.clone());
        let z = g.constant(Tensor::zeros(&[3]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), &t);
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[1, 1, 1, 1], &[2.5]).unwrap());
        let u = g.upsample_nearest_2x(x).unwrap();
        assert_eq!(g.shape(u), &[1, 1, 2, 2]);
        assert_eq!(g.value(u).data(), &[2.5; 4]);
        let s = g.sum(u).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0]);

        let mut g = Graph::<f64>::new();
        let c = g.leaf(Tensor::full(&[2, 3, 3, 5], 0.25));
        let u = g.upsample_nearest_2x(c).unwrap();
        assert!(g.value(u).data().iter().all(|&v| v == 0.25));
        let s = g.sum(u).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).unwrap().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn shared_param_counts_uses() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let mut outs = Vec::new();
        for _ in 0..3 {
            let w = g.param(&store, id);
            outs.push(g.conv2d(x, w, None, ConvGeometry::same(1, 1)).unwrap());
        }
        assert_eq!(g.param_uses(id), 3);
        let m = g.mean_n(&outs).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        // each site contributes (1/3)·Σx = 4/3, three sites → 4
        let grads: Vec<_> = g.param_grads().collect();
        assert_eq!(grads.len(), 1);
        assert!((grads[0].1.data()[0] - 4.0).abs() < 1e-12);
    }
}
