use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{numel, Float, ParamId, ParamStore, Tensor};

/// Maps the output gradient to input gradients. `needs[i]` tells whether input
/// `i` wants a gradient; entries for inputs that do not may be `None`.
pub type GradFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    value: Arc<Tensor<F>>,
    inputs: Vec<usize>,
    grad_fn: Option<GradFn<F>>,
    needs_grad: bool,
}

/// Define-by-run tape. Every op on a [`Var`] appends a node; [`Graph::backward`]
/// walks the nodes in reverse creation order.
pub struct Graph<F: Float> {
    nodes: RefCell<Vec<Node<F>>>,
    params: RefCell<BTreeMap<ParamId, usize>>,
    track: bool,
}

#[derive(Clone, Copy)]
pub struct Var<'g, F: Float> {
    graph: &'g Graph<F>,
    id: usize,
}

impl<F: Float> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Graph<F> {
    /// A graph that records gradients for parameters and inputs.
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(BTreeMap::new()), track: true }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Self { track: false, ..Self::new() }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<F>, inputs: Vec<usize>, grad_fn: Option<GradFn<F>>, leaf_grad: bool) -> Var<'_, F> {
        self.push_shared(Arc::new(value), inputs, grad_fn, leaf_grad)
    }

    fn push_shared(
        &self,
        value: Arc<Tensor<F>>,
        inputs: Vec<usize>,
        grad_fn: Option<GradFn<F>>,
        leaf_grad: bool,
    ) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.track && (leaf_grad || inputs.iter().any(|&i| nodes[i].needs_grad));
        let id = nodes.len();
        nodes.push(Node {
            value,
            inputs,
            grad_fn: if needs_grad { grad_fn } else { None },
            needs_grad,
        });
        Var { graph: self, id }
    }

    fn push_arc(&self, value: Arc<Tensor<F>>, leaf_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, inputs: Vec::new(), grad_fn: None, needs_grad: self.track && leaf_grad });
        Var { graph: self, id }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf whose gradient is reported by [`Grads::wrt`].
    pub fn input(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push(value, Vec::new(), None, true)
    }

    /// The leaf bound to a stored parameter. Repeated calls return the same node,
    /// so weights shared across time steps accumulate one gradient.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var<'_, F> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push_arc(Arc::clone(store.get(id)), true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Appends a node computed outside the engine, with a hand-written adjoint.
    pub fn custom<'g>(&'g self, inputs: &[Var<'g, F>], value: Tensor<F>, grad_fn: GradFn<F>) -> Var<'g, F> {
        for v in inputs {
            assert!(std::ptr::eq(v.graph, self), "mixing vars from different graphs");
        }
        self.push(value, inputs.iter().map(|v| v.id).collect(), Some(grad_fn), false)
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g, F>], axis: usize) -> Var<'g, F> {
        let values: Vec<Arc<Tensor<F>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<F>> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.custom(
            parts,
            out,
            Box::new(move |g, needs| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(needs)
                    .map(|(&len, &need)| {
                        let slice = need.then(|| kernels::narrow(g, axis, start, len));
                        start += len;
                        slice
                    })
                    .collect()
            }),
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_, F>) -> Grads<F> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.id].value;
        assert_eq!(root_val.len(), 1, "backward root must be a scalar, got {:?}", root_val.shape());
        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(Tensor::ones(root_val.shape().to_vec()));
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.grad_fn {
                None => {
                    leaves.insert(id, g);
                }
                Some(f) => {
                    let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].needs_grad).collect();
                    let input_grads = f(&g, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for ((&inp, gi), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                        let Some(gi) = gi else { continue };
                        if !need {
                            continue;
                        }
                        assert_eq!(gi.shape(), nodes[inp].value.shape(), "gradient shape mismatch at node {inp}");
                        match &mut grads[inp] {
                            Some(acc) => acc.add_assign(&gi),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Grads { leaves, params: self.params.borrow().clone() }
    }
}

/// Gradients of leaves after a reverse pass.
pub struct Grads<F> {
    leaves: HashMap<usize, Tensor<F>>,
    params: BTreeMap<ParamId, usize>,
}

impl<F: Float> Grads<F> {
    pub fn wrt(&self, v: &Var<'_, F>) -> Option<&Tensor<F>> {
        self.leaves.get(&v.id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id).and_then(|n| self.leaves.get(n))
    }

    /// Moves parameter gradients out, indexed by [`ParamId::index`].
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Tensor<F>>> {
        let mut out: Vec<Option<Tensor<F>>> = Vec::new();
        out.resize_with(n_params, || None);
        for (pid, node) in &self.params {
            if pid.0 < n_params {
                out[pid.0] = self.leaves.remove(node);
            }
        }
        out
    }
}

fn same_shape<F: Float>(a: &Tensor<F>, b: &Tensor<F>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'g, F: Float> Var<'g, F> {
    pub fn graph(&self) -> &'g Graph<F> {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor<F>> {
        Arc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        self.value().dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].needs_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(self) -> Var<'g, F> {
        self.graph.push_arc(self.value(), false)
    }

    fn unary(self, value: Tensor<F>, back: impl Fn(&Tensor<F>) -> Tensor<F> + 'static) -> Var<'g, F> {
        self.graph.custom(&[self], value, Box::new(move |g, _| vec![Some(back(g))]))
    }

    /// Unary op whose backward reads its own output.
    fn unary_out(self, value: Tensor<F>, back: impl Fn(&Tensor<F>, &Tensor<F>) -> Tensor<F> + 'static) -> Var<'g, F> {
        let y = Arc::new(value);
        let yc = Arc::clone(&y);
        let back: GradFn<F> = Box::new(move |g, _| vec![Some(back(g, &yc))]);
        self.graph.push_shared(y, vec![self.id], Some(back), false)
    }

    fn binary(
        self,
        other: Var<'g, F>,
        value: Tensor<F>,
        back: impl Fn(&Tensor<F>, &[bool]) -> [Option<Tensor<F>>; 2] + 'static,
    ) -> Var<'g, F> {
        self.graph.custom(&[self, other], value, Box::new(move |g, n| back(g, n).into()))
    }

    pub fn add(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        self.binary(other, a.zip_map(&b, |x, y| x + y), |g, _| [Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        self.binary(other, a.zip_map(&b, |x, y| x - y), |g, n| [Some(g.clone()), n[1].then(|| g.map(|v| -v))])
    }

    pub fn mul(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.binary(other, out, move |g, n| {
            [n[0].then(|| g.zip_map(&b, |gv, y| gv * y)), n[1].then(|| g.zip_map(&a, |gv, x| gv * x))]
        })
    }

    pub fn div(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "div");
        let out = a.zip_map(&b, |x, y| x / y);
        self.binary(other, out, move |g, n| {
            [
                n[0].then(|| g.zip_map(&b, |gv, y| gv / y)),
                n[1].then(|| {
                    let t = g.zip_map(&a, |gv, x| gv * x);
                    t.zip_map(&b, |v, y| -v / (y * y))
                }),
            ]
        })
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Var<'g, F> {
        let v = self.value();
        if v.shape() == shape {
            return self;
        }
        let src_shape = v.shape().to_vec();
        let out = kernels::broadcast_to(&v, shape);
        self.unary(out, move |g| kernels::reduce_to(g, &src_shape))
    }

    fn broadcast_pair(self, other: Var<'g, F>) -> (Var<'g, F>, Var<'g, F>) {
        let (sa, sb) = (self.shape(), other.shape());
        assert_eq!(sa.len(), sb.len(), "broadcast needs equal ranks: {sa:?} vs {sb:?}");
        let shape: Vec<usize> = sa
            .iter()
            .zip(&sb)
            .map(|(&x, &y)| {
                assert!(x == y || x == 1 || y == 1, "incompatible broadcast {sa:?} vs {sb:?}");
                x.max(y)
            })
            .collect();
        (self.broadcast_to(&shape), other.broadcast_to(&shape))
    }

    /// Elementwise ops with size-1 broadcasting on either side.
    pub fn add_bc(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = self.broadcast_pair(other);
        a.add(b)
    }

    pub fn sub_bc(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = self.broadcast_pair(other);
        a.sub(b)
    }

    pub fn mul_bc(self, other: Var<'g, F>) -> Var<'g, F> {
        let (a, b) = self.broadcast_pair(other);
        a.mul(b)
    }

    pub fn scale(self, s: f64) -> Var<'g, F> {
        let s = F::of(s);
        let out = self.value().map(|x| x * s);
        self.unary(out, move |g| g.map(|v| v * s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'g, F> {
        let s = F::of(s);
        let out = self.value().map(|x| x + s);
        self.unary(out, |g| g.clone())
    }

    pub fn neg(self) -> Var<'g, F> {
        self.scale(-1.0)
    }

    pub fn sigmoid(self) -> Var<'g, F> {
        let y = self.value().map(|x| F::one() / (F::one() + (-x).exp()));
        self.unary_out(y, |g, y| g.zip_map(y, |gv, s| gv * s * (F::one() - s)))
    }

    pub fn tanh(self) -> Var<'g, F> {
        // libm tanhf is several times slower than expf; this form is exact to a few ulp.
        let two = F::of(2.0);
        let y = self.value().map(|x| {
            if x.abs() < F::of(0.01) {
                x.tanh()
            } else {
                let e = (-two * x.abs()).exp();
                ((F::one() - e) / (F::one() + e)).copysign(x)
            }
        });
        self.unary_out(y, |g, y| g.zip_map(y, |gv, t| gv * (F::one() - t * t)))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, F> {
        let s = F::of(slope);
        let x = self.value();
        let out = x.map(|v| if v > F::zero() { v } else { v * s });
        self.unary(out, move |g| g.zip_map(&x, |gv, v| if v > F::zero() { gv } else { gv * s }))
    }

    pub fn abs(self) -> Var<'g, F> {
        let x = self.value();
        let out = x.map(|v| v.abs());
        self.unary(out, move |g| g.zip_map(&x, |gv, v| if v >= F::zero() { gv } else { -gv }))
    }

    pub fn square(self) -> Var<'g, F> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.unary(out, move |g| g.zip_map(&x, |gv, v| F::of(2.0) * gv * v))
    }

    pub fn sqrt(self) -> Var<'g, F> {
        let y = self.value().map(|v| v.sqrt());
        self.unary_out(y, |g, y| g.zip_map(y, |gv, s| gv / (F::of(2.0) * s)))
    }

    pub fn exp(self) -> Var<'g, F> {
        let y = self.value().map(|v| v.exp());
        self.unary_out(y, |g, y| g.zip_map(y, |gv, e| gv * e))
    }

    pub fn sum_all(self) -> Var<'g, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(shape.clone(), g.item()))
    }

    pub fn mean_all(self) -> Var<'g, F> {
        let n = self.value().len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(self, axis: usize) -> Var<'g, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = kernels::sum_axis(&x, axis);
        self.unary(out, move |g| kernels::broadcast_to(g, &shape))
    }

    pub fn mean_axis(self, axis: usize) -> Var<'g, F> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, F> {
        let x = self.value();
        assert_eq!(numel(shape), x.len(), "reshape {:?} -> {shape:?}", x.shape());
        if x.shape() == shape {
            return self;
        }
        let src = x.shape().to_vec();
        let out = (*x).clone().reshape(shape.to_vec());
        self.unary(out, move |g| g.clone().reshape(src.clone()))
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g, F> {
        let out = kernels::permute(&self.value(), axes);
        let inv = kernels::inverse_permutation(axes);
        self.unary(out, move |g| kernels::permute(g, &inv))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, F> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = kernels::narrow(&x, axis, start, len);
        self.unary(out, move |g| {
            let mut dst = Tensor::zeros(shape.clone());
            kernels::narrow_backward(&mut dst, g, axis, start);
            dst
        })
    }

    /// 2-D convolution; `w` is `[cout, cin/groups, kh, kw]`, zero padding.
    pub fn conv2d(self, w: Var<'g, F>, bias: Option<Var<'g, F>>, stride: usize, pad: usize, groups: usize) -> Var<'g, F> {
        let (x, wv) = (self.value(), w.value());
        let geom = ConvGeom::new(x.shape(), wv.shape(), stride, pad, groups);
        let bv = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(&x, &wv, bv.as_deref(), &geom);
        let mut inputs = vec![self, w];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.graph.custom(
            &inputs,
            out,
            Box::new(move |g, needs| {
                let need_db = has_bias && needs.get(2).copied().unwrap_or(false);
                let (dx, dw, db) = kernels::conv2d_backward(&x, &wv, g, &geom, (needs[0], needs[1], need_db));
                let mut v = vec![dx, dw];
                if has_bias {
                    v.push(db);
                }
                v
            }),
        )
    }

    pub fn pixel_unshuffle(self, r: usize) -> Var<'g, F> {
        let out = kernels::pixel_unshuffle(&self.value(), r);
        self.unary(out, move |g| kernels::pixel_shuffle(g, r))
    }

    pub fn pixel_shuffle(self, r: usize) -> Var<'g, F> {
        let out = kernels::pixel_shuffle(&self.value(), r);
        self.unary(out, move |g| kernels::pixel_unshuffle(g, r))
    }

    pub fn upsample_nearest(self, r: usize) -> Var<'g, F> {
        if r == 1 {
            return self;
        }
        let out = kernels::upsample_nearest(&self.value(), r);
        self.unary(out, move |g| kernels::block_sum(g, r))
    }

    pub fn avg_pool(self, r: usize) -> Var<'g, F> {
        if r == 1 {
            return self;
        }
        let inv = F::of(1.0 / (r * r) as f64);
        let out = kernels::block_sum(&self.value(), r).map(|v| v * inv);
        self.unary(out, move |g| kernels::upsample_nearest(g, r).map(|v| v * inv))
    }

    /// Zero-mean, unit-variance along `axis` (population variance).
    pub fn normalize(self, axis: usize, eps: f64) -> Var<'g, F> {
        let (y, inv) = kernels::normalize_forward(&self.value(), axis, F::of(eps));
        let y = Arc::new(y);
        let yc = Arc::clone(&y);
        self.unary((*y).clone(), move |g| kernels::normalize_backward(&yc, &inv, g, axis))
    }

    pub fn softmax(self, axis: usize) -> Var<'g, F> {
        let y = Arc::new(kernels::softmax_forward(&self.value(), axis));
        let yc = Arc::clone(&y);
        self.unary((*y).clone(), move |g| kernels::softmax_backward(&yc, g, axis))
    }
}
