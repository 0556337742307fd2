//! Central finite-difference gradient checks in `f64`.

use rand::seq::index::sample;
use rand::Rng;

use crate::nn::Ctx;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

const STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked tensors.
    pub max_rel_error: f64,
    /// Name of the tensor with the largest error.
    pub worst: String,
    pub checked_entries: usize,
}

/// Gradient norms below this are treated as zero (finite-difference noise is ~1e-10).
pub const GRAD_FLOOR: f64 = 1e-5;
/// Tensors whose gradient norm is below this fraction of the largest one are
/// compared against that fraction instead of their own (vanishing) norm.
pub const GRAD_FLOOR_RELATIVE: f64 = 1e-4;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(floor)
}

/// Compares backprop against finite differences of `Σ R ⊙ build(params, inputs)`
/// with a fixed random `R`. At most `max_entries` coordinates per tensor are
/// perturbed (sampled without replacement).
pub fn check_gradients<B>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    build: B,
    max_entries: usize,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    B: for<'g> Fn(&Ctx<'g, f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let loss = |store: &ParamStore<f64>, inputs: &[Tensor<f64>], r: &Tensor<f64>| -> f64 {
        let g = Graph::inference();
        let cx = Ctx::new(&g, store);
        let vars: Vec<_> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&cx, &vars).value();
        out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let g = Graph::new();
    let cx = Ctx::new(&g, store);
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&cx, &vars);
    let r = Tensor::from_fn(out.shape(), |_| rng.random_range(-1.0..1.0));
    let grads = g.backward(out.mul(g.constant(r.clone())).sum_all());

    let mut checked: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut record = |name: String, a: Vec<f64>, n: Vec<f64>| checked.push((name, a, n));

    let mut scratch = store.clone();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).len();
        let picks = sample(rng, n, n.min(max_entries)).into_vec();
        let zeros = Tensor::zeros(store.get(id).shape().to_vec());
        let ga = grads.param(id).unwrap_or(&zeros);
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for i in picks {
            let orig = store.get(id).data()[i];
            scratch.value_mut(id).data_mut()[i] = orig + STEP;
            let up = loss(&scratch, inputs, &r);
            scratch.value_mut(id).data_mut()[i] = orig - STEP;
            let down = loss(&scratch, inputs, &r);
            scratch.value_mut(id).data_mut()[i] = orig;
            a.push(ga.data()[i]);
            num.push((up - down) / (2.0 * STEP));
        }
        record(store.name(id).to_string(), a, num);
    }

    for (k, v) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let picks = sample(rng, n, n.min(max_entries)).into_vec();
        let zeros = Tensor::zeros(inputs[k].shape().to_vec());
        let ga = grads.wrt(v).unwrap_or(&zeros);
        let mut perturbed = inputs.to_vec();
        let (mut a, mut num) = (Vec::new(), Vec::new());
        for i in picks {
            let orig = inputs[k].data()[i];
            perturbed[k].data_mut()[i] = orig + STEP;
            let up = loss(store, &perturbed, &r);
            perturbed[k].data_mut()[i] = orig - STEP;
            let down = loss(store, &perturbed, &r);
            perturbed[k].data_mut()[i] = orig;
            a.push(ga.data()[i]);
            num.push((up - down) / (2.0 * STEP));
        }
        record(format!("input{k}"), a, num);
    }
    let largest = checked.iter().map(|(_, a, n)| norm(a).max(norm(n))).fold(0.0, f64::max);
    let floor = GRAD_FLOOR.max(GRAD_FLOOR_RELATIVE * largest);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: String::new(), checked_entries: 0 };
    for (name, a, n) in checked {
        let e = relative_error(&a, &n, floor);
        report.checked_entries += a.len();
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = name;
        }
    }
    report
}

/// Overwrites every parameter with `U(-scale, scale)`, including zero-initialized ones.
pub fn randomize_params(store: &mut ParamStore<f64>, scale: f64, rng: &mut impl Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}
