//! Weather-conditioning layers (concatenation, FiLM, cross-attention) and the
//! policy deciding at which backbone stages they act.
//!
//! All layers work pixelwise: features `x` are `[B, d, H, W]` and the weather
//! `c` is `[B, n_vars·n_feat, H, W]`, variable-major (the `n_feat` features of
//! variable `i` occupy channels `i·n_feat..(i+1)·n_feat`).

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{feature_norm, Conv2d, Ctx, Init, Mlp, LEAKY_SLOPE};
use crate::tensor::{Float, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cat,
    Film,
    Xattn,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Location {
    Early,
    Latent,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningConfig {
    pub method: Method,
    pub location: Location,
    /// Hidden width of the γ/β networks.
    pub hidden: usize,
    pub heads: usize,
}

impl ConditioningConfig {
    pub fn new(method: Method, location: Location) -> Self {
        Self { method, location, hidden: 32, heads: 2 }
    }

    pub fn none() -> Self {
        Self::new(Method::None, Location::Early)
    }

    /// Checks the layer can act on features of width `d`.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.method == Method::None {
            return Ok(());
        }
        ensure!(self.hidden > 0, "conditioning hidden width must be positive");
        if self.method == Method::Xattn {
            ensure!(self.heads > 0 && d % self.heads == 0, "{} heads do not divide feature width {d}", self.heads);
        }
        Ok(())
    }
}

/// Where in a backbone a conditioning layer may act.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Input,
    PostEncoder,
    PreDecoder,
    Block(usize),
}

/// early → input only; latent → post-encoder and pre-decoder; all → everywhere.
pub fn applies(location: Location, stage: Stage) -> bool {
    match location {
        Location::Early => stage == Stage::Input,
        Location::Latent => matches!(stage, Stage::PostEncoder | Stage::PreDecoder),
        Location::All => true,
    }
}

/// Linear projection of `[x; c]` back to width `d` (a 1×1 convolution).
#[derive(Clone, Debug)]
pub struct CatLayer {
    pub proj: Conv2d,
    pub d: usize,
    pub n_cond: usize,
}

impl CatLayer {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, d: usize, n_cond: usize, rng: &mut impl Rng) -> Self {
        Self { proj: Conv2d::new(store, &format!("{name}.proj"), d + n_cond, d, 1, Init::FanIn, rng), d, n_cond }
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>, c: Var<'g, F>) -> Var<'g, F> {
        self.proj.forward(cx, cx.graph.concat(&[x, c], 1))
    }
}

/// `x + LeakyReLU(γ(c) ⊙ N(f(x)) + β(c))` with zero-initialized final layers of γ and β.
#[derive(Clone, Debug)]
pub struct FilmLayer {
    pub f: Conv2d,
    pub gamma: Mlp,
    pub beta: Mlp,
}

impl FilmLayer {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        n_cond: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            f: Conv2d::new(store, &format!("{name}.f"), d, d, 1, Init::FanIn, rng),
            gamma: Mlp::new(store, &format!("{name}.gamma"), n_cond, hidden, d, Init::Zeros, rng),
            beta: Mlp::new(store, &format!("{name}.beta"), n_cond, hidden, d, Init::Zeros, rng),
        }
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>, c: Var<'g, F>) -> Var<'g, F> {
        let modulated = self.gamma.forward(cx, c).mul(feature_norm(self.f.forward(cx, x))).add(self.beta.forward(cx, c));
        x.add(modulated.leaky_relu(LEAKY_SLOPE))
    }
}

/// Pixelwise multi-head cross-attention: `x` is the single query token, each
/// weather variable one key/value token. `x + f(N(MHA(Q(x), K(c), V(c))))`.
#[derive(Clone, Debug)]
pub struct XattnLayer {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub f: Conv2d,
    pub heads: usize,
    pub d: usize,
    pub n_feat: usize,
}

impl XattnLayer {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        n_feat: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        ensure!(heads > 0 && d % heads == 0, "{heads} heads do not divide feature width {d}");
        Ok(Self {
            q: Conv2d::new(store, &format!("{name}.q"), d, d, 1, Init::FanIn, rng),
            k: Conv2d::new(store, &format!("{name}.k"), n_feat, d, 1, Init::FanIn, rng),
            v: Conv2d::new(store, &format!("{name}.v"), n_feat, d, 1, Init::FanIn, rng),
            f: Conv2d::new(store, &format!("{name}.f"), d, d, 1, Init::Zeros, rng),
            heads,
            d,
            n_feat,
        })
    }

    /// Attention output before `N` and `f`, `[B, d, H, W]`.
    pub fn attend<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>, c: Var<'g, F>) -> Var<'g, F> {
        let (b, nc, h, w) = c.dims4();
        assert_eq!(nc % self.n_feat, 0, "weather width {nc} is not a multiple of {}", self.n_feat);
        let n_vars = nc / self.n_feat;
        let (hd, dh, hw) = (self.heads, self.d / self.heads, h * w);
        let q = self.q.forward(cx, x).reshape(&[b, 1, hd, dh, hw]);
        let tokens = c.reshape(&[b * n_vars, self.n_feat, h, w]);
        let k = self.k.forward(cx, tokens).reshape(&[b, n_vars, hd, dh, hw]);
        let v = self.v.forward(cx, tokens).reshape(&[b, n_vars, hd, dh, hw]);
        let scores = q.mul_bc(k).sum_axis(3).scale(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax(1);
        attn.mul_bc(v).sum_axis(1).reshape(&[b, self.d, h, w])
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>, c: Var<'g, F>) -> Var<'g, F> {
        let a = self.attend(cx, x, c);
        x.add(self.f.forward(cx, feature_norm(a)))
    }
}

#[derive(Clone, Debug)]
pub enum CondLayer {
    Cat(CatLayer),
    Film(FilmLayer),
    Xattn(XattnLayer),
}

impl CondLayer {
    /// `None` for [`Method::None`].
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        config: &ConditioningConfig,
        d: usize,
        n_vars: usize,
        n_feat: usize,
        rng: &mut impl Rng,
    ) -> Result<Option<Self>> {
        config.validate(d)?;
        Ok(match config.method {
            Method::None => None,
            Method::Cat => Some(Self::Cat(CatLayer::new(store, name, d, n_vars * n_feat, rng))),
            Method::Film => Some(Self::Film(FilmLayer::new(store, name, d, n_vars * n_feat, config.hidden, rng))),
            Method::Xattn => Some(Self::Xattn(XattnLayer::new(store, name, d, n_feat, config.heads, rng)?)),
        })
    }

    pub fn forward<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>, c: Var<'g, F>) -> Var<'g, F> {
        match self {
            CondLayer::Cat(l) => l.forward(cx, x, c),
            CondLayer::Film(l) => l.forward(cx, x, c),
            CondLayer::Xattn(l) => l.forward(cx, x, c),
        }
    }
}

/// One stage a backbone exposes: its feature width and the weather features per variable.
#[derive(Clone, Copy, Debug)]
pub struct StageSpec {
    pub stage: Stage,
    pub width: usize,
    pub n_feat: usize,
}

/// The conditioning layers of one model, keyed by stage.
#[derive(Debug)]
pub struct Fusion {
    pub config: ConditioningConfig,
    pub n_vars: usize,
    layers: Vec<(Stage, Option<CondLayer>)>,
    applications: AtomicUsize,
}

impl Clone for Fusion {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            n_vars: self.n_vars,
            layers: self.layers.clone(),
            applications: AtomicUsize::new(self.applications.load(Ordering::Relaxed)),
        }
    }
}

impl Fusion {
    /// Builds a layer (with its own parameters) for each stage the location policy selects.
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        config: ConditioningConfig,
        n_vars: usize,
        stages: &[StageSpec],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(stages.len());
        for s in stages {
            let layer = if applies(config.location, s.stage) {
                let tag = match s.stage {
                    Stage::Input => "input".to_string(),
                    Stage::PostEncoder => "post_encoder".to_string(),
                    Stage::PreDecoder => "pre_decoder".to_string(),
                    Stage::Block(i) => format!("block{i}"),
                };
                CondLayer::new(store, &format!("{name}.{tag}"), &config, s.width, n_vars, s.n_feat, rng)?
            } else {
                None
            };
            layers.push((s.stage, layer));
        }
        Ok(Self { config, n_vars, layers, applications: AtomicUsize::new(0) })
    }

    pub fn stages(&self) -> impl Iterator<Item = Stage> + '_ {
        self.layers.iter().map(|(s, _)| *s)
    }

    pub fn is_active(&self, stage: Stage) -> bool {
        self.layers.iter().any(|(s, l)| *s == stage && l.is_some())
    }

    /// Applies the stage's layer if the policy selects it, else returns `x`.
    pub fn fuse<'g, F: Float>(&self, cx: &Ctx<'g, F>, stage: Stage, x: Var<'g, F>, c: Var<'g, F>) -> Result<Var<'g, F>> {
        let (_, layer) = self
            .layers
            .iter()
            .find(|(s, _)| *s == stage)
            .ok_or_else(|| Error::Contract(format!("stage {stage:?} is not part of this backbone")))?;
        match layer {
            None => Ok(x),
            Some(l) => {
                self.applications.fetch_add(1, Ordering::Relaxed);
                Ok(l.forward(cx, x, c))
            }
        }
    }

    /// How many times a conditioning layer has been applied.
    pub fn applications(&self) -> usize {
        self.applications.load(Ordering::Relaxed)
    }

    pub fn reset_counter(&self) {
        self.applications.store(0, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_t(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn randomize(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(-0.7..0.7);
            }
        }
    }

    #[test]
    fn cat_with_identity_block_returns_x() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let layer = CatLayer::new(&mut store, "cat", 3, 4, &mut r);
        let w = Tensor::from_fn(vec![3, 7, 1, 1], |i| if i / 7 == i % 7 { 1.0 } else { 0.0 });
        store.set(layer.proj.weight, w);
        store.set(layer.proj.bias.unwrap(), Tensor::zeros(vec![3]));
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let x = rand_t(&[2, 3, 2, 2], &mut r);
        let y = layer.forward(&cx, g.constant(x.clone()), g.constant(rand_t(&[2, 4, 2, 2], &mut r)));
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn cat_matches_dense_matmul() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let layer = CatLayer::new(&mut store, "cat", 3, 4, &mut r);
        randomize(&mut store, &mut r);
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let x = rand_t(&[1, 3, 2, 1], &mut r);
        let c = rand_t(&[1, 4, 2, 1], &mut r);
        let y = layer.forward(&cx, g.constant(x.clone()), g.constant(c.clone())).value();
        let wt = store.get(layer.proj.weight);
        let bias = store.get(layer.proj.bias.unwrap());
        for p in 0..2 {
            let z: Vec<f64> = (0..3).map(|i| x.at(&[0, i, p, 0])).chain((0..4).map(|i| c.at(&[0, i, p, 0]))).collect();
            for o in 0..3 {
                let e: f64 = bias.data()[o] + (0..7).map(|i| wt.at(&[o, i, 0, 0]) * z[i]).sum::<f64>();
                assert_abs_diff_eq!(y.at(&[0, o, p, 0]), e, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_initialized_film_and_xattn_are_identities() {
        let mut r = rng();
        let mut store = ParamStore::<f32>::new();
        let film = FilmLayer::new(&mut store, "film", 4, 6, 5, &mut r);
        let xattn = XattnLayer::new(&mut store, "xattn", 4, 2, 2, &mut r).unwrap();
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        let x = Tensor::from_fn(vec![2, 4, 3, 3], |i| (i as f32 * 0.37).sin());
        let c = g.constant(Tensor::from_fn(vec![2, 6, 3, 3], |i| (i as f32 * 0.11).cos()));
        let xv = g.constant(x.clone());
        assert_eq!(*film.forward(&cx, xv, c).value(), x);
        let y = xattn.forward(&cx, xv, c);
        assert_eq!(*y.value(), x);
        // Gradients still reach the zero-initialized output layers.
        let grads = g.backward(y.square().sum_all());
        let gf = grads.param(xattn.f.weight).unwrap();
        assert!(gf.max_abs() > 0.0);
    }

    #[test]
    fn film_with_zero_gamma_adds_activated_beta() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let film = FilmLayer::new(&mut store, "film", 2, 3, 4, &mut r);
        // β's last layer: zero weights, bias b.
        store.set(film.beta.out.bias.unwrap(), Tensor::from_f64(vec![2], &[0.5, -2.0]));
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let x = rand_t(&[1, 2, 2, 2], &mut r);
        let y = film.forward(&cx, g.constant(x.clone()), g.constant(rand_t(&[1, 3, 2, 2], &mut r))).value();
        for i in 0..8 {
            let b = if i < 4 { 0.5 } else { -2.0 * LEAKY_SLOPE };
            assert_abs_diff_eq!(y.data()[i], x.data()[i] + b, epsilon = 1e-12);
        }
    }

    #[test]
    fn film_without_gamma_is_representable_by_cat_plus_residual() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let film = FilmLayer::new(&mut store, "film", 2, 3, 4, &mut r);
        // Positive weights and inputs keep every LeakyReLU in its linear branch.
        for conv in [&film.beta.hidden, &film.beta.out] {
            store.set(conv.weight, Tensor::from_fn(store.get(conv.weight).shape().to_vec(), |i| 0.1 + (i % 5) as f64 * 0.05));
            let nb = store.get(conv.bias.unwrap()).len();
            store.set(conv.bias.unwrap(), Tensor::from_fn(vec![nb], |i| 0.01 * (i + 1) as f64));
        }
        let w1 = (**store.get(film.beta.hidden.weight)).clone().reshape(vec![4, 3]);
        let b1 = store.get(film.beta.hidden.bias.unwrap()).clone();
        let w2 = (**store.get(film.beta.out.weight)).clone().reshape(vec![2, 4]);
        let b2 = store.get(film.beta.out.bias.unwrap()).clone();
        let mut cat_store = ParamStore::<f64>::new();
        let cat = CatLayer::new(&mut cat_store, "cat", 2, 3, &mut r);
        let mut wc = Tensor::zeros(vec![2, 5, 1, 1]);
        let mut bc = Tensor::zeros(vec![2]);
        for o in 0..2 {
            for j in 0..3 {
                let v: f64 = (0..4).map(|k| w2.at(&[o, k]) * w1.at(&[k, j])).sum();
                wc.set(&[o, 2 + j, 0, 0], v);
            }
            let v: f64 = b2.data()[o] + (0..4).map(|k| w2.at(&[o, k]) * b1.data()[k]).sum::<f64>();
            bc.set(&[o], v);
        }
        cat_store.set(cat.proj.weight, wc);
        cat_store.set(cat.proj.bias.unwrap(), bc);
        let x = rand_t(&[1, 2, 3, 3], &mut r);
        let c = Tensor::from_fn(vec![1, 3, 3, 3], |_| r.random_range(0.0..1.0));
        let g = Graph::inference();
        let yf = film.forward(&Ctx::new(&g, &store), g.constant(x.clone()), g.constant(c.clone())).value();
        let g2 = Graph::inference();
        let yc = cat.forward(&Ctx::new(&g2, &cat_store), g2.constant(x.clone()), g2.constant(c)).value();
        for i in 0..x.len() {
            assert_abs_diff_eq!(yf.data()[i], x.data()[i] + yc.data()[i], epsilon = 1e-6);
        }
    }

    #[test]
    fn single_token_attention_weight_is_one() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let layer = XattnLayer::new(&mut store, "xa", 4, 3, 1, &mut r).unwrap();
        randomize(&mut store, &mut r);
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(rand_t(&[1, 4, 2, 2], &mut r));
        let c = g.constant(rand_t(&[1, 3, 2, 2], &mut r));
        let got = layer.forward(&cx, x, c).value();
        let v = layer.v.forward(&cx, c);
        let expect = x.add(layer.f.forward(&cx, feature_norm(v))).value();
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn duplicated_tokens_do_not_change_attention() {
        let mut r = rng();
        let mut store = ParamStore::<f64>::new();
        let layer = XattnLayer::new(&mut store, "xa", 4, 2, 2, &mut r).unwrap();
        randomize(&mut store, &mut r);
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(rand_t(&[1, 4, 2, 2], &mut r));
        let one = rand_t(&[1, 2, 2, 2], &mut r);
        let two = Tensor::concat(&[&one, &one], 1);
        let a = layer.forward(&cx, x, g.constant(one)).value();
        let b = layer.forward(&cx, x, g.constant(two)).value();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert_abs_diff_eq!(*p, *q, epsilon = 1e-12);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f32>::new();
        assert!(XattnLayer::new(&mut store, "xa", 6, 2, 4, &mut rng()).is_err());
        let mut cfg = ConditioningConfig::new(Method::Xattn, Location::All);
        cfg.heads = 5;
        assert!(cfg.validate(8).is_err());
    }

    fn stages() -> Vec<StageSpec> {
        [Stage::Input, Stage::PostEncoder, Stage::Block(0), Stage::Block(1), Stage::PreDecoder]
            .into_iter()
            .map(|stage| StageSpec { stage, width: 4, n_feat: 2 })
            .collect()
    }

    fn run_all_stages(location: Location, method: Method) -> (usize, bool) {
        let mut store = ParamStore::<f32>::new();
        let fusion = Fusion::new(&mut store, "fuse", ConditioningConfig::new(method, location), 3, &stages(), &mut rng()).unwrap();
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::from_fn(vec![1, 4, 2, 2], |i| i as f32 * 0.1));
        let c = g.constant(Tensor::from_fn(vec![1, 6, 2, 2], |i| i as f32 * 0.05));
        let mut unchanged = true;
        for s in fusion.stages().collect::<Vec<_>>() {
            let y = fusion.fuse(&cx, s, x, c).unwrap();
            unchanged &= *y.value() == *x.value();
        }
        (fusion.applications(), unchanged)
    }

    #[test]
    fn fusion_policy_counts() {
        assert_eq!(run_all_stages(Location::All, Method::Cat).0, 5);
        assert_eq!(run_all_stages(Location::Latent, Method::Film).0, 2);
        assert_eq!(run_all_stages(Location::Early, Method::Xattn).0, 1);
        let (n, unchanged) = run_all_stages(Location::All, Method::None);
        assert_eq!(n, 0);
        assert!(unchanged);
    }

    #[test]
    fn early_fusion_skips_post_encoder_and_unknown_stage_errors() {
        let mut store = ParamStore::<f32>::new();
        let fusion = Fusion::new(
            &mut store,
            "fuse",
            ConditioningConfig::new(Method::Cat, Location::Early),
            3,
            &stages(),
            &mut rng(),
        )
        .unwrap();
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let x = g.constant(Tensor::from_fn(vec![1, 4, 2, 2], |i| i as f32));
        let c = g.constant(Tensor::zeros(vec![1, 6, 2, 2]));
        assert_eq!(*fusion.fuse(&cx, Stage::PostEncoder, x, c).unwrap().value(), *x.value());
        assert!(fusion.fuse(&cx, Stage::Block(7), x, c).is_err());
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        use crate::gradcheck::{check_gradients, randomize_params};
        let mut r = rng();
        for method in [Method::Cat, Method::Film, Method::Xattn] {
            let mut worst: f64 = 0.0;
            for _ in 0..50 {
                let mut store = ParamStore::<f64>::new();
                let mut cfg = ConditioningConfig::new(method, Location::All);
                cfg.hidden = 5;
                let layer = CondLayer::new(&mut store, "l", &cfg, 4, 3, 2, &mut r).unwrap().unwrap();
                randomize_params(&mut store, 0.6, &mut r);
                let x = rand_t(&[1, 4, 2, 2], &mut r);
                let c = rand_t(&[1, 6, 2, 2], &mut r);
                let rep = check_gradients(&store, &[x, c], |cx, v| layer.forward(cx, v[0], v[1]), 12, &mut r);
                worst = worst.max(rep.max_rel_error);
            }
            assert!(worst <= 1e-4, "{method:?}: {worst}");
        }
    }
}
