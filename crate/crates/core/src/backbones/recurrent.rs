use rand::Rng;

use crate::nn::{Conv2d, Ctx, Init};
use crate::tensor::{Float, ParamStore, Tensor, Var};

const FORGET_BIAS: f64 = 1.0;

/// Recurrent state `[B, d, H, W]` per map; `m` only for ST-LSTM cells.
#[derive(Clone, Copy)]
pub struct CellState<'g, F: Float> {
    pub h: Var<'g, F>,
    pub c: Var<'g, F>,
    pub m: Option<Var<'g, F>>,
}

impl<'g, F: Float> CellState<'g, F> {
    pub fn zeros(cx: &Ctx<'g, F>, b: usize, d: usize, h: usize, w: usize, with_m: bool) -> Self {
        let z = || cx.graph.constant(Tensor::zeros(vec![b, d, h, w]));
        Self { h: z(), c: z(), m: with_m.then(z) }
    }
}

fn set_forget_bias<F: Float>(store: &mut ParamStore<F>, conv: &Conv2d, gate: usize, d: usize) {
    let bias = store.value_mut(conv.bias.expect("gate conv has a bias"));
    for v in &mut bias.data_mut()[gate * d..(gate + 1) * d] {
        *v += F::of(FORGET_BIAS);
    }
}

/// `[i, f, g, o]` gates from one convolution over `[x; h]`.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub gates: Conv2d,
    pub hidden: usize,
}

impl ConvLstmCell {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let gates = Conv2d::new(store, &format!("{name}.gates"), cin + hidden, 4 * hidden, kernel, Init::FanIn, rng);
        set_forget_bias(store, &gates, 1, hidden);
        Self { gates, hidden }
    }

    /// One step; returns the new state (its `h` is the output).
    pub fn step<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>, state: CellState<'g, F>) -> CellState<'g, F> {
        let d = self.hidden;
        let z = self.gates.forward(cx, cx.graph.concat(&[x, state.h], 1));
        let i = z.narrow(1, 0, d).sigmoid();
        let f = z.narrow(1, d, d).sigmoid();
        let g = z.narrow(1, 2 * d, d).tanh();
        let o = z.narrow(1, 3 * d, d).sigmoid();
        let c = f.mul(state.c).add(i.mul(g));
        CellState { h: o.mul(c.tanh()), c, m: None }
    }
}

/// Functional form of [`ConvLstmCell::step`]; the weather must already be fused into `x`.
pub fn convlstm_step<'g, F: Float>(
    cell: &ConvLstmCell,
    cx: &Ctx<'g, F>,
    x: Var<'g, F>,
    state: CellState<'g, F>,
) -> (Var<'g, F>, CellState<'g, F>) {
    let s = cell.step(cx, x, state);
    (s.h, s)
}

/// Spatiotemporal LSTM cell with a temporal memory `c` and a spatiotemporal memory `m`.
#[derive(Clone, Debug)]
pub struct StLstmCell {
    /// `x → [i, f, g, i', f', g', o]`
    pub conv_x: Conv2d,
    /// `h → [i, f, g, o]`
    pub conv_h: Conv2d,
    /// `m → [i', f', g']`
    pub conv_m: Conv2d,
    /// `[c'; m'] → o` contribution
    pub conv_o: Conv2d,
    /// `[c'; m'] → h` (1×1)
    pub conv_last: Conv2d,
    pub hidden: usize,
}

pub struct StLstmOutput<'g, F: Float> {
    pub state: CellState<'g, F>,
    pub delta_c: Var<'g, F>,
    pub delta_m: Var<'g, F>,
}

impl StLstmCell {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        hidden: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let d = hidden;
        let conv_x = Conv2d::new(store, &format!("{name}.conv_x"), cin, 7 * d, kernel, Init::FanIn, rng);
        let conv_h = Conv2d::new(store, &format!("{name}.conv_h"), d, 4 * d, kernel, Init::FanIn, rng);
        let conv_m = Conv2d::new(store, &format!("{name}.conv_m"), d, 3 * d, kernel, Init::FanIn, rng);
        let conv_o = Conv2d::new(store, &format!("{name}.conv_o"), 2 * d, d, kernel, Init::FanIn, rng);
        let conv_last = Conv2d::new(store, &format!("{name}.conv_last"), 2 * d, d, 1, Init::FanIn, rng);
        set_forget_bias(store, &conv_x, 1, d);
        set_forget_bias(store, &conv_x, 4, d);
        Self { conv_x, conv_h, conv_m, conv_o, conv_last, hidden }
    }

    pub fn step<'g, F: Float>(&self, cx: &Ctx<'g, F>, x: Var<'g, F>, state: CellState<'g, F>) -> StLstmOutput<'g, F> {
        let d = self.hidden;
        let m = state.m.expect("ST-LSTM state carries m");
        let zx = self.conv_x.forward(cx, x);
        let zh = self.conv_h.forward(cx, state.h);
        let zm = self.conv_m.forward(cx, m);
        let gx = |k: usize| zx.narrow(1, k * d, d);
        let i = gx(0).add(zh.narrow(1, 0, d)).sigmoid();
        let f = gx(1).add(zh.narrow(1, d, d)).sigmoid();
        let g = gx(2).add(zh.narrow(1, 2 * d, d)).tanh();
        let delta_c = i.mul(g);
        let c = f.mul(state.c).add(delta_c);
        let i2 = gx(3).add(zm.narrow(1, 0, d)).sigmoid();
        let f2 = gx(4).add(zm.narrow(1, d, d)).sigmoid();
        let g2 = gx(5).add(zm.narrow(1, 2 * d, d)).tanh();
        let delta_m = i2.mul(g2);
        let m = f2.mul(m).add(delta_m);
        let mem = cx.graph.concat(&[c, m], 1);
        let o = gx(6).add(zh.narrow(1, 3 * d, d)).add(self.conv_o.forward(cx, mem)).sigmoid();
        let h = o.mul(self.conv_last.forward(cx, mem).tanh());
        StLstmOutput { state: CellState { h, c, m: Some(m) }, delta_c, delta_m }
    }
}

/// Mean over (batch, channel) of `|cos|` between the spatial maps of two increments `[B, C, H, W]`.
pub fn decouple_penalty<'g, F: Float>(delta_c: Var<'g, F>, delta_m: Var<'g, F>) -> Var<'g, F> {
    let (b, ch, h, w) = delta_c.dims4();
    let a = delta_c.reshape(&[b, ch, h * w]);
    let m = delta_m.reshape(&[b, ch, h * w]);
    let dot = a.mul(m).sum_axis(2);
    let na = a.square().sum_axis(2).add_scalar(1e-12).sqrt();
    let nm = m.square().sum_axis(2).add_scalar(1e-12).sqrt();
    dot.div(na.mul(nm)).abs().mean_all()
}

/// ST-LSTM cells stacked with residual `h` between consecutive cells and `m`
/// passed upward within a step and from the top cell to the bottom one across steps.
#[derive(Clone, Debug)]
pub struct StLstmStack {
    pub cells: Vec<StLstmCell>,
}

pub struct StackStep<'g, F: Float> {
    pub top: Var<'g, F>,
    pub states: Vec<CellState<'g, F>>,
    /// Spatiotemporal memory leaving the top cell; enters cell 0 at the next step.
    pub m: Var<'g, F>,
    /// Mean decouple penalty over cells.
    pub penalty: Var<'g, F>,
}

impl StLstmStack {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        hidden: usize,
        layers: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let cells = (0..layers)
            .map(|l| StLstmCell::new(store, &format!("{name}.cell{l}"), if l == 0 { cin } else { hidden }, hidden, kernel, rng))
            .collect();
        Self { cells }
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden
    }

    /// `states` holds `(h, c)` per cell; `m` is the memory entering cell 0.
    pub fn step<'g, F: Float>(
        &self,
        cx: &Ctx<'g, F>,
        x: Var<'g, F>,
        states: &[CellState<'g, F>],
        m: Var<'g, F>,
    ) -> StackStep<'g, F> {
        let mut input = x;
        let mut m = m;
        let mut out_states = Vec::with_capacity(self.cells.len());
        let mut penalty: Option<Var<'g, F>> = None;
        for (l, cell) in self.cells.iter().enumerate() {
            let st = CellState { h: states[l].h, c: states[l].c, m: Some(m) };
            let o = cell.step(cx, input, st);
            let p = decouple_penalty(o.delta_c, o.delta_m);
            penalty = Some(penalty.map_or(p, |acc| acc.add(p)));
            m = o.state.m.expect("ST-LSTM output carries m");
            let h = if l == 0 { o.state.h } else { o.state.h.add(input) };
            out_states.push(CellState { h: o.state.h, c: o.state.c, m: None });
            input = h;
        }
        let penalty = penalty.expect("stack has cells").scale(1.0 / self.cells.len() as f64);
        StackStep { top: input, states: out_states, m, penalty }
    }
}
