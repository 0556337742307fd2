//! Family-specific networks and their K-step rollouts.

use rand::Rng;

use super::batch::{Batch, FRAME_CHANNELS};
use super::config::{Family, ModelConfig};
use crate::backbones::{
    gsta_translate, unet_forward, CellState, ConvLstmCell, Decoder, Encoder, GstaTranslator, StLstmStack, UNet,
};
use crate::conditioning::{ConditioningConfig, Fusion, Method, Stage, StageSpec};
use crate::error::{ensure, Result};
use crate::nn::{Conv2d, Ctx, Init};
use crate::tensor::{ParamStore, Tensor, Var};

/// Statistics per variable and step (min, mean, max, std).
pub const STATS_PER_STEP: usize = 4;

pub struct RolloutOutput<'g> {
    /// `[B, K, H, W]`, unclipped.
    pub pred: Var<'g, f32>,
    /// Decoupling penalty (ST-LSTM only), unweighted.
    pub penalty: Option<Var<'g, f32>>,
}

/// Graph constants for one batch.
pub struct Inputs<'g> {
    pub frames: Vec<Var<'g, f32>>,
    pub weather: Vec<Var<'g, f32>>,
    pub elevation: Var<'g, f32>,
    pub batch: &'g Batch,
}

impl<'g> Inputs<'g> {
    pub fn new(cx: &Ctx<'g, f32>, batch: &'g Batch) -> Self {
        let s = batch.steps();
        Self {
            frames: (0..s).map(|t| cx.graph.constant(batch.frame(t))).collect(),
            weather: (0..s).map(|t| cx.graph.constant(batch.weather_at(t))).collect(),
            elevation: cx.graph.constant(batch.elevation()),
            batch,
        }
    }

    /// Frame built from a prediction: `[ŷ, 0, 0, 1, elevation]`.
    pub fn fed_back(&self, cx: &Ctx<'g, f32>, pred: Var<'g, f32>) -> Var<'g, f32> {
        let (b, _, h, w) = pred.dims4();
        let zeros = cx.graph.constant(Tensor::zeros(vec![b, 2, h, w]));
        let ones = cx.graph.constant(Tensor::ones(vec![b, 1, h, w]));
        cx.graph.concat(&[pred, zeros, ones, self.elevation], 1)
    }
}

fn fusion_or_none(
    store: &mut ParamStore<f32>,
    cfg: &ConditioningConfig,
    n_vars: usize,
    stages: &[StageSpec],
    rng: &mut impl Rng,
) -> Result<Option<Fusion>> {
    if cfg.method == Method::None {
        return Ok(None);
    }
    let f = Fusion::new(store, "cond", *cfg, n_vars, stages, rng)?;
    ensure!(
        f.stages().any(|s| f.is_active(s)),
        "conditioning location {:?} selects no stage of this backbone",
        cfg.location
    );
    Ok(Some(f))
}

fn fuse<'g>(
    fusion: &Option<Fusion>,
    cx: &Ctx<'g, f32>,
    stage: Stage,
    x: Var<'g, f32>,
    c: Var<'g, f32>,
) -> Result<Var<'g, f32>> {
    match fusion {
        Some(f) => f.fuse(cx, stage, x, c),
        None => Ok(x),
    }
}

/// Encoding-forecasting ConvLSTM (kernel 1 gives the per-pixel LSTM).
#[derive(Clone, Debug)]
pub struct ConvLstmNet {
    pub stem: Conv2d,
    pub fusion: Option<Fusion>,
    pub context: Vec<ConvLstmCell>,
    pub forecast: Vec<ConvLstmCell>,
    pub head: Conv2d,
}

impl ConvLstmNet {
    fn new(store: &mut ParamStore<f32>, cfg: &ModelConfig, n_vars: usize, rng: &mut impl Rng) -> Result<Self> {
        let (d, k) = (cfg.encdec.hidden, cfg.encdec.kernel);
        let stem = Conv2d::new(store, "stem", FRAME_CHANNELS, d, 1, Init::FanIn, rng);
        let fusion = fusion_or_none(
            store,
            &cfg.effective_conditioning(),
            n_vars,
            &[StageSpec { stage: Stage::Input, width: d, n_feat: STATS_PER_STEP }],
            rng,
        )?;
        let cells = |store: &mut ParamStore<f32>, name: &str, rng: &mut _| {
            (0..cfg.layers).map(|l| ConvLstmCell::new(store, &format!("{name}.cell{l}"), d, d, k, rng)).collect::<Vec<_>>()
        };
        let context = cells(store, "context", rng);
        let forecast = cells(store, "forecast", rng);
        let head = Conv2d::new(store, "head", d, 1, 1, Init::FanIn, rng);
        Ok(Self { stem, fusion, context, forecast, head })
    }

    fn embed<'g>(&self, cx: &Ctx<'g, f32>, frame: Var<'g, f32>, w: Var<'g, f32>) -> Result<Var<'g, f32>> {
        fuse(&self.fusion, cx, Stage::Input, self.stem.forward(cx, frame), w)
    }

    fn run_cells<'g>(
        cells: &[ConvLstmCell],
        cx: &Ctx<'g, f32>,
        x: Var<'g, f32>,
        states: &mut [CellState<'g, f32>],
    ) -> Var<'g, f32> {
        let mut input = x;
        for (cell, st) in cells.iter().zip(states.iter_mut()) {
            *st = cell.step(cx, input, *st);
            input = st.h;
        }
        input
    }

    fn rollout<'g>(&self, cx: &Ctx<'g, f32>, inp: &Inputs<'g>) -> Result<RolloutOutput<'g>> {
        let b = inp.batch;
        let (t, k) = (b.context_len, b.target_len);
        let d = self.context[0].hidden;
        let mut states = vec![CellState::zeros(cx, b.size(), d, b.height(), b.width(), false); self.context.len()];
        for step in 0..t {
            let x = self.embed(cx, inp.frames[step], inp.weather[step])?;
            Self::run_cells(&self.context, cx, x, &mut states);
        }
        let zero_frame = cx.graph.constant(Tensor::zeros(vec![b.size(), FRAME_CHANNELS, b.height(), b.width()]));
        let mut preds = Vec::with_capacity(k);
        for j in 0..k {
            let frame = if j == 0 { inp.frames[t - 1] } else { zero_frame };
            let x = self.embed(cx, frame, inp.weather[t + j])?;
            let h = Self::run_cells(&self.forecast, cx, x, &mut states);
            preds.push(self.head.forward(cx, h));
        }
        Ok(RolloutOutput { pred: cx.graph.concat(&preds, 1), penalty: None })
    }
}

/// Next-frame ST-LSTM stack between a per-frame encoder and decoder.
#[derive(Clone, Debug)]
pub struct PredRnnNet {
    pub fusion: Option<Fusion>,
    pub encoder: Encoder,
    pub stack: StLstmStack,
    pub decoder: Decoder,
    pub downsample: usize,
}

impl PredRnnNet {
    fn new(store: &mut ParamStore<f32>, cfg: &ModelConfig, n_vars: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.encdec.hidden;
        let fusion = fusion_or_none(
            store,
            &cfg.effective_conditioning(),
            n_vars,
            &[
                StageSpec { stage: Stage::Input, width: FRAME_CHANNELS, n_feat: STATS_PER_STEP },
                StageSpec { stage: Stage::PostEncoder, width: d, n_feat: STATS_PER_STEP },
                StageSpec { stage: Stage::PreDecoder, width: d, n_feat: STATS_PER_STEP },
            ],
            rng,
        )?;
        let encoder = Encoder::new(store, "encoder", FRAME_CHANNELS, cfg.encdec, rng)?;
        let stack = StLstmStack::new(store, "stlstm", d, d, cfg.layers, cfg.encdec.kernel, rng);
        let decoder = Decoder::new(store, "decoder", 1, cfg.encdec, rng)?;
        Ok(Self { fusion, encoder, stack, decoder, downsample: cfg.encdec.downsample })
    }

    /// `teacher[j]` feeds the true frame `T + j` instead of the prediction.
    fn rollout<'g>(&self, cx: &Ctx<'g, f32>, inp: &Inputs<'g>, teacher: Option<&[bool]>) -> Result<RolloutOutput<'g>> {
        let b = inp.batch;
        let (t, k) = (b.context_len, b.target_len);
        self.encoder.config.check_dims(b.height(), b.width())?;
        let d = self.stack.hidden();
        let (hl, wl) = (b.height() / self.downsample, b.width() / self.downsample);
        let mut states = vec![CellState::zeros(cx, b.size(), d, hl, wl, false); self.stack.cells.len()];
        let mut m = cx.graph.constant(Tensor::zeros(vec![b.size(), d, hl, wl]));
        let mut preds: Vec<Var<'g, f32>> = Vec::with_capacity(k);
        let mut penalty: Option<Var<'g, f32>> = None;
        for step in 0..t + k - 1 {
            let frame = if step < t || teacher.is_some_and(|tf| tf[step - t]) {
                inp.frames[step]
            } else {
                inp.fed_back(cx, preds[step - t])
            };
            let w = inp.weather[step + 1];
            let w_lat = w.avg_pool(self.downsample);
            let x = fuse(&self.fusion, cx, Stage::Input, frame, w)?;
            let enc = self.encoder.forward(cx, x)?;
            let z = fuse(&self.fusion, cx, Stage::PostEncoder, enc.latent, w_lat)?;
            let out = self.stack.step(cx, z, &states, m);
            states = out.states;
            m = out.m;
            penalty = Some(penalty.map_or(out.penalty, |p| p.add(out.penalty)));
            if step + 1 >= t {
                let z = fuse(&self.fusion, cx, Stage::PreDecoder, out.top, w_lat)?;
                preds.push(self.decoder.forward(cx, z, &enc.skips));
            }
        }
        let penalty = penalty.map(|p| p.scale(1.0 / (t + k - 1) as f64));
        Ok(RolloutOutput { pred: cx.graph.concat(&preds, 1), penalty })
    }
}

/// Single-shot translator over channel-stacked context latents.
#[derive(Clone, Debug)]
pub struct SimvpNet {
    pub fusion: Option<Fusion>,
    pub encoder: Encoder,
    pub translator: GstaTranslator,
    pub decoder: Decoder,
    pub downsample: usize,
}

impl SimvpNet {
    fn new(store: &mut ParamStore<f32>, cfg: &ModelConfig, n_vars: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.encdec.hidden;
        let s = cfg.context_len + cfg.target_len;
        let mut stages = vec![StageSpec { stage: Stage::PostEncoder, width: d, n_feat: STATS_PER_STEP }];
        stages.extend((0..cfg.translator_blocks).map(|i| StageSpec {
            stage: Stage::Block(i),
            width: cfg.translator_hidden,
            n_feat: STATS_PER_STEP * s,
        }));
        stages.push(StageSpec { stage: Stage::PreDecoder, width: d, n_feat: STATS_PER_STEP });
        let fusion = fusion_or_none(store, &cfg.effective_conditioning(), n_vars, &stages, rng)?;
        let encoder = Encoder::new(store, "encoder", FRAME_CHANNELS, cfg.encdec, rng)?;
        let translator = GstaTranslator::new(
            store,
            "translator",
            cfg.context_len,
            cfg.target_len,
            d,
            cfg.translator_hidden,
            cfg.translator_blocks,
            cfg.encdec.kernel,
            rng,
        );
        let decoder = Decoder::new(store, "decoder", 1, cfg.encdec, rng)?;
        Ok(Self { fusion, encoder, translator, decoder, downsample: cfg.encdec.downsample })
    }

    fn rollout<'g>(&self, cx: &Ctx<'g, f32>, inp: &Inputs<'g>) -> Result<RolloutOutput<'g>> {
        let b = inp.batch;
        let (bs, t, k, h, w) = (b.size(), b.context_len, b.target_len, b.height(), b.width());
        let d = self.translator.width;
        let nc = b.weather_features();
        let r = self.downsample;
        let g = cx.graph;
        // All context frames go through the encoder as one batch of B·T images.
        let frames = g.constant(b.frames.narrow(1, 0, t).reshape(vec![bs * t, FRAME_CHANNELS, h, w]));
        let enc = self.encoder.forward(cx, frames)?;
        let w_ctx = g.constant(b.weather.narrow(1, 0, t).reshape(vec![bs * t, nc, h, w])).avg_pool(r);
        let z = fuse(&self.fusion, cx, Stage::PostEncoder, enc.latent, w_ctx)?;
        let (hl, wl) = (h / r, w / r);
        let stack = z.reshape(&[bs, t * d, hl, wl]);
        let w_all = g.constant(b.weather_all()).avg_pool(r);
        let y = gsta_translate(&self.translator, cx, stack, self.fusion.as_ref().map(|f| (f, w_all)))?;
        let y = y.reshape(&[bs * k, d, hl, wl]);
        let w_tgt = g.constant(b.weather.narrow(1, t, k).reshape(vec![bs * k, nc, h, w])).avg_pool(r);
        let y = fuse(&self.fusion, cx, Stage::PreDecoder, y, w_tgt)?;
        // Skips of the last context frame, repeated for every target step.
        let skips: Vec<Var<'g, f32>> = enc
            .skips
            .iter()
            .map(|s| {
                let (_, c, hs, ws) = s.dims4();
                s.reshape(&[bs, t, c, hs, ws])
                    .narrow(1, t - 1, 1)
                    .broadcast_to(&[bs, k, c, hs, ws])
                    .reshape(&[bs * k, c, hs, ws])
            })
            .collect();
        let out = self.decoder.forward(cx, y, &skips);
        Ok(RolloutOutput { pred: out.reshape(&[bs, k, h, w]), penalty: None })
    }
}

/// UNet over the channel-stacked last `T` frames predicting one frame, rolled out autoregressively.
#[derive(Clone, Debug)]
pub struct UnetFrameNet {
    pub fusion: Option<Fusion>,
    pub unet: UNet,
}

impl UnetFrameNet {
    fn new(store: &mut ParamStore<f32>, cfg: &ModelConfig, n_vars: usize, rng: &mut impl Rng) -> Result<Self> {
        let e = &cfg.encdec;
        let cin = cfg.context_len * FRAME_CHANNELS;
        let unet = UNet::new(store, "unet", cin, 1, e.hidden, cfg.unet_depth, e.norm_groups, rng)?;
        let fusion = fusion_or_none(
            store,
            &cfg.effective_conditioning(),
            n_vars,
            &[
                StageSpec { stage: Stage::Input, width: cin, n_feat: STATS_PER_STEP },
                StageSpec { stage: Stage::PostEncoder, width: unet.bottleneck_width(), n_feat: STATS_PER_STEP },
            ],
            rng,
        )?;
        Ok(Self { fusion, unet })
    }

    /// One step: `window` `[B, T·5, H, W]`, weather of the predicted step.
    pub fn next_frame<'g>(&self, cx: &Ctx<'g, f32>, window: Var<'g, f32>, w: Var<'g, f32>) -> Result<Var<'g, f32>> {
        unet_forward(&self.unet, cx, window, self.fusion.as_ref().map(|f| (f, w)), false)
    }

    fn rollout<'g>(&self, cx: &Ctx<'g, f32>, inp: &Inputs<'g>, teacher: Option<&[bool]>) -> Result<RolloutOutput<'g>> {
        let b = inp.batch;
        let (t, k) = (b.context_len, b.target_len);
        let mut window: Vec<Var<'g, f32>> = inp.frames[..t].to_vec();
        let mut preds = Vec::with_capacity(k);
        for j in 0..k {
            let p = self.next_frame(cx, cx.graph.concat(&window, 1), inp.weather[t + j])?;
            let next = if teacher.is_some_and(|tf| tf[j]) { inp.frames[t + j] } else { inp.fed_back(cx, p) };
            window.remove(0);
            window.push(next);
            preds.push(p);
        }
        Ok(RolloutOutput { pred: cx.graph.concat(&preds, 1), penalty: None })
    }
}

/// UNet mapping the channel-stacked context straight to all `K` target frames.
#[derive(Clone, Debug)]
pub struct UnetCuboidNet {
    pub fusion: Option<Fusion>,
    pub unet: UNet,
}

impl UnetCuboidNet {
    fn new(store: &mut ParamStore<f32>, cfg: &ModelConfig, n_vars: usize, rng: &mut impl Rng) -> Result<Self> {
        let e = &cfg.encdec;
        let cin = cfg.context_len * FRAME_CHANNELS;
        let s = cfg.context_len + cfg.target_len;
        let unet = UNet::new(store, "unet", cin, cfg.target_len, e.hidden, cfg.unet_depth, e.norm_groups, rng)?;
        let fusion = fusion_or_none(
            store,
            &cfg.effective_conditioning(),
            n_vars,
            &[
                StageSpec { stage: Stage::Input, width: cin, n_feat: STATS_PER_STEP * s },
                StageSpec { stage: Stage::PostEncoder, width: unet.bottleneck_width(), n_feat: STATS_PER_STEP * s },
            ],
            rng,
        )?;
        Ok(Self { fusion, unet })
    }

    fn rollout<'g>(&self, cx: &Ctx<'g, f32>, inp: &Inputs<'g>) -> Result<RolloutOutput<'g>> {
        let b = inp.batch;
        let x = cx.graph.concat(&inp.frames[..b.context_len], 1);
        let w = cx.graph.constant(b.weather_all());
        let pred = unet_forward(&self.unet, cx, x, self.fusion.as_ref().map(|f| (f, w)), false)?;
        Ok(RolloutOutput { pred, penalty: None })
    }
}

#[derive(Clone, Debug)]
pub enum Net {
    ConvLstm(ConvLstmNet),
    PredRnn(PredRnnNet),
    Simvp(SimvpNet),
    UnetFrame(UnetFrameNet),
    UnetCuboid(UnetCuboidNet),
}

impl Net {
    pub fn new(store: &mut ParamStore<f32>, cfg: &ModelConfig, n_vars: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.family {
            Family::ConvlstmMeteo | Family::Lstm1x1 => Net::ConvLstm(ConvLstmNet::new(store, cfg, n_vars, rng)?),
            Family::PredrnnMeteo => Net::PredRnn(PredRnnNet::new(store, cfg, n_vars, rng)?),
            Family::SimvpMeteo => Net::Simvp(SimvpNet::new(store, cfg, n_vars, rng)?),
            Family::UnetNextFrame => Net::UnetFrame(UnetFrameNet::new(store, cfg, n_vars, rng)?),
            Family::UnetNextCuboid => Net::UnetCuboid(UnetCuboidNet::new(store, cfg, n_vars, rng)?),
        })
    }

    pub fn fusion(&self) -> Option<&Fusion> {
        match self {
            Net::ConvLstm(n) => n.fusion.as_ref(),
            Net::PredRnn(n) => n.fusion.as_ref(),
            Net::Simvp(n) => n.fusion.as_ref(),
            Net::UnetFrame(n) => n.fusion.as_ref(),
            Net::UnetCuboid(n) => n.fusion.as_ref(),
        }
    }

    pub fn rollout<'g>(&self, cx: &Ctx<'g, f32>, inp: &Inputs<'g>, teacher: Option<&[bool]>) -> Result<RolloutOutput<'g>> {
        match self {
            Net::ConvLstm(n) => n.rollout(cx, inp),
            Net::PredRnn(n) => n.rollout(cx, inp, teacher),
            Net::Simvp(n) => n.rollout(cx, inp),
            Net::UnetFrame(n) => n.rollout(cx, inp, teacher),
            Net::UnetCuboid(n) => n.rollout(cx, inp),
        }
    }
}
