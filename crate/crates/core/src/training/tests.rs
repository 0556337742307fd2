use super::*;
use crate::backbones::EncoderDecoderConfig;
use crate::baselines::persistence_forecast;
use crate::minicube::{synthesize_minicube, CubeSite, Split, SyntheticWorldParams};
use crate::models::{load_checkpoint, save_checkpoint, ModelConfig, WeatherStats};

fn cubes(n: usize, side: usize, t: usize, k: usize) -> Vec<Minicube> {
    let mut p = SyntheticWorldParams::desk(11);
    p.height = side;
    p.width = side;
    p.context_len = t;
    p.target_len = k;
    (0..n)
        .map(|i| {
            synthesize_minicube(&p, &CubeSite { location: i, year: i % 3, start: 16 + 6 * (i % 4), split: Split::Train }).unwrap()
        })
        .collect()
}

fn tiny_model(family: Family, cubes: &[&Minicube], t: usize, k: usize) -> Model {
    let mut c = ModelConfig::desk(family);
    c.context_len = t;
    c.target_len = k;
    c.encdec = EncoderDecoderConfig { hidden: 4, kernel: c.encdec.kernel, downsample: 2, norm_groups: 2, skips: true };
    c.conditioning.hidden = 4;
    c.translator_hidden = 8;
    c.unet_depth = 2;
    c.layers = 1;
    Model::new(c, WeatherStats::fit(cubes).unwrap()).unwrap()
}

fn quick(family: Family, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::desk(family);
    c.epochs = epochs;
    c.batch_size = 2;
    c.crop = Some(8);
    c.patience = 100;
    c
}

fn params(m: &Model) -> Vec<Tensor<f32>> {
    m.store.entries().iter().map(|e| (*e.value).clone()).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = cubes(4, 8, 4, 4);
    let refs: Vec<&Minicube> = data.iter().collect();
    let model = tiny_model(Family::ConvlstmMeteo, &refs, 4, 4);
    let before = params(&model);
    let mut cfg = quick(Family::ConvlstmMeteo, 1);
    cfg.learning_rate = 0.0;
    let out = train(model, &refs, &refs[..2], &cfg).unwrap();
    assert_eq!(out.status, TrainStatus::Completed);
    assert_eq!(out.state.step, 2);
    assert_eq!(params(&out.model), before);
}

#[test]
fn training_is_deterministic() {
    let data = cubes(4, 8, 4, 4);
    let refs: Vec<&Minicube> = data.iter().collect();
    let cfg = quick(Family::PredrnnMeteo, 2);
    let run = || train(tiny_model(Family::PredrnnMeteo, &refs, 4, 4), &refs, &refs[..2], &cfg).unwrap();
    let (a, b) = (run(), run());
    let bits = |o: &TrainOutcome| o.state.log.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(params(&a.model), params(&b.model));
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let data = cubes(4, 8, 4, 4);
    let refs: Vec<&Minicube> = data.iter().collect();
    let fam = Family::SimvpMeteo;
    let full = train(tiny_model(fam, &refs, 4, 4), &refs, &refs[..2], &quick(fam, 2)).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("last");
    train_with(tiny_model(fam, &refs, 4, 4), &refs, &refs[..2], &quick(fam, 1), None, |m, s| {
        let (tensors, meta) = s.to_checkpoint_parts(m);
        save_checkpoint(&ck, m, &tensors, meta)
    })
    .unwrap();
    let loaded = load_checkpoint(&ck).unwrap();
    let state = TrainState::from_checkpoint(&loaded).unwrap();
    assert_eq!(state.epochs_done, 1);
    let resumed = train_with(loaded.model, &refs, &refs[..2], &quick(fam, 2), Some(state), |_, _| Ok(())).unwrap();
    assert_eq!(resumed.state.log.epochs.len(), 2);
    assert_eq!(resumed.state.log.epochs[1].epoch, 1);
    assert_eq!(resumed.state.log.losses(), full.state.log.losses());
    assert_eq!(params(&resumed.model), params(&full.model));
}

#[test]
fn non_finite_parameters_stop_training_as_divergence() {
    let data = cubes(4, 8, 4, 4);
    let refs: Vec<&Minicube> = data.iter().collect();
    let mut model = tiny_model(Family::UnetNextCuboid, &refs, 4, 4);
    let id = model.store.ids().next().unwrap();
    model.store.value_mut(id).data_mut()[0] = f32::NAN;
    let before = params(&model);
    let out = train(model, &refs, &refs[..2], &quick(Family::UnetNextCuboid, 3)).unwrap();
    assert_eq!(out.status, TrainStatus::Diverged { epoch: 0 });
    assert_eq!(out.state.step, 0);
    let after = params(&out.model);
    assert!(before.iter().zip(&after).all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())));
}

#[test]
fn early_stopping_respects_patience() {
    let data = cubes(4, 8, 4, 4);
    let refs: Vec<&Minicube> = data.iter().collect();
    let mut cfg = quick(Family::Lstm1x1, 10);
    cfg.learning_rate = 0.0;
    cfg.patience = 2;
    let out = train(tiny_model(Family::Lstm1x1, &refs, 4, 4), &refs, &refs[..2], &cfg).unwrap();
    // With a frozen model the validation score never improves after the first epoch.
    assert_eq!(out.status, TrainStatus::EarlyStopped);
    assert_eq!(out.state.log.epochs.len(), 3);
    assert_eq!(out.state.best_epoch, Some(0));
}

#[test]
fn short_training_beats_persistence_on_a_small_task() {
    let (t, k) = (6, 6);
    let data = cubes(8, 8, t, k);
    let refs: Vec<&Minicube> = data.iter().collect();
    let fam = Family::ConvlstmMeteo;
    let mut cfg = quick(fam, 50);
    cfg.crop = None;
    cfg.learning_rate = 1e-2;
    let out = train(tiny_model(fam, &refs, t, k), &refs, &refs, &cfg).unwrap();
    assert!(out.state.step >= 200);
    let mse = |fc: &crate::models::Forecast, cube: &Minicube| {
        let hw = cube.height() * cube.width();
        let valid = cube.valid_mask().unwrap();
        let (mut s, mut n) = (0.0, 0.0);
        for (i, &p) in fc.ndvi_hat.data().iter().enumerate() {
            let j = t * hw + i;
            if valid.data()[j] > 0.0 && !p.is_nan() {
                s += (cube.ndvi.data()[j] as f64 - p as f64).powi(2);
                n += 1.0;
            }
        }
        (s, n)
    };
    let (mut model_sse, mut pers_sse, mut count) = (0.0, 0.0, 0.0);
    for cube in &refs {
        let (a, n) = mse(&out.model.forecast(cube).unwrap(), cube);
        let (b, _) = mse(&persistence_forecast(cube).unwrap(), cube);
        model_sse += a;
        pers_sse += b;
        count += n;
    }
    assert!(count > 0.0);
    assert!(model_sse < pers_sse, "model {} vs persistence {}", model_sse / count, pers_sse / count);
}

#[test]
fn config_validation() {
    let mut c = TrainConfig::desk(Family::ConvlstmMeteo);
    assert!(c.validate().is_ok());
    c.learning_rate = -1.0;
    assert!(c.validate().is_err());
    let mut c = TrainConfig::paper(Family::PredrnnMeteo);
    assert_eq!((c.epochs, c.batch_size, c.learning_rate, c.decouple_weight), (100, 32, 3e-4, 0.1));
    c.patience = 0;
    assert!(c.validate().is_err());
}

#[test]
fn log_roundtrips_through_jsonl() {
    let log = TrainLog {
        epochs: vec![EpochLog {
            epoch: 0,
            train_loss: 0.5,
            val_rmse: 0.1,
            learning_rate: 1e-3,
            steps: 4,
            skipped_batches: 1,
            wall_clock_s: 0.25,
        }],
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    log.write_jsonl(&p).unwrap();
    assert_eq!(TrainLog::read_jsonl(&p).unwrap(), log);
}
