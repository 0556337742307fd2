use super::*;
use crate::backbones::EncoderDecoderConfig;
use crate::minicube::{synthesize_minicube, CubeSite, Split, SyntheticWorldParams, STEP_DAYS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cube_with(h: usize, w: usize, t: usize, k: usize, location: usize) -> Minicube {
    let mut p = SyntheticWorldParams::desk(7);
    p.height = h;
    p.width = w;
    p.context_len = t;
    p.target_len = k;
    synthesize_minicube(&p, &CubeSite { location, year: 0, start: 16, split: Split::Train }).unwrap()
}

fn stats_for(cube: &Minicube) -> WeatherStats {
    WeatherStats::fit(&[cube]).unwrap()
}

fn tiny(family: Family, t: usize, k: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(family);
    c.context_len = t;
    c.target_len = k;
    c.encdec = EncoderDecoderConfig { hidden: 4, kernel: c.encdec.kernel, downsample: 2, norm_groups: 2, skips: true };
    c.conditioning.hidden = 4;
    c.translator_hidden = 8;
    c.unet_depth = 2;
    c.layers = 1;
    c
}

/// Adds `delta` to every daily weather value of the target period.
fn shift_future_weather(cube: &Minicube, delta: f32) -> Minicube {
    let mut out = cube.clone();
    let v = out.weather.shape()[1];
    let start = cube.context_len * STEP_DAYS * v;
    for x in &mut out.weather.data_mut()[start..] {
        *x += delta;
    }
    out
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

/// One plain gradient step on the masked squared error.
fn sgd_step(model: &mut Model, batch: &Batch, lr: f32) {
    let g = Graph::new();
    let grads = {
        let cx = Ctx::new(&g, &model.store);
        let out = model.rollout(&cx, batch, None).unwrap();
        let target = g.constant(batch.target.clone());
        let mask = g.constant(batch.mask.clone());
        let loss = out.pred.sub(target).mul(mask).square().mean_all();
        g.backward(loss).into_param_grads(model.store.len())
    };
    for (i, gr) in grads.into_iter().enumerate() {
        if let Some(gr) = gr {
            let id = model.store.ids().nth(i).unwrap();
            let v = model.store.value_mut(id);
            for (p, d) in v.data_mut().iter_mut().zip(gr.data()) {
                *p -= lr * d;
            }
        }
    }
}

#[test]
fn every_family_forecasts_desk_shape() {
    let cube = cube_with(32, 32, 10, 20, 3);
    let stats = stats_for(&cube);
    for family in Family::ALL {
        let model = Model::new(ModelConfig::desk(family), stats.clone()).unwrap();
        let f = model.forecast(&cube).unwrap();
        assert_eq!(f.ndvi_hat.shape(), &[20, 32, 32], "{family}");
        assert!(f.ndvi_hat.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0), "{family}");
        assert_eq!(f.model_id, family.as_str());
        assert_eq!(f.cube_id, cube.id);
    }
}

#[test]
fn target_period_observations_never_reach_the_forecast() {
    let cube = cube_with(16, 16, 4, 3, 1);
    let mut other = cube.clone();
    let hw = 16 * 16;
    for x in &mut other.ndvi.data_mut()[4 * hw..] {
        *x = 0.9;
    }
    for family in Family::ALL {
        let model = Model::new(tiny(family, 4, 3), stats_for(&cube)).unwrap();
        let a = model.forecast(&cube).unwrap().ndvi_hat;
        let b = model.forecast(&other).unwrap().ndvi_hat;
        assert_eq!(bits(&a), bits(&b), "{family}");
    }
}

#[test]
fn meteo_off_ignores_future_weather_and_on_responds() {
    let cube = cube_with(16, 16, 4, 3, 2);
    let shifted = shift_future_weather(&cube, 5.0);
    let stats = stats_for(&cube);
    for family in Family::ALL {
        let mut cfg = tiny(family, 4, 3);
        cfg.meteo = false;
        let off = Model::new(cfg.clone(), stats.clone()).unwrap();
        assert!(off.net.fusion().is_none());
        assert_eq!(off.model_id(), format!("{family}-nometeo"));
        let a = off.forecast(&cube).unwrap().ndvi_hat;
        let b = off.forecast(&shifted).unwrap().ndvi_hat;
        assert_eq!(bits(&a), bits(&b), "{family} without weather");

        cfg.meteo = true;
        let mut on = Model::new(cfg, stats.clone()).unwrap();
        let batch = Batch::from_cubes(&[&cube], &stats, None).unwrap();
        sgd_step(&mut on, &batch, 0.05);
        let a = on.forecast(&cube).unwrap().ndvi_hat;
        let b = on.forecast(&shifted).unwrap().ndvi_hat;
        let diff = a.zip_map(&b, |p, q| (p - q).abs()).max_abs();
        assert!(diff > 0.0, "{family} with weather ignores the future");
        assert!(on.fusion_applications() > 0);
    }
}

#[test]
fn same_seed_gives_identical_forecast_bytes() {
    let cube = cube_with(16, 16, 4, 3, 4);
    for family in Family::ALL {
        let a = Model::new(tiny(family, 4, 3), stats_for(&cube)).unwrap().forecast(&cube).unwrap();
        let b = Model::new(tiny(family, 4, 3), stats_for(&cube)).unwrap().forecast(&cube).unwrap();
        assert_eq!(bits(&a.ndvi_hat), bits(&b.ndvi_hat), "{family}");
        assert_eq!(a.config_hash, b.config_hash);
        let mut other = tiny(family, 4, 3);
        other.seed = 1;
        let c = Model::new(other, stats_for(&cube)).unwrap().forecast(&cube).unwrap();
        assert_ne!(bits(&a.ndvi_hat), bits(&c.ndvi_hat), "{family}");
    }
}

#[test]
fn convlstm_perturbation_stays_inside_receptive_field() {
    let (t, k, n) = (3, 2, 24);
    let cube = cube_with(n, n, t, k, 5);
    let stats = stats_for(&cube);
    let mut cfg = tiny(Family::ConvlstmMeteo, t, k);
    cfg.layers = 1;
    let model = Model::new(cfg, stats).unwrap();
    let (r0, c0) = (12usize, 12usize);
    let mut poked = cube.clone();
    let q = r0 * n + c0;
    poked.ndvi.data_mut()[q] = 0.77;
    poked.sat_red.data_mut()[q] = 0.05;
    poked.sat_nir.data_mut()[q] = 0.4;
    poked.quality_mask.data_mut()[q] = 1.0;
    let a = model.forecast(&cube).unwrap().ndvi_hat;
    let b = model.forecast(&poked).unwrap().ndvi_hat;
    // A 3×3 kernel grows the field by one pixel per recurrent step.
    let radius = t + k;
    let mut changed_inside = false;
    for s in 0..k {
        for i in 0..n {
            for j in 0..n {
                let p = (s * n + i) * n + j;
                let inside = i.abs_diff(r0) <= radius && j.abs_diff(c0) <= radius;
                if inside {
                    changed_inside |= a.data()[p] != b.data()[p];
                } else {
                    assert_eq!(a.data()[p].to_bits(), b.data()[p].to_bits(), "step {s} pixel ({i},{j})");
                }
            }
        }
    }
    assert!(changed_inside);
}

#[test]
fn per_pixel_lstm_commutes_with_spatial_permutation() {
    let cube = cube_with(8, 8, 4, 3, 6);
    let stats = stats_for(&cube);
    let model = Model::new(tiny(Family::Lstm1x1, 4, 3), stats.clone()).unwrap();
    let batch = Batch::from_cubes(&[&cube], &stats, None).unwrap();
    let hw = 64;
    let mut perm: Vec<usize> = (0..hw).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in (1..hw).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let shuffle = |t: &Tensor<f32>| {
        let mut out = t.clone();
        for (row_out, row_in) in out.data_mut().chunks_mut(hw).zip(t.data().chunks(hw)) {
            for p in 0..hw {
                row_out[p] = row_in[perm[p]];
            }
        }
        out
    };
    let shuffled = Batch {
        frames: shuffle(&batch.frames),
        weather: shuffle(&batch.weather),
        target: shuffle(&batch.target),
        mask: shuffle(&batch.mask),
        ..batch.clone()
    };
    let a = model.predict(&batch).unwrap();
    let b = model.predict(&shuffled).unwrap();
    assert_eq!(bits(&shuffle(&a)), bits(&b));
}

#[test]
fn next_frame_unet_rollout_equals_repeated_single_steps() {
    let (t, k) = (3, 4);
    let cube = cube_with(16, 16, t, k, 7);
    let stats = stats_for(&cube);
    let model = Model::new(tiny(Family::UnetNextFrame, t, k), stats.clone()).unwrap();
    let batch = Batch::from_cubes(&[&cube], &stats, None).unwrap();
    let full = model.predict(&batch).unwrap();
    let elevation = batch.elevation();
    let mut window = batch.stacked_frames(0, t);
    for j in 0..k {
        let p = model.next_frame(&window, &batch.weather_at(t + j)).unwrap();
        assert_eq!(bits(&p), bits(&full.narrow(1, j, 1)), "step {j}");
        let zeros = Tensor::zeros(vec![1, 2, 16, 16]);
        let ones = Tensor::ones(vec![1, 1, 16, 16]);
        let fed = Tensor::concat(&[&p, &zeros, &ones, &elevation], 1);
        window = Tensor::concat(&[&window.narrow(1, FRAME_CHANNELS, (t - 1) * FRAME_CHANNELS), &fed], 1);
    }
    let cuboid = Model::new(tiny(Family::UnetNextCuboid, t, k), stats).unwrap();
    assert!(cuboid.next_frame(&window, &batch.weather_at(t)).is_err());
}

#[test]
fn next_frame_families_are_causal_in_future_weather() {
    let (t, k) = (3, 4);
    let cube = cube_with(16, 16, t, k, 8);
    let stats = stats_for(&cube);
    // Change weather only from target step 2 on.
    let mut late = cube.clone();
    let v = late.weather.shape()[1];
    for x in &mut late.weather.data_mut()[(t + 2) * STEP_DAYS * v..] {
        *x += 3.0;
    }
    for family in [Family::PredrnnMeteo, Family::UnetNextFrame, Family::ConvlstmMeteo] {
        let mut model = Model::new(tiny(family, t, k), stats.clone()).unwrap();
        let batch = Batch::from_cubes(&[&cube], &stats, None).unwrap();
        sgd_step(&mut model, &batch, 0.05);
        let a = model.forecast(&cube).unwrap().ndvi_hat;
        let b = model.forecast(&late).unwrap().ndvi_hat;
        let hw = 256;
        assert_eq!(bits(&a)[..2 * hw], bits(&b)[..2 * hw], "{family}");
        assert_ne!(bits(&a)[2 * hw..], bits(&b)[2 * hw..], "{family}");
    }
}

/// Closed-form count of the encoding-forecasting ConvLSTM with CAT input fusion.
fn convlstm_formula(d: usize, k: usize, layers: usize, n_cond: usize) -> usize {
    let stem = FRAME_CHANNELS * d + d;
    let cat = (d + n_cond) * d + d;
    let cell = 4 * d * 2 * d * k * k + 4 * d;
    let head = d + 1;
    stem + cat + 2 * layers * cell + head
}

#[test]
fn paper_scale_convlstm_has_about_one_million_parameters() {
    let n_cond = 32;
    let model = Model::new(ModelConfig::paper(Family::ConvlstmMeteo), WeatherStats::identity(n_cond)).unwrap();
    let n = model.count_parameters();
    assert_eq!(n, convlstm_formula(64, 3, 2, n_cond));
    assert!((800_000..=1_200_000).contains(&n), "{n}");
}

#[test]
fn doubling_width_roughly_quadruples_parameters() {
    for family in Family::ALL {
        let mut cfg = ModelConfig::desk(family);
        let a = Model::new(cfg.clone(), WeatherStats::identity(32)).unwrap().count_parameters();
        cfg.encdec.hidden *= 2;
        cfg.conditioning.hidden *= 2;
        cfg.translator_hidden *= 2;
        let b = Model::new(cfg, WeatherStats::identity(32)).unwrap().count_parameters();
        let ratio = b as f64 / a as f64;
        assert!((3.0..=4.1).contains(&ratio), "{family}: {ratio}");
    }
    let r = convlstm_formula(128, 3, 2, 32) as f64 / convlstm_formula(64, 3, 2, 32) as f64;
    assert!((3.9..4.0).contains(&r), "{r}");
}

#[test]
fn zero_width_is_a_construction_error() {
    for family in Family::ALL {
        let mut cfg = ModelConfig::desk(family);
        cfg.encdec.hidden = 0;
        assert!(Model::new(cfg, WeatherStats::identity(32)).is_err(), "{family}");
    }
    assert!(Model::new(ModelConfig::desk(Family::SimvpMeteo), WeatherStats::identity(6)).is_err());
}

#[test]
fn random_inputs_never_produce_non_finite_forecasts() {
    let (t, k, n, per_batch) = (3, 2, 8, 250);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for family in Family::ALL {
        let model = Model::new(tiny(family, t, k), WeatherStats::identity(32)).unwrap();
        for _ in 0..1000 / per_batch {
            let mut draw = |shape: Vec<usize>| Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..=1.0));
            let batch = Batch {
                frames: draw(vec![per_batch, t + k, FRAME_CHANNELS, n, n]),
                weather: draw(vec![per_batch, t + k, 32, n, n]),
                target: Tensor::zeros(vec![per_batch, k, n, n]),
                mask: Tensor::zeros(vec![per_batch, k, n, n]),
                context_len: t,
                target_len: k,
            };
            let pred = model.predict(&batch).unwrap();
            assert!(pred.all_finite(), "{family}");
        }
    }
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cube = cube_with(16, 16, 4, 3, 9);
    let mut model = Model::new(tiny(Family::SimvpMeteo, 4, 3), stats_for(&cube)).unwrap();
    let batch = Batch::from_cubes(&[&cube], &model.weather_stats, None).unwrap();
    sgd_step(&mut model, &batch, 0.05);
    let state = vec![("m.x".to_string(), Tensor::from_fn(vec![2, 3], |i| i as f32))];
    save_checkpoint(dir.path(), &model, &state, serde_json::json!({"epoch": 3})).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.model.config, model.config);
    assert_eq!(ck.state, state);
    assert_eq!(ck.metrics["epoch"], 3);
    let a = model.forecast(&cube).unwrap();
    let b = ck.model.forecast(&cube).unwrap();
    assert_eq!(bits(&a.ndvi_hat), bits(&b.ndvi_hat));
    assert_eq!(a.config_hash, b.config_hash);

    let first = &model.store.entries()[0].name;
    std::fs::write(dir.path().join(format!("params/{first}.f32")), [0u8; 3]).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(err.to_string().contains(first.as_str()), "{err}");
}
