use std::time::Instant;

use vegcast_core::baselines::Baseline;
use vegcast_core::evaluation::{evaluate_forecasts, outperformance, predict_cubes, ScoreTable};
use vegcast_core::minicube::{generate_dataset, Split, SplitSpec, SyntheticWorldParams};
use vegcast_core::models::{Family, Model, ModelConfig, WeatherStats};
use vegcast_core::training::{train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let family = args.get(1).map(String::as_str).unwrap_or("convlstm-meteo").parse::<Family>().unwrap();
    let meteo = args.get(2).map(|s| s == "on").unwrap_or(true);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lr: Option<f64> = args.get(4).and_then(|s| s.parse().ok());
    let clock = Instant::now();
    let ds = generate_dataset(&SyntheticWorldParams::desk(0), &SplitSpec::desk()).unwrap();
    println!("generate {:.1}s", clock.elapsed().as_secs_f64());
    let tr = ds.split(Split::Train);
    let val = ds.split(Split::Val);
    let test = ds.split(Split::OodT);
    let score = |name: &str, b: Baseline| -> ScoreTable {
        let fc: Vec<_> = test.iter().map(|c| b.forecast(c, ds.history(c)).unwrap()).collect();
        let t = evaluate_forecasts(name, &b.hash(), &test, &fc).unwrap();
        println!("{name}: {:?} pixels {} reasons {:?}", t.macro_avg, t.n_pixels, t.reasons);
        t
    };
    let clim = score("climatology", Baseline::Climatology);
    score("persistence", Baseline::Persistence);
    score("prevyear", Baseline::PreviousYear);
    let mut mc = ModelConfig::desk(family);
    mc.meteo = meteo;
    let model = Model::new(mc, WeatherStats::fit(&tr).unwrap()).unwrap();
    println!("params {}", model.count_parameters());
    let mut cfg = TrainConfig::desk(family);
    cfg.epochs = epochs;
    if let Some(lr) = lr {
        cfg.learning_rate = lr;
    }
    if let Some(p) = args.get(5).and_then(|s| s.parse().ok()) {
        cfg.patience = p;
    }
    if let Some(b) = args.get(6).and_then(|s| s.parse().ok()) {
        cfg.batch_size = b;
    }
    cfg.shuffle = args.get(7).is_some_and(|s| s == "shuffle");
    let clock = Instant::now();
    let out = train(model, &tr, &val, &cfg).unwrap();
    for e in &out.state.log.epochs {
        println!("{e:?}");
    }
    println!("train {:.1}s status {:?}", clock.elapsed().as_secs_f64(), out.status);
    let fc = predict_cubes(&out.model, &test, 8, cfg.shuffle.then_some(17)).unwrap();
    let t = evaluate_forecasts(&out.model.model_id(), out.model.config_hash(), &test, &fc).unwrap();
    println!("model: {:?}", t.macro_avg);
    println!("outperformance {:.3}", outperformance(&t, &clim).unwrap());
    let fc = predict_cubes(&out.model, &test, 8, Some(1)).unwrap();
    let t = evaluate_forecasts(&out.model.model_id(), out.model.config_hash(), &test, &fc).unwrap();
    println!("shuffled: {:?}", t.macro_avg);
}
