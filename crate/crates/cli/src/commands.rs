use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use radiofield3d::ablation::{ablate_altitudes, ablate_loss, ablate_sampling, write_ablation_csv, AblationRow, LossVariant, Splits};
use radiofield3d::eval::evaluate;
use radiofield3d::loss::{render_heights, RenderParams};
use radiofield3d::model::{read_checkpoint, Model, ModelConfig, Predictor};
use radiofield3d::synth::{generate_dataset, Manifest, Split, MANIFEST_FILE};
use radiofield3d::train::train_from_manifest;
use radiofield3d::volume::{read_scene_file, sample_observations_in_layers, Scene, SupervisionSpec};
use radiofield3d::Error;

use crate::config::{parse_strategies, RunConfig};
use crate::{pgm, AblateArgs, Axis, Command, Common, EvalArgs, Failure, GenArgs, RenderArgs, TrainArgs, TrainOverrides};

type Outcome<T = ()> = Result<T, Failure>;

fn config_err(e: impl ToString) -> Failure {
    Failure::Config(e.to_string())
}

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Render(a) => render(a),
    }
}

fn load(common: &Common) -> Outcome<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref()).map_err(Failure::Config)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
        cfg.eval.seed = s;
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut RunConfig, o: &TrainOverrides) -> Outcome {
    let t = &mut cfg.train;
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.lr {
        t.lr_init = v;
        t.lr_min = t.lr_min.min(v);
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.objective {
        t.objective = v;
    }
    if let Some(v) = &o.supervised {
        t.supervised_layers = v.clone();
    }
    if let Some(v) = o.samples {
        t.samples_per_scene = v;
        cfg.eval.k_samples = v;
    }
    t.validate().map_err(config_err)
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::Io { path: dir.to_path_buf(), source: e }))
}

fn create_file(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(Error::Io { path: path.to_path_buf(), source: e }))
}

fn manifest(data: &Path) -> Outcome<Manifest> {
    let path = if data.is_dir() { data.join(MANIFEST_FILE) } else { data.to_path_buf() };
    Ok(Manifest::load(&path)?)
}

/// The dataset fixes the volume shape; the configured one is only a fallback.
fn fit_model(model: &mut ModelConfig, scenes: &[Scene<f32>]) -> Outcome {
    if let Some(s) = scenes.first() {
        let (n, h, w) = s.volume.dims();
        model.layers = n;
        model.height = h;
        model.width = w;
    }
    model.validate().map_err(config_err)
}

fn spec_for(layers: &[usize], cfg: &RunConfig, n: usize) -> Outcome<SupervisionSpec> {
    SupervisionSpec::new(layers.to_vec(), cfg.train.loss.lambda_pl, n).map_err(config_err)
}

fn gen(a: GenArgs) -> Outcome {
    let mut cfg = load(&a.common)?;
    let s = &mut cfg.scene;
    if let Some(v) = a.width {
        s.width = v;
    }
    if let Some(v) = a.height {
        s.height = v;
    }
    if let Some(v) = a.layers {
        s.layers = v;
    }
    s.validate().map_err(config_err)?;
    if a.count < 10 {
        return Err(Failure::Config(format!("--count must be at least 10, got {}", a.count)));
    }
    let seed = a.common.seed.unwrap_or(cfg.scene.seed);
    let m = generate_dataset(&cfg.scene, a.count, seed, &a.out)?;
    println!(
        "wrote {} scenes ({} train / {} val / {} test) to {}",
        a.count,
        m.train.len(),
        m.val.len(),
        m.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg = load(&a.common)?;
    apply_train(&mut cfg, &a.train)?;
    let m = manifest(&a.data)?;
    let first = m.train.first().ok_or_else(|| Failure::Runtime(Error::InvalidArgument("training split is empty".into())))?;
    let probe = read_scene_file(&m.root.join(&first.path))?;
    fit_model(&mut cfg.model, std::slice::from_ref(&probe))?;
    cfg.train.supervision(cfg.model.layers).map_err(config_err)?;
    create_dir(&a.out)?;
    let run = train_from_manifest(&m, &cfg.model, &cfg.train, &a.out)?;
    let resolved = a.out.join("config.json");
    serde_json::to_writer_pretty(create_file(&resolved)?, &cfg).map_err(|e| Failure::Runtime(e.into()))?;
    let best = run.outcome.validations.iter().find(|v| v.epoch == run.outcome.best_epoch);
    println!(
        "trained {} steps; best epoch {}{}; checkpoint {}",
        run.outcome.log.len(),
        run.outcome.best_epoch,
        best.map(|v| format!(" (val labeled RMSE {:.4})", v.rmse)).unwrap_or_default(),
        run.checkpoint.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let mut cfg = load(&a.common)?;
    if let Some(k) = a.k {
        cfg.eval.k_samples = k;
    }
    if let Some(r) = a.runs {
        cfg.eval.runs = r;
    }
    if cfg.eval.k_samples == 0 || cfg.eval.runs == 0 {
        return Err(Failure::Config("k and runs must be positive".into()));
    }
    let model: Model<f32> = read_checkpoint(&a.checkpoint)?;
    let layers = a.supervised.clone().unwrap_or_else(|| cfg.train.supervised_layers.clone());
    let spec = spec_for(&layers, &cfg, model.config.layers)?;
    let m = manifest(&a.data)?;
    let scenes = m.load_split(a.split)?;
    let report = evaluate(&model, &scenes, a.split, &spec, &cfg.eval)?;
    create_dir(&a.out)?;
    let path = a.out.join(format!("metrics_{}.csv", a.split));
    report.write_csv(create_file(&path)?)?;
    let show = |v: Option<radiofield3d::eval::Aggregate>| v.map(|x| format!("{:.4}", x.rmse)).unwrap_or_else(|| "-".into());
    println!(
        "{}: RMSE {:.4} (labeled {}, unlabeled {}), PSNR {:.2} dB, SSIM {:.4}; wrote {}",
        a.split,
        report.overall.rmse,
        show(report.labeled),
        show(report.unlabeled),
        report.overall.psnr,
        report.overall.ssim,
        path.display()
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Outcome {
    let mut cfg = load(&a.common)?;
    apply_train(&mut cfg, &a.train)?;
    let m = manifest(&a.data)?;
    let (train, val, test) = (m.load_split(Split::Train)?, m.load_split(Split::Val)?, m.load_split(Split::Test)?);
    fit_model(&mut cfg.model, &train)?;
    let n = cfg.model.layers;
    let data = Splits { train: &train, val: &val, test: &test };
    let rows: Vec<AblationRow> = match a.axis {
        Axis::Altitude => {
            let strategies = match &a.strategies {
                Some(text) => parse_strategies(text).map_err(Failure::Config)?,
                None => cfg.ablation.strategies.clone(),
            };
            for s in &strategies {
                spec_for(s, &cfg, n)?;
            }
            ablate_altitudes(&cfg.model, &cfg.train, &cfg.eval, data, &strategies)?
        }
        Axis::Sampling => {
            let counts = a.counts.clone().unwrap_or_else(|| cfg.ablation.counts.clone());
            if counts.is_empty() || counts.contains(&0) {
                return Err(Failure::Config("sample counts must be positive".into()));
            }
            cfg.train.supervision(n).map_err(config_err)?;
            ablate_sampling(&cfg.model, &cfg.train, &cfg.eval, data, &counts, a.retrain || cfg.ablation.retrain)?
        }
        Axis::Loss => {
            let variants = match &a.variants {
                Some(v) => v.iter().map(|s| s.parse::<LossVariant>()).collect::<Result<Vec<_>, _>>().map_err(config_err)?,
                None => cfg.ablation.variants.clone(),
            };
            spec_for(&cfg.train.supervised_layers, &cfg, n)?;
            ablate_loss(&cfg.model, &cfg.train, &cfg.eval, data, &variants)?
        }
    };
    create_dir(&a.out)?;
    let axis = match a.axis {
        Axis::Altitude => "altitude",
        Axis::Sampling => "sampling",
        Axis::Loss => "loss",
    };
    let path = a.out.join(format!("ablation_{axis}.csv"));
    write_ablation_csv(create_file(&path)?, &rows)?;
    for r in &rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<16} labeled {} unlabeled {} all {:.4}", r.variant, opt(r.labeled_rmse), opt(r.unlabeled_rmse), r.rmse);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn write_pgm(path: PathBuf, w: usize, h: usize, values: &[f64]) -> Outcome {
    pgm::write(&path, w, h, values).map_err(|e| Failure::Runtime(Error::Io { path, source: e }))
}

fn heights_normalized(heights: &[f32], max_height: f64) -> Vec<f64> {
    heights.iter().map(|&v| v as f64 / max_height).collect()
}

fn render(a: RenderArgs) -> Outcome {
    let cfg = load(&a.common)?;
    let scene = read_scene_file(&a.scene)?;
    let (n, h, w) = scene.volume.dims();
    let hmax = scene.meta.max_height();
    create_dir(&a.out)?;
    let layer_values = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    for z in 0..n {
        write_pgm(a.out.join(format!("truth_{z:02}.pgm")), w, h, &layer_values(scene.volume.layer(z)))?;
    }
    write_pgm(a.out.join("height_truth.pgm"), w, h, &heights_normalized(scene.buildings.heights(), hmax))?;
    let rp = RenderParams::for_altitudes(scene.volume.altitudes());
    let rendered = render_heights(&scene.volume, &rp)?;
    write_pgm(a.out.join("height_render_truth.pgm"), w, h, &heights_normalized(rendered.heights(), hmax))?;
    let mut written = n + 2;

    if let Some(ckpt) = &a.checkpoint {
        let model: Model<f32> = read_checkpoint(ckpt)?;
        let layers = a.supervised.clone().unwrap_or_else(|| cfg.train.supervised_layers.clone());
        let spec = spec_for(&layers, &cfg, n)?;
        let k = a.k.unwrap_or(cfg.eval.k_samples);
        if k == 0 {
            return Err(Failure::Config("k must be positive".into()));
        }
        let samples = sample_observations_in_layers(&scene.volume, spec.layers(), k, cfg.eval.seed)?;
        let pred = model.predict_scene(&scene, &samples)?;
        for z in 0..n {
            write_pgm(a.out.join(format!("pred_{z:02}.pgm")), w, h, &layer_values(pred.layer(z)))?;
        }
        let (k_gain, t_threshold) = model.render_params();
        let rendered = render_heights(&pred, &RenderParams { k_gain, t_threshold, ..rp })?;
        write_pgm(a.out.join("height_render_pred.pgm"), w, h, &heights_normalized(rendered.heights(), hmax))?;
        written += n + 1;
    }
    println!("wrote {written} PGM files to {}", a.out.display());
    Ok(())
}
