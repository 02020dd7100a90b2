use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use dmphn::bench::{bench_model, BenchReport};
use dmphn::checkpoint::Storable;
use dmphn::data::{gen_dataset, load_image, load_split, save_image, GenConfig, Split};
use dmphn::metrics::{psnr, ssim};
use dmphn::train::{denormalize, loss_log_path, normalize};
use dmphn::{Checkpoint, DType, Model, ModelSpec, Shape, TrainConfig, Trainer};

use crate::config::{as_usage, base_config, model_spec, profile_name, train_config, usage, FileConfig};
use crate::{BenchArgs, Command, EvalArgs, GenDataArgs, InferArgs, InspectArgs, TrainArgs};

pub fn run(command: Command, config: Option<&Path>) -> Result<()> {
    let file = FileConfig::load(config)?;
    match command {
        Command::Train(a) => train(&a, &file),
        Command::Infer(a) => infer(&a),
        Command::Eval(a) => eval(&a),
        Command::Inspect(a) => inspect(&a, &file),
        Command::Bench(a) => bench(&a, &file),
        Command::GenData(a) => gen_data(&a),
    }
}

fn ckpt_dtype(ckpt: &Checkpoint) -> DType {
    ckpt.tensors.first().map(|t| t.data.dtype()).unwrap_or(DType::F32)
}

fn train(a: &TrainArgs, f: &FileConfig) -> Result<()> {
    let data = a
        .data
        .clone()
        .or_else(|| f.data.clone())
        .ok_or_else(|| usage("--data is required"))?;
    let out = a.out.clone().or_else(|| f.out.clone()).unwrap_or_else(|| "model.ckpt".into());
    let (spec, cfg, resume) = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let stored = ckpt
                .meta
                .train
                .clone()
                .ok_or_else(|| anyhow!("{} carries no training settings", path.display()))?;
            (ckpt.meta.model.clone(), train_config(a, f, stored)?, Some(ckpt))
        }
        None => {
            let profile = profile_name(a, f)?;
            if profile == "paper" {
                log::warn!("the paper profile is not desk-runnable; expect days of CPU time");
            }
            let width = if profile == "desk" { "desk" } else { "full" };
            let spec = model_spec(&a.model, f, width)?;
            (spec, train_config(a, f, base_config(&profile))?, None)
        }
    };
    let pairs = load_split(&data, Split::Train)?;
    if pairs.is_empty() {
        return Err(anyhow!("no training pairs under {}", data.display()));
    }
    match cfg.dtype {
        DType::F32 => fit::<f32>(&spec, cfg, resume, &pairs, &out),
        DType::F64 => fit::<f64>(&spec, cfg, resume, &pairs, &out),
    }
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let exists = path.exists();
    let file = if append {
        OpenOptions::new().create(true).append(true).open(path)?
    } else {
        File::create(path)?
    };
    let mut w = BufWriter::new(file);
    if !append || !exists {
        writeln!(w, "step,epoch,lr,loss")?;
    }
    Ok(w)
}

fn fit<T: Storable>(
    spec: &ModelSpec,
    cfg: TrainConfig,
    resume: Option<Checkpoint>,
    pairs: &[dmphn::data::Pair],
    out: &Path,
) -> Result<()> {
    let mut trainer = match &resume {
        Some(ckpt) => Trainer::<T>::from_checkpoint(ckpt, Some(cfg)).map_err(as_usage)?,
        None => Trainer::new(Model::<T>::init(spec, cfg.seed)?, cfg).map_err(as_usage)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let log_path = loss_log_path(out);
    let mut log = open_log(&log_path, resume.is_some())?;
    let total = trainer.total_steps(pairs.len());
    let every = (total / 20).max(1);
    log::info!(
        "training {} on {} pairs: {} steps from step {}, {} threads",
        trainer.model.spec().label(),
        pairs.len(),
        total,
        trainer.step,
        rayon::current_num_threads()
    );
    let mut write_err = None;
    let result = trainer.fit(pairs, Some(out), |s| {
        if let Err(e) = writeln!(log, "{},{},{:e},{:e}", s.step, s.epoch, s.lr, s.loss) {
            write_err.get_or_insert(e);
        }
        if s.step % every == 0 || s.step == total {
            log::info!("step {}/{total} epoch {} lr {:.2e} loss {:.6}", s.step, s.epoch, s.lr, s.loss);
        }
    });
    log.flush()?;
    if let Some(e) = write_err {
        return Err(anyhow::Error::new(e).context(format!("writing {}", log_path.display())));
    }
    let report = result.with_context(|| format!("last good state is in {}", out.display()))?;
    println!(
        "{}: {} steps in {:.1}s, loss {:.6} -> {:.6} (mean of last steps); checkpoint {}; loss log {}",
        trainer.model.spec().label(),
        report.steps.len(),
        report.seconds,
        report.initial_loss().unwrap_or(f64::NAN),
        report.final_smoothed_loss().unwrap_or(f64::NAN),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn list_images(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        if !input.exists() {
            return Err(anyhow!("{} does not exist", input.display()));
        }
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(anyhow!("no PNG or PPM images in {}", input.display()));
    }
    Ok(files)
}

fn infer(a: &InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let inputs = list_images(&a.input)?;
    fs::create_dir_all(&a.out)?;
    match ckpt_dtype(&ckpt) {
        DType::F32 => infer_with(&ckpt.to_model::<f32>()?, &inputs, a),
        DType::F64 => infer_with(&ckpt.to_model::<f64>()?, &inputs, a),
    }
}

fn infer_with<T: Storable>(model: &Model<T>, inputs: &[PathBuf], a: &InferArgs) -> Result<()> {
    for path in inputs {
        let img = load_image(path)?;
        let x = normalize::<T>(&img);
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow!("bad file name {}", path.display()))?;
        let target = a.out.join(format!("{stem}.png"));
        if a.levels {
            let (y, maps) = model.infer_with_levels(&x)?;
            save_image(&denormalize(&y), &target)?;
            for (i, m) in maps.iter().enumerate() {
                save_image(&denormalize(m), &a.out.join(format!("{stem}.level{}.png", i + 1)))?;
            }
        } else {
            save_image(&denormalize(&model.infer(&x)?), &target)?;
        }
        println!("{}", target.display());
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let split = if a.split == "train" { Split::Train } else { Split::Test };
    let pairs = load_split(&a.data, split)?;
    if pairs.is_empty() {
        return Err(anyhow!("no {} pairs under {}", a.split, a.data.display()));
    }
    match ckpt_dtype(&ckpt) {
        DType::F32 => eval_with(&ckpt.to_model::<f32>()?, &pairs),
        DType::F64 => eval_with(&ckpt.to_model::<f64>()?, &pairs),
    }
}

fn eval_with<T: Storable>(model: &Model<T>, pairs: &[dmphn::data::Pair]) -> Result<()> {
    println!("image,psnr_blurry,ssim_blurry,psnr,ssim");
    let mut sums = [0.0; 4];
    for p in pairs {
        let y = denormalize(&model.infer(&normalize::<T>(&p.blurry))?).map(|v| v.clamp(0.0, 1.0));
        let row = [
            psnr(&p.blurry, &p.sharp)?,
            ssim(&p.blurry, &p.sharp)?,
            psnr(&y, &p.sharp)?,
            ssim(&y, &p.sharp)?,
        ];
        println!("{},{:.4},{:.5},{:.4},{:.5}", p.name, row[0], row[1], row[2], row[3]);
        sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    let n = pairs.len() as f64;
    println!("mean,{:.4},{:.5},{:.4},{:.5}", sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n);
    Ok(())
}

fn sized_model(spec: &ModelSpec, (h, w): (usize, usize)) -> Result<Model<f32>> {
    let m = Model::<f32>::init(spec, 0)?;
    m.check_input(Shape::new(1, spec.codec.in_channels, h, w))
        .map_err(|e| usage(format!("size {h}x{w} does not fit {}: {e}", spec.label())))?;
    Ok(m)
}

fn inspect(a: &InspectArgs, f: &FileConfig) -> Result<()> {
    let spec = model_spec(&a.model, f, "full")?;
    let m = sized_model(&spec, a.size)?;
    let (h, w) = a.size;
    let params = m.level_params();
    let flops = m.level_flops(1, h, w)?;
    println!("model: {}", spec.label());
    println!("parameters: {}", m.param_count());
    println!("size: {:.2} MB (f32, 1 MB = 10^6 bytes)", m.param_bytes() as f64 / 1e6);
    println!("flops: {:.3} GFLOP at {h}x{w}", flops.iter().sum::<u64>() as f64 / 1e9);
    println!("level,params,mb,gflops");
    for (i, (p, fl)) in params.iter().zip(&flops).enumerate() {
        println!("{},{p},{:.3},{:.3}", i + 1, (p * 4) as f64 / 1e6, *fl as f64 / 1e9);
    }
    Ok(())
}

fn bench(a: &BenchArgs, f: &FileConfig) -> Result<()> {
    if a.iters == 0 {
        return Err(usage("--iters must be at least 1"));
    }
    let spec = model_spec(&a.model, f, "full")?;
    let m = sized_model(&spec, a.size)?;
    log::info!("benchmarking {} at {}x{} on {} threads", spec.label(), a.size.0, a.size.1, rayon::current_num_threads());
    let report = bench_model(&m, a.size.0, a.size.1, a.iters, a.warmup)?;
    if !a.no_header {
        println!("{}", BenchReport::CSV_HEADER);
    }
    println!("{}", report.csv_row());
    Ok(())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = GenConfig {
        count: a.count,
        height: a.size.0,
        width: a.size.1,
        seed: a.seed,
        frames_min: a.frames_min,
        frames_max: a.frames_max,
        d_max: a.d_max,
        test_fraction: a.test_fraction,
    };
    cfg.validate().map_err(as_usage)?;
    let m = gen_dataset(&a.out, &cfg).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} pairs to {} ({} train, {} test)",
        m.pairs.len(),
        a.out.display(),
        m.train,
        m.test
    );
    Ok(())
}
