use std::fs;
use std::path::{Path, PathBuf};

use nowcast_core::data::{
    extract_windows, inputs_at, synthesize, FrameArchive, SampleWindow, WindowLayout,
    FRAME_STEP_SECONDS,
};
use nowcast_core::metrics::{average_metric, round_half_up, MetricSpec, Variable};
use nowcast_core::model::ModelConfig;
use nowcast_core::tensor::Tensor;
use nowcast_core::train::{
    Checkpoint, RunConfig, StopReason, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT,
};
use nowcast_core::{Error, Result};

use crate::pgm;
use crate::Common;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(t) = common.threads {
        cfg.train.threads = t;
    }
    Ok(cfg)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} '{}' does not exist", path.display()),
        )))
    }
}

fn load_archive(path: &Path) -> Result<FrameArchive> {
    require_file(path, "archive")?;
    FrameArchive::load(path).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

fn region_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "archive".into())
}

fn check_archive_fits(model: &ModelConfig, a: &FrameArchive, path: &Path) -> Result<()> {
    let cin = a.num_channels() + a.num_static();
    if cin != model.input_channels {
        return Err(Error::Config(format!(
            "{} has {} channels + {} static rasters = {cin} inputs, model expects {}",
            path.display(),
            a.num_channels(),
            a.num_static(),
            model.input_channels
        )));
    }
    model.check_geometry(a.height(), a.width())
}

pub fn synth(
    common: &Common,
    out: &Path,
    sequences: Option<usize>,
    frames: Option<usize>,
    height: Option<usize>,
    width: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    let s = &mut cfg.synth;
    s.sequences = sequences.unwrap_or(s.sequences);
    s.frames_per_sequence = frames.unwrap_or(s.frames_per_sequence);
    s.height = height.unwrap_or(s.height);
    s.width = width.unwrap_or(s.width);
    s.validate()?;
    cfg.model
        .check_geometry(s.height, s.width)
        .map_err(|e| Error::InvalidArgument(format!("synthetic geometry: {e}")))?;
    let archive = synthesize(&cfg.synth)?;
    archive.save(out)?;
    println!(
        "wrote {}: {} frames of {}x{}, {} gapless runs",
        out.display(),
        archive.num_frames(),
        archive.height(),
        archive.width(),
        archive.gapless_runs().len()
    );
    Ok(())
}

pub struct TrainArgs {
    pub common: Common,
    pub archive: PathBuf,
    pub val_archive: Option<PathBuf>,
    pub out: PathBuf,
    pub variable: Option<Variable>,
    pub budget_epochs: Option<u64>,
    pub budget_hours: Option<f64>,
    pub resume: bool,
}

fn windows_for(cfg: &RunConfig, path: &Path) -> Result<Vec<SampleWindow>> {
    let a = load_archive(path)?;
    check_archive_fits(&cfg.model, &a, path)?;
    let layout = WindowLayout {
        input_frames: cfg.model.input_frames,
        output_frames: cfg.model.output_frames,
        target_channel: a.channel_index(cfg.train.variable.name())?,
    };
    let ws = extract_windows(&a, layout, &region_of(path))?;
    if ws.is_empty() {
        return Err(Error::Empty(format!(
            "{} has no gapless run of {} frames",
            path.display(),
            layout.length()
        )));
    }
    Ok(ws)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(v) = args.variable {
        cfg.train.variable = v;
    }
    if let Some(n) = args.budget_epochs {
        cfg.train.budget_epochs = n;
    }
    if let Some(h) = args.budget_hours {
        cfg.train.budget_hours = h;
    }
    cfg.validate()?;
    require_file(&args.archive, "archive")?;
    if let Some(v) = &args.val_archive {
        require_file(v, "validation archive")?;
    }
    let last = args.out.join(LAST_CHECKPOINT);
    if args.resume {
        require_file(&last, "checkpoint")?;
    }

    let train = windows_for(&cfg, &args.archive)?;
    let val = match &args.val_archive {
        Some(p) => windows_for(&cfg, p)?,
        None => train.clone(),
    };
    fs::create_dir_all(&args.out)?;
    let mut trainer = if args.resume {
        Trainer::resume(&Checkpoint::load(&last)?, &cfg)?
    } else {
        Trainer::new(&cfg)?
    };
    println!(
        "training {} ({} params) on {} windows, validating on {}, from epoch {}",
        cfg.train.variable,
        trainer.model.parameter_count(),
        train.len(),
        val.len(),
        trainer.epoch
    );
    let report = trainer.train(&train, &val, Some(&args.out), |r| {
        println!(
            "epoch {:>4}  train_loss {:.6e}  val_metric {:.6e}  lr {:.3e}{}",
            r.epoch,
            r.train_loss,
            r.val_metric,
            r.lr,
            if r.checkpointed { "  best" } else { "" }
        );
    })?;
    let why = match report.stop {
        StopReason::EpochBudget => "epoch budget reached",
        StopReason::TimeBudget => "time budget reached",
        StopReason::StepBudget => "step budget reached",
        StopReason::EarlyStop => "no improvement, stopped early",
    };
    println!(
        "{why}; best metric {} saved to {}",
        report.best.metric,
        args.out.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

fn with_batch_axis(t: Tensor<f32>) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(&shape)
}

pub fn predict(
    checkpoint: &Path,
    archive: &Path,
    start: usize,
    out: &Path,
    threads: Option<usize>,
) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    let a = load_archive(archive)?;
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = &ck.config;
    check_archive_fits(&cfg.model, &a, archive)?;
    let model = ck.build_model()?;
    let x = with_batch_axis(inputs_at(&a, cfg.model.input_frames, start)?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(cfg.train.threads))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let y = pool.install(|| model.predict(&x))?;

    let tout = cfg.model.output_frames;
    let (h, w) = (a.height(), a.width());
    let first = a.timestamps[start + cfg.model.input_frames - 1] + FRAME_STEP_SECONDS;
    let timestamps: Vec<u64> = (0..tout as u64).map(|k| first + k * FRAME_STEP_SECONDS).collect();
    let variable = cfg.train.variable;
    let write = |frames: Tensor<f32>, path: &Path| -> Result<()> {
        FrameArchive::new(
            frames.reshape(&[tout, 1, h, w])?,
            vec![1; tout * h * w],
            timestamps.clone(),
            vec![variable.name().to_string()],
            a.statics.clone(),
            a.static_names.clone(),
        )?
        .save(path)
    };
    write(y.clone(), out)?;
    println!("wrote {}: {tout} frames of {variable}", out.display());
    if variable == Variable::Cma {
        let path = thresholded_path(out);
        write(y.map(|v| round_half_up(f64::from(v)) as f32), &path)?;
        println!("wrote {}: thresholded at 0.5", path.display());
    }
    Ok(())
}

fn thresholded_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.thresholded.{}", ext.to_string_lossy()),
        None => format!("{stem}.thresholded"),
    };
    out.with_file_name(name)
}

pub fn evaluate(
    prediction: &Path,
    archive: &Path,
    variable: Option<Variable>,
    epsilon: f64,
    out: Option<&Path>,
) -> Result<()> {
    let pred = load_archive(prediction)?;
    let truth = load_archive(archive)?;
    if pred.num_channels() != 1 {
        return Err(Error::Shape(format!(
            "prediction must have one channel, {} has {}",
            prediction.display(),
            pred.num_channels()
        )));
    }
    let variable = match variable {
        Some(v) => v,
        None => pred.channel_names[0].parse()?,
    };
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let c = truth.channel_index(variable.name())?;
    let first = truth
        .timestamps
        .iter()
        .position(|&t| t == pred.timestamps[0])
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "truth archive has no frame at prediction timestamp {}",
                pred.timestamps[0]
            ))
        })?;
    let n = pred.num_frames();
    if first + n > truth.num_frames() || truth.timestamps[first..first + n] != pred.timestamps[..] {
        return Err(Error::InvalidArgument(
            "prediction timestamps do not line up with the truth archive".into(),
        ));
    }
    let mut target = Vec::with_capacity(pred.frames.len());
    let mut mask = Vec::with_capacity(pred.frames.len());
    for t in first..first + n {
        target.extend_from_slice(truth.frame_plane(t, c));
        mask.extend(truth.mask_plane(t, c).iter().map(|&m| f32::from(m)));
    }
    let spec = MetricSpec::for_variable(variable, epsilon)?;
    let report = average_metric(&spec, [(pred.frames.data(), &target[..], &mask[..])])?;
    let csv = report.to_csv();
    print!("{csv}");
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = prediction.as_os_str().to_owned();
        p.push(".report.csv");
        PathBuf::from(p)
    });
    fs::write(&path, csv)?;
    Ok(())
}

pub fn export_images(input: &Path, out: &Path) -> Result<()> {
    let a = load_archive(input)?;
    fs::create_dir_all(out)?;
    let (h, w) = (a.height(), a.width());
    let mut written = 0;
    for (c, name) in a.channel_names.iter().enumerate() {
        let binary = name == Variable::Cma.name();
        for t in 0..a.num_frames() {
            let plane = a.frame_plane(t, c);
            pgm::write(&out.join(format!("{name}_{t:04}.pgm")), w, h, &pgm::to_gray(plane))?;
            written += 1;
            if binary {
                pgm::write(
                    &out.join(format!("{name}_{t:04}_threshold.pgm")),
                    w,
                    h,
                    &pgm::to_threshold(plane),
                )?;
                written += 1;
            }
        }
    }
    println!("wrote {written} images to {}", out.display());
    Ok(())
}
