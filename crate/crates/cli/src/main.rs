use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lficam::checkpoint::{load_checkpoint, save_checkpoint};
use lficam::config::RunConfig;
use lficam::data::{apply_boxes, encode_boxes, generate_synthetic_blobs, load_packed, save_packed, Dataset};
use lficam::heatmap::{heatmap_gray, heatmap_overlay, Pnm};
use lficam::oracles::{score_cam, vanilla_cam};
use lficam::stability::{stability_protocol, CamMethod, DEFAULT_THRESHOLD};
use lficam::training::{evaluate_top1, train_model_with, METRICS_HEADER};
use lficam::{LfiCamModel, Tensor};

#[derive(Parser)]
#[command(name = "lficam", version, about = "Train and explain CNN classifiers with learned feature importance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-class blob dataset with box annotations.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Print the top-1 error of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export heatmaps for one image.
    Cam(CamArgs),
    /// Mean IoU of thresholded maps across independently trained models.
    Stability(StabilityArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2500)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Packed training set.
    #[arg(long)]
    data: PathBuf,
    /// Packed test set, evaluated after every epoch.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the metrics lines to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    /// File of `key = value` lines; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train the plain backbone with the attention map forced to zero.
    #[arg(long)]
    no_fin: bool,
    /// Any config field, e.g. `--set widths=8,16,32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Lfi,
    Score,
    Cam,
    All,
}

#[derive(Args)]
struct CamArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Binary PPM input image.
    #[arg(long, conflicts_with_all = ["data", "index"])]
    image: Option<PathBuf>,
    #[arg(long, requires = "index")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    index: Option<usize>,
    #[arg(long, value_enum, default_value_t = Method::Lfi)]
    method: Method,
    /// Output path; with `--method all` one file per method is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Class explained by score and cam; defaults to the model's prediction.
    #[arg(long)]
    target_class: Option<usize>,
    /// Blend a jet-colored map over the image (PPM) instead of grayscale (PGM).
    #[arg(long)]
    overlay: bool,
}

#[derive(Args)]
struct StabilityArgs {
    #[arg(long, num_args = 1.., value_delimiter = ',', required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: u8,
    /// lfi, shuffled, score or cam.
    #[arg(long, default_value = "lfi")]
    method: CamMethod,
}

fn boxes_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".boxes");
    PathBuf::from(s)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut data = load_packed(path).with_context(|| format!("reading dataset {}", path.display()))?;
    let boxes = boxes_path(path);
    if boxes.exists() {
        let text = fs::read_to_string(&boxes).with_context(|| format!("reading {}", boxes.display()))?;
        apply_boxes(&mut data, &text)?;
    }
    Ok(data)
}

fn load_model(path: &Path) -> Result<LfiCamModel> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let data = generate_synthetic_blobs(a.n, a.size, a.size, a.seed)?;
    save_packed(&data, &a.out)?;
    let boxes = boxes_path(&a.out);
    fs::write(&boxes, encode_boxes(&data)).with_context(|| format!("writing {}", boxes.display()))?;
    println!("items,{}", data.len());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let train_set = load_dataset(&a.data)?;
    let test_set = match &a.test {
        Some(p) => load_dataset(p)?,
        None => Dataset::empty(train_set.height, train_set.width, train_set.num_classes),
    };
    let mut rc = RunConfig::default();
    rc.model.backbone.input_size = (train_set.height, train_set.width);
    rc.model.backbone.num_classes = train_set.num_classes;
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        rc.apply_toml(&text).with_context(|| format!("in config {}", path.display()))?;
    }
    for kv in &a.sets {
        let (k, v) = kv.split_once('=').with_context(|| format!("`--set {kv}` is not KEY=VALUE"))?;
        rc.set_raw(k.trim(), v)?;
    }
    if let Some(v) = a.epochs {
        rc.train.epochs = v;
    }
    if let Some(v) = a.seed {
        rc.train.seed = v;
    }
    if let Some(v) = a.lr {
        rc.train.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        rc.train.batch_size = v;
    }
    if a.no_fin {
        rc.model.use_fin = false;
        rc.train.use_fin = false;
    }
    rc.validate()?;

    let mut lines = vec![METRICS_HEADER.to_string()];
    println!("{METRICS_HEADER}");
    let (model, _) = train_model_with(&train_set, &test_set, &rc.train, &rc.model, |m| {
        println!("{m}");
        lines.push(m.to_string());
    })?;
    save_checkpoint(&model, &a.out)?;
    if let Some(log) = &a.log {
        fs::write(log, lines.join("\n") + "\n").with_context(|| format!("writing {}", log.display()))?;
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let data = load_dataset(&a.data)?;
    println!("top1_error,{:.2}", evaluate_top1(&model, &data)?);
    Ok(())
}

fn with_suffix(out: &Path, method: &str, ext: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_{method}.{ext}"))
}

/// Places images of equal height next to each other.
fn side_by_side(images: &[Pnm]) -> Pnm {
    let height = images[0].height;
    let width: usize = images.iter().map(|i| i.width).sum();
    let mut pixels = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for img in images {
            let row = &img.pixels[y * img.width * img.channels..(y + 1) * img.width * img.channels];
            if img.channels == 3 {
                pixels.extend_from_slice(row);
            } else {
                pixels.extend(row.iter().flat_map(|&v| [v, v, v]));
            }
        }
    }
    Pnm {
        width,
        height,
        channels: 3,
        pixels,
    }
}

fn cam(a: CamArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    let image: Tensor<f32> = match (&a.image, &a.data, a.index) {
        (Some(p), _, _) => Pnm::read(p)?.to_tensor()?,
        (None, Some(d), Some(i)) => {
            let data = load_dataset(d)?;
            match data.items.get(i) {
                Some(item) => item.pixels.clone(),
                None => bail!("index {i} out of range for {} images", data.len()),
            }
        }
        _ => bail!("pass --image or --data with --index"),
    };
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let out = model.lfi_cam_forward(&image)?;
    let predicted = out.predicted_class();
    let target = a.target_class.unwrap_or(predicted);
    let methods = match a.method {
        Method::All => vec![Method::Lfi, Method::Score, Method::Cam],
        m => vec![m],
    };
    let ext = if a.overlay { "ppm" } else { "pgm" };
    let mut rendered = Vec::new();
    println!("method,target,path");
    for &m in &methods {
        let (name, map, class) = match m {
            Method::Lfi => ("lfi", out.cam.clone(), predicted),
            Method::Score => ("score", score_cam(&model, &image, target, 64)?.map, target),
            _ => ("cam", vanilla_cam(&model, &image, target)?, target),
        };
        let img = if a.overlay {
            heatmap_overlay(&map, &image)?
        } else {
            heatmap_gray(&map, h, w)
        };
        let path = if methods.len() == 1 {
            a.out.clone()
        } else {
            with_suffix(&a.out, name, ext)
        };
        img.write(&path)?;
        println!("{name},{class},{}", path.display());
        rendered.push(img);
    }
    if rendered.len() > 1 {
        let path = with_suffix(&a.out, "side", "ppm");
        side_by_side(&rendered).write(&path)?;
        println!("side,{target},{}", path.display());
    }
    Ok(())
}

fn stability(a: StabilityArgs) -> Result<()> {
    if a.ckpts.len() < 2 {
        bail!("stability needs at least two checkpoints, got {}", a.ckpts.len());
    }
    let models: Vec<LfiCamModel> = a.ckpts.iter().map(|p| load_model(p)).collect::<Result<_>>()?;
    let data = load_dataset(&a.data)?;
    let ids: Vec<String> = a.ckpts.iter().map(|p| p.display().to_string()).collect();
    let refs: Vec<&LfiCamModel> = models.iter().collect();
    let report = stability_protocol(&ids, &refs, &data, a.threshold, a.method)?;
    println!("model,accuracy,mean_iou");
    println!("{report}");
    eprintln!("baseline {}", ids[report.baseline]);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::FAILURE } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Cam(a) => cam(a),
        Command::Stability(a) => stability(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
