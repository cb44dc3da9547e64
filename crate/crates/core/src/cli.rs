use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use facefit::camera::{decompose, BoundingBox};
use facefit::cascade::{train_with_progress, RegressorKind, TrainConfig, TrainingSample};
use facefit::eval::{bins_from_edges, breakdown, mape, nme, EvalRecord};
use facefit::gt_fit::{fit, FitOptions};
use facefit::io::{self, DatasetManifest, GroundTruth, Prediction};
use facefit::shape_model::build_model;
use facefit::synth::{generate, make_base_model, SynthConfig};
use facefit::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "facefit", version, about = "3D face alignment with a cascaded coupled regressor")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with exact ground truth.
    Synth(SynthArgs),
    /// Build a deformable model from 3D landmark scans.
    BuildModel(BuildModelArgs),
    /// Fit (M, p) to every annotation of a dataset.
    FitGt(FitGtArgs),
    /// Train a cascade.
    Train(TrainArgs),
    /// Align one image.
    Align(AlignArgs),
    /// Align every image of a dataset from its annotated boxes.
    Predict(PredictArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON generator configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildModelArgs {
    /// Manifest listing one scan CSV per line.
    #[arg(long)]
    scans: PathBuf,
    #[arg(long)]
    num_bases: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitGtArgs {
    /// Annotation CSV.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Ground-truth CSV from fit-gt; fitted on the fly when omitted.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value = "linear")]
    kind: RegressorKind,
    /// Defaults to 10 for linear and 150 for fern cascades.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long, default_value_t = 120.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    cascade: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Face box as `x,y,w,h`.
    #[arg(long, value_parser = parse_bbox, allow_hyphen_values = true)]
    bbox: BoundingBox,
    /// Writes the state after every layer.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    cascade: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    /// Yaw bin edges in degrees, comma separated.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-180,-54,-18,18,54,180"
    )]
    bins: Vec<f64>,
    /// Output directory for global.csv, bins.csv and landmarks.csv.
    #[arg(long)]
    out: PathBuf,
}

fn parse_bbox(s: &str) -> std::result::Result<BoundingBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("{t:?} is not a number")))
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        &[x, y, w, h] => BoundingBox::new(x, y, w, h).map_err(|e| e.to_string()),
        _ => Err(format!("expected x,y,w,h, got {} values", v.len())),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::BuildModel(a) => build(a),
        Command::FitGt(a) => fit_gt(a),
        Command::Train(a) => train(a),
        Command::Align(a) => align(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => evaluate(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            serde_json::from_str::<SynthConfig>(&text).map_err(|e| Error::Dataset {
                path: path.clone(),
                message: e.to_string(),
            })?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (model, scans) = make_base_model(&cfg)?;
    let samples = generate(&model, &cfg)?;
    io::write_synth_dataset(&a.out, &cfg, &model, &scans, &samples)?;
    eprintln!(
        "wrote {} train and {} test images to {}",
        cfg.num_train,
        cfg.num_test,
        a.out.display()
    );
    Ok(())
}

fn build(a: BuildModelArgs) -> Result<()> {
    let scans = io::load_scans(&a.scans)?;
    let model = build_model(&scans, a.num_bases)?;
    io::save_deformable_model(&a.out, &model)
}

fn fit_dataset(ds: &DatasetManifest, model: &facefit::DeformableModel, opts: &FitOptions) -> Result<Vec<GroundTruth>> {
    let results = ds
        .entries
        .par_iter()
        .map(|e| {
            fit(&e.annotation, model, opts)
                .map_err(|err| Error::Dataset {
                    path: ds.image_file(e),
                    message: format!("ground-truth fit failed: {err}"),
                })
                .map(|r| (r.converged, GroundTruth { m: r.m, p: r.p }))
        })
        .collect::<Result<Vec<_>>>()?;
    let unconverged = results.iter().filter(|(c, _)| !c).count();
    if unconverged > 0 {
        eprintln!("warning: {unconverged} fits stopped at the iteration limit");
    }
    Ok(results.into_iter().map(|(_, g)| g).collect())
}

fn fit_gt(a: FitGtArgs) -> Result<()> {
    let ds = io::load_dataset(&a.dataset)?;
    let model = io::load_deformable_model(&a.model)?;
    let opts = FitOptions {
        tol: a.tol,
        max_iters: a.max_iters,
        ..FitOptions::default()
    };
    let gts = fit_dataset(&ds, &model, &opts)?;
    let rows: Vec<_> = ds.entries.iter().map(|e| e.image_path.clone()).zip(gts).collect();
    io::save_ground_truth(&a.out, &rows)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut ds = io::load_dataset(&a.dataset)?;
    let model = io::load_deformable_model(&a.model)?;
    let mut cfg = TrainConfig::for_kind(a.kind);
    if let Some(k) = a.layers {
        cfg.layers = k;
    }
    cfg.lambda = a.lambda;
    cfg.seed = a.seed;
    cfg.validate()?;

    let gts = match &a.gt {
        Some(path) => {
            ds.attach_ground_truth(io::load_ground_truth(path)?, path)?;
            ds.entries
                .iter()
                .map(|e| e.ground_truth.clone().expect("attached above"))
                .collect()
        }
        None => fit_dataset(&ds, &model, &FitOptions::default())?,
    };
    let samples = ds
        .entries
        .par_iter()
        .zip(gts)
        .map(|(e, g)| {
            Ok(TrainingSample {
                image: ds.load_image(e)?,
                annotation: e.annotation.clone(),
                m: g.m,
                p: g.p,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cm = train_with_progress(&samples, &model, &cfg, |p| {
        eprintln!("layer={} mean_nme={:.6}", p.layer, p.mean_nme);
    })?;
    io::save_cascade(&a.out, &cm)
}

fn align(a: AlignArgs) -> Result<()> {
    let cm = io::load_cascade(&a.cascade)?;
    let img = io::load_image(&a.image)?;
    let r = cm.align(&img, &a.bbox, a.trace.is_some())?;
    if let (Some(path), Some(trace)) = (&a.trace, &r.per_layer_trace) {
        io::save_trace(path, trace)?;
    }
    let pred = Prediction {
        image_path: a.image.display().to_string(),
        m: r.m,
        landmarks: r.landmarks2d,
        vis: r.vis,
    };
    io::save_predictions(&a.out, &[pred])
}

fn predict(a: PredictArgs) -> Result<()> {
    let cm = io::load_cascade(&a.cascade)?;
    let ds = io::load_dataset(&a.dataset)?;
    let preds = ds
        .entries
        .par_iter()
        .map(|e| {
            let img = ds.load_image(e)?;
            let r = cm.align(&img, &e.annotation.bbox, false).map_err(|err| Error::Dataset {
                path: ds.image_file(e),
                message: format!("alignment failed: {err}"),
            })?;
            Ok(Prediction {
                image_path: e.image_path.clone(),
                m: r.m,
                landmarks: r.landmarks2d,
                vis: r.vis,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    io::save_predictions(&a.out, &preds)
}

fn write_rows(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let ds = io::load_dataset(&a.dataset)?;
    let preds = io::load_predictions(&a.predictions)?;
    let bins = bins_from_edges(&a.bins.iter().map(|d| d.to_radians()).collect::<Vec<_>>())?;
    let mut by_path: std::collections::HashMap<&str, &Prediction> =
        preds.iter().map(|p| (p.image_path.as_str(), p)).collect();
    let mut records = Vec::with_capacity(ds.entries.len());
    let mut yaws = Vec::with_capacity(ds.entries.len());
    for e in &ds.entries {
        let p = by_path.remove(e.image_path.as_str()).ok_or_else(|| Error::Dataset {
            path: a.predictions.clone(),
            message: format!("no prediction for {:?}", e.image_path),
        })?;
        let ann = &e.annotation;
        records.push(EvalRecord {
            estimated: p.landmarks.clone(),
            truth: ann.landmarks.clone(),
            vis: ann.vis.clone(),
            d: (ann.bbox.width * ann.bbox.height).sqrt(),
        });
        yaws.push(decompose(&p.m)?.pose.yaw);
    }
    let global = [
        format!("images,{}", records.len()),
        format!("mape,{}", mape(&records)?),
        format!("nme,{}", nme(&records)?),
    ];
    let b = breakdown(&records, &yaws, &bins)?;
    let bin_rows: Vec<String> = b
        .pose_bins
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{}",
                r.bin.lo.to_degrees(),
                r.bin.hi.to_degrees(),
                r.bin.center().to_degrees(),
                r.count,
                opt(r.nme)
            )
        })
        .collect();
    let landmark_rows: Vec<String> = b
        .landmark_errors
        .iter()
        .enumerate()
        .map(|(j, e)| format!("{},{}", j + 1, opt(*e)))
        .collect();
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_rows(&a.out.join("global.csv"), "metric,value", &global)?;
    write_rows(&a.out.join("bins.csv"), "yaw_lo_deg,yaw_hi_deg,yaw_center_deg,count,nme", &bin_rows)?;
    write_rows(&a.out.join("landmarks.csv"), "landmark,nme", &landmark_rows)?;
    eprintln!("nme={} mape={}", nme(&records)?, mape(&records)?);
    Ok(())
}
