//! Command-line front end. `main` only forwards to [`run`], so the whole
//! interface is testable in-process.
//!
//! Exit codes: 0 success, 1 failure, 2 missing input file or bad usage,
//! 3 non-finite loss during training.

use std::ffi::OsString;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset, save_dataset, Sample, SyntheticSpec};
use crate::error::{invalid, Error, Result};
use crate::fsutil::atomic_write;
use crate::geometry::{map_to_volume, BBox, CubeMapping, LandmarkSet};
use crate::imaging::ImageTensor;
use crate::inference::Predictor;
use crate::metrics::{gte_for_scheme, linear_thresholds, nme, BucketAverage, Interocular, MetricReport, SampleMetrics};
use crate::network::Network;
use crate::render::{self, Axis};
use crate::scheme;
use crate::training::{Stage, TrainItem, TrainLog, Trainer};
use crate::volumetric::{encode, EncodeOptions};

#[derive(Parser, Debug)]
#[command(name = "facevox", version, about = "Volumetric 3D landmark encoding, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Encode a landmark file into a voxel grid.
    Encode(EncodeArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Run the training stages.
    Train(TrainArgs),
    /// Score predictions against a labelled dataset.
    Evaluate(EvaluateArgs),
    /// Predict landmarks for one image.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    /// Landmark file (.pts3).
    #[arg(long)]
    pub input: PathBuf,
    /// Grid size as W,H,D.
    #[arg(long, default_value = "16,16,16", value_parser = parse_dims)]
    pub dims: [usize; 3],
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Image-frame box x0,y0,w,h to map from; without it the landmarks are
    /// taken to be in voxel coordinates already.
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<BBox>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a PNG maximum-intensity projection per axis.
    #[arg(long)]
    pub render: bool,
    /// Evaluate every Gaussian over the whole grid.
    #[arg(long)]
    pub no_truncation: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = scheme::FACE12)]
    pub scheme: String,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    PretrainVoxel,
    PretrainCoord,
    Finetune,
    All,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key=value config; applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub preset: Preset,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = StageArg::All)]
    pub stage: StageArg,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from this checkpoint's parameters instead of a fresh init.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub no_truncation: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<id>.pts3` predictions to score instead of running a
    /// model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Report path; the CED table goes next to it with a `.ced` extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Largest CED threshold in GTE percent.
    #[arg(long, default_value_t = 10.0)]
    pub ced_max: f64,
    #[arg(long, default_value_t = 101)]
    pub ced_points: usize,
    /// Use the 2D outer-eye distance as the GTE normaliser.
    #[arg(long)]
    pub interocular_2d: bool,
    /// Pose table mean and std over all samples instead of bucket means.
    #[arg(long)]
    pub sample_mean: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Face box x0,y0,w,h; defaults to the whole image.
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<BBox>,
    /// Output landmark file (.pts3).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `<out>.overlay.png` and `<out>.panel.png`.
    #[arg(long)]
    pub render: bool,
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"))).collect()
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|v| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [w, h, d] if w > 0 && h > 0 && d > 0 => Ok([w, h, d]),
        _ => Err("expected three positive integers W,H,D".into()),
    }
}

fn parse_bbox(s: &str) -> std::result::Result<BBox, String> {
    match parse_list(s)?[..] {
        [x, y, w, h] => BBox::new(x, y, w, h).map_err(|e| e.to_string()),
        _ => Err("expected x0,y0,width,height".into()),
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(io) if io.kind() == ErrorKind::NotFound => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            ErrorKind::NotFound,
            format!("{}: no such file or directory", path.display()),
        )))
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code. Errors go to standard error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Encode(a) => cmd_encode(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Predict(a) => cmd_predict(&a),
    }
}

/// `<stem><suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

pub fn cmd_encode(a: &EncodeArgs) -> Result<()> {
    require(&a.input)?;
    let lm = LandmarkSet::read(&a.input)?;
    let lm = match a.bbox {
        Some(b) => {
            let mapped = map_to_volume(&lm, &CubeMapping::centered(b, a.dims)?)?;
            if mapped.clamped {
                warn!("some landmarks fell outside the volume and were clamped");
            }
            mapped.landmarks
        }
        None => lm,
    };
    let opts = EncodeOptions { truncate: !a.no_truncation };
    let grid = encode(&lm, a.dims, a.sigma, opts)?;
    grid.save(&a.out)?;
    if a.render {
        for axis in Axis::ALL {
            render::save(&render::mip(&grid, axis), &sibling(&a.out, &format!(".mip_{}.png", axis.name())))?;
        }
    }
    info!("wrote {} ({}x{}x{})", a.out.display(), a.dims[0], a.dims[1], a.dims[2]);
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::toy(a.count, a.seed);
    spec.scheme = a.scheme.clone();
    spec.image_size = a.size;
    let samples = generate_synthetic(&spec)?;
    save_dataset(&a.out, &samples)?;
    info!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn read_samples(root: &Path, scheme_id: &str) -> Result<Vec<Sample>> {
    require(root)?;
    let samples = load_dataset(root)?.expect_scheme(scheme_id).collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(invalid(format!("{}: no samples found", root.display())));
    }
    Ok(samples)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let base = match a.preset {
        Preset::Toy => RunConfig::toy(),
        Preset::Paper => RunConfig::paper(),
    };
    let mut config = match &a.config {
        Some(p) => {
            require(p)?;
            let text = std::fs::read_to_string(p)?;
            RunConfig::parse_onto(base, &text).map_err(|e| Error::Parse {
                path: p.clone(),
                msg: e.to_string(),
            })?
        }
        None => base,
    };
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    if a.no_truncation {
        config.train.truncate = false;
    }
    config.validate()?;
    let net = Network::new(config.model.clone())?;
    let samples = read_samples(&a.data, &config.model.scheme)?;
    let items = samples
        .iter()
        .map(|s| s.to_train_item(config.model.hourglass.input_size))
        .collect::<Result<Vec<TrainItem>>>()?;
    let mut state = match &a.resume {
        Some(p) => {
            require(p)?;
            let ck = Checkpoint::load(p)?;
            net.check_state(&ck.state)?;
            ck.state
        }
        None => net.init_state(config.train.seed),
    };
    std::fs::create_dir_all(&a.out)?;
    atomic_write(&a.out.join("config.txt"), config.to_text().as_bytes())?;
    let last_good = a.out.join("last_good.ckpt");
    let snapshot = |state: &crate::network::ModelState, path: &Path| {
        Checkpoint {
            config: config.clone(),
            state: state.clone(),
        }
        .save(path)
    };
    snapshot(&state, &last_good)?;

    let stages: Vec<Stage> = match a.stage {
        StageArg::All => Stage::ALL.to_vec(),
        StageArg::PretrainVoxel => vec![Stage::PretrainVoxel],
        StageArg::PretrainCoord => vec![Stage::PretrainCoord],
        StageArg::Finetune => vec![Stage::Finetune],
    };
    let mut trainer = Trainer::new(&net, &config.train)?;
    for stage in stages {
        info!("stage {stage}: {} samples", items.len());
        let mut log = TrainLog::default();
        let every = config.train.checkpoint_every;
        let mut hook = |st: Stage, epoch: usize, s: &crate::network::ModelState| -> Result<()> {
            if every > 0 && (epoch + 1).is_multiple_of(every) {
                snapshot(s, &last_good)?;
            }
            info!("{st} epoch {} done", epoch + 1);
            Ok(())
        };
        let res = trainer.run_stage(stage, &items, &mut state, &mut log, Some(&mut hook));
        log.write(&a.out.join(format!("{stage}.log")))?;
        if let Err(e) = res {
            if matches!(e, Error::NonFinite { .. }) {
                error!("{e}; keeping {}", last_good.display());
            }
            return Err(e);
        }
        if let Some(r) = log.last() {
            info!("{stage} finished: L_vox={:e} L_coord={:e}", r.l_vox, r.l_coord);
        }
        snapshot(&state, &a.out.join(format!("{stage}.ckpt")))?;
        snapshot(&state, &last_good)?;
    }
    snapshot(&state, &a.out.join("model.ckpt"))
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let (scheme_id, predictor) = match (&a.checkpoint, &a.predictions) {
        (Some(p), _) => {
            require(p)?;
            let pr = Predictor::new(Checkpoint::load(p)?)?;
            (pr.scheme().to_string(), Some(pr))
        }
        (None, Some(dir)) => {
            require(dir)?;
            (String::new(), None)
        }
        (None, None) => return Err(invalid("need --checkpoint or --predictions")),
    };
    require(&a.data)?;
    let mut reader = load_dataset(&a.data)?;
    if predictor.is_some() {
        reader = reader.expect_scheme(scheme_id.clone());
    }
    let samples = reader.collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(invalid(format!("{}: no samples found", a.data.display())));
    }
    let preds: Vec<LandmarkSet> = match (&predictor, &a.predictions) {
        (Some(pr), _) => {
            let inputs: Vec<(&ImageTensor, Option<BBox>)> = samples.iter().map(|s| (&s.image, Some(s.bbox))).collect();
            pr.predict_batch(&inputs)?.into_iter().map(|p| p.landmarks).collect()
        }
        (None, Some(dir)) => samples
            .iter()
            .map(|s| {
                let path = dir.join(format!("{}.pts3", s.sample_id));
                require(&path)?;
                LandmarkSet::read(&path)
            })
            .collect::<Result<_>>()?,
        (None, None) => unreachable!(),
    };
    let norm = if a.interocular_2d { Interocular::TwoD } else { Interocular::ThreeD };
    let mut per_sample = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&preds) {
        if p.scheme() != s.landmarks.scheme() {
            return Err(invalid(format!(
                "sample {}: prediction scheme {} vs ground truth {}",
                s.sample_id,
                p.scheme(),
                s.landmarks.scheme()
            )));
        }
        per_sample.push(SampleMetrics {
            sample_id: s.sample_id.clone(),
            gte: gte_for_scheme(p, &s.landmarks, norm)?,
            nme: nme(p, &s.landmarks, &BBox::enclosing(&s.landmarks)?)?,
            yaw_bucket: s.yaw_bucket,
        });
    }
    let avg = if a.sample_mean { BucketAverage::AllSamples } else { BucketAverage::BucketMeans };
    let report = MetricReport::build(per_sample, &linear_thresholds(a.ced_max, a.ced_points), avg)?;
    atomic_write(&a.out, report.to_text().as_bytes())?;
    atomic_write(&a.out.with_extension("ced"), report.ced_text().as_bytes())?;
    info!("GTE {:.4}%  NME {:.4}%", report.gte_mean, report.nme_mean);
    Ok(())
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    require(&a.checkpoint)?;
    require(&a.image)?;
    let pr = Predictor::new(Checkpoint::load(&a.checkpoint)?)?;
    let image = ImageTensor::load(&a.image)?;
    let p = pr.predict(&image, a.bbox)?;
    p.landmarks.write(&a.out)?;
    if a.render {
        render::save(&render::overlay(&image, p.landmarks.points()), &sibling(&a.out, ".overlay.png"))?;
        let input_pts: Vec<_> = {
            let (h, w) = pr.config().model.hourglass.input_size;
            let frame = crate::data::InputFrame {
                bbox: a.bbox.unwrap_or(BBox::new(0.0, 0.0, image.width() as f64, image.height() as f64)?),
                input_size: (h, w),
            };
            frame.to_input(&p.landmarks)?.points().to_vec()
        };
        render::save(&render::panel(&p.input, &p.volume, &input_pts), &sibling(&a.out, ".panel.png"))?;
    }
    Ok(())
}
