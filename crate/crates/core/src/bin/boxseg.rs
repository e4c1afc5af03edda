use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use boxseg::ast::{predict, train_segmentation};
use boxseg::bench::{generate_synthetic_scene, perturb_scene, PerturbMode, PerturbSpec, SynthSpec};
use boxseg::features::compute_features;
use boxseg::grabcut::grabcut_scene;
use boxseg::pipeline::{
    background_labels, checkpoint_features, foreground_stage, read_checkpoint_file, read_labels, read_scene,
    run_pipeline_to_dir, train_classifier_stage, write_checkpoint_file, write_labels_file, write_scene, EvalReport,
    FgMode, PipelineConfig, PipelineError,
};
use boxseg::{partition_points, Provenance};

#[derive(Parser)]
#[command(name = "boxseg", version, about = "Point pseudo labels from boxes and subcloud tags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum FgInit {
    Box,
    Grabcut,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic indoor scene with ground truth.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the seed of the spec.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the inside/outside/ambiguous category of every point as CSV.
    Partition {
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Foreground labels by 3D GrabCut inside every box.
    Grabcut {
        scene: PathBuf,
        #[arg(long)]
        voxel_size: Option<f64>,
        #[arg(long)]
        k_sp: Option<usize>,
        #[arg(long)]
        k_gmm: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        outer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the subcloud tag classifier and save a checkpoint.
    PcamTrain {
        scene: PathBuf,
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long, default_value = "classifier.net")]
        out: PathBuf,
    },
    /// Background labels from a trained classifier.
    PcamLabel {
        scene: PathBuf,
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.2)]
        fraction: f64,
        /// Keep every background label instead of the top fraction.
        #[arg(long)]
        no_refine: bool,
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the segmentation net on foreground and background pseudo labels.
    AstTrain {
        scene: PathBuf,
        #[arg(long, value_enum, default_value = "box")]
        fg_init: FgInit,
        #[arg(long)]
        cfg: Option<PathBuf>,
        /// Background labels from `pcam-label`; computed in place when absent.
        #[arg(long)]
        bg_labels: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        /// Also write per-point predictions of the trained net.
        #[arg(long)]
        out_predictions: Option<PathBuf>,
    },
    /// Compare labels against the scene's ground truth.
    Eval {
        scene: PathBuf,
        labels: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        report: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perturb the boxes of a scene.
    Perturb {
        scene: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        mag: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage and write all artifacts to a directory.
    Pipeline {
        #[arg(long, conflicts_with = "cfg")]
        preset: Option<String>,
        #[arg(long)]
        cfg: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        eval_scene: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Foreground mode: ast (box priors) or grabcut.
        #[arg(long)]
        mode: Option<String>,
    },
}

fn load_config(cfg: Option<&Path>) -> Result<PipelineConfig, PipelineError> {
    match cfg {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::new("config", e).at(p))?;
            PipelineConfig::from_toml(&text).map_err(|e| e.at(p))
        }
        None => Ok(PipelineConfig::paper()),
    }
}

fn write_output(path: Option<&Path>, text: &str, stage: &str) -> Result<(), PipelineError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| PipelineError::new(stage, e).at(p)),
        None => match io::stdout().write_all(text.as_bytes()) {
            Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(PipelineError::new(stage, e)),
            _ => Ok(()),
        },
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth { spec, seed, out } => {
            let mut spec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| PipelineError::new("synth", e).at(&p))?;
                    toml::from_str::<SynthSpec>(&text).map_err(|e| PipelineError::new("synth", e).at(&p))?
                }
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let synth = generate_synthetic_scene(&spec).map_err(|e| PipelineError::new("synth", e))?;
            write_scene(&out, &synth.scene, "synth")?;
            eprintln!(
                "synth: {} points, {} boxes, {} subclouds",
                synth.scene.len(),
                synth.scene.boxes.len(),
                synth.scene.subclouds.len()
            );
        }
        Command::Partition { scene, out } => {
            let scene = read_scene(&scene)?;
            let map = partition_points(&scene);
            let mut buf = Vec::new();
            map.write_csv(&mut buf).map_err(|e| PipelineError::new("partition", e))?;
            write_output(out.as_deref(), &String::from_utf8_lossy(&buf), "partition")?;
        }
        Command::Grabcut {
            scene,
            voxel_size,
            k_sp,
            k_gmm,
            lambda,
            outer,
            seed,
            out,
        } => {
            let scene = read_scene(&scene)?;
            let mut params = PipelineConfig::default().grabcut;
            if let Some(v) = voxel_size {
                params.voxel_size = v;
            }
            if k_sp.is_some() {
                params.k_sp = k_sp;
            }
            if let Some(v) = k_gmm {
                params.k_gmm = v;
            }
            if let Some(v) = lambda {
                params.lambda_pair = v;
            }
            if let Some(v) = outer {
                params.outer_iters = v;
            }
            let partition = partition_points(&scene);
            let labels =
                grabcut_scene(&scene, &partition, &params, seed).map_err(|e| PipelineError::new("grabcut", e))?;
            write_labels_file(&out, &labels, "grabcut")?;
            eprintln!("grabcut: {} foreground points", labels.labeled_count());
        }
        Command::PcamTrain { scene, cfg, out } => {
            let cfg = load_config(cfg.as_deref())?;
            let scene = read_scene(&scene)?;
            let features = compute_features(&scene, &cfg.train.features);
            let net = train_classifier_stage(&cfg, &scene, &features)?;
            write_checkpoint_file(&out, &net, cfg.train.features.clone())?;
        }
        Command::PcamLabel {
            scene,
            checkpoint,
            fraction,
            no_refine,
            cfg,
            out,
        } => {
            let cfg = load_config(cfg.as_deref())?;
            let scene = read_scene(&scene)?;
            let ckpt = read_checkpoint_file(&checkpoint)?;
            let mut train = cfg.seeded_train();
            train.features = checkpoint_features(&ckpt);
            train.refine_fraction = fraction;
            train.refine = !no_refine;
            train.validate().map_err(|e| PipelineError::new("config", e))?;
            let features = compute_features(&scene, &train.features);
            let partition = partition_points(&scene);
            let labels = background_labels(&ckpt.net, &scene, &features, &partition, &train)?;
            write_labels_file(&out, &labels, "pcam-label")?;
            eprintln!("pcam-label: {} background labels", labels.labeled_count());
        }
        Command::AstTrain {
            scene,
            fg_init,
            cfg,
            bg_labels,
            out_model,
            out_labels,
            out_predictions,
        } => {
            let mut cfg = load_config(cfg.as_deref())?;
            cfg.mode = match fg_init {
                FgInit::Box => FgMode::Ast,
                FgInit::Grabcut => FgMode::Grabcut,
            };
            let train = cfg.seeded_train();
            let scene = read_scene(&scene)?;
            let partition = partition_points(&scene);
            let features = compute_features(&scene, &train.features);
            let background = match bg_labels {
                Some(p) => read_labels(&p, Provenance::RefinedPcam)?,
                None => {
                    let classifier = train_classifier_stage(&cfg, &scene, &features)?;
                    background_labels(&classifier, &scene, &features, &partition, &train)?
                }
            };
            let mut initial = foreground_stage(&cfg, &scene, &partition)?;
            initial.merge_from(&background);
            let seg = train_segmentation(&scene, &features, &partition, &initial, &train)
                .map_err(|e| PipelineError::new("ast-train", e))?;
            write_checkpoint_file(&out_model, &seg.net, train.features.clone())?;
            write_labels_file(&out_labels, &seg.labels, "ast-train")?;
            if let Some(p) = out_predictions {
                let pred = predict(&seg.net, &scene, &features, &train).map_err(|e| PipelineError::new("predict", e))?;
                let map = pred
                    .iter()
                    .map(|&c| Some(boxseg::PseudoLabel::new(c, 1.0, Provenance::AstPseudoLabel)))
                    .collect();
                write_labels_file(&p, &map, "predict")?;
            }
            if let Some(last) = seg.epoch_loss.last() {
                eprintln!("ast-train: {} epochs, final loss {last:.4}", seg.epoch_loss.len());
            }
        }
        Command::Eval {
            scene,
            labels,
            report,
            out,
        } => {
            let scene = read_scene(&scene)?;
            let gt = scene
                .ground_truth
                .as_ref()
                .ok_or_else(|| PipelineError::new("eval", "scene has no ground truth"))?;
            let labels = read_labels(&labels, Provenance::AstPseudoLabel)?;
            if labels.len() != scene.len() {
                return Err(PipelineError::new(
                    "eval",
                    format!("{} labels for {} points", labels.len(), scene.len()),
                ));
            }
            let pred: Vec<u8> = labels
                .iter()
                .map(|l| l.map_or(boxseg::scene::UNLABELED, |l| l.class_id))
                .collect();
            let r = EvalReport::from_predictions(gt, &pred, scene.class_count)?;
            let text = match report {
                ReportFormat::Json => r.to_json() + "\n",
                ReportFormat::Csv => r.to_csv(),
            };
            write_output(out.as_deref(), &text, "eval")?;
        }
        Command::Perturb {
            scene,
            mode,
            mag,
            seed,
            out,
        } => {
            let m = PerturbMode::parse(&mode)
                .ok_or_else(|| PipelineError::new("perturb", format!("unknown mode '{mode}'")))?;
            let scene = read_scene(&scene)?;
            let spec = PerturbSpec::from_magnitude(m, mag, seed);
            let moved = perturb_scene(&scene, &spec).map_err(|e| PipelineError::new("perturb", e))?;
            write_scene(&out, &moved, "perturb")?;
        }
        Command::Pipeline {
            preset,
            cfg,
            scene,
            eval_scene,
            out_dir,
            seed,
            mode,
        } => {
            let mut cfg = match preset {
                Some(name) => PipelineConfig::preset(&name)
                    .ok_or_else(|| PipelineError::new("config", format!("unknown preset '{name}'")))?,
                None => load_config(cfg.as_deref())?,
            };
            if scene.is_some() {
                cfg.paths.scene = scene;
            }
            if eval_scene.is_some() {
                cfg.paths.eval_scene = eval_scene;
            }
            if out_dir.is_some() {
                cfg.paths.out_dir = out_dir;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = mode {
                cfg.mode =
                    FgMode::parse(&m).ok_or_else(|| PipelineError::new("config", format!("unknown mode '{m}'")))?;
            }
            let out = run_pipeline_to_dir(&cfg)?;
            for t in &out.timings {
                eprintln!("{:<12} {:>8.2}s", t.stage, t.seconds);
            }
            if let Some(r) = &out.report {
                println!("miou {:.4}", r.miou);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("BOXSEG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // the global pool can only be set once; a second call is harmless
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
