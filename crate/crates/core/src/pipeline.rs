//! End-to-end pseudo labeling and training, with persisted artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ast::{box_prior_labels, predict, train_segmentation};
use crate::bench::{label_quality, miou, perturb_scene, ConfusionMatrix, LabelQuality, PerturbSpec};
use crate::features::{compute_features, FeatureMode, FeatureParams};
use crate::grabcut::{grabcut_scene, GrabCutParams};
use crate::net::{read_checkpoint, write_checkpoint, Checkpoint, PointNetLite, TrainConfig};
use crate::partition::{partition_points, PartitionMap, PointCategory};
use crate::pcam::{background_pseudo_labels, compute_pcam, refine_top_fraction, train_classifier};
use crate::scene::{parse_labels, serialize_labels, write_label_records, Provenance, PseudoLabelMap, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FgMode {
    /// Foreground from naive box priors, separated by attention during training.
    Ast,
    /// Foreground from per-box 3D GrabCut.
    Grabcut,
}

impl FgMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ast" | "box" => Some(Self::Ast),
            "grabcut" => Some(Self::Grabcut),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub scene: Option<PathBuf>,
    /// Held-out scene used for the evaluation report.
    pub eval_scene: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: FgMode,
    pub seed: u64,
    /// Epochs of the tag classifier; the segmentation net uses `train.epochs`.
    pub classifier_epochs: usize,
    pub grabcut: GrabCutParams,
    pub train: TrainConfig,
    pub perturb: Option<PerturbSpec>,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: FgMode::Ast,
            seed: 0,
            classifier_epochs: 20,
            grabcut: GrabCutParams::default(),
            train: TrainConfig::default(),
            perturb: None,
            paths: Paths::default(),
        }
    }
}

impl PipelineConfig {
    /// Attention self-training with the published hyperparameters: τ = 0.8,
    /// α = 0.001, refinement to the top 20%, lr 0.01 decayed 5% per epoch.
    pub fn paper() -> Self {
        let mut cfg = Self::default();
        cfg.mode = FgMode::Ast;
        cfg.train = TrainConfig {
            learning_rate: 0.01,
            decay: 0.95,
            alpha: 0.001,
            tau: 0.8,
            refine_fraction: 0.2,
            refine: true,
            attention: true,
            pseudo_label: true,
            features: FeatureParams {
                mode: FeatureMode::Geometric,
                ..FeatureParams::default()
            },
            ..TrainConfig::default()
        };
        cfg
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "default" => Some(Self::default()),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.grabcut.validate().map_err(|e| PipelineError::config(e.to_string()))?;
        self.train.validate().map_err(|e| PipelineError::config(e.to_string()))?;
        if let Some(p) = &self.perturb {
            p.validate().map_err(|e| PipelineError::config(e.to_string()))?;
        }
        Ok(())
    }

    /// Training config with the global seed applied.
    pub fn seeded_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: String,
    pub path: Option<PathBuf>,
    pub message: String,
}

impl PipelineError {
    pub fn new(stage: &str, message: impl fmt::Display) -> Self {
        Self {
            stage: stage.to_string(),
            path: None,
            message: message.to_string(),
        }
    }

    fn config(message: String) -> Self {
        Self::new("config", message)
    }

    pub fn at(mut self, path: &Path) -> Self {
        self.path = Some(path.to_path_buf());
        self
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.message)?;
        if let Some(p) = &self.path {
            write!(f, " ({})", p.display())?;
        }
        Ok(())
    }
}

impl std::error::Error for PipelineError {}

fn stage<T, E: fmt::Display>(name: &str, r: Result<T, E>) -> Result<T, PipelineError> {
    r.map_err(|e| PipelineError::new(name, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub labeled_fraction: f64,
}

impl EvalReport {
    /// Builds a report from per-point predictions (255 for unlabeled).
    pub fn from_predictions(gt: &[u8], pred: &[u8], classes: usize) -> Result<Self, PipelineError> {
        let cm = stage("eval", ConfusionMatrix::from_labels(gt, pred, classes))?;
        let r = stage("eval", miou(&cm))?;
        let evaluated = gt.iter().filter(|&&g| g != crate::scene::UNLABELED).count();
        let labeled = gt
            .iter()
            .zip(pred)
            .filter(|(&g, &p)| g != crate::scene::UNLABELED && p != crate::scene::UNLABELED)
            .count();
        Ok(Self {
            miou: r.miou,
            per_class_iou: r.per_class,
            confusion: cm,
            labeled_fraction: if evaluated == 0 { 0.0 } else { labeled as f64 / evaluated as f64 },
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou\n");
        for (c, v) in self.per_class_iou.iter().enumerate() {
            match v {
                Some(v) => s.push_str(&format!("{c},{v}\n")),
                None => s.push_str(&format!("{c},\n")),
            }
        }
        s.push_str(&format!("miou,{}\nlabeled_fraction,{}\n", self.miou, self.labeled_fraction));
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Everything a pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub partition: PartitionMap,
    pub foreground: PseudoLabelMap,
    pub background: PseudoLabelMap,
    pub initial: PseudoLabelMap,
    /// Initial labels plus the last ambiguous-point pseudo labels.
    pub final_labels: PseudoLabelMap,
    pub classifier: PointNetLite,
    pub net: PointNetLite,
    /// Network prediction for every training-scene point.
    pub predictions: Vec<u8>,
    /// Report on the held-out scene when one is given, else on the training scene.
    pub report: Option<EvalReport>,
    /// Quality of the foreground labels of the final map on points inside boxes.
    pub in_box_quality: Option<LabelQuality>,
    pub epoch_loss: Vec<f64>,
    pub timings: Vec<StageTime>,
}

struct Timer(Vec<StageTime>, Instant);

impl Timer {
    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.0.push(StageTime {
            stage: name.to_string(),
            seconds: (now - self.1).as_secs_f64(),
        });
        self.1 = now;
    }
}

/// Foreground labels for the configured mode: box priors or GrabCut.
pub fn foreground_stage(cfg: &PipelineConfig, scene: &Scene, partition: &PartitionMap) -> Result<PseudoLabelMap, PipelineError> {
    Ok(match cfg.mode {
        FgMode::Ast => box_prior_labels(scene, partition),
        FgMode::Grabcut => stage("grabcut", grabcut_scene(scene, partition, &cfg.grabcut, cfg.seed))?,
    })
}

/// Trains the subcloud tag classifier for `classifier_epochs` epochs.
pub fn train_classifier_stage(cfg: &PipelineConfig, scene: &Scene, features: &Array2<f64>) -> Result<PointNetLite, PipelineError> {
    let classifier_cfg = TrainConfig {
        epochs: cfg.classifier_epochs,
        ..cfg.seeded_train()
    };
    Ok(stage("pcam-train", train_classifier(scene, features, &classifier_cfg))?.0)
}

/// PCAM background labels, refined to the top fraction when `train.refine` is set.
pub fn background_labels(
    classifier: &PointNetLite,
    scene: &Scene,
    features: &Array2<f64>,
    partition: &PartitionMap,
    train: &TrainConfig,
) -> Result<PseudoLabelMap, PipelineError> {
    let field = stage("pcam-label", compute_pcam(classifier, scene, features, partition, train))?;
    let entries = background_pseudo_labels(&field);
    let kept = if train.refine {
        refine_top_fraction(&entries, train.refine_fraction)
    } else {
        entries
    };
    let mut background = PseudoLabelMap::unlabeled(scene.len());
    for (i, l) in kept {
        background.set(i, l);
    }
    Ok(background)
}

/// Runs every stage in memory. Box perturbation, when configured, is applied
/// to `scene` first; `eval_scene` is used unmodified.
pub fn run_pipeline(cfg: &PipelineConfig, scene: &Scene, eval_scene: Option<&Scene>) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let train = cfg.seeded_train();
    let mut timer = Timer(Vec::new(), Instant::now());
    let perturbed;
    let scene = match &cfg.perturb {
        Some(spec) => {
            perturbed = stage("perturb", perturb_scene(scene, spec))?;
            timer.lap("perturb");
            &perturbed
        }
        None => scene,
    };

    let partition = partition_points(scene);
    timer.lap("partition");

    let foreground = foreground_stage(cfg, scene, &partition)?;
    timer.lap("foreground");

    let features = compute_features(scene, &train.features);
    timer.lap("features");

    let classifier = train_classifier_stage(cfg, scene, &features)?;
    timer.lap("pcam-train");

    let background = background_labels(&classifier, scene, &features, &partition, &train)?;
    timer.lap("pcam-label");

    let mut initial = foreground.clone();
    initial.merge_from(&background);
    let seg = stage("ast-train", train_segmentation(scene, &features, &partition, &initial, &train))?;
    timer.lap("ast-train");

    let predictions = stage("predict", predict(&seg.net, scene, &features, &train))?;
    let report = match (eval_scene, &scene.ground_truth) {
        (Some(held), _) => {
            let gt = held
                .ground_truth
                .as_ref()
                .ok_or_else(|| PipelineError::new("eval", "held-out scene has no ground truth"))?;
            let f = compute_features(held, &train.features);
            let pred = stage("eval", predict(&seg.net, held, &f, &train))?;
            Some(EvalReport::from_predictions(gt, &pred, held.class_count)?)
        }
        (None, Some(gt)) => Some(EvalReport::from_predictions(gt, &predictions, scene.class_count)?),
        (None, None) => None,
    };
    let in_box_quality = match &scene.ground_truth {
        Some(gt) => {
            let masked: Vec<u8> = gt
                .iter()
                .enumerate()
                .map(|(i, &g)| {
                    if partition.category(i) == PointCategory::Background {
                        crate::scene::UNLABELED
                    } else {
                        g
                    }
                })
                .collect();
            Some(stage("eval", label_quality(&seg.labels, &masked, Some(&partition)))?)
        }
        None => None,
    };
    timer.lap("eval");

    Ok(PipelineOutput {
        partition,
        foreground,
        background,
        initial,
        final_labels: seg.labels,
        classifier,
        net: seg.net,
        predictions,
        report,
        in_box_quality,
        epoch_loss: seg.epoch_loss,
        timings: timer.0,
    })
}

pub fn read_scene(path: &Path) -> Result<Scene, PipelineError> {
    let f = File::open(path).map_err(|e| PipelineError::new("read-scene", e).at(path))?;
    Scene::parse(BufReader::new(f)).map_err(|e| PipelineError::new("read-scene", e).at(path))
}

fn create(path: &Path, stage_name: &str) -> Result<BufWriter<File>, PipelineError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| PipelineError::new(stage_name, e).at(path))
}

pub fn read_labels(path: &Path, provenance: Provenance) -> Result<PseudoLabelMap, PipelineError> {
    let f = File::open(path).map_err(|e| PipelineError::new("read-labels", e).at(path))?;
    parse_labels(BufReader::new(f), provenance).map_err(|e| PipelineError::new("read-labels", e).at(path))
}

pub fn write_scene(path: &Path, scene: &Scene, stage_name: &str) -> Result<(), PipelineError> {
    let mut w = create(path, stage_name)?;
    scene.write(&mut w).map_err(|e| PipelineError::new(stage_name, e).at(path))?;
    w.flush().map_err(|e| PipelineError::new(stage_name, e).at(path))
}

pub fn read_checkpoint_file(path: &Path) -> Result<Checkpoint, PipelineError> {
    let f = File::open(path).map_err(|e| PipelineError::new("checkpoint", e).at(path))?;
    read_checkpoint(BufReader::new(f)).map_err(|e| PipelineError::new("checkpoint", e).at(path))
}

pub fn write_labels_file(path: &Path, labels: &PseudoLabelMap, stage_name: &str) -> Result<(), PipelineError> {
    let mut w = create(path, stage_name)?;
    serialize_labels(labels, labels.len(), &mut w).map_err(|e| PipelineError::new(stage_name, e).at(path))?;
    w.flush().map_err(|e| PipelineError::new(stage_name, e).at(path))
}

pub fn write_checkpoint_file(path: &Path, net: &PointNetLite, features: FeatureParams) -> Result<(), PipelineError> {
    let mut meta = BTreeMap::new();
    meta.insert("features".to_string(), features.mode.as_str().to_string());
    meta.insert("local_k".to_string(), features.local_k.to_string());
    meta.insert("local_radius".to_string(), format!("{:?}", features.local_radius));
    meta.insert("column_radius".to_string(), format!("{:?}", features.column_radius));
    let mut w = create(path, "checkpoint")?;
    write_checkpoint(&Checkpoint { net: net.clone(), meta }, &mut w)
        .map_err(|e| PipelineError::new("checkpoint", e).at(path))?;
    w.flush().map_err(|e| PipelineError::new("checkpoint", e).at(path))
}

/// Feature parameters recorded in a checkpoint's metadata.
pub fn checkpoint_features(ckpt: &Checkpoint) -> FeatureParams {
    let d = FeatureParams::default();
    FeatureParams {
        mode: ckpt
            .meta
            .get("features")
            .and_then(|m| FeatureMode::parse(m))
            .unwrap_or(d.mode),
        local_k: ckpt
            .meta
            .get("local_k")
            .and_then(|v| v.parse().ok())
            .unwrap_or(d.local_k),
        local_radius: ckpt
            .meta
            .get("local_radius")
            .and_then(|v| v.parse().ok())
            .unwrap_or(d.local_radius),
        column_radius: ckpt
            .meta
            .get("column_radius")
            .and_then(|v| v.parse().ok())
            .unwrap_or(d.column_radius),
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config_hash: String,
    seed: u64,
    mode: FgMode,
    points: usize,
    stages: Vec<&'a str>,
    artifacts: Vec<String>,
}

/// Runs the pipeline on the configured paths and writes every artifact to
/// the output directory.
pub fn run_pipeline_to_dir(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    let scene_path = cfg
        .paths
        .scene
        .as_deref()
        .ok_or_else(|| PipelineError::config("no scene path configured".into()))?;
    let out_dir = cfg
        .paths
        .out_dir
        .as_deref()
        .ok_or_else(|| PipelineError::config("no output directory configured".into()))?;
    let scene = read_scene(scene_path)?;
    let eval = cfg.paths.eval_scene.as_deref().map(read_scene).transpose()?;
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::new("output", e).at(out_dir))?;
    let out = run_pipeline(cfg, &scene, eval.as_ref())?;

    let mut artifacts = Vec::new();
    let mut path = |name: &str| {
        artifacts.push(name.to_string());
        out_dir.join(name)
    };
    let p = path("partition.csv");
    let mut w = create(&p, "partition")?;
    out.partition
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| PipelineError::new("partition", e).at(&p))?;
    write_labels_file(&path("foreground_labels.txt"), &out.foreground, "foreground")?;
    write_labels_file(&path("background_labels.txt"), &out.background, "pcam-label")?;
    write_labels_file(&path("initial_labels.txt"), &out.initial, "ast-train")?;
    write_labels_file(&path("final_labels.txt"), &out.final_labels, "ast-train")?;
    let p = path("predictions.txt");
    let mut w = create(&p, "predict")?;
    write_label_records(
        out.predictions.iter().map(|&c| Some((c, 1.0))),
        out.predictions.len(),
        &mut w,
    )
    .map_err(|e| PipelineError::new("predict", e).at(&p))?;
    w.flush().map_err(|e| PipelineError::new("predict", e).at(&p))?;
    write_checkpoint_file(&path("classifier.net"), &out.classifier, cfg.train.features.clone())?;
    write_checkpoint_file(&path("model.net"), &out.net, cfg.train.features.clone())?;
    if let Some(r) = &out.report {
        let p = path("report.json");
        fs::write(&p, r.to_json()).map_err(|e| PipelineError::new("eval", e).at(&p))?;
    }
    let p = path("config.toml");
    fs::write(&p, cfg.to_toml()).map_err(|e| PipelineError::new("output", e).at(&p))?;
    let manifest = Manifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        mode: cfg.mode,
        points: scene.len(),
        stages: out.timings.iter().map(|t| t.stage.as_str()).collect(),
        artifacts,
    };
    // wall times change between runs, so they live outside the manifest
    let p = out_dir.join("timings.json");
    fs::write(&p, serde_json::to_string_pretty(&out.timings).expect("timings serialize"))
        .map_err(|e| PipelineError::new("output", e).at(&p))?;
    let p = out_dir.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| PipelineError::new("output", e).at(&p))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_values() {
        let p = PipelineConfig::paper();
        assert_eq!(p.mode, FgMode::Ast);
        assert_eq!(p.train.tau, 0.8);
        assert_eq!(p.train.alpha, 0.001);
        assert_eq!(p.train.refine_fraction, 0.2);
        assert_eq!(p.train.learning_rate, 0.01);
        assert_eq!(p.train.decay, 0.95);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let p = PipelineConfig::paper();
        let back = PipelineConfig::from_toml(&p.to_toml()).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.hash(), p.hash());
        assert_ne!(PipelineConfig::default().hash(), p.hash());
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }
}
