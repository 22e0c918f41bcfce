//! End-to-end run orchestration.
//!
//! This module binds one JSON config file to the whole workflow: corpus
//! synthesis, wide-network pretraining, the two training stages,
//! test-set evaluation, and plot-data emission. The command-line binary
//! is a thin shell over these functions, and integration tests drive
//! them in-process.
//!
//! A run directory is laid out as:
//!
//! ```text
//! <out>/
//!   resolved-config.json        every effective value, written first
//!   data/                       optional materialized scenes (gen_data)
//!   teacher/                    pretrained wide network + its report
//!   run/                        trace.csv, config.json, checkpoints/
//!   eval/                       summary.json, metrics.csv, pixels.csv
//!   report/                     plot-ready CSVs derived from the above
//! ```
//!
//! Scene collections are regenerated in memory from the config at every
//! step — synthesis is deterministic and costs microseconds per scene —
//! so steps depend only on `resolved-config.json` plus the artifacts of
//! earlier steps, and unlabeled ground truth never exists on disk:
//! `gen_data` materializes the labeled splits for inspection but records
//! the unlabeled split as seeds only.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{
    auroc, calibration, evaluate_masks, risk_coverage, rows_to_csv, CalibBin, ClassStats,
    MetricError,
};
use crate::models::{
    load_bundle, pretrain_teacher, save_bundle, ModelError, NetConfig, PretrainConfig,
    PretrainReport, ProbMap, StudentNet, TeacherModel,
};
use crate::objectives::{alpha, gamma, tau};
use crate::synth::container::write_scene;
use crate::synth::{make_corpus, Corpus, DomainParams, Scene, SplitSpec, SynthError};
use crate::train::{
    infer, load_checkpoint, run_stage1, run_stage2, Checkpoint, RunConfig, StageReport,
    TrainError,
};
use crate::uapl::UaplError;

pub type PipelineResult<T> = Result<T, PipelineError>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("incomplete run directory: missing {0}")]
    Incomplete(String),
    #[error("JSON encode/decode failed: {0}")]
    Json(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Uapl(#[from] UaplError),
}

impl PipelineError {
    /// Whether the failure is numerical (non-finite loss) rather than a
    /// validation or I/O problem; drives the process exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            PipelineError::Train(TrainError::NonFiniteLoss { .. })
        )
    }
}

fn json_err(e: serde_json::Error) -> PipelineError {
    PipelineError::Json(e.to_string())
}

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

/// Scene-synthesis side of a run: image geometry, split sizes, and the two
/// generating domains. The wide network pretrains on `corpus` draws; the
/// task splits come from `task`. The gap between the two domains is what
/// the second training stage has to bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub split: SplitSpec,
    pub task: DomainParams,
    pub corpus: DomainParams,
    /// Base seed of the pretraining corpus (disjoint from the split seed).
    pub teacher_seed: u64,
    /// Pretraining corpus size as a multiple of the labeled split.
    pub teacher_factor: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 64,
            width: 64,
            classes: 5,
            split: SplitSpec {
                n_labeled: 10,
                n_unlabeled: 90,
                n_val: 8,
                n_test: 20,
                seed: 0xDA7A,
            },
            // Task scenes are deliberately hard: class intensities packed
            // close together with noise and per-scene offsets of the same
            // magnitude, so ten labeled scenes under-determine the task.
            task: DomainParams {
                shape_count: 4,
                intensity_means: vec![0.35, 0.44, 0.52, 0.60, 0.68],
                noise_std: 0.05,
                deformation_amplitude: 0.35,
                intensity_jitter: 0.06,
            },
            // The pretraining domain is shifted (offset means) and broader
            // (wider jitter), standing in for a foundation model's
            // heterogeneous training distribution.
            corpus: DomainParams {
                shape_count: 4,
                intensity_means: vec![0.30, 0.42, 0.54, 0.66, 0.78],
                noise_std: 0.03,
                deformation_amplitude: 0.45,
                intensity_jitter: 0.12,
            },
            teacher_seed: 0x7EAC_0C0D,
            teacher_factor: 10,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> PipelineResult<()> {
        let bad = |msg: String| {
            Err(PipelineError::Config {
                path: "<data>".into(),
                msg,
            })
        };
        for (who, d) in [("task", &self.task), ("corpus", &self.corpus)] {
            if d.intensity_means.len() != self.classes {
                return bad(format!(
                    "{who} domain has {} intensity means for {} classes",
                    d.intensity_means.len(),
                    self.classes
                ));
            }
        }
        Ok(())
    }
}

/// Everything a run needs, in one diffable file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub run: RunConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> PipelineResult<()> {
        self.data.validate()?;
        self.run.validate()?;
        let net = &self.run.net;
        if net.height != self.data.height
            || net.width != self.data.width
            || net.classes != self.data.classes
        {
            return Err(PipelineError::Config {
                path: "<config>".into(),
                msg: format!(
                    "network geometry {}x{}/{} classes does not match data {}x{}/{}",
                    net.height,
                    net.width,
                    net.classes,
                    self.data.height,
                    self.data.width,
                    self.data.classes
                ),
            });
        }
        Ok(())
    }
}

/// Reads a config file, or returns the defaults when no path is given.
pub fn load_config(path: Option<&Path>) -> PipelineResult<PipelineConfig> {
    let cfg = match path {
        None => PipelineConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::Config {
                path: p.display().to_string(),
                msg: e.to_string(),
            })?;
            serde_json::from_str(&text).map_err(|e| PipelineError::Config {
                path: p.display().to_string(),
                msg: e.to_string(),
            })?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Overrides the run seed and the task-split seed in one motion — the two
/// seeds that make an experiment "a different draw" — leaving the
/// pretraining corpus untouched so every draw shares the same teacher.
pub fn apply_seed_override(cfg: &mut PipelineConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.run.seed = s;
        cfg.data.split.seed = s;
    }
}

/// Writes `resolved-config.json`: every effective value of this run.
pub fn write_resolved(out: &Path, cfg: &PipelineConfig) -> PipelineResult<PathBuf> {
    fs::create_dir_all(out)?;
    let path = out.join("resolved-config.json");
    let mut text = serde_json::to_string_pretty(cfg).map_err(json_err)?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

fn read_resolved(out: &Path) -> PipelineResult<PipelineConfig> {
    let path = out.join("resolved-config.json");
    if !path.exists() {
        return Err(PipelineError::Incomplete(path.display().to_string()));
    }
    load_config(Some(&path))
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

/// Builds every scene collection for `cfg`, deterministically.
pub fn build_corpus(cfg: &PipelineConfig) -> PipelineResult<Corpus> {
    Ok(make_corpus(
        &cfg.data.split,
        &cfg.data.task,
        &cfg.data.corpus,
        cfg.data.teacher_seed,
        cfg.data.teacher_factor,
        cfg.data.classes,
        cfg.data.height,
        cfg.data.width,
    )?)
}

#[derive(Debug, Serialize)]
struct DataManifest<'a> {
    data: &'a DataConfig,
    teacher: usize,
    labeled: usize,
    /// The unlabeled split is recorded as seeds only: the training view
    /// holds no labels, and none are ever written to disk.
    unlabeled_seeds: Vec<u64>,
    val: usize,
    test: usize,
}

/// Per-split counts written by [`gen_data`].
#[derive(Debug, Clone, Serialize)]
pub struct GenDataReport {
    pub teacher: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
    pub dir: String,
}

/// Materializes the labeled scene collections under `<out>/data/` for
/// inspection, and a manifest naming the unlabeled draws by seed. Training
/// never reads these files; it regenerates scenes from the config.
pub fn gen_data(cfg: &PipelineConfig, out: &Path) -> PipelineResult<GenDataReport> {
    let corpus = build_corpus(cfg)?;
    let dir = out.join("data");
    let write_split = |name: &str, scenes: &[Scene], params: &DomainParams| -> PipelineResult<()> {
        let sub = dir.join(name);
        fs::create_dir_all(&sub)?;
        for (i, s) in scenes.iter().enumerate() {
            write_scene(&sub.join(format!("scene_{i:04}.bin")), s, params)?;
        }
        Ok(())
    };
    write_split("teacher", &corpus.teacher, &cfg.data.corpus)?;
    write_split("labeled", &corpus.labeled, &cfg.data.task)?;
    write_split("val", &corpus.val, &cfg.data.task)?;
    write_split("test", &corpus.test, &cfg.data.task)?;

    let manifest = DataManifest {
        data: &cfg.data,
        teacher: corpus.teacher.len(),
        labeled: corpus.labeled.len(),
        unlabeled_seeds: corpus.unlabeled.iter().map(|u| u.seed).collect(),
        val: corpus.val.len(),
        test: corpus.test.len(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(json_err)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;

    Ok(GenDataReport {
        teacher: corpus.teacher.len(),
        labeled: corpus.labeled.len(),
        unlabeled: corpus.unlabeled.len(),
        val: corpus.val.len(),
        test: corpus.test.len(),
        dir: dir.display().to_string(),
    })
}

// ---------------------------------------------------------------------------
// Teacher pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct TeacherArtifact {
    net: NetConfig,
    report: PretrainReport,
}

/// Pretrains the wide prompt-conditioned network on the broad corpus and
/// freezes it under `<out>/teacher/`.
pub fn pretrain(cfg: &PipelineConfig, out: &Path) -> PipelineResult<PretrainReport> {
    let corpus = build_corpus(cfg)?;
    let (teacher, report) =
        pretrain_teacher(&cfg.run.net, &cfg.pretrain, &corpus.teacher, &corpus.val)?;
    let dir = out.join("teacher");
    save_bundle(&dir, "teacher", teacher.params())?;
    let artifact = TeacherArtifact {
        net: cfg.run.net.clone(),
        report: report.clone(),
    };
    let mut text = serde_json::to_string_pretty(&artifact).map_err(json_err)?;
    text.push('\n');
    fs::write(dir.join("pretrain.json"), text)?;
    Ok(report)
}

/// Loads the frozen wide network saved by [`pretrain`].
pub fn load_teacher(out: &Path) -> PipelineResult<TeacherModel> {
    let dir = out.join("teacher");
    let meta_path = dir.join("pretrain.json");
    if !meta_path.exists() {
        return Err(PipelineError::Incomplete(meta_path.display().to_string()));
    }
    let artifact: TeacherArtifact =
        serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(json_err)?;
    let params = load_bundle(&dir, "teacher")?;
    Ok(TeacherModel::new(artifact.net, params)?)
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

fn run_dir(out: &Path) -> PathBuf {
    out.join("run")
}

/// First training stage over the labeled split. Loads the frozen teacher
/// when the config distills, and resumes from a matching checkpoint if
/// `resume_from` names one.
pub fn stage1(
    cfg: &PipelineConfig,
    out: &Path,
    resume_from: Option<&str>,
) -> PipelineResult<(Checkpoint, StageReport)> {
    let corpus = build_corpus(cfg)?;
    let teacher = if cfg.run.stage1_distill {
        Some(load_teacher(out)?)
    } else {
        None
    };
    let resume = resume_from
        .map(|name| load_checkpoint(&run_dir(out).join("checkpoints").join(name)))
        .transpose()?;
    Ok(run_stage1(
        &cfg.run,
        teacher.as_ref(),
        &corpus.labeled,
        &run_dir(out),
        resume,
    )?)
}

/// Second training stage over both splits, continuing from stage 1's final
/// checkpoint (or a named one).
pub fn stage2(
    cfg: &PipelineConfig,
    out: &Path,
    start_from: Option<&str>,
) -> PipelineResult<(Checkpoint, StageReport)> {
    let corpus = build_corpus(cfg)?;
    let teacher = if cfg.run.use_generalized_teacher {
        Some(load_teacher(out)?)
    } else {
        None
    };
    let name = start_from.unwrap_or("stage1-final");
    let ck_dir = run_dir(out).join("checkpoints").join(name);
    if !ck_dir.exists() {
        return Err(PipelineError::Incomplete(ck_dir.display().to_string()));
    }
    let start = load_checkpoint(&ck_dir)?;
    Ok(run_stage2(
        &cfg.run,
        teacher.as_ref(),
        start,
        &corpus.labeled,
        &corpus.unlabeled,
        &run_dir(out),
    )?)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Test-set quality and calibration of a trained compact network, as
/// written to `eval/summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    /// Checkpoint the summary describes, e.g. `stage2-final`.
    pub checkpoint: String,
    pub stage: u8,
    pub iteration: usize,
    pub config_hash: String,
    pub n_test: usize,
    pub classes: usize,
    pub mean_dsc: f64,
    pub mean_jaccard: f64,
    pub mean_hd95: Option<f64>,
    pub mean_asd: Option<f64>,
    pub surface_excluded: usize,
    pub per_class: Vec<ClassStats>,
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub reliability: Vec<CalibBin>,
    /// Entropy-vs-error ranking quality; absent when the test set has no
    /// errors (or no correct pixels) to rank.
    pub auroc: Option<f64>,
    pub aurc: f64,
    pub n_pixels: usize,
}

/// Evaluates the newest final checkpoint (stage 2 when present, stage 1
/// otherwise) on the test split and writes `eval/summary.json`,
/// `eval/metrics.csv` (one row per sample per class), and
/// `eval/pixels.csv` (per-pixel uncertainty and error, the raw material
/// for ranking curves).
pub fn evaluate(cfg: &PipelineConfig, out: &Path) -> PipelineResult<EvalSummary> {
    let checkpoints = run_dir(out).join("checkpoints");
    let name = ["stage2-final", "stage1-final"]
        .into_iter()
        .find(|n| checkpoints.join(n).exists())
        .ok_or_else(|| {
            PipelineError::Incomplete(checkpoints.join("stage*-final").display().to_string())
        })?;
    let ck = load_checkpoint(&checkpoints.join(name))?;
    if ck.config_hash != cfg.run.content_hash() {
        return Err(PipelineError::Config {
            path: checkpoints.join(name).display().to_string(),
            msg: "checkpoint was trained under a different configuration".into(),
        });
    }

    let corpus = build_corpus(cfg)?;
    let net = StudentNet::new(cfg.run.net.clone(), cfg.run.build_map()?)?;

    let mut preds = Vec::with_capacity(corpus.test.len());
    let mut gts = Vec::with_capacity(corpus.test.len());
    let mut probs = Vec::with_capacity(corpus.test.len());
    let mut unc = Vec::new();
    let mut err = Vec::new();
    for scene in &corpus.test {
        let inf = infer(&net, &ck.student, &scene.image)?;
        unc.extend_from_slice(inf.unc.values());
        err.extend(
            inf.label
                .iter()
                .zip(&scene.label)
                .map(|(p, g)| p != g),
        );
        preds.push(inf.label);
        probs.push(inf.prob);
        gts.push(scene.label.clone());
    }

    let eval = evaluate_masks(
        &preds,
        &gts,
        cfg.data.height,
        cfg.data.width,
        cfg.data.classes,
    )?;
    let prob_refs: Vec<&ProbMap> = probs.iter().collect();
    let gt_refs: Vec<&[u8]> = gts.iter().map(|g| g.as_slice()).collect();
    let calib = calibration(&prob_refs, &gt_refs)?;
    let ranking = match auroc(&unc, &err) {
        Ok(v) => Some(v),
        Err(MetricError::SingleClass(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let rc = risk_coverage(&unc, &err)?;

    let summary = EvalSummary {
        checkpoint: name.to_string(),
        stage: ck.stage,
        iteration: ck.iteration,
        config_hash: ck.config_hash.clone(),
        n_test: corpus.test.len(),
        classes: cfg.data.classes,
        mean_dsc: eval.report.mean_dsc,
        mean_jaccard: eval.report.mean_jaccard,
        mean_hd95: eval.report.mean_hd95,
        mean_asd: eval.report.mean_asd,
        surface_excluded: eval.report.surface_excluded_total,
        per_class: eval.report.per_class.clone(),
        ece: calib.ece,
        nll: calib.nll,
        brier: calib.brier,
        reliability: calib.bins.clone(),
        auroc: ranking,
        aurc: rc.aurc,
        n_pixels: unc.len(),
    };

    let dir = out.join("eval");
    fs::create_dir_all(&dir)?;
    let mut text = serde_json::to_string_pretty(&summary).map_err(json_err)?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    fs::write(dir.join("metrics.csv"), rows_to_csv(&eval.rows))?;

    let mut px = String::from("uncertainty,error\n");
    for (u, e) in unc.iter().zip(&err) {
        px.push_str(&format!("{},{}\n", u, *e as u8));
    }
    fs::write(dir.join("pixels.csv"), px)?;

    Ok(summary)
}

// ---------------------------------------------------------------------------
// Plot-data emission
// ---------------------------------------------------------------------------

fn require(path: PathBuf) -> PipelineResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::Incomplete(path.display().to_string()))
    }
}

fn sched_err(e: crate::objectives::ObjectiveError) -> PipelineError {
    PipelineError::Train(TrainError::Objective(e))
}

/// Derives plot-ready CSVs from a completed run directory: loss curves and
/// confident-region coverage from the trace, ramp schedules from the
/// config, and the reliability / risk–coverage data from the evaluation
/// artifacts. Re-running produces identical bytes.
pub fn report(out: &Path) -> PipelineResult<Vec<PathBuf>> {
    let cfg = read_resolved(out)?;
    let trace_path = require(run_dir(out).join("trace.csv"))?;
    let summary_path = require(out.join("eval").join("summary.json"))?;
    let pixels_path = require(out.join("eval").join("pixels.csv"))?;

    let dir = out.join("report");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();

    // Loss curves and coverage, straight from the trace columns.
    let trace = fs::read_to_string(&trace_path)?;
    let mut losses = String::from("iter,l_total,l_sup,l_vis,l_sem,l_pseudo\n");
    let mut coverage = String::from("iter,omega_frac\n");
    for line in trace.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(PipelineError::Incomplete(format!(
                "malformed trace row: {line}"
            )));
        }
        losses.push_str(&format!(
            "{},{},{},{},{},{}\n",
            cells[0], cells[1], cells[2], cells[3], cells[4], cells[5]
        ));
        if !cells[8].is_empty() {
            coverage.push_str(&format!("{},{}\n", cells[0], cells[8]));
        }
    }
    for (name, text) in [("loss_curves.csv", losses), ("coverage.csv", coverage)] {
        let p = dir.join(name);
        fs::write(&p, text)?;
        written.push(p);
    }

    // Ramp schedules recomputed from the config: per-stage iteration t,
    // the squared-exponential ramp, the visual-alignment weight actually
    // applied, and the confidence threshold actually applied.
    let rc = &cfg.run;
    let mut sched = String::from("stage,t,gamma,alpha,tau\n");
    let n1 = rc.stage1_iters;
    let n2 = rc.stage2_iters;
    for t in 0..=n1 {
        let g = gamma(t, n1).map_err(sched_err)?;
        let a = if rc.stage1_distill {
            alpha(t, n1, rc.lambda_vis).map_err(sched_err)?.to_string()
        } else {
            String::new()
        };
        sched.push_str(&format!("1,{t},{g},{a},\n"));
    }
    for t in 0..=n2 {
        let g = gamma(t, n2).map_err(sched_err)?;
        let a = if !rc.use_generalized_teacher {
            String::new()
        } else if rc.stage2_alpha_scheduled {
            alpha(t, n2, rc.lambda_vis).map_err(sched_err)?.to_string()
        } else {
            rc.lambda_vis.to_string()
        };
        let tv = if rc.tau_restart {
            tau(t, n2, rc.tau_base, rc.tau_span).map_err(sched_err)?
        } else {
            tau(n1 + t, n1 + n2, rc.tau_base, rc.tau_span).map_err(sched_err)?
        };
        sched.push_str(&format!("2,{t},{g},{a},{tv}\n"));
    }
    let p = dir.join("schedules.csv");
    fs::write(&p, sched)?;
    written.push(p);

    // Reliability bins from the evaluation summary.
    let summary: EvalSummary =
        serde_json::from_str(&fs::read_to_string(&summary_path)?).map_err(json_err)?;
    let mut rel = String::from("bin_lo,bin_hi,count,confidence,accuracy\n");
    for b in &summary.reliability {
        rel.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lo, b.hi, b.count, b.confidence, b.accuracy
        ));
    }
    let p = dir.join("reliability.csv");
    fs::write(&p, rel)?;
    written.push(p);

    // Risk–coverage points recomputed from the persisted pixel table.
    let px = fs::read_to_string(&pixels_path)?;
    let mut unc = Vec::new();
    let mut err = Vec::new();
    for line in px.lines().skip(1) {
        let (u, e) = line.split_once(',').ok_or_else(|| {
            PipelineError::Incomplete(format!("malformed pixels row: {line}"))
        })?;
        unc.push(u.parse::<f64>().map_err(|e| {
            PipelineError::Incomplete(format!("bad uncertainty value: {e}"))
        })?);
        err.push(e == "1");
    }
    let rc_curve = risk_coverage(&unc, &err)?;
    let mut rcsv = String::from("coverage,risk\n");
    for (c, r) in &rc_curve.points {
        rcsv.push_str(&format!("{c},{r}\n"));
    }
    let p = dir.join("risk_coverage.csv");
    fs::write(&p, rcsv)?;
    written.push(p);

    Ok(written)
}

// ---------------------------------------------------------------------------
// Whole pipeline
// ---------------------------------------------------------------------------

/// Runs the complete workflow into `out`: resolved config, teacher
/// pretraining, both stages, and evaluation. Returns the final summary.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> PipelineResult<EvalSummary> {
    write_resolved(out, cfg)?;
    if cfg.run.stage1_distill || cfg.run.use_generalized_teacher {
        pretrain(cfg, out)?;
    }
    stage1(cfg, out, None)?;
    stage2(cfg, out, None)?;
    evaluate(cfg, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    /// A complete configuration small enough for unit tests: 16×16
    /// three-class scenes and the miniature network.
    pub(crate) fn tiny_config() -> PipelineConfig {
        let net = NetConfig::toy();
        let cfg = PipelineConfig {
            data: DataConfig {
                height: net.height,
                width: net.width,
                classes: net.classes,
                split: SplitSpec {
                    n_labeled: 3,
                    n_unlabeled: 4,
                    n_val: 2,
                    n_test: 3,
                    seed: 11,
                },
                task: DomainParams {
                    shape_count: 2,
                    intensity_means: vec![0.15, 0.5, 0.85],
                    noise_std: 0.02,
                    deformation_amplitude: 0.3,
                    intensity_jitter: 0.05,
                },
                corpus: DomainParams {
                    shape_count: 2,
                    intensity_means: vec![0.2, 0.45, 0.8],
                    noise_std: 0.02,
                    deformation_amplitude: 0.4,
                    intensity_jitter: 0.1,
                },
                teacher_seed: 0xC0FFEE,
                teacher_factor: 10,
            },
            pretrain: PretrainConfig {
                max_iters: 6,
                batch: 2,
                check_every: 6,
                // Plumbing tests need a frozen teacher, not a good one:
                // accept whatever six iterations produce.
                target_dice: 0.0,
                ..PretrainConfig::default()
            },
            run: RunConfig {
                net: net.clone(),
                layer_map: vec![(1, 1), (2, 2)],
                stage1_iters: 4,
                stage2_iters: 3,
                stage1_batch: 2,
                stage2_pairs: 1,
                seed: 0x5EED,
                checkpoint_every: 0,
                ..RunConfig::default()
            },
        };
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn config_round_trips_and_rejects_geometry_mismatch() {
        let cfg = PipelineConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        // Defaults carry the reference optimizer values.
        assert_eq!(cfg.run.lr, 0.01);
        assert_eq!(cfg.run.weight_decay, 1e-4);
        assert_eq!(cfg.run.ema_momentum, 0.99);
        assert_eq!(cfg.run.lambda_vis, 0.1);
        assert_eq!(cfg.run.lambda_pseudo, 0.5);
        assert_eq!(cfg.run.mix_ratio, 0.6);
        assert_eq!((cfg.run.tau_base, cfg.run.tau_span), (0.75, 0.25));

        let mut bad = cfg.clone();
        bad.data.classes = 4;
        bad.data.task.intensity_means.pop();
        bad.data.corpus.intensity_means.pop();
        assert!(matches!(
            bad.validate(),
            Err(PipelineError::Config { .. })
        ));
    }

    #[test]
    fn load_config_names_the_missing_path() {
        let err = load_config(Some(Path::new("/nonexistent/cfg.json"))).unwrap_err();
        match err {
            PipelineError::Config { path, .. } => assert!(path.contains("/nonexistent/cfg.json")),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn gen_data_materializes_labeled_splits_but_only_seeds_for_unlabeled() {
        let cfg = tiny_config();
        let dir = tempdir().unwrap();
        let rep = gen_data(&cfg, dir.path()).unwrap();
        assert_eq!((rep.labeled, rep.unlabeled), (3, 4));
        assert!(dir.path().join("data/labeled/scene_0000.bin").exists());
        assert!(dir.path().join("data/test/scene_0002.bin").exists());
        // No directory of unlabeled scenes exists at all.
        assert!(!dir.path().join("data/unlabeled").exists());
        let manifest = fs::read_to_string(dir.path().join("data/manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
        assert_eq!(v["unlabeled_seeds"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn full_pipeline_writes_every_artifact_and_report_is_idempotent() {
        let cfg = tiny_config();
        let dir = tempdir().unwrap();
        let summary = run_pipeline(&cfg, dir.path()).unwrap();
        assert_eq!(summary.checkpoint, "stage2-final");
        assert_eq!(summary.n_test, 3);
        assert!(summary.mean_dsc.is_finite());

        for rel in [
            "resolved-config.json",
            "teacher/pretrain.json",
            "run/trace.csv",
            "eval/summary.json",
            "eval/metrics.csv",
            "eval/pixels.csv",
        ] {
            assert!(dir.path().join(rel).exists(), "missing {rel}");
        }

        let written = report(dir.path()).unwrap();
        assert_eq!(written.len(), 5);
        let first: Vec<(PathBuf, Vec<u8>)> = written
            .iter()
            .map(|p| (p.clone(), fs::read(p).unwrap()))
            .collect();
        report(dir.path()).unwrap();
        for (p, bytes) in &first {
            assert_eq!(&fs::read(p).unwrap(), bytes, "{} changed", p.display());
        }

        // Reliability has exactly ten bin rows; schedules' stage-2 t=0 row
        // carries the closed-form initial confidence threshold.
        let rel = fs::read_to_string(dir.path().join("report/reliability.csv")).unwrap();
        assert_eq!(rel.lines().count(), 11);
        let sched = fs::read_to_string(dir.path().join("report/schedules.csv")).unwrap();
        let row = sched
            .lines()
            .find(|l| l.starts_with("2,0,"))
            .expect("stage-2 t=0 row");
        let tau0: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((tau0 - 0.751684487).abs() < 5e-10);
    }

    #[test]
    fn report_on_an_incomplete_run_names_whats_missing() {
        let cfg = tiny_config();
        let dir = tempdir().unwrap();
        write_resolved(dir.path(), &cfg).unwrap();
        let err = report(dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::Incomplete(_)));
        assert!(err.to_string().contains("trace.csv"));
    }

    #[test]
    fn evaluate_refuses_checkpoints_from_another_configuration() {
        let cfg = tiny_config();
        let dir = tempdir().unwrap();
        write_resolved(dir.path(), &cfg).unwrap();
        pretrain(&cfg, dir.path()).unwrap();
        stage1(&cfg, dir.path(), None).unwrap();
        let mut other = cfg.clone();
        other.run.lr = 0.123;
        let err = evaluate(&other, dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::Config { .. }));
    }

    /// Offline tool, not part of the suite: prints corpus statistics and
    /// per-class validation dice of a briefly pretrained wide network, for
    /// tuning the benchmark scene distributions.
    #[test]
    #[ignore = "offline benchmark-tuning diagnostic"]
    fn diagnose_pretraining_difficulty() {
        use crate::metrics::overlap_metrics;
        use crate::models::pretrain_teacher;

        let cfg = PipelineConfig::default();
        let corpus = build_corpus(&cfg).unwrap();
        for (i, s) in corpus.val.iter().take(4).enumerate() {
            let mut counts = vec![0usize; cfg.data.classes as usize];
            for &l in &s.label {
                counts[l as usize] += 1;
            }
            println!("val[{i}] class pixel counts: {counts:?}");
        }

        let mut pc = cfg.pretrain.clone();
        pc.max_iters = 600;
        pc.target_dice = 0.0;
        pc.check_every = 600;
        let (model, rep) =
            pretrain_teacher(&cfg.run.net, &pc, &corpus.teacher, &corpus.val).unwrap();
        println!("600-iter val dice {:.4}", rep.val_dice);
        for (i, s) in corpus.val.iter().take(4).enumerate() {
            let prompts = crate::synth::prompt_set_from_label(
                &s.label,
                s.h(),
                s.w(),
                cfg.data.classes,
                0.0,
                0,
            )
            .unwrap();
            let out = model.forward(&s.image, &prompts).unwrap();
            let scores =
                overlap_metrics(&out.prob.argmax(), &s.label, cfg.data.classes).unwrap();
            let d: Vec<String> = scores.dsc.iter().map(|v| format!("{v:.1}")).collect();
            println!("val[{i}] per-class dsc: {d:?}");
        }
    }
}
