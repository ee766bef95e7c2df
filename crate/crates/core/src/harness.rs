//! Dataset collection, evaluation, sweeps and metrics reports.
//!
//! Every run is a pure function of its config and seed: per-record work uses
//! its own ChaCha stream, parallel results are gathered in record order, and
//! success rates are computed from integer counts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autoprompt::{self, HttpSelector, SelectionContext, SelectorMode};
use crate::geometry::{self, Camera, CameraIntrinsics, CameraSamplingConfig, DepthImage};
use crate::objective::LossWeights;
use crate::planner::{self, KeyFramePlan, KeyFrameStep, PlanOutcome, StepOutcome};
use crate::predictor::{
    CurriculumSpec, EpochStats, GeometricPredictor, Observation, PredictedAction, Predictor, SolverConfig, ToyConfig,
    ToyModel, ToySample,
};
use crate::prompt::{self, CrayonPrompt, NoiseRemedy, Pattern, PromptRecord};
use crate::sim::{self, ExecParams, GroundTruthAction, JointMotion, Scene, SceneDescription, SceneKind};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed json in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path} does not match its recorded hash")]
    HashMismatch { path: PathBuf },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Predict(#[from] crate::predictor::PredictError),
    #[error(transparent)]
    Step(#[from] planner::StepError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Geometry(#[from] geometry::GeometryError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Short hex digest of a config's canonical JSON.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Independent ChaCha stream for item `index` of a seeded run.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        })
    }
}

impl FromStr for Split {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test_seen" => Ok(Split::TestSeen),
            "test_unseen" => Ok(Split::TestUnseen),
            other => Err(HarnessError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionConfig {
    pub seen_kinds: Vec<SceneKind>,
    pub unseen_kinds: Vec<SceneKind>,
    pub train: usize,
    pub test_seen: usize,
    pub test_unseen: usize,
    pub intrinsics: CameraIntrinsics,
    pub camera: CameraSamplingConfig,
    /// Fresh scenes tried per record before it is skipped.
    pub max_retries: usize,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            seen_kinds: vec![SceneKind::Drawer, SceneKind::Door, SceneKind::Lid, SceneKind::Button],
            unseen_kinds: vec![SceneKind::Lever],
            train: 2000,
            test_seen: 400,
            test_unseen: 100,
            intrinsics: CameraIntrinsics::desk_default(),
            camera: CameraSamplingConfig::default(),
            max_retries: 20,
        }
    }
}

impl CollectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seen_kinds.is_empty() {
            return Err(HarnessError::Config("no seen scene kinds".into()));
        }
        if self.test_unseen > 0 && self.unseen_kinds.is_empty() {
            return Err(HarnessError::Config("unseen split requested without unseen kinds".into()));
        }
        if let Some(k) = self.seen_kinds.iter().find(|k| self.unseen_kinds.contains(k)) {
            return Err(HarnessError::Config(format!("{k} is both seen and unseen")));
        }
        self.camera.validate()?;
        self.intrinsics.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordFiles {
    pub rgb: String,
    pub depth: String,
    pub rgb_sha256: String,
    pub depth_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: usize,
    pub split: Split,
    pub scene: SceneDescription,
    pub camera: Camera,
    pub prompt: PromptRecord,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub remedies: Vec<NoiseRemedy>,
    pub gt: GroundTruthAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<RecordFiles>,
}

impl DatasetRecord {
    pub fn kind(&self) -> SceneKind {
        self.scene.kind
    }

    pub fn full_prompt(&self) -> CrayonPrompt {
        self.prompt.validate().expect("collected prompts are valid")
    }

    pub fn scene(&self) -> Result<Scene> {
        Ok(Scene::from_description(&self.scene)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub seed: u64,
    pub config_fingerprint: String,
    pub records: Vec<DatasetRecord>,
    /// Records abandoned after exhausting their retries.
    pub skipped_records: usize,
    /// Scenes discarded while retrying.
    pub rejected_scenes: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

fn collect_one(cfg: &CollectionConfig, seed: u64, id: usize, split: Split, kind: SceneKind) -> (Option<DatasetRecord>, usize) {
    let mut rng = stream_rng(seed, id as u64);
    let k = cfg.intrinsics;
    for attempt in 0..cfg.max_retries {
        let scene = Scene::build(kind, rng.random());
        let e = geometry::sample_camera_pose(&mut rng, &cfg.camera, &scene.focus());
        let Ok(gt) = sim::collect_ground_truth(&scene, &k, &e, &mut rng, JointMotion::Open) else { continue };
        let Ok(derived) = prompt::derive_2d_prompts(&gt, &k, &e, Pattern::PZYM) else { continue };
        let record = DatasetRecord {
            id,
            split,
            scene: scene.description(),
            camera: Camera::new(k, e),
            prompt: derived.prompt.to_record(),
            remedies: derived.remedies,
            gt,
            files: None,
        };
        return (Some(record), attempt);
    }
    (None, cfg.max_retries)
}

/// Collects train, seen-test and unseen-test records. Scene kinds cycle within
/// each split; unseen kinds never appear in the training split.
pub fn run_collection(cfg: &CollectionConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for (split, n, kinds) in [
        (Split::Train, cfg.train, &cfg.seen_kinds),
        (Split::TestSeen, cfg.test_seen, &cfg.seen_kinds),
        (Split::TestUnseen, cfg.test_unseen, &cfg.unseen_kinds),
    ] {
        for j in 0..n {
            jobs.push((jobs.len(), split, kinds[j % kinds.len()]));
        }
    }
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(id, split, kind)| collect_one(cfg, seed, id, split, kind))
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let (mut skipped_records, mut rejected_scenes) = (0, 0);
    for (record, rejected) in results {
        rejected_scenes += rejected;
        match record {
            Some(r) => records.push(r),
            None => skipped_records += 1,
        }
    }
    Ok(Dataset {
        seed,
        config_fingerprint: fingerprint(cfg),
        records,
        skipped_records,
        rejected_scenes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "fraction")]
pub enum PromptSource {
    Gt,
    Auto,
    Perturbed(f64),
}

impl fmt::Display for PromptSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptSource::Gt => f.write_str("gt"),
            PromptSource::Auto => f.write_str("auto"),
            PromptSource::Perturbed(x) => write!(f, "perturbed={x}"),
        }
    }
}

impl FromStr for PromptSource {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(PromptSource::Gt),
            "auto" => Ok(PromptSource::Auto),
            _ => {
                let f = s
                    .strip_prefix("perturbed=")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|f| (0.0..=1.0).contains(f))
                    .ok_or_else(|| HarnessError::Config(format!("unknown prompt source {s:?}")))?;
                Ok(PromptSource::Perturbed(f))
            }
        }
    }
}

/// How the automatic prompter picks its lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AutoSelector {
    #[default]
    Oracle,
    Heuristic,
    External(String),
}

#[derive(Clone, Copy)]
pub enum PredictorRef<'a> {
    Model(&'a dyn Predictor),
    GroundTruth,
}

impl PredictorRef<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            PredictorRef::Model(p) => match p.provenance() {
                crate::predictor::Provenance::Solver => "solver",
                crate::predictor::Provenance::ToyModel => "toy",
                crate::predictor::Provenance::GroundTruth => "gt",
            },
            PredictorRef::GroundTruth => "gt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub name: String,
    pub pattern: Pattern,
    pub source: PromptSource,
    #[serde(default)]
    pub selector: AutoSelector,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub id: usize,
    pub kind: SceneKind,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub displacement: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_err_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_err_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_err_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zy_dot: Option<f64>,
    /// Largest angle between a prompted direction and its exact 2D
    /// direction, for perturbed and automatic prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_err_deg: Option<f64>,
}

impl TrialResult {
    fn failed(rec: &DatasetRecord, reason: impl Into<String>) -> Self {
        Self {
            id: rec.id,
            kind: rec.kind(),
            success: false,
            failure: Some(reason.into()),
            displacement: 0.0,
            z_err_deg: None,
            y_err_deg: None,
            m_err_deg: None,
            zy_dot: None,
            prompt_err_deg: None,
        }
    }
}

fn max_direction_error(a: &CrayonPrompt, b: &CrayonPrompt) -> f64 {
    prompt::DirectionAxis::ALL
        .iter()
        .filter_map(|x| Some(geometry::angle_deg_2d(&a.direction(*x)?, &b.direction(*x)?)))
        .fold(0.0, f64::max)
}

/// Prompt a trial is run with, and for perturbed or automatic prompts its
/// worst angular deviation from the exact prompt.
pub fn trial_prompt(rec: &DatasetRecord, spec: &EvalSpec, frame: &sim::Frame, scene: &Scene) -> std::result::Result<(CrayonPrompt, Option<f64>), String> {
    let full = rec.full_prompt();
    match spec.source {
        PromptSource::Gt => full.restricted(spec.pattern).map(|p| (p, None)).map_err(|e| e.to_string()),
        PromptSource::Perturbed(f) => {
            let mut rng = stream_rng(spec.seed, rec.id as u64);
            let p = prompt::perturb(&full, f, &mut rng);
            let err = max_direction_error(&p, &full);
            p.restricted(spec.pattern).map(|p| (p, Some(err))).map_err(|e| e.to_string())
        }
        PromptSource::Auto => {
            let center = autoprompt::detect_contact(frame).map_err(|e| e.to_string())?;
            let candidates = autoprompt::sample_candidates(center);
            let http;
            let mode = match &spec.selector {
                AutoSelector::Oracle => SelectorMode::Oracle,
                AutoSelector::Heuristic => SelectorMode::Heuristic,
                AutoSelector::External(url) => {
                    http = HttpSelector::new(url.clone());
                    SelectorMode::External(&http)
                }
            };
            let ctx = SelectionContext {
                reference: Some(&full),
                depth: Some(&frame.depth),
                camera: Some(&rec.camera),
                scene: Some(scene),
                image: Some(&frame.rgb),
                motion: rec.gt.motion,
                needs_move: true,
                task: ExecParams::for_task(rec.kind(), rec.gt.motion).primitive.to_string(),
            };
            let choice = autoprompt::select(&candidates, &mode, &ctx).map_err(|e| e.to_string())?;
            let auto = autoprompt::assemble(&candidates, &choice).map_err(|e| e.to_string())?;
            let err = max_direction_error(&auto, &full);
            auto.restricted(spec.pattern).map(|p| (p, Some(err))).map_err(|e| e.to_string())
        }
    }
}

/// One end-to-end episode: prompt, predict, execute, judge.
pub fn run_trial(rec: &DatasetRecord, predictor: PredictorRef<'_>, spec: &EvalSpec) -> TrialResult {
    let mut scene = match rec.scene() {
        Ok(s) => s,
        Err(e) => return TrialResult::failed(rec, format!("scene: {e}")),
    };
    let cam = rec.camera;
    let frame = sim::render_frame(&scene, &cam.intrinsics, &cam.extrinsics);
    let (prompt, prompt_err_deg) = match trial_prompt(rec, spec, &frame, &scene) {
        Ok(p) => p,
        Err(e) => return TrialResult::failed(rec, format!("prompt: {e}")),
    };
    let action = match predictor {
        PredictorRef::GroundTruth => PredictedAction::from_ground_truth(&rec.gt, prompt.contact_px()),
        PredictorRef::Model(p) => {
            let obs = Observation {
                depth: &frame.depth,
                camera: &cam,
                scene: Some(&scene),
            };
            match p.predict(&prompt, &obs) {
                Ok(a) => a,
                Err(e) => {
                    let mut t = TrialResult::failed(rec, format!("prediction: {e}"));
                    t.prompt_err_deg = prompt_err_deg;
                    return t;
                }
            }
        }
    };
    let gt = &rec.gt;
    let mut trial = TrialResult {
        id: rec.id,
        kind: rec.kind(),
        success: false,
        failure: None,
        displacement: 0.0,
        z_err_deg: Some(geometry::angle_deg(&action.z_axis, &gt.z_axis)),
        y_err_deg: Some(geometry::angle_deg(&action.y_axis, &gt.y_axis)),
        m_err_deg: action.move_dir.zip(gt.move_dir).map(|(a, b)| geometry::angle_deg(&a, &b)),
        zy_dot: Some(action.z_axis.dot(&action.y_axis).abs()),
        prompt_err_deg,
    };
    let params = ExecParams::for_task(rec.kind(), gt.motion);
    if params.primitive.requires_move_prompt() && action.move_dir.is_none() {
        trial.failure = Some("no_move_direction".into());
        return trial;
    }
    match sim::execute(&mut scene, &action.to_contact_action(), &params) {
        Ok(r) => {
            trial.success = r.success;
            trial.displacement = r.part_displacement;
            trial.failure = r
                .failure_reason
                .map(|f| serde_json::to_value(f).expect("enum serializes").as_str().unwrap_or_default().to_string());
        }
        Err(e) => trial.failure = Some(format!("execution: {e}")),
    }
    trial
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
}

impl TaskStats {
    fn new(trials: usize, successes: usize) -> Self {
        Self {
            trials,
            successes,
            success_rate: rate(successes, trials),
        }
    }
}

/// Exact `successes / trials`, 0 when there are no trials.
pub fn rate(successes: usize, trials: usize) -> f64 {
    if trials == 0 {
        0.0
    } else {
        successes as f64 / trials as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub within_10deg: usize,
}

impl AngleStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        Some(Self {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            max: v[n - 1],
            within_10deg: v.iter().filter(|x| **x <= 10.0).count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub name: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub predictor: String,
    pub prompt_source: String,
    pub pattern: Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub per_task: BTreeMap<String, TaskStats>,
    pub failures: BTreeMap<String, usize>,
    pub angular_error_deg: BTreeMap<String, AngleStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_zy_dot: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_curve: Vec<EpochStats>,
}

impl MetricsReport {
    /// Aggregates raw trials; the same trials always give the same report.
    pub fn from_trials(meta: ReportMeta, trials: &[TrialResult]) -> Self {
        let successes = trials.iter().filter(|t| t.success).count();
        let mut per_task: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut failures = BTreeMap::new();
        for t in trials {
            let e = per_task.entry(t.kind.to_string()).or_default();
            e.0 += 1;
            e.1 += t.success as usize;
            if let Some(f) = &t.failure {
                let key = f.split(':').next().unwrap_or(f).to_string();
                *failures.entry(key).or_insert(0) += 1;
            }
        }
        let mut angular_error_deg = BTreeMap::new();
        let axes: [(&str, fn(&TrialResult) -> Option<f64>); 4] = [
            ("z", |t| t.z_err_deg),
            ("y", |t| t.y_err_deg),
            ("m", |t| t.m_err_deg),
            ("prompt", |t| t.prompt_err_deg),
        ];
        for (name, get) in axes {
            let values: Vec<f64> = trials.iter().filter_map(get).collect();
            if let Some(s) = AngleStats::from_values(&values) {
                angular_error_deg.insert(name.to_string(), s);
            }
        }
        let max_zy_dot = trials.iter().filter_map(|t| t.zy_dot).reduce(f64::max);
        Self {
            meta,
            trials: trials.len(),
            successes,
            success_rate: rate(successes, trials.len()),
            per_task: per_task.into_iter().map(|(k, (n, s))| (k, TaskStats::new(n, s))).collect(),
            failures,
            angular_error_deg,
            max_zy_dot,
            loss_curve: Vec::new(),
        }
    }

    pub fn task_rate(&self, kinds: &[SceneKind]) -> f64 {
        let (n, s) = kinds
            .iter()
            .filter_map(|k| self.per_task.get(k.as_str()))
            .fold((0, 0), |(n, s), t| (n + t.trials, s + t.successes));
        rate(s, n)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub meta: ReportMeta,
    pub trials: Vec<TrialResult>,
}

impl EvalRun {
    pub fn report(&self) -> MetricsReport {
        MetricsReport::from_trials(self.meta.clone(), &self.trials)
    }
}

pub fn run_eval(records: &[&DatasetRecord], predictor: PredictorRef<'_>, spec: &EvalSpec, config_fingerprint: &str) -> EvalRun {
    let trials = records.par_iter().map(|r| run_trial(r, predictor, spec)).collect();
    EvalRun {
        meta: ReportMeta {
            name: spec.name.clone(),
            seed: spec.seed,
            config_fingerprint: config_fingerprint.to_string(),
            predictor: predictor.name().to_string(),
            prompt_source: spec.source.to_string(),
            pattern: spec.pattern,
        },
        trials,
    }
}

pub const NOISE_FRACTIONS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];

pub fn run_noise_sweep(
    records: &[&DatasetRecord],
    predictor: PredictorRef<'_>,
    fractions: &[f64],
    seed: u64,
    config_fingerprint: &str,
) -> Vec<EvalRun> {
    fractions
        .iter()
        .map(|f| {
            let spec = EvalSpec {
                name: format!("noise_{f}"),
                pattern: Pattern::PZYM,
                source: PromptSource::Perturbed(*f),
                selector: AutoSelector::Oracle,
                seed,
            };
            run_eval(records, predictor, &spec, config_fingerprint)
        })
        .collect()
}

pub fn run_prompt_ablation(records: &[&DatasetRecord], predictor: PredictorRef<'_>, seed: u64, config_fingerprint: &str) -> Vec<EvalRun> {
    Pattern::ALL
        .iter()
        .map(|p| {
            let spec = EvalSpec {
                name: format!("pattern_{p}"),
                pattern: *p,
                source: PromptSource::Gt,
                selector: AutoSelector::Oracle,
                seed,
            };
            run_eval(records, predictor, &spec, config_fingerprint)
        })
        .collect()
}

/// Toy-model training examples, one per record, in record order.
pub fn toy_samples(records: &[&DatasetRecord], cfg: &ToyConfig) -> Vec<ToySample> {
    records
        .par_iter()
        .map(|r| {
            let scene = r.scene().expect("recorded scene rebuilds");
            let frame = sim::render_frame(&scene, &r.camera.intrinsics, &r.camera.extrinsics);
            ToySample::new(cfg, r.gt, r.full_prompt(), &frame.depth, &r.camera)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub toy: ToyConfig,
    pub curriculum: CurriculumSpec,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            toy: ToyConfig::default(),
            curriculum: CurriculumSpec::default(),
            epochs: 60,
        }
    }
}

/// The three loss configurations compared by the loss ablation.
pub fn ablation_weights() -> [(&'static str, LossWeights); 3] {
    [
        ("text", LossWeights { text: 1.0, ortho: 0.0, proj: 0.0 }),
        ("text_ortho", LossWeights { text: 1.0, ortho: 1.0, proj: 0.0 }),
        ("all", LossWeights { text: 1.0, ortho: 1.0, proj: 1.0 }),
    ]
}

pub struct LossAblation {
    pub models: Vec<ToyModel>,
    pub runs: Vec<EvalRun>,
}

impl LossAblation {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.runs
            .iter()
            .zip(&self.models)
            .map(|(run, m)| MetricsReport {
                loss_curve: m.curve.clone(),
                ..run.report()
            })
            .collect()
    }
}

pub fn run_loss_ablation(
    train: &[&DatasetRecord],
    test: &[&DatasetRecord],
    cfg: &TrainConfig,
    seed: u64,
    config_fingerprint: &str,
) -> Result<LossAblation> {
    let samples = toy_samples(train, &cfg.toy);
    let mut models = Vec::new();
    let mut runs = Vec::new();
    for (name, w) in ablation_weights() {
        let model = crate::predictor::train_toy_model(&samples, &cfg.toy, &w, &cfg.curriculum, cfg.epochs, seed)?;
        let spec = EvalSpec {
            name: format!("loss_{name}"),
            pattern: Pattern::PZYM,
            source: PromptSource::Gt,
            selector: AutoSelector::Oracle,
            seed,
        };
        runs.push(run_eval(test, PredictorRef::Model(&model), &spec, config_fingerprint));
        models.push(model);
    }
    Ok(LossAblation { models, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LongHorizonConfig {
    pub kinds: Vec<SceneKind>,
    pub trials: usize,
    pub intrinsics: CameraIntrinsics,
    pub camera: CameraSamplingConfig,
    pub max_retries: usize,
}

impl Default for LongHorizonConfig {
    fn default() -> Self {
        Self {
            kinds: vec![SceneKind::Drawer, SceneKind::Door, SceneKind::Lid],
            trials: 60,
            intrinsics: CameraIntrinsics::desk_default(),
            camera: CameraSamplingConfig::default(),
            max_retries: 20,
        }
    }
}

/// A recorded two-step episode that can be replayed from its description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongHorizonTrial {
    pub id: usize,
    pub scene: SceneDescription,
    pub plan: KeyFramePlan,
    pub steps: Vec<StepOutcome>,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

const LONG_HORIZON_STEPS: [JointMotion; 2] = [JointMotion::Open, JointMotion::Close];

fn longhorizon_one(cfg: &LongHorizonConfig, predictor: &dyn Predictor, seed: u64, id: usize) -> Option<LongHorizonTrial> {
    let mut rng = stream_rng(seed, id as u64);
    let kind = cfg.kinds[id % cfg.kinds.len()];
    let k = cfg.intrinsics;
    for _ in 0..cfg.max_retries {
        let mut scene = Scene::build(kind, rng.random());
        let e = geometry::sample_camera_pose(&mut rng, &cfg.camera, &scene.focus());
        let camera = Camera::new(k, e);
        // The first key-frame must be promptable, otherwise the scene is redrawn.
        let Ok(first_gt) = sim::collect_ground_truth(&scene, &k, &e, &mut rng, LONG_HORIZON_STEPS[0]) else { continue };
        let Ok(first) = prompt::derive_2d_prompts(&first_gt, &k, &e, Pattern::PZYM) else { continue };
        let description = scene.description();
        let mut steps = Vec::new();
        let mut plan_steps = Vec::new();
        let mut failure = None;
        for (i, motion) in LONG_HORIZON_STEPS.into_iter().enumerate() {
            let prompt = if i == 0 {
                first.prompt
            } else {
                let derived = sim::collect_ground_truth(&scene, &k, &e, &mut rng, motion)
                    .map_err(|e| e.to_string())
                    .and_then(|gt| prompt::derive_2d_prompts(&gt, &k, &e, Pattern::PZYM).map_err(|e| e.to_string()));
                match derived {
                    Ok(d) => d.prompt,
                    Err(msg) => {
                        failure = Some(format!("step {i} prompt: {msg}"));
                        break;
                    }
                }
            };
            let primitive = ExecParams::for_task(kind, motion).primitive;
            let step = KeyFrameStep::new(&prompt, primitive, motion);
            plan_steps.push(step.clone());
            match planner::execute_step(&mut scene, &camera, i, &step, predictor, &ExecParams::default()) {
                Ok(outcome) => {
                    let ok = outcome.result.success;
                    steps.push(outcome);
                    if !ok {
                        break;
                    }
                }
                Err(err) => {
                    failure = Some(err.to_string());
                    break;
                }
            }
        }
        let success = failure.is_none() && steps.len() == LONG_HORIZON_STEPS.len() && steps.iter().all(|s| s.result.success);
        return Some(LongHorizonTrial {
            id,
            scene: description,
            plan: KeyFramePlan {
                camera,
                steps: plan_steps,
            },
            steps,
            success,
            failure,
        });
    }
    None
}

/// Pull-then-push episodes. Each key-frame prompt is derived from the live
/// scene at that step, then recorded into a replayable plan.
pub fn run_longhorizon(cfg: &LongHorizonConfig, predictor: &dyn Predictor, seed: u64) -> Vec<LongHorizonTrial> {
    (0..cfg.trials)
        .into_par_iter()
        .filter_map(|id| longhorizon_one(cfg, predictor, seed, id))
        .collect()
}

pub fn longhorizon_report(trials: &[LongHorizonTrial], seed: u64, config_fingerprint: &str, predictor: &str) -> MetricsReport {
    let as_trials: Vec<TrialResult> = trials
        .iter()
        .map(|t| TrialResult {
            id: t.id,
            kind: t.scene.kind,
            success: t.success,
            failure: if t.success {
                None
            } else {
                Some(t.failure.clone().unwrap_or_else(|| {
                    let idx = t.steps.iter().position(|s| !s.result.success).unwrap_or(t.steps.len());
                    format!("step_{idx}")
                }))
            },
            displacement: t.steps.last().map(|s| s.result.part_displacement).unwrap_or(0.0),
            z_err_deg: None,
            y_err_deg: None,
            m_err_deg: None,
            zy_dot: None,
            prompt_err_deg: None,
        })
        .collect();
    MetricsReport::from_trials(
        ReportMeta {
            name: "longhorizon".into(),
            seed,
            config_fingerprint: config_fingerprint.into(),
            predictor: predictor.into(),
            prompt_source: "gt".into(),
            pattern: Pattern::PZYM,
        },
        &as_trials,
    )
}

/// Re-executes a recorded plan on a freshly built scene.
pub fn replay_plan(scene: &SceneDescription, plan: &KeyFramePlan, predictor: &dyn Predictor) -> Result<(Scene, PlanOutcome)> {
    let mut s = Scene::from_description(scene)?;
    let outcome = planner::execute_plan(&mut s, plan, predictor, &ExecParams::default())?;
    Ok((s, outcome))
}

/// Everything a CLI run needs, loadable from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub collection: CollectionConfig,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub noise_fractions: Vec<f64>,
    pub longhorizon: LongHorizonConfig,
    pub selector: AutoSelector,
    pub eval_split: Split,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            collection: CollectionConfig::default(),
            solver: SolverConfig::default(),
            train: TrainConfig::default(),
            noise_fractions: NOISE_FRACTIONS.to_vec(),
            longhorizon: LongHorizonConfig::default(),
            selector: AutoSelector::Oracle,
            eval_split: Split::TestSeen,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }

    pub fn solver(&self) -> GeometricPredictor {
        GeometricPredictor { config: self.solver }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `dataset.json` plus one PNG and one depth raster per record under
/// `dir/frames`, recording file hashes in each record.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Dataset> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(io_err(&frames))?;
    let records: Vec<Result<DatasetRecord>> = dataset
        .records
        .par_iter()
        .map(|r| {
            let scene = r.scene()?;
            let (rgb, depth) = sim::render(&scene, &r.camera.intrinsics, &r.camera.extrinsics);
            let rgb_name = format!("frames/{:05}.png", r.id);
            let depth_name = format!("frames/{:05}.crdp", r.id);
            let mut png = std::io::Cursor::new(Vec::new());
            rgb.write_to(&mut png, image::ImageFormat::Png)?;
            let png = png.into_inner();
            let raw = depth.to_bytes();
            fs::write(dir.join(&rgb_name), &png).map_err(io_err(&dir.join(&rgb_name)))?;
            fs::write(dir.join(&depth_name), &raw).map_err(io_err(&dir.join(&depth_name)))?;
            Ok(DatasetRecord {
                files: Some(RecordFiles {
                    rgb: rgb_name,
                    depth: depth_name,
                    rgb_sha256: sha256_hex(&png),
                    depth_sha256: sha256_hex(&raw),
                }),
                ..r.clone()
            })
        })
        .collect();
    let out = Dataset {
        records: records.into_iter().collect::<Result<_>>()?,
        ..dataset.clone()
    };
    write_json(&dir.join("dataset.json"), &out)?;
    Ok(out)
}

/// Loads `dataset.json`, checking every referenced file against its hash.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let dataset: Dataset = read_json(&dir.join("dataset.json"))?;
    for r in &dataset.records {
        if let Some(f) = &r.files {
            for (name, hash) in [(&f.rgb, &f.rgb_sha256), (&f.depth, &f.depth_sha256)] {
                let path = dir.join(name);
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                if sha256_hex(&bytes) != *hash {
                    return Err(HarnessError::HashMismatch { path });
                }
            }
        }
    }
    Ok(dataset)
}

/// Depth raster of a stored record.
pub fn load_depth(dir: &Path, record: &DatasetRecord) -> Result<DepthImage> {
    let f = record
        .files
        .as_ref()
        .ok_or_else(|| HarnessError::Config(format!("record {} has no files", record.id)))?;
    let path = dir.join(&f.depth);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(DepthImage::from_bytes(&bytes)?)
}
