//! Experiment runner: scene generation, perception and alignment,
//! collaborative training over the simulated channel, and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_agents, AlignConfig, AlignmentOutcome, Rule};
use crate::distopt::{mix_seed, Agent, AgentView, MapLayout, MapMode, RoundStats, Strategy, TrainConfig};
use crate::error::{Error, Result};
use crate::evalkit::{
    extract_surface, geometric_metrics, retrieve, sample_ground_truth, semantic_metrics, Extraction, GeometricMetrics, RetrievalEntry,
    SemanticMetrics, SurfaceCloud, CloudSource,
};
use crate::features::perturb;
use crate::io::{write_ply, PlyFormat};
use crate::netsim::{Channel, ChannelModel, CloudShare, KindCounters, Message, MessageKind, TrafficLog, BROADCAST};
use crate::percept::{perceive_agent, PerceptConfig};
use crate::scene::{build_scene, render_agents, CorruptionLog, CorruptionSpec, Scene, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitConfig {
    /// Orbit centre; the centroid of the primitives when absent.
    pub center: Option<[f64; 3]>,
    pub radius: f64,
    pub height: f64,
    pub frames: usize,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        OrbitConfig { center: None, radius: 1.8, height: 1.0, frames: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Target grid spacing for surface extraction, in meters.
    pub surface_voxel: f64,
    pub min_cells: usize,
    pub max_cells: usize,
    /// Ground-truth sampling density, points per m².
    pub gt_density: f64,
    /// Distance threshold for completion ratio and label matching, meters.
    pub threshold: f64,
    pub retrieval_weights: [f64; 2],
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { surface_voxel: 0.01, min_cells: 16, max_cells: 96, gt_density: 1e4, threshold: 0.05, retrieval_weights: [0.5, 0.5] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    /// Per-instance fields; otherwise one global field.
    pub instance: bool,
    pub cross_render: bool,
}

impl AblationCell {
    pub fn name(&self) -> String {
        format!("{}_{}", if self.instance { "instance" } else { "global" }, if self.cross_render { "render" } else { "norender" })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub comm_rates: Vec<f64>,
    pub ablation: Vec<AblationCell>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let cell = |instance, cross_render| AblationCell { instance, cross_render };
        SweepConfig {
            comm_rates: vec![1.0, 0.8, 0.5, 0.2],
            ablation: vec![cell(false, false), cell(false, true), cell(true, false), cell(true, true)],
        }
    }
}

fn default_agents() -> usize {
    4
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_rounds() -> u32 {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scene file, relative to the experiment file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_inline: Option<SceneConfig>,
    #[serde(default = "default_agents")]
    pub agents: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    /// Run agents one after another inside a round instead of on the
    /// thread pool.
    #[serde(default)]
    pub sequential: bool,
    #[serde(default)]
    pub orbit: OrbitConfig,
    #[serde(default)]
    pub corruption: CorruptionSpec,
    #[serde(default)]
    pub percept: PerceptConfig,
    #[serde(default)]
    pub align: AlignConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub channel: ChannelModel,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        Ok(cfg)
    }

    /// Parses a config file and inlines its scene.
    pub fn from_path(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&fs::read_to_string(path)?)?;
        if let Some(rel) = cfg.scene.take() {
            let p = if rel.is_absolute() { rel } else { path.parent().unwrap_or(Path::new(".")).join(rel) };
            if cfg.scene_inline.is_some() {
                return Err(Error::Config("set either scene or scene_inline, not both".into()));
            }
            cfg.scene_inline = Some(SceneConfig::from_path(&p)?);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_inline.is_none() {
            return Err(Error::Config("no scene given (scene or scene_inline)".into()));
        }
        if self.scene.is_some() {
            return Err(Error::Config("scene path must be resolved before running".into()));
        }
        if self.agents == 0 {
            return Err(Error::Config("agents must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.channel.success_rate) {
            return Err(Error::Config(format!("channel.success_rate {} outside [0,1]", self.channel.success_rate)));
        }
        let e = &self.eval;
        if !(e.surface_voxel > 0.0 && e.gt_density > 0.0 && e.threshold > 0.0) || e.min_cells < 16 || e.max_cells < e.min_cells {
            return Err(Error::Config(format!("invalid eval settings {e:?}")));
        }
        let [w1, w2] = e.retrieval_weights;
        if !(w1 >= 0.0 && w2 >= 0.0 && (w1 + w2 - 1.0).abs() < 1e-9) {
            return Err(Error::Config("eval.retrieval_weights must be non-negative and sum to 1".into()));
        }
        if !(self.orbit.radius > 0.0) || self.orbit.frames == 0 {
            return Err(Error::Config("orbit needs a positive radius and at least one frame".into()));
        }
        self.corruption.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Scene with exactly `agents` trajectories: the scene's own when it has
    /// enough, otherwise evenly spaced orbit arcs.
    pub fn resolved_scene(&self) -> Result<SceneConfig> {
        let mut scene = self.scene_inline.clone().ok_or_else(|| Error::Config("no scene given".into()))?;
        if scene.agents.len() >= self.agents {
            scene.agents.truncate(self.agents);
        } else {
            let center = self.orbit.center.unwrap_or_else(|| {
                let n = scene.primitives.len().max(1) as f64;
                let mut c = [0.0; 3];
                for p in &scene.primitives {
                    (0..3).for_each(|k| c[k] += p.position[k] / n);
                }
                c
            });
            scene.agents = SceneConfig::quadrant_orbits(self.agents, center, self.orbit.radius, self.orbit.height, self.orbit.frames);
        }
        Ok(scene)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMetrics {
    pub agent: u32,
    #[serde(flatten)]
    pub geometry: GeometricMetrics,
    #[serde(flatten)]
    pub semantics: SemanticMetrics,
    pub surface_points: usize,
    pub fields: usize,
    pub degenerate_fields: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    pub injective: bool,
    pub global_instances: usize,
    pub actions: BTreeMap<Rule, usize>,
    pub corruptions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSummary {
    pub by_kind: BTreeMap<MessageKind, KindCounters>,
    pub total: KindCounters,
}

impl TrafficSummary {
    pub fn from_log(log: &TrafficLog) -> Self {
        TrafficSummary { by_kind: MessageKind::ALL.iter().map(|k| (*k, log.total_for(*k))).collect(), total: log.total() }
    }
}

/// Averages across agents; everything here is deterministic in the seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub agents: usize,
    pub rounds: u32,
    pub mode: MapMode,
    pub strategy: Strategy,
    pub success_rate: f64,
    pub rho_con: f64,
    pub rho_rend: f64,
    pub accuracy_cm: Option<f64>,
    pub completion_cm: f64,
    pub completion_ratio_pct: f64,
    pub f_miou: f64,
    pub f_macc: f64,
    pub final_data_loss: f64,
    pub per_agent: Vec<AgentMetrics>,
    pub alignment: AlignmentSummary,
    pub traffic: TrafficSummary,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "seed,agents,rounds,mode,strategy,success_rate,rho_con,rho_rend,accuracy_cm,completion_cm,completion_ratio_pct,f_miou,f_macc,final_data_loss,sent_bytes,delivered_bytes,dropped_messages,injective";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.agents,
            self.rounds,
            enum_name(&self.mode),
            enum_name(&self.strategy),
            self.success_rate,
            self.rho_con,
            self.rho_rend,
            self.accuracy_cm.map_or(String::new(), |v| format!("{v:.4}")),
            format!("{:.4}", self.completion_cm),
            format!("{:.4}", self.completion_ratio_pct),
            format!("{:.4}", self.f_miou),
            format!("{:.4}", self.f_macc),
            format!("{:.6}", self.final_data_loss),
            self.traffic.total.sent_bytes,
            self.traffic.total.delivered_bytes,
            self.traffic.total.dropped_messages,
            self.alignment.injective
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|j| j.as_str().map(str::to_owned)).unwrap_or_default()
}

/// Wall-clock phase durations; kept out of the metrics report so that
/// reruns compare byte-for-byte.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub generate_ms: f64,
    pub align_ms: f64,
    pub train_ms: f64,
    pub evaluate_ms: f64,
}

pub struct RunOutcome {
    pub report: MetricsReport,
    pub scene: Scene,
    pub scene_config: SceneConfig,
    pub gt: SurfaceCloud,
    pub corruption: CorruptionLog,
    pub alignment: AlignmentOutcome,
    pub agents: Vec<Agent>,
    pub surfaces: Vec<Extraction>,
    pub classes: BTreeMap<u32, u32>,
    pub retrieval: Vec<RetrievalEntry>,
    pub traffic: TrafficLog,
    pub rounds: Vec<RoundStats>,
    pub timings: Timings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Grid cells for a box at the configured spacing.
pub fn surface_cells(eval: &EvalConfig, extent: f64) -> usize {
    ((extent / eval.surface_voxel).ceil() as usize).clamp(eval.min_cells, eval.max_cells)
}

/// Surface of every field an agent can render.
pub fn agent_surface(agent: &Agent, classes: &BTreeMap<u32, u32>, eval: &EvalConfig) -> Result<Extraction> {
    let mut out = Extraction::default();
    let mut cloud = SurfaceCloud::new(CloudSource::Reconstruction);
    for f in agent.fields() {
        let cells = surface_cells(eval, f.aabb().extent().max());
        let ex = extract_surface([f], cells, classes)?;
        out.degenerate.extend(ex.degenerate);
        if let Some(c) = ex.cloud {
            cloud.extend(&c);
        }
    }
    out.cloud = (!cloud.is_empty()).then_some(cloud);
    Ok(out)
}

/// Runs all three phases for one seed.
pub fn run(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    cfg.validate()?;
    let t0 = Instant::now();
    let scene_config = cfg.resolved_scene()?;
    let scene = build_scene(&scene_config)?;
    let frames = render_agents(&scene, &scene_config)?;
    let generate_ms = ms(t0);

    let t1 = Instant::now();
    let spec = CorruptionSpec { rng_seed: mix_seed(&[seed, 1]), ..cfg.corruption.clone() };
    let mut corruption = CorruptionLog::default();
    let mut perceptions = Vec::with_capacity(frames.len());
    for f in frames {
        let (p, log) = perceive_agent(&scene, f, &spec, &cfg.percept)?;
        corruption.extend(log);
        perceptions.push(p);
    }
    let alignment = align_agents(&perceptions, &cfg.align)?;
    let ids: Vec<u32> = perceptions.iter().map(|p| p.agent_id).collect();
    let mut traffic = TrafficLog::default();
    let shares: Vec<Message> = alignment
        .initial_clouds
        .iter()
        .map(|c| CloudShare { instance_id: c.instance_id, global_id: 0, points: c.points.clone() }.message(c.agent_id, BROADCAST, 0))
        .collect();
    let (_, log) = Channel::new(ChannelModel { success_rate: 1.0, seed: 0, latency: 0 })?.deliver(shares, &ids, 0);
    traffic.merge(&log);

    let w = (cfg.eval.retrieval_weights[0], cfg.eval.retrieval_weights[1]);
    let mut classes = BTreeMap::new();
    let mut retrieval = BTreeMap::new();
    for a in &alignment.agents {
        for r in &a.records {
            if let Some(g) = r.global_id {
                classes.entry(g).or_insert_with(|| scene.classify(&r.clip, &r.caption, w));
                retrieval.entry(g).or_insert_with(|| RetrievalEntry { global_id: g, clip: r.clip.clone(), caption: r.caption.clone() });
            }
        }
    }
    let views = perceptions
        .into_iter()
        .zip(&alignment.agents)
        .map(|(p, a)| AgentView::new(p.agent_id, p.frames, a.masks.clone()))
        .collect::<Result<Vec<_>>>()?;
    let align_ms = ms(t1);

    let t2 = Instant::now();
    let layout = MapLayout::build(&views, &cfg.train)?;
    let train_seed = mix_seed(&[seed, 3]);
    let mut agents = views.into_iter().map(|v| Agent::new(v, &layout, &cfg.train, train_seed)).collect::<Result<Vec<_>>>()?;
    let mut channel = Channel::new(ChannelModel { seed: mix_seed(&[seed, 2]), ..cfg.channel })?;
    let mut inboxes: BTreeMap<u32, Vec<Message>> = BTreeMap::new();
    let mut rounds = Vec::with_capacity(cfg.rounds as usize * agents.len());
    for r in 0..cfg.rounds {
        let step = |a: &mut Agent| {
            let inbox = inboxes.get(&a.id()).map(|v| v.as_slice()).unwrap_or(&[]);
            a.train_round(inbox, r)
        };
        let results: Vec<Result<(Vec<Message>, RoundStats)>> =
            if cfg.sequential { agents.iter_mut().map(step).collect() } else { agents.par_iter_mut().map(step).collect() };
        let mut outbox = Vec::new();
        for res in results {
            let (out, stats) = res?;
            outbox.extend(out);
            rounds.push(stats);
        }
        let (next, log) = channel.deliver(outbox, &ids, r);
        traffic.merge(&log);
        inboxes = next;
        if (r + 1) % 50 == 0 {
            let tail = &rounds[rounds.len() - agents.len()..];
            log::info!("round {}: mean data loss {:.4}", r + 1, tail.iter().map(|s| s.l_data).sum::<f64>() / tail.len() as f64);
        }
    }
    let train_ms = ms(t2);

    let t3 = Instant::now();
    let gt = sample_ground_truth(&scene, cfg.eval.gt_density, scene_config.seed)?;
    let mut surfaces = Vec::with_capacity(agents.len());
    let mut per_agent = Vec::with_capacity(agents.len());
    for a in &agents {
        let ex = agent_surface(a, &classes, &cfg.eval)?;
        let geometry = geometric_metrics(ex.cloud.as_ref(), &gt, cfg.eval.threshold)?;
        let semantics = semantic_metrics(ex.cloud.as_ref(), &gt, cfg.eval.threshold)?;
        per_agent.push(AgentMetrics {
            agent: a.id(),
            geometry,
            semantics,
            surface_points: ex.cloud.as_ref().map_or(0, |c| c.len()),
            fields: a.fields().count(),
            degenerate_fields: ex.degenerate.clone(),
        });
        surfaces.push(ex);
    }
    let n = per_agent.len() as f64;
    let mean = |f: &dyn Fn(&AgentMetrics) -> f64| per_agent.iter().map(f).sum::<f64>() / n;
    let accuracy_cm = per_agent
        .iter()
        .map(|m| m.geometry.accuracy_cm)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    let mut actions = BTreeMap::new();
    for a in &alignment.actions {
        *actions.entry(a.rule).or_insert(0) += 1;
    }
    let last = &rounds[rounds.len().saturating_sub(agents.len())..];
    let report = MetricsReport {
        seed,
        agents: agents.len(),
        rounds: cfg.rounds,
        mode: cfg.train.mode,
        strategy: cfg.train.strategy,
        success_rate: cfg.channel.success_rate,
        rho_con: cfg.train.weights.rho_con,
        rho_rend: cfg.train.weights.rho_rend,
        accuracy_cm,
        completion_cm: mean(&|m| m.geometry.completion_cm),
        completion_ratio_pct: mean(&|m| m.geometry.completion_ratio_pct),
        f_miou: mean(&|m| m.semantics.f_miou),
        f_macc: mean(&|m| m.semantics.f_macc),
        final_data_loss: if last.is_empty() { 0.0 } else { last.iter().map(|s| s.l_data).sum::<f64>() / last.len() as f64 },
        per_agent,
        alignment: AlignmentSummary {
            injective: alignment.injective,
            global_instances: classes.len(),
            actions,
            corruptions: corruption.records.len(),
        },
        traffic: TrafficSummary::from_log(&traffic),
    };
    let timings = Timings { generate_ms, align_ms, train_ms, evaluate_ms: ms(t3) };
    Ok(RunOutcome {
        report,
        scene,
        scene_config,
        gt,
        corruption,
        alignment,
        agents,
        surfaces,
        classes,
        retrieval: retrieval.into_values().collect(),
        traffic,
        rounds,
        timings,
    })
}

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CORRECTIONS_JSONL: &str = "corrections.jsonl";
pub const TRAFFIC_CSV: &str = "traffic.csv";
pub const ROUNDS_CSV: &str = "rounds.csv";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const TIMINGS_JSON: &str = "timings.json";
pub const RETRIEVAL_JSON: &str = "instances.json";

/// Writes every artifact of a run into `dir`.
pub fn write_outputs(out: &RunOutcome, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut snapshot = cfg.clone();
    snapshot.scene = None;
    snapshot.scene_inline = Some(out.scene_config.clone());
    snapshot.seeds = vec![out.report.seed];
    fs::write(dir.join(RESOLVED_CONFIG), snapshot.to_toml_string())?;
    fs::write(dir.join(METRICS_JSON), out.report.to_json())?;
    fs::write(dir.join(METRICS_CSV), format!("{}\n{}\n", MetricsReport::CSV_HEADER, out.report.csv_row()))?;
    fs::write(dir.join(CORRECTIONS_JSONL), out.alignment.actions_jsonl())?;
    fs::write(dir.join(TRAFFIC_CSV), out.traffic.to_csv())?;
    let mut rounds = String::from(RoundStats::CSV_HEADER);
    rounds.push('\n');
    for r in &out.rounds {
        rounds.push_str(&r.csv_row());
        rounds.push('\n');
    }
    fs::write(dir.join(ROUNDS_CSV), rounds)?;
    fs::write(dir.join(TIMINGS_JSON), serde_json::to_string_pretty(&out.timings)? + "\n")?;
    let instances: Vec<InstanceEntry> = out
        .retrieval
        .iter()
        .map(|e| InstanceEntry { global_id: e.global_id, class_id: out.classes.get(&e.global_id).copied(), clip: e.clip.clone(), caption: e.caption.clone() })
        .collect();
    fs::write(dir.join(RETRIEVAL_JSON), serde_json::to_string_pretty(&instances)? + "\n")?;
    for (a, ex) in out.agents.iter().zip(&out.surfaces) {
        let cloud = ex.cloud.clone().unwrap_or_else(|| SurfaceCloud::new(CloudSource::Reconstruction));
        let f = fs::File::create(dir.join(format!("agent_{}.ply", a.id())))?;
        write_ply(std::io::BufWriter::new(f), &cloud, PlyFormat::BinaryLittleEndian)?;
    }
    Ok(())
}

/// A mapped instance with its fused features, as stored in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub global_id: u32,
    pub class_id: Option<u32>,
    pub clip: Vec<f64>,
    pub caption: Vec<f64>,
}

pub fn read_instances(dir: &Path) -> Result<Vec<InstanceEntry>> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(RETRIEVAL_JSON))?)?)
}

/// Query features for a class: its ground-truth features rotated by
/// `noise_deg` in a random direction.
pub fn class_query(scene: &Scene, class_id: u32, noise_deg: f64, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let cf = scene.classes.get(&class_id).ok_or_else(|| Error::Precondition(format!("unknown class {class_id}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = noise_deg.to_radians();
    Ok((perturb(&mut rng, &cf.clip, a), perturb(&mut rng, &cf.caption, a)))
}

/// Ranks the instances of a run directory against a class query.
pub fn retrieve_in_run(dir: &Path, class_id: u32, weights: (f64, f64), noise_deg: f64, seed: u64) -> Result<Vec<(u32, f64)>> {
    let cfg = ExperimentConfig::from_path(&dir.join(RESOLVED_CONFIG))?;
    let scene = build_scene(&cfg.resolved_scene()?)?;
    let (q_clip, q_caption) = class_query(&scene, class_id, noise_deg, seed)?;
    let entries: Vec<RetrievalEntry> = read_instances(dir)?
        .into_iter()
        .map(|e| RetrievalEntry { global_id: e.global_id, clip: e.clip, caption: e.caption })
        .collect();
    retrieve(&q_clip, &q_caption, &entries, weights)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CommRate,
    Ablation,
}

/// One sweep cell averaged over the configured seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: String,
    pub seeds: usize,
    pub failed: usize,
    pub completion_ratio_pct: Option<f64>,
    pub completion_cm: Option<f64>,
    pub accuracy_cm: Option<f64>,
    pub f_miou: Option<f64>,
    pub sent_bytes: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "cell,seeds,failed,completion_ratio_pct,completion_cm,accuracy_cm,f_miou,sent_bytes,error";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.cell,
            self.seeds,
            self.failed,
            f(self.completion_ratio_pct),
            f(self.completion_cm),
            f(self.accuracy_cm),
            f(self.f_miou),
            f(self.sent_bytes),
            self.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        )
    }
}

/// The per-cell configs of a sweep.
pub fn sweep_cells(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<(String, ExperimentConfig)>> {
    match axis {
        SweepAxis::CommRate => {
            if cfg.sweep.comm_rates.is_empty() {
                return Err(Error::Config("sweep.comm_rates is empty".into()));
            }
            Ok(cfg
                .sweep
                .comm_rates
                .iter()
                .map(|p| {
                    let mut c = cfg.clone();
                    c.channel.success_rate = *p;
                    (format!("rate_{p}"), c)
                })
                .collect())
        }
        SweepAxis::Ablation => {
            if cfg.sweep.ablation.is_empty() {
                return Err(Error::Config("sweep.ablation is empty".into()));
            }
            Ok(cfg
                .sweep
                .ablation
                .iter()
                .map(|cell| {
                    let mut c = cfg.clone();
                    c.train.mode = if cell.instance { MapMode::Instance } else { MapMode::Global };
                    if !cell.cross_render {
                        c.train.weights.rho_rend = 0.0;
                    }
                    (cell.name(), c)
                })
                .collect())
        }
    }
}

/// Runs every cell for every seed. Failing runs are recorded in their row
/// and the sweep continues. Per-run artifacts go to `dir/<cell>/seed_<s>`.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, dir: Option<&Path>) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let cells = sweep_cells(cfg, axis)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (name, c) in cells {
        let mut reports = Vec::new();
        let mut errors = Vec::new();
        for &seed in &cfg.seeds {
            log::info!("sweep cell {name}, seed {seed}");
            match run(&c, seed) {
                Ok(out) => {
                    if let Some(d) = dir {
                        write_outputs(&out, &c, &d.join(&name).join(format!("seed_{seed}")))?;
                    }
                    reports.push(out.report);
                }
                Err(e) => {
                    log::error!("sweep cell {name}, seed {seed} failed: {e}");
                    errors.push(format!("seed {seed}: {e}"));
                }
            }
        }
        let k = reports.len() as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| (!reports.is_empty()).then(|| reports.iter().map(f).sum::<f64>() / k);
        rows.push(SweepRow {
            cell: name,
            seeds: cfg.seeds.len(),
            failed: errors.len(),
            completion_ratio_pct: avg(&|r| r.completion_ratio_pct),
            completion_cm: avg(&|r| r.completion_cm),
            accuracy_cm: reports
                .iter()
                .map(|r| r.accuracy_cm)
                .collect::<Option<Vec<_>>>()
                .filter(|v| !v.is_empty())
                .map(|v| v.iter().sum::<f64>() / k),
            f_miou: avg(&|r| r.f_miou),
            sent_bytes: avg(&|r| r.traffic.total.sent_bytes as f64),
            error: (!errors.is_empty()).then(|| errors.join(" | ")),
        });
    }
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        let mut csv = String::from(SweepRow::CSV_HEADER);
        csv.push('\n');
        for r in &rows {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        let name = match axis {
            SweepAxis::CommRate => "sweep_comm_rate.csv",
            SweepAxis::Ablation => "sweep_ablation.csv",
        };
        fs::write(d.join(name), csv)?;
    }
    Ok(rows)
}
