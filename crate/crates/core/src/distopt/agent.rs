//! Per-agent state and the round-based training step.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Arch, InstanceField, Ray};
use crate::geometry::{Aabb, Vec3};
use crate::netsim::{Message, MessageKind, RayShare, SharedRay, BROADCAST};
use crate::scene::FrameBundle;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::loss::{data_loss, param_consistency_loss, render_consistency_loss, render_depths, DataLoss, LossWeights, RayTarget};

/// Id of the single scene-wide field in [`MapMode::Global`].
pub const GLOBAL_FIELD_ID: u32 = 0x7FFF_FFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Gradient through `ρ_con · Σ‖θ − θ̄‖²`.
    Penalty,
    /// Post-step averaging with the received copies.
    Gossip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    /// One field per aligned instance.
    Instance,
    /// One field for every observed object, trained on the union mask.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub strategy: Strategy,
    pub mode: MapMode,
    pub arch: Arch,
    pub rays_per_round: usize,
    pub samples_per_ray: usize,
    pub shared_rays_per_peer: usize,
    /// Initial output bias of the occupancy head.
    pub sigma_bias: f64,
    /// Fraction of data rays drawn from inside the instance mask; the rest
    /// are uniform over the projected box.
    pub mask_ray_fraction: f64,
    /// Rays through another object stop this far before its surface.
    pub occluder_margin: f64,
    /// Voxel size used for coverage and field bounds.
    pub coverage_voxel: f64,
    /// Voxels a coverage cell needs to count as covered.
    pub coverage_min_voxels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            strategy: Strategy::Penalty,
            mode: MapMode::Instance,
            arch: Arch::default(),
            rays_per_round: 1024,
            samples_per_ray: 32,
            shared_rays_per_peer: 256,
            sigma_bias: -2.0,
            mask_ray_fraction: 0.5,
            occluder_margin: 0.02,
            coverage_voxel: 0.02,
            coverage_min_voxels: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.adam.validate()?;
        self.arch.validate()?;
        if self.rays_per_round == 0 || self.samples_per_ray < 2 {
            return Err(Error::Config("need at least one ray and two samples per ray".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ray_fraction) {
            return Err(Error::Config(format!("mask_ray_fraction {} outside [0, 1]", self.mask_ray_fraction)));
        }
        if !(self.coverage_voxel > 0.0) || !self.sigma_bias.is_finite() || !(self.occluder_margin >= 0.0) {
            return Err(Error::Config("coverage_voxel, sigma_bias and occluder_margin must be finite and valid".into()));
        }
        Ok(())
    }
}

/// An agent's private frames with post-alignment masks (global id per pixel).
#[derive(Debug, Clone)]
pub struct AgentView {
    pub agent_id: u32,
    pub frames: Vec<FrameBundle>,
    pub masks: Vec<Vec<u32>>,
}

impl AgentView {
    pub fn new(agent_id: u32, frames: Vec<FrameBundle>, masks: Vec<Vec<u32>>) -> Result<Self> {
        if frames.len() != masks.len() {
            return Err(Error::Shape { expected: frames.len(), got: masks.len() });
        }
        for (f, m) in frames.iter().zip(&masks) {
            if m.len() != f.len() {
                return Err(Error::Shape { expected: f.len(), got: m.len() });
            }
        }
        Ok(AgentView { agent_id, frames, masks })
    }

    /// Mask value as seen by the training targets of `mode`.
    fn label(&self, mode: MapMode, frame: usize, idx: usize) -> u32 {
        let m = self.masks[frame][idx];
        match mode {
            MapMode::Instance => m,
            MapMode::Global if m != 0 => GLOBAL_FIELD_ID,
            MapMode::Global => 0,
        }
    }

    fn labels(&self, mode: MapMode) -> BTreeSet<u32> {
        let mut out = BTreeSet::new();
        for f in 0..self.frames.len() {
            for idx in 0..self.masks[f].len() {
                let l = self.label(mode, f, idx);
                if l != 0 {
                    out.insert(l);
                }
            }
        }
        out
    }

    /// Voxel-downsampled surface points per field id.
    pub fn clouds(&self, mode: MapMode, voxel: f64) -> BTreeMap<u32, Vec<Vec3>> {
        let mut seen: BTreeMap<u32, HashSet<[i64; 3]>> = BTreeMap::new();
        let mut out: BTreeMap<u32, Vec<Vec3>> = BTreeMap::new();
        for (f, frame) in self.frames.iter().enumerate() {
            for idx in 0..frame.len() {
                let l = self.label(mode, f, idx);
                if l == 0 {
                    continue;
                }
                let Some(p) = frame.backproject_pixel(idx) else { continue };
                let key = [(p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64];
                if seen.entry(l).or_default().insert(key) {
                    out.entry(l).or_default().push(p);
                }
            }
        }
        out
    }
}

/// Coverage cells per box axis.
pub const COVERAGE_GRID: usize = 4;
const COVERAGE_CELLS: usize = COVERAGE_GRID * COVERAGE_GRID * COVERAGE_GRID;

/// What agents know about each other after the cloud exchange: shared
/// field bounds, which agents observe which fields, and which cells of
/// each field box each agent has seen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MapLayout {
    pub mode: Option<MapMode>,
    pub agents: Vec<u32>,
    pub bounds: BTreeMap<u32, Aabb>,
    pub owners: BTreeMap<u32, BTreeSet<u32>>,
    /// Bit `c` set when the agent covers cell `c` of the field box's
    /// [`COVERAGE_GRID`]³ grid.
    pub coverage: BTreeMap<(u32, u32), u64>,
}

impl MapLayout {
    pub fn build(views: &[AgentView], cfg: &TrainConfig) -> Result<Self> {
        let clouds: Vec<_> = views.iter().map(|v| v.clouds(cfg.mode, cfg.coverage_voxel)).collect();
        let mut layout = MapLayout { mode: Some(cfg.mode), agents: views.iter().map(|v| v.agent_id).collect(), ..Default::default() };
        for (v, c) in views.iter().zip(&clouds) {
            for (gid, pts) in c {
                let b = Aabb::from_points(pts);
                let e = layout.bounds.entry(*gid).or_insert(b);
                *e = e.union(&b);
                layout.owners.entry(*gid).or_default().insert(v.agent_id);
            }
        }
        for b in layout.bounds.values_mut() {
            let pad = (0.1 * b.extent().max()).max(0.05);
            *b = b.padded(pad);
        }
        for (v, c) in views.iter().zip(&clouds) {
            for (gid, pts) in c {
                let b = &layout.bounds[gid];
                let mut counts = [0usize; COVERAGE_CELLS];
                for p in pts {
                    counts[b.cell(p, COVERAGE_GRID)] += 1;
                }
                let bits = (0..COVERAGE_CELLS).filter(|c| counts[*c] >= cfg.coverage_min_voxels).fold(0u64, |acc, c| acc | (1 << c));
                layout.coverage.insert((v.agent_id, *gid), bits);
            }
        }
        Ok(layout)
    }

    pub fn coverage_of(&self, agent: u32, gid: u32) -> u64 {
        self.coverage.get(&(agent, gid)).copied().unwrap_or(0)
    }
}

/// splitmix64 over a list of words.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// `θ ← (1 − k·w)·θ + w·Σ θ̄_j` with `w = 1 / owners`. With every owner
/// receiving every other owner's copy this is uniform averaging, which is
/// doubly stochastic.
pub fn gossip_mix(own: &mut InstanceField, received: &[&InstanceField], owners: usize) -> Result<()> {
    if received.is_empty() {
        return Ok(());
    }
    if received.len() >= owners {
        return Err(Error::Precondition(format!("{} copies received for {owners} owners", received.len())));
    }
    for r in received {
        if r.arch() != own.arch() {
            return Err(Error::ArchMismatch);
        }
    }
    let w = 1.0 / owners as f64;
    let self_w = 1.0 - w * received.len() as f64;
    own.update(|theta| {
        for (i, t) in theta.iter_mut().enumerate() {
            *t = self_w * *t + w * received.iter().map(|r| r.theta()[i]).sum::<f64>();
        }
    });
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSlot {
    /// `None` for a mirror that has not received parameters yet.
    pub field: Option<InstanceField>,
    pub adam: AdamState,
    pub owned: bool,
    /// Sender of the adopted parameters, for mirrors.
    pub source: Option<u32>,
}

struct FramePixels {
    frame: usize,
    /// Projected field box, `[u0, u1) × [v0, v1)`.
    bbox: (usize, usize, usize, usize),
    inside: Vec<usize>,
}

struct Sampler {
    frames: Vec<FramePixels>,
    /// Own mask pixels with depth, bucketed by coverage cell.
    cells: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: u32,
    pub agent: u32,
    pub fields: usize,
    pub rays: usize,
    pub l_occ: f64,
    pub l_depth: f64,
    pub l_color: f64,
    pub l_data: f64,
    pub l_con: f64,
    pub l_rend: f64,
    pub shared_used: usize,
    pub shared_skipped: usize,
    pub rejected: usize,
    pub skipped_steps: usize,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub wall_ms: f64,
}

impl RoundStats {
    pub const CSV_HEADER: &'static str =
        "round,agent,fields,rays,l_occ,l_depth,l_color,l_data,l_con,l_rend,shared_used,shared_skipped,rejected,skipped_steps,bytes_in,bytes_out,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{},{},{},{},{},{:.3}",
            self.round,
            self.agent,
            self.fields,
            self.rays,
            self.l_occ,
            self.l_depth,
            self.l_color,
            self.l_data,
            self.l_con,
            self.l_rend,
            self.shared_used,
            self.shared_skipped,
            self.rejected,
            self.skipped_steps,
            self.bytes_in,
            self.bytes_out,
            self.wall_ms
        )
    }
}

#[derive(Default)]
struct FieldRound {
    rays: usize,
    occ: f64,
    depth: f64,
    color: f64,
    data: f64,
    con: f64,
    rend: f64,
    shared_used: usize,
    shared_skipped: usize,
    skipped_step: bool,
}

pub struct Agent {
    id: u32,
    seed: u64,
    cfg: TrainConfig,
    view: AgentView,
    layout: MapLayout,
    slots: BTreeMap<u32, FieldSlot>,
    samplers: BTreeMap<u32, Sampler>,
}

impl Agent {
    pub fn new(view: AgentView, layout: &MapLayout, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if layout.mode != Some(cfg.mode) {
            return Err(Error::Precondition("layout was built for another map mode".into()));
        }
        let id = view.agent_id;
        let own = view.labels(cfg.mode);
        let mut slots = BTreeMap::new();
        let mut samplers = BTreeMap::new();
        for (gid, aabb) in &layout.bounds {
            let owned = own.contains(gid);
            let field = if owned {
                Some(InstanceField::new(cfg.arch, *aabb, *gid, mix_seed(&[seed, id as u64, *gid as u64]), cfg.sigma_bias)?)
            } else {
                None
            };
            let adam = AdamState::new(if owned { cfg.arch.param_count() } else { 0 });
            slots.insert(*gid, FieldSlot { field, adam, owned, source: None });
            if owned {
                samplers.insert(*gid, Sampler::new(&view, cfg.mode, *gid, aabb));
            }
        }
        Ok(Agent { id, seed, cfg: *cfg, view, layout: layout.clone(), slots, samplers })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn view(&self) -> &AgentView {
        &self.view
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn slots(&self) -> &BTreeMap<u32, FieldSlot> {
        &self.slots
    }

    pub fn field(&self, gid: u32) -> Option<&InstanceField> {
        self.slots.get(&gid)?.field.as_ref()
    }

    pub fn field_mut(&mut self, gid: u32) -> Option<&mut InstanceField> {
        self.slots.get_mut(&gid)?.field.as_mut()
    }

    /// Every field the agent can render: owned ones and received mirrors.
    pub fn fields(&self) -> impl Iterator<Item = &InstanceField> {
        self.slots.values().filter_map(|s| s.field.as_ref())
    }

    pub fn owned_ids(&self) -> Vec<u32> {
        self.slots.iter().filter(|(_, s)| s.owned).map(|(g, _)| *g).collect()
    }

    /// Draws a data batch for field `gid` from the agent's own frames.
    pub fn sample_batch<R: Rng>(&self, gid: u32, n: usize, rng: &mut R) -> Vec<RayTarget> {
        match (self.samplers.get(&gid), self.layout.bounds.get(&gid)) {
            (Some(s), Some(b)) => s.batch(&self.view, self.cfg.mode, gid, b, n, &self.cfg, rng),
            _ => Vec::new(),
        }
    }

    /// One round: ingest the inbox, take one optimizer step per owned
    /// field, and emit parameter and ray shares.
    pub fn train_round(&mut self, inbox: &[Message], round: u32) -> Result<(Vec<Message>, RoundStats)> {
        let start = Instant::now();
        let mut stats = RoundStats { round, agent: self.id, ..Default::default() };
        stats.bytes_in = inbox.iter().map(|m| m.encoded_len() as u64).sum();

        let mut params: BTreeMap<u32, Vec<(u32, InstanceField)>> = BTreeMap::new();
        let mut shared: BTreeMap<u32, Vec<SharedRay>> = BTreeMap::new();
        for m in inbox {
            if m.sender == self.id || (m.receiver != self.id && m.receiver != BROADCAST) {
                continue;
            }
            match self.ingest(m) {
                Ok(Ingested::Params(f)) => params.entry(f.global_id()).or_default().push((m.sender, f)),
                Ok(Ingested::Rays(r)) => shared.entry(r.global_id).or_default().extend(r.rays),
                Ok(Ingested::Ignored) => {}
                Err(e) => {
                    stats.rejected += 1;
                    log::warn!("agent {} rejected {} from {}: {e}", self.id, m.kind.name(), m.sender);
                }
            }
        }

        for (gid, list) in &mut params {
            list.sort_by_key(|(s, _)| *s);
            if let Some(slot) = self.slots.get_mut(gid) {
                if !slot.owned {
                    let (sender, f) = &list[0];
                    slot.field = Some(f.clone());
                    slot.source = Some(*sender);
                }
            }
        }

        let owned: Vec<u32> = self.owned_ids();
        let per_field = (self.cfg.rays_per_round / owned.len().max(1)).max(1);
        let batches: BTreeMap<u32, Vec<RayTarget>> = owned
            .iter()
            .map(|gid| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, self.id as u64, *gid as u64, round as u64, 1]));
                (*gid, self.sample_batch(*gid, per_field, &mut rng))
            })
            .collect();

        let cfg = self.cfg;
        let layout = &self.layout;
        let results: Vec<Result<FieldRound>> = self
            .slots
            .par_iter_mut()
            .filter(|(_, s)| s.owned)
            .map(|(gid, slot)| {
                let peers: Vec<&InstanceField> = params.get(gid).map(|l| l.iter().map(|(_, f)| f).collect()).unwrap_or_default();
                let rays = shared.get(gid).map(|v| v.as_slice()).unwrap_or(&[]);
                let owners = layout.owners.get(gid).map_or(1, |o| o.len());
                step_field(slot, &batches[gid], &peers, rays, owners, &cfg)
            })
            .collect();
        for r in results {
            let r = r?;
            stats.fields += 1;
            stats.rays += r.rays;
            stats.l_occ += r.occ;
            stats.l_depth += r.depth;
            stats.l_color += r.color;
            stats.l_data += r.data;
            stats.l_con += r.con;
            stats.l_rend += r.rend;
            stats.shared_used += r.shared_used;
            stats.shared_skipped += r.shared_skipped;
            stats.skipped_steps += r.skipped_step as usize;
        }

        let mut outbox = Vec::new();
        for gid in &owned {
            let f = self.slots[gid].field.as_ref().expect("owned field");
            outbox.push(Message::param_share(self.id, BROADCAST, round, f));
        }
        if self.cfg.weights.rho_rend > 0.0 {
            outbox.extend(self.ray_shares(round)?);
        }
        stats.bytes_out = outbox.iter().map(|m| m.encoded_len() as u64).sum();
        stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok((outbox, stats))
    }

    fn ingest(&self, m: &Message) -> Result<Ingested> {
        match m.kind {
            MessageKind::ParamShare => {
                let f = m.field()?;
                if f.arch() != self.cfg.arch {
                    return Err(Error::ArchMismatch);
                }
                if !self.slots.contains_key(&f.global_id()) {
                    return Ok(Ingested::Ignored);
                }
                Ok(Ingested::Params(f))
            }
            MessageKind::RayShare => {
                let r = m.rays()?;
                match self.slots.get(&r.global_id) {
                    Some(s) if s.owned => Ok(Ingested::Rays(r)),
                    _ => Ok(Ingested::Ignored),
                }
            }
            MessageKind::CloudShare => Ok(Ingested::Ignored),
        }
    }

    /// Rays through each peer's unseen cells of shared fields, with this
    /// agent's rendered depths.
    fn ray_shares(&self, round: u32) -> Result<Vec<Message>> {
        let mut out = Vec::new();
        for &peer in &self.layout.agents {
            if peer == self.id || self.cfg.shared_rays_per_peer == 0 {
                continue;
            }
            let mut targets = Vec::new();
            for (gid, sampler) in &self.samplers {
                if !self.layout.owners.get(gid).is_some_and(|o| o.contains(&peer)) {
                    continue;
                }
                let blind = !self.layout.coverage_of(peer, *gid);
                let pool: Vec<(usize, usize)> =
                    (0..COVERAGE_CELLS).filter(|c| blind & (1 << c) != 0).flat_map(|c| sampler.cells[c].iter().copied()).collect();
                if !pool.is_empty() {
                    targets.push((*gid, pool));
                }
            }
            if targets.is_empty() {
                continue;
            }
            let budget = (self.cfg.shared_rays_per_peer / targets.len()).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, self.id as u64, peer as u64, round as u64, 2]));
            for (gid, pool) in targets {
                let aabb = &self.layout.bounds[&gid];
                let mut rays = Vec::with_capacity(budget);
                for _ in 0..budget {
                    let (f, idx) = pool[rng.random_range(0..pool.len())];
                    let frame = &self.view.frames[f];
                    let (u, v) = frame.pixel(idx);
                    let (o, d, _) = frame.pixel_ray(u as f64, v as f64);
                    if let Some((lo, hi)) = aabb.intersect_ray(&o, &d) {
                        let lo = lo.max(0.0);
                        if lo < hi {
                            rays.push(Ray::new(o, d, lo, hi)?.with_seed(rng.random()));
                        }
                    }
                }
                let field = self.slots[&gid].field.as_ref().expect("owned field");
                let depths = render_depths(field, &rays, self.cfg.samples_per_ray)?;
                let shared: Vec<SharedRay> = rays
                    .iter()
                    .zip(depths)
                    .filter_map(|(r, d)| {
                        d.map(|depth| SharedRay { origin: r.origin, dir: r.dir, t_near: r.t_near, t_far: r.t_far, seed: r.seed, depth })
                    })
                    .collect();
                if !shared.is_empty() {
                    out.push(RayShare { global_id: gid, rays: shared }.message(self.id, peer, round));
                }
            }
        }
        Ok(out)
    }
}

enum Ingested {
    Params(InstanceField),
    Rays(RayShare),
    Ignored,
}

/// Value and gradient of `L^data + ρ_con·L^con + ρ_rend·L^rend` for one
/// field. The consistency term is left out when `with_con` is false.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Objective {
    pub data: DataLoss,
    pub con: f64,
    pub rend: f64,
    pub shared_used: usize,
    pub shared_skipped: usize,
    pub total: f64,
    pub grad: Vec<f64>,
}

pub fn objective(
    field: &InstanceField,
    batch: &[RayTarget],
    peers: &[&InstanceField],
    shared: &[SharedRay],
    weights: &LossWeights,
    with_con: bool,
    n_samples: usize,
) -> Result<Objective> {
    let (data, mut grad) = data_loss(field, batch, weights, n_samples)?;
    let mut out = Objective { data, total: data.total, ..Default::default() };
    if with_con && weights.rho_con > 0.0 && !peers.is_empty() {
        let (l, g) = param_consistency_loss(field, peers)?;
        out.con = l;
        out.total += weights.rho_con * l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += weights.rho_con * b);
    }
    if weights.rho_rend > 0.0 && !shared.is_empty() {
        let rc = render_consistency_loss(field, shared, n_samples)?;
        out.rend = rc.loss;
        out.total += weights.rho_rend * rc.loss;
        out.shared_used = rc.used;
        out.shared_skipped = rc.skipped;
        grad.iter_mut().zip(&rc.grad).for_each(|(a, b)| *a += weights.rho_rend * b);
    }
    out.grad = grad;
    Ok(out)
}

fn step_field(
    slot: &mut FieldSlot,
    batch: &[RayTarget],
    peers: &[&InstanceField],
    shared: &[SharedRay],
    owners: usize,
    cfg: &TrainConfig,
) -> Result<FieldRound> {
    let field = slot.field.as_mut().expect("owned field");
    let w = &cfg.weights;
    let obj = objective(field, batch, peers, shared, w, cfg.strategy == Strategy::Penalty, cfg.samples_per_ray)?;
    let out = FieldRound {
        rays: obj.data.rays,
        occ: obj.data.occ,
        depth: obj.data.depth,
        color: obj.data.color,
        data: obj.data.total,
        con: obj.con,
        rend: obj.rend,
        shared_used: obj.shared_used,
        shared_skipped: obj.shared_skipped,
        skipped_step: !adam_step(&mut slot.adam, field, &obj.grad, &cfg.adam)?,
    };
    if cfg.strategy == Strategy::Gossip && w.rho_con > 0.0 && !peers.is_empty() {
        gossip_mix(field, peers, owners.max(peers.len() + 1))?;
    }
    Ok(out)
}

impl Sampler {
    fn new(view: &AgentView, mode: MapMode, gid: u32, aabb: &Aabb) -> Self {
        let mut frames = Vec::new();
        let mut cells = vec![Vec::new(); COVERAGE_CELLS];
        for (f, frame) in view.frames.iter().enumerate() {
            let inside: Vec<usize> = (0..frame.len()).filter(|i| view.label(mode, f, *i) == gid).collect();
            if inside.is_empty() {
                continue;
            }
            for &idx in &inside {
                if let Some(p) = frame.backproject_pixel(idx) {
                    cells[aabb.cell(&p, COVERAGE_GRID)].push((f, idx));
                }
            }
            let bbox = match mode {
                MapMode::Global => (0, frame.width, 0, frame.height),
                MapMode::Instance => projected_bbox(frame, aabb, &inside),
            };
            frames.push(FramePixels { frame: f, bbox, inside });
        }
        Sampler { frames, cells }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch<R: Rng>(&self, view: &AgentView, mode: MapMode, gid: u32, aabb: &Aabb, n: usize, cfg: &TrainConfig, rng: &mut R) -> Vec<RayTarget> {
        let mut out = Vec::with_capacity(n);
        if self.frames.is_empty() {
            return out;
        }
        let mut attempts = 0;
        while out.len() < n && attempts < 8 * n {
            attempts += 1;
            let fp = &self.frames[rng.random_range(0..self.frames.len())];
            let frame = &view.frames[fp.frame];
            let idx = if rng.random::<f64>() < cfg.mask_ray_fraction {
                fp.inside[rng.random_range(0..fp.inside.len())]
            } else {
                let (u0, u1, v0, v1) = fp.bbox;
                frame.index(rng.random_range(u0..u1), rng.random_range(v0..v1))
            };
            let seed = rng.random::<u64>();
            let (u, v) = frame.pixel(idx);
            let (o, d, scale) = frame.pixel_ray(u as f64, v as f64);
            let Some((lo, mut hi)) = aabb.intersect_ray(&o, &d) else { continue };
            let lo = lo.max(0.0);
            let inside = view.label(mode, fp.frame, idx) == gid;
            let z = frame.depth[idx];
            if !inside && z > 0.0 {
                hi = hi.min(z * scale - cfg.occluder_margin);
            }
            if !(lo < hi) {
                continue;
            }
            let Ok(ray) = Ray::new(o, d, lo, hi) else { continue };
            out.push(RayTarget {
                ray: ray.with_seed(seed),
                mask: if inside { 1.0 } else { 0.0 },
                depth: z * scale,
                color: frame.rgb[idx],
            });
        }
        out
    }
}

/// Pixel rectangle covering the projected box corners, widened to include
/// every mask pixel. Corners behind the camera fall back to the full image.
fn projected_bbox(frame: &FrameBundle, aabb: &Aabb, inside: &[usize]) -> (usize, usize, usize, usize) {
    let (w, h) = (frame.width as f64, frame.height as f64);
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let inv = frame.pose.inverse();
    for c in aabb.corners() {
        let cam = crate::geometry::transform(&inv, &c);
        match frame.intrinsics.project(&cam) {
            Some((u, v)) => {
                lo = (lo.0.min(u), lo.1.min(v));
                hi = (hi.0.max(u), hi.1.max(v));
            }
            None => return (0, frame.width, 0, frame.height),
        }
    }
    for &idx in inside {
        let (u, v) = frame.pixel(idx);
        lo = (lo.0.min(u as f64), lo.1.min(v as f64));
        hi = (hi.0.max(u as f64), hi.1.max(v as f64));
    }
    let u0 = lo.0.floor().clamp(0.0, w - 1.0) as usize;
    let v0 = lo.1.floor().clamp(0.0, h - 1.0) as usize;
    let u1 = (hi.0.ceil() + 1.0).clamp(1.0, w) as usize;
    let v1 = (hi.1.ceil() + 1.0).clamp(1.0, h) as usize;
    (u0, u1.max(u0 + 1), v0, v1.max(v0 + 1))
}
