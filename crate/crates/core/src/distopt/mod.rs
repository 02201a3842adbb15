//! Distributed optimisation of the per-instance fields: local data loss,
//! parameter and rendering consistency across agents, Adam, and the
//! round-based training step.

pub mod adam;
pub mod agent;
pub mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use agent::{
    gossip_mix, mix_seed, objective, Agent, AgentView, FieldSlot, MapLayout, MapMode, Objective, RoundStats, Strategy,
    TrainConfig, COVERAGE_GRID, GLOBAL_FIELD_ID,
};
pub use loss::{
    data_loss, param_consistency_loss, render_consistency_loss, render_depth, render_depths, shared_to_ray, DataLoss,
    LossWeights, RayTarget, RenderConsistency,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Arch, InstanceField, Ray};
    use crate::geometry::{Aabb, Vec3};
    use crate::netsim::{deliver, ChannelModel, MessageKind, SharedRay};
    use crate::scenarios::{gt_views, one_sphere};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use super::Strategy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(cfg: TrainConfig) -> TrainConfig {
        TrainConfig { rays_per_round: 64, samples_per_ray: 16, shared_rays_per_peer: 32, ..cfg }
    }

    fn agents(cfg: &TrainConfig) -> Vec<Agent> {
        let (_, views) = gt_views(&one_sphere()).unwrap();
        let layout = MapLayout::build(&views, cfg).unwrap();
        views.into_iter().map(|v| Agent::new(v, &layout, cfg, 5).unwrap()).collect()
    }

    fn run(agents: &mut [Agent], rounds: u32, p: f64) {
        let ids: Vec<u32> = agents.iter().map(|a| a.id()).collect();
        let mut inboxes = std::collections::BTreeMap::new();
        for r in 0..rounds {
            let mut outbox = Vec::new();
            for a in agents.iter_mut() {
                let inbox: Vec<_> = inboxes.remove(&a.id()).unwrap_or_default();
                outbox.extend(a.train_round(&inbox, r).unwrap().0);
            }
            inboxes = deliver(outbox, &ChannelModel { success_rate: p, seed: 9, latency: 0 }, &ids, r).unwrap().0;
        }
    }

    #[test]
    fn layout_sees_opposite_quarters() {
        let cfg = TrainConfig::default();
        let (_, views) = gt_views(&one_sphere()).unwrap();
        let layout = MapLayout::build(&views, &cfg).unwrap();
        assert_eq!(layout.bounds.len(), 1);
        assert!(layout.bounds[&1].contains(&Vec3::new(0.0, 0.0, 0.2)));
        let (a, b) = (layout.coverage_of(0, 1), layout.coverage_of(1, 1));
        assert_ne!(a, u64::MAX);
        assert_ne!(b, u64::MAX);
        assert_ne!(a & !b, 0);
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let cfg = TrainConfig { weights: LossWeights { rho_con: 0.1, rho_rend: 1.0, ..Default::default() }, ..small(TrainConfig::default()) };
        let ag = agents(&cfg);
        let (a, b) = (&ag[0], &ag[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = a.sample_batch(1, 12, &mut rng);
        let fb = b.field(1).unwrap();
        let shared: Vec<SharedRay> = b
            .sample_batch(1, 6, &mut rng)
            .iter()
            .map(|t| {
                let d = render_depth(fb, &t.ray, 16).unwrap().unwrap();
                SharedRay { origin: t.ray.origin, dir: t.ray.dir, t_near: t.ray.t_near, t_far: t.ray.t_far, seed: t.ray.seed, depth: d }
            })
            .collect();
        let fa = a.field(1).unwrap().clone();
        let obj = objective(&fa, &batch, &[fb], &shared, &cfg.weights, true, 16).unwrap();
        assert!(obj.con > 0.0 && obj.rend > 0.0 && obj.data.total > 0.0);
        let h = 1e-4;
        let mut num = vec![0.0; obj.grad.len()];
        for (i, n) in num.iter_mut().enumerate() {
            let mut p = fa.clone();
            p.update(|t| t[i] += h);
            let mut m = fa.clone();
            m.update(|t| t[i] -= h);
            let lp = objective(&p, &batch, &[fb], &shared, &cfg.weights, true, 16).unwrap().total;
            let lm = objective(&m, &batch, &[fb], &shared, &cfg.weights, true, 16).unwrap().total;
            *n = (lp - lm) / (2.0 * h);
        }
        let diff: f64 = num.iter().zip(&obj.grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = obj.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }

    #[test]
    fn zero_coupling_isolates_agents() {
        let cfg = small(TrainConfig { weights: LossWeights { rho_con: 0.0, rho_rend: 0.0, ..Default::default() }, ..Default::default() });
        let mut coupled = agents(&cfg);
        run(&mut coupled, 3, 1.0);
        let mut alone = agents(&cfg);
        for r in 0..3 {
            alone[0].train_round(&[], r).unwrap();
        }
        assert_eq!(coupled[0].field(1).unwrap(), alone[0].field(1).unwrap());
    }

    #[test]
    fn dropped_messages_match_single_agent_training() {
        for strategy in [Strategy::Penalty, Strategy::Gossip] {
            let cfg = small(TrainConfig { strategy, ..Default::default() });
            let mut coupled = agents(&cfg);
            run(&mut coupled, 3, 0.0);
            let mut alone = agents(&cfg);
            for r in 0..3 {
                alone[1].train_round(&[], r).unwrap();
            }
            assert_eq!(coupled[1].field(1).unwrap(), alone[1].field(1).unwrap());
        }
    }

    #[test]
    fn delivered_messages_couple_agents() {
        let cfg = small(TrainConfig::default());
        let mut coupled = agents(&cfg);
        run(&mut coupled, 3, 1.0);
        let mut alone = agents(&cfg);
        for r in 0..3 {
            alone[0].train_round(&[], r).unwrap();
        }
        assert_ne!(coupled[0].field(1).unwrap().theta(), alone[0].field(1).unwrap().theta());
    }

    #[test]
    fn round_emits_params_and_blind_zone_rays() {
        let cfg = small(TrainConfig::default());
        let mut ag = agents(&cfg);
        let (out, stats) = ag[0].train_round(&[], 0).unwrap();
        assert_eq!(out.iter().filter(|m| m.kind == MessageKind::ParamShare).count(), 1);
        let rays: Vec<_> = out.iter().filter(|m| m.kind == MessageKind::RayShare).collect();
        assert_eq!(rays.len(), 1);
        assert_eq!(rays[0].receiver, 1);
        let share = rays[0].rays().unwrap();
        assert!(!share.rays.is_empty() && share.rays.len() <= 32);
        assert_eq!(stats.bytes_out, out.iter().map(|m| m.encoded_len() as u64).sum::<u64>());
        let (_, stats) = ag[1].train_round(&out, 0).unwrap();
        assert!(stats.l_con > 0.0);
        assert!(stats.shared_used > 0);
        assert!(stats.l_rend > 0.0);
    }

    #[test]
    fn arch_mismatch_is_rejected_not_fatal() {
        let cfg = small(TrainConfig::default());
        let mut ag = agents(&cfg);
        let b = ag[1].field(1).unwrap();
        let other = InstanceField::new(Arch { width: 8, ..Arch::default() }, *b.aabb(), 1, 0, 0.0).unwrap();
        let msg = crate::netsim::Message::param_share(1, 0, 0, &other);
        let (_, stats) = ag[0].train_round(&[msg], 0).unwrap();
        assert_eq!(stats.rejected, 1);
    }

    #[test]
    fn single_agent_fitting_reduces_data_loss() {
        let cfg = TrainConfig { rays_per_round: 256, samples_per_ray: 24, adam: AdamConfig { lr: 5e-3, ..Default::default() }, ..Default::default() };
        let mut ag = agents(&cfg);
        let mut first = 0.0;
        let mut last = 0.0;
        for r in 0..150 {
            let (_, s) = ag[0].train_round(&[], r).unwrap();
            assert_eq!(s.l_con, 0.0);
            assert_eq!(s.l_rend, 0.0);
            if r < 10 {
                first += s.l_data;
            }
            if r >= 140 {
                last += s.l_data;
            }
        }
        assert!(last < 0.6 * first, "data loss {first} -> {last}");
    }

    #[test]
    fn global_mode_has_one_field() {
        let cfg = small(TrainConfig { mode: MapMode::Global, ..Default::default() });
        let ag = agents(&cfg);
        assert_eq!(ag[0].owned_ids(), vec![GLOBAL_FIELD_ID]);
    }

    #[test]
    fn layout_mode_must_match() {
        let (_, views) = gt_views(&one_sphere()).unwrap();
        let layout = MapLayout::build(&views, &TrainConfig::default()).unwrap();
        let cfg = TrainConfig { mode: MapMode::Global, ..Default::default() };
        assert!(Agent::new(views[0].clone(), &layout, &cfg, 0).is_err());
    }

    #[test]
    fn mirrors_adopt_peer_parameters() {
        let cfg = small(TrainConfig::default());
        let (_, mut views) = gt_views(&one_sphere()).unwrap();
        for m in views[1].masks.iter_mut() {
            m.iter_mut().for_each(|v| *v = 0);
        }
        let layout = MapLayout::build(&views, &cfg).unwrap();
        let mut ag: Vec<Agent> = views.into_iter().map(|v| Agent::new(v, &layout, &cfg, 1).unwrap()).collect();
        assert!(ag[1].field(1).is_none());
        let (out, _) = ag[0].train_round(&[], 0).unwrap();
        ag[1].train_round(&out, 0).unwrap();
        assert_eq!(ag[1].field(1), ag[0].field(1));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn gossip_preserves_mean(seeds in proptest::collection::vec(0u64..1000, 2..5)) {
            let b = Aabb::new(Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0));
            let fields: Vec<InstanceField> =
                seeds.iter().map(|s| InstanceField::new(Arch::default(), b, 1, *s, 0.0).unwrap()).collect();
            let n = fields.len();
            let mean = |fs: &[InstanceField], i: usize| fs.iter().map(|f| f.theta()[i]).sum::<f64>() / n as f64;
            let mut mixed = fields.clone();
            for (k, m) in mixed.iter_mut().enumerate() {
                let others: Vec<&InstanceField> = fields.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, f)| f).collect();
                gossip_mix(m, &others, n).unwrap();
            }
            for i in (0..fields[0].theta().len()).step_by(7) {
                prop_assert!((mean(&fields, i) - mean(&mixed, i)).abs() < 1e-12);
            }
        }

        #[test]
        fn losses_are_non_negative(y in -0.3f64..0.3, mask in 0u8..2, depth in 0.0f64..3.0, seed in 0u64..100) {
            let b = Aabb::new(Vec3::new(-0.5, -0.5, -0.5), Vec3::new(0.5, 0.5, 0.5));
            let f = InstanceField::new(Arch::default(), b, 1, seed, 0.0).unwrap();
            let ray = Ray::new(Vec3::new(0.0, y, -2.0), Vec3::z(), 0.0, 5.0).unwrap().with_seed(seed);
            let t = RayTarget { ray, mask: mask as f64, depth, color: [0.5; 3] };
            let (l, g) = data_loss(&f, &[t], &LossWeights::default(), 16).unwrap();
            prop_assert!(l.occ >= 0.0 && l.depth >= 0.0 && l.color >= 0.0 && l.total.is_finite());
            prop_assert!(g.iter().all(|v| v.is_finite()));
        }
    }
}
