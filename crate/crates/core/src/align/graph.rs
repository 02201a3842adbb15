//! Cross-agent instance graph: vertices are agent-level instances, edges
//! join spatially co-identical instances of different agents.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::KdTree;

use super::cloud::{overlap_indexed, InstanceCloud, Overlap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexKey {
    pub agent: u32,
    pub instance: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub key: VertexKey,
    pub global_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub overlap: Overlap,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollabGraph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
    /// Connected components as vertex indices, each sorted, ordered by
    /// their smallest member.
    pub clusters: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphThresholds {
    pub tau: f64,
    pub theta_iou: f64,
    pub theta_iob: f64,
}

impl GraphThresholds {
    pub fn is_edge(&self, o: &Overlap) -> bool {
        o.iou >= self.theta_iou || o.max_iob() >= self.theta_iob
    }
}

/// Connected components of an undirected graph by iterative traversal.
pub fn components(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for (a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(v);
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Builds the graph over every agent's instance clouds.
pub fn build_graph(clouds: &[InstanceCloud], th: &GraphThresholds) -> Result<CollabGraph> {
    let agents: BTreeSet<u32> = clouds.iter().map(|c| c.agent_id).collect();
    if agents.len() < 2 {
        return Err(Error::Precondition("collaborative graph needs at least 2 agents".into()));
    }
    if let Some(c) = clouds.iter().find(|c| c.points.is_empty()) {
        return Err(Error::Precondition(format!(
            "empty cloud for agent {} instance {}",
            c.agent_id, c.instance_id
        )));
    }
    let trees: Vec<KdTree> = clouds.par_iter().map(|c| KdTree::new(&c.points)).collect();
    let pairs: Vec<(usize, usize)> = (0..clouds.len())
        .flat_map(|a| (a + 1..clouds.len()).map(move |b| (a, b)))
        .filter(|&(a, b)| clouds[a].agent_id != clouds[b].agent_id)
        .collect();
    let edges: Vec<Edge> = pairs
        .par_iter()
        .filter_map(|&(a, b)| {
            let o = overlap_indexed(&trees[a], &trees[b], th.tau);
            th.is_edge(&o).then_some(Edge { a, b, overlap: o })
        })
        .collect();
    let clusters = components(clouds.len(), edges.iter().map(|e| (e.a, e.b)));
    Ok(CollabGraph {
        vertices: clouds
            .iter()
            .map(|c| Vertex {
                key: VertexKey { agent: c.agent_id, instance: c.instance_id },
                global_id: c.global_id,
            })
            .collect(),
        edges,
        clusters,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    /// One agent contributes several vertices to a cluster.
    DuplicateAgent { cluster: usize, agent: u32, count: usize },
    /// Cluster members disagree on their global id.
    MixedGlobalIds { cluster: usize, ids: Vec<Option<u32>> },
}

/// Checks the one-to-one mapping state after corrections.
pub fn verify_injective(graph: &CollabGraph) -> (bool, Vec<Violation>) {
    let mut violations = Vec::new();
    for (ci, cluster) in graph.clusters.iter().enumerate() {
        let mut per_agent: BTreeMap<u32, usize> = BTreeMap::new();
        for &v in cluster {
            *per_agent.entry(graph.vertices[v].key.agent).or_default() += 1;
        }
        for (agent, count) in per_agent {
            if count > 1 {
                violations.push(Violation::DuplicateAgent { cluster: ci, agent, count });
            }
        }
        let ids: BTreeSet<Option<u32>> = cluster.iter().map(|&v| graph.vertices[v].global_id).collect();
        if ids.len() > 1 || ids.contains(&None) {
            violations.push(Violation::MixedGlobalIds { cluster: ci, ids: ids.into_iter().collect() });
        }
    }
    (violations.is_empty(), violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn blob(agent: u32, instance: u32, offset: Vec3, n: usize) -> InstanceCloud {
        let points = (0..n)
            .map(|i| offset + Vec3::new((i % 10) as f64 * 0.05, (i / 10) as f64 * 0.05, 0.0))
            .collect();
        InstanceCloud { agent_id: agent, instance_id: instance, global_id: Some(instance), points }
    }

    fn th() -> GraphThresholds {
        GraphThresholds { tau: 0.01, theta_iou: 0.25, theta_iob: 0.5 }
    }

    #[test]
    fn disjoint_instances_have_no_edges() {
        let c = vec![blob(0, 1, Vec3::zeros(), 50), blob(1, 1, Vec3::new(5.0, 0.0, 0.0), 50)];
        let g = build_graph(&c, &th()).unwrap();
        assert!(g.edges.is_empty());
        assert_eq!(g.clusters, vec![vec![0], vec![1]]);
    }

    #[test]
    fn same_object_four_agents_one_cluster() {
        let c: Vec<_> = (0..4).map(|a| blob(a, 1, Vec3::zeros(), 50)).collect();
        let g = build_graph(&c, &th()).unwrap();
        assert_eq!(g.edges.len(), 6);
        assert_eq!(g.clusters, vec![vec![0, 1, 2, 3]]);
        assert!(verify_injective(&g).0);
    }

    #[test]
    fn single_agent_rejected() {
        let c = vec![blob(0, 1, Vec3::zeros(), 5), blob(0, 2, Vec3::zeros(), 5)];
        assert!(build_graph(&c, &th()).is_err());
    }

    #[test]
    fn verify_reports_duplicates() {
        let mut g = build_graph(&[blob(0, 1, Vec3::zeros(), 20), blob(1, 1, Vec3::zeros(), 20)], &th()).unwrap();
        assert!(verify_injective(&g).0);
        g.vertices.push(Vertex { key: VertexKey { agent: 1, instance: 2 }, global_id: Some(1) });
        g.clusters[0].push(2);
        let (ok, v) = verify_injective(&g);
        assert!(!ok);
        assert_eq!(v.len(), 1);
        assert!(verify_injective(&CollabGraph::default()).0);
    }
}
