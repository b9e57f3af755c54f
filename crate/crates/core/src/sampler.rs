//! Meta-training task sampling: random-walk entity collection, induced
//! sub-graphs, a support/query split and task-local relabeling.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{build_graph, KnowledgeGraph, Triple};
use crate::parallel::map_indexed;
use crate::rng::rng_from;

/// Attempts per task before sampling gives up.
pub const MAX_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Walks started from each seed entity.
    pub n_rw: usize,
    /// Steps per walk.
    pub l_rw: usize,
    /// Re-seeding rounds from already collected entities.
    pub t_rw: usize,
    pub query_fraction: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_rw: 10,
            l_rw: 5,
            t_rw: 10,
            query_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rw == 0 || self.l_rw == 0 || self.t_rw == 0 {
            return Err(Error::Config("n_rw, l_rw and t_rw must all be >= 1".into()));
        }
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(Error::Config(format!(
                "query_fraction must be in (0, 1), got {}",
                self.query_fraction
            )));
        }
        Ok(())
    }
}

/// Undirected adjacency used by the walks; one entry per triple endpoint.
#[derive(Clone, Debug)]
pub struct WalkIndex {
    neighbors: Vec<Vec<usize>>,
}

impl WalkIndex {
    pub fn new(graph: &KnowledgeGraph) -> Self {
        let mut neighbors = vec![Vec::new(); graph.entity_count()];
        for t in graph.triples() {
            neighbors[t.head].push(t.tail);
            if t.head != t.tail {
                neighbors[t.tail].push(t.head);
            }
        }
        WalkIndex { neighbors }
    }

    fn walk(&self, start: usize, len: usize, rng: &mut impl Rng, into: &mut BTreeSet<usize>) {
        let mut at = start;
        into.insert(at);
        for _ in 0..len {
            let next = &self.neighbors[at];
            if next.is_empty() {
                return;
            }
            at = next[rng.gen_range(0..next.len())];
            into.insert(at);
        }
    }
}

/// Entities visited by `n_rw` walks from a uniform seed, then by `n_rw` walks
/// from each of `t_rw` entities redrawn from the collected set.
pub fn sample_entity_set(graph: &KnowledgeGraph, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<BTreeSet<usize>> {
    sample_entity_set_indexed(graph, &WalkIndex::new(graph), cfg, rng)
}

pub fn sample_entity_set_indexed(
    graph: &KnowledgeGraph,
    index: &WalkIndex,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<BTreeSet<usize>> {
    cfg.validate()?;
    if graph.entity_count() == 0 {
        return Err(Error::Contract("cannot sample from an empty graph".into()));
    }
    let mut set = BTreeSet::new();
    let seed = rng.gen_range(0..graph.entity_count());
    for _ in 0..cfg.n_rw {
        index.walk(seed, cfg.l_rw, rng, &mut set);
    }
    for _ in 0..cfg.t_rw {
        // The set is small; a linear pick keeps the draw independent of hash order.
        let start = *set.iter().nth(rng.gen_range(0..set.len())).expect("non-empty");
        for _ in 0..cfg.n_rw {
            index.walk(start, cfg.l_rw, rng, &mut set);
        }
    }
    Ok(set)
}

/// Source triples with both endpoints in `entities`, in source order.
pub fn induce_subkg(graph: &KnowledgeGraph, entities: &BTreeSet<usize>) -> Vec<Triple> {
    let mut member = vec![false; graph.entity_count()];
    for &e in entities {
        if e < member.len() {
            member[e] = true;
        }
    }
    graph
        .triples()
        .iter()
        .filter(|t| member[t.head] && member[t.tail])
        .copied()
        .collect()
}

/// A sampled episode. Entity and relation ids are task-local; `relation_map`
/// and `entity_map` send them back to source ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub graph: KnowledgeGraph,
    pub query: Vec<Triple>,
    pub relation_map: Vec<usize>,
    pub entity_map: Vec<usize>,
    pub source_relation_count: usize,
}

impl Task {
    fn to_source_relations(&self, triples: &[Triple]) -> Vec<Triple> {
        triples
            .iter()
            .map(|t| Triple::new(t.head, self.relation_map[t.relation], t.tail))
            .collect()
    }

    /// The support graph with task-local entities but source relation ids, as
    /// consumed by the embedding producer.
    pub fn model_graph(&self) -> Result<KnowledgeGraph> {
        build_graph(
            self.to_source_relations(self.graph.triples()),
            self.graph.entity_count(),
            self.source_relation_count,
        )
    }

    /// Query triples with task-local entities and source relation ids.
    pub fn model_query(&self) -> Vec<Triple> {
        self.to_source_relations(&self.query)
    }

    /// Map task triples back to source ids.
    pub fn unlabel(&self, triples: &[Triple]) -> Vec<Triple> {
        triples
            .iter()
            .map(|t| {
                Triple::new(
                    self.entity_map[t.head],
                    self.relation_map[t.relation],
                    self.entity_map[t.tail],
                )
            })
            .collect()
    }

    /// Check that every query entity has support and that maps are in range.
    pub fn check(&self) -> Result<()> {
        let n = self.graph.entity_count();
        for t in &self.query {
            if t.head >= n || t.tail >= n || t.relation >= self.relation_map.len() {
                return Err(Error::Validation(format!("query triple {t:?} out of range")));
            }
        }
        if self.relation_map.len() != self.graph.relation_count() || self.entity_map.len() != n {
            return Err(Error::Validation("task maps do not match graph size".into()));
        }
        if self.relation_map.iter().any(|&r| r >= self.source_relation_count) {
            return Err(Error::Validation("relation map leaves the source vocabulary".into()));
        }
        // build_graph already rejected isolated entities, so every id < n has support.
        Ok(())
    }
}

fn touched(t: &Triple) -> impl Iterator<Item = usize> {
    let tail = (t.tail != t.head).then_some(t.tail);
    std::iter::once(t.head).chain(tail)
}

/// Split induced `triples` (source ids) into support and query, relabel, and
/// build the task graph. `Ok(None)` means the draw was degenerate and the
/// caller should resample.
pub fn build_task(
    triples: &[Triple],
    source_relation_count: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Option<Task>> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(Error::Contract("build_task needs at least one triple".into()));
    }
    let n = triples.len();
    let wanted = ((cfg.query_fraction * n as f64).ceil() as usize).min(n);
    let candidates = sample(rng, n, wanted).into_vec();

    // Support occurrences per entity; a candidate moves to the query only if
    // both endpoints keep at least one support triple.
    let mut occurrences: BTreeMap<usize, usize> = BTreeMap::new();
    for t in triples {
        for e in touched(t) {
            *occurrences.entry(e).or_default() += 1;
        }
    }
    let mut in_query = vec![false; n];
    for i in candidates {
        if touched(&triples[i]).all(|e| occurrences[&e] > 1) {
            for e in touched(&triples[i]) {
                *occurrences.get_mut(&e).expect("counted") -= 1;
            }
            in_query[i] = true;
        }
    }
    let support: Vec<Triple> = (0..n).filter(|&i| !in_query[i]).map(|i| triples[i]).collect();
    let query: Vec<Triple> = (0..n).filter(|&i| in_query[i]).map(|i| triples[i]).collect();

    let mut entity_map: Vec<usize> = support
        .iter()
        .flat_map(|t| [t.head, t.tail])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if query.is_empty() || support.len() < 2 || entity_map.len() < 2 {
        return Ok(None);
    }
    entity_map.shuffle(rng);
    let relation_map: Vec<usize> = support
        .iter()
        .chain(&query)
        .map(|t| t.relation)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let entity_local: BTreeMap<usize, usize> = entity_map.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let relation_local: BTreeMap<usize, usize> = relation_map.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let local = |t: &Triple| Triple::new(entity_local[&t.head], relation_local[&t.relation], entity_local[&t.tail]);

    let graph = build_graph(support.iter().map(local).collect(), entity_map.len(), relation_map.len())?;
    Ok(Some(Task {
        graph,
        query: query.iter().map(local).collect(),
        relation_map,
        entity_map,
        source_relation_count,
    }))
}

/// Draw one task, resampling degenerate draws up to [`MAX_ATTEMPTS`] times.
pub fn sample_task(
    graph: &KnowledgeGraph,
    index: &WalkIndex,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Task> {
    for _ in 0..MAX_ATTEMPTS {
        let entities = sample_entity_set_indexed(graph, index, cfg, rng)?;
        let induced = induce_subkg(graph, &entities);
        if induced.is_empty() {
            continue;
        }
        if let Some(task) = build_task(&induced, graph.relation_count(), cfg, rng)? {
            return Ok(task);
        }
    }
    Err(Error::Sampling {
        attempts: MAX_ATTEMPTS,
        reason: "every draw produced an empty query, fewer than 2 entities or fewer than 2 support triples".into(),
    })
}

/// Independent task streams drawn from one sampler seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Train,
    Validation,
}

impl PoolKind {
    fn stream(self) -> u64 {
        match self {
            PoolKind::Train => 1,
            PoolKind::Validation => 2,
        }
    }
}

/// `count` tasks; task `i` depends only on `(cfg.seed, kind, i)`.
pub fn sample_pool(
    graph: &KnowledgeGraph,
    cfg: &SamplerConfig,
    kind: PoolKind,
    count: usize,
    workers: usize,
) -> Result<Vec<Task>> {
    cfg.validate()?;
    let index = WalkIndex::new(graph);
    map_indexed(count, workers, |i| {
        let mut rng = rng_from(cfg.seed, &[kind.stream(), i as u64]);
        sample_task(graph, &index, cfg, &mut rng)
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoolStats {
    pub tasks: usize,
    pub mean_entities: f64,
    pub mean_support_triples: f64,
    pub mean_query_triples: f64,
    pub mean_relations: f64,
}

pub fn pool_stats(tasks: &[Task]) -> PoolStats {
    let n = tasks.len().max(1) as f64;
    let mean = |f: &dyn Fn(&Task) -> usize| tasks.iter().map(f).sum::<usize>() as f64 / n;
    PoolStats {
        tasks: tasks.len(),
        mean_entities: mean(&|t| t.graph.entity_count()),
        mean_support_triples: mean(&|t| t.graph.triples().len()),
        mean_query_triples: mean(&|t| t.query.len()),
        mean_relations: mean(&|t| t.relation_map.len()),
    }
}

/// Line-oriented pool dump. Per task: a `task` header, one `relation` line per
/// task relation (local id, source label), then `support` and `query` triples
/// as tab-separated task-local integers.
pub fn write_pool<W: Write>(out: &mut W, tasks: &[Task], relation_labels: &[String]) -> std::io::Result<()> {
    for (i, task) in tasks.iter().enumerate() {
        writeln!(
            out,
            "task\t{i}\t{}\t{}\t{}",
            task.graph.entity_count(),
            task.graph.triples().len(),
            task.query.len()
        )?;
        for (local, &source) in task.relation_map.iter().enumerate() {
            let label = relation_labels.get(source).map_or_else(|| source.to_string(), Clone::clone);
            writeln!(out, "relation\t{local}\t{label}")?;
        }
        for t in task.graph.triples() {
            writeln!(out, "support\t{}\t{}\t{}", t.head, t.relation, t.tail)?;
        }
        for t in &task.query {
            writeln!(out, "query\t{}\t{}\t{}", t.head, t.relation, t.tail)?;
        }
    }
    Ok(())
}
