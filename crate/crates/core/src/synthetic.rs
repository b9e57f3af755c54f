//! A deterministic WordNet-like inductive benchmark, used when the real
//! benchmark files are not available.
//!
//! Entities are synsets with a part of speech (noun, verb, adjective) and a
//! latent topic. Nouns and verbs form hypernym forests whose children mostly
//! keep their parent's topic; some noun leaves are instances. The remaining
//! budget goes to derivational links (symmetric, same topic), meronymy and
//! part-of within a topic, topic-domain links to per-topic hub synsets,
//! also-see, verb groups and adjective similarity. Source and target graphs
//! are generated independently over disjoint entity labels and share the
//! relation vocabulary; target evaluation triples are held out so that both
//! endpoints keep support.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::{SOURCE_TRAIN, TARGET_TEST, TARGET_TRAIN, TARGET_VALID};
use crate::rng::rng_from;

pub const HYPERNYM: &str = "_hypernym";
pub const DERIVATION: &str = "_derivationally_related_form";
pub const MEMBER_MERONYM: &str = "_member_meronym";
pub const HAS_PART: &str = "_has_part";
pub const DOMAIN_TOPIC: &str = "_synset_domain_topic_of";
pub const INSTANCE_HYPERNYM: &str = "_instance_hypernym";
pub const ALSO_SEE: &str = "_also_see";
pub const VERB_GROUP: &str = "_verb_group";
pub const SIMILAR_TO: &str = "_similar_to";

/// Share of the non-hypernym budget per relation.
const FILL_WEIGHTS: [(&str, f64); 7] = [
    (DERIVATION, 0.30),
    (MEMBER_MERONYM, 0.08),
    (HAS_PART, 0.06),
    (DOMAIN_TOPIC, 0.05),
    (ALSO_SEE, 0.03),
    (VERB_GROUP, 0.03),
    (SIMILAR_TO, 0.02),
];

/// Size of one generated graph.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphShape {
    pub entities: usize,
    pub support: usize,
    pub valid: usize,
    pub test: usize,
    /// Relations this graph may use (hypernym is always present).
    pub relations: Vec<&'static str>,
}

/// Source and target shapes of a benchmark version.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkShape {
    pub source: GraphShape,
    pub target: GraphShape,
}

impl BenchmarkShape {
    /// Entity, relation and triple counts of the first WordNet inductive version.
    pub fn wordnet_v1() -> Self {
        let all = vec![
            HYPERNYM,
            DERIVATION,
            MEMBER_MERONYM,
            HAS_PART,
            DOMAIN_TOPIC,
            INSTANCE_HYPERNYM,
            ALSO_SEE,
            VERB_GROUP,
            SIMILAR_TO,
        ];
        let target: Vec<&'static str> = all.iter().copied().filter(|r| *r != SIMILAR_TO).collect();
        BenchmarkShape {
            source: GraphShape {
                entities: 2746,
                support: 6678,
                valid: 0,
                test: 0,
                relations: all,
            },
            target: GraphShape {
                entities: 922,
                support: 1618,
                valid: 185,
                test: 188,
                relations: target,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pos {
    Noun,
    Verb,
    Adj,
}

/// Labeled triples of one generated graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratedGraph {
    pub support: Vec<[String; 3]>,
    pub valid: Vec<[String; 3]>,
    pub test: Vec<[String; 3]>,
}

struct Builder<'a, R: Rng> {
    rng: &'a mut R,
    pos: Vec<Pos>,
    topic: Vec<usize>,
    triples: Vec<(usize, &'static str, usize)>,
    seen: HashSet<(usize, &'static str, usize)>,
    degree: Vec<usize>,
}

impl<R: Rng> Builder<'_, R> {
    fn add(&mut self, h: usize, r: &'static str, t: usize) -> bool {
        if h == t || !self.seen.insert((h, r, t)) {
            return false;
        }
        self.triples.push((h, r, t));
        self.degree[h] += 1;
        self.degree[t] += 1;
        true
    }

    fn of(&self, pos: Pos) -> Vec<usize> {
        (0..self.pos.len()).filter(|&e| self.pos[e] == pos).collect()
    }

    fn pick_same_topic(&mut self, pool: &[usize], topic: usize) -> Option<usize> {
        for _ in 0..8 {
            let e = *pool.choose(self.rng)?;
            if self.topic[e] == topic {
                return Some(e);
            }
        }
        pool.choose(self.rng).copied()
    }
}

/// Generate one graph of the given shape.
pub fn generate_graph(shape: &GraphShape, label_base: u64, seed: u64) -> Result<GeneratedGraph> {
    let n = shape.entities;
    let total = shape.support + shape.valid + shape.test;
    if n < 20 || total < n {
        return Err(Error::Config(format!(
            "a WordNet-like graph needs >= 20 entities and at least one triple per entity (got {n} / {total})"
        )));
    }
    let mut rng = rng_from(seed, &[label_base]);
    let topics = (n / 60).max(4);
    let mut b = Builder {
        pos: Vec::with_capacity(n),
        topic: Vec::with_capacity(n),
        triples: Vec::with_capacity(total),
        seen: HashSet::new(),
        degree: vec![0; n],
        rng: &mut rng,
    };
    for _ in 0..n {
        let u: f64 = b.rng.gen();
        b.pos.push(if u < 0.72 {
            Pos::Noun
        } else if u < 0.90 {
            Pos::Verb
        } else {
            Pos::Adj
        });
        b.topic.push(0);
    }
    let nouns = b.of(Pos::Noun);
    let verbs = b.of(Pos::Verb);
    let adjs = b.of(Pos::Adj);
    let uses = |r: &str| shape.relations.contains(&r);

    // Hypernym forests. Early members become roots; later ones attach to an
    // earlier synset of the same part of speech by preferential attachment,
    // usually inheriting its topic.
    let mut children = vec![0usize; n];
    let mut is_instance = vec![false; n];
    let mut topic_hub = vec![None; topics];
    for group in [&nouns, &verbs] {
        let roots = (group.len() / 25).max(1);
        for (i, &e) in group.iter().enumerate() {
            if i < roots {
                b.topic[e] = b.rng.gen_range(0..topics);
                continue;
            }
            let parent = loop {
                let cand = group[b.rng.gen_range(0..i)];
                let accept = (children[cand] + 1) as f64 / (children[cand] + 4) as f64;
                if !is_instance[cand] && b.rng.gen_bool(accept) {
                    break cand;
                }
            };
            b.topic[e] = if b.rng.gen_bool(0.85) {
                b.topic[parent]
            } else {
                b.rng.gen_range(0..topics)
            };
            let instance = b.pos[e] == Pos::Noun && uses(INSTANCE_HYPERNYM) && b.rng.gen_bool(0.08);
            is_instance[e] = instance;
            b.add(e, if instance { INSTANCE_HYPERNYM } else { HYPERNYM }, parent);
            children[parent] += 1;
        }
    }
    for &a in &adjs {
        b.topic[a] = b.rng.gen_range(0..topics);
    }
    for &e in &nouns {
        let t = b.topic[e];
        if topic_hub[t].is_none() && !is_instance[e] {
            topic_hub[t] = Some(e);
        }
    }

    // Adjectives get one anchoring link first so that none is isolated.
    for &a in &adjs {
        let partner = if uses(SIMILAR_TO) && b.rng.gen_bool(0.5) {
            let other = adjs.choose(b.rng).copied();
            other.filter(|&o| o != a).map(|o| (SIMILAR_TO, o))
        } else {
            None
        };
        match partner {
            Some((r, o)) => {
                b.add(a, r, o);
                b.add(o, r, a);
            }
            None => {
                let t = b.topic[a];
                if let Some(noun) = b.pick_same_topic(&nouns, t) {
                    b.add(a, DERIVATION, noun);
                    b.add(noun, DERIVATION, a);
                }
            }
        }
    }

    // Childless roots hang under another synset of their part of speech.
    for e in 0..n {
        if b.degree[e] > 0 {
            continue;
        }
        let pool = match b.pos[e] {
            Pos::Noun => &nouns,
            Pos::Verb => &verbs,
            Pos::Adj => &adjs,
        };
        let rel = if b.pos[e] == Pos::Adj { DERIVATION } else { HYPERNYM };
        for _ in 0..64 {
            let Some(&p) = pool.choose(b.rng) else { break };
            if p != e && !is_instance[p] && b.add(e, rel, p) {
                break;
            }
        }
    }

    let fill: Vec<(&'static str, f64)> = FILL_WEIGHTS.iter().copied().filter(|(r, _)| uses(r)).collect();
    let weight_sum: f64 = fill.iter().map(|(_, w)| w).sum();
    let mut stalls = 0;
    while b.triples.len() < total {
        if stalls > 100_000 {
            return Err(Error::Config("generator could not reach the requested triple count".into()));
        }
        let mut u = b.rng.gen::<f64>() * weight_sum;
        let rel = fill
            .iter()
            .find(|(_, w)| {
                u -= w;
                u < 0.0
            })
            .map_or(fill[fill.len() - 1].0, |(r, _)| *r);
        let room = total - b.triples.len();
        let added = match rel {
            DERIVATION => {
                let from = if b.rng.gen_bool(0.75) { &verbs } else { &adjs };
                let Some(&x) = from.choose(b.rng) else {
                    stalls += 1;
                    continue;
                };
                let t = b.topic[x];
                match b.pick_same_topic(&nouns, t) {
                    Some(noun) => {
                        let fwd = b.add(x, DERIVATION, noun);
                        let back = room > 1 && b.add(noun, DERIVATION, x);
                        fwd || back
                    }
                    None => false,
                }
            }
            MEMBER_MERONYM | HAS_PART => {
                let Some(&whole) = nouns.choose(b.rng) else {
                    stalls += 1;
                    continue;
                };
                let t = b.topic[whole];
                match b.pick_same_topic(&nouns, t) {
                    Some(part) => b.add(whole, rel, part),
                    None => false,
                }
            }
            DOMAIN_TOPIC => {
                let pool = if b.rng.gen_bool(0.7) { &nouns } else { &verbs };
                let Some(&e) = pool.choose(b.rng) else {
                    stalls += 1;
                    continue;
                };
                match topic_hub[b.topic[e]] {
                    Some(hub) => b.add(e, DOMAIN_TOPIC, hub),
                    None => false,
                }
            }
            ALSO_SEE => {
                let pool = if b.rng.gen_bool(0.6) { &adjs } else { &verbs };
                let (Some(&x), Some(&y)) = (pool.choose(b.rng), pool.choose(b.rng)) else {
                    stalls += 1;
                    continue;
                };
                let fwd = b.add(x, ALSO_SEE, y);
                let back = room > 1 && b.rng.gen_bool(0.5) && b.add(y, ALSO_SEE, x);
                fwd || back
            }
            VERB_GROUP => {
                let Some(&x) = verbs.choose(b.rng) else {
                    stalls += 1;
                    continue;
                };
                let t = b.topic[x];
                match b.pick_same_topic(&verbs, t) {
                    Some(y) => {
                        let fwd = b.add(x, VERB_GROUP, y);
                        let back = room > 1 && b.add(y, VERB_GROUP, x);
                        fwd || back
                    }
                    None => false,
                }
            }
            _ => {
                let (Some(&x), Some(&y)) = (adjs.choose(b.rng), adjs.choose(b.rng)) else {
                    stalls += 1;
                    continue;
                };
                let fwd = b.add(x, SIMILAR_TO, y);
                let back = room > 1 && b.add(y, SIMILAR_TO, x);
                fwd || back
            }
        };
        stalls = if added { 0 } else { stalls + 1 };
    }
    b.triples.truncate(total);
    let mut degree = vec![0usize; n];
    for &(h, _, t) in &b.triples {
        degree[h] += 1;
        degree[t] += 1;
    }
    if let Some(e) = degree.iter().position(|&d| d == 0) {
        return Err(Error::Config(format!("generated entity {e} is isolated")));
    }

    // Hold out evaluation triples whose endpoints keep other support.
    let mut order: Vec<usize> = (0..b.triples.len()).collect();
    order.shuffle(b.rng);
    let mut held = Vec::with_capacity(shape.valid + shape.test);
    let mut is_held = vec![false; b.triples.len()];
    for i in order {
        if held.len() == shape.valid + shape.test {
            break;
        }
        let (h, _, t) = b.triples[i];
        if degree[h] > 1 && degree[t] > 1 {
            degree[h] -= 1;
            degree[t] -= 1;
            is_held[i] = true;
            held.push(i);
        }
    }
    if held.len() < shape.valid + shape.test {
        return Err(Error::Config("not enough removable triples for evaluation".into()));
    }
    let label = |e: usize| format!("{:08}", label_base + 37 * e as u64);
    let row = |i: usize| {
        let (h, r, t) = b.triples[i];
        [label(h), r.to_owned(), label(t)]
    };
    Ok(GeneratedGraph {
        support: (0..b.triples.len()).filter(|&i| !is_held[i]).map(row).collect(),
        valid: held[..shape.valid].iter().map(|&i| row(i)).collect(),
        test: held[shape.valid..].iter().map(|&i| row(i)).collect(),
    })
}

fn write_rows(path: &Path, rows: &[[String; 3]]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = String::with_capacity(rows.len() * 40);
    for [h, r, t] in rows {
        text.push_str(h);
        text.push('\t');
        text.push_str(r);
        text.push('\t');
        text.push_str(t);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write a benchmark directory in the standard inductive layout.
pub fn write_benchmark(dir: &Path, shape: &BenchmarkShape, seed: u64) -> Result<()> {
    let source = generate_graph(&shape.source, 0, seed)?;
    let target = generate_graph(&shape.target, 50_000_000, seed)?;
    write_rows(&dir.join(SOURCE_TRAIN), &source.support)?;
    write_rows(&dir.join(TARGET_TRAIN), &target.support)?;
    write_rows(&dir.join(TARGET_VALID), &target.valid)?;
    write_rows(&dir.join(TARGET_TEST), &target.test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::InductiveSplit;
    use std::collections::BTreeSet;

    #[test]
    fn v1_shape_is_reproduced() {
        let dir = tempfile::tempdir().unwrap();
        let shape = BenchmarkShape::wordnet_v1();
        write_benchmark(dir.path(), &shape, 7).unwrap();
        let split = InductiveSplit::load(dir.path()).unwrap();
        assert_eq!(split.source.entity_count(), 2746);
        assert_eq!(split.source.triples().len(), 6678);
        assert_eq!(split.source.relation_count(), 9);
        assert_eq!(split.target_support.entity_count(), 922);
        assert_eq!(split.target_support.triples().len(), 1618);
        assert_eq!(split.target_test.len(), 188);
        assert_eq!(split.target_valid.len(), 185);
        assert_eq!((split.dropped_test, split.dropped_valid), (0, 0));
        assert_eq!(split.target_support.used_relations().len(), 8);
    }

    #[test]
    fn generation_is_deterministic() {
        let shape = BenchmarkShape::wordnet_v1().target;
        assert_eq!(generate_graph(&shape, 5, 1).unwrap(), generate_graph(&shape, 5, 1).unwrap());
        assert_ne!(generate_graph(&shape, 5, 1).unwrap(), generate_graph(&shape, 5, 2).unwrap());
    }

    #[test]
    fn derivational_links_are_mostly_symmetric() {
        let g = generate_graph(&BenchmarkShape::wordnet_v1().source, 0, 3).unwrap();
        let set: BTreeSet<(&str, &str)> = g
            .support
            .iter()
            .filter(|r| r[1] == DERIVATION)
            .map(|r| (r[0].as_str(), r[2].as_str()))
            .collect();
        let mirrored = set.iter().filter(|(h, t)| set.contains(&(*t, *h))).count();
        assert!(mirrored as f64 > 0.9 * set.len() as f64);
    }
}
