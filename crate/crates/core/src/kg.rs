//! Knowledge graphs: triple files, label vocabularies, adjacency views and the
//! source/target split used for inductive link prediction.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub const fn new(head: usize, relation: usize, tail: usize) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }
}

/// Dense label interning in first-appearance order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    ids: HashMap<String, usize>,
    labels: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab::new();
        for label in labels {
            let label = label.into();
            if vocab.ids.contains_key(&label) {
                return Err(Error::Validation(format!("duplicate label `{label}`")));
            }
            vocab.intern(&label);
        }
        Ok(vocab)
    }

    pub fn intern(&mut self, label: &str) -> usize {
        if let Some(&id) = self.ids.get(label) {
            return id;
        }
        let id = self.labels.len();
        self.ids.insert(label.to_owned(), id);
        self.labels.push(label.to_owned());
        id
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.ids.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// How relation labels are resolved while reading a triple file.
enum RelationLookup<'a> {
    Intern(&'a mut Vocab),
    Fixed(&'a Vocab),
}

/// How entity labels are resolved while reading a triple file.
enum EntityLookup<'a> {
    Intern(&'a mut Vocab),
    /// Read-only; lines with unknown entities are skipped and counted.
    Known(&'a Vocab),
}

fn read_triples(
    path: &Path,
    mut entities: EntityLookup<'_>,
    mut relations: RelationLookup<'_>,
) -> Result<(Vec<Triple>, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut triples = Vec::new();
    let mut skipped = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                message: format!(
                    "expected 3 tab-separated fields (head, relation, tail), found {}",
                    fields.len()
                ),
            });
        }
        let relation = match &mut relations {
            RelationLookup::Intern(v) => v.intern(fields[1]),
            RelationLookup::Fixed(v) => v
                .get(fields[1])
                .ok_or_else(|| Error::UnknownRelation(fields[1].to_owned()))?,
        };
        let (head, tail) = match &mut entities {
            EntityLookup::Intern(v) => {
                let h = v.intern(fields[0]);
                (h, v.intern(fields[2]))
            }
            EntityLookup::Known(v) => match (v.get(fields[0]), v.get(fields[2])) {
                (Some(h), Some(t)) => (h, t),
                _ => {
                    skipped += 1;
                    continue;
                }
            },
        };
        triples.push(Triple::new(head, relation, tail));
    }
    Ok((triples, skipped))
}

/// Read a `head<TAB>relation<TAB>tail` file, interning labels into the given
/// vocabularies. Duplicate lines are preserved.
pub fn load_triples(path: &Path, entities: &mut Vocab, relations: &mut Vocab) -> Result<Vec<Triple>> {
    read_triples(
        path,
        EntityLookup::Intern(entities),
        RelationLookup::Intern(relations),
    )
    .map(|(t, _)| t)
}

/// Like [`load_triples`] but relation labels must already exist in `relations`.
pub fn load_triples_fixed_relations(
    path: &Path,
    entities: &mut Vocab,
    relations: &Vocab,
) -> Result<Vec<Triple>> {
    read_triples(
        path,
        EntityLookup::Intern(entities),
        RelationLookup::Fixed(relations),
    )
    .map(|(t, _)| t)
}

/// Read evaluation triples against fixed vocabularies. Returns the triples
/// and the number of lines dropped because an entity is not in `entities`.
pub fn load_eval_triples(path: &Path, entities: &Vocab, relations: &Vocab) -> Result<(Vec<Triple>, usize)> {
    read_triples(
        path,
        EntityLookup::Known(entities),
        RelationLookup::Fixed(relations),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    entity_count: usize,
    relation_count: usize,
    triples: Vec<Triple>,
    entity_labels: Option<Vec<String>>,
    relation_labels: Vec<String>,
    out_relations: Vec<Vec<usize>>,
    in_relations: Vec<Vec<usize>>,
    in_neighbors: Vec<Vec<(usize, usize)>>,
}

/// Build the adjacency views over `triples`, rejecting out-of-range ids and
/// isolated entities.
pub fn build_graph(triples: Vec<Triple>, entity_count: usize, relation_count: usize) -> Result<KnowledgeGraph> {
    let mut out_sets = vec![BTreeSet::new(); entity_count];
    let mut in_sets = vec![BTreeSet::new(); entity_count];
    let mut in_neighbors = vec![Vec::new(); entity_count];
    for (i, t) in triples.iter().enumerate() {
        if t.head >= entity_count || t.tail >= entity_count || t.relation >= relation_count {
            return Err(Error::Validation(format!(
                "triple #{i} ({}, {}, {}) out of bounds for {entity_count} entities / {relation_count} relations",
                t.head, t.relation, t.tail
            )));
        }
        out_sets[t.head].insert(t.relation);
        in_sets[t.tail].insert(t.relation);
        in_neighbors[t.tail].push((t.head, t.relation));
    }
    let isolated: Vec<usize> = (0..entity_count)
        .filter(|&e| out_sets[e].is_empty() && in_sets[e].is_empty())
        .collect();
    if !isolated.is_empty() {
        let shown: Vec<String> = isolated.iter().take(20).map(|e| e.to_string()).collect();
        return Err(Error::Validation(format!(
            "{} isolated entit{}: [{}{}]",
            isolated.len(),
            if isolated.len() == 1 { "y" } else { "ies" },
            shown.join(", "),
            if isolated.len() > 20 { ", ..." } else { "" }
        )));
    }
    Ok(KnowledgeGraph {
        entity_count,
        relation_count,
        triples,
        entity_labels: None,
        relation_labels: (0..relation_count).map(|r| r.to_string()).collect(),
        out_relations: out_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        in_relations: in_sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        in_neighbors,
    })
}

impl KnowledgeGraph {
    pub fn with_entity_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.entity_count {
            return Err(Error::Validation(format!(
                "{} entity labels for {} entities",
                labels.len(),
                self.entity_count
            )));
        }
        self.entity_labels = Some(labels);
        Ok(self)
    }

    pub fn with_relation_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.relation_count {
            return Err(Error::Validation(format!(
                "{} relation labels for {} relations",
                labels.len(),
                self.relation_count
            )));
        }
        self.relation_labels = labels;
        Ok(self)
    }

    pub fn entity_count(&self) -> usize {
        self.entity_count
    }

    pub fn relation_count(&self) -> usize {
        self.relation_count
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_labels(&self) -> Option<&[String]> {
        self.entity_labels.as_deref()
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relation_labels
    }

    /// O(e): distinct relations with `e` as head, ascending.
    pub fn out_relations(&self, e: usize) -> &[usize] {
        &self.out_relations[e]
    }

    /// I(e): distinct relations with `e` as tail, ascending.
    pub fn in_relations(&self, e: usize) -> &[usize] {
        &self.in_relations[e]
    }

    /// N(e): one `(head, relation)` pair per ingoing triple, in triple order.
    pub fn in_neighbors(&self, e: usize) -> &[(usize, usize)] {
        &self.in_neighbors[e]
    }

    /// Total degree counting each triple once per endpoint.
    pub fn degree(&self, e: usize) -> usize {
        self.in_neighbors[e].len()
            + self
                .triples
                .iter()
                .filter(|t| t.head == e)
                .count()
    }

    /// Degree of every entity, computed in one pass.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.entity_count];
        for t in &self.triples {
            deg[t.head] += 1;
            deg[t.tail] += 1;
        }
        deg
    }

    /// Relation ids that occur in at least one triple.
    pub fn used_relations(&self) -> BTreeSet<usize> {
        self.triples.iter().map(|t| t.relation).collect()
    }

    /// Apply an entity permutation: `(h, r, t)` becomes `(perm[h], r, perm[t])`.
    pub fn relabel(&self, perm: &[usize]) -> Result<KnowledgeGraph> {
        check_permutation(perm, self.entity_count)?;
        let triples = self
            .triples
            .iter()
            .map(|t| Triple::new(perm[t.head], t.relation, perm[t.tail]))
            .collect();
        let mut g = build_graph(triples, self.entity_count, self.relation_count)?;
        g.relation_labels = self.relation_labels.clone();
        if let Some(labels) = &self.entity_labels {
            let mut relabeled = vec![String::new(); labels.len()];
            for (old, label) in labels.iter().enumerate() {
                relabeled[perm[old]] = label.clone();
            }
            g.entity_labels = Some(relabeled);
        }
        Ok(g)
    }
}

pub fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::Validation(format!(
            "permutation has length {} but graph has {n} entities",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for (i, &p) in perm.iter().enumerate() {
        if p >= n || seen[p] {
            return Err(Error::Validation(format!(
                "not a bijection: position {i} maps to {p}"
            )));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// A source graph for meta-training plus a target graph with held-out
/// evaluation triples. Target relation ids live in the source vocabulary.
#[derive(Clone, Debug)]
pub struct InductiveSplit {
    pub source: KnowledgeGraph,
    pub target_support: KnowledgeGraph,
    pub target_valid: Vec<Triple>,
    pub target_test: Vec<Triple>,
    /// Valid/test lines whose entities do not occur in the target support graph.
    pub dropped_valid: usize,
    pub dropped_test: usize,
}

pub const SOURCE_TRAIN: &str = "source/train.txt";
pub const TARGET_TRAIN: &str = "target/train.txt";
pub const TARGET_VALID: &str = "target/valid.txt";
pub const TARGET_TEST: &str = "target/test.txt";

impl InductiveSplit {
    /// Load `source/train.txt`, `target/train.txt`, `target/valid.txt` and
    /// `target/test.txt` from a benchmark directory.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let mut source_entities = Vocab::new();
        let mut relations = Vocab::new();
        let source_triples = load_triples(&dir.join(SOURCE_TRAIN), &mut source_entities, &mut relations)?;
        let source = build_graph(source_triples, source_entities.len(), relations.len())?
            .with_entity_labels(source_entities.labels().to_vec())?
            .with_relation_labels(relations.labels().to_vec())?;

        let target = TargetData::load(dir, &relations)?;
        let split = InductiveSplit {
            source,
            target_support: target.support,
            target_valid: target.valid,
            target_test: target.test,
            dropped_valid: target.dropped_valid,
            dropped_test: target.dropped_test,
        };
        split.validate()?;
        Ok(split)
    }

    /// Check relation alignment and entity disjointness between source and target.
    pub fn validate(&self) -> Result<()> {
        if self.target_support.relation_count() != self.source.relation_count() {
            return Err(Error::Validation(
                "target relation ids are not expressed in the source relation vocabulary".into(),
            ));
        }
        if let (Some(src), Some(tgt)) = (self.source.entity_labels(), self.target_support.entity_labels()) {
            let src: HashSet<&str> = src.iter().map(String::as_str).collect();
            let shared: Vec<&str> = tgt.iter().map(String::as_str).filter(|l| src.contains(l)).collect();
            if !shared.is_empty() {
                return Err(Error::Validation(format!(
                    "{} target entities also occur in the source graph (e.g. `{}`)",
                    shared.len(),
                    shared[0]
                )));
            }
        }
        Ok(())
    }
}

fn optional_eval_file(path: &PathBuf, entities: &Vocab, relations: &Vocab) -> Result<(Vec<Triple>, usize)> {
    if path.exists() {
        load_eval_triples(path, entities, relations)
    } else {
        Ok((Vec::new(), 0))
    }
}

/// The target half of a benchmark directory, read against a fixed relation
/// vocabulary (a trained model's). Never touches the source graph.
#[derive(Clone, Debug)]
pub struct TargetData {
    pub support: KnowledgeGraph,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub dropped_valid: usize,
    pub dropped_test: usize,
}

impl TargetData {
    pub fn load(dir: &Path, relations: &Vocab) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let mut entities = Vocab::new();
        let triples = load_triples_fixed_relations(&dir.join(TARGET_TRAIN), &mut entities, relations)?;
        let support = build_graph(triples, entities.len(), relations.len())?
            .with_entity_labels(entities.labels().to_vec())?
            .with_relation_labels(relations.labels().to_vec())?;
        let (valid, dropped_valid) = optional_eval_file(&dir.join(TARGET_VALID), &entities, relations)?;
        let (test, dropped_test) = load_eval_triples(&dir.join(TARGET_TEST), &entities, relations)?;
        Ok(TargetData {
            support,
            valid,
            test,
            dropped_valid,
            dropped_test,
        })
    }
}

/// Write triples as `head<TAB>relation<TAB>tail` lines using the given labels.
pub fn write_triples<W: std::io::Write>(
    out: &mut W,
    triples: &[Triple],
    entity_label: impl Fn(usize) -> String,
    relation_label: impl Fn(usize) -> String,
) -> std::io::Result<()> {
    for t in triples {
        writeln!(
            out,
            "{}\t{}\t{}",
            entity_label(t.head),
            relation_label(t.relation),
            entity_label(t.tail)
        )?;
    }
    Ok(())
}
