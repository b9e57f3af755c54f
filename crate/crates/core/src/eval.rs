//! Link-prediction evaluation against sampled negative candidates, plus the
//! ablation and target-sparsity experiment drivers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{build_graph, InductiveSplit, KnowledgeGraph, Triple};
use crate::model::{EntityEmbeddings, ModelConfig, ModelParams, ModelVariant};
use crate::parallel::map_indexed;
use crate::rng::{derive_seed, rng_from};
use crate::train::{adapt_freeze_seeded, meta_train, TrainConfig, TrainLog, TrainRegime};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sides {
    Head,
    Tail,
    #[default]
    Both,
}

impl Sides {
    /// `true` means the head slot is replaced.
    fn slots(self) -> &'static [bool] {
        match self {
            Sides::Head => &[true],
            Sides::Tail => &[false],
            Sides::Both => &[true, false],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalProtocol {
    pub num_negatives: usize,
    pub repeats: usize,
    pub sides: Sides,
    pub seed: u64,
    pub hits_levels: Vec<usize>,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            num_negatives: 50,
            repeats: 5,
            sides: Sides::Both,
            seed: 0,
            hits_levels: vec![1, 5, 10],
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.num_negatives == 0 || self.repeats == 0 {
            return Err(Error::Config("num_negatives and repeats must be >= 1".into()));
        }
        if self.hits_levels.is_empty() || self.hits_levels.contains(&0) {
            return Err(Error::Config("hits_levels must be a non-empty list of positive integers".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub mrr: f64,
    pub hits: BTreeMap<usize, f64>,
    /// One record per (test triple, side, repeat).
    pub records: usize,
    pub test_triples: usize,
    /// Test triples left out because an endpoint is not in the graph.
    pub excluded_triples: usize,
    pub protocol: EvalProtocol,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ranks: Option<Vec<f64>>,
}

impl EvalReport {
    pub fn hits_at(&self, n: usize) -> Option<f64> {
        self.hits.get(&n).copied()
    }

    /// `record,rank` lines in (triple, side, repeat) order; header only unless ranks were kept.
    pub fn ranks_csv(&self) -> String {
        let mut out = String::from("record,rank\n");
        for (i, r) in self.ranks.iter().flatten().enumerate() {
            out.push_str(&format!("{i},{r}\n"));
        }
        out
    }
}

/// `1 + #{neg > pos} + #{neg == pos} / 2`.
pub fn rank_triple(pos: f64, negatives: &[f64]) -> f64 {
    let greater = negatives.iter().filter(|&&n| n > pos).count();
    let equal = negatives.iter().filter(|&&n| n == pos).count();
    1.0 + greater as f64 + equal as f64 / 2.0
}

/// MRR and Hits@N over rank records. Reciprocals are accumulated per distinct
/// rank so that equal ranks give an exact mean.
pub fn summarize(ranks: &[f64], hits_levels: &[usize]) -> (f64, BTreeMap<usize, f64>) {
    let n = ranks.len().max(1) as f64;
    let mut by_rank: BTreeMap<u64, usize> = BTreeMap::new();
    for &r in ranks {
        // Mid-ranks are multiples of 1/2.
        *by_rank.entry((r * 2.0) as u64).or_default() += 1;
    }
    let mrr = by_rank
        .iter()
        .map(|(&twice, &count)| (count as f64 / n) * (2.0 / twice as f64))
        .sum();
    let hits = hits_levels
        .iter()
        .map(|&level| {
            let inside = ranks.iter().filter(|&&r| r <= level as f64).count();
            (level, inside as f64 / n)
        })
        .collect();
    (mrr, hits)
}

pub trait TripleScorer: Sync {
    fn entity_count(&self) -> usize;
    fn relation_count(&self) -> usize;
    fn score(&self, triple: &Triple) -> Result<f64>;
}

/// Frozen decoder over fixed entity embeddings.
pub struct EmbeddingScorer<'a> {
    pub embeddings: &'a EntityEmbeddings,
    pub params: &'a ModelParams,
}

impl TripleScorer for EmbeddingScorer<'_> {
    fn entity_count(&self) -> usize {
        self.embeddings.entity_count()
    }

    fn relation_count(&self) -> usize {
        self.params.config.relation_count
    }

    fn score(&self, triple: &Triple) -> Result<f64> {
        self.params.score_triple(self.embeddings, triple)
    }
}

/// Scores every triple identically.
pub struct ConstantScorer {
    pub entity_count: usize,
    pub relation_count: usize,
    pub value: f64,
}

impl TripleScorer for ConstantScorer {
    fn entity_count(&self) -> usize {
        self.entity_count
    }

    fn relation_count(&self) -> usize {
        self.relation_count
    }

    fn score(&self, _: &Triple) -> Result<f64> {
        Ok(self.value)
    }
}

/// Candidate entities for one record: `k` distinct entities other than `truth`.
fn candidates(entity_count: usize, truth: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    sample(rng, entity_count - 1, k)
        .into_iter()
        .map(|e| if e >= truth { e + 1 } else { e })
        .collect()
}

/// Rank every (test triple, side, repeat) record against `num_negatives`
/// candidates drawn without replacement from the other entities. Candidate
/// draws depend only on `(protocol.seed, triple index, side, repeat)`.
pub fn evaluate(
    scorer: &dyn TripleScorer,
    test: &[Triple],
    protocol: &EvalProtocol,
    label: &str,
    keep_ranks: bool,
    workers: usize,
) -> Result<EvalReport> {
    protocol.validate()?;
    let n = scorer.entity_count();
    if n < protocol.num_negatives + 1 {
        return Err(Error::Protocol(format!(
            "{n} entities cannot supply {} negatives plus the true entity",
            protocol.num_negatives
        )));
    }
    if let Some(t) = test
        .iter()
        .find(|t| t.head >= n || t.tail >= n || t.relation >= scorer.relation_count())
    {
        return Err(Error::Protocol(format!("test triple {t:?} outside the embedding table")));
    }
    let slots = protocol.sides.slots();
    let per_triple = map_indexed(test.len(), workers, |i| -> Result<Vec<f64>> {
        let t = test[i];
        let pos = scorer.score(&t)?;
        let mut ranks = Vec::with_capacity(slots.len() * protocol.repeats);
        for &head_slot in slots {
            for rep in 0..protocol.repeats {
                let mut rng = rng_from(protocol.seed, &[i as u64, u64::from(head_slot), rep as u64]);
                let truth = if head_slot { t.head } else { t.tail };
                let negs = candidates(n, truth, protocol.num_negatives, &mut rng)
                    .into_iter()
                    .map(|e| {
                        let c = if head_slot {
                            Triple::new(e, t.relation, t.tail)
                        } else {
                            Triple::new(t.head, t.relation, e)
                        };
                        scorer.score(&c)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                ranks.push(rank_triple(pos, &negs));
            }
        }
        Ok(ranks)
    });
    let mut ranks = Vec::with_capacity(test.len() * slots.len() * protocol.repeats);
    for r in per_triple {
        ranks.extend(r?);
    }
    let (mrr, hits) = summarize(&ranks, &protocol.hits_levels);
    Ok(EvalReport {
        label: label.to_owned(),
        mrr,
        hits,
        records: ranks.len(),
        test_triples: test.len(),
        excluded_triples: 0,
        protocol: protocol.clone(),
        ranks: keep_ranks.then_some(ranks),
    })
}

/// [`evaluate`] with the frozen decoder over `embeddings`.
pub fn evaluate_embeddings(
    embeddings: &EntityEmbeddings,
    params: &ModelParams,
    test: &[Triple],
    protocol: &EvalProtocol,
    label: &str,
    workers: usize,
) -> Result<EvalReport> {
    evaluate(&EmbeddingScorer { embeddings, params }, test, protocol, label, false, workers)
}

/// A target graph after random triple deletion, with compacted entity ids.
#[derive(Clone, Debug)]
pub struct SparseTarget {
    pub graph: KnowledgeGraph,
    /// Original entity id to new id; `None` for entities left isolated.
    pub entity_map: Vec<Option<usize>>,
    pub keep_ratio: f64,
}

impl SparseTarget {
    /// Re-express test triples in the sparsified ids, dropping those that
    /// touch a removed entity. Returns the kept triples and the dropped count.
    pub fn remap(&self, test: &[Triple]) -> (Vec<Triple>, usize) {
        let mut kept = Vec::with_capacity(test.len());
        for t in test {
            let h = self.entity_map.get(t.head).copied().flatten();
            let tl = self.entity_map.get(t.tail).copied().flatten();
            if let (Some(h), Some(tl)) = (h, tl) {
                kept.push(Triple::new(h, t.relation, tl));
            }
        }
        let dropped = test.len() - kept.len();
        (kept, dropped)
    }
}

/// Keep `ceil(keep_ratio * |triples|)` triples (the prefix of a seeded
/// shuffle, restored to original order) and drop entities left isolated.
pub fn sparsify_target(graph: &KnowledgeGraph, keep_ratio: f64, rng: &mut impl Rng) -> Result<SparseTarget> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!("keep_ratio must be in (0, 1], got {keep_ratio}")));
    }
    let triples = graph.triples();
    let keep = ((keep_ratio * triples.len() as f64).ceil() as usize).min(triples.len());
    let mut order: Vec<usize> = (0..triples.len()).collect();
    order.shuffle(rng);
    let mut kept_idx = order[..keep].to_vec();
    kept_idx.sort_unstable();
    if kept_idx.is_empty() {
        return Err(Error::Protocol("sparsified target graph is empty".into()));
    }
    let mut present = vec![false; graph.entity_count()];
    for &i in &kept_idx {
        present[triples[i].head] = true;
        present[triples[i].tail] = true;
    }
    let mut entity_map = vec![None; graph.entity_count()];
    let mut next = 0;
    for (e, slot) in entity_map.iter_mut().enumerate() {
        if present[e] {
            *slot = Some(next);
            next += 1;
        }
    }
    let remapped = kept_idx
        .iter()
        .map(|&i| {
            let t = triples[i];
            Triple::new(entity_map[t.head].expect("present"), t.relation, entity_map[t.tail].expect("present"))
        })
        .collect();
    let mut sparse = build_graph(remapped, next, graph.relation_count())?
        .with_relation_labels(graph.relation_labels().to_vec())?;
    if let Some(labels) = graph.entity_labels() {
        let kept_labels = (0..graph.entity_count())
            .filter(|&e| present[e])
            .map(|e| labels[e].clone())
            .collect();
        sparse = sparse.with_entity_labels(kept_labels)?;
    }
    Ok(SparseTarget {
        graph: sparse,
        entity_map,
        keep_ratio,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoMetaLearning,
    NoInitializer,
    NoModulator,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoMetaLearning,
        AblationVariant::NoInitializer,
        AblationVariant::NoModulator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoMetaLearning => "no_meta_learning",
            AblationVariant::NoInitializer => "no_initializer",
            AblationVariant::NoModulator => "no_modulator",
        }
    }

    /// Model and training configuration for this variant.
    pub fn configure(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut model, mut train) = (model.clone(), train.clone());
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoMetaLearning => train.regime = TrainRegime::WholeGraph,
            AblationVariant::NoInitializer => model.variant = ModelVariant::NoInitializer,
            AblationVariant::NoModulator => model.variant = ModelVariant::NoModulator,
        }
        (model, train)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub variant: AblationVariant,
    pub params: ModelParams,
    pub log: TrainLog,
    pub report: EvalReport,
}

/// Noise seed for the random-initializer variant at adaptation time.
pub fn adaptation_noise_seed(seed: u64) -> u64 {
    derive_seed(seed, &[0xada])
}

/// Train `variant` on the split's source graph and evaluate it frozen on the target test triples.
pub fn run_ablation(
    variant: AblationVariant,
    split: &InductiveSplit,
    model: &ModelConfig,
    train: &TrainConfig,
    protocol: &EvalProtocol,
    workers: usize,
) -> Result<AblationOutcome> {
    let (model, train) = variant.configure(model, train);
    let (params, log) = meta_train(&split.source, &model, &train, workers)?;
    let emb = adapt_freeze_seeded(&params, &split.target_support, adaptation_noise_seed(train.seed))?;
    let report = evaluate_embeddings(&emb, &params, &split.target_test, protocol, variant.name(), workers)?;
    Ok(AblationOutcome {
        variant,
        params,
        log,
        report,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SparsityRow {
    pub keep_ratio: f64,
    pub support_triples: usize,
    pub entities: usize,
    pub excluded_test: usize,
    pub report: EvalReport,
}

/// Frozen evaluation after sparsifying the target support graph at each
/// ratio; rows come back sorted by ratio, largest first.
pub fn sparsity_sweep(
    params: &ModelParams,
    split: &InductiveSplit,
    keep_ratios: &[f64],
    protocol: &EvalProtocol,
    seed: u64,
    workers: usize,
) -> Result<Vec<SparsityRow>> {
    let mut ratios = keep_ratios.to_vec();
    ratios.sort_by(|a, b| b.total_cmp(a));
    ratios
        .into_iter()
        .map(|ratio| {
            let sparse = sparsify_target(&split.target_support, ratio, &mut rng_from(seed, &[ratio.to_bits()]))?;
            let (test, excluded) = sparse.remap(&split.target_test);
            let emb = adapt_freeze_seeded(params, &sparse.graph, adaptation_noise_seed(seed))?;
            let mut report =
                evaluate_embeddings(&emb, params, &test, protocol, &format!("keep_{ratio}"), workers)?;
            report.excluded_triples = excluded;
            Ok(SparsityRow {
                keep_ratio: ratio,
                support_triples: sparse.graph.triples().len(),
                entities: sparse.graph.entity_count(),
                excluded_test: excluded,
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{embed_entities, init_params};
    use crate::rng::seeded;
    use crate::scoring::ScoreKind;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn ring(n: usize, extra: usize, seed: u64) -> KnowledgeGraph {
        let mut rng = seeded(seed);
        let mut t: Vec<Triple> = (0..n).map(|e| Triple::new(e, e % 2, (e + 1) % n)).collect();
        for _ in 0..extra {
            t.push(Triple::new(rng.gen_range(0..n), rng.gen_range(0..2), rng.gen_range(0..n)));
        }
        build_graph(t, n, 2).unwrap()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank_triple(1.0, &[0.0; 50]), 1.0);
        assert_eq!(rank_triple(-1.0, &[0.0; 50]), 51.0);
        assert_eq!(rank_triple(0.0, &[0.0; 50]), 26.0);
        assert_eq!(rank_triple(0.0, &[1.0, 0.0, -1.0]), 2.5);
    }

    #[test]
    fn constant_scorer_gives_exact_mid_rank() {
        let test: Vec<Triple> = (0..37).map(|i| Triple::new(i, 0, (i * 7 + 1) % 60)).collect();
        let scorer = ConstantScorer { entity_count: 60, relation_count: 1, value: 0.25 };
        let protocol = EvalProtocol {
            hits_levels: vec![1, 10, 26, 51],
            ..EvalProtocol::default()
        };
        let r = evaluate(&scorer, &test, &protocol, "constant", false, 1).unwrap();
        assert_eq!(r.mrr, 1.0 / 26.0);
        assert_eq!(r.hits_at(51), Some(1.0));
        assert_eq!(r.hits_at(26), Some(1.0));
        assert_eq!(r.hits_at(10), Some(0.0));
        assert_eq!(r.records, 37 * 2 * 5);
    }

    #[test]
    fn too_few_entities_is_a_protocol_error() {
        let scorer = ConstantScorer { entity_count: 50, relation_count: 1, value: 0.0 };
        let err = evaluate(&scorer, &[Triple::new(0, 0, 1)], &EvalProtocol::default(), "x", false, 1).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn candidates_exclude_truth_and_are_distinct() {
        for seed in 0..50 {
            let c = candidates(60, seed as usize % 60, 50, &mut seeded(seed));
            assert_eq!(c.len(), 50);
            assert!(!c.contains(&(seed as usize % 60)));
            let mut d = c.clone();
            d.sort_unstable();
            d.dedup();
            assert_eq!(d.len(), 50);
        }
    }

    #[test]
    fn untrained_model_is_near_the_uniform_null() {
        let g = ring(300, 600, 1);
        let cfg = ModelConfig {
            dim: 8,
            layers: 2,
            num_bases: 2,
            ..ModelConfig::new(2, ScoreKind::TransE)
        };
        let p = init_params(&cfg, &mut seeded(2)).unwrap();
        let emb = embed_entities(&g, &p).unwrap();
        let test: Vec<Triple> = g.triples()[..200].to_vec();
        let r = evaluate_embeddings(&emb, &p, &test, &EvalProtocol::default(), "untrained", 1).unwrap();
        let h10 = r.hits_at(10).unwrap();
        assert!((h10 - 10.0 / 51.0).abs() < 0.1, "{h10}");
    }

    #[test]
    fn sparsify_examples() {
        let g = ring(400, 600, 3);
        let same = sparsify_target(&g, 1.0, &mut seeded(1)).unwrap();
        assert_eq!(same.graph, g);
        let half = sparsify_target(&g, 0.5, &mut seeded(1)).unwrap();
        assert_eq!(half.graph.triples().len(), 500);
        assert!(sparsify_target(&g, 0.0, &mut seeded(1)).is_err());

        // reference: shuffle indices with the same generator, keep the prefix in original order
        let mut order: Vec<usize> = (0..1000).collect();
        order.shuffle(&mut seeded(1));
        let mut prefix: Vec<usize> = order[..500].to_vec();
        prefix.sort_unstable();
        let back: Vec<Triple> = half
            .graph
            .triples()
            .iter()
            .map(|t| {
                let old = |new: usize| half.entity_map.iter().position(|m| *m == Some(new)).unwrap();
                Triple::new(old(t.head), t.relation, old(t.tail))
            })
            .collect();
        let want: Vec<Triple> = prefix.iter().map(|&i| g.triples()[i]).collect();
        assert_eq!(back, want);
    }

    #[test]
    fn remap_drops_removed_entities() {
        let g = build_graph(vec![Triple::new(0, 0, 1), Triple::new(2, 0, 3)], 4, 1).unwrap();
        let s = sparsify_target(&g, 0.5, &mut seeded(4)).unwrap();
        let (kept, dropped) = s.remap(&[Triple::new(0, 0, 1), Triple::new(2, 0, 3), Triple::new(1, 0, 2)]);
        assert_eq!(kept.len(), 1);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.name().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("none".parse::<AblationVariant>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn report_is_deterministic_and_monotone_invariant(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
            struct Hashed(u64, Option<(f64, f64)>);
            impl TripleScorer for Hashed {
                fn entity_count(&self) -> usize { 80 }
                fn relation_count(&self) -> usize { 2 }
                fn score(&self, t: &Triple) -> Result<f64> {
                    let raw = (derive_seed(self.0, &[t.head as u64, t.relation as u64, t.tail as u64]) % 1000) as f64 / 1000.0;
                    Ok(match self.1 { Some((a, b)) => (a * raw + b).exp(), None => raw })
                }
            }
            let test: Vec<Triple> = (0..20).map(|i| Triple::new(i, i % 2, 79 - i)).collect();
            let protocol = EvalProtocol { seed, hits_levels: vec![1, 3, 10, 51], ..EvalProtocol::default() };
            let a = evaluate(&Hashed(seed, None), &test, &protocol, "a", true, 1).unwrap();
            let b = evaluate(&Hashed(seed, None), &test, &protocol, "a", true, 2).unwrap();
            let c = evaluate(&Hashed(seed, Some((scale, shift))), &test, &protocol, "a", true, 1).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&a, &c);
            prop_assert!(a.mrr > 0.0 && a.mrr <= 1.0);
            prop_assert!(a.mrr >= a.hits_at(1).unwrap());
            let h: Vec<f64> = a.hits.values().copied().collect();
            prop_assert!(h.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(a.hits_at(51), Some(1.0));
        }
    }
}
