//! The entity embedding producer: relation-domain/range initializer,
//! basis-decomposed relational message passing, and a jumping-knowledge
//! projection over all layer states.
//!
//! No parameter is indexed by entity, so the same parameters embed any graph
//! whose relations come from the trained vocabulary.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{KnowledgeGraph, Triple};
pub use crate::scoring::ScoreKind;
use crate::scoring::score;
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Which parts of the producer are active. The ablations replace the
/// initializer with random vectors or drop the message-passing modulator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    #[default]
    Full,
    NoInitializer,
    NoModulator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub num_bases: usize,
    pub relation_count: usize,
    pub score_kind: ScoreKind,
    /// Also pass messages along reversed triples, under relation ids shifted by `relation_count`.
    #[serde(default)]
    pub add_inverse_edges: bool,
    #[serde(default)]
    pub variant: ModelVariant,
}

impl ModelConfig {
    pub fn new(relation_count: usize, score_kind: ScoreKind) -> Self {
        ModelConfig {
            dim: 32,
            layers: 3,
            num_bases: 4,
            relation_count,
            score_kind,
            add_inverse_edges: false,
            variant: ModelVariant::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if self.score_kind.is_complex() && self.dim % 2 != 0 {
            return Err(Error::Config(format!(
                "dim must be even for {} (got {})",
                self.score_kind, self.dim
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.relation_count == 0 {
            return Err(Error::Config("relation_count must be >= 1".into()));
        }
        if self.num_bases == 0 || self.num_bases > self.relation_count {
            return Err(Error::Config(format!(
                "num_bases must be in 1..={} (got {})",
                self.relation_count, self.num_bases
            )));
        }
        Ok(())
    }

    /// Relation slots used by message passing.
    pub fn message_relations(&self) -> usize {
        if self.add_inverse_edges {
            2 * self.relation_count
        } else {
            self.relation_count
        }
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (d, nr, b, l) = (self.dim, self.relation_count, self.num_bases, self.layers);
        let relations = nr * self.score_kind.relation_width(d) + 2 * nr * d;
        let per_layer = b * d * d + self.message_relations() * b + d * d;
        relations + l * per_layer + (l + 1) * d * d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `num_bases x d x d`
    pub bases: Tensor,
    /// `message_relations x num_bases`
    pub coeffs: Tensor,
    /// `d x d`
    pub self_loop: Tensor,
}

impl LayerParams {
    /// `W_r = Σ_b coeffs[r, b] · bases[b]`, materialized (tests and small inspections only).
    pub fn relation_matrix(&self, r: usize) -> Tensor {
        let (b, p, q) = (self.bases.shape()[0], self.bases.shape()[1], self.bases.shape()[2]);
        let mut out = Tensor::zeros(&[p, q]);
        for k in 0..b {
            let a = self.coeffs.row(r)[k];
            for (o, v) in out.data_mut().iter_mut().zip(&self.bases.data()[k * p * q..(k + 1) * p * q]) {
                *o += a * v;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub relation_emb: Tensor,
    pub relation_dom: Tensor,
    pub relation_ran: Tensor,
    pub layers: Vec<LayerParams>,
    /// `(layers + 1) * d x d`
    pub jk_matrix: Tensor,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn xavier(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Xavier-uniform weights, `U[-1/√d, 1/√d]` relation vectors, RotatE phases in `(-π, π]`.
pub fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let (d, nr) = (cfg.dim, cfg.relation_count);
    let bound = 1.0 / (d as f64).sqrt();
    let relation_emb = match cfg.score_kind {
        ScoreKind::RotatE => {
            let m = d / 2;
            let data = (0..nr * m).map(|_| PI - 2.0 * PI * rng.gen::<f64>()).collect();
            Tensor::matrix(nr, m, data)?
        }
        _ => uniform(rng, &[nr, d], bound),
    };
    let relation_dom = uniform(rng, &[nr, d], bound);
    let relation_ran = uniform(rng, &[nr, d], bound);
    let layers = (0..cfg.layers)
        .map(|_| LayerParams {
            bases: xavier(rng, &[cfg.num_bases, d, d], d, d),
            coeffs: xavier(rng, &[cfg.message_relations(), cfg.num_bases], cfg.message_relations(), cfg.num_bases),
            self_loop: xavier(rng, &[d, d], d, d),
        })
        .collect();
    let jk_matrix = xavier(rng, &[(cfg.layers + 1) * d, d], (cfg.layers + 1) * d, d);
    Ok(ModelParams {
        config: cfg.clone(),
        relation_emb,
        relation_dom,
        relation_ran,
        layers,
        jk_matrix,
    })
}

impl ModelParams {
    /// Parameter tensors with their checkpoint names, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("relation_emb".to_owned(), &self.relation_emb),
            ("relation_dom".to_owned(), &self.relation_dom),
            ("relation_ran".to_owned(), &self.relation_ran),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.bases"), &layer.bases));
            out.push((format!("layers.{l}.coeffs"), &layer.coeffs));
            out.push((format!("layers.{l}.self_loop"), &layer.self_loop));
        }
        out.push(("jk_matrix".to_owned(), &self.jk_matrix));
        out
    }

    /// Mutable tensors in the order of [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.relation_emb, &mut self.relation_dom, &mut self.relation_ran];
        for layer in &mut self.layers {
            out.push(&mut layer.bases);
            out.push(&mut layer.coeffs);
            out.push(&mut layer.self_loop);
        }
        out.push(&mut self.jk_matrix);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuild from named tensors, checking names and shapes against a fresh layout.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut template = init_params(&config, &mut crate::rng::seeded(0))?;
        let expected: Vec<(String, Vec<usize>)> = template
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected `{name}` {shape:?}, found `{got_name}` {:?}",
                    got.shape()
                )));
            }
        }
        for (slot, (_, t)) in template.tensors_mut().into_iter().zip(tensors) {
            *slot = t;
        }
        Ok(template)
    }

    /// Register every parameter on the tape, in [`named_tensors`](Self::named_tensors) order.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ParamVars {
            relation_emb: leaf(&self.relation_emb),
            relation_dom: leaf(&self.relation_dom),
            relation_ran: leaf(&self.relation_ran),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    bases: leaf(&l.bases),
                    coeffs: leaf(&l.coeffs),
                    self_loop: leaf(&l.self_loop),
                })
                .collect(),
            jk_matrix: leaf(&self.jk_matrix),
        }
    }

    /// Score one triple with the configured decoder.
    pub fn score_triple(&self, emb: &EntityEmbeddings, t: &Triple) -> Result<f64> {
        score(
            emb.matrix.row(t.head),
            self.relation_emb.row(t.relation),
            emb.matrix.row(t.tail),
            self.config.score_kind,
        )
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub bases: Var,
    pub coeffs: Var,
    pub self_loop: Var,
}

/// Parameter handles on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub relation_emb: Var,
    pub relation_dom: Var,
    pub relation_ran: Var,
    pub layers: Vec<LayerVars>,
    pub jk_matrix: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.relation_emb, self.relation_dom, self.relation_ran];
        for l in &self.layers {
            out.extend([l.bases, l.coeffs, l.self_loop]);
        }
        out.push(self.jk_matrix);
        out
    }

    /// Inverse of [`all`](Self::all).
    pub fn from_slice(vars: &[Var], layers: usize) -> Result<Self, TensorError> {
        if vars.len() != 4 + 3 * layers {
            return Err(TensorError::Contract(format!(
                "{} vars for a {layers}-layer model",
                vars.len()
            )));
        }
        Ok(ParamVars {
            relation_emb: vars[0],
            relation_dom: vars[1],
            relation_ran: vars[2],
            layers: vars[3..3 + 3 * layers]
                .chunks(3)
                .map(|c| LayerVars {
                    bases: c[0],
                    coeffs: c[1],
                    self_loop: c[2],
                })
                .collect(),
            jk_matrix: vars[3 + 3 * layers],
        })
    }
}

/// Final entity embeddings, row `e` belonging to entity `e` of one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityEmbeddings {
    pub matrix: Tensor,
}

impl EntityEmbeddings {
    pub fn entity_count(&self) -> usize {
        self.matrix.rows()
    }

    pub fn row(&self, e: usize) -> &[f64] {
        self.matrix.row(e)
    }
}

fn check_graph(graph: &KnowledgeGraph, cfg: &ModelConfig) -> Result<(), TensorError> {
    if graph.relation_count() != cfg.relation_count {
        return Err(TensorError::Contract(format!(
            "graph has {} relation ids but the model was built for {}",
            graph.relation_count(),
            cfg.relation_count
        )));
    }
    Ok(())
}

/// Initial embeddings: mean of `relation_dom` over O(e) and `relation_ran` over I(e).
pub fn entity_init_on_tape(tape: &mut Tape, graph: &KnowledgeGraph, vars: &ParamVars) -> Result<Var, TensorError> {
    let n = graph.entity_count();
    let (mut out_ent, mut out_rel, mut in_ent, mut in_rel) = (vec![], vec![], vec![], vec![]);
    let mut inv_count = Vec::with_capacity(n);
    for e in 0..n {
        let (o, i) = (graph.out_relations(e), graph.in_relations(e));
        if o.is_empty() && i.is_empty() {
            return Err(TensorError::Contract(format!("entity {e} is isolated")));
        }
        out_ent.extend(std::iter::repeat(e).take(o.len()));
        out_rel.extend_from_slice(o);
        in_ent.extend(std::iter::repeat(e).take(i.len()));
        in_rel.extend_from_slice(i);
        inv_count.push(1.0 / (o.len() + i.len()) as f64);
    }
    let dom = tape.gather_rows(vars.relation_dom, out_rel)?;
    let dom_sum = tape.scatter_add_rows(dom, out_ent, n)?;
    let ran = tape.gather_rows(vars.relation_ran, in_rel)?;
    let ran_sum = tape.scatter_add_rows(ran, in_ent, n)?;
    let total = tape.add(dom_sum, ran_sum)?;
    tape.scale_rows(total, inv_count)
}

/// Message-passing edges `(source, relation slot, destination)` in triple order;
/// reversed copies follow when inverse edges are enabled.
fn message_edges(graph: &KnowledgeGraph, cfg: &ModelConfig) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let triples = graph.triples();
    let cap = triples.len() * if cfg.add_inverse_edges { 2 } else { 1 };
    let (mut src, mut rel, mut dst) = (Vec::with_capacity(cap), Vec::with_capacity(cap), Vec::with_capacity(cap));
    for t in triples {
        src.push(t.head);
        rel.push(t.relation);
        dst.push(t.tail);
    }
    if cfg.add_inverse_edges {
        for t in triples {
            src.push(t.tail);
            rel.push(t.relation + cfg.relation_count);
            dst.push(t.head);
        }
    }
    (src, rel, dst)
}

/// One modulator layer:
/// `h_e = ReLU(mean_{(h,r) ∈ N(e)} W_r h_h + W_0 h_e)`, with the neighbor
/// term dropped for entities without ingoing edges.
pub fn gnn_layer_on_tape(
    tape: &mut Tape,
    graph: &KnowledgeGraph,
    cfg: &ModelConfig,
    prev: Var,
    layer: &LayerVars,
) -> Result<Var, TensorError> {
    let n = graph.entity_count();
    if tape.shape(prev)[0] != n {
        return Err(TensorError::Shape {
            op: "gnn_layer",
            detail: format!("{} rows for {n} entities", tape.shape(prev)[0]),
        });
    }
    let (src, rel, dst) = message_edges(graph, cfg);
    let mut in_degree = vec![0usize; n];
    for &d in &dst {
        in_degree[d] += 1;
    }
    let inv_degree = in_degree
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
        .collect();

    let self_term = tape.matmul(prev, layer.self_loop)?;
    if src.is_empty() {
        return tape.relu(self_term);
    }
    let edge_coeffs = tape.gather_rows(layer.coeffs, rel)?;
    let mut message: Option<Var> = None;
    for b in 0..cfg.num_bases {
        let basis = tape.select(layer.bases, b)?;
        let projected = tape.matmul(prev, basis)?;
        let from_src = tape.gather_rows(projected, src.clone())?;
        let a_b = tape.column(edge_coeffs, b)?;
        let weighted = tape.mul_rows(from_src, a_b)?;
        message = Some(match message {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let summed = tape.scatter_add_rows(message.expect("num_bases >= 1"), dst, n)?;
    let mean = tape.scale_rows(summed, inv_degree)?;
    let pre = tape.add(mean, self_term)?;
    tape.relu(pre)
}

/// Random initial states used by the no-initializer ablation.
pub fn random_init(entity_count: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = crate::rng::rng_from(seed, &[0x1a17]);
    uniform(&mut rng, &[entity_count, dim], 1.0 / (dim as f64).sqrt())
}

/// Full producer on the tape. `noise_seed` only matters for the
/// no-initializer variant, where it seeds the random initial states.
pub fn embed_on_tape(
    tape: &mut Tape,
    graph: &KnowledgeGraph,
    cfg: &ModelConfig,
    vars: &ParamVars,
    noise_seed: u64,
) -> Result<Var, TensorError> {
    check_graph(graph, cfg)?;
    let h0 = match cfg.variant {
        ModelVariant::NoInitializer => tape.constant(random_init(graph.entity_count(), cfg.dim, noise_seed)),
        _ => entity_init_on_tape(tape, graph, vars)?,
    };
    if cfg.variant == ModelVariant::NoModulator {
        return Ok(h0);
    }
    let mut states = vec![h0];
    let mut h = h0;
    for layer in &vars.layers {
        h = gnn_layer_on_tape(tape, graph, cfg, h, layer)?;
        states.push(h);
    }
    let cat = tape.concat_cols(&states)?;
    tape.matmul(cat, vars.jk_matrix)
}

/// Initial embeddings `H` for a graph.
pub fn entity_init(graph: &KnowledgeGraph, params: &ModelParams) -> Result<Tensor> {
    check_graph(graph, &params.config)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let h = entity_init_on_tape(&mut tape, graph, &vars)?;
    Ok(tape.value(h).clone())
}

/// Apply layer `layer_index` of the modulator to `prev`.
pub fn gnn_layer(graph: &KnowledgeGraph, prev: &Tensor, params: &ModelParams, layer_index: usize) -> Result<Tensor> {
    check_graph(graph, &params.config)?;
    let layer = params
        .layers
        .get(layer_index)
        .ok_or_else(|| Error::Contract(format!("no layer {layer_index}")))?;
    let mut tape = Tape::new();
    let prev = tape.constant(prev.clone());
    let vars = LayerVars {
        bases: tape.constant(layer.bases.clone()),
        coeffs: tape.constant(layer.coeffs.clone()),
        self_loop: tape.constant(layer.self_loop.clone()),
    };
    let out = gnn_layer_on_tape(&mut tape, graph, &params.config, prev, &vars)?;
    Ok(tape.value(out).clone())
}

/// Entity embeddings for `graph` under frozen parameters.
pub fn embed_entities(graph: &KnowledgeGraph, params: &ModelParams) -> Result<EntityEmbeddings> {
    embed_entities_seeded(graph, params, 0)
}

pub fn embed_entities_seeded(graph: &KnowledgeGraph, params: &ModelParams, noise_seed: u64) -> Result<EntityEmbeddings> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let e = embed_on_tape(&mut tape, graph, &params.config, &vars, noise_seed)?;
    Ok(EntityEmbeddings {
        matrix: tape.value(e).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{build_graph, Triple};
    use crate::rng::seeded;
    use rand::seq::SliceRandom;

    fn cfg(nr: usize) -> ModelConfig {
        ModelConfig {
            dim: 6,
            layers: 2,
            num_bases: 2.min(nr),
            relation_count: nr,
            score_kind: ScoreKind::TransE,
            add_inverse_edges: false,
            variant: ModelVariant::Full,
        }
    }

    fn random_graph(seed: u64, n: usize, nr: usize, m: usize) -> KnowledgeGraph {
        let mut rng = seeded(seed);
        let mut triples: Vec<Triple> = (0..n).map(|e| Triple::new(e, rng.gen_range(0..nr), (e + 1) % n)).collect();
        while triples.len() < m {
            triples.push(Triple::new(rng.gen_range(0..n), rng.gen_range(0..nr), rng.gen_range(0..n)));
        }
        triples.shuffle(&mut rng);
        build_graph(triples, n, nr).unwrap()
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let c = ModelConfig::new(9, ScoreKind::TransE);
        // relation_emb, dom, ran: 3 * 9 * 32 = 864
        // per layer: 4 * 32 * 32 + 9 * 4 + 32 * 32 = 4096 + 36 + 1024 = 5156, three layers = 15468
        // jk: 128 * 32 = 4096
        assert_eq!(c.parameter_count(), 864 + 15468 + 4096);
        let p = init_params(&c, &mut seeded(1)).unwrap();
        assert_eq!(p.parameter_count(), 20428);
    }

    #[test]
    fn parameter_shapes_do_not_depend_on_entities() {
        let c = ModelConfig::new(9, ScoreKind::RotatE);
        let p = init_params(&c, &mut seeded(1)).unwrap();
        assert_eq!(p.parameter_count(), c.parameter_count());
        assert_eq!(p.relation_emb.shape(), [9, 16]);
    }

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::new(5, ScoreKind::ComplEx);
        assert_eq!(init_params(&c, &mut seeded(3)).unwrap(), init_params(&c, &mut seeded(3)).unwrap());
    }

    #[test]
    fn rotate_phases_in_range() {
        let c = ModelConfig::new(20, ScoreKind::RotatE);
        let p = init_params(&c, &mut seeded(4)).unwrap();
        assert!(p.relation_emb.data().iter().all(|&x| x > -PI && x <= PI));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(9, ScoreKind::RotatE);
        c.dim = 33;
        assert!(c.validate().is_err());
        c.score_kind = ScoreKind::TransE;
        assert!(c.validate().is_ok());
        c.num_bases = 10;
        assert!(c.validate().is_err());
        c.num_bases = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(9, ScoreKind::TransE);
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_of_single_out_relation_is_its_domain_vector() {
        let g = build_graph(vec![Triple::new(0, 1, 1)], 2, 2).unwrap();
        let p = init_params(&cfg(2), &mut seeded(5)).unwrap();
        let h = entity_init(&g, &p).unwrap();
        assert_eq!(h.row(0), p.relation_dom.row(1));
        assert_eq!(h.row(1), p.relation_ran.row(1));
    }

    #[test]
    fn init_averages_domain_and_range() {
        let g = build_graph(vec![Triple::new(0, 0, 1), Triple::new(1, 0, 0)], 2, 1).unwrap();
        let p = init_params(&cfg(1), &mut seeded(6)).unwrap();
        let h = entity_init(&g, &p).unwrap();
        for j in 0..6 {
            let want = (p.relation_dom.row(0)[j] + p.relation_ran.row(0)[j]) / 2.0;
            assert!((h.row(0)[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn one_edge_layer_expansion() {
        let g = build_graph(vec![Triple::new(0, 1, 1)], 2, 2).unwrap();
        let p = init_params(&cfg(2), &mut seeded(7)).unwrap();
        let h0 = entity_init(&g, &p).unwrap();
        let h1 = gnn_layer(&g, &h0, &p, 0).unwrap();
        let w = p.layers[0].relation_matrix(1);
        let w0 = &p.layers[0].self_loop;
        let vecmat = |x: &[f64], m: &Tensor| -> Vec<f64> {
            (0..6).map(|j| (0..6).map(|i| x[i] * m.data()[i * 6 + j]).sum()).collect()
        };
        let b: Vec<f64> = vecmat(h0.row(0), &w)
            .iter()
            .zip(vecmat(h0.row(1), w0))
            .map(|(x, y)| (x + y).max(0.0))
            .collect();
        let a: Vec<f64> = vecmat(h0.row(0), w0).iter().map(|x| x.max(0.0)).collect();
        for j in 0..6 {
            assert!((h1.row(1)[j] - b[j]).abs() < 1e-12);
            assert!((h1.row(0)[j] - a[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let g = random_graph(1, 8, 3, 20);
        let p = init_params(&cfg(3), &mut seeded(8)).unwrap();
        let out = gnn_layer(&g, &Tensor::zeros(&[8, 6]), &p, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_shapes() {
        let g = random_graph(2, 10, 3, 25);
        let mut c = cfg(3);
        c.layers = 3;
        let p = init_params(&c, &mut seeded(9)).unwrap();
        assert_eq!(p.jk_matrix.shape(), [4 * 6, 6]);
        let e = embed_entities(&g, &p).unwrap();
        assert_eq!(e.matrix.shape(), [10, 6]);
    }

    #[test]
    fn no_modulator_returns_initializer_output() {
        let g = random_graph(3, 10, 3, 25);
        let mut c = cfg(3);
        c.variant = ModelVariant::NoModulator;
        let p = init_params(&c, &mut seeded(10)).unwrap();
        assert_eq!(embed_entities(&g, &p).unwrap().matrix, entity_init(&g, &p).unwrap());
    }

    #[test]
    fn no_initializer_uses_seeded_noise() {
        let g = random_graph(3, 10, 3, 25);
        let mut c = cfg(3);
        c.variant = ModelVariant::NoInitializer;
        let p = init_params(&c, &mut seeded(10)).unwrap();
        let a = embed_entities_seeded(&g, &p, 1).unwrap();
        assert_eq!(a, embed_entities_seeded(&g, &p, 1).unwrap());
        assert_ne!(a, embed_entities_seeded(&g, &p, 2).unwrap());
    }

    #[test]
    fn inverse_edges_reach_heads() {
        let g = build_graph(vec![Triple::new(0, 0, 1)], 2, 1).unwrap();
        let mut c = cfg(1);
        c.add_inverse_edges = true;
        let p = init_params(&c, &mut seeded(11)).unwrap();
        assert_eq!(p.layers[0].coeffs.shape(), [2, 1]);
        let h0 = entity_init(&g, &p).unwrap();
        let with = gnn_layer(&g, &h0, &p, 0).unwrap();
        c.add_inverse_edges = false;
        let mut q = init_params(&c, &mut seeded(11)).unwrap();
        q.layers = p
            .layers
            .iter()
            .map(|l| LayerParams {
                bases: l.bases.clone(),
                coeffs: Tensor::matrix(1, 1, vec![l.coeffs.data()[0]]).unwrap(),
                self_loop: l.self_loop.clone(),
            })
            .collect();
        q.relation_dom = p.relation_dom.clone();
        q.relation_ran = p.relation_ran.clone();
        let without = gnn_layer(&g, &h0, &q, 0).unwrap();
        assert_eq!(with.row(1), without.row(1));
        assert_ne!(with.row(0), without.row(0));
    }

    #[test]
    fn from_named_round_trip_and_mismatch() {
        let c = cfg(3);
        let p = init_params(&c, &mut seeded(12)).unwrap();
        let named: Vec<(String, Tensor)> = p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(ModelParams::from_named(c.clone(), named.clone()).unwrap(), p);
        let mut bad = named;
        bad.swap(0, 1);
        assert!(ModelParams::from_named(c, bad).is_err());
    }

    #[test]
    fn relation_count_mismatch_is_rejected() {
        let g = random_graph(4, 6, 2, 10);
        let p = init_params(&cfg(3), &mut seeded(13)).unwrap();
        assert!(embed_entities(&g, &p).is_err());
    }
}
