//! Scalar-loop reference implementations and randomized case builders shared
//! by the integration tests and the acceptance suite. Nothing here calls the
//! library code it is compared against.

#![allow(dead_code)]

use std::collections::BTreeSet;

use morse_core::kg::build_graph;
use morse_core::model::{init_params, ParamVars};
use morse_core::rng::{seeded, StdRng};
use morse_core::sampler::induce_subkg;
use morse_core::scoring::{adversarial_weights, score, ScoredBatch};
use morse_core::tensor::{finite_diff_check, GradCheckOptions, GradCheckReport};
use morse_core::train::{draw_negatives, episode_loss_on_tape};
use morse_core::{KnowledgeGraph, LossConfig, ModelConfig, ModelParams, ScoreKind, Tape, Tensor, Triple};
use rand::seq::SliceRandom;
use rand::Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len(), "row counts differ");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "row widths differ");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Random graph without isolated entities: a random spanning walk touches
/// every entity, then extra triples are added uniformly (self-loops and
/// duplicates allowed).
pub fn random_graph(rng: &mut StdRng, entities: usize, relations: usize, extra: usize) -> KnowledgeGraph {
    let mut order: Vec<usize> = (0..entities).collect();
    order.shuffle(rng);
    let mut triples = Vec::new();
    for w in order.windows(2) {
        let (a, b) = if rng.gen_bool(0.5) { (w[0], w[1]) } else { (w[1], w[0]) };
        triples.push(Triple::new(a, rng.gen_range(0..relations), b));
    }
    if entities == 1 {
        triples.push(Triple::new(0, 0, 0));
    }
    for _ in 0..extra {
        triples.push(Triple::new(
            rng.gen_range(0..entities),
            rng.gen_range(0..relations),
            rng.gen_range(0..entities),
        ));
    }
    triples.shuffle(rng);
    build_graph(triples, entities, relations).unwrap()
}

pub fn random_rows(rng: &mut StdRng, n: usize, d: usize) -> Rows {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

/// Initialized parameters with every tensor rescaled by a random factor so
/// activations and scores leave the near-zero regime.
pub fn random_params(cfg: &ModelConfig, rng: &mut StdRng) -> ModelParams {
    let mut params = init_params(cfg, rng).unwrap();
    for t in params.tensors_mut() {
        let s = rng.gen_range(1.0..3.0);
        t.data_mut().iter_mut().for_each(|v| *v *= s);
    }
    params
}

/// Mean of domain vectors over distinct outgoing relations and range vectors
/// over distinct ingoing relations.
pub fn oracle_entity_init(triples: &[Triple], n: usize, dom: &Rows, ran: &Rows) -> Rows {
    let d = dom[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for (e, row) in out.iter_mut().enumerate() {
        let outs: BTreeSet<usize> = triples.iter().filter(|t| t.head == e).map(|t| t.relation).collect();
        let ins: BTreeSet<usize> = triples.iter().filter(|t| t.tail == e).map(|t| t.relation).collect();
        let count = (outs.len() + ins.len()) as f64;
        for i in 0..d {
            let mut s = 0.0;
            for &r in &outs {
                s += dom[r][i];
            }
            for &r in &ins {
                s += ran[r][i];
            }
            row[i] = s / count;
        }
    }
    out
}

/// `W_r = Σ_b a[r][b] · V_b`, materialized entry by entry.
pub fn oracle_relation_matrix(bases: &Tensor, coeffs: &Tensor, r: usize) -> Rows {
    let (nb, p, q) = (bases.shape()[0], bases.shape()[1], bases.shape()[2]);
    let mut w = vec![vec![0.0; q]; p];
    for (i, row) in w.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for b in 0..nb {
                *cell += coeffs.data()[r * nb + b] * bases.data()[b * p * q + i * q + j];
            }
        }
    }
    w
}

fn vec_mat(v: &[f64], m: &Rows) -> Vec<f64> {
    let q = m[0].len();
    (0..q).map(|j| (0..v.len()).map(|i| v[i] * m[i][j]).sum()).collect()
}

/// Per-entity, per-neighbor message passing with the mean over ingoing
/// triples (and reversed triples under `inverse`) plus the self-loop, then ReLU.
pub fn oracle_gnn_layer(
    triples: &[Triple],
    prev: &Rows,
    bases: &Tensor,
    coeffs: &Tensor,
    self_loop: &Tensor,
    relation_count: usize,
    inverse: bool,
) -> Rows {
    let w0 = rows(self_loop);
    let mut edges: Vec<(usize, usize, usize)> = triples.iter().map(|t| (t.head, t.relation, t.tail)).collect();
    if inverse {
        edges.extend(triples.iter().map(|t| (t.tail, t.relation + relation_count, t.head)));
    }
    (0..prev.len())
        .map(|e| {
            let d = w0[0].len();
            let mut msg = vec![0.0; d];
            let incoming: Vec<_> = edges.iter().filter(|(_, _, dst)| *dst == e).collect();
            for &&(src, r, _) in &incoming {
                let w = oracle_relation_matrix(bases, coeffs, r);
                for (m, v) in msg.iter_mut().zip(vec_mat(&prev[src], &w)) {
                    *m += v;
                }
            }
            let own = vec_mat(&prev[e], &w0);
            (0..d)
                .map(|j| {
                    let neighbor = if incoming.is_empty() { 0.0 } else { msg[j] / incoming.len() as f64 };
                    (neighbor + own[j]).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Decoder scores written out per component. Complex kinds use interleaved
/// `(re, im)` pairs; RotatE relations are phases.
pub fn oracle_score(h: &[f64], r: &[f64], t: &[f64], kind: ScoreKind) -> f64 {
    match kind {
        ScoreKind::TransE => {
            let mut s = 0.0;
            for i in 0..h.len() {
                let x = h[i] + r[i] - t[i];
                s += x * x;
            }
            -s.sqrt()
        }
        ScoreKind::DistMult => {
            let mut s = 0.0;
            for i in 0..h.len() {
                s += h[i] * r[i] * t[i];
            }
            s
        }
        ScoreKind::ComplEx => {
            let mut s = 0.0;
            for i in 0..h.len() / 2 {
                let (hr, hi) = (h[2 * i], h[2 * i + 1]);
                let (rr, ri) = (r[2 * i], r[2 * i + 1]);
                let (tr, ti) = (t[2 * i], t[2 * i + 1]);
                // Re((hr + i hi)(rr + i ri)(tr - i ti))
                s += hr * rr * tr - hi * ri * tr + hr * ri * ti + hi * rr * ti;
            }
            s
        }
        ScoreKind::RotatE => {
            let mut s = 0.0;
            for i in 0..h.len() / 2 {
                let (hr, hi) = (h[2 * i], h[2 * i + 1]);
                let (c, sn) = (r[i].cos(), r[i].sin());
                let re = hr * c - hi * sn - t[2 * i];
                let im = hr * sn + hi * c - t[2 * i + 1];
                s += re * re + im * im;
            }
            -s.sqrt()
        }
    }
}

/// Self-adversarial loss for one batch, with `ln(1 + e^{-x})` written directly.
pub fn oracle_loss(positive: &[f64], negative: &[Vec<f64>], gamma: f64, beta: f64) -> f64 {
    let neg_log_sigmoid = |x: f64| if x > 0.0 { (-x).exp().ln_1p() } else { -x + x.exp().ln_1p() };
    let mut total = 0.0;
    for (p, negs) in positive.iter().zip(negative) {
        let m = negs.iter().map(|s| beta * s).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = negs.iter().map(|s| (beta * s - m).exp()).sum();
        total += neg_log_sigmoid(gamma + p);
        for s in negs {
            total += (beta * s - m).exp() / z * neg_log_sigmoid(-gamma - s);
        }
    }
    total
}

pub fn oracle_induce(triples: &[Triple], entities: &BTreeSet<usize>) -> Vec<Triple> {
    let mut out = Vec::new();
    for t in triples {
        if entities.contains(&t.head) && entities.contains(&t.tail) {
            out.push(*t);
        }
    }
    out
}

fn sorted(mut v: Vec<Triple>) -> Vec<Triple> {
    v.sort_by_key(|t| (t.head, t.relation, t.tail));
    v
}

/// Worst deviation from the oracles over one random instance of each
/// component: `(entity_init, gnn_layer, score kinds, induce_subkg mismatches, loss)`.
pub struct OracleDeviation {
    pub entity_init: f64,
    pub gnn_layer: f64,
    pub score: [f64; 4],
    pub induce_mismatches: usize,
    pub loss: f64,
}

pub fn oracle_instance(seed: u64) -> OracleDeviation {
    let mut rng = seeded(seed);
    let n = rng.gen_range(2..=30);
    let nr = rng.gen_range(1..=6);
    let extra = rng.gen_range(0..3 * n);
    let g = random_graph(&mut rng, n, nr, extra);
    let d = 2 * rng.gen_range(1..=6);
    let inverse = rng.gen_bool(0.3);
    let cfg = ModelConfig {
        dim: d,
        layers: 2,
        num_bases: rng.gen_range(1..=nr),
        add_inverse_edges: inverse,
        ..ModelConfig::new(nr, ScoreKind::TransE)
    };
    let params = random_params(&cfg, &mut rng);

    let init = morse_core::model::entity_init(&g, &params).unwrap();
    let want = oracle_entity_init(g.triples(), n, &rows(&params.relation_dom), &rows(&params.relation_ran));
    let entity_init = max_abs_diff(&rows(&init), &want);

    let prev = random_rows(&mut rng, n, d);
    let prev_t = Tensor::from_rows(&prev).unwrap();
    let layer = rng.gen_range(0..cfg.layers);
    let got = morse_core::model::gnn_layer(&g, &prev_t, &params, layer).unwrap();
    let lp = &params.layers[layer];
    let want = oracle_gnn_layer(g.triples(), &prev, &lp.bases, &lp.coeffs, &lp.self_loop, nr, inverse);
    let gnn_layer = max_abs_diff(&rows(&got), &want);

    let mut score_dev = [0.0; 4];
    for (i, kind) in ScoreKind::ALL.into_iter().enumerate() {
        let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let r: Vec<f64> = if kind == ScoreKind::RotatE {
            (0..d / 2).map(|_| rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)).collect()
        } else {
            (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        score_dev[i] = (score(&h, &r, &t, kind).unwrap() - oracle_score(&h, &r, &t, kind)).abs();
    }

    let subset: BTreeSet<usize> = (0..n).filter(|_| rng.gen_bool(0.5)).collect();
    let got = sorted(induce_subkg(&g, &subset));
    let want = sorted(oracle_induce(g.triples(), &subset));
    let induce_mismatches = if got == want { 0 } else { got.len().abs_diff(want.len()).max(1) };

    let q = rng.gen_range(1..5);
    let k = rng.gen_range(1..6);
    let pos: Vec<f64> = (0..q).map(|_| rng.gen_range(-15.0..2.0)).collect();
    let neg: Vec<Vec<f64>> = (0..q).map(|_| (0..k).map(|_| rng.gen_range(-15.0..2.0)).collect()).collect();
    let cfg = LossConfig {
        gamma: rng.gen_range(0.0..12.0),
        k,
        beta: rng.gen_range(0.0..2.0),
        filter_negatives: false,
    };
    let batch = ScoredBatch::new(pos.clone(), neg.concat(), k).unwrap();
    let got = morse_core::scoring::self_adv_loss(&batch, &cfg).unwrap();
    let loss = (got - oracle_loss(&pos, &neg, cfg.gamma, cfg.beta)).abs();
    // The weights used above are a softmax; this is their own sanity check.
    debug_assert!((adversarial_weights(&neg[0], cfg.beta).iter().sum::<f64>() - 1.0).abs() < 1e-12);

    OracleDeviation {
        entity_init,
        gnn_layer,
        score: score_dev,
        induce_mismatches,
        loss,
    }
}

/// A task-sized graph with held-out query triples whose entities all occur
/// in the graph.
pub fn random_task(rng: &mut StdRng, max_entities: usize, relations: usize) -> (KnowledgeGraph, Vec<Triple>) {
    let n = rng.gen_range(6..=max_entities);
    let extra = rng.gen_range(n / 2..2 * n);
    let g = random_graph(rng, n, relations, extra);
    let q = rng.gen_range(1..=4);
    let query = (0..q)
        .map(|_| Triple::new(rng.gen_range(0..n), rng.gen_range(0..relations), rng.gen_range(0..n)))
        .collect();
    (g, query)
}

/// Finite-difference check of the full episode loss (producer, decoder and
/// self-adversarial loss composed) with the adversarial weights held at
/// their values for the unperturbed parameters.
pub fn gradcheck_full_loss(seed: u64, kind: ScoreKind) -> GradCheckReport {
    let mut rng = seeded(seed);
    let nr = rng.gen_range(2..=5);
    let (g, query) = random_task(&mut rng, 30, nr);
    let cfg = ModelConfig {
        dim: 8,
        layers: 2,
        num_bases: rng.gen_range(1..=nr),
        add_inverse_edges: rng.gen_bool(0.25),
        ..ModelConfig::new(nr, kind)
    };
    let params = random_params(&cfg, &mut rng);
    let loss = LossConfig {
        k: 4,
        ..LossConfig::default()
    };
    let negatives = draw_negatives(&g, &query, &loss, &mut rng).unwrap();

    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let (_, weights) = episode_loss_on_tape(&mut tape, &vars, &cfg, &g, &query, &negatives, &loss, 0, None).unwrap();

    let tensors: Vec<Tensor> = params.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    finite_diff_check(
        |tape, leaves| {
            let vars = ParamVars::from_slice(leaves, cfg.layers)?;
            let (l, _) = episode_loss_on_tape(tape, &vars, &cfg, &g, &query, &negatives, &loss, 0, Some(&weights))?;
            Ok(l)
        },
        &tensors,
        1e-3,
        &GradCheckOptions {
            max_coords_per_tensor: 200,
            seed,
            five_point: true,
        },
    )
    .unwrap()
}

/// Embeds a random task graph and a randomly relabeled copy; returns whether
/// every row moved to its permuted position bit for bit.
pub fn equivariance_case(seed: u64) -> bool {
    let mut rng = seeded(seed);
    let nr = rng.gen_range(1..=5);
    let n = rng.gen_range(2..=40);
    let extra = rng.gen_range(0..3 * n);
    let g = random_graph(&mut rng, n, nr, extra);
    let kind = ScoreKind::ALL[rng.gen_range(0..4)];
    let cfg = ModelConfig {
        dim: 2 * rng.gen_range(1..=8),
        layers: rng.gen_range(1..=3),
        num_bases: rng.gen_range(1..=nr),
        add_inverse_edges: rng.gen_bool(0.3),
        ..ModelConfig::new(nr, kind)
    };
    let params = random_params(&cfg, &mut rng);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let base = morse_core::model::embed_entities(&g, &params).unwrap();
    let moved = morse_core::model::embed_entities(&g.relabel(&perm).unwrap(), &params).unwrap();
    (0..n).all(|e| {
        base.row(e)
            .iter()
            .zip(moved.row(perm[e]))
            .all(|(a, b)| a.to_bits() == b.to_bits())
    })
}
