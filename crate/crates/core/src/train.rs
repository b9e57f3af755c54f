//! Meta-training over a task pool, and the two adaptation regimes: freezing
//! (plain inference) and fine-tuning on the target support graph.

use std::collections::HashSet;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::rank_triple;
use crate::kg::{KnowledgeGraph, Triple};
use crate::model::{embed_entities_seeded, embed_on_tape, init_params, EntityEmbeddings, ModelConfig, ModelParams, ParamVars};
use crate::parallel::map_indexed;
use crate::rng::{derive_seed, rng_from};
use crate::sampler::{sample_pool, PoolKind, SamplerConfig, Task};
use crate::scoring::{sample_negatives, sample_negatives_filtered, score_on_tape, self_adv_loss_on_tape, LossConfig};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// How meta-training forms its episodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRegime {
    /// Batches of sampled tasks, each with its own support graph.
    #[default]
    Episodic,
    /// The whole source graph as one permanent task; each step draws
    /// `whole_graph_queries` of its own triples as queries.
    WholeGraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Tasks per step when meta-training, triples per step when fine-tuning.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub task_pool_size: usize,
    pub validation_tasks: usize,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub regime: TrainRegime,
    pub whole_graph_queries: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.01,
            epochs: 10,
            task_pool_size: 10_000,
            validation_tasks: 200,
            loss: LossConfig::default(),
            sampler: SamplerConfig::default(),
            seed: 0,
            regime: TrainRegime::Episodic,
            whole_graph_queries: 512,
        }
    }
}

impl TrainConfig {
    /// Reduced meta-training budget: 2,000 tasks and 3 epochs.
    pub fn desk() -> Self {
        TrainConfig {
            task_pool_size: 2_000,
            epochs: 3,
            ..Self::default()
        }
    }

    /// Fine-tuning defaults: 512 triples per step, lr 0.001, 64 negatives.
    pub fn finetune(epochs: usize) -> Self {
        TrainConfig {
            batch_size: 512,
            learning_rate: 0.001,
            epochs,
            loss: LossConfig {
                k: 64,
                ..LossConfig::default()
            },
            ..Self::default()
        }
    }

    /// Sampler settings used for the training and validation pools; the
    /// sampler seed is mixed with the run seed.
    pub fn task_sampler(&self) -> SamplerConfig {
        SamplerConfig {
            seed: derive_seed(self.seed, &[self.sampler.seed]),
            ..self.sampler.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_schedule(false)
    }

    fn validate_schedule(&self, allow_zero_epochs: bool) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("task_pool_size", self.task_pool_size),
            ("validation_tasks", self.validation_tasks),
            ("whole_graph_queries", self.whole_graph_queries),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.epochs == 0 && !allow_zero_epochs {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        self.loss.validate()?;
        self.sampler.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation query MRR after each epoch (empty when fine-tuning).
    pub validation_mrr: Vec<f64>,
    /// 1-based epoch whose parameters were returned; 0 means the initial ones.
    pub selected_epoch: usize,
}

impl TrainLog {
    /// `step,loss` lines with a header.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.step_losses.iter().enumerate() {
            out.push_str(&format!("{},{l}\n", i + 1));
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with per-tensor state. A tensor whose gradient is absent or all zero
/// is skipped entirely: no moment update, no parameter change.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>]) -> Result<()> {
        let mut slots = params.tensors_mut();
        if grads.len() != slots.len() {
            return Err(Error::Contract(format!("{} gradients for {} tensors", grads.len(), slots.len())));
        }
        if self.state.len() != slots.len() {
            self.state = vec![None; slots.len()];
        }
        for ((param, grad), state) in slots.iter_mut().zip(grads).zip(&mut self.state) {
            let Some(grad) = grad else { continue };
            if grad.shape() != param.shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} for parameter {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            if grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let st = state.get_or_insert_with(|| Moments {
                m: vec![0.0; param.numel()],
                v: vec![0.0; param.numel()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t);
            let bc2 = 1.0 - self.beta2.powi(st.t);
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `k` negatives per query triple, row-major by query.
pub fn draw_negatives(
    graph: &KnowledgeGraph,
    query: &[Triple],
    loss: &LossConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Triple>> {
    let n = graph.entity_count();
    let known: Option<HashSet<Triple>> = loss
        .filter_negatives
        .then(|| graph.triples().iter().chain(query).copied().collect());
    let mut out = Vec::with_capacity(query.len() * loss.k);
    for q in query {
        out.extend(match &known {
            Some(known) => sample_negatives_filtered(q, n, loss.k, known, rng)?,
            None => sample_negatives(q, n, loss.k, rng)?,
        });
    }
    Ok(out)
}

/// Summed self-adversarial loss of `query` (with precomputed `negatives`)
/// against the embeddings of `graph`. Returns the loss and the negative
/// weights used, which callers may pass back in to hold them fixed.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    model: &ModelConfig,
    graph: &KnowledgeGraph,
    query: &[Triple],
    negatives: &[Triple],
    loss: &LossConfig,
    noise_seed: u64,
    weights: Option<&Tensor>,
) -> Result<(Var, Tensor), TensorError> {
    let q = query.len();
    if q == 0 || negatives.len() != q * loss.k {
        return Err(TensorError::Contract(format!(
            "{} negatives for {q} queries with k = {}",
            negatives.len(),
            loss.k
        )));
    }
    let emb = embed_on_tape(tape, graph, model, vars, noise_seed)?;
    let all: Vec<Triple> = query.iter().chain(negatives).copied().collect();
    let scores = score_on_tape(tape, emb, vars.relation_emb, &all, model.score_kind)?;
    let pos = tape.gather_rows(scores, (0..q).collect())?;
    let neg = tape.gather_rows(scores, (q..all.len()).collect())?;
    let neg = tape.reshape(neg, &[q, loss.k])?;
    self_adv_loss_on_tape(tape, pos, neg, loss, weights)
}

/// Loss and per-tensor gradients for one episode.
fn episode_gradients(
    params: &ModelParams,
    graph: &KnowledgeGraph,
    query: &[Triple],
    loss: &LossConfig,
    sample_seed: u64,
    noise_seed: u64,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let negatives = draw_negatives(graph, query, loss, &mut crate::rng::seeded(sample_seed))?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let (l, _) = episode_loss_on_tape(&mut tape, &vars, &params.config, graph, query, &negatives, loss, noise_seed, None)?;
    let value = tape.value(l).item();
    let mut grads = tape.backward(l)?;
    Ok((value, vars.all().into_iter().map(|v| grads.take(v)).collect()))
}

/// Loss of one episode without gradients, with the same negative draw as training.
pub fn episode_loss(
    params: &ModelParams,
    graph: &KnowledgeGraph,
    query: &[Triple],
    loss: &LossConfig,
    sample_seed: u64,
    noise_seed: u64,
) -> Result<f64> {
    let negatives = draw_negatives(graph, query, loss, &mut crate::rng::seeded(sample_seed))?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let (l, _) = episode_loss_on_tape(&mut tape, &vars, &params.config, graph, query, &negatives, loss, noise_seed, None)?;
    Ok(tape.value(l).item())
}

fn accumulate(total: &mut Vec<Option<Tensor>>, grads: Vec<Option<Tensor>>) {
    if total.is_empty() {
        *total = grads;
        return;
    }
    for (acc, g) in total.iter_mut().zip(grads) {
        match (acc.as_mut(), g) {
            (Some(a), Some(g)) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            (None, Some(g)) => *acc = Some(g),
            (_, None) => {}
        }
    }
}

fn as_divergence(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::Divergence { step, loss: f64::NAN },
        other => other,
    }
}

/// One training episode in model relation space.
struct Episode {
    graph: KnowledgeGraph,
    query: Vec<Triple>,
}

impl Episode {
    fn of_task(task: &Task) -> Result<Self> {
        Ok(Episode {
            graph: task.model_graph()?,
            query: task.model_query(),
        })
    }
}

/// Mean reciprocal rank of the validation tasks' query triples, ranking each
/// side against every other entity of its task (mid-rank ties).
pub fn task_query_mrr(params: &ModelParams, tasks: &[Task], noise_base: u64, workers: usize) -> Result<f64> {
    let per_task = map_indexed(tasks.len(), workers, |i| -> Result<(f64, usize)> {
        let task = &tasks[i];
        let graph = task.model_graph()?;
        let emb = embed_entities_seeded(&graph, params, derive_seed(noise_base, &[i as u64]))?;
        let mut sum = 0.0;
        let mut count = 0;
        for t in task.model_query() {
            for corrupt_head in [true, false] {
                let pos = params.score_triple(&emb, &t)?;
                let mut negs = Vec::with_capacity(graph.entity_count());
                for e in 0..graph.entity_count() {
                    let candidate = if corrupt_head {
                        if e == t.head {
                            continue;
                        }
                        Triple::new(e, t.relation, t.tail)
                    } else {
                        if e == t.tail {
                            continue;
                        }
                        Triple::new(t.head, t.relation, e)
                    };
                    negs.push(params.score_triple(&emb, &candidate)?);
                }
                sum += 1.0 / rank_triple(pos, &negs);
                count += 1;
            }
        }
        Ok((sum, count))
    });
    let (mut sum, mut count) = (0.0, 0);
    for r in per_task {
        let (s, c) = r?;
        sum += s;
        count += c;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Seed streams used by meta-training.
mod stream {
    pub const INIT: u64 = 10;
    pub const SHUFFLE: u64 = 11;
    pub const NEGATIVES: u64 = 12;
    pub const NOISE: u64 = 13;
    pub const VALIDATION_NOISE: u64 = 14;
    pub const WHOLE_GRAPH_QUERY: u64 = 15;
}

/// Meta-train a fresh model on tasks sampled from `source`. Returns the
/// parameters of the epoch with the best validation MRR (earliest on ties).
pub fn meta_train(
    source: &KnowledgeGraph,
    model: &ModelConfig,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<(ModelParams, TrainLog)> {
    meta_train_observed(source, model, cfg, workers, |_, _| {})
}

/// [`meta_train`] with a callback after each epoch `(1-based epoch, log so far)`.
pub fn meta_train_observed(
    source: &KnowledgeGraph,
    model: &ModelConfig,
    cfg: &TrainConfig,
    workers: usize,
    mut on_epoch: impl FnMut(usize, &TrainLog),
) -> Result<(ModelParams, TrainLog)> {
    model.validate()?;
    cfg.validate()?;
    if source.relation_count() != model.relation_count {
        return Err(Error::Config(format!(
            "model expects {} relations, source graph has {}",
            model.relation_count,
            source.relation_count()
        )));
    }
    let sampler = cfg.task_sampler();
    let pool: Vec<Episode> = match cfg.regime {
        TrainRegime::Episodic => sample_pool(source, &sampler, PoolKind::Train, cfg.task_pool_size, workers)?
            .iter()
            .map(Episode::of_task)
            .collect::<Result<_>>()?,
        TrainRegime::WholeGraph => Vec::new(),
    };
    let validation = sample_pool(source, &sampler, PoolKind::Validation, cfg.validation_tasks, workers)?;

    let mut params = init_params(model, &mut rng_from(cfg.seed, &[stream::INIT]))?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = TrainLog::default();
    let mut best = params.clone();
    let mut best_mrr = f64::NEG_INFINITY;
    let steps_per_epoch = cfg.task_pool_size.div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..cfg.task_pool_size).collect();
        order.shuffle(&mut rng_from(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let mut epoch_total = 0.0;
        for (step_in_epoch, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + step_in_epoch;
            let results = match cfg.regime {
                TrainRegime::Episodic => map_indexed(batch.len(), workers, |slot| {
                    let idx = batch[slot];
                    let episode = &pool[idx];
                    episode_gradients(
                        &params,
                        &episode.graph,
                        &episode.query,
                        &cfg.loss,
                        derive_seed(cfg.seed, &[stream::NEGATIVES, epoch as u64, idx as u64]),
                        derive_seed(cfg.seed, &[stream::NOISE, epoch as u64, idx as u64]),
                    )
                }),
                TrainRegime::WholeGraph => {
                    let triples = source.triples();
                    let mut rng = rng_from(cfg.seed, &[stream::WHOLE_GRAPH_QUERY, step as u64]);
                    let take = cfg.whole_graph_queries.min(triples.len());
                    let mut picked = sample(&mut rng, triples.len(), take).into_vec();
                    picked.sort_unstable();
                    let query: Vec<Triple> = picked.iter().map(|&i| triples[i]).collect();
                    vec![episode_gradients(
                        &params,
                        source,
                        &query,
                        &cfg.loss,
                        derive_seed(cfg.seed, &[stream::NEGATIVES, step as u64]),
                        derive_seed(cfg.seed, &[stream::NOISE, step as u64]),
                    )]
                }
            };
            let mut loss = 0.0;
            let mut grads = Vec::new();
            for r in results {
                let (l, g) = r.map_err(as_divergence(step))?;
                loss += l;
                accumulate(&mut grads, g);
            }
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            adam.step(&mut params, &grads)?;
            log.step_losses.push(loss);
            epoch_total += loss;
        }
        log.epoch_losses.push(epoch_total / steps_per_epoch as f64);
        let mrr = task_query_mrr(
            &params,
            &validation,
            derive_seed(cfg.seed, &[stream::VALIDATION_NOISE, epoch as u64]),
            workers,
        )
        .map_err(as_divergence(log.step_losses.len()))?;
        log.validation_mrr.push(mrr);
        if mrr > best_mrr {
            best_mrr = mrr;
            best = params.clone();
            log.selected_epoch = epoch + 1;
        }
        on_epoch(epoch + 1, &log);
    }
    Ok((best, log))
}

/// Embeddings of an unseen graph under frozen parameters.
pub fn adapt_freeze(params: &ModelParams, target: &KnowledgeGraph) -> Result<EntityEmbeddings> {
    adapt_freeze_seeded(params, target, 0)
}

/// [`adapt_freeze`] with an explicit seed for the random-initializer ablation.
pub fn adapt_freeze_seeded(params: &ModelParams, target: &KnowledgeGraph, noise_seed: u64) -> Result<EntityEmbeddings> {
    if target.relation_count() != params.config.relation_count {
        return Err(Error::Validation(format!(
            "target uses {} relation ids, parameters cover {}",
            target.relation_count(),
            params.config.relation_count
        )));
    }
    embed_entities_seeded(target, params, noise_seed)
}

/// Continue training on the target's own support triples, each step using the
/// whole support graph as embedding context and a batch of its triples as
/// positives. Returns the final parameters.
pub fn finetune(params: &ModelParams, target: &KnowledgeGraph, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate_schedule(true)?;
    if target.relation_count() != params.config.relation_count {
        return Err(Error::Validation(format!(
            "target uses {} relation ids, parameters cover {}",
            target.relation_count(),
            params.config.relation_count
        )));
    }
    let mut params = params.clone();
    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = TrainLog::default();
    let triples = target.triples();
    let steps_per_epoch = triples.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..triples.len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
        let mut epoch_total = 0.0;
        for (i, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + i;
            let query: Vec<Triple> = batch.iter().map(|&j| triples[j]).collect();
            let (loss, grads) = episode_gradients(
                &params,
                target,
                &query,
                &cfg.loss,
                derive_seed(cfg.seed, &[stream::NEGATIVES, step as u64]),
                derive_seed(cfg.seed, &[stream::NOISE, step as u64]),
            )
            .map_err(as_divergence(step))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            adam.step(&mut params, &grads)?;
            log.step_losses.push(loss);
            epoch_total += loss;
        }
        log.epoch_losses.push(epoch_total / steps_per_epoch.max(1) as f64);
    }
    log.selected_epoch = cfg.epochs;
    Ok((params, log))
}
