//! The tiered coordinate-descent protocol.
//!
//! Each round: every silo draws the same mini-batch from the shared seed;
//! hubs push their block and the batch ids to their clients; clients embed
//! their part of the batch and send it up; hubs exchange silo embeddings
//! all-to-all and route the summed other-silo embeddings back to the
//! owning clients; each client takes `Q` gradient steps on its own block
//! against those (now stale) embeddings; hubs average the client blocks.
//!
//! Silos run in index order and clients in index order inside a silo, so
//! every reduction happens in a fixed order and traces are bit-identical
//! across runs.

mod message;
mod trace;

use std::collections::HashMap;

pub use message::{Message, MessageKind, MessageRecord, Node};
pub use trace::{write_csv, write_jsonl, FinalState, IterationRecord, RoundTrace, TraceRow, TrainingTrace};

use crate::clock::{LatencyModel, SimClock};
use crate::data::{owned_positions, project, sample_minibatch, Dataset, EmbeddingBatch, HorizontalShard, Minibatch, VerticalPartition};
use crate::error::{Error, Result};
use crate::global::GlobalModel;
use crate::linalg::Matrix;
use crate::model::{self, LossSpec, ParamBlock, SiloModelSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    /// Q, local steps per round.
    pub local_steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub batch_seed: u64,
    pub latency: LatencyModel,
    /// Evaluate loss and gradient norm at every iteration instead of only
    /// at round starts.
    pub eval_every_iteration: bool,
    /// Keep θ̃^t and G^t in every iteration record.
    pub record_iterates: bool,
    /// `(L, L_max)` if known; enables the step-size warning.
    pub smoothness: Option<(f64, f64)>,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::config("local_steps (Q) must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        self.latency.validate()
    }

    /// 1 / (8·Q·max(L, L_max)).
    pub fn max_stable_rate(&self) -> Option<f64> {
        self.smoothness
            .map(|(l, lmax)| 1.0 / (8.0 * self.local_steps as f64 * l.max(lmax)))
    }
}

/// Per-silo coordinator holding θ̃_j.
#[derive(Debug, Clone)]
pub struct Hub {
    pub silo_index: usize,
    pub spec: SiloModelSpec,
    pub block: ParamBlock,
    pub clients: usize,
}

/// One client of one silo.
#[derive(Debug, Clone)]
pub struct Client {
    pub silo_index: usize,
    pub client_index: usize,
    pub block: ParamBlock,
    pub shard: HorizontalShard,
    /// Φ_{-k,j}: other silos' summed embeddings for `batch_ids`, fixed
    /// for the whole round.
    pub stale_other: EmbeddingBatch,
    /// ζ_{k,j}: this round's batch ids owned here, in batch order.
    pub batch_ids: Vec<usize>,
    pub batch_labels: Vec<f64>,
    features: Matrix,
    local_row: HashMap<usize, usize>,
    batch_rows: Matrix,
}

impl Client {
    fn new(shard: HorizontalShard, silo_features: &Matrix, block: ParamBlock, embedding_dim: usize) -> Self {
        let features = silo_features.select_rows(&shard.owned_ids);
        let local_row = shard.owned_ids.iter().enumerate().map(|(r, &id)| (id, r)).collect();
        Self {
            silo_index: shard.silo_index,
            client_index: shard.client_index,
            block,
            stale_other: EmbeddingBatch::empty(embedding_dim),
            batch_ids: Vec::new(),
            batch_labels: Vec::new(),
            batch_rows: Matrix::zeros(0, silo_features.cols()),
            features,
            local_row,
            shard,
        }
    }

    /// Own feature rows for the current batch ids.
    pub fn batch_rows(&self) -> &Matrix {
        &self.batch_rows
    }

    fn node(&self) -> Node {
        Node::Client {
            silo: self.silo_index,
            client: self.client_index,
        }
    }

    fn receive_weights(&mut self, msg: Message, batch: &Minibatch) {
        let Message::WeightsDown { block, batch_ids } = msg else {
            unreachable!("client expects weights")
        };
        debug_assert_eq!(batch_ids, batch.ids);
        self.block = block;
        let positions = owned_positions(&self.shard, batch);
        self.batch_ids = positions.iter().map(|&p| batch.ids[p]).collect();
        let rows: Vec<usize> = self.batch_ids.iter().map(|id| self.local_row[id]).collect();
        self.batch_rows = self.features.select_rows(&rows);
        self.batch_labels = rows.iter().map(|&r| self.shard.labels[r]).collect();
    }

    fn own_embeddings(&self, spec: &SiloModelSpec) -> Result<Message> {
        let values = model::embed(spec, &self.block, &self.batch_rows)?;
        Ok(Message::EmbeddingsUp(EmbeddingBatch::new(self.batch_ids.clone(), values)?))
    }

    /// g_{k,j} at the current block against the stale embeddings.
    pub fn local_gradient(&self, spec: &SiloModelSpec, loss: &LossSpec) -> Result<Vec<f64>> {
        model::partial_gradient(spec, &self.block, &self.batch_rows, &self.stale_other.values, &self.batch_labels, loss)
    }
}

/// What an observer sees after one client step.
pub struct StepView<'a> {
    pub iteration: u64,
    pub client: &'a Client,
    pub gradient: &'a [f64],
}

pub struct Engine<'a> {
    dataset: &'a Dataset,
    loss: LossSpec,
    config: ProtocolConfig,
    partitions: Vec<VerticalPartition>,
    hubs: Vec<Hub>,
    clients: Vec<Vec<Client>>,
    clock: SimClock,
    iteration: u64,
    round: u64,
    warnings: Vec<String>,
}

impl<'a> Engine<'a> {
    /// Hubs start from `init_blocks`; `shards[j]` lists silo j's clients.
    pub fn new(
        dataset: &'a Dataset,
        specs: Vec<SiloModelSpec>,
        partitions: Vec<VerticalPartition>,
        shards: Vec<Vec<HorizontalShard>>,
        init_blocks: Vec<ParamBlock>,
        loss: LossSpec,
        config: ProtocolConfig,
    ) -> Result<Self> {
        config.validate()?;
        let n = specs.len();
        if n == 0 {
            return Err(Error::config("at least one silo is required"));
        }
        if partitions.len() != n || shards.len() != n || init_blocks.len() != n {
            return Err(Error::config("specs, partitions, shards and blocks must have one entry per silo"));
        }
        if config.batch_size > dataset.num_samples() {
            return Err(Error::config(format!(
                "batch size {} exceeds the {} available samples",
                config.batch_size,
                dataset.num_samples()
            )));
        }
        let e = specs[0].embedding_dim;
        loss.validate(e)?;
        loss.validate_labels(&dataset.labels)?;
        let mut hubs = Vec::with_capacity(n);
        let mut clients = Vec::with_capacity(n);
        for (j, ((spec, part), (silo_shards, block))) in specs
            .into_iter()
            .zip(&partitions)
            .zip(shards.into_iter().zip(init_blocks))
            .enumerate()
        {
            spec.validate()?;
            if spec.silo_index != j || part.silo_index != j {
                return Err(Error::config(format!("silo {j} is out of order")));
            }
            if spec.embedding_dim != e {
                return Err(Error::config("embedding_dim must be equal across silos"));
            }
            if spec.input_dim != part.width() {
                return Err(Error::dim("silo feature columns", spec.input_dim, part.width()));
            }
            if block.len() != spec.param_len() {
                return Err(Error::dim("initial block", spec.param_len(), block.len()));
            }
            if silo_shards.is_empty() {
                return Err(Error::config(format!("silo {j} has no clients")));
            }
            check_shards_cover(j, &silo_shards, dataset.num_samples())?;
            let silo_features = dataset.silo_features(part);
            clients.push(
                silo_shards
                    .into_iter()
                    .map(|s| Client::new(s, &silo_features, block.clone(), e))
                    .collect::<Vec<_>>(),
            );
            hubs.push(Hub {
                silo_index: j,
                clients: clients[j].len(),
                spec,
                block,
            });
        }
        Ok(Self {
            dataset,
            loss,
            config,
            partitions,
            hubs,
            clients,
            clock: SimClock::default(),
            iteration: 0,
            round: 0,
            warnings: Vec::new(),
        })
    }

    pub fn hubs(&self) -> &[Hub] {
        &self.hubs
    }

    pub fn clients(&self) -> &[Vec<Client>] {
        &self.clients
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.config
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn clock(&self) -> f64 {
        self.clock.now()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Concatenation of the hub blocks. Only meaningful at round
    /// boundaries, where the hubs hold the client average.
    pub fn assemble_global_model(&self) -> GlobalModel {
        GlobalModel {
            specs: self.hubs.iter().map(|h| h.spec.clone()).collect(),
            partitions: self.partitions.clone(),
            blocks: self.hubs.iter().map(|h| h.block.clone()).collect(),
        }
    }

    /// θ̃^t: per-silo mean of the current client blocks.
    pub fn virtual_model(&self) -> GlobalModel {
        let mut g = self.assemble_global_model();
        for (j, silo) in self.clients.iter().enumerate() {
            g.blocks[j] = ParamBlock::mean(silo.iter().map(|c| &c.block)).expect("silo has clients");
        }
        g
    }

    pub fn run_round(&mut self) -> Result<RoundTrace> {
        self.run_round_observed(&mut |_| {})
    }

    pub fn run_round_observed(&mut self, observer: &mut dyn FnMut(StepView<'_>)) -> Result<RoundTrace> {
        if self.round == 0 {
            self.check_step_size();
        }
        let q = self.config.local_steps;
        let t0 = self.iteration;
        let start_clock = self.clock.now();
        let mut messages = Vec::new();
        let mut log = |msg: &Message, from: Node, to: Node, iteration: u64| {
            messages.push(MessageRecord {
                kind: msg.kind(),
                from,
                to,
                scalars: msg.scalar_count(),
                iteration,
            })
        };

        // round start: hubs hold θ̃^{t0}
        let start_model = self.assemble_global_model();
        let start_loss = start_model.loss(self.dataset, &self.loss)?;
        let start_grad = start_model.grad_sq_norm(self.dataset, &self.loss)?;

        let batch = sample_minibatch(self.config.batch_seed, t0, self.config.batch_size, self.dataset.num_samples())?;
        let position: HashMap<usize, usize> = batch.ids.iter().enumerate().map(|(p, &id)| (id, p)).collect();
        let e = self.hubs[0].spec.embedding_dim;

        // weights + ids down, embeddings up, hub-side union
        let mut silo_embeddings = Vec::with_capacity(self.hubs.len());
        for (hub, clients) in self.hubs.iter().zip(self.clients.iter_mut()) {
            let hub_node = Node::Hub { silo: hub.silo_index };
            let mut union = Matrix::zeros(batch.ids.len(), e);
            for client in clients.iter_mut() {
                let down = Message::WeightsDown {
                    block: hub.block.clone(),
                    batch_ids: batch.ids.clone(),
                };
                log(&down, hub_node, client.node(), t0);
                client.receive_weights(down, &batch);
                let up = client.own_embeddings(&hub.spec)?;
                log(&up, client.node(), hub_node, t0);
                let Message::EmbeddingsUp(part) = up else { unreachable!() };
                for (r, id) in part.ids.iter().enumerate() {
                    union.row_mut(position[id]).copy_from_slice(part.values.row(r));
                }
            }
            silo_embeddings.push(EmbeddingBatch::new(batch.ids.clone(), union)?);
        }

        // all-to-all hub exchange; receivers sum in silo order
        let n = self.hubs.len();
        let mut others: Vec<Matrix> = (0..n).map(|_| Matrix::zeros(batch.ids.len(), e)).collect();
        for (j, other) in others.iter_mut().enumerate() {
            for (l, emb) in silo_embeddings.iter().enumerate() {
                if l == j {
                    continue;
                }
                let msg = Message::HubExchange(emb.clone());
                log(&msg, Node::Hub { silo: l }, Node::Hub { silo: j }, t0);
                let Message::HubExchange(recv) = msg else { unreachable!() };
                other.add_assign(&recv.values)?;
            }
        }

        // projection to clients
        for (j, clients) in self.clients.iter_mut().enumerate() {
            let summed = EmbeddingBatch::new(batch.ids.clone(), std::mem::replace(&mut others[j], Matrix::zeros(0, e)))?;
            for client in clients.iter_mut() {
                let msg = Message::ProjectedDown(project(&summed, &client.shard, &batch)?);
                log(&msg, Node::Hub { silo: j }, client.node(), t0);
                let Message::ProjectedDown(stale) = msg else { unreachable!() };
                client.stale_other = stale;
            }
        }

        // Q local steps
        let mut records = Vec::with_capacity(q as usize);
        for s in 0..q {
            let t = t0 + s;
            let (loss, grad_sq_norm) = if s == 0 {
                (Some(start_loss), Some(start_grad))
            } else if self.config.eval_every_iteration {
                let v = self.virtual_model();
                (Some(v.loss(self.dataset, &self.loss)?), Some(v.grad_sq_norm(self.dataset, &self.loss)?))
            } else {
                (None, None)
            };
            let virtual_model = if self.config.record_iterates {
                self.virtual_model().flatten()
            } else {
                Vec::new()
            };
            let mut mean_gradient = Vec::new();
            for (hub, clients) in self.hubs.iter().zip(self.clients.iter_mut()) {
                let mut g_mean = vec![0.0; hub.spec.param_len()];
                for client in clients.iter_mut() {
                    let g = if client.batch_ids.is_empty() {
                        vec![0.0; hub.spec.param_len()]
                    } else {
                        client.local_gradient(&hub.spec, &self.loss)?
                    };
                    client.block.descend(self.config.learning_rate, &g);
                    if !client.block.is_finite() {
                        return Err(Error::Divergence {
                            client: client.client_index,
                            silo: client.silo_index,
                            iteration: t,
                        });
                    }
                    if self.config.record_iterates {
                        for (m, v) in g_mean.iter_mut().zip(&g) {
                            *m += v;
                        }
                    }
                    observer(StepView {
                        iteration: t,
                        client,
                        gradient: &g,
                    });
                }
                if self.config.record_iterates {
                    let k = clients.len() as f64;
                    mean_gradient.extend(g_mean.into_iter().map(|v| v / k));
                }
            }
            records.push(IterationRecord {
                round: self.round,
                iteration: t,
                clock: start_clock,
                loss,
                grad_sq_norm,
                msgs_scalars: 0,
                virtual_model,
                mean_gradient,
            });
        }

        // weights up and averaging
        let t_last = t0 + q - 1;
        for (hub, clients) in self.hubs.iter_mut().zip(&self.clients) {
            let hub_node = Node::Hub { silo: hub.silo_index };
            let mut received = Vec::with_capacity(clients.len());
            for client in clients {
                let msg = Message::WeightsUp(client.block.clone());
                log(&msg, client.node(), hub_node, t_last);
                let Message::WeightsUp(b) = msg else { unreachable!() };
                received.push(b);
            }
            hub.block = ParamBlock::mean(&received).expect("silo has clients");
        }

        for m in &messages {
            records[(m.iteration - t0) as usize].msgs_scalars += m.scalars;
        }
        self.iteration += q;
        let end_clock = self.clock.charge_round(q, &self.config.latency);
        let trace = RoundTrace {
            round: self.round,
            records,
            messages,
            end_clock,
        };
        self.round += 1;
        Ok(trace)
    }

    fn check_step_size(&mut self) {
        if let Some(limit) = self.config.max_stable_rate() {
            if self.config.learning_rate > limit {
                let msg = format!(
                    "learning rate {} exceeds 1/(8·Q·max(L, L_max)) = {limit}",
                    self.config.learning_rate
                );
                log::warn!("{msg}");
                self.warnings.push(msg);
            }
        }
    }

    /// `rounds` consecutive rounds. On failure the rounds completed so far
    /// are returned alongside the error.
    pub fn run_training(mut self, rounds: u64) -> std::result::Result<TrainingTrace, TrainingFailure> {
        let initial_loss = match self.assemble_global_model().loss(self.dataset, &self.loss) {
            Ok(l) => l,
            Err(error) => {
                return Err(TrainingFailure {
                    completed: Vec::new(),
                    error,
                })
            }
        };
        let mut traces = Vec::with_capacity(rounds as usize);
        for _ in 0..rounds {
            match self.run_round() {
                Ok(t) => traces.push(t),
                Err(error) => return Err(TrainingFailure { completed: traces, error }),
            }
        }
        let model = self.assemble_global_model();
        let finish = || -> Result<FinalState> {
            Ok(FinalState {
                round: self.round,
                iteration: self.iteration,
                clock: self.clock.now(),
                loss: model.loss(self.dataset, &self.loss)?,
                grad_sq_norm: model.grad_sq_norm(self.dataset, &self.loss)?,
            })
        };
        let final_state = match finish() {
            Ok(f) => f,
            Err(error) => return Err(TrainingFailure { completed: traces, error }),
        };
        Ok(TrainingTrace {
            rounds: traces,
            initial_loss,
            final_state,
            model,
            warnings: self.warnings,
        })
    }
}

#[derive(Debug)]
pub struct TrainingFailure {
    pub completed: Vec<RoundTrace>,
    pub error: Error,
}

impl std::fmt::Display for TrainingFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} completed rounds)", self.error, self.completed.len())
    }
}

impl std::error::Error for TrainingFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

fn check_shards_cover(silo: usize, shards: &[HorizontalShard], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    for s in shards {
        if s.silo_index != silo {
            return Err(Error::config(format!("shard of silo {} handed to silo {silo}", s.silo_index)));
        }
        for &id in &s.owned_ids {
            if id >= m || std::mem::replace(&mut seen[id], true) {
                return Err(Error::config(format!("silo {silo}: sample {id} is out of range or owned twice")));
            }
        }
    }
    if let Some(id) = seen.iter().position(|s| !s) {
        return Err(Error::config(format!("silo {silo}: sample {id} has no owner")));
    }
    Ok(())
}
