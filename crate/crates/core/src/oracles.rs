//! Reference computations the protocol is checked against.
//!
//! Nothing in here goes through [`crate::protocol`]: the references are
//! written directly against the model primitives so that agreement with
//! the engine is evidence, not tautology.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{sample_minibatch, Dataset, HorizontalShard, VerticalPartition};
use crate::error::{Error, Result};
use crate::global::GlobalModel;
use crate::linalg::{largest_eigenvalue_psd, norm_sq, spectral_norm, Matrix};
use crate::model::{self, Architecture, LossKind, LossSpec, ParamBlock, SiloModelSpec};
use crate::protocol::TrainingTrace;
use crate::rng::{Purpose, Stream};

/// Everything that fixes a problem instance, independent of the protocol.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub dataset: &'a Dataset,
    pub specs: &'a [SiloModelSpec],
    pub partitions: &'a [VerticalPartition],
    pub loss: LossSpec,
}

impl Problem<'_> {
    fn model(&self, blocks: Vec<ParamBlock>) -> Result<GlobalModel> {
        GlobalModel::new(self.specs.to_vec(), self.partitions.to_vec(), blocks)
    }

    fn split(&self, flat: &[f64]) -> Vec<ParamBlock> {
        let mut out = Vec::with_capacity(self.specs.len());
        let mut at = 0;
        for s in self.specs {
            out.push(ParamBlock(flat[at..at + s.param_len()].to_vec()));
            at += s.param_len();
        }
        out
    }

    fn is_linear_least_squares(&self) -> bool {
        self.loss.kind == LossKind::SquaredError && self.specs.iter().all(|s| s.architecture == Architecture::Linear)
    }
}

/// The batches a protocol run draws: one per round, at `t_0 = r·Q`.
pub fn batch_schedule(seed: u64, local_steps: u64, rounds: u64, batch_size: usize, samples: usize) -> Result<Vec<Vec<usize>>> {
    (0..rounds)
        .map(|r| Ok(sample_minibatch(seed, r * local_steps, batch_size, samples)?.ids))
        .collect()
}

fn relative_deviation(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm_sq(b).sqrt();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Max over the trajectory of ‖a_t − b_t‖ / ‖b_t‖.
pub fn max_relative_deviation(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len(), "trajectories differ in length");
    a.iter().zip(b).map(|(x, y)| relative_deviation(x, y)).fold(0.0, f64::max)
}

/// Plain mini-batch gradient descent on the full model: every block moves
/// at once using the gradient at the same iterate. One step per scheduled
/// batch; returns θ^0 … θ^T flattened.
pub fn centralized_sgd_reference(
    problem: &Problem<'_>,
    init: &[ParamBlock],
    learning_rate: f64,
    schedule: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let mut model = problem.model(init.to_vec())?;
    let mut out = vec![model.flatten()];
    for (t, ids) in schedule.iter().enumerate() {
        let grads = model.gradient(problem.dataset, &problem.loss, Some(ids))?;
        for (block, g) in model.blocks.iter_mut().zip(&grads) {
            block.descend(learning_rate, g);
        }
        if model.blocks.iter().any(|b| !b.is_finite()) {
            return Err(Error::Divergence {
                client: 0,
                silo: 0,
                iteration: t as u64,
            });
        }
        out.push(model.flatten());
    }
    Ok(out)
}

/// Local SGD over horizontal shards of a single silo: each client starts
/// from the shared model, takes `local_steps` steps on its part of the
/// round's batch, and the shared model becomes the client mean. Returns the
/// shared model at every round boundary.
pub fn local_sgd_reference(
    problem: &Problem<'_>,
    shards: &[HorizontalShard],
    init: &ParamBlock,
    learning_rate: f64,
    local_steps: u64,
    schedule: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    if problem.specs.len() != 1 {
        return Err(Error::config("local SGD reference needs exactly one silo"));
    }
    let mut shared = problem.model(vec![init.clone()])?;
    let mut out = vec![shared.flatten()];
    for batch in schedule {
        let mut finished = Vec::with_capacity(shards.len());
        for shard in shards {
            let owned: HashSet<usize> = shard.owned_ids.iter().copied().collect();
            let mine: Vec<usize> = batch.iter().copied().filter(|id| owned.contains(id)).collect();
            let mut local = shared.clone();
            if !mine.is_empty() {
                for _ in 0..local_steps {
                    let g = local.gradient(problem.dataset, &problem.loss, Some(&mine))?;
                    local.blocks[0].descend(learning_rate, &g[0]);
                }
            }
            finished.push(local.blocks.swap_remove(0));
        }
        shared.blocks[0] = ParamBlock::mean(&finished).expect("at least one client");
        out.push(shared.flatten());
    }
    Ok(out)
}

/// One client per silo: at each round every silo embeds the whole batch,
/// then each silo takes `local_steps` steps on its own block against the
/// frozen sum of the other silos' embeddings. Returns the model at every
/// round boundary.
pub fn single_tier_vfl_reference(
    problem: &Problem<'_>,
    init: &[ParamBlock],
    learning_rate: f64,
    local_steps: u64,
    schedule: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let mut blocks = init.to_vec();
    let mut out = vec![problem.model(blocks.clone())?.flatten()];
    let features: Vec<Matrix> = problem.partitions.iter().map(|p| problem.dataset.silo_features(p)).collect();
    for batch in schedule {
        let labels: Vec<f64> = batch.iter().map(|&i| problem.dataset.labels[i]).collect();
        let rows: Vec<Matrix> = features.iter().map(|f| f.select_rows(batch)).collect();
        let phi: Vec<Matrix> = problem
            .specs
            .iter()
            .zip(&blocks)
            .zip(&rows)
            .map(|((s, b), x)| model::embed(s, b, x))
            .collect::<Result<_>>()?;
        for (j, spec) in problem.specs.iter().enumerate() {
            let mut other = Matrix::zeros(batch.len(), spec.embedding_dim);
            for (l, p) in phi.iter().enumerate() {
                if l != j {
                    other.add_assign(p)?;
                }
            }
            for _ in 0..local_steps {
                let g = model::partial_gradient(spec, &blocks[j], &rows[j], &other, &labels, &problem.loss)?;
                blocks[j].descend(learning_rate, &g);
            }
        }
        out.push(problem.model(blocks.clone())?.flatten());
    }
    Ok(out)
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn enumerate_batches(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

fn binomial(n: usize, k: usize) -> Option<u64> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return None;
        }
    }
    Some(acc as u64)
}

/// Round-start stochastic partial derivatives of silo `j` for one batch:
/// each client's `g_{k,j}` on its part of the batch, with the other
/// silos' embeddings computed at `model`. Empty parts give zero vectors.
pub fn client_gradients(
    problem: &Problem<'_>,
    model_at: &GlobalModel,
    shards: &[HorizontalShard],
    silo: usize,
    batch: &[usize],
) -> Result<Vec<(usize, Vec<f64>)>> {
    let spec = &problem.specs[silo];
    let feats = problem.dataset.features.select_rows(batch);
    let mut other = Matrix::zeros(batch.len(), spec.embedding_dim);
    for (l, ((s, p), b)) in problem.specs.iter().zip(problem.partitions).zip(&model_at.blocks).enumerate() {
        if l != silo {
            other.add_assign(&model::embed(s, b, &feats.select_cols(&p.columns))?)?;
        }
    }
    let own = feats.select_cols(&problem.partitions[silo].columns);
    shards
        .iter()
        .map(|shard| {
            let pos: Vec<usize> = (0..batch.len()).filter(|&p| shard.owns(batch[p])).collect();
            let labels: Vec<f64> = pos.iter().map(|&p| problem.dataset.labels[batch[p]]).collect();
            let g = model::partial_gradient(
                spec,
                &model_at.blocks[silo],
                &own.select_rows(&pos),
                &other.select_rows(&pos),
                &labels,
                &problem.loss,
            )?;
            Ok((pos.len(), g))
        })
        .collect()
}

/// Batch-level stochastic partial derivative: `Σ_k |ζ_{k,j}|·g_{k,j} / B`.
pub fn id_weighted_gradient(parts: &[(usize, Vec<f64>)], batch_size: usize) -> Vec<f64> {
    let len = parts.first().map_or(0, |p| p.1.len());
    let mut acc = vec![0.0; len];
    for (count, g) in parts {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += *count as f64 * v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= batch_size as f64);
    acc
}

/// Mean of the ID-weighted round-start gradient over every batch of size
/// `batch_size`, per silo. Equals `∇_(j) L` when sampling is uniform.
pub fn expected_round_start_gradient(
    problem: &Problem<'_>,
    model_at: &GlobalModel,
    shards: &[Vec<HorizontalShard>],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let batches = enumerate_batches(problem.dataset.num_samples(), batch_size);
    let mut out: Vec<Vec<f64>> = problem.specs.iter().map(|s| vec![0.0; s.param_len()]).collect();
    for batch in &batches {
        for (j, acc) in out.iter_mut().enumerate() {
            let parts = client_gradients(problem, model_at, &shards[j], j, batch)?;
            for (a, v) in acc.iter_mut().zip(id_weighted_gradient(&parts, batch_size)) {
                *a += v;
            }
        }
    }
    let n = batches.len() as f64;
    out.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v /= n));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantSource {
    Analytic,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub smoothness: f64,
    pub max_local_smoothness: f64,
    /// σ_j² per silo.
    pub variance: Vec<f64>,
    pub source: ConstantSource,
}

impl BoundConstants {
    pub fn total_variance(&self) -> f64 {
        self.variance.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub pairs: usize,
    pub radius: f64,
    pub probe_iterates: usize,
    /// Batch draws per iterate when the batches are too many to enumerate.
    pub batch_draws: usize,
    /// Enumerate all batches when there are at most this many.
    pub enumeration_limit: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(batch_size: usize, seed: u64) -> Self {
        Self {
            pairs: 64,
            radius: 0.5,
            probe_iterates: 5,
            batch_draws: 256,
            enumeration_limit: 20_000,
            batch_size,
            seed,
        }
    }
}

/// L, L_max and σ_j². Linear least squares gets closed-form smoothness
/// constants; everything else is a sampled lower estimate. σ_j² is the
/// maximum over `iterates` (plus random probes around the first one when
/// `iterates` holds fewer than `probe_iterates` points) of the mean
/// squared deviation of the batch-level stochastic partial derivative
/// from `∇_(j) L`, over all batches when enumerable.
pub fn estimate_constants(
    problem: &Problem<'_>,
    shards: &[Vec<HorizontalShard>],
    iterates: &[Vec<ParamBlock>],
    probe: &ProbeConfig,
) -> Result<BoundConstants> {
    if iterates.is_empty() {
        return Err(Error::config("at least one probe iterate is required"));
    }
    let m = problem.dataset.num_samples();
    let mut stream = Stream::new(probe.seed, Purpose::Probe, 0);
    let mut points: Vec<Vec<ParamBlock>> = iterates.to_vec();
    while points.len() < probe.probe_iterates {
        points.push(perturb(&iterates[0], probe.radius, &mut stream));
    }
    let batches = match binomial(m, probe.batch_size) {
        Some(c) if c <= probe.enumeration_limit => enumerate_batches(m, probe.batch_size),
        _ => (0..probe.batch_draws)
            .map(|_| stream.sample_without_replacement(m, probe.batch_size))
            .collect(),
    };

    let variance = batch_variance(problem, shards, &points, &batches, probe.batch_size)?;

    if problem.is_linear_least_squares() && problem.specs.iter().all(|s| s.embedding_dim == 1) {
        let (l, lmax) = analytic_smoothness(problem, shards, &batches);
        return Ok(BoundConstants {
            smoothness: l,
            max_local_smoothness: lmax,
            variance,
            source: ConstantSource::Analytic,
        });
    }

    let mut l: f64 = 0.0;
    let mut lmax: f64 = 0.0;
    for p in 0..probe.pairs {
        let base = &points[p % points.len()];
        let a = perturb(base, probe.radius, &mut stream);
        let b = perturb(base, probe.radius, &mut stream);
        let dist = flat_distance(&a, &b);
        if dist == 0.0 {
            continue;
        }
        let ga = problem.model(a.clone())?.gradient(problem.dataset, &problem.loss, None)?;
        let gb = problem.model(b.clone())?.gradient(problem.dataset, &problem.loss, None)?;
        l = l.max(flat_distance_vec(&ga, &gb) / dist);
        let batch = &batches[p % batches.len()];
        let ma = problem.model(a)?;
        let mb = problem.model(b)?;
        for j in 0..problem.specs.len() {
            let pa = client_gradients(problem, &ma, &shards[j], j, batch)?;
            let pb = client_gradients(problem, &mb, &shards[j], j, batch)?;
            for ((na, x), (_, y)) in pa.iter().zip(&pb) {
                if *na > 0 {
                    lmax = lmax.max(flat_distance_vec(std::slice::from_ref(x), std::slice::from_ref(y)) / dist);
                }
            }
        }
    }
    Ok(BoundConstants {
        smoothness: l,
        max_local_smoothness: lmax,
        variance,
        source: ConstantSource::Estimated,
    })
}

fn batch_variance(
    problem: &Problem<'_>,
    shards: &[Vec<HorizontalShard>],
    points: &[Vec<ParamBlock>],
    batches: &[Vec<usize>],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut variance = vec![0.0f64; problem.specs.len()];
    for point in points {
        let model_at = problem.model(point.clone())?;
        let full = model_at.gradient(problem.dataset, &problem.loss, None)?;
        for (j, var) in variance.iter_mut().enumerate() {
            let mut acc = 0.0;
            for batch in batches {
                let parts = client_gradients(problem, &model_at, &shards[j], j, batch)?;
                let g = id_weighted_gradient(&parts, batch_size);
                acc += g.iter().zip(&full[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            *var = var.max(acc / batches.len() as f64);
        }
    }
    Ok(variance)
}

/// For `(1/|S|)Σ_{p∈S}(x_p·θ − y_p)²`, the gradient of block j is
/// `(2/|S|) X_{S,j}ᵀ X_S θ + const`, so its Lipschitz constant is the
/// spectral norm of `(2/|S|) X_{S,j}ᵀ X_S`. L uses S = all samples; L_max
/// takes the max over every client part of every listed batch.
fn analytic_smoothness(problem: &Problem<'_>, shards: &[Vec<HorizontalShard>], batches: &[Vec<usize>]) -> (f64, f64) {
    let x = &problem.dataset.features;
    let m = x.rows() as f64;
    let mut h = x.gram();
    h.scale(2.0 / m);
    let l = largest_eigenvalue_psd(&h, 1e-14, 100_000);
    // column order of the flattened model
    let order: Vec<usize> = problem.partitions.iter().flat_map(|p| p.columns.iter().copied()).collect();
    let x = x.select_cols(&order);
    let mut lmax: f64 = 0.0;
    let mut offset = 0;
    for (j, part) in problem.partitions.iter().enumerate() {
        let cols: Vec<usize> = (offset..offset + part.width()).collect();
        offset += part.width();
        for batch in batches {
            for shard in &shards[j] {
                let s: Vec<usize> = batch.iter().copied().filter(|&id| shard.owns(id)).collect();
                if s.is_empty() {
                    continue;
                }
                let xs = x.select_rows(&s);
                let xsj = xs.select_cols(&cols);
                // (2/|S|) X_{S,j}ᵀ X_S, D_j × D
                let mut a = Matrix::zeros(cols.len(), xs.cols());
                for r in 0..xs.rows() {
                    for (i, &xi) in xsj.row(r).iter().enumerate() {
                        for (c, &xc) in xs.row(r).iter().enumerate() {
                            a.set(i, c, a.get(i, c) + xi * xc);
                        }
                    }
                }
                a.scale(2.0 / s.len() as f64);
                lmax = lmax.max(spectral_norm(&a));
            }
        }
    }
    (l, lmax)
}

fn perturb(base: &[ParamBlock], radius: f64, stream: &mut Stream) -> Vec<ParamBlock> {
    base.iter()
        .map(|b| ParamBlock(b.as_slice().iter().map(|v| v + stream.uniform(-radius, radius)).collect()))
        .collect()
}

fn flat_distance(a: &[ParamBlock], b: &[ParamBlock]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.as_slice().iter().zip(y.as_slice()))
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

fn flat_distance_vec(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y))
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Mean over round starts of ‖∇L(θ̃^{t_0})‖².
    pub lhs: f64,
    pub rhs: f64,
    pub descent_term: f64,
    pub variance_term: f64,
    /// 1/(8·Q·max(L, L_max))
    pub eta_max: f64,
    pub eta_admissible: bool,
    pub satisfied: bool,
}

/// Quantities the bound consumes, averaged over independent runs.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    pub mean_round_start_grad_sq: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub rounds: u64,
}

impl BoundInputs {
    /// Average over runs that share η, Q and R (different batch seeds).
    pub fn from_traces(traces: &[TrainingTrace]) -> Result<Self> {
        let first = traces.first().ok_or(Error::MissingTrace("runs"))?;
        let rounds = first.rounds.len() as u64;
        if rounds == 0 {
            return Err(Error::MissingTrace("rounds"));
        }
        let mut lhs = 0.0;
        let mut init = 0.0;
        let mut fin = 0.0;
        for t in traces {
            if t.rounds.len() as u64 != rounds {
                return Err(Error::config("runs differ in round count"));
            }
            let mut sum = 0.0;
            for r in &t.rounds {
                sum += r.start_grad_sq_norm().ok_or(Error::MissingTrace("round-start gradient norm"))?;
            }
            lhs += sum / rounds as f64;
            init += t.initial_loss;
            fin += t.final_state.loss;
        }
        let n = traces.len() as f64;
        Ok(Self {
            mean_round_start_grad_sq: lhs / n,
            initial_loss: init / n,
            final_loss: fin / n,
            rounds,
        })
    }
}

/// Evaluate the convergence bound
/// `4(L(θ̃⁰) − L(θ̃ᵀ))/(ηQR) + 4(ηLQ + 4η²Q²L_max² + 8η³Q³L·L_max²)·Σσ_j²`
/// and compare it with the measured left-hand side.
pub fn convergence_bound(inputs: &BoundInputs, constants: &BoundConstants, learning_rate: f64, local_steps: u64) -> BoundReport {
    let (eta, q, r) = (learning_rate, local_steps as f64, inputs.rounds as f64);
    let (l, lm) = (constants.smoothness, constants.max_local_smoothness);
    let eta_max = 1.0 / (8.0 * q * l.max(lm));
    let descent_term = 4.0 * (inputs.initial_loss - inputs.final_loss) / (eta * q * r);
    let variance_term = 4.0
        * (eta * l * q + 4.0 * eta.powi(2) * q.powi(2) * lm.powi(2) + 8.0 * eta.powi(3) * q.powi(3) * l * lm.powi(2))
        * constants.total_variance();
    let rhs = descent_term + variance_term;
    BoundReport {
        lhs: inputs.mean_round_start_grad_sq,
        rhs,
        descent_term,
        variance_term,
        eta_max,
        eta_admissible: eta >= 0.0 && eta <= eta_max,
        satisfied: inputs.mean_round_start_grad_sq <= rhs,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionKind {
    /// One silo: local SGD with periodic averaging.
    N1LocalSgd,
    /// One client per silo: single-tier vertical learning.
    K1Vfl,
    /// Q = 1, one client per silo or full batches: centralized SGD.
    Q1Centralized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub kind: ReductionKind,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A protocol instance plus what is needed to rebuild it.
pub struct ReductionSetup<'a> {
    pub problem: Problem<'a>,
    pub shards: Vec<Vec<HorizontalShard>>,
    pub init: Vec<ParamBlock>,
    pub learning_rate: f64,
    pub local_steps: u64,
    pub batch_size: usize,
    pub batch_seed: u64,
    pub rounds: u64,
}

/// Run the protocol and the matching reference on the same seeds and
/// report the largest relative parameter deviation at round boundaries.
pub fn reduction_check(kind: ReductionKind, setup: &ReductionSetup<'_>, tolerance: f64) -> Result<ReductionReport> {
    let p = &setup.problem;
    match kind {
        ReductionKind::N1LocalSgd if p.specs.len() != 1 => return Err(Error::config("N1 reduction needs one silo")),
        ReductionKind::K1Vfl if setup.shards.iter().any(|s| s.len() != 1) => {
            return Err(Error::config("K1 reduction needs one client per silo"))
        }
        ReductionKind::Q1Centralized if setup.local_steps != 1 => {
            return Err(Error::config("Q1 reduction needs local_steps = 1"))
        }
        _ => {}
    }
    let m = p.dataset.num_samples();
    let schedule = batch_schedule(setup.batch_seed, setup.local_steps, setup.rounds, setup.batch_size, m)?;
    let reference = match kind {
        ReductionKind::N1LocalSgd => local_sgd_reference(p, &setup.shards[0], &setup.init[0], setup.learning_rate, setup.local_steps, &schedule)?,
        ReductionKind::K1Vfl => single_tier_vfl_reference(p, &setup.init, setup.learning_rate, setup.local_steps, &schedule)?,
        ReductionKind::Q1Centralized => centralized_sgd_reference(p, &setup.init, setup.learning_rate, &schedule)?,
    };
    let protocol = protocol_trajectory(setup)?;
    let max_deviation = max_relative_deviation(&protocol, &reference);
    Ok(ReductionReport {
        kind,
        max_deviation,
        tolerance,
        passed: max_deviation <= tolerance,
    })
}

/// Hub models at every round boundary of a protocol run.
pub fn protocol_trajectory(setup: &ReductionSetup<'_>) -> Result<Vec<Vec<f64>>> {
    use crate::clock::LatencyModel;
    use crate::protocol::{Engine, ProtocolConfig};
    let p = &setup.problem;
    let config = ProtocolConfig {
        local_steps: setup.local_steps,
        learning_rate: setup.learning_rate,
        batch_size: setup.batch_size,
        batch_seed: setup.batch_seed,
        latency: LatencyModel::new(0.0, 0.0),
        eval_every_iteration: false,
        record_iterates: false,
        smoothness: None,
    };
    let mut engine = Engine::new(
        p.dataset,
        p.specs.to_vec(),
        p.partitions.to_vec(),
        setup.shards.clone(),
        setup.init.clone(),
        p.loss,
        config,
    )?;
    let mut out = vec![engine.assemble_global_model().flatten()];
    for _ in 0..setup.rounds {
        engine.run_round()?;
        out.push(engine.assemble_global_model().flatten());
    }
    Ok(out)
}

/// Split a flat vector into per-silo blocks following `specs`.
pub fn unflatten(specs: &[SiloModelSpec], flat: &[f64]) -> Vec<ParamBlock> {
    let p = Problem {
        dataset: &Dataset {
            features: Matrix::zeros(0, 0),
            labels: Vec::new(),
        },
        specs,
        partitions: &[],
        loss: LossSpec::squared_error(),
    };
    p.split(flat)
}

/// Central finite differences of the mean batch loss with respect to one
/// silo block, holding the other silos' embedding sum fixed.
pub fn finite_difference_gradient(
    spec: &SiloModelSpec,
    block: &ParamBlock,
    own_rows: &Matrix,
    other_sum: &Matrix,
    labels: &[f64],
    loss: &LossSpec,
    step: f64,
) -> Result<Vec<f64>> {
    let eval = |b: &ParamBlock| -> Result<f64> {
        let mut z = model::embed(spec, b, own_rows)?;
        z.add_assign(other_sum)?;
        model::composite_loss(&z, labels, loss)
    };
    let mut probe = block.clone();
    (0..block.len())
        .map(|i| {
            let orig = probe.0[i];
            probe.0[i] = orig + step;
            let up = eval(&probe)?;
            probe.0[i] = orig - step;
            let down = eval(&probe)?;
            probe.0[i] = orig;
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// Largest relative error `‖fd − g‖ / max(‖fd‖, ‖g‖)` of
/// [`model::partial_gradient`] against finite differences over `probes`
/// random blocks, inputs, other-silo sums and labels.
pub fn gradient_check(spec: &SiloModelSpec, loss: &LossSpec, rows: usize, probes: usize, step: f64, seed: u64) -> Result<f64> {
    let mut s = Stream::new(seed, Purpose::Probe, spec.silo_index as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let block = ParamBlock((0..spec.param_len()).map(|_| s.uniform(-1.0, 1.0)).collect());
        let own = Matrix::from_vec(rows, spec.input_dim, (0..rows * spec.input_dim).map(|_| s.normal()).collect())?;
        let other = Matrix::from_vec(rows, spec.embedding_dim, (0..rows * spec.embedding_dim).map(|_| s.normal()).collect())?;
        let labels: Vec<f64> = (0..rows)
            .map(|_| match loss.kind {
                LossKind::SquaredError => s.normal(),
                LossKind::BinaryCrossEntropyWithLogit => s.below(2) as f64,
                LossKind::SoftmaxCrossEntropy => s.below(loss.label_arity as u64) as f64,
            })
            .collect();
        let g = model::partial_gradient(spec, &block, &own, &other, &labels, loss)?;
        let fd = finite_difference_gradient(spec, &block, &own, &other, &labels, loss, step)?;
        let diff: Vec<f64> = fd.iter().zip(&g).map(|(a, b)| a - b).collect();
        let scale = norm_sq(&g).sqrt().max(norm_sq(&fd).sqrt());
        if scale > 0.0 {
            worst = worst.max(norm_sq(&diff).sqrt() / scale);
        }
    }
    Ok(worst)
}
