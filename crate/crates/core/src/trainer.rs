//! Mini-batch supervised training of the semi-parametric model: unrolled
//! loss, neighbor dropout/randomisation, the neighbor-regularisation loss,
//! and the Adam training loop with scheduled learning rate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datastore::{NeighborRecord, PositionRef, Store, StoreError, TrainingTarget};
use crate::go::encode_observation;
use crate::model::{AgentModel, Bound, EncodeOut, ModelConfig, ModelOutput, Params};
use crate::tensor::{
    adam_step, lr_schedule, read_tensors, write_tensors, AdamHyper, AdamState, Element,
    NamedTensor, NodeId, Tape, Tensor, TensorError,
};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Loss shape: unroll length, step weights, weight decay, and the neighbor
/// regularisations.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub unroll_steps: usize,
    pub alpha: f64,
    pub lambda_reg: f64,
    pub neighbor_dropout: bool,
    pub neighbor_randomisation: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            unroll_steps: 5,
            alpha: 1e-4,
            lambda_reg: 0.1,
            neighbor_dropout: true,
            neighbor_randomisation: true,
        }
    }
}

impl LossConfig {
    /// w_0 = 1, w_k = 1/K for k >= 1.
    pub fn step_weight(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            1.0 / self.unroll_steps as f64
        }
    }
}

/// One assembled mini-batch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// [B, 5, H, W]
    pub obs: Tensor<f32>,
    /// B lists of exactly N records (zero-padded).
    pub neighbors: Vec<Vec<NeighborRecord>>,
    /// B lists of N flags; padding rows are pre-masked false.
    pub masks: Vec<Vec<bool>>,
    pub targets: Vec<TrainingTarget>,
}

/// Scalar loss components on the tape. `total` excludes the weight-decay
/// term, which enters the optimizer analytically (see
/// [`weight_decay_grads`]) and the reported loss via [`weight_decay_value`].
pub struct LossNodes {
    pub total: NodeId,
    pub policy: NodeId,
    pub value: NodeId,
    pub reg: NodeId,
}

/// Policy and value terms of the unrolled loss: for every step k,
/// w_k * (-ln pi_k(a_k) + (v_k - g)^2 / 2), averaged over the batch.
pub fn prediction_loss<E: Element>(
    tape: &mut Tape<E>,
    out: &ModelOutput,
    targets: &[TrainingTarget],
    cfg: &LossConfig,
) -> Result<(NodeId, NodeId)> {
    let k_steps = cfg.unroll_steps;
    if out.policy_nodes.len() != k_steps + 1 {
        return Err(TrainError::Usage(format!(
            "output has {} heads, loss config expects {}",
            out.policy_nodes.len(),
            k_steps + 1
        )));
    }
    for t in targets {
        if t.actions.len() != k_steps + 1 {
            return Err(TrainError::Usage(format!(
                "target has {} actions, expected {}",
                t.actions.len(),
                k_steps + 1
            )));
        }
    }
    let g: Vec<E> = targets
        .iter()
        .map(|t| E::from_f64(t.return_g as f64))
        .collect();
    let g = tape.leaf(Tensor::from_vec(&[targets.len()], g)?, false)?;

    let mut policy_terms = Vec::with_capacity(k_steps + 1);
    let mut value_terms = Vec::with_capacity(k_steps + 1);
    for k in 0..=k_steps {
        let w = cfg.step_weight(k);
        let idx: Vec<usize> = targets.iter().map(|t| t.actions[k]).collect();
        let picked = tape.select_cols(out.policy_nodes[k], &idx)?;
        let logp = tape.ln_clamped(picked, PROB_FLOOR)?;
        let m = tape.mean_all(logp)?;
        policy_terms.push(tape.scalar_mul(m, -w)?);

        let diff = tape.sub(out.value_nodes[k], g)?;
        let sq = tape.mul(diff, diff)?;
        let m = tape.mean_all(sq)?;
        value_terms.push(tape.scalar_mul(m, 0.5 * w)?);
    }
    let policy = sum_nodes(tape, &policy_terms)?;
    let value = sum_nodes(tape, &value_terms)?;
    Ok((policy, value))
}

fn sum_nodes<E: Element>(tape: &mut Tape<E>, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

/// Symmetric frozen-target MSE pulling a convolution of the observation
/// embedding and the neighbor aggregate towards each other.
pub fn neighbor_reg_loss<E: Element>(
    tape: &mut Tape<E>,
    bound: &Bound,
    enc: &EncodeOut,
) -> Result<NodeId> {
    let agg = enc.aggregate.ok_or_else(|| {
        TrainError::Usage("neighbor regularisation needs a retrieval model".into())
    })?;
    let c = tape.conv2d(enc.o_e, bound.id("reg.conv.w"), bound.id("reg.conv.b"), 3)?;
    let frozen_agg = tape.stop_grad(agg)?;
    let d1 = tape.sub(c, frozen_agg)?;
    let sq1 = tape.mul(d1, d1)?;
    let m1 = tape.mean_all(sq1)?;
    let frozen_c = tape.stop_grad(c)?;
    let d2 = tape.sub(agg, frozen_c)?;
    let sq2 = tape.mul(d2, d2)?;
    let m2 = tape.mean_all(sq2)?;
    Ok(tape.add(m1, m2)?)
}

/// Assemble the full differentiated loss. `reg` is the raw regularisation
/// scalar (weighted by lambda inside `total`); pass `None` when disabled.
pub fn total_loss<E: Element>(
    tape: &mut Tape<E>,
    out: &ModelOutput,
    targets: &[TrainingTarget],
    reg: Option<NodeId>,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let (policy, value) = prediction_loss(tape, out, targets, cfg)?;
    let pv = tape.add(policy, value)?;
    let reg = match reg {
        Some(r) => r,
        None => tape.leaf(Tensor::scalar(E::zero()), false)?,
    };
    let weighted = tape.scalar_mul(reg, cfg.lambda_reg)?;
    let total = tape.add(pv, weighted)?;
    Ok(LossNodes {
        total,
        policy,
        value,
        reg,
    })
}

/// alpha * ||theta||^2, the reported weight-decay contribution.
pub fn weight_decay_value<E: Element>(params: &Params<E>, alpha: f64) -> f64 {
    let mut s = 0.0;
    for t in params.values() {
        for &v in t.data() {
            let v = Element::to_f64(v);
            s += v * v;
        }
    }
    alpha * s
}

/// Gradient of the weight-decay term: 2 * alpha * theta per parameter.
pub fn weight_decay_grads<E: Element>(params: &Params<E>, alpha: f64) -> Params<E> {
    let c = E::from_f64(2.0 * alpha);
    params
        .iter()
        .map(|(n, t)| (n.clone(), t.map(|v| v * c)))
        .collect()
}

/// Per example: draw M ~ Uniform{0..N} and mask out M uniformly chosen
/// neighbors. Only flips flags true -> false.
pub fn neighbor_dropout(batch: &mut TrainBatch, rng: &mut ChaCha8Rng) {
    for mask in &mut batch.masks {
        let n = mask.len();
        let m = rng.gen_range(0..=n);
        if m == 0 {
            continue;
        }
        for i in sample(rng, n, m) {
            mask[i] = false;
        }
    }
}

/// Per example: draw M as in dropout and replace M chosen neighbor records
/// with records sampled from random batch rows (possibly the same row).
pub fn neighbor_randomisation(batch: &mut TrainBatch, rng: &mut ChaCha8Rng) {
    let b = batch.neighbors.len();
    if b < 2 {
        return;
    }
    let n = batch.neighbors[0].len();
    for row in 0..b {
        let m = rng.gen_range(0..=n);
        if m == 0 {
            continue;
        }
        for slot in sample(rng, n, m) {
            let src_row = rng.gen_range(0..b);
            let src_slot = rng.gen_range(0..n);
            let rec = batch.neighbors[src_row][src_slot].clone();
            let valid = batch.masks[src_row][src_slot];
            batch.neighbors[row][slot] = rec;
            batch.masks[row][slot] = valid;
        }
    }
}

/// Full training configuration. Defaults are the desk-scale run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final state is always returned.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            steps: 60_000,
            batch_size: 256,
            base_lr: 1e-3,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
            metrics_path: None,
        }
    }
}

/// Line-oriented `key=value` parsing; blank lines and `#` comments ignored.
pub fn parse_kv(text: &str) -> Result<IndexMap<String, String>> {
    let mut map = IndexMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            TrainError::Config(format!("line {}: expected key=value, got {line:?}", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl TrainConfig {
    /// Apply `key=value` overrides on top of `self`.
    pub fn apply_kv(&mut self, map: &IndexMap<String, String>) -> Result<()> {
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| TrainError::Config(format!("bad value for {k}: {v:?}")))
        }
        for (k, v) in map {
            match k.as_str() {
                "board_size" => self.model.board_size = parse(k, v)?,
                "channels" => self.model.channels = parse(k, v)?,
                "n" | "num_neighbors" => self.model.num_neighbors = parse(k, v)?,
                "k" | "unroll_steps" => {
                    self.model.unroll_steps = parse(k, v)?;
                    self.loss.unroll_steps = self.model.unroll_steps;
                }
                "size_multiplier" => self.model.size_multiplier = parse(k, v)?,
                "baseline" => self.model.baseline_mode = parse(k, v)?,
                "retrieval" => self.model.retrieval_enabled = parse(k, v)?,
                "steps" => self.steps = parse(k, v)?,
                "batch" => self.batch_size = parse(k, v)?,
                "lr" => self.base_lr = parse(k, v)?,
                "alpha" => self.loss.alpha = parse(k, v)?,
                "lambda_reg" => self.loss.lambda_reg = parse(k, v)?,
                "dropout" => self.loss.neighbor_dropout = parse(k, v)?,
                "randomisation" => self.loss.neighbor_randomisation = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "checkpoint_every" => self.checkpoint_every = parse(k, v)?,
                "checkpoint_path" => self.checkpoint_path = Some(PathBuf::from(v)),
                "metrics_path" => self.metrics_path = Some(PathBuf::from(v)),
                other => {
                    return Err(TrainError::Config(format!("unknown config key {other:?}")))
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "board_size={}\nchannels={}\nn={}\nk={}\nsize_multiplier={}\nbaseline={}\nretrieval={}\nsteps={}\nbatch={}\nlr={}\nalpha={}\nlambda_reg={}\ndropout={}\nrandomisation={}\nseed={}\n",
            self.model.board_size,
            self.model.channels,
            self.model.num_neighbors,
            self.model.unroll_steps,
            self.model.size_multiplier,
            self.model.baseline_mode,
            self.model.retrieval_enabled,
            self.steps,
            self.batch_size,
            self.base_lr,
            self.loss.alpha,
            self.loss.lambda_reg,
            self.loss.neighbor_dropout,
            self.loss.neighbor_randomisation,
            self.seed,
        )
    }
}

/// Precomputed neighbor lookups for each training position: N source
/// references with squared distances, nearest first.
pub type NeighborRefs = Vec<Vec<(PositionRef, f32)>>;

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub reg_loss: f64,
    pub lr: f64,
}

pub struct TrainResult {
    pub params: Params<f32>,
    pub opt: AdamState<f32>,
    pub metrics: Vec<StepMetrics>,
}

/// Assemble the mini-batch for the given position indices.
pub fn assemble_batch(
    store: &Store,
    positions: &[PositionRef],
    neighbors: Option<&NeighborRefs>,
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainBatch> {
    let size = cfg.model.board_size;
    let area = size * size;
    let n = cfg.model.num_neighbors;
    let mut obs = Tensor::zeros(&[indices.len(), crate::go::OBS_PLANES, size, size]);
    let mut nb_lists = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    let plane = crate::go::OBS_PLANES * area;
    for (b, &i) in indices.iter().enumerate() {
        let r = positions[i];
        let state = store.state_at(r)?;
        let o = encode_observation(&state);
        obs.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(o.planes.data());
        targets.push(store.training_target(r, cfg.model.unroll_steps)?);
        if cfg.model.retrieval_enabled && !cfg.model.baseline_mode {
            let refs = neighbors
                .ok_or_else(|| {
                    TrainError::Usage("retrieval training needs precomputed neighbors".into())
                })?
                .get(i)
                .ok_or_else(|| {
                    TrainError::Usage(format!("no neighbor list for position index {i}"))
                })?;
            let mut recs = Vec::with_capacity(n);
            let mut mask = Vec::with_capacity(n);
            for &(src, dist) in refs.iter().take(n) {
                let mut rec = store.neighbor_record(src)?;
                rec.distance = dist;
                recs.push(rec);
                mask.push(true);
            }
            while recs.len() < n {
                recs.push(NeighborRecord::zero(size));
                mask.push(false);
            }
            nb_lists.push(recs);
            masks.push(mask);
        } else {
            nb_lists.push(vec![NeighborRecord::zero(size); n]);
            masks.push(vec![true; n]);
        }
    }
    Ok(TrainBatch {
        obs,
        neighbors: nb_lists,
        masks,
        targets,
    })
}

/// One optimization step on an assembled batch. Returns the metrics row.
pub fn train_step(
    model: &AgentModel,
    params: &mut Params<f32>,
    opt: &mut AdamState<f32>,
    batch: &TrainBatch,
    step: usize,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let mut tape: Tape<f32> = Tape::new();
    let bound = model.bind(&mut tape, params, true)?;
    let obs = tape.leaf(batch.obs.clone(), false)?;
    let neighbors = if cfg.model.retrieval_enabled {
        let (nb, mask) = model.stack_neighbors::<f32>(&batch.neighbors, &batch.masks)?;
        let nbid = tape.leaf(nb, false)?;
        Some((nbid, mask))
    } else {
        None
    };
    let k_steps = cfg.model.unroll_steps;
    let actions: Vec<Vec<usize>> = (0..k_steps)
        .map(|k| batch.targets.iter().map(|t| t.actions[k]).collect())
        .collect();
    let (out, enc) = model.unroll(&mut tape, &bound, obs, neighbors, &actions)?;
    let reg = if cfg.model.retrieval_enabled && cfg.loss.lambda_reg > 0.0 {
        Some(neighbor_reg_loss(&mut tape, &bound, &enc)?)
    } else {
        None
    };
    let loss = total_loss(&mut tape, &out, &batch.targets, reg, &cfg.loss)?;
    let grads = tape.backward(loss.total)?;

    let mut grad_map: Params<f32> = IndexMap::new();
    for (name, &id) in bound.iter() {
        grad_map.insert(name.clone(), grads.get(id, params[name.as_str()].shape()));
    }
    let lr = lr_schedule(step as u64, cfg.steps as u64, cfg.base_lr);
    let decay = if cfg.loss.alpha > 0.0 {
        Some(weight_decay_grads(params, cfg.loss.alpha))
    } else {
        None
    };
    let decay_value = weight_decay_value(params, cfg.loss.alpha);
    adam_step(params, &grad_map, opt, lr, decay.as_ref())?;

    Ok(StepMetrics {
        step,
        loss: tape.value(loss.total).item() as f64 + decay_value,
        policy_loss: tape.value(loss.policy).item() as f64,
        value_loss: tape.value(loss.value).item() as f64,
        reg_loss: tape.value(loss.reg).item() as f64,
        lr,
    })
}

/// The full training loop: sample, augment, unroll, loss, Adam with the
/// scheduled learning rate. Deterministic given the seed; the batch order is
/// independent of the retrieval/baseline mode.
pub fn train(
    store: &Store,
    positions: &[PositionRef],
    neighbors: Option<&NeighborRefs>,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if positions.is_empty() {
        return Err(TrainError::Usage("no training positions".into()));
    }
    let model = AgentModel::new(cfg.model.clone());
    let mut params = model.init_params::<f32>(cfg.seed);
    let mut opt = AdamState::new(AdamHyper::default());
    // separate streams so augmentation draws never perturb the data order
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00a5_a5a5_a5a5_a5a5);
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut csv: Option<fs::File> = match &cfg.metrics_path {
        Some(p) => {
            let mut f = fs::File::create(p)?;
            writeln!(f, "step,loss,policy_loss,value_loss,reg_loss,lr")?;
            Some(f)
        }
        None => None,
    };

    for step in 0..cfg.steps {
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| data_rng.gen_range(0..positions.len()))
            .collect();
        let mut batch = assemble_batch(store, positions, neighbors, &indices, cfg)?;
        if cfg.model.retrieval_enabled && !cfg.model.baseline_mode {
            if cfg.loss.neighbor_randomisation {
                neighbor_randomisation(&mut batch, &mut aug_rng);
            }
            if cfg.loss.neighbor_dropout {
                neighbor_dropout(&mut batch, &mut aug_rng);
            }
        }
        let m = train_step(&model, &mut params, &mut opt, &batch, step, cfg)?;
        if let Some(f) = csv.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                m.step, m.loss, m.policy_loss, m.value_loss, m.reg_loss, m.lr
            )?;
        }
        if step % 50 == 0 {
            log::info!("step {} loss {:.4} lr {:.2e}", m.step, m.loss, m.lr);
        }
        metrics.push(m);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(p) = &cfg.checkpoint_path {
                save_checkpoint(p, &params, Some(&opt), &cfg.to_kv())?;
            }
        }
    }
    if let Some(p) = &cfg.checkpoint_path {
        save_checkpoint(p, &params, Some(&opt), &cfg.to_kv())?;
    }
    Ok(TrainResult {
        params,
        opt,
        metrics,
    })
}

/// Precompute the neighbor lookups for every training position: embed each
/// observation and query the index, excluding the position's own half so a
/// query can never retrieve its own trajectory.
pub fn precompute_neighbors(
    store: &Store,
    positions: &[PositionRef],
    embedder: &crate::embedder::Embedder,
    pca: &crate::embedder::PcaProjection,
    index: &crate::ann::RetrievalIndex,
    n: usize,
) -> Result<NeighborRefs> {
    let queries = crate::embedder::embed_refs(store, positions, embedder, pca)
        .map_err(|e| TrainError::Usage(format!("embedding failed: {e}")))?;
    Ok(positions
        .iter()
        .zip(queries)
        .map(|(pos, q)| {
            index.query(
                &q,
                n,
                crate::ann::ExclusionFilter::ExcludeHalf(pos.half_tag),
            )
        })
        .collect())
}

/// Write parameters, optimizer state, and the config text to one checkpoint
/// file.
pub fn save_checkpoint(
    path: &Path,
    params: &Params<f32>,
    opt: Option<&AdamState<f32>>,
    config_kv: &str,
) -> Result<()> {
    let mut tensors = Vec::new();
    tensors.push(NamedTensor::bytes("config", config_kv.as_bytes().to_vec()));
    for (name, t) in params {
        tensors.push(NamedTensor::from_elem(name, t));
    }
    if let Some(opt) = opt {
        tensors.push(NamedTensor::from_elem(
            "adam.step",
            &Tensor::scalar(opt.step as f64),
        ));
        for (name, t) in &opt.m {
            tensors.push(NamedTensor::from_elem(&format!("adam.m/{name}"), t));
        }
        for (name, t) in &opt.v {
            tensors.push(NamedTensor::from_elem(&format!("adam.v/{name}"), t));
        }
    }
    let mut f = fs::File::create(path).map_err(TensorError::Io)?;
    write_tensors(&mut f, &tensors)?;
    Ok(())
}

pub struct Checkpoint {
    pub params: Params<f32>,
    pub opt: Option<AdamState<f32>>,
    pub config_kv: String,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = fs::File::open(path).map_err(TensorError::Io)?;
    let tensors = read_tensors(&mut f)?;
    let mut params: Params<f32> = IndexMap::new();
    let mut opt = AdamState::new(AdamHyper::default());
    let mut has_opt = false;
    let mut config_kv = String::new();
    for nt in tensors {
        if nt.name == "config" {
            if let crate::tensor::TensorValue::Bytes(b) = &nt.value {
                config_kv = String::from_utf8_lossy(b).into_owned();
            }
        } else if nt.name == "adam.step" {
            opt.step = nt.as_elem::<f64>()?.item() as u64;
            has_opt = true;
        } else if let Some(rest) = nt.name.strip_prefix("adam.m/") {
            opt.m.insert(rest.to_string(), nt.as_elem()?);
            has_opt = true;
        } else if let Some(rest) = nt.name.strip_prefix("adam.v/") {
            opt.v.insert(rest.to_string(), nt.as_elem()?);
            has_opt = true;
        } else {
            params.insert(nt.name.clone(), nt.as_elem()?);
        }
    }
    Ok(Checkpoint {
        params,
        opt: if has_opt { Some(opt) } else { None },
        config_kv,
    })
}
