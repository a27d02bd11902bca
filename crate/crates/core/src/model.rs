//! The semi-parametric action-conditional model: an encoder with
//! permutation-invariant neighbor aggregation, a recurrent action-conditioned
//! dynamics network, and value/policy heads producing K+1 predictions.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datastore::{NeighborRecord, NEIGHBOR_PLANES};
use crate::go::OBS_PLANES;
use crate::tensor::{Element, NodeId, Result, Tape, Tensor, TensorError};

pub type Params<E> = IndexMap<String, Tensor<E>>;

/// Structural configuration. Defaults are the desk-scale setup; block
/// counts and channels scale together through `size_multiplier`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub board_size: usize,
    pub channels: usize,
    pub m_enc: usize,
    pub m_nn: usize,
    pub m_root: usize,
    pub m_tran: usize,
    /// Unroll length K.
    pub unroll_steps: usize,
    /// Neighbors N fed to the encoder.
    pub num_neighbors: usize,
    /// Zero every neighbor plane tensor (mask all-true): the
    /// parameter-matched non-retrieval control.
    pub baseline_mode: bool,
    /// When false the neighbor pathway does not exist at all (used by the
    /// embedder pretraining network).
    pub retrieval_enabled: bool,
    /// One of {0.5, 1, 2, 4}.
    pub size_multiplier: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            board_size: 9,
            channels: 32,
            m_enc: 2,
            m_nn: 3,
            m_root: 6,
            m_tran: 3,
            unroll_steps: 5,
            num_neighbors: 10,
            baseline_mode: false,
            retrieval_enabled: true,
            size_multiplier: 1.0,
        }
    }
}

/// Block counts and channels after applying the size multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EffectiveSize {
    pub channels: usize,
    pub reduced: usize,
    pub m_enc: usize,
    pub m_nn: usize,
    pub m_root: usize,
    pub m_tran: usize,
}

impl ModelConfig {
    pub fn area(&self) -> usize {
        self.board_size * self.board_size
    }

    pub fn num_actions(&self) -> usize {
        self.area() + 1
    }

    pub fn effective(&self) -> EffectiveSize {
        let (m_enc, m_nn, m_root, m_tran, channels) = if self.size_multiplier == 0.5 {
            (1, 2, 3, 2, self.channels)
        } else if self.size_multiplier == 2.0 {
            (
                self.m_enc * 2,
                self.m_nn * 2,
                self.m_root * 2,
                self.m_tran * 2,
                self.channels,
            )
        } else if self.size_multiplier == 4.0 {
            (
                self.m_enc * 2,
                self.m_nn * 2,
                self.m_root * 2,
                self.m_tran * 2,
                self.channels * 2,
            )
        } else {
            (self.m_enc, self.m_nn, self.m_root, self.m_tran, self.channels)
        };
        EffectiveSize {
            channels,
            reduced: (channels / 2).max(1),
            m_enc,
            m_nn,
            m_root,
            m_tran,
        }
    }
}

/// Parameter node ids for one tape.
pub struct Bound {
    map: IndexMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.map.iter()
    }
}

/// Result of the encoding stage.
pub struct EncodeOut {
    /// Latent state s_t^0, shape [B, C, H, W].
    pub s: NodeId,
    /// Encoded observation o^e, shape [B, C/2, H, W].
    pub o_e: NodeId,
    /// Normalized neighbor aggregate (zeros when retrieval is disabled).
    pub aggregate: Option<NodeId>,
    /// Output of each root residual block, for embedder taps.
    pub root_taps: Vec<NodeId>,
}

/// Evaluated model output: K+1 value/policy pairs.
pub struct ModelOutput {
    pub value_nodes: Vec<NodeId>,
    pub policy_nodes: Vec<NodeId>,
    pub logit_nodes: Vec<NodeId>,
}

pub struct AgentModel {
    pub cfg: ModelConfig,
}

impl AgentModel {
    pub fn new(cfg: ModelConfig) -> Self {
        AgentModel { cfg }
    }

    /// Seeded parameter initialization: He-normal convolutions and dense
    /// layers, identity layer norms, zero biases.
    pub fn init_params<E: Element>(&self, seed: u64) -> Params<E> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eff = self.cfg.effective();
        let (c, cr) = (eff.channels, eff.reduced);
        let area = self.cfg.area();
        let mut p: Params<E> = IndexMap::new();

        let conv = |p: &mut Params<E>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng| {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            p.insert(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng));
            p.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        };
        let block = |p: &mut Params<E>, prefix: &str, ch: usize, rng: &mut ChaCha8Rng| {
            for half in ["a", "b"] {
                p.insert(format!("{prefix}.ln_{half}.g"), Tensor::filled(&[ch], E::one()));
                p.insert(format!("{prefix}.ln_{half}.b"), Tensor::zeros(&[ch]));
                let std = (2.0 / (ch * 9) as f64).sqrt();
                p.insert(
                    format!("{prefix}.conv_{half}.w"),
                    Tensor::randn(&[ch, ch, 3, 3], std, rng),
                );
                p.insert(format!("{prefix}.conv_{half}.b"), Tensor::zeros(&[ch]));
            }
        };
        let dense = |p: &mut Params<E>, name: &str, fin: usize, fout: usize, rng: &mut ChaCha8Rng| {
            let std = (2.0 / fin as f64).sqrt();
            p.insert(format!("{name}.w"), Tensor::randn(&[fin, fout], std, rng));
            p.insert(format!("{name}.b"), Tensor::zeros(&[fout]));
        };

        conv(&mut p, "enc.conv_in", OBS_PLANES, c, 3, &mut rng);
        for i in 0..eff.m_enc {
            block(&mut p, &format!("enc.block{i}"), c, &mut rng);
        }
        conv(&mut p, "enc.reduce", c, cr, 1, &mut rng);

        if self.cfg.retrieval_enabled {
            conv(&mut p, "nn.conv_in", cr + NEIGHBOR_PLANES, c, 3, &mut rng);
            for i in 0..eff.m_nn {
                block(&mut p, &format!("nn.block{i}"), c, &mut rng);
            }
            conv(&mut p, "root.conv_in", cr + c, c, 3, &mut rng);
            // neighbor-regularisation head: predicts the neighbor aggregate
            // from the observation embedding alone
            conv(&mut p, "reg.conv", cr, c, 3, &mut rng);
        } else {
            conv(&mut p, "root.conv_in", cr, c, 3, &mut rng);
        }
        for i in 0..eff.m_root {
            block(&mut p, &format!("root.block{i}"), c, &mut rng);
        }

        conv(&mut p, "dyn.conv_in", c + 2, c, 3, &mut rng);
        for i in 0..eff.m_tran {
            block(&mut p, &format!("dyn.block{i}"), c, &mut rng);
        }

        conv(&mut p, "value.conv", c, 1, 1, &mut rng);
        dense(&mut p, "value.fc1", area, c, &mut rng);
        dense(&mut p, "value.fc2", c, 1, &mut rng);
        conv(&mut p, "policy.conv", c, 2, 1, &mut rng);
        dense(&mut p, "policy.fc", 2 * area, self.cfg.num_actions(), &mut rng);
        p
    }

    /// Insert every parameter into the tape as a leaf.
    pub fn bind<E: Element>(
        &self,
        tape: &mut Tape<E>,
        params: &Params<E>,
        track_grad: bool,
    ) -> Result<Bound> {
        let mut map = IndexMap::new();
        for (name, t) in params {
            map.insert(name.clone(), tape.leaf(t.clone(), track_grad)?);
        }
        Ok(Bound { map })
    }

    fn res_block<E: Element>(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        prefix: &str,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        for half in ["a", "b"] {
            h = tape.layer_norm_spatial(
                h,
                bound.id(&format!("{prefix}.ln_{half}.g")),
                bound.id(&format!("{prefix}.ln_{half}.b")),
            )?;
            h = tape.relu(h)?;
            h = tape.conv2d(
                h,
                bound.id(&format!("{prefix}.conv_{half}.w")),
                bound.id(&format!("{prefix}.conv_{half}.b")),
                3,
            )?;
        }
        tape.add(x, h)
    }

    fn conv_in<E: Element>(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        name: &str,
        x: NodeId,
        k: usize,
    ) -> Result<NodeId> {
        tape.conv2d(
            x,
            bound.id(&format!("{name}.w")),
            bound.id(&format!("{name}.b")),
            k,
        )
    }

    /// Encoding stage f_theta. `obs` is [B, 5, H, W]; `neighbors` is
    /// [B*N, 18, H, W] with a per-row mask. In baseline mode the neighbor
    /// planes are zeroed and the mask forced all-true, preserving parameter
    /// count while removing the information.
    pub fn encode<E: Element>(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        obs: NodeId,
        neighbors: Option<(NodeId, Vec<bool>)>,
    ) -> Result<EncodeOut> {
        let eff = self.cfg.effective();
        let batch = tape.shape(obs)[0];
        let n = self.cfg.num_neighbors;

        let mut h = self.conv_in(tape, bound, "enc.conv_in", obs, 3)?;
        for i in 0..eff.m_enc {
            h = self.res_block(tape, bound, &format!("enc.block{i}"), h)?;
        }
        let o_e = self.conv_in(tape, bound, "enc.reduce", h, 1)?;

        let (root_in, aggregate) = if self.cfg.retrieval_enabled {
            let (nb, mask) = neighbors.ok_or_else(|| {
                TensorError::Usage("retrieval model requires neighbor input".into())
            })?;
            let ns = tape.shape(nb).to_vec();
            if ns[0] != batch * n || ns[1] != NEIGHBOR_PLANES {
                return Err(TensorError::Shape {
                    context: "encode".into(),
                    detail: format!("neighbors {:?}, expected [{}x{}, {}, ..]", ns, batch, n, NEIGHBOR_PLANES),
                });
            }
            if mask.len() != batch * n {
                return Err(TensorError::Usage(format!(
                    "mask length {} != {}",
                    mask.len(),
                    batch * n
                )));
            }
            // each neighbor stream sees the encoded observation concatenated
            // with its raw planes; parameters are shared across streams
            let o_e_rep = replicate_rows(tape, o_e, n)?;
            let tower_in = tape.concat_channels(&[o_e_rep, nb])?;
            let mut e = self.conv_in(tape, bound, "nn.conv_in", tower_in, 3)?;
            for i in 0..eff.m_nn {
                e = self.res_block(tape, bound, &format!("nn.block{i}"), e)?;
            }
            let scale = 1.0 / (n as f64).sqrt();
            let agg = tape.group_sum(e, batch, n, scale, &mask)?;
            (tape.concat_channels(&[o_e, agg])?, Some(agg))
        } else {
            (o_e, None)
        };

        let mut s = self.conv_in(tape, bound, "root.conv_in", root_in, 3)?;
        let mut root_taps = Vec::with_capacity(eff.m_root);
        for i in 0..eff.m_root {
            s = self.res_block(tape, bound, &format!("root.block{i}"), s)?;
            root_taps.push(s);
        }
        Ok(EncodeOut {
            s,
            o_e,
            aggregate,
            root_taps,
        })
    }

    /// One recurrent transition h_theta: concatenate the action planes and
    /// run the shared transition blocks. `actions` holds one flat index per
    /// batch row.
    pub fn dynamics<E: Element>(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        s: NodeId,
        actions: &[usize],
    ) -> Result<NodeId> {
        let eff = self.cfg.effective();
        let batch = tape.shape(s)[0];
        if actions.len() != batch {
            return Err(TensorError::Usage(format!(
                "{} actions for batch {}",
                actions.len(),
                batch
            )));
        }
        let planes = action_planes::<E>(actions, self.cfg.board_size)?;
        let a = tape.leaf(planes, false)?;
        let x = tape.concat_channels(&[s, a])?;
        let mut h = self.conv_in(tape, bound, "dyn.conv_in", x, 3)?;
        for i in 0..eff.m_tran {
            h = self.res_block(tape, bound, &format!("dyn.block{i}"), h)?;
        }
        Ok(h)
    }

    /// Value and policy heads. Returns (value [B], policy [B,A], logits [B,A]).
    pub fn predict<E: Element>(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        s: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let batch = tape.shape(s)[0];
        let area = self.cfg.area();

        let v = self.conv_in(tape, bound, "value.conv", s, 1)?;
        let v = tape.relu(v)?;
        let v = tape.reshape(v, &[batch, area])?;
        let v = tape.dense(v, bound.id("value.fc1.w"), bound.id("value.fc1.b"))?;
        let v = tape.relu(v)?;
        let v = tape.dense(v, bound.id("value.fc2.w"), bound.id("value.fc2.b"))?;
        let v = tape.tanh(v)?;
        let value = tape.reshape(v, &[batch])?;

        let pl = self.conv_in(tape, bound, "policy.conv", s, 1)?;
        let pl = tape.relu(pl)?;
        let pl = tape.reshape(pl, &[batch, 2 * area])?;
        let logits = tape.dense(pl, bound.id("policy.fc.w"), bound.id("policy.fc.b"))?;
        let policy = tape.softmax_rows(logits)?;
        Ok((value, policy, logits))
    }

    /// Full unrolled forward: K+1 value/policy pairs. `actions[k]` holds the
    /// flat action for step k of every batch row; exactly K steps.
    pub fn unroll<E: Element>(
        &self,
        tape: &mut Tape<E>,
        bound: &Bound,
        obs: NodeId,
        neighbors: Option<(NodeId, Vec<bool>)>,
        actions: &[Vec<usize>],
    ) -> Result<(ModelOutput, EncodeOut)> {
        let k_steps = self.cfg.unroll_steps;
        if actions.len() != k_steps {
            return Err(TensorError::Usage(format!(
                "unroll expects {} action steps, got {}",
                k_steps,
                actions.len()
            )));
        }
        let enc = self.encode(tape, bound, obs, neighbors)?;
        let mut values = Vec::with_capacity(k_steps + 1);
        let mut policies = Vec::with_capacity(k_steps + 1);
        let mut logits = Vec::with_capacity(k_steps + 1);
        let (v, p, l) = self.predict(tape, bound, enc.s)?;
        values.push(v);
        policies.push(p);
        logits.push(l);
        let mut s = enc.s;
        for step_actions in actions {
            s = self.dynamics(tape, bound, s, step_actions)?;
            let (v, p, l) = self.predict(tape, bound, s)?;
            values.push(v);
            policies.push(p);
            logits.push(l);
        }
        Ok((
            ModelOutput {
                value_nodes: values,
                policy_nodes: policies,
                logit_nodes: logits,
            },
            enc,
        ))
    }

    /// Neighbor planes ready for [`encode`]: stacks records row-major and
    /// applies baseline zeroing.
    pub fn stack_neighbors<E: Element>(
        &self,
        per_example: &[Vec<NeighborRecord>],
        masks: &[Vec<bool>],
    ) -> Result<(Tensor<E>, Vec<bool>)> {
        let n = self.cfg.num_neighbors;
        let size = self.cfg.board_size;
        let batch = per_example.len();
        let plane = NEIGHBOR_PLANES * size * size;
        let mut out = Tensor::zeros(&[batch * n, NEIGHBOR_PLANES, size, size]);
        let mut mask = vec![true; batch * n];
        if self.cfg.baseline_mode {
            return Ok((out, mask));
        }
        for (b, records) in per_example.iter().enumerate() {
            if records.len() != n {
                return Err(TensorError::Usage(format!(
                    "example {b} has {} neighbors, expected {n} (pad with zero records)",
                    records.len()
                )));
            }
            for (i, rec) in records.iter().enumerate() {
                let row = b * n + i;
                for (dst, &src) in out.data_mut()[row * plane..(row + 1) * plane]
                    .iter_mut()
                    .zip(rec.planes.data())
                {
                    *dst = E::from_f64(src as f64);
                }
                mask[row] = masks[b][i];
            }
        }
        Ok((out, mask))
    }
}

/// Repeat each batch row of a [B, C, H, W] tensor `n` times -> [B*n, C, H, W].
fn replicate_rows<E: Element>(tape: &mut Tape<E>, x: NodeId, n: usize) -> Result<NodeId> {
    // expressed as concat of n reshaped copies along channels, then reshape:
    // [B, C, H, W] -> concat -> [B, n*C, H, W] -> [B*n, C, H, W]
    let shape = tape.shape(x).to_vec();
    let parts = vec![x; n];
    let cat = tape.concat_channels(&parts)?;
    tape.reshape(cat, &[shape[0] * n, shape[1], shape[2], shape[3]])
}

/// Spatial action encoding: plane 0 one-hot at the played point, plane 1 a
/// constant pass indicator.
pub fn action_planes<E: Element>(actions: &[usize], size: usize) -> Result<Tensor<E>> {
    let area = size * size;
    let mut t = Tensor::zeros(&[actions.len(), 2, size, size]);
    for (b, &a) in actions.iter().enumerate() {
        if a < area {
            t.data_mut()[b * 2 * area + a] = E::one();
        } else if a == area {
            for v in &mut t.data_mut()[b * 2 * area + area..(b * 2 + 2) * area] {
                *v = E::one();
            }
        } else {
            return Err(TensorError::Usage(format!(
                "action {a} out of range for board {size}"
            )));
        }
    }
    Ok(t)
}
