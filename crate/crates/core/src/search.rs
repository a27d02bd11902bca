//! pUCT Monte-Carlo tree search over the learned model. Neighbors are
//! retrieved once per root; inside the tree only the dynamics network runs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use thiserror::Error;

use crate::datastore::NeighborRecord;
use crate::go::{Observation, OBS_PLANES};
use crate::model::{AgentModel, Bound, Params};
use crate::tensor::{NodeId, Tape, TensorError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, SearchError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub n_sims: usize,
    pub c1: f64,
    pub c2: f64,
    /// Dirichlet root noise; enabled for self-play data generation only.
    pub root_noise: bool,
    pub dirichlet_alpha: f64,
    pub noise_fraction: f64,
    /// Min-max normalization of Q values over the tree.
    pub q_normalize: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n_sims: 200,
            c1: 1.25,
            c2: 19652.0,
            root_noise: false,
            dirichlet_alpha: 0.3,
            noise_fraction: 0.25,
            q_normalize: true,
        }
    }
}

/// Opaque reference to a latent state owned by the model backend.
pub type StateHandle = usize;

/// What the search needs from a model: a single root evaluation and
/// action-conditional transitions.
pub trait SearchModel {
    fn num_actions(&self) -> usize;
    /// Encode the root observation (retrieval happens here, exactly once).
    fn root_eval(&mut self) -> Result<(StateHandle, f32, Vec<f32>)>;
    /// One dynamics step plus prediction.
    fn step_eval(&mut self, s: StateHandle, action: usize) -> Result<(StateHandle, f32, Vec<f32>)>;
}

/// Search backend over the real semi-parametric model. One session serves
/// one root position: the encoder (with its neighbor aggregation) runs once,
/// every expansion afterwards reuses the growing tape.
pub struct ModelSession<'a> {
    model: &'a AgentModel,
    tape: Tape<f32>,
    bound: Bound,
    obs: Observation,
    neighbors: Vec<NeighborRecord>,
    mask: Vec<bool>,
    states: Vec<NodeId>,
}

impl<'a> ModelSession<'a> {
    pub fn new(
        model: &'a AgentModel,
        params: &Params<f32>,
        obs: Observation,
        neighbors: Vec<NeighborRecord>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, params, false)?;
        Ok(ModelSession {
            model,
            tape,
            bound,
            obs,
            neighbors,
            mask,
            states: Vec::new(),
        })
    }
}

impl SearchModel for ModelSession<'_> {
    fn num_actions(&self) -> usize {
        self.model.cfg.num_actions()
    }

    fn root_eval(&mut self) -> Result<(StateHandle, f32, Vec<f32>)> {
        let size = self.model.cfg.board_size;
        let obs = self
            .obs
            .planes
            .clone()
            .reshaped(&[1, OBS_PLANES, size, size])?;
        let o = self.tape.leaf(obs, false)?;
        let neighbors = if self.model.cfg.retrieval_enabled {
            let (nb, mask) = self
                .model
                .stack_neighbors::<f32>(&[self.neighbors.clone()], &[self.mask.clone()])?;
            let nbid = self.tape.leaf(nb, false)?;
            Some((nbid, mask))
        } else {
            None
        };
        let enc = self.model.encode(&mut self.tape, &self.bound, o, neighbors)?;
        let (v, p, _) = self.model.predict(&mut self.tape, &self.bound, enc.s)?;
        self.states.push(enc.s);
        Ok((
            self.states.len() - 1,
            self.tape.value(v).item(),
            self.tape.value(p).data().to_vec(),
        ))
    }

    fn step_eval(&mut self, s: StateHandle, action: usize) -> Result<(StateHandle, f32, Vec<f32>)> {
        let state = self.states[s];
        let next = self
            .model
            .dynamics(&mut self.tape, &self.bound, state, &[action])?;
        let (v, p, _) = self.model.predict(&mut self.tape, &self.bound, next)?;
        self.states.push(next);
        Ok((
            self.states.len() - 1,
            self.tape.value(v).item(),
            self.tape.value(p).data().to_vec(),
        ))
    }
}

struct TreeNode {
    state: StateHandle,
    /// Backed-up value sum from this node's to-move perspective.
    value_sum: f64,
    visits: u32,
    priors: Vec<f32>,
    child_visits: Vec<u32>,
    /// Backed-up value sums from the parent's perspective.
    child_value: Vec<f64>,
    child_node: Vec<Option<usize>>,
}

impl TreeNode {
    fn new(state: StateHandle, value: f32, priors: Vec<f32>) -> Self {
        let a = priors.len();
        TreeNode {
            state,
            value_sum: value as f64,
            visits: 1,
            priors,
            child_visits: vec![0; a],
            child_value: vec![0.0; a],
            child_node: vec![None; a],
        }
    }

    fn q_self(&self) -> f64 {
        self.value_sum / self.visits as f64
    }
}

struct MinMax {
    min: f64,
    max: f64,
}

impl MinMax {
    fn new() -> Self {
        MinMax {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }

    fn update(&mut self, q: f64) {
        self.min = self.min.min(q);
        self.max = self.max.max(q);
    }

    fn normalize(&self, q: f64) -> f64 {
        if self.max > self.min {
            (q - self.min) / (self.max - self.min)
        } else {
            q
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub visit_counts: Vec<u32>,
    /// Mean backed-up value at the root (mover's perspective).
    pub root_value: f32,
    /// Visit-count distribution over actions.
    pub pi: Vec<f32>,
    /// Mean child value per root action, from the root mover's perspective;
    /// NaN where unvisited.
    pub root_q: Vec<f32>,
}

/// Full search: the root is evaluated once, then `n_sims` simulations each
/// expand exactly one leaf. Visit conservation: at every node, visits =
/// 1 + sum of child visits; root child visits sum to n_sims.
pub fn run_search<M: SearchModel>(
    model: &mut M,
    legal_mask: &[bool],
    cfg: &SearchConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<SearchResult> {
    if cfg.n_sims == 0 {
        return Err(SearchError::Usage("n_sims must be at least 1".into()));
    }
    let actions = model.num_actions();
    if legal_mask.len() != actions {
        return Err(SearchError::Usage(format!(
            "legal mask length {} != action count {actions}",
            legal_mask.len()
        )));
    }
    if !legal_mask.iter().any(|&m| m) {
        return Err(SearchError::Usage("no legal action".into()));
    }

    let (root_state, root_value, mut priors) = model.root_eval()?;
    // mask illegal root actions and renormalize
    for (p, &ok) in priors.iter_mut().zip(legal_mask) {
        if !ok {
            *p = 0.0;
        }
    }
    let total: f32 = priors.iter().sum();
    if total > 0.0 {
        for p in &mut priors {
            *p /= total;
        }
    } else {
        let n_legal = legal_mask.iter().filter(|&&m| m).count() as f32;
        for (p, &ok) in priors.iter_mut().zip(legal_mask) {
            *p = if ok { 1.0 / n_legal } else { 0.0 };
        }
    }
    if cfg.root_noise {
        let rng = rng.ok_or_else(|| {
            SearchError::Usage("root noise requires a random number generator".into())
        })?;
        apply_dirichlet_noise(&mut priors, legal_mask, cfg, rng);
    }

    let mut tree = vec![TreeNode::new(root_state, root_value, priors)];
    let mut stats = MinMax::new();

    for _ in 0..cfg.n_sims {
        // selection
        let mut path: Vec<(usize, usize)> = Vec::new();
        let mut node = 0usize;
        let (leaf_parent, leaf_action) = loop {
            let action = select_child(&tree[node], cfg, &stats, if node == 0 { Some(legal_mask) } else { None });
            match tree[node].child_node[action] {
                Some(next) => {
                    path.push((node, action));
                    node = next;
                }
                None => break (node, action),
            }
        };
        path.push((leaf_parent, leaf_action));

        // expansion
        let (state, value, priors) = model.step_eval(tree[leaf_parent].state, leaf_action)?;
        tree.push(TreeNode::new(state, value, priors));
        let leaf = tree.len() - 1;
        tree[leaf_parent].child_node[leaf_action] = Some(leaf);

        // backup with sign alternation
        let mut v = value as f64;
        for &(n, a) in path.iter().rev() {
            v = -v;
            tree[n].child_visits[a] += 1;
            tree[n].child_value[a] += v;
            tree[n].visits += 1;
            tree[n].value_sum += v;
            stats.update(tree[n].child_value[a] / tree[n].child_visits[a] as f64);
        }
    }

    debug_assert!(check_conservation(&tree, 0));

    let root = &tree[0];
    let visit_counts = root.child_visits.clone();
    let total_visits: u32 = visit_counts.iter().sum();
    debug_assert_eq!(total_visits as usize, cfg.n_sims);
    let pi = visit_counts
        .iter()
        .map(|&c| c as f32 / total_visits as f32)
        .collect();
    let root_q = root
        .child_visits
        .iter()
        .zip(&root.child_value)
        .map(|(&n, &w)| {
            if n > 0 {
                (w / n as f64) as f32
            } else {
                f32::NAN
            }
        })
        .collect();
    Ok(SearchResult {
        visit_counts,
        root_value: root.q_self() as f32,
        pi,
        root_q,
    })
}

fn check_conservation(tree: &[TreeNode], node: usize) -> bool {
    let n = &tree[node];
    let child_sum: u32 = n.child_visits.iter().sum();
    n.visits == 1 + child_sum
        && n.child_node
            .iter()
            .flatten()
            .all(|&c| check_conservation(tree, c))
}

fn apply_dirichlet_noise(
    priors: &mut [f32],
    legal_mask: &[bool],
    cfg: &SearchConfig,
    rng: &mut ChaCha8Rng,
) {
    let legal: Vec<usize> = legal_mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if legal.len() < 2 {
        return;
    }
    let dir = Dirichlet::new(&vec![cfg.dirichlet_alpha; legal.len()]).expect("valid alpha");
    let noise = dir.sample(rng);
    let f = cfg.noise_fraction as f32;
    for (i, &a) in legal.iter().enumerate() {
        priors[a] = (1.0 - f) * priors[a] + f * noise[i] as f32;
    }
}

fn select_child(
    node: &TreeNode,
    cfg: &SearchConfig,
    stats: &MinMax,
    legal_mask: Option<&[bool]>,
) -> usize {
    let parent_visits = node.visits as f64;
    let parent_q = node.q_self();
    let explore_scale =
        parent_visits.sqrt() * (cfg.c1 + ((parent_visits + cfg.c2 + 1.0) / cfg.c2).ln());
    let mut best = (f64::NEG_INFINITY, 0usize);
    for a in 0..node.priors.len() {
        if let Some(mask) = legal_mask {
            if !mask[a] {
                continue;
            }
        }
        let n = node.child_visits[a] as f64;
        let q = if node.child_visits[a] > 0 {
            node.child_value[a] / n
        } else {
            parent_q
        };
        let q = if cfg.q_normalize { stats.normalize(q) } else { q };
        let u = node.priors[a] as f64 * explore_scale / (1.0 + n);
        let score = q + u;
        if score > best.0 {
            best = (score, a);
        }
    }
    best.1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionSelection {
    MaxVisits,
    Proportional { temperature: f64 },
}

/// Pick an action from visit counts: argmax with lowest-index tie-break, or
/// sampling proportional to N^(1/temperature).
pub fn select_action(
    counts: &[u32],
    mode: ActionSelection,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<usize> {
    if counts.is_empty() {
        return Err(SearchError::Usage("empty visit counts".into()));
    }
    match mode {
        ActionSelection::MaxVisits => {
            let mut best = 0usize;
            for (i, &c) in counts.iter().enumerate() {
                if c > counts[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        ActionSelection::Proportional { temperature } => {
            if temperature <= 0.0 {
                return select_action(counts, ActionSelection::MaxVisits, None);
            }
            let rng = rng.ok_or_else(|| {
                SearchError::Usage("proportional selection requires an rng".into())
            })?;
            let weights: Vec<f64> = counts
                .iter()
                .map(|&c| (c as f64).powf(1.0 / temperature))
                .collect();
            let total: f64 = weights.iter().sum();
            if total == 0.0 {
                return Err(SearchError::Usage("all visit counts zero".into()));
            }
            let mut t = rng.gen::<f64>() * total;
            for (i, &w) in weights.iter().enumerate() {
                t -= w;
                if t <= 0.0 {
                    return Ok(i);
                }
            }
            Ok(weights.len() - 1)
        }
    }
}
