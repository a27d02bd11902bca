//! The frozen key/query function: a pretrained non-retrieval model tapped at
//! an internal residual block, mean-pooled per channel and compressed with
//! PCA. Keys and queries share this single code path.

use std::fs;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::datastore::{PositionRef, Store, StoreError};
use crate::go::{encode_observation, Observation, OBS_PLANES};
use crate::model::{AgentModel, ModelConfig, Params};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::trainer::{train, TrainConfig, TrainError, TrainResult};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("pca file format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

/// Default tap: output of the 6th main residual block.
pub const DEFAULT_TAP_BLOCK: usize = 6;

/// Model shape used for embedder pretraining: no neighbor pathway, 8 main
/// residual blocks, 3 per transition.
pub fn embedder_model_config(board_size: usize, channels: usize) -> ModelConfig {
    ModelConfig {
        board_size,
        channels,
        m_root: 8,
        m_tran: 3,
        retrieval_enabled: false,
        ..ModelConfig::default()
    }
}

/// Pretrained network plus the tap choice.
pub struct Embedder {
    pub model: AgentModel,
    pub params: Params<f32>,
    /// 1-based index into the main residual blocks.
    pub tap_block: usize,
}

impl Embedder {
    pub fn new(cfg: ModelConfig, params: Params<f32>, tap_block: usize) -> Result<Self> {
        if cfg.retrieval_enabled {
            return Err(EmbedError::Usage(
                "embedder network must not have a retrieval pathway".into(),
            ));
        }
        let depth = cfg.effective().m_root;
        if tap_block == 0 || tap_block > depth {
            return Err(EmbedError::Usage(format!(
                "tap block {tap_block} outside network depth {depth}"
            )));
        }
        Ok(Embedder {
            model: AgentModel::new(cfg),
            params,
            tap_block,
        })
    }

    /// Dimension of the pre-embedding (the tap's channel count).
    pub fn pre_dim(&self) -> usize {
        self.model.cfg.effective().channels
    }

    /// Tap the network and mean-pool spatially: one vector of channel means
    /// per observation.
    pub fn pre_embed_batch(&self, obs: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
        let shape = obs.shape().to_vec();
        if shape.len() != 4 || shape[1] != OBS_PLANES {
            return Err(EmbedError::Usage(format!(
                "expected [B, {OBS_PLANES}, H, W] observations, got {shape:?}"
            )));
        }
        let mut tape: Tape<f32> = Tape::new();
        let bound = self.model.bind(&mut tape, &self.params, false)?;
        let o = tape.leaf(obs.clone(), false)?;
        let enc = self.model.encode(&mut tape, &bound, o, None)?;
        let tap = enc.root_taps[self.tap_block - 1];
        let t = tape.value(tap);
        let ts = t.shape();
        let (b, c, spatial) = (ts[0], ts[1], ts[2] * ts[3]);
        let data = t.data();
        let mut out = Vec::with_capacity(b);
        for bi in 0..b {
            let mut v = Vec::with_capacity(c);
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                let sum: f32 = data[base..base + spatial].iter().sum();
                v.push(sum / spatial as f32);
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn pre_embed(&self, obs: &Observation) -> Result<Vec<f32>> {
        let size = obs.board_size();
        let batch = obs
            .planes
            .clone()
            .reshaped(&[1, OBS_PLANES, size, size])?;
        Ok(self.pre_embed_batch(&batch)?.remove(0))
    }
}

/// Train the embedder network from scratch; thin wrapper enforcing the
/// non-retrieval shape.
pub fn pretrain(
    store: &Store,
    positions: &[PositionRef],
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    if cfg.model.retrieval_enabled {
        return Err(EmbedError::Usage(
            "pretraining config must disable retrieval".into(),
        ));
    }
    Ok(train(store, positions, None, cfg)?)
}

/// Mean and orthonormal basis of a fitted PCA.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjection {
    mean: Vec<f32>,
    /// `d` columns, each of length `dim`, eigenvalue-descending.
    basis: Vec<Vec<f32>>,
}

impl PcaProjection {
    /// Zero-mean identity projection; passes pre-embeddings through
    /// unchanged.
    pub fn identity(dim: usize) -> PcaProjection {
        let mut basis = vec![vec![0.0f32; dim]; dim];
        for (i, col) in basis.iter_mut().enumerate() {
            col[i] = 1.0;
        }
        PcaProjection {
            mean: vec![0.0; dim],
            basis,
        }
    }

    pub fn d(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn basis(&self) -> &[Vec<f32>] {
        &self.basis
    }

    /// (x - mu) V
    pub fn project(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.dim() {
            return Err(EmbedError::Usage(format!(
                "vector length {} != pca dim {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(self
            .basis
            .iter()
            .map(|col| {
                col.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(&v, (&xi, &mi))| v * (xi - mi))
                    .sum()
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"RRPC1");
        out.extend_from_slice(&(self.d() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for &m in &self.mean {
            out.extend_from_slice(&m.to_le_bytes());
        }
        for col in &self.basis {
            for &v in col {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 5];
        f.read_exact(&mut magic)?;
        if &magic != b"RRPC1" {
            return Err(EmbedError::Format(format!(
                "bad magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let mut u64buf = [0u8; 8];
        f.read_exact(&mut u64buf)?;
        let d = u64::from_le_bytes(u64buf) as usize;
        f.read_exact(&mut u64buf)?;
        let dim = u64::from_le_bytes(u64buf) as usize;
        let read_f32s = |n: usize, f: &mut fs::File| -> Result<Vec<f32>> {
            let mut buf = vec![0u8; n * 4];
            f.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mean = read_f32s(dim, &mut f)?;
        let mut basis = Vec::with_capacity(d);
        for _ in 0..d {
            basis.push(read_f32s(dim, &mut f)?);
        }
        let mut rest = Vec::new();
        f.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(EmbedError::Format(format!(
                "{} trailing bytes",
                rest.len()
            )));
        }
        Ok(PcaProjection { mean, basis })
    }
}

/// Fit PCA on pre-embedding samples: sample mean, top-d eigenvectors of the
/// sample covariance in descending eigenvalue order, sign-canonicalized so
/// each column's largest-magnitude component is positive. Rank deficiency
/// below `d` pads with an arbitrary orthonormal completion and warns.
pub fn fit_pca(samples: &[Vec<f32>], d: usize) -> Result<PcaProjection> {
    if samples.len() <= d {
        return Err(EmbedError::Usage(format!(
            "need more than {d} samples, got {}",
            samples.len()
        )));
    }
    let dim = samples[0].len();
    if d == 0 || d > dim {
        return Err(EmbedError::Usage(format!(
            "d = {d} outside 1..={dim}"
        )));
    }
    if samples.iter().any(|s| s.len() != dim) {
        return Err(EmbedError::Usage("ragged sample list".into()));
    }
    let n = samples.len();
    let mut mean = vec![0.0f64; dim];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    let mut centered = vec![0.0f64; dim];
    for s in samples {
        for (c, (&v, &m)) in centered.iter_mut().zip(s.iter().zip(&mean)) {
            *c = v as f64 - m;
        }
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let tol = eig.eigenvalues[order[0]].abs().max(1.0) * 1e-12;
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(d);
    for &i in &order {
        if basis.len() == d {
            break;
        }
        if eig.eigenvalues[i] <= tol {
            break;
        }
        basis.push(eig.eigenvectors.column(i).into_owned());
    }
    if basis.len() < d {
        log::warn!(
            "covariance rank {} below requested d = {d}; padding with an orthonormal completion",
            basis.len()
        );
        // Gram-Schmidt the standard basis against the chosen columns
        for axis in 0..dim {
            if basis.len() == d {
                break;
            }
            let mut v = DVector::<f64>::zeros(dim);
            v[axis] = 1.0;
            for b in &basis {
                let proj = b.dot(&v);
                v -= b * proj;
            }
            let norm = v.norm();
            if norm > 1e-6 {
                basis.push(v / norm);
            }
        }
        if basis.len() < d {
            return Err(EmbedError::Usage(format!(
                "could not complete an orthonormal basis of size {d}"
            )));
        }
    }
    let basis_f32: Vec<Vec<f32>> = basis
        .into_iter()
        .map(|col| {
            // sign canonicalization: largest-magnitude component positive
            let mut best = 0;
            for i in 1..dim {
                if col[i].abs() > col[best].abs() {
                    best = i;
                }
            }
            let flip = if col[best] < 0.0 { -1.0 } else { 1.0 };
            col.iter().map(|&v| (v * flip) as f32).collect()
        })
        .collect();
    Ok(PcaProjection {
        mean: mean.into_iter().map(|m| m as f32).collect(),
        basis: basis_f32,
    })
}

/// g(o) = (pre_embed(o) - mu) V, the key/query vector.
pub fn embed(embedder: &Embedder, pca: &PcaProjection, obs: &Observation) -> Result<Vec<f32>> {
    pca.project(&embedder.pre_embed(obs)?)
}

/// Embed stored positions in chunks; used for both index keys and training
/// queries.
pub fn embed_refs(
    store: &Store,
    refs: &[PositionRef],
    embedder: &Embedder,
    pca: &PcaProjection,
) -> Result<Vec<Vec<f32>>> {
    const CHUNK: usize = 256;
    let size = embedder.model.cfg.board_size;
    let plane = OBS_PLANES * size * size;
    let mut out = Vec::with_capacity(refs.len());
    for chunk in refs.chunks(CHUNK) {
        let mut obs = Tensor::zeros(&[chunk.len(), OBS_PLANES, size, size]);
        for (b, &r) in chunk.iter().enumerate() {
            let state = store.state_at(r)?;
            let o = encode_observation(&state);
            obs.data_mut()[b * plane..(b + 1) * plane].copy_from_slice(o.planes.data());
        }
        for pre in embedder.pre_embed_batch(&obs)? {
            out.push(pca.project(&pre)?);
        }
    }
    Ok(out)
}
