//! Persistent store of complete games, position subsampling, and assembly of
//! neighbor records and training targets from stored metadata.
//!
//! Games are assigned whole to one of two halves so that a training query
//! can never retrieve a position from its own trajectory.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::go::{self, Cell, Color, GameState, GoError, Move};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("integrity error in game {game_id}: {detail}")]
    Integrity { game_id: u64, detail: String },
    #[error("duplicate game id {0}")]
    DuplicateId(u64),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("rules error: {0}")]
    Go(#[from] GoError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// A complete recorded game.
#[derive(Debug, Clone, PartialEq)]
pub struct GameRecord {
    pub game_id: u64,
    pub board_size: usize,
    pub komi: f32,
    pub moves: Vec<u16>,
    pub outcome_for_black: i8,
    pub final_board: Vec<Cell>,
}

pub const HALF_A: u8 = 0;
pub const HALF_B: u8 = 1;

/// Identifies one position inside the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PositionRef {
    pub game_id: u64,
    pub move_index: u32,
    pub half_tag: u8,
}

/// Supervision for one position: the next K+1 expert moves (pass-padded past
/// game end) and the outcome from the mover's perspective.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTarget {
    pub actions: Vec<usize>,
    pub return_g: i8,
}

/// Number of next-action planes in a neighbor record.
pub const NEIGHBOR_ACTIONS: usize = 10;
/// Neighbor planes: 5 observation + 10 next actions + 1 outcome + 2 final board.
pub const NEIGHBOR_PLANES: usize = go::OBS_PLANES + NEIGHBOR_ACTIONS + 1 + 2;

/// The auxiliary input for one retrieved neighbor.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborRecord {
    pub planes: Tensor<f32>,
    pub source: PositionRef,
    pub distance: f32,
}

impl NeighborRecord {
    /// All-zero padding record used when retrieval returns fewer than N
    /// neighbors; always paired with a false mask entry.
    pub fn zero(board_size: usize) -> Self {
        NeighborRecord {
            planes: Tensor::zeros(&[NEIGHBOR_PLANES, board_size, board_size]),
            source: PositionRef {
                game_id: u64::MAX,
                move_index: 0,
                half_tag: HALF_A,
            },
            distance: f32::INFINITY,
        }
    }
}

/// In-memory store over an append-only game file.
#[derive(Debug, Clone, Default)]
pub struct Store {
    games: Vec<GameRecord>,
    by_id: HashMap<u64, usize>,
}

fn replay(record: &GameRecord) -> Result<GameState> {
    let mut state = go::new_game(record.board_size, record.komi)?;
    for (i, &flat) in record.moves.iter().enumerate() {
        let mv = Move::from_flat(flat as usize, record.board_size)?;
        state = state.play(mv).map_err(|e| StoreError::Integrity {
            game_id: record.game_id,
            detail: format!("move {i} ({flat}) illegal: {e}"),
        })?;
    }
    Ok(state)
}

/// Replay a game up to (not including) move `t`.
fn replay_to(record: &GameRecord, t: usize) -> Result<GameState> {
    let mut state = go::new_game(record.board_size, record.komi)?;
    for &flat in record.moves.iter().take(t) {
        let mv = Move::from_flat(flat as usize, record.board_size)?;
        state = state.play(mv).map_err(|e| StoreError::Integrity {
            game_id: record.game_id,
            detail: format!("replay: {e}"),
        })?;
    }
    Ok(state)
}

impl Store {
    pub fn new() -> Self {
        Store::default()
    }

    pub fn len(&self) -> usize {
        self.games.len()
    }

    pub fn is_empty(&self) -> bool {
        self.games.is_empty()
    }

    pub fn games(&self) -> &[GameRecord] {
        &self.games
    }

    pub fn get(&self, game_id: u64) -> Result<&GameRecord> {
        self.by_id
            .get(&game_id)
            .map(|&i| &self.games[i])
            .ok_or_else(|| StoreError::Lookup(format!("unknown game id {game_id}")))
    }

    /// Whole-game half assignment: halves are disjoint and cover the store.
    pub fn half_tag(game_id: u64) -> u8 {
        (game_id % 2) as u8
    }

    /// Validate and append games. Each game must replay to its recorded
    /// final board and outcome.
    pub fn ingest(&mut self, games: Vec<GameRecord>) -> Result<()> {
        for g in games {
            if self.by_id.contains_key(&g.game_id) {
                return Err(StoreError::DuplicateId(g.game_id));
            }
            let end = replay(&g)?;
            if end.board() != g.final_board.as_slice() {
                return Err(StoreError::Integrity {
                    game_id: g.game_id,
                    detail: "final board does not match replay".into(),
                });
            }
            let (_, _, outcome) = end.score();
            if outcome != g.outcome_for_black {
                return Err(StoreError::Integrity {
                    game_id: g.game_id,
                    detail: format!(
                        "recorded outcome {} contradicts scored outcome {}",
                        g.outcome_for_black, outcome
                    ),
                });
            }
            self.by_id.insert(g.game_id, self.games.len());
            self.games.push(g);
        }
        Ok(())
    }

    /// Per-position independent Bernoulli(rate) selection, deterministic
    /// given the seed. Positions are visited in store order.
    pub fn subsample(&self, rate: f64, seed: u64) -> Vec<PositionRef> {
        assert!(rate > 0.0 && rate <= 1.0, "rate must be in (0, 1]");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for g in &self.games {
            let half = Self::half_tag(g.game_id);
            for t in 0..g.moves.len() {
                if rng.gen::<f64>() < rate {
                    out.push(PositionRef {
                        game_id: g.game_id,
                        move_index: t as u32,
                        half_tag: half,
                    });
                }
            }
        }
        out
    }

    pub fn state_at(&self, r: PositionRef) -> Result<GameState> {
        let g = self.get(r.game_id)?;
        if r.move_index as usize >= g.moves.len() {
            return Err(StoreError::Lookup(format!(
                "move index {} out of range for game {} ({} moves)",
                r.move_index,
                r.game_id,
                g.moves.len()
            )));
        }
        replay_to(g, r.move_index as usize)
    }

    /// Assemble the neighbor input planes for a stored position: its
    /// observation, one-hot planes for the next 10 actions (all-zero past
    /// game end or for pass), the tiled outcome, and the final board, all
    /// from the perspective of the player to move at the position.
    pub fn neighbor_record(&self, r: PositionRef) -> Result<NeighborRecord> {
        let g = self.get(r.game_id)?.clone();
        let state = self.state_at(r)?;
        let size = g.board_size;
        let area = size * size;
        let mover = state.to_move();
        let obs = go::encode_observation(&state);

        let mut planes = Tensor::zeros(&[NEIGHBOR_PLANES, size, size]);
        planes.data_mut()[..go::OBS_PLANES * area].copy_from_slice(obs.planes.data());

        let t = r.move_index as usize;
        for k in 0..NEIGHBOR_ACTIONS {
            if let Some(&flat) = g.moves.get(t + k) {
                let flat = flat as usize;
                if flat < area {
                    planes.data_mut()[(go::OBS_PLANES + k) * area + flat] = 1.0;
                }
                // pass stays all-zero
            }
        }

        let outcome_for_mover = match mover {
            Color::Black => g.outcome_for_black as f32,
            Color::White => -g.outcome_for_black as f32,
        };
        let off = (go::OBS_PLANES + NEIGHBOR_ACTIONS) * area;
        for v in &mut planes.data_mut()[off..off + area] {
            *v = outcome_for_mover;
        }

        let foff = off + area;
        for i in 0..area {
            if g.final_board[i] == Some(mover) {
                planes.data_mut()[foff + i] = 1.0;
            } else if g.final_board[i].is_some() {
                planes.data_mut()[foff + area + i] = 1.0;
            }
        }

        Ok(NeighborRecord {
            planes,
            source: r,
            distance: 0.0,
        })
    }

    /// Expert actions a_t..a_{t+K} (pass-padded) and the mover-perspective
    /// return.
    pub fn training_target(&self, r: PositionRef, k_steps: usize) -> Result<TrainingTarget> {
        let g = self.get(r.game_id)?;
        let t = r.move_index as usize;
        if t >= g.moves.len() {
            return Err(StoreError::Lookup(format!(
                "move index {t} out of range for game {}",
                r.game_id
            )));
        }
        let size = g.board_size;
        let pass = size * size;
        let actions = (0..=k_steps)
            .map(|k| g.moves.get(t + k).map_or(pass, |&m| m as usize))
            .collect();
        // black moves at even plies in a game with no handicap
        let black_to_move = t % 2 == 0;
        let return_g = if black_to_move {
            g.outcome_for_black
        } else {
            -g.outcome_for_black
        };
        Ok(TrainingTarget { actions, return_g })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_store(&mut f, &self.games)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let games = read_store(&mut f)?;
        let mut store = Store::new();
        // trust-on-load: games were validated at ingest time
        for g in games {
            if store.by_id.insert(g.game_id, store.games.len()).is_some() {
                return Err(StoreError::DuplicateId(g.game_id));
            }
            store.games.push(g);
        }
        Ok(store)
    }
}

const MAGIC: &[u8; 5] = b"RRGO1";
const VERSION: u16 = 1;

fn pack_board(board: &[Cell]) -> Vec<u8> {
    // 2 bits per point: 0 empty, 1 black, 2 white
    let mut out = vec![0u8; board.len().div_ceil(4)];
    for (i, c) in board.iter().enumerate() {
        let v = match c {
            None => 0u8,
            Some(Color::Black) => 1,
            Some(Color::White) => 2,
        };
        out[i / 4] |= v << ((i % 4) * 2);
    }
    out
}

fn unpack_board(bytes: &[u8], area: usize) -> Result<Vec<Cell>> {
    let mut out = Vec::with_capacity(area);
    for i in 0..area {
        let v = (bytes[i / 4] >> ((i % 4) * 2)) & 3;
        out.push(match v {
            0 => None,
            1 => Some(Color::Black),
            2 => Some(Color::White),
            _ => return Err(StoreError::Format(format!("bad packed stone value {v}"))),
        });
    }
    Ok(out)
}

fn write_store<W: Write>(w: &mut W, games: &[GameRecord]) -> Result<()> {
    let (board_size, komi) = match games.first() {
        Some(g) => (g.board_size, g.komi),
        None => (9, 5.5),
    };
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[board_size as u8, (komi * 2.0) as u8])?;
    w.write_all(&(games.len() as u64).to_le_bytes())?;
    for g in games {
        if g.board_size != board_size || g.komi != komi {
            return Err(StoreError::Format(
                "all games in one store must share board size and komi".into(),
            ));
        }
        w.write_all(&g.game_id.to_le_bytes())?;
        w.write_all(&(g.moves.len() as u16).to_le_bytes())?;
        for &m in &g.moves {
            w.write_all(&m.to_le_bytes())?;
        }
        w.write_all(&(g.outcome_for_black as u8).to_le_bytes())?;
        w.write_all(&pack_board(&g.final_board))?;
    }
    Ok(())
}

fn read_store<R: Read>(r: &mut R) -> Result<Vec<GameRecord>> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(StoreError::Format(format!("bad magic {magic:?}")));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    if u16::from_le_bytes(buf2) != VERSION {
        return Err(StoreError::Format("unsupported version".into()));
    }
    r.read_exact(&mut buf2)?;
    let board_size = buf2[0] as usize;
    let komi = buf2[1] as f32 / 2.0;
    let area = board_size * board_size;
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let count = u64::from_le_bytes(buf8);
    let mut games = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut buf8)?;
        let game_id = u64::from_le_bytes(buf8);
        r.read_exact(&mut buf2)?;
        let n_moves = u16::from_le_bytes(buf2) as usize;
        let mut mbuf = vec![0u8; n_moves * 2];
        r.read_exact(&mut mbuf)?;
        let moves = mbuf
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let outcome_for_black = b1[0] as i8;
        let mut packed = vec![0u8; area.div_ceil(4)];
        r.read_exact(&mut packed)?;
        games.push(GameRecord {
            game_id,
            board_size,
            komi,
            moves,
            outcome_for_black,
            final_board: unpack_board(&packed, area)?,
        });
    }
    Ok(games)
}
