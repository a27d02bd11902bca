//! Go rules, Chinese area scoring, and observation encoding for board sizes
//! 3..=19.
//!
//! `GameState` is a value: every operation returns a new state and never
//! mutates its input, so states can be used from any number of workers.
//! Repetition is tracked with 64-bit position hashes over (board, to-move),
//! and a move is illegal if it recreates any earlier configuration.

use std::collections::HashSet;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

pub const MAX_SIZE: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Black,
    White,
}

impl Color {
    pub fn opponent(self) -> Color {
        match self {
            Color::Black => Color::White,
            Color::White => Color::Black,
        }
    }
}

pub type Cell = Option<Color>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Move {
    Point { row: u8, col: u8 },
    Pass,
}

impl Move {
    /// Flat encoding in [0, B*B]; B*B is pass.
    pub fn flat_index(self, size: usize) -> usize {
        match self {
            Move::Point { row, col } => row as usize * size + col as usize,
            Move::Pass => size * size,
        }
    }

    pub fn from_flat(idx: usize, size: usize) -> Result<Move, GoError> {
        if idx > size * size {
            return Err(GoError::Usage(format!(
                "flat index {idx} out of range for board size {size}"
            )));
        }
        if idx == size * size {
            Ok(Move::Pass)
        } else {
            Ok(Move::Point {
                row: (idx / size) as u8,
                col: (idx % size) as u8,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleViolation {
    Occupied,
    Suicide,
    Superko,
    Terminal,
}

impl std::fmt::Display for RuleViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RuleViolation::Occupied => "occupied",
            RuleViolation::Suicide => "suicide",
            RuleViolation::Superko => "superko",
            RuleViolation::Terminal => "terminal",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum GoError {
    #[error("configuration error: board size {0} outside 3..=19")]
    SizeOutOfRange(usize),
    #[error("configuration error: komi {0} is not a half-integer")]
    BadKomi(f32),
    #[error("illegal move: {0}")]
    Illegal(RuleViolation),
    #[error("usage error: {0}")]
    Usage(String),
}

/// Zobrist keys: one per (point, color), plus one for white-to-move.
struct Zobrist {
    point: Vec<[u64; 2]>,
    white_to_move: u64,
}

fn zobrist() -> &'static Zobrist {
    static TABLE: OnceLock<Zobrist> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_90ba_4d);
        let point = (0..MAX_SIZE * MAX_SIZE)
            .map(|_| [rng.gen::<u64>(), rng.gen::<u64>()])
            .collect();
        Zobrist {
            point,
            white_to_move: rng.gen(),
        }
    })
}

fn hash_position(board: &[Cell], to_move: Color) -> u64 {
    let z = zobrist();
    let mut h = 0u64;
    for (i, c) in board.iter().enumerate() {
        match c {
            Some(Color::Black) => h ^= z.point[i][0],
            Some(Color::White) => h ^= z.point[i][1],
            None => {}
        }
    }
    if to_move == Color::White {
        h ^= z.white_to_move;
    }
    h
}

/// Full Go position: board, player to move, repetition history, pass count.
#[derive(Debug, Clone, PartialEq)]
pub struct GameState {
    size: usize,
    komi: f32,
    board: Vec<Cell>,
    prev_board: Vec<Cell>,
    to_move: Color,
    move_history: Vec<Move>,
    position_hashes: HashSet<u64>,
    consecutive_passes: u8,
}

/// Empty board, black to move, zero passes.
pub fn new_game(board_size: usize, komi: f32) -> Result<GameState, GoError> {
    if !(3..=MAX_SIZE).contains(&board_size) {
        return Err(GoError::SizeOutOfRange(board_size));
    }
    let twice = komi * 2.0;
    if twice.fract() != 0.0 || (twice as i64) % 2 == 0 {
        return Err(GoError::BadKomi(komi));
    }
    let board = vec![None; board_size * board_size];
    let mut hashes = HashSet::new();
    hashes.insert(hash_position(&board, Color::Black));
    Ok(GameState {
        size: board_size,
        komi,
        prev_board: board.clone(),
        board,
        to_move: Color::Black,
        move_history: Vec::new(),
        position_hashes: hashes,
        consecutive_passes: 0,
    })
}

impl GameState {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn komi(&self) -> f32 {
        self.komi
    }

    pub fn board(&self) -> &[Cell] {
        &self.board
    }

    pub fn prev_board(&self) -> &[Cell] {
        &self.prev_board
    }

    pub fn to_move(&self) -> Color {
        self.to_move
    }

    pub fn move_history(&self) -> &[Move] {
        &self.move_history
    }

    pub fn consecutive_passes(&self) -> u8 {
        self.consecutive_passes
    }

    pub fn is_terminal(&self) -> bool {
        self.consecutive_passes >= 2
    }

    pub fn num_actions(&self) -> usize {
        self.size * self.size + 1
    }

    fn neighbors(&self, idx: usize) -> impl Iterator<Item = usize> {
        let size = self.size;
        let (r, c) = (idx / size, idx % size);
        let mut out = [usize::MAX; 4];
        let mut n = 0;
        if r > 0 {
            out[n] = idx - size;
            n += 1;
        }
        if r + 1 < size {
            out[n] = idx + size;
            n += 1;
        }
        if c > 0 {
            out[n] = idx - 1;
            n += 1;
        }
        if c + 1 < size {
            out[n] = idx + 1;
            n += 1;
        }
        out.into_iter().take(n)
    }

    /// Collect the group containing `idx` on `board` and report whether it
    /// has at least one liberty.
    fn group_and_liberty(&self, board: &[Cell], idx: usize) -> (Vec<usize>, bool) {
        let color = board[idx];
        debug_assert!(color.is_some());
        let mut visited = vec![false; board.len()];
        let mut stack = vec![idx];
        let mut group = Vec::new();
        let mut has_liberty = false;
        visited[idx] = true;
        while let Some(p) = stack.pop() {
            group.push(p);
            for n in self.neighbors(p) {
                if board[n].is_none() {
                    has_liberty = true;
                } else if board[n] == color && !visited[n] {
                    visited[n] = true;
                    stack.push(n);
                }
            }
        }
        (group, has_liberty)
    }

    /// Resolve a point move on a scratch board: place the stone, remove
    /// captured opponent groups, reject occupied/suicide/superko.
    fn resolve_point(&self, row: u8, col: u8) -> Result<Vec<Cell>, RuleViolation> {
        let size = self.size;
        if row as usize >= size || col as usize >= size {
            return Err(RuleViolation::Occupied); // off-board treated as unplayable
        }
        let idx = row as usize * size + col as usize;
        if self.board[idx].is_some() {
            return Err(RuleViolation::Occupied);
        }
        let mover = self.to_move;
        let mut board = self.board.clone();
        board[idx] = Some(mover);
        // remove opponent groups left without liberties
        let opp = Some(mover.opponent());
        let mut checked = vec![false; board.len()];
        for n in self.neighbors(idx).collect::<Vec<_>>() {
            if board[n] == opp && !checked[n] {
                let (group, alive) = self.group_and_liberty(&board, n);
                for &g in &group {
                    checked[g] = true;
                }
                if !alive {
                    for g in group {
                        board[g] = None;
                    }
                }
            }
        }
        let (_, alive) = self.group_and_liberty(&board, idx);
        if !alive {
            return Err(RuleViolation::Suicide);
        }
        let h = hash_position(&board, mover.opponent());
        if self.position_hashes.contains(&h) {
            return Err(RuleViolation::Superko);
        }
        Ok(board)
    }

    /// All legal moves. Pass is always included.
    pub fn legal_moves(&self) -> Result<Vec<Move>, GoError> {
        if self.is_terminal() {
            return Err(GoError::Usage("legal_moves on a terminal state".into()));
        }
        let mut moves = Vec::with_capacity(self.num_actions());
        for r in 0..self.size {
            for c in 0..self.size {
                if self.resolve_point(r as u8, c as u8).is_ok() {
                    moves.push(Move::Point {
                        row: r as u8,
                        col: c as u8,
                    });
                }
            }
        }
        moves.push(Move::Pass);
        Ok(moves)
    }

    /// Boolean mask over flat action indices [0, B*B].
    pub fn legal_mask(&self) -> Result<Vec<bool>, GoError> {
        let mut mask = vec![false; self.num_actions()];
        for m in self.legal_moves()? {
            mask[m.flat_index(self.size)] = true;
        }
        Ok(mask)
    }

    /// Apply a move, returning the successor state.
    pub fn play(&self, mv: Move) -> Result<GameState, GoError> {
        if self.is_terminal() {
            return Err(GoError::Illegal(RuleViolation::Terminal));
        }
        let mut next = self.clone();
        match mv {
            Move::Pass => {
                next.prev_board = self.board.clone();
                next.consecutive_passes += 1;
            }
            Move::Point { row, col } => {
                let board = self.resolve_point(row, col).map_err(GoError::Illegal)?;
                next.prev_board = self.board.clone();
                next.board = board;
                next.consecutive_passes = 0;
            }
        }
        next.to_move = self.to_move.opponent();
        next.move_history.push(mv);
        next.position_hashes
            .insert(hash_position(&next.board, next.to_move));
        Ok(next)
    }

    /// Chinese area score: stones plus single-color-enclosed empty territory;
    /// komi goes to white. Non-terminal states are scored as they stand
    /// (the harness's early-stop rule forces this).
    pub fn score(&self) -> (f32, f32, i8) {
        let mut black = 0f32;
        let mut white = 0f32;
        let mut visited = vec![false; self.board.len()];
        for i in 0..self.board.len() {
            match self.board[i] {
                Some(Color::Black) => black += 1.0,
                Some(Color::White) => white += 1.0,
                None => {
                    if visited[i] {
                        continue;
                    }
                    // flood-fill the empty region, note bordering colors
                    let mut stack = vec![i];
                    visited[i] = true;
                    let mut region = 0f32;
                    let mut borders_black = false;
                    let mut borders_white = false;
                    while let Some(p) = stack.pop() {
                        region += 1.0;
                        for n in self.neighbors(p) {
                            match self.board[n] {
                                Some(Color::Black) => borders_black = true,
                                Some(Color::White) => borders_white = true,
                                None => {
                                    if !visited[n] {
                                        visited[n] = true;
                                        stack.push(n);
                                    }
                                }
                            }
                        }
                    }
                    if borders_black && !borders_white {
                        black += region;
                    } else if borders_white && !borders_black {
                        white += region;
                    }
                }
            }
        }
        white += self.komi;
        let outcome = if black > white { 1 } else { -1 };
        (black, white, outcome)
    }
}

pub const OBS_PLANES: usize = 5;

/// Canonical feature planes for one position, from the mover's perspective:
/// [mover stones, opponent stones, mover stones at t-1, opponent stones at
/// t-1, 1 if black to move else 0].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub planes: Tensor<f32>,
}

impl Observation {
    pub fn board_size(&self) -> usize {
        self.planes.shape()[1]
    }
}

pub fn encode_observation(state: &GameState) -> Observation {
    let size = state.size();
    let mover = state.to_move();
    let mut planes = Tensor::zeros(&[OBS_PLANES, size, size]);
    let area = size * size;
    {
        let d = planes.data_mut();
        for i in 0..area {
            if state.board()[i] == Some(mover) {
                d[i] = 1.0;
            } else if state.board()[i] == Some(mover.opponent()) {
                d[area + i] = 1.0;
            }
            if state.prev_board()[i] == Some(mover) {
                d[2 * area + i] = 1.0;
            } else if state.prev_board()[i] == Some(mover.opponent()) {
                d[3 * area + i] = 1.0;
            }
        }
        if mover == Color::Black {
            for v in &mut d[4 * area..5 * area] {
                *v = 1.0;
            }
        }
    }
    Observation { planes }
}

/// Encode an arbitrary (board, prev_board, to_move) triple; used when
/// assembling neighbor records from stored games.
pub fn encode_planes(board: &[Cell], prev_board: &[Cell], to_move: Color, size: usize) -> Tensor<f32> {
    let mut planes = Tensor::zeros(&[OBS_PLANES, size, size]);
    let area = size * size;
    let d = planes.data_mut();
    for i in 0..area {
        if board[i] == Some(to_move) {
            d[i] = 1.0;
        } else if board[i].is_some() {
            d[area + i] = 1.0;
        }
        if prev_board[i] == Some(to_move) {
            d[2 * area + i] = 1.0;
        } else if prev_board[i].is_some() {
            d[3 * area + i] = 1.0;
        }
    }
    if to_move == Color::Black {
        for v in &mut d[4 * area..5 * area] {
            *v = 1.0;
        }
    }
    planes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(row: u8, col: u8) -> Move {
        Move::Point { row, col }
    }

    #[test]
    fn new_game_defaults() {
        let g = new_game(9, 5.5).unwrap();
        assert_eq!(g.size(), 9);
        assert_eq!(g.to_move(), Color::Black);
        assert_eq!(g.consecutive_passes(), 0);
        assert!(g.board().iter().all(|c| c.is_none()));

        assert!(new_game(5, 5.5).is_ok());
        assert!(matches!(new_game(2, 5.5), Err(GoError::SizeOutOfRange(2))));
        assert!(matches!(new_game(9, 6.0), Err(GoError::BadKomi(_))));
    }

    #[test]
    fn move_counts_on_empty_boards() {
        assert_eq!(new_game(9, 5.5).unwrap().legal_moves().unwrap().len(), 82);
        assert_eq!(new_game(5, 5.5).unwrap().legal_moves().unwrap().len(), 26);
    }

    #[test]
    fn single_stone_capture() {
        // white stone at (0,0) with black at (0,1); black plays (1,0),
        // capturing.
        let g = new_game(5, 5.5).unwrap();
        let g = g.play(p(0, 1)).unwrap(); // b
        let g = g.play(p(0, 0)).unwrap(); // w
        let g = g.play(p(1, 0)).unwrap(); // b captures
        assert_eq!(g.board()[0], None);
        assert_eq!(g.board()[1], Some(Color::Black));
        assert_eq!(g.board()[5], Some(Color::Black));
    }

    #[test]
    fn two_passes_terminate() {
        let g = new_game(5, 5.5).unwrap();
        let g = g.play(Move::Pass).unwrap();
        assert!(!g.is_terminal());
        let g = g.play(Move::Pass).unwrap();
        assert!(g.is_terminal());
        assert!(matches!(
            g.play(Move::Pass),
            Err(GoError::Illegal(RuleViolation::Terminal))
        ));
        assert!(g.legal_moves().is_err());
    }

    #[test]
    fn occupied_point_rejected() {
        let g = new_game(5, 5.5).unwrap().play(p(2, 2)).unwrap();
        assert!(matches!(
            g.play(p(2, 2)),
            Err(GoError::Illegal(RuleViolation::Occupied))
        ));
    }

    #[test]
    fn suicide_rejected() {
        // black surrounds (0,0); white playing there is suicide.
        let g = new_game(5, 5.5).unwrap();
        let g = g.play(p(0, 1)).unwrap(); // b
        let g = g.play(p(4, 4)).unwrap(); // w elsewhere
        let g = g.play(p(1, 0)).unwrap(); // b
        assert!(matches!(
            g.play(p(0, 0)),
            Err(GoError::Illegal(RuleViolation::Suicide))
        ));
    }

    #[test]
    fn ko_point_excluded_from_legal_moves() {
        // Proper ko: build
        //   . B W .
        //   B W . .          <- (1,2) empty
        //   . B W .
        // with black to move: black plays (1,2)?? capturing W(1,1)? W(1,1)
        // neighbors: (0,1)=B,(1,0)=B,(2,1)=B,(1,2)=B-after-play => captured.
        let g = new_game(5, 5.5).unwrap();
        let g = g.play(p(0, 1)).unwrap(); // B
        let g = g.play(p(0, 2)).unwrap(); // W
        let g = g.play(p(1, 0)).unwrap(); // B
        let g = g.play(p(1, 1)).unwrap(); // W
        let g = g.play(p(2, 1)).unwrap(); // B
        let g = g.play(p(2, 2)).unwrap(); // W
        let g = g.play(p(4, 4)).unwrap(); // B tenuki
        let g = g.play(p(1, 3)).unwrap(); // W: white diamond around (1,2)
        let g = g.play(p(1, 2)).unwrap(); // B captures W(1,1) (in atari)
        assert_eq!(g.board()[1 * 5 + 1], None, "white stone captured");
        // Now white recapturing at (1,1) would recreate the previous
        // position: the ko point must be excluded.
        assert_eq!(g.to_move(), Color::White);
        let r = g.play(p(1, 1));
        assert!(
            matches!(r, Err(GoError::Illegal(RuleViolation::Superko))),
            "ko recapture must be a superko violation, got {r:?}"
        );
        let legal = g.legal_moves().unwrap();
        assert!(!legal.contains(&p(1, 1)));
    }

    #[test]
    fn score_empty_board() {
        let g = new_game(9, 5.5).unwrap();
        let g = g.play(Move::Pass).unwrap().play(Move::Pass).unwrap();
        let (b, w, o) = g.score();
        assert_eq!((b, w, o), (0.0, 5.5, -1));
    }

    #[test]
    fn score_full_black_board() {
        // all-black 5x5 is unreachable by play; score a constructed state by
        // walking moves with white passing. Black cannot fill the last
        // liberty of its own group, so fill all but one point and count
        // territory.
        let mut g = new_game(5, 5.5).unwrap();
        for r in 0..5u8 {
            for c in 0..5u8 {
                if (r, c) == (4, 4) {
                    continue;
                }
                g = g.play(p(r, c)).unwrap();
                g = g.play(Move::Pass).unwrap();
            }
        }
        let (b, w, o) = g.score();
        assert_eq!(b, 25.0); // 24 stones + 1 enclosed point
        assert_eq!(w, 5.5);
        assert_eq!(o, 1);
    }

    #[test]
    fn replay_reproduces_state() {
        let mut g = new_game(5, 5.5).unwrap();
        let moves = [p(2, 2), p(1, 1), p(3, 3), Move::Pass, p(1, 3)];
        for m in moves {
            g = g.play(m).unwrap();
        }
        let mut replay = new_game(5, 5.5).unwrap();
        for &m in g.move_history() {
            replay = replay.play(m).unwrap();
        }
        assert_eq!(g, replay);
    }

    #[test]
    fn observation_perspective() {
        let g = new_game(5, 5.5).unwrap();
        let obs = encode_observation(&g);
        let area = 25;
        assert!(obs.planes.data()[..4 * area].iter().all(|&v| v == 0.0));
        assert!(obs.planes.data()[4 * area..].iter().all(|&v| v == 1.0));

        // after a black pass, white to move: color plane all zeros
        let g2 = g.play(Move::Pass).unwrap();
        let obs2 = encode_observation(&g2);
        assert!(obs2.planes.data()[4 * area..].iter().all(|&v| v == 0.0));

        // after (b: 2,2), (w: 3,3): mover is black again
        let g3 = g.play(p(2, 2)).unwrap().play(p(3, 3)).unwrap();
        let obs3 = encode_observation(&g3);
        let d = obs3.planes.data();
        let idx = 2 * 5 + 2;
        let widx = 3 * 5 + 3;
        assert_eq!(d[idx], 1.0, "mover stone in plane 0");
        assert_eq!(d[area + widx], 1.0, "opponent stone in plane 1");
        assert_eq!(d.iter().take(area).filter(|&&v| v == 1.0).count(), 1);
        // previous position (after black 2,2 only): black stone was there,
        // and black is the mover again, so plane 2 holds it.
        assert_eq!(d[2 * area + idx], 1.0);
        assert!(d[3 * area..4 * area].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pass_always_legal_and_bounded() {
        let mut g = new_game(3, 5.5).unwrap();
        for _ in 0..6 {
            let legal = g.legal_moves().unwrap();
            assert!(legal.contains(&Move::Pass));
            assert!(legal.len() <= 10);
            let mv = legal[0];
            g = g.play(mv).unwrap();
            if g.is_terminal() {
                break;
            }
        }
    }
}
