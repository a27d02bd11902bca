//! Independent brute-force Go oracle used to cross-check the rules engine.
//!
//! Deliberately implemented with different machinery: liberties by fixpoint
//! marking instead of depth-first search, repetition by comparing full
//! (board, to-move) snapshots instead of hashes, territory by union-find.

use retrigo::go::{Cell, Color, Move};

#[derive(Clone)]
pub struct OracleState {
    pub size: usize,
    pub komi: f32,
    pub board: Vec<Cell>,
    pub to_move: Color,
    pub passes: u8,
    /// Every (board, to-move) configuration seen since the start.
    pub history: Vec<(Vec<Cell>, Color)>,
}

impl OracleState {
    pub fn new(size: usize, komi: f32) -> OracleState {
        let board = vec![None; size * size];
        OracleState {
            size,
            komi,
            history: vec![(board.clone(), Color::Black)],
            board,
            to_move: Color::Black,
            passes: 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.passes >= 2
    }

    /// Stones whose group has at least one liberty, by fixpoint propagation:
    /// seed stones adjacent to an empty point, then spread the mark through
    /// same-colored neighbors until nothing changes.
    fn alive_stones(board: &[Cell], size: usize) -> Vec<bool> {
        let mut alive = vec![false; board.len()];
        for i in 0..board.len() {
            if board[i].is_some() && neighbors(i, size).iter().any(|&n| board[n].is_none()) {
                alive[i] = true;
            }
        }
        loop {
            let mut changed = false;
            for i in 0..board.len() {
                if board[i].is_none() || alive[i] {
                    continue;
                }
                if neighbors(i, size)
                    .iter()
                    .any(|&n| board[n] == board[i] && alive[n])
                {
                    alive[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        alive
    }

    /// Board after placing a stone for `to_move` at `idx`, or None when the
    /// point is occupied or the move is suicide. Superko is not checked here.
    fn apply_point(&self, idx: usize) -> Option<Vec<Cell>> {
        if self.board[idx].is_some() {
            return None;
        }
        let mut board = self.board.clone();
        board[idx] = Some(self.to_move);
        let alive = Self::alive_stones(&board, self.size);
        let opp = Some(self.to_move.opponent());
        for i in 0..board.len() {
            if board[i] == opp && !alive[i] {
                board[i] = None;
            }
        }
        // recompute after captures: the new stone may have gained liberties
        let alive = Self::alive_stones(&board, self.size);
        if !alive[idx] {
            return None; // suicide
        }
        Some(board)
    }

    pub fn is_legal(&self, mv: Move) -> bool {
        if self.is_terminal() {
            return false;
        }
        match mv {
            Move::Pass => true,
            Move::Point { row, col } => {
                if row as usize >= self.size || col as usize >= self.size {
                    return false;
                }
                let idx = row as usize * self.size + col as usize;
                match self.apply_point(idx) {
                    None => false,
                    Some(board) => {
                        let next = (board, self.to_move.opponent());
                        !self.history.contains(&next)
                    }
                }
            }
        }
    }

    /// Apply a legal move; panics on illegal input (callers check first).
    pub fn play(&self, mv: Move) -> OracleState {
        assert!(self.is_legal(mv), "oracle asked to play illegal {mv:?}");
        let mut next = self.clone();
        match mv {
            Move::Pass => next.passes += 1,
            Move::Point { row, col } => {
                let idx = row as usize * self.size + col as usize;
                next.board = self.apply_point(idx).expect("checked legal");
                next.passes = 0;
            }
        }
        next.to_move = self.to_move.opponent();
        next.history.push((next.board.clone(), next.to_move));
        next
    }

    pub fn legal_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.size * self.size + 1);
        for r in 0..self.size {
            for c in 0..self.size {
                mask.push(self.is_legal(Move::Point {
                    row: r as u8,
                    col: c as u8,
                }));
            }
        }
        mask.push(true); // pass
        mask
    }

    /// Chinese area score via union-find region labeling of empty points.
    pub fn score(&self) -> (f32, f32, i8) {
        let n = self.board.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for i in 0..n {
            if self.board[i].is_none() {
                for &j in &neighbors(i, self.size) {
                    if self.board[j].is_none() {
                        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                        parent[a] = b;
                    }
                }
            }
        }
        // per empty region: which colors border it
        let mut black_border = vec![false; n];
        let mut white_border = vec![false; n];
        for i in 0..n {
            if self.board[i].is_none() {
                let root = find(&mut parent, i);
                for &j in &neighbors(i, self.size) {
                    match self.board[j] {
                        Some(Color::Black) => black_border[root] = true,
                        Some(Color::White) => white_border[root] = true,
                        None => {}
                    }
                }
            }
        }
        let mut black = 0f32;
        let mut white = 0f32;
        for i in 0..n {
            match self.board[i] {
                Some(Color::Black) => black += 1.0,
                Some(Color::White) => white += 1.0,
                None => {
                    let root = find(&mut parent, i);
                    if black_border[root] && !white_border[root] {
                        black += 1.0;
                    } else if white_border[root] && !black_border[root] {
                        white += 1.0;
                    }
                }
            }
        }
        white += self.komi;
        (black, white, if black > white { 1 } else { -1 })
    }
}

pub fn assert_agreement(
    engine: &retrigo::go::GameState,
    oracle: &OracleState,
    context: &str,
) {
    assert_eq!(
        engine.is_terminal(),
        oracle.is_terminal(),
        "terminal disagreement at {context}"
    );
    if !engine.is_terminal() {
        let mask = engine.legal_mask().unwrap();
        let oracle_mask = oracle.legal_mask();
        assert_eq!(mask, oracle_mask, "legal mask disagreement at {context}");
    }
    let (b, w, o) = engine.score();
    let (ob, ow, oo) = oracle.score();
    assert_eq!((b, w, o), (ob, ow, oo), "score disagreement at {context}");
}

fn explore(
    engine: &retrigo::go::GameState,
    oracle: &OracleState,
    depth: usize,
    path: &mut Vec<Move>,
) {
    assert_agreement(engine, oracle, &format!("path {path:?}"));
    if depth == 0 || engine.is_terminal() {
        return;
    }
    for mv in engine.legal_moves().unwrap() {
        path.push(mv);
        let next_engine = engine.play(mv).unwrap();
        let next_oracle = oracle.play(mv);
        explore(&next_engine, &next_oracle, depth - 1, path);
        path.pop();
    }
}

/// Engine vs oracle over every 3x3 move sequence up to `depth` plies.
pub fn run_exhaustive_3x3(depth: usize) {
    let engine = retrigo::go::new_game(3, 4.5).unwrap();
    let oracle = OracleState::new(3, 4.5);
    explore(&engine, &oracle, depth, &mut Vec::new());
}

/// Engine vs oracle over `n` random 5x5 playouts (move-by-move agreement of
/// legality, terminality, and scoring).
pub fn run_random_playouts(n: usize, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for playout in 0..n {
        let mut engine = retrigo::go::new_game(5, 4.5).unwrap();
        let mut oracle = OracleState::new(5, 4.5);
        let mut moves = 0usize;
        while !engine.is_terminal() && moves < 60 {
            assert_agreement(&engine, &oracle, &format!("playout {playout} move {moves}"));
            let legal = engine.legal_moves().unwrap();
            let point_moves: Vec<Move> = legal
                .iter()
                .copied()
                .filter(|m| *m != Move::Pass)
                .collect();
            let mv = if point_moves.is_empty() || rng.gen_bool(0.05) {
                Move::Pass
            } else {
                point_moves[rng.gen_range(0..point_moves.len())]
            };
            engine = engine.play(mv).unwrap();
            oracle = oracle.play(mv);
            moves += 1;
        }
        assert_agreement(&engine, &oracle, &format!("playout {playout} end"));
    }
}

pub fn neighbors(idx: usize, size: usize) -> Vec<usize> {
    let (r, c) = (idx / size, idx % size);
    let mut out = Vec::with_capacity(4);
    if r > 0 {
        out.push(idx - size);
    }
    if r + 1 < size {
        out.push(idx + size);
    }
    if c > 0 {
        out.push(idx - 1);
    }
    if c + 1 < size {
        out.push(idx + 1);
    }
    out
}
