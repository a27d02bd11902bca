//! Minimal GTP (Go Text Protocol) client driving an external engine over a
//! child process's standard streams.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use thiserror::Error;

use crate::go::{Color, Move};

#[derive(Debug, Error)]
pub enum GtpError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("engine reported failure: {0}")]
    Engine(String),
}

pub type Result<T> = std::result::Result<T, GtpError>;

/// Column letters skip `I` per the protocol.
const COLUMNS: &[u8] = b"ABCDEFGHJKLMNOPQRST";

/// Render a move as a GTP vertex. Row 0 is the top of our board, but GTP
/// counts rows from the bottom.
pub fn vertex_from_move(mv: Move, size: usize) -> String {
    match mv {
        Move::Pass => "pass".to_string(),
        Move::Point { row, col } => {
            format!("{}{}", COLUMNS[col as usize] as char, size - row as usize)
        }
    }
}

pub fn move_from_vertex(s: &str, size: usize) -> Result<Move> {
    let t = s.trim().to_ascii_uppercase();
    if t == "PASS" {
        return Ok(Move::Pass);
    }
    let mut chars = t.chars();
    let col_letter = chars
        .next()
        .ok_or_else(|| GtpError::Protocol("empty vertex".into()))?;
    let col = COLUMNS
        .iter()
        .position(|&c| c as char == col_letter)
        .ok_or_else(|| GtpError::Protocol(format!("bad column in vertex {s:?}")))?;
    let row_num: usize = chars
        .as_str()
        .parse()
        .map_err(|_| GtpError::Protocol(format!("bad row in vertex {s:?}")))?;
    if col >= size || row_num == 0 || row_num > size {
        return Err(GtpError::Protocol(format!(
            "vertex {s:?} outside {size}x{size} board"
        )));
    }
    Ok(Move::Point {
        row: (size - row_num) as u8,
        col: col as u8,
    })
}

fn color_name(c: Color) -> &'static str {
    match c {
        Color::Black => "black",
        Color::White => "white",
    }
}

/// What an engine may answer to `genmove`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenMove {
    Move(Move),
    Resign,
}

pub struct GtpClient {
    child: Child,
    stdin: ChildStdin,
    reader: BufReader<ChildStdout>,
}

impl GtpClient {
    pub fn spawn(command: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(command)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| GtpError::Protocol("no stdin handle".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| GtpError::Protocol("no stdout handle".into()))?;
        Ok(GtpClient {
            child,
            stdin,
            reader: BufReader::new(stdout),
        })
    }

    /// Send one command and read the response up to the blank terminator.
    /// Returns the payload of a success (`=`) response.
    pub fn send(&mut self, cmd: &str) -> Result<String> {
        writeln!(self.stdin, "{cmd}")?;
        self.stdin.flush()?;
        let mut response = String::new();
        loop {
            let mut line = String::new();
            let n = self.reader.read_line(&mut line)?;
            if n == 0 {
                return Err(GtpError::Protocol(format!(
                    "engine closed the stream during {cmd:?}"
                )));
            }
            if line.trim_end().is_empty() {
                if response.is_empty() {
                    continue; // leading blank lines are tolerated
                }
                break;
            }
            response.push_str(&line);
        }
        let response = response.trim_end();
        if let Some(rest) = response.strip_prefix('=') {
            Ok(strip_id(rest).to_string())
        } else if let Some(rest) = response.strip_prefix('?') {
            Err(GtpError::Engine(strip_id(rest).to_string()))
        } else {
            Err(GtpError::Protocol(format!(
                "malformed response {response:?} to {cmd:?}"
            )))
        }
    }

    pub fn protocol_version(&mut self) -> Result<String> {
        self.send("protocol_version")
    }

    pub fn name(&mut self) -> Result<String> {
        self.send("name")
    }

    pub fn boardsize(&mut self, size: usize) -> Result<()> {
        self.send(&format!("boardsize {size}")).map(|_| ())
    }

    pub fn komi(&mut self, komi: f32) -> Result<()> {
        self.send(&format!("komi {komi}")).map(|_| ())
    }

    pub fn clear_board(&mut self) -> Result<()> {
        self.send("clear_board").map(|_| ())
    }

    pub fn play(&mut self, color: Color, mv: Move, size: usize) -> Result<()> {
        self.send(&format!(
            "play {} {}",
            color_name(color),
            vertex_from_move(mv, size)
        ))
        .map(|_| ())
    }

    pub fn genmove(&mut self, color: Color, size: usize) -> Result<GenMove> {
        let answer = self.send(&format!("genmove {}", color_name(color)))?;
        let answer = answer.trim();
        if answer.eq_ignore_ascii_case("resign") {
            return Ok(GenMove::Resign);
        }
        Ok(GenMove::Move(move_from_vertex(answer, size)?))
    }

    pub fn final_score(&mut self) -> Result<String> {
        self.send("final_score")
    }

    pub fn quit(&mut self) -> Result<()> {
        let _ = self.send("quit");
        let _ = self.child.wait();
        Ok(())
    }
}

impl Drop for GtpClient {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Responses may carry an echoed numeric id directly after =/?.
fn strip_id(rest: &str) -> &str {
    let rest = rest.trim_start();
    match rest.split_once(char::is_whitespace) {
        Some((first, tail)) if first.chars().all(|c| c.is_ascii_digit()) && !first.is_empty() => {
            tail.trim()
        }
        _ => rest.trim(),
    }
}
