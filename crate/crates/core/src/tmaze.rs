//! T-Maze memory task: a cue shown only on the first step, a corridor, and
//! a junction where the agent must turn towards the side the cue named.
//!
//! Observations are 16 bits: two cue bits, the position as an 8-bit gray
//! code (most significant bit first) and six random distractor bits. Cue
//! `01` means the reward is up, `10` means it is down.

use std::fmt::Write as _;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::rng::{self, Rng};

pub const OBS_BITS: usize = 16;
pub const N_ACTIONS: usize = 4;
pub const STEP_REWARD: f64 = -0.1;
pub const SUCCESS_REWARD: f64 = 4.0;
pub const FAILURE_REWARD: f64 = -1.0;
const CUE_BITS: usize = 2;
const GRAY_BITS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Range(format!("action index {i} out of range")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        }
    }
}

/// Which turn the cue rewards.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cue {
    /// Shown as `01`.
    Up,
    /// Shown as `10`.
    Down,
}

impl Cue {
    pub fn bits(self) -> [u8; 2] {
        match self {
            Cue::Up => [0, 1],
            Cue::Down => [1, 0],
        }
    }

    pub fn rewarded_action(self) -> Action {
        match self {
            Cue::Up => Action::Up,
            Cue::Down => Action::Down,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    WrongTurn,
    Timeout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TMazeConfig {
    pub corridor_length: usize,
    pub max_steps: usize,
    pub seed: u64,
}

impl TMazeConfig {
    /// `max_steps` defaults to four times the corridor length.
    pub fn new(corridor_length: usize, seed: u64) -> Self {
        Self { corridor_length, max_steps: 4 * corridor_length, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=255).contains(&self.corridor_length) {
            return Err(Error::Config(format!(
                "corridor length {} outside 1..=255",
                self.corridor_length
            )));
        }
        if self.max_steps < self.corridor_length + 2 {
            return Err(Error::Config(format!(
                "max_steps {} below corridor length + 2",
                self.max_steps
            )));
        }
        Ok(())
    }
}

/// `n XOR (n >> 1)` as eight bits, most significant first.
pub fn gray_code(n: usize) -> Result<[u8; 8]> {
    if n > 255 {
        return Err(Error::Range(format!("gray code input {n} exceeds 255")));
    }
    let g = n ^ (n >> 1);
    Ok(std::array::from_fn(|i| ((g >> (GRAY_BITS - 1 - i)) & 1) as u8))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub bits: [u8; OBS_BITS],
}

impl Observation {
    pub fn cue(&self) -> [u8; 2] {
        [self.bits[0], self.bits[1]]
    }

    pub fn gray(&self) -> &[u8] {
        &self.bits[CUE_BITS..CUE_BITS + GRAY_BITS]
    }

    pub fn distractors(&self) -> &[u8] {
        &self.bits[CUE_BITS + GRAY_BITS..]
    }

    pub fn to_vector(&self) -> Vector {
        Vector::new(self.bits.iter().map(|&b| b as f64).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    /// Set on the final step of an episode.
    pub outcome: Option<Outcome>,
}

#[derive(Clone, Debug)]
pub struct TMaze {
    config: TMazeConfig,
    rng: Rng,
    cue: Cue,
    position: usize,
    t: usize,
    done: bool,
    /// Episode return in tenths, kept as an integer so sums are exact.
    return_tenths: i64,
}

impl TMaze {
    /// Environment whose randomness comes from `config.seed`. Call
    /// [`TMaze::reset`] before stepping.
    pub fn new(config: TMazeConfig) -> Result<Self> {
        let rng = rng::stream(config.seed, &[rng::label::ENV]);
        Self::with_rng(config, rng)
    }

    pub fn with_rng(config: TMazeConfig, rng: Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, rng, cue: Cue::Up, position: 0, t: 0, done: true, return_tenths: 0 })
    }

    pub fn config(&self) -> &TMazeConfig {
        &self.config
    }

    pub fn cue(&self) -> Cue {
        self.cue
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Steps taken in the current episode.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn episode_return(&self) -> f64 {
        self.return_tenths as f64 / 10.0
    }

    pub fn episode_return_tenths(&self) -> i64 {
        self.return_tenths
    }

    fn observe(&mut self, cue: Option<Cue>) -> Observation {
        let mut bits = [0u8; OBS_BITS];
        if let Some(c) = cue {
            bits[..CUE_BITS].copy_from_slice(&c.bits());
        }
        let gray = gray_code(self.position).expect("position within gray range");
        bits[CUE_BITS..CUE_BITS + GRAY_BITS].copy_from_slice(&gray);
        for b in &mut bits[CUE_BITS + GRAY_BITS..] {
            *b = self.rng.random::<bool>() as u8;
        }
        Observation { bits }
    }

    pub fn reset(&mut self) -> Observation {
        self.cue = if self.rng.random::<bool>() { Cue::Up } else { Cue::Down };
        self.position = 0;
        self.t = 0;
        self.done = false;
        self.return_tenths = 0;
        self.observe(Some(self.cue))
    }

    pub fn step(&mut self, action: Action) -> Result<Step> {
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        self.t += 1;
        let at_junction = self.position == self.config.corridor_length;
        let (tenths, outcome) = match action {
            Action::Up | Action::Down if at_junction => {
                if action == self.cue.rewarded_action() {
                    (40, Some(Outcome::Success))
                } else {
                    (-10, Some(Outcome::WrongTurn))
                }
            }
            Action::Right if !at_junction => {
                self.position += 1;
                (-1, None)
            }
            Action::Left => {
                self.position = self.position.saturating_sub(1);
                (-1, None)
            }
            _ => (-1, None),
        };
        let outcome = match outcome {
            None if self.t >= self.config.max_steps => Some(Outcome::Timeout),
            o => o,
        };
        self.done = outcome.is_some();
        self.return_tenths += tenths;
        let observation = self.observe(None);
        Ok(Step { observation, reward: tenths as f64 / 10.0, done: self.done, outcome })
    }
}

/// One row of an environment trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub episode: u64,
    pub t: usize,
    pub position: usize,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("episode,t,position,action,reward,done\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.episode,
            r.t,
            r.position,
            r.action.name(),
            r.reward,
            r.done as u8
        );
    }
    out
}
