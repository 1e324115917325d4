//! Two-state (Gilbert–Elliott) channel classes and the truncated belief lattice.
//!
//! A scheduler that only learns a channel's state when it transmits on it
//! tracks a belief: the probability the channel is ON in the current slot.
//! For a class with `P(ON→ON) = p` and `P(OFF→ON) = r`, the belief after
//! observing state `c` and then idling `l - 1` slots is
//!
//! ```text
//! b_{0,l} = (r - (p-r)^l r) / (1 + r - p)
//! b_{1,l} = (r + (1-p)(p-r)^l) / (1 + r - p)
//! b_s     = r / (1 + r - p)
//! ```
//!
//! Idle beliefs drift monotonically toward `b_s`. After `tau` idle slots the
//! history is forgotten and the belief is pinned to `b_s`; this holds for
//! OFF-rooted and ON-rooted histories alike, which gives each class a block
//! of `2 tau + 1` states laid out as
//! `[OffAge(1..=tau), Stationary, OnAge(tau..=1)]`.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::ModelError;

/// Markov parameters of one channel class plus the truncation depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelClass {
    pub p: f64,
    pub r: f64,
    pub tau: usize,
}

impl ChannelClass {
    pub fn new(p: f64, r: f64, tau: usize) -> Result<Self, ModelError> {
        let class = Self { p, r, tau };
        class.validate()?;
        Ok(class)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.r > 0.0 && self.r < self.p && self.p < 1.0) {
            return Err(ModelError::InvalidClass {
                p: self.p,
                r: self.r,
                reason: "need 0 < r < p < 1".into(),
            });
        }
        if self.tau < 2 {
            return Err(ModelError::InvalidClass {
                p: self.p,
                r: self.r,
                reason: format!("truncation depth {} < 2", self.tau),
            });
        }
        Ok(())
    }

    /// Stationary probability of ON, `r / (1 + r - p)`.
    pub fn stationary_belief(&self) -> f64 {
        self.r / (1.0 + self.r - self.p)
    }

    /// Untruncated `b_{0,l}`; valid for any `l >= 1`.
    pub fn off_belief(&self, l: usize) -> f64 {
        let d = self.p - self.r;
        (self.r - d.powi(l as i32) * self.r) / (1.0 + self.r - self.p)
    }

    /// Untruncated `b_{1,l}`.
    pub fn on_belief(&self, l: usize) -> f64 {
        let d = self.p - self.r;
        (self.r + (1.0 - self.p) * d.powi(l as i32)) / (1.0 + self.r - self.p)
    }

    /// Belief of the state reached from `OffAge(1)` after `age - 1` idle
    /// slots on the truncated lattice: `b_{0,age}` for `age <= tau`,
    /// `b_s` once the history has been forgotten.
    pub fn off_rooted_belief(&self, age: usize) -> f64 {
        if age <= self.tau {
            self.off_belief(age)
        } else {
            self.stationary_belief()
        }
    }

    /// Number of belief states in this class's block.
    pub fn block_len(&self) -> usize {
        2 * self.tau + 1
    }

    /// Position of `s` inside the class block.
    pub fn index_of(&self, s: BeliefState) -> usize {
        match s {
            BeliefState::OffAge(l) => l - 1,
            BeliefState::Stationary => self.tau,
            BeliefState::OnAge(l) => 2 * self.tau + 1 - l,
        }
    }

    /// Inverse of [`ChannelClass::index_of`].
    pub fn state_at(&self, idx: usize) -> BeliefState {
        assert!(idx < self.block_len(), "block index {idx} out of range");
        if idx < self.tau {
            BeliefState::OffAge(idx + 1)
        } else if idx == self.tau {
            BeliefState::Stationary
        } else {
            BeliefState::OnAge(2 * self.tau + 1 - idx)
        }
    }

    /// All states in block order.
    pub fn states(&self) -> impl Iterator<Item = BeliefState> + '_ {
        (0..self.block_len()).map(move |i| self.state_at(i))
    }

    pub fn contains(&self, s: BeliefState) -> bool {
        match s {
            BeliefState::OffAge(l) | BeliefState::OnAge(l) => (1..=self.tau).contains(&l),
            BeliefState::Stationary => true,
        }
    }
}

/// A point of the truncated belief lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BeliefState {
    /// Last observation OFF, `l` slots ago (`l = 1` means observed last slot).
    OffAge(usize),
    /// Last observation ON, `l` slots ago.
    OnAge(usize),
    /// No usable history.
    Stationary,
}

impl BeliefState {
    pub fn age(&self) -> Option<usize> {
        match *self {
            BeliefState::OffAge(l) | BeliefState::OnAge(l) => Some(l),
            BeliefState::Stationary => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BeliefState::OffAge(_) => "off",
            BeliefState::OnAge(_) => "on",
            BeliefState::Stationary => "stationary",
        }
    }
}

impl fmt::Display for BeliefState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BeliefState::OffAge(l) => write!(f, "off{l}"),
            BeliefState::OnAge(l) => write!(f, "on{l}"),
            BeliefState::Stationary => write!(f, "stationary"),
        }
    }
}

/// Closed-form belief value of `s`.
pub fn belief_value(class: &ChannelClass, s: BeliefState) -> f64 {
    debug_assert!(class.contains(s), "{s} outside lattice of depth {}", class.tau);
    match s {
        BeliefState::OffAge(l) => class.off_belief(l),
        BeliefState::OnAge(l) => class.on_belief(l),
        BeliefState::Stationary => class.stationary_belief(),
    }
}

/// Belief after observing `last_obs` and idling, computed by literally
/// iterating `pi <- pi p + (1 - pi) r` starting from certainty.
pub fn belief_value_by_iteration(class: &ChannelClass, last_obs: bool, l: usize) -> f64 {
    assert!(l >= 1, "age must be at least 1");
    let mut pi = if last_obs { 1.0 } else { 0.0 };
    for _ in 0..l {
        pi = pi * class.p + (1.0 - pi) * class.r;
    }
    pi
}

/// Belief state after one idle slot.
pub fn step_idle(class: &ChannelClass, s: BeliefState) -> BeliefState {
    match s {
        BeliefState::OffAge(l) if l < class.tau => BeliefState::OffAge(l + 1),
        BeliefState::OnAge(l) if l < class.tau => BeliefState::OnAge(l + 1),
        _ => BeliefState::Stationary,
    }
}

/// Belief state after a scheduled slot revealed the channel state.
pub fn step_feedback(observed: bool) -> BeliefState {
    if observed {
        BeliefState::OnAge(1)
    } else {
        BeliefState::OffAge(1)
    }
}

/// Slack in the inequality `(1-p) + b_{0,l} > (l-1)(b_{0,l+1} - b_{0,l})`,
/// evaluated from the closed form `b_{0,l+1} - b_{0,l} = r (p-r)^l`.
/// Positive slack means the inequality holds.
pub fn aging_gap_slack(class: &ChannelClass, l: usize) -> f64 {
    let increment = class.r * (class.p - class.r).powi(l as i32);
    (1.0 - class.p) + class.off_belief(l) - (l as f64 - 1.0) * increment
}

/// Class parameters, class proportions and the activation fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMix {
    pub classes: Vec<ChannelClass>,
    pub gamma: Vec<f64>,
    pub alpha: f64,
}

impl ClassMix {
    pub fn new(classes: Vec<ChannelClass>, gamma: Vec<f64>, alpha: f64) -> Result<Self, ModelError> {
        let mix = Self { classes, gamma, alpha };
        mix.validate()?;
        Ok(mix)
    }

    /// Single-class mix with `gamma = [1]`.
    pub fn single(class: ChannelClass, alpha: f64) -> Result<Self, ModelError> {
        Self::new(vec![class], vec![1.0], alpha)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes.is_empty() || self.classes.len() > 2 {
            return Err(ModelError::InvalidMix(format!(
                "expected 1 or 2 classes, got {}",
                self.classes.len()
            )));
        }
        if self.gamma.len() != self.classes.len() {
            return Err(ModelError::InvalidMix("gamma length differs from class count".into()));
        }
        for c in &self.classes {
            c.validate()?;
        }
        let tau = self.classes[0].tau;
        if self.classes.iter().any(|c| c.tau != tau) {
            return Err(ModelError::InvalidMix("all classes must share one truncation depth".into()));
        }
        if self.gamma.iter().any(|&g| !(g > 0.0)) {
            return Err(ModelError::InvalidMix("class proportions must be positive".into()));
        }
        let total: f64 = self.gamma.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ModelError::InvalidMix(format!("class proportions sum to {total}, not 1")));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ModelError::InvalidMix(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        Ok(())
    }

    pub fn tau(&self) -> usize {
        self.classes[0].tau
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Length of a block (`2 tau + 1`).
    pub fn block_len(&self) -> usize {
        self.classes[0].block_len()
    }

    /// Length of the full state vector.
    pub fn dim(&self) -> usize {
        self.block_len() * self.classes.len()
    }

    /// Global coordinate of `(class, state)`.
    pub fn global_index(&self, class: usize, s: BeliefState) -> usize {
        class * self.block_len() + self.classes[class].index_of(s)
    }

    /// Inverse of [`ClassMix::global_index`].
    pub fn locate(&self, idx: usize) -> (usize, BeliefState) {
        let k = idx / self.block_len();
        (k, self.classes[k].state_at(idx % self.block_len()))
    }

    /// Belief value at every global coordinate.
    pub fn belief_table(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let (k, s) = self.locate(i);
                belief_value(&self.classes[k], s)
            })
            .collect()
    }
}
