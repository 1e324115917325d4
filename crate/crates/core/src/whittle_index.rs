//! Whittle indices of the belief lattice.
//!
//! The index of a belief state is the smallest passivity subsidy `omega` at
//! which idling becomes optimal in the single-channel subsidy problem
//! (reward = belief when active, `omega` when idle, long-run average). For
//! OFF-rooted states below `b_s` it has a closed form obtained from the
//! indifference between activation thresholds `b_{0,l}` and `b_{0,l+1}`.
//! Every state at or above `b_s` shares one constant value, the limit of the
//! OFF-rooted indices.
//!
//! [`whittle_index_oracle`] recomputes indices without the closed form, by
//! bisection over `omega` on top of relative value iteration.

use serde::Serialize;

use crate::error::IndexError;
use crate::markov_belief::{belief_value, step_idle, BeliefState, ChannelClass, ClassMix};

/// Index values closer than this are one rung of the ladder.
pub const RUNG_TIE_TOL: f64 = 1e-12;

/// Span-seminorm stopping threshold of the value-iteration oracle.
pub const RVI_SPAN_TOL: f64 = 1e-10;

/// Iteration cap of the value-iteration oracle.
pub const RVI_MAX_ITER: usize = 1_000_000;

/// Closed-form Whittle index of `s`.
pub fn whittle_index(class: &ChannelClass, s: BeliefState) -> f64 {
    match s {
        BeliefState::OffAge(l) => {
            let cur = class.off_belief(l);
            let next = class.off_belief(l + 1);
            let diff = cur - next;
            let num = diff * (l as f64 + 1.0) + next;
            let den = 1.0 - class.p + diff * l as f64 + next;
            num / den
        }
        BeliefState::OnAge(_) | BeliefState::Stationary => stationary_index(class),
    }
}

/// Index shared by every state with belief at or above `b_s`.
pub fn stationary_index(class: &ChannelClass) -> f64 {
    let (p, r) = (class.p, class.r);
    r / ((1.0 - p) * (1.0 + r - p) + r)
}

/// Long-run reward-plus-subsidy of the policy that activates at beliefs
/// `>= b_{0,l}` and idles below.
pub fn subsidy_value(class: &ChannelClass, omega: f64, threshold_age: usize) -> f64 {
    let l = threshold_age as f64;
    let b = class.off_belief(threshold_age);
    (b + omega * (1.0 - class.p) * (l - 1.0)) / (b + (1.0 - class.p) * l)
}

/// Solution of the single-channel subsidy problem at one `omega`.
#[derive(Debug, Clone)]
pub struct SubsidySolution {
    pub gain: f64,
    pub bias: Vec<f64>,
    /// `true` where idling is (weakly) optimal, in block order.
    pub idle: Vec<bool>,
    pub iterations: usize,
}

/// Relative value iteration for the subsidy problem on the truncated lattice.
///
/// Uses the aperiodicity transform `P -> (P + I) / 2`, which leaves gains and
/// optimal actions unchanged. `warm` seeds the bias vector.
pub fn solve_subsidy_problem(
    class: &ChannelClass,
    omega: f64,
    warm: Option<&[f64]>,
) -> Result<SubsidySolution, IndexError> {
    let n = class.block_len();
    let beliefs: Vec<f64> = class.states().map(|s| belief_value(class, s)).collect();
    let idle_next: Vec<usize> = class.states().map(|s| class.index_of(step_idle(class, s))).collect();
    let on1 = class.index_of(BeliefState::OnAge(1));
    let off1 = class.index_of(BeliefState::OffAge(1));
    let reference = class.index_of(BeliefState::Stationary);

    let mut h = match warm {
        Some(w) if w.len() == n => w.to_vec(),
        _ => vec![0.0; n],
    };
    let mut next = vec![0.0; n];
    let q_values = |h: &[f64], i: usize| -> (f64, f64) {
        let b = beliefs[i];
        let active = b + 0.5 * (b * h[on1] + (1.0 - b) * h[off1]) + 0.5 * h[i];
        let passive = omega + 0.5 * h[idle_next[i]] + 0.5 * h[i];
        (active, passive)
    };

    let mut span = f64::INFINITY;
    for it in 1..=RVI_MAX_ITER {
        for (i, slot) in next.iter_mut().enumerate() {
            let (a, p) = q_values(&h, i);
            *slot = a.max(p);
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            let d = next[i] - h[i];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        span = hi - lo;
        let offset = next[reference];
        for i in 0..n {
            h[i] = next[i] - offset;
        }
        if span < RVI_SPAN_TOL {
            let gain = 0.5 * (hi + lo);
            let idle = (0..n)
                .map(|i| {
                    let (a, p) = q_values(&h, i);
                    p >= a
                })
                .collect();
            return Ok(SubsidySolution { gain, bias: h, idle, iterations: it });
        }
    }
    Err(IndexError::NonConvergent { iterations: RVI_MAX_ITER, span })
}

/// Index of `s` recomputed by bisection over `omega in [0, 1]`, solving the
/// subsidy problem by value iteration at each probe.
pub fn whittle_index_oracle(class: &ChannelClass, s: BeliefState, tol: f64) -> Result<f64, IndexError> {
    if !(tol > 0.0) {
        return Err(IndexError::BadTolerance(tol));
    }
    let target = class.index_of(s);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut warm: Option<Vec<f64>> = None;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let sol = solve_subsidy_problem(class, mid, warm.as_deref())?;
        if sol.idle[target] {
            hi = mid;
        } else {
            lo = mid;
        }
        warm = Some(sol.bias);
    }
    Ok(0.5 * (lo + hi))
}

/// One rung of the merged index ladder.
#[derive(Debug, Clone, Serialize)]
pub struct Rung {
    pub value: f64,
    /// Global coordinates attaining this value.
    pub members: Vec<usize>,
}

/// Index value of every `(class, state)` plus the merged descending ladder.
#[derive(Debug, Clone, Serialize)]
pub struct IndexTable {
    /// Index per global coordinate (see [`ClassMix::global_index`]).
    pub values: Vec<f64>,
    pub ladder: Vec<Rung>,
    rung_of: Vec<usize>,
}

impl IndexTable {
    pub fn index(&self, global: usize) -> f64 {
        self.values[global]
    }

    /// Ladder position of a global coordinate.
    pub fn rung_of(&self, global: usize) -> usize {
        self.rung_of[global]
    }

    /// Ladder position whose value matches `omega` within the tie tolerance.
    pub fn find_rung(&self, omega: f64) -> Option<usize> {
        self.ladder.iter().position(|r| (r.value - omega).abs() <= RUNG_TIE_TOL)
    }
}

/// Computes every index of the mix and merges them into a ladder.
pub fn build_index_table(mix: &ClassMix) -> IndexTable {
    let dim = mix.dim();
    let values: Vec<f64> = (0..dim)
        .map(|i| {
            let (k, s) = mix.locate(i);
            whittle_index(&mix.classes[k], s)
        })
        .collect();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut ladder: Vec<Rung> = Vec::new();
    let mut rung_of = vec![0; dim];
    for i in order {
        match ladder.last_mut() {
            Some(rung) if (rung.value - values[i]).abs() <= RUNG_TIE_TOL => rung.members.push(i),
            _ => ladder.push(Rung { value: values[i], members: vec![i] }),
        }
        rung_of[i] = ladder.len() - 1;
    }
    IndexTable { values, ladder, rung_of }
}
