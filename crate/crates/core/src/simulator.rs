//! Seeded Monte Carlo simulation of `N` users under Whittle's index policy
//! or the optimal relaxed policy.
//!
//! Two engines share one slot structure. [`Engine::PerUser`] keeps every
//! user's class, belief state and true channel bit. [`Engine::Aggregate`]
//! keeps only the count of users per belief state: given its belief state a
//! user's current channel is ON with probability equal to the belief,
//! independently of everyone else, so the number of ON observations among
//! `m` scheduled users in a state is `Binomial(m, belief)` and a uniformly
//! random tie-break at the boundary rung is multivariate hypergeometric. The
//! aggregate engine therefore has the same law for the empirical state and
//! the reward tallies, at a cost independent of `N`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Hypergeometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::fluid::FluidModel;
use crate::markov_belief::{step_idle, BeliefState, ClassMix};
use crate::relaxed_policy::{solve_relaxed, RelaxedSolution};
use crate::whittle_index::{build_index_table, IndexTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Whittle,
    Relaxed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// Every channel was just observed OFF (`x`).
    AllOffObserved,
    /// No channel has been observed (`y`).
    AllStationary,
    /// Explicit occupancy vector; `z * N` must be integral.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    #[default]
    PerUser,
    Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mix: ClassMix,
    pub n: usize,
    pub horizon: usize,
    pub seed: u64,
    pub policy: Policy,
    pub initial: InitialState,
    /// Slots discarded before averaging; `horizon / 10` when absent.
    pub burn_in: Option<usize>,
    pub engine: Engine,
}

fn integral(x: f64) -> Option<u64> {
    let r = x.round();
    ((x - r).abs() < 1e-9 && r >= 0.0).then_some(r as u64)
}

impl SimConfig {
    pub fn new(mix: ClassMix, n: usize, horizon: usize, seed: u64, policy: Policy, initial: InitialState) -> Self {
        Self { mix, n, horizon, seed, policy, initial, burn_in: None, engine: Engine::PerUser }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.mix.validate()?;
        if self.horizon == 0 {
            return Err(SimError::EmptyHorizon);
        }
        if self.burn_in() >= self.horizon {
            return Err(SimError::BurnIn { burn_in: self.burn_in(), horizon: self.horizon });
        }
        let n = self.n as f64;
        if integral(self.mix.alpha * n).is_none() || self.n == 0 {
            return Err(SimError::NonIntegral { what: "alpha N", value: self.mix.alpha * n, n: self.n });
        }
        for &g in &self.mix.gamma {
            if integral(g * n).is_none() {
                return Err(SimError::NonIntegral { what: "gamma_k N", value: g * n, n: self.n });
            }
        }
        Ok(())
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.horizon / 10)
    }

    /// Users scheduled per slot under the hard constraint.
    pub fn slots(&self) -> usize {
        (self.mix.alpha * self.n as f64 + 1e-9).floor() as usize
    }

    pub fn class_sizes(&self) -> Vec<u64> {
        self.mix.gamma.iter().map(|g| (g * self.n as f64).round() as u64).collect()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Per-class lattice counts closest to `z * N`, by largest remainder, with
/// class totals exactly `gamma_k N`.
pub fn lattice_round(z: &[f64], mix: &ClassMix, n: usize) -> Vec<u64> {
    let block = mix.block_len();
    let mut counts = vec![0u64; z.len()];
    for k in 0..mix.num_classes() {
        let target = (mix.gamma[k] * n as f64).round() as u64;
        let range = k * block..(k + 1) * block;
        let scaled: Vec<f64> = z[range.clone()].iter().map(|x| x.max(0.0) * n as f64).collect();
        let mut assigned = 0u64;
        for (j, s) in scaled.iter().enumerate() {
            counts[range.start + j] = s.floor() as u64;
            assigned += s.floor() as u64;
        }
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&a, &b| {
            let ra = scaled[a] - scaled[a].floor();
            let rb = scaled[b] - scaled[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut idx = 0;
        while assigned < target {
            counts[range.start + order[idx % block]] += 1;
            assigned += 1;
            idx += 1;
        }
        while assigned > target {
            let j = order[block - 1 - (idx % block)];
            if counts[range.start + j] > 0 {
                counts[range.start + j] -= 1;
                assigned -= 1;
            }
            idx += 1;
        }
    }
    counts
}

fn initial_counts(config: &SimConfig) -> Result<Vec<u64>, SimError> {
    let mix = &config.mix;
    let sizes = config.class_sizes();
    let mut counts = vec![0u64; mix.dim()];
    match &config.initial {
        InitialState::AllOffObserved => {
            for k in 0..mix.num_classes() {
                counts[mix.global_index(k, BeliefState::OffAge(1))] = sizes[k];
            }
        }
        InitialState::AllStationary => {
            for k in 0..mix.num_classes() {
                counts[mix.global_index(k, BeliefState::Stationary)] = sizes[k];
            }
        }
        InitialState::Explicit(z) => {
            if z.len() != mix.dim() {
                return Err(SimError::InitialState(format!("length {} != {}", z.len(), mix.dim())));
            }
            for (i, &x) in z.iter().enumerate() {
                counts[i] = integral(x * config.n as f64)
                    .ok_or_else(|| SimError::InitialState(format!("coordinate {i} = {x} is off the 1/N lattice")))?;
            }
            let block = mix.block_len();
            for k in 0..mix.num_classes() {
                let total: u64 = counts[k * block..(k + 1) * block].iter().sum();
                if total != sizes[k] {
                    return Err(SimError::InitialState(format!("class {k} holds {total} users, expected {}", sizes[k])));
                }
            }
        }
    }
    Ok(counts)
}

/// Picks `k` users with the highest index, breaking ties at the boundary
/// rung uniformly at random.
pub fn schedule_whittle<R: Rng + ?Sized>(states: &[usize], table: &IndexTable, k: usize, rng: &mut R) -> Vec<usize> {
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); table.ladder.len()];
    for (u, &s) in states.iter().enumerate() {
        buckets[table.rung_of(s)].push(u);
    }
    let mut chosen = Vec::with_capacity(k);
    for bucket in buckets {
        let rem = k - chosen.len();
        if rem == 0 {
            break;
        }
        if bucket.len() <= rem {
            chosen.extend(bucket);
        } else {
            chosen.extend(sample(rng, bucket.len(), rem).into_iter().map(|j| bucket[j]));
            break;
        }
    }
    chosen
}

/// Independent per-user decisions of the relaxed policy.
pub fn schedule_relaxed<R: Rng + ?Sized>(states: &[usize], sol: &RelaxedSolution, rng: &mut R) -> Vec<usize> {
    states
        .iter()
        .enumerate()
        .filter(|(_, &s)| {
            let a = sol.activation_probability(s);
            a >= 1.0 || (a > 0.0 && rng.gen::<f64>() < a)
        })
        .map(|(u, _)| u)
        .collect()
}

/// Number of marked items among `draws` taken without replacement from
/// `pop` items of which `marked` are marked.
///
/// Falls back to selection sampling over the smallest of the four
/// equivalent populations when the rejection sampler cannot be set up.
pub fn hypergeometric<R: Rng + ?Sized>(rng: &mut R, pop: u64, marked: u64, draws: u64) -> u64 {
    if let Ok(d) = Hypergeometric::new(pop, marked, draws) {
        return d.sample(rng);
    }
    // selection sampling: walk `len` items, each chosen w.p. remaining / left
    let mut select = |len: u64, picks: u64| -> u64 {
        let (mut chosen, mut left) = (0u64, pop);
        for _ in 0..len {
            if rng.gen_range(0..left) < picks - chosen {
                chosen += 1;
            }
            left -= 1;
        }
        chosen
    };
    let smallest = marked.min(pop - marked).min(draws).min(pop - draws);
    if smallest == marked {
        select(marked, draws)
    } else if smallest == pop - marked {
        draws - select(pop - marked, draws)
    } else if smallest == draws {
        select(draws, marked)
    } else {
        marked - select(pop - draws, marked)
    }
}

/// Tallies of one slot.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SlotMetrics {
    pub scheduled: u64,
    /// Sum of beliefs of scheduled users.
    pub belief_reward: f64,
    /// Number of scheduled users whose channel was ON.
    pub realized_reward: u64,
}

#[derive(Debug, Clone)]
struct User {
    state: usize,
    channel: bool,
}

/// One simulation in progress.
#[derive(Debug, Clone)]
pub struct SimRun {
    config: SimConfig,
    table: IndexTable,
    relaxed: Option<RelaxedSolution>,
    rng: ChaCha8Rng,
    t: usize,
    counts: Vec<u64>,
    users: Vec<User>,
    beliefs: Vec<f64>,
    idle_next: Vec<usize>,
    on1: Vec<usize>,
    off1: Vec<usize>,
    flip_on: Vec<f64>,
    activation: Vec<f64>,
}

impl SimRun {
    pub fn new(config: &SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let mix = &config.mix;
        let table = build_index_table(mix);
        let relaxed = match config.policy {
            Policy::Relaxed => Some(solve_relaxed(mix, &table)?),
            Policy::Whittle => None,
        };
        let dim = mix.dim();
        let mut idle_next = Vec::with_capacity(dim);
        let mut on1 = Vec::with_capacity(dim);
        let mut off1 = Vec::with_capacity(dim);
        for i in 0..dim {
            let (k, s) = mix.locate(i);
            idle_next.push(mix.global_index(k, step_idle(&mix.classes[k], s)));
            on1.push(mix.global_index(k, BeliefState::OnAge(1)));
            off1.push(mix.global_index(k, BeliefState::OffAge(1)));
        }
        let activation = match &relaxed {
            Some(sol) => (0..dim).map(|i| sol.activation_probability(i)).collect(),
            None => Vec::new(),
        };
        let beliefs = mix.belief_table();
        let counts = initial_counts(config)?;
        // P(ON next slot) indexed by 2 * class + current bit
        let flip_on = mix.classes.iter().flat_map(|c| [c.r, c.p]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut users = Vec::new();
        if config.engine == Engine::PerUser {
            users.reserve(config.n);
            for (i, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    let channel = rng.gen::<f64>() < beliefs[i];
                    users.push(User { state: i, channel });
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            table,
            relaxed,
            rng,
            t: 0,
            counts,
            users,
            beliefs,
            idle_next,
            on1,
            off1,
            flip_on,
            activation,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn table(&self) -> &IndexTable {
        &self.table
    }

    pub fn relaxed(&self) -> Option<&RelaxedSolution> {
        self.relaxed.as_ref()
    }

    /// Slots simulated so far.
    pub fn time(&self) -> usize {
        self.t
    }

    /// Users per global coordinate.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Current `(state, channel bit)` per user; empty for the aggregate engine.
    pub fn users(&self) -> Vec<(usize, bool)> {
        self.users.iter().map(|u| (u.state, u.channel)).collect()
    }

    /// Empirical occupancy `Z^N`, a point of the `1/N` lattice.
    pub fn empirical_state(&self) -> Vec<f64> {
        let n = self.config.n as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Euclidean distance from the empirical state to `target`.
    pub fn distance_to(&self, target: &[f64]) -> f64 {
        let n = self.config.n as f64;
        self.counts
            .iter()
            .zip(target)
            .map(|(&c, &z)| {
                let d = c as f64 / n - z;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Advances one slot.
    pub fn step(&mut self) -> SlotMetrics {
        self.t += 1;
        match self.config.engine {
            Engine::PerUser => self.step_users(),
            Engine::Aggregate => self.step_counts(),
        }
    }

    fn step_users(&mut self) -> SlotMetrics {
        let states: Vec<usize> = self.users.iter().map(|u| u.state).collect();
        let chosen = match &self.relaxed {
            None => schedule_whittle(&states, &self.table, self.config.slots(), &mut self.rng),
            Some(sol) => schedule_relaxed(&states, sol, &mut self.rng),
        };
        let mut scheduled = vec![false; self.users.len()];
        let mut metrics = SlotMetrics { scheduled: chosen.len() as u64, ..Default::default() };
        for &u in &chosen {
            scheduled[u] = true;
            metrics.belief_reward += self.beliefs[self.users[u].state];
            metrics.realized_reward += self.users[u].channel as u64;
        }
        let block = self.config.mix.block_len();
        for (u, user) in self.users.iter_mut().enumerate() {
            let next = if scheduled[u] {
                if user.channel {
                    self.on1[user.state]
                } else {
                    self.off1[user.state]
                }
            } else {
                self.idle_next[user.state]
            };
            let class = user.state / block;
            let p_on = self.flip_on[2 * class + user.channel as usize];
            user.channel = self.rng.gen::<f64>() < p_on;
            self.counts[user.state] -= 1;
            self.counts[next] += 1;
            user.state = next;
        }
        metrics
    }

    fn active_counts(&mut self) -> Vec<u64> {
        let dim = self.counts.len();
        let mut active = vec![0u64; dim];
        match &self.relaxed {
            Some(_) => {
                for i in 0..dim {
                    let a = self.activation[i];
                    active[i] = if a >= 1.0 {
                        self.counts[i]
                    } else if a <= 0.0 || self.counts[i] == 0 {
                        0
                    } else {
                        Binomial::new(self.counts[i], a).expect("valid binomial").sample(&mut self.rng)
                    };
                }
            }
            None => {
                let mut rem = self.config.slots() as u64;
                for rung in &self.table.ladder {
                    if rem == 0 {
                        break;
                    }
                    let total: u64 = rung.members.iter().map(|&i| self.counts[i]).sum();
                    if total <= rem {
                        for &i in &rung.members {
                            active[i] = self.counts[i];
                        }
                        rem -= total;
                    } else {
                        let mut pop = total;
                        for &i in &rung.members {
                            let c = self.counts[i];
                            let take = if rem == 0 || c == 0 {
                                0
                            } else if c == pop {
                                rem
                            } else {
                                hypergeometric(&mut self.rng, pop, c, rem)
                            };
                            active[i] = take;
                            rem -= take;
                            pop -= c;
                        }
                        rem = 0;
                    }
                }
            }
        }
        active
    }

    fn step_counts(&mut self) -> SlotMetrics {
        let active = self.active_counts();
        let mut next = vec![0u64; self.counts.len()];
        let mut metrics = SlotMetrics::default();
        for i in 0..self.counts.len() {
            let m = active[i];
            let b = self.beliefs[i];
            let on = if m == 0 { 0 } else { Binomial::new(m, b).expect("valid binomial").sample(&mut self.rng) };
            next[self.on1[i]] += on;
            next[self.off1[i]] += m - on;
            next[self.idle_next[i]] += self.counts[i] - m;
            metrics.scheduled += m;
            metrics.belief_reward += m as f64 * b;
            metrics.realized_reward += on;
        }
        self.counts = next;
        metrics
    }
}

/// Mean and standard error over independent replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    /// `None` with fewer than two replications.
    pub se: Option<f64>,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = (n >= 2).then(|| {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
            (var / n as f64).sqrt()
        });
        Self { mean, se, n }
    }

    pub fn se_or_zero(&self) -> f64 {
        self.se.unwrap_or(0.0)
    }
}

/// Per-user per-slot rates of one run, averaged after burn-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunRates {
    pub belief: f64,
    pub realized: f64,
    pub activation: f64,
}

pub fn run_rates(config: &SimConfig) -> Result<RunRates, SimError> {
    let mut run = SimRun::new(config)?;
    let burn = config.burn_in();
    let (mut belief, mut realized, mut active) = (0.0, 0u64, 0u64);
    for t in 0..config.horizon {
        let m = run.step();
        if t >= burn {
            belief += m.belief_reward;
            realized += m.realized_reward;
            active += m.scheduled;
        }
    }
    let denom = (config.n * (config.horizon - burn)) as f64;
    Ok(RunRates { belief: belief / denom, realized: realized as f64 / denom, activation: active as f64 / denom })
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputReport {
    pub belief: Estimate,
    pub realized: Estimate,
    pub activation: Estimate,
    pub seeds: Vec<u64>,
}

/// Throughput tallies across seeds; runs execute in parallel.
pub fn run_throughput(config: &SimConfig, seeds: &[u64]) -> Result<ThroughputReport, SimError> {
    let rates: Vec<RunRates> = seeds
        .par_iter()
        .map(|&s| run_rates(&config.with_seed(s)))
        .collect::<Result<_, _>>()?;
    let pick = |f: fn(&RunRates) -> f64| Estimate::from_samples(&rates.iter().map(f).collect::<Vec<_>>());
    Ok(ThroughputReport {
        belief: pick(|r| r.belief),
        realized: pick(|r| r.realized),
        activation: pick(|r| r.activation),
        seeds: seeds.to_vec(),
    })
}

/// First slot at which `||Z^N[t] - zeta|| <= epsilon`, or `None` after `max_t`.
pub fn hitting_time(config: &SimConfig, epsilon: f64, zeta: &[f64], max_t: usize) -> Result<Option<usize>, SimError> {
    let mut run = SimRun::new(config)?;
    for t in 0..=max_t {
        if run.distance_to(zeta) <= epsilon {
            return Ok(Some(t));
        }
        if t < max_t {
            run.step();
        }
    }
    Ok(None)
}

/// Fraction of post-burn-in slots with `Z^N[t]` inside the `epsilon` ball.
pub fn occupancy(config: &SimConfig, epsilon: f64, zeta: &[f64]) -> Result<f64, SimError> {
    let mut run = SimRun::new(config)?;
    let burn = config.burn_in();
    let mut inside = 0usize;
    for t in 0..config.horizon {
        if t >= burn && run.distance_to(zeta) <= epsilon {
            inside += 1;
        }
        run.step();
    }
    Ok(inside as f64 / (config.horizon - burn) as f64)
}

/// `sup_{t < T} ||Z^N[t] - z[t]||` with the fluid started at `Z^N[0]`.
pub fn trajectory_deviation(config: &SimConfig, steps: usize) -> Result<f64, SimError> {
    let mut run = SimRun::new(config)?;
    let model = FluidModel::new(&config.mix, run.table());
    let mut z = run.empirical_state();
    let mut sup = 0.0_f64;
    for t in 0..steps {
        sup = sup.max(run.distance_to(&z));
        if t + 1 < steps {
            run.step();
            z = model.step(&z).expect("dimension matches");
        }
    }
    Ok(sup)
}
