//! Optimal relaxed policy: the subsidy `omega*` at which the time-averaged
//! activation constraint binds, the randomization `rho*` at the marginal
//! rung, the resulting per-user throughput bound and stationary occupancy.
//!
//! Under a threshold policy that activates beliefs `>= b_{0,h}` and
//! activates `b_{0,h}` itself with probability `rho`, each channel cycles
//! through `OffAge(1..=h)` (plus `OffAge(h+1)` when the marginal state was
//! skipped), then stays on `OnAge(1)` until an OFF is observed. Writing
//! `bbar = rho b_{0,h} + (1-rho) b_{0,h+1}` the cycle length is
//! `h + 1 - rho + bbar / (1-p)` and
//!
//! ```text
//! A = ((1-p) + bbar) / ((1-p)(h+1-rho) + bbar)
//! v = bbar / ((1-p)(h+1-rho) + bbar)
//! ```
//!
//! are the fractions of slots spent active and spent transmitting.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::RelaxedError;
use crate::markov_belief::{belief_value, step_idle, BeliefState, ChannelClass, ClassMix};
use crate::whittle_index::{stationary_index, IndexTable, RUNG_TIE_TOL};

/// Closed-form activation fraction on the truncated lattice, `1 <= h <= tau`.
fn cycle_activation(class: &ChannelClass, h: usize, rho: f64) -> f64 {
    let q = 1.0 - class.p;
    let bbar = mixed_belief(class, h, rho);
    (q + bbar) / (q * (h as f64 + 1.0 - rho) + bbar)
}

fn mixed_belief(class: &ChannelClass, h: usize, rho: f64) -> f64 {
    rho * class.off_rooted_belief(h) + (1.0 - rho) * class.off_rooted_belief(h + 1)
}

fn cycle_throughput(class: &ChannelClass, h: usize, rho: f64) -> f64 {
    let q = 1.0 - class.p;
    let bbar = mixed_belief(class, h, rho);
    bbar / (q * (h as f64 + 1.0 - rho) + bbar)
}

/// Expected fraction of slots a channel is active under the threshold
/// policy at `b_{0,h}` with randomization `rho`. Thresholds past the
/// truncation depth sit at or above `b_s` and never activate.
pub fn activation_fraction(class: &ChannelClass, threshold_age: usize, rho: f64) -> Result<f64, RelaxedError> {
    if threshold_age == 0 {
        return Err(RelaxedError::BadThresholdAge { age: 0, tau: class.tau });
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(RelaxedError::BadRho(rho));
    }
    if threshold_age > class.tau {
        return Ok(0.0);
    }
    Ok(cycle_activation(class, threshold_age, rho))
}

/// Per-state activation probabilities of the threshold policy, block order.
pub fn threshold_policy(class: &ChannelClass, threshold_age: usize, rho: f64) -> Vec<f64> {
    class
        .states()
        .map(|s| match s {
            BeliefState::OffAge(l) if l < threshold_age => 0.0,
            BeliefState::OffAge(l) if l == threshold_age => rho,
            BeliefState::OffAge(_) => 1.0,
            BeliefState::Stationary if threshold_age > class.tau => 0.0,
            BeliefState::Stationary | BeliefState::OnAge(_) => 1.0,
        })
        .collect()
}

/// Stationary distribution of the single-channel belief chain under the
/// given per-state activation probabilities, by a direct linear solve.
pub fn policy_stationary_distribution(class: &ChannelClass, activation: &[f64]) -> Result<Vec<f64>, RelaxedError> {
    let n = class.block_len();
    if activation.len() != n {
        return Err(RelaxedError::SingularChain(format!(
            "activation vector has length {}, expected {n}",
            activation.len()
        )));
    }
    let on1 = class.index_of(BeliefState::OnAge(1));
    let off1 = class.index_of(BeliefState::OffAge(1));
    let mut p = DMatrix::<f64>::zeros(n, n);
    for (i, s) in class.states().enumerate() {
        let a = activation[i];
        let b = belief_value(class, s);
        p[(i, on1)] += a * b;
        p[(i, off1)] += a * (1.0 - b);
        p[(i, class.index_of(step_idle(class, s)))] += 1.0 - a;
    }
    let mut m = p.transpose() - DMatrix::<f64>::identity(n, n);
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;
    let pi = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| RelaxedError::SingularChain(format!("p={}, r={}", class.p, class.r)))?;
    if pi.iter().any(|x| !x.is_finite()) {
        return Err(RelaxedError::SingularChain("non-finite stationary vector".into()));
    }
    Ok(pi.iter().copied().collect())
}

/// Activation fraction recomputed from the stationary distribution of the
/// explicit belief chain.
pub fn activation_fraction_oracle(class: &ChannelClass, threshold_age: usize, rho: f64) -> Result<f64, RelaxedError> {
    if threshold_age == 0 {
        return Err(RelaxedError::BadThresholdAge { age: 0, tau: class.tau });
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(RelaxedError::BadRho(rho));
    }
    let act = threshold_policy(class, threshold_age, rho);
    let pi = policy_stationary_distribution(class, &act)?;
    Ok(pi.iter().zip(&act).map(|(x, a)| x * a).sum())
}

/// Throughput per channel (probability of an ON transmission per slot)
/// from the explicit belief chain.
pub fn throughput_oracle(class: &ChannelClass, threshold_age: usize, rho: f64) -> Result<f64, RelaxedError> {
    let act = threshold_policy(class, threshold_age, rho);
    let pi = policy_stationary_distribution(class, &act)?;
    Ok(class
        .states()
        .enumerate()
        .map(|(i, s)| pi[i] * act[i] * belief_value(class, s))
        .sum())
}

/// Where a class's threshold falls relative to `omega*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassThreshold {
    /// `OffAge(age)` sits on the marginal rung and is activated w.p. `rho*`.
    Randomized { age: usize },
    /// Every state with belief `>= b_{0,age}` is active; `age = tau + 1`
    /// means only `Stationary` and ON-rooted states are.
    Deterministic { age: usize },
    /// `omega* >= W(b_s)`: the class is never activated.
    Silent,
}

impl ClassThreshold {
    /// Lowest active state, if any.
    pub fn state(&self, tau: usize) -> Option<BeliefState> {
        match *self {
            ClassThreshold::Randomized { age } => Some(BeliefState::OffAge(age)),
            ClassThreshold::Deterministic { age } if age > tau => Some(BeliefState::Stationary),
            ClassThreshold::Deterministic { age } => Some(BeliefState::OffAge(age)),
            ClassThreshold::Silent => None,
        }
    }

    /// `(h, rho)` pair on the truncated lattice with `1 <= h <= tau`.
    fn cycle(&self, tau: usize, rho_star: f64) -> Option<(usize, f64)> {
        match *self {
            ClassThreshold::Randomized { age } => Some((age, rho_star)),
            ClassThreshold::Deterministic { age } if age > tau => Some((tau, 0.0)),
            ClassThreshold::Deterministic { age } => Some((age, 1.0)),
            ClassThreshold::Silent => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regime {
    /// Every class has a finite recurrent cycle.
    Regular,
    /// The constraint binds but the listed classes are never activated.
    Transient { silent: Vec<usize> },
    /// The constraint cannot bind on the truncated lattice: it falls in the
    /// gap between a class's deepest OFF rung and its stationary rung.
    Truncated { class: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelaxedWarning {
    /// `rho* = 1`, the marginal state is fully active.
    RhoOne,
    /// `alpha` equals the all-active capacity.
    CapacityBoundary,
    /// `omega* >= W_k(b_s)`; class `class` goes silent.
    TransientClass { class: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct RelaxedSolution {
    pub mix: ClassMix,
    pub omega_star: f64,
    pub thresholds: Vec<ClassThreshold>,
    pub rho_star: f64,
    /// Per-class activation fraction `A_k`.
    pub activation: Vec<f64>,
    pub throughput_per_user: f64,
    /// Stationary occupancy; `None` outside the regular regime.
    pub zeta: Option<Vec<f64>>,
    pub regime: Regime,
    pub warnings: Vec<RelaxedWarning>,
}

impl RelaxedSolution {
    pub fn is_regular(&self) -> bool {
        self.regime == Regime::Regular
    }

    /// Activation probability of the relaxed policy at a global coordinate.
    pub fn activation_probability(&self, global: usize) -> f64 {
        let (k, s) = self.mix.locate(global);
        let tau = self.mix.tau();
        match self.thresholds[k].cycle(tau, self.rho_star) {
            None => 0.0,
            Some((h, rho)) => match s {
                BeliefState::OffAge(l) if l < h => 0.0,
                BeliefState::OffAge(l) if l == h => rho,
                _ => 1.0,
            },
        }
    }

    /// Total activation `sum_k gamma_k A_k`.
    pub fn total_activation(&self) -> f64 {
        self.mix.gamma.iter().zip(&self.activation).map(|(g, a)| g * a).sum()
    }

    /// Global coordinates of the marginal (randomized) rung.
    pub fn marginal_states(&self) -> Vec<usize> {
        self.thresholds
            .iter()
            .enumerate()
            .filter_map(|(k, t)| match t {
                ClassThreshold::Randomized { age } => Some(self.mix.global_index(k, BeliefState::OffAge(*age))),
                _ => None,
            })
            .collect()
    }
}

/// Threshold of class `k` at subsidy `omega` read off the index table.
fn threshold_at(mix: &ClassMix, table: &IndexTable, k: usize, omega: f64) -> ClassThreshold {
    let class = &mix.classes[k];
    if omega >= stationary_index(class) - RUNG_TIE_TOL {
        return ClassThreshold::Silent;
    }
    for h in 1..=class.tau {
        let w = table.index(mix.global_index(k, BeliefState::OffAge(h)));
        if (w - omega).abs() <= RUNG_TIE_TOL {
            return ClassThreshold::Randomized { age: h };
        }
        if w > omega {
            return ClassThreshold::Deterministic { age: h };
        }
    }
    ClassThreshold::Deterministic { age: class.tau + 1 }
}

fn class_activation(class: &ChannelClass, t: ClassThreshold, rho: f64) -> f64 {
    match t.cycle(class.tau, rho) {
        Some((h, r)) => cycle_activation(class, h, r),
        None => 0.0,
    }
}

fn total_activation(mix: &ClassMix, thresholds: &[ClassThreshold], rho: f64) -> f64 {
    mix.classes
        .iter()
        .zip(thresholds)
        .zip(&mix.gamma)
        .map(|((c, &t), g)| g * class_activation(c, t, rho))
        .sum()
}

/// Solves for `(omega*, rho*)` by walking the index ladder downward.
pub fn solve_relaxed(mix: &ClassMix, table: &IndexTable) -> Result<RelaxedSolution, RelaxedError> {
    let alpha = mix.alpha;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(RelaxedError::AlphaOutOfRange { alpha, capacity: 1.0 });
    }
    let mut warnings = Vec::new();
    if alpha == 1.0 {
        warnings.push(RelaxedWarning::CapacityBoundary);
    }
    let k_classes = mix.num_classes();

    for rung in &table.ladder {
        let omega = rung.value;
        let thresholds: Vec<ClassThreshold> = (0..k_classes).map(|k| threshold_at(mix, table, k, omega)).collect();
        let full = total_activation(mix, &thresholds, 1.0);
        if full < alpha - 1e-15 {
            continue;
        }
        let none = total_activation(mix, &thresholds, 0.0);
        let randomized = thresholds.iter().any(|t| matches!(t, ClassThreshold::Randomized { .. }));
        if !randomized || none >= alpha {
            // Constraint jumps past alpha without a randomizable rung.
            let class = rung.members.first().map(|&i| mix.locate(i).0).unwrap_or(0);
            let omega_star = stationary_index(&mix.classes[class]);
            let thresholds: Vec<ClassThreshold> =
                (0..k_classes).map(|k| threshold_at(mix, table, k, omega_star)).collect();
            let activation: Vec<f64> = mix
                .classes
                .iter()
                .zip(&thresholds)
                .map(|(c, &t)| class_activation(c, t, 1.0))
                .collect();
            for (k, t) in thresholds.iter().enumerate() {
                if *t == ClassThreshold::Silent {
                    warnings.push(RelaxedWarning::TransientClass { class: k });
                }
            }
            return Ok(RelaxedSolution {
                mix: mix.clone(),
                omega_star,
                thresholds,
                rho_star: 1.0,
                activation,
                throughput_per_user: f64::NAN,
                zeta: None,
                regime: Regime::Truncated { class },
                warnings,
            });
        }

        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        let rho_star = if full <= alpha {
            1.0
        } else {
            while hi - lo > 1e-15 {
                let mid = 0.5 * (lo + hi);
                if total_activation(mix, &thresholds, mid) < alpha {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        if rho_star >= 1.0 - 1e-12 {
            warnings.push(RelaxedWarning::RhoOne);
        }
        let activation: Vec<f64> = mix
            .classes
            .iter()
            .zip(&thresholds)
            .map(|(c, &t)| class_activation(c, t, rho_star))
            .collect();
        let silent: Vec<usize> = (0..k_classes).filter(|&k| thresholds[k] == ClassThreshold::Silent).collect();
        for &k in &silent {
            warnings.push(RelaxedWarning::TransientClass { class: k });
        }
        let regime = if silent.is_empty() { Regime::Regular } else { Regime::Transient { silent } };
        let mut sol = RelaxedSolution {
            mix: mix.clone(),
            omega_star: omega,
            thresholds,
            rho_star,
            activation,
            throughput_per_user: 0.0,
            zeta: None,
            regime,
            warnings,
        };
        sol.throughput_per_user = per_user_throughput(&sol)?;
        if sol.is_regular() {
            sol.zeta = Some(compute_zeta(&sol)?);
        }
        return Ok(sol);
    }
    Err(RelaxedError::AlphaOutOfRange { alpha, capacity: 1.0 })
}

/// Per-user throughput bound `r(gamma, alpha) = sum_k gamma_k v_k`.
pub fn per_user_throughput(sol: &RelaxedSolution) -> Result<f64, RelaxedError> {
    if let Regime::Truncated { class } = sol.regime {
        return Err(RelaxedError::Transient { silent: vec![class] });
    }
    let tau = sol.mix.tau();
    Ok(sol
        .mix
        .classes
        .iter()
        .zip(&sol.thresholds)
        .zip(&sol.mix.gamma)
        .map(|((c, t), g)| match t.cycle(tau, sol.rho_star) {
            Some((h, rho)) => g * cycle_throughput(c, h, rho),
            None => 0.0,
        })
        .sum())
}

/// Stationary occupancy of the relaxed policy, scaled so class blocks sum
/// to `gamma_k`.
pub fn compute_zeta(sol: &RelaxedSolution) -> Result<Vec<f64>, RelaxedError> {
    match &sol.regime {
        Regime::Regular => {}
        Regime::Transient { silent } => return Err(RelaxedError::Transient { silent: silent.clone() }),
        Regime::Truncated { class } => return Err(RelaxedError::Transient { silent: vec![*class] }),
    }
    let mix = &sol.mix;
    let tau = mix.tau();
    let mut zeta = vec![0.0; mix.dim()];
    for (k, class) in mix.classes.iter().enumerate() {
        let (h, rho) = sol.thresholds[k]
            .cycle(tau, sol.rho_star)
            .expect("regular regime has no silent class");
        let q = 1.0 - class.p;
        let bbar = mixed_belief(class, h, rho);
        let unit = mix.gamma[k] / (h as f64 + 1.0 - rho + bbar / q);
        for l in 1..=h {
            zeta[mix.global_index(k, BeliefState::OffAge(l))] = unit;
        }
        let skipped = if h < tau { BeliefState::OffAge(h + 1) } else { BeliefState::Stationary };
        zeta[mix.global_index(k, skipped)] += (1.0 - rho) * unit;
        zeta[mix.global_index(k, BeliefState::OnAge(1))] = unit * bbar / q;
    }
    Ok(zeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::whittle_index::build_index_table;

    fn fig2() -> ChannelClass {
        ChannelClass::new(0.8, 0.2, 16).unwrap()
    }

    fn two_class() -> ClassMix {
        let c1 = ChannelClass::new(0.9, 0.45, 16).unwrap();
        let c2 = ChannelClass::new(0.8, 0.3, 16).unwrap();
        ClassMix::new(vec![c1, c2], vec![0.45, 0.55], 0.6).unwrap()
    }

    #[test]
    fn activation_examples() {
        let c = fig2();
        assert!((activation_fraction(&c, 1, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((activation_fraction(&c, 2, 1.0).unwrap() - (1.0 - 0.2 / 0.72)).abs() < 1e-12);
        assert!((activation_fraction(&c, 1, 1.0 / 6.0).unwrap() - 0.75).abs() < 1e-12);
        for h in 1..16 {
            let a = activation_fraction(&c, h, 0.0).unwrap();
            let b = activation_fraction(&c, h + 1, 1.0).unwrap();
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(activation_fraction(&c, 17, 0.5).unwrap(), 0.0);
        assert!(activation_fraction(&c, 0, 0.5).is_err());
        assert!(activation_fraction(&c, 1, 1.5).is_err());
    }

    #[test]
    fn oracle_matches_closed_form() {
        let c = fig2();
        assert!((activation_fraction_oracle(&c, 2, 1.0).unwrap() - 2.6 / 3.6).abs() < 1e-12);
        assert!((activation_fraction_oracle(&c, 1, 1.0 / 6.0).unwrap() - 0.75).abs() < 1e-12);
        assert!(activation_fraction_oracle(&c, 17, 1.0).unwrap().abs() < 1e-12);
        for h in 1..=16 {
            for rho in [0.0, 0.3, 0.77, 1.0] {
                let a = activation_fraction(&c, h, rho).unwrap();
                let o = activation_fraction_oracle(&c, h, rho).unwrap();
                assert!((a - o).abs() < 1e-10, "h={h} rho={rho}: {a} vs {o}");
                let t = cycle_throughput(&c, h, rho);
                let to = throughput_oracle(&c, h, rho).unwrap();
                assert!((t - to).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_class_worked_example() {
        let mix = ClassMix::single(fig2(), 0.75).unwrap();
        let table = build_index_table(&mix);
        let sol = solve_relaxed(&mix, &table).unwrap();
        assert!((sol.omega_star - 0.2).abs() < 1e-12);
        assert_eq!(sol.thresholds, vec![ClassThreshold::Randomized { age: 1 }]);
        assert!((sol.rho_star - 1.0 / 6.0).abs() < 1e-12);
        assert!((sol.throughput_per_user - 0.45).abs() < 1e-12);
        let z = sol.zeta.clone().unwrap();
        let at = |s| z[mix.global_index(0, s)];
        assert!((at(BeliefState::OnAge(1)) - 0.45).abs() < 1e-12);
        assert!((at(BeliefState::OffAge(1)) - 0.3).abs() < 1e-12);
        assert!((at(BeliefState::OffAge(2)) - 0.25).abs() < 1e-12);
        assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(z.iter().filter(|&&x| x > 0.0).count(), 3);
        assert!(sol.warnings.is_empty());
    }

    #[test]
    fn capacity_boundary() {
        let mix = ClassMix::single(fig2(), 1.0).unwrap();
        let sol = solve_relaxed(&mix, &build_index_table(&mix)).unwrap();
        assert_eq!(sol.rho_star, 1.0);
        assert!(sol.warnings.contains(&RelaxedWarning::CapacityBoundary));
        assert!(sol.warnings.contains(&RelaxedWarning::RhoOne));
        assert!((sol.throughput_per_user - 0.5).abs() < 1e-12);
        let bad = ClassMix { alpha: 1.2, ..mix };
        assert!(solve_relaxed(&bad, &build_index_table(&bad)).is_err());
    }

    #[test]
    fn two_class_constraint_binds() {
        let mix = two_class();
        let sol = solve_relaxed(&mix, &build_index_table(&mix)).unwrap();
        assert!(sol.is_regular());
        assert!((sol.total_activation() - 0.6).abs() < 1e-12);
        assert!(sol.rho_star > 0.0 && sol.rho_star < 1.0);
        assert!(sol.throughput_per_user <= 0.6);
        let z = sol.zeta.clone().unwrap();
        for k in 0..2 {
            let s: f64 = z[k * 33..(k + 1) * 33].iter().sum();
            assert!((s - mix.gamma[k]).abs() < 1e-12);
        }
        let act: f64 = (0..z.len()).map(|i| z[i] * sol.activation_probability(i)).sum();
        assert!((act - 0.6).abs() < 1e-12);
    }

    #[test]
    fn truncation_gap_is_reported() {
        let c = ChannelClass::new(0.95, 0.05, 4).unwrap();
        let mix = ClassMix::single(c, 0.01).unwrap();
        let sol = solve_relaxed(&mix, &build_index_table(&mix)).unwrap();
        assert!(matches!(sol.regime, Regime::Truncated { class: 0 }));
        assert!(per_user_throughput(&sol).is_err());
        assert!(compute_zeta(&sol).is_err());
    }
}
