//! Fluid approximation of the occupancy vector under Whittle's index policy.
//!
//! `z[i]` is the fraction of all users in global coordinate `i`. One slot of
//! the fluid map serves rungs in descending index order until a fraction
//! `alpha` of users is active; the marginal rung is activated fractionally.
//! The map is piecewise affine. Around the relaxed occupancy `zeta` it is
//! exactly affine, `z' - z = Q* z + a*`, and its stability reduces to the
//! spectrum of a reduced matrix `U*` obtained by eliminating one coordinate
//! per class through the class-sum identities.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::FluidError;
use crate::markov_belief::{belief_value, step_idle, BeliefState, ClassMix};
use crate::relaxed_policy::{ClassThreshold, RelaxedSolution};
use crate::whittle_index::IndexTable;

/// Precomputed transition structure of the fluid map for one mix.
#[derive(Debug, Clone)]
pub struct FluidModel {
    pub mix: ClassMix,
    pub table: IndexTable,
    beliefs: Vec<f64>,
    idle_next: Vec<usize>,
    on1: Vec<usize>,
    off1: Vec<usize>,
}

impl FluidModel {
    pub fn new(mix: &ClassMix, table: &IndexTable) -> Self {
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
        Self {
            mix: mix.clone(),
            table: table.clone(),
            beliefs: mix.belief_table(),
            idle_next,
            on1,
            off1,
        }
    }

    pub fn dim(&self) -> usize {
        self.mix.dim()
    }

    fn check(&self, z: &[f64]) -> Result<(), FluidError> {
        if z.len() != self.dim() {
            return Err(FluidError::Dimension { got: z.len(), expected: self.dim() });
        }
        Ok(())
    }

    /// Fraction `g_i` of each coordinate activated in one slot.
    pub fn activation_profile(&self, z: &[f64]) -> Vec<f64> {
        let alpha = self.mix.alpha;
        let mut g = vec![0.0; z.len()];
        let mut above = 0.0;
        for rung in &self.table.ladder {
            let mass: f64 = rung.members.iter().map(|&i| z[i]).sum();
            let rem = alpha - above;
            let frac = if mass > 0.0 {
                (rem / mass).clamp(0.0, 1.0)
            } else if rem > 0.0 {
                1.0
            } else {
                0.0
            };
            for &i in &rung.members {
                g[i] = frac;
            }
            above += mass;
        }
        g
    }

    /// Transition rate `q_ij` for `j != i` under activation fraction `g`.
    fn rate(&self, i: usize, j: usize, g: f64) -> f64 {
        let b = self.beliefs[i];
        let mut q = 0.0;
        if j == self.on1[i] {
            q += g * b;
        }
        if j == self.off1[i] {
            q += g * (1.0 - b);
        }
        if j == self.idle_next[i] {
            q += 1.0 - g;
        }
        q
    }

    /// Matrix `Q(z)` with `Q_ij = q_ji` off the diagonal and zero column sums.
    pub fn transition_matrix(&self, z: &[f64]) -> Result<DMatrix<f64>, FluidError> {
        self.check(z)?;
        let g = self.activation_profile(z);
        let n = self.dim();
        let mut q = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let mut out = 0.0;
            for j in 0..n {
                if j != i {
                    let r = self.rate(i, j, g[i]);
                    q[(j, i)] = r;
                    out += r;
                }
            }
            q[(i, i)] = -out;
        }
        Ok(q)
    }

    fn push_flows(&self, z: &[f64], g: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..z.len() {
            let active = g[i] * z[i];
            let b = self.beliefs[i];
            out[self.on1[i]] += active * b;
            out[self.off1[i]] += active * (1.0 - b);
            out[self.idle_next[i]] += z[i] - active;
        }
    }

    /// One slot of the fluid map, `z + Q(z) z`.
    pub fn step(&self, z: &[f64]) -> Result<Vec<f64>, FluidError> {
        self.check(z)?;
        let g = self.activation_profile(z);
        let mut out = vec![0.0; z.len()];
        self.push_flows(z, &g, &mut out);
        Ok(out)
    }

    /// `true` when `z` lies in the region where rung `rung` is marginal:
    /// mass strictly above it is below `alpha` and mass at or above reaches it.
    pub fn in_region(&self, z: &[f64], rung: usize) -> bool {
        let above: f64 = self.table.ladder[..rung]
            .iter()
            .flat_map(|r| r.members.iter())
            .map(|&i| z[i])
            .sum();
        let at: f64 = self.table.ladder[rung].members.iter().map(|&i| z[i]).sum();
        above < self.mix.alpha && self.mix.alpha <= above + at
    }

    /// Iterates the fluid map `steps` times from `z0`.
    pub fn trajectory(
        &self,
        z0: &[f64],
        steps: usize,
        target: &[f64],
        rung: Option<usize>,
        record: bool,
    ) -> Result<FluidTrajectory, FluidError> {
        self.check(z0)?;
        self.check(target)?;
        let mut z = z0.to_vec();
        let mut next = vec![0.0; z.len()];
        let mut distance = Vec::with_capacity(steps + 1);
        let mut states = Vec::new();
        let mut stayed = rung.map(|r| self.in_region(&z, r)).unwrap_or(true);
        distance.push(dist(&z, target));
        if record {
            states.push(z.clone());
        }
        for _ in 0..steps {
            let g = self.activation_profile(&z);
            self.push_flows(&z, &g, &mut next);
            std::mem::swap(&mut z, &mut next);
            distance.push(dist(&z, target));
            if let Some(r) = rung {
                stayed &= self.in_region(&z, r);
            }
            if record {
                states.push(z.clone());
            }
        }
        Ok(FluidTrajectory { distance, stayed_in_region: stayed, final_state: z, states })
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct FluidTrajectory {
    /// Euclidean distance to the target at `t = 0..=steps`.
    pub distance: Vec<f64>,
    pub stayed_in_region: bool,
    pub final_state: Vec<f64>,
    /// Full states, only when recording was requested.
    pub states: Vec<Vec<f64>>,
}

/// Activation profile of `z`.
pub fn activation_profile(z: &[f64], mix: &ClassMix, table: &IndexTable) -> Vec<f64> {
    FluidModel::new(mix, table).activation_profile(z)
}

/// Fluid transition matrix `Q(z)`.
pub fn transition_matrix(z: &[f64], mix: &ClassMix, table: &IndexTable) -> Result<DMatrix<f64>, FluidError> {
    FluidModel::new(mix, table).transition_matrix(z)
}

/// One slot of the fluid map.
pub fn fluid_step(z: &[f64], mix: &ClassMix, table: &IndexTable) -> Result<Vec<f64>, FluidError> {
    FluidModel::new(mix, table).step(z)
}

/// Fluid trajectory from `z0` measured against the relaxed occupancy.
pub fn fluid_trajectory(
    z0: &[f64],
    steps: usize,
    sol: &RelaxedSolution,
    table: &IndexTable,
) -> Result<FluidTrajectory, FluidError> {
    let zeta = sol.zeta.as_ref().ok_or_else(|| FluidError::AnalyticUnavailable("no stationary occupancy".into()))?;
    let rung = table.find_rung(sol.omega_star);
    FluidModel::new(&sol.mix, table).trajectory(z0, steps, zeta, rung, false)
}

/// Affine form of the fluid map around the relaxed occupancy.
#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    pub q_star: DMatrix<f64>,
    pub a_star: DVector<f64>,
    pub u_star: DMatrix<f64>,
    pub b_star: DVector<f64>,
    /// Ladder position of the marginal rung.
    pub rung: usize,
    /// Global coordinate eliminated in each class.
    pub eliminated: Vec<usize>,
    /// Global coordinates kept, in reduced order.
    pub kept: Vec<usize>,
}

impl LinearizedSystem {
    /// Drops the eliminated coordinates.
    pub fn reduce(&self, z: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.kept.len(), self.kept.iter().map(|&i| z[i]))
    }
}

fn eliminated_state(t: ClassThreshold) -> BeliefState {
    match t {
        ClassThreshold::Randomized { age } => BeliefState::OffAge(age),
        ClassThreshold::Deterministic { age } if age >= 2 => BeliefState::OffAge(age - 1),
        _ => BeliefState::OffAge(1),
    }
}

/// Extracts `Q*`, `a*` and the reduced `U*`, `b*`.
///
/// Inside the region the activation pattern is frozen: rungs above the
/// marginal one are active, rungs below idle, and the marginal state is
/// activated for exactly `alpha` minus the mass above it. The drift of that
/// frozen pattern is affine in `z`; probing it at `0` and at unit vectors
/// gives `a*` and the columns of `Q*` without rounding from differencing.
pub fn linearize(sol: &RelaxedSolution, table: &IndexTable) -> Result<LinearizedSystem, FluidError> {
    let zeta = sol
        .zeta
        .as_ref()
        .ok_or_else(|| FluidError::AnalyticUnavailable("relaxed solution is not regular".into()))?;
    if !(sol.rho_star > 0.0 && sol.rho_star < 1.0 - 1e-12) {
        return Err(FluidError::NonGeneric { rho: sol.rho_star });
    }
    let rung = table
        .find_rung(sol.omega_star)
        .ok_or_else(|| FluidError::AnalyticUnavailable("omega* is not on the ladder".into()))?;
    let marginal = &table.ladder[rung].members;
    if marginal.len() != 1 {
        return Err(FluidError::AnalyticUnavailable(format!(
            "marginal rung holds {} states, the map is not affine there",
            marginal.len()
        )));
    }
    let m = marginal[0];
    let model = FluidModel::new(&sol.mix, table);
    let n = model.dim();
    let alpha = sol.mix.alpha;
    let above: Vec<bool> = (0..n).map(|i| table.rung_of(i) < rung).collect();

    let drift = |z: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n];
        let mass_above: f64 = (0..n).filter(|&i| above[i]).map(|i| z[i]).sum();
        for i in 0..n {
            let active = if above[i] {
                z[i]
            } else if i == m {
                alpha - mass_above
            } else {
                0.0
            };
            let b = model.beliefs[i];
            out[model.on1[i]] += active * b;
            out[model.off1[i]] += active * (1.0 - b);
            out[model.idle_next[i]] += z[i] - active;
            out[i] -= z[i];
        }
        out
    };

    let zero = vec![0.0; n];
    let d0 = drift(&zero);
    let a_star = DVector::from_vec(d0.clone());
    let mut q_star = DMatrix::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let dj = drift(&e);
        for i in 0..n {
            q_star[(i, j)] = dj[i] - d0[i];
        }
        e[j] = 0.0;
    }

    let eliminated: Vec<usize> = sol
        .thresholds
        .iter()
        .enumerate()
        .map(|(k, &t)| sol.mix.global_index(k, eliminated_state(t)))
        .collect();
    let kept: Vec<usize> = (0..n).filter(|i| !eliminated.contains(i)).collect();
    let block = sol.mix.block_len();
    // z = E y + c with the eliminated coordinate set from its class sum
    let mut c = DVector::<f64>::zeros(n);
    let mut embed = DMatrix::<f64>::zeros(n, kept.len());
    for (col, &i) in kept.iter().enumerate() {
        embed[(i, col)] = 1.0;
        let k = i / block;
        embed[(eliminated[k], col)] = -1.0;
    }
    for (k, &e) in eliminated.iter().enumerate() {
        c[e] = sol.mix.gamma[k];
    }
    let full_u = &q_star * &embed;
    let full_b = &q_star * &c + &a_star;
    let u_star = DMatrix::from_fn(kept.len(), kept.len(), |r, col| full_u[(kept[r], col)]);
    let b_star = DVector::from_iterator(kept.len(), kept.iter().map(|&i| full_b[i]));

    let sys = LinearizedSystem { q_star, a_star, u_star, b_star, rung, eliminated, kept };
    debug_assert!({
        let res = &sys.u_star * sys.reduce(zeta) + &sys.b_star;
        res.amax() < 1e-9
    });
    Ok(sys)
}

/// Closed-form blocks of `U*` in the randomized/deterministic split.
#[derive(Debug, Clone)]
pub struct AnalyticBlocks {
    /// Class holding the marginal rung.
    pub randomized_class: usize,
    pub q_randomized: DMatrix<f64>,
    /// Deterministic class block and coupling, absent for a single class.
    pub q_deterministic: Option<DMatrix<f64>>,
    pub coupling: Option<DMatrix<f64>>,
}

impl AnalyticBlocks {
    /// Assembles `U*` in the reduced coordinate order of [`linearize`]
    /// (classes in index order).
    pub fn assemble(&self) -> DMatrix<f64> {
        let nr = self.q_randomized.nrows();
        let Some(qd) = &self.q_deterministic else {
            return self.q_randomized.clone();
        };
        let nd = qd.nrows();
        let coupling = self.coupling.as_ref().expect("coupling present with two classes");
        let (r0, d0) = if self.randomized_class == 0 { (0, nr) } else { (nd, 0) };
        let mut u = DMatrix::<f64>::zeros(nr + nd, nr + nd);
        u.view_mut((r0, r0), (nr, nr)).copy_from(&self.q_randomized);
        u.view_mut((d0, d0), (nd, nd)).copy_from(qd);
        u.view_mut((r0, d0), (nr, nd)).copy_from(coupling);
        u
    }
}

/// Builds the blocks of `U*` directly from the class parameters.
///
/// With the marginal rung at `OffAge(h)` of the randomized class (belief
/// `b*`) and the other class activating from `OffAge(a)`, `a >= 2`:
/// the randomized block has aging rows `(1, -1)`, an `OffAge(1)` row with
/// `b* - beta_i` on active states, an `OffAge(h+1)` row with `-1` on idle
/// states and on itself, and an `OnAge(1)` row with `beta_i - b*`; the
/// coupling block is nonzero only in those last three rows
/// (`b* - 1`, `+1`, `-b*`) and only on active states of the other class.
pub fn analytic_blocks(sol: &RelaxedSolution) -> Result<AnalyticBlocks, FluidError> {
    if !sol.is_regular() {
        return Err(FluidError::AnalyticUnavailable("relaxed solution is not regular".into()));
    }
    let randomized: Vec<usize> = sol
        .thresholds
        .iter()
        .enumerate()
        .filter(|(_, t)| matches!(t, ClassThreshold::Randomized { .. }))
        .map(|(k, _)| k)
        .collect();
    if randomized.len() != 1 {
        return Err(FluidError::AnalyticUnavailable(format!(
            "need exactly one randomized class, found {}",
            randomized.len()
        )));
    }
    let kr = randomized[0];
    let ClassThreshold::Randomized { age: h } = sol.thresholds[kr] else { unreachable!() };
    let mix = &sol.mix;
    let tau = mix.tau();
    let class_r = &mix.classes[kr];
    let b_star = class_r.off_belief(h);

    // local block helpers
    let reduce_map = |elim: usize| -> Vec<Option<usize>> {
        (0..class_r.block_len())
            .map(|i| match i.cmp(&elim) {
                std::cmp::Ordering::Less => Some(i),
                std::cmp::Ordering::Equal => None,
                std::cmp::Ordering::Greater => Some(i - 1),
            })
            .collect()
    };
    let off = |l: usize| l - 1;
    let on1 = class_r.index_of(BeliefState::OnAge(1));
    let nred = class_r.block_len() - 1;

    let active_r = |s: BeliefState| match s {
        BeliefState::OffAge(l) => l > h,
        _ => true,
    };
    let skip_r = if h < tau { off(h + 1) } else { class_r.index_of(BeliefState::Stationary) };
    let map_r = reduce_map(off(h));
    let mut qr = DMatrix::<f64>::zeros(nred, nred);
    for (i, s) in class_r.states().enumerate() {
        let Some(col) = map_r[i] else { continue };
        let beta = belief_value(class_r, s);
        if active_r(s) {
            qr[(col, col)] = -1.0;
            if let Some(r) = map_r[off(1)] {
                qr[(r, col)] += b_star - beta;
            }
            if i == on1 {
                qr[(col, col)] = -(1.0 - class_r.p) - b_star;
            } else {
                qr[(map_r[on1].unwrap(), col)] += beta - b_star;
            }
        } else {
            qr[(col, col)] = -1.0;
            if let Some(next) = map_r[i + 1] {
                qr[(next, col)] = 1.0;
            }
            qr[(map_r[skip_r].unwrap(), col)] = -1.0;
        }
    }

    if mix.num_classes() == 1 {
        return Ok(AnalyticBlocks { randomized_class: kr, q_randomized: qr, q_deterministic: None, coupling: None });
    }

    let kd = 1 - kr;
    let class_d = &mix.classes[kd];
    let ClassThreshold::Deterministic { age: a } = sol.thresholds[kd] else {
        return Err(FluidError::AnalyticUnavailable("second class is not deterministic".into()));
    };
    if a < 2 {
        return Err(FluidError::AnalyticUnavailable("second class activates every state".into()));
    }
    let e = off(a - 1);
    let map_d = reduce_map(e);
    let top = if a <= tau { off(a) } else { class_d.index_of(BeliefState::Stationary) };
    let active_d = |s: BeliefState| match s {
        BeliefState::OffAge(l) => l >= a,
        _ => true,
    };
    let on1_d = class_d.index_of(BeliefState::OnAge(1));
    let mut qd = DMatrix::<f64>::zeros(nred, nred);
    let mut coupling = DMatrix::<f64>::zeros(nred, nred);
    for (i, s) in class_d.states().enumerate() {
        let Some(col) = map_d[i] else { continue };
        let beta = belief_value(class_d, s);
        // every kept coordinate feeds the eliminated one negatively
        qd[(map_d[top].unwrap(), col)] -= 1.0;
        if active_d(s) {
            qd[(col, col)] -= 1.0;
            if let Some(r) = map_d[off(1)] {
                qd[(r, col)] += 1.0 - beta;
            }
            if i == on1_d {
                qd[(col, col)] += class_d.p;
            } else {
                qd[(map_d[on1_d].unwrap(), col)] += beta;
            }
            if let Some(r) = map_r[off(1)] {
                coupling[(r, col)] = b_star - 1.0;
            }
            coupling[(map_r[skip_r].unwrap(), col)] = 1.0;
            coupling[(map_r[on1].unwrap(), col)] = -b_star;
        } else {
            qd[(col, col)] -= 1.0;
            if let Some(next) = map_d[i + 1] {
                qd[(next, col)] += 1.0;
            }
        }
    }
    Ok(AnalyticBlocks {
        randomized_class: kr,
        q_randomized: qr,
        q_deterministic: Some(qd),
        coupling: Some(coupling),
    })
}

/// Gelfand-style estimates of the spectral radius of `U* + I`.
#[derive(Debug, Clone, Serialize)]
pub struct StabilityCertificate {
    /// `(K, ||(U*+I)^K||_F^(1/K))` for `K = 64, 128, 256`.
    pub estimates: Vec<(u32, f64)>,
    pub certified: bool,
}

impl StabilityCertificate {
    /// Estimates strictly decrease with `K`.
    pub fn strictly_decreasing(&self) -> bool {
        self.estimates.windows(2).all(|w| w[1].1 < w[0].1)
    }
}

/// Estimates `rho(U* + I)` by repeated squaring with log-scaled norms.
pub fn stability_certificate(u_star: &DMatrix<f64>) -> StabilityCertificate {
    let n = u_star.nrows();
    let mut m = u_star + DMatrix::<f64>::identity(n, n);
    let mut log_scale = 0.0_f64;
    let mut estimates = Vec::new();
    let mut k: u32 = 1;
    while k < 256 {
        m = &m * &m;
        log_scale *= 2.0;
        k *= 2;
        let norm = m.norm();
        if norm == 0.0 || !norm.is_finite() {
            if norm == 0.0 {
                log_scale = f64::NEG_INFINITY;
            } else {
                log_scale = f64::INFINITY;
            }
            m.fill(0.0);
        } else {
            m /= norm;
            log_scale += norm.ln();
        }
        if k >= 64 {
            let est = if log_scale == f64::NEG_INFINITY { 0.0 } else { (log_scale / k as f64).exp() };
            estimates.push((k, est));
        }
    }
    let certified = estimates.iter().all(|&(_, e)| e < 1.0) && estimates.windows(2).all(|w| w[1].1 <= w[0].1);
    StabilityCertificate { estimates, certified }
}
