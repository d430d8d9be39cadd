use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::penalties::{blind_penalty, drug_penalty, resource_penalty, validate_drug_matrix};
use super::Rollout;
use crate::error::usage;
use crate::rng::{self, Rng};
use crate::Result;

pub const NUM_ACTIONS: usize = 3;
pub const NUM_CONDITIONS: usize = 3;
pub const NUM_VITALS: usize = 3;
pub(crate) const HIGH_INTENSITY: usize = 2;

/// Treatment efficacy per action (none, standard, high intensity).
pub const EFFICACY: [f64; NUM_ACTIONS] = [0.0, 0.05, 0.12];

const MATCH_BONUS: f64 = 0.4;
const SEVERITY_WEIGHT: f64 = 0.6;
const OVERTREAT_PENALTY: f64 = 3.0;
const OVERTREAT_THRESHOLD: f64 = 0.85;
const RESOLVED_SEVERITY: f64 = 0.05;

/// Vital index each condition acts on: cardiac → heart rate,
/// respiratory → oxygen saturation, renal → blood pressure.
const RELEVANT_VITAL: [usize; NUM_CONDITIONS] = [0, 2, 1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub patients: usize,
    pub agents: usize,
    pub budget: usize,
    pub drug_matrix: [[f64; 3]; 3],
    pub horizon: usize,
    pub noise: f64,
    pub match_probability: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            patients: 100,
            agents: 3,
            budget: 2,
            drug_matrix: [[0.0, 0.8, 0.5], [0.8, 0.0, 0.3], [0.5, 0.3, 0.0]],
            horizon: 50,
            noise: 0.01,
            match_probability: 0.7,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 || self.agents > NUM_CONDITIONS {
            return Err(usage!("agents must be in 1..={}, got {}", NUM_CONDITIONS, self.agents));
        }
        if self.patients < self.agents {
            return Err(usage!(
                "{} patients cannot be assigned to {} agents",
                self.patients,
                self.agents
            ));
        }
        if self.horizon == 0 {
            return Err(usage!("horizon must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(usage!("noise must be finite and non-negative, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.match_probability) {
            return Err(usage!("match_probability must be in [0, 1]"));
        }
        validate_drug_matrix(&self.drug_matrix)
    }

    /// Per-agent observation width: vitals, condition one-hot, severity,
    /// one gated risk entry per agent slot, agent one-hot.
    pub fn obs_dim(&self) -> usize {
        NUM_VITALS + NUM_CONDITIONS + 1 + 2 * self.agents
    }

    /// Global state width: all observations plus the focal patients' full
    /// hidden-risk vectors.
    pub fn state_dim(&self) -> usize {
        self.agents * (self.obs_dim() + NUM_CONDITIONS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patient {
    pub vitals: [f64; NUM_VITALS],
    /// Zero-based condition index.
    pub condition: usize,
    pub risk: [f64; NUM_CONDITIONS],
    pub severity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub blind_penalties: Vec<f64>,
    pub drug_penalty: f64,
    pub resource_penalty: f64,
    pub vital_gains: Vec<f64>,
    pub severity_changes: Vec<f64>,
    pub overtreated: Vec<bool>,
    pub matched: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub metrics: StepMetrics,
}

/// The hospital Dec-POMDP: `N` specialists each treat one focal patient.
///
/// Agent `i` has specialty `i` (zero-based). A specialist sees a patient's
/// hidden risk only for its own specialty's condition, so the risk that
/// matters when an agent treats a mismatched patient is visible only to
/// some other agent.
///
/// ```
/// use seqcomm_core::env::{EnvConfig, HospitalEnv};
/// let mut env = HospitalEnv::reset(EnvConfig::default(), 7).unwrap();
/// let out = env.step(&[0, 1, 2]).unwrap();
/// assert!(out.reward.is_finite());
/// ```
#[derive(Clone, Debug)]
pub struct HospitalEnv {
    config: EnvConfig,
    patients: Vec<Patient>,
    specialties: Vec<usize>,
    assignment: Vec<usize>,
    start_severity: Vec<f64>,
    steps: usize,
    done: bool,
    rng: Rng,
}

impl HospitalEnv {
    pub fn reset(config: EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let patients = (0..config.patients)
            .map(|_| Patient {
                vitals: core::array::from_fn(|_| rng::uniform(&mut rng, 0.3, 0.7)),
                condition: rng::index(&mut rng, NUM_CONDITIONS),
                risk: core::array::from_fn(|_| rng::unit(&mut rng)),
                severity: rng::uniform(&mut rng, 0.2, 0.8),
            })
            .collect();
        let specialties = (0..config.agents).collect();
        let mut env = Self {
            config,
            patients,
            specialties,
            assignment: Vec::new(),
            start_severity: Vec::new(),
            steps: 0,
            done: false,
            rng,
        };
        env.assign();
        Ok(env)
    }

    /// Builds an environment from explicit patients and assignment.
    pub fn from_parts(
        config: EnvConfig,
        patients: Vec<Patient>,
        assignment: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if patients.len() != config.patients {
            return Err(usage!("expected {} patients, got {}", config.patients, patients.len()));
        }
        if assignment.len() != config.agents {
            return Err(usage!("assignment must name one patient per agent"));
        }
        for (i, &j) in assignment.iter().enumerate() {
            if j >= patients.len() || assignment[..i].contains(&j) {
                return Err(usage!("assignment must be injective and in range"));
            }
        }
        for p in &patients {
            if p.condition >= NUM_CONDITIONS {
                return Err(usage!("condition index {} out of range", p.condition));
            }
        }
        let start_severity = assignment.iter().map(|&j| patients[j].severity).collect();
        Ok(Self {
            specialties: (0..config.agents).collect(),
            config,
            patients,
            assignment,
            start_severity,
            steps: 0,
            done: false,
            rng: rng::seeded(seed),
        })
    }

    fn assign(&mut self) {
        let mut taken = vec![false; self.patients.len()];
        let mut assignment = Vec::with_capacity(self.config.agents);
        for &spec in &self.specialties {
            let want_match = rng::unit(&mut self.rng) < self.config.match_probability;
            let free = |j: &usize| !taken[*j];
            let best_match = (0..self.patients.len())
                .filter(free)
                .filter(|&j| self.patients[j].condition == spec)
                .max_by(|&a, &b| self.patients[a].severity.total_cmp(&self.patients[b].severity));
            let mismatched: Vec<usize> = (0..self.patients.len())
                .filter(free)
                .filter(|&j| self.patients[j].condition != spec)
                .collect();
            let j = match (want_match, best_match) {
                (true, Some(j)) => j,
                _ if !mismatched.is_empty() => {
                    mismatched[rng::index(&mut self.rng, mismatched.len())]
                }
                (_, Some(j)) => j,
                _ => unreachable!("patients >= agents is validated"),
            };
            taken[j] = true;
            assignment.push(j);
        }
        self.start_severity = assignment.iter().map(|&j| self.patients[j].severity).collect();
        self.assignment = assignment;
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn patients(&self) -> &[Patient] {
        &self.patients
    }

    pub fn specialties(&self) -> &[usize] {
        &self.specialties
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn agents(&self) -> usize {
        self.config.agents
    }

    pub fn focal(&self, agent: usize) -> &Patient {
        &self.patients[self.assignment[agent]]
    }

    /// Whether agent `i`'s specialty matches its focal patient's condition.
    pub fn matched(&self, agent: usize) -> bool {
        self.specialties[agent] == self.focal(agent).condition
    }

    /// Risk entry agent `viewer` sees for agent `slot`'s focal patient:
    /// the patient's risk for the viewer's specialty if that is the
    /// patient's condition, else exactly zero.
    pub fn gated_risk(&self, viewer: usize, slot: usize) -> f64 {
        let p = self.focal(slot);
        let spec = self.specialties[viewer];
        if spec == p.condition {
            p.risk[spec]
        } else {
            0.0
        }
    }

    pub fn observation(&self, agent: usize) -> Vec<f64> {
        let n = self.config.agents;
        let p = self.focal(agent);
        let mut obs = Vec::with_capacity(self.config.obs_dim());
        obs.extend_from_slice(&p.vitals);
        obs.extend((0..NUM_CONDITIONS).map(|c| if c == p.condition { 1.0 } else { 0.0 }));
        obs.push(p.severity);
        obs.extend((0..n).map(|k| self.gated_risk(agent, k)));
        obs.extend((0..n).map(|k| if k == agent { 1.0 } else { 0.0 }));
        obs
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.config.agents).map(|i| self.observation(i)).collect()
    }

    pub fn global_state(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.config.state_dim());
        for i in 0..self.config.agents {
            s.extend(self.observation(i));
        }
        for i in 0..self.config.agents {
            s.extend_from_slice(&self.focal(i).risk);
        }
        s
    }

    /// Whether every focal patient's severity is below the resolution
    /// threshold. Unlike [`is_done`](Self::is_done), ignores the horizon.
    pub fn resolved(&self) -> bool {
        (0..self.config.agents).all(|i| self.focal(i).severity < RESOLVED_SEVERITY)
    }

    /// Mean severity reduction of the focal patients since reset.
    pub fn severity_improvement(&self) -> f64 {
        let n = self.config.agents as f64;
        self.assignment
            .iter()
            .zip(&self.start_severity)
            .map(|(&j, c0)| c0 - self.patients[j].severity)
            .sum::<f64>()
            / n
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        if self.done {
            return Err(usage!("step called on a finished episode"));
        }
        let n = self.config.agents;
        if actions.len() != n {
            return Err(usage!("expected {} actions, got {}", n, actions.len()));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= NUM_ACTIONS) {
            return Err(usage!("action {} out of range", a));
        }
        let conditions: Vec<usize> = (0..n).map(|i| self.focal(i).condition).collect();
        let drug = drug_penalty(actions, &conditions, &self.config.drug_matrix)?;
        let resource = resource_penalty(actions, self.config.budget);
        let mut metrics = StepMetrics {
            drug_penalty: drug,
            resource_penalty: resource,
            ..StepMetrics::default()
        };
        let mut reward = -drug - resource;
        for (i, &a) in actions.iter().enumerate() {
            let spec = self.specialties[i];
            let noise = self.config.noise * rng::normal(&mut self.rng);
            let p = &mut self.patients[self.assignment[i]];
            let matched = spec == p.condition;
            let exposure = if matched { 0.0 } else { p.risk[p.condition] };
            let effect = EFFICACY[a] * (1.0 - exposure);

            let old_sev = p.severity;
            p.severity = (old_sev - effect + noise).clamp(0.0, 1.0);
            let dc = p.severity - old_sev;

            let k = RELEVANT_VITAL[p.condition];
            let old_v = p.vitals[k];
            p.vitals[k] = (old_v + 2.0 * effect * (0.5 - old_v)).clamp(0.0, 1.0);
            let dv = (old_v - 0.5).abs() - (p.vitals[k] - 0.5).abs();

            let over = p.vitals.iter().cloned().fold(f64::MIN, f64::max) > OVERTREAT_THRESHOLD;
            let blind = blind_penalty(spec, p.condition, p.risk[p.condition], a);
            reward += dv + if matched { MATCH_BONUS } else { 0.0 } - SEVERITY_WEIGHT * dc
                - if over { OVERTREAT_PENALTY } else { 0.0 }
                - blind;
            metrics.blind_penalties.push(blind);
            metrics.vital_gains.push(dv);
            metrics.severity_changes.push(dc);
            metrics.overtreated.push(over);
            metrics.matched.push(matched);
        }
        self.steps += 1;
        self.done = self.resolved() || self.steps >= self.config.horizon;
        Ok(StepOutcome { reward, done: self.done, metrics })
    }
}

impl Rollout for HospitalEnv {
    fn reseed(&mut self, seed: u64) {
        self.rng = rng::seeded(seed);
    }

    fn advance(&mut self, actions: &[usize]) -> Result<(f64, bool)> {
        let out = self.step(actions)?;
        Ok((out.reward, out.done))
    }
}
