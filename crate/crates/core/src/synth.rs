//! Seeded synthetic traffic with known node roles and a controllable spatial
//! shift.
//!
//! Each node follows one of `R` phase-shifted daily profiles, scaled down on
//! weekends, plus AR(1) noise. The shifted series reassigns a random subset
//! of nodes to a different role, which is exactly the kind of change that
//! invalidates a learned per-node embedding.

use std::f64::consts::TAU;

use chrono::{NaiveDate, NaiveDateTime};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::TrafficSeries;
use crate::error::{Error, Result};

const AR_COEFF: f64 = 0.8;
const WEEKEND_FACTOR: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_nodes: usize,
    pub n_roles: usize,
    pub days: usize,
    pub steps_per_day: usize,
    /// Fraction of nodes whose role changes in the shifted series.
    pub shift_fraction: f64,
    /// Innovation standard deviation of the AR(1) noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_nodes: 40,
            n_roles: 4,
            days: 28,
            steps_per_day: 48,
            shift_fraction: 0.5,
            noise_std: 2.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 || self.n_roles == 0 || self.days == 0 || self.steps_per_day == 0 {
            return Err(Error::Config("synthetic nodes, roles, days and steps_per_day must be positive".into()));
        }
        if self.n_roles > self.n_nodes {
            return Err(Error::Config(format!(
                "{} roles for {} nodes",
                self.n_roles, self.n_nodes
            )));
        }
        if 1440 % self.steps_per_day != 0 {
            return Err(Error::Config(format!(
                "steps_per_day {} does not divide a day into whole minutes",
                self.steps_per_day
            )));
        }
        if !(0.0..=1.0).contains(&self.shift_fraction) {
            return Err(Error::Config(format!(
                "shift fraction {} outside [0, 1]",
                self.shift_fraction
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise std {} must be non-negative", self.noise_std)));
        }
        Ok(())
    }
}

/// Noiseless weekday value of `role` at `slot`.
pub fn role_profile(role: usize, n_roles: usize, slot: usize, steps_per_day: usize) -> f64 {
    let phi = TAU * role as f64 / n_roles as f64;
    let x = TAU * slot as f64 / steps_per_day as f64;
    50.0 + 30.0 * (x + phi).sin() + 10.0 * (2.0 * x + 2.0 * phi).sin()
}

/// 1.0 Monday to Friday, 0.7 at weekends (`dow` 0 is Monday).
pub fn weekday_factor(dow: usize) -> f64 {
    if dow % 7 >= 5 {
        WEEKEND_FACTOR
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub train: TrafficSeries,
    pub shifted: TrafficSeries,
    pub roles_train: Vec<usize>,
    pub roles_shifted: Vec<usize>,
}

impl SynthOutput {
    /// `node_id,role_train,role_shifted` lines.
    pub fn roles_csv(&self) -> String {
        let mut out = String::from("node_id,role_train,role_shifted\n");
        for ((id, a), b) in self.train.node_ids().iter().zip(&self.roles_train).zip(&self.roles_shifted) {
            out.push_str(&format!("{id},{a},{b}\n"));
        }
        out
    }
}

pub fn train_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2018, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

pub fn shifted_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2019, 1, 7).unwrap().and_hms_opt(0, 0, 0).unwrap()
}

pub fn node_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i:03}")).collect()
}

/// Renders a series for fixed role assignments, drawing fresh noise.
pub fn render(
    spec: &SynthSpec,
    roles: &[usize],
    start: NaiveDateTime,
    rng: &mut ChaCha8Rng,
) -> Result<TrafficSeries> {
    let t = spec.steps_per_day;
    let steps = spec.days * t;
    let n = roles.len();
    let mut values = Array2::zeros((steps, n));
    if spec.noise_std > 0.0 {
        let innovation = Normal::new(0.0, spec.noise_std).expect("validated std");
        let stationary = Normal::new(0.0, spec.noise_std / (1.0 - AR_COEFF * AR_COEFF).sqrt())
            .expect("validated std");
        for node in 0..n {
            let mut e = stationary.sample(rng);
            for s in 0..steps {
                if s > 0 {
                    e = AR_COEFF * e + innovation.sample(rng);
                }
                values[[s, node]] = e;
            }
        }
    }
    let start_dow = chrono::Datelike::weekday(&start).num_days_from_monday() as usize;
    for s in 0..steps {
        let w = weekday_factor(start_dow + s / t);
        for (node, role) in roles.iter().enumerate() {
            let v = role_profile(*role, spec.n_roles, s % t, t) * w + values[[s, node]];
            values[[s, node]] = v.max(0.0);
        }
    }
    TrafficSeries::new(values, (1440 / t) as u32, start, node_ids(n))
}

/// Balanced role assignment `i mod R`, shuffled.
pub fn assign_roles(n: usize, n_roles: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut roles: Vec<usize> = (0..n).map(|i| i % n_roles).collect();
    roles.shuffle(rng);
    roles
}

/// Moves `⌈ρN⌉` randomly chosen nodes to a different role each.
pub fn shift_roles(roles: &[usize], n_roles: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = roles.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = roles.to_vec();
    if n_roles < 2 {
        return out;
    }
    for &i in &order[..k] {
        out[i] = (roles[i] + 1 + rng.random_range(0..n_roles - 1)) % n_roles;
    }
    out
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let roles_train = assign_roles(spec.n_nodes, spec.n_roles, &mut rng);
    let roles_shifted = shift_roles(&roles_train, spec.n_roles, spec.shift_fraction, &mut rng);
    let train = render(spec, &roles_train, train_start(), &mut rng)?;
    let shifted = render(spec, &roles_shifted, shifted_start(), &mut rng)?;
    Ok(SynthOutput {
        train,
        shifted,
        roles_train,
        roles_shifted,
    })
}
