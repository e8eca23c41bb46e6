//! Synthetic panels with known weights and treatment effects.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)` (rand_chacha
//! 0.9) with normal draws from `rand_distr::Normal`. Draw order is fixed:
//! per-donor parameters in donor order, then for each month the donor noise
//! innovations in donor order, then the treated noise for each month. Other
//! implementations should share fixtures through the CSV format rather than
//! reproduce the stream.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::month::MonthKey;
use crate::panel::{Panel, PriceSeries, StudyDesign};
use crate::scm::WeightVector;

pub const TREATED_ID: &str = "treated";

/// Donor price process: a shared inflation hike that flattens out, a
/// unit-specific loading on it, linear drift, an annual seasonal cycle and
/// AR(1) noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DonorProcess {
    pub base_level: f64,
    /// Total rise of the common component once the hike has played out.
    pub common_hike: f64,
    /// Time constant of the hike, months.
    pub hike_months: f64,
    /// Std. dev. of per-donor drift, index points per month.
    pub drift_sd: f64,
    pub seasonal_amplitude: f64,
    /// Std. dev. of the AR(1) innovations.
    pub noise_sd: f64,
    pub ar_coef: f64,
}

impl Default for DonorProcess {
    fn default() -> Self {
        DonorProcess {
            base_level: 100.0,
            common_hike: 8.0,
            hike_months: 6.0,
            drift_sd: 0.15,
            seasonal_amplitude: 0.5,
            noise_sd: 0.3,
            ar_coef: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenSpec {
    pub donor_count: usize,
    pub design: StudyDesign,
    /// Weights over a subset of donor ids (`d01`, `d02`, ...).
    pub true_weights: BTreeMap<String, f64>,
    pub process: DonorProcess,
    /// Std. dev. of iid noise added to the treated unit.
    pub treated_noise_sd: f64,
    /// Index points added to the treated unit, by month.
    pub effect: BTreeMap<MonthKey, f64>,
    pub seed: u64,
}

impl GenSpec {
    /// Default process over the default study windows, truth on the first
    /// three donors (0.5, 0.3, 0.2), or (0.6, 0.4) with two donors.
    pub fn new(donor_count: usize, seed: u64) -> Self {
        let shares: &[f64] = if donor_count >= 3 {
            &[0.5, 0.3, 0.2]
        } else {
            &[0.6, 0.4]
        };
        GenSpec {
            donor_count,
            design: StudyDesign::default(),
            true_weights: shares
                .iter()
                .take(donor_count)
                .enumerate()
                .map(|(i, w)| (donor_id(i, donor_count), *w))
                .collect(),
            process: DonorProcess::default(),
            treated_noise_sd: 0.0,
            effect: BTreeMap::new(),
            seed,
        }
    }

    /// Adds `points` to the treated unit from `from` through `eval_end`.
    pub fn with_step_effect(mut self, from: MonthKey, points: f64) -> Self {
        for m in MonthKey::range_inclusive(from, self.design.eval_end) {
            self.effect.insert(m, points);
        }
        self
    }

    pub fn donor_ids(&self) -> Vec<String> {
        (0..self.donor_count)
            .map(|i| donor_id(i, self.donor_count))
            .collect()
    }

    fn check(&self) -> Result<()> {
        if self.donor_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "donor_count {} < 2",
                self.donor_count
            )));
        }
        self.design.check()?;
        WeightVector::new(self.true_weights.clone())?;
        let ids = self.donor_ids();
        if let Some(id) = self.true_weights.keys().find(|k| !ids.contains(k)) {
            return Err(Error::InvalidArgument(format!(
                "true weight for unknown donor {id}"
            )));
        }
        let p = &self.process;
        if !(self.treated_noise_sd >= 0.0 && p.noise_sd >= 0.0 && p.drift_sd >= 0.0) {
            return Err(Error::InvalidArgument("standard deviations must be >= 0".into()));
        }
        if !(p.hike_months > 0.0) {
            return Err(Error::InvalidArgument("hike_months must be positive".into()));
        }
        if let Some(m) = self
            .effect
            .keys()
            .find(|m| !self.design.is_post(**m) || **m > self.design.eval_end)
        {
            return Err(Error::InvalidArgument(format!(
                "effect month {m} outside the post-treatment window"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenTruth {
    pub weights: WeightVector,
    /// Injected effect for every month of the window (zero where none).
    pub effect: BTreeMap<MonthKey, f64>,
}

pub fn donor_id(index: usize, count: usize) -> String {
    let width = count.to_string().len().max(2);
    format!("d{:0width$}", index + 1)
}

pub fn generate(spec: &GenSpec) -> Result<(Panel, GenTruth)> {
    spec.check()?;
    let p = spec.process;
    let design = spec.design;
    let months: Vec<MonthKey> = design.months().collect();
    let j_count = spec.donor_count;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let drift_dist = Normal::new(0.0, p.drift_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let noise_dist = Normal::new(0.0, p.noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    struct Params {
        level: f64,
        loading: f64,
        drift: f64,
        phase: f64,
    }
    let params: Vec<Params> = (0..j_count)
        .map(|_| Params {
            level: p.base_level * rng.random_range(0.9..1.1),
            loading: rng.random_range(0.5..1.5),
            drift: drift_dist.sample(&mut rng),
            phase: rng.random_range(0.0..TAU),
        })
        .collect();

    let mut ar_state = vec![0.0; j_count];
    let mut donor_values = vec![Vec::with_capacity(months.len()); j_count];
    for i in 0..months.len() {
        let t = i as f64;
        let common = p.common_hike * (1.0 - (-t / p.hike_months).exp());
        for (j, par) in params.iter().enumerate() {
            ar_state[j] = p.ar_coef * ar_state[j] + noise_dist.sample(&mut rng);
            let v = par.level
                + par.loading * common
                + par.drift * t
                + p.seasonal_amplitude * (TAU * t / 12.0 + par.phase).sin()
                + ar_state[j];
            donor_values[j].push(v);
        }
    }

    let ids = spec.donor_ids();
    let mut effect_path = BTreeMap::new();
    let mut treated_values = Vec::with_capacity(months.len());
    for (i, month) in months.iter().enumerate() {
        let z: f64 = StandardNormal.sample(&mut rng);
        let combo: f64 = ids
            .iter()
            .zip(&donor_values)
            .map(|(id, vals)| spec.true_weights.get(id).copied().unwrap_or(0.0) * vals[i])
            .sum();
        let effect = spec.effect.get(month).copied().unwrap_or(0.0);
        effect_path.insert(*month, effect);
        treated_values.push(combo + effect + spec.treated_noise_sd * z);
    }

    let start = design.pre_start;
    let treated = PriceSeries::from_values(TREATED_ID, "Generated treated unit", start, &treated_values)?;
    let donors = ids
        .iter()
        .zip(&donor_values)
        .map(|(id, vals)| PriceSeries::from_values(id.clone(), format!("Generated donor {id}"), start, vals))
        .collect::<Result<Vec<_>>>()?;
    let panel = Panel::new(treated, donors, design)?;

    let mut weights: BTreeMap<String, f64> = ids.iter().map(|id| (id.clone(), 0.0)).collect();
    weights.extend(spec.true_weights.clone());
    Ok((
        panel,
        GenTruth {
            weights: WeightVector::new(weights)?,
            effect: effect_path,
        },
    ))
}
