//! Pass-through of an ad-valorem tax change into consumer prices.
//!
//! The counterfactual at the old rate is the synthetic series. Full
//! pass-through scales it by `(1 + tax_new) / (1 + tax_old)`; the
//! pass-through rate is the realised gap as a share of that full increase.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::month::MonthKey;
use crate::panel::{PriceSeries, StudyDesign};
use crate::scm::ScmFit;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxChange {
    tax_old: f64,
    tax_new: f64,
}

impl TaxChange {
    pub fn new(tax_old: f64, tax_new: f64) -> Result<Self> {
        for (name, rate) in [("tax_old", tax_old), ("tax_new", tax_new)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidArgument(format!("{name} = {rate} outside [0, 1)")));
            }
        }
        if tax_old == tax_new {
            return Err(Error::InvalidArgument("degenerate tax change".into()));
        }
        Ok(TaxChange { tax_old, tax_new })
    }

    pub fn tax_old(&self) -> f64 {
        self.tax_old
    }

    pub fn tax_new(&self) -> f64 {
        self.tax_new
    }

    /// Gross-price ratio under full pass-through.
    pub fn full_factor(&self) -> f64 {
        (1.0 + self.tax_new) / (1.0 + self.tax_old)
    }
}

/// Monthly pass-through rates from `treatment_start` on. Unclamped.
pub type PassThroughSeries = BTreeMap<MonthKey, f64>;

/// Synthetic series scaled to the new tax rate, defined from
/// `treatment_start` through `eval_end`.
pub fn full_passthrough_series(fit: &ScmFit, tax: &TaxChange, design: &StudyDesign) -> Result<PriceSeries> {
    let factor = tax.full_factor();
    let obs = design
        .post_months()
        .map(|m| Ok((m, fit.synthetic_at(m)? * factor)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    PriceSeries::new(
        format!("{}_full_passthrough", fit.actual.id()),
        format!("Full pass-through at {:.0}%", tax.tax_new * 100.0),
        obs,
    )
}

/// `(actual - synthetic) / (synthetic * (full_factor - 1))`.
pub fn passthrough_rate(actual: f64, synthetic: f64, tax: &TaxChange) -> Result<f64> {
    if !(synthetic > 0.0) || !synthetic.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "synthetic value {synthetic} must be positive"
        )));
    }
    Ok((actual - synthetic) / (synthetic * (tax.full_factor() - 1.0)))
}

pub fn passthrough_series(fit: &ScmFit, tax: &TaxChange, design: &StudyDesign) -> Result<PassThroughSeries> {
    design
        .post_months()
        .map(|m| Ok((m, passthrough_rate(fit.actual_at(m)?, fit.synthetic_at(m)?, tax)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TreatmentEffect {
    /// Gap in index points.
    pub points: f64,
    /// `actual / synthetic - 1`.
    pub percent: f64,
}

pub fn treatment_effect(fit: &ScmFit, month: MonthKey) -> Result<TreatmentEffect> {
    if month < fit.design.treatment_start {
        return Err(Error::InvalidArgument(format!(
            "{month} precedes treatment start {}",
            fit.design.treatment_start
        )));
    }
    let actual = fit.actual_at(month)?;
    let synthetic = fit.synthetic_at(month)?;
    Ok(TreatmentEffect {
        points: fit.gap_at(month)?,
        percent: actual / synthetic - 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vat() -> TaxChange {
        TaxChange::new(0.07, 0.19).unwrap()
    }

    #[test]
    fn full_factor_value() {
        assert!((vat().full_factor() - 1.112150).abs() < 1e-6);
    }

    #[test]
    fn degenerate_change_rejected() {
        assert!(TaxChange::new(0.07, 0.07).is_err());
        assert!(TaxChange::new(-0.01, 0.19).is_err());
        assert!(TaxChange::new(0.07, 1.0).is_err());
    }

    #[test]
    fn full_passthrough_scaling() {
        let f = vat().full_factor();
        assert!(((100.0 * f) * 1000.0).round() / 1000.0 == 111.215);
        // 107 * 1.19 / 1.07 = 119 in exact arithmetic.
        assert!((107.0 * f - 119.0).abs() < 1e-12);
    }

    #[test]
    fn rate_examples() {
        let t = vat();
        assert_eq!(passthrough_rate(100.0, 100.0, &t).unwrap(), 0.0);
        assert!((passthrough_rate(100.0 * 1.19 / 1.07, 100.0, &t).unwrap() - 1.0).abs() < 1e-12);
        // 5.6 / (100 * 12/107)
        let expected = 5.6 / (1200.0 / 107.0);
        let got = passthrough_rate(105.6, 100.0, &t).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.49933).abs() < 1e-5);
        assert!(passthrough_rate(100.0, 0.0, &t).is_err());
        assert!(passthrough_rate(100.0, -1.0, &t).is_err());
    }

    #[test]
    fn tax_decrease_full_response_is_one() {
        let cut = TaxChange::new(0.19, 0.07).unwrap();
        assert!(cut.full_factor() < 1.0);
        let rate = passthrough_rate(100.0 * cut.full_factor(), 100.0, &cut).unwrap();
        assert!((rate - 1.0).abs() < 1e-12);
        // Prices rising after a cut count as negative pass-through.
        assert!(passthrough_rate(101.0, 100.0, &cut).unwrap() < 0.0);
    }

    proptest! {
        #[test]
        fn rate_is_scale_invariant(a in 50.0f64..200.0, s in 50.0f64..200.0, c in 0.01f64..100.0) {
            let t = vat();
            let r1 = passthrough_rate(a, s, &t).unwrap();
            let r2 = passthrough_rate(a * c, s * c, &t).unwrap();
            prop_assert!((r1 - r2).abs() <= 1e-12 * r1.abs().max(1.0));
        }

        #[test]
        fn rate_strictly_increasing_in_actual(a in 50.0f64..200.0, d in 1e-6f64..10.0, s in 50.0f64..200.0) {
            let t = vat();
            prop_assert!(passthrough_rate(a + d, s, &t).unwrap() > passthrough_rate(a, s, &t).unwrap());
        }
    }
}
