//! Leave-one-out and in-space placebo refits.
//!
//! Every refit is independent; they run through [`exec::map_ordered`] and
//! are assembled by unit id, so sequential and parallel runs produce the
//! same result.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::month::MonthKey;
use crate::panel::{Panel, StudyDesign};
use crate::scm::{fit_weights, rmspe, ScmFit, SolverOptions};

/// Placebo units whose pre-RMSPE exceeds this multiple of the treated
/// unit's are flagged as poor pre-fits.
pub const POOR_PREFIT_FACTOR: f64 = 5.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub solver: SolverOptions,
    pub execution: Execution,
    /// Drop flagged poor pre-fit placebos from ranking and envelope.
    pub trim_poor_prefit: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Band {
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LooResult {
    pub baseline: ScmFit,
    /// Refit without the keyed donor.
    pub variants: BTreeMap<String, ScmFit>,
    /// Per-month min/max gap across variants.
    pub band: BTreeMap<MonthKey, Band>,
}

/// Refits once per donor with positive baseline weight, each time leaving
/// that donor out.
pub fn leave_one_out(panel: &Panel, opts: &InferenceOptions) -> Result<LooResult> {
    if panel.donor_count() < 3 {
        return Err(Error::Structural(format!(
            "leave-one-out needs at least 3 donors, panel has {}",
            panel.donor_count()
        )));
    }
    let baseline = fit_weights(panel, &opts.solver)?;
    let excluded: Vec<String> = baseline
        .weights
        .positive_ids()
        .into_iter()
        .map(str::to_string)
        .collect();
    if excluded.is_empty() {
        return Err(Error::Structural(
            "baseline fit has no positive-weight donor".into(),
        ));
    }
    let fits = exec::map_ordered(&excluded, opts.execution, |id| {
        let reduced = panel.without_donor(id)?;
        if reduced.donor_count() < 2 {
            return Err(Error::Structural(format!(
                "leaving out {id} leaves fewer than 2 donors"
            )));
        }
        fit_weights(&reduced, &opts.solver)
    });
    let mut variants = BTreeMap::new();
    for (id, fit) in excluded.into_iter().zip(fits) {
        variants.insert(id, fit?);
    }
    let band = baseline
        .gap
        .keys()
        .map(|month| {
            let (min, max) = variants
                .values()
                .map(|f| f.gap[month])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), g| {
                    (lo.min(g), hi.max(g))
                });
            (*month, Band { min, max })
        })
        .collect();
    Ok(LooResult {
        baseline,
        variants,
        band,
    })
}

/// Post/pre RMSPE of a fit. Infinite when the pre-fit is exact but the
/// post-period is not; zero when both vanish.
pub fn rmspe_ratio(fit: &ScmFit, design: &StudyDesign) -> Result<f64> {
    let pre = rmspe(fit, design.pre_start, design.pre_end)?;
    let post = rmspe(fit, design.treatment_start, design.eval_end)?;
    Ok(if pre > 0.0 {
        post / pre
    } else if post > 0.0 {
        f64::INFINITY
    } else {
        0.0
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnitStatistic {
    pub unit_id: String,
    pub is_treated: bool,
    pub pre_rmspe: f64,
    pub post_rmspe: f64,
    pub ratio: f64,
    /// Pre-RMSPE above [`POOR_PREFIT_FACTOR`] times the treated unit's.
    pub poor_prefit: bool,
    /// 1 = largest ratio. `None` when trimmed.
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlaceboResult {
    pub treated_fit: ScmFit,
    pub placebo_fits: BTreeMap<String, ScmFit>,
    /// Placebo refits that failed, with the error message.
    pub failures: BTreeMap<String, String>,
    /// Treated unit first, then placebo units by id.
    pub statistics: Vec<UnitStatistic>,
    pub ratios: BTreeMap<String, f64>,
    pub treated_rank: usize,
    pub ranked_units: usize,
}

impl PlaceboResult {
    pub fn statistic(&self, unit_id: &str) -> Option<&UnitStatistic> {
        self.statistics.iter().find(|s| s.unit_id == unit_id)
    }

    /// Per-month min/max gap over the placebo units that take part in the
    /// ranking.
    pub fn envelope(&self) -> BTreeMap<MonthKey, Band> {
        let included: Vec<&ScmFit> = self
            .statistics
            .iter()
            .filter(|s| !s.is_treated && s.rank.is_some())
            .filter_map(|s| self.placebo_fits.get(&s.unit_id))
            .collect();
        self.treated_fit
            .gap
            .keys()
            .map(|month| {
                let (min, max) = included
                    .iter()
                    .map(|f| f.gap[month])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), g| {
                        (lo.min(g), hi.max(g))
                    });
                (*month, Band { min, max })
            })
            .collect()
    }
}

/// Treats each donor in turn as if it had been treated, using the other
/// donors (never the real treated unit) as its pool, and ranks the real
/// treated unit's post/pre RMSPE ratio among all units.
///
/// Ranking is by ratio, descending. Infinite ratios are ordered among
/// themselves by post-RMSPE, descending. Remaining ties go to the smaller
/// unit id.
pub fn placebo_test(panel: &Panel, opts: &InferenceOptions) -> Result<PlaceboResult> {
    if panel.donor_count() < 3 {
        return Err(Error::Structural(format!(
            "placebo test needs at least 3 donors, panel has {}",
            panel.donor_count()
        )));
    }
    let design = panel.design;
    let treated_fit = fit_weights(panel, &opts.solver)?;
    let ids: Vec<String> = panel.donor_ids().into_iter().map(str::to_string).collect();
    let fits = exec::map_ordered(&ids, opts.execution, |id| {
        panel.placebo_for(id).and_then(|p| fit_weights(&p, &opts.solver))
    });

    let mut placebo_fits = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for (id, fit) in ids.into_iter().zip(fits) {
        match fit {
            Ok(f) => {
                placebo_fits.insert(id, f);
            }
            Err(e) => {
                failures.insert(id, e.to_string());
            }
        }
    }

    let unit_stat = |id: &str, fit: &ScmFit, is_treated: bool| -> Result<UnitStatistic> {
        Ok(UnitStatistic {
            unit_id: id.to_string(),
            is_treated,
            pre_rmspe: rmspe(fit, design.pre_start, design.pre_end)?,
            post_rmspe: rmspe(fit, design.treatment_start, design.eval_end)?,
            ratio: rmspe_ratio(fit, &design)?,
            poor_prefit: false,
            rank: None,
        })
    };
    let mut statistics = vec![unit_stat(panel.treated.id(), &treated_fit, true)?];
    for (id, fit) in &placebo_fits {
        statistics.push(unit_stat(id, fit, false)?);
    }
    let treated_pre = statistics[0].pre_rmspe;
    for s in statistics.iter_mut().skip(1) {
        s.poor_prefit = s.pre_rmspe > POOR_PREFIT_FACTOR * treated_pre;
    }

    let mut order: Vec<usize> = (0..statistics.len())
        .filter(|&i| !(opts.trim_poor_prefit && statistics[i].poor_prefit))
        .collect();
    order.sort_by(|&a, &b| rank_order(&statistics[a], &statistics[b]));
    for (pos, &i) in order.iter().enumerate() {
        statistics[i].rank = Some(pos + 1);
    }
    let treated_rank = statistics[0].rank.expect("treated unit is never trimmed");
    let ratios = statistics.iter().map(|s| (s.unit_id.clone(), s.ratio)).collect();

    Ok(PlaceboResult {
        treated_fit,
        placebo_fits,
        failures,
        statistics,
        ratios,
        treated_rank,
        ranked_units: order.len(),
    })
}

fn rank_order(a: &UnitStatistic, b: &UnitStatistic) -> Ordering {
    let by_ratio = b.ratio.total_cmp(&a.ratio);
    let by_post = if a.ratio.is_infinite() && b.ratio.is_infinite() {
        b.post_rmspe.total_cmp(&a.post_rmspe)
    } else {
        Ordering::Equal
    };
    by_ratio.then(by_post).then_with(|| a.unit_id.cmp(&b.unit_id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PriceSeries;

    fn m(s: &str) -> MonthKey {
        s.parse().unwrap()
    }

    fn design() -> StudyDesign {
        StudyDesign::new(m("2023-01"), m("2023-04"), m("2023-05"), m("2023-06")).unwrap()
    }

    fn series(id: &str, vals: &[f64]) -> PriceSeries {
        PriceSeries::from_values(id, id, m("2023-01"), vals).unwrap()
    }

    #[test]
    fn ratio_examples() {
        let panel = Panel::new(
            series("t", &[101.0, 101.0, 101.0, 101.0, 102.0, 102.0]),
            vec![series("a", &[100.0; 6]), series("b", &[100.0; 6])],
            design(),
        )
        .unwrap();
        let fit = fit_weights(&panel, &SolverOptions::default()).unwrap();
        assert!((rmspe_ratio(&fit, &panel.design).unwrap() - 2.0).abs() < 1e-12);

        let flat = Panel::new(
            series("t", &[100.0; 6]),
            vec![series("a", &[100.0; 6]), series("b", &[100.0; 6])],
            design(),
        )
        .unwrap();
        let fit = fit_weights(&flat, &SolverOptions::default()).unwrap();
        assert_eq!(rmspe_ratio(&fit, &flat.design).unwrap(), 0.0);

        let jump = Panel::new(
            series("t", &[100.0, 100.0, 100.0, 100.0, 104.0, 104.0]),
            vec![series("a", &[100.0; 6]), series("b", &[100.0; 6])],
            design(),
        )
        .unwrap();
        let fit = fit_weights(&jump, &SolverOptions::default()).unwrap();
        assert_eq!(rmspe_ratio(&fit, &jump.design).unwrap(), f64::INFINITY);
    }

    #[test]
    fn zero_effect_treated_ranks_last() {
        // Treated equals donor a throughout; other donors diverge post-period.
        let a = [100.0, 101.0, 102.0, 103.0, 104.0, 105.0];
        let panel = Panel::new(
            series("t", &a),
            vec![
                series("a", &a),
                series("b", &[99.0, 101.5, 101.0, 104.0, 110.0, 112.0]),
                series("c", &[101.0, 100.0, 103.5, 102.0, 97.0, 95.0]),
            ],
            design(),
        )
        .unwrap();
        let res = placebo_test(&panel, &InferenceOptions::default()).unwrap();
        assert_eq!(res.statistics.len(), 4);
        assert_eq!(res.treated_rank, 4);
        for id in ["a", "b", "c"] {
            let fit = &res.placebo_fits[id];
            assert!(!fit.weights.iter().any(|(d, _)| d == "t" || d == id));
            assert_eq!(fit.weights.len(), 2);
        }
    }

    #[test]
    fn too_few_donors_is_structural() {
        let panel = Panel::new(
            series("t", &[100.0; 6]),
            vec![series("a", &[100.0; 6]), series("b", &[101.0; 6])],
            design(),
        )
        .unwrap();
        let opts = InferenceOptions::default();
        assert!(matches!(placebo_test(&panel, &opts), Err(Error::Structural(_))));
        assert!(matches!(leave_one_out(&panel, &opts), Err(Error::Structural(_))));
    }

    #[test]
    fn single_positive_donor_gives_one_variant() {
        let a = [100.0, 101.0, 102.0, 103.0, 104.0, 105.0];
        let panel = Panel::new(
            series("t", &a),
            vec![
                series("a", &a),
                series("b", &[90.0, 91.5, 91.0, 94.0, 90.0, 92.0]),
                series("c", &[80.0, 80.0, 83.5, 82.0, 87.0, 85.0]),
            ],
            design(),
        )
        .unwrap();
        let loo = leave_one_out(&panel, &InferenceOptions::default()).unwrap();
        assert_eq!(loo.variants.len(), 1);
        assert!(loo.variants.contains_key("a"));
        assert_eq!(loo.variants["a"].weights.len(), 2);
        for band in loo.band.values() {
            assert!(band.min <= band.max);
        }
    }

    #[test]
    fn infinite_ratios_order_by_post_rmspe() {
        let stat = |id: &str, ratio: f64, post: f64| UnitStatistic {
            unit_id: id.into(),
            is_treated: false,
            pre_rmspe: 0.0,
            post_rmspe: post,
            ratio,
            poor_prefit: false,
            rank: None,
        };
        let mut v = [
            stat("a", 3.0, 1.0),
            stat("b", f64::INFINITY, 1.0),
            stat("c", f64::INFINITY, 2.0),
            stat("d", 3.0, 5.0),
        ];
        v.sort_by(rank_order);
        let ids: Vec<&str> = v.iter().map(|s| s.unit_id.as_str()).collect();
        assert_eq!(ids, ["c", "b", "a", "d"]);
    }
}
