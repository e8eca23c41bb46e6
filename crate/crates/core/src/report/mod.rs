//! End-to-end pipeline run and its CSV, SVG and JSON artifacts.
//!
//! Everything is computed in memory first; files are written only once the
//! whole bundle exists, each through a temp file and rename. CSV is the
//! authoritative output; the SVG charts render the same numbers.

pub mod format;
pub mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{leave_one_out, placebo_test, LooResult, PlaceboResult, UnitStatistic};
use crate::ingest::{load_config, load_panel, load_series, PipelineConfig};
use crate::month::MonthKey;
use crate::panel::{Panel, PriceSeries};
use crate::passthrough::{full_passthrough_series, passthrough_rate, treatment_effect, TreatmentEffect};
use crate::scm::{ScmFit, SolverDiagnostics};
use format::{fmt_points, fmt_rate, CsvTable};
use svg::{Band as SvgBand, Line, LineChart};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pre,
    /// Treated but before the tax is in force.
    Anticipation,
    Post,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pre => "pre",
            Phase::Anticipation => "anticipation",
            Phase::Post => "post",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonthlyRow {
    pub month: MonthKey,
    pub phase: Phase,
    pub actual: f64,
    pub synthetic: f64,
    pub full_passthrough: Option<f64>,
    pub gap: f64,
    pub passthrough_rate: Option<f64>,
    pub effect_percent: Option<f64>,
    pub annotation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitSummary {
    pub weights: BTreeMap<String, f64>,
    pub pre_rmspe: f64,
    pub objective: f64,
    pub diagnostics: SolverDiagnostics,
}

impl FitSummary {
    pub fn of(fit: &ScmFit) -> Self {
        FitSummary {
            weights: fit.weights.as_map().clone(),
            pre_rmspe: fit.pre_rmspe,
            objective: fit.objective_value,
            diagnostics: fit.diagnostics,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LooRow {
    pub month: MonthKey,
    pub baseline_gap: f64,
    pub min: f64,
    pub max: f64,
    pub variants: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlaceboSummary {
    pub treated_rank: usize,
    pub ranked_units: usize,
    pub units: Vec<UnitStatistic>,
    pub failures: BTreeMap<String, String>,
    /// Months where the treated gap lies strictly outside the placebo
    /// min/max envelope.
    pub months_outside_envelope: Vec<MonthKey>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetadata {
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub config_hash: String,
    pub generated_at: String,
    pub treated_id: String,
    /// Donor pool as used, so results can be audited against a different
    /// pool.
    pub donor_ids: Vec<String>,
    /// `published` or `rebased_100_at_pre_start`.
    pub index_mode: &'static str,
    pub tax_old: f64,
    pub tax_new: f64,
    pub full_factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportBundle {
    pub metadata: RunMetadata,
    pub fit: FitSummary,
    pub monthly: Vec<MonthlyRow>,
    pub loo: Vec<LooRow>,
    pub placebo: PlaceboSummary,
    /// Treated vs. total CPI, when a total CPI series is configured.
    pub total_cpi: Option<Vec<(MonthKey, f64, f64)>>,
    #[serde(skip)]
    pub loo_result: LooResult,
    #[serde(skip)]
    pub placebo_result: PlaceboResult,
}

impl ReportBundle {
    pub fn row(&self, month: MonthKey) -> Option<&MonthlyRow> {
        self.monthly.iter().find(|r| r.month == month)
    }

    pub fn effect(&self, month: MonthKey) -> Result<TreatmentEffect> {
        treatment_effect(&self.loo_result.baseline, month)
    }
}

/// Loads the config and data, runs fit, LOO and placebo, and writes every
/// artifact into the configured output directory.
pub fn run_pipeline(config_path: impl AsRef<Path>) -> Result<ReportBundle> {
    let config = load_config(config_path)?;
    let out = config.output_path();
    run_pipeline_with(&config, &out)
}

/// Same as [`run_pipeline`] with an explicit config and output directory.
pub fn run_pipeline_with(config: &PipelineConfig, out_dir: &Path) -> Result<ReportBundle> {
    let paths = config.data_paths();
    let mut panel = load_panel(&paths, config)?;
    if config.rebase {
        panel = panel.rebased()?;
    }
    let total_cpi = match &config.total_cpi_id {
        Some(id) => {
            let mut s = load_series(&paths, &[id.as_str()])?.remove(0);
            if config.rebase {
                s = s.rebased(config.design.pre_start)?;
            }
            Some(s)
        }
        None => None,
    };
    let bundle = build_report(config, &panel, total_cpi.as_ref())?;
    write_bundle(&bundle, config, out_dir)?;
    Ok(bundle)
}

pub fn build_report(
    config: &PipelineConfig,
    panel: &Panel,
    total_cpi: Option<&PriceSeries>,
) -> Result<ReportBundle> {
    let tax = config.tax_change()?;
    let design = panel.design;
    let opts = config.inference_options();
    let loo_result = leave_one_out(panel, &opts)?;
    let placebo_result = placebo_test(panel, &opts)?;
    let fit = &loo_result.baseline;
    let full = full_passthrough_series(fit, &tax, &design)?;

    let mut monthly = Vec::new();
    for month in design.months() {
        let actual = fit.actual_at(month)?;
        let synthetic = fit.synthetic_at(month)?;
        let phase = if !design.is_post(month) {
            Phase::Pre
        } else if month < config.tax_effective {
            Phase::Anticipation
        } else {
            Phase::Post
        };
        let post = phase != Phase::Pre;
        let annotation = config
            .annotation
            .as_ref()
            .filter(|a| a.from <= month && month <= a.to)
            .map(|a| a.label.clone());
        monthly.push(MonthlyRow {
            month,
            phase,
            actual,
            synthetic,
            full_passthrough: full.get(month),
            gap: fit.gap_at(month)?,
            passthrough_rate: if post {
                Some(passthrough_rate(actual, synthetic, &tax)?)
            } else {
                None
            },
            effect_percent: if post {
                Some(treatment_effect(fit, month)?.percent)
            } else {
                None
            },
            annotation,
        });
    }

    let loo = loo_result
        .band
        .iter()
        .map(|(month, band)| LooRow {
            month: *month,
            baseline_gap: fit.gap[month],
            min: band.min,
            max: band.max,
            variants: loo_result
                .variants
                .iter()
                .map(|(id, f)| (id.clone(), f.gap[month]))
                .collect(),
        })
        .collect();

    let envelope = placebo_result.envelope();
    let months_outside_envelope = design
        .months()
        .filter(|m| {
            let g = placebo_result.treated_fit.gap[m];
            let b = envelope[m];
            g > b.max || g < b.min
        })
        .collect();
    let placebo = PlaceboSummary {
        treated_rank: placebo_result.treated_rank,
        ranked_units: placebo_result.ranked_units,
        units: placebo_result.statistics.clone(),
        failures: placebo_result.failures.clone(),
        months_outside_envelope,
    };

    let total_cpi = match total_cpi {
        Some(cpi) => Some(
            design
                .months()
                .map(|m| Ok((m, fit.actual_at(m)?, cpi.value(m)?)))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };

    let metadata = RunMetadata {
        tool: env!("CARGO_PKG_NAME"),
        tool_version: env!("CARGO_PKG_VERSION"),
        config_hash: config.hash(),
        generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        treated_id: panel.treated.id().to_string(),
        donor_ids: panel.donor_ids().into_iter().map(str::to_string).collect(),
        index_mode: if config.rebase {
            "rebased_100_at_pre_start"
        } else {
            "published"
        },
        tax_old: tax.tax_old(),
        tax_new: tax.tax_new(),
        full_factor: tax.full_factor(),
    };

    Ok(ReportBundle {
        metadata,
        fit: FitSummary::of(fit),
        monthly,
        loo,
        placebo,
        total_cpi,
        loo_result,
        placebo_result,
    })
}

/// Output file names with their contents, in write order.
pub fn render_files(bundle: &ReportBundle, config: &PipelineConfig) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = vec![
        ("weights.csv".to_string(), weights_table(&bundle.fit).into_bytes()),
        ("figure2.csv".to_string(), figure2_table(bundle).into_bytes()),
        (
            "figure2.svg".to_string(),
            figure2_chart(bundle, config).into_bytes(),
        ),
        ("figure3.csv".to_string(), figure3_table(bundle).into_bytes()),
        ("figure3.svg".to_string(), figure3_chart(bundle).into_bytes()),
        (
            "figure4.csv".to_string(),
            figure4_table(&bundle.placebo_result).into_bytes(),
        ),
        ("figure4.svg".to_string(), figure4_chart(bundle).into_bytes()),
        (
            "placebo_ranks.csv".to_string(),
            placebo_table(&bundle.placebo.units).into_bytes(),
        ),
    ];
    if let Some(rows) = &bundle.total_cpi {
        files.push(("figure1.csv".to_string(), figure1_table(rows).into_bytes()));
        files.push((
            "figure1.svg".to_string(),
            figure1_chart(bundle, rows).into_bytes(),
        ));
    }
    let mut summary = serde_json::to_vec_pretty(bundle)
        .map_err(|e| Error::Structural(format!("summary serialization failed: {e}")))?;
    summary.push(b'\n');
    files.push(("summary.json".to_string(), summary));
    Ok(files)
}

fn write_bundle(bundle: &ReportBundle, config: &PipelineConfig, out_dir: &Path) -> Result<()> {
    let files = render_files(bundle, config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written: Vec<PathBuf> = Vec::new();
    for (name, bytes) in &files {
        let path = out_dir.join(name);
        if let Err(e) = write_atomic(&path, bytes) {
            for p in &written {
                let _ = std::fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    Ok(())
}

/// Writes `bytes` to a temp file next to `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn weights_table(fit: &FitSummary) -> String {
    let mut t = CsvTable::new(&["donor_id", "weight"]);
    for (id, w) in &fit.weights {
        t.row([id.clone(), fmt_rate(*w)]);
    }
    t.finish()
}

fn opt(v: Option<f64>, f: fn(f64) -> String) -> String {
    v.map(f).unwrap_or_default()
}

pub fn figure2_table(bundle: &ReportBundle) -> String {
    let mut t = CsvTable::new(&[
        "month",
        "phase",
        "actual",
        "synthetic",
        "full_passthrough",
        "gap",
        "passthrough_rate",
        "effect_percent",
        "annotation",
    ]);
    for r in &bundle.monthly {
        t.row([
            r.month.to_string(),
            r.phase.as_str().to_string(),
            fmt_points(r.actual),
            fmt_points(r.synthetic),
            opt(r.full_passthrough, fmt_points),
            fmt_points(r.gap),
            opt(r.passthrough_rate, fmt_rate),
            opt(r.effect_percent, fmt_rate),
            r.annotation.clone().unwrap_or_default(),
        ]);
    }
    t.finish()
}

pub fn figure3_table(bundle: &ReportBundle) -> String {
    loo_table(&bundle.loo_result)
}

/// Baseline gap, LOO band and every variant's gap, by month.
pub fn loo_table(loo: &LooResult) -> String {
    let ids: Vec<&String> = loo.variants.keys().collect();
    let mut header = vec![
        "month".to_string(),
        "baseline_gap".into(),
        "loo_min".into(),
        "loo_max".into(),
    ];
    header.extend(ids.iter().map(|id| format!("without_{id}")));
    let mut t = CsvTable::from_header(header);
    for (month, band) in &loo.band {
        let mut row = vec![
            month.to_string(),
            fmt_points(loo.baseline.gap[month]),
            fmt_points(band.min),
            fmt_points(band.max),
        ];
        row.extend(ids.iter().map(|id| fmt_points(loo.variants[*id].gap[month])));
        t.row(row);
    }
    t.finish()
}

pub fn figure4_table(placebo: &PlaceboResult) -> String {
    let envelope = placebo.envelope();
    let ids: Vec<&String> = placebo.placebo_fits.keys().collect();
    let mut header = vec![
        "month".to_string(),
        "treated_gap".into(),
        "placebo_min".into(),
        "placebo_max".into(),
    ];
    header.extend(ids.iter().map(|id| format!("placebo_{id}")));
    let mut t = CsvTable::from_header(header);
    for (month, gap) in &placebo.treated_fit.gap {
        let band = envelope[month];
        let mut row = vec![
            month.to_string(),
            fmt_points(*gap),
            fmt_points(band.min),
            fmt_points(band.max),
        ];
        row.extend(
            ids.iter()
                .map(|id| fmt_points(placebo.placebo_fits[*id].gap[month])),
        );
        t.row(row);
    }
    t.finish()
}

/// One row per unit: the treated unit, then every placebo unit.
pub fn placebo_table(units: &[UnitStatistic]) -> String {
    let mut t = CsvTable::new(&[
        "unit_id",
        "role",
        "pre_rmspe",
        "post_rmspe",
        "ratio",
        "rank",
        "poor_prefit",
    ]);
    for u in units {
        t.row([
            u.unit_id.clone(),
            if u.is_treated { "treated" } else { "placebo" }.to_string(),
            fmt_points(u.pre_rmspe),
            fmt_points(u.post_rmspe),
            fmt_rate(u.ratio),
            u.rank.map(|r| r.to_string()).unwrap_or_default(),
            u.poor_prefit.to_string(),
        ]);
    }
    t.finish()
}

pub fn figure1_table(rows: &[(MonthKey, f64, f64)]) -> String {
    let mut t = CsvTable::new(&["month", "treated", "total_cpi"]);
    for (m, a, c) in rows {
        t.row([m.to_string(), fmt_points(*a), fmt_points(*c)]);
    }
    t.finish()
}

fn months(bundle: &ReportBundle) -> Vec<MonthKey> {
    bundle.monthly.iter().map(|r| r.month).collect()
}

fn figure1_chart(bundle: &ReportBundle, rows: &[(MonthKey, f64, f64)]) -> String {
    LineChart {
        title: format!(
            "{} and total consumer price index",
            bundle.loo_result.baseline.actual.label()
        ),
        y_label: "Index".into(),
        months: months(bundle),
        lines: vec![
            Line::new("Treated", rows.iter().map(|r| Some(r.1)).collect(), "#1f3b73"),
            Line::new("Total CPI", rows.iter().map(|r| Some(r.2)).collect(), "#b03a2e"),
        ],
        marker: Some(bundle.loo_result.baseline.design.pre_end),
        ..Default::default()
    }
    .render()
}

fn figure2_chart(bundle: &ReportBundle, config: &PipelineConfig) -> String {
    let rows = &bundle.monthly;
    let labels = rows
        .iter()
        .filter(|r| r.phase == Phase::Post)
        .filter_map(|r| {
            let rate = r.passthrough_rate?;
            Some((
                r.month,
                r.actual.max(r.full_passthrough.unwrap_or(r.actual)),
                format!("{:.1}%", rate * 100.0),
            ))
        })
        .collect();
    LineChart {
        title: "Actual and synthetic prices".into(),
        y_label: "Index".into(),
        months: months(bundle),
        lines: vec![
            Line::new("Actual", rows.iter().map(|r| Some(r.actual)).collect(), "#1f3b73"),
            Line::new(
                format!("Synthetic ({:.0}% VAT)", config.tax_old * 100.0),
                rows.iter().map(|r| Some(r.synthetic)).collect(),
                "#555555",
            )
            .dashed("3,3"),
            Line::new(
                format!("Full pass-through ({:.0}%)", config.tax_new * 100.0),
                rows.iter().map(|r| r.full_passthrough).collect(),
                "#b03a2e",
            )
            .dashed("10,5"),
        ],
        marker: Some(bundle.loo_result.baseline.design.pre_end),
        highlight: config
            .annotation
            .as_ref()
            .map(|a| (a.from, a.to, a.label.clone())),
        labels,
        ..Default::default()
    }
    .render()
}

fn figure3_chart(bundle: &ReportBundle) -> String {
    let mut lines: Vec<Line> = bundle
        .loo_result
        .variants
        .keys()
        .map(|id| {
            Line::new(
                format!("without {id}"),
                bundle.loo.iter().map(|r| Some(r.variants[id])).collect(),
                "#8c8c8c",
            )
            .thin()
        })
        .collect();
    lines.push(Line::new(
        "Treatment effect",
        bundle.loo.iter().map(|r| Some(r.baseline_gap)).collect(),
        "#1f3b73",
    ));
    LineChart {
        title: "Treatment effect and leave-one-out estimates".into(),
        y_label: "Gap (index points)".into(),
        months: months(bundle),
        lines,
        bands: vec![SvgBand {
            name: "Leave-one-out range".into(),
            lower: bundle.loo.iter().map(|r| Some(r.min)).collect(),
            upper: bundle.loo.iter().map(|r| Some(r.max)).collect(),
            color: "#8c8c8c",
        }],
        marker: Some(bundle.loo_result.baseline.design.pre_end),
        zero_line: true,
        ..Default::default()
    }
    .render()
}

fn figure4_chart(bundle: &ReportBundle) -> String {
    let p = &bundle.placebo_result;
    let ms = months(bundle);
    let mut lines: Vec<Line> = p
        .placebo_fits
        .iter()
        .map(|(id, f)| {
            Line::new(
                format!("placebo {id}"),
                ms.iter().map(|m| Some(f.gap[m])).collect(),
                "#9a9a9a",
            )
            .thin()
        })
        .collect();
    lines.push(Line::new(
        "Treatment effect",
        ms.iter().map(|m| Some(p.treated_fit.gap[m])).collect(),
        "#1f3b73",
    ));
    LineChart {
        title: "Treatment effect and placebo effects".into(),
        y_label: "Gap (index points)".into(),
        months: ms,
        lines,
        marker: Some(p.treated_fit.design.pre_end),
        zero_line: true,
        ..Default::default()
    }
    .render()
}
