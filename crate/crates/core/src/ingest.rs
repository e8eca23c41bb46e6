//! Long-format price-index CSV and pipeline configuration files.
//!
//! CSV: UTF-8, header `series_id,label,month,value`, one row per series and
//! month, `month` as `YYYY-MM`, `value` a plain decimal with `.` separator.
//!
//! Config: flat TOML (keys at top level, lists as arrays). See
//! `data/README.md` for the schema.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::inference::InferenceOptions;
use crate::month::MonthKey;
use crate::panel::{Panel, PriceSeries, StudyDesign};
use crate::passthrough::TaxChange;
use crate::scm::{SolverMethod, SolverOptions};

pub const CSV_HEADER: [&str; 4] = ["series_id", "label", "month", "value"];

/// Config file contents as written. Every key is optional except
/// `treated_id` and `donor_ids`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    treated_id: Option<String>,
    donor_ids: Option<Vec<String>>,
    data: Option<Vec<String>>,
    total_cpi_id: Option<String>,
    pre_start: Option<String>,
    pre_end: Option<String>,
    treatment_start: Option<String>,
    eval_end: Option<String>,
    tax_effective: Option<String>,
    annotate_from: Option<String>,
    annotate_to: Option<String>,
    annotate_label: Option<String>,
    tax_old: Option<f64>,
    tax_new: Option<f64>,
    output_dir: Option<String>,
    rebase: Option<bool>,
    trim_poor_prefit: Option<bool>,
    tolerance: Option<f64>,
    kkt_tol: Option<f64>,
    max_iters: Option<usize>,
    solver: Option<SolverMethod>,
    execution: Option<Execution>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Annotation {
    pub from: MonthKey,
    pub to: MonthKey,
    pub label: String,
}

/// Fully resolved pipeline configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub treated_id: String,
    pub donor_ids: Vec<String>,
    pub design: StudyDesign,
    pub tax_old: f64,
    pub tax_new: f64,
    /// First month the new rate is in force. Treated months before it are
    /// reported as anticipation.
    pub tax_effective: MonthKey,
    /// Labeled month window marked on the price chart.
    pub annotation: Option<Annotation>,
    /// Data files as written in the config, relative to `base_dir`.
    pub data: Vec<String>,
    pub total_cpi_id: Option<String>,
    pub output_dir: String,
    /// Rebase every series to 100 at `pre_start` before fitting.
    pub rebase: bool,
    pub trim_poor_prefit: bool,
    pub solver: SolverOptions,
    #[serde(skip)]
    pub execution: Execution,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    /// Config with default windows, taxes and solver settings.
    pub fn with_defaults(treated_id: impl Into<String>, donor_ids: Vec<String>) -> Self {
        PipelineConfig {
            treated_id: treated_id.into(),
            donor_ids,
            design: StudyDesign::default(),
            tax_old: 0.07,
            tax_new: 0.19,
            tax_effective: MonthKey::new(2024, 1).expect("valid month"),
            annotation: Some(Annotation {
                from: MonthKey::new(2024, 6).expect("valid month"),
                to: MonthKey::new(2024, 7).expect("valid month"),
                label: "UEFA Euro 2024".into(),
            }),
            data: Vec::new(),
            total_cpi_id: None,
            output_dir: "out".into(),
            rebase: false,
            trim_poor_prefit: false,
            solver: SolverOptions::default(),
            execution: Execution::default(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn tax_change(&self) -> Result<TaxChange> {
        TaxChange::new(self.tax_old, self.tax_new)
    }

    pub fn inference_options(&self) -> InferenceOptions {
        InferenceOptions {
            solver: self.solver,
            execution: self.execution,
            trim_poor_prefit: self.trim_poor_prefit,
        }
    }

    pub fn data_paths(&self) -> Vec<PathBuf> {
        self.data.iter().map(|p| self.base_dir.join(p)).collect()
    }

    pub fn output_path(&self) -> PathBuf {
        self.base_dir.join(&self.output_dir)
    }

    /// SHA-256 of the resolved config's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>, source: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: source.to_string(),
            message: e.to_string().trim_end().to_string(),
        })?;
        let field = |name: &str, message: String| Error::Config {
            field: name.to_string(),
            message,
        };
        let treated_id = raw
            .treated_id
            .ok_or_else(|| field("treated_id", "missing".into()))?;
        let donor_ids = raw
            .donor_ids
            .ok_or_else(|| field("donor_ids", "missing".into()))?;
        let mut cfg = PipelineConfig::with_defaults(treated_id, donor_ids);
        cfg.base_dir = base_dir.into();

        let defaults = StudyDesign::default();
        let month = |name: &str, value: Option<String>, default: MonthKey| -> Result<MonthKey> {
            match value {
                Some(s) => s.parse().map_err(|e: Error| field(name, e.to_string())),
                None => Ok(default),
            }
        };
        let design = StudyDesign {
            pre_start: month("pre_start", raw.pre_start, defaults.pre_start)?,
            pre_end: month("pre_end", raw.pre_end, defaults.pre_end)?,
            treatment_start: month("treatment_start", raw.treatment_start, defaults.treatment_start)?,
            eval_end: month("eval_end", raw.eval_end, defaults.eval_end)?,
        };
        design.check().map_err(|e| field("pre_start", e.to_string()))?;
        cfg.design = design;
        cfg.tax_effective = month("tax_effective", raw.tax_effective, cfg.tax_effective)?;
        if raw.annotate_from.is_some() || raw.annotate_to.is_some() || raw.annotate_label.is_some() {
            let current = cfg.annotation.clone().expect("default annotation");
            let from = month("annotate_from", raw.annotate_from, current.from)?;
            let to = month("annotate_to", raw.annotate_to, current.to)?;
            let label = raw.annotate_label.unwrap_or(current.label);
            cfg.annotation = (!label.is_empty()).then_some(Annotation { from, to, label });
        }

        if let Some(t) = raw.tax_old {
            cfg.tax_old = t;
        }
        if let Some(t) = raw.tax_new {
            cfg.tax_new = t;
        }
        cfg.data = raw.data.unwrap_or_default();
        cfg.total_cpi_id = raw.total_cpi_id;
        if let Some(o) = raw.output_dir {
            cfg.output_dir = o;
        }
        cfg.rebase = raw.rebase.unwrap_or(false);
        cfg.trim_poor_prefit = raw.trim_poor_prefit.unwrap_or(false);
        if let Some(t) = raw.tolerance {
            cfg.solver.tolerance = t;
        }
        if let Some(t) = raw.kkt_tol {
            cfg.solver.kkt_tol = t;
        }
        if let Some(n) = raw.max_iters {
            cfg.solver.max_iters = n;
        }
        if let Some(m) = raw.solver {
            cfg.solver.method = m;
        }
        if let Some(e) = raw.execution {
            cfg.execution = e;
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// Semantic checks on a resolved config.
    pub fn check(&self) -> Result<()> {
        let field = |name: &str, message: &str| Error::Config {
            field: name.to_string(),
            message: message.to_string(),
        };
        if self.treated_id.is_empty() {
            return Err(field("treated_id", "empty id"));
        }
        if self.donor_ids.is_empty() {
            return Err(field("donor_ids", "donor list is empty"));
        }
        if self.donor_ids.contains(&self.treated_id) {
            return Err(field("donor_ids", "treated unit present in donor pool"));
        }
        let unique: BTreeSet<&String> = self.donor_ids.iter().collect();
        if unique.len() != self.donor_ids.len() {
            return Err(field("donor_ids", "duplicate donor id"));
        }
        for (name, rate) in [("tax_old", self.tax_old), ("tax_new", self.tax_new)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(field(name, "rate must lie in [0, 1)"));
            }
        }
        if self.tax_new == self.tax_old {
            return Err(field("tax_new", "degenerate tax change"));
        }
        if self.tax_new < self.tax_old {
            return Err(field("tax_new", "tax_new must exceed tax_old"));
        }
        if !(self.solver.tolerance > 0.0 && self.solver.kkt_tol > 0.0) {
            return Err(field("kkt_tol", "tolerances must be positive"));
        }
        if self.solver.max_iters == 0 {
            return Err(field("max_iters", "must be positive"));
        }
        self.design
            .check()
            .map_err(|e| field("pre_start", &e.to_string()))
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    PipelineConfig::parse(&text, base, &path.display().to_string())
}

struct RawRow {
    line: u64,
    label: String,
    month: MonthKey,
    value: f64,
}

/// Reads every row of the given CSV files, keeping only series in `wanted`
/// (all series when `wanted` is `None`).
fn read_rows(
    sources: &mut [(String, Box<dyn Read + '_>)],
    wanted: Option<&BTreeSet<&str>>,
) -> Result<BTreeMap<String, BTreeMap<MonthKey, RawRow>>> {
    let mut out: BTreeMap<String, BTreeMap<MonthKey, RawRow>> = BTreeMap::new();
    for (name, reader) in sources.iter_mut() {
        let parse_err = |line: u64, message: String| Error::Parse {
            path: name.clone(),
            message: format!("line {line}: {message}"),
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(parse_err(
                1,
                format!("expected header `{}`", CSV_HEADER.join(",")),
            ));
        }
        for record in rdr.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let id = &record[0];
            if wanted.is_some_and(|w| !w.contains(id)) {
                continue;
            }
            let month: MonthKey = record[2]
                .parse()
                .map_err(|e: Error| parse_err(line, e.to_string()))?;
            let value = parse_value(&record[3]).map_err(|m| parse_err(line, m))?;
            if !(value > 0.0) {
                return Err(parse_err(
                    line,
                    format!("series {id} at {month}: value {value} is not strictly positive"),
                ));
            }
            let rows = out.entry(id.to_string()).or_default();
            if let Some(prev) = rows.get(&month) {
                return Err(parse_err(
                    line,
                    format!(
                        "duplicate row for series {id} at {month} (first on line {})",
                        prev.line
                    ),
                ));
            }
            rows.insert(
                month,
                RawRow {
                    line,
                    label: record[1].to_string(),
                    month,
                    value,
                },
            );
        }
    }
    Ok(out)
}

fn parse_value(s: &str) -> std::result::Result<f64, String> {
    let ok = !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'));
    let v: f64 = if ok { s.parse().ok() } else { None }
        .ok_or_else(|| format!("value `{s}` is not a plain decimal number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("value `{s}` is not finite"))
    }
}

fn assemble(id: &str, rows: BTreeMap<MonthKey, RawRow>) -> Result<PriceSeries> {
    let mut labels = rows.values().map(|r| r.label.as_str()).collect::<BTreeSet<_>>();
    if labels.len() > 1 {
        return Err(Error::InvalidSeries {
            series: id.to_string(),
            reason: format!("inconsistent labels {labels:?}"),
        });
    }
    let label = labels.pop_first().unwrap_or_default().to_string();
    PriceSeries::new(
        id,
        label,
        rows.into_values().map(|r| (r.month, r.value)).collect(),
    )
}

fn open_all(paths: &[PathBuf]) -> Result<Vec<(String, Box<dyn Read>)>> {
    paths
        .iter()
        .map(|p| {
            let f = std::fs::File::open(p).map_err(|e| Error::io(p, e))?;
            Ok((
                p.display().to_string(),
                Box::new(std::io::BufReader::new(f)) as Box<dyn Read>,
            ))
        })
        .collect()
}

/// Reads all series from in-memory CSV sources `(name, reader)`.
pub fn read_series_from<'a>(mut sources: Vec<(String, Box<dyn Read + 'a>)>) -> Result<Vec<PriceSeries>> {
    read_rows(&mut sources, None)?
        .into_iter()
        .map(|(id, rows)| assemble(&id, rows))
        .collect()
}

/// Reads every series in the given files, sorted by id.
pub fn read_series(paths: &[PathBuf]) -> Result<Vec<PriceSeries>> {
    read_series_from(open_all(paths)?)
}

/// Reads the requested series (in request order).
pub fn load_series(paths: &[PathBuf], ids: &[&str]) -> Result<Vec<PriceSeries>> {
    let wanted: BTreeSet<&str> = ids.iter().copied().collect();
    let mut sources = open_all(paths)?;
    let mut rows = read_rows(&mut sources, Some(&wanted))?;
    ids.iter()
        .map(|id| {
            let r = rows
                .remove(*id)
                .ok_or_else(|| Error::UnknownSeries(id.to_string()))?;
            assemble(id, r)
        })
        .collect()
}

/// Builds the panel named by `config` from the CSV files, restricted to
/// `[pre_start, eval_end]`. Unrequested series are ignored.
pub fn load_panel(paths: &[PathBuf], config: &PipelineConfig) -> Result<Panel> {
    let mut ids: Vec<&str> = vec![config.treated_id.as_str()];
    ids.extend(config.donor_ids.iter().map(String::as_str));
    let series = load_series(paths, &ids)?;
    panel_from_series(series, config)
}

fn panel_from_series(series: Vec<PriceSeries>, config: &PipelineConfig) -> Result<Panel> {
    let d = config.design;
    let mut restricted = series
        .iter()
        .map(|s| s.restricted(d.pre_start, d.eval_end))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let treated = restricted.next().expect("treated requested first");
    Panel::new(treated, restricted.collect(), d)
}

/// Config for a data file without a config file: every series other than
/// `treated_id` becomes a donor, defaults everywhere else.
pub fn infer_config(paths: &[PathBuf], treated_id: &str) -> Result<PipelineConfig> {
    let all = read_series(paths)?;
    if !all.iter().any(|s| s.id() == treated_id) {
        return Err(Error::UnknownSeries(treated_id.to_string()));
    }
    let donors = all
        .iter()
        .map(|s| s.id().to_string())
        .filter(|id| id != treated_id)
        .collect();
    let mut cfg = PipelineConfig::with_defaults(treated_id, donors);
    cfg.data = paths.iter().map(|p| p.display().to_string()).collect();
    cfg.base_dir = PathBuf::new();
    cfg.check()?;
    Ok(cfg)
}

/// Writes series in long format: series in the given order, months
/// ascending, values in shortest round-trip form.
pub fn write_series<W: Write>(writer: W, series: &[&PriceSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Structural(format!("csv write failed: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for s in series {
        for (month, value) in s.observations() {
            w.write_record([s.id(), s.label(), &month.to_string(), &value.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))
}

pub fn write_panel<W: Write>(writer: W, panel: &Panel) -> Result<()> {
    let all: Vec<&PriceSeries> = std::iter::once(&panel.treated).chain(&panel.donors).collect();
    write_series(writer, &all)
}

/// Writes the panel CSV to `path` atomically.
pub fn write_panel_file(path: impl AsRef<Path>, panel: &Panel) -> Result<()> {
    let mut buf = Vec::new();
    write_panel(&mut buf, panel)?;
    crate::report::write_atomic(path.as_ref(), &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn donors(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{:03}", 31 + i)).collect()
    }

    fn config_text(extra: &str) -> String {
        let list: Vec<String> = donors(25).iter().map(|d| format!("\"{d}\"")).collect();
        format!(
            "treated_id = \"11111\"\ndonor_ids = [{}]\n{extra}",
            list.join(", ")
        )
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = PipelineConfig::parse(&config_text(""), ".", "cfg").unwrap();
        assert_eq!(cfg.donor_ids.len(), 25);
        assert_eq!(cfg.design, StudyDesign::default());
        assert_eq!(cfg.design.pre_len(), 12);
        assert_eq!((cfg.tax_old, cfg.tax_new), (0.07, 0.19));
        assert!(!cfg.rebase);
        assert_eq!(cfg.solver, SolverOptions::default());
    }

    #[test]
    fn degenerate_tax_change_is_semantic_error() {
        let err =
            PipelineConfig::parse(&config_text("tax_old = 0.19\ntax_new = 0.19\n"), ".", "cfg").unwrap_err();
        match err {
            Error::Config { field, message } => {
                assert_eq!(field, "tax_new");
                assert_eq!(message, "degenerate tax change");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn treated_in_donors_names_field() {
        let err = PipelineConfig::parse("treated_id = \"a\"\ndonor_ids = [\"a\", \"b\"]\n", ".", "cfg")
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "donor_ids"));
    }

    #[test]
    fn parse_error_has_line_context() {
        let err = PipelineConfig::parse(
            "treated_id = \"a\"\ndonor_ids = [\"b\", \n tax_old = \n",
            ".",
            "cfg.toml",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cfg.toml"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
        let err = PipelineConfig::parse(&config_text("colour = 1\n"), ".", "cfg").unwrap_err();
        assert!(err.to_string().contains("colour"));
    }

    #[test]
    fn bad_month_in_config() {
        let err = PipelineConfig::parse(&config_text("pre_start = \"11/2022\"\n"), ".", "cfg").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "pre_start"));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = PipelineConfig::parse(&config_text(""), ".", "cfg").unwrap();
        let b = PipelineConfig::parse(&config_text(""), "/elsewhere", "cfg").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = PipelineConfig::parse(&config_text("rebase = true\n"), ".", "cfg").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    fn read(text: &str) -> Result<Vec<PriceSeries>> {
        read_series_from(vec![(
            "mem.csv".to_string(),
            Box::new(text.as_bytes()) as Box<dyn Read>,
        )])
    }

    #[test]
    fn zero_value_is_rejected_with_row() {
        let err = read("series_id,label,month,value\na,A,2023-01,100.0\na,A,2023-02,0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("not strictly positive"), "{msg}");
    }

    #[test]
    fn duplicate_rows_rejected() {
        let err = read("series_id,label,month,value\na,A,2023-01,100\na,A,2023-01,101\n").unwrap_err();
        assert!(err.to_string().contains("duplicate row"));
    }

    #[test]
    fn locale_formats_rejected() {
        assert!(read("series_id,label,month,value\na,A,01.2023,100\n").is_err());
        assert!(read("series_id,label,month,value\na,A,2023-01,\"100,5\"\n").is_err());
        assert!(read("series_id,label,month,value\na,A,2023-01,1 000\n").is_err());
        assert!(read("id,label,month,value\na,A,2023-01,100\n").is_err());
    }

    #[test]
    fn row_order_does_not_matter() {
        let a = read(
            "series_id,label,month,value\na,A,2023-01,100\nb,B,2023-02,3\na,A,2023-02,101\nb,B,2023-01,2\n",
        )
        .unwrap();
        let b = read(
            "series_id,label,month,value\nb,B,2023-01,2\na,A,2023-02,101\nb,B,2023-02,3\na,A,2023-01,100\n",
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gap_is_error() {
        let err = read("series_id,label,month,value\na,A,2023-01,100\na,A,2023-03,101\n").unwrap_err();
        assert!(err.to_string().contains("gap"));
    }
}
