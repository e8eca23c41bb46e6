mod common;

use std::io::Cursor;
use std::io::Read;
use std::path::PathBuf;

use common::m;
use proptest::prelude::*;
use vat_scm::datagen::{generate, GenSpec};
use vat_scm::error::Error;
use vat_scm::ingest::{load_config, load_panel, read_series_from, write_panel, write_series, PipelineConfig};
use vat_scm::{MonthKey, PriceSeries};

fn source(text: String) -> Vec<(String, Box<dyn Read>)> {
    vec![(
        "mem".to_string(),
        Box::new(Cursor::new(text.into_bytes())) as Box<dyn Read>,
    )]
}

/// 26 series over 2022-11..2024-07 with simple distinct paths.
fn paper_shaped_csv(extra: bool) -> String {
    let mut out = String::from("series_id,label,month,value\n");
    let ids: Vec<String> = std::iter::once("11111".to_string())
        .chain((1..=25).map(|i| format!("g{i:02}")))
        .chain(extra.then(|| "unused".to_string()))
        .collect();
    for (k, id) in ids.iter().enumerate() {
        for (t, month) in MonthKey::range_inclusive(m("2022-11"), m("2024-07")).enumerate() {
            let v = 100.0 + k as f64 * 0.7 + t as f64 * (0.2 + 0.01 * k as f64);
            out.push_str(&format!("{id},label {id},{month},{v}\n"));
        }
    }
    out
}

fn paper_config() -> PipelineConfig {
    PipelineConfig::with_defaults("11111", (1..=25).map(|i| format!("g{i:02}")).collect())
}

fn panel_from_text(text: String, dir: &tempfile::TempDir) -> vat_scm::Result<vat_scm::Panel> {
    let path = dir.path().join("p.csv");
    std::fs::write(&path, text).unwrap();
    load_panel(&[path], &paper_config())
}

#[test]
fn twenty_six_series_give_twenty_five_donors() {
    let dir = tempfile::tempdir().unwrap();
    let panel = panel_from_text(paper_shaped_csv(false), &dir).unwrap();
    assert_eq!(panel.donors.len(), 25);
    assert_eq!(panel.treated.id(), "11111");
    assert_eq!(panel.treated.first_month(), m("2022-11"));
    assert_eq!(panel.treated.last_month(), m("2024-07"));
    assert!(panel.donors.iter().all(|d| d.observations().len() == 21));
}

#[test]
fn unrequested_series_are_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let plain = panel_from_text(paper_shaped_csv(false), &dir).unwrap();
    let extra = panel_from_text(paper_shaped_csv(true), &dir).unwrap();
    assert_eq!(plain, extra);
}

#[test]
fn row_order_does_not_matter() {
    let dir = tempfile::tempdir().unwrap();
    let text = paper_shaped_csv(false);
    let mut lines: Vec<&str> = text.lines().skip(1).collect();
    lines.reverse();
    let shuffled = format!("series_id,label,month,value\n{}\n", lines.join("\n"));
    assert_eq!(
        panel_from_text(text.clone(), &dir).unwrap(),
        panel_from_text(shuffled, &dir).unwrap()
    );
}

#[test]
fn bad_rows_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let zero: String = paper_shaped_csv(false)
        .lines()
        .map(|l| {
            if l.starts_with("g03,label g03,2023-02,") {
                "g03,label g03,2023-02,0".to_string()
            } else {
                l.to_string()
            }
        })
        .map(|l| l + "\n")
        .collect();
    let err = panel_from_text(zero, &dir).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let msg = err.to_string();
    assert!(msg.contains("line 68") && msg.contains("positive"), "{msg}");

    let text = paper_shaped_csv(false);
    let dup_line = text.lines().nth(5).unwrap().to_string();
    let dup = format!("{text}{dup_line}\n");
    assert!(panel_from_text(dup, &dir)
        .unwrap_err()
        .to_string()
        .contains("duplicate"));

    let gap: String = text
        .lines()
        .filter(|l| !l.starts_with("g07,label g07,2023-05"))
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(panel_from_text(gap, &dir).is_err());

    let dotted = text.replacen(
        "11111,label 11111,2022-11,100",
        "11111,label 11111,11/2022,100",
        1,
    );
    assert!(panel_from_text(dotted, &dir).is_err());
}

#[test]
fn unknown_series_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.csv");
    std::fs::write(&path, paper_shaped_csv(false)).unwrap();
    let mut cfg = paper_config();
    cfg.donor_ids.push("zzz".into());
    match load_panel(&[path], &cfg) {
        Err(Error::UnknownSeries(id)) => assert_eq!(id, "zzz"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn generated_panels_round_trip() {
    for seed in 0..5 {
        let (panel, _) = generate(&GenSpec::new(9, seed)).unwrap();
        let mut buf = Vec::new();
        write_panel(&mut buf, &panel).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        std::fs::write(&path, &buf).unwrap();
        let cfg = PipelineConfig::with_defaults("treated", GenSpec::new(9, seed).donor_ids());
        assert_eq!(load_panel(&[path], &cfg).unwrap(), panel);
    }
}

#[test]
fn config_files_resolve_defaults_and_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(
        &path,
        "treated_id = \"11111\"\ndonor_ids = [\"a\", \"b\"]\ndata = [\"x.csv\"]\n",
    )
    .unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.design, vat_scm::StudyDesign::default());
    assert_eq!((cfg.tax_old, cfg.tax_new), (0.07, 0.19));
    assert_eq!(cfg.data_paths(), vec![dir.path().join("x.csv")]);
    assert_eq!(cfg.hash(), load_config(&path).unwrap().hash());

    std::fs::write(&path, "treated_id = \"a\"\ndonor_ids = [\"a\", \"b\"]\n").unwrap();
    match load_config(&path) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "donor_ids"),
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, "treated_id = \"t\"\ndonor_ids = [\"a\"]\ntax_new = 0.07\n").unwrap();
    assert!(load_config(&path)
        .unwrap_err()
        .to_string()
        .contains("degenerate tax change"));
    std::fs::write(&path, "treated_id = \"t\"\ndonor_ids = [\"a\"]\nfoo = 1\n").unwrap();
    assert!(matches!(load_config(&path), Err(Error::Parse { .. })));
    assert!(matches!(
        load_config(PathBuf::from("/nonexistent/c.toml")),
        Err(Error::Io { .. })
    ));
}

fn arb_series() -> impl Strategy<Value = Vec<PriceSeries>> {
    (1usize..6, 2usize..30, 2000i32..2030, 1u8..=12).prop_flat_map(|(n, len, year, month)| {
        proptest::collection::vec(proptest::collection::vec(1e-6f64..1e6, len), n).prop_map(move |cols| {
            let start = MonthKey::new(year, month).unwrap();
            cols.iter()
                .enumerate()
                .map(|(i, v)| {
                    PriceSeries::from_values(format!("s{i}"), format!("label, \"{i}\""), start, v).unwrap()
                })
                .collect()
        })
    })
}

proptest! {
    #[test]
    fn csv_round_trip_is_identity(series in arb_series()) {
        let refs: Vec<&PriceSeries> = series.iter().collect();
        let mut buf = Vec::new();
        write_series(&mut buf, &refs).unwrap();
        let back = read_series_from(source(String::from_utf8(buf.clone()).unwrap())).unwrap();
        prop_assert_eq!(&back, &series);
        let refs: Vec<&PriceSeries> = back.iter().collect();
        let mut again = Vec::new();
        write_series(&mut again, &refs).unwrap();
        prop_assert_eq!(buf, again);
    }
}
