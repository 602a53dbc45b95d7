//! Ablation sweeps over strategy, prefix count and alignment composition.
//!
//! Every variant is trained on the same seeds; for each seed the corpus is
//! generated once and shared by all variants. Cells are seed means of the
//! final evaluation; `Δ` columns are differences of means in percentage
//! points.

use crate::config::RunConfig;
use crate::error::{MateError, Result};
use crate::eval::csv_err;
use crate::matryoshka::Strategy;
use crate::train::{build_datasets, train, Datasets};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Strategy,
    K,
    MseKl,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Strategy => "strategy",
            Axis::K => "K",
            Axis::MseKl => "mse_kl",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = MateError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strategy" => Ok(Axis::Strategy),
            "K" | "k" => Ok(Axis::K),
            "mse_kl" => Ok(Axis::MseKl),
            _ => Err(MateError::usage(format!(
                "unknown ablation axis `{s}` (expected strategy, K or mse_kl)"
            ))),
        }
    }
}

/// One configuration along an axis.
#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub config: RunConfig,
}

pub fn variants(base: &RunConfig, axis: Axis) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    match axis {
        Axis::Strategy => {
            for s in Strategy::ALL {
                let mut c = base.clone();
                c.matryoshka.strategy = s;
                out.push(Variant {
                    label: s.as_str().to_string(),
                    config: c,
                });
            }
        }
        Axis::K => {
            for k in 1..=5 {
                let mut c = base.clone();
                c.matryoshka.k = k;
                c.matryoshka.strategy = Strategy::Mate;
                out.push(Variant {
                    label: k.to_string(),
                    config: c,
                });
            }
        }
        Axis::MseKl => {
            for (m, k) in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                let mut c = base.clone();
                c.matryoshka.strategy = Strategy::Mate;
                c.alignment.w_mse = m;
                c.alignment.w_kl = k;
                out.push(Variant {
                    label: format!("{m}:{k}"),
                    config: c,
                });
            }
        }
    }
    for v in &out {
        v.config.validate()?;
    }
    Ok(out)
}

/// Final-evaluation numbers of one variant, one entry per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub label: String,
    pub dims: Vec<usize>,
    pub ap_full: Vec<f64>,
    pub eer_full: Vec<f64>,
    pub auc_full: Vec<f64>,
    /// AP at the smallest prefix of the variant's schedule.
    pub ap_smallest: Vec<f64>,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for a single value.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn run_variants(variants: &[Variant], seeds: &[u64]) -> Result<Vec<VariantResult>> {
    if seeds.is_empty() {
        return Err(MateError::param("at least one seed is required"));
    }
    let mut results: Vec<VariantResult> = variants
        .iter()
        .map(|v| {
            Ok(VariantResult {
                label: v.label.clone(),
                dims: v.config.prefix_schedule()?.dims().to_vec(),
                ap_full: Vec::new(),
                eer_full: Vec::new(),
                auc_full: Vec::new(),
                ap_smallest: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    for &seed in seeds {
        let mut data: Option<Datasets> = None;
        for (v, res) in variants.iter().zip(&mut results) {
            let mut cfg = v.config.clone();
            cfg.seed = seed;
            if data.is_none() {
                data = Some(build_datasets(&cfg, seed)?);
            }
            log::info!("ablation variant {} seed {seed}", v.label);
            let out = train(&cfg, data.as_ref().expect("built above"))?;
            let report = out
                .record
                .final_eval()
                .ok_or_else(|| MateError::usage("run finished without an evaluation"))?;
            let full = report.full();
            res.ap_full.push(full.ap);
            res.eer_full.push(full.eer);
            res.auc_full.push(full.auc);
            res.ap_smallest.push(report.per_dim[&res.dims[0]].ap);
        }
    }
    Ok(results)
}

/// Header plus string cells, ready for CSV or aligned text.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn pp(x: f64) -> String {
    format!("{:+.2}", 100.0 * x)
}

impl Table {
    pub fn from_results(axis: Axis, results: &[VariantResult]) -> Table {
        let key = |label: &str| results.iter().find(|r| r.label == label);
        let mut header: Vec<String> = vec![
            axis.as_str().into(),
            "dims".into(),
            "ap_full".into(),
            "ap_full_std".into(),
            "eer_full".into(),
            "auc_full".into(),
            "ap_smallest".into(),
        ];
        let (base_a, base_b, names): (Option<&VariantResult>, Option<&VariantResult>, [&str; 2]) =
            match axis {
                Axis::Strategy => (
                    key(Strategy::FullOnly.as_str()),
                    key(Strategy::PerPrefixMain.as_str()),
                    ["delta_full_pp", "delta_per_prefix_pp"],
                ),
                Axis::K => (key("1"), None, ["delta_full_pp", ""]),
                Axis::MseKl => (key("1:0"), key("0:1"), ["delta_mse_pp", "delta_kl_pp"]),
            };
        header.extend(names.iter().filter(|n| !n.is_empty()).map(|n| n.to_string()));
        let rows = results
            .iter()
            .map(|r| {
                let dims: Vec<String> = r.dims.iter().map(usize::to_string).collect();
                let mut row = vec![
                    r.label.clone(),
                    dims.join("/"),
                    pct(mean(&r.ap_full)),
                    pct(std_dev(&r.ap_full)),
                    pct(mean(&r.eer_full)),
                    pct(mean(&r.auc_full)),
                    pct(mean(&r.ap_smallest)),
                ];
                for (base, name) in [(base_a, names[0]), (base_b, names[1])] {
                    if name.is_empty() {
                        continue;
                    }
                    row.push(match base {
                        Some(b) => pp(mean(&r.ap_full) - mean(&b.ap_full)),
                        None => "-".into(),
                    });
                }
                row
            })
            .collect();
        Table { header, rows }
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            out.write_record(r).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// First column left-aligned, the rest right-aligned.
    pub fn to_text(&self) -> String {
        let n = self.header.len();
        let widths: Vec<usize> = (0..n)
            .map(|j| {
                std::iter::once(&self.header)
                    .chain(&self.rows)
                    .map(|r| r[j].len())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut s = String::new();
        for r in std::iter::once(&self.header).chain(&self.rows) {
            let cells: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    if j == 0 {
                        format!("{c:<w$}", w = widths[j])
                    } else {
                        format!("{c:>w$}", w = widths[j])
                    }
                })
                .collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}

/// Seeds `base.seed, base.seed + 1, …`.
pub fn seed_list(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}

pub fn run_ablation(base: &RunConfig, axis: Axis, seeds: &[u64]) -> Result<Table> {
    let vs = variants(base, axis)?;
    let results = run_variants(&vs, seeds)?;
    Ok(Table::from_results(axis, &results))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(label: &str, ap: &[f64]) -> VariantResult {
        VariantResult {
            label: label.into(),
            dims: vec![16, 32, 64],
            ap_full: ap.to_vec(),
            eer_full: vec![0.1; ap.len()],
            auc_full: vec![0.9; ap.len()],
            ap_smallest: ap.to_vec(),
        }
    }

    #[test]
    fn axis_values() {
        let base = RunConfig::default();
        assert_eq!(variants(&base, Axis::Strategy).unwrap().len(), 4);
        let ks = variants(&base, Axis::K).unwrap();
        assert_eq!(ks.len(), 5);
        assert_eq!(ks[4].config.prefix_schedule().unwrap().dims(), &[4, 8, 16, 32, 64]);
        let mk = variants(&base, Axis::MseKl).unwrap();
        let labels: Vec<&str> = mk.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels, ["1:0", "0:1", "1:1"]);
        assert!("depth".parse::<Axis>().is_err());
    }

    #[test]
    fn strategy_table_deltas() {
        let rs = vec![
            result("full_only", &[0.50, 0.52]),
            result("per_prefix_main", &[0.40, 0.42]),
            result("per_prefix_main_plus_align", &[0.45, 0.45]),
            result("mate", &[0.53, 0.55]),
        ];
        let t = Table::from_results(Axis::Strategy, &rs);
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.header.last().unwrap(), "delta_per_prefix_pp");
        assert_eq!(t.rows[0][7], "+0.00");
        assert_eq!(t.rows[3][7], "+3.00");
        assert_eq!(t.rows[3][8], "+13.00");
        let text = t.to_text();
        assert_eq!(text.lines().count(), 5);
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("strategy,dims,ap_full"));
    }

    #[test]
    fn spread() {
        assert_eq!(std_dev(&[1.0]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
    }
}
