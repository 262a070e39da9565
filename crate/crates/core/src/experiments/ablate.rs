use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::train::{prepare_scenes, train};
use super::{evaluate, ExperimentConfig};
use crate::dialogue::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// One point of the ablation grid.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub overrides: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

/// Parses a grid file: each `key = v1, v2, ...` line contributes one axis;
/// cells are the Cartesian product over all axes applied to `base`.
pub fn parse_grid(text: &str, base: &ExperimentConfig) -> Result<Vec<GridCell>> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, values) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("grid line {}: expected key = values", ln + 1)))?;
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::config(format!("grid line {}: no values", ln + 1)));
        }
        // Validate every value eagerly.
        for v in &values {
            let mut probe = base.clone();
            probe.set(key, v)?;
        }
        axes.push((key.trim().to_string(), values));
    }
    if axes.is_empty() {
        return Err(Error::config("empty ablation grid"));
    }

    let mut cells: Vec<BTreeMap<String, String>> = vec![BTreeMap::new()];
    for (key, values) in &axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.insert(key.clone(), v.clone());
                next.push(c);
            }
        }
        cells = next;
    }

    cells
        .into_iter()
        .map(|overrides| {
            let mut config = base.clone();
            for (k, v) in &overrides {
                config.set(k, v)?;
            }
            Ok(GridCell { overrides, config })
        })
        .collect()
}

/// Result of one grid cell; failures are recorded, not fatal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellOutcome {
    pub overrides: BTreeMap<String, String>,
    pub best_val_dst: Option<f64>,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

impl CellOutcome {
    pub fn label(&self) -> String {
        if self.overrides.is_empty() {
            return "base".to_string();
        }
        self.overrides
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Trains and evaluates every cell on the same dataset; cells share the
/// base seed unless a cell overrides it.
pub fn run_ablation_grid(
    dataset: &Dataset,
    cells: &[GridCell],
    split: &str,
    mut progress: impl FnMut(usize, &GridCell, Option<&str>),
) -> Vec<CellOutcome> {
    let mut outcomes = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        progress(i, cell, None);
        let result = (|| -> Result<(f64, MetricsReport)> {
            let scenes = prepare_scenes(dataset, &cell.config)?;
            let outcome = train(dataset, &cell.config, &scenes, |_| {})?;
            if let Some(fault) = &outcome.aborted {
                return Err(Error::numeric("training", fault.clone()));
            }
            let (report, _) = evaluate(
                &outcome.params,
                &cell.config,
                dataset,
                &scenes,
                split,
                cell.config.prior_state_source,
                &cell.config.decode_config(),
            )?;
            Ok((outcome.best_val_dst, report))
        })();
        match result {
            Ok((val, report)) => outcomes.push(CellOutcome {
                overrides: cell.overrides.clone(),
                best_val_dst: Some(val),
                report: Some(report),
                error: None,
            }),
            Err(e) => {
                progress(i, cell, Some(&e.to_string()));
                outcomes.push(CellOutcome {
                    overrides: cell.overrides.clone(),
                    best_val_dst: None,
                    report: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    outcomes
}

/// Text table over the finished cells, Table-1 style columns.
pub fn render_grid(outcomes: &[CellOutcome]) -> String {
    let rows: Vec<(String, &MetricsReport)> = outcomes
        .iter()
        .filter_map(|c| c.report.as_ref().map(|r| (c.label(), r)))
        .collect();
    let mut text = crate::metrics::render_table(&rows);
    for c in outcomes {
        if let Some(err) = &c.error {
            text.push_str(&format!("{:<28} FAILED: {err}\n", c.label()));
        }
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_product_and_validation() {
        let base = ExperimentConfig::default();
        let cells = parse_grid(
            "features = x_bb, x_bb+x_cnn\nself_supervision = none, seg\n",
            &base,
        )
        .unwrap();
        assert_eq!(cells.len(), 4);
        let labels: Vec<String> = cells
            .iter()
            .map(|c| {
                let mut o: Vec<String> =
                    c.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
                o.sort();
                o.join(",")
            })
            .collect();
        assert!(labels.contains(&"features=x_bb,self_supervision=none".to_string()));

        assert!(parse_grid("bogus = 1\n", &base).is_err());
        assert!(parse_grid("", &base).is_err());
        assert!(parse_grid("features = warp_drive\n", &base).is_err());
    }

    #[test]
    fn includes_the_bb_no_selfsup_cell() {
        // The ablation axis must be expressible: x_bb features with
        // discrete-only states and no self-supervision.
        let base = ExperimentConfig::default();
        let cells = parse_grid(
            "features = x_bb\ninclude_time = false\nself_supervision = none\n",
            &base,
        )
        .unwrap();
        assert_eq!(cells.len(), 1);
        let c = &cells[0].config;
        assert_eq!(c.features, crate::features::VideoFeatureMode::Bb);
        assert!(!c.include_time);
    }
}
