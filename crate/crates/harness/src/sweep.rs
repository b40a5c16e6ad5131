//! Cartesian sweeps over time window, retrieve count, fusion mode,
//! collector switch and seed; one CSV row per trained cell.

use std::path::Path;

use ashnet_core::model::VisualMode;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::train::train;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub time_window: usize,
    pub retrieve_count: usize,
    pub sr_mode: VisualMode,
    pub collector_enabled: bool,
    pub seed: u64,
    pub final_loss: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

/// Every cell of the sweep as a full run configuration, seeds innermost.
pub fn cells(base: &RunConfig) -> Vec<RunConfig> {
    let s = &base.sweep;
    let mut out = Vec::new();
    for t in or_base(&s.time_window, base.model.time_window) {
        for phi in or_base(&s.retrieve_count, base.train.retrieve_count) {
            for mode in or_base(&s.sr_mode, base.model.visual_mode) {
                for collector in or_base(&s.collector_enabled, base.model.collector_enabled) {
                    for seed in or_base(&s.seeds, base.seed) {
                        let mut c = base.clone();
                        c.model.time_window = t;
                        c.train.retrieve_count = phi;
                        c.model.visual_mode = mode;
                        c.model.collector_enabled = collector;
                        c.seed = seed;
                        c.sweep = Default::default();
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}

/// Trains every cell and, with `out`, writes `sweep.csv` there.
pub fn run_sweep(base: &RunConfig, out: Option<&Path>) -> Result<Vec<SweepRow>> {
    base.validate()?;
    let mut rows = Vec::new();
    for cell in cells(base) {
        let outcome = train(&cell, None)?;
        rows.push(SweepRow {
            time_window: cell.model.time_window,
            retrieve_count: cell.train.retrieve_count,
            sr_mode: cell.model.visual_mode,
            collector_enabled: cell.model.collector_enabled,
            seed: cell.seed,
            final_loss: *outcome.epoch_mean_losses().last().expect("epochs > 0"),
            r_at_1: outcome.recall.r_at_1,
            r_at_5: outcome.recall.r_at_5,
            r_at_10: outcome.recall.r_at_10,
        });
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cartesian_cell_count() {
        let mut base = RunConfig::default();
        base.sweep.time_window = vec![1, 5, 10, 20];
        base.sweep.retrieve_count = vec![4, 8, 16];
        base.sweep.seeds = vec![0, 1];
        let c = cells(&base);
        assert_eq!(c.len(), 24);
        assert_eq!(c[0].model.time_window, 1);
        assert_eq!(c[1].seed, 1);
        assert_eq!(c[23].train.retrieve_count, 16);
        assert!(c.iter().all(|x| x.sweep == Default::default()));
    }

    #[test]
    fn empty_axes_keep_base() {
        let c = cells(&RunConfig::default());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].model.time_window, 10);
    }
}
