//! Picking one tuning config for every device.

use thiserror::Error;

use super::matrix::ThroughputMatrix;

pub const DEFAULT_SLOWDOWN_CAP: f64 = 0.25;

/// Geomeans closer than this (relative) count as a tie, so that rounding
/// in the normalization cannot flip a tie under rescaling.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("no config stays within a {cap} slowdown on every device")]
    NoFeasibleConfig { cap: f64 },
    #[error("the matrix has no devices or no configs")]
    Empty,
    #[error("slowdown cap {0} is outside [0, 1)")]
    BadCap(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub config: String,
    pub geomean: f64,
    /// Smallest normalized throughput over the devices.
    pub worst: f64,
}

/// Per-device normalized throughput: each cell divided by its row's best.
pub fn normalized(m: &ThroughputMatrix) -> Vec<Vec<Option<f64>>> {
    (0..m.rows().len())
        .map(|r| {
            let row = m.row(r);
            let best = row.iter().flatten().cloned().fold(0.0, f64::max);
            row.iter().map(|v| v.map(|v| v / best)).collect()
        })
        .collect()
}

/// Rows are devices, columns are configs. A config missing on any device
/// (it failed that device's limits) is not feasible.
pub fn select_portable(m: &ThroughputMatrix, slowdown_cap: f64) -> Result<Selection, SelectError> {
    if m.rows().is_empty() || m.cols().is_empty() {
        return Err(SelectError::Empty);
    }
    if !(0.0..1.0).contains(&slowdown_cap) {
        return Err(SelectError::BadCap(slowdown_cap));
    }
    let norm = normalized(m);
    let floor = 1.0 - slowdown_cap;
    let mut best: Option<Selection> = None;
    for (c, label) in m.cols().iter().enumerate() {
        let Some(values) = norm.iter().map(|row| row[c]).collect::<Option<Vec<f64>>>() else {
            continue;
        };
        let worst = values.iter().cloned().fold(f64::INFINITY, f64::min);
        if worst < floor {
            continue;
        }
        let geomean = (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp();
        let better = match &best {
            None => true,
            Some(b) => {
                let tied = (geomean - b.geomean).abs() <= TIE_TOLERANCE * b.geomean;
                if tied {
                    *label < b.config
                } else {
                    geomean > b.geomean
                }
            }
        };
        if better {
            best = Some(Selection {
                config: label.clone(),
                geomean,
                worst,
            });
        }
    }
    best.ok_or(SelectError::NoFeasibleConfig { cap: slowdown_cap })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_is_selected() {
        let m = ThroughputMatrix::from_rows(&["d"], &["only"], &[&[42.0]]).unwrap();
        let s = select_portable(&m, DEFAULT_SLOWDOWN_CAP).unwrap();
        assert_eq!((s.config.as_str(), s.geomean, s.worst), ("only", 1.0, 1.0));
    }

    #[test]
    fn ties_go_to_the_smaller_label() {
        let m = ThroughputMatrix::from_rows(&["d0", "d1"], &["b", "a"], &[&[2.0, 2.0], &[1.0, 1.0]]).unwrap();
        assert_eq!(select_portable(&m, 0.1).unwrap().config, "a");
    }

    #[test]
    fn missing_cells_and_caps() {
        let mut m = ThroughputMatrix::from_rows(&["d0", "d1"], &["a", "b"], &[&[1.0, 0.9], &[1.0, 0.9]]).unwrap();
        m.set(1, 0, None).unwrap();
        assert_eq!(select_portable(&m, 0.25).unwrap().config, "b");
        assert_eq!(select_portable(&m, 0.05), Err(SelectError::NoFeasibleConfig { cap: 0.05 }));
        assert_eq!(select_portable(&m, 1.0), Err(SelectError::BadCap(1.0)));
    }
}
