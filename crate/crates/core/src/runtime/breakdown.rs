//! Per-category shares of kernel time.

use crate::kernels::Category;

/// Time attributed to kernel categories during one or more runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTiming {
    pub samples: Vec<(Category, u64)>,
    /// Samples come from submission wall time split evenly over the
    /// dispatches of each submission, not from per-dispatch timestamps.
    pub coarse: bool,
}

impl RunTiming {
    pub fn extend(&mut self, other: RunTiming) {
        self.samples.extend(other.samples);
        self.coarse |= other.coarse;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Breakdown {
    /// Percentages indexed by [`Category::index`]; they sum to 100 unless
    /// nothing ran.
    pub percent: [f64; 5],
    pub total_nanos: u64,
    pub coarse: bool,
}

impl Breakdown {
    pub fn share(&self, c: Category) -> f64 {
        self.percent[c.index()]
    }
}

pub fn timing_breakdown(timing: &RunTiming) -> Breakdown {
    let mut nanos = [0u64; 5];
    for &(c, ns) in &timing.samples {
        nanos[c.index()] += ns;
    }
    let total: u64 = nanos.iter().sum();
    let mut percent = [0.0; 5];
    if total > 0 {
        for (p, n) in percent.iter_mut().zip(nanos) {
            *p = 100.0 * n as f64 / total as f64;
        }
    }
    Breakdown {
        percent,
        total_nanos: total,
        coarse: timing.coarse,
    }
}
