//! Multiply-accumulate accounting.
//!
//! One MAC is one FLOP-unit. A dense `z×z` convolution with `m` input and `n`
//! output channels costs `z²·m·n` per output location; a submanifold sparse
//! convolution costs `a·m·n` at an active site with `a` active neighbours.
//! Bias additions are not counted.

use std::fmt;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    /// Cost of the equivalent dense layer over every location.
    pub dense: u64,
    /// MACs actually executed.
    pub executed: u64,
}

impl std::ops::Add for MacCount {
    type Output = MacCount;
    fn add(self, rhs: MacCount) -> MacCount {
        MacCount {
            dense: self.dense + rhs.dense,
            executed: self.executed + rhs.executed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub layer: String,
    pub macs: MacCount,
}

/// Per-layer MAC tally, in first-recorded order. Recording the same layer id
/// again accumulates into the existing record.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopsLedger {
    records: Vec<LayerFlops>,
}

impl FlopsLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, layer: &str, macs: MacCount) {
        debug_assert!(macs.executed <= macs.dense, "{layer}: executed > dense");
        match self.records.iter_mut().find(|r| r.layer == layer) {
            Some(r) => r.macs = r.macs + macs,
            None => self.records.push(LayerFlops {
                layer: layer.to_string(),
                macs,
            }),
        }
    }

    pub fn merge(&mut self, other: &FlopsLedger) {
        for r in &other.records {
            self.record(&r.layer, r.macs);
        }
    }

    pub fn records(&self) -> &[LayerFlops] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, layer: &str) -> Option<MacCount> {
        self.records.iter().find(|r| r.layer == layer).map(|r| r.macs)
    }

    pub fn report(&self) -> FlopsReport {
        self.report_filtered(|_| true)
    }

    /// Report over the layers whose id satisfies `keep`.
    pub fn report_filtered(&self, keep: impl Fn(&str) -> bool) -> FlopsReport {
        let layers: Vec<LayerFlops> = self.records.iter().filter(|r| keep(&r.layer)).cloned().collect();
        let total = layers.iter().fold(MacCount::default(), |acc, r| acc + r.macs);
        FlopsReport { layers, total }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub total: MacCount,
}

impl FlopsReport {
    /// `executed / dense` over all reported layers; `None` if nothing was
    /// recorded.
    pub fn fraction(&self) -> Option<f64> {
        (self.total.dense > 0).then(|| self.total.executed as f64 / self.total.dense as f64)
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer,dense_macs,executed_macs,fraction")?;
        for r in &self.layers {
            let frac = if r.macs.dense > 0 {
                r.macs.executed as f64 / r.macs.dense as f64
            } else {
                0.0
            };
            writeln!(f, "{},{},{},{:.6}", r.layer, r.macs.dense, r.macs.executed, frac)?;
        }
        write!(
            f,
            "total,{},{},{:.6}",
            self.total.dense,
            self.total.executed,
            self.fraction().unwrap_or(0.0)
        )
    }
}
