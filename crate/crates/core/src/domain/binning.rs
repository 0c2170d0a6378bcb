use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform discretization of advantages into `n_bins` bins over `[lo, hi]`.
///
/// Bins are 1-based. Values outside the range clamp to the edge bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBinning {
    n_bins: usize,
    lo: f64,
    hi: f64,
}

impl Default for AdvantageBinning {
    fn default() -> Self {
        AdvantageBinning {
            n_bins: 10,
            lo: -1.0,
            hi: 1.0,
        }
    }
}

impl AdvantageBinning {
    pub fn new(n_bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if n_bins == 0 {
            return Err(Error::Config("advantage binning needs at least one bin".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!(
                "advantage range [{lo}, {hi}] must be finite with lo < hi"
            )));
        }
        Ok(AdvantageBinning { n_bins, lo, hi })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.n_bins as f64
    }

    /// `ceil(n/2)`, the neutral bin used in bin-contrast evaluation.
    pub fn mid_bin(&self) -> usize {
        self.n_bins.div_ceil(2)
    }

    pub fn discretize(&self, advantage: f64) -> Result<usize> {
        if !advantage.is_finite() {
            return Err(Error::RejectedInput(format!(
                "advantage {advantage} is not finite"
            )));
        }
        let raw = ((advantage - self.lo) / self.width()).floor();
        // raw may be very negative or large; clamp before the cast.
        let bin = raw.clamp(0.0, (self.n_bins - 1) as f64) as usize + 1;
        Ok(bin)
    }

    pub fn check_bin(&self, bin: usize) -> Result<()> {
        if bin == 0 || bin > self.n_bins {
            return Err(Error::RejectedInput(format!(
                "bin {bin} outside 1..={}",
                self.n_bins
            )));
        }
        Ok(())
    }

    /// One-hot code with a single 1 at position `bin - 1`.
    pub fn one_hot(&self, bin: usize) -> Result<Vec<f64>> {
        self.check_bin(bin)?;
        let mut v = vec![0.0; self.n_bins];
        v[bin - 1] = 1.0;
        Ok(v)
    }
}

/// The distinguished "optimal advantage" conditioning token, bound to the top bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OptimalAdvantage;

impl OptimalAdvantage {
    pub fn bin(self, binning: &AdvantageBinning) -> usize {
        binning.n_bins()
    }
}
