use serde::{Deserialize, Serialize};

use crate::linalg::C64;

/// Per-coefficient posterior summaries, all indexed `[t][n]`.
///
/// The pairwise quantities `s_pair` and `theta_cross` have `T - 1` frames:
/// entry `k` couples frames `k` and `k + 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEstimates {
    pub x_mean: Vec<Vec<C64>>,
    pub x_var: Vec<Vec<f64>>,
    /// `E[s(t) | y]`
    pub s_prob: Vec<Vec<f64>>,
    /// `E[s(t+1) s(t) | y]`
    pub s_pair: Vec<Vec<f64>>,
    /// `E[theta(t) | y]`
    pub theta_mean: Vec<Vec<C64>>,
    /// `var(theta(t) | y)`
    pub theta_var: Vec<Vec<f64>>,
    /// `E[theta(t+1)^* theta(t) | y]`
    pub theta_cross: Vec<Vec<C64>>,
}

impl PosteriorEstimates {
    pub fn frames(&self) -> usize {
        self.x_mean.len()
    }

    pub fn dim(&self) -> usize {
        self.x_mean.first().map_or(0, Vec::len)
    }

    /// Point estimates only; support and amplitude fields left empty.
    pub fn from_means(x_mean: Vec<Vec<C64>>, x_var: Vec<Vec<f64>>) -> Self {
        Self { x_mean, x_var, ..Self::default() }
    }

    /// Largest absolute change in the signal estimate between two posteriors.
    pub fn max_mean_change(&self, other: &Self) -> f64 {
        self.x_mean.iter().flatten().zip(other.x_mean.iter().flatten()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }
}
