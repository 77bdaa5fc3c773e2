use crate::error::{ensure, Result};

/// Shape hyperparameters of one completion network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Input point count `N`.
    pub n_in: usize,
    /// Output size is `factor * n_in`.
    pub factor: usize,
    /// Proxy (token) count.
    pub n_c: usize,
    /// Neighbors per proxy group.
    pub k: usize,
    /// Channel width.
    pub c: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub n_q: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { n_in: 256, factor: 4, n_c: 32, k: 8, c: 64, enc_layers: 3, dec_layers: 3, heads: 4, n_q: 32 }
    }
}

impl BackboneConfig {
    /// The small configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self { n_in: 32, factor: 4, n_c: 8, k: 4, c: 16, enc_layers: 2, dec_layers: 2, heads: 2, n_q: 8 }
    }

    pub fn n_out(&self) -> usize {
        self.factor * self.n_in
    }

    /// Points emitted per query patch.
    pub fn r(&self) -> usize {
        self.n_out() / self.n_q
    }

    pub fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    /// Same network shape for a different input size and upsampling factor.
    pub fn with_io(self, n_in: usize, factor: usize) -> Self {
        Self { n_in, factor, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(matches!(self.factor, 2 | 4), "upsample factor must be 2 or 4, got {}", self.factor);
        ensure!(self.c >= 1 && self.heads >= 1 && self.c % self.heads == 0, "C={} is not divisible by heads={}", self.c, self.heads);
        ensure!(self.n_c >= 1 && self.n_c <= self.n_in, "n_c={} must be in [1, N={}]", self.n_c, self.n_in);
        ensure!(self.k >= 1 && self.k <= self.n_in, "k={} must be in [1, N={}]", self.k, self.n_in);
        ensure!(self.n_q >= 1 && self.n_out() % self.n_q == 0, "n_q={} does not divide {}", self.n_q, self.n_out());
        Ok(())
    }
}
