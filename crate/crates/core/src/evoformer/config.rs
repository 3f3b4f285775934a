use crate::error::{Error, Result};
use crate::kernels::AttnTiles;
use crate::tensor::Precision;

/// How row attention obtains the full pair bias on a sharded pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BiasMode {
    /// Project local pair rows, then all-gather the `[R_l, R, H]` bias.
    #[default]
    Gather,
    /// All-gather the pair itself and project the full bias on every rank.
    Recompute,
}

impl BiasMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gather" => Some(BiasMode::Gather),
            "recompute" => Some(BiasMode::Recompute),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BiasMode::Gather => "gather",
            BiasMode::Recompute => "recompute",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    /// Aligned sequences.
    pub s: usize,
    /// Residues.
    pub r: usize,
    pub c_m: usize,
    pub c_z: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub transition_factor: usize,
    pub c_opm: usize,
    pub n_recycle_max: usize,
    pub precision: Precision,
    pub checkpointing: bool,
    pub bias_mode: BiasMode,
    pub tiles: AttnTiles,
    pub ln_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            n_blocks: 4,
            s: 8,
            r: 16,
            c_m: 32,
            c_z: 16,
            heads: 4,
            head_dim: 8,
            transition_factor: 4,
            c_opm: 8,
            n_recycle_max: 4,
            precision: Precision::F32,
            checkpointing: false,
            bias_mode: BiasMode::Gather,
            tiles: AttnTiles::default(),
            ln_eps: 1e-5,
        }
    }

    /// Small configuration used for finite-difference gradient checks.
    pub fn gradcheck() -> Self {
        Self {
            n_blocks: 2,
            s: 4,
            r: 8,
            c_m: 16,
            c_z: 8,
            heads: 2,
            head_dim: 8,
            transition_factor: 2,
            c_opm: 4,
            n_recycle_max: 3,
            ..Self::desk()
        }
    }

    pub fn hd(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_blocks", self.n_blocks),
            ("s", self.s),
            ("r", self.r),
            ("c_m", self.c_m),
            ("c_z", self.c_z),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("transition_factor", self.transition_factor),
            ("c_opm", self.c_opm),
            ("n_recycle_max", self.n_recycle_max),
            ("tile_q", self.tiles.tile_q),
            ("tile_k", self.tiles.tile_k),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be at least 1"));
            }
        }
        if self.hd() != self.c_m {
            return Err(Error::config(
                "head_dim",
                format!("heads*head_dim = {} must equal c_m = {}", self.hd(), self.c_m),
            ));
        }
        if self.c_z < self.heads {
            return Err(Error::config(
                "c_z",
                format!("c_z = {} must be at least heads = {}", self.c_z, self.heads),
            ));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps", "must be positive"));
        }
        Ok(())
    }

    /// Checks that both sharded axes divide evenly across `n` ranks.
    pub fn validate_dap(&self, n: usize) -> Result<()> {
        self.validate()?;
        if n == 0 {
            return Err(Error::config("dap", "must be at least 1"));
        }
        if self.s % n != 0 {
            return Err(Error::config("dap", format!("s = {} not divisible by {n}", self.s)));
        }
        if self.r % n != 0 {
            return Err(Error::config("dap", format!("r = {} not divisible by {n}", self.r)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_gradcheck_are_valid() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::gradcheck().validate().unwrap();
    }

    #[test]
    fn rejects_inconsistent_heads() {
        let c = ModelConfig { head_dim: 4, ..ModelConfig::desk() };
        assert!(matches!(c.validate(), Err(Error::Config { ref key, .. }) if key == "head_dim"));
        let c = ModelConfig { c_z: 2, ..ModelConfig::desk() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn dap_divisibility_checked_up_front() {
        let c = ModelConfig::desk();
        c.validate_dap(4).unwrap();
        assert!(c.validate_dap(3).is_err());
    }
}
