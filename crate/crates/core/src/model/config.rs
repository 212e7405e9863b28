use crate::error::{Error, Result};

/// Architecture hyperparameters of the multi-stage reconstructor.
#[derive(Clone, Debug, PartialEq)]
pub struct SstConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Dispersion step `d` in pixels per channel.
    pub step: usize,
    /// Number of reversible stages, each with its own weights.
    pub n_stages: usize,
    pub base_channels: usize,
    /// Attention window side `s`.
    pub window: usize,
    /// Attention heads at full resolution; doubled at each coarser level.
    pub heads: usize,
    /// Attention blocks per node of each U.
    pub depth: usize,
    /// Down-sampling levels of each U.
    pub levels: usize,
    /// Hidden expansion of the feed-forward network.
    pub ffn_mult: usize,
    /// Re-project between the spectral and spatial halves of a stage.
    pub inner_reversible: bool,
    /// Zero-initialise the final mapping convolution of each stage.
    pub zero_init_mapping: bool,
}

/// Named model sizes differing in the number of reversible stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Small,
    Medium,
    Large,
    LargePlus,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Small, Family::Medium, Family::Large, Family::LargePlus];

    pub fn stages(self) -> usize {
        match self {
            Family::Small => 1,
            Family::Medium => 2,
            Family::Large => 4,
            Family::LargePlus => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Small => "SST-S",
            Family::Medium => "SST-M",
            Family::Large => "SST-L",
            Family::LargePlus => "SST-Lplus",
        }
    }
}

impl SstConfig {
    /// Full-scale configuration: 256×256×28 scenes, step 2, windows of 8.
    pub fn family(family: Family) -> Self {
        SstConfig {
            height: 256,
            width: 256,
            channels: 28,
            step: 2,
            n_stages: family.stages(),
            base_channels: 28,
            window: 8,
            heads: 1,
            depth: 1,
            levels: 2,
            ffn_mult: 4,
            inner_reversible: family == Family::Small,
            zero_init_mapping: true,
        }
    }

    /// Desk-scale preset: 32×32×8 scenes, step 1.
    pub fn toy(n_stages: usize) -> Self {
        SstConfig {
            height: 32,
            width: 32,
            channels: 8,
            step: 1,
            n_stages,
            base_channels: 16,
            window: 8,
            heads: 1,
            depth: 1,
            levels: 2,
            ffn_mult: 2,
            inner_reversible: false,
            zero_init_mapping: true,
        }
    }

    /// Minimal configuration for gradient checks: 8×8×4, windows of 4.
    pub fn tiny(n_stages: usize) -> Self {
        SstConfig {
            height: 8,
            width: 8,
            channels: 4,
            step: 1,
            n_stages,
            base_channels: 4,
            window: 4,
            heads: 2,
            depth: 1,
            levels: 2,
            ffn_mult: 2,
            inner_reversible: false,
            zero_init_mapping: false,
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn heads_at(&self, level: usize) -> usize {
        self.heads << level
    }

    pub fn measurement_width(&self) -> usize {
        self.width + self.step * (self.channels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("config", msg));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad(format!("dims must be positive: {}×{}×{}", self.height, self.width, self.channels));
        }
        if self.n_stages == 0 {
            return bad("n_stages must be at least 1".into());
        }
        if self.base_channels == 0 || self.window == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("base_channels, window, heads and ffn_mult must be positive".into());
        }
        let f = 1usize << self.levels;
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return bad(format!(
                "{}×{} is not divisible by 2^levels = {f}",
                self.height, self.width
            ));
        }
        if !self.base_channels.is_multiple_of(self.heads) {
            return bad(format!(
                "heads ({}) must divide base_channels ({})",
                self.heads, self.base_channels
            ));
        }
        Ok(())
    }
}
