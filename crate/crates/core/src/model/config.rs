use crate::error::{Error, Result};

/// How features of the local clip are aggregated before decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LocalAggregator {
    /// Current-frame features pass straight through.
    None,
    /// Bottleneck LSTM over the clip, then a self-attention read.
    Ela,
    /// Joint non-local read of the current frame over every clip position.
    Nl,
    /// Stacked standard ConvLSTM layers.
    Clstm,
    /// A single bottleneck LSTM.
    Blstm,
}

impl LocalAggregator {
    pub fn name(self) -> &'static str {
        match self {
            LocalAggregator::None => "none",
            LocalAggregator::Ela => "ela",
            LocalAggregator::Nl => "nl",
            LocalAggregator::Clstm => "clstm",
            LocalAggregator::Blstm => "blstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => LocalAggregator::None,
            "ela" => LocalAggregator::Ela,
            "nl" => LocalAggregator::Nl,
            "clstm" => LocalAggregator::Clstm,
            "blstm" => LocalAggregator::Blstm,
            _ => return Err(Error::Config(format!("unknown local aggregator {s:?}"))),
        })
    }

    /// Whether the aggregator reads the local clip.
    pub fn uses_clip(self) -> bool {
        self != LocalAggregator::None
    }
}

/// Named points of the component and aggregation-fashion grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Ela,
    Aga,
    DmNet,
    Nl,
    Clstm,
    Blstm,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Baseline, Variant::Ela, Variant::Aga, Variant::DmNet, Variant::Nl, Variant::Clstm, Variant::Blstm];
    pub const COMPONENTS: [Variant; 4] = [Variant::Baseline, Variant::Ela, Variant::Aga, Variant::DmNet];
    pub const FASHIONS: [Variant; 4] = [Variant::Nl, Variant::Clstm, Variant::Blstm, Variant::Ela];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ela => "ela",
            Variant::Aga => "aga",
            Variant::DmNet => "dmnet",
            Variant::Nl => "nl",
            Variant::Clstm => "clstm",
            Variant::Blstm => "blstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn flags(self) -> (LocalAggregator, bool) {
        match self {
            Variant::Baseline => (LocalAggregator::None, false),
            Variant::Ela => (LocalAggregator::Ela, false),
            Variant::Aga => (LocalAggregator::None, true),
            Variant::DmNet => (LocalAggregator::Ela, true),
            Variant::Nl => (LocalAggregator::Nl, false),
            Variant::Clstm => (LocalAggregator::Clstm, false),
            Variant::Blstm => (LocalAggregator::Blstm, false),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DMNetConfig {
    /// Local memory length.
    pub tau: usize,
    /// Global memory samples per frame.
    pub n_sample: usize,
    /// Representativeness threshold.
    pub alpha: f64,
    /// Similarity threshold.
    pub beta: f64,
    pub global_capacity: Option<usize>,
    pub channels: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub local: LocalAggregator,
    pub use_aga: bool,
    pub lstm_channels: usize,
    pub key_channels: usize,
    pub value_channels: usize,
    pub clstm_layers: usize,
    pub seed: u64,
}

impl Default for DMNetConfig {
    fn default() -> Self {
        let channels = 32;
        DMNetConfig {
            tau: 4,
            n_sample: 4,
            alpha: -0.08,
            beta: -4.65,
            global_capacity: Some(256),
            channels,
            classes: 4,
            height: 64,
            width: 80,
            local: LocalAggregator::Ela,
            use_aga: true,
            lstm_channels: channels / 2,
            key_channels: (channels / 8).max(4),
            value_channels: channels / 2,
            clstm_layers: 2,
            seed: 0,
        }
    }
}

impl DMNetConfig {
    /// Sets `channels` and the widths derived from it.
    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self.lstm_channels = (channels / 2).max(1);
        self.key_channels = (channels / 8).max(4);
        self.value_channels = (channels / 2).max(1);
        self
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.local, self.use_aga) = v.flags();
        self
    }

    /// The grid variant these flags select, if any.
    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.flags() == (self.local, self.use_aga))
    }

    /// Spatial size of the encoder output.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tau < 1 {
            return fail("tau must be at least 1".into());
        }
        if self.n_sample < 1 {
            return fail("n_sample must be at least 1".into());
        }
        if self.classes < 2 || self.classes > 256 {
            return fail(format!("classes must lie in 2..=256, got {}", self.classes));
        }
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return fail(format!("image size {}x{} must be divisible by 8", self.height, self.width));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("lstm_channels", self.lstm_channels),
            ("key_channels", self.key_channels),
            ("value_channels", self.value_channels),
            ("clstm_layers", self.clstm_layers),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.global_capacity == Some(0) {
            return fail("global_capacity must be positive".into());
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return fail("alpha and beta must be finite".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            assert_eq!(DMNetConfig::default().with_variant(v).variant(), Some(v));
        }
        assert!(Variant::parse("both").is_err());
    }

    #[test]
    fn defaults_validate() {
        let c = DMNetConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lstm_channels, c.key_channels, c.value_channels), (16, 4, 16));
        assert!(DMNetConfig { height: 60, ..c.clone() }.validate().is_err());
        assert!(DMNetConfig { tau: 0, ..c }.validate().is_err());
    }
}
