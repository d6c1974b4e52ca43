//! Flat `key = value` run configuration covering the model, training, scene
//! generator and benchmark settings.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{LabelMode, SceneConfig};
use crate::error::{Error, Result};
use crate::model::train::TrainConfig;
use crate::model::{DMNetConfig, LocalAggregator};

/// Scalar type used for training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: DMNetConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    /// Trailing videos of a dataset held out for validation.
    pub val_videos: usize,
    pub precision: Precision,
    pub include_background: bool,
    pub seeds: Vec<u64>,
    pub latency_repeats: usize,
    pub latency_warmup: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: DMNetConfig::default(),
            train: TrainConfig::default(),
            scene: SceneConfig::default(),
            val_videos: 2,
            precision: Precision::F32,
            include_background: false,
            seeds: vec![0, 1, 2],
            latency_repeats: 100,
            latency_warmup: 5,
        }
    }
}

/// Every key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "base seed for parameters, sampling, shuffling and scenes"),
    ("tau", "local memory length"),
    ("n_sample", "global memory frames read per frame"),
    ("alpha", "representativeness threshold (nats)"),
    ("beta", "similarity threshold"),
    ("global_capacity", "global memory cap, or none"),
    ("channels", "encoder feature width C"),
    ("classes", "label classes including background"),
    ("height", "frame height, divisible by 8"),
    ("width", "frame width, divisible by 8"),
    ("local_aggregator", "none | ela | nl | clstm | blstm"),
    ("use_aga", "read the global memory"),
    ("lstm_channels", "bottleneck LSTM width"),
    ("key_channels", "attention key width"),
    ("value_channels", "attention value width"),
    ("clstm_layers", "stacked standard ConvLSTM layers"),
    ("lr", "learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("beta1", "first moment decay"),
    ("beta2", "second moment decay"),
    ("adam_eps", "optimizer epsilon"),
    ("epochs", "training epochs"),
    ("batch_size", "target frames per optimizer step"),
    ("clips_per_video", "target frames per video per epoch"),
    ("lr_drop_at", "fraction of epochs before the rate drop"),
    ("lr_drop_factor", "rate multiplier after the drop"),
    ("recalibrate", "reset alpha and beta to epoch means while training"),
    ("instruments", "instruments per scene (1 or 2)"),
    ("label_mode", "type | parts"),
    ("shared_type", "instruments of a video share one type"),
    ("motion_amplitude", "peak tip speed in pixels per frame"),
    ("blur_prob", "per-frame blur probability"),
    ("blur_strength", "5x5 box filter passes per blur frame"),
    ("brightness_prob", "per-frame brightness shift probability"),
    ("occlusion", "allow instruments to overlap"),
    ("marker_switch_prob", "per-frame tip marker toggle probability"),
    ("tool_width", "shaft width in pixels"),
    ("tip_length", "jaw length in pixels"),
    ("noise", "additive pixel noise amplitude"),
    ("video_length", "frames per generated video"),
    ("val_videos", "trailing videos held out for validation"),
    ("precision", "f32 | f64"),
    ("include_background", "count background in metric means"),
    ("seeds", "comma-separated seeds for benchmark grids"),
    ("latency_repeats", "timed repeats per latency measurement"),
    ("latency_warmup", "untimed frames before timing"),
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for key {key} (expected true or false)"))),
    }
}

impl RunConfig {
    /// Keys and values in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t, s) = (&self.model, &self.train, &self.scene);
        let values = [
            m.seed.to_string(),
            m.tau.to_string(),
            m.n_sample.to_string(),
            m.alpha.to_string(),
            m.beta.to_string(),
            m.global_capacity.map_or("none".to_string(), |c| c.to_string()),
            m.channels.to_string(),
            m.classes.to_string(),
            m.height.to_string(),
            m.width.to_string(),
            m.local.name().to_string(),
            m.use_aga.to_string(),
            m.lstm_channels.to_string(),
            m.key_channels.to_string(),
            m.value_channels.to_string(),
            m.clstm_layers.to_string(),
            t.lr.to_string(),
            t.weight_decay.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.adam_eps.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.clips_per_video.to_string(),
            t.lr_drop_at.to_string(),
            t.lr_drop_factor.to_string(),
            t.recalibrate.to_string(),
            s.instruments.to_string(),
            s.mode.name().to_string(),
            s.shared_type.to_string(),
            s.motion_amplitude.to_string(),
            s.blur_prob.to_string(),
            s.blur_strength.to_string(),
            s.brightness_prob.to_string(),
            s.occlusion.to_string(),
            s.marker_switch_prob.to_string(),
            s.tool_width.to_string(),
            s.tip_length.to_string(),
            s.noise.to_string(),
            s.length.to_string(),
            self.val_videos.to_string(),
            self.precision.name().to_string(),
            self.include_background.to_string(),
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            self.latency_repeats.to_string(),
            self.latency_warmup.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.set_seed(parse(key, v)?),
            "tau" => self.model.tau = parse(key, v)?,
            "n_sample" => self.model.n_sample = parse(key, v)?,
            "alpha" => self.model.alpha = parse(key, v)?,
            "beta" => self.model.beta = parse(key, v)?,
            "global_capacity" => {
                self.model.global_capacity = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "channels" => self.model.channels = parse(key, v)?,
            "classes" => self.model.classes = parse(key, v)?,
            "height" => self.set_height(parse(key, v)?),
            "width" => self.set_width(parse(key, v)?),
            "local_aggregator" => self.model.local = LocalAggregator::parse(v)?,
            "use_aga" => self.model.use_aga = parse_bool(key, v)?,
            "lstm_channels" => self.model.lstm_channels = parse(key, v)?,
            "key_channels" => self.model.key_channels = parse(key, v)?,
            "value_channels" => self.model.value_channels = parse(key, v)?,
            "clstm_layers" => self.model.clstm_layers = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "adam_eps" => self.train.adam_eps = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "clips_per_video" => self.train.clips_per_video = parse(key, v)?,
            "lr_drop_at" => self.train.lr_drop_at = parse(key, v)?,
            "lr_drop_factor" => self.train.lr_drop_factor = parse(key, v)?,
            "recalibrate" => self.train.recalibrate = parse_bool(key, v)?,
            "instruments" => self.scene.instruments = parse(key, v)?,
            "label_mode" => self.scene.mode = LabelMode::parse(v)?,
            "shared_type" => self.scene.shared_type = parse_bool(key, v)?,
            "motion_amplitude" => self.scene.motion_amplitude = parse(key, v)?,
            "blur_prob" => self.scene.blur_prob = parse(key, v)?,
            "blur_strength" => self.scene.blur_strength = parse(key, v)?,
            "brightness_prob" => self.scene.brightness_prob = parse(key, v)?,
            "occlusion" => self.scene.occlusion = parse_bool(key, v)?,
            "marker_switch_prob" => self.scene.marker_switch_prob = parse(key, v)?,
            "tool_width" => self.scene.tool_width = parse(key, v)?,
            "tip_length" => self.scene.tip_length = parse(key, v)?,
            "noise" => self.scene.noise = parse(key, v)?,
            "video_length" => self.scene.length = parse(key, v)?,
            "val_videos" => self.val_videos = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("invalid value {v:?} for key precision"))),
                }
            }
            "include_background" => self.include_background = parse_bool(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<u64>>>()?;
            }
            "latency_repeats" => self.latency_repeats = parse(key, v)?,
            "latency_warmup" => self.latency_warmup = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.scene.seed = seed;
    }

    pub fn set_height(&mut self, h: usize) {
        self.model.height = h;
        self.scene.height = h;
    }

    pub fn set_width(&mut self, w: usize) {
        self.model.width = w;
        self.scene.width = w;
    }

    /// Reads `key = value` lines over the defaults. Blank lines and text
    /// after `#` are ignored; a repeated key keeps its last value.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        if self.scene.length < self.model.tau + 2 {
            return Err(Error::Config(format!(
                "video_length {} must be at least tau + 2 = {}",
                self.scene.length,
                self.model.tau + 2
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.latency_repeats == 0 {
            return Err(Error::Config("latency_repeats must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_idempotent() {
        let mut c = RunConfig::default();
        c.model.alpha = -0.123456789012345;
        c.model.global_capacity = None;
        c.seeds = vec![4, 9];
        let text = c.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn every_key_is_settable() {
        let d = RunConfig::default();
        for (k, v) in d.entries() {
            let mut c = RunConfig::default();
            c.set(k, &v).unwrap();
            assert_eq!(c, d, "{k}");
        }
        assert_eq!(d.entries().len(), KEYS.len());
    }

    #[test]
    fn unknown_key_named() {
        let err = RunConfig::parse("tau = 4\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("bogus"));
        assert!(RunConfig::parse("# only a comment\n\n").is_ok());
    }
}
