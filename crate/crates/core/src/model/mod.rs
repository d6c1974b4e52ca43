//! The online per-frame pipeline: encoder, local aggregation over the FIFO
//! clip, a read of the gated global memory, and the mask decoder.

pub mod checkpoint;
pub mod config;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::attention::{fusion_specs, key_value_specs};
use crate::blocks::codec::{decoder_specs, encoder_specs};
use crate::blocks::lstm::{conv_lstm_specs, local_lstm_specs};
use crate::blocks::{
    clip_attend, decoder_forward, encoder_forward, memory_read, run_local_lstm, run_stacked_conv_lstm, self_attend,
    Ctx, ParamSpec, ParamStore, Projection,
};
use crate::data::{Mask, MetricAccumulator, Metrics, VideoSample};
use crate::error::{Error, Result};
use crate::memory::{frame_similarity, Admission, Calibration, FeatureMap, GlobalMemory, LocalMemory};
use crate::scalar::Scalar;
use crate::tensor::{FlopCounter, Graph, Tensor, Var};

pub use config::{DMNetConfig, LocalAggregator, Variant};

/// Every parameter the configuration needs, in a fixed order.
pub fn param_specs(cfg: &DMNetConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let (ck, cv) = (cfg.key_channels, cfg.value_channels);
    let mut specs = encoder_specs(c);
    match cfg.local {
        LocalAggregator::None => {}
        LocalAggregator::Ela => {
            specs.extend(local_lstm_specs("lstm", c, cfg.lstm_channels));
            specs.extend(key_value_specs(Projection::Local, c, ck, cv));
            specs.extend(fusion_specs("ela", cv, c));
        }
        LocalAggregator::Blstm => specs.extend(local_lstm_specs("lstm", c, cfg.lstm_channels)),
        LocalAggregator::Clstm => {
            for l in 0..cfg.clstm_layers {
                specs.extend(conv_lstm_specs(&format!("clstm.{l}"), c, c));
            }
        }
        // key width matched to the value width
        LocalAggregator::Nl => {
            specs.extend(key_value_specs(Projection::Clip, c, cv, cv));
            specs.extend(fusion_specs("nl", cv, c));
        }
    }
    if cfg.use_aga {
        specs.extend(key_value_specs(Projection::Query, c, ck, cv));
        specs.extend(key_value_specs(Projection::Memory, c, ck, cv));
        specs.extend(fusion_specs("aga", cv, c));
    }
    specs.extend(decoder_specs(c, cfg.classes));
    specs
}

/// Per-stream memories and sampling state.
#[derive(Clone, Debug)]
pub struct StreamState<T> {
    pub local: LocalMemory<T>,
    pub global: GlobalMemory<T>,
    t: usize,
    seed: u64,
    rng: ChaCha8Rng,
    video: Option<String>,
    /// Running `r` and previous-frame `s` of every committed frame.
    pub stats: Calibration,
}

impl<T: Scalar> StreamState<T> {
    pub fn new(cfg: &DMNetConfig) -> Result<Self> {
        Ok(StreamState {
            local: LocalMemory::new(cfg.tau)?,
            global: GlobalMemory::new(cfg.alpha, cfg.beta, cfg.global_capacity)?,
            t: 0,
            seed: cfg.seed,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            video: None,
            stats: Calibration::new(),
        })
    }

    /// Index of the next frame.
    pub fn frame_index(&self) -> usize {
        self.t
    }

    pub fn reset(&mut self) {
        self.local.clear();
        self.global.clear();
        self.t = 0;
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.video = None;
        self.stats = Calibration::new();
    }

    /// Binds the state to a video. Streaming a different video into a used
    /// state is refused until [`reset`](Self::reset).
    pub fn begin(&mut self, video: &str) -> Result<()> {
        match &self.video {
            Some(v) if v != video && self.t > 0 => Err(Error::Contract(format!(
                "stream state holds video {v:?}; reset before streaming {video:?}"
            ))),
            _ => {
                self.video = Some(video.to_string());
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrameOutput<T> {
    pub mask: Mask,
    /// `[K, H, W]` class probabilities.
    pub probs: Tensor<T>,
    pub admission: Admission,
    /// Global memory entries read for this frame.
    pub sampled: usize,
}

/// Graph handles of one built frame.
pub struct Forward {
    pub feature: Var,
    pub probs: Var,
    pub sampled: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: DMNetConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: DMNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ParamStore::init(&param_specs(&config), &mut rng);
        Ok(Model { config, params })
    }

    pub fn from_parts(config: DMNetConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        params.check_specs(&param_specs(&config))?;
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn new_stream(&self) -> Result<StreamState<T>> {
        StreamState::new(&self.config)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    fn check_image(&self, img: &Tensor<T>) -> Result<()> {
        let want = [3, self.config.height, self.config.width];
        if img.shape() != want {
            return Err(Error::shape("process_frame", format!("image {:?}, model expects {want:?}", img.shape())));
        }
        Ok(())
    }

    /// Builds one frame into `cx`. Each aggregation stage adds its output to
    /// its input. Memory reads enter as constants; only the sampling
    /// generator of `state` advances.
    pub fn forward(&self, cx: &mut Ctx<'_, T>, state: &mut StreamState<T>, img: &Tensor<T>) -> Result<Forward> {
        self.check_image(img)?;
        let cfg = &self.config;
        let x = cx.g.constant(img.clone());
        cx.g.set_scope("encoder");
        let f = encoder_forward(cx, x)?;

        let clip: Vec<Var> = if cfg.local.uses_clip() {
            let mut clip: Vec<Var> = state.local.entries().map(|e| cx.g.constant(e.values.clone())).collect();
            clip.push(f);
            clip
        } else {
            Vec::new()
        };
        let local = match cfg.local {
            LocalAggregator::None => f,
            LocalAggregator::Ela => {
                cx.g.set_scope("lstm");
                let h = run_local_lstm(cx, "lstm", &clip, cfg.lstm_channels)?;
                cx.g.set_scope("self_attention");
                let read = self_attend(cx, h)?;
                cx.g.add(f, read)?
            }
            LocalAggregator::Blstm => {
                cx.g.set_scope("lstm");
                let h = run_local_lstm(cx, "lstm", &clip, cfg.lstm_channels)?;
                cx.g.add(f, h)?
            }
            LocalAggregator::Clstm => {
                cx.g.set_scope("lstm");
                let h = run_stacked_conv_lstm(cx, "clstm", &clip, cfg.clstm_layers)?;
                cx.g.add(f, h)?
            }
            LocalAggregator::Nl => {
                cx.g.set_scope("clip_attention");
                let read = clip_attend(cx, &clip)?;
                cx.g.add(f, read)?
            }
        };

        let mut sampled = 0;
        let global = if cfg.use_aga && !state.global.is_empty() {
            cx.g.set_scope("global_read");
            let picks = state.global.sample(cfg.n_sample, &mut state.rng)?;
            sampled = picks.len();
            let maps: Vec<&Tensor<T>> = picks.iter().map(|f| &f.values).collect();
            let read = memory_read(cx, local, &maps)?;
            cx.g.add(local, read)?
        } else {
            local
        };

        cx.g.set_scope("decoder");
        let logits = decoder_forward(cx, global)?;
        let probs = cx.g.softmax(logits, 0)?;
        cx.g.set_scope("other");
        Ok(Forward { feature: f, probs, sampled })
    }

    /// Stores `feature` in both memories and advances the frame counter.
    /// `probs` decides global admission.
    pub fn commit(&self, state: &mut StreamState<T>, feature: Tensor<T>, probs: &Tensor<T>) -> Result<Admission> {
        let t = state.t;
        let prev = match state.local.entries().last() {
            Some(p) if p.frame_index + 1 == t => Some(frame_similarity(&feature, &p.values)?),
            _ => None,
        };
        let fm = FeatureMap::new(feature, t)?;
        state.local.push(fm.clone())?;
        let admission = state.global.consider(fm, probs)?;
        state.stats.add(admission.r, prev);
        state.t += 1;
        Ok(admission)
    }

    fn run_frame(
        &self,
        state: &mut StreamState<T>,
        img: &Tensor<T>,
        counter: FlopCounter,
    ) -> Result<(FrameOutput<T>, FlopCounter)> {
        let mut g = Graph::inference().with_counter(counter);
        let fw = self.forward(&mut Ctx::new(&mut g, &self.params), state, img)?;
        let probs = g.value(fw.probs).clone();
        if !probs.all_finite() {
            return Err(Error::NonFinite(format!("class probabilities at frame {}", state.t)));
        }
        let feature = g.value(fw.feature).clone();
        let counter = g.into_counter();
        let mask = Mask::from_probs(&probs)?;
        let admission = self.commit(state, feature, &probs)?;
        Ok((FrameOutput { mask, probs, admission, sampled: fw.sampled }, counter))
    }

    /// Segments the next frame of the stream and updates its memories.
    pub fn process_frame(&self, state: &mut StreamState<T>, img: &Tensor<T>) -> Result<FrameOutput<T>> {
        Ok(self.run_frame(state, img, FlopCounter::new(false))?.0)
    }

    /// As [`process_frame`](Self::process_frame), also counting operations.
    pub fn process_frame_counted(
        &self,
        state: &mut StreamState<T>,
        img: &Tensor<T>,
    ) -> Result<(FrameOutput<T>, FlopCounter)> {
        self.run_frame(state, img, FlopCounter::new(true))
    }

    /// Advances the stream through a frame whose prediction is not needed,
    /// doing only the work later frames depend on.
    pub fn observe_frame(&self, state: &mut StreamState<T>, img: &Tensor<T>) -> Result<()> {
        if self.config.use_aga {
            self.process_frame(state, img)?;
        } else if self.config.local.uses_clip() {
            self.check_image(img)?;
            let mut g = Graph::inference();
            let x = g.constant(img.clone());
            let f = encoder_forward(&mut Ctx::new(&mut g, &self.params), x)?;
            let feature = g.value(f).clone();
            state.local.push(FeatureMap::new(feature, state.t)?)?;
            state.t += 1;
        } else {
            self.check_image(img)?;
            state.t += 1;
        }
        Ok(())
    }

    /// Streams each video with a fresh state and scores every frame.
    pub fn evaluate(&self, videos: &[VideoSample], include_background: bool) -> Result<Metrics> {
        let mut acc = MetricAccumulator::new(self.config.classes, include_background);
        let mut state = self.new_stream()?;
        for (i, video) in videos.iter().enumerate() {
            state.reset();
            state.begin(&format!("video {i}"))?;
            for (frame, gt) in video.frames.iter().zip(&video.masks) {
                let out = self.process_frame(&mut state, &frame.cast())?;
                acc.add(&out.mask, gt)?;
            }
        }
        Ok(acc.finish())
    }

    /// Accumulates per-frame `r` and previous-frame `s` over `videos`.
    pub fn calibration_stats(&self, videos: &[VideoSample]) -> Result<Calibration> {
        let mut cal = Calibration::new();
        let mut state = self.new_stream()?;
        for video in videos {
            state.reset();
            for frame in &video.frames {
                self.process_frame(&mut state, &frame.cast())?;
            }
            cal.merge(&state.stats);
        }
        Ok(cal)
    }

    /// `(α, β)` as the means of `r` and `s` over every frame of `videos`.
    pub fn calibrate(&self, videos: &[VideoSample]) -> Result<(f64, f64)> {
        if videos.iter().all(VideoSample::is_empty) {
            return Err(Error::Config("calibration dataset is empty".into()));
        }
        self.calibration_stats(videos)?.finish()
    }
}
