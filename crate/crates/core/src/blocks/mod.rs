//! Network blocks: encoder/decoder, convolutional LSTM cells, non-local
//! attention reads and the Dice loss.

pub mod attention;
pub mod codec;
pub mod loss;
pub mod lstm;
pub mod params;

pub use attention::{
    clip_attend, memory_read, project_key_value, self_attend, sim, KeyValue, Projection,
};
pub use codec::{decoder_forward, encoder_forward};
pub use loss::dice_loss;
pub use lstm::{bottleneck_lstm_step, run_local_lstm, run_stacked_conv_lstm, LstmState};
pub use params::{Ctx, ParamSpec, ParamStore};
