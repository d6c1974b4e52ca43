//! Small convolutional encoder (stride 8) and upsampling mask decoder.

use super::params::{conv_specs, Ctx, ParamSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Var;

/// Channel widths of the three stride-2 encoder stages, before the last
/// stage's configurable width.
pub const ENCODER_WIDTHS: [usize; 2] = [16, 24];
/// Widths of the three upsampling decoder stages.
pub const DECODER_WIDTHS: [usize; 3] = [24, 16, 8];

pub fn encoder_specs(channels: usize) -> Vec<ParamSpec> {
    let widths = [3, ENCODER_WIDTHS[0], ENCODER_WIDTHS[1], channels];
    (0..3).flat_map(|i| conv_specs(&format!("enc.{i}"), widths[i], widths[i + 1], 3)).collect()
}

pub fn decoder_specs(channels: usize, classes: usize) -> Vec<ParamSpec> {
    let widths = [channels, DECODER_WIDTHS[0], DECODER_WIDTHS[1], DECODER_WIDTHS[2]];
    let mut specs: Vec<ParamSpec> =
        (0..3).flat_map(|i| conv_specs(&format!("dec.{i}"), widths[i], widths[i + 1], 3)).collect();
    specs.extend(conv_specs("dec.head", DECODER_WIDTHS[2], classes, 1));
    specs
}

/// `[3, H, W]` image to a `[C, H/8, W/8]` feature map.
pub fn encoder_forward<T: Scalar>(cx: &mut Ctx<'_, T>, img: Var) -> Result<Var> {
    let shape = cx.g.shape(img).to_vec();
    match shape[..] {
        [3, h, w] if h % 8 == 0 && w % 8 == 0 => {}
        _ => {
            return Err(Error::Config(format!(
                "encoder input must be [3,H,W] with H, W divisible by 8, got {shape:?}"
            )))
        }
    }
    let mut x = img;
    for i in 0..3 {
        let y = cx.conv3x3(&format!("enc.{i}"), x, 2)?;
        x = cx.g.silu(y);
    }
    Ok(x)
}

/// `[C, h, w]` features to `[K, 8h, 8w]` class logits.
pub fn decoder_forward<T: Scalar>(cx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
    let mut x = f;
    for i in 0..3 {
        let up = cx.g.upsample2x(x)?;
        let y = cx.conv3x3(&format!("dec.{i}"), up, 1)?;
        x = cx.g.silu(y);
    }
    cx.pointwise("dec.head", x)
}
