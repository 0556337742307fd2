//! Spatio-temporal building blocks shared by the forecasters.
//!
//! All blocks use zero padding; tests that probe translation behaviour exclude
//! borders.

mod encdec;
mod gsta;
mod recurrent;
mod unet;

pub use encdec::{Decoder, Encoded, Encoder, EncoderDecoderConfig, PatchExpand, PatchMerge};
pub use recurrent::{convlstm_step, decouple_penalty, CellState, ConvLstmCell, StLstmCell, StLstmOutput, StLstmStack, StackStep};
pub use gsta::{gsta_translate, GstaBlock, GstaTranslator};
pub use unet::{unet_forward, UNet};
