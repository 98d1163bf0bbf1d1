//! Single-pass encoding: a transformer predicts weight tokens that modulate
//! shared hypo-network parameters, with optional weight token masking for
//! a second, half-size bitrate.

mod clip;
mod layout;
mod network;
mod train;

pub use clip::{
    decode_clip, decode_hypernet, encode_clip, encode_hypernet, ClipBitstream, EncodedClip, CLIP_MAGIC, HYPER_MAGIC,
};
pub use layout::{HypoLayer, HypoLayout, MaskFill, NORM_EPS};
pub use network::{
    apply_mask, modulate, modulate_graph, tokenize_clip, zero_dropped, HyperConfig, HyperNerv, HypoHandles, HypoVars,
};
pub use train::{hyper_train, mean_psnr, split_clips, HyperHistoryRow, HyperTrainOptions};
