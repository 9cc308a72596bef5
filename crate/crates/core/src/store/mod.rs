//! Persistence of merge bundles: packed masks and the bundle container.

pub mod bundle;
pub mod mask;

pub use bundle::{
    decode_bundle, encode_bundle, inspect_sizes, load_bundle, save_bundle, separate_f32_bytes,
    BundleSizes,
};
pub use mask::{pack_mask, unpack_mask, PackedMask, Padding};
