//! Decoders over the latent graph: criteria classification and
//! layout-conditioned image reconstruction, plus the layout primitives they
//! share with the baselines.

mod cvs;
mod dump;
mod layout;
mod reconstructor;

pub use cvs::{check_logits, BoxOverride, Components, CvsDecoder, CvsDecoderConfig, NUM_CRITERIA};
pub use dump::{save_layout_pngs, save_rgb_png};
pub use layout::{
    backgroundize, build_class_layout, build_feature_layout, build_layout, build_mask_layout, images_to_tensor,
    layouts_to_tensor, tensor_to_image, Layout,
};
pub use reconstructor::{conditioning_stack, ReconInput, Reconstructor, ReconstructorConfig};
