//! Underwater prompt bank, template selection, and the class and mask heads.

pub mod heads;
pub mod prompts;
pub mod selection;

pub use heads::{classify_queries, fuse_global, init_head_params, predict_masks, Pooling};
pub use prompts::{build_prompt_bank, TemplateBank, TemplateGroup};
pub use selection::{
    compute_similarity_tensor, mean_spatial, sample_class_images, select_templates, select_templates_mean_all,
    select_templates_mixed, select_templates_weighted, select_with_single_image, top_n_indices,
    weighted_template_weights, ClassEmbeddings, MeanSimilarity, PixelFeatures, SelectionConfig, SimilarityTensor,
    SingleImageSelection, Strategy,
};
