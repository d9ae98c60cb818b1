//! Dense tensors, statistics and the raw tensor file format.

mod rng;
mod stats;
mod tensor;
mod zten;

pub use rng::SeededRng;
pub use stats::{
    channel_moments, cosine_similarity_rows, histogram_pdf, kl_divergence, softmax_rows,
    Histogram, Moments, HIST_EPSILON, MASKED_LOGIT,
};
pub use tensor::Tensor;
pub use zten::{decode_zten, encode_zten, load_zten, save_zten, write_zten, ZtenReader};
