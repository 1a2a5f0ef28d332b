//! Synthetic ultrasound-like videos: dark speckled background, one or two
//! drifting elliptical lesions with soft rims, per-frame flicker and
//! occasional faded frames, plus the on-disk dataset format and clip sampling.

mod clip;
mod generate;
mod io;

pub use clip::{clip_indices, sample_clip, sample_clip_of, ClipSample};
pub use generate::{
    format_sig6, generate_video, generate_videos, lesion_contrast, lesion_profile, quantize, video_seed,
    SyntheticVideo, VideoOptions, BENIGN, MALIGNANT,
};
pub use io::{
    decode_tensor, encode_tensor, format_annotations, parse_annotations, read_dataset, read_tensor, write_dataset,
    write_tensor, Dataset, DatasetMeta, TENSOR_MAGIC,
};

/// Builds a dataset of `n_videos` generated videos.
pub fn synthesize(seed: u64, n_videos: usize, opts: &VideoOptions) -> crate::Result<Dataset> {
    Ok(Dataset {
        meta: DatasetMeta {
            n_videos,
            seed,
            difficulty: opts.difficulty,
        },
        videos: generate_videos(seed, n_videos, opts)?,
    })
}
