//! Procedural scenes with exact captions, depth maps and instance masks.

mod dataset;
mod scene;
mod vocab;

pub use dataset::{decode_sample, encode_sample, gen_dataset, Dataset, ManifestRecord, Split, MANIFEST, VOCAB};
pub use scene::{caption_tokens, gen_sample, gen_scene, phrase_tokens, render, Object, Sample, Scene, MAX_OBJECTS, NUM_CLASSES};
pub use vocab::{Vocab, BOS, COLORS, EOS, PAD, SHAPES};
