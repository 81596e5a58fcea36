//! File formats shared by every stage, audio I/O, manifests and the
//! synthetic corpus generator.

mod audio;
mod binary;
mod manifest;
pub mod synth;

pub use audio::{linear_to_mulaw, mulaw_to_linear, read_audio, read_mulaw, read_wav, write_wav};
pub use binary::{
    decode_matrix, encode_matrix, read_container, read_matrix, write_atomic, write_container, write_matrix,
    ModelContainer, Tensor, CONTAINER_MAGIC, FORMAT_VERSION, MATRIX_MAGIC,
};
pub use manifest::{read_labels, write_labels, Manifest, ManifestRow, MANIFEST_HEADER};
pub use synth::{
    label_path, language_family, plan_corpus, render, synthesize_corpus, synthesize_utterance, CorpusConfig, FamilyConfig,
    SynthLanguageSpec, SynthPhone, SynthUtterance, UtterancePlan,
};
