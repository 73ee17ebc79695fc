//! Simulated remote storage for the acquisition stage, plus a deterministic
//! PPM corpus generator.

mod corpus;
mod fetch;

pub use corpus::{corpus_image, gen_corpus, CorpusError, CorpusManifest, MANIFEST_FILE, META_FILE};
pub use fetch::{FetchClient, FetchError, FetchPlan, FetchProfile, ProfileError};
