//! Datasets, synthetic generation, splits and episode sampling.

mod csvio;
mod dataset;
mod episodes;
mod splits;
mod synth;

pub use csvio::{digest_path, load_csv, parse_csv, save_csv, sha256_hex, to_csv_bytes, verify_digest};
pub use dataset::{Dataset, RestrictedSet};
pub use episodes::{Constraint, Episode, EpisodeSpec, EpisodeTask, Pool};
pub use splits::{make_splits, SplitBundle, SplitMode};
pub use synth::{gen_synthetic, gen_synthetic_with_means, SynthSpec};
pub(crate) use synth::random_direction;
