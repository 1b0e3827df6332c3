//! Fixture dataset format, synthetic corpora and stratified splits.

mod record;
mod split;
mod synth;

pub use record::{
    load_dataset, read_dataset, sort_by_time, write_dataset, write_dataset_to, Dataset, DatasetHeader, FormatTag,
    PostRecord, FORMAT_NAME, FORMAT_VERSION,
};
pub use split::{split, validate_ratios, Split, SplitPart};
pub use synth::{synth_generate, write_manifest, write_synth, ManifestEntry, SynthOutput, SynthesisConfig};
