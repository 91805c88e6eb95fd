//! Records, missing-value repair, normalisation and model tensors.

pub mod container;
mod csv_io;
mod normalize;
mod records;
mod tensors;

pub(crate) use csv_io::csv_error;
pub use csv_io::{load_records, save_records};
pub use normalize::{apply_normalizer, fit_normalizer, invert_normalizer, FeatureRange, NamedRange, NormalizationSpec};
pub use records::{
    drop_block_missing, impute_local_missing, interpolate_local_missing, is_missing, BlockDrop, Channel, RecordSchema,
    StationRecords,
};
pub use tensors::{
    build_tensors, mask_channel, sample_batch, DatasetTensors, Mask, TrainingSample, ID_COLUMNS, STATION_ID_COLUMN,
    TIME_ID_COLUMN,
};
