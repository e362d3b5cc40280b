//! Activation-sparsity metrics, activation export, and parameter / FLOP
//! accounting.

pub mod accounting;
pub mod capture;
pub mod report;
pub mod sparsity;

pub use accounting::{count_flops, count_macs, count_params};
pub use capture::{
    capture_activations, dump_activations, nsar_report, parse_captures, read_captures, write_captures,
    ActivationCapture,
};
pub use report::{write_histogram_csv, write_nsar_csv, CSV_HEADER};
pub use sparsity::{activation_histogram, nsar, nsar_slice, NsarEntry, NsarReport};
