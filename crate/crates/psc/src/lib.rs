//! File formats, reports and the command-line front end for `psc-core`.

pub mod cli;
pub mod model_json;
pub mod report;
pub mod tensor_io;

pub use model_json::{parse_model, serialize_model, FormatError};
pub use tensor_io::{read_tensor, write_tensor};
