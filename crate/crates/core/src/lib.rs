pub mod analysis;
pub mod attention;
pub mod cli;
pub mod error;
pub mod io;
pub mod mask;
pub mod partition;
pub mod pipeline;
pub mod sfc;
