pub mod dataset;
pub mod record;
pub mod report;
pub mod runs;
