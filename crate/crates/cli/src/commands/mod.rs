pub mod memory;
pub mod numerics;
pub mod plan;
pub mod simulate;
pub mod sweep;
