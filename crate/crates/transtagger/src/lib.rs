pub mod numerics;
pub mod textenc;
