pub mod fit;
pub mod simulate;
pub mod stability;
pub mod summarize;
