pub mod dump_attention;
pub mod evaluate;
pub mod gradcheck;
pub mod register;
pub mod synth;
pub mod train;
