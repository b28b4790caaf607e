pub mod camera;
pub mod colorlab;
pub mod dirmath;
pub mod imageio;
pub mod lightprobe;
pub mod splatfield;
pub mod relightgen;
pub mod evalkit;
pub mod scenestore;
pub mod trainfield;
