pub mod config;
pub mod dynamics;
pub mod edmd;
pub mod polybasis;
pub mod sdp;
pub mod sos;
pub mod synthesis;
