//! Unsupervised sentence summarization: hill-climbing extraction produces
//! pseudo-summaries, a non-autoregressive encoder is trained on them with CTC,
//! and a length-control dynamic program decodes summaries of an exact length.

pub mod ctc;
pub mod decode;
pub mod fluency;
pub mod lattice;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod rougeval;
pub mod search;
pub mod similarity;
pub mod textkit;
pub mod toydata;
