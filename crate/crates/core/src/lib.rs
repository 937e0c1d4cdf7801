//! Desk-scale two-stage knowledge distillation: instruction-data augmentation
//! with LLM agents, then training a small student against stored top-K
//! teacher logits.

pub mod augment;
pub mod corpus;
pub mod kdcore;
pub mod logitstore;
pub mod model;
pub mod synth;
pub mod trainer;
pub mod vocab;
