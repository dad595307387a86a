//! Character tokenizer, the causal language model with image-token splicing,
//! LoRA merging and greedy decoding.

mod lm;
mod tokenizer;

pub use lm::{greedy_decode, lm_forward, lora_merge, LmOutput, SpliceLayout};
pub(crate) use lm::{lm_embed, lm_head, lm_layer};
pub use tokenizer::{detokenize, tokenize, TokenSequence, Vocabulary, BOS, EOS, IMG, PAD, SEG, VOCAB_SIZE};
