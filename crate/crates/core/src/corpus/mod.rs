//! Tokenization, MLM masking and the synthetic code corpus.

pub mod generator;
pub mod io;
pub mod lang;
pub mod masking;
pub mod tokenize;
pub mod vocab;

pub use generator::{
    cyclomatic_complexity, generate_corpus, generate_nl_corpus, generate_with_programs, mini_language_vocab,
    CodeSample, Corpus,
};
pub use io::{load_corpus, save_corpus};
pub use lang::AstTag;
pub use masking::{mask_for_mlm, MaskedBatch, MaskingConfig, Substitution};
pub use tokenize::{detokenize, tokenize};
pub use vocab::Vocabulary;
