//! Template-based dialogue generation over synthetic scenes.
//!
//! Every turn carries a question program that is executed against the true
//! scene for an exact answer, a gold multimodal state (temporal window plus
//! the cumulative union of attribute mention events), and short- or
//! long-term object references rendered from minimal distinguishing
//! attribute subsets.

mod dataset;
mod program;
mod templates;

pub use dataset::{
    generate_split, load_dataset, write_dataset, DataGenConfig, Dataset, DatasetManifest, Split,
    SplitCounts, SPLITS, SPLIT_SEED_STRIDE,
};
pub use program::{execute_question, AnswerVocabulary, QuestionProgram, Side};
pub use templates::{
    generate_dialogue, question_lexicon, Dialogue, Turn, WindowKind, TURNS_PER_DIALOGUE,
};
