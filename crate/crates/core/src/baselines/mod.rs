//! Reference trackers: tf-idf question retrieval, the constant state
//! prior, perception-only predictors, and a recurrent tracker with
//! fixed-vocabulary heads.

mod rnn;
mod rules;
mod tfidf;

pub use rnn::{RnnExample, RnnTracker, RnnTrackerConfig};
pub use rules::{detected_classes, object_all_predict, object_random_predict, state_prior_predict};
pub use tfidf::TfIdfIndex;
