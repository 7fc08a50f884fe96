pub mod analyze;
pub mod bandit;
pub mod lemma;
pub mod plotdata;
pub mod run;
