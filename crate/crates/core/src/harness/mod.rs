//! Dataset-level runs, ablation grids, synthetic data and trace analyses.

pub mod ablation;
pub mod analysis;
pub mod dataset;
pub mod noisy;
pub mod run;
pub mod synth;

pub use ablation::{run_layer_ablation, run_pq_grid, LayerStrategy, LayerTable, PqGrid};
pub use analysis::{aggregate_selection_frequency, attention_strength_stats, read_trace_file, FrequencyReport};
pub use dataset::Dataset;
pub use noisy::{run_noisy_knowledge, NoisyReport};
pub use run::{detect_dataset, run_detect, BankSet, Corpus, DetectRun};
pub use synth::{synth_dataset, SynthSpec};
