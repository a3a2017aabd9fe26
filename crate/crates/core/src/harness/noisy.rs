//! Clean versus noisy knowledge on the same data.

use serde::{Deserialize, Serialize};

use super::run::{detect_dataset, BankSet, Corpus};
use crate::config::DetectionConfig;
use crate::error::Result;
use crate::eval::EvalResult;
use crate::exec::ExecPolicy;
use crate::weights::ModelWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyReport {
    pub clean: EvalResult,
    pub noisy: EvalResult,
    /// `noisy.ap50 - clean.ap50`.
    pub delta_ap50: f64,
    pub delta_ap: f64,
    pub clean_bank_digest: String,
    pub noisy_bank_digest: String,
}

impl NoisyReport {
    pub fn render(&self) -> String {
        format!(
            "knowledge\tAP\tAP50\tbank\nclean\t{:.1}\t{:.1}\t{}\nnoisy\t{:.1}\t{:.1}\t{}\ndelta\t{:+.1}\t{:+.1}\n",
            100.0 * self.clean.ap,
            100.0 * self.clean.ap50,
            self.clean_bank_digest,
            100.0 * self.noisy.ap,
            100.0 * self.noisy.ap50,
            self.noisy_bank_digest,
            100.0 * self.delta_ap,
            100.0 * self.delta_ap50,
        )
    }
}

pub fn run_noisy_knowledge(
    corpus: &Corpus,
    clean: &BankSet,
    noisy: &BankSet,
    weights: &ModelWeights,
    config: &DetectionConfig,
    policy: ExecPolicy,
) -> Result<NoisyReport> {
    let c = detect_dataset(corpus, clean, weights, config, policy)?.eval;
    let n = detect_dataset(corpus, noisy, weights, config, policy)?.eval;
    Ok(NoisyReport {
        delta_ap50: n.ap50 - c.ap50,
        delta_ap: n.ap - c.ap,
        clean: c,
        noisy: n,
        clean_bank_digest: clean.digest(),
        noisy_bank_digest: noisy.digest(),
    })
}
