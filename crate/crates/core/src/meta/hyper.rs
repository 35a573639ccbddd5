use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Meta-training settings. Defaults are the published ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Support frames per class.
    pub k: usize,
    /// Query frames per class.
    pub q: usize,
    /// Tasks per meta-update.
    pub meta_batch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub n_train: usize,
    pub n_eval: usize,
    /// Meta-iteration budget.
    pub max_iters: usize,
    pub eval_every: usize,
    /// Iterations without a new best validation accuracy before stopping.
    pub patience: usize,
    pub shuffle_prob: f64,
    /// Keep probability of the head-input dropout; `None` disables it.
    pub dropout_keep: Option<f64>,
    /// Size of the fixed validation pool.
    pub val_tasks: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            k: 5,
            q: 15,
            meta_batch: 2,
            alpha: 0.01,
            beta: 0.001,
            n_train: 5,
            n_eval: 10,
            max_iters: 60_000,
            eval_every: 200,
            patience: 2000,
            shuffle_prob: 0.5,
            dropout_keep: Some(0.7),
            val_tasks: 50,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("hyperparameters: {m}")));
        if self.k == 0 || self.q == 0 || self.meta_batch == 0 {
            return bad(format!("K = {}, Q = {}, I = {} must be positive", self.k, self.q, self.meta_batch));
        }
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return bad(format!("rates alpha = {}, beta = {}", self.alpha, self.beta));
        }
        if self.n_eval < self.n_train {
            return bad(format!("n_eval {} below n_train {}", self.n_eval, self.n_train));
        }
        if self.eval_every == 0 || self.patience % self.eval_every != 0 {
            return bad(format!(
                "patience {} must be a multiple of eval_every {}",
                self.patience, self.eval_every
            ));
        }
        if !(0.0..=1.0).contains(&self.shuffle_prob) {
            return bad(format!("shuffle_prob {}", self.shuffle_prob));
        }
        if let Some(p) = self.dropout_keep {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("dropout_keep {p}"));
            }
        }
        if self.val_tasks == 0 {
            return bad("val_tasks must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let hp = HyperParams::default();
        hp.validate().unwrap();
        assert_eq!((2 * hp.k, 2 * hp.q), (10, 30));
    }

    #[test]
    fn rejects_bad_settings() {
        let base = HyperParams::default();
        for hp in [
            HyperParams { alpha: 0.0, ..base.clone() },
            HyperParams { n_eval: 4, ..base.clone() },
            HyperParams { patience: 300, ..base.clone() },
            HyperParams { dropout_keep: Some(0.0), ..base.clone() },
            HyperParams { shuffle_prob: 1.2, ..base.clone() },
        ] {
            assert!(matches!(hp.validate(), Err(Error::Config(_))), "{hp:?}");
        }
    }
}
