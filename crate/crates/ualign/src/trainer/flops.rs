//! Analytic compute accounting.
//!
//! All counts use the same unit as [`crate::toyllm::llm_flops`]: each
//! multiply-accumulate counted as 2 FLOPs. Only genuine matrix/conv products
//! are charged; elementwise work (LayerNorm, GELU, softmax, residuals,
//! dynamic programs) is excluded. Backward passes are counted as twice the
//! forward.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;

/// Ledger phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    AdapterFwd,
    AdapterBwd,
    Loss,
    LlmFwd,
    LlmBwd,
}

/// Cumulative per-phase FLOP counts. Monotone non-decreasing; the total is
/// always the sum of the components.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub adapter_fwd: u64,
    pub adapter_bwd: u64,
    pub loss: u64,
    pub llm_fwd: u64,
    pub llm_bwd: u64,
}

impl FlopLedger {
    pub fn charge(&mut self, phase: Phase, amount: u64) {
        match phase {
            Phase::AdapterFwd => self.adapter_fwd += amount,
            Phase::AdapterBwd => self.adapter_bwd += amount,
            Phase::Loss => self.loss += amount,
            Phase::LlmFwd => self.llm_fwd += amount,
            Phase::LlmBwd => self.llm_bwd += amount,
        }
    }

    pub fn component(&self, phase: Phase) -> u64 {
        match phase {
            Phase::AdapterFwd => self.adapter_fwd,
            Phase::AdapterBwd => self.adapter_bwd,
            Phase::Loss => self.loss,
            Phase::LlmFwd => self.llm_fwd,
            Phase::LlmBwd => self.llm_bwd,
        }
    }

    pub fn total(&self) -> u64 {
        self.adapter_fwd + self.adapter_bwd + self.loss + self.llm_fwd + self.llm_bwd
    }

    pub fn to_values(&self) -> Vec<f64> {
        vec![
            self.adapter_fwd as f64,
            self.adapter_bwd as f64,
            self.loss as f64,
            self.llm_fwd as f64,
            self.llm_bwd as f64,
        ]
    }

    pub fn from_values(v: &[f64]) -> FlopLedger {
        FlopLedger {
            adapter_fwd: v[0] as u64,
            adapter_bwd: v[1] as u64,
            loss: v[2] as u64,
            llm_fwd: v[3] as u64,
            llm_bwd: v[4] as u64,
        }
    }
}

/// Adapter forward cost for a length-`t` input:
/// conv layer l contributes `2 * L_out * out_ch * in_ch * kernel`, the MLP
/// contributes `2 * I * (hidden * mlp_hidden + mlp_hidden * out_dim)`.
pub fn adapter_forward_flops(cfg: &AdapterConfig, t: usize) -> u64 {
    let mut flops = 0u64;
    let mut len = t as u64;
    for l in 0..cfg.conv_layers {
        let in_ch = if l == 0 { cfg.in_dim } else { cfg.hidden_dim } as u64;
        let out_ch = cfg.hidden_dim as u64;
        if len < cfg.conv_kernel as u64 {
            return flops;
        }
        let out_len = (len - cfg.conv_kernel as u64) / cfg.conv_stride as u64 + 1;
        flops += 2 * out_len * out_ch * in_ch * cfg.conv_kernel as u64;
        len = out_len;
    }
    let i = len;
    flops += 2 * i * (cfg.hidden_dim as u64 * cfg.mlp_hidden as u64
        + cfg.mlp_hidden as u64 * cfg.out_dim as u64);
    flops
}

pub fn adapter_backward_flops(cfg: &AdapterConfig, t: usize) -> u64 {
    2 * adapter_forward_flops(cfg, t)
}

/// DTW objective forward: the cosine cost matrix, `I*J` dot products plus
/// the `I+J` row norms, each of length `d`.
pub fn dtw_loss_forward_flops(i: usize, j: usize, d: usize) -> u64 {
    2 * ((i * j * d) as u64 + ((i + j) * d) as u64)
}

/// DTW backward: one cosine-distance gradient (three length-`d` vector
/// products) per on-path cell.
pub fn dtw_loss_backward_flops(path_len: usize, d: usize) -> u64 {
    (6 * path_len * d) as u64
}

/// CTC similarity head forward: `I*(V+1)` scaled-cosine logits plus the
/// `I + V + 1` participating norms.
pub fn ctc_head_forward_flops(i: usize, v: usize, d: usize) -> u64 {
    2 * ((i * (v + 1) * d) as u64 + ((i + v + 1) * d) as u64)
}

pub fn ctc_head_backward_flops(i: usize, v: usize, d: usize) -> u64 {
    2 * ctc_head_forward_flops(i, v, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_total_is_component_sum() {
        let mut ledger = FlopLedger::default();
        ledger.charge(Phase::AdapterFwd, 10);
        ledger.charge(Phase::Loss, 5);
        ledger.charge(Phase::LlmBwd, 7);
        assert_eq!(ledger.total(), 22);
        assert_eq!(
            ledger.total(),
            ledger.adapter_fwd + ledger.adapter_bwd + ledger.loss + ledger.llm_fwd + ledger.llm_bwd
        );
    }

    #[test]
    fn ledger_roundtrips_through_values() {
        let mut ledger = FlopLedger::default();
        ledger.charge(Phase::LlmFwd, 123);
        ledger.charge(Phase::AdapterBwd, 456);
        let values = ledger.to_values();
        assert_eq!(FlopLedger::from_values(&values), ledger);
    }

    #[test]
    fn adapter_flops_match_hand_sum_for_defaults() {
        let cfg = AdapterConfig::default();
        let t = 35u64;
        // One conv layer: len 35 -> 17.
        let l1 = 2 * 17 * 48 * 24 * 3;
        let mlp = 2 * 17 * (48 * 96 + 96 * 48);
        assert_eq!(adapter_forward_flops(&cfg, t as usize), l1 + mlp);
        assert_eq!(adapter_backward_flops(&cfg, t as usize), 2 * (l1 + mlp));
    }

    #[test]
    fn adapter_flops_match_hand_sum_for_two_layers() {
        let cfg = AdapterConfig {
            conv_layers: 2,
            ..AdapterConfig::default()
        };
        let t = 35u64;
        // Layer 1: len 35 -> 17; layer 2: 17 -> 8.
        let l1 = 2 * 17 * 48 * 24 * 3;
        let l2 = 2 * 8 * 48 * 48 * 3;
        let mlp = 2 * 8 * (48 * 96 + 96 * 48);
        assert_eq!(adapter_forward_flops(&cfg, t as usize), l1 + l2 + mlp);
        assert_eq!(
            adapter_backward_flops(&cfg, t as usize),
            2 * (l1 + l2 + mlp)
        );
    }

    #[test]
    fn loss_flops_formulas() {
        assert_eq!(dtw_loss_forward_flops(8, 10, 48), 2 * (8 * 10 * 48 + 18 * 48));
        assert_eq!(dtw_loss_backward_flops(12, 48), 6 * 12 * 48);
        assert_eq!(
            ctc_head_forward_flops(8, 91, 48),
            2 * (8 * 92 * 48 + (8 + 92) * 48)
        );
    }
}
