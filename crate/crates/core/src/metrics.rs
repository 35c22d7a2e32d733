//! Block extraction and the per-block soundness / coverage metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{BlockIR, ReplayBlock};
use crate::model::Model;
use crate::tensor;
use crate::trace::TraceDataset;

pub const DEFAULT_TAU_ACT: f64 = 1e-2;
pub const DEFAULT_TAU_LOSS: f64 = 1e-3;

/// Copies block `layer` of `model` verbatim into a [`BlockIR`]. The mask and
/// position ids come from the longest traced prompt (first on ties); the RoPE
/// tables are the model's own rows `0..t_max`.
pub fn extract_block(model: &Model, layer: usize, trace: &TraceDataset) -> Result<BlockIR> {
    let lw = model
        .layers
        .get(layer)
        .ok_or_else(|| Error::Trace(format!("layer {layer} outside a {}-layer model", model.n_layers())))?;
    if lw.mlp_scale != 1.0 {
        return Err(Error::Patch(format!(
            "layer {layer} carries an MLP edit (α = {}); extract from the unedited model",
            lw.mlp_scale
        )));
    }
    let recs = trace.layer(layer)?;
    // `max_by_key` keeps the last maximum, so scan in reverse to prefer the
    // lowest prompt index.
    let rec = recs
        .iter()
        .rev()
        .max_by_key(|r| r.position_ids.len())
        .ok_or_else(|| Error::EmptyTrace(format!("layer {layer} has no records")))?;
    let t_max = rec.position_ids.len();
    let cfg = &model.config;
    let (rope_cos, rope_sin) = match (&model.rope_cos, &model.rope_sin) {
        (Some(c), Some(s)) => (Some(c.head_rows(t_max)?), Some(s.head_rows(t_max)?)),
        _ => (None, None),
    };
    let block = BlockIR {
        flavor: cfg.flavor,
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        n_kv_heads: cfg.n_kv_heads,
        d_ff: cfg.d_ff,
        t_max,
        eps: cfg.norm_eps,
        activation: cfg.activation,
        causal: true,
        attn_norm: lw.attn_norm.clone(),
        w_q: lw.w_q.clone(),
        w_k: lw.w_k.clone(),
        w_v: lw.w_v.clone(),
        w_o: lw.w_o.clone(),
        b_q: lw.b_q.clone(),
        b_k: lw.b_k.clone(),
        b_v: lw.b_v.clone(),
        b_o: lw.b_o.clone(),
        mlp_norm: lw.mlp_norm.clone(),
        w_1: lw.w_1.clone(),
        w_2: lw.w_2.clone(),
        w_gate: lw.w_gate.clone(),
        b_1: lw.b_1.clone(),
        b_2: lw.b_2.clone(),
        mask: rec.mask.clone(),
        position_ids: rec.position_ids.clone(),
        rope_cos,
        rope_sin,
    };
    block.validate()?;
    Ok(block)
}

/// `e(p,t) = ‖x̂_t − x_t‖₂` per prompt and position, where `x̂` replays the
/// recorded input through `block`.
pub fn per_token_errors(block: &dyn ReplayBlock, trace: &TraceDataset, layer: usize) -> Result<Vec<Vec<f64>>> {
    trace
        .layer(layer)?
        .iter()
        .enumerate()
        .map(|(p, rec)| {
            let out = block.replay(&rec.x_in)?;
            if out.shape() != rec.x_out.shape() {
                return Err(Error::Trace(format!(
                    "layer {layer} prompt {p}: replay shape {:?} vs recorded {:?}",
                    out.shape(),
                    rec.x_out.shape()
                )));
            }
            Ok(out
                .rows()
                .zip(rec.x_out.rows())
                .map(|(a, b)| tensor::l2_distance(a, b))
                .collect())
        })
        .collect()
}

/// `(ε_max, MAE)`: exact maximum and mean, reduced in order.
pub fn summarize_errors(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::EmptyTrace("no per-token errors to summarize".into()));
    }
    let max = errors.iter().copied().fold(0.0f64, f64::max);
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    Ok((max, mean))
}

fn check_tau(tau: f64, name: &str) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Input(format!("{name} must be positive and finite, got {tau}")))
    }
}

/// Number of errors `≤ τ_act`.
pub fn activation_covered(errors: &[f64], tau_act: f64) -> Result<usize> {
    check_tau(tau_act, "tau_act")?;
    Ok(errors.iter().filter(|&&e| e <= tau_act).count())
}

/// Fraction of tokens with `e ≤ τ_act`.
pub fn activation_coverage(errors: &[f64], tau_act: f64) -> Result<f64> {
    let covered = activation_covered(errors, tau_act)?;
    if errors.is_empty() {
        return Err(Error::EmptyTrace("activation coverage of an empty trace".into()));
    }
    Ok(covered as f64 / errors.len() as f64)
}

/// Number of traced tokens whose mask row (first `T` columns) and position id
/// in the surrogate equal the recorded control record bit-for-bit.
pub fn path_covered(block: &BlockIR, trace: &TraceDataset, layer: usize) -> Result<usize> {
    let mut covered = 0;
    for (p, rec) in trace.layer(layer)?.iter().enumerate() {
        let t = rec.position_ids.len();
        if rec.mask.shape() != [t, t] {
            return Err(Error::Trace(format!("layer {layer} prompt {p}: missing control record")));
        }
        for i in 0..t {
            let mask_ok = i < block.t_max
                && t <= block.t_max
                && block.mask.row(i)[..t]
                    .iter()
                    .zip(rec.mask.row(i))
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            let pos_ok = block.position_ids.get(i) == Some(&rec.position_ids[i]);
            if mask_ok && pos_ok {
                covered += 1;
            }
        }
    }
    Ok(covered)
}

pub fn path_coverage(block: &BlockIR, trace: &TraceDataset, layer: usize) -> Result<f64> {
    let covered = path_covered(block, trace, layer)?;
    let total: usize = trace.layer(layer)?.iter().map(|r| r.position_ids.len()).sum();
    if total == 0 {
        return Err(Error::EmptyTrace(format!("layer {layer} has no tokens")));
    }
    Ok(covered as f64 / total as f64)
}

/// Per-token losses with only `layer` replaced by `block`.
pub fn stitched_losses(model: &Model, block: &dyn ReplayBlock, layer: usize, trace: &TraceDataset) -> Result<Vec<Vec<f32>>> {
    let subs: BTreeMap<usize, &dyn ReplayBlock> = [(layer, block)].into_iter().collect();
    trace
        .prompts
        .sequences
        .iter()
        .map(|seq| Ok(model.forward_substituted(seq, &subs)?.nll))
        .collect()
}

/// Baseline-loss-weighted fraction of tokens with `|ℓ_stitched − ℓ_base| ≤ τ_loss`.
pub fn loss_coverage_from(base: &[Vec<f32>], stitched: &[Vec<f32>], tau_loss: f64) -> Result<f64> {
    check_tau(tau_loss, "tau_loss")?;
    if base.len() != stitched.len() || base.iter().zip(stitched).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Trace("baseline and stitched loss vectors differ in shape".into()));
    }
    let mut total = 0.0f64;
    let mut covered = 0.0f64;
    for (a, b) in base.iter().zip(stitched) {
        for (&lb, &ls) in a.iter().zip(b) {
            let w = lb as f64;
            total += w;
            if (ls as f64 - lb as f64).abs() <= tau_loss {
                covered += w;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::UndefinedCoverage("total baseline loss is zero".into()));
    }
    Ok(covered / total)
}

pub fn loss_coverage(model: &Model, block: &dyn ReplayBlock, layer: usize, trace: &TraceDataset, tau_loss: f64) -> Result<f64> {
    let stitched = stitched_losses(model, block, layer, trace)?;
    loss_coverage_from(&trace.nll_base, &stitched, tau_loss)
}

/// Certification thresholds `(α_act, α_loss)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertPolicy {
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub alpha_act: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub alpha_loss: f64,
}

impl Default for CertPolicy {
    fn default() -> Self {
        CertPolicy {
            alpha_act: 0.94,
            alpha_loss: 0.9,
        }
    }
}

impl CertPolicy {
    pub fn new(alpha_act: f64, alpha_loss: f64) -> Result<Self> {
        let p = CertPolicy { alpha_act, alpha_loss };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_act", self.alpha_act), ("alpha_loss", self.alpha_loss)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Input(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Metrics of one extracted block over its trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockMetrics {
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub epsilon_max: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub mae: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub cov_act: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub cov_path: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub cov_loss: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub tau_act: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub tau_loss: f64,
    /// Tokens with `e ≤ τ_act`.
    pub act_covered: usize,
    /// Tokens whose control record matched.
    pub path_covered: usize,
    pub token_count: usize,
    /// Prompt with the highest activation coverage (lowest index on ties).
    pub best_prompt_by_cov_act: usize,
    /// Prompt with the lowest activation coverage (lowest index on ties).
    pub worst_prompt_by_cov_act: usize,
}

pub fn compute_block_metrics(
    model: &Model,
    block: &BlockIR,
    layer: usize,
    trace: &TraceDataset,
    tau_act: f64,
    tau_loss: f64,
) -> Result<BlockMetrics> {
    check_tau(tau_act, "tau_act")?;
    check_tau(tau_loss, "tau_loss")?;
    let per_prompt = per_token_errors(block, trace, layer)?;
    let flat: Vec<f64> = per_prompt.iter().flatten().copied().collect();
    let (epsilon_max, mae) = summarize_errors(&flat)?;
    let act_covered = activation_covered(&flat, tau_act)?;
    let path_covered = path_covered(block, trace, layer)?;
    let cov_loss = loss_coverage(model, block, layer, trace, tau_loss)?;

    let prompt_cov: Vec<(usize, usize)> = per_prompt
        .iter()
        .map(|e| Ok((activation_covered(e, tau_act)?, e.len())))
        .collect::<Result<_>>()?;
    // Compare c_a/n_a against c_b/n_b exactly via cross-multiplication.
    let cmp = |a: (usize, usize), b: (usize, usize)| (a.0 * b.1).cmp(&(b.0 * a.1));
    let mut best = 0;
    let mut worst = 0;
    for (i, &c) in prompt_cov.iter().enumerate().skip(1) {
        if cmp(c, prompt_cov[best]).is_gt() {
            best = i;
        }
        if cmp(c, prompt_cov[worst]).is_lt() {
            worst = i;
        }
    }

    let n = flat.len();
    Ok(BlockMetrics {
        epsilon_max,
        mae,
        cov_act: act_covered as f64 / n as f64,
        cov_path: path_covered as f64 / n as f64,
        cov_loss,
        tau_act,
        tau_loss,
        act_covered,
        path_covered,
        token_count: n,
        best_prompt_by_cov_act: best,
        worst_prompt_by_cov_act: worst,
    })
}

/// Outcome of the certification rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub certified: bool,
    pub reasons: Vec<String>,
}

/// Certified iff `cov_act ≥ α_act` and `cov_loss ≥ α_loss`; every violated
/// clause is listed.
pub fn certify_decision(metrics: &BlockMetrics, policy: &CertPolicy) -> Decision {
    let mut reasons = Vec::new();
    if !(metrics.cov_act >= policy.alpha_act) {
        reasons.push(format!("cov_act {} < alpha_act {}", metrics.cov_act, policy.alpha_act));
    }
    if !(metrics.cov_loss >= policy.alpha_loss) {
        reasons.push(format!("cov_loss {} < alpha_loss {}", metrics.cov_loss, policy.alpha_loss));
    }
    Decision {
        certified: reasons.is_empty(),
        reasons,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(cov_act: f64, cov_loss: f64) -> BlockMetrics {
        BlockMetrics {
            epsilon_max: 0.0,
            mae: 0.0,
            cov_act,
            cov_path: 1.0,
            cov_loss,
            tau_act: DEFAULT_TAU_ACT,
            tau_loss: DEFAULT_TAU_LOSS,
            act_covered: 0,
            path_covered: 0,
            token_count: 0,
            best_prompt_by_cov_act: 0,
            worst_prompt_by_cov_act: 0,
        }
    }

    #[test]
    fn summaries() {
        assert_eq!(summarize_errors(&[0.0, 0.0, 0.0]).unwrap(), (0.0, 0.0));
        assert_eq!(summarize_errors(&[1.0, 3.0]).unwrap(), (3.0, 2.0));
        assert!(matches!(summarize_errors(&[]), Err(Error::EmptyTrace(_))));
    }

    #[test]
    fn activation_coverage_cases() {
        assert_eq!(activation_coverage(&[0.0, 0.0], 0.01).unwrap(), 1.0);
        assert_eq!(activation_coverage(&[0.001, 0.5], 0.01).unwrap(), 0.5);
        assert!(activation_coverage(&[0.1], 0.0).is_err());
    }

    #[test]
    fn weighted_loss_coverage() {
        let tau = 1e-3;
        let base = vec![vec![1.0f32, 3.0]];
        let stitched = vec![vec![1.0f32, 3.0 + 2.0 * tau as f32]];
        assert_eq!(loss_coverage_from(&base, &stitched, tau).unwrap(), 0.25);
        assert_eq!(loss_coverage_from(&base, &base, tau).unwrap(), 1.0);
        let zero = vec![vec![0.0f32, 0.0]];
        assert!(matches!(
            loss_coverage_from(&zero, &zero, tau),
            Err(Error::UndefinedCoverage(_))
        ));
    }

    #[test]
    fn decision_rule() {
        let p = CertPolicy::default();
        assert!(certify_decision(&metrics(1.0, 1.0), &p).certified);
        let d = certify_decision(&metrics(0.93, 1.0), &p);
        assert!(!d.certified);
        assert_eq!(d.reasons.len(), 1);
        assert!(d.reasons[0].contains("cov_act"));
        assert!(certify_decision(&metrics(0.94, 0.9), &p).certified);
        let d = certify_decision(&metrics(0.5, 0.5), &p);
        assert_eq!(d.reasons.len(), 2);
        assert!(certify_decision(&metrics(f64::NAN, 1.0), &p).reasons.len() == 1);
    }

    #[test]
    fn policy_range() {
        assert!(CertPolicy::new(1.1, 0.5).is_err());
        assert!(CertPolicy::new(0.0, 1.0).is_ok());
    }
}
