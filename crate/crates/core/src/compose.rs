//! Error composition across blocks: the global bound
//! `Σ_i ε_i · Π_{j>i} L_j`, Lipschitz estimators for extracted blocks, whole
//! model stitched replay, and an empirical harness for the bound on synthetic
//! block stacks.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{interpret_block_parts, BlockIR, ReplayBlock};
use crate::model::{pooled_perplexity, Model};
use crate::prompts::PromptSet;
use crate::tensor::{self, spectral_norm, Tensor};
use crate::trace::TraceDataset;

/// Identifier of the attention bound formula recorded in certificates.
pub const ATTN_FORMULA: &str = "frozen_pattern:sqrt(t_max)*sqrt(n_heads/n_kv_heads)*|W_V|*|W_O|";
pub const MLP_PLAIN_FORMULA: &str = "plain:|W_1|*act_lip*|W_2|";
pub const MLP_GATED_FORMULA: &str = "gated:|W_2|*(g_max*|W_1|+s_max*|W_gate|)";

/// Per-block local errors and Lipschitz constants.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    epsilons: Vec<f64>,
    lipschitz: Vec<f64>,
}

impl BoundInputs {
    pub fn new(epsilons: Vec<f64>, lipschitz: Vec<f64>) -> Result<Self> {
        if epsilons.len() != lipschitz.len() {
            return Err(Error::Input(format!(
                "{} epsilons for {} Lipschitz constants",
                epsilons.len(),
                lipschitz.len()
            )));
        }
        for (name, v) in [("epsilon", &epsilons), ("lipschitz", &lipschitz)] {
            if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !(**x >= 0.0 && x.is_finite())) {
                return Err(Error::Input(format!("{name}[{i}] = {x} must be finite and non-negative")));
            }
        }
        Ok(BoundInputs { epsilons, lipschitz })
    }

    pub fn epsilons(&self) -> &[f64] {
        &self.epsilons
    }

    pub fn lipschitz(&self) -> &[f64] {
        &self.lipschitz
    }
}

/// `Σ_{i<L} ε_i · Π_{i<j<L} L_j`, via a suffix-product table, summed
/// left to right.
pub fn global_bound(inputs: &BoundInputs) -> f64 {
    let n = inputs.epsilons.len();
    let mut suffix = vec![1.0f64; n + 1];
    for j in (0..n).rev() {
        suffix[j] = suffix[j + 1] * inputs.lipschitz[j];
    }
    let mut total = 0.0;
    for i in 0..n {
        total += inputs.epsilons[i] * suffix[i + 1];
    }
    total
}

/// The all-`L_i = 1` specialization `Σ ε_i`.
pub fn sum_epsilons(inputs: &BoundInputs) -> f64 {
    inputs.epsilons.iter().sum()
}

/// Power-iteration settings for every spectral norm of a bound computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralOpts {
    pub iters: usize,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub tol: f64,
    pub seed: u64,
}

impl Default for SpectralOpts {
    fn default() -> Self {
        SpectralOpts {
            iters: 500,
            tol: 1e-10,
            seed: 0,
        }
    }
}

fn norm_upper(w: &Tensor, opts: &SpectralOpts) -> Result<f64> {
    Ok(spectral_norm(w, opts.iters, opts.tol, opts.seed)?.upper(opts.tol))
}

/// Frozen-pattern attention bound with its operands.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnBound {
    pub k_attn: f64,
    pub w_v_norm: f64,
    pub w_o_norm: f64,
    pub t_max: usize,
    pub gqa_factor: f64,
}

/// `√t_max · √(n_heads/n_kv_heads) · ‖W_V‖₂ · ‖W_O‖₂`: the attention pattern is
/// treated as a fixed row-stochastic matrix (2-norm ≤ √t_max); a shared KV
/// group feeds `n_heads/n_kv_heads` heads, hence the extra factor (1 for
/// ordinary multi-head attention).
pub fn attn_analytic_bound(block: &BlockIR, t_max: usize, opts: &SpectralOpts) -> Result<AttnBound> {
    let w_v_norm = norm_upper(&block.w_v, opts)?;
    let w_o_norm = norm_upper(&block.w_o, opts)?;
    let gqa_factor = ((block.n_heads / block.n_kv_heads) as f64).sqrt();
    Ok(AttnBound {
        k_attn: (t_max as f64).sqrt() * gqa_factor * w_v_norm * w_o_norm,
        w_v_norm,
        w_o_norm,
        t_max,
        gqa_factor,
    })
}

/// Bounds on the gated-MLP path over a probed region: `g_max ≥ |act(gate)|`
/// and `s_max ≥ |act'(gate) · up|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateBounds {
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub g_max: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub s_max: f64,
}

fn silu_slope(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Gate-path bounds measured by replaying the traced inputs of `layer`.
pub fn gate_bounds_from_trace(block: &BlockIR, trace: &TraceDataset, layer: usize) -> Result<GateBounds> {
    let mut g_max = 0.0f64;
    let mut s_max = 0.0f64;
    for rec in trace.layer(layer)? {
        let t = rec.position_ids.len();
        let positions = block
            .position_ids
            .get(..t)
            .ok_or_else(|| Error::Range(format!("{t} traced tokens exceed t_max {}", block.t_max)))?;
        let parts = interpret_block_parts(block, &rec.x_in, positions)?;
        let gate = parts
            .gate_pre
            .ok_or_else(|| Error::MalformedBlock("gate bounds need a gated MLP".into()))?;
        for (&g, &u) in gate.data().iter().zip(parts.up.data()) {
            let g = g as f64;
            g_max = g_max.max((g / (1.0 + (-g).exp())).abs());
            s_max = s_max.max((silu_slope(g) * u as f64).abs());
        }
    }
    Ok(GateBounds { g_max, s_max })
}

/// MLP Lipschitz bound with the formula that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBound {
    pub k_mlp: f64,
    pub formula: &'static str,
}

/// Plain MLP: `‖W_1‖₂ · act_lip · ‖W_2‖₂`. Gated MLP:
/// `‖W_2‖₂ · (g_max · ‖W_1‖₂ + s_max · ‖W_gate‖₂)`, which requires `gate`.
pub fn mlp_spectral_bound(
    block: &BlockIR,
    activation_lip: f64,
    gate: Option<&GateBounds>,
    opts: &SpectralOpts,
) -> Result<MlpBound> {
    if !(activation_lip > 0.0 && activation_lip.is_finite()) {
        return Err(Error::Input(format!("activation_lip must be positive, got {activation_lip}")));
    }
    let w1 = norm_upper(&block.w_1, opts)?;
    let w2 = norm_upper(&block.w_2, opts)?;
    match &block.w_gate {
        None => Ok(MlpBound {
            k_mlp: w1 * activation_lip * w2,
            formula: MLP_PLAIN_FORMULA,
        }),
        Some(wg) => {
            let g = gate.ok_or_else(|| Error::Input("gated MLP bound needs gate-path bounds".into()))?;
            let wg = norm_upper(wg, opts)?;
            Ok(MlpBound {
                k_mlp: w2 * (g.g_max * w1 + g.s_max * wg),
                formula: MLP_GATED_FORMULA,
            })
        }
    }
}

/// `(1 + K_attn) · K_MLP`.
pub fn hybrid_block_bound(k_attn: f64, k_mlp: f64) -> Result<f64> {
    for (name, v) in [("k_attn", k_attn), ("k_mlp", k_mlp)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Input(format!("{name} = {v} must be finite and non-negative")));
        }
    }
    Ok((1.0 + k_attn) * k_mlp)
}

/// Baseline-vs-stitched deviation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySummary {
    pub stitched_layers: Vec<usize>,
    /// Mean `|x̂ − x|` over all tokens and channels of each block output.
    #[serde(serialize_with = "crate::canonical::finite::vec")]
    pub per_layer_mae: Vec<f64>,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub worst_layer_mae: f64,
    /// Largest per-token `ℓ₂` deviation over all layers.
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub max_residual: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub ppl_baseline: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub ppl_stitched: f64,
    /// `PPL_stitched − PPL_baseline`.
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub delta_ppl: f64,
}

/// Replaces the layers in `blocks` with their surrogates and compares every
/// residual stream and the pooled perplexity against the baseline.
pub fn stitch_replay(model: &Model, blocks: &BTreeMap<usize, BlockIR>, prompts: &PromptSet) -> Result<ReplaySummary> {
    prompts.validate()?;
    let cfg = &model.config;
    for (&l, b) in blocks {
        if l >= model.n_layers() {
            return Err(Error::Stitch(format!("layer {l} outside a {}-layer model", model.n_layers())));
        }
        if b.flavor != cfg.flavor || b.d_model != cfg.d_model {
            return Err(Error::Stitch(format!(
                "block for layer {l} is {:?}/d_model {} but the model is {:?}/d_model {}",
                b.flavor, b.d_model, cfg.flavor, cfg.d_model
            )));
        }
    }
    let subs: BTreeMap<usize, &dyn ReplayBlock> =
        blocks.iter().map(|(&l, b)| (l, b as &dyn ReplayBlock)).collect();
    let n_layers = model.n_layers();
    let mut abs_sum = vec![0.0f64; n_layers];
    let mut count = 0usize;
    let mut max_residual = 0.0f64;
    let mut base_nll = Vec::with_capacity(prompts.len());
    let mut hat_nll = Vec::with_capacity(prompts.len());
    for seq in &prompts.sequences {
        let base = model.forward_substituted(seq, &BTreeMap::new())?;
        let hat = model.forward_substituted(seq, &subs)?;
        for l in 0..n_layers {
            let (a, b) = (&hat.residuals[l + 1], &base.residuals[l + 1]);
            abs_sum[l] += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .sum::<f64>();
            for (ra, rb) in a.rows().zip(b.rows()) {
                max_residual = max_residual.max(tensor::l2_distance(ra, rb));
            }
        }
        count += seq.len() * cfg.d_model;
        base_nll.push(base.nll);
        hat_nll.push(hat.nll);
    }
    let per_layer_mae: Vec<f64> = abs_sum.iter().map(|s| s / count as f64).collect();
    let ppl_baseline = pooled_perplexity(base_nll.iter().map(Vec::as_slice))?;
    let ppl_stitched = pooled_perplexity(hat_nll.iter().map(Vec::as_slice))?;
    Ok(ReplaySummary {
        stitched_layers: blocks.keys().copied().collect(),
        worst_layer_mae: per_layer_mae.iter().copied().fold(0.0, f64::max),
        per_layer_mae,
        max_residual,
        ppl_baseline,
        ppl_stitched,
        delta_ppl: ppl_stitched - ppl_baseline,
    })
}

/// A map on `f64` vectors, used for synthetic stacks.
pub trait VecBlock {
    fn apply(&self, x: &[f64]) -> Vec<f64>;
}

/// `x ↦ W x + b` with `W` row-major `d×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBlock {
    pub d: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl VecBlock for AffineBlock {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.d)
            .map(|i| {
                let row = &self.w[i * self.d..(i + 1) * self.d];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b[i]
            })
            .collect()
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// A synthetic stack: base blocks `x ↦ W_i x` with `‖W_i‖₂ = L_i` (random
/// matrix rescaled by its spectral norm) and surrogates adding a random
/// offset of norm exactly `ε_i`.
pub fn random_linear_stack(
    d: usize,
    lipschitz: &[f64],
    epsilons: &[f64],
    rng: &mut impl Rng,
) -> Result<(Vec<AffineBlock>, Vec<AffineBlock>)> {
    BoundInputs::new(epsilons.to_vec(), lipschitz.to_vec())?;
    let mut base = Vec::with_capacity(lipschitz.len());
    let mut hat = Vec::with_capacity(lipschitz.len());
    for (&l, &e) in lipschitz.iter().zip(epsilons) {
        let raw = Tensor::random_uniform(vec![d, d], 1.0, rng);
        let s = spectral_norm(&raw, 2000, 1e-14, rng.gen())?;
        // Divide by the certified upper value so ‖W‖ ≤ L holds.
        let k = if s.value > 0.0 { l / s.upper(1e-12) } else { 0.0 };
        let w: Vec<f64> = raw.data().iter().map(|&v| v as f64 * k).collect();
        let dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm2(&dir);
        let offset: Vec<f64> = dir.iter().map(|v| if n > 0.0 { v * e / n } else { 0.0 }).collect();
        base.push(AffineBlock { d, w: w.clone(), b: vec![0.0; d] });
        hat.push(AffineBlock { d, w, b: offset });
    }
    Ok((base, hat))
}

/// A probe whose final deviation exceeded the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterexample {
    pub probe: usize,
    pub x: Vec<f64>,
    /// `‖x̂_{i+1} − x_{i+1}‖` after every stage.
    pub stage_deviations: Vec<f64>,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    /// Per-block ε_i measured on the surrogate chain's inputs.
    pub epsilons: Vec<f64>,
    pub bound: f64,
    pub max_deviation: f64,
    /// `min over probes of (bound − deviation)`.
    pub min_slack: f64,
    pub probes: usize,
    pub violations: Vec<Counterexample>,
}

impl TheoremReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Relative floating-point allowance when comparing a measured deviation with
/// the bound (both are evaluated in `f64`).
pub const THEOREM_FP_SLACK: f64 = 1e-12;

/// Measures `ε_i = max_x ‖B̂_i(x̂_i) − B_i(x̂_i)‖` along the surrogate chain,
/// instantiates the global bound with `lipschitz`, and checks
/// `‖F̂(x) − F(x)‖ ≤ bound` for every probe.
pub fn check_theorem_on_instance<B: VecBlock, H: VecBlock>(
    base: &[B],
    hat: &[H],
    probes: &[Vec<f64>],
    lipschitz: &[f64],
) -> Result<TheoremReport> {
    if base.len() != hat.len() || base.len() != lipschitz.len() {
        return Err(Error::Input(format!(
            "{} base blocks, {} surrogates, {} Lipschitz constants",
            base.len(),
            hat.len(),
            lipschitz.len()
        )));
    }
    let mut epsilons = vec![0.0f64; base.len()];
    let mut runs = Vec::with_capacity(probes.len());
    for x in probes {
        let mut xb = x.clone();
        let mut xh = x.clone();
        let mut stages = Vec::with_capacity(base.len());
        for (i, (b, h)) in base.iter().zip(hat).enumerate() {
            let yh = h.apply(&xh);
            epsilons[i] = epsilons[i].max(dist(&yh, &b.apply(&xh)));
            xb = b.apply(&xb);
            xh = yh;
            stages.push(dist(&xh, &xb));
        }
        runs.push(stages);
    }
    let bound = global_bound(&BoundInputs::new(epsilons.clone(), lipschitz.to_vec())?);
    let mut max_deviation = 0.0f64;
    let mut min_slack = f64::INFINITY;
    let mut violations = Vec::new();
    for (p, stages) in runs.into_iter().enumerate() {
        let deviation = stages.last().copied().unwrap_or(0.0);
        max_deviation = max_deviation.max(deviation);
        min_slack = min_slack.min(bound - deviation);
        if deviation > bound * (1.0 + THEOREM_FP_SLACK) + f64::MIN_POSITIVE {
            violations.push(Counterexample {
                probe: p,
                x: probes[p].clone(),
                stage_deviations: stages,
                deviation,
            });
        }
    }
    Ok(TheoremReport {
        epsilons,
        bound,
        max_deviation,
        min_slack,
        probes: probes.len(),
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bi(e: &[f64], l: &[f64]) -> BoundInputs {
        BoundInputs::new(e.to_vec(), l.to_vec()).unwrap()
    }

    #[test]
    fn global_bound_cases() {
        assert!((global_bound(&bi(&[0.1, 0.2], &[1.0, 1.0])) - 0.3).abs() < 1e-15);
        assert!((global_bound(&bi(&[0.1, 0.2], &[2.0, 3.0])) - 0.5).abs() < 1e-15);
        assert_eq!(global_bound(&bi(&[], &[])), 0.0);
        assert!(BoundInputs::new(vec![0.1], vec![]).is_err());
        assert!(BoundInputs::new(vec![-0.1], vec![1.0]).is_err());
    }

    #[test]
    fn hybrid_cases() {
        assert_eq!(hybrid_block_bound(0.0, 7.0).unwrap(), 7.0);
        assert_eq!(hybrid_block_bound(5.0, 0.0).unwrap(), 0.0);
        let h = hybrid_block_bound(570.0, 1100.0).unwrap();
        assert!((5.4e5..=6.6e5).contains(&h));
        assert!(hybrid_block_bound(-1.0, 1.0).is_err());
    }

    #[test]
    fn identical_stacks_have_zero_deviation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (base, _) = random_linear_stack(4, &[0.5, 2.0], &[0.0, 0.0], &mut rng).unwrap();
        let probes: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let r = check_theorem_on_instance(&base, &base, &probes, &[0.5, 2.0]).unwrap();
        assert_eq!(r.max_deviation, 0.0);
        assert!(r.holds());
    }

    #[test]
    fn aligned_offsets_are_tight() {
        // W_i = L·I and every offset along e_0: deviation equals the bound.
        let d = 3;
        let l = 0.5;
        let mk = |b: Vec<f64>| AffineBlock {
            d,
            w: (0..d * d).map(|k| if k % (d + 1) == 0 { l } else { 0.0 }).collect(),
            b,
        };
        let base: Vec<_> = (0..4).map(|_| mk(vec![0.0; d])).collect();
        let hat: Vec<_> = (0..4).map(|_| mk(vec![0.1, 0.0, 0.0])).collect();
        let r = check_theorem_on_instance(&base, &hat, &[vec![1.0, 2.0, 3.0]], &[l; 4]).unwrap();
        assert!(r.holds());
        assert!(r.min_slack.abs() < 1e-15);
    }
}
