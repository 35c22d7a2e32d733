//! Block, model and edit certificates. Documents are stored in canonical JSON;
//! a certificate's digest is SHA-256 over that encoding (which is also the
//! file's byte content).

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bundle;
use crate::canonical::{canonical_digest, canonical_encode, decode};
use crate::compose::{
    attn_analytic_bound, gate_bounds_from_trace, global_bound, hybrid_block_bound, mlp_spectral_bound, BoundInputs,
    GateBounds, ReplaySummary, SpectralOpts,
};
use crate::config::{LossPooling, ModelConfig};
use crate::digest::{is_sha256_hex, sha256_hex, ArtifactDigest};
use crate::edit::{Accuracy, EvalResults, PatchSpec};
use crate::error::{Error, Result};
use crate::ir::{BlockIR, MlpForm, INTERPRETER_VERSION};
use crate::metrics::{certify_decision, BlockMetrics, CertPolicy};
use crate::prompts::PromptSet;
use crate::trace::TraceDataset;

pub const BLOCK_SCHEMA: &str = "residcert.block-certificate/1";
pub const MODEL_SCHEMA: &str = "residcert.model-certificate/1";
pub const EDIT_SCHEMA: &str = "residcert.edit-certificate/1";
pub const METRICS_SCHEMA: &str = "residcert.block-metrics/1";

/// Writes a document in canonical encoding and returns its digest.
pub fn write_document<T: Serialize>(path: &Path, doc: &T) -> Result<String> {
    let bytes = canonical_encode(doc)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Reads a document that must be stored canonically; returns it with the
/// digest of its bytes.
pub fn read_document<T: Serialize + DeserializeOwned>(path: &Path) -> Result<(T, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let doc: T = decode(&bytes)?;
    if canonical_encode(&doc)? != bytes {
        return Err(Error::Format(format!("{} is not canonically encoded", path.display())));
    }
    Ok((doc, sha256_hex(&bytes)))
}

pub fn document_digest<T: Serialize>(doc: &T) -> Result<String> {
    canonical_digest(doc)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub name: String,
    pub config_digest: String,
}

impl ModelRef {
    pub fn of(config: &ModelConfig) -> Result<Self> {
        Ok(ModelRef {
            name: config.name.clone(),
            config_digest: config.digest()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRef {
    pub name: String,
    pub digest: String,
}

impl PromptRef {
    pub fn of(prompts: &PromptSet) -> Result<Self> {
        Ok(PromptRef {
            name: prompts.name.clone(),
            digest: prompts.digest()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub tau_act: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub tau_loss: f64,
}

/// `blocks/<k>/metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsDocument {
    pub schema_version: String,
    pub layer: usize,
    pub metrics: BlockMetrics,
    pub thresholds: Thresholds,
    pub policy: CertPolicy,
    pub prompt_set: PromptRef,
    /// SHA-256 of the layer's trace archive.
    pub trace_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockCertificate {
    pub schema_version: String,
    pub interpreter_version: String,
    pub model: ModelRef,
    pub block_index: usize,
    pub prompt_set: PromptRef,
    pub loss_pooling: LossPooling,
    pub thresholds: Thresholds,
    pub policy: CertPolicy,
    pub metrics: BlockMetrics,
    /// Relative artifact path → SHA-256 of the file.
    pub artifacts: BTreeMap<String, String>,
    /// Per-entry digests of the block weights archive.
    pub weight_entries: ArtifactDigest,
    /// Per-entry digests of the layer's trace archive (the probes).
    pub trace_entries: ArtifactDigest,
    pub certified: bool,
    pub reasons: Vec<String>,
}

/// Identity fields of a block certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCertMeta {
    pub model: ModelRef,
    pub block_index: usize,
    pub prompt_set: PromptRef,
    pub loss_pooling: LossPooling,
}

/// Digests a block certificate must carry.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockArtifacts {
    pub files: BTreeMap<String, String>,
    pub weight_entries: ArtifactDigest,
    pub trace_entries: ArtifactDigest,
}

/// Artifact paths every block certificate must reference.
pub fn required_block_artifacts(layer: usize) -> Vec<String> {
    vec![
        bundle::model_config(),
        bundle::model_weights(),
        bundle::trace_config(),
        bundle::trace_prompts(),
        bundle::trace_layer(layer),
        bundle::block_weights(layer),
        bundle::block_metrics(layer),
    ]
}

fn check_digests<'a>(what: &str, digests: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
    for (name, d) in digests {
        if !is_sha256_hex(d) {
            return Err(Error::Emission(format!("{what} `{name}` has malformed digest `{d}`")));
        }
    }
    Ok(())
}

pub fn emit_block_certificate(
    metrics: &BlockMetrics,
    policy: &CertPolicy,
    artifacts: BlockArtifacts,
    meta: BlockCertMeta,
) -> Result<BlockCertificate> {
    policy.validate()?;
    for rel in required_block_artifacts(meta.block_index) {
        if !artifacts.files.contains_key(&rel) {
            return Err(Error::Emission(format!("missing digest for `{rel}`")));
        }
    }
    if artifacts.weight_entries.is_empty() || artifacts.trace_entries.is_empty() {
        return Err(Error::Emission("weight and trace entry digests are required".into()));
    }
    check_digests("artifact", artifacts.files.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    check_digests("weight entry", artifacts.weight_entries.entries())?;
    check_digests("trace entry", artifacts.trace_entries.entries())?;
    check_digests("model config", [("model", meta.model.config_digest.as_str())])?;
    check_digests("prompt set", [("prompts", meta.prompt_set.digest.as_str())])?;
    let decision = certify_decision(metrics, policy);
    let cert = BlockCertificate {
        schema_version: BLOCK_SCHEMA.to_string(),
        interpreter_version: INTERPRETER_VERSION.to_string(),
        model: meta.model,
        block_index: meta.block_index,
        prompt_set: meta.prompt_set,
        loss_pooling: meta.loss_pooling,
        thresholds: Thresholds {
            tau_act: metrics.tau_act,
            tau_loss: metrics.tau_loss,
        },
        policy: *policy,
        metrics: metrics.clone(),
        artifacts: artifacts.files,
        weight_entries: artifacts.weight_entries,
        trace_entries: artifacts.trace_entries,
        certified: decision.certified,
        reasons: decision.reasons,
    };
    // Surface non-finite metrics now rather than at write time.
    canonical_encode(&cert).map_err(|e| Error::Emission(e.to_string()))?;
    Ok(cert)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KMlpSource {
    Analytic,
    External,
}

/// Lipschitz quantities of one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzEntry {
    pub layer: usize,
    pub attn_formula: String,
    pub t_max: usize,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub k_attn: f64,
    pub mlp_formula: String,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub activation_lip: f64,
    pub gate_bounds: Option<GateBounds>,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub k_mlp_analytic: f64,
    #[serde(serialize_with = "crate::canonical::finite::opt")]
    pub k_mlp_external: Option<f64>,
    pub k_mlp_source: KMlpSource,
    /// `(1 + K_attn) · (1 + K_MLP_analytic)`: both residual branches bounded
    /// analytically.
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub analytic_upper_bound: f64,
    /// `(1 + K_attn) · K_MLP`, `K_MLP` external when supplied.
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub hybrid_upper_bound: f64,
}

impl LipschitzEntry {
    /// Fills the derived fields from the operands.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        layer: usize,
        t_max: usize,
        k_attn: f64,
        mlp_formula: &str,
        activation_lip: f64,
        gate_bounds: Option<GateBounds>,
        k_mlp_analytic: f64,
        k_mlp_external: Option<f64>,
    ) -> Result<Self> {
        let (k_mlp, source) = match k_mlp_external {
            Some(k) => (k, KMlpSource::External),
            None => (k_mlp_analytic, KMlpSource::Analytic),
        };
        Ok(LipschitzEntry {
            layer,
            attn_formula: crate::compose::ATTN_FORMULA.to_string(),
            t_max,
            k_attn,
            mlp_formula: mlp_formula.to_string(),
            activation_lip,
            gate_bounds,
            k_mlp_analytic,
            k_mlp_external,
            k_mlp_source: source,
            analytic_upper_bound: (1.0 + k_attn) * (1.0 + k_mlp_analytic),
            hybrid_upper_bound: hybrid_block_bound(k_attn, k_mlp)?,
        })
    }

    /// Computes the entry of `layer` from its surrogate: analytic attention
    /// bound at the block's `t_max`, spectral MLP bound (gate-path bounds from
    /// the trace for gated MLPs), and the hybrid bound.
    pub fn compute(
        block: &BlockIR,
        layer: usize,
        trace: &TraceDataset,
        k_mlp_external: Option<f64>,
        opts: &SpectralOpts,
    ) -> Result<Self> {
        let attn = attn_analytic_bound(block, block.t_max, opts)?;
        let gate = match block.mlp_form() {
            MlpForm::Gated => Some(gate_bounds_from_trace(block, trace, layer)?),
            MlpForm::Plain => None,
        };
        let activation_lip = block.activation.max_slope();
        let mlp = mlp_spectral_bound(block, activation_lip, gate.as_ref(), opts)?;
        LipschitzEntry::new(
            layer,
            block.t_max,
            attn.k_attn,
            mlp.formula,
            activation_lip,
            gate,
            mlp.k_mlp,
            k_mlp_external,
        )
    }

    /// The `K_MLP` operand the hybrid bound used.
    pub fn k_mlp_used(&self) -> f64 {
        match self.k_mlp_source {
            KMlpSource::External => self.k_mlp_external.unwrap_or(f64::NAN),
            KMlpSource::Analytic => self.k_mlp_analytic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockCertRef {
    pub layer: usize,
    pub path: String,
    pub digest: String,
}

/// Theorem bound instantiated with per-block ε and hybrid Lipschitz bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalBoundEntry {
    #[serde(serialize_with = "crate::canonical::finite::vec")]
    pub epsilons: Vec<f64>,
    #[serde(serialize_with = "crate::canonical::finite::vec")]
    pub lipschitz: Vec<f64>,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub bound: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub sum_epsilons: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCertificate {
    pub schema_version: String,
    pub interpreter_version: String,
    pub model: ModelRef,
    pub n_layers: usize,
    pub prompt_set: PromptRef,
    pub loss_pooling: LossPooling,
    pub block_certificates: Vec<BlockCertRef>,
    pub replay: ReplaySummary,
    pub lipschitz: Vec<LipschitzEntry>,
    pub global_bound: GlobalBoundEntry,
    pub spectral: SpectralOpts,
    pub artifacts: BTreeMap<String, String>,
}

/// Identity fields of a model certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCertMeta {
    pub model: ModelRef,
    pub n_layers: usize,
    pub prompt_set: PromptRef,
    pub loss_pooling: LossPooling,
    pub spectral: SpectralOpts,
    pub artifacts: BTreeMap<String, String>,
}

/// References every block certificate by digest and embeds the replay
/// summary, Lipschitz entries and the instantiated global bound. Layers
/// without a block certificate enter the bound with `ε = 0`.
pub fn aggregate_model_certificate(
    block_certs: &[(BlockCertRef, BlockCertificate)],
    replay: ReplaySummary,
    lipschitz: Vec<LipschitzEntry>,
    meta: ModelCertMeta,
) -> Result<ModelCertificate> {
    let n = meta.n_layers;
    if replay.per_layer_mae.len() != n {
        return Err(Error::Aggregation(format!(
            "replay covers {} layers, model has {n}",
            replay.per_layer_mae.len()
        )));
    }
    let mut eps = vec![0.0f64; n];
    let mut refs = Vec::with_capacity(block_certs.len());
    for (r, c) in block_certs {
        if r.layer != c.block_index || r.layer >= n {
            return Err(Error::Aggregation(format!(
                "certificate reference for layer {} names block {}",
                r.layer, c.block_index
            )));
        }
        if c.model != meta.model || c.prompt_set != meta.prompt_set {
            return Err(Error::Aggregation(format!(
                "block certificate {} belongs to a different model or prompt set",
                r.layer
            )));
        }
        if document_digest(c)? != r.digest {
            return Err(Error::Aggregation(format!("digest of block certificate {} is stale", r.layer)));
        }
        eps[r.layer] = c.metrics.epsilon_max;
        refs.push(r.clone());
    }
    refs.sort_by_key(|r| r.layer);
    if refs.windows(2).any(|w| w[0].layer == w[1].layer) {
        return Err(Error::Aggregation("duplicate block certificate layer".into()));
    }
    let cert_layers: Vec<usize> = refs.iter().map(|r| r.layer).collect();
    if replay.stitched_layers != cert_layers {
        return Err(Error::Aggregation(format!(
            "stitched layers {:?} differ from certified layers {cert_layers:?}",
            replay.stitched_layers
        )));
    }
    if lipschitz.len() != n || lipschitz.iter().enumerate().any(|(i, e)| e.layer != i) {
        return Err(Error::Aggregation(format!(
            "Lipschitz entries must cover layers 0..{n} in order"
        )));
    }
    let lips: Vec<f64> = lipschitz.iter().map(|e| e.hybrid_upper_bound).collect();
    let inputs = BoundInputs::new(eps.clone(), lips.clone())?;
    let cert = ModelCertificate {
        schema_version: MODEL_SCHEMA.to_string(),
        interpreter_version: INTERPRETER_VERSION.to_string(),
        model: meta.model,
        n_layers: n,
        prompt_set: meta.prompt_set,
        loss_pooling: meta.loss_pooling,
        block_certificates: refs,
        replay,
        lipschitz,
        global_bound: GlobalBoundEntry {
            bound: global_bound(&inputs),
            sum_epsilons: crate::compose::sum_epsilons(&inputs),
            epsilons: eps,
            lipschitz: lips,
        },
        spectral: meta.spectral,
        artifacts: meta.artifacts,
    };
    canonical_encode(&cert).map_err(|e| Error::Aggregation(e.to_string()))?;
    Ok(cert)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRef {
    pub name: String,
    pub digest: String,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditCertificate {
    pub schema_version: String,
    pub interpreter_version: String,
    pub model: ModelRef,
    pub patch: PatchSpec,
    pub corpus: CorpusRef,
    pub markers_digest: String,
    pub markers_path: String,
    pub vocabulary: String,
    pub max_new: usize,
    pub before: Accuracy,
    pub after: Accuracy,
    /// SHA-256 over the canonical list of patched completions.
    pub completions_digest: String,
    pub prompt_set: PromptRef,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub epsilon_edit: f64,
    #[serde(serialize_with = "crate::canonical::finite::f64")]
    pub downstream_deviation: f64,
    /// `downstream_deviation / epsilon_edit` when `epsilon_edit > 0`.
    #[serde(serialize_with = "crate::canonical::finite::opt")]
    pub amplification: Option<f64>,
    /// `ε_edit · Π_{j>ℓ} hybrid_j` from the referenced model certificate.
    #[serde(serialize_with = "crate::canonical::finite::opt")]
    pub deviation_bound: Option<f64>,
    /// Referenced certificates: relative path → digest.
    pub references: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

/// Identity and provenance fields of an edit certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct EditCertMeta {
    pub model: ModelRef,
    pub corpus: CorpusRef,
    pub markers_digest: String,
    pub markers_path: String,
    pub vocabulary: String,
    pub max_new: usize,
    pub prompt_set: PromptRef,
    pub artifacts: BTreeMap<String, String>,
}

pub fn completions_digest(completions: &[Vec<u32>]) -> Result<String> {
    canonical_digest(completions)
}

/// `ε_edit · Π_{j>ℓ} L_j` — the global bound with a single nonzero ε.
pub fn edit_deviation_bound(epsilon_edit: f64, layer: usize, lipschitz: &[f64]) -> Result<f64> {
    let mut eps = vec![0.0; lipschitz.len()];
    *eps
        .get_mut(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} outside {} Lipschitz entries", lipschitz.len())))? =
        epsilon_edit;
    Ok(global_bound(&BoundInputs::new(eps, lipschitz.to_vec())?))
}

pub fn emit_edit_certificate(
    patch: &PatchSpec,
    eval: &EvalResults,
    epsilon_edit: f64,
    downstream_deviation: f64,
    deviation_bound: Option<f64>,
    references: BTreeMap<String, String>,
    meta: EditCertMeta,
) -> Result<EditCertificate> {
    check_digests("reference", references.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    check_digests("artifact", meta.artifacts.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let cert = EditCertificate {
        schema_version: EDIT_SCHEMA.to_string(),
        interpreter_version: INTERPRETER_VERSION.to_string(),
        model: meta.model,
        patch: *patch,
        corpus: meta.corpus,
        markers_digest: meta.markers_digest,
        markers_path: meta.markers_path,
        vocabulary: meta.vocabulary,
        max_new: meta.max_new,
        before: eval.base.accuracy,
        after: eval.patched.accuracy,
        completions_digest: completions_digest(&eval.patched.completions)?,
        prompt_set: meta.prompt_set,
        epsilon_edit,
        downstream_deviation,
        amplification: (epsilon_edit > 0.0).then(|| downstream_deviation / epsilon_edit),
        deviation_bound,
        references,
        artifacts: meta.artifacts,
    };
    canonical_encode(&cert).map_err(|e| Error::Emission(e.to_string()))?;
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(cov_act: f64, cov_loss: f64) -> BlockMetrics {
        BlockMetrics {
            epsilon_max: 1e-6,
            mae: 5e-7,
            cov_act,
            cov_path: 1.0,
            cov_loss,
            tau_act: 1e-2,
            tau_loss: 1e-3,
            act_covered: 10,
            path_covered: 10,
            token_count: 10,
            best_prompt_by_cov_act: 0,
            worst_prompt_by_cov_act: 0,
        }
    }

    fn artifacts(layer: usize) -> BlockArtifacts {
        let h = sha256_hex(b"x");
        BlockArtifacts {
            files: required_block_artifacts(layer).into_iter().map(|p| (p, h.clone())).collect(),
            weight_entries: ArtifactDigest([("w_q.npy".to_string(), h.clone())].into()),
            trace_entries: ArtifactDigest([("x_in_000.npy".to_string(), h)].into()),
        }
    }

    fn meta(layer: usize) -> BlockCertMeta {
        BlockCertMeta {
            model: ModelRef {
                name: "m".into(),
                config_digest: sha256_hex(b"c"),
            },
            block_index: layer,
            prompt_set: PromptRef {
                name: "p".into(),
                digest: sha256_hex(b"p"),
            },
            loss_pooling: LossPooling::TokenWeighted,
        }
    }

    #[test]
    fn emission_computes_decision() {
        let p = CertPolicy::default();
        let c = emit_block_certificate(&metrics(0.9999, 1.0), &p, artifacts(1), meta(1)).unwrap();
        assert!(c.certified);
        let c = emit_block_certificate(&metrics(1.0, 0.5), &p, artifacts(1), meta(1)).unwrap();
        assert!(!c.certified);
        assert!(c.reasons[0].contains("cov_loss"));
    }

    #[test]
    fn emission_requires_digests() {
        let p = CertPolicy::default();
        let mut a = artifacts(1);
        a.files.remove(&bundle::block_weights(1));
        assert!(matches!(
            emit_block_certificate(&metrics(1.0, 1.0), &p, a, meta(1)),
            Err(Error::Emission(_))
        ));
        let mut a = artifacts(1);
        a.files.insert("extra".into(), "XYZ".into());
        assert!(matches!(
            emit_block_certificate(&metrics(1.0, 1.0), &p, a, meta(1)),
            Err(Error::Emission(_))
        ));
        let mut m = metrics(1.0, 1.0);
        m.mae = f64::NAN;
        assert!(matches!(
            emit_block_certificate(&m, &p, artifacts(1), meta(1)),
            Err(Error::Emission(_))
        ));
    }

    #[test]
    fn digest_is_stable_under_reencoding() {
        let c = emit_block_certificate(&metrics(1.0, 1.0), &CertPolicy::default(), artifacts(0), meta(0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let d = write_document(&path, &c).unwrap();
        let (back, d2): (BlockCertificate, String) = read_document(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(d, d2);
        assert_eq!(document_digest(&back).unwrap(), d);
    }

    #[test]
    fn lipschitz_entry_formula() {
        let e = LipschitzEntry::new(0, 8, 570.0, "x", 1.1, None, 2.0, Some(1100.0)).unwrap();
        assert_eq!(e.hybrid_upper_bound, 571.0 * 1100.0);
        assert_eq!(e.k_mlp_source, KMlpSource::External);
        let e = LipschitzEntry::new(0, 8, 3.0, "x", 1.1, None, 2.0, None).unwrap();
        assert_eq!(e.hybrid_upper_bound, 8.0);
        assert_eq!(e.analytic_upper_bound, 12.0);
    }

    #[test]
    fn edit_bound_uses_suffix() {
        assert_eq!(edit_deviation_bound(0.5, 1, &[10.0, 10.0, 3.0, 2.0]).unwrap(), 3.0);
        assert_eq!(edit_deviation_bound(0.5, 3, &[10.0, 10.0, 3.0, 2.0]).unwrap(), 0.5);
    }
}
