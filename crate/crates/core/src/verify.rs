//! Independent re-verification of certificates against an artifact
//! directory: digest checks, metric recomputation with the current
//! interpreter, and status consistency.
//!
//! Verification never writes. Every problem becomes a failed check in the
//! report rather than an early error, so a report always lists every check.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive;
use crate::bundle::{self, resolve};
use crate::cert::{
    edit_deviation_bound, read_document, required_block_artifacts, BlockCertificate, EditCertificate, KMlpSource,
    LipschitzEntry, MetricsDocument, ModelCertificate, ModelRef, PromptRef, BLOCK_SCHEMA, EDIT_SCHEMA,
    METRICS_SCHEMA, MODEL_SCHEMA,
};
use crate::compose::{global_bound, stitch_replay, sum_epsilons, BoundInputs, ATTN_FORMULA};
use crate::config::ModelConfig;
use crate::digest::{digest_file, is_sha256_hex};
use crate::edit::{apply_edit, edit_downstream_deviation, edit_local_error, eval_refusal_corpus, Accuracy, Corpus, MarkerSet, Vocabulary};
use crate::error::{Error, Result};
use crate::ir::{self, BlockIR, INTERPRETER_VERSION};
use crate::metrics::{certify_decision, compute_block_metrics, BlockMetrics};
use crate::model::Model;
use crate::prompts::PromptSet;
use crate::trace::TraceDataset;

/// Per-scalar tolerance for continuous quantities: a recomputed value matches
/// when `|a − b| ≤ abs` or `|a − b| ≤ rel · max(|a|, |b|)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { rel: 1e-6, abs: 1e-9 }
    }
}

impl Tolerances {
    pub fn new(rel: f64, abs: f64) -> Result<Self> {
        for (name, v) in [("rel", rel), ("abs", abs)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Input(format!("{name} tolerance {v} must be finite and non-negative")));
            }
        }
        Ok(Tolerances { rel, abs })
    }

    pub fn close(&self, a: f64, b: f64) -> bool {
        let d = (a - b).abs();
        d <= self.abs || d <= self.rel * a.abs().max(b.abs())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    pub details: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// `block`, `model` or `edit`.
    pub kind: String,
    pub certificate: String,
    /// SHA-256 of the certificate file, when it could be read.
    pub certificate_digest: Option<String>,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl VerifyReport {
    fn new(kind: &str, certificate: &str) -> Self {
        VerifyReport {
            kind: kind.to_string(),
            certificate: certificate.to_string(),
            certificate_digest: None,
            checks: Vec::new(),
            passed: false,
        }
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn status(&self, name: &str) -> Option<Status> {
        self.check(name).map(|c| c.status)
    }

    /// Records a check that passes iff `problems` is empty.
    fn record(&mut self, name: &str, problems: Vec<String>) -> bool {
        let status = if problems.is_empty() { Status::Pass } else { Status::Fail };
        self.checks.push(CheckResult {
            name: name.to_string(),
            status,
            details: problems,
        });
        status == Status::Pass
    }

    fn skip(&mut self, name: &str, reason: &str) {
        self.checks.push(CheckResult {
            name: name.to_string(),
            status: Status::Skip,
            details: vec![reason.to_string()],
        });
    }

    fn finish(mut self) -> Self {
        self.passed = !self.checks.is_empty() && self.checks.iter().all(|c| c.status != Status::Fail);
        self
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} certificate {}: {}",
            self.kind,
            self.certificate,
            if self.passed { "PASS" } else { "FAIL" }
        )?;
        for c in &self.checks {
            let tag = match c.status {
                Status::Pass => "pass",
                Status::Fail => "FAIL",
                Status::Skip => "skip",
            };
            writeln!(f, "  [{tag}] {}", c.name)?;
            for d in &c.details {
                writeln!(f, "         {d}")?;
            }
        }
        Ok(())
    }
}

/// Collects human-readable mismatches between stored and recomputed values.
struct Diff<'a> {
    tol: &'a Tolerances,
    problems: Vec<String>,
}

impl<'a> Diff<'a> {
    fn new(tol: &'a Tolerances) -> Self {
        Diff {
            tol,
            problems: Vec::new(),
        }
    }

    fn approx(&mut self, name: &str, stored: f64, recomputed: f64) {
        if !self.tol.close(stored, recomputed) {
            self.problems.push(format!(
                "{name}: stored {stored:e}, recomputed {recomputed:e} (delta {:e})",
                recomputed - stored
            ));
        }
    }

    fn exact<T: PartialEq + fmt::Debug>(&mut self, name: &str, stored: T, recomputed: T) {
        if stored != recomputed {
            self.problems.push(format!("{name}: stored {stored:?}, recomputed {recomputed:?}"));
        }
    }

    fn error(&mut self, e: impl fmt::Display) {
        self.problems.push(e.to_string());
    }
}

fn check_version(report: &mut VerifyReport, schema: &str, want_schema: &str, interpreter: &str) -> bool {
    let mut p = Vec::new();
    if schema != want_schema {
        p.push(format!("schema `{schema}`, expected `{want_schema}`"));
    }
    if interpreter != INTERPRETER_VERSION {
        p.push(format!("interpreter `{interpreter}`, this verifier is `{INTERPRETER_VERSION}`"));
    }
    report.record("interpreter_version", p)
}

/// Whole-bundle check against the run manifest, when one is present.
fn check_bundle(report: &mut VerifyReport, root: &Path) {
    match bundle::check_run_manifest(root) {
        Ok(None) => report.skip("bundle_manifest", "no run manifest in the artifact directory"),
        Ok(Some(problems)) => {
            report.record("bundle_manifest", problems);
        }
        Err(e) => {
            report.record("bundle_manifest", vec![e.to_string()]);
        }
    }
}

/// File digests listed in `artifacts`, plus presence of the `required` paths.
fn file_digest_problems(root: &Path, artifacts: &BTreeMap<String, String>, required: &[String]) -> Vec<String> {
    let mut p = Vec::new();
    for rel in required {
        if !artifacts.contains_key(rel) {
            p.push(format!("{rel}: not referenced by the certificate"));
        }
    }
    for (rel, want) in artifacts {
        if !is_sha256_hex(want) {
            p.push(format!("{rel}: malformed digest `{want}`"));
            continue;
        }
        match resolve(root, rel).and_then(digest_file) {
            Ok(found) if &found == want => {}
            Ok(found) => p.push(format!("{rel}: digest {found} differs from recorded {want}")),
            Err(e) => p.push(format!("{rel}: {e}")),
        }
    }
    p
}

fn load_config(root: &Path) -> Result<ModelConfig> {
    let path = resolve(root, &bundle::model_config())?;
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let c: ModelConfig = crate::canonical::decode(&bytes)?;
    c.validate()?;
    Ok(c)
}

fn load_prompts(root: &Path) -> Result<PromptSet> {
    PromptSet::read(&resolve(root, &bundle::trace_prompts())?)
}

fn check_model_ref(d: &mut Diff, stored: &ModelRef, config: &ModelConfig) {
    match ModelRef::of(config) {
        Ok(r) => d.exact("model", stored, &r),
        Err(e) => d.error(e),
    }
}

fn check_prompt_ref(d: &mut Diff, stored: &PromptRef, prompts: &PromptSet) {
    match PromptRef::of(prompts) {
        Ok(r) => d.exact("prompt_set", stored, &r),
        Err(e) => d.error(e),
    }
}

/// Reads and verifies a block certificate file against `root`.
pub fn verify_block_file(cert_path: &Path, root: &Path, tol: &Tolerances) -> VerifyReport {
    let mut report = VerifyReport::new("block", &cert_path.display().to_string());
    match read_document::<BlockCertificate>(cert_path) {
        Ok((cert, digest)) => {
            report.certificate_digest = Some(digest);
            block_checks(&mut report, &cert, root, tol);
        }
        Err(e) => {
            report.record("certificate", vec![e.to_string()]);
            check_bundle(&mut report, root);
        }
    }
    report.finish()
}

/// Verifies an in-memory block certificate against `root`.
pub fn verify_block(cert: &BlockCertificate, root: &Path, tol: &Tolerances) -> VerifyReport {
    let mut report = VerifyReport::new("block", &format!("block {}", cert.block_index));
    report.certificate_digest = crate::cert::document_digest(cert).ok();
    block_checks(&mut report, cert, root, tol);
    report.finish()
}

fn block_checks(report: &mut VerifyReport, cert: &BlockCertificate, root: &Path, tol: &Tolerances) {
    let layer = cert.block_index;
    let version_ok = check_version(report, &cert.schema_version, BLOCK_SCHEMA, &cert.interpreter_version);
    check_bundle(report, root);

    // Check 1: every referenced artifact digest.
    let mut p = file_digest_problems(root, &cert.artifacts, &required_block_artifacts(layer));
    for (rel, entries) in [
        (bundle::block_weights(layer), &cert.weight_entries),
        (bundle::trace_layer(layer), &cert.trace_entries),
    ] {
        if entries.is_empty() {
            p.push(format!("{rel}: no entry digests recorded"));
            continue;
        }
        if let Err(e) = resolve(root, &rel).and_then(|path| archive::read_tensor_archive_verified(&path, entries)) {
            p.push(format!("{rel}: {e}"));
        }
    }
    let digests_ok = report.record("artifact_digests", p);

    // Identity fields against the referenced artifacts.
    let mut d = Diff::new(tol);
    let config = load_config(root);
    match &config {
        Ok(c) => {
            check_model_ref(&mut d, &cert.model, c);
            d.exact("loss_pooling", cert.loss_pooling, c.loss_pooling);
            if layer >= c.n_layers {
                d.error(format!("block index {layer} outside a {}-layer model", c.n_layers));
            }
        }
        Err(e) => d.error(e),
    }
    match load_prompts(root) {
        Ok(p) => check_prompt_ref(&mut d, &cert.prompt_set, &p),
        Err(e) => d.error(e),
    }
    d.exact("thresholds.tau_act", cert.thresholds.tau_act, cert.metrics.tau_act);
    d.exact("thresholds.tau_loss", cert.thresholds.tau_loss, cert.metrics.tau_loss);
    let mut metrics_doc = None;
    match resolve(root, &bundle::block_metrics(layer)).and_then(|p| read_document::<MetricsDocument>(&p)) {
        Ok((m, _)) => {
            d.exact("metrics.json schema", m.schema_version.as_str(), METRICS_SCHEMA);
            d.exact("metrics.json layer", m.layer, layer);
            d.exact("metrics.json thresholds", &m.thresholds, &cert.thresholds);
            d.exact("metrics.json policy", &m.policy, &cert.policy);
            d.exact("metrics.json prompt_set", &m.prompt_set, &cert.prompt_set);
            d.exact(
                "metrics.json trace_digest",
                Some(&m.trace_digest),
                cert.artifacts.get(&bundle::trace_layer(layer)),
            );
            metrics_doc = Some(m.metrics);
        }
        Err(e) => d.error(format!("{}: {e}", bundle::block_metrics(layer))),
    }
    let meta_ok = report.record("metadata", d.problems);

    // Checks 2 and 3 replay only artifacts that passed check 1.
    if !(version_ok && digests_ok && meta_ok) {
        report.skip("metric_recompute", "artifact, metadata or version check failed");
        report.skip("certified_flag", "metrics were not recomputed");
        return;
    }
    let recomputed = (|| -> Result<BlockMetrics> {
        let model = Model::load(&resolve(root, bundle::MODEL_DIR)?)?;
        let trace = TraceDataset::read_dir_with(&resolve(root, bundle::TRACES_DIR)?, Some(&[layer]))?;
        let block = ir::read_archive_verified(&resolve(root, &bundle::block_weights(layer))?, &cert.weight_entries)?;
        compute_block_metrics(&model, &block, layer, &trace, cert.thresholds.tau_act, cert.thresholds.tau_loss)
    })();
    let m = match recomputed {
        Ok(m) => m,
        Err(e) => {
            report.record("metric_recompute", vec![e.to_string()]);
            report.skip("certified_flag", "metrics were not recomputed");
            return;
        }
    };
    // Both stored copies (certificate and metrics.json) must match the replay.
    let mut d = Diff::new(tol);
    compare_metrics(&mut d, "", &cert.metrics, &m);
    if let Some(doc) = &metrics_doc {
        compare_metrics(&mut d, "metrics.json ", doc, &m);
    }
    let metrics_ok = report.record("metric_recompute", d.problems);

    if !metrics_ok {
        report.skip("certified_flag", "recomputed metrics differ from the stored ones");
        return;
    }
    let mut p = Vec::new();
    if let Err(e) = cert.policy.validate() {
        p.push(e.to_string());
    }
    let decision = certify_decision(&m, &cert.policy);
    if decision.certified != cert.certified {
        p.push(format!(
            "stored certified={}, policy on recomputed metrics gives {}",
            cert.certified, decision.certified
        ));
    }
    if decision.reasons != cert.reasons {
        p.push(format!("stored reasons {:?}, recomputed {:?}", cert.reasons, decision.reasons));
    }
    report.record("certified_flag", p);
}

fn compare_metrics(d: &mut Diff, prefix: &str, s: &BlockMetrics, m: &BlockMetrics) {
    let f = |name: &str| format!("{prefix}{name}");
    d.approx(&f("epsilon_max"), s.epsilon_max, m.epsilon_max);
    d.approx(&f("mae"), s.mae, m.mae);
    d.approx(&f("cov_loss"), s.cov_loss, m.cov_loss);
    d.exact(&f("cov_act"), s.cov_act, m.cov_act);
    d.exact(&f("cov_path"), s.cov_path, m.cov_path);
    d.exact(&f("tau_act"), s.tau_act, m.tau_act);
    d.exact(&f("tau_loss"), s.tau_loss, m.tau_loss);
    d.exact(&f("act_covered"), s.act_covered, m.act_covered);
    d.exact(&f("path_covered"), s.path_covered, m.path_covered);
    d.exact(&f("token_count"), s.token_count, m.token_count);
    d.exact(&f("best_prompt_by_cov_act"), s.best_prompt_by_cov_act, m.best_prompt_by_cov_act);
    d.exact(&f("worst_prompt_by_cov_act"), s.worst_prompt_by_cov_act, m.worst_prompt_by_cov_act);
}

/// Artifact paths every model certificate must reference.
pub fn required_model_artifacts() -> Vec<String> {
    vec![
        bundle::model_config(),
        bundle::model_weights(),
        bundle::trace_config(),
        bundle::trace_prompts(),
    ]
}

pub fn verify_model_file(cert_path: &Path, root: &Path, tol: &Tolerances) -> VerifyReport {
    let mut report = VerifyReport::new("model", &cert_path.display().to_string());
    match read_document::<ModelCertificate>(cert_path) {
        Ok((cert, digest)) => {
            report.certificate_digest = Some(digest);
            model_checks(&mut report, &cert, root, tol);
        }
        Err(e) => {
            report.record("certificate", vec![e.to_string()]);
            check_bundle(&mut report, root);
        }
    }
    report.finish()
}

pub fn verify_model(cert: &ModelCertificate, root: &Path, tol: &Tolerances) -> VerifyReport {
    let mut report = VerifyReport::new("model", "model certificate");
    report.certificate_digest = crate::cert::document_digest(cert).ok();
    model_checks(&mut report, cert, root, tol);
    report.finish()
}

fn model_checks(report: &mut VerifyReport, cert: &ModelCertificate, root: &Path, tol: &Tolerances) {
    let n = cert.n_layers;
    let version_ok = check_version(report, &cert.schema_version, MODEL_SCHEMA, &cert.interpreter_version);
    check_bundle(report, root);

    // Referenced block certificates, by digest of their canonical encoding.
    let mut p = Vec::new();
    let mut blocks: BTreeMap<usize, BlockCertificate> = BTreeMap::new();
    for r in &cert.block_certificates {
        let loaded = resolve(root, &r.path).and_then(|path| read_document::<BlockCertificate>(&path));
        match loaded {
            Ok((c, digest)) => {
                if digest != r.digest {
                    p.push(format!("block certificate {} at {}: file digest is {digest}", r.digest, r.path));
                } else if c.block_index != r.layer {
                    p.push(format!("block certificate {} covers block {}, referenced for layer {}", r.digest, c.block_index, r.layer));
                } else if c.model != cert.model || c.prompt_set != cert.prompt_set {
                    p.push(format!("block certificate {} belongs to a different model or prompt set", r.digest));
                } else if blocks.insert(r.layer, c).is_some() {
                    p.push(format!("layer {} referenced twice", r.layer));
                }
            }
            Err(e) => p.push(format!("block certificate {} at {}: {e}", r.digest, r.path)),
        }
    }
    let refs_ok = report.record("references", p);

    let config = load_config(root);
    let mut p = Vec::new();
    match &config {
        Ok(c) if c.n_layers != n => p.push(format!("certificate declares {n} layers, model has {}", c.n_layers)),
        Ok(_) => {}
        Err(e) => p.push(e.to_string()),
    }
    for (what, len) in [
        ("replay.per_layer_mae", cert.replay.per_layer_mae.len()),
        ("lipschitz", cert.lipschitz.len()),
        ("global_bound.epsilons", cert.global_bound.epsilons.len()),
        ("global_bound.lipschitz", cert.global_bound.lipschitz.len()),
    ] {
        if len != n {
            p.push(format!("{what} has {len} entries, expected {n}"));
        }
    }
    let ref_layers: Vec<usize> = cert.block_certificates.iter().map(|r| r.layer).collect();
    if cert.replay.stitched_layers != ref_layers {
        p.push(format!(
            "stitched layers {:?} differ from referenced layers {ref_layers:?}",
            cert.replay.stitched_layers
        ));
    }
    let count_ok = report.record("layer_count", p);

    let digests_ok = report.record(
        "artifact_digests",
        file_digest_problems(root, &cert.artifacts, &required_model_artifacts()),
    );

    let mut d = Diff::new(tol);
    match &config {
        Ok(c) => {
            check_model_ref(&mut d, &cert.model, c);
            d.exact("loss_pooling", cert.loss_pooling, c.loss_pooling);
        }
        Err(e) => d.error(e),
    }
    let prompts = load_prompts(root);
    match &prompts {
        Ok(p) => check_prompt_ref(&mut d, &cert.prompt_set, p),
        Err(e) => d.error(e),
    }
    let meta_ok = report.record("metadata", d.problems);

    // Stored-operand identities hold regardless of the artifacts.
    let mut d = Diff::new(tol);
    for (i, e) in cert.lipschitz.iter().enumerate() {
        d.exact(&format!("lipschitz[{i}].layer"), e.layer, i);
        d.exact(&format!("lipschitz[{i}].attn_formula"), e.attn_formula.as_str(), ATTN_FORMULA);
        d.exact(
            &format!("lipschitz[{i}].k_mlp_source"),
            e.k_mlp_source,
            if e.k_mlp_external.is_some() { KMlpSource::External } else { KMlpSource::Analytic },
        );
        d.exact(
            &format!("lipschitz[{i}].hybrid_upper_bound"),
            e.hybrid_upper_bound,
            (1.0 + e.k_attn) * e.k_mlp_used(),
        );
        d.exact(
            &format!("lipschitz[{i}].analytic_upper_bound"),
            e.analytic_upper_bound,
            (1.0 + e.k_attn) * (1.0 + e.k_mlp_analytic),
        );
    }
    let preconditions = version_ok && refs_ok && count_ok && digests_ok && meta_ok;
    if preconditions {
        // Re-derive the analytic operands from the surrogate weights.
        let recomputed = (|| -> Result<Vec<LipschitzEntry>> {
            let layers: Vec<usize> = blocks.keys().copied().collect();
            let trace = TraceDataset::read_dir_with(&resolve(root, bundle::TRACES_DIR)?, Some(&layers))?;
            blocks
                .iter()
                .map(|(&l, c)| {
                    let block = load_block(root, l, c)?;
                    LipschitzEntry::compute(&block, l, &trace, cert.lipschitz[l].k_mlp_external, &cert.spectral)
                })
                .collect()
        })();
        match recomputed {
            Ok(entries) => {
                for r in entries {
                    let s = &cert.lipschitz[r.layer];
                    let l = r.layer;
                    d.exact(&format!("lipschitz[{l}].t_max"), s.t_max, r.t_max);
                    d.exact(&format!("lipschitz[{l}].mlp_formula"), &s.mlp_formula, &r.mlp_formula);
                    d.exact(&format!("lipschitz[{l}].activation_lip"), s.activation_lip, r.activation_lip);
                    d.approx(&format!("lipschitz[{l}].k_attn"), s.k_attn, r.k_attn);
                    d.approx(&format!("lipschitz[{l}].k_mlp_analytic"), s.k_mlp_analytic, r.k_mlp_analytic);
                    match (&s.gate_bounds, &r.gate_bounds) {
                        (Some(a), Some(b)) => {
                            d.approx(&format!("lipschitz[{l}].gate_bounds.g_max"), a.g_max, b.g_max);
                            d.approx(&format!("lipschitz[{l}].gate_bounds.s_max"), a.s_max, b.s_max);
                        }
                        (a, b) => d.exact(&format!("lipschitz[{l}].gate_bounds"), a.is_some(), b.is_some()),
                    }
                }
            }
            Err(e) => d.error(e),
        }
    }
    report.record("lipschitz", d.problems);

    // The instantiated global bound.
    let mut d = Diff::new(tol);
    if count_ok {
        let g = &cert.global_bound;
        for i in 0..n {
            let eps = blocks.get(&i).map_or(0.0, |c| c.metrics.epsilon_max);
            d.exact(&format!("epsilons[{i}]"), g.epsilons[i], eps);
            d.exact(&format!("lipschitz[{i}]"), g.lipschitz[i], cert.lipschitz[i].hybrid_upper_bound);
        }
        match BoundInputs::new(g.epsilons.clone(), g.lipschitz.clone()) {
            Ok(inputs) => {
                d.exact("bound", g.bound, global_bound(&inputs));
                d.exact("sum_epsilons", g.sum_epsilons, sum_epsilons(&inputs));
            }
            Err(e) => d.error(e),
        }
    } else {
        d.error("layer counts are inconsistent");
    }
    report.record("global_bound", d.problems);

    if !preconditions {
        report.skip("replay", "reference, layer-count, artifact, metadata or version check failed");
        return;
    }
    let replay = (|| -> Result<_> {
        let model = Model::load(&resolve(root, bundle::MODEL_DIR)?)?;
        let surrogates = blocks
            .iter()
            .map(|(&l, c)| Ok((l, load_block(root, l, c)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let prompts = prompts.as_ref().map_err(|e| Error::Input(e.to_string()))?;
        stitch_replay(&model, &surrogates, prompts)
    })();
    let mut d = Diff::new(tol);
    match replay {
        Ok(r) => {
            let s = &cert.replay;
            d.exact("stitched_layers", &s.stitched_layers, &r.stitched_layers);
            for (i, (a, b)) in s.per_layer_mae.iter().zip(&r.per_layer_mae).enumerate() {
                d.approx(&format!("per_layer_mae[{i}]"), *a, *b);
            }
            let stored_max = s.per_layer_mae.iter().copied().fold(0.0f64, f64::max);
            d.exact("worst_layer_mae = max(per_layer_mae)", s.worst_layer_mae, stored_max);
            d.approx("max_residual", s.max_residual, r.max_residual);
            d.approx("ppl_baseline", s.ppl_baseline, r.ppl_baseline);
            d.approx("ppl_stitched", s.ppl_stitched, r.ppl_stitched);
            d.approx("delta_ppl", s.delta_ppl, r.delta_ppl);
        }
        Err(e) => d.error(e),
    }
    report.record("replay", d.problems);
}

/// Surrogate of `layer`, read with the entry digests of its certificate.
fn load_block(root: &Path, layer: usize, cert: &BlockCertificate) -> Result<BlockIR> {
    ir::read_archive_verified(&resolve(root, &bundle::block_weights(layer))?, &cert.weight_entries)
}

/// Artifact paths every edit certificate must reference.
pub fn required_edit_artifacts(layer: usize) -> Vec<String> {
    vec![
        bundle::model_config(),
        bundle::model_weights(),
        bundle::trace_prompts(),
        bundle::trace_layer(layer),
    ]
}

pub fn verify_edit_file(cert_path: &Path, root: &Path, tol: &Tolerances) -> VerifyReport {
    let mut report = VerifyReport::new("edit", &cert_path.display().to_string());
    match read_document::<EditCertificate>(cert_path) {
        Ok((cert, digest)) => {
            report.certificate_digest = Some(digest);
            edit_checks(&mut report, &cert, root, tol);
        }
        Err(e) => {
            report.record("certificate", vec![e.to_string()]);
            check_bundle(&mut report, root);
        }
    }
    report.finish()
}

pub fn verify_edit(cert: &EditCertificate, root: &Path, tol: &Tolerances) -> VerifyReport {
    let mut report = VerifyReport::new("edit", &format!("edit {}", cert.patch));
    report.certificate_digest = crate::cert::document_digest(cert).ok();
    edit_checks(&mut report, cert, root, tol);
    report.finish()
}

fn check_accuracy_range(d: &mut Diff, which: &str, a: &Accuracy) {
    for (name, v) in [("answer_acc", a.answer_acc), ("refuse_acc", a.refuse_acc)] {
        if !(0.0..=1.0).contains(&v) {
            d.error(format!("{which}.{name} = {v} outside [0, 1]"));
        }
    }
}

fn edit_checks(report: &mut VerifyReport, cert: &EditCertificate, root: &Path, tol: &Tolerances) {
    let layer = cert.patch.block;
    let version_ok = check_version(report, &cert.schema_version, EDIT_SCHEMA, &cert.interpreter_version);
    check_bundle(report, root);

    // The evaluation dataset and marker lists, pinned by digest.
    let mut p = Vec::new();
    let corpus = resolve(root, &cert.corpus.path).and_then(|path| Corpus::read(&path));
    match &corpus {
        Ok(c) => {
            if c.name != cert.corpus.name {
                p.push(format!("corpus name `{}`, certificate names `{}`", c.name, cert.corpus.name));
            }
            match c.digest() {
                Ok(found) if found == cert.corpus.digest => {}
                Ok(found) => p.push(format!("corpus digest {found} differs from recorded {}", cert.corpus.digest)),
                Err(e) => p.push(e.to_string()),
            }
        }
        Err(e) => p.push(format!("{}: {e}", cert.corpus.path)),
    }
    let markers = resolve(root, &cert.markers_path).and_then(|path| MarkerSet::read(&path));
    match &markers {
        Ok(m) => match m.digest() {
            Ok(found) if found == cert.markers_digest => {}
            Ok(found) => p.push(format!("marker digest {found} differs from recorded {}", cert.markers_digest)),
            Err(e) => p.push(e.to_string()),
        },
        Err(e) => p.push(format!("{}: {e}", cert.markers_path)),
    }
    let dataset_ok = report.record("dataset", p);

    // Referenced certificates: raw file digest (certificates are stored
    // canonically, so this equals the document digest).
    let mut p = Vec::new();
    let mut model_cert = None;
    for (rel, want) in &cert.references {
        match resolve(root, rel).and_then(digest_file) {
            Ok(found) if &found == want => {
                if rel == bundle::MODEL_CERTIFICATE {
                    match resolve(root, rel).and_then(|path| read_document::<ModelCertificate>(&path)) {
                        Ok((c, _)) => model_cert = Some(c),
                        Err(e) => p.push(format!("{rel}: {e}")),
                    }
                }
            }
            Ok(found) => p.push(format!("{rel}: digest {found} differs from recorded {want}")),
            Err(e) => p.push(format!("{rel}: {e}")),
        }
    }
    if cert.deviation_bound.is_some() != cert.references.contains_key(bundle::MODEL_CERTIFICATE) {
        p.push("deviation_bound must be present exactly when a model certificate is referenced".into());
    }
    let refs_ok = report.record("references", p);

    let digests_ok = report.record(
        "artifact_digests",
        file_digest_problems(root, &cert.artifacts, &required_edit_artifacts(layer)),
    );

    let mut d = Diff::new(tol);
    let config = load_config(root);
    match &config {
        Ok(c) => {
            check_model_ref(&mut d, &cert.model, c);
            d.exact("vocabulary", cert.vocabulary.clone(), Vocabulary::toy(c.vocab_size).describe());
            if let Err(e) = cert.patch.validate(c.n_layers) {
                d.error(e);
            }
            if let Some(m) = &model_cert {
                d.exact("model certificate model", &m.model, &cert.model);
            }
        }
        Err(e) => d.error(e),
    }
    match load_prompts(root) {
        Ok(p) => check_prompt_ref(&mut d, &cert.prompt_set, &p),
        Err(e) => d.error(e),
    }
    check_accuracy_range(&mut d, "before", &cert.before);
    check_accuracy_range(&mut d, "after", &cert.after);
    let meta_ok = report.record("metadata", d.problems);

    if !(version_ok && dataset_ok && refs_ok && digests_ok && meta_ok) {
        report.skip("accuracies", "dataset, reference, artifact, metadata or version check failed");
        report.skip("edit_errors", "dataset, reference, artifact, metadata or version check failed");
        return;
    }
    let (corpus, markers) = match (corpus, markers) {
        (Ok(c), Ok(m)) => (c, m),
        _ => unreachable!("dataset check passed"),
    };
    let models = (|| -> Result<(Model, Model)> {
        let base = Model::load(&resolve(root, bundle::MODEL_DIR)?)?;
        let patched = apply_edit(&base, &cert.patch)?;
        Ok((base, patched))
    })();
    let (base, patched) = match models {
        Ok(m) => m,
        Err(e) => {
            report.record("accuracies", vec![e.to_string()]);
            report.skip("edit_errors", "models could not be loaded");
            return;
        }
    };

    // Completions are deterministic and classification is discrete: exact.
    let mut d = Diff::new(tol);
    let vocab = Vocabulary::toy(base.config.vocab_size);
    match eval_refusal_corpus(&base, &patched, &corpus, &markers, &vocab, cert.max_new) {
        Ok(eval) => {
            d.exact("before", &cert.before, &eval.base.accuracy);
            d.exact("after", &cert.after, &eval.patched.accuracy);
            match crate::cert::completions_digest(&eval.patched.completions) {
                Ok(found) => d.exact("completions_digest", cert.completions_digest.as_str(), found.as_str()),
                Err(e) => d.error(e),
            }
        }
        Err(e) => d.error(e),
    }
    report.record("accuracies", d.problems);

    let mut d = Diff::new(tol);
    let errors = (|| -> Result<(f64, f64)> {
        let trace = TraceDataset::read_dir_with(&resolve(root, bundle::TRACES_DIR)?, Some(&[layer]))?;
        let eps = edit_local_error(&base, &cert.patch, &trace)?;
        let dev = edit_downstream_deviation(&base, &patched, &trace.prompts)?;
        Ok((eps, dev))
    })();
    match errors {
        Ok((eps, dev)) => {
            d.approx("epsilon_edit", cert.epsilon_edit, eps);
            d.approx("downstream_deviation", cert.downstream_deviation, dev);
            match (cert.amplification, cert.epsilon_edit > 0.0) {
                (Some(a), true) => d.approx("amplification", a, cert.downstream_deviation / cert.epsilon_edit),
                (None, false) => {}
                (a, _) => d.error(format!("amplification {a:?} inconsistent with epsilon_edit {}", cert.epsilon_edit)),
            }
            if let (Some(stored), Some(m)) = (cert.deviation_bound, &model_cert) {
                let lips: Vec<f64> = m.lipschitz.iter().map(|e| e.hybrid_upper_bound).collect();
                match edit_deviation_bound(cert.epsilon_edit, layer, &lips) {
                    Ok(b) => d.exact("deviation_bound", stored, b),
                    Err(e) => d.error(e),
                }
            }
        }
        Err(e) => d.error(e),
    }
    report.record("edit_errors", d.problems);
}
