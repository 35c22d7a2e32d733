//! End-to-end steps over an artifact directory: build or load a model,
//! record traces, extract and certify blocks, aggregate the model
//! certificate, certify edits, and write the run manifest.
//!
//! Every step reads its inputs back from disk, so a certificate always
//! describes the bytes it references.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::archive;
use crate::bundle::{self, digest_paths, resolve};
use crate::cert::{
    aggregate_model_certificate, edit_deviation_bound, emit_block_certificate, emit_edit_certificate, read_document,
    required_block_artifacts, write_document, BlockArtifacts, BlockCertMeta, BlockCertRef, BlockCertificate,
    CorpusRef, EditCertMeta, EditCertificate, LipschitzEntry, MetricsDocument, ModelCertMeta, ModelCertificate,
    ModelRef, PromptRef, Thresholds, METRICS_SCHEMA,
};
use crate::compose::{stitch_replay, SpectralOpts};
use crate::config::{Flavor, ModelConfig};
use crate::digest::digest_file;
use crate::edit::{
    apply_edit, edit_downstream_deviation, edit_local_error, eval_refusal_corpus, Corpus, MarkerSet, PatchSpec,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::ir::{self, BlockIR};
use crate::metrics::{compute_block_metrics, extract_block, CertPolicy, DEFAULT_TAU_ACT, DEFAULT_TAU_LOSS};
use crate::model::{init_model, Model};
use crate::prompts::PromptSet;
use crate::trace::TraceDataset;
use crate::verify::{required_edit_artifacts, required_model_artifacts};

/// Independent sub-seed for one consumer of the run seed (model init,
/// prompts, corpus, power iteration), so adding a consumer never shifts the
/// others.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("SHA-256 output has 32 bytes"))
}

/// Parses a layer list: `all`, or comma-separated indices and inclusive
/// ranges such as `0,2-3`. The result is sorted and deduplicated.
pub fn parse_layers(spec: &str, n_layers: usize) -> Result<Vec<usize>> {
    let spec = spec.trim();
    if spec == "all" {
        return Ok((0..n_layers).collect());
    }
    let bad = || Error::Input(format!("layer spec `{spec}` is not `all` or a list like `0,2-3`"));
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        let (lo, hi): (usize, usize) = match part.split_once('-') {
            Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
            None => {
                let k = part.parse().map_err(|_| bad())?;
                (k, k)
            }
        };
        if lo > hi {
            return Err(bad());
        }
        if hi >= n_layers {
            return Err(Error::Input(format!("layer {hi} outside a {n_layers}-layer model")));
        }
        out.extend(lo..=hi);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Prompts used when none are supplied: 8 seeded prompts of 16–32 tokens
/// (capped at the model's context length).
pub fn default_prompts(config: &ModelConfig, seed: u64) -> Result<PromptSet> {
    let max_len = config.max_seq.min(32);
    PromptSet::random(
        "toy-prompts",
        8,
        16.min(max_len),
        max_len,
        config.vocab_size,
        derive_seed(seed, "prompts"),
    )
}

/// Writes the model to `<root>/model`.
pub fn write_model(root: &Path, model: &Model) -> Result<()> {
    model.save(&root.join(bundle::MODEL_DIR))
}

pub fn load_model(root: &Path) -> Result<Model> {
    Model::load(&root.join(bundle::MODEL_DIR))
}

/// Records traces of `layers` (all when `None`) to `<root>/traces`.
pub fn record_traces(root: &Path, model: &Model, prompts: &PromptSet, layers: Option<&[usize]>) -> Result<TraceDataset> {
    let trace = TraceDataset::record(model, prompts, layers)?;
    trace.check_self_consistency(model)?;
    trace.write_dir(&root.join(bundle::TRACES_DIR))?;
    Ok(trace)
}

/// Extracts the surrogate of `layer` from the on-disk model and trace and
/// writes `blocks/<layer>/weights.zip`.
pub fn extract_to_disk(root: &Path, layer: usize) -> Result<BlockIR> {
    let model = load_model(root)?;
    let trace = TraceDataset::read_dir_with(&root.join(bundle::TRACES_DIR), Some(&[layer]))?;
    let block = extract_block(&model, layer, &trace)?;
    let path = resolve(root, &bundle::block_weights(layer))?;
    std::fs::create_dir_all(path.parent().expect("block path has a parent"))
        .map_err(|e| Error::io(&path, e))?;
    ir::write_archive(&block, &path)?;
    Ok(block)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockCertOptions {
    pub tau_act: f64,
    pub tau_loss: f64,
    pub policy: CertPolicy,
}

impl Default for BlockCertOptions {
    fn default() -> Self {
        BlockCertOptions {
            tau_act: DEFAULT_TAU_ACT,
            tau_loss: DEFAULT_TAU_LOSS,
            policy: CertPolicy::default(),
        }
    }
}

/// Extracts `layer`, computes its metrics, writes `weights.zip`,
/// `metrics.json` and `certificate.json` under `blocks/<layer>`, and returns
/// the certificate with its relative path and digest.
pub fn certify_block(root: &Path, layer: usize, opts: &BlockCertOptions) -> Result<(BlockCertRef, BlockCertificate)> {
    opts.policy.validate()?;
    let model = load_model(root)?;
    let trace_rel = bundle::trace_layer(layer);
    let trace = TraceDataset::read_dir_with(&root.join(bundle::TRACES_DIR), Some(&[layer]))?;
    let block = extract_to_disk(root, layer)?;
    let block_path = resolve(root, &bundle::block_weights(layer))?;
    let weight_entries = archive::read_tensor_archive(&block_path)?.digests;
    let trace_entries = archive::read_tensor_archive(&resolve(root, &trace_rel)?)?.digests;

    let metrics = compute_block_metrics(&model, &block, layer, &trace, opts.tau_act, opts.tau_loss)?;
    let thresholds = Thresholds {
        tau_act: opts.tau_act,
        tau_loss: opts.tau_loss,
    };
    let prompt_set = PromptRef::of(&trace.prompts)?;
    let doc = MetricsDocument {
        schema_version: METRICS_SCHEMA.to_string(),
        layer,
        metrics: metrics.clone(),
        thresholds,
        policy: opts.policy,
        prompt_set: prompt_set.clone(),
        trace_digest: digest_file(resolve(root, &trace_rel)?)?,
    };
    write_document(&resolve(root, &bundle::block_metrics(layer))?, &doc)?;

    let files = digest_paths(root, &required_block_artifacts(layer))?;
    let cert = emit_block_certificate(
        &metrics,
        &opts.policy,
        BlockArtifacts {
            files,
            weight_entries,
            trace_entries,
        },
        BlockCertMeta {
            model: ModelRef::of(&model.config)?,
            block_index: layer,
            prompt_set,
            loss_pooling: model.config.loss_pooling,
        },
    )?;
    let rel = bundle::block_certificate(layer);
    let digest = write_document(&resolve(root, &rel)?, &cert)?;
    Ok((BlockCertRef { layer, path: rel, digest }, cert))
}

/// Block certificates present under `blocks/`, by layer.
pub fn find_block_certificates(root: &Path, n_layers: usize) -> Result<Vec<(BlockCertRef, BlockCertificate)>> {
    let mut out = Vec::new();
    for layer in 0..n_layers {
        let rel = bundle::block_certificate(layer);
        let path = resolve(root, &rel)?;
        if path.exists() {
            let (cert, digest) = read_document::<BlockCertificate>(&path)?;
            out.push((BlockCertRef { layer, path: rel, digest }, cert));
        }
    }
    Ok(out)
}

/// Stitches every certified block into the model, computes Lipschitz entries
/// for all layers (externally supplied `K_MLP` values take precedence in the
/// hybrid bound) and writes `model_certificate.json`.
pub fn certify_model(
    root: &Path,
    spectral: &SpectralOpts,
    k_mlp_external: &BTreeMap<usize, f64>,
) -> Result<(PathBuf, ModelCertificate, String)> {
    let model = load_model(root)?;
    let n = model.n_layers();
    if let Some(&l) = k_mlp_external.keys().find(|&&l| l >= n) {
        return Err(Error::Input(format!("external K_MLP for layer {l} outside a {n}-layer model")));
    }
    let block_certs = find_block_certificates(root, n)?;
    let mut surrogates = BTreeMap::new();
    for (r, c) in &block_certs {
        let path = resolve(root, &bundle::block_weights(r.layer))?;
        surrogates.insert(r.layer, ir::read_archive_verified(&path, &c.weight_entries)?);
    }
    let trace = TraceDataset::read_dir(&root.join(bundle::TRACES_DIR))?;
    let replay = stitch_replay(&model, &surrogates, &trace.prompts)?;
    let lipschitz = (0..n)
        .map(|l| {
            let block = match surrogates.get(&l) {
                Some(b) => b.clone(),
                None => extract_block(&model, l, &trace)?,
            };
            LipschitzEntry::compute(&block, l, &trace, k_mlp_external.get(&l).copied(), spectral)
        })
        .collect::<Result<Vec<_>>>()?;
    let cert = aggregate_model_certificate(
        &block_certs,
        replay,
        lipschitz,
        ModelCertMeta {
            model: ModelRef::of(&model.config)?,
            n_layers: n,
            prompt_set: PromptRef::of(&trace.prompts)?,
            loss_pooling: model.config.loss_pooling,
            spectral: *spectral,
            artifacts: digest_paths(root, &required_model_artifacts())?,
        },
    )?;
    let path = root.join(bundle::MODEL_CERTIFICATE);
    let digest = write_document(&path, &cert)?;
    Ok((path, cert, digest))
}

/// Writes the edit corpus and marker files to their bundle locations.
pub fn write_edit_inputs(root: &Path, corpus: &Corpus, markers: &MarkerSet) -> Result<()> {
    let dir = root.join(bundle::EDITS_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    corpus.write(&resolve(root, bundle::CORPUS_FILE)?)?;
    markers.write(&resolve(root, bundle::MARKERS_FILE)?)
}

/// Default number of generated tokens per corpus prompt.
pub const DEFAULT_MAX_NEW: usize = 8;

/// Applies `patch`, evaluates both models on the bundle's corpus, measures
/// the local and downstream edit errors, and writes the edit certificate.
/// When a model certificate exists it is referenced and its hybrid bounds
/// instantiate the deviation bound.
pub fn certify_edit(root: &Path, patch: &PatchSpec, max_new: usize) -> Result<(PathBuf, EditCertificate)> {
    let base = load_model(root)?;
    patch.validate(base.n_layers())?;
    let patched = apply_edit(&base, patch)?;
    let corpus = Corpus::read(&resolve(root, bundle::CORPUS_FILE)?)?;
    let markers = MarkerSet::read(&resolve(root, bundle::MARKERS_FILE)?)?;
    let vocab = Vocabulary::toy(base.config.vocab_size);
    let eval = eval_refusal_corpus(&base, &patched, &corpus, &markers, &vocab, max_new)?;
    let trace = TraceDataset::read_dir_with(&root.join(bundle::TRACES_DIR), Some(&[patch.block]))?;
    let epsilon_edit = edit_local_error(&base, patch, &trace)?;
    let deviation = edit_downstream_deviation(&base, &patched, &trace.prompts)?;

    let mut references = BTreeMap::new();
    let mut deviation_bound = None;
    let model_cert_path = root.join(bundle::MODEL_CERTIFICATE);
    if model_cert_path.exists() {
        let (m, digest) = read_document::<ModelCertificate>(&model_cert_path)?;
        let lips: Vec<f64> = m.lipschitz.iter().map(|e| e.hybrid_upper_bound).collect();
        deviation_bound = Some(edit_deviation_bound(epsilon_edit, patch.block, &lips)?);
        references.insert(bundle::MODEL_CERTIFICATE.to_string(), digest);
    }
    let cert = emit_edit_certificate(
        patch,
        &eval,
        epsilon_edit,
        deviation,
        deviation_bound,
        references,
        EditCertMeta {
            model: ModelRef::of(&base.config)?,
            corpus: CorpusRef {
                name: corpus.name.clone(),
                digest: corpus.digest()?,
                path: bundle::CORPUS_FILE.to_string(),
            },
            markers_digest: markers.digest()?,
            markers_path: bundle::MARKERS_FILE.to_string(),
            vocabulary: vocab.describe(),
            max_new,
            prompt_set: PromptRef::of(&trace.prompts)?,
            artifacts: digest_paths(root, &required_edit_artifacts(patch.block))?,
        },
    )?;
    let path = resolve(root, &bundle::edit_certificate(patch.alpha))?;
    write_document(&path, &cert)?;
    Ok((path, cert))
}

/// The edit scales certified by the demo.
pub const DEMO_ALPHAS: [f64; 4] = [1.0, 0.5, 0.33, 0.0];

#[derive(Debug, Clone, PartialEq)]
pub struct DemoOptions {
    pub seed: u64,
    pub config: ModelConfig,
    /// Prompts to trace; seeded defaults when `None`.
    pub prompts: Option<PromptSet>,
    pub block: BlockCertOptions,
    /// Block patched by the edit sweep.
    pub edit_block: usize,
    pub alphas: Vec<f64>,
    pub max_new: usize,
}

impl DemoOptions {
    /// Toy model of `flavor`, every layer certified, α sweep on the
    /// second-to-last block.
    pub fn toy(flavor: Flavor, seed: u64) -> Self {
        let config = ModelConfig::toy(flavor, derive_seed(seed, "model"));
        DemoOptions {
            seed,
            edit_block: config.n_layers.saturating_sub(2),
            config,
            prompts: None,
            block: BlockCertOptions::default(),
            alphas: DEMO_ALPHAS.to_vec(),
            max_new: DEFAULT_MAX_NEW,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoOutcome {
    pub block_certificates: Vec<PathBuf>,
    pub model_certificate: PathBuf,
    pub edit_certificates: Vec<PathBuf>,
    pub all_certified: bool,
}

/// Runs the whole chain into `root` (which should be empty or absent) and
/// finishes with the run manifest.
pub fn run_demo(root: &Path, opts: &DemoOptions) -> Result<DemoOutcome> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let model = init_model(&opts.config)?;
    write_model(root, &model)?;
    let prompts = match &opts.prompts {
        Some(p) => p.clone(),
        None => default_prompts(&opts.config, opts.seed)?,
    };
    record_traces(root, &model, &prompts, None)?;

    let mut block_certificates = Vec::new();
    let mut all_certified = true;
    for layer in 0..model.n_layers() {
        let (r, c) = certify_block(root, layer, &opts.block)?;
        all_certified &= c.certified;
        block_certificates.push(root.join(&r.path));
    }
    let spectral = SpectralOpts {
        seed: derive_seed(opts.seed, "spectral"),
        ..SpectralOpts::default()
    };
    let (model_certificate, _, _) = certify_model(root, &spectral, &BTreeMap::new())?;

    let vocab = Vocabulary::toy(opts.config.vocab_size);
    let corpus = Corpus::toy(&vocab, 6, derive_seed(opts.seed, "corpus"))?;
    write_edit_inputs(root, &corpus, &MarkerSet::examples())?;
    let mut edit_certificates = Vec::new();
    for &alpha in &opts.alphas {
        let patch = PatchSpec::mlp(opts.edit_block, alpha)?;
        edit_certificates.push(certify_edit(root, &patch, opts.max_new)?.0);
    }
    bundle::write_run_manifest(root)?;
    Ok(DemoOutcome {
        block_certificates,
        model_certificate,
        edit_certificates,
        all_certified,
    })
}

/// SHA-256 over every file's relative path and content digest: equal iff the
/// two trees are byte-identical.
pub fn tree_digest(root: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut files = bundle::list_files(root)?;
    let manifest = root.join(bundle::RUN_MANIFEST);
    if manifest.exists() {
        files.push(bundle::RUN_MANIFEST.to_string());
        files.sort();
    }
    for rel in files {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(digest_file(resolve(root, &rel)?)?.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}
