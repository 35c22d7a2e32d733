//! Command-line front end. Exit codes: 0 success, 1 pipeline failure or
//! failed verification (with a JSON error record on stderr), 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::bundle;
use crate::canonical::decode;
use crate::compose::{global_bound, stitch_replay, sum_epsilons, BoundInputs, SpectralOpts};
use crate::config::{Flavor, ModelConfig};
use crate::edit::{Corpus, MarkerSet, PatchSpec};
use crate::error::{Error, Result};
use crate::ir;
use crate::metrics::CertPolicy;
use crate::model::{init_model, Model};
use crate::pipeline::{self, BlockCertOptions, DemoOptions};
use crate::prompts::PromptSet;
use crate::verify::{self, Tolerances, VerifyReport};

#[derive(Debug, Parser)]
#[command(name = "residcert", version, about = "Residual-block extraction, certification and verification")]
struct Cli {
    /// Output format for results written to stdout.
    #[arg(long, value_enum, default_value_t = Format::Text, global = true)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FlavorArg {
    Gpt2,
    Llama,
}

impl From<FlavorArg> for Flavor {
    fn from(f: FlavorArg) -> Self {
        match f {
            FlavorArg::Gpt2 => Flavor::Gpt2,
            FlavorArg::Llama => Flavor::Llama,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a seeded toy model and run the full chain into --out.
    Demo {
        #[command(flatten)]
        source: ModelSource,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, default_value = "demo-out")]
        out: PathBuf,
    },
    /// Record traces and write block IR archives for the selected layers.
    Extract {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "all")]
        layers: String,
    },
    /// Extract, measure and certify the selected blocks of an artifact directory.
    CertifyBlock {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "all")]
        layers: String,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Aggregate block certificates, stitched replay and Lipschitz bounds.
    CertifyModel {
        #[arg(long)]
        out: PathBuf,
        /// Seed of the power-iteration start vector.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON object mapping layer index to an externally certified K_MLP.
        #[arg(long)]
        k_mlp: Option<PathBuf>,
    },
    /// Re-verify a certificate against its artifacts.
    Verify {
        #[arg(value_enum)]
        kind: VerifyKind,
        certificate: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value_t = 1e-6)]
        rel_tol: f64,
        #[arg(long, default_value_t = 1e-9)]
        abs_tol: f64,
    },
    /// Replace layers with their block archives and compare against the baseline.
    Stitch {
        /// Artifact directory holding `model/` and `blocks/<k>/weights.zip`.
        #[arg(long)]
        blocks: PathBuf,
        #[arg(long, default_value = "all")]
        layers: String,
        /// Prompt file; defaults to the traced prompts.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Evaluate the global composition bound from JSON lists of ε and L.
    Bound {
        #[arg(long)]
        epsilons: PathBuf,
        #[arg(long)]
        lipschitz: PathBuf,
    },
    /// Apply an MLP-scaling patch, evaluate the corpus and emit an edit certificate.
    Edit {
        /// `block=K,mlp,alpha=A`.
        #[arg(long)]
        patch: PatchSpec,
        #[arg(long)]
        artifacts: PathBuf,
        /// Corpus file; copied into the bundle when given.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Marker file; copied into the bundle when given.
        #[arg(long)]
        markers: Option<PathBuf>,
        #[arg(long, default_value_t = pipeline::DEFAULT_MAX_NEW)]
        max_new: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VerifyKind {
    Block,
    Model,
    Edit,
}

#[derive(Debug, Args)]
struct ModelSource {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model configuration file; a toy configuration of --flavor otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FlavorArg::Gpt2)]
    flavor: FlavorArg,
    /// Prompt file; seeded toy prompts otherwise.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

impl ModelSource {
    fn config(&self) -> Result<ModelConfig> {
        match &self.config {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                let c: ModelConfig = decode(&bytes)?;
                c.validate()?;
                Ok(c)
            }
            None => Ok(ModelConfig::toy(self.flavor.into(), pipeline::derive_seed(self.seed, "model"))),
        }
    }

    fn prompts(&self, config: &ModelConfig) -> Result<PromptSet> {
        match &self.prompts {
            Some(path) => PromptSet::read(path),
            None => pipeline::default_prompts(config, self.seed),
        }
    }
}

#[derive(Debug, Args)]
struct PolicyArgs {
    #[arg(long, default_value_t = crate::metrics::DEFAULT_TAU_ACT)]
    tau_act: f64,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_TAU_LOSS)]
    tau_loss: f64,
    #[arg(long, default_value_t = CertPolicy::default().alpha_act)]
    alpha_act: f64,
    #[arg(long, default_value_t = CertPolicy::default().alpha_loss)]
    alpha_loss: f64,
}

impl PolicyArgs {
    fn options(&self) -> Result<BlockCertOptions> {
        Ok(BlockCertOptions {
            tau_act: self.tau_act,
            tau_loss: self.tau_loss,
            policy: CertPolicy::new(self.alpha_act, self.alpha_loss)?,
        })
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            let record = json!({
                "error": { "code": e.code(), "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{record}");
            1
        }
    }
}

/// Prints a JSON document or its text rendering.
fn emit<T: Serialize>(format: Format, doc: &T, text: impl FnOnce() -> String) -> Result<()> {
    match format {
        Format::Json => println!("{}", String::from_utf8(crate::canonical::canonical_encode(doc)?).expect("JSON is UTF-8")),
        Format::Text => print!("{}", text()),
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn execute(cli: &Cli) -> Result<i32> {
    let format = cli.format;
    match &cli.command {
        Command::Demo { source, policy, out } => {
            let config = source.config()?;
            let mut opts = DemoOptions::toy(config.flavor, source.seed);
            opts.edit_block = config.n_layers.saturating_sub(2);
            opts.config = config;
            opts.prompts = source.prompts.as_ref().map(|p| PromptSet::read(p)).transpose()?;
            opts.block = policy.options()?;
            let outcome = pipeline::run_demo(out, &opts)?;
            let doc = json!({
                "block_certificates": outcome.block_certificates.iter().map(|p| display(p)).collect::<Vec<_>>(),
                "model_certificate": display(&outcome.model_certificate),
                "edit_certificates": outcome.edit_certificates.iter().map(|p| display(p)).collect::<Vec<_>>(),
                "all_certified": outcome.all_certified,
                "manifest": display(&out.join(bundle::RUN_MANIFEST)),
            });
            emit(format, &doc, || {
                let mut s = String::new();
                for p in &outcome.block_certificates {
                    s += &format!("block certificate: {}\n", p.display());
                }
                s += &format!("model certificate: {}\n", outcome.model_certificate.display());
                for p in &outcome.edit_certificates {
                    s += &format!("edit certificate: {}\n", p.display());
                }
                s += &format!("all blocks certified: {}\n", outcome.all_certified);
                s
            })?;
            Ok(0)
        }
        Command::Extract { source, out, layers } => {
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let model = if out.join(bundle::model_config()).exists() {
                pipeline::load_model(out)?
            } else {
                let m = init_model(&source.config()?)?;
                pipeline::write_model(out, &m)?;
                m
            };
            let layers = pipeline::parse_layers(layers, model.n_layers())?;
            let prompts = source.prompts(&model.config)?;
            pipeline::record_traces(out, &model, &prompts, Some(&layers))?;
            let mut written = Vec::new();
            for &l in &layers {
                pipeline::extract_to_disk(out, l)?;
                written.push(bundle::block_weights(l));
            }
            bundle::write_run_manifest(out)?;
            emit(format, &json!({ "blocks": written }), || {
                written.iter().map(|w| format!("wrote {w}\n")).collect()
            })?;
            Ok(0)
        }
        Command::CertifyBlock { out, layers, policy } => {
            let opts = policy.options()?;
            let n = pipeline::load_model(out)?.n_layers();
            let mut rows = Vec::new();
            for l in pipeline::parse_layers(layers, n)? {
                let (r, c) = pipeline::certify_block(out, l, &opts)?;
                rows.push(json!({
                    "layer": l, "path": r.path, "digest": r.digest,
                    "certified": c.certified, "reasons": c.reasons,
                }));
            }
            bundle::write_run_manifest(out)?;
            emit(format, &rows, || {
                rows.iter()
                    .map(|r| format!("{}: certified={} digest={}\n", r["path"].as_str().unwrap_or(""), r["certified"], r["digest"].as_str().unwrap_or("")))
                    .collect()
            })?;
            Ok(0)
        }
        Command::CertifyModel { out, seed, k_mlp } => {
            let external: BTreeMap<usize, f64> = match k_mlp {
                Some(path) => {
                    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                    let raw: BTreeMap<String, f64> = decode(&bytes)?;
                    raw.into_iter()
                        .map(|(k, v)| {
                            k.parse::<usize>()
                                .map(|k| (k, v))
                                .map_err(|_| Error::Input(format!("K_MLP key `{k}` is not a layer index")))
                        })
                        .collect::<Result<_>>()?
                }
                None => BTreeMap::new(),
            };
            let spectral = SpectralOpts {
                seed: pipeline::derive_seed(*seed, "spectral"),
                ..SpectralOpts::default()
            };
            let (path, cert, digest) = pipeline::certify_model(out, &spectral, &external)?;
            bundle::write_run_manifest(out)?;
            let doc = json!({
                "path": display(&path), "digest": digest,
                "delta_ppl": cert.replay.delta_ppl, "global_bound": cert.global_bound.bound,
            });
            emit(format, &doc, || {
                format!(
                    "model certificate: {}\ndigest: {digest}\ndelta_ppl: {:e}\nglobal bound: {:e}\n",
                    path.display(),
                    cert.replay.delta_ppl,
                    cert.global_bound.bound
                )
            })?;
            Ok(0)
        }
        Command::Verify {
            kind,
            certificate,
            artifacts,
            rel_tol,
            abs_tol,
        } => {
            let tol = Tolerances::new(*rel_tol, *abs_tol)?;
            let report: VerifyReport = match kind {
                VerifyKind::Block => verify::verify_block_file(certificate, artifacts, &tol),
                VerifyKind::Model => verify::verify_model_file(certificate, artifacts, &tol),
                VerifyKind::Edit => verify::verify_edit_file(certificate, artifacts, &tol),
            };
            emit(format, &report, || report.to_string())?;
            Ok(if report.passed { 0 } else { 1 })
        }
        Command::Stitch { blocks, layers, prompts } => {
            let model = Model::load(&blocks.join(bundle::MODEL_DIR))?;
            let layers = pipeline::parse_layers(layers, model.n_layers())?;
            let prompts = match prompts {
                Some(p) => PromptSet::read(p)?,
                None => PromptSet::read(&blocks.join(bundle::trace_prompts()))?,
            };
            let surrogates = layers
                .iter()
                .map(|&l| Ok((l, ir::read_archive(&bundle::resolve(blocks, &bundle::block_weights(l))?)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let summary = stitch_replay(&model, &surrogates, &prompts)?;
            emit(format, &summary, || {
                let mut s = format!("stitched layers: {:?}\n", summary.stitched_layers);
                for (l, m) in summary.per_layer_mae.iter().enumerate() {
                    s += &format!("layer {l} MAE: {m:e}\n");
                }
                s += &format!(
                    "worst-layer MAE: {:e}\nmax residual: {:e}\nPPL baseline: {}\nPPL stitched: {}\ndelta PPL: {:e}\n",
                    summary.worst_layer_mae, summary.max_residual, summary.ppl_baseline, summary.ppl_stitched, summary.delta_ppl
                );
                s
            })?;
            Ok(0)
        }
        Command::Bound { epsilons, lipschitz } => {
            let read = |p: &PathBuf| -> Result<Vec<f64>> {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                decode(&bytes)
            };
            let inputs = BoundInputs::new(read(epsilons)?, read(lipschitz)?)?;
            let bound = global_bound(&inputs);
            let sum = sum_epsilons(&inputs);
            let doc = json!({ "bound": bound, "sum_epsilons": sum });
            emit(format, &doc, || format!("bound: {bound:e}\nsum of epsilons: {sum:e}\n"))?;
            Ok(0)
        }
        Command::Edit {
            patch,
            artifacts,
            corpus,
            markers,
            max_new,
        } => {
            if corpus.is_some() || markers.is_some() {
                let c = match corpus {
                    Some(p) => Corpus::read(p)?,
                    None => Corpus::read(&bundle::resolve(artifacts, bundle::CORPUS_FILE)?)?,
                };
                let m = match markers {
                    Some(p) => MarkerSet::read(p)?,
                    None => MarkerSet::read(&bundle::resolve(artifacts, bundle::MARKERS_FILE)?)?,
                };
                pipeline::write_edit_inputs(artifacts, &c, &m)?;
            }
            let (path, cert) = pipeline::certify_edit(artifacts, patch, *max_new)?;
            bundle::write_run_manifest(artifacts)?;
            let doc = json!({
                "path": display(&path),
                "patch": patch.to_string(),
                "before": cert.before,
                "after": cert.after,
                "epsilon_edit": cert.epsilon_edit,
                "downstream_deviation": cert.downstream_deviation,
            });
            emit(format, &doc, || {
                format!(
                    "edit certificate: {}\nanswer acc: {} -> {}\nrefuse acc: {} -> {}\nepsilon_edit: {:e}\ndownstream deviation: {:e}\n",
                    path.display(),
                    cert.before.answer_acc,
                    cert.after.answer_acc,
                    cert.before.refuse_acc,
                    cert.after.refuse_acc,
                    cert.epsilon_edit,
                    cert.downstream_deviation
                )
            })?;
            Ok(0)
        }
    }
}
