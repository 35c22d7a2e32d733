//! Deterministic decoder-only reference transformer (GPT-2 and Llama flavors).
//!
//! This is the baseline `F = B_{L-1} ∘ ⋯ ∘ B_0 ∘ E`. Its attention path is
//! written independently of the block interpreter: queries are pre-scaled and
//! causality is enforced by iterating only over visible keys, while the
//! interpreter scales scores and applies the stored additive mask.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive;
use crate::canonical::{canonical_encode, decode};
use crate::config::{Flavor, ModelConfig, NormKind};
use crate::digest::{sha256_hex, ArtifactDigest};
use crate::error::{Error, Result};
use crate::ir::{NormParams, ReplayBlock};
use crate::npy;
use crate::prompts::PromptSet;
use crate::tensor::{self, Tensor};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.zip";

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: NormParams,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub b_q: Option<Tensor>,
    pub b_k: Option<Tensor>,
    pub b_v: Option<Tensor>,
    pub b_o: Option<Tensor>,
    pub mlp_norm: NormParams,
    pub w_1: Tensor,
    pub w_2: Tensor,
    pub w_gate: Option<Tensor>,
    pub b_1: Option<Tensor>,
    pub b_2: Option<Tensor>,
    /// Multiplier on the MLP residual contribution; 1.0 leaves the block
    /// untouched.
    pub mlp_scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Option<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: NormParams,
    pub lm_head: Tensor,
    pub rope_cos: Option<Tensor>,
    pub rope_sin: Option<Tensor>,
}

/// One layer's recorded inputs, outputs and discrete control record.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub x_in: Tensor,
    pub x_out: Tensor,
    pub mask: Tensor,
    pub position_ids: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub layers: Vec<LayerRecord>,
    /// `nll[t] = −log p(token[t+1] | tokens[..=t])`, length `T − 1`.
    pub nll: Vec<f32>,
}

/// A forward pass with every residual stream kept: `residuals[0]` is the
/// embedding, `residuals[ℓ+1]` the output of block ℓ.
#[derive(Debug, Clone)]
pub struct ForwardRun {
    pub logits: Tensor,
    pub residuals: Vec<Tensor>,
    pub nll: Vec<f32>,
}

/// The MLP contribution of a block, exposed for edit measurements.
#[derive(Debug, Clone)]
pub struct BlockParts {
    /// Residual after the attention sublayer.
    pub mid: Tensor,
    /// Unscaled MLP output added on top of `mid`.
    pub mlp: Tensor,
    pub out: Tensor,
}

fn norm_apply(kind: NormKind, p: &NormParams, eps: f32, x: &Tensor) -> Result<Tensor> {
    match kind {
        NormKind::Layer => {
            let b = p
                .bias
                .as_ref()
                .ok_or_else(|| Error::Config("layer norm without bias".into()))?;
            tensor::layer_norm(x, &p.gain, b, eps)
        }
        NormKind::Rms => tensor::rms_norm(x, &p.gain, eps),
    }
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = tensor::matmul(x, w)?;
    b.map_or(Ok(y.clone()), |b| tensor::add_row_bias(&y, b))
}

/// Builds a model with all weights drawn from a ChaCha8 stream seeded by
/// `config.init_seed`. Matrices are uniform in `±1/√fan_in`, embeddings in
/// `±1`, norm gains in `1 ± 0.1`, biases in `±0.02`.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let d = config.d_model;
    let kv = config.kv_width();
    let ff = config.d_ff;
    let flavor = config.flavor;
    let biases = flavor.has_biases();

    let mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        Tensor::random_uniform(vec![rows, cols], 1.0 / (rows as f32).sqrt(), rng)
    };
    let norm = |rng: &mut ChaCha8Rng| NormParams {
        gain: Tensor::random_uniform(vec![d], 0.1, rng).map(|v| 1.0 + v),
        bias: (flavor.norm() == NormKind::Layer).then(|| Tensor::random_uniform(vec![d], 0.02, rng)),
    };
    let bias = |rng: &mut ChaCha8Rng, n: usize| biases.then(|| Tensor::random_uniform(vec![n], 0.02, rng));

    let tok_emb = Tensor::random_uniform(vec![config.vocab_size, d], 1.0, &mut rng);
    let pos_emb = (flavor == Flavor::Gpt2)
        .then(|| Tensor::random_uniform(vec![config.max_seq, d], 1.0, &mut rng));
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let attn_norm = norm(&mut rng);
        let w_q = mat(&mut rng, d, d);
        let w_k = mat(&mut rng, d, kv);
        let w_v = mat(&mut rng, d, kv);
        let w_o = mat(&mut rng, d, d);
        let b_q = bias(&mut rng, d);
        let b_k = bias(&mut rng, kv);
        let b_v = bias(&mut rng, kv);
        let b_o = bias(&mut rng, d);
        let mlp_norm = norm(&mut rng);
        let w_1 = mat(&mut rng, d, ff);
        let w_gate = flavor.gated_mlp().then(|| mat(&mut rng, d, ff));
        let w_2 = mat(&mut rng, ff, d);
        let b_1 = bias(&mut rng, ff);
        let b_2 = bias(&mut rng, d);
        layers.push(LayerWeights {
            attn_norm,
            w_q,
            w_k,
            w_v,
            w_o,
            b_q,
            b_k,
            b_v,
            b_o,
            mlp_norm,
            w_1,
            w_2,
            w_gate,
            b_1,
            b_2,
            mlp_scale: 1.0,
        });
    }
    let final_norm = norm(&mut rng);
    let lm_head = mat(&mut rng, d, config.vocab_size);
    Model::assemble(config.clone(), tok_emb, pos_emb, layers, final_norm, lm_head)
}

impl Model {
    fn assemble(
        config: ModelConfig,
        tok_emb: Tensor,
        pos_emb: Option<Tensor>,
        layers: Vec<LayerWeights>,
        final_norm: NormParams,
        lm_head: Tensor,
    ) -> Result<Model> {
        let (rope_cos, rope_sin) = if config.flavor.uses_rope() {
            let (c, s) = tensor::rope_tables(config.max_seq, config.d_head(), config.rope_theta);
            (Some(c), Some(s))
        } else {
            (None, None)
        };
        Ok(Model {
            config,
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            lm_head,
            rope_cos,
            rope_sin,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Input("empty token sequence".into()));
        }
        if t > self.config.max_seq {
            return Err(Error::Range(format!(
                "prompt of {t} tokens exceeds max_seq {}",
                self.config.max_seq
            )));
        }
        let d = self.config.d_model;
        let mut x = Tensor::zeros(vec![t, d]);
        for (i, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= self.config.vocab_size {
                return Err(Error::Range(format!(
                    "token id {tok} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            let row = x.row_mut(i);
            row.copy_from_slice(self.tok_emb.row(tok));
            if let Some(pos) = &self.pos_emb {
                for (v, p) in row.iter_mut().zip(pos.row(i)) {
                    *v += *p;
                }
            }
        }
        Ok(x)
    }

    /// Position ids the baseline uses for a `t`-token prompt.
    pub fn positions(t: usize) -> Vec<usize> {
        (0..t).collect()
    }

    fn attention(&self, lw: &LayerWeights, h: &Tensor, positions: &[usize]) -> Result<Tensor> {
        let cfg = &self.config;
        let (t, d) = h.dims2()?;
        let dh = cfg.d_head();
        let group = cfg.n_heads / cfg.n_kv_heads;
        let kv_w = cfg.kv_width();
        let scale = 1.0 / (dh as f32).sqrt();

        let mut q = linear(h, &lw.w_q, lw.b_q.as_ref())?;
        let mut k = linear(h, &lw.w_k, lw.b_k.as_ref())?;
        let v = linear(h, &lw.w_v, lw.b_v.as_ref())?;
        if let (Some(cos), Some(sin)) = (&self.rope_cos, &self.rope_sin) {
            q = rope_all_heads(&q, cfg.n_heads, dh, cos, sin, positions)?;
            k = rope_all_heads(&k, cfg.n_kv_heads, dh, cos, sin, positions)?;
        }
        let qd = q.data();
        let kd = k.data();
        let vd = v.data();

        let mut out = vec![0.0f32; t * d];
        let mut weights = vec![0.0f64; t];
        let mut qs = vec![0.0f32; dh];
        for head in 0..cfg.n_heads {
            let g = head / group;
            for i in 0..t {
                for (slot, &qv) in qs.iter_mut().zip(&qd[i * d + head * dh..i * d + (head + 1) * dh]) {
                    *slot = qv * scale;
                }
                let mut max = f64::NEG_INFINITY;
                for (j, w) in weights.iter_mut().enumerate().take(i + 1) {
                    let kr = &kd[j * kv_w + g * dh..j * kv_w + (g + 1) * dh];
                    let s: f64 = qs.iter().zip(kr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    *w = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for w in weights.iter_mut().take(i + 1) {
                    *w = (*w - max).exp();
                    total += *w;
                }
                for c in 0..dh {
                    let mut acc = 0.0f64;
                    for (j, w) in weights.iter().enumerate().take(i + 1) {
                        acc += w * vd[j * kv_w + g * dh + c] as f64;
                    }
                    out[i * d + head * dh + c] = (acc / total) as f32;
                }
            }
        }
        let heads = Tensor::new(vec![t, d], out)?;
        linear(&heads, &lw.w_o, lw.b_o.as_ref())
    }

    fn mlp(&self, lw: &LayerWeights, h: &Tensor) -> Result<Tensor> {
        let act = self.config.activation;
        let up = linear(h, &lw.w_1, lw.b_1.as_ref())?;
        let hidden = match &lw.w_gate {
            Some(wg) => {
                let gate = tensor::matmul(h, wg)?;
                let mut hidden = up;
                for (u, g) in hidden.data_mut().iter_mut().zip(gate.data()) {
                    *u *= act.apply(*g);
                }
                hidden
            }
            None => up.map(|z| act.apply(z)),
        };
        linear(&hidden, &lw.w_2, lw.b_2.as_ref())
    }

    /// Runs block `layer` and returns its intermediate pieces.
    pub fn block_parts(&self, layer: usize, x: &Tensor, positions: &[usize]) -> Result<BlockParts> {
        let lw = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Range(format!("layer {layer} of {}", self.n_layers())))?;
        let kind = self.config.flavor.norm();
        let eps = self.config.norm_eps;
        let h = norm_apply(kind, &lw.attn_norm, eps, x)?;
        let attn = self.attention(lw, &h, positions)?;
        let mid = tensor::add(x, &attn)?;
        let h2 = norm_apply(kind, &lw.mlp_norm, eps, &mid)?;
        let mlp = self.mlp(lw, &h2)?;
        let contribution = if lw.mlp_scale == 1.0 {
            mlp.clone()
        } else {
            tensor::scale(&mlp, lw.mlp_scale)
        };
        let out = tensor::add(&mid, &contribution)?;
        Ok(BlockParts { mid, mlp, out })
    }

    /// The baseline block `B_layer`.
    pub fn block_forward(&self, layer: usize, x: &Tensor, positions: &[usize]) -> Result<Tensor> {
        Ok(self.block_parts(layer, x, positions)?.out)
    }

    /// Final norm followed by the unembedding.
    pub fn head(&self, x: &Tensor) -> Result<Tensor> {
        let h = norm_apply(self.config.flavor.norm(), &self.final_norm, self.config.norm_eps, x)?;
        tensor::matmul(&h, &self.lm_head)
    }

    /// Full forward pass with baseline blocks, recording every layer.
    pub fn forward_with_trace(&self, tokens: &[u32]) -> Result<ForwardTrace> {
        let t = tokens.len();
        let positions = Model::positions(t);
        let mut x = self.embed(tokens)?;
        let mut layers = Vec::with_capacity(self.n_layers());
        for layer in 0..self.n_layers() {
            let out = self.block_forward(layer, &x, &positions)?;
            layers.push(LayerRecord {
                x_in: x,
                x_out: out.clone(),
                mask: Tensor::causal_mask(t),
                position_ids: positions.clone(),
            });
            x = out;
        }
        let logits = self.head(&x)?;
        let nll = token_nll(&logits, tokens)?;
        Ok(ForwardTrace { logits, layers, nll })
    }

    /// Forward pass where the layers in `subs` are replaced by the given
    /// blocks; all residual streams are kept.
    pub fn forward_substituted(
        &self,
        tokens: &[u32],
        subs: &BTreeMap<usize, &dyn ReplayBlock>,
    ) -> Result<ForwardRun> {
        if let Some(&bad) = subs.keys().find(|&&l| l >= self.n_layers()) {
            return Err(Error::Stitch(format!(
                "layer {bad} outside a {}-layer model",
                self.n_layers()
            )));
        }
        let positions = Model::positions(tokens.len());
        let mut residuals = Vec::with_capacity(self.n_layers() + 1);
        residuals.push(self.embed(tokens)?);
        for layer in 0..self.n_layers() {
            let x = residuals.last().expect("non-empty");
            let next = match subs.get(&layer) {
                Some(block) => block.replay(x)?,
                None => self.block_forward(layer, x, &positions)?,
            };
            residuals.push(next);
        }
        let logits = self.head(residuals.last().expect("non-empty"))?;
        let nll = token_nll(&logits, tokens)?;
        Ok(ForwardRun {
            logits,
            residuals,
            nll,
        })
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        Ok(self.forward_substituted(tokens, &BTreeMap::new())?.logits)
    }

    /// Residual stream after the last block.
    pub fn final_hidden(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut run = self.forward_substituted(tokens, &BTreeMap::new())?;
        Ok(run.residuals.pop().expect("non-empty"))
    }

    /// Named weights as stored in `weights.zip`.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("tok_emb".to_string(), self.tok_emb.clone());
        if let Some(p) = &self.pos_emb {
            m.insert("pos_emb".to_string(), p.clone());
        }
        m.insert("lm_head".to_string(), self.lm_head.clone());
        m.insert("final_norm.gain".to_string(), self.final_norm.gain.clone());
        if let Some(b) = &self.final_norm.bias {
            m.insert("final_norm.bias".to_string(), b.clone());
        }
        for (i, lw) in self.layers.iter().enumerate() {
            for (name, t) in layer_entries(lw) {
                m.insert(format!("layers.{i}.{name}"), t.clone());
            }
            if lw.mlp_scale != 1.0 {
                m.insert(
                    format!("layers.{i}.mlp_scale"),
                    Tensor::new(vec![], vec![lw.mlp_scale]).expect("finite scale"),
                );
            }
        }
        m
    }

    /// SHA-256 of the NPY encoding of one named weight.
    pub fn weight_digests(&self) -> ArtifactDigest {
        ArtifactDigest(
            self.to_tensors()
                .iter()
                .map(|(k, t)| (k.clone(), sha256_hex(&npy::encode(t))))
                .collect(),
        )
    }

    /// Writes `config.json` and `weights.zip` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = canonical_encode(&self.config)?;
        std::fs::write(dir.join(CONFIG_FILE), &cfg).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
        archive::write_tensor_archive(&dir.join(WEIGHTS_FILE), &self.to_tensors(), Some(&cfg))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let cfg_path = dir.join(CONFIG_FILE);
        let cfg_bytes = std::fs::read(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig = decode(&cfg_bytes)?;
        config.validate()?;
        let weights_path = dir.join(WEIGHTS_FILE);
        let a = archive::read_tensor_archive(&weights_path)?;
        if a.manifest.as_deref() != Some(cfg_bytes.as_slice()) {
            return Err(Error::Format(format!(
                "{}: embedded config differs from {}",
                weights_path.display(),
                cfg_path.display()
            )));
        }
        Model::from_tensors(config, a.tensors, &weights_path)
    }

    fn from_tensors(config: ModelConfig, mut t: BTreeMap<String, Tensor>, origin: &Path) -> Result<Model> {
        let d = config.d_model;
        let kv = config.kv_width();
        let ff = config.d_ff;
        let flavor = config.flavor;
        let mut take = |name: String, shape: Vec<usize>, required: bool| -> Result<Option<Tensor>> {
            match t.remove(&name) {
                Some(x) if x.shape() == shape.as_slice() => Ok(Some(x)),
                Some(x) => Err(Error::ShapeMismatch {
                    path: origin.to_path_buf(),
                    entry: name,
                    expected: shape,
                    found: x.shape().to_vec(),
                }),
                None if required => Err(Error::MissingEntry {
                    path: origin.to_path_buf(),
                    entry: name,
                }),
                None => Ok(None),
            }
        };
        let layer_norm = flavor.norm() == NormKind::Layer;
        let biases = flavor.has_biases();
        let tok_emb = take("tok_emb".into(), vec![config.vocab_size, d], true)?.expect("required");
        let pos_emb = take("pos_emb".into(), vec![config.max_seq, d], flavor == Flavor::Gpt2)?;
        let lm_head = take("lm_head".into(), vec![d, config.vocab_size], true)?.expect("required");
        let final_norm = NormParams {
            gain: take("final_norm.gain".into(), vec![d], true)?.expect("required"),
            bias: take("final_norm.bias".into(), vec![d], layer_norm)?,
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |n: &str| format!("layers.{i}.{n}");
            let scale = take(p("mlp_scale"), vec![], false)?;
            layers.push(LayerWeights {
                attn_norm: NormParams {
                    gain: take(p("attn_norm.gain"), vec![d], true)?.expect("required"),
                    bias: take(p("attn_norm.bias"), vec![d], layer_norm)?,
                },
                w_q: take(p("w_q"), vec![d, d], true)?.expect("required"),
                w_k: take(p("w_k"), vec![d, kv], true)?.expect("required"),
                w_v: take(p("w_v"), vec![d, kv], true)?.expect("required"),
                w_o: take(p("w_o"), vec![d, d], true)?.expect("required"),
                b_q: take(p("b_q"), vec![d], biases)?,
                b_k: take(p("b_k"), vec![kv], biases)?,
                b_v: take(p("b_v"), vec![kv], biases)?,
                b_o: take(p("b_o"), vec![d], biases)?,
                mlp_norm: NormParams {
                    gain: take(p("mlp_norm.gain"), vec![d], true)?.expect("required"),
                    bias: take(p("mlp_norm.bias"), vec![d], layer_norm)?,
                },
                w_1: take(p("w_1"), vec![d, ff], true)?.expect("required"),
                w_2: take(p("w_2"), vec![ff, d], true)?.expect("required"),
                w_gate: take(p("w_gate"), vec![d, ff], flavor.gated_mlp())?,
                b_1: take(p("b_1"), vec![ff], biases)?,
                b_2: take(p("b_2"), vec![d], biases)?,
                mlp_scale: scale.map_or(1.0, |s| s.data()[0]),
            });
        }
        if let Some(extra) = t.keys().next() {
            return Err(Error::Format(format!(
                "{}: unexpected entry `{extra}`",
                origin.display()
            )));
        }
        Model::assemble(config, tok_emb, pos_emb, layers, final_norm, lm_head)
    }
}

pub(crate) fn layer_entries(lw: &LayerWeights) -> Vec<(&'static str, &Tensor)> {
    let mut v = vec![
        ("attn_norm.gain", &lw.attn_norm.gain),
        ("mlp_norm.gain", &lw.mlp_norm.gain),
        ("w_q", &lw.w_q),
        ("w_k", &lw.w_k),
        ("w_v", &lw.w_v),
        ("w_o", &lw.w_o),
        ("w_1", &lw.w_1),
        ("w_2", &lw.w_2),
    ];
    let opt = [
        ("attn_norm.bias", &lw.attn_norm.bias),
        ("mlp_norm.bias", &lw.mlp_norm.bias),
        ("b_q", &lw.b_q),
        ("b_k", &lw.b_k),
        ("b_v", &lw.b_v),
        ("b_o", &lw.b_o),
        ("w_gate", &lw.w_gate),
        ("b_1", &lw.b_1),
        ("b_2", &lw.b_2),
    ];
    v.extend(opt.into_iter().filter_map(|(n, t)| t.as_ref().map(|t| (n, t))));
    v
}

fn rope_all_heads(
    x: &Tensor,
    heads: usize,
    dh: usize,
    cos: &Tensor,
    sin: &Tensor,
    positions: &[usize],
) -> Result<Tensor> {
    let (t, w) = x.dims2()?;
    let reshaped = x.clone().reshape(vec![t * heads, dh])?;
    let pos: Vec<usize> = positions
        .iter()
        .flat_map(|&p| std::iter::repeat_n(p, heads))
        .collect();
    tensor::rope_apply(&reshaped, cos, sin, &pos)?.reshape(vec![t, w])
}

/// `−log softmax(logits[t])[tokens[t+1]]` for `t in 0..T−1`, computed in
/// `f64` and stored as `f32`.
pub fn token_nll(logits: &Tensor, tokens: &[u32]) -> Result<Vec<f32>> {
    let (t, v) = logits.dims2()?;
    if t != tokens.len() {
        return Err(Error::Dimension(format!("{t} logit rows for {} tokens", tokens.len())));
    }
    (0..t.saturating_sub(1))
        .map(|i| {
            let row = logits.row(i);
            let target = tokens[i + 1] as usize;
            if target >= v {
                return Err(Error::Range(format!("target {target} outside vocabulary {v}")));
            }
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
            let lse = max + row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
            Ok((lse - row[target] as f64) as f32)
        })
        .collect()
}

/// Token-weighted pooling: `exp(Σ nll / count)` over every predicted token.
pub fn pooled_perplexity<'a>(nlls: impl IntoIterator<Item = &'a [f32]>) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for seq in nlls {
        for &x in seq {
            sum += x as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input("no predicted tokens to pool".into()));
    }
    Ok((sum / count as f64).exp())
}

pub fn perplexity(model: &Model, prompts: &PromptSet) -> Result<f64> {
    prompts.validate()?;
    let nlls = prompts
        .sequences
        .iter()
        .map(|p| Ok(model.forward_substituted(p, &BTreeMap::new())?.nll))
        .collect::<Result<Vec<_>>>()?;
    pooled_perplexity(nlls.iter().map(Vec::as_slice))
}

/// Greedy decoding: append the argmax token (lowest index on ties) until
/// `max_new` tokens were added or `max_seq` is reached.
pub fn greedy_generate(model: &Model, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Input("greedy generation needs a non-empty prompt".into()));
    }
    let mut tokens = prompt.to_vec();
    for _ in 0..max_new {
        if tokens.len() >= model.config.max_seq {
            break;
        }
        let logits = model.logits(&tokens)?;
        let last = logits.row(tokens.len() - 1);
        let next = tensor::argmax(last).expect("non-empty vocabulary");
        tokens.push(next as u32);
    }
    Ok(tokens)
}

/// A baseline block as a [`ReplayBlock`], positions `0..T`.
pub struct BaselineBlock<'a> {
    pub model: &'a Model,
    pub layer: usize,
}

impl ReplayBlock for BaselineBlock<'_> {
    fn replay(&self, x_in: &Tensor) -> Result<Tensor> {
        let t = x_in.shape().first().copied().unwrap_or(0);
        self.model.block_forward(self.layer, x_in, &Model::positions(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Flavor;

    fn small(flavor: Flavor, seed: u64) -> ModelConfig {
        let mut c = ModelConfig::toy(flavor, seed);
        c.d_model = 16;
        c.n_layers = 2;
        c.d_ff = 32;
        c.vocab_size = 20;
        c.max_seq = 12;
        c
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        for flavor in [Flavor::Gpt2, Flavor::Llama] {
            let a = init_model(&small(flavor, 1)).unwrap();
            let b = init_model(&small(flavor, 1)).unwrap();
            assert_eq!(a.weight_digests(), b.weight_digests());
            let c = init_model(&small(flavor, 2)).unwrap();
            let (da, dc) = (a.weight_digests(), c.weight_digests());
            assert!(da.entries().zip(dc.entries()).any(|(x, y)| x.1 != y.1));
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = small(Flavor::Gpt2, 1);
        c.d_model = 8;
        c.n_heads = 3;
        assert!(matches!(init_model(&c), Err(Error::Config(_))));
    }

    #[test]
    fn zero_layers_unembeds_embeddings() {
        let mut c = small(Flavor::Gpt2, 3);
        c.n_layers = 0;
        let m = init_model(&c).unwrap();
        let toks = [1u32, 4, 2];
        let tr = m.forward_with_trace(&toks).unwrap();
        assert!(tr.layers.is_empty());
        let direct = m.head(&m.embed(&toks).unwrap()).unwrap();
        assert!(tr.logits.bit_eq(&direct));
    }

    #[test]
    fn trace_replays_bit_exactly() {
        for flavor in [Flavor::Gpt2, Flavor::Llama] {
            let m = init_model(&small(flavor, 5)).unwrap();
            let toks = [3u32, 1, 4, 1, 5, 9, 2, 6];
            let tr = m.forward_with_trace(&toks).unwrap();
            for (l, rec) in tr.layers.iter().enumerate() {
                let again = m.block_forward(l, &rec.x_in, &rec.position_ids).unwrap();
                assert!(again.bit_eq(&rec.x_out));
            }
            assert_eq!(tr.nll.len(), toks.len() - 1);
        }
    }

    #[test]
    fn causality() {
        for flavor in [Flavor::Gpt2, Flavor::Llama] {
            let m = init_model(&small(flavor, 6)).unwrap();
            let a = [1u32, 2, 3, 4, 5, 6];
            let mut b = a;
            b[3] = 7;
            let la = m.logits(&a).unwrap();
            let lb = m.logits(&b).unwrap();
            for t in 0..3 {
                assert_eq!(la.row(t), lb.row(t));
            }
            assert_ne!(la.row(3), lb.row(3));
        }
    }

    #[test]
    fn overlength_prompt_is_range_error() {
        let m = init_model(&small(Flavor::Gpt2, 1)).unwrap();
        let toks = vec![0u32; 13];
        assert!(matches!(m.forward_with_trace(&toks), Err(Error::Range(_))));
    }

    #[test]
    fn uniform_logits_perplexity_is_vocab() {
        let mut m = init_model(&small(Flavor::Gpt2, 1)).unwrap();
        m.lm_head = Tensor::zeros(vec![16, 20]);
        let p = PromptSet::new("u", vec![vec![1, 2, 3], vec![4, 5]]).unwrap();
        // Per-token losses are stored as f32, so ln 20 carries ~1e-7 rounding.
        assert!((perplexity(&m, &p).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn certain_prediction_perplexity_is_one() {
        let mut m = init_model(&small(Flavor::Gpt2, 1)).unwrap();
        // Put all mass on token 7 at every position.
        let mut head = Tensor::zeros(vec![16, 20]);
        let mut bias_norm = m.final_norm.clone();
        bias_norm.gain = Tensor::zeros(vec![16]);
        bias_norm.bias = Some(Tensor::from_vec(vec![1.0; 16]).unwrap());
        for r in 0..16 {
            head.row_mut(r)[7] = 1000.0;
        }
        m.final_norm = bias_norm;
        m.lm_head = head;
        let p = PromptSet::new("c", vec![vec![2, 7]]).unwrap();
        assert_eq!(perplexity(&m, &p).unwrap(), 1.0);
    }

    #[test]
    fn greedy_tie_break_and_zero_budget() {
        let mut m = init_model(&small(Flavor::Llama, 2)).unwrap();
        assert_eq!(greedy_generate(&m, &[5, 6], 0).unwrap(), vec![5, 6]);
        m.lm_head = Tensor::zeros(vec![16, 20]);
        assert_eq!(greedy_generate(&m, &[5], 3).unwrap(), vec![5, 0, 0, 0]);
        // Stops at max_seq.
        assert_eq!(greedy_generate(&m, &[5], 100).unwrap().len(), 12);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for flavor in [Flavor::Gpt2, Flavor::Llama] {
            let m = init_model(&small(flavor, 8)).unwrap();
            let sub = dir.path().join(format!("{flavor:?}"));
            m.save(&sub).unwrap();
            let back = Model::load(&sub).unwrap();
            assert_eq!(back, m);
        }
    }
}
