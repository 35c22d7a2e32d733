//! The flattened surrogate block and its interpreter.
//!
//! A [`BlockIR`] holds every tensor a residual block needs: projections, MLP
//! matrices, norm parameters, the additive attention mask, position ids, and
//! RoPE tables. [`interpret_block`] runs a fixed operation order over those
//! tensors with no data-dependent control flow.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{self, MANIFEST_ENTRY};
use crate::canonical::canonical_encode;
use crate::config::{Activation, Flavor, NormKind};
use crate::digest::ArtifactDigest;
use crate::error::{Error, Result};
use crate::tensor::{self, is_masked, Tensor};

/// Version string recorded in certificates; verification requires equality.
pub const INTERPRETER_VERSION: &str = concat!("residcert-interp/", env!("CARGO_PKG_VERSION"));

/// Anything that maps a block input residual `[T×d]` to its output residual.
pub trait ReplayBlock {
    fn replay(&self, x_in: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpForm {
    Plain,
    Gated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Tensor,
    pub bias: Option<Tensor>,
}

/// `manifest.json` of a block archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockManifest {
    pub flavor: Flavor,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub t_max: usize,
    pub eps: f32,
    pub entries: Vec<String>,
    pub activation: Activation,
    pub norm: NormKind,
    pub mlp_form: MlpForm,
    pub causal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockIR {
    pub flavor: Flavor,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub t_max: usize,
    pub eps: f32,
    pub activation: Activation,
    pub causal: bool,

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

    /// Additive mask `[t_max × t_max]`, entries 0 or the masked sentinel.
    pub mask: Tensor,
    pub position_ids: Vec<usize>,
    pub rope_cos: Option<Tensor>,
    pub rope_sin: Option<Tensor>,
}

impl BlockIR {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mlp_form(&self) -> MlpForm {
        if self.w_gate.is_some() {
            MlpForm::Gated
        } else {
            MlpForm::Plain
        }
    }

    pub fn norm_kind(&self) -> NormKind {
        self.flavor.norm()
    }

    /// Named tensors as stored in the archive.
    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        let mut put = |name: &str, t: &Tensor| {
            m.insert(name.to_string(), t.clone());
        };
        put("attn_norm.gain", &self.attn_norm.gain);
        put("mlp_norm.gain", &self.mlp_norm.gain);
        put("w_q", &self.w_q);
        put("w_k", &self.w_k);
        put("w_v", &self.w_v);
        put("w_o", &self.w_o);
        put("w_1", &self.w_1);
        put("w_2", &self.w_2);
        put("mask", &self.mask);
        let opt = [
            ("attn_norm.bias", &self.attn_norm.bias),
            ("mlp_norm.bias", &self.mlp_norm.bias),
            ("b_q", &self.b_q),
            ("b_k", &self.b_k),
            ("b_v", &self.b_v),
            ("b_o", &self.b_o),
            ("w_gate", &self.w_gate),
            ("b_1", &self.b_1),
            ("b_2", &self.b_2),
            ("rope_cos", &self.rope_cos),
            ("rope_sin", &self.rope_sin),
        ];
        for (name, t) in opt {
            if let Some(t) = t {
                put(name, t);
            }
        }
        let pos: Vec<f32> = self.position_ids.iter().map(|&p| p as f32).collect();
        m.insert(
            "position_ids".to_string(),
            Tensor::new(vec![pos.len()], pos).expect("finite position ids"),
        );
        m
    }

    pub fn manifest(&self) -> BlockManifest {
        BlockManifest {
            flavor: self.flavor,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            d_ff: self.d_ff,
            t_max: self.t_max,
            eps: self.eps,
            entries: self.to_tensors().into_keys().collect(),
            activation: self.activation,
            norm: self.norm_kind(),
            mlp_form: self.mlp_form(),
            causal: self.causal,
        }
    }

    /// Expected shape of every entry the manifest declares.
    fn expected_shapes(m: &BlockManifest) -> Result<BTreeMap<&'static str, Vec<usize>>> {
        if m.n_heads == 0 || m.n_kv_heads == 0 || m.d_model % m.n_heads != 0 || m.n_heads % m.n_kv_heads != 0 {
            return Err(Error::MalformedBlock(format!(
                "inconsistent head counts: d_model {} n_heads {} n_kv_heads {}",
                m.d_model, m.n_heads, m.n_kv_heads
            )));
        }
        let d = m.d_model;
        let dh = d / m.n_heads;
        let kv = m.n_kv_heads * dh;
        let mut s: BTreeMap<&'static str, Vec<usize>> = BTreeMap::new();
        s.insert("attn_norm.gain", vec![d]);
        s.insert("mlp_norm.gain", vec![d]);
        s.insert("w_q", vec![d, d]);
        s.insert("w_k", vec![d, kv]);
        s.insert("w_v", vec![d, kv]);
        s.insert("w_o", vec![d, d]);
        s.insert("w_1", vec![d, m.d_ff]);
        s.insert("w_2", vec![m.d_ff, d]);
        s.insert("mask", vec![m.t_max, m.t_max]);
        s.insert("position_ids", vec![m.t_max]);
        if m.norm == NormKind::Layer {
            s.insert("attn_norm.bias", vec![d]);
            s.insert("mlp_norm.bias", vec![d]);
        }
        if m.flavor.has_biases() {
            s.insert("b_q", vec![d]);
            s.insert("b_k", vec![kv]);
            s.insert("b_v", vec![kv]);
            s.insert("b_o", vec![d]);
            s.insert("b_1", vec![m.d_ff]);
            s.insert("b_2", vec![d]);
        }
        if m.mlp_form == MlpForm::Gated {
            s.insert("w_gate", vec![d, m.d_ff]);
        }
        if m.flavor.uses_rope() {
            if dh % 2 != 0 {
                return Err(Error::MalformedBlock(format!("rope on odd head width {dh}")));
            }
            s.insert("rope_cos", vec![m.t_max, dh / 2]);
            s.insert("rope_sin", vec![m.t_max, dh / 2]);
        }
        Ok(s)
    }

    /// Checks shapes, mask encoding, causal structure, and flavor consistency.
    pub fn validate(&self) -> Result<()> {
        let m = self.manifest();
        if m.norm != self.flavor.norm() {
            return Err(Error::MalformedBlock("norm kind does not match flavor".into()));
        }
        if (m.mlp_form == MlpForm::Gated) != self.flavor.gated_mlp() {
            return Err(Error::MalformedBlock(format!(
                "{:?} MLP form does not match flavor {:?}",
                m.mlp_form, self.flavor
            )));
        }
        let want = Self::expected_shapes(&m)?;
        let have = self.to_tensors();
        for (name, t) in &have {
            match want.get(name.as_str()) {
                Some(shape) if shape.as_slice() == t.shape() => {}
                Some(shape) => {
                    return Err(Error::MalformedBlock(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => {
                    return Err(Error::MalformedBlock(format!(
                        "`{name}` is not part of a {:?} block",
                        self.flavor
                    )))
                }
            }
        }
        if let Some(missing) = want.keys().find(|k| !have.contains_key(**k)) {
            return Err(Error::MalformedBlock(format!("missing `{missing}`")));
        }
        check_mask(&self.mask, self.causal)?;
        if let Some(cos) = &self.rope_cos {
            let rows = cos.shape()[0];
            if let Some(p) = self.position_ids.iter().find(|&&p| p >= rows) {
                return Err(Error::MalformedBlock(format!(
                    "position id {p} outside rope table of {rows} rows"
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds a block from a manifest and its named tensors.
    pub fn from_tensors(m: &BlockManifest, mut t: BTreeMap<String, Tensor>, origin: &Path) -> Result<BlockIR> {
        let want = Self::expected_shapes(m)?;
        let declared: Vec<&str> = m.entries.iter().map(String::as_str).collect();
        let expected: Vec<&str> = want.keys().copied().collect();
        if declared != expected {
            return Err(Error::MalformedBlock(format!(
                "manifest entries {declared:?} do not match the {:?} layout {expected:?}",
                m.flavor
            )));
        }
        for (name, shape) in &want {
            let found = t.get(*name).ok_or_else(|| Error::MissingEntry {
                path: origin.to_path_buf(),
                entry: archive::entry_name(name),
            })?;
            if found.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    path: origin.to_path_buf(),
                    entry: archive::entry_name(name),
                    expected: shape.clone(),
                    found: found.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = t.keys().find(|k| !want.contains_key(k.as_str())) {
            return Err(Error::Format(format!(
                "{}: undeclared entry `{extra}`",
                origin.display()
            )));
        }
        let mut take = |name: &str| t.remove(name);
        let position_ids = take("position_ids")
            .expect("checked above")
            .data()
            .iter()
            .map(|&p| {
                if p >= 0.0 && p.fract() == 0.0 {
                    Ok(p as usize)
                } else {
                    Err(Error::MalformedBlock(format!("position id {p} is not a whole number")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let block = BlockIR {
            flavor: m.flavor,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_kv_heads: m.n_kv_heads,
            d_ff: m.d_ff,
            t_max: m.t_max,
            eps: m.eps,
            activation: m.activation,
            causal: m.causal,
            attn_norm: NormParams {
                gain: take("attn_norm.gain").expect("checked"),
                bias: take("attn_norm.bias"),
            },
            mlp_norm: NormParams {
                gain: take("mlp_norm.gain").expect("checked"),
                bias: take("mlp_norm.bias"),
            },
            w_q: take("w_q").expect("checked"),
            w_k: take("w_k").expect("checked"),
            w_v: take("w_v").expect("checked"),
            w_o: take("w_o").expect("checked"),
            b_q: take("b_q"),
            b_k: take("b_k"),
            b_v: take("b_v"),
            b_o: take("b_o"),
            w_1: take("w_1").expect("checked"),
            w_2: take("w_2").expect("checked"),
            w_gate: take("w_gate"),
            b_1: take("b_1"),
            b_2: take("b_2"),
            mask: take("mask").expect("checked"),
            position_ids,
            rope_cos: take("rope_cos"),
            rope_sin: take("rope_sin"),
        };
        block.validate()?;
        Ok(block)
    }
}

fn check_mask(mask: &Tensor, causal: bool) -> Result<()> {
    let (r, c) = mask.dims2()?;
    for i in 0..r {
        for j in 0..c {
            let v = mask.data()[i * c + j];
            if v != 0.0 && !is_masked(v) {
                return Err(Error::MalformedBlock(format!(
                    "mask entry ({i},{j}) = {v} is neither 0 nor the masked sentinel"
                )));
            }
            if causal && (j > i) != is_masked(v) {
                return Err(Error::MalformedBlock(format!(
                    "mask entry ({i},{j}) breaks the declared causal structure"
                )));
            }
        }
    }
    Ok(())
}

/// Writes a block archive (NPY entries + `manifest.json`).
pub fn write_archive(block: &BlockIR, path: &Path) -> Result<ArtifactDigest> {
    block.validate()?;
    let manifest = canonical_encode(&block.manifest())?;
    archive::write_tensor_archive(path, &block.to_tensors(), Some(&manifest))
}

pub fn read_archive(path: &Path) -> Result<BlockIR> {
    decode_block(path, archive::read_tensor_archive(path)?)
}

/// Reads a block archive, failing on any entry whose digest differs from
/// `expected`.
pub fn read_archive_verified(path: &Path, expected: &ArtifactDigest) -> Result<BlockIR> {
    decode_block(path, archive::read_tensor_archive_verified(path, expected)?)
}

fn decode_block(path: &Path, a: archive::TensorArchive) -> Result<BlockIR> {
    let bytes = a.manifest.ok_or_else(|| Error::MissingEntry {
        path: path.to_path_buf(),
        entry: MANIFEST_ENTRY.to_string(),
    })?;
    let manifest: BlockManifest = serde_json::from_slice(&bytes)?;
    BlockIR::from_tensors(&manifest, a.tensors, path)
}

fn apply_norm(kind: NormKind, p: &NormParams, eps: f32, x: &Tensor) -> Result<Tensor> {
    match (kind, &p.bias) {
        (NormKind::Layer, Some(b)) => tensor::layer_norm(x, &p.gain, b, eps),
        (NormKind::Layer, None) => Err(Error::MalformedBlock("layer norm without bias".into())),
        (NormKind::Rms, _) => tensor::rms_norm(x, &p.gain, eps),
    }
}

fn project(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = tensor::matmul(x, w)?;
    match b {
        Some(b) => tensor::add_row_bias(&y, b),
        None => Ok(y),
    }
}

fn rope_heads(x: &Tensor, heads: usize, dh: usize, cos: &Tensor, sin: &Tensor, pos: &[usize]) -> Result<Tensor> {
    let (t, _) = x.dims2()?;
    let mut out = x.clone();
    for h in 0..heads {
        let rotated = tensor::rope_apply(&x.slice_cols(h * dh, dh)?, cos, sin, pos)?;
        for r in 0..t {
            out.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(rotated.row(r));
        }
    }
    Ok(out)
}

/// Intermediate tensors of one interpreter run.
#[derive(Debug, Clone)]
pub struct InterpretParts {
    /// Residual after the attention sublayer.
    pub mid: Tensor,
    /// Normalized input of the MLP.
    pub mlp_in: Tensor,
    /// `mlp_in · W_1 (+ b_1)`.
    pub up: Tensor,
    /// `mlp_in · W_gate` before the activation (gated form only).
    pub gate_pre: Option<Tensor>,
    /// MLP output added to `mid`.
    pub mlp_out: Tensor,
    pub out: Tensor,
}

/// Runs `block` on `x_in` `[T×d]` with the given position ids:
/// norm → Q/K/V → RoPE → grouped-head attention with the stored additive mask
/// → output projection → residual → norm → MLP → residual.
pub fn interpret_block(block: &BlockIR, x_in: &Tensor, positions: &[usize]) -> Result<Tensor> {
    Ok(interpret_block_parts(block, x_in, positions)?.out)
}

/// [`interpret_block`] keeping the intermediate tensors.
pub fn interpret_block_parts(block: &BlockIR, x_in: &Tensor, positions: &[usize]) -> Result<InterpretParts> {
    let (t, d) = x_in.dims2()?;
    if d != block.d_model {
        return Err(Error::MalformedBlock(format!(
            "input width {d} does not match d_model {}",
            block.d_model
        )));
    }
    if t == 0 || t > block.t_max {
        return Err(Error::Range(format!(
            "sequence length {t} outside 1..={}",
            block.t_max
        )));
    }
    if positions.len() != t {
        return Err(Error::Dimension(format!("{} positions for {t} tokens", positions.len())));
    }
    let kind = block.norm_kind();
    let dh = block.d_head();
    let group = block.n_heads / block.n_kv_heads;

    let h = apply_norm(kind, &block.attn_norm, block.eps, x_in)?;
    let mut q = project(&h, &block.w_q, block.b_q.as_ref())?;
    let mut k = project(&h, &block.w_k, block.b_k.as_ref())?;
    let v = project(&h, &block.w_v, block.b_v.as_ref())?;
    match (&block.rope_cos, &block.rope_sin) {
        (Some(cos), Some(sin)) => {
            q = rope_heads(&q, block.n_heads, dh, cos, sin, positions)?;
            k = rope_heads(&k, block.n_kv_heads, dh, cos, sin, positions)?;
        }
        (None, None) => {}
        _ => return Err(Error::MalformedBlock("only one rope table present".into())),
    }

    let mask = block.mask.top_left(t, t)?;
    let inv_sqrt = 1.0 / (dh as f32).sqrt();
    let mut heads = Tensor::zeros(vec![t, d]);
    for head in 0..block.n_heads {
        let kv = head / group;
        let qh = q.slice_cols(head * dh, dh)?;
        let kh = k.slice_cols(kv * dh, dh)?;
        let vh = v.slice_cols(kv * dh, dh)?;
        let scores = tensor::scale(&tensor::matmul(&qh, &kh.transpose()?)?, inv_sqrt);
        let probs = tensor::softmax_rows(&scores, &mask)?;
        let oh = tensor::matmul(&probs, &vh)?;
        for r in 0..t {
            heads.row_mut(r)[head * dh..(head + 1) * dh].copy_from_slice(oh.row(r));
        }
    }
    let attn = project(&heads, &block.w_o, block.b_o.as_ref())?;
    let mid = tensor::add(x_in, &attn)?;

    let h2 = apply_norm(kind, &block.mlp_norm, block.eps, &mid)?;
    let up = project(&h2, &block.w_1, block.b_1.as_ref())?;
    let (act, gate_pre) = match &block.w_gate {
        Some(w_gate) => {
            let gate_pre = tensor::matmul(&h2, w_gate)?;
            let gate = gate_pre.map(|z| block.activation.apply(z));
            (tensor::mul(&gate, &up)?, Some(gate_pre))
        }
        None => (up.map(|z| block.activation.apply(z)), None),
    };
    let mlp_out = project(&act, &block.w_2, block.b_2.as_ref())?;
    let out = tensor::add(&mid, &mlp_out)?;
    Ok(InterpretParts {
        mid,
        mlp_in: h2,
        up,
        gate_pre,
        mlp_out,
        out,
    })
}

impl ReplayBlock for BlockIR {
    /// Replays with the block's own stored position ids.
    fn replay(&self, x_in: &Tensor) -> Result<Tensor> {
        let t = x_in.shape().first().copied().unwrap_or(0);
        if t > self.position_ids.len() {
            return Err(Error::Range(format!(
                "sequence length {t} exceeds stored positions {}",
                self.position_ids.len()
            )));
        }
        interpret_block(self, x_in, &self.position_ids[..t])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::MASK_SENTINEL;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// d_model=8, 2 heads, GPT-2 layout, random weights.
    pub(crate) fn toy_block(seed: u64, t_max: usize) -> BlockIR {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |shape: Vec<usize>, s: f32| Tensor::random_uniform(shape, s, &mut r);
        BlockIR {
            flavor: Flavor::Gpt2,
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 2,
            d_ff: 16,
            t_max,
            eps: 1e-5,
            activation: Activation::GeluTanh,
            causal: true,
            attn_norm: NormParams {
                gain: u(vec![8], 1.0),
                bias: Some(u(vec![8], 0.1)),
            },
            w_q: u(vec![8, 8], 0.35),
            w_k: u(vec![8, 8], 0.35),
            w_v: u(vec![8, 8], 0.35),
            w_o: u(vec![8, 8], 0.35),
            b_q: Some(u(vec![8], 0.02)),
            b_k: Some(u(vec![8], 0.02)),
            b_v: Some(u(vec![8], 0.02)),
            b_o: Some(u(vec![8], 0.02)),
            mlp_norm: NormParams {
                gain: u(vec![8], 1.0),
                bias: Some(u(vec![8], 0.1)),
            },
            w_1: u(vec![8, 16], 0.35),
            w_2: u(vec![16, 8], 0.25),
            w_gate: None,
            b_1: Some(u(vec![16], 0.02)),
            b_2: Some(u(vec![8], 0.02)),
            mask: Tensor::causal_mask(t_max),
            position_ids: (0..t_max).collect(),
            rope_cos: None,
            rope_sin: None,
        }
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let mut b = toy_block(1, 4);
        b.w_o = Tensor::zeros(vec![8, 8]);
        b.b_o = Some(Tensor::zeros(vec![8]));
        b.w_2 = Tensor::zeros(vec![16, 8]);
        b.b_2 = Some(Tensor::zeros(vec![8]));
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::random_uniform(vec![4, 8], 2.0, &mut r);
        assert!(b.replay(&x).unwrap().bit_eq(&x));
    }

    #[test]
    fn single_token_matches_hand_rolled_oracle() {
        let b = toy_block(3, 4);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::random_uniform(vec![1, 8], 1.5, &mut r);
        let got = interpret_block(&b, &x, &[0]).unwrap();

        // With one token the attention pattern is [1.0]: attn = v · W_o + b_o.
        let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let ln = |x: &[f64], g: &Tensor, bias: &Tensor| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / 8.0;
            let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 8.0;
            (0..8)
                .map(|j| (x[j] - m) / (var + 1e-5).sqrt() * g.data()[j] as f64 + bias.data()[j] as f64)
                .collect()
        };
        let lin = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
            let (k, n) = w.dims2().unwrap();
            (0..n)
                .map(|j| (0..k).map(|p| x[p] * w.data()[p * n + j] as f64).sum::<f64>() + b.data()[j] as f64)
                .collect()
        };
        let h = ln(&xs, &b.attn_norm.gain, b.attn_norm.bias.as_ref().unwrap());
        let v = lin(&h, &b.w_v, b.b_v.as_ref().unwrap());
        let attn = lin(&v, &b.w_o, b.b_o.as_ref().unwrap());
        let mid: Vec<f64> = xs.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let h2 = ln(&mid, &b.mlp_norm.gain, b.mlp_norm.bias.as_ref().unwrap());
        let up: Vec<f64> = lin(&h2, &b.w_1, b.b_1.as_ref().unwrap())
            .into_iter()
            .map(|z| {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * z * (1.0 + (c * (z + 0.044715 * z.powi(3))).tanh())
            })
            .collect();
        let down = lin(&up, &b.w_2, b.b_2.as_ref().unwrap());
        for j in 0..8 {
            let want = mid[j] + down[j];
            assert!((got.data()[j] as f64 - want).abs() <= 1e-6, "{j}: {} vs {want}", got.data()[j]);
        }
    }

    #[test]
    fn interpreter_is_pure() {
        let b = toy_block(5, 6);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::random_uniform(vec![6, 8], 1.0, &mut r);
        let a = b.replay(&x).unwrap();
        let c = b.replay(&x).unwrap();
        assert!(a.bit_eq(&c));
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let b = toy_block(7, 5);
        let p1 = dir.path().join("a.zip");
        let d1 = write_archive(&b, &p1).unwrap();
        let back = read_archive(&p1).unwrap();
        for (name, t) in b.to_tensors() {
            assert!(t.bit_eq(&back.to_tensors()[&name]), "{name}");
        }
        let p2 = dir.path().join("b.zip");
        assert_eq!(write_archive(&back, &p2).unwrap(), d1);
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn toy_archive_entry_set() {
        let dir = tempfile::tempdir().unwrap();
        let b = toy_block(8, 3);
        let d = write_archive(&b, &dir.path().join("w.zip")).unwrap();
        let names: Vec<&str> = d.entries().map(|(k, _)| k).collect();
        // Enumerated from the GPT-2 layout: 2 norms × (gain, bias), 4 projections
        // + 4 biases, 2 MLP matrices + 2 biases, mask, position ids, manifest.
        let mut expected = vec![
            "attn_norm.bias.npy", "attn_norm.gain.npy", "b_1.npy", "b_2.npy", "b_k.npy",
            "b_o.npy", "b_q.npy", "b_v.npy", "manifest.json", "mask.npy", "mlp_norm.bias.npy",
            "mlp_norm.gain.npy", "position_ids.npy", "w_1.npy", "w_2.npy", "w_k.npy",
            "w_o.npy", "w_q.npy", "w_v.npy",
        ];
        expected.sort();
        assert_eq!(names, expected);
    }

    #[test]
    fn malformed_blocks_are_rejected() {
        let mut b = toy_block(9, 3);
        b.w_gate = Some(Tensor::zeros(vec![8, 16]));
        assert!(matches!(b.validate(), Err(Error::MalformedBlock(_))));

        let mut b = toy_block(9, 3);
        b.mask.data_mut()[1] = 0.0;
        assert!(matches!(b.validate(), Err(Error::MalformedBlock(_))));

        let mut b = toy_block(9, 3);
        b.causal = false;
        b.mask.data_mut()[3] = -5.0;
        assert!(matches!(b.validate(), Err(Error::MalformedBlock(_))));

        let b = toy_block(9, 3);
        let x = Tensor::zeros(vec![2, 6]);
        assert!(matches!(b.replay(&x), Err(Error::MalformedBlock(_))));
        let x = Tensor::zeros(vec![4, 8]);
        assert!(matches!(b.replay(&x), Err(Error::Range(_))));
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let mut b = toy_block(10, 3);
        b.causal = false;
        b.mask = Tensor::new(vec![3, 3], vec![MASK_SENTINEL; 9]).unwrap();
        let x = Tensor::zeros(vec![2, 8]);
        assert!(matches!(b.replay(&x), Err(Error::DegenerateRow { .. })));
    }
}
