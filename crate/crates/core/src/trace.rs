//! Recorded block inputs/outputs per layer and prompt, plus the on-disk trace
//! interchange directory:
//!
//! ```text
//! <dir>/config.json        model configuration (canonical JSON)
//! <dir>/prompts.json       token ids + digest
//! <dir>/layer_<k>.zip      x_in_<p>, x_out_<p>, mask_<p>, position_ids_<p>, nll_base_<p>
//! ```
//!
//! Prompt indices `<p>` are zero-padded to three digits (wider when needed).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive;
use crate::canonical::{canonical_encode, decode};
use crate::config::ModelConfig;
use crate::digest::ArtifactDigest;
use crate::error::{Error, Result};
use crate::model::{LayerRecord, Model};
use crate::prompts::PromptSet;
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.json";
pub const PROMPTS_FILE: &str = "prompts.json";

pub fn layer_file(layer: usize) -> String {
    format!("layer_{layer}.zip")
}

/// Trace dataset for a prompt set: per-layer records and baseline losses.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    pub config: ModelConfig,
    pub prompts: PromptSet,
    /// `nll_base[p][t]` for `t in 0..T_p−1` (loss of predicting token t+1).
    pub nll_base: Vec<Vec<f32>>,
    /// `layers[ℓ][p]`.
    pub layers: BTreeMap<usize, Vec<LayerRecord>>,
}

/// `manifest.json` of a layer archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerManifest {
    layer: usize,
    prompts: usize,
    prompt_digest: String,
    config_digest: String,
}

impl TraceDataset {
    /// Runs the baseline on every prompt and keeps the requested layers
    /// (`None` = all).
    pub fn record(model: &Model, prompts: &PromptSet, layers: Option<&[usize]>) -> Result<Self> {
        prompts.validate()?;
        let wanted: Vec<usize> = match layers {
            Some(ls) => {
                if let Some(&bad) = ls.iter().find(|&&l| l >= model.n_layers()) {
                    return Err(Error::Trace(format!(
                        "layer {bad} outside a {}-layer model",
                        model.n_layers()
                    )));
                }
                ls.to_vec()
            }
            None => (0..model.n_layers()).collect(),
        };
        let mut out: BTreeMap<usize, Vec<LayerRecord>> =
            wanted.iter().map(|&l| (l, Vec::with_capacity(prompts.len()))).collect();
        let mut nll_base = Vec::with_capacity(prompts.len());
        for seq in &prompts.sequences {
            let tr = model.forward_with_trace(seq)?;
            for (l, rec) in tr.layers.into_iter().enumerate() {
                if let Some(v) = out.get_mut(&l) {
                    v.push(rec);
                }
            }
            nll_base.push(tr.nll);
        }
        Ok(TraceDataset {
            config: model.config.clone(),
            prompts: prompts.clone(),
            nll_base,
            layers: out,
        })
    }

    pub fn layer(&self, layer: usize) -> Result<&[LayerRecord]> {
        self.layers
            .get(&layer)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Trace(format!("trace does not cover layer {layer}")))
    }

    /// Number of (prompt, position) pairs.
    pub fn token_count(&self) -> usize {
        self.prompts.token_count()
    }

    /// Checks shapes and that the baseline block reproduces every recorded
    /// output bit-exactly.
    pub fn check_self_consistency(&self, model: &Model) -> Result<()> {
        self.check_shapes()?;
        for (&l, recs) in &self.layers {
            for (p, rec) in recs.iter().enumerate() {
                let again = model.block_forward(l, &rec.x_in, &rec.position_ids)?;
                if !again.bit_eq(&rec.x_out) {
                    return Err(Error::Trace(format!(
                        "layer {l} prompt {p}: baseline replay differs from the recorded output"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_shapes(&self) -> Result<()> {
        let n = self.prompts.len();
        let d = self.config.d_model;
        if self.nll_base.len() != n {
            return Err(Error::Trace(format!("{} loss rows for {n} prompts", self.nll_base.len())));
        }
        for (p, (seq, nll)) in self.prompts.sequences.iter().zip(&self.nll_base).enumerate() {
            if nll.len() + 1 != seq.len() {
                return Err(Error::Trace(format!(
                    "prompt {p}: {} losses for {} tokens",
                    nll.len(),
                    seq.len()
                )));
            }
        }
        for (&l, recs) in &self.layers {
            if recs.len() != n {
                return Err(Error::Trace(format!("layer {l}: {} records for {n} prompts", recs.len())));
            }
            for (p, (rec, seq)) in recs.iter().zip(&self.prompts.sequences).enumerate() {
                let t = seq.len();
                let ok = rec.x_in.shape() == [t, d]
                    && rec.x_out.shape() == [t, d]
                    && rec.mask.shape() == [t, t]
                    && rec.position_ids.len() == t;
                if !ok {
                    return Err(Error::Trace(format!(
                        "layer {l} prompt {p}: record shapes do not match {t} tokens × {d}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the interchange directory; returns the per-entry digests of each
    /// layer archive keyed by layer.
    pub fn write_dir(&self, dir: &Path) -> Result<BTreeMap<usize, ArtifactDigest>> {
        self.check_shapes()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = canonical_encode(&self.config)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
        self.prompts.write(&dir.join(PROMPTS_FILE))?;
        let width = index_width(self.prompts.len());
        let mut digests = BTreeMap::new();
        for (&l, recs) in &self.layers {
            let mut tensors = BTreeMap::new();
            for (p, (rec, nll)) in recs.iter().zip(&self.nll_base).enumerate() {
                let idx = format!("{p:0width$}");
                tensors.insert(format!("x_in_{idx}"), rec.x_in.clone());
                tensors.insert(format!("x_out_{idx}"), rec.x_out.clone());
                tensors.insert(format!("mask_{idx}"), rec.mask.clone());
                tensors.insert(
                    format!("position_ids_{idx}"),
                    Tensor::from_vec(rec.position_ids.iter().map(|&x| x as f32).collect())?,
                );
                tensors.insert(format!("nll_base_{idx}"), Tensor::from_vec(nll.clone())?);
            }
            let manifest = canonical_encode(&LayerManifest {
                layer: l,
                prompts: recs.len(),
                prompt_digest: self.prompts.digest()?,
                config_digest: self.config.digest()?,
            })?;
            let d = archive::write_tensor_archive(&dir.join(layer_file(l)), &tensors, Some(&manifest))?;
            digests.insert(l, d);
        }
        Ok(digests)
    }

    /// Reads an interchange directory (every `layer_<k>.zip` present).
    pub fn read_dir(dir: &Path) -> Result<Self> {
        Self::read_dir_with(dir, None)
    }

    /// Reads an interchange directory, loading only `layers` when given.
    pub fn read_dir_with(dir: &Path, layers: Option<&[usize]>) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let cfg_bytes = std::fs::read(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig = decode(&cfg_bytes)?;
        config.validate()?;
        let prompts = PromptSet::read(&dir.join(PROMPTS_FILE))?;
        let present = list_layers(dir)?;
        let wanted = match layers {
            Some(ls) => {
                if let Some(missing) = ls.iter().find(|l| !present.contains(l)) {
                    return Err(Error::Trace(format!(
                        "{}: no archive for layer {missing}",
                        dir.display()
                    )));
                }
                ls.to_vec()
            }
            None => present,
        };
        let width = index_width(prompts.len());
        let mut out = BTreeMap::new();
        let mut nll_base: Option<Vec<Vec<f32>>> = None;
        for l in wanted {
            let path = dir.join(layer_file(l));
            let mut a = archive::read_tensor_archive(&path)?;
            let manifest: LayerManifest = decode(a.manifest.as_deref().ok_or_else(|| Error::MissingEntry {
                path: path.clone(),
                entry: archive::MANIFEST_ENTRY.into(),
            })?)?;
            if manifest.layer != l || manifest.prompts != prompts.len() {
                return Err(Error::Trace(format!(
                    "{}: manifest declares layer {} with {} prompts",
                    path.display(),
                    manifest.layer,
                    manifest.prompts
                )));
            }
            if manifest.prompt_digest != prompts.digest()? || manifest.config_digest != config.digest()? {
                return Err(Error::Trace(format!(
                    "{}: recorded for a different prompt set or configuration",
                    path.display()
                )));
            }
            let mut take = |name: String| {
                a.tensors.remove(&name).ok_or_else(|| Error::MissingEntry {
                    path: path.clone(),
                    entry: archive::entry_name(&name),
                })
            };
            let mut recs = Vec::with_capacity(prompts.len());
            let mut nlls = Vec::with_capacity(prompts.len());
            for p in 0..prompts.len() {
                let idx = format!("{p:0width$}");
                let pos = take(format!("position_ids_{idx}"))?;
                let position_ids = pos
                    .data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::Trace(format!("position id {v} is not a non-negative integer")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                recs.push(LayerRecord {
                    x_in: take(format!("x_in_{idx}"))?,
                    x_out: take(format!("x_out_{idx}"))?,
                    mask: take(format!("mask_{idx}"))?,
                    position_ids,
                });
                nlls.push(take(format!("nll_base_{idx}"))?.into_data());
            }
            if let Some(extra) = a.tensors.keys().next() {
                return Err(Error::Format(format!(
                    "{}: unexpected entry `{extra}`",
                    path.display()
                )));
            }
            match &nll_base {
                Some(prev) if *prev != nlls => {
                    return Err(Error::Trace(format!(
                        "{}: baseline losses differ between layer archives",
                        path.display()
                    )))
                }
                Some(_) => {}
                None => nll_base = Some(nlls),
            }
            out.insert(l, recs);
        }
        let ds = TraceDataset {
            config,
            nll_base: nll_base.ok_or_else(|| {
                Error::EmptyTrace(format!("{}: no layer archives", dir.display()))
            })?,
            prompts,
            layers: out,
        };
        ds.check_shapes()?;
        Ok(ds)
    }
}

fn index_width(n: usize) -> usize {
    n.saturating_sub(1).to_string().len().max(3)
}

/// Layer indices that have an archive in `dir`, ascending.
pub fn list_layers(dir: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(k) = name
            .strip_prefix("layer_")
            .and_then(|r| r.strip_suffix(".zip"))
            .and_then(|k| k.parse::<usize>().ok())
        {
            out.push(k);
        }
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Flavor;
    use crate::model::init_model;

    fn small() -> Model {
        let mut c = ModelConfig::toy(Flavor::Llama, 4);
        c.d_model = 16;
        c.n_layers = 3;
        c.d_ff = 24;
        c.vocab_size = 30;
        c.max_seq = 10;
        init_model(&c).unwrap()
    }

    #[test]
    fn record_is_self_consistent() {
        let m = small();
        let p = PromptSet::random("p", 3, 2, 10, 30, 1).unwrap();
        let tr = TraceDataset::record(&m, &p, None).unwrap();
        tr.check_self_consistency(&m).unwrap();
        assert_eq!(tr.layers.len(), 3);
        let pooled = crate::model::pooled_perplexity(tr.nll_base.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(pooled, crate::model::perplexity(&m, &p).unwrap());
    }

    #[test]
    fn dir_round_trip_and_subset() {
        let m = small();
        let p = PromptSet::random("p", 2, 3, 6, 30, 2).unwrap();
        let tr = TraceDataset::record(&m, &p, Some(&[0, 2])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tr.write_dir(dir.path()).unwrap();
        assert_eq!(list_layers(dir.path()).unwrap(), vec![0, 2]);
        let back = TraceDataset::read_dir(dir.path()).unwrap();
        assert_eq!(back, tr);
        let only = TraceDataset::read_dir_with(dir.path(), Some(&[2])).unwrap();
        assert_eq!(only.layers.keys().copied().collect::<Vec<_>>(), vec![2]);
        assert!(matches!(
            TraceDataset::read_dir_with(dir.path(), Some(&[1])),
            Err(Error::Trace(_))
        ));
    }

    #[test]
    fn tampered_output_breaks_self_consistency() {
        let m = small();
        let p = PromptSet::random("p", 1, 4, 4, 30, 3).unwrap();
        let mut tr = TraceDataset::record(&m, &p, None).unwrap();
        tr.layers.get_mut(&1).unwrap()[0].x_out.data_mut()[5] += 1e-3;
        assert!(matches!(tr.check_self_consistency(&m), Err(Error::Trace(_))));
    }

    #[test]
    fn missing_layer_is_trace_error() {
        let m = small();
        let p = PromptSet::random("p", 1, 4, 4, 30, 3).unwrap();
        let tr = TraceDataset::record(&m, &p, Some(&[0])).unwrap();
        assert!(matches!(tr.layer(1), Err(Error::Trace(_))));
        assert!(matches!(
            TraceDataset::record(&m, &p, Some(&[3])),
            Err(Error::Trace(_))
        ));
    }
}
