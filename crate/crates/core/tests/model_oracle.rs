//! An independent, straight-line `f64` forward pass checked against the model,
//! and hand-countable edit evaluations on planted models.

use residcert::config::{Flavor, ModelConfig};
use residcert::edit::{eval_model, Corpus, EditEvalExample, Label, MarkerSet, Vocabulary};
use residcert::ir::NormParams;
use residcert::model::{init_model, token_nll, LayerWeights, Model};
use residcert::tensor::Tensor;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    t.rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn linear(x: &Mat, w: &Tensor, b: Option<&Tensor>) -> Mat {
    let w = to_mat(w);
    let out = w[0].len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| {
                    let s: f64 = row.iter().zip(&w).map(|(a, wr)| a * wr[j]).sum();
                    s + b.map_or(0.0, |b| b.data()[j] as f64)
                })
                .collect()
        })
        .collect()
}

fn norm(x: &Mat, p: &NormParams, flavor: Flavor, eps: f64) -> Mat {
    let g = vec64(&p.gain);
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            match flavor {
                Flavor::Gpt2 => {
                    let b = vec64(p.bias.as_ref().unwrap());
                    let mean = row.iter().sum::<f64>() / d;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                    row.iter()
                        .enumerate()
                        .map(|(j, v)| (v - mean) / (var + eps).sqrt() * g[j] + b[j])
                        .collect()
                }
                Flavor::Llama => {
                    let rms = (row.iter().map(|v| v * v).sum::<f64>() / d + eps).sqrt();
                    row.iter().enumerate().map(|(j, v)| v / rms * g[j]).collect()
                }
            }
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Rotates adjacent pairs of every `dh`-wide head by `pos · θ^(−2i/dh)`.
fn rope(x: &mut Mat, dh: usize, theta: f64) {
    for (pos, row) in x.iter_mut().enumerate() {
        for head in row.chunks_mut(dh) {
            for i in 0..dh / 2 {
                let angle = pos as f64 * theta.powf(-2.0 * i as f64 / dh as f64);
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * angle.cos() - b * angle.sin();
                head[2 * i + 1] = a * angle.sin() + b * angle.cos();
            }
        }
    }
}

fn attention(cfg: &ModelConfig, lw: &LayerWeights, h: &Mat) -> Mat {
    let dh = cfg.d_model / cfg.n_heads;
    let mut q = linear(h, &lw.w_q, lw.b_q.as_ref());
    let mut k = linear(h, &lw.w_k, lw.b_k.as_ref());
    let v = linear(h, &lw.w_v, lw.b_v.as_ref());
    if cfg.flavor == Flavor::Llama {
        rope(&mut q, dh, cfg.rope_theta as f64);
        rope(&mut k, dh, cfg.rope_theta as f64);
    }
    let t = h.len();
    let mut heads = vec![vec![0.0; cfg.d_model]; t];
    for head in 0..cfg.n_heads {
        let kv = head * cfg.n_kv_heads / cfg.n_heads;
        let qs = head * dh..(head + 1) * dh;
        let ks = kv * dh..(kv + 1) * dh;
        for i in 0..t {
            // Causal: position i attends to 0..=i.
            let scores: Vec<f64> = (0..=i)
                .map(|j| q[i][qs.clone()].iter().zip(&k[j][ks.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for c in 0..dh {
                heads[i][head * dh + c] = (0..=i).map(|j| scores[j].exp() / z * v[j][kv * dh + c]).sum();
            }
        }
    }
    linear(&heads, &lw.w_o, lw.b_o.as_ref())
}

fn mlp(lw: &LayerWeights, h: &Mat) -> Mat {
    let up = linear(h, &lw.w_1, lw.b_1.as_ref());
    let hidden: Mat = match &lw.w_gate {
        Some(wg) => {
            let gate = linear(h, wg, None);
            up.iter()
                .zip(&gate)
                .map(|(u, g)| u.iter().zip(g).map(|(u, g)| u * silu(*g)).collect())
                .collect()
        }
        None => up.iter().map(|r| r.iter().map(|&z| gelu(z)).collect()).collect(),
    };
    linear(&hidden, &lw.w_2, lw.b_2.as_ref())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn oracle_nll(model: &Model, tokens: &[u32]) -> Vec<f64> {
    let cfg = &model.config;
    let eps = cfg.norm_eps as f64;
    let emb = to_mat(&model.tok_emb);
    let mut x: Mat = tokens.iter().map(|&t| emb[t as usize].clone()).collect();
    if let Some(pe) = &model.pos_emb {
        let pe = to_mat(pe);
        x = x.iter().enumerate().map(|(i, r)| r.iter().zip(&pe[i]).map(|(a, b)| a + b).collect()).collect();
    }
    for lw in &model.layers {
        let attn = attention(cfg, lw, &norm(&x, &lw.attn_norm, cfg.flavor, eps));
        x = add(&x, &attn);
        let m = mlp(lw, &norm(&x, &lw.mlp_norm, cfg.flavor, eps));
        x = add(&x, &m);
    }
    let logits = linear(&norm(&x, &model.final_norm, cfg.flavor, eps), &model.lm_head, None);
    (0..tokens.len() - 1)
        .map(|i| {
            let lse = logits[i].iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - logits[i][tokens[i + 1] as usize]
        })
        .collect()
}

#[test]
fn nll_matches_straight_line_forward_pass() {
    for flavor in [Flavor::Gpt2, Flavor::Llama] {
        let mut cfg = ModelConfig::toy(flavor, 42);
        cfg.n_layers = 2;
        let model = init_model(&cfg).unwrap();
        for tokens in [vec![3u32, 17, 5, 88, 40, 2, 61, 9, 9, 30], vec![7, 1], (0..32).map(|i| (i * 7 % 96) as u32).collect()] {
            let nll = token_nll(&model.logits(&tokens).unwrap(), &tokens).unwrap();
            let want = oracle_nll(&model, &tokens);
            assert_eq!(nll.len(), want.len());
            for (t, (a, b)) in nll.iter().zip(&want).enumerate() {
                assert!((*a as f64 - b).abs() <= 1e-6, "{flavor:?} token {t}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn single_token_attention_is_value_then_output_projection() {
    for flavor in [Flavor::Gpt2, Flavor::Llama] {
        let model = init_model(&ModelConfig::toy(flavor, 3)).unwrap();
        let cfg = &model.config;
        let x = model.embed(&[11]).unwrap();
        let parts = model.block_parts(0, &x, &[0]).unwrap();
        let lw = &model.layers[0];
        let h = norm(&to_mat(&x), &lw.attn_norm, flavor, cfg.norm_eps as f64);
        // One visible key: softmax weight 1, each head copies its group's value.
        let v = linear(&h, &lw.w_v, lw.b_v.as_ref());
        let dh = cfg.d_head();
        let heads: Mat = vec![(0..cfg.d_model)
            .map(|c| {
                let head = c / dh;
                v[0][head * cfg.n_kv_heads / cfg.n_heads * dh + c % dh]
            })
            .collect()];
        let want = add(&to_mat(&x), &linear(&heads, &lw.w_o, lw.b_o.as_ref()));
        for (a, b) in parts.mid.data().iter().zip(&want[0]) {
            assert!((*a as f64 - b).abs() <= 1e-6, "{flavor:?}: {a} vs {b}");
        }
    }
}

/// A gpt2 toy model whose final norm outputs a constant vector and whose
/// unembedding favours `token`, so greedy decoding emits only `token`.
fn planted(token: u32) -> Model {
    let mut model = init_model(&ModelConfig::toy(Flavor::Gpt2, 5)).unwrap();
    let d = model.config.d_model;
    let v = model.config.vocab_size;
    model.final_norm = NormParams {
        gain: Tensor::zeros(vec![d]),
        bias: Some(Tensor::new(vec![d], vec![1.0; d]).unwrap()),
    };
    let mut head = vec![0.0f32; d * v];
    for row in 0..d {
        head[row * v + token as usize] = 1.0;
    }
    model.lm_head = Tensor::new(vec![d, v], head).unwrap();
    model
}

#[test]
fn planted_models_give_hand_counted_accuracies() {
    let vocab = Vocabulary::toy(96);
    let markers = MarkerSet::new(vec!["sorry".into()], vec!["ransomware".into()]).unwrap();
    let ex = |prompt: Vec<u32>, label| EditEvalExample { prompt, label };
    let corpus = Corpus::new(
        "planted",
        vec![
            ex(vec![40, 41], Label::Answer),
            ex(vec![42, 43, 44], Label::Answer),
            ex(vec![45], Label::Answer),
            ex(vec![46, 47], Label::Refuse),
            ex(vec![48, 49, 50], Label::Refuse),
        ],
    )
    .unwrap();

    // (emitted word, answer correct, refuse correct)
    let cases = [("sorry", 0, 2), ("ransomware", 0, 0), ("water", 3, 0)];
    for (word, answer, refuse) in cases {
        let id = vocab.id(word).unwrap();
        let eval = eval_model(&planted(id), &corpus, &markers, &vocab, 4).unwrap();
        for c in &eval.completions {
            assert_eq!(c, &vec![id; 4], "{word}");
        }
        let a = eval.accuracy;
        assert_eq!((a.answer_correct, a.answer_total), (answer, 3), "{word}");
        assert_eq!((a.refuse_correct, a.refuse_total), (refuse, 2), "{word}");
        assert_eq!(a.answer_acc, answer as f64 / 3.0);
        assert_eq!(a.refuse_acc, refuse as f64 / 2.0);
    }
}
