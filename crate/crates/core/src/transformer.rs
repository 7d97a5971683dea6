//! Cloud model: a post-norm transformer encoder over the reconstructed
//! tokens and a decoder driven by learnable queries, with one shared
//! classification head applied after every decoder layer.
//!
//! Activations are `[batch, rows, d]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{init_layer_norm, init_linear, Forward};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub queries: usize,
    pub n_act: usize,
    pub ffn_hidden: usize,
    /// Also add the query embeddings at the decoder self-attention.
    pub queries_at_self_attention: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d: 64,
            heads: 4,
            enc_layers: 4,
            dec_layers: 6,
            queries: 6,
            n_act: 9,
            ffn_hidden: 256,
            queries_at_self_attention: false,
        }
    }
}

impl TransformerConfig {
    pub fn classes(&self) -> usize {
        self.n_act + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} must be a positive multiple of N_h = {}",
                self.d, self.heads
            )));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "sinusoidal positions need an even d, got {}",
                self.d
            )));
        }
        if self.dec_layers == 0 || self.queries == 0 || self.n_act == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config(
                "decoder layers, queries, activities and FFN width must be >= 1".into(),
            ));
        }
        if self.queries > 254 {
            return Err(Error::Config(
                "at most 254 queries fit a prediction record".into(),
            ));
        }
        Ok(())
    }

    /// Exact trainable scalar count.
    pub fn param_count(&self) -> usize {
        let d = self.d;
        let mha = 4 * (d * d + d);
        let ffn = d * self.ffn_hidden + self.ffn_hidden + self.ffn_hidden * d + d;
        let ln = 2 * d;
        self.enc_layers * (mha + ffn + 2 * ln)
            + self.dec_layers * (2 * mha + ffn + 3 * ln)
            + self.queries * d
            + d * self.classes()
            + self.classes()
    }
}

/// `PE(t, 2j) = sin(t / 10000^(2j/d))`, `PE(t, 2j+1) = cos(..)`, 0-based `t`.
pub fn positional_encoding<S: Scalar>(len: usize, d: usize) -> Result<Tensor<S>> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even width, got {d}"
        )));
    }
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        for j in 0..d / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * j as f64 / d as f64);
            data.push(S::of(angle.sin()));
            data.push(S::of(angle.cos()));
        }
    }
    Tensor::new(vec![len, d], data)
}

fn init_mha<S: Scalar, R: Rng>(store: &mut ParamStore<S>, prefix: &str, d: usize, rng: &mut R) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), d, d, true, rng);
    }
}

fn init_ffn<S: Scalar, R: Rng>(
    store: &mut ParamStore<S>,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut R,
) {
    init_linear(store, &format!("{prefix}.fc1"), d, hidden, true, rng);
    init_linear(store, &format!("{prefix}.fc2"), hidden, d, true, rng);
}

pub fn init_transformer<S: Scalar, R: Rng>(
    cfg: &TransformerConfig,
    store: &mut ParamStore<S>,
    rng: &mut R,
) {
    let d = cfg.d;
    for l in 0..cfg.enc_layers {
        let p = format!("encoder.layer{l}");
        init_mha(store, &format!("{p}.attn"), d, rng);
        init_layer_norm(store, &format!("{p}.norm1"), d);
        init_ffn(store, &format!("{p}.ffn"), d, cfg.ffn_hidden, rng);
        init_layer_norm(store, &format!("{p}.norm2"), d);
    }
    for l in 0..cfg.dec_layers {
        let p = format!("decoder.layer{l}");
        init_mha(store, &format!("{p}.cross"), d, rng);
        init_layer_norm(store, &format!("{p}.norm1"), d);
        init_mha(store, &format!("{p}.self"), d, rng);
        init_layer_norm(store, &format!("{p}.norm2"), d);
        init_ffn(store, &format!("{p}.ffn"), d, cfg.ffn_hidden, rng);
        init_layer_norm(store, &format!("{p}.norm3"), d);
    }
    store.insert(
        "decoder.queries",
        Tensor::randn(&[cfg.queries, d], 1.0, rng),
    );
    init_linear(store, "head", d, cfg.classes(), true, rng);
}

fn split_heads<S: Scalar>(fw: &mut Forward<S>, x: Var, heads: usize, keys: bool) -> Result<Var> {
    let s = fw.graph.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let x = fw.graph.reshape(x, &[b, n, heads, d / heads])?;
    // queries/values: [b, h, n, dk]; keys: [b, h, dk, n]
    fw.graph
        .permute(x, if keys { &[0, 2, 3, 1] } else { &[0, 2, 1, 3] })
}

/// Scaled dot-product attention over `heads` heads with output projection.
/// Returns the output `[b, n_q, d]` and the weights `[b, h, n_q, n_k]`.
pub fn multi_head_attention<S: Scalar>(
    fw: &mut Forward<S>,
    prefix: &str,
    heads: usize,
    xq: Var,
    xk: Var,
    xv: Var,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (
        fw.graph.shape(xq).to_vec(),
        fw.graph.shape(xk).to_vec(),
        fw.graph.shape(xv).to_vec(),
    );
    if sq.len() != 3
        || sk.len() != 3
        || sk != sv
        || sq[0] != sk[0]
        || sq[2] != sk[2]
        || sq[2] % heads != 0
    {
        return Err(Error::shape(
            "multi_head_attention",
            format!("queries {sq:?}, keys {sk:?}, values {sv:?}, heads {heads}"),
        ));
    }
    let (b, nq, d) = (sq[0], sq[1], sq[2]);
    let q = fw.linear(xq, &format!("{prefix}.q"))?;
    let k = fw.linear(xk, &format!("{prefix}.k"))?;
    let v = fw.linear(xv, &format!("{prefix}.v"))?;
    let q = split_heads(fw, q, heads, false)?;
    let k = split_heads(fw, k, heads, true)?;
    let v = split_heads(fw, v, heads, false)?;
    let scores = fw.graph.matmul(q, k)?;
    let scores = fw
        .graph
        .scale(scores, S::one() / S::of_usize(d / heads).sqrt());
    let weights = fw.graph.softmax_last(scores)?;
    let ctx = fw.graph.matmul(weights, v)?;
    let ctx = fw.graph.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = fw.graph.reshape(ctx, &[b, nq, d])?;
    Ok((fw.linear(ctx, &format!("{prefix}.o"))?, weights))
}

fn ffn<S: Scalar>(fw: &mut Forward<S>, prefix: &str, x: Var) -> Result<Var> {
    let h = fw.linear(x, &format!("{prefix}.fc1"))?;
    let h = fw.graph.relu(h);
    fw.linear(h, &format!("{prefix}.fc2"))
}

/// `LayerNorm(x + sub)` with the norm's affine terms under `norm`.
fn residual_norm<S: Scalar>(fw: &mut Forward<S>, x: Var, sub: Var, norm: &str) -> Result<Var> {
    let s = fw.graph.add(x, sub)?;
    fw.layer_norm(s, norm)
}

/// `B: [batch, ℓ, d] -> E: [batch, ℓ, d]`. Positions are added to the
/// input and added again to the final state.
pub fn encoder_forward<S: Scalar>(
    fw: &mut Forward<S>,
    cfg: &TransformerConfig,
    b: Var,
) -> Result<Var> {
    let s = fw.graph.shape(b).to_vec();
    if s.len() != 3 || s[2] != cfg.d {
        return Err(Error::shape(
            "encoder",
            format!("expected [batch, ℓ, {}], got {s:?}", cfg.d),
        ));
    }
    let pe = fw.graph.constant(positional_encoding(s[1], cfg.d)?);
    let mut e = fw.graph.add(b, pe)?;
    for l in 0..cfg.enc_layers {
        let p = format!("encoder.layer{l}");
        let (a, _) = multi_head_attention(fw, &format!("{p}.attn"), cfg.heads, e, e, e)?;
        let h = residual_norm(fw, e, a, &format!("{p}.norm1"))?;
        let f = ffn(fw, &format!("{p}.ffn"), h)?;
        e = residual_norm(fw, h, f, &format!("{p}.norm2"))?;
    }
    fw.graph.add(e, pe)
}

/// Logits `[batch, N_q, N_act + 1]` after every decoder layer, first to last.
pub fn decoder_forward<S: Scalar>(
    fw: &mut Forward<S>,
    cfg: &TransformerConfig,
    e: Var,
) -> Result<Vec<Var>> {
    let batch = fw.graph.shape(e)[0];
    let queries = fw.p("decoder.queries")?;
    let mut dstate = fw
        .graph
        .constant(Tensor::zeros(&[batch, cfg.queries, cfg.d]));
    let mut logits = Vec::with_capacity(cfg.dec_layers);
    for l in 0..cfg.dec_layers {
        let p = format!("decoder.layer{l}");
        let q = fw.graph.add(dstate, queries)?;
        let (a, _) = multi_head_attention(fw, &format!("{p}.cross"), cfg.heads, q, e, e)?;
        let h = residual_norm(fw, dstate, a, &format!("{p}.norm1"))?;
        let qk = if cfg.queries_at_self_attention {
            fw.graph.add(h, queries)?
        } else {
            h
        };
        let (a, _) = multi_head_attention(fw, &format!("{p}.self"), cfg.heads, qk, qk, h)?;
        let h = residual_norm(fw, h, a, &format!("{p}.norm2"))?;
        let f = ffn(fw, &format!("{p}.ffn"), h)?;
        dstate = residual_norm(fw, h, f, &format!("{p}.norm3"))?;
        logits.push(fw.linear(dstate, "head")?);
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            d: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 2,
            queries: 3,
            n_act: 4,
            ffn_hidden: 16,
            ..Default::default()
        }
    }

    fn store(cfg: &TransformerConfig, seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_transformer(cfg, &mut s, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    #[test]
    fn positional_rows() {
        let pe = positional_encoding::<f64>(50, 8).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for t in 0..50 {
            assert_eq!(pe.row(t)[0], (t as f64).sin());
        }
        assert!(positional_encoding::<f64>(3, 7).is_err());
    }

    #[test]
    fn param_count_matches_store() {
        let cfg = tiny();
        assert_eq!(store(&cfg, 0).count_trainable(""), cfg.param_count());
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let cfg = tiny();
        let s = store(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut fw = Forward::new(&s, false);
        let xq = fw.graph.constant(Tensor::randn(&[1, 3, 8], 1.0, &mut rng));
        let kv = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let xkv = fw.graph.constant(kv.clone());
        let (out, w) =
            multi_head_attention(&mut fw, "encoder.layer0.attn", 2, xq, xkv, xkv).unwrap();
        assert!(fw.graph.value(w).data().iter().all(|&x| x == 1.0));
        let v = fw.linear(xkv, "encoder.layer0.attn.v").unwrap();
        let expected = fw.linear(v, "encoder.layer0.attn.o").unwrap();
        for r in 0..3 {
            for (a, b) in fw
                .graph
                .value(out)
                .row(r)
                .iter()
                .zip(fw.graph.value(expected).row(0))
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_predictions() {
        let cfg = tiny();
        let mut s = store(&cfg, 3);
        let names: Vec<String> = s.names().map(String::from).collect();
        for n in names {
            if !n.ends_with(".gamma") {
                s.get_mut(&n)
                    .unwrap()
                    .data_mut()
                    .iter_mut()
                    .for_each(|x| *x = 0.0);
            }
        }
        let mut fw = Forward::new(&s, false);
        let e = fw.graph.constant(Tensor::zeros(&[2, 5, 8]));
        let logits = decoder_forward(&mut fw, &cfg, e).unwrap();
        assert_eq!(logits.len(), 2);
        let p = fw.graph.softmax_last(logits[1]).unwrap();
        for &x in fw.graph.value(p).data() {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn odd_width_or_bad_heads_rejected() {
        assert!(TransformerConfig {
            d: 10,
            heads: 4,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(TransformerConfig {
            d: 9,
            heads: 3,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(tiny().validate().is_ok());
    }
}
