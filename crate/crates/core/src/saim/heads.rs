//! Global-token fusion, the dot-product mask head and the cosine class head.
//! Parameters live under `saim.*`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::GlobalDepthToken;
use crate::error::{Error, Result};
use crate::gpem::{glorot, linear, AggregatedVisual, QuerySet};
use crate::params::{Bound, ParamStore};
use crate::tensor::Mat;

/// How per-query evidence is pooled from `F_f` before classification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Average weighted by the query's own mask probabilities.
    #[default]
    MaskWeighted,
    /// Plain spatial mean, shared by all queries.
    GlobalMean,
}

pub const INIT_LOGIT_SCALE: f64 = 10.0;

pub fn init_head_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    token_dim: usize,
    latent_dim: usize,
    text_dim: usize,
    rng: &mut R,
) {
    store.insert("saim.global.w", Mat::randn(token_dim, latent_dim, 0.1 / (token_dim as f64).sqrt(), rng));
    store.insert("saim.global.b", Mat::zeros(1, latent_dim));
    store.insert("saim.mask.1.w", glorot(latent_dim, latent_dim, rng));
    store.insert("saim.mask.1.b", Mat::zeros(1, latent_dim));
    store.insert("saim.mask.2.w", glorot(latent_dim, latent_dim, rng));
    store.insert("saim.mask.2.b", Mat::zeros(1, latent_dim));
    store.insert("saim.class.w", glorot(latent_dim, text_dim, rng));
    store.insert("saim.class.b", Mat::zeros(1, text_dim));
    store.insert("saim.logit_scale", Mat::filled(1, 1, INIT_LOGIT_SCALE.ln()));
}

/// `F_f = F_m + broadcast(g·W + b)`.
pub fn fuse_global(g: &mut Graph, p: &Bound, token: Var, fm: Var) -> Var {
    let proj = linear(g, token, p, "saim.global");
    g.add_row(fm, proj)
}

/// `N_Q×HW` mask logits: a two-layer embedding of each query dotted with
/// every pixel of `F_f`.
pub fn predict_masks(g: &mut Graph, p: &Bound, queries: Var, ff: Var) -> Var {
    let h = linear(g, queries, p, "saim.mask.1");
    let h = g.gelu(h);
    let e = linear(g, h, p, "saim.mask.2");
    g.matmul_nt(e, ff)
}

/// Per-query feature `f_q`: pooled evidence plus the query, projected to the
/// text width.
pub fn query_features(g: &mut Graph, p: &Bound, queries: Var, ff: Var, mask_logits: Var, pooling: Pooling) -> Var {
    let combined = match pooling {
        Pooling::MaskWeighted => {
            let w = g.sigmoid(mask_logits);
            let num = g.matmul(w, ff);
            let den = g.sum_rows(w);
            let pooled = g.div_col(num, den);
            g.add(pooled, queries)
        }
        Pooling::GlobalMean => {
            let n = g.value(ff).rows as f64;
            let s = g.sum_cols(ff);
            let mean = g.scale(s, 1.0 / n);
            g.add_row(queries, mean)
        }
    };
    linear(g, combined, p, "saim.class")
}

/// `scale·⟨f̂_q, E_k⟩` with `scale` a `1×1` node (the inverse temperature).
pub fn cosine_logits(g: &mut Graph, fq: Var, class_emb: Var, scale: Var) -> Var {
    let unit = g.normalize_rows(fq);
    let cos = g.matmul_nt(unit, class_emb);
    g.mul_scalar_var(cos, scale)
}

/// Class logits with the learnable inverse temperature `exp(saim.logit_scale)`.
pub fn classify_queries(
    g: &mut Graph,
    p: &Bound,
    queries: Var,
    ff: Var,
    mask_logits: Var,
    class_emb: Var,
    pooling: Pooling,
) -> Var {
    let fq = query_features(g, p, queries, ff, mask_logits, pooling);
    let scale = g.exp(p.var("saim.logit_scale"));
    cosine_logits(g, fq, class_emb, scale)
}

// Value-level forms.

pub fn fuse_global_values(token: &GlobalDepthToken, fm: &AggregatedVisual, params: &ParamStore) -> Mat {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let t = g.constant(token.as_row());
    let f = g.constant(fm.features.clone());
    let out = fuse_global(&mut g, &p, t, f);
    g.value(out).clone()
}

pub fn predict_masks_values(queries: &QuerySet, ff: &Mat, params: &ParamStore) -> Mat {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let q = g.constant(queries.vectors.clone());
    let f = g.constant(ff.clone());
    let out = predict_masks(&mut g, &p, q, f);
    g.value(out).clone()
}

/// `(1/temperature)·⟨normalize(f_q), E_k⟩` for given per-query features.
pub fn cosine_head(fq: &Mat, class_emb: &Mat, temperature: f64) -> Result<Mat> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if fq.cols != class_emb.cols {
        return Err(Error::Dimension { what: "class embedding width".into(), expected: fq.cols, found: class_emb.cols });
    }
    Ok(fq.normalize_rows().matmul_nt(class_emb).scale(1.0 / temperature))
}

/// Full head on plain arrays with an explicit temperature.
pub fn classify_queries_values(
    ff: &Mat,
    queries: &QuerySet,
    class_emb: &Mat,
    temperature: f64,
    params: &ParamStore,
    pooling: Pooling,
) -> Result<Mat> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let q = g.constant(queries.vectors.clone());
    let f = g.constant(ff.clone());
    let m = predict_masks(&mut g, &p, q, f);
    let fq = query_features(&mut g, &p, q, f, m, pooling);
    cosine_head(g.value(fq), class_emb, temperature)
}
