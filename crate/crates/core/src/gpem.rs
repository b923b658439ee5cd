//! Geometric prior enhancement: deformable multi-scale refinement of the
//! visual pyramid, per-scale gated fusion with geometric features, and a
//! transformer bridge that updates the object queries.
//!
//! All three stages are written against [`Graph`] so their gradients come
//! from the same code path as the forward pass. Parameter names follow
//! `refine.*`, `fuse.*`, `bridge.*` and `queries.*`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::resize::bilinear_matrix;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpemConfig {
    /// Shared latent width `C_s`.
    pub latent_dim: usize,
    pub num_queries: usize,
    pub num_layers: usize,
    /// Sampling points per level in the deformable attention.
    pub num_points: usize,
}

impl Default for GpemConfig {
    fn default() -> Self {
        Self { latent_dim: 64, num_queries: 100, num_layers: 2, num_points: 4 }
    }
}

impl GpemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.num_queries == 0 || self.num_points == 0 {
            return Err(Error::Config("latent_dim, num_queries and num_points must be positive".into()));
        }
        Ok(())
    }
}

/// A pyramid level living in a graph.
#[derive(Clone, Copy, Debug)]
pub struct LevelVar {
    pub var: Var,
    pub height: usize,
    pub width: usize,
}

impl LevelVar {
    pub fn to_map(self, g: &Graph) -> FeatureMap {
        FeatureMap { height: self.height, width: self.width, features: g.value(self.var).clone() }
    }
}

pub fn pyramid_constants(g: &mut Graph, pyramid: &FeaturePyramid) -> Vec<LevelVar> {
    pyramid
        .levels
        .iter()
        .map(|l| LevelVar { var: g.constant(l.features.clone()), height: l.height, width: l.width })
        .collect()
}

/// Object queries and their positional embeddings, both `N_Q×C_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub vectors: Mat,
    pub positional: Mat,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.vectors.rows
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows == 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    pub vectors: Var,
    pub positional: Var,
}

/// `F_m`: all refined levels projected to `C_s` and summed at level-0 resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedVisual {
    pub height: usize,
    pub width: usize,
    pub features: Mat,
}

pub(crate) fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    Mat::randn(rows, cols, (1.0 / rows as f64).sqrt(), rng)
}

pub fn init_refine_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    channels: &[usize],
    cfg: &GpemConfig,
    rng: &mut R,
) {
    let levels = channels.len();
    let lp = levels * cfg.num_points;
    let cs = cfg.latent_dim;
    for (l, &c) in channels.iter().enumerate() {
        let mut bias = Mat::zeros(1, 2 * lp);
        for j in 0..lp {
            let p = j % cfg.num_points;
            let theta = std::f64::consts::TAU * p as f64 / cfg.num_points as f64;
            let jitter: f64 = rng.random_range(-0.1..0.1);
            bias.data[2 * j] = theta.cos() + jitter;
            bias.data[2 * j + 1] = theta.sin() - jitter;
        }
        store.insert(format!("refine.{l}.offset.w"), Mat::randn(c, 2 * lp, 0.01, rng));
        store.insert(format!("refine.{l}.offset.b"), bias);
        store.insert(format!("refine.{l}.attn.w"), Mat::randn(c, lp, 0.01, rng));
        store.insert(format!("refine.{l}.attn.b"), Mat::zeros(1, lp));
        store.insert(format!("refine.{l}.value.w"), glorot(c, cs, rng));
        store.insert(format!("refine.{l}.out.w"), Mat::randn(cs, c, 0.1 / (cs as f64).sqrt(), rng));
        store.insert(format!("refine.{l}.out.b"), Mat::zeros(1, c));
        store.insert(format!("refine.{l}.fm.w"), glorot(c, cs, rng));
    }
}

pub fn init_fusion_params<R: Rng + ?Sized>(
    store: &mut ParamStore,
    visual_channels: &[usize],
    geo_channels: &[usize],
    cfg: &GpemConfig,
    rng: &mut R,
) {
    let cs = cfg.latent_dim;
    for (l, (&cv, &cg)) in visual_channels.iter().zip(geo_channels).enumerate() {
        store.insert(format!("fuse.{l}.w_v"), glorot(cv, cs, rng));
        store.insert(format!("fuse.{l}.w_g"), glorot(cg, cs, rng));
        store.insert(format!("fuse.{l}.gate.w"), glorot(2 * cs, cs, rng));
        store.insert(format!("fuse.{l}.gate.b"), Mat::zeros(1, cs));
        store.insert(format!("fuse.{l}.mlp1.w"), glorot(cs, cs, rng));
        store.insert(format!("fuse.{l}.mlp1.b"), Mat::zeros(1, cs));
        store.insert(format!("fuse.{l}.mlp2.w"), glorot(cs, cs, rng));
        store.insert(format!("fuse.{l}.mlp2.b"), Mat::zeros(1, cs));
    }
}

pub fn init_bridge_params<R: Rng + ?Sized>(store: &mut ParamStore, levels: usize, cfg: &GpemConfig, rng: &mut R) {
    let cs = cfg.latent_dim;
    store.insert("queries.embed", Mat::randn(cfg.num_queries, cs, 1.0, rng));
    store.insert("queries.pos", Mat::randn(cfg.num_queries, cs, 0.1, rng));
    store.insert("bridge.level_embed", Mat::randn(levels, cs, 0.1, rng));
    for i in 0..cfg.num_layers {
        for block in ["cross", "self"] {
            for w in ["wq", "wk", "wv"] {
                store.insert(format!("bridge.{i}.{block}.{w}"), glorot(cs, cs, rng));
            }
            store.insert(format!("bridge.{i}.{block}.wo"), Mat::randn(cs, cs, 0.5 / (cs as f64).sqrt(), rng));
        }
        store.insert(format!("bridge.{i}.ffn1.w"), glorot(cs, cs, rng));
        store.insert(format!("bridge.{i}.ffn1.b"), Mat::zeros(1, cs));
        store.insert(format!("bridge.{i}.ffn2.w"), Mat::randn(cs, cs, 0.5 / (cs as f64).sqrt(), rng));
        store.insert(format!("bridge.{i}.ffn2.b"), Mat::zeros(1, cs));
    }
}

pub(crate) fn linear(g: &mut Graph, x: Var, p: &Bound, prefix: &str) -> Var {
    let h = g.matmul(x, p.var(&format!("{prefix}.w")));
    g.add_row(h, p.var(&format!("{prefix}.b")))
}

fn check_weight_rows(g: &Graph, p: &Bound, name: &str, expected: usize) -> Result<()> {
    let found = g.value(p.var(name)).rows;
    if found != expected {
        return Err(Error::Dimension { what: name.to_string(), expected, found });
    }
    Ok(())
}

fn count_levels(p: &Bound, prefix: &str, probe: &str) -> usize {
    (0..).take_while(|l| p.has(&format!("{prefix}.{l}.{probe}"))).count()
}

/// Reference point of every location of an `h×w` level, expressed in the
/// pixel coordinates of an `h2×w2` level.
fn reference_points(h: usize, w: usize, h2: usize, w2: usize) -> Mat {
    Mat::from_fn(h * w, 2, |i, c| {
        let (y, x) = (i / w, i % w);
        if c == 0 {
            (x as f64 + 0.5) / w as f64 * w2 as f64 - 0.5
        } else {
            (y as f64 + 0.5) / h as f64 * h2 as f64 - 0.5
        }
    })
}

/// Single-head deformable attention over all levels with a residual path,
/// followed by the `F_m` aggregation.
pub fn refine_multiscale(
    g: &mut Graph,
    p: &Bound,
    pyramid: &[LevelVar],
    num_points: usize,
) -> Result<(Vec<LevelVar>, LevelVar)> {
    let levels = pyramid.len();
    let declared = count_levels(p, "refine", "offset.w");
    if declared != levels {
        return Err(Error::Config(format!(
            "refinement parameters cover {declared} levels but the pyramid has {levels}"
        )));
    }
    let lp = levels * num_points;
    for (l, lv) in pyramid.iter().enumerate() {
        let c = g.value(lv.var).cols;
        for name in ["offset.w", "attn.w", "value.w", "fm.w"] {
            check_weight_rows(g, p, &format!("refine.{l}.{name}"), c)?;
        }
        let offsets = g.value(p.var(&format!("refine.{l}.offset.w"))).cols;
        if offsets != 2 * lp {
            return Err(Error::Dimension { what: format!("refine.{l}.offset.w columns"), expected: 2 * lp, found: offsets });
        }
    }
    let values: Vec<Var> = (0..levels)
        .map(|l| g.matmul(pyramid[l].var, p.var(&format!("refine.{l}.value.w"))))
        .collect();

    let mut refined = Vec::with_capacity(levels);
    for (l, lv) in pyramid.iter().enumerate() {
        let offsets = linear(g, lv.var, p, &format!("refine.{l}.offset"));
        let logits = linear(g, lv.var, p, &format!("refine.{l}.attn"));
        let weights = g.softmax_rows(logits);
        let mut acc: Option<Var> = None;
        for (l2, target) in pyramid.iter().enumerate() {
            let refs = g.constant(reference_points(lv.height, lv.width, target.height, target.width));
            for pt in 0..num_points {
                let j = l2 * num_points + pt;
                let d = g.slice_cols(offsets, 2 * j, 2);
                let locs = g.add(refs, d);
                let sampled = g.bilinear_sample(values[l2], locs, target.height, target.width);
                let a = g.slice_cols(weights, j, 1);
                let term = g.mul_col(sampled, a);
                acc = Some(match acc {
                    Some(prev) => g.add(prev, term),
                    None => term,
                });
            }
        }
        let attended = acc.expect("at least one sampling point");
        let out = linear(g, attended, p, &format!("refine.{l}.out"));
        let var = g.add(lv.var, out);
        refined.push(LevelVar { var, height: lv.height, width: lv.width });
    }

    let (h0, w0) = (refined[0].height, refined[0].width);
    let mut fm: Option<Var> = None;
    for (l, lv) in refined.iter().enumerate() {
        let proj = g.matmul(lv.var, p.var(&format!("refine.{l}.fm.w")));
        let up = if (lv.height, lv.width) == (h0, w0) {
            proj
        } else {
            let u = g.constant(bilinear_matrix(lv.height, lv.width, h0, w0));
            g.matmul(u, proj)
        };
        fm = Some(match fm {
            Some(prev) => g.add(prev, up),
            None => up,
        });
    }
    let fm = LevelVar { var: fm.expect("nonempty pyramid"), height: h0, width: w0 };
    Ok((refined, fm))
}

/// Per-level projections and the sigmoid gate: returns `(α, F̂_V + α ⊙ F̂_G)`.
pub fn gated_blend(g: &mut Graph, p: &Bound, level: usize, visual: Var, geometric: Var) -> (Var, Var) {
    let fv = g.matmul(visual, p.var(&format!("fuse.{level}.w_v")));
    let fg = g.matmul(geometric, p.var(&format!("fuse.{level}.w_g")));
    let cat = g.concat_cols(&[fv, fg]);
    let pre = linear(g, cat, p, &format!("fuse.{level}.gate"));
    let alpha = g.sigmoid(pre);
    let gated = g.mul(alpha, fg);
    (alpha, g.add(fv, gated))
}

fn fusion_mlp(g: &mut Graph, p: &Bound, level: usize, x: Var) -> Var {
    let h = linear(g, x, p, &format!("fuse.{level}.mlp1"));
    let h = g.gelu(h);
    linear(g, h, p, &format!("fuse.{level}.mlp2"))
}

pub fn fuse_visual_geometric(
    g: &mut Graph,
    p: &Bound,
    refined: &[LevelVar],
    geo: &[LevelVar],
) -> Result<Vec<LevelVar>> {
    if refined.len() != geo.len() {
        return Err(Error::Alignment {
            level: refined.len().min(geo.len()),
            detail: format!("{} visual levels vs {} geometric levels", refined.len(), geo.len()),
        });
    }
    let declared = count_levels(p, "fuse", "w_v");
    if declared != refined.len() {
        return Err(Error::Config(format!(
            "fusion parameters cover {declared} levels but the pyramid has {}",
            refined.len()
        )));
    }
    let mut out = Vec::with_capacity(refined.len());
    for (l, (v, gl)) in refined.iter().zip(geo).enumerate() {
        if (v.height, v.width) != (gl.height, gl.width) {
            return Err(Error::Alignment {
                level: l,
                detail: format!("visual {}x{} vs geometric {}x{}", v.height, v.width, gl.height, gl.width),
            });
        }
        check_weight_rows(g, p, &format!("fuse.{l}.w_v"), g.value(v.var).cols)?;
        check_weight_rows(g, p, &format!("fuse.{l}.w_g"), g.value(gl.var).cols)?;
        let (_, blend) = gated_blend(g, p, l, v.var, gl.var);
        let var = fusion_mlp(g, p, l, blend);
        out.push(LevelVar { var, height: v.height, width: v.width });
    }
    Ok(out)
}

/// Scaled dot-product attention with bias-free projections.
fn attention(g: &mut Graph, p: &Bound, prefix: &str, queries: Var, keys: Var, values: Var) -> Var {
    let q = g.matmul(queries, p.var(&format!("{prefix}.wq")));
    let k = g.matmul(keys, p.var(&format!("{prefix}.wk")));
    let v = g.matmul(values, p.var(&format!("{prefix}.wv")));
    let d = g.value(q).cols as f64;
    let scores = g.matmul_nt(q, k);
    let scores = g.scale(scores, 1.0 / d.sqrt());
    let a = g.softmax_rows(scores);
    let mixed = g.matmul(a, v);
    g.matmul(mixed, p.var(&format!("{prefix}.wo")))
}

/// Transformer bridge. Each layer lets the queries cross-attend to every
/// level in turn (residual updates, so the per-scale contributions sum),
/// then applies self-attention and a feed-forward block.
pub fn bridge_queries(g: &mut Graph, p: &Bound, fused: &[LevelVar], queries: QueryVars, num_layers: usize) -> Result<Var> {
    let mut q = queries.vectors;
    if num_layers == 0 {
        return Ok(q);
    }
    let level_embed = p.var("bridge.level_embed");
    let declared_levels = g.value(level_embed).rows;
    if declared_levels < fused.len() {
        return Err(Error::Config(format!(
            "bridge level embedding has {declared_levels} rows for {} levels",
            fused.len()
        )));
    }
    let cs = g.value(q).cols;
    for (l, lv) in fused.iter().enumerate() {
        let c = g.value(lv.var).cols;
        if c != cs {
            return Err(Error::Dimension { what: format!("fused level {l} width"), expected: cs, found: c });
        }
    }
    let keys: Vec<Var> = fused
        .iter()
        .enumerate()
        .map(|(l, lv)| {
            let e = g.gather_rows(level_embed, &[l]);
            g.add_row(lv.var, e)
        })
        .collect();
    for i in 0..num_layers {
        if !p.has(&format!("bridge.{i}.cross.wq")) {
            return Err(Error::Config(format!("bridge has no parameters for layer {i}")));
        }
        for (lv, &k) in fused.iter().zip(&keys) {
            let qp = g.add(q, queries.positional);
            let upd = attention(g, p, &format!("bridge.{i}.cross"), qp, k, lv.var);
            q = g.add(q, upd);
        }
        let qp = g.add(q, queries.positional);
        let upd = attention(g, p, &format!("bridge.{i}.self"), qp, qp, q);
        q = g.add(q, upd);
        let h = linear(g, q, p, &format!("bridge.{i}.ffn1"));
        let h = g.gelu(h);
        let upd = linear(g, h, p, &format!("bridge.{i}.ffn2"));
        q = g.add(q, upd);
    }
    Ok(q)
}

pub fn query_vars(p: &Bound) -> QueryVars {
    QueryVars { vectors: p.var("queries.embed"), positional: p.var("queries.pos") }
}

// Value-level wrappers: evaluate one stage on plain arrays.

pub fn refine_multiscale_values(
    pyramid: &FeaturePyramid,
    params: &ParamStore,
    num_points: usize,
) -> Result<(FeaturePyramid, AggregatedVisual)> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let levels = pyramid_constants(&mut g, pyramid);
    let (refined, fm) = refine_multiscale(&mut g, &p, &levels, num_points)?;
    let out = FeaturePyramid {
        levels: refined.iter().map(|l| l.to_map(&g)).collect(),
        scale_factors: pyramid.scale_factors.clone(),
    };
    let fm = AggregatedVisual { height: fm.height, width: fm.width, features: g.value(fm.var).clone() };
    Ok((out, fm))
}

pub fn fuse_visual_geometric_values(
    refined: &FeaturePyramid,
    geo: &FeaturePyramid,
    params: &ParamStore,
) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let rv = pyramid_constants(&mut g, refined);
    let gv = pyramid_constants(&mut g, geo);
    let fused = fuse_visual_geometric(&mut g, &p, &rv, &gv)?;
    Ok(FeaturePyramid {
        levels: fused.iter().map(|l| l.to_map(&g)).collect(),
        scale_factors: refined.scale_factors.clone(),
    })
}

pub fn bridge_queries_values(
    fused: &FeaturePyramid,
    queries: &QuerySet,
    params: &ParamStore,
    num_layers: usize,
) -> Result<QuerySet> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let fv = pyramid_constants(&mut g, fused);
    let qv = QueryVars { vectors: g.constant(queries.vectors.clone()), positional: g.constant(queries.positional.clone()) };
    let out = bridge_queries(&mut g, &p, &fv, qv, num_layers)?;
    Ok(QuerySet { vectors: g.value(out).clone(), positional: queries.positional.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use crate::tensor::{gelu, sigmoid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_pyramid(sizes: &[(usize, usize)], channels: &[usize], seed: u64) -> FeaturePyramid {
        let mut r = rng(seed);
        FeaturePyramid {
            levels: sizes
                .iter()
                .zip(channels)
                .map(|(&(h, w), &c)| FeatureMap { height: h, width: w, features: Mat::randn(h * w, c, 1.0, &mut r) })
                .collect(),
            scale_factors: (0..sizes.len()).map(|l| 4 << l).collect(),
        }
    }

    #[test]
    fn refinement_preserves_shapes() {
        let cfg = GpemConfig { latent_dim: 16, ..GpemConfig::default() };
        let channels = [8, 12, 16];
        let pyr = random_pyramid(&[(8, 8), (4, 4), (2, 2)], &channels, 1);
        let mut store = ParamStore::new();
        init_refine_params(&mut store, &channels, &cfg, &mut rng(2));
        let (out, fm) = refine_multiscale_values(&pyr, &store, cfg.num_points).unwrap();
        assert_eq!(out.spatial_sizes(), pyr.spatial_sizes());
        for (a, b) in out.levels.iter().zip(&pyr.levels) {
            assert_eq!(a.features.shape(), b.features.shape());
        }
        assert_eq!((fm.height, fm.width, fm.features.cols), (8, 8, 16));
        assert!(out.is_finite() && fm.features.is_finite());
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let cfg = GpemConfig { latent_dim: 8, ..GpemConfig::default() };
        let channels = [4, 6];
        let pyr = random_pyramid(&[(4, 4), (2, 2)], &channels, 3);
        let mut store = ParamStore::new();
        init_refine_params(&mut store, &channels, &cfg, &mut rng(4));
        for l in 0..2 {
            let names = [format!("refine.{l}.offset.w"), format!("refine.{l}.value.w")];
            for n in names {
                let m = store.get_mut(&n).unwrap();
                *m = Mat::zeros(m.rows, m.cols);
            }
        }
        let (out, _) = refine_multiscale_values(&pyr, &store, cfg.num_points).unwrap();
        assert_eq!(out.levels, pyr.levels);
    }

    #[test]
    fn single_level_single_point_is_a_per_pixel_linear_map() {
        let cfg = GpemConfig { latent_dim: 5, num_points: 1, ..GpemConfig::default() };
        let pyr = random_pyramid(&[(4, 4)], &[8], 5);
        let mut store = ParamStore::new();
        init_refine_params(&mut store, &[8], &cfg, &mut rng(6));
        store.insert("refine.0.offset.w", Mat::zeros(8, 2));
        store.insert("refine.0.offset.b", Mat::zeros(1, 2));
        let out_b = Mat::randn(1, 8, 0.3, &mut rng(7));
        store.insert("refine.0.out.b", out_b.clone());
        let (out, _) = refine_multiscale_values(&pyr, &store, 1).unwrap();

        // dense oracle: x + x·W_val·W_out + b, pixel by pixel
        let x = &pyr.levels[0].features;
        let wv = store.get("refine.0.value.w").unwrap();
        let wo = store.get("refine.0.out.w").unwrap();
        for i in 0..16 {
            for c in 0..8 {
                let mut acc = x.get(i, c) + out_b.data[c];
                for k in 0..5 {
                    let mut v = 0.0;
                    for j in 0..8 {
                        v += x.get(i, j) * wv.get(j, k);
                    }
                    acc += v * wo.get(k, c);
                }
                assert!((acc - out.levels[0].features.get(i, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn refinement_level_mismatch_is_a_config_error() {
        let cfg = GpemConfig { latent_dim: 8, ..GpemConfig::default() };
        let mut store = ParamStore::new();
        init_refine_params(&mut store, &[4, 6], &cfg, &mut rng(8));
        let pyr = random_pyramid(&[(4, 4), (2, 2), (1, 1)], &[4, 6, 6], 9);
        assert!(matches!(refine_multiscale_values(&pyr, &store, 4), Err(Error::Config(_))));
    }

    fn fusion_setup(cs: usize, seed: u64) -> (FeaturePyramid, FeaturePyramid, ParamStore) {
        let cfg = GpemConfig { latent_dim: cs, ..GpemConfig::default() };
        let v = random_pyramid(&[(2, 2), (1, 1)], &[6, 7], seed);
        let gp = random_pyramid(&[(2, 2), (1, 1)], &[5, 3], seed + 1);
        let mut store = ParamStore::new();
        init_fusion_params(&mut store, &[6, 7], &[5, 3], &cfg, &mut rng(seed + 2));
        for l in 0..2 {
            store.insert(format!("fuse.{l}.gate.b"), Mat::randn(1, cs, 0.5, &mut rng(seed + 3 + l as u64)));
            store.insert(format!("fuse.{l}.mlp1.b"), Mat::randn(1, cs, 0.5, &mut rng(seed + 5 + l as u64)));
        }
        (v, gp, store)
    }

    // Scalar-loop evaluation of projection, gate, blend and MLP.
    fn scalar_fusion(v: &FeatureMap, gm: &FeatureMap, s: &ParamStore, l: usize) -> Vec<Vec<f64>> {
        let get = |n: &str| s.get(&format!("fuse.{l}.{n}")).unwrap().clone();
        let (wv, wg, ga, gb) = (get("w_v"), get("w_g"), get("gate.w"), get("gate.b"));
        let (m1, b1, m2, b2) = (get("mlp1.w"), get("mlp1.b"), get("mlp2.w"), get("mlp2.b"));
        let cs = wv.cols;
        let mut rows = Vec::new();
        for i in 0..v.features.rows {
            let mut fv = vec![0.0; cs];
            let mut fg = vec![0.0; cs];
            for c in 0..cs {
                for j in 0..wv.rows {
                    fv[c] += v.features.get(i, j) * wv.get(j, c);
                }
                for j in 0..wg.rows {
                    fg[c] += gm.features.get(i, j) * wg.get(j, c);
                }
            }
            let mut blend = vec![0.0; cs];
            for c in 0..cs {
                let mut z = gb.data[c];
                for j in 0..cs {
                    z += fv[j] * ga.get(j, c) + fg[j] * ga.get(cs + j, c);
                }
                blend[c] = fv[c] + sigmoid(z) * fg[c];
            }
            let mut h = vec![0.0; cs];
            for c in 0..cs {
                let mut z = b1.data[c];
                for j in 0..cs {
                    z += blend[j] * m1.get(j, c);
                }
                h[c] = gelu(z);
            }
            let mut out = vec![0.0; cs];
            for c in 0..cs {
                let mut z = b2.data[c];
                for j in 0..cs {
                    z += h[j] * m2.get(j, c);
                }
                out[c] = z;
            }
            rows.push(out);
        }
        rows
    }

    #[test]
    fn fusion_matches_scalar_loop() {
        let (v, gp, store) = fusion_setup(4, 10);
        let out = fuse_visual_geometric_values(&v, &gp, &store).unwrap();
        for l in 0..2 {
            let oracle = scalar_fusion(&v.levels[l], &gp.levels[l], &store, l);
            for (i, row) in oracle.iter().enumerate() {
                for (c, x) in row.iter().enumerate() {
                    assert!((x - out.levels[l].features.get(i, c)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn misaligned_modalities_name_the_level() {
        let (v, _, store) = fusion_setup(4, 20);
        let gp = random_pyramid(&[(2, 2), (2, 1)], &[5, 3], 21);
        match fuse_visual_geometric_values(&v, &gp, &store) {
            Err(Error::Alignment { level, .. }) => assert_eq!(level, 1),
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn gate_is_strictly_inside_unit_interval() {
        let (v, gp, store) = fusion_setup(4, 30);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let vv = g.constant(v.levels[0].features.clone());
        let gv = g.constant(gp.levels[0].features.clone());
        let (alpha, _) = gated_blend(&mut g, &p, 0, vv, gv);
        assert!(g.value(alpha).data.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn bridge_with_zero_layers_is_identity() {
        let cfg = GpemConfig { latent_dim: 6, num_queries: 5, num_layers: 0, ..GpemConfig::default() };
        let fused = random_pyramid(&[(2, 2), (1, 1)], &[6, 6], 40);
        let mut store = ParamStore::new();
        init_bridge_params(&mut store, 2, &cfg, &mut rng(41));
        let q = QuerySet { vectors: Mat::randn(5, 6, 1.0, &mut rng(42)), positional: Mat::zeros(5, 6) };
        let out = bridge_queries_values(&fused, &q, &store, 0).unwrap();
        assert_eq!(out, q);
    }

    #[test]
    fn single_query_single_token_closed_form() {
        let cs = 4;
        let cfg = GpemConfig { latent_dim: cs, num_queries: 1, num_layers: 1, ..GpemConfig::default() };
        let fused = random_pyramid(&[(1, 1)], &[cs], 50);
        let mut store = ParamStore::new();
        init_bridge_params(&mut store, 1, &cfg, &mut rng(51));
        store.insert("bridge.0.ffn1.b", Mat::randn(1, cs, 0.2, &mut rng(52)));
        store.insert("bridge.0.ffn2.b", Mat::randn(1, cs, 0.2, &mut rng(53)));
        let q = QuerySet { vectors: Mat::randn(1, cs, 1.0, &mut rng(54)), positional: Mat::randn(1, cs, 1.0, &mut rng(55)) };
        let out = bridge_queries_values(&fused, &q, &store, 1).unwrap();

        // one key: softmax weight 1, so each attention reduces to value·Wv·Wo
        let w = |n: &str| store.get(n).unwrap().clone();
        let f = &fused.levels[0].features;
        let mut x = q.vectors.clone();
        x.add_assign(&f.matmul(&w("bridge.0.cross.wv")).matmul(&w("bridge.0.cross.wo")));
        let sa = x.matmul(&w("bridge.0.self.wv")).matmul(&w("bridge.0.self.wo"));
        x.add_assign(&sa);
        let mut h = x.matmul(&w("bridge.0.ffn1.w"));
        h.add_assign(&w("bridge.0.ffn1.b"));
        let h = h.map(gelu);
        let mut f2 = h.matmul(&w("bridge.0.ffn2.w"));
        f2.add_assign(&w("bridge.0.ffn2.b"));
        x.add_assign(&f2);
        assert!(x.max_abs_diff(&out.vectors) < 1e-6);
    }

    #[test]
    fn default_query_count_produces_finite_output() {
        let cfg = GpemConfig { latent_dim: 16, ..GpemConfig::default() };
        let fused = random_pyramid(&[(4, 4), (2, 2), (1, 1)], &[16, 16, 16], 60);
        let mut store = ParamStore::new();
        init_bridge_params(&mut store, 3, &cfg, &mut rng(61));
        let q = QuerySet {
            vectors: store.get("queries.embed").unwrap().clone(),
            positional: store.get("queries.pos").unwrap().clone(),
        };
        let out = bridge_queries_values(&fused, &q, &store, cfg.num_layers).unwrap();
        assert_eq!(out.vectors.shape(), (100, 16));
        assert!(out.vectors.is_finite());
    }

    #[test]
    fn gpem_gradients_match_finite_differences() {
        let cfg = GpemConfig { latent_dim: 4, num_queries: 3, num_layers: 1, num_points: 2 };
        let channels = [3, 5];
        let vis = random_pyramid(&[(3, 3), (2, 2)], &channels, 70);
        let geo = random_pyramid(&[(3, 3), (2, 2)], &channels, 71);
        let mut store = ParamStore::new();
        let mut r = rng(72);
        init_refine_params(&mut store, &channels, &cfg, &mut r);
        init_fusion_params(&mut store, &channels, &channels, &cfg, &mut r);
        init_bridge_params(&mut store, 2, &cfg, &mut r);
        // nonzero biases everywhere so their gradients are exercised
        let names: Vec<String> = store.names().filter(|n| n.ends_with(".b")).cloned().collect();
        for n in names {
            let m = store.get_mut(&n).unwrap();
            for x in m.data.iter_mut() {
                *x += r.random_range(-0.3..0.3);
            }
        }
        let probe = Mat::randn(3, 4, 1.0, &mut r);
        let report = check_gradients(&store, &GradCheckConfig::default(), |g, p| {
            let v = pyramid_constants(g, &vis);
            let gl = pyramid_constants(g, &geo);
            let (refined, _) = refine_multiscale(g, p, &v, cfg.num_points).unwrap();
            let fused = fuse_visual_geometric(g, p, &refined, &gl).unwrap();
            let q = query_vars(p);
            let out = bridge_queries(g, p, &fused, q, cfg.num_layers).unwrap();
            let w = g.constant(probe.clone());
            let prod = g.mul(out, w);
            g.sum_all(prod)
        });
        assert!(report.passed(), "{}", report.summary());
        assert_eq!(report.params_checked, store.len());
    }
}
