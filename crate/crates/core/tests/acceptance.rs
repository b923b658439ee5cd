//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so every criterion executes even when an earlier one fails.
//!
//! Criterion 4 cannot pass as stated: one of the reference templates has two
//! placeholders, so string equality and "one placeholder each" exclude each
//! other. It is listed in `KNOWN_FAILURES` and still prints FAIL. The process
//! exits nonzero on any other failure, or if a known failure stops failing
//! for the recorded reason.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ovseg::autograd::Graph;
use ovseg::cli;
use ovseg::data::{
    build_class_split, make_task_config, rle_encode, synth_fixture, AnnotationRecord, BinaryMask, CategoryRecord,
    ClassSplit, DatasetIndex, ImageRecord, Segmentation, SynthSpec, TaskMode, ANNOTATION_FILE,
};
use ovseg::encoders::{EncoderConfig, EncoderSet, FeatureMap, FeaturePyramid, TemplateEmbeddings};
use ovseg::eval::{compute_ap, group_metrics, iou_thresholds, ClassAp, EvalReport, InstancePrediction};
use ovseg::gpem::{fuse_visual_geometric_values, init_fusion_params, GpemConfig};
use ovseg::gradcheck::{check_gradients, GradCheckConfig};
use ovseg::losses::{
    assign_from_cost, classification_loss_value, mask_loss_value, total_loss, Assignment, ClassLoss, LossConfig,
    MatcherConfig, TargetSet,
};
use ovseg::model::{encode_frozen, forward, HeadConfig, Model, ModelConfig};
use ovseg::params::ParamStore;
use ovseg::saim::{
    build_prompt_bank, select_templates_mean_all, select_templates_mixed, select_templates_weighted,
    weighted_template_weights, MeanSimilarity, SelectionConfig, Strategy,
};
use ovseg::tensor::{gelu, sigmoid, Mat};
use ovseg::trainer::{image_targets, Checkpoint};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// 1. Fusion oracle.

fn random_pyramid(sizes: &[(usize, usize)], channels: &[usize], r: &mut ChaCha8Rng) -> FeaturePyramid {
    let levels = sizes
        .iter()
        .zip(channels)
        .map(|(&(h, w), &c)| FeatureMap { height: h, width: w, features: Mat::randn(h * w, c, 1.0, r) })
        .collect();
    FeaturePyramid { levels, scale_factors: (0..sizes.len()).map(|l| 4 << l).collect() }
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w.cols).map(|c| (0..w.rows).map(|j| x[j] * w.get(j, c)).sum()).collect()
}

/// Per-pixel projection, sigmoid gate over the concatenated projections,
/// gated sum and two-layer GELU MLP, written as scalar loops.
fn fusion_oracle(v: &FeatureMap, gm: &FeatureMap, s: &ParamStore, l: usize) -> Vec<Vec<f64>> {
    let p = |n: &str| s.get(&format!("fuse.{l}.{n}")).unwrap();
    let mut out = Vec::new();
    for i in 0..v.features.rows {
        let fv = vecmat(v.features.row(i), p("w_v"));
        let fg = vecmat(gm.features.row(i), p("w_g"));
        let cat: Vec<f64> = fv.iter().chain(&fg).copied().collect();
        let z = vecmat(&cat, p("gate.w"));
        let blend: Vec<f64> =
            (0..fv.len()).map(|c| fv[c] + sigmoid(z[c] + p("gate.b").data[c]) * fg[c]).collect();
        let h: Vec<f64> =
            vecmat(&blend, p("mlp1.w")).iter().zip(&p("mlp1.b").data).map(|(a, b)| gelu(a + b)).collect();
        out.push(vecmat(&h, p("mlp2.w")).iter().zip(&p("mlp2.b").data).map(|(a, b)| a + b).collect());
    }
    out
}

/// `MLP(F̂_V + F̂_G)` when `with_geo`, else `MLP(F̂_V)`, through the same graph kernels.
fn fusion_closed_form(v: &FeatureMap, gm: &FeatureMap, s: &ParamStore, l: usize, with_geo: bool) -> Mat {
    let mut g = Graph::new();
    let c = |g: &mut Graph, n: &str| g.constant(s.get(&format!("fuse.{l}.{n}")).unwrap().clone());
    let vx = g.constant(v.features.clone());
    let gx = g.constant(gm.features.clone());
    let wv = c(&mut g, "w_v");
    let wg = c(&mut g, "w_g");
    let fv = g.matmul(vx, wv);
    let mut x = fv;
    if with_geo {
        let fg = g.matmul(gx, wg);
        x = g.add(fv, fg);
    }
    let (w1, b1, w2, b2) = (c(&mut g, "mlp1.w"), c(&mut g, "mlp1.b"), c(&mut g, "mlp2.w"), c(&mut g, "mlp2.b"));
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let o = g.matmul(h, w2);
    let o = g.add_row(o, b2);
    g.value(o).clone()
}

fn criterion_1() -> Outcome {
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let mut r = rng(100 + trial);
        let levels = r.random_range(1..=3);
        let sizes: Vec<(usize, usize)> = (0..levels).map(|l| (4 >> l.min(2), 3 >> l.min(1))).collect();
        let cv: Vec<usize> = (0..levels).map(|_| r.random_range(2..=6)).collect();
        let cg: Vec<usize> = (0..levels).map(|_| r.random_range(1..=5)).collect();
        let cs = r.random_range(2..=6);
        let v = random_pyramid(&sizes, &cv, &mut r);
        let gp = random_pyramid(&sizes, &cg, &mut r);
        let mut store = ParamStore::new();
        let cfg = GpemConfig { latent_dim: cs, ..GpemConfig::default() };
        init_fusion_params(&mut store, &cv, &cg, &cfg, &mut r);
        for l in 0..levels {
            for b in ["gate.b", "mlp1.b", "mlp2.b"] {
                store.insert(format!("fuse.{l}.{b}"), Mat::randn(1, cs, 0.5, &mut r));
            }
        }
        let out = ok(fuse_visual_geometric_values(&v, &gp, &store))?;
        for l in 0..levels {
            for (i, row) in fusion_oracle(&v.levels[l], &gp.levels[l], &store, l).iter().enumerate() {
                for (c, x) in row.iter().enumerate() {
                    worst = worst.max((x - out.levels[l].features.get(i, c)).abs());
                }
            }
        }
        ensure!(worst <= 1e-6, "trial {trial}: scalar-loop deviation {worst:e}");

        // Gate saturated open (α = 1) and shut (α = 0).
        for (bias, with_geo) in [(1e3, true), (-1e3, false)] {
            let mut sat = store.clone();
            for l in 0..levels {
                sat.insert(format!("fuse.{l}.gate.b"), Mat::filled(1, cs, bias));
            }
            let out = ok(fuse_visual_geometric_values(&v, &gp, &sat))?;
            for l in 0..levels {
                let want = fusion_closed_form(&v.levels[l], &gp.levels[l], &sat, l, with_geo);
                ensure!(
                    out.levels[l].features == want,
                    "trial {trial} level {l}: saturated gate (bias {bias}) differs from its closed form"
                );
            }
        }
    }
    Ok(format!("50 trials, max deviation {worst:.1e}; both saturation endpoints exact"))
}

// 2. Gradient suite.

fn criterion_2() -> Outcome {
    let spec = SynthSpec { n_images: 1, n_classes: 3, shapes_per_image: 2, image_size: 16 };
    let fixture = ok(synth_fixture(3, &spec))?;
    let vocab = fixture.index.category_names();
    let config = ModelConfig {
        encoder: EncoderConfig {
            levels: 3,
            strides: vec![4, 8, 16],
            channels: vec![4, 5, 6],
            embed_dim: 4,
            token_dim: 3,
            seed: 1,
            ..EncoderConfig::default()
        },
        gpem: GpemConfig { latent_dim: 4, num_queries: 4, num_layers: 1, num_points: 2 },
        heads: HeadConfig::default(),
    };
    let model = ok(Model::init(&config, 0))?;
    let encoders = ok(EncoderSet::from_config(&config.encoder))?;
    let feats = ok(encode_frozen(&encoders, &fixture.sample(0)))?;
    let (h0, w0) = feats.mask_size();
    let targets = ok(image_targets(&fixture.index, fixture.index.images[0].id, &vocab, h0, w0))?;
    ensure!(!targets.is_empty(), "fixture image has no target at mask resolution");
    let emb = Mat::randn(vocab.len(), config.encoder.embed_dim, 1.0, &mut rng(4)).normalize_rows();
    let report = check_gradients(&model.params, &GradCheckConfig::default(), |g, p| {
        let e = g.constant(emb.clone());
        let out = forward(g, p, &config, &feats, e).expect("forward");
        total_loss(g, out.class_logits, out.mask_logits, &targets, &LossConfig::default(), &MatcherConfig::default())
            .expect("loss")
            .total
    });
    ensure!(report.params_checked == model.params.len(), "only {} of {} params checked", report.params_checked, model.params.len());
    ensure!(report.passed(), "{}", report.summary());
    let worst = report.worst().map_or(0.0, |w| w.max_rel_err);
    Ok(format!(
        "{} parameters, {} entries, {} targets, worst relative error {worst:.1e}",
        report.params_checked,
        report.entries_checked,
        targets.len()
    ))
}

// 3. Template-selection oracles.

/// Indices whose rank (higher score first, lower index on ties) is below `n`.
fn rank_oracle(scores: &[f64], n: usize) -> BTreeSet<usize> {
    (0..scores.len())
        .filter(|&t| {
            let ahead = (0..scores.len()).filter(|&u| scores[u] > scores[t] || (scores[u] == scores[t] && u < t)).count();
            ahead < n
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut r = rng(7);
    for trial in 0..100 {
        let (b, k, t) = (r.random_range(1..=2), r.random_range(1..=5), r.random_range(1..=60));
        let d = r.random_range(3..=8);
        let tpl = TemplateEmbeddings {
            class_names: (0..k).map(|i| format!("c{i}")).collect(),
            template_ids: (0..t).map(|i| format!("t{i}")).collect(),
            dim: d,
            embeddings: Mat::randn(k * t, d, 1.0, &mut r).normalize_rows().data,
        };
        // Every fourth trial quantises scores so ties occur.
        let coarse = trial % 4 == 0;
        let values = (0..b * k * t)
            .map(|_| {
                let x: f64 = r.random_range(-1.0..1.0);
                if coarse { (x * 4.0).round() / 4.0 } else { x }
            })
            .collect();
        let mean = MeanSimilarity::new(b, k, t, values);
        let n = r.random_range(1..=t);
        let cfg = SelectionConfig {
            strategy: Strategy::Mixed,
            top_n: n,
            lambda: r.random_range(0.0..=1.0),
            alpha_enh: r.random_range(1.01..5.0),
            seed: 0,
        };
        let mixed = ok(select_templates_mixed(&mean, &tpl, &cfg))?;
        let weighted = ok(select_templates_weighted(&mean, &tpl, &cfg))?;
        for ki in 0..k {
            for bi in 0..b {
                let want = rank_oracle(mean.scores(bi, ki), n);
                for (name, out) in [("mixed", &mixed), ("weighted", &weighted)] {
                    let got: BTreeSet<usize> = out.selected[ki][bi].iter().copied().collect();
                    ensure!(got == want, "trial {trial} {name} k={ki} b={bi}: {got:?} vs oracle {want:?}");
                }
            }
            let w = weighted_template_weights(&mean, ki, &cfg);
            for bi in 0..b {
                let row = w.row(bi);
                ensure!(row.iter().all(|&x| x >= 0.0), "trial {trial}: negative weight");
                let s: f64 = row.iter().sum();
                ensure!((s - 1.0).abs() <= 1e-9, "trial {trial}: weights sum to {s}");
            }
        }
        let at_zero = ok(select_templates_mixed(&mean, &tpl, &SelectionConfig { lambda: 0.0, ..cfg.clone() }))?;
        let plain = select_templates_mean_all(&tpl);
        let dev = at_zero.vectors.max_abs_diff(&plain.vectors);
        ensure!(dev <= 1e-12, "trial {trial}: lambda 0 differs from the mean by {dev:e}");
        let full: Vec<Mat> = [0.0, 0.25, 0.5, 1.0]
            .iter()
            .map(|&lambda| select_templates_mixed(&mean, &tpl, &SelectionConfig { lambda, top_n: t, ..cfg.clone() }))
            .map(|e| e.map(|e| e.vectors))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        ensure!(full.windows(2).all(|p| p[0] == p[1]), "trial {trial}: N = T output depends on lambda");
    }
    Ok("100 trials; top-N sets, endpoints and weight normalisation hold".into())
}

// 4. Prompt-bank fidelity.

const EXPECTED_BANK: [(&str, [&str; 10]); 6] = [
    (
        "generic",
        [
            "a photo of a {}",
            "This is a photo of a {}",
            "There is a {} in the underwater scene",
            "a photo of a {} in {}",
            "a photo of a small {}",
            "a photo of a medium {}",
            "a photo of a large {}",
            "This is a photo of a small {}",
            "This is a photo of a medium {}",
            "This is a photo of a large {}",
        ],
    ),
    (
        "environment",
        [
            "a {} underwater",
            "a {} in the ocean",
            "a {} in the deep sea",
            "a {} near a coral reef",
            "a {} in murky underwater conditions",
            "a {} in a tropical sea",
            "a {} in a freshwater lake",
            "a {} in brackish water",
            "a {} in shallow coastal water",
            "a {} in open ocean water",
        ],
    ),
    (
        "medium/visibility",
        [
            "a {} in turbid blue-green water",
            "a {} in crystal-clear water",
            "a {} in highly murky water",
            "a {} in hazy underwater environment",
            "a {} in water filled with plankton",
            "a {} in low visibility conditions",
            "a {} in silted water",
            "a {} in cloudy water",
            "a {} in algae-rich water",
            "a {} in dark underwater conditions",
        ],
    ),
    (
        "lighting",
        [
            "a {} illuminated by artificial light underwater",
            "a {} glowing in bioluminescent light",
            "a {} under dim moonlight underwater",
            "a {} highlighted by a diver\u{2019}s flashlight",
            "a {} glowing faintly in darkness",
            "a {} in high-contrast underwater light",
            "a {} in strong sunlight filtering from above",
            "a {} in shimmering caustics underwater",
            "a {} under soft ambient blue light",
            "a {} in backlit silhouette underwater",
        ],
    ),
    (
        "depth/distance",
        [
            "a {} at shallow depth near surface",
            "a {} at mesopelagic depth",
            "a {} at bathypelagic depth",
            "a {} in the hadal zone trench",
            "close-up of the {} underwater",
            "a {} seen from a distance underwater",
            "a {} disappearing into darkness",
            "a {} approaching the camera underwater",
            "a {} drifting into the distance",
            "a {} hovering at seabed depth",
        ],
    ),
    (
        "scene/interaction",
        [
            "a {} surrounded by bubbles",
            "a {} swimming with other fish underwater",
            "a {} near a diver underwater",
            "a {} next to an underwater vehicle",
            "a {} entangled in fishing net underwater",
            "a {} resting near coral",
            "a {} hiding under rocks",
            "a {} camouflaged in sand",
            "a {} gliding through seaweed",
            "a {} chasing prey underwater",
        ],
    ),
];

fn criterion_4() -> Outcome {
    let bank = build_prompt_bank();
    ensure!(bank.len() == 60, "{} templates", bank.len());
    ensure!(bank.groups.len() == 6, "{} groups", bank.groups.len());
    for (group, (name, templates)) in bank.groups.iter().zip(EXPECTED_BANK.iter()) {
        ensure!(group.name == *name, "group {:?} where {name:?} expected", group.name);
        ensure!(group.templates.len() == 10, "group {name} has {} templates", group.templates.len());
        for (got, want) in group.templates.iter().zip(templates) {
            ensure!(got == want, "{name}: {got:?} differs from {want:?}");
        }
    }
    let multi: Vec<String> = bank.templates().into_iter().filter(|t| t.matches("{}").count() != 1).collect();
    ensure!(
        multi.is_empty(),
        "all 60 templates match the tables, but {} of them carry other than one placeholder: {multi:?}",
        multi.len()
    );
    Ok("60 templates in 6 groups of 10, string-equal, one placeholder each".into())
}

// 5. Matching optimality.

fn brute_force_min(cost: &Mat) -> f64 {
    fn go(cost: &Mat, j: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if j == cost.cols {
            *best = best.min(acc);
            return;
        }
        for q in 0..cost.rows {
            if !used[q] {
                used[q] = true;
                go(cost, j + 1, used, acc + cost.get(q, j), best);
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.rows], 0.0, &mut best);
    best
}

fn criterion_5() -> Outcome {
    let mut r = rng(11);
    for trial in 0..200 {
        let nq = r.random_range(1..=6);
        let g = r.random_range(1..=nq);
        let cost = Mat::from_fn(nq, g, |_, _| r.random_range(-5.0..5.0));
        let a = assign_from_cost(&cost);
        let queries: BTreeSet<usize> = a.pairs.iter().map(|p| p.0).collect();
        let targets: BTreeSet<usize> = a.pairs.iter().map(|p| p.1).collect();
        ensure!(queries.len() == g && targets.len() == g, "trial {trial}: assignment is not injective");
        let got: f64 = a.pairs.iter().map(|&(q, j)| cost.get(q, j)).sum();
        let want = brute_force_min(&cost);
        ensure!((got - want).abs() <= 1e-9, "trial {trial}: cost {got} vs brute force {want}");
    }
    Ok("200 random matrices match the permutation minimum".into())
}

// 6. Loss closed forms.

fn criterion_6() -> Outcome {
    let (h, w) = (64, 64);
    let hw = h * w;
    let one = Assignment { pairs: vec![(0, 0)], num_queries: 1 };
    let half = Mat::from_fn(1, hw, |_, i| f64::from(u8::from(i % 3 == 0)));
    let t = ok(TargetSet::new(vec![0], half.clone(), h, w))?;

    let (_, bce) = mask_loss_value(&Mat::zeros(1, hw), &t, &one);
    ensure!((bce - std::f64::consts::LN_2).abs() <= 1e-9, "mask BCE at zero logits is {bce}");
    let cls = classification_loss_value(&Mat::zeros(3, 4), &t, &Assignment { pairs: vec![(1, 0)], num_queries: 3 }, ClassLoss::Sigmoid);
    ensure!((cls - std::f64::consts::LN_2).abs() <= 1e-9, "class BCE at zero logits is {cls}");

    let perfect = half.map(|m| if m > 0.5 { 30.0 } else { -30.0 });
    let (dice, bce) = mask_loss_value(&perfect, &t, &one);
    ensure!(dice + bce < 1e-3, "perfect prediction gives dice {dice} + bce {bce}");

    let ones = ok(TargetSet::new(vec![0], Mat::filled(1, hw, 1.0), h, w))?;
    let (dice, _) = mask_loss_value(&Mat::zeros(1, hw), &ones, &one);
    ensure!((dice - 1.0 / 3.0).abs() <= 1e-3, "p = 0.5 against all ones gives dice {dice}");
    Ok(format!("BCE ln 2, perfect < 1e-3, half-probability dice {dice:.5}"))
}

// 7. Split arithmetic.

fn categories_only(names: &[String]) -> Result<DatasetIndex, String> {
    let cats = names
        .iter()
        .enumerate()
        .map(|(i, n)| CategoryRecord { id: i as u64 + 1, name: n.clone(), supercategory: String::new() })
        .collect();
    ok(DatasetIndex::new(vec![], vec![], cats))
}

fn criterion_7() -> Outcome {
    let shared: Vec<String> = (0..41).map(|i| format!("shared{i:02}")).collect();
    let train: Vec<String> = shared.iter().cloned().chain((0..43).map(|i| format!("train{i:02}"))).collect();
    let val: Vec<String> = (0..74).map(|i| format!("val{i:02}")).chain(shared.iter().cloned()).collect();
    ensure!(train.len() == 84 && val.len() == 115, "fixture sizes");
    let split = build_class_split(&categories_only(&train)?, &categories_only(&val)?);
    let c = split.counts();
    ensure!(
        (c.train_exclusive, c.intersection, c.ov_exclusive) == (43, 41, 74),
        "counts {:?}",
        (c.train_exclusive, c.intersection, c.ov_exclusive)
    );
    ensure!(
        make_task_config(TaskMode::CrossDomain, "train", "val", &split).is_err(),
        "cross-domain accepted an overlapping split"
    );
    let disjoint = ClassSplit::from_names(&train[41..], &val[..74]);
    ensure!(make_task_config(TaskMode::CrossDomain, "train", "val", &disjoint).is_ok(), "disjoint split rejected");
    Ok("exclusives 43 / 74, shared 41; cross-domain overlap rejected".into())
}

// 8. AP oracle.

struct Micro {
    index: DatasetIndex,
    preds: Vec<InstancePrediction>,
    gts: Vec<(u64, u64, String, BinaryMask)>,
}

fn random_mask(h: usize, w: usize, p: f64, r: &mut ChaCha8Rng) -> BinaryMask {
    let bits: Vec<bool> = (0..h * w).map(|_| r.random_bool(p)).collect();
    BinaryMask::from_fn(h, w, |y, x| bits[y * w + x])
}

fn micro_fixture(seed: u64) -> Micro {
    let mut r = rng(seed);
    let classes = ["crab", "eel"];
    let (h, w) = (r.random_range(2..=5), r.random_range(2..=5));
    let mut images = Vec::new();
    let mut anns = Vec::new();
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for im in 1..=r.random_range(1..=3u64) {
        images.push(ImageRecord { id: im, file_name: format!("{im}.png"), height: h, width: w });
        for _ in 0..r.random_range(0..=3) {
            let mut m = random_mask(h, w, 0.5, &mut r);
            if m.area() == 0 {
                m.data[0] = 1;
            }
            let c = r.random_range(0..2);
            let id = anns.len() as u64 + 1;
            anns.push(AnnotationRecord {
                id,
                image_id: im,
                category_id: c as u64 + 1,
                segmentation: Segmentation::Rle(rle_encode(&m)),
                bbox: m.bbox(),
                area: m.area() as f64,
                iscrowd: 0,
            });
            gts.push((id, im, classes[c].to_string(), m));
        }
        for _ in 0..r.random_range(0..=5) {
            let score = f64::from(r.random_range(1..=4u8)) / 4.0;
            let mask = random_mask(h, w, 0.5, &mut r);
            preds.push(InstancePrediction { image_id: im, category: classes[r.random_range(0..2)].into(), mask, score });
        }
    }
    let cats = classes
        .iter()
        .enumerate()
        .map(|(i, n)| CategoryRecord { id: i as u64 + 1, name: n.to_string(), supercategory: String::new() })
        .collect();
    Micro { index: DatasetIndex::new(images, anns, cats).expect("valid fixture"), preds, gts }
}

fn pixel_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x == 1 && **y == 1).count();
    let union = a.data.iter().zip(&b.data).filter(|(x, y)| **x == 1 || **y == 1).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy score-ordered matching, then for each recall level r in
/// {0, 0.01, …, 1} the best precision at any cutoff reaching recall r.
fn brute_ap(m: &Micro, class: &str, thr: f64) -> Option<f64> {
    let gts: Vec<_> = m.gts.iter().filter(|g| g.2 == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut order: Vec<&InstancePrediction> = m.preds.iter().filter(|p| p.category == class).collect();
    order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::new();
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.1 != p.image_id {
                continue;
            }
            let iou = pixel_iou(&p.mask, &g.3);
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        hits.push(best.is_some());
    }
    let npos = gts.len();
    let curve: Vec<(f64, f64)> = (1..=hits.len())
        .map(|k| {
            let tp = hits[..k].iter().filter(|&&x| x).count() as f64;
            (tp / npos as f64, tp / k as f64)
        })
        .collect();
    let total: f64 = (0..=100)
        .map(|i| {
            let level = i as f64 / 100.0;
            curve.iter().filter(|(rec, _)| *rec >= level).map(|(_, p)| *p).fold(0.0, f64::max)
        })
        .sum();
    Some(100.0 * total / 101.0)
}

fn single_gt_index(gt: &BinaryMask) -> DatasetIndex {
    DatasetIndex::new(
        vec![ImageRecord { id: 1, file_name: "1.png".into(), height: gt.height, width: gt.width }],
        vec![AnnotationRecord {
            id: 1,
            image_id: 1,
            category_id: 1,
            segmentation: Segmentation::Rle(rle_encode(gt)),
            bbox: gt.bbox(),
            area: gt.area() as f64,
            iscrowd: 0,
        }],
        vec![CategoryRecord { id: 1, name: "ray".into(), supercategory: String::new() }],
    )
    .expect("valid index")
}

fn criterion_8() -> Outcome {
    let grid = iou_thresholds();
    let mut compared = 0;
    for seed in 0..50 {
        let m = micro_fixture(1000 + seed);
        for class in ["crab", "eel"] {
            let mut prev = f64::INFINITY;
            for &thr in &grid {
                let got = ok(compute_ap(&m.preds, &m.index, class, thr))?;
                let want = brute_ap(&m, class, thr);
                match (got, want) {
                    (None, None) => {}
                    (Some(g), Some(w)) => {
                        ensure!((g - w).abs() <= 1e-9, "fixture {seed} {class} @ {thr}: {g} vs oracle {w}");
                        ensure!(g <= prev + 1e-12, "fixture {seed} {class}: AP rises to {g} at IoU {thr}");
                        prev = g;
                        compared += 1;
                    }
                    _ => return Err(format!("fixture {seed} {class}: presence of ground truth disagrees")),
                }
            }
        }
    }
    let gt = BinaryMask::from_fn(1, 10, |_, _| true);
    let idx = single_gt_index(&gt);
    for (covered, want) in [(8, (100.0, 100.0)), (6, (100.0, 0.0))] {
        let p = vec![InstancePrediction {
            image_id: 1,
            category: "ray".into(),
            mask: BinaryMask::from_fn(1, 10, |_, x| x < covered),
            score: 0.9,
        }];
        let ap50 = ok(compute_ap(&p, &idx, "ray", 0.5))?.unwrap_or(f64::NAN);
        let ap75 = ok(compute_ap(&p, &idx, "ray", 0.75))?.unwrap_or(f64::NAN);
        ensure!((ap50, ap75) == want, "IoU {}: (AP50, AP75) = ({ap50}, {ap75})", covered as f64 / 10.0);
    }
    Ok(format!("{compared} (fixture, class, threshold) values match; IoU 0.8 / 0.6 cases hold"))
}

// 9. Grouped reporting.

fn criterion_9() -> Outcome {
    let mut r = rng(21);
    let shared: Vec<String> = (0..41).map(|i| format!("s{i:02}")).collect();
    let novel: Vec<String> = (0..74).map(|i| format!("n{i:02}")).collect();
    let train: Vec<String> = shared.iter().cloned().chain((0..43).map(|i| format!("t{i:02}"))).collect();
    let val: Vec<String> = shared.iter().chain(&novel).cloned().collect();
    let split = ClassSplit::from_names(&train, &val);
    let per_class: BTreeMap<String, ClassAp> = val
        .iter()
        .map(|n| (n.clone(), ClassAp::from_grid((0..10).map(|_| r.random_range(0.0..100.0)).collect(), 1)))
        .collect();
    let report = group_metrics(&per_class, &split);
    let mean = |names: &[String]| names.iter().map(|n| per_class[n].ap).sum::<f64>() / names.len() as f64;
    let want = (41.0 * mean(&shared) + 74.0 * mean(&novel)) / 115.0;
    let got = report.groups.overall.as_ref().ok_or("no overall group")?.m_ap;
    ensure!((got - want).abs() <= 1e-9, "overall {got} vs hand-weighted {want}");
    let json: serde_json::Value = serde_json::from_str(&report.to_json_string()).map_err(|e| e.to_string())?;
    for g in ["intersection", "open_vocabulary", "overall"] {
        for m in ["m_ap", "ap50", "ap75"] {
            ensure!(json["groups"][g][m].is_number(), "report lacks groups.{g}.{m}");
        }
    }
    Ok(format!("overall {got:.6} equals the 41/74 weighted mean; 3 groups x 3 metrics"))
}

// 10–12. Pipeline criteria through the command line.

fn run(args: &[&str]) -> Result<(), String> {
    let code = cli::run(std::iter::once("ovseg").chain(args.iter().copied()));
    if code == 0 {
        Ok(())
    } else {
        Err(format!("`ovseg {}` exited with {code}", args.join(" ")))
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(d: &Path, root: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(d).expect("readable dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                walk(&p, root, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).expect("readable file"));
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(dir, dir, &mut acc);
    acc
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    annotations: PathBuf,
}

fn fixture() -> Result<Fixture, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().to_path_buf();
    let data = root.join("fixture");
    run(&["synth", "--seed", "0", "--images", "20", "--classes", "6", "--out", s(&data)])?;
    Ok(Fixture { _tmp: tmp, annotations: data.join(ANNOTATION_FILE), root })
}

fn criterion_10(fx: &Fixture) -> Outcome {
    let ck = fx.root.join("ck");
    let ev = fx.root.join("ev");
    let train = ["train", "--data", s(&fx.annotations), "--seed", "0", "--steps", "200", "--out", s(&ck)];
    let eval = ["eval", "--checkpoint", s(&ck), "--data", s(&fx.annotations), "--out", s(&ev)];
    run(&train)?;
    run(&eval)?;
    let checkpoint = ok(Checkpoint::load(&ck))?;
    ensure!(checkpoint.step == 200, "trained {} steps", checkpoint.step);
    let ratio = checkpoint.final_loss / checkpoint.initial_loss;
    ensure!(ratio < 0.5, "loss {} -> {} (ratio {ratio:.3})", checkpoint.initial_loss, checkpoint.final_loss);
    let report = ok(EvalReport::load(&ev.join("report.json")))?;
    let overall = report.groups.overall.as_ref().ok_or("no overall group")?.m_ap;
    ensure!(overall >= 50.0, "overall mAP {overall:.2} on the training set");

    let before = (snapshot(&ck), snapshot(&ev));
    run(&train)?;
    run(&eval)?;
    let after = (snapshot(&ck), snapshot(&ev));
    ensure!(before == after, "rerun with the same seed changed the artifacts");
    Ok(format!(
        "loss {:.3} -> {:.4} (x{ratio:.4}), overall mAP {overall:.2}, rerun byte-identical ({} files)",
        checkpoint.initial_loss,
        checkpoint.final_loss,
        before.0.len() + before.1.len()
    ))
}

fn criterion_11(fx: &Fixture) -> Outcome {
    let index = ok(ovseg::data::load_annotations(&fx.annotations))?;
    let names = index.category_names();
    ensure!(names.len() == 6, "fixture has {} classes", names.len());
    let (seen, held_out) = names.split_at(4);
    let ck = fx.root.join("ck4");
    let ev = fx.root.join("ev4");
    let train_classes = seen.join(",");
    run(&["train", "--data", s(&fx.annotations), "--seed", "0", "--train-classes", &train_classes, "--out", s(&ck)])?;
    let checkpoint = ok(Checkpoint::load(&ck))?;
    ensure!(checkpoint.vocabulary == seen, "checkpoint vocabulary {:?}", checkpoint.vocabulary);
    let vocab = names.join(",");
    run(&["eval", "--checkpoint", s(&ck), "--data", s(&fx.annotations), "--vocab", &vocab, "--out", s(&ev)])?;
    let report = ok(EvalReport::load(&ev.join("report.json")))?;
    let ov = report.groups.open_vocabulary.as_ref().ok_or("open-vocabulary group is empty")?;
    ensure!(ov.num_classes == 2, "open-vocabulary group has {} classes", ov.num_classes);
    ensure!([ov.m_ap, ov.ap50, ov.ap75].iter().all(|v| v.is_finite()), "non-finite OV metrics");
    ensure!(held_out.iter().all(|n| report.per_class.contains_key(n)), "held-out classes missing from per-class AP");
    let preds = std::fs::read_to_string(ev.join("predictions.json")).map_err(|e| e.to_string())?;
    let preds = ok(ovseg::eval::predictions_from_json(&preds))?;
    let novel = preds.iter().filter(|p| held_out.contains(&p.category)).count();
    ensure!(novel > 0, "no prediction names a held-out class");
    Ok(format!(
        "trained on 4 classes; {novel} of {} predictions name held-out classes; OV mAP {:.2} over {} classes",
        preds.len(),
        ov.m_ap,
        ov.num_classes
    ))
}

fn criterion_12(fx: &Fixture) -> Outcome {
    let ck = fx.root.join("ck");
    let out = fx.root.join("sweep");
    run(&["eval", "--checkpoint", s(&ck), "--data", s(&fx.annotations), "--topn-sweep", "--out", s(&out)])?;
    let table = std::fs::read_to_string(out.join("sweep.tsv")).map_err(|e| e.to_string())?;
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().ok_or("empty table")?.split('\t').collect();
    ensure!(header[..2] == ["top_n", "effective_n"], "header {header:?}");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    let grid: Vec<usize> = rows.iter().map(|r| r[0].parse().unwrap_or(0)).collect();
    ensure!(grid == [1, 2, 5, 10, 20, 50, 80], "grid {grid:?}");
    let templates = build_prompt_bank().len();
    for row in &rows {
        ensure!(row.len() == header.len(), "ragged row {row:?}");
        let n: usize = row[0].parse().unwrap();
        ensure!(row[1].parse::<usize>().ok() == Some(n.min(templates)), "effective_n in {row:?}");
        for cell in &row[2..] {
            ensure!(*cell == "-" || cell.parse::<f64>().is_ok_and(|v| (0.0..=100.0).contains(&v)), "cell {cell:?}");
        }
    }
    Ok(format!("{} rows x {} columns", rows.len(), header.len()))
}

/// (criterion, text the failure detail must contain)
const KNOWN_FAILURES: &[(usize, &str)] = &[(4, r#"carry other than one placeholder: ["a photo of a {} in {}"]"#)];

fn main() {
    let mut failures = 0;
    let mut unexpected = Vec::new();
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                println!("PASS {n:>2} {name} ({secs:.1}s): {detail}");
                if KNOWN_FAILURES.iter().any(|k| k.0 == n) {
                    unexpected.push(format!("{n} passed but is listed as a known failure"));
                }
            }
            Err(detail) => {
                failures += 1;
                println!("FAIL {n:>2} {name} ({secs:.1}s): {detail}");
                if !KNOWN_FAILURES.iter().any(|&(k, marker)| k == n && detail.contains(marker)) {
                    unexpected.push(format!("{n} failed"));
                }
            }
        }
    };
    report(1, "fusion oracle", &mut criterion_1);
    report(2, "gradient suite", &mut criterion_2);
    report(3, "template-selection oracles", &mut criterion_3);
    report(4, "prompt-bank fidelity", &mut criterion_4);
    report(5, "matching optimality", &mut criterion_5);
    report(6, "loss closed forms", &mut criterion_6);
    report(7, "split arithmetic", &mut criterion_7);
    report(8, "AP oracle", &mut criterion_8);
    report(9, "grouped reporting", &mut criterion_9);
    match fixture() {
        Ok(fx) => {
            report(10, "end-to-end overfit smoke", &mut || criterion_10(&fx));
            report(11, "open-vocabulary contract", &mut || criterion_11(&fx));
            report(12, "top-N ablation harness", &mut || criterion_12(&fx));
        }
        Err(e) => {
            for (n, name) in [(10, "end-to-end overfit smoke"), (11, "open-vocabulary contract"), (12, "top-N ablation harness")] {
                report(n, name, &mut || Err(format!("fixture: {e}")));
            }
        }
    }
    println!("{} of 12 criteria failed; {} unexpected", failures, unexpected.len());
    if !unexpected.is_empty() {
        println!("unexpected: {}", unexpected.join("; "));
        std::process::exit(1);
    }
}
