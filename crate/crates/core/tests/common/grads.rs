//! Finite-difference checks of each differentiable component in `f64` on
//! randomly drawn shapes.

use findkit::autograd::check::{check_gradients, random_projection, CheckOptions, CheckReport};
use findkit::autograd::{Graph, ParamStore, Tensor, Var};
use findkit::detector::{
    detection_loss, generate_proposals, roi_extract, roi_targets, rpn_targets, BoxHead, HeadOutput, RoiHeadConfig,
    RoiTargets, RpnConfig, RpnHead, RpnOutput, RpnTargets,
};
use findkit::fusion::{AttentionFusion, ConcatFusion, FusedPyramid, FusionConfig, ProductFusion, PyramidMerge};
use findkit::geometry::BBox;
use findkit::imenc::{BackboneConfig, ImageEncoder, ImageTensor};
use findkit::model::{Model, ModelConfig, PreparedExample};
use findkit::nn::Init;
use findkit::textenc::{TextConfig, TextEncoder, TextFeatures, TokenSequence};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const SHAPES_PER_COMPONENT: u64 = 5;
/// Derivatives below this are compared as zero. At the default step the
/// central difference of an O(10) loss carries about 1e-9 of rounding noise,
/// so smaller slopes cannot be resolved to `TOL`.
pub const ABS_FLOOR: f64 = 1e-5;

pub const COMPONENTS: [&str; 11] = [
    "textenc",
    "imenc",
    "fusion_product",
    "fusion_concat",
    "fusion_attention",
    "pyramid_merge",
    "rpn_forward",
    "roi_extract",
    "box_head",
    "losses",
    "model_loss",
];

fn opts(seed: u64) -> CheckOptions {
    CheckOptions { seed, coords_per_tensor: 3, directions: 3, abs_floor: ABS_FLOOR, ..CheckOptions::default() }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Moves every parameter off its structured initial value (zero gammas,
/// unit scales) so no path is trivially flat.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
}

fn mask(rng: &mut ChaCha8Rng, len: usize) -> Vec<bool> {
    let n = rng.gen_range(1..=len);
    (0..len).map(|i| i < n).collect()
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    *xs.choose(rng).expect("non-empty")
}

fn project_all(g: &mut Graph<'_, f64>, xs: &[Var], seed: u64) -> Var {
    let mut total = random_projection(g, xs[0], seed);
    for (k, &x) in xs.iter().enumerate().skip(1) {
        let p = random_projection(g, x, seed + k as u64);
        total = g.add(total, p);
    }
    total
}

type FusionFn<'a> = dyn Fn(&mut Graph<'_, f64>, Var, &TextFeatures) -> Var + 'a;

/// Runs the check named `component` on the shape drawn from `seed`.
pub fn check_component(component: &str, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9) ^ 0x51);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    match component {
        "textenc" => {
            let heads = pick(&mut rng, &[1, 2]);
            let cfg = TextConfig {
                dim: heads * pick(&mut rng, &[2, 4]),
                layers: rng.gen_range(1..=2),
                heads,
                mlp_ratio: 2,
                max_len: 8,
                num_buckets: rng.gen_range(3..8),
                max_distance: 8,
            };
            let vocab = rng.gen_range(4..10);
            let enc = TextEncoder::new(&mut Init::new(&mut store, &mut init_rng, "text", "text"), vocab, &cfg).unwrap();
            let len = rng.gen_range(2..7);
            let m = mask(&mut rng, len);
            let ids = m.iter().map(|&v| if v { rng.gen_range(1..vocab) } else { 0 }).collect();
            let tokens = TokenSequence { ids, mask: m };
            jitter(&mut store, &mut rng);
            check_gradients(&store, &[], opts(seed), |g, _| {
                let t = enc.encode(g, &tokens).unwrap();
                random_projection(g, t.features, seed)
            })
        }
        "imenc" => {
            let cfg = BackboneConfig {
                stem_channels: pick(&mut rng, &[2, 3]),
                channels: [2, pick(&mut rng, &[2, 3]), 4, pick(&mut rng, &[2, 4])],
                blocks_per_stage: 1,
            };
            let enc = ImageEncoder::new(&mut Init::new(&mut store, &mut init_rng, "image", "image"), &cfg).unwrap();
            let (h, w) = (32 * rng.gen_range(1..=2), 32 * rng.gen_range(1..=2));
            let image = rand_tensor(&mut rng, &[3, h, w]);
            jitter(&mut store, &mut rng);
            check_gradients(&store, &[image], opts(seed), |g, v| {
                let f = enc.encode(g, v[0]).unwrap();
                project_all(g, &f.levels, seed)
            })
        }
        "fusion_product" | "fusion_concat" | "fusion_attention" => {
            let c = rng.gen_range(2..5);
            let dt = rng.gen_range(2..5);
            let heads = pick(&mut rng, &[1, 2]);
            let d = heads * pick(&mut rng, &[2, 3]);
            let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let t = rng.gen_range(1..5);
            let vision = rand_tensor(&mut rng, &[c, h, w]);
            let text = rand_tensor(&mut rng, &[t, dt]);
            let m = mask(&mut rng, t);
            let mut init = Init::new(&mut store, &mut init_rng, "fusion", "fusion");
            let block: Box<FusionFn<'_>> = match component {
                "fusion_product" => {
                    let b = ProductFusion::new(&mut init, "p", c, dt, d);
                    Box::new(move |g, v, t| b.forward(g, v, t).unwrap())
                }
                "fusion_concat" => {
                    let b = ConcatFusion::new(&mut init, "c", c, dt, d);
                    Box::new(move |g, v, t| b.forward(g, v, t).unwrap())
                }
                _ => {
                    let cfg = FusionConfig {
                        dim: d,
                        layers: rng.gen_range(1..=2),
                        heads,
                        mlp_ratio: 2,
                        num_buckets: 6,
                        max_distance: 16,
                        ..FusionConfig::default()
                    };
                    let b = AttentionFusion::new(&mut init, "a", c, dt, &cfg);
                    Box::new(move |g, v, t| b.forward(g, v, t).unwrap())
                }
            };
            jitter(&mut store, &mut rng);
            check_gradients(&store, &[vision, text], opts(seed), |g, v| {
                let tf = TextFeatures { features: v[1], mask: m.clone() };
                let out = block(g, v[0], &tf);
                random_projection(g, out, seed)
            })
        }
        "pyramid_merge" => {
            let d = rng.gen_range(1..4);
            let (h, w) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let levels: Vec<Tensor<f64>> = (0..4).rev().map(|k| rand_tensor(&mut rng, &[d, h << k, w << k])).collect();
            let merge = PyramidMerge::new(&mut Init::new(&mut store, &mut init_rng, "fusion", "fusion"), d);
            jitter(&mut store, &mut rng);
            check_gradients(&store, &levels, opts(seed), |g, v| {
                let p = merge.forward(g, v).unwrap();
                project_all(g, &p.levels, seed)
            })
        }
        "rpn_forward" => {
            let d = rng.gen_range(1..4);
            let a = rng.gen_range(1..4);
            let (h, w) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let levels: Vec<Tensor<f64>> = (0..4).rev().map(|k| rand_tensor(&mut rng, &[d, h << k, w << k])).collect();
            let head = RpnHead::new(&mut Init::new(&mut store, &mut init_rng, "detector", "detector"), d, a);
            jitter(&mut store, &mut rng);
            check_gradients(&store, &levels, opts(seed), |g, v| {
                let p = FusedPyramid { levels: [v[0], v[1], v[2], v[3]] };
                let out = head.forward(g, &p);
                project_all(g, &[out.objectness, out.deltas], seed)
            })
        }
        "roi_extract" => {
            let d = rng.gen_range(1..4);
            let s2 = 8 * rng.gen_range(1..3);
            let size = (4 * s2) as f64;
            let levels: Vec<Tensor<f64>> = (0..4).map(|k| rand_tensor(&mut rng, &[d, s2 >> k, s2 >> k])).collect();
            let cfg = RoiHeadConfig {
                out_size: rng.gen_range(1..4),
                sampling_ratio: rng.gen_range(1..3),
                canonical_size: size / 4.0,
                ..RoiHeadConfig::default()
            };
            let boxes: Vec<BBox> = (0..rng.gen_range(1..6))
                .map(|_| {
                    let (x, y) = (rng.gen_range(0.0..size - 2.0), rng.gen_range(0.0..size - 2.0));
                    BBox::new(x, y, rng.gen_range(x + 1.0..size), rng.gen_range(y + 1.0..size))
                })
                .collect();
            check_gradients(&store, &levels, opts(seed), |g, v| {
                let p = FusedPyramid { levels: [v[0], v[1], v[2], v[3]] };
                let f = roi_extract(g, &p, &boxes, &cfg);
                random_projection(g, f, seed)
            })
        }
        "box_head" => {
            let (n, f) = (rng.gen_range(1..5), rng.gen_range(2..8));
            let head = BoxHead::new(
                &mut Init::new(&mut store, &mut init_rng, "detector", "detector"),
                f,
                rng.gen_range(2..6),
                rng.gen_range(1..4),
            );
            let x = rand_tensor(&mut rng, &[n, f]);
            jitter(&mut store, &mut rng);
            check_gradients(&store, &[x], opts(seed), |g, v| {
                let out = head.forward(g, v[0]);
                project_all(g, &[out.logits, out.deltas], seed)
            })
        }
        "losses" => {
            let (n, m, k) = (rng.gen_range(4..12), rng.gen_range(1..6), rng.gen_range(1..4));
            let obj = rand_tensor(&mut rng, &[n, 1]);
            let deltas = rand_tensor(&mut rng, &[n, 4]);
            let logits = rand_tensor(&mut rng, &[m, k + 1]);
            let hdeltas = rand_tensor(&mut rng, &[m, 4]);
            let mut anchors: Vec<usize> = (0..n).collect();
            anchors.shuffle(&mut rng);
            anchors.truncate(rng.gen_range(1..=n));
            anchors.sort_unstable();
            let labels: Vec<(usize, f64)> = anchors.iter().map(|&i| (i, rng.gen_range(0..2) as f64)).collect();
            let regression = labels
                .iter()
                .filter(|l| l.1 > 0.0)
                .map(|l| (l.0, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let rpn_t = RpnTargets { labels, regression, normalizer: n as f64 };
            let classes: Vec<usize> = (0..m).map(|_| rng.gen_range(0..=k)).collect();
            let roi_regression = classes
                .iter()
                .enumerate()
                .filter(|c| *c.1 > 0)
                .map(|(i, _)| (i, (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let roi_t =
                RoiTargets { boxes: vec![BBox::new(0.0, 0.0, 1.0, 1.0); m], classes, regression: roi_regression };
            let (rpn_cfg, roi_cfg) = (RpnConfig::default(), RoiHeadConfig::default());
            check_gradients(&store, &[obj, deltas, logits, hdeltas], opts(seed), |g, v| {
                let rpn = RpnOutput { objectness: v[0], deltas: v[1], offsets: vec![0, n] };
                let head = HeadOutput { logits: v[2], deltas: v[3] };
                detection_loss(g, &rpn, Some(&head), &rpn_t, &roi_t, &rpn_cfg, &roi_cfg).0
            })
        }
        "model_loss" => {
            let cfg = tiny_model_config(&mut rng);
            let vocab = 8;
            let model = Model::new(&cfg, vocab, &mut store, seed).unwrap();
            let size = cfg.image_size as f64;
            let targets: Vec<(BBox, usize)> = (0..rng.gen_range(1..3))
                .map(|_| {
                    let (x, y) = (rng.gen_range(0.0..size - 12.0), rng.gen_range(0.0..size - 12.0));
                    let b = BBox::new(x, y, rng.gen_range(x + 8.0..size), rng.gen_range(y + 8.0..size));
                    (b, rng.gen_range(1..=cfg.num_classes))
                })
                .collect();
            let img = Tensor::from_vec(
                &[3, cfg.image_size, cfg.image_size],
                (0..3 * cfg.image_size * cfg.image_size).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
            );
            let ex = PreparedExample {
                image: ImageTensor::new(img).unwrap(),
                tokens: TokenSequence { ids: vec![3, 4, 5, 0], mask: vec![true, true, true, false] },
                targets,
            };
            jitter(&mut store, &mut rng);
            // Proposals are constants of the loss, so they are drawn once.
            let (rpn_t, roi_t) = {
                let mut g = Graph::new(&store);
                let pyramid = model.features(&mut g, &ex.image, &ex.tokens).unwrap();
                let out = model.rpn.forward(&mut g, &pyramid);
                let obj: Vec<f64> = g.value(out.objectness).data().to_vec();
                let deltas: Vec<[f64; 4]> =
                    g.value(out.deltas).data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
                let gt: Vec<BBox> = ex.targets.iter().map(|t| t.0).collect();
                let classes: Vec<usize> = ex.targets.iter().map(|t| t.1).collect();
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let rpn_t = rpn_targets(&model.anchors.flat(), &gt, &cfg.rpn, &mut r);
                let props = generate_proposals(&obj, &deltas, &model.anchors, &cfg.rpn.proposal_params(true));
                let boxes: Vec<BBox> = props.iter().map(|p| p.bbox).collect();
                (rpn_t, roi_targets(&boxes, &gt, &classes, &cfg.roi, &mut r))
            };
            assert!(!roi_t.boxes.is_empty());
            let o = CheckOptions { coords_per_tensor: 1, ..opts(seed) };
            check_gradients(&store, &[], o, |g, _| {
                let pyramid = model.features(g, &ex.image, &ex.tokens).unwrap();
                let rpn = model.rpn.forward(g, &pyramid);
                let feats = roi_extract(g, &pyramid, &roi_t.boxes, &cfg.roi);
                let head = model.head.forward(g, feats);
                detection_loss(g, &rpn, Some(&head), &rpn_t, &roi_t, &cfg.rpn, &cfg.roi).0
            })
        }
        other => panic!("unknown component {other}"),
    }
}

fn tiny_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let mut cfg = ModelConfig { image_size: 32, num_classes: 3, ..ModelConfig::default() };
    cfg.text = TextConfig { dim: 4, layers: 1, heads: 2, mlp_ratio: 2, max_len: 4, num_buckets: 4, max_distance: 8 };
    cfg.backbone = BackboneConfig { stem_channels: 2, channels: [2, 2, 4, 4], blocks_per_stage: 1 };
    cfg.fusion =
        FusionConfig { dim: 4, layers: 1, heads: 2, mlp_ratio: 2, num_buckets: 4, max_distance: 8, ..cfg.fusion };
    cfg.rpn.anchor_size_factor = 2.0;
    cfg.rpn.aspect_ratios = vec![1.0];
    cfg.rpn.batch_per_image = 16;
    cfg.rpn.pre_nms_train = 16;
    cfg.rpn.post_nms_train = 8;
    cfg.roi.out_size = 2;
    cfg.roi.hidden = 8;
    cfg.roi.batch_per_image = 8;
    cfg.roi.canonical_size = 16.0;
    if rng.gen_bool(0.5) {
        cfg.fusion = cfg.fusion.with_levels(findkit::fusion::FusionKind::Concat, &[2, 3]).unwrap();
    }
    cfg
}

/// `(component, worst relative error, passed)` over all shapes.
pub fn run_component(component: &str) -> (f64, String, bool) {
    let mut worst = (0.0, String::new());
    for s in 0..SHAPES_PER_COMPONENT {
        let r = check_component(component, 1000 + s);
        assert!(r.checks > 0);
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, format!("shape {s}: {}", r.worst));
        }
    }
    (worst.0, worst.1, worst.0 < TOL)
}
