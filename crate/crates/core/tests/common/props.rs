//! Padding invariance and shape contracts of the fusion blocks.

use findkit::autograd::{Graph, ParamStore, Tensor, Var};
use findkit::fusion::{AttentionFusion, ConcatFusion, Fusion, FusionBlock, FusionConfig, FusionKind, ProductFusion};
use findkit::imenc::FeatureMapSet;
use findkit::nn::Init;
use findkit::textenc::{TextConfig, TextEncoder, TextFeatures, TokenSequence};
use findkit::Error;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * rng.gen_range(-1.0..1.0)).collect())
}

/// Appends `pads` rows of large garbage to `[T, D]` text features.
fn padded(rng: &mut ChaCha8Rng, text: &Tensor<f64>, pads: usize) -> (Tensor<f64>, Vec<bool>) {
    let (t, d) = (text.shape()[0], text.shape()[1]);
    let mut data = text.data().to_vec();
    data.extend((0..pads * d).map(|_| rng.gen_range(-100.0..100.0)));
    let mask = (0..t + pads).map(|i| i < t).collect();
    (Tensor::from_vec(&[t + pads, d], data), mask)
}

fn close(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    let scale = 1.0 + a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if diff > 1e-10 * scale {
        return Err(format!("padding changed the output by {diff:e}"));
    }
    Ok(())
}

fn kind(rng: &mut ChaCha8Rng) -> FusionKind {
    *[FusionKind::Product, FusionKind::Concat, FusionKind::Attention].choose(rng).unwrap()
}

fn block(init: &mut Init<f64>, kind: FusionKind, c: usize, dt: usize, cfg: &FusionConfig) -> FusionBlock {
    match kind {
        FusionKind::Product => FusionBlock::Product(ProductFusion::new(init, "b", c, dt, cfg.dim)),
        FusionKind::Concat => FusionBlock::Concat(ConcatFusion::new(init, "b", c, dt, cfg.dim)),
        FusionKind::Attention => FusionBlock::Attention(AttentionFusion::new(init, "b", c, dt, cfg)),
    }
}

fn fusion_config(rng: &mut ChaCha8Rng) -> FusionConfig {
    let heads = rng.gen_range(1..=3);
    FusionConfig {
        dim: heads * rng.gen_range(1..=3),
        layers: rng.gen_range(0..=2),
        heads,
        mlp_ratio: rng.gen_range(1..=2),
        mechanisms: [kind(rng), kind(rng), kind(rng), kind(rng)],
        num_buckets: rng.gen_range(2..8),
        max_distance: rng.gen_range(4..32),
    }
}

type FusionOutputs<'a> = dyn Fn(&mut Graph<'_, f64>, &TextFeatures) -> Result<Vec<Var>, Error> + 'a;

/// One random fusion block (or the full four-level fusion) checked for
/// padding invariance, output shape and input validation.
pub fn fusion_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let mut store = ParamStore::<f64>::new();
    let cfg = fusion_config(&mut rng);
    let dt = rng.gen_range(1..5);
    let t = rng.gen_range(1..6);
    let pads = rng.gen_range(1..5);
    let text = rand_tensor(&mut rng, &[t, dt], 1.0);
    let (text_p, mask_p) = padded(&mut rng, &text, pads);
    let full = rng.gen_bool(0.25);
    let run = |g: &mut Graph<'_, f64>, f: &FusionOutputs<'_>| {
        let a = TextFeatures { features: g.input(text.clone()), mask: vec![true; t] };
        let b = TextFeatures { features: g.input(text_p.clone()), mask: mask_p.clone() };
        let empty = TextFeatures { features: g.input(text_p.clone()), mask: vec![false; t + pads] };
        let wrong_dim = TextFeatures { features: g.input(Tensor::zeros(&[t, dt + 1])), mask: vec![true; t] };
        let ya = f(g, &a).map_err(|e| e.to_string())?;
        let yb = f(g, &b).map_err(|e| e.to_string())?;
        if !matches!(f(g, &empty), Err(Error::EmptyQuery)) {
            return Err("all-padding text was accepted".into());
        }
        if !matches!(f(g, &wrong_dim), Err(Error::Shape(_))) {
            return Err("text of the wrong width was accepted".into());
        }
        let ya: Vec<Tensor<f64>> = ya.iter().map(|&v| g.value(v).clone()).collect();
        let yb: Vec<Tensor<f64>> = yb.iter().map(|&v| g.value(v).clone()).collect();
        for (x, y) in ya.iter().zip(&yb) {
            close(x, y)?;
        }
        Ok::<_, String>(ya)
    };
    if full {
        let dims: [usize; 4] = std::array::from_fn(|_| rng.gen_range(1..4));
        let (h, w) = (rng.gen_range(1..3), rng.gen_range(1..3));
        let maps: Vec<Tensor<f64>> =
            (0..4).map(|k| rand_tensor(&mut rng, &[dims[k], h << (3 - k), w << (3 - k)], 1.0)).collect();
        let fusion = Fusion::new(&mut Init::new(&mut store, &mut init_rng, "fusion", "fusion"), dims, dt, &cfg)
            .map_err(|e| e.to_string())?;
        let mut g = Graph::new(&store);
        let levels: Vec<Var> = maps.iter().map(|m| g.input(m.clone())).collect();
        let set = FeatureMapSet { levels: [levels[0], levels[1], levels[2], levels[3]] };
        let out = run(&mut g, &|g, text| Ok(fusion.forward(g, &set, text)?.levels.to_vec()))?;
        for (k, y) in out.iter().enumerate() {
            let want = [cfg.dim, h << (3 - k), w << (3 - k)];
            if y.shape() != want {
                return Err(format!("level {} shape {:?}, expected {want:?}", k + 2, y.shape()));
            }
        }
    } else {
        let c = rng.gen_range(1..5);
        let (h, w) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let k = kind(&mut rng);
        let b = block(&mut Init::new(&mut store, &mut init_rng, "fusion", "fusion"), k, c, dt, &cfg);
        let vision = rand_tensor(&mut rng, &[c, h, w], 1.0);
        let mut g = Graph::new(&store);
        let v = g.input(vision);
        let out = run(&mut g, &|g, text| Ok(vec![b.forward(g, v, text)?]))?;
        if out[0].shape() != [cfg.dim, h, w] {
            return Err(format!("{k} output {:?}, expected {:?}", out[0].shape(), [cfg.dim, h, w]));
        }
        let bad = g.input(Tensor::zeros(&[c + 1, h, w]));
        let a = TextFeatures { features: g.input(text.clone()), mask: vec![true; t] };
        if !matches!(b.forward(&mut g, bad, &a), Err(Error::Shape(_))) {
            return Err(format!("{k} accepted a vision map with the wrong channel count"));
        }
    }
    Ok(())
}

/// Text encoder outputs at real tokens ignore trailing padding.
pub fn textenc_case(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF);
    let heads = rng.gen_range(1..=3);
    let cfg = TextConfig {
        dim: heads * rng.gen_range(1..=3),
        layers: rng.gen_range(0..=2),
        heads,
        mlp_ratio: 2,
        max_len: 16,
        num_buckets: rng.gen_range(2..8),
        max_distance: rng.gen_range(4..32),
    };
    let vocab = rng.gen_range(3..12);
    let mut store = ParamStore::<f64>::new();
    let enc = TextEncoder::new(&mut Init::new(&mut store, &mut init_rng, "text", "text"), vocab, &cfg)
        .map_err(|e| e.to_string())?;
    let t = rng.gen_range(1..6);
    let pads = rng.gen_range(1..5);
    let ids: Vec<usize> = (0..t).map(|_| rng.gen_range(1..vocab)).collect();
    let short = TokenSequence { ids: ids.clone(), mask: vec![true; t] };
    let mut long_ids = ids;
    long_ids.extend((0..pads).map(|_| rng.gen_range(0..vocab)));
    let long = TokenSequence { ids: long_ids, mask: (0..t + pads).map(|i| i < t).collect() };
    let mut g = Graph::new(&store);
    let a = enc.encode(&mut g, &short).map_err(|e| e.to_string())?;
    let b = enc.encode(&mut g, &long).map_err(|e| e.to_string())?;
    let want = [t + pads, cfg.dim];
    if g.shape(b.features) != want {
        return Err(format!("encoder output {:?}, expected {want:?}", g.shape(b.features)));
    }
    let rows = g.slice_rows(b.features, 0, t);
    close(g.value(a.features), g.value(rows))
}

pub fn run(case: fn(u64) -> Result<(), String>, cases: u32) -> Result<(), String> {
    let mut r = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    r.run(&any::<u64>(), |seed| case(seed).map_err(TestCaseError::fail)).map_err(|e| e.to_string())
}
