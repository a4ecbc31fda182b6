//! Invariants of geometry, fusion, text encoding, batch mixing, configs and
//! checkpoints.

mod common;

use common::{int_box, props};
use findkit::autograd::{ParamStore, Tensor};
use findkit::geometry::{self, generate_anchors, BBox, BoxCoder, LevelSpec};
use findkit::taskkit::{MixSpec, Mixer};
use findkit::textenc::Vocabulary;
use findkit::train::{Checkpoint, Profile, TrainConfig};
use proptest::prelude::*;

#[test]
fn fusion_padding_invariance_and_shapes() {
    props::run(props::fusion_case, 1000).unwrap();
}

#[test]
fn text_encoder_ignores_trailing_padding() {
    props::run(props::textenc_case, 256).unwrap();
}

fn real_box() -> impl Strategy<Value = BBox> {
    (0.0f64..100.0, 0.0f64..100.0, 0.5f64..80.0, 0.5f64..80.0).prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in real_box(), b in real_box()) {
        let (ab, ba) = (a.iou(&b), b.iou(&a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_coding_round_trips(a in real_box(), b in real_box(), w in prop::sample::select(vec![[1.0; 4], [10.0, 10.0, 5.0, 5.0]])) {
        let coder = BoxCoder::with_weights(w);
        let in_range = |r: f64| r.ln().abs() <= coder.scale_clamp;
        prop_assume!(in_range(b.width() / a.width()) && in_range(b.height() / a.height()));
        let d = coder.encode_one(&a, &b).unwrap();
        let back = coder.decode_one(&a, &d).unwrap();
        for (x, y) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((x - y).abs() < 1e-9, "{:?} vs {:?}", back, b);
        }
    }

    #[test]
    fn decoded_size_is_clamped(a in real_box(), dw in -20.0f64..20.0, dh in -20.0f64..20.0) {
        let coder = BoxCoder::with_weights([1.0; 4]);
        let d = coder.encode_one(&a, &a).unwrap();
        let d = [d[0], d[1], dw, dh];
        let back = coder.decode_one(&a, &d).unwrap();
        let limit = coder.scale_clamp.exp() * (1.0 + 1e-12);
        prop_assert!(back.width() <= a.width() * limit && back.height() <= a.height() * limit);
    }

    #[test]
    fn xywh_round_trips(b in real_box()) {
        let [x, y, w, h] = b.to_xywh();
        let back = BBox::from_xywh(x, y, w, h);
        for (p, q) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_stays_inside(b in real_box(), w in 1.0f64..150.0, h in 1.0f64..150.0) {
        let c = b.clip(w, h);
        prop_assert!(c.x1 >= 0.0 && c.y1 >= 0.0 && c.x2 <= w && c.y2 <= h && c.is_valid());
    }

    #[test]
    fn nms_keeps_a_sorted_separated_subset(bs in common::boxes_with_scores(40, 24), thr in 0.1f64..0.9) {
        let (boxes, scores): (Vec<BBox>, Vec<f64>) = bs.into_iter().unzip();
        let keep = geometry::nms(&boxes, &scores, thr, usize::MAX);
        for (n, &i) in keep.iter().enumerate() {
            for &j in &keep[n + 1..] {
                prop_assert!(scores[i] >= scores[j]);
                prop_assert!(boxes[i].iou(&boxes[j]) <= thr);
            }
        }
        for (i, b) in boxes.iter().enumerate() {
            if !keep.contains(&i) {
                prop_assert!(keep.iter().any(|&k| scores[k] >= scores[i] && boxes[k].iou(b) > thr));
            }
        }
    }

    #[test]
    fn anchors_tile_each_level(size in prop::sample::select(vec![32usize, 64, 96]), factor in 1.0f64..8.0, ratios in prop::sample::select(vec![vec![1.0], vec![0.5, 1.0, 2.0]])) {
        let specs = LevelSpec::pyramid(factor, &ratios);
        let set = generate_anchors(size, size, &specs).unwrap();
        let mut total = 0;
        for (level, spec) in set.levels.iter().zip(&specs) {
            prop_assert_eq!(level.boxes.len(), level.height * level.width * ratios.len());
            prop_assert_eq!(level.height, size / spec.stride);
            for (k, a) in level.boxes.iter().enumerate() {
                let cell = k / ratios.len();
                let (cx, cy) = a.center();
                let s = spec.stride as f64;
                prop_assert!((cx - ((cell % level.width) as f64 + 0.5) * s).abs() < 1e-9);
                prop_assert!((cy - ((cell / level.width) as f64 + 0.5) * s).abs() < 1e-9);
                prop_assert!((a.area() - spec.size * spec.size).abs() < 1e-6 * spec.size * spec.size);
            }
            total += level.boxes.len();
        }
        prop_assert_eq!(total, set.len());
    }

    #[test]
    fn matched_positives_clear_the_threshold(cands in prop::collection::vec(int_box(24), 1..20), gt in prop::collection::vec(int_box(24), 1..4)) {
        let m = geometry::match_targets(&cands, &gt, 0.5, 0.3, false);
        for (i, g) in m.positives() {
            prop_assert!(cands[i].iou(&gt[g]) >= 0.5);
        }
        for i in m.negatives() {
            prop_assert!(gt.iter().all(|g| cands[i].iou(g) < 0.3));
        }
    }

    #[test]
    fn every_batch_follows_the_ratio(
        weights in prop::collection::vec(1usize..4, 1..5),
        unit in 1usize..4,
        lens in prop::collection::vec(1usize..9, 4),
        seed in any::<u64>(),
    ) {
        let lens = &lens[..weights.len()];
        let spec = MixSpec::new(weights.clone(), unit * weights.iter().sum::<usize>()).unwrap();
        let counts = spec.counts();
        let mut mixer = Mixer::new(lens, spec, seed).unwrap();
        let mut seen = vec![vec![0usize; 9]; weights.len()];
        for _ in 0..6 {
            let batch = mixer.next_batch();
            for (s, &c) in counts.iter().enumerate() {
                prop_assert_eq!(batch.iter().filter(|b| b.0 == s).count(), c);
            }
            for (s, i) in batch {
                prop_assert!(i < lens[s]);
                seen[s][i] += 1;
            }
        }
        // Within-epoch sampling is without replacement.
        for (s, &len) in lens.iter().enumerate() {
            let drawn = 6 * counts[s];
            let (lo, hi) = (drawn / len, drawn.div_ceil(len));
            prop_assert!(seen[s][..len].iter().all(|&n| n >= lo && n <= hi));
        }
    }

    #[test]
    fn restored_mixer_continues_identically(seed in any::<u64>(), skip in 0usize..10) {
        let spec = MixSpec::new(vec![1, 2, 1], 8).unwrap();
        let mut a = Mixer::new(&[3, 5, 7], spec.clone(), seed).unwrap();
        for _ in 0..skip {
            a.next_batch();
        }
        let mut b = Mixer::restore(spec, seed, a.state().to_vec()).unwrap();
        for _ in 0..5 {
            prop_assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn config_dump_round_trips(
        profile in prop::sample::select(vec![Profile::Toy, Profile::Desk, Profile::Full]),
        seed in any::<u32>(),
        lr in 0.001f64..1.0,
        mix in prop::sample::select(vec!["1:1:1", "2:1:1", "1:0:0"]),
    ) {
        let text = format!("profile = {}\nseed = {seed}\nbase_lr = {lr}\nmix = {mix}\nbatch_size = 12\n", profile.name());
        let Ok(cfg) = TrainConfig::parse(&text) else {
            prop_assert_eq!(mix, "1:0:0");
            return Ok(());
        };
        let again = TrainConfig::parse(&cfg.to_kv()).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(again.hash(), cfg.hash());
        prop_assert_eq!(again.to_kv(), cfg.to_kv());
    }

    #[test]
    fn checkpoint_bytes_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..6), seed in any::<u64>(), velocity in any::<bool>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        let mut vel = Vec::new();
        for (i, s) in shapes.iter().enumerate() {
            let n: usize = s.iter().product();
            store.add(format!("p{i}"), "detector", i % 2 == 0, Tensor::from_vec(s, (0..n).map(|_| rng.gen()).collect()));
            vel.push(Tensor::from_vec(s, (0..n).map(|_| rng.gen()).collect()));
        }
        let cfg = TrainConfig::profile(Profile::Toy);
        let vocab = Vocabulary::build(&["find the red square"], 1).unwrap();
        let mixer = Mixer::new(&[2, 3, 4], cfg.mix.clone(), seed).unwrap();
        let ck = Checkpoint::new(seed as usize % 1000, &cfg, &vocab, &store, velocity.then_some(&vel), &mixer);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        prop_assert_eq!(&back.header, &ck.header);
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes;
        extra.push(0);
        prop_assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
