use capnet::cli::RunConfig;
use capnet::metrics::{ccc, CccAccumulator, VarianceMode};
use capnet::models::FeatureCache;
use capnet::neural::{dropout, Mode, Tensor};
use capnet::sampler::parse_seconds;
use capnet::streaming::StreamBuffer;
use capnet::SamplerConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sampler_strategy() -> impl Strategy<Value = SamplerConfig> {
    prop_oneof![Just("1"), Just("2"), Just("3")].prop_map(|w| SamplerConfig::default().with_window(parse_seconds(w).unwrap()).unwrap())
}

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
}

proptest! {
    #[test]
    fn slots_are_causal_and_within_their_stride(
        sampler in sampler_strategy(),
        present in prop::collection::vec(any::<bool>(), 400),
        target in 1u32..420,
    ) {
        let has = |i: u32| present.get(i as usize - 1).copied().unwrap_or(false);
        if let Some(slots) = sampler.fill_slots(target, has) {
            let offsets = sampler.offsets();
            prop_assert_eq!(slots.len(), sampler.window_len());
            prop_assert_eq!(slots[0] as i64, target as i64 + offsets[0]);
            for (k, (&slot, &off)) in slots.iter().zip(&offsets).enumerate() {
                let nominal = target as i64 + off;
                prop_assert!(has(slot));
                prop_assert!(slot as i64 <= nominal && slot as i64 > nominal - sampler.stride() as i64);
                prop_assert!(slot + sampler.lead_frames() <= target);
                if k > 0 {
                    prop_assert!(slot > slots[k - 1]);
                }
            }
        }
    }

    #[test]
    fn future_frames_never_change_the_slots(
        sampler in sampler_strategy(),
        present in prop::collection::vec(any::<bool>(), 400),
        future in prop::collection::vec(any::<bool>(), 400),
        target in 100u32..400,
    ) {
        let cutoff = target - sampler.lead_frames();
        let base = |i: u32| present[i as usize - 1];
        let poisoned = |i: u32| if i > cutoff { future[i as usize - 1] } else { present[i as usize - 1] };
        prop_assert_eq!(sampler.fill_slots(target, base), sampler.fill_slots(target, poisoned));
    }

    #[test]
    fn ccc_is_bounded_and_symmetric((x, y) in vec_pair()) {
        let a = ccc(&x, &y).unwrap().ccc;
        let b = ccc(&y, &x).unwrap().ccc;
        prop_assert!(a.abs() <= 1.0 + 1e-6);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ccc_of_a_vector_with_itself_is_one((x, _) in vec_pair()) {
        prop_assume!(x.iter().any(|v| (v - x[0]).abs() > 1e-3));
        prop_assert!((ccc(&x, &x).unwrap().ccc - 1.0).abs() < 1e-9);
    }

    #[test]
    fn merged_accumulators_match_one_pass((x, y) in vec_pair(), split in 1usize..59) {
        let split = split.min(x.len() - 1);
        let mut whole = CccAccumulator::new();
        let (mut left, mut right) = (CccAccumulator::new(), CccAccumulator::new());
        for (i, (&p, &l)) in x.iter().zip(&y).enumerate() {
            whole.push(p, l);
            if i < split { left.push(p, l) } else { right.push(p, l) }
        }
        left.merge(&right);
        let (a, b) = (whole.stats(VarianceMode::Population).unwrap(), left.stats(VarianceMode::Population).unwrap());
        prop_assert!((a.ccc - b.ccc).abs() < 1e-10);
        prop_assert!((a.mean_pred - b.mean_pred).abs() < 1e-10);
    }

    #[test]
    fn stream_buffer_is_bounded(capacity in 1usize..50, steps in prop::collection::vec(1u32..4, 1..200)) {
        let mut buffer = StreamBuffer::new(capacity);
        let mut idx = 0;
        for step in steps {
            idx += step;
            buffer.push(idx, vec![idx as f64]).unwrap();
            prop_assert!(buffer.len() <= capacity);
            prop_assert_eq!(buffer.newest(), Some(idx));
            prop_assert_eq!(buffer.get(idx), Some(&[idx as f64][..]));
        }
        prop_assert!(buffer.push(idx, vec![0.0]).is_err());
    }

    #[test]
    fn config_echo_round_trips(
        seed in any::<u64>(),
        lr in 1e-7f64..1.0,
        batch in 2usize..512,
        w in prop_oneof![Just("1"), Just("2"), Just("3")],
        root in "[a-z/_ ]{1,20}",
    ) {
        let mut c = RunConfig { seed, ..RunConfig::default() };
        c.train.lr = lr;
        c.train.batch_size = batch;
        c.set("sampler.w", w).unwrap();
        c.set("data.root", &root).unwrap();
        let text = c.to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&parsed.to_text(), &text);
        if root.trim() == root {
            prop_assert_eq!(parsed, c);
        }
    }

    #[test]
    fn feature_cache_size_is_closed_form(dim in 1usize..40, frames in 0u32..60) {
        let mut cache = FeatureCache::new(dim);
        for i in 1..=frames {
            cache.insert("v", i, vec![i as f32; dim]);
        }
        prop_assert_eq!(cache.to_bytes().len(), 16 + frames as usize * (4 + 4 * dim));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_inverted_in_train(rate in 0.0f64..0.9, seed in any::<u64>()) {
        let x = Tensor::new(vec![64], vec![1.5; 64]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (eval, _) = dropout(&x, rate, Mode::Eval, &mut rng).unwrap();
        prop_assert_eq!(eval, x.clone());
        let (train, _) = dropout(&x, rate, Mode::Train, &mut rng).unwrap();
        for &v in train.data() {
            prop_assert!(v == 0.0 || (v - 1.5 / (1.0 - rate)).abs() < 1e-12);
        }
    }
}
