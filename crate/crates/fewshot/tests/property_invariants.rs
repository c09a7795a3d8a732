//! Randomized property tests for the structural invariants.

use std::collections::HashSet;

use fewshot::contrastive::dbscan;
use fewshot::data::{
    generate_synthetic, sample_episode, GeneratorConfig, SampleFilter, Split,
};
use fewshot::rng::stream;
use fewshot::stylemix::{adain, style_mix};
use fewshot::tensor::{SgdOptimizer, Tape, Tensor};
use proptest::prelude::*;

fn tensor_strategy(max_per_dim: usize, rank: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1..=max_per_dim, rank).prop_flat_map(|shape| {
        let numel: usize = shape.iter().product();
        prop::collection::vec(-2.0f64..2.0, numel)
            .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn episode_remap_is_bijection_and_sets_are_disjoint(
        seed in 0u64..500,
        n_way in 2usize..5,
        k_shot in 1usize..4,
        q_queries in 1usize..4,
    ) {
        let manifest = generate_synthetic(&GeneratorConfig {
            n_classes: 6,
            samples_per_class: 8,
            base_classes: 5,
            val_classes: 0,
            novel_classes: 1,
            ..Default::default()
        }).unwrap();
        let mut rng = stream(seed, "prop-episode", &[]);
        let ep = sample_episode(
            &manifest,
            SampleFilter::split_domain(Split::Base, 0),
            n_way,
            k_shot,
            q_queries,
            &mut rng,
        ).unwrap();
        // bijection onto 0..n_way
        let distinct: HashSet<usize> = ep.class_remap.iter().copied().collect();
        prop_assert_eq!(distinct.len(), n_way);
        for &(idx, label) in ep.support.iter().chain(&ep.query) {
            prop_assert!(label < n_way);
            prop_assert_eq!(manifest.samples[idx].class_id, ep.class_remap[label]);
        }
        // disjoint identities, exact per-class counts
        let s: HashSet<usize> = ep.support.iter().map(|&(i, _)| i).collect();
        let q: HashSet<usize> = ep.query.iter().map(|&(i, _)| i).collect();
        prop_assert!(s.is_disjoint(&q));
        for label in 0..n_way {
            prop_assert_eq!(ep.support.iter().filter(|&&(_, l)| l == label).count(), k_shot);
            prop_assert_eq!(ep.query.iter().filter(|&&(_, l)| l == label).count(), q_queries);
        }
    }

    #[test]
    fn style_mix_identities_hold_for_random_inputs(
        x in tensor_strategy(6, 4).prop_filter("spatial extent", |t| t.shape()[2] * t.shape()[3] >= 2),
        lambda in 0.0f64..=1.0,
    ) {
        let y = x.map(|v| -v + 0.25); // same shape, different values
        let close = |a: &Tensor, b: &Tensor| {
            a.data().iter().zip(b.data()).all(|(u, v)| (u - v).abs() < 1e-9)
        };
        // identical inputs are a fixed point for any lambda
        prop_assert!(close(&style_mix(&x, &x, lambda).unwrap(), &x));
        // lambda=1 keeps x, lambda=0 is exactly adain
        prop_assert!(close(&style_mix(&x, &y, 1.0).unwrap(), &x));
        let mixed = style_mix(&x, &y, 0.0).unwrap();
        let plain = adain(&x, &y).unwrap();
        prop_assert_eq!(mixed.data(), plain.data());
    }

    #[test]
    fn permute_then_inverse_is_identity(
        t in tensor_strategy(5, 4),
        perm_seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut stream(perm_seed, "perm", &[]));
        let inverse: Vec<usize> = {
            let mut inv = vec![0; 4];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            inv
        };
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let p = tape.permute(v, &perm).unwrap();
        let back = tape.permute(p, &inverse).unwrap();
        prop_assert_eq!(tape.value(back).shape(), t.shape());
        prop_assert_eq!(tape.value(back).data(), t.data());
    }

    #[test]
    fn concat_of_row_split_reassembles_exactly(
        t in tensor_strategy(6, 2).prop_filter("at least two rows", |t| t.shape()[0] >= 2),
        cut_seed in 0u64..100,
    ) {
        use rand::Rng as _;
        let rows = t.shape()[0];
        let cut = 1 + (stream(cut_seed, "cut", &[]).gen::<u64>() as usize) % (rows - 1);
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let top = tape.slice(v, 0, 0, cut).unwrap();
        let bottom = tape.slice(v, 0, cut, rows - cut).unwrap();
        let joined = tape.concat(&[top, bottom], 0).unwrap();
        prop_assert_eq!(tape.value(joined).data(), t.data());
    }

    #[test]
    fn softmax_rows_are_stochastic_for_any_axis(
        t in tensor_strategy(5, 3),
        axis in 0usize..3,
    ) {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let s = tape.softmax(v, axis).unwrap();
        let out = tape.value(s);
        // sum over the softmaxed axis must be 1 everywhere
        let mut sums = std::collections::HashMap::new();
        let shape = t.shape();
        for flat in 0..t.numel() {
            let mut coords = [0usize; 3];
            let mut rem = flat;
            for d in (0..3).rev() {
                coords[d] = rem % shape[d];
                rem /= shape[d];
            }
            let mut key = coords;
            key[axis] = 0;
            *sums.entry(key).or_insert(0.0) += out.data()[flat];
            prop_assert!(out.data()[flat] > 0.0);
        }
        for (_, sum) in sums {
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_matches_the_analytic_recurrence(
        lr in 0.001f64..0.5,
        momentum in 0.0f64..0.99,
        grads in prop::collection::vec(-2.0f64..2.0, 1..8),
    ) {
        let mut opt = SgdOptimizer::new(lr, momentum).unwrap();
        let mut params = vec![Tensor::scalar(1.0)];
        for &g in &grads {
            opt.step(&mut params, &[Tensor::scalar(g)]).unwrap();
        }
        // reference recurrence
        let mut v = 0.0;
        let mut p = 1.0;
        for &g in &grads {
            v = momentum * v + g;
            p -= lr * v;
        }
        prop_assert!((params[0].item() - p).abs() < 1e-12);
    }

    #[test]
    fn duplicating_a_core_point_is_invisible_to_dense_blobs(
        seed in 0u64..200,
        which in 0usize..16,
    ) {
        use rand::Rng as _;
        // every blob member is a core point (min_pts 2, tight blobs), so a
        // duplicate cannot upgrade any border point
        let mut rng = stream(seed, "prop-dbscan", &[]);
        let mut points: Vec<Vec<f64>> = Vec::new();
        for b in 0..2 {
            for _ in 0..8 {
                points.push(vec![
                    b as f64 * 10.0 + rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                ]);
            }
        }
        let base = dbscan(&points, 1.0, 2).unwrap();
        prop_assert!(base.core[which]);
        let mut dup = points.clone();
        dup.push(points[which].clone());
        let out = dbscan(&dup, 1.0, 2).unwrap();
        prop_assert_eq!(&out.labels[..points.len()], &base.labels[..]);
        prop_assert_eq!(out.labels[points.len()], base.labels[which]);
    }
}
