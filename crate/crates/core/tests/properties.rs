use anysr::backbone::{BackboneConfig, SharedWeightStore};
use anysr::bench::{bicubic_resize, psnr, Image, PsnrMode};
use anysr::config::RunConfig;
use anysr::interweave::{plan_interleave, AseMode};
use anysr::numerics::{finite_diff_grad, Graph, Tensor};
use anysr::scale_space::{ScaleGroups, ScalePair};
use anysr::trainer::{Phase, TrainConfig, TrainOutputs, Trainer};
use proptest::prelude::*;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn plan_tiles_every_position(c_in in 1usize..80, lambda_frac in 0.0f64..1.0, w in 0.01f64..=1.0) {
        let lambda = 1 + (lambda_frac * (c_in - 1) as f64) as usize;
        let plan = plan_interleave(c_in, lambda, w).unwrap();
        let mut hits = vec![0u8; plan.total_len];
        for seg in &plan.segments {
            prop_assert_eq!(seg.src.len(), seg.dst.len());
            for d in seg.dst.clone() {
                hits[d] += 1;
            }
        }
        for &(a, b) in &plan.slots {
            prop_assert_eq!(b, a + 1);
            hits[a - 1] += 1;
            hits[b - 1] += 1;
        }
        prop_assert!(hits.iter().all(|&h| h == 1));
        let sources: Vec<usize> = plan.segments.iter().flat_map(|s| s.src.clone()).collect();
        prop_assert_eq!(sources, (0..plan.features).collect::<Vec<_>>());
    }

    #[test]
    fn narrower_slots_are_a_prefix(c_in in 2usize..80, lambda_frac in 0.0f64..1.0, a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let lambda = 1 + (lambda_frac * (c_in - 1) as f64) as usize;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = plan_interleave(c_in, lambda, lo).unwrap().scale_indices();
        let large = plan_interleave(c_in, lambda, hi).unwrap().scale_indices();
        prop_assert!(small.len() <= large.len());
        prop_assert_eq!(&large[..small.len()], &small[..]);
    }

    #[test]
    fn conv_gradients_match_finite_differences(
        cin in 1usize..4, cout in 1usize..4, h in 1usize..5, w in 1usize..5, k in prop::sample::select(vec![1usize, 3]),
        seed in values(128),
    ) {
        let take = |n: usize, off: usize| (0..n).map(|i| seed[(i + off) % seed.len()]).collect::<Vec<_>>();
        let input = Tensor::new(&[cin, h, w], take(cin * h * w, 0)).unwrap();
        let kernel = Tensor::new(&[cout, cin, k, k], take(cout * cin * k * k, 7)).unwrap();
        let bias = Tensor::new(&[cout], take(cout, 3)).unwrap();
        let weights = Tensor::new(&[cout, h, w], take(cout * h * w, 11)).unwrap();
        // ℓ1 distance of a sigmoid-gated convolution to a fixed target.
        let loss = |inp: &Tensor<f64>, ker: &Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.param(inp, 0);
            let kv = g.param(ker, 1);
            let b = g.leaf(&bias);
            let y = g.conv2d(x, kv, Some(b), k / 2).unwrap();
            let y = g.sigmoid(y).unwrap();
            let wv = g.leaf(&weights);
            let z = g.l1_loss(y, wv).unwrap();
            let grads = g.backward(z).unwrap();
            let gx = grads.by_key(0).map(<[f64]>::to_vec);
            let gk = grads.by_key(1).map(<[f64]>::to_vec);
            (g.scalar(z).unwrap(), gx, gk)
        };
        let (_, gx, gk) = loss(&input, &kernel);
        let nx = finite_diff_grad(|p| Ok(loss(p, &kernel).0), &input, 1e-5).unwrap();
        let nk = finite_diff_grad(|p| Ok(loss(&input, p).0), &kernel, 1e-5).unwrap();
        for (a, n) in gx.unwrap().iter().zip(nx.data()) {
            prop_assert!(rel_err(*a, *n) < 1e-4, "input grad {} vs {}", a, n);
        }
        for (a, n) in gk.unwrap().iter().zip(nk.data()) {
            prop_assert!(rel_err(*a, *n) < 1e-4, "kernel grad {} vs {}", a, n);
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences(points in 1usize..4, cols in 1usize..6, rows in 1usize..6, seed in values(64)) {
        let take = |n: usize, off: usize| (0..n).map(|i| seed[(i + off) % seed.len()]).collect::<Vec<_>>();
        let x = Tensor::new(&[points, cols], take(points * cols, 0)).unwrap();
        let w = Tensor::new(&[rows, cols], take(rows * cols, 5)).unwrap();
        let b = Tensor::new(&[rows], take(rows, 9)).unwrap();
        let f = |w: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.leaf(&x);
            let wv = g.param(w, 0);
            let bv = g.leaf(&b);
            let y = g.linear(xv, wv, Some(bv), rows).unwrap();
            let y = g.sigmoid(y).unwrap();
            let s = g.sum(y).unwrap();
            let grad = g.backward(s).unwrap().by_key(0).map(<[f64]>::to_vec).unwrap();
            (g.scalar(s).unwrap(), grad)
        };
        let (_, analytic) = f(&w);
        let numeric = finite_diff_grad(|p| Ok(f(p).0), &w, 1e-5).unwrap();
        for (a, n) in analytic.iter().zip(numeric.data()) {
            prop_assert!(rel_err(*a, *n) < 1e-4, "{} vs {}", a, n);
        }
    }

    #[test]
    fn resampling_keeps_constants(h in 1usize..20, w in 1usize..20, oh in 1usize..40, ow in 1usize..40, v in 0.0f64..=1.0) {
        let img = Image::filled(h, w, v).unwrap();
        let out = bicubic_resize(&img, oh, ow).unwrap();
        prop_assert!(out.data().iter().all(|&x| (x - v).abs() < 1e-12));
    }

    #[test]
    fn psnr_is_symmetric(a in prop::collection::vec(0.0f64..=1.0, 48), b in prop::collection::vec(0.0f64..=1.0, 48)) {
        let x = Image::new(4, 4, a).unwrap();
        let y = Image::new(4, 4, b).unwrap();
        for mode in [PsnrMode::Rgb, PsnrMode::Y] {
            prop_assert_eq!(psnr(&x, &y, mode).unwrap(), psnr(&y, &x, mode).unwrap());
        }
    }

    #[test]
    fn config_echo_round_trips(
        c_in in 4usize..32, n_blocks in 1usize..4, lambda in 1usize..4,
        p in 0.0f64..=1.0, lr in 1e-6f64..1e-2, steps in 0u64..5000,
        mode in prop::sample::select(vec!["interweave", "naive", "off"]),
    ) {
        let text = format!(
            "model.c_in={c_in}\nmodel.n_blocks={n_blocks}\nmodel.lambda={lambda}\nmodel.ase_mode={mode}\ntrain.p={p}\ntrain.lr={lr}\ntrain.steps={steps}\n"
        );
        let cfg = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(RunConfig::parse(&cfg.echo()).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoints_round_trip(c_in in 2usize..12, n_blocks in 1usize..3, lambda in 1usize..3, hidden in 1usize..8, bias: bool, seed: u64,
        mode in prop::sample::select(vec![AseMode::Interweave, AseMode::Naive, AseMode::Off])) {
        let cfg = BackboneConfig { c_in, n_blocks, lambda: lambda.min(c_in), hidden, ase_bias: bias, ase_mode: mode, ..BackboneConfig::default() };
        prop_assume!(cfg.validate().is_ok());
        let store = SharedWeightStore::<f64>::build(&cfg, seed).unwrap();
        let bytes = store.to_bytes();
        let back = SharedWeightStore::<f64>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &store);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

/// With p=1 every task is promoted, so training must equal a run that
/// forces the full network on the same scale sequence.
#[test]
fn reset_probability_one_is_full_width_training() {
    let cfg = BackboneConfig {
        c_in: 8,
        n_blocks: 1,
        lambda: 2,
        hidden: 8,
        ..BackboneConfig::default()
    };
    let store = SharedWeightStore::<f64>::build(&cfg, 3).unwrap();
    let data = anysr::bench::synthetic_dataset(0, 4, 48, 1);
    let train = TrainConfig {
        steps: 12,
        p: 1.0,
        lr0: 1e-3,
        batch: 2,
        patch: 8,
        phase: Phase::AnySr,
        ..TrainConfig::default()
    };
    let groups = ScaleGroups::default_groups();
    let mut a = Trainer::new(store.clone(), groups.clone(), train.clone()).unwrap();
    let log_a = a.train(&data, &TrainOutputs::default()).unwrap();
    let mut b = Trainer::new(store, groups, train).unwrap();
    let log_b = b
        .train_with(&data, &TrainOutputs::default(), |g, rng| {
            let mut task = g.sample_task(0.0, rng);
            task.subnet = g.count();
            task
        })
        .unwrap();
    assert!(log_a.records.iter().all(|r| r.t == 4));
    assert_eq!(log_a, log_b);
    assert_eq!(a.store().to_bytes(), b.store().to_bytes());
    assert_eq!(a.steps_taken(), a.forwards());
}

#[test]
fn scale_groups_partition_grid() {
    let g = ScaleGroups::default_groups();
    let sizes: Vec<usize> = g.groups().iter().map(Vec::len).collect();
    assert_eq!(sizes, [7, 8, 7, 8]);
    assert_eq!(g.group_of(ScalePair { h: 1.7, w: 3.0 }).unwrap(), 3);
}
