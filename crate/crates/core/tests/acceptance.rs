//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any of them fails.

use std::collections::{BTreeSet, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anysr::backbone::{extract_standalone, BackboneConfig, SharedWeightStore};
use anysr::bench::{flops_breakdown, flops_report, EvalMode, Image};
use anysr::config::RunConfig;
use anysr::interweave::{interweave, plan_interleave, InterleavePlan};
use anysr::numerics::{l1_loss, AdamState, Graph, Tensor};
use anysr::run::{cmd_eval, cmd_train, AnyStore};
use anysr::scale_space::{ScaleGroups, ScalePair, Task};
use anysr::trainer::{lr_schedule, TrainConfig, TrainOutputs, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn active_set(store: &SharedWeightStore<f64>, t: usize) -> BTreeSet<(String, usize)> {
    let view = store.view(t).unwrap();
    let mut set = BTreeSet::new();
    for (i, (name, p)) in store.names().iter().zip(store.params()).enumerate() {
        let region = view.region(i);
        for j in 0..p.len() {
            if region.contains(p.shape(), j) {
                set.insert((name.clone(), j));
            }
        }
    }
    set
}

fn containment() -> Outcome {
    let store = SharedWeightStore::<f64>::build(&BackboneConfig::default(), 0).unwrap();
    let sets: Vec<_> = (1..=4).map(|t| active_set(&store, t)).collect();
    for t in 0..3 {
        ensure!(
            sets[t].is_subset(&sets[t + 1]) && sets[t].len() < sets[t + 1].len(),
            "view({}) is not a strict subset of view({})",
            t + 1,
            t + 2
        );
    }
    let everything: usize = store.params().iter().map(Tensor::len).sum();
    ensure!(
        sets[3].len() == everything,
        "view(4) covers {} of {everything} scalars",
        sets[3].len()
    );
    // Whatever a subnet's gradient touches must lie inside its active set.
    let lr = Tensor::from_fn(&[3, 5, 6], |i| ((i * 37) % 11) as f64 / 11.0);
    for t in 1..=4 {
        let view = store.view(t).unwrap();
        let mut g = Graph::new();
        let vars = store.register(&mut g);
        let out = view
            .reconstruct(
                &mut g,
                &vars,
                &lr,
                ScalePair::square(1.2 + t as f64 * 0.6).unwrap(),
            )
            .unwrap();
        let loss = g.sum(out).unwrap();
        let grads = g.backward(loss).unwrap();
        for (i, name) in store.names().iter().enumerate() {
            if let Some(gr) = grads.by_key(i) {
                for (j, v) in gr.iter().enumerate() {
                    ensure!(
                        *v == 0.0 || sets[t - 1].contains(&(name.clone(), j)),
                        "subnet {t} has a gradient on inactive {name}[{j}]"
                    );
                }
            }
        }
    }
    let sizes: Vec<usize> = sets.iter().map(BTreeSet::len).collect();
    Ok(format!("active scalars {sizes:?}"))
}

fn random_scale_in(groups: &ScaleGroups, t: usize, rng: &mut ChaCha8Rng) -> ScalePair {
    let lo = if t == 1 {
        1.0
    } else {
        groups.upper_bounds()[t - 2]
    };
    let hi = groups.upper_bounds()[t - 1];
    let dom = lo + (hi - lo) * rng.gen_range(0.05..1.0);
    let other = rng.gen_range(1.0..=dom);
    if rng.gen_bool(0.5) {
        ScalePair { h: dom, w: other }
    } else {
        ScalePair { h: other, w: dom }
    }
}

fn extraction() -> Outcome {
    let cfg = BackboneConfig::default();
    let groups = ScaleGroups::default_groups();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut compared = 0;
    for t in 1..=4 {
        for k in 0..20 {
            let store = SharedWeightStore::<f64>::build(&cfg, 1000 * t as u64 + k).unwrap();
            let (h, w) = (rng.gen_range(3..8), rng.gen_range(3..8));
            let lr = Tensor::from_fn(&[3, h, w], |_| rng.gen::<f64>());
            let s = random_scale_in(&groups, t, &mut rng);
            let sliced = store.view(t).unwrap().predict(&lr, s).unwrap();
            let dense = extract_standalone(&store, t)
                .unwrap()
                .predict(&lr, s)
                .unwrap();
            ensure!(sliced.shape() == dense.shape(), "t={t}: shapes differ");
            let same = sliced
                .data()
                .iter()
                .zip(dense.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "t={t} triple {k}: outputs differ at scale {s}");
            compared += sliced.len();
        }
    }
    Ok(format!(
        "80 triples, {compared} output values bit-identical"
    ))
}

/// Walks the pooled features and emits the scale pair after each interval
/// boundary, for as many pairs as the width allows.
fn brute_force(c_in: usize, lambda: usize, w: f64, f: &[f64], s: (f64, f64)) -> Vec<f64> {
    let features = (c_in as f64 * w + 1e-9).floor() as usize;
    let pairs = (lambda as f64 * w + 1e-9).floor() as usize;
    let boundaries: Vec<usize> = (1..=pairs).map(|i| c_in * i / lambda).collect();
    let mut out = Vec::new();
    let mut next = 0;
    for j in 1..=features {
        out.push(f[j - 1]);
        while next < boundaries.len() && boundaries[next] == j {
            out.push(s.0);
            out.push(s.1);
            next += 1;
        }
    }
    assert_eq!(next, pairs, "every pair is emitted");
    out
}

fn interweave_oracle() -> Outcome {
    let s = ScalePair { h: 2.5, w: 3.5 };
    let mut cases = 0;
    for c_in in 2..=16 {
        for lambda in 1..=c_in {
            for w in [0.5, 0.7, 0.9, 1.0] {
                let plan = plan_interleave(c_in, lambda, w).unwrap();
                let f: Vec<f64> = (0..plan.features).map(|j| 10.0 + j as f64).collect();
                let got = interweave(&f, s, &plan).unwrap();
                let want = brute_force(c_in, lambda, w, &f, (s.h, s.w));
                ensure!(
                    got == want,
                    "c_in={c_in} λ={lambda} w={w}: {got:?} != {want:?}"
                );
                for &(a, b) in &plan.slots {
                    ensure!(
                        want[a - 1] == s.h && want[b - 1] == s.w,
                        "c_in={c_in} λ={lambda} w={w}: slot ({a},{b}) misplaced"
                    );
                }
                cases += 1;
            }
        }
    }
    let published = plan_interleave(64, 4, 1.0).unwrap().slots;
    ensure!(
        published == [(17, 18), (35, 36), (53, 54), (71, 72)],
        "λ=4, C_in=64 slots are {published:?}"
    );
    Ok(format!(
        "{cases} layouts match, C_in=64 λ=4 slots {published:?}"
    ))
}

fn is_prefix(a: &[usize], b: &[usize]) -> bool {
    a.len() <= b.len() && b[..a.len()] == *a
}

fn slot_stability() -> Outcome {
    let widths = [0.5, 0.7, 0.9, 1.0];
    let mut pairs = 0;
    for (c_in, lambda) in [(64, 4), (64, 8), (16, 4), (12, 5), (7, 3)] {
        let plans: Vec<_> = widths
            .iter()
            .map(|&w| plan_interleave(c_in, lambda, w).unwrap().scale_indices())
            .collect();
        for t in 0..4 {
            for u in t + 1..4 {
                ensure!(
                    is_prefix(&plans[t], &plans[u]),
                    "C_in={c_in} λ={lambda}: slots of w={} {:?} not a prefix of w={} {:?}",
                    widths[t],
                    plans[t],
                    widths[u],
                    plans[u]
                );
                pairs += 1;
            }
        }
    }
    let naive: Vec<_> = widths
        .iter()
        .map(|&w| InterleavePlan::naive(64, w).unwrap().scale_indices())
        .collect();
    for t in 0..4 {
        for u in t + 1..4 {
            ensure!(
                !is_prefix(&naive[t], &naive[u]),
                "naive slots of w={} and w={} agree",
                widths[t],
                widths[u]
            );
        }
    }
    Ok(format!("{pairs} width pairs stable, naive fails on all 6"))
}

fn noise_images(n: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..3 * size * size).map(|_| rng.gen::<f64>()).collect();
            Image::new(size, size, data).unwrap()
        })
        .collect()
}

fn frozen_suffix() -> Outcome {
    let cfg = BackboneConfig {
        c_in: 16,
        n_blocks: 2,
        hidden: 16,
        ase_bias: true,
        ..BackboneConfig::default()
    };
    let store = SharedWeightStore::<f64>::build(&cfg, 5).unwrap();
    let initial = store.clone();
    let groups = ScaleGroups::default_groups();
    let train = TrainConfig {
        steps: 50,
        lr0: 1e-3,
        batch: 2,
        patch: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(store, groups, train).unwrap();
    let data = noise_images(6, 24, 9);
    trainer
        .train_with(&data, &TrainOutputs::default(), |g, rng| {
            let s = random_scale_in(g, 1, rng);
            Task {
                subnet: 1,
                drawn_group: 1,
                scale: s,
            }
        })
        .unwrap();
    let view = initial.view(1).unwrap();
    let adam: &AdamState<f64> = trainer.adam();
    let (mut frozen, mut moved) = (0, 0);
    for (i, (before, after)) in initial
        .params()
        .iter()
        .zip(trainer.store().params())
        .enumerate()
    {
        let region = view.region(i);
        for j in 0..before.len() {
            let (b, a) = (before.data()[j], after.data()[j]);
            if region.contains(before.shape(), j) {
                moved += usize::from(a.to_bits() != b.to_bits());
                continue;
            }
            ensure!(
                a.to_bits() == b.to_bits()
                    && adam.first_moment[i][j].to_bits() == 0
                    && adam.second_moment[i][j].to_bits() == 0,
                "inactive {}[{j}] changed",
                initial.names()[i]
            );
            frozen += 1;
        }
    }
    ensure!(moved > 0, "no active weight was updated");
    Ok(format!(
        "{frozen} inactive scalars untouched, {moved} active ones updated"
    ))
}

fn gradient_check() -> Outcome {
    let cfg = BackboneConfig {
        ase_bias: true,
        ..BackboneConfig::default()
    };
    let base = SharedWeightStore::<f64>::build(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lr = Tensor::from_fn(&[3, 4, 4], |_| rng.gen::<f64>());
    let s = ScalePair { h: 2.0, w: 2.0 };
    let target = Tensor::from_fn(&[3, 8, 8], |_| rng.gen_range(-1.0..2.0));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in [1, 4] {
        let width = cfg.widths[t - 1];
        let view = base.view(t).unwrap();
        let mut g = Graph::new();
        let vars = base.register(&mut g);
        let out = view.reconstruct(&mut g, &vars, &lr, s).unwrap();
        let y = g.leaf(&target);
        let loss = g.l1_loss(out, y).unwrap();
        let grads = g.backward(loss).unwrap();

        let candidates: Vec<(usize, usize)> = base
            .params()
            .iter()
            .enumerate()
            .flat_map(|(i, p)| {
                let region = view.region(i);
                (0..p.len())
                    .filter(move |&j| region.contains(p.shape(), j))
                    .map(move |j| (i, j))
            })
            .collect();
        let mut picked = HashSet::new();
        while picked.len() < 200 {
            picked.insert(candidates[rng.gen_range(0..candidates.len())]);
        }
        let mut picked: Vec<_> = picked.into_iter().collect();
        picked.sort_unstable();
        let eval = |store: &SharedWeightStore<f64>| {
            let pred = store.view(t).unwrap().predict(&lr, s).unwrap();
            l1_loss(&pred, &target).unwrap()
        };
        let mut probe = base.clone();
        for (i, j) in picked {
            let analytic = grads.by_key(i).map_or(0.0, |g| g[j]);
            let x = base.params()[i].data()[j];
            let mut at = |d: f64| {
                probe.params_mut()[i].data_mut()[j] = x + d;
                let v = eval(&probe);
                probe.params_mut()[i].data_mut()[j] = x;
                v
            };
            // Five-point central stencil at a small step: few ReLU kinks fall
            // inside it and the truncation error stays far below tolerance.
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            ensure!(
                rel <= 1e-4,
                "w={width}: {}[{j}] analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})",
                base.names()[i]
            );
            worst = worst.max(rel);
        }
    }
    Ok(format!("400 parameters, worst relative error {worst:.2e}"))
}

fn flops_accounting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..50 {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let (cin, cout) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let input = Tensor::<f64>::from_fn(&[cin, h, w], |_| rng.gen());
        let kernel = Tensor::<f64>::from_fn(&[cout, cin, k, k], |_| rng.gen());
        let mut g = Graph::new();
        let x = g.input(input);
        let kv = g.leaf(&kernel);
        g.conv2d(x, kv, None, k / 2).unwrap();
        let closed = 2 * (k * k * cin * cout * h * w) as u64;
        ensure!(
            g.mac_flops() == closed,
            "case {case}: engine {} vs closed form {closed}",
            g.mac_flops()
        );
    }
    let groups = ScaleGroups::default_groups();
    let s = ScalePair::square(2.0).unwrap();
    for c_in in [8, 16, 64] {
        let cfg = BackboneConfig {
            c_in,
            n_blocks: 3,
            ..BackboneConfig::default()
        };
        let half = flops_breakdown(&cfg, 1, &groups, 12, 10, s).unwrap();
        let full = flops_breakdown(&cfg, 4, &groups, 12, 10, s).unwrap();
        let ratio = half.block_conv_mac as f64 / full.block_conv_mac as f64;
        ensure!(ratio == 0.5, "C_in={c_in}: block ratio {ratio}");
        // The analytic total agrees with what the engine records.
        let store = SharedWeightStore::<f64>::build(&cfg, 0).unwrap();
        for (t, expect) in [(1, half.mac), (4, full.mac)] {
            let mut g = Graph::new();
            let vars = store.register(&mut g);
            let lr = Tensor::full(&[3, 12, 10], 0.5);
            store
                .view(t)
                .unwrap()
                .reconstruct(&mut g, &vars, &lr, s)
                .unwrap();
            ensure!(
                g.mac_flops() == expect,
                "C_in={c_in} t={t}: engine {} vs analytic {expect}",
                g.mac_flops()
            );
        }
    }
    let cfg = BackboneConfig::default();
    let table = flops_report(&cfg, &groups, 48, 48, &[s], "x")
        .unwrap()
        .to_table();
    let cells = table
        .lines()
        .skip(2)
        .filter(|l| {
            let Some(open) = l.find(" (") else {
                return false;
            };
            let value = l[..open].rsplit(' ').next().unwrap_or("");
            let pct = &l[open + 2..];
            value.parse::<f64>().is_ok()
                && pct
                    .split_once("%)")
                    .is_some_and(|(p, _)| p.parse::<f64>().is_ok())
        })
        .count();
    ensure!(
        cells == 4,
        "value (percent) cells in {cells} of 4 rows:\n{table}"
    );
    Ok("50 convs exact, block ratio 0.5, table format ok".into())
}

fn sampler_stats() -> Outcome {
    let groups = ScaleGroups::default_groups();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let full = (0..n)
        .filter(|_| groups.sample_task(0.6, &mut rng).subnet == 4)
        .count() as f64
        / n as f64;
    let expect = 0.6 + 0.4 / 4.0;
    ensure!((full - expect).abs() <= 0.02, "P(t=T) = {full} at p=0.6");
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[groups.sample_task(0.0, &mut rng).subnet - 1] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    ensure!(
        freq.iter().all(|f| (f - 0.25).abs() <= 0.02),
        "p=0 frequencies {freq:?}"
    );
    Ok(format!("P(t=T)={full:.4} at p=0.6, {freq:.4?} at p=0"))
}

fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let d = cfg.decay_every;
    let got = [0, d, 2 * d].map(|k| lr_schedule(&cfg, k));
    ensure!(got == [1e-5, 5e-6, 2.5e-6], "lr at 0, d, 2d: {got:?}");
    Ok(format!("decay_every={d}: {got:?}"))
}

fn load_config(name: &str, overrides: &[(&str, String)]) -> RunConfig {
    let path = configs_dir().join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let owned: Vec<(String, String)> = overrides
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    RunConfig::parse_with_overrides(&text, &owned).unwrap()
}

fn ablation_reachability() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let names = [
        "anysr_subnet",
        "no_ase_subnet",
        "no_fi_subnet",
        "anysr_full",
        "no_ase_full",
        "no_fi_full",
        "p0",
        "p02",
        "p04",
        "p06",
        "p08",
    ];
    let mut labels = HashSet::new();
    let mut keys = HashSet::new();
    let mut rows = 0;
    for name in names {
        let out = |ext: &str| {
            dir.path()
                .join(format!("{name}.{ext}"))
                .display()
                .to_string()
        };
        let cfg = load_config(
            &format!("ablation/{name}.cfg"),
            &[
                ("train.steps", "10".into()),
                ("eval.synthetic_count", "2".into()),
                ("paths.checkpoint", out("ckpt")),
                ("paths.loss_log", out("loss.csv")),
                ("paths.report", out("csv")),
            ],
        );
        let (store, log) = cmd_train(&cfg).unwrap();
        ensure!(
            log.records.len() == 10,
            "{name}: {} steps",
            log.records.len()
        );
        let report = cmd_eval(&cfg, &store).unwrap();
        let csv = std::fs::read_to_string(out("csv")).unwrap();
        let label = cfg.variant_label();
        ensure!(!label.is_empty(), "{name}: empty label");
        ensure!(
            labels.insert(label.clone()),
            "{name}: label `{label}` repeats"
        );
        ensure!(
            report.rows.len() == cfg.eval.scales.len(),
            "{name}: {} rows",
            report.rows.len()
        );
        for r in &report.rows {
            ensure!(r.variant == label, "{name}: row labeled `{}`", r.variant);
            ensure!(
                csv.lines().filter(|l| l.starts_with(&r.variant)).count() >= 1,
                "{name}: CSV lacks `{label}` rows"
            );
            ensure!(
                keys.insert((r.variant.clone(), r.mode.to_string(), r.scale.to_string())),
                "{name}: duplicate row"
            );
            rows += 1;
        }
        if name.ends_with("_full") {
            ensure!(
                report
                    .rows
                    .iter()
                    .all(|r| r.mode == EvalMode::Full && r.t == 4),
                "{name}: full-width arm used a smaller subnet"
            );
        }
    }
    Ok(format!("{} configs, {rows} distinct rows", names.len()))
}

struct DeskRun {
    checkpoint: Vec<u8>,
    csvs: Vec<(String, Vec<u8>)>,
    subnet_x2_t2: (f64, f64),
    gaps: Vec<(String, f64)>,
}

fn desk_pipeline(dir: &Path) -> Result<DeskRun, String> {
    let p = |f: &str| dir.join(f).display().to_string();
    let pre = load_config(
        "desk_pretrain.cfg",
        &[
            ("paths.checkpoint", p("pretrain.ckpt")),
            ("paths.loss_log", p("pretrain_loss.csv")),
        ],
    );
    cmd_train(&pre).map_err(|e| e.to_string())?;
    let any = load_config(
        "desk_anysr.cfg",
        &[
            ("paths.init_checkpoint", p("pretrain.ckpt")),
            ("paths.checkpoint", p("anysr.ckpt")),
            ("paths.loss_log", p("anysr_loss.csv")),
            ("paths.report", p("eval_subnet.csv")),
        ],
    );
    let (store, _) = cmd_train(&any).map_err(|e| e.to_string())?;
    let sub = cmd_eval(&any, &store).map_err(|e| e.to_string())?;
    let mut full_cfg = any.clone();
    full_cfg.eval.mode = EvalMode::Full;
    full_cfg.paths.report = Some(dir.join("eval_full.csv"));
    let full = cmd_eval(&full_cfg, &store).map_err(|e| e.to_string())?;

    let x2 = sub
        .rows
        .iter()
        .find(|r| r.scale == ScalePair { h: 2.0, w: 2.0 })
        .ok_or("no ×2 row")?;
    ensure!(x2.t == 2, "×2 served by subnet {}", x2.t);
    let gaps = sub
        .rows
        .iter()
        .zip(&full.rows)
        .map(|(a, b)| (a.scale.to_string(), b.psnr_model - a.psnr_model))
        .collect();
    let reload = AnyStore::load(&dir.join("anysr.ckpt")).map_err(|e| e.to_string())?;
    ensure!(
        reload == store,
        "saved checkpoint does not reload to the trained store"
    );
    let csvs = [
        "pretrain_loss.csv",
        "anysr_loss.csv",
        "eval_subnet.csv",
        "eval_full.csv",
    ]
    .iter()
    .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
    .collect();
    Ok(DeskRun {
        checkpoint: std::fs::read(dir.join("anysr.ckpt")).unwrap(),
        csvs,
        subnet_x2_t2: (x2.psnr_model, x2.psnr_bicubic),
        gaps,
    })
}

fn desk_end_to_end(run: &DeskRun) -> Outcome {
    let (model, bicubic) = run.subnet_x2_t2;
    ensure!(
        model - bicubic >= 0.3,
        "t=2 at ×2: {model:.3} dB vs bicubic {bicubic:.3} dB"
    );
    for (s, gap) in &run.gaps {
        ensure!(gap.abs() <= 0.5, "×{s}: full minus subnet {gap:+.3} dB");
    }
    let gaps: Vec<String> = run
        .gaps
        .iter()
        .map(|(s, g)| format!("×{s} {g:+.2}"))
        .collect();
    Ok(format!(
        "t=2 ×2 {model:.2} dB vs bicubic {bicubic:.2} dB; full−subnet {}",
        gaps.join(", ")
    ))
}

fn reproducible(a: &DeskRun, b: &DeskRun) -> Outcome {
    ensure!(a.checkpoint == b.checkpoint, "checkpoints differ");
    for ((name, x), (_, y)) in a.csvs.iter().zip(&b.csvs) {
        ensure!(x == y, "{name} differs");
    }
    Ok(format!(
        "checkpoint ({} bytes) and {} CSVs identical",
        a.checkpoint.len(),
        a.csvs.len()
    ))
}

fn run(id: usize, title: &str, failures: &mut usize, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => println!("criterion {id:>2} {title}: pass ({secs:.1}s) {detail}"),
        Err(why) => {
            *failures += 1;
            println!("criterion {id:>2} {title}: FAIL ({secs:.1}s) {why}");
        }
    }
}

fn main() {
    // Criterion numbers given as arguments restrict the run to those.
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let mut failures = 0;
    let quick: [(usize, &str, Check); 10] = [
        (1, "containment chain", containment),
        (2, "subnet extraction", extraction),
        (3, "interweaving oracle", interweave_oracle),
        (4, "scale-slot stability", slot_stability),
        (5, "frozen suffix", frozen_suffix),
        (6, "gradient check", gradient_check),
        (7, "FLOPs accounting", flops_accounting),
        (8, "sampler statistics", sampler_stats),
        (9, "learning-rate schedule", schedule),
        (11, "ablation reachability", ablation_reachability),
    ];
    for (id, title, f) in quick {
        if wanted(id) {
            run(id, title, &mut failures, f);
        }
    }

    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut first = None;
    if wanted(10) || wanted(12) {
        run(10, "desk end-to-end", &mut failures, || {
            let r = desk_pipeline(dirs[0].path());
            let outcome = r.as_ref().map_err(Clone::clone).and_then(desk_end_to_end);
            first = Some(r);
            outcome
        });
    }
    if wanted(12) {
        run(12, "reproducibility", &mut failures, || {
            let a = first
                .as_ref()
                .ok_or("first run missing")?
                .as_ref()
                .map_err(Clone::clone)?;
            let b = desk_pipeline(dirs[1].path())?;
            reproducible(a, &b)
        });
    }

    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all selected criteria pass");
}
