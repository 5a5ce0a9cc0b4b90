//! Acceptance criteria, one line each. Runs without the libtest harness so the
//! verdicts are always printed; exits nonzero if any criterion fails.
//!
//! `BLENDA_ACCEPTANCE=1,3,5` restricts the run to the listed criteria.

use std::path::Path;
use std::time::{Duration, Instant};

use blenda::ablation::{
    run_ablation, workers_from_env, AblationConfig, AblationReport, Variant, TABLE_FILE,
};
use blenda::adaptation::{
    adversarial_loss_hard, adversarial_loss_mixed, step_gradients, train_step, AdaptationConfig,
    AdversarialMode, Learner, Objective, METRICS_FILE,
};
use blenda::autodiff::{GrlConfig, Tape, Tensor, Var};
use blenda::dataset::{generate_benchmark, pair_for_iteration, BenchmarkConfig};
use blenda::imaging::{blend_images, ImageBuffer};
use blenda::schedule::{compute_delta, BlendSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Criterion = (u32, &'static str, fn() -> Verdict);

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, limit_secs: f64) -> bool {
    elapsed.as_secs_f64() < limit_secs
}

fn schedule_exactness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..1000 {
        let gamma: f64 = rng.random_range(0.0..=1.0);
        let alpha: f64 = rng.random_range(0.1..30.0);
        let beta: f64 = rng.random_range(0.01..=1.0);
        let s = BlendSchedule::new(alpha, beta, 1000).unwrap();
        let got = compute_delta(gamma, &s).unwrap();
        let want = beta * (alpha * gamma / 2.0).tanh();
        if want != 0.0 {
            worst = worst.max(((got - want) / want).abs());
        } else {
            ok &= got == 0.0;
        }
        ok &= compute_delta(0.0, &s).unwrap() == 0.0;
        let mut prev = -1.0;
        for k in 0..=100 {
            let d = compute_delta(k as f64 / 100.0, &s).unwrap();
            ok &= d > prev && d < beta;
            prev = d;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        ok && worst < 1e-12 && within(elapsed, 1.0),
        format!("max relative error {worst:.2e}, zero/monotone/bound {ok}, {elapsed:.2?}"),
    )
}

fn spot_values() -> Verdict {
    let at = |beta| compute_delta(1.0, &BlendSchedule::new(20.0, beta, 1).unwrap()).unwrap();
    let (one, half) = (at(1.0), at(0.5));
    verdict(
        one > 1.0 - 5e-9 && one < 1.0 && half > 0.5 - 3e-9 && half < 0.5,
        format!("beta 1.0 -> {one:.17}, beta 0.5 -> {half:.17}"),
    )
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageBuffer {
    ImageBuffer::new(h, w, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn blend_identities() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let bits = |img: &ImageBuffer| img.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let (mut exact, mut bounded) = (true, true);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..48), rng.random_range(1..48));
        let s = random_image(&mut rng, h, w);
        let t = random_image(&mut rng, h, w);
        exact &= bits(&blend_images(&s, &t, 0.0).unwrap()) == bits(&s);
        exact &= bits(&blend_images(&s, &t, 1.0).unwrap()) == bits(&t);
        let delta: f64 = rng.random();
        let b = blend_images(&s, &t, delta).unwrap();
        for ((&o, &x), &y) in b.data().iter().zip(s.data()).zip(t.data()) {
            bounded &= o >= x.min(y) && o <= x.max(y);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        exact && bounded && within(elapsed, 5.0),
        format!("bitwise endpoints {exact}, convex bounds {bounded}, {elapsed:.2?}"),
    )
}

fn loss_reduction() -> Verdict {
    let mut worst = 0.0f64;
    for i in 0..10_000 {
        let disc = (i as f64 + 0.5) / 10_000.0;
        for d in [0.0, 1.0] {
            let gap =
                adversarial_loss_mixed(d, disc).unwrap() - adversarial_loss_hard(d, disc).unwrap();
            worst = worst.max(gap.abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut furthest = 0.0f64;
    for _ in 0..20 {
        let d: f64 = rng.random();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..100_000 {
            let disc = (i as f64 + 0.5) / 100_000.0;
            let l = adversarial_loss_mixed(d, disc).unwrap();
            if l > best.0 {
                best = (l, disc);
            }
        }
        furthest = furthest.max((best.1 - d).abs());
    }
    verdict(
        worst <= 1e-15 && furthest < 1e-3,
        format!("mixed vs hard max gap {worst:.1e}, maximizer distance {furthest:.1e}"),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

type Build = dyn for<'a> Fn(&'a Tape, &[Var<'a>]) -> Var<'a>;

fn analytic(inputs: &[Tensor], build: &Build) -> (f64, Vec<Tensor>) {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = build(&tape, &vars);
    out.backward().unwrap();
    (out.scalar(), vars.iter().map(|v| v.grad()).collect())
}

/// Relative error between analytic and central-difference gradients.
fn gradient_error(inputs: &[Tensor], build: &Build) -> f64 {
    let h = 1e-5;
    let (_, grads) = analytic(inputs, build);
    let mut worst = 0.0f64;
    for (k, g) in grads.iter().enumerate() {
        let mut numeric = Vec::with_capacity(g.len());
        for i in 0..g.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            numeric.push((analytic(&plus, build).0 - analytic(&minus, build).0) / (2.0 * h));
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut g.data().iter().zip(&numeric).map(|(a, b)| a - b));
        let scale = norm(&mut g.data().iter().copied()) + norm(&mut numeric.iter().copied());
        worst = worst.max(if scale < 1e-12 { diff } else { diff / scale });
    }
    worst
}

fn weighted<'a>(tape: &'a Tape, x: Var<'a>, seed: u64) -> Var<'a> {
    let (r, c) = x.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x.mul(&tape.leaf(random_tensor(&mut rng, r, c, -1.0, 1.0)))
        .unwrap()
        .sum()
}

fn mlp<'a>(x: Var<'a>, layers: &[Var<'a>]) -> Var<'a> {
    let mut h = x;
    let n = layers.len() / 2;
    for (i, pair) in layers.chunks(2).enumerate() {
        h = h.matmul(&pair[0]).unwrap().add_row(&pair[1]).unwrap();
        if i + 1 < n {
            h = h.relu();
        }
    }
    h
}

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
    let b = random_tensor(&mut rng, 4, 2, -1.0, 1.0);
    let c = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
    let row = random_tensor(&mut rng, 1, 4, -1.0, 1.0);
    let pos = random_tensor(&mut rng, 3, 4, 0.2, 2.0);
    let cases: Vec<(Vec<Tensor>, Box<Build>)> = vec![
        (
            vec![a.clone(), b],
            Box::new(|tp, v| weighted(tp, v[0].matmul(&v[1]).unwrap(), 1)),
        ),
        (
            vec![a.clone(), c.clone()],
            Box::new(|tp, v| weighted(tp, v[0].add(&v[1]).unwrap(), 2)),
        ),
        (
            vec![a.clone(), c.clone()],
            Box::new(|tp, v| weighted(tp, v[0].sub(&v[1]).unwrap(), 3)),
        ),
        (
            vec![a.clone(), c],
            Box::new(|tp, v| weighted(tp, v[0].mul(&v[1]).unwrap(), 4)),
        ),
        (
            vec![a.clone(), row],
            Box::new(|tp, v| weighted(tp, v[0].add_row(&v[1]).unwrap(), 5)),
        ),
        (
            vec![a.clone()],
            Box::new(|tp, v| weighted(tp, v[0].scale(-2.5), 6)),
        ),
        (
            vec![a.clone()],
            Box::new(|tp, v| weighted(tp, v[0].relu(), 7)),
        ),
        (
            vec![a.clone()],
            Box::new(|tp, v| weighted(tp, v[0].sigmoid(), 8)),
        ),
        (
            vec![pos],
            Box::new(|tp, v| weighted(tp, v[0].log().unwrap(), 9)),
        ),
        (
            vec![a.clone()],
            Box::new(|tp, v| weighted(tp, v[0].clamp(-0.5, 0.5), 10)),
        ),
        (vec![a.clone()], Box::new(|_, v| v[0].sum())),
        (vec![a.clone()], Box::new(|_, v| v[0].mean())),
        (
            vec![a.clone()],
            Box::new(|tp, v| weighted(tp, v[0].mean_rows(), 11)),
        ),
        (
            vec![a.clone()],
            Box::new(|tp, v| weighted(tp, v[0].mean_cols(), 12)),
        ),
        (
            vec![a.clone()],
            Box::new(|tp, v| weighted(tp, v[0].transpose(), 13)),
        ),
        (
            vec![a],
            Box::new(|tp, v| weighted(tp, v[0].log_softmax(), 14)),
        ),
    ];
    let mut worst_op = 0.0f64;
    for (inputs, build) in &cases {
        worst_op = worst_op.max(gradient_error(inputs, build.as_ref()));
    }

    let mut worst_net = 0.0f64;
    for trial in 0..3 {
        let depth = rng.random_range(2..=4);
        let mut dims = vec![rng.random_range(2..10)];
        for _ in 0..depth {
            dims.push(rng.random_range(2..24));
        }
        let batch = rng.random_range(1..5);
        let mut inputs = vec![random_tensor(&mut rng, batch, dims[0], -1.0, 1.0)];
        for w in dims.windows(2) {
            let s = (1.0 / w[0] as f64).sqrt();
            inputs.push(random_tensor(&mut rng, w[0], w[1], -s, s));
            inputs.push(random_tensor(&mut rng, 1, w[1], -0.1, 0.1));
        }
        let build: Box<Build> = Box::new(move |_, v| {
            let out = mlp(v[0], &v[1..]);
            match trial {
                0 => out.log_softmax().mean(),
                1 => out.sigmoid().clamp(1e-7, 1.0 - 1e-7).log().unwrap().mean(),
                _ => out.mean_rows().mul(&out.mean_rows()).unwrap().sum(),
            }
        });
        worst_net = worst_net.max(gradient_error(&inputs, build.as_ref()));
    }

    // reversal is invisible to finite differences; compare it with identity instead
    let inputs = vec![
        random_tensor(&mut rng, 3, 5, -1.0, 1.0),
        random_tensor(&mut rng, 5, 4, -0.5, 0.5),
        random_tensor(&mut rng, 4, 1, -0.5, 0.5),
    ];
    let run = |reverse: bool| {
        analytic(&inputs, &move |_, v| {
            let f = v[0].matmul(&v[1]).unwrap().relu();
            let q = if reverse {
                f.grl(GrlConfig::default())
            } else {
                f
            };
            q.matmul(&v[2]).unwrap().sigmoid().log().unwrap().mean()
        })
    };
    let (rev, plain) = (run(true).1, run(false).1);
    let mut grl_gap = 0.0f64;
    for k in 0..2 {
        for (x, y) in rev[k].data().iter().zip(plain[k].data()) {
            grl_gap = grl_gap.max((x + y).abs());
        }
    }
    let grl_ok = grl_gap < 1e-10 && rev[2] == plain[2];

    let elapsed = start.elapsed();
    verdict(
        worst_op < 1e-5 && worst_net < 1e-5 && grl_ok && within(elapsed, 30.0),
        format!("ops {worst_op:.1e}, composed nets {worst_net:.1e}, reversal gap {grl_gap:.1e}, {elapsed:.2?}"),
    )
}

fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Share of coordinates with a non-negligible gradient whose update has sign
/// `sign * grad`, after removing the decoupled weight decay.
fn agreement(old: &[f64], new: &[f64], grad: &[f64], decay: f64, sign: f64) -> (usize, usize) {
    let mut hits = 0;
    let mut counted = 0;
    for ((&o, &n), &g) in old.iter().zip(new).zip(grad) {
        if g.abs() <= 1e-12 {
            continue;
        }
        counted += 1;
        let update = n - o * decay;
        if update * sign * g > 0.0 {
            hits += 1;
        }
    }
    (hits, counted)
}

fn min_max_realization() -> Verdict {
    let cfg = AdaptationConfig {
        benchmark: BenchmarkConfig {
            source_count: 8,
            target_count: 8,
            ..BenchmarkConfig::default()
        },
        ..AdaptationConfig::default()
    };
    let bench = generate_benchmark(&cfg.benchmark, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut report = Vec::new();
    let mut pass = true;
    for mode in [AdversarialMode::Mixed, AdversarialMode::Hard] {
        let cfg = AdaptationConfig {
            adversarial_mode: mode,
            ..cfg
        };
        let mut learner = Learner::new(&cfg).unwrap();
        // a zero head removes the supervised gradient from the backbone
        learner.model.zero_head();
        let (blended, mix) =
            pair_for_iteration(&bench.source, &bench.target, 0.6, &mut rng).unwrap();
        let grad =
            step_gradients(&learner, &blended, &mix, 0.6, &cfg, Objective::Adversarial).unwrap();
        let before = learner.clone();
        train_step(&mut learner, &blended, &mix, 0.6, &cfg).unwrap();
        let decay = 1.0 - cfg.optimizer.lr * cfg.optimizer.weight_decay;

        let (dh, dn) = agreement(
            &flat(before.discs.params()),
            &flat(learner.discs.params()),
            &flat(&grad.discs),
            decay,
            1.0,
        );
        let backbone = blenda::adaptation::DetectorModel::backbone_indices();
        let (bh, bn) = agreement(
            &flat(&before.model.params()[backbone.clone()]),
            &flat(&learner.model.params()[backbone.clone()]),
            &flat(&grad.model[backbone]),
            decay,
            -1.0,
        );
        let rate = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
        pass &= rate(dh, dn) >= 0.99 && rate(bh, bn) >= 0.99;
        report.push(format!(
            "{mode:?}: discriminators {dh}/{dn} along +grad, backbone {bh}/{bn} along -grad"
        ));
    }
    verdict(pass, report.join("; "))
}

fn desk_adaptation() -> Verdict {
    let start = Instant::now();
    let workers = workers_from_env().unwrap();
    let report = run_ablation(
        &AdaptationConfig::default(),
        &AblationConfig::default(),
        workers,
        None,
    )
    .unwrap();
    let median = |delta: Option<f64>| {
        report
            .row(Variant {
                static_delta: delta,
                mode: AdversarialMode::Mixed,
            })
            .unwrap()
            .median()
    };
    let dynamic = median(None);
    let s07 = median(Some(0.7));
    let s10 = median(Some(1.0));
    let source_only = report.baseline.median();
    let pass = dynamic > s07 && s07 > source_only && s10 < s07 && dynamic - source_only >= 0.05;
    verdict(
        pass,
        format!(
            "median mAP dynamic {dynamic:.4}, static 0.7 {s07:.4}, static 1.0 {s10:.4}, source-only {source_only:.4} \
             (mixed loss, seeds {:?}, {:.0?})",
            report.seeds,
            start.elapsed()
        ),
    )
}

fn small_grid() -> (AdaptationConfig, AblationConfig) {
    let mut base = AdaptationConfig {
        benchmark: BenchmarkConfig {
            source_count: 10,
            target_count: 8,
            ..BenchmarkConfig::default()
        },
        pretrain_iterations: 8,
        iterations_per_epoch: 6,
        ..AdaptationConfig::default()
    };
    base.schedule.total_iterations = 12;
    let grid = AblationConfig {
        seeds: vec![3, 4],
        ..AblationConfig::default()
    };
    (base, grid)
}

fn run_small(out: &Path) -> AblationReport {
    let (base, grid) = small_grid();
    run_ablation(&base, &grid, 2, Some(out)).unwrap()
}

fn mixed_vs_hard() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run_small(a.path()), run_small(b.path()));
    let modes = |r: &AblationReport, m| {
        r.rows
            .iter()
            .filter(|row| row.variant.is_some_and(|v| v.mode == m))
            .count()
    };
    let both = modes(&ra, AdversarialMode::Mixed) == 4 && modes(&ra, AdversarialMode::Hard) == 4;
    let finite = ra.rows.iter().all(|r| r.maps.iter().all(|m| m.is_finite()));
    let md = ra.markdown();
    let compared = md.contains("mixed minus hard") && md.matches(": ").count() >= 4;
    verdict(
        both && finite && compared && ra == rb,
        format!(
            "4 mixed + 4 hard rows {both}, comparison in report {compared}, repeat identical {}",
            ra == rb
        ),
    )
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_small(a.path());
    run_small(b.path());
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    let same_set = fa == fb
        && fa.iter().any(|p| p.ends_with(TABLE_FILE))
        && fa.iter().any(|p| p.ends_with(METRICS_FILE));
    let identical = same_set
        && fa.iter().all(|p| {
            std::fs::read(a.path().join(p)).unwrap() == std::fs::read(b.path().join(p)).unwrap()
        });
    verdict(
        identical,
        format!(
            "{} csv files compared byte-for-byte, identical {identical}",
            fa.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "schedule exactness", schedule_exactness),
        (2, "schedule spot values", spot_values),
        (3, "blend identities", blend_identities),
        (4, "loss reduction", loss_reduction),
        (5, "gradient correctness", gradient_correctness),
        (6, "min-max realization", min_max_realization),
        (7, "desk-scale adaptation effect", desk_adaptation),
        (8, "mixed vs hard loss", mixed_vs_hard),
        (9, "reproducibility", reproducibility),
    ];
    let only: Option<Vec<u32>> = std::env::var("BLENDA_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let v = run();
        println!(
            "criterion {id} {name}: {} ({})",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
