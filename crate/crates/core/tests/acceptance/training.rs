use std::path::PathBuf;
use std::time::Instant;

use maxl::data::{load_for_config, DatasetKind, HierarchySpec, Method, RunConfig};
use maxl::meta::{train, EpochMetrics};

use crate::{ensure, Outcome};

fn run(cfg: &RunConfig) -> Result<(EpochMetrics, f64), String> {
    let start = Instant::now();
    let (tr, te) = load_for_config(cfg).map_err(|e| e.to_string())?;
    let out = train(cfg, &tr, &te, None).map_err(|e| format!("{} seed {}: {e}", cfg.method, cfg.seed))?;
    let last = out.metrics.last().cloned().ok_or("no epochs recorded")?;
    Ok((last, start.elapsed().as_secs_f64()))
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn collapse_direction() -> Outcome {
    let mut by_lambda = Vec::new();
    for lambda in [0.2, 0.0] {
        let mut util = Vec::new();
        for seed in 0..5 {
            let mut cfg = RunConfig::defaults(DatasetKind::Synthetic);
            cfg.hierarchy = HierarchySpec::Balanced(4);
            // At the default 1e-3 the generator barely moves in 360 steps.
            cfg.beta = 1e-2;
            cfg.lambda = lambda;
            cfg.seed = seed;
            let (m, _) = run(&cfg)?;
            util.push(m.label_utilization.ok_or("MAXL run without label utilization")?);
        }
        by_lambda.push(util);
    }
    let (with, without) = (&by_lambda[0], &by_lambda[1]);
    let summary = format!(
        "utilization λ=0.2 {} (median {:.3}), λ=0 {} (median {:.3})",
        fmt(with),
        median(with),
        fmt(without),
        median(without)
    );
    ensure!(median(with) >= median(without), "median ordering violated: {summary}");
    ensure!(with.iter().all(|&u| u >= 0.9), "a λ=0.2 run is below 0.9: {summary}");
    Ok(summary)
}

pub fn mnist_non_inferiority() -> Outcome {
    const LIMIT_SECS: f64 = 1800.0;
    let dir = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist10k"));
    let mut acc = [Vec::new(), Vec::new()];
    let mut slowest: f64 = 0.0;
    for (slot, method) in [Method::Maxl, Method::Single].into_iter().enumerate() {
        for seed in 0..3 {
            let mut cfg = RunConfig::defaults(DatasetKind::Mnist);
            cfg.data_dir = dir.clone();
            cfg.hierarchy = HierarchySpec::Balanced(3);
            cfg.method = method;
            cfg.seed = seed;
            let (m, secs) = run(&cfg)?;
            println!(
                "    mnist {method} seed {seed}: accuracy {:.4} in {secs:.0} s",
                m.test_accuracy
            );
            slowest = slowest.max(secs);
            acc[slot].push(m.test_accuracy);
        }
    }
    let (maxl, _) = mean_std(&acc[0]);
    let (single, _) = mean_std(&acc[1]);
    let summary = format!(
        "MAXL {} mean {:.4}, single {} mean {:.4}, slowest run {slowest:.0} s",
        fmt(&acc[0]),
        maxl,
        fmt(&acc[1]),
        single
    );
    ensure!(slowest <= LIMIT_SECS, "a run exceeded {LIMIT_SECS:.0} s: {summary}");
    // 0.1 percentage points of accuracy.
    ensure!(
        maxl >= single - 1e-3,
        "MAXL below single task by more than 0.1 pp: {summary}"
    );
    Ok(summary)
}

pub fn baseline_parity() -> Outcome {
    let mut acc = [Vec::new(), Vec::new()];
    for (slot, method) in [Method::Random, Method::Single].into_iter().enumerate() {
        for seed in 0..3 {
            let mut cfg = RunConfig::defaults(DatasetKind::Synthetic);
            cfg.hierarchy = HierarchySpec::Balanced(1);
            cfg.method = method;
            cfg.seed = seed;
            acc[slot].push(run(&cfg)?.0.test_accuracy);
        }
    }
    let (rm, rs) = mean_std(&acc[0]);
    let (sm, ss) = mean_std(&acc[1]);
    let summary = format!(
        "random {} = {rm:.4} ± {rs:.4}, single {} = {sm:.4} ± {ss:.4}",
        fmt(&acc[0]),
        fmt(&acc[1])
    );
    ensure!(
        rm - rs <= sm + ss && sm - ss <= rm + rs,
        "±1 std intervals are disjoint: {summary}"
    );
    Ok(summary)
}
