//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any of them fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mvmilstein::brownian::{chen_aggregate, NoiseBlock, NoiseGenerator, DEFAULT_K};
use mvmilstein::commands::{execute, with_threads, Command};
use mvmilstein::config::RunConfig;
use mvmilstein::engine::{Integrator, ParticleEnsemble, SchemeConfig};
use mvmilstein::experiments::{divergence_probe, fraction_near};
use mvmilstein::models::{
    check_derivatives_fd, CuckerSmale, DoubleWell, FitzHughNagumo, LinearBenchmark, Model, ModelSpec,
};
use mvmilstein::taming::{verify_taming_assumptions, TamingKind, TamingSlot, TamingSpec};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> RunConfig {
    RunConfig::from_path(&configs_dir().join(name)).expect("shipped config parses")
}

fn ols_slope(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let resid = points
        .iter()
        .map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2))
        .sum::<f64>()
        .sqrt();
    (slope, resid)
}

fn order_one_convergence() -> Verdict {
    let cfg = load("dw_case2_converge.json");
    let dir = tempfile::tempdir().unwrap();
    let outcome = execute(Command::Converge, &cfg, dir.path()).expect("study runs");
    let fits = outcome.summary["fits"].as_array().unwrap();
    let mut ok = fits.len() == 4;
    let mut parts = Vec::new();
    for f in fits {
        let label = f["taming"].as_str().unwrap_or("?");
        match (f["fit"]["slope"].as_f64(), f["fit"]["residual_norm"].as_f64()) {
            (Some(s), Some(r)) => {
                ok &= (0.8..=1.2).contains(&s) && r < 0.3;
                parts.push(format!("{label} slope={s:.3} resid={r:.3}"));
            }
            _ => {
                ok = false;
                parts.push(format!("{label} no fit"));
            }
        }
    }
    verdict(ok, parts.join(", "))
}

fn linear_oracle() -> Verdict {
    let params = LinearBenchmark::default();
    let model = Model::LinearBenchmark(params);
    let (x0, horizon, paths) = (1.0, 1.0, 10_000);
    let mut points = Vec::new();
    for k in 6..=10 {
        let dt = 2f64.powi(-k);
        let cfg = SchemeConfig::classical(dt, horizon);
        let mut integ = Integrator::new(&model, &cfg, ParticleEnsemble::new(vec![x0; paths], 1).unwrap()).unwrap();
        let generator = NoiseGenerator::new(7, 1);
        let mut w = vec![0.0; paths];
        for step in 0..cfg.steps() {
            let noise = generator.sample_step(step as u64, paths, 1, dt, false);
            for (i, wi) in w.iter_mut().enumerate() {
                *wi += noise.dw(i, 0);
            }
            integ.advance(&noise).unwrap();
        }
        let (a, b) = (params.a, params.b);
        let mse: f64 = (0..paths)
            .map(|i| {
                let exact = x0 * ((a - b * b / 2.0) * horizon + b * w[i]).exp();
                (exact - integ.ensemble().state(i)[0]).powi(2)
            })
            .sum::<f64>()
            / paths as f64;
        points.push((dt.log2(), mse.sqrt().log2()));
    }
    let (slope, _) = ols_slope(&points);
    verdict((slope - 1.0).abs() <= 0.15, format!("slope={slope:.3}"))
}

fn divergence_demo() -> Verdict {
    let classical = load("dw_case1_probe_classical.json");
    let dt = classical.single_dt("probe").unwrap();
    let c = divergence_probe(classical.spec(), &classical.scheme_config(dt), classical.scheme.n, classical.seed).unwrap();
    let mut ok = c.divergence.fraction > 0.5;
    let mut parts = vec![format!("classical blown={:.3}", c.divergence.fraction)];

    let tamed = load("dw_case1_probe_tanh.json");
    let centers = vec![vec![-1.0], vec![1.0]];
    for spec in TamingSpec::families() {
        let mut sc = tamed.scheme_config(dt);
        sc.taming = spec;
        let o = divergence_probe(tamed.spec(), &sc, tamed.scheme.n, tamed.seed).unwrap();
        let near = fraction_near(&o.final_ensemble, &centers, 0.5);
        ok &= o.divergence.blown_up == 0 && near >= 0.95;
        parts.push(format!("{} blown={:.3} near={near:.3}", spec.label(), o.divergence.fraction));
    }
    verdict(ok, parts.join(", "))
}

fn taming_suite() -> Verdict {
    let grid: Vec<f64> = (4..=10).map(|k| 2f64.powi(-k)).collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, kind) in [TamingKind::Tanh, TamingKind::Sine, TamingKind::Tamed].into_iter().enumerate() {
        let r = verify_taming_assumptions(TamingSlot::new(kind), 100_000, &grid, 1e6, 100 + i as u64).unwrap();
        ok &= r.bound_violations == 0 && r.difference_violations == 0;
        parts.push(format!("{} violations={}", kind.name(), r.bound_violations + r.difference_violations));
    }
    verdict(ok, parts.join(", "))
}

fn max_block_diff(a: &NoiseBlock, b: &NoiseBlock) -> f64 {
    let (n, m) = (a.particles(), a.brownian_dim());
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..m {
            worst = worst.max((a.dw(i, j) - b.dw(i, j)).abs());
            for j2 in 0..m {
                worst = worst.max((a.own(i, j2, j) - b.own(i, j2, j)).abs());
            }
        }
    }
    if let (Some(x), Some(y)) = (a.cross_matrix(), b.cross_matrix()) {
        for (u, v) in x.iter().zip(y) {
            worst = worst.max((u - v).abs());
        }
    }
    worst
}

fn iterated_integrals() -> Verdict {
    // pairing identity on stacked cross blocks
    let (n, m, h) = (2, 3, 2f64.powi(-6));
    let generator = NoiseGenerator::new(21, DEFAULT_K);
    let mut pairing: f64 = 0.0;
    for step in 0..10_000u64 {
        let b = generator.sample_step(step, n, m, h, true);
        let dw = |p: usize| b.dw(p / m, p % m);
        for p in 0..n * m {
            for q in 0..n * m {
                let sum = b.cross(p, q).unwrap() + b.cross(q, p).unwrap();
                let want = if p == q { dw(p) * dw(p) - h } else { dw(p) * dw(q) };
                pairing = pairing.max((sum - want).abs());
            }
        }
    }

    // Monte Carlo moments of the two off-diagonal integrals
    let samples_per_step = 1000;
    let generator = NoiseGenerator::new(22, DEFAULT_K);
    let mut acc = [(0.0f64, 0.0f64); 2];
    let total = 1_000_000;
    for step in 0..(total / samples_per_step) as u64 {
        let b = generator.sample_step(step, samples_per_step, 2, h, false);
        for i in 0..samples_per_step {
            for (slot, (j2, j1)) in [(0, (1, 0)), (1, (0, 1))] {
                let x = b.own(i, j2, j1);
                acc[slot].0 += x;
                acc[slot].1 += x * x;
            }
        }
    }
    let target = h * h / 2.0;
    let mut mc_ok = true;
    let mut mc = Vec::new();
    for (s, s2) in acc {
        let mean = s / total as f64;
        let var = s2 / total as f64 - mean * mean;
        let se = (var / total as f64).sqrt();
        mc_ok &= mean.abs() <= 3.0 * se && ((var - target) / target).abs() <= 0.02;
        mc.push(format!("mean/se={:.2} var/target={:.4}", mean / se, var / target));
    }

    // associativity of Chen's relation with cross terms
    let generator = NoiseGenerator::new(23, DEFAULT_K);
    let mut assoc: f64 = 0.0;
    for t in 0..200u64 {
        let blocks: Vec<NoiseBlock> = (0..3).map(|k| generator.sample_step(3 * t + k, 3, 2, h, true)).collect();
        let mut left = blocks[0].clone();
        left.chain(&blocks[1]).unwrap();
        left.chain(&blocks[2]).unwrap();
        let mut bc = blocks[1].clone();
        bc.chain(&blocks[2]).unwrap();
        let mut right = blocks[0].clone();
        right.chain(&bc).unwrap();
        let flat = chen_aggregate(&blocks).unwrap();
        assoc = assoc.max(max_block_diff(&left, &right)).max(max_block_diff(&left, &flat));
    }

    let ok = pairing <= 1e-12 && mc_ok && assoc <= 1e-12;
    verdict(
        ok,
        format!("pairing={pairing:.1e}, {}, associativity={assoc:.1e}", mc.join(" ")),
    )
}

fn derivative_check() -> Verdict {
    let specs = [
        ModelSpec::new(Model::DoubleWell(DoubleWell::case1()), DoubleWell::case1_initial_law()).unwrap(),
        ModelSpec::new(Model::CuckerSmale(CuckerSmale::case1()), CuckerSmale::case1_initial_law()).unwrap(),
        ModelSpec::new(Model::FitzHughNagumo(FitzHughNagumo::default()), FitzHughNagumo::initial_law()).unwrap(),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let r = check_derivatives_fd(spec, 100, 300 + i as u64, 1e-5).unwrap();
        ok &= r.passed && r.skipped == 0;
        parts.push(format!("{} state={:.1e} measure={:.1e}", r.model, r.max_rel_err_state, r.max_rel_err_measure));
    }
    verdict(ok, parts.join(", "))
}

fn moment_boundedness() -> Verdict {
    let cfg = load("dw_case2_moments.json");
    let dir = tempfile::tempdir().unwrap();
    let outcome = execute(Command::Moments, &cfg, dir.path()).expect("monitor runs");
    let sups: Vec<f64> = outcome.summary["per_dt"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["sup"].as_f64().unwrap_or(f64::NAN))
        .collect();
    let lo = sups.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sups.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ratio = hi / lo;
    verdict(sups.len() == 5 && ratio <= 2.0, format!("sup ratio={ratio:.3} over {} steps", sups.len()))
}

fn snapshot_dir(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn determinism() -> Verdict {
    let small = |extra_scheme: &str, experiment: &str| {
        RunConfig::from_json_str(&format!(
            r#"{{"model": {{"preset": "cucker_smale.case1"}},
                "scheme": {{"kind": "taming_milstein", "taming": "MixM", "T": 0.25, "N": 40, "include_measure_term": true {extra_scheme}}},
                "experiment": {experiment}, "seed": 9}}"#
        ))
        .unwrap()
    };
    let cases = [
        (Command::Simulate, small(r#", "dt": 0.015625"#, "{}")),
        (Command::Probe, small(r#", "dt": 0.015625"#, "{}")),
        (Command::Moments, small(r#", "dt_list": [0.03125, 0.015625]"#, "{}")),
        (
            Command::Converge,
            small(r#", "dt_list": [0.0625, 0.03125]"#, r#"{"ref_dt": 0.0078125, "seeds": [1, 2]}"#),
        ),
        (Command::Validate, small(r#", "dt": 0.015625"#, r#"{"samples": 500, "fd_trials": 10}"#)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (cmd, cfg) in cases {
        let root = tempfile::tempdir().unwrap();
        let out = root.path().join("out");
        let mut runs = Vec::new();
        for threads in [1, 4] {
            let _ = fs::remove_dir_all(&out);
            with_threads(Some(threads), || execute(cmd, &cfg, &out)).unwrap().unwrap();
            runs.push(snapshot_dir(&out));
        }
        let same = runs[0] == runs[1];
        ok &= same;
        parts.push(format!("{}={}", cmd.name(), if same { "identical" } else { "differs" }));
    }
    verdict(ok, parts.join(", "))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("order-one convergence", order_one_convergence),
        ("linear benchmark oracle", linear_oracle),
        ("divergence demo", divergence_demo),
        ("taming operator suite", taming_suite),
        ("iterated integrals", iterated_integrals),
        ("derivative cross-check", derivative_check),
        ("moment boundedness", moment_boundedness),
        ("determinism across threads", determinism),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let v = run();
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("{tag} {name} ({:.1}s): {}", start.elapsed().as_secs_f64(), v.detail);
        failed += usize::from(!v.passed);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
