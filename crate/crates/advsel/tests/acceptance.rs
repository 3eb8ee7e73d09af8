//! Acceptance criteria, one PASS/FAIL line each. Run with `cargo test --test acceptance`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use advsel::asymptotics::{
    build_limit_profile, classify, exponential_tail_fit, stationarity_residual, Verdict,
};
use advsel::carrying::{build_compartments, predict_r_limit, Carrying};
use advsel::characteristics::flow_forward;
use advsel::characteristics::flow_backward;
use advsel::cli::{is_exponential, route_gap};
use advsel::config;
use advsel::dynamics::{simulate_compartments, simulate_particles, DensityEvaluator, RhoTrajectory};
use advsel::model::{validate, NumericConfig, ProblemSpec, RawProblem};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::TestRunner;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(path: &Path) -> ProblemSpec {
    let raw = config::load_problem(path, Vec::new()).unwrap_or_else(|e| panic!("{e}"));
    validate(&raw).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn bundled() -> Vec<(String, ProblemSpec)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(configs_dir())
        .expect("configs directory")
        .map(|e| e.expect("entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    paths.iter().map(|p| (p.file_stem().unwrap().to_string_lossy().into_owned(), load(p))).collect()
}

fn problem(f: &str, r: &str, n0: &str, domain: [f64; 2]) -> ProblemSpec {
    let raw = RawProblem {
        f: f.into(),
        r: r.into(),
        n0: n0.into(),
        domain,
        alpha_hint: vec![],
        numerics: NumericConfig::default(),
    };
    validate(&raw).unwrap_or_else(|e| panic!("{f} / {r} / {n0}: {e}"))
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Runs of every bundled config, computed once and shared by several criteria.
struct Runs {
    items: Vec<BundledRun>,
}

struct BundledRun {
    name: String,
    spec: ProblemSpec,
    particles: RhoTrajectory,
    compartments: RhoTrajectory,
    doubled: RhoTrajectory,
}

impl Runs {
    fn compute() -> Runs {
        let items = bundled()
            .into_iter()
            .map(|(name, spec)| {
                let t = spec.numerics.t_horizon;
                let n = spec.numerics.particles;
                let particles = simulate_particles(&spec, t, n).unwrap_or_else(|e| panic!("{name}: {e}")).trajectory;
                let doubled =
                    simulate_particles(&spec, t, 2 * n).unwrap_or_else(|e| panic!("{name}: {e}")).trajectory;
                let comps = build_compartments(&spec);
                let compartments = simulate_compartments(&spec, &comps, t).unwrap_or_else(|e| panic!("{name}: {e}"));
                BundledRun { name, spec, particles, compartments, doubled }
            })
            .collect();
        Runs { items }
    }
}

fn red_run() -> Outcome {
    let spec = load(&configs_dir().join("red.toml"));
    let started = Instant::now();
    let run = simulate_particles(&spec, 40.0, 512).map_err(|e| e.to_string())?;
    let pred = classify(&spec);
    let elapsed = started.elapsed().as_secs_f64();
    let rho = run.trajectory.final_rho();
    let ens = &run.ensemble;
    let near: f64 = ens.positions.iter().zip(&ens.masses).filter(|(x, _)| (*x - 1.0).abs() <= 0.05).map(|p| p.1).sum();
    let share = near / ens.total_mass();
    let verdict_ok = matches!(pred.verdict, Verdict::Dirac { location, mass }
        if (location - 1.0).abs() <= 1e-9 && (mass - 5.5).abs() <= 1e-9);
    check(
        (rho - 5.5).abs() <= 0.02 && share >= 0.99 && verdict_ok && elapsed <= 10.0,
        format!("rho(40) = {rho:.6}, share near 1 = {share:.6}, verdict {:?}, {elapsed:.2} s", pred.verdict),
    )
}

fn blue_run() -> Outcome {
    let spec = load(&configs_dir().join("blue.toml"));
    let started = Instant::now();
    let run = simulate_particles(&spec, 40.0, 512).map_err(|e| e.to_string())?;
    let pred = classify(&spec);
    let rho = run.trajectory.final_rho();
    // Midpoint rule on a fine grid; both densities are smooth inside (0, 1).
    let dens = DensityEvaluator::new(&spec, &run.trajectory);
    let cells = 20_000;
    let h = 1.0 / cells as f64;
    let mut l1 = 0.0;
    for k in 0..cells {
        let x = (k as f64 + 0.5) * h;
        let n = dens.eval(40.0, x).map_err(|e| e.to_string())?;
        l1 += (n - 15.0 * (1.0 - x).powi(2)).abs() * h;
    }
    let elapsed = started.elapsed().as_secs_f64();
    let verdict_ok = matches!(pred.verdict, Verdict::Profile { rho_inf, alpha, .. }
        if (rho_inf - 5.0).abs() <= 1e-9 && alpha == 0.0);
    check(
        (rho - 5.0).abs() <= 0.02 && l1 <= 0.25 && verdict_ok && elapsed <= 10.0,
        format!("rho(40) = {rho:.6}, L1 to 15(1-x)^2 = {l1:.3e}, verdict ok = {verdict_ok}, {elapsed:.2} s"),
    )
}

/// (label, f, r, n0, domain, expected limit, T*)
const CASES: &[(&str, &str, &str, &str, [f64; 2], f64, f64)] = &[
    ("i", "-x", "2-x", "ind(0,1)", [0.0, 1.0], 2.0, 40.0),
    ("ii", "1-x", "2+x", "ind(0,1)", [0.0, 1.0], 3.0, 40.0),
    ("iii a=0", "x/(1+x)", "4/(1+x^2)", "ind(0,1)", [0.0, 100.0], 3.0, 40.0),
    ("iii a=1", "x/(1+x)", "4/(1+x^2)", "x*ind(0,1)", [0.0, 100.0], 2.0, 40.0),
    ("iii a=2", "x/(1+x)", "4/(1+x^2)", "x^2*ind(0,1)", [0.0, 100.0], 1.0, 40.0),
    ("iii escape", "x/(1+x)", "0.5/(1+x^2)", "ind(0,1)", [0.0, 100.0], 0.0, 60.0),
    ("iv a=0", "x/(1-x)", "4/(1+x^2)", "ind(-1,0)", [-100.0, 0.0], 3.0, 40.0),
    ("iv a=1", "x/(1-x)", "4/(1+x^2)", "-x*ind(-1,0)", [-100.0, 0.0], 2.0, 40.0),
    ("iv a=2", "x/(1-x)", "4/(1+x^2)", "x^2*ind(-1,0)", [-100.0, 0.0], 1.0, 40.0),
    ("v a=0", "x*(1-x)", "6-4*x", "6*ind(0,1)", [0.0, 1.0], 5.0, 40.0),
    ("v a=1", "x*(1-x)", "6-4*x", "6*x*ind(0,1)", [0.0, 1.0], 4.0, 40.0),
    ("v a=2", "x*(1-x)", "6-4*x", "6*x^2*ind(0,1)", [0.0, 1.0], 3.0, 40.0),
    ("v sink", "x*(1-x)", "6-0.5*x", "6*ind(0,1)", [0.0, 1.0], 5.5, 40.0),
    ("vi a=0", "-x*(1-x)", "2+4*x", "6*ind(0,1)", [0.0, 1.0], 5.0, 40.0),
    ("vi a=1", "-x*(1-x)", "2+4*x", "6*(1-x)*ind(0,1)", [0.0, 1.0], 4.0, 40.0),
    ("vi a=2", "-x*(1-x)", "2+4*x", "6*(1-x)^2*ind(0,1)", [0.0, 1.0], 3.0, 40.0),
    ("vii", "1", "1/(1+x^2)", "ind(0,1)", [0.0, 200.0], 0.0, 100.0),
    ("viii", "-1", "1/(1+x^2)", "ind(-1,0)", [-200.0, 0.0], 0.0, 100.0),
    ("ix", "0", "1.5-x^2", "ind(-1,1)", [-1.2, 1.2], 1.5, 200.0),
];

fn case_table() -> Outcome {
    let mut worst = String::new();
    let mut failures = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    for &(label, f, r, n0, domain, expected, t_star) in CASES {
        let spec = problem(f, r, n0, domain);
        let comps = build_compartments(&spec);
        if comps.len() != 1 {
            failures.push(format!("{label}: {} compartments", comps.len()));
            continue;
        }
        let comp = &comps[0];
        let lim = match predict_r_limit(&spec, comp) {
            Ok(l) => l,
            Err(e) => {
                failures.push(format!("{label}: {e}"));
                continue;
            }
        };
        if (lim.value - expected).abs() > 1e-6 * (1.0 + expected.abs()) {
            failures.push(format!("{label}: predicted {} instead of {expected}", lim.value));
        }
        let attained = match Carrying::new(&spec, &comps).r_value(comp, t_star) {
            Ok(v) => v,
            Err(e) => {
                failures.push(format!("{label}: {e}"));
                continue;
            }
        };
        let (gap, tol) = if expected == 0.0 {
            (attained, 0.05)
        } else {
            ((attained - expected).abs(), 0.02 * (1.0 + expected.abs()))
        };
        if gap > tol {
            failures.push(format!("{label}: R({t_star}) = {attained}, limit {expected}"));
        }
        if gap / tol > worst_ratio {
            worst_ratio = gap / tol;
            worst = format!("{label} [{}] at {:.3} of tolerance", lim.case_tag, gap / tol);
        }
    }
    if failures.is_empty() {
        Ok(format!("{} cases, worst {worst}", CASES.len()))
    } else {
        Err(failures.join("; "))
    }
}

fn route_agreement(runs: &Runs) -> Outcome {
    let mut worst = (0.0, String::new());
    for item in &runs.items {
        let gap = route_gap(&item.particles, &item.compartments).map_err(|e| e.to_string())?;
        if gap > worst.0 {
            worst = (gap, item.name.clone());
        }
    }
    check(worst.0 <= 5e-3, format!("{} configs, worst relative gap {:.3e} ({})", runs.items.len(), worst.0, worst.1))
}

fn logistic(t: f64, y: f64) -> f64 {
    let e = t.exp();
    y * e / (1.0 - y + y * e)
}

fn flow_oracle() -> Outcome {
    let spec = problem("x*(1-x)", "1", "ind(0,1)", [0.0, 1.0]);
    let mut grid_err: f64 = 0.0;
    for i in 0..20 {
        let t = 0.5 * i as f64;
        for j in 0..20 {
            let y = 0.025 + 0.05 * j as f64;
            let fwd = flow_forward(&spec, y, t).map_err(|e| e.to_string())?;
            let bwd = flow_backward(&spec, y, t).map_err(|e| e.to_string())?;
            grid_err = grid_err.max((fwd.endpoint - logistic(t, y)).abs());
            grid_err = grid_err.max((bwd.endpoint - logistic(-t, y)).abs());
        }
    }

    let mut runner = TestRunner::deterministic();
    let triple = (0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.99);
    let mut identity_err: f64 = 0.0;
    for _ in 0..200 {
        let (a, b, x) = triple.new_tree(&mut runner).expect("sample").current();
        let t = 10.0 * a.max(b);
        let s = 10.0 * a.min(b);
        let back = flow_backward(&spec, x, t).map_err(|e| e.to_string())?;
        let lhs = flow_forward(&spec, back.endpoint, s).map_err(|e| e.to_string())?.endpoint;
        let rhs = flow_backward(&spec, x, t - s).map_err(|e| e.to_string())?.endpoint;
        identity_err = identity_err.max((lhs - rhs).abs());
    }

    let mut jac_err: f64 = 0.0;
    for _ in 0..100 {
        let (a, y) = (0.0f64..1.0, 0.05f64..0.95).new_tree(&mut runner).expect("sample").current();
        let t = 8.0 * a;
        let jac = flow_forward(&spec, y, t).map_err(|e| e.to_string())?.jacobian;
        let x = |y: f64| flow_forward(&spec, y, t).map(|r| r.endpoint).map_err(|e| e.to_string());
        // Richardson-extrapolated central difference.
        let d = |h: f64| -> Result<f64, String> { Ok((x(y + h)? - x(y - h)?) / (2.0 * h)) };
        let (d1, d2) = (d(2e-3)?, d(1e-3)?);
        let fd = (4.0 * d2 - d1) / 3.0;
        jac_err = jac_err.max((jac - fd).abs() / fd.abs());
    }
    check(
        grid_err <= 1e-8 && identity_err <= 1e-8 && jac_err <= 1e-6,
        format!("grid {grid_err:.2e}, flow identity {identity_err:.2e}, jacobian rel {jac_err:.2e}"),
    )
}

fn mass_bound(runs: &Runs) -> Outcome {
    let mut failures = Vec::new();
    let mut tightest = f64::INFINITY;
    let mut min_part = f64::INFINITY;
    for item in &runs.items {
        for (route, traj) in [("particles", &item.particles), ("compartments", &item.compartments), ("2N", &item.doubled)] {
            let bound = item.spec.r_sup.max(traj.rho[0]) + 1e-9;
            let peak = traj.rho.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            tightest = tightest.min(bound - peak);
            if peak > bound {
                failures.push(format!("{} {route}: peak {peak} over {bound}", item.name));
            }
            let low = traj.parts.iter().flatten().copied().fold(f64::INFINITY, f64::min);
            min_part = min_part.min(low);
            if !(low > 0.0) {
                failures.push(format!("{} {route}: compartment mass {low}", item.name));
            }
        }
    }
    if failures.is_empty() {
        Ok(format!("smallest headroom {tightest:.3e}, smallest compartment mass {min_part:.3e}"))
    } else {
        Err(failures.join("; "))
    }
}

fn exponential_tails(runs: &Runs) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for item in &runs.items {
        let pred = classify(&item.spec);
        if !is_exponential(&pred) {
            continue;
        }
        let limit = match pred.verdict {
            Verdict::Dirac { mass, .. } => mass,
            Verdict::Profile { rho_inf, .. } => rho_inf,
            _ => continue,
        };
        match exponential_tail_fit(&item.particles, limit) {
            Some(fit) => {
                ok &= fit.slope < 0.0 && fit.r_squared >= 0.95;
                lines.push(format!("{} slope {:.3} R2 {:.4}", item.name, fit.slope, fit.r_squared));
            }
            None => {
                ok = false;
                lines.push(format!("{} no fit", item.name));
            }
        }
    }
    check(ok && !lines.is_empty(), lines.join(", "))
}

fn profiles() -> Outcome {
    let mut worst_point: f64 = 0.0;
    let mut worst_mass: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    let mut worst_slope: f64 = 0.0;
    let closed: [(&str, fn(f64) -> f64); 2] =
        [("6*ind(0,1)", |x| 15.0 * (1.0 - x).powi(2)), ("6*x*ind(0,1)", |x| 24.0 * x * (1.0 - x))];
    for (n0, exact) in closed {
        let spec = problem("x*(1-x)", "6-4*x", n0, [0.0, 1.0]);
        let pred = classify(&spec);
        let Verdict::Profile { rho_inf, .. } = pred.verdict else {
            return Err(format!("n0 = {n0}: verdict {:?}", pred.verdict));
        };
        let profile = build_limit_profile(&spec, &pred, 257).map_err(|e| e.to_string())?;
        for (x, v) in profile.grid.iter().zip(&profile.values) {
            worst_point = worst_point.max((v - exact(*x)).abs());
        }
        let mass = profile.mass().map_err(|e| e.to_string())?;
        worst_mass = worst_mass.max((mass - rho_inf).abs());
        worst_residual = worst_residual.max(stationarity_residual(&spec, &profile, spec.numerics.test_functions));
        for s in profile.endpoint_slopes() {
            worst_slope = worst_slope.max((s.measured - s.expected).abs());
        }
    }
    check(
        worst_point <= 1e-6 && worst_mass <= 1e-8 && worst_residual <= 1e-5 && worst_slope <= 0.05,
        format!(
            "pointwise {worst_point:.2e}, mass {worst_mass:.2e}, residual {worst_residual:.2e}, slopes {worst_slope:.2e}"
        ),
    )
}

fn toggle_sweep() -> Outcome {
    let template = configs_dir().join("templates/sweep_c.toml");
    let step = 0.1;
    let mut out = Vec::new();
    let mut err = Vec::new();
    let args = ["advsel", "sweep", template.to_str().unwrap(), "--param", "c=0.1:5:0.1", "--jobs", "4"];
    let code = advsel::cli::run(args, Vec::new(), &mut out, &mut err);
    if code != 0 {
        return Err(format!("sweep exited {code}: {}", String::from_utf8_lossy(&err)));
    }
    let text = String::from_utf8(out).map_err(|e| e.to_string())?;
    let rows: Vec<(f64, String)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let mut cells = l.split(',');
            let c = cells.next().unwrap().parse().unwrap();
            (c, cells.next().unwrap().to_string())
        })
        .collect();
    let last_dirac = rows.iter().filter(|r| r.1 == "dirac").map(|r| r.0).fold(f64::NAN, f64::max);
    let first_profile = rows.iter().filter(|r| r.1 == "profile").map(|r| r.0).fold(f64::NAN, f64::min);
    let monotone = rows.iter().all(|(c, v)| match v.as_str() {
        "dirac" => *c < first_profile,
        "profile" => *c > last_dirac,
        _ => true,
    });
    let flip = 0.5 * (last_dirac + first_profile);
    check(
        monotone && (flip - 1.0).abs() <= step && first_profile - last_dirac <= 2.0 * step + 1e-9,
        format!("{} rows, last dirac at c = {last_dirac}, first profile at c = {first_profile}", rows.len()),
    )
}

fn self_convergence(runs: &Runs) -> Outcome {
    let mut worst = (0.0, String::new());
    for item in &runs.items {
        let d = (item.particles.final_rho() - item.doubled.final_rho()).abs();
        if d > worst.0 {
            worst = (d, item.name.clone());
        }
    }
    check(worst.0 <= 1e-3, format!("worst |rho_N(T) - rho_2N(T)| = {:.3e} ({})", worst.0, worst.1))
}

fn main() {
    let started = Instant::now();
    let runs = Runs::compute();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 red run concentrates at x = 1", Box::new(red_run)),
        ("2 blue run approaches 15(1-x)^2", Box::new(blue_run)),
        ("3 carrying-capacity limit table", Box::new(case_table)),
        ("4 particle and compartment routes agree", Box::new(|| route_agreement(&runs))),
        ("5 flow oracle", Box::new(flow_oracle)),
        ("6 mass bound and compartment positivity", Box::new(|| mass_bound(&runs))),
        ("7 exponential tails", Box::new(|| exponential_tails(&runs))),
        ("8 explicit limit profiles", Box::new(profiles)),
        ("9 toggle sweep flips at c = 1", Box::new(toggle_sweep)),
        ("10 particle self-convergence", Box::new(|| self_convergence(&runs))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>())));
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed in {:.1} s", criteria.len() - failed, criteria.len(), started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
