use std::path::Path;

use anyhow::bail;
use serde::Serialize;

use qlswitch::bellman::{solve_fixed_point, SolveOptions, SolveStatus};
use qlswitch::certificates::{det_envelope, iid_envelope, markov_envelope, BoundInputs, Envelope};
use qlswitch::jsr::{
    divergence_witness, jsr_bracket, reg_euclidean_bounds, reg_rescaling_check, word_count,
    JsrBracket, RootBound,
};
use qlswitch::linalg::{eigenvalues, spectral_norm, spectral_radius};
use qlswitch::lyapunov::{build_cert, check_drift_sampled, lyap_value, normball_mesh, LyapunovCert};
use qlswitch::mdp::{stationary_distribution, BehaviorModel, StochasticPolicy};
use qlswitch::presets;
use qlswitch::simulate::{
    certified_fixed_point, run_deterministic, run_ensemble, run_iid, run_markov, EnsembleConfig,
    Kind, RngSpec, Trajectory, Variant,
};
use qlswitch::switching::{build_family, ModeFamily};
use qlswitch::{Error, Problem, Vect};

use crate::config::{Command, KindArg, RunConfig, VariantArg};
use crate::output::{h, json_doc, num, opt, word, write_file, Csv};
use crate::NotConverged;

pub fn presets() -> anyhow::Result<()> {
    for name in presets::NAMES {
        let info = presets::info(name)?;
        println!("{:<20} {}", info.name, info.description);
    }
    Ok(())
}

pub fn dispatch(cfg: &RunConfig, p: &Problem, out: Option<&Path>) -> anyhow::Result<()> {
    match cfg.command {
        Command::Modes => modes(cfg, p, out),
        Command::Jsr => jsr(cfg, p, out),
        Command::Lyap => lyap(cfg, p, out),
        Command::Normball => normball(cfg, p, out),
        Command::Simulate => simulate(cfg, p, out),
        Command::Certify => certify(cfg, p, out),
        Command::Regbounds => regbounds(cfg, p, out),
        Command::Presets => presets(),
    }
}

fn actions(family: &ModeFamily, i: usize) -> String {
    word(&family.policies[i].actions)
}

fn modes(cfg: &RunConfig, p: &Problem, out: Option<&Path>) -> anyhow::Result<()> {
    let family = build_family(p, cfg.alpha, cfg.eta)?;
    let mut csv = Csv::new(cfg);
    csv.row(["policy", "actions", "norm", "spectral_radius"]);
    println!("{:>6}  {:<12} {:>8} {:>8}", "policy", "actions", "norm", "radius");
    let mut max = 0.0_f64;
    for (i, a) in family.modes.iter().enumerate() {
        let (n, r) = (spectral_norm(a), spectral_radius(a));
        max = max.max(n);
        println!("{:>6}  {:<12} {:>8} {:>8}", i + 1, actions(&family, i), h(n), h(r));
        csv.row([(i + 1).to_string(), actions(&family, i).replace(',', " "), num(n), num(r)]);
    }
    println!("max norm {}", h(max));
    if let Some(dir) = out {
        write_file(dir, "modes.csv", &csv.into_string())?;
    }
    Ok(())
}

fn print_bracket(b: &JsrBracket) {
    println!("{:>3} {:>10} {:>10}  {:<16} {:<16}", "k", "lower", "upper", "lower word", "upper word");
    for r in &b.per_depth {
        let tag = if r.pruned { "  (pruned)" } else { "" };
        println!(
            "{:>3} {:>10} {:>10}  {:<16} {:<16}{tag}",
            r.k,
            h(r.lower),
            h(r.upper),
            word(&r.lower_word),
            word(&r.upper_word)
        );
    }
    println!("JSR in [{}, {}]", h(b.lower), h(b.upper));
    println!("lower witness {}  upper witness {}", word(&b.witness_lower), word(&b.witness_upper));
}

fn jsr(cfg: &RunConfig, p: &Problem, out: Option<&Path>) -> anyhow::Result<()> {
    let family = build_family(p, cfg.alpha, cfg.eta)?;
    let bracket = jsr_bracket(&family, cfg.jsr_depth, cfg.prune)?;
    print_bracket(&bracket);
    let witness = divergence_witness(&family, &bracket);
    if let Some(w) = &witness {
        println!(
            "divergent switching: repeat {} (spectral radius {}, rate {})",
            word(&w.word),
            h(w.spectral_radius),
            h(w.rate)
        );
    }
    if let Some(dir) = out {
        #[derive(Serialize)]
        struct Doc<'a> {
            bracket: &'a JsrBracket,
            divergence_witness: &'a Option<qlswitch::jsr::DivergenceWitness>,
        }
        let doc = Doc {
            bracket: &bracket,
            divergence_witness: &witness,
        };
        write_file(dir, "jsr.json", &json_doc(cfg, doc)?)?;
    }
    Ok(())
}

/// `--beta-eps`, or halfway between the JSR upper bound and 1.
fn beta_for(cfg: &RunConfig, family: &ModeFamily) -> qlswitch::Result<f64> {
    if let Some(b) = cfg.beta_eps {
        return Ok(b);
    }
    let bracket = jsr_bracket(family, cfg.jsr_depth, cfg.prune)?;
    if bracket.upper < 1.0 {
        Ok(0.5 * (bracket.upper + 1.0))
    } else {
        Err(Error::CertificateRefused(format!(
            "JSR upper bound {} at depth {} is not below 1; pass --beta-eps",
            bracket.upper, cfg.jsr_depth
        )))
    }
}

fn certificate(cfg: &RunConfig, family: &ModeFamily) -> qlswitch::Result<LyapunovCert> {
    build_cert(family, beta_for(cfg, family)?, cfg.depth)
}

fn print_cert(c: &LyapunovCert) {
    let s = c.summary();
    println!("beta_eps {}  T {}", s.beta_eps, s.depth);
    let norms: Vec<String> = s.max_norms.iter().map(|v| h(*v)).collect();
    println!("max product norms by depth [{}]", norms.join(", "));
    println!("JSR lower bound {}  growth {}", h(s.lower), h(s.growth));
    println!("c_eps truncated {}", h(s.c_eps_truncated));
    match (s.tail, s.c_eps_upper) {
        (Some(t), Some(u)) => println!("tail {}  c_eps upper {}", h(t), h(u)),
        _ => println!("tail unbounded (growth not below beta)"),
    }
    if s.estimate {
        println!("note: tail is an estimate");
    }
    println!("valid {}", s.valid);
}

fn lyap(cfg: &RunConfig, p: &Problem, out: Option<&Path>) -> anyhow::Result<()> {
    let family = build_family(p, cfg.alpha, cfg.eta)?;
    let cert = certificate(cfg, &family)?;
    print_cert(&cert);
    let drift = check_drift_sampled(&cert, cfg.samples, cfg.seed);
    println!(
        "drift check: {} points, {} failing, min slack {:.3e}",
        drift.points, drift.failing_points, drift.min_slack
    );
    if let Some(dir) = out {
        #[derive(Serialize)]
        struct Doc<'a> {
            certificate: qlswitch::lyapunov::CertSummary,
            drift: &'a qlswitch::lyapunov::SampledDrift,
        }
        let doc = Doc {
            certificate: cert.summary(),
            drift: &drift,
        };
        write_file(dir, "lyap.json", &json_doc(cfg, doc)?)?;
    }
    if !cert.valid {
        bail!(Error::CertificateRefused(
            "no product depth up to T has norm below beta_eps".into()
        ));
    }
    if drift.failing_points > 0 {
        bail!("drift check failed at {} points", drift.failing_points);
    }
    Ok(())
}

fn normball(cfg: &RunConfig, p: &Problem, out: Option<&Path>) -> anyhow::Result<()> {
    let family = build_family(p, cfg.alpha, cfg.eta)?;
    let cert = certificate(cfg, &family)?;
    let mesh = normball_mesh(&cert, cfg.resolution, cfg.radial)?;
    let mut csv = Csv::new(cfg);
    csv.comment(&format!("beta={} T={}", num(cert.beta_eps), cert.depth));
    csv.row((1..=cert.dim()).map(|i| format!("x{i}")));
    for pt in &mesh.points {
        csv.row(pt.iter().map(|v| num(*v)));
    }
    let text = csv.into_string();
    match out {
        Some(dir) => {
            write_file(dir, "normball.csv", &text)?;
            let radii: Vec<f64> = mesh
                .points
                .iter()
                .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            let max = radii.iter().copied().fold(0.0, f64::max);
            let min = radii.iter().copied().fold(f64::INFINITY, f64::min);
            println!("{} points, radius in [{}, {}]", radii.len(), h(min), h(max));
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn variant(cfg: &RunConfig) -> Variant {
    match cfg.variant {
        VariantArg::Plain => Variant::Plain,
        VariantArg::Regularized => Variant::Regularized,
    }
}

fn kind(cfg: &RunConfig) -> Kind {
    match cfg.kind {
        KindArg::Det => Kind::Deterministic,
        KindArg::Iid => Kind::Iid,
        KindArg::Markov => Kind::Markov,
    }
}

/// Problem instance a run of this kind actually samples from: stochastic
/// runs use renormalized data, Markov runs weight by the stationary law.
fn run_problem(cfg: &RunConfig, p: &Problem) -> anyhow::Result<(Problem, Option<BehaviorModel>)> {
    match cfg.kind {
        KindArg::Det => Ok((p.clone(), None)),
        KindArg::Iid => Ok((p.normalized()?, None)),
        KindArg::Markov => {
            let q = p.normalized()?;
            let behavior = match q.behavior() {
                Some(b) => b.clone(),
                None => StochasticPolicy::uniform(q.n_states(), q.n_actions()).probs,
            };
            let bm = stationary_distribution(&q, &behavior)?;
            Ok((q.with_sampling(&bm.stationary)?, Some(bm)))
        }
    }
}

/// Certificate for the run family, when one can be built and is valid.
fn run_certificate(cfg: &RunConfig, p: &Problem, v: Variant) -> anyhow::Result<Option<LyapunovCert>> {
    let family = build_family(p, p.alpha(), v.eta(p))?;
    match certificate(cfg, &family) {
        Ok(c) if c.valid => Ok(Some(c)),
        Ok(_) | Err(Error::CertificateRefused(_)) | Err(Error::CapExceeded { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Certified fixed point, or an uncertified solve that converged.
fn fixed_point(
    cfg: &RunConfig,
    p: &Problem,
    v: Variant,
    cert: Option<&LyapunovCert>,
) -> anyhow::Result<Option<Vect>> {
    if let Some(t) = certified_fixed_point(p, v, cert)? {
        return Ok(Some(t));
    }
    let opts = SolveOptions {
        tol: cfg.tol,
        ..SolveOptions::default()
    };
    let r = solve_fixed_point(p, v.map_kind(), &opts, None)?;
    Ok(match r.status {
        SolveStatus::Converged => Some(Vect::from_vec(r.theta_star)),
        _ => None,
    })
}

fn x0_index(cfg: &RunConfig, p: &Problem) -> anyhow::Result<Option<usize>> {
    match cfg.x0 {
        None => Ok(None),
        Some((s, a)) if s <= p.n_states() && a <= p.n_actions() => {
            Ok(Some(p.sa_index(s - 1, a - 1)))
        }
        Some((s, a)) => bail!(crate::Usage(format!("--x0 {s},{a} is out of range"))),
    }
}

fn simulate(cfg: &RunConfig, p: &Problem, out: Option<&Path>) -> anyhow::Result<()> {
    let v = variant(cfg);
    let (q, bm) = run_problem(cfg, p)?;
    let cert = run_certificate(cfg, &q, v)?;
    let theta_star = fixed_point(cfg, &q, v, cert.as_ref())?;
    let theta0 = Vect::from_column_slice(&cfg.theta0);
    let x0 = x0_index(cfg, &q)?;
    if cfg.runs > 1 {
        return ensemble(cfg, &q, bm.as_ref(), cert.as_ref(), theta_star.as_ref(), x0, out);
    }
    let ts = theta_star.as_ref();
    let spec = RngSpec::new(cfg.seed, 0);
    let traj = match kind(cfg) {
        Kind::Deterministic => run_deterministic(&q, &theta0, cfg.steps, ts, v)?,
        Kind::Iid => run_iid(&q, &theta0, cfg.steps, ts, v, spec)?,
        Kind::Markov => run_markov(&q, bm.as_ref().expect("markov model"), x0, &theta0, cfg.steps, ts, v, spec)?,
    };
    let csv = trajectory_csv(cfg, &traj, ts, cert.as_ref());
    print_trajectory(&traj, ts);
    if let Some(dir) = out {
        write_file(dir, "trajectory.csv", &csv)?;
    }
    if let Some(k) = traj.diverged_at {
        bail!(NotConverged(format!("run diverged at step {k}")));
    }
    Ok(())
}

fn mode_cell(traj: &Trajectory, k: usize) -> String {
    match traj.mode_words.get(k) {
        Some(Some(i)) => (i + 1).to_string(),
        Some(None) => "mixed".into(),
        None => String::new(),
    }
}

fn trajectory_csv(
    cfg: &RunConfig,
    traj: &Trajectory,
    ts: Option<&Vect>,
    cert: Option<&LyapunovCert>,
) -> String {
    let m = cfg.theta0.len();
    let mut csv = Csv::new(cfg);
    if let Some(t) = ts {
        let cells: Vec<String> = t.iter().map(|v| num(*v)).collect();
        csv.comment(&format!("theta_star={}", cells.join(" ")));
    }
    let mut head = vec!["k".to_string()];
    head.extend((1..=m).map(|i| format!("theta_{i}")));
    head.extend(["mode", "err_norm", "p"].map(String::from));
    csv.row(head);
    for (k, th) in traj.thetas.iter().enumerate() {
        let x = ts.map(|t| Vect::from_column_slice(th) - t);
        let mut row = vec![k.to_string()];
        row.extend(th.iter().map(|v| num(*v)));
        row.push(mode_cell(traj, k));
        row.push(opt(x.as_ref().map(|x| x.norm())));
        row.push(opt(x.as_ref().zip(cert).map(|(x, c)| lyap_value(c, x.as_slice()).1)));
        csv.row(row);
    }
    csv.into_string()
}

fn print_trajectory(traj: &Trajectory, ts: Option<&Vect>) {
    let n = traj.thetas.len();
    let show = |k: usize| {
        let th: Vec<String> = traj.thetas[k].iter().map(|v| h(*v)).collect();
        println!("{:>6}  [{}]  mode {}", k, th.join(", "), mode_cell(traj, k));
    };
    if n <= 21 {
        (0..n).for_each(show);
    } else {
        (0..5).for_each(show);
        println!("   ...");
        show(n - 1);
    }
    if let Some(t) = ts {
        let err = (Vect::from_column_slice(&traj.thetas[n - 1]) - t).norm();
        println!("final ||theta - theta*|| {err:.3e}");
    }
}

fn ensemble(
    cfg: &RunConfig,
    q: &Problem,
    bm: Option<&BehaviorModel>,
    cert: Option<&LyapunovCert>,
    ts: Option<&Vect>,
    x0: Option<usize>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let ec = EnsembleConfig {
        kind: kind(cfg),
        variant: variant(cfg),
        n_runs: cfg.runs,
        steps: cfg.steps,
        seed: cfg.seed,
        theta0: Vect::from_column_slice(&cfg.theta0),
        x0,
    };
    let s = run_ensemble(q, &ec, bm, cert, ts)?;
    let m = cfg.theta0.len();
    let mut csv = Csv::new(cfg);
    if let Some(e) = &s.envelope {
        csv.comment(&format!(
            "envelope lambda={} residual={} applicable={} estimate={}",
            num(e.lambda),
            num(e.residual),
            e.applicable,
            e.estimate
        ));
    }
    let mut head: Vec<String> = ["k", "mean_err", "sd_err", "mean_p", "envelope"]
        .map(String::from)
        .to_vec();
    head.extend((1..=m).map(|i| format!("mean_theta_{i}")));
    csv.row(head);
    for (k, th) in s.mean_theta.iter().enumerate() {
        let mut row = vec![
            k.to_string(),
            opt(s.mean_err.get(k).copied()),
            opt(s.sd_err.get(k).copied()),
            opt(s.mean_p.get(k).copied()),
            opt(s.envelope.as_ref().and_then(|e| e.euclid_bound.get(k).copied())),
        ];
        row.extend(th.iter().map(|v| num(*v)));
        csv.row(row);
    }
    println!("{} runs, {} diverged", s.n_runs, s.diverged_runs);
    if let (Some(e), Some(sd)) = (s.mean_err.last(), s.sd_err.last()) {
        println!("final mean error {e:.4e} (sd {sd:.4e})");
    }
    if let Some(e) = &s.envelope {
        println!("envelope lambda {} applicable {}", h(e.lambda), e.applicable);
    }
    if let Some(dir) = out {
        write_file(dir, "ensemble.csv", &csv.into_string())?;
    }
    if s.diverged_runs > 0 {
        bail!(NotConverged(format!("{} of {} runs diverged", s.diverged_runs, s.n_runs)));
    }
    Ok(())
}

fn certify(cfg: &RunConfig, p: &Problem, out: Option<&Path>) -> anyhow::Result<()> {
    let v = variant(cfg);
    let (q, _) = run_problem(cfg, p)?;
    let family = build_family(&q, q.alpha(), v.eta(&q))?;
    let cert = certificate(cfg, &family)?;
    if !cert.valid {
        bail!(Error::CertificateRefused(
            "no product depth up to T has norm below beta_eps".into()
        ));
    }
    let Some(ts) = fixed_point(cfg, &q, v, Some(&cert))? else {
        bail!(NotConverged("fixed-point solve did not converge".into()));
    };
    let inputs = BoundInputs::from_problem(&q, &cert, &ts);
    let x0 = Vect::from_column_slice(&cfg.theta0) - &ts;
    let x0_p = lyap_value(&cert, x0.as_slice()).1;
    let env: Envelope = match cfg.kind {
        KindArg::Det => det_envelope(&inputs, x0_p, x0.norm(), cfg.steps),
        KindArg::Iid => iid_envelope(&inputs, x0_p, x0.norm(), cfg.steps),
        KindArg::Markov => markov_envelope(&inputs, x0_p, x0.norm(), cfg.steps),
    };
    let mut csv = Csv::new(cfg);
    csv.comment("kind lambda residual applicable estimate");
    csv.comment(&format!(
        "{:?} {} {} {} {}",
        env.kind,
        num(env.lambda),
        num(env.residual),
        env.applicable,
        env.estimate
    ));
    csv.row(["k", "p_bound", "euclid_bound", "q_bound"]);
    for k in 0..env.p_bound.len() {
        csv.row([k.to_string(), num(env.p_bound[k]), num(env.euclid_bound[k]), num(env.q_bound[k])]);
    }
    println!("{:?} envelope: lambda {}  residual {}", env.kind, h(env.lambda), h(env.residual));
    match env.limit {
        Some(l) => println!("asymptotic p-bound {}", h(l)),
        None => println!("lambda >= 1: the envelope grows and gives no asymptotic bound"),
    }
    println!("applicable {}  estimate {}", env.applicable, env.estimate);
    if let Some(dir) = out {
        write_file(dir, "envelope.csv", &csv.into_string())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct FamilySpectrum {
    eta: f64,
    max_norm: f64,
    max_radius: f64,
    /// Per-mode eigenvalues as (re, im).
    eigenvalues: Vec<Vec<(f64, f64)>>,
}

fn spectrum(p: &Problem, alpha: f64, eta: f64) -> qlswitch::Result<FamilySpectrum> {
    let f = build_family(p, alpha, eta)?;
    Ok(FamilySpectrum {
        eta,
        max_norm: f.modes.iter().map(spectral_norm).fold(0.0, f64::max),
        max_radius: f.modes.iter().map(spectral_radius).fold(0.0, f64::max),
        eigenvalues: f.modes.iter().map(eigenvalues).collect(),
    })
}

fn root(r: &RootBound) -> String {
    let tag = if r.clipped { " (radicand clipped)" } else { "" };
    format!("{}{tag}", h(r.value))
}

fn regbounds(cfg: &RunConfig, p: &Problem, out: Option<&Path>) -> anyhow::Result<()> {
    let rb = reg_euclidean_bounds(p, cfg.alpha, cfg.eta)?;
    let n = build_family(p, cfg.alpha, cfg.eta)?.len();
    let depth = (1..=3).rev().find(|&d| word_count(n, d) <= 100_000).unwrap_or(1);
    let rescaling = reg_rescaling_check(p, cfg.alpha, cfg.eta, depth)?;
    let regularized = spectrum(p, cfg.alpha, cfg.eta)?;
    let plain = spectrum(p, cfg.alpha, 0.0)?;
    let c = &rb.constants;
    println!("c_Phi {}  L_Phi {}  L_Phi,eta {}", h(c.c_phi), h(c.l_phi), h(c.l_phi_eta));
    if let Some(r) = &rb.restricted {
        println!("restricted-eta bound {}  step condition {}", root(r), rb.restricted_step_condition);
    }
    println!(
        "all-eta bound {} (conservative {})  step conditions {} / {}",
        root(&rb.all_eta_sharp),
        root(&rb.all_eta_conservative),
        rb.all_eta_step_condition,
        rb.conservative_step_condition
    );
    println!(
        "max mode radius: regularized {}  unregularized {}",
        h(regularized.max_radius),
        h(plain.max_radius)
    );
    println!(
        "rescaling identity: {} words, max defect {:.3e}",
        rescaling.words_checked, rescaling.max_defect
    );
    if let Some(dir) = out {
        #[derive(Serialize)]
        struct Doc<'a> {
            bounds: &'a qlswitch::jsr::RegBounds,
            rescaling: &'a qlswitch::jsr::RescalingReport,
            regularized: FamilySpectrum,
            unregularized: FamilySpectrum,
        }
        let doc = Doc {
            bounds: &rb,
            rescaling: &rescaling,
            regularized,
            unregularized: plain,
        };
        write_file(dir, "regbounds.json", &json_doc(cfg, doc)?)?;
    }
    Ok(())
}
