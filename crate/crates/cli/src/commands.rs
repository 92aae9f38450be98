//! The five subcommands. Each is a sequence of report sections; a section
//! that fails is recorded and the sections depending on it are skipped.

use crate::config::{Registered, RunConfig};
use crate::report::{cell, Ctx, Run, Table};
use lorentz_core::dynamics::invariance_test;
use lorentz_core::estimators::{
    diffusion_matrix, green_kubo_with_integrals, induced_variance, local_limit_profile, DiffusionMatrix, VarianceReport,
};
use lorentz_core::geometry::validate_table;
use lorentz_core::lab::{
    exponential_test, functional_flatness, joint_test_run, laplace_test, log_slope, run_ensemble, Clock, EnsembleRun,
    Flatness, FlatnessReport, LawTestReport, LogSlope, VarianceInput,
};
use lorentz_core::moments::{
    binomial, combinatorial_moment, enumerate_admissible, enumeration_table, limit_moment_closed, mc_limit_sampler,
    multiplicity_brute_force, multiplicity_cn, MAX_ENUMERATION_M,
};
use lorentz_core::oracle::{
    first_returns, lazy_return_probabilities, local_time_law, simulate_lazy_local_times,
};
use lorentz_core::rng::stream_rng;
use lorentz_core::stats::{batch_stderr, describe, exponential_cdf, mean};
use lorentz_core::{Billiard, CellObservable, Error, FlowObservable, HorizonCertificate, OracleChain, Result};
use lorentz_core::lab::{law_test, TargetLaw};
use num_rational::BigRational;
use serde::Serialize;
use std::f64::consts::PI;

fn decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|p| p[1] < p[0])
}

#[derive(Serialize)]
struct TableSummary {
    obstacles: usize,
    boundary_total: f64,
    free_area: f64,
    mean_free_path: f64,
    min_gap: f64,
    reach: i64,
    working_bound: f64,
    certificate: HorizonCertificate,
}

/// Probe the table; every billiard subcommand starts here.
fn table_section(cfg: &RunConfig, run: &mut Run) -> Option<Billiard> {
    let mut out = None;
    run.section("table", |ctx| {
        let t = cfg.table.build().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let p = cfg.table.probe;
        let cert = validate_table(&t, p.boundary_points, p.directions, p.flight_cap)?;
        let b = Billiard::with_certificate(t.clone(), cert.clone(), 8);
        ctx.check("min_gap", t.min_gap(), "> 0", t.min_gap() > 0.0);
        ctx.at_most("tau_max", cert.tau_max, cert.flight_cap);
        let mut obs = Table::new("obstacles.csv", &["index", "center_x", "center_y", "radius", "perimeter"]);
        for (i, o) in t.obstacles().iter().enumerate() {
            obs.row(vec![cell(i), cell(o.center[0]), cell(o.center[1]), cell(o.radius), cell(o.perimeter())]);
        }
        ctx.table(obs);
        let summary = TableSummary {
            obstacles: t.len(),
            boundary_total: t.boundary_total(),
            free_area: t.free_area(),
            mean_free_path: t.mean_free_path(),
            min_gap: t.min_gap(),
            reach: b.reach(),
            working_bound: cert.working_bound(),
            certificate: cert,
        };
        out = Some(b);
        Ok(summary)
    });
    out
}

pub fn validate(cfg: &RunConfig, run: &mut Run) {
    let Some(b) = table_section(cfg, run) else {
        run.skip("invariance", "table");
        return;
    };
    let v = &cfg.validate;
    run.section("invariance", |ctx| {
        let r = invariance_test(&b, v.invariance_samples, v.r_bins, v.phi_bins, v.seed)?;
        let accept = format!(">= {}", v.min_p_value);
        ctx.check("joint_p_value", r.joint.2, accept.clone(), r.joint.2 >= v.min_p_value);
        ctx.check("arclength_p_value", r.arclength.2, accept.clone(), r.arclength.2 >= v.min_p_value);
        ctx.check("angle_p_value", r.angle.2, accept, r.angle.2 >= v.min_p_value);
        Ok(r)
    });
}

#[derive(Serialize)]
struct Named<T> {
    name: String,
    #[serde(flatten)]
    value: T,
}

#[derive(Serialize)]
struct DiffusionSummary {
    phi0: f64,
    phi0_stderr: f64,
    #[serde(flatten)]
    matrix: DiffusionMatrix,
}

fn diffusion_tables(ctx: &mut Ctx, d: &DiffusionMatrix) {
    let mut lags = Table::new(
        "diffusion_lags.csv",
        &["k", "c11", "c12", "c21", "c22", "stderr11", "stderr12", "stderr21", "stderr22"],
    );
    for (k, (c, s)) in d.lag_terms.iter().zip(&d.lag_stderr).enumerate() {
        let mut r = vec![cell(k)];
        r.extend(c.iter().flatten().map(|x| cell(*x)));
        r.extend(s.iter().flatten().map(|x| cell(*x)));
        lags.row(r);
    }
    ctx.table(lags);
    let mut direct = Table::new(
        "diffusion_direct.csv",
        &["n", "s11", "s12", "s21", "s22", "stderr11", "stderr12", "stderr21", "stderr22"],
    );
    for e in &d.direct {
        let mut r = vec![cell(e.n)];
        r.extend(e.sigma2.iter().flatten().map(|x| cell(*x)));
        r.extend(e.stderr.iter().flatten().map(|x| cell(*x)));
        direct.row(r);
    }
    ctx.table(direct);
}

fn diffusion_section(cfg: &RunConfig, run: &mut Run, b: &Billiard) -> Option<DiffusionSummary> {
    let max_z = cfg.estimate.max_z;
    run.section("diffusion", |ctx| {
        let d = diffusion_matrix(b, &cfg.estimate.diffusion)?;
        let (phi0, phi0_stderr) = d.phi0()?;
        ctx.holds("positive_definite", d.psd_ok);
        ctx.holds("window_reached_noise_floor", d.window_ok);
        for e in &d.direct {
            let mut worst: f64 = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let se = (d.stderr[i][j].powi(2) + e.stderr[i][j].powi(2)).sqrt();
                    worst = worst.max((d.sigma2[i][j] - e.sigma2[i][j]).abs() / se);
                }
            }
            ctx.at_most(format!("direct_n{}_gap_z", e.n), worst, max_z);
        }
        diffusion_tables(ctx, &d);
        Ok(DiffusionSummary {
            phi0,
            phi0_stderr,
            matrix: d,
        })
    })
}

fn lag_table(file: &str, reports: &[(String, VarianceReport)]) -> Table {
    let mut t = Table::new(file, &["observable", "k", "term", "stderr"]);
    for (name, r) in reports {
        for (k, (v, s)) in r.lag_terms.iter().zip(&r.lag_stderr).enumerate() {
            t.row(vec![name.clone(), cell(k + 1), cell(v), cell(s)]);
        }
    }
    t
}

fn variance_rows(t: &mut Table, method: &str, reports: &[(String, VarianceReport)]) {
    for (name, r) in reports {
        t.row(vec![
            name.clone(),
            method.to_string(),
            cell(r.sigma2),
            cell(r.stderr),
            cell(r.zero_lag),
            cell(r.window),
            cell(r.tail),
            cell(r.tail_stderr),
            cell(r.integral),
            cell(r.integral_stderr),
        ]);
    }
}

fn registry(cfg: &RunConfig, names: &[String]) -> Vec<Registered> {
    names.iter().map(|n| cfg.registered(n).expect("checked at load")).collect()
}

fn green_kubo(cfg: &RunConfig, b: &Billiard, obs: &[(String, CellObservable, Option<f64>)]) -> Result<Vec<(String, VarianceReport)>> {
    let refs: Vec<&CellObservable> = obs.iter().map(|o| &o.1).collect();
    let ints: Vec<Option<f64>> = obs.iter().map(|o| o.2).collect();
    let r = green_kubo_with_integrals(b, &refs, &ints, &cfg.estimate.green_kubo)?;
    Ok(obs.iter().map(|o| o.0.clone()).zip(r).collect())
}

pub fn estimate(cfg: &RunConfig, run: &mut Run) {
    let Some(b) = table_section(cfg, run) else {
        for s in ["diffusion", "green_kubo", "induced", "local_limit"] {
            run.skip(s, "table");
        }
        return;
    };
    let diffusion = diffusion_section(cfg, run, &b);
    let obs: Vec<(String, CellObservable, Option<f64>)> = registry(cfg, &cfg.estimate.observables)
        .into_iter()
        .map(|r| (r.name, r.observable, r.integral))
        .collect();
    let max_z = cfg.estimate.max_z;
    let gk = run.section("green_kubo", |ctx| {
        let reps = green_kubo(cfg, &b, &obs)?;
        for (n, r) in &reps {
            ctx.holds(format!("{n}_window_reached_noise_floor"), r.window_ok);
        }
        ctx.table(lag_table("green_kubo_lags.csv", &reps));
        Ok(reps.into_iter().map(|(name, value)| Named { name, value }).collect::<Vec<_>>())
    });
    run.section("induced", |ctx| {
        let refs: Vec<&CellObservable> = obs.iter().map(|o| &o.1).collect();
        let r = induced_variance(&b, &refs, &cfg.estimate.induced)?;
        let reps: Vec<(String, VarianceReport)> = obs.iter().map(|o| o.0.clone()).zip(r).collect();
        let mut t = Table::new(
            "variances.csv",
            &["observable", "method", "sigma2", "stderr", "zero_lag", "window", "tail", "tail_stderr", "integral", "integral_stderr"],
        );
        if let Some(gk) = &gk {
            let g: Vec<(String, VarianceReport)> = gk.iter().map(|n| (n.name.clone(), n.value.clone())).collect();
            variance_rows(&mut t, "green_kubo", &g);
            for ((name, h), (_, g)) in reps.iter().zip(&g) {
                let z = (g.sigma2 - h.sigma2).abs() / (g.stderr.powi(2) + h.stderr.powi(2)).sqrt();
                ctx.at_most(format!("{name}_green_kubo_vs_induced_z"), z, max_z);
            }
        }
        variance_rows(&mut t, "induced", &reps);
        ctx.table(t);
        ctx.table(lag_table("induced_lags.csv", &reps));
        Ok(reps.into_iter().map(|(name, value)| Named { name, value }).collect::<Vec<_>>())
    });
    let Some(d) = diffusion else {
        run.skip("local_limit", "diffusion");
        return;
    };
    let p = &cfg.estimate.profile;
    run.section("local_limit", |ctx| {
        let r = p.radius;
        let cells: Vec<[i64; 2]> = (-r..=r).flat_map(|y| (-r..=r).map(move |x| [x, y])).collect();
        let prof = local_limit_profile(&b, &d.matrix.sigma2, &p.ells, &cells, p.trajectories, p.seed)?;
        for (ell, m) in &prof.total_mass {
            ctx.at_most(format!("ell{ell}_mass_error"), (m - 1.0).abs(), 1e-9);
        }
        let mut t = Table::new("local_limit_profile.csv", &["ell", "a_x", "a_y", "empirical", "predicted", "stderr"]);
        for row in &prof.rows {
            t.row(vec![
                cell(row.ell),
                cell(row.a[0]),
                cell(row.a[1]),
                cell(row.empirical),
                cell(row.predicted),
                cell(row.stderr),
            ]);
        }
        ctx.table(t);
        Ok(prof)
    });
}

#[derive(Serialize, Clone)]
struct Constant {
    name: String,
    value: f64,
    stderr: f64,
    source: &'static str,
}

#[derive(Serialize, Clone)]
struct Constants {
    phi0: Constant,
    variances: Vec<Constant>,
    flow_variances: Vec<Constant>,
}

fn law_rows(ks: &mut Table, qq: &mut Table, test: &str, clock: Clock, obs: &str, reps: &[LawTestReport]) {
    let clock = match clock {
        Clock::Map => "map",
        Clock::Flow => "flow",
    };
    for r in reps {
        ks.row(vec![
            test.to_string(),
            clock.to_string(),
            obs.to_string(),
            cell(r.n),
            cell(r.time),
            cell(r.samples),
            cell(r.ks),
            cell(r.p_value),
            cell(r.mean),
            cell(r.mean_stderr),
            cell(r.variance),
            cell(r.variance_stderr),
            cell(r.excess_kurtosis),
            cell(r.kurtosis_stderr),
        ]);
        for q in &r.qq {
            qq.row(vec![
                test.to_string(),
                clock.to_string(),
                obs.to_string(),
                cell(r.n),
                cell(q.level),
                cell(q.empirical),
                cell(q.theoretical),
            ]);
        }
    }
}

fn law_tables(test: &str) -> (Table, Table) {
    (
        Table::new(
            &format!("{test}_tests.csv"),
            &[
                "test", "clock", "observable", "n", "time", "samples", "ks", "p_value", "mean", "mean_stderr", "variance",
                "variance_stderr", "excess_kurtosis", "kurtosis_stderr",
            ],
        ),
        Table::new(&format!("{test}_qq.csv"), &["test", "clock", "observable", "n", "quantile", "empirical", "theoretical"]),
    )
}

fn ks_checks(ctx: &mut Ctx, label: &str, reps: &[LawTestReport], bound: f64) {
    let ks: Vec<f64> = reps.iter().map(|r| r.ks).collect();
    if let Some(last) = ks.last() {
        ctx.at_most(format!("{label}_ks_last"), *last, bound);
    }
    ctx.holds(format!("{label}_ks_decreasing"), decreasing(&ks));
}

#[derive(Serialize)]
struct EnsembleSummary {
    trajectories: usize,
    times: Vec<u64>,
    grid: Vec<f64>,
    mean_roof: f64,
    retries: u64,
    map_observables: Vec<String>,
    flow_observables: Vec<String>,
}

#[derive(Serialize)]
struct LawSection {
    clock: Clock,
    observable: String,
    reports: Vec<LawTestReport>,
}

#[derive(Serialize)]
struct SlopeCheck {
    clock: Clock,
    observable: String,
    fit: LogSlope,
    expected: f64,
    expected_stderr: f64,
    z: f64,
}

pub fn limit_test(cfg: &RunConfig, run: &mut Run) {
    const DOWNSTREAM: [&str; 6] = ["ensemble", "exponential", "laplace", "joint", "flatness", "log_slope"];
    let Some(b) = table_section(cfg, run) else {
        run.skip("constants", "table");
        for s in DOWNSTREAM {
            run.skip(s, "table");
        }
        return;
    };
    let lt = &cfg.limit_test;
    let g = cfg.registered(&lt.integrable).expect("checked at load");
    let centered = registry(cfg, &lt.centered);
    let psi = cfg.flow_registered(&lt.flow_integrable).expect("checked at load");
    let flows: Vec<(String, FlowObservable)> = lt
        .flow_centered
        .iter()
        .map(|n| (n.clone(), cfg.flow_registered(n).expect("checked at load")))
        .collect();
    let constants = run.section("constants", |ctx| {
        let phi0 = match lt.phi0 {
            Some(v) => Constant {
                name: "phi0".into(),
                value: v.sigma2,
                stderr: v.stderr,
                source: "config",
            },
            None => {
                let d = diffusion_matrix(&b, &cfg.estimate.diffusion)?;
                let (p, se) = d.phi0()?;
                ctx.holds("positive_definite", d.psd_ok);
                diffusion_tables(ctx, &d);
                Constant {
                    name: "phi0".into(),
                    value: p,
                    stderr: se,
                    source: "diffusion_matrix",
                }
            }
        };
        let mut variances = Vec::new();
        let missing: Vec<(String, CellObservable, Option<f64>)> = centered
            .iter()
            .filter(|r| !lt.variances.contains_key(&r.name))
            .map(|r| (r.name.clone(), r.observable.clone(), r.integral))
            .chain(
                flows
                    .iter()
                    .filter(|(n, _)| !lt.flow_variances.contains_key(n))
                    .map(|(n, f)| (format!("flow:{n}"), CellObservable::Flight(f.clone()), None)),
            )
            .collect();
        let estimated = if missing.is_empty() { Vec::new() } else { green_kubo(cfg, &b, &missing)? };
        let find = |key: &str, given: Option<&VarianceInput>| match given {
            Some(v) => Constant {
                name: key.to_string(),
                value: v.sigma2,
                stderr: v.stderr,
                source: "config",
            },
            None => {
                let r = &estimated.iter().find(|(n, _)| n == key).expect("estimated").1;
                Constant {
                    name: key.to_string(),
                    value: r.sigma2,
                    stderr: r.stderr,
                    source: "green_kubo",
                }
            }
        };
        for r in &centered {
            variances.push(find(&r.name, lt.variances.get(&r.name)));
        }
        let flow_variances = flows
            .iter()
            .map(|(n, _)| {
                let mut c = find(&format!("flow:{n}"), lt.flow_variances.get(n));
                c.name = n.clone();
                c
            })
            .collect();
        Ok(Constants {
            phi0,
            variances,
            flow_variances,
        })
    });
    let mut ensemble: Option<EnsembleRun> = None;
    run.section("ensemble", |_| {
        let mut map: Vec<(&str, &CellObservable)> = vec![(g.name.as_str(), &g.observable)];
        map.extend(centered.iter().map(|r| (r.name.as_str(), &r.observable)));
        let mut flow: Vec<(&str, &FlowObservable)> = vec![(lt.flow_integrable.as_str(), &psi)];
        flow.extend(flows.iter().map(|(n, f)| (n.as_str(), f)));
        let r = run_ensemble(&b, &lt.ensemble, &map, &flow)?;
        let s = EnsembleSummary {
            trajectories: r.trajectories(),
            times: r.config.times.clone(),
            grid: r.config.grid.clone(),
            mean_roof: r.mean_roof,
            retries: r.retries,
            map_observables: r.map_names.clone(),
            flow_observables: r.flow_names.clone(),
        };
        ensemble = Some(r);
        Ok(s)
    });
    let (Some(c), Some(ens)) = (constants, ensemble) else {
        let needs = if run.failed("constants") { "constants" } else { "ensemble" };
        for s in &DOWNSTREAM[1..] {
            run.skip(s, needs);
        }
        return;
    };
    let phi0 = c.phi0.value;
    let th = lt.thresholds;
    let nu = psi.flow_integral(b.table());
    run.section("exponential", |ctx| {
        let (mut ks_t, mut qq_t) = law_tables("exponential");
        let ig = g
            .integral
            .ok_or_else(|| Error::InvalidArgument(format!("`{}` needs an exact integral", g.name)))?;
        let nu = nu.ok_or_else(|| Error::InvalidArgument(format!("no exact flow integral for `{}`", lt.flow_integrable)))?;
        let map = exponential_test(&ens, Clock::Map, 0, ig, phi0)?;
        let flow = exponential_test(&ens, Clock::Flow, 0, nu, phi0)?;
        ks_checks(ctx, &format!("map_{}", g.name), &map, th.exponential_ks);
        ks_checks(ctx, &format!("flow_{}", lt.flow_integrable), &flow, th.exponential_ks);
        law_rows(&mut ks_t, &mut qq_t, "exponential", Clock::Map, &g.name, &map);
        law_rows(&mut ks_t, &mut qq_t, "exponential", Clock::Flow, &lt.flow_integrable, &flow);
        ctx.table(ks_t);
        ctx.table(qq_t);
        Ok(vec![
            LawSection {
                clock: Clock::Map,
                observable: g.name.clone(),
                reports: map,
            },
            LawSection {
                clock: Clock::Flow,
                observable: lt.flow_integrable.clone(),
                reports: flow,
            },
        ])
    });
    run.section("laplace", |ctx| {
        let (mut ks_t, mut qq_t) = law_tables("laplace");
        let mut out = Vec::new();
        for (i, (r, v)) in centered.iter().zip(&c.variances).enumerate() {
            let input = VarianceInput {
                sigma2: v.value,
                stderr: v.stderr,
            };
            let reps = laplace_test(&ens, Clock::Map, 1 + i, input, phi0)?;
            ks_checks(ctx, &format!("map_{}", r.name), &reps, th.laplace_ks);
            law_rows(&mut ks_t, &mut qq_t, "laplace", Clock::Map, &r.name, &reps);
            out.push(LawSection {
                clock: Clock::Map,
                observable: r.name.clone(),
                reports: reps,
            });
        }
        for (i, ((n, _), v)) in flows.iter().zip(&c.flow_variances).enumerate() {
            let input = VarianceInput {
                sigma2: v.value,
                stderr: v.stderr,
            };
            let reps = laplace_test(&ens, Clock::Flow, 1 + i, input, phi0)?;
            ks_checks(ctx, &format!("flow_{n}"), &reps, th.laplace_ks);
            law_rows(&mut ks_t, &mut qq_t, "laplace", Clock::Flow, n, &reps);
            out.push(LawSection {
                clock: Clock::Flow,
                observable: n.clone(),
                reports: reps,
            });
        }
        ctx.table(ks_t);
        ctx.table(qq_t);
        Ok(out)
    });
    let n_last = *lt.ensemble.times.last().expect("ensemble ran");
    run.section("joint", |ctx| {
        let (Some(f), Some(v)) = (centered.first(), c.variances.first()) else {
            return Err(Error::InvalidArgument("joint test needs one centered observable".into()));
        };
        let expected = g.integral.map(|ig| v.value / ig);
        let rep = joint_test_run(&ens, Clock::Map, 0, 1, n_last, expected, &lt.joint)?;
        if let Some(ok) = rep.slope_contains_expected {
            ctx.holds(format!("{}_slope_ci_contains_expected", f.name), ok);
        }
        ctx.holds("conditional_mean_zero", rep.symmetric);
        ctx.holds("intercept_zero", rep.intercept_zero);
        let mut t = Table::new(
            "joint_bins.csv",
            &["bin", "count", "x_mean", "y_mean", "y_mean_stderr", "y2_mean", "y2_stderr"],
        );
        for (i, b) in rep.bins.iter().enumerate() {
            t.row(vec![
                cell(i),
                cell(b.count),
                cell(b.x_mean),
                cell(b.y_mean),
                cell(b.y_mean_stderr),
                cell(b.y2_mean),
                cell(b.y2_stderr),
            ]);
        }
        ctx.table(t);
        Ok(rep)
    });
    run.section("flatness", |ctx| {
        let mut out: Vec<Named<FlatnessReport>> = Vec::new();
        let mut add = |ctx: &mut Ctx, name: String, r: FlatnessReport| {
            ctx.holds(format!("{name}_monotone"), r.monotone);
            out.push(Named { name, value: r });
        };
        if let Some(f) = centered.first() {
            add(ctx, format!("map_{}", f.name), functional_flatness(&ens, Clock::Map, 1, Flatness::Centered)?);
        }
        if let Some((n, _)) = flows.first() {
            add(ctx, format!("flow_{n}"), functional_flatness(&ens, Clock::Flow, 1, Flatness::Centered)?);
        }
        add(ctx, format!("map_{}", g.name), functional_flatness(&ens, Clock::Map, 0, Flatness::Integrable)?);
        let mut t = Table::new("flatness.csv", &["series", "kind", "n", "mean", "stderr", "bound_ratio"]);
        for s in &out {
            for r in &s.value.rows {
                t.row(vec![
                    s.name.clone(),
                    format!("{:?}", s.value.kind).to_lowercase(),
                    cell(r.n),
                    cell(r.mean),
                    cell(r.stderr),
                    r.bound_ratio.map(cell).unwrap_or_default(),
                ]);
            }
        }
        ctx.table(t);
        Ok(out)
    });
    run.section("log_slope", |ctx| {
        let mut out = Vec::new();
        let mut one = |ctx: &mut Ctx, clock: Clock, name: &str, integral: Option<f64>| -> Result<()> {
            let Some(i) = integral else { return Ok(()) };
            let fit = log_slope(&ens, clock, 0)?;
            let expected = i * phi0;
            let expected_stderr = i.abs() * c.phi0.stderr;
            let z = (fit.slope - expected).abs() / (fit.stderr.powi(2) + expected_stderr.powi(2)).sqrt();
            ctx.at_most(format!("{}_{name}_z", if clock == Clock::Map { "map" } else { "flow" }), z, th.max_z);
            out.push(SlopeCheck {
                clock,
                observable: name.to_string(),
                fit,
                expected,
                expected_stderr,
                z,
            });
            Ok(())
        };
        one(ctx, Clock::Map, &g.name, g.integral)?;
        one(ctx, Clock::Flow, &lt.flow_integrable, nu)?;
        Ok(out)
    });
}

#[derive(Serialize)]
struct SpectrumSummary {
    chain: String,
    states: usize,
    sigma2: [[f64; 2]; 2],
    sigma2_exact: [[f64; 2]; 2],
    closed_form_error: Option<f64>,
    expansion_exponent: f64,
    projector_lipschitz: f64,
    max_idempotence_error: f64,
    residual_rate: f64,
    residual_exact: bool,
    gap_collapse: Vec<[f64; 2]>,
}

fn spectrum_one(ctx: &mut Ctx, t: &mut Table, label: &str, chain: &OracleChain, o: &crate::config::OracleSection) -> SpectrumSummary {
    let th = o.thresholds;
    let s = chain.twisted_spectrum(o.grid, o.powers);
    let exact = chain.diffusion_exact();
    let mut err: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            err = err.max((s.sigma2[i][j] - exact[i][j]).abs());
        }
    }
    ctx.at_most(format!("{label}_sigma2_error"), err, th.sigma2);
    if !s.residual_exact {
        ctx.check(
            format!("{label}_residual_rate"),
            s.residual_rate,
            format!("< {}", th.residual_rate),
            s.residual_rate < th.residual_rate,
        );
    }
    ctx.holds(format!("{label}_spectral_gap"), s.gap_collapse.is_empty());
    // For IID steps λ_u is the characteristic function of one step.
    let closed = match (chain.is_iid(), chain_steps(chain)) {
        (true, Some(f)) => {
            let row = &chain.matrix()[0];
            let mut worst: f64 = 0.0;
            for p in &s.points {
                let (mut re, mut im) = (0.0, 0.0);
                for (k, a) in f.iter().enumerate() {
                    let ph = p.u[0] * a[0] as f64 + p.u[1] * a[1] as f64;
                    re += row[k] * ph.cos();
                    im += row[k] * ph.sin();
                }
                worst = worst.max(((p.lambda[0] - re).powi(2) + (p.lambda[1] - im).powi(2)).sqrt());
            }
            ctx.at_most(format!("{label}_eigenvalue_error"), worst, th.eigenvalue);
            Some(worst)
        }
        _ => None,
    };
    for p in &s.points {
        t.row(vec![
            label.to_string(),
            cell(p.u[0]),
            cell(p.u[1]),
            cell(p.lambda[0]),
            cell(p.lambda[1]),
            cell(p.second_modulus),
            cell(p.converged),
        ]);
    }
    SpectrumSummary {
        chain: label.to_string(),
        states: chain.states(),
        sigma2: s.sigma2,
        sigma2_exact: exact,
        closed_form_error: closed,
        expansion_exponent: s.expansion_exponent,
        projector_lipschitz: s.projector_lipschitz,
        max_idempotence_error: s.max_idempotence_error,
        residual_rate: s.residual_rate,
        residual_exact: s.residual_exact,
        gap_collapse: s.gap_collapse,
    }
}

fn chain_steps(chain: &OracleChain) -> Option<Vec<[i64; 2]>> {
    let d = chain.states();
    // Steps attached to the departing state.
    let f: Vec<[i64; 2]> = (0..d).map(|j| chain.step(j, 0)).collect();
    (0..d).all(|j| (0..d).all(|k| chain.step(j, k) == f[j])).then_some(f)
}

#[derive(Serialize)]
struct ExactVarianceSummary {
    mark_levels: usize,
    green_kubo: f64,
    tail_bound: f64,
    exact: bool,
    induced: Option<f64>,
}

#[derive(Serialize)]
struct LocalTimesRow {
    n: u64,
    exponential_ks: f64,
    laplace_ks: f64,
    laplace_excess_kurtosis: f64,
}

#[derive(Serialize)]
struct LocalTimesSummary {
    trajectories: usize,
    mark_levels: usize,
    rows: Vec<LocalTimesRow>,
    /// KS distance of the exact law of N₀ at the first time to Exp(1):
    /// the floor set by integer local times, free of sampling noise.
    exact_law_ks_first: f64,
}

pub fn oracle(cfg: &RunConfig, run: &mut Run) {
    let o = &cfg.oracle;
    let chain = match &o.chain {
        Some(c) => OracleChain::new(c.matrix.clone(), c.steps.clone()),
        None => Ok(OracleChain::lazy_walk()),
    };
    let label = if o.chain.is_some() { "custom" } else { "lazy" };
    let chain = match chain {
        Ok(c) => Some(c),
        Err(e) => {
            run.section("chain", |_| Err::<(), _>(e));
            None
        }
    };
    if let Some(chain) = &chain {
        run.section("spectrum", |ctx| {
            let mut t = Table::new("spectrum.csv", &["chain", "u_x", "u_y", "re", "im", "second_modulus", "converged"]);
            let mut out = vec![spectrum_one(ctx, &mut t, label, chain, o)];
            if o.chain.is_none() {
                let p = OracleChain::persistent_lazy_walk(o.persistence)?;
                out.push(spectrum_one(ctx, &mut t, "persistent", &p, o));
            }
            ctx.table(t);
            Ok(out)
        });
        run.section("local_limit", |ctx| {
            let r = chain.local_limit_rate(&o.ells)?;
            let th = o.thresholds;
            ctx.at_most("sup_error_slope", r.slope, th.local_limit_slope);
            if let Some(last) = r.ell_p0.last() {
                ctx.at_most("ell_p0_relative_error", (last / r.phi0 - 1.0).abs(), th.local_limit_relative);
            }
            let mut t = Table::new("local_limit.csv", &["ell", "sup_error", "ell_p0"]);
            for ((l, e), p) in r.ells.iter().zip(&r.sup_errors).zip(&r.ell_p0) {
                t.row(vec![cell(l), cell(e), cell(p)]);
            }
            ctx.table(t);
            Ok(r)
        });
        run.section("exact_variance", |ctx| {
            let (marked, w) = chain.with_marks(o.mark_levels)?;
            let gk = marked.exact_green_kubo(&w, &[([0, 0], 1.0)], o.green_kubo_lags, 1e-12)?;
            let induced = marked.exact_induced_variance(&w);
            if let Some(h) = induced {
                ctx.at_most("green_kubo_vs_induced", (gk.sigma2 - h).abs(), gk.tail_bound + 1e-9);
            }
            let mut t = Table::new("exact_green_kubo_lags.csv", &["k", "term"]);
            for (k, v) in gk.terms.iter().enumerate() {
                t.row(vec![cell(k), cell(v)]);
            }
            ctx.table(t);
            Ok(ExactVarianceSummary {
                mark_levels: o.mark_levels,
                green_kubo: gk.sigma2,
                tail_bound: gk.tail_bound,
                exact: gk.exact,
                induced,
            })
        });
    }
    let lt = &o.local_times;
    run.section("local_times", |ctx| {
        if lt.times.is_empty() {
            return Err(Error::InvalidArgument("oracle.local_times.times is empty".into()));
        }
        let phi0 = 5.0 / (4.0 * PI);
        let sim = simulate_lazy_local_times(lt.trajectories, &lt.times, lt.mark_levels, lt.seed);
        let mut rows = Vec::new();
        for (c, &n) in sim.checkpoints.iter().enumerate() {
            let l = phi0 * (n as f64).ln();
            let x: Vec<f64> = sim.visits[c].iter().map(|&v| v as f64 / l).collect();
            let y: Vec<f64> = sim.marks[c].iter().map(|&v| v / l.sqrt()).collect();
            rows.push(LocalTimesRow {
                n,
                exponential_ks: law_test(&x, TargetLaw::Exponential { mean: 1.0 }, n, n as f64).ks,
                laplace_ks: law_test(&y, TargetLaw::Laplace { variance: 1.0 }, n, n as f64).ks,
                laplace_excess_kurtosis: describe(&y).2,
            });
        }
        let n0 = sim.checkpoints[0] as usize;
        let law = local_time_law(&first_returns(&lazy_return_probabilities(0.2, n0)), n0, 1e-13);
        let l = phi0 * (n0 as f64).ln();
        let mut cdf = 0.0;
        let mut exact_ks: f64 = 0.0;
        for (j, p) in law.iter().enumerate() {
            let x = (j + 1) as f64 / l;
            exact_ks = exact_ks.max((exponential_cdf(1.0, x) - cdf).abs());
            cdf += p;
            exact_ks = exact_ks.max((cdf - exponential_cdf(1.0, x)).abs());
        }
        let th = o.thresholds;
        let exp: Vec<f64> = rows.iter().map(|r| r.exponential_ks).collect();
        let lap: Vec<f64> = rows.iter().map(|r| r.laplace_ks).collect();
        let last = rows.last().expect("nonempty");
        ctx.at_most("exponential_ks_last", last.exponential_ks, th.exponential_ks);
        ctx.holds("exponential_ks_decreasing", decreasing(&exp));
        ctx.at_most("laplace_ks_last", last.laplace_ks, th.laplace_ks);
        ctx.holds("laplace_ks_decreasing", decreasing(&lap));
        let k = last.laplace_excess_kurtosis;
        ctx.check(
            "laplace_excess_kurtosis",
            k,
            format!("in [{}, {}]", th.kurtosis[0], th.kurtosis[1]),
            (th.kurtosis[0]..=th.kurtosis[1]).contains(&k),
        );
        let mut t = Table::new("local_times.csv", &["n", "exponential_ks", "laplace_ks", "laplace_excess_kurtosis"]);
        for r in &rows {
            t.row(vec![cell(r.n), cell(r.exponential_ks), cell(r.laplace_ks), cell(r.laplace_excess_kurtosis)]);
        }
        ctx.table(t);
        Ok(LocalTimesSummary {
            trajectories: lt.trajectories,
            mark_levels: lt.mark_levels,
            rows,
            exact_law_ks_first: exact_ks,
        })
    });
}

#[derive(Serialize)]
struct GroupCount {
    m: usize,
    r: usize,
    s: usize,
    count: usize,
    expected: u64,
}

#[derive(Serialize)]
struct IdentityRow {
    m: usize,
    parameters: usize,
    value: String,
    matches: bool,
}

#[derive(Serialize)]
struct MultiplicityRow {
    m: usize,
    compositions: usize,
    mismatches: usize,
}

#[derive(Serialize)]
struct MonteCarloRow {
    m: usize,
    sample: f64,
    stderr: f64,
    closed: f64,
    z: f64,
}

/// All compositions of m into positive parts.
fn compositions(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    (1..=m)
        .flat_map(|first| {
            compositions(m - first).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

pub fn moments(cfg: &RunConfig, run: &mut Run) {
    let mc = &cfg.moments;
    let top = mc.max_m;
    run.section("enumeration", |ctx| {
        if top > MAX_ENUMERATION_M {
            return Err(Error::InvalidArgument(format!(
                "moments.max_m = {top} exceeds the enumeration limit {MAX_ENUMERATION_M}"
            )));
        }
        let mut counts = Vec::new();
        let mut rows = Table::new("enumeration.csv", &["m", "q", "N", "eps", "J2", "J1", "J11", "r", "s"]);
        let mut ok = true;
        for m in 1..=top {
            let groups = enumerate_admissible(m)?;
            for g in &groups {
                let expected = g.expected_count(m);
                ok &= g.pairs.len() as u64 == expected;
                counts.push(GroupCount {
                    m,
                    r: g.r,
                    s: g.s,
                    count: g.pairs.len(),
                    expected,
                });
            }
            for r in (0..=m).step_by(2) {
                for s in 0..=r / 2 {
                    if binomial(m - r / 2, r / 2) * binomial(r / 2, s) > 0 {
                        ok &= groups.iter().any(|g| g.r == r && g.s == s);
                    }
                }
            }
            for e in enumeration_table(m)? {
                rows.row(vec![cell(e.m), cell(e.q), e.n, e.eps, e.j2, e.j1, e.j11, cell(e.r), cell(e.s)]);
            }
        }
        ctx.holds("group_counts_match", ok);
        let mut t = Table::new("group_counts.csv", &["m", "r", "s", "count", "expected"]);
        for c in &counts {
            t.row(vec![cell(c.m), cell(c.r), cell(c.s), cell(c.count), cell(c.expected)]);
        }
        ctx.table(rows);
        ctx.table(t);
        Ok(counts)
    });
    run.section("identities", |ctx| {
        let params: Vec<Vec<BigRational>> = mc
            .parameters
            .iter()
            .map(|r| r.iter().map(|v| v.parse().expect("checked at load")).collect())
            .collect();
        let mut out = Vec::new();
        let mut ok = true;
        let mut t = Table::new("identities.csv", &["m", "parameters", "value", "matches"]);
        for m in 1..=top {
            for (i, p) in params.iter().enumerate() {
                let (value, matches) = match combinatorial_moment(m, &p[0], &p[1], &p[2], &p[3], &p[4]) {
                    Ok(v) => (v.to_string(), true),
                    Err(Error::MismatchDetected { assembled, .. }) => (assembled, false),
                    Err(e) => return Err(e),
                };
                ok &= matches;
                t.row(vec![cell(m), cell(i), value.clone(), cell(matches)]);
                out.push(IdentityRow {
                    m,
                    parameters: i,
                    value,
                    matches,
                });
            }
        }
        ctx.holds("moment_identities", ok);
        ctx.table(t);
        Ok(out)
    });
    run.section("multiplicities", |ctx| {
        let mut out = Vec::new();
        let mut t = Table::new("multiplicities.csv", &["m", "parts", "closed", "brute_force"]);
        for m in 1..=top.min(mc.brute_force_max_m) {
            let mut bad = 0;
            let comps = compositions(m);
            for parts in &comps {
                let closed = multiplicity_cn(m, parts)?;
                let brute = multiplicity_brute_force(m, parts);
                bad += (closed != brute.into()) as usize;
                let p = parts.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
                t.row(vec![cell(m), p, closed.to_string(), cell(brute)]);
            }
            out.push(MultiplicityRow {
                m,
                compositions: comps.len(),
                mismatches: bad,
            });
        }
        ctx.holds("multiplicities_match", out.iter().all(|r| r.mismatches == 0));
        ctx.table(t);
        Ok(out)
    });
    run.section("monte_carlo", |ctx| {
        if !(mc.mc_phi0 > 0.0 && mc.mc_sigma2 > 0.0) {
            return Err(Error::InvalidArgument("moments.mc_phi0 and mc_sigma2 must be positive".into()));
        }
        let mut rng = stream_rng(mc.seed, 0);
        let samples = mc_limit_sampler(mc.mc_phi0, mc.mc_sigma2.sqrt(), mc.mc_samples, &mut rng);
        let mut rows = Vec::new();
        let mut t = Table::new("monte_carlo.csv", &["m", "sample", "stderr", "closed", "z"]);
        for m in 1..=top.min(6) {
            let powers: Vec<f64> = samples.iter().map(|(x, y)| (x + y).powi(m as i32)).collect();
            let (sample, stderr) = batch_stderr(&powers, 64, mean);
            let closed = limit_moment_closed(m, &1.0, &1.0, &mc.mc_phi0, &mc.mc_sigma2);
            let z = (sample - closed).abs() / stderr;
            ctx.at_most(format!("m{m}_z"), z, mc.mc_max_z);
            t.row(vec![cell(m), cell(sample), cell(stderr), cell(closed), cell(z)]);
            rows.push(MonteCarloRow {
                m,
                sample,
                stderr,
                closed,
                z,
            });
        }
        ctx.table(t);
        Ok(rows)
    });
}
