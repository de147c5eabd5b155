use std::collections::BTreeMap;
use std::fmt::Write as _;

use clap::Parser;
use log::info;
use pre_forge::algebra::{eig_full, OperatorBasis, RMat, RVec, C64};
use pre_forge::constraints::{heuristic_min_k, verify, ConstraintSystem, Ensemble, TransitionGraph};
use pre_forge::measurement::{check_scheme, synthesize_with, AdaptiveScheme, SynthesisOptions};
use pre_forge::model::{vectorize, BlochModel, MasterEquation};
use pre_forge::solver::{
    ensemble_distance, scan_existence, solve_numeric_with_family, solve_wigner_family, SolutionSet, SolverConfig,
};
use pre_forge::symmetry::{find_invariant_subspaces, find_wigner_symmetries, lie_generators, InvariantSubspace};
use pre_forge::trajectory::{events_csv, simulate, unconditional_check, RecordPolicy, TrajectoryConfig};

use crate::bundle::*;
use crate::plotdata;
use crate::spec::{MESpecFile, BUILTIN};
use crate::{Cli, CliError, Command, EnsembleArgs, Graph, ModelArgs, Reduce, SearchArgs};

struct Model {
    spec: MESpecFile,
    values: BTreeMap<String, f64>,
    me: MasterEquation,
    bm: BlochModel,
}

impl Model {
    fn load(args: &ModelArgs, embedded: Option<&MESpecFile>) -> Result<Self, CliError> {
        let spec = match embedded {
            Some(s) => s.clone(),
            None => MESpecFile::load(&args.spec)?,
        };
        let values = spec.bind(&args.params)?;
        Self::build(spec, values)
    }

    fn build(spec: MESpecFile, values: BTreeMap<String, f64>) -> Result<Self, CliError> {
        let me = spec.master_equation(&values)?;
        let bm = vectorize(&me, &OperatorBasis::new(spec.dim)?)?;
        Ok(Self { spec, values, me, bm })
    }

    fn bundle(&self, command: &str, argv: &[String], rng_seed: Option<u64>) -> Result<ResultBundle, CliError> {
        Ok(ResultBundle {
            schema: BUNDLE_SCHEMA.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            invocation: argv.to_vec(),
            spec: self.spec.clone(),
            parameters: self.values.clone(),
            rng_seed,
            model: ModelSummary::new(&self.bm)?,
            subspaces: None,
            symmetries: None,
            search: None,
            verification: None,
            scheme: None,
            trajectory: None,
            scan: None,
        })
    }

    fn label(&self) -> String {
        let name = if self.spec.metadata.name.is_empty() { "model" } else { &self.spec.metadata.name };
        let params: Vec<String> = self.values.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{name} (D={}, N={}) with {}", self.bm.dim(), self.bm.n(), params.join(", "))
    }
}

fn write_file(path: &str, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::usage(format!("{path}: {e}")))
}

fn write_bundle(path: Option<&str>, b: &ResultBundle) -> Result<(), CliError> {
    if let Some(path) = path {
        let text = serde_json::to_string_pretty(b).map_err(|e| CliError::usage(e.to_string()))?;
        write_file(path, &text)?;
        info!("wrote {path}");
    }
    Ok(())
}

/// Rounds what would print as `-0.000000` to zero.
fn tidy(x: f64) -> f64 {
    if x.abs() < 5e-7 {
        0.0
    } else {
        x
    }
}

fn vec_str(v: &RVec) -> String {
    let parts: Vec<String> = v.iter().map(|&x| format!("{:.6}", tidy(x))).collect();
    format!("({})", parts.join(", "))
}

fn complex_str(z: C64) -> String {
    if z.im.abs() <= 1e-12 * (1.0 + z.re.abs()) {
        format!("{:.6}", tidy(z.re))
    } else if z.re.abs() <= 1e-12 * (1.0 + z.im.abs()) {
        format!("{:.6}i", z.im)
    } else {
        format!("{:.6}{:+.6}i", z.re, z.im)
    }
}

fn matrix_str(m: &RMat, indent: &str) -> String {
    let mut s = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|&x| format!("{:>11.6}", tidy(x))).collect();
        let _ = writeln!(s, "{indent}[{} ]", cells.join(""));
    }
    s
}

fn ensemble_str(i: usize, e: &Ensemble, residual: Option<f64>) -> String {
    let mut s = String::new();
    let _ = write!(s, "[{i}]");
    if let Some(r) = residual {
        let _ = write!(s, " residual {r:.2e}");
    }
    s.push('\n');
    for (k, x) in e.states().iter().enumerate() {
        let _ = writeln!(s, "    x{k} = {}  weight {:.6}", vec_str(&x.0), e.occupations()[k]);
    }
    let kap = e.kappa();
    for k in 0..e.k() {
        for j in 0..e.k() {
            if j != k && kap[(j, k)] > 0.0 {
                let _ = writeln!(s, "    κ {k}→{j} = {:.6}", kap[(j, k)]);
            }
        }
    }
    s
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    run_with(cli, &argv, None).map(|_| ())
}

/// Executes one command; returns the bundle it produced, if any.
fn run_with(cli: Cli, argv: &[String], embedded: Option<&MESpecFile>) -> Result<Option<ResultBundle>, CliError> {
    match cli.command {
        Command::Analyze { model, out } => analyze(&Model::load(&model, embedded)?, argv, out.as_deref()),
        Command::Search { model, search, out } => {
            cmd_search(&Model::load(&model, embedded)?, &search, argv, out.as_deref())
        }
        Command::Verify { model, ensemble, tol, out } => {
            cmd_verify(&Model::load(&model, embedded)?, &ensemble, tol, argv, out.as_deref())
        }
        Command::Scheme { model, ensemble, detectors, wlo_factor, out } => {
            let m = Model::load(&model, embedded)?;
            let ens = load_ensemble(&ensemble.ensemble, ensemble.index)?;
            let (scheme, section) = build_scheme(&m, &ens, detectors, wlo_factor)?;
            print_scheme(&scheme, &section);
            let mut b = m.bundle("scheme", argv, None)?;
            let pass = section.report.pass;
            b.scheme = Some(section);
            write_bundle(out.as_deref(), &b)?;
            if !pass {
                return Err(CliError::failed("scheme does not reproduce the ensemble"));
            }
            Ok(Some(b))
        }
        Command::Simulate {
            model,
            ensemble,
            detectors,
            wlo_factor,
            jumps,
            dt,
            t_max,
            rng,
            events,
            stride,
            unconditional,
            times,
            out,
        } => {
            let m = Model::load(&model, embedded)?;
            let record = match (events.is_some(), stride) {
                (false, _) => RecordPolicy::None,
                (true, 0) => return Err(CliError::usage("--stride must be at least 1")),
                (true, 1) => RecordPolicy::JumpsOnly,
                (true, n) => RecordPolicy::Strided(n),
            };
            let cfg = TrajectoryConfig {
                dt,
                n_jumps: jumps,
                t_max,
                rng_seed: rng,
                record,
                ..Default::default()
            };
            let times = parse_list(&times)?;
            let job = SimulateJob {
                ensemble: &ensemble,
                detectors,
                wlo_factor,
                cfg,
                events: events.as_deref(),
                unconditional,
                times,
            };
            cmd_simulate(&m, &job, argv, out.as_deref())
        }
        Command::Scan { mut model, vary, from, to, step, search, csv, out } => {
            model.params.push((vary.clone(), from));
            let m = Model::load(&model, embedded)?;
            cmd_scan(&m, &vary, (from, to, step), &search, csv.as_deref(), argv, out.as_deref())
        }
        Command::Plotdata { bundle, figure, out } => {
            let b = ResultBundle::load(&bundle)?;
            let csv = plotdata::figure_csv(&b, &figure)?;
            match out {
                Some(path) => write_file(&path, &csv)?,
                None => say_raw!("{csv}"),
            }
            Ok(None)
        }
        Command::Rerun { bundle, out } => rerun(&bundle, out.as_deref()),
        Command::Catalog { name } => {
            match name {
                None => BUILTIN.iter().for_each(|(n, _)| say!("catalog:{n}")),
                Some(name) => {
                    let (_, text) = BUILTIN
                        .iter()
                        .find(|(n, _)| *n == name.trim_start_matches("catalog:"))
                        .ok_or_else(|| CliError::usage(format!("unknown catalog model `{name}`")))?;
                    say_raw!("{text}");
                }
            }
            Ok(None)
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| CliError::usage(format!("`{t}`: {e}"))))
        .collect()
}

fn analyze(m: &Model, argv: &[String], out: Option<&str>) -> Result<Option<ResultBundle>, CliError> {
    let bm = &m.bm;
    say!("model: {}", m.label());
    say!("L0 =");
    say_raw!("{}", matrix_str(&bm.l0, "  "));
    say!("b    = {}", vec_str(&bm.b));
    say!("x_ss = {}", vec_str(&bm.x_ss.0));
    let spectrum = eig_full(&bm.l0)?;
    say!("eigenvalues:");
    for c in &spectrum.clusters {
        let mut line = format!("  λ = {}  (algebraic {}, geometric {})", complex_str(c.value), c.algebraic, c.geometric);
        if c.is_defective() {
            let lens: Vec<String> = c.chains.iter().map(|ch| ch.vectors.len().to_string()).collect();
            let _ = write!(line, "  defective, Jordan chains of length {}", lens.join(", "));
        }
        say!("{line}");
        for v in &c.vectors {
            let parts: Vec<String> = v.iter().map(|z| complex_str(*z)).collect();
            say!("      v = ({})", parts.join(", "));
        }
    }
    say!("defective: {}", if spectrum.is_defective() { "yes" } else { "no" });

    let subspaces = find_invariant_subspaces(bm, bm.dim() - 1, bm.n() - 1)?;
    say!("invariant subspaces:");
    let records: Vec<SubspaceRecord> = subspaces.iter().enumerate().map(|(i, s)| SubspaceRecord::new(i, s)).collect();
    for r in &records {
        let cols: Vec<String> = r
            .basis
            .iter()
            .map(|c| vec_str(&RVec::from_column_slice(c)))
            .collect();
        say!("  [{}] n={}  certificate {:.1e}  span {}", r.index, r.n, r.certificate, cols.join(" "));
        for s in &r.sources {
            say!("      {s}");
        }
        if let Some(f) = &r.family {
            say!("      {f}");
        }
    }
    let symmetries = find_wigner_symmetries(bm);
    say!("symmetries:");
    let sym_records: Vec<SymmetryRecord> = symmetries.iter().map(SymmetryRecord::new).collect();
    for (i, s) in symmetries.iter().enumerate() {
        let what = match (&s.generator, &s.generator_tag) {
            (Some(_), Some(tag)) => format!("continuous ({tag})"),
            (Some(_), None) => "continuous".to_string(),
            _ => "discrete".to_string(),
        };
        say!("  [{i}] {:?} {what}", s.kind);
        say_raw!("{}", matrix_str(s.t0(), "      "));
    }
    let mut b = m.bundle("analyze", argv, None)?;
    b.subspaces = Some(records);
    b.symmetries = Some(sym_records);
    write_bundle(out, &b)?;
    Ok(Some(b))
}

enum Plan {
    Full,
    Subspace(Box<InvariantSubspace>, String),
    Auto,
    Wigner,
}

fn parse_basis(bm: &BlochModel, text: &str) -> Result<InvariantSubspace, CliError> {
    let cols = text
        .split(';')
        .map(|c| parse_list(c).map(RVec::from_vec))
        .collect::<Result<Vec<_>, _>>()?;
    if cols.iter().any(|c| c.len() != bm.n()) {
        return Err(CliError::usage(format!("--basis: each column needs {} entries", bm.n())));
    }
    InvariantSubspace::from_basis(bm, &RMat::from_columns(&cols)).map_err(CliError::from)
}

fn plan(bm: &BlochModel, s: &SearchArgs) -> Result<Plan, CliError> {
    if let Some(text) = &s.basis {
        return Ok(Plan::Subspace(Box::new(parse_basis(bm, text)?), "explicit basis".into()));
    }
    match s.subspace.as_str() {
        "none" => Ok(Plan::Full),
        "auto" => {
            if s.wigner_reduce == Reduce::Auto && bm.dim() == 2 && !lie_generators(bm).is_empty() {
                Ok(Plan::Wigner)
            } else {
                Ok(Plan::Auto)
            }
        }
        idx => {
            let i: usize = idx
                .parse()
                .map_err(|_| CliError::usage(format!("--subspace {idx}: expected auto, none or an index")))?;
            let mut subs = find_invariant_subspaces(bm, bm.dim() - 1, bm.n() - 1)?;
            if i >= subs.len() {
                return Err(CliError::usage(format!(
                    "--subspace {i}: the model has {} invariant subspaces",
                    subs.len()
                )));
            }
            Ok(Plan::Subspace(Box::new(subs.swap_remove(i)), format!("subspace {i}")))
        }
    }
}

fn maps_into(t0: &RMat, sub: &InvariantSubspace) -> bool {
    let i0 = sub.basis_i0();
    let image = t0 * i0;
    (&image - sub.projector() * &image).norm() <= 1e-9 * (1.0 + image.norm())
}

/// Discrete symmetries of the model that keep `sub` (if any) in place.
fn dedup_family(bm: &BlochModel, sub: Option<&InvariantSubspace>) -> Vec<RMat> {
    let n = bm.n();
    find_wigner_symmetries(bm)
        .into_iter()
        .filter(|w| w.generator.is_none() && (w.t0() - RMat::identity(n, n)).norm() > 1e-9)
        .map(|w| w.t0().clone())
        .filter(|t| sub.is_none_or(|s| maps_into(t, s)))
        .collect()
}

fn graph(g: Graph) -> TransitionGraph {
    match g {
        Graph::Cyclic => TransitionGraph::Cyclic,
        Graph::Full => TransitionGraph::Full,
    }
}

fn solver_config(s: &SearchArgs) -> SolverConfig {
    SolverConfig {
        tol: s.tol,
        seeds: s.seeds,
        max_iter: s.max_iter,
        rng_seed: s.rng,
        ..Default::default()
    }
}

fn merge(into: &mut SolutionSet, from: SolutionSet, scale: f64, eps: f64, family: &[RMat]) {
    for (e, tag) in from.ensembles.into_iter().zip(from.family_tags) {
        if !into.ensembles.iter().any(|x| ensemble_distance(x, &e, scale, family) <= eps) {
            into.ensembles.push(e);
            into.family_tags.push(tag);
        }
    }
    into.diagnostics.extend(from.diagnostics);
    into.rate_vertices.extend(from.rate_vertices);
}

fn search(
    bm: &BlochModel,
    s: &SearchArgs,
) -> Result<(SolutionSet, String, Option<SubspaceRecord>, Vec<RMat>), CliError> {
    let cfg = solver_config(s);
    let g = graph(s.graph);
    match plan(bm, s)? {
        Plan::Full => {
            let family = if s.dedup_symmetry { dedup_family(bm, None) } else { Vec::new() };
            let cs = ConstraintSystem::build_full(bm, s.k, g)?;
            Ok((solve_numeric_with_family(&cs, &cfg, &family)?, "full".into(), None, family))
        }
        Plan::Subspace(sub, label) => {
            let family = if s.dedup_symmetry { dedup_family(bm, Some(&sub)) } else { Vec::new() };
            let cs = ConstraintSystem::build_subspace_reduced(bm, &sub, s.k, g)?;
            let set = solve_numeric_with_family(&cs, &cfg, &family)?;
            Ok((set, label, Some(SubspaceRecord::new(0, &sub)), family))
        }
        Plan::Wigner => Ok((solve_wigner_family(bm, s.k)?, "wigner family".into(), None, Vec::new())),
        Plan::Auto => {
            let subs = find_invariant_subspaces(bm, bm.dim() - 1, bm.n() - 1)?;
            let mut sizes: Vec<usize> = subs.iter().map(|s| s.n()).collect();
            sizes.sort_unstable();
            sizes.dedup();
            for n in sizes {
                let mut set = SolutionSet::default();
                let mut used = Vec::new();
                let mut family = Vec::new();
                for (i, sub) in subs.iter().enumerate().filter(|(_, s)| s.n() == n) {
                    let fam = if s.dedup_symmetry { dedup_family(bm, Some(sub)) } else { Vec::new() };
                    let cs = ConstraintSystem::build_subspace_reduced(bm, sub, s.k, g.clone())?;
                    let found = solve_numeric_with_family(&cs, &cfg, &fam)?;
                    info!("subspace {i} (n={n}): {} ensembles", found.len());
                    if !found.is_empty() {
                        used.push(i.to_string());
                    }
                    merge(&mut set, found, bm.scale(), cfg.dedup_eps, &fam);
                    family.extend(fam);
                }
                if !set.is_empty() {
                    return Ok((set, format!("subspaces {} (n={n})", used.join(", ")), None, family));
                }
            }
            let family = if s.dedup_symmetry { dedup_family(bm, None) } else { Vec::new() };
            let cs = ConstraintSystem::build_full(bm, s.k, g)?;
            Ok((solve_numeric_with_family(&cs, &cfg, &family)?, "full".into(), None, family))
        }
    }
}

fn warn_heuristic(bm: &BlochModel, s: &SearchArgs) {
    let real = s.basis.is_some() || !matches!(s.subspace.as_str(), "none" | "auto");
    let min = heuristic_min_k(bm.dim(), real);
    if s.k < min {
        eprintln!(
            "warning: K={} is below the heuristic minimum K={min} for D={}{}; solutions may not exist",
            s.k,
            bm.dim(),
            if real { " in a real subspace" } else { "" }
        );
    }
}

fn cmd_search(m: &Model, s: &SearchArgs, argv: &[String], out: Option<&str>) -> Result<Option<ResultBundle>, CliError> {
    if s.k < 2 {
        return Err(CliError::usage("--k must be at least 2"));
    }
    warn_heuristic(&m.bm, s);
    let (set, reduction, subspace, family) = search(&m.bm, s)?;
    let reports = set
        .ensembles
        .iter()
        .map(|e| verify(&m.me, &m.bm, e, 1e-8))
        .collect::<Result<Vec<_>, _>>()?;
    say!("model: {}", m.label());
    say!("K={} {:?} graph, {reduction}: {} ensemble(s)", s.k, s.graph, set.len());
    for (i, (e, r)) in set.ensembles.iter().zip(&reports).enumerate() {
        say_raw!("{}", ensemble_str(i, e, Some(r.max_residual)));
        if let Some(Some(tag)) = set.family_tags.get(i) {
            say!("    family: {tag}");
        }
    }
    let mut starts = OutcomeCounts::default();
    set.diagnostics.iter().for_each(|d| starts.add(d.outcome));
    let mut b = m.bundle("search", argv, Some(s.rng))?;
    b.search = Some(SearchSection {
        k: s.k,
        graph: format!("{:?}", s.graph).to_lowercase(),
        reduction,
        subspace,
        solver: solver_config(s),
        dedup_maps: family.iter().map(rows).collect(),
        ensembles: set.ensembles.iter().map(EnsembleRecord::from_ensemble).collect(),
        family_tags: set.family_tags.clone(),
        verification: reports,
        rate_vertices: set.rate_vertices.iter().map(|v| v.iter().copied().collect()).collect(),
        starts,
    });
    write_bundle(out, &b)?;
    if set.is_empty() {
        return Err(CliError::failed(format!("no K={} ensembles found", s.k)));
    }
    Ok(Some(b))
}

fn cmd_verify(
    m: &Model,
    e: &EnsembleArgs,
    tol: f64,
    argv: &[String],
    out: Option<&str>,
) -> Result<Option<ResultBundle>, CliError> {
    let ens = load_ensemble(&e.ensemble, e.index)?;
    let rep = verify(&m.me, &m.bm, &ens, tol)?;
    say!("model: {}", m.label());
    say_raw!("{}", ensemble_str(0, &ens, None));
    for (k, r) in rep.residuals.iter().enumerate() {
        say!("member {k}: residual {r:.3e}");
    }
    say!("max residual {:.3e} (tolerance {tol:.1e})", rep.max_residual);
    say!(
        "purity error {:.1e}, rates nonnegative: {}, strongly connected: {}, average error {:.1e}",
        rep.purity_error, rep.kappa_nonnegative, rep.strongly_connected, rep.average_error
    );
    let pass = rep.pass;
    let max = rep.max_residual;
    let mut b = m.bundle("verify", argv, None)?;
    b.verification = Some(rep);
    write_bundle(out, &b)?;
    if !pass {
        return Err(CliError::failed(format!("verification failed: max residual {max:.3e}")));
    }
    say!("PASS");
    Ok(Some(b))
}

fn build_scheme(
    m: &Model,
    ens: &Ensemble,
    detectors: Option<usize>,
    wlo_factor: f64,
) -> Result<(AdaptiveScheme, SchemeSection), CliError> {
    let detectors = detectors.unwrap_or(m.me.n_channels());
    let opts = SynthesisOptions { wlo_factor };
    let scheme = synthesize_with(&m.me, &m.bm, ens, detectors, &opts)?;
    let report = check_scheme(&m.me, ens, &scheme)?;
    let section = SchemeSection::new(&scheme, ens, wlo_factor, report);
    Ok((scheme, section))
}

fn print_scheme(scheme: &AdaptiveScheme, section: &SchemeSection) {
    say!("scheme with {} detector(s), synthesis residual {:.2e}", section.detectors, scheme.residual);
    for (k, s) in scheme.settings.iter().enumerate() {
        let beta: Vec<String> = s.beta().iter().map(|z| complex_str(*z)).collect();
        let routes: Vec<String> = scheme.jump_map[k].iter().map(|t| format!("{t:?}")).collect();
        say!("member {k}: β = [{}]  routing [{}]", beta.join(", "), routes.join(", "));
    }
    let r = &section.report;
    say!(
        "eigen residual {:.1e}, jump residual {:.1e}, rate error {:.1e}, lindbladian error {:.1e}: {}",
        r.eigen_residuals.iter().copied().fold(0.0, f64::max),
        r.jump_residual,
        r.rate_error,
        r.lindbladian_error,
        if r.pass { "PASS" } else { "FAIL" }
    );
}

struct SimulateJob<'a> {
    ensemble: &'a EnsembleArgs,
    detectors: Option<usize>,
    wlo_factor: f64,
    cfg: TrajectoryConfig,
    events: Option<&'a str>,
    unconditional: Option<usize>,
    times: Vec<f64>,
}

fn cmd_simulate(m: &Model, job: &SimulateJob, argv: &[String], out: Option<&str>) -> Result<Option<ResultBundle>, CliError> {
    let ens = load_ensemble(&job.ensemble.ensemble, job.ensemble.index)?;
    let (scheme, section) = build_scheme(m, &ens, job.detectors, job.wlo_factor)?;
    print_scheme(&scheme, &section);
    let stats = simulate(&m.me, &scheme, &ens, &job.cfg)?;
    if let Some(path) = job.events {
        write_file(path, &events_csv(&stats.events))?;
    }
    let sigma = stats.occupancy_sigma();
    say!(
        "{} jumps over t = {:.3} (dt {:.2e}), max state drift {:.1e}",
        stats.n_jumps, stats.total_time, stats.dt, stats.max_state_drift
    );
    for k in 0..ens.k() {
        say!(
            "member {k}: occupancy {:.5} ± {:.5}, expected {:.5}",
            stats.occupancy[k],
            sigma[k],
            ens.occupations()[k]
        );
    }
    let rates = stats.empirical_rates();
    for k in 0..ens.k() {
        for j in 0..ens.k() {
            if j != k && ens.kappa()[(j, k)] > 0.0 {
                say!("κ {k}→{j}: empirical {:.5}, expected {:.5}", rates[(j, k)], ens.kappa()[(j, k)]);
            }
        }
    }
    let unconditional = match job.unconditional {
        Some(n) => {
            let psi0 = &ens.pure_states()[0];
            let rep = unconditional_check(&m.me, &scheme, psi0, &job.times, n, &job.cfg)?;
            say!(
                "unconditional average of {n} trajectories: max distance {:.2e} (tolerance {:.1e}) {}",
                rep.max_distance,
                rep.tol,
                if rep.pass { "PASS" } else { "FAIL" }
            );
            Some(rep)
        }
        None => None,
    };
    let failed = unconditional.as_ref().is_some_and(|r| !r.pass);
    let mut b = m.bundle("simulate", argv, Some(job.cfg.rng_seed))?;
    b.scheme = Some(section);
    b.trajectory = Some(TrajectorySection {
        expected_occupations: ens.occupations().iter().copied().collect(),
        occupancy_sigma: sigma.iter().copied().collect(),
        empirical_rates: rows(&rates),
        stats,
        unconditional,
    });
    write_bundle(out, &b)?;
    if failed {
        return Err(CliError::failed("trajectory average departs from the master equation"));
    }
    Ok(Some(b))
}

fn cmd_scan(
    m: &Model,
    vary: &str,
    (from, to, step): (f64, f64, f64),
    s: &SearchArgs,
    csv: Option<&str>,
    argv: &[String],
    out: Option<&str>,
) -> Result<Option<ResultBundle>, CliError> {
    if !m.spec.parameters.contains_key(vary) {
        return Err(CliError::usage(format!("--vary {vary}: the model has no parameter `{vary}`")));
    }
    if !(step > 0.0) || to < from {
        return Err(CliError::usage("scan needs step > 0 and to ≥ from"));
    }
    if s.basis.is_none() && s.subspace == "auto" {
        return Err(CliError::usage("scan needs --subspace none, an index, or --basis"));
    }
    let n = ((to - from) / step + 1e-9).floor() as usize;
    // Rounded so that grid values print as typed.
    let grid: Vec<f64> = (0..=n).map(|i| ((from + step * i as f64) * 1e12).round() / 1e12).collect();
    let at = |p: f64| -> Result<Model, CliError> {
        let mut values = m.values.clone();
        values.insert(vary.to_string(), p);
        Model::build(m.spec.clone(), values)
    };
    let first = at(grid[0])?;
    let family = if s.dedup_symmetry {
        let sub = match plan(&first.bm, s)? {
            Plan::Subspace(sub, _) => Some(*sub),
            _ => None,
        };
        dedup_family(&first.bm, sub.as_ref())
    } else {
        Vec::new()
    };
    let g = graph(s.graph);
    let make = |p: f64| -> pre_forge::Result<ConstraintSystem> {
        let mp = at(p).map_err(|e| pre_forge::Error::Spec(e.message))?;
        match plan(&mp.bm, s).map_err(|e| pre_forge::Error::Spec(e.message))? {
            Plan::Subspace(sub, _) => ConstraintSystem::build_subspace_reduced(&mp.bm, &sub, s.k, g.clone()),
            _ => ConstraintSystem::build_full(&mp.bm, s.k, g.clone()),
        }
    };
    let table = scan_existence(&grid, make, &solver_config(s), &family)?;
    let mut text = format!("{vary},count\n");
    for r in &table.rows {
        let _ = writeln!(text, "{},{}", r.param, r.count);
    }
    match csv {
        Some(path) => {
            write_file(path, &text)?;
            for t in &table.thresholds {
                say!("count changes near {vary} = {t:.6}");
            }
        }
        None => {
            say_raw!("{text}");
            for t in &table.thresholds {
                eprintln!("count changes near {vary} = {t:.6}");
            }
        }
    }
    let mut b = m.bundle("scan", argv, Some(s.rng))?;
    b.scan = Some(ScanSection { parameter: vary.to_string(), table });
    write_bundle(out, &b)?;
    Ok(Some(b))
}

fn rerun(path: &str, out: Option<&str>) -> Result<Option<ResultBundle>, CliError> {
    let old = ResultBundle::load(path)?;
    let argv = old.invocation.clone();
    let mut cli = Cli::try_parse_from(std::iter::once("pre-forge".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| CliError::usage(format!("{path}: stored invocation does not parse: {e}")))?;
    match &mut cli.command {
        Command::Analyze { out: o, .. }
        | Command::Search { out: o, .. }
        | Command::Verify { out: o, .. }
        | Command::Scheme { out: o, .. } => *o = None,
        Command::Simulate { out: o, events, .. } => {
            *o = None;
            *events = None;
        }
        Command::Scan { out: o, csv, .. } => {
            *o = None;
            *csv = None;
        }
        _ => return Err(CliError::usage(format!("{path}: stored command cannot be replayed"))),
    }
    let new = run_with(cli, &argv, Some(&old.spec))?
        .ok_or_else(|| CliError::usage(format!("{path}: stored command produced no bundle")))?;
    write_bundle(out, &new)?;
    let as_map = |b: &ResultBundle| -> Result<serde_json::Map<String, serde_json::Value>, CliError> {
        let mut v = serde_json::to_value(b).map_err(|e| CliError::usage(e.to_string()))?;
        let map = v.as_object_mut().expect("bundle is an object");
        map.remove("tool_version");
        Ok(map.clone())
    };
    let (a, b) = (as_map(&old)?, as_map(&new)?);
    let differing: Vec<&String> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).collect();
    if differing.is_empty() {
        say!("rerun reproduces {path} exactly");
        Ok(Some(new))
    } else {
        let mut keys: Vec<&str> = differing.iter().map(|s| s.as_str()).collect();
        keys.sort_unstable();
        keys.dedup();
        Err(CliError::failed(format!("rerun differs from {path} in: {}", keys.join(", "))))
    }
}
