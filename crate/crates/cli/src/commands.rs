use std::fs;
use std::path::Path;

use bpmf_core::config::KeyValues;
use bpmf_core::data::{load_panel, PanelSchema};
use bpmf_core::eval::{
    forecast_table, format_table, run_cv_grid, run_forecast_eval, write_table_csv, Criterion, CvConfig, EvalReport,
    FitSettings, ForecastEvalConfig, Model, WindowScheme, BAYES_NAME,
};
use bpmf_core::forecast::{aggregate_functional, aggregate_quantiles, forecast_counts, write_forecast_summary, ForecastOptions, Reducer};
use bpmf_core::hosvd::{center_fitted_array, hosvd_modes, write_components, write_explained};
use bpmf_core::params::count_parameters;
use bpmf_core::sampler::{read_state_dir, run_chain, write_state_dir, ChainStatus, Init};
use bpmf_core::simulate::{recovery_report, simulate_panel, SimConfig};
use bpmf_core::{CountPanel, DrawStore, PriorSpec, SamplerConfig};
use sha2::{Digest, Sha256};

use crate::args::*;
use crate::error::{validation, CliError, CliResult};

const DEFAULT_Q: usize = 6;
const DEFAULT_R: usize = 8;
const DEFAULT_DRAWS: usize = 25_000;

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(cli, a),
        Command::Fit(a) => fit(cli, a),
        Command::Forecast(a) => forecast(cli, a),
        Command::Cv(a) => cv(cli, a),
        Command::Benchmark(a) => benchmark(cli, a),
        Command::Postprocess(a) => postprocess(a),
        Command::Report(a) => report(a),
    }
}

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))
}

/// Parses a key=value file and records its digest in the manifest.
fn read_key_values(path: &Path, label: &str, manifest: &mut Manifest) -> CliResult<KeyValues> {
    let bytes = read_input(path)?;
    manifest.input(label, path, &bytes);
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| CliError::Validation(format!("{} is not UTF-8 text", path.display())))?;
    KeyValues::parse(text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_file(path: &Path) -> CliResult<fs::File> {
    fs::File::create(path).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

/// `run_manifest.txt`: tool version, command, seed and input digests.
struct Manifest(KeyValues);

impl Manifest {
    fn new(command: &str, seed: Option<u64>) -> Self {
        let mut kv = KeyValues::new();
        kv.set("tool", env!("CARGO_PKG_NAME"));
        kv.set("version", env!("CARGO_PKG_VERSION"));
        kv.set("command", command);
        if let Some(s) = seed {
            kv.set("seed", s);
        }
        Manifest(kv)
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.0.set(key, value);
    }

    fn input(&mut self, label: &str, path: &Path, bytes: &[u8]) {
        self.0.set(&format!("input.{label}.path"), path.display());
        self.0.set(&format!("input.{label}.sha256"), sha256_hex(bytes));
    }

    fn write(&self, dir: &Path) -> CliResult<()> {
        write_file(&dir.join("run_manifest.txt"), self.0.to_text())
    }
}

fn load_data(args: &DataArgs) -> CliResult<(CountPanel, Vec<u8>)> {
    let bytes = read_input(&args.data)?;
    let schema = PanelSchema {
        group_columns: args.group_columns.clone(),
        offset_column: args.offset_column.clone(),
        default_offset: args.default_offset,
        ..PanelSchema::default()
    };
    let panel = load_panel(bytes.as_slice(), &schema)
        .map_err(|e| CliError::Validation(format!("{}: {e}", args.data.display())))?;
    log::info!("loaded panel with dims {:?} from {}", panel.dims(), args.data.display());
    Ok((panel, bytes))
}

/// Prior and sampler settings: flags override files, files override defaults.
fn model_settings(
    m: &ModelArgs,
    q: Option<usize>,
    r: Option<usize>,
    seed: Option<u64>,
    manifest: &mut Manifest,
) -> CliResult<(PriorSpec, SamplerConfig)> {
    let prior_kv = match &m.prior {
        Some(p) => read_key_values(p, "prior", manifest)?,
        None => KeyValues::new(),
    };
    let mut prior = PriorSpec::from_key_values(&prior_kv)?;
    prior.q = q.or(prior_kv.get("q")?).unwrap_or(DEFAULT_Q);
    prior.r = r.or(prior_kv.get("r")?).unwrap_or(DEFAULT_R);
    if let Some(c0) = m.c0 {
        prior.c0 = c0;
    }
    if let Some(c) = m.big_c0 {
        prior.big_c0 = c;
    }

    let mut sampler = match &m.sampler {
        Some(p) => SamplerConfig::from_key_values(&read_key_values(p, "sampler", manifest)?)?,
        None => SamplerConfig::default(),
    };
    let burnin = m.burnin.unwrap_or(sampler.n_burnin);
    let draws = m.draws.unwrap_or_else(|| {
        if m.sampler.is_some() {
            sampler.n_iterations.saturating_sub(sampler.n_burnin)
        } else {
            DEFAULT_DRAWS
        }
    });
    sampler.n_burnin = burnin;
    sampler.n_iterations = burnin + draws;
    if let Some(t) = m.thin {
        sampler.thin = t;
    }
    if let Some(s) = seed {
        sampler.seed = s;
    }
    sampler.validate()?;
    Ok((prior, sampler))
}

fn simulate(cli: &Cli, a: &SimulateArgs) -> CliResult<()> {
    let mut cfg = match a.preset {
        Preset::Paper => SimConfig::default(),
        Preset::Reduced => SimConfig::reduced(),
    };
    let mut manifest = Manifest::new("simulate", None);
    if let Some(path) = &a.config {
        let kv = read_key_values(path, "config", &mut manifest)?;
        let mut base = cfg.to_key_values();
        for k in kv.keys() {
            base.set(k, kv.get_str(k).unwrap_or_default());
        }
        cfg = SimConfig::from_key_values(&base)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    manifest.set("seed", cfg.seed);
    let (panel, truth) = simulate_panel(&cfg)?;
    create_dir(&a.out)?;
    panel.write_csv(create_file(&a.out.join("panel.csv"))?)?;
    write_state_dir(&a.out.join("truth"), &truth)?;
    write_file(&a.out.join("sim_config.txt"), cfg.to_key_values().to_text())?;
    manifest.write(&a.out)?;
    let (n, t, x) = panel.dims();
    println!("simulated {n} populations × {t} years × {x} ages into {}", a.out.display());
    Ok(())
}

fn fit(cli: &Cli, a: &FitArgs) -> CliResult<()> {
    let (panel, bytes) = load_data(&a.data)?;
    let mut manifest = Manifest::new("fit", None);
    manifest.input("data", &a.data.data, &bytes);
    let (prior, sampler) = model_settings(&a.model, a.q, a.r, cli.seed, &mut manifest)?;
    prior.validate(panel.dims().0)?;
    manifest.set("seed", sampler.seed);
    log::info!(
        "fitting Q={} R={} with {} iterations ({} burn-in, thin {})",
        prior.q,
        prior.r,
        sampler.n_iterations,
        sampler.n_burnin,
        sampler.thin
    );
    let mut store = run_chain(&panel, &prior, &sampler, Init::Auto)?;
    store.provenance.insert("data_sha256".into(), sha256_hex(&bytes));
    create_dir(&a.out)?;
    store.write_dir(&a.out)?;
    panel.write_csv(create_file(&a.out.join("panel.csv"))?)?;
    manifest.write(&a.out)?;
    match &store.status {
        ChainStatus::Completed => {
            println!("wrote {} draws to {}", store.n_draws(), a.out.display());
            Ok(())
        }
        ChainStatus::Aborted { iteration, reason } => Err(CliError::Runtime(format!(
            "chain aborted at iteration {iteration}: {reason} (partial draws written to {})",
            a.out.display()
        ))),
    }
}

fn read_fit(dir: &Path) -> CliResult<(DrawStore, CountPanel)> {
    if !dir.join("manifest.txt").exists() {
        return validation(format!("{} is not a fit directory (no manifest.txt)", dir.display()));
    }
    let store = DrawStore::read_dir(dir)?;
    let panel_bytes = read_input(&dir.join("panel.csv"))?;
    let panel = load_panel(panel_bytes.as_slice(), &PanelSchema::default())?;
    let d = store.dims;
    if panel.dims() != (d.n, d.t, d.a) {
        return validation(format!("{}: panel.csv does not match the stored dimensions", dir.display()));
    }
    Ok((store, panel))
}

fn forecast(cli: &Cli, a: &ForecastArgs) -> CliResult<()> {
    let (store, panel) = read_fit(&a.fit_dir)?;
    let seed = cli.seed.unwrap_or(store.config.seed);
    let opts = ForecastOptions {
        horizon: a.horizon,
        include_idiosyncratic: !a.no_idiosyncratic,
        replicates: a.replicates,
        seed,
        keep_latent: false,
    };
    let fs = forecast_counts(&store, &panel, &opts)?;
    let out = a.out.clone().unwrap_or_else(|| a.fit_dir.join("forecast"));
    create_dir(&out)?;
    write_forecast_summary(&fs, create_file(&out.join("forecast_summary.csv"))?)?;

    let mut totals = String::from("population,year,horizon,mean,q05,q50,q95\n");
    for i in 0..fs.n {
        for &h in &fs.horizons {
            let draws = aggregate_functional(&fs, |ii, hh, _| ii == i && hh == h, Reducer::Sum)?;
            let q = aggregate_quantiles(&draws, &[0.05, 0.5, 0.95]);
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            totals += &format!(
                "{},{},{h},{mean},{},{},{}\n",
                fs.population_labels[i],
                fs.origin_year + h as i64,
                q[0],
                q[1],
                q[2]
            );
        }
    }
    write_file(&out.join("forecast_totals.csv"), totals)?;
    let mut manifest = Manifest::new("forecast", Some(seed));
    manifest.set("fit_dir", a.fit_dir.display());
    manifest.set("horizon", a.horizon);
    manifest.set("replicates", a.replicates);
    manifest.write(&out)?;
    if fs.capped_cells > 0 {
        log::warn!("{} latent draws were capped", fs.capped_cells);
    }
    println!("wrote {} predictive draws per cell to {}", fs.n_draws(), out.display());
    Ok(())
}

/// `lo..hi` (inclusive) or a comma-separated list of positive integers.
pub fn parse_range(s: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::Validation(format!("bad range `{s}`: expected `lo..hi` or a comma list"));
    let out: Vec<usize> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).collect()
    } else {
        s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

/// Expands ranges inside model strings, e.g. `bmf:1..2:3` into `bmf:1:3,bmf:2:3`.
pub fn parse_models(spec: &str) -> CliResult<Vec<Model>> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let mut variants = vec![String::new()];
        for (k, part) in item.split(':').enumerate() {
            let choices: Vec<String> = if k > 0 && part.contains("..") {
                parse_range(part)?.iter().map(|v| v.to_string()).collect()
            } else {
                vec![part.to_string()]
            };
            variants = variants
                .iter()
                .flat_map(|v| choices.iter().map(move |c| if k == 0 { c.clone() } else { format!("{v}:{c}") }))
                .collect();
        }
        for v in variants {
            out.push(v.parse::<Model>()?);
        }
    }
    if out.is_empty() {
        return validation("no models given");
    }
    Ok(out)
}

fn parse_windows(s: &str) -> CliResult<WindowScheme> {
    let bad = || CliError::Validation(format!("bad window scheme `{s}`: expected `train_len[,long_horizon]`"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let num = |p: &str| p.parse::<usize>().map_err(|_| bad());
    match parts.as_slice() {
        [t] => Ok(WindowScheme { train_len: num(t)?, long_horizon: None }),
        [t, h] => Ok(WindowScheme { train_len: num(t)?, long_horizon: Some(num(h)?) }),
        _ => Err(bad()),
    }
}

fn cv(cli: &Cli, a: &CvArgs) -> CliResult<()> {
    let (panel, bytes) = load_data(&a.data)?;
    let q_range = parse_range(&a.q_range)?;
    let r_range = parse_range(&a.r_range)?;
    let mut manifest = Manifest::new("cv", None);
    manifest.input("data", &a.data.data, &bytes);
    let (prior, sampler) = model_settings(&a.model, Some(q_range[0]), Some(r_range[0]), cli.seed, &mut manifest)?;
    let seed = sampler.seed;
    manifest.set("seed", seed);
    manifest.set("q_range", &a.q_range);
    manifest.set("r_range", &a.r_range);
    manifest.set("folds", a.folds);
    let cfg = CvConfig {
        fit: FitSettings { prior, sampler, seed },
        folds: a.folds,
        max_folds: a.max_folds,
    };
    let report = run_cv_grid(&panel, &q_range, &r_range, &cfg)?;
    create_dir(&a.out)?;
    report.write_csv(create_file(&a.out.join("cv_grid.csv"))?)?;
    report.write_summary_csv(create_file(&a.out.join("cv_summary.csv"))?)?;
    let choice = cv_choice_text(&report);
    write_file(&a.out.join("cv_choice.txt"), &choice)?;
    manifest.write(&a.out)?;
    print!("{choice}");
    let failed = report.rows.iter().filter(|r| !r.is_ok()).count();
    if failed > 0 {
        log::warn!("{failed} of {} fold fits failed", report.rows.len());
    }
    Ok(())
}

fn cv_choice_text(report: &EvalReport) -> String {
    let mut kv = KeyValues::new();
    for c in Criterion::ALL {
        if let Some(best) = report.best(BAYES_NAME, 0, c) {
            kv.set(&format!("{}.best", c.name()), format!("{},{}", best.q.unwrap_or(0), best.r.unwrap_or(0)));
        }
        if let Some((q, r)) = report.one_se_choice(BAYES_NAME, 0, c) {
            kv.set(&format!("{}.one_se", c.name()), format!("{q},{r}"));
        }
    }
    kv.to_text()
}

fn write_table(dir: &Path, report: &EvalReport) -> CliResult<String> {
    let table = forecast_table(report);
    write_table_csv(&table, create_file(&dir.join("table.csv"))?)?;
    let text = format_table(&table);
    write_file(&dir.join("table.txt"), &text)?;
    Ok(text)
}

fn benchmark(cli: &Cli, a: &BenchmarkArgs) -> CliResult<()> {
    let (panel, bytes) = load_data(&a.data)?;
    let models = parse_models(&a.spec)?;
    let scheme = parse_windows(&a.windows)?;
    scheme.windows(panel.dims().1)?;
    let mut manifest = Manifest::new("benchmark", None);
    manifest.input("data", &a.data.data, &bytes);
    let (prior, sampler) = model_settings(&a.model, None, None, cli.seed, &mut manifest)?;
    let seed = sampler.seed;
    manifest.set("seed", seed);
    manifest.set("spec", &a.spec);
    manifest.set("windows", &a.windows);
    let cfg = ForecastEvalConfig {
        fit: FitSettings { prior, sampler, seed },
        scheme,
        replicates: a.replicates,
    };
    let report = run_forecast_eval(&panel, &models, &cfg)?;
    create_dir(&a.out)?;
    report.write_csv(create_file(&a.out.join("forecast_eval.csv"))?)?;
    report.write_summary_csv(create_file(&a.out.join("forecast_summary.csv"))?)?;
    let text = write_table(&a.out, &report)?;
    manifest.write(&a.out)?;
    print!("{text}");
    Ok(())
}

fn postprocess(a: &PostprocessArgs) -> CliResult<()> {
    let (store, panel) = read_fit(&a.fit_dir)?;
    let d = store.dims;
    let out = a.out.clone().unwrap_or_else(|| a.fit_dir.join("postprocess"));
    create_dir(&out)?;
    let fitted: Vec<_> = (0..d.n).map(|i| store.fitted_mean_matrix(i)).collect();
    let (centered, _) = center_fitted_array(&fitted);
    let modes = hosvd_modes(&centered, a.q.unwrap_or(d.q).min(d.t), a.r.unwrap_or(d.r).min(d.a))?;
    let years: Vec<String> = panel.year_labels().iter().map(|y| y.to_string()).collect();
    write_components(create_file(&out.join("hosvd_time.csv"))?, "year", &years, &modes.time)?;
    write_components(create_file(&out.join("hosvd_age.csv"))?, "age", panel.age_labels(), &modes.age)?;
    write_explained(create_file(&out.join("hosvd_explained.csv"))?, &modes)?;

    let (mm, af, tf) = count_parameters(d.n as u64, d.q as u64, d.r as u64, d.a as u64, d.t as u64);
    let mut counts = KeyValues::new();
    counts.set("matrix_model", mm);
    counts.set("age_factorization", af);
    counts.set("time_factorization", tf);
    write_file(&out.join("parameter_counts.txt"), counts.to_text())?;
    println!("population-specific parameters: matrix model {mm}, age factorization {af}, time factorization {tf}");

    let mut manifest = Manifest::new("postprocess", None);
    manifest.set("fit_dir", a.fit_dir.display());
    if let Some(truth_dir) = &a.truth {
        let truth = read_state_dir(truth_dir)
            .map_err(|e| CliError::Validation(format!("{}: {e}", truth_dir.display())))?;
        let rep = recovery_report(&truth, &store, &panel)?;
        rep.write_csv(create_file(&out.join("recovery.csv"))?)?;
        manifest.set("truth", truth_dir.display());
        println!(
            "fitted-vs-true correlation {:.4}; sigma2 covered {}/{}",
            rep.fitted_correlation,
            rep.sigma2_covered(),
            rep.sigma2.len()
        );
    }
    manifest.write(&out)?;
    Ok(())
}

fn report(a: &ReportArgs) -> CliResult<()> {
    let mut reports = Vec::new();
    let mut manifest = Manifest::new("report", None);
    for (k, path) in a.inputs.iter().enumerate() {
        let bytes = read_input(path)?;
        let rep = EvalReport::read_csv(bytes.as_slice())
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        manifest.input(&format!("report{k}"), path, &bytes);
        reports.push(rep);
    }
    let merged = EvalReport::merge(reports);
    let has_forecasts = merged.rows.iter().any(|r| r.horizon > 0);
    let has_cv = merged.rows.iter().any(|r| r.horizon == 0);
    let mut text = String::new();
    if has_forecasts {
        text += &format_table(&forecast_table(&merged));
    }
    if has_cv {
        text += &cv_choice_text(&merged);
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        if has_forecasts {
            write_table(out, &merged)?;
        }
        merged.write_summary_csv(create_file(&out.join("summary.csv"))?)?;
        manifest.write(out)?;
    }
    print!("{text}");
    Ok(())
}
