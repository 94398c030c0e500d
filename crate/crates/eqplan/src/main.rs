//! Command-line front end: generate benchmark suites, run one engine over
//! one expression or case, drive whole benchmark sweeps, and rebuild
//! heatmaps from saved records.
//!
//! Every setting resolves with the same precedence: command-line flag,
//! then EQPLAN_* environment variable, then the --config JSON file, then
//! the built-in default. Referenced files are loaded and parsed up front
//! so a bad path fails before any engine starts.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use eqplan::bench::{
    adversarial_suite, emit_heatmap, generate_suite, run_baseline, run_mcts_full, suite_from_json,
    suite_to_json, timing_report, BenchCase, Domain, Engine, RunRecord, ADVERSARIAL_DEPTH,
};
use eqplan::env::DEFAULT_MAX_EPISODE_LEN;
use eqplan::lang::{parse_term, LanguageDef};
use eqplan::planner::PlannerConfig;
use eqplan::rewrite::RuleSet;

const ENV_PREFIX: &str = "EQPLAN_";
const DEFAULT_NODE_LIMIT: usize = 10_000;

#[derive(Parser)]
#[command(name = "eqplan", version, about = "Equality-saturation planner and benchmark driver")]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirror the config-file keys one to one; --quiet/--verbose map to
/// the "verbosity" key.
#[derive(Args)]
struct Globals {
    /// Config JSON; any key it sets is overridden by the matching flag
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Language definition JSON (default: the domain's built-in grammar)
    #[arg(long, global = true, value_name = "PATH")]
    language: Option<PathBuf>,
    /// Rewrite rules file (default: the domain's built-in rules)
    #[arg(long, global = true, value_name = "PATH")]
    rules: Option<PathBuf>,
    /// Expression domain: math | prop
    #[arg(long, global = true)]
    domain: Option<String>,
    /// Engine for `run`: baseline | mcts
    #[arg(long, global = true)]
    engine: Option<String>,
    /// E-node budget per run
    #[arg(long, global = true, value_name = "N")]
    node_limit: Option<usize>,
    /// Cap on planned rewrites per episode; small values keep runs short
    #[arg(long, global = true, value_name = "N")]
    max_episode_len: Option<usize>,
    /// Planner config JSON
    #[arg(long, global = true, value_name = "PATH")]
    planner: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed for suite generation and planning
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Print only results and errors
    #[arg(long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Print per-stage planning detail
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic suite manifest of random expressions
    Gen {
        /// Cases to generate
        #[arg(long, default_value_t = 5)]
        count: usize,
        /// Maximum expression depth
        #[arg(long, default_value_t = 5)]
        depth: usize,
        /// Emit the adversarial suite instead (fixed depth, absorbing wrapper)
        #[arg(long)]
        adversarial: bool,
    },
    /// Optimise one expression or one manifest case with one engine
    Run {
        /// Expression string, parsed with the domain grammar
        #[arg(long, conflicts_with_all = ["case", "manifest"])]
        expr: Option<String>,
        /// Case name to pick out of --manifest
        #[arg(long, requires = "manifest")]
        case: Option<String>,
        /// Suite manifest JSON
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Run engines over a whole manifest and write records plus reports
    Bench {
        /// Suite manifest JSON
        #[arg(long, value_name = "PATH")]
        manifest: PathBuf,
        /// Engines to run, in order
        #[arg(long, value_delimiter = ',', default_values = ["baseline", "mcts"])]
        engines: Vec<String>,
    },
    /// Rebuild per-engine heatmap CSVs from a saved records file
    Heatmap {
        /// Records JSONL (default: OUT/records.jsonl)
        #[arg(long, value_name = "PATH")]
        records: Option<PathBuf>,
    },
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<eqplan::Error> for CliError {
    fn from(e: eqplan::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    language: Option<PathBuf>,
    rules: Option<PathBuf>,
    domain: Option<String>,
    engine: Option<String>,
    node_limit: Option<usize>,
    max_episode_len: Option<usize>,
    planner: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    verbosity: Option<String>,
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
enum Verbosity {
    Quiet,
    Normal,
    Verbose,
}

/// Everything resolved and every referenced file already parsed.
struct Settings {
    language: Option<LanguageDef>,
    rules_src: Option<String>,
    domain: Domain,
    engine: Engine,
    node_limit: usize,
    max_episode_len: usize,
    planner: PlannerConfig,
    out: PathBuf,
    seed: u64,
    verbosity: Verbosity,
}

fn env_var(key: &str) -> Option<String> {
    std::env::var(format!("{ENV_PREFIX}{key}")).ok().filter(|v| !v.is_empty())
}

fn env_parsed<T: std::str::FromStr>(key: &str) -> Result<Option<T>, CliError> {
    match env_var(key) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| {
            CliError::Usage(format!("{ENV_PREFIX}{key} has an unparseable value '{v}'"))
        }),
    }
}

impl Settings {
    fn resolve(g: &Globals) -> Result<Settings, CliError> {
        let file: FileConfig = match pick_path(&g.config, "CONFIG", &None) {
            Some(path) => {
                let src = fs::read_to_string(&path).map_err(|e| {
                    CliError::Runtime(format!("config {}: {e}", path.display()))
                })?;
                serde_json::from_str(&src).map_err(|e| {
                    CliError::Runtime(format!("config {}: {e}", path.display()))
                })?
            }
            None => FileConfig::default(),
        };

        let domain = match pick_str(&g.domain, "DOMAIN", &file.domain) {
            Some(s) => s.parse::<Domain>().map_err(|e| CliError::Usage(e.to_string()))?,
            None => Domain::Math,
        };
        let engine = match pick_str(&g.engine, "ENGINE", &file.engine) {
            Some(s) => parse_engine(&s)?,
            None => Engine::Mcts,
        };
        let node_limit = g
            .node_limit
            .or(env_parsed("NODE_LIMIT")?)
            .or(file.node_limit)
            .unwrap_or(DEFAULT_NODE_LIMIT);
        let max_episode_len = g
            .max_episode_len
            .or(env_parsed("MAX_EPISODE_LEN")?)
            .or(file.max_episode_len)
            .unwrap_or(DEFAULT_MAX_EPISODE_LEN);
        let seed_opt = g.seed.or(env_parsed("SEED")?).or(file.seed);

        let language = match pick_path(&g.language, "LANGUAGE", &file.language) {
            Some(path) => Some(LanguageDef::from_json_file(&path).map_err(|e| {
                CliError::Runtime(format!("language {}: {e}", path.display()))
            })?),
            None => None,
        };
        // kept as source: a custom rules file must parse against each
        // case's own grammar, which bench may vary per case
        let rules_src = match pick_path(&g.rules, "RULES", &file.rules) {
            Some(path) => Some(fs::read_to_string(&path).map_err(|e| {
                CliError::Runtime(format!("rules {}: {e}", path.display()))
            })?),
            None => None,
        };
        let mut planner = match pick_path(&g.planner, "PLANNER", &file.planner) {
            Some(path) => PlannerConfig::from_json_file(&path).map_err(|e| {
                CliError::Runtime(format!("planner {}: {e}", path.display()))
            })?,
            None => PlannerConfig::default(),
        };
        if let Some(seed) = seed_opt {
            planner.seed = seed;
        }

        let verbosity = if g.quiet {
            Verbosity::Quiet
        } else if g.verbose {
            Verbosity::Verbose
        } else {
            match pick_str(&None, "VERBOSITY", &file.verbosity).as_deref() {
                None | Some("normal") => Verbosity::Normal,
                Some("quiet") => Verbosity::Quiet,
                Some("verbose") => Verbosity::Verbose,
                Some(other) => {
                    return Err(CliError::Usage(format!(
                        "unknown verbosity '{other}' (quiet | normal | verbose)"
                    )))
                }
            }
        };

        let settings = Settings {
            language,
            rules_src,
            domain,
            engine,
            node_limit,
            max_episode_len,
            planner,
            out: pick_path(&g.out, "OUT", &file.out).unwrap_or_else(|| PathBuf::from("out")),
            seed: seed_opt.unwrap_or(0),
            verbosity,
        };
        // parse the custom rules once against the default grammar so a
        // broken file is rejected before any run starts
        if settings.rules_src.is_some() {
            settings.rules_for(settings.domain)?;
        }
        Ok(settings)
    }

    fn lang_for(&self, domain: Domain) -> LanguageDef {
        self.language.clone().unwrap_or_else(|| domain.lang())
    }

    fn rules_for(&self, domain: Domain) -> Result<RuleSet, CliError> {
        match &self.rules_src {
            Some(src) => Ok(RuleSet::from_str(&self.lang_for(domain), src)?),
            None => Ok(domain.rules()),
        }
    }

    fn info(&self, msg: &str) {
        if self.verbosity >= Verbosity::Normal {
            println!("{msg}");
        }
    }

    fn result(&self, msg: &str) {
        println!("{msg}");
    }

    fn detail(&self, msg: &str) {
        if self.verbosity >= Verbosity::Verbose {
            println!("{msg}");
        }
    }
}

fn pick_str(flag: &Option<String>, key: &str, file: &Option<String>) -> Option<String> {
    flag.clone().or_else(|| env_var(key)).or_else(|| file.clone())
}

fn pick_path(flag: &Option<PathBuf>, key: &str, file: &Option<PathBuf>) -> Option<PathBuf> {
    flag.clone().or_else(|| env_var(key).map(PathBuf::from)).or_else(|| file.clone())
}

fn parse_engine(s: &str) -> Result<Engine, CliError> {
    match s {
        "baseline" => Ok(Engine::Baseline),
        "mcts" => Ok(Engine::Mcts),
        other => Err(CliError::Usage(format!("unknown engine '{other}' (baseline | mcts)"))),
    }
}

/// File-name safe case names; generated ones already are.
fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '-' }).collect()
}

fn write_text(path: &Path, content: &str) -> Result<(), CliError> {
    fs::write(path, content)
        .map_err(|e| CliError::Runtime(format!("write {}: {e}", path.display())))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut buf = String::new();
    for item in items {
        buf.push_str(&serde_json::to_string(item)?);
        buf.push('\n');
    }
    write_text(path, &buf)
}

fn load_manifest(settings: &Settings, path: &Path) -> Result<Vec<BenchCase>, CliError> {
    let src = fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("manifest {}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&src)?;
    // with a custom grammar the manifest terms must parse under it too
    match &settings.language {
        None => Ok(suite_from_json(&v)?),
        Some(lang) => {
            let mut cases = suite_from_json(&v)?;
            for case in &mut cases {
                let printed = eqplan::lang::print_term(&case.term);
                case.term = parse_term(lang, &printed)?;
            }
            Ok(cases)
        }
    }
}

fn cmd_gen(settings: &Settings, count: usize, depth: usize, adversarial: bool) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let (suite, file_name) = if adversarial {
        (
            adversarial_suite(settings.domain, count, settings.seed),
            format!("suite-ADV-{}.json", settings.domain.to_string().to_uppercase()),
        )
    } else {
        (
            generate_suite(settings.domain, count, depth, settings.seed),
            format!("suite-{}-{depth}.json", settings.domain.to_string().to_uppercase()),
        )
    };
    fs::create_dir_all(&settings.out)?;
    let path = settings.out.join(file_name);
    let manifest = serde_json::to_string_pretty(&suite_to_json(&suite))? + "\n";
    write_text(&path, &manifest)?;
    for case in &suite {
        settings.result(&case.name);
    }
    settings.info(&format!("wrote {}", path.display()));
    if adversarial && depth != ADVERSARIAL_DEPTH {
        settings.detail(&format!("adversarial suite ignores --depth, body depth is {ADVERSARIAL_DEPTH}"));
    }
    Ok(())
}

fn cmd_run(
    settings: &Settings,
    expr: Option<String>,
    case_name: Option<String>,
    manifest: Option<PathBuf>,
) -> Result<(), CliError> {
    let case = match (expr, case_name, manifest) {
        (Some(src), None, None) => {
            let term = parse_term(&settings.lang_for(settings.domain), &src)?;
            BenchCase {
                name: "expr".into(),
                domain: settings.domain,
                term,
                seed: settings.seed,
                max_depth: 0,
            }
        }
        (None, Some(name), Some(path)) => {
            let cases = load_manifest(settings, &path)?;
            cases
                .into_iter()
                .find(|c| c.name == name)
                .ok_or_else(|| CliError::Usage(format!("case '{name}' is not in the manifest")))?
        }
        _ => return Err(CliError::Usage("pass either --expr or --case with --manifest".into())),
    };
    let rules = settings.rules_for(case.domain)?;
    fs::create_dir_all(&settings.out)?;
    let stem = safe_name(&case.name);

    let record = match settings.engine {
        Engine::Baseline => run_baseline(&case, &rules, settings.node_limit)?,
        Engine::Mcts => {
            let (record, report) = run_mcts_full(
                &case,
                &rules,
                settings.node_limit,
                &settings.planner,
                settings.max_episode_len,
            )?;
            write_jsonl(&settings.out.join(format!("trace-{stem}.jsonl")), &report.stages)?;
            write_jsonl(&settings.out.join(format!("episode-{stem}.jsonl")), &report.steps)?;
            for stage in &report.stages {
                settings.detail(&format!(
                    "stage {}: action {} after pruning {:?}, {:.3}s",
                    stage.stage, stage.chosen_action, stage.pruned, stage.stage_wall_time_s
                ));
            }
            record
        }
    };

    let record_path = settings.out.join(format!("run-{stem}-{}.json", record.engine));
    write_text(&record_path, &(serde_json::to_string_pretty(&record)? + "\n"))?;

    settings.result(&format!("case:        {}", record.case_name));
    settings.result(&format!("engine:      {}", record.engine));
    settings.result(&format!("expression:  {}", record.final_expr));
    settings.result(&format!("init cost:   {}", record.init_cost));
    settings.result(&format!("final cost:  {}", record.final_cost));
    settings.result(&format!("stop reason: {}", record.stop_reason));
    settings.result(&format!("wall time:   {:.3}s", record.wall_time_s));
    settings.info(&format!("wrote {}", record_path.display()));
    Ok(())
}

fn cmd_bench(settings: &Settings, manifest: &Path, engine_names: &[String]) -> Result<(), CliError> {
    if engine_names.is_empty() {
        return Err(CliError::Usage("--engines needs at least one engine".into()));
    }
    let engines: Vec<Engine> =
        engine_names.iter().map(|s| parse_engine(s)).collect::<Result<_, _>>()?;
    let cases = load_manifest(settings, manifest)?;
    if cases.is_empty() {
        return Err(CliError::Runtime("manifest holds no cases".into()));
    }
    fs::create_dir_all(&settings.out)?;

    let mut records: Vec<RunRecord> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for case in &cases {
        for &engine in &engines {
            let run = settings.rules_for(case.domain).and_then(|rules| match engine {
                Engine::Baseline => Ok(run_baseline(case, &rules, settings.node_limit)?),
                Engine::Mcts => Ok(run_mcts_full(
                    case,
                    &rules,
                    settings.node_limit,
                    &settings.planner,
                    settings.max_episode_len,
                )?
                .0),
            });
            match run {
                Ok(record) => {
                    settings.detail(&format!(
                        "{} [{engine}]: cost {} -> {} ({})",
                        case.name, record.init_cost, record.final_cost, record.stop_reason
                    ));
                    records.push(record);
                }
                Err(e) => {
                    let msg = match e {
                        CliError::Usage(m) | CliError::Runtime(m) => m,
                    };
                    failures.push(format!("{} [{engine}]: {msg}", case.name));
                }
            }
        }
    }

    write_jsonl(&settings.out.join("records.jsonl"), &records)?;
    for &engine in &engines {
        let subset: Vec<RunRecord> =
            records.iter().filter(|r| r.engine == engine).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let (csv, totals) = emit_heatmap(&subset)?;
        write_text(&settings.out.join(format!("heatmap-{engine}.csv")), &csv)?;
        write_text(
            &settings.out.join(format!("heatmap-{engine}-totals.json")),
            &(serde_json::to_string_pretty(&totals)? + "\n"),
        )?;
    }
    let (timing_text, timing_json) = timing_report(&records);
    write_text(&settings.out.join("timing.txt"), &timing_text)?;
    write_text(&settings.out.join("timing.json"), &(serde_json::to_string_pretty(&timing_json)? + "\n"))?;

    settings.result(comparison_table(&cases, &engines, &records).trim_end());
    settings.info(&format!("wrote {} records to {}", records.len(), settings.out.display()));
    for failure in &failures {
        eprintln!("FAILED {failure}");
    }
    if !failures.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} of {} runs failed",
            failures.len(),
            cases.len() * engines.len()
        )));
    }
    Ok(())
}

fn comparison_table(cases: &[BenchCase], engines: &[Engine], records: &[RunRecord]) -> String {
    let mut table = format!("{:<16} {:>10}", "case", "init");
    for engine in engines {
        let _ = write!(table, " {:>21}", engine.to_string());
    }
    table.push('\n');
    for case in cases {
        let init = records
            .iter()
            .find(|r| r.case_name == case.name)
            .map_or("-".to_string(), |r| format!("{}", r.init_cost));
        let _ = write!(table, "{:<16} {:>10}", case.name, init);
        for &engine in engines {
            let cell = records
                .iter()
                .find(|r| r.case_name == case.name && r.engine == engine)
                .map_or("failed".to_string(), |r| format!("{} ({})", r.final_cost, r.stop_reason));
            let _ = write!(table, " {:>21}", cell);
        }
        table.push('\n');
    }
    table
}

fn cmd_heatmap(settings: &Settings, records_path: Option<PathBuf>) -> Result<(), CliError> {
    let path = records_path.unwrap_or_else(|| settings.out.join("records.jsonl"));
    let src = fs::read_to_string(&path)
        .map_err(|e| CliError::Runtime(format!("records {}: {e}", path.display())))?;
    let mut records: Vec<RunRecord> = Vec::new();
    for (i, line) in src.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| {
            CliError::Runtime(format!("records {} line {}: {e}", path.display(), i + 1))
        })?);
    }
    if records.is_empty() {
        return Err(CliError::Runtime(format!("no records in {}", path.display())));
    }
    fs::create_dir_all(&settings.out)?;
    for engine in [Engine::Baseline, Engine::Mcts] {
        let subset: Vec<RunRecord> =
            records.iter().filter(|r| r.engine == engine).cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let (csv, _) = emit_heatmap(&subset)?;
        let out_path = settings.out.join(format!("heatmap-{engine}.csv"));
        write_text(&out_path, &csv)?;
        settings.info(&format!("wrote {}", out_path.display()));
    }
    Ok(())
}

fn main() {
    // die quietly when stdout is a closed pipe, like any unix filter
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let outcome = Settings::resolve(&cli.globals).and_then(|settings| match cli.command {
        Command::Gen { count, depth, adversarial } => cmd_gen(&settings, count, depth, adversarial),
        Command::Run { expr, case, manifest } => cmd_run(&settings, expr, case, manifest),
        Command::Bench { manifest, engines } => cmd_bench(&settings, &manifest, &engines),
        Command::Heatmap { records } => cmd_heatmap(&settings, records),
    });
    match outcome {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    }
}
