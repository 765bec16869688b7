//! Command-line entry point for training runs, loss comparisons, gamma
//! schedule traces and dataset generation.

use std::path::PathBuf;
use std::process::ExitCode;

use autofocal::data;
use autofocal::error::{Error, Result};
use autofocal::focal::GammaSchedule;
use autofocal::harness::{self, ExperimentConfig};

const USAGE: &str = "\
autofocal - progress-adaptive focal losses, desk-scale trainer

USAGE:
    autofocal train <config> [--out <dir>] [--plots]
    autofocal compare <config>... --out <dir>
    autofocal gamma-trace --schedule <spec> --grid <spec> [--clamp-max <v>] [--plot] --out <dir>
    autofocal gen-data <spec> --out <dir>
    autofocal help

ARGS:
    <config>    flat `key = value` experiment config file
    <spec>      for gen-data: a config with only `seed` and `data.*` keys

OPTIONS:
    --out <dir>        output directory (train: overrides the config's `out`)
    --plots            emit SVG plots in addition to CSVs (train)
    --plot             emit an SVG next to the gamma-trace CSV
    --schedule <spec>  shannon-info | quantile:<h> | fixed:<gamma>
    --grid <spec>      <start>:<end>:<count> or a comma list of values in (0,1)
    --clamp-max <v>    upper bound on emitted gamma values

Exit code is 0 on success, nonzero with a message on stderr otherwise.";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() || args[0] == "help" || args[0] == "--help" || args[0] == "-h" {
        println!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(args: &[String]) -> Result<()> {
    match args[0].as_str() {
        "train" => cmd_train(&args[1..]),
        "compare" => cmd_compare(&args[1..]),
        "gamma-trace" => cmd_gamma_trace(&args[1..]),
        "gen-data" => cmd_gen_data(&args[1..]),
        other => Err(Error::Config(format!(
            "unknown subcommand '{other}' (see `autofocal help`)"
        ))),
    }
}

/// Splits `args` into flag values and positional arguments.
struct Flags {
    positional: Vec<String>,
    out: Option<PathBuf>,
    plots: bool,
    plot: bool,
    schedule: Option<String>,
    grid: Option<String>,
    clamp_max: Option<f64>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Self> {
        let mut flags = Flags {
            positional: Vec::new(),
            out: None,
            plots: false,
            plot: false,
            schedule: None,
            grid: None,
            clamp_max: None,
        };
        let mut iter = args.iter();
        while let Some(arg) = iter.next() {
            let mut value_of = |name: &str| -> Result<String> {
                iter.next()
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("{name} needs a value")))
            };
            match arg.as_str() {
                "--out" => flags.out = Some(PathBuf::from(value_of("--out")?)),
                "--plots" => flags.plots = true,
                "--plot" => flags.plot = true,
                "--schedule" => flags.schedule = Some(value_of("--schedule")?),
                "--grid" => flags.grid = Some(value_of("--grid")?),
                "--clamp-max" => {
                    let raw = value_of("--clamp-max")?;
                    flags.clamp_max = Some(raw.parse().map_err(|e| {
                        Error::Config(format!("--clamp-max: bad value '{raw}': {e}"))
                    })?);
                }
                other if other.starts_with("--") => {
                    return Err(Error::Config(format!("unknown flag '{other}'")))
                }
                other => flags.positional.push(other.to_string()),
            }
        }
        Ok(flags)
    }

    fn require_out(&self) -> Result<&PathBuf> {
        self.out
            .as_ref()
            .ok_or_else(|| Error::Config("--out <dir> is required".into()))
    }
}

fn cmd_train(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args)?;
    let [config_path] = flags.positional.as_slice() else {
        return Err(Error::Config("train needs exactly one config file".into()));
    };
    let mut config = ExperimentConfig::from_file(config_path)?;
    if flags.plots {
        config.plots = true;
    }
    let out = match (&flags.out, &config.out) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => dir.clone(),
        (None, None) => {
            return Err(Error::Config(
                "no output directory: pass --out or set `out` in the config".into(),
            ))
        }
    };
    let artifacts = harness::run(&config, &out)?;
    println!(
        "run complete: {} steps, outputs in {}",
        config.train.steps,
        out.display()
    );
    for (name, value) in &artifacts.final_metrics {
        println!("  {name} = {value:.4}");
    }
    match (&config.convergence, artifacts.convergence) {
        (Some(c), Some(step)) => println!(
            "  {} >= {} sustained from step {step}",
            c.metric, c.threshold
        ),
        (Some(c), None) => println!("  {} >= {} never sustained", c.metric, c.threshold),
        (None, _) => {}
    }
    Ok(())
}

fn cmd_compare(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args)?;
    if flags.positional.is_empty() {
        return Err(Error::Config(
            "compare needs at least one config file".into(),
        ));
    }
    let out = flags.require_out()?;
    let configs = flags
        .positional
        .iter()
        .map(ExperimentConfig::from_file)
        .collect::<Result<Vec<_>>>()?;
    let report = harness::compare(&configs, out)?;
    println!("comparison written to {}", out.display());
    for row in &report.rows {
        let conv = row
            .convergence
            .map_or("never".to_string(), |s| s.to_string());
        let metrics: Vec<String> = row
            .final_metrics
            .iter()
            .map(|(n, v)| format!("{n}={v:.4}"))
            .collect();
        println!(
            "  {:<40} {}  convergence={conv}",
            row.label,
            metrics.join(" ")
        );
    }
    Ok(())
}

fn parse_schedule(spec: &str, clamp_max: Option<f64>) -> Result<GammaSchedule> {
    let schedule = if spec == "shannon-info" {
        GammaSchedule::shannon_info()
    } else if let Some(h) = spec.strip_prefix("quantile:") {
        let h: f64 = h
            .parse()
            .map_err(|e| Error::Config(format!("--schedule: bad h '{h}': {e}")))?;
        GammaSchedule::quantile(h)?
    } else if let Some(g) = spec.strip_prefix("fixed:") {
        let g: f64 = g
            .parse()
            .map_err(|e| Error::Config(format!("--schedule: bad gamma '{g}': {e}")))?;
        GammaSchedule::fixed(g)?
    } else {
        return Err(Error::Config(format!(
            "--schedule: expected shannon-info, quantile:<h> or fixed:<gamma>, got '{spec}'"
        )));
    };
    match clamp_max {
        Some(c) => schedule.with_clamp_max(Some(c)),
        None => Ok(schedule),
    }
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() == 3 {
        let start: f64 = parts[0]
            .parse()
            .map_err(|e| Error::Config(format!("--grid: bad start: {e}")))?;
        let end: f64 = parts[1]
            .parse()
            .map_err(|e| Error::Config(format!("--grid: bad end: {e}")))?;
        let count: usize = parts[2]
            .parse()
            .map_err(|e| Error::Config(format!("--grid: bad count: {e}")))?;
        if count < 2 {
            return Err(Error::Config("--grid: count must be at least 2".into()));
        }
        let step = (end - start) / (count - 1) as f64;
        return Ok((0..count).map(|i| start + i as f64 * step).collect());
    }
    spec.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("--grid: bad value '{t}': {e}")))
        })
        .collect()
}

fn cmd_gamma_trace(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args)?;
    if !flags.positional.is_empty() {
        return Err(Error::Config(format!(
            "gamma-trace takes no positional arguments, got '{}'",
            flags.positional[0]
        )));
    }
    let schedule_spec = flags
        .schedule
        .as_deref()
        .ok_or_else(|| Error::Config("--schedule is required".into()))?;
    let grid_spec = flags
        .grid
        .as_deref()
        .ok_or_else(|| Error::Config("--grid is required".into()))?;
    let out = flags.require_out()?;
    let schedule = parse_schedule(schedule_spec, flags.clamp_max)?;
    let grid = parse_grid(grid_spec)?;
    let rows = harness::gamma_trace(&schedule, &grid)?;
    harness::write_gamma_trace(out, &rows, flags.plot)?;
    println!(
        "gamma trace over {} points written to {}",
        rows.len(),
        out.display()
    );
    Ok(())
}

fn cmd_gen_data(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args)?;
    let [spec_path] = flags.positional.as_slice() else {
        return Err(Error::Config("gen-data needs exactly one spec file".into()));
    };
    let out = flags.require_out()?;
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Error::Config(format!("cannot read {spec_path}: {e}")))?;
    let spec = harness::parse_dataset_spec(&text)?;
    let splits = data::generate(&spec)?;
    std::fs::create_dir_all(out)?;

    let mut schema = None;
    for (name, split) in [
        ("train.csv", &splits.train),
        ("validation.csv", &splits.validation),
        ("test.csv", &splits.test),
    ] {
        let file = std::fs::File::create(out.join(name))?;
        schema = Some(data::write_csv(split, std::io::BufWriter::new(file))?);
    }
    let schema = schema.expect("three splits were written");
    std::fs::write(
        out.join("dataset.meta"),
        format!(
            "schema = {schema}\nseed = {}\ntrain = {}\nvalidation = {}\ntest = {}\n",
            spec.seed,
            splits.train.len(),
            splits.validation.len(),
            splits.test.len(),
        ),
    )?;
    println!(
        "wrote {} train / {} validation / {} test samples to {} (schema: {schema})",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}
