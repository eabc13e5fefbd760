use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rubric_core::config::load_config;
use rubric_core::corpus::benchmarks::{import_benchmark, BenchmarkId};
use rubric_core::corpus::write_uniform;
use rubric_core::report::{read_manifest, write_comparison_tables, Manifest};
use rubric_core::run::{cmd_meta_eval, cmd_run};
use rubric_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "rubric",
    version,
    about = "Builds and applies optimized LLM evaluation protocols"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a benchmark release file into the uniform instance format
    Import {
        /// Raw benchmark file (layout depends on the adapter)
        raw_path: PathBuf,
        /// Benchmark adapter: summeval, topicalchat, sfres, openmeva_roc
        benchmark: String,
        /// Destination for the uniform JSONL file
        out: PathBuf,
        /// Overwrite the destination if it already exists
        #[arg(long)]
        force: bool,
    },
    /// Run the full pipeline described by a JSON config file
    Run {
        /// Config path; see README for the schema
        config: PathBuf,
        /// Keep per-instance scoring transcripts in reports.jsonl
        #[arg(long)]
        keep_transcripts: bool,
    },
    /// Render comparison tables from completed run directories
    Report {
        /// Run directories, each containing manifest.json
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Directory receiving comparison.csv / comparison.md
        #[arg(long, default_value = "reports")]
        out: PathBuf,
    },
    /// Correlate an external evaluator's predictions with human judgments
    MetaEval {
        /// Uniform dataset (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// Predictions CSV with header `id,score`
        #[arg(long)]
        predictions: PathBuf,
        /// Permutation count for p-values (>= 1000)
        #[arg(long, default_value_t = 1000)]
        permutations: usize,
        /// Base seed for the permutation test
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.class().exit_code());
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Import {
            raw_path,
            benchmark,
            out,
            force,
        } => import(&raw_path, &benchmark, &out, force),
        Command::Run {
            config,
            keep_transcripts,
        } => run(&config, keep_transcripts),
        Command::Report { run_dirs, out } => report(&run_dirs, &out),
        Command::MetaEval {
            data,
            predictions,
            permutations,
            seed,
        } => {
            let summary = cmd_meta_eval(&data, &predictions, permutations, seed)?;
            let body = serde_json::to_string_pretty(&summary)
                .map_err(|e| Error::Data(format!("cannot serialize summary: {e}")))?;
            println!("{body}");
            Ok(())
        }
    }
}

fn import(raw_path: &PathBuf, benchmark: &str, out: &PathBuf, force: bool) -> Result<()> {
    let id: BenchmarkId = benchmark.parse()?;
    if out.exists() && !force {
        return Err(Error::Config(format!(
            "{} already exists; pass --force to overwrite",
            out.display()
        )));
    }
    let dataset = import_benchmark(raw_path, id)?;
    write_uniform(&dataset, out)?;
    println!(
        "imported {} instances from {} into {}",
        dataset.len(),
        id.as_str(),
        out.display()
    );
    Ok(())
}

fn run(config_path: &PathBuf, keep_transcripts: bool) -> Result<()> {
    let mut config = load_config(config_path)?;
    if keep_transcripts {
        config.keep_transcripts = true;
    }
    let outcome = cmd_run(&config)?;
    for (id, reason) in &outcome.score_failures {
        eprintln!("warning: instance '{id}' dropped from scoring: {reason}");
    }
    let s = &outcome.manifest.summary;
    let fmt = |v: Option<f64>| match v {
        Some(v) => format!("{v:.4}"),
        None => "undefined".to_string(),
    };
    println!("run {} complete: {}", outcome.run_id, outcome.run_dir.display());
    println!(
        "pearson={} spearman={} kendall_tau_b={} q={} (n={}, excluded={})",
        fmt(s.pearson),
        fmt(s.spearman),
        fmt(s.kendall_tau_b),
        fmt(s.q),
        s.n,
        s.excluded
    );
    Ok(())
}

fn report(run_dirs: &[PathBuf], out: &PathBuf) -> Result<()> {
    let manifests: Vec<Manifest> = run_dirs
        .iter()
        .map(|dir| read_manifest(dir))
        .collect::<Result<_>>()?;
    let (written, warnings) = write_comparison_tables(&manifests, out, "comparison")?;
    for warning in &warnings {
        eprintln!("warning: {warning}");
    }
    for (csv_path, md_path) in &written {
        println!("wrote {}", csv_path.display());
        println!("wrote {}", md_path.display());
    }
    for (_, md_path) in &written {
        let body =
            std::fs::read_to_string(md_path).map_err(|e| Error::io(md_path.clone(), e))?;
        println!("\n{body}");
    }
    Ok(())
}
