use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use xbarcm::committee::CommitteePool;
use xbarcm::harness::{
    self, base_seed, map_for, memristor_count, obtain_network, resample_pools, summarize_records, ExperimentConfig,
    ExperimentData, ExperimentResult, NetworkCache, Record, RunOptions,
};
use xbarcm::mapping::write_tile_dump;
use xbarcm::net::{evaluate_accuracy, NetworkParams};
use xbarcm::solver::deviation_heatmap;
use xbarcm::{Error, Matrix, Result};

#[derive(Parser)]
#[command(name = "xbarcm", version, about = "Memristor crossbar networks and committee machines")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario name or path to a TOML experiment config.
    #[arg(long, global = true, default_value = "hfo2-faulty-lr")]
    config: String,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory of cached trained networks.
    #[arg(long, global = true, default_value = "runs/networks")]
    cache_dir: PathBuf,
    /// Override the config's MNIST directory.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load from cache) the config's base networks.
    Train,
    /// Map one base network onto crossbars and dump its tiles.
    Map {
        #[arg(long, default_value_t = 0)]
        base: usize,
        /// Also write a line-resistance heatmap over this many test images.
        #[arg(long)]
        heatmap_images: Option<usize>,
    },
    /// Run the full experiment and write records, summary and pools.
    Simulate {
        /// Skip writing committee pool files.
        #[arg(long)]
        no_pools: bool,
    },
    /// Resample committees from the pools of an earlier `simulate` run.
    Committee {
        /// Run directory containing `pools/`.
        #[arg(long)]
        pools: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        /// Committees per size that also get optimized weightings.
        #[arg(long, default_value_t = 0)]
        optimize: usize,
    },
    /// Print the summary of a run directory.
    Report {
        /// Run directory containing `records.jsonl`.
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.common.verbose {
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    } else {
        env_logger::init();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    let mut cfg = ExperimentConfig::resolve(&c.config)?;
    if let Some(s) = c.seed {
        cfg.master_seed = s;
    }
    if let Some(d) = &c.data_dir {
        cfg.data_dir = d.clone();
    }
    let cache = NetworkCache::new(&c.cache_dir);
    match &cli.command {
        Command::Train => train(&cfg, &cache),
        Command::Map { base, heatmap_images } => map(&cfg, &cache, &c.out_dir, *base, *heatmap_images),
        Command::Simulate { no_pools } => {
            let result = harness::run_experiment(
                &cfg,
                &RunOptions {
                    out_dir: Some(c.out_dir.clone()),
                    network_cache: Some(cache),
                    write_pools: !no_pools,
                },
            )?;
            print_summary(&result.summary);
            Ok(())
        }
        Command::Committee {
            pools,
            sizes,
            samples,
            optimize,
        } => committee(pools, sizes, *samples, *optimize, cfg.master_seed, &c.out_dir),
        Command::Report { run } => report(run),
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    ExperimentData::load(&cfg.data_dir, cfg.training.train_size, cfg.counts.eval_images)
}

fn train(cfg: &ExperimentConfig, cache: &NetworkCache) -> Result<()> {
    let data = load_data(cfg)?;
    for i in 0..cfg.counts.base_networks {
        let seed = base_seed(cfg.master_seed, i);
        let (net, hist) = obtain_network(&cfg.architecture, &cfg.training, seed, &data, Some(cache))?;
        let line = json!({
            "base": i,
            "seed": seed,
            "checkpoint": cache.path(&cfg.architecture, &cfg.training, seed),
            "test_accuracy": evaluate_accuracy(&net, &data.test)?,
            "best_epoch": hist.as_ref().map(|h| h.best_epoch),
            "cached": hist.is_none(),
        });
        println!("{line}");
    }
    Ok(())
}

fn map(
    cfg: &ExperimentConfig,
    cache: &NetworkCache,
    out: &Path,
    base: usize,
    heatmap_images: Option<usize>,
) -> Result<()> {
    let data = load_data(cfg)?;
    let seed = base_seed(cfg.master_seed, base);
    let (net, _): (NetworkParams, _) = obtain_network(&cfg.architecture, &cfg.training, seed, &data, Some(cache))?;
    let mapped = map_for(cfg, &net, &data)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (l, layer) in mapped.layers.iter().enumerate() {
        write_tile_dump(out.join(format!("layer{l}-tiles.json")), &layer.tiles)?;
    }
    println!(
        "{}",
        json!({
            "base": base,
            "layers": mapped.layers.iter().map(|l| l.tiles.len()).collect::<Vec<_>>(),
            "w_max": mapped.layers[0].spec.w_max,
            "memristors": memristor_count(&cfg.architecture),
        })
    );
    if let Some(n) = heatmap_images {
        let layer = &mapped.layers[0];
        let sample = data.test.head(n);
        let acts = Matrix::from_fn(sample.len(), layer.inputs, |s, i| {
            if i + 1 == layer.inputs {
                1.0
            } else {
                sample.input(s)[i]
            }
        });
        let heat = deviation_heatmap(layer, &acts, &layer.spec)?;
        heat.write_csv(out.join("heatmap.csv"))?;
        println!("{}", json!({ "heatmap_mean": heat.mean(), "column_means": heat.column_means() }));
    }
    Ok(())
}

fn committee(pools_dir: &Path, sizes: &[usize], samples: usize, optimize: usize, seed: u64, out: &Path) -> Result<()> {
    let dir = pools_dir.join("pools");
    let mut names: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(dir.clone(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("group-") && n.ends_with(".bin") && !n.ends_with(".val.bin"))
        })
        .collect();
    names.sort();
    let pools = names
        .iter()
        .map(|p| {
            let val = p.with_extension("val.bin");
            Ok((
                CommitteePool::load(p)?,
                val.exists().then(|| CommitteePool::load(&val)).transpose()?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, sampling) = resample_pools(&pools, sizes, samples, optimize, seed)?;
    let summary = summarize_records(&records)?;
    let mut result = ExperimentResult {
        records,
        summary,
        metadata: serde_json::from_slice(
            &fs::read(pools_dir.join("metadata.json")).map_err(|e| Error::io(pools_dir.join("metadata.json"), e))?,
        )?,
    };
    result.metadata.sampling = sampling;
    result.write(out)?;
    print_summary(&result.summary);
    Ok(())
}

fn report(run: &Path) -> Result<()> {
    let path = run.join("records.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.clone(), e))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<Record>(l).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    print_summary(&summarize_records(&records)?);
    Ok(())
}

fn print_summary(rows: &[harness::SummaryRow]) {
    println!(
        "{:<11} {:>4} {:>6} {:>8} {:>8} {:>8} {:>8}",
        "group", "size", "count", "median", "q1", "q3", "outliers"
    );
    for r in rows {
        println!(
            "{:<11} {:>4} {:>6} {:>7.2}% {:>7.2}% {:>7.2}% {:>8}",
            r.group,
            r.size,
            r.count,
            100.0 * r.median,
            100.0 * r.q1,
            100.0 * r.q3,
            r.outliers
        );
    }
}
