mod args;

use std::io::Write;
use std::process::ExitCode;

use anyhow::Context;
use args::{BenchArgs, Cli, Command, InspectArgs, RunArgs};
use clap::Parser;
use famdiff_core::bench::{append_bench_csv, bench_csv, mix_kernel_rows, run_bench};
use famdiff_core::inspect::{filter_mask_pgm, write_attention_panels};
use famdiff_core::pipeline::write_outputs;
use famdiff_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const THREADS_ENV: &str = "FAMDIFF_THREADS";

/// Failures split by exit code: bad flags and configs vs. everything after.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.into())
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(anyhow::anyhow!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn cmd_run(a: &RunArgs) -> Result<(), Failure> {
    let cfg = a.config().map_err(usage)?;
    let art = famdiff_core::run(&cfg)?;
    let paths = write_outputs(&a.out, &art).with_context(|| format!("writing {}", a.out.display()))?;
    let (c, h, w) = art.z_high.dims();
    eprintln!(
        "famdiff: {c}x{h}x{w} latent, {} high-res denoiser calls, {} files in {}",
        art.high_calls,
        paths.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<(), Failure> {
    let plan = a.plan().map_err(usage)?;
    let mut rows = run_bench(&plan)?;
    if a.kernels {
        let mut sizes: Vec<(usize, usize)> = plan
            .sizes
            .iter()
            .map(|s| (s.native_h * s.scale_h, s.native_w * s.scale_w))
            .collect();
        sizes.dedup();
        rows.extend(mix_kernel_rows(&sizes, plan.denoiser.channels(), plan.warmup, plan.repeats)?);
    }
    match &a.out {
        Some(path) => {
            append_bench_csv(path, &rows, plan.parallel).with_context(|| format!("writing {}", path.display()))?
        }
        None => std::io::stdout().write_all(bench_csv(&rows, plan.parallel).as_bytes())?,
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<(), Failure> {
    if a.filter {
        let (params, t) = a.filter_params().map_err(usage)?;
        let out = a
            .out
            .clone()
            .unwrap_or_else(|| format!("filter_t{t}.pgm").into());
        filter_mask_pgm(&params, t)?.write(&out)?;
        eprintln!("famdiff: wrote {}", out.display());
    } else {
        let (Some(query), Some(run)) = (a.query, a.run.as_ref()) else {
            return Err(Failure::Usage(anyhow::anyhow!("--attn needs --query and --run")));
        };
        let out = a.out.clone().unwrap_or_else(|| run.join("inspect"));
        let paths = write_attention_panels(run, query, &out)?;
        for p in paths {
            eprintln!("famdiff: wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("famdiff: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("famdiff: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
