//! `shep bench`: rewrite every module in a directory and print one report
//! row per file, in name order, with a throughput summary on stderr.
//!
//! Files are split into contiguous chunks across `--jobs` worker threads;
//! each file's pipeline stays single-threaded. A sibling `<stem>.sym`
//! sidecar is picked up automatically.

use std::path::{Path, PathBuf};

use shep_core::analyzer::parse_sidecar;
use shep_core::rewriter::{rewrite_file, RewriteOptions, RewriteReport};

use crate::{CmdError, ReportFormat};

fn bench_one(path: &Path, opts: &RewriteOptions) -> Result<(String, RewriteReport), CmdError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
    let sidecar_path = path.with_extension("sym");
    let sidecar = match std::fs::read_to_string(&sidecar_path) {
        Ok(text) => Some(parse_sidecar(&text).map_err(|e| {
            CmdError::Input(format!("{}: {e}", sidecar_path.display()))
        })?),
        Err(_) => None,
    };
    let (_, report) = rewrite_file(&bytes, sidecar.as_ref(), opts)
        .map_err(|e| CmdError::Rewrite(format!("{}: {e}", path.display())))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    Ok((name, report))
}

pub fn cmd_bench(
    dir: &Path,
    report: ReportFormat,
    jobs: usize,
    instrument_direct_calls: bool,
) -> Result<i32, CmdError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CmdError::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("sys"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CmdError::Input(format!(
            "{}: no .sys files to bench",
            dir.display()
        )));
    }

    let opts = RewriteOptions {
        instrument_direct_calls,
    };
    let jobs = jobs.clamp(1, files.len());
    let chunk = files.len().div_ceil(jobs);
    let mut rows: Vec<Option<Result<(String, RewriteReport), CmdError>>> =
        (0..files.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        for (fchunk, rchunk) in files.chunks(chunk).zip(rows.chunks_mut(chunk)) {
            let opts = &opts;
            s.spawn(move || {
                for (file, slot) in fchunk.iter().zip(rchunk.iter_mut()) {
                    *slot = Some(bench_one(file, opts));
                }
            });
        }
    });

    let mut table = Vec::with_capacity(rows.len());
    for row in rows {
        table.push(row.expect("every file was processed")?);
    }

    match report {
        ReportFormat::Csv => {
            println!("{}", RewriteReport::CSV_HEADER);
            for (name, rep) in &table {
                println!("{}", rep.csv_row(name));
            }
        }
        ReportFormat::Json => {
            let docs: Vec<_> = table.iter().map(|(n, r)| r.to_json(n)).collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&docs).expect("reports serialize")
            );
        }
    }

    let instructions: u64 = table.iter().map(|(_, r)| r.instructions).sum();
    let decode_us: u64 = table.iter().map(|(_, r)| r.t_disasm_us).sum();
    let rate = instructions as f64 / (decode_us.max(1) as f64 / 1e6);
    eprintln!(
        "bench: {} files, {instructions} instructions, disassembly {rate:.0} instr/s",
        table.len()
    );
    Ok(0)
}
