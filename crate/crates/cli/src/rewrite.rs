//! `shep rewrite`: instrument one module, write the result, and report
//! what changed.

use std::path::{Path, PathBuf};

use shep_core::pe::PeImage;
use shep_core::rewriter::{rewrite_file, RewriteOptions, RewriteReport};

use crate::{load_sidecar, read_bytes, CmdError, ReportFormat};

/// `toy.sys` becomes `toy.shep.sys`; extensionless inputs get `.shep`.
fn default_out(file: &Path) -> PathBuf {
    match file.extension().and_then(|e| e.to_str()) {
        Some(ext) => file.with_extension(format!("shep.{ext}")),
        None => file.with_extension("shep"),
    }
}

pub fn cmd_rewrite(
    file: &Path,
    out: Option<&Path>,
    sym: Option<&Path>,
    report: Option<ReportFormat>,
    instrument_direct_calls: bool,
) -> Result<i32, CmdError> {
    let bytes = read_bytes(file)?;
    // Reject malformed input up front so parse problems stay input errors
    // and everything after this point is a pipeline failure.
    PeImage::parse(&bytes).map_err(|e| CmdError::Input(format!("{}: {e}", file.display())))?;
    let sidecar = load_sidecar(sym)?;
    let opts = RewriteOptions {
        instrument_direct_calls,
    };
    let (rewritten, rep) = rewrite_file(&bytes, sidecar.as_ref(), &opts)
        .map_err(|e| CmdError::Rewrite(format!("{}: {e}", file.display())))?;

    let out_path = out.map(PathBuf::from).unwrap_or_else(|| default_out(file));
    std::fs::write(&out_path, &rewritten)
        .map_err(|e| CmdError::Input(format!("{}: {e}", out_path.display())))?;

    let name = file
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.display().to_string());
    match report {
        Some(ReportFormat::Csv) => {
            println!("{}", RewriteReport::CSV_HEADER);
            println!("{}", rep.csv_row(&name));
        }
        Some(ReportFormat::Json) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&rep.to_json(&name)).expect("report serializes")
            );
        }
        None => {
            let growth = if rep.code_bytes_org > 0 {
                rep.code_bytes_int as f64 / rep.code_bytes_org as f64
            } else {
                1.0
            };
            eprintln!(
                "{name}: {}/{} functions patched, {} stubs, code x{growth:.2}, \
{} -> {} bytes ({})",
                rep.functions_patched,
                rep.functions_total,
                rep.stubs_emitted,
                rep.size_org,
                rep.size_int,
                out_path.display()
            );
        }
    }
    Ok(0)
}
