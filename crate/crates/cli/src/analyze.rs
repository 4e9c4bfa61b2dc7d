//! `shep analyze`: run discovery over one module and emit the code graph
//! as JSON, either to stdout or to `--out`.

use std::path::Path;

use serde_json::json;
use shep_core::analyzer::{self, Origin};
use shep_core::pe::PeImage;

use crate::{load_sidecar, read_bytes, CmdError};

pub fn cmd_analyze(
    file: &Path,
    sym: Option<&Path>,
    out: Option<&Path>,
) -> Result<i32, CmdError> {
    let bytes = read_bytes(file)?;
    let image = PeImage::parse(&bytes)
        .map_err(|e| CmdError::Input(format!("{}: {e}", file.display())))?;
    let sidecar = load_sidecar(sym)?;
    let graph = analyzer::analyze(&image, sidecar.as_ref());
    if graph.functions.is_empty() {
        return Err(CmdError::Analysis(format!(
            "{}: no functions discovered",
            file.display()
        )));
    }

    let functions: Vec<_> = graph
        .functions
        .values()
        .map(|f| {
            json!({
                "entry": format!("{:#x}", f.entry),
                "origin": match f.origin {
                    Origin::Solid => "solid",
                    Origin::Prospect => "prospect",
                },
                "name": f.name,
                "patchable": f.patchable,
                "reject_reason": f.reject_reason.map(|r| r.as_str()),
                "blocks": f.blocks.len(),
                "instructions": f.instruction_count(),
            })
        })
        .collect();
    let doc = json!({
        "file": file.display().to_string(),
        "image_base": format!("{:#x}", image.image_base()),
        "entry_point": format!("{:#x}", image.entry_point()),
        "functions": functions,
        "conflicts": graph.conflicts.iter().map(|c| format!("{c:#x}")).collect::<Vec<_>>(),
        "summary": {
            "functions": graph.functions.len(),
            "patchable": graph.functions.values().filter(|f| f.patchable).count(),
            "basic_blocks": graph.block_count(),
            "instructions": graph.instruction_count(),
            "t_disasm": graph.timings.decode_us as f64 / 1e6,
            "t_basicblock": graph.timings.blocks_us as f64 / 1e6,
        },
    });
    let text = serde_json::to_string_pretty(&doc).expect("graph serializes");

    match out {
        Some(path) => std::fs::write(path, text + "\n")
            .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?,
        None => println!("{text}"),
    }
    Ok(0)
}
