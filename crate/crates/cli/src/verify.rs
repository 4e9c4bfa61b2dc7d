//! `shep verify`: run the original and the rewritten module on identical
//! input vectors and compare what comes out — registers, flags, the output
//! window, and the stop reason — with the rewritten copy under an armed
//! monitor that must stay silent.

use std::path::Path;
use std::sync::Arc;

use shep_core::corpus::{input_vectors, CORPUS_LOAD_BASE};
use shep_core::emulator::{run_image, HarnessOptions};
use shep_core::monitor::{Monitor, PolicyConfig, ReactionMode};
use shep_core::pe::PeImage;

use crate::{read_bytes, shep_log, CmdError, EXIT_DIVERGENCE};

fn load(path: &Path) -> Result<PeImage, CmdError> {
    PeImage::parse(&read_bytes(path)?)
        .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))
}

pub fn cmd_verify(
    original: &Path,
    rewritten: &Path,
    seed: u64,
    vectors: usize,
    strict_writable_deny: bool,
) -> Result<i32, CmdError> {
    let org = load(original)?;
    let rw = load(rewritten)?;
    let vecs = input_vectors(seed, vectors.max(1));

    let mut divergences = 0usize;
    for (vi, v) in vecs.iter().enumerate() {
        let plain = run_image(&org, CORPUS_LOAD_BASE, v, &HarnessOptions::default())
            .map_err(|e| CmdError::Input(format!("{}: {e}", original.display())))?;
        let monitor = Arc::new(Monitor::new());
        monitor
            .configure(PolicyConfig {
                reaction: ReactionMode::LogHalt,
                log_path: shep_log(),
                strict_writable_deny,
                ..PolicyConfig::default()
            })
            .map_err(|e| CmdError::Input(format!("monitor: {e}")))?;
        let guarded = run_image(
            &rw,
            CORPUS_LOAD_BASE,
            v,
            &HarnessOptions {
                monitor: Some(Arc::clone(&monitor)),
                ..HarnessOptions::default()
            },
        )
        .map_err(|e| CmdError::Input(format!("{}: {e}", rewritten.display())))?;

        let mut what = Vec::new();
        if plain.stop != guarded.stop {
            what.push(format!("stop {} vs {}", plain.stop, guarded.stop));
        }
        if plain.regs != guarded.regs {
            what.push("registers".to_string());
        }
        if plain.eflags != guarded.eflags {
            what.push("flags".to_string());
        }
        if plain.out != guarded.out {
            what.push("output window".to_string());
        }
        if monitor.denied_count() > 0 {
            what.push(format!("{} policy denials", monitor.denied_count()));
        }
        if what.is_empty() {
            println!("vector {vi}: ok");
        } else {
            divergences += 1;
            println!("vector {vi}: DIVERGED ({})", what.join(", "));
        }
    }

    if divergences == 0 {
        println!("equivalent over {} vectors", vecs.len());
        Ok(0)
    } else {
        println!("{divergences} of {} vectors diverged", vecs.len());
        Ok(EXIT_DIVERGENCE)
    }
}
