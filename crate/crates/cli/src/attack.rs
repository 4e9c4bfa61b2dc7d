//! `shep attack`: replay a scenario description against its freshly
//! instrumented module and judge the outcome.
//!
//! A scenario is JSON next to its module file; addresses may be written
//! as `"0x..."` strings or decimal, poke bytes as a hex string:
//!
//! ```json
//! {
//!   "name": "trampoline",
//!   "module": "trampoline.sys",
//!   "load_base": "0xa0000000",
//!   "inputs": ["0x5000"],
//!   "pokes": [{ "addr": "0x5000", "bytes": "b8 77 66 00 00 c3" }],
//!   "staged_at": "0x5000",
//!   "staged_len": 6,
//!   "expect": "detected",
//!   "expect_target": "0x5000"
//! }
//! ```
//!
//! Prints `DETECTED <target>` or `CLEAN`; exits 0 when that matches the
//! scenario's `expect` field, 5 otherwise.

use std::path::Path;

use serde::{Deserialize, Serialize};
use shep_core::corpus::{run_scenario_with, AttackScenario};
use shep_core::monitor::{PolicyConfig, ReactionMode};

use crate::{parse_u32, shep_log, CmdError, EXIT_SCENARIO};

// ---------------------------------------------------------------------------
// On-disk scenario format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PokeSpec {
    pub addr: String,
    /// Hex byte string; whitespace is ignored.
    pub bytes: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub name: String,
    /// Module path, relative to the scenario file's directory.
    pub module: String,
    pub load_base: String,
    /// Initial values for the six input registers; missing slots are zero.
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub pokes: Vec<PokeSpec>,
    /// Region whose execution would mean the attack succeeded.
    pub staged_at: String,
    pub staged_len: u32,
    /// `"detected"` or `"clean"`.
    pub expect: String,
    /// With `"detected"`: the target the first denial must name.
    #[serde(default)]
    pub expect_target: Option<String>,
    /// With `"clean"`: the value output word 0 must hold afterwards.
    #[serde(default)]
    pub expect_out0: Option<u32>,
}

pub fn bytes_to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_hex_bytes(s: &str) -> Result<Vec<u8>, String> {
    let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if !compact.len().is_multiple_of(2) {
        return Err(format!("odd-length hex string {s:?}"));
    }
    (0..compact.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&compact[i..i + 2], 16)
                .map_err(|_| format!("bad hex byte {:?}", &compact[i..i + 2]))
        })
        .collect()
}

impl ScenarioFile {
    /// Resolve paths and number formats into a runnable scenario.
    pub fn into_scenario(self, dir: &Path) -> Result<AttackScenario, CmdError> {
        let bad = |m: String| CmdError::Input(format!("{}: {m}", self.name));
        if self.expect != "detected" && self.expect != "clean" {
            return Err(bad(format!(
                "expect is {:?}, must be \"detected\" or \"clean\"",
                self.expect
            )));
        }
        if self.inputs.len() > 6 {
            return Err(bad(format!("{} inputs, at most 6", self.inputs.len())));
        }
        let module_path = dir.join(&self.module);
        let bytes = std::fs::read(&module_path)
            .map_err(|e| CmdError::Input(format!("{}: {e}", module_path.display())))?;
        let mut inputs = [0u32; 6];
        for (slot, text) in inputs.iter_mut().zip(&self.inputs) {
            *slot = parse_u32(text).map_err(&bad)?;
        }
        let mut pokes = Vec::with_capacity(self.pokes.len());
        for p in &self.pokes {
            pokes.push((
                parse_u32(&p.addr).map_err(&bad)?,
                parse_hex_bytes(&p.bytes).map_err(&bad)?,
            ));
        }
        let expect_clean = self.expect == "clean";
        let expect_target = match &self.expect_target {
            Some(t) => parse_u32(t).map_err(&bad)?,
            None => 0,
        };
        let load_base = parse_u32(&self.load_base).map_err(&bad)?;
        let staged_at = parse_u32(&self.staged_at).map_err(&bad)?;
        Ok(AttackScenario {
            name: self.name,
            bytes,
            load_base,
            inputs,
            pokes,
            staged_at,
            staged_len: self.staged_len,
            expect_clean,
            expect_target,
            expect_out0: self.expect_out0,
        })
    }
}

// ---------------------------------------------------------------------------
// Command
// ---------------------------------------------------------------------------

pub fn cmd_attack(path: &Path, strict_writable_deny: bool) -> Result<i32, CmdError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
    let sf: ScenarioFile = serde_json::from_str(&text)
        .map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))?;
    let expect = sf.expect.clone();
    let expect_target = sf.expect_target.clone();
    let sc = sf.into_scenario(path.parent().unwrap_or(Path::new(".")))?;

    let outcome = run_scenario_with(
        &sc,
        PolicyConfig {
            reaction: ReactionMode::LogHalt,
            log_path: shep_log(),
            strict_writable_deny,
            ..PolicyConfig::default()
        },
    )
    .map_err(CmdError::Rewrite)?;

    let detected = outcome.first_denied.map(|ev| ev.target);
    match detected {
        Some(target) => println!("DETECTED {target:#010x}"),
        None => println!("CLEAN"),
    }

    let matched = match (expect.as_str(), detected) {
        ("detected", Some(target)) => match expect_target {
            Some(want) => parse_u32(&want).map_err(CmdError::Input)? == target,
            None => true,
        },
        ("clean", None) => match sc.expect_out0 {
            Some(want) => outcome.out0 == want,
            None => true,
        },
        _ => false,
    };
    Ok(if matched { 0 } else { EXIT_SCENARIO })
}
