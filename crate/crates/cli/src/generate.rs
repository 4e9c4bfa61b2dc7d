//! `shep gen`: write a validated corpus — modules plus symbol sidecars —
//! and a `scenarios/` bundle with the attack descriptions and their
//! benign twins, ready for `shep attack`.

use std::path::Path;

use shep_core::corpus::{
    forged_index_benign, forged_index_scenario, generate_corpus, trampoline_benign,
    trampoline_scenario, AttackScenario,
};

use crate::attack::{bytes_to_hex, PokeSpec, ScenarioFile};
use crate::CmdError;

fn describe(sc: &AttackScenario, module: &str) -> ScenarioFile {
    ScenarioFile {
        name: sc.name.clone(),
        module: module.to_string(),
        load_base: format!("{:#x}", sc.load_base),
        inputs: sc.inputs.iter().map(|v| format!("{v:#x}")).collect(),
        pokes: sc
            .pokes
            .iter()
            .map(|(addr, bytes)| PokeSpec {
                addr: format!("{addr:#x}"),
                bytes: bytes_to_hex(bytes),
            })
            .collect(),
        staged_at: format!("{:#x}", sc.staged_at),
        staged_len: sc.staged_len,
        expect: if sc.expect_clean { "clean" } else { "detected" }.to_string(),
        expect_target: (!sc.expect_clean).then(|| format!("{:#x}", sc.expect_target)),
        expect_out0: sc.expect_out0,
    }
}

pub fn cmd_gen(out: &Path, seed: u64, count: usize) -> Result<i32, CmdError> {
    let write = |path: &Path, bytes: &[u8]| {
        std::fs::write(path, bytes).map_err(|e| CmdError::Input(format!("{}: {e}", path.display())))
    };

    std::fs::create_dir_all(out)
        .map_err(|e| CmdError::Input(format!("{}: {e}", out.display())))?;
    let programs = generate_corpus(seed, count).map_err(CmdError::Analysis)?;
    for p in &programs {
        write(&out.join(&p.name), &p.bytes)?;
        let sym = Path::new(&p.name).with_extension("sym");
        write(&out.join(sym), p.sidecar.as_bytes())?;
    }

    let scen_dir = out.join("scenarios");
    std::fs::create_dir_all(&scen_dir)
        .map_err(|e| CmdError::Input(format!("{}: {e}", scen_dir.display())))?;
    let bundle = [
        (trampoline_scenario(), "trampoline.sys"),
        (trampoline_benign(), "trampoline.sys"),
        (forged_index_scenario(), "forged_index.sys"),
        (forged_index_benign(), "forged_index.sys"),
    ];
    for (sc, module) in &bundle {
        let module_path = scen_dir.join(module);
        if !module_path.exists() {
            write(&module_path, &sc.bytes)?;
        }
        let doc = serde_json::to_string_pretty(&describe(sc, module))
            .expect("scenario serializes");
        write(&scen_dir.join(format!("{}.json", sc.name)), doc.as_bytes())?;
    }

    eprintln!(
        "gen: {count} modules with sidecars in {}, {} scenarios in {}",
        out.display(),
        bundle.len(),
        scen_dir.display()
    );
    Ok(0)
}
