use std::fs;

use anyhow::Result;
use iovstore_harness::{bundled_scenario, bundled_scenarios, run_scenario, ScenarioConfig};

use super::Ctx;
use crate::args::{Format, ScenarioCmd};
use crate::exit::CliError;
use crate::output::Output;

pub fn run(ctx: &Ctx, cmd: ScenarioCmd) -> Result<Output> {
    let mut out = Output::new();
    match cmd {
        ScenarioCmd::List => {
            let mut text = String::new();
            for name in bundled_scenarios() {
                let kind = bundled_scenario(name)?.experiment.kind();
                out.set(format!("scenario.{name}"), kind);
                text.push_str(&format!("{name:<18} {kind}\n"));
            }
            out.text(text);
        }
        ScenarioCmd::Run {
            name,
            file,
            workdir,
            report,
        } => {
            let config = match (name, file) {
                (_, Some(path)) => ScenarioConfig::load(&path)?,
                (Some(name), None) => bundled_scenario(&name)?,
                (None, None) => return Err(super::usage("give a scenario name or --file")),
            };
            if let Some(dir) = &workdir {
                fs::create_dir_all(dir)?;
            }
            let result = run_scenario(&config, workdir.as_deref())?;
            let rendered = match ctx.format {
                Format::Machine => result.to_machine(),
                Format::Text => result.to_text(),
            };
            if let Some(path) = &report {
                fs::write(path, &rendered)?;
            }
            out = Output::raw(rendered.into_bytes());
            if !result.passed() {
                ctx.emit(&out)?;
                let failed: Vec<&str> = result.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
                return Err(CliError::ChecksFailed(failed.join(", ")).into());
            }
        }
    }
    Ok(out)
}
