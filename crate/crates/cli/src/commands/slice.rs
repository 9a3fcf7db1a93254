use std::fs::{self, File};

use anyhow::Result;
use iovstore_core::integrity::{file_digest, DigestAlgorithm};
use iovstore_core::release::{build_slice, catalog_lookup, open_slice, verify_slice, BuildOptions, Verify};

use super::{selection, Ctx};
use crate::args::SliceCmd;
use crate::exit::CliError;
use crate::output::{self, Output};

pub fn run(ctx: &Ctx, cmd: SliceCmd) -> Result<Output> {
    let mut out = Output::new();
    match cmd {
        SliceCmd::Build {
            out: path,
            created,
            external_root,
            selection: sel,
        } => {
            let store = ctx.open_store(false)?;
            let manifest = build_slice(
                &store,
                &selection(&sel)?,
                &path,
                &BuildOptions {
                    created,
                    external_roots: external_root,
                },
            )?;
            let digest = file_digest(File::open(&path)?, DigestAlgorithm::Sha256)?;
            out.set("slice", path.display())
                .set("members", manifest.entries.len())
                .set("total-size", manifest.total_size)
                .set("archive-size", fs::metadata(&path)?.len())
                .set("archive-digest", digest);
        }
        SliceCmd::OpenCheck { slice } => {
            let handle = open_slice(&slice, Verify::Eager)?;
            let m = handle.manifest();
            out.set("slice", slice.display())
                .set("format", &m.format)
                .set("source-store", &m.source_store)
                .set("created", m.created)
                .set("members", m.entries.len())
                .set("total-size", m.total_size)
                .set("records", handle.dump()?.len())
                .set("catalog-entries", handle.catalog().len());
            for e in &m.entries {
                out.set(format!("member.{}", e.name), format!("{} {}", e.size, e.digest));
            }
        }
        SliceCmd::Verify { slice } => {
            let report = verify_slice(&slice)?;
            output::verification(&mut out, &report);
            if !report.pass() {
                ctx.emit(&out)?;
                return Err(CliError::VerificationFailed(format!(
                    "{} of {} members failed",
                    report.failed(),
                    report.items.len()
                ))
                .into());
            }
        }
        SliceCmd::Cat { slice, logical_name, out: dest } => {
            let handle = open_slice(&slice, Verify::Lazy)?;
            let bytes = catalog_lookup(&handle, &logical_name)?;
            match dest {
                Some(dest) => {
                    fs::write(&dest, &bytes)?;
                    out.set("logical-name", logical_name)
                        .set("size", bytes.len())
                        .set("out", dest.display());
                }
                None => return Ok(Output::raw(bytes)),
            }
        }
    }
    Ok(out)
}
