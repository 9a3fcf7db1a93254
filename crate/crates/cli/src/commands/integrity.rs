use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use iovstore_core::integrity::{
    file_checksums, file_digest, inject_corruption, transfer_check, verify_after_produce, ChecksumEntry, ChecksumManifest,
    Corruption, Digest, DigestAlgorithm, ProducedFileWriter, TransferDecision,
};

use super::{usage, Ctx};
use crate::args::IntegrityCmd;
use crate::exit::CliError;
use crate::output::{self, Output};

/// A digest given literally, or computed from an existing file.
fn digest_arg(arg: &str) -> Result<Digest> {
    let path = Path::new(arg);
    if path.is_file() {
        return Ok(file_digest(File::open(path)?, DigestAlgorithm::Sha256)?);
    }
    arg.parse::<Digest>()
        .map_err(|e| usage(format!("'{arg}' is neither a file nor a digest: {e}")))
}

/// Rebinds the entries of `from` to a file called `to`.
fn rename_entries(manifest: &ChecksumManifest, from: &str, to: &str) -> ChecksumManifest {
    let prefix = format!("{from}@");
    let entries = manifest
        .entries()
        .iter()
        .filter_map(|e| {
            let name = if e.name == from {
                to.to_string()
            } else {
                format!("{to}@{}", e.name.strip_prefix(&prefix)?)
            };
            Some(ChecksumEntry { name, ..e.clone() })
        })
        .collect();
    ChecksumManifest::new(entries)
}

fn decision_name(d: TransferDecision) -> &'static str {
    match d {
        TransferDecision::Accept => "accept",
        TransferDecision::RejectAndRetry => "reject-and-retry",
        TransferDecision::Reject => "reject",
    }
}

fn check_report(ctx: &Ctx, out: &mut Output, report: &iovstore_core::integrity::VerificationReport) -> Result<()> {
    output::verification(out, report);
    if !report.pass() {
        ctx.emit(out)?;
        return Err(CliError::VerificationFailed(format!(
            "{} of {} checks failed",
            report.failed(),
            report.items.len()
        ))
        .into());
    }
    Ok(())
}

pub fn run(ctx: &Ctx, cmd: IntegrityCmd) -> Result<Output> {
    let mut out = Output::new();
    match cmd {
        IntegrityCmd::Digest { file, algorithm } => {
            let algorithm: DigestAlgorithm = algorithm.parse()?;
            let digest = file_digest(File::open(&file).with_context(|| format!("opening {}", file.display()))?, algorithm)?;
            let sums = file_checksums(&file)?;
            out.set("file", file.display())
                .set("size", sums.size)
                .set("digest", digest)
                .set("crc32", sums.crc32);
        }
        IntegrityCmd::Produce {
            input,
            output: path,
            manifest,
            buffer_kib,
        } => {
            if buffer_kib == 0 {
                return Err(usage("--buffer-kib must be at least 1"));
            }
            let data = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let mut writer = ProducedFileWriter::create(&path)?;
            for chunk in data.chunks(buffer_kib * 1024) {
                writer.write_buffer(chunk)?;
            }
            let produced = writer.finish()?;
            let manifest_path = manifest.unwrap_or_else(|| {
                let mut p = path.clone().into_os_string();
                p.push(".manifest");
                PathBuf::from(p)
            });
            fs::write(&manifest_path, produced.to_text())?;
            out.set("file", path.display())
                .set("manifest", manifest_path.display())
                .set("entries", produced.entries().len());
            check_report(ctx, &mut out, &verify_after_produce(&path, &produced))?;
        }
        IntegrityCmd::Verify { file, manifest, name } => {
            let text = fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let mut manifest = ChecksumManifest::parse(&text)?;
            let actual = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if let Some(original) = name.filter(|n| *n != actual) {
                manifest = rename_entries(&manifest, &original, &actual);
            }
            out.set("file", file.display());
            check_report(ctx, &mut out, &verify_after_produce(&file, &manifest))?;
        }
        IntegrityCmd::Inject { src, kind, out: dest } => {
            let corruption: Corruption = kind.parse()?;
            inject_corruption(&src, corruption, &dest)?;
            out.set("src", src.display()).set("out", dest.display()).set("corruption", kind);
        }
        IntegrityCmd::TransferCheck {
            src,
            dst,
            attempt,
            max_attempts,
        } => {
            let outcome = transfer_check(&digest_arg(&src)?, &digest_arg(&dst)?, attempt, max_attempts)?;
            out.set("decision", decision_name(outcome.decision)).set("attempt", outcome.attempt);
            if let Some(cause) = &outcome.cause {
                out.set("cause", cause);
            }
            if outcome.decision != TransferDecision::Accept {
                ctx.emit(&out)?;
                return Err(CliError::TransferRejected(outcome.cause.unwrap_or_default()).into());
            }
        }
    }
    Ok(out)
}
