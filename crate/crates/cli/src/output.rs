use std::fmt::Write as _;
use std::io::{self, Write};

use iovstore_core::integrity::VerificationReport;
use iovstore_core::model::PayloadKind;
use iovstore_core::query::ResultSet;

use crate::args::Format;

/// Ordered key/value result of a command, with optional free text shown
/// instead of the pairs in text mode.
#[derive(Debug, Default)]
pub struct Output {
    fields: Vec<(String, String)>,
    text: Option<String>,
    raw: Option<Vec<u8>>,
}

impl Output {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn raw(bytes: Vec<u8>) -> Self {
        Self {
            raw: Some(bytes),
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.fields.push((key.into(), value.to_string()));
        self
    }

    pub fn text(&mut self, text: String) -> &mut Self {
        self.text = Some(text);
        self
    }

    pub fn render(&self, format: Format) -> Vec<u8> {
        if let Some(raw) = &self.raw {
            return raw.clone();
        }
        let mut out = String::new();
        match (format, &self.text) {
            (Format::Machine, _) => {
                for (k, v) in &self.fields {
                    let _ = writeln!(out, "{k}={v}");
                }
            }
            (Format::Text, Some(text)) => out.push_str(text),
            (Format::Text, None) => {
                let width = self.fields.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
                for (k, v) in &self.fields {
                    let _ = writeln!(out, "{k:<width$}  {v}");
                }
            }
        }
        out.into_bytes()
    }

    pub fn emit(&self, format: Format) -> io::Result<()> {
        let mut stdout = io::stdout().lock();
        stdout.write_all(&self.render(format))?;
        stdout.flush()
    }
}

pub fn result_set(out: &mut Output, rs: &ResultSet) {
    out.set("rows", rs.len());
    let mut table = String::new();
    if !rs.is_empty() {
        let _ = writeln!(
            table,
            "{:<28} {:>7} {:<12} {:>12} {:>12} {:>9}  payload",
            "folder", "channel", "tag", "since", "until", "size"
        );
    }
    for (i, row) in rs.rows.iter().enumerate() {
        let rec = &row.record;
        let p = format!("row.{i}");
        out.set(format!("{p}.folder"), &row.folder)
            .set(format!("{p}.channel"), row.channel)
            .set(format!("{p}.tag"), &row.leaf_tag)
            .set(format!("{p}.since"), rec.interval.since())
            .set(format!("{p}.until"), rec.interval.until());
        let payload = match &rec.payload.kind {
            PayloadKind::Inline => {
                out.set(format!("{p}.kind"), "inline");
                rec.payload.digest.to_hex()
            }
            PayloadKind::External { logical_name } => {
                out.set(format!("{p}.kind"), "external")
                    .set(format!("{p}.logical-name"), logical_name);
                format!("{logical_name} ({})", rec.payload.digest.to_hex())
            }
        };
        out.set(format!("{p}.size"), rec.payload.size)
            .set(format!("{p}.digest"), rec.payload.digest.to_hex());
        let _ = writeln!(
            table,
            "{:<28} {:>7} {:<12} {:>12} {:>12} {:>9}  {}",
            row.folder.to_string(),
            row.channel,
            row.leaf_tag.to_string(),
            rec.interval.since().to_string(),
            rec.interval.until().to_string(),
            rec.payload.size,
            payload
        );
    }
    let _ = writeln!(table, "{} row(s)", rs.len());
    out.text(table);
}

pub fn verification(out: &mut Output, report: &VerificationReport) {
    out.set("checked", report.items.len())
        .set("passed", report.passed())
        .set("failed", report.failed());
    for item in &report.items {
        out.set(format!("check.{}", item.name), if item.pass { "pass" } else { "fail" });
        if !item.pass {
            out.set(format!("check.{}.expected", item.name), &item.expected)
                .set(format!("check.{}.actual", item.name), &item.actual);
        }
    }
    out.set("result", if report.pass() { "pass" } else { "fail" });
    out.text(format!("{}\n", report.to_string().trim_end()));
}
