use std::collections::BTreeMap;
use std::fs;

use anyhow::{Context, Result};
use iovstore_core::model::{NodePath, TagName, TagNode};
use iovstore_core::query::ConditionsRead;
use iovstore_core::store::{CommitPayload, CommitRequest, PartitionRole, Store, StoreOptions};

use super::{canonical_query, selection, usage, Ctx};
use crate::args::StoreCmd;
use crate::exit::CliError;
use crate::output::{self, Output};

pub fn run(ctx: &Ctx, cmd: StoreCmd) -> Result<Output> {
    let mut out = Output::new();
    match cmd {
        StoreCmd::Init { id } => {
            let path = ctx.store_path()?;
            let store = Store::init(&path, &id, StoreOptions::default())?;
            out.set("store", path.display()).set("id", store.id());
        }
        StoreCmd::Info => {
            let store = ctx.open_store(false)?;
            out.set("id", store.id());
            let partitions = store.partitions();
            out.set("partitions", partitions.len());
            for p in &partitions {
                out.set(format!("partition.{}", p.name), format!("{} {}", role_name(p.role), p.root));
            }
            let (folders, tags, sequences, records) = store.with_state(|s| {
                (
                    s.folders.folders().count(),
                    s.tags.len(),
                    s.sequences.len(),
                    s.sequences.values().map(|q| q.len()).sum::<usize>(),
                )
            });
            out.set("folders", folders)
                .set("hierarchical-tags", tags)
                .set("sequences", sequences)
                .set("records", records)
                .set("objects", store.object_count()?)
                .set("state-digest", store.state_digest()?);
        }
        StoreCmd::CreatePartition { name, role, root } => {
            let store = ctx.open_store(true)?;
            store.create_partition(&name, role.parse()?, NodePath::parse(&root)?)?;
            out.set("partition", name).set("role", role).set("root", NodePath::parse(&root)?);
        }
        StoreCmd::CreateFolder { partition, path, schema, channels } => {
            let store = ctx.open_store(true)?;
            let path = NodePath::parse(&path)?;
            store.create_folder(&partition, path.clone(), &schema, &channels)?;
            let channels: Vec<String> = channels.iter().map(u32::to_string).collect();
            out.set("folder", path).set("schema", schema).set("channels", channels.join(","));
        }
        StoreCmd::Commit {
            folder,
            tag,
            since,
            channel,
            data,
            data_file,
            external,
            external_file,
            author,
            comment,
        } => {
            let store = ctx.open_store(true)?;
            let payload = match (data, data_file, external, external_file) {
                (Some(d), _, _, _) => CommitPayload::Inline(d.into_bytes()),
                (_, Some(f), _, _) => {
                    CommitPayload::Inline(fs::read(&f).with_context(|| format!("reading {}", f.display()))?)
                }
                (_, _, Some(name), Some(f)) => {
                    let bytes = fs::read(&f).with_context(|| format!("reading {}", f.display()))?;
                    let (digest, size) = store.register_external(&name, &bytes)?;
                    CommitPayload::External {
                        logical_name: name,
                        digest,
                        size,
                    }
                }
                _ => return Err(usage("give --data, --data-file or --external with --external-file")),
            };
            let req = CommitRequest {
                payload,
                author,
                comment,
                ..CommitRequest::inline(NodePath::parse(&folder)?, TagName::new(&tag)?, since, Vec::new())
            }
            .on_channel(channel);
            let folder = req.folder.clone();
            let record = store.commit(req)?;
            out.set("folder", folder)
                .set("channel", channel)
                .set("tag", tag)
                .set("since", record.interval.since())
                .set("until", record.interval.until())
                .set("insertion-index", record.insertion_index)
                .set("size", record.payload.size)
                .set("digest", record.payload.digest);
        }
        StoreCmd::DefineTag { owner, name, associations } => {
            let store = ctx.open_store(true)?;
            let mut map = BTreeMap::new();
            for a in &associations {
                let (child, tag) = a
                    .split_once('=')
                    .ok_or_else(|| usage(format!("association '{a}' is not CHILD=TAG")))?;
                map.insert(child.to_string(), TagName::new(tag)?);
            }
            let owner = NodePath::parse(&owner)?;
            store.define_tag(TagNode {
                owner: owner.clone(),
                name: TagName::new(&name)?,
                associations: map,
            })?;
            out.set("owner", owner).set("tag", name).set("associations", associations.len());
        }
        StoreCmd::Read(opts) => {
            let store = ctx.open_store(false)?;
            let rs = if opts.folder.is_none() {
                store.dump()?
            } else {
                store.read_query(&canonical_query(&opts)?)?
            };
            output::result_set(&mut out, &rs);
        }
        StoreCmd::Snapshot { out: path, selection: sel } => {
            let store = ctx.open_store(false)?;
            let digest = store.snapshot_to(&selection(&sel)?, &path)?;
            let size = fs::metadata(&path)?.len();
            out.set("snapshot", path.display()).set("size", size).set("digest", digest);
        }
        StoreCmd::Scrub => {
            let store = ctx.open_store(false)?;
            let report = store.scrub()?;
            output::verification(&mut out, &report);
            if !report.pass() {
                ctx.emit(&out)?;
                return Err(CliError::VerificationFailed(format!("{} of {} checks failed", report.failed(), report.items.len())).into());
            }
        }
    }
    Ok(out)
}

fn role_name(role: PartitionRole) -> &'static str {
    match role {
        PartitionRole::Online => "online",
        PartitionRole::Offline => "offline",
        PartitionRole::Simulation => "simulation",
    }
}
