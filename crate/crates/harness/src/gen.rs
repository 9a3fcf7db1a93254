//! Deterministic synthetic conditions stores.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use iovstore_core::model::{ChannelId, NodePath, TagName, TagNode, DEFAULT_CHANNEL};
use iovstore_core::store::{CommitPayload, CommitRequest, PartitionRole, Store, StoreOptions};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::Deserialize;

use crate::HarnessError;

/// Tag defined at every folderset of a generated store.
pub const GLOBAL_TAG: &str = "GLOBAL-01";
/// Leaf tag of every generated sequence.
pub const LEAF_TAG: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StorePreset {
    /// One folder, one record.
    Minimal,
    /// 872 mostly static folders totalling about 33 MB.
    Geometry,
    /// 15 subsystems with online and offline partitions, about 82 MB of
    /// run-dependent calibrations.
    Reco,
    /// 25 external simulation datasets plus inline calibrations.
    Mc,
}

impl StorePreset {
    pub const ALL: [StorePreset; 4] = [
        StorePreset::Minimal,
        StorePreset::Geometry,
        StorePreset::Reco,
        StorePreset::Mc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StorePreset::Minimal => "minimal",
            StorePreset::Geometry => "geometry",
            StorePreset::Reco => "reco",
            StorePreset::Mc => "mc",
        }
    }
}

impl fmt::Display for StorePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StorePreset {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StorePreset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| HarnessError::Unknown {
                what: "store preset",
                name: s.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StoreSpec {
    pub preset: StorePreset,
    /// Multiplies payload volumes; 1.0 gives the nominal sizes.
    pub scale: f64,
}

impl StoreSpec {
    pub fn new(preset: StorePreset) -> Self {
        Self { preset, scale: 1.0 }
    }

    pub fn scaled(preset: StorePreset, scale: f64) -> Self {
        Self { preset, scale }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.scale.is_finite() && self.scale > 0.0 && self.scale <= 4.0) {
            return Err(HarnessError::InvalidConfig(format!(
                "store scale must be in (0, 4], got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// What the generator wrote for one sequence, enough to build queries and
/// predict their payload sizes without reading the store.
#[derive(Debug, Clone)]
pub struct FolderUniverse {
    pub folder: NodePath,
    pub channel: ChannelId,
    pub leaf_tag: TagName,
    pub sinces: Vec<u64>,
    pub sizes: Vec<u64>,
    /// Payloads are external files; results carry no inline bytes.
    pub external: bool,
}

impl FolderUniverse {
    /// End of record `i`, with the last record ending at `horizon`.
    pub fn until(&self, i: usize, horizon: u64) -> u64 {
        self.sinces.get(i + 1).copied().unwrap_or(horizon)
    }

    /// Inline bytes a point query on record `i` returns.
    pub fn inline_bytes(&self, i: usize) -> u64 {
        if self.external {
            0
        } else {
            self.sizes[i]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreReport {
    pub preset: StorePreset,
    pub partitions: usize,
    pub folders: usize,
    pub records: usize,
    pub payload_bytes: u64,
    pub externals: usize,
    pub external_bytes: u64,
}

impl StoreReport {
    pub fn lines(&self) -> Vec<(String, String)> {
        vec![
            ("store.preset".into(), self.preset.to_string()),
            ("store.partitions".into(), self.partitions.to_string()),
            ("store.folders".into(), self.folders.to_string()),
            ("store.records".into(), self.records.to_string()),
            ("store.payload-bytes".into(), self.payload_bytes.to_string()),
            ("store.externals".into(), self.externals.to_string()),
            ("store.external-bytes".into(), self.external_bytes.to_string()),
        ]
    }
}

pub struct GeneratedStore {
    pub store: Store,
    pub report: StoreReport,
    pub universe: Vec<FolderUniverse>,
    /// Query points are drawn below this validity point.
    pub horizon: u64,
}

impl GeneratedStore {
    pub fn global_tag(&self) -> TagName {
        TagName::new(GLOBAL_TAG).expect("constant tag name")
    }
}

struct FolderPlan {
    path: NodePath,
    sinces: Vec<u64>,
    sizes: Vec<u64>,
    external: bool,
}

struct PartitionPlan {
    name: String,
    role: PartitionRole,
    root: NodePath,
    folders: Vec<FolderPlan>,
}

struct Plan {
    partitions: Vec<PartitionPlan>,
    horizon: u64,
}

fn path(s: &str) -> NodePath {
    NodePath::parse(s).expect("generated paths are valid")
}

/// `n` log-normal sizes rescaled to sum to `total`, each at least 1.
fn sizes<R: Rng>(rng: &mut R, n: usize, total: u64, sigma: f64) -> Vec<u64> {
    let d = LogNormal::new(0.0, sigma).expect("valid log-normal");
    let raw: Vec<f64> = (0..n).map(|_| d.sample(rng)).collect();
    let sum: f64 = raw.iter().sum();
    raw.iter()
        .map(|r| ((r / sum) * total as f64).round().max(1.0) as u64)
        .collect()
}

/// `n` distinct sorted since values starting at 0 and below `horizon`.
fn sinces<R: Rng>(rng: &mut R, n: usize, horizon: u64) -> Vec<u64> {
    let mut set = std::collections::BTreeSet::from([0u64]);
    while set.len() < n {
        set.insert(rng.random_range(1..horizon));
    }
    set.into_iter().collect()
}

fn plan(spec: &StoreSpec, rng: &mut ChaCha8Rng) -> Plan {
    let scaled = |bytes: f64| (bytes * spec.scale).round().max(1.0) as u64;
    match spec.preset {
        StorePreset::Minimal => Plan {
            partitions: vec![PartitionPlan {
                name: "main".into(),
                role: PartitionRole::Offline,
                root: path("COND"),
                folders: vec![FolderPlan {
                    path: path("COND/F0"),
                    sinces: vec![0],
                    sizes: vec![64],
                    external: false,
                }],
            }],
            horizon: 1000,
        },
        StorePreset::Geometry => {
            const FOLDERS: usize = 872;
            const SETS: usize = 29;
            let horizon = 2_000_000;
            let mut shapes: Vec<Vec<u64>> = (0..FOLDERS)
                .map(|i| if i % 7 == 0 { vec![0, 1_000_000] } else { vec![0] })
                .collect();
            let n_records: usize = shapes.iter().map(Vec::len).sum();
            let mut all = sizes(rng, n_records, scaled(33_000_000.0), 1.0).into_iter();
            let folders = shapes
                .iter_mut()
                .enumerate()
                .map(|(i, s)| FolderPlan {
                    path: path(&format!("GEO/S{:02}/T{i:03}", i % SETS)),
                    sizes: s.iter().map(|_| all.next().expect("one size per record")).collect(),
                    sinces: std::mem::take(s),
                    external: false,
                })
                .collect();
            Plan {
                partitions: vec![PartitionPlan {
                    name: "geometry".into(),
                    role: PartitionRole::Offline,
                    root: path("GEO"),
                    folders,
                }],
                horizon,
            }
        }
        StorePreset::Reco => {
            const SUBSYSTEMS: [&str; 15] = [
                "PIXEL", "SCT", "TRT", "LAR", "TILE", "MDT", "RPC", "TGC", "CSC", "TDAQ", "GLOBAL", "TRIGGER",
                "INDET", "CALO", "MUON",
            ];
            const FOLDERS: [&str; 7] = ["CALIB", "ALIGN", "HV", "LV", "TEMP", "STATUS", "MAP"];
            const RECORDS: usize = 60;
            let horizon = 200_000;
            let n_records = SUBSYSTEMS.len() * 2 * FOLDERS.len() * RECORDS;
            let mut all = sizes(rng, n_records, scaled(82_000_000.0), 0.8).into_iter();
            let mut partitions = Vec::new();
            for sub in SUBSYSTEMS {
                for (suffix, role) in [("ONL", PartitionRole::Online), ("OFL", PartitionRole::Offline)] {
                    let root = format!("{sub}_{suffix}");
                    let folders = FOLDERS
                        .iter()
                        .map(|f| FolderPlan {
                            path: path(&format!("{root}/{f}")),
                            sinces: sinces(rng, RECORDS, horizon),
                            sizes: (0..RECORDS).map(|_| all.next().expect("one size per record")).collect(),
                            external: false,
                        })
                        .collect();
                    partitions.push(PartitionPlan {
                        name: root.to_lowercase().replace('_', "-"),
                        role,
                        root: path(&root),
                        folders,
                    });
                }
            }
            Plan { partitions, horizon }
        }
        StorePreset::Mc => {
            const SETS: [&str; 5] = ["GEN", "SIM", "DIGI", "RECO", "PILEUP"];
            let horizon = 100_000;
            let mut ext = sizes(rng, 25, scaled(8_000_000.0), 0.7).into_iter();
            let mut folders = Vec::new();
            for set in SETS {
                for j in 0..5 {
                    folders.push(FolderPlan {
                        path: path(&format!("MC/{set}/DS{j}")),
                        sinces: vec![0],
                        sizes: vec![ext.next().expect("25 datasets")],
                        external: true,
                    });
                }
            }
            let mut inline = sizes(rng, 20 * 5, scaled(1_000_000.0), 0.7).into_iter();
            for i in 0..20 {
                folders.push(FolderPlan {
                    path: path(&format!("MC/CALIB/F{i:02}")),
                    sinces: sinces(rng, 5, horizon),
                    sizes: (0..5).map(|_| inline.next().expect("one size per record")).collect(),
                    external: false,
                });
            }
            Plan {
                partitions: vec![PartitionPlan {
                    name: "sim".into(),
                    role: PartitionRole::Simulation,
                    root: path("MC"),
                    folders,
                }],
                horizon,
            }
        }
    }
}

fn logical_name(folder: &NodePath) -> String {
    format!("datasets/{}.pool", folder.components().join("."))
}

/// Creates a new store at `dir` filled according to `spec`. The same spec
/// and seed always give the same store contents.
pub fn gen_store(dir: &Path, spec: &StoreSpec, seed: u64) -> Result<GeneratedStore, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = plan(spec, &mut rng);
    let store = Store::init(dir, &format!("gen-{}-{seed:016x}", spec.preset), StoreOptions::fast())?;
    let leaf = TagName::new(LEAF_TAG).expect("constant tag name");
    let global = TagName::new(GLOBAL_TAG).expect("constant tag name");

    let mut report = StoreReport {
        preset: spec.preset,
        partitions: plan.partitions.len(),
        folders: 0,
        records: 0,
        payload_bytes: 0,
        externals: 0,
        external_bytes: 0,
    };
    let mut universe = Vec::new();
    let mut buf = Vec::new();
    for part in &plan.partitions {
        store.create_partition(&part.name, part.role, part.root.clone())?;
        for f in &part.folders {
            store.create_folder(&part.name, f.path.clone(), "blob", &[DEFAULT_CHANNEL])?;
            report.folders += 1;
            for (&since, &size) in f.sinces.iter().zip(&f.sizes) {
                buf.resize(size as usize, 0);
                rng.fill_bytes(&mut buf);
                let mut req = CommitRequest::inline(f.path.clone(), leaf.clone(), since, Vec::new());
                if f.external {
                    let name = logical_name(&f.path);
                    let (digest, size) = store.register_external(&name, &buf)?;
                    req.payload = CommitPayload::External {
                        logical_name: name,
                        digest,
                        size,
                    };
                    report.externals += 1;
                    report.external_bytes += size;
                } else {
                    req.payload = CommitPayload::Inline(buf.clone());
                    report.payload_bytes += size;
                }
                req.author = "generator".into();
                store.commit(req)?;
                report.records += 1;
            }
            universe.push(FolderUniverse {
                folder: f.path.clone(),
                channel: DEFAULT_CHANNEL,
                leaf_tag: leaf.clone(),
                sinces: f.sinces.clone(),
                sizes: f.sizes.clone(),
                external: f.external,
            });
        }
    }

    let mut sets: BTreeMap<NodePath, BTreeMap<String, TagName>> = BTreeMap::new();
    for u in &universe {
        let mut child = u.folder.clone();
        let mut target = leaf.clone();
        while let Some(parent) = child.parent() {
            let name = child.name().expect("non-root has a name").to_string();
            sets.entry(parent.clone()).or_default().insert(name, target);
            target = global.clone();
            child = parent;
        }
    }
    let mut owners: Vec<_> = sets.into_iter().collect();
    owners.sort_by_key(|(owner, _)| std::cmp::Reverse(owner.depth()));
    for (owner, associations) in owners {
        store.define_tag(TagNode {
            owner,
            name: global.clone(),
            associations,
        })?;
    }
    store.checkpoint()?;
    Ok(GeneratedStore {
        store,
        report,
        universe,
        horizon: plan.horizon,
    })
}
