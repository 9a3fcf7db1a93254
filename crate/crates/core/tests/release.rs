use std::collections::BTreeSet;
use std::path::Path;

use iovstore_core::integrity::ContentDigest;
use iovstore_core::model::{IovInterval, ModelError, NodePath, TagName, ValidityPoint};
use iovstore_core::query::{CanonicalQuery, ConditionsRead, ReadError};
use iovstore_core::release::{
    build_slice, catalog_lookup, open_slice, verify_slice, BuildOptions, ReleaseError, Verify,
};
use iovstore_core::store::{
    CommitPayload, CommitRequest, FolderSelection, PartitionRole, Selection, Store, StoreOptions,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn p(s: &str) -> NodePath {
    NodePath::parse(s).unwrap()
}

fn t(s: &str) -> TagName {
    TagName::new(s).unwrap()
}

fn one_record(dir: &Path) -> Store {
    let store = Store::init(dir, "one", StoreOptions::fast()).unwrap();
    store.create_partition("p", PartitionRole::Offline, p("geo")).unwrap();
    store.create_folder("p", p("geo/f"), "align", &[]).unwrap();
    store
        .commit(CommitRequest::inline(p("geo/f"), t("v1"), 0, b"payload".to_vec()))
        .unwrap();
    store
}

/// A simulation partition whose folders reference `datasets` external files.
fn mc_store(dir: &Path, datasets: usize) -> Store {
    let store = Store::init(dir, "mc", StoreOptions::fast()).unwrap();
    store.create_partition("sim", PartitionRole::Simulation, p("mc")).unwrap();
    for d in 0..datasets {
        let folder = p(&format!("mc/set{:02}", d % 5));
        if d < 5 {
            store.create_folder("sim", folder.clone(), "pool-ref", &[]).unwrap();
        }
        let name = format!("datasets/ds{d:02}.root");
        let data: Vec<u8> = (0..3000 + d * 17).map(|i| (i * 31 + d) as u8).collect();
        let (digest, size) = store.register_external(&name, &data).unwrap();
        let req = CommitRequest {
            payload: CommitPayload::External {
                logical_name: name,
                digest,
                size,
            },
            ..CommitRequest::inline(folder, t("mc-v1"), (d / 5) as u64 * 1000, vec![])
        };
        store.commit(req).unwrap();
    }
    store
}

fn mixed_store(dir: &Path) -> Store {
    let store = Store::init(dir, "mixed", StoreOptions::fast()).unwrap();
    store.create_partition("on", PartitionRole::Online, p("det")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..6 {
        let f = p(&format!("det/f{i}"));
        store.create_folder("on", f.clone(), "calib", &[0, 3]).unwrap();
        let mut since = 0;
        for _ in 0..40 {
            since += rng.random_range(1..50);
            let len = rng.random_range(0..300);
            let data: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let ch = if rng.random_bool(0.5) { 0 } else { 3 };
            let _ = store.commit(CommitRequest::inline(f.clone(), t("v1"), since, data).on_channel(ch));
        }
    }
    store
}

#[test]
fn minimal_slice_has_three_members() {
    let dir = tempfile::tempdir().unwrap();
    let store = one_record(&dir.path().join("store"));
    let out = dir.path().join("s.tar");
    let m = build_slice(&store, &Selection::everything(), &out, &BuildOptions::default()).unwrap();
    let names: Vec<&str> = m.entries.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names, ["catalog.txt", "snapshot.iov"]);
    let h = open_slice(&out, Verify::Eager).unwrap();
    assert_eq!(h.manifest(), &m);
    assert!(h.catalog().is_empty());
    assert!(verify_slice(&out).unwrap().pass());

    // A generic tar reader sees exactly three members.
    let mut ar = tar::Archive::new(std::fs::File::open(&out).unwrap());
    let members: Vec<String> = ar
        .entries()
        .unwrap()
        .map(|e| e.unwrap().path().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(members, ["MANIFEST", "catalog.txt", "snapshot.iov"]);
}

#[test]
fn builds_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("store");
    let store = mc_store(&root, 7);
    let sel = Selection {
        iov_range: IovInterval::new(ValidityPoint(0), ValidityPoint(1500)).unwrap(),
        ..Selection::everything()
    };
    let opts = BuildOptions { created: 1_234, ..Default::default() };
    build_slice(&store, &sel, &dir.path().join("a.tar"), &opts).unwrap();
    drop(store);
    let store = Store::open(&root, StoreOptions::read_only()).unwrap();
    build_slice(&store, &sel, &dir.path().join("b.tar"), &opts).unwrap();
    let a = std::fs::read(dir.path().join("a.tar")).unwrap();
    let b = std::fs::read(dir.path().join("b.tar")).unwrap();
    assert_eq!(ContentDigest::of(&a), ContentDigest::of(&b));
    assert_eq!(a, b);
}

#[test]
fn catalog_covers_every_external_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let store = mc_store(&dir.path().join("store"), 25);
    let out = dir.path().join("mc.tar");
    let sel = Selection {
        folders: FolderSelection::List(vec![p("mc/set00"), p("mc/set01"), p("mc/set02"), p("mc/set03"), p("mc/set04")]),
        ..Selection::everything()
    };
    build_slice(&store, &sel, &out, &BuildOptions::default()).unwrap();
    let h = open_slice(&out, Verify::Eager).unwrap();
    let refs: BTreeSet<String> = h
        .dump()
        .unwrap()
        .rows
        .iter()
        .filter_map(|r| r.record.payload.logical_name().map(str::to_string))
        .collect();
    assert_eq!(refs.len(), 25);
    assert_eq!(h.catalog().len(), refs.len());
    for name in &refs {
        let bytes = catalog_lookup(&h, name).unwrap();
        assert_eq!(ContentDigest::of(&bytes), h.catalog().get(name).unwrap().digest);
    }
    assert!(matches!(
        catalog_lookup(&h, "datasets/none.root"),
        Err(ReleaseError::UnknownLogicalName(_))
    ));
}

#[test]
fn externals_can_be_left_out() {
    let dir = tempfile::tempdir().unwrap();
    let store = mc_store(&dir.path().join("store"), 3);
    let out = dir.path().join("lean.tar");
    let sel = Selection { include_external: false, ..Selection::everything() };
    let m = build_slice(&store, &sel, &out, &BuildOptions::default()).unwrap();
    assert_eq!(m.entries.len(), 2);
    let h = open_slice(&out, Verify::Eager).unwrap();
    assert_eq!(h.catalog().len(), 3);
    assert!(matches!(
        catalog_lookup(&h, "datasets/ds00.root"),
        Err(ReleaseError::NotBundled(_))
    ));
}

#[test]
fn missing_external_source_fails_the_build() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("store");
    let store = mc_store(&root, 3);
    let moved = dir.path().join("elsewhere");
    std::fs::create_dir_all(moved.join("datasets")).unwrap();
    std::fs::rename(
        root.join("external/datasets/ds01.root"),
        moved.join("datasets/ds01.root"),
    )
    .unwrap();
    let out = dir.path().join("x.tar");
    let err = build_slice(&store, &Selection::everything(), &out, &BuildOptions::default()).unwrap_err();
    assert!(matches!(err, ReleaseError::MissingExternalFile(ref n) if n == "datasets/ds01.root"));
    assert!(!out.exists());

    let opts = BuildOptions { external_roots: vec![moved.clone()], ..Default::default() };
    build_slice(&store, &Selection::everything(), &out, &opts).unwrap();

    std::fs::write(moved.join("datasets/ds01.root"), vec![0u8; 3017]).unwrap();
    let err = build_slice(&store, &Selection::everything(), &out, &opts).unwrap_err();
    assert!(matches!(err, ReleaseError::ExternalDigestMismatch { .. }));
}

#[test]
fn unknown_selection_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let store = one_record(&dir.path().join("store"));
    let out = dir.path().join("x.tar");
    let sel = Selection { folders: FolderSelection::List(vec![p("geo/nope")]), ..Selection::everything() };
    assert!(build_slice(&store, &sel, &out, &BuildOptions::default()).is_err());
    let sel = Selection::tagged(p("geo"), t("NOPE"));
    assert!(build_slice(&store, &sel, &out, &BuildOptions::default()).is_err());
}

#[test]
fn slice_matches_master_in_selection() {
    let dir = tempfile::tempdir().unwrap();
    let store = mixed_store(&dir.path().join("store"));
    let window = IovInterval::new(ValidityPoint(200), ValidityPoint(900)).unwrap();
    let sel = Selection { iov_range: window, ..Selection::everything() };
    let out = dir.path().join("s.tar");
    build_slice(&store, &sel, &out, &BuildOptions::default()).unwrap();
    let h = open_slice(&out, Verify::Eager).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..1000 {
        let f = p(&format!("det/f{}", rng.random_range(0..6)));
        let ch = [0, 3][rng.random_range(0..2)];
        let q = if i % 4 == 0 {
            let a = rng.random_range(200..899);
            let b = rng.random_range(a + 1..=900);
            CanonicalQuery::range(f.clone(), ch, f, t("v1"), IovInterval::new(ValidityPoint(a), ValidityPoint(b)).unwrap())
        } else {
            CanonicalQuery::point(f.clone(), ch, f, t("v1"), ValidityPoint(rng.random_range(200..900))).unwrap()
        };
        let master = store.read_query(&q).map(|r| r.encode()).map_err(|e| e.to_string());
        let slice = h.read_query(&q).map(|r| r.encode()).map_err(|e| e.to_string());
        assert_eq!(master, slice, "{}", q.to_path());
    }
    let q = CanonicalQuery::point(p("det/f0"), 0, p("det/f0"), t("v1"), ValidityPoint(950)).unwrap();
    assert!(matches!(
        h.read_query(&q),
        Err(ReadError::Model(ModelError::NoValidRecord { .. }))
    ));
}

#[test]
fn every_single_bit_flip_is_caught_on_open() {
    let dir = tempfile::tempdir().unwrap();
    let store = mc_store(&dir.path().join("store"), 1);
    let out = dir.path().join("small.tar");
    build_slice(&store, &Selection::everything(), &out, &BuildOptions::default()).unwrap();
    let pristine = std::fs::read(&out).unwrap();
    let bad = dir.path().join("bad.tar");
    let mut undetected = Vec::new();
    for bit in 0..pristine.len() * 8 {
        let mut bytes = pristine.clone();
        bytes[bit / 8] ^= 1 << (bit % 8);
        std::fs::write(&bad, &bytes).unwrap();
        match open_slice(&bad, Verify::Eager) {
            Err(ReleaseError::CorruptSlice(_)) | Err(ReleaseError::UnsupportedVersion(_)) => {}
            other => undetected.push((bit, format!("{other:?}"))),
        }
    }
    assert!(undetected.is_empty(), "{} undetected, first {:?}", undetected.len(), undetected.first());
}

#[test]
fn verify_reports_per_member() {
    let dir = tempfile::tempdir().unwrap();
    let store = mc_store(&dir.path().join("store"), 3);
    let out = dir.path().join("v.tar");
    build_slice(&store, &Selection::everything(), &out, &BuildOptions::default()).unwrap();
    let report = verify_slice(&out).unwrap();
    assert!(report.pass(), "{report}");

    // Truncate into the last member's data.
    let bytes = std::fs::read(&out).unwrap();
    let cut = bytes.len() - 1024 - 600;
    std::fs::write(&out, &bytes[..cut]).unwrap();
    let report = verify_slice(&out).unwrap();
    assert!(!report.item("external/datasets/ds02.root").unwrap().pass);
    for ok in ["MANIFEST", "catalog.txt", "snapshot.iov", "external/datasets/ds00.root", "external/datasets/ds01.root"] {
        assert!(report.item(ok).unwrap().pass, "{ok}");
    }
}

#[test]
fn random_flips_are_reported_by_verify() {
    let dir = tempfile::tempdir().unwrap();
    let store = mc_store(&dir.path().join("store"), 4);
    let out = dir.path().join("v.tar");
    build_slice(&store, &Selection::everything(), &out, &BuildOptions::default()).unwrap();
    let pristine = std::fs::read(&out).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bad = dir.path().join("bad.tar");
    for _ in 0..300 {
        let bit = rng.random_range(0..pristine.len() * 8);
        let mut bytes = pristine.clone();
        bytes[bit / 8] ^= 1 << (bit % 8);
        std::fs::write(&bad, &bytes).unwrap();
        assert!(!verify_slice(&bad).unwrap().pass(), "bit {bit}");
    }
}

#[test]
fn lookup_detects_in_place_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let store = mc_store(&dir.path().join("store"), 2);
    let out = dir.path().join("c.tar");
    build_slice(&store, &Selection::everything(), &out, &BuildOptions::default()).unwrap();
    let h = open_slice(&out, Verify::Lazy).unwrap();
    let good = catalog_lookup(&h, "datasets/ds01.root").unwrap();
    // Corrupt a byte inside the last member's data after opening.
    let mut bytes = std::fs::read(&out).unwrap();
    let pos = bytes.len() - 1024 - 512;
    let last_data_byte = (0..pos).rev().find(|&i| bytes[i] != 0).unwrap();
    bytes[last_data_byte] ^= 0x01;
    std::fs::write(&out, &bytes).unwrap();
    assert!(matches!(
        catalog_lookup(&h, "datasets/ds01.root"),
        Err(ReleaseError::CorruptMember(_))
    ));
    assert_eq!(good.len(), 3017);
    assert!(open_slice(&out, Verify::Eager).is_err());
}
