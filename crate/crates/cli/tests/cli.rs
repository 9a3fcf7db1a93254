use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_iovstore");

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self) -> Command {
        let mut c = Command::new(BIN);
        c.env("IOVSTORE_HOME", self.path("store")).env_remove("RUST_LOG");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd().args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn machine(&self, args: &[&str]) -> BTreeMap<String, String> {
        let mut full = vec!["--format", "machine"];
        full.extend_from_slice(args);
        parse_machine(&self.ok(&full))
    }

    fn populated(self) -> Self {
        self.ok(&["store", "init", "--id", "golden"]);
        self.ok(&["store", "create-partition", "det", "--role", "offline", "--root", "/DET"]);
        self.ok(&["store", "create-folder", "det", "/DET/CALIB", "--channels", "0,1"]);
        self.ok(&["store", "commit", "/DET/CALIB", "--tag", "v1", "--since", "100", "--data", "alpha"]);
        self.ok(&["store", "commit", "/DET/CALIB", "--tag", "v1", "--since", "200", "--data", "beta"]);
        self.ok(&[
            "store", "commit", "/DET/CALIB", "--tag", "v1", "--since", "300", "--data", "gamma", "--channel", "1",
        ]);
        self
    }
}

fn parse_machine(s: &str) -> BTreeMap<String, String> {
    s.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Server started with `--listen 127.0.0.1:0`; stopped with SIGINT on drop.
struct Server {
    child: Child,
    url: String,
}

impl Server {
    fn start(mut cmd: Command) -> Self {
        let mut child = cmd
            .args(["--format", "machine", "--listen", "127.0.0.1:0"])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
        let url = line
            .trim()
            .strip_prefix("listen=")
            .unwrap_or_else(|| panic!("unexpected first line '{line}'"))
            .to_string();
        Self { child, url }
    }

    fn interrupt(&mut self) -> i32 {
        Command::new("kill")
            .args(["-INT", &self.child.id().to_string()])
            .status()
            .unwrap();
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status.code().unwrap_or(-1);
            }
            assert!(Instant::now() < deadline, "server did not stop");
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn read_on_empty_store_succeeds() {
    let env = Env::new();
    env.ok(&["store", "init", "--id", "empty"]);
    let m = env.machine(&["store", "read"]);
    assert_eq!(m["rows"], "0");
}

#[test]
fn extend_only_violation_exits_with_policy_code() {
    let env = Env::new().populated();
    let out = env.run(&["store", "commit", "/DET/CALIB", "--tag", "v1", "--since", "150", "--data", "late"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("ExtendOnlyViolation"), "{}", stderr(&out));
    // The refused commit left nothing behind.
    assert_eq!(env.machine(&["store", "read"])["rows"], "3");
}

#[test]
fn not_found_and_usage_codes() {
    let env = Env::new().populated();
    let out = env.run(&["store", "read", "/DET/CALIB", "--tag", "v1", "--at", "50"]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("NoValidRecord"));
    let out = env.run(&["store", "read", "/DET/NOPE", "--tag", "v1", "--at", "150"]);
    assert_eq!(code(&out), 5);
    let out = env.run(&["store", "read", "/DET/CALIB", "--tag", "v1"]);
    assert_eq!(code(&out), 2);
    assert_eq!(code(&env.run(&["no-such-command"])), 2);
}

#[test]
fn missing_store_is_not_found() {
    let env = Env::new();
    let out = env.run(&["store", "info"]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));
}

#[test]
fn golden_machine_output_and_snapshot_equivalence() {
    let env = Env::new().populated();
    let m = env.machine(&["store", "read", "/DET/CALIB", "--tag", "v1", "--at", "150"]);
    let golden: BTreeMap<String, String> = [
        ("rows", "1"),
        ("row.0.folder", "DET/CALIB"),
        ("row.0.channel", "0"),
        ("row.0.tag", "v1"),
        ("row.0.since", "100"),
        ("row.0.until", "200"),
        ("row.0.kind", "inline"),
        ("row.0.size", "5"),
        // sha256("alpha")
        ("row.0.digest", "8ed3f6ad685b959ead7022518e1af76cd816f8e8ec7ccdda1ed4018e8f2223f8"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    assert_eq!(m, golden);

    let snap = env.path("all.iov");
    let s = env.machine(&["store", "snapshot", "--out", snap.to_str().unwrap()]);
    assert_eq!(s["size"], std::fs::metadata(&snap).unwrap().len().to_string());

    let store_ep = format!("store={}", env.path("store").display());
    let snap_ep = format!("snapshot={}", snap.display());
    let queries: [&[&str]; 4] = [
        &["/DET/CALIB", "--tag", "v1", "--at", "150"],
        &["/DET/CALIB", "--tag", "v1", "--at", "250"],
        &["/DET/CALIB", "--tag", "v1", "--from", "0", "--to", "open"],
        &["/DET/CALIB", "--tag", "v1", "--channel", "1", "--from", "250", "--to", "400"],
    ];
    for q in queries {
        let run = |ep: &str| {
            let mut args = vec!["query", "--endpoint", ep];
            args.extend_from_slice(q);
            let mut m = env.machine(&args);
            m.remove("backend");
            m.remove("origin-id");
            m
        };
        let a = run(&store_ep);
        let b = run(&snap_ep);
        assert_eq!(a, b, "query {q:?}");
        let mut direct = vec!["store", "read"];
        direct.extend_from_slice(q);
        let d = env.machine(&direct);
        for (k, v) in &d {
            assert_eq!(a.get(k), Some(v), "key {k} for {q:?}");
        }
    }
}

#[test]
fn hierarchical_tag_and_sliced_release() {
    let env = Env::new().populated();
    env.ok(&["store", "define-tag", "/DET", "PHYS-1", "CALIB=v1"]);
    let m = env.machine(&["store", "read", "/DET/CALIB", "--tag", "PHYS-1", "--start", "/DET", "--at", "250"]);
    assert_eq!(m["row.0.since"], "200");

    let ext = env.path("geom.db");
    std::fs::write(&ext, vec![7u8; 4096]).unwrap();
    env.ok(&["store", "create-partition", "geo", "--role", "simulation", "--root", "/GEO"]);
    env.ok(&["store", "create-folder", "geo", "/GEO/MAIN"]);
    env.ok(&[
        "store", "commit", "/GEO/MAIN", "--tag", "g1", "--since", "0", "--external", "geom/v1.db",
        "--external-file", ext.to_str().unwrap(),
    ]);

    let slice = env.path("release.tar");
    let b = env.machine(&["slice", "build", "--out", slice.to_str().unwrap(), "--created", "1700000000"]);
    let again = env.path("again.tar");
    let b2 = env.machine(&["slice", "build", "--out", again.to_str().unwrap(), "--created", "1700000000"]);
    assert_eq!(b["archive-digest"], b2["archive-digest"], "builds are reproducible");

    let v = env.machine(&["slice", "verify", slice.to_str().unwrap()]);
    assert_eq!(v["result"], "pass");
    let o = env.machine(&["slice", "open-check", slice.to_str().unwrap()]);
    assert_eq!(o["records"], "4");
    assert_eq!(o["catalog-entries"], "1");

    let cat = env.run(&["slice", "cat", slice.to_str().unwrap(), "geom/v1.db"]);
    assert!(cat.status.success());
    assert_eq!(cat.stdout, vec![7u8; 4096]);
    let missing = env.run(&["slice", "cat", slice.to_str().unwrap(), "geom/v2.db"]);
    assert_eq!(code(&missing), 5);

    let bad = env.path("bad.tar");
    let flip = format!("bitflip:{}", 512 * 3 + 10);
    env.ok(&["integrity", "inject", slice.to_str().unwrap(), &flip, bad.to_str().unwrap()]);
    let out = env.run(&["slice", "verify", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 6, "{}", stderr(&out));

    let ep = format!("slice={}", slice.display());
    let q = env.machine(&["query", "--endpoint", &ep, "/GEO/MAIN", "--tag", "g1", "--at", "5"]);
    assert_eq!(q["row.0.kind"], "external");
    assert_eq!(q["row.0.logical-name"], "geom/v1.db");
}

#[test]
fn serve_proxy_and_failover() {
    let env = Env::new().populated();
    let mut origin = Server::start({
        let mut c = env.cmd();
        c.arg("serve");
        c
    });
    let mut proxy = Server::start({
        let mut c = env.cmd();
        c.args(["proxy", "--upstream", &origin.url, "--cache-dir", env.path("cache").to_str().unwrap()]);
        c
    });
    let proxy_ep = format!("proxy={}", proxy.url);
    let q = ["/DET/CALIB", "--tag", "v1", "--at", "150"];
    let query = |eps: &[&str]| {
        let mut args = vec!["--format", "machine", "query"];
        for e in eps {
            args.extend_from_slice(&["--endpoint", e]);
        }
        args.extend_from_slice(&q);
        env.run(&args)
    };
    let first = parse_machine(&String::from_utf8(query(&[&proxy_ep]).stdout).unwrap());
    assert_eq!(first["cache"], "miss");
    let second = parse_machine(&String::from_utf8(query(&[&proxy_ep]).stdout).unwrap());
    assert_eq!(second["cache"], "hit");
    assert_eq!(first["row.0.digest"], second["row.0.digest"]);

    assert_eq!(origin.interrupt(), 0);

    // Cached answers survive the origin going away; new ones fail over.
    let cached = query(&[&proxy_ep]);
    assert!(cached.status.success());
    let uncached = ["/DET/CALIB", "--tag", "v1", "--at", "250"];
    let mut args = vec!["query", "--endpoint", &proxy_ep];
    args.extend_from_slice(&uncached);
    let out = env.run(&args);
    assert_eq!(code(&out), 7, "{}", stderr(&out));
    assert!(stderr(&out).contains("AllBackendsFailed"));

    let store_ep = format!("store={}", env.path("store").display());
    args = vec!["--format", "machine", "query", "--endpoint", &proxy_ep, "--endpoint", &store_ep];
    args.extend_from_slice(&uncached);
    let m = parse_machine(&String::from_utf8(env.run(&args).stdout).unwrap());
    assert_eq!(m["row.0.since"], "200");
    assert!(m["backend"].starts_with("store:"));

    assert_eq!(proxy.interrupt(), 0);
}

#[test]
fn proxy_with_dead_upstream_is_unavailable() {
    let env = Env::new();
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", dead.local_addr().unwrap());
    drop(dead);
    let proxy = Server::start({
        let mut c = env.cmd();
        c.args(["proxy", "--upstream", &url, "--cache-dir", env.path("cache").to_str().unwrap()]);
        c
    });
    let ep = format!("proxy={}", proxy.url);
    let out = env.run(&["query", "--endpoint", &ep, "/A/B", "--tag", "t", "--at", "1"]);
    assert_eq!(code(&out), 7, "{}", stderr(&out));
}

#[test]
fn config_file_is_strict_and_supplies_defaults() {
    let env = Env::new().populated();
    let bad = env.path("bad.toml");
    std::fs::write(&bad, "store = \"x\"\nunknown-key = 1\n").unwrap();
    let out = env.run(&["--config", bad.to_str().unwrap(), "store", "info"]);
    assert_eq!(code(&out), 2);

    let bad_addr = env.path("addr.toml");
    std::fs::write(&bad_addr, "[serve]\nlisten = \"nowhere\"\n").unwrap();
    assert_eq!(code(&env.run(&["--config", bad_addr.to_str().unwrap(), "store", "info"])), 2);

    let good = env.path("good.toml");
    std::fs::write(
        &good,
        format!(
            "store = {:?}\nformat = \"machine\"\n[query]\nendpoints = [{:?}]\n",
            env.path("store").display().to_string(),
            format!("store={}", env.path("store").display())
        ),
    )
    .unwrap();
    let out = Command::new(BIN)
        .env_remove("IOVSTORE_HOME")
        .args(["--config", good.to_str().unwrap(), "query", "/DET/CALIB", "--tag", "v1", "--at", "150"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(parse_machine(&String::from_utf8(out.stdout).unwrap())["row.0.since"], "100");

    // Flags take precedence over the config file.
    let out = Command::new(BIN)
        .env_remove("IOVSTORE_HOME")
        .args(["--config", good.to_str().unwrap(), "--format", "text", "store", "info"])
        .output()
        .unwrap();
    assert!(String::from_utf8(out.stdout).unwrap().contains("id  "));
}

#[test]
fn integrity_commands() {
    let env = Env::new();
    let input = env.path("raw.bin");
    let data: Vec<u8> = (0..200_000u32).map(|i| (i.wrapping_mul(2654435761) >> 24) as u8).collect();
    std::fs::write(&input, &data).unwrap();
    let produced = env.path("out.dat");
    let p = env.machine(&[
        "integrity", "produce", input.to_str().unwrap(), produced.to_str().unwrap(), "--buffer-kib", "32",
    ]);
    assert_eq!(p["result"], "pass");
    // 7 buffers of at most 32 KiB plus the whole file.
    assert_eq!(p["entries"], "8");
    let manifest = format!("{}.manifest", produced.display());
    assert!(Path::new(&manifest).exists());
    assert_eq!(
        env.machine(&["integrity", "verify", produced.to_str().unwrap(), "--manifest", &manifest])["result"],
        "pass"
    );

    let bad = env.path("bad.dat");
    env.ok(&["integrity", "inject", produced.to_str().unwrap(), "bitflip:100", bad.to_str().unwrap()]);
    let out = env.run(&[
        "integrity", "verify", bad.to_str().unwrap(), "--manifest", &manifest, "--name", "out.dat",
    ]);
    assert_eq!(code(&out), 6);
    let short = env.path("short.dat");
    env.ok(&["integrity", "inject", produced.to_str().unwrap(), "truncate:1000", short.to_str().unwrap()]);
    let out = env.run(&[
        "integrity", "verify", short.to_str().unwrap(), "--manifest", &manifest, "--name", "out.dat",
    ]);
    assert_eq!(code(&out), 6);

    let accept = env.machine(&["integrity", "transfer-check", produced.to_str().unwrap(), produced.to_str().unwrap()]);
    assert_eq!(accept["decision"], "accept");
    let out = env.run(&["--format", "machine", "integrity", "transfer-check", produced.to_str().unwrap(), bad.to_str().unwrap()]);
    assert_eq!(code(&out), 6);
    assert_eq!(parse_machine(&String::from_utf8(out.stdout).unwrap())["decision"], "reject-and-retry");
    let out = env.run(&[
        "--format", "machine", "integrity", "transfer-check", produced.to_str().unwrap(), bad.to_str().unwrap(),
        "--attempt", "3",
    ]);
    assert_eq!(code(&out), 6);
    assert_eq!(parse_machine(&String::from_utf8(out.stdout).unwrap())["decision"], "reject");

    let d = env.machine(&["integrity", "digest", input.to_str().unwrap()]);
    let hex = d["digest"].strip_prefix("sha256:").unwrap().to_string();
    assert_eq!(
        env.machine(&["integrity", "transfer-check", &hex, input.to_str().unwrap()])["decision"],
        "accept"
    );
    assert_eq!(code(&env.run(&["integrity", "inject", input.to_str().unwrap(), "melt:3", bad.to_str().unwrap()])), 2);
}

#[test]
fn scenario_list_and_empty_run() {
    let env = Env::new();
    let list = env.machine(&["scenario", "list"]);
    assert_eq!(list["scenario.frontier-speedup"], "frontier-speedup");
    let report = env.path("empty.report");
    let m = env.machine(&["scenario", "run", "empty", "--report", report.to_str().unwrap()]);
    assert_eq!(m["result"], "pass");
    assert_eq!(std::fs::read_to_string(&report).unwrap().lines().count(), m.len());
}

#[test]
fn scenario_with_failing_check_exits_8() {
    let env = Env::new();
    let file = env.path("strict.toml");
    std::fs::write(
        &file,
        "name = \"strict\"\nseed = 3\nversion = 1\n\n[experiment]\nkind = \"fluctuation\"\nbins = 2000\nrate = 50.0\nk = 4.0\npoisson-tolerance = 0.0\noverdispersed-tolerance = 0.0\n",
    )
    .unwrap();
    let out = env.run(&["scenario", "run", "--file", file.to_str().unwrap()]);
    assert_eq!(code(&out), 8, "{}", stderr(&out));
}

#[test]
fn frontier_speedup_scenario_reports_speedup() {
    let env = Env::new();
    let report = env.path("speedup.report");
    let out = env.run(&["--format", "machine", "scenario", "run", "frontier-speedup", "--report", report.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m = parse_machine(&std::fs::read_to_string(&report).unwrap());
    let speedup: f64 = m["speedup"].parse().unwrap();
    assert!(speedup >= 3.0, "speedup {speedup}");
    assert_eq!(m["result"], "pass");
}
