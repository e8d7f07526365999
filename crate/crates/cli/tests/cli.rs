use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn matchucb(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matchucb"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MATCHUCB_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_fills_defaults() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "experiment = \"synthetic\"\n").unwrap();
    let out = matchucb(&["validate", "c.toml"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("tau0 = 50"), "{text}");
    assert!(text.contains("zeta = 1"), "{text}");
}

#[test]
fn validate_rejects_negative_zeta_and_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "experiment = \"example1\"\nzeta = -1\n",
    )
    .unwrap();
    let out = matchucb(&["validate", "c.toml"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("zeta"));

    fs::write(
        dir.path().join("u.toml"),
        "experiment = \"example1\"\nepochs = 3\n[example1]\neps = 0.1\n",
    )
    .unwrap();
    let out = matchucb(&["validate", "u.toml"], dir.path());
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(
        err.contains("epochs") && err.contains("example1.eps"),
        "{err}"
    );
}

#[test]
fn validate_rejects_hungarian_on_binding_capacities() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "experiment = \"synthetic\"\nvariants = [\"H_EUCB\"]\n[synthetic]\nm = 2\nclass_of = [0, 0, 0, 0]\ncapacities = [1]\n",
    )
    .unwrap();
    let out = matchucb(&["validate", "c.toml"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("non-binding"));
}

#[test]
fn flags_override_file_keys() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "experiment = \"synthetic\"\ntau0 = 7\n[synthetic]\nm = 4\n",
    )
    .unwrap();
    let out = matchucb(
        &[
            "validate",
            "c.toml",
            "--tau0",
            "9",
            "--set",
            "synthetic.m=3",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("tau0 = 9"), "{text}");
    assert!(text.contains("m = 3"), "{text}");
}

#[test]
fn missing_trips_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "experiment = \"bikeshare\"\n[bikeshare]\ntrips_csv = \"nope.csv\"\n",
    )
    .unwrap();
    let out = matchucb(&["validate", "c.toml"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("nope.csv"));
}

#[test]
fn run_writes_artifacts_to_env_dir_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "experiment = \"example1\"\nvariants = [\"C_UCB\", \"MG_EUCB\"]\nn_epochs = 40\nseeds = [1, 2]\ntau0 = 5\n";
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let run = |target: &str| {
        Command::new(env!("CARGO_BIN_EXE_matchucb"))
            .args(["run", "c.toml"])
            .current_dir(dir.path())
            .env("MATCHUCB_OUTPUT_DIR", target)
            .output()
            .unwrap()
    };
    let a = run("a");
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run("b");
    assert!(b.status.success(), "{}", stderr(&b));
    for f in [
        "summary.csv",
        "runs/C_UCB_seed1.csv",
        "runs/MG_EUCB_seed2.csv",
    ] {
        let x = fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(x, fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let summary = dir.path().join("a/summary.csv");
    let mut reader = csv::Reader::from_path(&summary).unwrap();
    assert_eq!(&reader.headers().unwrap()[0], "variant");
    // Initial cover epochs come on top of n_epochs.
    assert!(reader.records().count() >= 80);
    assert!(fs::read_to_string(&summary).unwrap().contains("\r\n"));
    assert!(dir.path().join("a/manifest.json").exists());
}

#[test]
fn output_flag_beats_config_and_env() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "experiment = \"matching-audit\"\noutput_dir = \"from_file\"\n[audit]\ninstances = 10\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_matchucb"))
        .args(["run", "c.toml", "-o", "from_flag"])
        .current_dir(dir.path())
        .env("MATCHUCB_OUTPUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("from_flag/audit.csv").exists());
    assert!(!dir.path().join("from_file").exists());

    let out = Command::new(env!("CARGO_BIN_EXE_matchucb"))
        .args(["run", "c.toml"])
        .current_dir(dir.path())
        .env("MATCHUCB_OUTPUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("from_file/audit.csv").exists());
    assert!(!dir.path().join("from_env").exists());
}

#[test]
fn audit_matching_reports_no_violations() {
    let dir = tempfile::tempdir().unwrap();
    let out = matchucb(
        &["audit-matching", "--instances", "200", "-o", "audit"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("violations\t0"), "{}", stdout(&out));
    let mut reader = csv::Reader::from_path(dir.path().join("audit/audit_histogram.csv")).unwrap();
    let total: usize = reader
        .records()
        .map(|r| r.unwrap()[2].parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 200);
}

#[test]
fn ingest_trips_writes_flows_and_world() {
    let dir = tempfile::tempdir().unwrap();
    let trips = "start_station_id,end_station_id,start_time,start_lat,start_lon,end_lat,end_lon\n\
A,B,2017-06-01 12:10:00,42.0,-71.0,42.01,-71.0\n\
A,B,2017-06-02 12:20:00,42.0,-71.0,42.01,-71.0\n\
B,A,2017-06-02 12:30:00,42.01,-71.0,42.0,-71.0\n\
B,A,2017-06-02 18:30:00,42.01,-71.0,42.0,-71.0\n";
    fs::write(dir.path().join("trips.csv"), trips).unwrap();
    let out = matchucb(&["ingest-trips", "trips.csv", "-o", "ing"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(
        stdout(&out).contains("4 rows read, 3 in window"),
        "{}",
        stdout(&out)
    );
    let mut reader = csv::Reader::from_path(dir.path().join("ing/flows.csv")).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["origin", "dest", "mean_rate"]
    );
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert!(dir.path().join("ing/world.json").exists());

    let out = matchucb(
        &["ingest-trips", "trips.csv", "--window-start", "noon"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("noon"));
}

#[test]
fn run_without_config_needs_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let out = matchucb(&["run"], dir.path());
    assert!(!out.status.success());
    let out = matchucb(
        &[
            "run",
            "--experiment",
            "matching-audit",
            "--set",
            "audit.instances=5",
            "-o",
            "x",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("x/manifest.json").exists());
}

#[test]
fn bundled_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            n += 1;
            let out = matchucb(&["validate", path.to_str().unwrap()], &dir);
            assert!(out.status.success(), "{}: {}", path.display(), stderr(&out));
        }
    }
    assert_eq!(n, 4);
}
