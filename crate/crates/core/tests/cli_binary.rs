use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hdd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn table(path: &Path) -> (String, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines
        .map(|l| l.split_whitespace().map(|t| t.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn print_config_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = hdd(&["--print-config"], dir.path());
    assert!(out.status.success());
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, &out.stdout).unwrap();
    let again = hdd(
        &["--config", cfg.to_str().unwrap(), "--print-config"],
        dir.path(),
    );
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn solve_with_oracle_check() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "level = 4\n[coefficient]\nkind = \"random\"\nlo = 0.1\nhi = 10.0\n[rhs]\nkind = \"expression\"\nname = \"bump\"\n[output]\ndir = \"out\"\n",
    )
    .unwrap();
    let out = hdd(
        &[
            "solve",
            "--config",
            "run.toml",
            "--seed",
            "3",
            "--threads",
            "2",
            "--check-oracle",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (header, rows) = table(&dir.path().join("out/report.txt"));
    assert_eq!(header, "rel_linf_err");
    assert!(rows[0][0] < 1e-10);
    let (header, rows) = table(&dir.path().join("out/solution.txt"));
    assert_eq!(header, "index x1 x2 u");
    assert_eq!(rows.len(), 289);
}

#[test]
fn bad_input_exits_non_zero() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "level = 40\n").unwrap();
    let out = hdd(&["solve", "--config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("level"));
    let out = hdd(&["solve", "--config", "missing.toml"], dir.path());
    assert!(!out.status.success());
    let out = hdd(&[], dir.path());
    assert!(!out.status.success());
}

#[test]
fn scaling_table_and_mode_contract() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "[scaling]\nlevels = [2, 3, 4]\n[output]\ndir = \"out\"\n",
    )
    .unwrap();
    let out = hdd(&["scaling", "--config", "run.toml"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (header, rows) = table(&dir.path().join("out/scaling.txt"));
    assert_eq!(header, "level n build_ms solve_ms peak_bytes");
    assert!(rows.windows(2).all(|w| w[1][1] > w[0][1]));
    let (_, modes) = table(&dir.path().join("out/scaling_modes.txt"));
    assert!(modes.iter().all(|r| r[2] < r[1]));
}

#[test]
fn bayes_commands_write_tables_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "level = 5\n[bayes]\nobs_depth = 3\ngrid_n = 41\nchain_length = 300\nburn_in = 50\nproposal_scale = 0.01\ntiming_batch = 4\n[output]\ndir = \"out\"\n",
    )
    .unwrap();
    let out = hdd(&["bayes-grid", "--config", "run.toml"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("mode [0.3"), "{stdout}");
    let (header, rows) = table(&dir.path().join("out/grid.txt"));
    assert_eq!(header, "z1 log_prior log_like log_post");
    assert_eq!(rows.len(), 41);
    let timing = fs::read_to_string(dir.path().join("out/timing.txt")).unwrap();
    let ms: Vec<f64> = timing
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(ms[0] <= ms[1], "{timing}");

    let out = hdd(
        &["bayes-mcmc", "--config", "run.toml", "--seed", "4"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (header, rows) = table(&dir.path().join("out/chain.txt"));
    assert_eq!(header, "iter z1 log_post accepted");
    assert_eq!(rows.len(), 300);
}

#[test]
fn subdomain_and_functionals_commands() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "level = 4\n[coefficient]\nkind = \"checkerboard\"\nblocks = 4\nvalues = [1.0, 100.0]\n[subdomain]\npath = \"0011\"\n[functionals]\ndepth = 2\npoints = [[0.5, 0.25]]\n[output]\ndir = \"out\"\n",
    )
    .unwrap();
    let out = hdd(
        &["subdomain", "--config", "run.toml", "--check-oracle"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (_, rows) = table(&dir.path().join("out/report.txt"));
    assert!(rows[0][0] < 1e-12);
    let out = hdd(
        &["functionals", "--config", "run.toml", "--check-oracle"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let (header, rows) = table(&dir.path().join("out/means.txt"));
    assert_eq!(header, "node depth x0 x1 y0 y1 mean");
    assert_eq!(rows.len(), 4);
    let (_, rows) = table(&dir.path().join("out/report.txt"));
    assert!(rows[0][0] < 1e-10);
}
