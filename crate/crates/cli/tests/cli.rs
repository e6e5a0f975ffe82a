use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use smpc_core::metric::ContractionCertificate;

const DEFAULT: &str = include_str!("../../../configs/default.toml");

fn smpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smpc")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn summary(o: &Output) -> String {
    let stdout = String::from_utf8(o.stdout.clone()).unwrap();
    let lines: Vec<_> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "stdout: {stdout}");
    lines[0].to_string()
}

fn field(line: &str, key: &str) -> Option<String> {
    line.split(' ')
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")).map(str::to_string))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Short closed loop for the pipeline tests.
fn short_config() -> String {
    DEFAULT.replacen("steps = 100", "steps = 20", 1)
}

struct Designed {
    dir: tempfile::TempDir,
    config: PathBuf,
}

fn designed() -> &'static Designed {
    static D: OnceLock<Designed> = OnceLock::new();
    D.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), &short_config());
        let out = dir.path().join("out");
        let o = smpc(&["design", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Designed { dir, config }
    })
}

fn out_dir() -> PathBuf {
    designed().dir.path().join("out")
}

fn cfg() -> &'static str {
    designed().config.to_str().unwrap()
}

#[test]
fn design_writes_a_round_tripping_certificate() {
    let out = out_dir();
    let path = out.join("certificate.json");
    let text = std::fs::read_to_string(&path).unwrap();
    let cert = ContractionCertificate::load(&path).unwrap();
    assert!(cert.smpc_ready);
    assert_eq!(cert.to_json().unwrap() + "\n", text);
    for f in ["tightening.csv", "terminal.toml", "rho_candidates.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let tightening = std::fs::read_to_string(out.join("tightening.csv")).unwrap();
    assert_eq!(tightening.lines().next(), Some("# schema=1"));
}

#[test]
fn design_summary_is_one_line_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = smpc(&["design", "--config", cfg(), "--out", out.to_str().unwrap(), "--sdp-trace"]);
    assert_eq!(code(&o), 0);
    let line = summary(&o);
    assert!(line.starts_with("command=design status=ok exit=0"), "{line}");
    assert_eq!(field(&line, "smpc_ready").as_deref(), Some("true"));
    let rho: f64 = field(&line, "rho").unwrap().parse().unwrap();
    assert!(rho > 0.99 && rho < 1.0);
    let trace = std::fs::read_to_string(out.join("sdp_trace.csv")).unwrap();
    assert!(trace.lines().count() > 3);
}

#[test]
fn inflated_noise_is_not_smpc_ready() {
    let dir = tempfile::tempdir().unwrap();
    let text = DEFAULT.replacen("sigma_w = [1e-3, 1e-3, 1e-3]", "sigma_w = [10.0, 10.0, 10.0]", 1);
    let config = write_config(dir.path(), &text);
    let o = smpc(&["design", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(summary(&o).contains("status=not_smpc_ready"));
}

#[test]
fn unreachable_rate_interval_has_no_feasible_rho() {
    let dir = tempfile::tempdir().unwrap();
    let text = DEFAULT
        .replacen("rho_min = 0.5", "rho_min = 0.1", 1)
        .replacen("rho_max = 0.9999", "rho_max = 0.2", 1);
    let config = write_config(dir.path(), &text);
    let o = smpc(&["design", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn malformed_config_exits_with_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &DEFAULT.replacen("damper = 1.0", "damper = ", 1));
    let o = smpc(&["design", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let line = DEFAULT.lines().position(|l| l.starts_with("damper")).unwrap() + 1;
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains(&format!("line {line}")), "{stderr}");

    let cut = &DEFAULT[..DEFAULT.find("[mpc]").unwrap()];
    let config = write_config(dir.path(), cut);
    let o = smpc(&["design", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mpc"));

    let o = smpc(&["design", "--config", "/nonexistent/config.toml"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&smpc(&["frobnicate"])), 1);
}

#[test]
fn simulate_rejects_a_missing_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let o = smpc(&[
        "simulate",
        "--config",
        cfg(),
        "--out",
        dir.path().to_str().unwrap(),
        "--certificate",
        "/nonexistent/cert.json",
    ]);
    assert_eq!(code(&o), 1);
}

fn simulate(extra: &[&str]) -> (Output, String) {
    let dir = tempfile::tempdir().unwrap();
    let cert = out_dir().join("certificate.json");
    let mut args = vec![
        "simulate",
        "--config",
        cfg(),
        "--out",
        dir.path().to_str().unwrap(),
        "--certificate",
        cert.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let o = smpc(&args);
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap_or_default();
    (o, trace)
}

#[test]
fn simulate_writes_a_trace() {
    let (o, trace) = simulate(&[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&summary(&o), "steps").as_deref(), Some("20"));
    let lines: Vec<_> = trace.lines().collect();
    assert_eq!(lines[0], "# schema=1");
    assert_eq!(lines.len(), 2 + 21);
}

#[test]
fn zero_noise_gives_identical_state_columns() {
    let (o, trace) = simulate(&["--zero-noise"]);
    assert_eq!(code(&o), 0);
    let header: Vec<_> = trace.lines().nth(1).unwrap().split(',').collect();
    let xi: Vec<_> = (1..=6).map(|i| header.iter().position(|h| *h == format!("x_{i}")).unwrap()).collect();
    let zi: Vec<_> = (1..=6).map(|i| header.iter().position(|h| *h == format!("z_{i}")).unwrap()).collect();
    for line in trace.lines().skip(2) {
        let cells: Vec<_> = line.split(',').collect();
        for (a, b) in xi.iter().zip(&zi) {
            assert_eq!(cells[*a], cells[*b], "{line}");
        }
    }
}

#[test]
fn validate_passes_in_fast_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cert = out_dir().join("certificate.json");
    let o = smpc(&[
        "validate",
        "--config",
        cfg(),
        "--out",
        dir.path().to_str().unwrap(),
        "--certificate",
        cert.to_str().unwrap(),
        "--fast",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line = summary(&o);
    assert_eq!(field(&line, "realizations").as_deref(), Some("100"));
    let csv = std::fs::read_to_string(dir.path().join("open_loop_zero_gaussian.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("k,mean_err_M2,bound,containment,wilson_lo,wilson_hi"));
    // 100 runs leave Wilson intervals several percent wide
    let widths: Vec<f64> = csv
        .lines()
        .skip(3)
        .map(|l| {
            let c: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            c[5] - c[4]
        })
        .collect();
    assert!(widths.iter().all(|w| *w > 0.02));
}

#[test]
fn tampered_certificate_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(out_dir().join("certificate.json")).unwrap();
    let cert = ContractionCertificate::from_json(&text).unwrap();
    let key = format!("\"rho\": {:?}", cert.rho);
    assert!(text.contains(&key), "{key}");
    let tampered = text.replacen(&key, &format!("\"rho\": {}", cert.rho / 2.0), 1);
    let path = dir.path().join("tampered.json");
    std::fs::write(&path, tampered).unwrap();
    let o = smpc(&[
        "validate",
        "--config",
        cfg(),
        "--out",
        dir.path().to_str().unwrap(),
        "--certificate",
        path.to_str().unwrap(),
        "--fast",
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(summary(&o).contains("status=verification_failed"));
}

fn csv_outputs(dir: &Path) -> Vec<(String, String)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read_to_string(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn reproduce_is_deterministic_and_reuses_a_fresh_design() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &short_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    // b starts from a's certificate, written after the config
    std::fs::copy(out_dir().join("certificate.json"), b.join("certificate.json")).unwrap();
    let run = |out: &Path| {
        smpc(&[
            "reproduce",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--fast",
            "--seed",
            "7",
        ])
    };
    let oa = run(&a);
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(field(&summary(&oa), "design").as_deref(), Some("fresh"));
    let ob = run(&b);
    assert_eq!(code(&ob), 0);
    assert_eq!(field(&summary(&ob), "design").as_deref(), Some("cached"));
    let (fa, fb) = (csv_outputs(&a), csv_outputs(&b));
    let names: Vec<_> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for f in ["closed_loop.csv", "shrinking.csv", "trace.csv", "open_loop_periodic_gaussian.csv"] {
        assert!(names.contains(&f), "{f}");
    }
    // the design CSV only exists for a fresh design
    let fa: Vec<_> = fa.into_iter().filter(|(n, _)| n != "rho_candidates.csv").collect();
    assert_eq!(fa, fb);

    // touching the config invalidates the cache
    std::thread::sleep(std::time::Duration::from_millis(20));
    std::fs::write(&config, short_config()).unwrap();
    let oc = run(&b);
    assert_eq!(field(&summary(&oc), "design").as_deref(), Some("fresh"));
}
