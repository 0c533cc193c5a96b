use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn disspec(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disspec")).args(args).current_dir(dir).env("RUST_LOG", "warn").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(|l| l.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect()).collect()
}

const FAST_GDRT: &[&str] = &["--override", "gdrt-verify.density=40", "--override", "gdrt-verify.markov_widths=[0.04]", "--override", "gdrt-verify.expansion_tau0=[0.1]"];

#[test]
fn minimal_config_takes_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", "experiment = \"gdrt-verify\"\n");
    let mut args = vec!["gdrt-verify", "--config", &cfg, "--out", "o"];
    args.extend_from_slice(FAST_GDRT);
    let o = disspec(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let m = manifest(&tmp.path().join("o"));
    assert_eq!(m["experiment"], "gdrt-verify");
    let eff: toml::Table = m["config"].as_str().unwrap().parse().unwrap();
    assert_eq!(eff["freefermion-ds"]["l"].as_integer(), Some(10));
    assert_eq!(eff["freefermion-ds"]["grid_points"].as_integer(), Some(81));
    assert_eq!(eff["kbe-compare"]["t_max"].as_float(), Some(12.0));
    assert_eq!(eff["gdrt-verify"]["eta"].as_float(), Some(0.1));
    assert_eq!(eff["gdrt-verify"]["density"].as_integer(), Some(40));
    let names: Vec<&str> = m["files"].as_array().unwrap().iter().map(|f| f["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"gdrt_verify.json") && names.contains(&"gdrt_expansion.csv"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let bad_rate = write(d, "a.toml", "experiment = \"freefermion-ds\"\n[freefermion-ds]\ngamma = 0.01\ngamma_prime = 0.02\n");
    let o = disspec(&["freefermion-ds", "--config", &bad_rate], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma_prime"), "{}", stderr(&o));

    let empty = write(d, "b.toml", "");
    let o = disspec(&["gdrt-verify", "--config", &empty], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("experiment"), "{}", stderr(&o));

    let unknown = write(d, "c.toml", "experiment = \"gdrt-verify\"\n[gdrt-verify]\nfoo = 1\n");
    assert_eq!(disspec(&["gdrt-verify", "--config", &unknown], d).status.code(), Some(2));

    let unit = write(d, "e.toml", "experiment = \"dicke-scan\"\n[dicke-scan]\nenergy_unit = \"h0\"\n");
    assert_eq!(disspec(&["dicke-scan", "--config", &unit], d).status.code(), Some(2));

    let other = write(d, "f.toml", "experiment = \"dicke-scan\"\n");
    assert_eq!(disspec(&["gdrt-verify", "--config", &other], d).status.code(), Some(2));

    assert_eq!(disspec(&["gdrt-verify", "--workers", "0"], d).status.code(), Some(2));
    assert_eq!(disspec(&["gdrt-verify", "--override", "gdrt-verify.t=-1"], d).status.code(), Some(2));
    assert_eq!(disspec(&["kbe-compare", "--override", "kbe-compare.chi1_sign=\"sideways\""], d).status.code(), Some(2));
    assert_eq!(disspec(&["gdrt-verify", "--config", "missing.toml"], d).status.code(), Some(2));
}

#[test]
fn resource_refusal_exits_with_code_four() {
    let tmp = tempfile::tempdir().unwrap();
    let o = disspec(
        &["dicke-quench", "--out", "o", "--override", "dicke-quench.n_atoms=60", "--override", "dicke-quench.lindblad=true", "--override", "dicke-quench.lindblad_cutoff=40", "--override", "dicke-quench.g_over_gc=0.9"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn freefermion_spectrum_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = disspec(&["freefermion-ds", "--out", "o", "--override", "freefermion-ds.l=4", "--override", "freefermion-ds.n=2", "--override", "freefermion-ds.t_end=60"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let path = tmp.path().join("o/ds_spectrum.csv");
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("omega,chi_abs,chi_phase"));
    let rows = csv_rows(&path);
    assert!(rows.len() >= 81);
    assert!(rows.windows(2).all(|w| w[1][0] >= w[0][0]));
    assert!(rows.iter().all(|r| r[1] >= 0.0));
    assert!(tmp.path().join("o/ds_peaks.csv").exists());
}

#[test]
fn drt_comparison_spans_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let o = disspec(&["kbe-compare", "--out", "o", "--override", "kbe-compare.l=4", "--override", "kbe-compare.filling=2", "--override", "kbe-compare.dt=0.05"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&tmp.path().join("o/drt_compare.csv"));
    assert_eq!(rows[0][0], 0.0);
    assert!((rows.last().unwrap()[0] - 12.0).abs() < 1e-9);
    let imb = csv_rows(&tmp.path().join("o/kbe_imbalance.csv"));
    assert_eq!(imb.len(), rows.len());
    assert!(imb.iter().all(|r| (r[2] - 2.0).abs() < 1e-3));
}

#[test]
fn identical_runs_give_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |out: &str| {
        let mut args = vec!["gdrt-verify", "--out", out];
        args.extend_from_slice(FAST_GDRT);
        let o = disspec(&args, tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
        let m = manifest(&tmp.path().join(out));
        (m["config_sha256"].clone(), m["files"].clone())
    };
    assert_eq!(run("a"), run("b"));
}
