use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn dynthick(args: &[&str], scenario: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynthick"))
        .args(args)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["x", "y", "tag", "parameter"]);
    r.records().map(Result::unwrap).collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn malformed_scenarios_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let good = std::fs::read_to_string(scenario("model")).unwrap();
    let edit = |f: &dyn Fn(&mut serde_json::Value)| {
        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        f(&mut v);
        v.to_string()
    };
    let cases = [
        ("syntax", good.replacen('{', "", 1)),
        ("unknown_key", edit(&|v| v["epsilon_typo"] = 1.into())),
        ("negative_eps", edit(&|v| v["eps"] = (-1.0).into())),
        ("dimension", edit(&|v| v["seed_point"] = serde_json::json!([0.1]))),
        ("grid", edit(&|v| v["grid"] = 4.into())),
    ];
    for (name, text) in cases {
        assert_ne!(text, good, "case {name} did not alter the scenario");
        let path = dir.path().join(format!("{name}.json"));
        std::fs::write(&path, text).unwrap();
        let out = dir.path().join(format!("out_{name}"));
        let o = dynthick(&["verify"], &path, &out);
        assert_eq!(o.status.code(), Some(2), "case {name}");
        assert!(!out.exists(), "case {name} wrote artifacts");
    }
    let o = dynthick(&["verify"], &dir.path().join("missing.json"), &dir.path().join("out_missing"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn figure_files_follow_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynthick(&["figure"], &scenario("model"), dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tags = [
        ("block.csv", &["boundary", "Nplus", "Wu", "Ws"][..]),
        ("fibers.csv", &["fiber"]),
        ("selector.csv", &["Sminus", "Splus", "Sminus_on_Su", "Splus_on_Wu"]),
        ("orbits.csv", &["phi_orbit", "theta_orbit"]),
    ];
    for (file, allowed) in tags {
        let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
        assert!(text.starts_with("x,y,tag,parameter\n"));
        let rs = rows(&dir.path().join(file));
        assert!(!rs.is_empty(), "{file} is empty");
        for r in &rs {
            assert_eq!(r.len(), 4);
            assert!(allowed.contains(&&r[2]), "{file}: tag {}", &r[2]);
            assert!(num(&r[0]).is_finite() && num(&r[1]).is_finite());
            for field in [&r[0], &r[1], &r[3]] {
                // nine significant digits at most
                let digits = field.split('e').next().unwrap().chars().filter(char::is_ascii_digit).collect::<String>();
                assert!(digits.trim_start_matches('0').len() <= 9, "{file}: {field}");
                // labels on the descending sphere are infinite
                assert!(num(field).is_finite() || field == "inf", "{file}: {field}");
            }
        }
        for tag in allowed {
            assert!(rs.iter().any(|r| &r[2] == *tag), "{file}: no {tag} rows");
        }
    }

    // the top of the selector over the unstable disk: phi_{-2}(sqrt 2, 0)
    let sel = rows(&dir.path().join("selector.csv"));
    let top = 2f64.sqrt() * (-2f64).exp();
    assert!(sel
        .iter()
        .any(|r| &r[2] == "Splus_on_Wu" && (num(&r[0]) - top).abs() < 1e-4 && num(&r[1]).abs() < 1e-9));

    // fibers at T = 1.2 lie on the label curve u^2 e^{2T} - v^2 e^{-2T} = 2
    let fibers: Vec<_> = rows(&dir.path().join("fibers.csv"))
        .into_iter()
        .filter(|r| (num(&r[3]) - 1.2).abs() < 1e-12)
        .collect();
    assert!(fibers.len() > 20);
    for r in fibers {
        let (u, v) = (num(&r[0]), num(&r[1]));
        let expect = (-1.2f64).exp() * (2.0 + v * v * (-2.4f64).exp()).sqrt();
        assert!((u.abs() - expect).abs() < 1e-7, "({u}, {v})");
    }
}

#[test]
fn figure_rejects_non_planar_fields() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(scenario("model")).unwrap()).unwrap();
    v["field"]["catalog"]["n"] = 3.into();
    v["seed_point"] = serde_json::json!([0.1, -0.1, 0.1]);
    let text = v.to_string();
    let path = dir.path().join("model3.json");
    std::fs::write(&path, text).unwrap();
    let o = dynthick(&["figure"], &path, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stage_reports_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dynthick"))
        .args(["homology", "--grid", "32", "--seed", "3", "--scenario"])
        .arg(scenario("torus_saddle"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("homology.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 3);
    assert_eq!(report["homology"]["below"][0]["grid"], 32);
    assert_eq!(report["homology"]["passed"], true);
    assert!(report["block"].is_null());
}
