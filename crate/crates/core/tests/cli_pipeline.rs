use std::path::Path;
use std::process::Command;

use dpm::cli::main_with_args;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("dpm").chain(args.iter().copied()))
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_reader(std::fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_from_simulation_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = |rel: &str| dir.path().join(rel).to_string_lossy().into_owned();

    assert_eq!(run(&["simulate", "--out", &p("sim"), "--seed", "3", "--n-subjects", "60"]), 0);
    let specs = p("sim/specs.json");
    assert_eq!(run(&["ingest", "--input", &p("sim/cohort.csv"), "--specs", &specs, "--out", &p("clean")]), 0);
    assert!(Path::new(&p("clean/rejections.csv")).exists());

    assert_eq!(
        run(&["split", "--input", &p("clean/cohort.csv"), "--specs", &specs, "--out", &p("split"), "--seed", "3"]),
        0
    );
    let (train, test) = (p("split/train.csv"), p("split/test.csv"));

    assert_eq!(run(&["fit", "--train", &train, "--specs", &specs, "--out", &p("fit")]), 0);
    let summary = json(p("fit/summary.json"));
    assert!(summary["bic"].as_f64().unwrap().is_finite());

    assert_eq!(
        run(&["predict", "--test", &test, "--specs", &specs, "--model", &p("fit/model.json"), "--out", &p("pred")]),
        0
    );
    let nmae = json(p("pred/metrics.json"))["nmae"].as_f64().unwrap();
    assert!(nmae > 0.0 && nmae < 0.5, "nmae {nmae}");

    assert_eq!(run(&["bootstrap", "--train", &train, "--specs", &specs, "--out", &p("boot"), "--n", "3"]), 0);
    for f in ["ensemble.json", "ordering.csv", "consensus.json", "curves.csv", "manifest.json"] {
        assert!(Path::new(&p("boot")).join(f).exists(), "{f}");
    }
    assert_eq!(json(p("boot/ensemble.json"))["members"].as_array().unwrap().len(), 3);

    assert_eq!(
        run(&[
            "classify", "--ensemble", &p("boot"), "--train", &train, "--test", &test, "--specs", &specs, "--out",
            &p("cls"),
        ]),
        0
    );
    let auc = json(p("cls/metrics.json"))["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    assert_eq!(run(&["order", "--ensemble", &p("boot"), "--out", &p("order")]), 0);
    assert_eq!(
        std::fs::read(p("order/ordering.csv")).unwrap(),
        std::fs::read(p("boot/ordering.csv")).unwrap()
    );

    assert_eq!(
        run(&[
            "report", "--ensemble", &p("boot"), "--train", &train, "--specs", &specs, "--test", &test, "--out",
            &p("report"),
        ]),
        0
    );
    let metrics = json(p("report/metrics.json"));
    assert!(metrics["bic"].as_f64().is_some());
    assert!(metrics["auc"].as_f64().is_some());
    for f in ["trajectories.csv", "trajectories.svg", "likelihoods.csv", "likelihoods.svg"] {
        assert!(Path::new(&p("report")).join(f).exists(), "{f}");
    }

    let manifest = json(p("fit/manifest.json"));
    assert_eq!(manifest["command"], "fit");
    assert_eq!(manifest["inputs"]["train.csv"].as_str().unwrap().len(), 64);
}

#[test]
fn outlier_simulation_keeps_the_clean_copy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let out = out.to_str().unwrap();
    assert_eq!(
        run(&["simulate", "--out", out, "--n-subjects", "20", "--outlier-fraction", "0.1"]),
        0
    );
    for f in ["cohort.csv", "cohort_clean.csv", "outliers.csv", "truth_model.json"] {
        assert!(Path::new(out).join(f).exists(), "{f}");
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dpm");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["--help"]), Some(0));
    assert_eq!(status(&["fit", "--no-such-flag"]), Some(1));
    assert_eq!(
        status(&["fit", "--train", "/nonexistent/train.csv", "--specs", "/nonexistent/specs.json", "--out", "/tmp/x"]),
        Some(2)
    );
}
