use std::path::Path;
use std::process::Command;

use tvcv::io::{read_matrix, read_vector};
use tvcv::sweep::read_rows_csv;

fn tvcv(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tvcv"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run tvcv")
}

fn write_config(dir: &Path) {
    std::fs::write(dir.join("run.cfg"), "scene = blobs\nrows = 8\ncols = 8\nm_complex = 20\nsnr = 5\n").unwrap();
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    for out in ["a", "b"] {
        let o = tvcv(&["gen", "--config", "run.cfg", "--seed", "7", "--out", out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["A.bin", "y.bin", "x0.bin"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    // manifests differ only in the echoed output directory
    let manifest = |d: &str| -> Vec<String> {
        std::fs::read_to_string(dir.path().join(d).join("manifest.txt"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("out "))
            .map(str::to_string)
            .collect()
    };
    assert_eq!(manifest("a"), manifest("b"));
    let a = read_matrix(dir.path().join("a/A.bin")).unwrap();
    assert_eq!(a.shape(), (40, 64));
    assert_eq!(read_vector(dir.path().join("a/y.bin")).unwrap().len(), 40);
}

#[test]
fn solve_cve_and_sweep_agree() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let run = |args: &[&str]| {
        let mut all = vec!["--config", "run.cfg", "--data", "data"];
        all.extend_from_slice(args);
        let o = tvcv(&all, dir.path());
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    run(&["gen", "--out", "data"]);
    run(&["solve", "--lambda-l1", "0.5", "--lambda-tv", "0.5", "--out", "s"]);
    assert_eq!(read_vector(dir.path().join("s/x_hat.bin")).unwrap().len(), 64);
    run(&["cve", "--mode", "approx", "--lambda-l1", "0.5", "--lambda-tv", "0.5", "--solution", "s/x_hat.bin", "--out", "c"]);
    run(&["sweep", "--lambda-l1", "0.5,5", "--lambda-tv", "0.5", "--folds", "5", "--out", "w"]);
    let single = read_rows_csv(&dir.path().join("c/cve_approx.csv")).unwrap();
    let grid = read_rows_csv(&dir.path().join("w/sweep.csv")).unwrap();
    assert_eq!(grid.len(), 2);
    let rel = (single[0].cve_approx_total - grid[0].cve_approx_total).abs() / grid[0].cve_approx_total;
    assert!(rel < 1e-6, "{} vs {}", single[0].cve_approx_total, grid[0].cve_approx_total);
    assert!(grid[0].cve_kfold_mean.is_finite());
    let table = run(&["report", "--csv", "w/sweep.csv"]);
    assert!(table.contains('*'));
}

#[test]
fn bad_input_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tvcv(&["solve", "--data", "missing"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(dir.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    let o = tvcv(&["gen", "--config", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}
