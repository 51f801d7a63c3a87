use std::process::Command;

fn corpusforge(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_corpusforge")).args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let d = dir.to_str().unwrap();

    assert_eq!(corpusforge(&["run", "--out", d]).0, 2);
    assert_eq!(corpusforge(&["run", "--seed", "Ada Lovelace", "--strategy", "eager", "--out", d]).0, 2);

    let (code, out, err) = corpusforge(&["run", "--seed", "Ada Lovelace", "--budget", "6", "--out", d]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("Raw candidate [[wikilinks]]"));
    assert_eq!(corpusforge(&["run", "--seed", "Ada Lovelace", "--out", d]).0, 1);

    let (code, out, _) = corpusforge(&["stats", "--run-dir", d]);
    assert_eq!(code, 0);
    assert!(out.contains("completed"));
}

#[test]
fn graph_file_drives_the_mock() {
    let tmp = tempfile::tempdir().unwrap();
    let graph = tmp.path().join("graph.json");
    std::fs::write(&graph, r#"{"Atlas": ["Node A", "Node B"], "Node A": ["Node C"]}"#).unwrap();
    let dir = tmp.path().join("run");
    let (code, out, err) =
        corpusforge(&["run", "--seed", "Atlas", "--graph", graph.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("4 articles"), "{out}");
}
