use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use alignlab::lexicon::{load_phone_class_map, GraphemeMap, NaturalClassMap};

fn alignlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alignlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = alignlab(args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_train_align_eval_sweep_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    ok(&["synth", "--out", s(&corpus), "--minutes", "0.2", "--speakers", "2", "--seed", "5"]);
    let lexicon = root.join("lexicon.txt");
    let graphemes = format!("syn={}", s(&corpus.join("graphemes.tsv")));
    ok(&["dict", "--corpus", s(&corpus), "--graphemes", &graphemes, "--out", s(&lexicon)]);
    assert_eq!(
        std::fs::read_to_string(&lexicon).unwrap(),
        std::fs::read_to_string(corpus.join("lexicon.txt")).unwrap()
    );

    let model = root.join("m/final.mdl");
    let stages = root.join("stages");
    ok(&[
        "train", "--corpus", s(&corpus), "--lexicon", s(&lexicon), "--schedule", "4_2_2_2", "--out", s(&model),
        "--stage-dir", s(&stages),
    ]);
    assert!(model.is_file());
    let log = std::fs::read_to_string(stages.join("stages.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);

    let hyp = root.join("hyp");
    let out = ok(&["align", "--model", s(&model), "--corpus", s(&corpus), "--lexicon", s(&lexicon), "--out", s(&hyp)]);
    assert!(out.contains("aligned"), "{out}");
    let prefix = root.join("eval/run");
    let out = ok(&[
        "eval", "--reference", s(&corpus), "--hypothesis", s(&hyp), "--natural-classes",
        s(&corpus.join("natural_classes.txt")), "--out", s(&prefix),
    ]);
    assert!(out.contains("mean absolute"), "{out}");
    assert!(root.join("eval/run_report.json").is_file());

    let config = root.join("sweep.conf");
    std::fs::write(
        &config,
        "dataset.syn = corpus\nlexicon = lexicon.txt\nclass_map.identity = identity\nschedules = 2_1_1_1,3_1_1_1\nstore = runs.jsonl\n",
    )
    .unwrap();
    ok(&["sweep", "custom", "--config", s(&config)]);
    assert_eq!(std::fs::read_to_string(root.join("runs.jsonl")).unwrap().lines().count(), 2);
    let out = ok(&["report", s(&root.join("runs.jsonl")), "--out", s(&root.join("report"))]);
    assert!(out.contains("best:"), "{out}");
    assert!(root.join("report/best.txt").is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let bad_schedule = alignlab(&["train", "--corpus", "x", "--lexicon", "y", "--schedule", "5_3_2", "--out", "z"]);
    assert_eq!(bad_schedule.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad_schedule.stderr).contains("5_3_2"));

    let no_corpus = alignlab(&["augment", "--corpus", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(no_corpus.status.code(), Some(2));

    let config = dir.path().join("bad.conf");
    std::fs::write(&config, "store = x.jsonl\ncolour = blue\n").unwrap();
    assert_eq!(alignlab(&["sweep", "exp1", "--config", s(&config)]).status.code(), Some(1));
    assert_eq!(alignlab(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(alignlab(&["--help"]).status.code(), Some(0));
}

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

#[test]
fn shipped_class_files_cover_the_grapheme_inventory() {
    let mut inventory = std::collections::BTreeSet::new();
    for lang in ["north", "south"] {
        let map = GraphemeMap::load(lang, &data(&format!("graphemes/{lang}.tsv"))).unwrap();
        inventory.extend(map.inventory().iter().cloned());
    }
    assert_eq!(inventory.len(), 30);
    for (file, classes) in [("4-classes.txt", 4), ("9-classes.txt", 9), ("22-classes.txt", 22)] {
        let map = load_phone_class_map(&data(&format!("classes/{file}")), &inventory).unwrap();
        assert_eq!(map.class_count(), classes, "{file}");
    }
    let natural = NaturalClassMap::load(&data("classes/natural-classes.txt")).unwrap();
    for p in &inventory {
        assert!(natural.class_of(p).is_some(), "{p} has no natural class");
    }
}
