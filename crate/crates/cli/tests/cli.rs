use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_adaprompt");

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(BIN).current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "adaprompt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Small positive/negative corpus, base text and labeled data.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let mut corpus = String::new();
    for (i, (adj, end)) in [
        ("charming", "good"),
        ("lovely", "great"),
        ("dull", "bad"),
        ("tedious", "awful"),
    ]
    .iter()
    .cycle()
    .take(40)
    .enumerate()
    {
        corpus.push_str(&format!("the film was {adj} , it was {end} . ({i})\n"));
    }
    std::fs::write(p.join("corpus.txt"), corpus).unwrap();
    std::fs::write(
        p.join("base.txt"),
        "overall it was good .\noverall it was bad .\nit was great .\nit was awful .\n",
    )
    .unwrap();
    std::fs::write(
        p.join("data.jsonl"),
        [
            r#"{"id":"a","text":"a charming film","label":"positive"}"#,
            r#"{"id":"b","text":"a dull film","label":"negative"}"#,
            r#"{"id":"c","text":"lovely and charming","label":"positive"}"#,
            r#"{"id":"d","text":"tedious and dull","label":"negative"}"#,
        ]
        .join("\n"),
    )
    .unwrap();
    std::fs::write(p.join("syn.txt"), "good = great\nbad = awful\n").unwrap();
    dir
}

const TEMPLATE: [&str; 4] = [
    "--template",
    "toy",
    "--template-source",
    "{input} overall it was {mask} .",
];
const LABELS: [&str; 4] = ["--label", "positive=good", "--label", "negative=bad"];

#[test]
fn index_pretrain_adapt_augment_eval() {
    let dir = workspace();
    let p = dir.path();
    run(p, &["index", "--corpus", "corpus.txt", "--out", "idx"]);
    let out = run(p, &["pretrain", "--corpus", "base.txt", "--out", "base.json"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("count-"));

    let mut args = vec![
        "adapt",
        "--index",
        "idx",
        "--dataset",
        "data.jsonl",
        "--id-field",
        "id",
        "--model",
        "base.json",
    ];
    args.extend(TEMPLATE);
    args.extend(LABELS);
    args.extend([
        "--top-o",
        "2",
        "--k",
        "5",
        "--out",
        "ret",
        "--train-out",
        "adapted.json",
    ]);
    run(p, &args);
    let sentences = std::fs::read_to_string(p.join("ret/retrieved.txt")).unwrap();
    let provenance = std::fs::read_to_string(p.join("ret/retrieved.provenance.jsonl")).unwrap();
    assert!(!sentences.is_empty());
    assert_eq!(sentences.lines().count(), provenance.lines().count());
    assert!(p.join("adapted.json").is_file());

    let mut args = vec![
        "augment-verbalizer",
        "--dataset",
        "data.jsonl",
        "--model",
        "adapted.json",
        "--synonyms",
        "syn.txt",
    ];
    args.extend(TEMPLATE);
    args.extend(LABELS);
    args.extend(["--out", "aug.json"]);
    run(p, &args);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("aug.json")).unwrap()).unwrap();
    assert!(report["verbalizer"].is_object(), "{report}");
}

#[test]
fn run_then_eval() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(
        p.join("run.toml"),
        r#"
        output_dir = "out"
        [task]
        templates = [{ id = "a", source = "{input} overall it was {mask} ." }, { id = "b", source = "{input} it was {mask} ." }]
        labels = [{ name = "positive", words = ["good"] }, { name = "negative", words = ["bad"] }]
        [data]
        eval = "data.jsonl"
        schema = { id_field = "id" }
        [corpus]
        paths = ["corpus.txt"]
        [backend]
        kind = "count"
        pretrain = ["base.txt"]
        [nli]
        kind = "lexical"
        synonyms = "syn.txt"
        [pipeline]
        plan = { top_o = 2, k = 5 }
        "#,
    )
    .unwrap();
    let out = run(p, &["run", "--config", "run.toml"]);
    let printed = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(printed.contains('/') && printed.contains('('), "{printed}");

    let out = run(
        p,
        &[
            "eval",
            "--predictions",
            "out/a/predictions.jsonl",
            "out/b/predictions.jsonl",
            "--gold",
            "data.jsonl",
            "--id-field",
            "id",
        ],
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("out/metrics.json")).unwrap()).unwrap();
    assert_eq!(report["per_pattern"], metrics["per_pattern"]);
    assert_eq!(report["mean"], metrics["mean"]);
}

#[test]
fn serve_over_stdio_and_as_a_command_backend() {
    let dir = workspace();
    let p = dir.path();
    run(p, &["pretrain", "--corpus", "base.txt", "--out", "base.json"]);

    let mut child = Command::new(BIN)
        .current_dir(p)
        .args(["serve", "--model", "base.json", "--synonyms", "syn.txt"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut stdout = BufReader::new(child.stdout.take().unwrap());
    let mut ask = |req: &str| {
        writeln!(stdin, "{req}").unwrap();
        let mut line = String::new();
        stdout.read_line(&mut line).unwrap();
        serde_json::from_str::<serde_json::Value>(&line).unwrap()
    };
    let r = ask(r#"{"op":"predict","text":"overall it was <mask> .","mask_token":"<mask>","top_n":2}"#);
    assert_eq!(r["predictions"].as_array().unwrap().len(), 2);
    let r = ask(r#"{"op":"nli","premise":"it was good","hypothesis":"it was great"}"#);
    assert!(r["entail"].as_f64().unwrap() > 0.5, "{r}");
    let r = ask("{oops");
    assert_eq!(r["ok"], false);
    drop(stdin);
    assert!(child.wait().unwrap().success());

    // the same server drives `adapt` through the cmd: transport
    run(p, &["index", "--corpus", "corpus.txt", "--out", "idx"]);
    let endpoint = format!("cmd:{BIN} serve --model {}", p.join("base.json").display());
    let mut args = vec![
        "adapt",
        "--index",
        "idx",
        "--dataset",
        "data.jsonl",
        "--endpoint",
        &endpoint,
    ];
    args.extend(TEMPLATE);
    args.extend(LABELS);
    args.extend(["--top-o", "2", "--k", "5", "--out", "ret"]);
    run(p, &args);
    let local = {
        let mut args = vec![
            "adapt",
            "--index",
            "idx",
            "--dataset",
            "data.jsonl",
            "--model",
            "base.json",
        ];
        args.extend(TEMPLATE);
        args.extend(LABELS);
        args.extend(["--top-o", "2", "--k", "5", "--out", "ret-local"]);
        run(p, &args);
        std::fs::read(p.join("ret-local/retrieved.txt")).unwrap()
    };
    assert_eq!(std::fs::read(p.join("ret/retrieved.txt")).unwrap(), local);
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = workspace();
    let out = Command::new(BIN)
        .current_dir(dir.path())
        .args(["run", "--config", "missing.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));
}
